//! Reproducible experiment drivers behind the command-line tool.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bessel;
use crate::config::{check_budget_parity, ExperimentConfig, Method};
use crate::error::{DsfError, Result};
use crate::eval::{self, EvalResult};
use crate::loss::{self, PropositionTable};
use crate::train::{self, derive_rng, MetricsRecord, TrainState};
use crate::vmf::{self, StabilizationPolicy, UnitVector, VmfDistribution};

pub const TABLE1_TAUS: [f64; 4] = [1.0, 0.5, 0.2, 0.1];
pub const TABLE1_KS: [u64; 3] = [256, 4096, 65536];

/// Loss at the cosine optimum for the temperature / queue-size grid.
pub fn table1() -> PropositionTable {
    loss::proposition_table(&TABLE1_TAUS, &TABLE1_KS).expect("static grid is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaCurvePoint {
    pub r_bar: f64,
    /// Closed-form approximation without any stabilization; infinite at `r_bar = 1`.
    pub kappa_raw: f64,
    /// After scaling `r_bar` by `lambda_r` and dividing by `p`.
    pub kappa_stabilized: f64,
}

/// Both concentration curves on the grid `r_bar = i / points`, `i = 1..=points`.
pub fn kappa_curves(p: usize, lambda_r: f64, points: usize) -> Result<Vec<KappaCurvePoint>> {
    if p < 2 {
        return Err(DsfError::config(
            "p",
            format!("dimension must be >= 2, got {p}"),
        ));
    }
    if points == 0 {
        return Err(DsfError::config("points", "need at least one grid point"));
    }
    let policy = StabilizationPolicy {
        lambda_r,
        ..StabilizationPolicy::default()
    };
    policy.validate()?;
    Ok((1..=points)
        .map(|i| {
            let r = i as f64 / points as f64;
            KappaCurvePoint {
                r_bar: r,
                kappa_raw: bessel::kappa_approx(p, r),
                kappa_stabilized: policy.kappa_for(p, r),
            }
        })
        .collect())
}

pub fn kappa_curves_csv(points: &[KappaCurvePoint]) -> String {
    let mut s = String::from("r_bar,kappa_raw,kappa_stabilized\n");
    for c in points {
        let _ = writeln!(s, "{},{},{}", c.r_bar, c.kappa_raw, c.kappa_stabilized);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremTrial {
    pub trial: usize,
    pub p: usize,
    pub tau: f64,
    pub negatives: usize,
    pub kappa: f64,
    pub l_div: f64,
    pub l_cos: f64,
    pub abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheckReport {
    pub seed: u64,
    pub trials: usize,
    pub tolerance: f64,
    pub max_abs_diff: Option<f64>,
    pub passed: bool,
    pub results: Vec<TheoremTrial>,
}

pub const THEOREM_TOLERANCE: f64 = 1e-8;
const THEOREM_DIMS: [usize; 3] = [3, 8, 64];
const THEOREM_TAUS: [f64; 3] = [0.2, 0.5, 1.0];
const THEOREM_STREAM: u64 = 20;

/// Randomized single-view equivalence checks cycling through every
/// `(p, tau)` pair, with 1 to 16 uniformly drawn negatives each.
pub fn theorem_check(seed: u64, trials: usize) -> Result<TheoremCheckReport> {
    let mut results = Vec::with_capacity(trials);
    for trial in 0..trials {
        let p = THEOREM_DIMS[trial % 3];
        let tau = THEOREM_TAUS[(trial / 3) % 3];
        let mut rng = derive_rng(seed, THEOREM_STREAM, trial as u64);
        let k = rng.random_range(1..=16usize);
        let mut draw = || UnitVector::new(vmf::uniform_unit(p, &mut rng));
        let zi = draw()?;
        let zp = draw()?;
        let negs = (0..k).map(|_| draw()).collect::<Result<Vec<_>>>()?;
        let r = loss::theorem_equivalence_check(&zi, &zp, &negs, tau, p)?;
        results.push(TheoremTrial {
            trial,
            p,
            tau,
            negatives: k,
            kappa: r.kappa,
            l_div: r.l_div,
            l_cos: r.l_cos,
            abs_diff: r.abs_diff,
        });
    }
    let max_abs_diff = results.iter().map(|r| r.abs_diff).reduce(f64::max);
    Ok(TheoremCheckReport {
        seed,
        trials,
        tolerance: THEOREM_TOLERANCE,
        passed: max_abs_diff.is_none_or(|m| m < THEOREM_TOLERANCE),
        max_abs_diff,
        results,
    })
}

/// Monte-Carlo estimate of `KL(di || dj)` from `n` draws of `di`: mean and standard error.
pub fn kl_monte_carlo(
    di: &VmfDistribution<f64>,
    dj: &VmfDistribution<f64>,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(DsfError::InvalidInput(
            "Monte-Carlo estimate needs at least 2 samples".into(),
        ));
    }
    let (ci, cj) = (di.log_normalizer(), dj.log_normalizer());
    let (mi, mj) = (di.mu().as_slice(), dj.mu().as_slice());
    let (ki, kj) = (di.kappa(), dj.kappa());
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (count, x) in di.sample(n, seed)?.iter().enumerate() {
        let x = x.as_slice();
        let d = (ci + ki * crate::scalar::dot(mi, x)) - (cj + kj * crate::scalar::dot(mj, x));
        // Welford
        let delta = d - mean;
        mean += delta / (count + 1) as f64;
        m2 += delta * (d - mean);
    }
    let var = m2 / (n - 1) as f64;
    Ok((mean, (var / n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaApproxPoint {
    pub p: usize,
    pub r_bar: f64,
    pub approx: f64,
    pub newton: f64,
    pub rel_error: f64,
}

/// Closed-form concentration against the Newton inverse of `A_p` on a grid of `r_bar`.
pub fn kappa_approx_errors(dims: &[usize], r_grid: &[f64]) -> Result<Vec<KappaApproxPoint>> {
    let mut out = Vec::new();
    for &p in dims {
        for &r in r_grid {
            let approx = bessel::kappa_approx(p, r);
            let newton = bessel::invert_ratio_newton(p, r, 1e-14)?;
            out.push(KappaApproxPoint {
                p,
                r_bar: r,
                approx,
                newton,
                rel_error: ((approx - newton) / newton).abs(),
            });
        }
    }
    Ok(out)
}

/// Outcome of training and evaluating one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub views_per_group: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub temperature: f64,
    pub steps: u64,
    pub final_loss: f64,
    /// Mean loss over the last epoch.
    pub last_epoch_loss: f64,
    pub final_margin: f64,
    pub max_kappa: Option<f64>,
    pub eval: EvalResult,
    pub wall_secs: f64,
}

pub struct RunArtifacts {
    pub summary: RunSummary,
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    pub embeddings: (eval::EmbeddingTable, eval::EmbeddingTable),
}

/// Generates the dataset, trains, and evaluates the frozen encoder.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let start = Instant::now();
    let data = train::generate_dataset(&cfg.dataset, cfg.seed)?;
    let (state, metrics) = train::train(cfg, &data)?;
    let (tr, te) = eval::embed_dataset(&state.encoder, &data)?;
    let result = eval::evaluate(
        &tr,
        &te,
        cfg.eval.knn_k,
        cfg.eval.probe_epochs,
        cfg.eval.probe_lr,
    )?;
    let last = metrics
        .last()
        .ok_or_else(|| DsfError::InvalidInput("run produced no steps".into()))?;
    let last_epoch: Vec<f64> = metrics
        .iter()
        .filter(|r| r.epoch == last.epoch)
        .map(|r| r.loss)
        .collect();
    let summary = RunSummary {
        method: cfg.method,
        views_per_group: cfg.augmentation.views_per_group,
        batch_size: cfg.optimizer.batch_size,
        seed: cfg.seed,
        temperature: cfg.temperature(),
        steps: metrics.len() as u64,
        final_loss: last.loss,
        last_epoch_loss: last_epoch.iter().sum::<f64>() / last_epoch.len() as f64,
        final_margin: last.margin,
        max_kappa: metrics.iter().filter_map(|r| r.max_kappa).reduce(f64::max),
        eval: result,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    Ok(RunArtifacts {
        summary,
        state,
        metrics,
        embeddings: (tr, te),
    })
}

pub const DEFAULT_VIEW_SWEEP: [usize; 3] = [1, 2, 4];

/// Plain cosine at `m = 1`, then every multi-view method at each `m` in
/// `views`, with the batch size chosen so that `B x 2m` equals the base budget.
pub fn default_suite(base: &ExperimentConfig, views: &[usize]) -> Result<Vec<ExperimentConfig>> {
    let budget = base.budget();
    let with = |method: Method, m: usize| -> Result<ExperimentConfig> {
        if budget % (2 * m) != 0 {
            return Err(DsfError::config(
                "augmentation.views_per_group",
                format!("budget {budget} is not divisible by 2m = {}", 2 * m),
            ));
        }
        let mut c = base.clone();
        c.method = method;
        c.augmentation.views_per_group = m;
        c.optimizer.batch_size = budget / (2 * m);
        c.validate()?;
        Ok(c)
    };
    let mut suite = vec![with(Method::Cosine, 1)?];
    for &m in views {
        for method in [Method::LossAvg, Method::FeaAvg, Method::Dsf] {
            suite.push(with(method, m)?);
        }
    }
    Ok(suite)
}

/// Runs every config once per seed, configs in order within each seed.
pub fn compare(configs: &[ExperimentConfig], seeds: &[u64]) -> Result<Vec<RunSummary>> {
    check_budget_parity(configs)?;
    if seeds.is_empty() {
        return Err(DsfError::InvalidInput(
            "comparison needs at least one seed".into(),
        ));
    }
    let mut out = Vec::with_capacity(configs.len() * seeds.len());
    for &seed in seeds {
        for c in configs {
            let mut c = c.clone();
            c.seed = seed;
            out.push(run_experiment(&c)?.summary);
        }
    }
    Ok(out)
}

pub const COMPARE_HEADER: &str =
    "method,m,batch_size,seed,tau,steps,final_loss,last_epoch_loss,final_margin,max_kappa,knn_k,knn_accuracy,linear_accuracy,wall_secs";

pub fn compare_csv(runs: &[RunSummary]) -> String {
    let mut s = String::from(COMPARE_HEADER);
    s.push('\n');
    for r in runs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.2}",
            r.method,
            r.views_per_group,
            r.batch_size,
            r.seed,
            r.temperature,
            r.steps,
            r.final_loss,
            r.last_epoch_loss,
            r.final_margin,
            r.max_kappa.map(|k| k.to_string()).unwrap_or_default(),
            r.eval.knn_k,
            r.eval.knn_accuracy,
            r.eval.probe_accuracy,
            r.wall_secs
        );
    }
    s
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub views_per_group: usize,
    pub runs: usize,
    pub knn_mean: f64,
    pub knn_sd: f64,
    pub linear_mean: f64,
    pub linear_sd: f64,
}

/// Aggregates runs by `(method, m)` in first-seen order.
pub fn summarize(runs: &[RunSummary]) -> Vec<MethodSummary> {
    let mut keys: Vec<(Method, usize)> = Vec::new();
    for r in runs {
        if !keys.contains(&(r.method, r.views_per_group)) {
            keys.push((r.method, r.views_per_group));
        }
    }
    keys.into_iter()
        .map(|(method, m)| {
            let sel: Vec<&RunSummary> = runs
                .iter()
                .filter(|r| r.method == method && r.views_per_group == m)
                .collect();
            let knn: Vec<f64> = sel.iter().map(|r| r.eval.knn_accuracy).collect();
            let lin: Vec<f64> = sel.iter().map(|r| r.eval.probe_accuracy).collect();
            let (knn_mean, knn_sd) = mean_sd(&knn);
            let (linear_mean, linear_sd) = mean_sd(&lin);
            MethodSummary {
                method,
                views_per_group: m,
                runs: sel.len(),
                knn_mean,
                knn_sd,
                linear_mean,
                linear_sd,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[MethodSummary]) -> String {
    let mut s = String::from("method,m,runs,knn_mean,knn_sd,linear_mean,linear_sd\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.4},{:.4},{:.4},{:.4}",
            r.method, r.views_per_group, r.runs, r.knn_mean, r.knn_sd, r.linear_mean, r.linear_sd
        );
    }
    s
}
