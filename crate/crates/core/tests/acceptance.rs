//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Tolerances are fixed below.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dsf_core::bessel::{self, branches};
use dsf_core::config::{check_budget_parity, ExperimentConfig, Method};
use dsf_core::experiments::{
    self, compare, default_suite, kappa_approx_errors, kl_monte_carlo, mean_sd, run_experiment,
};
use dsf_core::gradcheck::{clustered_batch, run_suite, GradCheckConfig};
use dsf_core::loss::{self, MultiViewBatch, NegativeSet, Temperature};
use dsf_core::scalar::dot;
use dsf_core::vmf::{self, kl_divergence, StabilizationPolicy, UnitVector, VmfDistribution};

const TABLE_TOL: f64 = 1e-3;
const THEOREM_TOL: f64 = 1e-8;
const KL_REL_TOL: f64 = 0.01;
const KL_SE_MULT: f64 = 3.0;
const KL_SAMPLES: usize = 1_000_000;
const GRAD_REL_TOL: f64 = 1e-4;
const TANGENT_TOL: f64 = 1e-6;
const KAPPA_CEILING_P128: f64 = 9.676;
const BRANCH_TOL: f64 = 1e-9;
const IDENTITY_TOL: f64 = 1e-12;
const DIVERGENCE_MARGIN: f64 = 100.0;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const CHANCE_MULTIPLE: f64 = 3.0;
const TAU_SWEEP: [f64; 3] = [0.8, 1.0, 1.25];
const LOSS_BAND: f64 = 2.0;

/// Reference values, truncated (not rounded) to three decimals.
const TABLE1_EXPECTED: [[f64; 3]; 4] = [
    [3.573, 6.319, 9.090],
    [1.738, 4.331, 7.091],
    [0.011, 0.170, 1.380],
    [0.000, 0.000, 0.0001],
];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed < Duration::from_secs(secs)
}

fn table1() -> Outcome {
    let start = Instant::now();
    let t = experiments::table1();
    let elapsed = start.elapsed();
    let mut worst = 0.0f64;
    for (row, expected) in t.values.iter().zip(TABLE1_EXPECTED) {
        for (v, e) in row.iter().zip(expected) {
            worst = worst.max((v - e).abs());
        }
    }
    let cells = t.values.iter().map(Vec::len).sum::<usize>();
    outcome(
        cells == 12 && worst <= TABLE_TOL && within(elapsed, 1),
        format!("12 cells, max |diff| {worst:.2e} (tol {TABLE_TOL:e}), {elapsed:.2?}"),
    )
}

fn theorem() -> Outcome {
    let start = Instant::now();
    let r = experiments::theorem_check(0, 100);
    let elapsed = start.elapsed();
    match r {
        Ok(r) => {
            let worst = r.max_abs_diff.unwrap_or(f64::NAN);
            let dims: std::collections::BTreeSet<usize> = r.results.iter().map(|t| t.p).collect();
            let taus = r
                .results
                .iter()
                .map(|t| t.tau.to_bits())
                .collect::<std::collections::BTreeSet<_>>();
            outcome(
                r.results.len() == 100
                    && worst < THEOREM_TOL
                    && dims.len() == 3
                    && taus.len() == 3
                    && within(elapsed, 10),
                format!(
                    "100 trials over p {dims:?}, max |L_div - L_cos| {worst:.2e}, {elapsed:.2?}"
                ),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn kl_vs_monte_carlo() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_ratio = 0.0f64;
    let mut worst_rel = 0.0f64;
    for pair in 0..10u64 {
        let p = rng.random_range(2..=8usize);
        let dist = |rng: &mut ChaCha8Rng| {
            let kappa = 10f64.powf(rng.random_range(-0.5..1.7));
            VmfDistribution::new(UnitVector::new(vmf::uniform_unit(p, rng)).unwrap(), kappa)
                .unwrap()
        };
        let di = dist(&mut rng);
        let dj = dist(&mut rng);
        let exact = match kl_divergence(&di, &dj) {
            Ok(v) => v,
            Err(e) => return outcome(false, e.to_string()),
        };
        let (mc, se) = match kl_monte_carlo(&di, &dj, KL_SAMPLES, pair) {
            Ok(v) => v,
            Err(e) => return outcome(false, e.to_string()),
        };
        let allowed = (KL_REL_TOL * exact.abs()).max(KL_SE_MULT * se);
        worst_ratio = worst_ratio.max((exact - mc).abs() / allowed);
        worst_rel = worst_rel.max(((exact - mc) / exact).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst_ratio <= 1.0 && within(elapsed, 120),
        format!("10 pairs, worst |diff| / allowance {worst_ratio:.3}, worst rel {worst_rel:.2e}, {elapsed:.2?}"),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig {
        rel_tol: GRAD_REL_TOL,
        tangent_tol: TANGENT_TOL,
        ..GradCheckConfig::default()
    };
    match run_suite(0, &cfg) {
        Ok(cases) => {
            let elapsed = start.elapsed();
            let rel = cases
                .iter()
                .map(|c| c.report.max_rel_error)
                .fold(0.0, f64::max);
            let tan = cases
                .iter()
                .map(|c| c.report.max_tangent_residual)
                .fold(0.0, f64::max);
            let all = cases.iter().all(|c| c.report.passed);
            outcome(
                all && within(elapsed, 60),
                format!(
                    "{} cases, max rel {rel:.2e}, max tangent {tan:.2e}, {elapsed:.2?}",
                    cases.len()
                ),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn kappa_machinery() -> Outcome {
    let grid: Vec<f64> = (0..=89).map(|i| 0.1 + 0.01 * i as f64).collect();
    let errs = match kappa_approx_errors(&[8, 128], &grid) {
        Ok(v) => v,
        Err(e) => return outcome(false, e.to_string()),
    };
    let report = |p: usize| {
        errs.iter()
            .filter(|e| e.p == p)
            .map(|e| e.rel_error)
            .fold(0.0, f64::max)
    };
    let measured = errs.iter().all(|e| e.rel_error.is_finite());

    let policy = StabilizationPolicy::<f64>::default();
    let stab_max = (0..=1000)
        .map(|i| policy.kappa_for(128, i as f64 / 1000.0))
        .fold(0.0, f64::max);

    let mut branch_worst = 0.0f64;
    for p in [2usize, 3, 8, 16, 30, 32, 34, 64, 128, 1024] {
        let nu = p as f64 / 2.0 - 1.0;
        let c = bessel::crossover(nu);
        for i in 0..=20 {
            let x = c * (0.8 + 0.45 * i as f64 / 20.0);
            branch_worst = branch_worst
                .max((branches::log_i_series(nu, x) - branches::log_i_asymptotic(nu, x)).abs());
        }
    }
    outcome(
        measured && stab_max <= KAPPA_CEILING_P128 && branch_worst <= BRANCH_TOL,
        format!(
            "approx rel err max p=8 {:.2e} p=128 {:.2e}; stabilized max at p=128 {stab_max:.4}; branch |dlog I| {branch_worst:.1e}",
            report(8),
            report(128)
        ),
    )
}

fn view_mean_identity() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let (b, m, p) = (
            2 + (seed % 3) as usize,
            1 + (seed % 5) as usize,
            [3, 8, 16, 64][(seed % 4) as usize],
        );
        let batch = clustered_batch(b, m, p, 1.5, seed).unwrap();
        let mut pairwise = 0.0;
        for i in 0..b {
            let (a, c) = (batch.group_mean(i, 0), batch.group_mean(i, 1));
            let mut s = 0.0;
            for l in 0..m {
                for lp in 0..m {
                    s += dot(batch.row(i, 0, l), batch.row(i, 1, lp));
                }
            }
            let avg = s / (m * m) as f64;
            worst = worst.max((dot(&a, &c) - avg).abs());
            pairwise += avg;
        }
        // the same quantity read back through the feature-averaging loss
        let out =
            loss::fea_avg(&batch, NegativeSet::InBatch, Temperature::new(1.0).unwrap()).unwrap();
        worst = worst.max((out.margin_pos - pairwise / b as f64).abs());
    }
    outcome(
        worst <= IDENTITY_TOL,
        format!("50 random batches, max |diff| {worst:.2e}"),
    )
}

fn margin_dichotomy() -> Outcome {
    let mut cos_worst = 0.0f64;
    let mut cos_ok = true;
    for (k, tau) in [0.1, 0.2, 0.5, 1.0].into_iter().enumerate() {
        let t = Temperature::new(tau).unwrap();
        for seed in 0..10u64 {
            let batch = clustered_batch(6, 1, 8, 2.0, 100 * k as u64 + seed).unwrap();
            let out = loss::cosine_loss(&batch, NegativeSet::InBatch, t).unwrap();
            cos_ok &= out.margin.abs() <= 2.0 / tau + 1e-12;
            cos_worst = cos_worst.max(out.margin.abs() * tau / 2.0);
        }
        // best case for cosine: identical positives, antipodal negatives
        let z = UnitVector::basis(3, 0);
        let extreme =
            MultiViewBatch::from_unit_vectors(2, 1, &[z.clone(), z.clone(), z.neg(), z.neg()])
                .unwrap();
        let out = loss::cosine_loss(&extreme, NegativeSet::InBatch, t).unwrap();
        cos_ok &= out.margin <= 2.0 / tau + 1e-12 && (out.margin - 2.0 / tau).abs() < 1e-12;
    }
    let z = UnitVector::basis(3, 0);
    let batch = MultiViewBatch::from_unit_vectors(1, 1, &[z.clone(), z.clone()]).unwrap();
    let opposing = [VmfDistribution::new(z.neg(), 100.0).unwrap()];
    let dsf = loss::dsf_loss(
        &batch,
        NegativeSet::Distributions(&opposing),
        &StabilizationPolicy::off(),
        Temperature::new(1.0).unwrap(),
    )
    .unwrap();
    outcome(
        cos_ok && dsf.margin > DIVERGENCE_MARGIN,
        format!(
            "cosine |margin| <= 2/tau (reached exactly at the optimum, max ratio on random batches {cos_worst:.3}); divergence margin {:.1}",
            dsf.margin
        ),
    )
}

fn desk_comparison() -> Outcome {
    let start = Instant::now();
    let base = ExperimentConfig::default();
    let suite: Vec<ExperimentConfig> =
        match default_suite(&base, &[base.augmentation.views_per_group]) {
            Ok(s) => s,
            Err(e) => return outcome(false, e.to_string()),
        };
    if let Err(e) = check_budget_parity(&suite) {
        return outcome(false, e.to_string());
    }
    // configs share nothing mutable, so each trains on its own thread; merged in config order
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = suite
            .iter()
            .map(|c| s.spawn(move || compare(std::slice::from_ref(c), &SEEDS)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut runs = Vec::new();
    for r in results {
        match r {
            Ok(v) => runs.extend(v),
            Err(e) => return outcome(false, format!("run failed: {e}")),
        }
    }
    let stats = |m: Method| {
        let knn: Vec<f64> = runs
            .iter()
            .filter(|r| r.method == m)
            .map(|r| r.eval.knn_accuracy)
            .collect();
        let lin: Vec<f64> = runs
            .iter()
            .filter(|r| r.method == m)
            .map(|r| r.eval.probe_accuracy)
            .collect();
        (mean_sd(&knn), mean_sd(&lin))
    };
    let dsf = stats(Method::Dsf);
    let mut ok = true;
    let mut detail = Vec::new();
    for m in [Method::Cosine, Method::LossAvg, Method::FeaAvg, Method::Dsf] {
        let (k, l) = stats(m);
        ok &= k.0 >= CHANCE_MULTIPLE * 0.1 && l.0 >= CHANCE_MULTIPLE * 0.1;
        detail.push(format!(
            "{m} knn {:.4}+-{:.4} lin {:.4}+-{:.4}",
            k.0, k.1, l.0, l.1
        ));
        if matches!(m, Method::LossAvg | Method::FeaAvg) {
            let pooled = |a: (f64, f64), b: (f64, f64)| ((a.1 * a.1 + b.1 * b.1) / 2.0).sqrt();
            ok &= dsf.0 .0 >= k.0 - pooled(dsf.0, k);
            ok &= dsf.1 .0 >= l.0 - pooled(dsf.1, l);
        }
    }
    let elapsed = start.elapsed();
    ok &= within(elapsed, 30 * 60);
    outcome(
        ok,
        format!("{} runs, {}; {elapsed:.1?}", runs.len(), detail.join("; ")),
    )
}

fn temperature_free() -> Outcome {
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = TAU_SWEEP
            .iter()
            .map(|&tau| {
                s.spawn(move || {
                    let mut c = ExperimentConfig::default();
                    c.method = Method::Dsf;
                    c.loss.temperature = Some(tau);
                    run_experiment(&c).map(|a| a.summary.last_epoch_loss)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut losses = Vec::new();
    for (tau, r) in TAU_SWEEP.iter().zip(results) {
        match r {
            Ok(l) if l.is_finite() => losses.push(l),
            Ok(l) => return outcome(false, format!("tau {tau}: loss {l}")),
            Err(e) => return outcome(false, format!("tau {tau}: {e}")),
        }
    }
    let hi = losses.iter().copied().fold(f64::MIN, f64::max);
    let lo = losses.iter().copied().fold(f64::MAX, f64::min);
    outcome(
        lo > 0.0 && hi / lo <= LOSS_BAND,
        format!(
            "final losses {losses:.4?} over tau {TAU_SWEEP:?}, max/min {:.3}",
            hi / lo
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("table1 reproduction", table1),
        ("single-view equivalence", theorem),
        ("KL closed form vs Monte Carlo", kl_vs_monte_carlo),
        ("gradient suite", gradients),
        ("concentration machinery", kappa_machinery),
        ("view-mean identity", view_mean_identity),
        ("margin dichotomy", margin_dichotomy),
        ("desk-scale comparison", desk_comparison),
        ("temperature-free stability", temperature_free),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        println!(
            "{} {}. {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
