//! Central finite-difference check of analytic loss gradients.
//!
//! Each sampled coordinate of the batch is nudged by `+-h` and the row is
//! renormalized before the loss is re-evaluated, so the finite difference
//! estimates the tangent-projected gradient the losses report.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DsfError, Result};
use crate::loss::{LossOutput, MultiViewBatch};
use crate::scalar::dot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub coords: usize,
    pub rel_tol: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is zero are judged on absolute error.
    pub abs_floor: f64,
    pub tangent_tol: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords: 100,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            tangent_tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest `|g . z|` over all rows.
    pub max_tangent_residual: f64,
    /// Flat batch index of the worst coordinate.
    pub worst_index: usize,
    pub passed: bool,
}

pub fn check_gradient<F>(
    batch: &MultiViewBatch<f64>,
    loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&MultiViewBatch<f64>) -> Result<LossOutput<f64>>,
{
    if !(cfg.step > 0.0) || cfg.coords == 0 {
        return Err(DsfError::InvalidInput(
            "gradient check needs step > 0 and coords >= 1".into(),
        ));
    }
    let analytic = loss(batch)?;
    let data = batch.as_slice();
    let p = batch.dim();
    let max_tangent_residual = analytic
        .grad
        .chunks(p)
        .zip(data.chunks(p))
        .map(|(g, z)| dot(g, z).abs())
        .fold(0.0, f64::max);

    let n = cfg.coords.min(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks = sample(&mut rng, data.len(), n);

    let eval_at = |k: usize, delta: f64| -> Result<f64> {
        let mut d = data.to_vec();
        d[k] += delta;
        let b = MultiViewBatch::new(batch.batch(), batch.views_per_group(), p, d)?;
        Ok(loss(&b)?.loss)
    };

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = 0;
    for k in picks.iter() {
        let fd = (eval_at(k, cfg.step)? - eval_at(k, -cfg.step)?) / (2.0 * cfg.step);
        let a = analytic.grad[k];
        let abs = (a - fd).abs();
        let rel = abs / a.abs().max(fd.abs()).max(cfg.abs_floor);
        if !rel.is_finite() {
            return Err(DsfError::NonFinite(format!(
                "finite difference at index {k}"
            )));
        }
        if rel > max_rel {
            max_rel = rel;
            worst = k;
        }
        max_abs = max_abs.max(abs);
    }
    Ok(GradCheckReport {
        coords_checked: n,
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        max_tangent_residual,
        worst_index: worst,
        passed: max_rel < cfg.rel_tol && max_tangent_residual < cfg.tangent_tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCase {
    pub loss: String,
    pub batch: usize,
    pub views_per_group: usize,
    pub dim: usize,
    pub tau: f64,
    pub report: GradCheckReport,
}

/// Random batch whose views cluster around one direction per instance.
pub fn clustered_batch(
    b: usize,
    m: usize,
    p: usize,
    spread: f64,
    seed: u64,
) -> Result<MultiViewBatch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(b * 2 * m * p);
    for _ in 0..b {
        let centre = crate::vmf::uniform_unit(p, &mut rng);
        for _ in 0..2 * m {
            let noise = crate::vmf::uniform_unit(p, &mut rng);
            data.extend(centre.iter().zip(&noise).map(|(c, n)| c + spread * n));
        }
    }
    MultiViewBatch::new(b, m, p, data)
}

/// Every loss over randomized small batches (`B <= 4`, `m <= 4`, `p` in {3, 8, 16}).
pub fn run_suite(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<SuiteCase>> {
    use crate::loss::{self, NegativeSet, Temperature};
    use crate::vmf::StabilizationPolicy;

    let shapes = [(4, 1, 3), (3, 2, 8), (4, 4, 16), (2, 3, 8), (4, 2, 3)];
    let policy = StabilizationPolicy::default();
    let mut out = Vec::new();
    for (i, &(b, m, p)) in shapes.iter().enumerate() {
        for (j, tau) in [1.0, 0.5].into_iter().enumerate() {
            let case_seed = seed.wrapping_add((i * 2 + j) as u64);
            let batch = clustered_batch(b, m, p, 0.7, case_seed)?;
            let t = Temperature::new(tau)?;
            let c = GradCheckConfig {
                seed: case_seed,
                ..*cfg
            };
            let mut push = |name: &str, report: GradCheckReport| {
                out.push(SuiteCase {
                    loss: name.into(),
                    batch: b,
                    views_per_group: m,
                    dim: p,
                    tau,
                    report,
                })
            };
            push(
                "dsf",
                check_gradient(
                    &batch,
                    |x| loss::dsf_loss(x, NegativeSet::InBatch, &policy, t),
                    &c,
                )?,
            );
            push(
                "loss_avg",
                check_gradient(&batch, |x| loss::loss_avg(x, NegativeSet::InBatch, t), &c)?,
            );
            push(
                "fea_avg",
                check_gradient(&batch, |x| loss::fea_avg(x, NegativeSet::InBatch, t), &c)?,
            );
        }
    }
    Ok(out)
}
