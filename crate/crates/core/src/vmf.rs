//! The von Mises-Fisher distribution: estimation from view groups, log-density,
//! sampling and closed-form KL divergence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bessel::{self, BesselOrder};
use crate::error::{DsfError, Result};
use crate::scalar::{dot, norm, Real};

/// Upper clamp on the (scaled) mean resultant length, keeping clear of the pole at 1.
pub const R_BAR_CEILING: f64 = 1.0 - 1e-9;

/// A point on the unit sphere in `R^p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitVector<T> {
    components: Vec<T>,
}

impl<T: Real> UnitVector<T> {
    /// Renormalizes `v` onto the sphere.
    pub fn new(v: Vec<T>) -> Result<Self> {
        if v.is_empty() {
            return Err(DsfError::InvalidInput("empty vector".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DsfError::NonFinite("vector component".into()));
        }
        let n = norm(&v);
        if n <= T::zero() {
            return Err(DsfError::InvalidInput(
                "cannot normalize the zero vector".into(),
            ));
        }
        Ok(Self {
            components: v.into_iter().map(|x| x / n).collect(),
        })
    }

    /// The `i`-th standard basis vector of `R^p`.
    pub fn basis(p: usize, i: usize) -> Self {
        assert!(i < p, "basis index {i} out of range for p={p}");
        let mut components = vec![T::zero(); p];
        components[i] = T::one();
        Self { components }
    }

    pub(crate) fn from_normalized(components: Vec<T>) -> Self {
        Self { components }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.components
    }

    pub fn into_vec(self) -> Vec<T> {
        self.components
    }

    pub fn neg(&self) -> Self {
        Self {
            components: self.components.iter().map(|&x| -x).collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.components, &other.components))
    }
}

pub(crate) fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(DsfError::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// The `m` views of one instance that are pooled into a single distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGroup<T> {
    views: Vec<UnitVector<T>>,
}

impl<T: Real> ViewGroup<T> {
    pub fn new(views: Vec<UnitVector<T>>) -> Result<Self> {
        let first = views
            .first()
            .ok_or_else(|| DsfError::InvalidInput("view group needs at least one view".into()))?;
        let p = first.dim();
        for v in &views {
            check_dims(p, v.dim())?;
        }
        Ok(Self { views })
    }

    pub fn views(&self) -> &[UnitVector<T>] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.views[0].dim()
    }
}

/// How raw concentration estimates are tamed before they reach the divergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilizationPolicy<T> {
    /// Multiplier applied to the mean resultant length, in (0, 1).
    pub lambda_r: T,
    /// Whether `lambda_r` is applied at all.
    pub scale_r_bar: bool,
    /// Divide the concentration by the dimension `p`.
    pub normalize_by_dim: bool,
    /// Groups whose mean resultant length falls below this have no direction.
    pub r_bar_floor: T,
}

impl<T: Real> Default for StabilizationPolicy<T> {
    fn default() -> Self {
        Self {
            lambda_r: T::lit(0.95),
            scale_r_bar: true,
            normalize_by_dim: true,
            r_bar_floor: T::lit(1e-8),
        }
    }
}

impl<T: Real> StabilizationPolicy<T> {
    /// Plain approximation: no scaling, no normalization.
    pub fn off() -> Self {
        Self {
            scale_r_bar: false,
            normalize_by_dim: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_r > T::zero() && self.lambda_r < T::one()) {
            return Err(DsfError::config(
                "lambda_r",
                format!("must lie in (0, 1), got {}", self.lambda_r),
            ));
        }
        if !(self.r_bar_floor > T::zero() && self.r_bar_floor < T::one()) {
            return Err(DsfError::config(
                "r_bar_floor",
                format!("must lie in (0, 1), got {}", self.r_bar_floor),
            ));
        }
        Ok(())
    }

    fn effective_r(&self, r_bar: T) -> (T, bool) {
        let scaled = if self.scale_r_bar {
            self.lambda_r * r_bar
        } else {
            r_bar
        };
        let hi = T::lit(R_BAR_CEILING);
        if scaled < self.r_bar_floor {
            (self.r_bar_floor, true)
        } else if scaled > hi {
            (hi, true)
        } else {
            (scaled, false)
        }
    }

    /// Concentration assigned to a group with mean resultant length `r_bar`.
    pub fn kappa_for(&self, p: usize, r_bar: T) -> T {
        let (r, _) = self.effective_r(r_bar);
        self.finish_kappa(p, bessel::kappa_approx(p, r))
    }

    fn finish_kappa(&self, p: usize, kappa: T) -> T {
        if self.normalize_by_dim {
            kappa / T::from_usize_lossy(p)
        } else {
            kappa
        }
    }

    /// `d kappa / d r_bar` at `r_bar` (zero where a clamp is active).
    pub fn dkappa_dr(&self, p: usize, r_bar: T) -> T {
        let (r, clamped) = self.effective_r(r_bar);
        if clamped {
            return T::zero();
        }
        let pf = T::from_usize_lossy(p);
        let r2 = r * r;
        let denom = (T::one() - r2) * (T::one() - r2);
        let d = (pf + (pf - T::lit(3.0)) * r2 + r2 * r2) / denom;
        let d = if self.scale_r_bar {
            d * self.lambda_r
        } else {
            d
        };
        self.finish_kappa(p, d)
    }

    /// Largest concentration this policy can produce in dimension `p` (attained at `r_bar = 1`).
    pub fn kappa_ceiling(&self, p: usize) -> T {
        self.kappa_for(p, T::one())
    }
}

/// A von Mises-Fisher distribution on the unit sphere of `R^p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "VmfJson<T>",
    into = "VmfJson<T>",
    bound(
        serialize = "T: Real + Serialize",
        deserialize = "T: Real + Deserialize<'de>"
    )
)]
pub struct VmfDistribution<T: Real> {
    mu: UnitVector<T>,
    kappa: T,
    r_bar_raw: Option<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VmfJson<T> {
    mu: Vec<T>,
    kappa: T,
    p: usize,
}

impl<T: Real> From<VmfDistribution<T>> for VmfJson<T> {
    fn from(d: VmfDistribution<T>) -> Self {
        let p = d.dim();
        VmfJson {
            mu: d.mu.into_vec(),
            kappa: d.kappa,
            p,
        }
    }
}

impl<T: Real> TryFrom<VmfJson<T>> for VmfDistribution<T> {
    type Error = DsfError;

    fn try_from(j: VmfJson<T>) -> Result<Self> {
        check_dims(j.p, j.mu.len())?;
        // keep already-normalized directions bit for bit so stored states reload exactly
        let n = norm(&j.mu);
        let mu = if (n - T::one()).abs() <= T::epsilon() * T::lit(16.0) {
            UnitVector::from_normalized(j.mu)
        } else {
            UnitVector::new(j.mu)?
        };
        VmfDistribution::new(mu, j.kappa)
    }
}

impl<T: Real> VmfDistribution<T> {
    pub fn new(mu: UnitVector<T>, kappa: T) -> Result<Self> {
        if !kappa.is_finite() || kappa <= T::zero() {
            return Err(DsfError::domain(
                "VmfDistribution::new",
                format!("kappa must be finite and > 0, got {kappa}"),
            ));
        }
        if mu.dim() < 2 {
            return Err(DsfError::domain(
                "VmfDistribution::new",
                "dimension p must be >= 2",
            ));
        }
        Ok(Self {
            mu,
            kappa,
            r_bar_raw: None,
        })
    }

    #[inline]
    pub fn mu(&self) -> &UnitVector<T> {
        &self.mu
    }

    #[inline]
    pub fn kappa(&self) -> T {
        self.kappa
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.mu.dim()
    }

    /// Mean resultant length before stabilization, when estimated from views.
    pub fn r_bar_raw(&self) -> Option<T> {
        self.r_bar_raw
    }

    /// Log of the normalizing constant:
    /// `log C_p(k) = (p/2 - 1) log k - (p/2) log(2 pi) - log I_{p/2-1}(k)`.
    pub fn log_normalizer(&self) -> T {
        let p = self.dim();
        let half_p = T::from_usize_lossy(p) / T::lit(2.0);
        self.log_norm_core() - half_p * T::TAU().ln()
    }

    // (p/2 - 1) log k - log I_{p/2-1}(k)
    fn log_norm_core(&self) -> T {
        let order = BesselOrder::from_dim(self.dim()).expect("p >= 2 checked at construction");
        order.nu::<T>() * self.kappa.ln() - bessel::log_bessel_i_nu(order.nu(), self.kappa)
    }

    pub fn log_pdf(&self, x: &UnitVector<T>) -> Result<T> {
        check_dims(self.dim(), x.dim())?;
        Ok(self.log_normalizer() + self.kappa * dot(self.mu.as_slice(), x.as_slice()))
    }

    /// Expected mean resultant length `A_p(kappa)`.
    pub fn mean_resultant_length(&self) -> T {
        bessel::ratio_unchecked(self.dim(), self.kappa)
    }

    /// `n` independent draws (Wood's rejection sampler), deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<UnitVector<T>>> {
        if n == 0 {
            return Err(DsfError::InvalidInput("sample count must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu: Vec<f64> = self
            .mu
            .as_slice()
            .iter()
            .map(|x| x.to_f64_lossy())
            .collect();
        let sampler = WoodSampler::new(mu.len(), self.kappa.to_f64_lossy());
        Ok((0..n)
            .map(|_| {
                let x = sampler.draw(&mu, &mut rng);
                UnitVector::from_normalized(x.into_iter().map(T::lit).collect())
            })
            .collect())
    }

    pub(crate) fn kl_terms(&self) -> KlTerms<T> {
        let (a, oma) = bessel::ratio_with_complement(self.dim(), self.kappa);
        KlTerms {
            log_norm: self.log_norm_core(),
            a,
            da: bessel::ratio_dkappa_unchecked(self.dim(), a, oma, self.kappa),
            kappa: self.kappa,
        }
    }
}

/// Per-distribution quantities reused by every KL divergence it takes part in.
#[derive(Debug, Clone, Copy)]
pub(crate) struct KlTerms<T> {
    pub log_norm: T,
    pub a: T,
    pub da: T,
    pub kappa: T,
}

impl<T: Real> KlTerms<T> {
    /// `KL(self || other)` given `cos = mu_self . mu_other`.
    #[inline]
    pub fn kl(&self, other: &KlTerms<T>, cos: T) -> T {
        self.log_norm - other.log_norm + self.a * (self.kappa - other.kappa * cos)
    }

    /// Partial derivatives `(d/dk_i, d/dk_j, d/dcos)` of `KL(self || other)`.
    #[inline]
    pub fn kl_partials(&self, other: &KlTerms<T>, cos: T) -> (T, T, T) {
        (
            self.da * (self.kappa - other.kappa * cos),
            other.a - self.a * cos,
            -self.a * other.kappa,
        )
    }
}

/// `KL(di || dj) = (p/2-1) log(k_i/k_j) + log I(k_j) - log I(k_i) + A_p(k_i)(k_i - k_j mu_i.mu_j)`.
pub fn kl_divergence<T: Real>(di: &VmfDistribution<T>, dj: &VmfDistribution<T>) -> Result<T> {
    check_dims(di.dim(), dj.dim())?;
    let cos = dot(di.mu.as_slice(), dj.mu.as_slice());
    Ok(di.kl_terms().kl(&dj.kl_terms(), cos))
}

/// Estimate of a distribution from a set of rows plus what its backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct Estimate<T: Real> {
    pub dist: VmfDistribution<T>,
    pub r_bar: T,
    pub dkappa_dr: T,
    pub count: usize,
}

impl<T: Real> Estimate<T> {
    /// Gradient with respect to each (identical-weight) view, given gradients with
    /// respect to the mean direction and the concentration. Added into `out`.
    pub fn backprop_view(&self, g_mu: &[T], g_kappa: T, out: &mut [T]) {
        let mu = self.dist.mu.as_slice();
        let radial = dot(mu, g_mu);
        let inv_m = T::one() / T::from_usize_lossy(self.count);
        let coef_mu = (g_kappa * self.dkappa_dr - radial / self.r_bar) * inv_m;
        let inv = inv_m / self.r_bar;
        for ((o, &g), &u) in out.iter_mut().zip(g_mu).zip(mu) {
            *o += g * inv + coef_mu * u;
        }
    }
}

pub(crate) fn estimate_rows<T: Real>(
    rows: &[&[T]],
    policy: &StabilizationPolicy<T>,
) -> Result<Estimate<T>> {
    let first = rows
        .first()
        .ok_or_else(|| DsfError::InvalidInput("view group needs at least one view".into()))?;
    let p = first.len();
    let mut mean = vec![T::zero(); p];
    for row in rows {
        check_dims(p, row.len())?;
        for (m, &x) in mean.iter_mut().zip(row.iter()) {
            *m += x;
        }
    }
    let count = rows.len();
    let inv = T::one() / T::from_usize_lossy(count);
    mean.iter_mut().for_each(|m| *m *= inv);
    let r_bar = norm(&mean);
    if !(r_bar >= policy.r_bar_floor) {
        return Err(DsfError::DegenerateDirection {
            r_bar: r_bar.to_f64_lossy(),
        });
    }
    let mu = UnitVector::from_normalized(mean.into_iter().map(|x| x / r_bar).collect());
    let kappa = policy.kappa_for(p, r_bar);
    let mut dist = VmfDistribution::new(mu, kappa)?;
    dist.r_bar_raw = Some(r_bar);
    Ok(Estimate {
        dist,
        r_bar,
        dkappa_dr: policy.dkappa_dr(p, r_bar),
        count,
    })
}

/// Mean direction `z/|z|` and concentration from the closed-form approximation
/// (after `policy`) of the mean `z` of the group's views.
pub fn estimate<T: Real>(
    group: &ViewGroup<T>,
    policy: &StabilizationPolicy<T>,
) -> Result<VmfDistribution<T>> {
    policy.validate()?;
    let rows: Vec<&[T]> = group.views.iter().map(|v| v.as_slice()).collect();
    Ok(estimate_rows(&rows, policy)?.dist)
}

/// Wood (1994) rejection sampler for the component along the mean direction.
pub(crate) struct WoodSampler {
    p: usize,
    kappa: f64,
    b: f64,
    x0: f64,
    c: f64,
    beta: Beta<f64>,
}

impl WoodSampler {
    pub(crate) fn new(p: usize, kappa: f64) -> Self {
        let pm1 = (p - 1) as f64;
        // b = (-2k + sqrt(4k^2 + (p-1)^2)) / (p-1), rewritten to avoid cancellation
        let b = pm1 / (2.0 * kappa + (4.0 * kappa * kappa + pm1 * pm1).sqrt());
        let x0 = (1.0 - b) / (1.0 + b);
        let c = kappa * x0 + pm1 * (1.0 - x0 * x0).ln();
        let beta = Beta::new(pm1 / 2.0, pm1 / 2.0).expect("positive beta parameters");
        Self {
            p,
            kappa,
            b,
            x0,
            c,
            beta,
        }
    }

    fn draw_w<R: Rng>(&self, rng: &mut R) -> f64 {
        let pm1 = (self.p - 1) as f64;
        loop {
            let z: f64 = self.beta.sample(rng);
            let w = (1.0 - (1.0 + self.b) * z) / (1.0 - (1.0 - self.b) * z);
            let u: f64 = rng.random();
            if self.kappa * w + pm1 * (1.0 - self.x0 * w).ln() - self.c >= u.ln() {
                return w;
            }
        }
    }

    pub(crate) fn draw<R: Rng>(&self, mu: &[f64], rng: &mut R) -> Vec<f64> {
        let w = self.draw_w(rng);
        // uniform direction in the tangent space at mu
        let tangent = loop {
            let mut v: Vec<f64> = (0..self.p).map(|_| rng.sample(StandardNormal)).collect();
            let along = dot(&v, mu);
            v.iter_mut().zip(mu).for_each(|(x, &m)| *x -= along * m);
            let n = norm(&v);
            if n > 1e-12 {
                v.iter_mut().for_each(|x| *x /= n);
                break v;
            }
        };
        let s = (1.0 - w * w).max(0.0).sqrt();
        let mut x: Vec<f64> = mu
            .iter()
            .zip(&tangent)
            .map(|(&m, &t)| w * m + s * t)
            .collect();
        let n = norm(&x);
        x.iter_mut().for_each(|v| *v /= n);
        x
    }
}

/// Uniformly distributed unit vector in `R^p`.
pub fn uniform_unit<R: Rng>(p: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
