//! Modified Bessel functions of the first kind at fractional order, in log space.
//!
//! `log I_nu(x)` is evaluated by one of three routes:
//!
//! * the ascending power series, for `x` below [`crossover`];
//! * the Hankel large-argument expansion, for low orders (`nu < DEBYE_MIN_ORDER`)
//!   past the crossover `max(20, nu^2)`, where its terms shrink at least as fast
//!   as `1 / (2^k k!)`;
//! * the Debye uniform expansion in `nu`, for high orders past the crossover
//!   `max(20, nu)`. The `U_k(t)` polynomials are generated once from their
//!   integral recurrence.
//!
//! All routes return `log I_nu(x) - x` internally ("scaled" form) so that ratios
//! of neighbouring orders never form `I_nu` itself and nothing overflows for
//! arguments up to and beyond `1e6`.
//!
//! The ratio `A_p(k) = I_{p/2}(k) / I_{p/2-1}(k)` uses the Gauss continued fraction
//! below [`RATIO_CF_LIMIT`] and the difference of scaled logs above it.

use std::sync::OnceLock;

use crate::error::{DsfError, Result};
use crate::scalar::Real;

/// Orders at or above this use the Debye expansion past the crossover.
pub const DEBYE_MIN_ORDER: f64 = 15.0;

/// Number of Debye correction polynomials `U_1..U_n` kept.
const DEBYE_TERMS: usize = 12;

/// Above this argument the ratio switches from the continued fraction to scaled logs.
pub const RATIO_CF_LIMIT: f64 = 1000.0;

const CF_MAX_ITER: usize = 50_000;
const SERIES_MAX_ITER: usize = 10_000_000;

/// Maximum Newton iterations for the ratio inversions.
pub const NEWTON_MAX_ITER: usize = 50;

/// Order of the Bessel function attached to an ambient dimension `p`: `nu = p/2 - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BesselOrder {
    p: usize,
}

impl BesselOrder {
    pub fn from_dim(p: usize) -> Result<Self> {
        if p < 2 {
            return Err(DsfError::domain(
                "BesselOrder",
                format!("dimension p={p} < 2"),
            ));
        }
        Ok(Self { p })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn nu<T: Real>(&self) -> T {
        T::from_usize_lossy(self.p) / T::lit(2.0) - T::one()
    }
}

fn check_kappa<T: Real>(op: &'static str, kappa: T) -> Result<()> {
    if !kappa.is_finite() || kappa <= T::zero() {
        return Err(DsfError::domain(
            op,
            format!("kappa must be finite and > 0, got {kappa}"),
        ));
    }
    Ok(())
}

fn check_dim(op: &'static str, p: usize) -> Result<()> {
    if p < 2 {
        return Err(DsfError::domain(op, format!("dimension p={p} < 2")));
    }
    Ok(())
}

/// Argument at which `log I_nu` switches from the power series to an asymptotic expansion.
pub fn crossover<T: Real>(nu: T) -> T {
    let twenty = T::lit(20.0);
    if nu < T::lit(DEBYE_MIN_ORDER) {
        twenty.max(nu * nu)
    } else {
        twenty.max(nu)
    }
}

/// `log I_nu(x)` for the order belonging to dimension `p`.
pub fn log_bessel_i<T: Real>(order: BesselOrder, kappa: T) -> Result<T> {
    check_kappa("log_bessel_i", kappa)?;
    Ok(log_bessel_i_nu(order.nu(), kappa))
}

/// `log I_nu(x)` for an arbitrary order `nu >= 0` and `x > 0`. No argument checks.
pub fn log_bessel_i_nu<T: Real>(nu: T, x: T) -> T {
    if x < crossover(nu) {
        series::log_i(nu, x)
    } else {
        x + asymptotic_scaled(nu, x)
    }
}

/// `log I_nu(x) - x`, evaluated without cancellation for large `x`.
pub fn log_bessel_i_scaled<T: Real>(nu: T, x: T) -> T {
    if x < crossover(nu) {
        series::log_i(nu, x) - x
    } else {
        asymptotic_scaled(nu, x)
    }
}

fn asymptotic_scaled<T: Real>(nu: T, x: T) -> T {
    if nu < T::lit(DEBYE_MIN_ORDER) {
        hankel::log_i_scaled(nu, x)
    } else {
        debye::log_i_scaled(nu, x)
    }
}

/// Individual evaluation routes, exposed so their agreement can be checked directly.
pub mod branches {
    use super::*;

    /// Ascending series, valid for every `x > 0` (cost grows linearly in `x`).
    pub fn log_i_series<T: Real>(nu: T, x: T) -> T {
        series::log_i(nu, x)
    }

    /// The asymptotic route that would be used past the crossover for this order.
    pub fn log_i_asymptotic<T: Real>(nu: T, x: T) -> T {
        x + asymptotic_scaled(nu, x)
    }

    pub fn log_i_hankel<T: Real>(nu: T, x: T) -> T {
        x + hankel::log_i_scaled(nu, x)
    }

    pub fn log_i_debye<T: Real>(nu: T, x: T) -> T {
        x + debye::log_i_scaled(nu, x)
    }

    /// Gauss continued fraction for `I_{nu+1}(x) / I_nu(x)`.
    pub fn ratio_continued_fraction<T: Real>(nu: T, x: T) -> T {
        super::ratio_cf(nu, x)
    }
}

mod series {
    use super::*;

    /// `log I_nu(x) = nu log(x/2) - lnGamma(nu+1) + log sum_k t_k`,
    /// `t_0 = 1`, `t_k = t_{k-1} (x^2/4) / (k (nu + k))`. The partial sum is
    /// rescaled whenever it grows large so the loop never overflows.
    pub(super) fn log_i<T: Real>(nu: T, x: T) -> T {
        let q = x * x / T::lit(4.0);
        let big = T::lit(1e100);
        let eps = T::epsilon();
        let mut term = T::one();
        // sum = 1 + tail until the first rescale; tail keeps tiny arguments exact
        let mut tail = T::zero();
        let mut offset = T::zero();
        let mut rescaled = false;
        let mut k = T::zero();
        for _ in 0..SERIES_MAX_ITER {
            k += T::one();
            let ratio = q / (k * (nu + k));
            term *= ratio;
            tail += term;
            if ratio < T::lit(0.5) && term <= eps * (T::one() + tail) {
                break;
            }
            if tail > big {
                let sum = T::one() + tail;
                offset += sum.ln();
                term /= sum;
                tail = T::zero();
                rescaled = true;
            }
        }
        let log_sum = if rescaled {
            (T::one() + tail).ln() + offset
        } else {
            tail.ln_1p()
        };
        nu * (x / T::lit(2.0)).ln() - (nu + T::one()).ln_gamma() + log_sum
    }
}

mod hankel {
    use super::*;

    /// `I_nu(x) ~ e^x / sqrt(2 pi x) * sum_k (-1)^k a_k(nu) / x^k`; returns `log I - x`.
    pub(super) fn log_i_scaled<T: Real>(nu: T, x: T) -> T {
        -T::lit(0.5) * (T::TAU() * x).ln() + log_sum(nu, x)
    }

    /// `log sum_k (-1)^k a_k(nu) / x^k`, the order-dependent part.
    pub(super) fn log_sum<T: Real>(nu: T, x: T) -> T {
        let mu = T::lit(4.0) * nu * nu;
        let eight_x = T::lit(8.0) * x;
        let eps = T::epsilon();
        let mut term = T::one();
        let mut tail = T::zero();
        let mut k = T::zero();
        for _ in 0..200 {
            k += T::one();
            let odd = T::lit(2.0) * k - T::one();
            let next = -term * (mu - odd * odd) / (k * eight_x);
            if next.abs() >= term.abs() && k > T::one() {
                // asymptotic series has started to diverge
                break;
            }
            term = next;
            tail += term;
            if term.abs() <= eps * tail.abs() {
                break;
            }
        }
        tail.ln_1p()
    }
}

mod debye {
    use super::*;

    /// Coefficients of `U_k(t)` in increasing powers of `t`, `k = 0..=DEBYE_TERMS`.
    fn polynomials() -> &'static [Vec<f64>] {
        static POLYS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
        POLYS.get_or_init(|| {
            // U_{k+1}(t) = t^2 (1 - t^2) U_k'(t) / 2 + (1/8) int_0^t (1 - 5 s^2) U_k(s) ds
            let mut out = vec![vec![1.0]];
            for k in 0..DEBYE_TERMS {
                let u = &out[k];
                let deg = u.len() + 3;
                let mut next = vec![0.0; deg];
                for (j, &c) in u.iter().enumerate().skip(1) {
                    let d = c * j as f64; // coefficient of t^{j-1} in U_k'
                    next[j + 1] += 0.5 * d;
                    next[j + 3] -= 0.5 * d;
                }
                for (j, &c) in u.iter().enumerate() {
                    next[j + 1] += 0.125 * c / (j + 1) as f64;
                    next[j + 3] -= 0.125 * 5.0 * c / (j + 3) as f64;
                }
                out.push(next);
            }
            out
        })
    }

    fn horner<T: Real>(coeffs: &[f64], t: T) -> T {
        coeffs
            .iter()
            .rev()
            .fold(T::zero(), |acc, &c| acc * t + T::lit(c))
    }

    /// `I_nu(nu z) ~ e^{nu eta} / (sqrt(2 pi nu) (1+z^2)^{1/4}) sum_k U_k(t) / nu^k`,
    /// written in terms of `s = sqrt(nu^2 + x^2)`; returns `log I - x`.
    pub(super) fn log_i_scaled<T: Real>(nu: T, x: T) -> T {
        let s = (nu * nu + x * x).sqrt();
        let t = nu / s;
        let eps = T::epsilon();
        let mut tail = T::zero();
        let mut scale = T::one();
        for poly in polynomials().iter().skip(1) {
            scale /= nu;
            let term = horner(poly, t) * scale;
            tail += term;
            if term.abs() <= eps * tail.abs() {
                break;
            }
        }
        // nu*eta - x = nu^2/(s + x) + nu*ln(x/(nu + s))
        nu * nu / (s + x) + nu * (x / (nu + s)).ln() - T::lit(0.5) * (T::TAU() * s).ln()
            + tail.ln_1p()
    }

    #[cfg(test)]
    pub(super) fn polys_for_test() -> &'static [Vec<f64>] {
        polynomials()
    }
}

fn ratio_cf<T: Real>(nu: T, x: T) -> T {
    // I_{nu+1}/I_nu = 1 / (b_1 + 1/(b_2 + 1/(b_3 + ...))), b_k = 2(nu + k)/x; modified Lentz.
    let tiny = T::epsilon().powi(4);
    let two_over_x = T::lit(2.0) / x;
    let eps = T::epsilon();
    let mut f = (nu + T::one()) * two_over_x;
    if f == T::zero() {
        f = tiny;
    }
    let mut c = f;
    let mut d = T::zero();
    let mut k = T::one();
    for _ in 0..CF_MAX_ITER {
        k += T::one();
        let b = (nu + k) * two_over_x;
        d = b + d;
        if d == T::zero() {
            d = tiny;
        }
        c = b + T::one() / c;
        if c == T::zero() {
            c = tiny;
        }
        d = T::one() / d;
        let delta = c * d;
        f *= delta;
        if (delta - T::one()).abs() <= eps {
            break;
        }
    }
    T::one() / f
}

/// `log I_{nu+1}(x) - log I_nu(x)` for large `x`. When both orders take the Hankel
/// route their shared `-log(2 pi x)/2` prefactor is dropped before subtracting.
fn log_ratio_large<T: Real>(nu: T, x: T) -> T {
    let up = nu + T::one();
    let hankel_both = up < T::lit(DEBYE_MIN_ORDER) && x >= crossover(up) && x >= crossover(nu);
    if hankel_both {
        hankel::log_sum(up, x) - hankel::log_sum(nu, x)
    } else {
        log_bessel_i_scaled(up, x) - log_bessel_i_scaled(nu, x)
    }
}

/// Mean resultant length of a vMF in dimension `p`: `A_p(k) = I_{p/2}(k) / I_{p/2-1}(k)`.
pub fn bessel_ratio_a<T: Real>(p: usize, kappa: T) -> Result<T> {
    check_dim("bessel_ratio_a", p)?;
    check_kappa("bessel_ratio_a", kappa)?;
    Ok(ratio_unchecked(p, kappa))
}

pub(crate) fn ratio_unchecked<T: Real>(p: usize, kappa: T) -> T {
    ratio_with_complement(p, kappa).0
}

/// `(A_p(k), 1 - A_p(k))`, the complement kept accurate in saturation.
pub(crate) fn ratio_with_complement<T: Real>(p: usize, kappa: T) -> (T, T) {
    let nu = BesselOrder { p }.nu::<T>();
    if kappa <= T::lit(RATIO_CF_LIMIT) {
        let a = ratio_cf(nu, kappa);
        (a, T::one() - a)
    } else {
        let delta = log_ratio_large(nu, kappa);
        (delta.exp(), -delta.exp_m1())
    }
}

/// `dA_p/dk = 1 - A^2 - (p-1) A / k`.
pub fn bessel_ratio_a_dkappa<T: Real>(p: usize, kappa: T) -> Result<T> {
    check_dim("bessel_ratio_a_dkappa", p)?;
    check_kappa("bessel_ratio_a_dkappa", kappa)?;
    let (a, oma) = ratio_with_complement(p, kappa);
    Ok(ratio_dkappa_unchecked(p, a, oma, kappa))
}

/// The derivative identity written as `(1-A)(1+A) - (p-1) A / k`, taking `1 - A`
/// separately so saturated ratios do not lose every digit.
pub(crate) fn ratio_dkappa_unchecked<T: Real>(p: usize, a: T, one_minus_a: T, kappa: T) -> T {
    let pm1 = T::from_usize_lossy(p - 1);
    let d = one_minus_a * (T::one() + a) - pm1 * a / kappa;
    if d > T::zero() {
        d
    } else {
        // leading asymptotic term, reached only when roundoff still wins
        pm1 / (T::lit(2.0) * kappa * kappa)
    }
}

/// Closed-form concentration approximation `R (p - R^2) / (1 - R^2)` (no stabilization).
pub fn kappa_approx<T: Real>(p: usize, r_bar: T) -> T {
    let pf = T::from_usize_lossy(p);
    let r2 = r_bar * r_bar;
    r_bar * (pf - r2) / (T::one() - r2)
}

/// Safeguarded Newton solve of `g(k) = target` for a strictly increasing `g` on `k > 0`
/// with `g(0+) = 0`. `eval` returns `(g, g')`.
fn newton_increasing<T: Real>(
    op: &'static str,
    target: T,
    seed: T,
    tol: T,
    eval: impl Fn(T) -> (T, T),
) -> Result<T> {
    let mut lo = T::zero();
    let mut hi = T::infinity();
    let mut kappa = seed;
    let mut residual = T::infinity();
    for _ in 0..NEWTON_MAX_ITER {
        let (g, dg) = eval(kappa);
        residual = g - target;
        if residual.abs() < tol {
            return Ok(kappa);
        }
        if residual < T::zero() {
            lo = kappa;
        } else {
            hi = kappa;
        }
        let mut next = kappa - residual / dg;
        if !(next.is_finite() && next > lo && next < hi) {
            next = if hi.is_finite() {
                if lo > T::zero() {
                    (lo * hi).sqrt()
                } else {
                    hi / T::lit(2.0)
                }
            } else {
                kappa * T::lit(2.0)
            };
        }
        if next == kappa {
            break;
        }
        kappa = next;
    }
    Err(DsfError::Convergence {
        op,
        iterations: NEWTON_MAX_ITER,
        last: kappa.to_f64_lossy(),
        residual: residual.to_f64_lossy(),
    })
}

/// Exact inverse `k* = A_p^{-1}(r_bar)` by Newton iteration seeded with [`kappa_approx`].
pub fn invert_ratio_newton<T: Real>(p: usize, r_bar: T, tol: T) -> Result<T> {
    check_dim("invert_ratio_newton", p)?;
    if !(r_bar > T::zero() && r_bar < T::one()) {
        return Err(DsfError::domain(
            "invert_ratio_newton",
            format!("r_bar must lie in (0, 1), got {r_bar}"),
        ));
    }
    let seed = kappa_approx(p, r_bar);
    newton_increasing("invert_ratio_newton", r_bar, seed, tol, |k| {
        let (a, oma) = ratio_with_complement(p, k);
        (a, ratio_dkappa_unchecked(p, a, oma, k))
    })
}

/// Solves `k * A_p(k) = target` (strictly increasing in `k`, unique root).
pub fn solve_kappa_ratio_product<T: Real>(p: usize, target: T, tol: T) -> Result<T> {
    check_dim("solve_kappa_ratio_product", p)?;
    if !(target.is_finite() && target > T::zero()) {
        return Err(DsfError::domain(
            "solve_kappa_ratio_product",
            format!("target must be finite and > 0, got {target}"),
        ));
    }
    // small k: k A ~ k^2 / p; large k: k A ~ k - (p-1)/2
    let pf = T::from_usize_lossy(p);
    let seed = (target * pf)
        .sqrt()
        .min(target + (pf - T::one()) / T::lit(2.0));
    newton_increasing("solve_kappa_ratio_product", target, seed, tol, |k| {
        let (a, oma) = ratio_with_complement(p, k);
        (k * a, a + k * ratio_dkappa_unchecked(p, a, oma, k))
    })
}
