//! Similarity functions and multi-view contrastive losses with analytic gradients.
//!
//! Every loss takes a [`MultiViewBatch`] of `B` instances, each holding two groups
//! of `m` unit-norm views, and returns a [`LossOutput`] whose gradient has the
//! batch layout and is projected onto the tangent space of each view.

use serde::{Deserialize, Serialize};

use crate::bessel;
use crate::error::{DsfError, Result};
use crate::scalar::{dot, norm, Real};
use crate::vmf::{
    self, check_dims, Estimate, KlTerms, StabilizationPolicy, UnitVector, VmfDistribution,
};

/// `B x 2m x p` unit-norm features. Group `g` of instance `i` is views
/// `g*m .. (g+1)*m` of that instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewBatch<T> {
    data: Vec<T>,
    batch: usize,
    views_per_group: usize,
    dim: usize,
}

impl<T: Real> MultiViewBatch<T> {
    /// Builds a batch from row-major data, renormalizing every row onto the sphere.
    pub fn new(batch: usize, views_per_group: usize, dim: usize, mut data: Vec<T>) -> Result<Self> {
        if batch == 0 || views_per_group == 0 || dim < 2 {
            return Err(DsfError::InvalidInput(format!(
                "batch shape B={batch}, m={views_per_group}, p={dim} (need B>=1, m>=1, p>=2)"
            )));
        }
        check_dims(batch * 2 * views_per_group * dim, data.len())?;
        for row in data.chunks_mut(dim) {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(DsfError::NonFinite("batch feature".into()));
            }
            let n = norm(row);
            if n <= T::zero() {
                return Err(DsfError::InvalidInput("zero feature row".into()));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self {
            data,
            batch,
            views_per_group,
            dim,
        })
    }

    pub fn from_unit_vectors(
        batch: usize,
        views_per_group: usize,
        rows: &[UnitVector<T>],
    ) -> Result<Self> {
        let dim = rows.first().map(|r| r.dim()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_dims(dim, r.dim())?;
            data.extend_from_slice(r.as_slice());
        }
        Self::new(batch, views_per_group, dim, data)
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn views_per_group(&self) -> usize {
        self.views_per_group
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub(crate) fn offset(&self, instance: usize, group: usize, view: usize) -> usize {
        ((instance * 2 + group) * self.views_per_group + view) * self.dim
    }

    #[inline]
    pub fn row(&self, instance: usize, group: usize, view: usize) -> &[T] {
        let o = self.offset(instance, group, view);
        &self.data[o..o + self.dim]
    }

    pub fn group_rows(&self, instance: usize, group: usize) -> Vec<&[T]> {
        (0..self.views_per_group)
            .map(|l| self.row(instance, group, l))
            .collect()
    }

    /// Unnormalized mean of a group's views.
    pub fn group_mean(&self, instance: usize, group: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        for row in self.group_rows(instance, group) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
        }
        let inv = T::one() / T::from_usize_lossy(self.views_per_group);
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }
}

/// Divisor applied to similarities inside InfoNCE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Temperature<T>(T);

impl<T: Real> Temperature<T> {
    pub fn new(tau: T) -> Result<Self> {
        if !(tau.is_finite() && tau > T::zero()) {
            return Err(DsfError::config(
                "tau",
                format!("temperature must be > 0, got {tau}"),
            ));
        }
        Ok(Self(tau))
    }

    #[inline]
    pub fn tau(&self) -> T {
        self.0
    }
}

impl<T: Real> Default for Temperature<T> {
    fn default() -> Self {
        Self(T::one())
    }
}

/// Where the negatives of each query come from.
#[derive(Debug, Clone, Copy)]
pub enum NegativeSet<'a, T: Real> {
    /// The group-2 summaries of every other instance in the batch (`K = B - 1`).
    InBatch,
    /// Fixed distributions, e.g. a queue of past group-2 estimates (DSF only).
    Distributions(&'a [VmfDistribution<T>]),
    /// Fixed key vectors, e.g. a queue of past group-2 features (cosine losses only).
    Keys(&'a [Vec<T>]),
}

/// Loss value, its gradient with respect to the batch, and similarity margins.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    /// Same layout as the batch; each row tangent to its feature.
    pub grad: Vec<T>,
    /// Mean positive logit `s+ / tau`.
    pub margin_pos: T,
    /// Mean negative logit `s- / tau`.
    pub margin_neg: T,
    /// `margin_pos - margin_neg`.
    pub margin: T,
    /// Instances left out because a group had no mean direction or no negatives remained.
    pub skipped: Vec<usize>,
    /// Mean concentration of the estimated distributions (DSF only).
    pub mean_kappa: Option<T>,
    /// Largest estimated concentration (DSF only).
    pub max_kappa: Option<T>,
}

/// `z_i . z_j`.
pub fn sim_cos<T: Real>(zi: &UnitVector<T>, zj: &UnitVector<T>) -> Result<T> {
    zi.dot(zj)
}

/// Negative KL divergence `-KL(di || dj)`.
pub fn sim_div<T: Real>(di: &VmfDistribution<T>, dj: &VmfDistribution<T>) -> Result<T> {
    Ok(-vmf::kl_divergence(di, dj)?)
}

/// `-log(exp(s+/tau) / (exp(s+/tau) + sum_j exp(s_j/tau)))` via a shifted log-sum-exp.
pub fn info_nce<T: Real>(sim_pos: T, sim_negs: &[T], temperature: Temperature<T>) -> Result<T> {
    if sim_negs.is_empty() {
        return Err(DsfError::InvalidInput(
            "InfoNCE needs at least one negative".into(),
        ));
    }
    if !sim_pos.is_finite() || sim_negs.iter().any(|s| !s.is_finite()) {
        return Err(DsfError::NonFinite("similarity".into()));
    }
    let tau = temperature.tau();
    let negs: Vec<T> = sim_negs.iter().map(|&s| s / tau).collect();
    Ok(info_nce_logits(sim_pos / tau, &negs).loss)
}

struct LogitGrad<T> {
    loss: T,
    d_pos: T,
    d_negs: Vec<T>,
}

/// InfoNCE on logits together with its derivatives with respect to each logit.
fn info_nce_logits<T: Real>(pos: T, negs: &[T]) -> LogitGrad<T> {
    let max = negs.iter().copied().fold(pos, T::max);
    let e_pos = (pos - max).exp();
    let e_negs: Vec<T> = negs.iter().map(|&s| (s - max).exp()).collect();
    let neg_mass = e_negs.iter().copied().sum::<T>();
    let z = e_pos + neg_mass;
    // when the positive dominates, ln_1p keeps the tiny loss from rounding to zero
    let loss = if pos == max {
        neg_mass.ln_1p()
    } else {
        max - pos + z.ln()
    };
    LogitGrad {
        loss,
        d_pos: -neg_mass / z,
        d_negs: e_negs.into_iter().map(|e| e / z).collect(),
    }
}

fn project_rows<T: Real>(batch: &MultiViewBatch<T>, grad: &mut [T]) {
    for (g, z) in grad.chunks_mut(batch.dim).zip(batch.data.chunks(batch.dim)) {
        let along = dot(g, z);
        g.iter_mut().zip(z).for_each(|(gi, &zi)| *gi -= along * zi);
    }
}

fn axpy<T: Real>(out: &mut [T], a: T, x: &[T]) {
    out.iter_mut().zip(x).for_each(|(o, &v)| *o += a * v);
}

#[derive(Default)]
struct MarginAcc<T> {
    pos: T,
    neg: T,
    count: usize,
}

impl<T: Real> MarginAcc<T> {
    fn push(&mut self, pos: T, negs: &[T]) {
        self.pos += pos;
        self.neg += negs.iter().copied().sum::<T>() / T::from_usize_lossy(negs.len());
        self.count += 1;
    }

    fn finish(&self) -> (T, T, T) {
        let n = T::from_usize_lossy(self.count.max(1));
        let (p, q) = (self.pos / n, self.neg / n);
        (p, q, p - q)
    }
}

/// InfoNCE with the divergence-based similarity: group 1 of each instance is the
/// query distribution, group 2 its positive; negatives per `negatives`.
pub fn dsf_loss<T: Real>(
    batch: &MultiViewBatch<T>,
    negatives: NegativeSet<'_, T>,
    policy: &StabilizationPolicy<T>,
    temperature: Temperature<T>,
) -> Result<LossOutput<T>> {
    policy.validate()?;
    let b = batch.batch;
    let p = batch.dim;
    let queue = match negatives {
        NegativeSet::InBatch => None,
        NegativeSet::Distributions(ds) => {
            if ds.is_empty() {
                return Err(DsfError::InvalidInput("empty negative set".into()));
            }
            for d in ds {
                check_dims(p, d.dim())?;
            }
            Some(ds)
        }
        NegativeSet::Keys(_) => {
            return Err(DsfError::InvalidInput(
                "divergence similarity needs distribution negatives, not key vectors".into(),
            ))
        }
    };

    let estimate = |i: usize, g: usize| -> Result<Option<Estimate<T>>> {
        match vmf::estimate_rows(&batch.group_rows(i, g), policy) {
            Ok(e) => Ok(Some(e)),
            Err(DsfError::DegenerateDirection { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let mut queries = Vec::with_capacity(b);
    let mut keys = Vec::with_capacity(b);
    for i in 0..b {
        queries.push(estimate(i, 0)?);
        keys.push(estimate(i, 1)?);
    }
    let terms = |e: &Option<Estimate<T>>| e.as_ref().map(|e| e.dist.kl_terms());
    let q_terms: Vec<_> = queries.iter().map(terms).collect();
    let k_terms: Vec<_> = keys.iter().map(terms).collect();
    let queue_terms: Vec<KlTerms<T>> = queue
        .map(|ds| ds.iter().map(|d| d.kl_terms()).collect())
        .unwrap_or_default();

    let zeros = || vec![T::zero(); p];
    let mut g_mu_q: Vec<Vec<T>> = (0..b).map(|_| zeros()).collect();
    let mut g_mu_k: Vec<Vec<T>> = (0..b).map(|_| zeros()).collect();
    let mut g_kappa_q = vec![T::zero(); b];
    let mut g_kappa_k = vec![T::zero(); b];

    let mut total = T::zero();
    let mut skipped = Vec::new();
    let mut margins = MarginAcc::default();
    let inv_tau = T::one() / temperature.tau();

    struct Active<T> {
        instance: usize,
        grads: LogitGrad<T>,
        // (in-batch index or usize::MAX for queue entry, queue index)
        negs: Vec<usize>,
    }
    let mut active: Vec<Active<T>> = Vec::new();

    for i in 0..b {
        let (Some(qt), Some(kt)) = (&q_terms[i], &k_terms[i]) else {
            skipped.push(i);
            continue;
        };
        let mu_q = queries[i].as_ref().unwrap().dist.mu().as_slice();
        let kl_to = |other: &KlTerms<T>, mu_other: &[T]| qt.kl(other, dot(mu_q, mu_other));
        let pos = -kl_to(kt, keys[i].as_ref().unwrap().dist.mu().as_slice()) * inv_tau;
        let (negs, idx): (Vec<T>, Vec<usize>) = match queue {
            None => (0..b)
                .filter(|&j| j != i)
                .filter_map(|j| {
                    let t = k_terms[j].as_ref()?;
                    let mu = keys[j].as_ref().unwrap().dist.mu().as_slice();
                    Some((-kl_to(t, mu) * inv_tau, j))
                })
                .unzip(),
            Some(ds) => queue_terms
                .iter()
                .zip(ds)
                .enumerate()
                .map(|(j, (t, d))| (-kl_to(t, d.mu().as_slice()) * inv_tau, j))
                .unzip(),
        };
        if negs.is_empty() {
            skipped.push(i);
            continue;
        }
        if !pos.is_finite() || negs.iter().any(|s| !s.is_finite()) {
            return Err(DsfError::NonFinite(format!(
                "divergence similarity for instance {i}"
            )));
        }
        margins.push(pos, &negs);
        let grads = info_nce_logits(pos, &negs);
        total += grads.loss;
        active.push(Active {
            instance: i,
            grads,
            negs: idx,
        });
    }

    if active.is_empty() {
        return Err(DsfError::InvalidInput(
            "every instance was skipped (degenerate groups or no negatives)".into(),
        ));
    }
    let n = T::from_usize_lossy(active.len());
    let w = T::one() / n;

    for a in &active {
        let i = a.instance;
        let qt = q_terms[i].as_ref().unwrap();
        let mu_q = queries[i].as_ref().unwrap().dist.mu().as_slice().to_vec();
        // d loss / d KL = -(d loss / d logit) / tau
        let mut apply =
            |other: &KlTerms<T>, mu_other: &[T], d_logit: T, key_slot: Option<usize>| {
                let d_kl = -d_logit * inv_tau * w;
                let cos = dot(&mu_q, mu_other);
                let (dk_i, dk_j, dcos) = qt.kl_partials(other, cos);
                g_kappa_q[i] += d_kl * dk_i;
                axpy(&mut g_mu_q[i], d_kl * dcos, mu_other);
                if let Some(j) = key_slot {
                    g_kappa_k[j] += d_kl * dk_j;
                    axpy(&mut g_mu_k[j], d_kl * dcos, &mu_q);
                }
            };
        let kt = k_terms[i].as_ref().unwrap();
        apply(
            kt,
            keys[i].as_ref().unwrap().dist.mu().as_slice(),
            a.grads.d_pos,
            Some(i),
        );
        for (&j, &d) in a.negs.iter().zip(&a.grads.d_negs) {
            match queue {
                None => apply(
                    k_terms[j].as_ref().unwrap(),
                    keys[j].as_ref().unwrap().dist.mu().as_slice(),
                    d,
                    Some(j),
                ),
                Some(ds) => apply(&queue_terms[j], ds[j].mu().as_slice(), d, None),
            }
        }
    }

    let mut grad = vec![T::zero(); batch.data.len()];
    for i in 0..b {
        for (g, est, g_mu, g_kappa) in [
            (0, &queries[i], &g_mu_q[i], g_kappa_q[i]),
            (1, &keys[i], &g_mu_k[i], g_kappa_k[i]),
        ] {
            if let Some(est) = est {
                let mut g_view = zeros();
                est.backprop_view(g_mu, g_kappa, &mut g_view);
                for l in 0..batch.views_per_group {
                    let o = batch.offset(i, g, l);
                    grad[o..o + p]
                        .iter_mut()
                        .zip(&g_view)
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }
    }
    project_rows(batch, &mut grad);

    let kappas: Vec<T> = queries
        .iter()
        .chain(&keys)
        .flatten()
        .map(|e| e.dist.kappa())
        .collect();
    let mean_kappa = (!kappas.is_empty())
        .then(|| kappas.iter().copied().sum::<T>() / T::from_usize_lossy(kappas.len()));
    let max_kappa = kappas.iter().copied().reduce(T::max);
    let (margin_pos, margin_neg, margin) = margins.finish();
    Ok(LossOutput {
        loss: total * w,
        grad,
        margin_pos,
        margin_neg,
        margin,
        skipped,
        mean_kappa,
        max_kappa,
    })
}

fn key_slice<'a, T: Real>(negatives: NegativeSet<'a, T>, p: usize) -> Result<Option<&'a [Vec<T>]>> {
    match negatives {
        NegativeSet::InBatch => Ok(None),
        NegativeSet::Keys(ks) => {
            if ks.is_empty() {
                return Err(DsfError::InvalidInput("empty negative set".into()));
            }
            for k in ks {
                check_dims(p, k.len())?;
            }
            Ok(Some(ks))
        }
        NegativeSet::Distributions(_) => Err(DsfError::InvalidInput(
            "cosine similarity needs key-vector negatives, not distributions".into(),
        )),
    }
}

/// One cosine InfoNCE term. `neg_rows` are batch offsets when negatives come from
/// the batch; gradients are accumulated into `grad` (query, positive and in-batch
/// negatives) scaled by `weight`.
#[allow(clippy::too_many_arguments)]
fn cosine_term<T: Real>(
    query: &[T],
    positive: &[T],
    negs: &[&[T]],
    inv_tau: T,
    weight: T,
    margins: &mut MarginAcc<T>,
    mut on_grad: impl FnMut(Slot, T, &[T]),
) -> T {
    let pos = dot(query, positive) * inv_tau;
    let neg_logits: Vec<T> = negs.iter().map(|n| dot(query, n) * inv_tau).collect();
    margins.push(pos, &neg_logits);
    let g = info_nce_logits(pos, &neg_logits);
    // d/dquery = (d_pos * positive + sum_j d_j * n_j) / tau
    let s = weight * inv_tau;
    on_grad(Slot::Query, s * g.d_pos, positive);
    on_grad(Slot::Positive, s * g.d_pos, query);
    for (j, (&d, n)) in g.d_negs.iter().zip(negs).enumerate() {
        on_grad(Slot::Query, s * d, n);
        on_grad(Slot::Negative(j), s * d, query);
    }
    g.loss
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Query,
    Positive,
    Negative(usize),
}

/// Mean over the `m^2` view pairs `(l, l')` of cosine InfoNCE between view `l`
/// of group 1 and view `l'` of group 2. In-batch negatives for the pair are
/// view `l'` of every other instance's group 2.
pub fn loss_avg<T: Real>(
    batch: &MultiViewBatch<T>,
    negatives: NegativeSet<'_, T>,
    temperature: Temperature<T>,
) -> Result<LossOutput<T>> {
    let (b, m, p) = (batch.batch, batch.views_per_group, batch.dim);
    let queue = key_slice(negatives, p)?;
    if queue.is_none() && b < 2 {
        return Err(DsfError::InvalidInput(
            "in-batch negatives need B >= 2".into(),
        ));
    }
    let inv_tau = T::one() / temperature.tau();
    let weight = T::one() / (T::from_usize_lossy(b) * T::from_usize_lossy(m * m));
    let mut grad = vec![T::zero(); batch.data.len()];
    let mut margins = MarginAcc::default();
    let mut total = T::zero();
    for i in 0..b {
        for l in 0..m {
            let q_off = batch.offset(i, 0, l);
            for lp in 0..m {
                let k_off = batch.offset(i, 1, lp);
                let (negs, offs): (Vec<&[T]>, Vec<Option<usize>>) = match queue {
                    None => (0..b)
                        .filter(|&j| j != i)
                        .map(|j| (batch.row(j, 1, lp), Some(batch.offset(j, 1, lp))))
                        .unzip(),
                    Some(ks) => ks.iter().map(|k| (k.as_slice(), None)).unzip(),
                };
                let loss = cosine_term(
                    batch.row(i, 0, l),
                    batch.row(i, 1, lp),
                    &negs,
                    inv_tau,
                    weight,
                    &mut margins,
                    |slot, a, x| {
                        let off = match slot {
                            Slot::Query => Some(q_off),
                            Slot::Positive => Some(k_off),
                            Slot::Negative(j) => offs[j],
                        };
                        if let Some(o) = off {
                            axpy(&mut grad[o..o + p], a, x);
                        }
                    },
                );
                total += loss;
            }
        }
    }
    project_rows(batch, &mut grad);
    check_finite(total)?;
    let (margin_pos, margin_neg, margin) = margins.finish();
    Ok(LossOutput {
        loss: total * weight,
        grad,
        margin_pos,
        margin_neg,
        margin,
        skipped: Vec::new(),
        mean_kappa: None,
        max_kappa: None,
    })
}

/// Plain two-view cosine InfoNCE (`m = 1`).
pub fn cosine_loss<T: Real>(
    batch: &MultiViewBatch<T>,
    negatives: NegativeSet<'_, T>,
    temperature: Temperature<T>,
) -> Result<LossOutput<T>> {
    if batch.views_per_group != 1 {
        return Err(DsfError::InvalidInput(format!(
            "plain cosine InfoNCE takes one view per group, got m={}",
            batch.views_per_group
        )));
    }
    loss_avg(batch, negatives, temperature)
}

/// Cosine InfoNCE between the unnormalized view means of the two groups.
pub fn fea_avg<T: Real>(
    batch: &MultiViewBatch<T>,
    negatives: NegativeSet<'_, T>,
    temperature: Temperature<T>,
) -> Result<LossOutput<T>> {
    let (b, m, p) = (batch.batch, batch.views_per_group, batch.dim);
    let queue = key_slice(negatives, p)?;
    if queue.is_none() && b < 2 {
        return Err(DsfError::InvalidInput(
            "in-batch negatives need B >= 2".into(),
        ));
    }
    let inv_tau = T::one() / temperature.tau();
    let weight = T::one() / T::from_usize_lossy(b);
    let means: Vec<[Vec<T>; 2]> = (0..b)
        .map(|i| [batch.group_mean(i, 0), batch.group_mean(i, 1)])
        .collect();
    // gradients with respect to the group means
    let mut g_means: Vec<[Vec<T>; 2]> = (0..b)
        .map(|_| [vec![T::zero(); p], vec![T::zero(); p]])
        .collect();
    let mut margins = MarginAcc::default();
    let mut total = T::zero();
    for i in 0..b {
        let (negs, idx): (Vec<&[T]>, Vec<Option<usize>>) = match queue {
            None => (0..b)
                .filter(|&j| j != i)
                .map(|j| (means[j][1].as_slice(), Some(j)))
                .unzip(),
            Some(ks) => ks.iter().map(|k| (k.as_slice(), None)).unzip(),
        };
        total += cosine_term(
            &means[i][0],
            &means[i][1],
            &negs,
            inv_tau,
            weight,
            &mut margins,
            |slot, a, x| {
                let target = match slot {
                    Slot::Query => Some((i, 0)),
                    Slot::Positive => Some((i, 1)),
                    Slot::Negative(j) => idx[j].map(|jj| (jj, 1)),
                };
                if let Some((ii, g)) = target {
                    axpy(&mut g_means[ii][g], a, x);
                }
            },
        );
    }
    let inv_m = T::one() / T::from_usize_lossy(m);
    let mut grad = vec![T::zero(); batch.data.len()];
    for i in 0..b {
        for g in 0..2 {
            for l in 0..m {
                let o = batch.offset(i, g, l);
                axpy(&mut grad[o..o + p], inv_m, &g_means[i][g]);
            }
        }
    }
    project_rows(batch, &mut grad);
    check_finite(total)?;
    let (margin_pos, margin_neg, margin) = margins.finish();
    Ok(LossOutput {
        loss: total * weight,
        grad,
        margin_pos,
        margin_neg,
        margin,
        skipped: Vec::new(),
        mean_kappa: None,
        max_kappa: None,
    })
}

fn check_finite<T: Real>(x: T) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(DsfError::NonFinite("loss".into()))
    }
}

/// Both sides of the single-view equivalence between divergence and cosine InfoNCE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport<T> {
    /// Shared concentration solving `kappa * A_p(kappa) = 1 / tau`.
    pub kappa: T,
    pub l_div: T,
    pub l_cos: T,
    pub abs_diff: T,
}

/// Builds single-view distributions sharing the concentration `kappa` with
/// `kappa * A_p(kappa) = 1/tau` and evaluates divergence InfoNCE (no temperature)
/// next to cosine InfoNCE at temperature `tau`.
pub fn theorem_equivalence_check<T: Real>(
    zi: &UnitVector<T>,
    z_pos: &UnitVector<T>,
    z_negs: &[UnitVector<T>],
    tau: T,
    p: usize,
) -> Result<TheoremReport<T>> {
    check_dims(p, zi.dim())?;
    check_dims(p, z_pos.dim())?;
    for z in z_negs {
        check_dims(p, z.dim())?;
    }
    let temperature = Temperature::new(tau)?;
    let kappa = bessel::solve_kappa_ratio_product(p, T::one() / tau, T::epsilon() * T::lit(64.0))?;
    let dist = |z: &UnitVector<T>| VmfDistribution::new(z.clone(), kappa);
    let di = dist(zi)?;
    let s_pos = sim_div(&di, &dist(z_pos)?)?;
    let s_negs = z_negs
        .iter()
        .map(|z| sim_div(&di, &dist(z)?))
        .collect::<Result<Vec<_>>>()?;
    let l_div = info_nce(s_pos, &s_negs, Temperature::default())?;
    let c_pos = sim_cos(zi, z_pos)?;
    let c_negs = z_negs
        .iter()
        .map(|z| sim_cos(zi, z))
        .collect::<Result<Vec<_>>>()?;
    let l_cos = info_nce(c_pos, &c_negs, temperature)?;
    Ok(TheoremReport {
        kappa,
        l_div,
        l_cos,
        abs_diff: (l_div - l_cos).abs(),
    })
}

/// InfoNCE at the cosine optimum (`s+ = 1`, every `s- = -1`) for each
/// `(tau, K)`: `log(1 + K exp(-2/tau))`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropositionTable {
    pub taus: Vec<f64>,
    pub ks: Vec<u64>,
    /// `values[row][col]` for `taus[row]`, `ks[col]`.
    pub values: Vec<Vec<f64>>,
}

pub fn proposition_table(taus: &[f64], ks: &[u64]) -> Result<PropositionTable> {
    if let Some(t) = taus.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(DsfError::InvalidInput(format!(
            "temperature must be > 0, got {t}"
        )));
    }
    if ks.contains(&0) {
        return Err(DsfError::InvalidInput("K must be >= 1".into()));
    }
    let values = taus
        .iter()
        .map(|&tau| {
            ks.iter()
                .map(|&k| (k as f64 * (-2.0 / tau).exp()).ln_1p())
                .collect()
        })
        .collect();
    Ok(PropositionTable {
        taus: taus.to_vec(),
        ks: ks.to_vec(),
        values,
    })
}

impl PropositionTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:>6} |", "tau");
        for k in &self.ks {
            s.push_str(&format!(" {:>9}", format!("K={k}")));
        }
        s.push('\n');
        s.push_str(&"-".repeat(8 + 10 * self.ks.len()));
        s.push('\n');
        for (tau, row) in self.taus.iter().zip(&self.values) {
            s.push_str(&format!("{tau:>6.1} |"));
            for v in row {
                s.push_str(&format!(" {:>9}", format_cell(*v)));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau");
        for k in &self.ks {
            s.push_str(&format!(",K={k}"));
        }
        s.push('\n');
        for (tau, row) in self.taus.iter().zip(&self.values) {
            s.push_str(&format!("{tau}"));
            for v in row {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Three decimals, or four when the value would otherwise round to zero but is >= 5e-5.
fn format_cell(v: f64) -> String {
    if v < 5e-4 && v >= 5e-5 {
        format!("{v:.4}")
    } else {
        format!("{v:.3}")
    }
}

/// `log(1 + K)`: InfoNCE when every similarity is equal.
pub fn uniform_ceiling<T: Real>(k: usize) -> T {
    T::from_usize_lossy(k).ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn e(p: usize, i: usize) -> UnitVector<f64> {
        UnitVector::basis(p, i)
    }

    fn random_batch(b: usize, m: usize, p: usize, seed: u64) -> MultiViewBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..b * 2 * m)
            .flat_map(|_| vmf::uniform_unit(p, &mut rng))
            .collect();
        MultiViewBatch::new(b, m, p, data).unwrap()
    }

    #[test]
    fn batch_layout_and_validation() {
        let data: Vec<f64> = (0..2 * 2 * 3 * 4).map(|x| x as f64 + 1.0).collect();
        let b = MultiViewBatch::new(2, 3, 4, data).unwrap();
        assert_eq!(b.offset(1, 1, 2), ((1 * 2 + 1) * 3 + 2) * 4);
        for row in b.as_slice().chunks(4) {
            assert!((norm(row) - 1.0).abs() < 1e-15);
        }
        assert!(MultiViewBatch::new(2, 3, 4, vec![1.0; 5]).is_err());
        assert!(MultiViewBatch::<f64>::new(0, 1, 4, vec![]).is_err());
        assert!(MultiViewBatch::new(1, 1, 2, vec![0.0, 0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn sim_cos_examples() {
        assert_eq!(sim_cos(&e(3, 0), &e(3, 0)).unwrap(), 1.0);
        assert_eq!(sim_cos(&e(3, 0), &e(3, 0).neg()).unwrap(), -1.0);
        assert_eq!(sim_cos(&e(3, 0), &e(3, 1)).unwrap(), 0.0);
        assert!(sim_cos(&e(3, 0), &e(4, 1)).is_err());
    }

    #[test]
    fn sim_div_examples() {
        let d = VmfDistribution::new(e(3, 0), 2.0).unwrap();
        assert_eq!(sim_div(&d, &d).unwrap().abs(), 0.0);
        let dj = VmfDistribution::new(e(3, 1), 2.0).unwrap();
        assert!((sim_div(&d, &dj).unwrap() + 1.074629441455096).abs() < 1e-12);
        // equal concentrations, opposite directions: -2 k A_p(k)
        for &k in &[1.0, 10.0, 100.0] {
            let a = VmfDistribution::new(e(3, 0), k).unwrap();
            let b = VmfDistribution::new(e(3, 0).neg(), k).unwrap();
            let want = -2.0 * k * bessel::bessel_ratio_a(3, k).unwrap();
            assert!((sim_div(&a, &b).unwrap() - want).abs() < 1e-10 * want.abs());
        }
    }

    #[test]
    fn info_nce_examples() {
        let t1 = Temperature::<f64>::default();
        let l = info_nce(1.0, &vec![-1.0; 4096], t1).unwrap();
        assert!((l - 6.319).abs() < 1e-3);
        let l = info_nce(1.0f64, &vec![-1.0; 256], Temperature::new(0.2).unwrap()).unwrap();
        // log(1 + 256 e^{-10}) = 0.0115554
        assert!((l - 0.011).abs() < 1e-3);
        for k in [1usize, 7, 300] {
            let l = info_nce(0.3, &vec![0.3; k], t1).unwrap();
            assert!((l - (1.0 + k as f64).ln()).abs() < 1e-12);
            assert!((l - uniform_ceiling::<f64>(k)).abs() < 1e-12);
        }
        assert!(info_nce(1.0, &[], t1).is_err());
        assert!(info_nce(f64::NAN, &[0.0], t1).is_err());
        assert!(info_nce(1.0, &[f64::INFINITY], t1).is_err());
        assert!(Temperature::new(0.0).is_err());
    }

    #[test]
    fn info_nce_survives_huge_logits() {
        let l = info_nce(-5000.0f64, &[5000.0, -1e4], Temperature::default()).unwrap();
        assert!((l - 10000.0).abs() < 1e-9);
    }

    #[test]
    fn proposition_table_examples() {
        let t = proposition_table(&[1.0, 0.5, 0.1], &[256, 65536]).unwrap();
        assert!((t.values[0][1] - 9.090).abs() < 1e-3);
        assert!((t.values[1][0] - 1.738).abs() < 1e-3);
        assert!(t.values[2][0] < 5e-4);
        assert!(proposition_table(&[0.0], &[1]).is_err());
        assert!(proposition_table(&[1.0], &[0]).is_err());
        let text = t.to_text();
        assert!(text.contains("9.090") && text.contains("0.0001"), "{text}");
        assert!(t.to_csv().starts_with("tau,K=256,K=65536\n"));
    }

    #[test]
    fn dsf_identical_groups_with_far_negatives() {
        let p = 8;
        let z = e(p, 0);
        let batch =
            MultiViewBatch::from_unit_vectors(1, 2, &[z.clone(), z.clone(), z.clone(), z.clone()])
                .unwrap();
        let far: Vec<_> = (0..16)
            .map(|_| VmfDistribution::new(z.neg(), 50.0).unwrap())
            .collect();
        let out = dsf_loss(
            &batch,
            NegativeSet::Distributions(&far),
            &StabilizationPolicy::default(),
            Temperature::default(),
        )
        .unwrap();
        assert_eq!(out.margin_pos.abs(), 0.0);
        assert!(out.margin_neg < -50.0);
        assert!(out.loss > 0.0 && out.loss < 1e-20, "{}", out.loss);
    }

    #[test]
    fn dsf_rejects_wrong_negative_kind_and_empty_sets() {
        let batch = random_batch(3, 2, 4, 1);
        let pol = StabilizationPolicy::default();
        let t = Temperature::default();
        assert!(dsf_loss(
            &batch,
            NegativeSet::Keys(&[vec![1.0, 0.0, 0.0, 0.0]]),
            &pol,
            t
        )
        .is_err());
        assert!(dsf_loss(&batch, NegativeSet::Distributions(&[]), &pol, t).is_err());
        assert!(loss_avg(&batch, NegativeSet::Distributions(&[]), t).is_err());
        assert!(fea_avg(&batch, NegativeSet::Keys(&[]), t).is_err());
        let single = random_batch(1, 2, 4, 2);
        assert!(dsf_loss(&single, NegativeSet::InBatch, &pol, t).is_err());
        assert!(loss_avg(&single, NegativeSet::InBatch, t).is_err());
        assert!(cosine_loss(&batch, NegativeSet::InBatch, t).is_err());
    }

    #[test]
    fn dsf_skips_degenerate_instances() {
        let p = 3;
        let mut rows = Vec::new();
        // instance 0: antipodal query group
        rows.extend([e(p, 0), e(p, 0).neg(), e(p, 1), e(p, 1)]);
        for s in 0..3u64 {
            let b = random_batch(1, 2, p, 10 + s);
            rows.extend(
                b.as_slice()
                    .chunks(p)
                    .map(|r| UnitVector::new(r.to_vec()).unwrap()),
            );
        }
        let batch = MultiViewBatch::from_unit_vectors(4, 2, &rows).unwrap();
        let out = dsf_loss(
            &batch,
            NegativeSet::InBatch,
            &StabilizationPolicy::default(),
            Temperature::default(),
        )
        .unwrap();
        assert_eq!(out.skipped, vec![0]);
        assert!(out.loss.is_finite());
        // the skipped query group receives no gradient
        for l in 0..2 {
            let o = batch.offset(0, 0, l);
            assert!(out.grad[o..o + p].iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn loss_avg_single_view_equals_cosine_info_nce() {
        let batch = random_batch(4, 1, 5, 3);
        let t = Temperature::new(0.5).unwrap();
        let out = loss_avg(&batch, NegativeSet::InBatch, t).unwrap();
        let mut want = 0.0;
        for i in 0..4 {
            let q = batch.row(i, 0, 0);
            let pos = dot(q, batch.row(i, 1, 0));
            let negs: Vec<f64> = (0..4)
                .filter(|&j| j != i)
                .map(|j| dot(q, batch.row(j, 1, 0)))
                .collect();
            want += info_nce(pos, &negs, t).unwrap() / 4.0;
        }
        assert!((out.loss - want).abs() < 1e-12);
        let fa = fea_avg(&batch, NegativeSet::InBatch, t).unwrap();
        assert!((fa.loss - want).abs() < 1e-12);
        let c = cosine_loss(&batch, NegativeSet::InBatch, t).unwrap();
        assert_eq!(c, out);
    }

    #[test]
    fn loss_avg_with_duplicated_views_equals_single_view() {
        let single = random_batch(3, 1, 4, 4);
        let t = Temperature::new(0.3).unwrap();
        let mut data = Vec::new();
        for i in 0..3 {
            for g in 0..2 {
                for _ in 0..3 {
                    data.extend_from_slice(single.row(i, g, 0));
                }
            }
        }
        let dup = MultiViewBatch::new(3, 3, 4, data).unwrap();
        let a = loss_avg(&single, NegativeSet::InBatch, t).unwrap().loss;
        let b = loss_avg(&dup, NegativeSet::InBatch, t).unwrap().loss;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn fea_avg_similarity_is_mean_pairwise_dot() {
        for seed in 0..20 {
            let batch = random_batch(2, 4, 16, 100 + seed);
            let a = batch.group_mean(0, 0);
            let b = batch.group_mean(0, 1);
            let mut pairwise = 0.0;
            for l in 0..4 {
                for lp in 0..4 {
                    pairwise += dot(batch.row(0, 0, l), batch.row(0, 1, lp));
                }
            }
            assert!((dot(&a, &b) - pairwise / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dsf_is_invariant_to_view_order() {
        let batch = random_batch(4, 3, 8, 9);
        let pol = StabilizationPolicy::default();
        let t = Temperature::default();
        let base = dsf_loss(&batch, NegativeSet::InBatch, &pol, t)
            .unwrap()
            .loss;
        let mut data = Vec::new();
        for i in 0..4 {
            for g in 0..2 {
                for l in [2, 0, 1] {
                    data.extend_from_slice(batch.row(i, g, l));
                }
            }
        }
        let permuted = MultiViewBatch::new(4, 3, 8, data).unwrap();
        let again = dsf_loss(&permuted, NegativeSet::InBatch, &pol, t)
            .unwrap()
            .loss;
        assert!((base - again).abs() < 1e-10);
    }

    #[test]
    fn gradients_are_tangent() {
        let batch = random_batch(3, 2, 6, 5);
        let t = Temperature::new(0.7).unwrap();
        let outs = [
            dsf_loss(
                &batch,
                NegativeSet::InBatch,
                &StabilizationPolicy::default(),
                t,
            )
            .unwrap(),
            loss_avg(&batch, NegativeSet::InBatch, t).unwrap(),
            fea_avg(&batch, NegativeSet::InBatch, t).unwrap(),
        ];
        for out in outs {
            for (g, z) in out.grad.chunks(6).zip(batch.as_slice().chunks(6)) {
                assert!(dot(g, z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn theorem_examples() {
        let p = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut u = || UnitVector::new(vmf::uniform_unit(p, &mut rng)).unwrap();
        let zi = u();
        let zp = u();
        let negs: Vec<_> = (0..10).map(|_| u()).collect();
        let r = theorem_equivalence_check(&zi, &zp, &negs, 0.5, p).unwrap();
        assert!(r.abs_diff < 1e-8, "{r:?}");

        let zi = e(3, 0);
        let r =
            theorem_equivalence_check(&zi, &e(3, 1), &[e(3, 2), e(3, 0).neg()], 1.0, 3).unwrap();
        assert!((r.kappa / r.kappa.tanh() - 2.0).abs() < 1e-12);
        assert!(r.abs_diff < 1e-8);

        let r = theorem_equivalence_check(&zi, &e(3, 1), &[e(3, 1)], 0.2, 3).unwrap();
        assert!((r.l_div - 2f64.ln()).abs() < 1e-9);
        assert!((r.l_cos - 2f64.ln()).abs() < 1e-9);

        assert!(theorem_equivalence_check(&zi, &e(3, 1), &[e(3, 1)], 0.2, 4).is_err());
    }

    #[test]
    fn margin_dichotomy() {
        let tau = 0.5;
        let t = Temperature::new(tau).unwrap();
        // cosine: any batch keeps the margin within [-2/tau, 2/tau]
        for seed in 0..10 {
            let batch = random_batch(4, 1, 3, 200 + seed);
            let out = loss_avg(&batch, NegativeSet::InBatch, t).unwrap();
            assert!(out.margin.abs() <= 2.0 / tau + 1e-12);
        }
        // divergence: concentrated opposing groups blow through that bound
        let p = 3;
        let z = e(p, 0);
        let batch = MultiViewBatch::from_unit_vectors(1, 1, &[z.clone(), z.clone()]).unwrap();
        let opposing = [VmfDistribution::new(z.neg(), 100.0).unwrap()];
        let out = dsf_loss(
            &batch,
            NegativeSet::Distributions(&opposing),
            &StabilizationPolicy::off(),
            t,
        )
        .unwrap();
        assert!(out.margin > 2.0 / tau);
        assert!(out.margin > 100.0, "{}", out.margin);
    }
}
