//! Stochastic views of an input: vMF noise on the sphere followed by coordinate dropout.

use rand::Rng;

use crate::config::AugmentationSpec;
use crate::error::{DsfError, Result};
use crate::scalar::norm;
use crate::vmf::WoodSampler;

/// Draws `2m` views of `x` from `rng`; views `0..m` form the first group.
pub fn make_views_with<R: Rng>(
    x: &[f64],
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if spec.views_per_group == 0 {
        return Err(DsfError::config(
            "augmentation.views_per_group",
            "need m >= 1",
        ));
    }
    let n = norm(x);
    if !(n > 0.0 && n.is_finite()) {
        return Err(DsfError::InvalidInput(
            "cannot augment a zero or non-finite input".into(),
        ));
    }
    let x_hat: Vec<f64> = x.iter().map(|v| v / n).collect();
    let sampler = spec.noise_kappa.map(|k| WoodSampler::new(x.len(), k));
    let keep = 1.0 - spec.dropout_prob;
    Ok((0..2 * spec.views_per_group)
        .map(|_| {
            let mut v = match &sampler {
                Some(s) => s.draw(&x_hat, rng),
                None => x_hat.clone(),
            };
            if spec.dropout_prob > 0.0 {
                for c in v.iter_mut() {
                    if rng.random::<f64>() < spec.dropout_prob {
                        *c = 0.0;
                    } else {
                        *c /= keep;
                    }
                }
            }
            v
        })
        .collect())
}

/// [`make_views_with`] seeded from `seed`.
pub fn make_views(x: &[f64], spec: &AugmentationSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    make_views_with(x, spec, &mut rng)
}
