//! Labelled vMF mixtures standing in for an image dataset.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{derive_rng, stream};
use crate::config::DatasetSpec;
use crate::error::{DsfError, Result};
use crate::scalar::dot;
use crate::vmf::{self, UnitVector, VmfDistribution};

const CENTER_ATTEMPTS: usize = 10_000;

/// Points on the unit sphere of `R^d`; the first `n_train` rows form the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub dim: usize,
    pub points: Vec<f64>,
    pub labels: Vec<usize>,
    pub centers: Vec<UnitVector<f64>>,
    pub n_train: usize,
    pub spec: DatasetSpec,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn train_points(&self) -> &[f64] {
        &self.points[..self.n_train * self.dim]
    }

    pub fn test_points(&self) -> &[f64] {
        &self.points[self.n_train * self.dim..]
    }

    pub fn train_labels(&self) -> &[usize] {
        &self.labels[..self.n_train]
    }

    pub fn test_labels(&self) -> &[usize] {
        &self.labels[self.n_train..]
    }
}

fn draw_centers(spec: &DatasetSpec, seed: u64) -> Result<Vec<UnitVector<f64>>> {
    let mut rng = derive_rng(seed, stream::CENTERS, 0);
    let max_cos = spec.min_separation_deg.to_radians().cos();
    let mut centers: Vec<UnitVector<f64>> = Vec::with_capacity(spec.num_classes);
    while centers.len() < spec.num_classes {
        let found = (0..CENTER_ATTEMPTS).find_map(|_| {
            let c = vmf::uniform_unit(spec.input_dim, &mut rng);
            centers
                .iter()
                .all(|o| dot(o.as_slice(), &c) <= max_cos)
                .then_some(c)
        });
        match found {
            Some(c) => centers.push(UnitVector::new(c)?),
            None => {
                return Err(DsfError::Infeasible(format!(
                    "could not place {} centres in R^{} at least {} degrees apart ({} placed after {CENTER_ATTEMPTS} attempts)",
                    spec.num_classes,
                    spec.input_dim,
                    spec.min_separation_deg,
                    centers.len()
                )))
            }
        }
    }
    Ok(centers)
}

/// Balanced mixture of `num_classes` vMF components with well-separated means,
/// shuffled and split into train and test parts. Deterministic in `seed`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<SyntheticDataset> {
    if spec.num_classes < 2 {
        return Err(DsfError::config(
            "dataset.num_classes",
            "need at least 2 classes",
        ));
    }
    if !(spec.class_kappa > 0.0 && spec.class_kappa.is_finite()) {
        return Err(DsfError::config("dataset.class_kappa", "must be > 0"));
    }
    if spec.num_points < spec.num_classes {
        return Err(DsfError::config(
            "dataset.num_points",
            "fewer points than classes",
        ));
    }
    let centers = draw_centers(spec, seed)?;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(spec.num_points);
    for (c, center) in centers.iter().enumerate() {
        let n = spec.num_points / spec.num_classes
            + usize::from(c < spec.num_points % spec.num_classes);
        let dist = VmfDistribution::new(center.clone(), spec.class_kappa)?;
        let mut rng = derive_rng(seed, stream::POINTS, c as u64);
        let sample_seed = rand::Rng::random::<u64>(&mut rng);
        rows.extend(
            dist.sample(n, sample_seed)?
                .into_iter()
                .map(|x| (c, x.into_vec())),
        );
    }
    rows.shuffle(&mut derive_rng(seed, stream::SHUFFLE, 0));
    let n_test = (spec.num_points as f64 * spec.test_fraction).round() as usize;
    let n_train = spec.num_points - n_test;
    if n_test == 0 || n_train == 0 {
        return Err(DsfError::config(
            "dataset.test_fraction",
            "split leaves an empty part",
        ));
    }
    let (labels, points): (Vec<usize>, Vec<Vec<f64>>) = rows.into_iter().unzip();
    Ok(SyntheticDataset {
        dim: spec.input_dim,
        points: points.concat(),
        labels,
        centers,
        n_train,
        spec: spec.clone(),
        seed,
    })
}
