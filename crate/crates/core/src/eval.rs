//! Frozen-embedding evaluation: cosine kNN and a softmax linear probe.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{DsfError, Result};
use crate::scalar::{dot, norm};
use crate::train::{Encoder, SyntheticDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Unit-norm embeddings with one class label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub embeddings: Vec<f64>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl EmbeddingTable {
    /// Rows are renormalized; zero or non-finite rows are rejected.
    pub fn new(
        dim: usize,
        mut embeddings: Vec<f64>,
        labels: Vec<usize>,
        split: Split,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(DsfError::InvalidInput(
                "embedding dimension must be >= 1".into(),
            ));
        }
        if embeddings.len() != dim * labels.len() {
            return Err(DsfError::DimensionMismatch {
                expected: dim * labels.len(),
                found: embeddings.len(),
            });
        }
        for (i, row) in embeddings.chunks_mut(dim).enumerate() {
            let n = norm(row);
            if !(n > 0.0 && n.is_finite()) {
                return Err(DsfError::InvalidInput(format!(
                    "embedding row {i} has norm {n}"
                )));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self {
            dim,
            embeddings,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    /// One line per row: `label,x_1,...,x_p`. A header line starting with `label` is allowed.
    pub fn from_csv(text: &str, split: Split) -> Result<Self> {
        let mut dim = None;
        let mut embeddings = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("label")) {
                continue;
            }
            let bad =
                |what: &str| DsfError::config(format!("line {}", lineno + 1), what.to_string());
            let mut fields = line.split(',');
            let label: usize = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| bad("first field must be a class id"))?;
            let row = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(&format!("bad number: {e}")))?;
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(bad(&format!("expected {d} values, found {}", row.len())))
                }
                _ => {}
            }
            labels.push(label);
            embeddings.extend(row);
        }
        let dim = dim.ok_or_else(|| DsfError::InvalidInput("embedding table is empty".into()))?;
        Self::new(dim, embeddings, labels, split)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label");
        for j in 0..self.dim {
            let _ = write!(s, ",e{j}");
        }
        s.push('\n');
        for (i, label) in self.labels.iter().enumerate() {
            let _ = write!(s, "{label}");
            for x in self.row(i) {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
        s
    }

    /// Applies `q` (row-major `dim x dim`) to every embedding.
    pub fn rotated(&self, q: &[f64]) -> Result<Self> {
        let d = self.dim;
        let emb = self
            .embeddings
            .chunks(d)
            .flat_map(|r| (0..d).map(move |i| dot(&q[i * d..(i + 1) * d], r)))
            .collect();
        Self::new(d, emb, self.labels.clone(), self.split)
    }
}

/// Train/test tables of clean (unaugmented) inputs through a frozen encoder.
pub fn embed_dataset(
    encoder: &Encoder,
    data: &SyntheticDataset,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    let p = encoder.output_dim();
    let train = encoder.embed(data.train_points(), data.n_train)?;
    let test = encoder.embed(data.test_points(), data.len() - data.n_train)?;
    Ok((
        EmbeddingTable::new(p, train, data.train_labels().to_vec(), Split::Train)?,
        EmbeddingTable::new(p, test, data.test_labels().to_vec(), Split::Test)?,
    ))
}

/// `min(200, n_train / 10)`, at least 1.
pub fn default_k(n_train: usize) -> usize {
    (n_train / 10).clamp(1, 200)
}

fn check_pair(train: &EmbeddingTable, test: &EmbeddingTable) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return Err(DsfError::InvalidInput(
            "evaluation tables must be nonempty".into(),
        ));
    }
    if train.dim != test.dim {
        return Err(DsfError::DimensionMismatch {
            expected: train.dim,
            found: test.dim,
        });
    }
    Ok(())
}

fn num_classes(train: &EmbeddingTable, test: &EmbeddingTable) -> usize {
    train
        .labels
        .iter()
        .chain(&test.labels)
        .max()
        .map_or(0, |m| m + 1)
}

/// Majority vote among the `k` most cosine-similar training rows. Neighbours
/// with equal similarity are ordered by row index; vote ties go to the smaller class id.
pub fn knn_eval(train: &EmbeddingTable, test: &EmbeddingTable, k: usize) -> Result<f64> {
    check_pair(train, test)?;
    if k == 0 || k > train.len() {
        return Err(DsfError::InvalidInput(format!(
            "k must lie in [1, {}], got {k}",
            train.len()
        )));
    }
    let classes = num_classes(train, test);
    let mut correct = 0usize;
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    let mut votes = vec![0usize; classes];
    for t in 0..test.len() {
        let q = test.row(t);
        sims.clear();
        sims.extend((0..train.len()).map(|i| (dot(q, train.row(i)), i)));
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < sims.len() {
            sims.select_nth_unstable_by(k - 1, order);
        }
        votes.iter_mut().for_each(|v| *v = 0);
        for &(_, i) in &sims[..k] {
            votes[train.labels[i]] += 1;
        }
        // first maximum wins, i.e. the smallest class id among ties
        let pred = votes
            .iter()
            .enumerate()
            .fold(
                (0, 0),
                |best, (c, &v)| if v > best.1 { (c, v) } else { best },
            )
            .0;
        correct += usize::from(pred == test.labels[t]);
    }
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
}

/// Multinomial logistic regression on the frozen embeddings, trained by
/// full-batch gradient descent from zero weights.
pub fn linear_probe(
    train: &EmbeddingTable,
    test: &EmbeddingTable,
    epochs: usize,
    lr: f64,
) -> Result<ProbeResult> {
    check_pair(train, test)?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(DsfError::InvalidInput(format!(
            "probe learning rate must be > 0, got {lr}"
        )));
    }
    let c = num_classes(train, test);
    let d = train.dim;
    let n = train.len() as f64;
    let mut w = vec![0.0; c * d];
    let mut b = vec![0.0; c];
    let logits = |w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]| {
        for (k, o) in out.iter_mut().enumerate() {
            *o = b[k] + dot(&w[k * d..(k + 1) * d], x);
        }
    };
    let mut z = vec![0.0; c];
    let mut final_loss = f64::NAN;
    for _ in 0..epochs {
        let mut gw = vec![0.0; c * d];
        let mut gb = vec![0.0; c];
        let mut loss = 0.0;
        for i in 0..train.len() {
            let x = train.row(i);
            logits(&w, &b, x, &mut z);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let y = train.labels[i];
            loss += max + sum.ln() - z[y];
            for k in 0..c {
                let g = (z[k] - max).exp() / sum - f64::from(u8::from(k == y));
                gb[k] += g;
                gw[k * d..(k + 1) * d]
                    .iter_mut()
                    .zip(x)
                    .for_each(|(a, &xv)| *a += g * xv);
            }
        }
        final_loss = loss / n;
        if !final_loss.is_finite() {
            return Err(DsfError::NonFinite("linear probe loss".into()));
        }
        w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= lr * g / n);
        b.iter_mut().zip(&gb).for_each(|(a, g)| *a -= lr * g / n);
    }
    let accuracy = |t: &EmbeddingTable| {
        let mut z = vec![0.0; c];
        let hits = (0..t.len())
            .filter(|&i| {
                logits(&w, &b, t.row(i), &mut z);
                let pred = z
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                        if v > best.1 {
                            (k, v)
                        } else {
                            best
                        }
                    })
                    .0;
                pred == t.labels[i]
            })
            .count();
        hits as f64 / t.len() as f64
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(train),
        test_accuracy: accuracy(test),
        final_loss,
    })
}

/// Summary written after evaluating one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub n_train: usize,
    pub n_test: usize,
    pub knn_k: usize,
    pub knn_accuracy: f64,
    pub probe_train_accuracy: f64,
    pub probe_accuracy: f64,
}

pub fn evaluate(
    train: &EmbeddingTable,
    test: &EmbeddingTable,
    k: Option<usize>,
    probe_epochs: usize,
    probe_lr: f64,
) -> Result<EvalResult> {
    let k = k.unwrap_or_else(|| default_k(train.len()));
    let knn = knn_eval(train, test, k)?;
    let probe = linear_probe(train, test, probe_epochs, probe_lr)?;
    Ok(EvalResult {
        n_train: train.len(),
        n_test: test.len(),
        knn_k: k,
        knn_accuracy: knn,
        probe_train_accuracy: probe.train_accuracy,
        probe_accuracy: probe.test_accuracy,
    })
}
