//! Desk-scale contrastive pretraining on synthetic data.

pub mod augment;
pub mod dataset;
pub mod encoder;
pub mod queue;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{make_views, make_views_with};
pub use dataset::{generate_dataset, SyntheticDataset};
pub use encoder::{Encoder, Layer};
pub use queue::FifoQueue;

use crate::config::{ExperimentConfig, Method, NegativeMode};
use crate::error::{DsfError, Result};
use crate::loss::{self, LossOutput, MultiViewBatch, NegativeSet, Temperature};
use crate::vmf::{self, VmfDistribution};

/// Stream identifiers splitting one root seed between components.
pub(crate) mod stream {
    pub const CENTERS: u64 = 1;
    pub const POINTS: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const EPOCH: u64 = 5;
    pub const VIEWS: u64 = 6;
}

/// Independent generator for `(seed, component, index)`; all run randomness flows through here.
pub fn derive_rng(seed: u64, component: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(component);
    rng
}

/// Past negatives, matching the kind of similarity being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeQueue {
    Distributions(FifoQueue<VmfDistribution<f64>>),
    Keys(FifoQueue<Vec<f64>>),
}

impl NegativeQueue {
    fn new(method: Method, capacity: usize) -> Result<Self> {
        Ok(match method {
            Method::Dsf => Self::Distributions(FifoQueue::new(capacity)?),
            _ => Self::Keys(FifoQueue::new(capacity)?),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Distributions(q) => q.len(),
            Self::Keys(q) => q.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything needed to continue a run. All randomness is derived from
/// `(seed, step)`, so the step counter doubles as the generator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub step: u64,
    pub encoder: Encoder,
    pub velocity: Vec<Layer>,
    pub queue: NegativeQueue,
}

impl TrainState {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Per-step diagnostics. Margins are on logits (similarity / tau).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub margin_pos: f64,
    pub margin_neg: f64,
    pub margin: f64,
    pub mean_kappa: Option<f64>,
    pub max_kappa: Option<f64>,
    pub negatives: usize,
    pub skipped: usize,
    pub wall_ms: f64,
}

impl MetricsRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &Self) -> bool {
        Self {
            wall_ms: 0.0,
            ..self.clone()
        } == Self {
            wall_ms: 0.0,
            ..other.clone()
        }
    }

    pub const CSV_HEADER: &'static str = "step,epoch,loss,margin_pos,margin_neg,margin,mean_kappa,max_kappa,negatives,skipped,wall_ms";

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.step,
            self.epoch,
            self.loss,
            self.margin_pos,
            self.margin_neg,
            self.margin,
            opt(self.mean_kappa),
            opt(self.max_kappa),
            self.negatives,
            self.skipped,
            self.wall_ms
        )
    }
}

pub struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a SyntheticDataset,
    state: TrainState,
    steps_per_epoch: u64,
    temperature: Temperature<f64>,
    order: Option<(u64, Vec<usize>)>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a ExperimentConfig, data: &'a SyntheticDataset) -> Result<Self> {
        let encoder = Encoder::new(&cfg.encoder, data.dim, cfg.seed)?;
        let state = TrainState {
            seed: cfg.seed,
            step: 0,
            velocity: encoder.zero_like(),
            encoder,
            queue: NegativeQueue::new(cfg.method, cfg.loss.queue_capacity)?,
        };
        Self::resume(cfg, data, state)
    }

    /// Continues from a saved state; the config must be the one that produced it.
    pub fn resume(
        cfg: &'a ExperimentConfig,
        data: &'a SyntheticDataset,
        state: TrainState,
    ) -> Result<Self> {
        cfg.validate()?;
        if state.encoder.input_dim() != data.dim
            || state.encoder.output_dim() != cfg.encoder.output_dim
        {
            return Err(DsfError::InvalidInput(
                "checkpoint encoder does not match config".into(),
            ));
        }
        if state.seed != cfg.seed {
            return Err(DsfError::InvalidInput(format!(
                "checkpoint seed {} differs from config seed {}",
                state.seed, cfg.seed
            )));
        }
        let steps_per_epoch = (data.n_train / cfg.optimizer.batch_size) as u64;
        if steps_per_epoch == 0 {
            return Err(DsfError::config(
                "optimizer.batch_size",
                "larger than the training split",
            ));
        }
        Ok(Self {
            cfg,
            data,
            state,
            steps_per_epoch,
            temperature: Temperature::new(cfg.temperature())?,
            order: None,
            started: Instant::now(),
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.cfg.optimizer.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.data.n_train).collect();
            perm.shuffle(&mut derive_rng(self.state.seed, stream::EPOCH, epoch));
            self.order = Some((epoch, perm));
        }
        let b = self.cfg.optimizer.batch_size;
        let k = (step % self.steps_per_epoch) as usize;
        self.order.as_ref().unwrap().1[k * b..(k + 1) * b].to_vec()
    }

    /// Augmented inputs for `step` in batch layout.
    fn batch_inputs(&mut self, step: u64) -> Result<Vec<f64>> {
        let idx = self.batch_indices(step);
        let mut rng = derive_rng(self.state.seed, stream::VIEWS, step);
        let mut x = Vec::with_capacity(
            idx.len() * 2 * self.cfg.augmentation.views_per_group * self.data.dim,
        );
        for i in idx {
            for v in make_views_with(self.data.point(i), &self.cfg.augmentation, &mut rng)? {
                x.extend(v);
            }
        }
        Ok(x)
    }

    fn loss(&mut self, batch: &MultiViewBatch<f64>) -> Result<(LossOutput<f64>, usize)> {
        let use_queue =
            self.cfg.loss.negatives == NegativeMode::Queue && !self.state.queue.is_empty();
        let t = self.temperature;
        let in_batch = batch.batch() - 1;
        match (&mut self.state.queue, self.cfg.method) {
            (NegativeQueue::Distributions(q), Method::Dsf) => {
                let k = if use_queue { q.len() } else { in_batch };
                let negs = if use_queue {
                    NegativeSet::Distributions(q.as_slice())
                } else {
                    NegativeSet::InBatch
                };
                Ok((
                    loss::dsf_loss(batch, negs, &self.cfg.loss.stabilization, t)?,
                    k,
                ))
            }
            (NegativeQueue::Keys(q), m) => {
                let k = if use_queue { q.len() } else { in_batch };
                let negs = if use_queue {
                    NegativeSet::Keys(q.as_slice())
                } else {
                    NegativeSet::InBatch
                };
                let out = match m {
                    Method::Cosine => loss::cosine_loss(batch, negs, t)?,
                    Method::LossAvg => loss::loss_avg(batch, negs, t)?,
                    Method::FeaAvg => loss::fea_avg(batch, negs, t)?,
                    Method::Dsf => unreachable!(),
                };
                Ok((out, k))
            }
            _ => Err(DsfError::InvalidInput(
                "queue kind does not match method".into(),
            )),
        }
    }

    /// Group-2 summaries pushed to the queue after each step.
    fn enqueue(&mut self, batch: &MultiViewBatch<f64>) {
        let b = batch.batch();
        match &mut self.state.queue {
            NegativeQueue::Distributions(q) => {
                let policy = &self.cfg.loss.stabilization;
                q.push_batch((0..b).filter_map(|i| {
                    vmf::estimate_rows(&batch.group_rows(i, 1), policy)
                        .ok()
                        .map(|e| e.dist)
                }));
            }
            NegativeQueue::Keys(q) => match self.cfg.method {
                Method::FeaAvg => q.push_batch((0..b).map(|i| batch.group_mean(i, 1))),
                _ => q.push_batch((0..b).map(|i| batch.row(i, 1, 0).to_vec())),
            },
        }
    }

    /// Loss and diagnostics on the batch of `step` under the current parameters, without updating anything.
    pub fn probe(&mut self, step: u64) -> Result<LossOutput<f64>> {
        let x = self.batch_inputs(step)?;
        let rows = x.len() / self.data.dim;
        let fwd = self.state.encoder.forward(&x, rows)?;
        let batch = MultiViewBatch::new(
            self.cfg.optimizer.batch_size,
            self.cfg.augmentation.views_per_group,
            self.state.encoder.output_dim(),
            fwd.z,
        )?;
        Ok(self.loss(&batch)?.0)
    }

    pub fn step(&mut self) -> Result<MetricsRecord> {
        let t0 = Instant::now();
        let step = self.state.step;
        let diverged = |e: DsfError| match e {
            DsfError::NonFinite(d) => DsfError::Diverged { step, detail: d },
            other => other,
        };
        let x = self.batch_inputs(step)?;
        let rows = x.len() / self.data.dim;
        let fwd = self.state.encoder.forward(&x, rows).map_err(diverged)?;
        let batch = MultiViewBatch::new(
            self.cfg.optimizer.batch_size,
            self.cfg.augmentation.views_per_group,
            self.state.encoder.output_dim(),
            fwd.z.clone(),
        )
        .map_err(diverged)?;
        let (out, negatives) = self.loss(&batch).map_err(diverged)?;
        if !out.loss.is_finite() {
            return Err(DsfError::Diverged {
                step,
                detail: format!("loss {}", out.loss),
            });
        }
        let grads = self.state.encoder.backward(&fwd, &out.grad);
        let o = &self.cfg.optimizer;
        self.state.encoder.momentum_step(
            &mut self.state.velocity,
            &grads,
            o.learning_rate,
            o.momentum,
        );
        if !self.state.encoder.is_finite() {
            return Err(DsfError::Diverged {
                step,
                detail: "non-finite encoder parameters".into(),
            });
        }
        self.enqueue(&batch);
        self.state.step += 1;
        Ok(MetricsRecord {
            step,
            epoch: step / self.steps_per_epoch,
            loss: out.loss,
            margin_pos: out.margin_pos,
            margin_neg: out.margin_neg,
            margin: out.margin,
            mean_kappa: out.mean_kappa,
            max_kappa: out.max_kappa,
            negatives,
            skipped: out.skipped.len(),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Steps until the configured number of epochs is reached, handing each record to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&MetricsRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let rec = self.step()?;
            sink(&rec)?;
        }
        Ok(())
    }

    pub fn elapsed_secs(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }
}

/// Trains from scratch and returns the final state with every step's metrics.
pub fn train(
    cfg: &ExperimentConfig,
    data: &SyntheticDataset,
) -> Result<(TrainState, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(cfg, data)?;
    let mut records = Vec::with_capacity(trainer.total_steps() as usize);
    trainer.run(|r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.into_state(), records))
}
