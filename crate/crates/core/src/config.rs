//! Declarative experiment description, read from JSON.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DsfError, Result};
use crate::vmf::StabilizationPolicy;

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cosine,
    LossAvg,
    FeaAvg,
    Dsf,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cosine, Method::LossAvg, Method::FeaAvg, Method::Dsf];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cosine => "cosine",
            Method::LossAvg => "loss_avg",
            Method::FeaAvg => "fea_avg",
            Method::Dsf => "dsf",
        }
    }

    /// Temperature used when the config leaves it unset.
    pub fn default_temperature(self) -> f64 {
        match self {
            Method::Dsf => 1.0,
            _ => 0.2,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = DsfError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                DsfError::config(
                    "method",
                    format!("unknown method `{s}` (expected cosine, loss_avg, fea_avg or dsf)"),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    InBatch,
    Queue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub num_points: usize,
    pub input_dim: usize,
    pub class_kappa: f64,
    /// Minimum angle between any two class centres, in degrees.
    pub min_separation_deg: f64,
    /// Share of points held out for evaluation.
    pub test_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            num_points: 5000,
            input_dim: 16,
            class_kappa: 30.0,
            min_separation_deg: 60.0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            output_dim: 8,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Concentration of the vMF noise around each clean input; `null` means no noise.
    pub noise_kappa: Option<f64>,
    pub views_per_group: usize,
    pub dropout_prob: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            noise_kappa: Some(40.0),
            views_per_group: 2,
            dropout_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    /// Defaults to 1 for `dsf` and 0.2 for the cosine methods.
    pub temperature: Option<f64>,
    pub negatives: NegativeMode,
    pub queue_capacity: usize,
    pub stabilization: StabilizationPolicy<f64>,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            temperature: None,
            negatives: NegativeMode::InBatch,
            queue_capacity: 4096,
            stabilization: StabilizationPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 64,
            epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Neighbours for kNN; `null` means `min(200, N_train / 10)`.
    pub knn_k: Option<usize>,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            knn_k: None,
            probe_epochs: 200,
            probe_lr: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub output: PathBuf,
    pub dataset: DatasetSpec,
    pub encoder: EncoderSpec,
    pub augmentation: AugmentationSpec,
    pub loss: LossSpec,
    pub optimizer: OptimizerSpec,
    pub eval: EvalSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Dsf,
            seed: 0,
            output: PathBuf::from("runs"),
            dataset: DatasetSpec::default(),
            encoder: EncoderSpec::default(),
            augmentation: AugmentationSpec::default(),
            loss: LossSpec::default(),
            optimizer: OptimizerSpec::default(),
            eval: EvalSpec::default(),
        }
    }
}

fn field(cond: bool, name: &str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(DsfError::config(name, detail()))
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending field path.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            DsfError::config(
                if path == "." { "<root>".into() } else { path },
                inner.to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn temperature(&self) -> f64 {
        self.loss
            .temperature
            .unwrap_or(self.method.default_temperature())
    }

    /// Features processed per step: `B x 2m`.
    pub fn budget(&self) -> usize {
        self.optimizer.batch_size * 2 * self.augmentation.views_per_group
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        field(d.num_classes >= 2, "dataset.num_classes", || {
            format!("need at least 2 classes, got {}", d.num_classes)
        })?;
        field(d.input_dim >= 2, "dataset.input_dim", || {
            format!("need >= 2, got {}", d.input_dim)
        })?;
        field(
            d.class_kappa.is_finite() && d.class_kappa > 0.0,
            "dataset.class_kappa",
            || format!("must be > 0, got {}", d.class_kappa),
        )?;
        field(
            d.min_separation_deg >= 0.0 && d.min_separation_deg <= 180.0,
            "dataset.min_separation_deg",
            || format!("must lie in [0, 180], got {}", d.min_separation_deg),
        )?;
        field(
            d.test_fraction > 0.0 && d.test_fraction < 1.0,
            "dataset.test_fraction",
            || format!("must lie in (0, 1), got {}", d.test_fraction),
        )?;
        let n_test = (d.num_points as f64 * d.test_fraction).round() as usize;
        field(
            n_test >= 1 && n_test < d.num_points,
            "dataset.num_points",
            || format!("{} points leave an empty train or test split", d.num_points),
        )?;

        let e = &self.encoder;
        field(e.output_dim >= 2, "encoder.output_dim", || {
            format!("need >= 2, got {}", e.output_dim)
        })?;
        field(e.hidden.iter().all(|&h| h > 0), "encoder.hidden", || {
            "layer widths must be > 0".into()
        })?;

        let a = &self.augmentation;
        field(
            a.views_per_group >= 1,
            "augmentation.views_per_group",
            || "need m >= 1".into(),
        )?;
        field(
            a.noise_kappa.is_none_or(|k| k > 0.0 && k.is_finite()),
            "augmentation.noise_kappa",
            || format!("must be > 0, got {:?}", a.noise_kappa),
        )?;
        field(
            (0.0..1.0).contains(&a.dropout_prob),
            "augmentation.dropout_prob",
            || format!("must lie in [0, 1), got {}", a.dropout_prob),
        )?;
        if self.method == Method::Cosine {
            field(
                a.views_per_group == 1,
                "augmentation.views_per_group",
                || {
                    format!(
                        "method cosine is two-view (m = 1), got m = {}",
                        a.views_per_group
                    )
                },
            )?;
        }

        let l = &self.loss;
        if let Some(t) = l.temperature {
            field(t.is_finite() && t > 0.0, "loss.temperature", || {
                format!("must be > 0, got {t}")
            })?;
        }
        field(l.queue_capacity >= 1, "loss.queue_capacity", || {
            "must be >= 1".into()
        })?;
        l.stabilization.validate().map_err(|e| match e {
            DsfError::Config { field, detail } => {
                DsfError::config(format!("loss.stabilization.{field}"), detail)
            }
            other => other,
        })?;

        let o = &self.optimizer;
        field(
            o.learning_rate.is_finite() && o.learning_rate >= 0.0,
            "optimizer.learning_rate",
            || format!("must be >= 0, got {}", o.learning_rate),
        )?;
        field(
            (0.0..1.0).contains(&o.momentum),
            "optimizer.momentum",
            || format!("must lie in [0, 1), got {}", o.momentum),
        )?;
        let n_train = d.num_points - n_test;
        field(
            o.batch_size >= 2 && o.batch_size <= n_train,
            "optimizer.batch_size",
            || format!("must lie in [2, {n_train}], got {}", o.batch_size),
        )?;
        field(o.epochs >= 1, "optimizer.epochs", || "must be >= 1".into())?;

        let v = &self.eval;
        if let Some(k) = v.knn_k {
            field(k >= 1 && k <= n_train, "eval.knn_k", || {
                format!("must lie in [1, {n_train}], got {k}")
            })?;
        }
        field(
            v.probe_lr.is_finite() && v.probe_lr > 0.0,
            "eval.probe_lr",
            || format!("must be > 0, got {}", v.probe_lr),
        )?;
        Ok(())
    }
}

/// Rejects a comparison group whose members process different numbers of
/// features per step.
pub fn check_budget_parity(configs: &[ExperimentConfig]) -> Result<usize> {
    let Some(first) = configs.first() else {
        return Err(DsfError::InvalidInput(
            "comparison needs at least one config".into(),
        ));
    };
    let budget = first.budget();
    for (i, c) in configs.iter().enumerate().skip(1) {
        if c.budget() != budget {
            return Err(DsfError::config(
                format!("configs[{i}].optimizer.batch_size"),
                format!(
                    "budget parity violated: B x 2m = {} x {} = {} but configs[0] uses {budget}",
                    c.optimizer.batch_size,
                    2 * c.augmentation.views_per_group,
                    c.budget()
                ),
            ));
        }
    }
    Ok(budget)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_json_str(&c.to_json_pretty()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.budget(), 256);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c =
            ExperimentConfig::from_json_str(r#"{"method": "fea_avg", "optimizer": {"epochs": 3}}"#)
                .unwrap();
        assert_eq!(c.method, Method::FeaAvg);
        assert_eq!(c.optimizer.epochs, 3);
        assert_eq!(c.optimizer.batch_size, 64);
        assert_eq!(c.temperature(), 0.2);
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::from_json_str(r#"{"method": "dfs"}"#).unwrap_err();
        match err {
            DsfError::Config { field, detail } => {
                assert_eq!(field, "method");
                assert!(detail.contains("line 1"), "{detail}");
            }
            e => panic!("{e}"),
        }
        let err =
            ExperimentConfig::from_json_str("{\"optimizer\": {\n \"batch_sise\": 3}}").unwrap_err();
        assert!(
            matches!(&err, DsfError::Config { field, .. } if field == "optimizer.batch_sise"),
            "{err}"
        );
        assert!(err.to_string().contains("line 2"), "{err}");
        let err =
            ExperimentConfig::from_json_str(r#"{"loss": {"stabilization": {"lambda_r": 1.5}}}"#)
                .unwrap_err();
        assert!(
            matches!(&err, DsfError::Config { field, .. } if field == "loss.stabilization.lambda_r"),
            "{err}"
        );
        let err = ExperimentConfig::from_json_str(r#"{"method": "cosine"}"#).unwrap_err();
        assert!(
            matches!(&err, DsfError::Config { field, .. } if field == "augmentation.views_per_group")
        );
    }

    #[test]
    fn budget_parity() {
        let mut a = ExperimentConfig::default();
        let mut b = a.clone();
        b.augmentation.views_per_group = 4;
        b.optimizer.batch_size = 32;
        assert_eq!(check_budget_parity(&[a.clone(), b.clone()]).unwrap(), 256);
        b.optimizer.batch_size = 64;
        assert!(check_budget_parity(&[a.clone(), b]).is_err());
        a.optimizer.batch_size = 128;
        assert!(check_budget_parity(&[]).is_err());
    }

    #[test]
    fn method_parsing() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }
}
