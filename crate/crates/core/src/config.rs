//! Run configuration and its flat key-value file form.
//!
//! The config file is one `key = value` per line; lines starting with `#`
//! are comments. Every field the parser accepts is emitted by
//! [`RunConfig::to_kv_string`], and a full emit parses back to an identical
//! config (f64 values use Rust's shortest round-trip formatting).

use std::path::PathBuf;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::QuantizerKind;
use crate::nn::Activation;

/// Where an experiment's data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Seeded Gaussian clusters, partitioned into query/gallery/train.
    Synthetic {
        spec: SyntheticSpec,
        query_count: usize,
        train_count: usize,
        split_seed: u64,
    },
    /// Pre-split feature CSVs. Query and gallery are optional for
    /// train-only runs.
    Csv {
        train: PathBuf,
        query: Option<PathBuf>,
        gallery: Option<PathBuf>,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            spec: SyntheticSpec::default(),
            query_count: 500,
            train_count: 2000,
            split_seed: 7,
        }
    }
}

/// All hyperparameters and toggles of one training/evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub code_length: usize,
    pub tau: f64,
    pub eta: f64,
    pub quantizer: QuantizerKind,
    pub ga_enabled: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_top_k: usize,
    pub hidden_dims: Vec<usize>,
    pub hidden_activation: Activation,
    /// Fraction of the train split held out for monitoring MAP.
    pub val_fraction: f64,
    /// Epoch interval for validation evaluation; 0 disables the holdout.
    pub val_interval: usize,
    pub standardize: bool,
    pub dataset: DatasetSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            code_length: 32,
            tau: 0.99,
            eta: 0.1,
            quantizer: QuantizerKind::Eaq,
            ga_enabled: true,
            batch_size: 128,
            epochs: 60,
            base_lr: 0.01,
            weight_decay: 1e-5,
            seed: 42,
            eval_top_k: 1000,
            hidden_dims: vec![64, 32],
            hidden_activation: Activation::Relu,
            val_fraction: 0.1,
            val_interval: 5,
            standardize: true,
            dataset: DatasetSource::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(8..=1024).contains(&self.code_length) {
            return Err(Error::config(format!(
                "code_length must be in 8..=1024, got {}",
                self.code_length
            )));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config(format!("tau must be in [0, 1), got {}", self.tau)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if self.eval_top_k == 0 {
            return Err(Error::config("eval_top_k must be positive"));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::config("hidden dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction must be in [0, 1)"));
        }
        match &self.dataset {
            DatasetSource::Synthetic {
                spec,
                query_count,
                train_count,
                ..
            } => {
                spec.validate()?;
                let n = spec.total_samples();
                if *query_count == 0 || *query_count >= n {
                    return Err(Error::config(format!(
                        "query_count must be in 1..{n}"
                    )));
                }
                if *train_count == 0 || *train_count > n - query_count {
                    return Err(Error::config(format!(
                        "train_count must be in 1..={}",
                        n - query_count
                    )));
                }
            }
            DatasetSource::Csv { .. } => {}
        }
        Ok(())
    }

    /// Layer dimensions for a given input dim: `D -> hidden... -> K`.
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.code_length);
        dims
    }

    /// Serializes to the flat key-value file form.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("seed", self.seed.to_string());
        kv("code_length", self.code_length.to_string());
        kv("tau", self.tau.to_string());
        kv("eta", self.eta.to_string());
        kv("quantizer", self.quantizer.to_string());
        kv("ga_enabled", self.ga_enabled.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("base_lr", self.base_lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("eval_top_k", self.eval_top_k.to_string());
        kv(
            "hidden_dims",
            self.hidden_dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("hidden_activation", self.hidden_activation.to_string());
        kv("val_fraction", self.val_fraction.to_string());
        kv("val_interval", self.val_interval.to_string());
        kv("standardize", self.standardize.to_string());
        match &self.dataset {
            DatasetSource::Synthetic {
                spec,
                query_count,
                train_count,
                split_seed,
            } => {
                kv("dataset", "synthetic".to_string());
                kv("synth_classes", spec.num_classes.to_string());
                kv("synth_per_class", spec.samples_per_class.to_string());
                kv("synth_dim", spec.dim.to_string());
                kv("synth_spread", spec.cluster_spread.to_string());
                kv("synth_center_scale", spec.class_center_scale.to_string());
                kv("synth_overlap", spec.multilabel_overlap.to_string());
                kv("synth_seed", spec.seed.to_string());
                kv("query_count", query_count.to_string());
                kv("train_count", train_count.to_string());
                kv("split_seed", split_seed.to_string());
            }
            DatasetSource::Csv {
                train,
                query,
                gallery,
            } => {
                kv("dataset", "csv".to_string());
                kv("train_csv", train.display().to_string());
                if let Some(q) = query {
                    kv("query_csv", q.display().to_string());
                }
                if let Some(g) = gallery {
                    kv("gallery_csv", g.display().to_string());
                }
            }
        }
        out
    }

    /// Parses the key-value form. Missing keys keep their defaults; unknown
    /// or duplicated keys are configuration errors.
    pub fn from_kv_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        // dataset-kind dependent fields collected first
        let mut dataset_kind: Option<String> = None;
        let mut synth = match &cfg.dataset {
            DatasetSource::Synthetic { spec, .. } => spec.clone(),
            _ => SyntheticSpec::default(),
        };
        let (mut query_count, mut train_count, mut split_seed) = (500usize, 2000usize, 7u64);
        let (mut train_csv, mut query_csv, mut gallery_csv) =
            (None::<PathBuf>, None::<PathBuf>, None::<PathBuf>);

        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: (lineno + 1) as u64,
                    message: format!("expected 'key = value', found '{line}'"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("duplicate config key '{key}'")));
            }
            let parse_err = |what: &str| {
                Error::config(format!("config key '{key}': '{value}' is not a valid {what}"))
            };
            match key {
                "seed" => cfg.seed = value.parse().map_err(|_| parse_err("u64"))?,
                "code_length" => {
                    cfg.code_length = value.parse().map_err(|_| parse_err("integer"))?
                }
                "tau" => cfg.tau = value.parse().map_err(|_| parse_err("number"))?,
                "eta" => cfg.eta = value.parse().map_err(|_| parse_err("number"))?,
                "quantizer" => cfg.quantizer = value.parse()?,
                "ga_enabled" => {
                    cfg.ga_enabled = value.parse().map_err(|_| parse_err("bool"))?
                }
                "batch_size" => {
                    cfg.batch_size = value.parse().map_err(|_| parse_err("integer"))?
                }
                "epochs" => cfg.epochs = value.parse().map_err(|_| parse_err("integer"))?,
                "base_lr" => cfg.base_lr = value.parse().map_err(|_| parse_err("number"))?,
                "weight_decay" => {
                    cfg.weight_decay = value.parse().map_err(|_| parse_err("number"))?
                }
                "eval_top_k" => {
                    cfg.eval_top_k = value.parse().map_err(|_| parse_err("integer"))?
                }
                "hidden_dims" => {
                    cfg.hidden_dims = value
                        .split(',')
                        .map(|d| d.trim().parse().map_err(|_| parse_err("dimension list")))
                        .collect::<Result<_>>()?
                }
                "hidden_activation" => cfg.hidden_activation = value.parse()?,
                "val_fraction" => {
                    cfg.val_fraction = value.parse().map_err(|_| parse_err("number"))?
                }
                "val_interval" => {
                    cfg.val_interval = value.parse().map_err(|_| parse_err("integer"))?
                }
                "standardize" => {
                    cfg.standardize = value.parse().map_err(|_| parse_err("bool"))?
                }
                "dataset" => dataset_kind = Some(value.to_string()),
                "synth_classes" => {
                    synth.num_classes = value.parse().map_err(|_| parse_err("integer"))?
                }
                "synth_per_class" => {
                    synth.samples_per_class = value.parse().map_err(|_| parse_err("integer"))?
                }
                "synth_dim" => synth.dim = value.parse().map_err(|_| parse_err("integer"))?,
                "synth_spread" => {
                    synth.cluster_spread = value.parse().map_err(|_| parse_err("number"))?
                }
                "synth_center_scale" => {
                    synth.class_center_scale = value.parse().map_err(|_| parse_err("number"))?
                }
                "synth_overlap" => {
                    synth.multilabel_overlap = value.parse().map_err(|_| parse_err("number"))?
                }
                "synth_seed" => synth.seed = value.parse().map_err(|_| parse_err("u64"))?,
                "query_count" => {
                    query_count = value.parse().map_err(|_| parse_err("integer"))?
                }
                "train_count" => {
                    train_count = value.parse().map_err(|_| parse_err("integer"))?
                }
                "split_seed" => split_seed = value.parse().map_err(|_| parse_err("u64"))?,
                "train_csv" => train_csv = Some(PathBuf::from(value)),
                "query_csv" => query_csv = Some(PathBuf::from(value)),
                "gallery_csv" => gallery_csv = Some(PathBuf::from(value)),
                other => {
                    return Err(Error::config(format!("unknown config key '{other}'")));
                }
            }
        }

        cfg.dataset = match dataset_kind.as_deref() {
            None | Some("synthetic") => DatasetSource::Synthetic {
                spec: synth,
                query_count,
                train_count,
                split_seed,
            },
            Some("csv") => {
                let train = train_csv.ok_or_else(|| {
                    Error::config("dataset = csv requires train_csv")
                })?;
                DatasetSource::Csv {
                    train,
                    query: query_csv,
                    gallery: gallery_csv,
                }
            }
            Some(other) => {
                return Err(Error::config(format!(
                    "unknown dataset kind '{other}' (expected synthetic or csv)"
                )))
            }
        };
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::data(format!(
                "cannot read config file {}: {e}",
                path.as_ref().display()
            ))
        })?;
        Self::from_kv_str(&text)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_kv_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn kv_round_trip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.tau = 0.975;
        cfg.eta = 0.30000000000000004; // not representable prettily
        cfg.base_lr = 1e-3;
        cfg.hidden_dims = vec![48, 16];
        let text = cfg.to_kv_string();
        let back = RunConfig::from_kv_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_kv_string());
    }

    #[test]
    fn kv_round_trip_csv_source() {
        let cfg = RunConfig {
            dataset: DatasetSource::Csv {
                train: PathBuf::from("/tmp/train.csv"),
                query: Some(PathBuf::from("/tmp/query.csv")),
                gallery: None,
            },
            ..RunConfig::default()
        };
        let back = RunConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn comments_and_partial_files_parse() {
        let cfg = RunConfig::from_kv_str("# a comment\n\ntau = 0.5\nepochs = 3\n").unwrap();
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.code_length, RunConfig::default().code_length);
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(RunConfig::from_kv_str("bogus = 1\n").is_err());
        assert!(RunConfig::from_kv_str("tau = 0.5\ntau = 0.6\n").is_err());
        assert!(RunConfig::from_kv_str("tau 0.5\n").is_err());
    }

    #[test]
    fn validation_bounds() {
        let mut cfg = RunConfig::default();
        cfg.code_length = 4;
        assert!(cfg.validate().is_err());
        cfg.code_length = 2048;
        assert!(cfg.validate().is_err());
        cfg.code_length = 32;
        cfg.tau = 1.0;
        assert!(cfg.validate().is_err());
        cfg.tau = 0.5;
        cfg.eta = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn layer_dims_composition() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.layer_dims(32), vec![32, 64, 32, 32]);
    }

    #[test]
    fn csv_source_requires_train_path() {
        assert!(RunConfig::from_kv_str("dataset = csv\n").is_err());
    }
}
