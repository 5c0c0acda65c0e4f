//! End-to-end training: forward, pairwise loss, dead-bit telemetry, gradient
//! amplification, backprop, and cosine-annealed SGD, plus retrieval
//! evaluation and the four-variant ablation harness.
//!
//! Per batch the loop runs in this order: forward to get codes, quantizer
//! selection and loss, raw code gradient, dead-bit count on the raw
//! gradient, amplification, encoder backward, parameter update. Epoch ends
//! add a full-train-split scan: every sample's loss gradient against the
//! whole split, feeding the epoch dead-bit series.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{DatasetSource, RunConfig};
use crate::data::{
    generate_synthetic, load_csv, split_bundle, BatchSampler, DatasetBundle, FeatureDataset,
    Split,
};
use crate::error::{Error, Result};
use crate::eval::{binarize, map_at_k, pr_curve, PrPoint};
use crate::losses::{combined_loss, sigmoid, EaqSelection, LossValue, QuantizerKind};
use crate::matrix::{dot, sign_pm, Matrix};
use crate::nn::{sgd_step, EncoderModel, OptimizerState};
use crate::rescue::{amplify, count_dead_bits, AmplifierConfig, DeadBitReport};
use crate::telemetry::{EpochRecord, EvalRecord, LogRecord, StepRecord, TrainingLog};

/// Everything one training step produced, handed to observers before the
/// parameter update is applied.
pub struct StepTrace<'a> {
    pub step: u64,
    pub epoch: usize,
    pub batch_indices: &'a [usize],
    pub codes: &'a Matrix,
    /// Loss gradient w.r.t. the codes, before amplification.
    pub raw_code_grad: &'a Matrix,
    /// Gradient actually sent into the encoder backward pass.
    pub amplified_grad: &'a Matrix,
    pub dead_report: &'a DeadBitReport,
    pub eaq_selection: Option<&'a EaqSelection>,
    pub loss: &'a LossValue,
    pub lr: f64,
}

/// Hook into the training loop, mainly for tests and snapshotting.
pub trait TrainObserver {
    fn on_step(&mut self, _trace: StepTrace<'_>) {}
    fn on_epoch_end(&mut self, _epoch: usize, _model: &EncoderModel) {}
}

struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Trains an encoder on the dataset's train split.
pub fn train(config: &RunConfig, dataset: &FeatureDataset) -> Result<(EncoderModel, TrainingLog)> {
    train_observed(config, dataset, &mut NoopObserver)
}

/// `train` with an observer receiving every step trace and epoch boundary.
pub fn train_observed(
    config: &RunConfig,
    dataset: &FeatureDataset,
    observer: &mut dyn TrainObserver,
) -> Result<(EncoderModel, TrainingLog)> {
    config.validate()?;
    if dataset.split() != Split::Train {
        return Err(Error::config(format!(
            "training requires the train split, got {}",
            dataset.split()
        )));
    }

    // Optional validation holdout for monitoring MAP; never used for
    // stopping decisions.
    let (train_ds, val_ds) = carve_validation(config, dataset)?;

    let mut model = EncoderModel::new(
        &config.layer_dims(train_ds.dim()),
        config.hidden_activation,
        config.seed,
    )?;
    let mut log = TrainingLog::new();

    let n = train_ds.len();
    let mut sampler = BatchSampler::new(config.batch_size, config.seed.wrapping_add(1))?;
    let steps_per_epoch = sampler.batches_per_epoch(n);
    let total_steps = (config.epochs * steps_per_epoch) as u64;
    if total_steps == 0 {
        return Ok((model, log));
    }

    let mut opt = OptimizerState::new(config.base_lr, config.weight_decay, total_steps)?;
    let amplifier = AmplifierConfig::new(config.tau, config.ga_enabled)?;

    let mut step: u64 = 0;
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = sampler.sample_batch(&train_ds)?;
            let (codes, tape) = model.forward(&batch.features)?;
            let combined =
                combined_loss(&codes, &batch.sim, config.quantizer, config.eta).map_err(|e| {
                    abort_with_diagnostics(step, epoch, &codes, None, e.to_string())
                })?;
            if !combined.value.total.is_finite() {
                return Err(abort_with_diagnostics(
                    step,
                    epoch,
                    &codes,
                    Some(&combined.value),
                    "loss is not finite".to_string(),
                ));
            }
            loss_sum += combined.value.total;

            let dead = count_dead_bits(&codes, &combined.grad, config.tau)?.at(step, epoch);
            let amplified = amplify(&codes, &combined.grad, &amplifier)?;
            let grads = model.backward(&tape, &amplified)?;
            let lr = opt.current_lr();

            observer.on_step(StepTrace {
                step,
                epoch,
                batch_indices: &batch.indices,
                codes: &codes,
                raw_code_grad: &combined.grad,
                amplified_grad: &amplified,
                dead_report: &dead,
                eaq_selection: combined.eaq_selection.as_ref(),
                loss: &combined.value,
                lr,
            });

            sgd_step(&mut model, &grads, &mut opt).map_err(|e| match e {
                Error::NonFinite(what) => abort_with_diagnostics(
                    step,
                    epoch,
                    &codes,
                    Some(&combined.value),
                    format!("non-finite {what}"),
                ),
                other => other,
            })?;

            log.push(LogRecord::Step(StepRecord {
                step,
                epoch,
                similarity_loss: combined.value.similarity_term,
                quantization_loss: combined.value.quantization_term,
                total_loss: combined.value.total,
                lr,
                dead_count: dead.dead_count,
                total_bits: dead.total_bits,
            }));
            step += 1;
        }

        let scan = scan_dead_bits(&model, &train_ds, config)?;
        log.push(LogRecord::Epoch(EpochRecord {
            epoch,
            dead_count: scan.dead_count,
            total_bits: scan.total_bits,
            dead_fraction: scan.dead_fraction,
            mean_step_loss: loss_sum / steps_per_epoch as f64,
        }));
        observer.on_epoch_end(epoch, &model);

        if let Some(val) = &val_ds {
            if (epoch + 1) % config.val_interval == 0 {
                let gallery = train_ds.clone().with_split(Split::Gallery);
                let top_k = config.eval_top_k.min(gallery.len());
                let metrics = evaluate(&model, val, &gallery, top_k)?;
                log.push(LogRecord::Eval(EvalRecord {
                    epoch,
                    top_k,
                    map: metrics.map,
                    pr: metrics.pr,
                }));
            }
        }
    }

    Ok((model, log))
}

fn carve_validation(
    config: &RunConfig,
    dataset: &FeatureDataset,
) -> Result<(FeatureDataset, Option<FeatureDataset>)> {
    if config.val_interval == 0 || config.val_fraction == 0.0 {
        return Ok((dataset.clone(), None));
    }
    let n = dataset.len();
    let val_n = (n as f64 * config.val_fraction).floor() as usize;
    if val_n == 0 || n - val_n == 0 {
        return Ok((dataset.clone(), None));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)));
    let mut val_idx = perm[..val_n].to_vec();
    let mut train_idx = perm[val_n..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((
        dataset.subset(&train_idx, Split::Train)?,
        Some(dataset.subset(&val_idx, Split::Query)?),
    ))
}

fn abort_with_diagnostics(
    step: u64,
    epoch: usize,
    codes: &Matrix,
    loss: Option<&LossValue>,
    what: String,
) -> Error {
    let (mut lo, mut hi, mut sum, mut nonfinite) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for &c in codes.data() {
        if c.is_finite() {
            lo = lo.min(c);
            hi = hi.max(c);
            sum += c;
        } else {
            nonfinite += 1;
        }
    }
    let mean = sum / codes.data().len().max(1) as f64;
    let loss_part = loss.map_or(String::new(), |l| {
        format!(
            "; loss sim={} quant={} total={}",
            l.similarity_term, l.quantization_term, l.total
        )
    });
    Error::TrainAbort {
        step,
        epoch,
        reason: format!(
            "{what}; batch {}x{} codes min={lo} max={hi} mean={mean} nonfinite={nonfinite}{loss_part}",
            codes.rows(),
            codes.cols()
        ),
    }
}

/// Compact per-sample label representation for the all-pairs scan.
enum LabelKeys {
    /// All labels < 128: one bitmask per sample, similar iff masks intersect.
    Masks(Vec<u128>),
    /// Fallback: sorted label sets with merge intersection.
    Sets(Vec<Vec<u32>>),
}

impl LabelKeys {
    fn build(labels: &[Vec<u32>]) -> LabelKeys {
        if labels.iter().all(|ls| ls.iter().all(|&l| l < 128)) {
            LabelKeys::Masks(
                labels
                    .iter()
                    .map(|ls| ls.iter().fold(0u128, |m, &l| m | (1u128 << l)))
                    .collect(),
            )
        } else {
            LabelKeys::Sets(labels.to_vec())
        }
    }

    #[inline]
    fn similar(&self, i: usize, j: usize) -> bool {
        match self {
            LabelKeys::Masks(m) => m[i] & m[j] != 0,
            LabelKeys::Sets(s) => crate::losses::label_sets_intersect(&s[i], &s[j]),
        }
    }
}

/// Encodes a whole dataset in fixed-size chunks (no tape).
pub fn encode_dataset(model: &EncoderModel, features: &Matrix) -> Result<Matrix> {
    const CHUNK: usize = 512;
    let n = features.rows();
    let mut out = Matrix::zeros(n, model.code_length());
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let rows: Vec<Vec<f64>> = (start..end).map(|i| features.row(i).to_vec()).collect();
        let codes = model.infer(&Matrix::from_rows(&rows)?)?;
        for (offset, i) in (start..end).enumerate() {
            out.row_mut(i).copy_from_slice(codes.row(offset));
        }
        start = end;
    }
    Ok(out)
}

/// Gradient of the configured total loss w.r.t. every sample's code, taken
/// over all pairs of the dataset (self pairs included in the similarity
/// term, excluded from the error-aware quantizer, matching the batch loss).
fn dataset_code_gradient(
    codes: &Matrix,
    labels: &LabelKeys,
    quantizer: QuantizerKind,
    eta: f64,
) -> Matrix {
    let n = codes.rows();
    let k = codes.cols();
    let mut grad = Matrix::zeros(n, k);
    grad.par_rows_mut().enumerate().for_each(|(i, gi)| {
        let hi = codes.row(i);
        for j in 0..n {
            let hj = codes.row(j);
            let similar = labels.similar(i, j);
            let c = sigmoid(0.5 * dot(hi, hj)) - f64::from(u8::from(similar));
            if c != 0.0 {
                for t in 0..k {
                    gi[t] += c * hj[t];
                }
            }
            if quantizer == QuantizerKind::Eaq && j != i {
                for t in 0..k {
                    let agree = sign_pm(hi[t]) == sign_pm(hj[t]);
                    if agree == similar {
                        gi[t] += eta * 2.0 * (hi[t] - sign_pm(hi[t]));
                    }
                }
            }
        }
        match quantizer {
            QuantizerKind::L2 => {
                for (t, g) in gi.iter_mut().enumerate() {
                    let h = hi[t];
                    *g += eta * 2.0 * (h - sign_pm(h));
                }
            }
            QuantizerKind::LogCosh => {
                for (t, g) in gi.iter_mut().enumerate() {
                    let h = hi[t];
                    *g += eta * (h.abs() - 1.0).tanh() * sign_pm(h);
                }
            }
            QuantizerKind::Eaq | QuantizerKind::None => {}
        }
    });
    grad
}

/// Full-train-split dead-bit scan: encode every sample, take the loss
/// gradient against the entire split, and count stuck bits.
pub fn scan_dead_bits(
    model: &EncoderModel,
    dataset: &FeatureDataset,
    config: &RunConfig,
) -> Result<DeadBitReport> {
    let codes = encode_dataset(model, dataset.features())?;
    let keys = LabelKeys::build(dataset.labels());
    let grad = dataset_code_gradient(&codes, &keys, config.quantizer, config.eta);
    count_dead_bits(&codes, &grad, config.tau)
}

/// Retrieval metrics of one query/gallery evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub top_k: usize,
    pub map: f64,
    pub pr: Vec<PrPoint>,
}

/// Encodes and binarizes both splits, then computes MAP@top_k and the
/// radius precision-recall sweep. Query and gallery must be disjoint by
/// sample id; rows are processed in ascending-id order so distance ties and
/// float reductions are deterministic.
pub fn evaluate(
    model: &EncoderModel,
    query: &FeatureDataset,
    gallery: &FeatureDataset,
    top_k: usize,
) -> Result<EvalMetrics> {
    let query_ids: HashSet<u64> = query.ids().iter().copied().collect();
    if let Some(shared) = gallery.ids().iter().find(|id| query_ids.contains(id)) {
        return Err(Error::config(format!(
            "query and gallery share sample id {shared}"
        )));
    }

    let query = query.sorted_by_id()?;
    let gallery = gallery.sorted_by_id()?;
    let query_codes = binarize(&encode_dataset(model, query.features())?)?;
    let gallery_codes = binarize(&encode_dataset(model, gallery.features())?)?;

    let map = map_at_k(
        &query_codes,
        query.labels(),
        &gallery_codes,
        gallery.labels(),
        top_k,
    )?;
    let pr = pr_curve(
        &query_codes,
        query.labels(),
        &gallery_codes,
        gallery.labels(),
    )?;
    Ok(EvalMetrics { top_k, map, pr })
}

/// The four ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    /// Amplifier on, error-aware quantizer.
    Full,
    /// Amplifier off, error-aware quantizer.
    NoAmplifier,
    /// Amplifier on, plain L2 quantizer.
    NoEaq,
    /// Both off: plain pairwise + L2 baseline.
    Baseline,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoAmplifier,
        AblationVariant::NoEaq,
        AblationVariant::Baseline,
    ];

    pub fn apply(self, config: &RunConfig) -> RunConfig {
        let mut cfg = config.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoAmplifier => cfg.ga_enabled = false,
            AblationVariant::NoEaq => cfg.quantizer = QuantizerKind::L2,
            AblationVariant::Baseline => {
                cfg.ga_enabled = false;
                cfg.quantizer = QuantizerKind::L2;
            }
        }
        cfg
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AblationVariant::Full => "full",
            AblationVariant::NoAmplifier => "no_ga",
            AblationVariant::NoEaq => "no_eaq",
            AblationVariant::Baseline => "baseline",
        };
        write!(f, "{s}")
    }
}

/// One ablation cell: a trained variant's retrieval score plus its
/// epoch-end dead-bit series.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seed: u64,
    pub map: f64,
    pub epoch_dead_counts: Vec<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
}

impl AblationOutcome {
    pub fn mean_map(&self, variant: AblationVariant) -> f64 {
        let maps: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.map)
            .collect();
        maps.iter().sum::<f64>() / maps.len().max(1) as f64
    }

    /// CSV table: one row per (variant, seed), then one mean row per variant.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("variant,seed,map\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{}\n", row.variant, row.seed, row.map));
        }
        for variant in AblationVariant::ALL {
            if self.rows.iter().any(|r| r.variant == variant) {
                out.push_str(&format!("{},mean,{}\n", variant, self.mean_map(variant)));
            }
        }
        out
    }
}

/// Trains and evaluates all four variants with shared seeds.
///
/// The base config must have the amplifier enabled and the error-aware
/// quantizer selected; variants are derived from it per seed.
pub fn ablation_suite(
    base: &RunConfig,
    data: &DatasetBundle,
    seeds: &[u64],
) -> Result<AblationOutcome> {
    if !base.ga_enabled || base.quantizer != QuantizerKind::Eaq {
        return Err(Error::config(
            "ablation base config must enable the amplifier and the eaq quantizer",
        ));
    }
    if seeds.is_empty() {
        return Err(Error::config("ablation needs at least one seed"));
    }
    let mut outcome = AblationOutcome::default();
    for &seed in seeds {
        for variant in AblationVariant::ALL {
            let mut cfg = variant.apply(base);
            cfg.seed = seed;
            let (model, log) = train(&cfg, &data.train)?;
            let metrics = evaluate(&model, &data.query, &data.gallery, cfg.eval_top_k)?;
            log::info!(
                "ablation variant={variant} seed={seed} map={:.4}",
                metrics.map
            );
            outcome.rows.push(AblationRow {
                variant,
                seed,
                map: metrics.map,
                epoch_dead_counts: log.epochs().map(|e| e.dead_count).collect(),
            });
        }
    }
    Ok(outcome)
}

/// Data resolved from a config's dataset source.
pub enum LoadedData {
    Bundle(DatasetBundle),
    TrainOnly(FeatureDataset),
}

/// Resolves the configured dataset source, applying standardization (fitted
/// on the train split) when the config asks for it.
pub fn load_data(config: &RunConfig) -> Result<LoadedData> {
    match &config.dataset {
        DatasetSource::Synthetic {
            spec,
            query_count,
            train_count,
            split_seed,
        } => {
            let full = generate_synthetic(spec)?;
            let mut bundle = split_bundle(&full, *query_count, *train_count, *split_seed)?;
            if config.standardize {
                bundle.standardize()?;
            }
            Ok(LoadedData::Bundle(bundle))
        }
        DatasetSource::Csv {
            train,
            query,
            gallery,
        } => {
            let train_ds = load_csv(train, Split::Train)?;
            match (query, gallery) {
                (Some(q), Some(g)) => {
                    let mut bundle = DatasetBundle {
                        train: train_ds,
                        query: load_csv(q, Split::Query)?,
                        gallery: load_csv(g, Split::Gallery)?,
                    };
                    if config.standardize {
                        bundle.standardize()?;
                    }
                    Ok(LoadedData::Bundle(bundle))
                }
                (None, None) => {
                    let mut train_ds = train_ds;
                    if config.standardize {
                        let st = crate::data::Standardizer::fit(&train_ds);
                        st.apply(&mut train_ds)?;
                    }
                    Ok(LoadedData::TrainOnly(train_ds))
                }
                _ => Err(Error::config(
                    "csv dataset needs both query_csv and gallery_csv (or neither)",
                )),
            }
        }
    }
}

impl LoadedData {
    pub fn train_split(&self) -> &FeatureDataset {
        match self {
            LoadedData::Bundle(b) => &b.train,
            LoadedData::TrainOnly(ds) => ds,
        }
    }

    pub fn bundle(&self) -> Result<&DatasetBundle> {
        match self {
            LoadedData::Bundle(b) => Ok(b),
            LoadedData::TrainOnly(_) => Err(Error::config(
                "this command needs query and gallery splits",
            )),
        }
    }
}

/// Trains on the bundle's train split and evaluates on query/gallery.
pub fn run_experiment(
    config: &RunConfig,
    data: &DatasetBundle,
) -> Result<(EncoderModel, TrainingLog, EvalMetrics)> {
    let (model, log) = train(config, &data.train)?;
    let metrics = evaluate(&model, &data.query, &data.gallery, config.eval_top_k)?;
    Ok((model, log, metrics))
}
