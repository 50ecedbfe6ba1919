//! End-to-end training: versioned run configuration, data preparation,
//! the uncertainty-threshold warm-up, mini-batch gradient descent with
//! decoupled weight decay, and post-training evaluation.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    inject_noise, load_jsonl, split, synth_dataset, Dataset, Sample, SplitSpec, SynthSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{apply_temperature, calibration_report, CalibrationReport, TemperatureFit};
use crate::losses::{
    empirical_posteriors, total_loss, uncertainty, BaseLoss, LossPlan, ProbBatch,
};
use crate::model::{
    featurize, EncoderParams, FeatureVec, Featurizer, Head, HeadGrads, HypersphericalHead,
    LinearHead, Model, ModelGrads, ScaleMode,
};
use crate::numerics::{softmax_rows, Matrix};
use crate::sphere::{optimize_frame, FrameOptConfig};
use crate::Real;

type Mat = Matrix<Real>;

pub const CONFIG_VERSION: u32 = 1;

/// Classifier head selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Hyperspherical,
    Linear,
}

/// Where the train/dev/test corpora come from. Label noise, when
/// configured, corrupts the train split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synth {
        spec: SynthSpec,
        split: SplitSpec,
        #[serde(default)]
        train_label_noise: f64,
        #[serde(default)]
        noise_seed: u64,
    },
    Jsonl {
        path: String,
        split: SplitSpec,
        #[serde(default)]
        train_label_noise: f64,
        #[serde(default)]
        noise_seed: u64,
    },
    JsonlFiles {
        train: String,
        dev: String,
        test: String,
    },
}

fn default_buckets() -> usize {
    4096
}
fn default_ngram_min() -> usize {
    2
}
fn default_ngram_max() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_d_embed() -> usize {
    32
}
fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_d_out() -> usize {
    16
}
fn default_head() -> HeadKind {
    HeadKind::Hyperspherical
}
fn default_scale() -> ScaleMode {
    ScaleMode::Frobenius
}

/// Featurizer, encoder, and head shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_buckets")]
    pub num_buckets: usize,
    #[serde(default = "default_ngram_min")]
    pub ngram_min: usize,
    #[serde(default = "default_ngram_max")]
    pub ngram_max: usize,
    #[serde(default = "default_true")]
    pub lowercase: bool,
    #[serde(default = "default_d_embed")]
    pub d_embed: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Encoder output width H; the label frame lives on the H-sphere.
    #[serde(default = "default_d_out")]
    pub d_out: usize,
    #[serde(default = "default_head")]
    pub head: HeadKind,
    /// Optional explicit frame dimension; must equal d_out when set.
    #[serde(default)]
    pub frame_h: Option<usize>,
    #[serde(default = "default_scale")]
    pub scale: ScaleMode,
    /// Frame optimizer settings; defaults derive the seed from the run seed.
    #[serde(default)]
    pub frame_opt: Option<FrameOptConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_buckets: default_buckets(),
            ngram_min: default_ngram_min(),
            ngram_max: default_ngram_max(),
            lowercase: true,
            d_embed: default_d_embed(),
            hidden: default_hidden(),
            d_out: default_d_out(),
            head: default_head(),
            frame_h: None,
            scale: default_scale(),
            frame_opt: None,
        }
    }
}

fn default_base() -> BaseLoss {
    BaseLoss::CrossEntropy
}
fn default_kl_bins() -> usize {
    10
}

/// Loss composition; weights of zero disable a term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_base")]
    pub base: BaseLoss,
    #[serde(default)]
    pub rau_weight: f64,
    #[serde(default)]
    pub avuc_weight: f64,
    #[serde(default)]
    pub kl_weight: f64,
    #[serde(default = "default_kl_bins")]
    pub kl_bins: usize,
    /// Fixed uncertainty threshold; skips the warm-up heuristic when set.
    #[serde(default)]
    pub u_theta_override: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            base: default_base(),
            rau_weight: 0.0,
            avuc_weight: 0.0,
            kl_weight: 0.0,
            kl_bins: default_kl_bins(),
            u_theta_override: None,
        }
    }
}

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.05
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_warm_epochs() -> usize {
    2
}
fn default_bins() -> usize {
    crate::evaluation::DEFAULT_BINS
}
fn default_kl_updates() -> usize {
    1
}

/// Versioned run configuration; unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Epochs whose per-sample uncertainties feed the u_θ running mean;
    /// auxiliary losses stay off while the threshold is being estimated.
    #[serde(default = "default_warm_epochs")]
    pub u_theta_warm_epochs: usize,
    /// Keep updating u_θ every epoch instead of freezing after warm-up.
    #[serde(default)]
    pub u_theta_continuous: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bins")]
    pub eval_bins: usize,
    /// Empirical-posterior refreshes per epoch when the KL term is active.
    #[serde(default = "default_kl_updates")]
    pub kl_updates_per_epoch: usize,
}

impl TrainConfig {
    /// Minimal config around a data source; everything else defaulted.
    pub fn new(data: DataConfig) -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            data,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            weight_decay: default_weight_decay(),
            u_theta_warm_epochs: default_warm_epochs(),
            u_theta_continuous: false,
            seed: 0,
            eval_bins: default_bins(),
            kl_updates_per_epoch: default_kl_updates(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} unsupported, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1".to_string()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight_decay {} must be nonnegative",
                self.weight_decay
            )));
        }
        for (name, w) in [
            ("rau_weight", self.loss.rau_weight),
            ("avuc_weight", self.loss.avuc_weight),
            ("kl_weight", self.loss.kl_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("{name} {w} must be nonnegative")));
            }
        }
        if self.loss.rau_weight > 0.0 && self.loss.avuc_weight > 0.0 {
            return Err(Error::config(
                "rau_weight and avuc_weight cannot both be positive".to_string(),
            ));
        }
        if let BaseLoss::LabelSmoothing { eps } = self.loss.base {
            if !(0.0..=1.0).contains(&eps) {
                return Err(Error::config(format!("label smoothing eps {eps} outside [0, 1]")));
            }
        }
        if let Some(u) = self.loss.u_theta_override {
            if !(0.0..=1.0).contains(&u) {
                return Err(Error::config(format!("u_theta_override {u} outside [0, 1]")));
            }
        } else if self.u_theta_warm_epochs < 1 {
            return Err(Error::config(
                "u_theta_warm_epochs must be at least 1 without an override".to_string(),
            ));
        }
        if self.loss.kl_bins < 1 {
            return Err(Error::config("kl_bins must be at least 1".to_string()));
        }
        if self.kl_updates_per_epoch < 1 {
            return Err(Error::config("kl_updates_per_epoch must be at least 1".to_string()));
        }
        if self.eval_bins < 1 {
            return Err(Error::config("eval_bins must be at least 1".to_string()));
        }
        Featurizer::new(
            self.model.ngram_min,
            self.model.ngram_max,
            self.model.num_buckets,
            self.model.lowercase,
        )?;
        if self.model.d_embed < 1 || self.model.hidden.iter().any(|&d| d < 1) {
            return Err(Error::config("encoder widths must be at least 1".to_string()));
        }
        match self.model.head {
            HeadKind::Hyperspherical => {
                if self.model.d_out < 2 {
                    return Err(Error::config(
                        "hyperspherical head needs encoder output width at least 2".to_string(),
                    ));
                }
                if let Some(h) = self.model.frame_h {
                    if h != self.model.d_out {
                        return Err(Error::config(format!(
                            "frame_h {h} does not match encoder output width {}",
                            self.model.d_out
                        )));
                    }
                }
            }
            HeadKind::Linear => {
                if self.model.d_out < 1 {
                    return Err(Error::config("encoder output width must be at least 1".to_string()));
                }
                if self.model.frame_h.is_some() {
                    return Err(Error::config(
                        "frame_h is only meaningful with the hyperspherical head".to_string(),
                    ));
                }
            }
        }
        if let ScaleMode::Fixed(s) = self.model.scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config(format!("fixed scale {s} must be positive")));
            }
        }
        match &self.data {
            DataConfig::Synth { split, train_label_noise, .. }
            | DataConfig::Jsonl { split, train_label_noise, .. } => {
                split.validate()?;
                if !(0.0..=1.0).contains(train_label_noise) {
                    return Err(Error::config(format!(
                        "train_label_noise {train_label_noise} outside [0, 1]"
                    )));
                }
            }
            DataConfig::JsonlFiles { .. } => {}
        }
        Ok(())
    }
}

/// Dev metrics recorded each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub f1: f64,
    pub ece_classwise: f64,
    pub ece_standard: f64,
}

/// One completed epoch: mean train losses, the threshold in force, and
/// dev metrics when a dev split exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub base_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub u_theta: f64,
    pub aux_active: bool,
    pub dev: Option<DevMetrics>,
}

/// Full run artifact: the config echoed back, one record per epoch, the
/// final held-out report, and timing (excluded from determinism checks).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub test: Option<CalibrationReport>,
    pub wall_clock_secs: Option<f64>,
}

impl RunRecord {
    /// Copy with timing stripped, for bit-identical comparisons.
    pub fn without_wall_clock(mut self) -> Self {
        self.wall_clock_secs = None;
        self
    }
}

/// Per-step view handed to observers before the parameter update.
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub step: usize,
    pub batch_indices: &'a [usize],
    pub loss: f64,
    pub u_theta: f64,
    pub aux_active: bool,
    /// Parameters as they were when the logged loss was computed.
    pub model: &'a Model,
}

/// Hook into the training loop; default callbacks do nothing.
pub trait TrainObserver {
    fn on_step(&mut self, _info: &StepInfo<'_>) {}
    fn on_epoch(&mut self, _model: &Model, _record: &EpochRecord) {}
}

struct NullObserver;

impl TrainObserver for NullObserver {}

/// Running mean of per-sample uncertainties over the first `warm_epochs`
/// recorded epochs, clamped to [0, 1]. Entries past the warm-up window are
/// ignored, which freezes the value once the window is complete.
pub fn update_u_theta(history: &[Vec<f64>], warm_epochs: usize) -> f64 {
    assert!(!history.is_empty(), "needs at least one recorded epoch");
    assert!(warm_epochs >= 1, "warm-up spans at least one epoch");
    let used = &history[..history.len().min(warm_epochs)];
    let mut sum = 0.0;
    let mut count = 0usize;
    for u in used.iter().flatten() {
        sum += u;
        count += 1;
    }
    if count == 0 {
        return 0.0;
    }
    (sum / count as f64).clamp(0.0, 1.0)
}

/// Remaps a dataset onto `vocab` by label name; unknown names are data
/// errors. Used to align dev/test files to the training vocabulary.
pub fn align_to_vocab(ds: &Dataset, vocab: &[String]) -> Result<Dataset> {
    let samples = ds
        .samples()
        .iter()
        .map(|s| {
            let name = &ds.vocab()[s.label];
            vocab
                .iter()
                .position(|v| v == name)
                .map(|label| Sample { text: s.text.clone(), label })
                .ok_or_else(|| Error::data(format!("label {name:?} not in training vocabulary")))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, vocab.to_vec())
}

/// Materializes the train/dev/test datasets, applying train-split label
/// noise when configured.
pub fn prepare_data(cfg: &DataConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let (base, split_spec, noise, noise_seed) = match cfg {
        DataConfig::Synth { spec, split, train_label_noise, noise_seed } => {
            (synth_dataset(spec)?, *split, *train_label_noise, *noise_seed)
        }
        DataConfig::Jsonl { path, split, train_label_noise, noise_seed } => (
            load_jsonl(std::path::Path::new(path))?,
            *split,
            *train_label_noise,
            *noise_seed,
        ),
        DataConfig::JsonlFiles { train, dev, test } => {
            let train = load_jsonl(std::path::Path::new(train))?;
            let dev = align_to_vocab(&load_jsonl(std::path::Path::new(dev))?, train.vocab())?;
            let test = align_to_vocab(&load_jsonl(std::path::Path::new(test))?, train.vocab())?;
            return Ok((train, dev, test));
        }
    };
    let (mut train, dev, test) = split(&base, &split_spec)?;
    if noise > 0.0 {
        train = inject_noise(&train, noise, noise_seed)?;
    }
    Ok((train, dev, test))
}

/// Builds the initial model for a training vocabulary of size K. The
/// hyperspherical frame is optimized here, before the first epoch, and
/// never updated afterwards.
pub fn build_model(cfg: &TrainConfig, k: usize) -> Result<Model> {
    let featurizer = Featurizer::new(
        cfg.model.ngram_min,
        cfg.model.ngram_max,
        cfg.model.num_buckets,
        cfg.model.lowercase,
    )?;
    let mut dims = cfg.model.hidden.clone();
    dims.push(cfg.model.d_out);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(1);
    let encoder = EncoderParams::init(&mut init_rng, cfg.model.num_buckets, cfg.model.d_embed, &dims)?;
    let head = match cfg.model.head {
        HeadKind::Hyperspherical => {
            let frame_cfg = cfg.model.frame_opt.clone().unwrap_or(FrameOptConfig {
                seed: cfg.seed,
                ..FrameOptConfig::default()
            });
            let frame = optimize_frame::<Real>(k, cfg.model.d_out, &frame_cfg);
            Head::Hyperspherical(HypersphericalHead { frame, scale_mode: cfg.model.scale })
        }
        HeadKind::Linear => Head::Linear(LinearHead::init(&mut init_rng, cfg.model.d_out, k)),
    };
    Ok(Model { featurizer, encoder, head, labels: Vec::new() })
}

fn decay_then_step(w: &mut Mat, g: &Mat, lr: f64, wd: f64) {
    if wd > 0.0 {
        w.scale(1.0 - lr * wd);
    }
    w.scaled_add(g, -lr).expect("gradient shape matches parameter");
}

/// Decoupled weight decay on weight matrices only; biases and the frozen
/// frame are never decayed or, for the frame, updated at all.
fn apply_update(model: &mut Model, grads: &ModelGrads, lr: f64, wd: f64) {
    decay_then_step(&mut model.encoder.embed, &grads.encoder.embed, lr, wd);
    for (layer, g) in model.encoder.layers.iter_mut().zip(&grads.encoder.layers) {
        decay_then_step(&mut layer.weight, &g.weight, lr, wd);
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    match (&mut model.head, &grads.head) {
        (Head::Hyperspherical(_), HeadGrads::Hyperspherical) => {}
        (Head::Linear(h), HeadGrads::Linear { weight, bias }) => {
            decay_then_step(&mut h.weight, weight, lr, wd);
            for (b, gb) in h.bias.iter_mut().zip(bias) {
                *b -= lr * gb;
            }
        }
        _ => unreachable!("head and gradient variants always match"),
    }
}

fn gather_rows(table: &Mat, indices: &[usize]) -> Mat {
    let mut out = Matrix::zeros(indices.len(), table.cols());
    for (r, &i) in indices.iter().enumerate() {
        for c in 0..table.cols() {
            out[(r, c)] = table[(i, c)];
        }
    }
    out
}

fn current_u_theta(
    history: &[Vec<f64>],
    warm_epochs: usize,
    continuous: bool,
    override_value: Option<f64>,
) -> f64 {
    if let Some(u) = override_value {
        return u;
    }
    if history.is_empty() || history.iter().all(|e| e.is_empty()) {
        return 0.5;
    }
    let horizon = if continuous { history.len() } else { warm_epochs };
    update_u_theta(history, horizon)
}

/// Forward pass over a whole dataset; returns logits and gold ids mapped
/// through the model vocabulary.
pub fn model_logits(model: &Model, ds: &Dataset) -> Result<(Mat, Vec<usize>)> {
    let aligned = align_to_vocab(ds, &model.labels)?;
    let fvs: Vec<FeatureVec> = aligned
        .samples()
        .iter()
        .map(|s| featurize(&s.text, &model.featurizer))
        .collect();
    let fwd = model.forward(&fvs)?;
    Ok((fwd.logits, aligned.labels()))
}

/// Scores a dataset: forward pass, optional temperature rescaling, then
/// the full calibration report.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    m_bins: usize,
    temperature: Option<TemperatureFit>,
) -> Result<CalibrationReport> {
    if ds.is_empty() {
        return Err(Error::data("cannot evaluate an empty dataset".to_string()));
    }
    let (mut logits, gold) = model_logits(model, ds)?;
    if let Some(tf) = temperature {
        logits = apply_temperature(&logits, tf.t);
    }
    let batch = ProbBatch::from_logits(&logits, gold)?;
    Ok(calibration_report(&batch, m_bins, &model.labels, temperature))
}

/// Trains with the default (silent) observer.
pub fn train(cfg: &TrainConfig) -> Result<(Model, RunRecord)> {
    train_with_observer(cfg, &mut NullObserver)
}

/// Full training loop. Deterministic for a fixed config: RNG streams are
/// derived from the seed per purpose (frame, init, shuffle), and all
/// reductions run in fixed index order.
pub fn train_with_observer(
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Model, RunRecord)> {
    cfg.validate()?;
    let started = Instant::now();
    let (train_ds, dev_ds, test_ds) = prepare_data(&cfg.data)?;
    if train_ds.is_empty() {
        return Err(Error::data("training split is empty".to_string()));
    }
    let k = train_ds.k();
    if k < 2 {
        return Err(Error::data(format!("training needs at least 2 labels, got {k}")));
    }
    let mut model = build_model(cfg, k)?;
    model.labels = train_ds.vocab().to_vec();
    model.validate()?;

    let train_fvs: Vec<FeatureVec> = train_ds
        .samples()
        .iter()
        .map(|s| featurize(&s.text, &model.featurizer))
        .collect();
    let train_gold = train_ds.labels();
    let n = train_fvs.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut empirical: Option<Mat> = None;
    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let aux_active =
            cfg.loss.u_theta_override.is_some() || epoch > cfg.u_theta_warm_epochs;
        let recording = cfg.loss.u_theta_override.is_none()
            && (cfg.u_theta_continuous || epoch <= cfg.u_theta_warm_epochs);
        if recording {
            history.push(Vec::with_capacity(n));
        }
        let kl_active = aux_active && cfg.loss.kl_weight > 0.0;
        let refresh_every = (steps_per_epoch / cfg.kl_updates_per_epoch).max(1);

        let mut base_sum = 0.0;
        let mut aux_sum = 0.0;
        let mut total_sum = 0.0;
        for (step, batch_indices) in order.chunks(cfg.batch_size).enumerate() {
            if kl_active && (empirical.is_none() || step % refresh_every == 0) {
                let fwd = model.forward(&train_fvs)?;
                let probs = softmax_rows(&fwd.logits);
                empirical = Some(empirical_posteriors(&probs, &train_gold, cfg.loss.kl_bins)?);
            }
            let batch_fvs: Vec<FeatureVec> =
                batch_indices.iter().map(|&i| train_fvs[i].clone()).collect();
            let gold: Vec<usize> = batch_indices.iter().map(|&i| train_gold[i]).collect();
            let fwd = model.forward(&batch_fvs)?;
            if recording {
                let probs = softmax_rows(&fwd.logits);
                let epoch_us = history.last_mut().expect("pushed above");
                for r in 0..probs.rows() {
                    epoch_us.push(uncertainty(probs.row(r)));
                }
            }
            let u_theta = current_u_theta(
                &history,
                cfg.u_theta_warm_epochs,
                cfg.u_theta_continuous,
                cfg.loss.u_theta_override,
            );
            let batch_empirical = if kl_active {
                Some(gather_rows(empirical.as_ref().expect("refreshed above"), batch_indices))
            } else {
                None
            };
            let plan = LossPlan {
                base: cfg.loss.base,
                rau_weight: if aux_active { cfg.loss.rau_weight } else { 0.0 },
                avuc_weight: if aux_active { cfg.loss.avuc_weight } else { 0.0 },
                kl_weight: if kl_active { cfg.loss.kl_weight } else { 0.0 },
                u_theta,
                empirical: batch_empirical.as_ref(),
            };
            let loss = total_loss(&fwd.logits, &gold, &plan)?;
            observer.on_step(&StepInfo {
                epoch,
                step,
                batch_indices,
                loss: loss.value,
                u_theta,
                aux_active,
                model: &model,
            });
            let base_only = total_loss(
                &fwd.logits,
                &gold,
                &LossPlan { base: cfg.loss.base, ..LossPlan::default() },
            )?;
            base_sum += base_only.value;
            aux_sum += loss.value - base_only.value;
            total_sum += loss.value;
            let grads = model.backward(&batch_fvs, &fwd, &loss.grad_logits)?;
            apply_update(&mut model, &grads, cfg.learning_rate, cfg.weight_decay);
        }

        let u_theta = current_u_theta(
            &history,
            cfg.u_theta_warm_epochs,
            cfg.u_theta_continuous,
            cfg.loss.u_theta_override,
        );
        let dev = if dev_ds.is_empty() {
            None
        } else {
            let report = evaluate(&model, &dev_ds, cfg.eval_bins, None)?;
            Some(DevMetrics {
                f1: report.f1,
                ece_classwise: report.ece_classwise,
                ece_standard: report.ece_standard,
            })
        };
        let record = EpochRecord {
            epoch,
            base_loss: base_sum / steps_per_epoch as f64,
            aux_loss: aux_sum / steps_per_epoch as f64,
            total_loss: total_sum / steps_per_epoch as f64,
            u_theta,
            aux_active,
            dev,
        };
        observer.on_epoch(&model, &record);
        records.push(record);
    }

    let test = if test_ds.is_empty() {
        None
    } else {
        Some(evaluate(&model, &test_ds, cfg.eval_bins, None)?)
    };
    let record = RunRecord {
        config: cfg.clone(),
        epochs: records,
        test,
        wall_clock_secs: Some(started.elapsed().as_secs_f64()),
    };
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClassPrior;
    use crate::model::checkpoint_to_string;

    fn synth_data(k: usize, n: usize, noise: f64, seed: u64) -> DataConfig {
        DataConfig::Synth {
            spec: SynthSpec { k, n, noise, seed, prior: ClassPrior::Uniform },
            split: SplitSpec { train: 0.7, dev: 0.15, test: 0.15, seed },
            train_label_noise: 0.0,
            noise_seed: 0,
        }
    }

    fn small_cfg(k: usize, n: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(synth_data(k, n, 0.1, seed));
        cfg.model.num_buckets = 512;
        cfg.model.d_embed = 16;
        cfg.model.hidden = vec![16];
        cfg.model.d_out = 8;
        cfg.epochs = 3;
        cfg.batch_size = 16;
        cfg.seed = seed;
        cfg
    }

    #[test]
    fn u_theta_trivial_points() {
        let zeros = vec![vec![0.0; 10]];
        assert_eq!(update_u_theta(&zeros, 2), 0.0);
        let ones = vec![vec![1.0; 10]];
        assert_eq!(update_u_theta(&ones, 2), 1.0);
    }

    #[test]
    fn u_theta_matches_streaming_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let history: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..37).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let mut mean = 0.0;
        let mut seen = 0.0;
        for &u in history.iter().flatten() {
            seen += 1.0;
            mean += (u - mean) / seen;
        }
        assert!((update_u_theta(&history, 2) - mean).abs() < 1e-12);
        // A third epoch past the warm-up window must not move the value.
        let mut longer = history.clone();
        longer.push(vec![0.999; 50]);
        assert_eq!(update_u_theta(&longer, 2), update_u_theta(&history, 2));
    }

    #[test]
    fn one_epoch_separates_clean_synthetic() {
        for seed in 0..5 {
            let mut cfg = small_cfg(3, 600, seed);
            cfg.data = synth_data(3, 600, 0.0, seed);
            cfg.model.head = HeadKind::Linear;
            cfg.epochs = 1;
            cfg.batch_size = 8;
            cfg.learning_rate = 0.1;
            let (model, _) = train(&cfg).unwrap();
            let (train_ds, _, _) = prepare_data(&cfg.data).unwrap();
            let report = evaluate(&model, &train_ds, 10, None).unwrap();
            assert!(
                report.accuracy > 0.9,
                "seed {seed}: train accuracy {} after one epoch",
                report.accuracy
            );
        }
    }

    #[test]
    fn identical_seeds_reproduce_bitwise() {
        let mut cfg = small_cfg(2, 60, 4);
        cfg.loss.rau_weight = 3.0;
        cfg.u_theta_warm_epochs = 1;
        let (model_a, rec_a) = train(&cfg).unwrap();
        let (model_b, rec_b) = train(&cfg).unwrap();
        assert_eq!(model_a, model_b);
        assert_eq!(rec_a.clone().without_wall_clock(), rec_b.clone().without_wall_clock());
        let json_a = serde_json::to_string(&rec_a.without_wall_clock()).unwrap();
        let json_b = serde_json::to_string(&rec_b.without_wall_clock()).unwrap();
        assert_eq!(json_a, json_b);
    }

    struct FrameWatcher {
        frames: Vec<String>,
    }

    impl TrainObserver for FrameWatcher {
        fn on_epoch(&mut self, model: &Model, _record: &EpochRecord) {
            if let Head::Hyperspherical(h) = &model.head {
                self.frames.push(serde_json::to_string(h.frame.x()).unwrap());
            }
        }
    }

    #[test]
    fn frame_bytes_never_change_across_epochs() {
        let cfg = small_cfg(3, 90, 5);
        let mut watcher = FrameWatcher { frames: Vec::new() };
        let (model, _) = train_with_observer(&cfg, &mut watcher).unwrap();
        assert_eq!(watcher.frames.len(), 3);
        assert_eq!(watcher.frames[0], watcher.frames[2]);
        let ck = checkpoint_to_string(&model).unwrap();
        assert!(ck.contains("hyperspherical"));
    }

    struct StepLog {
        entries: Vec<(Vec<usize>, f64, f64, bool, Model)>,
    }

    impl TrainObserver for StepLog {
        fn on_step(&mut self, info: &StepInfo<'_>) {
            self.entries.push((
                info.batch_indices.to_vec(),
                info.loss,
                info.u_theta,
                info.aux_active,
                info.model.clone(),
            ));
        }
    }

    #[test]
    fn logged_losses_replay_from_pre_step_parameters() {
        let mut cfg = small_cfg(3, 60, 6);
        cfg.loss.rau_weight = 3.0;
        cfg.u_theta_warm_epochs = 1;
        cfg.epochs = 2;
        let mut log = StepLog { entries: Vec::new() };
        train_with_observer(&cfg, &mut log).unwrap();
        let (train_ds, _, _) = prepare_data(&cfg.data).unwrap();
        assert!(log.entries.iter().any(|e| e.3), "second epoch activates the auxiliary");
        for (indices, loss, u_theta, aux_active, model) in &log.entries {
            let fvs: Vec<FeatureVec> = indices
                .iter()
                .map(|&i| featurize(&train_ds.samples()[i].text, &model.featurizer))
                .collect();
            let gold: Vec<usize> = indices.iter().map(|&i| train_ds.samples()[i].label).collect();
            let fwd = model.forward(&fvs).unwrap();
            let plan = LossPlan {
                base: cfg.loss.base,
                rau_weight: if *aux_active { cfg.loss.rau_weight } else { 0.0 },
                u_theta: *u_theta,
                ..LossPlan::default()
            };
            let replayed = total_loss(&fwd.logits, &gold, &plan).unwrap();
            assert!(
                (replayed.value - loss).abs() < 1e-9,
                "replayed {} vs logged {loss}",
                replayed.value
            );
        }
    }

    #[test]
    fn u_theta_constant_after_warm_up() {
        let mut cfg = small_cfg(3, 90, 7);
        cfg.loss.rau_weight = 1.0;
        cfg.epochs = 5;
        cfg.u_theta_warm_epochs = 2;
        let (_, rec) = train(&cfg).unwrap();
        assert!(!rec.epochs[0].aux_active && !rec.epochs[1].aux_active);
        assert!(rec.epochs[2..].iter().all(|e| e.aux_active));
        let frozen = rec.epochs[1].u_theta.to_bits();
        for e in &rec.epochs[2..] {
            assert_eq!(e.u_theta.to_bits(), frozen);
        }
    }

    #[test]
    fn override_skips_warm_up() {
        let mut cfg = small_cfg(2, 40, 8);
        cfg.loss.rau_weight = 1.0;
        cfg.loss.u_theta_override = Some(0.3);
        cfg.epochs = 2;
        let (_, rec) = train(&cfg).unwrap();
        assert!(rec.epochs.iter().all(|e| e.aux_active && e.u_theta == 0.3));
    }

    #[test]
    fn memorizing_run_is_accurate_and_calibrated_on_train() {
        let mut cfg = small_cfg(3, 150, 9);
        cfg.data = synth_data(3, 150, 0.0, 9);
        cfg.epochs = 12;
        let (model, _) = train(&cfg).unwrap();
        let (train_ds, _, _) = prepare_data(&cfg.data).unwrap();
        let a = evaluate(&model, &train_ds, 10, None).unwrap();
        let b = evaluate(&model, &train_ds, 10, None).unwrap();
        assert!(a.accuracy > 0.95, "train accuracy {}", a.accuracy);
        assert!(a.ece_standard < 0.2, "train ece {}", a.ece_standard);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn evaluate_rejects_unknown_labels() {
        let cfg = small_cfg(2, 40, 10);
        let (model, _) = train(&cfg).unwrap();
        let alien = Dataset::new(
            vec![Sample { text: "zz".into(), label: 0 }],
            vec!["zz-label".into()],
        )
        .unwrap();
        assert!(matches!(evaluate(&model, &alien, 10, None), Err(Error::Data(_))));
        let empty = Dataset::new(vec![], vec!["c0".into(), "c1".into()]).unwrap();
        assert!(matches!(evaluate(&model, &empty, 10, None), Err(Error::Data(_))));
    }

    #[test]
    fn invalid_configs_fail_before_training() {
        let mut cfg = small_cfg(2, 40, 11);
        cfg.learning_rate = 0.0;
        assert!(matches!(train(&cfg), Err(Error::Config(_))));

        let mut cfg = small_cfg(2, 40, 11);
        cfg.loss.rau_weight = 1.0;
        cfg.loss.avuc_weight = 1.0;
        assert!(matches!(train(&cfg), Err(Error::Config(_))));

        let mut cfg = small_cfg(2, 40, 11);
        cfg.model.frame_h = Some(5);
        assert!(matches!(train(&cfg), Err(Error::Config(_))));

        let mut cfg = small_cfg(2, 40, 11);
        cfg.version = 99;
        assert!(matches!(train(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn half_noise_binary_accuracy_sits_between_chance_and_perfect() {
        for seed in 0..5 {
            let mut cfg = small_cfg(2, 600, seed);
            cfg.data = synth_data(2, 600, 0.5, seed);
            cfg.epochs = 2;
            let (_, rec) = train(&cfg).unwrap();
            let acc = rec.test.expect("test split present").accuracy;
            assert!(
                acc > 0.5 && acc < 1.0,
                "seed {seed}: held-out accuracy {acc} outside (0.5, 1)"
            );
        }
    }

    #[test]
    fn config_json_round_trip_and_unknown_field_rejection() {
        let cfg = small_cfg(4, 100, 12);
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);

        let minimal = r#"{
            "data": {
                "source": "synth",
                "spec": {"k": 2, "n": 10, "noise": 0.0, "seed": 0},
                "split": {"train": 0.8, "dev": 0.1, "test": 0.1, "seed": 0}
            }
        }"#;
        let parsed: TrainConfig = serde_json::from_str(minimal).unwrap();
        assert_eq!(parsed.epochs, 30);
        assert_eq!(parsed.batch_size, 64);
        assert!((parsed.learning_rate - 0.05).abs() < 1e-15);
        assert_eq!(parsed.u_theta_warm_epochs, 2);
        assert_eq!(parsed.model.head, HeadKind::Hyperspherical);

        let typo = r#"{"data": {"source": "synth",
            "spec": {"k": 2, "n": 10, "noise": 0.0, "seed": 0},
            "split": {"train": 0.8, "dev": 0.1, "test": 0.1, "seed": 0}},
            "epocs": 5}"#;
        assert!(serde_json::from_str::<TrainConfig>(typo).is_err());
    }

    #[test]
    fn jsonl_files_align_by_label_name() {
        let dir = tempfile::tempdir().unwrap();
        let train_p = dir.path().join("train.jsonl");
        let dev_p = dir.path().join("dev.jsonl");
        let test_p = dir.path().join("test.jsonl");
        std::fs::write(
            &train_p,
            "{\"text\":\"aa\",\"label\":\"x\"}\n{\"text\":\"bb\",\"label\":\"y\"}\n",
        )
        .unwrap();
        // Dev lists labels in the opposite first-occurrence order.
        std::fs::write(
            &dev_p,
            "{\"text\":\"cc\",\"label\":\"y\"}\n{\"text\":\"dd\",\"label\":\"x\"}\n",
        )
        .unwrap();
        std::fs::write(&test_p, "{\"text\":\"ee\",\"label\":\"y\"}\n").unwrap();
        let cfg = DataConfig::JsonlFiles {
            train: train_p.to_string_lossy().into_owned(),
            dev: dev_p.to_string_lossy().into_owned(),
            test: test_p.to_string_lossy().into_owned(),
        };
        let (train, dev, test) = prepare_data(&cfg).unwrap();
        assert_eq!(train.vocab(), dev.vocab());
        assert_eq!(dev.labels(), vec![1, 0]);
        assert_eq!(test.labels(), vec![1]);

        std::fs::write(&test_p, "{\"text\":\"ee\",\"label\":\"zz\"}\n").unwrap();
        let cfg_bad = DataConfig::JsonlFiles {
            train: train_p.to_string_lossy().into_owned(),
            dev: dev_p.to_string_lossy().into_owned(),
            test: test_p.to_string_lossy().into_owned(),
        };
        assert!(matches!(prepare_data(&cfg_bad), Err(Error::Data(_))));
    }
}
