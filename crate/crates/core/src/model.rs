//! Desk-scale text classifier: hashed character n-gram features, a small
//! MLP encoder, and two interchangeable output heads. The hyperspherical
//! head decodes against a frozen label frame; the plain linear softmax
//! head serves as the baseline.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix};
use crate::sphere::FrameMatrix;
use crate::Real;

type Mat = Matrix<Real>;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// 64-bit FNV-1a over raw bytes. Fixed constants keep bucket assignment
/// identical on every platform.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hashed character n-gram featurizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub num_buckets: usize,
    pub lowercase: bool,
}

impl Featurizer {
    /// Validates 1 ≤ ngram_min ≤ ngram_max ≤ 5 and num_buckets a power of
    /// two no smaller than 256.
    pub fn new(ngram_min: usize, ngram_max: usize, num_buckets: usize, lowercase: bool) -> Result<Self> {
        if !(1..=5).contains(&ngram_min) || !(1..=5).contains(&ngram_max) || ngram_min > ngram_max {
            return Err(Error::config(format!(
                "n-gram range {ngram_min}..={ngram_max} outside 1..=5"
            )));
        }
        if num_buckets < 256 || !num_buckets.is_power_of_two() {
            return Err(Error::config(format!(
                "num_buckets {num_buckets} must be a power of two >= 256"
            )));
        }
        Ok(Featurizer { ngram_min, ngram_max, num_buckets, lowercase })
    }

    fn validate(&self) -> Result<()> {
        Self::new(self.ngram_min, self.ngram_max, self.num_buckets, self.lowercase).map(|_| ())
    }
}

/// Sparse bucket counts, sorted by bucket id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVec {
    pub counts: Vec<(usize, Real)>,
}

impl FeatureVec {
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> Real {
        self.counts.iter().map(|&(_, c)| c).sum()
    }
}

/// Hashes every character n-gram in the configured range into a bucket
/// count vector. Empty text yields an empty vector.
pub fn featurize(text: &str, f: &Featurizer) -> FeatureVec {
    let lowered;
    let text = if f.lowercase {
        lowered = text.to_lowercase();
        &lowered
    } else {
        text
    };
    let chars: Vec<char> = text.chars().collect();
    let mask = (f.num_buckets - 1) as u64;
    let mut acc: BTreeMap<usize, Real> = BTreeMap::new();
    for n in f.ngram_min..=f.ngram_max {
        if chars.len() < n {
            break;
        }
        for window in chars.windows(n) {
            let mut h = FNV_OFFSET;
            let mut buf = [0u8; 4];
            for &c in window {
                for &b in c.encode_utf8(&mut buf).as_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(FNV_PRIME);
                }
            }
            *acc.entry((h & mask) as usize).or_insert(0.0) += 1.0;
        }
    }
    FeatureVec { counts: acc.into_iter().collect() }
}

/// Layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// One dense layer: weight is input_dim × output_dim, bias has output_dim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Vec<Real>,
    pub activation: Activation,
}

/// Embedding table plus dense layers. Hidden layers use tanh; the final
/// layer is linear and its width is the encoder output dimension H.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub embed: Mat,
    pub layers: Vec<Layer>,
}

fn init_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized by construction")
}

impl EncoderParams {
    /// Uniform ±1/√fan_in init; biases zero. `dims` chains hidden widths and
    /// ends with the output dimension H, so it must be nonempty. Draw order
    /// is fixed: embedding row-major, then each layer's weight row-major.
    pub fn init(rng: &mut ChaCha8Rng, num_buckets: usize, d_embed: usize, dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::config("encoder needs at least one layer".to_string()));
        }
        if d_embed == 0 || dims.contains(&0) {
            return Err(Error::config("encoder dimensions must be positive".to_string()));
        }
        let embed = init_uniform(rng, num_buckets, d_embed, d_embed);
        let mut layers = Vec::with_capacity(dims.len());
        let mut fan_in = d_embed;
        for (idx, &out) in dims.iter().enumerate() {
            let weight = init_uniform(rng, fan_in, out, fan_in);
            let activation = if idx + 1 == dims.len() { Activation::Identity } else { Activation::Tanh };
            layers.push(Layer { weight, bias: vec![0.0; out], activation });
            fan_in = out;
        }
        Ok(EncoderParams { embed, layers })
    }

    pub fn d_embed(&self) -> usize {
        self.embed.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.d_embed(), |l| l.weight.cols())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("encoder needs at least one layer".to_string()));
        }
        let mut dim = self.d_embed();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weight.rows() != dim {
                return Err(Error::shape(format!(
                    "layer {i} expects input {}, got {dim}",
                    layer.weight.rows()
                )));
            }
            if layer.bias.len() != layer.weight.cols() {
                return Err(Error::shape(format!(
                    "layer {i} bias length {} vs width {}",
                    layer.bias.len(),
                    layer.weight.cols()
                )));
            }
            dim = layer.weight.cols();
        }
        Ok(())
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EncodeTrace {
    /// N × d_embed embedding sums feeding the first layer.
    pub summed: Mat,
    /// Post-activation output of each layer; the last entry is E.
    pub posts: Vec<Mat>,
}

fn embed_sum(batch: &[FeatureVec], p: &EncoderParams) -> Result<Mat> {
    let d = p.d_embed();
    let mut summed = Matrix::zeros(batch.len(), d);
    for (i, fv) in batch.iter().enumerate() {
        for &(bucket, count) in &fv.counts {
            if bucket >= p.embed.rows() {
                return Err(Error::shape(format!(
                    "feature bucket {bucket} outside embedding with {} rows",
                    p.embed.rows()
                )));
            }
            let row = p.embed.row(bucket).to_vec();
            let out = summed.row_mut(i);
            for (o, &e) in out.iter_mut().zip(&row) {
                *o += count * e;
            }
        }
    }
    Ok(summed)
}

fn layer_forward(input: &Mat, layer: &Layer) -> Result<Mat> {
    let mut out = matmul(input, &layer.weight)?;
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (v, &b) in row.iter_mut().zip(&layer.bias) {
            *v += b;
        }
        if layer.activation == Activation::Tanh {
            for v in row.iter_mut() {
                *v = v.tanh();
            }
        }
    }
    Ok(out)
}

/// Forward pass returning all intermediates.
pub fn encode_with_trace(batch: &[FeatureVec], p: &EncoderParams) -> Result<EncodeTrace> {
    p.validate()?;
    let summed = embed_sum(batch, p)?;
    let mut posts = Vec::with_capacity(p.layers.len());
    let mut current = summed.clone();
    for layer in &p.layers {
        current = layer_forward(&current, layer)?;
        posts.push(current.clone());
    }
    Ok(EncodeTrace { summed, posts })
}

/// Encoded batch E (N × H): embedding lookup-and-sum, then the MLP.
pub fn encode(batch: &[FeatureVec], p: &EncoderParams) -> Result<Mat> {
    let trace = encode_with_trace(batch, p)?;
    Ok(trace.posts.last().cloned().unwrap_or(trace.summed))
}

/// Parameter gradients for one dense layer.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub weight: Mat,
    pub bias: Vec<Real>,
}

/// Encoder parameter gradients.
#[derive(Clone, Debug)]
pub struct EncoderGrads {
    pub embed: Mat,
    pub layers: Vec<LayerGrads>,
}

/// Backpropagates `grad_output` (N × H) through the encoder, returning
/// parameter gradients. tanh derivatives come from the stored posts.
pub fn encode_backward(
    batch: &[FeatureVec],
    p: &EncoderParams,
    trace: &EncodeTrace,
    grad_output: &Mat,
) -> Result<EncoderGrads> {
    let mut layer_grads: Vec<LayerGrads> = Vec::with_capacity(p.layers.len());
    let mut g = grad_output.clone();
    for (l, layer) in p.layers.iter().enumerate().rev() {
        let post = &trace.posts[l];
        if g.rows() != post.rows() || g.cols() != post.cols() {
            return Err(Error::shape(format!(
                "gradient {}x{} vs layer {l} output {}x{}",
                g.rows(),
                g.cols(),
                post.rows(),
                post.cols()
            )));
        }
        let mut dpre = g;
        if layer.activation == Activation::Tanh {
            for i in 0..dpre.rows() {
                let post_row = post.row(i).to_vec();
                let row = dpre.row_mut(i);
                for (v, &t) in row.iter_mut().zip(&post_row) {
                    *v *= 1.0 - t * t;
                }
            }
        }
        let input = if l == 0 { &trace.summed } else { &trace.posts[l - 1] };
        let weight = matmul(&input.transpose(), &dpre)?;
        let mut bias = vec![0.0; layer.weight.cols()];
        for i in 0..dpre.rows() {
            for (b, &v) in bias.iter_mut().zip(dpre.row(i)) {
                *b += v;
            }
        }
        g = matmul(&dpre, &layer.weight.transpose())?;
        layer_grads.push(LayerGrads { weight, bias });
    }
    layer_grads.reverse();

    let mut embed = Matrix::zeros(p.embed.rows(), p.embed.cols());
    for (i, fv) in batch.iter().enumerate() {
        let g_row = g.row(i).to_vec();
        for &(bucket, count) in &fv.counts {
            let target = embed.row_mut(bucket);
            for (t, &v) in target.iter_mut().zip(&g_row) {
                *t += count * v;
            }
        }
    }
    Ok(EncoderGrads { embed, layers: layer_grads })
}

/// Logit scale for the hyperspherical head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Frobenius norm of the frame; √K for unit-row frames.
    Frobenius,
    Fixed(f64),
}

/// Decodes encodings against a frozen unit-row label frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypersphericalHead {
    pub frame: FrameMatrix<Real>,
    pub scale_mode: ScaleMode,
}

impl HypersphericalHead {
    pub fn scale(&self) -> Real {
        match self.scale_mode {
            ScaleMode::Frobenius => self.frame.x().frobenius_norm(),
            ScaleMode::Fixed(s) => s,
        }
    }
}

/// Logits = scale × E·Xᵀ.
pub fn decode_hyperspherical(e: &Mat, head: &HypersphericalHead) -> Result<Mat> {
    if e.cols() != head.frame.h() {
        return Err(Error::shape(format!(
            "encodings have {} dims, frame expects {}",
            e.cols(),
            head.frame.h()
        )));
    }
    let mut logits = matmul(e, &head.frame.x().transpose())?;
    logits.scale(head.scale());
    Ok(logits)
}

/// Plain affine head: logits = E·W + b.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weight: Mat,
    pub bias: Vec<Real>,
}

impl LinearHead {
    pub fn init(rng: &mut ChaCha8Rng, h: usize, k: usize) -> Self {
        LinearHead {
            weight: init_uniform(rng, h, k, h),
            bias: vec![0.0; k],
        }
    }
}

pub fn decode_linear(e: &Mat, head: &LinearHead) -> Result<Mat> {
    if head.bias.len() != head.weight.cols() {
        return Err(Error::shape(format!(
            "bias length {} vs weight width {}",
            head.bias.len(),
            head.weight.cols()
        )));
    }
    let mut logits = matmul(e, &head.weight)?;
    for i in 0..logits.rows() {
        let row = logits.row_mut(i);
        for (v, &b) in row.iter_mut().zip(&head.bias) {
            *v += b;
        }
    }
    Ok(logits)
}

/// Output head selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Head {
    Hyperspherical(HypersphericalHead),
    Linear(LinearHead),
}

impl Head {
    pub fn k(&self) -> usize {
        match self {
            Head::Hyperspherical(h) => h.frame.k(),
            Head::Linear(h) => h.weight.cols(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Head::Hyperspherical(h) => h.frame.h(),
            Head::Linear(h) => h.weight.rows(),
        }
    }

    pub fn decode(&self, e: &Mat) -> Result<Mat> {
        match self {
            Head::Hyperspherical(h) => decode_hyperspherical(e, h),
            Head::Linear(h) => decode_linear(e, h),
        }
    }
}

/// Head parameter gradients. The hyperspherical head has none: its frame
/// is frozen and the scale is a constant of the frame.
#[derive(Clone, Debug)]
pub enum HeadGrads {
    Hyperspherical,
    Linear { weight: Mat, bias: Vec<Real> },
}

/// All parameter gradients for one backward pass.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub head: HeadGrads,
}

/// The full classifier plus its label vocabulary; labels[i] names class i.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub featurizer: Featurizer,
    pub encoder: EncoderParams,
    pub head: Head,
    pub labels: Vec<String>,
}

/// Forward pass outputs kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ModelForward {
    pub logits: Mat,
    trace: EncodeTrace,
}

impl ModelForward {
    pub fn encoded(&self) -> &Mat {
        self.trace.posts.last().expect("encoder has layers")
    }
}

impl Model {
    pub fn k(&self) -> usize {
        self.head.k()
    }

    pub fn validate(&self) -> Result<()> {
        self.featurizer.validate()?;
        self.encoder.validate()?;
        if self.encoder.embed.rows() != self.featurizer.num_buckets {
            return Err(Error::shape(format!(
                "embedding rows {} vs {} buckets",
                self.encoder.embed.rows(),
                self.featurizer.num_buckets
            )));
        }
        if self.head.input_dim() != self.encoder.output_dim() {
            return Err(Error::shape(format!(
                "head expects {} dims, encoder outputs {}",
                self.head.input_dim(),
                self.encoder.output_dim()
            )));
        }
        if self.labels.len() != self.head.k() {
            return Err(Error::config(format!(
                "{} label names for {} classes",
                self.labels.len(),
                self.head.k()
            )));
        }
        Ok(())
    }

    pub fn featurize_texts(&self, texts: &[String]) -> Vec<FeatureVec> {
        texts.iter().map(|t| featurize(t, &self.featurizer)).collect()
    }

    pub fn forward(&self, batch: &[FeatureVec]) -> Result<ModelForward> {
        let trace = encode_with_trace(batch, &self.encoder)?;
        let encoded = trace.posts.last().cloned().unwrap_or_else(|| trace.summed.clone());
        let logits = self.head.decode(&encoded)?;
        Ok(ModelForward { logits, trace })
    }

    /// Backward from `grad_logits` through the head and encoder.
    pub fn backward(
        &self,
        batch: &[FeatureVec],
        fwd: &ModelForward,
        grad_logits: &Mat,
    ) -> Result<ModelGrads> {
        let encoded = fwd.encoded();
        let (grad_e, head) = match &self.head {
            Head::Hyperspherical(h) => {
                let mut grad_e = matmul(grad_logits, h.frame.x())?;
                grad_e.scale(h.scale());
                (grad_e, HeadGrads::Hyperspherical)
            }
            Head::Linear(h) => {
                let grad_e = matmul(grad_logits, &h.weight.transpose())?;
                let weight = matmul(&encoded.transpose(), grad_logits)?;
                let mut bias = vec![0.0; h.bias.len()];
                for i in 0..grad_logits.rows() {
                    for (b, &v) in bias.iter_mut().zip(grad_logits.row(i)) {
                        *b += v;
                    }
                }
                (grad_e, HeadGrads::Linear { weight, bias })
            }
        };
        let encoder = encode_backward(batch, &self.encoder, &fwd.trace, &grad_e)?;
        Ok(ModelGrads { encoder, head })
    }
}

const CHECKPOINT_FORMAT: &str = "textcal-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    model: Model,
}

/// Serializes the model as a versioned JSON checkpoint.
pub fn checkpoint_to_string(model: &Model) -> Result<String> {
    let doc = CheckpointDoc {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        model: model.clone(),
    };
    Ok(serde_json::to_string(&doc)?)
}

/// Parses and validates a checkpoint produced by `checkpoint_to_string`.
pub fn checkpoint_from_str(text: &str) -> Result<Model> {
    let doc: CheckpointDoc = serde_json::from_str(text)?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(Error::data(format!("unknown checkpoint format {:?}", doc.format)));
    }
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            doc.version
        )));
    }
    doc.model.validate()?;
    Ok(doc.model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
