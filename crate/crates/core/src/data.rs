//! Corpus handling: JSONL ingestion with a first-occurrence label
//! vocabulary, deterministic train/dev/test splits, label-noise injection,
//! and a synthetic keyword-pool generator for controlled experiments.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled text sample; `label` indexes the dataset vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Sample {
    pub text: String,
    pub label: usize,
}

/// Immutable labeled corpus with an ordered label vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    vocab: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, vocab: Vec<String>) -> Result<Self> {
        for (i, name) in vocab.iter().enumerate() {
            if vocab[..i].contains(name) {
                return Err(Error::data(format!("duplicate label name {name:?}")));
            }
        }
        for (i, s) in samples.iter().enumerate() {
            if s.label >= vocab.len() {
                return Err(Error::data(format!(
                    "sample {i} has label id {} outside vocabulary of {}",
                    s.label,
                    vocab.len()
                )));
            }
        }
        Ok(Dataset { samples, vocab })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn k(&self) -> usize {
        self.vocab.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn texts(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.text.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Samples per label id.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.vocab.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

#[derive(Serialize, Deserialize)]
struct RawSample {
    text: String,
    label: String,
}

/// Parses a JSONL corpus: one {"text", "label"} object per line. The label
/// vocabulary is built in first-occurrence order; blank lines are skipped;
/// anything else malformed is rejected with its line number.
pub fn parse_jsonl(content: &str) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut vocab: Vec<String> = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let label = match vocab.iter().position(|v| v == &raw.label) {
            Some(id) => id,
            None => {
                vocab.push(raw.label);
                vocab.len() - 1
            }
        };
        samples.push(Sample { text: raw.text, label });
    }
    Dataset::new(samples, vocab)
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

/// Renders the dataset back to JSONL; reloading reproduces the samples and
/// the vocabulary order exactly (for vocabularies built by `parse_jsonl`).
pub fn jsonl_string(ds: &Dataset) -> Result<String> {
    let mut out = String::new();
    for s in ds.samples() {
        let raw = RawSample {
            text: s.text.clone(),
            label: ds.vocab()[s.label].clone(),
        };
        out.push_str(&serde_json::to_string(&raw)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, jsonl_string(ds)?)?;
    Ok(())
}

/// Train/dev/test fractions plus the shuffle seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, dev: f64, test: f64, seed: u64) -> Result<Self> {
        if train < 0.0 || dev < 0.0 || test < 0.0 {
            return Err(Error::config("split fractions must be nonnegative".to_string()));
        }
        if (train + dev + test - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions sum to {}, expected 1",
                train + dev + test
            )));
        }
        Ok(SplitSpec { train, dev, test, seed })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.train, self.dev, self.test, self.seed).map(|_| ())
    }
}

fn subset(ds: &Dataset, indices: &[usize]) -> Dataset {
    Dataset {
        samples: indices.iter().map(|&i| ds.samples[i].clone()).collect(),
        vocab: ds.vocab.clone(),
    }
}

/// Shuffles by seed, then cuts contiguously. Dev and test sizes are the
/// floors of their fractions; the remainder goes to train. All three parts
/// share the parent vocabulary.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let n = ds.len();
    let n_dev = (spec.dev * n as f64).floor() as usize;
    let n_test = (spec.test * n as f64).floor() as usize;
    let n_train = n - n_dev - n_test;
    if n >= 3 {
        for (frac, size, name) in [
            (spec.train, n_train, "train"),
            (spec.dev, n_dev, "dev"),
            (spec.test, n_test, "test"),
        ] {
            if frac > 0.0 && size == 0 {
                return Err(Error::config(format!(
                    "{name} split is empty at fraction {frac} with {n} samples"
                )));
            }
        }
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let train = subset(ds, &indices[..n_train]);
    let dev = subset(ds, &indices[n_train..n_train + n_dev]);
    let test = subset(ds, &indices[n_train + n_dev..]);
    Ok((train, dev, test))
}

/// Relabels exactly round(fraction·N) samples, chosen uniformly without
/// replacement, each to a uniform draw over the other K−1 labels.
pub fn inject_noise(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("noise fraction {fraction} outside [0, 1]")));
    }
    let k = ds.k();
    if fraction > 0.0 && k < 2 {
        return Err(Error::config("label noise needs at least 2 labels".to_string()));
    }
    let n = ds.len();
    let count = (fraction * n as f64).round() as usize;
    let mut out = ds.clone();
    if count == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: the first `count` entries are a uniform sample
    // without replacement.
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    for &idx in &indices[..count] {
        let old = out.samples[idx].label;
        let draw = rng.gen_range(0..k - 1);
        out.samples[idx].label = if draw >= old { draw + 1 } else { draw };
    }
    Ok(out)
}

/// Class frequency shape for synthetic corpora.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassPrior {
    #[default]
    Uniform,
    /// Class c gets weight ratio^c: a long tail of low-frequency labels.
    Geometric { ratio: f64 },
}

/// Synthetic corpus recipe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub k: usize,
    pub n: usize,
    /// Per-word probability of drawing from the union of all class pools
    /// instead of the sample's own class pool.
    pub noise: f64,
    pub seed: u64,
    #[serde(default)]
    pub prior: ClassPrior,
}

const SYLLABLES: [&str; 12] = [
    "ba", "re", "mo", "ki", "ta", "lu", "ve", "so", "ni", "pa", "du", "zo",
];
const WORDS_PER_CLASS: usize = 8;

/// Word t of class c: three syllables indexed by the base-12 digits of the
/// global word index, so all class pools are disjoint.
fn synth_word(class: usize, t: usize) -> String {
    let idx = class * WORDS_PER_CLASS + t;
    debug_assert!(idx < SYLLABLES.len().pow(3));
    let x = idx % 12;
    let y = (idx / 12) % 12;
    let z = (idx / 144) % 12;
    format!("{}{}{}", SYLLABLES[x], SYLLABLES[y], SYLLABLES[z])
}

/// Integer class counts from the prior: largest-remainder rounding with a
/// floor of one sample per class; any excess from the floor comes off the
/// biggest classes (highest id first on ties).
fn class_counts(n: usize, k: usize, prior: ClassPrior) -> Vec<usize> {
    let weights: Vec<f64> = match prior {
        ClassPrior::Uniform => vec![1.0; k],
        ClassPrior::Geometric { ratio } => (0..k).map(|c| ratio.powi(c as i32)).collect(),
    };
    let total: f64 = weights.iter().sum();
    let targets: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| (t.floor() as usize).max(1)).collect();
    let mut assigned: usize = counts.iter().sum();
    if assigned < n {
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            let ra = targets[a] - targets[a].floor();
            let rb = targets[b] - targets[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut i = 0;
        while assigned < n {
            counts[order[i % k]] += 1;
            assigned += 1;
            i += 1;
        }
    }
    while assigned > n {
        let c = (0..k)
            .max_by_key(|&c| (counts[c], c))
            .expect("k >= 1");
        debug_assert!(counts[c] > 1);
        counts[c] -= 1;
        assigned -= 1;
    }
    counts
}

/// Generates a synthetic corpus: each sample is 4 to 8 keywords, drawn
/// from its class pool except for contamination draws taken uniformly
/// from the union of all pools. Labels are named "c0".."c{k−1}"; samples
/// are emitted grouped by class.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.k < 2 {
        return Err(Error::config(format!("synthetic corpus needs k >= 2, got {}", spec.k)));
    }
    if spec.n < spec.k {
        return Err(Error::config(format!(
            "synthetic corpus needs n >= k, got n = {} for k = {}",
            spec.n, spec.k
        )));
    }
    if !(0.0..=1.0).contains(&spec.noise) {
        return Err(Error::config(format!("noise {} outside [0, 1]", spec.noise)));
    }
    if spec.k * WORDS_PER_CLASS > SYLLABLES.len().pow(3) {
        return Err(Error::config(format!("k = {} exceeds the word inventory", spec.k)));
    }
    let pools: Vec<Vec<String>> = (0..spec.k)
        .map(|c| (0..WORDS_PER_CLASS).map(|t| synth_word(c, t)).collect())
        .collect();
    let all_words: Vec<&String> = pools.iter().flatten().collect();
    let counts = class_counts(spec.n, spec.k, spec.prior);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.n);
    for (c, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let words = rng.gen_range(4..=8);
            let mut text = String::new();
            for w in 0..words {
                if w > 0 {
                    text.push(' ');
                }
                let contaminated = spec.noise > 0.0 && rng.gen_bool(spec.noise);
                if contaminated {
                    text.push_str(all_words[rng.gen_range(0..all_words.len())]);
                } else {
                    text.push_str(&pools[c][rng.gen_range(0..WORDS_PER_CLASS)]);
                }
            }
            samples.push(Sample { text, label: c });
        }
    }
    let vocab = (0..spec.k).map(|c| format!("c{c}")).collect();
    Dataset::new(samples, vocab)
}

/// Uniform-prior synthetic corpus.
pub fn synth_gaussian_text(k: usize, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    synth_dataset(&SynthSpec { k, n, noise, seed, prior: ClassPrior::Uniform })
}
