//! Calibration and classification metrics: reliability bins, classwise and
//! standard expected calibration error, macro precision/recall/F1, a
//! low-frequency-label breakdown, and post-hoc temperature scaling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ProbBatch;
use crate::numerics::{Matrix, Scalar};

/// Default reliability bin count.
pub const DEFAULT_BINS: usize = 10;

/// Maps a confidence in [0, 1] to a 0-based bin index under the 1-based
/// rule ⌈conf·m⌉ with right-inclusive boundaries; conf = 0 lands in the
/// first bin.
pub fn bin_index(conf: f64, m: usize) -> usize {
    debug_assert!(m >= 1);
    let b = (conf * m as f64).ceil() as usize;
    b.clamp(1, m) - 1
}

/// How samples are grouped into per-label reliability cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinGrouping {
    /// Group under the predicted label: confidence attaches to the
    /// prediction. This is the default.
    Predicted,
    /// Group under the gold label, kept for comparison runs.
    Gold,
}

/// One (label, bin) reliability cell with finalized statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinCell<F> {
    pub count: usize,
    pub accuracy: F,
    pub avg_confidence: F,
}

impl<F: Scalar> Default for BinCell<F> {
    fn default() -> Self {
        BinCell { count: 0, accuracy: F::zero(), avg_confidence: F::zero() }
    }
}

/// Per-label reliability histogram over M confidence bins.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReliabilityBins<F> {
    m: usize,
    k: usize,
    n: usize,
    cells: Vec<BinCell<F>>,
}

impl<F: Scalar> ReliabilityBins<F> {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cell(&self, label: usize, bin: usize) -> &BinCell<F> {
        &self.cells[label * self.m + bin]
    }

    /// Total samples across all cells; equals n().
    pub fn total_count(&self) -> usize {
        self.cells.iter().map(|c| c.count).sum()
    }
}

fn build_bins<F: Scalar>(
    m: usize,
    k: usize,
    assignments: impl Iterator<Item = (usize, f64, bool)>,
) -> ReliabilityBins<F> {
    let mut count = vec![0usize; k * m];
    let mut hit = vec![0usize; k * m];
    let mut conf_sum = vec![0.0f64; k * m];
    let mut n = 0;
    for (label, conf, correct) in assignments {
        let idx = label * m + bin_index(conf, m);
        count[idx] += 1;
        conf_sum[idx] += conf;
        if correct {
            hit[idx] += 1;
        }
        n += 1;
    }
    let cells = (0..k * m)
        .map(|idx| {
            if count[idx] == 0 {
                BinCell::default()
            } else {
                BinCell {
                    count: count[idx],
                    accuracy: F::cast(hit[idx] as f64 / count[idx] as f64),
                    avg_confidence: F::cast(conf_sum[idx] / count[idx] as f64),
                }
            }
        })
        .collect();
    ReliabilityBins { m, k, n, cells }
}

/// Bins each sample by its confidence (max probability) under the chosen
/// grouping label. Every sample lands in exactly one cell.
pub fn bin_predictions_grouped<F: Scalar>(
    batch: &ProbBatch<F>,
    m: usize,
    grouping: BinGrouping,
) -> ReliabilityBins<F> {
    assert!(m >= 1, "need at least one bin");
    let k = batch.k();
    build_bins(m, k, (0..batch.len()).map(|i| {
        let pred = batch.pred()[i];
        let gold = batch.gold()[i];
        let conf = batch.probs()[(i, pred)].to_f64().expect("prob fits f64");
        let label = match grouping {
            BinGrouping::Predicted => pred,
            BinGrouping::Gold => gold,
        };
        (label, conf, pred == gold)
    }))
}

/// Predicted-label grouping, the default reliability histogram.
pub fn bin_predictions<F: Scalar>(batch: &ProbBatch<F>, m: usize) -> ReliabilityBins<F> {
    bin_predictions_grouped(batch, m, BinGrouping::Predicted)
}

/// Classwise expected calibration error:
/// (1/K) Σᵢ Σⱼ (|Bᵢⱼ|/N)·|Accᵢⱼ − Conᵢⱼ|.
pub fn ece_classwise<F: Scalar>(bins: &ReliabilityBins<F>, n: usize, k: usize) -> F {
    assert_eq!(bins.n, n, "bin population does not match n");
    assert_eq!(bins.k, k, "bin labels do not match k");
    if n == 0 {
        return F::zero();
    }
    let inv_n = F::one() / F::cast(n as f64);
    let mut total = F::zero();
    for cell in &bins.cells {
        if cell.count > 0 {
            let weight = F::cast(cell.count as f64) * inv_n;
            total += weight * (cell.accuracy - cell.avg_confidence).abs();
        }
    }
    total / F::cast(k as f64)
}

/// Standard expected calibration error over confidence bins only:
/// Σⱼ (|Bⱼ|/N)·|Accⱼ − Conⱼ|.
pub fn ece_standard<F: Scalar>(batch: &ProbBatch<F>, m: usize) -> F {
    assert!(m >= 1, "need at least one bin");
    if batch.is_empty() {
        return F::zero();
    }
    let bins = build_bins::<F>(m, 1, (0..batch.len()).map(|i| {
        let pred = batch.pred()[i];
        let conf = batch.probs()[(i, pred)].to_f64().expect("prob fits f64");
        (0, conf, pred == batch.gold()[i])
    }));
    ece_classwise(&bins, batch.len(), 1)
}

/// Per-label precision/recall/F1.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMetrics<F> {
    pub label: usize,
    pub precision: F,
    pub recall: F,
    pub f1: F,
}

/// Accuracy plus macro-averaged precision, recall, and F1.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationMetrics<F> {
    pub accuracy: F,
    pub precision: F,
    pub recall: F,
    pub f1: F,
    pub per_label: Vec<LabelMetrics<F>>,
}

/// Confusion-matrix metrics; labels absent from both gold and predictions
/// score zero and still count in the macro average.
pub fn classification_report<F: Scalar>(batch: &ProbBatch<F>, k: usize) -> ClassificationMetrics<F> {
    assert_eq!(k, batch.k(), "k does not match batch");
    let n = batch.len();
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fnn = vec![0usize; k];
    let mut correct = 0usize;
    for i in 0..n {
        let (g, p) = (batch.gold()[i], batch.pred()[i]);
        if g == p {
            tp[g] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fnn[g] += 1;
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            F::zero()
        } else {
            F::cast(num as f64 / den as f64)
        }
    };
    let per_label: Vec<LabelMetrics<F>> = (0..k)
        .map(|c| {
            let precision = ratio(tp[c], tp[c] + fp[c]);
            let recall = ratio(tp[c], tp[c] + fnn[c]);
            let f1 = if precision + recall > F::zero() {
                F::cast(2.0) * precision * recall / (precision + recall)
            } else {
                F::zero()
            };
            LabelMetrics { label: c, precision, recall, f1 }
        })
        .collect();
    let inv_k = F::one() / F::cast(k as f64);
    let mut macro_p = F::zero();
    let mut macro_r = F::zero();
    let mut macro_f1 = F::zero();
    for lm in &per_label {
        macro_p += lm.precision;
        macro_r += lm.recall;
        macro_f1 += lm.f1;
    }
    ClassificationMetrics {
        accuracy: ratio(correct, n),
        precision: macro_p * inv_k,
        recall: macro_r * inv_k,
        f1: macro_f1 * inv_k,
        per_label,
    }
}

/// Per-label share of the classwise ECE: Σⱼ (|Bᵢⱼ|/N)·|Accᵢⱼ − Conᵢⱼ|
/// for one label i, without the 1/K prefactor.
pub fn label_ece_contribution<F: Scalar>(bins: &ReliabilityBins<F>, label: usize) -> F {
    if bins.n == 0 {
        return F::zero();
    }
    let inv_n = F::one() / F::cast(bins.n as f64);
    let mut total = F::zero();
    for bin in 0..bins.m {
        let cell = bins.cell(label, bin);
        if cell.count > 0 {
            total += F::cast(cell.count as f64) * inv_n * (cell.accuracy - cell.avg_confidence).abs();
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowFrequencyEntry<F> {
    pub label: usize,
    pub train_count: usize,
    pub f1: F,
    pub ece: F,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowFrequencyReport<F> {
    pub entries: Vec<LowFrequencyEntry<F>>,
    pub avg_f1: F,
    pub avg_ece: F,
}

/// Ranks labels by ascending training frequency (label id breaks ties) and
/// reports per-label F1 and ECE contribution for the `worst_n` rarest.
pub fn low_frequency_report<F: Scalar>(
    batch: &ProbBatch<F>,
    train_label_counts: &[usize],
    worst_n: usize,
    m: usize,
) -> LowFrequencyReport<F> {
    let k = batch.k();
    assert_eq!(train_label_counts.len(), k, "one train count per label");
    assert!(worst_n <= k, "worst_n exceeds label count");
    let metrics = classification_report(batch, k);
    let bins = bin_predictions(batch, m);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by_key(|&c| (train_label_counts[c], c));
    let entries: Vec<LowFrequencyEntry<F>> = order[..worst_n]
        .iter()
        .map(|&c| LowFrequencyEntry {
            label: c,
            train_count: train_label_counts[c],
            f1: metrics.per_label[c].f1,
            ece: label_ece_contribution(&bins, c),
        })
        .collect();
    let denom = F::cast(entries.len().max(1) as f64);
    let avg_f1 = entries.iter().map(|e| e.f1).fold(F::zero(), |a, b| a + b) / denom;
    let avg_ece = entries.iter().map(|e| e.ece).fold(F::zero(), |a, b| a + b) / denom;
    LowFrequencyReport { entries, avg_f1, avg_ece }
}

/// Fitted temperature and the dev NLL before/after rescaling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub t: f64,
    pub dev_nll_before: f64,
    pub dev_nll_after: f64,
}

/// Divides every logit by `t`. Argmax per row is unchanged for any t > 0.
pub fn apply_temperature<F: Scalar>(logits: &Matrix<F>, t: f64) -> Matrix<F> {
    assert!(t > 0.0, "temperature must be positive");
    let inv = F::cast(1.0 / t);
    logits.map(|v| v * inv)
}

fn mean_nll<F: Scalar>(logits: &Matrix<F>, gold: &[usize], t: f64) -> f64 {
    let scaled = apply_temperature(logits, t);
    crate::losses::cross_entropy(&scaled, gold)
        .value
        .to_f64()
        .expect("loss fits f64")
}

/// Minimizes dev NLL of softmax(logits/T) by golden-section search on
/// T ∈ [0.05, 20] down to an interval of 1e-4. Falls back to T = 1 if the
/// search result is somehow worse than no scaling.
pub fn fit_temperature<F: Scalar>(dev_logits: &Matrix<F>, gold: &[usize]) -> Result<TemperatureFit> {
    if dev_logits.rows() == 0 {
        return Err(Error::data("temperature fit needs a nonempty dev set".to_string()));
    }
    if gold.len() != dev_logits.rows() {
        return Err(Error::shape(format!(
            "{} gold labels for {} rows",
            gold.len(),
            dev_logits.rows()
        )));
    }
    let nll = |t: f64| mean_nll(dev_logits, gold, t);
    let (mut a, mut b) = (0.05f64, 20.0f64);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = nll(c);
    let mut fd = nll(d);
    while b - a > 1e-4 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = nll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = nll(d);
        }
    }
    let mut t = 0.5 * (a + b);
    let dev_nll_before = nll(1.0);
    let mut dev_nll_after = nll(t);
    if dev_nll_after > dev_nll_before {
        t = 1.0;
        dev_nll_after = dev_nll_before;
    }
    Ok(TemperatureFit { t, dev_nll_before, dev_nll_after })
}

/// One per-label row of the JSON report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerLabelReport {
    pub label: String,
    pub f1: f64,
    pub ece: f64,
}

/// Full metrics report. All values are fractions in [0, 1]; presentation
/// layers multiply by 100 when they want percentages. The reliability
/// bins travel alongside but are emitted separately as CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece_classwise: f64,
    pub ece_standard: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_label: Vec<PerLabelReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<TemperatureFit>,
    #[serde(skip)]
    pub bins: ReliabilityBins<f64>,
}

/// Assembles the full report for a scored batch. `labels` supplies the
/// display name per label id and must cover all K classes.
pub fn calibration_report(
    batch: &ProbBatch<f64>,
    m: usize,
    labels: &[String],
    temperature: Option<TemperatureFit>,
) -> CalibrationReport {
    let k = batch.k();
    assert_eq!(labels.len(), k, "one name per label");
    let bins = bin_predictions(batch, m);
    let metrics = classification_report(batch, k);
    let per_label = (0..k)
        .map(|c| PerLabelReport {
            label: labels[c].clone(),
            f1: metrics.per_label[c].f1,
            ece: label_ece_contribution(&bins, c),
        })
        .collect();
    let report = CalibrationReport {
        ece_classwise: ece_classwise(&bins, batch.len(), k),
        ece_standard: ece_standard(batch, m),
        accuracy: metrics.accuracy,
        precision: metrics.precision,
        recall: metrics.recall,
        f1: metrics.f1,
        per_label,
        temperature,
        bins,
    };
    debug_assert!(
        [report.ece_classwise, report.ece_standard, report.accuracy,
         report.precision, report.recall, report.f1]
        .iter()
        .all(|v| (0.0..=1.0).contains(v))
    );
    report
}

pub const RELIABILITY_CSV_HEADER: &str = "label,bin_lo,bin_hi,count,accuracy,avg_confidence,gap";

/// Renders non-empty cells as CSV rows sorted by (label, bin). The gap
/// column is accuracy − avg_confidence. Floats carry 17 significant
/// digits so a re-parse reconstructs the bins exactly.
pub fn reliability_csv_string<F: Scalar>(bins: &ReliabilityBins<F>) -> String {
    let mut out = String::from(RELIABILITY_CSV_HEADER);
    out.push('\n');
    let m = bins.m as f64;
    for label in 0..bins.k {
        for bin in 0..bins.m {
            let cell = bins.cell(label, bin);
            if cell.count == 0 {
                continue;
            }
            let acc = cell.accuracy.to_f64().expect("metric fits f64");
            let con = cell.avg_confidence.to_f64().expect("metric fits f64");
            out.push_str(&format!(
                "{label},{:.16e},{:.16e},{},{:.16e},{:.16e},{:.16e}\n",
                bin as f64 / m,
                (bin + 1) as f64 / m,
                cell.count,
                acc,
                con,
                acc - con,
            ));
        }
    }
    out
}

/// Writes the reliability CSV to `path`.
pub fn emit_reliability_csv<F: Scalar>(bins: &ReliabilityBins<F>, path: &Path) -> Result<()> {
    std::fs::write(path, reliability_csv_string(bins))?;
    Ok(())
}

/// Rebuilds bins from an emitted CSV; the inverse of
/// `reliability_csv_string` given the original m and k.
pub fn parse_reliability_csv<F: Scalar>(text: &str, m: usize, k: usize) -> Result<ReliabilityBins<F>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == RELIABILITY_CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing reliability CSV header".to_string(),
            })
        }
    }
    let mut bins = ReliabilityBins {
        m,
        k,
        n: 0,
        cells: vec![BinCell::default(); k * m],
    };
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected 7 fields, got {}", parts.len()),
            });
        }
        let bad = |what: &str| Error::Parse {
            line: idx + 1,
            msg: format!("bad {what}"),
        };
        let label: usize = parts[0].trim().parse().map_err(|_| bad("label"))?;
        let bin_lo: f64 = parts[1].trim().parse().map_err(|_| bad("bin_lo"))?;
        let count: usize = parts[3].trim().parse().map_err(|_| bad("count"))?;
        let accuracy: f64 = parts[4].trim().parse().map_err(|_| bad("accuracy"))?;
        let avg_confidence: f64 = parts[5].trim().parse().map_err(|_| bad("avg_confidence"))?;
        if label >= k {
            return Err(bad("label range"));
        }
        let bin = (bin_lo * m as f64).round() as usize;
        if bin >= m {
            return Err(bad("bin range"));
        }
        bins.cells[label * m + bin] = BinCell {
            count,
            accuracy: F::cast(accuracy),
            avg_confidence: F::cast(avg_confidence),
        };
        bins.n += count;
    }
    Ok(bins)
}
