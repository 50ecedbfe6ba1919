//! Training objectives: cross-entropy, label smoothing, the rebalanced
//! accuracy-uncertainty (RAU) loss, an accuracy-versus-uncertainty (AVUC)
//! baseline, and an optional KL term against empirical posteriors.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to the logits that produced the probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::bin_index;
use crate::numerics::{argmax, softmax_rows, Matrix, Scalar};

const EPS: f64 = 1e-8;

/// Softmax rows paired with gold labels and argmax predictions.
#[derive(Clone, Debug)]
pub struct ProbBatch<F> {
    probs: Matrix<F>,
    gold: Vec<usize>,
    pred: Vec<usize>,
}

impl<F: Scalar> ProbBatch<F> {
    /// Validates row-stochastic probs (sum 1 ± 1e-9, entries ≥ 0) and gold
    /// label range. Predictions are the row argmax, first index on ties.
    pub fn new(probs: Matrix<F>, gold: Vec<usize>) -> Result<Self> {
        let k = probs.cols();
        if k < 2 {
            return Err(Error::shape(format!("need at least 2 classes, got {k}")));
        }
        if gold.len() != probs.rows() {
            return Err(Error::shape(format!(
                "{} gold labels for {} rows",
                gold.len(),
                probs.rows()
            )));
        }
        let tol = F::cast(1e-9);
        for i in 0..probs.rows() {
            let row = probs.row(i);
            let mut sum = F::zero();
            for &p in row {
                if p < F::zero() || !p.is_finite() {
                    return Err(Error::numeric(format!("row {i} has invalid probability {p}")));
                }
                sum += p;
            }
            if (sum - F::one()).abs() > tol {
                return Err(Error::numeric(format!("row {i} sums to {sum}, expected 1")));
            }
        }
        for (i, &g) in gold.iter().enumerate() {
            if g >= k {
                return Err(Error::data(format!("gold label {g} out of range at row {i}")));
            }
        }
        let pred = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
        Ok(ProbBatch { probs, gold, pred })
    }

    pub fn from_logits(logits: &Matrix<F>, gold: Vec<usize>) -> Result<Self> {
        Self::new(softmax_rows(logits), gold)
    }

    pub fn probs(&self) -> &Matrix<F> {
        &self.probs
    }

    pub fn gold(&self) -> &[usize] {
        &self.gold
    }

    pub fn pred(&self) -> &[usize] {
        &self.pred
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }

    pub fn k(&self) -> usize {
        self.probs.cols()
    }
}

/// Soft accuracy-certainty masses for one batch.
///
/// Produced by `partition_avu`; every sample lands in exactly one of the
/// four masses and all masses are nonnegative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AvuPartition<F> {
    pub n_ac: F,
    pub n_au: F,
    pub n_ic: F,
    pub n_iu: F,
    pub u_theta: F,
}

/// Loss value plus its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossValue<F> {
    pub value: F,
    pub grad_logits: Matrix<F>,
}

impl<F: Scalar> LossValue<F> {
    fn zeros(rows: usize, cols: usize) -> Self {
        LossValue {
            value: F::zero(),
            grad_logits: Matrix::zeros(rows, cols),
        }
    }

    fn accumulate(&mut self, other: &LossValue<F>, weight: F) -> Result<()> {
        self.value += weight * other.value;
        self.grad_logits.scaled_add(&other.grad_logits, weight)
    }
}

/// Confidence of one sample: max(p) when the prediction is correct,
/// 1 − max(p) otherwise. Always in [0, 1].
pub fn confidence<F: Scalar>(p_row: &[F], gold: usize, pred: usize) -> F {
    let max = p_row[pred];
    if pred == gold {
        max
    } else {
        F::one() - max
    }
}

/// Normalized Shannon entropy: (−Σ pₖ ln pₖ) / ln K, clamped to [0, 1].
/// Zero-probability terms contribute nothing.
pub fn uncertainty<F: Scalar>(p_row: &[F]) -> F {
    let mut h = F::zero();
    for &p in p_row {
        if p > F::zero() {
            h -= p * p.ln();
        }
    }
    let u = h / F::cast((p_row.len() as f64).ln());
    u.max(F::zero()).min(F::one())
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum AvuSet {
    Ac,
    Au,
    Ic,
    Iu,
}

struct SampleAvu<F> {
    a: F,
    tan_u: F,
    set: AvuSet,
    /// Certain sample whose (1 − tan u) factor went negative and was
    /// clamped to zero, keeping the mass nonnegative.
    clamped: bool,
    mass: F,
}

fn analyze_batch<F: Scalar>(batch: &ProbBatch<F>, u_theta: F) -> Vec<SampleAvu<F>> {
    (0..batch.len())
        .map(|i| {
            let row = batch.probs.row(i);
            let a = confidence(row, batch.gold[i], batch.pred[i]);
            let u = uncertainty(row);
            let tan_u = u.tan();
            let accurate = batch.pred[i] == batch.gold[i];
            let certain = u <= u_theta;
            let set = match (accurate, certain) {
                (true, true) => AvuSet::Ac,
                (true, false) => AvuSet::Au,
                (false, true) => AvuSet::Ic,
                (false, false) => AvuSet::Iu,
            };
            let (mass, clamped) = if certain {
                let factor = F::one() - tan_u;
                if factor < F::zero() {
                    (F::zero(), true)
                } else {
                    (a * factor, false)
                }
            } else {
                (a * tan_u, false)
            };
            SampleAvu {
                a,
                tan_u,
                set,
                clamped,
                mass,
            }
        })
        .collect()
}

/// Sums each mass in ascending value order so the totals are independent
/// of sample order, bit for bit.
fn sum_masses<F: Scalar>(samples: &[SampleAvu<F>], u_theta: F) -> AvuPartition<F> {
    let mut buckets: [Vec<F>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for s in samples {
        let slot = match s.set {
            AvuSet::Ac => 0,
            AvuSet::Au => 1,
            AvuSet::Ic => 2,
            AvuSet::Iu => 3,
        };
        buckets[slot].push(s.mass);
    }
    let mut totals = [F::zero(); 4];
    for (slot, bucket) in buckets.iter_mut().enumerate() {
        bucket.sort_by(|a, b| a.partial_cmp(b).expect("masses are finite"));
        totals[slot] = bucket.iter().fold(F::zero(), |acc, &m| acc + m);
    }
    AvuPartition {
        n_ac: totals[0],
        n_au: totals[1],
        n_ic: totals[2],
        n_iu: totals[3],
        u_theta,
    }
}

/// Splits a batch into the four soft accuracy-certainty masses.
///
/// Accurate samples put weight on AC when certain (u ≤ u_θ) and AU when
/// not; inaccurate samples mirror this into IC and IU. Certain samples
/// weigh a·(1 − tan u), uncertain ones a·tan u, with the certain factor
/// clamped at zero so no mass can go negative.
pub fn partition_avu<F: Scalar>(batch: &ProbBatch<F>, u_theta: F) -> AvuPartition<F> {
    assert!(
        u_theta >= F::zero() && u_theta <= F::one(),
        "u_theta must lie in [0, 1]"
    );
    sum_masses(&analyze_batch(batch, u_theta), u_theta)
}

/// Builds grad_logits from per-mass partials, flowing gradients through
/// the confidence a and tan(u) factors while holding the set assignments
/// fixed (straight-through on the indicators).
fn avu_grad_logits<F: Scalar>(
    batch: &ProbBatch<F>,
    samples: &[SampleAvu<F>],
    mass_partial: impl Fn(AvuSet) -> F,
) -> Matrix<F> {
    let k = batch.k();
    let ln_k = F::cast((k as f64).ln());
    let tiny = F::min_positive_value();
    let mut grad = Matrix::zeros(batch.len(), k);
    for (i, s) in samples.iter().enumerate() {
        let mp = mass_partial(s.set);
        let certain = matches!(s.set, AvuSet::Ac | AvuSet::Ic);
        let (dm_da, dm_du) = if certain {
            if s.clamped {
                (F::zero(), F::zero())
            } else {
                let sec2 = F::one() + s.tan_u * s.tan_u;
                (F::one() - s.tan_u, -s.a * sec2)
            }
        } else {
            let sec2 = F::one() + s.tan_u * s.tan_u;
            (s.tan_u, s.a * sec2)
        };
        let dv_da = mp * dm_da;
        let dv_du = mp * dm_du;

        let row = batch.probs.row(i);
        let mut g_p = vec![F::zero(); k];
        for (c, &p) in row.iter().enumerate() {
            let ln_p = p.max(tiny).ln();
            g_p[c] = dv_du * (-(ln_p + F::one()) / ln_k);
        }
        let accurate = batch.pred[i] == batch.gold[i];
        let sign = if accurate { F::one() } else { -F::one() };
        g_p[batch.pred[i]] += dv_da * sign;

        // Softmax Jacobian: dz_k = p_k (g_k − Σ_j p_j g_j).
        let mut inner = F::zero();
        for (c, &p) in row.iter().enumerate() {
            inner += p * g_p[c];
        }
        for (c, &p) in row.iter().enumerate() {
            grad[(i, c)] = p * (g_p[c] - inner);
        }
    }
    grad
}

/// Rebalanced accuracy-uncertainty loss:
/// ln(1 + n_AU/(n_AC + n_AU + ε) + n_IC/(n_IC + n_IU + ε)).
///
/// Each ratio stays in [0, 1), so the value is bounded by ln 3. The value
/// reaches zero exactly when no accurate sample is uncertain and no
/// inaccurate sample is certain.
pub fn rau_loss<F: Scalar>(batch: &ProbBatch<F>, u_theta: F) -> LossValue<F> {
    assert!(
        u_theta >= F::zero() && u_theta <= F::one(),
        "u_theta must lie in [0, 1]"
    );
    let samples = analyze_batch(batch, u_theta);
    let part = sum_masses(&samples, u_theta);
    let eps = F::cast(EPS);
    let d1 = part.n_ac + part.n_au + eps;
    let d2 = part.n_ic + part.n_iu + eps;
    let s = F::one() + part.n_au / d1 + part.n_ic / d2;
    let value = s.ln();

    let g_ac = -part.n_au / (d1 * d1 * s);
    let g_au = (part.n_ac + eps) / (d1 * d1 * s);
    let g_ic = (part.n_iu + eps) / (d2 * d2 * s);
    let g_iu = -part.n_ic / (d2 * d2 * s);
    let grad_logits = avu_grad_logits(batch, &samples, |set| match set {
        AvuSet::Ac => g_ac,
        AvuSet::Au => g_au,
        AvuSet::Ic => g_ic,
        AvuSet::Iu => g_iu,
    });
    LossValue { value, grad_logits }
}

/// Accuracy-versus-uncertainty baseline:
/// ln(1 + (n_AU + n_IC)/(n_AC + n_IU + ε)).
pub fn avuc_loss<F: Scalar>(batch: &ProbBatch<F>, u_theta: F) -> LossValue<F> {
    assert!(
        u_theta >= F::zero() && u_theta <= F::one(),
        "u_theta must lie in [0, 1]"
    );
    let samples = analyze_batch(batch, u_theta);
    let part = sum_masses(&samples, u_theta);
    let eps = F::cast(EPS);
    let nu = part.n_au + part.n_ic;
    let de = part.n_ac + part.n_iu + eps;
    let s = F::one() + nu / de;
    let value = s.ln();

    let g_off = F::one() / (de * s);
    let g_diag = -nu / (de * de * s);
    let grad_logits = avu_grad_logits(batch, &samples, |set| match set {
        AvuSet::Au | AvuSet::Ic => g_off,
        AvuSet::Ac | AvuSet::Iu => g_diag,
    });
    LossValue { value, grad_logits }
}

/// Stable log-sum-exp of one logit row.
fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Cross-entropy against the target (1 − eps)·onehot + eps/K, mean over
/// rows. This single code path serves both plain cross-entropy (eps = 0)
/// and label smoothing, so the eps = 0 reduction is bitwise.
fn smoothed_ce<F: Scalar>(logits: &Matrix<F>, gold: &[usize], eps: F) -> LossValue<F> {
    let n = logits.rows();
    let k = logits.cols();
    assert_eq!(gold.len(), n, "one gold label per logit row");
    assert!(gold.iter().all(|&g| g < k), "gold label out of range");
    let uniform = eps / F::cast(k as f64);
    let keep = F::one() - eps;
    let inv_n = F::one() / F::cast(n as f64);

    let probs = softmax_rows(logits);
    let mut value = F::zero();
    let mut grad = probs;
    for (i, &gold_i) in gold.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        let mut target_dot = F::zero();
        for (c, &z) in row.iter().enumerate() {
            let t = uniform + if c == gold_i { keep } else { F::zero() };
            target_dot += t * z;
        }
        value += lse - target_dot;
        let grad_row = grad.row_mut(i);
        for (c, g) in grad_row.iter_mut().enumerate() {
            let t = uniform + if c == gold_i { keep } else { F::zero() };
            *g = (*g - t) * inv_n;
        }
    }
    LossValue {
        value: value * inv_n,
        grad_logits: grad,
    }
}

/// Mean negative log softmax probability of the gold label.
pub fn cross_entropy<F: Scalar>(logits: &Matrix<F>, gold: &[usize]) -> LossValue<F> {
    smoothed_ce(logits, gold, F::zero())
}

/// Cross-entropy against the smoothed target (1 − eps)·onehot + eps/K.
pub fn label_smoothing_loss<F: Scalar>(logits: &Matrix<F>, gold: &[usize], eps: F) -> LossValue<F> {
    assert!(
        eps >= F::zero() && eps <= F::one(),
        "smoothing eps must lie in [0, 1]"
    );
    smoothed_ce(logits, gold, eps)
}

/// Mean row-wise KL(empirical ∥ probs). The gradient assumes probs is the
/// softmax of the logits, which collapses to (probs − empirical)/N.
pub fn poscal_kl<F: Scalar>(probs: &Matrix<F>, empirical: &Matrix<F>) -> Result<LossValue<F>> {
    if probs.rows() != empirical.rows() || probs.cols() != empirical.cols() {
        return Err(Error::shape(format!(
            "probs {}x{} vs empirical {}x{}",
            probs.rows(),
            probs.cols(),
            empirical.rows(),
            empirical.cols()
        )));
    }
    let n = probs.rows();
    let inv_n = F::one() / F::cast(n as f64);
    let tiny = F::min_positive_value();
    let mut value = F::zero();
    let mut grad = Matrix::zeros(n, probs.cols());
    for i in 0..n {
        for c in 0..probs.cols() {
            let q = empirical[(i, c)];
            let p = probs[(i, c)];
            if q > F::zero() {
                value += q * (q.ln() - p.max(tiny).ln());
            }
            grad[(i, c)] = (p - q) * inv_n;
        }
    }
    Ok(LossValue {
        value: value * inv_n,
        grad_logits: grad,
    })
}

/// Empirical posterior table for the KL term: for each class, samples are
/// binned by predicted probability and the entry becomes the gold-label
/// frequency of that bin; rows are then normalized to sum to one.
pub fn empirical_posteriors<F: Scalar>(
    probs: &Matrix<F>,
    gold: &[usize],
    m_bins: usize,
) -> Result<Matrix<F>> {
    if m_bins == 0 {
        return Err(Error::config("empirical posterior needs at least 1 bin".to_string()));
    }
    if gold.len() != probs.rows() {
        return Err(Error::shape(format!(
            "{} gold labels for {} rows",
            gold.len(),
            probs.rows()
        )));
    }
    let n = probs.rows();
    let k = probs.cols();
    let mut count = vec![vec![0usize; m_bins]; k];
    let mut hits = vec![vec![0usize; m_bins]; k];
    for i in 0..n {
        for c in 0..k {
            let b = bin_index(probs[(i, c)].to_f64().expect("prob fits f64"), m_bins);
            count[c][b] += 1;
            if gold[i] == c {
                hits[c][b] += 1;
            }
        }
    }
    let mut out = Matrix::zeros(n, k);
    for i in 0..n {
        let mut row_sum = F::zero();
        for c in 0..k {
            let b = bin_index(probs[(i, c)].to_f64().expect("prob fits f64"), m_bins);
            let freq = if count[c][b] == 0 {
                F::zero()
            } else {
                F::cast(hits[c][b] as f64 / count[c][b] as f64)
            };
            out[(i, c)] = freq;
            row_sum += freq;
        }
        if row_sum > F::zero() {
            for c in 0..k {
                out[(i, c)] /= row_sum;
            }
        } else {
            let uniform = F::one() / F::cast(k as f64);
            for c in 0..k {
                out[(i, c)] = uniform;
            }
        }
    }
    Ok(out)
}

/// Base objective selection for `total_loss`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    CrossEntropy,
    LabelSmoothing { eps: f64 },
}

/// Weighted loss composition evaluated by `total_loss`.
#[derive(Clone, Debug)]
pub struct LossPlan<'a, F> {
    pub base: BaseLoss,
    pub rau_weight: f64,
    pub avuc_weight: f64,
    pub kl_weight: f64,
    pub u_theta: f64,
    /// Row-aligned empirical posterior table; required when kl_weight > 0.
    pub empirical: Option<&'a Matrix<F>>,
}

impl<F> Default for LossPlan<'_, F> {
    fn default() -> Self {
        LossPlan {
            base: BaseLoss::CrossEntropy,
            rau_weight: 0.0,
            avuc_weight: 0.0,
            kl_weight: 0.0,
            u_theta: 0.5,
            empirical: None,
        }
    }
}

/// Weighted sum of the selected base loss and auxiliary terms. The RAU and
/// AVUC terms are mutually exclusive.
pub fn total_loss<F: Scalar>(
    logits: &Matrix<F>,
    gold: &[usize],
    plan: &LossPlan<'_, F>,
) -> Result<LossValue<F>> {
    if plan.rau_weight > 0.0 && plan.avuc_weight > 0.0 {
        return Err(Error::config(
            "rau_weight and avuc_weight cannot both be positive".to_string(),
        ));
    }
    let base = match plan.base {
        BaseLoss::CrossEntropy => cross_entropy(logits, gold),
        BaseLoss::LabelSmoothing { eps } => label_smoothing_loss(logits, gold, F::cast(eps)),
    };
    if plan.rau_weight <= 0.0 && plan.avuc_weight <= 0.0 && plan.kl_weight <= 0.0 {
        return Ok(base);
    }
    let mut total = LossValue::zeros(logits.rows(), logits.cols());
    total.accumulate(&base, F::one())?;
    if plan.rau_weight > 0.0 || plan.avuc_weight > 0.0 {
        let batch = ProbBatch::from_logits(logits, gold.to_vec())?;
        let u_theta = F::cast(plan.u_theta);
        if plan.rau_weight > 0.0 {
            total.accumulate(&rau_loss(&batch, u_theta), F::cast(plan.rau_weight))?;
        } else {
            total.accumulate(&avuc_loss(&batch, u_theta), F::cast(plan.avuc_weight))?;
        }
    }
    if plan.kl_weight > 0.0 {
        let empirical = plan.empirical.ok_or_else(|| {
            Error::config("kl_weight > 0 requires an empirical posterior table".to_string())
        })?;
        let probs = softmax_rows(logits);
        total.accumulate(&poscal_kl(&probs, empirical)?, F::cast(plan.kl_weight))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rows: &[Vec<f64>], gold: &[usize]) -> ProbBatch<f64> {
        ProbBatch::new(Matrix::from_rows(rows).unwrap(), gold.to_vec()).unwrap()
    }

    /// Random logits whose samples all sit away from the u_θ boundary and
    /// from argmax ties, so finite differences see a smooth function.
    fn interior_logits(
        seed: u64,
        n: usize,
        k: usize,
        u_theta: f64,
    ) -> (Matrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        'outer: loop {
            let data: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let logits = Matrix::from_vec(n, k, data).unwrap();
            let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let probs = softmax_rows(&logits);
            for i in 0..n {
                let row = probs.row(i);
                let u = uncertainty(row);
                if (u - u_theta).abs() < 1e-3 {
                    continue 'outer;
                }
                let mut sorted: Vec<f64> = row.to_vec();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if sorted[0] - sorted[1] < 1e-3 {
                    continue 'outer;
                }
            }
            return (logits, gold);
        }
    }

    #[test]
    fn confidence_branches() {
        assert_eq!(confidence::<f64>(&[1.0, 0.0], 0, 0), 1.0);
        let wrong = confidence::<f64>(&[0.9, 0.1], 1, 0);
        assert!((wrong - 0.1).abs() < 1e-12);
        assert_eq!(confidence::<f64>(&[0.6, 0.4], 0, 0), 0.6);
    }

    #[test]
    fn uncertainty_range_and_known_value() {
        assert_eq!(uncertainty::<f64>(&[1.0, 0.0, 0.0]), 0.0);
        let uniform = uncertainty::<f64>(&[0.25; 4]);
        assert!((uniform - 1.0).abs() < 1e-12);
        let u = uncertainty::<f64>(&[0.9, 0.1]);
        // (−0.9 ln 0.9 − 0.1 ln 0.1)/ln 2, evaluated directly.
        assert!((u - 0.46899559358928117).abs() < 1e-12);
    }

    #[test]
    fn partition_all_onehot_correct() {
        let b = batch(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]], &[0, 1, 0]);
        let p = partition_avu(&b, 0.5);
        assert_eq!(p.n_ac, 3.0);
        assert_eq!(p.n_au, 0.0);
        assert_eq!(p.n_ic, 0.0);
        assert_eq!(p.n_iu, 0.0);
    }

    #[test]
    fn partition_wrong_onehot_is_all_zero() {
        let b = batch(&[vec![1.0, 0.0]], &[1]);
        let p = partition_avu(&b, 0.5);
        assert_eq!((p.n_ac, p.n_au, p.n_ic, p.n_iu), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn partition_hand_value() {
        let b = batch(&[vec![0.775, 0.225]], &[0]);
        let p = partition_avu(&b, 0.5);
        let u = (-0.775 * 0.775f64.ln() - 0.225 * 0.225f64.ln()) / 2f64.ln();
        assert!(u > 0.5);
        let want = 0.775 * u.tan();
        assert!((p.n_au - want).abs() < 1e-15);
        assert!((p.n_au - 0.7502801610071562).abs() < 1e-12);
        assert_eq!((p.n_ac, p.n_ic, p.n_iu), (0.0, 0.0, 0.0));
    }

    #[test]
    fn partition_clamps_negative_certain_mass() {
        // u(0.7, 0.3) ≈ 0.881: certain under u_θ = 0.9 but tan u > 1.
        let b = batch(&[vec![0.7, 0.3]], &[0]);
        let u = uncertainty(&[0.7, 0.3]);
        assert!(u > std::f64::consts::FRAC_PI_4 && u < 0.9);
        let p = partition_avu(&b, 0.9);
        assert_eq!(p.n_ac, 0.0);
        assert!(p.n_au >= 0.0 && p.n_ic >= 0.0 && p.n_iu >= 0.0);
    }

    #[test]
    fn rau_zero_for_confident_correct_batch() {
        let b = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        let lv = rau_loss(&b, 0.5);
        assert!(lv.value.abs() < 1e-7);
    }

    #[test]
    fn rau_ln2_when_all_accurate_samples_uncertain() {
        // u(0.775, 0.225) ≈ 0.769 > u_θ = 0.1: the only sample is accurate
        // and uncertain, so the first ratio saturates at 1.
        let b = batch(&[vec![0.775, 0.225]], &[0]);
        let lv = rau_loss(&b, 0.1);
        assert!((lv.value - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn rau_gradient_passes_finite_differences() {
        for seed in 0..20u64 {
            let (logits, gold) = interior_logits(seed, 16, 4, 0.5);
            let b = ProbBatch::from_logits(&logits, gold.clone()).unwrap();
            let lv = rau_loss(&b, 0.5);
            let res = finite_diff_check(
                |z: &Matrix<f64>| {
                    let pb = ProbBatch::from_logits(z, gold.clone()).unwrap();
                    rau_loss(&pb, 0.5).value
                },
                &lv.grad_logits,
                &logits,
                // Gradient entries span ten orders of magnitude; a step this
                // size keeps central-difference roundoff below the smallest.
                3e-4,
            )
            .unwrap();
            assert!(res.max_relative_error < 1e-4, "seed {seed}: {res:?}");
        }
    }

    #[test]
    fn avuc_zero_for_confident_correct_batch() {
        let b = batch(&[vec![1.0, 0.0]], &[0]);
        assert!(avuc_loss(&b, 0.5).value.abs() < 1e-7);
    }

    #[test]
    fn avuc_ln2_when_masses_balance() {
        // The certain sample's a(1 − tan u) equals the uncertain sample's
        // a tan u, so the ratio is 1 up to rounding.
        let qc = 0.9649886257631759;
        let b = batch(&[vec![qc, 1.0 - qc], vec![0.775, 0.225]], &[0, 0]);
        let p = partition_avu(&b, 0.5);
        assert!((p.n_ac - p.n_au).abs() < 1e-9, "n_ac {} vs n_au {}", p.n_ac, p.n_au);
        assert_eq!(p.n_ic, 0.0);
        assert_eq!(p.n_iu, 0.0);
        let lv = avuc_loss(&b, 0.5);
        assert!((lv.value - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn avuc_gradient_passes_finite_differences() {
        for seed in 100..120u64 {
            let (logits, gold) = interior_logits(seed, 16, 4, 0.5);
            let b = ProbBatch::from_logits(&logits, gold.clone()).unwrap();
            let lv = avuc_loss(&b, 0.5);
            let res = finite_diff_check(
                |z: &Matrix<f64>| {
                    let pb = ProbBatch::from_logits(z, gold.clone()).unwrap();
                    avuc_loss(&pb, 0.5).value
                },
                &lv.grad_logits,
                &logits,
                3e-4,
            )
            .unwrap();
            assert!(res.max_relative_error < 1e-4, "seed {seed}: {res:?}");
        }
    }

    #[test]
    fn cross_entropy_saturates_and_hits_ln_k() {
        let confident = Matrix::from_rows(&[vec![1000.0, 0.0, 0.0]]).unwrap();
        assert!(cross_entropy(&confident, &[0]).value < 1e-9);
        let uniform = Matrix::from_rows(&[vec![0.5, 0.5, 0.5, 0.5]]).unwrap();
        assert!((cross_entropy(&uniform, &[2]).value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Matrix::from_vec(8, 5, (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .unwrap();
        let gold: Vec<usize> = (0..8).map(|_| rng.gen_range(0..5)).collect();
        let lv = cross_entropy(&logits, &gold);
        let mut want = 0.0;
        for i in 0..8 {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            want += lse - row[gold[i]];
        }
        want /= 8.0;
        assert!((lv.value - want).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_gradient_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = Matrix::from_vec(6, 4, (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let gold: Vec<usize> = (0..6).map(|_| rng.gen_range(0..4)).collect();
        let lv = cross_entropy(&logits, &gold);
        let res = finite_diff_check(
            |z: &Matrix<f64>| cross_entropy(z, &gold).value,
            &lv.grad_logits,
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(res.max_relative_error < 1e-4, "{res:?}");
    }

    #[test]
    fn label_smoothing_zero_eps_is_cross_entropy_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let logits: Matrix<f64> =
            Matrix::from_vec(5, 3, (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let gold = vec![0, 2, 1, 1, 0];
        let ce = cross_entropy(&logits, &gold);
        let ls = label_smoothing_loss(&logits, &gold, 0.0);
        assert_eq!(ce.value.to_bits(), ls.value.to_bits());
        for (a, b) in ce.grad_logits.data().iter().zip(ls.grad_logits.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn label_smoothing_full_eps_targets_uniform() {
        let logits = Matrix::from_rows(&[vec![1.0, -0.5, 0.25]]).unwrap();
        let lv = label_smoothing_loss(&logits, &[0], 1.0);
        let row = logits.row(0);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let want = lse - row.iter().sum::<f64>() / 3.0;
        assert!((lv.value - want).abs() < 1e-12);
    }

    #[test]
    fn label_smoothing_matches_expanded_target_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let logits: Matrix<f64> =
            Matrix::from_vec(7, 4, (0..28).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let gold: Vec<usize> = (0..7).map(|_| rng.gen_range(0..4)).collect();
        let eps = 0.1;
        let lv = label_smoothing_loss(&logits, &gold, eps);
        let probs = softmax_rows(&logits);
        let mut want = 0.0;
        for i in 0..7 {
            for c in 0..4 {
                let t = eps / 4.0 + if c == gold[i] { 1.0 - eps } else { 0.0 };
                want -= t * probs[(i, c)].ln();
            }
        }
        want /= 7.0;
        assert!((lv.value - want).abs() < 1e-10);

        let res = finite_diff_check(
            |z: &Matrix<f64>| label_smoothing_loss(z, &gold, eps).value,
            &lv.grad_logits,
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(res.max_relative_error < 1e-4, "{res:?}");
    }

    #[test]
    fn kl_identity_and_uniform_cases() {
        let p = Matrix::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap();
        assert_eq!(poscal_kl(&p, &p).unwrap().value, 0.0);

        let probs = Matrix::from_rows(&[vec![0.25; 4], vec![0.25; 4]]).unwrap();
        let onehot = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ])
        .unwrap();
        let lv = poscal_kl(&probs, &onehot).unwrap();
        assert!((lv.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_direct_sum_oracle_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let logits: Matrix<f64> =
            Matrix::from_vec(6, 3, (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let probs = softmax_rows(&logits);
        let q_logits: Matrix<f64> =
            Matrix::from_vec(6, 3, (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let q = softmax_rows(&q_logits);

        let lv = poscal_kl(&probs, &q).unwrap();
        let mut want = 0.0;
        for i in 0..6 {
            for c in 0..3 {
                want += q[(i, c)] * (q[(i, c)] / probs[(i, c)]).ln();
            }
        }
        want /= 6.0;
        assert!((lv.value - want).abs() < 1e-10);

        let res = finite_diff_check(
            |z: &Matrix<f64>| poscal_kl(&softmax_rows(z), &q).unwrap().value,
            &lv.grad_logits,
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(res.max_relative_error < 1e-4, "{res:?}");
    }

    #[test]
    fn kl_rejects_shape_mismatch() {
        let p = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let q = Matrix::from_rows(&[vec![0.5, 0.25, 0.25]]).unwrap();
        assert!(matches!(poscal_kl(&p, &q), Err(Error::Shape(_))));
    }

    #[test]
    fn empirical_posteriors_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let logits = Matrix::from_vec(40, 3, (0..120).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let probs = softmax_rows(&logits);
        let gold: Vec<usize> = (0..40).map(|_| rng.gen_range(0..3)).collect();
        let emp = empirical_posteriors(&probs, &gold, 10).unwrap();
        for i in 0..emp.rows() {
            let sum: f64 = emp.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(emp.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn total_loss_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let logits: Matrix<f64> =
            Matrix::from_vec(10, 4, (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let gold: Vec<usize> = (0..10).map(|_| rng.gen_range(0..4)).collect();

        let ce_only = total_loss(&logits, &gold, &LossPlan::default()).unwrap();
        let ce = cross_entropy(&logits, &gold);
        assert_eq!(ce_only.value.to_bits(), ce.value.to_bits());

        let plan = LossPlan {
            rau_weight: 3.0,
            ..LossPlan::default()
        };
        let combined = total_loss(&logits, &gold, &plan).unwrap();
        let b = ProbBatch::from_logits(&logits, gold.clone()).unwrap();
        let rau = rau_loss(&b, 0.5);
        assert!((combined.value - (ce.value + 3.0 * rau.value)).abs() < 1e-12);
        for i in 0..10 {
            for c in 0..4 {
                let want = ce.grad_logits[(i, c)] + 3.0 * rau.grad_logits[(i, c)];
                assert!((combined.grad_logits[(i, c)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_loss_rau_term_vanishes_on_confident_correct_batch() {
        let logits: Matrix<f64> = Matrix::from_rows(&[vec![40.0, 0.0], vec![0.0, 40.0]]).unwrap();
        let gold = vec![0, 1];
        let plan = LossPlan {
            rau_weight: 3.0,
            ..LossPlan::default()
        };
        let combined = total_loss(&logits, &gold, &plan).unwrap();
        let ce = cross_entropy(&logits, &gold);
        assert!((combined.value - ce.value).abs() < 1e-12);
    }

    #[test]
    fn total_loss_rejects_bad_combinations() {
        let logits = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let both = LossPlan::<f64> {
            rau_weight: 3.0,
            avuc_weight: 3.0,
            ..LossPlan::default()
        };
        assert!(matches!(total_loss(&logits, &[0], &both), Err(Error::Config(_))));

        let kl_missing = LossPlan::<f64> {
            kl_weight: 1.0,
            ..LossPlan::default()
        };
        assert!(matches!(
            total_loss(&logits, &[0], &kl_missing),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn rau_and_avuc_bounds(seed in 0u64..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..20);
            let k = rng.gen_range(2..6);
            let logits = Matrix::from_vec(
                n, k, (0..n * k).map(|_| rng.gen_range(-4.0..4.0)).collect()
            ).unwrap();
            let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let b = ProbBatch::from_logits(&logits, gold).unwrap();
            let u_theta = rng.gen_range(0.0..=1.0);
            let rau = rau_loss(&b, u_theta);
            prop_assert!(rau.value >= 0.0);
            prop_assert!(rau.value <= 3f64.ln() + 1e-12);
            let avuc = avuc_loss(&b, u_theta);
            prop_assert!(avuc.value >= 0.0);
        }

        #[test]
        fn partition_is_permutation_equivariant(seed in 0u64..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
            let n = rng.gen_range(2..16);
            let k = rng.gen_range(2..5);
            let logits = Matrix::from_vec(
                n, k, (0..n * k).map(|_| rng.gen_range(-3.0..3.0)).collect()
            ).unwrap();
            let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let b = ProbBatch::from_logits(&logits, gold.clone()).unwrap();

            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let probs = softmax_rows(&logits);
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| probs.row(i).to_vec()).collect();
            let perm_gold: Vec<usize> = order.iter().map(|&i| gold[i]).collect();
            let pb = ProbBatch::new(Matrix::from_rows(&rows).unwrap(), perm_gold).unwrap();

            let a = partition_avu(&b, 0.5);
            let c = partition_avu(&pb, 0.5);
            prop_assert_eq!(a.n_ac.to_bits(), c.n_ac.to_bits());
            prop_assert_eq!(a.n_au.to_bits(), c.n_au.to_bits());
            prop_assert_eq!(a.n_ic.to_bits(), c.n_ic.to_bits());
            prop_assert_eq!(a.n_iu.to_bits(), c.n_iu.to_bits());
        }
    }
}
