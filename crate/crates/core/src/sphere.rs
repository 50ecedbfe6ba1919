//! Label frames: K unit vectors in H dimensions spread out by minimizing
//! the mean row-maximum of the Gram matrix with its diagonal pushed to -1.
//!
//! The frame is computed once, before training, and stays frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};

/// K unit-norm label vectors stacked as a K×H matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "Matrix<F>",
    into = "Matrix<F>",
    bound(
        serialize = "F: Serialize + Clone + Scalar",
        deserialize = "F: Deserialize<'de> + Scalar"
    )
)]
pub struct FrameMatrix<F> {
    k: usize,
    h: usize,
    x: Matrix<F>,
}

impl<F: Scalar> TryFrom<Matrix<F>> for FrameMatrix<F> {
    type Error = String;

    fn try_from(x: Matrix<F>) -> std::result::Result<Self, String> {
        FrameMatrix::new(x).map_err(|e| e.to_string())
    }
}

impl<F: Scalar> From<FrameMatrix<F>> for Matrix<F> {
    fn from(f: FrameMatrix<F>) -> Matrix<F> {
        f.x
    }
}

impl<F: Scalar> FrameMatrix<F> {
    /// Validates unit rows (1e-9 tolerance), k >= 2, and h >= 1.
    pub fn new(x: Matrix<F>) -> Result<Self> {
        let (k, h) = (x.rows(), x.cols());
        if k < 2 || h < 1 {
            return Err(Error::config(format!("frame needs k >= 2 and h >= 1, got {k}x{h}")));
        }
        let tol = F::cast(1e-9);
        for i in 0..k {
            let norm = x.row(i).iter().map(|&v| v * v).sum::<F>().sqrt();
            if (norm - F::one()).abs() > tol {
                return Err(Error::numeric(format!("frame row {i} has norm {norm}, expected 1")));
            }
        }
        Ok(FrameMatrix { k, h, x })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn x(&self) -> &Matrix<F> {
        &self.x
    }

    pub fn row(&self, i: usize) -> &[F] {
        self.x.row(i)
    }

    /// Largest off-diagonal pairwise dot product.
    pub fn max_pairwise_cosine(&self) -> F {
        let mut best = F::neg_infinity();
        for i in 0..self.k {
            for j in 0..self.k {
                if i == j {
                    continue;
                }
                let dot = dot(self.x.row(i), self.x.row(j));
                if dot > best {
                    best = dot;
                }
            }
        }
        best
    }
}

/// Frame optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameOptConfig {
    pub max_iters: usize,
    pub step_size: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FrameOptConfig {
    fn default() -> Self {
        FrameOptConfig {
            max_iters: 2000,
            step_size: 0.1,
            tolerance: 1e-10,
            seed: 0,
        }
    }
}

/// Random restarts per optimize_frame call; the best objective wins,
/// earliest restart on ties.
const RESTARTS: usize = 5;

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Mean over rows of the row maximum of Z = X·Xᵀ − 2I.
///
/// The doubled identity drags each diagonal entry to −1 so a row can never
/// select itself unless every other row is at the antipode too.
pub fn gram_penalty<F: Scalar>(frame: &FrameMatrix<F>) -> F {
    penalty_raw(frame.x())
}

/// Subgradient of `gram_penalty` with respect to the raw frame entries.
///
/// Row maxima resolve ties at the first index, so the subgradient choice is
/// deterministic.
pub fn gram_penalty_grad<F: Scalar>(frame: &FrameMatrix<F>) -> Matrix<F> {
    grad_raw(frame.x())
}

fn penalty_raw<F: Scalar>(x: &Matrix<F>) -> F {
    let k = x.rows();
    let mut total = F::zero();
    for i in 0..k {
        let mut row_max = F::neg_infinity();
        for j in 0..k {
            let mut z = dot(x.row(i), x.row(j));
            if i == j {
                z -= F::cast(2.0);
            }
            if z > row_max {
                row_max = z;
            }
        }
        total += row_max;
    }
    total / F::cast(k as f64)
}

fn grad_raw<F: Scalar>(x: &Matrix<F>) -> Matrix<F> {
    let k = x.rows();
    let inv_k = F::one() / F::cast(k as f64);
    let mut grad = Matrix::zeros(k, x.cols());
    for i in 0..k {
        let mut row_max = F::neg_infinity();
        let mut j_star = 0;
        for j in 0..k {
            let mut z = dot(x.row(i), x.row(j));
            if i == j {
                z -= F::cast(2.0);
            }
            if z > row_max {
                row_max = z;
                j_star = j;
            }
        }
        if j_star == i {
            // d(xᵢ·xᵢ − 2)/dxᵢ = 2xᵢ; vanishes after tangent projection.
            let row: Vec<F> = x.row(i).to_vec();
            for (c, &v) in row.iter().enumerate() {
                grad[(i, c)] += F::cast(2.0) * inv_k * v;
            }
        } else {
            let xi: Vec<F> = x.row(i).to_vec();
            let xj: Vec<F> = x.row(j_star).to_vec();
            for c in 0..x.cols() {
                grad[(i, c)] += inv_k * xj[c];
                grad[(j_star, c)] += inv_k * xi[c];
            }
        }
    }
    grad
}

/// Removes each row's radial component: gᵢ ← gᵢ − (gᵢ·xᵢ)xᵢ.
pub fn tangent_project<F: Scalar>(grad: &Matrix<F>, frame: &FrameMatrix<F>) -> Matrix<F> {
    let mut out = grad.clone();
    for i in 0..frame.k() {
        let radial = dot(grad.row(i), frame.row(i));
        let x_row: Vec<F> = frame.row(i).to_vec();
        let g_row = out.row_mut(i);
        for (g, &x) in g_row.iter_mut().zip(&x_row) {
            *g -= radial * x;
        }
    }
    out
}

fn normalize_rows<F: Scalar>(x: &mut Matrix<F>) {
    for i in 0..x.rows() {
        let row = x.row_mut(i);
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
}

fn random_unit_rows<F: Scalar>(k: usize, h: usize, rng: &mut ChaCha8Rng) -> Matrix<F> {
    let mut x = Matrix::zeros(k, h);
    for i in 0..k {
        loop {
            let mut norm_sq = 0.0f64;
            let mut draw = vec![0.0f64; h];
            for d in draw.iter_mut() {
                *d = StandardNormal.sample(rng);
                norm_sq += *d * *d;
            }
            if norm_sq.sqrt() >= 1e-12 {
                let norm = norm_sq.sqrt();
                for (c, d) in draw.iter().enumerate() {
                    x[(i, c)] = F::cast(d / norm);
                }
                break;
            }
        }
    }
    x
}

/// Projected gradient descent on the Gram penalty with per-row
/// renormalization and random restarts.
///
/// The best iterate seen anywhere (including initializations) is returned,
/// so the result is never worse than the first initialization. Identical
/// seed and config reproduce the result bit for bit.
pub fn optimize_frame<F: Scalar>(k: usize, h: usize, cfg: &FrameOptConfig) -> FrameMatrix<F> {
    // h = 1 degenerates to the two-point sphere {-1, +1}: every tangent
    // projection is zero there, so the restarts alone pick the arrangement.
    assert!(k >= 2 && h >= 1, "frame needs k >= 2 and h >= 1, got {k}x{h}");
    assert!(cfg.max_iters >= 1, "max_iters must be >= 1");
    assert!(cfg.step_size > 0.0, "step_size must be > 0");
    assert!(cfg.tolerance >= 0.0, "tolerance must be >= 0");

    let step0 = F::cast(cfg.step_size);
    let tol = F::cast(cfg.tolerance);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_x: Option<Matrix<F>> = None;
    let mut best_p = F::infinity();

    for _restart in 0..RESTARTS {
        let mut x = random_unit_rows::<F>(k, h, &mut rng);
        let mut prev = penalty_raw(&x);
        if prev < best_p {
            best_p = prev;
            best_x = Some(x.clone());
        }
        for iter in 0..cfg.max_iters {
            let grad = grad_raw(&x);
            let mut tangent = grad;
            for i in 0..k {
                let radial = dot(tangent.row(i), x.row(i));
                let x_row: Vec<F> = x.row(i).to_vec();
                let g_row = tangent.row_mut(i);
                for (g, &xv) in g_row.iter_mut().zip(&x_row) {
                    *g -= radial * xv;
                }
            }
            // Linear decay to zero: the subgradient stays nonzero at tied
            // optima, so the orbit radius tracks the step size and only a
            // vanishing step lets the iterate settle.
            let step = step0 * (F::one() - F::cast(iter as f64 / cfg.max_iters as f64));
            x.scaled_add(&tangent, -step).expect("same shape");
            normalize_rows(&mut x);
            let p = penalty_raw(&x);
            if p < best_p {
                best_p = p;
                best_x = Some(x.clone());
            }
            if (prev - p).abs() < tol {
                break;
            }
            prev = p;
        }
    }

    let mut x = best_x.expect("at least one restart ran");
    // Re-projection keeps row norms exactly representable at 1.
    normalize_rows(&mut x);
    FrameMatrix::new(x).expect("optimizer maintains unit rows")
}

/// One CSV line per label vector, 17 significant digits per coordinate.
/// That is enough for f64 values to round-trip exactly.
pub fn frame_to_csv<F: Scalar>(frame: &FrameMatrix<F>) -> String {
    let mut out = String::new();
    for i in 0..frame.k() {
        let cells: Vec<String> = frame
            .row(i)
            .iter()
            .map(|v| format!("{:.16e}", v.to_f64().expect("scalar fits f64")))
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn frame_from_csv<F: Scalar>(text: &str) -> Result<FrameMatrix<F>> {
    let mut rows: Vec<Vec<F>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|e| Error::Parse {
                line: idx + 1,
                msg: format!("bad float {cell:?}: {e}"),
            })?;
            row.push(F::cast(v));
        }
        rows.push(row);
    }
    let x = Matrix::from_rows(&rows)?;
    FrameMatrix::new(x)
}
