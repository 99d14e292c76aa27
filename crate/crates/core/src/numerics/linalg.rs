use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Total weight at or below which a weighted fit is treated as empty.
pub const WEIGHT_FLOOR: f64 = 1e-12;

const JITTER_START: f64 = 1e-10;
const JITTER_CAP: f64 = 1e-3;
const PIVOT_TOL: f64 = 1e-13;

/// Cholesky factor of `A + jitter·I`, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    lower: Array2<f64>,
    jitter: f64,
}

impl SpdFactor {
    /// Factors `A + jitter·I` with no escalation.
    pub fn exact(a: ArrayView2<'_, f64>, jitter: f64) -> Result<Self> {
        check_square_symmetric(a)?;
        cholesky(a, jitter)
            .map(|lower| SpdFactor { lower, jitter })
            .ok_or_else(|| {
                Error::Singular(format!(
                    "{0}x{0} system is not positive definite at jitter {jitter:e}",
                    a.nrows()
                ))
            })
    }

    /// Factors `A + jitter·I`, escalating the jitter when the factorization
    /// breaks down.
    ///
    /// Schedule: the requested jitter first, then `1e-10·s`, multiplied by 10
    /// on every failure up to `1e-3·s`, where `s = trace(A)/n`.
    pub fn with_escalation(a: ArrayView2<'_, f64>, jitter: f64) -> Result<Self> {
        check_square_symmetric(a)?;
        if !(jitter >= 0.0) {
            return Err(Error::argument(format!("jitter must be >= 0, got {jitter}")));
        }
        if let Some(lower) = cholesky(a, jitter) {
            return Ok(SpdFactor { lower, jitter });
        }
        let n = a.nrows();
        let scale = a.diag().sum() / n as f64;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Singular(format!(
                "{n}x{n} system has non-positive trace; jitter cannot regularize it"
            )));
        }
        let cap = JITTER_CAP * scale;
        let mut extra = JITTER_START * scale;
        while extra <= cap * (1.0 + 1e-12) {
            let j = jitter.max(extra);
            if let Some(lower) = cholesky(a, j) {
                return Ok(SpdFactor { lower, jitter: j });
            }
            extra *= 10.0;
        }
        Err(Error::Singular(format!(
            "{n}x{n} system not factorizable even with jitter {cap:e}"
        )))
    }

    /// Jitter actually added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn solve(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n, "right-hand side length mismatch");
        let l = &self.lower;
        let mut z = Array1::zeros(n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[[i, k]] * z[k];
            }
            z[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in i + 1..n {
                s -= l[[k, i]] * z[k];
            }
            z[i] = s / l[[i, i]];
        }
        z
    }
}

fn check_square_symmetric(a: ArrayView2<'_, f64>) -> Result<()> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::argument(format!(
            "expected a non-empty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-10 * scale.max(1.0) {
                return Err(Error::argument(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

fn cholesky(a: ArrayView2<'_, f64>, jitter: f64) -> Option<Array2<f64>> {
    let n = a.nrows();
    let max_diag = a.diag().iter().fold(0.0f64, |m, v| m.max(v.abs())) + jitter;
    let tol = PIVOT_TOL * max_diag;
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]] + jitter;
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > tol) || !d.is_finite() {
            return None;
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Some(l)
}

/// Solves `(A + jitter·I) x = b` through a Cholesky factorization, escalating
/// the jitter if `A` is numerically singular.
pub fn solve_spd(a: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>, jitter: f64) -> Result<Array1<f64>> {
    if b.len() != a.nrows() {
        return Err(Error::argument(format!(
            "rhs length {} does not match matrix order {}",
            b.len(),
            a.nrows()
        )));
    }
    Ok(SpdFactor::with_escalation(a, jitter)?.solve(b))
}

fn check_weights(x: ArrayView2<'_, f64>, rows: usize, h: ArrayView1<'_, f64>) -> Result<f64> {
    if x.nrows() != rows || h.len() != rows {
        return Err(Error::argument(format!(
            "row mismatch: x has {}, targets {rows}, weights {}",
            x.nrows(),
            h.len()
        )));
    }
    if let Some(w) = h.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::argument(format!("weights must be finite and >= 0, got {w}")));
    }
    let total = h.sum();
    if total <= WEIGHT_FLOOR {
        return Err(Error::EmptyExpert(total));
    }
    Ok(total)
}

/// `Σ h_n x_n x_nᵀ` as an `n×n` matrix.
pub(crate) fn weighted_gram(x: ArrayView2<'_, f64>, h: ArrayView1<'_, f64>) -> Array2<f64> {
    let xw = &x * &h.view().insert_axis(Axis(1));
    xw.t().dot(&x)
}

/// Minimizer of `Σ h_n (t_n − wᵀx_n)²` via the weighted normal equations.
pub fn weighted_least_squares(
    x: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
    h: ArrayView1<'_, f64>,
    jitter: f64,
) -> Result<Array1<f64>> {
    check_weights(x, t.len(), h)?;
    let a = weighted_gram(x, h);
    let ht = &t * &h;
    let b = x.t().dot(&ht);
    Ok(SpdFactor::with_escalation(a.view(), jitter)?.solve(b.view()))
}

/// Multi-output weighted least squares sharing one factorization.
///
/// Returns the `m×n` weight matrix whose row `i` fits column `i` of `y`,
/// together with the jitter the factorization ended up using.
pub fn weighted_least_squares_multi(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    h: ArrayView1<'_, f64>,
    jitter: f64,
) -> Result<(Array2<f64>, f64)> {
    check_weights(x, y.nrows(), h)?;
    let a = weighted_gram(x, h);
    let factor = SpdFactor::with_escalation(a.view(), jitter)?;
    let xw = &x * &h.view().insert_axis(Axis(1));
    // n×m right-hand sides
    let rhs = xw.t().dot(&y);
    let mut w = Array2::zeros((y.ncols(), x.ncols()));
    for (i, mut row) in w.axis_iter_mut(Axis(0)).enumerate() {
        row.assign(&factor.solve(rhs.column(i)));
    }
    Ok((w, factor.jitter()))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as columns.
pub fn symmetric_eigen(a: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    check_square_symmetric(a)?;
    let n = a.nrows();
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok((values, vectors))
}
