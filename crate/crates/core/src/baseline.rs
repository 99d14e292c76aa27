//! Closed-form multi-output ridge regression, the global linear baseline.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, SpdFactor};

pub const DEFAULT_LAMBDA: f64 = 1.0;

/// `y ≈ W x` with an L2 penalty on `W`. No intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    weights: Array2<f64>,
    lambda: f64,
}

impl RidgeModel {
    pub fn new(weights: Array2<f64>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::argument(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        ensure_finite(weights.view(), "ridge weights")?;
        Ok(RidgeModel { weights, lambda })
    }

    /// `m×n`
    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn predict_one(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::argument(format!(
                "input has length {}, expected {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(self.weights.dot(&x))
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::argument(format!(
                "inputs have {} columns, expected {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(x.dot(&self.weights.t()))
    }
}

/// Solves `(XᵀX + λI) w_i = Xᵀ y_i` for every output column with one
/// factorization.
pub fn ridge_fit(data: &Dataset, lambda: f64) -> Result<RidgeModel> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::argument(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if data.n_samples() == 0 {
        return Err(Error::argument("ridge_fit needs at least one sample"));
    }
    let x = data.x();
    let y = data.y()?;
    let gram = x.t().dot(&x);
    let factor = SpdFactor::exact(gram.view(), lambda).map_err(|_| {
        Error::Singular(format!(
            "XᵀX + {lambda}·I is singular; use lambda > 0"
        ))
    })?;
    let rhs = x.t().dot(&y);
    let mut weights = Array2::zeros((y.ncols(), x.ncols()));
    for (i, mut row) in weights.axis_iter_mut(Axis(0)).enumerate() {
        row.assign(&factor.solve(rhs.column(i)));
    }
    RidgeModel::new(weights, lambda)
}

/// `W x`
pub fn ridge_predict(model: &RidgeModel, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    model.predict_one(x)
}
