//! The mixture-of-regression-experts model.
//!
//! Each expert `j` is a linear map `W_j` (`m×n`) with independent Gaussian
//! noise per output dimension (variances `σ²_{j,i}`). A softmax gate over the
//! scores `v_jᵀx` picks experts. All density arithmetic is done in the log
//! domain so that very wide outputs do not underflow.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{argmax, ensure_finite, softmax_in_place};

/// Smallest variance any expert may carry.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Rows per work unit in batched evaluation. Fixed so that serial and
/// parallel runs perform identical arithmetic.
pub(crate) const ROW_CHUNK: usize = 256;

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::argument(format!(
            "{what} has length {got}, expected {want}"
        )));
    }
    Ok(())
}

/// One linear-Gaussian expert.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    weights: Array2<f64>,
    variances: Array1<f64>,
    // -(m/2) ln 2π - ½ Σ ln σ²
    log_norm: f64,
}

impl Expert {
    /// Builds an expert, raising every variance to at least `floor`.
    pub fn new(weights: Array2<f64>, variances: Array1<f64>, floor: f64) -> Result<Self> {
        let variances = variances.mapv(|v| if v < floor { floor } else { v });
        Self::strict(weights, variances, floor)
    }

    /// Builds an expert, rejecting any variance below `floor` instead of
    /// clamping it.
    pub fn strict(weights: Array2<f64>, variances: Array1<f64>, floor: f64) -> Result<Self> {
        check_len("variance vector", variances.len(), weights.nrows())?;
        ensure_finite(weights.view(), "expert weights")?;
        if let Some((i, v)) = variances
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < floor)
        {
            return Err(Error::argument(format!(
                "variance {i} is {v}, below the floor {floor:e}"
            )));
        }
        let m = weights.nrows() as f64;
        let log_norm = -0.5 * m * LN_2PI - 0.5 * variances.iter().map(|v| v.ln()).sum::<f64>();
        Ok(Expert {
            weights,
            variances,
            log_norm,
        })
    }

    /// `m×n` weight matrix `W_j`.
    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    /// Diagonal of `Σ_j`.
    pub fn variances(&self) -> ArrayView1<'_, f64> {
        self.variances.view()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// `W_j x`
    pub fn mean(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_len("input", x.len(), self.input_dim())?;
        Ok(self.weights.dot(&x))
    }

    /// `log p(y | x, W_j, Σ_j)` for the diagonal Gaussian.
    pub fn log_density(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
        check_len("target", y.len(), self.output_dim())?;
        let mean = self.mean(x)?;
        let quad: f64 = y
            .iter()
            .zip(mean.iter())
            .zip(self.variances.iter())
            .map(|((yi, mi), v)| (yi - mi) * (yi - mi) / v)
            .sum();
        Ok(self.log_norm - 0.5 * quad)
    }

    /// Row-wise log densities for a batch; shapes are checked by the caller.
    pub(crate) fn log_density_rows(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array1<f64> {
        let means = x.dot(&self.weights.t());
        let inv: Array1<f64> = self.variances.mapv(|v| 1.0 / v);
        Array1::from_iter(y.outer_iter().zip(means.outer_iter()).map(|(yr, mr)| {
            let quad: f64 = yr
                .iter()
                .zip(mr.iter())
                .zip(inv.iter())
                .map(|((a, b), w)| (a - b) * (a - b) * w)
                .sum();
            self.log_norm - 0.5 * quad
        }))
    }
}

/// Softmax gate over per-expert linear scores.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingNetwork {
    /// `K×n`; row `j` is `v_j`.
    params: Array2<f64>,
}

impl GatingNetwork {
    pub fn new(params: Array2<f64>) -> Result<Self> {
        if params.nrows() == 0 {
            return Err(Error::argument("gating network needs at least one expert"));
        }
        ensure_finite(params.view(), "gating parameters")?;
        Ok(GatingNetwork { params })
    }

    pub fn zeros(k: usize, n: usize) -> Self {
        GatingNetwork {
            params: Array2::zeros((k, n)),
        }
    }

    pub fn params(&self) -> ArrayView2<'_, f64> {
        self.params.view()
    }

    pub fn k(&self) -> usize {
        self.params.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.params.ncols()
    }

    pub fn probabilities(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_len("input", x.len(), self.input_dim())?;
        let mut logits = self.params.dot(&x).to_vec();
        softmax_in_place(&mut logits);
        Ok(Array1::from(logits))
    }

    /// `log g_j(x_n)` for every row of `x`: `N×K`.
    pub(crate) fn log_probabilities_rows(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut logits = x.dot(&self.params.t());
        for mut row in logits.outer_iter_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        logits
    }
}

/// `K` experts sharing input dimension `n` and output dimension `m`, plus
/// their gate.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    experts: Vec<Expert>,
    gating: GatingNetwork,
    variance_floor: f64,
}

impl MixtureModel {
    pub fn new(experts: Vec<Expert>, gating: GatingNetwork, variance_floor: f64) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::argument("a mixture needs at least one expert"));
        }
        if !(variance_floor > 0.0) {
            return Err(Error::argument(format!(
                "variance floor must be positive, got {variance_floor}"
            )));
        }
        let (m, n) = experts[0].weights.dim();
        for (j, e) in experts.iter().enumerate() {
            if e.weights.dim() != (m, n) {
                return Err(Error::argument(format!(
                    "expert {j} has shape {:?}, expected {:?}",
                    e.weights.dim(),
                    (m, n)
                )));
            }
            if let Some(v) = e.variances.iter().find(|v| **v < variance_floor) {
                return Err(Error::argument(format!(
                    "expert {j} variance {v} below floor {variance_floor:e}"
                )));
            }
        }
        if gating.k() != experts.len() || gating.input_dim() != n {
            return Err(Error::argument(format!(
                "gating is {}x{}, expected {}x{n}",
                gating.k(),
                gating.input_dim(),
                experts.len()
            )));
        }
        Ok(MixtureModel {
            experts,
            gating,
            variance_floor,
        })
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn input_dim(&self) -> usize {
        self.experts[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.experts[0].output_dim()
    }

    pub fn variance_floor(&self) -> f64 {
        self.variance_floor
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn gating(&self) -> &GatingNetwork {
        &self.gating
    }

    /// Replaces the gate, keeping the experts.
    pub fn with_gating(&self, gating: GatingNetwork) -> Result<Self> {
        MixtureModel::new(self.experts.clone(), gating, self.variance_floor)
    }

    /// Replaces the experts, keeping the gate.
    pub fn with_experts(&self, experts: Vec<Expert>) -> Result<Self> {
        MixtureModel::new(experts, self.gating.clone(), self.variance_floor)
    }

    /// Reorders experts (and their gating vectors): new expert `i` is old
    /// expert `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let k = self.k();
        let mut seen = vec![false; k];
        if order.len() != k || order.iter().any(|&j| j >= k || std::mem::replace(&mut seen[j], true)) {
            return Err(Error::argument(format!("{order:?} is not a permutation of 0..{k}")));
        }
        let experts = order.iter().map(|&j| self.experts[j].clone()).collect();
        let mut params = Array2::zeros(self.gating.params.dim());
        for (i, &j) in order.iter().enumerate() {
            params.row_mut(i).assign(&self.gating.params.row(j));
        }
        MixtureModel::new(experts, GatingNetwork::new(params)?, self.variance_floor)
    }

    /// `g(x)`: probability of choosing each expert.
    pub fn gate_probabilities(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.gating.probabilities(x)
    }

    pub fn expert_log_density(
        &self,
        expert: usize,
        x: ArrayView1<'_, f64>,
        y: ArrayView1<'_, f64>,
    ) -> Result<f64> {
        self.experts
            .get(expert)
            .ok_or_else(|| Error::argument(format!("no expert {expert}")))?
            .log_density(x, y)
    }

    /// Posterior over experts for one (x, y) pair.
    pub fn responsibilities(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_len("input", x.len(), self.input_dim())?;
        check_len("target", y.len(), self.output_dim())?;
        let logits = self.gating.params.dot(&x);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mut joint = Vec::with_capacity(self.k());
        for (e, l) in self.experts.iter().zip(logits.iter()) {
            joint.push(l - lse + e.log_density(x, y)?);
        }
        softmax_in_place(&mut joint);
        Ok(Array1::from(joint))
    }

    /// Gate-weighted mean of the expert predictions.
    pub fn predict_mean(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let g = self.gate_probabilities(x)?;
        let mut out = Array1::zeros(self.output_dim());
        for (e, gj) in self.experts.iter().zip(g.iter()) {
            out.scaled_add(*gj, &e.weights.dot(&x));
        }
        Ok(out)
    }

    /// `predict_mean` for every row of `x`.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_len("input rows", x.ncols(), self.input_dim())?;
        let mut out = Array2::zeros((x.nrows(), self.output_dim()));
        for (i, row) in x.outer_iter().enumerate() {
            out.row_mut(i).assign(&self.predict_mean(row)?);
        }
        Ok(out)
    }

    /// Most probable expert under the gate; ties go to the lowest index.
    pub fn assign_expert(&self, x: ArrayView1<'_, f64>) -> Result<(usize, Array1<f64>)> {
        let g = self.gate_probabilities(x)?;
        let best = argmax(g.as_slice().expect("contiguous"));
        Ok((best, g))
    }

    fn check_batch(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<()> {
        if x.nrows() != y.nrows() {
            return Err(Error::argument(format!(
                "x has {} rows but y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        check_len("input rows", x.ncols(), self.input_dim())?;
        check_len("target rows", y.ncols(), self.output_dim())
    }

    fn log_joint_chunk(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut joint = self.gating.log_probabilities_rows(x);
        for (j, e) in self.experts.iter().enumerate() {
            let dens = e.log_density_rows(x, y);
            let mut col = joint.column_mut(j);
            col += &dens;
        }
        joint
    }

    /// `log g_j(x_n) + log p(y_n | x_n, θ_j)` as an `N×K` matrix.
    pub fn log_joint(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, parallel: bool) -> Result<Array2<f64>> {
        self.check_batch(x, y)?;
        let n = x.nrows();
        let starts: Vec<usize> = (0..n).step_by(ROW_CHUNK).collect();
        let work = |&start: &usize| {
            let end = (start + ROW_CHUNK).min(n);
            self.log_joint_chunk(x.slice(s![start..end, ..]), y.slice(s![start..end, ..]))
        };
        let chunks: Vec<Array2<f64>> = if parallel {
            starts.par_iter().map(work).collect()
        } else {
            starts.iter().map(work).collect()
        };
        let mut out = Array2::zeros((n, self.k()));
        for (start, chunk) in starts.iter().zip(chunks) {
            out.slice_mut(s![*start..*start + chunk.nrows(), ..]).assign(&chunk);
        }
        Ok(out)
    }

    /// Mixture log-likelihood `Σ_n log Σ_j g_j(x_n) p(y_n | x_n, θ_j)`.
    pub fn log_likelihood(&self, data: &Dataset) -> Result<f64> {
        self.log_likelihood_with(data, false)
    }

    pub fn log_likelihood_with(&self, data: &Dataset, parallel: bool) -> Result<f64> {
        let joint = self.log_joint(data.x(), data.y()?, parallel)?;
        Ok(row_log_sum_exp(&joint).sum())
    }
}

/// Row-wise log-sum-exp of an `N×K` matrix.
pub(crate) fn row_log_sum_exp(m: &Array2<f64>) -> Array1<f64> {
    m.map_axis(Axis(1), |row| {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    })
}
