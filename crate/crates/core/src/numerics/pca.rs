use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::linalg::symmetric_eigen;
use crate::error::{Error, Result};

/// Leading principal components of a data matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaResult {
    /// `n_components × n_features`, orthonormal rows.
    pub components: Array2<f64>,
    /// Eigenvalues of the sample covariance for the retained components.
    pub explained_variance: Array1<f64>,
    pub explained_variance_ratio: Array1<f64>,
    /// Ratios for every component, retained or not.
    pub full_explained_variance_ratio: Array1<f64>,
    pub n_components: usize,
    pub mean: Array1<f64>,
}

impl PcaResult {
    /// Projects rows of `data` (centered with the fitted mean) onto the
    /// retained components: `N × n_components`.
    pub fn transform(&self, data: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.mean.len() {
            return Err(Error::argument(format!(
                "expected {} features, got {}",
                self.mean.len(),
                data.ncols()
            )));
        }
        let centered = &data - &self.mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&self.components.t()))
    }

    /// Cumulative ratio over the retained components.
    pub fn explained_variance_achieved(&self) -> f64 {
        self.explained_variance_ratio.sum()
    }
}

/// PCA through eigendecomposition of the sample covariance.
///
/// Keeps the smallest leading set of components whose cumulative explained
/// variance ratio reaches `variance_target`. Each component is signed so its
/// largest-magnitude entry is positive.
pub fn pca(data: ArrayView2<'_, f64>, variance_target: f64) -> Result<PcaResult> {
    let (rows, cols) = data.dim();
    if rows < 2 || cols < 1 {
        return Err(Error::argument(format!(
            "pca needs at least 2 rows and 1 column, got {rows}x{cols}"
        )));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::argument(format!(
            "variance target must lie in (0, 1], got {variance_target}"
        )));
    }
    let mean = data.mean_axis(Axis(0)).expect("rows > 0");
    let centered = &data - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (rows - 1) as f64;
    let total: f64 = cov.diag().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateData("data has zero total variance".into()));
    }

    let (values, vectors) = symmetric_eigen(cov.view())?;
    let values = values.mapv(|v| v.max(0.0));
    let ratio = &values / total;

    let mut keep = cols;
    let mut cumulative = 0.0;
    for (i, r) in ratio.iter().enumerate() {
        cumulative += r;
        if cumulative >= variance_target - 1e-12 {
            keep = i + 1;
            break;
        }
    }

    let mut components = Array2::zeros((keep, cols));
    for c in 0..keep {
        let mut v = vectors.column(c).to_owned();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.mapv_inplace(|x| -x);
        }
        components.row_mut(c).assign(&v);
    }

    Ok(PcaResult {
        components,
        explained_variance: values.slice(ndarray::s![..keep]).to_owned(),
        explained_variance_ratio: ratio.slice(ndarray::s![..keep]).to_owned(),
        full_explained_variance_ratio: ratio,
        n_components: keep,
        mean,
    })
}
