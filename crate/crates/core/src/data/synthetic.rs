use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::model::{Expert, GatingNetwork, MixtureModel, VARIANCE_FLOOR};
use crate::numerics::softmax_in_place;

/// Parameters of a synthetic mixture-of-experts dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub n_samples: usize,
    /// Scale of the true gating vectors; 0 gives uniform gates.
    pub gating_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 || self.m == 0 || self.n_samples == 0 {
            return Err(Error::argument(format!(
                "k, n, m and n_samples must be positive: {self:?}"
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::argument(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !self.gating_scale.is_finite() {
            return Err(Error::argument("gating_scale must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub data: Dataset,
    /// Generating parameters; variances are `noise_std²` raised to the floor.
    pub truth: MixtureModel,
    /// Expert that produced each sample.
    pub labels: Vec<usize>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws a dataset from a known mixture: `x ~ N(0, I)`, expert label from the
/// softmax gate at `x`, `y = W*_j x + noise_std·ε`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let SyntheticSpec { k, n, m, n_samples, .. } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let gating = Array2::from_shape_fn((k, n), |_| spec.gating_scale * normal(&mut rng));
    let weights: Vec<Array2<f64>> = (0..k)
        .map(|_| Array2::from_shape_fn((m, n), |_| normal(&mut rng)))
        .collect();

    let mut x = Array2::zeros((n_samples, n));
    let mut y = Array2::zeros((n_samples, m));
    let mut labels = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let xs = Array1::from_shape_fn(n, |_| normal(&mut rng));
        let mut gates = gating.dot(&xs).to_vec();
        softmax_in_place(&mut gates);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = k - 1;
        for (j, g) in gates.iter().enumerate() {
            acc += g;
            if u < acc {
                label = j;
                break;
            }
        }
        let mut ys = weights[label].dot(&xs);
        for v in ys.iter_mut() {
            *v += spec.noise_std * normal(&mut rng);
        }
        x.row_mut(s).assign(&xs);
        y.row_mut(s).assign(&ys);
        labels.push(label);
    }

    let variance = spec.noise_std * spec.noise_std;
    let experts = weights
        .into_iter()
        .map(|w| Expert::new(w, Array1::from_elem(m, variance), VARIANCE_FLOOR))
        .collect::<Result<Vec<_>>>()?;
    let truth = MixtureModel::new(experts, GatingNetwork::new(gating)?, VARIANCE_FLOOR)?;
    Ok(SyntheticData {
        data: Dataset::new(x, y)?,
        truth,
        labels,
    })
}
