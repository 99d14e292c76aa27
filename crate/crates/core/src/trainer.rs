//! Generalized EM training.
//!
//! One iteration is an E-step (responsibilities under the current model), a
//! closed-form update of every expert's weights and variances, and a
//! safeguarded gradient-ascent update of the gating vectors. The expert
//! update maximizes the expected complete-data log-likelihood exactly and the
//! gating update never decreases it, so the mixture log-likelihood is
//! non-decreasing from one iteration to the next.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{row_log_sum_exp, Expert, GatingNetwork, MixtureModel, VARIANCE_FLOOR};
use crate::numerics::{kmeans, weighted_least_squares_multi, Metric, WEIGHT_FLOOR};

/// Maximum number of step halvings tried per gating ascent step.
pub const MAX_STEP_HALVINGS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Seeded k-means on the inputs; one least-squares expert per cluster.
    #[default]
    KmeansPartition,
    /// Small random weights, per-dimension target variances.
    Random,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans_partition" | "kmeans" => Ok(InitMode::KmeansPartition),
            "random" => Ok(InitMode::Random),
            other => Err(Error::argument(format!("unknown init mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once `|ΔL| / (1 + |L|)` drops below this. Zero runs the full
    /// `max_iters` budget.
    pub tol: f64,
    /// Gating gradient step size.
    pub eta: f64,
    /// Gradient steps on the gating vectors per M-step.
    pub gating_steps: usize,
    pub seed: u64,
    pub variance_floor: f64,
    pub init: InitMode,
    /// Evaluate samples and experts on the rayon pool. Results are identical
    /// either way.
    #[serde(default)]
    pub parallel: bool,
}

impl TrainingConfig {
    pub fn new(k: usize) -> Self {
        TrainingConfig {
            k,
            max_iters: 200,
            tol: 1e-10,
            eta: 0.1,
            gating_steps: 5,
            seed: 0,
            variance_floor: VARIANCE_FLOOR,
            init: InitMode::KmeansPartition,
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::argument(msg));
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.max_iters == 0 {
            return bad("max_iters must be >= 1".into());
        }
        if !(self.tol >= 0.0) || !self.tol.is_finite() {
            return bad(format!("tol must be finite and >= 0, got {}", self.tol));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if self.gating_steps == 0 {
            return bad("gating_steps must be >= 1".into());
        }
        if !(self.variance_floor > 0.0) {
            return bad(format!("variance_floor must be > 0, got {}", self.variance_floor));
        }
        Ok(())
    }
}

/// An expert whose responsibility mass vanished and was reinitialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmptyExpertEvent {
    pub iteration: usize,
    pub expert: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Entry 0 is the initial model; entry `p` follows iteration `p`.
    pub log_likelihoods: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    pub empty_expert_events: Vec<EmptyExpertEvent>,
}

impl TrainingTrace {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihoods.last().expect("trace always holds the initial value")
    }

    /// Largest single-iteration decrease, ignoring iterations in which an
    /// expert was reinitialized (those restart part of the model).
    pub fn max_decrease(&self) -> f64 {
        self.log_likelihoods
            .windows(2)
            .enumerate()
            .filter(|(p, _)| !self.empty_expert_events.iter().any(|e| e.iteration == p + 1))
            .map(|(_, w)| w[0] - w[1])
            .fold(0.0, f64::max)
    }

    pub fn is_monotone(&self, slack: f64) -> bool {
        self.max_decrease() <= slack
    }
}

fn check_data(data: &Dataset, k: usize) -> Result<()> {
    let n_samples = data.n_samples();
    data.y()?;
    if n_samples < k {
        return Err(Error::argument(format!(
            "need at least k={k} samples, got {n_samples}"
        )));
    }
    Ok(())
}

/// Per-column weighted mean of squared residuals `Σ h r² / Σ h`.
fn weighted_residual_variance(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    weights: &Array2<f64>,
    h: ndarray::ArrayView1<'_, f64>,
) -> Array1<f64> {
    let residual = &y - &x.dot(&weights.t());
    let total = h.sum();
    let mut out = Array1::zeros(y.ncols());
    for (r, hn) in residual.outer_iter().zip(h.iter()) {
        out.zip_mut_with(&r, |acc, v| *acc += hn * v * v);
    }
    out / total
}

/// Builds the starting model. Deterministic given `config.seed`.
pub fn initialize(data: &Dataset, config: &TrainingConfig) -> Result<MixtureModel> {
    config.validate()?;
    check_data(data, config.k)?;
    let x = data.x();
    let y = data.y()?;
    let (n_samples, n) = x.dim();
    let m = y.ncols();
    let floor = config.variance_floor;

    let experts = match config.init {
        InitMode::KmeansPartition => {
            let clusters = kmeans(x, config.k, Metric::Euclidean, config.seed, 100)?;
            let mut experts = Vec::with_capacity(config.k);
            for j in 0..config.k {
                let h = Array1::from_iter(
                    clusters
                        .assignments
                        .iter()
                        .map(|&c| if c == j { 1.0 } else { 0.0 }),
                );
                let h = if h.sum() > 0.0 { h } else { Array1::ones(n_samples) };
                let (w, _) = weighted_least_squares_multi(x, y, h.view(), 0.0)
                    .or_else(|_| weighted_least_squares_multi(x, y, Array1::ones(n_samples).view(), 0.0))?;
                let var = weighted_residual_variance(x, y, &w, h.view());
                experts.push(Expert::new(w, var, floor)?);
            }
            experts
        }
        InitMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let var = y.var_axis(Axis(0), 0.0);
            (0..config.k)
                .map(|_| {
                    let w = Array2::from_shape_fn((m, n), |_| rng.random_range(-0.1..0.1));
                    Expert::new(w, var.clone(), floor)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    MixtureModel::new(experts, GatingNetwork::zeros(config.k, n), floor)
}

/// Responsibility matrix from a log-joint matrix, normalized row by row.
fn normalize_rows(mut joint: Array2<f64>, lse: &Array1<f64>) -> Array2<f64> {
    for (mut row, l) in joint.outer_iter_mut().zip(lse.iter()) {
        row.mapv_inplace(|v| (v - l).exp());
        let s = row.sum();
        row /= s;
    }
    joint
}

/// `N×K` responsibilities under `model`.
pub fn e_step(model: &MixtureModel, data: &Dataset) -> Result<Array2<f64>> {
    e_step_with(model, data, false).map(|(h, _)| h)
}

/// Responsibilities and the log-likelihood they were computed at.
fn e_step_with(model: &MixtureModel, data: &Dataset, parallel: bool) -> Result<(Array2<f64>, f64)> {
    let joint = model.log_joint(data.x(), data.y()?, parallel)?;
    let lse = row_log_sum_exp(&joint);
    let ll = lse.sum();
    Ok((normalize_rows(joint, &lse), ll))
}

fn check_responsibilities(h: ArrayView2<'_, f64>, n_samples: usize, k: usize) -> Result<()> {
    if h.dim() != (n_samples, k) {
        return Err(Error::argument(format!(
            "responsibilities are {:?}, expected {:?}",
            h.dim(),
            (n_samples, k)
        )));
    }
    Ok(())
}

/// Experts after the closed-form update, with the indices of experts that
/// had to be reinitialized.
#[derive(Debug, Clone)]
pub struct ExpertUpdate {
    pub experts: Vec<Expert>,
    pub reinitialized: Vec<usize>,
}

/// Closed-form M-step for every expert.
///
/// For expert `j`, `A_j = Σ h_nj x_n x_nᵀ` is factored once and solved for
/// every output row; variances are the responsibility-weighted mean squared
/// residuals under the new weights, floored. An expert with total weight at
/// or below the weight floor is refit on the `max(n, N/(10K))` samples the
/// other experts reconstruct worst.
pub fn m_step_experts(data: &Dataset, h: ArrayView2<'_, f64>, config: &TrainingConfig) -> Result<ExpertUpdate> {
    let x = data.x();
    let y = data.y()?;
    let k = h.ncols();
    check_responsibilities(h, data.n_samples(), k)?;
    let floor = config.variance_floor;

    let fit_one = |j: usize| -> Result<Option<Expert>> {
        let hj = h.column(j);
        if hj.sum() <= WEIGHT_FLOOR {
            return Ok(None);
        }
        match weighted_least_squares_multi(x, y, hj, 0.0) {
            Ok((w, _)) => {
                let var = weighted_residual_variance(x, y, &w, hj);
                Ok(Some(Expert::new(w, var, floor)?))
            }
            Err(Error::Singular(_)) | Err(Error::EmptyExpert(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let fitted: Vec<Option<Expert>> = if config.parallel {
        (0..k).into_par_iter().map(fit_one).collect::<Result<_>>()?
    } else {
        (0..k).map(fit_one).collect::<Result<_>>()?
    };

    let reinitialized: Vec<usize> = (0..k).filter(|&j| fitted[j].is_none()).collect();
    if reinitialized.is_empty() {
        return Ok(ExpertUpdate {
            experts: fitted.into_iter().map(Option::unwrap).collect(),
            reinitialized,
        });
    }
    if reinitialized.len() == k {
        return Err(Error::Singular("every expert collapsed in the M-step".into()));
    }

    // Squared reconstruction error under the best surviving expert.
    let n_samples = data.n_samples();
    let mut worst = vec![f64::INFINITY; n_samples];
    for e in fitted.iter().flatten() {
        let residual = &y - &x.dot(&e.weights().t());
        for (s, r) in residual.outer_iter().enumerate() {
            worst[s] = worst[s].min(r.dot(&r));
        }
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.sort_by(|&a, &b| worst[b].total_cmp(&worst[a]).then(a.cmp(&b)));
    let budget = x.ncols().max(n_samples / (10 * k)).clamp(1, n_samples);
    let mut indicator = Array1::zeros(n_samples);
    for &s in &order[..budget] {
        indicator[s] = 1.0;
    }
    let (w, _) = weighted_least_squares_multi(x, y, indicator.view(), 0.0)?;
    let var = weighted_residual_variance(x, y, &w, indicator.view());
    let fresh = Expert::new(w, var, floor)?;

    let experts = fitted
        .into_iter()
        .map(|e| e.unwrap_or_else(|| fresh.clone()))
        .collect();
    Ok(ExpertUpdate {
        experts,
        reinitialized,
    })
}

/// Gating objective and gate probabilities in one pass over the rows; each
/// row costs `K` exponentials and one logarithm.
fn gate_pass(params: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, h: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let (k, n) = params.dim();
    let rows = h.nrows();
    let params = params.as_standard_layout();
    let x = x.as_standard_layout();
    let h = h.as_standard_layout();
    let (v, x, h) = (params.as_slice().unwrap(), x.as_slice().unwrap(), h.as_slice().unwrap());
    let mut probs = vec![0.0; rows * k];
    let mut objective = 0.0;
    let mut scores = vec![0.0; k];
    for r in 0..rows {
        let xn = &x[r * n..(r + 1) * n];
        for (j, s) in scores.iter_mut().enumerate() {
            *s = v[j * n..(j + 1) * n].iter().zip(xn).map(|(a, b)| a * b).sum();
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let gn = &mut probs[r * k..(r + 1) * k];
        let mut total = 0.0;
        for (g, s) in gn.iter_mut().zip(&scores) {
            *g = (s - max).exp();
            total += *g;
        }
        let lse = max + total.ln();
        for ((g, s), hj) in gn.iter_mut().zip(&scores).zip(&h[r * k..(r + 1) * k]) {
            *g /= total;
            objective += hj * (s - lse);
        }
    }
    let probs = Array2::from_shape_vec((rows, k), probs).expect("rows × k buffer");
    (objective, probs)
}

fn gradient_from(probs: &Array2<f64>, x: ArrayView2<'_, f64>, h: ArrayView2<'_, f64>) -> Array2<f64> {
    (&h - probs).t().dot(&x)
}

/// Gating part of the Q function: `Σ_n Σ_j h_nj log g_j(x_n)`.
pub fn gating_objective(params: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, h: ArrayView2<'_, f64>) -> f64 {
    gate_pass(params, x, h).0
}

/// `∂/∂v_j` of the gating objective: `Σ_n (h_nj − g_j(x_n)) x_n`, as `K×n`.
pub fn gating_gradient(params: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, h: ArrayView2<'_, f64>) -> Array2<f64> {
    gradient_from(&gate_pass(params, x, h).1, x, h)
}

/// Safeguarded gradient ascent on the gating vectors.
///
/// The first of the `gating_steps` steps tries step size `eta`; a step that
/// would decrease the gating objective is retried at half the size, up to
/// [`MAX_STEP_HALVINGS`] times. Later steps continue from the last accepted
/// size. If no size works the parameters stay where they are.
pub fn m_step_gating(
    model: &MixtureModel,
    data: &Dataset,
    h: ArrayView2<'_, f64>,
    config: &TrainingConfig,
) -> Result<GatingNetwork> {
    let x = data.x();
    check_responsibilities(h, data.n_samples(), model.k())?;
    let mut params = model.gating().params().to_owned();
    let (mut current, mut probs) = gate_pass(params.view(), x, h);
    let mut step = config.eta;
    for _ in 0..config.gating_steps {
        let grad = gradient_from(&probs, x, h);
        if grad.iter().all(|g| *g == 0.0) {
            break;
        }
        let mut accepted = false;
        for _ in 0..=MAX_STEP_HALVINGS {
            let candidate = &params + &(&grad * step);
            if candidate.iter().all(|v| v.is_finite()) {
                let (value, candidate_probs) = gate_pass(candidate.view(), x, h);
                if value >= current {
                    params = candidate;
                    current = value;
                    probs = candidate_probs;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    GatingNetwork::new(params)
}

/// `Q(Θ_new | Θ_old) = Σ_n Σ_j h_nj [log g_j(x_n) + log p(y_n | x_n, θ_j)]`
/// with `h` computed from `model_old`.
pub fn evaluate_q(model_new: &MixtureModel, model_old: &MixtureModel, data: &Dataset) -> Result<f64> {
    if model_new.k() != model_old.k() {
        return Err(Error::argument("models have different numbers of experts"));
    }
    let h = e_step(model_old, data)?;
    evaluate_q_with(model_new, data, h.view())
}

/// Q function for explicitly supplied responsibilities.
pub fn evaluate_q_with(model: &MixtureModel, data: &Dataset, h: ArrayView2<'_, f64>) -> Result<f64> {
    check_responsibilities(h, data.n_samples(), model.k())?;
    let joint = model.log_joint(data.x(), data.y()?, false)?;
    Ok((&joint * &h).sum())
}

/// Initializes from `config` and runs EM.
pub fn fit(data: &Dataset, config: &TrainingConfig) -> Result<(MixtureModel, TrainingTrace)> {
    let init = initialize(data, config)?;
    fit_from(init, data, config)
}

/// Runs EM from a given starting model.
pub fn fit_from(
    init: MixtureModel,
    data: &Dataset,
    config: &TrainingConfig,
) -> Result<(MixtureModel, TrainingTrace)> {
    config.validate()?;
    check_data(data, init.k())?;
    if init.input_dim() != data.input_dim() || Some(init.output_dim()) != data.output_dim() {
        return Err(Error::argument("initial model dimensions do not match the data"));
    }
    let mut model = init;
    let (mut h, mut ll) = e_step_with(&model, data, config.parallel)?;
    let mut trace = TrainingTrace {
        log_likelihoods: vec![ll],
        iterations_run: 0,
        converged: false,
        empty_expert_events: Vec::new(),
    };

    for iteration in 1..=config.max_iters {
        let update = m_step_experts(data, h.view(), config)?;
        for &expert in &update.reinitialized {
            trace.empty_expert_events.push(EmptyExpertEvent { iteration, expert });
        }
        let with_experts = model.with_experts(update.experts)?;
        let gating = m_step_gating(&with_experts, data, h.view(), config)?;
        model = with_experts.with_gating(gating)?;

        let (next_h, next_ll) = e_step_with(&model, data, config.parallel)?;
        trace.log_likelihoods.push(next_ll);
        trace.iterations_run = iteration;
        let change = (next_ll - ll).abs() / (1.0 + ll.abs());
        h = next_h;
        ll = next_ll;
        if change < config.tol && update.reinitialized.is_empty() {
            trace.converged = true;
            break;
        }
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use ndarray::{array, s};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, n_samples: usize, n: usize, k: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let params = Array2::from_shape_fn((k, n), |_| rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_fn((n_samples, n), |_| rng.random_range(-2.0..2.0));
        let mut h = Array2::from_shape_fn((n_samples, k), |_| rng.random_range(0.01..1.0));
        for mut row in h.outer_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        (params, x, h)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let n = rng.random_range(1..=6);
            let k = rng.random_range(1..=4);
            let n_samples = rng.random_range(1..=50);
            let (params, x, h) = random_instance(&mut rng, n_samples, n, k);
            let grad = gating_gradient(params.view(), x.view(), h.view());
            let eps = 1e-5;
            for j in 0..k {
                for c in 0..n {
                    let mut plus = params.clone();
                    let mut minus = params.clone();
                    plus[[j, c]] += eps;
                    minus[[j, c]] -= eps;
                    let fd = (gating_objective(plus.view(), x.view(), h.view())
                        - gating_objective(minus.view(), x.view(), h.view()))
                        / (2.0 * eps);
                    let denom = grad[[j, c]].abs().max(fd.abs()).max(1e-3);
                    assert!((grad[[j, c]] - fd).abs() / denom <= 1e-5, "{} vs {fd}", grad[[j, c]]);
                }
            }
        }
    }

    #[test]
    fn stationary_gate_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (params, x, _) = random_instance(&mut rng, 20, 3, 3);
        let gate = GatingNetwork::new(params.clone()).unwrap();
        let h = gate.log_probabilities_rows(x.view()).mapv(f64::exp);
        let grad = gating_gradient(params.view(), x.view(), h.view());
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn single_sample_first_step() {
        // K=2, n=1, h=(1,0), v=0: v1 += η·0.5·x, v2 −= η·0.5·x
        let x = array![[2.0]];
        let y = array![[0.0]];
        let data = Dataset::new(x, y).unwrap();
        let experts = vec![
            Expert::new(array![[0.0]], array![1.0], VARIANCE_FLOOR).unwrap(),
            Expert::new(array![[0.0]], array![1.0], VARIANCE_FLOOR).unwrap(),
        ];
        let model = MixtureModel::new(experts, GatingNetwork::zeros(2, 1), VARIANCE_FLOOR).unwrap();
        let mut config = TrainingConfig::new(2);
        config.gating_steps = 1;
        config.eta = 0.1;
        let h = array![[1.0, 0.0]];
        let gate = m_step_gating(&model, &data, h.view(), &config).unwrap();
        assert!((gate.params()[[0, 0]] - 0.1).abs() < 1e-15);
        assert!((gate.params()[[1, 0]] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn gating_objective_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (params, x, h) = random_instance(&mut rng, 40, 3, 3);
            let y = Array2::zeros((40, 1));
            let data = Dataset::new(x.clone(), y).unwrap();
            let experts = (0..3)
                .map(|_| Expert::new(Array2::zeros((1, 3)), array![1.0], VARIANCE_FLOOR).unwrap())
                .collect();
            let model = MixtureModel::new(experts, GatingNetwork::new(params.clone()).unwrap(), VARIANCE_FLOOR)
                .unwrap();
            let mut config = TrainingConfig::new(3);
            config.eta = 50.0;
            let before = gating_objective(params.view(), x.view(), h.view());
            let gate = m_step_gating(&model, &data, h.view(), &config).unwrap();
            let after = gating_objective(gate.params(), x.view(), h.view());
            assert!(after >= before);
        }
    }

    fn linear_data(n_samples: usize, seed: u64) -> (Dataset, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Array2::from_shape_fn((2, 3), |_| rng.random_range(-2.0..2.0));
        let x = Array2::from_shape_fn((n_samples, 3), |_| rng.random_range(-1.0..1.0));
        let y = x.dot(&w.t());
        (Dataset::new(x, y).unwrap(), w)
    }

    #[test]
    fn single_cluster_init_is_global_fit() {
        let (data, w) = linear_data(30, 2);
        let model = initialize(&data, &TrainingConfig::new(1)).unwrap();
        let fitted = model.experts()[0].weights();
        assert!(fitted.iter().zip(w.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
        assert!(model.gating().params().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn noiseless_init_shared_map() {
        let (data, w) = linear_data(60, 3);
        let model = initialize(&data, &TrainingConfig::new(3)).unwrap();
        for e in model.experts() {
            assert!(e.weights().iter().zip(w.iter()).all(|(a, b)| (a - b).abs() < 1e-8));
        }
    }

    #[test]
    fn separated_regimes_init_prefers_correct_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n_samples = 200;
        let mut x = Array2::zeros((n_samples, 2));
        let mut y = Array2::zeros((n_samples, 1));
        let mut labels = Vec::new();
        for i in 0..n_samples {
            let regime = i % 2;
            let center = if regime == 0 { -3.0 } else { 3.0 };
            x[[i, 0]] = center + rng.random_range(-1.0..1.0);
            x[[i, 1]] = 1.0;
            let slope = if regime == 0 { 2.0 } else { -1.5 };
            y[[i, 0]] = slope * x[[i, 0]] + 0.05 * rng.random_range(-1.0..1.0);
            labels.push(regime);
        }
        let data = Dataset::new(x, y).unwrap();
        let model = initialize(&data, &TrainingConfig::new(2)).unwrap();
        let h = e_step(&model, &data).unwrap();
        // match experts to regimes by the first sample of regime 0
        let first = crate::numerics::argmax(h.row(0).as_slice().unwrap());
        let correct = (0..n_samples)
            .filter(|&i| {
                let pick = crate::numerics::argmax(h.row(i).as_slice().unwrap());
                (pick == first) == (labels[i] == 0)
            })
            .count();
        assert!(correct as f64 > 0.9 * n_samples as f64, "{correct}");
    }

    #[test]
    fn init_errors_and_determinism() {
        let (data, _) = linear_data(3, 4);
        assert!(initialize(&data, &TrainingConfig::new(4)).is_err());
        let (data, _) = linear_data(40, 4);
        for init in [InitMode::KmeansPartition, InitMode::Random] {
            let mut c = TrainingConfig::new(3);
            c.init = init;
            c.seed = 17;
            assert_eq!(initialize(&data, &c).unwrap(), initialize(&data, &c).unwrap());
        }
    }

    #[test]
    fn e_step_cases() {
        let (data, _) = linear_data(10, 5);
        let one = initialize(&data, &TrainingConfig::new(1)).unwrap();
        let h = e_step(&one, &data).unwrap();
        assert!(h.iter().all(|v| *v == 1.0));

        let e = Expert::new(Array2::zeros((2, 3)), array![1.0, 1.0], VARIANCE_FLOOR).unwrap();
        let same = MixtureModel::new(vec![e.clone(), e.clone(), e], GatingNetwork::zeros(3, 3), VARIANCE_FLOOR)
            .unwrap();
        let h = e_step(&same, &data).unwrap();
        assert!(h.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn e_step_rows_match_responsibilities() {
        let s = generate_synthetic(&SyntheticSpec {
            k: 2,
            n: 1,
            m: 1,
            n_samples: 3,
            gating_scale: 1.0,
            noise_std: 0.5,
            seed: 3,
        })
        .unwrap();
        let h = e_step(&s.truth, &s.data).unwrap();
        for i in 0..3 {
            let direct = s
                .truth
                .responsibilities(s.data.x().row(i), s.data.y().unwrap().row(i))
                .unwrap();
            for j in 0..2 {
                assert!((h[[i, j]] - direct[j]).abs() < 1e-12);
            }
            assert!((h.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn m_step_exact_fit() {
        let x = array![[1.0], [2.0], [-1.0], [0.5]];
        let y = &x * 2.0;
        let data = Dataset::new(x, y).unwrap();
        let h = Array2::ones((4, 1));
        let u = m_step_experts(&data, h.view(), &TrainingConfig::new(1)).unwrap();
        assert!((u.experts[0].weights()[[0, 0]] - 2.0).abs() < 1e-14);
        assert_eq!(u.experts[0].variances()[0], VARIANCE_FLOOR);
    }

    #[test]
    fn m_step_indicator_weights_give_halfwise_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Array2::from_shape_fn((20, 2), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((20, 2), |_| rng.random_range(-1.0..1.0));
        let data = Dataset::new(x.clone(), y.clone()).unwrap();
        let mut h = Array2::zeros((20, 2));
        h.slice_mut(s![..10, 0]).fill(1.0);
        h.slice_mut(s![10.., 1]).fill(1.0);
        let u = m_step_experts(&data, h.view(), &TrainingConfig::new(2)).unwrap();
        for (j, range) in [(0, 0..10), (1, 10..20)] {
            let rows: Vec<usize> = range.collect();
            let half = data.select(&rows);
            let ols = crate::baseline::ridge_fit(&half, 0.0).unwrap();
            let d = &ols.weights() - &u.experts[j].weights();
            assert!(d.iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn m_step_matches_weighted_sse_minimizer() {
        // oracle: gradient descent on Σ h (y_i − wᵀx)², independent of the normal equations
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Array2::from_shape_fn((30, 3), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((30, 2), |_| rng.random_range(-1.0..1.0));
        let h = Array2::from_shape_fn((30, 1), |_| rng.random_range(0.0..1.0));
        let data = Dataset::new(x.clone(), y.clone()).unwrap();
        let u = m_step_experts(&data, h.view(), &TrainingConfig::new(1)).unwrap();
        for i in 0..2 {
            let mut w = Array1::<f64>::zeros(3);
            for _ in 0..100_000 {
                let r = x.dot(&w) - y.column(i);
                let grad = x.t().dot(&(&r * &h.column(0))) * 2.0;
                w.scaled_add(-0.02, &grad);
            }
            for c in 0..3 {
                assert!((u.experts[0].weights()[[i, c]] - w[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_expert_is_reinitialized() {
        let (data, _) = linear_data(40, 7);
        let mut h = Array2::zeros((40, 2));
        h.column_mut(0).fill(1.0);
        let u = m_step_experts(&data, h.view(), &TrainingConfig::new(2)).unwrap();
        assert_eq!(u.reinitialized, vec![1]);
        assert_eq!(u.experts.len(), 2);
    }

    #[test]
    fn q_reduces_to_likelihood_for_one_expert() {
        let (data, _) = linear_data(25, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noisy = Dataset::new(
            data.x().to_owned(),
            data.y().unwrap().mapv(|v| v + rng.random_range(-0.3..0.3)),
        )
        .unwrap();
        let model = initialize(&noisy, &TrainingConfig::new(1)).unwrap();
        let q = evaluate_q(&model, &model, &noisy).unwrap();
        let ll = model.log_likelihood(&noisy).unwrap();
        assert!((q - ll).abs() < 1e-10 * ll.abs().max(1.0));
    }

    #[test]
    fn q_matches_expanded_sum() {
        let s = generate_synthetic(&SyntheticSpec {
            k: 2,
            n: 2,
            m: 2,
            n_samples: 3,
            gating_scale: 1.0,
            noise_std: 0.7,
            seed: 9,
        })
        .unwrap();
        let old = s.truth.clone();
        let new = initialize(&s.data, &TrainingConfig::new(2)).unwrap();
        let q = evaluate_q(&new, &old, &s.data).unwrap();
        let mut expected = 0.0;
        for i in 0..3 {
            let x = s.data.x().row(i).to_owned();
            let y = s.data.y().unwrap().row(i).to_owned();
            let h = old.responsibilities(x.view(), y.view()).unwrap();
            let g = new.gate_probabilities(x.view()).unwrap();
            for j in 0..2 {
                expected += h[j] * (g[j].ln() + new.expert_log_density(j, x.view(), y.view()).unwrap());
            }
        }
        assert!((q - expected).abs() < 1e-11 * expected.abs().max(1.0));
    }

    #[test]
    fn one_m_step_increases_q() {
        let s = generate_synthetic(&SyntheticSpec {
            k: 3,
            n: 3,
            m: 2,
            n_samples: 300,
            gating_scale: 2.0,
            noise_std: 0.3,
            seed: 4,
        })
        .unwrap();
        let config = TrainingConfig::new(3);
        let old = initialize(&s.data, &config).unwrap();
        let h = e_step(&old, &s.data).unwrap();
        let experts = m_step_experts(&s.data, h.view(), &config).unwrap().experts;
        let mid = old.with_experts(experts).unwrap();
        let gate = m_step_gating(&mid, &s.data, h.view(), &config).unwrap();
        let new = mid.with_gating(gate).unwrap();
        let q_old = evaluate_q_with(&old, &s.data, h.view()).unwrap();
        let q_new = evaluate_q_with(&new, &s.data, h.view()).unwrap();
        assert!(q_new >= q_old);
    }

    #[test]
    fn single_expert_noiseless_converges_fast() {
        let (data, w) = linear_data(50, 11);
        let mut config = TrainingConfig::new(1);
        config.init = InitMode::Random;
        let (model, trace) = fit(&data, &config).unwrap();
        assert!(trace.converged);
        assert!(trace.iterations_run <= 3, "{}", trace.iterations_run);
        let fitted = model.experts()[0].weights();
        assert!(fitted.iter().zip(w.iter()).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn invalid_config() {
        let (data, _) = linear_data(10, 1);
        for mutate in [
            (|c: &mut TrainingConfig| c.max_iters = 0) as fn(&mut TrainingConfig),
            |c| c.tol = -1.0,
            |c| c.eta = -1.0,
            |c| c.gating_steps = 0,
            |c| c.k = 0,
        ] {
            let mut c = TrainingConfig::new(2);
            mutate(&mut c);
            assert!(matches!(fit(&data, &c), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn serial_and_parallel_agree_bitwise() {
        let s = generate_synthetic(&SyntheticSpec {
            k: 3,
            n: 4,
            m: 3,
            n_samples: 700,
            gating_scale: 3.0,
            noise_std: 0.1,
            seed: 2,
        })
        .unwrap();
        let mut config = TrainingConfig::new(3);
        config.max_iters = 20;
        let (a, ta) = fit(&s.data, &config).unwrap();
        config.parallel = true;
        let (b, tb) = fit(&s.data, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn permutation_equivariance() {
        let s = generate_synthetic(&SyntheticSpec {
            k: 3,
            n: 3,
            m: 2,
            n_samples: 400,
            gating_scale: 2.0,
            noise_std: 0.2,
            seed: 6,
        })
        .unwrap();
        let mut config = TrainingConfig::new(3);
        config.max_iters = 30;
        let init = initialize(&s.data, &config).unwrap();
        let order = [2, 0, 1];
        let (a, _) = fit_from(init.clone(), &s.data, &config).unwrap();
        let (b, _) = fit_from(init.permuted(&order).unwrap(), &s.data, &config).unwrap();
        let a_perm = a.permuted(&order).unwrap();
        for (ea, eb) in a_perm.experts().iter().zip(b.experts()) {
            let dw = &ea.weights() - &eb.weights();
            assert!(dw.iter().all(|v| v.abs() < 1e-6));
        }
        let dg = &a_perm.gating().params() - &b.gating().params();
        assert!(dg.iter().all(|v| v.abs() < 1e-6));
    }
}
