//! Choosing the number of experts: BIC over a range of `k`, and K-fold
//! cross-validation.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{mae, r2_score};
use crate::trainer::{fit, TrainingConfig};

/// Free parameters of a `k`-expert model: `k(mn + m + n)`.
pub fn n_params(k: usize, n: usize, m: usize) -> Result<u128> {
    if k == 0 || n == 0 || m == 0 {
        return Err(Error::argument(format!("k, n, m must be positive: ({k}, {n}, {m})")));
    }
    let (k, n, m) = (k as u128, n as u128, m as u128);
    m.checked_mul(n)
        .and_then(|mn| mn.checked_add(m + n))
        .and_then(|per| per.checked_mul(k))
        .ok_or_else(|| Error::argument("parameter count overflows u128"))
}

/// `d ln N − 2 ln L`.
pub fn bic(d: u128, n_samples: usize, log_likelihood: f64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::argument("bic needs n_samples >= 1"));
    }
    Ok(d as f64 * (n_samples as f64).ln() - 2.0 * log_likelihood)
}

/// Deterministic sub-seed for `(k, restart)` derived from a base seed
/// (SplitMix64 finalizer).
pub fn sub_seed(seed: u64, k: usize, restart: usize) -> u64 {
    let mut z = seed
        .wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((restart as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicEntry {
    pub k: usize,
    pub d: u128,
    pub n_samples: usize,
    /// Best final training log-likelihood over the restarts.
    pub log_likelihood: Option<f64>,
    pub bic: Option<f64>,
    /// `log10(bic)`; absent when `bic <= 0`.
    pub log10_bic: Option<f64>,
    pub seed_of_best: Option<u64>,
    /// Set when every restart for this `k` failed.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicReport {
    pub entries: Vec<BicEntry>,
    pub best_k: usize,
}

impl BicReport {
    pub fn entry(&self, k: usize) -> Option<&BicEntry> {
        self.entries.iter().find(|e| e.k == k)
    }
}

/// Fits every `k` in `k_range` with `restarts` seeds each, keeps the best
/// final log-likelihood per `k`, and picks the `k` with the smallest BIC
/// (ties go to the smaller `k`). BIC uses the training fit.
pub fn select_k(
    data: &Dataset,
    k_range: std::ops::RangeInclusive<usize>,
    base_config: &TrainingConfig,
    restarts: usize,
) -> Result<BicReport> {
    let n_samples = data.n_samples();
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo == 0 || lo > hi || hi > n_samples {
        return Err(Error::argument(format!(
            "k range {lo}..={hi} must lie within 1..={n_samples}"
        )));
    }
    if restarts == 0 {
        return Err(Error::argument("restarts must be >= 1"));
    }
    let (n, m) = (data.input_dim(), data.y()?.ncols());
    let jobs: Vec<(usize, usize)> = k_range
        .clone()
        .flat_map(|k| (0..restarts).map(move |r| (k, r)))
        .collect();
    let run = |&(k, r): &(usize, usize)| {
        let mut config = base_config.clone();
        config.k = k;
        config.seed = sub_seed(base_config.seed, k, r);
        let seed = config.seed;
        (k, seed, fit(data, &config).map(|(_, trace)| trace.final_log_likelihood()))
    };
    let results: Vec<(usize, u64, Result<f64>)> = if base_config.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };

    let mut entries = Vec::with_capacity(hi - lo + 1);
    for k in k_range {
        let d = n_params(k, n, m)?;
        let mut best: Option<(f64, u64)> = None;
        let mut last_error = None;
        for (_, seed, res) in results.iter().filter(|(kk, _, _)| *kk == k) {
            match res {
                Ok(ll) if ll.is_finite() => {
                    if best.is_none_or(|(b, _)| *ll > b) {
                        best = Some((*ll, *seed));
                    }
                }
                Ok(ll) => last_error = Some(format!("non-finite log-likelihood {ll}")),
                Err(e) => last_error = Some(e.to_string()),
            }
        }
        let entry = match best {
            Some((ll, seed)) => {
                let b = bic(d, n_samples, ll)?;
                BicEntry {
                    k,
                    d,
                    n_samples,
                    log_likelihood: Some(ll),
                    bic: Some(b),
                    log10_bic: (b > 0.0).then(|| b.log10()),
                    seed_of_best: Some(seed),
                    error: None,
                }
            }
            None => BicEntry {
                k,
                d,
                n_samples,
                log_likelihood: None,
                bic: None,
                log10_bic: None,
                seed_of_best: None,
                error: last_error,
            },
        };
        entries.push(entry);
    }
    let best_k = entries
        .iter()
        .filter_map(|e| e.bic.map(|b| (e.k, b)))
        .fold(None::<(usize, f64)>, |acc, (k, b)| match acc {
            Some((_, best)) if best <= b => acc,
            _ => Some((k, b)),
        })
        .map(|(k, _)| k)
        .ok_or_else(|| Error::Data("every k in the range failed to train".into()))?;
    Ok(BicReport { entries, best_k })
}

/// Seeded assignment of samples to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    n_folds: usize,
    seed: u64,
    fold_of: Vec<usize>,
}

pub const DEFAULT_FOLDS: usize = 5;

impl FoldPlan {
    /// Shuffles `0..n_samples` and deals positions round-robin, so fold
    /// sizes differ by at most one.
    pub fn new(n_samples: usize, n_folds: usize, seed: u64) -> Result<Self> {
        if n_folds < 2 {
            return Err(Error::argument(format!("n_folds must be >= 2, got {n_folds}")));
        }
        if n_samples < n_folds {
            return Err(Error::argument(format!(
                "cannot split {n_samples} samples into {n_folds} folds"
            )));
        }
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut fold_of = vec![0; n_samples];
        for (pos, &idx) in order.iter().enumerate() {
            fold_of[idx] = pos % n_folds;
        }
        Ok(FoldPlan {
            n_folds,
            seed,
            fold_of,
        })
    }

    pub fn n_folds(&self) -> usize {
        self.n_folds
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_samples(&self) -> usize {
        self.fold_of.len()
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub mae: f64,
    /// Absent for a fold with a single test sample.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub folds: Vec<FoldScore>,
    pub mean_mae: f64,
    /// Mean over the folds that have an R².
    pub mean_r2: Option<f64>,
}

/// Cross-validates an arbitrary fit-and-predict procedure. `fit_predict`
/// receives the training split and the held-out inputs.
pub fn kfold_evaluate_with<F>(data: &Dataset, plan: &FoldPlan, fit_predict: F) -> Result<KFoldReport>
where
    F: Fn(&Dataset, &Dataset) -> Result<Array2<f64>>,
{
    if plan.n_samples() != data.n_samples() {
        return Err(Error::argument(format!(
            "fold plan covers {} samples, data has {}",
            plan.n_samples(),
            data.n_samples()
        )));
    }
    let mut folds = Vec::with_capacity(plan.n_folds());
    for fold in 0..plan.n_folds() {
        let train = data.select(&plan.train_indices(fold));
        let test = data.select(&plan.test_indices(fold));
        let pred = fit_predict(&train, &test)?;
        let y = test.y()?;
        folds.push(FoldScore {
            fold,
            n_train: train.n_samples(),
            n_test: test.n_samples(),
            mae: mae(y, pred.view())?,
            r2: if test.n_samples() >= 2 { Some(r2_score(y, pred.view())?) } else { None },
        });
    }
    let mean_mae = folds.iter().map(|f| f.mae).sum::<f64>() / folds.len() as f64;
    let r2s: Vec<f64> = folds.iter().filter_map(|f| f.r2).collect();
    let mean_r2 = (!r2s.is_empty()).then(|| r2s.iter().sum::<f64>() / r2s.len() as f64);
    Ok(KFoldReport {
        folds,
        mean_mae,
        mean_r2,
    })
}

/// Trains the mixture on each fold complement and scores the held-out fold.
pub fn kfold_evaluate(data: &Dataset, config: &TrainingConfig, plan: &FoldPlan) -> Result<KFoldReport> {
    kfold_evaluate_with(data, plan, |train, test| {
        let (model, _) = fit(train, config)?;
        model.predict(test.x())
    })
}
