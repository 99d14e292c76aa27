//! Post-training attribution: which samples each expert owns, which output
//! regions matter for each expert, and k-means clustering of stimuli.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{AtlasMap, Dataset};
use crate::error::{Error, Result};
use crate::model::MixtureModel;
use crate::numerics::{argmax, kmeans, pca, KMeansResult, Metric};

pub const DEFAULT_VARIANCE_TARGET: f64 = 0.85;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AssignMode {
    /// Gate probabilities `g(x)`; needs inputs only.
    #[default]
    Gate,
    /// Posterior responsibilities `h(x, y)`; needs targets.
    Responsibility,
}

impl std::str::FromStr for AssignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(AssignMode::Gate),
            "responsibility" => Ok(AssignMode::Responsibility),
            other => Err(Error::argument(format!("unknown assignment mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub id: String,
    pub expert: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAssignmentTable {
    pub mode: AssignMode,
    /// One row per sample, in dataset order.
    pub rows: Vec<Assignment>,
    /// Sample indices owned by each expert, ascending.
    pub members: Vec<Vec<usize>>,
}

/// Assigns every sample to its most probable expert (ties to the lowest
/// index).
pub fn assign_samples(model: &MixtureModel, data: &Dataset, mode: AssignMode) -> Result<ExpertAssignmentTable> {
    if data.input_dim() != model.input_dim() {
        return Err(Error::argument(format!(
            "data has {} input columns, model expects {}",
            data.input_dim(),
            model.input_dim()
        )));
    }
    let y = match mode {
        AssignMode::Gate => None,
        AssignMode::Responsibility => Some(data.y().map_err(|_| {
            Error::argument("responsibility mode needs targets")
        })?),
    };
    let mut rows = Vec::with_capacity(data.n_samples());
    let mut members = vec![Vec::new(); model.k()];
    for (i, x) in data.x().outer_iter().enumerate() {
        let probs = match y {
            None => model.gate_probabilities(x)?,
            Some(y) => model.responsibilities(x, y.row(i))?,
        };
        let probs = probs.to_vec();
        let expert = argmax(&probs);
        members[expert].push(i);
        rows.push(Assignment {
            id: data.id(i),
            expert,
            probabilities: probs,
        });
    }
    Ok(ExpertAssignmentTable { mode, rows, members })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "sum" => Ok(Aggregation::Sum),
            other => Err(Error::argument(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// Collapses output vectors to one value per atlas region. Regions with no
/// dimensions get 0.
pub fn aggregate_regions(y: ArrayView2<'_, f64>, atlas: &AtlasMap, aggregation: Aggregation) -> Result<Array2<f64>> {
    if y.ncols() != atlas.n_dims() {
        return Err(Error::argument(format!(
            "targets have {} columns, atlas covers {} dimensions",
            y.ncols(),
            atlas.n_dims()
        )));
    }
    let sizes = atlas.region_sizes();
    let mut out = Array2::zeros((y.nrows(), atlas.n_regions()));
    for (mut o, row) in out.outer_iter_mut().zip(y.outer_iter()) {
        for (v, &r) in row.iter().zip(atlas.dim_to_region()) {
            o[r] += v;
        }
        if aggregation == Aggregation::Mean {
            for (r, s) in sizes.iter().enumerate() {
                if *s > 0 {
                    o[r] /= *s as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Samples-by-regions matrix for the samples assigned to `expert`, built
/// from their true output vectors.
pub fn region_activation_matrix(
    assignments: &ExpertAssignmentTable,
    data: &Dataset,
    atlas: &AtlasMap,
    expert: usize,
    aggregation: Aggregation,
) -> Result<Array2<f64>> {
    let members = assignments
        .members
        .get(expert)
        .ok_or_else(|| Error::argument(format!("no expert {expert}")))?;
    if members.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "expert {expert} has {} assigned samples; at least 2 are needed",
            members.len()
        )));
    }
    let subset = data.select(members);
    aggregate_regions(subset.y()?, atlas, aggregation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region: usize,
    pub label: String,
    /// Largest positive importance over the retained components.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionImportance {
    /// Qualified regions, highest score first.
    pub regions: Vec<RegionScore>,
    pub n_components: usize,
    pub explained_variance: f64,
    /// `regions × components` importance matrix `Mᵀ S`.
    pub importance: Array2<f64>,
}

/// PCA on the samples-by-regions matrix `M` keeps enough components to
/// reach `variance_target`; with scores `S = PCA(M)`, importance is `Mᵀ S`.
/// A region qualifies when some component gives it a positive importance
/// above `score_threshold`.
pub fn region_importance(
    matrix: ArrayView2<'_, f64>,
    labels: &[String],
    variance_target: f64,
    score_threshold: f64,
) -> Result<RegionImportance> {
    if labels.len() != matrix.ncols() {
        return Err(Error::argument(format!(
            "{} labels for {} regions",
            labels.len(),
            matrix.ncols()
        )));
    }
    let fitted = pca(matrix, variance_target)?;
    let scores = fitted.transform(matrix)?;
    let importance = matrix.t().dot(&scores);
    let mut regions: Vec<RegionScore> = importance
        .outer_iter()
        .enumerate()
        .filter_map(|(r, row)| {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (best > 0.0 && best > score_threshold).then(|| RegionScore {
                region: r,
                label: labels[r].clone(),
                score: best,
            })
        })
        .collect();
    regions.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.region.cmp(&b.region)));
    Ok(RegionImportance {
        regions,
        n_components: fitted.n_components,
        explained_variance: fitted.explained_variance_achieved(),
        importance,
    })
}

/// Outcome of the region analysis for one expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRegions {
    pub expert: usize,
    pub n_samples: usize,
    pub result: std::result::Result<RegionImportance, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAnalysis {
    pub experts: Vec<ExpertRegions>,
    /// Labels qualified for every expert that produced a result.
    pub common_regions: Vec<String>,
}

/// Region importance for every expert. An expert that cannot be analyzed
/// (too few samples, degenerate activations) is reported with its error.
pub fn analyze_regions(
    assignments: &ExpertAssignmentTable,
    data: &Dataset,
    atlas: &AtlasMap,
    aggregation: Aggregation,
    variance_target: f64,
    score_threshold: f64,
) -> Result<RegionAnalysis> {
    let mut experts = Vec::with_capacity(assignments.members.len());
    for (j, members) in assignments.members.iter().enumerate() {
        let result = region_activation_matrix(assignments, data, atlas, j, aggregation).and_then(|m| {
            region_importance(m.view(), atlas.region_labels(), variance_target, score_threshold)
        });
        let result = match result {
            Ok(r) => Ok(r),
            Err(e @ (Error::InsufficientData(_) | Error::DegenerateData(_))) => Err(e.to_string()),
            Err(e) => return Err(e),
        };
        experts.push(ExpertRegions {
            expert: j,
            n_samples: members.len(),
            result,
        });
    }
    let sets: Vec<&RegionImportance> = experts.iter().filter_map(|e| e.result.as_ref().ok()).collect();
    Ok(RegionAnalysis {
        common_regions: common_regions(&sets),
        experts,
    })
}

/// Intersection of the qualified label sets, in the order of the first set.
pub fn common_regions(results: &[&RegionImportance]) -> Vec<String> {
    let Some(first) = results.first() else {
        return Vec::new();
    };
    first
        .regions
        .iter()
        .filter(|r| {
            results[1..]
                .iter()
                .all(|other| other.regions.iter().any(|o| o.label == r.label))
        })
        .map(|r| r.label.clone())
        .collect()
}

#[derive(Debug, Clone)]
pub struct ClusterTable {
    pub ids: Vec<String>,
    pub clustering: KMeansResult,
    /// Sample ids in each cluster, in input order.
    pub members: Vec<Vec<String>>,
}

/// k-means over the rows of `matrix`, reported by sample id.
pub fn cluster_stimuli(
    matrix: ArrayView2<'_, f64>,
    ids: Option<&[String]>,
    k: usize,
    metric: Metric,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterTable> {
    let ids: Vec<String> = match ids {
        Some(ids) if ids.len() == matrix.nrows() => ids.to_vec(),
        Some(ids) => {
            return Err(Error::argument(format!(
                "{} ids for {} rows",
                ids.len(),
                matrix.nrows()
            )))
        }
        None => (0..matrix.nrows()).map(|i| i.to_string()).collect(),
    };
    let clustering = kmeans(matrix, k, metric, seed, max_iters)?;
    let mut members = vec![Vec::new(); k];
    for (id, &c) in ids.iter().zip(&clustering.assignments) {
        members[c].push(id.clone());
    }
    Ok(ClusterTable {
        ids,
        clustering,
        members,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::{Expert, GatingNetwork, VARIANCE_FLOOR};
    use ndarray::{array, Array1, Axis};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("R{i}")).collect()
    }

    fn model_with_gate(params: Array2<f64>, m: usize) -> MixtureModel {
        let (k, n) = params.dim();
        let experts = (0..k)
            .map(|_| Expert::new(Array2::zeros((m, n)), Array1::ones(m), VARIANCE_FLOOR).unwrap())
            .collect();
        MixtureModel::new(experts, GatingNetwork::new(params).unwrap(), VARIANCE_FLOOR).unwrap()
    }

    #[test]
    fn single_expert_and_uniform_gate() {
        let data = Dataset::new(array![[1.0, 2.0], [3.0, -1.0], [0.0, 0.5]], array![[1.0], [2.0], [3.0]]).unwrap();
        let one = model_with_gate(Array2::zeros((1, 2)), 1);
        let t = assign_samples(&one, &data, AssignMode::Gate).unwrap();
        assert!(t.rows.iter().all(|r| r.expert == 0));
        let three = model_with_gate(Array2::zeros((3, 2)), 1);
        let t = assign_samples(&three, &data, AssignMode::Gate).unwrap();
        assert!(t.rows.iter().all(|r| r.expert == 0));
        assert_eq!(t.members, vec![vec![0, 1, 2], vec![], vec![]]);
        for r in &t.rows {
            assert!((r.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn responsibility_mode_needs_targets() {
        let data = Dataset::inputs_only(array![[1.0, 2.0]]).unwrap();
        let m = model_with_gate(Array2::zeros((2, 2)), 1);
        assert!(matches!(
            assign_samples(&m, &data, AssignMode::Responsibility),
            Err(Error::Argument(_))
        ));
        assert!(assign_samples(&m, &data, AssignMode::Gate).is_ok());
    }

    #[test]
    fn gate_assignment_matches_generator() {
        let s = generate_synthetic(&SyntheticSpec {
            k: 3,
            n: 4,
            m: 2,
            n_samples: 1000,
            gating_scale: 3.0,
            noise_std: 0.1,
            seed: 12,
        })
        .unwrap();
        let t = assign_samples(&s.truth, &s.data, AssignMode::Gate).unwrap();
        let confident: Vec<&Assignment> = t
            .rows
            .iter()
            .filter(|r| r.probabilities.iter().copied().fold(0.0, f64::max) > 0.99)
            .collect();
        assert!(confident.len() > 200);
        let agree = confident
            .iter()
            .filter(|r| r.expert == s.labels[r.id.parse::<usize>().unwrap()])
            .count();
        assert!(agree as f64 >= 0.95 * confident.len() as f64);
    }

    #[test]
    fn single_region_collapses_to_row_means() {
        let y = array![[1.0, 2.0, 3.0], [4.0, 4.0, 7.0]];
        let atlas = AtlasMap::single_region(3, "all").unwrap();
        let agg = aggregate_regions(y.view(), &atlas, Aggregation::Mean).unwrap();
        assert_eq!(agg, array![[2.0], [5.0]]);
        let agg = aggregate_regions(y.view(), &atlas, Aggregation::Sum).unwrap();
        assert_eq!(agg, array![[6.0], [15.0]]);
    }

    #[test]
    fn two_region_hand_average() {
        let y = array![[1.0, 3.0, 10.0, 20.0, 30.0], [0.0, -2.0, 1.0, 1.0, 4.0]];
        let atlas = AtlasMap::new(vec!["A".into(), "B".into()], vec![0, 0, 1, 1, 1]).unwrap();
        let agg = aggregate_regions(y.view(), &atlas, Aggregation::Mean).unwrap();
        assert_eq!(agg, array![[2.0, 20.0], [-1.0, 2.0]]);
    }

    #[test]
    fn too_few_samples() {
        let data = Dataset::new(array![[1.0], [2.0]], array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let table = ExpertAssignmentTable {
            mode: AssignMode::Gate,
            rows: vec![],
            members: vec![vec![0], vec![1]],
        };
        let atlas = AtlasMap::single_region(2, "x").unwrap();
        let e = region_activation_matrix(&table, &data, &atlas, 0, Aggregation::Mean).unwrap_err();
        assert!(matches!(e, Error::InsufficientData(_)));
        let all = analyze_regions(&table, &data, &atlas, Aggregation::Mean, 0.85, 0.2).unwrap();
        assert!(all.experts.iter().all(|e| e.result.is_err()));
        assert!(all.common_regions.is_empty());
    }

    #[test]
    fn single_region_is_sole_listing() {
        // activations vary across words; a constant column has no variance for PCA
        let m = array![[5.0], [6.0], [7.0], [9.0]];
        let r = region_importance(m.view(), &labels(1), 0.85, 0.2).unwrap();
        assert_eq!(r.regions.len(), 1);
        assert_eq!(r.regions[0].label, "R0");
        let constant = array![[5.0], [5.0], [5.0]];
        assert!(matches!(
            region_importance(constant.view(), &labels(1), 0.85, 0.2),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn dominant_region_by_hand() {
        // centered column 0 is the only direction of variance; with one
        // component the scores are the centered column itself (sign fixed by
        // the positive largest loading), so importance_r = Σ_w M[w, r]·c_w
        let m = array![[4.0, 1.0, 1.0], [0.0, 1.0, 1.0], [6.0, 1.0, 1.0], [2.0, 1.0, 1.0]];
        let r = region_importance(m.view(), &labels(3), 0.85, 0.2).unwrap();
        assert_eq!(r.n_components, 1);
        // c = (1, -3, 3, -1); Σ M0·c = 4 − 0 + 18 − 2 = 20; other columns Σ c = 0
        assert!((r.importance[[0, 0]] - 20.0).abs() < 1e-10);
        assert!(r.importance[[1, 0]].abs() < 1e-10);
        assert_eq!(r.regions.len(), 1);
        assert_eq!(r.regions[0].label, "R0");
    }

    #[test]
    fn common_regions_intersection() {
        let mk = |names: &[&str]| RegionImportance {
            regions: names
                .iter()
                .enumerate()
                .map(|(i, n)| RegionScore { region: i, label: n.to_string(), score: 1.0 })
                .collect(),
            n_components: 1,
            explained_variance: 1.0,
            importance: Array2::zeros((0, 0)),
        };
        let a = mk(&["A", "B", "C"]);
        let b = mk(&["C", "A"]);
        assert_eq!(common_regions(&[&a, &b]), vec!["A".to_string(), "C".to_string()]);
        assert!(common_regions(&[]).is_empty());
    }

    #[test]
    fn cluster_cases() {
        let m = array![[0.0, 0.0], [5.0, 5.0], [0.0, 0.0], [5.0, 5.0]];
        let ids: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let t = cluster_stimuli(m.view(), Some(&ids), 2, Metric::Euclidean, 0, 100).unwrap();
        let ca = t.clustering.assignments[0];
        assert_eq!(t.clustering.assignments[2], ca);
        assert_eq!(t.clustering.assignments[1], t.clustering.assignments[3]);
        assert_ne!(t.clustering.assignments[1], ca);
        let one = cluster_stimuli(m.view(), None, 1, Metric::Euclidean, 0, 100).unwrap();
        assert_eq!(one.members[0], vec!["0", "1", "2", "3"]);
        assert!(cluster_stimuli(m.view(), Some(&ids[..2]), 1, Metric::Euclidean, 0, 10).is_err());
    }

    proptest! {
        #[test]
        fn importance_invariant_to_word_order(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((6, 4), |_| rng.random_range(0.0..3.0));
            let order = [4, 2, 0, 5, 1, 3];
            let p = m.select(Axis(0), &order);
            let a = region_importance(m.view(), &labels(4), 0.85, 0.2).unwrap();
            let b = region_importance(p.view(), &labels(4), 0.85, 0.2).unwrap();
            prop_assert_eq!(a.regions.len(), b.regions.len());
            for ra in &a.regions {
                let rb = b.regions.iter().find(|r| r.label == ra.label);
                prop_assert!(rb.is_some());
                prop_assert!((ra.score - rb.unwrap().score).abs() < 1e-9);
            }
            for r in &a.regions {
                prop_assert!(r.score > 0.2);
            }
        }

        #[test]
        fn gate_assignment_shift_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = Array2::from_shape_fn((3, 2), |_| rng.random_range(-2.0..2.0));
            let shift = Array1::from_shape_fn(2, |_| rng.random_range(-5.0..5.0));
            let shifted = &params + &shift.view().insert_axis(Axis(0));
            let x = Array2::from_shape_fn((30, 2), |_| rng.random_range(-2.0..2.0));
            let data = Dataset::inputs_only(x).unwrap();
            let a = assign_samples(&model_with_gate(params, 1), &data, AssignMode::Gate).unwrap();
            let b = assign_samples(&model_with_gate(shifted, 1), &data, AssignMode::Gate).unwrap();
            let mut covered: Vec<usize> = a.members.iter().flatten().copied().collect();
            covered.sort();
            prop_assert_eq!(covered, (0..30).collect::<Vec<_>>());
            for (ra, rb) in a.rows.iter().zip(&b.rows) {
                let pa = &ra.probabilities;
                let margin = {
                    let mut s = pa.clone();
                    s.sort_by(|x, y| y.total_cmp(x));
                    s[0] - s[1]
                };
                if margin > 1e-9 {
                    prop_assert_eq!(ra.expert, rb.expert);
                }
            }
        }
    }
}
