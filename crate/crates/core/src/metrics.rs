//! Regression metrics, μ+kσ binarized classification reports and one-way
//! ANOVA.

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Threshold shifts used by [`evaluate_methods`].
pub const THRESHOLD_SHIFTS: [i32; 7] = [-3, -2, -1, 0, 1, 2, 3];

fn check_shapes(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::argument(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean absolute error over every entry.
pub fn mae(y_true: ArrayView2<'_, f64>, y_pred: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(y_true, y_pred)?;
    if y_true.is_empty() {
        return Err(Error::argument("mae of an empty matrix"));
    }
    let total: f64 = y_true.iter().zip(y_pred.iter()).map(|(t, p)| (t - p).abs()).sum();
    Ok(total / y_true.len() as f64)
}

/// Coefficient of determination per output column, averaged uniformly.
///
/// A column with zero variance scores 1 if it is predicted exactly and 0
/// otherwise.
pub fn r2_score(y_true: ArrayView2<'_, f64>, y_pred: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(y_true, y_pred)?;
    if y_true.nrows() < 2 || y_true.ncols() == 0 {
        return Err(Error::argument("r2_score needs at least 2 rows and 1 column"));
    }
    let means = y_true.mean_axis(Axis(0)).expect("non-empty");
    let mut total = 0.0;
    for ((t, p), mu) in y_true
        .axis_iter(Axis(1))
        .zip(y_pred.axis_iter(Axis(1)))
        .zip(means.iter())
    {
        let ss_res: f64 = t.iter().zip(p.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let ss_tot: f64 = t.iter().map(|a| (a - mu) * (a - mu)).sum();
        total += if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else if ss_res == 0.0 {
            1.0
        } else {
            0.0
        };
    }
    Ok(total / y_true.ncols() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: ArrayView1<'_, f64>) -> (f64, f64) {
    let n = values.len() as f64;
    let mu = values.sum() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Labels each entry 1 if it is strictly greater than `mu + k·sigma`.
pub fn sigma_threshold_binarize(values: ArrayView1<'_, f64>, mu: f64, sigma: f64, k: i32) -> Vec<bool> {
    let threshold = mu + k as f64 * sigma;
    values.iter().map(|v| *v > threshold).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

// Zero denominators give 0.
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

impl Scores {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Scores {
            precision,
            recall,
            f1: harmonic(precision, recall),
        }
    }

    fn mean(a: &Scores, b: &Scores) -> Self {
        Scores {
            precision: 0.5 * (a.precision + b.precision),
            recall: 0.5 * (a.recall + b.recall),
            f1: 0.5 * (a.f1 + b.f1),
        }
    }
}

/// Binary classification report. Precision or recall with a zero
/// denominator is reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub threshold_shift: i32,
    pub class1: Scores,
    pub class0: Scores,
    pub macro_avg: Scores,
    pub micro_avg: Scores,
    /// Counts with class 1 as the positive class.
    pub class1_counts: ConfusionCounts,
    /// Counts with class 0 as the positive class.
    pub class0_counts: ConfusionCounts,
}

impl ClassificationReport {
    pub fn accuracy(&self) -> f64 {
        let c = self.class1_counts;
        ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_)
    }
}

pub fn classification_report(truth: &[bool], pred: &[bool], k: i32) -> Result<ClassificationReport> {
    if truth.len() != pred.len() {
        return Err(Error::argument(format!(
            "label vectors differ in length: {} vs {}",
            truth.len(),
            pred.len()
        )));
    }
    let mut c1 = ConfusionCounts::default();
    for (&t, &p) in truth.iter().zip(pred) {
        match (t, p) {
            (true, true) => c1.tp += 1,
            (false, true) => c1.fp += 1,
            (true, false) => c1.fn_ += 1,
            (false, false) => c1.tn += 1,
        }
    }
    let c0 = ConfusionCounts {
        tp: c1.tn,
        fp: c1.fn_,
        fn_: c1.fp,
        tn: c1.tp,
    };
    let class1 = Scores::from_counts(c1.tp, c1.fp, c1.fn_);
    let class0 = Scores::from_counts(c0.tp, c0.fp, c0.fn_);
    let micro_avg = Scores::from_counts(c1.tp + c0.tp, c1.fp + c0.fp, c1.fn_ + c0.fn_);
    Ok(ClassificationReport {
        threshold_shift: k,
        macro_avg: Scores::mean(&class1, &class0),
        class1,
        class0,
        micro_avg,
        class1_counts: c1,
        class0_counts: c0,
    })
}

/// One row of a method comparison table: scores averaged over samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub threshold_shift: i32,
    pub macro_avg: Scores,
    pub micro_avg: Scores,
    pub class1: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub method: String,
    pub mae: f64,
    /// `None` when fewer than two samples are available.
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub regression: Vec<RegressionSummary>,
    /// Ordered by method, then threshold shift.
    pub rows: Vec<MethodRow>,
}

fn add_scores(acc: &mut Scores, s: &Scores) {
    acc.precision += s.precision;
    acc.recall += s.recall;
    acc.f1 += s.f1;
}

fn scale_scores(s: &mut Scores, f: f64) {
    s.precision *= f;
    s.recall *= f;
    s.f1 *= f;
}

/// For every sample, μ and σ of its true output vector define thresholds
/// `μ + kσ` for `k = −3..3`; truth and each method's prediction are
/// binarized with the same threshold and the per-sample reports averaged.
pub fn evaluate_methods(y_true: ArrayView2<'_, f64>, methods: &[(String, ArrayView2<'_, f64>)]) -> Result<MethodComparison> {
    if methods.is_empty() {
        return Err(Error::argument("no predictions to evaluate"));
    }
    if y_true.nrows() == 0 || y_true.ncols() == 0 {
        return Err(Error::argument("empty ground truth"));
    }
    let mut regression = Vec::with_capacity(methods.len());
    let mut rows = Vec::with_capacity(methods.len() * THRESHOLD_SHIFTS.len());
    for (name, pred) in methods {
        check_shapes(y_true, *pred)?;
        regression.push(RegressionSummary {
            method: name.clone(),
            mae: mae(y_true, *pred)?,
            r2: if y_true.nrows() >= 2 { Some(r2_score(y_true, *pred)?) } else { None },
        });
        for k in THRESHOLD_SHIFTS {
            let mut row = MethodRow {
                method: name.clone(),
                threshold_shift: k,
                macro_avg: Scores::default(),
                micro_avg: Scores::default(),
                class1: Scores::default(),
            };
            for (t, p) in y_true.outer_iter().zip(pred.outer_iter()) {
                let (mu, sigma) = mean_std(t);
                let rep = classification_report(
                    &sigma_threshold_binarize(t, mu, sigma, k),
                    &sigma_threshold_binarize(p, mu, sigma, k),
                    k,
                )?;
                add_scores(&mut row.macro_avg, &rep.macro_avg);
                add_scores(&mut row.micro_avg, &rep.micro_avg);
                add_scores(&mut row.class1, &rep.class1);
            }
            let f = 1.0 / y_true.nrows() as f64;
            scale_scores(&mut row.macro_avg, f);
            scale_scores(&mut row.micro_avg, f);
            scale_scores(&mut row.class1, f);
            rows.push(row);
        }
    }
    Ok(MethodComparison { regression, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    /// `+inf` when every group is constant but group means differ.
    pub f_statistic: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p_value: f64,
}

/// One-way ANOVA across `groups`.
pub fn anova_oneway(groups: &[&[f64]]) -> Result<AnovaResult> {
    if groups.len() < 2 {
        return Err(Error::argument("anova needs at least 2 groups"));
    }
    if let Some(i) = groups.iter().position(|g| g.is_empty()) {
        return Err(Error::argument(format!("group {i} is empty")));
    }
    if groups.iter().flat_map(|g| g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Domain("anova input contains non-finite values".into()));
    }
    let total_n: usize = groups.iter().map(|g| g.len()).sum();
    if total_n <= groups.len() {
        return Err(Error::argument(format!(
            "anova needs more observations ({total_n}) than groups ({})",
            groups.len()
        )));
    }
    let df_between = groups.len() - 1;
    let df_within = total_n - groups.len();
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / total_n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (mean - grand) * (mean - grand);
        ss_within += g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    let (f_statistic, p_value) = if ss_between == 0.0 {
        (0.0, 1.0)
    } else if ss_within == 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        let f = (ss_between / df_between as f64) / (ss_within / df_within as f64);
        let (d1, d2) = (df_between as f64, df_within as f64);
        // upper tail of F(d1, d2)
        let p = beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f));
        (f, p.clamp(0.0, 1.0))
    };
    Ok(AnovaResult {
        f_statistic,
        df_between,
        df_within,
        p_value,
    })
}
