use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ndarray::{Array2, Axis};
use serde::Serialize;
use serde_json::json;

use more_core::analysis::{analyze_regions, assign_samples, cluster_stimuli, Aggregation, AssignMode};
use more_core::baseline::ridge_fit;
use more_core::data::{
    generate_synthetic, load_atlas, load_model, save_model, Dataset, MatrixLayout, SavedModel, SyntheticSpec,
};
use more_core::metrics::{anova_oneway, evaluate_methods, AnovaResult};
use more_core::numerics::Metric;
use more_core::selection::{kfold_evaluate, kfold_evaluate_with, select_k as run_select_k, FoldPlan};
use more_core::trainer::{self, InitMode, TrainingConfig};

use crate::args::*;
use crate::io::{cell, ensure_dir, ensure_parent, read_pair, sibling, write_json, write_matrix, write_text, ManifestBuilder};
use crate::usage;

fn training_config(k: usize, t: &TrainArgs, threads: usize) -> anyhow::Result<TrainingConfig> {
    let mut c = TrainingConfig::new(k);
    c.max_iters = t.max_iters;
    c.tol = t.tol;
    c.eta = t.eta;
    c.gating_steps = t.gating_steps;
    c.seed = t.seed;
    c.init = t.init.parse::<InitMode>()?;
    c.variance_floor = t.variance_floor;
    c.parallel = threads > 1;
    Ok(c)
}

fn dataset(x: &Path, y: &Path) -> anyhow::Result<Dataset> {
    let (xm, ym) = read_pair(x, Some(y))?;
    let data = Dataset::new(xm.values, ym.expect("targets requested"))?;
    Ok(match xm.ids {
        Some(ids) => data.with_ids(ids)?,
        None => data,
    })
}

pub fn synth(a: &SynthArgs, cli: &Cli) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        k: a.experts,
        n: a.in_dim,
        m: a.out_dim,
        n_samples: a.samples,
        gating_scale: a.gating_scale,
        noise_std: a.noise_std,
        seed: a.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let mut manifest = ManifestBuilder::start("synth", cli.threads, a)?;
    manifest.seed("seed", a.seed);
    let s = generate_synthetic(&spec)?;
    ensure_dir(&a.out)?;
    let x_path = a.out.join("x.bin");
    let y_path = a.out.join("y.bin");
    let truth_path = a.out.join("truth.json");
    let labels_path = a.out.join("labels.csv");
    write_matrix(&x_path, s.data.x())?;
    write_matrix(&y_path, s.data.y()?)?;
    save_model(&truth_path, &SavedModel::Mixture(s.truth), MatrixLayout::Embedded)?;
    let mut labels = String::from("sample,expert\n");
    for (i, l) in s.labels.iter().enumerate() {
        writeln!(labels, "{i},{l}")?;
    }
    write_text(&labels_path, &labels)?;
    for p in [&x_path, &y_path, &truth_path, &labels_path] {
        manifest.output(p)?;
    }
    manifest.finish(&a.out.join("manifest.json"))?;
    println!("wrote {} samples to {}", a.samples, a.out.display());
    Ok(())
}

pub fn fit(a: &FitArgs, cli: &Cli) -> anyhow::Result<()> {
    let config = training_config(a.experts, &a.train, cli.threads)?;
    let mut manifest = ManifestBuilder::start("fit", cli.threads, a)?;
    manifest.seed("seed", config.seed);
    manifest.input(&a.x)?;
    manifest.input(&a.y)?;
    let data = dataset(&a.x, &a.y)?;
    let (model, trace) = trainer::fit(&data, &config)?;

    ensure_parent(&a.model)?;
    let layout = if a.sibling_matrices { MatrixLayout::Sibling } else { MatrixLayout::Embedded };
    save_model(&a.model, &SavedModel::Mixture(model), layout)?;
    let trace_path = sibling(&a.model, "trace.csv");
    let mut csv = String::from("iteration,log_likelihood,reinitialized_experts\n");
    for (p, ll) in trace.log_likelihoods.iter().enumerate() {
        let reinit: Vec<String> = trace
            .empty_expert_events
            .iter()
            .filter(|e| e.iteration == p)
            .map(|e| e.expert.to_string())
            .collect();
        writeln!(csv, "{p},{ll},{}", reinit.join(";"))?;
    }
    write_text(&trace_path, &csv)?;
    manifest.output(&a.model)?;
    manifest.output(&trace_path)?;
    manifest.finish(&sibling(&a.model, "manifest.json"))?;
    println!(
        "k={} iterations={} converged={} log_likelihood={}",
        a.experts,
        trace.iterations_run,
        trace.converged,
        trace.final_log_likelihood()
    );
    Ok(())
}

pub fn predict(a: &PredictArgs, cli: &Cli) -> anyhow::Result<()> {
    let mut manifest = ManifestBuilder::start("predict", cli.threads, a)?;
    manifest.input(&a.model)?;
    manifest.input(&a.x)?;
    let model = load_model(&a.model)?;
    let (xm, _) = read_pair(&a.x, None)?;
    let pred = model.predict(xm.values.view())?;
    ensure_parent(&a.out)?;
    write_matrix(&a.out, pred.view())?;
    manifest.output(&a.out)?;
    manifest.finish(&sibling(&a.out, "manifest.json"))?;
    Ok(())
}

fn parse_pred(spec: &str) -> anyhow::Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, file)) if !name.is_empty() && !file.is_empty() => Ok((name.to_string(), PathBuf::from(file))),
        _ => Err(usage(format!("--pred expects NAME=FILE, got {spec:?}"))),
    }
}

#[derive(Serialize)]
struct EvaluationOutput<'a> {
    comparison: &'a more_core::metrics::MethodComparison,
    /// One-way ANOVA over per-sample MAE of the methods.
    anova: Option<AnovaResult>,
}

pub fn evaluate(a: &EvaluateArgs, cli: &Cli) -> anyhow::Result<()> {
    let preds: Vec<(String, PathBuf)> = a.preds.iter().map(|s| parse_pred(s)).collect::<anyhow::Result<_>>()?;
    let mut seen = std::collections::HashSet::new();
    if let Some((dup, _)) = preds.iter().find(|(n, _)| !seen.insert(n.clone())) {
        return Err(usage(format!("method name {dup:?} given twice")));
    }
    let mut manifest = ManifestBuilder::start("evaluate", cli.threads, a)?;
    manifest.input(&a.y_true)?;
    let truth = read_pair(&a.y_true, None)?.0.values;
    let mut matrices: Vec<(String, Array2<f64>)> = Vec::new();
    for (name, path) in &preds {
        manifest.input(path)?;
        let m = read_pair(path, None)?.0.values;
        if m.dim() != truth.dim() {
            bail!("{} is {:?}, ground truth is {:?}", path.display(), m.dim(), truth.dim());
        }
        matrices.push((name.clone(), m));
    }
    let views: Vec<(String, ndarray::ArrayView2<'_, f64>)> =
        matrices.iter().map(|(n, m)| (n.clone(), m.view())).collect();
    let comparison = evaluate_methods(truth.view(), &views)?;

    let per_sample: Vec<Vec<f64>> = matrices
        .iter()
        .map(|(_, m)| {
            (&truth - m)
                .mapv(f64::abs)
                .mean_axis(Axis(1))
                .expect("non-empty rows")
                .to_vec()
        })
        .collect();
    let anova = if per_sample.len() >= 2 && per_sample.len() * truth.nrows() > per_sample.len() {
        let groups: Vec<&[f64]> = per_sample.iter().map(|g| g.as_slice()).collect();
        Some(anova_oneway(&groups)?)
    } else {
        None
    };

    ensure_dir(&a.out)?;
    let mut csv = String::from(
        "method,k,macro_precision,macro_recall,macro_f1,micro_precision,micro_recall,micro_f1,class1_precision,class1_recall,class1_f1\n",
    );
    for r in &comparison.rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.threshold_shift,
            r.macro_avg.precision,
            r.macro_avg.recall,
            r.macro_avg.f1,
            r.micro_avg.precision,
            r.micro_avg.recall,
            r.micro_avg.f1,
            r.class1.precision,
            r.class1.recall,
            r.class1.f1
        )?;
    }
    let mut reg = String::from("method,mae,r2\n");
    for r in &comparison.regression {
        writeln!(reg, "{},{},{}", r.method, r.mae, cell(r.r2))?;
    }
    let table_path = a.out.join("evaluation.csv");
    let reg_path = a.out.join("regression.csv");
    let json_path = a.out.join("evaluation.json");
    write_text(&table_path, &csv)?;
    write_text(&reg_path, &reg)?;
    write_json(&json_path, &EvaluationOutput { comparison: &comparison, anova })?;
    for p in [&table_path, &reg_path, &json_path] {
        manifest.output(p)?;
    }
    manifest.finish(&a.out.join("manifest.json"))?;
    for r in &comparison.regression {
        println!("{}: mae={} r2={}", r.method, r.mae, cell(r.r2));
    }
    Ok(())
}

pub fn select_k(a: &SelectKArgs, cli: &Cli) -> anyhow::Result<()> {
    if a.k_min > a.k_max {
        return Err(usage(format!("--k-min {} exceeds --k-max {}", a.k_min, a.k_max)));
    }
    let config = training_config(a.k_min, &a.train, cli.threads)?;
    let mut manifest = ManifestBuilder::start("select-k", cli.threads, a)?;
    manifest.seed("seed", config.seed);
    manifest.input(&a.x)?;
    manifest.input(&a.y)?;
    let data = dataset(&a.x, &a.y)?;
    let report = run_select_k(&data, a.k_min..=a.k_max, &config, a.restarts)?;

    ensure_dir(&a.out)?;
    let mut csv = String::from("k,d,n_samples,log_likelihood,bic,log10_bic,seed_of_best\n");
    for e in &report.entries {
        match (e.log_likelihood, e.bic, e.seed_of_best) {
            (Some(ll), Some(b), Some(seed)) => {
                writeln!(csv, "{},{},{},{ll},{b},{},{seed}", e.k, e.d, e.n_samples, cell(e.log10_bic))?
            }
            _ => writeln!(csv, "{},{},{},failed,failed,failed,failed", e.k, e.d, e.n_samples)?,
        }
    }
    let csv_path = a.out.join("bic.csv");
    let json_path = a.out.join("bic.json");
    write_text(&csv_path, &csv)?;
    write_json(&json_path, &report)?;
    manifest.output(&csv_path)?;
    manifest.output(&json_path)?;
    manifest.finish(&a.out.join("manifest.json"))?;
    println!("best_k={}", report.best_k);
    Ok(())
}

pub fn crossval(a: &CrossvalArgs, cli: &Cli) -> anyhow::Result<()> {
    if a.folds < 2 {
        return Err(usage("--folds must be at least 2"));
    }
    let config = training_config(a.experts, &a.train, cli.threads)?;
    let mut manifest = ManifestBuilder::start("crossval", cli.threads, a)?;
    manifest.seed("seed", config.seed);
    manifest.input(&a.x)?;
    manifest.input(&a.y)?;
    let data = dataset(&a.x, &a.y)?;
    let plan = FoldPlan::new(data.n_samples(), a.folds, config.seed)?;
    let report = kfold_evaluate(&data, &config, &plan)?;

    ensure_dir(&a.out)?;
    let mut csv = String::from("fold,n_train,n_test,mae,r2\n");
    for f in &report.folds {
        writeln!(csv, "{},{},{},{},{}", f.fold, f.n_train, f.n_test, f.mae, cell(f.r2))?;
    }
    let csv_path = a.out.join("crossval.csv");
    let json_path = a.out.join("crossval.json");
    write_text(&csv_path, &csv)?;
    write_json(&json_path, &report)?;
    manifest.output(&csv_path)?;
    manifest.output(&json_path)?;
    manifest.finish(&a.out.join("manifest.json"))?;
    println!("mean_mae={} mean_r2={}", report.mean_mae, cell(report.mean_r2));
    Ok(())
}

pub fn baseline_ridge(a: &RidgeArgs, cli: &Cli) -> anyhow::Result<()> {
    if a.lambda.len() > 1 && a.folds < 2 {
        return Err(usage("--folds must be at least 2 when several lambdas are given"));
    }
    let mut manifest = ManifestBuilder::start("baseline-ridge", cli.threads, a)?;
    manifest.seed("seed", a.seed);
    manifest.input(&a.x)?;
    manifest.input(&a.y)?;
    let data = dataset(&a.x, &a.y)?;

    let mut search = Vec::new();
    let lambda = if a.lambda.len() == 1 {
        a.lambda[0]
    } else {
        let plan = FoldPlan::new(data.n_samples(), a.folds, a.seed)?;
        let mut best: Option<(f64, f64)> = None;
        for &l in &a.lambda {
            let report = kfold_evaluate_with(&data, &plan, |train, test| {
                ridge_fit(train, l)?.predict(test.x())
            });
            match report {
                Ok(r) => {
                    search.push((l, Some(r.mean_mae)));
                    if best.is_none_or(|(_, b)| r.mean_mae < b) {
                        best = Some((l, r.mean_mae));
                    }
                }
                Err(_) => search.push((l, None)),
            }
        }
        best.context("every lambda failed")?.0
    };
    let model = ridge_fit(&data, lambda)?;
    ensure_parent(&a.model)?;
    save_model(&a.model, &SavedModel::Ridge(model), MatrixLayout::Embedded)?;
    manifest.output(&a.model)?;
    if !search.is_empty() {
        let mut csv = String::from("lambda,mean_cv_mae\n");
        for (l, m) in &search {
            writeln!(csv, "{l},{}", cell(*m))?;
        }
        let p = sibling(&a.model, "lambda_search.csv");
        write_text(&p, &csv)?;
        manifest.output(&p)?;
    }
    manifest.finish(&sibling(&a.model, "manifest.json"))?;
    println!("lambda={lambda}");
    Ok(())
}

pub fn analyze(a: &AnalyzeArgs, cli: &Cli) -> anyhow::Result<()> {
    let mode: AssignMode = a.mode.parse()?;
    if mode == AssignMode::Responsibility && a.y.is_none() {
        return Err(usage("--mode responsibility requires --y"));
    }
    if a.atlas.is_some() && a.y.is_none() {
        return Err(usage("--atlas requires --y"));
    }
    let aggregation: Aggregation = a.aggregation.parse()?;
    let mut manifest = ManifestBuilder::start("analyze", cli.threads, a)?;
    manifest.input(&a.model)?;
    manifest.input(&a.x)?;
    let model = match load_model(&a.model)? {
        SavedModel::Mixture(m) => m,
        other => bail!("{} holds a {} model; analyze needs a mixture", a.model.display(), other.kind()),
    };
    let (xm, ym) = read_pair(&a.x, a.y.as_deref())?;
    if let Some(y) = &a.y {
        manifest.input(y)?;
    }
    let mut data = match ym {
        Some(y) => Dataset::new(xm.values, y)?,
        None => Dataset::inputs_only(xm.values)?,
    };
    if let Some(ids) = xm.ids {
        data = data.with_ids(ids)?;
    }
    let table = assign_samples(&model, &data, mode)?;

    let regions = match &a.atlas {
        Some(atlas_path) => {
            manifest.input(atlas_path)?;
            let atlas = load_atlas(atlas_path)?;
            Some(analyze_regions(
                &table,
                &data,
                &atlas,
                aggregation,
                a.variance_target,
                a.score_threshold,
            )?)
        }
        None => None,
    };

    ensure_dir(&a.out)?;
    let mut csv = String::from("id,expert");
    for j in 0..model.k() {
        write!(csv, ",p{j}")?;
    }
    csv.push('\n');
    for r in &table.rows {
        write!(csv, "{},{}", r.id, r.expert)?;
        for p in &r.probabilities {
            write!(csv, ",{p}")?;
        }
        csv.push('\n');
    }
    let assign_path = a.out.join("assignments.csv");
    write_text(&assign_path, &csv)?;
    manifest.output(&assign_path)?;

    if let Some(analysis) = &regions {
        let mut csv = String::from("expert,rank,region,score\n");
        let mut experts = Vec::new();
        for e in &analysis.experts {
            match &e.result {
                Ok(r) => {
                    for (rank, s) in r.regions.iter().enumerate() {
                        writeln!(csv, "{},{},{},{}", e.expert, rank + 1, s.label, s.score)?;
                    }
                    experts.push(json!({
                        "expert": e.expert,
                        "n_samples": e.n_samples,
                        "n_components": r.n_components,
                        "explained_variance": r.explained_variance,
                        "regions": r.regions,
                    }));
                }
                Err(msg) => experts.push(json!({
                    "expert": e.expert,
                    "n_samples": e.n_samples,
                    "error": msg,
                })),
            }
        }
        let regions_path = a.out.join("regions.csv");
        let json_path = a.out.join("regions.json");
        write_text(&regions_path, &csv)?;
        write_json(
            &json_path,
            &json!({
                "mode": mode,
                "variance_target": a.variance_target,
                "score_threshold": a.score_threshold,
                "experts": experts,
                "common_regions": analysis.common_regions,
            }),
        )?;
        manifest.output(&regions_path)?;
        manifest.output(&json_path)?;
    }
    manifest.finish(&a.out.join("manifest.json"))?;
    for (j, m) in table.members.iter().enumerate() {
        println!("expert {j}: {} samples", m.len());
    }
    Ok(())
}

pub fn cluster(a: &ClusterArgs, cli: &Cli) -> anyhow::Result<()> {
    let metric: Metric = a.metric.parse()?;
    let mut manifest = ManifestBuilder::start("cluster", cli.threads, a)?;
    manifest.seed("seed", a.seed);
    manifest.input(&a.input)?;
    let m = read_pair(&a.input, None)?.0;
    let table = cluster_stimuli(m.values.view(), m.ids.as_deref(), a.k, metric, a.seed, a.max_iters)?;

    ensure_dir(&a.out)?;
    let mut csv = String::from("id,cluster\n");
    for (id, c) in table.ids.iter().zip(&table.clustering.assignments) {
        writeln!(csv, "{id},{c}")?;
    }
    let csv_path = a.out.join("clusters.csv");
    let json_path = a.out.join("clusters.json");
    write_text(&csv_path, &csv)?;
    write_json(
        &json_path,
        &json!({
            "k": a.k,
            "metric": metric,
            "sse": table.clustering.sse,
            "iterations": table.clustering.iterations,
            "converged": table.clustering.converged,
            "members": table.members,
        }),
    )?;
    manifest.output(&csv_path)?;
    manifest.output(&json_path)?;
    manifest.finish(&a.out.join("manifest.json"))?;
    for (c, members) in table.members.iter().enumerate() {
        println!("cluster {c}: {} members", members.len());
    }
    Ok(())
}
