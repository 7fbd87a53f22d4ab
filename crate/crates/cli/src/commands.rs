//! The subcommands. Each one validates its config, writes everything under
//! the output directory and finishes with a resolved-config copy.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use octmh_core::byol::{load_corpus, pretrain};
use octmh_core::dataset::{DatasetManifest, LoadedDataset};
use octmh_core::fsutil::{read_json, write_atomic, write_json};
use octmh_core::metrics::{aggregate_runs, MetricKind, MetricSet};
use octmh_core::report::{render_csv, render_importance_svg, render_markdown, render_results_svg, ReportRow, ResultsTable};
use octmh_core::synth::{generate_corpus, generate_synthetic};
use octmh_core::tabular::{run_fusion, run_regression, RegressionOutcome};
use octmh_core::train::{initial_model, predict_all, train_run, RunResult, RunSummary};
use octmh_core::{ArchitectureName, ArchitectureSpec, Init, Model};
use octmh_tensor::suite::{run_suite, CaseResult};
use serde::{Deserialize, Serialize};

use crate::config::{Command, ExperimentConfig, ModelPreset, RESOLVED_CONFIG_FILE};
use crate::error::{CliError, Result};

pub const ENCODER_FILE: &str = "encoder.opwt";
pub const BYOL_SUMMARY_FILE: &str = "byol_summary.json";
pub const REGRESSION_MODEL_FILE: &str = "model.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const RESULTS_SVG: &str = "results.svg";
pub const IMPORTANCE_SVG: &str = "importance.svg";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const CORPUS_DIR: &str = "corpus";

/// `run_<i>`, the stem of replicate `i`'s files.
pub fn run_stem(i: usize) -> String {
    format!("run_{i}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TabularKind {
    Regression,
    Fusion,
}

/// One replicate of a tabular model, stored as `run_<i>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularRun {
    pub kind: TabularKind,
    pub run: usize,
    pub seed: u64,
    /// Stem of the vision run whose predictions were fused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub outcome: RegressionOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceSeries {
    pub model: String,
    /// `(feature, percent)`, averaged over runs.
    pub features: Vec<(String, f64)>,
}

/// Per-run metrics behind one table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRuns {
    pub dir: PathBuf,
    pub model: String,
    pub config: String,
    pub runs: Vec<String>,
    pub metrics: Vec<MetricSet>,
    /// Runs whose test split lacked a class.
    pub skipped: Vec<String>,
}

/// Output of `evaluate`, input of `report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evaluation {
    pub table: ResultsTable,
    #[serde(default)]
    pub importance: Vec<ImportanceSeries>,
    #[serde(default)]
    pub sources: Vec<SourceRuns>,
}

/// Runs `f(0..n)` on up to `jobs` threads, keeping index order.
fn dispatch<T, F>(n: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if jobs > 1 && n > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        return pool.install(|| (0..n).into_par_iter().map(&f).collect());
    }
    let _ = jobs;
    (0..n).map(f).collect()
}

fn write_resolved(cmd: Command, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved<'a> {
        command: Command,
        config: &'a ExperimentConfig,
    }
    Ok(write_json(&out.join(RESOLVED_CONFIG_FILE), &Resolved { command: cmd, config: cfg })?)
}

/// Validates and runs one command; returns a short summary for stdout.
pub fn execute(cmd: Command, cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate(cmd)?;
    match cmd {
        Command::SynthGen => synth_gen(cfg),
        Command::PretrainByol => pretrain_byol(cfg),
        Command::TrainVision => train_vision(cfg),
        Command::TrainRegression => train_regression(cfg),
        Command::Fuse => fuse(cfg),
        Command::Evaluate => evaluate(cfg),
        Command::Report => report(cfg),
        Command::Gradcheck => gradcheck(cfg),
    }
}

fn synth_gen(cfg: &ExperimentConfig) -> Result<String> {
    let out = cfg.out_dir()?;
    let synth = cfg.synthetic_config()?;
    let manifest = generate_synthetic(&synth, cfg.seed, out)?;
    if cfg.corpus_size > 0 {
        generate_corpus(&synth, cfg.corpus_size, cfg.seed, &out.join(CORPUS_DIR))?;
    }
    let mut resolved = cfg.clone();
    resolved.synth = Some(serde_json::to_value(&synth).expect("config serializes"));
    write_resolved(Command::SynthGen, &resolved, out)?;
    Ok(format!(
        "wrote {} synthetic patients to {}{}",
        synth.n,
        manifest.display(),
        if cfg.corpus_size > 0 {
            format!(" and {} corpus images", cfg.corpus_size)
        } else {
            String::new()
        }
    ))
}

fn pretrain_byol(cfg: &ExperimentConfig) -> Result<String> {
    let out = cfg.out_dir()?;
    let arch: ArchitectureName = match &cfg.architecture {
        Some(a) => a.parse()?,
        None => ArchitectureName::ResNet50,
    };
    let spec = ArchitectureSpec::new(arch).with_input_size(cfg.byol.input_size);
    let corpus = load_corpus(&cfg.inputs[0])?;
    let (weights, summary) = pretrain(spec, &corpus, &cfg.byol, cfg.seed)?;
    weights.save(&out.join(ENCODER_FILE))?;
    write_json(&out.join(BYOL_SUMMARY_FILE), &summary)?;
    write_resolved(Command::PretrainByol, cfg, out)?;
    let first = summary.epoch_losses.first().copied().unwrap_or(f64::NAN);
    let last = summary.epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "pretrained {arch} on {} images: loss {first:.4} -> {last:.4}, encoder in {}",
        corpus.len(),
        out.join(ENCODER_FILE).display()
    ))
}

fn train_vision(cfg: &ExperimentConfig) -> Result<String> {
    let out = cfg.out_dir()?;
    let Some(ModelPreset::Vision(preset)) = cfg.model_preset()? else {
        unreachable!("validated")
    };
    let data = LoadedDataset::load(cfg.dataset_path()?)?;
    let spec = ArchitectureSpec::new(preset.architecture()).with_input_size(cfg.train.input_size);
    let best = dispatch(cfg.runs, cfg.jobs, |i| {
        let mut t = cfg.train.clone();
        t.seed = cfg.seed + i as u64;
        preset.apply(&mut t)?;
        let model = initial_model(spec.clone(), &t)?;
        let result = train_run(model, &data, &t, Some(preset))?;
        result.save(out, &run_stem(i))?;
        Ok(result.summary.best_val_auroc)
    })?;
    let mut resolved = cfg.clone();
    preset.apply(&mut resolved.train)?;
    write_resolved(Command::TrainVision, &resolved, out)?;
    let mean = best.iter().sum::<f64>() / best.len() as f64;
    Ok(format!(
        "trained {} run(s) of {}; mean best validation AUROC {mean:.4}",
        best.len(),
        preset.label()
    ))
}

fn train_regression(cfg: &ExperimentConfig) -> Result<String> {
    let out = cfg.out_dir()?;
    let manifest = DatasetManifest::read(cfg.dataset_path()?)?;
    let cv = cfg.cv_config()?;
    let runs = dispatch(cfg.runs, cfg.jobs, |i| {
        let run = TabularRun {
            kind: TabularKind::Regression,
            run: i,
            seed: cfg.seed + i as u64,
            source: None,
            outcome: run_regression(&manifest, &cv)?,
        };
        write_json(&out.join(format!("{}.json", run_stem(i))), &run)?;
        Ok(run)
    })?;
    write_json(&out.join(REGRESSION_MODEL_FILE), &runs[0].outcome.model)?;
    let mut resolved = cfg.clone();
    resolved.cv = cv;
    write_resolved(Command::TrainRegression, &resolved, out)?;
    Ok(format!(
        "fitted {} regression run(s); selected C = {:.4e}",
        runs.len(),
        runs[0].outcome.model.c
    ))
}

/// Indices of `run_<i>.json` files in `dir`, ascending.
pub fn run_indices(dir: &Path) -> Result<Vec<usize>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::MissingInput(format!("{}: {e}", dir.display())))?;
    let mut idx: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("run_")?.strip_suffix(".json")?.parse().ok()
        })
        .collect();
    idx.sort_unstable();
    Ok(idx)
}

fn fuse(cfg: &ExperimentConfig) -> Result<String> {
    let out = cfg.out_dir()?;
    let vision_dir = &cfg.inputs[0];
    let idx = run_indices(vision_dir)?;
    if idx.is_empty() {
        return Err(CliError::MissingInput(format!("no run_<i>.json files in {}", vision_dir.display())));
    }
    let data = LoadedDataset::load(cfg.dataset_path()?)?;
    let cv = cfg.cv_config()?;
    let runs = dispatch(idx.len(), cfg.jobs, |k| {
        let stem = run_stem(idx[k]);
        let vision = RunResult::load(vision_dir, &stem)?;
        let arch: ArchitectureName = vision.summary.architecture.parse()?;
        let spec = ArchitectureSpec::new(arch).with_input_size(vision.summary.config.input_size);
        let model = Model::build(spec, Init::Weights(vision.best_weights))?;
        let probs = predict_all(&model, &data, &vision.summary.config.augmentation_config())?;
        let run = TabularRun {
            kind: TabularKind::Fusion,
            run: idx[k],
            seed: vision.summary.seed,
            source: Some(stem.clone()),
            outcome: run_fusion(&data.manifest, &probs, &cv)?,
        };
        write_json(&out.join(format!("{stem}.json")), &run)?;
        Ok(run)
    })?;
    let mut resolved = cfg.clone();
    resolved.cv = cv;
    write_resolved(Command::Fuse, &resolved, out)?;
    let cnn: f64 = runs.iter().map(|r| r.outcome.importance.last().copied().unwrap_or(0.0)).sum::<f64>()
        / runs.len() as f64;
    Ok(format!(
        "fused {} vision run(s); mean CNN feature importance {cnn:.1}%",
        runs.len()
    ))
}

enum LoadedRun {
    Vision(Box<RunSummary>),
    Tabular(Box<TabularRun>),
}

fn load_run(path: &Path) -> Result<LoadedRun> {
    let value: serde_json::Value = read_json(path)?;
    let parse_err = |e: serde_json::Error| CliError::Config(format!("{}: {e}", path.display()));
    if value.get("kind").is_some() {
        Ok(LoadedRun::Tabular(Box::new(serde_json::from_value(value).map_err(parse_err)?)))
    } else {
        Ok(LoadedRun::Vision(Box::new(serde_json::from_value(value).map_err(parse_err)?)))
    }
}

fn row_label(run: &LoadedRun) -> (String, String) {
    match run {
        LoadedRun::Vision(s) => (
            "CNN".into(),
            s.preset.map(|p| p.label().to_string()).unwrap_or_else(|| s.architecture.clone()),
        ),
        LoadedRun::Tabular(t) => match t.kind {
            TabularKind::Regression => ("Regression".into(), "Clinical data".into()),
            TabularKind::Fusion => ("Regression + CNN".into(), "Clinical data + CNN predictions".into()),
        },
    }
}

fn evaluate_dir(dir: &Path) -> Result<(SourceRuns, Option<ImportanceSeries>)> {
    let idx = run_indices(dir)?;
    if idx.is_empty() {
        return Err(CliError::MissingInput(format!("no run_<i>.json files in {}", dir.display())));
    }
    let mut label: Option<(String, String)> = None;
    let mut src = SourceRuns {
        dir: dir.to_path_buf(),
        model: String::new(),
        config: String::new(),
        runs: Vec::new(),
        metrics: Vec::new(),
        skipped: Vec::new(),
    };
    let mut importance: Option<(Vec<String>, Vec<f64>, usize)> = None;
    for i in idx {
        let stem = run_stem(i);
        let run = load_run(&dir.join(format!("{stem}.json")))?;
        let l = row_label(&run);
        match &label {
            None => label = Some(l),
            Some(prev) if *prev != l => {
                return Err(CliError::Config(format!(
                    "{} mixes results of {} / {} and {} / {}",
                    dir.display(),
                    prev.0,
                    prev.1,
                    l.0,
                    l.1
                )))
            }
            Some(_) => {}
        }
        let metrics = match &run {
            LoadedRun::Vision(s) => s.test_metrics,
            LoadedRun::Tabular(t) => {
                let o = &t.outcome;
                let acc = importance.get_or_insert_with(|| (o.model.feature_names.clone(), vec![0.0; o.importance.len()], 0));
                if acc.0 != o.model.feature_names {
                    return Err(CliError::Config(format!("{}: feature sets differ between runs", dir.display())));
                }
                acc.1.iter_mut().zip(&o.importance).for_each(|(a, v)| *a += v);
                acc.2 += 1;
                o.test_metrics
            }
        };
        match metrics {
            Some(m) => {
                src.runs.push(stem);
                src.metrics.push(m);
            }
            None => src.skipped.push(stem),
        }
    }
    let (model, config) = label.expect("at least one run");
    src.model = model.clone();
    src.config = config;
    let importance = importance.map(|(names, sums, n)| ImportanceSeries {
        model,
        features: names.into_iter().zip(sums.into_iter().map(|s| s / n as f64)).collect(),
    });
    Ok((src, importance))
}

/// Aggregates result directories into an [`Evaluation`]; nothing is written
/// unless every directory aggregates.
pub fn build_evaluation(dirs: &[PathBuf]) -> Result<Evaluation> {
    let mut rows = Vec::new();
    let mut sources = Vec::new();
    let mut importance = Vec::new();
    for dir in dirs {
        let (src, imp) = evaluate_dir(dir)?;
        if src.metrics.len() < 2 {
            return Err(CliError::Config(format!(
                "{}: {} scorable run(s), at least 2 are needed",
                dir.display(),
                src.metrics.len()
            )));
        }
        let agg = aggregate_runs(&src.metrics).map_err(octmh_core::Error::from)?;
        rows.push(ReportRow::from_aggregate(src.model.clone(), src.config.clone(), &agg));
        sources.push(src);
        importance.extend(imp);
    }
    Ok(Evaluation {
        table: ResultsTable {
            title: "Test set results".into(),
            caption: String::new(),
            config_header: "Input".into(),
            metrics: MetricKind::ALL.to_vec(),
            show_max: true,
            rows,
        },
        importance,
        sources,
    })
}

fn evaluate(cfg: &ExperimentConfig) -> Result<String> {
    let out = cfg.out_dir()?;
    let eval = build_evaluation(&cfg.inputs)?;
    eval.table.validate()?;
    write_json(&out.join(EVALUATION_FILE), &eval)?;
    write_resolved(Command::Evaluate, cfg, out)?;
    let lines: Vec<String> = eval
        .table
        .rows
        .iter()
        .map(|r| {
            format!(
                "{} / {}: F1 {:.1}, AUROC {:.1} over {} runs",
                r.model, r.config, r.metrics[&MetricKind::F1].mean, r.metrics[&MetricKind::Auroc].mean, r.n_runs
            )
        })
        .collect();
    Ok(lines.join("\n"))
}

/// The report files, keyed by file name.
pub fn render_report(eval: &Evaluation) -> Result<BTreeMap<&'static str, String>> {
    let mut files = BTreeMap::new();
    files.insert(REPORT_MD, render_markdown(&eval.table)?);
    files.insert(REPORT_CSV, render_csv(&eval.table)?);
    files.insert(RESULTS_SVG, render_results_svg(&eval.table)?);
    if !eval.importance.is_empty() {
        let models: Vec<(String, Vec<(String, f64)>)> = eval
            .importance
            .iter()
            .map(|s| (s.model.clone(), s.features.clone()))
            .collect();
        files.insert(IMPORTANCE_SVG, render_importance_svg("Feature importance", &models)?);
    }
    Ok(files)
}

fn report(cfg: &ExperimentConfig) -> Result<String> {
    let out = cfg.out_dir()?;
    let eval: Evaluation = read_json(&cfg.inputs[0])?;
    let files = render_report(&eval)?;
    for (name, body) in &files {
        write_atomic(&out.join(name), body.as_bytes())?;
    }
    write_resolved(Command::Report, cfg, out)?;
    Ok(format!(
        "wrote {} to {}",
        files.keys().copied().collect::<Vec<_>>().join(", "),
        out.display()
    ))
}

#[derive(Serialize)]
struct CaseLine {
    case: &'static str,
    trials: u64,
    probes: usize,
    max_rel_error: f64,
    passed: bool,
}

impl From<&CaseResult> for CaseLine {
    fn from(r: &CaseResult) -> Self {
        Self {
            case: r.case.name(),
            trials: r.trials,
            probes: r.probes,
            max_rel_error: r.max_rel_error,
            passed: r.passed(),
        }
    }
}

fn gradcheck(cfg: &ExperimentConfig) -> Result<String> {
    let results = run_suite(cfg.trials)?;
    let lines: Vec<CaseLine> = results.iter().map(CaseLine::from).collect();
    if let Some(out) = &cfg.out {
        write_json(&out.join(GRADCHECK_FILE), &lines)?;
        write_resolved(Command::Gradcheck, cfg, out)?;
    }
    let text: Vec<String> = lines
        .iter()
        .map(|l| {
            format!(
                "{:<32} {:>4} trials {:>6} probes  max rel err {:.2e}  {}",
                l.case,
                l.trials,
                l.probes,
                l.max_rel_error,
                if l.passed { "ok" } else { "FAIL" }
            )
        })
        .collect();
    let failed: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.case).collect();
    if !failed.is_empty() {
        eprintln!("{}", text.join("\n"));
        return Err(CliError::Verification(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(text.join("\n"))
}
