use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use lasoftmoe::data::{self, DataError, Dataset, Splits, Subtype};
use lasoftmoe::encoder::{ClipModel, ModelError, PromptError, PromptSet, TemplateId};
use lasoftmoe::gradsuite::{run_suite, suite_passed, GradScope, SuiteOptions};
use lasoftmoe::tensor::{read_checkpoint, write_checkpoint, CheckpointError};
use lasoftmoe::trainkit::{
    self, compute_metrics, metrics, score_split, AblationConfig, MetricsReport, ScoreSet, ThresholdPolicy, TrainError,
};
use serde_json::json;
use thiserror::Error;

use crate::config::{parse_override, ConfigError, RunConfig, RESOLVED_CONFIG};
use crate::Common;

pub const CHECKPOINT_FILE: &str = "checkpoint.lsmt";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const LOG_FILE: &str = "train.log";
pub const EMBEDDINGS_FILE: &str = "embeddings.uaem";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Spec(_) | DataError::Batch(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::UnknownTemplate(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Prompt(p) => p.into(),
            ModelError::Tensor(t) => CliError::Numeric(t.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Variant { variant, source } => match CliError::from(*source) {
                CliError::Usage(m) => CliError::Usage(format!("{variant}: {m}")),
                CliError::Data(m) => CliError::Data(format!("{variant}: {m}")),
                CliError::Numeric(m) => CliError::Numeric(format!("{variant}: {m}")),
                other => other,
            },
            TrainError::Diverged { .. } | TrainError::Adam(_) | TrainError::Metrics(_) => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Config file (or `fallback` when no --config is given), then --set, then
/// the command's own flags.
fn resolve(common: &Common, fallback: Option<PathBuf>, flags: Vec<(&str, String)>) -> Result<RunConfig, CliError> {
    let mut pairs = Vec::new();
    if let Some(path) = common.config.clone().or(fallback) {
        pairs.extend(RunConfig::read_file(&path)?);
    }
    for s in &common.set {
        pairs.push(parse_override(s)?);
    }
    if let Some(seed) = common.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    pairs.extend(flags.into_iter().map(|(k, v)| (k.to_string(), v)));
    Ok(RunConfig::from_pairs(&pairs)?)
}

fn path_flag(key: &'static str, p: Option<PathBuf>) -> Option<(&'static str, String)> {
    p.map(|p| (key, p.display().to_string()))
}

fn require_out(common: &Common) -> Result<PathBuf, CliError> {
    common
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out DIR is required for this command".into()))
}

/// Creates `dir` and writes the resolved config into it.
fn start_run_dir(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_file(&dir.join(RESOLVED_CONFIG), cfg.to_file_string())
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.data_dir
        .clone()
        .ok_or_else(|| CliError::Usage("no dataset: pass --data DIR or set paths.data".into()))
}

fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    let dir = data_dir(cfg)?;
    let splits = data::read_splits(&dir)?;
    let e = &cfg.encoder;
    for (name, d) in splits.iter() {
        if d.height != e.image_size || d.width != e.image_size || d.channels != e.channels {
            return Err(CliError::Data(format!(
                "{name} split images are {}x{}x{}, encoder expects {}x{}x{}",
                d.height, d.width, d.channels, e.image_size, e.image_size, e.channels
            )));
        }
    }
    Ok(splits)
}

fn load_prompts(cfg: &RunConfig) -> Result<PromptSet, CliError> {
    let prompts = match &cfg.prompts_file {
        Some(p) => PromptSet::from_file(p)?,
        None => PromptSet::default(),
    };
    prompts.template(cfg.train.template)?;
    Ok(prompts)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<ClipModel<f64>, CliError> {
    let file = File::open(checkpoint).map_err(|e| io_err(checkpoint, e))?;
    let store = read_checkpoint::<f64, _>(std::io::BufReader::new(file))?;
    let mut model = ClipModel::<f64>::new(cfg.encoder.clone(), cfg.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    model
        .load_params(store)
        .map_err(|e| CliError::Data(format!("{}: {e}", checkpoint.display())))?;
    Ok(model)
}

fn save_checkpoint(model: &ClipModel<f64>, path: &Path) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&model.params, &mut w).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    let candidate = checkpoint.parent().unwrap_or(Path::new(".")).join(RESOLVED_CONFIG);
    candidate.exists().then_some(candidate)
}

fn split_of<'a>(splits: &'a Splits, name: &str) -> Result<&'a Dataset, CliError> {
    splits
        .get(name)
        .ok_or_else(|| CliError::Usage(format!("unknown split {name:?}")))
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

pub fn gen_data(common: &Common) -> Result<ExitCode, CliError> {
    let out = require_out(common)?;
    let cfg = resolve(common, None, vec![])?;
    start_run_dir(&out, &cfg)?;
    let splits = data::generate(&cfg.data_spec())?;
    data::write_splits(&splits, &out)?;
    println!("{:<6}{:>8}{:>8}{:>8}{:>8}{:>10}", "split", "total", "live", "phys", "digital", "subjects");
    for (name, d) in splits.iter() {
        println!(
            "{:<6}{:>8}{:>8}{:>8}{:>8}{:>10}",
            name,
            d.len(),
            d.count(Subtype::Live),
            d.count(Subtype::Phys),
            d.count(Subtype::Digital),
            d.subject_ids().len()
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub fn train(common: &Common, data: Option<PathBuf>, variant: Option<String>) -> Result<ExitCode, CliError> {
    let out = require_out(common)?;
    let flags = path_flag("paths.data", data)
        .into_iter()
        .chain(variant.map(|v| ("encoder.variant", v)))
        .collect();
    let cfg = resolve(common, None, flags)?;
    start_run_dir(&out, &cfg)?;
    let splits = load_splits(&cfg)?;
    let prompts = load_prompts(&cfg)?;
    let tc = cfg.train_config();

    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let mut log_line = |line: String| {
        eprintln!("{line}");
        let _ = writeln!(log, "{line}");
    };
    log_line(format!(
        "variant {} seed {} epochs {} batch {} lr {} train samples {}",
        cfg.variant(),
        tc.seed,
        tc.epochs,
        tc.batch_size,
        tc.learning_rate,
        splits.train.len()
    ));
    let result = trainkit::train_with_progress(cfg.variant(), &cfg.encoder, &splits.train, &prompts, &tc, |e, l| {
        log_line(format!("epoch {} loss {l}", e + 1))
    });
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            log_line(format!("error: {e}"));
            return Err(e.into());
        }
    };
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in outcome.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_file(&out.join(LOSS_FILE), csv)?;
    save_checkpoint(&outcome.model, &out.join(CHECKPOINT_FILE))?;
    let report = trainkit::evaluate(
        &outcome.model,
        &splits.eval,
        &splits.test,
        &prompts,
        tc.template,
        cfg.threshold_policy,
    )?;
    log_line(format!(
        "steps {} test acer {} acc {} threshold {} ({})",
        outcome.steps, report.acer, report.acc, report.threshold, cfg.threshold_policy
    ));
    drop(log_line);
    log.flush().map_err(|e| io_err(&log_path, e))?;
    let text = pretty(&report);
    write_file(&out.join(METRICS_FILE), &text)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn eval_one(
    model: &ClipModel<f64>,
    splits: &Splits,
    split: &Dataset,
    prompts: &PromptSet,
    template: TemplateId,
    policy: ThresholdPolicy,
) -> Result<MetricsReport, CliError> {
    let eval_scores: Option<ScoreSet> = match policy {
        ThresholdPolicy::EerOnEval => Some(score_split(model, &splits.eval, prompts, template)?),
        ThresholdPolicy::Fixed(_) => None,
    };
    let threshold = metrics::resolve_threshold(policy, eval_scores.as_ref())
        .map_err(|e| CliError::Data(format!("threshold from eval split: {e}")))?;
    let scores = score_split(model, split, prompts, template)?;
    compute_metrics(&scores, threshold).map_err(|e| CliError::Numeric(e.to_string()))
}

pub fn eval(
    common: &Common,
    checkpoint: &Path,
    data: Option<PathBuf>,
    split: Option<String>,
    template: Option<String>,
    all_templates: bool,
) -> Result<ExitCode, CliError> {
    let flags = path_flag("paths.data", data)
        .into_iter()
        .chain(split.map(|s| ("eval.split", s)))
        .chain(template.map(|t| ("train.template", t)))
        .collect();
    let cfg = resolve(common, sibling_config(checkpoint), flags)?;
    if let Some(out) = &common.out {
        start_run_dir(out, &cfg)?;
    }
    let model = load_model(&cfg, checkpoint)?;
    let splits = load_splits(&cfg)?;
    let prompts = load_prompts(&cfg)?;
    let split = split_of(&splits, &cfg.eval_split)?;
    let policy = cfg.threshold_policy;

    let templates: Vec<TemplateId> = if all_templates {
        prompts.ids().collect()
    } else {
        vec![cfg.train.template]
    };
    let mut rows = Vec::with_capacity(templates.len());
    for t in &templates {
        rows.push((*t, eval_one(&model, &splits, split, &prompts, *t, policy)?));
    }
    let complete = rows.iter().all(|(_, r)| r.is_complete());
    let doc = if all_templates {
        let accs: Vec<f64> = rows.iter().map(|(_, r)| r.acc).collect();
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        json!({
            "split": cfg.eval_split,
            "threshold_policy": policy.to_string(),
            "reports": rows.iter().map(|(t, r)| json!({"template": t.to_string(), "report": r})).collect::<Vec<_>>(),
            "acc_spread": {"min": min, "max": max, "range": max - min},
        })
    } else {
        let (t, r) = &rows[0];
        json!({
            "split": cfg.eval_split,
            "template": t.to_string(),
            "threshold_policy": policy.to_string(),
            "report": r,
        })
    };
    let text = pretty(&doc);
    if let Some(out) = &common.out {
        write_file(&out.join("eval.json"), &text)?;
    }
    print!("{text}");
    if !complete {
        eprintln!(
            "warning: split {} lacks live or attack samples; AUC and EER are null",
            cfg.eval_split
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(common: &Common, data: Option<PathBuf>, seeds: Option<String>, parallel: bool) -> Result<ExitCode, CliError> {
    let out = require_out(common)?;
    let flags = path_flag("paths.data", data)
        .into_iter()
        .chain(seeds.map(|s| ("ablate.seeds", s)))
        .chain(parallel.then(|| ("ablate.parallel", "true".to_string())))
        .collect();
    let cfg = resolve(common, None, flags)?;
    start_run_dir(&out, &cfg)?;
    if cfg.ablate_seeds.len() < 3 {
        eprintln!(
            "warning: {} seed(s); medians over fewer than 3 seeds carry high variance",
            cfg.ablate_seeds.len()
        );
    }
    let splits = load_splits(&cfg)?;
    let prompts = load_prompts(&cfg)?;
    let acfg = AblationConfig {
        encoder: cfg.encoder.clone(),
        train: cfg.train_config(),
        seeds: cfg.ablate_seeds.clone(),
        policy: cfg.threshold_policy,
        parallel: cfg.ablate_parallel,
    };
    let report = trainkit::run_ablation(&splits, &prompts, &acfg)?;
    write_file(&out.join("ablation.json"), pretty(&report))?;
    let table = report.table();
    write_file(&out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(common: &Common, scope: &str, corrupt: Option<f64>) -> Result<ExitCode, CliError> {
    let scope: GradScope = scope.parse().map_err(CliError::Usage)?;
    let cfg = resolve(common, None, vec![])?;
    if let Some(out) = &common.out {
        start_run_dir(out, &cfg)?;
    }
    let opts = SuiteOptions {
        h: cfg.gradcheck_h,
        tol: cfg.gradcheck_tol,
        corrupt,
    };
    let start = std::time::Instant::now();
    let entries = run_suite(scope, &opts).map_err(|e| CliError::Numeric(e.to_string()))?;
    let mut text = String::new();
    for e in &entries {
        text.push_str(&format!(
            "{:<40} max_rel_err {:.3e}  checked {:>5}  {}\n",
            e.component,
            e.report.max_rel_error,
            e.report.checked,
            if e.report.passed { "PASS" } else { "FAIL" }
        ));
    }
    let passed = suite_passed(&entries);
    let failed = entries.iter().filter(|e| !e.report.passed).count();
    text.push_str(&format!(
        "scope {scope}: {} components, {failed} failed, tol {:e}\n",
        entries.len(),
        opts.tol
    ));
    eprintln!("gradcheck finished in {:.1}s", start.elapsed().as_secs_f64());
    if let Some(out) = &common.out {
        write_file(&out.join("gradcheck.txt"), &text)?;
    }
    print!("{text}");
    if passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(CliError::Numeric(format!("gradient check failed for {failed} component(s)")))
    }
}

pub fn dump_embeddings(
    common: &Common,
    checkpoint: &Path,
    data: Option<PathBuf>,
    split: Option<String>,
) -> Result<ExitCode, CliError> {
    let out = require_out(common)?;
    let flags = path_flag("paths.data", data)
        .into_iter()
        .chain(split.map(|s| ("eval.split", s)))
        .collect();
    let cfg = resolve(common, sibling_config(checkpoint), flags)?;
    start_run_dir(&out, &cfg)?;
    let model = load_model(&cfg, checkpoint)?;
    let splits = load_splits(&cfg)?;
    let split = split_of(&splits, &cfg.eval_split)?;
    let path = out.join(EMBEDDINGS_FILE);
    let rows = trainkit::dump_embeddings(&model, split, &path)?;
    println!(
        "wrote {} rows of dimension {} to {}",
        rows.len(),
        rows.first().map_or(0, |r| r.vector.len()),
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}
