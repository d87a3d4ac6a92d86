use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use anyhow::Context;
use sdsnet::datagen::{generate as generate_cohort, CohortSummary};
use sdsnet::gradsuite::full_suite;
use sdsnet::ingest::{read_store, write_store};
use sdsnet::models::{load_checkpoint, save_checkpoint, EncoderKind, Model, ModelConfig, ModelError, Precision, SubjectInput};
use sdsnet::tensor::Element;
use sdsnet::train_eval::{
    cross_validate, evaluate, evaluate_sds_sum, train as train_model, Confusion, FoldPlan, Method, TrainConfig,
    TrainError, TrainLog, CSV_HEADER,
};
use sdsnet::Session;

use crate::config::RunConfig;
use crate::{CvArgs, DataArg, EvalArgs, Failure, GenerateArgs, GradcheckArgs, RunArgs, TrainArgs};

type CmdResult = Result<ExitCode, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(msg) | TrainError::Model(ModelError::Config(msg)) => Failure::Usage(msg),
            other => Failure::Run(other.into()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        TrainError::from(e).into()
    }
}

struct Resolved {
    file: RunConfig,
    model: ModelConfig,
    train: TrainConfig,
}

fn resolve(run: &RunArgs) -> Result<Resolved, Failure> {
    let file = RunConfig::load(run.config.as_deref())?;
    let (preset, mut model) = file.model(run.preset.as_deref())?;
    if let Some(e) = &run.encoder {
        model.encoder = EncoderKind::from_str(e).map_err(|e| usage(e.to_string()))?;
    }
    let mut train = file.train(&preset)?;
    if let Some(n) = run.epochs {
        train.epochs = n;
    }
    if let Some(lr) = run.learning_rate {
        train.learning_rate = lr;
    }
    if let Some(s) = &run.seeds {
        train.seeds = s.clone();
    }
    model.validate()?;
    train.validate()?;
    Ok(Resolved { file, model, train })
}

fn data_root(flag: &DataArg, file: &RunConfig) -> Result<PathBuf, Failure> {
    let root = flag
        .data
        .clone()
        .or_else(|| file.data.clone())
        .ok_or_else(|| usage("no session store given: pass --data or set SDSNET_DATA"))?;
    if !root.is_dir() {
        return Err(usage(format!("data directory {} does not exist", root.display())));
    }
    Ok(root)
}

fn load_sessions(root: &Path) -> Result<Vec<Session>, Failure> {
    let mut sessions = read_store(root).with_context(|| format!("reading {}", root.display()))?;
    if sessions.is_empty() {
        return Err(usage(format!("no sessions under {}", root.display())));
    }
    sessions.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    Ok(sessions)
}

fn fold_plan(sessions: &[Session], cfg: &TrainConfig, fold: Option<usize>) -> Result<FoldPlan, Failure> {
    let ids: Vec<_> = sessions.iter().map(|s| (s.subject_id.clone(), s.label)).collect();
    let plan = FoldPlan::stratified(&ids, cfg.folds, cfg.fold_seed)?;
    if let Some(f) = fold.filter(|&f| f >= cfg.folds) {
        return Err(usage(format!("fold {f} out of range for {} folds", cfg.folds)));
    }
    Ok(plan)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn generate(a: GenerateArgs) -> CmdResult {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::load(a.run.config.as_deref())?.gen_spec()?,
    };
    if let Some(n) = a.n_subjects {
        spec.n_subjects = n;
    }
    if let Some(p) = a.prevalence {
        spec.prevalence = p;
    }
    if let Some(q) = a.agreement {
        spec.sds_agreement = q;
    }
    if let Some(s) = a.signal_strength {
        spec.signal_strength = s;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let sessions = generate_cohort(&spec).map_err(|e| usage(e.to_string()))?;
    write_store(&a.out, &sessions).with_context(|| format!("writing store {}", a.out.display()))?;
    println!("wrote {} sessions to {}", sessions.len(), a.out.display());
    println!("{}", CohortSummary::of(&sessions));
    Ok(ExitCode::SUCCESS)
}

fn format_log(log: &TrainLog) -> String {
    let mut out = format!("held_out_fold {}\n", log.held_out.map_or("none".to_string(), |f| f.to_string()));
    for e in &log.epochs {
        let batches: Vec<String> = e.batches.iter().map(|b| b.join("+")).collect();
        let _ = writeln!(out, "epoch {} mean_loss {:.6} batches {}", e.epoch, e.mean_loss, batches.join(" "));
    }
    out
}

pub fn train(a: TrainArgs) -> CmdResult {
    let r = resolve(&a.run)?;
    let sessions = load_sessions(&data_root(&a.data, &r.file)?)?;
    let plan = fold_plan(&sessions, &r.train, a.fold)?;
    let seed = a.seed.unwrap_or(r.train.seeds[0]);
    let log = match r.model.dtype {
        Precision::F32 => train_to::<f32>(&sessions, &plan, a.fold, &r, seed, &a.out)?,
        Precision::F64 => train_to::<f64>(&sessions, &plan, a.fold, &r, seed, &a.out)?,
    };
    for e in &log.epochs {
        println!("epoch {:>4}  mean_loss {:.6}", e.epoch, e.mean_loss);
    }
    println!("checkpoint written to {}", a.out.display());
    if let Some(path) = &a.log {
        write_file(path, &format_log(&log))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn train_to<T: Element>(
    sessions: &[Session],
    plan: &FoldPlan,
    fold: Option<usize>,
    r: &Resolved,
    seed: u64,
    out: &Path,
) -> Result<TrainLog, Failure> {
    let data = sessions.iter().map(|s| SubjectInput::<T>::from_session(s, &r.model)).collect::<Result<Vec<_>, _>>()?;
    let trained = train_model(&data, plan, fold, &r.model, &r.train, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_checkpoint(trained.model.params(), out).map_err(|e| Failure::Run(e.into()))?;
    Ok(trained.log)
}

fn csv_row(method: &str, fold: Option<usize>, c: &Confusion) -> String {
    let [acc, sens, spec] = c.rates();
    let fold = fold.map_or("all".to_string(), |f| f.to_string());
    format!("{method},{fold},,{},{},{},{},{acc:.6},{sens:.6},{spec:.6}", c.tp, c.fn_, c.fp, c.tn)
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let r = resolve(&a.run)?;
    let sessions = load_sessions(&data_root(&a.data, &r.file)?)?;
    let plan = fold_plan(&sessions, &r.train, a.fold)?;
    let (method, confusion) = match &a.checkpoint {
        None => ("sds_sum".to_string(), evaluate_sds_sum(&sessions, &plan, a.fold)?),
        Some(path) => {
            let c = match r.model.dtype {
                Precision::F32 => eval_checkpoint::<f32>(&sessions, &plan, a.fold, &r.model, path)?,
                Precision::F64 => eval_checkpoint::<f64>(&sessions, &plan, a.fold, &r.model, path)?,
            };
            (Method::Learned(r.model.clone()).name(), c)
        }
    };
    println!("{CSV_HEADER}");
    println!("{}", csv_row(&method, a.fold, &confusion));
    Ok(ExitCode::SUCCESS)
}

fn eval_checkpoint<T: Element>(
    sessions: &[Session],
    plan: &FoldPlan,
    fold: Option<usize>,
    cfg: &ModelConfig,
    path: &Path,
) -> Result<Confusion, Failure> {
    let params = load_checkpoint::<T>(path).map_err(|e| Failure::Run(e.into()))?;
    let model = Model::from_params(cfg.clone(), params)
        .map_err(|e| usage(format!("{}: {e} (use the model config the checkpoint was trained with)", path.display())))?;
    let data = sessions.iter().map(|s| SubjectInput::<T>::from_session(s, cfg)).collect::<Result<Vec<_>, _>>()?;
    Ok(evaluate(&model, &data, plan, fold)?)
}

/// `sds_sum`, or `+`-joined inputs such as `sds+time+q3dcnn`.
fn parse_method(name: &str, base: &ModelConfig) -> Result<Method, Failure> {
    if name == "sds_sum" {
        return Ok(Method::SdsSum);
    }
    let mut cfg = ModelConfig { encoder: EncoderKind::None, use_sds: false, use_time: false, ..base.clone() };
    for part in name.split('+') {
        match part {
            "sds" => cfg.use_sds = true,
            "time" => cfg.use_time = true,
            enc => {
                if cfg.encoder != EncoderKind::None {
                    return Err(usage(format!("method {name:?} names two encoders")));
                }
                cfg.encoder = EncoderKind::from_str(enc).map_err(|e| usage(format!("method {name:?}: {e}")))?;
            }
        }
    }
    cfg.validate().map_err(|e| usage(format!("method {name:?}: {e}")))?;
    Ok(Method::Learned(cfg))
}

pub fn cv(a: CvArgs) -> CmdResult {
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let r = resolve(&a.run)?;
    let methods = match &a.methods {
        Some(names) => names.iter().map(|n| parse_method(n, &r.model)).collect::<Result<Vec<_>, _>>()?,
        None => vec![Method::SdsSum, Method::Learned(r.model.clone())],
    };
    let sessions = load_sessions(&data_root(&a.data, &r.file)?)?;
    let start = Instant::now();
    let out = cross_validate(&sessions, &methods, &r.train, a.jobs, &|line| {
        eprintln!("[{:>7.1}s] {line}", start.elapsed().as_secs_f64());
    })?;

    let mut audit = String::new();
    for (f, size) in out.plan.sizes().iter().enumerate() {
        let _ = writeln!(audit, "fold {f} size {size} members {}", out.plan.members(f).join(","));
    }
    for line in &out.audits {
        let _ = writeln!(audit, "{line}");
    }
    for run in &out.runs {
        let losses: Vec<String> = run.log.losses().iter().map(|l| format!("{l:.6}")).collect();
        let _ = writeln!(audit, "losses method={} seed={} fold={} {}", run.method, run.seed, run.fold, losses.join(" "));
        for e in &run.log.epochs {
            let batches: Vec<String> = e.batches.iter().map(|b| b.join("+")).collect();
            let _ = writeln!(
                audit,
                "batches method={} seed={} fold={} epoch={} {}",
                run.method,
                run.seed,
                run.fold,
                e.epoch,
                batches.join(" ")
            );
        }
    }
    let _ = writeln!(audit, "runs_audited={} overlaps=0", out.audits.len());

    let table = out.report.to_table();
    write_file(&a.report.join("metrics.csv"), &out.report.to_csv())?;
    write_file(&a.report.join("report.txt"), &table)?;
    write_file(&a.report.join("audit.log"), &audit)?;
    print!("{table}");
    println!("reports written to {}", a.report.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let start = Instant::now();
    let suite = full_suite(a.seed, a.max_elements)?;
    let mut failed = 0;
    for entry in &suite {
        let ok = entry.passed();
        failed += usize::from(!ok);
        println!(
            "{:<4} {:<20} max_rel={:.3e}",
            if ok { "PASS" } else { "FAIL" },
            entry.name,
            entry.report.max_rel_error()
        );
        if entry.report.entries.len() > 1 && entry.name.starts_with("pipeline") {
            for line in entry.report.to_string().lines() {
                println!("       {line}");
            }
        }
    }
    println!(
        "{} checks, {} failed, tolerance {:.0e}, {:.1}s",
        suite.len(),
        failed,
        suite.first().map_or(0.0, |e| e.report.tolerance),
        start.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
