use std::fmt;

use rayon::prelude::*;
use sdsnet_tensor::Element;

use super::folds::FoldPlan;
use super::metrics::{MetricsReport, MetricsRow};
use super::train::{audit_leakage, evaluate, evaluate_sds_sum, train, TrainLog};
use super::{TrainConfig, TrainError};
use crate::models::{ModelConfig, Precision, SubjectInput};
use crate::Session;

/// A screening method under evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    /// Sum of the twenty answers against the 50-point threshold.
    SdsSum,
    Learned(ModelConfig),
}

impl Method {
    /// `sds_sum`, or the enabled inputs joined by `+`, e.g.
    /// `sds+time+q3dcnn` or `q3dcnn` for video only.
    pub fn name(&self) -> String {
        match self {
            Method::SdsSum => "sds_sum".into(),
            Method::Learned(cfg) => {
                let mut parts = Vec::new();
                if cfg.use_sds {
                    parts.push("sds".to_string());
                }
                if cfg.use_time {
                    parts.push("time".to_string());
                }
                if cfg.has_video() {
                    parts.push(cfg.encoder.to_string());
                }
                parts.join("+")
            }
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Held-out check of one training run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakageAudit {
    pub method: String,
    pub seed: u64,
    pub fold: usize,
    pub held_out: usize,
    /// Training-batch entries compared against the held-out set.
    pub checked: usize,
}

impl fmt::Display for LeakageAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "method={} seed={} fold={} held_out={} batch_entries_checked={} overlaps=0",
            self.method, self.seed, self.fold, self.held_out, self.checked
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub method: String,
    pub seed: u64,
    pub fold: usize,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub plan: FoldPlan,
    pub report: MetricsReport,
    pub audits: Vec<LeakageAudit>,
    pub runs: Vec<RunLog>,
}

/// Runs every method over `folds x seeds`: train on all other folds,
/// evaluate on the held-out one. With `jobs > 1`, distinct runs execute
/// concurrently; results never depend on `jobs`.
pub fn cross_validate(
    sessions: &[Session],
    methods: &[Method],
    cfg: &TrainConfig,
    jobs: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<CvOutcome, TrainError> {
    cfg.validate()?;
    let mut sessions: Vec<&Session> = sessions.iter().collect();
    sessions.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let ids: Vec<_> = sessions.iter().map(|s| (s.subject_id.clone(), s.label)).collect();
    let plan = FoldPlan::stratified(&ids, cfg.folds, cfg.fold_seed)?;
    let owned: Vec<Session> = sessions.into_iter().cloned().collect();

    let mut outcome = CvOutcome { plan, report: MetricsReport::default(), audits: Vec::new(), runs: Vec::new() };
    for method in methods {
        match method {
            Method::SdsSum => {
                for &seed in &cfg.seeds {
                    for fold in 0..cfg.folds {
                        let confusion = evaluate_sds_sum(&owned, &outcome.plan, Some(fold))?;
                        outcome.report.rows.push(MetricsRow { method: method.name(), fold, seed, confusion });
                    }
                }
            }
            Method::Learned(model_cfg) => match model_cfg.dtype {
                Precision::F32 => run_learned::<f32>(&owned, method, model_cfg, cfg, jobs, progress, &mut outcome)?,
                Precision::F64 => run_learned::<f64>(&owned, method, model_cfg, cfg, jobs, progress, &mut outcome)?,
            },
        }
    }
    Ok(outcome)
}

fn run_learned<T: Element>(
    sessions: &[Session],
    method: &Method,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    jobs: usize,
    progress: &(dyn Fn(&str) + Sync),
    outcome: &mut CvOutcome,
) -> Result<(), TrainError> {
    model_cfg.validate()?;
    let name = method.name();
    let data = sessions
        .iter()
        .map(|s| SubjectInput::<T>::from_session(s, model_cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let plan = &outcome.plan;
    let runs: Vec<(u64, usize)> = cfg.seeds.iter().flat_map(|&s| (0..cfg.folds).map(move |f| (s, f))).collect();
    let run = |&(seed, fold): &(u64, usize)| -> Result<(MetricsRow, LeakageAudit, RunLog), TrainError> {
        let trained = train(&data, plan, Some(fold), model_cfg, cfg, seed)?;
        let checked = audit_leakage(plan, &trained.log)?;
        let confusion = evaluate(&trained.model, &data, plan, Some(fold))?;
        progress(&format!(
            "{name} seed={seed} fold={fold} final_loss={:.4} held_out_accuracy={:.3}",
            trained.log.losses().last().copied().unwrap_or(f64::NAN),
            confusion.accuracy()
        ));
        Ok((
            MetricsRow { method: name.clone(), fold, seed, confusion },
            LeakageAudit { method: name.clone(), seed, fold, held_out: plan.members(fold).len(), checked },
            RunLog { method: name.clone(), seed, fold, log: trained.log },
        ))
    };
    let results: Vec<_> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
        pool.install(|| runs.par_iter().map(run).collect::<Result<_, _>>())?
    } else {
        runs.iter().map(run).collect::<Result<_, _>>()?
    };
    for (row, audit, log) in results {
        outcome.report.rows.push(row);
        outcome.audits.push(audit);
        outcome.runs.push(log);
    }
    Ok(())
}
