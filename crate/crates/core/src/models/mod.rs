//! Question-wise video encoders, the conditional fusion head and the
//! questionnaire sum-score baseline.

mod checkpoint;
mod config;
pub mod encoders;
mod fusion;
mod params;

use std::path::PathBuf;

use rayon::prelude::*;
use sdsnet_tensor::{Element, Tape, Tensor, TensorError, Var};
use thiserror::Error;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{EncoderKind, ModelConfig, PoolMode, Precision, Stage, TABULAR_DIM};
pub use fusion::fuse_and_classify;
pub use params::{Bound, ParamStore, Section};

use crate::ingest::Preprocessor;
use crate::{Label, Session, QUESTIONS, SDS_THRESHOLD};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("parameters: {0}")]
    Params(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

/// Decision rule on a predicted probability: depression iff `p > 0.5`.
pub fn decide(p: f64) -> Label {
    if p > 0.5 {
        Label::Depression
    } else {
        Label::Normal
    }
}

/// Depression iff the twenty answers sum to at least 50.
pub fn sds_sum_baseline(answers: &[u8]) -> Result<Label, ModelError> {
    if answers.len() != QUESTIONS {
        return Err(ModelError::Input(format!("expected {QUESTIONS} answers, got {}", answers.len())));
    }
    if let Some(i) = answers.iter().position(|a| !(1..=4).contains(a)) {
        return Err(ModelError::Input(format!("question {}: answer {} outside 1..4", i + 1, answers[i])));
    }
    let sum: u32 = answers.iter().map(|&a| a as u32).sum();
    Ok(if sum >= SDS_THRESHOLD { Label::Depression } else { Label::Normal })
}

/// A session prepared for one model: clips resampled to the configured
/// size and reshaped to `[1, T, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectInput<T: Element> {
    pub subject_id: String,
    pub label: Label,
    pub answers: Vec<u8>,
    pub times: Vec<f64>,
    /// Empty when the model has no video branch.
    pub clips: Vec<Tensor<T>>,
}

impl<T: Element> SubjectInput<T> {
    pub fn from_session(session: &Session, cfg: &ModelConfig) -> Result<Self, ModelError> {
        session.validate().map_err(|e| ModelError::Input(format!("{}: {e}", session.subject_id)))?;
        let (h, w) = cfg.spatial;
        let want = [cfg.frames, h, w];
        let clips = if cfg.has_video() {
            let prep = Preprocessor::new(cfg.frames, h, w);
            session
                .questions
                .iter()
                .map(|q| {
                    let clip = if q.clip.dims() == want && q.crop_box.is_none() {
                        q.clip.clone()
                    } else {
                        prep.apply(&q.clip, q.crop_box)
                            .map_err(|e| ModelError::Input(format!("{}: {e}", session.subject_id)))?
                    };
                    Ok(clip.cast::<T>().reshape(vec![1, cfg.frames, h, w])?)
                })
                .collect::<Result<_, ModelError>>()?
        } else {
            Vec::new()
        };
        Ok(SubjectInput {
            subject_id: session.subject_id.clone(),
            label: session.label,
            answers: session.answers(),
            times: session.questions.iter().map(|q| q.response_time_sec).collect(),
            clips,
        })
    }
}

/// Loss, prediction and per-parameter gradients for one subject.
#[derive(Debug, Clone)]
pub struct SubjectGrad<T: Element> {
    pub loss: f64,
    pub prob: f64,
    /// Aligned with the parameter store; `None` where no gradient flowed.
    pub grads: Vec<Option<Tensor<T>>>,
}

struct EncodedQuestion<T: Element> {
    tape: Tape<T>,
    feature: Var,
    params: Vec<(usize, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element> {
    config: ModelConfig,
    trace: Vec<Stage>,
    params: ParamStore<T>,
}

impl<T: Element> Model<T> {
    /// Builds a model with freshly initialized parameters. All shape
    /// infeasibility is reported here, never at forward time.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let trace = config.validate()?;
        let params = ParamStore::init(&config.param_specs()?, seed)?;
        Ok(Model { config, trace, params })
    }

    /// Wraps existing parameters after checking they fit `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        let trace = config.validate()?;
        let specs = config.param_specs()?;
        if specs.len() != params.len() {
            return Err(ModelError::Params(format!(
                "config needs {} parameter tensors, checkpoint has {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            match params.get(&spec.name) {
                Some(t) if t.dims() == spec.dims => {}
                Some(t) => {
                    return Err(ModelError::Params(format!("{}: dims {:?}, config needs {:?}", spec.name, t.dims(), spec.dims)))
                }
                None => return Err(ModelError::Params(format!("missing parameter {}", spec.name))),
            }
        }
        let ordered = specs.iter().map(|s| (s.name.clone(), params.get(&s.name).expect("checked").clone())).collect();
        Ok(Model { config, trace, params: ParamStore::from_named(ordered)? })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Encoder shape trace, input to feature.
    pub fn trace(&self) -> &[Stage] {
        &self.trace
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model { config: self.config.clone(), trace: self.trace.clone(), params: self.params.cast() }
    }

    fn check_clip(&self, clip: &Tensor<T>) -> Result<(), ModelError> {
        let (h, w) = self.config.spatial;
        if clip.dims() != [1, self.config.frames, h, w] {
            return Err(ModelError::Input(format!(
                "clip dims {:?}, model expects [1, {}, {h}, {w}]",
                clip.dims(),
                self.config.frames
            )));
        }
        Ok(())
    }

    /// Full forward pass on one tape; returns the probability.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, input: &SubjectInput<T>) -> Result<Var, ModelError> {
        let mut features = Vec::with_capacity(input.clips.len());
        if self.config.has_video() {
            if input.clips.len() != QUESTIONS {
                return Err(ModelError::Input(format!("expected {QUESTIONS} clips, got {}", input.clips.len())));
            }
            for clip in &input.clips {
                self.check_clip(clip)?;
                let x = tape.constant(clip.clone())?;
                features.push(encoders::encode(tape, p, &self.config, x)?);
            }
        }
        fuse_and_classify(tape, p, &self.config, &features, &input.answers, &input.times)
    }

    /// Binary cross entropy of [`Model::forward`] against the label.
    pub fn loss(&self, tape: &mut Tape<T>, p: &Bound, input: &SubjectInput<T>) -> Result<Var, ModelError> {
        let prob = self.forward(tape, p, input)?;
        Ok(tape.bce(prob, input.label.as_u8())?)
    }

    /// Feature vector of one `[1, T, H, W]` clip, without gradients.
    pub fn encode_clip(&self, clip: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_clip(clip)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, Section::Encoder, false)?;
        let x = tape.constant(clip.clone())?;
        let a = encoders::encode(&mut tape, &p, &self.config, x)?;
        Ok(tape.value(a).clone())
    }

    /// One tape per question, run in parallel over shared read-only
    /// parameters. Results are in question order.
    fn encode_questions(&self, input: &SubjectInput<T>, trainable: bool) -> Result<Vec<EncodedQuestion<T>>, ModelError> {
        if !self.config.has_video() {
            return Ok(Vec::new());
        }
        if input.clips.len() != QUESTIONS {
            return Err(ModelError::Input(format!("expected {QUESTIONS} clips, got {}", input.clips.len())));
        }
        input
            .clips
            .par_iter()
            .map(|clip| {
                self.check_clip(clip)?;
                let mut tape = Tape::new();
                let bound = self.params.bind(&mut tape, Section::Encoder, trainable)?;
                let x = tape.constant(clip.clone())?;
                let feature = encoders::encode(&mut tape, &bound, &self.config, x)?;
                let params = bound.vars().collect();
                Ok(EncodedQuestion { tape, feature, params })
            })
            .collect()
    }

    /// Depression probability for one subject.
    pub fn predict(&self, input: &SubjectInput<T>) -> Result<f64, ModelError> {
        let encoded = self.encode_questions(input, false)?;
        let mut tape = Tape::new();
        let features = encoded
            .iter()
            .map(|e| tape.constant(e.tape.value(e.feature).clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let p = self.params.bind(&mut tape, Section::Fusion, false)?;
        let prob = fuse_and_classify(&mut tape, &p, &self.config, &features, &input.answers, &input.times)?;
        Ok(tape.value(prob).item().as_f64())
    }

    /// Loss and `weight * d(loss)/d(params)` for one subject. Question
    /// encoders run on separate tapes; the fusion tape's feature gradients
    /// seed their backward passes, and contributions are summed in question
    /// order so the result does not depend on scheduling.
    pub fn gradients(&self, input: &SubjectInput<T>, weight: f64) -> Result<SubjectGrad<T>, ModelError> {
        let mut encoded = self.encode_questions(input, true)?;
        let mut tape = Tape::new();
        let features = encoded
            .iter()
            .map(|e| tape.param(e.tape.value(e.feature).clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let bound = self.params.bind(&mut tape, Section::Fusion, true)?;
        let prob = fuse_and_classify(&mut tape, &bound, &self.config, &features, &input.answers, &input.times)?;
        let loss = tape.bce(prob, input.label.as_u8())?;
        tape.backward_with(loss, Tensor::scalar(T::of(weight)))?;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        for (i, v) in bound.vars() {
            grads[i] = tape.take_grad(v);
        }
        let seeds = features
            .iter()
            .zip(&encoded)
            .map(|(&f, e)| tape.take_grad(f).map_or_else(|| Tensor::zeros(e.tape.value(e.feature).dims().to_vec()), Ok))
            .collect::<Result<Vec<_>, _>>()?;
        let per_question = encoded
            .par_iter_mut()
            .zip(seeds)
            .map(|(e, seed)| {
                e.tape.backward_with(e.feature, seed)?;
                Ok(e.params.iter().map(|&(i, v)| (i, e.tape.take_grad(v))).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        for contributions in per_question {
            for (i, g) in contributions {
                let Some(g) = g else { continue };
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(SubjectGrad { loss: tape.value(loss).item().as_f64(), prob: tape.value(prob).item().as_f64(), grads })
    }
}
