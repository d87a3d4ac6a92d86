use sdsnet_tensor::{Element, Tape, Tensor, Var};

use super::config::ModelConfig;
use super::params::Bound;
use super::ModelError;
use crate::{ANSWER_LEVELS, QUESTIONS};

/// `[a_q, s_q, t_q]` for all twenty questions, concatenated and passed
/// through the fully connected head. Returns the depression probability as
/// a one-element tensor.
///
/// Disabled answer or time slots are zero-filled so the input width does
/// not depend on the ablation.
pub fn fuse_and_classify<T: Element>(
    tape: &mut Tape<T>,
    p: &Bound,
    cfg: &ModelConfig,
    features: &[Var],
    answers: &[u8],
    times: &[f64],
) -> Result<Var, ModelError> {
    if answers.len() != QUESTIONS || times.len() != QUESTIONS {
        return Err(ModelError::Input(format!(
            "expected {QUESTIONS} answers and times, got {} and {}",
            answers.len(),
            times.len()
        )));
    }
    if cfg.has_video() && features.len() != QUESTIONS {
        return Err(ModelError::Input(format!("expected {QUESTIONS} question features, got {}", features.len())));
    }
    let mut tabular = Vec::with_capacity(QUESTIONS * 5);
    let mut parts = Vec::with_capacity(2 * QUESTIONS);
    for q in 0..QUESTIONS {
        if !(1..=ANSWER_LEVELS as u8).contains(&answers[q]) {
            return Err(ModelError::Input(format!("question {}: answer {} outside 1..4", q + 1, answers[q])));
        }
        tabular.clear();
        tabular.extend((1..=ANSWER_LEVELS as u8).map(|a| if cfg.use_sds && a == answers[q] { 1.0 } else { 0.0 }));
        tabular.push(if cfg.use_time { times[q] } else { 0.0 });
        if cfg.has_video() {
            parts.push(features[q]);
        }
        parts.push(tape.constant(Tensor::from_f64(vec![tabular.len()], &tabular)?)?);
    }
    let mut x = tape.concat(&parts)?;
    for i in 1..=cfg.fusion_hidden.len() {
        let (w, b) = (p.var(&format!("fusion.fc{i}.w"))?, p.var(&format!("fusion.fc{i}.b"))?);
        x = tape.linear(x, w, b)?;
        x = tape.relu(x)?;
    }
    let out = tape.linear(x, p.var("fusion.out.w")?, p.var("fusion.out.b")?)?;
    Ok(tape.sigmoid(out)?)
}
