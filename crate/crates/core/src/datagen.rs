//! Synthetic cohorts with a plantable video cue and a controllable rate of
//! agreement between the questionnaire sum score and the true label.
//!
//! Every subject draws from its own random streams derived from
//! `(seed, subject index)`, so generation order never changes the output.
//! Clips and tabular answers use separate streams: with a zero signal
//! strength the clips are independent of the label bit for bit.

use std::f64::consts::TAU;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use sdsnet_tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Label, QuestionRecord, Session, ANSWER_LEVELS, QUESTIONS, SDS_THRESHOLD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("invalid generation spec: {0}")]
    Config(String),
}

/// Parameters of a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub n_subjects: usize,
    /// Fraction of subjects labelled depression.
    pub prevalence: f64,
    /// Fraction of subjects whose sum-score decision matches their label.
    pub sds_agreement: f64,
    /// Amplitude of the planted temporal cue in depression clips.
    pub signal_strength: f64,
    pub frames_per_clip: usize,
    pub clip_height: usize,
    pub clip_width: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    /// A 200-subject cohort calibrated to 86/20/20/74 questionnaire-vs-label
    /// counts, with desk-sized clips.
    fn default() -> Self {
        GenSpec {
            n_subjects: 200,
            prevalence: 0.47,
            sds_agreement: 0.80,
            signal_strength: 0.25,
            frames_per_clip: 16,
            clip_height: 32,
            clip_width: 32,
            seed: 7,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::Config(m));
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.prevalence) {
            return bad(format!("prevalence {} outside [0,1]", self.prevalence));
        }
        if !(0.0..=1.0).contains(&self.sds_agreement) {
            return bad(format!("sds_agreement {} outside [0,1]", self.sds_agreement));
        }
        if !(self.signal_strength.is_finite() && self.signal_strength >= 0.0) {
            return bad(format!("signal_strength must be finite and >= 0, got {}", self.signal_strength));
        }
        if self.frames_per_clip == 0 || self.clip_height == 0 || self.clip_width == 0 {
            return bad("clip dimensions must be positive".into());
        }
        Ok(())
    }

    /// Depression-labelled subject count.
    pub fn positives(&self) -> usize {
        (self.n_subjects as f64 * self.prevalence).round() as usize
    }
}

/// Median response time in seconds for each label.
pub const MEDIAN_RESPONSE_SEC: [f64; 2] = [3.0, 6.0];
/// Log-scale spread of a subject's overall pace.
const SUBJECT_PACE_SIGMA: f64 = 0.4;
/// Log-scale spread of individual response times around the subject pace.
const RESPONSE_SIGMA: f64 = 0.5;

const BASE_LEVEL: (f64, f64) = (0.4, 0.6);
const TEXTURE_AMPLITUDE: f64 = 0.08;
const PIXEL_NOISE: f64 = 0.03;
/// Full periods of the planted cue over one clip.
const CUE_CYCLES: f64 = 2.0;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Row weights of the planted cue: +1 on the upper half, -1 on the lower
/// half, 0 on the middle row of an odd-height frame. Sums to zero.
fn cue_rows(height: usize) -> Vec<f64> {
    (0..height)
        .map(|r| {
            if r < height / 2 {
                1.0
            } else if r >= height - height / 2 {
                -1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Adds `strength * sin(2π·2·t/T + φ) * rows(h)` to a `[T, H, W]` clip and
/// clamps to `[0, 1]`. The pattern has zero spatial mean in every frame, so
/// only the regional intensity drift over time carries the cue. The phase
/// `φ` is drawn from `rng` even when `strength` is zero.
pub fn plant_signal(clip: &Tensor<f32>, strength: f64, rng: &mut impl Rng) -> Tensor<f32> {
    let phase = rng.random::<f64>() * TAU;
    if strength == 0.0 {
        return clip.clone();
    }
    let [t, h, w] = clip.dims() else { panic!("plant_signal expects [T,H,W], got {:?}", clip.dims()) };
    let (t, h, w) = (*t, *h, *w);
    let rows = cue_rows(h);
    let mut out = clip.clone();
    for (f, frame) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let amp = strength * (TAU * CUE_CYCLES * f as f64 / t as f64 + phase).sin();
        for (r, row) in frame.chunks_exact_mut(w).enumerate() {
            let delta = amp * rows[r];
            for v in row {
                *v = (*v as f64 + delta).clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

fn background_clip(spec: &GenSpec, texture: &[f64], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (t, h, w) = (spec.frames_per_clip, spec.clip_height, spec.clip_width);
    let base = rng.random_range(BASE_LEVEL.0..BASE_LEVEL.1);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("noise sigma");
    let data = (0..t * h * w)
        .map(|i| (base + texture[i % (h * w)] + noise.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Tensor::new(vec![t, h, w], data).expect("clip dims")
}

/// Smooth static per-subject appearance, a few random Gaussian blobs.
fn subject_texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random::<f64>() * h as f64,
                rng.random::<f64>() * w as f64,
                (0.15 + 0.2 * rng.random::<f64>()) * h.max(w) as f64,
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            let v: f64 = blobs
                .iter()
                .map(|&(br, bc, s, a)| a * (-((r - br).powi(2) + (c - bc).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            TEXTURE_AMPLITUDE * v.clamp(-1.0, 1.0)
        })
        .collect()
}

/// Twenty answers in `1..=4` whose sum is on the requested side of the
/// threshold.
fn draw_answers(sds_positive: bool, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let min_sum = QUESTIONS as u32;
    let target = if sds_positive {
        rng.random_range(SDS_THRESHOLD..=SDS_THRESHOLD + 12)
    } else {
        rng.random_range(SDS_THRESHOLD - 18..SDS_THRESHOLD)
    };
    let mut answers = vec![1u8; QUESTIONS];
    for _ in 0..target - min_sum {
        let open: Vec<usize> = (0..QUESTIONS).filter(|&q| answers[q] < ANSWER_LEVELS as u8).collect();
        let q = open[rng.random_range(0..open.len())];
        answers[q] += 1;
    }
    answers
}

fn response_times(label: Label, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let pace = Normal::new(0.0, SUBJECT_PACE_SIGMA).expect("sigma").sample(rng);
    let per_item = Normal::new(0.0, RESPONSE_SIGMA).expect("sigma");
    let mu = MEDIAN_RESPONSE_SEC[label.as_u8() as usize].ln() + pace;
    (0..QUESTIONS).map(|_| (mu + per_item.sample(rng)).exp()).collect()
}

struct Assignment {
    label: Label,
    sds_flipped: bool,
}

fn assign(spec: &GenSpec) -> Vec<Assignment> {
    let mut rng = stream(spec.seed, 0);
    let n = spec.n_subjects;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_pos = spec.positives();
    let mut out: Vec<Assignment> = (0..n).map(|_| Assignment { label: Label::Normal, sds_flipped: false }).collect();
    for &i in &order[..n_pos] {
        out[i].label = Label::Depression;
    }
    for class in [&order[..n_pos], &order[n_pos..]] {
        let flips = (class.len() as f64 * (1.0 - spec.sds_agreement)).round() as usize;
        let mut members = class.to_vec();
        members.sort_unstable();
        members.shuffle(&mut rng);
        for &i in &members[..flips] {
            out[i].sds_flipped = true;
        }
    }
    out
}

pub fn subject_id(index: usize) -> String {
    format!("S{index:04}")
}

fn generate_subject(spec: &GenSpec, index: usize, a: &Assignment) -> Session {
    let mut clip_rng = stream(spec.seed, 2 * index as u64 + 1);
    let mut tab_rng = stream(spec.seed, 2 * index as u64 + 2);

    let texture = subject_texture(spec.clip_height, spec.clip_width, &mut clip_rng);
    let strength = if a.label.is_positive() { spec.signal_strength } else { 0.0 };
    let clips: Vec<Tensor<f32>> = (0..QUESTIONS)
        .map(|_| {
            let bg = background_clip(spec, &texture, &mut clip_rng);
            plant_signal(&bg, strength, &mut clip_rng)
        })
        .collect();

    let sds_positive = a.label.is_positive() != a.sds_flipped;
    let answers = draw_answers(sds_positive, &mut tab_rng);
    let times = response_times(a.label, &mut tab_rng);

    let questions = clips
        .into_iter()
        .zip(answers)
        .zip(times)
        .map(|((clip, answer), response_time_sec)| QuestionRecord { answer, response_time_sec, clip, crop_box: None })
        .collect();
    Session { subject_id: subject_id(index), label: a.label, questions }
}

/// Generates a cohort; deterministic under `spec.seed`.
pub fn generate(spec: &GenSpec) -> Result<Vec<Session>, GenError> {
    spec.validate()?;
    let assignments = assign(spec);
    Ok(assignments.par_iter().enumerate().map(|(i, a)| generate_subject(spec, i, a)).collect())
}

/// Label counts and the questionnaire-decision-vs-label confusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CohortSummary {
    pub subjects: usize,
    pub positives: usize,
    /// Depression label, sum score at or above threshold.
    pub tp: usize,
    /// Depression label, sum score below threshold.
    pub fn_: usize,
    /// Normal label, sum score at or above threshold.
    pub fp: usize,
    /// Normal label, sum score below threshold.
    pub tn: usize,
}

impl CohortSummary {
    pub fn of(sessions: &[Session]) -> Self {
        let mut s = CohortSummary { subjects: sessions.len(), ..Default::default() };
        for session in sessions {
            let flagged = session.sds_sum() >= SDS_THRESHOLD;
            match (session.label.is_positive(), flagged) {
                (true, true) => s.tp += 1,
                (true, false) => s.fn_ += 1,
                (false, true) => s.fp += 1,
                (false, false) => s.tn += 1,
            }
            s.positives += session.label.is_positive() as usize;
        }
        s
    }

    pub fn agreement(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.subjects.max(1) as f64
    }
}

impl fmt::Display for CohortSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "subjects: {}  depression: {}  normal: {}", self.subjects, self.positives, self.subjects - self.positives)?;
        writeln!(f, "diagnosis   questionnaire  count")?;
        writeln!(f, "normal      normal         {}", self.tn)?;
        writeln!(f, "normal      depression     {}", self.fp)?;
        writeln!(f, "depression  normal         {}", self.fn_)?;
        writeln!(f, "depression  depression     {}", self.tp)?;
        write!(f, "agreement: {:.3}", self.agreement())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GenSpec {
        GenSpec { n_subjects: 10, frames_per_clip: 4, clip_height: 6, clip_width: 5, seed, ..GenSpec::default() }
    }

    #[test]
    fn sessions_are_valid_and_sums_in_range() {
        for s in generate(&small(42)).unwrap() {
            s.validate().unwrap();
            assert!((20..=80).contains(&s.sds_sum()));
            assert_eq!(s.questions[0].clip.dims(), &[4, 6, 5]);
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        assert_eq!(generate(&small(42)).unwrap(), generate(&small(42)).unwrap());
        assert_ne!(generate(&small(42)).unwrap(), generate(&small(43)).unwrap());
    }

    #[test]
    fn questionnaire_decision_follows_flip_flag() {
        let spec = GenSpec { sds_agreement: 1.0, ..small(3) };
        let s = CohortSummary::of(&generate(&spec).unwrap());
        assert_eq!(s.fn_ + s.fp, 0);
        let spec = GenSpec { sds_agreement: 0.0, ..small(3) };
        let s = CohortSummary::of(&generate(&spec).unwrap());
        assert_eq!(s.tp + s.tn, 0);
    }

    #[test]
    fn prevalence_extremes() {
        let none = generate(&GenSpec { prevalence: 0.0, ..small(1) }).unwrap();
        assert!(none.iter().all(|s| s.label == Label::Normal));
        let all = generate(&GenSpec { prevalence: 1.0, ..small(1) }).unwrap();
        assert!(all.iter().all(|s| s.label == Label::Depression));
    }

    #[test]
    fn infeasible_specs_rejected() {
        assert!(generate(&GenSpec { n_subjects: 0, ..small(1) }).is_err());
        assert!(generate(&GenSpec { prevalence: 1.5, ..small(1) }).is_err());
        assert!(generate(&GenSpec { sds_agreement: -0.1, ..small(1) }).is_err());
        assert!(generate(&GenSpec { signal_strength: f64::NAN, ..small(1) }).is_err());
        assert!(generate(&GenSpec { clip_width: 0, ..small(1) }).is_err());
    }

    #[test]
    fn zero_strength_is_identity_and_clamp_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clip = Tensor::new(vec![3, 4, 4], (0..48).map(|i| i as f32 / 47.0).collect()).unwrap();
        assert_eq!(plant_signal(&clip, 0.0, &mut rng), clip);
        let ones = Tensor::full(vec![8, 4, 4], 1.0f32).unwrap();
        let out = plant_signal(&ones, 5.0, &mut rng);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn response_times_are_slower_for_depression() {
        let spec = GenSpec { n_subjects: 60, prevalence: 0.5, ..small(9) };
        let sessions = generate(&spec).unwrap();
        let mean_log = |label| {
            let v: Vec<f64> = sessions
                .iter()
                .filter(|s| s.label == label)
                .flat_map(|s| s.questions.iter().map(|q| q.response_time_sec.ln()))
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean_log(Label::Depression) > mean_log(Label::Normal));
    }
}
