use std::fmt;

use sdsnet_tensor::Tensor;
use thiserror::Error;

use crate::ingest::CropBox;

/// Number of questionnaire items, one clip each.
pub const QUESTIONS: usize = 20;
/// Answers range over `1..=ANSWER_LEVELS`.
pub const ANSWER_LEVELS: usize = 4;
/// Sum score at or above which the questionnaire alone flags depression.
pub const SDS_THRESHOLD: u32 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal = 0,
    Depression = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_positive(self) -> bool {
        self == Label::Depression
    }
}

impl TryFrom<u8> for Label {
    type Error = SessionError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Depression),
            other => Err(SessionError::Label(other)),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Depression => "depression",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("label must be 0 or 1, got {0}")]
    Label(u8),
    #[error("expected {QUESTIONS} questions, got {0}")]
    QuestionCount(usize),
    #[error("question {index}: answer must be in 1..=4, got {answer}")]
    Answer { index: usize, answer: u8 },
    #[error("question {index}: response time must be positive and finite, got {seconds}")]
    ResponseTime { index: usize, seconds: f64 },
    #[error("question {index}: clip must be [T,H,W] or [T,3,H,W] with values in [0,1]")]
    Clip { index: usize },
    #[error("subject id {0:?} must be non-empty ASCII letters, digits, '-' or '_'")]
    SubjectId(String),
}

/// One answered questionnaire item and the clip recorded while answering.
#[derive(Debug, Clone, PartialEq)]
pub struct QuestionRecord {
    /// Selected answer, `1..=4`.
    pub answer: u8,
    pub response_time_sec: f64,
    /// Grayscale `[T, H, W]` (or color `[T, 3, H, W]` before preprocessing),
    /// intensities in `[0, 1]`.
    pub clip: Tensor<f32>,
    /// Face box in source pixels, present for raw recordings.
    pub crop_box: Option<CropBox>,
}

/// One subject: twenty question records and the clinical label.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub subject_id: String,
    pub label: Label,
    pub questions: Vec<QuestionRecord>,
}

pub(crate) fn valid_subject_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Session {
    pub fn validate(&self) -> Result<(), SessionError> {
        if !valid_subject_id(&self.subject_id) {
            return Err(SessionError::SubjectId(self.subject_id.clone()));
        }
        if self.questions.len() != QUESTIONS {
            return Err(SessionError::QuestionCount(self.questions.len()));
        }
        for (i, q) in self.questions.iter().enumerate() {
            let index = i + 1;
            if !(1..=ANSWER_LEVELS as u8).contains(&q.answer) {
                return Err(SessionError::Answer { index, answer: q.answer });
            }
            if !(q.response_time_sec.is_finite() && q.response_time_sec > 0.0) {
                return Err(SessionError::ResponseTime { index, seconds: q.response_time_sec });
            }
            let rank_ok = matches!(q.clip.rank(), 3) || (q.clip.rank() == 4 && q.clip.dims()[1] == 3);
            if !rank_ok || q.clip.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(SessionError::Clip { index });
            }
        }
        Ok(())
    }

    pub fn answers(&self) -> Vec<u8> {
        self.questions.iter().map(|q| q.answer).collect()
    }

    pub fn sds_sum(&self) -> u32 {
        self.questions.iter().map(|q| q.answer as u32).sum()
    }
}
