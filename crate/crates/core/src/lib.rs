//! Depression screening from self-rating questionnaires and the face video
//! recorded while each question was answered.
//!
//! Each subject contributes twenty question-wise clips. A shared video
//! encoder turns every clip into a feature vector, which is concatenated
//! with the one-hot answer and the response time for that question; the
//! twenty question vectors feed a fully connected classifier with a sigmoid
//! output.
//!
//! - [`datagen`] synthesizes cohorts with a plantable video cue.
//! - [`ingest`] reads and writes the on-disk session store and implements
//!   the crop/resize/grayscale/sampling pipeline.
//! - [`models`] holds the encoders, the fusion head and the sum-score
//!   baseline.
//! - [`train_eval`] trains with Adam and runs subject-level k-fold
//!   cross-validation.
//! - [`gradsuite`] checks every gradient against finite differences.

pub mod datagen;
pub mod gradsuite;
pub mod ingest;
pub mod models;
mod session;
pub mod train_eval;

pub use session::{Label, QuestionRecord, Session, SessionError, ANSWER_LEVELS, QUESTIONS, SDS_THRESHOLD};

pub use sdsnet_tensor as tensor;
