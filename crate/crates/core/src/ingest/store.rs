//! Session store: one directory per subject holding `manifest.toml` and
//! twenty clip files.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::container::{decode_clip, encode_clip, FormatError};
use super::preprocess::CropBox;
use crate::session::valid_subject_id;
use crate::{Label, QuestionRecord, Session, SessionError, QUESTIONS};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{path}: manifest error: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("question {index}: clip file {path} is missing")]
    MissingClip { index: usize, path: PathBuf },
    #[error("{path}: {source}")]
    Invalid { path: PathBuf, source: SessionError },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// Per-question manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub answer: u8,
    pub response_time_sec: f64,
    /// Relative to the session directory.
    pub clip_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_box: Option<CropBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionManifest {
    pub subject_id: String,
    pub label: u8,
    pub questions: Vec<ManifestEntry>,
}

impl SessionManifest {
    pub fn validate(&self) -> Result<(), SessionError> {
        if !valid_subject_id(&self.subject_id) {
            return Err(SessionError::SubjectId(self.subject_id.clone()));
        }
        Label::try_from(self.label)?;
        if self.questions.len() != QUESTIONS {
            return Err(SessionError::QuestionCount(self.questions.len()));
        }
        for (i, q) in self.questions.iter().enumerate() {
            if !(1..=4).contains(&q.answer) {
                return Err(SessionError::Answer { index: i + 1, answer: q.answer });
            }
            if !(q.response_time_sec.is_finite() && q.response_time_sec > 0.0) {
                return Err(SessionError::ResponseTime { index: i + 1, seconds: q.response_time_sec });
            }
        }
        Ok(())
    }
}

pub fn clip_file_name(question: usize) -> String {
    format!("q{question:02}.qvc")
}

/// Writes `session` into directory `dir` (created if needed).
pub fn write_session(session: &Session, dir: &Path) -> Result<(), StoreError> {
    session.validate().map_err(|source| StoreError::Invalid { path: dir.to_path_buf(), source })?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(QUESTIONS);
    for (i, q) in session.questions.iter().enumerate() {
        let name = clip_file_name(i + 1);
        let path = dir.join(&name);
        let bytes = encode_clip(&q.clip).map_err(|source| StoreError::Format { path: path.clone(), source })?;
        fs::write(&path, bytes).map_err(io_err(&path))?;
        entries.push(ManifestEntry {
            answer: q.answer,
            response_time_sec: q.response_time_sec,
            clip_path: name,
            crop_box: q.crop_box,
        });
    }
    let manifest = SessionManifest {
        subject_id: session.subject_id.clone(),
        label: session.label.as_u8(),
        questions: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| StoreError::Manifest { path: path.clone(), msg: e.to_string() })?;
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<SessionManifest, StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: SessionManifest =
        toml::from_str(&text).map_err(|e| StoreError::Manifest { path: path.clone(), msg: e.to_string() })?;
    manifest.validate().map_err(|source| StoreError::Invalid { path, source })?;
    Ok(manifest)
}

/// Reads the session stored in directory `dir`.
pub fn read_session(dir: &Path) -> Result<Session, StoreError> {
    let manifest = read_manifest(dir)?;
    for (i, entry) in manifest.questions.iter().enumerate() {
        let path = dir.join(&entry.clip_path);
        if !path.is_file() {
            return Err(StoreError::MissingClip { index: i + 1, path });
        }
    }
    let mut questions = Vec::with_capacity(QUESTIONS);
    for entry in &manifest.questions {
        let path = dir.join(&entry.clip_path);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let clip = decode_clip(&bytes).map_err(|source| StoreError::Format { path: path.clone(), source })?;
        questions.push(QuestionRecord {
            answer: entry.answer,
            response_time_sec: entry.response_time_sec,
            clip,
            crop_box: entry.crop_box,
        });
    }
    let session = Session {
        subject_id: manifest.subject_id,
        label: Label::try_from(manifest.label).expect("validated"),
        questions,
    };
    session.validate().map_err(|source| StoreError::Invalid { path: dir.to_path_buf(), source })?;
    Ok(session)
}

/// Writes every session under `root/<subject_id>/`.
pub fn write_store(root: &Path, sessions: &[Session]) -> Result<(), StoreError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for s in sessions {
        write_session(s, &root.join(&s.subject_id))?;
    }
    Ok(())
}

/// Subject directories under `root` (those holding a manifest), sorted by name.
pub fn list_sessions(root: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let path = entry.path();
        if path.join(MANIFEST_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Reads every session under `root`, ordered by directory name.
pub fn read_store(root: &Path) -> Result<Vec<Session>, StoreError> {
    list_sessions(root)?.iter().map(|d| read_session(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use sdsnet_tensor::Tensor;

    fn session() -> Session {
        let questions = (0..QUESTIONS)
            .map(|i| QuestionRecord {
                answer: (i % 4) as u8 + 1,
                response_time_sec: 1.5 + i as f64 * 0.37,
                clip: Tensor::new(vec![2, 3, 3], (0..18).map(|k| ((k * 7 + i) % 19) as f32 / 18.0).collect()).unwrap(),
                crop_box: (i == 3).then(|| CropBox::new(1, 0, 2, 2)),
            })
            .collect();
        Session { subject_id: "S001".into(), label: Label::Depression, questions }
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let s = session();
        write_session(&s, dir.path()).unwrap();
        let back = read_session(dir.path()).unwrap();
        assert_eq!(back, s);
        let first = fs::read(dir.path().join("q05.qvc")).unwrap();
        write_session(&back, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("q05.qvc")).unwrap(), first);
    }

    #[test]
    fn missing_clip_names_question() {
        let dir = tempfile::tempdir().unwrap();
        write_session(&session(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("q07.qvc")).unwrap();
        match read_session(dir.path()) {
            Err(StoreError::MissingClip { index, .. }) => assert_eq!(index, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_clip_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        write_session(&session(), dir.path()).unwrap();
        let p = dir.path().join("q02.qvc");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = 0;
        fs::write(&p, bytes).unwrap();
        match read_session(dir.path()) {
            Err(StoreError::Format { source, .. }) => assert_eq!(source.offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn manifest_rejects_unknown_keys_and_bad_answers() {
        let dir = tempfile::tempdir().unwrap();
        write_session(&session(), dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, format!("extra = 1\n{text}")).unwrap();
        assert!(matches!(read_session(dir.path()), Err(StoreError::Manifest { .. })));
        fs::write(&p, text.replacen("answer = 1", "answer = 7", 1)).unwrap();
        assert!(matches!(read_session(dir.path()), Err(StoreError::Invalid { .. })));
    }
}
