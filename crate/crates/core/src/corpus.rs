//! Data model and manifest I/O shared by the rest of the pipeline.
//!
//! Manifests are line-delimited JSON with fixed snake_case keys. Paths inside
//! a manifest are relative to the manifest's own directory.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::jsonl::{self, format_float};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("duplicate id `{id}` on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("duplicate response identity {key} on lines {first} and {second}")]
    DuplicateRecord {
        key: String,
        first: usize,
        second: usize,
    },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid view label `{0}`")]
    ViewLabel(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One multimodal QA item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    /// Relative to the directory of the manifest that lists this instance.
    pub image_path: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl QaInstance {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id must be non-empty".into());
        }
        if self.image_path.is_empty() {
            return Err("image_path must be non-empty".into());
        }
        if self.question.trim().is_empty() {
            return Err("question must be non-empty".into());
        }
        Ok(())
    }
}

/// A concrete visual view of an instance's image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ViewSpec {
    Hq,
    Resolution { alpha: f64 },
    GaussianNoise { sigma: f64, seed: u64 },
    MotionBlur { length_px: u32, angle_deg: f64 },
}

impl ViewSpec {
    /// The view used for a sweep point: `alpha = 1` is the undegraded view.
    pub fn for_alpha(alpha: f64) -> Self {
        if alpha == 1.0 {
            ViewSpec::Hq
        } else {
            ViewSpec::Resolution { alpha }
        }
    }

    pub fn is_hq(&self) -> bool {
        matches!(self, ViewSpec::Hq)
    }

    pub fn label(&self) -> String {
        self.to_string()
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            ViewSpec::Hq => Ok(()),
            ViewSpec::Resolution { alpha } if alpha > 0.0 && alpha <= 1.0 => Ok(()),
            ViewSpec::Resolution { alpha } => Err(format!("alpha {alpha} outside (0, 1]")),
            ViewSpec::GaussianNoise { sigma, .. } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            ViewSpec::GaussianNoise { sigma, .. } => Err(format!("sigma {sigma} must be >= 0")),
            ViewSpec::MotionBlur {
                length_px,
                angle_deg,
            } => {
                if length_px == 0 {
                    Err("blur length must be positive".into())
                } else if !angle_deg.is_finite() {
                    Err("blur angle must be finite".into())
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl fmt::Display for ViewSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ViewSpec::Hq => f.write_str("hq"),
            ViewSpec::Resolution { alpha } => write!(f, "res:{}", format_float(alpha)),
            ViewSpec::GaussianNoise { sigma, seed } => {
                write!(f, "noise:{}:{seed}", format_float(sigma))
            }
            ViewSpec::MotionBlur {
                length_px,
                angle_deg,
            } => write!(f, "blur:{length_px}:{}", format_float(angle_deg)),
        }
    }
}

impl FromStr for ViewSpec {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CorpusError::ViewLabel(s.to_string());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let float = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let view = match parts.as_slice() {
            ["hq"] => ViewSpec::Hq,
            ["res", alpha] => ViewSpec::Resolution {
                alpha: float(alpha)?,
            },
            ["noise", sigma] => ViewSpec::GaussianNoise {
                sigma: float(sigma)?,
                seed: 0,
            },
            ["noise", sigma, seed] => ViewSpec::GaussianNoise {
                sigma: float(sigma)?,
                seed: seed.parse().map_err(|_| bad())?,
            },
            ["blur", length] => ViewSpec::MotionBlur {
                length_px: length.parse().map_err(|_| bad())?,
                angle_deg: 0.0,
            },
            ["blur", length, angle] => ViewSpec::MotionBlur {
                length_px: length.parse().map_err(|_| bad())?,
                angle_deg: float(angle)?,
            },
            _ => return Err(bad()),
        };
        view.validate().map_err(|_| bad())?;
        Ok(view)
    }
}

impl Serialize for ViewSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for ViewSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Decoding parameters recorded with every response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
            seed: 0,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature {} must be >= 0", self.temperature));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }

    /// Short stable digest of the canonical serialization.
    pub fn digest(&self) -> String {
        let line = jsonl::to_line(self).expect("decode params serialize");
        let hash = Sha256::digest(line.as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// One policy output for an (instance, view) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub instance_id: String,
    pub view_label: String,
    pub policy_id: String,
    pub decode: DecodeParams,
    pub text: String,
    pub token_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

/// The tuple that identifies a response record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub instance_id: String,
    pub view_label: String,
    pub policy_id: String,
    pub decode_digest: String,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.instance_id, self.view_label, self.policy_id, self.decode_digest
        )
    }
}

impl ResponseRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            instance_id: self.instance_id.clone(),
            view_label: self.view_label.clone(),
            policy_id: self.policy_id.clone(),
            decode_digest: self.decode.digest(),
        }
    }

    pub fn view(&self) -> Result<ViewSpec, CorpusError> {
        self.view_label.parse()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.instance_id.is_empty() {
            return Err("instance_id must be non-empty".into());
        }
        if self.policy_id.is_empty() {
            return Err("policy_id must be non-empty".into());
        }
        self.view_label
            .parse::<ViewSpec>()
            .map_err(|e| e.to_string())?;
        self.decode.validate()
    }
}

/// Loads an instance manifest, validating every line.
pub fn load_instances(path: &Path) -> Result<Vec<QaInstance>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| CorpusError::Malformed {
            line: line_no,
            message: "expected a JSON object".into(),
        })?;
        for field in ["id", "image_path", "question"] {
            if obj.get(field).is_none_or(Value::is_null) {
                return Err(CorpusError::MissingField {
                    line: line_no,
                    field,
                });
            }
        }
        let inst: QaInstance =
            serde_json::from_value(value).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        inst.validate().map_err(|message| CorpusError::Invalid {
            line: line_no,
            message,
        })?;
        if let Some(&first) = seen.get(&inst.id) {
            return Err(CorpusError::DuplicateId {
                id: inst.id,
                first,
                second: line_no,
            });
        }
        seen.insert(inst.id.clone(), line_no);
        out.push(inst);
    }
    Ok(out)
}

/// Writes (replacing) an instance manifest.
pub fn write_instances(path: &Path, instances: &[QaInstance]) -> Result<(), CorpusError> {
    let mut buf = String::new();
    for inst in instances {
        inst.validate().map_err(CorpusError::InvalidRecord)?;
        push_line(&mut buf, inst)?;
    }
    replace_file(path, buf.as_bytes())
}

/// Appends records to a response manifest and returns the number appended.
///
/// All lines go out in a single write so concurrent readers never observe a
/// partial line.
pub fn append_records(path: &Path, records: &[ResponseRecord]) -> Result<usize, CorpusError> {
    if records.is_empty() {
        return Ok(0);
    }
    let mut buf = String::new();
    for rec in records {
        rec.validate().map_err(CorpusError::InvalidRecord)?;
        push_line(&mut buf, rec)?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    file.write_all(buf.as_bytes()).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))?;
    Ok(records.len())
}

/// Writes (replacing) a response manifest via a temporary file and rename.
pub fn write_records(path: &Path, records: &[ResponseRecord]) -> Result<(), CorpusError> {
    let mut buf = String::new();
    for rec in records {
        rec.validate().map_err(CorpusError::InvalidRecord)?;
        push_line(&mut buf, rec)?;
    }
    replace_file(path, buf.as_bytes())
}

/// Loads a response manifest, rejecting duplicate identity tuples.
pub fn load_records(path: &Path) -> Result<Vec<ResponseRecord>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut seen: HashMap<RecordKey, usize> = HashMap::new();
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ResponseRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        rec.validate().map_err(|message| CorpusError::Invalid {
            line: line_no,
            message,
        })?;
        let key = rec.key();
        if let Some(&first) = seen.get(&key) {
            return Err(CorpusError::DuplicateRecord {
                key: key.to_string(),
                first,
                second: line_no,
            });
        }
        seen.insert(key, line_no);
        out.push(rec);
    }
    Ok(out)
}

/// Resolves a manifest-relative path against the manifest's directory.
pub fn resolve_path(manifest: &Path, relative: &str) -> PathBuf {
    let rel = Path::new(relative);
    if rel.is_absolute() {
        return rel.to_path_buf();
    }
    manifest
        .parent()
        .map(|dir| dir.join(rel))
        .unwrap_or_else(|| rel.to_path_buf())
}

/// Expresses `target` relative to `base_dir` when both share a root.
pub fn relative_path(target: &Path, base_dir: &Path) -> PathBuf {
    let abs = |p: &Path| -> PathBuf {
        let p = if p.as_os_str().is_empty() {
            Path::new(".")
        } else {
            p
        };
        fs::canonicalize(p).unwrap_or_else(|_| {
            std::env::current_dir()
                .map(|cwd| cwd.join(p))
                .unwrap_or_else(|_| p.to_path_buf())
        })
    };
    let target = match (target.parent(), target.file_name()) {
        (Some(dir), Some(name)) => abs(dir).join(name),
        _ => abs(target),
    };
    let base = abs(base_dir);
    let t: Vec<_> = target.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return target;
    }
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c.as_os_str());
    }
    out
}

pub fn index_by_id(instances: &[QaInstance]) -> HashMap<&str, &QaInstance> {
    instances.iter().map(|i| (i.id.as_str(), i)).collect()
}

fn push_line<T: Serialize>(buf: &mut String, value: &T) -> Result<(), CorpusError> {
    let line = jsonl::to_line(value).map_err(|e| CorpusError::InvalidRecord(e.to_string()))?;
    buf.push_str(&line);
    buf.push('\n');
    Ok(())
}

pub(crate) fn replace_file(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}
