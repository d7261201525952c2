//! News examples: the JSONL record format, split manifests, article context
//! windows and preparation into model inputs.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::BpeVocab;
use crate::context::{load_context, ContextBundle, ContextError, ContextSpec};

pub const DEFAULT_WINDOW: usize = 512;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: malformed JSON: {msg}")]
    Json { line: usize, msg: String },
    #[error("line {line}: invalid field `{field}`: {msg}")]
    Validation { line: usize, field: &'static str, msg: String },
    #[error("example {id}: {msg}")]
    Example { id: String, msg: String },
    #[error("split manifest: {0}")]
    Manifest(String),
    #[error("context for example {id}: {source}")]
    Context { id: String, source: ContextError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EntityLabel {
    #[serde(rename = "PERSON")]
    Person,
    #[serde(rename = "GPE")]
    Gpe,
    #[serde(rename = "ORG")]
    Org,
    #[serde(rename = "DATE")]
    Date,
    #[serde(rename = "OTHER")]
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub surface: String,
    pub label: EntityLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, valid or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewsExample {
    pub id: String,
    pub article_text: String,
    pub caption_text: String,
    /// Token index of the image within the article, `-1` if unknown.
    pub image_position: i64,
    /// CTX1 file, relative to the JSONL file's directory unless absolute.
    pub context_path: String,
    pub entities: Vec<Entity>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

/// Every field optional so missing ones surface as validation errors that
/// name the field.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExample {
    id: Option<String>,
    article_text: Option<String>,
    caption_text: Option<String>,
    image_position: Option<i64>,
    context_path: Option<String>,
    entities: Option<Vec<Entity>>,
    split: Option<Split>,
    timestamp: Option<i64>,
}

fn required<T>(v: Option<T>, line: usize, field: &'static str) -> Result<T, DatasetError> {
    v.ok_or(DatasetError::Validation { line, field, msg: "missing".into() })
}

impl NewsExample {
    fn from_raw(raw: RawExample, line: usize) -> Result<Self, DatasetError> {
        let ex = NewsExample {
            id: required(raw.id, line, "id")?,
            article_text: required(raw.article_text, line, "article_text")?,
            caption_text: required(raw.caption_text, line, "caption_text")?,
            image_position: required(raw.image_position, line, "image_position")?,
            context_path: required(raw.context_path, line, "context_path")?,
            entities: raw.entities.unwrap_or_default(),
            split: required(raw.split, line, "split")?,
            timestamp: raw.timestamp,
        };
        ex.validate(line)?;
        Ok(ex)
    }

    /// Record-level invariants. The image position's upper bound depends on
    /// the tokenized article and is checked in [`prepare`].
    pub fn validate(&self, line: usize) -> Result<(), DatasetError> {
        let bad = |field, msg: String| Err(DatasetError::Validation { line, field, msg });
        if self.id.is_empty() {
            return bad("id", "empty".into());
        }
        if self.caption_text.trim().is_empty() {
            return bad("caption_text", "empty caption".into());
        }
        if self.image_position < -1 {
            return bad("image_position", format!("{} is below -1", self.image_position));
        }
        if self.context_path.is_empty() {
            return bad("context_path", "empty".into());
        }
        if let Some(e) = self.entities.iter().find(|e| e.surface.is_empty() || !self.caption_text.contains(&e.surface)) {
            return bad("entities", format!("surface {:?} does not appear in the caption", e.surface));
        }
        Ok(())
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<NewsExample>, DatasetError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(line).map_err(|e| DatasetError::Json { line: n, msg: e.to_string() })?;
        let ex = NewsExample::from_raw(raw, n)?;
        if !ids.insert(ex.id.clone()) {
            return Err(DatasetError::Validation { line: n, field: "id", msg: format!("duplicate id {:?}", ex.id) });
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<NewsExample>, DatasetError> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

pub fn write_jsonl(path: &Path, examples: &[NewsExample]) -> Result<(), DatasetError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut f, ex).map_err(std::io::Error::from)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    First,
    Surrounding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowMode {
    pub mode: WindowKind,
    pub width: usize,
}

impl Default for WindowMode {
    fn default() -> Self {
        WindowMode { mode: WindowKind::First, width: DEFAULT_WINDOW }
    }
}

/// Article token range fed to the decoder. Both modes yield
/// `min(width, n)` tokens; a surrounding window is centred on the image,
/// shifted back inside `[0, n)` when it would overhang.
pub fn select_context_window(n: usize, image_position: i64, mode: WindowMode) -> Range<usize> {
    let w = mode.width.min(n);
    if mode.mode == WindowKind::First || image_position < 0 {
        return 0..w;
    }
    let p = (image_position as usize).min(n.saturating_sub(1));
    let start = p.saturating_sub(mode.width / 2);
    let start = start.min(n - w);
    start..start + w
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
    #[serde(default)]
    pub temporal: bool,
}

impl SplitManifest {
    /// Orders examples by timestamp and assigns the oldest to train and the
    /// newest to test.
    pub fn by_time(examples: &[NewsExample], valid: usize, test: usize) -> Result<Self, DatasetError> {
        let mut dated: Vec<(i64, &str)> = Vec::with_capacity(examples.len());
        for ex in examples {
            let ts = ex.timestamp.ok_or_else(|| DatasetError::Manifest(format!("example {} has no timestamp", ex.id)))?;
            dated.push((ts, &ex.id));
        }
        if valid + test > dated.len() {
            return Err(DatasetError::Manifest(format!("{} examples cannot fill {valid} valid + {test} test", dated.len())));
        }
        dated.sort();
        let n_train = dated.len() - valid - test;
        let ids = |r: Range<usize>| dated[r].iter().map(|(_, id)| id.to_string()).collect();
        Ok(SplitManifest {
            train: ids(0..n_train),
            valid: ids(n_train..n_train + valid),
            test: ids(n_train + valid..dated.len()),
            temporal: true,
        })
    }

    /// Every id must exist and appear once; a temporal manifest additionally
    /// requires each train timestamp to precede every test timestamp.
    pub fn validate(&self, examples: &[NewsExample]) -> Result<(), DatasetError> {
        let by_id: HashMap<&str, &NewsExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.valid).chain(&self.test) {
            if !by_id.contains_key(id.as_str()) {
                return Err(DatasetError::Manifest(format!("unknown id {id:?}")));
            }
            if !seen.insert(id) {
                return Err(DatasetError::Manifest(format!("id {id:?} listed twice")));
            }
        }
        if self.temporal {
            let ts = |ids: &[String]| -> Result<Vec<i64>, DatasetError> {
                ids.iter()
                    .map(|id| by_id[id.as_str()].timestamp.ok_or_else(|| DatasetError::Manifest(format!("{id:?} has no timestamp"))))
                    .collect()
            };
            let (train, test) = (ts(&self.train)?, ts(&self.test)?);
            if let (Some(&latest), Some(&earliest)) = (train.iter().max(), test.iter().min()) {
                if latest >= earliest {
                    return Err(DatasetError::Manifest(format!(
                        "temporal split violated: train timestamp {latest} is not before test timestamp {earliest}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Overwrites each listed example's `split`.
    pub fn apply(&self, examples: &mut [NewsExample]) {
        let mut assign = HashMap::new();
        for s in [Split::Train, Split::Valid, Split::Test] {
            for id in self.ids(s) {
                assign.insert(id.as_str(), s);
            }
        }
        for ex in examples {
            if let Some(&s) = assign.get(ex.id.as_str()) {
                ex.split = s;
            }
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<SplitManifest, DatasetError> {
    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| DatasetError::Manifest(e.to_string()))
}

/// A model-ready example: tokenized caption and windowed context.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub id: String,
    pub caption_ids: Vec<u32>,
    pub bundle: ContextBundle,
}

pub fn resolve_context_path(base_dir: &Path, p: &str) -> PathBuf {
    let path = Path::new(p);
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base_dir.join(path)
    }
}

/// Windows an already-loaded bundle and tokenizes the caption.
pub fn prepare_with_bundle(
    ex: &NewsExample,
    bundle: ContextBundle,
    vocab: &BpeVocab,
    window: WindowMode,
) -> Result<PreparedExample, DatasetError> {
    let n = bundle.article_len();
    if ex.image_position >= n as i64 {
        return Err(DatasetError::Example {
            id: ex.id.clone(),
            msg: format!("image_position {} is not below the article token count {n}", ex.image_position),
        });
    }
    let range = select_context_window(n, ex.image_position, window);
    let caption_ids = vocab.encode(&ex.caption_text);
    if caption_ids.is_empty() {
        return Err(DatasetError::Example { id: ex.id.clone(), msg: "caption encodes to no tokens".into() });
    }
    let bundle = if range.len() == n { bundle } else { bundle.with_article_window(range) };
    Ok(PreparedExample { id: ex.id.clone(), caption_ids, bundle })
}

pub fn prepare(
    ex: &NewsExample,
    base_dir: &Path,
    spec: &ContextSpec,
    vocab: &BpeVocab,
    window: WindowMode,
) -> Result<PreparedExample, DatasetError> {
    let path = resolve_context_path(base_dir, &ex.context_path);
    let bundle = load_context(&path, spec).map_err(|source| DatasetError::Context { id: ex.id.clone(), source })?;
    prepare_with_bundle(ex, bundle, vocab, window)
}
