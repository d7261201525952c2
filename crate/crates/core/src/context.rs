//! The four context domains the decoder attends over (image patches,
//! article tokens, faces, objects), their deterministic fixtures, article
//! layer mixing, and the `CTX1` file format for precomputed embeddings.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Tape, Tensor, Var};

pub const CTX1_MAGIC: &[u8; 4] = b"CTX1";
const CTX1_HEADER_LEN: usize = 4 + 9 * 4;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("bad magic at byte 0: expected \"CTX1\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("truncated context file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("shape error at byte {offset}: {field} is {found}, expected {expected}")]
    Shape { field: &'static str, offset: usize, expected: String, found: usize },
    #[error("context domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major matrix that, unlike [`Tensor`], may have zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ContextError> {
        if data.len() != rows * cols {
            return Err(ContextError::Domain(format!("{rows}x{cols} matrix given {} values", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ContextError::Domain("non-finite context value".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    /// `None` for an empty matrix.
    pub fn to_tensor(&self) -> Option<Tensor> {
        (self.rows > 0).then(|| Tensor::matrix(self.rows, self.cols, self.data.clone()).expect("validated matrix"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextSpec {
    pub d_image: usize,
    pub m_image: usize,
    pub d_face: usize,
    pub max_faces: usize,
    pub d_object: usize,
    pub max_objects: usize,
    pub object_confidence_min: f64,
    pub d_article: usize,
    pub n_layers: usize,
}

impl Default for ContextSpec {
    fn default() -> Self {
        ContextSpec {
            d_image: 32,
            m_image: 49,
            d_face: 16,
            max_faces: 4,
            d_object: 32,
            max_objects: 64,
            object_confidence_min: 0.3,
            d_article: 32,
            n_layers: 3,
        }
    }
}

impl ContextSpec {
    /// Dimensions of the full-size pretrained encoders: ResNet-152 patches,
    /// FaceNet faces, YOLOv3 + ResNet objects, RoBERTa-large article layers.
    pub fn full_scale() -> Self {
        ContextSpec {
            d_image: 2048,
            m_image: 49,
            d_face: 512,
            max_faces: 4,
            d_object: 2048,
            max_objects: 64,
            object_confidence_min: 0.3,
            d_article: 1024,
            n_layers: 25,
        }
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        let dims = [
            ("d_image", self.d_image),
            ("m_image", self.m_image),
            ("d_face", self.d_face),
            ("d_object", self.d_object),
            ("d_article", self.d_article),
            ("n_layers", self.n_layers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ContextError::Domain(format!("{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.object_confidence_min) {
            return Err(ContextError::Domain("object_confidence_min must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Width of each domain's embeddings, in decoder attention order.
    pub fn domain_dims(&self) -> [usize; 4] {
        [self.d_image, self.d_article, self.d_face, self.d_object]
    }
}

/// The four encoder outputs for one image plus the raw article layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextBundle {
    pub image: Matrix,
    pub faces: Matrix,
    pub objects: Matrix,
    /// `n_layers` matrices of `article_len × d_article`.
    pub article_layers: Vec<Matrix>,
    pub article_token_ids: Vec<u32>,
}

impl ContextBundle {
    pub fn article_len(&self) -> usize {
        self.article_token_ids.len()
    }

    pub fn validate(&self, spec: &ContextSpec) -> Result<(), ContextError> {
        let shape_err = |field, expected: String, found| ContextError::Shape { field, offset: 0, expected, found };
        if self.image.rows != spec.m_image {
            return Err(shape_err("m_image", spec.m_image.to_string(), self.image.rows));
        }
        if self.image.cols != spec.d_image {
            return Err(shape_err("d_image", spec.d_image.to_string(), self.image.cols));
        }
        if self.faces.rows > spec.max_faces {
            return Err(shape_err("n_faces", format!("<= {}", spec.max_faces), self.faces.rows));
        }
        if self.faces.cols != spec.d_face {
            return Err(shape_err("d_face", spec.d_face.to_string(), self.faces.cols));
        }
        if self.objects.rows > spec.max_objects {
            return Err(shape_err("n_objects", format!("<= {}", spec.max_objects), self.objects.rows));
        }
        if self.objects.cols != spec.d_object {
            return Err(shape_err("d_object", spec.d_object.to_string(), self.objects.cols));
        }
        if self.article_layers.len() != spec.n_layers {
            return Err(shape_err("n_layers", spec.n_layers.to_string(), self.article_layers.len()));
        }
        for layer in &self.article_layers {
            if layer.rows != self.article_len() {
                return Err(shape_err("article_len", self.article_len().to_string(), layer.rows));
            }
            if layer.cols != spec.d_article {
                return Err(shape_err("d_article", spec.d_article.to_string(), layer.cols));
            }
        }
        Ok(())
    }

    /// Keeps only the article tokens in `range`.
    pub fn with_article_window(&self, range: Range<usize>) -> ContextBundle {
        ContextBundle {
            image: self.image.clone(),
            faces: self.faces.clone(),
            objects: self.objects.clone(),
            article_layers: self.article_layers.iter().map(|l| l.slice_rows(range.clone())).collect(),
            article_token_ids: self.article_token_ids[range].to_vec(),
        }
    }
}

/// Learnable per-layer logits; the mixture weights are their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMixWeights {
    pub logits: Tensor,
}

impl LayerMixWeights {
    pub fn uniform(n_layers: usize) -> Result<Self, ContextError> {
        Ok(LayerMixWeights { logits: Tensor::zeros(vec![n_layers])? })
    }
}

/// `x^A_i = Σ_ℓ softmax(logits)_ℓ · g_ℓi` on the tape; gradients reach the
/// logits. Returns `None` for an empty article.
pub fn mix_article_layers_on(tape: &mut Tape<'_>, layers: &[Matrix], logits: Var) -> Result<Option<Var>, ContextError> {
    if tape.value(logits).len() != layers.len() {
        return Err(ContextError::Shape {
            field: "n_layers",
            offset: 0,
            expected: tape.value(logits).len().to_string(),
            found: layers.len(),
        });
    }
    let alpha = tape.softmax(logits)?;
    let Some(first) = layers.first() else {
        return Err(ContextError::Domain("no article layers".into()));
    };
    if first.rows == 0 {
        return Ok(None);
    }
    let items: Vec<Var> = layers.iter().map(|l| tape.constant(l.to_tensor().expect("non-empty"))).collect();
    Ok(Some(tape.weighted_sum(alpha, &items)?))
}

/// Value-only layer mixing.
pub fn mix_article_layers(bundle: &ContextBundle, w: &LayerMixWeights) -> Result<Matrix, ContextError> {
    let mut tape = Tape::new();
    let logits = tape.constant_ref(&w.logits);
    let rows = bundle.article_len();
    let cols = bundle.article_layers.first().map_or(0, |l| l.cols);
    match mix_article_layers_on(&mut tape, &bundle.article_layers, logits)? {
        Some(v) => Matrix::new(rows, cols, tape.value(v).to_vec()),
        None => Ok(Matrix::zeros(0, cols)),
    }
}

fn synth_matrix(seed: u64, stream: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let scale = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| (rng.random_range(-1.0..1.0) * scale) as f32 as f64).collect();
    Matrix { rows, cols, data }
}

/// Deterministic stand-in for the pretrained encoders. Each domain draws from
/// its own ChaCha8 stream, so changing one count leaves the others intact.
/// Values are uniform(−1, 1)/√dim rounded to `f32`, so they survive `CTX1`.
pub fn synth_context(
    seed: u64,
    spec: &ContextSpec,
    n_faces: usize,
    n_objects: usize,
    article_len: usize,
    vocab_size: usize,
) -> Result<ContextBundle, ContextError> {
    spec.validate()?;
    if n_faces > spec.max_faces {
        return Err(ContextError::Domain(format!("{n_faces} faces exceeds cap {}", spec.max_faces)));
    }
    if n_objects > spec.max_objects {
        return Err(ContextError::Domain(format!("{n_objects} objects exceeds cap {}", spec.max_objects)));
    }
    if vocab_size == 0 {
        return Err(ContextError::Domain("vocab size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4 + spec.n_layers as u64);
    let article_token_ids = (0..article_len).map(|_| rng.random_range(0..vocab_size as u32)).collect();
    Ok(ContextBundle {
        image: synth_matrix(seed, 0, spec.m_image, spec.d_image),
        faces: synth_matrix(seed, 1, n_faces, spec.d_face),
        objects: synth_matrix(seed, 2, n_objects, spec.d_object),
        article_layers: (0..spec.n_layers).map(|l| synth_matrix(seed, 3 + l as u64, article_len, spec.d_article)).collect(),
        article_token_ids,
    })
}

/// Serializes to `CTX1`. Values are stored as `f32`.
pub fn write_ctx1(bundle: &ContextBundle) -> Vec<u8> {
    let d_article = bundle.article_layers.first().map_or(0, |l| l.cols);
    let mut out = Vec::new();
    out.extend_from_slice(CTX1_MAGIC);
    for v in [
        bundle.image.rows,
        bundle.image.cols,
        bundle.faces.rows,
        bundle.faces.cols,
        bundle.objects.rows,
        bundle.objects.cols,
        bundle.article_layers.len(),
        bundle.article_len(),
        d_article,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &id in &bundle.article_token_ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    let mats = [&bundle.image, &bundle.faces, &bundle.objects].into_iter().chain(bundle.article_layers.iter());
    for m in mats {
        for &v in &m.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ContextError> {
        if self.pos + n > self.buf.len() {
            return Err(ContextError::Truncated { offset: self.pos, needed: n, available: self.buf.len() - self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ContextError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix, ContextError> {
        let bytes = self.take(rows * cols * 4)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        Matrix::new(rows, cols, data)
    }
}

/// Parses `CTX1` bytes and checks every shape against `spec`.
pub fn parse_ctx1(buf: &[u8], spec: &ContextSpec) -> Result<ContextBundle, ContextError> {
    if buf.len() < 4 || &buf[..4] != CTX1_MAGIC {
        return Err(ContextError::BadMagic { found: buf[..buf.len().min(4)].to_vec() });
    }
    let mut r = Reader { buf, pos: 4 };
    let field = |r: &mut Reader<'_>, name: &'static str, check: &dyn Fn(usize) -> Option<String>| {
        let offset = r.pos;
        let v = r.u32()? as usize;
        match check(v) {
            Some(expected) => Err(ContextError::Shape { field: name, offset, expected, found: v }),
            None => Ok(v),
        }
    };
    let exact = |want: usize| move |v: usize| (v != want).then(|| want.to_string());
    let at_most = |cap: usize| move |v: usize| (v > cap).then(|| format!("<= {cap}"));
    let any = |_: usize| None;

    let m_image = field(&mut r, "m_image", &exact(spec.m_image))?;
    let d_image = field(&mut r, "d_image", &exact(spec.d_image))?;
    let n_faces = field(&mut r, "n_faces", &at_most(spec.max_faces))?;
    let d_face = field(&mut r, "d_face", &exact(spec.d_face))?;
    let n_objects = field(&mut r, "n_objects", &at_most(spec.max_objects))?;
    let d_object = field(&mut r, "d_object", &exact(spec.d_object))?;
    let n_layers = field(&mut r, "n_layers", &exact(spec.n_layers))?;
    let article_len = field(&mut r, "article_len", &any)?;
    let d_article = field(&mut r, "d_article", &exact(spec.d_article))?;
    debug_assert_eq!(r.pos, CTX1_HEADER_LEN);

    let mut article_token_ids = Vec::with_capacity(article_len);
    for _ in 0..article_len {
        article_token_ids.push(r.u32()?);
    }
    let image = r.matrix(m_image, d_image)?;
    let faces = r.matrix(n_faces, d_face)?;
    let objects = r.matrix(n_objects, d_object)?;
    let mut article_layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        article_layers.push(r.matrix(article_len, d_article)?);
    }
    if r.pos != buf.len() {
        return Err(ContextError::Domain(format!("{} trailing bytes after offset {}", buf.len() - r.pos, r.pos)));
    }
    Ok(ContextBundle { image, faces, objects, article_layers, article_token_ids })
}

pub fn load_context(path: &Path, spec: &ContextSpec) -> Result<ContextBundle, ContextError> {
    parse_ctx1(&std::fs::read(path)?, spec)
}

pub fn save_context(path: &Path, bundle: &ContextBundle) -> Result<(), ContextError> {
    std::fs::write(path, write_ctx1(bundle))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(ContextSpec::default().validate().is_ok());
        assert!(ContextSpec::full_scale().validate().is_ok());
        let bad = ContextSpec { d_face: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ContextSpec { object_confidence_min: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn caps_are_enforced_by_synth() {
        let spec = ContextSpec::default();
        assert!(synth_context(0, &spec, 5, 0, 4, 10).is_err());
        assert!(synth_context(0, &spec, 0, 65, 4, 10).is_err());
    }

    #[test]
    fn empty_article_mixes_to_empty() {
        let spec = ContextSpec::default();
        let b = synth_context(3, &spec, 1, 1, 0, 10).unwrap();
        let x = mix_article_layers(&b, &LayerMixWeights::uniform(spec.n_layers).unwrap()).unwrap();
        assert_eq!(x.rows, 0);
    }
}
