//! `TNT1` checkpoints: the model configuration followed by every named
//! parameter as an `f32` payload. All integers are little-endian `u32`.
//!
//! ```text
//! "TNT1"
//! context:  d_image m_image d_face max_faces d_object max_objects
//!           object_confidence_min(f32) d_article n_layers
//! decoder:  d_model n_heads n_blocks kernel_sizes[n_blocks]
//!           attention_scaling(0|1) max_positions ffn_dim
//! output:   vocab_size n_clusters cutoffs[n] n_divisors divisors[n]
//! n_params, then per parameter: name_len name ndim dims[ndim] f32[Π dims]
//! ```

use std::path::Path;

use thiserror::Error;

use crate::adaptive_softmax::ClusterSpec;
use crate::context::ContextSpec;
use crate::decoder::DecoderConfig;
use crate::model::{CaptionModel, ModelConfig};
use crate::tensor::Tensor;

pub const TNT1_MAGIC: &[u8; 4] = b"TNT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a TNT1 checkpoint (magic {found:?})")]
    BadMagic { found: Vec<u8> },
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checkpoint {field} is {found}, configuration expects {expected}")]
    Mismatch { field: String, expected: String, found: String },
    #[error("checkpoint parameter {name}: {detail}")]
    Param { name: String, detail: String },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn put(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn write_tnt1(model: &CaptionModel) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(TNT1_MAGIC);
    let c = &cfg.context;
    for v in [c.d_image, c.m_image, c.d_face, c.max_faces, c.d_object, c.max_objects] {
        put(&mut out, v);
    }
    out.extend_from_slice(&(c.object_confidence_min as f32).to_le_bytes());
    put(&mut out, c.d_article);
    put(&mut out, c.n_layers);
    let d = &cfg.decoder;
    put(&mut out, d.d_model);
    put(&mut out, d.n_heads);
    put(&mut out, d.n_blocks);
    for &k in &d.kernel_sizes {
        put(&mut out, k);
    }
    put(&mut out, d.attention_scaling as usize);
    put(&mut out, d.max_positions);
    put(&mut out, d.ffn_dim);
    put(&mut out, cfg.vocab_size);
    let clusters = model.clusters();
    put(&mut out, clusters.cutoffs.len());
    for &x in &clusters.cutoffs {
        put(&mut out, x);
    }
    put(&mut out, clusters.tail_dim_divisors.len());
    for &x in &clusters.tail_dim_divisors {
        put(&mut out, x);
    }
    let store = model.params();
    put(&mut out, store.len());
    for (name, t) in store.iter() {
        put(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put(&mut out, t.shape().len());
        for &s in t.shape() {
            put(&mut out, s);
        }
        for &v in t.data() {
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
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: n });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Bounded count so corrupt headers cannot request huge allocations.
    fn count(&mut self, what: &str, max: usize) -> Result<usize, CheckpointError> {
        let n = self.u32()?;
        if n > max {
            return Err(CheckpointError::Invalid(format!("{what} count {n} exceeds {max}")));
        }
        Ok(n)
    }
}

pub fn parse_tnt1(buf: &[u8]) -> Result<CaptionModel, CheckpointError> {
    if buf.len() < 4 || &buf[..4] != TNT1_MAGIC {
        return Err(CheckpointError::BadMagic { found: buf[..buf.len().min(4)].to_vec() });
    }
    let mut r = Reader { buf, pos: 4 };
    let context = ContextSpec {
        d_image: r.u32()?,
        m_image: r.u32()?,
        d_face: r.u32()?,
        max_faces: r.u32()?,
        d_object: r.u32()?,
        max_objects: r.u32()?,
        // shortest decimal of the f32, so 0.3 reads back as 0.3
        object_confidence_min: r.f32()?.to_string().parse().expect("f32 display parses"),
        d_article: r.u32()?,
        n_layers: r.u32()?,
    };
    let d_model = r.u32()?;
    let n_heads = r.u32()?;
    let n_blocks = r.count("block", 1 << 10)?;
    let kernel_sizes = (0..n_blocks).map(|_| r.u32()).collect::<Result<_, _>>()?;
    let decoder = DecoderConfig {
        d_model,
        n_heads,
        n_blocks,
        kernel_sizes,
        attention_scaling: r.u32()? != 0,
        max_positions: r.u32()?,
        ffn_dim: r.u32()?,
    };
    let vocab_size = r.u32()?;
    let n = r.count("cluster", 1 << 10)?;
    let cutoffs = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
    let n = r.count("divisor", 1 << 10)?;
    let tail_dim_divisors = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
    let config = ModelConfig { context, decoder, vocab_size, clusters: Some(ClusterSpec { cutoffs, tail_dim_divisors }) };
    let mut model = CaptionModel::new(config, 0).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let n_params = r.u32()?;
    if n_params != model.params().len() {
        return Err(CheckpointError::Invalid(format!(
            "{n_params} parameter sections, configuration defines {}",
            model.params().len()
        )));
    }
    let mut seen = vec![false; n_params];
    for _ in 0..n_params {
        let len = r.count("name length", 1 << 12)?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| CheckpointError::Invalid("parameter name is not UTF-8".into()))?;
        let id = model.param_id(&name).ok_or_else(|| CheckpointError::Param { name: name.clone(), detail: "unknown name".into() })?;
        if std::mem::replace(&mut seen[id], true) {
            return Err(CheckpointError::Param { name, detail: "duplicate section".into() });
        }
        let ndim = r.count("dimension", 8)?;
        let shape: Vec<usize> = (0..ndim).map(|_| r.u32()).collect::<Result<_, _>>()?;
        let expected = model.params().get(id).shape().to_vec();
        if shape != expected {
            return Err(CheckpointError::Param { name, detail: format!("shape {shape:?}, expected {expected:?}") });
        }
        let count: usize = shape.iter().product();
        let bytes = r.take(4 * count)?;
        let data: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Param { name, detail: "non-finite value".into() });
        }
        *model.params_mut().get_mut(id) = Tensor::new(shape, data).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Invalid(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &CaptionModel) -> Result<(), CheckpointError> {
    Ok(std::fs::write(path, write_tnt1(model))?)
}

pub fn load_checkpoint(path: &Path) -> Result<CaptionModel, CheckpointError> {
    parse_tnt1(&std::fs::read(path)?)
}

/// Names the first field where a checkpoint's configuration differs from
/// the expected one.
pub fn check_config(expected: &ModelConfig, found: &ModelConfig) -> Result<(), CheckpointError> {
    let mismatch = |field: &str, e: String, f: String| CheckpointError::Mismatch { field: field.into(), expected: e, found: f };
    let (ec, fc) = (&expected.context, &found.context);
    let ctx = [
        ("context.d_image", ec.d_image, fc.d_image),
        ("context.m_image", ec.m_image, fc.m_image),
        ("context.d_face", ec.d_face, fc.d_face),
        ("context.max_faces", ec.max_faces, fc.max_faces),
        ("context.d_object", ec.d_object, fc.d_object),
        ("context.max_objects", ec.max_objects, fc.max_objects),
        ("context.d_article", ec.d_article, fc.d_article),
        ("context.n_layers", ec.n_layers, fc.n_layers),
    ];
    let (ed, fd) = (&expected.decoder, &found.decoder);
    let dec = [
        ("decoder.d_model", ed.d_model, fd.d_model),
        ("decoder.n_heads", ed.n_heads, fd.n_heads),
        ("decoder.n_blocks", ed.n_blocks, fd.n_blocks),
        ("decoder.max_positions", ed.max_positions, fd.max_positions),
        ("decoder.ffn_dim", ed.ffn_dim, fd.ffn_dim),
        ("vocab_size", expected.vocab_size, found.vocab_size),
    ];
    for (field, e, f) in ctx.into_iter().chain(dec) {
        if e != f {
            return Err(mismatch(field, e.to_string(), f.to_string()));
        }
    }
    if ed.kernel_sizes != fd.kernel_sizes {
        return Err(mismatch("decoder.kernel_sizes", format!("{:?}", ed.kernel_sizes), format!("{:?}", fd.kernel_sizes)));
    }
    if ed.attention_scaling != fd.attention_scaling {
        return Err(mismatch("decoder.attention_scaling", ed.attention_scaling.to_string(), fd.attention_scaling.to_string()));
    }
    let (ek, fk) = (expected.clusters(), found.clusters());
    if ek != fk {
        return Err(mismatch("clusters", format!("{:?}", ek.cutoffs), format!("{:?}", fk.cutoffs)));
    }
    Ok(())
}
