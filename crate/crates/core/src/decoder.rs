//! Decoder blocks.
//!
//! Each block conditions on past tokens with a per-head dynamic convolution
//! and then attends over the four context domains:
//!
//! ```text
//! z'_j  = GLU(W^Z z_j + b^Z)                     per head, j in the window
//! γ     = softmax_j(w^γ · z'_j)
//! z̃     = [Σ_j γ_j z'_j]_heads
//! d     = LayerNorm(z + W^z̃ z̃ + b^z̃)
//! x̃^D   = LayerNorm(d + [Σ_i softmax(K q)_i v_i]_heads)   D ∈ {I, A, F, O}
//! c'    = W^C [x̃^I, x̃^A, x̃^F, x̃^O] + b^C
//! z_out = LayerNorm(c' + W^C'' ReLU(W^C' c' + b^C') + b^C'')
//! ```
//!
//! All sublayers operate on whole sequences (`[T, D]` rows) so training and
//! incremental decoding share one code path.

use serde::{Deserialize, Serialize};

use crate::params::{Initializer, ParamId};
use crate::tensor::{Result, Tape, TensorError, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub kernel_sizes: Vec<usize>,
    /// Scale attention logits by `1/√(d_model/n_heads)`.
    pub attention_scaling: bool,
    pub max_positions: usize,
    /// Hidden width of the fusion feed-forward.
    pub ffn_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            kernel_sizes: vec![3, 7],
            attention_scaling: true,
            max_positions: 64,
            ffn_dim: 256,
        }
    }
}

impl DecoderConfig {
    /// Hidden size 1024, 16 heads, four blocks with kernels 3, 7, 15, 31.
    pub fn full_scale() -> Self {
        DecoderConfig {
            d_model: 1024,
            n_heads: 16,
            n_blocks: 4,
            kernel_sizes: vec![3, 7, 15, 31],
            attention_scaling: true,
            max_positions: 512,
            ffn_dim: 4096,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn attention_scale(&self) -> Option<f64> {
        self.attention_scaling.then(|| 1.0 / (self.head_dim() as f64).sqrt())
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.d_model < 2 {
            return Err("decoder.d_model must be at least 2".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(format!("decoder.d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.kernel_sizes.len() != self.n_blocks {
            return Err(format!(
                "decoder.kernel_sizes has {} entries for {} blocks",
                self.kernel_sizes.len(),
                self.n_blocks
            ));
        }
        if self.kernel_sizes.contains(&0) {
            return Err("decoder.kernel_sizes entries must be at least 1".into());
        }
        if self.n_blocks == 0 || self.max_positions == 0 || self.ffn_dim == 0 {
            return Err("decoder.n_blocks, max_positions and ffn_dim must be positive".into());
        }
        Ok(())
    }
}

/// Context domains in attention and concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Image,
    Article,
    Faces,
    Objects,
}

impl Domain {
    pub const ALL: [Domain; 4] = [Domain::Image, Domain::Article, Domain::Faces, Domain::Objects];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Image => "image",
            Domain::Article => "article",
            Domain::Faces => "faces",
            Domain::Objects => "objects",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvParams<T> {
    /// `[2·d_model, d_model]`: head `h` owns rows `2·h·dh .. 2·(h+1)·dh`,
    /// value half first, gate half second.
    pub proj_w: T,
    pub proj_b: T,
    /// `[n_heads, head_dim]`
    pub gamma: T,
    pub out_w: T,
    pub out_b: T,
    pub ln_gain: T,
    pub ln_bias: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnParams<T> {
    pub query: T,
    pub key: T,
    pub value: T,
    pub ln_gain: T,
    pub ln_bias: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuseParams<T> {
    pub c_w: T,
    pub c_b: T,
    pub ff_w: T,
    pub ff_b: T,
    pub out_w: T,
    pub out_b: T,
    pub ln_gain: T,
    pub ln_bias: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockParams<T> {
    pub conv: ConvParams<T>,
    pub attn: [AttnParams<T>; 4],
    pub fuse: FuseParams<T>,
}

impl<T: Copy> ConvParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> ConvParams<U> {
        ConvParams {
            proj_w: f(self.proj_w),
            proj_b: f(self.proj_b),
            gamma: f(self.gamma),
            out_w: f(self.out_w),
            out_b: f(self.out_b),
            ln_gain: f(self.ln_gain),
            ln_bias: f(self.ln_bias),
        }
    }
}

impl<T: Copy> AttnParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> AttnParams<U> {
        AttnParams {
            query: f(self.query),
            key: f(self.key),
            value: f(self.value),
            ln_gain: f(self.ln_gain),
            ln_bias: f(self.ln_bias),
        }
    }
}

impl<T: Copy> FuseParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> FuseParams<U> {
        FuseParams {
            c_w: f(self.c_w),
            c_b: f(self.c_b),
            ff_w: f(self.ff_w),
            ff_b: f(self.ff_b),
            out_w: f(self.out_w),
            out_b: f(self.out_b),
            ln_gain: f(self.ln_gain),
            ln_bias: f(self.ln_bias),
        }
    }
}

impl<T: Copy> BlockParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> BlockParams<U> {
        BlockParams {
            conv: self.conv.map(&mut f),
            attn: [
                self.attn[0].map(&mut f),
                self.attn[1].map(&mut f),
                self.attn[2].map(&mut f),
                self.attn[3].map(&mut f),
            ],
            fuse: self.fuse.map(&mut f),
        }
    }
}

pub(crate) fn init_block(init: &mut Initializer<'_>, cfg: &DecoderConfig, domain_dims: [usize; 4], l: usize) -> BlockParams<ParamId> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let p = |s: &str| format!("block{l}.{s}");
    let conv = ConvParams {
        proj_w: init.uniform(p("conv.proj.w"), vec![2 * d, d], d),
        proj_b: init.uniform(p("conv.proj.b"), vec![2 * d], d),
        gamma: init.uniform(p("conv.gamma"), vec![cfg.n_heads, dh], dh),
        out_w: init.uniform(p("conv.out.w"), vec![d, d], d),
        out_b: init.uniform(p("conv.out.b"), vec![d], d),
        ln_gain: init.filled(p("conv.ln.gain"), vec![d], 1.0),
        ln_bias: init.filled(p("conv.ln.bias"), vec![d], 0.0),
    };
    let attn = Domain::ALL.map(|dom| {
        let dd = domain_dims[dom as usize];
        let n = dom.name();
        AttnParams {
            query: init.uniform(p(&format!("attn.{n}.query")), vec![d, d], d),
            key: init.uniform(p(&format!("attn.{n}.key")), vec![d, dd], dd),
            value: init.uniform(p(&format!("attn.{n}.value")), vec![d, dd], dd),
            ln_gain: init.filled(p(&format!("attn.{n}.ln.gain")), vec![d], 1.0),
            ln_bias: init.filled(p(&format!("attn.{n}.ln.bias")), vec![d], 0.0),
        }
    });
    let f = cfg.ffn_dim;
    let fuse = FuseParams {
        c_w: init.uniform(p("fuse.c.w"), vec![d, 4 * d], 4 * d),
        c_b: init.uniform(p("fuse.c.b"), vec![d], 4 * d),
        ff_w: init.uniform(p("fuse.ff.w"), vec![f, d], d),
        ff_b: init.uniform(p("fuse.ff.b"), vec![f], d),
        out_w: init.uniform(p("fuse.out.w"), vec![d, f], f),
        out_b: init.uniform(p("fuse.out.b"), vec![d], f),
        ln_gain: init.filled(p("fuse.ln.gain"), vec![d], 1.0),
        ln_bias: init.filled(p("fuse.ln.bias"), vec![d], 0.0),
    };
    BlockParams { conv, attn, fuse }
}

/// Dynamic convolution over a left-padded window of block inputs.
///
/// `window` is `[T + K − 1, D]`; output row `t` mixes rows `t ..= t + K − 1`.
/// Returns the head outputs already concatenated, `[T, D]`.
pub fn dynamic_conv(tape: &mut Tape<'_>, n_heads: usize, kernel: usize, p: &ConvParams<Var>, window: Var) -> Result<Var> {
    let proj = tape.linear(window, p.proj_w, Some(p.proj_b))?;
    let values = tape.glu_grouped(proj, n_heads)?;
    let scores = tape.grouped_dot(values, p.gamma, n_heads)?;
    tape.window_mix(values, scores, kernel)
}

/// Single-step form: `window` must hold exactly `kernel` rows.
pub fn dynamic_conv_window(tape: &mut Tape<'_>, n_heads: usize, kernel: usize, p: &ConvParams<Var>, window: Var) -> Result<Var> {
    let rows = tape.shape(window)[0];
    if rows != kernel {
        return Err(TensorError::Contract(format!("window has {rows} states, kernel size is {kernel}")));
    }
    dynamic_conv(tape, n_heads, kernel, p, window)
}

/// The convolution weights `γ` as `[T, n_heads, kernel]` values.
pub fn conv_kernel_weights(tape: &mut Tape<'_>, n_heads: usize, kernel: usize, p: &ConvParams<Var>, window: Var) -> Result<Vec<f64>> {
    let proj = tape.linear(window, p.proj_w, Some(p.proj_b))?;
    let values = tape.glu_grouped(proj, n_heads)?;
    let scores = tape.grouped_dot(values, p.gamma, n_heads)?;
    let rows = tape.shape(scores)[0];
    if rows < kernel {
        return Err(TensorError::Contract(format!("window has {rows} states, kernel size is {kernel}")));
    }
    let sv = tape.value(scores).to_vec();
    let t_out = rows + 1 - kernel;
    let mut windows = Vec::with_capacity(t_out * n_heads * kernel);
    for t in 0..t_out {
        for h in 0..n_heads {
            windows.extend((0..kernel).map(|j| sv[(t + j) * n_heads + h]));
        }
    }
    let w = tape.constant(crate::tensor::Tensor::new(vec![t_out * n_heads, kernel], windows)?);
    let gamma = tape.softmax(w)?;
    Ok(tape.value(gamma).to_vec())
}

/// Joins per-head outputs; the count must match `n_heads`.
pub fn concat_heads(tape: &mut Tape<'_>, heads: &[Var], n_heads: usize) -> Result<Var> {
    if heads.len() != n_heads {
        return Err(TensorError::Contract(format!("{} head outputs for {n_heads} heads", heads.len())));
    }
    tape.concat_cols(heads)
}

/// `d = LayerNorm(z + W^z̃ z̃ + b^z̃)`
pub fn conv_block_output(tape: &mut Tape<'_>, z: Var, heads_concat: Var, p: &ConvParams<Var>) -> Result<Var> {
    let proj = tape.linear(heads_concat, p.out_w, Some(p.out_b))?;
    let res = tape.add(z, proj)?;
    tape.layer_norm(res, p.ln_gain, p.ln_bias, LAYER_NORM_EPS)
}

/// Keys and values of one context domain, `[M, D]` each.
#[derive(Debug, Clone, Copy)]
pub struct DomainKv {
    pub keys: Var,
    pub values: Var,
}

pub fn project_domain(tape: &mut Tape<'_>, x: Var, p: &AttnParams<Var>) -> Result<DomainKv> {
    Ok(DomainKv { keys: tape.linear(x, p.key, None)?, values: tape.linear(x, p.value, None)? })
}

/// Per-head attention weights `λ` over the domain's rows, each `[T, M]`.
pub fn attention_weights(
    tape: &mut Tape<'_>,
    n_heads: usize,
    scale: Option<f64>,
    d: Var,
    kv: &DomainKv,
    p: &AttnParams<Var>,
) -> Result<Vec<Var>> {
    let q = tape.linear(d, p.query, None)?;
    let dh = tape.shape(q)[1] / n_heads;
    let mut out = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh) = if n_heads == 1 {
            (q, kv.keys)
        } else {
            (tape.slice_cols(q, h * dh, dh)?, tape.slice_cols(kv.keys, h * dh, dh)?)
        };
        let mut logits = tape.matmul_nt(qh, kh)?;
        if let Some(s) = scale {
            logits = tape.scale(logits, s)?;
        }
        out.push(tape.softmax(logits)?);
    }
    Ok(out)
}

/// Multi-head attention of `d` over one domain plus residual layer norm.
/// An empty domain (`kv = None`) attends to nothing: `x̃ = LayerNorm(d)`.
pub fn attend_domain(
    tape: &mut Tape<'_>,
    n_heads: usize,
    scale: Option<f64>,
    d: Var,
    kv: Option<DomainKv>,
    p: &AttnParams<Var>,
) -> Result<Var> {
    let Some(kv) = kv else {
        return tape.layer_norm(d, p.ln_gain, p.ln_bias, LAYER_NORM_EPS);
    };
    let lambdas = attention_weights(tape, n_heads, scale, d, &kv, p)?;
    let dh = tape.shape(kv.values)[1] / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    for (h, lambda) in lambdas.into_iter().enumerate() {
        let vh = if n_heads == 1 { kv.values } else { tape.slice_cols(kv.values, h * dh, dh)? };
        heads.push(tape.matmul(lambda, vh)?);
    }
    let attended = if n_heads == 1 { heads[0] } else { concat_heads(tape, &heads, n_heads)? };
    let res = tape.add(d, attended)?;
    tape.layer_norm(res, p.ln_gain, p.ln_bias, LAYER_NORM_EPS)
}

/// Feed-forward fusion of the four attended vectors.
pub fn fuse(tape: &mut Tape<'_>, attended: [Var; 4], p: &FuseParams<Var>) -> Result<Var> {
    let joined = tape.concat_cols(&attended)?;
    let c1 = tape.linear(joined, p.c_w, Some(p.c_b))?;
    let hidden = tape.linear(c1, p.ff_w, Some(p.ff_b))?;
    let hidden = tape.relu(hidden)?;
    let c3 = tape.linear(hidden, p.out_w, Some(p.out_b))?;
    let res = tape.add(c1, c3)?;
    tape.layer_norm(res, p.ln_gain, p.ln_bias, LAYER_NORM_EPS)
}

/// One block over a padded window of inputs (`[T + K − 1, D]`), producing
/// `[T, D]`.
pub fn block_forward(
    tape: &mut Tape<'_>,
    cfg: &DecoderConfig,
    kernel: usize,
    p: &BlockParams<Var>,
    contexts: &[Option<DomainKv>; 4],
    window: Var,
) -> Result<Var> {
    let rows = tape.shape(window)[0];
    let t_out = rows + 1 - kernel;
    let mixed = dynamic_conv(tape, cfg.n_heads, kernel, &p.conv, window)?;
    let z = if kernel == 1 { window } else { tape.slice_rows(window, kernel - 1, t_out)? };
    let d = conv_block_output(tape, z, mixed, &p.conv)?;
    let scale = cfg.attention_scale();
    let mut attended = [d; 4];
    for (i, slot) in attended.iter_mut().enumerate() {
        *slot = attend_domain(tape, cfg.n_heads, scale, d, contexts[i], &p.attn[i])?;
    }
    fuse(tape, attended, &p.fuse)
}
