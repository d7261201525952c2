//! Finite-difference gradient checks for every primitive op, each decoder
//! sublayer, the output layer and the whole model at toy dimensions.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive_softmax::{self, AdaptiveSoftmaxParams, ClusterSpec, TailParams};
use crate::context::{mix_article_layers_on, synth_context, ContextError, ContextSpec};
use crate::decoder::{self, AttnParams, BlockParams, ConvParams, DecoderConfig, DomainKv, FuseParams};
use crate::error::{Error, Result};
use crate::model::{CaptionModel, ModelConfig};
use crate::tensor::{grad_check_scaled, GradCheckReport, Result as TResult, Tape, Tensor, TensorError, Var, LAYER_NORM_EPS};

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradSuiteConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub kernel_size: usize,
    pub vocab_size: usize,
    /// Caption tokens in the whole-model check.
    pub caption_len: usize,
    pub seed: u64,
    pub step: f64,
    /// Coordinates compared per parameter tensor in the whole-model check;
    /// `0` compares all of them.
    pub coords_per_param: usize,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        GradSuiteConfig {
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            kernel_size: 3,
            vocab_size: 50,
            caption_len: 4,
            seed: 0,
            step: crate::tensor::DEFAULT_FD_STEP,
            coords_per_param: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
    pub threshold: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.threshold
    }
}

type Objective = Box<dyn Fn(&mut Tape<'_>, &[Var]) -> TResult<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: Objective,
    threshold: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("positive dims")
}

/// `Σ op(inputs) ⊙ R` for a fixed random `R`, so every output coordinate
/// contributes a distinct weight.
fn projected(proj: Tensor, op: impl Fn(&mut Tape<'_>, &[Var]) -> TResult<Var> + 'static) -> Objective {
    Box::new(move |t, v| {
        let y = op(t, v)?;
        let p = t.constant(proj.clone());
        let y = t.mul(y, p)?;
        t.sum(y)
    })
}

fn primitive(rng: &mut ChaCha8Rng, name: &'static str, inputs: Vec<Tensor>, out: Vec<usize>, op: impl Fn(&mut Tape<'_>, &[Var]) -> TResult<Var> + 'static) -> Case {
    Case { name, inputs, f: projected(rand_tensor(rng, out), op), threshold: PRIMITIVE_TOL }
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let a = rand_tensor(rng, vec![3, 4]);
    let a2 = rand_tensor(rng, vec![3, 4]);
    let a3 = rand_tensor(rng, vec![3, 4]);
    let b = rand_tensor(rng, vec![4, 5]);
    let bt = rand_tensor(rng, vec![5, 4]);
    let w = rand_tensor(rng, vec![2, 4]);
    let bias = rand_tensor(rng, vec![2]);
    let col = rand_tensor(rng, vec![3]);
    let gl = rand_tensor(rng, vec![3, 8]);
    let gain = rand_tensor(rng, vec![4]);
    let ln_bias = rand_tensor(rng, vec![4]);
    let mix = rand_tensor(rng, vec![3]);
    let gx = rand_tensor(rng, vec![5, 6]);
    let gw = rand_tensor(rng, vec![3, 2]);
    let vals = rand_tensor(rng, vec![6, 4]);
    let scores = rand_tensor(rng, vec![6, 2]);
    // relu inputs stay away from the kink
    let relu_in = Tensor::matrix(2, 3, vec![0.5, -0.4, 0.9, -1.1, 0.3, -0.2]).expect("static");
    vec![
        primitive(rng, "linear", vec![a.clone(), w, bias], vec![3, 2], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        primitive(rng, "matmul", vec![a.clone(), b], vec![3, 5], |t, v| t.matmul(v[0], v[1])),
        primitive(rng, "matmul_nt", vec![a.clone(), bt], vec![3, 5], |t, v| t.matmul_nt(v[0], v[1])),
        primitive(rng, "add", vec![a.clone(), a2.clone()], vec![3, 4], |t, v| t.add(v[0], v[1])),
        primitive(rng, "mul", vec![a.clone(), a2.clone()], vec![3, 4], |t, v| t.mul(v[0], v[1])),
        primitive(rng, "scale", vec![a.clone()], vec![3, 4], |t, v| t.scale(v[0], -1.7)),
        primitive(rng, "add_col_broadcast", vec![a.clone(), col], vec![3, 4], |t, v| t.add_col_broadcast(v[0], v[1])),
        primitive(rng, "relu", vec![relu_in], vec![2, 3], |t, v| t.relu(v[0])),
        primitive(rng, "glu", vec![gl.clone()], vec![3, 4], |t, v| t.glu(v[0])),
        primitive(rng, "glu_grouped", vec![gl], vec![3, 4], |t, v| t.glu_grouped(v[0], 2)),
        primitive(rng, "softmax", vec![a.clone()], vec![3, 4], |t, v| t.softmax(v[0])),
        primitive(rng, "log_softmax", vec![a.clone()], vec![3, 4], |t, v| t.log_softmax(v[0])),
        primitive(rng, "layer_norm", vec![a.clone(), gain, ln_bias], vec![3, 4], |t, v| {
            t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)
        }),
        primitive(rng, "slice_cols", vec![a.clone()], vec![3, 2], |t, v| t.slice_cols(v[0], 1, 2)),
        primitive(rng, "slice_rows", vec![a.clone()], vec![2, 4], |t, v| t.slice_rows(v[0], 1, 2)),
        primitive(rng, "concat_cols", vec![a.clone(), a2.clone()], vec![3, 8], |t, v| t.concat_cols(&[v[0], v[1]])),
        primitive(rng, "concat_rows", vec![a.clone(), a2.clone()], vec![6, 4], |t, v| t.concat_rows(&[v[0], v[1]])),
        primitive(rng, "gather_rows", vec![a.clone()], vec![4, 4], |t, v| t.gather_rows(v[0], &[2, 0, 2, 1])),
        primitive(rng, "pick", vec![a.clone()], vec![3], |t, v| t.pick(v[0], &[0, 5, 5])),
        primitive(rng, "sum", vec![a.clone()], vec![1], |t, v| t.sum(v[0])),
        primitive(rng, "weighted_sum", vec![mix, a.clone(), a2, a3], vec![3, 4], |t, v| t.weighted_sum(v[0], &[v[1], v[2], v[3]])),
        primitive(rng, "grouped_dot", vec![gx, gw], vec![5, 3], |t, v| t.grouped_dot(v[0], v[1], 3)),
        primitive(rng, "window_mix", vec![vals, scores], vec![4, 4], |t, v| t.window_mix(v[0], v[1], 3)),
        primitive(rng, "reshape", vec![a], vec![2, 6], |t, v| t.reshape(v[0], vec![2, 6])),
    ]
}

fn suite_context_spec() -> ContextSpec {
    ContextSpec {
        d_image: 8,
        m_image: 4,
        d_face: 6,
        max_faces: 2,
        d_object: 8,
        max_objects: 3,
        object_confidence_min: 0.3,
        d_article: 8,
        n_layers: 2,
    }
}

pub fn suite_model_config(cfg: &GradSuiteConfig) -> ModelConfig {
    let v = cfg.vocab_size;
    let clusters = if v >= 10 { vec![v / 5, 2 * v / 5, v - v / 5 - 2 * v / 5] } else { vec![v] };
    ModelConfig {
        context: suite_context_spec(),
        decoder: DecoderConfig {
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            n_blocks: cfg.n_blocks,
            kernel_sizes: vec![cfg.kernel_size; cfg.n_blocks],
            attention_scaling: true,
            max_positions: cfg.caption_len + 4,
            ffn_dim: 4 * cfg.d_model,
        },
        vocab_size: v,
        clusters: Some(ClusterSpec { cutoffs: clusters, tail_dim_divisors: Vec::new() }),
    }
}

/// Looks up named tensors of `model`; the returned indices address them
/// within one input list.
struct Inputs<'m> {
    model: &'m CaptionModel,
    tensors: Vec<Tensor>,
}

impl Inputs<'_> {
    fn push(&mut self, t: Tensor) -> usize {
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn param(&mut self, name: &str) -> usize {
        let id = self.model.param_id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let t = self.model.params().get(id).clone();
        self.push(t)
    }

    fn conv(&mut self, l: usize) -> ConvParams<usize> {
        let p = |s: &str| format!("block{l}.conv.{s}");
        ConvParams {
            proj_w: self.param(&p("proj.w")),
            proj_b: self.param(&p("proj.b")),
            gamma: self.param(&p("gamma")),
            out_w: self.param(&p("out.w")),
            out_b: self.param(&p("out.b")),
            ln_gain: self.param(&p("ln.gain")),
            ln_bias: self.param(&p("ln.bias")),
        }
    }

    fn attn(&mut self, l: usize, domain: &str) -> AttnParams<usize> {
        let p = |s: &str| format!("block{l}.attn.{domain}.{s}");
        AttnParams {
            query: self.param(&p("query")),
            key: self.param(&p("key")),
            value: self.param(&p("value")),
            ln_gain: self.param(&p("ln.gain")),
            ln_bias: self.param(&p("ln.bias")),
        }
    }

    fn fuse(&mut self, l: usize) -> FuseParams<usize> {
        let p = |s: &str| format!("block{l}.fuse.{s}");
        FuseParams {
            c_w: self.param(&p("c.w")),
            c_b: self.param(&p("c.b")),
            ff_w: self.param(&p("ff.w")),
            ff_b: self.param(&p("ff.b")),
            out_w: self.param(&p("out.w")),
            out_b: self.param(&p("out.b")),
            ln_gain: self.param(&p("ln.gain")),
            ln_bias: self.param(&p("ln.bias")),
        }
    }
}

/// Layer-norm gains and biases start at 1 and 0; jitter them so the checks
/// exercise non-trivial affine paths.
fn jittered_model(cfg: &GradSuiteConfig) -> Result<CaptionModel> {
    let mut model = CaptionModel::new(suite_model_config(cfg), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let ids: Vec<usize> = (0..model.params().len()).filter(|&i| model.params().name(i).contains(".ln.")).collect();
    for id in ids {
        for x in model.params_mut().get_mut(id).data_mut() {
            *x += rng.random_range(-0.2..0.2);
        }
    }
    Ok(model)
}

fn composite_cases(cfg: &GradSuiteConfig, model: &CaptionModel, rng: &mut ChaCha8Rng) -> Vec<Case> {
    let d = cfg.d_model;
    let h = cfg.n_heads;
    let k = cfg.kernel_size;
    let t_len = 4usize;
    let mut cases = Vec::new();

    // dynamic convolution through the residual layer norm
    {
        let mut inp = Inputs { model, tensors: Vec::new() };
        let window = inp.push(rand_tensor(rng, vec![t_len + k - 1, d]));
        let conv = inp.conv(0);
        let proj = rand_tensor(rng, vec![t_len, d]);
        cases.push(Case {
            name: "dynamic_conv_block",
            inputs: inp.tensors,
            f: projected(proj, move |t, v| {
                let p = conv.map(|i| v[i]);
                let mixed = decoder::dynamic_conv(t, h, k, &p, v[window])?;
                let z = if k == 1 { v[window] } else { t.slice_rows(v[window], k - 1, t_len)? };
                decoder::conv_block_output(t, z, mixed, &p)
            }),
            threshold: COMPOSITE_TOL,
        });
    }

    // multi-head attention over one domain, including the key/value projections
    {
        let dd = model.config().context.d_image;
        let mut inp = Inputs { model, tensors: Vec::new() };
        let dv = inp.push(rand_tensor(rng, vec![t_len, d]));
        let x = inp.push(rand_tensor(rng, vec![5, dd]));
        let ap = inp.attn(0, "image");
        let scale = model.config().decoder.attention_scale();
        let proj = rand_tensor(rng, vec![t_len, d]);
        cases.push(Case {
            name: "attend_domain",
            inputs: inp.tensors,
            f: projected(proj, move |t, v| {
                let p = ap.map(|i| v[i]);
                let kv = decoder::project_domain(t, v[x], &p)?;
                decoder::attend_domain(t, h, scale, v[dv], Some(kv), &p)
            }),
            threshold: COMPOSITE_TOL,
        });
    }

    // fusion feed-forward
    {
        let mut inp = Inputs { model, tensors: Vec::new() };
        let xs: Vec<usize> = (0..4).map(|_| inp.push(rand_tensor(rng, vec![t_len, d]))).collect();
        let fp = inp.fuse(0);
        let proj = rand_tensor(rng, vec![t_len, d]);
        cases.push(Case {
            name: "fuse",
            inputs: inp.tensors,
            f: projected(proj, move |t, v| decoder::fuse(t, [v[xs[0]], v[xs[1]], v[xs[2]], v[xs[3]]], &fp.map(|i| v[i]))),
            threshold: COMPOSITE_TOL,
        });
    }

    // one full block over fixed contexts
    {
        let spec = model.config().context.clone();
        let dims = spec.domain_dims();
        let mut inp = Inputs { model, tensors: Vec::new() };
        let window = inp.push(rand_tensor(rng, vec![t_len + k - 1, d]));
        let ctx: Vec<usize> = [4usize, 6, 2, 3].iter().zip(dims).map(|(&m, dd)| inp.push(rand_tensor(rng, vec![m, dd]))).collect();
        let conv = inp.conv(0);
        let attn = ["image", "article", "faces", "objects"].map(|n| inp.attn(0, n));
        let fuse = inp.fuse(0);
        let bp = BlockParams { conv, attn, fuse };
        let dc = model.config().decoder.clone();
        let proj = rand_tensor(rng, vec![t_len, d]);
        cases.push(Case {
            name: "decoder_block",
            inputs: inp.tensors,
            f: projected(proj, move |t, v| {
                let p = bp.map(|i| v[i]);
                let mut kv: [Option<DomainKv>; 4] = [None; 4];
                for (i, slot) in kv.iter_mut().enumerate() {
                    *slot = Some(decoder::project_domain(t, v[ctx[i]], &p.attn[i])?);
                }
                decoder::block_forward(t, &dc, k, &p, &kv, v[window])
            }),
            threshold: COMPOSITE_TOL,
        });
    }

    // adaptive softmax NLL with targets in every cluster
    {
        let clusters = model.clusters().clone();
        let mut inp = Inputs { model, tensors: Vec::new() };
        let hv = inp.push(rand_tensor(rng, vec![6, d]));
        let head_w = inp.param("asm.head.w");
        let head_b = inp.param("asm.head.b");
        let tails: Vec<TailParams<usize>> = (1..clusters.cutoffs.len())
            .map(|c| TailParams {
                proj: inp.param(&format!("asm.tail{c}.proj")),
                out_w: inp.param(&format!("asm.tail{c}.out.w")),
                out_b: inp.param(&format!("asm.tail{c}.out.b")),
            })
            .collect();
        let ap = AdaptiveSoftmaxParams { head_w, head_b, tails };
        let v = clusters.vocab_size() as u32;
        let targets: Vec<u32> = (0..6).map(|i| (i * (v - 1)) / 5).collect();
        cases.push(Case {
            name: "adaptive_softmax_nll",
            inputs: inp.tensors,
            f: Box::new(move |t, vars| adaptive_softmax::nll_sum(t, &clusters, &ap.map(|i| vars[i]), vars[hv], &targets)),
            threshold: COMPOSITE_TOL,
        });
    }

    // article layer mixing
    {
        let spec = model.config().context.clone();
        let bundle = synth_context(cfg.seed, &spec, 0, 0, 5, cfg.vocab_size).expect("valid spec");
        let logits = rand_tensor(rng, vec![spec.n_layers]);
        let proj = rand_tensor(rng, vec![5, spec.d_article]);
        cases.push(Case {
            name: "layer_mix",
            inputs: vec![logits],
            f: projected(proj, move |t, v| {
                mix_article_layers_on(t, &bundle.article_layers, v[0])
                    .map_err(|e| match e {
                        ContextError::Tensor(te) => te,
                        other => TensorError::Contract(other.to_string()),
                    })?
                    .ok_or_else(|| TensorError::Contract("empty article".into()))
            }),
            threshold: COMPOSITE_TOL,
        });
    }
    cases
}

/// Central differences on the model's own parameters for the summed caption
/// NLL of one fixture example.
fn model_check(cfg: &GradSuiteConfig, model: &CaptionModel, analytic_scale: f64) -> Result<GradCheckReport> {
    let spec = model.config().context.clone();
    let bundle = synth_context(cfg.seed + 1, &spec, 2, 3, 6, cfg.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 2);
    let caption: Vec<u32> = (0..cfg.caption_len).map(|_| rng.random_range(3..cfg.vocab_size as u32)).collect();
    let analytic = model.example_grads(&bundle, &caption)?;
    let loss = |m: &CaptionModel| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let (l, _) = m.caption_nll(&mut tape, &bound, &bundle, &caption)?;
        Ok(tape.scalar(l))
    };
    let mut work = model.clone();
    let mut report = GradCheckReport::empty();
    let h = cfg.step;
    for id in 0..model.params().len() {
        let n = model.params().get(id).len();
        let coords: Vec<usize> = if cfg.coords_per_param == 0 || n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.coords_per_param).into_vec()
        };
        for i in coords {
            let orig = work.params().get(id).data()[i];
            work.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let plus = loss(&work)?;
            work.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let minus = loss(&work)?;
            work.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.merge(GradCheckReport::compare(analytic_scale * analytic.grads[id][i], numeric));
        }
    }
    Ok(report)
}

pub const MODEL_CHECK: &str = "model_nll";

/// Names of every check, in run order.
pub fn check_names(cfg: &GradSuiteConfig) -> Result<Vec<String>> {
    let model = jittered_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut names: Vec<String> = primitive_cases(&mut rng).iter().map(|c| c.name.to_string()).collect();
    names.extend(composite_cases(cfg, &model, &mut rng).iter().map(|c| c.name.to_string()));
    names.push(MODEL_CHECK.into());
    Ok(names)
}

/// Runs every check. `fault` names one check whose analytic gradient is
/// scaled by 1.01 to confirm the harness catches broken ops.
pub fn run_suite(cfg: &GradSuiteConfig, fault: Option<&str>) -> Result<Vec<CheckResult>> {
    if !(cfg.step > 0.0 && cfg.step <= 1e-2) {
        return Err(Error::Config(format!("gradcheck.step {} outside (0, 1e-2]", cfg.step)));
    }
    let model = jittered_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = primitive_cases(&mut rng);
    cases.extend(composite_cases(cfg, &model, &mut rng));
    let scale_for = |name: &str| if fault == Some(name) { 1.01 } else { 1.0 };
    let mut out = Vec::with_capacity(cases.len() + 1);
    for c in cases {
        let report = grad_check_scaled(&c.f, &c.inputs, cfg.step, scale_for(c.name))?;
        out.push(CheckResult { name: c.name.into(), report, threshold: c.threshold });
    }
    let report = model_check(cfg, &model, scale_for(MODEL_CHECK))?;
    out.push(CheckResult { name: MODEL_CHECK.into(), report, threshold: COMPOSITE_TOL });
    if let Some(f) = fault {
        if !out.iter().any(|r| r.name == f) {
            return Err(Error::Config(format!("unknown gradcheck fault target {f:?}")));
        }
    }
    Ok(out)
}
