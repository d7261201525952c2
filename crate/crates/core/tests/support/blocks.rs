//! Parameter bundles for the decoder and output-layer building blocks,
//! bound as tape constants.

use newscap::adaptive_softmax::{log_prob_rows, nll_sum, AdaptiveSoftmaxParams, ClusterSpec, TailParams};
use newscap::decoder::{attend_domain, dynamic_conv, project_domain, AttnParams, ConvParams};
use newscap::tensor::{Tape, Tensor, TensorError, Var};
use rand_chacha::ChaCha8Rng;

use super::dense::{matvec, rand_tensor, sigmoid};

pub struct Conv {
    pub w: Tensor,
    pub b: Tensor,
    pub gamma: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Conv {
    pub fn random(rng: &mut ChaCha8Rng, d: usize, h: usize) -> Self {
        Conv {
            w: rand_tensor(rng, vec![2 * d, d]),
            b: rand_tensor(rng, vec![2 * d]),
            gamma: rand_tensor(rng, vec![h, d / h]),
            out_w: rand_tensor(rng, vec![d, d]),
            out_b: rand_tensor(rng, vec![d]),
            gain: Tensor::filled(vec![d], 1.0).unwrap(),
            bias: Tensor::zeros(vec![d]).unwrap(),
        }
    }

    pub fn bind<'p>(&'p self, t: &mut Tape<'p>) -> ConvParams<Var> {
        ConvParams {
            proj_w: t.constant_ref(&self.w),
            proj_b: t.constant_ref(&self.b),
            gamma: t.constant_ref(&self.gamma),
            out_w: t.constant_ref(&self.out_w),
            out_b: t.constant_ref(&self.out_b),
            ln_gain: t.constant_ref(&self.gain),
            ln_bias: t.constant_ref(&self.bias),
        }
    }

    /// Per-head GLU of one input row, computed directly.
    pub fn z_prime(&self, z: &[f64], h: usize) -> Vec<Vec<f64>> {
        let d = z.len();
        let dh = d / h;
        let mut proj = matvec(&self.w, z);
        for (p, b) in proj.iter_mut().zip(self.b.data()) {
            *p += b;
        }
        (0..h)
            .map(|hh| {
                let blk = &proj[2 * hh * dh..2 * (hh + 1) * dh];
                (0..dh).map(|i| blk[i] * sigmoid(blk[dh + i])).collect()
            })
            .collect()
    }
}

pub fn conv_out(conv: &Conv, window: &Tensor, h: usize, k: usize) -> Vec<f64> {
    let mut t = Tape::new();
    let p = conv.bind(&mut t);
    let w = t.constant(window.clone());
    let o = dynamic_conv(&mut t, h, k, &p, w).unwrap();
    t.value(o).to_vec()
}

pub struct Attn {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Attn {
    pub fn random(rng: &mut ChaCha8Rng, d: usize, dd: usize) -> Self {
        Attn {
            q: rand_tensor(rng, vec![d, d]),
            k: rand_tensor(rng, vec![d, dd]),
            v: rand_tensor(rng, vec![d, dd]),
            gain: Tensor::filled(vec![d], 1.0).unwrap(),
            bias: Tensor::zeros(vec![d]).unwrap(),
        }
    }

    pub fn bind<'p>(&'p self, t: &mut Tape<'p>) -> AttnParams<Var> {
        AttnParams {
            query: t.constant_ref(&self.q),
            key: t.constant_ref(&self.k),
            value: t.constant_ref(&self.v),
            ln_gain: t.constant_ref(&self.gain),
            ln_bias: t.constant_ref(&self.bias),
        }
    }
}

pub fn attend(a: &Attn, d: &Tensor, x: Option<&Tensor>, heads: usize) -> Vec<f64> {
    let mut t = Tape::new();
    let p = a.bind(&mut t);
    let dv = t.constant(d.clone());
    let kv = x.map(|x| {
        let xv = t.constant(x.clone());
        project_domain(&mut t, xv, &p).unwrap()
    });
    let o = attend_domain(&mut t, heads, Some(0.5), dv, kv, &p).unwrap();
    t.value(o).to_vec()
}

/// Head weight/bias, then (proj, out_w, out_b) per tail.
pub fn random_params(rng: &mut ChaCha8Rng, spec: &ClusterSpec, d: usize) -> Vec<Tensor> {
    let head = spec.head_size() + spec.n_tails();
    let mut out = vec![rand_tensor(rng, vec![head, d]), rand_tensor(rng, vec![head])];
    for k in 1..spec.cutoffs.len() {
        let dk = spec.tail_dim(d, k);
        out.push(rand_tensor(rng, vec![dk, d]));
        out.push(rand_tensor(rng, vec![spec.cutoffs[k], dk]));
        out.push(rand_tensor(rng, vec![spec.cutoffs[k]]));
    }
    out
}

pub fn as_params(v: &[Var]) -> AdaptiveSoftmaxParams<Var> {
    AdaptiveSoftmaxParams {
        head_w: v[0],
        head_b: v[1],
        tails: v[2..].chunks(3).map(|c| TailParams { proj: c[0], out_w: c[1], out_b: c[2] }).collect(),
    }
}

pub fn full_log_probs(spec: &ClusterSpec, params: &[Tensor], h: &Tensor) -> Vec<f64> {
    let mut t = Tape::new();
    let v: Vec<Var> = params.iter().map(|p| t.constant_ref(p)).collect();
    let hv = t.constant(h.clone());
    let lp = log_prob_rows(&mut t, spec, &as_params(&v), hv).unwrap();
    t.value(lp).to_vec()
}

pub fn nll(spec: &ClusterSpec, params: &[Tensor], h: &Tensor, targets: &[u32]) -> Result<f64, TensorError> {
    let mut t = Tape::new();
    let v: Vec<Var> = params.iter().map(|p| t.constant_ref(p)).collect();
    let hv = t.constant(h.clone());
    let l = nll_sum(&mut t, spec, &as_params(&v), hv, targets)?;
    Ok(t.scalar(l))
}

