//! Frequency-clustered output distribution.
//!
//! Ids are split into contiguous clusters by id order. The head scores the
//! first cluster's tokens plus one logit per tail cluster; a tail token's
//! probability is `p(cluster | h) · p(token | cluster, h)`, where the tail
//! distribution runs on a down-projected `h`.

use serde::{Deserialize, Serialize};

use crate::params::{Initializer, ParamId};
use crate::tensor::{Result, Tape, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    /// Cluster sizes in id order; they sum to the vocabulary size.
    pub cutoffs: Vec<usize>,
    /// Per-tail divisor of `d_model` for the tail projection width. Empty
    /// means `4^k` for the `k`-th tail.
    #[serde(default)]
    pub tail_dim_divisors: Vec<usize>,
}

impl ClusterSpec {
    /// Sizes `[V/5, 2V/5, rest]`, e.g. `[200, 400, 400]` for 1,000 tokens.
    /// Small vocabularies fall back to fewer clusters.
    pub fn default_for(vocab: usize) -> Self {
        let a = vocab / 5;
        let b = 2 * vocab / 5;
        let cutoffs = if a == 0 || b == 0 || vocab - a - b == 0 { vec![vocab] } else { vec![a, b, vocab - a - b] };
        ClusterSpec { cutoffs, tail_dim_divisors: Vec::new() }
    }

    pub fn single(vocab: usize) -> Self {
        ClusterSpec { cutoffs: vec![vocab], tail_dim_divisors: Vec::new() }
    }

    pub fn vocab_size(&self) -> usize {
        self.cutoffs.iter().sum()
    }

    pub fn n_tails(&self) -> usize {
        self.cutoffs.len().saturating_sub(1)
    }

    pub fn head_size(&self) -> usize {
        self.cutoffs[0]
    }

    /// First id of cluster `c`.
    pub fn offset(&self, c: usize) -> usize {
        self.cutoffs[..c].iter().sum()
    }

    pub fn cluster_of(&self, id: usize) -> Option<usize> {
        let mut start = 0;
        for (c, &size) in self.cutoffs.iter().enumerate() {
            if id < start + size {
                return Some(c);
            }
            start += size;
        }
        None
    }

    /// Projection width of tail `k` (1-based cluster index).
    pub fn tail_dim(&self, d_model: usize, k: usize) -> usize {
        let div = self.tail_dim_divisors.get(k - 1).copied().unwrap_or(4usize.pow(k as u32));
        (d_model / div).max(1)
    }

    pub fn validate(&self, vocab: usize) -> std::result::Result<(), String> {
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err("clusters.cutoffs must be non-empty with every entry ≥ 1".into());
        }
        if self.vocab_size() != vocab {
            return Err(format!("clusters.cutoffs sum to {} but vocab_size is {vocab}", self.vocab_size()));
        }
        if !self.tail_dim_divisors.is_empty() && self.tail_dim_divisors.len() != self.n_tails() {
            return Err(format!(
                "clusters.tail_dim_divisors has {} entries for {} tails",
                self.tail_dim_divisors.len(),
                self.n_tails()
            ));
        }
        if self.tail_dim_divisors.contains(&0) {
            return Err("clusters.tail_dim_divisors entries must be ≥ 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailParams<T> {
    /// `[d_k, d_model]`, no bias.
    pub proj: T,
    /// `[size_k, d_k]`
    pub out_w: T,
    pub out_b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveSoftmaxParams<T> {
    /// `[head_size + n_tails, d_model]`
    pub head_w: T,
    pub head_b: T,
    pub tails: Vec<TailParams<T>>,
}

impl<T: Copy> AdaptiveSoftmaxParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> AdaptiveSoftmaxParams<U> {
        AdaptiveSoftmaxParams {
            head_w: f(self.head_w),
            head_b: f(self.head_b),
            tails: self.tails.iter().map(|t| TailParams { proj: f(t.proj), out_w: f(t.out_w), out_b: f(t.out_b) }).collect(),
        }
    }
}

pub(crate) fn init_adaptive_softmax(init: &mut Initializer<'_>, spec: &ClusterSpec, d: usize) -> AdaptiveSoftmaxParams<ParamId> {
    let head_w = init.uniform("asm.head.w".into(), vec![spec.head_size() + spec.n_tails(), d], d);
    let head_b = init.uniform("asm.head.b".into(), vec![spec.head_size() + spec.n_tails()], d);
    let tails = (1..spec.cutoffs.len())
        .map(|k| {
            let dk = spec.tail_dim(d, k);
            TailParams {
                proj: init.uniform(format!("asm.tail{k}.proj"), vec![dk, d], d),
                out_w: init.uniform(format!("asm.tail{k}.out.w"), vec![spec.cutoffs[k], dk], dk),
                out_b: init.uniform(format!("asm.tail{k}.out.b"), vec![spec.cutoffs[k]], dk),
            }
        })
        .collect();
    AdaptiveSoftmaxParams { head_w, head_b, tails }
}

fn tail_log_probs(tape: &mut Tape<'_>, h: Var, t: &TailParams<Var>) -> Result<Var> {
    let low = tape.linear(h, t.proj, None)?;
    let logits = tape.linear(low, t.out_w, Some(t.out_b))?;
    tape.log_softmax(logits)
}

/// Full log-distribution for every row of `h: [T, D]`, giving `[T, V]`.
pub fn log_prob_rows(tape: &mut Tape<'_>, spec: &ClusterSpec, p: &AdaptiveSoftmaxParams<Var>, h: Var) -> Result<Var> {
    let head_logits = tape.linear(h, p.head_w, Some(p.head_b))?;
    let head = tape.log_softmax(head_logits)?;
    if spec.n_tails() == 0 {
        return Ok(head);
    }
    let c0 = spec.head_size();
    let mut parts = vec![tape.slice_cols(head, 0, c0)?];
    for (k, t) in p.tails.iter().enumerate() {
        let gate = tape.slice_cols(head, c0 + k, 1)?;
        let within = tail_log_probs(tape, h, t)?;
        parts.push(tape.add_col_broadcast(within, gate)?);
    }
    tape.concat_cols(&parts)
}

/// `Σ_t −log p(targets[t] | h_t)` evaluating only the head and the tails
/// that some target actually falls in.
pub fn nll_sum(tape: &mut Tape<'_>, spec: &ClusterSpec, p: &AdaptiveSoftmaxParams<Var>, h: Var, targets: &[u32]) -> Result<Var> {
    let rows = tape.shape(h)[0];
    if targets.len() != rows {
        return Err(TensorError::shape("nll", format!("{} targets for {rows} rows", targets.len())));
    }
    let v = spec.vocab_size();
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(TensorError::domain("nll", format!("target {bad} outside vocabulary of {v}")));
    }
    let c0 = spec.head_size();
    let width = c0 + spec.n_tails();
    let head_logits = tape.linear(h, p.head_w, Some(p.head_b))?;
    let head = tape.log_softmax(head_logits)?;
    let mut head_idx = Vec::with_capacity(rows);
    let mut tail_rows: Vec<Vec<(usize, usize)>> = vec![Vec::new(); spec.n_tails()];
    for (r, &t) in targets.iter().enumerate() {
        let t = t as usize;
        let c = spec.cluster_of(t).expect("checked above");
        if c == 0 {
            head_idx.push(r * width + t);
        } else {
            head_idx.push(r * width + c0 + c - 1);
            tail_rows[c - 1].push((r, t - spec.offset(c)));
        }
    }
    let picked = tape.pick(head, &head_idx)?;
    let mut total = tape.sum(picked)?;
    for (k, members) in tail_rows.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let ids: Vec<usize> = members.iter().map(|m| m.0).collect();
        let hk = tape.gather_rows(h, &ids)?;
        let lp = tail_log_probs(tape, hk, &p.tails[k])?;
        let size = spec.cutoffs[k + 1];
        let idx: Vec<usize> = members.iter().enumerate().map(|(i, m)| i * size + m.1).collect();
        let picked = tape.pick(lp, &idx)?;
        let s = tape.sum(picked)?;
        total = tape.add(total, s)?;
    }
    tape.scale(total, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_clusters() {
        assert_eq!(ClusterSpec::default_for(1000).cutoffs, vec![200, 400, 400]);
        assert_eq!(ClusterSpec::default_for(3).cutoffs, vec![3]);
        let s = ClusterSpec::default_for(1000);
        assert_eq!(s.cluster_of(199), Some(0));
        assert_eq!(s.cluster_of(200), Some(1));
        assert_eq!(s.cluster_of(999), Some(2));
        assert_eq!(s.cluster_of(1000), None);
        assert_eq!((s.tail_dim(64, 1), s.tail_dim(64, 2)), (16, 4));
        assert!(s.validate(999).unwrap_err().contains("cutoffs"));
    }
}
