//! Greedy and beam-search caption decoding.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bpe::{BpeVocab, BOS, EOS, N_SPECIAL};
use crate::context::ContextBundle;
use crate::error::{Error, Result};
use crate::model::{argmax_token, CaptionModel, DecoderState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

impl std::str::FromStr for DecodeMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "beam" => Ok(DecodeMode::Beam),
            other => Err(format!("unknown decode mode {other:?} (expected greedy or beam)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Content-token budget; EOS is forced after this many tokens.
    pub max_len: usize,
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub length_normalization: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { max_len: 50, mode: DecodeMode::Greedy, beam_size: 5, length_normalization: 1.0 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::Config("generate.max_len must be at least 1".into()));
        }
        if self.beam_size == 0 {
            return Err(Error::Config("generate.beam_size must be at least 1".into()));
        }
        if !(self.length_normalization >= 0.0 && self.length_normalization.is_finite()) {
            return Err(Error::Config("generate.length_normalization must be non-negative".into()));
        }
        Ok(())
    }
}

/// Anything that can score the next token given a decoding state.
pub trait StepScorer {
    type State: Clone;
    /// Consumes `prev` and returns the next-token log-distribution.
    fn next_log_probs(&self, state: &mut Self::State, prev: u32) -> Result<Vec<f64>>;
}

/// A [`CaptionModel`] conditioned on one context bundle.
pub struct Conditioned<'m> {
    pub model: &'m CaptionModel,
}

impl StepScorer for Conditioned<'_> {
    type State = DecoderState;
    fn next_log_probs(&self, state: &mut DecoderState, prev: u32) -> Result<Vec<f64>> {
        self.model.step_log_probs(state, prev)
    }
}

/// A decoded sequence. `token_ids` ends with EOS; `step_log_probs[i]` is the
/// log-probability of `token_ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub token_ids: Vec<u32>,
    pub step_log_probs: Vec<f64>,
}

impl Generated {
    pub fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }

    /// `log p / len^α`, with the length counting the EOS.
    pub fn normalized_score(&self, alpha: f64) -> f64 {
        normalized(self.log_prob(), self.token_ids.len(), alpha)
    }

    pub fn content(&self) -> &[u32] {
        match self.token_ids.last() {
            Some(&EOS) => &self.token_ids[..self.token_ids.len() - 1],
            _ => &self.token_ids,
        }
    }
}

fn normalized(logp: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        logp
    } else {
        logp / (len as f64).powf(alpha)
    }
}

pub fn greedy<S: StepScorer>(scorer: &S, mut state: S::State, max_len: usize) -> Result<Generated> {
    let mut out = Generated { token_ids: Vec::new(), step_log_probs: Vec::new() };
    let mut prev = BOS;
    loop {
        let lp = scorer.next_log_probs(&mut state, prev)?;
        let tok = if out.token_ids.len() == max_len { EOS } else { argmax_token(&lp) };
        out.token_ids.push(tok);
        out.step_log_probs.push(lp[tok as usize]);
        if tok == EOS {
            return Ok(out);
        }
        prev = tok;
    }
}

struct Hyp<St> {
    seq: Generated,
    score: f64,
    state: St,
}

/// Beam search over raw cumulative log-probability; finished hypotheses are
/// ranked by length-normalized score. The greedy sequence is always in the
/// finished pool, so the result never scores below it.
pub fn beam<S: StepScorer>(scorer: &S, state: S::State, max_len: usize, beam_size: usize, alpha: f64) -> Result<(Generated, BeamDiagnostics)> {
    if beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let greedy_seq = greedy(scorer, state.clone(), max_len)?;
    let mut finished = vec![greedy_seq];
    let mut alive = vec![Hyp { seq: Generated { token_ids: Vec::new(), step_log_probs: Vec::new() }, score: 0.0, state }];
    let mut expansions = 0;
    while !alive.is_empty() {
        let mut candidates: Vec<(f64, usize, u32, f64)> = Vec::new();
        for (h, hyp) in alive.iter_mut().enumerate() {
            let prev = hyp.seq.token_ids.last().copied().unwrap_or(BOS);
            let lp = scorer.next_log_probs(&mut hyp.state, prev)?;
            expansions += 1;
            if hyp.seq.token_ids.len() == max_len {
                candidates.push((hyp.score + lp[EOS as usize], h, EOS, lp[EOS as usize]));
            } else {
                for (tok, &v) in lp.iter().enumerate().skip(EOS as usize) {
                    candidates.push((hyp.score + v, h, tok as u32, v));
                }
            }
        }
        // Best score first; ties go to the earlier hypothesis, then the lower id.
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(beam_size);
        let mut next = Vec::with_capacity(beam_size);
        for (score, h, tok, v) in candidates {
            let mut seq = alive[h].seq.clone();
            seq.token_ids.push(tok);
            seq.step_log_probs.push(v);
            if tok == EOS {
                finished.push(seq);
            } else {
                next.push(Hyp { seq, score, state: alive[h].state.clone() });
            }
        }
        alive = next;
    }
    let mut best = 0;
    for (i, f) in finished.iter().enumerate() {
        if f.normalized_score(alpha) > finished[best].normalized_score(alpha) {
            best = i;
        }
    }
    let diagnostics = BeamDiagnostics {
        finished: finished.iter().map(|f| (f.token_ids.clone(), f.normalized_score(alpha))).collect(),
        expansions,
    };
    Ok((finished.swap_remove(best), diagnostics))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamDiagnostics {
    /// Every finished hypothesis with its normalized score; the greedy
    /// sequence comes first.
    pub finished: Vec<(Vec<u32>, f64)>,
    pub expansions: usize,
}

/// Decodes one caption with the configured strategy.
pub fn generate(model: &CaptionModel, bundle: &ContextBundle, cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let max_positions = model.config().decoder.max_positions;
    if cfg.max_len + 1 > max_positions {
        return Err(Error::Config(format!("generate.max_len {} needs {} positions; the decoder has {max_positions}", cfg.max_len, cfg.max_len + 1)));
    }
    let scorer = Conditioned { model };
    let state = model.start_state(bundle)?;
    match cfg.mode {
        DecodeMode::Greedy => greedy(&scorer, state, cfg.max_len),
        DecodeMode::Beam => beam(&scorer, state, cfg.max_len, cfg.beam_size, cfg.length_normalization).map(|(g, _)| g),
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub example_id: String,
    pub caption: String,
    pub token_ids: Vec<u32>,
    pub logprob: f64,
}

impl Prediction {
    pub fn new(example_id: &str, generated: &Generated, vocab: &BpeVocab) -> Result<Self> {
        Ok(Prediction {
            example_id: example_id.to_string(),
            caption: vocab.decode(generated.content())?,
            token_ids: generated.token_ids.clone(),
            logprob: generated.log_prob(),
        })
    }
}

pub fn write_predictions(w: &mut impl Write, preds: &[Prediction]) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut *w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Config(format!("predictions line {}: {e}", i + 1))))
        .collect()
}

/// True when no special token other than the final EOS appears.
pub fn is_well_formed(token_ids: &[u32]) -> bool {
    match token_ids.split_last() {
        Some((&EOS, body)) => body.iter().all(|&t| t as usize >= N_SPECIAL),
        _ => false,
    }
}
