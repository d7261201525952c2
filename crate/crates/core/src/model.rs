//! The full captioning model: embeddings, article layer mixing, decoder
//! blocks and the adaptive-softmax output layer.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive_softmax::{self, AdaptiveSoftmaxParams, ClusterSpec};
use crate::bpe::{BOS, EOS};
use crate::context::{mix_article_layers_on, ContextBundle, ContextSpec, Matrix};
use crate::decoder::{self, BlockParams, DecoderConfig, DomainKv};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub context: ContextSpec,
    pub decoder: DecoderConfig,
    pub vocab_size: usize,
    /// Defaults to [`ClusterSpec::default_for`] the vocabulary size.
    pub clusters: Option<ClusterSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            context: ContextSpec::default(),
            decoder: DecoderConfig::default(),
            vocab_size: crate::bpe::DEFAULT_VOCAB_SIZE,
            clusters: None,
        }
    }
}

impl ModelConfig {
    pub fn clusters(&self) -> ClusterSpec {
        self.clusters.clone().unwrap_or_else(|| ClusterSpec::default_for(self.vocab_size))
    }

    pub fn validate(&self) -> Result<()> {
        self.context.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.decoder.validate().map_err(Error::Config)?;
        if self.vocab_size <= crate::bpe::N_SPECIAL {
            return Err(Error::Config(format!("vocab_size {} leaves no room for content tokens", self.vocab_size)));
        }
        self.clusters().validate(self.vocab_size).map_err(Error::Config)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout<T> {
    token_emb: T,
    pos_emb: T,
    mix_logits: T,
    blocks: Vec<BlockParams<T>>,
    asm: AdaptiveSoftmaxParams<T>,
}

impl<T: Copy> Layout<T> {
    fn map<U>(&self, mut f: impl FnMut(T) -> U) -> Layout<U> {
        Layout {
            token_emb: f(self.token_emb),
            pos_emb: f(self.pos_emb),
            mix_logits: f(self.mix_logits),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            asm: self.asm.map(&mut f),
        }
    }
}

/// Parameters bound onto one tape.
pub struct Bound {
    layout: Layout<Var>,
}

impl Bound {
    pub fn block(&self, l: usize) -> &BlockParams<Var> {
        &self.layout.blocks[l]
    }

    pub fn mix_logits(&self) -> Var {
        self.layout.mix_logits
    }
}

/// Per-block keys and values for each domain; `None` marks an empty domain.
pub type ContextKv = Vec<[Option<DomainKv>; 4]>;

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    config: ModelConfig,
    clusters: ClusterSpec,
    params: ParamStore,
    layout: Layout<ParamId>,
}

/// Teacher-forced scores of one caption (targets include the final EOS).
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForced {
    pub log_probs: Vec<f64>,
    pub predictions: Vec<u32>,
    pub targets: Vec<u32>,
}

impl TeacherForced {
    pub fn correct(&self) -> usize {
        self.predictions.iter().zip(&self.targets).filter(|(p, t)| p == t).count()
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// One example's loss sum, token count and dense per-parameter gradients.
#[derive(Debug, Clone)]
pub struct ExampleGrads {
    pub loss_sum: f64,
    pub tokens: usize,
    pub grads: Vec<Vec<f64>>,
}

/// Incremental decoding state: cached context projections plus the input
/// history of every block.
#[derive(Debug, Clone)]
pub struct DecoderState {
    kv: Arc<Vec<[Option<(Tensor, Tensor)>; 4]>>,
    history: Vec<Vec<f64>>,
    steps: usize,
}

impl DecoderState {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Rows of block `l`'s input consumed so far.
    pub fn history_len(&self, l: usize, d_model: usize) -> usize {
        self.history[l].len() / d_model
    }
}

/// Argmax over a log-distribution with PAD and BOS excluded; ties go to the
/// lowest id.
pub fn argmax_token(log_probs: &[f64]) -> u32 {
    let mut best = EOS as usize;
    for (i, &v) in log_probs.iter().enumerate().skip(EOS as usize) {
        if v > log_probs[best] {
            best = i;
        }
    }
    best as u32
}

impl CaptionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let clusters = config.clusters();
        let mut params = ParamStore::new();
        let mut init = Initializer { rng: ChaCha8Rng::seed_from_u64(seed), store: &mut params };
        let dc = &config.decoder;
        let d = dc.d_model;
        let token_emb = init.uniform("emb.token".into(), vec![config.vocab_size, d], d);
        let pos_emb = init.uniform("emb.pos".into(), vec![dc.max_positions, d], d);
        let mix_logits = init.filled("mix.logits".into(), vec![config.context.n_layers], 0.0);
        let dims = config.context.domain_dims();
        let blocks = (0..dc.n_blocks).map(|l| decoder::init_block(&mut init, dc, dims, l)).collect();
        let asm = adaptive_softmax::init_adaptive_softmax(&mut init, &clusters, d);
        let layout = Layout { token_emb, pos_emb, mix_logits, blocks, asm };
        Ok(CaptionModel { config, clusters, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn clusters(&self) -> &ClusterSpec {
        &self.clusters
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Bound {
        let vars: Vec<Var> = self.params.tensors().iter().enumerate().map(|(i, t)| tape.param(i, t)).collect();
        Bound { layout: self.layout.map(|id| vars[id]) }
    }

    fn check_bundle(&self, bundle: &ContextBundle) -> Result<()> {
        bundle.validate(&self.config.context)?;
        Ok(())
    }

    fn matrix_var(tape: &mut Tape<'_>, m: &Matrix) -> Option<Var> {
        m.to_tensor().map(|t| tape.constant(t))
    }

    /// Mixes article layers and projects every domain into each block's
    /// key/value space.
    pub fn encode_context(&self, tape: &mut Tape<'_>, bound: &Bound, bundle: &ContextBundle) -> Result<ContextKv> {
        self.check_bundle(bundle)?;
        let article = mix_article_layers_on(tape, &bundle.article_layers, bound.layout.mix_logits)?;
        let xs = [
            Self::matrix_var(tape, &bundle.image),
            article,
            Self::matrix_var(tape, &bundle.faces),
            Self::matrix_var(tape, &bundle.objects),
        ];
        let mut out = Vec::with_capacity(bound.layout.blocks.len());
        for bp in &bound.layout.blocks {
            let mut kv = [None; 4];
            for (i, slot) in kv.iter_mut().enumerate() {
                if let Some(x) = xs[i] {
                    *slot = Some(decoder::project_domain(tape, x, &bp.attn[i])?);
                }
            }
            out.push(kv);
        }
        Ok(out)
    }

    fn check_capacity(&self, positions: usize) -> Result<()> {
        let max = self.config.decoder.max_positions;
        if positions > max {
            return Err(Error::Capacity(format!("{positions} decoder positions exceed max_positions {max}")));
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Domain(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// Teacher-forced pass: final-block hidden states `[T, D]` for the
    /// given decoder inputs.
    pub fn hidden_states(&self, tape: &mut Tape<'_>, bound: &Bound, kv: &ContextKv, input_ids: &[u32]) -> Result<Var> {
        if input_ids.is_empty() {
            return Err(Error::Domain("empty decoder input".into()));
        }
        self.check_capacity(input_ids.len())?;
        self.check_ids(input_ids)?;
        let ids: Vec<usize> = input_ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = tape.gather_rows(bound.layout.token_emb, &ids)?;
        let pos = tape.gather_rows(bound.layout.pos_emb, &positions)?;
        let mut z = tape.add(tok, pos)?;
        let dc = &self.config.decoder;
        for (l, bp) in bound.layout.blocks.iter().enumerate() {
            let k = dc.kernel_sizes[l];
            let window = if k == 1 {
                z
            } else {
                let pad = tape.constant(Tensor::zeros(vec![k - 1, dc.d_model])?);
                tape.concat_rows(&[pad, z])?
            };
            z = decoder::block_forward(tape, dc, k, bp, &kv[l], window)?;
        }
        Ok(z)
    }

    pub fn log_prob_rows(&self, tape: &mut Tape<'_>, bound: &Bound, h: Var) -> Result<Var> {
        Ok(adaptive_softmax::log_prob_rows(tape, &self.clusters, &bound.layout.asm, h)?)
    }

    /// Summed NLL of `caption + [EOS]` given `[BOS] + caption`, plus the
    /// token count.
    pub fn caption_nll(&self, tape: &mut Tape<'_>, bound: &Bound, bundle: &ContextBundle, caption: &[u32]) -> Result<(Var, usize)> {
        let kv = self.encode_context(tape, bound, bundle)?;
        let (input, targets) = teacher_forcing_pair(caption);
        self.check_ids(&targets)?;
        let h = self.hidden_states(tape, bound, &kv, &input)?;
        let loss = adaptive_softmax::nll_sum(tape, &self.clusters, &bound.layout.asm, h, &targets)?;
        Ok((loss, targets.len()))
    }

    pub fn example_grads(&self, bundle: &ContextBundle, caption: &[u32]) -> Result<ExampleGrads> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (loss, tokens) = self.caption_nll(&mut tape, &bound, bundle, caption)?;
        let g = tape.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = self.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        for (id, gv) in g.params() {
            grads[id].copy_from_slice(gv);
        }
        Ok(ExampleGrads { loss_sum: tape.scalar(loss), tokens, grads })
    }

    pub fn teacher_forced(&self, bundle: &ContextBundle, caption: &[u32]) -> Result<TeacherForced> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let kv = self.encode_context(&mut tape, &bound, bundle)?;
        let (input, targets) = teacher_forcing_pair(caption);
        self.check_ids(&targets)?;
        let h = self.hidden_states(&mut tape, &bound, &kv, &input)?;
        let lp = self.log_prob_rows(&mut tape, &bound, h)?;
        let v = self.config.vocab_size;
        let rows = tape.value(lp);
        let mut log_probs = Vec::with_capacity(targets.len());
        let mut predictions = Vec::with_capacity(targets.len());
        for (t, &target) in targets.iter().enumerate() {
            let row = &rows[t * v..(t + 1) * v];
            log_probs.push(row[target as usize]);
            predictions.push(argmax_token(row));
        }
        Ok(TeacherForced { log_probs, predictions, targets })
    }

    /// Caches context projections for incremental decoding.
    pub fn start_state(&self, bundle: &ContextBundle) -> Result<DecoderState> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let kv = self.encode_context(&mut tape, &bound, bundle)?;
        let cached = kv
            .iter()
            .map(|blk| blk.map(|slot| slot.map(|s| (tape.tensor(s.keys), tape.tensor(s.values)))))
            .collect();
        Ok(DecoderState {
            kv: Arc::new(cached),
            history: vec![Vec::new(); self.config.decoder.n_blocks],
            steps: 0,
        })
    }

    /// Consumes `prev` at position `state.steps()` and returns the final
    /// block's hidden vector.
    pub fn decode_step(&self, state: &mut DecoderState, prev: u32) -> Result<Vec<f64>> {
        let (h, _) = self.step(state, prev, false)?;
        Ok(h)
    }

    /// As [`decode_step`](Self::decode_step), returning the next-token
    /// log-distribution.
    pub fn step_log_probs(&self, state: &mut DecoderState, prev: u32) -> Result<Vec<f64>> {
        let (_, lp) = self.step(state, prev, true)?;
        Ok(lp.expect("requested"))
    }

    fn step(&self, state: &mut DecoderState, prev: u32, want_logp: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let t = state.steps;
        self.check_capacity(t + 1)?;
        self.check_ids(&[prev])?;
        let dc = &self.config.decoder;
        let d = dc.d_model;
        let kv_store = Arc::clone(&state.kv);
        let mut block_inputs = Vec::with_capacity(dc.n_blocks);
        let (hidden, logp) = {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape);
            let tok = tape.gather_rows(bound.layout.token_emb, &[prev as usize])?;
            let pos = tape.gather_rows(bound.layout.pos_emb, &[t])?;
            let mut z = tape.add(tok, pos)?;
            for (l, bp) in bound.layout.blocks.iter().enumerate() {
                let k = dc.kernel_sizes[l];
                let zv = tape.value(z).to_vec();
                let mut window = vec![0.0; k * d];
                let hist = &state.history[l];
                let have = hist.len() / d;
                let take = (k - 1).min(have);
                let start_row = k - 1 - take;
                window[start_row * d..(k - 1) * d].copy_from_slice(&hist[(have - take) * d..]);
                window[(k - 1) * d..].copy_from_slice(&zv);
                block_inputs.push(zv);
                let w = tape.constant(Tensor::new(vec![k, d], window)?);
                let kv: [Option<DomainKv>; 4] = kv_store[l].each_ref().map(|slot| {
                    slot.as_ref().map(|(keys, values)| DomainKv { keys: tape.constant_ref(keys), values: tape.constant_ref(values) })
                });
                z = decoder::block_forward(&mut tape, dc, k, bp, &kv, w)?;
            }
            let hidden = tape.value(z).to_vec();
            let logp = if want_logp {
                let lp = self.log_prob_rows(&mut tape, &bound, z)?;
                Some(tape.value(lp).to_vec())
            } else {
                None
            };
            (hidden, logp)
        };
        for (l, zv) in block_inputs.into_iter().enumerate() {
            state.history[l].extend_from_slice(&zv);
        }
        state.steps += 1;
        Ok((hidden, logp))
    }
}

/// `([BOS] + caption, caption + [EOS])`
pub fn teacher_forcing_pair(caption: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(caption.len() + 1);
    input.push(BOS);
    input.extend_from_slice(caption);
    let mut targets = caption.to_vec();
    targets.push(EOS);
    (input, targets)
}
