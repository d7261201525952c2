//! Synthetic datasets: a memorization set with random captions, and a
//! face-naming task where the right name is recoverable only from the face
//! embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bpe::N_SPECIAL;
use crate::context::{synth_context, ContextError, ContextSpec, Matrix};
use crate::dataset::PreparedExample;

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitSpec {
    pub n_examples: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub article_len: usize,
    pub n_faces: usize,
    pub n_objects: usize,
    pub seed: u64,
}

impl Default for OverfitSpec {
    fn default() -> Self {
        OverfitSpec { n_examples: 32, min_len: 8, max_len: 15, vocab_size: 1000, article_len: 24, n_faces: 2, n_objects: 4, seed: 0 }
    }
}

/// Random contexts paired with uniformly random captions of non-special ids.
pub fn overfit_examples(spec: &ContextSpec, cfg: &OverfitSpec) -> Result<Vec<PreparedExample>, ContextError> {
    if cfg.vocab_size <= N_SPECIAL || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(ContextError::Domain("overfit set needs vocab_size > 3 and 1 <= min_len <= max_len".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_examples)
        .map(|i| {
            let bundle = synth_context(cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64), spec, cfg.n_faces, cfg.n_objects, cfg.article_len, cfg.vocab_size)?;
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let caption_ids = (0..len).map(|_| rng.random_range(N_SPECIAL as u32..cfg.vocab_size as u32)).collect();
            Ok(PreparedExample { id: format!("synth-{i:04}"), caption_ids, bundle })
        })
        .collect()
}

/// A captioning task whose caption is `prefix ++ [name] ++ suffix`, with the
/// name chosen by which prototype the single face embedding was drawn near.
/// Name ids never occur in the article tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceNameTask {
    pub prototypes: Vec<Vec<f64>>,
    pub name_ids: Vec<u32>,
    pub prefix: Vec<u32>,
    pub suffix: Vec<u32>,
    pub noise: f64,
    pub vocab_size: usize,
    pub article_len: usize,
}

impl FaceNameTask {
    pub fn new(spec: &ContextSpec, n_names: usize, vocab_size: usize, seed: u64) -> Result<Self, ContextError> {
        let fixed = 4;
        if vocab_size < N_SPECIAL + n_names + fixed + 1 || n_names == 0 {
            return Err(ContextError::Domain(format!("vocab of {vocab_size} too small for {n_names} names")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prototypes = (0..n_names)
            .map(|_| {
                let v: Vec<f64> = (0..spec.d_face).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let base = N_SPECIAL as u32;
        let name_ids = (0..n_names as u32).map(|k| base + k).collect();
        let f = base + n_names as u32;
        Ok(FaceNameTask {
            prototypes,
            name_ids,
            prefix: vec![f, f + 1],
            suffix: vec![f + 2, f + 3],
            noise: 0.05,
            vocab_size,
            article_len: 16,
        })
    }

    /// Index of the name token inside each caption.
    pub fn name_position(&self) -> usize {
        self.prefix.len()
    }

    pub fn caption(&self, name: usize) -> Vec<u32> {
        let mut c = self.prefix.clone();
        c.push(self.name_ids[name]);
        c.extend_from_slice(&self.suffix);
        c
    }

    /// Examples with fresh random image/object/article contexts; the name of
    /// example `i` is drawn at random. The article never contains a name id.
    pub fn examples(&self, spec: &ContextSpec, n: usize, seed: u64) -> Result<Vec<(usize, PreparedExample)>, ContextError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_face);
        let lowest = *self.name_ids.last().unwrap() + 1;
        (0..n)
            .map(|i| {
                let mut bundle = synth_context(seed.wrapping_mul(7919).wrapping_add(i as u64), spec, 1, 2, self.article_len, self.vocab_size)?;
                for t in bundle.article_token_ids.iter_mut() {
                    if *t >= N_SPECIAL as u32 && *t < lowest {
                        *t = lowest + (*t % (self.vocab_size as u32 - lowest));
                    }
                }
                let name = rng.random_range(0..self.name_ids.len());
                let face: Vec<f64> = self.prototypes[name].iter().map(|&p| (p + self.noise * rng.random_range(-1.0..1.0)) as f32 as f64).collect();
                bundle.faces = Matrix::new(1, spec.d_face, face)?;
                Ok((name, PreparedExample { id: format!("face-{seed}-{i:04}"), caption_ids: self.caption(name), bundle }))
            })
            .collect()
    }
}

/// The same examples with every face embedding replaced by zeros.
pub fn zero_faces(data: &[PreparedExample]) -> Vec<PreparedExample> {
    data.iter()
        .map(|ex| {
            let mut ex = ex.clone();
            ex.bundle.faces = Matrix::zeros(ex.bundle.faces.rows, ex.bundle.faces.cols);
            ex
        })
        .collect()
}
