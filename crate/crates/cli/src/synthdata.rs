//! A tiny synthetic corpus: pseudo-word articles mentioning a person and a
//! place, captions naming both, random context embeddings, a BPE vocabulary
//! trained on the text, and a config sized for it.

use std::path::PathBuf;

use anyhow::Context as _;
use clap::Args;
use newscap::bpe::train_merges;
use newscap::context::{save_context, synth_context, ContextSpec};
use newscap::dataset::{write_jsonl, Entity, EntityLabel, NewsExample, Split};
use newscap::decoder::DecoderConfig;
use newscap::model::ModelConfig;
use newscap::trainer::TrainConfig;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Paths, RunConfig};
use crate::Invalid;

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Training examples.
    #[arg(long, default_value_t = 8)]
    examples: usize,
    /// Test examples.
    #[arg(long, default_value_t = 2)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// BPE vocabulary size.
    #[arg(long, default_value_t = 300)]
    vocab_size: usize,
    /// `train.total_steps` in the written config.
    #[arg(long, default_value_t = 300)]
    steps: usize,
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables).map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap())).collect()
}

fn capitalized(w: &str) -> String {
    let mut c = w.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

pub fn toy_context_spec() -> ContextSpec {
    ContextSpec { d_image: 8, m_image: 4, d_face: 8, max_faces: 1, d_object: 8, max_objects: 2, d_article: 8, n_layers: 2, ..Default::default() }
}

pub fn toy_config(vocab_size: usize, steps: usize, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        model: ModelConfig {
            context: toy_context_spec(),
            decoder: DecoderConfig { d_model: 32, n_heads: 2, n_blocks: 2, kernel_sizes: vec![3, 3], max_positions: 64, ffn_dim: 64, ..Default::default() },
            vocab_size,
            clusters: None,
        },
        train: TrainConfig { peak_lr: 3e-3, batch_size: 8, total_steps: steps, seed, ..Default::default() },
        generate: newscap::generation::GenConfig { max_len: 40, ..Default::default() },
        paths: Paths { vocab: Some("vocab.bpe".into()), manifest: None },
        ..Default::default()
    }
}

pub fn run(a: SynthArgs) -> anyhow::Result<()> {
    if a.examples == 0 {
        return Err(Invalid("--examples must be at least 1".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let lexicon: Vec<String> = (0..40)
        .map(|_| {
            let n = rng.random_range(1..=3);
            pseudo_word(&mut rng, n)
        })
        .collect();
    let people: Vec<String> = (0..6).map(|_| format!("{} {}", capitalized(&pseudo_word(&mut rng, 2)), capitalized(&pseudo_word(&mut rng, 3)))).collect();
    let places: Vec<String> = (0..4).map(|_| capitalized(&pseudo_word(&mut rng, 3))).collect();

    let total = a.examples + a.test;
    let mut texts = Vec::with_capacity(total);
    for _ in 0..total {
        let person = people.choose(&mut rng).unwrap().clone();
        let place = places.choose(&mut rng).unwrap().clone();
        let mut sentences = Vec::new();
        for s in 0..rng.random_range(3..=5) {
            let mut words: Vec<String> = (0..rng.random_range(5..=9)).map(|_| lexicon.choose(&mut rng).unwrap().clone()).collect();
            if s == 0 {
                words.insert(0, person.clone());
            }
            if s == 1 {
                words.push(format!("in {place}"));
            }
            sentences.push(format!("{}.", words.join(" ")));
        }
        let article = sentences.join(" ");
        let caption = format!("{person} {} {} in {place}.", lexicon.choose(&mut rng).unwrap(), lexicon.choose(&mut rng).unwrap());
        texts.push((article, caption, person, place));
    }

    let corpus: Vec<&str> = texts.iter().flat_map(|(art, cap, _, _)| [art.as_str(), cap.as_str()]).collect();
    let vocab = train_merges(&corpus, a.vocab_size)?;
    std::fs::create_dir_all(a.out.join("ctx")).with_context(|| format!("creating {}", a.out.display()))?;
    vocab.save(&a.out.join("vocab.bpe"))?;

    let spec = toy_context_spec();
    let mut examples = Vec::with_capacity(total);
    for (i, (article, caption, person, place)) in texts.into_iter().enumerate() {
        let ids = vocab.encode(&article);
        let mut bundle = synth_context(a.seed.wrapping_mul(1_000_003).wrapping_add(i as u64), &spec, 1, 2, ids.len(), vocab.len())?;
        bundle.article_token_ids = ids;
        let rel = format!("ctx/{i:04}.ctx1");
        save_context(&a.out.join(&rel), &bundle)?;
        examples.push(NewsExample {
            id: format!("toy-{i:04}"),
            image_position: rng.random_range(0..bundle.article_token_ids.len() as i64),
            article_text: article,
            caption_text: caption,
            context_path: rel,
            entities: vec![Entity { surface: person, label: EntityLabel::Person }, Entity { surface: place, label: EntityLabel::Gpe }],
            split: if i < a.examples { Split::Train } else { Split::Test },
            timestamp: Some(1_600_000_000 + i as i64 * 3600),
        });
    }
    write_jsonl(&a.out.join("data.jsonl"), &examples)?;
    let config = toy_config(vocab.len(), a.steps, a.seed);
    std::fs::write(a.out.join("config.json"), format!("{}\n", serde_json::to_string_pretty(&config)?))?;
    println!("examples {total} vocab_size {} dir {}", vocab.len(), a.out.display());
    Ok(())
}
