//! Caption metrics: corpus BLEU-1..4, CIDEr-D, entity precision/recall
//! (all, people, rare), type-token ratio and Flesch reading ease.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{EntityLabel, NewsExample, Split};
use crate::error::{Error, Result};
use crate::generation::Prediction;
use crate::par;

/// Lowercase, split on whitespace, and trim non-alphanumeric characters
/// from both ends of each word; words that become empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut c = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *c.entry(g).or_insert(0) += 1;
        }
    }
    c
}

/// Per-order clipped matches and candidate n-gram totals, plus lengths.
#[derive(Debug, Clone, Default, PartialEq)]
struct BleuStats {
    matches: Vec<usize>,
    totals: Vec<usize>,
    cand_len: usize,
    ref_len: usize,
}

fn bleu_stats(candidate: &[String], references: &[Vec<String>], max_n: usize) -> BleuStats {
    let mut s = BleuStats { matches: vec![0; max_n], totals: vec![0; max_n], cand_len: candidate.len(), ref_len: 0 };
    // closest reference length; ties go to the shorter reference
    s.ref_len = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(candidate.len()), r))
        .unwrap_or(0);
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: Counts = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        s.matches[n - 1] = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        s.totals[n - 1] = candidate.len().saturating_sub(n - 1);
    }
    s
}

fn bleu_from_stats(s: &BleuStats, n: usize) -> f64 {
    if s.cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        if s.matches[k] == 0 {
            return 0.0;
        }
        log_sum += (s.matches[k] as f64 / s.totals[k] as f64).ln();
    }
    let bp = if s.cand_len > s.ref_len { 1.0 } else { (1.0 - s.ref_len as f64 / s.cand_len as f64).exp() };
    bp * (log_sum / n as f64).exp()
}

/// Sentence BLEU with uniform weights up to `max_n`, no smoothing.
pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> f64 {
    bleu_from_stats(&bleu_stats(candidate, references, max_n), max_n)
}

/// Corpus BLEU-1..`max_n`: n-gram matches, totals and lengths are pooled
/// over the corpus before the geometric mean and brevity penalty.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], max_n: usize) -> Vec<f64> {
    let mut total = BleuStats { matches: vec![0; max_n], totals: vec![0; max_n], cand_len: 0, ref_len: 0 };
    for (cand, refs) in pairs {
        let s = bleu_stats(cand, refs, max_n);
        for k in 0..max_n {
            total.matches[k] += s.matches[k];
            total.totals[k] += s.totals[k];
        }
        total.cand_len += s.cand_len;
        total.ref_len += s.ref_len;
    }
    (1..=max_n).map(|n| bleu_from_stats(&total, n)).collect()
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

/// Tf-idf vector of one caption: per order, n-gram → weight. Ordered maps
/// keep the floating-point sums reproducible.
struct TfIdf {
    vecs: Vec<BTreeMap<Vec<String>, f64>>,
    norms: Vec<f64>,
    len: usize,
}

/// CIDEr-D with document frequencies taken over the reference sets.
pub struct Cider {
    refs: Vec<Vec<Vec<String>>>,
    df: HashMap<Vec<String>, usize>,
    log_n: f64,
}

impl Cider {
    pub fn new(refs: Vec<Vec<Vec<String>>>) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::Domain("CIDEr needs a non-empty corpus".into()));
        }
        let mut df = HashMap::new();
        for set in &refs {
            let mut seen = HashSet::new();
            for r in set {
                for n in 1..=CIDER_N {
                    for g in ngram_counts(r, n).into_keys() {
                        seen.insert(g.to_vec());
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Ok(Cider { log_n: (refs.len() as f64).ln(), refs, df })
    }

    fn vector(&self, tokens: &[String]) -> TfIdf {
        let mut vecs = Vec::with_capacity(CIDER_N);
        let mut norms = Vec::with_capacity(CIDER_N);
        for n in 1..=CIDER_N {
            let v: BTreeMap<Vec<String>, f64> = ngram_counts(tokens, n)
                .into_iter()
                .map(|(g, c)| {
                    let df = self.df.get(g).copied().unwrap_or(0).max(1) as f64;
                    (g.to_vec(), c as f64 * (self.log_n - df.ln()))
                })
                .collect();
            norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
            vecs.push(v);
        }
        TfIdf { vecs, norms, len: tokens.len() }
    }

    fn similarity(hyp: &TfIdf, r: &TfIdf) -> f64 {
        let delta = hyp.len as f64 - r.len as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut total = 0.0;
        for n in 0..CIDER_N {
            if hyp.norms[n] == 0.0 || r.norms[n] == 0.0 {
                continue;
            }
            let dot: f64 = hyp.vecs[n].iter().map(|(g, &h)| r.vecs[n].get(g).map_or(0.0, |&rv| h.min(rv) * rv)).sum();
            total += dot / (hyp.norms[n] * r.norms[n]) * penalty;
        }
        total / CIDER_N as f64
    }

    /// Score of candidate `i` against reference set `i`, in [0, 10].
    pub fn score(&self, i: usize, candidate: &[String]) -> f64 {
        let hyp = self.vector(candidate);
        let set = &self.refs[i];
        let sum: f64 = set.iter().map(|r| Self::similarity(&hyp, &self.vector(r))).sum();
        10.0 * sum / set.len() as f64
    }

    pub fn score_all(&self, candidates: &[Vec<String>]) -> Vec<f64> {
        par::map_indexed(candidates, |i, c| self.score(i, c))
    }

    pub fn score_all_seq(&self, candidates: &[Vec<String>]) -> Vec<f64> {
        par::map_indexed_seq(candidates, |i, c| self.score(i, c))
    }
}

/// Corpus CIDEr-D: the mean per-example score.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Domain(format!("{} candidates for {} reference sets", candidates.len(), references.len())));
    }
    let c = Cider::new(references.to_vec())?;
    let scores = c.score_all(candidates);
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// `(|gen ∩ ref| / |gen|, |gen ∩ ref| / |ref|)`, each 0 when its denominator is.
pub fn entity_prf(generated: &BTreeSet<String>, reference: &BTreeSet<String>) -> (f64, f64) {
    let hit = generated.intersection(reference).count() as f64;
    let ratio = |d: usize| if d == 0 { 0.0 } else { hit / d as f64 };
    (ratio(generated.len()), ratio(reference.len()))
}

/// Pooled counts for micro-averaged precision and recall.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PrCounts {
    pub hits: usize,
    pub generated: usize,
    pub reference: usize,
}

impl PrCounts {
    pub fn add(&mut self, generated: &BTreeSet<String>, reference: &BTreeSet<String>) {
        self.hits += generated.intersection(reference).count();
        self.generated += generated.len();
        self.reference += reference.len();
    }

    pub fn precision(&self) -> f64 {
        if self.generated == 0 { 0.0 } else { self.hits as f64 / self.generated as f64 }
    }

    pub fn recall(&self) -> f64 {
        if self.reference == 0 { 0.0 } else { self.hits as f64 / self.reference as f64 }
    }
}

/// True when `needle` occurs in `text` with no alphanumeric character
/// directly before or after it.
pub fn contains_entity(text: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    text.match_indices(needle).any(|(i, m)| {
        let before = text[..i].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after = text[i + m.len()..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        before && after
    })
}

/// Entity surfaces with their labels, used to pull entities out of
/// generated text by exact match.
#[derive(Debug, Clone, Default)]
pub struct Gazetteer {
    labels: HashMap<String, BTreeSet<EntityLabel>>,
}

impl Gazetteer {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a NewsExample>) -> Self {
        let mut g = Gazetteer::default();
        for ex in examples {
            for e in &ex.entities {
                g.labels.entry(e.surface.clone()).or_default().insert(e.label);
            }
        }
        g
    }

    /// Surfaces found in `text`, each with every label it carries.
    pub fn extract(&self, text: &str) -> Vec<(&str, &BTreeSet<EntityLabel>)> {
        let mut found: Vec<_> = self.labels.iter().filter(|(s, _)| contains_entity(text, s)).map(|(s, l)| (s.as_str(), l)).collect();
        found.sort();
        found
    }
}

/// Training captions, for deciding whether a proper noun is new.
#[derive(Debug, Clone, Default)]
pub struct RareIndex {
    train_captions: Vec<String>,
}

impl RareIndex {
    pub fn new(train_captions: Vec<String>) -> Self {
        RareIndex { train_captions }
    }

    /// A proper noun (any label but DATE) that no training caption contains.
    pub fn is_rare(&self, surface: &str, label: EntityLabel) -> bool {
        label != EntityLabel::Date && !self.train_captions.iter().any(|c| contains_entity(c, surface))
    }
}

pub fn ttr(caption: &str) -> Result<f64> {
    let words: Vec<String> = caption.split_whitespace().map(str::to_lowercase).collect();
    if words.is_empty() {
        return Err(Error::Domain("type-token ratio of an empty caption".into()));
    }
    let unique: HashSet<&String> = words.iter().collect();
    Ok(unique.len() as f64 / words.len() as f64)
}

/// Vowel groups (a, e, i, o, u, y), less a silent final "e" unless the word
/// ends in "le"; at least one.
pub fn syllables(word: &str) -> usize {
    let w: Vec<char> = word.chars().filter(|c| c.is_alphabetic()).flat_map(char::to_lowercase).collect();
    let vowel = |c: char| "aeiouy".contains(c);
    let mut groups = 0usize;
    let mut prev = false;
    for &c in &w {
        let v = vowel(c);
        if v && !prev {
            groups += 1;
        }
        prev = v;
    }
    let n = w.len();
    if n >= 2 && w[n - 1] == 'e' && w[n - 2] != 'l' {
        groups = groups.saturating_sub(1);
    }
    groups.max(1)
}

/// Products are taken before the divisions, which keeps short decimal
/// results such as 69.785 exact.
pub fn fre_from_counts(words: usize, sentences: usize, syllables: usize) -> f64 {
    let (w, s, b) = (words as f64, sentences as f64, syllables as f64);
    206.835 - 1.015 * w / s - 84.6 * b / w
}

pub fn sentence_count(text: &str) -> usize {
    text.split(['.', '!', '?']).filter(|s| !s.trim().is_empty()).count()
}

pub fn fre(caption: &str) -> Result<f64> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    let sentences = sentence_count(caption);
    if words.is_empty() || sentences == 0 {
        return Err(Error::Domain("reading ease of an empty caption".into()));
    }
    let b = words.iter().map(|w| syllables(w)).sum();
    Ok(fre_from_counts(words.len(), sentences, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub entity_p: f64,
    pub entity_r: f64,
    pub person_p: f64,
    pub person_r: f64,
    pub rare_p: f64,
    pub rare_r: f64,
    pub mean_len: f64,
    pub mean_ttr: f64,
    pub mean_fre: f64,
}

/// Scores predictions against their examples' captions. Training-split
/// captions of `dataset` define which proper nouns are rare; the entities of
/// the evaluated examples form the gazetteer. TTR and FRE are averaged over
/// non-empty captions only.
pub fn evaluate_run(predictions: &[Prediction], dataset: &[NewsExample]) -> Result<Report> {
    let by_id: HashMap<&str, &NewsExample> = dataset.iter().map(|e| (e.id.as_str(), e)).collect();
    let examples: Vec<&NewsExample> = predictions
        .iter()
        .map(|p| by_id.get(p.example_id.as_str()).copied().ok_or_else(|| Error::Domain(format!("prediction for unknown example id {:?}", p.example_id))))
        .collect::<Result<_>>()?;
    if examples.is_empty() {
        return Err(Error::Domain("no predictions to evaluate".into()));
    }
    let gazetteer = Gazetteer::from_examples(examples.iter().copied());
    let rare = RareIndex::new(dataset.iter().filter(|e| e.split == Split::Train).map(|e| e.caption_text.clone()).collect());

    let cands: Vec<Vec<String>> = predictions.iter().map(|p| tokenize(&p.caption)).collect();
    let refs: Vec<Vec<Vec<String>>> = examples.iter().map(|e| vec![tokenize(&e.caption_text)]).collect();
    let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = cands.iter().cloned().zip(refs.iter().cloned()).collect();
    let b = corpus_bleu(&pairs, 4);
    let cider = cider(&cands, &refs)?;

    let (mut all, mut person, mut rare_c) = (PrCounts::default(), PrCounts::default(), PrCounts::default());
    for (p, ex) in predictions.iter().zip(&examples) {
        let found = gazetteer.extract(&p.caption);
        let pick = |keep: &dyn Fn(&str, EntityLabel) -> bool| -> (BTreeSet<String>, BTreeSet<String>) {
            let gen = found.iter().filter(|(s, ls)| ls.iter().any(|&l| keep(s, l))).map(|(s, _)| s.to_string()).collect();
            let refs = ex.entities.iter().filter(|e| keep(&e.surface, e.label)).map(|e| e.surface.clone()).collect();
            (gen, refs)
        };
        let (g, r) = pick(&|_, _| true);
        all.add(&g, &r);
        let (g, r) = pick(&|_, l| l == EntityLabel::Person);
        person.add(&g, &r);
        let (g, r) = pick(&|s, l| rare.is_rare(s, l));
        rare_c.add(&g, &r);
    }

    let n = predictions.len() as f64;
    let mean_len = cands.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mean_over = |f: fn(&str) -> Result<f64>| -> f64 {
        let vals: Vec<f64> = predictions.iter().filter_map(|p| f(&p.caption).ok()).collect();
        if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 }
    };
    Ok(Report {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        cider,
        entity_p: all.precision(),
        entity_r: all.recall(),
        person_p: person.precision(),
        person_r: person.recall(),
        rare_p: rare_c.precision(),
        rare_r: rare_c.recall(),
        mean_len,
        mean_ttr: mean_over(ttr),
        mean_fre: mean_over(fre),
    })
}
