//! Brute-force metric oracles (plain lists and linear scans, no maps) and a
//! hand-counted entity fixture.

use newscap::dataset::{Entity, EntityLabel, NewsExample, Split};
use newscap::generation::Prediction;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use EntityLabel::*;

pub fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

pub fn occurrences(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn oracle_corpus_bleu(corpus: &[(Vec<String>, Vec<Vec<String>>)], n_max: usize) -> Vec<f64> {
    let mut c_len = 0usize;
    let mut r_len = 0usize;
    let mut hits = vec![0usize; n_max];
    let mut tot = vec![0usize; n_max];
    for (cand, refs) in corpus {
        c_len += cand.len();
        let mut best = refs[0].len();
        for r in refs {
            let (d, db) = (r.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if d < db || (d == db && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best;
        for n in 1..=n_max {
            let cg = grams(cand, n);
            tot[n - 1] += cg.len();
            for g in distinct(&cg) {
                let max_ref = refs.iter().map(|r| occurrences(&grams(r, n), &g)).max().unwrap();
                hits[n - 1] += occurrences(&cg, &g).min(max_ref);
            }
        }
    }
    (1..=n_max)
        .map(|n| {
            if c_len == 0 || hits[..n].contains(&0) {
                return 0.0;
            }
            let prod: f64 = (0..n).map(|k| hits[k] as f64 / tot[k] as f64).product();
            let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
            bp * prod.powf(1.0 / n as f64)
        })
        .collect()
}

pub fn oracle_cider(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Vec<f64> {
    let n_docs = refs.len() as f64;
    let df = |g: &[String], n: usize| -> f64 {
        let c = refs.iter().filter(|set| set.iter().any(|r| occurrences(&grams(r, n), g) > 0)).count();
        (c.max(1)) as f64
    };
    let weights = |t: &[String], n: usize| -> Vec<(Vec<String>, f64)> {
        let gs = grams(t, n);
        distinct(&gs).into_iter().map(|g| {
            let w = occurrences(&gs, &g) as f64 * (n_docs.ln() - df(&g, n).ln());
            (g, w)
        }).collect()
    };
    let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    cands
        .iter()
        .zip(refs)
        .map(|(c, set)| {
            let mut acc = 0.0;
            for r in set {
                let mut per_n = 0.0;
                for n in 1..=4 {
                    let (vc, vr) = (weights(c, n), weights(r, n));
                    let (nc, nr) = (norm(&vc), norm(&vr));
                    if nc == 0.0 || nr == 0.0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for (g, wc) in &vc {
                        if let Some((_, wr)) = vr.iter().find(|(h, _)| h == g) {
                            dot += wc.min(*wr) * wr;
                        }
                    }
                    let delta = c.len() as f64 - r.len() as f64;
                    per_n += dot / (nc * nr) * (-delta * delta / 72.0).exp();
                }
                acc += per_n / 4.0;
            }
            10.0 * acc / set.len() as f64
        })
        .collect()
}

pub fn random_corpus(rng: &mut ChaCha8Rng, min_examples: usize) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    let words = ["a", "b", "c", "d", "e", "f", "g"];
    let sentence = |rng: &mut ChaCha8Rng, min: usize| -> Vec<String> {
        let n = rng.random_range(min..=20);
        (0..n).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
    };
    let n = rng.random_range(min_examples..=10);
    let cands = (0..n).map(|_| sentence(rng, 0)).collect();
    let refs = (0..n).map(|_| (0..rng.random_range(1..=3)).map(|_| sentence(rng, 1)).collect()).collect();
    (cands, refs)
}

pub fn example(id: &str, caption: &str, entities: &[(&str, EntityLabel)], split: Split) -> NewsExample {
    NewsExample {
        id: id.into(),
        article_text: "article body".into(),
        caption_text: caption.into(),
        image_position: -1,
        context_path: format!("{id}.ctx"),
        entities: entities.iter().map(|(s, l)| Entity { surface: s.to_string(), label: *l }).collect(),
        split,
        timestamp: None,
    }
}

pub fn pred(id: &str, caption: &str) -> Prediction {
    Prediction { example_id: id.into(), caption: caption.into(), token_ids: vec![2], logprob: 0.0 }
}


/// Ten test captions plus three training captions that mention some of
/// the same names.
pub fn fixture() -> Vec<NewsExample> {
    vec![
        example("tr1", "Morgan Lee speaks in Sydney.", &[("Morgan Lee", Person), ("Sydney", Gpe)], Split::Train),
        example("tr2", "The Senate met on Tuesday.", &[("Senate", Org), ("Tuesday", Date)], Split::Train),
        example("tr3", "Rain over Paris.", &[("Paris", Gpe)], Split::Train),
        example("t0", "Morgan Lee waves in Paris.", &[("Morgan Lee", Person), ("Paris", Gpe)], Split::Test),
        example("t1", "Ada Obi at the Senate on Tuesday.", &[("Ada Obi", Person), ("Senate", Org), ("Tuesday", Date)], Split::Test),
        example("t2", "A crowd in Lagos.", &[("Lagos", Gpe)], Split::Test),
        example("t3", "Ken Ito and Ada Obi in Kyoto.", &[("Ken Ito", Person), ("Ada Obi", Person), ("Kyoto", Gpe)], Split::Test),
        example("t4", "The river at dawn.", &[], Split::Test),
        example("t5", "Acme Corp staff in Sydney.", &[("Acme Corp", Org), ("Sydney", Gpe)], Split::Test),
        example("t6", "Morgan Lee on Friday.", &[("Morgan Lee", Person), ("Friday", Date)], Split::Test),
        example("t7", "Zed Ray in Lagos.", &[("Zed Ray", Person), ("Lagos", Gpe)], Split::Test),
        example("t8", "Fans cheer Ken Ito.", &[("Ken Ito", Person)], Split::Test),
        example("t9", "Snow in Kyoto on Friday.", &[("Kyoto", Gpe), ("Friday", Date)], Split::Test),
    ]
}

pub fn fixture_predictions() -> Vec<Prediction> {
    vec![
        pred("t0", "Morgan Lee waves in Sydney."),
        pred("t1", "Ada Obi at the Senate."),
        pred("t2", "A crowd in Kyoto."),
        pred("t3", "Ken Ito in Kyoto."),
        pred("t4", "The river at night, Morgan Lee."),
        pred("t5", "Staff in Sydney."),
        pred("t6", "Morgan Lee on Friday."),
        pred("t7", ""),
        pred("t8", "Fans cheer Ken Ito and Zed Ray."),
        pred("t9", "Snow in Lagos on Friday."),
    ]
}


/// Alphanumeric runs of `text`, case kept.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_string).collect()
}

/// Whole-word containment: the words of `surface` appear contiguously.
pub fn mentions(text: &str, surface: &str) -> bool {
    let (t, s) = (words(text), words(surface));
    !s.is_empty() && t.len() >= s.len() && (0..=t.len() - s.len()).any(|i| t[i..i + s.len()] == s[..])
}

/// Micro-averaged (hits, generated, reference) counts for all entities,
/// PERSON entities and rare entities, from plain vectors and linear scans.
pub fn entity_counts(preds: &[Prediction], data: &[NewsExample]) -> [(usize, usize, usize); 3] {
    let evaluated: Vec<&NewsExample> = preds.iter().map(|p| data.iter().find(|e| e.id == p.example_id).unwrap()).collect();
    let mut lexicon: Vec<(String, EntityLabel)> = Vec::new();
    for e in evaluated.iter().flat_map(|ex| &ex.entities) {
        if !lexicon.iter().any(|(s, l)| *s == e.surface && *l == e.label) {
            lexicon.push((e.surface.clone(), e.label));
        }
    }
    let train: Vec<&str> = data.iter().filter(|e| e.split == Split::Train).map(|e| e.caption_text.as_str()).collect();
    let rare = |s: &str, l: EntityLabel| l != Date && !train.iter().any(|c| mentions(c, s));
    let keeps: [&dyn Fn(&str, EntityLabel) -> bool; 3] = [&|_, _| true, &|_, l| l == Person, &rare];
    let mut out = [(0, 0, 0); 3];
    for (p, ex) in preds.iter().zip(&evaluated) {
        for (k, keep) in keeps.iter().enumerate() {
            let mut gen: Vec<&str> = lexicon.iter().filter(|(s, l)| keep(s, *l) && mentions(&p.caption, s)).map(|(s, _)| s.as_str()).collect();
            gen.sort();
            gen.dedup();
            let mut refs: Vec<&str> = ex.entities.iter().filter(|e| keep(&e.surface, e.label)).map(|e| e.surface.as_str()).collect();
            refs.sort();
            refs.dedup();
            out[k].0 += gen.iter().filter(|s| refs.contains(s)).count();
            out[k].1 += gen.len();
            out[k].2 += refs.len();
        }
    }
    out
}

pub fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 { 0.0 } else { num as f64 / den as f64 }
}

/// A random dataset over a small name pool plus predictions that mix
/// correct, wrong and extra names.
pub fn random_entity_fixture(rng: &mut ChaCha8Rng) -> (Vec<NewsExample>, Vec<Prediction>) {
    const POOL: [(&str, EntityLabel); 10] = [
        ("Ada Obi", Person), ("Ken Ito", Person), ("Zed Ray", Person), ("Morgan Lee", Person), ("Lagos", Gpe),
        ("Kyoto", Gpe), ("Sydney", Gpe), ("Senate", Org), ("Acme Corp", Org), ("Friday", Date),
    ];
    // up to `max` distinct pool entries
    let pick = |rng: &mut ChaCha8Rng, max: usize| -> Vec<(&'static str, EntityLabel)> {
        let n = rng.random_range(0..max);
        let mut out: Vec<(&str, EntityLabel)> = Vec::new();
        while out.len() < n {
            let e = POOL[rng.random_range(0..POOL.len())];
            if !out.contains(&e) {
                out.push(e);
            }
        }
        out
    };
    let sentence = |names: &[(&str, EntityLabel)]| -> String {
        let body: Vec<&str> = names.iter().map(|(s, _)| *s).collect();
        format!("Seen here: {} today.", body.join(" and "))
    };
    let mut data = Vec::new();
    for i in 0..rng.random_range(0..4) {
        let names = pick(rng, 3);
        data.push(example(&format!("tr{i}"), &sentence(&names), &names, Split::Train));
    }
    let mut preds = Vec::new();
    for i in 0..rng.random_range(1..8) {
        let names = pick(rng, 4);
        let id = format!("t{i}");
        data.push(example(&id, &sentence(&names), &names, Split::Test));
        let guess = pick(rng, 4);
        preds.push(pred(&id, &sentence(&guess)));
    }
    (data, preds)
}
