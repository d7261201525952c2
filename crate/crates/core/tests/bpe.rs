use std::collections::HashMap;

use newscap::bpe::{self, split_words, train_merges, BpeVocab, BASE_VOCAB, BOS, EOS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force count of adjacent byte pairs within space-prefixed words.
fn first_pair_by_brute_force(corpus: &[&str]) -> (u8, u8) {
    let mut counts: HashMap<(u8, u8), usize> = HashMap::new();
    for text in corpus {
        let mut words: Vec<String> = Vec::new();
        for (i, w) in text.split(' ').enumerate() {
            words.push(if i == 0 { w.to_string() } else { format!(" {w}") });
        }
        for w in words {
            for p in w.as_bytes().windows(2) {
                *counts.entry((p[0], p[1])).or_default() += 1;
            }
        }
    }
    let max = *counts.values().max().unwrap();
    *counts.iter().filter(|(_, &c)| c == max).map(|(k, _)| k).min().unwrap()
}

fn sample_corpus() -> Vec<String> {
    let words = ["the", "minister", "speaks", "in", "parliament", "during", "a", "session", "on", "tuesday", "morning"];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..200)
        .map(|_| (0..8).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" "))
        .collect()
}

#[test]
fn first_merge_examples() {
    for corpus in [vec!["aaab aaab"], vec!["xy xy xy", "xz"]] {
        let v = train_merges(&corpus, 260).unwrap();
        let (l, r) = first_pair_by_brute_force(&corpus);
        assert_eq!(v.merges()[0].left, vec![l]);
        assert_eq!(v.merges()[0].right, vec![r]);
    }
    let v = train_merges(&["aaab aaab"], 260).unwrap();
    assert_eq!((v.merges()[0].left.as_slice(), v.merges()[0].right.as_slice()), (&b"a"[..], &b"a"[..]));
    let v = train_merges(&["xy xy xy", "xz"], 260).unwrap();
    assert_eq!((v.merges()[0].left.as_slice(), v.merges()[0].right.as_slice()), (&b"x"[..], &b"y"[..]));
}

#[test]
fn training_stops_when_pairs_run_out() {
    let v = train_merges(&["ab"], 1_000_000).unwrap();
    assert_eq!(v.merges().len(), 0);
    assert_eq!(v.len(), BASE_VOCAB);
}

#[test]
fn vocab_size_tracks_merges() {
    let corpus = sample_corpus();
    let v = train_merges(&corpus, 300).unwrap();
    assert_eq!(v.len(), BASE_VOCAB + v.merges().len());
    assert_eq!(v.len(), 300);
    for id in 3..v.len() as u32 {
        assert_eq!(v.id(v.token(id).unwrap()), Some(id));
    }
}

#[test]
fn training_is_deterministic() {
    let corpus = sample_corpus();
    let a = train_merges(&corpus, 320).unwrap().to_file_string();
    let b = train_merges(&corpus, 320).unwrap().to_file_string();
    assert_eq!(a, b);
}

#[test]
fn ids_follow_frequency() {
    let corpus = sample_corpus();
    let v = train_merges(&corpus, 300).unwrap();
    let mut freq = vec![0usize; v.len()];
    for text in &corpus {
        for id in v.encode(text) {
            freq[id as usize] += 1;
        }
    }
    for id in 4..v.len() {
        assert!(freq[id - 1] >= freq[id], "id {id} more frequent than {}", id - 1);
    }
}

#[test]
fn file_roundtrip_and_minimal_format() {
    let corpus = sample_corpus();
    let v = train_merges(&corpus, 290).unwrap();
    let back = BpeVocab::parse(&v.to_file_string()).unwrap();
    assert_eq!(back, v);

    // merges-only file: default id order, same segmentation
    let merges_only: String = v.to_file_string().lines().take(1 + v.merges().len()).map(|l| format!("{l}\n")).collect();
    let plain = BpeVocab::parse(&merges_only).unwrap();
    assert_eq!(plain.len(), v.len());
    let text = "the minister speaks";
    let seg = |voc: &BpeVocab| voc.encode(text).iter().map(|&i| voc.token(i).unwrap().to_vec()).collect::<Vec<_>>();
    assert_eq!(seg(&plain), seg(&v));

    assert!(BpeVocab::parse("BPE2 0\n").is_err());
    assert!(BpeVocab::parse("BPE1 1\n").is_err());
    assert!(BpeVocab::parse("BPE1 1\nab c\n").is_err());
}

#[test]
fn decode_examples() {
    let v = train_merges(&sample_corpus(), 280).unwrap();
    assert_eq!(v.decode(&[]).unwrap(), "");
    assert!(v.encode("").is_empty());
    let h = v.id(b"h").unwrap();
    let i = v.id(b"i").unwrap();
    assert_eq!(v.decode(&[BOS, h, i, EOS]).unwrap(), "hi");
    // lone continuation byte decodes with a replacement character
    let cont = v.id(&[0x80]).unwrap();
    assert_eq!(v.decode(&[cont]).unwrap(), "\u{fffd}");
}

#[test]
fn unseen_names_split_into_subwords() {
    let v = train_merges(&sample_corpus(), 400).unwrap();
    let ids = v.encode(" Varshini");
    assert!(ids.len() > 1);
    assert!(ids.iter().all(|&i| !BpeVocab::is_special(i)));
    assert_eq!(v.decode(&ids).unwrap(), " Varshini");
}

#[test]
fn fuzz_roundtrip_ten_thousand_strings() {
    let v = train_merges(&sample_corpus(), 400).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let len = rng.random_range(0..24);
        let s: String = (0..len)
            .map(|_| match rng.random_range(0..4) {
                0 => ' ',
                1 => (b'a' + rng.random_range(0..26)) as char,
                _ => rng.random::<char>(),
            })
            .collect();
        assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
    }
}

proptest! {
    #[test]
    fn roundtrip_any_text(s in "\\PC*") {
        let v = train_merges(&["the theme then there"], 270).unwrap();
        prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
    }

    #[test]
    fn encoding_is_per_word(s in "[a-e \\n]{0,40}") {
        let v = train_merges(&sample_corpus(), 300).unwrap();
        let joined: Vec<u32> = split_words(&s).iter().flat_map(|w| v.encode(w)).collect();
        prop_assert_eq!(v.encode(&s), joined);
    }
}

#[test]
fn escape_handles_space_and_backslash() {
    assert_eq!(bpe::escape(b" a\\"), "\\x20a\\\\");
}
