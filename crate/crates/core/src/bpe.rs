//! Byte-pair encoding: greedy merge training plus an encoder/decoder total
//! over arbitrary Unicode text.
//!
//! Text is split into words, each a maximal whitespace run followed by a
//! maximal non-whitespace run, so the whitespace travels as a prefix of the
//! word it precedes. Merges never cross word boundaries. Token ids `0..=2`
//! are PAD, BOS and EOS; the remaining ids are assigned in descending corpus
//! frequency so that low ids are frequent tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const N_SPECIAL: usize = 3;
/// Specials plus the 256 single bytes.
pub const BASE_VOCAB: usize = N_SPECIAL + 256;
/// Toy default; the reference vocabulary has 50K entries.
pub const DEFAULT_VOCAB_SIZE: usize = 1000;
pub const MIN_PAIR_COUNT: usize = 2;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("bpe domain error: {0}")]
    Domain(String),
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("vocab file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeRule {
    pub left: Vec<u8>,
    pub right: Vec<u8>,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<MergeRule>,
    /// Indexed by id; entries `0..N_SPECIAL` are empty placeholders.
    id_to_token: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    /// `(left id, right id) → (rank, merged id)`
    merge_lookup: HashMap<(u32, u32), (usize, u32)>,
}

/// Splits text into words: `whitespace* non-whitespace*`, never empty.
/// Concatenating the pieces gives back the input.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws: Option<bool> = None;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && prev_ws == Some(false) {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = Some(ws);
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Merges every non-overlapping occurrence of `(a, b)` left to right.
fn merge_pair(word: &[u32], a: u32, b: u32, merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
            out.push(merged);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    out
}

/// Trains merges greedily: the most frequent adjacent pair wins, ties go to
/// the lexicographically smallest `(left bytes, right bytes)`. Stops at
/// `target_vocab_size` or when no pair occurs at least twice.
pub fn train_merges<S: AsRef<str>>(corpus: &[S], target_vocab_size: usize) -> Result<BpeVocab, BpeError> {
    if corpus.is_empty() {
        return Err(BpeError::Domain("empty corpus".into()));
    }
    if target_vocab_size < BASE_VOCAB {
        return Err(BpeError::Domain(format!(
            "target vocab size {target_vocab_size} below the {BASE_VOCAB}-entry base vocabulary"
        )));
    }

    let mut word_counts: HashMap<&[u8], usize> = HashMap::new();
    for text in corpus {
        for w in split_words(text.as_ref()) {
            *word_counts.entry(w.as_bytes()).or_default() += 1;
        }
    }
    // sorted for deterministic iteration
    let mut words: Vec<(Vec<u32>, usize)> = {
        let mut v: Vec<_> = word_counts.into_iter().collect();
        v.sort();
        v.into_iter().map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c)).collect()
    };

    // scratch ids: 0..256 bytes, then merges in creation order
    let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut known: HashMap<Vec<u8>, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    let mut merges = Vec::new();

    while BASE_VOCAB + merges.len() < target_vocab_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += c;
            }
        }
        let mut best: Option<((u32, u32), usize)> = None;
        for (&(a, b), &c) in &counts {
            if c < MIN_PAIR_COUNT {
                continue;
            }
            let mut joined = tokens[a as usize].clone();
            joined.extend_from_slice(&tokens[b as usize]);
            if known.contains_key(&joined) {
                // another merge order already produced these bytes
                continue;
            }
            let better = match best {
                None => true,
                Some(((ba, bb), bc)) => {
                    c > bc || (c == bc && (&tokens[a as usize], &tokens[b as usize]) < (&tokens[ba as usize], &tokens[bb as usize]))
                }
            };
            if better {
                best = Some(((a, b), c));
            }
        }
        let Some(((a, b), _)) = best else { break };
        let mut joined = tokens[a as usize].clone();
        joined.extend_from_slice(&tokens[b as usize]);
        let new_id = tokens.len() as u32;
        known.insert(joined.clone(), new_id);
        tokens.push(joined);
        merges.push(MergeRule { left: tokens[a as usize].clone(), right: tokens[b as usize].clone(), rank: merges.len() });
        for (w, _) in &mut words {
            if w.len() >= 2 {
                *w = merge_pair(w, a, b, new_id);
            }
        }
    }

    let mut freq = vec![0usize; tokens.len()];
    for (w, c) in &words {
        for &t in w {
            freq[t as usize] += c;
        }
    }
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by(|&x, &y| freq[y].cmp(&freq[x]).then_with(|| tokens[x].cmp(&tokens[y])));
    let id_order: Vec<Vec<u8>> = order.into_iter().map(|i| tokens[i].clone()).collect();
    BpeVocab::from_parts(merges, Some(id_order))
}

impl BpeVocab {
    /// Rebuilds a vocabulary from merges and an optional id ordering of all
    /// non-special tokens. Without an ordering, bytes take ids `3..259` by
    /// byte value and merged tokens follow in rank order.
    pub fn from_parts(merges: Vec<MergeRule>, id_order: Option<Vec<Vec<u8>>>) -> Result<Self, BpeError> {
        let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut seen: HashMap<Vec<u8>, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
        for (i, m) in merges.iter().enumerate() {
            if m.rank != i {
                return Err(BpeError::Domain(format!("merge ranks not contiguous at {i}")));
            }
            if !seen.contains_key(&m.left) || !seen.contains_key(&m.right) {
                return Err(BpeError::Domain(format!("merge {i} uses a token not yet defined")));
            }
            let mut joined = m.left.clone();
            joined.extend_from_slice(&m.right);
            if seen.insert(joined.clone(), ()).is_some() {
                return Err(BpeError::Domain(format!("merge {i} duplicates an existing token")));
            }
            tokens.push(joined);
        }
        let ordered = match id_order {
            Some(order) => {
                if order.len() != tokens.len() {
                    return Err(BpeError::Domain(format!(
                        "id table has {} tokens, merges define {}",
                        order.len(),
                        tokens.len()
                    )));
                }
                order
            }
            None => tokens,
        };
        let mut id_to_token: Vec<Vec<u8>> = vec![Vec::new(); N_SPECIAL];
        let mut token_to_id = HashMap::with_capacity(ordered.len());
        for t in ordered {
            if !seen.contains_key(&t) {
                return Err(BpeError::Domain("id table names a token the merges never build".into()));
            }
            let id = id_to_token.len() as u32;
            if token_to_id.insert(t.clone(), id).is_some() {
                return Err(BpeError::Domain("id table repeats a token".into()));
            }
            id_to_token.push(t);
        }
        let mut merge_lookup = HashMap::with_capacity(merges.len());
        for m in &merges {
            let mut joined = m.left.clone();
            joined.extend_from_slice(&m.right);
            merge_lookup.insert((token_to_id[&m.left], token_to_id[&m.right]), (m.rank, token_to_id[&joined]));
        }
        Ok(BpeVocab { merges, id_to_token, token_to_id, merge_lookup })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[MergeRule] {
        &self.merges
    }

    /// Bytes of a non-special token.
    pub fn token(&self, id: u32) -> Option<&[u8]> {
        if (id as usize) < N_SPECIAL {
            return None;
        }
        self.id_to_token.get(id as usize).map(Vec::as_slice)
    }

    pub fn id(&self, token: &[u8]) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < N_SPECIAL
    }

    fn encode_word(&self, word: &[u8], out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = word.iter().map(|b| self.token_to_id[std::slice::from_ref(b)]).collect();
        let mut floor: Option<usize> = None;
        loop {
            let mut best: Option<(usize, u32, u32, u32)> = None;
            for p in ids.windows(2) {
                if let Some(&(rank, merged)) = self.merge_lookup.get(&(p[0], p[1])) {
                    if floor.is_some_and(|f| rank <= f) {
                        continue;
                    }
                    if best.is_none_or(|b| rank < b.0) {
                        best = Some((rank, p[0], p[1], merged));
                    }
                }
            }
            let Some((rank, a, b, merged)) = best else { break };
            ids = merge_pair(&ids, a, b, merged);
            floor = Some(rank);
        }
        out.extend(ids);
    }

    /// Applies merges in rank order within each word. Total over valid text.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in split_words(text) {
            self.encode_word(w.as_bytes(), &mut out);
        }
        out
    }

    /// Concatenates token bytes, skipping specials; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String, BpeError> {
        let mut bytes = Vec::new();
        for &id in ids {
            if (id as usize) >= self.id_to_token.len() {
                return Err(BpeError::UnknownId(id));
            }
            if !Self::is_special(id) {
                bytes.extend_from_slice(&self.id_to_token[id as usize]);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// `BPE1 <n_merges>` header, one escaped merge per line, then an `IDS`
    /// section listing every non-special token in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        writeln!(s, "BPE1 {}", self.merges.len()).unwrap();
        for m in &self.merges {
            writeln!(s, "{} {}", escape(&m.left), escape(&m.right)).unwrap();
        }
        writeln!(s, "IDS {}", self.id_to_token.len() - N_SPECIAL).unwrap();
        for t in &self.id_to_token[N_SPECIAL..] {
            writeln!(s, "{}", escape(t)).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, BpeError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (ln, header) = lines.next().ok_or(BpeError::Parse { line: 1, msg: "empty file".into() })?;
        let n: usize = header
            .strip_prefix("BPE1 ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or(BpeError::Parse { line: ln, msg: format!("bad header {header:?}") })?;
        let mut merges = Vec::with_capacity(n);
        for rank in 0..n {
            let (ln, line) = lines.next().ok_or(BpeError::Parse { line: rank + 2, msg: "missing merge line".into() })?;
            let mut parts = line.split(' ');
            let (Some(l), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(BpeError::Parse { line: ln, msg: "expected two tokens".into() });
            };
            let left = unescape(l).map_err(|msg| BpeError::Parse { line: ln, msg })?;
            let right = unescape(r).map_err(|msg| BpeError::Parse { line: ln, msg })?;
            merges.push(MergeRule { left, right, rank });
        }
        let id_order = match lines.next() {
            None => None,
            Some((ln, line)) => {
                let count: usize = line
                    .strip_prefix("IDS ")
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or(BpeError::Parse { line: ln, msg: format!("bad id header {line:?}") })?;
                let mut order = Vec::with_capacity(count);
                for _ in 0..count {
                    let (ln, line) = lines.next().ok_or(BpeError::Parse { line: ln, msg: "truncated id table".into() })?;
                    order.push(unescape(line).map_err(|msg| BpeError::Parse { line: ln, msg })?);
                }
                Some(order)
            }
        };
        BpeVocab::from_parts(merges, id_order)
    }

    pub fn save(&self, path: &Path) -> Result<(), BpeError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BpeError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Printable ASCII other than space and backslash is written as-is;
/// everything else as `\xHH`.
pub fn escape(token: &[u8]) -> String {
    let mut s = String::with_capacity(token.len());
    for &b in token {
        match b {
            b'\\' => s.push_str("\\\\"),
            0x21..=0x7e => s.push(b as char),
            _ => write!(s, "\\x{b:02x}").unwrap(),
        }
    }
    s
}

pub fn unescape(s: &str) -> Result<Vec<u8>, String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            match bytes.get(i + 1) {
                Some(b'\\') => {
                    out.push(b'\\');
                    i += 2;
                }
                Some(b'x') if i + 4 <= bytes.len() => {
                    let hex = std::str::from_utf8(&bytes[i + 2..i + 4]).map_err(|e| e.to_string())?;
                    out.push(u8::from_str_radix(hex, 16).map_err(|e| format!("bad escape {hex:?}: {e}"))?);
                    i += 4;
                }
                _ => return Err(format!("dangling escape in {s:?}")),
            }
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        return Err("empty token".into());
    }
    Ok(out)
}
