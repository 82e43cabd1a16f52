//! Character-level byte-pair encoding.
//!
//! Spaces are mapped to the marker `▁`, which always starts a new segment,
//! so merges never cross word boundaries and decoding is exact.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{EalmError, Result};

pub const SPACE_MARK: char = '▁';
pub const BOS: &str = "<s>";
pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const BOS_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_ID: usize = 2;
const NUM_SPECIAL: usize = 3;
const HEADER: &str = "#ealm-vocab v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    index: HashMap<String, usize>,
    merge_rank: HashMap<(usize, usize), (usize, usize)>,
}

fn segments(text: &str) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for ch in text.chars() {
        let sym = if ch == ' ' { SPACE_MARK } else { ch };
        if sym == SPACE_MARK || out.is_empty() {
            out.push(Vec::new());
        }
        out.last_mut().unwrap().push(sym.to_string());
    }
    out
}

/// Learns merges greedily by pair frequency until the symbol inventory reaches
/// `target_symbols` (specials excluded). Ties go to the lexicographically
/// smallest pair.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_symbols: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(EalmError::config("BPE corpus is empty"));
    }
    let mut word_counts: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    for line in corpus {
        if line.as_ref().contains(SPACE_MARK) {
            return Err(EalmError::config(format!(
                "corpus line contains the reserved marker {SPACE_MARK}"
            )));
        }
        for seg in segments(line.as_ref()) {
            *word_counts.entry(seg).or_default() += 1;
        }
    }
    let mut alphabet: Vec<String> = word_counts.keys().flatten().cloned().collect();
    alphabet.sort();
    alphabet.dedup();
    if target_symbols < alphabet.len() {
        return Err(EalmError::config(format!(
            "target vocabulary {} is smaller than the alphabet of {} characters",
            target_symbols,
            alphabet.len()
        )));
    }
    let mut symbols = alphabet.clone();
    let mut known: std::collections::HashSet<String> = symbols.iter().cloned().collect();
    let mut words: Vec<(Vec<String>, u64)> = word_counts.into_iter().collect();
    let mut merges = Vec::new();
    while symbols.len() < target_symbols {
        let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += c;
            }
        }
        let Some(best) = pairs
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|((l, r), _)| (l.to_string(), r.to_string()))
        else {
            break;
        };
        let joined = format!("{}{}", best.0, best.1);
        for (w, _) in words.iter_mut() {
            *w = merge_word(w, &best.0, &best.1, &joined);
        }
        if known.insert(joined.clone()) {
            symbols.push(joined);
        }
        merges.push(best);
    }
    let mut tokens: Vec<String> = vec![BOS.into(), UNK.into(), PAD.into()];
    tokens.extend(symbols);
    Vocabulary::from_parts(tokens, merges)
}

fn merge_word(w: &[String], l: &str, r: &str, joined: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
            out.push(joined.to_string());
            i += 2;
        } else {
            out.push(w[i].clone());
            i += 1;
        }
    }
    out
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL || tokens[BOS_ID] != BOS || tokens[UNK_ID] != UNK || tokens[PAD_ID] != PAD {
            return Err(EalmError::format("vocabulary must start with <s>, <unk>, <pad>"));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(EalmError::format(format!("duplicate token {t:?}")));
            }
        }
        let mut merge_rank = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                index
                    .get(s)
                    .copied()
                    .ok_or_else(|| EalmError::format(format!("merge refers to unknown token {s:?}")))
            };
            let joined = lookup(&format!("{l}{r}"))?;
            merge_rank
                .entry((lookup(l)?, lookup(r)?))
                .or_insert((rank, joined));
        }
        Ok(Vocabulary {
            tokens,
            merges,
            index,
            merge_rank,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn bos_id(&self) -> usize {
        BOS_ID
    }

    fn encode_segment(&self, seg: &[String], out: &mut Vec<usize>) {
        let mut ids: Vec<usize> = seg
            .iter()
            .map(|s| self.index.get(s).copied().unwrap_or(UNK_ID))
            .collect();
        loop {
            let best = ids
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.merge_rank.get(&(p[0], p[1])).map(|&(r, j)| (r, i, j)))
                .min();
            let Some((rank, _, joined)) = best else { break };
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len()
                    && self.merge_rank.get(&(ids[i], ids[i + 1])).map(|m| m.0) == Some(rank)
                {
                    next.push(joined);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            ids = next;
        }
        out.extend(ids);
    }

    /// Subword ids of `text`, without the sentence-start token.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for seg in segments(text) {
            self.encode_segment(&seg, &mut out);
        }
        out
    }

    /// Like [`encode`](Self::encode) but also returns, for every token, the
    /// character range of `text` it covers.
    pub fn encode_with_offsets(&self, text: &str) -> (Vec<usize>, Vec<(usize, usize)>) {
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        let mut pos = 0;
        for seg in segments(text) {
            let start = ids.len();
            self.encode_segment(&seg, &mut ids);
            for &id in &ids[start..] {
                let n = if id == UNK_ID {
                    1
                } else {
                    self.tokens[id].chars().count()
                };
                offsets.push((pos, pos + n));
                pos += n;
            }
        }
        (ids, offsets)
    }

    /// Sentence-start token followed by the subwords of `text`.
    pub fn encode_utterance(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.encode(text));
        ids
    }

    /// Tokens containing an unknown character.
    pub fn unknown_chars(&self, text: &str) -> Vec<char> {
        let mut out: Vec<char> = text
            .chars()
            .filter(|&c| {
                let sym = if c == ' ' { SPACE_MARK } else { c };
                !self.index.contains_key(&sym.to_string())
            })
            .collect();
        out.dedup();
        out
    }

    /// Inverse of [`encode`](Self::encode); special tokens are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= NUM_SPECIAL)
            .map(|&id| self.tokens[id].as_str())
            .collect::<String>()
            .replace(SPACE_MARK, " ")
    }

    /// Display form of one token, with the space marker rendered as a space.
    pub fn display(&self, id: usize) -> String {
        self.tokens[id].replace(SPACE_MARK, " ")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{HEADER}").unwrap();
        writeln!(s, "tokens\t{}", self.tokens.len()).unwrap();
        for t in &self.tokens {
            writeln!(s, "{t}").unwrap();
        }
        writeln!(s, "merges\t{}", self.merges.len()).unwrap();
        for (l, r) in &self.merges {
            writeln!(s, "{l}\t{r}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(EalmError::format(format!("vocabulary file must start with {HEADER:?}")));
        }
        let count = |line: Option<&str>, key: &str| -> Result<usize> {
            line.and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix('\t'))
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| EalmError::format(format!("expected `{key}<TAB>count` line")))
        };
        let n = count(lines.next(), "tokens")?;
        let mut tokens = Vec::with_capacity(n);
        for _ in 0..n {
            tokens.push(
                lines
                    .next()
                    .ok_or_else(|| EalmError::format("truncated token list"))?
                    .to_string(),
            );
        }
        let m = count(lines.next(), "merges")?;
        let mut merges = Vec::with_capacity(m);
        for _ in 0..m {
            let line = lines.next().ok_or_else(|| EalmError::format("truncated merge list"))?;
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| EalmError::format(format!("bad merge line {line:?}")))?;
            merges.push((l.to_string(), r.to_string()));
        }
        Vocabulary::from_parts(tokens, merges)
    }

    /// SHA-256 of the serialized vocabulary.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
