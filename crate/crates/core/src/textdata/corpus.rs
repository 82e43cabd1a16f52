use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bpe::Vocabulary;
use super::catalogue::{sample_entity, Catalogue};
use crate::error::{EalmError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Part {
    Text(String),
    Slot(String),
}

/// Carrier phrase with typed slots, e.g. `play {song} by {celebrity}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    parts: Vec<Part>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self> {
        let mut parts = Vec::new();
        let mut rest = source;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                parts.push(Part::Text(rest[..open].to_string()));
            }
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| EalmError::config(format!("unclosed slot in template {source:?}")))?;
            let name = &rest[open + 1..open + close];
            if name.is_empty() {
                return Err(EalmError::config(format!("empty slot in template {source:?}")));
            }
            parts.push(Part::Slot(name.to_string()));
            rest = &rest[open + close + 1..];
        }
        if !rest.is_empty() {
            parts.push(Part::Text(rest.to_string()));
        }
        Ok(Template {
            source: source.to_string(),
            parts,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            Part::Slot(s) => Some(s.as_str()),
            Part::Text(_) => None,
        })
    }

    pub fn has_slots(&self) -> bool {
        self.slots().next().is_some()
    }

    /// Fills slots with the given strings in order.
    pub fn fill(&self, mut entity_for: impl FnMut(&str) -> Result<String>) -> Result<LabeledUtterance> {
        let mut text = String::new();
        let mut spans = Vec::new();
        let mut chars = 0;
        for part in &self.parts {
            match part {
                Part::Text(t) => {
                    text.push_str(t);
                    chars += t.chars().count();
                }
                Part::Slot(ty) => {
                    let e = entity_for(ty)?;
                    let n = e.chars().count();
                    spans.push(Span {
                        entity_type: ty.clone(),
                        start: chars,
                        end: chars + n,
                    });
                    text.push_str(&e);
                    chars += n;
                }
            }
        }
        Ok(LabeledUtterance { text, spans })
    }
}

/// Character span of an entity inside an utterance (`end` exclusive).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledUtterance {
    pub text: String,
    pub spans: Vec<Span>,
}

impl LabeledUtterance {
    pub fn plain(text: impl Into<String>) -> Self {
        LabeledUtterance {
            text: text.into(),
            spans: Vec::new(),
        }
    }

    pub fn entity_text(&self, span: &Span) -> String {
        self.text.chars().skip(span.start).take(span.end - span.start).collect()
    }

    pub fn has_type(&self, entity_type: &str) -> bool {
        self.spans.iter().any(|s| s.entity_type == entity_type)
    }
}

/// Generates `n` utterances. With probability `slot_rate` a template with
/// slots is chosen, otherwise a carrier-only template; both uniformly.
pub fn generate_corpus(
    templates: &[Template],
    catalogues: &[Catalogue],
    n: usize,
    slot_rate: f64,
    seed: u64,
) -> Result<Vec<LabeledUtterance>> {
    if !(0.0..=1.0).contains(&slot_rate) {
        return Err(EalmError::config(format!("slot rate {slot_rate} outside [0, 1]")));
    }
    let by_type: HashMap<&str, &Catalogue> =
        catalogues.iter().map(|c| (c.entity_type.as_str(), c)).collect();
    for t in templates {
        for slot in t.slots() {
            if !by_type.contains_key(slot) {
                return Err(EalmError::config(format!(
                    "template {:?} uses slot {{{slot}}} with no catalogue",
                    t.source()
                )));
            }
        }
    }
    let (with_slots, carriers): (Vec<&Template>, Vec<&Template>) =
        templates.iter().partition(|t| t.has_slots());
    if slot_rate > 0.0 && with_slots.is_empty() {
        return Err(EalmError::config("slot rate is positive but no template has slots"));
    }
    if slot_rate < 1.0 && carriers.is_empty() {
        return Err(EalmError::config("slot rate below 1 but no carrier-only template"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let pool = if rng.random::<f64>() < slot_rate {
            &with_slots
        } else {
            &carriers
        };
        let t = pool[rng.random_range(0..pool.len())];
        let u = t.fill(|ty| Ok(sample_entity(by_type[ty], &mut rng)?.to_string()))?;
        out.push(u);
    }
    Ok(out)
}

/// Token ids (starting with `<s>`) plus token-level gold spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub ids: Vec<usize>,
    pub spans: Vec<TokenSpan>,
}

/// Token positions `[start, end)` within [`Utterance::ids`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSpan {
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
}

impl Utterance {
    pub fn has_type(&self, entity_type: &str) -> bool {
        self.spans.iter().any(|s| s.entity_type == entity_type)
    }

    /// Number of predicted tokens (every token after `<s>`).
    pub fn predictions(&self) -> usize {
        self.ids.len().saturating_sub(1)
    }

    /// True if token position `pos` lies inside any gold span.
    pub fn in_entity(&self, pos: usize) -> bool {
        self.spans.iter().any(|s| s.start <= pos && pos < s.end)
    }
}

/// Tokenizes a labeled utterance, truncating to `max_len` tokens including
/// `<s>`. Returns the utterance and whether it was truncated.
pub fn tokenize(vocab: &Vocabulary, u: &LabeledUtterance, max_len: usize) -> (Utterance, bool) {
    let (body, offsets) = vocab.encode_with_offsets(&u.text);
    let mut ids = vec![vocab.bos_id()];
    ids.extend(body);
    let truncated = ids.len() > max_len;
    ids.truncate(max_len.max(1));
    let mut spans = Vec::new();
    for s in &u.spans {
        // token i+1 covers offsets[i]
        let covered: Vec<usize> = offsets
            .iter()
            .enumerate()
            .filter(|(_, (a, b))| *a < s.end && *b > s.start)
            .map(|(i, _)| i + 1)
            .filter(|&p| p < ids.len())
            .collect();
        if let (Some(&first), Some(&last)) = (covered.first(), covered.last()) {
            spans.push(TokenSpan {
                entity_type: s.entity_type.clone(),
                start: first,
                end: last + 1,
            });
        }
    }
    (Utterance { ids, spans }, truncated)
}

pub fn tokenize_all(vocab: &Vocabulary, corpus: &[LabeledUtterance], max_len: usize) -> Vec<Utterance> {
    corpus.iter().map(|u| tokenize(vocab, u, max_len).0).collect()
}

/// Writes one utterance per line plus the `line<TAB>type<TAB>start<TAB>end`
/// span sidecar.
pub fn save_corpus(corpus: &[LabeledUtterance], path: &Path, spans_path: &Path) -> Result<()> {
    let mut text = String::new();
    let mut side = String::new();
    for (i, u) in corpus.iter().enumerate() {
        if u.text.contains('\n') {
            return Err(EalmError::format("utterances may not contain newlines"));
        }
        writeln!(text, "{}", u.text).unwrap();
        for s in &u.spans {
            writeln!(side, "{}\t{}\t{}\t{}", i, s.entity_type, s.start, s.end).unwrap();
        }
    }
    std::fs::write(path, text).map_err(|e| EalmError::io(path, e))?;
    std::fs::write(spans_path, side).map_err(|e| EalmError::io(spans_path, e))
}

pub fn load_corpus(path: &Path, spans_path: Option<&Path>) -> Result<Vec<LabeledUtterance>> {
    let text = std::fs::read_to_string(path).map_err(|e| EalmError::io(path, e))?;
    let mut corpus: Vec<LabeledUtterance> = text.lines().map(LabeledUtterance::plain).collect();
    if let Some(sp) = spans_path {
        let side = std::fs::read_to_string(sp).map_err(|e| EalmError::io(sp, e))?;
        for (n, line) in side.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || EalmError::format(format!("span sidecar line {}: {line:?}", n + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            let idx: usize = f[0].parse().map_err(|_| bad())?;
            let start: usize = f[2].parse().map_err(|_| bad())?;
            let end: usize = f[3].parse().map_err(|_| bad())?;
            let u = corpus.get_mut(idx).ok_or_else(bad)?;
            if start >= end || end > u.text.chars().count() {
                return Err(bad());
            }
            u.spans.push(Span {
                entity_type: f[1].to_string(),
                start,
                end,
            });
        }
    }
    Ok(corpus)
}
