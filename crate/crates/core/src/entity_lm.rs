//! Entity language models: local attention with relative-position biases,
//! trained only on `<s>`-prefixed catalogue strings.
//!
//! Input and output embeddings are frozen copies of the pre-trained LM's.
//! There are no absolute positions; `<s>` is the only anchor, so a context's
//! encoding does not depend on where it sits in an utterance.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{EalmError, Result};
use crate::kv::KvMap;
use crate::nn::{Block, BlockDims, LayerNorm};
use crate::numerics::{log_softmax, AttnMask, Graph, ParamId, ParamStore, Tensor, Var};
use crate::pretrained_lm::{SharedEmbeddings, EMBED_INPUT, EMBED_OUTPUT, SHARED_EMBEDDINGS};
use crate::textdata::{Catalogue, CatalogueEntry, Vocabulary, PAD_ID};
use crate::train::{run_training, TrainConfig, TrainStats};

#[derive(Debug, Clone, PartialEq)]
pub struct EntityConfig {
    pub entity_type: String,
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Markov length: most recent tokens an entity context may hold.
    pub k: usize,
    /// Local attention span in tokens, `<s>` excluded.
    pub window: usize,
    /// Catalogue draws per epoch, sampled by popularity.
    pub samples: usize,
}

impl EntityConfig {
    pub fn desk(entity_type: impl Into<String>) -> Self {
        EntityConfig {
            entity_type: entity_type.into(),
            layers: 2,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            dropout: 0.1,
            k: 4,
            window: 4,
            samples: 4000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entity_type.is_empty() || self.entity_type.contains(char::is_whitespace) {
            return Err(EalmError::config("entity_type must be a non-empty word"));
        }
        if self.layers == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(EalmError::config("entity model needs layers > 0 and d_model divisible by heads"));
        }
        if self.k < 1 || self.window < self.k {
            return Err(EalmError::config(format!(
                "need k >= 1 and window >= k, got k={} window={}",
                self.k, self.window
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EalmError::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("entity_type", &self.entity_type);
        kv.set("layers", self.layers);
        kv.set("d_model", self.d_model);
        kv.set("d_ff", self.d_ff);
        kv.set("heads", self.heads);
        kv.set("dropout", self.dropout);
        kv.set("k", self.k);
        kv.set("window", self.window);
        kv.set("samples", self.samples);
        kv
    }

    pub fn from_kv(kv: &KvMap, base: EntityConfig) -> Result<Self> {
        let c = EntityConfig {
            entity_type: kv.get_or("entity_type", base.entity_type)?,
            layers: kv.get_or("layers", base.layers)?,
            d_model: kv.get_or("d_model", base.d_model)?,
            d_ff: kv.get_or("d_ff", base.d_ff)?,
            heads: kv.get_or("heads", base.heads)?,
            dropout: kv.get_or("dropout", base.dropout)?,
            k: kv.get_or("k", base.k)?,
            window: kv.get_or("window", base.window)?,
            samples: kv.get_or("samples", base.samples)?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Offsets `0..window` plus the `<s>` anchor class.
    pub fn rel_classes(&self) -> usize {
        self.window + 1
    }

    fn dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            rel_classes: self.rel_classes(),
        }
    }
}

/// Token ids of an entity as it appears inside an utterance, after `<s>`.
pub fn entity_ids(vocab: &Vocabulary, text: &str) -> Vec<usize> {
    vocab.encode_utterance(&format!(" {text}"))
}

/// Appends the queries of one `<s>`-anchored sequence occupying rows
/// `base..base + len`. Rows `1..first_valid` are padding: they see only the
/// anchor and nothing sees them.
fn push_sequence(mask: &mut AttnMask, base: usize, len: usize, first_valid: usize, window: usize) {
    let anchor = Some(window);
    mask.push_query([(base, anchor)]);
    for p in 1..len {
        if p < first_valid {
            mask.push_query([(base, anchor)]);
            continue;
        }
        let lo = first_valid.max((p + 1).saturating_sub(window));
        mask.push_query(std::iter::once((base, anchor)).chain((lo..=p).map(|j| (base + j, Some(p - j)))));
    }
}

#[derive(Debug, Clone)]
pub struct EntityLM {
    pub config: EntityConfig,
    pub params: ParamStore,
    pub vocab_size: usize,
    pub shared_hash: String,
    pub seed: u64,
    pub tokens_seen: u64,
    embed_in: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    embed_out: ParamId,
}

impl EntityLM {
    /// Fresh model whose embeddings are frozen copies of `shared`.
    pub fn new(config: EntityConfig, shared: &SharedEmbeddings, seed: u64) -> Result<Self> {
        config.validate()?;
        let (v, d) = (shared.input.rows(), shared.input.cols());
        if d != config.d_model || shared.output.shape() != [d, v] {
            return Err(EalmError::config(format!(
                "entity d_model {} does not match shared embeddings of width {d}",
                config.d_model
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let e_in = params.add(EMBED_INPUT, shared.input.clone());
        params.set_frozen(e_in, true);
        for i in 0..config.layers {
            Block::init(&mut params, &format!("block{i}"), config.dims(), &mut rng);
        }
        LayerNorm::init(&mut params, "ln_f", d);
        let e_out = params.add(EMBED_OUTPUT, shared.output.clone());
        params.set_frozen(e_out, true);
        let lm = Self::bind(config, params, seed, 0)?;
        if lm.shared_hash != shared.hash {
            return Err(EalmError::contract("shared embeddings do not match their recorded hash"));
        }
        Ok(lm)
    }

    fn bind(config: EntityConfig, params: ParamStore, seed: u64, tokens_seen: u64) -> Result<Self> {
        let embed_in = params
            .id(EMBED_INPUT)
            .ok_or_else(|| EalmError::format("entity checkpoint lacks input embedding"))?;
        let embed_out = params
            .id(EMBED_OUTPUT)
            .ok_or_else(|| EalmError::format("entity checkpoint lacks output embedding"))?;
        let (v, d) = (params.get(embed_in).rows(), params.get(embed_in).cols());
        if d != config.d_model || params.get(embed_out).shape() != [d, v] {
            return Err(EalmError::config("entity embeddings do not match d_model"));
        }
        if !params.is_frozen(embed_in) || !params.is_frozen(embed_out) {
            return Err(EalmError::contract("entity model embeddings must be frozen"));
        }
        let blocks = (0..config.layers)
            .map(|i| Block::bind(&params, &format!("block{i}"), config.dims()))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::bind(&params, "ln_f", d)?;
        let shared_hash = params.content_hash(&SHARED_EMBEDDINGS)?;
        Ok(EntityLM {
            config,
            params,
            vocab_size: v,
            shared_hash,
            seed,
            tokens_seen,
            embed_in,
            blocks,
            ln_f,
            embed_out,
        })
    }

    pub fn entity_type(&self) -> &str {
        &self.config.entity_type
    }

    /// Final-layer states for packed rows under `mask`.
    pub fn forward_masked(&self, g: &mut Graph, store: &ParamStore, ids: &[usize], mask: Rc<AttnMask>) -> Var {
        let table = g.param(store, self.embed_in);
        let mut h = g.embedding(table, ids);
        for b in &self.blocks {
            h = b.forward(g, store, h, &mask, self.config.dropout);
        }
        self.ln_f.forward(g, store, h)
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Var {
        let w = g.param(store, self.embed_out);
        g.matmul(h, w)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(EalmError::usage(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    fn run(&self, ids: &[usize], mask: AttnMask) -> Result<Tensor> {
        self.check_ids(ids)?;
        let mut g = Graph::inference();
        let h = self.forward_masked(&mut g, &self.params, ids, Rc::new(mask));
        g.check_finite(h, &format!("{} entity states", self.config.entity_type))?;
        Ok(g.value(h).clone())
    }

    /// Encoding of one standalone context `[w_0, …]`: its last row.
    pub fn forward_single(&self, context: &[usize]) -> Result<Tensor> {
        if context.is_empty() {
            return Err(EalmError::usage("empty entity context"));
        }
        let mut mask = AttnMask::new();
        push_sequence(&mut mask, 0, context.len(), 1, self.config.window);
        let h = self.run(context, mask)?;
        Ok(Tensor::from_vec(h.row(context.len() - 1).to_vec()))
    }

    /// All `k + 1` context encodings in one pass over a `k + 1`-fold
    /// duplicated input. `window` is `[w_0]` followed by at most `k` history
    /// tokens; row `l` encodes `[w_0]` plus the last `min(l, history)` of them.
    pub fn forward_multi(&self, window: &[usize], k: usize) -> Result<Tensor> {
        if window.is_empty() {
            return Err(EalmError::usage("forward_multi needs at least <s>"));
        }
        let hist = &window[1..];
        if hist.len() > k || k > self.config.window {
            return Err(EalmError::usage(format!(
                "forward_multi: {} history tokens with k={k}, attention window {}",
                hist.len(),
                self.config.window
            )));
        }
        let len = k + 1;
        let mut ids = Vec::with_capacity(len * len);
        let mut mask = AttnMask::new();
        let mut out_rows = Vec::with_capacity(len);
        for l in 0..=k {
            let used = l.min(hist.len());
            let base = l * len;
            ids.push(window[0]);
            ids.extend(std::iter::repeat_n(PAD_ID, k - used));
            ids.extend_from_slice(&hist[hist.len() - used..]);
            push_sequence(&mut mask, base, len, len - used, self.config.window);
            out_rows.push(if used == 0 { base } else { base + k });
        }
        let h = self.run(&ids, mask)?;
        Tensor::from_rows(&out_rows.iter().map(|&r| h.row(r).to_vec()).collect::<Vec<_>>())
    }

    /// Context encodings for every position of `tokens`.
    ///
    /// Row `(t - 1) * (k + 1) + l` encodes context length `l` for predicting
    /// the token after `tokens[..t]`, `t = 1..=n`. One causal pass per start
    /// position covers every context that begins there.
    pub fn context_states(&self, tokens: &[usize]) -> Result<Tensor> {
        let n = tokens.len();
        if n == 0 {
            return Err(EalmError::usage("context_states on an empty sequence"));
        }
        let k = self.config.k;
        let mut ids = vec![tokens[0]];
        let mut mask = AttnMask::new();
        push_sequence(&mut mask, 0, 1, 1, self.config.window);
        // start[s] = row of w_0 in the sequence that continues with tokens[s].
        let mut start = vec![0usize; n];
        for s in 1..n {
            let end = (s + k).min(n);
            start[s] = ids.len();
            ids.push(tokens[0]);
            ids.extend_from_slice(&tokens[s..end]);
            push_sequence(&mut mask, start[s], end - s + 1, 1, self.config.window);
        }
        let h = self.run(&ids, mask)?;
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(n * (k + 1) * d);
        for t in 1..=n {
            for l in 0..=k {
                let used = l.min(t - 1);
                let row = if used == 0 { 0 } else { start[t - used] + used };
                data.extend_from_slice(h.row(row));
            }
        }
        Tensor::new(vec![n * (k + 1), d], data)
    }

    /// Total negative log-likelihood of `ids[1..]` given `<s>`-anchored
    /// contexts of at most `k` tokens.
    pub fn sequence_nll(&self, ids: &[usize]) -> Result<f64> {
        let seqs = training_sequences(ids, self.config.k);
        let mut g = Graph::inference();
        let (h, targets) = self.pack(&mut g, &self.params, &seqs)?;
        let logits = self.logits(&mut g, &self.params, h);
        let lv = g.value(logits);
        Ok(targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| -log_softmax(lv.row(i))[t]))
            .sum())
    }

    fn pack(&self, g: &mut Graph, store: &ParamStore, seqs: &[TrainSeq]) -> Result<(Var, Vec<Option<usize>>)> {
        let mut ids = Vec::new();
        let mut targets = Vec::new();
        let mut mask = AttnMask::new();
        for s in seqs {
            push_sequence(&mut mask, ids.len(), s.tokens.len(), 1, self.config.window);
            ids.extend_from_slice(&s.tokens);
            targets.extend_from_slice(&s.targets);
        }
        self.check_ids(&ids)?;
        Ok((self.forward_masked(g, store, &ids, Rc::new(mask)), targets))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(ModelKind::Entity, &self.params);
        for (k, v) in self.config.to_kv().into_map() {
            c.set_meta(&format!("config.{k}"), v);
        }
        c.set_meta("entity_type", &self.config.entity_type);
        c.set_meta("seed", self.seed);
        c.set_meta("tokens_seen", self.tokens_seen);
        c.set_meta("shared_embedding_hash", &self.shared_hash);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(ModelKind::Entity)?;
        let kv = KvMap::from_map(c.meta.clone()).section("config");
        let config = EntityConfig::from_kv(&kv, EntityConfig::desk("entity"))?;
        let lm = Self::bind(config, c.to_store(), c.meta_parse("seed")?, c.meta_parse("tokens_seen")?)?;
        if lm.shared_hash != c.meta("shared_embedding_hash")? {
            return Err(EalmError::contract("entity checkpoint embedding hash does not match its tensors"));
        }
        Ok(lm)
    }

    /// True when `other` can replace this model inside a trained system.
    pub fn swap_compatible(&self, other: &EntityLM) -> Result<()> {
        if self.shared_hash != other.shared_hash {
            return Err(EalmError::contract(format!(
                "shared-embedding hash {} differs from {}",
                &other.shared_hash[..12],
                &self.shared_hash[..12]
            )));
        }
        if self.config.entity_type != other.config.entity_type {
            return Err(EalmError::contract(format!(
                "entity type {} cannot replace {}",
                other.config.entity_type, self.config.entity_type
            )));
        }
        let shapes = |m: &EntityLM| -> Vec<(String, Vec<usize>)> {
            m.params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec()))
                .collect()
        };
        if shapes(self) != shapes(other) || self.config.k != other.config.k {
            return Err(EalmError::contract("entity checkpoint shapes differ"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct TrainSeq {
    tokens: Vec<usize>,
    targets: Vec<Option<usize>>,
}

/// Splits an `<s>`-prefixed entity into `<s>`-anchored sequences so each
/// token is predicted exactly once from at most `k` preceding tokens.
fn training_sequences(ids: &[usize], k: usize) -> Vec<TrainSeq> {
    let m = ids.len() - 1;
    let mut out = Vec::new();
    if m == 0 {
        return out;
    }
    let first = k.min(m - 1);
    out.push(TrainSeq {
        tokens: ids[..first + 1].to_vec(),
        targets: (0..=first).map(|p| Some(ids[p + 1])).collect(),
    });
    for s in 2..=m.saturating_sub(k) {
        let mut tokens = vec![ids[0]];
        tokens.extend_from_slice(&ids[s..s + k]);
        let mut targets = vec![None; k + 1];
        targets[k] = Some(ids[s + k]);
        out.push(TrainSeq { tokens, targets });
    }
    out
}

/// Trains an entity model on popularity-sampled catalogue entries.
///
/// `expected_hash` is the shared-embedding hash recorded in the pre-trained
/// checkpoint.
pub fn train_entity_model(
    catalogue: &Catalogue,
    vocab: &Vocabulary,
    shared: &SharedEmbeddings,
    expected_hash: &str,
    config: &EntityConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(EntityLM, TrainStats)> {
    if catalogue.entries.is_empty() {
        return Err(EalmError::config(format!("catalogue for {} is empty", config.entity_type)));
    }
    if shared.hash != expected_hash {
        return Err(EalmError::contract(
            "shared embeddings differ from the pre-trained checkpoint",
        ));
    }
    let mut lm = EntityLM::new(config.clone(), shared, seed)?;
    let encoded: Vec<Vec<usize>> = catalogue.entries.iter().map(|e| entity_ids(vocab, &e.text)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    // One entry per popularity draw so a micro-batch holds whole entities.
    let mut draws: Vec<Vec<TrainSeq>> = Vec::with_capacity(config.samples);
    for _ in 0..config.samples.max(1) {
        let e = catalogue.sample(&mut rng)?;
        let i = catalogue
            .entries
            .iter()
            .position(|x| std::ptr::eq(x, e))
            .expect("sampled entry belongs to catalogue");
        draws.push(training_sequences(&encoded[i], config.k));
    }
    let before = lm.params.clone();
    let mut params = lm.params.clone();
    let stats = run_training(&mut params, draws.len(), train, seed, |g, store, batch| {
        let seqs: Vec<TrainSeq> = batch.iter().flat_map(|&i| draws[i].iter().cloned()).collect();
        let (h, targets) = lm.pack(g, store, &seqs)?;
        let logits = lm.logits(g, store, h);
        let ignore: Vec<bool> = targets.iter().map(|t| t.is_none()).collect();
        let dense: Vec<usize> = targets.iter().map(|t| t.unwrap_or(0)).collect();
        let n = ignore.iter().filter(|&&x| !x).count();
        Ok((g.cross_entropy(logits, &dense, &ignore)?, n))
    })?;
    for name in SHARED_EMBEDDINGS {
        if !before.by_name(name).unwrap().bitwise_eq(params.by_name(name).unwrap()) {
            return Err(EalmError::contract(format!("{name} changed during entity training")));
        }
    }
    lm.params = params;
    lm.tokens_seen = stats.tokens_seen;
    Ok((lm, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownPolicy {
    Skip,
    Error,
}

#[derive(Debug, Clone)]
pub struct Retrained {
    pub model: EntityLM,
    pub catalogue: Catalogue,
    /// Additions dropped because they contain characters outside the vocabulary.
    pub skipped: Vec<String>,
    pub stats: TrainStats,
}

/// Catalogue with `additions` inserted at the popularity scores of the top
/// `top_fraction` of entries, cycling through them in rank order.
pub fn place_additions(old: &Catalogue, additions: &[String], top_fraction: f64) -> Result<Catalogue> {
    let top = old.top_fraction(top_fraction)?;
    let ranked = top.ranked();
    let mut entries = old.entries.clone();
    for (i, text) in additions.iter().enumerate() {
        if old.contains(text) {
            continue;
        }
        entries.push(CatalogueEntry {
            text: text.clone(),
            popularity: ranked[i % ranked.len()].popularity,
        });
    }
    Catalogue::new(old.entity_type.clone(), entries)
}

/// Retrains from scratch on the old catalogue plus `additions` placed in the
/// top popularity ranks. The result is swap-compatible with any model built
/// from the same config and shared embeddings.
#[allow(clippy::too_many_arguments)]
pub fn retrain_with_additions(
    old: &Catalogue,
    additions: &[String],
    top_fraction: f64,
    vocab: &Vocabulary,
    shared: &SharedEmbeddings,
    expected_hash: &str,
    config: &EntityConfig,
    train: &TrainConfig,
    seed: u64,
    policy: UnknownPolicy,
) -> Result<Retrained> {
    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for a in additions {
        let bad = vocab.unknown_chars(a);
        if bad.is_empty() {
            kept.push(a.clone());
        } else if policy == UnknownPolicy::Error {
            return Err(EalmError::config(format!("entity {a:?} has characters outside the vocabulary: {bad:?}")));
        } else {
            log::warn!("skipping entity {a:?}: unknown characters {bad:?}");
            skipped.push(a.clone());
        }
    }
    let catalogue = place_additions(old, &kept, top_fraction)?;
    let (model, stats) = train_entity_model(&catalogue, vocab, shared, expected_hash, config, train, seed)?;
    Ok(Retrained {
        model,
        catalogue,
        skipped,
        stats,
    })
}
