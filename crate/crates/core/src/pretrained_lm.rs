//! Global-attention transformer decoder trained on full utterances.
//!
//! Its input and output embeddings are exported, frozen, to every entity
//! model and to the fusion layer.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{EalmError, Result};
use crate::kv::KvMap;
use crate::nn::{Block, BlockDims, LayerNorm, INIT_STD};
use crate::numerics::{AttnMask, Graph, ParamId, ParamStore, Tensor, Var};
use crate::train::{run_training, TrainConfig, TrainStats};

pub const EMBED_INPUT: &str = "embed.input";
pub const EMBED_OUTPUT: &str = "embed.output";
pub const SHARED_EMBEDDINGS: [&str; 2] = [EMBED_INPUT, EMBED_OUTPUT];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainedConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl PretrainedConfig {
    pub fn desk(vocab_size: usize) -> Self {
        PretrainedConfig {
            layers: 2,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            dropout: 0.1,
            max_positions: 32,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.max_positions == 0 {
            return Err(EalmError::config("pretrained sizes must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(EalmError::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EalmError::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("layers", self.layers);
        kv.set("d_model", self.d_model);
        kv.set("d_ff", self.d_ff);
        kv.set("heads", self.heads);
        kv.set("dropout", self.dropout);
        kv.set("max_positions", self.max_positions);
        kv.set("vocab_size", self.vocab_size);
        kv
    }

    /// Keys absent from `kv` keep the values of `base`.
    pub fn from_kv(kv: &KvMap, base: PretrainedConfig) -> Result<Self> {
        let c = PretrainedConfig {
            layers: kv.get_or("layers", base.layers)?,
            d_model: kv.get_or("d_model", base.d_model)?,
            d_ff: kv.get_or("d_ff", base.d_ff)?,
            heads: kv.get_or("heads", base.heads)?,
            dropout: kv.get_or("dropout", base.dropout)?,
            max_positions: kv.get_or("max_positions", base.max_positions)?,
            vocab_size: kv.get_or("vocab_size", base.vocab_size)?,
        };
        c.validate()?;
        Ok(c)
    }

    fn dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            rel_classes: 0,
        }
    }
}

/// Frozen embedding pair handed to entity models and the fusion layer.
#[derive(Debug, Clone)]
pub struct SharedEmbeddings {
    pub input: Tensor,
    pub output: Tensor,
    pub hash: String,
}

#[derive(Debug, Clone)]
pub struct PretrainedOutput {
    /// Final-layer states `[n, d_model]`; the last row is h^P.
    pub hidden: Tensor,
    /// `[n, |V|]`.
    pub logits: Tensor,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainedLM {
    pub config: PretrainedConfig,
    pub params: ParamStore,
    pub vocab_hash: String,
    pub seed: u64,
    pub tokens_seen: u64,
    embed_in: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    embed_out: ParamId,
}

impl PretrainedLM {
    pub fn new(config: PretrainedConfig, vocab_hash: impl Into<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (v, d) = (config.vocab_size, config.d_model);
        params.add(EMBED_INPUT, Tensor::randn(&[v, d], INIT_STD, &mut rng));
        params.add("pos", Tensor::randn(&[config.max_positions, d], INIT_STD, &mut rng));
        for i in 0..config.layers {
            Block::init(&mut params, &format!("block{i}"), config.dims(), &mut rng);
        }
        LayerNorm::init(&mut params, "ln_f", d);
        params.add(EMBED_OUTPUT, Tensor::randn(&[d, v], INIT_STD, &mut rng));
        Self::bind(config, params, vocab_hash.into(), seed, 0)
    }

    fn bind(config: PretrainedConfig, params: ParamStore, vocab_hash: String, seed: u64, tokens_seen: u64) -> Result<Self> {
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| EalmError::format(format!("pretrained checkpoint lacks {name}")))?;
            if params.get(id).shape() != shape {
                return Err(EalmError::format(format!("{name} has the wrong shape")));
            }
            Ok(id)
        };
        let (v, d) = (config.vocab_size, config.d_model);
        let embed_in = get(EMBED_INPUT, &[v, d])?;
        let pos = get("pos", &[config.max_positions, d])?;
        let embed_out = get(EMBED_OUTPUT, &[d, v])?;
        let blocks = (0..config.layers)
            .map(|i| Block::bind(&params, &format!("block{i}"), config.dims()))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::bind(&params, "ln_f", d)?;
        Ok(PretrainedLM {
            config,
            params,
            vocab_hash,
            seed,
            tokens_seen,
            embed_in,
            pos,
            blocks,
            ln_f,
            embed_out,
        })
    }

    pub fn output_embedding_id(&self) -> ParamId {
        self.embed_out
    }

    pub fn shared_embeddings(&self) -> SharedEmbeddings {
        SharedEmbeddings {
            input: self.params.get(self.embed_in).clone(),
            output: self.params.get(self.embed_out).clone(),
            hash: self.shared_hash(),
        }
    }

    pub fn shared_hash(&self) -> String {
        self.params.content_hash(&SHARED_EMBEDDINGS).expect("shared embeddings present")
    }

    /// Packed forward over several sequences. Returns `(H^P, logits)` with
    /// one row per input token. Sequences must fit the position table.
    pub fn forward_graph(&self, g: &mut Graph, seqs: &[&[usize]]) -> (Var, Var) {
        self.forward_with(g, &self.params, seqs)
    }

    /// As [`forward_graph`](Self::forward_graph) with parameters taken from
    /// `store`, which must share this model's layout.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, seqs: &[&[usize]]) -> (Var, Var) {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let table = g.param(store, self.embed_in);
        let x = g.embedding(table, &ids);
        let pos = g.param(store, self.pos);
        let p = g.embedding(pos, &positions);
        let mut h = g.add(x, p);
        let mask = Rc::new(AttnMask::causal(&lengths));
        for b in &self.blocks {
            h = b.forward(g, store, h, &mask, self.config.dropout);
        }
        let h = self.ln_f.forward(g, store, h);
        let w_o = g.param(store, self.embed_out);
        let logits = g.matmul(h, w_o);
        (h, logits)
    }

    /// Eval-mode forward of one utterance; inputs longer than the position
    /// table are cut and flagged.
    pub fn forward(&self, tokens: &[usize]) -> Result<PretrainedOutput> {
        if tokens.is_empty() {
            return Err(EalmError::usage("forward on an empty token sequence"));
        }
        self.check_ids(tokens)?;
        let truncated = tokens.len() > self.config.max_positions;
        let tokens = &tokens[..tokens.len().min(self.config.max_positions)];
        let mut g = Graph::inference();
        let (h, logits) = self.forward_graph(&mut g, &[tokens]);
        g.check_finite(logits, "pretrained logits")?;
        Ok(PretrainedOutput {
            hidden: g.value(h).clone(),
            logits: g.value(logits).clone(),
            truncated,
        })
    }

    fn check_ids(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(EalmError::config(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Negative log-likelihood of every token after the first.
    pub fn token_nlls(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let out = self.forward(tokens)?;
        let n = out.logits.rows();
        Ok((0..n.saturating_sub(1))
            .map(|i| -crate::numerics::log_softmax(out.logits.row(i))[tokens[i + 1]])
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(ModelKind::Pretrained, &self.params);
        for (k, v) in self.config.to_kv().into_map() {
            c.set_meta(&format!("config.{k}"), v);
        }
        c.set_meta("vocab_hash", &self.vocab_hash);
        c.set_meta("seed", self.seed);
        c.set_meta("tokens_seen", self.tokens_seen);
        c.set_meta("shared_embedding_hash", self.shared_hash());
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(ModelKind::Pretrained)?;
        let kv = KvMap::from_map(c.meta.clone()).section("config");
        let config = PretrainedConfig::from_kv(&kv, PretrainedConfig::desk(0))?;
        let lm = Self::bind(
            config,
            c.to_store(),
            c.meta("vocab_hash")?.to_string(),
            c.meta_parse("seed")?,
            c.meta_parse("tokens_seen")?,
        )?;
        if lm.shared_hash() != c.meta("shared_embedding_hash")? {
            return Err(EalmError::contract("pretrained checkpoint embedding hash does not match its tensors"));
        }
        Ok(lm)
    }
}

/// Trains every parameter with next-token cross-entropy.
pub fn pretrain(
    corpus: &[Vec<usize>],
    config: PretrainedConfig,
    vocab_hash: &str,
    train: &TrainConfig,
    seed: u64,
) -> Result<(PretrainedLM, TrainStats)> {
    let mut lm = PretrainedLM::new(config, vocab_hash, seed)?;
    let examples: Vec<&[usize]> = corpus.iter().map(|u| &u[..u.len().min(config.max_positions)]).collect();
    for u in &examples {
        lm.check_ids(u)?;
    }
    let examples: Vec<&[usize]> = examples.into_iter().filter(|u| u.len() >= 2).collect();
    let mut params = lm.params.clone();
    let stats = run_training(&mut params, examples.len(), train, seed, |g, store, batch| {
        let seqs: Vec<&[usize]> = batch.iter().map(|&i| examples[i]).collect();
        next_token_loss(&lm, g, store, &seqs)
    })?;
    lm.params = params;
    lm.tokens_seen = stats.tokens_seen;
    Ok((lm, stats))
}

/// Mean next-token loss over packed sequences and the number of predictions.
pub(crate) fn next_token_loss(
    lm: &PretrainedLM,
    g: &mut Graph,
    store: &ParamStore,
    seqs: &[&[usize]],
) -> Result<(Var, usize)> {
    let (_, logits) = lm.forward_with(g, store, seqs);
    let mut targets = Vec::new();
    let mut ignore = Vec::new();
    for s in seqs {
        for i in 0..s.len() {
            let last = i + 1 == s.len();
            targets.push(if last { 0 } else { s[i + 1] });
            ignore.push(last);
        }
    }
    let n = ignore.iter().filter(|&&x| !x).count();
    Ok((g.cross_entropy(logits, &targets, &ignore)?, n))
}
