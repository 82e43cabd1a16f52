//! Contextual fusion layer and the composed entity-aware LM.
//!
//! Per timestep: a context encoder turns H^P into h^C; for each entity model
//! a mixer scores its `k + 1` context encodings and takes their weighted sum;
//! a fuser scores the pre-trained state and every mixed entity output and
//! interpolates them; the result goes through the frozen output embedding.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::entity_lm::EntityLM;
use crate::error::{EalmError, Result};
use crate::kv::KvMap;
use crate::nn::{Block, BlockDims, LayerNorm, Scorer, INIT_STD};
use crate::numerics::{log_softmax, softmax_in_place, AttnMask, Graph, ParamId, ParamStore, Tensor, Var};
use crate::pretrained_lm::PretrainedLM;
use crate::train::{run_training, TrainConfig, TrainStats};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub k: usize,
    pub dropout: f64,
    pub entity_dropout: f64,
}

impl FusionConfig {
    pub fn desk() -> Self {
        FusionConfig {
            d_model: 64,
            d_ff: 128,
            heads: 4,
            max_positions: 32,
            k: 4,
            dropout: 0.1,
            entity_dropout: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) || self.max_positions == 0 {
            return Err(EalmError::config("fusion needs d_model divisible by heads and positions > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.entity_dropout) {
            return Err(EalmError::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("d_model", self.d_model);
        kv.set("d_ff", self.d_ff);
        kv.set("heads", self.heads);
        kv.set("max_positions", self.max_positions);
        kv.set("k", self.k);
        kv.set("dropout", self.dropout);
        kv.set("entity_dropout", self.entity_dropout);
        kv
    }

    pub fn from_kv(kv: &KvMap, base: FusionConfig) -> Result<Self> {
        let c = FusionConfig {
            d_model: kv.get_or("d_model", base.d_model)?,
            d_ff: kv.get_or("d_ff", base.d_ff)?,
            heads: kv.get_or("heads", base.heads)?,
            max_positions: kv.get_or("max_positions", base.max_positions)?,
            k: kv.get_or("k", base.k)?,
            dropout: kv.get_or("dropout", base.dropout)?,
            entity_dropout: kv.get_or("entity_dropout", base.entity_dropout)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Row order of the class embeddings and the checkpoints the layer was
/// composed with. Index 0 is always the pre-trained LM.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entity_types: Vec<String>,
    pub pretrained_hash: String,
    pub entity_hashes: Vec<String>,
    pub vocab_hash: String,
    pub shared_embedding_hash: String,
}

impl Manifest {
    pub fn class_index(&self, entity_type: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == entity_type).map(|i| i + 1)
    }

    pub fn model_names(&self) -> Vec<String> {
        std::iter::once("pretrained".to_string())
            .chain(self.entity_types.iter().cloned())
            .collect()
    }

    fn write(&self, c: &mut Checkpoint) {
        c.set_meta("manifest.n", self.entity_types.len());
        c.set_meta("manifest.0", "pretrained");
        c.set_meta("manifest.0.hash", &self.pretrained_hash);
        for (i, (t, h)) in self.entity_types.iter().zip(&self.entity_hashes).enumerate() {
            c.set_meta(&format!("manifest.{}", i + 1), t);
            c.set_meta(&format!("manifest.{}.hash", i + 1), h);
        }
        c.set_meta("vocab_hash", &self.vocab_hash);
        c.set_meta("shared_embedding_hash", &self.shared_embedding_hash);
    }

    fn read(c: &Checkpoint) -> Result<Self> {
        let n: usize = c.meta_parse("manifest.n")?;
        let mut entity_types = Vec::with_capacity(n);
        let mut entity_hashes = Vec::with_capacity(n);
        for i in 1..=n {
            entity_types.push(c.meta(&format!("manifest.{i}"))?.to_string());
            entity_hashes.push(c.meta(&format!("manifest.{i}.hash"))?.to_string());
        }
        Ok(Manifest {
            entity_types,
            pretrained_hash: c.meta("manifest.0.hash")?.to_string(),
            entity_hashes,
            vocab_hash: c.meta("vocab_hash")?.to_string(),
            shared_embedding_hash: c.meta("shared_embedding_hash")?.to_string(),
        })
    }

    /// Manifest rendered as `index<TAB>name<TAB>hash` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("index\tmodel\tcheckpoint_sha256\n");
        s.push_str(&format!("0\tpretrained\t{}\n", self.pretrained_hash));
        for (i, (t, h)) in self.entity_types.iter().zip(&self.entity_hashes).enumerate() {
            s.push_str(&format!("{}\t{t}\t{h}\n", i + 1));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub config: FusionConfig,
    pub params: ParamStore,
    pub manifest: Manifest,
    pub seed: u64,
    pub tokens_seen: u64,
    class_emb: ParamId,
    pos: ParamId,
    block: Block,
    ln: LayerNorm,
    mixer: Scorer,
    fuser: Scorer,
}

/// Frozen per-utterance inputs of the fusion layer.
#[derive(Debug, Clone)]
pub struct FusionInputs {
    pub tokens: Vec<usize>,
    /// `[n, d]` pre-trained final-layer states.
    pub hp: Tensor,
    /// Per entity model, `[n * (k + 1), d]` context encodings.
    pub entity: Vec<Tensor>,
}

struct FusionVars {
    hidden: Var,
    logits: Var,
    pfusion: Var,
    pcontext: Vec<Var>,
}

impl FusionLayer {
    pub fn new(config: FusionConfig, manifest: Manifest, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let n = manifest.entity_types.len();
        params.add("class_emb", Tensor::randn(&[n + 1, d], INIT_STD, &mut rng));
        params.add("ctx.pos", Tensor::randn(&[config.max_positions, d], INIT_STD, &mut rng));
        Block::init(&mut params, "ctx.block", Self::dims(&config), &mut rng);
        LayerNorm::init(&mut params, "ctx.ln", d);
        Scorer::init(&mut params, "mixer", 3 * d, d, &mut rng);
        Scorer::init(&mut params, "fuser", 3 * d, d, &mut rng);
        Self::bind(config, params, manifest, seed, 0)
    }

    fn dims(config: &FusionConfig) -> BlockDims {
        BlockDims {
            d_model: config.d_model,
            d_ff: config.d_ff,
            heads: config.heads,
            rel_classes: 0,
        }
    }

    fn bind(config: FusionConfig, params: ParamStore, manifest: Manifest, seed: u64, tokens_seen: u64) -> Result<Self> {
        let d = config.d_model;
        let class_emb = params
            .id("class_emb")
            .ok_or_else(|| EalmError::format("fusion checkpoint lacks class_emb"))?;
        if params.get(class_emb).shape() != [manifest.entity_types.len() + 1, d] {
            return Err(EalmError::config("class embedding rows do not match the manifest"));
        }
        let pos = params
            .id("ctx.pos")
            .ok_or_else(|| EalmError::format("fusion checkpoint lacks ctx.pos"))?;
        if params.get(pos).shape() != [config.max_positions, d] {
            return Err(EalmError::format("ctx.pos has the wrong shape"));
        }
        Ok(FusionLayer {
            block: Block::bind(&params, "ctx.block", Self::dims(&config))?,
            ln: LayerNorm::bind(&params, "ctx.ln", d)?,
            mixer: Scorer::bind(&params, "mixer", 3 * d, d)?,
            fuser: Scorer::bind(&params, "fuser", 3 * d, d)?,
            config,
            params,
            manifest,
            seed,
            tokens_seen,
            class_emb,
            pos,
        })
    }

    pub fn num_entity_models(&self) -> usize {
        self.manifest.entity_types.len()
    }

    /// Causal one-layer encoding of `H^P` with the layer's own positions.
    pub fn encode_context_graph(&self, g: &mut Graph, store: &ParamStore, hp: Var, lengths: &[usize]) -> Var {
        let positions: Vec<usize> = lengths.iter().flat_map(|&n| 0..n).collect();
        let table = g.param(store, self.pos);
        let p = g.embedding(table, &positions);
        let x = g.add(hp, p);
        let mask = Rc::new(AttnMask::causal(lengths));
        let h = self.block.forward(g, store, x, &mask, self.config.dropout);
        self.ln.forward(g, store, h)
    }

    /// h^C for every position of one utterance, `[n, d]`.
    pub fn encode_context(&self, hp: &Tensor) -> Result<Tensor> {
        let n = hp.rows();
        if n > self.config.max_positions {
            return Err(EalmError::usage(format!(
                "context of {n} positions exceeds the fusion position table of {}",
                self.config.max_positions
            )));
        }
        let mut g = Graph::inference();
        let h = g.constant(hp.clone());
        let hc = self.encode_context_graph(&mut g, &self.params, h, &[n]);
        g.check_finite(hc, "context encoding")?;
        Ok(g.value(hc).clone())
    }

    /// Mixes one entity model's rows. `rows` is `[P * (k + 1), d]`, `hc` is
    /// `[P, d]`; returns `(pcontext [P, k + 1], o [P, d])`.
    pub fn mix(&self, class: usize, rows: &Tensor, hc: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = self.num_entity_models();
        if class == 0 || class > n {
            return Err(EalmError::usage(format!("entity class {class} outside 1..={n}")));
        }
        if rows.rows() != hc.rows() * (self.config.k + 1) {
            return Err(EalmError::usage(format!(
                "{} entity rows for {} positions with k = {}",
                rows.rows(),
                hc.rows(),
                self.config.k
            )));
        }
        let mut g = Graph::inference();
        let r = g.constant(rows.clone());
        let h = g.constant(hc.clone());
        let (pc, o) = self.mix_graph(&mut g, &self.params, class, r, h);
        g.check_finite(pc, "pcontext")?;
        Ok((g.value(pc).clone(), g.value(o).clone()))
    }

    /// Fuses `outputs` (`h^P` first, then one per entity model, each `[P, d]`).
    /// Returns `(pfusion [P, N + 1], h [P, d])`.
    pub fn fuse(&self, outputs: &[Tensor], hc: &Tensor) -> Result<(Tensor, Tensor)> {
        if outputs.len() != self.num_entity_models() + 1 {
            return Err(EalmError::usage(format!(
                "{} fusion inputs for {} entity models",
                outputs.len(),
                self.num_entity_models()
            )));
        }
        if outputs.iter().any(|o| o.shape() != hc.shape()) {
            return Err(EalmError::usage("fusion inputs must match the context shape"));
        }
        let mut g = Graph::inference();
        let vars: Vec<Var> = outputs.iter().map(|o| g.constant(o.clone())).collect();
        let h = g.constant(hc.clone());
        let (pf, out) = self.fuse_graph(&mut g, &self.params, &vars, h);
        g.check_finite(pf, "pfusion")?;
        Ok((g.value(pf).clone(), g.value(out).clone()))
    }

    fn class_rows(&self, g: &mut Graph, store: &ParamStore, class: usize, count: usize) -> Var {
        let w = g.param(store, self.class_emb);
        g.gather_rows(w, Rc::new(vec![class; count]))
    }

    /// Context mixing over `P` positions: `rows` is `[P * (k + 1), d]`, `hc` is
    /// `[P, d]`. Returns `(pcontext [P, k + 1], o [P, d])`.
    fn mix_graph(&self, g: &mut Graph, store: &ParamStore, class: usize, rows: Var, hc: Var) -> (Var, Var) {
        let m = self.config.k + 1;
        let p = g.shape(hc)[0];
        let rep = Rc::new((0..p).flat_map(|i| std::iter::repeat_n(i, m)).collect::<Vec<_>>());
        let hc_rep = g.gather_rows(hc, rep);
        let cls = self.class_rows(g, store, class, p * m);
        let x = g.concat_cols(&[rows, hc_rep, cls]);
        let s = self.mixer.forward(g, store, x, self.config.dropout);
        let s = g.reshape(s, vec![p, m]);
        let pcontext = g.softmax_rows(s);
        let o = g.group_weighted_sum(pcontext, rows);
        (pcontext, o)
    }

    /// Model fusion over `P` positions: `outputs[0]` is h^P, then one mixed output
    /// per entity model. Returns `(pfusion [P, N + 1], h^EALM [P, d])`.
    fn fuse_graph(&self, g: &mut Graph, store: &ParamStore, outputs: &[Var], hc: Var) -> (Var, Var) {
        let p = g.shape(hc)[0];
        let d = self.config.d_model;
        let scores: Vec<Var> = outputs
            .iter()
            .enumerate()
            .map(|(i, &o)| {
                let cls = self.class_rows(g, store, i, p);
                let x = g.concat_cols(&[o, cls, hc]);
                self.fuser.forward(g, store, x, self.config.dropout)
            })
            .collect();
        let s = if scores.len() == 1 { scores[0] } else { g.concat_cols(&scores) };
        let pfusion = g.softmax_rows(s);
        let stacked = if outputs.len() == 1 {
            outputs[0]
        } else {
            g.concat_cols(outputs)
        };
        let stacked = g.reshape(stacked, vec![p * outputs.len(), d]);
        let h = g.group_weighted_sum(pfusion, stacked);
        (pfusion, h)
    }

    fn forward_graph(&self, g: &mut Graph, store: &ParamStore, w_o: Var, batch: &[&FusionInputs]) -> FusionVars {
        let n_models = self.num_entity_models();
        let lengths: Vec<usize> = batch.iter().map(|b| b.tokens.len()).collect();
        let hp_t = concat_rows(batch.iter().map(|b| &b.hp));
        let hp = g.constant(hp_t);
        let hc = self.encode_context_graph(g, store, hp, &lengths);
        let mut outputs = vec![hp];
        let mut pcontext = Vec::with_capacity(n_models);
        for i in 0..n_models {
            let rows = g.constant(concat_rows(batch.iter().map(|b| &b.entity[i])));
            let rows = g.dropout(rows, self.config.entity_dropout);
            let (pc, o) = self.mix_graph(g, store, i + 1, rows, hc);
            pcontext.push(pc);
            outputs.push(o);
        }
        let (pfusion, h) = self.fuse_graph(g, store, &outputs, hc);
        let logits = g.matmul(h, w_o);
        FusionVars {
            hidden: h,
            logits,
            pfusion,
            pcontext,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(ModelKind::Fusion, &self.params);
        for (k, v) in self.config.to_kv().into_map() {
            c.set_meta(&format!("config.{k}"), v);
        }
        self.manifest.write(&mut c);
        c.set_meta("seed", self.seed);
        c.set_meta("tokens_seen", self.tokens_seen);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(ModelKind::Fusion)?;
        let kv = KvMap::from_map(c.meta.clone()).section("config");
        let config = FusionConfig::from_kv(&kv, FusionConfig::desk())?;
        Self::bind(
            config,
            c.to_store(),
            Manifest::read(c)?,
            c.meta_parse("seed")?,
            c.meta_parse("tokens_seen")?,
        )
    }
}

fn concat_rows<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for t in parts {
        rows += t.rows();
        cols = t.cols();
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![rows, cols], data).expect("row concat of equal-width tensors")
}

/// `Σ_l weights[l] · rows[l]` on plain values.
pub fn weighted_rows(weights: &[f64], rows: &Tensor) -> Result<Vec<f64>> {
    if weights.len() != rows.rows() {
        return Err(EalmError::usage(format!(
            "{} weights for {} rows",
            weights.len(),
            rows.rows()
        )));
    }
    let mut out = vec![0.0; rows.cols()];
    for (w, i) in weights.iter().zip(0..) {
        for (o, r) in out.iter_mut().zip(rows.row(i)) {
            *o += w * r;
        }
    }
    Ok(out)
}

/// Softmax of `h · W_o`.
pub fn output_distribution(h: &[f64], w_o: &Tensor) -> Vec<f64> {
    let v = w_o.cols();
    let mut logits = vec![0.0; v];
    for (hi, row) in h.iter().zip(0..) {
        for (l, w) in logits.iter_mut().zip(w_o.row(row)) {
            *l += hi * w;
        }
    }
    softmax_in_place(&mut logits);
    logits
}

/// One predicted position of a composed model.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    /// Display form of the token that follows this position, if known.
    pub token: String,
    pub pfusion: Vec<f64>,
    /// Per entity model, its `k + 1` context weights.
    pub pcontext: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrace {
    /// `pretrained` followed by entity types in manifest order.
    pub models: Vec<String>,
    pub k: usize,
    pub rows: Vec<TraceRow>,
}

impl FusionTrace {
    fn header(&self) -> String {
        let mut cols = vec!["token".to_string()];
        cols.extend(self.models.iter().map(|m| format!("pfusion.{m}")));
        for m in &self.models[1..] {
            cols.extend((0..=self.k).map(|l| format!("pcontext.{m}.{l}")));
        }
        cols.join("\t")
    }

    fn render(&self, fmt: impl Fn(f64) -> String) -> String {
        let mut s = self.header();
        s.push('\n');
        for r in &self.rows {
            let mut cols = vec![r.token.replace(['\t', '\n'], " ")];
            cols.extend(r.pfusion.iter().map(|&v| fmt(v)));
            for pc in &r.pcontext {
                cols.extend(pc.iter().map(|&v| fmt(v)));
            }
            s.push_str(&cols.join("\t"));
            s.push('\n');
        }
        s
    }

    /// Display table with values rounded to two decimals.
    pub fn to_tsv(&self) -> String {
        self.render(|v| format!("{v:.2}"))
    }

    /// Same table at full precision (shortest round-trip decimal).
    pub fn to_full_tsv(&self) -> String {
        self.render(|v| format!("{v:?}"))
    }

    /// Mean pfusion over all rows, per model.
    pub fn mean_pfusion(&self) -> Vec<f64> {
        let n = self.rows.len().max(1) as f64;
        (0..self.models.len())
            .map(|i| self.rows.iter().map(|r| r.pfusion[i]).sum::<f64>() / n)
            .collect()
    }
}

/// Pre-trained LM, entity models in manifest order, and the fusion layer.
#[derive(Debug, Clone)]
pub struct Ealm {
    pub pretrained: PretrainedLM,
    pub entities: Vec<EntityLM>,
    pub fusion: FusionLayer,
}

/// Per-utterance composed outputs.
#[derive(Debug, Clone)]
pub struct EalmOutput {
    /// `[n, d]` fused hidden states.
    pub hidden: Tensor,
    /// `[n, |V|]` next-token logits after each prefix.
    pub logits: Tensor,
    /// Softmax of `logits`.
    pub probs: Tensor,
    /// `[n, N + 1]`.
    pub pfusion: Tensor,
    /// Per entity model, `[n, k + 1]`.
    pub pcontext: Vec<Tensor>,
}

impl Ealm {
    /// Checks that the parts were built for each other.
    pub fn assemble(pretrained: PretrainedLM, entities: Vec<EntityLM>, fusion: FusionLayer) -> Result<Self> {
        let m = &fusion.manifest;
        if pretrained.vocab_hash != m.vocab_hash {
            return Err(EalmError::contract("vocabulary hash differs from the fusion manifest"));
        }
        if pretrained.shared_hash() != m.shared_embedding_hash {
            return Err(EalmError::contract("pre-trained embeddings differ from the fusion manifest"));
        }
        if pretrained.to_checkpoint().content_hash() != m.pretrained_hash {
            return Err(EalmError::contract("pre-trained checkpoint differs from the fusion manifest"));
        }
        if pretrained.config.d_model != fusion.config.d_model {
            return Err(EalmError::config("fusion d_model differs from the pre-trained LM"));
        }
        let types: Vec<&str> = entities.iter().map(|e| e.entity_type()).collect();
        if types != m.entity_types.iter().map(|s| s.as_str()).collect::<Vec<_>>() {
            return Err(EalmError::config(format!(
                "entity models {types:?} do not match manifest order {:?}",
                m.entity_types
            )));
        }
        for (e, h) in entities.iter().zip(&m.entity_hashes) {
            if e.shared_hash != m.shared_embedding_hash {
                return Err(EalmError::contract(format!(
                    "{} entity model uses different shared embeddings",
                    e.entity_type()
                )));
            }
            if e.config.k != fusion.config.k {
                return Err(EalmError::config(format!("{} entity model has a different k", e.entity_type())));
            }
            if &e.to_checkpoint().content_hash() != h {
                return Err(EalmError::contract(format!(
                    "{} entity checkpoint differs from the manifest; use swap to replace it",
                    e.entity_type()
                )));
            }
        }
        Ok(Ealm {
            pretrained,
            entities,
            fusion,
        })
    }

    /// Frozen inputs for `tokens`, cut to the shortest position table.
    pub fn inputs(&self, tokens: &[usize]) -> Result<FusionInputs> {
        compute_inputs(&self.pretrained, &self.entities, &self.fusion.config, tokens)
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<EalmOutput> {
        let inputs = self.inputs(tokens)?;
        self.forward_inputs(&inputs)
    }

    pub fn forward_inputs(&self, inputs: &FusionInputs) -> Result<EalmOutput> {
        let mut g = Graph::inference();
        let w_o = g.param(&self.pretrained.params, self.pretrained.output_embedding_id());
        let vars = self.fusion.forward_graph(&mut g, &self.fusion.params, w_o, &[inputs]);
        g.check_finite(vars.logits, "EALM logits")?;
        for (i, pc) in vars.pcontext.iter().enumerate() {
            g.check_finite(*pc, &format!("pcontext of {}", self.fusion.manifest.entity_types[i]))?;
        }
        let logits = g.value(vars.logits).clone();
        let mut probs = logits.clone();
        let v = probs.cols();
        for row in probs.data_mut().chunks_mut(v) {
            softmax_in_place(row);
        }
        Ok(EalmOutput {
            hidden: g.value(vars.hidden).clone(),
            logits,
            probs,
            pfusion: g.value(vars.pfusion).clone(),
            pcontext: vars.pcontext.iter().map(|&p| g.value(p).clone()).collect(),
        })
    }

    /// Distribution over the token after `tokens`, and its trace row.
    pub fn next_token(&self, tokens: &[usize]) -> Result<(Vec<f64>, TraceRow)> {
        let out = self.forward(tokens)?;
        let last = out.probs.rows() - 1;
        Ok((
            out.probs.row(last).to_vec(),
            TraceRow {
                token: String::new(),
                pfusion: out.pfusion.row(last).to_vec(),
                pcontext: out.pcontext.iter().map(|p| p.row(last).to_vec()).collect(),
            },
        ))
    }

    /// Negative log-likelihood of every token after the first.
    pub fn token_nlls(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let out = self.forward(tokens)?;
        let n = out.logits.rows();
        Ok((0..n - 1).map(|i| -log_softmax(out.logits.row(i))[tokens[i + 1]]).collect())
    }

    /// One row per predicted token of `tokens` (everything after `<s>`).
    pub fn trace(&self, tokens: &[usize], display: impl Fn(usize) -> String) -> Result<FusionTrace> {
        let out = self.forward(tokens)?;
        let n = out.probs.rows();
        let rows = (0..n - 1)
            .map(|i| TraceRow {
                token: display(tokens[i + 1]),
                pfusion: out.pfusion.row(i).to_vec(),
                pcontext: out.pcontext.iter().map(|p| p.row(i).to_vec()).collect(),
            })
            .collect();
        Ok(FusionTrace {
            models: self.fusion.manifest.model_names(),
            k: self.fusion.config.k,
            rows,
        })
    }

    /// Gradients of the mean token NLL over `batch` with respect to every
    /// fusion parameter, dropout off.
    pub fn fusion_gradients(&self, batch: &[Vec<usize>]) -> Result<Vec<(String, Tensor)>> {
        let inputs: Vec<FusionInputs> = batch
            .iter()
            .filter(|u| u.len() >= 2)
            .map(|u| self.inputs(u))
            .collect::<Result<_>>()?;
        if inputs.is_empty() {
            return Err(EalmError::EmptyBatch("no utterance with a predicted token".into()));
        }
        let items: Vec<&FusionInputs> = inputs.iter().collect();
        let mut g = Graph::deterministic();
        let w_o = g.constant(self.pretrained.params.get(self.pretrained.output_embedding_id()).clone());
        let vars = self.fusion.forward_graph(&mut g, &self.fusion.params, w_o, &items);
        let (targets, ignore) = next_token_targets(&items);
        let loss = g.cross_entropy(vars.logits, &targets, &ignore)?;
        g.backward(loss)?;
        Ok(g.param_grads(&self.fusion.params)?
            .into_iter()
            .map(|(id, t)| (self.fusion.params.name(id).to_string(), t))
            .collect())
    }

    /// Replaces one entity model. The fusion parameters are untouched; only
    /// the manifest hash of that component changes.
    pub fn swap_entity_model(&mut self, new: EntityLM) -> Result<()> {
        let idx = self
            .entities
            .iter()
            .position(|e| e.entity_type() == new.entity_type())
            .ok_or_else(|| EalmError::contract(format!("no {} entity model to replace", new.entity_type())))?;
        self.entities[idx].swap_compatible(&new)?;
        self.fusion.manifest.entity_hashes[idx] = new.to_checkpoint().content_hash();
        self.entities[idx] = new;
        Ok(())
    }
}

pub fn compute_inputs(
    pretrained: &PretrainedLM,
    entities: &[EntityLM],
    config: &FusionConfig,
    tokens: &[usize],
) -> Result<FusionInputs> {
    let n = tokens
        .len()
        .min(pretrained.config.max_positions)
        .min(config.max_positions);
    let tokens = &tokens[..n];
    let hp = pretrained.forward(tokens)?.hidden;
    let entity = entities
        .iter()
        .map(|e| e.context_states(tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok(FusionInputs {
        tokens: tokens.to_vec(),
        hp,
        entity,
    })
}

/// Next-token targets for stacked utterances; each last position is ignored.
fn next_token_targets(items: &[&FusionInputs]) -> (Vec<usize>, Vec<bool>) {
    let mut targets = Vec::new();
    let mut ignore = Vec::new();
    for it in items {
        let n = it.tokens.len();
        for i in 0..n {
            targets.push(if i + 1 < n { it.tokens[i + 1] } else { 0 });
            ignore.push(i + 1 == n);
        }
    }
    (targets, ignore)
}

/// Manifest describing `pretrained` and `entities` as they are now.
pub fn manifest_for(pretrained: &PretrainedLM, entities: &[EntityLM]) -> Manifest {
    Manifest {
        entity_types: entities.iter().map(|e| e.entity_type().to_string()).collect(),
        pretrained_hash: pretrained.to_checkpoint().content_hash(),
        entity_hashes: entities.iter().map(|e| e.to_checkpoint().content_hash()).collect(),
        vocab_hash: pretrained.vocab_hash.clone(),
        shared_embedding_hash: pretrained.shared_hash(),
    }
}

/// Trains only the fusion layer on `corpus`; every pre-trained and entity
/// tensor is frozen and verified bit-identical afterwards.
pub fn train_fusion(
    pretrained: &PretrainedLM,
    entities: &[EntityLM],
    corpus: &[Vec<usize>],
    config: FusionConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Ealm, TrainStats)> {
    if config.d_model != pretrained.config.d_model {
        return Err(EalmError::config("fusion d_model differs from the pre-trained LM"));
    }
    for e in entities {
        if e.shared_hash != pretrained.shared_hash() {
            return Err(EalmError::contract(format!(
                "{} entity model was not built from this pre-trained LM",
                e.entity_type()
            )));
        }
        if e.config.k != config.k {
            return Err(EalmError::config(format!("{} entity model has a different k", e.entity_type())));
        }
    }
    let manifest = manifest_for(pretrained, entities);
    let mut frozen_lm = pretrained.clone();
    frozen_lm.params.freeze_all();
    let inputs: Vec<FusionInputs> = corpus
        .iter()
        .filter(|u| u.len() >= 2)
        .map(|u| compute_inputs(pretrained, entities, &config, u))
        .collect::<Result<_>>()?;
    let mut fusion = FusionLayer::new(config, manifest, seed)?;
    let mut params = fusion.params.clone();
    let w_o_id = frozen_lm.output_embedding_id();
    let stats = run_training(&mut params, inputs.len(), train, seed, |g, store, batch| {
        let items: Vec<&FusionInputs> = batch.iter().map(|&i| &inputs[i]).collect();
        let w_o = g.param(&frozen_lm.params, w_o_id);
        let vars = fusion.forward_graph(g, store, w_o, &items);
        let (targets, ignore) = next_token_targets(&items);
        let count = ignore.iter().filter(|&&x| !x).count();
        Ok((g.cross_entropy(vars.logits, &targets, &ignore)?, count))
    })?;
    if !frozen_lm.params.bitwise_eq(&pretrained.params) {
        return Err(EalmError::contract("pre-trained parameters changed during fusion training"));
    }
    fusion.params = params;
    fusion.tokens_seen = stats.tokens_seen;
    let ealm = Ealm {
        pretrained: pretrained.clone(),
        entities: entities.to_vec(),
        fusion,
    };
    Ok((ealm, stats))
}
