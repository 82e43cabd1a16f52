use std::path::Path;

use crate::entity_lm::EntityConfig;
use crate::error::{EalmError, Result};
use crate::fusion::FusionConfig;
use crate::kv::KvMap;
use crate::pretrained_lm::PretrainedConfig;
use crate::textdata::synth::{EntityTypeConfig, WorldConfig};
use crate::train::TrainConfig;

/// Everything a desk-scale experiment needs, read from `key = value` text.
///
/// Stage sections use dotted prefixes: `pretrained.*`, `pretrain.*`,
/// `entity.*`, `entity_train.*`, `fusion.*`, `fusion_train.*`, and
/// `world.<type>.*` per entity type.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub corpus_utterances: usize,
    pub slot_rate: f64,
    /// Size of the fusion-training corpus relative to the pre-training corpus.
    pub fusion_fraction: f64,
    pub max_len: usize,
    /// Symbol inventory for BPE, specials excluded.
    pub vocab_symbols: usize,
    pub test_utterances: usize,
    pub pretrained: PretrainedConfig,
    pub pretrain: TrainConfig,
    pub entity: EntityConfig,
    pub entity_train: TrainConfig,
    pub fusion: FusionConfig,
    pub fusion_train: TrainConfig,
    pub swap_type: String,
    pub swap_top_fraction: f64,
    /// Allowed relative increase of general-set perplexity after a swap.
    pub swap_budget: f64,
    pub fractions: Vec<f64>,
    /// Tolerance, in reduction points, for comparisons across retrains.
    pub noise_band: f64,
    pub trace_utterance: String,
    /// Directory holding artifacts of earlier stages; defaults to the output dir.
    pub data_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pretrain = TrainConfig {
            epochs: 8,
            batch_size: 16,
            grad_accum: 2,
            ..TrainConfig::default()
        };
        let entity_train = TrainConfig {
            epochs: 4,
            batch_size: 32,
            grad_accum: 2,
            ..TrainConfig::default()
        };
        let fusion_train = TrainConfig {
            epochs: 8,
            batch_size: 16,
            grad_accum: 2,
            ..TrainConfig::default()
        };
        ExperimentConfig {
            seed: 1,
            world: WorldConfig::default(),
            corpus_utterances: 8000,
            slot_rate: 0.8,
            fusion_fraction: 0.08,
            max_len: 32,
            vocab_symbols: 540,
            test_utterances: 300,
            pretrained: PretrainedConfig::desk(0),
            pretrain,
            entity: EntityConfig {
                samples: 20000,
                ..EntityConfig::desk("entity")
            },
            entity_train,
            fusion: FusionConfig::desk(),
            fusion_train,
            swap_type: "song".into(),
            swap_top_fraction: 0.05,
            swap_budget: 0.02,
            fractions: vec![0.25, 0.5, 1.0],
            noise_band: 0.02,
            trace_utterance: String::new(),
            data_dir: None,
        }
    }
}

fn parse_list(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| EalmError::config(format!("bad number {s:?} in list")))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvMap::load(path)?)
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = ExperimentConfig::default();
        let mut world = d.world.clone();
        world.tail_fraction = kv.get_or("world.tail_fraction", world.tail_fraction)?;
        world.fusion_only_fraction = kv.get_or("world.fusion_only_fraction", world.fusion_only_fraction)?;
        if let Some(types) = kv.raw("world.types") {
            let names: Vec<&str> = types.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            world.types = names
                .iter()
                .map(|n| {
                    world
                        .types
                        .iter()
                        .find(|t| t.name == *n)
                        .cloned()
                        .unwrap_or(EntityTypeConfig {
                            name: n.to_string(),
                            pool_size: 100,
                            min_words: 2,
                            max_words: 2,
                            catalogue_size: 500,
                            new_entities: 25,
                        })
                })
                .collect();
        }
        for t in &mut world.types {
            let s = kv.section(&format!("world.{}", t.name));
            t.pool_size = s.get_or("pool_size", t.pool_size)?;
            t.min_words = s.get_or("min_words", t.min_words)?;
            t.max_words = s.get_or("max_words", t.max_words)?;
            t.catalogue_size = s.get_or("catalogue_size", t.catalogue_size)?;
            t.new_entities = s.get_or("new_entities", t.new_entities)?;
        }
        let c = ExperimentConfig {
            seed: kv.get_or("seed", d.seed)?,
            world,
            corpus_utterances: kv.get_or("corpus_utterances", d.corpus_utterances)?,
            slot_rate: kv.get_or("slot_rate", d.slot_rate)?,
            fusion_fraction: kv.get_or("fusion_fraction", d.fusion_fraction)?,
            max_len: kv.get_or("max_len", d.max_len)?,
            vocab_symbols: kv.get_or("vocab_symbols", d.vocab_symbols)?,
            test_utterances: kv.get_or("test_utterances", d.test_utterances)?,
            pretrained: PretrainedConfig::from_kv(&kv.section("pretrained"), PretrainedConfig { vocab_size: 1, ..d.pretrained })?,
            pretrain: TrainConfig::from_kv(&kv.section("pretrain"), d.pretrain)?,
            entity: EntityConfig::from_kv(&kv.section("entity"), d.entity)?,
            entity_train: TrainConfig::from_kv(&kv.section("entity_train"), d.entity_train)?,
            fusion: FusionConfig::from_kv(&kv.section("fusion"), d.fusion)?,
            fusion_train: TrainConfig::from_kv(&kv.section("fusion_train"), d.fusion_train)?,
            swap_type: kv.get_or("swap.entity_type", d.swap_type)?,
            swap_top_fraction: kv.get_or("swap.top_fraction", d.swap_top_fraction)?,
            swap_budget: kv.get_or("swap.budget", d.swap_budget)?,
            fractions: match kv.raw("fraction_study.fractions") {
                Some(raw) => parse_list(raw)?,
                None => d.fractions,
            },
            noise_band: kv.get_or("fraction_study.noise_band", d.noise_band)?,
            trace_utterance: kv.get_or("trace.utterance", d.trace_utterance)?,
            data_dir: kv.raw("data_dir").map(String::from),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fusion_fraction > 0.0 && self.fusion_fraction <= 1.0) {
            return Err(EalmError::config("fusion_fraction must be in (0, 1]"));
        }
        if self.fractions.is_empty() || self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(EalmError::config("catalogue fractions must be in (0, 1]"));
        }
        if self.max_len < 2 || self.max_len > self.pretrained.max_positions {
            return Err(EalmError::config("max_len must be in 2..=pretrained.max_positions"));
        }
        if self.fusion.max_positions < self.max_len {
            return Err(EalmError::config("fusion.max_positions must cover max_len"));
        }
        if self.fusion.d_model != self.pretrained.d_model || self.entity.d_model != self.pretrained.d_model {
            return Err(EalmError::config("all models must share the pre-trained d_model"));
        }
        if self.fusion.k != self.entity.k {
            return Err(EalmError::config("fusion.k must equal entity.k"));
        }
        if !self.world.types.iter().any(|t| t.name == self.swap_type) {
            return Err(EalmError::config(format!("swap type {} is not a world type", self.swap_type)));
        }
        Ok(())
    }

    /// Inverse of [`ExperimentConfig::from_kv`].
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("seed", self.seed);
        kv.set("world.tail_fraction", self.world.tail_fraction);
        kv.set("world.fusion_only_fraction", self.world.fusion_only_fraction);
        kv.set("world.types", self.entity_types().join(","));
        for t in &self.world.types {
            let p = format!("world.{}", t.name);
            kv.set(format!("{p}.pool_size"), t.pool_size);
            kv.set(format!("{p}.min_words"), t.min_words);
            kv.set(format!("{p}.max_words"), t.max_words);
            kv.set(format!("{p}.catalogue_size"), t.catalogue_size);
            kv.set(format!("{p}.new_entities"), t.new_entities);
        }
        kv.set("corpus_utterances", self.corpus_utterances);
        kv.set("slot_rate", self.slot_rate);
        kv.set("fusion_fraction", self.fusion_fraction);
        kv.set("max_len", self.max_len);
        kv.set("vocab_symbols", self.vocab_symbols);
        kv.set("test_utterances", self.test_utterances);
        kv.merge_prefixed("pretrained", &self.pretrained.to_kv());
        kv.merge_prefixed("pretrain", &self.pretrain.to_kv());
        kv.merge_prefixed("entity", &self.entity.to_kv());
        kv.merge_prefixed("entity_train", &self.entity_train.to_kv());
        kv.merge_prefixed("fusion", &self.fusion.to_kv());
        kv.merge_prefixed("fusion_train", &self.fusion_train.to_kv());
        kv.set("swap.entity_type", &self.swap_type);
        kv.set("swap.top_fraction", self.swap_top_fraction);
        kv.set("swap.budget", self.swap_budget);
        let fr: Vec<String> = self.fractions.iter().map(|f| f.to_string()).collect();
        kv.set("fraction_study.fractions", fr.join(","));
        kv.set("fraction_study.noise_band", self.noise_band);
        kv.set("trace.utterance", &self.trace_utterance);
        if let Some(d) = &self.data_dir {
            kv.set("data_dir", d);
        }
        kv
    }

    /// Entity config for one type.
    pub fn entity_config(&self, entity_type: &str) -> EntityConfig {
        EntityConfig {
            entity_type: entity_type.to_string(),
            ..self.entity.clone()
        }
    }

    /// Seed of a pipeline stage, derived from the master seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let salt = stage.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        });
        crate::train::mix_seed(self.seed, salt)
    }

    pub fn entity_types(&self) -> Vec<String> {
        self.world.types.iter().map(|t| t.name.clone()).collect()
    }
}
