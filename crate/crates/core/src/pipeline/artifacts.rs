use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{ExperimentConfig, ExperimentData, TestSet, TEST_SETS};
use crate::checkpoint::Checkpoint;
use crate::entity_lm::EntityLM;
use crate::error::{EalmError, Result};
use crate::fusion::{Ealm, FusionLayer};
use crate::pretrained_lm::PretrainedLM;
use crate::textdata::{load_corpus, save_corpus, Catalogue, LabeledUtterance, Vocabulary};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const FUSION_FILE: &str = "fusion.ckpt";
/// Catalogue partitions written next to the full catalogue.
pub const PARTITIONS: [&str; 4] = ["seen", "fusion_only", "tail", "new"];

/// Reads inputs from `data_dir` and writes outputs to `out_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

pub fn catalogue_file(entity_type: &str, partition: Option<&str>) -> String {
    match partition {
        Some(p) => format!("catalogue.{entity_type}.{p}.tsv"),
        None => format!("catalogue.{entity_type}.tsv"),
    }
}

pub fn entity_file(entity_type: &str) -> String {
    format!("entity.{entity_type}.ckpt")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Artifacts {
    pub fn new(out_dir: impl Into<PathBuf>, data_dir: Option<PathBuf>) -> Result<Self> {
        let out_dir = out_dir.into();
        std::fs::create_dir_all(&out_dir).map_err(|e| EalmError::io(&out_dir, e))?;
        Ok(Artifacts {
            data_dir: data_dir.unwrap_or_else(|| out_dir.clone()),
            out_dir,
        })
    }

    pub fn input(&self, name: &str) -> Result<PathBuf> {
        for dir in [&self.data_dir, &self.out_dir] {
            let p = dir.join(name);
            if p.exists() {
                return Ok(p);
            }
        }
        Err(EalmError::usage(format!(
            "missing artifact {name} in {}",
            self.data_dir.display()
        )))
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn write(&self, name: &str, content: &str) -> Result<PathBuf> {
        let p = self.output(name);
        std::fs::write(&p, content).map_err(|e| EalmError::io(&p, e))?;
        Ok(p)
    }

    pub fn save_data(&self, data: &ExperimentData, seed: u64) -> Result<()> {
        for part in &data.world.partitions {
            let ty = &part.entity_type;
            let header = format!("# seed={seed}\n");
            self.write(&catalogue_file(ty, None), &(header.clone() + &part.catalogue.to_text()))?;
            let slices = [&part.seen, &part.fusion_only, &part.tail, &part.new];
            for (name, entries) in PARTITIONS.iter().zip(slices) {
                let c = Catalogue::new(ty.clone(), entries.clone())?;
                self.write(&catalogue_file(ty, Some(name)), &(header.clone() + &c.to_text()))?;
            }
        }
        self.save_corpus("corpus.pretrain", &data.pretrain_corpus)?;
        self.save_corpus("corpus.fusion", &data.fusion_corpus)?;
        for (name, utts) in &data.test_sets {
            self.save_corpus(&format!("test.{name}"), utts)?;
        }
        Ok(())
    }

    fn save_corpus(&self, stem: &str, corpus: &[LabeledUtterance]) -> Result<()> {
        save_corpus(
            corpus,
            &self.output(&format!("{stem}.txt")),
            &self.output(&format!("{stem}.spans.tsv")),
        )
    }

    pub fn load_corpus(&self, stem: &str) -> Result<Vec<LabeledUtterance>> {
        let text = self.input(&format!("{stem}.txt"))?;
        let spans = self.input(&format!("{stem}.spans.tsv")).ok();
        load_corpus(&text, spans.as_deref())
    }

    pub fn load_catalogue(&self, entity_type: &str, partition: Option<&str>) -> Result<Catalogue> {
        Catalogue::load(entity_type, &self.input(&catalogue_file(entity_type, partition))?)
    }

    pub fn load_catalogues(&self, cfg: &ExperimentConfig) -> Result<Vec<Catalogue>> {
        cfg.entity_types().iter().map(|t| self.load_catalogue(t, None)).collect()
    }

    pub fn load_vocab(&self) -> Result<Vocabulary> {
        let p = self.input(VOCAB_FILE)?;
        let text = std::fs::read_to_string(&p).map_err(|e| EalmError::io(&p, e))?;
        Vocabulary::from_text(&text)
    }

    pub fn save_vocab(&self, vocab: &Vocabulary) -> Result<PathBuf> {
        self.write(VOCAB_FILE, &vocab.to_text())
    }

    pub fn load_checkpoint(&self, name: &str) -> Result<Checkpoint> {
        Checkpoint::load(&self.input(name)?)
    }

    pub fn save_checkpoint(&self, name: &str, c: &Checkpoint) -> Result<PathBuf> {
        let p = self.output(name);
        c.save(&p)?;
        Ok(p)
    }

    pub fn load_pretrained(&self) -> Result<PretrainedLM> {
        PretrainedLM::from_checkpoint(&self.load_checkpoint(PRETRAINED_FILE)?)
    }

    pub fn load_entities(&self, cfg: &ExperimentConfig) -> Result<Vec<EntityLM>> {
        cfg.entity_types()
            .iter()
            .map(|t| EntityLM::from_checkpoint(&self.load_checkpoint(&entity_file(t))?))
            .collect()
    }

    pub fn load_ealm(&self, cfg: &ExperimentConfig) -> Result<Ealm> {
        let fusion = FusionLayer::from_checkpoint(&self.load_checkpoint(FUSION_FILE)?)?;
        Ealm::assemble(self.load_pretrained()?, self.load_entities(cfg)?, fusion)
    }

    pub fn load_tests(&self, vocab: &Vocabulary, max_len: usize) -> Result<Vec<TestSet>> {
        TEST_SETS
            .iter()
            .map(|name| Ok(TestSet::new(*name, vocab, &self.load_corpus(&format!("test.{name}"))?, max_len)))
            .collect()
    }

    /// `name<TAB>value` run record: seed, config and the hash of each listed file.
    pub fn write_run_record(&self, stage: &str, cfg: &ExperimentConfig, files: &[PathBuf]) -> Result<()> {
        let mut s = String::from("key\tvalue\n");
        s.push_str(&format!("stage\t{stage}\nseed\t{}\n", cfg.seed));
        s.push_str(&format!("config_sha256\t{}\n", sha256_hex(cfg.to_kv().to_text().as_bytes())));
        for f in files {
            let bytes = std::fs::read(f).map_err(|e| EalmError::io(f, e))?;
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            s.push_str(&format!("sha256:{name}\t{}\n", sha256_hex(&bytes)));
        }
        self.write(&format!("run.{stage}.tsv"), &s)?;
        Ok(())
    }
}

pub fn path_of(p: &Path) -> String {
    p.display().to_string()
}
