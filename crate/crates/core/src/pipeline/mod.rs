//! Three-stage training, evaluation, hot-swap and catalogue-fraction
//! experiments, plus the artifact layout used by the CLI.

pub mod artifacts;
mod config;
mod eval;

pub use artifacts::Artifacts;
pub use config::ExperimentConfig;
pub use eval::{
    evaluate_perplexity, nll_sidecar, relative_reduction, reports_tsv, EvalReport, LanguageModel, SliceReport,
    TestSet,
};

use crate::entity_lm::{retrain_with_additions, train_entity_model, EntityLM, UnknownPolicy};
use crate::error::{EalmError, Result};
use crate::fusion::{train_fusion, Ealm, FusionTrace};
use crate::pretrained_lm::{pretrain, PretrainedLM};
use crate::textdata::synth::World;
use crate::textdata::{generate_corpus, tokenize, tokenize_all, train_bpe, Catalogue, LabeledUtterance, Vocabulary};

pub const TEST_SETS: [&str; 4] = ["general", "seen", "tail", "new"];

/// Generated world, training corpora and labeled test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub world: World,
    pub pretrain_corpus: Vec<LabeledUtterance>,
    pub fusion_corpus: Vec<LabeledUtterance>,
    /// `(name, utterances)` in [`TEST_SETS`] order.
    pub test_sets: Vec<(String, Vec<LabeledUtterance>)>,
}

impl ExperimentData {
    pub fn test_set(&self, name: &str) -> Option<&[LabeledUtterance]> {
        self.test_sets.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

/// Builds the synthetic world and every text set from the config alone.
///
/// The pre-training corpus only uses *seen* entities; the fusion corpus is a
/// separate draw over seen and fusion-only entities. Test sets: `general`
/// follows the training distribution, `seen`/`tail`/`new` fill every slot
/// from the corresponding entity partition.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let world = World::generate(&cfg.world, cfg.stage_seed("world"))?;
    let templates = world.templates();
    let seen = world.seen_catalogues()?;
    let pretrain_corpus = generate_corpus(
        &templates,
        &seen,
        cfg.corpus_utterances,
        cfg.slot_rate,
        cfg.stage_seed("corpus"),
    )?;
    let n_fusion = ((cfg.corpus_utterances as f64 * cfg.fusion_fraction).round() as usize).max(1);
    let fusion_corpus = generate_corpus(
        &templates,
        &world.fusion_catalogues()?,
        n_fusion,
        cfg.slot_rate,
        cfg.stage_seed("corpus.fusion"),
    )?;
    let n = cfg.test_utterances;
    let slot_templates = world.slot_templates.clone();
    let test_sets = vec![
        (
            "general".to_string(),
            generate_corpus(&templates, &seen, n, cfg.slot_rate, cfg.stage_seed("test.general"))?,
        ),
        (
            "seen".to_string(),
            generate_corpus(&slot_templates, &seen, n, 1.0, cfg.stage_seed("test.seen"))?,
        ),
        (
            "tail".to_string(),
            generate_corpus(&slot_templates, &world.tail_catalogues()?, n, 1.0, cfg.stage_seed("test.tail"))?,
        ),
        (
            "new".to_string(),
            generate_corpus(&slot_templates, &world.new_catalogues()?, n, 1.0, cfg.stage_seed("test.new"))?,
        ),
    ];
    Ok(ExperimentData {
        world,
        pretrain_corpus,
        fusion_corpus,
        test_sets,
    })
}

pub fn train_tokenizer(cfg: &ExperimentConfig, corpus: &[LabeledUtterance]) -> Result<Vocabulary> {
    let lines: Vec<&str> = corpus.iter().map(|u| u.text.as_str()).collect();
    train_bpe(&lines, cfg.vocab_symbols)
}

fn token_ids(vocab: &Vocabulary, corpus: &[LabeledUtterance], max_len: usize) -> Vec<Vec<usize>> {
    tokenize_all(vocab, corpus, max_len).into_iter().map(|u| u.ids).collect()
}

pub fn stage_pretrain(cfg: &ExperimentConfig, vocab: &Vocabulary, corpus: &[LabeledUtterance]) -> Result<PretrainedLM> {
    let config = crate::pretrained_lm::PretrainedConfig {
        vocab_size: vocab.len(),
        ..cfg.pretrained
    };
    let ids = token_ids(vocab, corpus, cfg.max_len);
    let (lm, stats) = pretrain(&ids, config, &vocab.content_hash(), &cfg.pretrain, cfg.stage_seed("pretrain"))?;
    log::info!(
        "pretrained: {} steps, {} tokens, final loss {:.4}",
        stats.optimizer_steps,
        stats.tokens_seen,
        stats.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(lm)
}

pub fn stage_entity(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    pretrained: &PretrainedLM,
    catalogue: &Catalogue,
    salt: &str,
) -> Result<EntityLM> {
    let shared = pretrained.shared_embeddings();
    let config = cfg.entity_config(&catalogue.entity_type);
    let seed = cfg.stage_seed(&format!("entity.{}.{salt}", catalogue.entity_type));
    let (lm, stats) = train_entity_model(catalogue, vocab, &shared, &pretrained.shared_hash(), &config, &cfg.entity_train, seed)?;
    log::info!(
        "entity {}: {} steps, final loss {:.4}",
        catalogue.entity_type,
        stats.optimizer_steps,
        stats.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(lm)
}

pub fn stage_fusion(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    pretrained: &PretrainedLM,
    entities: &[EntityLM],
    corpus: &[LabeledUtterance],
) -> Result<Ealm> {
    let ids = token_ids(vocab, corpus, cfg.max_len);
    let (ealm, stats) = train_fusion(pretrained, entities, &ids, cfg.fusion, &cfg.fusion_train, cfg.stage_seed("fusion"))?;
    log::info!(
        "fusion: {} steps, final loss {:.4}",
        stats.optimizer_steps,
        stats.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(ealm)
}

pub fn test_sets(cfg: &ExperimentConfig, vocab: &Vocabulary, data: &ExperimentData) -> Vec<TestSet> {
    data.test_sets
        .iter()
        .map(|(name, utts)| TestSet::new(name.clone(), vocab, utts, cfg.max_len))
        .collect()
}

/// Every artifact of a full in-memory run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub data: ExperimentData,
    pub vocab: Vocabulary,
    pub ealm: Ealm,
    pub tests: Vec<TestSet>,
}

impl Experiment {
    pub fn run(cfg: &ExperimentConfig) -> Result<Self> {
        let data = generate_data(cfg)?;
        let vocab = train_tokenizer(cfg, &data.pretrain_corpus)?;
        let pretrained = stage_pretrain(cfg, &vocab, &data.pretrain_corpus)?;
        let entities = data
            .world
            .catalogues()
            .iter()
            .map(|c| stage_entity(cfg, &vocab, &pretrained, c, "full"))
            .collect::<Result<Vec<_>>>()?;
        let ealm = stage_fusion(cfg, &vocab, &pretrained, &entities, &data.fusion_corpus)?;
        let tests = test_sets(cfg, &vocab, &data);
        Ok(Experiment {
            config: cfg.clone(),
            data,
            vocab,
            ealm,
            tests,
        })
    }

    pub fn test(&self, name: &str) -> Result<&TestSet> {
        find_test(&self.tests, name)
    }

    /// Swap experiment on the configured type with its new-entity list.
    pub fn swap(&self) -> Result<SwapOutcome> {
        let ty = &self.config.swap_type;
        let part = self
            .data
            .world
            .partition(ty)
            .ok_or_else(|| EalmError::config(format!("no entity type {ty}")))?;
        let additions: Vec<String> = part.new.iter().map(|e| e.text.clone()).collect();
        run_swap_experiment(&self.config, &self.vocab, &self.ealm, &part.catalogue, &additions, &self.tests)
    }

    pub fn fraction_study(&self, sets: &[&str]) -> Result<FractionStudy> {
        run_catalogue_fraction_study(
            &self.config,
            &self.vocab,
            &self.ealm.pretrained,
            &self.data.world.catalogues(),
            &self.data.fusion_corpus,
            &self.tests,
            sets,
        )
    }

    /// Pre-trained and EALM reports for every test set.
    pub fn evaluate(&self, ealm: &Ealm) -> Result<(Vec<EvalReport>, Vec<EvalReport>)> {
        let base = self
            .tests
            .iter()
            .map(|t| evaluate_perplexity(&ealm.pretrained, "pretrained", t))
            .collect::<Result<Vec<_>>>()?;
        let comp = self
            .tests
            .iter()
            .map(|t| evaluate_perplexity(ealm, "ealm", t))
            .collect::<Result<Vec<_>>>()?;
        Ok((base, comp))
    }
}

/// Outcome of retraining one entity model with new entities and swapping it
/// into a trained system.
#[derive(Debug, Clone)]
pub struct SwapOutcome {
    pub entity_type: String,
    pub added: usize,
    pub skipped: Vec<String>,
    /// Old catalogue plus the placed additions.
    pub catalogue: Catalogue,
    pub pretrained: Vec<EvalReport>,
    pub before: Vec<EvalReport>,
    pub after: Vec<EvalReport>,
    pub swapped: Ealm,
}

impl SwapOutcome {
    fn ppl(reports: &[EvalReport], set: &str) -> f64 {
        reports.iter().find(|r| r.set == set).map_or(f64::NAN, |r| r.perplexity)
    }

    /// Relative reduction vs the pre-trained LM on `set`, before and after.
    pub fn reductions(&self, set: &str) -> (f64, f64) {
        let base = Self::ppl(&self.pretrained, set);
        (
            relative_reduction(base, Self::ppl(&self.before, set)),
            relative_reduction(base, Self::ppl(&self.after, set)),
        )
    }

    /// Post-swap over pre-swap EALM perplexity on `set`, minus one.
    pub fn relative_degradation(&self, set: &str) -> f64 {
        Self::ppl(&self.after, set) / Self::ppl(&self.before, set) - 1.0
    }

    pub fn to_tsv(&self, seed: u64) -> String {
        let mut s = String::from(
            "set\tpretrained_perplexity\tbefore_perplexity\tafter_perplexity\treduction_before\treduction_after\tseed\tpretrained_sha256\tbefore_sha256\tafter_sha256\n",
        );
        for set in TEST_SETS {
            let (rb, ra) = self.reductions(set);
            let find = |v: &[EvalReport]| v.iter().find(|r| r.set == set).map(|r| r.checkpoint_hash.clone());
            s.push_str(&format!(
                "{set}\t{:?}\t{:?}\t{:?}\t{rb:?}\t{ra:?}\t{seed}\t{}\t{}\t{}\n",
                Self::ppl(&self.pretrained, set),
                Self::ppl(&self.before, set),
                Self::ppl(&self.after, set),
                find(&self.pretrained).unwrap_or_default(),
                find(&self.before).unwrap_or_default(),
                find(&self.after).unwrap_or_default(),
            ));
        }
        s
    }
}

fn find_test<'a>(tests: &'a [TestSet], name: &str) -> Result<&'a TestSet> {
    tests
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| EalmError::usage(format!("no test set {name}")))
}

/// Retrains the entity model of `catalogue`'s type with `additions` at top
/// popularity and swaps it in without touching the fusion layer.
pub fn run_swap_experiment(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    ealm: &Ealm,
    catalogue: &Catalogue,
    additions: &[String],
    tests: &[TestSet],
) -> Result<SwapOutcome> {
    let ty = &catalogue.entity_type;
    let pretrained = &ealm.pretrained;
    let retrained = retrain_with_additions(
        catalogue,
        additions,
        cfg.swap_top_fraction,
        vocab,
        &pretrained.shared_embeddings(),
        &pretrained.shared_hash(),
        &cfg.entity_config(ty),
        &cfg.entity_train,
        cfg.stage_seed(&format!("entity.{ty}.full")),
        UnknownPolicy::Skip,
    )?;
    let eval_all = |m: &dyn LanguageModel, name: &str| -> Result<Vec<EvalReport>> {
        tests.iter().map(|t| evaluate_perplexity(m, name, t)).collect()
    };
    let base = eval_all(pretrained, "pretrained")?;
    let before = eval_all(ealm, "ealm")?;
    let mut swapped = ealm.clone();
    swapped.swap_entity_model(retrained.model)?;
    let after = eval_all(&swapped, "ealm-swapped")?;
    Ok(SwapOutcome {
        entity_type: ty.clone(),
        added: additions.len() - retrained.skipped.len(),
        skipped: retrained.skipped,
        catalogue: retrained.catalogue,
        pretrained: base,
        before,
        after,
        swapped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractionRow {
    /// Catalogue fraction of the swapped-in entity models.
    pub fraction: f64,
    /// `trained` for the fusion-training models, `retrained` for a second
    /// seed at the same fraction, `swapped` otherwise.
    pub variant: String,
    pub set: String,
    pub pretrained_perplexity: f64,
    pub perplexity: f64,
    pub relative_reduction: f64,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FractionStudy {
    pub rows: Vec<FractionRow>,
    /// Pre-trained reports first, then one report per row in row order.
    pub reports: Vec<EvalReport>,
}

impl FractionStudy {
    pub fn reduction(&self, fraction: f64, variant: &str, set: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.fraction == fraction && r.variant == variant && r.set == set)
            .map(|r| r.relative_reduction)
    }

    /// Reductions on `set` for each fraction in ascending order, using the
    /// fusion-training models at the smallest fraction.
    pub fn series(&self, set: &str) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.set == set && r.variant != "retrained")
            .map(|r| (r.fraction, r.relative_reduction))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }

    pub fn to_tsv(&self, seed: u64) -> String {
        let mut s = String::from(
            "fraction\tvariant\tset\tpretrained_perplexity\tperplexity\trelative_reduction\tseed\tcheckpoint_sha256\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:?}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{seed}\t{}\n",
                r.fraction, r.variant, r.set, r.pretrained_perplexity, r.perplexity, r.relative_reduction, r.checkpoint_hash
            ));
        }
        s
    }
}

/// Trains entity models on the top fraction of every catalogue, fits the
/// fusion layer with the smallest fraction's models, then swaps in each
/// larger fraction (and a second-seed retrain of the smallest) and reports
/// reductions against the pre-trained LM on `sets`.
pub fn run_catalogue_fraction_study(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    pretrained: &PretrainedLM,
    catalogues: &[Catalogue],
    fusion_corpus: &[LabeledUtterance],
    tests: &[TestSet],
    sets: &[&str],
) -> Result<FractionStudy> {
    let mut fractions = cfg.fractions.clone();
    if fractions.is_empty() {
        return Err(EalmError::config("no catalogue fractions"));
    }
    fractions.sort_by(|a, b| a.total_cmp(b));
    fractions.dedup();
    let models_at = |f: f64, salt: &str| -> Result<Vec<EntityLM>> {
        catalogues
            .iter()
            .map(|c| stage_entity(cfg, vocab, pretrained, &c.top_fraction(f)?, salt))
            .collect()
    };
    let smallest = fractions[0];
    let base_models = models_at(smallest, &format!("fraction.{smallest}"))?;
    let fused = stage_fusion(cfg, vocab, pretrained, &base_models, fusion_corpus)?;
    let base: Vec<EvalReport> = sets
        .iter()
        .map(|s| evaluate_perplexity(pretrained, "pretrained", find_test(tests, s)?))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut reports = base.clone();
    let mut push = |ealm: &Ealm, fraction: f64, variant: &str| -> Result<()> {
        for (s, b) in sets.iter().zip(&base) {
            let r = evaluate_perplexity(ealm, &format!("ealm.{fraction:?}.{variant}"), find_test(tests, s)?)?;
            rows.push(FractionRow {
                fraction,
                variant: variant.to_string(),
                set: s.to_string(),
                pretrained_perplexity: b.perplexity,
                perplexity: r.perplexity,
                relative_reduction: relative_reduction(b.perplexity, r.perplexity),
                checkpoint_hash: r.checkpoint_hash.clone(),
            });
            reports.push(r);
        }
        Ok(())
    };
    push(&fused, smallest, "trained")?;
    for &f in &fractions[1..] {
        let mut swapped = fused.clone();
        for m in models_at(f, &format!("fraction.{f}"))? {
            swapped.swap_entity_model(m)?;
        }
        push(&swapped, f, "swapped")?;
    }
    let mut retrained = fused.clone();
    for m in models_at(smallest, &format!("fraction.{smallest}.retrain"))? {
        retrained.swap_entity_model(m)?;
    }
    push(&retrained, smallest, "retrained")?;
    Ok(FractionStudy { rows, reports })
}

/// Fusion trace of one utterance.
pub fn emit_trace(ealm: &Ealm, vocab: &Vocabulary, text: &str, max_len: usize) -> Result<FusionTrace> {
    let unknown = vocab.unknown_chars(text);
    if !unknown.is_empty() {
        return Err(EalmError::config(format!("trace utterance has unknown characters {unknown:?}")));
    }
    let (u, _) = tokenize(vocab, &LabeledUtterance::plain(text), max_len);
    if u.ids.len() < 2 {
        return Err(EalmError::usage("trace utterance has no tokens"));
    }
    ealm.trace(&u.ids, |id| vocab.display(id))
}
