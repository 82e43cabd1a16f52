mod common;

use common::*;
use ealm::kv::KvMap;
use ealm::pipeline::*;
use ealm::Result;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::load(&tiny_config_path()).unwrap()
}

/// Predicts every token with probability 1/|V|.
struct Uniform {
    vocab: usize,
    hash: String,
}

impl LanguageModel for Uniform {
    fn token_nlls(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(vec![(self.vocab as f64).ln(); tokens.len() - 1])
    }
    fn vocab_hash(&self) -> &str {
        &self.hash
    }
    fn checkpoint_hash(&self) -> String {
        "uniform".into()
    }
    fn kind(&self) -> &'static str {
        "uniform"
    }
}

#[test]
fn uniform_model_has_vocabulary_size_perplexity() {
    let cfg = tiny();
    let data = generate_data(&cfg).unwrap();
    let vocab = train_tokenizer(&cfg, &data.pretrain_corpus).unwrap();
    let tests = test_sets(&cfg, &vocab, &data);
    let m = Uniform {
        vocab: vocab.len(),
        hash: vocab.content_hash(),
    };
    for t in &tests {
        let r = evaluate_perplexity(&m, "uniform", t).unwrap();
        assert!((r.perplexity - vocab.len() as f64).abs() < 1e-9 * vocab.len() as f64, "{}", t.name);
        for s in &r.slices {
            assert!((s.perplexity - vocab.len() as f64).abs() < 1e-6);
        }
    }
    let foreign = Uniform {
        vocab: vocab.len(),
        hash: "other".into(),
    };
    assert!(evaluate_perplexity(&foreign, "uniform", &tests[0]).is_err());
}

#[test]
fn config_roundtrips_through_key_values() {
    let cfg = tiny();
    let back = ExperimentConfig::from_kv(&cfg.to_kv()).unwrap();
    assert_eq!(back, cfg);
    let bad = KvMap::parse("pretrain.epochs = many\n").unwrap();
    assert!(ExperimentConfig::from_kv(&bad).is_err());
}

#[test]
fn experiment_is_deterministic_and_reports_are_rederivable() {
    let cfg = tiny();
    let a = Experiment::run(&cfg).unwrap();
    let b = Experiment::run(&cfg).unwrap();
    assert_eq!(
        a.ealm.fusion.to_checkpoint().to_bytes(),
        b.ealm.fusion.to_checkpoint().to_bytes()
    );
    let (base_a, comp_a) = a.evaluate(&a.ealm).unwrap();
    let (base_b, comp_b) = b.evaluate(&b.ealm).unwrap();
    assert_eq!(comp_a, comp_b);
    assert_eq!(base_a, base_b);
    let table = reports_tsv(&comp_a, Some(&base_a), cfg.seed).unwrap();
    assert_eq!(table, reports_tsv(&comp_b, Some(&base_b), cfg.seed).unwrap());

    for (r, base) in comp_a.iter().zip(&base_a) {
        let total: f64 = r.nlls.iter().flatten().sum();
        let tokens: usize = r.nlls.iter().map(|v| v.len()).sum();
        assert_eq!(tokens, r.tokens);
        assert!(((total / tokens as f64).exp() - r.perplexity).abs() < 1e-9 * r.perplexity);
        let red = relative_reduction(base.perplexity, r.perplexity);
        let row = table
            .lines()
            .find(|l| l.starts_with(&format!("{}\tealm\tall\t", r.set)))
            .unwrap();
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[8].parse::<f64>().unwrap(), red);
        assert_eq!(cols[10], r.checkpoint_hash);
    }
}

#[test]
fn full_fraction_with_fusion_training_models_matches_plain_eval() {
    let mut cfg = tiny();
    cfg.fractions = vec![1.0];
    let data = generate_data(&cfg).unwrap();
    let vocab = train_tokenizer(&cfg, &data.pretrain_corpus).unwrap();
    let pretrained = stage_pretrain(&cfg, &vocab, &data.pretrain_corpus).unwrap();
    let tests = test_sets(&cfg, &vocab, &data);
    let catalogues = data.world.catalogues();
    let study =
        run_catalogue_fraction_study(&cfg, &vocab, &pretrained, &catalogues, &data.fusion_corpus, &tests, &["tail"])
            .unwrap();

    let models = catalogues
        .iter()
        .map(|c| stage_entity(&cfg, &vocab, &pretrained, &c.top_fraction(1.0).unwrap(), "fraction.1"))
        .collect::<Result<Vec<_>>>()
        .unwrap();
    let ealm = stage_fusion(&cfg, &vocab, &pretrained, &models, &data.fusion_corpus).unwrap();
    let tail = tests.iter().find(|t| t.name == "tail").unwrap();
    let plain = evaluate_perplexity(&ealm, "ealm", tail).unwrap();
    let base = evaluate_perplexity(&pretrained, "pretrained", tail).unwrap();
    assert_eq!(
        study.reduction(1.0, "trained", "tail"),
        Some(relative_reduction(base.perplexity, plain.perplexity))
    );
    assert!(study.rows.iter().any(|r| r.variant == "retrained"));
}

#[test]
fn trace_rows_follow_the_utterance() {
    let exp = Experiment::run(&tiny()).unwrap();
    let text = &exp.data.test_set("seen").unwrap()[0].text;
    let trace = emit_trace(&exp.ealm, &exp.vocab, text, exp.config.max_len).unwrap();
    let ids = exp.vocab.encode_utterance(text);
    assert_eq!(trace.rows.len(), ids.len() - 1);
    assert_eq!(trace.models.len(), 3);
    assert!(emit_trace(&exp.ealm, &exp.vocab, "¤¤¤", 32).is_err());
}

#[test]
fn cli_chain_runs_and_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_cli_chain(&tiny_config_path(), 3, &out);
    let files: Vec<String> = dir_contents(&out).into_iter().map(|(n, _)| n).collect();
    for f in ["vocab.txt", "pretrained.ckpt", "fusion.ckpt", "eval.tsv", "swap.tsv", "fraction_study.tsv", "trace.tsv"] {
        assert!(files.iter().any(|x| x == f), "missing {f}");
    }
    assert!(files.iter().any(|f| f.starts_with("eval.nll.")));
    let eval = std::fs::read_to_string(out.join("eval.tsv")).unwrap();
    assert!(eval.starts_with("set\t"));
    assert!(eval.lines().skip(1).all(|l| l.split('\t').any(|c| c == "3")));

    let empty = dir.path().join("empty");
    let o = ealm_cli(&["eval", "--config", tiny_config_path().to_str().unwrap(), "--out-dir", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("UsageError\t"), "{err}");

    let bad = dir.path().join("bad.kv");
    std::fs::write(&bad, "pretrain.epochs = lots\n").unwrap();
    let o = ealm_cli(&["gen-corpus", "--config", bad.to_str().unwrap(), "--out-dir", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("ConfigError\t"));

    let o = ealm_cli(&["no-such-command"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("UsageError\t"));
}

/// Mean pfusion on the song model at positions predicting a song token and
/// at positions predicting a carrier token, over the tail test set.
fn song_mass(exp: &Experiment) -> (f64, f64) {
    let song = exp.ealm.fusion.manifest.class_index("song").unwrap();
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for u in &exp.test("tail").unwrap().utterances {
        let out = exp.ealm.forward(&u.ids).unwrap();
        for i in 0..u.ids.len() - 1 {
            let p = out.pfusion.row(i)[song];
            let in_song = u.spans.iter().any(|s| s.entity_type == "song" && s.start <= i + 1 && i + 1 < s.end);
            if in_song {
                inside.push(p);
            } else if !u.in_entity(i + 1) {
                outside.push(p);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&inside), mean(&outside))
}

#[test]
fn song_model_gets_more_mass_inside_song_entities() {
    let kv = KvMap::parse(
        "corpus_utterances = 2000\ntest_utterances = 60\nvocab_symbols = 300\n\
         pretrain.epochs = 3\nentity.samples = 3000\nentity_train.epochs = 2\nfusion_train.epochs = 6\n",
    )
    .unwrap();
    let exp = Experiment::run(&ExperimentConfig::from_kv(&kv).unwrap()).unwrap();
    let (inside, outside) = song_mass(&exp);
    assert!(inside > outside, "song pfusion inside {inside}, carrier {outside}");
}
