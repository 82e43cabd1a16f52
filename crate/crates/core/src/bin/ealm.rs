use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ealm::pipeline::artifacts::{catalogue_file, entity_file, FUSION_FILE, PRETRAINED_FILE};
use ealm::pipeline::{
    emit_trace, evaluate_perplexity, generate_data, nll_sidecar, reports_tsv, run_catalogue_fraction_study,
    run_swap_experiment, stage_entity, stage_fusion, stage_pretrain, train_tokenizer, Artifacts, EvalReport,
    ExperimentConfig, TEST_SETS,
};
use ealm::{EalmError, Result};

#[derive(Parser)]
#[command(name = "ealm", version, about = "Entity-aware language model pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the BPE vocabulary on the pre-training corpus.
    TokenizerTrain(Common),
    /// Generate catalogues, corpora and test sets.
    GenCorpus(Common),
    /// Pre-train the transformer LM.
    Pretrain(Common),
    /// Train one entity LM per catalogue against the frozen embeddings.
    TrainEntity {
        #[command(flatten)]
        common: Common,
        /// Train one type only.
        #[arg(long)]
        entity_type: Option<String>,
    },
    /// Train the fusion layer with every component frozen.
    TrainFusion(Common),
    /// Perplexity of the pre-trained LM and the EALM on every test set.
    Eval(Common),
    /// Retrain one entity model with new entities and hot-swap it.
    Swap(Common),
    /// Tail reduction as a function of the catalogue fraction used.
    FractionStudy(Common),
    /// Interpolation probabilities for one utterance.
    Trace {
        #[command(flatten)]
        common: Common,
        /// Defaults to the configured utterance, then the first seen test line.
        #[arg(long)]
        utterance: Option<String>,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    art: Artifacts,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        let art = Artifacts::new(&c.out_dir, cfg.data_dir.as_ref().map(PathBuf::from))?;
        Ok(Ctx { cfg, art })
    }
}

/// Report rows for the pre-trained LM followed by EALM rows against it.
fn eval_table(base: &[EvalReport], comp: &[EvalReport], seed: u64) -> Result<String> {
    let mut s = reports_tsv(base, None, seed)?;
    let with_base = reports_tsv(comp, Some(base), seed)?;
    s.extend(with_base.lines().skip(1).map(|l| format!("{l}\n")));
    Ok(s)
}

fn write_sidecars(ctx: &Ctx, prefix: &str, reports: &[EvalReport], files: &mut Vec<PathBuf>) -> Result<()> {
    for r in reports {
        files.push(ctx.art.write(&format!("{prefix}.nll.{}.{}.tsv", r.set, r.model), &nll_sidecar(r))?);
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus(c) => {
            let ctx = Ctx::new(&c)?;
            let data = generate_data(&ctx.cfg)?;
            ctx.art.save_data(&data, ctx.cfg.seed)?;
            let mut files = vec![ctx.art.output("corpus.pretrain.txt"), ctx.art.output("corpus.fusion.txt")];
            files.extend(TEST_SETS.iter().map(|s| ctx.art.output(&format!("test.{s}.txt"))));
            files.extend(ctx.cfg.entity_types().iter().map(|t| ctx.art.output(&catalogue_file(t, None))));
            ctx.art.write_run_record("gen-corpus", &ctx.cfg, &files)
        }
        Command::TokenizerTrain(c) => {
            let ctx = Ctx::new(&c)?;
            let corpus = ctx.art.load_corpus("corpus.pretrain")?;
            let vocab = train_tokenizer(&ctx.cfg, &corpus)?;
            let p = ctx.art.save_vocab(&vocab)?;
            ctx.art.write_run_record("tokenizer-train", &ctx.cfg, &[p])
        }
        Command::Pretrain(c) => {
            let ctx = Ctx::new(&c)?;
            let vocab = ctx.art.load_vocab()?;
            let corpus = ctx.art.load_corpus("corpus.pretrain")?;
            let lm = stage_pretrain(&ctx.cfg, &vocab, &corpus)?;
            let p = ctx.art.save_checkpoint(PRETRAINED_FILE, &lm.to_checkpoint())?;
            ctx.art.write_run_record("pretrain", &ctx.cfg, &[p])
        }
        Command::TrainEntity { common, entity_type } => {
            let ctx = Ctx::new(&common)?;
            let types = match entity_type {
                Some(t) if ctx.cfg.entity_types().contains(&t) => vec![t],
                Some(t) => return Err(EalmError::config(format!("unknown entity type {t}"))),
                None => ctx.cfg.entity_types(),
            };
            let vocab = ctx.art.load_vocab()?;
            let pretrained = ctx.art.load_pretrained()?;
            let mut files = Vec::new();
            for t in &types {
                let cat = ctx.art.load_catalogue(t, None)?;
                let m = stage_entity(&ctx.cfg, &vocab, &pretrained, &cat, "full")?;
                files.push(ctx.art.save_checkpoint(&entity_file(t), &m.to_checkpoint())?);
            }
            let stage = if types.len() == 1 {
                format!("train-entity.{}", types[0])
            } else {
                "train-entity".into()
            };
            ctx.art.write_run_record(&stage, &ctx.cfg, &files)
        }
        Command::TrainFusion(c) => {
            let ctx = Ctx::new(&c)?;
            let vocab = ctx.art.load_vocab()?;
            let pretrained = ctx.art.load_pretrained()?;
            let entities = ctx.art.load_entities(&ctx.cfg)?;
            let corpus = ctx.art.load_corpus("corpus.fusion")?;
            let ealm = stage_fusion(&ctx.cfg, &vocab, &pretrained, &entities, &corpus)?;
            let p = ctx.art.save_checkpoint(FUSION_FILE, &ealm.fusion.to_checkpoint())?;
            ctx.art.write(
                "fusion.manifest.tsv",
                &ealm.fusion.manifest.to_tsv(),
            )?;
            ctx.art.write_run_record("train-fusion", &ctx.cfg, &[p])
        }
        Command::Eval(c) => {
            let ctx = Ctx::new(&c)?;
            let vocab = ctx.art.load_vocab()?;
            let ealm = ctx.art.load_ealm(&ctx.cfg)?;
            let tests = ctx.art.load_tests(&vocab, ctx.cfg.max_len)?;
            let base = tests
                .iter()
                .map(|t| evaluate_perplexity(&ealm.pretrained, "pretrained", t))
                .collect::<Result<Vec<_>>>()?;
            let comp = tests
                .iter()
                .map(|t| evaluate_perplexity(&ealm, "ealm", t))
                .collect::<Result<Vec<_>>>()?;
            let mut files = vec![ctx.art.write("eval.tsv", &eval_table(&base, &comp, ctx.cfg.seed)?)?];
            write_sidecars(&ctx, "eval", &base, &mut files)?;
            write_sidecars(&ctx, "eval", &comp, &mut files)?;
            ctx.art.write_run_record("eval", &ctx.cfg, &files)
        }
        Command::Swap(c) => {
            let ctx = Ctx::new(&c)?;
            let ty = ctx.cfg.swap_type.clone();
            let vocab = ctx.art.load_vocab()?;
            let ealm = ctx.art.load_ealm(&ctx.cfg)?;
            let tests = ctx.art.load_tests(&vocab, ctx.cfg.max_len)?;
            let catalogue = ctx.art.load_catalogue(&ty, None)?;
            let additions: Vec<String> = ctx
                .art
                .load_catalogue(&ty, Some("new"))?
                .entries
                .into_iter()
                .map(|e| e.text)
                .collect();
            let out = run_swap_experiment(&ctx.cfg, &vocab, &ealm, &catalogue, &additions, &tests)?;
            let swapped = out
                .swapped
                .entities
                .iter()
                .find(|e| e.entity_type() == ty)
                .ok_or_else(|| EalmError::contract("swapped model missing"))?;
            let mut files = vec![
                ctx.art.save_checkpoint(&format!("entity.{ty}.swapped.ckpt"), &swapped.to_checkpoint())?,
                ctx.art.write(&catalogue_file(&ty, Some("swapped")), &out.catalogue.to_text())?,
                ctx.art.write("swap.tsv", &out.to_tsv(ctx.cfg.seed))?,
                ctx.art.write("swap.eval.tsv", &eval_table(&out.before, &out.after, ctx.cfg.seed)?)?,
            ];
            write_sidecars(&ctx, "swap", &out.pretrained, &mut files)?;
            write_sidecars(&ctx, "swap", &out.before, &mut files)?;
            write_sidecars(&ctx, "swap", &out.after, &mut files)?;
            ctx.art.write_run_record("swap", &ctx.cfg, &files)
        }
        Command::FractionStudy(c) => {
            let ctx = Ctx::new(&c)?;
            let vocab = ctx.art.load_vocab()?;
            let pretrained = ctx.art.load_pretrained()?;
            let catalogues = ctx.art.load_catalogues(&ctx.cfg)?;
            let corpus = ctx.art.load_corpus("corpus.fusion")?;
            let tests = ctx.art.load_tests(&vocab, ctx.cfg.max_len)?;
            let study = run_catalogue_fraction_study(
                &ctx.cfg,
                &vocab,
                &pretrained,
                &catalogues,
                &corpus,
                &tests,
                &TEST_SETS,
            )?;
            let mut files = vec![ctx.art.write("fraction_study.tsv", &study.to_tsv(ctx.cfg.seed))?];
            write_sidecars(&ctx, "fraction_study", &study.reports, &mut files)?;
            ctx.art.write_run_record("fraction-study", &ctx.cfg, &files)
        }
        Command::Trace { common, utterance } => {
            let ctx = Ctx::new(&common)?;
            let vocab = ctx.art.load_vocab()?;
            let ealm = ctx.art.load_ealm(&ctx.cfg)?;
            let text = match utterance {
                Some(u) => u,
                None if !ctx.cfg.trace_utterance.is_empty() => ctx.cfg.trace_utterance.clone(),
                None => ctx
                    .art
                    .load_corpus("test.seen")?
                    .into_iter()
                    .next()
                    .map(|u| u.text)
                    .ok_or_else(|| EalmError::usage("no trace utterance and test.seen is empty"))?,
            };
            let trace = emit_trace(&ealm, &vocab, &text, ctx.cfg.max_len)?;
            let files = vec![
                ctx.art.write("trace.tsv", &trace.to_tsv())?,
                ctx.art.write("trace.full.tsv", &trace.to_full_tsv())?,
            ];
            ctx.art.write_run_record("trace", &ctx.cfg, &files)
        }
    }
}

fn exit_code(e: &EalmError) -> u8 {
    match e {
        EalmError::Config(_) => 2,
        EalmError::Usage(_) => 3,
        EalmError::Contract(_) => 4,
        EalmError::Format(_) => 5,
        EalmError::Numeric { .. } => 6,
        EalmError::EmptyBatch(_) => 7,
        EalmError::Io { .. } => 8,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("UsageError\t{}", one_line(&e.to_string()));
            return ExitCode::from(3);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}\t{}", e.class(), one_line(&e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}
