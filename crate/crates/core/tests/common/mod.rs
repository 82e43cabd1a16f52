#![allow(dead_code)]

use std::collections::HashSet;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ealm::entity_lm::{entity_ids, EntityConfig, EntityLM};
use ealm::fusion::{manifest_for, Ealm, FusionConfig, FusionLayer};
use ealm::numerics::{AttnMask, Graph, ParamStore, Tensor, Var};
use ealm::pretrained_lm::{PretrainedConfig, PretrainedLM};
use ealm::textdata::synth::pseudo_words;
use ealm::textdata::{train_bpe, Vocabulary};
use ealm::train::TrainConfig;

pub const H: f64 = 1e-5;

/// Builds a scalar loss from leaves holding `inputs`.
pub type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Builder,
    /// Dropout masks are replayed from this seed in every evaluation.
    pub train_seed: Option<u64>,
}

fn graph(seed: Option<u64>) -> Graph {
    match seed {
        Some(s) => Graph::train(s),
        None => Graph::deterministic(),
    }
}

fn eval_loss(case: &GradCase, inputs: &[Tensor]) -> f64 {
    let mut g = graph(case.train_seed);
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let loss = (case.build)(&mut g, &leaves);
    g.value(loss).data()[0]
}

/// Largest relative error between autodiff and central differences over all
/// input entries. Entries where both gradients are below `1e-8` in
/// magnitude are compared absolutely.
pub fn gradcheck(case: &GradCase) -> f64 {
    let mut g = graph(case.train_seed);
    let leaves: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = (case.build)(&mut g, &leaves);
    assert_eq!(g.value(loss).len(), 1, "{}: loss must be scalar", case.name);
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = g
            .grad(*leaf)
            .unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        for j in 0..case.inputs[i].len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval_loss(case, &plus) - eval_loss(case, &minus)) / (2.0 * H);
            let a = analytic.data()[j];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-8 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    worst
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Weighted sum with fixed random coefficients, so every output entry gets a
/// distinct upstream gradient.
pub fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let m = g.mul(x, w);
    g.sum(m)
}

fn case(name: String, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var + 'static) -> GradCase {
    GradCase {
        name,
        inputs,
        build: Box::new(build),
        train_seed: None,
    }
}

fn random_mask(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> AttnMask {
    let mut m = AttnMask::new();
    for i in 0..n {
        let mut keys: Vec<(usize, Option<usize>)> = Vec::new();
        for j in 0..=i {
            if j != i && rng.random::<f64>() >= 0.7 {
                continue;
            }
            let class = if rng.random::<f64>() < 0.8 { Some(rng.random_range(0..classes)) } else { None };
            keys.push((j, class));
        }
        m.push_query(keys);
    }
    m
}

/// Random small graphs; every differentiable op appears in at least one.
pub fn graph_suite(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..5);
    let d = 2 * rng.random_range(1..3);
    let m = rng.random_range(2..4);
    let s = seed;
    let mut v = Vec::new();
    v.push(case(format!("matmul/{s}"), vec![randn(&[n, d], &mut rng), randn(&[d, m], &mut rng)], move |g, x| {
        let y = g.matmul(x[0], x[1]);
        probe(g, y, s)
    }));
    for (ta, tb) in [(true, false), (false, true), (true, true)] {
        let a = if ta { randn(&[d, n], &mut rng) } else { randn(&[n, d], &mut rng) };
        let b = if tb { randn(&[m, d], &mut rng) } else { randn(&[d, m], &mut rng) };
        v.push(case(format!("matmul_t({ta},{tb})/{s}"), vec![a, b], move |g, x| {
            let y = g.matmul_t(x[0], x[1], ta, tb);
            probe(g, y, s)
        }));
    }
    v.push(case(format!("add+mul/{s}"), vec![randn(&[n, d], &mut rng), randn(&[n, d], &mut rng)], move |g, x| {
        let a = g.add(x[0], x[1]);
        let y = g.mul(a, x[0]);
        probe(g, y, s)
    }));
    v.push(case(format!("add_row+scale/{s}"), vec![randn(&[n, d], &mut rng), randn(&[d], &mut rng)], move |g, x| {
        let a = g.add_row(x[0], x[1]);
        let y = g.scale(a, -1.7);
        probe(g, y, s)
    }));
    v.push(case(format!("gelu/{s}"), vec![randn(&[n, d], &mut rng)], move |g, x| {
        let y = g.gelu(x[0]);
        probe(g, y, s)
    }));
    v.push(case(
        format!("layer_norm/{s}"),
        vec![randn(&[n, d + 1], &mut rng), randn(&[d + 1], &mut rng), randn(&[d + 1], &mut rng)],
        move |g, x| {
            let y = g.layer_norm(x[0], x[1], x[2]);
            probe(g, y, s)
        },
    ));
    let idx: Vec<usize> = (0..n + 2).map(|_| rng.random_range(0..n)).collect();
    v.push(case(format!("gather_rows/{s}"), vec![randn(&[n, d], &mut rng)], move |g, x| {
        let y = g.gather_rows(x[0], Rc::new(idx.clone()));
        probe(g, y, s)
    }));
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..m + 2)).collect();
    v.push(case(format!("embedding/{s}"), vec![randn(&[m + 2, d], &mut rng)], move |g, x| {
        let y = g.embedding(x[0], &ids);
        probe(g, y, s)
    }));
    v.push(case(format!("softmax_rows/{s}"), vec![randn(&[n, m + 1], &mut rng)], move |g, x| {
        let y = g.softmax_rows(x[0]);
        probe(g, y, s)
    }));
    let heads = if d % 2 == 0 { 2 } else { 1 };
    let classes = 3;
    let mask = Rc::new(random_mask(n + 1, classes, &mut rng));
    let mask2 = mask.clone();
    v.push(case(
        format!("attention+bias/{s}"),
        vec![
            randn(&[n + 1, d], &mut rng),
            randn(&[n + 1, d], &mut rng),
            randn(&[n + 1, d], &mut rng),
            randn(&[heads, classes], &mut rng),
        ],
        move |g, x| {
            let y = g.attention(x[0], x[1], x[2], Some(x[3]), mask.clone(), heads);
            probe(g, y, s)
        },
    ));
    v.push(case(
        format!("attention/{s}"),
        vec![randn(&[n + 1, d], &mut rng), randn(&[n + 1, d], &mut rng), randn(&[n + 1, d], &mut rng)],
        move |g, x| {
            let y = g.attention(x[0], x[1], x[2], None, mask2.clone(), 1);
            probe(g, y, s)
        },
    ));
    let targets: Vec<usize> = (0..n + 1).map(|_| rng.random_range(0..m + 2)).collect();
    let mut ignore = vec![false; n + 1];
    ignore[rng.random_range(0..n + 1)] = true;
    v.push(case(format!("cross_entropy/{s}"), vec![randn(&[n + 1, m + 2], &mut rng)], move |g, x| {
        g.cross_entropy(x[0], &targets, &ignore).unwrap()
    }));
    v.push(case(
        format!("concat_cols/{s}"),
        vec![randn(&[n, d], &mut rng), randn(&[n, m], &mut rng), randn(&[n, 1], &mut rng)],
        move |g, x| {
            let y = g.concat_cols(&[x[0], x[1], x[2]]);
            probe(g, y, s)
        },
    ));
    v.push(case(
        format!("group_weighted_sum+reshape/{s}"),
        vec![randn(&[n * m], &mut rng), randn(&[n * m, d], &mut rng)],
        move |g, x| {
            let w = g.reshape(x[0], vec![n, m]);
            let w = g.softmax_rows(w);
            let y = g.group_weighted_sum(w, x[1]);
            probe(g, y, s)
        },
    ));
    let mut drop = case(format!("dropout/{s}"), vec![randn(&[n, d + 3], &mut rng)], move |g, x| {
        let y = g.dropout(x[0], 0.4);
        let y = g.gelu(y);
        probe(g, y, s)
    });
    drop.train_seed = Some(seed);
    v.push(drop);
    v.push(case(format!("sum/{s}"), vec![randn(&[n, d], &mut rng)], move |g, x| {
        let y = g.mul(x[0], x[0]);
        g.sum(y)
    }));
    v
}

/// Two-layer GELU MLP with a softmax cross-entropy head.
pub fn mlp_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d_in, hidden, classes) = (4, 5, 6, 3);
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    case(
        format!("mlp/{seed}"),
        vec![
            randn(&[n, d_in], &mut rng),
            randn(&[d_in, hidden], &mut rng),
            randn(&[hidden], &mut rng),
            randn(&[hidden, classes], &mut rng),
            randn(&[classes], &mut rng),
        ],
        move |g, x| {
            let h = g.matmul(x[0], x[1]);
            let h = g.add_row(h, x[2]);
            let h = g.gelu(h);
            let o = g.matmul(h, x[3]);
            let o = g.add_row(o, x[4]);
            g.cross_entropy(o, &targets, &vec![false; n]).unwrap()
        },
    )
}

// ---- tiny models -------------------------------------------------------

pub const VOCAB: usize = 23;

pub fn tiny_pretrained_config(vocab_size: usize) -> PretrainedConfig {
    PretrainedConfig {
        layers: 2,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        dropout: 0.1,
        max_positions: 16,
        vocab_size,
    }
}

pub fn tiny_entity_config(entity_type: &str, k: usize) -> EntityConfig {
    EntityConfig {
        entity_type: entity_type.into(),
        layers: 2,
        d_model: 8,
        d_ff: 16,
        heads: 2,
        dropout: 0.1,
        k,
        window: k.max(1),
        samples: 200,
    }
}

pub fn tiny_fusion_config(k: usize) -> FusionConfig {
    FusionConfig {
        d_model: 8,
        d_ff: 16,
        heads: 2,
        max_positions: 16,
        k,
        dropout: 0.1,
        entity_dropout: 0.25,
    }
}

/// Adds Gaussian noise to every trainable tensor so tests do not run on the
/// near-zero initialisation.
pub fn perturb(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let t = store.get_mut(id);
        let noise = Tensor::randn(t.shape(), std, &mut rng);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
}

pub fn random_pretrained(seed: u64) -> PretrainedLM {
    let mut lm = PretrainedLM::new(tiny_pretrained_config(VOCAB), "vocab-test", seed).unwrap();
    perturb(&mut lm.params, 0.3, seed ^ 1);
    lm
}

pub fn random_entity(pretrained: &PretrainedLM, entity_type: &str, k: usize, seed: u64) -> EntityLM {
    let mut e = EntityLM::new(tiny_entity_config(entity_type, k), &pretrained.shared_embeddings(), seed).unwrap();
    perturb(&mut e.params, 0.3, seed ^ 2);
    e
}

/// Untrained EALM with `n` entity models and perturbed weights.
pub fn random_ealm(n: usize, k: usize, seed: u64) -> Ealm {
    let p = random_pretrained(seed);
    let types = ["song", "celebrity", "place", "item"];
    let entities: Vec<EntityLM> = (0..n).map(|i| random_entity(&p, types[i], k, seed + 10 + i as u64)).collect();
    let mut f = FusionLayer::new(tiny_fusion_config(k), manifest_for(&p, &entities), seed + 99).unwrap();
    perturb(&mut f.params, 0.3, seed ^ 3);
    Ealm::assemble(p, entities, f).unwrap()
}

pub fn random_tokens(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = vec![0usize];
    t.extend((1..len).map(|_| rng.random_range(3..vocab)));
    t
}

pub fn row_sum(t: &Tensor, r: usize) -> f64 {
    t.row(r).iter().sum()
}

// ---- entity fixtures ---------------------------------------------------

/// Small BPE vocabulary over pseudo-word titles, a random pre-trained LM
/// sized to it, and the titles themselves.
pub struct EntityFixture {
    pub vocab: Vocabulary,
    pub pretrained: PretrainedLM,
    pub titles: Vec<String>,
}

pub fn entity_fixture(n_titles: usize, seed: u64) -> EntityFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = pseudo_words(40, &HashSet::new(), &mut rng);
    let titles: Vec<String> = (0..n_titles)
        .map(|_| {
            let n = rng.random_range(2..=3);
            (0..n).map(|_| words[rng.random_range(0..words.len())].clone()).collect::<Vec<_>>().join(" ")
        })
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let lines: Vec<String> = titles.iter().map(|t| format!("play {t}")).collect();
    let vocab = train_bpe(&lines, 40).unwrap();
    let mut pretrained =
        PretrainedLM::new(tiny_pretrained_config(vocab.len()), vocab.content_hash(), seed).unwrap();
    perturb(&mut pretrained.params, 0.3, seed ^ 5);
    EntityFixture {
        vocab,
        pretrained,
        titles,
    }
}

/// Short schedule for test-sized training runs.
pub fn quick_train(epochs: usize) -> TrainConfig {
    let mut t = TrainConfig {
        epochs,
        batch_size: 8,
        grad_accum: 1,
        ..TrainConfig::default()
    };
    t.schedule.warmup_tokens = 50;
    t.schedule.lr_max = 1e-2;
    t.schedule.decay_interval_tokens = 5_000;
    t
}

/// Mean per-token NLL of `texts` under an entity model.
pub fn mean_entity_nll(model: &EntityLM, vocab: &Vocabulary, texts: &[String]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for t in texts {
        let ids = entity_ids(vocab, t);
        total += model.sequence_nll(&ids).unwrap();
        count += ids.len() - 1;
    }
    total / count as f64
}

/// Sets the fuser so that pfusion puts all but ~e^-50 of its mass on the
/// pre-trained LM: only class row 0 activates the scorer's first hidden unit.
pub fn force_pretrained_fusion(ealm: &mut Ealm) {
    let d = ealm.fusion.config.d_model;
    let store = &mut ealm.fusion.params;
    let set = |store: &mut ParamStore, name: &str, f: &dyn Fn(&mut Tensor)| {
        let id = store.id(name).unwrap();
        let mut t = Tensor::zeros(store.get(id).shape());
        f(&mut t);
        store.set(id, t).unwrap();
    };
    set(store, "fuser.hidden.w", &|t| t.data_mut()[d * d] = 1.0);
    set(store, "fuser.hidden.b", &|_| {});
    set(store, "fuser.out.w", &|t| t.data_mut()[0] = 1.0);
    set(store, "fuser.out.b", &|_| {});
    set(store, "class_emb", &|t| t.data_mut()[0] = 50.0);
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- CLI ---------------------------------------------------------------

/// Every subcommand in dependency order.
pub const CLI_CHAIN: [&str; 9] = [
    "gen-corpus",
    "tokenizer-train",
    "pretrain",
    "train-entity",
    "train-fusion",
    "eval",
    "swap",
    "fraction-study",
    "trace",
];

pub fn ealm_cli(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_ealm"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("ealm binary runs")
}

/// Runs the whole chain into `out`; panics with stderr on the first failure.
pub fn run_cli_chain(config: &std::path::Path, seed: u64, out: &std::path::Path) {
    let seed = seed.to_string();
    for cmd in CLI_CHAIN {
        let o = ealm_cli(&[
            cmd,
            "--config",
            config.to_str().unwrap(),
            "--seed",
            &seed,
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
    }
}

/// Relative paths and contents of every file under `dir`, sorted.
pub fn dir_contents(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

pub fn tiny_config_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.kv")
}
