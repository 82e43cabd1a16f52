mod common;

use common::*;
use ealm::fusion::{train_fusion, weighted_rows, Ealm, FusionLayer};
use ealm::numerics::{softmax_in_place, Tensor};
use ealm::EalmError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_rows_sum_to_one(t: &Tensor, what: &str) {
    for r in 0..t.rows() {
        let s = row_sum(t, r);
        assert!((s - 1.0).abs() < 1e-6, "{what} row {r} sums to {s}");
        assert!(t.row(r).iter().all(|&p| p >= 0.0));
    }
}

fn pretrained_probs(ealm: &Ealm, tokens: &[usize]) -> Tensor {
    let mut p = ealm.pretrained.forward(tokens).unwrap().logits;
    let v = p.cols();
    for row in p.data_mut().chunks_mut(v) {
        softmax_in_place(row);
    }
    p
}

fn in_hull(value: &[f64], parts: &[&[f64]]) -> bool {
    (0..value.len()).all(|j| {
        let lo = parts.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min);
        let hi = parts.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max);
        value[j] >= lo - 1e-12 && value[j] <= hi + 1e-12
    })
}

#[test]
fn every_distribution_is_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..30 {
        let n = rng.random_range(0..=3);
        let k = rng.random_range(1..=4);
        let ealm = random_ealm(n, k, trial);
        let toks = random_tokens(rng.random_range(1..=12), VOCAB, trial + 50);
        let out = ealm.forward(&toks).unwrap();
        assert_eq!(out.pfusion.shape(), &[toks.len(), n + 1]);
        assert_rows_sum_to_one(&out.pfusion, "pfusion");
        assert_rows_sum_to_one(&out.probs, "probs");
        assert_eq!(out.pcontext.len(), n);
        for pc in &out.pcontext {
            assert_eq!(pc.shape(), &[toks.len(), k + 1]);
            assert_rows_sum_to_one(pc, "pcontext");
        }
    }
}

#[test]
fn no_entity_models_reproduces_the_pretrained_lm() {
    let ealm = random_ealm(0, 4, 2);
    let toks = random_tokens(10, VOCAB, 3);
    let out = ealm.forward(&toks).unwrap();
    let base = pretrained_probs(&ealm, &toks);
    assert!(out.pfusion.data().iter().all(|&p| p == 1.0));
    assert!(max_abs_diff(out.probs.data(), base.data()) < 1e-6);
}

#[test]
fn one_hot_pfusion_on_the_pretrained_lm_reproduces_it() {
    let mut ealm = random_ealm(2, 4, 4);
    force_pretrained_fusion(&mut ealm);
    let toks = random_tokens(12, VOCAB, 5);
    let out = ealm.forward(&toks).unwrap();
    for r in 0..toks.len() {
        assert!(out.pfusion.row(r)[0] > 1.0 - 1e-12);
    }
    let hp = ealm.pretrained.forward(&toks).unwrap().hidden;
    assert!(max_abs_diff(out.hidden.data(), hp.data()) < 1e-6);
    assert!(max_abs_diff(out.probs.data(), pretrained_probs(&ealm, &toks).data()) < 1e-6);
}

#[test]
fn mixer_output_is_a_convex_combination_of_rows() {
    let ealm = random_ealm(2, 3, 6);
    let layer = &ealm.fusion;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = 5;
    let rows = Tensor::randn(&[p * 4, 8], 1.0, &mut rng);
    let hc = Tensor::randn(&[p, 8], 1.0, &mut rng);
    let (pc, o) = layer.mix(1, &rows, &hc).unwrap();
    assert_rows_sum_to_one(&pc, "pcontext");
    for i in 0..p {
        let parts: Vec<&[f64]> = (0..4).map(|l| rows.row(i * 4 + l)).collect();
        assert!(in_hull(o.row(i), &parts), "position {i}");
        let expect = weighted_rows(pc.row(i), &Tensor::from_rows(&parts.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()).unwrap();
        assert!(max_abs_diff(o.row(i), &expect) < 1e-12);
    }
}

#[test]
fn mixer_endpoints() {
    let rows = Tensor::from_rows(&[vec![1.0, -2.0], vec![3.5, 0.25], vec![-7.0, 9.0]]).unwrap();
    for l in 0..3 {
        let mut w = vec![0.0; 3];
        w[l] = 1.0;
        assert_eq!(weighted_rows(&w, &rows).unwrap(), rows.row(l));
    }
    // Identical rows: the output is that row whatever the weights.
    let ealm = random_ealm(1, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let row = Tensor::randn(&[1, 8], 1.0, &mut rng);
    let same = Tensor::new(vec![4, 8], row.data().repeat(4)).unwrap();
    let hc = Tensor::randn(&[1, 8], 1.0, &mut rng);
    let (_, o) = ealm.fusion.mix(1, &same, &hc).unwrap();
    assert!(max_abs_diff(o.row(0), row.data()) < 1e-12);
}

#[test]
fn fused_state_is_a_convex_combination_of_outputs() {
    let ealm = random_ealm(3, 2, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = 6;
    let outputs: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[p, 8], 1.0, &mut rng)).collect();
    let hc = Tensor::randn(&[p, 8], 1.0, &mut rng);
    let (pf, h) = ealm.fusion.fuse(&outputs, &hc).unwrap();
    assert_eq!(pf.shape(), &[p, 4]);
    assert_rows_sum_to_one(&pf, "pfusion");
    for i in 0..p {
        let parts: Vec<&[f64]> = outputs.iter().map(|o| o.row(i)).collect();
        assert!(in_hull(h.row(i), &parts), "position {i}");
    }
    let err = ealm.fusion.fuse(&outputs[..3], &hc).unwrap_err();
    assert!(matches!(err, EalmError::Usage(_)));
}

#[test]
fn swapping_in_the_identical_checkpoint_is_a_no_op() {
    let ealm = random_ealm(2, 4, 12);
    let toks = random_tokens(11, VOCAB, 13);
    let before = ealm.forward(&toks).unwrap();
    let mut swapped = ealm.clone();
    let same = ealm.entities[1].clone();
    swapped.swap_entity_model(same).unwrap();
    let after = swapped.forward(&toks).unwrap();
    assert!(before.probs.bitwise_eq(&after.probs));
    assert!(before.pfusion.bitwise_eq(&after.pfusion));
    assert!(ealm.fusion.params.bitwise_eq(&swapped.fusion.params));
    assert_eq!(ealm.fusion.manifest, swapped.fusion.manifest);
}

#[test]
fn swap_replaces_one_component_and_updates_its_hash() {
    let ealm = random_ealm(2, 4, 14);
    let mut swapped = ealm.clone();
    let new = random_entity(&ealm.pretrained, "celebrity", 4, 999);
    swapped.swap_entity_model(new.clone()).unwrap();
    assert!(ealm.fusion.params.bitwise_eq(&swapped.fusion.params));
    assert_eq!(swapped.fusion.manifest.entity_hashes[0], ealm.fusion.manifest.entity_hashes[0]);
    assert_eq!(swapped.fusion.manifest.entity_hashes[1], new.to_checkpoint().content_hash());
    assert!(swapped.entities[1].params.bitwise_eq(&new.params));
    // Reassembling with the updated manifest succeeds.
    Ealm::assemble(swapped.pretrained.clone(), swapped.entities.clone(), swapped.fusion.clone()).unwrap();
}

#[test]
fn incompatible_swaps_and_assemblies_are_refused() {
    let ealm = random_ealm(2, 4, 15);
    let mut target = ealm.clone();
    let wrong_k = random_entity(&ealm.pretrained, "song", 3, 1);
    assert!(matches!(target.swap_entity_model(wrong_k), Err(EalmError::Contract(_))));
    let other = random_pretrained(77);
    let foreign = random_entity(&other, "song", 4, 1);
    assert!(matches!(target.swap_entity_model(foreign), Err(EalmError::Contract(_))));
    let unknown = random_entity(&ealm.pretrained, "place", 4, 1);
    assert!(target.swap_entity_model(unknown).is_err());

    let replaced = random_entity(&ealm.pretrained, "song", 4, 5);
    let err = Ealm::assemble(
        ealm.pretrained.clone(),
        vec![replaced, ealm.entities[1].clone()],
        ealm.fusion.clone(),
    )
    .unwrap_err();
    assert!(matches!(err, EalmError::Contract(_)), "{err}");
    let reordered = vec![ealm.entities[1].clone(), ealm.entities[0].clone()];
    assert!(Ealm::assemble(ealm.pretrained.clone(), reordered, ealm.fusion.clone()).is_err());
}

#[test]
fn every_fusion_parameter_receives_gradient() {
    let ealm = random_ealm(2, 4, 16);
    let batch: Vec<Vec<usize>> = (0..4).map(|i| random_tokens(6 + i, VOCAB, 40 + i as u64)).collect();
    let grads = ealm.fusion_gradients(&batch).unwrap();
    let names: Vec<&str> = ealm.fusion.params.iter().map(|(_, p)| p.name.as_str()).collect();
    for name in names {
        let g = grads.iter().find(|(n, _)| n == name).unwrap_or_else(|| panic!("{name}: no gradient"));
        assert!(g.1.data().iter().any(|&x| x != 0.0), "{name}: all-zero gradient");
    }
    assert!(matches!(ealm.fusion_gradients(&[vec![0]]), Err(EalmError::EmptyBatch(_))));
}

#[test]
fn fusion_training_leaves_components_bitwise_intact() {
    let base = random_ealm(2, 4, 17);
    let pre = base.pretrained.to_checkpoint().to_bytes();
    let ents: Vec<Vec<u8>> = base.entities.iter().map(|e| e.to_checkpoint().to_bytes()).collect();
    let corpus: Vec<Vec<usize>> = (0..24).map(|i| random_tokens(5 + i % 6, VOCAB, 60 + i as u64)).collect();
    let (ealm, stats) = train_fusion(
        &base.pretrained,
        &base.entities,
        &corpus,
        tiny_fusion_config(4),
        &quick_train(3),
        5,
    )
    .unwrap();
    assert_eq!(ealm.pretrained.to_checkpoint().to_bytes(), pre);
    for (e, bytes) in ealm.entities.iter().zip(&ents) {
        assert_eq!(&e.to_checkpoint().to_bytes(), bytes);
    }
    assert!(!ealm.fusion.params.bitwise_eq(&base.fusion.params));
    assert!(stats.optimizer_steps > 0);
    let (again, _) = train_fusion(
        &base.pretrained,
        &base.entities,
        &corpus,
        tiny_fusion_config(4),
        &quick_train(3),
        5,
    )
    .unwrap();
    assert_eq!(again.fusion.to_checkpoint().to_bytes(), ealm.fusion.to_checkpoint().to_bytes());
}

#[test]
fn fusion_training_rejects_foreign_entity_models() {
    let base = random_ealm(1, 4, 18);
    let other = random_pretrained(19);
    let foreign = vec![random_entity(&other, "song", 4, 1)];
    let corpus = vec![random_tokens(6, VOCAB, 1)];
    let err = train_fusion(&base.pretrained, &foreign, &corpus, tiny_fusion_config(4), &quick_train(1), 1).unwrap_err();
    assert!(matches!(err, EalmError::Contract(_)), "{err}");
}

#[test]
fn context_encoding_is_causal_and_deterministic() {
    let ealm = random_ealm(1, 4, 20);
    let toks = random_tokens(10, VOCAB, 21);
    let hp = ealm.pretrained.forward(&toks).unwrap().hidden;
    let a = ealm.fusion.encode_context(&hp).unwrap();
    assert!(a.bitwise_eq(&ealm.fusion.encode_context(&hp).unwrap()));
    let mut moved = hp.clone();
    let d = moved.cols();
    for x in &mut moved.data_mut()[6 * d..7 * d] {
        *x += 1.0;
    }
    let b = ealm.fusion.encode_context(&moved).unwrap();
    for r in 0..6 {
        assert_eq!(a.row(r), b.row(r), "row {r}");
    }
    assert_ne!(a.row(6), b.row(6));
    let long = Tensor::zeros(&[17, d]);
    assert!(matches!(ealm.fusion.encode_context(&long), Err(EalmError::Usage(_))));
}

#[test]
fn trace_has_one_normalized_row_per_prediction() {
    let ealm = random_ealm(2, 4, 22);
    let toks = random_tokens(9, VOCAB, 23);
    let trace = ealm.trace(&toks, |id| format!("t{id}")).unwrap();
    assert_eq!(trace.rows.len(), toks.len() - 1);
    assert_eq!(trace.models, vec!["pretrained", "song", "celebrity"]);
    for (i, row) in trace.rows.iter().enumerate() {
        assert_eq!(row.token, format!("t{}", toks[i + 1]));
        assert_eq!(row.pfusion.len(), 3);
        assert!((row.pfusion.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for pc in &row.pcontext {
            assert_eq!(pc.len(), 5);
            assert!((pc.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let table = trace.to_tsv();
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(header.len(), 1 + 3 + 2 * 5);
    for line in lines {
        let vals: Vec<f64> = line.split('\t').skip(1).take(3).map(|v| v.parse().unwrap()).collect();
        assert!((vals.iter().sum::<f64>() - 1.0).abs() <= 1e-2 + 1e-12);
    }
}

#[test]
fn fusion_checkpoint_roundtrip() {
    let ealm = random_ealm(2, 4, 24);
    let back = FusionLayer::from_checkpoint(&ealm.fusion.to_checkpoint()).unwrap();
    assert_eq!(back.manifest, ealm.fusion.manifest);
    let rebuilt = Ealm::assemble(ealm.pretrained.clone(), ealm.entities.clone(), back).unwrap();
    let toks = random_tokens(7, VOCAB, 25);
    assert!(ealm.forward(&toks).unwrap().probs.bitwise_eq(&rebuilt.forward(&toks).unwrap().probs));
}
