use ndarray::Array1;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uivlm_core::eval::Prediction;
use uivlm_core::sequence::{build_prompt, build_sequence, HistoryConfig, ModelInput};
use uivlm_core::synthetic::{generate_corpus, GeneratorConfig, TaskFamily};
use uivlm_core::vocab::{BOS, EOA, PAD};
use uivlm_core::{serialize_action, Episode, Vocab};
use uivlm_model::forward::{backward, forward, logits, loss};
use uivlm_model::infer::{decode_action, predict_action, DECODE_CAP};
use uivlm_model::train::{prepare_examples, train_params, train_with};
use uivlm_model::{
    predict_episodes, Checkpoint, FreezeFlags, InferenceModel, LrSchedule, ModelConfig, Params,
    TrainConfig, TrainError,
};

fn episodes(n: usize, seed: u64) -> Vec<Episode> {
    generate_corpus(&GeneratorConfig::new(n, seed))
        .unwrap()
        .0
        .into_episodes()
}

fn history() -> HistoryConfig {
    HistoryConfig {
        max_history: 2,
        slots_per_image: 16,
    }
}

/// Nonzero adapters and non-trivial norms, so every path carries signal.
fn perturbed(cfg: &ModelConfig, seed: u64) -> Params<f64> {
    let mut p: Params<f64> = Params::init(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for b in &mut p.blocks {
        for l in [&mut b.lora_q, &mut b.lora_v, &mut b.lora_1, &mut b.lora_2] {
            l.b.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        }
        for g in [&mut b.ln1_g, &mut b.ln2_g] {
            g.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
        }
        for g in [&mut b.ln1_b, &mut b.ln2_b] {
            g.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
    }
    p
}

fn tiny_fixture() -> (Vocab, ModelConfig, Vec<Episode>) {
    let vocab = Vocab::standard();
    let cfg = ModelConfig::tiny(vocab.len());
    (vocab, cfg, episodes(6, 3))
}

fn small_train_config() -> TrainConfig {
    TrainConfig {
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        d_ff: 64,
        vision_width: 16,
        lora_rank: 4,
        lora_alpha: 8.0,
        batch_size: 4,
        learning_rate: 3e-3,
        epochs: 100,
        max_steps: 50,
        ..TrainConfig::default()
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let (vocab, cfg, eps) = tiny_fixture();
    let mut p: Params<f64> = Params::init(&cfg, 1);
    p.head.fill(0.0);
    let m = build_sequence(&eps[0], 1, &history(), &vocab).unwrap();
    let l = loss(&p, &m).unwrap();
    assert!((l - (vocab.len() as f64).ln()).abs() < 1e-12, "{l}");
}

#[test]
fn two_token_cross_entropy_matches_closed_form() {
    let vocab = Vocab::standard();
    let cfg = ModelConfig::tiny(vocab.len());
    let mut p: Params<f64> = Params::init(&cfg, 2);
    // Final norm outputs the first basis vector, so the logits are the
    // head's first column.
    p.lnf_g.fill(0.0);
    p.lnf_b = Array1::from_shape_fn(cfg.d_model, |i| if i == 0 { 1.0 } else { 0.0 });
    p.head.fill(0.0);
    let x = vocab.id("tap").unwrap();
    p.head[[x as usize, 0]] = 3f64.ln();
    p.head[[EOA as usize, 0]] = 2f64.ln();
    let m = ModelInput {
        token_ids: vec![BOS, x],
        targets: vec![x, EOA],
        loss_mask: vec![true, true],
        vision_slots: vec![],
        images: vec![],
        episode_id: "hand".into(),
        step_index: 0,
    };
    // Partition function: V - 2 tokens at weight 1, one at 3, one at 2.
    let z = vocab.len() as f64 - 2.0 + 3.0 + 2.0;
    let want = ((z.ln() - 3f64.ln()) + (z.ln() - 2f64.ln())) / 2.0;
    assert!((loss(&p, &m).unwrap() - want).abs() < 1e-12);
}

#[test]
fn loss_is_mean_cross_entropy_over_masked_rows() {
    let (vocab, cfg, eps) = tiny_fixture();
    let p = perturbed(&cfg, 4);
    let m = build_sequence(&eps[1], 2, &history(), &vocab).unwrap();
    let all = logits(&p, &m).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for t in 0..m.len() {
        if m.loss_mask[t] {
            let row = all.row(t);
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[m.targets[t] as usize];
            n += 1;
        }
    }
    assert!((loss(&p, &m).unwrap() - total / n as f64).abs() < 1e-10);
}

#[test]
fn unmasked_targets_do_not_matter() {
    let (vocab, cfg, eps) = tiny_fixture();
    let p: Params<f32> = Params::init(&cfg, 5);
    let m = build_sequence(&eps[2], 1, &history(), &vocab).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut other = m.clone();
    for t in 0..m.len() {
        if !m.loss_mask[t] {
            other.targets[t] = rng.random_range(0..vocab.len() as u32);
        }
    }
    assert_ne!(other.targets, m.targets);
    assert_eq!(
        loss(&p, &m).unwrap().to_bits(),
        loss(&p, &other).unwrap().to_bits()
    );
}

#[test]
fn empty_mask_is_an_error() {
    let (vocab, cfg, eps) = tiny_fixture();
    let p: Params<f32> = Params::init(&cfg, 5);
    let mut m = build_sequence(&eps[0], 0, &history(), &vocab).unwrap();
    m.loss_mask.fill(false);
    assert!(loss(&p, &m).is_err());
}

#[test]
fn zero_adapters_are_exactly_the_base_model() {
    let (vocab, cfg, eps) = tiny_fixture();
    let p: Params<f32> = Params::init(&cfg, 6);
    let mut other = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for b in &mut other.blocks {
        for l in [&mut b.lora_q, &mut b.lora_v, &mut b.lora_1, &mut b.lora_2] {
            assert!(l.b.iter().all(|&v| v == 0.0));
            l.a.mapv_inplace(|_| rng.random_range(-5.0..5.0));
        }
    }
    let m = build_sequence(&eps[0], 1, &history(), &vocab).unwrap();
    let a = logits(&p, &m).unwrap();
    let b = logits(&other, &m).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn gradients_match_finite_differences_on_a_sample() {
    let (vocab, cfg, eps) = tiny_fixture();
    let p = perturbed(&cfg, 7);
    let m = build_sequence(&eps[3], 2, &history(), &vocab).unwrap();
    let open = FreezeFlags {
        vision_encoder: false,
        token_embeddings: false,
        decoder_base: false,
    };
    let tr = forward(&p, &m, None).unwrap();
    let scale = 1.0 / tr.supervised() as f64;
    let mut g = p.zeros_like();
    backward(&p, &m, &tr, scale, &open, &mut g);
    let analytic: Vec<_> = g
        .views()
        .into_iter()
        .map(|(n, _, t)| (n, t.to_owned()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, grad) in analytic {
        let n = grad.len();
        for _ in 0..6 {
            let i = rng.random_range(0..n);
            let eval = |delta: f64| {
                let mut q = p.clone();
                q.for_each_mut(|nm, _, mut t| {
                    if nm == name {
                        *t.iter_mut().nth(i).unwrap() += delta;
                    }
                });
                loss(&q, &m).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = *grad.iter().nth(i).unwrap();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{i}]: analytic {a} numeric {numeric}");
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn small_gradient_step_lowers_loss() {
    let (vocab, cfg, eps) = tiny_fixture();
    let p = perturbed(&cfg, 8);
    let m = build_sequence(&eps[4], 1, &history(), &vocab).unwrap();
    let tr = forward(&p, &m, None).unwrap();
    let mut g = p.zeros_like();
    backward(
        &p,
        &m,
        &tr,
        1.0 / tr.supervised() as f64,
        &FreezeFlags::default(),
        &mut g,
    );
    let mut q = p.clone();
    q.zip_mut(&g, |_, _, mut w, d| w.scaled_add(-1e-3, &d));
    assert!(loss(&q, &m).unwrap() < loss(&p, &m).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn logits_ignore_the_future(cut in 1usize..60, tok in 5u32..200, seed in 0u64..4) {
        let (vocab, cfg, eps) = tiny_fixture();
        let p = perturbed(&cfg, seed);
        let ep = &eps[seed as usize];
        let m = build_sequence(ep, ep.steps.len() - 1, &history(), &vocab).unwrap();
        let cut = cut.min(m.len() - 1);
        let mut other = m.clone();
        for t in cut..m.len() {
            if !other.vision_slots.iter().any(|s| s.position == t) {
                other.token_ids[t] = tok;
            }
        }
        // Images that appear only after the cut may change as well.
        let first_late = other.vision_slots.iter().find(|s| s.position >= cut).map(|s| s.image_index);
        if let Some(k) = first_late {
            if other.vision_slots.iter().all(|s| s.image_index != k || s.position >= cut) {
                other.images[k].fill_rect(10, 10, 50, 50, 201);
            }
        }
        let a = logits(&p, &m).unwrap();
        let b = logits(&p, &other).unwrap();
        for t in 0..cut {
            for (x, y) in a.row(t).iter().zip(b.row(t)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cached_decoding_matches_full_forward() {
    let (vocab, cfg, eps) = tiny_fixture();
    let p = perturbed(&cfg, 12);
    let model = InferenceModel::new(&p);
    let ep = eps.iter().max_by_key(|e| e.steps.len()).unwrap();
    let last = ep.steps.len() - 1;
    let full = build_sequence(ep, last, &history(), &vocab).unwrap();
    let prompt = build_prompt(ep, last, &history(), &vocab).unwrap();
    let reference = logits(&p, &full).unwrap();
    let mut sess = model.start(&prompt).unwrap();
    for t in prompt.len() - 1..full.len() {
        let got = sess.logits();
        for (x, y) in got.iter().zip(reference.row(t)) {
            assert!((x - y).abs() < 1e-9, "position {t}: {x} vs {y}");
        }
        if t + 1 < full.len() {
            sess.push(full.token_ids[t + 1]);
        }
    }
}

/// A model that emits `token` at every position regardless of input.
fn constant_model(cfg: &ModelConfig, token: u32) -> InferenceModel<f32> {
    let mut p: Params<f32> = Params::init(cfg, 0);
    p.lnf_g.fill(0.0);
    p.lnf_b = Array1::from_shape_fn(cfg.d_model, |i| if i == 0 { 1.0 } else { 0.0 });
    p.head.fill(0.0);
    p.head[[token as usize, 0]] = 10.0;
    InferenceModel::new(&p)
}

#[test]
fn decoding_stops_at_the_cap() {
    let (vocab, cfg, eps) = tiny_fixture();
    let model = constant_model(&cfg, vocab.id("tap").unwrap());
    let prompt = build_prompt(&eps[0], 0, &history(), &vocab).unwrap();
    match decode_action(&model, &prompt, &vocab) {
        Prediction::DecodeFailure(msg) => assert!(msg.contains(&DECODE_CAP.to_string()), "{msg}"),
        other => panic!("expected a decode failure, got {other:?}"),
    }
    let model = constant_model(&cfg, EOA);
    assert!(matches!(
        decode_action(&model, &prompt, &vocab),
        Prediction::DecodeFailure(_)
    ));
    let model = constant_model(&cfg, PAD);
    assert!(matches!(
        decode_action(&model, &prompt, &vocab),
        Prediction::DecodeFailure(_)
    ));
}

#[test]
fn untrained_models_always_answer() {
    let vocab = Vocab::standard();
    let eps = episodes(30, 21);
    for seed in 0..3 {
        let p: Params<f32> = Params::init(&ModelConfig::tiny(vocab.len()), seed);
        let model = InferenceModel::new(&p);
        let recs = predict_episodes(&model, &eps, &history(), &vocab);
        assert_eq!(recs.len(), eps.iter().map(|e| e.steps.len()).sum::<usize>());
        for (r, (ep, i)) in recs.iter().zip(
            eps.iter()
                .flat_map(|e| (0..e.steps.len()).map(move |i| (e, i))),
        ) {
            assert_eq!((r.episode_id.as_str(), r.step_index), (ep.id.as_str(), i));
        }
    }
}

#[test]
fn frozen_tensors_stay_bit_identical() {
    let vocab = Vocab::standard();
    let eps = episodes(12, 13);
    let cfg = TrainConfig {
        max_steps: 6,
        learning_rate: 1e-2,
        lora_dropout: 0.1,
        ..small_train_config()
    };
    let model = cfg.model_config(vocab.len(), 64);
    let examples = prepare_examples(
        &eps,
        &HistoryConfig {
            max_history: 2,
            slots_per_image: 16,
        },
        &vocab,
        &model,
        true,
    )
    .unwrap();
    let before: Params<f32> = Params::init(&model, 3);
    let after = train_params(before.clone(), &examples, &cfg, |_| {})
        .unwrap()
        .params;
    let old = before.views();
    for ((name, group, a), (_, _, b)) in after.views().into_iter().zip(old) {
        let same = a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        let trainable = group.trainable(&cfg.freeze);
        if trainable {
            // A-matrices only move once B has left zero; every tensor
            // still moves within a few steps.
            assert!(!same, "{name} did not change");
        } else {
            assert!(same, "{name} changed while frozen");
        }
    }
}

#[test]
fn unfrozen_groups_train() {
    let vocab = Vocab::standard();
    let eps = episodes(8, 13);
    let cfg = TrainConfig {
        max_steps: 3,
        freeze: FreezeFlags {
            vision_encoder: false,
            token_embeddings: false,
            decoder_base: false,
        },
        ..small_train_config()
    };
    let model = cfg.model_config(vocab.len(), 64);
    let examples = prepare_examples(&eps, &history(), &vocab, &model, true).unwrap();
    let before: Params<f32> = Params::init(&model, 3);
    let after = train_params(before.clone(), &examples, &cfg, |_| {})
        .unwrap()
        .params;
    assert_ne!(after.ve_w, before.ve_w);
    assert_ne!(after.tok_emb, before.tok_emb);
    assert_ne!(after.blocks[0].wk, before.blocks[0].wk);
    assert_ne!(after.head, before.head);
}

#[test]
fn fifty_steps_reduce_loss_deterministically() {
    let vocab = Vocab::standard();
    let eps = episodes(20, 17);
    let cfg = small_train_config();
    let a = train_with(&eps, &vocab, &cfg, |_| {}).unwrap();
    assert_eq!(a.steps, 50);
    let first: f64 = a.losses[..5].iter().map(|p| p.loss).sum::<f64>() / 5.0;
    let last: f64 = a.losses[45..].iter().map(|p| p.loss).sum::<f64>() / 5.0;
    assert!(last < first, "{first} -> {last}");
    let b = train_with(&eps, &vocab, &cfg, |_| {}).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.params, b.params);
    let c = train_with(&eps, &vocab, &TrainConfig { seed: 1, ..cfg }, |_| {}).unwrap();
    assert_ne!(a.losses, c.losses);
}

#[test]
fn divergence_reports_the_step() {
    let vocab = Vocab::standard();
    let eps = episodes(8, 2);
    let cfg = TrainConfig {
        // Adam steps have size ~lr, so the adapters overflow f32 at once.
        learning_rate: 1e38,
        grad_clip: 0.0,
        ..small_train_config()
    };
    match train_with(&eps, &vocab, &cfg, |_| {}) {
        Err(TrainError::Divergence { step }) => assert!(step < 50),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.steps)),
    }
}

#[test]
fn single_episode_is_memorized() {
    let vocab = Vocab::standard();
    let ep = generate_corpus(&GeneratorConfig::new(1, 4).with_family(TaskFamily::ScrollFind))
        .unwrap()
        .0
        .into_episodes();
    let cfg = TrainConfig {
        max_steps: 150,
        epochs: 1000,
        batch_size: 1,
        learning_rate: 1e-2,
        lora_dropout: 0.0,
        ..small_train_config()
    };
    let out = train_with(&ep, &vocab, &cfg, |_| {}).unwrap();
    let model = InferenceModel::new(&out.params);
    let hist = uivlm_model::train::history_config(&cfg, &out.params.config);
    for (i, s) in ep[0].steps.iter().enumerate() {
        match predict_action(&model, &ep[0], i, &hist, &vocab) {
            // Equal up to coordinate binning.
            Prediction::Action(a) => assert_eq!(
                serialize_action(&a),
                serialize_action(&s.gold_action),
                "step {i}"
            ),
            p => panic!("step {i}: {p:?}"),
        }
    }
}

#[test]
fn checkpoint_file_round_trip_preserves_predictions() {
    let vocab = Vocab::standard();
    let eps = episodes(6, 8);
    let cfg = TrainConfig {
        max_steps: 5,
        ..small_train_config()
    };
    let out = train_with(&eps, &vocab, &cfg, |_| {}).unwrap();
    let ck = Checkpoint {
        model: out.params.config.clone(),
        train: cfg.clone(),
        vocab_hash: vocab.hash(),
        params: out.params,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let hist = history();
    let a = predict_episodes(&InferenceModel::new(&ck.params), &eps, &hist, &vocab);
    let b = predict_episodes(&InferenceModel::new(&back.params), &eps, &hist, &vocab);
    assert_eq!(a, b);
}

#[test]
fn learning_rate_warms_up_then_decays_to_zero() {
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        warmup_steps: 10,
        ..TrainConfig::default()
    };
    assert!((cfg.lr_at(0, 100) - 1e-4).abs() < 1e-15);
    assert!((cfg.lr_at(9, 100) - 1e-3 * 0.91).abs() < 1e-15);
    assert!((cfg.lr_at(50, 100) - 5e-4).abs() < 1e-15);
    assert!(cfg.lr_at(99, 100) > 0.0);
    let flat = TrainConfig {
        lr_schedule: LrSchedule::Constant,
        warmup_steps: 0,
        ..cfg
    };
    assert_eq!(flat.lr_at(0, 100), 1e-3);
    assert_eq!(flat.lr_at(99, 100), 1e-3);
}
