mod common;

use std::sync::Arc;

use sha2::{Digest, Sha256};

use nmsparse::mask::{LayerMask, MaskCandidateSet, Pattern};
use nmsparse::models::{
    eval_batches, pretrain_dense, synthetic_text, BatchIter, Domain, FixedBatches, Model, ModelSpec, PretrainConfig,
    RegressionBatch, TransformerLm,
};
use nmsparse::pruners::magnitude_masks;
use nmsparse::tensor::{Tape, Tensor};
use nmsparse::trainer::{
    apply_masks, evaluate_loss, evaluate_perplexity, init_logits, layer_sensitivity, mask_diff_deciles, train_masks,
    transfer_masks, Checkpoint, MaskTrainer, SensitivityStrategy, TrainConfig, TrainError, TransferBase,
};

fn weights_digest<M: Model<f64>>(m: &M) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in m.params() {
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

fn tiny_lm(seed: u64) -> (TransformerLm<f64>, Arc<[u8]>, Vec<nmsparse::models::TokenBatch>) {
    let spec = ModelSpec::transformer(256, 16, 1, 2, 16);
    let mut lm = TransformerLm::<f64>::new(spec, seed).unwrap();
    let text: Arc<[u8]> = synthetic_text(Domain::A, 8000, seed).into();
    let mut it = BatchIter::new(text.clone(), 4, 16, seed).unwrap();
    let val = eval_batches(&text[..1024], 4, 16).unwrap();
    let cfg = PretrainConfig {
        steps: 60,
        ..PretrainConfig::default()
    };
    pretrain_dense(&mut lm, &mut it, &val, &cfg).unwrap();
    (lm, text, val)
}

#[test]
fn learned_masks_approach_brute_force_optimum() {
    let mut within = 0;
    for seed in 0..3u64 {
        let reg = common::regression(100 + seed, 256, 8, 4, 0.8);
        let (best, best_idx) = reg.brute_force();
        let model = reg.model();
        let batch = reg.batch();
        // The exhaustive optimum agrees with the tape's loss.
        let oracle_mask = LayerMask::new("w", 4, 8, Pattern::TWO_FOUR, best_idx).unwrap();
        let tape_best = evaluate_loss(&model, Some(&[oracle_mask]), &[batch.clone()]).unwrap();
        assert!((tape_best - best).abs() < 1e-9 * best.max(1.0));
        let mut data = FixedBatches::new(vec![batch.clone()]).unwrap();
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let r = train_masks(&model, &mut data, &cfg, None).unwrap();
        let learned = evaluate_loss(&model, Some(&r.masks), &[batch]).unwrap();
        assert!(learned >= best - 1e-9);
        if learned <= 1.05 * best {
            within += 1;
        }
    }
    assert!(within >= 2, "only {within} of 3 seeds within 5%");
}

#[test]
fn one_hot_soft_masks_reproduce_hard_loss() {
    let reg = common::regression(7, 64, 8, 4, 0.5);
    let model = reg.model();
    let batch = reg.batch();
    let idx: Vec<u16> = vec![0, 3, 5, 1, 2, 4, 0, 5];
    let hard = LayerMask::new("w", 4, 8, Pattern::TWO_FOUR, idx.clone()).unwrap();
    let want = evaluate_loss(&model, Some(&[hard]), &[batch.clone()]).unwrap();
    let cfg = TrainConfig {
        lambda_reg: 0.0,
        ..TrainConfig::default()
    };
    let mut t = MaskTrainer::new(&model, cfg, None).unwrap();
    let d = &mut t.distributions_mut()[0];
    d.logits = Tensor::from_fn(vec![8, 6], |i| if i % 6 == idx[i / 6] as usize { 1.0 } else { 0.0 });
    let noise = vec![Tensor::zeros(vec![8, 6])];
    let mut tape = Tape::new();
    let obj = t.build_objective(&mut tape, &batch, 0.05, 500.0, &noise).unwrap();
    let got = tape.scalar(obj.total).unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert_eq!(obj.total, obj.loss);
}

#[test]
fn regularizer_enters_with_negative_sign() {
    let reg = common::regression(8, 32, 8, 4, 0.5);
    let model = reg.model();
    let batch = reg.batch();
    let cfg = TrainConfig {
        lambda_reg: 0.5,
        ..TrainConfig::default()
    };
    let mut t = MaskTrainer::new(&model, cfg, None).unwrap();
    let noise = t.sample_noise();
    let mut tape = Tape::new();
    let obj = t.build_objective(&mut tape, &batch, 1.0, 100.0, &noise).unwrap();
    let (total, loss, r) = (
        tape.scalar(obj.total).unwrap(),
        tape.scalar(obj.loss).unwrap(),
        tape.scalar(obj.reg).unwrap(),
    );
    assert!(r > 0.0);
    assert!((total - (loss - 0.5 * r)).abs() < 1e-12);
}

#[test]
fn init_logits_examples() {
    let reg = common::regression(1, 16, 8, 4, 0.5);
    let model = reg.model();
    let zero = TrainConfig {
        logits_init_std: 0.0,
        ..TrainConfig::default()
    };
    let d = init_logits::<f64, _>(&model, &zero, None).unwrap();
    assert!(d[0].logits.data().iter().all(|&v| v == 0.0));
    assert!(d[0].final_mask().block_indices.iter().all(|&i| i == 0));

    let prior = LayerMask::new("w", 4, 8, Pattern::TWO_FOUR, vec![5; 8]).unwrap();
    let no_alpha = TrainConfig {
        prior_strength: 0.0,
        ..TrainConfig::default()
    };
    let a = init_logits::<f64, _>(&model, &no_alpha, Some(&[prior.clone()])).unwrap();
    let b = init_logits::<f64, _>(&model, &no_alpha, None).unwrap();
    assert_eq!(a[0].logits, b[0].logits);

    let bad = LayerMask::new("w", 2, 16, Pattern::TWO_FOUR, vec![0; 8]).unwrap();
    assert!(init_logits::<f64, _>(&model, &TrainConfig::default(), Some(&[bad])).is_err());
    let stranger = LayerMask::new("v", 4, 8, Pattern::TWO_FOUR, vec![0; 8]).unwrap();
    assert!(init_logits::<f64, _>(&model, &TrainConfig::default(), Some(&[stranger])).is_err());
}

#[test]
fn prior_fixes_the_argmax_of_almost_every_block() {
    // 10^4 blocks: a 2500×16 weight.
    let w = Tensor::<f64>::zeros(vec![2500, 16]);
    let model = nmsparse::models::LinearModel::with_weight(w, 4).unwrap();
    let set = MaskCandidateSet::for_pattern(Pattern::TWO_FOUR);
    let idx: Vec<u16> = (0..10_000).map(|i| (i * 7 % 6) as u16).collect();
    let prior = LayerMask::new("w", 2500, 16, Pattern::TWO_FOUR, idx.clone()).unwrap();
    let d = init_logits::<f64, _>(&model, &TrainConfig::default(), Some(&[prior])).unwrap();
    let got = d[0].final_mask().block_indices;
    let agree = got.iter().zip(&idx).filter(|(a, b)| a == b).count();
    assert!(agree as f64 / 1e4 >= 0.99, "agreement {agree}");
    assert_eq!(set.len(), 6);
}

#[test]
fn zero_steps_return_initial_argmax_and_base_masks() {
    let reg = common::regression(2, 16, 8, 4, 0.5);
    let model = reg.model();
    let cfg = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    let mut data = FixedBatches::new(vec![reg.batch()]).unwrap();
    let init = init_logits::<f64, _>(&model, &cfg, None).unwrap();
    let r = train_masks(&model, &mut data, &cfg, None).unwrap();
    assert_eq!(r.masks, vec![init[0].final_mask()]);
    assert!(r.metrics.is_empty());

    let base = magnitude_masks(&model, Pattern::TWO_FOUR, &[]).unwrap();
    let t = transfer_masks(&model, TransferBase::Masks(&base), &mut data, &cfg).unwrap();
    assert_eq!(t.masks, base);
}

#[test]
fn training_freezes_weights_and_is_deterministic() {
    let (lm, text, _) = tiny_lm(3);
    let before = weights_digest(&lm);
    let cfg = TrainConfig {
        steps: 30,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut it = BatchIter::new(text.clone(), 4, 16, 11).unwrap();
        train_masks(&lm, &mut it, &cfg, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(weights_digest(&lm), before);
    for m in &a.metrics {
        assert!(m.loss.is_finite() && m.reg.is_finite() && m.grad_norm.is_finite());
        assert!(m.mask_diff >= 0.0);
        assert!(m.max_prob_mean >= 1.0 / 6.0 - 1e-12 && m.max_prob_mean <= 1.0 + 1e-12);
        assert!(m.max_prob_p10 <= m.max_prob_mean + 1e-12);
    }
    assert_eq!(a.metrics[0].mask_diff, 0.0);

    let mut it = BatchIter::new(text.clone(), 4, 16, 11).unwrap();
    let t = transfer_masks(&lm, TransferBase::Masks(&a.masks), &mut it, &cfg).unwrap();
    assert_eq!(t.masks.len(), 6);
    assert_eq!(weights_digest(&lm), before);
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let (lm, text, _) = tiny_lm(4);
    let cfg = TrainConfig {
        steps: 24,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut it = BatchIter::new(text.clone(), 4, 16, 2).unwrap();
    let full = train_masks(&lm, &mut it, &cfg, None).unwrap();

    let mut it = BatchIter::new(text.clone(), 4, 16, 2).unwrap();
    let mut t = MaskTrainer::new(&lm, cfg.clone(), None).unwrap();
    for _ in 0..10 {
        t.train_step(&mut it).unwrap();
    }
    let bytes = t.checkpoint().to_bytes();
    drop(t);
    let ckpt = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    let mut fresh = BatchIter::new(text.clone(), 4, 16, 2).unwrap();
    let mut resumed = MaskTrainer::resume(&lm, cfg.clone(), &ckpt, &mut fresh).unwrap();
    assert_eq!(resumed.step(), 10);
    resumed.run(&mut fresh).unwrap();
    assert_eq!(resumed.metrics(), &full.metrics[10..]);
    let report = resumed.into_report();
    assert_eq!(report.masks, full.masks);
    assert_eq!(report.checkpoint, full.checkpoint);

    let other = TrainConfig { seed: 10, ..cfg };
    let mut it = BatchIter::new(text, 4, 16, 2).unwrap();
    assert!(matches!(
        MaskTrainer::resume(&lm, other, &ckpt, &mut it),
        Err(TrainError::ConfigMismatch)
    ));
}

#[test]
fn divergence_and_nan_abort_with_checkpoint() {
    let reg = common::regression(3, 16, 8, 4, 0.5);
    let model = reg.model();
    let calm = reg.batch();
    let wild = RegressionBatch::new(
        calm.x.clone(),
        Tensor::from_fn(calm.y.shape().to_vec(), |i| calm.y.data()[i] * 1e4),
    )
    .unwrap();
    let mut data = FixedBatches::new(vec![calm, wild]).unwrap();
    let cfg = TrainConfig {
        steps: 5,
        ..TrainConfig::default()
    };
    match train_masks(&model, &mut data, &cfg, None) {
        Err(TrainError::Diverged { step, checkpoint, .. }) => {
            assert_eq!(step, 1);
            assert_eq!(Checkpoint::<f64>::from_bytes(&checkpoint).unwrap().step, 1);
        }
        other => panic!("expected divergence, got {other:?}"),
    }

    let nan = nmsparse::models::LinearModel::with_weight(Tensor::full(vec![4, 8], f64::NAN), 4).unwrap();
    let mut data = FixedBatches::new(vec![reg.batch()]).unwrap();
    assert!(matches!(
        train_masks(&nan, &mut data, &cfg, None),
        Err(TrainError::NonFinite { step: 0, .. })
    ));
}

#[test]
fn default_schedule_converges_and_sharpens() {
    let reg = common::regression(5, 128, 16, 8, 0.8);
    let model = nmsparse::models::LinearModel::with_weight(
        Tensor::new(vec![8, 16], reg.w.clone()).unwrap(),
        4,
    )
    .unwrap();
    let mut data = FixedBatches::new(vec![reg.batch()]).unwrap();
    let cfg = TrainConfig::default();
    let mut t = MaskTrainer::new(&model, cfg.clone(), None).unwrap();
    let start = t.mean_max_probability(cfg.kappa_start);
    t.run(&mut data).unwrap();
    let end = t.mean_max_probability(cfg.kappa_end);
    assert!(end > start);
    let (first, last) = mask_diff_deciles(t.metrics());
    assert!(last <= first, "{first} -> {last}");
}

#[test]
fn evaluation_paths_agree() {
    let (lm, _, val) = tiny_lm(6);
    let set = MaskCandidateSet::for_pattern(Pattern::TWO_FOUR);
    let zero: Vec<LayerMask> = lm
        .prunable()
        .iter()
        .map(|(_, p)| {
            let (r, c) = (p.value.shape()[0], p.value.shape()[1]);
            LayerMask::new(p.name.clone(), r, c, Pattern::TWO_FOUR, vec![0; r * c / 4]).unwrap()
        })
        .collect();
    let via_masks = evaluate_perplexity(&lm, Some(&zero), &val).unwrap();
    let mut explicit = lm.clone();
    for m in &zero {
        let i = explicit.param_index(&m.tensor_name).unwrap();
        let v = explicit.params()[i].value.hadamard(&m.expand(&set)).unwrap();
        explicit.params_mut()[i].value = v;
    }
    let direct = evaluate_perplexity(&explicit, None, &val).unwrap();
    assert!((via_masks - direct).abs() <= 1e-10);
    assert_eq!(apply_masks(&lm, &zero).unwrap().len(), lm.params().len());

    let dense = evaluate_perplexity(&lm, None, &val).unwrap();
    let rows = layer_sensitivity(&lm, &zero, &val, &SensitivityStrategy::Explicit(vec!["all".into()])).unwrap();
    assert_eq!(rows[0].perplexity, via_masks);
    assert_eq!(rows[1].perplexity, dense);
    let rows = layer_sensitivity(&lm, &zero, &val, &SensitivityStrategy::Explicit(vec![])).unwrap();
    assert_eq!(rows[1].perplexity, via_masks);
    let rows = layer_sensitivity(&lm, &zero, &val, &SensitivityStrategy::SkipLast(1)).unwrap();
    assert_eq!(rows[1].dense_layers, vec!["layer0".to_string()]);
    assert_eq!(rows[1].perplexity, dense);
    assert!(matches!(
        layer_sensitivity(&lm, &zero, &val, &SensitivityStrategy::Explicit(vec!["layer9".into()])),
        Err(TrainError::UnknownLayer(_))
    ));
    assert!(evaluate_loss(&lm, None, &[]).is_err());
}

#[test]
fn keeping_the_last_layer_dense_helps() {
    let mut ok = 0;
    for seed in 0..3u64 {
        let spec = ModelSpec::transformer(256, 16, 2, 2, 16);
        let mut lm = TransformerLm::<f64>::new(spec, seed).unwrap();
        let text: Arc<[u8]> = synthetic_text(Domain::Mixed, 12_000, seed).into();
        let mut it = BatchIter::new(text.clone(), 4, 16, seed).unwrap();
        let val = eval_batches(&text[..2048], 4, 16).unwrap();
        let cfg = PretrainConfig {
            steps: 150,
            ..PretrainConfig::default()
        };
        pretrain_dense(&mut lm, &mut it, &val, &cfg).unwrap();
        let masks = magnitude_masks(&lm, Pattern::TWO_FOUR, &[]).unwrap();
        let rows = layer_sensitivity(&lm, &masks, &val, &SensitivityStrategy::SkipLast(1)).unwrap();
        assert_eq!(rows[1].dense_layers, vec!["layer1".to_string()]);
        ok += (rows[1].perplexity <= rows[0].perplexity) as usize;
    }
    assert!(ok >= 2, "{ok}/3");
}
