use lazystrike::vit::{
    evaluate, forward, gen_synthetic, train, train_from, HeadType, SynthConfig, ToyViTConfig, ToyViTParams,
    TrainOptions,
};
use lazystrike::{Execution, LazyStrikeParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(head: HeadType) -> ToyViTConfig {
    ToyViTConfig {
        image_size: 8,
        channels: 2,
        patch_size: 2,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        head,
        window_schedule: vec![None, None],
        seed: 7,
        ..Default::default()
    }
}

/// Regression guard: logits recorded by `examples/make_fixtures.rs`.
#[test]
fn logits_match_recorded_fixture() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden_logits.jsonl")).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let head = match v["head"].as_str().unwrap() {
            "gap" => HeadType::Gap,
            "cls" => HeadType::Cls,
            _ => HeadType::LazyStrike,
        };
        let cfg = small(head);
        let params = ToyViTParams::init(&cfg).unwrap();
        let image = Tensor::randn(&[8, 8, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(42));
        let logits = forward(&image, &params, &cfg).unwrap().logits;
        let want: Vec<f64> = v["logits"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        for (a, b) in logits.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "{head:?}: {a} vs {b}");
        }
    }
}

/// The classifier is affine in the global token.
#[test]
fn logits_are_affine_in_global_token() {
    for head in [HeadType::Gap, HeadType::Cls, HeadType::LazyStrike] {
        let cfg = small(head);
        let p = ToyViTParams::init(&cfg).unwrap();
        let image = Tensor::randn(&[8, 8, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let out = forward(&image, &p, &cfg).unwrap();
        let (d, c) = (cfg.dim, cfg.num_classes);
        for k in 0..c {
            let want: f64 = p.b_head.data()[k] + (0..d).map(|j| out.global[j] * p.w_head.data()[j * c + k]).sum::<f64>();
            assert!((out.logits[k] - want).abs() < 1e-12);
        }
    }
}

/// Permuting classifier columns permutes the logits the same way.
#[test]
fn class_permutation_permutes_logits() {
    let cfg = small(HeadType::LazyStrike);
    let p = ToyViTParams::init(&cfg).unwrap();
    let perm = [2usize, 0, 1];
    let mut q = p.clone();
    let c = cfg.num_classes;
    for j in 0..cfg.dim {
        for (k, &src) in perm.iter().enumerate() {
            q.w_head.data_mut()[j * c + k] = p.w_head.data()[j * c + src];
        }
    }
    for (k, &src) in perm.iter().enumerate() {
        q.b_head.data_mut()[k] = p.b_head.data()[src];
    }
    let image = Tensor::randn(&[8, 8, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
    let a = forward(&image, &p, &cfg).unwrap().logits;
    let b = forward(&image, &q, &cfg).unwrap().logits;
    for (k, &src) in perm.iter().enumerate() {
        assert_eq!(b[k], a[src]);
    }
}

#[test]
fn lazystrike_with_all_patches_matches_gap_head() {
    let gap = small(HeadType::Gap);
    let mut ls = small(HeadType::LazyStrike);
    ls.lazystrike = LazyStrikeParams::new(gap.n_patches(), f64::INFINITY, 1e-6);
    let p = ToyViTParams::init(&gap).unwrap();
    for seed in 0..4 {
        let image = Tensor::randn(&[8, 8, 2], 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = forward(&image, &p, &gap).unwrap().logits;
        let b = forward(&image, &p, &ls).unwrap().logits;
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-9));
    }
}

fn tiny_task() -> (ToyViTConfig, SynthConfig) {
    let synth = SynthConfig { grid: 4, patch_size: 2, channels: 2, classes: 2, fg_min: 1, fg_max: 2, noise_level: 0.3, seed: 4 };
    let cfg = ToyViTConfig {
        image_size: synth.image_size(),
        channels: 2,
        patch_size: 2,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 2,
        window_schedule: vec![None],
        seed: 1,
        ..Default::default()
    };
    (cfg, synth)
}

/// A separable 32-sample set is memorised.
#[test]
fn overfits_small_separable_set() {
    let (cfg, synth) = tiny_task();
    let data = gen_synthetic(32, &synth).unwrap();
    let opts = TrainOptions { epochs: 200, lr: 0.05, batch_size: 8, ..Default::default() };
    let mut best = 0.0f64;
    // Evaluated on the training set itself since heldout is empty.
    let r = train_from(ToyViTParams::init(&cfg).unwrap(), &cfg, &data, &[], &opts, Execution::default(), |e| {
        best = best.max(e.top1)
    })
    .unwrap();
    assert!(best >= 0.95, "best train accuracy {best}");
    assert!(r.log.last().unwrap().loss < r.log[0].loss);
}

#[test]
fn training_is_identical_across_execution_modes() {
    let (cfg, synth) = tiny_task();
    let data = gen_synthetic(40, &synth).unwrap();
    let opts = TrainOptions { epochs: 2, batch_size: 8, ..Default::default() };
    let a = train(&cfg, &data[..32], &data[32..], &opts, Execution::Sequential).unwrap();
    let b = train(&cfg, &data[..32], &data[32..], &opts, Execution::Parallel).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
}

#[test]
fn zero_learning_rate_leaves_model_unchanged() {
    let (cfg, synth) = tiny_task();
    let data = gen_synthetic(16, &synth).unwrap();
    let opts = TrainOptions { epochs: 2, lr: 0.0, batch_size: 4, ..Default::default() };
    let r = train(&cfg, &data, &[], &opts, Execution::default()).unwrap();
    assert_eq!(r.params, ToyViTParams::init(&cfg).unwrap());
    let eval = evaluate(&r.params, &cfg, &data, Execution::default()).unwrap();
    assert_eq!(eval.top1, r.log[1].top1);
    assert_eq!(r.log[0].loss, r.log[1].loss);
}
