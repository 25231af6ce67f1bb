mod common;

use common::{blobs, gauss};
use likenet_core::data::{
    apply_mean, compute_mean, synth_generate_with, FeatureMatrix, SynthOptions,
};
use likenet_core::optim::TrainConfig;
use likenet_core::transfer::{estimate_label_noise, extract_features, fine_tune, train_logreg};
use likenet_core::{
    evaluate, train, Checkpoint, Dataset, FreezeMask, InitScheme, Preset, PresetOptions,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_gender(seed: u64) -> Checkpoint {
    let spec = Preset::Gender.spec_with(PresetOptions {
        input_side: 128,
        width_divisor: 16,
    });
    Checkpoint::init(spec, seed).unwrap()
}

fn synth(n: usize, noise: f64, seed: u64, side: usize) -> Dataset {
    synth_generate_with(n, noise, seed, SynthOptions { side })
        .unwrap()
        .dataset
}

fn fm(ds: &Dataset) -> FeatureMatrix {
    FeatureMatrix::from_dataset(ds).unwrap()
}

#[test]
fn fine_tune_touches_only_the_tail() {
    let pre = small_gender(1);
    let tr = synth(12, 0.2, 2, 128);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        learning_rate: 0.01,
        ..TrainConfig::fine_tune()
    };
    for k in 1..=3 {
        let out = fine_tune(&pre, k, &tr, &tr, &cfg).unwrap();
        let tail = pre.spec.last_param_layers(k).unwrap();
        for (l, (a, b)) in pre.params.iter().zip(&out.last.params).enumerate() {
            let (Some(a), Some(b)) = (a, b) else { continue };
            let same = a.weights.data() == b.weights.data() && a.bias == b.bias;
            assert_eq!(same, !tail.contains(&l), "k={k} layer {l}");
        }
        assert_eq!(out.curves.len(), 2);
    }
}

#[test]
fn cached_fine_tune_equals_masked_training() {
    let pre = small_gender(2);
    let tr = synth(20, 0.1, 3, 128);
    let va = synth(8, 0.1, 4, 128);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 5,
        learning_rate: 0.01,
        ..TrainConfig::fine_tune()
    };
    let cached = fine_tune(&pre, 2, &tr, &va, &cfg).unwrap();

    let mut model = pre.clone();
    let tail = pre.spec.last_param_layers(2).unwrap();
    likenet_core::model::init_layers(&mut model.params, &tail, pre.spec.init, cfg.seed);
    let mask = FreezeMask::last_k(&pre.spec, 2).unwrap();
    let direct = train(&model, &mask, &tr, &va, &cfg).unwrap();

    assert_eq!(cached.curves, direct.curves);
    for (a, b) in cached.batch_losses.iter().zip(&direct.batch_losses) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    assert_eq!(cached.last.params, direct.last.params);
}

#[test]
fn extract_then_fit_equals_training_only_the_head() {
    let model = small_gender(4);
    let tr = synth(18, 0.1, 8, 128);
    let va = synth(6, 0.1, 9, 128);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        learning_rate: 0.01,
        seed: 12,
        ..TrainConfig::fine_tune()
    };
    let fc = model.spec.layer_index("fc3").unwrap();
    let mut reinit = model.clone();
    likenet_core::model::init_layers(&mut reinit.params, &[fc], model.spec.init, cfg.seed);
    let direct = train(
        &reinit,
        &FreezeMask::last_k(&model.spec, 1).unwrap(),
        &tr,
        &va,
        &cfg,
    )
    .unwrap();
    let ftr = extract_features(&model, "relu11", &tr).unwrap();
    let fva = extract_features(&model, "relu11", &va).unwrap();
    let head = train_logreg(&ftr, &fva, &cfg).unwrap();
    assert_eq!(direct.batch_losses.len(), head.batch_losses.len());
    for (a, b) in direct.batch_losses.iter().zip(&head.batch_losses) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    assert_eq!(direct.curves, head.curves);
}

#[test]
fn extraction_is_deterministic_and_ordered() {
    let m = small_gender(3);
    let ds = synth(6, 0.0, 5, 128);
    let a = extract_features(&m, "flatten1", &ds).unwrap();
    let b = extract_features(&m, "flatten1", &ds).unwrap();
    // 32 maps of 1x1 at this input size
    assert_eq!(a.dim, 32);
    assert_eq!(a.ids, ds.ids);
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.data), bits(&b.data));
    let one = extract_features(&m, "flatten1", &ds.subset(&[4])).unwrap();
    assert_eq!(bits(one.row(0)), bits(a.row(4)));
}

#[test]
fn logreg_separates_blobs() {
    let tr = blobs(400, 2, 6.0, 1);
    let va = blobs(200, 2, 6.0, 2);
    let cfg = TrainConfig {
        l2: 0.0,
        learning_rate: 0.01,
        epochs: 20,
        batch_size: 16,
        ..TrainConfig::logreg()
    };
    let out = train_logreg(&fm(&tr), &fm(&va), &cfg).unwrap();
    assert!(evaluate(&out.best, &va).unwrap().accuracy >= 0.99);
}

#[test]
fn huge_l2_collapses_to_uniform() {
    let tr = blobs(200, 8, 3.0, 3);
    let cfg = TrainConfig {
        l2: 1e6,
        learning_rate: 1e-7,
        momentum: 0.0,
        epochs: 10,
        batch_size: 20,
        ..TrainConfig::logreg()
    };
    let out = train_logreg(&fm(&tr), &fm(&tr), &cfg).unwrap();
    let nll = evaluate(&out.last, &tr).unwrap().mean_nll;
    assert!((nll - 2f64.ln()).abs() <= 0.01 * 2f64.ln(), "nll {nll}");
}

#[test]
fn logreg_finds_no_signal_in_random_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let make = |rng: &mut ChaCha8Rng, n: usize, tag: &str| {
        let mut ds = Dataset::new([4096, 1, 1]);
        for i in 0..n {
            let row: Vec<f32> = (0..4096).map(|_| gauss(rng) as f32).collect();
            ds.push(format!("{tag}{i}"), &row, i % 2).unwrap();
        }
        ds
    };
    let tr = make(&mut rng, 200, "t");
    let va = make(&mut rng, 200, "v");
    let out = train_logreg(
        &fm(&tr),
        &fm(&va),
        &TrainConfig {
            epochs: 10,
            batch_size: 20,
            ..TrainConfig::logreg()
        },
    )
    .unwrap();
    let acc = evaluate(&out.best, &va).unwrap().accuracy;
    assert!((0.4..=0.6).contains(&acc), "accuracy {acc}");
}

// Pretraining on clean labels then fitting the last two layers on noisy
// labels does at least as well as training the smaller network from scratch
// on the same noisy labels for the same number of epochs.
#[test]
fn fine_tuning_beats_scratch_on_noisy_relabeling() {
    let side = 128;
    let (n_tr, n) = (400, 500);
    let clean = synth_generate_with(n, 0.0, 21, SynthOptions { side }).unwrap();
    let noisy = synth_generate_with(n, 0.24, 22, SynthOptions { side }).unwrap();
    let head: Vec<usize> = (0..n_tr).collect();
    let tail: Vec<usize> = (n_tr..n).collect();
    let (mut pre_tr, mut pre_va) = (clean.dataset.subset(&head), clean.dataset.subset(&tail));
    let mut tr = noisy.dataset.subset(&head);
    let mut va = noisy.dataset.subset(&tail);
    // validate against the true labels of the relabeling task
    va.labels = noisy.true_labels[n_tr..].to_vec();
    let mean = compute_mean(&pre_tr).unwrap();
    for d in [&mut pre_tr, &mut pre_va, &mut tr, &mut va] {
        apply_mean(d, &mean).unwrap();
    }

    // a width-shrunk net needs fan-in scaled weights to train at all
    let mut spec = Preset::Gender.spec_with(PresetOptions {
        input_side: side,
        width_divisor: 16,
    });
    spec.init = InitScheme::FanIn;
    let gender = Checkpoint::init(spec, 1).unwrap();
    let pre_cfg = TrainConfig {
        learning_rate: 0.01,
        batch_size: 20,
        epochs: 6,
        ..TrainConfig::gender()
    };
    let pre = train(
        &gender,
        &FreezeMask::all_trainable(&gender.spec).unwrap(),
        &pre_tr,
        &pre_va,
        &pre_cfg,
    )
    .unwrap();
    let pre_err = pre.curves.records[pre.curves.best_index().unwrap()].val_err;
    assert!(pre_err < 0.2, "pretraining reached only {pre_err}");

    let epochs = 5;
    let ft_cfg = TrainConfig {
        epochs,
        learning_rate: 0.01,
        ..TrainConfig::fine_tune()
    };
    let ft = fine_tune(&pre.best, 2, &tr, &va, &ft_cfg).unwrap();

    let scratch_model = Checkpoint::init(
        Preset::Attractiveness.spec_with(PresetOptions {
            input_side: side,
            width_divisor: 1,
        }),
        1,
    )
    .unwrap();
    let sc_cfg = TrainConfig {
        epochs,
        ..TrainConfig::attractiveness()
    };
    let sc = train(
        &scratch_model,
        &FreezeMask::all_trainable(&scratch_model.spec).unwrap(),
        &tr,
        &va,
        &sc_cfg,
    )
    .unwrap();

    let ft_err = ft.curves.last().unwrap().val_err;
    let sc_err = sc.curves.last().unwrap().val_err;
    eprintln!("pretrained {pre_err} fine-tuned {ft_err} scratch {sc_err}");
    assert!(ft_err <= sc_err, "fine-tuned {ft_err} vs scratch {sc_err}");
}

proptest! {
    #[test]
    fn noise_estimate_is_scale_invariant(n in 1u64..10_000, frac in 0.0f64..=1.0, k in 1u64..50) {
        let e = ((n as f64) * frac).floor() as u64;
        let base = estimate_label_noise(n, e).unwrap();
        prop_assert_eq!(estimate_label_noise(k * n, k * e).unwrap(), base);
        prop_assert!((0.0..=1.0).contains(&base));
        if e < n {
            prop_assert!(estimate_label_noise(n, e + 1).unwrap() >= base);
        }
        if 2 * e >= n {
            prop_assert_eq!(base, 1.0);
        }
    }
}
