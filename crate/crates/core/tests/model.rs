mod common;

use common::enumerate_params;
use likenet_core::checkpoint::{decode, encode};
use likenet_core::layers::BiasMode;
use likenet_core::model::{init_params, InitScheme, LayerKind, ModelSpec, Preset, PresetOptions};
use likenet_core::{load_checkpoint, save_checkpoint, Error};
use proptest::prelude::*;

fn random_spec(
    c: usize,
    side: usize,
    convs: Vec<(usize, bool, bool)>,
    fcs: Vec<usize>,
    classes: usize,
) -> ModelSpec {
    let mut layers = Vec::new();
    let mut s = side;
    for (maps, untied, pool) in convs {
        if s < 3 {
            break;
        }
        let bias = if untied {
            BiasMode::Untied
        } else {
            BiasMode::Tied
        };
        layers.push(LayerKind::Conv3x3 {
            out_maps: maps,
            bias,
        });
        layers.push(LayerKind::Relu);
        s -= 2;
        if pool {
            layers.push(LayerKind::MaxPool2x2);
            s = s.div_ceil(2);
        }
    }
    layers.push(LayerKind::Flatten);
    for units in fcs {
        layers.push(LayerKind::Dropout { p: 0.5 });
        layers.push(LayerKind::FullyConnected { out_units: units });
        layers.push(LayerKind::Relu);
    }
    layers.push(LayerKind::FullyConnected { out_units: classes });
    layers.push(LayerKind::SoftmaxNll);
    ModelSpec {
        name: "random".into(),
        input_shape: [c, side, side],
        layers,
        init: InitScheme::default(),
    }
}

fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
    (
        1usize..4,
        3usize..20,
        prop::collection::vec((1usize..5, any::<bool>(), any::<bool>()), 0..4),
        prop::collection::vec(1usize..8, 0..3),
        2usize..4,
    )
        .prop_map(|(c, side, convs, fcs, k)| random_spec(c, side, convs, fcs, k))
}

#[test]
fn presets_match_enumeration() {
    let att = Preset::Attractiveness.spec();
    let gen = Preset::Gender.spec();
    let total = |v: Vec<u64>| v.iter().sum::<u64>();
    assert_eq!(total(enumerate_params(&att)), 870_522);
    assert_eq!(att.count_params(None).unwrap(), 870_522);
    assert_eq!(total(enumerate_params(&gen)), 28_354_242);
    assert_eq!(gen.count_params(None).unwrap(), 28_354_242);
    let per_layer = enumerate_params(&gen);
    for (k, want) in [(1, 1_026u64), (2, 525_826), (3, 8_915_458)] {
        let oracle: u64 = per_layer[per_layer.len() - k..].iter().sum();
        assert_eq!(oracle, want);
        assert_eq!(gen.count_params(Some(k)).unwrap() as u64, want);
    }
}

#[test]
fn feature_boundaries_of_gender_net() {
    let gen = Preset::Gender.spec();
    let shapes = gen.infer_shapes().unwrap();
    let out = |name: &str| {
        shapes[gen.layer_index(name).unwrap()]
            .output
            .iter()
            .product::<usize>()
    };
    assert_eq!(out("flatten1"), 8192);
    assert_eq!(out("fc2"), 512);
}

#[test]
fn gender_rejects_small_inputs() {
    let spec = Preset::Gender.spec_with(PresetOptions {
        input_side: 100,
        width_divisor: 1,
    });
    assert!(matches!(spec.validate(), Err(Error::Shape { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counts_match_enumeration(spec in spec_strategy()) {
        prop_assume!(spec.validate().is_ok());
        let oracle = enumerate_params(&spec);
        let shapes = spec.param_shapes().unwrap();
        prop_assert_eq!(shapes.len(), oracle.len());
        for (s, &o) in shapes.iter().zip(&oracle) {
            prop_assert_eq!(s.count() as u64, o);
        }
        prop_assert_eq!(spec.count_params(None).unwrap() as u64, oracle.iter().sum::<u64>());
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise(spec in spec_strategy(), seed in any::<u64>(), epoch in 0u32..100) {
        prop_assume!(spec.validate().is_ok());
        let mut ck = init_params(&spec, seed).unwrap();
        ck.meta.epoch = epoch;
        ck.meta.val_err = 0.1 * epoch as f64 / 7.0;
        let bytes = encode(&ck).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back).unwrap(), bytes);
        prop_assert_eq!(back, ck);
    }
}

#[test]
fn checkpoint_file_roundtrip() {
    let spec = Preset::Attractiveness.spec_with(PresetOptions {
        input_side: 64,
        width_divisor: 2,
    });
    let ck = init_params(&spec, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&ck, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back, ck);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}
