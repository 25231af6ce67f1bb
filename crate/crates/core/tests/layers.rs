mod common;

use common::{conv_oracle, pool_oracle, uniform_vec};
use likenet_core::gradcheck::gradient_check;
use likenet_core::layers::{self, BiasMode};
use likenet_core::model::LayerKind;
use likenet_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn check(kind: LayerKind, shape: [usize; 4], seed: u64) -> Result<(), TestCaseError> {
    let r = gradient_check(&kind, shape, EPS, TOL, seed).unwrap();
    prop_assert!(
        r.passed,
        "{kind} on {shape:?}: {:.3e} at {}",
        r.max_rel_err,
        r.worst
    );
    prop_assert!(r.checked > 0);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradients(n in 1usize..3, c in 1usize..4, h in 3usize..8, w in 3usize..8,
                      o in 1usize..4, untied in any::<bool>(), seed in any::<u64>()) {
        let bias = if untied { BiasMode::Untied } else { BiasMode::Tied };
        check(LayerKind::Conv3x3 { out_maps: o, bias }, [n, c, h, w], seed)?;
    }

    #[test]
    fn pool_gradients(n in 1usize..3, c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        check(LayerKind::MaxPool2x2, [n, c, h, w], seed)?;
    }

    #[test]
    fn fc_gradients(n in 1usize..4, c in 1usize..5, h in 1usize..4, w in 1usize..4,
                    out in 1usize..6, seed in any::<u64>()) {
        check(LayerKind::FullyConnected { out_units: out }, [n, c, h, w], seed)?;
    }

    #[test]
    fn elementwise_gradients(n in 1usize..3, c in 1usize..4, h in 1usize..8, w in 1usize..8,
                             p in 0.0f64..0.9, seed in any::<u64>()) {
        check(LayerKind::Relu, [n, c, h, w], seed)?;
        check(LayerKind::Flatten, [n, c, h, w], seed)?;
        check(LayerKind::Dropout { p }, [n, c, h, w], seed)?;
    }

    #[test]
    fn softmax_gradients(n in 1usize..6, k in 2usize..6, seed in any::<u64>()) {
        check(LayerKind::SoftmaxNll, [n, k, 1, 1], seed)?;
    }

    #[test]
    fn conv_matches_oracle(n in 1usize..3, c in 1usize..5, h in 3usize..9, w in 3usize..9,
                           o in 1usize..5, untied in any::<bool>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = if untied { BiasMode::Untied } else { BiasMode::Tied };
        let x = uniform_vec(&mut rng, n * c * h * w);
        let wt = uniform_vec(&mut rng, o * c * 9);
        let b = uniform_vec(&mut rng, layers::conv_bias_len(mode, o, h - 2, w - 2));
        let y = layers::conv3x3_forward(
            &Tensor::from_vec([n, c, h, w], x.clone()).unwrap(),
            &Tensor::from_vec([o, c, 3, 3], wt.clone()).unwrap(),
            &b,
            mode,
        ).unwrap();
        let want = conv_oracle(&x, [n, c, h, w], &wt, o, &b, mode);
        prop_assert_eq!(y.shape(), [n, o, h - 2, w - 2]);
        for (a, e) in y.data().iter().zip(&want) {
            prop_assert!((a - e).abs() <= 1e-6);
        }
    }

    #[test]
    fn pool_matches_oracle(n in 1usize..3, c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform_vec(&mut rng, n * c * h * w);
        let (y, idx) = layers::maxpool2x2_forward(&Tensor::from_vec([n, c, h, w], x.clone()).unwrap()).unwrap();
        let (want, shape) = pool_oracle(&x, [n, c, h, w]);
        prop_assert_eq!(y.shape(), shape);
        prop_assert_eq!(y.data(), &want[..]);
        for (k, &i) in idx.iter().enumerate() {
            prop_assert_eq!(x[i], want[k]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(n in 1usize..6, k in 2usize..8, scale in 0.1f64..200.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = uniform_vec(&mut rng, n * k).iter().map(|v| v * scale).collect();
        let p = layers::softmax(&Tensor::from_vec([n, k, 1, 1], logits).unwrap());
        for row in p.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}

#[test]
fn f32_and_f64_agree_on_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = uniform_vec(&mut rng, 2 * 3 * 7 * 6);
    let wt = uniform_vec(&mut rng, 4 * 3 * 9);
    let b = uniform_vec(&mut rng, 4 * 5 * 4);
    let x64 = Tensor::from_vec([2, 3, 7, 6], x).unwrap();
    let w64 = Tensor::from_vec([4, 3, 3, 3], wt).unwrap();
    let y64 = layers::conv3x3_forward(&x64, &w64, &b, BiasMode::Untied).unwrap();
    let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
    let y32 = layers::conv3x3_forward(
        &x64.cast::<f32>(),
        &w64.cast::<f32>(),
        &b32,
        BiasMode::Untied,
    )
    .unwrap();
    for (a, e) in y32.data().iter().zip(y64.data()) {
        assert!((*a as f64 - e).abs() < 1e-5);
    }
}
