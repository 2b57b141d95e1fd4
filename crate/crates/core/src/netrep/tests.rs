use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Random spec with free-form masks, for property tests.
fn random_spec(seed: u64) -> MlpSpec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let activation = ActivationKind::ALL[rng.random_range(0..3)];
    let n_max = rng.random_range(3..=6);
    let input_dim = rng.random_range(1..=3);
    let output_dim = rng.random_range(1..=2);
    let depth = rng.random_range(1..=4);
    let masks: Vec<Vec<f64>> = (0..depth)
        .map(|_| (0..n_max).map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 }).collect())
        .collect();
    let weights = (0..=depth)
        .map(|k| {
            let shape = layer_shape(k, depth, input_dim, output_dim, n_max);
            let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-3.0..3.0)).collect();
            Tensor::from_shape_vec(&shape, data)
        })
        .collect();
    MlpSpec::new(activation, input_dim, output_dim, n_max, masks, weights).unwrap()
}

fn filled(activation: ActivationKind, hidden: &[usize], value: f64) -> MlpSpec<f64> {
    let mut s = MlpSpec::zeros(activation, 3, 1, 5, hidden).unwrap();
    for w in s.weights_mut() {
        w.data_mut().fill(value);
    }
    s.apply_mask()
}

#[test]
fn zero_weight_outputs_follow_output_activation() {
    let x = [0.3, -0.2, 0.9];
    let s = MlpSpec::<f64>::zeros(ActivationKind::Sigmoid, 3, 1, 5, &[4]).unwrap();
    assert_eq!(s.forward(&x).unwrap(), vec![0.0]);
    let s = MlpSpec::<f64>::zeros(ActivationKind::LeakyRelu, 3, 1, 5, &[4, 2]).unwrap();
    assert_eq!(s.forward(&x).unwrap(), vec![0.5]);
}

#[test]
fn linear_single_neuron_all_ones() {
    let s = filled(ActivationKind::Linear, &[1], 1.0);
    let y = s.forward(&[1.0, 0.5, -0.5]).unwrap()[0];
    // independent evaluation: hidden = 1 + 0.5 - 0.5 = 1, output = 1 / (1 + e^-1)
    let expect = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((y - expect).abs() < 1e-15);
    assert!((y - 0.731059).abs() < 1e-6);
}

#[test]
fn forward_rejects_wrong_input_length() {
    let s = filled(ActivationKind::Linear, &[2], 1.0);
    assert!(matches!(s.forward(&[1.0]), Err(NetError::InputLength { expected: 3, found: 1 })));
}

#[test]
fn inactive_neurons_contribute_nothing_even_under_sigmoid() {
    // sigma(0) = 0.5 would leak through if gating were applied to weights only.
    let mut s = MlpSpec::<f64>::zeros(ActivationKind::Sigmoid, 3, 1, 5, &[5]).unwrap();
    s.weights_mut()[1].data_mut().fill(1.0);
    s.set_mask(0, 4, false);
    let y = s.forward(&[0.0, 0.0, 0.0]).unwrap()[0];
    assert_eq!(y, 2.0); // four active neurons at sigma(0) = 0.5
}

#[test]
fn matrix_shape_and_mask_columns() {
    let s = filled(ActivationKind::Sigmoid, &[5, 3], 1.0);
    let m = to_matrix(&s, 4, 5).unwrap();
    assert_eq!((m.rows(), m.cols()), (5, 17));
    let col = |c: usize| (0..5).map(|r| m.values().at2(r, c)).collect::<Vec<_>>();
    assert_eq!(col(15), vec![1.0; 5]);
    assert_eq!(col(16), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
    // input block: rows 3..5 are padding
    for r in 3..5 {
        for c in 0..5 {
            assert_eq!(m.values().at2(r, c), 0.0);
        }
    }
    // output block: only column 10 carries weights
    for r in 0..5 {
        for c in 11..15 {
            assert_eq!(m.values().at2(r, c), 0.0);
        }
    }
}

#[test]
fn to_matrix_rejects_oversized_layers() {
    let s = MlpSpec::<f64>::zeros(ActivationKind::Linear, 3, 1, 6, &[6]).unwrap();
    assert!(matches!(to_matrix(&s, 4, 5), Err(NetError::TooWide { width: 6, n_max: 5 })));
    let s = MlpSpec::<f64>::zeros(ActivationKind::Linear, 3, 1, 5, &[2, 2, 2]).unwrap();
    assert!(matches!(to_matrix(&s, 2, 5), Err(NetError::Depth { depth: 3, max: 2 })));
}

fn meta_of(s: &MlpSpec<f64>) -> MatrixMeta {
    MatrixMeta {
        activation: s.activation(),
        input_dim: s.input_dim(),
        output_dim: s.output_dim(),
        depth: s.depth(),
        n_max: s.n_max(),
    }
}

#[test]
fn mask_threshold_is_strict() {
    let s = filled(ActivationKind::Linear, &[2], 1.0);
    let mut t = to_matrix(&s, 1, 5).unwrap().into_tensor();
    let cols = t.shape()[1];
    let mask_col = 2 * 5;
    t.data_mut()[mask_col] = 0.7;
    t.data_mut()[cols + mask_col] = 0.5;
    let m = MlpMatrix::from_tensor(1, 5, t).unwrap();
    let hard = from_matrix(&m, meta_of(&s), false).unwrap();
    assert_eq!(hard.masks()[0][..2], [1.0, 0.0]);
    let soft = from_matrix(&m, meta_of(&s), true).unwrap();
    assert_eq!(soft.masks()[0][..2], [0.7, 0.5]);
}

#[test]
fn inactive_hidden_layer_gives_constant_output() {
    let mut s = filled(ActivationKind::LeakyRelu, &[3, 3], 2.0);
    for slot in 0..5 {
        s.set_mask(1, slot, false);
    }
    let s = s.apply_mask();
    for x in [[0.1, 0.2, 0.3], [-1.0, 1.0, 0.5]] {
        assert_eq!(s.forward(&x).unwrap(), vec![0.5]);
    }
}

#[test]
fn from_matrix_rejects_malformed_layout() {
    let m = MlpMatrix::<f64>::from_tensor(2, 5, Tensor::zeros(&[5, 16]));
    assert!(matches!(m, Err(NetError::Layout(_))));
}

#[test]
fn single_inactive_neuron_zeroes_row_and_column() {
    let mut s = filled(ActivationKind::Sigmoid, &[5, 5], 1.0);
    s.set_mask(0, 2, false);
    let m = s.apply_mask();
    let w0 = &m.weights()[0];
    let w1 = &m.weights()[1];
    for a in 0..3 {
        assert_eq!(w0.at2(a, 2), 0.0);
    }
    for b in 0..5 {
        assert_eq!(w1.at2(2, b), 0.0);
    }
    assert_eq!(m.non_zero_count(), 3 * 5 + 5 * 5 + 5 - 3 - 5);
}

#[test]
fn full_mask_is_identity() {
    let mut s = MlpSpec::<f64>::zeros(ActivationKind::Linear, 3, 1, 5, &[5, 5]).unwrap();
    for (k, w) in s.weights_mut().iter_mut().enumerate() {
        for (j, v) in w.data_mut().iter_mut().enumerate() {
            *v = (k * 31 + j) as f64 * 0.1 - 1.0;
        }
    }
    assert_eq!(s.apply_mask(), s);
}

#[test]
fn non_zero_counts_of_reference_sized_networks() {
    // Hand-built 5-wide networks with 14, 35 and 48 active weights.
    for (hidden, count) in [(vec![5, 5], 14), (vec![5, 5, 5], 35), (vec![5, 5, 5, 5], 48)] {
        let mut s = MlpSpec::<f64>::zeros(ActivationKind::Sigmoid, 3, 1, 5, &hidden).unwrap();
        let mut left = count;
        'fill: for w in s.weights_mut() {
            for v in w.data_mut() {
                if left == 0 {
                    break 'fill;
                }
                *v = 0.5;
                left -= 1;
            }
        }
        assert_eq!(s.non_zero_count(), count);
    }
    assert_eq!(MlpSpec::<f64>::zeros(ActivationKind::Linear, 3, 1, 5, &[5]).unwrap().non_zero_count(), 0);
}

#[test]
fn prune_matches_brute_force() {
    let s = random_spec(99).apply_mask();
    let t = 0.05;
    let pruned = s.prune(t);
    let expect = s
        .weights()
        .iter()
        .flat_map(|w| w.data())
        .filter(|v| v.abs() >= t && **v != 0.0)
        .count();
    assert_eq!(pruned.non_zero_count(), expect);
    assert_eq!(s.prune(0.0), s);
    assert_eq!(s.prune(f64::INFINITY).non_zero_count(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn codec_round_trip_equals_masked_spec(seed in any::<u64>()) {
        let s = random_spec(seed);
        let m = to_matrix(&s, 4, s.n_max()).unwrap();
        let back = from_matrix(&m, meta_of(&s), false).unwrap();
        prop_assert_eq!(back, s.apply_mask());
    }

    #[test]
    fn apply_mask_is_idempotent(seed in any::<u64>()) {
        let s = random_spec(seed).apply_mask();
        prop_assert_eq!(s.apply_mask(), s);
    }

    #[test]
    fn masked_out_weights_do_not_affect_output(seed in any::<u64>(), noise in -5.0f64..5.0) {
        let s = random_spec(seed);
        let mut perturbed = s.clone();
        let depth = s.depth();
        for k in 0..=depth {
            let cols = perturbed.weights()[k].shape()[1];
            let n = perturbed.weights()[k].numel();
            for idx in 0..n {
                let (a, b) = (idx / cols, idx % cols);
                let src_dead = k > 0 && s.masks()[k - 1][a] == 0.0;
                let dst_dead = k < depth && s.masks()[k][b] == 0.0;
                if src_dead || dst_dead {
                    perturbed.weights_mut()[k].data_mut()[idx] += noise;
                }
            }
        }
        let x = vec![0.25; s.input_dim()];
        prop_assert_eq!(s.apply_mask().forward(&x).unwrap(), perturbed.apply_mask().forward(&x).unwrap());
    }

    #[test]
    fn prune_is_monotone(seed in any::<u64>(), t1 in 0.0f64..3.0, dt in 0.0f64..3.0) {
        let s = random_spec(seed).apply_mask();
        prop_assert!(s.prune(t1).non_zero_count() >= s.prune(t1 + dt).non_zero_count());
        prop_assert!(s.prune(t1).non_zero_count() <= s.non_zero_count());
    }

    #[test]
    fn linear_nets_are_linear_before_the_output_sigmoid(
        seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0
    ) {
        let mut s = random_spec(seed);
        s.activation = ActivationKind::Linear;
        let i = s.input_dim();
        let x: Vec<f64> = (0..i).map(|j| 0.3 - 0.2 * j as f64).collect();
        let y: Vec<f64> = (0..i).map(|j| -0.7 + 0.45 * j as f64).collect();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let pre = |v: &[f64]| s.pre_output_batch(&Tensor::matrix(1, i, v.to_vec())).unwrap().into_data();
        let lhs = pre(&combo);
        let (px, py) = (pre(&x), pre(&y));
        for k in 0..lhs.len() {
            prop_assert!((lhs[k] - (a * px[k] + b * py[k])).abs() < 1e-9);
        }
    }
}
