use std::sync::Arc;

use funcspace::diffcore::Tensor;
use funcspace::embsearch::{
    constant_baseline_mpe, decode_pruned, run_search, sample_embedding, search_loss, search_optimal, soft_count, sparsity_penalty,
    spearman, tradeoff_scan, SearchConfig, SearchError, SoftCountForm,
};
use funcspace::funcae::{decode_all, AeConfig, AutoencoderParams, EmbeddingStats, Gates};
use funcspace::genlab::{make_search_dataset, random_mlp, FunctionalDataset, GenConfig, Part, Splits};
use funcspace::netrep::ActivationKind;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn small_params(seed: u64) -> AutoencoderParams<f64> {
    let cfg = AeConfig {
        channels: vec![4, 4],
        trunk: vec![16],
        ..AeConfig::new(ActivationKind::Linear, 3, 2, 4)
    };
    let mut p = AutoencoderParams::init(cfg, seed).unwrap();
    p.stats = Some(EmbeddingStats {
        mean: vec![0.1, -0.2, 0.3, 0.0],
        std: vec![1.0, 0.5, 2.0, 1.0],
    });
    p
}

fn small_dataset(seed: u64, n: usize) -> FunctionalDataset<f64> {
    let gen = GenConfig::desk(ActivationKind::Linear, 1, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_mlp::<f64, _>(&gen, &mut rng).unwrap();
    make_search_dataset(&spec, n, (5, 3, 2), &mut rng).unwrap()
}

fn xy(data: &FunctionalDataset<f64>) -> (Arc<Tensor<f64>>, Arc<Tensor<f64>>) {
    (Arc::new(data.inputs.clone()), Arc::new(data.outputs.clone()))
}

#[test]
fn soft_count_reference_values() {
    let pe = SoftCountForm::PerElement;
    assert!((soft_count(&[0.5], 0.5, pe) - 0.25).abs() < 1e-15);
    assert!((soft_count(&[2.0], 0.0, pe) - 0.5 * sig(20.0)).abs() < 1e-15);
    let tiny = soft_count(&[0.0], 1.0, pe);
    assert!((tiny - 0.5 * sig(-10.0)).abs() < 1e-18);
    assert!((tiny - 2.27e-5).abs() < 1e-7);
    // the literal reading squashes the whole L1 distance through one sigmoid
    let lit = soft_count(&[1.0, -2.0], 0.0, SoftCountForm::Literal);
    assert!((lit - 0.5 * sig(30.0)).abs() < 1e-15);
    assert!((soft_count(&[0.5], 0.5, SoftCountForm::Literal) - 0.25).abs() < 1e-15);
}

#[test]
fn penalty_reference_values() {
    let pe = SoftCountForm::PerElement;
    let hand = sparsity_penalty(&[1.0, -2.0], 0.0, 1.0, pe);
    let oracle = 0.1 * 3.0 + 0.5 * (sig(10.0) + sig(20.0));
    assert!((hand - oracle).abs() < 1e-14);
    assert!((hand - 1.2999773).abs() < 1e-7);
    assert_eq!(sparsity_penalty(&[1.0, -2.0], 0.3, 0.0, pe), 0.0);
    let zeros = [0.0; 6];
    assert!((sparsity_penalty(&zeros, 0.0, 0.7, pe) - 0.7 * 0.25 * 6.0).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn soft_count_decreases_in_t(ws in prop::collection::vec(-5.0f64..5.0, 1..20), t in 0.0f64..3.0, dt in 1e-6f64..2.0) {
        let pe = SoftCountForm::PerElement;
        let a = soft_count(&ws, t, pe);
        let b = soft_count(&ws, t + dt, pe);
        prop_assert!(b <= a);
        prop_assert!(a > 0.0 && a < 0.5 * ws.len() as f64);
    }
}

#[test]
fn threshold_gradient_matches_finite_differences() {
    let params = small_params(3);
    let data = small_dataset(4, 40);
    let (x, y) = xy(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..20 {
        let z = sample_embedding(&params, &mut rng).unwrap();
        let t = 0.05 * case as f64;
        let f = |t: f64| search_loss(&params, &z, t, 1 + case % 2, &x, &y, 0.3, SoftCountForm::PerElement, Gates::Soft).unwrap();
        let g = f(t).grad_t;
        let h = 1e-6;
        let fd = (f(t + h).penalty - f(t - h).penalty) / (2.0 * h);
        assert!((g - fd).abs() <= 1e-4 * g.abs().max(fd.abs()).max(1e-6), "case {case}: {g} vs {fd}");
    }
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let params = small_params(7);
    let data = small_dataset(8, 30);
    let (x, y) = xy(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..6 {
        let z = sample_embedding(&params, &mut rng).unwrap();
        let decoder = 1 + case % 2;
        let f = |z: &[f64]| {
            search_loss(&params, z, 0.1, decoder, &x, &y, 0.01, SoftCountForm::PerElement, Gates::Soft).unwrap()
        };
        let g = f(&z).grad_z;
        let h = 1e-6;
        let fd: Vec<f64> = (0..z.len())
            .map(|k| {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[k] += h;
                zm[k] -= h;
                (f(&zp).loss - f(&zm).loss) / (2.0 * h)
            })
            .collect();
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff <= 1e-3 * norm.max(1e-8), "case {case}: {g:?} vs {fd:?}");
    }
}

#[test]
fn zero_alpha_adds_nothing_to_the_data_term() {
    let params = small_params(11);
    let data = small_dataset(12, 50);
    let (x, y) = xy(&data);
    let z = sample_embedding(&params, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for gates in [Gates::Soft, Gates::StraightThrough] {
        let zero = search_loss(&params, &z, 0.2, 2, &x, &y, 0.0, SoftCountForm::PerElement, gates).unwrap();
        let some = search_loss(&params, &z, 0.2, 2, &x, &y, 1e-3, SoftCountForm::PerElement, gates).unwrap();
        assert_eq!(zero.loss, zero.data_term);
        assert_eq!(zero.loss, some.data_term);
        assert_eq!(zero.grad_t, 0.0);
        assert!(some.loss > some.data_term);
    }
}

#[test]
fn straight_through_loss_is_the_hard_network_error() {
    let params = small_params(13);
    let data = small_dataset(14, 64);
    let (x, y) = xy(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let z = sample_embedding(&params, &mut rng).unwrap();
        let hard = decode_all(&params, &z, false).unwrap();
        for d in 1..=2 {
            let pred = hard[d - 1].forward_batch(&data.inputs).unwrap();
            let sse: f64 = pred.data().iter().zip(data.outputs.data()).map(|(p, t)| (p - t).powi(2)).sum();
            let got = search_loss(&params, &z, 0.0, d, &x, &y, 0.0, SoftCountForm::PerElement, Gates::StraightThrough).unwrap();
            assert!((got.loss - sse).abs() <= 1e-9 * sse.max(1.0), "{} vs {sse}", got.loss);
        }
    }
}

#[test]
fn data_term_is_additive_over_disjoint_rows() {
    let params = small_params(15);
    let data = small_dataset(16, 40);
    let z = sample_embedding(&params, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let loss = |d: &FunctionalDataset<f64>| {
        let (x, y) = xy(d);
        search_loss(&params, &z, 0.0, 1, &x, &y, 0.0, SoftCountForm::PerElement, Gates::Soft).unwrap().loss
    };
    let whole = loss(&data);
    let parts = loss(&data.slice(0..15)) + loss(&data.slice(15..40));
    assert!((whole - parts).abs() <= 1e-12 * whole.max(1.0));
}

#[test]
fn search_loss_rejects_bad_inputs() {
    let params = small_params(17);
    let data = small_dataset(18, 10);
    let (x, y) = xy(&data);
    let z = vec![0.0; 4];
    let run = |z: &[f64], d| search_loss(&params, z, 0.0, d, &x, &y, 0.0, SoftCountForm::PerElement, Gates::Soft);
    assert!(matches!(run(&z[..3], 1), Err(SearchError::Ae(_))));
    assert!(matches!(run(&z, 0), Err(SearchError::Config(_))));
    assert!(matches!(run(&z, 3), Err(SearchError::Config(_))));
    assert!(run(&z, 2).is_ok());
}

#[test]
fn embedding_samples_follow_the_statistics() {
    let mut params = small_params(19);
    let a = sample_embedding(&params, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = sample_embedding(&params, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 4);
    params.stats = Some(EmbeddingStats {
        mean: vec![1.5, -2.0, 0.25, 7.0],
        std: vec![0.0; 4],
    });
    assert_eq!(sample_embedding(&params, &mut ChaCha8Rng::seed_from_u64(4)).unwrap(), vec![1.5, -2.0, 0.25, 7.0]);
    params.stats = None;
    assert_eq!(
        sample_embedding(&params, &mut ChaCha8Rng::seed_from_u64(4)),
        Err(SearchError::MissingStats)
    );
}

fn quick(iterations: usize) -> SearchConfig {
    SearchConfig {
        iterations,
        minibatch: Some(16),
        seed: 21,
        ..SearchConfig::default()
    }
}

#[test]
fn zero_steps_keep_the_sampled_embedding() {
    let params = small_params(23);
    let data = small_dataset(24, 60);
    let cfg = SearchConfig {
        lr_z: 0.0,
        lr_t: 0.0,
        alpha: 0.5,
        ..quick(1)
    };
    let r = search_optimal(&params, &data, &cfg).unwrap();
    assert_eq!(r.decoders.len(), 2);
    for d in &r.decoders {
        assert_eq!(d.z, d.z0);
        assert_eq!(d.t, 0.0);
        assert_eq!(d.train_loss.len(), 1);
    }
}

#[test]
fn reported_network_is_the_pruned_decode() {
    let params = small_params(25);
    let data = small_dataset(26, 80);
    let cfg = SearchConfig {
        alpha: 0.1,
        lr_t: 0.5,
        restarts: 2,
        ..quick(30)
    };
    let r = search_optimal(&params, &data, &cfg).unwrap();
    for d in &r.decoders {
        let spec = decode_pruned(&params, &d.z, d.decoder, d.t).unwrap();
        assert_eq!(spec, d.spec);
        assert_eq!(d.non_zero_count, spec.non_zero_count());
        let pred = spec.forward_batch(&data.part(Part::Test).inputs).unwrap();
        let truth = data.part(Part::Test).outputs;
        let mut ratios: Vec<f64> = pred
            .data()
            .iter()
            .zip(truth.data())
            .map(|(p, t)| (t - p).abs() / (t.abs() + 1e-8))
            .collect();
        ratios.sort_by(f64::total_cmp);
        let n = ratios.len();
        let med = if n % 2 == 1 { ratios[n / 2] } else { 0.5 * (ratios[n / 2 - 1] + ratios[n / 2]) };
        assert_eq!(d.test_mpe, med);
        assert!(d.table_cell().ends_with(&format!(" ({})", d.non_zero_count)));
    }
    let best = r.best();
    assert!(r.decoders.iter().all(|d| d.val_mpe >= best.val_mpe));
    assert!(r.summary_csv().starts_with("decoder,result\nD1,"));
}

#[test]
fn threshold_never_goes_negative() {
    let params = small_params(27);
    let data = small_dataset(28, 60);
    let cfg = SearchConfig {
        alpha: 1.0,
        lr_t: 10.0,
        ..quick(40)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z0 = sample_embedding(&params, &mut rng).unwrap();
    let (state, diverged) = run_search(&params, &data, &cfg, 1, z0, &mut rng).unwrap();
    assert!(!diverged);
    assert_eq!(state.t_history.len(), 40);
    assert!(state.t_history.iter().all(|&t| t >= 0.0));
    assert!(state.t_history.iter().any(|&t| t > 0.0));
}

#[test]
fn searches_are_reproducible() {
    let params = small_params(29);
    let data = small_dataset(30, 60);
    let cfg = SearchConfig {
        alpha: 0.01,
        restarts: 2,
        ..quick(10)
    };
    let a = search_optimal(&params, &data, &cfg).unwrap();
    let b = search_optimal(&params, &data, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn search_rejects_bad_setups() {
    let params = small_params(31);
    let data = small_dataset(32, 60);
    let unsplit = FunctionalDataset::new(data.inputs.clone(), data.outputs.clone(), None).unwrap();
    assert!(matches!(search_optimal(&params, &unsplit, &quick(1)), Err(SearchError::Dataset(_))));
    let mut bare = params.clone();
    bare.stats = None;
    assert_eq!(search_optimal(&bare, &data, &quick(1)), Err(SearchError::MissingStats));
    let bad = SearchConfig {
        decoders: vec![3],
        ..quick(1)
    };
    assert!(matches!(search_optimal(&params, &data, &bad), Err(SearchError::Config(_))));
    let bad = SearchConfig { restarts: 0, ..quick(1) };
    assert!(matches!(search_optimal(&params, &data, &bad), Err(SearchError::Config(_))));
}

#[test]
fn tradeoff_scan_shapes() {
    let params = small_params(33);
    let data = small_dataset(34, 60);
    let one = tradeoff_scan(&params, &data, "toy", 1, &[0.0], &quick(3)).unwrap();
    assert_eq!(one.points.len(), 1);
    assert!(one.to_csv().starts_with("alpha,nonzero,mpe\n0,"));
    let two = tradeoff_scan(&params, &data, "toy", 2, &[0.0, 0.1], &quick(3)).unwrap();
    assert_eq!(two.points.len(), 2);
    assert!(tradeoff_scan(&params, &data, "toy", 1, &[], &quick(3)).is_err());
    assert!(tradeoff_scan(&params, &data, "toy", 1, &[0.1, 0.1], &quick(3)).is_err());
}

#[test]
fn constant_baseline_predicts_the_train_median() {
    let inputs = Tensor::from_shape_vec(&[6, 3], vec![0.0; 18]);
    let outputs = Tensor::from_shape_vec(&[6, 1], vec![1.0, 2.0, 3.0, 9.0, 2.0, 4.0]);
    let splits = Splits { train: 3, val: 1, test: 2 };
    let data = FunctionalDataset::new(inputs, outputs, Some(splits)).unwrap();
    // median 2 against truths 2 and 4: ratios 0 and 0.5
    let got = constant_baseline_mpe(&data).unwrap();
    assert!((got - 0.25).abs() < 1e-8);
}

/// Rank correlation by the squared-rank-difference formula (no ties).
fn spearman_no_ties(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> { v.iter().map(|a| 1.0 + v.iter().filter(|b| *b < a).count() as f64).collect() };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn spearman_matches_oracles() {
    let x = [1.0, 2.0, 2.0, 3.0];
    let y = [1.0, 2.0, 3.0, 4.0];
    assert!((spearman(&x, &y) - 4.5 / 22.5f64.sqrt()).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_nan());
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for _ in 0..50 {
        use rand::Rng;
        let x: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        assert!((spearman(&x, &y) - spearman_no_ties(&x, &y)).abs() < 1e-12);
    }
}
