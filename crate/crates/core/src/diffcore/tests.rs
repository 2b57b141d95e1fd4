use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_shape_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values bounded away from zero so kinks (abs, leaky-ReLU) stay outside the stencil.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_shape_vec(shape, data)
}

#[test]
fn square_value_and_gradient() {
    let rec = forward(&[Tensor::scalar(3.0)], |t, x| t.mul(x[0], x[0])).unwrap();
    assert_eq!(rec.output_value().item(), 9.0);
    let g = backward(&rec, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g[0].item(), 6.0);
}

#[test]
fn sigmoid_at_zero() {
    let rec = forward(&[Tensor::scalar(0.0)], |t, x| t.sigmoid(x[0])).unwrap();
    assert_eq!(rec.output_value().item(), 0.5);
    let g = backward(&rec, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g[0].item(), 0.25);
}

#[test]
fn l1_norm_of_matrix() {
    let w = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.0, 3.0]);
    let rec = forward(&[w], |t, x| {
        let a = t.abs(x[0]);
        t.sum(a)
    })
    .unwrap();
    assert_eq!(rec.output_value().item(), 6.0);
    let g = backward(&rec, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g[0].data(), &[1.0, -1.0, 0.0, 1.0]);
}

#[test]
fn least_squares_gradient_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let a = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
        let z = rand_tensor(&mut rng, &[3, 1], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3, 1], -1.0, 1.0);
        let rec = forward(&[z.clone()], |t, x| {
            let a = t.constant(a.clone());
            let b = t.constant(b.clone());
            let az = t.matmul(a, x[0]);
            let r = t.sub(az, b);
            let sq = t.mul(r, r);
            t.sum(sq)
        })
        .unwrap();
        let g = backward(&rec, &Tensor::scalar(1.0)).unwrap();

        // oracle: 2 A^T (A z - b), written out by hand
        let mut resid = [0.0; 3];
        for i in 0..3 {
            resid[i] = (0..3).map(|j| a.at2(i, j) * z.data()[j]).sum::<f64>() - b.data()[i];
        }
        for j in 0..3 {
            let expect: f64 = 2.0 * (0..3).map(|i| a.at2(i, j) * resid[i]).sum::<f64>();
            assert!((g[0].data()[j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn cube_finite_difference() {
    let report = finite_diff_check(
        |t, x| {
            let sq = t.mul(x[0], x[0]);
            t.mul(sq, x[0])
        },
        &[Tensor::scalar(2.0)],
        1e-5,
        1e-6,
    );
    assert!(report.passed, "{report:?}");
}

#[test]
fn min_routes_gradient_to_argmin_branch() {
    // f(u, v) = min(u^2, 3v) away from the tie; compare with each branch alone.
    let point = [Tensor::scalar(1.5), Tensor::scalar(2.0)];
    let rec = forward(&point, |t, x| {
        let a = t.mul(x[0], x[0]);
        let b = t.scale(x[1], 3.0);
        t.min(&[a, b])
    })
    .unwrap();
    assert_eq!(rec.output_value().item(), 2.25);
    let g = backward(&rec, &Tensor::scalar(1.0)).unwrap();
    // Brute force: u^2 is the active branch, d/du = 2u, d/dv = 0.
    let h = 1e-6;
    let branch = |u: f64| u * u;
    let numeric = (branch(1.5 + h) - branch(1.5 - h)) / (2.0 * h);
    assert!((g[0].item() - numeric).abs() < 1e-8);
    assert_eq!(g[1].item(), 0.0);

    let report = finite_diff_check(
        |t, x| {
            let a = t.mul(x[0], x[0]);
            let b = t.scale(x[1], 3.0);
            t.min(&[a, b])
        },
        &point,
        1e-5,
        1e-6,
    );
    assert!(report.passed, "{report:?}");
}

#[test]
fn min_ties_resolve_to_lowest_index() {
    let point = [Tensor::scalar(2.0), Tensor::scalar(2.0), Tensor::scalar(2.0)];
    let rec = forward(&point, |t, x| t.min(&[x[0], x[1], x[2]])).unwrap();
    let g = backward(&rec, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.iter().map(|t| t.item()).collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);

    let rec = forward(&point, |t, x| t.min(&[x[2], x[1]])).unwrap();
    let g = backward(&rec, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.iter().map(|t| t.item()).collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
}

#[test]
fn soft_threshold_sigmoid_wrt_threshold() {
    // sum sigma(10 (|w| - t)) wrt t
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = rand_away_from_zero(&mut rng, &[12]);
    let report = finite_diff_check(
        |t, x| {
            let n = t.shape(x[0])[0];
            let a = t.abs(x[0]);
            let a = t.reshape(a, &[n, 1]);
            let neg_t = t.scale(x[1], -1.0);
            let neg_t = t.reshape(neg_t, &[1]);
            let d = t.add_bias(a, neg_t);
            let d = t.scale(d, 10.0);
            let s = t.sigmoid(d);
            t.sum(s)
        },
        &[w, Tensor::scalar(0.4)],
        1e-5,
        1e-4,
    );
    assert!(report.passed, "{report:?}");
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

/// One case per primitive: a builder and a point generator.
fn primitive_cases() -> Vec<(&'static str, Build, Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>)> {
    vec![
        (
            "add",
            Box::new(|t, x| {
                let s = t.add(x[0], x[1]);
                let s = t.mul(s, s);
                t.sum(s)
            }),
            Box::new(|r| vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[2, 3], -1.0, 1.0)]),
        ),
        (
            "mul",
            Box::new(|t, x| {
                let s = t.mul(x[0], x[1]);
                t.sum(s)
            }),
            Box::new(|r| vec![rand_tensor(r, &[4], -2.0, 2.0), rand_tensor(r, &[4], -2.0, 2.0)]),
        ),
        (
            "matmul",
            Box::new(|t, x| {
                let s = t.matmul(x[0], x[1]);
                let s = t.mul(s, s);
                t.sum(s)
            }),
            Box::new(|r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4, 2], -1.0, 1.0)]),
        ),
        (
            "conv2d",
            Box::new(|t, x| {
                let y = t.conv2d(x[0], x[1]);
                let y = t.mul(y, y);
                t.sum(y)
            }),
            Box::new(|r| vec![rand_tensor(r, &[2, 3, 4, 2], -1.0, 1.0), rand_tensor(r, &[3, 3, 2, 3], -1.0, 1.0)]),
        ),
        (
            "conv_transpose2d",
            Box::new(|t, x| {
                let y = t.conv_transpose2d(x[0], x[1]);
                let y = t.mul(y, y);
                t.sum(y)
            }),
            Box::new(|r| vec![rand_tensor(r, &[2, 3, 4, 2], -1.0, 1.0), rand_tensor(r, &[3, 3, 2, 3], -1.0, 1.0)]),
        ),
        (
            "sigmoid",
            Box::new(|t, x| {
                let y = t.sigmoid(x[0]);
                let y = t.mul(y, y);
                t.sum(y)
            }),
            Box::new(|r| vec![rand_tensor(r, &[5], -4.0, 4.0)]),
        ),
        (
            "leaky_relu",
            Box::new(|t, x| {
                let y = t.leaky_relu(x[0], 0.01);
                let y = t.mul(y, y);
                t.sum(y)
            }),
            Box::new(|r| vec![rand_away_from_zero(r, &[6])]),
        ),
        (
            "abs",
            Box::new(|t, x| {
                let y = t.abs(x[0]);
                let y = t.mul(y, y);
                t.sum(y)
            }),
            Box::new(|r| vec![rand_away_from_zero(r, &[6])]),
        ),
        (
            "sum",
            Box::new(|t, x| {
                let s = t.sum(x[0]);
                t.mul(s, s)
            }),
            Box::new(|r| vec![rand_tensor(r, &[3, 2], -1.0, 1.0)]),
        ),
        (
            "min",
            Box::new(|t, x| {
                let a = t.sum(x[0]);
                let b = t.sum(x[1]);
                let b = t.add_scalar(b, 0.5);
                t.min(&[a, b])
            }),
            Box::new(|r| vec![rand_tensor(r, &[3], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)]),
        ),
        (
            "pow",
            Box::new(|t, x| {
                let y = t.pow(x[0], -1.7);
                t.sum(y)
            }),
            Box::new(|r| vec![rand_tensor(r, &[4], 0.3, 3.0)]),
        ),
        (
            "reshape_concat_narrow",
            Box::new(|t, x| {
                let a = t.reshape(x[0], &[3, 2]);
                let c = t.concat(&[a, x[1]], 1);
                let parts = t.split(c, 1, &[1, 3]);
                let p = t.mul(parts[1], parts[1]);
                let q = t.sum(p);
                let s = t.sum(parts[0]);
                t.mul(q, s)
            }),
            Box::new(|r| vec![rand_tensor(r, &[6], -1.0, 1.0), rand_tensor(r, &[3, 2], -1.0, 1.0)]),
        ),
        (
            "bias_and_scaling",
            Box::new(|t, x| {
                let y = t.add_bias(x[0], x[1]);
                let y = t.scale_last(y, x[2]);
                let y = t.scale_first(y, x[3]);
                let y = t.mul(y, y);
                t.sum(y)
            }),
            Box::new(|r| {
                vec![
                    rand_tensor(r, &[3, 4], -1.0, 1.0),
                    rand_tensor(r, &[4], -1.0, 1.0),
                    rand_tensor(r, &[4], -1.0, 1.0),
                    rand_tensor(r, &[3], -1.0, 1.0),
                ]
            }),
        ),
    ]
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, build, gen) in primitive_cases() {
        for case in 0..100 {
            let point = gen(&mut rng);
            let report = finite_diff_check(&build, &point, 1e-5, 1e-4);
            assert!(report.passed, "{name} case {case}: {report:?}");
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 2], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 3, 2, 3], -1.0, 1.0);
    let rec = forward(&[x, w], |t, v| {
        let y = t.conv2d(v[0], v[1]);
        let y = t.leaky_relu(y, 0.01);
        let y = t.sigmoid(y);
        let y = t.narrow(y, 2, 1, 2);
        t.sum(y)
    })
    .unwrap();
    let replayed = rec.tape.replay();
    let again = rec.tape.replay();
    assert_eq!(replayed.len(), rec.tape.len());
    for (i, (a, b)) in replayed.iter().zip(&again).enumerate() {
        let orig = rec.tape.value(rec.tape.var_at(i));
        assert_eq!(a.data(), orig.data());
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn non_finite_reports_first_offending_node() {
    let err = forward(&[Tensor::scalar(0.0)], |t, x| {
        let y = t.pow(x[0], -1.0); // 1/0 -> inf at node 1
        t.scale(y, 2.0)
    })
    .err()
    .unwrap();
    assert_eq!(err, DiffError::NonFinite { node: 1 });
}

#[test]
fn seed_shape_mismatch_is_an_error() {
    let rec = forward(&[Tensor::vector(vec![1.0, 2.0])], |t, x| t.scale(x[0], 2.0)).unwrap();
    let err = rec.backward(&Tensor::scalar(1.0)).err().unwrap();
    assert!(matches!(err, DiffError::ShapeMismatch { node: 1, .. }));
}

#[test]
fn constants_receive_no_gradient() {
    let mut t: Tape<f64> = Tape::new();
    let c = t.constant(Tensor::scalar(2.0));
    let v = t.var(Tensor::scalar(3.0));
    let y = t.mul(c, v);
    let g = t.backward(y, &Tensor::scalar(1.0)).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(v).unwrap().item(), 2.0);
}
