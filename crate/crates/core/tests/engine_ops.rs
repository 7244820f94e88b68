mod common;

use mmtp::tensor::nn::{lstm_forward, EngineRng};
use mmtp::tensor::{clip_global_norm, global_norm, Tape, Unary};
use mmtp::{Error, Mask, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn gradients_match_finite_differences() {
    let reports = common::grad_suite::run_suite().unwrap();
    for r in &reports {
        println!(
            "{:<15} cases={} max_rel_f64={:.3e} max_rel_f32={:.3e}",
            r.name, r.cases, r.worst_extended, r.worst_single
        );
    }
    for r in &reports {
        assert!(r.worst_extended < 1e-6, "{} f64 error {}", r.name, r.worst_extended);
        assert!(r.worst_single < 1e-3, "{} f32 error {}", r.name, r.worst_single);
    }
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let ones = tape.constant(t64(&[2, 1], &[1.0, 1.0]));
    let y = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 1]);
    assert_eq!(tape.value(y).data(), &[3.0, 7.0]);

    let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = tape.matmul(a, eye).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let z = tape.constant(Tensor::zeros([2, 3]));
    let y = tape.matmul(a, z).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let bad = tape.constant(Tensor::zeros([3, 1]));
    assert!(matches!(tape.matmul(a, bad), Err(Error::Shape { .. })));
}

#[test]
fn batched_matmul_matches_naive_oracle() {
    let (b, m, k, n) = (3, 4, 5, 2);
    let a: Vec<f64> = (0..b * m * k).map(|i| (i as f64 * 0.37).sin()).collect();
    let w: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
    let mut tape = Tape::<f64>::new();
    let av = tape.constant(t64(&[b, m, k], &a));
    let wv = tape.constant(t64(&[k, n], &w));
    let y = tape.matmul(av, wv).unwrap();
    let mut want = Vec::new();
    for bi in 0..b {
        want.extend(naive_matmul(&a[bi * m * k..(bi + 1) * m * k], &w, m, k, n));
    }
    assert!(close(tape.value(y).data(), &want, 1e-12));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[2.5, 2.5, 2.5]));
    let y = tape.softmax_masked(x, None).unwrap();
    assert!(close(tape.value(y).data(), &[1.0 / 3.0; 3], 1e-12));

    let x = tape.constant(t64(&[3], &[9.0, 1.0, 4.0]));
    let m = Mask::new([3], vec![true, false, false]).unwrap();
    let y = tape.softmax_masked(x, Some(&m)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0]);

    let x = tape.constant(t64(&[2], &[0.0, 2f64.ln()]));
    let y = tape.softmax_masked(x, None).unwrap();
    assert!(close(tape.value(y).data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-12));

    let none = Mask::new([3], vec![false; 3]).unwrap();
    let x = tape.constant(t64(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(tape.softmax_masked(x, Some(&none)), Err(Error::DegenerateRow { .. })));
}

#[test]
fn softmax_masked_entries_are_exact_zero_and_rows_sum_to_one() {
    let mut tape = Tape::<f32>::new();
    let data: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).sin() * 5.0).collect();
    let x = tape.constant(Tensor::from_f64([3, 4], &data).unwrap());
    let flags = vec![true, false, true, true, false, false, true, false, true, true, true, true];
    let m = Mask::new([3, 4], flags.clone()).unwrap();
    let y = tape.softmax_masked(x, Some(&m)).unwrap();
    let v = tape.value(y).data();
    for row in 0..3 {
        let s: f32 = v[row * 4..row * 4 + 4].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    for (val, ok) in v.iter().zip(&flags) {
        if !ok {
            assert_eq!(*val, 0.0);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let ones = tape.constant(Tensor::full([2], 1.0));
    let zeros = tape.constant(Tensor::zeros([2]));

    let x = tape.constant(t64(&[1, 2], &[4.0, 4.0]));
    let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));

    let x = tape.constant(t64(&[1, 2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
    // var = 1, so y = ±1 / sqrt(1 + eps).
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!(close(tape.value(y).data(), &[-s, s], 1e-12));

    let bias = tape.constant(t64(&[2], &[0.5, -2.0]));
    let y = tape.layer_norm(x, zeros, bias, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -2.0]);
}

#[test]
fn conv1d_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 3, 1], &[1.0, 2.0, 3.0]));
    let k = tape.constant(t64(&[3, 1, 1], &[1.0, 1.0, 1.0]));
    let b0 = tape.constant(Tensor::zeros([1]));
    let y = tape.conv1d(x, k, b0).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);

    let impulse = tape.constant(t64(&[3, 1, 1], &[0.0, 1.0, 0.0]));
    let y = tape.conv1d(x, impulse, b0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);

    let zero_in = tape.constant(Tensor::zeros([2, 4, 2]));
    let k = tape.constant(Tensor::full([3, 2, 3], 0.7));
    let bias = tape.constant(t64(&[3], &[0.1, -0.2, 0.3]));
    let y = tape.conv1d(zero_in, k, bias).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4, 3]);
    for row in tape.value(y).data().chunks(3) {
        assert_eq!(row, &[0.1, -0.2, 0.3]);
    }

    let even = tape.constant(Tensor::zeros([2, 1, 1]));
    assert!(tape.conv1d(x, even, b0).is_err());
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn lstm_examples() {
    // All-zero weights: every gate sees 0, c = 0.5·c_prev + 0.5·0 = 0, h = 0.
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 2, 1], &[3.0, -1.0]));
    let w_ih = tape.constant(Tensor::zeros([1, 4]));
    let w_hh = tape.constant(Tensor::zeros([1, 4]));
    let b = tape.constant(Tensor::zeros([4]));
    let out = lstm_forward(&mut tape, x, w_ih, w_hh, b, None, None).unwrap();
    assert_eq!(tape.value(out.last).data(), &[0.0]);

    // Single step, scalar oracle.
    let (wi, wf, wg, wo) = (0.3, -0.4, 0.8, 0.5);
    let (bi, bf, bg, bo) = (0.1, 1.0, -0.2, 0.05);
    let xv = 1.5;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 1, 1], &[xv]));
    let w_ih = tape.constant(t64(&[1, 4], &[wi, wf, wg, wo]));
    let w_hh = tape.constant(Tensor::zeros([1, 4]));
    let b = tape.constant(t64(&[4], &[bi, bf, bg, bo]));
    let out = lstm_forward(&mut tape, x, w_ih, w_hh, b, None, None).unwrap();
    let c = sigmoid(wi * xv + bi) * (wg * xv + bg).tanh();
    let h = sigmoid(wo * xv + bo) * c.tanh();
    assert!((tape.value(out.last).data()[0] - h).abs() < 1e-12);
    assert!((tape.value(out.cell).data()[0] - c).abs() < 1e-12);

    let empty = tape.constant(Tensor::zeros([1, 0, 1]));
    assert!(matches!(lstm_forward(&mut tape, empty, w_ih, w_hh, b, None, None), Err(Error::EmptySequence)));
}

#[test]
fn lstm_constant_input_reaches_fixed_point() {
    // With a contracting recurrence the state for T and 2T agree once settled.
    let run = |steps: usize| {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, steps, 2], 0.4));
        let w_ih = tape.constant(Tensor::full([2, 12], 0.2));
        let w_hh = tape.constant(Tensor::full([3, 12], 0.1));
        let b = tape.constant(Tensor::zeros([12]));
        let out = lstm_forward(&mut tape, x, w_ih, w_hh, b, None, None).unwrap();
        tape.value(out.last).to_f64_vec()
    };
    assert!(close(&run(200), &run(400), 1e-9));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[0.0, -1.0, 2.0]));
    let y = tape.elu(x);
    let v = tape.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    assert_eq!(v[2], 2.0);

    let y = tape.unary(x, Unary::SmoothL1);
    assert_eq!(tape.value(y).data(), &[0.0, 0.5, 1.5]);

    let m = tape.constant(t64(&[2, 2], &[1.0, 5.0, 3.0, 2.0]));
    let p = tape.max_pool(m, 0, None).unwrap();
    assert_eq!(tape.value(p).data(), &[3.0, 5.0]);
    let mask = Mask::new([2, 2], vec![true, true, false, false]).unwrap();
    let p = tape.max_pool(m, 0, Some(&mask)).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 5.0]);

    let a = tape.constant(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let b = tape.constant(t64(&[2, 1], &[7.0, 8.0]));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 7.0, 4.0, 5.0, 6.0, 8.0]);
    let back = tape.slice(c, 1, 0, 3).unwrap();
    assert_eq!(tape.value(back), tape.value(a));
    let tail = tape.slice(c, 1, 3, 1).unwrap();
    assert_eq!(tape.value(tail), tape.value(b));
}

#[test]
fn dropout_behaviour() {
    let mut rng = EngineRng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([100_000], 1.0));
    let y = tape.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    let y = tape.dropout(x, 0.3, false, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());

    let y = tape.dropout(x, 0.3, true, &mut rng).unwrap();
    let mean = tape.value(y).data().iter().sum::<f64>() / 100_000.0;
    assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    let zeros = tape.value(y).data().iter().filter(|&&v| v == 0.0).count() as f64 / 100_000.0;
    assert!((zeros - 0.3).abs() < 0.05 * 0.3);
}

#[test]
fn backward_is_deterministic_and_needs_scalar_loss() {
    let grads = || {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_f64([2, 3], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap());
        let w = tape.leaf(Tensor::from_f64([3, 2], &[1.0, -1.0, 0.5, 0.25, -2.0, 0.3]).unwrap());
        let y = tape.matmul(a, w).unwrap();
        let y = tape.tanh(y);
        let l = tape.sum_all(y);
        let g = tape.backward(l).unwrap();
        (g.get(a).unwrap().clone(), g.get(w).unwrap().clone())
    };
    let (a1, w1) = grads();
    let (a2, w2) = grads();
    assert_eq!(a1.data(), a2.data());
    assert_eq!(w1.data(), w2.data());

    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::zeros([2]));
    assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
}

#[test]
fn gather_scatter_round_trip() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let g = tape.gather_rows(x, &[2, 0]).unwrap();
    assert_eq!(tape.value(g).data(), &[5.0, 6.0, 1.0, 2.0]);
    let s = tape.scatter_rows(g, &[2, 0], 4).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 0.0, 0.0]);
    assert!(tape.scatter_rows(g, &[1, 1], 4).is_err());
}

proptest! {
    #[test]
    fn clipping_bounds_norm_and_preserves_direction(
        vals in prop::collection::vec(-50.0f64..50.0, 1..40),
        threshold in 0.1f64..20.0,
    ) {
        let split = vals.len() / 2;
        let mut grads = vec![
            Tensor::<f64>::from_f64([split], &vals[..split]).unwrap(),
            Tensor::<f64>::from_f64([vals.len() - split], &vals[split..]).unwrap(),
        ];
        let before = global_norm(&grads);
        let reported = clip_global_norm(&mut grads, threshold).unwrap();
        prop_assert!((reported - before).abs() < 1e-12);
        let after = global_norm(&grads);
        prop_assert!(after <= threshold * (1.0 + 1e-12));
        let flat: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
        if before <= threshold {
            prop_assert_eq!(&flat, &vals);
        } else {
            let s = threshold / before;
            for (o, n) in vals.iter().zip(&flat) {
                prop_assert!((o * s - n).abs() <= 1e-12 * o.abs().max(1.0));
            }
        }
    }
}
