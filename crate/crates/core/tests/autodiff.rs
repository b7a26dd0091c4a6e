use fedssf_core::gradcheck::{finite_diff_grad, op_suite, toy_model_suite};
use fedssf_core::{Error, Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::eye(2));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(i, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);

    let z = tape.constant(Tensor::zeros(&[3, 4]));
    let any = tape.constant(t(&[4, 2], &[1.0, -2.0, 3.5, 0.1, 7.0, 8.0, -9.0, 2.0]));
    let out = tape.matmul(z, any).unwrap();
    assert_eq!(tape.value(out).shape(), &[3, 2]);
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

    let bad = tape.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(tape.matmul(any, bad), Err(Error::Dimension { .. })));
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let out = tape.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(out).data(), &[9.0]);

    let data: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
    let x = tape.constant(t(&[1, 2, 5, 4], &data));
    let mut delta = vec![0.0; 2 * 2 * 9];
    delta[4] = 1.0;
    delta[2 * 9 + 9 + 4] = 1.0;
    let k = tape.constant(t(&[2, 2, 3, 3], &delta));
    let out = tape.conv2d(x, k, None, 1, 1).unwrap();
    assert_eq!(tape.value(out).data(), &data[..]);

    let z = tape.constant(Tensor::zeros(&[2, 2, 6, 6]));
    let k = tape.constant(t(&[3, 2, 3, 3], &[0.5; 54]));
    let out = tape.conv2d(z, k, None, 2, 1).unwrap();
    assert_eq!(tape.value(out).shape(), &[2, 3, 3, 3]);
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

    let small = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
    let big = tape.constant(Tensor::ones(&[1, 1, 5, 5]));
    assert!(matches!(tape.conv2d(small, big, None, 1, 1), Err(Error::Dimension { .. })));
}

#[test]
fn conv2d_output_size_formula() {
    for (h, k, s, p) in [(7, 3, 2, 1), (8, 2, 2, 0), (5, 5, 1, 0), (9, 3, 3, 2)] {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, h, h]));
        let kk = tape.constant(Tensor::ones(&[1, 1, k, k]));
        let out = tape.conv2d(x, kk, None, s, p).unwrap();
        let expect = (h + 2 * p - k) / s + 1;
        assert_eq!(tape.value(out).shape(), &[1, 1, expect, expect]);
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = t(&[3], &[0.5, -2.0, 4.0]);
    let w = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
    let xv = tape.constant(x.clone());
    let p = tape.mul(w, xv).unwrap();
    let loss = tape.sum(p).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).data(), x.data());

    let mut tape = Tape::new();
    let w = tape.param(Tensor::scalar(3.0));
    let c = tape.constant(Tensor::scalar(5.0));
    tape.backward(c).unwrap();
    assert_eq!(tape.grad(w).data(), &[0.0]);

    let mut tape = Tape::new();
    let w = tape.param(Tensor::scalar(1.0));
    let x = tape.constant(Tensor::scalar(2.0));
    let y = tape.constant(Tensor::scalar(0.0));
    let pred = tape.mul(w, x).unwrap();
    let loss = tape.mse(pred, y).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).data(), &[8.0]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::scalar(1.5));
    let sq = tape.square(w).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).data(), &[6.0]);
    tape.zero_grad();
    assert_eq!(tape.grad(w).data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::ones(&[2]));
    assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
}

#[test]
fn finite_difference_examples() {
    let g = finite_diff_grad(|x| Ok(x.data().iter().map(|v| v * v).sum()), &t(&[2], &[1.0, 2.0]), 1e-5).unwrap();
    assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);
    let g = finite_diff_grad(|_| Ok(7.0), &t(&[3], &[1.0, 2.0, 3.0]), 1e-5).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
    let g = finite_diff_grad(|x| Ok(3.0 * x.data()[0] - x.data()[1]), &t(&[2], &[0.3, -0.8]), 1e-5).unwrap();
    assert!((g.data()[0] - 3.0).abs() < 1e-8 && (g.data()[1] + 1.0).abs() < 1e-8);
}

#[test]
fn every_operation_matches_finite_differences() {
    for seed in 0..10 {
        for r in op_suite(seed).unwrap() {
            assert!(r.max_rel_err < 1e-4, "seed {seed} {}: {}", r.name, r.max_rel_err);
        }
    }
}

#[test]
fn local_loss_matches_finite_differences_on_toy_model() {
    for seed in 0..10 {
        let reports = toy_model_suite(seed).unwrap();
        assert!(reports.iter().any(|r| r.name.contains("gamma_adv")));
        assert!(reports.iter().any(|r| r.name.contains("theta")));
        for r in reports {
            assert!(r.max_rel_err < 1e-4, "seed {seed} {}: {}", r.name, r.max_rel_err);
        }
    }
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1e200));
    let sq = tape.square(x);
    assert!(matches!(sq, Err(Error::NonFinite(_))));
}
