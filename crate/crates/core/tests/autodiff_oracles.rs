//! Oracle tests for the tensor/tape primitives: hand-derived values,
//! an independent triple-loop matmul oracle, and finite-difference
//! verification of every primitive's gradient.

use mmasr_core::autodiff::{grad_check, Tape, Tensor, TensorError, TensorId};
use mmasr_core::rng::Rng;

fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Independent scalar triple-loop product, written without reference to the
/// implementation under test.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let i2 = tape.leaf(tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let v = tape.leaf(tensor(&[2, 1], &[5.0, 6.0]));
    let out = tape.matmul(i2, v).unwrap();
    assert_eq!(tape.value(out).data(), &[5.0, 6.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut tape = Tape::new();
    let a = tape.leaf(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.leaf(tensor(&[2, 1], &[5.0, 6.0]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[17.0, 39.0]);

    let mut rng = Rng::new(3);
    for _ in 0..20 {
        let (m, k, n) = (1 + rng.below(5), 1 + rng.below(5), 1 + rng.below(5));
        let ta = random_tensor(&[m, k], &mut rng);
        let tb = random_tensor(&[k, n], &mut rng);
        let expect = matmul_oracle(ta.data(), tb.data(), m, k, n);
        let mut t = Tape::new();
        let (ia, ib) = (t.leaf(ta), t.leaf(tb));
        let o = t.matmul(ia, ib).unwrap();
        for (got, want) in t.value(o).data().iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::<f64>::zeros(vec![2, 3]));
    let b = tape.leaf(Tensor::zeros(vec![2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn masked_softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(tensor(&[1, 2], &[0.0, 0.0]));
    let y = tape.masked_softmax(x, &[true, true]).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.leaf(tensor(&[1, 2], &[2.0f64.ln(), 0.0]));
    let y = tape.masked_softmax(x, &[true, true]).unwrap();
    assert!((tape.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((tape.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);

    let x = tape.leaf(tensor(&[1, 2], &[9.0, 7.0]));
    let y = tape.masked_softmax(x, &[true, false]).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn masked_softmax_rejects_empty_row() {
    let mut tape = Tape::new();
    let x = tape.leaf(tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let err = tape.masked_softmax(x, &[true, true, false, false]).unwrap_err();
    assert_eq!(err, TensorError::EmptyRow { row: 1 });
}

#[test]
fn masked_softmax_is_shift_invariant() {
    let mut rng = Rng::new(11);
    for _ in 0..50 {
        let n = 2 + rng.below(6);
        let x = random_tensor(&[1, n], &mut rng);
        let c = rng.uniform_in(-30.0, 30.0);
        let shifted =
            Tensor::new(vec![1, n], x.data().iter().map(|v| v + c).collect()).unwrap();
        let mask: Vec<bool> = (0..n).map(|j| j == 0 || rng.uniform() < 0.7).collect();
        let mut t1 = Tape::new();
        let i1 = t1.leaf(x);
        let y1 = t1.masked_softmax(i1, &mask).unwrap();
        let mut t2 = Tape::new();
        let i2 = t2.leaf(shifted);
        let y2 = t2.masked_softmax(i2, &mask).unwrap();
        for (a, b) in t1.value(y1).data().iter().zip(t2.value(y2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let gain = tape.leaf(tensor(&[2], &[1.0, 1.0]));
    let bias = tape.leaf(tensor(&[2], &[0.0, 0.0]));

    let x = tape.leaf(tensor(&[1, 2], &[5.0, 5.0]));
    let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));

    // mean 2, population std 1
    let x = tape.leaf(tensor(&[1, 2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, gain, bias, 1e-14).unwrap();
    assert!((tape.value(y).data()[0] + 1.0).abs() < 1e-6);
    assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-6);

    let bias7 = tape.leaf(tensor(&[2], &[7.0, 7.0]));
    let x = tape.leaf(tensor(&[1, 2], &[0.0, 0.0]));
    let y = tape.layer_norm(x, gain, bias7, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[7.0, 7.0]);
}

#[test]
fn backward_product_rule() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0).with_grad());
    let y = tape.leaf(Tensor::scalar(5.0).with_grad());
    let loss = tape.mul(x, y).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(&tape, x).data(), &[5.0]);
    assert_eq!(grads.wrt(&tape, y).data(), &[3.0]);
}

#[test]
fn backward_softmax_cross_entropy_closed_form() {
    // loss = -log softmax(logits)[c]  =>  d/dlogits = softmax(logits) - onehot(c)
    let logits = tensor(&[1, 4], &[0.2, -1.3, 0.7, 0.1]);
    let target = 2usize;

    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone().with_grad());
    let lp = tape.log_softmax(x).unwrap();
    let onehot = tape.constant(tensor(&[1, 4], &[0.0, 0.0, 1.0, 0.0]));
    let picked = tape.mul(lp, onehot).unwrap();
    let s = tape.sum_all(picked).unwrap();
    let loss = tape.scale(s, -1.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    let got = grads.wrt(&tape, x);

    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    for j in 0..4 {
        let want = exps[j] / z - if j == target { 1.0 } else { 0.0 };
        assert!((got.data()[j] - want).abs() < 1e-12);
    }

    // and the finite-difference route agrees
    let err = grad_check(
        |t, x| {
            let lp = t.log_softmax(x)?;
            let onehot = t.constant(tensor(&[1, 4], &[0.0, 0.0, 1.0, 0.0]));
            let picked = t.mul(lp, onehot)?;
            let s = t.sum_all(picked)?;
            t.scale(s, -1.0)
        },
        &logits,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn backward_disconnected_input_gets_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0).with_grad());
    let z = tape.leaf(Tensor::scalar(9.0).with_grad());
    let loss = tape.mul(x, x).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.wrt(&tape, z).data(), &[0.0]);
    assert!(grads.get(z).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(tensor(&[1, 2], &[1.0, 2.0]).with_grad());
    assert_eq!(tape.backward(x).unwrap_err(), TensorError::NotScalar);
}

#[test]
fn backward_is_deterministic() {
    let run = || -> Vec<f64> {
        let mut tape = Tape::new();
        let mut rng = Rng::new(77);
        let a = tape.leaf(random_tensor(&[3, 3], &mut rng).with_grad());
        let b = tape.leaf(random_tensor(&[3, 3], &mut rng).with_grad());
        let m = tape.matmul(a, b).unwrap();
        let r = tape.relu(m).unwrap();
        let s = tape.mul(r, r).unwrap();
        let loss = tape.sum_all(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut out = grads.wrt(&tape, a).data().to_vec();
        out.extend_from_slice(grads.wrt(&tape, b).data());
        out
    };
    let g1 = run();
    let g2 = run();
    assert!(g1.iter().zip(g2.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn grad_check_sum_of_squares_is_tight() {
    let mut rng = Rng::new(5);
    let x = random_tensor(&[3, 4], &mut rng);
    let err = grad_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            t.sum_all(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "rel err {err}");
}

#[test]
fn grad_check_constant_function_is_exact() {
    let x = tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let err = grad_check(|t, _x| Ok(t.constant(Tensor::scalar(4.0))), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_reports_non_finite_probe() {
    // ln is finite at the center but the minus probe crosses zero
    let x = Tensor::scalar(5e-7);
    let err = grad_check(|t, x| t.custom_scalar(x, Box::new(LnOp)), &x, 1e-6);
    assert!(matches!(err, Err(TensorError::NonFiniteProbe)), "{err:?}");
}

struct LnOp;
impl mmasr_core::autodiff::CustomScalarOp<f64> for LnOp {
    fn name(&self) -> &'static str {
        "ln"
    }
    fn forward(&self, x: &Tensor<f64>) -> Result<f64, TensorError> {
        Ok(x.data()[0].ln())
    }
    fn gradient(&self, x: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
        Ok(Tensor::scalar(1.0 / x.data()[0]))
    }
}

/// Weighted scalar readout so finite differences see every output entry.
fn weighted_sum(
    t: &mut Tape<f64>,
    out: TensorId,
    rng: &mut Rng,
) -> Result<TensorId, TensorError> {
    let shape = t.value(out).shape().to_vec();
    let w = t.constant(random_tensor(&shape, rng));
    let prod = t.mul(out, w)?;
    t.sum_all(prod)
}

#[test]
fn every_primitive_passes_grad_check_on_ten_seeds() {
    for seed in 0..10u64 {
        let mut rng = Rng::new(1000 + seed);

        // add / sub / mul / scale
        let x = random_tensor(&[2, 3], &mut rng);
        let other = random_tensor(&[2, 3], &mut rng);
        for op in 0..4 {
            let other = other.clone();
            let err = grad_check(
                |t, xid| {
                    let o = t.constant(other.clone());
                    let y = match op {
                        0 => t.add(xid, o)?,
                        1 => t.sub(xid, o)?,
                        2 => t.mul(xid, o)?,
                        _ => t.scale(xid, -1.7)?,
                    };
                    weighted_sum(t, y, &mut Rng::new(seed * 31 + op as u64))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "elementwise op {op} seed {seed}: {err}");
        }

        // matmul, both sides
        let a = random_tensor(&[3, 2], &mut rng);
        let b = random_tensor(&[2, 4], &mut rng);
        let err = grad_check(
            |t, xid| {
                let bb = t.constant(b.clone());
                let y = t.matmul(xid, bb)?;
                weighted_sum(t, y, &mut Rng::new(seed))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul lhs seed {seed}: {err}");
        let err = grad_check(
            |t, xid| {
                let aa = t.constant(a.clone());
                let y = t.matmul(aa, xid)?;
                weighted_sum(t, y, &mut Rng::new(seed))
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "matmul rhs seed {seed}: {err}");

        // transpose, add_row, relu, log_softmax, masked_softmax
        let x = random_tensor(&[3, 4], &mut rng);
        let err = grad_check(
            |t, xid| {
                let y = t.transpose(xid)?;
                weighted_sum(t, y, &mut Rng::new(seed + 1))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "transpose seed {seed}: {err}");

        let bias = random_tensor(&[4], &mut rng);
        let err = grad_check(
            |t, xid| {
                let b = t.constant(bias.clone());
                let y = t.add_row(xid, b)?;
                weighted_sum(t, y, &mut Rng::new(seed + 2))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "add_row wrt x seed {seed}: {err}");
        let err = grad_check(
            |t, bid| {
                let xx = t.constant(x.clone());
                let y = t.add_row(xx, bid)?;
                weighted_sum(t, y, &mut Rng::new(seed + 2))
            },
            &bias,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "add_row wrt bias seed {seed}: {err}");

        let err = grad_check(
            |t, xid| {
                let y = t.relu(xid)?;
                weighted_sum(t, y, &mut Rng::new(seed + 3))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relu seed {seed}: {err}");

        let err = grad_check(
            |t, xid| {
                let y = t.log_softmax(xid)?;
                weighted_sum(t, y, &mut Rng::new(seed + 4))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "log_softmax seed {seed}: {err}");

        let mask: Vec<bool> = (0..12).map(|j| j % 4 != 3).collect();
        let err = grad_check(
            |t, xid| {
                let y = t.masked_softmax(xid, &mask)?;
                weighted_sum(t, y, &mut Rng::new(seed + 5))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "masked_softmax seed {seed}: {err}");

        // layer_norm wrt each input
        let gain = random_tensor(&[4], &mut rng);
        let lnbias = random_tensor(&[4], &mut rng);
        let err = grad_check(
            |t, xid| {
                let g = t.constant(gain.clone());
                let b = t.constant(lnbias.clone());
                let y = t.layer_norm(xid, g, b, 1e-5)?;
                weighted_sum(t, y, &mut Rng::new(seed + 6))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "layer_norm wrt x seed {seed}: {err}");
        let err = grad_check(
            |t, gid| {
                let xx = t.constant(x.clone());
                let b = t.constant(lnbias.clone());
                let y = t.layer_norm(xx, gid, b, 1e-5)?;
                weighted_sum(t, y, &mut Rng::new(seed + 6))
            },
            &gain,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "layer_norm wrt gain seed {seed}: {err}");

        // embed, slice_rows, slice_cols, concat_cols, sum, mean
        let table = random_tensor(&[5, 3], &mut rng);
        let err = grad_check(
            |t, tid| {
                let y = t.embed(tid, &[4, 0, 0, 2])?;
                weighted_sum(t, y, &mut Rng::new(seed + 7))
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "embed seed {seed}: {err}");

        let err = grad_check(
            |t, xid| {
                let y = t.slice_rows(xid, 1, 3)?;
                weighted_sum(t, y, &mut Rng::new(seed + 8))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "slice_rows seed {seed}: {err}");

        let err = grad_check(
            |t, xid| {
                let y = t.slice_cols(xid, 1, 3)?;
                weighted_sum(t, y, &mut Rng::new(seed + 9))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "slice_cols seed {seed}: {err}");

        let err = grad_check(
            |t, xid| {
                let left = t.slice_cols(xid, 0, 2)?;
                let right = t.slice_cols(xid, 2, 4)?;
                let y = t.concat_cols(&[right, left])?;
                weighted_sum(t, y, &mut Rng::new(seed + 10))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "concat_cols seed {seed}: {err}");

        let err = grad_check(|t, xid| t.mean_all(xid), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "mean_all seed {seed}: {err}");

        // im2col and maxpool over a 4x3 grid with 2 channels
        let grid = random_tensor(&[12, 2], &mut rng);
        let err = grad_check(
            |t, xid| {
                let y = t.im2col(xid, 4, 3)?;
                weighted_sum(t, y, &mut Rng::new(seed + 11))
            },
            &grid,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "im2col seed {seed}: {err}");

        let err = grad_check(
            |t, xid| {
                let y = t.maxpool2(xid, 4, 3)?;
                weighted_sum(t, y, &mut Rng::new(seed + 12))
            },
            &grid,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "maxpool2 seed {seed}: {err}");
    }
}

