use std::sync::Arc;

use super::*;
use crate::testutil::{grad_check, rng, uniform};
use crate::Error;

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(i, p) * b.at(p, j);
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn tensor_rejects_bad_shapes() {
    assert!(Tensor::new(&[2, 0], vec![]).is_err());
    assert!(matches!(
        Tensor::new(&[2, 2], vec![1.0; 3]),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn matmul_identity_and_basis() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::eye(2));
    let m = tape.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let row = tape.constant(mat(&[&[1.0, 0.0]]));
    let col = tape.constant(mat(&[&[5.0], &[7.0]]));
    let p = tape.matmul(row, col).unwrap();
    assert_eq!(tape.value(p).data(), &[5.0]);
}

#[test]
fn matmul_matches_triple_loop_exactly() {
    let mut r = rng(1);
    for _ in 0..5 {
        let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
        let b = uniform(&mut r, &[4, 2], -2.0, 2.0);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let p = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.value(p).data(), triple_loop(&a, &b).as_slice());
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_is_associative() {
    let mut r = rng(2);
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[4, 5], -2.0, 2.0);
    let c = uniform(&mut r, &[5, 2], -2.0, 2.0);
    let mut tape = Tape::new();
    let (va, vb, vc) = (tape.constant(a), tape.constant(b), tape.constant(c));
    let ab = tape.matmul(va, vb).unwrap();
    let left = tape.matmul(ab, vc).unwrap();
    let bc = tape.matmul(vb, vc).unwrap();
    let right = tape.matmul(va, bc).unwrap();
    for (x, y) in tape.value(left).data().iter().zip(tape.value(right).data()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn sigmoid_values_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![0.0, 10.0]).unwrap(), true);
    let y = tape.sigmoid(x);
    let expected_10 = 1.0 / (1.0 + (-10.0f64).exp());
    assert_eq!(tape.value(y).data()[0], 0.5);
    assert!((tape.value(y).data()[1] - expected_10).abs() < 1e-15);
    assert!((expected_10 - 0.9999546).abs() < 1e-7);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data()[0], 0.25);
}

#[test]
fn softmax_closed_forms() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[3], 2.5));
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_matches_unstabilized_oracle() {
    let mut r = rng(3);
    let x = uniform(&mut r, &[20], -2.0, 2.0);
    let z: f64 = x.data().iter().map(|v| v.exp()).sum();
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.softmax(v, 0).unwrap();
    for (got, xi) in tape.value(y).data().iter().zip(x.data()) {
        assert!((got - xi.exp() / z).abs() < 1e-12);
    }
    assert!((tape.value(y).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_along_each_axis_sums_to_one() {
    let mut r = rng(4);
    let x = uniform(&mut r, &[2, 3, 4], -2.0, 2.0);
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let y0 = tape.softmax(v, 1).unwrap();
    let d = tape.value(y0).data();
    for o in 0..2 {
        for i in 0..4 {
            let s: f64 = (0..3).map(|a| d[o * 12 + a * 4 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    assert!(tape.softmax(v, 3).is_err());
}

#[test]
fn elementwise_basics() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let t = tape.tanh(z);
    assert_eq!(tape.value(t).item(), 0.0);
    let x = tape.constant(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
    let m = tape.mean(x);
    assert_eq!(tape.value(m).item(), 3.0);
    let bad = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(x, bad), Err(Error::Dimension { .. })));
    let neg = tape.constant(Tensor::new(&[1], vec![-1.0]).unwrap());
    assert!(tape.log(neg).is_err());
}

#[test]
fn add_backward_passes_upstream_to_both() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let b = tape.leaf(Tensor::new(&[3], vec![4.0, 5.0, 6.0]).unwrap(), true);
    let c = tape.add(a, b).unwrap();
    let w = tape.constant(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
    let cw = tape.mul(c, w).unwrap();
    let s = tape.sum(cw);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[0.5, -1.0, 2.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[0.5, -1.0, 2.0]);
}

#[test]
fn backward_simple_cases() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 3], 0.7), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2], 1.0), true);
    let y = tape.scale(x, 3.0);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 6.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn fan_out_sums_contributions() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[3], 0.3), true);
    let s1 = tape.sum(x);
    let s2 = tape.sum(x);
    let t = tape.add(s1, s2).unwrap();
    tape.backward(t).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 2.0));
}

#[test]
fn gather_rows_identity_and_duplicates() {
    let mut r = rng(5);
    let x = uniform(&mut r, &[4, 3], -2.0, 2.0);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let g = tape.gather_rows(v, vec![0, 1, 2, 3]).unwrap();
    assert_eq!(tape.value(g), &x);

    let d = tape.gather_rows(v, vec![2, 2]).unwrap();
    assert_eq!(tape.value(d).row(0), x.row(2));
    assert_eq!(tape.value(d).row(1), x.row(2));
    let s = tape.sum(d);
    tape.backward(s).unwrap();
    let grad = tape.grad(v).unwrap();
    assert_eq!(grad.row(2), &[2.0, 2.0, 2.0]);
    assert_eq!(grad.row(0), &[0.0, 0.0, 0.0]);

    assert!(matches!(
        tape.gather_rows(v, vec![4]),
        Err(Error::Index { index: 4, len: 4, .. })
    ));
}

#[test]
fn masked_softmax_rows() {
    let mut tape = Tape::new();
    let x = tape.constant(mat(&[&[1.0, 5.0, -3.0], &[2.0, 0.0, 1.0]]));
    let vis = [false, true, false, false, false, false];
    let y = tape.masked_softmax(x, &vis).unwrap();
    let d = tape.value(y).data();
    assert_eq!(&d[..3], &[0.0, 1.0, 0.0]);
    // Second row has no visible entry: plain softmax.
    let z: f64 = [2.0f64, 0.0, 1.0].iter().map(|v| v.exp()).sum();
    assert!((d[3] - 2f64.exp() / z).abs() < 1e-15);
}

fn conv_map_fixture() -> Arc<ConvMap> {
    let pairs = vec![(0, 0, 0), (1, 1, 0), (2, 2, 1), (0, 1, 1), (1, 0, 2)];
    Arc::new(ConvMap::from_pairs(3, 3, 3, &pairs).unwrap())
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = rng(6);
    let h = 1e-5;
    type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>);
    let cases: Vec<Case> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| {
            let p = t.matmul(v[0], v[1])?;
            let q = t.tanh(p);
            Ok(t.sum(q))
        })),
        ("transpose+mul", vec![vec![3, 2], vec![2, 3]], Box::new(|t, v| {
            let tr = t.transpose(v[0])?;
            let p = t.mul(tr, v[1])?;
            Ok(t.sum(p))
        })),
        ("sigmoid", vec![vec![5]], Box::new(|t, v| {
            let s = t.sigmoid(v[0]);
            let q = t.mul(s, s)?;
            Ok(t.sum(q))
        })),
        ("softmax axis0", vec![vec![4, 3], vec![4, 3]], Box::new(|t, v| {
            let s = t.softmax(v[0], 0)?;
            let p = t.mul(s, v[1])?;
            Ok(t.sum(p))
        })),
        ("softmax axis1", vec![vec![4, 3], vec![4, 3]], Box::new(|t, v| {
            let s = t.softmax(v[0], 1)?;
            let p = t.mul(s, v[1])?;
            Ok(t.sum(p))
        })),
        ("log_softmax", vec![vec![3, 5], vec![3, 5]], Box::new(|t, v| {
            let s = t.log_softmax(v[0], 1)?;
            let p = t.mul(s, v[1])?;
            Ok(t.mean(p))
        })),
        ("tanh/relu/exp/sub", vec![vec![6], vec![6]], Box::new(|t, v| {
            let a = t.tanh(v[0]);
            let b = t.relu(v[1]);
            let c = t.sub(a, b)?;
            let e = t.exp(c);
            Ok(t.mean(e))
        })),
        ("log/softplus/scale", vec![vec![6]], Box::new(|t, v| {
            let sp = t.softplus(v[0]);
            let l = t.log(sp)?;
            let s = t.scale(l, 1.7);
            let a = t.add_scalar(s, 0.3);
            Ok(t.sum(a))
        })),
        ("scalar broadcast", vec![vec![1], vec![2, 3]], Box::new(|t, v| {
            let m = t.mul(v[0], v[1])?;
            let a = t.add(m, v[0])?;
            let q = t.mul(a, a)?;
            Ok(t.sum(q))
        })),
        ("bias/mean_rows/concat", vec![vec![3, 2], vec![2], vec![3, 1]], Box::new(|t, v| {
            let b = t.add_bias(v[0], v[1])?;
            let c = t.concat_cols(&[b, v[2]])?;
            let r = t.concat_rows(&[c, c])?;
            let m = t.mean_rows(r)?;
            let q = t.mul(m, m)?;
            Ok(t.sum(q))
        })),
        ("gather/slice", vec![vec![4, 3]], Box::new(|t, v| {
            let g = t.gather_rows(v[0], vec![3, 0, 3, 1])?;
            let s = t.slice_cols(g, 1, 3)?;
            let q = t.tanh(s);
            let q2 = t.mul(q, s)?;
            Ok(t.sum(q2))
        })),
        ("normalize_rows", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| {
            let n = t.normalize_rows(v[0])?;
            let p = t.mul(n, v[1])?;
            Ok(t.sum(p))
        })),
        ("masked_softmax", vec![vec![2, 4], vec![2, 4]], Box::new(|t, v| {
            let vis = [true, false, true, true, false, false, false, false];
            let s = t.masked_softmax(v[0], &vis)?;
            let p = t.mul(s, v[1])?;
            Ok(t.sum(p))
        })),
        ("sparse_conv", vec![vec![3, 2], vec![3, 2, 4]], Box::new(|t, v| {
            let y = t.sparse_conv(v[0], v[1], conv_map_fixture())?;
            let q = t.tanh(y);
            Ok(t.sum(q))
        })),
        ("reshape", vec![vec![2, 3]], Box::new(|t, v| {
            let r = t.reshape(v[0], &[3, 2])?;
            let w = t.constant(Tensor::new(&[3, 2], vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.2]).unwrap());
            let p = t.mul(r, w)?;
            let q = t.tanh(p);
            Ok(t.sum(q))
        })),
    ];
    for (name, shapes, f) in &cases {
        for _ in 0..5 {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(&mut r, s, -2.0, 2.0)).collect();
            // log(softplus) and normalize need safe inputs; uniform(-2,2) satisfies both.
            let err = grad_check(&inputs, h, |t, v| f(t, v));
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

#[test]
fn sparse_conv_forward_by_hand() {
    let map = conv_map_fixture();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let w = tape.constant(Tensor::new(&[3, 1, 1], vec![10.0, 100.0, 1000.0]).unwrap());
    let y = tape.sparse_conv(x, w, map).unwrap();
    // o0 = x0*w0 + x1*w1; o1 = x2*w2 + x1*w0; o2 = x0*w1
    assert_eq!(tape.value(y).data(), &[210.0, 3020.0, 100.0]);
}

#[test]
fn inference_tape_records_no_gradients() {
    let mut tape = Tape::inference();
    let x = tape.leaf(Tensor::full(&[2], 1.0), true);
    assert!(!tape.requires_grad(x));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).is_none());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(xs in prop::collection::vec(-5.0f64..5.0, 1..12), c in -50.0f64..50.0) {
            let mut tape = Tape::new();
            let n = xs.len();
            let a = tape.constant(Tensor::new(&[n], xs.clone()).unwrap());
            let b = tape.constant(Tensor::new(&[n], xs.iter().map(|x| x + c).collect()).unwrap());
            let ya = tape.softmax(a, 0).unwrap();
            let yb = tape.softmax(b, 0).unwrap();
            let s: f64 = tape.value(ya).data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for (p, q) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }

        #[test]
        fn forward_ops_stay_finite(xs in prop::collection::vec(-30.0f64..30.0, 1..16)) {
            let n = xs.len();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[n], xs).unwrap());
            let outs = [tape.sigmoid(x), tape.tanh(x), tape.softplus(x), tape.relu(x), tape.exp(x)];
            for o in outs {
                prop_assert!(tape.value(o).all_finite());
            }
        }
    }
}
