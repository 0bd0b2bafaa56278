use cxrlab::tensor::{Graph, Tensor, TensorError};
use proptest::prelude::*;

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn identity_matmul_and_hand_product() {
    let a = t(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, 5.0], &[0.0, 1.0, -1.0]]);
    assert_eq!(Tensor::eye(3).matmul(&a).unwrap(), a);
    let x = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let y = t(&[&[1.0], &[1.0]]);
    assert_eq!(x.matmul(&y).unwrap(), t(&[&[3.0], &[7.0]]));
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let g = Graph::standalone();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    match g.matmul(a, b) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn conv_identity_and_full_sum() {
    let g = Graph::standalone();
    let img = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let x = g.constant(img.clone()).unwrap();
    let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
    let y = g.conv2d(x, k, (1, 1), (0, 0), 1).unwrap();
    assert_eq!(*g.value(y), img);

    let ones = g.constant(Tensor::full(&[1, 3, 3], 1.0)).unwrap();
    let k3 = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let s = g.conv2d(ones, k3, (1, 1), (0, 0), 1).unwrap();
    assert_eq!(g.value(s).shape(), &[1, 1, 1]);
    assert_eq!(g.value(s).item(), 9.0);
}

#[test]
fn conv_rejects_empty_output() {
    let g = Graph::standalone();
    let x = g.constant(Tensor::zeros(&[1, 2, 2])).unwrap();
    let k = g.constant(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
    assert!(matches!(
        g.conv2d(x, k, (1, 1), (0, 0), 1),
        Err(TensorError::InvalidShape { .. })
    ));
}

#[test]
fn softmax_hand_cases() {
    let g = Graph::standalone();
    let x = g.constant(t(&[&[0.0, 3f64.ln()]])).unwrap();
    let y = g.softmax(x, 1).unwrap();
    let v = g.value(y);
    assert!((v.data()[0] - 0.25).abs() < 1e-15);
    assert!((v.data()[1] - 0.75).abs() < 1e-15);

    let u = g.constant(Tensor::full(&[1, 5], 2.5)).unwrap();
    let yu = g.softmax(u, 1).unwrap();
    for p in g.value(yu).data() {
        assert!((p - 0.2).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_hand_cases() {
    let g = Graph::standalone();
    let gain = g.constant(Tensor::full(&[2], 1.0)).unwrap();
    let bias = g.constant(Tensor::zeros(&[2])).unwrap();
    let x = g.constant(t(&[&[1.0, 3.0]])).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-14).unwrap();
    let v = g.value(y);
    assert!((v.data()[0] + 1.0).abs() < 1e-9);
    assert!((v.data()[1] - 1.0).abs() < 1e-9);

    let gain4 = g.constant(Tensor::full(&[4], 1.0)).unwrap();
    let bias4 = g.constant(Tensor::zeros(&[4])).unwrap();
    let c = g.constant(Tensor::full(&[1, 4], 7.0)).unwrap();
    let yc = g.layer_norm(c, gain4, bias4, 1e-5).unwrap();
    assert!(g.value(yc).data().iter().all(|v| *v == 0.0));
}

#[test]
fn cross_entropy_uniform_and_limit() {
    let g = Graph::standalone();
    let x = g.constant(Tensor::zeros(&[3, 4])).unwrap();
    let l = g.cross_entropy(x, &[0, 1, 3], None).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let mut sharp = Tensor::zeros(&[1, 4]);
    sharp.data_mut()[2] = 60.0;
    let s = g.constant(sharp).unwrap();
    let ls = g.cross_entropy(s, &[2], None).unwrap();
    assert!(g.value(ls).item() < 1e-20);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = t(&[&[0.3, -1.2, 2.0], &[0.0, 0.5, -0.5], &[1.0, 1.0, 1.0]]);
    let targets = [2, 0, 1];
    let g = Graph::standalone();
    let x = g.leaf(logits.clone(), true).unwrap();
    let l = g.cross_entropy(x, &targets, Some(1)).unwrap();
    let grad = g.backward(l).unwrap().get(x).unwrap();
    // rows 0 and 1 are counted; row 2 is ignored
    for r in 0..3 {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for k in 0..3 {
            let expected = if r == 2 {
                0.0
            } else {
                (row[k].exp() / z - if k == targets[r] { 1.0 } else { 0.0 }) / 2.0
            };
            assert!((grad.data()[r * 3 + k] - expected).abs() < 1e-14);
        }
    }
}

#[test]
fn cross_entropy_all_ignored_is_zero_with_warning() {
    let g = Graph::standalone();
    let x = g.leaf(Tensor::zeros(&[2, 3]), true).unwrap();
    let l = g.cross_entropy(x, &[0, 0], Some(0)).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    assert_eq!(g.warnings().len(), 1);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn backward_semantics() {
    let g = Graph::standalone();
    let x = g.leaf(Tensor::new(&[2, 2], vec![0.3, -4.0, 1.0, 9.0]).unwrap(), true).unwrap();
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|v| *v == 1.0));
    assert_eq!(g.backward(s).err(), Some(TensorError::BackwardTwice));
    g.reset_backward();
    assert!(g.backward(s).is_ok());

    let g2 = Graph::standalone();
    let w = g2.leaf(Tensor::full(&[3], 2.0), true).unwrap();
    let zero = g2.constant(Tensor::zeros(&[3])).unwrap();
    let p = g2.mul(w, zero).unwrap();
    let l = g2.sum(p).unwrap();
    let gr = g2.backward(l).unwrap();
    assert!(gr.get(w).unwrap().data().iter().all(|v| *v == 0.0));

    let nonscalar = g2.add(w, w).unwrap();
    g2.reset_backward();
    assert!(matches!(g2.backward(nonscalar), Err(TensorError::NonScalarLoss(_))));

    let other = Graph::standalone();
    let foreign = other.constant(Tensor::scalar(1.0)).unwrap();
    g2.reset_backward();
    assert_eq!(g2.backward(foreign).err(), Some(TensorError::DetachedVar));
}

#[test]
fn non_finite_is_an_error() {
    let g = Graph::standalone();
    let x = g.constant(Tensor::full(&[1, 2], 1e308)).unwrap();
    assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { .. })));
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let g = Graph::standalone();
        let a = g.constant(Tensor::new(&[3, 3], (0..9).map(|i| (i as f64).sin()).collect()).unwrap()).unwrap();
        let b = g.matmul(a, a).unwrap();
        let c = g.softmax(b, 1).unwrap();
        g.value(c).data().to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        vals in proptest::collection::vec(-30.0f64..30.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let g = Graph::standalone();
        let x = g.constant(Tensor::new(&[3, 4], vals.clone()).unwrap()).unwrap();
        let y = g.value(g.softmax(x, 1).unwrap());
        for r in 0..3 {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|p| *p >= 0.0));
        }
        let shifted = g.constant(Tensor::new(&[3, 4], vals.iter().map(|v| v + shift).collect()).unwrap()).unwrap();
        let ys = g.value(g.softmax(shifted, 1).unwrap());
        prop_assert!(y.max_abs_diff(&ys) < 1e-12);
    }

    #[test]
    fn layer_norm_zero_mean(vals in proptest::collection::vec(-100.0f64..100.0, 8)) {
        let g = Graph::standalone();
        let x = g.constant(Tensor::new(&[2, 4], vals).unwrap()).unwrap();
        let gain = g.constant(Tensor::full(&[4], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(&[4])).unwrap();
        let y = g.value(g.layer_norm(x, gain, bias, 1e-5).unwrap());
        for r in 0..2 {
            let m: f64 = y.row(r).iter().sum::<f64>() / 4.0;
            prop_assert!(m.abs() < 1e-9);
        }
    }
}
