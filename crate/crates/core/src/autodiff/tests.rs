use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn mask(shape: &[usize], bits: &[bool]) -> Mask {
    Mask::new(shape.to_vec(), bits.to_vec()).unwrap()
}

const H: f64 = 1e-5;

fn assert_grad_ok<F>(f: F, params: &[Tensor], tol: f64)
where
    F: FnMut(&mut Graph, &[Var]) -> crate::Result<Var>,
{
    let report = check_gradients(f, params, H, Coordinates::All).unwrap();
    assert!(
        report.max_rel_error < tol,
        "max rel err {} (per tensor {:?})",
        report.max_rel_error,
        report.per_tensor
    );
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::eye(2));
    let b = g.constant(Tensor::eye(2));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &Tensor::eye(2));
}

#[test]
fn matmul_by_hand() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 1]);
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let params = [random(&[3, 4], 1), random(&[4, 2], 2)];
    assert_grad_ok(
        |g, p| {
            let c = g.matmul(p[0], p[1])?;
            let w = g.constant(random(&[3, 2], 3));
            let cw = g.mul(c, w)?;
            g.sum_all(cw)
        },
        &params,
        1e-6,
    );
}

#[test]
fn batch_matmul_gradients() {
    for transpose_b in [false, true] {
        let b_shape = if transpose_b { [2, 5, 4] } else { [2, 4, 5] };
        let params = [random(&[2, 3, 4], 4), random(&b_shape, 5)];
        assert_grad_ok(
            |g, p| {
                let c = g.batch_matmul(p[0], p[1], transpose_b)?;
                let w = g.constant(random(&[2, 3, 5], 6));
                let cw = g.mul(c, w)?;
                g.sum_all(cw)
            },
            &params,
            1e-6,
        );
    }
}

#[test]
fn batch_matmul_transposed_equals_explicit() {
    let a = random(&[1, 2, 3], 7);
    let b = random(&[1, 4, 3], 8);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.batch_matmul(va, vb, true).unwrap();
    for i in 0..2 {
        for j in 0..4 {
            let expect: f64 = (0..3).map(|l| a.get(&[0, i, l]) * b.get(&[0, j, l])).sum();
            assert!((g.value(c).get(&[0, i, j]) - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax_rows(x, None, EmptyRows::Error).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
    let m = mask(&[3], &[true, true, false]);
    let y = g.softmax_rows(x, Some(&m), EmptyRows::Error).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.0]);

    let x = g.constant(Tensor::vector(vec![1000.0, 1001.0]));
    let y = g.softmax_rows(x, None, EmptyRows::Error).unwrap();
    let expect = 1.0 / (1.0 + std::f64::consts::E);
    assert!(g.value(y).is_finite());
    assert!((g.value(y).data()[0] - expect).abs() < 1e-12);
    assert!((g.value(y).data()[0] - 0.2689).abs() < 1e-4);
    assert!((g.value(y).data()[1] - 0.7311).abs() < 1e-4);
}

#[test]
fn softmax_fully_masked_row() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    let m = mask(&[2, 2], &[true, false, false, false]);
    let err = g.softmax_rows(x, Some(&m), EmptyRows::Error).unwrap_err();
    assert!(matches!(err, Error::DegenerateMask(_)));
    let y = g.softmax_rows(x, Some(&m), EmptyRows::Zero).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn softmax_gradient_with_mask() {
    let m = mask(&[2, 3], &[true, false, true, true, true, true]);
    assert_grad_ok(
        |g, p| {
            let y = g.softmax_rows(p[0], Some(&m), EmptyRows::Error)?;
            let w = g.constant(random(&[2, 3], 10));
            let yw = g.mul(y, w)?;
            g.sum_all(yw)
        },
        &[random(&[2, 3], 9)],
        1e-4,
    );
}

#[test]
fn sigmoid_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![0.0, 1e4, -1e4]));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).data()[0], 0.5);
    assert_eq!(g.value(y).data()[1], 1.0);
    assert!(g.value(y).is_finite());
    let y0 = g.slice_last(y, 0, 1).unwrap();
    let loss = g.sum_all(y0).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).data()[0], 0.25);
}

#[test]
fn reductions_and_concat() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![2.0, 4.0]));
    let m = g.mean_axis(x, 0, None, EmptyRows::Error).unwrap();
    assert_eq!(g.value(m).item(), 3.0);

    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
    let c = g.concat(&[a, b], 0).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 2]);
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let x = g.constant(Tensor::vector(vec![5.0, 99.0]));
    let pad = mask(&[2], &[true, false]);
    let m = g.mean_axis(x, 0, Some(&pad), EmptyRows::Error).unwrap();
    assert_eq!(g.value(m).item(), 5.0);

    let none = mask(&[2], &[false, false]);
    let err = g.mean_axis(x, 0, Some(&none), EmptyRows::Error).unwrap_err();
    assert!(matches!(err, Error::DegenerateMask(_)));
}

#[test]
fn concat_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[1, 2]));
    let b = g.constant(Tensor::zeros(&[1, 3]));
    assert!(g.concat(&[a, b], 0).is_err());
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[1, 5]);
}

#[test]
fn gradcheck_square() {
    let report = check_gradients(
        |g, p| g.mul(p[0], p[0]),
        &[Tensor::scalar(3.0)],
        H,
        Coordinates::All,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-9);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    assert_eq!(g.backward(y).unwrap().wrt(x).item(), 6.0);
}

#[test]
fn gradcheck_linear_is_exact() {
    let coef = random(&[5], 11);
    let report = check_gradients(
        |g, p| {
            let c = g.constant(coef.clone());
            let y = g.mul(p[0], c)?;
            g.sum_all(y)
        },
        &[random(&[5], 12)],
        H,
        Coordinates::All,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-10, "{}", report.max_rel_error);
}

#[test]
fn gradcheck_rejects_non_finite_loss_and_bad_step() {
    let err = check_gradients(
        |g, p| {
            let y = g.affine(p[0], 1e308, 0.0);
            let y = g.affine(y, 1e308, 0.0);
            g.sum_all(y)
        },
        &[Tensor::scalar(1.0)],
        H,
        Coordinates::All,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert!(check_gradients(|g, p| g.sum_all(p[0]), &[Tensor::scalar(1.0)], 0.0, Coordinates::All).is_err());
}

#[test]
fn elementwise_gradients() {
    let x = Tensor::vector(vec![0.3, 1.2, -0.7, 2.5]);
    let y = Tensor::vector(vec![-1.1, 0.4, 0.9, 0.2]);
    assert_grad_ok(
        |g, p| {
            let s = g.sigmoid(p[0]);
            let r = g.relu(p[1]);
            let e = g.exp(p[1]);
            let m = g.mul(s, e)?;
            let a = g.add(m, r)?;
            let a = g.affine(a, 0.5, 2.0);
            let l = g.ln(a)?;
            let c = g.clamp(p[0], -1.0, 1.0);
            let t = g.add(l, c)?;
            g.sum_all(t)
        },
        &[x, y],
        1e-4,
    );
}

#[test]
fn ln_rejects_non_positive() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(g.ln(x), Err(Error::NonFinite(_))));
}

#[test]
fn layer_norm_bias_scale_rows_gradients() {
    let w = random(&[3, 2, 4], 20);
    assert_grad_ok(
        |g, p| {
            let x = g.add_bias(p[0], p[3])?;
            let y = g.layer_norm(x, p[1], p[2], 1e-5)?;
            let y = g.scale_rows(y, p[4])?;
            let c = g.constant(w.clone());
            let yw = g.mul(y, c)?;
            g.sum_all(yw)
        },
        &[
            random(&[3, 2, 4], 21),
            random(&[4], 22),
            random(&[4], 23),
            random(&[4], 24),
            random(&[3, 2], 25),
        ],
        1e-4,
    );
}

#[test]
fn reduce_concat_slice_reshape_gradients() {
    let m = mask(&[2, 4], &[true, false, true, true, false, true, true, false]);
    assert_grad_ok(
        |g, p| {
            let c = g.concat(&[p[0], p[1]], 1)?;
            let s = g.slice_last(c, 1, 3)?;
            let mean = g.mean_axis(s, 1, Some(&m), EmptyRows::Error)?;
            let sum = g.sum_axis(s, 1, None)?;
            let both = g.mul(mean, sum)?;
            let r = g.reshape(both, vec![6])?;
            let w = g.constant(random(&[6], 30));
            let rw = g.mul(r, w)?;
            g.sum_all(rw)
        },
        &[random(&[2, 3, 4], 31), random(&[2, 1, 4], 32)],
        1e-4,
    );
}

#[test]
fn cosine_and_logsumexp_gradients() {
    let m = mask(&[2, 3, 3], &[
        false, true, true, true, false, true, true, true, false,
        false, true, true, true, false, true, true, true, false,
    ]);
    assert_grad_ok(
        |g, p| {
            let s = g.cosine_pairwise(p[0])?;
            let l = g.logsumexp(s, Some(&m))?;
            let w = g.constant(random(&[2, 3], 40));
            let lw = g.mul(l, w)?;
            g.sum_all(lw)
        },
        &[random(&[2, 3, 5], 41)],
        1e-4,
    );
}

#[test]
fn cosine_zero_vector_gives_zero_similarity() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap());
    let s = g.cosine_pairwise(x).unwrap();
    assert_eq!(&g.value(s).data()[..3], &[0.0, 0.0, 0.0]);
    assert!((g.value(s).data()[3] - 1.0).abs() < 1e-15);
    let loss = g.sum_all(s).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(x).is_finite());
    assert_eq!(&grads.wrt(x).data()[..2], &[0.0, 0.0]);
}

#[test]
fn disconnected_leaf_has_zero_gradient() {
    let mut g = Graph::new();
    let used = g.leaf(random(&[2, 2], 50));
    let unused = g.leaf(random(&[3], 51));
    let _side = g.sigmoid(unused);
    let loss = g.sum_all(used).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(unused), Tensor::zeros(&[3]));
    assert_eq!(grads.wrt(used), Tensor::full(&[2, 2], 1.0));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn forward_is_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let a = g.leaf(random(&[4, 8], 60));
        let b = g.leaf(random(&[8, 8], 61));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax_rows(c, None, EmptyRows::Error).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn softmax_rows_are_convex(
        vals in prop::collection::vec(-50.0f64..50.0, 12),
        bits in prop::collection::vec(any::<bool>(), 12),
    ) {
        let mut bits = bits;
        for r in 0..3 {
            bits[r * 4] = true;
        }
        let m = Mask::new(vec![3, 4], bits.clone()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = g.softmax_rows(x, Some(&m), EmptyRows::Error).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for (j, v) in row.iter().enumerate() {
                prop_assert!(*v >= 0.0);
                if !bits[r * 4 + j] {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }
}
