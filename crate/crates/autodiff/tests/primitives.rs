use omninft_autodiff::finite_diff::{central_difference, max_relative_error, DEFAULT_STEP};
use omninft_autodiff::{AutodiffError, Graph, Tensor, Var};
use proptest::prelude::*;

const FLOOR: f64 = 1e-6;

/// Reduces an arbitrary-shaped output to a scalar with fixed, non-uniform weights
/// so every output coordinate influences the loss differently.
fn weighted_sum(g: &mut Graph, y: Var) -> Var {
    let t = g.value(y);
    let w: Vec<f64> = (0..t.numel())
        .map(|i| 0.3 + 0.17 * i as f64 - 0.01 * (i * i) as f64)
        .collect();
    let w = g.constant(Tensor::new(t.shape().to_vec(), w).unwrap());
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

/// Checks the analytic gradient of `build` w.r.t. its single parameter against central differences.
fn check_unary(shape: &[usize], x: &[f64], build: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let eval = |data: &[f64]| {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(shape.to_vec(), data.to_vec()).unwrap());
        let y = build(&mut g, p);
        let l = weighted_sum(&mut g, y);
        (g, p, l)
    };
    let (g, p, l) = eval(x);
    let analytic = g.backward(l).unwrap().get(p).unwrap().data().to_vec();
    let numeric = central_difference(
        |d| {
            let (g, _, l) = eval(d);
            g.value(l).item()
        },
        x,
        DEFAULT_STEP,
    );
    max_relative_error(&analytic, &numeric, FLOOR)
}

/// Same as [`check_unary`] for binary primitives; returns the worse of the two operands.
fn check_binary(
    sa: &[usize],
    sb: &[usize],
    a: &[f64],
    b: &[f64],
    build: impl Fn(&mut Graph, Var, Var) -> Var,
) -> f64 {
    let eval = |da: &[f64], db: &[f64]| {
        let mut g = Graph::new();
        let pa = g.param(Tensor::new(sa.to_vec(), da.to_vec()).unwrap());
        let pb = g.param(Tensor::new(sb.to_vec(), db.to_vec()).unwrap());
        let y = build(&mut g, pa, pb);
        let l = weighted_sum(&mut g, y);
        (g, pa, pb, l)
    };
    let (g, pa, pb, l) = eval(a, b);
    let grads = g.backward(l).unwrap();
    let na = central_difference(
        |d| {
            let (g, .., l) = eval(d, b);
            g.value(l).item()
        },
        a,
        DEFAULT_STEP,
    );
    let nb = central_difference(
        |d| {
            let (g, .., l) = eval(a, d);
            g.value(l).item()
        },
        b,
        DEFAULT_STEP,
    );
    max_relative_error(grads.get(pa).unwrap().data(), &na, FLOOR).max(max_relative_error(
        grads.get(pb).unwrap().data(),
        &nb,
        FLOOR,
    ))
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn row_variance_ok(x: &[f64], d: usize) -> bool {
    x.chunks(d).all(|r| {
        let m = r.iter().sum::<f64>() / d as f64;
        r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64 > 0.05
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_primitives_match_finite_differences(a in vals(6), b in vals(6)) {
        let s = [2, 3];
        prop_assert!(check_binary(&s, &s, &a, &b, |g, x, y| g.add(x, y).unwrap()) <= 1e-5);
        prop_assert!(check_binary(&s, &s, &a, &b, |g, x, y| g.sub(x, y).unwrap()) <= 1e-5);
        prop_assert!(check_binary(&s, &s, &a, &b, |g, x, y| g.mul(x, y).unwrap()) <= 1e-5);
        prop_assert!(check_unary(&s, &a, |g, x| g.scale(x, -1.7)) <= 1e-5);
        prop_assert!(check_unary(&s, &a, |g, x| g.silu(x)) <= 1e-5);
    }

    #[test]
    fn broadcast_and_matmul_primitives_match_finite_differences(
        a in vals(6), b in vals(3), m in vals(12)
    ) {
        prop_assert!(check_binary(&[2, 3], &[3], &a, &b, |g, x, y| g.add_row(x, y).unwrap()) <= 1e-5);
        prop_assert!(check_binary(&[2, 3], &[3], &a, &b, |g, x, y| g.mul_row(x, y).unwrap()) <= 1e-5);
        prop_assert!(check_binary(&[2, 3], &[3, 4], &a, &m, |g, x, y| g.matmul(x, y).unwrap()) <= 1e-5);
        prop_assert!(check_binary(&[2, 3], &[4, 3], &a, &m, |g, x, y| g.matmul_nt(x, y).unwrap()) <= 1e-5);
        prop_assert!(check_unary(&[2, 3], &a, |g, x| g.transpose(x).unwrap()) <= 1e-5);
    }

    #[test]
    fn normalizing_primitives_match_finite_differences(a in vals(8)) {
        prop_assert!(check_unary(&[2, 4], &a, |g, x| g.softmax(x).unwrap()) <= 1e-5);
        prop_assume!(row_variance_ok(&a, 4));
        prop_assert!(check_unary(&[2, 4], &a, |g, x| g.layer_norm(x).unwrap()) <= 1e-5);
    }

    #[test]
    fn reductions_match_finite_differences(a in vals(6), b in vals(6)) {
        prop_assert!(check_unary(&[2, 3], &a, |g, x| g.sum(x)) <= 1e-5);
        prop_assert!(check_unary(&[2, 3], &a, |g, x| g.mean(x).unwrap()) <= 1e-5);
        prop_assert!(check_unary(&[2, 3], &a, |g, x| g.sum_last(x)) <= 1e-5);
        prop_assert!(check_binary(&[2, 3], &[2, 3], &a, &b, |g, x, y| g.sq_err(x, y).unwrap()) <= 1e-5);
    }

    #[test]
    fn structural_primitives_match_finite_differences(a in vals(6), b in vals(4), table in vals(12)) {
        prop_assert!(check_binary(&[2, 3], &[2, 2], &a, &b, |g, x, y| g.concat(&[x, y, x], 1).unwrap()) <= 1e-5);
        prop_assert!(check_binary(&[2, 3], &[2, 3], &a, &a, |g, x, y| g.concat(&[y, x], 0).unwrap()) <= 1e-5);
        prop_assert!(check_unary(&[2, 3], &a, |g, x| g.slice(x, 1, 1, 2).unwrap()) <= 1e-5);
        prop_assert!(check_unary(&[2, 3], &a, |g, x| g.slice(x, 0, 1, 1).unwrap()) <= 1e-5);
        prop_assert!(check_unary(&[4, 3], &table, |g, x| g.embedding(x, &[2, 0, 2]).unwrap()) <= 1e-5);
    }

    #[test]
    fn partial_detach_forward_is_bit_exact(a in vals(6), alpha in 0.0f64..=1.0) {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], a).unwrap());
        let y = g.partial_detach(x, alpha).unwrap();
        prop_assert!(g.value(x).bit_eq(g.value(y)));
    }

    #[test]
    fn partial_detach_gradient_is_linear_in_keep(a in vals(6), alpha in 0.0f64..=1.0) {
        let grad = |alpha: f64| {
            let mut g = Graph::new();
            let x = g.param(Tensor::new(vec![2, 3], a.clone()).unwrap());
            let y = g.partial_detach(x, alpha).unwrap();
            let z = g.softmax(y).unwrap();
            let l = weighted_sum(&mut g, z);
            g.backward(l).unwrap().get(x).unwrap().data().to_vec()
        };
        let base = grad(0.0);
        let scaled = grad(alpha);
        for (s, b) in scaled.iter().zip(&base) {
            let expect = (1.0 - alpha) * b;
            prop_assert!((s - expect).abs() <= 1e-12 * expect.abs().max(1e-300));
        }
    }
}

#[test]
fn matmul_by_identity() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let i = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let y = g.matmul(a, i).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_survives_large_logits() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1000.0, 1000.0, 0.0]));
    let y = g.softmax(x).unwrap();
    let v = g.value(y).data();
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v[0] - 0.5).abs() < 1e-12);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::matrix(&[&[3.0, 3.0, 3.0, 3.0]]).unwrap());
    let y = g.layer_norm(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);
    let l = weighted_sum(&mut g, y);
    let grad = g.backward(l).unwrap();
    assert!(grad.get(x).unwrap().all_finite());
}

#[test]
fn square_derivative() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn softmax_component_gradient_matches_finite_difference() {
    let f = |x: &[f64]| {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(x.to_vec()));
        let s = g.softmax(p).unwrap();
        let first = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let picked = g.mul(s, first).unwrap();
        let l = g.sum(picked);
        (g, p, l)
    };
    let (g, p, l) = f(&[1.0, 2.0]);
    let analytic = g.backward(l).unwrap().get(p).unwrap().data().to_vec();
    let numeric = central_difference(
        |x| {
            let (g, _, l) = f(x);
            g.value(l).item()
        },
        &[1.0, 2.0],
        1e-5,
    );
    assert!(max_relative_error(&analytic, &numeric, 0.0) <= 1e-6);
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut g = Graph::new();
    let p = g.param(Tensor::vector(vec![1.0, -2.0]));
    let c = g.constant(Tensor::scalar(4.0));
    let l = g.scale(c, 2.0);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let p = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(
        g.backward(p).unwrap_err(),
        AutodiffError::NonScalarLoss(vec![2])
    );
}

#[test]
fn shape_mismatch_names_primitive_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"),
        "{msg}"
    );
    assert!(matches!(
        g.add(a, b),
        Err(AutodiffError::Shape { op: "add", .. })
    ));
}

#[test]
fn stop_gradient_blocks_only_its_edge() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.5, -0.5]));
    let y = g.param(Tensor::vector(vec![2.0, 4.0]));
    let sx = g.stop_gradient(x);
    assert!(g.value(sx).bit_eq(g.value(x)));
    let p = g.mul(sx, y).unwrap();
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(grads.get(y).unwrap().data(), &[1.5, -0.5]);
}

#[test]
fn partial_detach_endpoints_and_default_ratio() {
    let grad_at = |alpha: f64| {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.7, -1.3, 2.0]));
        let y = g.partial_detach(x, alpha).unwrap();
        let sq = g.mul(y, y).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap().get(x).unwrap().data().to_vec()
    };
    let full = grad_at(0.0);
    assert_eq!(full, vec![1.4, -2.6, 4.0]);
    assert_eq!(grad_at(1.0), vec![0.0, 0.0, 0.0]);
    for (s, f) in grad_at(0.1).iter().zip(&full) {
        assert!((s - 0.9 * f).abs() <= 1e-12 * f.abs());
    }
}

#[test]
fn partial_detach_rejects_ratio_outside_unit_interval() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(1.0));
    assert_eq!(
        g.partial_detach(x, 1.5).unwrap_err(),
        AutodiffError::InvalidRatio(1.5)
    );
    assert!(g.partial_detach(x, -0.01).is_err());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let build = || {
        let mut g = Graph::new();
        let w = g.param(
            Tensor::new(
                vec![3, 3],
                (0..9).map(|i| (i as f64 * 0.37).sin()).collect(),
            )
            .unwrap(),
        );
        let x = g.constant(
            Tensor::new(vec![2, 3], (0..6).map(|i| (i as f64 * 1.1).cos()).collect()).unwrap(),
        );
        let h = g.matmul(x, w).unwrap();
        let n = g.layer_norm(h).unwrap();
        let s = g.softmax(n).unwrap();
        let r = g.matmul(s, w).unwrap();
        let l = g.sq_err(r, x).unwrap();
        g.backward(l).unwrap().into_tensors()
    };
    let (a, b) = (build(), build());
    assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
}

#[test]
fn tensor_rejects_inconsistent_data_length() {
    assert!(matches!(
        Tensor::new(vec![2, 2], vec![1.0; 3]),
        Err(AutodiffError::DataLength { .. })
    ));
}
