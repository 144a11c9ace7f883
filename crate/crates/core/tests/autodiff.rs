//! Tape, primitive, and gradient-checker tests: analytic cases, independent
//! oracles, and finite-difference property tests over every primitive.

mod common;

use common::{assert_close, assert_slices_close, oracle_softmax, random_vec, rng};
use prophet_lab::autodiff::{eval_primitive, grad_check, rel_err, Primitive, Tape, Tensor};
use prophet_lab::Error;
use proptest::prelude::*;

// ── row-softmax ─────────────────────────────────────────────────────

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let t = Tape::new();
    let out = t.row_softmax(&Tensor::vector(vec![0.0, 0.0])).unwrap();
    assert_eq!(out.data(), &[0.5, 0.5]);
}

#[test]
fn softmax_is_shift_invariant() {
    let t = Tape::new();
    let base = vec![0.3, -1.2, 2.5];
    let shifted: Vec<f64> = base.iter().map(|v| v + 100.0).collect();
    let a = t.row_softmax(&Tensor::vector(base)).unwrap();
    let b = t.row_softmax(&Tensor::vector(shifted)).unwrap();
    assert_slices_close(a.data(), b.data(), 1e-12, "shifted softmax");
}

#[test]
fn softmax_rows_handled_independently() {
    let t = Tape::new();
    let m = Tensor::matrix(&[vec![0.0, 0.0, 0.0], vec![5.0, 1.0, -2.0]]);
    let out = t.row_softmax(&m).unwrap();
    assert_slices_close(&out.data()[..3], &[1.0 / 3.0; 3], 1e-12, "uniform row");
    let expected = oracle_softmax(&[5.0, 1.0, -2.0]);
    assert_slices_close(&out.data()[3..], &expected, 1e-12, "second row");
}

// ── distances ───────────────────────────────────────────────────────

#[test]
fn l1_distance_of_opposed_one_hots_is_two() {
    let t = Tape::new();
    let a = Tensor::vector(vec![1.0, 0.0]);
    let b = Tensor::vector(vec![0.0, 1.0]);
    assert_eq!(t.l1_distance(&a, &b).unwrap().item(), 2.0);
}

#[test]
fn l2_squared_distance_analytic() {
    let t = Tape::new();
    let a = Tensor::vector(vec![3.0, 0.0]);
    let b = Tensor::vector(vec![0.0, 4.0]);
    assert_eq!(t.l2_squared_distance(&a, &b).unwrap().item(), 25.0);
}

#[test]
fn kl_zero_in_second_argument_is_an_error() {
    let t = Tape::new();
    let p = Tensor::vector(vec![0.5, 0.5]);
    let q = Tensor::vector(vec![1.0, 0.0]);
    match t.kl_divergence(&p, &q) {
        Err(Error::KlZeroEntry { index: 1 }) => {}
        other => panic!("expected KlZeroEntry at index 1, got {other:?}"),
    }
}

#[test]
fn kl_of_identical_distributions_is_zero() {
    let t = Tape::new();
    let p = Tensor::vector(vec![0.2, 0.3, 0.5]);
    assert_eq!(t.kl_divergence(&p, &p).unwrap().item(), 0.0);
}

#[test]
fn kl_zero_p_entry_contributes_zero() {
    let t = Tape::new();
    let p = Tensor::vector(vec![0.0, 1.0]);
    let q = Tensor::vector(vec![0.5, 0.5]);
    let expected = 1.0 * (1.0_f64 / 0.5).ln();
    assert_close(
        t.kl_divergence(&p, &q).unwrap().item(),
        expected,
        1e-15,
        "kl with zero p entry",
    );
}

// ── matmul ──────────────────────────────────────────────────────────

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(11);
    let a = Tensor::new(vec![3, 4], random_vec(&mut r, 12));
    let b = Tensor::new(vec![4, 2], random_vec(&mut r, 8));
    let t = Tape::new();
    let out = t.matmul(&a, &b).unwrap();
    assert_eq!(out.shape(), &[3, 2]);
    for i in 0..3 {
        for j in 0..2 {
            let mut acc = 0.0;
            for l in 0..4 {
                acc += a.at(i, l) * b.at(l, j);
            }
            assert_close(out.at(i, j), acc, 1e-12, "matmul entry");
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let t = Tape::new();
    let a = Tensor::zeros(vec![3, 4]);
    let b = Tensor::zeros(vec![5, 2]);
    let err = t.matmul(&a, &b).unwrap_err().to_string();
    assert!(err.contains("matmul"), "missing op name: {err}");
    assert!(err.contains("[3, 4]") && err.contains("[5, 2]"), "missing shapes: {err}");
}

#[test]
fn vector_dot_product_is_scalar() {
    let t = Tape::new();
    let a = Tensor::vector(vec![1.0, 2.0, 3.0]);
    let b = Tensor::vector(vec![4.0, 5.0, 6.0]);
    assert_eq!(t.matmul(&a, &b).unwrap().item(), 32.0);
}

// ── backward ────────────────────────────────────────────────────────

#[test]
fn gradient_of_sum_of_squares() {
    let tape = Tape::new();
    let w = tape.watch(&Tensor::vector(vec![1.0, 2.0]));
    let root = tape.matmul(&w, &w).unwrap();
    let grads = tape.backward(&root).unwrap();
    assert_eq!(grads.wrt(&w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn l1_subgradient_at_zero_difference_is_zero() {
    let tape = Tape::new();
    let a = tape.watch(&Tensor::vector(vec![0.4, -0.7]));
    let root = tape.l1_distance(&a, &a.detached()).unwrap();
    let grads = tape.backward(&root).unwrap();
    assert_eq!(grads.wrt(&a).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn two_layer_tanh_network_matches_finite_differences() {
    // Scalar net: w -> u . tanh(M tanh(w)) with fixed M, u.
    let mut r = rng(5);
    let m = Tensor::new(vec![3, 3], random_vec(&mut r, 9));
    let u = Tensor::vector(random_vec(&mut r, 3));
    let point = Tensor::vector(random_vec(&mut r, 3));
    let report = grad_check(
        |t, w| {
            let h1 = t.tanh(w)?;
            let h2 = t.tanh(&t.matmul(&m, &h1)?)?;
            t.matmul(&u, &h2)
        },
        &point,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.pass, "max rel err {}", report.max_rel_err);
}

#[test]
fn unreachable_nodes_have_exactly_zero_gradient() {
    let tape = Tape::new();
    let used = tape.watch(&Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.watch(&Tensor::vector(vec![3.0, 4.0]));
    let root = tape.matmul(&used, &used).unwrap();
    let grads = tape.backward(&root).unwrap();
    assert_eq!(grads.wrt(&unused).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let tape = Tape::new();
    let w = tape.watch(&Tensor::vector(vec![1.0, 2.0]));
    let root = tape.tanh(&w).unwrap();
    assert!(matches!(
        tape.backward(&root),
        Err(Error::NonScalarRoot { .. })
    ));
}

#[test]
fn gradients_accumulate_over_reused_inputs() {
    // root = w . w + w . w  =>  grad = 4w.
    let tape = Tape::new();
    let w = tape.watch(&Tensor::vector(vec![1.5, -2.0]));
    let dot = tape.matmul(&w, &w).unwrap();
    let root = tape.add(&dot, &dot).unwrap();
    let grads = tape.backward(&root).unwrap();
    assert_eq!(grads.wrt(&w).unwrap().data(), &[6.0, -8.0]);
}

// ── grad_check ──────────────────────────────────────────────────────

#[test]
fn grad_check_square_function() {
    let report = grad_check(
        |t, w| t.mul(w, w),
        &Tensor::scalar(3.0),
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(report.pass, "max rel err {}", report.max_rel_err);
    assert!(report.max_rel_err < 1e-8);
}

#[test]
fn grad_check_constant_function() {
    let report = grad_check(
        |t, w| {
            let zero = t.scale(w, 0.0)?;
            t.matmul(&zero, &zero)
        },
        &Tensor::vector(vec![1.0, -2.0]),
        1e-5,
        1e-10,
    )
    .unwrap();
    assert!(report.pass);
    assert_eq!(report.max_rel_err, 0.0);
}

#[test]
fn rel_err_uses_unit_floor() {
    assert_eq!(rel_err(0.0, 0.0), 0.0);
    assert_close(rel_err(1e-9, 0.0), 1e-9, 1e-24, "near-zero absolute compare");
    assert_close(rel_err(200.0, 100.0), 0.5, 1e-15, "large values relative");
}

// ── determinism ─────────────────────────────────────────────────────

#[test]
fn forward_evaluation_is_bitwise_deterministic() {
    let mut r = rng(17);
    let a = Tensor::new(vec![3, 3], random_vec(&mut r, 9));
    let v = Tensor::vector(random_vec(&mut r, 3));
    let run = || {
        let t = Tape::new();
        let h = t.tanh(&t.matmul(&a, &v).unwrap()).unwrap();
        let s = t.row_softmax(&h).unwrap();
        s.data().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn eval_primitive_matches_tape_apply() {
    let mut r = rng(23);
    let a = Tensor::new(vec![2, 3], random_vec(&mut r, 6));
    let v = Tensor::vector(random_vec(&mut r, 3));
    let pure = eval_primitive(Primitive::MatMul, &[&a, &v]).unwrap();
    let t = Tape::new();
    let taped = t.matmul(&a, &v).unwrap();
    assert_eq!(pure.data(), taped.data());
}

// ── property tests ──────────────────────────────────────────────────

/// Scalarize a vector output by dotting with fixed weights so grad_check can
/// drive any primitive with non-scalar output.
fn dot_with(t: &Tape, v: &Tensor, weights: &[f64]) -> prophet_lab::Result<Tensor> {
    t.matmul(v, &Tensor::vector(weights.to_vec()))
}

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

/// Entries bounded away from each other so L1 stays differentiable and away
/// from zero so KL stays defined under the finite-difference step.
fn positive_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05..2.0f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn prop_softmax_rows_on_simplex(rows in prop::collection::vec(finite_vec(4), 1..4)) {
        let t = Tape::new();
        let m = Tensor::matrix(&rows);
        let out = t.row_softmax(&m).unwrap();
        for r in 0..rows.len() {
            let row = &out.data()[r * 4..(r + 1) * 4];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9, "row sum {sum}");
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn prop_matmul_grads(a in finite_vec(6), b in finite_vec(24), v in finite_vec(6), w in finite_vec(4)) {
        // vec-mat then dot: f(x) = (x^T B) . w, gradient w.r.t. x.
        let bt = Tensor::new(vec![6, 4], b.clone());
        let vec_side = grad_check(
            |t, x| dot_with(t, &t.matmul(x, &bt)?, &w),
            &Tensor::vector(a.clone()),
            1e-5,
            1e-4,
        ).unwrap();
        prop_assert!(vec_side.pass, "matmul vec-side rel err {}", vec_side.max_rel_err);

        // mat-vec then dot: f(X) = (X v) . w over a 2x3 matrix, gradient w.r.t. X.
        let vt = Tensor::vector(v[..3].to_vec());
        let mat_side = grad_check(
            |t, x| dot_with(t, &t.matmul(x, &vt)?, &w[..2]),
            &Tensor::new(vec![2, 3], a),
            1e-5,
            1e-4,
        ).unwrap();
        prop_assert!(mat_side.pass, "matmul mat-side rel err {}", mat_side.max_rel_err);
    }

    #[test]
    fn prop_add_and_mul_grads(a in finite_vec(5), b in finite_vec(5), w in finite_vec(5)) {
        let bt = Tensor::vector(b);
        let add = grad_check(
            |t, x| dot_with(t, &t.add(x, &bt)?, &w),
            &Tensor::vector(a.clone()), 1e-5, 1e-4,
        ).unwrap();
        prop_assert!(add.pass, "add grad rel err {}", add.max_rel_err);
        let mul = grad_check(
            |t, x| dot_with(t, &t.mul(x, &bt)?, &w),
            &Tensor::vector(a), 1e-5, 1e-4,
        ).unwrap();
        prop_assert!(mul.pass, "mul grad rel err {}", mul.max_rel_err);
    }

    #[test]
    fn prop_nonlinearity_grads(a in finite_vec(5), w in finite_vec(5)) {
        let tanh = grad_check(
            |t, x| dot_with(t, &t.tanh(x)?, &w),
            &Tensor::vector(a.clone()), 1e-5, 1e-4,
        ).unwrap();
        prop_assert!(tanh.pass, "tanh grad rel err {}", tanh.max_rel_err);
        let sig = grad_check(
            |t, x| dot_with(t, &t.sigmoid(x)?, &w),
            &Tensor::vector(a), 1e-5, 1e-4,
        ).unwrap();
        prop_assert!(sig.pass, "sigmoid grad rel err {}", sig.max_rel_err);
    }

    #[test]
    fn prop_softmax_and_pick_grads(a in finite_vec(5), w in finite_vec(5), idx in 0usize..5) {
        let sm = grad_check(
            |t, x| dot_with(t, &t.row_softmax(x)?, &w),
            &Tensor::vector(a.clone()), 1e-5, 1e-4,
        ).unwrap();
        prop_assert!(sm.pass, "softmax grad rel err {}", sm.max_rel_err);
        let pick = grad_check(
            |t, x| t.pick_log_prob(x, idx),
            &Tensor::vector(a), 1e-5, 1e-4,
        ).unwrap();
        prop_assert!(pick.pass, "pick-log-prob grad rel err {}", pick.max_rel_err);
    }

    #[test]
    fn prop_concat_grads(a in finite_vec(3), b in finite_vec(4), w in finite_vec(7)) {
        let bt = Tensor::vector(b);
        let left = grad_check(
            |t, x| dot_with(t, &t.concat(x, &bt)?, &w),
            &Tensor::vector(a.clone()), 1e-5, 1e-4,
        ).unwrap();
        prop_assert!(left.pass, "concat-left grad rel err {}", left.max_rel_err);
        let at = Tensor::vector(a);
        let right = grad_check(
            |t, x| dot_with(t, &t.concat(&at, x)?, &w),
            &bt, 1e-5, 1e-4,
        ).unwrap();
        prop_assert!(right.pass, "concat-right grad rel err {}", right.max_rel_err);
    }

    #[test]
    fn prop_broadcast_and_mean_grads(m in finite_vec(12), v in finite_vec(3), w in finite_vec(4)) {
        // f = mean-over-rows(mat (+) v) . w, checked against each input.
        let mt = Tensor::new(vec![3, 4], m);
        let vt = Tensor::vector(v.clone());
        let vec_side = grad_check(
            |t, x| dot_with(t, &t.mean_over_rows(&t.add_broadcast_column(&mt, x)?)?, &w),
            &vt, 1e-5, 1e-4,
        ).unwrap();
        prop_assert!(vec_side.pass, "broadcast-vec grad rel err {}", vec_side.max_rel_err);

        let mat_side = grad_check(
            |t, x| dot_with(t, &t.mean_over_rows(&t.add_broadcast_column(x, &vt)?)?, &w),
            &mt, 1e-5, 1e-4,
        ).unwrap();
        prop_assert!(mat_side.pass, "broadcast-mat grad rel err {}", mat_side.max_rel_err);
    }

    #[test]
    fn prop_distance_grads(a in positive_vec(4), b in positive_vec(4)) {
        // Keep L1 away from its kink: skip coordinates that nearly touch.
        prop_assume!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() > 1e-3));
        let bt = Tensor::vector(b.clone());
        let l1 = grad_check(
            |t, x| t.l1_distance(x, &bt),
            &Tensor::vector(a.clone()), 1e-5, 1e-4,
        ).unwrap();
        prop_assert!(l1.pass, "l1 grad rel err {}", l1.max_rel_err);
        let l2 = grad_check(
            |t, x| t.l2_squared_distance(x, &bt),
            &Tensor::vector(a.clone()), 1e-5, 1e-4,
        ).unwrap();
        prop_assert!(l2.pass, "l2 grad rel err {}", l2.max_rel_err);
        let kl_p = grad_check(
            |t, x| t.kl_divergence(x, &bt),
            &Tensor::vector(a.clone()), 1e-6, 1e-4,
        ).unwrap();
        prop_assert!(kl_p.pass, "kl p-side grad rel err {}", kl_p.max_rel_err);
        let at = Tensor::vector(a);
        let kl_q = grad_check(
            |t, x| t.kl_divergence(&at, x),
            &Tensor::vector(b), 1e-6, 1e-4,
        ).unwrap();
        prop_assert!(kl_q.pass, "kl q-side grad rel err {}", kl_q.max_rel_err);
    }

    #[test]
    fn prop_tape_forward_deterministic(a in finite_vec(9), v in finite_vec(3)) {
        let run = || {
            let t = Tape::new();
            let m = Tensor::new(vec![3, 3], a.clone());
            let h = t.sigmoid(&t.matmul(&m, &Tensor::vector(v.clone())).unwrap()).unwrap();
            t.row_softmax(&h).unwrap().data().to_vec()
        };
        prop_assert_eq!(run(), run());
    }
}
