use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;

use super::{grad_check, Segments, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Independent triple-loop product used as the matmul oracle.
fn matmul_oracle(a: &[f64], n: usize, d: usize, b: &[f64], e: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * e];
    for i in 0..n {
        for j in 0..e {
            for k in 0..d {
                out[i * e + j] += a[i * d + k] * b[k * e + j];
            }
        }
    }
    out
}

/// Independent per-group per-channel loop used as the pooling oracle.
fn segment_max_oracle(x: &[f64], d: usize, group_of: &[usize], m: usize) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; m * d];
    for (row, &g) in group_of.iter().enumerate() {
        for c in 0..d {
            let v = x[row * d + c];
            if v > out[g * d + c] {
                out[g * d + c] = v;
            }
        }
    }
    out
}

#[test]
fn matmul_identity_left_factor() {
    let mut tape = Tape::new();
    let eye = Tensor::constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let w = Tensor::constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let out = tape.matmul(&eye, &w).unwrap();
    assert_eq!(out.values(), w.values());
}

#[test]
fn matmul_scalar_product() {
    let mut tape = Tape::new();
    let a = Tensor::constant(1, 1, vec![2.0]);
    let b = Tensor::constant(1, 1, vec![3.0]);
    assert_eq!(tape.matmul(&a, &b).unwrap().values(), vec![6.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut r = rng(7);
    let av = random_values(&mut r, 3 * 4);
    let bv = random_values(&mut r, 4 * 2);
    let expected = matmul_oracle(&av, 3, 4, &bv, 2);
    let mut tape = Tape::new();
    let out = tape
        .matmul(&Tensor::constant(3, 4, av), &Tensor::constant(4, 2, bv))
        .unwrap();
    for (got, want) in out.values().iter().zip(&expected) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = Tensor::zeros(2, 3);
    let b = Tensor::zeros(2, 3);
    let err = tape.matmul(&a, &b).unwrap_err();
    assert!(err.to_string().contains("2x3"), "{err}");
}

#[test]
fn matmul_backward_matches_finite_differences() {
    let mut r = rng(11);
    let a = Tensor::leaf(3, 4, random_values(&mut r, 12));
    let w = Tensor::leaf(4, 2, random_values(&mut r, 8));
    let weight = Tensor::constant(3, 2, random_values(&mut r, 6));
    let max_rel = grad_check(
        |tape| {
            let prod = tape.matmul(&a, &w)?;
            let weighted = tape.mul(&prod, &weight)?;
            tape.sum(&weighted)
        },
        &[&a, &w],
        1e-5,
    )
    .unwrap();
    assert!(max_rel < 1e-6, "max relative error {max_rel}");
}

#[test]
fn add_zeros_is_identity() {
    let mut r = rng(3);
    let xv = random_values(&mut r, 6);
    let mut tape = Tape::new();
    let x = Tensor::constant(2, 3, xv.clone());
    let out = tape.add(&x, &Tensor::zeros(2, 3)).unwrap();
    assert_eq!(out.values(), xv);
}

#[test]
fn mul_ones_is_identity() {
    let mut r = rng(4);
    let xv = random_values(&mut r, 6);
    let mut tape = Tape::new();
    let x = Tensor::constant(2, 3, xv.clone());
    let ones = Tensor::constant(2, 3, vec![1.0; 6]);
    assert_eq!(tape.mul(&x, &ones).unwrap().values(), xv);
}

#[test]
fn mul_backward_is_upstream_times_other_factor() {
    let mut r = rng(5);
    let a = Tensor::leaf(2, 3, random_values(&mut r, 6));
    let b = Tensor::leaf(2, 3, random_values(&mut r, 6));
    // Constant weights play the role of an arbitrary upstream gradient g.
    let g = Tensor::constant(2, 3, random_values(&mut r, 6));
    let max_rel = grad_check(
        |tape| {
            let prod = tape.mul(&a, &b)?;
            let weighted = tape.mul(&prod, &g)?;
            tape.sum(&weighted)
        },
        &[&a, &b],
        1e-5,
    )
    .unwrap();
    assert!(max_rel < 1e-6, "max relative error {max_rel}");
    // And the analytic rule itself: grad of a must be g * b.
    let bv = b.values();
    let gv = g.values();
    for (i, ga) in a.grad().unwrap().iter().enumerate() {
        assert!((ga - gv[i] * bv[i]).abs() < 1e-12);
    }
}

#[test]
fn concat_channels_by_definition() {
    let mut tape = Tape::new();
    let a = Tensor::constant(1, 2, vec![1.0, 2.0]);
    let b = Tensor::constant(1, 1, vec![3.0]);
    assert_eq!(tape.concat_cols(&a, &b).unwrap().values(), vec![1.0, 2.0, 3.0]);
}

#[test]
fn concat_with_zero_columns_is_identity() {
    let mut r = rng(6);
    let xv = random_values(&mut r, 6);
    let mut tape = Tape::new();
    let x = Tensor::constant(2, 3, xv.clone());
    let empty = Tensor::constant(2, 0, vec![]);
    let out = tape.concat_cols(&x, &empty).unwrap();
    assert_eq!(out.shape(), (2, 3));
    assert_eq!(out.values(), xv);
}

#[test]
fn concat_backward_splits_gradient() {
    let mut tape = Tape::new();
    let a = Tensor::leaf(2, 2, vec![1.0; 4]);
    let b = Tensor::leaf(2, 1, vec![1.0; 2]);
    let cat = tape.concat_cols(&a, &b).unwrap();
    let loss = tape.sum(&cat).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
    assert_eq!(b.grad().unwrap(), vec![1.0; 2]);
}

#[test]
fn concat_row_count_mismatch_errors() {
    let mut tape = Tape::new();
    let err = tape
        .concat_cols(&Tensor::zeros(2, 2), &Tensor::zeros(3, 1))
        .unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn segment_max_singleton_is_identity() {
    let mut tape = Tape::new();
    let x = Tensor::constant(1, 3, vec![0.5, -1.0, 2.0]);
    let out = tape.segment_max(&x, &Segments::single(1)).unwrap();
    assert_eq!(out.values(), x.values());
}

#[test]
fn segment_max_channel_wise() {
    let mut tape = Tape::new();
    let x = Tensor::constant(2, 2, vec![1.0, 5.0, 3.0, 2.0]);
    let out = tape.segment_max(&x, &Segments::single(2)).unwrap();
    assert_eq!(out.values(), vec![3.0, 5.0]);
}

#[test]
fn segment_max_matches_loop_oracle() {
    let mut r = rng(8);
    let xv = random_values(&mut r, 10 * 4);
    let group_of: Vec<usize> = (0..10).map(|_| r.gen_range(0..3)).collect();
    // Re-roll until all three groups are hit (fixed seed makes this stable).
    let group_of = if (0..3).all(|g| group_of.contains(&g)) {
        group_of
    } else {
        vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0]
    };
    let expected = segment_max_oracle(&xv, 4, &group_of, 3);
    let mut tape = Tape::new();
    let x = Tensor::constant(10, 4, xv);
    let seg = Segments::new(group_of, 3).unwrap();
    assert_eq!(tape.segment_max(&x, &seg).unwrap().values(), expected);
}

#[test]
fn segment_max_row_count_mismatch_errors() {
    let mut tape = Tape::new();
    let x = Tensor::zeros(4, 2);
    let seg = Segments::new(vec![0, 0, 1], 2).unwrap();
    let err = tape.segment_max(&x, &seg).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn segment_max_backward_routes_to_lowest_tied_row() {
    let mut tape = Tape::new();
    // Rows 0 and 2 tie on channel 0; the gradient must go to row 0 only.
    let x = Tensor::leaf(3, 1, vec![2.0, 1.0, 2.0]);
    let pooled = tape.segment_max(&x, &Segments::single(3)).unwrap();
    let loss = tape.sum(&pooled).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0]);
}

#[test]
fn segment_max_permutation_within_group_is_bitwise_invariant() {
    let mut r = rng(9);
    let xv = random_values(&mut r, 8 * 3);
    let group_of = vec![0, 0, 0, 0, 1, 1, 1, 1];
    let seg = Segments::new(group_of, 2).unwrap();
    let mut tape = Tape::new();
    let base = tape
        .segment_max(&Tensor::constant(8, 3, xv.clone()), &seg)
        .unwrap()
        .values();
    // Swap rows inside each group.
    let perm = [3usize, 1, 0, 2, 7, 5, 6, 4];
    let mut permuted = vec![0.0; xv.len()];
    for (to, &from) in perm.iter().enumerate() {
        permuted[to * 3..(to + 1) * 3].copy_from_slice(&xv[from * 3..(from + 1) * 3]);
    }
    let out = tape
        .segment_max(&Tensor::constant(8, 3, permuted), &seg)
        .unwrap()
        .values();
    assert!(base.iter().zip(&out).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn segment_max_singleton_groups_are_row_identity() {
    let mut r = rng(10);
    let xv = random_values(&mut r, 5 * 2);
    let mut tape = Tape::new();
    let out = tape
        .segment_max(&Tensor::constant(5, 2, xv.clone()), &Segments::singletons(5))
        .unwrap();
    assert_eq!(out.values(), xv);
}

#[test]
fn layer_norm_constant_row_collapses_to_bias() {
    let mut tape = Tape::new();
    let x = Tensor::constant(1, 3, vec![4.2; 3]);
    let gain = Tensor::constant(1, 3, vec![1.0; 3]);
    let bias = Tensor::constant(1, 3, vec![0.0; 3]);
    let out = tape.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
    assert!(out.values().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn layer_norm_preserves_zero_mean_unit_variance_row() {
    let mut tape = Tape::new();
    let x = Tensor::constant(1, 2, vec![-1.0, 1.0]);
    let gain = Tensor::constant(1, 2, vec![1.0; 2]);
    let bias = Tensor::constant(1, 2, vec![0.0; 2]);
    let out = tape.layer_norm(&x, &gain, &bias, 1e-12).unwrap();
    assert!((out.get(0, 0) + 1.0).abs() < 1e-9);
    assert!((out.get(0, 1) - 1.0).abs() < 1e-9);
}

#[test]
fn layer_norm_rejects_non_finite_input() {
    let mut tape = Tape::new();
    let x = Tensor::constant(1, 2, vec![f64::NAN, 1.0]);
    let gain = Tensor::constant(1, 2, vec![1.0; 2]);
    let bias = Tensor::constant(1, 2, vec![0.0; 2]);
    let err = tape.layer_norm(&x, &gain, &bias, 1e-5).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut r = rng(12);
    let x = Tensor::leaf(4, 8, random_values(&mut r, 32));
    let gain = Tensor::leaf(1, 8, (0..8).map(|_| r.gen_range(0.5..1.5)).collect());
    let bias = Tensor::leaf(1, 8, random_values(&mut r, 8));
    let weight = Tensor::constant(4, 8, random_values(&mut r, 32));
    let max_rel = grad_check(
        |tape| {
            let normed = tape.layer_norm(&x, &gain, &bias, 1e-5)?;
            let weighted = tape.mul(&normed, &weight)?;
            tape.sum(&weighted)
        },
        &[&x, &gain, &bias],
        1e-5,
    )
    .unwrap();
    assert!(max_rel < 1e-5, "max relative error {max_rel}");
}

#[test]
fn relu_by_definition() {
    let mut tape = Tape::new();
    let x = Tensor::constant(1, 3, vec![-1.0, 0.0, 2.0]);
    assert_eq!(tape.relu(&x).unwrap().values(), vec![0.0, 0.0, 2.0]);
}

#[test]
fn relu_identity_on_nonnegative_input() {
    let mut tape = Tape::new();
    let x = Tensor::constant(1, 4, vec![0.0, 0.5, 1.0, 7.0]);
    assert_eq!(tape.relu(&x).unwrap().values(), x.values());
}

#[test]
fn relu_gradient_matches_finite_differences_away_from_zero() {
    let mut r = rng(13);
    // Keep inputs well away from the kink at zero.
    let values: Vec<f64> = (0..12)
        .map(|_| {
            let v: f64 = r.gen_range(0.2..1.0);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::leaf(3, 4, values);
    let weight = Tensor::constant(3, 4, random_values(&mut r, 12));
    let max_rel = grad_check(
        |tape| {
            let act = tape.relu(&x)?;
            let weighted = tape.mul(&act, &weight)?;
            tape.sum(&weighted)
        },
        &[&x],
        1e-5,
    )
    .unwrap();
    assert!(max_rel < 1e-6, "max relative error {max_rel}");
}

#[test]
fn cross_entropy_uniform_logits_is_log_class_count() {
    let mut tape = Tape::new();
    let logits = Tensor::constant(1, 4, vec![0.3; 4]);
    let labels = Tensor::constant(1, 4, vec![1.0, 0.0, 0.0, 0.0]);
    let loss = tape.softmax_cross_entropy(&logits, &labels).unwrap();
    assert!((loss.get(0, 0) - 4.0_f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_correct_logit_approaches_zero() {
    let mut tape = Tape::new();
    let logits = Tensor::constant(1, 3, vec![50.0, 0.0, 0.0]);
    let labels = Tensor::constant(1, 3, vec![1.0, 0.0, 0.0]);
    let loss = tape.softmax_cross_entropy(&logits, &labels).unwrap();
    assert!(loss.get(0, 0) < 1e-12);
}

#[test]
fn cross_entropy_is_linear_in_soft_labels() {
    let logits_v = vec![0.7, -0.4];
    let mut tape = Tape::new();
    let logits = Tensor::constant(1, 2, logits_v.clone());
    let soft = tape
        .softmax_cross_entropy(&logits, &Tensor::constant(1, 2, vec![0.3, 0.7]))
        .unwrap()
        .get(0, 0);
    let l0 = tape
        .softmax_cross_entropy(&logits, &Tensor::constant(1, 2, vec![1.0, 0.0]))
        .unwrap()
        .get(0, 0);
    let l1 = tape
        .softmax_cross_entropy(&logits, &Tensor::constant(1, 2, vec![0.0, 1.0]))
        .unwrap()
        .get(0, 0);
    assert!((soft - (0.3 * l0 + 0.7 * l1)).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_label_not_summing_to_one() {
    let mut tape = Tape::new();
    let logits = Tensor::constant(1, 2, vec![0.0, 0.0]);
    let labels = Tensor::constant(1, 2, vec![0.5, 0.6]);
    let err = tape.softmax_cross_entropy(&logits, &labels).unwrap_err();
    assert!(matches!(err, Error::InvalidLabel(_)));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut r = rng(14);
    let logits = Tensor::leaf(3, 4, random_values(&mut r, 12));
    let labels = Tensor::constant(
        3,
        4,
        vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.25, 0.25, 0.25, 0.25],
    );
    let max_rel = grad_check(
        |tape| tape.softmax_cross_entropy(&logits, &labels),
        &[&logits],
        1e-5,
    )
    .unwrap();
    assert!(max_rel < 1e-6, "max relative error {max_rel}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = Tensor::leaf(2, 3, vec![0.1; 6]);
    let loss = tape.sum(&x).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = Tensor::leaf(2, 2, vec![1.0; 4]);
    let y = tape.relu(&x).unwrap();
    let err = tape.backward(&y).unwrap_err();
    assert!(matches!(err, Error::Dimension { op: "backward", .. }));
}

#[test]
fn gradients_accumulate_across_backward_calls() {
    let x = Tensor::leaf(1, 3, vec![1.0, 2.0, 3.0]);
    for _ in 0..2 {
        let mut tape = Tape::new();
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
    }
    // Two sweeps without zero_grad double the gradient, per the accumulate policy.
    assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
    x.zero_grad();
    assert_eq!(x.grad().unwrap(), vec![0.0; 3]);
}

#[test]
fn gather_and_broadcast_ops_pass_finite_differences() {
    let mut r = rng(15);
    let x = Tensor::leaf(4, 3, random_values(&mut r, 12));
    let row = Tensor::leaf(1, 3, random_values(&mut r, 3));
    let w = Tensor::leaf(6, 2, random_values(&mut r, 12));
    let indices = vec![0usize, 2, 2, 3, 1, 0];
    let max_rel = grad_check(
        |tape| {
            let gathered = tape.gather_rows(&x, &indices)?;
            let shifted = tape.add_row(&gathered, &row)?;
            let joined = tape.concat_cols(&shifted, &gathered)?;
            let halves = tape.concat_rows(&joined, &joined)?;
            let scaled = tape.scale(&halves, 0.5)?;
            let prod = tape.matmul(&scaled, &w)?;
            let seg = Segments::new(vec![0, 0, 1, 1, 2, 2, 0, 1, 2, 0, 1, 2], 3).unwrap();
            let pooled = tape.segment_max(&prod, &seg)?;
            tape.sum(&pooled)
        },
        &[&x, &row, &w],
        1e-5,
    )
    .unwrap();
    assert!(max_rel < 1e-5, "max relative error {max_rel}");
}

#[test]
fn ops_are_deterministic_across_runs() {
    let run = || {
        let mut r = rng(16);
        let mut tape = Tape::new();
        let x = Tensor::leaf(5, 4, random_values(&mut r, 20));
        let w = Tensor::leaf(4, 4, random_values(&mut r, 16));
        let h = tape.matmul(&x, &w).unwrap();
        let a = tape.relu(&h).unwrap();
        let seg = Segments::new(vec![0, 1, 0, 1, 0], 2).unwrap();
        let pooled = tape.segment_max(&a, &seg).unwrap();
        let loss = tape.sum(&pooled).unwrap();
        tape.backward(&loss).unwrap();
        (loss.get(0, 0).to_bits(), x.grad().unwrap(), w.grad().unwrap())
    };
    let (l1, gx1, gw1) = run();
    let (l2, gx2, gw2) = run();
    assert_eq!(l1, l2);
    assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
}
