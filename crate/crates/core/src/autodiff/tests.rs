use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::check::{self, SmallConvNet, ThreeLayerNet, FD_STEP};
use super::*;
use crate::Error;

struct Square;

impl Differentiable for Square {
    fn apply<B: Backend>(&self, b: &mut B, x: &[B::Value]) -> Result<B::Value> {
        let sq = b.mul(&x[0], &x[0])?;
        b.sum(&sq)
    }
}

struct SumAll;

impl Differentiable for SumAll {
    fn apply<B: Backend>(&self, b: &mut B, x: &[B::Value]) -> Result<B::Value> {
        b.sum(&x[0])
    }
}

struct LinearMap(Tensor);

impl Differentiable for LinearMap {
    fn apply<B: Backend>(&self, b: &mut B, x: &[B::Value]) -> Result<B::Value> {
        let a = b.constant(self.0.clone());
        b.matmul(&a, &x[0])
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn identity_1x1_conv_is_identity() {
    let x = Tensor::uniform(&[2, 3, 4, 5], -2.0, 2.0, &mut rng(0));
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let y = Eval.conv2d(&x, &w, None, 1, 0).unwrap();
    assert_eq!(y, x);
}

#[test]
fn silu_of_zero_is_zero() {
    let y = Eval.silu(&Tensor::scalar(0.0)).unwrap();
    assert_eq!(y.item().unwrap(), 0.0);
}

#[test]
fn group_norm_normalizes_each_group() {
    let x = Tensor::uniform(&[2, 16, 4, 4], -3.0, 5.0, &mut rng(1));
    let y = Eval
        .group_norm(&x, &Tensor::ones(&[16]), &Tensor::zeros(&[16]), 8, 1e-5)
        .unwrap();
    for group in y.data().chunks(2 * 16) {
        let n = group.len() as f64;
        let mean = group.iter().sum::<f64>() / n;
        let var = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        // eps shifts the variance slightly below one
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn grad_of_square() {
    let (v, g) = value_and_grad(&Square, &[Tensor::scalar(3.0)]).unwrap();
    assert_eq!(v, 9.0);
    assert_eq!(g[0].item().unwrap(), 6.0);
}

#[test]
fn grad_of_sum_is_ones() {
    let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng(2));
    let (_, g) = value_and_grad(&SumAll, &[x]).unwrap();
    assert_eq!(g[0], Tensor::ones(&[3, 4]));
}

#[test]
fn grad_rejects_non_scalar_output_and_foreign_vars() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2]));
    let y = tape.scale(&x, 2.0).unwrap();
    assert!(matches!(tape.grad(y, &[x]), Err(Error::NonScalarOutput(_))));
    let s = tape.sum(&y).unwrap();
    assert!(matches!(tape.grad(s, &[y]), Err(Error::NotALeaf)));
    let c = tape.constant(Tensor::ones(&[2]));
    assert!(matches!(tape.grad(s, &[c]), Err(Error::NotALeaf)));
}

#[test]
fn three_layer_net_matches_finite_differences() {
    let mut r = rng(3);
    let inputs = ThreeLayerNet::random_inputs(&mut r, [4, 6, 5, 3], 3);
    struct Loss;
    impl Differentiable for Loss {
        fn apply<B: Backend>(&self, b: &mut B, x: &[B::Value]) -> Result<B::Value> {
            let y = ThreeLayerNet.apply(b, x)?;
            let sq = b.mul(&y, &y)?;
            b.mean(&sq)
        }
    }
    let (_, analytic) = value_and_grad(&Loss, &inputs).unwrap();
    let numeric = check::fd_gradient(|xs| Loss.apply(&mut Eval, xs)?.item(), &inputs, FD_STEP).unwrap();
    for (a, n) in analytic.iter().zip(&numeric) {
        let err = check::relative_error(a, n, 1e-8).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn every_catalog_op_passes_gradient_and_jvp_checks() {
    let mut r = rng(4);
    for case in check::catalog_cases(&mut r) {
        let g = check::gradient_error(&case, &mut r, FD_STEP).unwrap();
        assert!(g < 1e-4, "{}: gradient error {g}", case.kind.name());
        let j = check::jvp_error(&case, &case.inputs, &mut r, FD_STEP).unwrap();
        assert!(j < 1e-3, "{}: jvp error {j}", case.kind.name());
    }
}

#[test]
fn jvp_of_square() {
    let (y, t) = jvp(&Square, &[Tensor::scalar(3.0)], &[Tensor::scalar(1.0)]).unwrap();
    assert_eq!(y.item().unwrap(), 9.0);
    assert_eq!(t.item().unwrap(), 6.0);
}

#[test]
fn jvp_of_linear_map_is_the_map() {
    let mut r = rng(5);
    let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let x = Tensor::uniform(&[4, 1], -1.0, 1.0, &mut r);
    let v = Tensor::uniform(&[4, 1], -1.0, 1.0, &mut r);
    let (y, t) = jvp(&LinearMap(a.clone()), std::slice::from_ref(&x), std::slice::from_ref(&v)).unwrap();
    assert_eq!(y, Eval.matmul(&a, &x).unwrap());
    assert_eq!(t, Eval.matmul(&a, &v).unwrap());
}

#[test]
fn jvp_rejects_mismatched_tangents() {
    let err = jvp(&Square, &[Tensor::ones(&[2])], &[Tensor::ones(&[3])]);
    assert!(matches!(err, Err(Error::Shape { .. })));
    let err = jvp(&Square, &[Tensor::ones(&[2])], &[]);
    assert!(matches!(err, Err(Error::Shape { .. })));
}

#[test]
fn forward_reverse_transpose_identity() {
    let mut r = rng(6);
    for _ in 0..5 {
        let inputs = SmallConvNet::random_inputs(&mut r, 2);
        let gap = check::transpose_gap(&SmallConvNet, &inputs, &mut r).unwrap();
        assert!(gap < 1e-8, "gap {gap}");
        let inputs = ThreeLayerNet::random_inputs(&mut r, [3, 5, 5, 2], 4);
        let gap = check::transpose_gap(&ThreeLayerNet, &inputs, &mut r).unwrap();
        assert!(gap < 1e-8, "gap {gap}");
    }
}

#[test]
fn record_replay_is_bit_exact_and_tracks_substitutions() {
    let mut r = rng(7);
    let inputs = SmallConvNet::random_inputs(&mut r, 2);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = SmallConvNet.apply(&mut tape, &vars).unwrap();
    let replayed = tape.replay(&[], out).unwrap();
    assert_eq!(&replayed, tape.value(out));

    let new_x = Tensor::uniform(inputs[0].shape(), -2.0, 2.0, &mut r);
    let replayed = tape.replay(&[(vars[0], new_x.clone())], out).unwrap();
    let mut fresh = inputs.clone();
    fresh[0] = new_x;
    let direct = SmallConvNet.apply(&mut Eval, &fresh).unwrap();
    assert_eq!(replayed, direct);
}

#[test]
fn record_jvp_agrees_with_dual_evaluation() {
    let mut r = rng(8);
    let inputs = SmallConvNet::random_inputs(&mut r, 2);
    let tangents: Vec<Tensor> = inputs
        .iter()
        .map(|x| Tensor::uniform(x.shape(), -1.0, 1.0, &mut r))
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = SmallConvNet.apply(&mut tape, &vars).unwrap();
    let subs: Vec<(Var, Tensor)> = vars.iter().copied().zip(tangents.iter().cloned()).collect();
    let recorded = tape.jvp(&subs, out).unwrap();
    let (_, direct) = jvp(&SmallConvNet, &inputs, &tangents).unwrap();
    assert!(recorded.tangent().max_abs_diff(&direct).unwrap() < 1e-12);
}

#[test]
fn non_finite_results_are_errors() {
    let x = Tensor::from_vec(vec![1e200, 1e200]);
    let err = Eval.mul(&x, &x);
    assert!(matches!(err, Err(Error::NonFinite("mul"))));
}

#[test]
fn shape_mismatch_is_reported() {
    let err = Eval.add(&Tensor::ones(&[2]), &Tensor::ones(&[3]));
    assert!(matches!(err, Err(Error::Shape { .. })));
    let err = Eval.matmul(&Tensor::ones(&[2, 3]), &Tensor::ones(&[2, 3]));
    assert!(matches!(err, Err(Error::Shape { .. })));
    let err = Eval.sinusoidal(&Tensor::ones(&[2]), 7);
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
}

#[test]
fn evaluation_is_deterministic() {
    let a = SmallConvNet::random_inputs(&mut rng(9), 2);
    let b = SmallConvNet::random_inputs(&mut rng(9), 2);
    assert_eq!(a, b);
    let (va, ga) = value_and_grad(
        &check::OpCase {
            kind: OpKind::Mean,
            inputs: vec![],
        },
        &[a[0].clone()],
    )
    .unwrap();
    let (vb, gb) = value_and_grad(
        &check::OpCase {
            kind: OpKind::Mean,
            inputs: vec![],
        },
        &[b[0].clone()],
    )
    .unwrap();
    assert_eq!(va.to_bits(), vb.to_bits());
    assert_eq!(ga, gb);
}
