use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{check_all, max_relative_error, numeric_gradient};
use super::*;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape).with_grad()
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(3)).unwrap();
    let a = g.input("a", uniform(&mut rng, &[3, 4])).unwrap();
    let y = g.matmul(i, a).unwrap();
    assert_eq!(g.value(y), g.value(a));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([3])).unwrap();
    let y = g.softmax(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn sum_of_ones() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones([2, 3])).unwrap();
    let s = g.sum(x).unwrap();
    assert_eq!(g.value(s).item(), 6.0);
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.input("x", param(&mut rng, &[2, 5])).unwrap();
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get("x").unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn gradient_of_frobenius_is_twice_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let a = g.input("a", param(&mut rng, &[3, 3])).unwrap();
    let s = g.frob_sq(a).unwrap();
    let grads = g.backward(s).unwrap();
    let expected: Vec<f64> = g.value(a).data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(grads.get("a").unwrap().data(), expected.as_slice());
}

#[test]
fn unused_inputs_get_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let a = g.input("a", param(&mut rng, &[2])).unwrap();
    g.input("unused", param(&mut rng, &[4])).unwrap();
    let s = g.sum(a).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros([4]));
}

#[test]
fn backward_requires_scalar_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let a = g.input("a", param(&mut rng, &[2, 2])).unwrap();
    assert!(matches!(g.backward(a), Err(TensorError::NotScalar(_))));
}

#[test]
fn shape_mismatch_names_the_node() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3])).unwrap();
    let b = g.constant(Tensor::zeros([2, 2])).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, TensorError::ShapeMismatch { node: 2, op: "matmul", .. }), "{err}");
    assert!(g.add(a, b).is_err());
}

#[test]
fn non_finite_input_is_rejected() {
    let mut g = Graph::new();
    let err = g.input("x", Tensor::new([2], vec![1.0, f64::NAN]).unwrap()).unwrap_err();
    assert!(matches!(err, TensorError::NonFiniteInput { .. }));
    let mut inputs = HashMap::new();
    let x = g.input("y", Tensor::zeros([1])).unwrap();
    inputs.insert("y".to_string(), Tensor::new([1], vec![f64::INFINITY]).unwrap());
    assert!(g.evaluate(x, &inputs).is_err());
}

#[test]
fn rsqrt_of_zero_is_non_finite() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1])).unwrap();
    assert!(matches!(g.rsqrt(x), Err(TensorError::NonFinite { op: "rsqrt", .. })));
}

#[test]
fn evaluate_is_pure_and_matches_eager_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (g, root) = three_layer(&mut rng);
    let empty = HashMap::new();
    let v1 = g.evaluate(root, &empty).unwrap();
    let v2 = g.evaluate(root, &empty).unwrap();
    assert_eq!(v1.data()[0].to_bits(), v2.data()[0].to_bits());
    assert_eq!(v1.data()[0].to_bits(), g.value(root).item().to_bits());
}

/// Random three-layer perceptron with layer norm and softmax output.
fn three_layer(rng: &mut ChaCha8Rng) -> (Graph, NodeId) {
    let mut g = Graph::new();
    let x = g.input("x", uniform(rng, &[4, 3])).unwrap();
    let w1 = g.input("w1", param(rng, &[3, 5])).unwrap();
    let b1 = g.input("b1", param(rng, &[5])).unwrap();
    let w2 = g.input("w2", param(rng, &[5, 5])).unwrap();
    let b2 = g.input("b2", param(rng, &[5])).unwrap();
    let w3 = g.input("w3", param(rng, &[5, 2])).unwrap();
    let b3 = g.input("b3", param(rng, &[2])).unwrap();
    let h1 = g.linear(x, w1, b1).unwrap();
    let h1 = g.gelu(h1).unwrap();
    let h2 = g.linear(h1, w2, b2).unwrap();
    let h2 = g.layer_norm(h2).unwrap();
    let h2 = g.gelu(h2).unwrap();
    let out = g.linear(h2, w3, b3).unwrap();
    let out = g.softmax(out).unwrap();
    let target = g.constant(uniform(rng, &[4, 2])).unwrap();
    let d = g.sub(out, target).unwrap();
    let root = g.frob_sq(d).unwrap();
    (g, root)
}

#[test]
fn three_layer_composition_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (g, root) = three_layer(&mut rng);
        let (err, name) = check_all(&g, root, H, FLOOR).unwrap();
        assert!(err < TOL, "seed {seed}: {name} rel err {err}");
    }
}

/// Builds `sum(c ⊙ op(x))` with a random weighting `c` so every output entry
/// contributes a distinct amount.
fn check_unary_op(shape: &[usize], build: impl Fn(&mut Graph, NodeId) -> NodeId) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let x = g.input("x", param(&mut rng, shape)).unwrap();
    let y = build(&mut g, x);
    let c = g.constant(uniform(&mut rng, g.value(y).shape())).unwrap();
    let cy = g.mul(c, y).unwrap();
    let root = g.sum(cy).unwrap();
    let (err, name) = check_all(&g, root, H, FLOOR).unwrap();
    assert!(err < TOL, "{name}: {err}");
}

#[test]
fn per_operation_gradients_match_finite_differences() {
    check_unary_op(&[3, 4], |g, x| g.scale(x, -2.5).unwrap());
    check_unary_op(&[2, 3, 4], |g, x| g.permute(x, &[2, 0, 1]).unwrap());
    check_unary_op(&[2, 3, 4], |g, x| g.transpose(x).unwrap());
    check_unary_op(&[2, 6], |g, x| g.reshape(x, &[3, 4]).unwrap());
    check_unary_op(&[3, 5, 2], |g, x| g.slice(x, 1, 1, 4).unwrap());
    check_unary_op(&[4], |g, x| g.tile(x, 3).unwrap());
    check_unary_op(&[2, 3], |g, x| g.expand_last(x, 4).unwrap());
    check_unary_op(&[3, 4], |g, x| g.sum_last(x).unwrap());
    check_unary_op(&[3, 4], |g, x| g.softmax(x).unwrap());
    check_unary_op(&[3, 6], |g, x| g.layer_norm(x).unwrap());
    check_unary_op(&[3, 4], |g, x| g.gelu(x).unwrap());
    check_unary_op(&[3, 4], |g, x| {
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_last(sq).unwrap();
        g.sqrt(s).unwrap()
    });
    check_unary_op(&[3, 4], |g, x| {
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_last(sq).unwrap();
        g.rsqrt(s).unwrap()
    });
    check_unary_op(&[3, 4], |g, x| {
        let f = g.frob_sq(x).unwrap();
        g.reshape(f, &[1]).unwrap()
    });
    check_unary_op(&[2, 3], |g, x| {
        let s = g.sum(x).unwrap();
        g.reshape(s, &[1]).unwrap()
    });
}

#[test]
fn binary_operation_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let a = g.input("a", param(&mut rng, &[2, 3, 4])).unwrap();
    let b = g.input("b", param(&mut rng, &[2, 4, 3])).unwrap();
    let c = g.input("c", param(&mut rng, &[2, 3, 3])).unwrap();
    let d = g.input("d", param(&mut rng, &[2, 3, 3])).unwrap();
    let ab = g.matmul(a, b).unwrap();
    let s = g.add(ab, c).unwrap();
    let s = g.sub(s, d).unwrap();
    let s = g.mul(s, c).unwrap();
    let parts = [s, d, c];
    let cat = g.concat(&parts, 1).unwrap();
    let cat2 = g.concat(&[cat, cat], 2).unwrap();
    let root = g.frob_sq(cat2).unwrap();
    let (err, name) = check_all(&g, root, H, FLOOR).unwrap();
    assert!(err < TOL, "{name}: {err}");
}

#[test]
fn backward_is_linear_in_the_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.input("x", param(&mut rng, &[3, 3])).unwrap();
    let f = g.frob_sq(x).unwrap();
    let sm = g.softmax(x).unwrap();
    let gg = g.sum(sm).unwrap();
    let cube = g.mul(x, x).unwrap();
    let cube = g.mul(cube, x).unwrap();
    let h = g.sum(cube).unwrap();
    let (a, b) = (1.7, -0.4);
    let af = g.scale(f, a).unwrap();
    let bh = g.scale(h, b).unwrap();
    let combo = g.add(af, bh).unwrap();
    let _ = gg;
    let gf = g.backward(f).unwrap();
    let gh = g.backward(h).unwrap();
    let gc = g.backward(combo).unwrap();
    for i in 0..9 {
        let expected = a * gf.get("x").unwrap().data()[i] + b * gh.get("x").unwrap().data()[i];
        assert!((gc.get("x").unwrap().data()[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn numeric_gradient_of_quadratic_is_exact_enough() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::new([2], vec![0.3, -0.7]).unwrap().with_grad()).unwrap();
    let root = g.frob_sq(x).unwrap();
    let n = numeric_gradient(&g, root, "x", H).unwrap();
    let a = g.backward(root).unwrap();
    assert!(max_relative_error(a.get("x").unwrap(), &n, FLOOR) < 1e-8);
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn attention_block_gradients(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.input("x", param(&mut rng, &[2, 3, 4])).unwrap();
            let wq = g.input("wq", param(&mut rng, &[2, 4, 4])).unwrap();
            let q = g.matmul(x, wq).unwrap();
            let kt = g.transpose(x).unwrap();
            let scores = g.matmul(q, kt).unwrap();
            let attn = g.softmax(scores).unwrap();
            let out = g.matmul(attn, x).unwrap();
            let out = g.layer_norm(out).unwrap();
            let c = g.constant(uniform(&mut rng, &[2, 3, 4])).unwrap();
            let weighted = g.mul(c, out).unwrap();
            let root = g.sum(weighted).unwrap();
            let (err, name) = check_all(&g, root, H, FLOOR).unwrap();
            prop_assert!(err < TOL, "{} {}", name, err);
        }

        #[test]
        fn softmax_rows_sum_to_one(data in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new([3, 4], data).unwrap()).unwrap();
            let y = g.softmax(x).unwrap();
            for row in g.value(y).data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
