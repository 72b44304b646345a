use pgrd::ndgrad::{grad_check, Graph, NodeId, Tensor};
use pgrd::rng::Stream;
use proptest::prelude::*;

const TOL: f64 = 1e-4;

fn randn(seed: u64, name: &str, shape: &[usize]) -> Tensor<f64> {
    Stream::new(seed, name).normal_tensor(shape)
}

/// Reduce `out` to a scalar through a fixed random target so every output
/// element gets a distinct upstream gradient.
fn reduce(g: &mut Graph<f64>, out: NodeId) -> NodeId {
    let target = randn(99, "target", g.value(out).shape());
    let t = g.constant(target).unwrap();
    g.mse(out, t).unwrap()
}

fn check(g: &Graph<f64>, loss: NodeId, what: &str) {
    let report = grad_check(g, loss, TOL).unwrap();
    assert!(report.passed, "{what}: max relative error {}", report.max_rel_error());
    assert!(!report.non_differentiable(), "{what}: unexpected kink");
    assert!(report.leaves.iter().all(|l| l.checked > 0), "{what}: empty leaf check");
}

#[test]
fn add_scale_and_sum() {
    let mut g = Graph::new();
    let a = g.param(randn(1, "a", &[2, 3])).unwrap();
    let b = g.param(randn(1, "b", &[2, 3])).unwrap();
    let s = g.add(a, b).unwrap();
    let s = g.scale(s, -1.7).unwrap();
    let sq = g.silu(s).unwrap();
    let loss = g.sum(sq).unwrap();
    check(&g, loss, "add/scale/sum");
}

#[test]
fn concat_channels() {
    let mut g = Graph::new();
    let a = g.param(randn(2, "a", &[2, 1, 2, 3])).unwrap();
    let b = g.param(randn(2, "b", &[2, 2, 2, 3])).unwrap();
    let c = g.concat_channels(&[a, b, a]).unwrap();
    let loss = reduce(&mut g, c);
    check(&g, loss, "concat");
}

#[test]
fn matmul() {
    let mut g = Graph::new();
    let a = g.param(randn(3, "a", &[3, 4])).unwrap();
    let b = g.param(randn(3, "b", &[4, 5])).unwrap();
    let c = g.matmul(a, b).unwrap();
    let loss = reduce(&mut g, c);
    check(&g, loss, "matmul");
}

#[test]
fn conv3x3_and_conv1x1() {
    for k in [3, 1] {
        let mut g = Graph::new();
        let x = g.param(randn(4, "x", &[2, 3, 5, 4])).unwrap();
        let w = g.param(randn(4, "w", &[2, 3, k, k])).unwrap();
        let b = g.param(randn(4, "b", &[2])).unwrap();
        let y = g.conv2d(x, w, b).unwrap();
        let loss = reduce(&mut g, y);
        check(&g, loss, &format!("conv{k}x{k}"));
    }
}

#[test]
fn relu_away_from_zero() {
    let mut g = Graph::new();
    // Entries bounded away from 0 by more than the finite-difference step.
    let x = randn(5, "x", &[2, 3, 4, 4]).map(|v| if v.abs() < 0.1 { v + 0.3 * v.signum() + 0.01 } else { v });
    let x = g.param(x).unwrap();
    let y = g.relu(x).unwrap();
    let loss = reduce(&mut g, y);
    check(&g, loss, "relu");
}

#[test]
fn silu() {
    let mut g = Graph::new();
    let x = g.param(randn(6, "x", &[2, 2, 3, 3]).scale(2.0)).unwrap();
    let y = g.silu(x).unwrap();
    let loss = reduce(&mut g, y);
    check(&g, loss, "silu");
}

#[test]
fn upsample_and_pool() {
    let mut g = Graph::new();
    let x = g.param(randn(7, "x", &[2, 2, 4, 6])).unwrap();
    let p = g.avgpool2x(x).unwrap();
    let loss = reduce(&mut g, p);
    check(&g, loss, "avgpool");

    let mut g = Graph::new();
    let x = g.param(randn(7, "x", &[2, 2, 3, 2])).unwrap();
    let u = g.upsample2x(x).unwrap();
    let loss = reduce(&mut g, u);
    check(&g, loss, "upsample");
}

#[test]
fn softmax_channels() {
    let mut g = Graph::new();
    let x = g.param(randn(8, "x", &[2, 4, 3, 3])).unwrap();
    let y = g.softmax_channels(x).unwrap();
    let loss = reduce(&mut g, y);
    check(&g, loss, "softmax");
}

#[test]
fn cross_entropy_in_both_arguments() {
    let mut g = Graph::new();
    let logits = g.param(randn(9, "l", &[2, 3, 4, 4])).unwrap();
    let raw = g.param(randn(9, "t", &[2, 3, 4, 4])).unwrap();
    let target = g.softmax_channels(raw).unwrap();
    let loss = g.cross_entropy(logits, target).unwrap();
    check(&g, loss, "cross-entropy");
}

#[test]
fn mse_in_both_arguments() {
    let mut g = Graph::new();
    let a = g.param(randn(10, "a", &[3, 5])).unwrap();
    let b = g.param(randn(10, "b", &[3, 5])).unwrap();
    let loss = g.mse(a, b).unwrap();
    check(&g, loss, "mse");
}

#[test]
fn add_channel_bias() {
    let mut g = Graph::new();
    let x = g.param(randn(11, "x", &[2, 3, 2, 2])).unwrap();
    let b = g.param(randn(11, "b", &[2, 3])).unwrap();
    let y = g.add_channel_bias(x, b).unwrap();
    let loss = reduce(&mut g, y);
    check(&g, loss, "channel bias");
}

#[test]
fn forward_is_bit_deterministic() {
    let build = || {
        let mut g = Graph::new();
        let x = g.constant(randn(12, "x", &[2, 3, 8, 8])).unwrap();
        let w = g.param(randn(12, "w", &[4, 3, 3, 3])).unwrap();
        let b = g.param(randn(12, "b", &[4])).unwrap();
        let y = g.conv2d(x, w, b).unwrap();
        let y = g.silu(y).unwrap();
        let y = g.avgpool2x(y).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).clone(), grads.get(w).unwrap().clone())
    };
    assert_eq!(build(), build());
}

/// Shape-preserving ops on `[2, 3, 4, 4]` for random graphs.
fn random_op(g: &mut Graph<f64>, h: NodeId, choice: u8, seed: u64, i: usize) -> NodeId {
    let name = format!("op{i}");
    match choice % 7 {
        0 => g.silu(h).unwrap(),
        1 => g.scale(h, 0.7).unwrap(),
        2 => {
            let other = g.param(randn(seed, &name, &[2, 3, 4, 4])).unwrap();
            g.add(h, other).unwrap()
        }
        3 => g.softmax_channels(h).unwrap(),
        4 => {
            let w = g.param(randn(seed, &format!("{name}/w"), &[3, 3, 3, 3]).scale(0.3)).unwrap();
            let b = g.param(randn(seed, &format!("{name}/b"), &[3])).unwrap();
            g.conv2d(h, w, b).unwrap()
        }
        5 => {
            let u = g.upsample2x(h).unwrap();
            g.avgpool2x(u).unwrap()
        }
        _ => {
            let other = g.param(randn(seed, &name, &[2, 1, 4, 4])).unwrap();
            let c = g.concat_channels(&[h, other]).unwrap();
            let w = g.param(randn(seed, &format!("{name}/w"), &[3, 4, 1, 1])).unwrap();
            let b = g.param(randn(seed, &format!("{name}/b"), &[3])).unwrap();
            g.conv2d(c, w, b).unwrap()
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_five_op_graphs_match_finite_differences(seed in any::<u64>(), ops in proptest::collection::vec(any::<u8>(), 5)) {
        let mut g = Graph::new();
        let x = g.param(randn(seed, "x", &[2, 3, 4, 4])).unwrap();
        let mut h = x;
        for (i, &op) in ops.iter().enumerate() {
            h = random_op(&mut g, h, op, seed, i);
        }
        let loss = reduce(&mut g, h);
        let report = grad_check(&g, loss, TOL).unwrap();
        prop_assert!(report.passed, "ops {:?}: max relative error {}", ops, report.max_rel_error());
    }

    #[test]
    fn cross_entropy_is_non_negative(seed in any::<u64>()) {
        let mut g = Graph::new();
        let logits = g.constant(randn(seed, "l", &[1, 3, 2, 2]).scale(4.0)).unwrap();
        let raw = g.constant(randn(seed, "t", &[1, 3, 2, 2])).unwrap();
        let target = g.softmax_channels(raw).unwrap();
        let loss = g.cross_entropy(logits, target).unwrap();
        prop_assert!(g.value(loss).item() >= 0.0);
    }
}
