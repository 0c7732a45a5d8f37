//! Central finite-difference checks for every layer primitive. The
//! acceptance suite sweeps 20+ seeds; these runs keep the per-op machinery
//! honest during development.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shacnn::nn::{Graph, NodeId};
use shacnn::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Max hybrid relative error between analytic gradients and central finite
/// differences over every parameter element. The denominator floor keeps
/// near-zero gradients judged on an absolute scale.
pub fn finite_diff_max_err(g: &mut Graph<f64>, loss: NodeId, params: &[NodeId]) -> f64 {
    g.forward().unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = params.iter().map(|&p| g.grad(p).data().to_vec()).collect();

    let mut max_err = 0.0f64;
    for (pi, &p) in params.iter().enumerate() {
        for k in 0..g.value(p).len() {
            let saved = g.value(p).data()[k];
            g.value_mut(p).data_mut()[k] = saved + FD_STEP;
            g.forward().unwrap();
            let up = g.scalar_value(loss);
            g.value_mut(p).data_mut()[k] = saved - FD_STEP;
            g.forward().unwrap();
            let down = g.scalar_value(loss);
            g.value_mut(p).data_mut()[k] = saved;
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic[pi][k];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2);
            if err > max_err {
                max_err = err;
            }
        }
    }
    g.forward().unwrap();
    max_err
}

fn check(name: &str, err: f64) {
    assert!(err <= FD_TOL, "{name}: max relative error {err:.3e} > {FD_TOL:.0e}");
}

pub fn conv_graph(seed: u64) -> (Graph<f64>, NodeId, Vec<NodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Graph<f64> = Graph::new();
    let x = g.param("x", rand_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0));
    let w = g.param("w", rand_tensor(&mut rng, &[3, 2, 3, 3], -0.7, 0.7));
    let b = g.param("b", rand_tensor(&mut rng, &[3], -0.3, 0.3));
    let y = g.conv2d(x, w, b, 2, 1).unwrap();
    let flat = g.flatten(y).unwrap();
    let loss = g.mse_loss(flat).unwrap();
    let n = g.value(flat).len();
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.set_mse_target(loss, &target).unwrap();
    (g, loss, vec![x, w, b])
}

#[test]
fn gradcheck_conv2d() {
    for seed in 0..4 {
        let (mut g, loss, params) = conv_graph(seed);
        check("conv2d", finite_diff_max_err(&mut g, loss, &params));
    }
}

pub fn dense_graph(seed: u64) -> (Graph<f64>, NodeId, Vec<NodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Graph<f64> = Graph::new();
    let x = g.param("x", rand_tensor(&mut rng, &[4, 6], -1.0, 1.0));
    let w = g.param("w", rand_tensor(&mut rng, &[6, 3], -0.7, 0.7));
    let b = g.param("b", rand_tensor(&mut rng, &[3], -0.3, 0.3));
    let y = g.dense(x, w, b).unwrap();
    let loss = g.mse_loss(y).unwrap();
    let target: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.set_mse_target(loss, &target).unwrap();
    (g, loss, vec![x, w, b])
}

#[test]
fn gradcheck_dense() {
    for seed in 0..4 {
        let (mut g, loss, params) = dense_graph(seed);
        check("dense", finite_diff_max_err(&mut g, loss, &params));
    }
}

pub fn maxpool_graph(seed: u64) -> (Graph<f64>, NodeId, Vec<NodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Graph<f64> = Graph::new();
    let x = g.param("x", rand_tensor(&mut rng, &[2, 2, 6, 6], -1.0, 1.0));
    let y = g.maxpool2d(x, 2, 2).unwrap();
    let flat = g.flatten(y).unwrap();
    let loss = g.mse_loss(flat).unwrap();
    let n = g.value(flat).len();
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.set_mse_target(loss, &target).unwrap();
    (g, loss, vec![x])
}

#[test]
fn gradcheck_maxpool() {
    for seed in 0..4 {
        let (mut g, loss, params) = maxpool_graph(seed);
        check("maxpool2d", finite_diff_max_err(&mut g, loss, &params));
    }
}

pub fn relu_graph(seed: u64) -> (Graph<f64>, NodeId, Vec<NodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Graph<f64> = Graph::new();
    let x = g.param("x", rand_tensor(&mut rng, &[3, 8], -1.0, 1.0));
    let y = g.relu(x).unwrap();
    let loss = g.mse_loss(y).unwrap();
    let target: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.set_mse_target(loss, &target).unwrap();
    (g, loss, vec![x])
}

#[test]
fn gradcheck_relu() {
    for seed in 0..4 {
        let (mut g, loss, params) = relu_graph(seed);
        check("relu", finite_diff_max_err(&mut g, loss, &params));
    }
}

pub fn batchnorm_graph(seed: u64) -> (Graph<f64>, NodeId, Vec<NodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Graph<f64> = Graph::new();
    let x = g.param("x", rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0));
    let gamma = g.param("gamma", rand_tensor(&mut rng, &[3], 0.5, 1.5));
    let beta = g.param("beta", rand_tensor(&mut rng, &[3], -0.5, 0.5));
    let y = g.batchnorm2d("bn", x, gamma, beta, 0.1, 1e-5).unwrap();
    let flat = g.flatten(y).unwrap();
    let loss = g.mse_loss(flat).unwrap();
    let n = g.value(flat).len();
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.set_mse_target(loss, &target).unwrap();
    (g, loss, vec![x, gamma, beta])
}

#[test]
fn gradcheck_batchnorm_training_mode() {
    for seed in 0..4 {
        let (mut g, loss, params) = batchnorm_graph(seed);
        g.set_training(true);
        check("batchnorm2d", finite_diff_max_err(&mut g, loss, &params));
    }
}

pub fn softmax_graph(seed: u64) -> (Graph<f64>, NodeId, Vec<NodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Graph<f64> = Graph::new();
    let x = g.param("x", rand_tensor(&mut rng, &[3, 7], -2.0, 2.0));
    let y = g.softmax(x).unwrap();
    let loss = g.mse_loss(y).unwrap();
    let target: Vec<f64> = (0..21).map(|_| rng.gen_range(0.0..1.0)).collect();
    g.set_mse_target(loss, &target).unwrap();
    (g, loss, vec![x])
}

#[test]
fn gradcheck_softmax() {
    for seed in 0..4 {
        let (mut g, loss, params) = softmax_graph(seed);
        check("softmax", finite_diff_max_err(&mut g, loss, &params));
    }
}

pub fn cross_entropy_graph(seed: u64) -> (Graph<f64>, NodeId, Vec<NodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Graph<f64> = Graph::new();
    let x = g.param("x", rand_tensor(&mut rng, &[5, 4], -2.0, 2.0));
    let loss = g.softmax_cross_entropy(x).unwrap();
    let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
    g.set_labels(loss, &labels).unwrap();
    (g, loss, vec![x])
}

#[test]
fn gradcheck_cross_entropy() {
    for seed in 0..4 {
        let (mut g, loss, params) = cross_entropy_graph(seed);
        check("softmax_cross_entropy", finite_diff_max_err(&mut g, loss, &params));
    }
}

pub fn mse_graph(seed: u64) -> (Graph<f64>, NodeId, Vec<NodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Graph<f64> = Graph::new();
    let x = g.param("x", rand_tensor(&mut rng, &[3, 4], -1.0, 1.0));
    let loss = g.mse_loss(x).unwrap();
    let target: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.set_mse_target(loss, &target).unwrap();
    (g, loss, vec![x])
}

#[test]
fn gradcheck_mse() {
    for seed in 0..4 {
        let (mut g, loss, params) = mse_graph(seed);
        check("mean_squared_error", finite_diff_max_err(&mut g, loss, &params));
    }
}

pub fn weighted_sum_graph(seed: u64) -> (Graph<f64>, NodeId, Vec<NodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Graph<f64> = Graph::new();
    let a = g.param("a", rand_tensor(&mut rng, &[2, 3], -1.0, 1.0));
    let b = g.param("b", rand_tensor(&mut rng, &[2, 3], -1.0, 1.0));
    let la = g.mse_loss(a).unwrap();
    let lb = g.mse_loss(b).unwrap();
    let ta: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tb: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.set_mse_target(la, &ta).unwrap();
    g.set_mse_target(lb, &tb).unwrap();
    let loss = g.weighted_sum(&[la, lb], &[0.3, 0.7]).unwrap();
    (g, loss, vec![a, b])
}

#[test]
fn gradcheck_weighted_sum() {
    for seed in 0..4 {
        let (mut g, loss, params) = weighted_sum_graph(seed);
        check("weighted_sum", finite_diff_max_err(&mut g, loss, &params));
    }
}

/// A conv -> pool -> flatten -> dense -> cross-entropy chain end to end.
pub fn composite_graph(seed: u64) -> (Graph<f64>, NodeId, Vec<NodeId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g: Graph<f64> = Graph::new();
    let x = g.param("x", rand_tensor(&mut rng, &[2, 1, 8, 8], -1.0, 1.0));
    let w1 = g.param("w1", rand_tensor(&mut rng, &[4, 1, 3, 3], -0.5, 0.5));
    let b1 = g.param("b1", rand_tensor(&mut rng, &[4], -0.2, 0.2));
    let c1 = g.conv2d(x, w1, b1, 1, 1).unwrap();
    let r1 = g.relu(c1).unwrap();
    let p1 = g.maxpool2d(r1, 2, 2).unwrap();
    let flat = g.flatten(p1).unwrap();
    let dim = g.value(flat).shape()[1];
    let w2 = g.param("w2", rand_tensor(&mut rng, &[dim, 5], -0.4, 0.4));
    let b2 = g.param("b2", rand_tensor(&mut rng, &[5], -0.2, 0.2));
    let logits = g.dense(flat, w2, b2).unwrap();
    let loss = g.softmax_cross_entropy(logits).unwrap();
    let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..5)).collect();
    g.set_labels(loss, &labels).unwrap();
    (g, loss, vec![x, w1, b1, w2, b2])
}

#[test]
fn gradcheck_composite_chain() {
    for seed in 0..2 {
        let (mut g, loss, params) = composite_graph(seed);
        check("composite", finite_diff_max_err(&mut g, loss, &params));
    }
}
