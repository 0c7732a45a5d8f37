//! Forward kernels against independent naive-loop oracles and hand
//! arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shacnn::nn::Graph;
use shacnn::tensor::Tensor;
use shacnn::Error;

fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Quadruple-loop convolution, written independently of the library path.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < wd {
                                    let xi = ((bi * cin + ci) * h + ii as usize) * wd + jj as usize;
                                    let wi = ((co * cin + ci) * kh + ki) * kw + kj;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    (out, [b, cout, oh, ow])
}

fn run_conv(
    x: Tensor<f64>,
    w: Tensor<f64>,
    b: Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let mut g: Graph<f64> = Graph::new();
    let xi = g.input("x", x.shape());
    let wp = g.param("w", w);
    let bp = g.param("b", b);
    let y = g.conv2d(xi, wp, bp, stride, pad).unwrap();
    g.bind_input(xi, x).unwrap();
    g.forward().unwrap();
    g.value(y).clone()
}

#[test]
fn conv_one_by_one_is_a_product() {
    let y = run_conv(
        Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap(),
        Tensor::from_vec(&[1, 1, 1, 1], vec![-2.5]).unwrap(),
        Tensor::from_vec(&[1], vec![0.0]).unwrap(),
        1,
        0,
    );
    assert_eq!(y.data(), &[3.0 * -2.5]);
}

#[test]
fn conv_ones_kernel_sums_each_window() {
    // 3x3 ramp, 2x2 ones kernel: each output is a 4-term window sum.
    let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
    let y = run_conv(
        Tensor::from_vec(&[1, 1, 3, 3], x.clone()).unwrap(),
        Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]).unwrap(),
        Tensor::from_vec(&[1], vec![0.0]).unwrap(),
        1,
        0,
    );
    let expect = [
        x[0] + x[1] + x[3] + x[4],
        x[1] + x[2] + x[4] + x[5],
        x[3] + x[4] + x[6] + x[7],
        x[4] + x[5] + x[7] + x[8],
    ];
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &expect);
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(xs, ws, stride, pad) in &[
        ([2usize, 3, 8, 8], [4usize, 3, 3, 3], 1usize, 0usize),
        ([1, 2, 7, 9], [3, 2, 3, 3], 2, 1),
        ([2, 1, 5, 5], [2, 1, 5, 5], 1, 0),
        ([1, 3, 6, 6], [2, 3, 2, 2], 3, 2),
    ] {
        let x = rand_vec(&mut rng, xs.iter().product());
        let w = rand_vec(&mut rng, ws.iter().product());
        let b = rand_vec(&mut rng, ws[0]);
        let (expect, oshape) = naive_conv(&x, xs, &w, ws, &b, stride, pad);
        let y = run_conv(
            Tensor::from_vec(&xs, x).unwrap(),
            Tensor::from_vec(&ws, w).unwrap(),
            Tensor::from_vec(&[ws[0]], b).unwrap(),
            stride,
            pad,
        );
        assert_eq!(y.shape(), &oshape);
        for (a, e) in y.data().iter().zip(&expect) {
            let rel = (a - e).abs() / e.abs().max(1.0);
            assert!(rel <= 1e-12, "conv vs naive oracle: {a} vs {e}");
        }
    }
}

#[test]
fn conv_rejects_undersized_input() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.input("x", &[1, 1, 2, 2]);
    let w = g.param("w", Tensor::zeros(&[1, 1, 3, 3]));
    let b = g.param("b", Tensor::zeros(&[1]));
    assert!(matches!(
        g.conv2d(x, w, b, 1, 0),
        Err(Error::ShapeMismatch(_))
    ));
}

fn run_dense(x: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>) -> Tensor<f64> {
    let mut g: Graph<f64> = Graph::new();
    let xi = g.input("x", x.shape());
    let wp = g.param("w", w);
    let bp = g.param("b", b);
    let y = g.dense(xi, wp, bp).unwrap();
    g.bind_input(xi, x).unwrap();
    g.forward().unwrap();
    g.value(y).clone()
}

#[test]
fn dense_identity_weight_passes_input_through() {
    let n = 4;
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        w[i * n + i] = 1.0;
    }
    let x = vec![0.5, -1.5, 2.0, 0.0];
    let y = run_dense(
        Tensor::from_vec(&[1, n], x.clone()).unwrap(),
        Tensor::from_vec(&[n, n], w).unwrap(),
        Tensor::zeros(&[n]),
    );
    assert_eq!(y.data(), x.as_slice());
}

#[test]
fn dense_hand_arithmetic() {
    // [4,5] . [[1],[2]] + [3] = 4 + 10 + 3 = 17
    let y = run_dense(
        Tensor::from_vec(&[1, 2], vec![4.0, 5.0]).unwrap(),
        Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap(),
        Tensor::from_vec(&[1], vec![3.0]).unwrap(),
    );
    assert_eq!(y.data(), &[17.0]);
}

#[test]
fn dense_matches_naive_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(b, n, m) in &[(1usize, 3usize, 4usize), (5, 7, 2), (3, 1, 6)] {
        let x = rand_vec(&mut rng, b * n);
        let w = rand_vec(&mut rng, n * m);
        let bias = rand_vec(&mut rng, m);
        let mut expect = vec![0.0; b * m];
        for bi in 0..b {
            for j in 0..m {
                let mut acc = bias[j];
                for k in 0..n {
                    acc += x[bi * n + k] * w[k * m + j];
                }
                expect[bi * m + j] = acc;
            }
        }
        let y = run_dense(
            Tensor::from_vec(&[b, n], x).unwrap(),
            Tensor::from_vec(&[n, m], w).unwrap(),
            Tensor::from_vec(&[m], bias).unwrap(),
        );
        for (a, e) in y.data().iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
    }
}

#[test]
fn maxpool_basics_and_tie_breaking() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.input("x", &[1, 1, 2, 2]);
    let y = g.maxpool2d(x, 2, 2).unwrap();
    g.bind_input(x, Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
        .unwrap();
    g.forward().unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    // Constant input: output constant, gradient routes to the first element
    // of each window in row-major order.
    let mut g: Graph<f64> = Graph::new();
    let x = g.param("x", Tensor::filled(&[1, 1, 4, 4], 2.0));
    let p = g.maxpool2d(x, 2, 2).unwrap();
    let flat = g.flatten(p).unwrap();
    let loss = g.mse_loss(flat).unwrap();
    g.set_mse_target(loss, &[0.0, 0.0, 0.0, 0.0]).unwrap();
    g.forward().unwrap();
    assert_eq!(g.value(p).data(), &[2.0; 4]);
    g.backward(loss).unwrap();
    let dx = g.grad(x).data();
    let mut expect = vec![0.0; 16];
    for (oi, oj) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
        expect[oi * 4 + oj] = 2.0 * 2.0; // d/dx of x^2 at 2, batch 1
    }
    assert_eq!(dx, expect.as_slice());
}

#[test]
fn maxpool_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (b, c, h, w, win, stride) = (2usize, 3usize, 7usize, 7usize, 3usize, 2usize);
    let x = rand_vec(&mut rng, b * c * h * w);
    let oh = (h - win) / stride + 1;
    let ow = (w - win) / stride + 1;
    let mut expect = vec![f64::NEG_INFINITY; b * c * oh * ow];
    for bi in 0..b {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for ki in 0..win {
                        for kj in 0..win {
                            let v =
                                x[((bi * c + ci) * h + oi * stride + ki) * w + oj * stride + kj];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    expect[((bi * c + ci) * oh + oi) * ow + oj] = best;
                }
            }
        }
    }
    let mut g: Graph<f64> = Graph::new();
    let xi = g.input("x", &[b, c, h, w]);
    let y = g.maxpool2d(xi, win, stride).unwrap();
    g.bind_input(xi, Tensor::from_vec(&[b, c, h, w], x).unwrap())
        .unwrap();
    g.forward().unwrap();
    assert_eq!(g.value(y).data(), expect.as_slice());
}

#[test]
fn cross_entropy_uniform_logits_is_log_c() {
    for c in [2usize, 5, 100] {
        let logits = Tensor::from_vec(&[1, c], vec![0.7; c]).unwrap();
        let loss = shacnn::nn::softmax_cross_entropy(&logits, &[c - 1]).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_decreases_with_margin() {
    let mut prev = f64::INFINITY;
    for margin in [0.0, 1.0, 4.0, 16.0, 64.0] {
        let logits = Tensor::from_vec(&[1, 3], vec![margin, 0.0, 0.0]).unwrap();
        let loss = shacnn::nn::softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < prev, "loss must fall as the margin grows");
        prev = loss;
    }
    assert!(prev < 1e-20, "huge margin drives the loss to zero");
}

#[test]
fn cross_entropy_matches_direct_reference() {
    // Direct 64-bit evaluation without the max-subtraction path.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (b, c) = (8usize, 5usize);
    let logits = rand_vec(&mut rng, b * c);
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let mut expect = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * c..(r + 1) * c];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expect += -(row[label].exp() / z).ln();
    }
    expect /= b as f64;
    let t = Tensor::from_vec(&[b, c], logits).unwrap();
    let loss = shacnn::nn::softmax_cross_entropy(&t, &labels).unwrap();
    assert!(
        (loss - expect).abs() <= 1e-10,
        "stabilized {loss} vs direct {expect}"
    );
}

#[test]
fn cross_entropy_rejects_bad_labels() {
    let logits = Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
    assert!(matches!(
        shacnn::nn::softmax_cross_entropy(&logits, &[0, 3]),
        Err(Error::LabelRange { label: 3, limit: 3 })
    ));
}

#[test]
fn backward_before_forward_is_an_error() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.param("x", Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
    let loss = g.mse_loss(x).unwrap();
    g.set_mse_target(loss, &[0.0, 0.0]).unwrap();
    assert!(matches!(
        g.backward(loss),
        Err(Error::BackwardBeforeForward)
    ));
}

#[test]
fn dense_mse_gradient_matches_closed_form() {
    // Single dense layer, squared-error loss: dW = 2 x^T (pred - target) / B.
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (b, n, m) = (4usize, 3usize, 2usize);
    let x_data = rand_vec(&mut rng, b * n);
    let w_data = rand_vec(&mut rng, n * m);
    let target = rand_vec(&mut rng, b * m);

    let mut g: Graph<f64> = Graph::new();
    let x = g.input("x", &[b, n]);
    let w = g.param("w", Tensor::from_vec(&[n, m], w_data.clone()).unwrap());
    let bias = g.param("b", Tensor::zeros(&[m]));
    let pred = g.dense(x, w, bias).unwrap();
    let loss = g.mse_loss(pred).unwrap();
    g.set_mse_target(loss, &target).unwrap();
    g.bind_input(x, Tensor::from_vec(&[b, n], x_data.clone()).unwrap())
        .unwrap();
    g.forward().unwrap();
    g.backward(loss).unwrap();

    let pred_vals = g.value(pred).data().to_vec();
    let mut expect = vec![0.0; n * m];
    for bi in 0..b {
        for i in 0..n {
            for j in 0..m {
                expect[i * m + j] +=
                    2.0 * x_data[bi * n + i] * (pred_vals[bi * m + j] - target[bi * m + j])
                        / b as f64;
            }
        }
    }
    for (a, e) in g.grad(w).data().iter().zip(&expect) {
        assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0), "{a} vs {e}");
    }
}
