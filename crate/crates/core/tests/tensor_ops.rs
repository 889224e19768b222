//! Forward/backward behavior of the tensor operations.

use stgan_core::fdcheck::{finite_diff_check, finite_diff_check_multi};
use stgan_core::graph::GradGraph;
use stgan_core::rng::Rng;
use stgan_core::tensor::Tensor;

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

#[test]
fn elementwise_analytic_values() {
    let mut g = GradGraph::new();
    let x = g.constant(Tensor::from_vec(&[3], vec![0.0, -3.0, 3.0]).unwrap());
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).data()[0], 0.5);
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
    let l = g.leaky_relu(x, 0.2);
    assert_eq!(g.value(l).data(), &[0.0, 0.2 * -3.0, 3.0]);
}

#[test]
fn binary_requires_equal_shapes_or_scalar() {
    let mut g = GradGraph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");

    let s = g.scalar(2.0);
    let scaled = g.mul(a, s).unwrap();
    assert_eq!(g.value(scaled).shape(), &[2, 3]);
}

#[test]
fn log_is_clamped() {
    let mut g = GradGraph::new();
    let x = g.constant(Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap());
    let l = g.log(x);
    assert_eq!(g.value(l).data()[0], 1e-12f64.ln());
    assert_eq!(g.value(l).data()[1], 0.0);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = Rng::new(5);
    let x = random_tensor(&[2, 3], &mut rng);
    for (name, f) in [
        ("exp", 0usize),
        ("sigmoid", 1),
        ("power3", 2),
        ("abs", 3),
        ("mul_self", 4),
    ] {
        let report = finite_diff_check(
            name,
            &x,
            |g, v| {
                let y = match f {
                    0 => g.exp(v),
                    1 => g.sigmoid(v),
                    2 => g.power(v, 3.0),
                    3 => g.abs(v),
                    _ => g.mul(v, v)?,
                };
                Ok(g.sum(y))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}

#[test]
fn matmul_identity_and_hand_value() {
    let mut rng = Rng::new(9);
    let mut g = GradGraph::new();
    let a = g.leaf(random_tensor(&[3, 3], &mut rng));
    let eye = g.constant(
        Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
    );
    let prod = g.matmul(a, eye).unwrap();
    assert_eq!(g.value(prod).data(), g.value(a).data());

    let m = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let v = g.constant(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap());
    let mv = g.matmul(m, v).unwrap();
    assert_eq!(g.value(mv).data(), &[3.0, 7.0]);

    let bad = g.matmul(a, v);
    assert!(bad.unwrap_err().to_string().contains("matmul"));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = Rng::new(17);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4, 2], &mut rng);
    let report = finite_diff_check_multi(
        "matmul",
        &[a, b],
        |g, vars| {
            let c = g.matmul(vars[0], vars[1])?;
            Ok(g.sum(c))
        },
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn softmax_analytic_and_invariances() {
    let mut g = GradGraph::new();
    let x = g.constant(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let x2 = g.constant(Tensor::from_vec(&[2], vec![1f64.ln(), 3f64.ln()]).unwrap());
    let s2 = g.softmax(x2, 0).unwrap();
    assert_close(g.value(s2).data()[0], 0.25, 1e-15);
    assert_close(g.value(s2).data()[1], 0.75, 1e-15);

    // shift invariance within 1e-12, rows sum to 1 within 1e-9
    let mut rng = Rng::new(3);
    let raw = random_tensor(&[4, 6], &mut rng);
    let xv = g.constant(raw.clone());
    let sv = g.softmax(xv, 1).unwrap();
    let shifted = Tensor::from_vec(&[4, 6], raw.data().iter().map(|v| v + 7.25).collect()).unwrap();
    let xs = g.constant(shifted);
    let ss = g.softmax(xs, 1).unwrap();
    for (a, b) in g.value(sv).data().iter().zip(g.value(ss).data()) {
        assert!((a - b).abs() < 1e-12);
    }
    for row in g.value(sv).data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = Rng::new(23);
    let x = random_tensor(&[3, 5], &mut rng);
    let report = finite_diff_check(
        "softmax",
        &x,
        |g, v| {
            let s = g.softmax(v, 1)?;
            let sq = g.power(s, 2.0); // make the loss non-trivially coupled
            Ok(g.sum(sq))
        },
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn conv2d_identity_kernel_and_hand_value() {
    let mut rng = Rng::new(31);
    let mut g = GradGraph::new();
    let x = g.leaf(random_tensor(&[1, 1, 5, 5], &mut rng));
    let w = g.constant(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let ones_in = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
    let ones_k = g.constant(Tensor::filled(&[1, 1, 2, 2], 1.0));
    let y2 = g.conv2d(ones_in, ones_k, b, 1, 0).unwrap();
    assert_eq!(g.value(y2).shape(), &[1, 1, 2, 2]);
    assert_eq!(g.value(y2).data(), &[4.0, 4.0, 4.0, 4.0]);

    let big_k = g.constant(Tensor::filled(&[1, 1, 7, 7], 1.0));
    let err = g.conv2d(ones_in, big_k, b, 1, 0).unwrap_err().to_string();
    assert!(err.contains("larger than padded input"), "{err}");
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = Rng::new(41);
    let x = random_tensor(&[1, 1, 6, 6], &mut rng);
    let w = random_tensor(&[2, 1, 3, 3], &mut rng);
    let b = random_tensor(&[2], &mut rng);
    let report = finite_diff_check_multi(
        "conv2d",
        &[x, w, b],
        |g, vars| {
            let y = g.conv2d(vars[0], vars[1], vars[2], 2, 1)?;
            let sq = g.power(y, 2.0);
            Ok(g.sum(sq))
        },
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn conv2d_transpose_output_sizes() {
    let mut rng = Rng::new(43);
    let mut g = GradGraph::new();
    let x = g.constant(random_tensor(&[1, 1, 4, 4], &mut rng));
    let w = g.constant(random_tensor(&[1, 1, 3, 3], &mut rng));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d_transpose(x, w, b, 2, 1, 0).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 7, 7]);
    // the decoder's doubling configuration: k=3, s=2, p=1, out_pad=1
    let y2 = g.conv2d_transpose(x, w, b, 2, 1, 1).unwrap();
    assert_eq!(g.value(y2).shape(), &[1, 1, 8, 8]);
}

#[test]
fn conv2d_transpose_is_adjoint_of_conv2d() {
    // <conv2d(x, w), y> == <x, conv2d_transpose(y, w)> with matched geometry
    let mut rng = Rng::new(47);
    for (h, w_in, kh, stride, pad, cin, cout) in [
        (6, 6, 3, 1, 1, 1, 2),
        (8, 6, 3, 2, 1, 2, 3),
        (5, 7, 2, 2, 0, 3, 1),
        (9, 9, 4, 3, 2, 2, 2),
    ] {
        let x = random_tensor(&[2, cin, h, w_in], &mut rng);
        let wt = random_tensor(&[cout, cin, kh, kh], &mut rng);
        let zero_b_out = Tensor::zeros(&[cout]);
        let zero_b_in = Tensor::zeros(&[cin]);

        let mut g = GradGraph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(wt.clone());
        let bv = g.constant(zero_b_out);
        let fwd = g.conv2d(xv, wv, bv, stride, pad).unwrap();
        let y = random_tensor(&[2, cout, g.value(fwd).shape()[2], g.value(fwd).shape()[3]], &mut rng);
        let lhs: f64 = g.value(fwd).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();

        let out_pad_h = (h + 2 * pad - kh) % stride;
        let yv = g.constant(y);
        let bv2 = g.constant(zero_b_in);
        let back = g.conv2d_transpose(yv, wv, bv2, stride, pad, out_pad_h).unwrap();
        assert_eq!(g.value(back).shape(), x.shape());
        let rhs: f64 = g.value(back).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();

        let denom = lhs.abs().max(rhs.abs()).max(1.0);
        assert!((lhs - rhs).abs() / denom < 1e-10, "adjoint broken: {lhs} vs {rhs}");
    }
}

#[test]
fn conv2d_transpose_gradients_match_finite_differences() {
    let mut rng = Rng::new(53);
    let x = random_tensor(&[1, 2, 3, 3], &mut rng);
    let w = random_tensor(&[2, 1, 3, 3], &mut rng);
    let b = random_tensor(&[1], &mut rng);
    let report = finite_diff_check_multi(
        "conv2d_transpose",
        &[x, w, b],
        |g, vars| {
            let y = g.conv2d_transpose(vars[0], vars[1], vars[2], 2, 1, 1)?;
            let sq = g.power(y, 2.0);
            Ok(g.sum(sq))
        },
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn reductions_and_shape_examples() {
    let mut g = GradGraph::new();
    let x = g.constant(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let m = g.mean(x);
    assert_eq!(g.value(m).item(), 2.5);

    // reshape preserves row-major order
    let seq: Vec<f64> = (0..12).map(|v| v as f64).collect();
    let t = g.constant(Tensor::from_vec(&[2, 6], seq.clone()).unwrap());
    let r = g.reshape(t, &[3, 4]).unwrap();
    assert_eq!(g.value(r).data(), &seq[..]);
    assert!(g.reshape(t, &[5, 2]).is_err());

    // concat along the channel axis
    let a = g.constant(Tensor::filled(&[2, 1, 3, 3], 1.0));
    let b = g.constant(Tensor::filled(&[2, 1, 3, 3], 2.0));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 2, 3, 3]);
    assert_eq!(g.value(c).data()[0..9], [1.0; 9]);
    assert_eq!(g.value(c).data()[9..18], [2.0; 9]);

    let s = g.slice(c, 1, 1, 1).unwrap();
    assert_eq!(g.value(s).shape(), &[2, 1, 3, 3]);
    assert_eq!(g.value(s).data()[..9], [2.0; 9]);
}

#[test]
fn shape_op_gradients_match_finite_differences() {
    let mut rng = Rng::new(59);
    let x = random_tensor(&[2, 2, 2, 3], &mut rng);
    let report = finite_diff_check(
        "shape_pipeline",
        &x,
        |g, v| {
            let r = g.reshape(v, &[4, 6])?;
            let t = g.transpose2(r)?;
            let left = g.slice(t, 0, 0, 3)?;
            let right = g.slice(t, 0, 3, 3)?;
            let cat = g.concat(&[right, left], 0)?;
            let sq = g.power(cat, 2.0);
            Ok(g.mean(sq))
        },
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn backward_fills_ones_for_sum_and_analytic_quadratic() {
    let mut g = GradGraph::new();
    let x = g.leaf(Tensor::from_vec(&[2, 3], vec![0.5; 6]).unwrap().with_grad());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

    // loss = sum(x*x + x) at x=[1,2]: grad = 2x+1 = [3,5]
    let mut g = GradGraph::new();
    let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad());
    let xx = g.mul(x, x).unwrap();
    let total = g.add(xx, x).unwrap();
    let loss = g.sum(total);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0, 5.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = GradGraph::new();
    let x = g.leaf(Tensor::zeros(&[2]).with_grad());
    assert!(g.backward(x).is_err());
}

#[test]
fn backward_twice_doubles_gradients_exactly() {
    let mut rng = Rng::new(61);
    let t = random_tensor(&[3, 3], &mut rng);

    let mut g1 = GradGraph::new();
    let x1 = g1.leaf(t.clone().with_grad());
    let sq1 = g1.power(x1, 2.0);
    let l1 = g1.sum(sq1);
    g1.backward(l1).unwrap();
    let once = g1.grad(x1).unwrap().to_vec();

    let mut g2 = GradGraph::new();
    let x2 = g2.leaf(t.with_grad());
    let sq2 = g2.power(x2, 2.0);
    let l2 = g2.sum(sq2);
    g2.backward(l2).unwrap();
    g2.backward(l2).unwrap();
    let twice = g2.grad(x2).unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn fan_out_gradients_accumulate_additively() {
    // y consumed twice: loss = sum(y) + sum(y) gives grad 2 per element
    let mut g = GradGraph::new();
    let x = g.leaf(Tensor::from_vec(&[2], vec![1.5, -0.5]).unwrap().with_grad());
    let s1 = g.sum(x);
    let s2 = g.sum(x);
    let loss = g.add(s1, s2).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn detach_blocks_gradient_flow() {
    let mut g = GradGraph::new();
    let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad());
    let d = g.detach(x);
    let prod = g.mul(x, d).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    // d(loss)/dx through the detached path is cut: grad = d = [1, 2]
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn bce_with_logits_analytic_values() {
    let mut g = GradGraph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let one = g.constant(Tensor::scalar(1.0));
    let l = g.bce_with_logits(z, one).unwrap();
    assert_close(g.value(l).item(), 2f64.ln(), 1e-15);

    let z20 = g.constant(Tensor::scalar(20.0));
    let l2 = g.bce_with_logits(z20, one).unwrap();
    assert_close(g.value(l2).item(), 2.061e-9, 2e-12);
}

#[test]
fn instance_norm_constant_input_is_zero() {
    let mut g = GradGraph::new();
    let x = g.constant(Tensor::filled(&[2, 3, 4, 4], 0.7));
    let y = g.instance_norm(x, 1e-5).unwrap();
    // the eps floor dominates the zero variance; only mean-rounding noise remains
    assert!(g.value(y).data().iter().all(|&v| v.abs() < 1e-9));
}

#[test]
fn norm_gradients_match_finite_differences() {
    let mut rng = Rng::new(67);
    let x = random_tensor(&[1, 2, 3, 3], &mut rng);
    let report = finite_diff_check(
        "instance_norm",
        &x,
        |g, v| {
            let y = g.instance_norm(v, 1e-5)?;
            let cube = g.power(y, 3.0);
            Ok(g.sum(cube))
        },
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "{report}");

    let x = random_tensor(&[3, 4], &mut rng);
    let gain = random_tensor(&[4], &mut rng);
    let bias = random_tensor(&[4], &mut rng);
    let report = finite_diff_check_multi(
        "layer_norm",
        &[x, gain, bias],
        |g, vars| {
            let y = g.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
            let sq = g.power(y, 2.0);
            Ok(g.sum(sq))
        },
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn layer_norm_standardizes_rows()  {
    let mut rng = Rng::new(71);
    let mut g = GradGraph::new();
    let x = g.constant(random_tensor(&[5, 8], &mut rng));
    let gain = g.constant(Tensor::filled(&[8], 1.0));
    let bias = g.constant(Tensor::zeros(&[8]));
    let y = g.layer_norm(x, gain, bias, 1e-9).unwrap();
    for row in g.value(y).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut rng = Rng::new(73);
    let z = random_tensor(&[3, 3], &mut rng);
    let y = Tensor::from_vec(&[3, 3], (0..9).map(|i| (i % 2) as f64).collect()).unwrap();
    let report = finite_diff_check(
        "bce_with_logits",
        &z,
        |g, v| {
            let t = g.constant(y.clone());
            g.bce_with_logits(v, t)
        },
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}
