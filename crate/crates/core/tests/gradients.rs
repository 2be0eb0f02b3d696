//! Reverse-mode gradients of every differentiable op against central
//! differences in f64.

use ccloss::ccloss::{cc_loss_graph, gram_distance, CcLossParams};
use ccloss::nn::{Backbone, BackboneKind, InputShape, ModelConfig, ModelParams};
use ccloss::rng::{stream_rng, Stream};
use ccloss::tensor::{finite_diff_check, GradCheckReport, Graph, Tensor, TensorError, Var};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(w * y)` for a fixed random `w`, so every output entry gets a
/// distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = StdRng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y));
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum(p, None)
}

fn check(name: &str, params: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>) {
    let r = finite_diff_check(f, params, H).unwrap();
    assert!(!r.skipped, "{name}: sample point too close to a kink ({})", r.kink_margin);
    assert!(r.max_rel_error <= TOL, "{name}: max relative error {} > {TOL}", r.max_rel_error);
}

#[test]
fn matmul_and_transpose() {
    let mut rng = StdRng::seed_from_u64(1);
    let ps = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 5])];
    check("matmul", &ps, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 11)
    });
    check("transpose", &ps[..1], |g, v| {
        let y = g.transpose(v[0])?;
        project(g, y, 12)
    });
}

#[test]
fn binary_elementwise_same_shape() {
    let mut rng = StdRng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = off_zero(&mut rng, &[3, 4]);
    let ps = [a, b];
    check("add", &ps, |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 21)
    });
    check("sub", &ps, |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y, 22)
    });
    check("mul", &ps, |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 23)
    });
    check("div", &ps, |g, v| {
        let y = g.div(v[0], v[1])?;
        project(g, y, 24)
    });
}

#[test]
fn binary_elementwise_row_broadcast() {
    let mut rng = StdRng::seed_from_u64(3);
    let ps = [rand_tensor(&mut rng, &[4, 3]), off_zero(&mut rng, &[3])];
    check("add broadcast", &ps, |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 31)
    });
    check("sub broadcast", &ps, |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y, 32)
    });
    check("mul broadcast", &ps, |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 33)
    });
    check("div broadcast", &ps, |g, v| {
        let y = g.div(v[0], v[1])?;
        project(g, y, 34)
    });
}

#[test]
fn unary_elementwise() {
    let mut rng = StdRng::seed_from_u64(4);
    let ps = [off_zero(&mut rng, &[4, 5])];
    check("relu", &ps, |g, v| {
        let y = g.relu(v[0])?;
        project(g, y, 41)
    });
    check("sigmoid", &ps, |g, v| {
        let y = g.sigmoid(v[0])?;
        project(g, y, 42)
    });
    check("square", &ps, |g, v| {
        let y = g.square(v[0])?;
        project(g, y, 43)
    });
    check("scale", &ps, |g, v| {
        let y = g.scale(v[0], -2.5)?;
        project(g, y, 44)
    });
    check("add_scalar", &ps, |g, v| {
        let y = g.add_scalar(v[0], 0.75)?;
        project(g, y, 45)
    });
    check("clamp_min_zero", &ps, |g, v| {
        let y = g.clamp_min_zero(v[0])?;
        project(g, y, 46)
    });
}

#[test]
fn reductions_over_each_axis() {
    let mut rng = StdRng::seed_from_u64(5);
    let ps = [rand_tensor(&mut rng, &[3, 4])];
    for axis in [None, Some(0), Some(1)] {
        check("sum", &ps, |g, v| {
            let y = g.sum(v[0], axis)?;
            project(g, y, 51)
        });
        check("mean", &ps, |g, v| {
            let y = g.mean(v[0], axis)?;
            project(g, y, 52)
        });
        check("max", &ps, |g, v| {
            let y = g.max(v[0], axis)?;
            project(g, y, 53)
        });
    }
}

#[test]
fn shape_ops() {
    let mut rng = StdRng::seed_from_u64(6);
    check("expand_cols", &[rand_tensor(&mut rng, &[4])], |g, v| {
        let y = g.expand_cols(v[0], 3)?;
        project(g, y, 61)
    });
    check("reshape", &[rand_tensor(&mut rng, &[2, 6])], |g, v| {
        let y = g.reshape(v[0], &[3, 4])?;
        project(g, y, 62)
    });
}

#[test]
fn softmax_cross_entropy() {
    let mut rng = StdRng::seed_from_u64(7);
    let ps = [rand_tensor(&mut rng, &[5, 4])];
    check("softmax_ce", &ps, |g, v| g.softmax_ce(v[0], &[0, 3, 1, 1, 2]));
}

#[test]
fn convolution_and_pooling() {
    let mut rng = StdRng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 2, 5, 4]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    check("conv3x3", &[x.clone(), w, b], |g, v| {
        let y = g.conv3x3(v[0], v[1], v[2])?;
        project(g, y, 81)
    });
    check("max_pool2x2", &[x.clone()], |g, v| {
        let y = g.max_pool2x2(v[0])?;
        project(g, y, 82)
    });
    check("global_avg_pool", &[x], |g, v| {
        let y = g.global_avg_pool(v[0])?;
        project(g, y, 83)
    });
}

#[test]
fn gram_distance_matrix() {
    let mut rng = StdRng::seed_from_u64(9);
    // distinct rows keep every off-diagonal distance well above the clamp
    let ps = [rand_tensor(&mut rng, &[4, 3])];
    check("gram_distance", &ps, |g, v| {
        let d = gram_distance(g, v[0])?;
        project(g, d, 91)
    });
}

#[test]
fn broadcast_and_reduce_are_adjoint() {
    // <broadcast(v), M> = <v, sum_rows(M)>: the gradient of a broadcast
    // vector is the column sum of the upstream gradient
    let mut rng = StdRng::seed_from_u64(10);
    let m = rand_tensor(&mut rng, &[5, 3]);
    let v = rand_tensor(&mut rng, &[3]);
    let mut g = Graph::new();
    let zero = g.constant(Tensor::zeros(&[5, 3]));
    let vv = g.param(&v);
    let mv = g.constant(m.clone());
    let b = g.add(zero, vv).unwrap();
    let p = g.mul(b, mv).unwrap();
    let s = g.sum(p, None).unwrap();
    g.backward(s).unwrap();
    let grad = g.grad(vv).unwrap();
    for j in 0..3 {
        let col: f64 = (0..5).map(|i| m.at2(i, j)).sum();
        assert!((grad.data()[j] - col).abs() < 1e-12);
    }

    // and the gradient of a row sum is the upstream value broadcast back
    let mut g = Graph::new();
    let mv = g.param(&m);
    let rs = g.sum(mv, Some(1)).unwrap();
    let w5 = g.constant(Tensor::vector(&[1.0, -2.0, 0.5, 3.0, -1.0]));
    let p = g.mul(rs, w5).unwrap();
    let wsum = g.sum(p, None).unwrap();
    g.backward(wsum).unwrap();
    let grad = g.grad(mv).unwrap();
    let w5 = [1.0, -2.0, 0.5, 3.0, -1.0];
    for i in 0..5 {
        for j in 0..3 {
            assert_eq!(grad.at2(i, j), w5[i]);
        }
    }
}

fn toy_model(backbone: BackboneKind) -> ModelParams<f64> {
    let input = match backbone {
        BackboneKind::Mlp => InputShape { channels: 1, height: 1, width: 6 },
        BackboneKind::TinyCnn => InputShape { channels: 1, height: 4, width: 4 },
    };
    let cfg = ModelConfig { backbone, input, hidden_dim: 8, classes: 3, mlp_widths: vec![8] };
    let mut model = ModelParams::init(&cfg, &mut stream_rng(3, Stream::Init, 0)).unwrap();
    if let Backbone::TinyCnn { conv1, conv2 } = &mut model.backbone {
        // positive pre-activations avoid exact pooling ties between zeros
        conv1.bias = Tensor::filled(&[conv1.bias.numel()], 3.0);
        conv2.bias = Tensor::filled(&[conv2.bias.numel()], 3.0);
        // and small attention weights keep the sigmoid out of saturation
        for w in model.cam.fc_reduce.weight.data_mut() {
            *w *= 0.05;
        }
    }
    model
}

/// Gradient check of the full loss at the first input draw that sits clear
/// of every kink.
fn full_loss_check(model: &ModelParams<f64>, lambda: f64) -> GradCheckReport {
    let params: Vec<Tensor<f64>> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let labels = [0usize, 1, 0, 2];
    let inp = model.config.input;
    let mut rng = StdRng::seed_from_u64(77);
    let mut last = None;
    for _ in 0..32 {
        let x = rand_tensor(&mut rng, &[4, inp.channels, inp.height, inp.width]);
        let r = finite_diff_check(
            |g, vs| {
                let vars = model.vars_from(vs).unwrap();
                let xv = g.constant(x.clone());
                let out = model.forward_cam(g, &vars, xv).unwrap();
                Ok(cc_loss_graph(g, out.logits, out.attention, &labels, CcLossParams { lambda, epsilon: 1e-6 })?.total)
            },
            &params,
            H,
        )
        .unwrap();
        if !r.skipped {
            return r;
        }
        last = Some(r);
    }
    last.unwrap()
}

#[test]
fn full_cc_loss_through_mlp_model() {
    let model = toy_model(BackboneKind::Mlp);
    for lambda in [0.0, 1.0, 2.0] {
        let r = full_loss_check(&model, lambda);
        assert!(r.passes(1e-4), "lambda {lambda}: {r:?}");
    }
}

#[test]
fn full_cc_loss_through_tiny_cnn() {
    let r = full_loss_check(&toy_model(BackboneKind::TinyCnn), 1.0);
    assert!(r.passes(1e-4), "{r:?}");
}
