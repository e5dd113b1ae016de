use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfa_core::numerics::{conv2d_forward, ConvGeom, Graph, NumericsError, SurrogateSpec, Tensor, Var};

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Weighted-sum loss over the op output, so every output element gets a distinct upstream gradient.
fn loss_of(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let r = g.constant(rand_t(g.shape(out), seed ^ 0x5eed));
    let p = g.mul(out, r).unwrap();
    g.sum(p)
}

fn eval(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let l = loss_of(&mut g, out, seed);
    g.value(l).item()
}

/// Central differences with step 1e-4 against the tape gradient, relative tolerance 1e-3.
fn check_grad(name: &str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let seed = 99;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let l = loss_of(&mut g, out, seed);
    g.backward(l).unwrap();
    let h = 1e-4;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus, f, seed) - eval(&minus, f, seed)) / (2.0 * h);
            let a = analytic.data()[j];
            let tol = 1e-3 * a.abs().max(numeric.abs()) + 1e-6;
            assert!((a - numeric).abs() <= tol, "{name}: input {i} element {j}: analytic {a} numeric {numeric}");
        }
    }
}

#[test]
fn elementwise_gradients() {
    let (a, b) = (rand_t(&[3, 4], 1), rand_t(&[3, 4], 2));
    check_grad("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]).unwrap());
    check_grad("sub", vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]).unwrap());
    check_grad("mul", vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]).unwrap());
    check_grad("scale", vec![a.clone()], &|g, v| g.scale(v[0], -2.5));
    check_grad("add_scalar", vec![a.clone()], &|g, v| g.add_scalar(v[0], 0.7));
    check_grad("gelu", vec![a.clone()], &|g, v| g.gelu(v[0]));
    // keep away from the kink
    let away = a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
    check_grad("relu", vec![away], &|g, v| g.relu(v[0]));
    check_grad("sum", vec![a.clone()], &|g, v| g.sum(v[0]));
    check_grad("mean", vec![a], &|g, v| g.mean(v[0]));
}

#[test]
fn broadcast_gradients() {
    check_grad("add_bias", vec![rand_t(&[2, 3, 4], 3), rand_t(&[4], 4)], &|g, v| g.add_bias(v[0], v[1]).unwrap());
    check_grad("add_broadcast", vec![rand_t(&[2, 3, 4], 5), rand_t(&[3, 4], 6)], &|g, v| {
        g.add_broadcast(v[0], v[1]).unwrap()
    });
}

#[test]
fn matmul_gradients() {
    check_grad("matmul", vec![rand_t(&[3, 4], 7), rand_t(&[4, 2], 8)], &|g, v| g.matmul(v[0], v[1]).unwrap());
    check_grad("bmm", vec![rand_t(&[2, 3, 4], 9), rand_t(&[2, 4, 5], 10)], &|g, v| g.matmul(v[0], v[1]).unwrap());
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    let (a, b) = (rand_t(&[3, 4], 11), rand_t(&[4, 2], 12));
    let mut g = Graph::new();
    let (av, bv) = (g.param(a), g.param(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    let l = g.sum(c);
    g.backward(l).unwrap();
    let ga = g.grad(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expected: f64 = (0..2).map(|j| b.data()[k * 2 + j]).sum();
            assert!((ga.data()[i * 4 + k] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_examples_and_errors() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Tensor::new(&[2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap());
    let p = g.matmul(i, m).unwrap();
    assert_eq!(g.value(p).data(), &[2.0, 3.0, 4.0, 5.0]);
    let r = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let c = g.constant(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
    let p = g.matmul(r, c).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);
    assert!(matches!(g.matmul(r, r), Err(NumericsError::ShapeMismatch { .. })));
}

#[test]
fn conv_gradients() {
    check_grad("conv", vec![rand_t(&[2, 2, 5, 5], 13), rand_t(&[3, 2, 3, 3], 14), rand_t(&[3], 15)], &|g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1).unwrap()
    });
    check_grad("conv stride 2", vec![rand_t(&[1, 2, 6, 6], 16), rand_t(&[4, 2, 3, 3], 17)], &|g, v| {
        g.conv2d(v[0], v[1], None, 2, 1, 1).unwrap()
    });
    check_grad("depthwise", vec![rand_t(&[1, 4, 5, 5], 18), rand_t(&[4, 1, 3, 3], 19)], &|g, v| {
        g.conv2d(v[0], v[1], None, 1, 1, 4).unwrap()
    });
    let center: Arc<[bool]> = (0..25).map(|i| i % 3 != 0).collect::<Vec<_>>().into();
    check_grad("masked conv", vec![rand_t(&[1, 2, 5, 5], 20), rand_t(&[2, 2, 3, 3], 21)], &|g, v| {
        g.conv2d_masked(v[0], v[1], None, 1, 1, 1, center.clone()).unwrap()
    });
}

fn loop_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize, groups: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, cig, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let cog = co / groups;
    let mut out = vec![0.0; n * co * oh * ow];
    for bi in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b[o];
                    for i in 0..cig {
                        let ci = (o / cog) * cig + i;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as i64 - pad as i64;
                                let ix = (xx * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                s += x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * cig + i) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * co + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_loop_oracle() {
    for (stride, pad, groups, cout) in [(1, 1, 1, 3), (2, 1, 1, 2), (1, 0, 2, 4), (1, 1, 2, 2)] {
        let x = rand_t(&[1, 2, 5, 5], 22);
        let w = rand_t(&[cout, 2 / groups, 3, 3], 23);
        let b = rand_t(&[cout], 24);
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad, groups).unwrap();
        let fast = conv2d_forward(x.data(), w.data(), Some(b.data()), &geom, None);
        let slow = loop_conv(&x, &w, b.data(), stride, pad, groups);
        for (a, e) in fast.iter().zip(&slow) {
            assert!((a - e).abs() < 1e-6);
        }
    }
}

#[test]
fn conv_counting_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, None, 1, 1, 1).unwrap();
    assert_eq!(g.value(y).data()[4], 9.0);
    let z = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(rand_t(&[3, 2, 3, 3], 25).cast());
    let b = g.constant(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
    let y = g.conv2d(z, w, Some(b), 1, 1, 1).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        assert_eq!(*v, [0.5, -1.0, 2.0][i / 16]);
    }
    assert!(matches!(g.conv2d(z, w, None, 0, 1, 1), Err(NumericsError::InvalidParameter(_))));
    assert!(matches!(g.conv2d(z, w, None, 1, 3, 1), Err(NumericsError::InvalidParameter(_))));
}

#[test]
fn normalization_gradients() {
    check_grad("batchnorm", vec![rand_t(&[3, 2, 2, 2], 26), rand_t(&[2], 27), rand_t(&[2], 28)], &|g, v| {
        g.batchnorm_train(v[0], v[1], v[2], 1e-5).unwrap().0
    });
    check_grad("channel_affine", vec![rand_t(&[2, 3, 2, 2], 29), rand_t(&[3], 30), rand_t(&[3], 31)], &|g, v| {
        g.channel_affine(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5).unwrap()
    });
    check_grad("layernorm", vec![rand_t(&[2, 3, 5], 32), rand_t(&[5], 33), rand_t(&[5], 34)], &|g, v| {
        g.layernorm(v[0], v[1], v[2], 1e-5).unwrap()
    });
}

#[test]
fn batchnorm_matches_two_pass_oracle() {
    let x = rand_t(&[4, 3, 2, 2], 35);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (gm, bt) = (g.constant(Tensor::ones(&[3])), g.constant(Tensor::zeros(&[3])));
    let (y, mean, var) = g.batchnorm_train(xv, gm, bt, 1e-5).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..4).map(move |s| (n, s))).map(|(n, s)| x.data()[(n * 3 + c) * 4 + s]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
        assert!((mean[c] - m).abs() < 1e-5 && (var[c] - v).abs() < 1e-5);
        for n in 0..4 {
            for s in 0..4 {
                let i = (n * 3 + c) * 4 + s;
                assert!((g.value(y).data()[i] - (x.data()[i] - m) / (v + 1e-5).sqrt()).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn batchnorm_degenerate_cases() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[2, 2, 3, 3], 3.0));
    let (gm, bt) = (g.constant(Tensor::ones(&[2])), g.constant(Tensor::new(&[2], vec![0.25, -0.5]).unwrap()));
    let (y, _, _) = g.batchnorm_train(x, gm, bt, 1e-5).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        assert_eq!(*v, [0.25, -0.5][(i / 9) % 2]);
    }
    let r = rand_t(&[2, 2, 3, 3], 36).cast::<f32>();
    let xr = g.constant(r.clone());
    let zb = g.constant(Tensor::zeros(&[2]));
    let id = g.channel_affine(xr, gm, zb, &[0.0, 0.0], &[1.0, 1.0], 0.0).unwrap();
    assert_eq!(g.value(id), &r);
    let wrong = g.constant(Tensor::ones(&[3]));
    assert!(g.batchnorm_train(x, wrong, bt, 1e-5).is_err());
}

#[test]
fn shape_op_gradients() {
    check_grad("reshape", vec![rand_t(&[2, 6], 37)], &|g, v| g.reshape(v[0], &[3, 4]).unwrap());
    check_grad("permute", vec![rand_t(&[2, 3, 4], 38)], &|g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
    check_grad("mean_spatial", vec![rand_t(&[2, 3, 2, 3], 39)], &|g, v| g.mean_spatial(v[0]).unwrap());
    let mask: Arc<[bool]> = vec![true, false, true, true, false, true, true, true].into();
    check_grad("spatial_mask", vec![rand_t(&[2, 2, 2, 2], 40)], &|g, v| g.spatial_mask(v[0], mask.clone()).unwrap());
    let rows: Arc<[bool]> = vec![false, true, true, false, false, true].into();
    check_grad("replace_rows", vec![rand_t(&[2, 3, 4], 41), rand_t(&[4], 42)], &|g, v| {
        g.replace_rows(v[0], v[1], rows.clone()).unwrap()
    });
}

#[test]
fn softmax_and_cross_entropy_gradients() {
    check_grad("softmax", vec![rand_t(&[3, 5], 43)], &|g, v| g.softmax(v[0]));
    check_grad("cross_entropy", vec![rand_t(&[4, 3], 44)], &|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap());
}

#[test]
fn linear_attention_gradients() {
    check_grad("linear_attention", vec![rand_t(&[2, 4, 3], 45), rand_t(&[2, 4, 3], 46), rand_t(&[2, 6, 3], 47)], &|g, v| {
        g.linear_attention(v[0], v[1], v[2], 2).unwrap()
    });
}

#[test]
fn surrogate_window_is_closed_interval() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(&[5], vec![-1.0, 0.0, 2.0, 4.0, 4.5]).unwrap());
    let y = g.custom_grad(x, |v| v.round(), SurrogateSpec::for_cap(4));
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
    assert!(SurrogateSpec::rectangular(1.0, 1.0).is_err());
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::ones(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn graphs_are_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.param(rand_t(&[2, 3, 4, 4], 48).cast());
        let w = g.param(rand_t(&[3, 3, 3, 3], 49).cast());
        let y = g.conv2d(x, w, None, 1, 1, 1).unwrap();
        let z = g.gelu(y);
        let l = g.mean(z);
        g.backward(l).unwrap();
        (g.value(l).clone(), g.grad(w).unwrap())
    };
    assert_eq!(run(), run());
}

fn unary(g: &mut Graph<f64>, op: usize, x: Var) -> Var {
    match op {
        0 => g.gelu(x),
        1 => g.softmax(x),
        2 => g.scale(x, 1.7),
        3 => {
            let c = g.constant(rand_t(g.shape(x), 50));
            g.mul(x, c).unwrap()
        }
        4 => g.permute(x, &[1, 0]).unwrap(),
        _ => {
            let w = g.constant(rand_t(&[*g.shape(x).last().unwrap(), 4], 51));
            g.matmul(x, w).unwrap()
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn two_op_chains_follow_chain_rule(a in 0usize..6, b in 0usize..6, seed in 0u64..1000) {
        check_grad("chain", vec![rand_t(&[4, 4], seed)], &|g, v| {
            let y = unary(g, a, v[0]);
            unary(g, b, y)
        });
    }
}
