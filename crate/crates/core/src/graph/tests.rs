use super::*;
use crate::gradcheck::{check_gradients, weighted_sum};
use crate::rng::Rng;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand64(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    rng.uniform_tensor(shape, -1.0, 1.0).unwrap()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: Padding2d,
    groups: usize,
) -> Tensor<f64> {
    let (b, _, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + pad.top + pad.bottom - kh) / stride + 1;
    let wo = (wd + pad.left + pad.right - kw) / stride + 1;
    let og = cout / groups;
    let mut out = Tensor::zeros([b, cout, ho, wo]).unwrap();
    for n in 0..b {
        for co in 0..cout {
            let grp = co / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bb| bb.data()[co]);
                    for ci in 0..cg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad.top as isize;
                                let ix = (ox * stride + kx) as isize - pad.left as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.get(&[n, grp * cg + ci, iy as usize, ix as usize]).unwrap();
                                acc += xv * w.get(&[co, ci, ky, kx]).unwrap();
                            }
                        }
                    }
                    let idx = out.linear_index(&[n, co, oy, ox]).unwrap();
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_scalar() {
    let mut g = Graph::<f64>::new();
    let m = t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let i = g.constant(Tensor::eye(3).unwrap()).unwrap();
    let mv = g.constant(m.clone()).unwrap();
    let p = g.matmul(i, mv).unwrap();
    assert_eq!(g.value(p), &m);

    let a = g.constant(t64(&[1, 1], &[2.0])).unwrap();
    let b = g.constant(t64(&[1, 1], &[3.0])).unwrap();
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).data(), &[6.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(5);
    let a = rand64(&mut rng, &[4, 5]);
    let b = rand64(&mut rng, &[5, 3]);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let p = g.matmul(av, bv).unwrap();
    let oracle = naive_matmul(&a, &b);
    for (x, y) in g.value(p).data().iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_batched_and_shared_rhs() {
    let mut rng = Rng::new(6);
    let a = rand64(&mut rng, &[2, 3, 4]);
    let b = rand64(&mut rng, &[4, 2]);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let p = g.matmul(av, bv).unwrap();
    assert_eq!(g.shape(p), &[2, 3, 2]);
    for i in 0..2 {
        let ai = Tensor::new([3, 4], a.data()[i * 12..][..12].to_vec()).unwrap();
        let oracle = naive_matmul(&ai, &b);
        for (x, y) in g.value(p).data()[i * 6..][..6].iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_extent_mismatch() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]).unwrap()).unwrap();
    let b = g.constant(Tensor::zeros([2, 3]).unwrap()).unwrap();
    assert!(matches!(g.matmul(a, b), Err(Error::InvalidShape(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[1, 4], &[0.3; 4])).unwrap();
    let s = g.softmax(x).unwrap();
    assert!(g.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = g.constant(t64(&[2], &[0.0, 3f64.ln()])).unwrap();
    let s = g.softmax(x).unwrap();
    let d = g.value(s).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_shift_invariance_and_row_sums() {
    let mut rng = Rng::new(9);
    let x = rand64(&mut rng, &[5, 7]).map(|v| v * 20.0);
    let mut g = Graph::new();
    let a = g.constant(x.clone()).unwrap();
    let b = g.constant(x.map(|v| v + 123.0)).unwrap();
    let sa = g.softmax(a).unwrap();
    let sb = g.softmax(b).unwrap();
    assert!(g.value(sa).max_abs_diff(g.value(sb)).unwrap() <= 1e-7);
    for row in g.value(sa).data().chunks(7) {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn softmax_nan_flagged_in_validation_mode() {
    let mut g = Graph::<f64>::new().with_validation(true);
    let x = g.constant(t64(&[3], &[0.0, f64::NAN, 1.0])).unwrap();
    assert!(matches!(g.softmax(x), Err(Error::NonFinite { op: "softmax" })));

    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[3], &[0.0, f64::NAN, 1.0])).unwrap();
    let s = g.softmax(x).unwrap();
    assert!(g.value(s).data().iter().all(|v| v.is_nan()));
}

#[test]
fn pointwise_conv_matches_per_pixel_matmul() {
    let mut rng = Rng::new(3);
    let x = rand64(&mut rng, &[2, 3, 4, 5]);
    let w = rand64(&mut rng, &[6, 3, 1, 1]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap());
    let y = g.conv2d(xv, wv, None, Conv2dSpec::default()).unwrap();
    let w2 = w.clone().reshape([6, 3]).unwrap();
    for b in 0..2 {
        for p in 0..20 {
            let pix = Tensor::from_fn([3, 1], |c| x.data()[(b * 3 + c) * 20 + p]).unwrap();
            let o = naive_matmul(&w2, &pix);
            for co in 0..6 {
                let got = g.value(y).data()[(b * 6 + co) * 20 + p];
                assert!((got - o[co]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn depthwise_identity_kernel() {
    let mut rng = Rng::new(4);
    let x = rand64(&mut rng, &[1, 4, 5, 5]);
    let w = Tensor::from_fn([4, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 }).unwrap();
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()).unwrap(), g.constant(w).unwrap());
    let y = g
        .conv2d(xv, wv, None, Conv2dSpec::new(1, Padding2d::uniform(1), 4))
        .unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn strided_conv_shape() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones([1, 1, 4, 4]).unwrap()).unwrap();
    let w = g.constant(Tensor::ones([1, 1, 2, 2]).unwrap()).unwrap();
    let y = g.conv2d(x, w, None, Conv2dSpec::new(2, Padding2d::none(), 1)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[4.0; 4]);
}

#[test]
fn conv_group_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones([1, 3, 4, 4]).unwrap()).unwrap();
    let w = g.constant(Tensor::ones([4, 1, 3, 3]).unwrap()).unwrap();
    let r = g.conv2d(x, w, None, Conv2dSpec::new(1, Padding2d::uniform(1), 2));
    assert!(matches!(r, Err(Error::InvalidConfig(_))));
}

#[test]
fn conv_matches_seven_loop_oracle() {
    let mut rng = Rng::new(12);
    // (cin, cout, k, stride, padding, groups, h, w)
    let cases = [
        (3, 4, 3, 1, Padding2d::uniform(1), 1, 5, 6),
        (4, 6, 3, 2, Padding2d::uniform(1), 2, 6, 6),
        (4, 4, 5, 1, Padding2d::uniform(2), 4, 6, 5),
        (4, 4, 2, 1, Padding2d::split(0, 1), 4, 4, 4),
        (3, 5, 2, 2, Padding2d::none(), 1, 6, 4),
        (2, 2, 1, 1, Padding2d::none(), 1, 3, 3),
    ];
    for (cin, cout, k, stride, pad, groups, h, w) in cases {
        let x = rand64(&mut rng, &[2, cin, h, w]);
        let wt = rand64(&mut rng, &[cout, cin / groups, k, k]);
        let b = rand64(&mut rng, &[cout]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()).unwrap(),
            g.constant(wt.clone()).unwrap(),
            g.constant(b.clone()).unwrap(),
        );
        let y = g
            .conv2d(xv, wv, Some(bv), Conv2dSpec::new(stride, pad, groups))
            .unwrap();
        let oracle = naive_conv(&x, &wt, Some(&b), stride, pad, groups);
        assert_eq!(g.shape(y), oracle.shape());
        assert!(g.value(y).max_abs_diff(&oracle).unwrap() < 1e-10);
    }
}

#[test]
fn batchnorm_eval_identity_and_constant_channel() {
    let mut rng = Rng::new(2);
    let x = rand64(&mut rng, &[2, 3, 2, 2]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let gamma = g.constant(Tensor::ones([3]).unwrap()).unwrap();
    let beta = g.constant(Tensor::zeros([3]).unwrap()).unwrap();
    let (mean, var) = (vec![0.0; 3], vec![1.0; 3]);
    let (y, stats) = g
        .batch_norm(xv, gamma, beta, BnMode::Eval { mean: &mean, var: &var }, 1e-5)
        .unwrap();
    assert!(stats.is_none());
    assert!(g.value(y).max_abs_diff(&x).unwrap() < 1e-5);

    let c = Tensor::full([2, 3, 2, 2], 4.5).unwrap();
    let cv = g.constant(c).unwrap();
    let beta2 = g.constant(t64(&[3], &[0.1, 0.2, 0.3])).unwrap();
    let (y, _) = g.batch_norm(cv, gamma, beta2, BnMode::Train, 1e-5).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        let expect = [0.1, 0.2, 0.3][(i / 4) % 3];
        assert!((v - expect).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_train_statistics() {
    let mut rng = Rng::new(8);
    let x = rand64(&mut rng, &[3, 2, 4, 4]).map(|v| 3.0 * v + 1.5);
    let mut g = Graph::new();
    let xv = g.constant(x).unwrap();
    let gamma = g.constant(Tensor::ones([2]).unwrap()).unwrap();
    let beta = g.constant(Tensor::zeros([2]).unwrap()).unwrap();
    let (y, stats) = g.batch_norm(xv, gamma, beta, BnMode::Train, 1e-5).unwrap();
    assert!(stats.is_some());
    let d = g.value(y).data();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|b| d[(b * 2 + c) * 16..][..16].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-4);
    }
}

#[test]
fn batchnorm_degenerate_batch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones([1, 2, 1, 1]).unwrap()).unwrap();
    let gamma = g.constant(Tensor::ones([2]).unwrap()).unwrap();
    let beta = g.constant(Tensor::zeros([2]).unwrap()).unwrap();
    let r = g.batch_norm(x, gamma, beta, BnMode::Train, 1e-5);
    assert!(matches!(r, Err(Error::DegenerateBatch(1))));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros([1]).unwrap()).unwrap();
    let y = g.gelu(z).unwrap();
    assert_eq!(g.value(y).data(), &[0.0]);

    let mut rng = Rng::new(1);
    let x = rand64(&mut rng, &[2, 3]);
    let xv = g.constant(x.clone()).unwrap();
    let zeros = g.constant(Tensor::zeros([2, 3]).unwrap()).unwrap();
    let s = g.add(xv, zeros).unwrap();
    assert_eq!(g.value(s), &x);

    let c = g.constant(Tensor::full([2, 3, 4, 4], 1.25).unwrap()).unwrap();
    let p = g.mean_pool_hw(c).unwrap();
    assert_eq!(g.value(p).data(), &[1.25; 6]);

    let bad = g.constant(Tensor::zeros([4]).unwrap()).unwrap();
    assert!(matches!(g.add(xv, bad), Err(Error::InvalidShape(_))));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_fn([2, 3], |i| i as f64).unwrap(), true).unwrap();
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_matmul_closed_form() {
    let mut rng = Rng::new(10);
    let a = rand64(&mut rng, &[3, 4]);
    let b = rand64(&mut rng, &[4, 2]);
    let mut g = Graph::new();
    let av = g.input(a.clone(), true).unwrap();
    let bv = g.input(b.clone(), true).unwrap();
    let p = g.matmul(av, bv).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    // d/dA = ones(3x2) B^T: row i of dA is the row sums of B
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|j| b.data()[k * 2 + j]).sum();
            assert!((grads.get(av).unwrap().data()[i * 4 + k] - expect).abs() < 1e-10);
        }
    }
    // d/dB = A^T ones(3x2): entry (k, j) is the column sum of A
    for k in 0..4 {
        let expect: f64 = (0..3).map(|i| a.data()[i * 4 + k]).sum();
        for j in 0..2 {
            assert!((grads.get(bv).unwrap().data()[k * 2 + j] - expect).abs() < 1e-10);
        }
    }
}

#[test]
fn backward_needs_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::ones([2]).unwrap(), true).unwrap();
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(Error::InvalidCall(_))));
}

#[test]
fn shared_param_binds_once() {
    let p = Param::new("w", Tensor::<f64>::ones([2]).unwrap());
    let mut g = Graph::new();
    let a = g.param(&p).unwrap();
    let b = g.param(&p).unwrap();
    assert_eq!(a, b);
    let s = g.mul(a, b).unwrap();
    let l = g.sum(s).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.by_name("w").unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn inference_graph_tracks_nothing() {
    let p = Param::new("w", Tensor::<f64>::ones([2]).unwrap());
    let mut g = Graph::inference();
    let a = g.param(&p).unwrap();
    assert!(!g.requires_grad(a));
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn assert_check(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let report = check_gradients(inputs, H, f).unwrap();
    assert!(report.passes(TOL), "{name}: {report:?}");
}

#[test]
fn gradcheck_elementwise_and_reductions() {
    let mut rng = Rng::new(21);
    let x = rand64(&mut rng, &[2, 3, 4]);
    let y = rand64(&mut rng, &[3, 1]);
    let r = rand64(&mut rng, &[2, 3, 4]);
    assert_check("add+mul broadcast", &[x.clone(), y.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        let m = g.mul(s, v[1])?;
        weighted_sum(g, m, &r)
    });
    assert_check("gelu", std::slice::from_ref(&x), |g, v| {
        let a = g.gelu(v[0])?;
        weighted_sum(g, a, &r)
    });
    assert_check("softmax", std::slice::from_ref(&x), |g, v| {
        let a = g.softmax(v[0])?;
        weighted_sum(g, a, &r)
    });
    assert_check("scale+reshape_permute", std::slice::from_ref(&x), |g, v| {
        let a = g.scale(v[0], 0.7)?;
        let p = g.reshape_permute(a, &[6, 4], &[1, 0])?;
        let p = g.reshape(p, &[2, 3, 4])?;
        weighted_sum(g, p, &r)
    });
    let fm = rand64(&mut rng, &[2, 3, 2, 2]);
    let rp = rand64(&mut rng, &[2, 3]);
    assert_check("mean_pool_hw", &[fm], |g, v| {
        let p = g.mean_pool_hw(v[0])?;
        weighted_sum(g, p, &rp)
    });
}

#[test]
fn gradcheck_matmul_variants() {
    let mut rng = Rng::new(22);
    let a = rand64(&mut rng, &[3, 4, 5]);
    let b = rand64(&mut rng, &[3, 5, 2]);
    let b2 = rand64(&mut rng, &[5, 2]);
    let r = rand64(&mut rng, &[3, 4, 2]);
    assert_check("batched", &[a.clone(), b], |g, v| {
        let p = g.matmul(v[0], v[1])?;
        weighted_sum(g, p, &r)
    });
    assert_check("shared rhs", &[a, b2], |g, v| {
        let p = g.matmul(v[0], v[1])?;
        weighted_sum(g, p, &r)
    });
}

#[test]
fn gradcheck_convolutions() {
    let mut rng = Rng::new(23);
    let cases = [
        (3, 4, 3, 1, Padding2d::uniform(1), 1),
        (4, 4, 3, 2, Padding2d::uniform(1), 2),
        (4, 4, 3, 1, Padding2d::uniform(1), 4),
        (2, 2, 2, 1, Padding2d::split(0, 1), 2),
        (3, 5, 1, 1, Padding2d::none(), 1),
        (2, 3, 2, 2, Padding2d::none(), 1),
    ];
    for (cin, cout, k, stride, pad, groups) in cases {
        let x = rand64(&mut rng, &[2, cin, 4, 4]);
        let w = rand64(&mut rng, &[cout, cin / groups, k, k]);
        let b = rand64(&mut rng, &[cout]);
        let spec = Conv2dSpec::new(stride, pad, groups);
        let out_shape = {
            let mut g = Graph::new();
            let (xv, wv) = (g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap());
            let y = g.conv2d(xv, wv, None, spec).unwrap();
            g.shape(y).to_vec()
        };
        let r = rand64(&mut rng, &out_shape);
        assert_check("conv2d", &[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
            weighted_sum(g, y, &r)
        });
    }
}

#[test]
fn gradcheck_batchnorm_both_modes() {
    let mut rng = Rng::new(24);
    let x = rand64(&mut rng, &[2, 3, 3, 2]);
    let gamma = rand64(&mut rng, &[3]);
    let beta = rand64(&mut rng, &[3]);
    let r = rand64(&mut rng, &[2, 3, 3, 2]);
    assert_check("bn train", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Train, 1e-5)?;
        weighted_sum(g, y, &r)
    });
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 2.0];
    assert_check("bn eval", &[x, gamma, beta], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var }, 1e-5)?;
        weighted_sum(g, y, &r)
    });
}

#[test]
fn gradcheck_cross_entropy() {
    let mut rng = Rng::new(25);
    let logits = rand64(&mut rng, &[4, 5]);
    assert_check("cross entropy", &[logits], |g, v| g.cross_entropy(v[0], &[0, 3, 4, 1]));
}

#[test]
fn cross_entropy_value() {
    let mut g = Graph::<f64>::new();
    let l = g.constant(t64(&[1, 2], &[0.0, 3f64.ln()])).unwrap();
    let loss = g.cross_entropy(l, &[1]).unwrap();
    assert!((g.value(loss).data()[0] + 0.75f64.ln()).abs() < 1e-15);
}
