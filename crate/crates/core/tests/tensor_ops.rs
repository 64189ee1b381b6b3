use comer::tensor::gradcheck;
use comer::tensor::{probe, Graph, Mask, NormState, Tensor};
use comer::Error;
use proptest::prelude::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::eval();
    let id = g.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
    let m = g.constant(&t(&[2, 2], &[3., 4., 5., 6.]));
    let p = g.matmul(id, m).unwrap();
    assert_eq!(g.value(p), &[3., 4., 5., 6.]);

    let row = g.constant(&t(&[1, 2], &[1., 2.]));
    let col = g.constant(&t(&[2, 1], &[3., 4.]));
    let d = g.matmul(row, col).unwrap();
    assert_eq!(g.value(d), &[11.0]);

    let z = g.constant(&Tensor::zeros(vec![3, 2]));
    let r = g.matmul(z, m).unwrap();
    assert!(g.value(r).iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::eval();
    let a = g.constant(&Tensor::zeros(vec![2, 3]));
    let b = g.constant(&Tensor::zeros(vec![4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn batched_matmul_matches_per_item() {
    let a = t(&[2, 2, 3], &(0..12).map(|x| x as f64 * 0.3 - 1.0).collect::<Vec<_>>());
    let b = t(&[2, 3, 2], &(0..12).map(|x| (x as f64).cos()).collect::<Vec<_>>());
    let mut g = Graph::<f64>::eval();
    let (av, bv) = (g.constant(&a), g.constant(&b));
    let c = g.matmul(av, bv).unwrap();
    for bi in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                let naive: f64 = (0..3).map(|p| a.at(&[bi, i, p]) * b.at(&[bi, p, j])).sum();
                assert!((g.tensor(c).at(&[bi, i, j]) - naive).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::eval();
    let x = g.constant(&t(&[4], &[0.; 4]));
    let y = g.softmax(x, -1).unwrap();
    close(g.value(y), &[0.25; 4], 1e-12);

    let mut g32 = Graph::<f32>::eval();
    let big = g32.constant(&Tensor::from_f64(vec![2], &[1000.0, 1000.0]).unwrap());
    let y = g32.softmax(big, 0).unwrap();
    assert_eq!(g32.value(y), &[0.5, 0.5]);

    let x = g.constant(&t(&[2], &[0.0, 3f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    close(g.value(y), &[0.25, 0.75], 1e-12);
}

#[test]
fn softmax_masked_positions_are_exact_zero() {
    let mut g = Graph::<f32>::eval();
    let x = g.constant(&Tensor::from_f64(vec![2, 3], &[0.3, 1.0, -2.0, 5.0, 0.0, 0.1]).unwrap());
    let mask = Mask::new(vec![1, 3], vec![true, false, true]).unwrap();
    let xm = g.masked_fill(x, &mask).unwrap();
    let y = g.softmax(xm, -1).unwrap();
    let v = g.value(y);
    assert_eq!(v[1], 0.0);
    assert_eq!(v[4], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-6);

    let none = Mask::new(vec![1, 3], vec![false; 3]).unwrap();
    let xm = g.masked_fill(x, &none).unwrap();
    assert!(matches!(g.softmax(xm, -1), Err(Error::DegenerateSlice)));
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64]) -> Vec<f64> {
    let (n, h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, co) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let mut out = vec![0.0; n * h * w * co];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for o in 0..co {
                    let mut s = bias[o];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = y as isize + ky as isize - (kh / 2) as isize;
                            let ix = xx as isize + kx as isize - (kw / 2) as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..ci {
                                s += x.at(&[b, iy as usize, ix as usize, c]) * k.at(&[ky, kx, c, o]);
                            }
                        }
                    }
                    out[((b * h + y) * w + xx) * co + o] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::<f64>::eval();
    let img = t(&[1, 2, 3, 1], &[1., 2., 3., 4., 5., 6.]);
    let x = g.constant(&img);
    let one = g.constant(&t(&[1, 1, 1, 1], &[1.0]));
    let zero_b = g.constant(&t(&[1], &[0.0]));
    let y = g.conv2d(x, one, Some(zero_b), 1, false).unwrap();
    assert_eq!(g.value(y), img.data());

    let ones = g.constant(&Tensor::full(vec![1, 3, 3, 1], 1.0));
    let k = g.constant(&Tensor::full(vec![3, 3, 1, 1], 1.0));
    let y = g.conv2d(ones, k, Some(zero_b), 1, false).unwrap();
    let out = g.tensor(y);
    assert_eq!(out.at(&[0, 1, 1, 0]), 9.0);
    assert_eq!(out.at(&[0, 0, 0, 0]), 4.0);
    assert_eq!(out.data(), naive_conv(&Tensor::full(vec![1, 3, 3, 1], 1.0), &Tensor::full(vec![3, 3, 1, 1], 1.0), &[0.0]).as_slice());

    let zk = g.constant(&Tensor::zeros(vec![3, 3, 1, 1]));
    let half = g.constant(&t(&[1], &[0.5]));
    let y = g.conv2d(x, zk, Some(half), 1, false).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.5));

    let bad = g.constant(&Tensor::zeros(vec![3, 3, 2, 1]));
    assert!(matches!(g.conv2d(x, bad, None, 1, false), Err(Error::Dimension { .. })));
}

#[test]
fn strided_conv_halves_with_ceiling() {
    let mut g = Graph::<f32>::eval();
    let x = g.constant(&Tensor::full(vec![1, 7, 10, 2], 1.0));
    let k = g.constant(&Tensor::full(vec![3, 3, 2, 4], 0.1));
    let y = g.conv2d(x, k, None, 2, false).unwrap();
    assert_eq!(g.shape(y), &[1, 4, 5, 4]);
}

#[test]
fn cumsum_exclusive_examples() {
    let mut g = Graph::<f64>::eval();
    let x = g.constant(&t(&[1, 2], &[3.0, -1.0]));
    let y = g.cumsum_exclusive(x, 0).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0]);

    let x = g.constant(&t(&[3, 2], &[0.2, 0.8, 0.5, 0.5, 1.0, 0.0]));
    let y = g.cumsum_exclusive(x, 0).unwrap();
    // naive loop oracle
    let rows = [[0.2, 0.8], [0.5, 0.5], [1.0, 0.0]];
    let mut expect = vec![];
    for tt in 0..3 {
        for c in 0..2 {
            expect.push((0..tt).map(|s| rows[s][c]).sum::<f64>());
        }
    }
    close(g.value(y), &expect, 1e-12);
    close(&expect, &[0., 0., 0.2, 0.8, 0.7, 1.3], 1e-12);

    let z = g.constant(&Tensor::zeros(vec![4, 3]));
    let y = g.cumsum_exclusive(z, 0).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn batchnorm_examples() {
    let state = NormState::<f64>::standard(1);
    let mut g = Graph::<f64>::new(true, 0);
    let gamma = g.constant(&t(&[1], &[1.0]));
    let beta = g.constant(&t(&[1], &[0.0]));
    let zeros = g.constant(&Tensor::zeros(vec![4, 1]));
    let y = g.batchnorm(zeros, gamma, beta, &state, None).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    let x = g.constant(&t(&[2, 1], &[1.0, 3.0]));
    let y = g.batchnorm(x, gamma, beta, &state, None).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    close(g.value(y), &[-expect, expect], 1e-12);
    assert!(g.value(y)[1] < 1.0);

    let g0 = g.constant(&t(&[1], &[0.0]));
    let b7 = g.constant(&t(&[1], &[7.0]));
    let y = g.batchnorm(x, g0, b7, &state, None).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 7.0));
}

#[test]
fn batchnorm_running_stats_and_eval() {
    let mut state = NormState::<f64>::standard(1);
    let mut g = Graph::<f64>::new(true, 0);
    let gamma = g.constant(&t(&[1], &[1.0]));
    let beta = g.constant(&t(&[1], &[0.0]));
    let x = g.constant(&t(&[2, 1], &[1.0, 3.0]));
    g.batchnorm(x, gamma, beta, &state, None).unwrap();
    state.absorb(&g.norm_updates()[0]);
    // momentum 0.1, unbiased batch variance 2
    close(&state.running_mean, &[0.2], 1e-12);
    close(&state.running_var, &[0.9 + 0.2], 1e-12);

    let mut ev = Graph::<f64>::eval();
    let (gamma, beta) = (ev.constant(&t(&[1], &[1.0])), ev.constant(&t(&[1], &[0.0])));
    let x = ev.constant(&t(&[3, 1], &[0.5, -1.0, 2.0]));
    let a = ev.batchnorm(x, gamma, beta, &state, None).unwrap();
    let b = ev.batchnorm(x, gamma, beta, &state, None).unwrap();
    assert_eq!(ev.value(a), ev.value(b));
    assert!(ev.norm_updates().is_empty());

    let fresh = NormState::<f64>::uninitialized(1);
    assert!(matches!(ev.batchnorm(x, gamma, beta, &fresh, None), Err(Error::State(_))));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new(false, 0);
    let x = g.constant(&t(&[2], &[-1.0, 2.0]));
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r), &[0.0, 2.0]);
    let d = g.dropout(x, 0.3).unwrap();
    assert_eq!(d, x);

    let a = g.constant(&Tensor::zeros(vec![2, 3]));
    let b = g.constant(&Tensor::zeros(vec![2, 5]));
    let c = g.concat(&[a, b], -1).unwrap();
    assert_eq!(g.shape(c), &[2, 8]);
    let bad = g.constant(&Tensor::zeros(vec![3, 5]));
    assert!(matches!(g.concat(&[a, bad], -1), Err(Error::Dimension { .. })));
}

#[test]
fn dropout_scales_survivors() {
    let mut g = Graph::<f64>::new(true, 42);
    let x = g.constant(&Tensor::full(vec![1000], 1.0));
    let y = g.dropout(x, 0.25).unwrap();
    let v = g.value(y);
    assert!(v.iter().all(|&s| s == 0.0 || (s - 1.0 / 0.75).abs() < 1e-12));
    let kept = v.iter().filter(|&&s| s > 0.0).count();
    assert!((650..850).contains(&kept), "{kept}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new(true, 0);
    let x = g.leaf(&t(&[3], &[0.5, -1.0, 2.0]).with_requires_grad(true));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    // a second call accumulates
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);

    let mut g = Graph::<f64>::new(true, 0);
    let x = g.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);

    let err = g.backward(sq).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f32>::eval();
    let x = g.constant(&Tensor::full(vec![2], 3e38));
    let err = g.scale(x, 10.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "scale" }));
}

#[test]
fn reshape_is_zero_copy() {
    let mut g = Graph::<f32>::eval();
    let x = g.constant(&Tensor::zeros(vec![4, 6]));
    let (_, stats) = probe::measure(|| g.reshape(x, &[2, 12]).unwrap());
    assert_eq!(stats.total, 0);
}

#[test]
fn permute_roundtrip() {
    let data: Vec<f64> = (0..24).map(|x| x as f64).collect();
    let src = t(&[2, 3, 4], &data);
    let mut g = Graph::<f64>::eval();
    let x = g.constant(&src);
    let p = g.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(g.shape(p), &[4, 2, 3]);
    assert_eq!(g.tensor(p).at(&[3, 1, 2]), src.at(&[1, 2, 3]));
    let back = g.permute(p, &[1, 2, 0]).unwrap();
    assert_eq!(g.value(back), src.data());
}

// ---- gradient checks -------------------------------------------------------

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    t(shape, &(0..n).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<_>>())
}

/// Projects an op's output onto fixed random weights so every output element
/// contributes to the scalar.
fn project(g: &mut Graph<f64>, y: comer::tensor::Var, seed: u64) -> comer::Result<comer::tensor::Var> {
    let w = rand_tensor(g.shape(y), seed);
    let wv = g.constant(&w);
    let p = g.mul(y, wv)?;
    g.sum(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn grad_matmul(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..1000) {
        let a = rand_tensor(&[2, m, k], seed);
        let b = rand_tensor(&[k, n], seed + 1);
        let bt = rand_tensor(&[2, n, k], seed + 2);
        let r = gradcheck::check(&[a.clone(), b], |g, v| { let y = g.matmul(v[0], v[1])?; project(g, y, seed) }).unwrap();
        prop_assert!(r.passed(), "{r:?}");
        let r = gradcheck::check(&[a, bt], |g, v| { let y = g.matmul_nt(v[0], v[1])?; project(g, y, seed) }).unwrap();
        prop_assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn grad_softmax_masked(rows in 1usize..4, len in 2usize..6, seed in 0u64..1000) {
        let x = rand_tensor(&[rows, len], seed);
        let keep: Vec<bool> = (0..len).map(|i| i == 0 || (seed >> i) & 1 == 1).collect();
        let mask = Mask::new(vec![1, len], keep).unwrap();
        let r = gradcheck::check(std::slice::from_ref(&x), |g, v| {
            let m = g.masked_fill(v[0], &mask)?;
            let y = g.softmax(m, -1)?;
            project(g, y, seed)
        }).unwrap();
        prop_assert!(r.passed(), "{r:?}");
        let r = gradcheck::check(&[x], |g, v| { let y = g.softmax(v[0], 0)?; project(g, y, seed) }).unwrap();
        prop_assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn grad_conv(h in 1usize..5, w in 1usize..5, ci in 1usize..3, co in 1usize..3, k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, seed in 0u64..1000) {
        let x = rand_tensor(&[2, h, w, ci], seed);
        let kern = rand_tensor(&[k, k, ci, co], seed + 1);
        let b = rand_tensor(&[co], seed + 2);
        let r = gradcheck::check(&[x, kern, b], |g, v| { let y = g.conv2d(v[0], v[1], Some(v[2]), stride, false)?; project(g, y, seed) }).unwrap();
        prop_assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn grad_norms(n in 2usize..6, c in 1usize..4, seed in 0u64..1000) {
        let x = rand_tensor(&[n, c], seed);
        let gm = rand_tensor(&[c], seed + 1);
        let bt = rand_tensor(&[c], seed + 2);
        let state = NormState::standard(c);
        let r = gradcheck::check(&[x.clone(), gm.clone(), bt.clone()], |g, v| { let y = g.batchnorm(v[0], v[1], v[2], &state, None)?; project(g, y, seed) }).unwrap();
        prop_assert!(r.passed(), "{r:?}");
        let r = gradcheck::check(&[x, gm, bt], |g, v| { let y = g.layernorm(v[0], v[1], v[2])?; project(g, y, seed) }).unwrap();
        prop_assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn grad_shape_ops(t_len in 1usize..5, c in 1usize..4, seed in 0u64..1000) {
        let x = rand_tensor(&[2, t_len, c], seed);
        let y = rand_tensor(&[2, t_len, 2], seed + 1);
        let r = gradcheck::check(std::slice::from_ref(&x), |g, v| { let o = g.cumsum_exclusive(v[0], 1)?; project(g, o, seed) }).unwrap();
        prop_assert!(r.passed(), "{r:?}");
        let r = gradcheck::check(&[x.clone(), y], |g, v| { let o = g.concat(&[v[0], v[1]], -1)?; let p = g.permute(o, &[2, 0, 1])?; project(g, p, seed) }).unwrap();
        prop_assert!(r.passed(), "{r:?}");
        let r = gradcheck::check(&[x], |g, v| { let o = g.tanh(v[0])?; let s = g.scale(o, 0.5)?; project(g, s, seed) }).unwrap();
        prop_assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn grad_pooling(h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
        let x = rand_tensor(&[1, h, w, 2], seed);
        let r = gradcheck::check(std::slice::from_ref(&x), |g, v| { let p = g.pad_to_even(v[0])?; let o = g.avg_pool2(p)?; project(g, o, seed) }).unwrap();
        prop_assert!(r.passed(), "{r:?}");
        let r = gradcheck::check(&[x], |g, v| { let o = g.max_pool3(v[0])?; project(g, o, seed) }).unwrap();
        prop_assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn grad_cross_entropy_and_embedding(v_size in 2usize..5, seed in 0u64..1000) {
        let table = rand_tensor(&[v_size, 3], seed);
        let w = rand_tensor(&[3, v_size], seed + 1);
        let ids = vec![0, v_size - 1, 1 % v_size];
        let targets = vec![1 % v_size, 0, 0];
        let r = gradcheck::check(&[table, w], |g, v| {
            let e = g.embedding(v[0], &ids, &[3])?;
            let l = g.matmul(e, v[1])?;
            g.cross_entropy(l, &targets, 0)
        }).unwrap();
        prop_assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn softmax_slices_sum_to_one(vals in prop::collection::vec(-50.0f32..50.0, 1..16)) {
        let mut g = Graph::<f32>::eval();
        let x = g.constant(&Tensor::new(vec![vals.len()], vals).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let s: f64 = g.value(y).iter().map(|&v| v as f64).sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(g.value(y).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn cumsum_difference_property(vals in prop::collection::vec(-10.0f64..10.0, 2..20)) {
        let n = vals.len();
        let mut g = Graph::<f64>::eval();
        let x = g.constant(&Tensor::new(vec![n, 1], vals.clone()).unwrap());
        let y = g.cumsum_exclusive(x, 0).unwrap();
        let out = g.value(y);
        prop_assert_eq!(out[0], 0.0);
        for i in 1..n {
            prop_assert!((out[i] - out[i - 1] - vals[i - 1]).abs() < 1e-9);
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::eval();
    let u = g.constant(&Tensor::zeros(vec![2, 4]));
    let l = g.cross_entropy(u, &[1, 3], 0).unwrap();
    assert!((g.value(l)[0] - 4f64.ln()).abs() < 1e-12);

    let x = g.constant(&t(&[1, 2], &[0.0, 3f64.ln()]));
    let l = g.cross_entropy(x, &[1], 99).unwrap();
    assert!((g.value(l)[0] + 0.75f64.ln()).abs() < 1e-12);

    let sharp = g.constant(&t(&[1, 3], &[0.0, 60.0, 0.0]));
    let l = g.cross_entropy(sharp, &[1], 0).unwrap();
    assert!(g.value(l)[0] < 1e-20);

    assert!(matches!(g.cross_entropy(u, &[0, 0], 0), Err(Error::Usage(_))));
}

#[test]
fn pad_positions_get_zero_gradient() {
    let mut g = Graph::<f64>::new(true, 0);
    let x = g.leaf(&rand_tensor(&[3, 4], 9).with_requires_grad(true));
    let l = g.cross_entropy(x, &[2, 0, 1], 0).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(x).unwrap();
    assert!(grad[4..8].iter().all(|&v| v == 0.0));
}

#[test]
fn forward_ops_are_bit_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new(true, 5);
        let x = g.constant(&rand_tensor(&[2, 5, 5, 3], 1).cast());
        let k = g.constant(&rand_tensor(&[3, 3, 3, 4], 2).cast());
        let y = g.conv2d(x, k, None, 1, true).unwrap();
        let d = g.dropout(y, 0.2).unwrap();
        let s = g.softmax(d, -1).unwrap();
        g.value(s).to_vec()
    };
    assert_eq!(run(), run());
}
