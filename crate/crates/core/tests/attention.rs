use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use comer::attention::{arm, check_heads, export_refinement, phi, scaled_dot_product, subtract_refinement, ArmConfig, ArmParams, MultiHeadAttention};
use comer::pgm;
use comer::rng::Rng;
use comer::tensor::gradcheck::{check, REL_TOLERANCE};
use comer::tensor::{Graph, Mask, ParamStore, Tensor};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Rows over the last axis that are non-negative and sum to one.
fn rand_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = *shape.last().unwrap();
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    for row in v.chunks_mut(last) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

#[test]
fn closed_form_two_key_softmax() {
    let mut g = Graph::<f64>::eval();
    let q = g.constant(&Tensor::new(vec![1, 1, 1, 2], vec![2f64.sqrt(), 0.0]).unwrap());
    let k = g.constant(&Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let w = scaled_dot_product(&mut g, q, k, None).unwrap();
    let e = g.value(w.scores);
    assert!((e[0] - 1.0).abs() < 1e-12 && e[1].abs() < 1e-12);
    let a = g.value(w.weights);
    let ex = std::f64::consts::E;
    assert!((a[0] - ex / (ex + 1.0)).abs() < 1e-12);
    assert!((a[1] - 1.0 / (ex + 1.0)).abs() < 1e-12);
    assert!((a[0] - 0.7311).abs() < 1e-4);
}

#[test]
fn attention_over_identical_values_returns_the_value() {
    let mut g = Graph::<f64>::eval();
    let q = g.constant(&rand_tensor(&[1, 2, 3, 4], 1));
    let k = g.constant(&rand_tensor(&[1, 2, 5, 4], 2));
    let w = scaled_dot_product(&mut g, q, k, None).unwrap();
    let v_row = [0.3, -1.2, 0.7];
    let v = g.constant(&Tensor::new(vec![1, 2, 5, 3], v_row.iter().cycle().take(30).cloned().collect()).unwrap());
    let out = g.matmul(w.weights, v).unwrap();
    for row in g.value(out).chunks(3) {
        for (a, b) in row.iter().zip(&v_row) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn causal_weights_vanish_above_the_diagonal() {
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut Rng::seed_from_u64(0)).unwrap();
    let mut g = Graph::eval();
    let x = g.constant(&rand_tensor(&[1, 3, 8], 4));
    let (_, w) = mha.forward(&mut g, &store, x, x, None, true).unwrap();
    let a = g.value(w.weights);
    for h in 0..2 {
        for t in 0..3 {
            let row = &a[(h * 3 + t) * 3..(h * 3 + t + 1) * 3];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (l, &v) in row.iter().enumerate() {
                if l > t {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
    assert!(check_heads(10, 3).is_err());
    assert!(MultiHeadAttention::new(&mut store, "bad", 10, 4, &mut Rng::seed_from_u64(0)).is_err());
}

#[test]
fn masked_keys_get_exact_zero_weight() {
    let mut g = Graph::<f64>::eval();
    let q = g.constant(&rand_tensor(&[1, 1, 2, 4], 5));
    let k = g.constant(&rand_tensor(&[1, 1, 3, 4], 6));
    let mask = Mask::new(vec![1, 1, 1, 3], vec![true, false, true]).unwrap().broadcast_to(&[1, 1, 2, 3]).unwrap();
    let w = scaled_dot_product(&mut g, q, k, Some(&mask)).unwrap();
    let a = g.value(w.weights);
    assert_eq!(a[1], 0.0);
    assert_eq!(a[4], 0.0);
    assert!((a[0] + a[2] - 1.0).abs() < 1e-12);
}

fn arm_params(store: &mut ParamStore<f64>, kernel: usize, channels: usize, h_in: usize, heads: usize, seed: u64) -> ArmParams {
    ArmParams::new(store, "arm", ArmConfig { kernel, channels }, h_in, heads, &mut Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn zero_module_gives_zero_refinement() {
    let mut store = ParamStore::<f64>::new();
    let p = arm_params(&mut store, 3, 4, 2, 2, 1);
    p.zero(&mut store);
    for training in [false, true] {
        let mut g = Graph::new(training, 0);
        let a = g.constant(&rand_weights(&[1, 4, 6, 2], 2));
        let trace = phi(&mut g, &store, &p, a, 2, 3).unwrap();
        assert!(g.value(trace.refinement).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn first_step_has_empty_coverage() {
    let mut store = ParamStore::<f64>::new();
    let p = arm_params(&mut store, 3, 4, 2, 2, 3);
    let mut g = Graph::eval();
    let a = g.constant(&rand_weights(&[1, 1, 6, 2], 4));
    let trace = phi(&mut g, &store, &p, a, 2, 3).unwrap();
    assert!(g.value(trace.coverage).iter().all(|&v| v == 0.0));
    assert!(g.value(trace.refinement).iter().all(|&v| v == 0.0));
}

/// Per-position loop: exclusive cumsum, zero-padded conv, relu, projection,
/// eval-mode channel norm.
#[allow(clippy::too_many_arguments)]
fn naive_phi(a: &Tensor<f64>, t_len: usize, h_o: usize, w_o: usize, h_in: usize, kern: &[f64], k: usize, bias: &[f64], proj: &[f64], heads: usize, mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d_c = bias.len();
    let l_len = h_o * w_o;
    let av = a.data();
    let cov = |t: usize, y: usize, x: usize, c: usize| (0..t).map(|s| av[(s * l_len + y * w_o + x) * h_in + c]).sum::<f64>();
    let mut out = vec![0.0; t_len * l_len * heads];
    let r = (k / 2) as isize;
    for t in 0..t_len {
        for y in 0..h_o {
            for x in 0..w_o {
                let mut hidden = vec![0.0; d_c];
                for (j, hj) in hidden.iter_mut().enumerate() {
                    let mut s = bias[j];
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y as isize + dy, x as isize + dx);
                            if yy < 0 || xx < 0 || yy >= h_o as isize || xx >= w_o as isize {
                                continue;
                            }
                            for c in 0..h_in {
                                let ki = (((dy + r) as usize * k + (dx + r) as usize) * h_in + c) * d_c + j;
                                s += cov(t, yy as usize, xx as usize, c) * kern[ki];
                            }
                        }
                    }
                    *hj = s.max(0.0);
                }
                for o in 0..heads {
                    let p: f64 = (0..d_c).map(|j| hidden[j] * proj[j * heads + o]).sum();
                    out[(t * l_len + y * w_o + x) * heads + o] = (p - mean[o]) / (var[o] + 1e-5).sqrt() * gamma[o] + beta[o];
                }
            }
        }
    }
    out
}

fn naive_case(kernel: usize, seed: u64) {
    let (t_len, h_o, w_o, h_in, heads, d_c) = (4, 3, 4, 2, 3, 2);
    let mut store = ParamStore::<f64>::new();
    let p = arm_params(&mut store, kernel, d_c, h_in, heads, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut fill = |store: &mut ParamStore<f64>, id| store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    for id in [p.kernel, p.bias, p.proj, p.norm.gamma, p.norm.beta] {
        fill(&mut store, id);
    }
    let state = store.norm_mut(p.norm.state);
    state.running_mean = vec![0.1, -0.2, 0.3];
    state.running_var = vec![0.5, 1.5, 2.0];
    let a = rand_weights(&[1, t_len, h_o * w_o, h_in], seed + 7);
    let mut g = Graph::eval();
    let av = g.constant(&a);
    let trace = phi(&mut g, &store, &p, av, h_o, w_o).unwrap();
    let want = naive_phi(
        &a,
        t_len,
        h_o,
        w_o,
        h_in,
        store.get(p.kernel).data(),
        kernel,
        store.get(p.bias).data(),
        store.get(p.proj).data(),
        heads,
        &[0.1, -0.2, 0.3],
        &[0.5, 1.5, 2.0],
        store.get(p.norm.gamma).data(),
        store.get(p.norm.beta).data(),
    );
    for (got, want) in g.value(trace.refinement).iter().zip(&want) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn phi_matches_naive_loop_with_pointwise_kernel() {
    naive_case(1, 11);
}

#[test]
fn phi_matches_naive_loop_with_spatial_kernel() {
    naive_case(3, 12);
}

#[test]
fn phi_rejects_mismatched_grid() {
    let mut store = ParamStore::<f64>::new();
    let p = arm_params(&mut store, 3, 4, 2, 2, 1);
    let mut g = Graph::eval();
    let a = g.constant(&rand_weights(&[1, 2, 6, 2], 2));
    assert!(phi(&mut g, &store, &p, a, 2, 4).is_err());
}

#[test]
fn zero_module_is_bitwise_identity_on_scores() {
    let mut store = ParamStore::<f32>::new();
    let p = ArmParams::new(&mut store, "arm", ArmConfig::toy(), 4, 2, &mut Rng::seed_from_u64(2)).unwrap();
    p.zero(&mut store);
    let mut g = Graph::<f32>::eval();
    let scores = rand_tensor(&[1, 2, 3, 6], 8).cast::<f32>();
    let e = g.constant(&scores);
    let a = g.constant(&rand_weights(&[1, 3, 6, 4], 9).cast::<f32>());
    let mask = Mask::new(vec![1, 1, 1, 6], vec![true; 6]).unwrap();
    let (refined, _) = arm(&mut g, &store, &p, e, a, 2, 3, Some(&mask)).unwrap();
    let same = g.value(refined).iter().zip(scores.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    assert!(same);
}

#[test]
fn positive_refinement_lowers_the_weight() {
    let mut g = Graph::<f64>::eval();
    let scores = rand_tensor(&[1, 1, 2, 4], 3);
    let e = g.constant(&scores);
    let mut r = vec![0.0; 8];
    r[4 + 2] = 3.0;
    let r = g.constant(&Tensor::new(vec![1, 2, 4, 1], r).unwrap());
    let refined = subtract_refinement(&mut g, e, r, None).unwrap();
    let before = g.softmax(e, -1).unwrap();
    let after = g.softmax(refined, -1).unwrap();
    assert!(g.value(after)[6] < g.value(before)[6]);
    assert_eq!(&g.value(after)[..4], &g.value(before)[..4]);
}

#[test]
fn refinement_rows_only_see_earlier_steps() {
    let mut store = ParamStore::<f64>::new();
    let p = arm_params(&mut store, 3, 4, 2, 2, 5);
    let base = rand_weights(&[1, 5, 6, 2], 6);
    let run = |a: &Tensor<f64>| {
        let mut g = Graph::eval();
        let v = g.constant(a);
        let t = phi(&mut g, &store, &p, v, 2, 3).unwrap();
        g.value(t.refinement).to_vec()
    };
    let r0 = run(&base);
    for s in 0..5 {
        let mut a = base.clone();
        a.data_mut()[s * 12..(s + 1) * 12].iter_mut().for_each(|v| *v = 1.0 - *v);
        let r1 = run(&a);
        assert_eq!(&r0[..(s + 1) * 12], &r1[..(s + 1) * 12], "perturbing step {s}");
    }
}

#[test]
fn arm_gradients_match_finite_differences() {
    let mut store = ParamStore::<f64>::new();
    let p = arm_params(&mut store, 3, 3, 2, 2, 7);
    let bias = store.get_mut(p.bias).data_mut();
    bias.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * (i as f64 + 1.0));
    let probe = rand_tensor(&[1, 2, 3, 6], 10);
    let res = check(&[rand_tensor(&[1, 2, 3, 6], 8), rand_weights(&[1, 3, 6, 2], 9)], |g, v| {
        let (refined, _) = arm(g, &store, &p, v[0], v[1], 2, 3, None)?;
        let w = g.constant(&probe);
        let prod = g.mul(refined, w)?;
        g.sum(prod)
    })
    .unwrap();
    assert!(res.max_rel_error < REL_TOLERANCE, "{res:?}");
    assert!(res.valid() > 0);
}

#[test]
fn export_writes_heatmaps_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (h_o, w_o, heads) = (2, 3, 2);
    let r: Vec<f64> = (0..h_o * w_o * heads).map(|i| i as f64 * 0.5 - 1.0).collect();
    export_refinement(dir.path(), 4, 2, &r, h_o, w_o, heads).unwrap();
    for k in 0..heads {
        let (w, h, px) = pgm::read(&dir.path().join(format!("step4_layer2_head{k}.pgm"))).unwrap();
        assert_eq!((w, h), (w_o, h_o));
        assert_eq!(*px.iter().min().unwrap(), 0);
        assert_eq!(*px.iter().max().unwrap(), 255);
    }
    assert!(dir.path().join("step4_layer2_mean.pgm").exists());
    let csv = std::fs::read_to_string(dir.path().join("step4_layer2.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "row,col,head,value");
    assert_eq!(rows.len(), 1 + h_o * w_o * heads);
    assert_eq!(rows[1], "0,0,0,-1");

    let zeros = vec![0.0; h_o * w_o * heads];
    export_refinement(dir.path(), 0, 2, &zeros, h_o, w_o, heads).unwrap();
    let (_, _, px) = pgm::read(&dir.path().join("step0_layer2_mean.pgm")).unwrap();
    assert!(px.iter().all(|&v| v == px[0]));
}
