//! Multi-head attention and the attention refinement module (ARM).
//!
//! Score tensors use the layout `[b, heads, T, L]`. ARM inputs and the
//! refinement term use `[b, T, L, channels]` so that the coverage grid of a
//! step is a contiguous NHWC image.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Linear};
use crate::rng::Rng;
use crate::tensor::{Graph, Mask, NormState, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Raw scores and weights of one attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    /// `[b, heads, T, L]`, masked entries hold the negative sentinel.
    pub scores: Var,
    /// `[b, heads, T, L]`, masked entries are exactly 0.
    pub weights: Var,
}

pub fn check_heads(d_model: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Config(format!("d_model {d_model} is not divisible by {heads} heads")));
    }
    Ok(d_model / heads)
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_model: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        check_heads(d_model, heads)?;
        let mut lin = |part: &str| Linear::new(store, &format!("{name}.{part}"), d_model, d_model, true, rng);
        Ok(MultiHeadAttention { heads, d_model, query: lin("query"), key: lin("key"), value: lin("value"), output: lin("out") })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    /// `[b, T, d]` → `[b, heads, T, d_head]`.
    pub fn split_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1], self.heads, self.d_head()])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// `[b, heads, T, d_head]` → `[b, T, d]`.
    pub fn merge_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[s[0], s[2], self.d_model])
    }

    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, lin: &Linear, x: Var) -> Result<Var> {
        let y = lin.forward(g, store, x)?;
        self.split_heads(g, y)
    }

    /// Weighted sum of values followed by the output projection.
    pub fn combine<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, weights: Var, values: Var) -> Result<Var> {
        let heads = g.matmul(weights, values)?;
        let merged = self.merge_heads(g, heads)?;
        self.output.forward(g, store, merged)
    }

    /// Full attention of `queries: [b, T, d]` over `keys_values: [b, L, d]`.
    /// `key_mask` broadcasts to `[b, heads, T, L]`; `causal` additionally hides
    /// keys after the query step.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, queries: Var, keys_values: Var, key_mask: Option<&Mask>, causal: bool) -> Result<(Var, AttentionWeights)> {
        let q = self.project(g, store, &self.query, queries)?;
        let k = self.project(g, store, &self.key, keys_values)?;
        let v = self.project(g, store, &self.value, keys_values)?;
        let mask = combine_masks(g, q, k, key_mask, causal)?;
        let w = scaled_dot_product(g, q, k, mask.as_ref())?;
        let out = self.combine(g, store, w.weights, v)?;
        Ok((out, w))
    }
}

fn combine_masks<T: Scalar>(g: &Graph<T>, q: Var, k: Var, key_mask: Option<&Mask>, causal: bool) -> Result<Option<Mask>> {
    let (qs, ks) = (g.shape(q), g.shape(k));
    let target = [qs[0], qs[1], qs[2], ks[2]];
    let causal_mask = if causal {
        if target[2] != target[3] {
            return Err(Error::dim("attention", format!("causal attention needs T == L, got {} vs {}", target[2], target[3])));
        }
        let c = Mask::causal(target[2]);
        Some(Mask::new(vec![1, 1, target[2], target[3]], c.keep().to_vec())?.broadcast_to(&target)?)
    } else {
        None
    };
    Ok(match (key_mask, causal_mask) {
        (None, c) => c,
        (Some(m), None) => Some(m.clone()),
        (Some(m), Some(c)) => {
            let m = m.broadcast_to(&target)?;
            let keep = m.keep().iter().zip(c.keep()).map(|(&a, &b)| a && b).collect();
            Some(Mask::new(target.to_vec(), keep)?)
        }
    })
}

/// `E = q·kᵀ / √d_head` (masked), `A = softmax(E)` over the key axis.
pub fn scaled_dot_product<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, mask: Option<&Mask>) -> Result<AttentionWeights> {
    let d_head = *g.shape(q).last().unwrap();
    let e = g.matmul_nt(q, k)?;
    let mut e = g.scale(e, 1.0 / (d_head as f64).sqrt())?;
    if let Some(m) = mask {
        e = g.masked_fill(e, m)?;
    }
    let a = g.softmax(e, -1)?;
    Ok(AttentionWeights { scores: e, weights: a })
}

/// Kernel size `k_c` and hidden channels `d_c` of the refinement network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmConfig {
    pub kernel: usize,
    pub channels: usize,
}

impl ArmConfig {
    pub fn paper() -> Self {
        ArmConfig { kernel: 5, channels: 32 }
    }

    pub fn toy() -> Self {
        ArmConfig { kernel: 3, channels: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) || self.channels == 0 {
            return Err(Error::Config(format!("ARM kernel {} must be odd and channels {} positive", self.kernel, self.channels)));
        }
        Ok(())
    }
}

/// Convolution `[k_c, k_c, h_in, d_c]` with bias, projection `[d_c, h]` and a
/// channel batch norm.
#[derive(Debug, Clone, Copy)]
pub struct ArmParams {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub proj: ParamId,
    pub norm: BatchNorm,
    pub h_in: usize,
    pub heads: usize,
}

impl ArmParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: ArmConfig, h_in: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let std = (2.0 / (k * k * h_in) as f64).sqrt();
        let kernel = store.add_normal(format!("{name}.conv.weight"), &[k, k, h_in, config.channels], std, rng);
        let bias = store.add_zeros(format!("{name}.conv.bias"), &[config.channels]);
        let proj = store.add_xavier(format!("{name}.proj.weight"), &[config.channels, heads], config.channels, heads, rng);
        let norm = BatchNorm::new(store, &format!("{name}.norm"), heads);
        Ok(ArmParams { kernel, bias, proj, norm, h_in, heads })
    }

    /// Zeroes the conv and projection and resets the norm, making the module
    /// an exact identity on the scores.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in [self.kernel, self.bias, self.proj] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        *store.norm_mut(self.norm.state) = NormState::standard(self.heads);
        store.get_mut(self.norm.gamma).data_mut().iter_mut().for_each(|v| *v = T::one());
        store.get_mut(self.norm.beta).data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Intermediate values of one refinement, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct ArmTrace {
    /// Attention fed to the module, `[b, T, L, h_in]`.
    pub input: Var,
    /// Exclusive running sum of `input` over steps.
    pub coverage: Var,
    /// `[b, T, L, h]`
    pub refinement: Var,
}

/// Refinement term from an already accumulated coverage `[.., L, h_in]`:
/// conv + relu on the `h_o × w_o` grid, projection to `h` channels, norm.
pub fn refine_coverage<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, arm: &ArmParams, coverage: Var, h_o: usize, w_o: usize) -> Result<Var> {
    let s = g.shape(coverage).to_vec();
    let r = s.len();
    if r < 2 || s[r - 2] != h_o * w_o || s[r - 1] != arm.h_in {
        return Err(Error::dim("phi", format!("coverage {s:?} does not match a {h_o}x{w_o} grid with {} channels", arm.h_in)));
    }
    let rows: usize = s[..r - 2].iter().product();
    let grid = g.reshape(coverage, &[rows, h_o, w_o, arm.h_in])?;
    let k = g.param(store, arm.kernel);
    let b = g.param(store, arm.bias);
    let hidden = g.conv2d(grid, k, Some(b), 1, true)?;
    let w = g.param(store, arm.proj);
    let projected = g.matmul(hidden, w)?;
    let normed = arm.norm.forward(g, store, projected)?;
    let mut out_shape = s[..r - 1].to_vec();
    out_shape.push(arm.heads);
    g.reshape(normed, &out_shape)
}

/// `R = φ(A_in)` for a whole sequence: `a_in: [b, T, L, h_in]` → `[b, T, L, h]`.
pub fn phi<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, arm: &ArmParams, a_in: Var, h_o: usize, w_o: usize) -> Result<ArmTrace> {
    let s = g.shape(a_in).to_vec();
    if s.len() != 4 || s[2] != h_o * w_o {
        return Err(Error::dim("phi", format!("attention {s:?} does not cover a {h_o}x{w_o} grid")));
    }
    let coverage = g.cumsum_exclusive(a_in, 1)?;
    let refinement = refine_coverage(g, store, arm, coverage, h_o, w_o)?;
    Ok(ArmTrace { input: a_in, coverage, refinement })
}

/// `Ê = E − φ(A_in)` with masked keys restored to the sentinel.
/// `scores: [b, h, T, L]`, `a_in: [b, T, L, h_in]`.
pub fn arm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, params: &ArmParams, scores: Var, a_in: Var, h_o: usize, w_o: usize, key_mask: Option<&Mask>) -> Result<(Var, ArmTrace)> {
    let trace = phi(g, store, params, a_in, h_o, w_o)?;
    let refined = subtract_refinement(g, scores, trace.refinement, key_mask)?;
    Ok((refined, trace))
}

/// `scores: [b, h, T, L]` minus `refinement: [b, T, L, h]`, re-masked.
pub fn subtract_refinement<T: Scalar>(g: &mut Graph<T>, scores: Var, refinement: Var, key_mask: Option<&Mask>) -> Result<Var> {
    let r = g.permute(refinement, &[0, 3, 1, 2])?;
    let e = g.sub(scores, r)?;
    match key_mask {
        Some(m) => g.masked_fill(e, m),
        None => Ok(e),
    }
}

/// Per-head and mean-over-heads refinement images of one step, each min-max
/// scaled to 0..255. `r` holds `[L, h]` values.
pub fn refinement_images(r: &[f64], h_o: usize, w_o: usize, heads: usize) -> Vec<Vec<u8>> {
    let cells = h_o * w_o;
    let mut images: Vec<Vec<f64>> = (0..heads).map(|k| (0..cells).map(|l| r[l * heads + k]).collect()).collect();
    images.push((0..cells).map(|l| r[l * heads..(l + 1) * heads].iter().sum::<f64>() / heads as f64).collect());
    images.iter().map(|img| min_max_bytes(img)).collect()
}

pub fn min_max_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

/// Writes `step{t}_layer{j}_head{k}.pgm` for every head, `step{t}_layer{j}_mean.pgm`
/// and `step{t}_layer{j}.csv` (rows `row,col,head,value`) into `dir`.
pub fn export_refinement(dir: &Path, step: usize, layer: usize, r: &[f64], h_o: usize, w_o: usize, heads: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let images = refinement_images(r, h_o, w_o, heads);
    let comment = "refinement term, per-image min-max scaled";
    for (k, img) in images.iter().enumerate() {
        let name = if k < heads { format!("step{step}_layer{layer}_head{k}.pgm") } else { format!("step{step}_layer{layer}_mean.pgm") };
        crate::pgm::write(&dir.join(name), w_o, h_o, img, Some(comment))?;
    }
    let mut csv = fs::File::create(dir.join(format!("step{step}_layer{layer}.csv")))?;
    writeln!(csv, "row,col,head,value")?;
    for l in 0..h_o * w_o {
        for k in 0..heads {
            writeln!(csv, "{},{},{},{}", l / w_o, l % w_o, k, r[l * heads + k])?;
        }
    }
    Ok(())
}

/// Reads a refinement term back from its `[b, T, L, h]` tensor for one step.
pub fn refinement_row<T: Scalar>(r: &Tensor<T>, batch: usize, step: usize) -> Vec<f64> {
    let s = r.shape();
    let per = s[2] * s[3];
    let off = (batch * s[1] + step) * per;
    r.data()[off..off + per].iter().map(|v| v.as_f64()).collect()
}
