//! Post-norm transformer decoder whose cross-attention can be refined by
//! coverage (ARM), plus an incremental decoder with a per-step cache.

use std::fmt;
use std::str::FromStr;

use crate::attention::{self, ArmConfig, ArmParams, ArmTrace, MultiHeadAttention};
use crate::encoder::{FeatureGrid, FrozenGrid};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::posenc;
use crate::rng::Rng;
use crate::tensor::{Graph, Mask, ParamId, ParamStore, Scalar, Tensor, Var};

/// Which attention feeds the refinement module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoverageMode {
    /// Plain cross-attention.
    None,
    /// The layer's own pre-refinement weights.
    SelfCov,
    /// The previous layer's refined weights.
    Cross,
    /// Channel concatenation of both.
    Fusion,
}

impl CoverageMode {
    pub const ALL: [CoverageMode; 4] = [CoverageMode::None, CoverageMode::SelfCov, CoverageMode::Cross, CoverageMode::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            CoverageMode::None => "none",
            CoverageMode::SelfCov => "self",
            CoverageMode::Cross => "cross",
            CoverageMode::Fusion => "fusion",
        }
    }
}

impl fmt::Display for CoverageMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CoverageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CoverageMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("invalid coverage mode '{s}' (valid: none, self, cross, fusion)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub coverage: CoverageMode,
    /// 1-based index of the first layer carrying the refinement module.
    pub arm_start_layer: usize,
    /// One module shared by every refining layer.
    pub arm_shared: bool,
    pub arm: ArmConfig,
    pub vocab_size: usize,
    /// Multiply token embeddings by `√d_model` before adding positions.
    pub scale_embedding: bool,
}

impl DecoderConfig {
    pub fn toy(vocab_size: usize) -> Self {
        DecoderConfig {
            num_layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            dropout: 0.1,
            coverage: CoverageMode::Fusion,
            arm_start_layer: 2,
            arm_shared: true,
            arm: ArmConfig::toy(),
            vocab_size,
            scale_embedding: true,
        }
    }

    pub fn paper(vocab_size: usize) -> Self {
        DecoderConfig {
            num_layers: 3,
            d_model: 256,
            heads: 8,
            d_ff: 1024,
            dropout: 0.3,
            coverage: CoverageMode::Fusion,
            arm_start_layer: 2,
            arm_shared: true,
            arm: ArmConfig::paper(),
            vocab_size,
            scale_embedding: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        attention::check_heads(self.d_model, self.heads)?;
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be even".into()));
        }
        if self.num_layers == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return Err(Error::Config("decoder needs layers, a feed-forward width and a vocabulary".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("decoder dropout {} must be in [0, 1)", self.dropout)));
        }
        if self.coverage != CoverageMode::None {
            if self.arm_start_layer < 2 || self.arm_start_layer > self.num_layers {
                return Err(Error::Config(format!("arm_start_layer {} must lie in 2..={}", self.arm_start_layer, self.num_layers)));
            }
            self.arm.validate()?;
        }
        if matches!(self.coverage, CoverageMode::Cross | CoverageMode::Fusion) && self.num_layers < 2 {
            return Err(Error::Config(format!("{} coverage needs at least 2 layers", self.coverage)));
        }
        Ok(())
    }

    /// Whether 0-based layer `j` refines its cross-attention.
    pub fn has_arm(&self, j: usize) -> bool {
        self.coverage != CoverageMode::None && j + 1 >= self.arm_start_layer
    }

    pub fn arm_input_channels(&self) -> usize {
        if self.coverage == CoverageMode::Fusion {
            2 * self.heads
        } else {
            self.heads
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub cross_attn: MultiHeadAttention,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm_self: LayerNorm,
    pub norm_cross: LayerNorm,
    pub norm_ffn: LayerNorm,
    /// Index into [`Decoder::arms`].
    pub arm: Option<usize>,
}

/// Cross-attention weights of one layer over a whole sequence.
#[derive(Debug, Clone, Copy)]
pub struct LayerCoverage {
    /// `A`, `[b, h, T, L]`.
    pub raw: Var,
    /// `Â`, `[b, h, T, L]`; the same node as `raw` on layers without ARM.
    pub refined: Var,
    pub arm: Option<ArmTrace>,
}

#[derive(Debug, Clone, Default)]
pub struct CoverageState {
    pub layers: Vec<LayerCoverage>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub hidden: Var,
    pub coverage: LayerCoverage,
}

/// Feature grid flattened for attention.
#[derive(Debug, Clone)]
pub struct MemoryView {
    /// `[b, L, d]`
    pub cells: Var,
    pub key_mask: Mask,
    pub h_o: usize,
    pub w_o: usize,
}

impl MemoryView {
    pub fn new<T: Scalar>(g: &mut Graph<T>, grid: &FeatureGrid) -> Result<Self> {
        let cells = g.reshape(grid.features, &[grid.batch, grid.cells(), grid.d_model])?;
        Ok(MemoryView { cells, key_mask: grid.key_mask(), h_o: grid.h_o, w_o: grid.w_o })
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub embed: ParamId,
    pub out: Linear,
    pub layers: Vec<DecoderLayer>,
    pub arms: Vec<ArmParams>,
}

impl Decoder {
    pub fn new<T: Scalar>(config: DecoderConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embed = store.add_normal("decoder.embed.weight", &[config.vocab_size, d], 1.0 / (d as f64).sqrt(), rng);
        let h_in = config.arm_input_channels();
        let mut arms = Vec::new();
        let mut layers = Vec::new();
        for j in 0..config.num_layers {
            let p = format!("decoder.layer{j}");
            let arm = if config.has_arm(j) {
                if !config.arm_shared || arms.is_empty() {
                    let name = if config.arm_shared { "decoder.arm".to_string() } else { format!("{p}.arm") };
                    arms.push(ArmParams::new(store, &name, config.arm, h_in, config.heads, rng)?);
                }
                Some(arms.len() - 1)
            } else {
                None
            };
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self_attn"), d, config.heads, rng)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross_attn"), d, config.heads, rng)?,
                ffn_in: Linear::new(store, &format!("{p}.ffn.lin1"), d, config.d_ff, true, rng),
                ffn_out: Linear::new(store, &format!("{p}.ffn.lin2"), config.d_ff, d, true, rng),
                norm_self: LayerNorm::new(store, &format!("{p}.norm1"), d),
                norm_cross: LayerNorm::new(store, &format!("{p}.norm2"), d),
                norm_ffn: LayerNorm::new(store, &format!("{p}.norm3"), d),
                arm,
            });
        }
        let out = Linear::new(store, "decoder.out", d, config.vocab_size, true, rng);
        Ok(Decoder { config, embed, out, layers, arms })
    }

    /// Zeroes every refinement module.
    pub fn zero_arms<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for a in &self.arms {
            a.zero(store);
        }
    }

    fn residual_norm<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, norm: &LayerNorm, x: Var, sub: Var) -> Result<Var> {
        let sub = g.dropout(sub, self.config.dropout)?;
        let sum = g.add(x, sub)?;
        norm.forward(g, store, sum)
    }

    fn feed_forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, layer: &DecoderLayer, x: Var) -> Result<Var> {
        let h = layer.ffn_in.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = layer.ffn_out.forward(g, store, h)?;
        self.residual_norm(g, store, &layer.norm_ffn, x, h)
    }

    /// Token embeddings (scaled by `√d` unless disabled) plus word positions
    /// `offset..offset+T`.
    fn embed_tokens<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize], lead: &[usize], offset: usize) -> Result<Var> {
        let d = self.config.d_model;
        let table = g.param(store, self.embed);
        let x = g.embedding(table, ids, lead)?;
        let x = if self.config.scale_embedding { g.scale(x, (d as f64).sqrt())? } else { x };
        let steps = lead[lead.len() - 1];
        let mut pe = Vec::with_capacity(steps * d);
        for p in offset..offset + steps {
            pe.extend(posenc::word_pe(p as f64, d)?.into_iter().map(T::of));
        }
        let pe = g.constant(&Tensor::new(vec![steps, d], pe)?);
        let x = g.add_trailing(x, pe)?;
        g.dropout(x, self.config.dropout)
    }

    /// One decoder layer over a full sequence `x: [b, T, d]`.
    /// `prev_refined` is the previous layer's `Â`, required by cross and
    /// fusion coverage on refining layers.
    pub fn decoder_layer<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, j: usize, x: Var, memory: &MemoryView, prev_refined: Option<Var>) -> Result<LayerOutput> {
        let layer = &self.layers[j];
        let (sa, _) = layer.self_attn.forward(g, store, x, x, None, true)?;
        let x = self.residual_norm(g, store, &layer.norm_self, x, sa)?;

        let ca = &layer.cross_attn;
        let q = ca.project(g, store, &ca.query, x)?;
        let k = ca.project(g, store, &ca.key, memory.cells)?;
        let v = ca.project(g, store, &ca.value, memory.cells)?;
        let w = attention::scaled_dot_product(g, q, k, Some(&memory.key_mask))?;
        let coverage = match layer.arm {
            None => LayerCoverage { raw: w.weights, refined: w.weights, arm: None },
            Some(ai) => {
                let arm = &self.arms[ai];
                let need_prev = || prev_refined.ok_or_else(|| Error::Wiring(format!("layer {} uses {} coverage but no previous-layer weights were supplied", j + 1, self.config.coverage)));
                let source = match self.config.coverage {
                    CoverageMode::SelfCov => w.weights,
                    CoverageMode::Cross => need_prev()?,
                    CoverageMode::Fusion => {
                        let prev = need_prev()?;
                        g.concat(&[w.weights, prev], 1)?
                    }
                    CoverageMode::None => unreachable!("no module on coverage-free layers"),
                };
                let a_in = g.permute(source, &[0, 2, 3, 1])?;
                let (refined_scores, trace) = attention::arm(g, store, arm, w.scores, a_in, memory.h_o, memory.w_o, Some(&memory.key_mask))?;
                let refined = g.softmax(refined_scores, -1)?;
                LayerCoverage { raw: w.weights, refined, arm: Some(trace) }
            }
        };
        let cross = ca.combine(g, store, coverage.refined, v)?;
        let x = self.residual_norm(g, store, &layer.norm_cross, x, cross)?;
        let hidden = self.feed_forward(g, store, layer, x)?;
        Ok(LayerOutput { hidden, coverage })
    }

    /// Teacher-forced pass over `ids` laid out as `[b, T]`; returns logits
    /// `[b, T, V]` and every layer's cross-attention weights.
    pub fn decode_parallel<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, grid: &FeatureGrid, ids: &[usize], batch: usize) -> Result<(Var, CoverageState)> {
        if batch != grid.batch || batch == 0 || !ids.len().is_multiple_of(batch) || ids.is_empty() {
            return Err(Error::dim("decode_parallel", format!("{} ids for batch {batch} against memory batch {}", ids.len(), grid.batch)));
        }
        let steps = ids.len() / batch;
        let memory = MemoryView::new(g, grid)?;
        let mut x = self.embed_tokens(g, store, ids, &[batch, steps], 0)?;
        let mut state = CoverageState::default();
        let mut prev = None;
        for j in 0..self.layers.len() {
            let out = self.decoder_layer(g, store, j, x, &memory, prev)?;
            x = out.hidden;
            prev = Some(out.coverage.refined);
            state.layers.push(out.coverage);
        }
        let logits = self.out.forward(g, store, x)?;
        Ok((logits, state))
    }

    /// Fresh incremental state for `rows` hypotheses over one memory item.
    pub fn start<T: Scalar>(&self, store: &ParamStore<T>, grid: &FrozenGrid<T>, rows: usize) -> Result<DecodeCache<T>> {
        if grid.batch() != 1 {
            return Err(Error::State(format!("a decode cache serves one memory item, got batch {}", grid.batch())));
        }
        let mut g = Graph::eval();
        let fg = grid.attach(&mut g);
        let memory = MemoryView::new(&mut g, &fg)?;
        let mut memory_kv = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ca = &layer.cross_attn;
            let k = ca.project(&mut g, store, &ca.key, memory.cells)?;
            let v = ca.project(&mut g, store, &ca.value, memory.cells)?;
            memory_kv.push((g.tensor(k), g.tensor(v)));
        }
        let cells = grid.h_o * grid.w_o;
        Ok(DecodeCache {
            rows,
            steps: 0,
            h_o: grid.h_o,
            w_o: grid.w_o,
            heads: self.config.heads,
            key_mask: Mask::new(vec![1, 1, 1, cells], grid.mask.clone())?,
            memory_kv,
            layers: (0..self.layers.len()).map(|_| LayerCache::new(rows, cells * self.config.heads)).collect(),
        })
    }

    /// Feeds one token per hypothesis row and returns `[rows, V]` logits.
    /// Eval mode only: batch norms use running statistics, dropout is off.
    pub fn decode_step<T: Scalar>(&self, store: &ParamStore<T>, cache: &mut DecodeCache<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        let n = cache.rows;
        if tokens.len() != n {
            return Err(Error::State(format!("cache holds {n} rows but {} tokens were fed", tokens.len())));
        }
        if cache.layers.len() != self.layers.len() || cache.heads != self.config.heads {
            return Err(Error::State("cache was built for a different decoder".into()));
        }
        let d = self.config.d_model;
        let h = self.config.heads;
        let t = cache.steps;
        let cells = cache.h_o * cache.w_o;
        let mut g = Graph::eval();
        let mut x = self.embed_tokens(&mut g, store, tokens, &[n, 1], t)?;
        let mut pending: Vec<(Vec<T>, Vec<T>)> = Vec::with_capacity(self.layers.len());
        for (j, layer) in self.layers.iter().enumerate() {
            // masked self-attention over the cached prefix plus this step
            let sa = &layer.self_attn;
            let q = sa.query.forward(&mut g, store, x)?;
            let k_new = sa.key.forward(&mut g, store, x)?;
            let v_new = sa.value.forward(&mut g, store, x)?;
            let lc = &mut cache.layers[j];
            for r in 0..n {
                lc.self_keys[r].extend_from_slice(&g.value(k_new)[r * d..(r + 1) * d]);
                lc.self_values[r].extend_from_slice(&g.value(v_new)[r * d..(r + 1) * d]);
            }
            let keys = g.constant(&Tensor::new(vec![n, t + 1, d], lc.self_keys.concat())?);
            let values = g.constant(&Tensor::new(vec![n, t + 1, d], lc.self_values.concat())?);
            let (qh, kh, vh) = (sa.split_heads(&mut g, q)?, sa.split_heads(&mut g, keys)?, sa.split_heads(&mut g, values)?);
            let w = attention::scaled_dot_product(&mut g, qh, kh, None)?;
            let out = sa.combine(&mut g, store, w.weights, vh)?;
            x = self.residual_norm(&mut g, store, &layer.norm_self, x, out)?;

            // cross-attention: hypothesis rows play the role of query steps
            let ca = &layer.cross_attn;
            let rows_as_steps = g.reshape(x, &[1, n, d])?;
            let q = ca.project(&mut g, store, &ca.query, rows_as_steps)?;
            let (mk, mv) = &cache.memory_kv[j];
            let (mk, mv) = (g.constant(mk), g.constant(mv));
            let w = attention::scaled_dot_product(&mut g, q, mk, Some(&cache.key_mask))?;
            let refined = match layer.arm {
                None => w.weights,
                Some(ai) => {
                    let arm = &self.arms[ai];
                    let cov = cache.coverage_input(j, self.config.coverage, arm.h_in)?;
                    let cov = g.constant(&Tensor::new(vec![1, n, cells, arm.h_in], cov)?);
                    let r = attention::refine_coverage(&mut g, store, arm, cov, cache.h_o, cache.w_o)?;
                    let e = attention::subtract_refinement(&mut g, w.scores, r, Some(&cache.key_mask))?;
                    g.softmax(e, -1)?
                }
            };
            pending.push((heads_to_rows(g.value(w.weights), h, n, cells), heads_to_rows(g.value(refined), h, n, cells)));
            let out = ca.combine(&mut g, store, refined, mv)?;
            let out = g.reshape(out, &[n, 1, d])?;
            x = self.residual_norm(&mut g, store, &layer.norm_cross, x, out)?;
            x = self.feed_forward(&mut g, store, layer, x)?;
        }
        let logits = self.out.forward(&mut g, store, x)?;
        for (lc, (raw, refined)) in cache.layers.iter_mut().zip(pending) {
            lc.push(&raw, &refined, cells * h);
        }
        cache.steps += 1;
        let v = self.config.vocab_size;
        Tensor::new(vec![n, v], g.value(logits).to_vec())
    }
}

/// `[1, h, n, L]` weights to `n` rows of `[L, h]`.
fn heads_to_rows<T: Scalar>(w: &[T], h: usize, n: usize, cells: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * cells * h];
    for k in 0..h {
        for r in 0..n {
            let src = &w[(k * n + r) * cells..(k * n + r + 1) * cells];
            for (l, &v) in src.iter().enumerate() {
                out[(r * cells + l) * h + k] = v;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    /// Per row, `t × d` projected self-attention keys.
    pub self_keys: Vec<Vec<T>>,
    pub self_values: Vec<Vec<T>>,
    /// Per row, `t × L × h` raw cross-attention weights.
    pub raw_history: Vec<Vec<T>>,
    pub refined_history: Vec<Vec<T>>,
    /// Per row, running `L × h` sums of the histories.
    pub raw_sum: Vec<Vec<T>>,
    pub refined_sum: Vec<Vec<T>>,
}

impl<T: Scalar> LayerCache<T> {
    fn new(rows: usize, width: usize) -> Self {
        let empty = || vec![Vec::new(); rows];
        LayerCache { self_keys: empty(), self_values: empty(), raw_history: empty(), refined_history: empty(), raw_sum: vec![vec![T::zero(); width]; rows], refined_sum: vec![vec![T::zero(); width]; rows] }
    }

    fn push(&mut self, raw: &[T], refined: &[T], width: usize) {
        for r in 0..self.raw_sum.len() {
            let (a, b) = (&raw[r * width..(r + 1) * width], &refined[r * width..(r + 1) * width]);
            self.raw_history[r].extend_from_slice(a);
            self.refined_history[r].extend_from_slice(b);
            self.raw_sum[r].iter_mut().zip(a).for_each(|(s, &v)| *s = *s + v);
            self.refined_sum[r].iter_mut().zip(b).for_each(|(s, &v)| *s = *s + v);
        }
    }

    fn select(&self, rows: &[usize]) -> Self {
        let pick = |v: &Vec<Vec<T>>| rows.iter().map(|&r| v[r].clone()).collect();
        LayerCache {
            self_keys: pick(&self.self_keys),
            self_values: pick(&self.self_values),
            raw_history: pick(&self.raw_history),
            refined_history: pick(&self.refined_history),
            raw_sum: pick(&self.raw_sum),
            refined_sum: pick(&self.refined_sum),
        }
    }
}

/// Incremental decoding state for one memory item and `rows` hypotheses.
/// Each step appends; nothing recorded for earlier steps is rewritten.
#[derive(Debug, Clone)]
pub struct DecodeCache<T: Scalar> {
    rows: usize,
    steps: usize,
    h_o: usize,
    w_o: usize,
    heads: usize,
    key_mask: Mask,
    memory_kv: Vec<(Tensor<T>, Tensor<T>)>,
    pub layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> DecodeCache<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h_o, self.w_o)
    }

    /// Keeps the listed rows (repeats allowed), in order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.rows) {
            return Err(Error::State(format!("row {bad} out of range for a cache of {} rows", self.rows)));
        }
        Ok(DecodeCache {
            rows: rows.len(),
            steps: self.steps,
            h_o: self.h_o,
            w_o: self.w_o,
            heads: self.heads,
            key_mask: self.key_mask.clone(),
            memory_kv: self.memory_kv.clone(),
            layers: self.layers.iter().map(|l| l.select(rows)).collect(),
        })
    }

    /// Accumulated attention of the steps so far for layer `j`, laid out
    /// `[rows, L, h_in]` as the refinement module expects.
    fn coverage_input(&self, j: usize, mode: CoverageMode, h_in: usize) -> Result<Vec<T>> {
        let h = self.heads;
        let cells = self.h_o * self.w_o;
        let prev = || {
            j.checked_sub(1).map(|p| &self.layers[p].refined_sum).ok_or_else(|| Error::Wiring(format!("layer {} has no previous layer to take coverage from", j + 1)))
        };
        Ok(match mode {
            CoverageMode::SelfCov => self.layers[j].raw_sum.concat(),
            CoverageMode::Cross => prev()?.concat(),
            CoverageMode::Fusion => {
                let (own, prev) = (&self.layers[j].raw_sum, prev()?);
                let mut out = Vec::with_capacity(self.rows * cells * h_in);
                for r in 0..self.rows {
                    for l in 0..cells {
                        out.extend_from_slice(&own[r][l * h..(l + 1) * h]);
                        out.extend_from_slice(&prev[r][l * h..(l + 1) * h]);
                    }
                }
                out
            }
            CoverageMode::None => return Err(Error::Wiring("coverage requested in coverage-free mode".into())),
        })
    }
}
