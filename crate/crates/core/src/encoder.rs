//! DenseNet feature extractor: image `[b, H, W, 1]` to a feature grid
//! `[b, h_o, w_o, d_model]` plus a validity mask for padded cells.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, LayerNorm};
use crate::posenc;
use crate::rng::Rng;
use crate::tensor::{Graph, Mask, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StemConfig {
    pub kernel: usize,
    pub stride: usize,
    pub max_pool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    /// Bottleneck layers per dense block (D).
    pub layers_per_block: usize,
    /// Channels each layer adds (k).
    pub growth_rate: usize,
    /// Channel reduction of a transition layer (θ).
    pub transition_factor: f64,
    /// Transitions follow the first `num_transitions` blocks.
    pub num_transitions: usize,
    pub dropout: f64,
    pub stem: StemConfig,
}

impl EncoderConfig {
    /// 2 blocks of 3 layers, growth 8, total stride 8.
    pub fn toy() -> Self {
        EncoderConfig {
            num_blocks: 2,
            layers_per_block: 3,
            growth_rate: 8,
            transition_factor: 0.5,
            num_transitions: 2,
            dropout: 0.0,
            stem: StemConfig { kernel: 3, stride: 2, max_pool: false },
        }
    }

    /// 3 blocks of 16 layers, growth 24, θ 0.5, dropout 0.2, total stride 16.
    pub fn paper() -> Self {
        EncoderConfig {
            num_blocks: 3,
            layers_per_block: 16,
            growth_rate: 24,
            transition_factor: 0.5,
            num_transitions: 2,
            dropout: 0.2,
            stem: StemConfig { kernel: 7, stride: 2, max_pool: true },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.transition_factor > 0.0 && self.transition_factor <= 1.0) {
            return Err(Error::Config(format!("transition factor {} must lie in (0, 1]", self.transition_factor)));
        }
        if self.layers_per_block == 0 || self.num_blocks == 0 || self.growth_rate == 0 {
            return Err(Error::Config("encoder needs at least one block, one layer and positive growth".into()));
        }
        if self.num_transitions > self.num_blocks {
            return Err(Error::Config("more transitions than dense blocks".into()));
        }
        if self.stem.kernel.is_multiple_of(2) || self.stem.stride == 0 {
            return Err(Error::Config("stem kernel must be odd and stride positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("encoder dropout {} must be in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Downsampling factor from input pixels to feature cells.
    pub fn total_stride(&self) -> usize {
        self.stem.stride * if self.stem.max_pool { 2 } else { 1 } * (1 << self.num_transitions)
    }

    /// Channel count after each dense block, before any transition.
    pub fn block_channels(&self) -> Vec<usize> {
        let mut c = 2 * self.growth_rate;
        let mut out = Vec::new();
        for b in 0..self.num_blocks {
            c = dense_block_channels(c, self.layers_per_block, self.growth_rate);
            out.push(c);
            if b < self.num_transitions {
                c = transition_channels(c, self.transition_factor);
            }
        }
        out
    }

    pub fn out_channels(&self) -> usize {
        let mut c = *self.block_channels().last().unwrap();
        if self.num_transitions == self.num_blocks {
            c = transition_channels(c, self.transition_factor);
        }
        c
    }
}

pub fn dense_block_channels(c_in: usize, layers: usize, growth: usize) -> usize {
    c_in + layers * growth
}

pub fn transition_channels(c: usize, theta: f64) -> usize {
    ((theta * c as f64).floor() as usize).max(1)
}

/// Encoder output bound to a graph.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    /// `[b, h_o, w_o, d_model]`
    pub features: Var,
    /// `[b, h_o, w_o]`, true for cells that cover at least one real pixel.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub h_o: usize,
    pub w_o: usize,
    pub d_model: usize,
}

impl FeatureGrid {
    pub fn cells(&self) -> usize {
        self.h_o * self.w_o
    }

    /// Key mask shaped `[b, 1, 1, L]` for broadcasting over `[b, heads, T, L]`.
    pub fn key_mask(&self) -> Mask {
        Mask::new(vec![self.batch, 1, 1, self.cells()], self.mask.clone()).expect("mask size")
    }

    pub fn freeze<T: Scalar>(&self, g: &Graph<T>) -> FrozenGrid<T> {
        FrozenGrid { features: g.tensor(self.features), mask: self.mask.clone(), h_o: self.h_o, w_o: self.w_o }
    }
}

/// Encoder output detached from any graph, reusable across decode steps.
#[derive(Debug, Clone)]
pub struct FrozenGrid<T: Scalar> {
    pub features: Tensor<T>,
    pub mask: Vec<bool>,
    pub h_o: usize,
    pub w_o: usize,
}

impl<T: Scalar> FrozenGrid<T> {
    pub fn batch(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn attach(&self, g: &mut Graph<T>) -> FeatureGrid {
        let s = self.features.shape();
        FeatureGrid { features: g.constant(&self.features), mask: self.mask.clone(), batch: s[0], h_o: s[1], w_o: s[2], d_model: s[3] }
    }

    /// One batch item as its own grid.
    pub fn item(&self, b: usize) -> FrozenGrid<T> {
        let s = self.features.shape();
        let per = s[1] * s[2] * s[3];
        let cells = s[1] * s[2];
        let data = self.features.data()[b * per..(b + 1) * per].to_vec();
        FrozenGrid {
            features: Tensor::new(vec![1, s[1], s[2], s[3]], data).expect("slice"),
            mask: self.mask[b * cells..(b + 1) * cells].to_vec(),
            h_o: self.h_o,
            w_o: self.w_o,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct DenseLayer {
    norm1: BatchNorm,
    conv1: Conv,
    norm2: BatchNorm,
    conv2: Conv,
}

#[derive(Debug, Clone, Copy)]
struct Transition {
    norm: BatchNorm,
    conv: Conv,
}

/// Parameter handles of the DenseNet encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub d_model: usize,
    stem_conv: Conv,
    stem_norm: BatchNorm,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    post_norm: BatchNorm,
    proj: Conv,
    out_norm: LayerNorm,
}

impl Encoder {
    pub fn new<T: Scalar>(config: EncoderConfig, d_model: usize, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if !d_model.is_multiple_of(4) {
            return Err(Error::Config(format!("d_model {d_model} must be divisible by 4 for the image encoding")));
        }
        let k = config.growth_rate;
        let mut c = 2 * k;
        let stem_conv = Conv::new(store, "encoder.stem.conv", config.stem.kernel, 1, c, config.stem.stride, false, rng);
        let stem_norm = BatchNorm::new(store, "encoder.stem.norm", c);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for b in 0..config.num_blocks {
            let mut layers = Vec::new();
            for l in 0..config.layers_per_block {
                let p = format!("encoder.block{b}.layer{l}");
                layers.push(DenseLayer {
                    norm1: BatchNorm::new(store, &format!("{p}.norm1"), c),
                    conv1: Conv::new(store, &format!("{p}.conv1"), 1, c, 4 * k, 1, false, rng),
                    norm2: BatchNorm::new(store, &format!("{p}.norm2"), 4 * k),
                    conv2: Conv::new(store, &format!("{p}.conv2"), 3, 4 * k, k, 1, false, rng),
                });
                c += k;
            }
            blocks.push(layers);
            if b < config.num_transitions {
                let out = transition_channels(c, config.transition_factor);
                let p = format!("encoder.trans{b}");
                transitions.push(Transition { norm: BatchNorm::new(store, &format!("{p}.norm"), c), conv: Conv::new(store, &format!("{p}.conv"), 1, c, out, 1, false, rng) });
                c = out;
            }
        }
        let post_norm = BatchNorm::new(store, "encoder.post_norm", c);
        let proj = Conv::new(store, "encoder.proj", 1, c, d_model, 1, true, rng);
        let out_norm = LayerNorm::new(store, "encoder.out_norm", d_model);
        Ok(Encoder { config, d_model, stem_conv, stem_norm, blocks, transitions, post_norm, proj, out_norm })
    }

    fn dense_layer<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, layer: &DenseLayer, x: Var) -> Result<Var> {
        let h = layer.norm1.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = layer.conv1.forward(g, store, h, false)?;
        let h = layer.norm2.forward(g, store, h)?;
        let h = g.relu(h)?;
        let h = layer.conv2.forward(g, store, h, false)?;
        g.dropout(h, self.config.dropout)
    }

    /// Runs block `b`: each layer sees the channel concatenation of the block
    /// input and every earlier layer's output.
    pub fn dense_block<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, b: usize, x: Var) -> Result<Var> {
        let mut feats = vec![x];
        for layer in &self.blocks[b] {
            let input = if feats.len() == 1 { feats[0] } else { g.concat(&feats, -1)? };
            feats.push(self.dense_layer(g, store, layer, input)?);
        }
        g.concat(&feats, -1)
    }

    /// norm → relu → 1×1 conv to ⌊θc⌋ channels → 2×2 average pool. Odd
    /// spatial dims are first padded by replication.
    pub fn transition<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, b: usize, x: Var) -> Result<Var> {
        let t = &self.transitions[b];
        let h = t.norm.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = t.conv.forward(g, store, h, false)?;
        let h = g.pad_to_even(h)?;
        g.avg_pool2(h)
    }

    /// Encodes `image: [b, H, W, 1]` with pixel validity `mask: [b, H, W]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var, mask: &[bool]) -> Result<FeatureGrid> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[3] != 1 {
            return Err(Error::dim("encode", format!("expected [b, H, W, 1], got {s:?}")));
        }
        let (batch, height, width) = (s[0], s[1], s[2]);
        if mask.len() != batch * height * width {
            return Err(Error::dim("encode", format!("mask has {} entries for image {s:?}", mask.len())));
        }
        let stride = self.config.total_stride();
        if height < stride || width < stride {
            return Err(Error::InputTooSmall(format!("image {height}x{width} is smaller than the encoder stride {stride}")));
        }
        let mut x = self.stem_conv.forward(g, store, image, false)?;
        x = self.stem_norm.forward(g, store, x)?;
        x = g.relu(x)?;
        if self.config.stem.max_pool {
            x = g.max_pool3(x)?;
        }
        for b in 0..self.config.num_blocks {
            x = self.dense_block(g, store, b, x)?;
            if b < self.config.num_transitions {
                x = self.transition(g, store, b, x)?;
            }
        }
        x = self.post_norm.forward(g, store, x)?;
        x = g.relu(x)?;
        x = self.proj.forward(g, store, x, false)?;
        let fs = g.shape(x).to_vec();
        let (h_o, w_o) = (fs[1], fs[2]);
        debug_assert_eq!((h_o, w_o), (height.div_ceil(stride), width.div_ceil(stride)));
        let pe = g.constant(&posenc::image_pe::<T>(h_o, w_o, self.d_model)?);
        x = g.add_trailing(x, pe)?;
        x = self.out_norm.forward(g, store, x)?;
        let cell_mask = downsample_mask(mask, batch, height, width, stride, h_o, w_o);
        for b in 0..batch {
            if !cell_mask[b * h_o * w_o..(b + 1) * h_o * w_o].iter().any(|&v| v) {
                return Err(Error::Usage(format!("batch item {b} has no valid pixels")));
            }
        }
        Ok(FeatureGrid { features: x, mask: cell_mask, batch, h_o, w_o, d_model: self.d_model })
    }
}

/// A cell is valid iff any input pixel it covers is valid.
pub fn downsample_mask(mask: &[bool], batch: usize, height: usize, width: usize, stride: usize, h_o: usize, w_o: usize) -> Vec<bool> {
    let mut out = vec![false; batch * h_o * w_o];
    for b in 0..batch {
        for y in 0..height {
            for x in 0..width {
                if mask[(b * height + y) * width + x] {
                    let (cy, cx) = ((y / stride).min(h_o - 1), (x / stride).min(w_o - 1));
                    out[(b * h_o + cy) * w_o + cx] = true;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_arithmetic() {
        assert_eq!(dense_block_channels(8, 1, 4), 12);
        assert_eq!(dense_block_channels(48, 16, 24), 432);
        assert_eq!(transition_channels(100, 0.5), 50);
        assert_eq!(EncoderConfig::toy().total_stride(), 8);
        assert_eq!(EncoderConfig::paper().total_stride(), 16);
    }

    #[test]
    fn theta_validation() {
        let mut c = EncoderConfig::toy();
        c.transition_factor = 0.0;
        assert!(c.validate().is_err());
        c.transition_factor = 1.2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mask_any_valid_pixel() {
        // 1 x 4 x 8 image, stride 4: columns >= 5 padded
        let mask: Vec<bool> = (0..32).map(|i| i % 8 < 5).collect();
        let m = downsample_mask(&mask, 1, 4, 8, 4, 1, 2);
        assert_eq!(m, vec![true, true]);
        let mask: Vec<bool> = (0..32).map(|i| i % 8 < 4).collect();
        assert_eq!(downsample_mask(&mask, 1, 4, 8, 4, 1, 2), vec![true, false]);
    }
}
