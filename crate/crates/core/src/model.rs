//! Encoder–decoder model: parameter construction, the bidirectional training
//! loss and checkpoint naming.

use std::path::Path;

use crate::data::{Batch, Image, Vocab};
use crate::decoder::{CoverageMode, CoverageState, Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, FeatureGrid, FrozenGrid};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{checkpoint, Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig { encoder: EncoderConfig::toy(), decoder: DecoderConfig::toy(Vocab::default().len()) }
    }

    pub fn paper() -> Self {
        ModelConfig { encoder: EncoderConfig::paper(), decoder: DecoderConfig::paper(Vocab::default().len()) }
    }

    pub fn with_coverage(mut self, mode: CoverageMode) -> Self {
        self.decoder.coverage = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model; the same seed gives the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "init");
        let encoder = Encoder::new(config.encoder, config.decoder.d_model, &mut store, &mut rng)?;
        let decoder = Decoder::new(config.decoder, &mut store, &mut rng)?;
        Ok(Model { config, encoder, decoder, store })
    }

    pub fn coverage(&self) -> CoverageMode {
        self.config.decoder.coverage
    }

    /// Makes every refinement module an exact identity.
    pub fn zero_arms(&mut self) {
        self.decoder.zero_arms(&mut self.store);
    }

    pub fn encode(&self, g: &mut Graph<T>, images: &Tensor<T>, mask: &[bool]) -> Result<FeatureGrid> {
        let x = g.constant(images);
        self.encoder.encode(g, &self.store, x, mask)
    }

    /// Eval-mode encoding of one image.
    pub fn encode_image(&self, image: &Image) -> Result<FrozenGrid<T>> {
        let mut g = Graph::eval();
        let t = image_tensor(&image.pixels, 1, image.height, image.width)?;
        let grid = self.encode(&mut g, &t, &vec![true; image.pixels.len()])?;
        Ok(grid.freeze(&g))
    }

    pub fn decode_parallel(&self, g: &mut Graph<T>, grid: &FeatureGrid, ids: &[usize], batch: usize) -> Result<(Var, CoverageState)> {
        self.decoder.decode_parallel(g, &self.store, grid, ids, batch)
    }

    /// Mean of the left-to-right and right-to-left token cross-entropies.
    /// Both directions run as one decoder pass over a doubled batch.
    pub fn batch_loss(&self, g: &mut Graph<T>, batch: &Batch) -> Result<Var> {
        let images = image_tensor(&batch.images, batch.size, batch.height, batch.width)?;
        let grid = self.encode(g, &images, &batch.mask)?;
        let both = g.concat(&[grid.features, grid.features], 0)?;
        let mut doubled = grid.clone();
        doubled.features = both;
        doubled.batch = 2 * batch.size;
        doubled.mask = [grid.mask.as_slice(), grid.mask.as_slice()].concat();
        let ids = [batch.l2r_input.as_slice(), batch.r2l_input.as_slice()].concat();
        let targets = [batch.l2r_target.as_slice(), batch.r2l_target.as_slice()].concat();
        let (logits, _) = self.decode_parallel(g, &doubled, &ids, 2 * batch.size)?;
        sequence_loss(g, logits, &targets)
    }

    /// Named tensors: parameters by name, norm statistics as
    /// `<norm>.running_mean` / `<norm>.running_var`.
    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self.store.ids().map(|id| (self.store.name(id).to_string(), self.store.get(id).clone().with_requires_grad(false))).collect();
        for (name, s) in self.store.norms() {
            let c = s.channels();
            out.push((format!("{name}.running_mean"), Tensor::new(vec![c], s.running_mean.clone()).expect("norm shape")));
            out.push((format!("{name}.running_var"), Tensor::new(vec![c], s.running_var.clone()).expect("norm shape")));
        }
        out
    }

    /// Loads model tensors, ignoring `meta.*` and `velocity.*` entries.
    /// Every model tensor must be present with a matching shape.
    pub fn load_entries(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (name, t) in entries {
            if name.starts_with("meta.") || name.starts_with("velocity.") {
                continue;
            }
            if let Some(norm) = name.strip_suffix(".running_mean").or_else(|| name.strip_suffix(".running_var")) {
                let id = self.store.norm_id(norm).ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name:?}")))?;
                let state = self.store.norm_mut(id);
                if t.shape() != [state.channels()] {
                    return Err(Error::Checkpoint(format!("tensor {name:?}: checkpoint shape {:?} does not match model shape [{}]", t.shape(), state.channels())));
                }
                if name.ends_with("mean") {
                    state.running_mean = t.data().to_vec();
                } else {
                    state.running_var = t.data().to_vec();
                }
                state.initialized = true;
            } else {
                self.store.set(name, t.clone())?;
            }
            seen.insert(name.as_str());
        }
        for (name, _) in self.checkpoint_entries() {
            if !seen.contains(name.as_str()) {
                return Err(Error::Checkpoint(format!("checkpoint is missing tensor {name:?}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_entries())
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut m = Model::new(config, 0)?;
        m.load_entries(&checkpoint::load(path)?)?;
        Ok(m)
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config, encoder: self.encoder.clone(), decoder: self.decoder.clone(), store: self.store.cast() }
    }
}

/// `[b, H, W]` pixels as a `[b, H, W, 1]` tensor.
pub fn image_tensor<T: Scalar>(pixels: &[f32], batch: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    Tensor::new(vec![batch, height, width, 1], pixels.iter().map(|&p| T::of(p as f64)).collect())
}

/// Mean cross-entropy of `logits: [.., V]` against `targets`, pad excluded.
pub fn sequence_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, targets, crate::data::PAD)
}
