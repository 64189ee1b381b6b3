//! Parameter groups shared by the encoder and decoder.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, NormId, NormState, ParamId, ParamStore, Scalar, Var};

/// `x · W + b` over the last axis; `W` is `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), &[d_in, d_out], d_in, d_out, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), &[d_out]));
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_trailing(y, b)
            }
            None => Ok(y),
        }
    }
}

/// NHWC convolution with a `[k, k, c_in, c_out]` kernel.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
}

impl Conv {
    /// He-normal initialized kernel.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, k: usize, c_in: usize, c_out: usize, stride: usize, bias: bool, rng: &mut Rng) -> Self {
        let std = (2.0 / (k * k * c_in) as f64).sqrt();
        let weight = store.add_normal(format!("{name}.weight"), &[k, k, c_in, c_out], std, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), &[c_out]));
        Conv { weight, bias, stride }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, relu: bool) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, relu)
    }
}

/// Batch normalization over the channel (last) axis with running statistics
/// stored as `<name>.running_mean` / `<name>.running_var`.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: NormId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add_full(format!("{name}.weight"), &[channels], 1.0);
        let beta = store.add_zeros(format!("{name}.bias"), &[channels]);
        let state = store.add_norm(name, NormState::standard(channels));
        BatchNorm { gamma, beta, state }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batchnorm(x, gamma, beta, store.norm(self.state), Some(self.state))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        LayerNorm { gamma: store.add_full(format!("{name}.weight"), &[d], 1.0), beta: store.add_zeros(format!("{name}.bias"), &[d]) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layernorm(x, gamma, beta)
    }
}
