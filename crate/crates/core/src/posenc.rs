//! Sinusoidal positional encodings for token positions (1-D) and feature-grid
//! cells (2-D, coordinates normalized by the grid size).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const TEMPERATURE: f64 = 10000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionalConfig {
    pub temperature: f64,
    /// Multiply token embeddings by sqrt(d_model) before adding the encoding.
    pub scale_embedding: bool,
}

impl Default for PositionalConfig {
    fn default() -> Self {
        PositionalConfig { temperature: TEMPERATURE, scale_embedding: true }
    }
}

/// Encoding of a (possibly fractional) position: slot `2i` holds
/// `sin(p / T^(2i/d))`, slot `2i+1` the matching cosine.
pub fn word_pe(p: f64, d: usize) -> Result<Vec<f64>> {
    word_pe_with(p, d, TEMPERATURE)
}

pub fn word_pe_with(p: f64, d: usize, temperature: f64) -> Result<Vec<f64>> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding size {d} must be even and positive")));
    }
    if temperature <= 0.0 {
        return Err(Error::Config("positional temperature must be positive".into()));
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let angle = p / temperature.powf(2.0 * i as f64 / d as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// `[len, d]` table of word encodings for positions `0..len`.
pub fn word_table<T: Scalar>(len: usize, d: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(len * d);
    for p in 0..len {
        data.extend(word_pe(p as f64, d)?.into_iter().map(T::of));
    }
    Tensor::new(vec![len, d], data)
}

/// `[h_o, w_o, d]` grid encoding. Cell `(x, y)` gets
/// `[word_pe(x / h_o, d/2); word_pe(y / w_o, d/2)]`, with `x` the row index.
pub fn image_pe<T: Scalar>(h_o: usize, w_o: usize, d: usize) -> Result<Tensor<T>> {
    if !d.is_multiple_of(4) || d == 0 {
        return Err(Error::Config(format!("image positional encoding size {d} must be divisible by 4")));
    }
    let rows: Vec<Vec<f64>> = (0..h_o).map(|x| word_pe(x as f64 / h_o as f64, d / 2)).collect::<Result<_>>()?;
    let cols: Vec<Vec<f64>> = (0..w_o).map(|y| word_pe(y as f64 / w_o as f64, d / 2)).collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(h_o * w_o * d);
    for r in &rows {
        for c in &cols {
            data.extend(r.iter().chain(c).map(|&v| T::of(v)));
        }
    }
    Tensor::new(vec![h_o, w_o, d], data)
}
