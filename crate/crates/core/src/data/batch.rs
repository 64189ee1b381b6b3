use rand::seq::SliceRandom;

use super::vocab::PAD;
use super::Sample;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::train::make_targets;

/// Zero-padded images with validity masks and teacher-forcing sequences for
/// both reading directions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub size: usize,
    pub height: usize,
    pub width: usize,
    /// `[size, height, width]`
    pub images: Vec<f32>,
    /// `[size, height, width]`, true inside each sample's own extent.
    pub mask: Vec<bool>,
    /// Decoder steps per sequence (longest payload + 1).
    pub steps: usize,
    /// `[size, steps]` decoder inputs, starting with the direction's start token.
    pub l2r_input: Vec<usize>,
    /// `[size, steps]` next-token targets, padded with the pad id.
    pub l2r_target: Vec<usize>,
    pub r2l_input: Vec<usize>,
    pub r2l_target: Vec<usize>,
}

pub fn collate(samples: &[&Sample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot collate an empty batch".into()));
    }
    let size = samples.len();
    let height = samples.iter().map(|s| s.image.height).max().unwrap();
    let width = samples.iter().map(|s| s.image.width).max().unwrap();
    let steps = samples.iter().map(|s| s.tokens.len()).max().unwrap() + 1;
    let mut b = Batch {
        ids: samples.iter().map(|s| s.id).collect(),
        size,
        height,
        width,
        images: vec![0.0; size * height * width],
        mask: vec![false; size * height * width],
        steps,
        l2r_input: vec![PAD; size * steps],
        l2r_target: vec![PAD; size * steps],
        r2l_input: vec![PAD; size * steps],
        r2l_target: vec![PAD; size * steps],
    };
    for (i, s) in samples.iter().enumerate() {
        let img = &s.image;
        for y in 0..img.height {
            let dst = (i * height + y) * width;
            b.images[dst..dst + img.width].copy_from_slice(&img.pixels[y * img.width..(y + 1) * img.width]);
            b.mask[dst..dst + img.width].iter_mut().for_each(|m| *m = true);
        }
        let t = make_targets(&s.tokens)?;
        let n = t.l2r.len() - 1;
        let row = i * steps;
        b.l2r_input[row..row + n].copy_from_slice(&t.l2r[..n]);
        b.l2r_target[row..row + n].copy_from_slice(&t.l2r[1..]);
        b.r2l_input[row..row + n].copy_from_slice(&t.r2l[..n]);
        b.r2l_target[row..row + n].copy_from_slice(&t.r2l[1..]);
    }
    Ok(b)
}

/// Index lists of at most `batch_size`. Samples are grouped by image width
/// to limit padding; ties and the batch order are shuffled by `rng`.
pub fn shuffled_batches(widths: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..widths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| widths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}
