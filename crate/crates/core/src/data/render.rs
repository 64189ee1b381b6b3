use rand::{Rng as _, SeedableRng};

use super::atlas::{GlyphAtlas, GLYPH_SIZE};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Grayscale image, row-major, ink 1 on background 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height * width != pixels.len() || height == 0 || width == 0 {
            return Err(Error::dim("image", format!("{height}x{width} with {} pixels", pixels.len())));
        }
        Ok(Image { height, width, pixels })
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub margin: usize,
    /// Nominal blank columns between glyphs.
    pub gap: usize,
    /// Gap jitter, uniform in `-jitter..=jitter`.
    pub jitter: usize,
    /// Baseline shift of a first-level script.
    pub script_shift: usize,
    /// Extra shift per further nesting level.
    pub nested_shift: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { margin: 2, gap: 2, jitter: 2, script_shift: GLYPH_SIZE / 2, nested_shift: 2 }
    }
}

impl RenderConfig {
    /// Largest baseline displacement at nesting depth 2.
    pub fn max_shift(&self) -> usize {
        self.script_shift + self.nested_shift
    }

    pub fn height(&self) -> usize {
        GLYPH_SIZE + 2 * self.max_shift() + 2 * self.margin
    }
}

/// Lays visible glyphs left to right. `^`/`_` followed by `{` raise or lower
/// the baseline until the matching `}`.
pub fn render(tokens: &[usize], atlas: &GlyphAtlas, cfg: &RenderConfig, seed: u64) -> Result<Image> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut placements = Vec::new();
    let m = atlas.markers();
    let mut stack: Vec<isize> = Vec::new();
    let mut pending: Option<isize> = None;
    let mut offset: isize = 0;
    let mut x = cfg.margin as isize;
    for &t in tokens {
        if t == m.sup || t == m.sub {
            let level = stack.iter().filter(|&&s| s != 0).count();
            let mag = if level == 0 { cfg.script_shift } else { cfg.nested_shift } as isize;
            pending = Some(if t == m.sup { -mag } else { mag });
            continue;
        }
        if t == m.open {
            let shift = pending.take().unwrap_or(0);
            offset += shift;
            stack.push(shift);
            continue;
        }
        if t == m.close {
            offset -= stack.pop().unwrap_or(0);
            continue;
        }
        let glyph = atlas.glyph(t)?;
        if !placements.is_empty() {
            let j = if cfg.jitter > 0 { rng.gen_range(-(cfg.jitter as isize)..=cfg.jitter as isize) } else { 0 };
            x += (GLYPH_SIZE + cfg.gap) as isize + j;
        }
        placements.push((x as usize, offset, glyph));
    }
    let height = cfg.height();
    let width = placements.last().map_or(GLYPH_SIZE, |p| p.0 + GLYPH_SIZE) + cfg.margin;
    let mut pixels = vec![0f32; height * width];
    let top = (cfg.margin + cfg.max_shift()) as isize;
    for (px, off, glyph) in placements {
        let y0 = (top + off).clamp(0, (height - GLYPH_SIZE) as isize) as usize;
        for gy in 0..GLYPH_SIZE {
            for gx in 0..GLYPH_SIZE {
                if glyph[gy * GLYPH_SIZE + gx] {
                    pixels[(y0 + gy) * width + px + gx] = 1.0;
                }
            }
        }
    }
    Image::new(height, width, pixels)
}

/// Aspect-preserving bilinear rescale by a factor drawn from `[lo, hi]`.
pub fn scale_augment(image: &Image, rng: &mut Rng, lo: f64, hi: f64) -> Image {
    let s = rng.gen_range(lo..=hi);
    scale_augment_by(image, s)
}

/// Bilinear rescale to `round(s·H) × round(s·W)` with half-pixel centers.
pub fn scale_augment_by(image: &Image, s: f64) -> Image {
    let oh = ((image.height as f64 * s).round() as usize).max(1);
    let ow = ((image.width as f64 * s).round() as usize).max(1);
    if oh == image.height && ow == image.width {
        return image.clone();
    }
    let (sy, sx) = (image.height as f64 / oh as f64, image.width as f64 / ow as f64);
    let sample_axis = |o: usize, scale: f64, n: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..ow).map(|x| sample_axis(x, sx, image.width)).collect();
    let mut pixels = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = sample_axis(y, sy, image.height);
        for &(x0, x1, fx) in &cols {
            let top = image.at(y0, x0) as f64 * (1.0 - fx) + image.at(y0, x1) as f64 * fx;
            let bot = image.at(y1, x0) as f64 * (1.0 - fx) + image.at(y1, x1) as f64 * fx;
            pixels.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    Image { height: oh, width: ow, pixels }
}
