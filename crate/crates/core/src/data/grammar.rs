use rand::Rng as _;

use super::atlas::GlyphAtlas;
use super::render::{render, RenderConfig};
use super::vocab::Vocab;
use super::Sample;
use crate::error::{Error, Result};
use crate::rng::{derive_indexed, Rng};
use rand::SeedableRng;

/// Length mixture and nesting limit of the formula grammar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrammarConfig {
    /// Probability of drawing a length from `1..=short_max`; otherwise from
    /// `short_max+1..=long_max`.
    pub short_fraction: f64,
    pub short_max: usize,
    pub long_max: usize,
    /// Script nesting depth limit.
    pub max_depth: usize,
    pub script_prob: f64,
    pub paren_prob: f64,
    pub operator_prob: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig { short_fraction: 0.7, short_max: 14, long_max: 30, max_depth: 2, script_prob: 0.25, paren_prob: 0.1, operator_prob: 0.35 }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.short_fraction) || self.short_max == 0 || self.long_max <= self.short_max {
            return Err(Error::Config("grammar lengths need 0 < short_max < long_max and a fraction in [0, 1]".into()));
        }
        if self.max_depth > 2 {
            return Err(Error::Config("script nesting depth is limited to 2".into()));
        }
        Ok(())
    }

    fn sample_length(&self, rng: &mut Rng) -> usize {
        if rng.gen_bool(self.short_fraction) {
            rng.gen_range(1..=self.short_max)
        } else {
            rng.gen_range(self.short_max + 1..=self.long_max)
        }
    }
}

struct Ids {
    atoms: Vec<usize>,
    ops: Vec<usize>,
    open_paren: usize,
    close_paren: usize,
    sup: usize,
    sub: usize,
    open: usize,
    close: usize,
}

impl Ids {
    fn new(v: &Vocab) -> Result<Self> {
        let ids = |ts: &[&str]| ts.iter().map(|t| v.id(t)).collect::<Result<Vec<_>>>();
        Ok(Ids {
            atoms: ids(&["a", "b", "c", "x", "y", "z", "0", "1", "2", "3", "4"])?,
            ops: ids(&["+", "-", "="])?,
            open_paren: v.id("(")?,
            close_paren: v.id(")")?,
            sup: v.id("^")?,
            sub: v.id("_")?,
            open: v.id("{")?,
            close: v.id("}")?,
        })
    }
}

/// Appends exactly `n` tokens forming a well-bracketed expression.
fn expr(ids: &Ids, cfg: &GrammarConfig, n: usize, depth: usize, rng: &mut Rng, out: &mut Vec<usize>) {
    let mut remaining = n;
    // whether the last emitted item can carry a script or precede an operator
    let mut operand = false;
    while remaining > 0 {
        let r: f64 = rng.gen();
        if operand && depth < cfg.max_depth && remaining >= 4 && r < cfg.script_prob {
            let inner = rng.gen_range(1..=(remaining - 3).min(6));
            out.push(if rng.gen_bool(0.5) { ids.sup } else { ids.sub });
            out.push(ids.open);
            expr(ids, cfg, inner, depth + 1, rng, out);
            out.push(ids.close);
            remaining -= inner + 3;
            operand = true;
        } else if remaining >= 3 && r < cfg.script_prob + cfg.paren_prob {
            let inner = rng.gen_range(1..=(remaining - 2).min(6));
            out.push(ids.open_paren);
            expr(ids, cfg, inner, depth, rng, out);
            out.push(ids.close_paren);
            remaining -= inner + 2;
            operand = true;
        } else if operand && remaining >= 2 && r < cfg.script_prob + cfg.paren_prob + cfg.operator_prob {
            out.push(ids.ops[rng.gen_range(0..ids.ops.len())]);
            remaining -= 1;
            operand = false;
        } else {
            out.push(ids.atoms[rng.gen_range(0..ids.atoms.len())]);
            remaining -= 1;
            operand = true;
        }
    }
}

/// Token sequence of sample `index` under `seed`.
pub fn generate_tokens(vocab: &Vocab, cfg: &GrammarConfig, seed: u64, index: usize) -> Result<Vec<usize>> {
    cfg.validate()?;
    let ids = Ids::new(vocab)?;
    let mut rng = Rng::seed_from_u64(derive_indexed(seed, "tokens", index as u64));
    let n = cfg.sample_length(&mut rng);
    let mut out = Vec::with_capacity(n);
    expr(&ids, cfg, n, 0, &mut rng, &mut out);
    Ok(out)
}

/// `n` rendered samples, a pure function of `(cfg, seed)`.
pub fn generate(vocab: &Vocab, atlas: &GlyphAtlas, cfg: &GrammarConfig, render_cfg: &RenderConfig, seed: u64, n: usize) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let tokens = generate_tokens(vocab, cfg, seed, i)?;
            let image = render(&tokens, atlas, render_cfg, derive_indexed(seed, "render", i as u64))?;
            Ok(Sample { id: i, tokens, image })
        })
        .collect()
}
