use std::collections::HashMap;

use super::vocab::Vocab;
use crate::error::{Error, Result};

pub const GLYPH_SIZE: usize = 8;

#[rustfmt::skip]
const GLYPHS: [(&str, [&str; 8]); 16] = [
    ("a", ["........", "........", "..####..", "......#.", "..#####.", ".#....#.", ".#...##.", "..###.#."]),
    ("b", [".#......", ".#......", ".#.###..", ".##...#.", ".#....#.", ".#....#.", ".##...#.", ".#.###.."]),
    ("c", ["........", "........", "..####..", ".#....#.", ".#......", ".#......", ".#....#.", "..####.."]),
    ("x", ["........", "........", ".#....#.", "..#..#..", "...##...", "...##...", "..#..#..", ".#....#."]),
    ("y", ["........", ".#....#.", ".#....#.", "..#..#..", "...##...", "...#....", "..#.....", ".#......"]),
    ("z", ["........", "........", ".######.", ".....#..", "....#...", "...#....", "..#.....", ".######."]),
    ("0", ["..####..", ".#....#.", ".#...##.", ".#..#.#.", ".#.#..#.", ".##...#.", ".#....#.", "..####.."]),
    ("1", ["...##...", "..#.#...", "....#...", "....#...", "....#...", "....#...", "....#...", "..#####."]),
    ("2", ["..####..", ".#....#.", "......#.", ".....#..", "....#...", "...#....", "..#.....", ".######."]),
    ("3", ["..####..", ".#....#.", "......#.", "...###..", "......#.", "......#.", ".#....#.", "..####.."]),
    ("4", [".....#..", "....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#.."]),
    ("+", ["........", "...#....", "...#....", ".#####..", "...#....", "...#....", "........", "........"]),
    ("-", ["........", "........", "........", ".######.", "........", "........", "........", "........"]),
    ("=", ["........", "........", ".######.", "........", "........", ".######.", "........", "........"]),
    ("(", ["....#...", "...#....", "..#.....", "..#.....", "..#.....", "..#.....", "...#....", "....#..."]),
    (")", ["...#....", "....#...", ".....#..", ".....#..", ".....#..", ".....#..", "....#...", "...#...."]),
];

/// Binary `GLYPH_SIZE × GLYPH_SIZE` bitmaps for the visible symbols.
/// Script markers and braces have no glyph; they only move the baseline.
#[derive(Debug, Clone)]
pub struct GlyphAtlas {
    glyphs: HashMap<usize, Vec<bool>>,
    markers: Markers,
}

/// Ids of the invisible layout tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Markers {
    pub sup: usize,
    pub sub: usize,
    pub open: usize,
    pub close: usize,
}

impl GlyphAtlas {
    pub fn builtin(vocab: &Vocab) -> Result<Self> {
        let mut glyphs = HashMap::new();
        for (tok, rows) in GLYPHS {
            let bits = rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect();
            glyphs.insert(vocab.id(tok)?, bits);
        }
        let markers = Markers { sup: vocab.id("^")?, sub: vocab.id("_")?, open: vocab.id("{")?, close: vocab.id("}")? };
        Ok(GlyphAtlas { glyphs, markers })
    }

    pub fn markers(&self) -> Markers {
        self.markers
    }

    pub fn is_structural(&self, id: usize) -> bool {
        let m = self.markers;
        [m.sup, m.sub, m.open, m.close].contains(&id)
    }

    pub fn glyph(&self, id: usize) -> Result<&[bool]> {
        self.glyphs.get(&id).map(Vec::as_slice).ok_or_else(|| Error::Atlas(format!("no glyph for token id {id}")))
    }

    /// Removes a glyph; used to exercise missing-glyph handling.
    pub fn without(mut self, id: usize) -> Self {
        self.glyphs.remove(&id);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_distinct() {
        let v = Vocab::default();
        let atlas = GlyphAtlas::builtin(&v).unwrap();
        let visible: Vec<&[bool]> = v.symbols().filter(|&s| !atlas.is_structural(s)).map(|s| atlas.glyph(s).unwrap()).collect();
        assert_eq!(visible.len(), 16);
        for i in 0..visible.len() {
            assert_eq!(visible[i].len(), GLYPH_SIZE * GLYPH_SIZE);
            for j in 0..i {
                assert_ne!(visible[i], visible[j]);
            }
        }
    }
}
