//! Synthetic formula corpus: token grammar, glyph rendering, augmentation,
//! batching and on-disk format.

mod atlas;
mod batch;
mod grammar;
mod io;
mod render;
mod vocab;

pub use atlas::{GlyphAtlas, Markers, GLYPH_SIZE};
pub use batch::{collate, shuffled_batches, Batch};
pub use grammar::{generate, generate_tokens, GrammarConfig};
pub use io::{length_histogram, load_dataset, save_dataset, DatasetStats};
pub use render::{render, scale_augment, scale_augment_by, Image, RenderConfig};
pub use vocab::{Vocab, EOS, PAD, SOS_L2R, SOS_R2L};

/// A rendered formula and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub image: Image,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
