//! Generates a small corpus, prints one rendered formula as ASCII art and
//! writes the whole set to a directory (default: a temp dir).
//!
//!     cargo run --example synthetic_corpus -- /tmp/corpus

use comer::data::{generate, save_dataset, DatasetStats, GlyphAtlas, GrammarConfig, RenderConfig, Vocab};

fn main() -> comer::Result<()> {
    let vocab = Vocab::default();
    let atlas = GlyphAtlas::builtin(&vocab)?;
    let samples = generate(&vocab, &atlas, &GrammarConfig::default(), &RenderConfig::default(), 42, 200)?;

    let s = samples.iter().find(|s| (6..=10).contains(&s.len())).unwrap_or(&samples[0]);
    println!("label: {}", vocab.detokenize(&s.tokens)?);
    for y in 0..s.image.height {
        let row: String = (0..s.image.width).map(|x| if s.image.at(y, x) > 0.5 { '#' } else { '.' }).collect();
        println!("{row}");
    }

    let stats = DatasetStats::of(&samples);
    println!("{} samples, {} with length >= 15", stats.size, stats.long);

    let dir = match std::env::args().nth(1) {
        Some(d) => std::path::PathBuf::from(d),
        None => std::env::temp_dir().join("comer-corpus"),
    };
    save_dataset(&dir, &samples, &vocab)?;
    println!("written to {}", dir.display());
    Ok(())
}
