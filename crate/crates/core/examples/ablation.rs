//! A miniature four-way coverage ablation: 1 epoch, 64 training samples,
//! 16 test samples, 2 seeds.

use comer::cli::ablate;
use comer::config::RunConfig;
use comer::data::{generate, GlyphAtlas, Vocab};

fn main() -> comer::Result<()> {
    let mut cfg = RunConfig::toy();
    cfg.set_override("train.epochs=1")?;
    cfg.ablate_beam = 2;
    let vocab = Vocab::default();
    let atlas = GlyphAtlas::builtin(&vocab)?;
    let train = generate(&vocab, &atlas, &cfg.grammar, &cfg.render, 101, 64)?;
    let test = generate(&vocab, &atlas, &cfg.grammar, &cfg.render, 102, 16)?;

    let out = std::env::temp_dir().join("comer-ablation-example");
    let _ = std::fs::remove_dir_all(&out);
    std::fs::create_dir_all(&out)?;
    let table = ablate(&cfg, &train, &test, 2, &out)?;
    print!("{}", table.pretty());
    print!("{}", table.to_tsv());
    Ok(())
}
