//! Trains a tiny fusion model briefly and exports the refinement heatmaps of
//! one greedy decode.

use comer::cli::{train_run, visualize};
use comer::config::RunConfig;
use comer::data::{generate, GlyphAtlas, Vocab};

fn main() -> comer::Result<()> {
    let mut cfg = RunConfig::toy();
    cfg.set_override("train.epochs=1")?;
    let vocab = Vocab::default();
    let atlas = GlyphAtlas::builtin(&vocab)?;
    let train = generate(&vocab, &atlas, &cfg.grammar, &cfg.render, 5, 120)?;

    let run = std::env::temp_dir().join("comer-vis-example");
    let _ = std::fs::remove_dir_all(&run);
    train_run(&cfg, &train, &run.join("model"), false)?;
    let cfg = RunConfig::from_file(&run.join("model").join("config.ini"))?;

    let image = &train[0].image;
    let summary = visualize(&cfg, &run.join("model").join("best.ckpt"), image, &run.join("heatmaps"), Some(12))?;
    println!("decoded: {}", summary.tokens.join(" "));
    for l in &summary.layers {
        println!("layer {}: attended > unattended in {}/{} steps", l.layer, l.attended_higher, l.compared_steps);
    }
    println!("heatmaps in {}", run.join("heatmaps").display());
    Ok(())
}
