//! Trains a toy fusion model for two epochs on 300 samples, then evaluates it
//! with joint beam search on a held-out set.
//!
//!     cargo run --release --example train_and_eval

use comer::cli::{eval_run, train_run};
use comer::config::RunConfig;
use comer::data::{generate, GlyphAtlas, Vocab};

fn main() -> comer::Result<()> {
    let mut cfg = RunConfig::toy();
    cfg.set_override("train.epochs=2")?;
    cfg.set_override("model.coverage=fusion")?;
    let vocab = Vocab::default();
    let atlas = GlyphAtlas::builtin(&vocab)?;
    let train = generate(&vocab, &atlas, &cfg.grammar, &cfg.render, 1, 300)?;
    let test = generate(&vocab, &atlas, &cfg.grammar, &cfg.render, 2, 40)?;

    let out = std::env::temp_dir().join("comer-train-example");
    let _ = std::fs::remove_dir_all(&out);
    let report = train_run(&cfg, &train, &out, false)?;
    for e in &report.epochs {
        println!("epoch {} loss {:.4} val exprate {:.3}", e.epoch, e.train_loss, e.val_exprate);
    }

    let cfg = RunConfig::from_file(&out.join("config.ini"))?;
    let eval = eval_run(&cfg, &out.join("best.ckpt"), &test, 3)?;
    println!("{}", eval.report.to_json());
    print!("{}", eval.report.table());
    Ok(())
}
