//! Step-by-step decoding with a cache reproduces the parallel teacher-forced
//! logits for every coverage mode.

use comer::data::{generate, GlyphAtlas, GrammarConfig, RenderConfig, Vocab};
use comer::decoder::CoverageMode;
use comer::model::{Model, ModelConfig};
use comer::tensor::Graph;
use comer::train::make_targets;

fn main() -> comer::Result<()> {
    let vocab = Vocab::default();
    let atlas = GlyphAtlas::builtin(&vocab)?;
    let sample = generate(&vocab, &atlas, &GrammarConfig::default(), &RenderConfig::default(), 3, 1)?.remove(0);
    let targets = make_targets(&sample.tokens)?;
    let input = &targets.l2r[..targets.l2r.len() - 1];

    for mode in CoverageMode::ALL {
        let model: Model<f32> = Model::new(ModelConfig::toy().with_coverage(mode), 1)?;
        let grid = model.encode_image(&sample.image)?;

        let mut g = Graph::eval();
        let fg = grid.attach(&mut g);
        let (logits, _) = model.decode_parallel(&mut g, &fg, input, 1)?;
        let parallel = g.value(logits).to_vec();

        let v = model.config.decoder.vocab_size;
        let mut cache = model.decoder.start(&model.store, &grid, 1)?;
        let mut worst = 0f32;
        for (t, &tok) in input.iter().enumerate() {
            let row = model.decoder.decode_step(&model.store, &mut cache, &[tok])?;
            for k in 0..v {
                worst = worst.max((row.data()[k] - parallel[t * v + k]).abs());
            }
        }
        println!("{mode}: {} steps, max |parallel - incremental| = {worst:.2e}", input.len());
    }
    Ok(())
}
