//! Central finite differences against backpropagation for randomly probed
//! parameters of the toy model's full bidirectional loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use comer::data::{collate, generate, GlyphAtlas, GrammarConfig, RenderConfig, Sample, Vocab};
use comer::model::{Model, ModelConfig};
use comer::tensor::gradcheck::{check_params, REL_TOLERANCE};

fn main() -> comer::Result<()> {
    let vocab = Vocab::default();
    let atlas = GlyphAtlas::builtin(&vocab)?;
    let samples: Vec<Sample> = generate(&vocab, &atlas, &GrammarConfig::default(), &RenderConfig::default(), 11, 40)?
        .into_iter()
        .filter(|s| s.len() <= 6)
        .take(2)
        .collect();
    let batch = collate(&samples.iter().collect::<Vec<_>>())?;
    let model: Model<f64> = Model::new(ModelConfig::toy(), 5)?;

    let mut store = model.store.clone();
    let ids: Vec<_> = store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for &id in &ids {
        if store.name(id).ends_with(".bias") {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
        }
    }
    let probes: Vec<_> = (0..60)
        .map(|_| {
            let id = ids[rng.gen_range(0..ids.len())];
            (id, rng.gen_range(0..store.get(id).numel()))
        })
        .collect();
    let check = check_params(&mut store, &probes, 3, |g, s| {
        let m = Model { config: model.config, encoder: model.encoder.clone(), decoder: model.decoder.clone(), store: s.clone() };
        m.batch_loss(g, &batch)
    })?;
    println!(
        "{} probes, {} skipped at a relu kink, max relative error {:.2e} (tolerance {REL_TOLERANCE:e})",
        check.probes, check.straddled, check.max_rel_error
    );
    Ok(())
}
