use proptest::prelude::*;
use rand::SeedableRng;

use comer::data::*;
use comer::rng::Rng;

fn setup() -> (Vocab, GlyphAtlas) {
    let vocab = Vocab::default();
    let atlas = GlyphAtlas::builtin(&vocab).unwrap();
    (vocab, atlas)
}

fn corpus(seed: u64, n: usize) -> Vec<Sample> {
    let (vocab, atlas) = setup();
    generate(&vocab, &atlas, &GrammarConfig::default(), &RenderConfig::default(), seed, n).unwrap()
}

#[test]
fn same_seed_same_corpus() {
    assert_eq!(corpus(5, 50), corpus(5, 50));
    assert_ne!(corpus(5, 50), corpus(6, 50));
}

#[test]
fn braces_and_parens_balance() {
    let (vocab, _) = setup();
    let pairs = [(vocab.id("{").unwrap(), vocab.id("}").unwrap()), (vocab.id("(").unwrap(), vocab.id(")").unwrap())];
    for s in corpus(1, 500) {
        for (open, close) in pairs {
            let mut depth = 0i32;
            for &t in &s.tokens {
                depth += i32::from(t == open) - i32::from(t == close);
                assert!(depth >= 0, "{}", vocab.detokenize(&s.tokens).unwrap());
            }
            assert_eq!(depth, 0);
        }
    }
}

#[test]
fn script_nesting_stays_within_two_levels() {
    let (vocab, _) = setup();
    let (open, close) = (vocab.id("{").unwrap(), vocab.id("}").unwrap());
    for s in corpus(2, 500) {
        let mut depth = 0;
        for &t in &s.tokens {
            if t == open {
                depth += 1;
                assert!(depth <= 2);
            } else if t == close {
                depth -= 1;
            }
        }
    }
}

#[test]
fn two_thousand_samples_have_enough_long_ones() {
    let (vocab, _) = setup();
    let lens: Vec<usize> = (0..2000).map(|i| generate_tokens(&vocab, &GrammarConfig::default(), 7, i).unwrap().len()).collect();
    assert!(lens.iter().filter(|&&l| l >= 15).count() >= 50);
    assert!(lens.iter().all(|&l| (1..=30).contains(&l)));
    assert!(lens.contains(&1) && lens.contains(&30));
}

#[test]
fn single_token_is_one_tile_wide() {
    let (vocab, atlas) = setup();
    let cfg = RenderConfig::default();
    let img = render(&[vocab.id("x").unwrap()], &atlas, &cfg, 0).unwrap();
    assert_eq!(img.width, GLYPH_SIZE + 2 * cfg.margin);
    assert_eq!(img.height, cfg.height());
}

#[test]
fn repeated_symbols_render_identical_tiles() {
    let (vocab, atlas) = setup();
    let cfg = RenderConfig { jitter: 0, ..RenderConfig::default() };
    let img = render(&vocab.tokenize("a a a").unwrap(), &atlas, &cfg, 3).unwrap();
    let tile = |k: usize| {
        let x0 = cfg.margin + k * (GLYPH_SIZE + cfg.gap);
        (0..img.height).flat_map(|y| (x0..x0 + GLYPH_SIZE).map(move |x| (y, x))).map(|(y, x)| img.at(y, x)).collect::<Vec<_>>()
    };
    assert!(tile(0).iter().any(|&p| p > 0.0));
    assert_eq!(tile(0), tile(1));
    assert_eq!(tile(1), tile(2));
}

#[test]
fn fixed_seed_renders_bit_identically() {
    let (vocab, atlas) = setup();
    let toks = vocab.tokenize("x ^ { 2 } + y _ { a } = 1").unwrap();
    let a = render(&toks, &atlas, &RenderConfig::default(), 9).unwrap();
    let b = render(&toks, &atlas, &RenderConfig::default(), 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_glyph_is_an_error() {
    let (vocab, atlas) = setup();
    let x = vocab.id("x").unwrap();
    let atlas = atlas.without(x);
    assert!(render(&[x], &atlas, &RenderConfig::default(), 0).is_err());
}

#[test]
fn distinct_equal_length_sequences_render_differently() {
    let (_, atlas) = setup();
    let cfg = RenderConfig { jitter: 0, ..RenderConfig::default() };
    let samples = corpus(4, 300);
    let images: Vec<_> = samples.iter().map(|s| render(&s.tokens, &atlas, &cfg, 0).unwrap()).collect();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            if samples[i].len() == samples[j].len() && samples[i].tokens != samples[j].tokens {
                assert_ne!(images[i], images[j], "samples {i} and {j}");
            }
        }
    }
}

#[test]
fn scale_shapes() {
    let img = Image::new(100, 200, vec![0.5; 20000]).unwrap();
    let s = scale_augment_by(&img, 0.7);
    assert_eq!((s.height, s.width), (70, 140));
    assert_eq!(scale_augment_by(&img, 1.0), img);
}

#[test]
fn scaling_a_gradient_keeps_its_mean() {
    let (h, w) = (40, 120);
    let px: Vec<f32> = (0..h * w).map(|i| ((i % w) as f32 / w as f32 + (i / w) as f32 / h as f32) / 2.0).collect();
    let img = Image::new(h, w, px).unwrap();
    for s in [0.7, 0.9, 1.2, 1.4] {
        let out = scale_augment_by(&img, s);
        assert!((out.mean() - img.mean()).abs() / img.mean() < 0.05, "s={s}");
    }
}

#[test]
fn augmentation_keeps_aspect_ratio() {
    let img = corpus(3, 1).remove(0).image;
    let mut rng = Rng::seed_from_u64(0);
    for _ in 0..20 {
        let out = scale_augment(&img, &mut rng, 0.7, 1.4);
        let ratio = out.width as f64 / out.height as f64;
        let orig = img.width as f64 / img.height as f64;
        assert!((ratio - orig).abs() / orig < 0.1);
        assert!(out.height >= (img.height as f64 * 0.7).round() as usize - 1);
    }
}

fn sample_with_width(id: usize, width: usize, tokens: Vec<usize>) -> Sample {
    Sample { id, tokens, image: Image::new(4, width, vec![1.0; 4 * width]).unwrap() }
}

#[test]
fn collate_pads_to_widest() {
    let a = sample_with_width(0, 64, vec![4, 5]);
    let b = sample_with_width(1, 96, vec![6, 7, 8]);
    let batch = collate(&[&a, &b]).unwrap();
    assert_eq!(batch.width, 96);
    assert_eq!(batch.steps, 4);
    for y in 0..4 {
        for x in 0..96 {
            assert_eq!(batch.mask[y * 96 + x], x < 64);
            assert!(batch.mask[(4 + y) * 96 + x]);
        }
    }
    assert_eq!(&batch.l2r_input[..4], &[SOS_L2R, 4, 5, PAD]);
    assert_eq!(&batch.l2r_target[..4], &[4, 5, EOS, PAD]);
    assert_eq!(&batch.r2l_input[4..], &[SOS_R2L, 8, 7, 6]);
    assert_eq!(&batch.r2l_target[4..], &[8, 7, 6, EOS]);
}

#[test]
fn single_sample_mask_covers_its_extent() {
    let s = corpus(8, 1).remove(0);
    let batch = collate(&[&s]).unwrap();
    assert!(batch.mask.iter().all(|&m| m));
    assert_eq!(batch.images, s.image.pixels);
    assert!(collate(&[]).is_err());
}

#[test]
fn shuffled_batches_are_reproducible_partitions() {
    let widths: Vec<usize> = (0..37).map(|i| 40 + (i * 13) % 50).collect();
    let a = shuffled_batches(&widths, 8, &mut Rng::seed_from_u64(4));
    let b = shuffled_batches(&widths, 8, &mut Rng::seed_from_u64(4));
    assert_eq!(a, b);
    let mut all: Vec<usize> = a.concat();
    all.sort();
    assert_eq!(all, (0..37).collect::<Vec<_>>());
    assert!(a.iter().all(|b| b.len() <= 8));
}

#[test]
fn dataset_round_trips_through_disk() {
    let (vocab, _) = setup();
    let samples = corpus(12, 15);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &samples, &vocab).unwrap();
    let back = load_dataset(dir.path(), &vocab).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.image.to_bytes(), b.image.to_bytes());
    }
    let stats = DatasetStats::of(&samples);
    assert_eq!(stats.size, 15);
    assert_eq!(stats.histogram.iter().sum::<usize>(), 15);
}

proptest! {
    #[test]
    fn tokenize_round_trips(ids in prop::collection::vec(4usize..24, 0..30)) {
        let v = Vocab::default();
        let text = v.detokenize(&ids).unwrap();
        prop_assert_eq!(v.tokenize(&text).unwrap(), ids.clone());
        prop_assert_eq!(v.detokenize(&v.tokenize(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn augmentation_never_touches_the_label(seed in 0u64..500, s in 0.7f64..1.4) {
        let sample = corpus(seed, 1).remove(0);
        let out = scale_augment_by(&sample.image, s);
        let scaled = Sample { image: out, ..sample.clone() };
        prop_assert_eq!(scaled.tokens, sample.tokens);
    }
}
