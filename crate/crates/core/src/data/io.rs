use std::fs;
use std::io::Write;
use std::path::Path;

use super::render::Image;
use super::vocab::Vocab;
use super::Sample;
use crate::error::{Error, Result};
use crate::pgm;

/// Writes `images/NNNN.pgm` and `labels.tsv` (`id<TAB>space-joined tokens`).
pub fn save_dataset(dir: &Path, samples: &[Sample], vocab: &Vocab) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut labels = String::new();
    for s in samples {
        pgm::write(&images.join(format!("{:04}.pgm", s.id)), s.image.width, s.image.height, &s.image.to_bytes(), None)?;
        labels.push_str(&format!("{:04}\t{}\n", s.id, vocab.detokenize(&s.tokens)?));
    }
    fs::File::create(dir.join("labels.tsv"))?.write_all(labels.as_bytes())?;
    Ok(())
}

pub fn load_dataset(dir: &Path, vocab: &Vocab) -> Result<Vec<Sample>> {
    let labels = fs::read_to_string(dir.join("labels.tsv")).map_err(|e| Error::Format(format!("{}: {e}", dir.join("labels.tsv").display())))?;
    let mut out = Vec::new();
    for (n, line) in labels.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| Error::Format(format!("labels.tsv line {}: expected id<TAB>tokens", n + 1)))?;
        let num: usize = id.trim().parse().map_err(|_| Error::Format(format!("labels.tsv line {}: bad id {id:?}", n + 1)))?;
        let tokens = vocab.tokenize(text)?;
        if tokens.iter().any(|&t| Vocab::is_reserved(t)) {
            return Err(Error::Format(format!("labels.tsv line {}: reserved token in label", n + 1)));
        }
        let (w, h, px) = pgm::read(&dir.join("images").join(format!("{id}.pgm")))?;
        out.push(Sample { id: num, tokens, image: Image::from_bytes(h, w, &px)? });
    }
    Ok(out)
}

/// Count of samples per label length `0..=max`.
pub fn length_histogram(samples: &[Sample]) -> Vec<usize> {
    let max = samples.iter().map(Sample::len).max().unwrap_or(0);
    let mut hist = vec![0; max + 1];
    for s in samples {
        hist[s.len()] += 1;
    }
    hist
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DatasetStats {
    pub size: usize,
    pub long: usize,
    pub histogram: Vec<usize>,
}

impl DatasetStats {
    pub fn of(samples: &[Sample]) -> Self {
        DatasetStats { size: samples.len(), long: samples.iter().filter(|s| s.len() >= 15).count(), histogram: length_histogram(samples) }
    }
}
