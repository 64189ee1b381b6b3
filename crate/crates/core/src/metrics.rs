//! Token edit distance and the evaluation report.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Sample, Vocab};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::search::{approximate_joint_search, beam_search, Direction, ModelSearcher};
use crate::tensor::Scalar;

/// Levenshtein distance with unit costs.
pub fn token_edit_distance(pred: &[usize], reference: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut cur = vec![0; reference.len() + 1];
    for (i, p) in pred.iter().enumerate() {
        cur[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(p != r);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[reference.len()]
}

pub const BUCKETS: [(&str, usize, usize); 4] = [("1-9", 1, 9), ("10-19", 10, 19), ("20-29", 20, 29), ("30+", 30, usize::MAX)];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketAccuracy {
    pub bucket: String,
    pub count: usize,
    pub exprate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    pub exprate: f64,
    pub err_le_1: f64,
    pub err_le_2: f64,
    pub err_le_3: f64,
    pub buckets: Vec<BucketAccuracy>,
    /// Exact match over references of length ≥ 15.
    pub long_exprate: f64,
    pub long_count: usize,
}

impl EvalReport {
    /// Builds the report from `(reference length, distance)` pairs.
    pub fn from_distances(items: &[(usize, usize)]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Usage("cannot evaluate an empty dataset".into()));
        }
        let n = items.len() as f64;
        let frac = |k: usize| items.iter().filter(|&&(_, d)| d <= k).count() as f64 / n;
        let rate = |sel: &dyn Fn(usize) -> bool| {
            let xs: Vec<_> = items.iter().filter(|(l, _)| sel(*l)).collect();
            let c = xs.len();
            (c, if c == 0 { 0.0 } else { xs.iter().filter(|(_, d)| *d == 0).count() as f64 / c as f64 })
        };
        let buckets = BUCKETS
            .iter()
            .map(|&(name, lo, hi)| {
                let (count, exprate) = rate(&|l| l >= lo && l <= hi);
                BucketAccuracy { bucket: name.to_string(), count, exprate }
            })
            .collect();
        let (long_count, long_exprate) = rate(&|l| l >= 15);
        Ok(EvalReport { count: items.len(), exprate: frac(0), err_le_1: frac(1), err_le_2: frac(2), err_le_3: frac(3), buckets, long_exprate, long_count })
    }

    pub fn is_monotone(&self) -> bool {
        self.exprate <= self.err_le_1 && self.err_le_1 <= self.err_le_2 && self.err_le_2 <= self.err_le_3
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable per-length table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<8} {:>6} {:>8}", "length", "count", "exprate").unwrap();
        for b in &self.buckets {
            writeln!(s, "{:<8} {:>6} {:>7.2}%", b.bucket, b.count, 100.0 * b.exprate).unwrap();
        }
        writeln!(s, "{:<8} {:>6} {:>7.2}%", "all", self.count, 100.0 * self.exprate).unwrap();
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: usize,
    pub distance: usize,
    pub tokens: Vec<usize>,
}

/// `id<TAB>distance<TAB>tokens` lines.
pub fn predictions_tsv(preds: &[Prediction], vocab: &Vocab) -> Result<String> {
    let mut s = String::new();
    for p in preds {
        writeln!(s, "{:04}\t{}\t{}", p.id, p.distance, vocab.detokenize(&p.tokens)?).unwrap();
    }
    Ok(s)
}

/// How candidates are produced during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    /// Beam in both directions with opposite-direction rescoring.
    Joint,
    /// Left-to-right beam only.
    L2R,
}

/// Recognizes one sample.
pub fn predict<T: Scalar>(model: &Model<T>, sample: &Sample, beam: usize, max_len: usize, mode: SearchMode) -> Result<Vec<usize>> {
    let searcher = ModelSearcher::new(model, model.encode_image(&sample.image)?);
    match mode {
        SearchMode::Joint => approximate_joint_search(&searcher, beam, max_len),
        SearchMode::L2R => Ok(beam_search(&searcher, Direction::L2R, beam, max_len)?.remove(0).reading_order()),
    }
}

/// Decodes every sample (in parallel over samples) and scores it.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample], beam: usize, max_len: usize, mode: SearchMode) -> Result<(EvalReport, Vec<Prediction>)> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let preds: Vec<Prediction> = samples
        .par_iter()
        .map(|s| {
            let tokens = predict(model, s, beam, max_len, mode)?;
            Ok(Prediction { id: s.id, distance: token_edit_distance(&tokens, &s.tokens), tokens })
        })
        .collect::<Result<_>>()?;
    let items: Vec<(usize, usize)> = samples.iter().zip(&preds).map(|(s, p)| (s.len(), p.distance)).collect();
    Ok((EvalReport::from_distances(&items)?, preds))
}

/// Twice the longest label plus two.
pub fn default_max_len(samples: &[Sample]) -> usize {
    2 * samples.iter().map(Sample::len).max().unwrap_or(0) + 2
}
