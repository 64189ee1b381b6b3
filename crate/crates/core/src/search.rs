//! Beam search over any incremental scorer, and bidirectional rescoring.

use std::cmp::Ordering;

use crate::data::{EOS, PAD, SOS_L2R, SOS_R2L};
use crate::decoder::DecodeCache;
use crate::encoder::FrozenGrid;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    L2R,
    R2L,
}

impl Direction {
    pub fn start_token(self) -> usize {
        match self {
            Direction::L2R => SOS_L2R,
            Direction::R2L => SOS_R2L,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Direction::L2R => Direction::R2L,
            Direction::R2L => Direction::L2R,
        }
    }
}

/// Something that extends token prefixes one step at a time.
pub trait StepModel {
    type State;

    fn vocab_size(&self) -> usize;

    fn start(&self, direction: Direction, rows: usize) -> Result<Self::State>;

    /// Log-probabilities of the next token for each row after feeding `tokens`.
    fn step(&self, state: &mut Self::State, tokens: &[usize]) -> Result<Vec<Vec<f64>>>;

    fn select(&self, state: &Self::State, rows: &[usize]) -> Result<Self::State>;

    /// Teacher-forced log-likelihood of `payload` followed by eos.
    fn score(&self, direction: Direction, payload: &[usize]) -> Result<f64> {
        let mut state = self.start(direction, 1)?;
        let mut prev = direction.start_token();
        let mut total = 0.0;
        for &t in payload.iter().chain(std::iter::once(&EOS)) {
            let lp = self.step(&mut state, &[prev])?;
            total += lp[0][t];
            prev = t;
        }
        Ok(total)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub direction: Direction,
    /// Generated tokens, eos included when finished.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Log-probability per generated token.
    pub fn normalized(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.logprob / self.tokens.len() as f64
        }
    }

    /// Tokens without eos, in the direction's own order.
    pub fn payload(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    /// Payload in left-to-right reading order.
    pub fn reading_order(&self) -> Vec<usize> {
        let mut p = self.payload().to_vec();
        if self.direction == Direction::R2L {
            p.reverse();
        }
        p
    }
}

/// Higher score first; equal scores fall back to the lexicographically
/// smaller token sequence.
fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score.partial_cmp(&a_score).unwrap_or(Ordering::Equal).then_with(|| a_tokens.cmp(b_tokens))
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Length-normalized beam search. Control tokens other than eos are never
/// proposed. Stops once `beam_size` hypotheses have finished and none of the
/// live ones scores better than the best of them, once nothing is alive, or
/// after `max_len` tokens; if none finished, the best unfinished hypothesis
/// is returned with `finished = false`.
pub fn beam_search<M: StepModel>(model: &M, direction: Direction, beam_size: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if beam_size == 0 || max_len == 0 {
        return Err(Error::Usage("beam size and max length must be at least 1".into()));
    }
    let mut state = model.start(direction, 1)?;
    let mut alive = vec![Hypothesis { direction, tokens: Vec::new(), logprob: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let allowed: Vec<usize> = (0..model.vocab_size()).filter(|&v| v != PAD && v != SOS_L2R && v != SOS_R2L).collect();
    for _ in 0..max_len {
        let feed: Vec<usize> = alive.iter().map(|h| h.tokens.last().copied().unwrap_or(direction.start_token())).collect();
        let lps = model.step(&mut state, &feed)?;
        let mut cands: Vec<(usize, usize, f64, Vec<usize>)> = Vec::with_capacity(alive.len() * allowed.len());
        for (r, h) in alive.iter().enumerate() {
            for &v in &allowed {
                let mut toks = h.tokens.clone();
                toks.push(v);
                cands.push((r, v, h.logprob + lps[r][v], toks));
            }
        }
        cands.sort_by(|a, b| rank(a.2 / a.3.len() as f64, &a.3, b.2 / b.3.len() as f64, &b.3));
        // Eos candidates finish only when they rank inside the beam; the
        // live beam is always refilled to `beam_size` from the rest.
        let mut keep_rows = Vec::new();
        let mut next = Vec::new();
        for (pos, (r, v, lp, toks)) in cands.into_iter().enumerate() {
            if next.len() == beam_size {
                break;
            }
            let h = Hypothesis { direction, tokens: toks, logprob: lp, finished: v == EOS };
            if h.finished {
                if pos < beam_size {
                    finished.push(h);
                }
            } else {
                keep_rows.push(r);
                next.push(h);
            }
        }
        let best_done = finished.iter().map(Hypothesis::normalized).fold(f64::NEG_INFINITY, f64::max);
        let best_alive = next.iter().map(Hypothesis::normalized).fold(f64::NEG_INFINITY, f64::max);
        if (finished.len() >= beam_size && best_done >= best_alive) || next.is_empty() {
            alive.clear();
            break;
        }
        state = model.select(&state, &keep_rows)?;
        alive = next;
    }
    if finished.is_empty() {
        finished = alive;
    }
    finished.sort_by(|a, b| rank(a.normalized(), &a.tokens, b.normalized(), &b.tokens));
    finished.truncate(beam_size);
    Ok(finished)
}

/// Greedy decoding: the single best hypothesis of a width-1 beam.
pub fn greedy<M: StepModel>(model: &M, direction: Direction, max_len: usize) -> Result<Hypothesis> {
    beam_search(model, direction, 1, max_len)?.into_iter().next().ok_or_else(|| Error::Usage("empty beam".into()))
}

/// A candidate with its own and opposite-direction normalized scores.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCandidate {
    pub direction: Direction,
    /// Left-to-right reading order.
    pub tokens: Vec<usize>,
    pub own: f64,
    pub opposite: f64,
}

impl JointCandidate {
    pub fn score(&self) -> f64 {
        0.5 * (self.own + self.opposite)
    }
}

/// Picks the best candidate by the mean of both scores, ties to the
/// lexicographically smallest sequence.
pub fn pick_joint(cands: &[JointCandidate]) -> Result<&JointCandidate> {
    cands
        .iter()
        .min_by(|a, b| rank(a.score(), &a.tokens, b.score(), &b.tokens))
        .ok_or_else(|| Error::Usage("joint search needs at least one candidate".into()))
}

/// Beams in both directions, each candidate rescored by the opposite
/// direction under teacher forcing. Returns the winner in reading order.
pub fn approximate_joint_search<M: StepModel>(model: &M, beam_size: usize, max_len: usize) -> Result<Vec<usize>> {
    let mut cands = Vec::new();
    for dir in [Direction::L2R, Direction::R2L] {
        for h in beam_search(model, dir, beam_size, max_len)? {
            let own = h.normalized();
            let mut opp_payload = h.payload().to_vec();
            opp_payload.reverse();
            let opposite = model.score(dir.opposite(), &opp_payload)? / (opp_payload.len() + 1) as f64;
            cands.push(JointCandidate { direction: dir, tokens: h.reading_order(), own, opposite });
        }
    }
    Ok(pick_joint(&cands)?.tokens.clone())
}

/// Incremental decoding of one encoded image.
pub struct ModelSearcher<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub grid: FrozenGrid<T>,
}

impl<'a, T: Scalar> ModelSearcher<'a, T> {
    pub fn new(model: &'a Model<T>, grid: FrozenGrid<T>) -> Self {
        ModelSearcher { model, grid }
    }
}

impl<T: Scalar> StepModel for ModelSearcher<'_, T> {
    type State = DecodeCache<T>;

    fn vocab_size(&self) -> usize {
        self.model.config.decoder.vocab_size
    }

    fn start(&self, _direction: Direction, rows: usize) -> Result<DecodeCache<T>> {
        self.model.decoder.start(&self.model.store, &self.grid, rows)
    }

    fn step(&self, state: &mut DecodeCache<T>, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let logits = self.model.decoder.decode_step(&self.model.store, state, tokens)?;
        let v = self.vocab_size();
        Ok(logits.data().chunks_exact(v).map(|row| log_softmax(&row.iter().map(|x| x.as_f64()).collect::<Vec<_>>())).collect())
    }

    fn select(&self, state: &DecodeCache<T>, rows: &[usize]) -> Result<DecodeCache<T>> {
        state.select(rows)
    }

    /// Teacher-forced in a single parallel pass.
    fn score(&self, direction: Direction, payload: &[usize]) -> Result<f64> {
        let mut g = Graph::eval();
        let grid = self.grid.attach(&mut g);
        let mut input = vec![direction.start_token()];
        input.extend_from_slice(payload);
        let (logits, _) = self.model.decode_parallel(&mut g, &grid, &input, 1)?;
        let v = self.vocab_size();
        let targets = payload.iter().chain(std::iter::once(&EOS));
        Ok(g.value(logits)
            .chunks_exact(v)
            .zip(targets)
            .map(|(row, &t)| log_softmax(&row.iter().map(|x| x.as_f64()).collect::<Vec<_>>())[t])
            .sum())
    }
}
