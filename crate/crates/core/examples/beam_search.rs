//! Beam, greedy and bidirectional joint search over a hand-written scorer.
//! Left to right the scorer likes "x + 1" and "y + 1" equally; right to left
//! it only knows "1 + y". Joint rescoring picks the reading both accept.

use comer::data::{Vocab, EOS};
use comer::search::{approximate_joint_search, beam_search, greedy, Direction, StepModel};

struct Table {
    vocab: usize,
    l2r: Vec<Vec<usize>>,
    r2l: Vec<Vec<usize>>,
}

impl StepModel for Table {
    type State = (Direction, Vec<Vec<usize>>);

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self, direction: Direction, rows: usize) -> comer::Result<Self::State> {
        Ok((direction, vec![Vec::new(); rows]))
    }

    fn step(&self, state: &mut Self::State, tokens: &[usize]) -> comer::Result<Vec<Vec<f64>>> {
        let favored = match state.0 {
            Direction::L2R => &self.l2r,
            Direction::R2L => &self.r2l,
        };
        let mut out = Vec::new();
        for (prefix, &t) in state.1.iter_mut().zip(tokens) {
            if t != state.0.start_token() {
                prefix.push(t);
            }
            // Log-probabilities: mass 0.6 on tokens that continue a favored
            // sequence, the rest spread evenly.
            let mut hits = vec![false; self.vocab];
            for seq in favored {
                if seq.starts_with(prefix) {
                    hits[seq.get(prefix.len()).copied().unwrap_or(EOS)] = true;
                }
            }
            let n_hit = hits.iter().filter(|&&h| h).count();
            let lp = (0..self.vocab)
                .map(|k| {
                    if n_hit == 0 {
                        -(self.vocab as f64).ln()
                    } else if hits[k] {
                        (0.6 / n_hit as f64).ln()
                    } else {
                        (0.4 / (self.vocab - n_hit) as f64).ln()
                    }
                })
                .collect();
            out.push(lp);
        }
        Ok(out)
    }

    fn select(&self, state: &Self::State, rows: &[usize]) -> comer::Result<Self::State> {
        Ok((state.0, rows.iter().map(|&r| state.1[r].clone()).collect()))
    }
}

fn main() -> comer::Result<()> {
    let v = Vocab::default();
    let seq = |s: &str| v.tokenize(s).unwrap();
    let model = Table {
        vocab: v.len(),
        l2r: vec![seq("x + 1"), seq("y + 1")],
        r2l: vec![seq("1 + y")],
    };
    let show = |ids: &[usize]| v.detokenize(ids).unwrap();

    let g = greedy(&model, Direction::L2R, 8)?;
    println!("greedy l2r: {} (normalized {:.3})", show(g.payload()), g.normalized());
    for h in beam_search(&model, Direction::L2R, 3, 8)? {
        println!("beam l2r:   {} (normalized {:.3})", show(h.payload()), h.normalized());
    }
    for h in beam_search(&model, Direction::R2L, 3, 8)? {
        println!("beam r2l:   {} (reading order {})", show(h.payload()), show(&h.reading_order()));
    }
    println!("joint:      {}", show(&approximate_joint_search(&model, 3, 8)?));
    Ok(())
}
