use comer::data::EOS;
use comer::error::Result;
use comer::search::{approximate_joint_search, beam_search, greedy, log_softmax, pick_joint, Direction, JointCandidate, StepModel};

/// Deterministic pseudo-random log-probabilities keyed by the prefix.
struct HashModel {
    vocab: usize,
    seed: u64,
}

fn mix(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ceb9fe1a85ec53);
    h ^ (h >> 33)
}

impl HashModel {
    fn logprobs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = mix(self.seed);
        for &t in prefix {
            h = mix(h ^ (t as u64 + 1));
        }
        let logits: Vec<f64> = (0..self.vocab).map(|v| (mix(h ^ (v as u64 * 7919)) % 1000) as f64 / 250.0).collect();
        log_softmax(&logits)
    }
}

impl StepModel for HashModel {
    type State = Vec<Vec<usize>>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self, _direction: Direction, rows: usize) -> Result<Self::State> {
        Ok(vec![Vec::new(); rows])
    }

    fn step(&self, state: &mut Self::State, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(state
            .iter_mut()
            .zip(tokens)
            .map(|(p, &t)| {
                p.push(t);
                self.logprobs(p)
            })
            .collect())
    }

    fn select(&self, state: &Self::State, rows: &[usize]) -> Result<Self::State> {
        Ok(rows.iter().map(|&r| state[r].clone()).collect())
    }
}

const SYMBOLS: [usize; 3] = [4, 5, 6];

/// Best length-normalized finished sequence over every payload that fits.
fn exhaustive(model: &HashModel, dir: Direction, max_len: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier = vec![Vec::<usize>::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for payload in frontier {
            let score = model.score(dir, &payload).unwrap() / (payload.len() + 1) as f64;
            let mut toks = payload.clone();
            toks.push(EOS);
            let better = match &best {
                None => true,
                Some((b, s)) => score > *s || (score == *s && toks < *b),
            };
            if better {
                best = Some((toks, score));
            }
            for &s in &SYMBOLS {
                let mut p = payload.clone();
                p.push(s);
                next.push(p);
            }
        }
        frontier = next;
    }
    best.unwrap()
}

#[test]
fn wide_beam_matches_exhaustive_enumeration() {
    for seed in 0..20 {
        let m = HashModel { vocab: 7, seed };
        for dir in [Direction::L2R, Direction::R2L] {
            let (toks, score) = exhaustive(&m, dir, 4);
            let beam = beam_search(&m, dir, 200, 4).unwrap();
            assert!(beam[0].finished);
            assert_eq!(beam[0].tokens, toks, "seed {seed}");
            assert!((beam[0].normalized() - score).abs() < 1e-12);
        }
    }
}

#[test]
fn beam_one_is_greedy_argmax() {
    let m = HashModel { vocab: 7, seed: 3 };
    let h = greedy(&m, Direction::L2R, 12).unwrap();
    let mut prefix = vec![Direction::L2R.start_token()];
    let mut toks = Vec::new();
    for _ in 0..12 {
        let lp = m.logprobs(&prefix);
        let best = (2..7).filter(|&v| v != 3).max_by(|&a, &b| lp[a].partial_cmp(&lp[b]).unwrap()).unwrap();
        toks.push(best);
        if best == EOS {
            break;
        }
        prefix.push(best);
    }
    assert_eq!(h.tokens, toks);
    assert_eq!(beam_search(&m, Direction::L2R, 1, 12).unwrap()[0], h);
}

/// Greedy takes 4 and is then forced through low-probability tokens; the
/// second-best opening 5 finishes cleanly.
struct GardenPath;

impl StepModel for GardenPath {
    type State = Vec<Vec<usize>>;
    fn vocab_size(&self) -> usize {
        6
    }
    fn start(&self, _: Direction, rows: usize) -> Result<Self::State> {
        Ok(vec![Vec::new(); rows])
    }
    fn step(&self, state: &mut Self::State, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(state
            .iter_mut()
            .zip(tokens)
            .map(|(p, &t)| {
                if t >= 4 {
                    p.push(t);
                }
                let l = match p.as_slice() {
                    [] => [0.0, 0.0, -9.0, 0.0, 1.0, 0.8],
                    [4] | [4, _] => [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                    [5] => [0.0, 0.0, 8.0, 0.0, 0.0, 0.0],
                    _ => [0.0, 0.0, 8.0, 0.0, 0.0, 0.0],
                };
                log_softmax(&l)
            })
            .collect())
    }
    fn select(&self, state: &Self::State, rows: &[usize]) -> Result<Self::State> {
        Ok(rows.iter().map(|&r| state[r].clone()).collect())
    }
}

#[test]
fn doubling_the_beam_does_not_lower_the_best_score() {
    let mut prev = f64::NEG_INFINITY;
    let mut scores = Vec::new();
    for beam in [1, 2, 4, 8] {
        let best = beam_search(&GardenPath, Direction::L2R, beam, 6).unwrap()[0].normalized();
        assert!(best >= prev - 1e-12, "beam {beam}: {best} < {prev}");
        scores.push(best);
        prev = best;
    }
    assert!(scores[1] > scores[0]);
}

#[test]
fn exhaustive_width_beam_dominates_narrower_beams() {
    for seed in 0..20 {
        let m = HashModel { vocab: 7, seed };
        let wide = beam_search(&m, Direction::L2R, 400, 5).unwrap()[0].normalized();
        for beam in [1, 2, 4, 8, 16] {
            let narrow = beam_search(&m, Direction::L2R, beam, 5).unwrap();
            if narrow[0].finished {
                assert!(narrow[0].normalized() <= wide + 1e-12, "seed {seed} beam {beam}");
            }
        }
    }
}

#[test]
fn control_tokens_are_never_proposed() {
    let m = HashModel { vocab: 7, seed: 1 };
    for h in beam_search(&m, Direction::R2L, 6, 8).unwrap() {
        assert!(h.payload().iter().all(|&t| t >= 4));
    }
}

#[test]
fn unfinished_hypothesis_is_flagged() {
    struct NeverEnds;
    impl StepModel for NeverEnds {
        type State = usize;
        fn vocab_size(&self) -> usize {
            5
        }
        fn start(&self, _: Direction, rows: usize) -> Result<usize> {
            Ok(rows)
        }
        fn step(&self, state: &mut usize, _: &[usize]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![log_softmax(&[0.0, 0.0, -50.0, 0.0, 5.0]); *state])
        }
        fn select(&self, _: &usize, rows: &[usize]) -> Result<usize> {
            Ok(rows.len())
        }
    }
    let h = greedy(&NeverEnds, Direction::L2R, 3).unwrap();
    assert!(!h.finished);
    assert_eq!(h.tokens, vec![4, 4, 4]);
}

#[test]
fn joint_hand_scores_prefer_r2l() {
    let cands = [
        JointCandidate { direction: Direction::L2R, tokens: vec![4, 5], own: -1.0, opposite: -3.0 },
        JointCandidate { direction: Direction::R2L, tokens: vec![5, 4], own: -1.5, opposite: -1.6 },
    ];
    let best = pick_joint(&cands).unwrap();
    assert_eq!(best.direction, Direction::R2L);
    assert!((best.score() + 1.55).abs() < 1e-12);
    assert!((cands[0].score() + 2.0).abs() < 1e-12);
    assert!(pick_joint(&[]).is_err());
}

/// Both directions share one distribution over reading-order sequences.
struct Symmetric;

impl StepModel for Symmetric {
    type State = Vec<(Direction, Vec<usize>)>;
    fn vocab_size(&self) -> usize {
        6
    }
    fn start(&self, d: Direction, rows: usize) -> Result<Self::State> {
        Ok(vec![(d, Vec::new()); rows])
    }
    fn step(&self, state: &mut Self::State, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(state
            .iter_mut()
            .zip(tokens)
            .map(|((d, p), &t)| {
                if t >= 4 {
                    p.push(t);
                }
                // l2r wants [4, 5], r2l wants [5, 4].
                let want = match d {
                    Direction::L2R => [4, 5],
                    Direction::R2L => [5, 4],
                };
                let next = want.get(p.len()).copied().unwrap_or(EOS);
                let mut l = vec![0.0; 6];
                l[next] = 6.0;
                log_softmax(&l)
            })
            .collect())
    }
    fn select(&self, state: &Self::State, rows: &[usize]) -> Result<Self::State> {
        Ok(rows.iter().map(|&r| state[r].clone()).collect())
    }
}

#[test]
fn unanimous_beams_return_the_shared_reading() {
    assert_eq!(approximate_joint_search(&Symmetric, 3, 6).unwrap(), vec![4, 5]);
}

#[test]
fn joint_search_is_deterministic() {
    let m = HashModel { vocab: 7, seed: 9 };
    let a = approximate_joint_search(&m, 4, 6).unwrap();
    let b = approximate_joint_search(&m, 4, 6).unwrap();
    assert_eq!(a, b);
}

/// Along the path 4 4 4 5 every step offers eos as the clear runner-up, so
/// early short finishes pile up long before the path completes.
struct EagerEos;

impl StepModel for EagerEos {
    type State = Vec<Vec<usize>>;
    fn vocab_size(&self) -> usize {
        6
    }
    fn start(&self, _: Direction, rows: usize) -> Result<Self::State> {
        Ok(vec![Vec::new(); rows])
    }
    fn step(&self, state: &mut Self::State, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        const PATH: [usize; 4] = [4, 4, 4, 5];
        Ok(state
            .iter_mut()
            .zip(tokens)
            .map(|(p, &t)| {
                if t >= 4 {
                    p.push(t);
                }
                let mut l = [0.0; 6];
                if p.len() < PATH.len() && PATH.starts_with(p) {
                    l[PATH[p.len()]] = 3.0;
                    l[EOS] = 1.0;
                } else {
                    l[EOS] = 5.0;
                }
                log_softmax(&l)
            })
            .collect())
    }
    fn select(&self, state: &Self::State, rows: &[usize]) -> Result<Self::State> {
        Ok(rows.iter().map(|&r| state[r].clone()).collect())
    }
}

#[test]
fn early_finishes_do_not_cut_off_a_better_live_hypothesis() {
    for beam in [2, 3] {
        let best = &beam_search(&EagerEos, Direction::L2R, beam, 8).unwrap()[0];
        assert!(best.finished);
        assert_eq!(best.payload(), &[4, 4, 4, 5], "beam {beam}");
    }
}
