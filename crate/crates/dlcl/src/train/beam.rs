//! Greedy and beam-search decoding over a step scorer.
//!
//! A scorer maps a bos-led prefix to next-token log-probabilities; the model
//! provides one per source sequence via `TransformerModel::scorer`.

use std::cmp::Ordering;

use crate::error::Result;
use crate::model::{BOS, EOS};

/// Beam width, length-penalty exponent and the generation cap.
#[derive(Clone, Copy, Debug)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 4,
            alpha: 0.6,
            max_len: 32,
        }
    }
}

/// `((5 + len) / 6)^alpha`; length counts generated tokens including eos.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// A finished hypothesis. `tokens` are the generated ids including the final
/// eos; `logp` is the sum of token log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logp: f64,
    pub finish_step: usize,
}

impl Hypothesis {
    pub fn score(&self, alpha: f64) -> f64 {
        self.logp / length_penalty(self.tokens.len(), alpha)
    }

    /// Ranking used everywhere: higher penalized score first, then earlier
    /// finish, then lexicographic token order.
    pub fn better_than(&self, other: &Hypothesis, alpha: f64) -> bool {
        match self
            .score(alpha)
            .partial_cmp(&other.score(alpha))
            .expect("finite scores")
        {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => match self.finish_step.cmp(&other.finish_step) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => self.tokens < other.tokens,
            },
        }
    }
}

/// Greedy decoding: argmax token per step (lowest id on ties), finishing at
/// eos or force-finishing with eos once `max_len` is reached.
pub fn greedy_decode<F>(scorer: F, cfg: &BeamConfig) -> Result<Hypothesis>
where
    F: Fn(&[usize]) -> Result<Vec<f64>>,
{
    assert!(cfg.max_len >= 1);
    let mut prefix = vec![BOS];
    let mut logp = 0.0;
    for step in 1..=cfg.max_len {
        let logps = scorer(&prefix)?;
        let tok = if step == cfg.max_len {
            EOS
        } else {
            argmax(&logps)
        };
        logp += logps[tok];
        prefix.push(tok);
        if tok == EOS {
            return Ok(Hypothesis {
                tokens: prefix[1..].to_vec(),
                logp,
                finish_step: step,
            });
        }
    }
    unreachable!("the max_len step always finishes");
}

/// Standard beam search over penalized log-probabilities. The greedy
/// hypothesis seeds the finished pool, so the result never ranks below
/// greedy under the same scoring. `beam_size == 1` reduces to greedy.
pub fn beam_search_decode<F>(scorer: F, cfg: &BeamConfig) -> Result<Hypothesis>
where
    F: Fn(&[usize]) -> Result<Vec<f64>>,
{
    assert!(cfg.beam_size >= 1);
    assert!(cfg.max_len >= 1);
    let mut finished: Vec<Hypothesis> = vec![greedy_decode(&scorer, cfg)?];

    // live entries: (bos-led prefix, cumulative logp)
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    for step in 1..=cfg.max_len {
        // candidate = (cumulative logp, token, live index)
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (i, (prefix, logp)) in live.iter().enumerate() {
            let logps = scorer(prefix)?;
            if step == cfg.max_len {
                candidates.push((logp + logps[EOS], EOS, i));
            } else {
                for (tok, lp) in logps.iter().enumerate() {
                    candidates.push((logp + lp, tok, i));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite scores")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next_live = Vec::with_capacity(cfg.beam_size);
        for &(logp, tok, i) in candidates.iter().take(cfg.beam_size) {
            let mut prefix = live[i].0.clone();
            prefix.push(tok);
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens: prefix[1..].to_vec(),
                    logp,
                    finish_step: step,
                });
            } else {
                next_live.push((prefix, logp));
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }

    let mut best = finished.pop().expect("greedy seed present");
    for h in finished {
        if h.better_than(&best, cfg.alpha) {
            best = h;
        }
    }
    Ok(best)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A deterministic toy scorer: log-probs depend on (last token, position).
    fn toy_scorer(vocab: usize, seed: u64) -> impl Fn(&[usize]) -> Result<Vec<f64>> {
        move |prefix: &[usize]| {
            let last = *prefix.last().expect("bos-led prefix");
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (last as u64).wrapping_mul(0x9E37_79B9) ^ (prefix.len() as u64) << 32,
            );
            let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x - max).exp()).sum();
            Ok(logits.iter().map(|x| x - max - z.ln()).collect())
        }
    }

    /// Exhaustive enumeration of every eos-terminated sequence up to max_len.
    fn enumerate_best<F>(scorer: &F, vocab: usize, cfg: &BeamConfig) -> Hypothesis
    where
        F: Fn(&[usize]) -> Result<Vec<f64>>,
    {
        let mut best: Option<Hypothesis> = None;
        let mut consider = |tokens: Vec<usize>| {
            let mut prefix = vec![BOS];
            let mut logp = 0.0;
            for &tok in &tokens {
                logp += scorer(&prefix).unwrap()[tok];
                prefix.push(tok);
            }
            let h = Hypothesis {
                finish_step: tokens.len(),
                tokens,
                logp,
            };
            match &best {
                Some(b) if !h.better_than(b, cfg.alpha) => {}
                _ => best = Some(h),
            }
        };
        // all payload prefixes of length m-1 followed by eos, m <= max_len
        let payload: Vec<usize> = (0..vocab).filter(|&t| t != EOS).collect();
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(prefix) = stack.pop() {
            let mut with_eos = prefix.clone();
            with_eos.push(EOS);
            consider(with_eos);
            if prefix.len() + 1 < cfg.max_len {
                for &t in &payload {
                    let mut next = prefix.clone();
                    next.push(t);
                    stack.push(next);
                }
            }
        }
        best.expect("non-empty universe")
    }

    #[test]
    fn beam_one_equals_greedy_token_for_token() {
        for seed in 0..5 {
            let scorer = toy_scorer(3, seed);
            let cfg = BeamConfig {
                beam_size: 1,
                alpha: 0.6,
                max_len: 4,
            };
            let g = greedy_decode(&scorer, &cfg).unwrap();
            let b = beam_search_decode(&scorer, &cfg).unwrap();
            assert_eq!(g.tokens, b.tokens);
            assert_eq!(g.logp, b.logp);
        }
    }

    #[test]
    fn beam_matches_exhaustive_enumeration_on_toy_model() {
        for seed in 0..10 {
            for alpha in [0.0, 0.6] {
                let scorer = toy_scorer(3, seed);
                let cfg = BeamConfig {
                    beam_size: 4,
                    alpha,
                    max_len: 3,
                };
                let beam = beam_search_decode(&scorer, &cfg).unwrap();
                let brute = enumerate_best(&scorer, 3, &cfg);
                assert_eq!(beam.tokens, brute.tokens, "seed {seed} alpha {alpha}");
                assert!((beam.score(alpha) - brute.score(alpha)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alpha_zero_is_pure_logprob_ranking() {
        assert_eq!(length_penalty(7, 0.0), 1.0);
        let h = Hypothesis {
            tokens: vec![0, 0, EOS],
            logp: -1.5,
            finish_step: 3,
        };
        assert_eq!(h.score(0.0), -1.5);
    }

    #[test]
    fn beam_never_scores_below_greedy() {
        for seed in 20..40 {
            let scorer = toy_scorer(5, seed);
            for beam_size in [2, 4] {
                let cfg = BeamConfig {
                    beam_size,
                    alpha: 0.6,
                    max_len: 5,
                };
                let g = greedy_decode(&scorer, &cfg).unwrap();
                let b = beam_search_decode(&scorer, &cfg).unwrap();
                assert!(
                    b.score(cfg.alpha) >= g.score(cfg.alpha) - 1e-12,
                    "seed {seed} beam {beam_size}"
                );
            }
        }
    }

    #[test]
    fn max_len_forces_eos() {
        // a scorer that never favors eos
        let scorer = |prefix: &[usize]| -> Result<Vec<f64>> {
            let _ = prefix;
            Ok(vec![-0.1, -5.0, -50.0, -0.2])
        };
        let cfg = BeamConfig {
            beam_size: 2,
            alpha: 0.0,
            max_len: 3,
        };
        let h = greedy_decode(scorer, &cfg).unwrap();
        assert_eq!(h.tokens.len(), 3);
        assert_eq!(*h.tokens.last().unwrap(), EOS);
        let b = beam_search_decode(scorer, &cfg).unwrap();
        assert_eq!(*b.tokens.last().unwrap(), EOS);
    }
}
