//! Synthetic sequence tasks driving desk-scale training runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Batch, BOS, EOS, FIRST_PAYLOAD, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl TaskKind {
    pub fn parse(s: &str) -> crate::error::Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            other => Err(crate::error::Error::Config(format!("unknown task '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        }
    }

    /// The target payload for a source payload.
    pub fn transform(&self, payload: &[usize]) -> Vec<usize> {
        let mut out = payload.to_vec();
        match self {
            TaskKind::Copy => {}
            TaskKind::Reverse => out.reverse(),
            TaskKind::Sort => out.sort_unstable(),
        }
        out
    }
}

/// A deterministic stream of batches: payload ids are drawn uniformly from
/// `FIRST_PAYLOAD..vocab_size`, lengths uniformly from `[min_len, max_len]`.
/// Batch `index` depends only on `(seed, index)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> crate::error::Result<()> {
        if self.vocab_size <= FIRST_PAYLOAD {
            return Err(crate::error::Error::Config(format!(
                "vocab_size {} leaves no payload ids above the reserved {FIRST_PAYLOAD}",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(crate::error::Error::Config(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Builds batch `index` with roughly `batch_tokens` target tokens.
    pub fn batch(&self, index: u64, batch_tokens: usize) -> Batch {
        generate_task_batch(self, index, batch_tokens)
    }
}

/// Deterministically generates one batch. Sources are `payload ++ [EOS]`,
/// decoder inputs `[BOS] ++ target`, decoder outputs `target ++ [EOS]`; all
/// rows are padded to the widest sequence with [`PAD`].
pub fn generate_task_batch(spec: &TaskSpec, index: u64, batch_tokens: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index.wrapping_add(1));

    let per_seq = spec.max_len + 1;
    let n_seqs = (batch_tokens / per_seq).max(1);
    let payloads: Vec<Vec<usize>> = (0..n_seqs)
        .map(|_| {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            (0..len)
                .map(|_| rng.gen_range(FIRST_PAYLOAD..spec.vocab_size))
                .collect()
        })
        .collect();

    let t_src = payloads.iter().map(|p| p.len() + 1).max().expect("n_seqs >= 1");
    let t_tgt = t_src;
    let b = payloads.len();
    let mut src = vec![PAD; b * t_src];
    let mut src_pad = vec![true; b * t_src];
    let mut tgt_in = vec![PAD; b * t_tgt];
    let mut tgt_out = vec![PAD; b * t_tgt];
    for (row, payload) in payloads.iter().enumerate() {
        let target = spec.kind.transform(payload);
        for (i, &tok) in payload.iter().enumerate() {
            src[row * t_src + i] = tok;
            src_pad[row * t_src + i] = false;
        }
        src[row * t_src + payload.len()] = EOS;
        src_pad[row * t_src + payload.len()] = false;

        tgt_in[row * t_tgt] = BOS;
        for (i, &tok) in target.iter().enumerate() {
            tgt_in[row * t_tgt + i + 1] = tok;
            tgt_out[row * t_tgt + i] = tok;
        }
        tgt_out[row * t_tgt + target.len()] = EOS;
    }
    Batch {
        b,
        t_src,
        t_tgt,
        src,
        src_pad,
        tgt_in,
        tgt_out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            vocab_size: 16,
            min_len: 3,
            max_len: 5,
            seed: 7,
        }
    }

    #[test]
    fn copy_reverse_sort_transforms() {
        assert_eq!(TaskKind::Copy.transform(&[5, 7, 3]), vec![5, 7, 3]);
        assert_eq!(TaskKind::Reverse.transform(&[5, 7, 3]), vec![3, 7, 5]);
        assert_eq!(TaskKind::Sort.transform(&[5, 7, 3]), vec![3, 5, 7]);
    }

    #[test]
    fn batches_are_deterministic_and_distinct() {
        let s = spec(TaskKind::Copy);
        let a = s.batch(0, 64);
        let b = s.batch(0, 64);
        assert_eq!(a.src, b.src);
        assert_eq!(a.tgt_in, b.tgt_in);
        let c = s.batch(1, 64);
        assert_ne!(a.src, c.src, "different indices give different data");
    }

    #[test]
    fn framing_and_padding_are_consistent() {
        let s = spec(TaskKind::Reverse);
        let batch = s.batch(3, 64);
        for row in 0..batch.b {
            let src_row = &batch.src[row * batch.t_src..(row + 1) * batch.t_src];
            let in_row = &batch.tgt_in[row * batch.t_tgt..(row + 1) * batch.t_tgt];
            let out_row = &batch.tgt_out[row * batch.t_tgt..(row + 1) * batch.t_tgt];
            assert_eq!(in_row[0], BOS);
            let payload: Vec<usize> = src_row
                .iter()
                .copied()
                .take_while(|&t| t != EOS)
                .collect();
            assert!(payload.iter().all(|&t| t >= FIRST_PAYLOAD && t < 16));
            assert!((s.min_len..=s.max_len).contains(&payload.len()));
            let want: Vec<usize> = payload.iter().rev().copied().collect();
            assert_eq!(&out_row[..want.len()], &want[..]);
            assert_eq!(out_row[want.len()], EOS);
            // pads trail and agree with the mask
            let pad_row = &batch.src_pad[row * batch.t_src..(row + 1) * batch.t_src];
            for (tok, &is_pad) in src_row.iter().zip(pad_row) {
                assert_eq!(*tok == PAD, is_pad);
            }
        }
    }

    #[test]
    fn token_budget_controls_batch_size() {
        let s = spec(TaskKind::Copy);
        let small = s.batch(0, 6);
        assert_eq!(small.b, 1);
        let big = s.batch(0, 120);
        assert_eq!(big.b, 20);
    }

    #[test]
    fn validate_rejects_tiny_vocab() {
        let s = TaskSpec {
            vocab_size: 3,
            ..spec(TaskKind::Copy)
        };
        assert!(s.validate().is_err());
    }
}
