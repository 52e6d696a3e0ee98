//! The optimization loop: gradient accumulation, scheduling, metrics,
//! checkpoints and divergence detection.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::nn::ForwardCtx;
use crate::tensor::Graph;
use crate::train::{adam_step, lr_at, AdamState, Checkpoint, SchedulerConfig, TaskSpec};

/// Held-out evaluation batches live far above any training batch index.
const EVAL_INDEX_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    /// Optimizer updates to run.
    pub steps: usize,
    /// Micro-batches accumulated per update.
    pub accumulation: usize,
    /// Target-token budget per micro-batch.
    pub batch_tokens: usize,
    /// Checkpoint every this many updates (0 disables periodic saves).
    pub checkpoint_every: usize,
    /// Evaluate on held-out batches every this many updates (0 disables).
    pub eval_every: usize,
    /// Stop early once held-out token accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Seed for the dropout stream.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 500,
            accumulation: 1,
            batch_tokens: 256,
            checkpoint_every: 200,
            eval_every: 25,
            target_accuracy: None,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub token_acc: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_completed: usize,
    pub diverged: bool,
    pub divergence_reason: Option<String>,
    pub final_loss: f64,
    pub final_eval_accuracy: Option<f64>,
    pub reached_target_at: Option<usize>,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint_paths: Vec<PathBuf>,
}

impl TrainOutcome {
    /// Metrics log as CSV: `step,loss,token_acc,lr,grad_norm`.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("step,loss,token_acc,lr,grad_norm\n");
        for r in &self.metrics {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step, r.loss, r.token_acc, r.lr, r.grad_norm
            );
        }
        out
    }
}

pub struct AccumStats {
    pub loss: f64,
    pub tokens: usize,
    pub correct: usize,
}

/// Backwards each micro-batch with its loss scaled by its token count, then
/// rescales the accumulated gradients by the total count. The result equals
/// the gradient of the concatenated batch's mean-per-token loss.
pub fn accumulate_gradients(
    model: &TransformerModel,
    batches: &[crate::model::Batch],
    ctx: &mut ForwardCtx,
) -> Result<AccumStats> {
    if batches.is_empty() {
        return Err(Error::NoMicroBatches);
    }
    model.store.zero_grads();
    let mut weighted_loss = 0.0;
    let mut tokens = 0usize;
    let mut correct = 0usize;
    for batch in batches {
        let mut g = Graph::new();
        let out = model.forward_loss(&mut g, batch, ctx)?;
        let n = out.token_count;
        let scaled = g.scalar_mul(&out.loss, n as f64)?;
        g.backward(&scaled)?;
        weighted_loss += out.loss.item() * n as f64;
        tokens += n;
        correct += out.correct;
    }
    model.store.scale_grads(1.0 / tokens as f64);
    Ok(AccumStats {
        loss: weighted_loss / tokens as f64,
        tokens,
        correct,
    })
}

/// Mean loss and token accuracy over held-out batches, dropout off.
pub fn evaluate(
    model: &TransformerModel,
    task: &TaskSpec,
    batch_tokens: usize,
    n_batches: usize,
) -> Result<(f64, f64)> {
    let mut ctx = ForwardCtx::eval();
    let mut loss_sum = 0.0;
    let mut tokens = 0usize;
    let mut correct = 0usize;
    for i in 0..n_batches as u64 {
        let batch = task.batch(EVAL_INDEX_BASE + i, batch_tokens);
        let mut g = Graph::new();
        let out = model.forward_loss(&mut g, &batch, &mut ctx)?;
        loss_sum += out.loss.item() * out.token_count as f64;
        tokens += out.token_count;
        correct += out.correct;
    }
    Ok((loss_sum / tokens as f64, correct as f64 / tokens as f64))
}

/// Runs `opts.steps` optimizer updates of `model` on `task`.
///
/// Divergence (non-finite loss, non-finite gradient, or a step loss above
/// the initial loss after 20% of the budget) stops the run and is reported
/// in the outcome rather than as an error. Checkpoints go to `out_dir` when
/// given: the initial state as `ckpt-0.dlcl`, every `checkpoint_every`
/// updates, and the final state.
pub fn train_loop(
    model: &TransformerModel,
    task: &TaskSpec,
    sched: &SchedulerConfig,
    adam: &mut AdamState,
    opts: &TrainOptions,
    out_dir: Option<&std::path::Path>,
) -> Result<TrainOutcome> {
    task.validate()?;
    if opts.accumulation == 0 {
        return Err(Error::NoMicroBatches);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut ctx = ForwardCtx::train(opts.seed);
    let mut metrics = Vec::new();
    let mut checkpoint_paths = Vec::new();
    let mut diverged = false;
    let mut divergence_reason = None;
    let mut final_loss = f64::NAN;
    let mut final_eval_accuracy = None;
    let mut reached_target_at = None;
    let mut initial_loss = f64::INFINITY;
    let mut steps_completed = 0;

    let mut save = |step: usize, paths: &mut Vec<PathBuf>| -> Result<()> {
        if let Some(dir) = out_dir {
            let path = dir.join(format!("ckpt-{step}.dlcl"));
            Checkpoint::from_model(model, step).save(&path)?;
            paths.push(path);
        }
        Ok(())
    };
    save(0, &mut checkpoint_paths)?;

    for step in 1..=opts.steps {
        let batches: Vec<_> = (0..opts.accumulation)
            .map(|a| {
                let index = (step as u64 - 1) * opts.accumulation as u64 + a as u64;
                task.batch(index, opts.batch_tokens)
            })
            .collect();
        let stats = accumulate_gradients(model, &batches, &mut ctx)?;
        final_loss = stats.loss;

        if !stats.loss.is_finite() {
            diverged = true;
            divergence_reason = Some(format!("non-finite loss at step {step}"));
            break;
        }

        let grad_norm = {
            let mut sq = 0.0;
            for p in model.store.iter() {
                if p.trainable() {
                    sq += p.grad().iter().map(|g| g * g).sum::<f64>();
                }
            }
            sq.sqrt()
        };

        let lr = lr_at(step, sched);
        if let Err(Error::NonFiniteGradient { name }) = adam_step(&model.store, adam, lr) {
            diverged = true;
            divergence_reason = Some(format!("non-finite gradient in {name} at step {step}"));
            break;
        }
        steps_completed = step;

        if step == 1 {
            initial_loss = stats.loss;
        } else if step * 5 > opts.steps && stats.loss > initial_loss {
            diverged = true;
            divergence_reason = Some(format!(
                "loss {} above initial {} after 20% of the budget (step {step})",
                stats.loss, initial_loss
            ));
        }

        metrics.push(MetricsRow {
            step,
            loss: stats.loss,
            token_acc: stats.correct as f64 / stats.tokens as f64,
            lr,
            grad_norm,
        });

        if diverged {
            break;
        }

        if opts.eval_every > 0 && step % opts.eval_every == 0 {
            let (_, acc) = evaluate(model, task, opts.batch_tokens, 2)?;
            final_eval_accuracy = Some(acc);
            if let Some(target) = opts.target_accuracy {
                if acc >= target {
                    reached_target_at = Some(step);
                }
            }
        }

        if opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0 {
            save(step, &mut checkpoint_paths)?;
        }
        if reached_target_at.is_some() {
            break;
        }
    }

    if checkpoint_paths
        .last()
        .map(|p| !p.ends_with(format!("ckpt-{steps_completed}.dlcl")))
        .unwrap_or(false)
        && steps_completed > 0
    {
        save(steps_completed, &mut checkpoint_paths)?;
    }

    if let Some(dir) = out_dir {
        let outcome_csv = dir.join("metrics.csv");
        let tmp = TrainOutcome {
            steps_completed,
            diverged,
            divergence_reason: divergence_reason.clone(),
            final_loss,
            final_eval_accuracy,
            reached_target_at,
            metrics: metrics.clone(),
            checkpoint_paths: checkpoint_paths.clone(),
        };
        std::fs::write(outcome_csv, tmp.metrics_csv())?;
        return Ok(tmp);
    }

    Ok(TrainOutcome {
        steps_completed,
        diverged,
        divergence_reason,
        final_loss,
        final_eval_accuracy,
        reached_target_at,
        metrics,
        checkpoint_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AggregationMode, Batch, ModelConfig, NormPlacement};
    use crate::train::{AdamConfig, TaskKind};

    fn tiny_model(agg: AggregationMode) -> TransformerModel {
        let cfg = ModelConfig {
            encoder_depth: 2,
            decoder_depth: 1,
            d_model: 16,
            d_ff: 32,
            heads: 2,
            norm: NormPlacement::PreNorm,
            aggregation: agg,
            src_vocab: 8,
            tgt_vocab: 8,
            residual_dropout: 0.0,
            attn_dropout: 0.0,
            ffn_dropout: 0.0,
            label_smoothing: 0.1,
        };
        TransformerModel::new(cfg, 42).unwrap()
    }

    fn task() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: 8,
            min_len: 2,
            max_len: 4,
            seed: 11,
        }
    }

    fn grads_snapshot(model: &TransformerModel) -> Vec<Vec<f64>> {
        model.store.iter().map(|p| p.grad()).collect()
    }

    #[test]
    fn single_micro_batch_equals_plain_backward() {
        let model = tiny_model(AggregationMode::Standard);
        let batch = task().batch(0, 32);
        let mut ctx = ForwardCtx::eval();
        accumulate_gradients(&model, std::slice::from_ref(&batch), &mut ctx).unwrap();
        let accumulated = grads_snapshot(&model);

        model.store.zero_grads();
        let mut g = Graph::new();
        let out = model.forward_loss(&mut g, &batch, &mut ctx).unwrap();
        g.backward(&out.loss).unwrap();
        let plain = grads_snapshot(&model);

        for (a, b) in accumulated.iter().zip(&plain) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn duplicated_micro_batch_leaves_gradient_unchanged() {
        let model = tiny_model(AggregationMode::Standard);
        let batch = task().batch(1, 32);
        let mut ctx = ForwardCtx::eval();
        accumulate_gradients(&model, std::slice::from_ref(&batch), &mut ctx).unwrap();
        let single = grads_snapshot(&model);
        accumulate_gradients(&model, &[batch.clone(), batch], &mut ctx).unwrap();
        let doubled = grads_snapshot(&model);
        for (a, b) in single.iter().zip(&doubled) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn accumulation_matches_concatenated_batch() {
        let model = tiny_model(AggregationMode::Standard);
        let spec = task();
        // force equal widths so the rows can be concatenated
        let mut a = spec.batch(2, 48);
        let mut b = spec.batch(3, 48);
        let t = a.t_src.max(b.t_src);
        for batch in [&mut a, &mut b] {
            widen(batch, t);
        }
        let mut ctx = ForwardCtx::eval();
        accumulate_gradients(&model, &[a.clone(), b.clone()], &mut ctx).unwrap();
        let accumulated = grads_snapshot(&model);

        let concat = Batch {
            b: a.b + b.b,
            t_src: t,
            t_tgt: t,
            src: [a.src.clone(), b.src.clone()].concat(),
            src_pad: [a.src_pad.clone(), b.src_pad.clone()].concat(),
            tgt_in: [a.tgt_in.clone(), b.tgt_in.clone()].concat(),
            tgt_out: [a.tgt_out.clone(), b.tgt_out.clone()].concat(),
        };
        accumulate_gradients(&model, std::slice::from_ref(&concat), &mut ctx).unwrap();
        let whole = grads_snapshot(&model);

        for (x, y) in accumulated.iter().flatten().zip(whole.iter().flatten()) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    fn widen(batch: &mut Batch, t: usize) {
        let widen_matrix = |m: &[usize], old_t: usize, fill: usize| -> Vec<usize> {
            m.chunks_exact(old_t)
                .flat_map(|row| {
                    let mut r = row.to_vec();
                    r.resize(t, fill);
                    r
                })
                .collect()
        };
        batch.src = widen_matrix(&batch.src, batch.t_src, crate::model::PAD);
        batch.tgt_in = widen_matrix(&batch.tgt_in, batch.t_tgt, crate::model::PAD);
        batch.tgt_out = widen_matrix(&batch.tgt_out, batch.t_tgt, crate::model::PAD);
        batch.src_pad = batch
            .src_pad
            .chunks_exact(batch.t_src)
            .flat_map(|row| {
                let mut r = row.to_vec();
                r.resize(t, true);
                r
            })
            .collect();
        batch.t_src = t;
        batch.t_tgt = t;
    }

    #[test]
    fn empty_micro_batch_list_is_rejected() {
        let model = tiny_model(AggregationMode::Standard);
        let mut ctx = ForwardCtx::eval();
        assert!(matches!(
            accumulate_gradients(&model, &[], &mut ctx),
            Err(Error::NoMicroBatches)
        ));
    }

    #[test]
    fn zero_steps_leave_only_the_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(AggregationMode::Standard);
        let mut adam = AdamState::new(AdamConfig::for_placement(model.cfg.norm), &model.store);
        let opts = TrainOptions {
            steps: 0,
            ..TrainOptions::default()
        };
        let outcome = train_loop(
            &model,
            &task(),
            &SchedulerConfig::default(),
            &mut adam,
            &opts,
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(outcome.steps_completed, 0);
        assert_eq!(outcome.checkpoint_paths.len(), 1);
        assert!(outcome.checkpoint_paths[0].ends_with("ckpt-0.dlcl"));
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let run = || {
            let model = tiny_model(AggregationMode::DlclLearned);
            let mut adam = AdamState::new(AdamConfig::for_placement(model.cfg.norm), &model.store);
            let opts = TrainOptions {
                steps: 8,
                accumulation: 2,
                batch_tokens: 24,
                checkpoint_every: 0,
                eval_every: 0,
                target_accuracy: None,
                seed: 5,
            };
            let outcome = train_loop(
                &model,
                &task(),
                &SchedulerConfig {
                    lr_max: 1e-3,
                    warmup: 4,
                    lr_init: 1e-7,
                },
                &mut adam,
                &opts,
                None,
            )
            .unwrap();
            outcome
                .metrics
                .iter()
                .map(|r| r.loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_over_a_short_run() {
        let model = tiny_model(AggregationMode::Standard);
        let mut adam = AdamState::new(AdamConfig::for_placement(model.cfg.norm), &model.store);
        let opts = TrainOptions {
            steps: 30,
            accumulation: 1,
            batch_tokens: 48,
            checkpoint_every: 0,
            eval_every: 0,
            target_accuracy: None,
            seed: 2,
        };
        let outcome = train_loop(
            &model,
            &task(),
            &SchedulerConfig {
                lr_max: 2e-3,
                warmup: 10,
                lr_init: 1e-7,
            },
            &mut adam,
            &opts,
            None,
        )
        .unwrap();
        assert!(!outcome.diverged, "{:?}", outcome.divergence_reason);
        let first = outcome.metrics.first().unwrap().loss;
        let last = outcome.metrics.last().unwrap().loss;
        assert!(last < first, "loss {first} -> {last}");
    }
}
