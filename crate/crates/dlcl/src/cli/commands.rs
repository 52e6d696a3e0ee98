//! The command implementations behind the `dlcl` binary. Each returns the
//! process exit code: 0 success, 1 usage/config error (via `Err`), 2
//! divergence.

use std::path::{Path, PathBuf};

use crate::cli::heatmap::render_heatmap_csv;
use crate::cli::RunConfig;
use crate::diagnostics::{
    check_postnorm_factorization, check_prenorm_factorization, export_report_csv,
    prenorm_forward_identity_gap, probe_gradient_norms, TinyStackConfig,
};
use crate::error::{Error, Result};
use crate::model::{NormPlacement, TransformerModel};
use crate::train::{
    average_checkpoint_files, beam_search_decode, greedy_decode, train_loop, AdamState, BeamConfig,
    Checkpoint,
};

pub const FACTORIZATION_TOLERANCE: f64 = 1e-6;

fn build_model(cfg: &RunConfig) -> Result<TransformerModel> {
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    cfg.task_spec().validate()?;
    TransformerModel::new(model_cfg, cfg.seed)
}

/// Trains per the run config, writing metrics, checkpoints and a JSON report
/// into `out_dir`. Exit 2 when the run diverges.
pub fn cmd_train(cfg: &RunConfig, preset: Option<&str>) -> Result<i32> {
    let model = build_model(cfg)?;
    let task = cfg.task_spec();
    let sched = cfg.scheduler();
    let mut adam = AdamState::new(cfg.adam_config(), &model.store);
    let opts = cfg.train_options();
    let out_dir = PathBuf::from(&cfg.out_dir);

    if let Some(name) = preset {
        println!(
            "preset {name}: schedule constants scaled 1/{} from the full-scale recipe",
            crate::cli::DESK_SCALE_FACTOR
        );
    }
    println!(
        "training {} {} L={} N={} d={} task={} steps={} accumulation={} batch_tokens={} seed={}",
        cfg.norm.as_str(),
        cfg.aggregation.as_str(),
        cfg.encoder_depth,
        cfg.decoder_depth,
        cfg.d_model,
        cfg.task.as_str(),
        opts.steps,
        opts.accumulation,
        opts.batch_tokens,
        cfg.seed,
    );

    let outcome = train_loop(&model, &task, &sched, &mut adam, &opts, Some(&out_dir))?;

    let report = serde_json::json!({
        "steps_completed": outcome.steps_completed,
        "diverged": outcome.diverged,
        "divergence_reason": outcome.divergence_reason,
        "final_loss": outcome.final_loss,
        "final_eval_accuracy": outcome.final_eval_accuracy,
        "reached_target_at": outcome.reached_target_at,
        "checkpoints": outcome.checkpoint_paths,
    });
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;

    if outcome.diverged {
        println!(
            "diverged after {} steps: {}",
            outcome.steps_completed,
            outcome.divergence_reason.as_deref().unwrap_or("unknown")
        );
        return Ok(2);
    }
    println!(
        "completed {} steps, final loss {:.6}, eval accuracy {}",
        outcome.steps_completed,
        outcome.final_loss,
        outcome
            .final_eval_accuracy
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".into()),
    );
    Ok(0)
}

/// One gradient probe at init or from a checkpoint; writes the report CSV
/// and prints the bottom/top ratio.
pub fn cmd_probe_grad(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<i32> {
    let model = build_model(cfg)?;
    if let Some(path) = checkpoint {
        Checkpoint::load(path)?.apply_to(&model)?;
    }
    let batch = cfg.task_spec().batch(0, cfg.batch_tokens);
    let report = probe_gradient_norms(&model, &batch, cfg.seed)?;

    let out_path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            std::fs::create_dir_all(&cfg.out_dir)?;
            PathBuf::from(&cfg.out_dir).join("grad_report.csv")
        }
    };
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    export_report_csv(&report, &out_path)?;
    println!(
        "layers={} embedding_grad_norm={} bottom_top_ratio={}{}",
        report.layer_norms.len(),
        report.embedding_norm,
        report.bottom_top_ratio,
        if report.divergent { " divergent" } else { "" },
    );
    Ok(0)
}

/// Runs one factorization check on a tiny stack; exit 0 iff the assembled
/// and end-to-end Jacobians agree within 1e-6.
pub fn cmd_check_factorization(
    placement: &str,
    depth: usize,
    d_model: usize,
    seq_len: usize,
    seed: u64,
) -> Result<i32> {
    let placement = NormPlacement::parse(placement)?;
    let cfg = TinyStackConfig::new(placement, depth, d_model, seq_len, seed)?;
    let check = match placement {
        NormPlacement::PreNorm => check_prenorm_factorization(cfg)?,
        NormPlacement::PostNorm => check_postnorm_factorization(cfg)?,
    };
    println!(
        "{} depth={} max_rel_error={}",
        placement.as_str(),
        check.depth,
        check.max_rel_error
    );
    if placement == NormPlacement::PreNorm {
        let gap = prenorm_forward_identity_gap(cfg)?;
        println!("forward identity gap={gap}");
    }
    Ok(if check.max_rel_error <= FACTORIZATION_TOLERANCE {
        0
    } else {
        1
    })
}

/// Exports aggregation weights of a DLCL checkpoint as a masked heatmap CSV.
pub fn cmd_export_weights(checkpoint: &Path, out: &Path) -> Result<i32> {
    let ck = Checkpoint::load(checkpoint)?;
    let csv = render_heatmap_csv(&ck)?;
    std::fs::write(out, csv)?;
    println!("wrote {}", out.display());
    Ok(0)
}

/// Decodes one space-separated id sequence per input line, writing one
/// `tokens<TAB>score` line each.
pub fn cmd_decode(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    beam: BeamConfig,
) -> Result<i32> {
    let model = build_model(cfg)?;
    Checkpoint::load(checkpoint)?.apply_to(&model)?;
    let text = std::fs::read_to_string(input)?;
    let mut lines_out = String::new();
    for (i, line) in text.lines().enumerate() {
        let ids: std::result::Result<Vec<usize>, _> =
            line.split_whitespace().map(|t| t.parse::<usize>()).collect();
        let ids = ids.map_err(|_| Error::Config(format!("input line {}: malformed id sequence", i + 1)))?;
        if ids.is_empty() {
            return Err(Error::Config(format!("input line {}: empty sequence", i + 1)));
        }
        for &id in &ids {
            if id >= cfg.vocab_size {
                return Err(Error::Config(format!(
                    "input line {}: id {id} outside vocab of {}",
                    i + 1,
                    cfg.vocab_size
                )));
            }
        }
        let scorer = model.scorer(&ids)?;
        let hyp = if beam.beam_size == 1 {
            greedy_decode(&scorer, &beam)?
        } else {
            beam_search_decode(&scorer, &beam)?
        };
        let toks: Vec<String> = hyp.tokens.iter().map(|t| t.to_string()).collect();
        lines_out.push_str(&format!("{}\t{}\n", toks.join(" "), hyp.score(beam.alpha)));
    }
    std::fs::write(out, lines_out)?;
    Ok(0)
}

/// Averages checkpoints with matching config hashes into one file.
pub fn cmd_avg_ckpt(paths: &[PathBuf], out: &Path) -> Result<i32> {
    if paths.is_empty() {
        return Err(Error::Config("avg-ckpt needs at least one checkpoint".into()));
    }
    let avg = average_checkpoint_files(paths)?;
    avg.save(out)?;
    println!("averaged {} checkpoints into {} (step {})", paths.len(), out.display(), avg.step);
    Ok(0)
}
