//! The full training loop over the schedule.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::checkpoint;
use super::{batch_indices, evaluate, train_step, triptych, EvalReport, EvalRow, TrainConfig, TrainState};
use crate::degrade::PairedSample;
use crate::error::{Error, Result};
use crate::losses::LossReport;

/// Column order of `metrics.csv`. Training rows leave the evaluation
/// columns empty and evaluation rows leave the loss columns empty.
pub const METRICS_HEADER: &str =
    "kind,step,stage,lambda3,l1,perceptual,ragan_g,fdl,total_g,ragan_d,r1,total_d,psnr,ssim,eval_perceptual,eval_fdl,artifact_ratio";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub output_dir: PathBuf,
    /// Continue from the newest checkpoint in `output_dir/checkpoints`.
    pub resume: bool,
    /// Stop once this many steps are complete, skipping the final
    /// checkpoint and evaluation (simulates an interruption).
    pub stop_after: Option<u64>,
    /// Write an LR / prediction / HR PNG at every evaluation.
    pub triptychs: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    pub final_eval: Option<EvalReport>,
    pub interrupted: bool,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

fn train_row(step: u64, cfg: &TrainConfig, r: &LossReport) -> String {
    format!(
        "train,{step},{},{:e},{},,,,,",
        cfg.stage_at(step),
        cfg.lambda3_at(step),
        r.to_csv_row()
    )
}

fn eval_row(step: u64, cfg: &TrainConfig, m: &EvalRow) -> String {
    let stage = cfg.stage_at(step.saturating_sub(1));
    format!("eval,{step},{stage},,,,,,,,,,{}", m.to_csv_row())
}

/// Keeps the header and rows that precede `step` in a resumed run.
fn truncate_metrics(path: &Path, step: u64) -> Result<String> {
    let text = fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(Error::Checkpoint(format!("{} has an unexpected header", path.display())));
            }
            writeln!(out, "{line}").expect("string write");
            continue;
        }
        let mut f = line.splitn(3, ',');
        let (kind, s) = (f.next().unwrap_or(""), f.next().and_then(|s| s.parse::<u64>().ok()));
        let keep = match (kind, s) {
            ("train", Some(s)) => s < step,
            ("eval", Some(s)) => s <= step,
            _ => false,
        };
        if keep {
            writeln!(out, "{line}").expect("string write");
        }
    }
    Ok(out)
}

/// Runs `cfg.total_steps` training steps with batches drawn from `train`.
/// Evaluations on `eval` happen every `eval_every` steps and at the end;
/// checkpoints at step 0, every `checkpoint_every` steps and at the end.
pub fn run_training(cfg: &TrainConfig, train: &[PairedSample], eval: &[PairedSample], opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let ckpt_dir = opts.output_dir.join("checkpoints");
    let sample_dir = opts.output_dir.join("samples");
    let metrics_path = opts.output_dir.join("metrics.csv");
    fs::create_dir_all(&opts.output_dir)?;

    let resumed = if opts.resume { checkpoint::latest(&ckpt_dir)? } else { None };
    let (mut state, prefix) = match resumed {
        Some(path) if metrics_path.exists() => {
            let state = checkpoint::load(&path, cfg)?;
            let prefix = truncate_metrics(&metrics_path, state.step)?;
            (state, prefix)
        }
        _ => (TrainState::new(cfg)?, format!("{METRICS_HEADER}\n")),
    };
    let mut metrics = fs::File::create(&metrics_path)?;
    metrics.write_all(prefix.as_bytes())?;

    let mut checkpoints = Vec::new();
    if state.step == 0 {
        checkpoints.push(checkpoint::save(&ckpt_dir, &state, cfg)?);
    }
    let mut final_eval = None;
    let do_eval = |state: &TrainState, metrics: &mut fs::File| -> Result<EvalReport> {
        let report = evaluate(state, cfg, eval)?;
        writeln!(metrics, "{}", eval_row(state.step, cfg, &report.mean))?;
        if opts.triptychs {
            fs::create_dir_all(&sample_dir)?;
            let img = triptych(state, cfg, &eval[0])?;
            img.write_png(&sample_dir.join(format!("step_{:08}.png", state.step)))?;
        }
        Ok(report)
    };

    while state.step < cfg.total_steps {
        if opts.stop_after.is_some_and(|s| state.step >= s) {
            metrics.flush()?;
            return Ok(RunOutcome {
                state,
                final_eval,
                interrupted: true,
                metrics_path,
                checkpoints,
            });
        }
        let idx = batch_indices(cfg, state.rng_cursor, train.len());
        let batch: Vec<&PairedSample> = idx.iter().map(|&i| &train[i]).collect();
        let step = state.step;
        let report = train_step(&mut state, cfg, &batch)?;
        writeln!(metrics, "{}", train_row(step, cfg, &report))?;
        let last = state.step == cfg.total_steps;
        if !eval.is_empty() && (last || (cfg.eval_every > 0 && state.step % cfg.eval_every == 0)) {
            final_eval = Some(do_eval(&state, &mut metrics)?);
        }
        if last || (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) {
            metrics.flush()?;
            checkpoints.push(checkpoint::save(&ckpt_dir, &state, cfg)?);
        }
    }
    metrics.flush()?;
    Ok(RunOutcome {
        state,
        final_eval,
        interrupted: false,
        metrics_path,
        checkpoints,
    })
}
