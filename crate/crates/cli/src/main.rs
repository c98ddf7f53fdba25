//! `onestep` command-line interface.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad configuration or usage,
//! 3 missing input file, 4 numerical abort. Failures print one line to
//! stderr of the form `error kind=<kind>: <message>`.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use onestep::config::{help_text, AppConfig};
use onestep::degrade::{self, PairedSample};
use onestep::flowcore::{run_mismatch_experiment, MismatchReport};
use onestep::spectral::{self, ArtifactReport};
use onestep::trainer::{self, checkpoint, EvalReport, EvalRow, RunOptions};
use onestep::{losses, Error, Image, Result};

#[derive(Parser, Debug)]
#[command(name = "onestep", version, about = "Toy one-step super-resolution: training, evaluation and analysis")]
#[command(after_long_help = help_text())]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set weights.lambda3=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Directory receiving every output.
    #[arg(long, default_value = "out", global = true)]
    output_dir: PathBuf,
    /// Worker threads for data-parallel sections.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the procedural dataset; writes checkpoints, metrics.csv and samples.
    Train {
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed steps without finalizing.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint and the upsampling baseline on held-out samples.
    Eval {
        /// Checkpoint file; defaults to the newest under `<output-dir>/checkpoints`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of held-out samples; defaults to `data.n_eval`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Degrade one PNG, or export a paired dataset with `--dataset N`.
    Degrade {
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        #[arg(long, conflicts_with = "input")]
        dataset: Option<usize>,
    },
    /// Spectrum image and grid-artifact statistics of a PNG.
    AnalyzeSpectrum {
        input: PathBuf,
        /// Artifact period in pixels; defaults to the generator's p·f.
        #[arg(long)]
        period: Option<usize>,
        #[arg(long, default_value_t = 16)]
        radial_bins: usize,
    },
    /// Trajectory-mismatch sweep on a toy flow; writes a CSV and a plot.
    SimulateMismatch {
        /// Comma-separated severities; overrides `mismatch.severities`.
        #[arg(long, value_delimiter = ',')]
        severities: Option<Vec<f64>>,
    },
    /// Quality metrics of a prediction PNG against a reference PNG.
    Metrics {
        prediction: PathBuf,
        reference: PathBuf,
        #[arg(long)]
        period: Option<usize>,
    },
}

fn load_config(g: &Global) -> Result<AppConfig> {
    let base = match &g.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    base.with_overrides(&g.overrides)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

#[derive(Serialize)]
struct EvalSummary {
    step: u64,
    n_samples: usize,
    model: EvalRow,
    baseline: EvalRow,
    rows: Vec<EvalRow>,
}

fn summary(step: u64, model: EvalReport, baseline: EvalReport) -> EvalSummary {
    EvalSummary {
        step,
        n_samples: model.rows.len(),
        model: model.mean,
        baseline: baseline.mean,
        rows: model.rows,
    }
}

fn train(cfg: &AppConfig, out: &Path, resume: bool, stop_after: Option<u64>) -> Result<()> {
    let tc = &cfg.train;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.cfg"), cfg.render())?;
    let train_set = tc.train_set()?;
    let eval_set = tc.eval_set()?;
    let opts = RunOptions {
        output_dir: out.to_path_buf(),
        resume,
        stop_after,
        triptychs: true,
    };
    let outcome = trainer::run_training(tc, &train_set, &eval_set, &opts)?;
    if outcome.interrupted {
        println!("stopped at step {}", outcome.state.step);
        return Ok(());
    }
    if let Some(report) = outcome.final_eval {
        let baseline = trainer::evaluate_baseline(tc, &eval_set)?;
        let s = summary(outcome.state.step, report, baseline);
        write_json(&out.join("eval.json"), &s)?;
        println!(
            "step {}: psnr {:.3} (baseline {:.3}), artifact_ratio {:.4}",
            s.step, s.model.psnr, s.baseline.psnr, s.model.artifact_ratio
        );
    } else {
        println!("step {}: no training steps run", outcome.state.step);
    }
    Ok(())
}

fn eval(cfg: &AppConfig, out: &Path, ckpt: Option<PathBuf>, n: Option<usize>) -> Result<()> {
    let path = match ckpt {
        Some(p) => p,
        None => {
            let dir = out.join("checkpoints");
            checkpoint::latest(&dir)?.ok_or(Error::MissingFile(dir))?
        }
    };
    let (manifest, _) = checkpoint::read(&path)?;
    let mut tc = manifest.config.clone();
    tc.data.n_eval = n.unwrap_or(cfg.train.data.n_eval);
    let state = checkpoint::load(&path, &manifest.config)?;
    let eval_set = tc.eval_set()?;
    let s = summary(
        state.step,
        trainer::evaluate(&state, &tc, &eval_set)?,
        trainer::evaluate_baseline(&tc, &eval_set)?,
    );
    fs::create_dir_all(out)?;
    write_json(&out.join("eval.json"), &s)?;
    println!("step {}: psnr {:.3} (baseline {:.3})", s.step, s.model.psnr, s.baseline.psnr);
    Ok(())
}

fn degrade_cmd(cfg: &AppConfig, out: &Path, input: Option<PathBuf>, sample_seed: u64, dataset: Option<usize>) -> Result<()> {
    let tc = &cfg.train;
    fs::create_dir_all(out)?;
    match (input, dataset) {
        (Some(input), _) => {
            let hr = Image::read_png(&input)?;
            let lr = degrade::degrade(&hr, &tc.degradation, sample_seed)?;
            let path = out.join(format!("{}_lr.png", stem(&input)));
            lr.write_png(&path)?;
            println!("{}", path.display());
        }
        (None, Some(n)) => {
            let samples: Vec<PairedSample> =
                degrade::make_dataset(0, n, tc.data.hr_size, &tc.degradation, &tc.data.families)?;
            degrade::export_dataset(&out.join("dataset"), &samples)?;
            println!("{}", out.join("dataset").display());
        }
        (None, None) => return Err(Error::Config {
            key: "degrade".into(),
            message: "give an input PNG or --dataset N".into(),
        }),
    }
    Ok(())
}

#[derive(Serialize)]
struct SpectrumSummary {
    image: String,
    height: usize,
    width: usize,
    #[serde(flatten)]
    artifacts: ArtifactReport,
    radial_power: Vec<(f64, f64)>,
}

fn analyze_spectrum(cfg: &AppConfig, out: &Path, input: &Path, period: Option<usize>, bins: usize) -> Result<()> {
    let img = Image::read_png(input)?;
    let period = period.unwrap_or_else(|| cfg.train.generator.artifact_period());
    let s = SpectrumSummary {
        image: input.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
        height: img.height(),
        width: img.width(),
        artifacts: spectral::grid_artifact_energy(&img, period)?,
        radial_power: spectral::radial_power_spectrum(&img, bins)?,
    };
    fs::create_dir_all(out)?;
    let name = stem(input);
    spectral::spectrum_image(&img).write_png(&out.join(format!("{name}_spectrum.png")))?;
    write_json(&out.join(format!("{name}_spectrum.json")), &s)?;
    println!("period {period}: ratio {:.6}", s.artifacts.ratio);
    Ok(())
}

fn simulate_mismatch(cfg: &AppConfig, out: &Path, severities: Option<Vec<f64>>) -> Result<()> {
    let mut mc = cfg.mismatch.clone();
    if let Some(s) = severities {
        mc.severities = s;
    }
    let report: MismatchReport = run_mismatch_experiment(&mc)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("mismatch.csv"), report.to_csv())?;
    let one: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.severity, r.one_step_error)).collect();
    let multi: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.severity, r.multi_step_error)).collect();
    let img = plot::line_plot(
        &[
            plot::Series {
                points: &one,
                color: [0.85, 0.2, 0.15],
            },
            plot::Series {
                points: &multi,
                color: [0.15, 0.3, 0.85],
            },
        ],
        320,
        240,
    );
    img.write_png(&out.join("mismatch.png"))?;
    print!("{}", report.to_csv());
    Ok(())
}

#[derive(Serialize)]
struct MetricsSummary {
    psnr: f64,
    ssim: f64,
    perceptual: f64,
    fdl: f64,
    artifact_period: usize,
    artifact_ratio: f64,
}

fn metrics(cfg: &AppConfig, out: &Path, pred: &Path, reference: &Path, period: Option<usize>) -> Result<()> {
    let (p, r) = (Image::read_png(pred)?, Image::read_png(reference)?);
    let tc = &cfg.train;
    let period = period.unwrap_or_else(|| tc.generator.artifact_period());
    let m = MetricsSummary {
        psnr: spectral::psnr(&p, &r, 1.0)?,
        ssim: spectral::ssim(&p, &r)?,
        perceptual: losses::perceptual_value(&p, &r)?,
        fdl: losses::fdl_value(&r, &p, tc.seed, &tc.weights)?,
        artifact_period: period,
        artifact_ratio: spectral::grid_artifact_energy(&p, period)?.ratio,
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &m)?;
    println!("psnr {:.4} ssim {:.6}", m.psnr, m.ssim);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.global.jobs == 0 {
        return Err(Error::Config {
            key: "--jobs".into(),
            message: "must be at least 1".into(),
        });
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let cfg = load_config(&cli.global)?;
    let out = cli.global.output_dir.as_path();
    match cli.command {
        Command::Train { resume, stop_after } => train(&cfg, out, resume, stop_after),
        Command::Eval { checkpoint, n } => eval(&cfg, out, checkpoint, n),
        Command::Degrade {
            input,
            sample_seed,
            dataset,
        } => degrade_cmd(&cfg, out, input, sample_seed, dataset),
        Command::AnalyzeSpectrum {
            input,
            period,
            radial_bins,
        } => analyze_spectrum(&cfg, out, &input, period, radial_bins),
        Command::SimulateMismatch { severities } => simulate_mismatch(&cfg, out, severities),
        Command::Metrics {
            prediction,
            reference,
            period,
        } => metrics(&cfg, out, &prediction, &reference, period),
    }
}

fn exit_code(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config { .. } => (2, "config"),
        Error::MissingFile(_) => (3, "missing_file"),
        Error::NonFinite { .. } => (4, "numerical"),
        Error::Checkpoint(_) => (1, "checkpoint"),
        Error::Png(_) => (1, "png"),
        Error::Io(_) => (1, "io"),
        _ => (1, "runtime"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={kind}: {msg}");
            ExitCode::from(code)
        }
    }
}
