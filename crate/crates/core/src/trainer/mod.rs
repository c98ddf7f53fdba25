//! Alternating generator/discriminator training over the two-stage
//! schedule, with evaluation, checkpoints and a metrics CSV.

pub mod checkpoint;
mod run;

use std::collections::BTreeMap;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Gradients, Var};
use crate::degrade::{self, upsample_to, DegradationConfig, PairedSample, TextureFamily};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{
    self, approx_r1_loss, fdl_from_features, perceptual_from_features, ragan_discriminator_loss, ragan_generator_loss,
    total_discriminator_loss, total_generator_loss, BoundDiscriminator, GeneratorComponents, LossReport, LossWeights,
};
use crate::nets::{
    discriminator_forward, feature_extract, restore, restore_image, BindMode, Bound, Discriminator,
    DiscriminatorConfig, Generator, GeneratorConfig, ParamStore,
};
use crate::optim::{AdamW, Moments};
use crate::rng::{self, tag};
use crate::spectral;
use crate::tensor::Tensor;

pub use run::{run_training, RunOptions, RunOutcome, METRICS_HEADER};

/// Held-out samples start at this dataset index.
pub const EVAL_OFFSET: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub stage1_steps: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Time at which the upsampled LR latent enters the flow.
    pub t1: f64,
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub degradation: DegradationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub hr_size: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub families: Vec<TextureFamily>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            hr_size: 64,
            n_train: 64,
            n_eval: 8,
            families: TextureFamily::ALL.to_vec(),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 3000,
            stage1_steps: 2000,
            batch_size: 4,
            lr_generator: 1e-4,
            lr_discriminator: 2e-5,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            seed: 0,
            eval_every: 500,
            checkpoint_every: 500,
            t1: 0.5,
            data: DataConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            degradation: DegradationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.stage1_steps > self.total_steps {
            return bad(format!("stage1_steps {} exceeds total_steps {}", self.stage1_steps, self.total_steps));
        }
        if !(self.lr_generator > 0.0 && self.lr_discriminator > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.t1 > 0.0 && self.t1 <= 1.0) {
            return bad(format!("t1 {} must lie in (0, 1]", self.t1));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        let d = &self.data;
        let block = self.generator.artifact_period().max(self.degradation.scale);
        if d.hr_size == 0 || d.hr_size % block != 0 || d.hr_size % self.degradation.scale != 0 {
            return bad(format!("hr_size {} must be divisible by p·f and the degradation scale", d.hr_size));
        }
        if d.n_train == 0 || d.families.is_empty() {
            return bad("dataset needs n_train > 0 and at least one family".into());
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.degradation.validate()
    }

    /// FDL weight in effect at `step`: zero during the first stage.
    pub fn lambda3_at(&self, step: u64) -> f64 {
        if step < self.stage1_steps {
            0.0
        } else {
            self.weights.lambda3
        }
    }

    pub fn stage_at(&self, step: u64) -> u8 {
        if step < self.stage1_steps {
            1
        } else {
            2
        }
    }

    pub fn train_set(&self) -> Result<Vec<PairedSample>> {
        let d = &self.data;
        degrade::make_dataset(0, d.n_train, d.hr_size, &self.degradation, &d.families)
    }

    pub fn eval_set(&self) -> Result<Vec<PairedSample>> {
        let d = &self.data;
        degrade::make_dataset(EVAL_OFFSET, d.n_eval, d.hr_size, &self.degradation, &d.families)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_moments: BTreeMap<String, Moments>,
    pub d_moments: BTreeMap<String, Moments>,
    /// Counter from which batch, noise and projection streams derive.
    pub rng_cursor: u64,
}

fn moments_for(params: &ParamStore) -> BTreeMap<String, Moments> {
    params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(k, p)| (k.to_string(), Moments::zeros_like(&p.value)))
        .collect()
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(cfg.generator.clone())?;
        let discriminator = Discriminator::new(cfg.discriminator.clone())?;
        Ok(Self {
            step: 0,
            g_moments: moments_for(&generator.params),
            d_moments: moments_for(&discriminator.params),
            generator,
            discriminator,
            rng_cursor: 0,
        })
    }

    pub fn stage(&self, cfg: &TrainConfig) -> u8 {
        cfg.stage_at(self.step)
    }
}

/// Dataset indices of the batch for `step`, uniform with replacement.
pub fn batch_indices(cfg: &TrainConfig, cursor: u64, n: usize) -> Vec<usize> {
    let mut r = rng::stream(&[cfg.seed, tag::BATCH, cursor]);
    (0..cfg.batch_size).map(|_| r.random_range(0..n)).collect()
}

fn is_lora(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// One AdamW update of every trainable parameter. Weight decay applies to
/// everything except LoRA factors.
fn apply_updates(
    params: &mut ParamStore,
    bound: &Bound,
    grads: &mut Gradients,
    moments: &mut BTreeMap<String, Moments>,
    opt: &AdamW,
    t: u64,
    what: &str,
    step: u64,
) -> Result<()> {
    let mut updates = Vec::new();
    for name in params.trainable_names() {
        let var = bound.get(&name);
        let grad = grads
            .take(var)
            .unwrap_or_else(|| Tensor::zeros(params.get(&name).expect("listed").shape().to_vec()));
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                what: format!("{what} gradient of {name}"),
                step,
            });
        }
        updates.push((name, grad));
    }
    for (name, grad) in updates {
        let m = moments.get_mut(&name).expect("moments exist for trainables");
        let p = params.get_mut(&name)?;
        opt.step(p, &grad, m, t, !is_lora(&name));
    }
    Ok(())
}

/// Logit maps of several images, concatenated per level into `n × 1` nodes.
fn stack_levels(g: &mut Graph, per_image: Vec<Vec<Var>>) -> Result<Vec<Var>> {
    let levels = per_image[0].len();
    let mut out = Vec::with_capacity(levels);
    for l in 0..levels {
        let mut acc: Option<Var> = None;
        for maps in &per_image {
            let m = maps[l];
            let n = g.value(m).len();
            let col = g.reshape(m, &[n, 1])?;
            acc = Some(match acc {
                None => col,
                Some(a) => g.concat_rows(a, col)?,
            });
        }
        out.push(acc.expect("non-empty batch"));
    }
    Ok(out)
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let w = 1.0 / terms.len() as f64;
    g.weighted_sum(&terms.iter().map(|&t| (t, w)).collect::<Vec<_>>())
}

/// Generator update only. Returns the detached predictions and the report.
pub fn generator_pass(state: &mut TrainState, cfg: &TrainConfig, batch: &[&PairedSample]) -> Result<(Vec<Tensor>, LossReport)> {
    let step = state.step;
    let lambda3 = cfg.lambda3_at(step);
    let mut g = Graph::new();
    let gp = state.generator.params.bind(&mut g, BindMode::Train);
    let dp = state.discriminator.params.bind(&mut g, BindMode::Frozen);
    let critic = BoundDiscriminator {
        net: &state.discriminator,
        params: &dp,
    };
    let proj_seed = rng::derive_seed(&[cfg.seed, tag::PROJECTIONS, state.rng_cursor]);
    let (mut l1s, mut percs, mut fdls, mut fakes, mut reals, mut preds) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for s in batch {
        let (h, w) = (s.x_hr.height(), s.x_hr.width());
        let r = restore(&mut g, &state.generator, &gp, &s.x_lr, h, w, cfg.t1)?;
        let hr = g.constant(s.x_hr.tensor().clone());
        l1s.push(losses::l1_loss(&mut g, r.x_pred, hr)?);
        let fp = feature_extract(&mut g, r.x_pred)?;
        let fh = feature_extract(&mut g, hr)?;
        percs.push(perceptual_from_features(&mut g, &fp, &fh)?);
        let fp_fdl: Vec<Var> = if lambda3 != 0.0 {
            fp.clone()
        } else {
            fp.iter().map(|&v| g.detach(v)).collect()
        };
        fdls.push(fdl_from_features(&mut g, &fh, &fp_fdl, proj_seed, &cfg.weights)?.total);
        use crate::losses::Critic;
        fakes.push(critic.logits(&mut g, r.x_pred)?);
        reals.push(critic.logits(&mut g, hr)?);
        preds.push(r.x_pred);
    }
    let fake_levels = stack_levels(&mut g, fakes)?;
    let real_levels = stack_levels(&mut g, reals)?;
    let components = GeneratorComponents {
        l1: batch_mean(&mut g, &l1s)?,
        perceptual: batch_mean(&mut g, &percs)?,
        ragan_g: ragan_generator_loss(&mut g, &fake_levels, &real_levels)?,
        fdl: batch_mean(&mut g, &fdls)?,
    };
    let (total, report) = total_generator_loss(&mut g, components, &cfg.weights, lambda3)?;
    if !report.l1.is_finite() || !report.total_g.is_finite() || !report.fdl.is_finite() {
        return Err(Error::NonFinite {
            what: "generator loss".into(),
            step,
        });
    }
    let mut grads = g.backward(total);
    let opt = AdamW::new(cfg.lr_generator).with_weight_decay(cfg.weight_decay);
    apply_updates(
        &mut state.generator.params,
        &gp,
        &mut grads,
        &mut state.g_moments,
        &opt,
        step + 1,
        "generator",
        step,
    )?;
    let preds = preds.into_iter().map(|v| g.value(v).clone()).collect();
    Ok((preds, report))
}

/// Discriminator update only, on detached predictions. Returns
/// `(ragan_d, r1, total_d)`.
pub fn discriminator_pass(state: &mut TrainState, cfg: &TrainConfig, batch: &[&PairedSample], preds: Vec<Tensor>) -> Result<(f64, f64, f64)> {
    let step = state.step;
    let mut g = Graph::new();
    let dp = state.discriminator.params.bind(&mut g, BindMode::Train);
    let critic = BoundDiscriminator {
        net: &state.discriminator,
        params: &dp,
    };
    let (mut fakes, mut reals, mut r1s) = (vec![], vec![], vec![]);
    for (i, (s, pred)) in batch.iter().zip(preds).enumerate() {
        let fake = g.constant(pred);
        let real = g.constant(s.x_hr.tensor().clone());
        fakes.push(discriminator_forward(&mut g, &state.discriminator, &dp, fake)?);
        reals.push(discriminator_forward(&mut g, &state.discriminator, &dp, real)?);
        let seed = rng::derive_seed(&[cfg.seed, state.rng_cursor, i as u64]);
        r1s.push(approx_r1_loss(&mut g, &critic, s.x_hr.tensor(), cfg.weights.r1_sigma, seed)?);
    }
    let fake_levels = stack_levels(&mut g, fakes)?;
    let real_levels = stack_levels(&mut g, reals)?;
    let ragan_d = ragan_discriminator_loss(&mut g, &fake_levels, &real_levels)?;
    let r1 = batch_mean(&mut g, &r1s)?;
    let total = total_discriminator_loss(&mut g, ragan_d, r1, &cfg.weights)?;
    let values = (g.value(ragan_d).item(), g.value(r1).item(), g.value(total).item());
    if !values.2.is_finite() {
        return Err(Error::NonFinite {
            what: "discriminator loss".into(),
            step,
        });
    }
    let mut grads = g.backward(total);
    let opt = AdamW::new(cfg.lr_discriminator).with_weight_decay(cfg.weight_decay);
    apply_updates(
        &mut state.discriminator.params,
        &dp,
        &mut grads,
        &mut state.d_moments,
        &opt,
        step + 1,
        "discriminator",
        step,
    )?;
    Ok(values)
}

/// One alternating step: generator first, then the discriminator on the
/// detached predictions. On a non-finite loss or gradient the state is left
/// exactly as it was and the error is returned.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &[&PairedSample]) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let backup = state.clone();
    let result = (|| {
        let (preds, mut report) = generator_pass(state, cfg, batch)?;
        let (ragan_d, r1, total_d) = discriminator_pass(state, cfg, batch, preds)?;
        report.ragan_d = ragan_d;
        report.r1 = r1;
        report.total_d = total_d;
        if !state.generator.params.all_finite() || !state.discriminator.params.all_finite() {
            return Err(Error::NonFinite {
                what: "parameters".into(),
                step: state.step,
            });
        }
        Ok(report)
    })();
    match result {
        Ok(report) => {
            state.step += 1;
            state.rng_cursor += 1;
            Ok(report)
        }
        Err(e) => {
            *state = backup;
            Err(e)
        }
    }
}

/// Trains in memory until `state.step == until`, without checkpoints or
/// logging. Returns the per-step reports.
pub fn train_until(state: &mut TrainState, cfg: &TrainConfig, train: &[PairedSample], until: u64) -> Result<Vec<LossReport>> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut reports = Vec::new();
    while state.step < until {
        let idx = batch_indices(cfg, state.rng_cursor, train.len());
        let batch: Vec<&PairedSample> = idx.iter().map(|&i| &train[i]).collect();
        reports.push(train_step(state, cfg, &batch)?);
    }
    Ok(reports)
}

/// Per-image evaluation metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub fdl: f64,
    pub artifact_ratio: f64,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "psnr,ssim,perceptual,fdl,artifact_ratio";

    pub fn to_csv_row(&self) -> String {
        [self.psnr, self.ssim, self.perceptual, self.fdl, self.artifact_ratio]
            .iter()
            .map(|v| format!("{v:e}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
}

fn score(pred: &Image, s: &PairedSample, cfg: &TrainConfig) -> Result<EvalRow> {
    let mut w = cfg.weights.clone();
    w.n_projections = w.n_projections.max(1);
    Ok(EvalRow {
        psnr: spectral::psnr(pred, &s.x_hr, 1.0)?,
        ssim: spectral::ssim(pred, &s.x_hr)?,
        perceptual: losses::perceptual_value(pred, &s.x_hr)?,
        fdl: losses::fdl_value(&s.x_hr, pred, rng::derive_seed(&[cfg.seed, s.sample_seed]), &w)?,
        artifact_ratio: spectral::grid_artifact_energy(pred, cfg.generator.artifact_period())?.ratio,
    })
}

fn summarize(rows: Vec<EvalRow>) -> EvalReport {
    let n = rows.len() as f64;
    let mut mean = EvalRow::default();
    for r in &rows {
        mean.psnr += r.psnr / n;
        mean.ssim += r.ssim / n;
        mean.perceptual += r.perceptual / n;
        mean.fdl += r.fdl / n;
        mean.artifact_ratio += r.artifact_ratio / n;
    }
    EvalReport { rows, mean }
}

/// Inference on every sample, scored against its HR image. Samples are
/// processed in parallel; aggregation runs in index order.
pub fn evaluate(state: &TrainState, cfg: &TrainConfig, dataset: &[PairedSample]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let rows = dataset
        .par_iter()
        .map(|s| {
            let pred = restore_image(&state.generator, &s.x_lr, s.x_hr.height(), s.x_hr.width(), cfg.t1)?;
            score(&pred, s, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(rows))
}

/// Scores of the zero-generator baseline, `ẑ0 = z_{t1}`: the bilinearly
/// upsampled LR input.
pub fn evaluate_baseline(cfg: &TrainConfig, dataset: &[PairedSample]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let rows = dataset
        .par_iter()
        .map(|s| score(&upsample_to(&s.x_lr, s.x_hr.height(), s.x_hr.width()), s, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(rows))
}

/// LR (upsampled) | prediction | HR, side by side.
pub fn triptych(state: &TrainState, cfg: &TrainConfig, s: &PairedSample) -> Result<Image> {
    let (h, w) = (s.x_hr.height(), s.x_hr.width());
    let pred = restore_image(&state.generator, &s.x_lr, h, w, cfg.t1)?;
    Image::hstack(&[&upsample_to(&s.x_lr, h, w), &pred, &s.x_hr])
}
