//! Adam training loop over the masked diffusion objective.
//!
//! Each step draws a batch from the shuffled (caption, feature-row) pairs,
//! builds the batch loss on a fresh tape, backpropagates, clips the global
//! gradient norm, and applies a bias-corrected Adam update under a learning
//! rate that decays linearly to zero. Checkpoints are written on a fixed
//! step cadence and at the end; every step appends one row to a CSV loss
//! log. The whole run is a pure function of the seed.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint;
use crate::data::{Dataset, FeatureFile};
use crate::loss::{batch_training_loss, draw_loss_noise, LossDraws, LossExample};
use crate::model::CaptionDenoiser;
use crate::rng::{stream, STREAM_DATA, STREAM_NOISE};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tokenizer::Vocab;
use crate::{Error, Result};

/// Adam moment decay rates and denominator guard.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Write `model-step{N}.dckp` whenever the step count hits a multiple.
    pub checkpoint_every: usize,
    pub schedule: ScheduleKind,
    /// Diffusion depth T used for both training draws and sampling.
    pub schedule_steps: usize,
    /// Spread of the Gaussian jitter around each token embedding; 0 trains
    /// on the clean embeddings.
    pub jitter_sigma: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 50,
            batch_size: 16,
            grad_clip_norm: 1.0,
            seed: 7,
            checkpoint_every: 500,
            schedule: ScheduleKind::Cosine,
            schedule_steps: 200,
            jitter_sigma: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
            ("schedule_steps", self.schedule_steps),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::Config("jitter_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate at 0-based `step` of `total`: linear decay from `base` to 0.
pub fn lr_at(base: f64, step: usize, total: usize) -> f64 {
    base * (1.0 - step as f64 / total as f64)
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        if params[i].len() != grads[i].len() {
            return Err(Error::Shape(format!(
                "adam: param {} has {} values but grad has {}",
                i,
                params[i].len(),
                grads[i].len()
            )));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params[i].data_mut();
        for (j, &gf) in grads[i].data().iter().enumerate() {
            let g = gf as f64;
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
            p[j] = (p[j] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Flatten a dataset into per-caption training examples: every caption of
/// every record, paired with the record's feature row, encoded to the
/// model's sequence length.
pub fn build_examples(
    dataset: &Dataset,
    features: &FeatureFile,
    vocab: &Vocab,
    seq_len: usize,
) -> Result<Vec<LossExample>> {
    dataset.validate_against(features)?;
    let mut out = Vec::new();
    for rec in &dataset.records {
        let cond = features.row(rec.feature_index)?.to_vec();
        for cap in &rec.captions {
            let seq = vocab.encode(cap, seq_len)?;
            out.push(LossExample { ids: seq.ids, mask: seq.loss_mask, cond: cond.clone() });
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no training captions in dataset".into()));
    }
    Ok(out)
}

/// One CSV row of the loss log; values are batch means.
#[derive(Debug, Clone, Copy)]
pub struct LogRow {
    pub step: usize,
    pub t: f64,
    pub l_simple: f64,
    pub l_mse: f64,
    pub l_word: f64,
    pub l_total: f64,
    pub masked_fraction: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub log: Vec<LogRow>,
    /// Examples whose every position was masked out (contributed zero loss).
    pub all_masked_examples: usize,
    pub final_checkpoint: PathBuf,
}

/// Run the full training loop, mutating `model` in place.
pub fn train(
    model: &mut CaptionDenoiser,
    examples: &[LossExample],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("training needs a non-empty dataset".into()));
    }
    let schedule = NoiseSchedule::build(cfg.schedule, cfg.schedule_steps)?;
    let (l, d) = (model.config().seq_len, model.config().embed_dim);
    std::fs::create_dir_all(out_dir)?;

    let n = examples.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;

    let mut data_rng = stream(cfg.seed, STREAM_DATA);
    let mut noise_rng = stream(cfg.seed, STREAM_NOISE);
    let mut adam = AdamState::new(&model.params().map(|(_, p)| p.clone()).collect::<Vec<_>>());

    let log_path = out_dir.join("loss_log.csv");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log_file, "step,t,l_simple,l_mse,l_word,l_total,masked_fraction")?;

    let mut log = Vec::with_capacity(total_steps);
    let mut all_masked_examples = 0usize;
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rand::Rng::random_range(&mut data_rng, 0..=i);
            order.swap(i, j);
        }
        for batch_start in (0..n).step_by(cfg.batch_size) {
            let batch_index = batch_start / cfg.batch_size;
            let idx = &order[batch_start..(batch_start + cfg.batch_size).min(n)];
            let batch: Vec<LossExample> = idx.iter().map(|&i| examples[i].clone()).collect();
            let draws: Vec<LossDraws> = batch
                .iter()
                .map(|_| draw_loss_noise(&mut noise_rng, cfg.schedule_steps, l, d))
                .collect();

            let mut tape = Tape::new();
            let bp = model.bind(&mut tape);
            let (loss, parts) = batch_training_loss(
                &mut tape,
                model,
                &bp,
                &schedule,
                cfg.jitter_sigma,
                &batch,
                &draws,
            )?;
            let loss_value = tape.value(loss).item()?;
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {} (batch {} of epoch {})",
                    step + 1,
                    batch_index,
                    _epoch
                )));
            }
            let masked_here = parts.iter().filter(|p| p.all_masked).count();
            if masked_here > 0 {
                all_masked_examples += masked_here;
                eprintln!(
                    "warning: {} example(s) in step {} were fully masked and contributed zero loss",
                    masked_here,
                    step + 1
                );
            }

            let grad_map = tape.backward(loss)?;
            let mut grads: Vec<Tensor> = (0..bp.vars().len())
                .map(|i| match grad_map.get(bp.var(i)) {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(model.params().nth(i).expect("param").1.shape().to_vec()),
                })
                .collect();
            clip_global_norm(&mut grads, cfg.grad_clip_norm);

            let lr = lr_at(cfg.lr, step, total_steps);
            {
                let params = model.params_mut();
                adam_step(params, &grads, &mut adam, lr)?;
            }
            step += 1;

            let b = parts.len() as f64;
            let row = LogRow {
                step,
                t: parts.iter().map(|p| p.t as f64).sum::<f64>() / b,
                l_simple: parts.iter().map(|p| p.l_simple as f64).sum::<f64>() / b,
                l_mse: parts.iter().map(|p| p.l_mse as f64).sum::<f64>() / b,
                l_word: parts.iter().map(|p| p.l_word as f64).sum::<f64>() / b,
                l_total: loss_value as f64,
                masked_fraction: parts.iter().map(|p| p.masked_fraction as f64).sum::<f64>() / b,
            };
            writeln!(
                log_file,
                "{},{},{},{},{},{},{}",
                row.step, row.t, row.l_simple, row.l_mse, row.l_word, row.l_total,
                row.masked_fraction
            )?;
            log.push(row);

            if step % cfg.checkpoint_every == 0 {
                checkpoint::save(model, &out_dir.join(format!("model-step{step}.dckp")))?;
            }
        }
    }
    log_file.flush()?;

    let final_checkpoint = out_dir.join("model-final.dckp");
    checkpoint::save(model, &final_checkpoint)?;
    Ok(TrainOutcome { steps: step, log, all_masked_examples, final_checkpoint })
}
