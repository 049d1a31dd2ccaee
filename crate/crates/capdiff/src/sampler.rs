//! Reverse-diffusion caption sampler.
//!
//! Starting from pure noise, each step runs the denoiser on a fresh tape,
//! optionally snaps the estimate to the nearest token embedding, and draws
//! the next latent from the diffusion posterior. The final latent is read
//! out through the decoder head. Every (condition, sample) pair owns its own
//! random substream, so results are independent of scheduling order and
//! reproducible from the seed alone.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::model::CaptionDenoiser;
use crate::rng::{randn_vec, sampler_stream};
use crate::schedule::NoiseSchedule;
use crate::tokenizer::Vocab;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub seed: u64,
    /// Samples drawn per condition.
    pub num_samples: usize,
    /// Snap each step's estimate to the nearest token embedding.
    pub clamp: bool,
    /// Trace cadence: record the decoded estimate at every timestep
    /// divisible by this, plus always at t = 1.
    pub trace_every: usize,
    /// Collapse adjacent repeated words in the final caption.
    pub dedup_postprocess: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            seed: 7,
            num_samples: 1,
            clamp: true,
            trace_every: 25,
            dedup_postprocess: true,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be positive".into()));
        }
        if self.trace_every == 0 {
            return Err(Error::Config("trace_every must be positive".into()));
        }
        Ok(())
    }
}

/// One generated caption.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub sample: usize,
    pub caption: String,
    pub raw_caption: String,
}

/// Decoded estimate at one traced timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLine {
    pub t: usize,
    pub text: String,
}

/// Denoising trajectory of one sample, highest timestep first.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub lines: Vec<TraceLine>,
    /// FNV-1a hash of the final latent's little-endian bytes.
    pub x0_hash: u64,
}

/// Collapse adjacent repeated words: "stop stop stop sign" -> "stop sign".
pub fn dedup_repeats(text: &str) -> String {
    let mut out: Vec<&str> = Vec::new();
    for w in text.split_whitespace() {
        if out.last() != Some(&w) {
            out.push(w);
        }
    }
    out.join(" ")
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tensor_hash(t: &Tensor) -> u64 {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Greedy readout: per-position argmax of the decoder head, ties to the
/// lower id.
fn readout_ids(model: &CaptionDenoiser, x: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bp = model.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let lg = model.lm_logits(&mut tape, &bp, xv)?;
    let logits = tape.value(lg);
    let (rows, cols) = logits.dims2()?;
    let data = logits.data();
    let mut ids = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        ids.push(best);
    }
    Ok(ids)
}

/// Draw one caption for one condition, consuming `rng` for the initial
/// latent and every posterior draw.
pub fn sample_one(
    model: &CaptionDenoiser,
    schedule: &NoiseSchedule,
    vocab: &Vocab,
    cond: &[f32],
    cfg: &SampleConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(String, String, SampleTrace)> {
    let mcfg = model.config();
    let (l, d) = (mcfg.seq_len, mcfg.embed_dim);
    let mut x = Tensor::new(vec![l, d], randn_vec(rng, l * d))?;
    let mut lines = Vec::new();

    for t in (1..=schedule.t_max()).rev() {
        let mut tape = Tape::new();
        let bp = model.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let hat = model.fuse_and_denoise(&mut tape, &bp, xv, t, cond)?;
        let mut x0_hat = tape.value(hat).clone();
        if cfg.clamp {
            let snapped = model.knn_round(&x0_hat)?;
            x0_hat = model.embedding_rows(&snapped)?;
        }
        if t % cfg.trace_every == 0 || t == 1 {
            let ids = readout_ids(model, &x0_hat)?;
            lines.push(TraceLine { t, text: vocab.decode(&ids)? });
        }

        let (c0, ct, var) = schedule.posterior_coeffs(t);
        let z: Vec<f32> = if t > 1 { randn_vec(rng, l * d) } else { vec![0.0; l * d] };
        let sd = var.sqrt();
        let mut next = Vec::with_capacity(l * d);
        for i in 0..l * d {
            let mean = c0 * x0_hat.data()[i] as f64 + ct * x.data()[i] as f64;
            next.push((mean + sd * z[i] as f64) as f32);
        }
        x = Tensor::new(vec![l, d], next)?;
    }

    let ids = readout_ids(model, &x)?;
    let raw = vocab.decode(&ids)?;
    let caption = if cfg.dedup_postprocess { dedup_repeats(&raw) } else { raw.clone() };
    let trace = SampleTrace { lines, x0_hash: tensor_hash(&x) };
    Ok((caption, raw, trace))
}

/// Sample `cfg.num_samples` captions for every condition, in parallel over
/// (condition, sample) pairs with deterministic, order-independent output.
pub fn sample_batch(
    model: &CaptionDenoiser,
    schedule: &NoiseSchedule,
    vocab: &Vocab,
    conds: &[(String, Vec<f32>)],
    cfg: &SampleConfig,
) -> Result<Vec<(SampleRecord, SampleTrace)>> {
    cfg.validate()?;
    if conds.is_empty() {
        return Err(Error::Config("sampling needs at least one condition".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..conds.len())
        .flat_map(|ci| (0..cfg.num_samples).map(move |k| (ci, k)))
        .collect();
    pairs
        .par_iter()
        .map(|&(ci, k)| {
            let (id, cond) = &conds[ci];
            let mut rng = sampler_stream(cfg.seed, ci as u64, k as u64);
            let (caption, raw_caption, trace) =
                sample_one(model, schedule, vocab, cond, cfg, &mut rng)?;
            Ok((
                SampleRecord { id: id.clone(), sample: k, caption, raw_caption },
                trace,
            ))
        })
        .collect()
}

/// One JSON object per line, in (condition, sample) order.
pub fn write_samples_jsonl(records: &[SampleRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_samples_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("bad sample record on line {}: {e}", lineno + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// One `<id>-<sample>.trace` file per record: a `t=<t>: <text>` line per
/// traced step, then the final-latent hash.
pub fn write_traces(results: &[(SampleRecord, SampleTrace)], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (rec, trace) in results {
        let mut body = String::new();
        for line in &trace.lines {
            body.push_str(&format!("t={}: {}\n", line.t, line.text));
        }
        body.push_str(&format!("x0_hash: {:016x}\n", trace.x0_hash));
        std::fs::write(dir.join(format!("{}-{}.trace", rec.id, rec.sample)), body)?;
    }
    Ok(())
}
