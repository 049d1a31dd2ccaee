//! Command-line entry point.
//!
//! Five subcommands cover the full pipeline: `gen-synth` writes a synthetic
//! scene-caption dataset, `train` fits a denoiser, `sample` generates
//! captions from a checkpoint, `eval` scores them, and `inspect-schedule`
//! dumps a noise schedule as CSV. Exit codes: 0 on success, 1 for
//! validation problems (bad flags, bad config, bad data), 2 for runtime
//! failures (shape/numeric errors, I/O). Every run that takes a config
//! writes the fully resolved version next to its outputs, so any result can
//! be reproduced from the files it sits beside.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, gen_synthetic, Dataset};
use crate::metrics::evaluate;
use crate::model::{CaptionDenoiser, ModelConfig};
use crate::rng::{stream, STREAM_INIT};
use crate::sampler::{
    load_samples_jsonl, sample_batch, write_samples_jsonl, write_traces, SampleConfig,
    SampleRecord,
};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::tokenizer::Vocab;
use crate::trainer::{build_examples, train, TrainConfig};
use crate::{checkpoint, Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Total vocabulary budget, specials included.
    pub vocab_size: usize,
    /// Minimum final-encoding frequency for a piece to stay in the
    /// vocabulary; rarer pieces fall back to the unknown token.
    pub min_freq: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { vocab_size: 200, min_freq: 10 }
    }
}

/// Everything a run needs, as one JSON file. `model.vocab_size` and
/// `model.cond_dim` may be 0 to mean "take it from the data".
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub tokenizer: TokenizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(0, 0),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            tokenizer: TokenizerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        require_exists(path, "config")?;
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config '{}': {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} '{}' does not exist", path.display())))
    }
}

/// Fill data-derived dimensions from the loaded dataset and cross-check
/// any that were stated explicitly.
fn resolve_model(file: &ModelConfig, vocab_size: usize, cond_dim: usize) -> Result<ModelConfig> {
    let mut m = file.clone();
    if m.vocab_size == 0 {
        m.vocab_size = vocab_size;
    } else if m.vocab_size != vocab_size {
        return Err(Error::Config(format!(
            "config says vocab_size {} but the trained vocabulary has {} tokens",
            m.vocab_size, vocab_size
        )));
    }
    if m.cond_dim == 0 {
        m.cond_dim = cond_dim;
    } else if m.cond_dim != cond_dim {
        return Err(Error::Config(format!(
            "config says cond_dim {} but the feature file has rows of {}",
            m.cond_dim, cond_dim
        )));
    }
    m.validate()?;
    Ok(m)
}

fn parse_kind(s: &str) -> std::result::Result<ScheduleKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "capdiff",
    version,
    about = "Conditional diffusion caption generator: train, sample, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train a denoiser on a caption dataset
    Train {
        /// Caption records, one JSON object per line
        #[arg(long)]
        data: PathBuf,
        /// Conditioning feature file
        #[arg(long)]
        features: PathBuf,
        /// Run config JSON
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints, logs, vocab, resolved config
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate captions from a trained checkpoint
    Sample {
        /// Model checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// Conditioning feature file
        #[arg(long)]
        features: PathBuf,
        /// Caption records naming the conditions to sample
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated record ids, or "all"
        #[arg(long, default_value = "all")]
        ids: String,
        /// Samples per condition (default: from config)
        #[arg(long)]
        n: Option<usize>,
        /// Seed override (default: from config)
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for per-sample denoising traces
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Output JSONL (default: samples.jsonl beside the checkpoint)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Vocabulary (default: vocab.json beside the checkpoint)
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Run config (default: config.json beside the checkpoint)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score generated captions against their references
    Eval {
        /// Generated captions JSONL
        #[arg(long)]
        pred: PathBuf,
        /// Reference caption records JSONL
        #[arg(long)]
        refs: PathBuf,
        /// Where to write the report JSON
        #[arg(long)]
        report: PathBuf,
    },
    /// Dump a noise schedule as t,beta,alpha_bar,snr CSV rows
    InspectSchedule {
        /// linear, cosine, or sqrt
        #[arg(long, value_parser = parse_kind)]
        kind: ScheduleKind,
        /// Number of diffusion steps
        #[arg(long = "T")]
        t_max: usize,
        /// Output file (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic scene-caption dataset
    GenSynth {
        /// Number of distinct scenes
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { data, features, config, out } => cmd_train(&data, &features, &config, &out),
        Cmd::Sample {
            ckpt,
            features,
            data,
            ids,
            n,
            seed,
            trace,
            out,
            vocab,
            config,
        } => cmd_sample(&ckpt, &features, &data, &ids, n, seed, trace, out, vocab, config),
        Cmd::Eval { pred, refs, report } => cmd_eval(&pred, &refs, &report),
        Cmd::InspectSchedule { kind, t_max, out } => cmd_inspect(kind, t_max, out),
        Cmd::GenSynth { scenes, seed, out } => cmd_gen_synth(scenes, seed, &out),
    }
}

fn cmd_train(data: &Path, features: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    cfg.train.validate()?;
    require_exists(data, "dataset")?;
    require_exists(features, "feature file")?;
    let (dataset, feats) = data::load_dataset(data, features)?;
    if dataset.records.is_empty() {
        return Err(Error::Data("training needs a non-empty dataset".into()));
    }

    let corpus: Vec<String> =
        dataset.records.iter().flat_map(|r| r.captions.iter().cloned()).collect();
    let vocab = Vocab::train(&corpus, cfg.tokenizer.vocab_size, cfg.tokenizer.min_freq)?;
    let model_cfg = resolve_model(&cfg.model, vocab.size(), feats.dim())?;
    let mut model =
        CaptionDenoiser::init(model_cfg.clone(), &mut stream(cfg.train.seed, STREAM_INIT))?;
    let examples = build_examples(&dataset, &feats, &vocab, model_cfg.seq_len)?;

    let outcome = train(&mut model, &examples, &cfg.train, out)?;

    let resolved = RunConfig { model: model_cfg, ..cfg };
    resolved.save(&out.join("config.json"))?;
    vocab.save(&out.join("vocab.json"))?;

    let last = outcome.log.last().expect("at least one step");
    println!(
        "trained {} steps on {} captions; final l_total {:.6}",
        outcome.steps,
        examples.len(),
        last.l_total
    );
    println!("wrote {}", outcome.final_checkpoint.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    ckpt: &Path,
    features: &Path,
    data: &Path,
    ids: &str,
    n: Option<usize>,
    seed: Option<u64>,
    trace: Option<PathBuf>,
    out: Option<PathBuf>,
    vocab: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<()> {
    let sibling = |name: &str| ckpt.parent().unwrap_or(Path::new(".")).join(name);
    let config_path = config.unwrap_or_else(|| sibling("config.json"));
    let vocab_path = vocab.unwrap_or_else(|| sibling("vocab.json"));
    let out_path = out.unwrap_or_else(|| sibling("samples.jsonl"));

    require_exists(ckpt, "checkpoint")?;
    require_exists(features, "feature file")?;
    require_exists(data, "dataset")?;
    require_exists(&vocab_path, "vocabulary")?;
    let run_cfg = RunConfig::load(&config_path)?;

    let model = checkpoint::load(ckpt)?;
    let vocab = Vocab::load(&vocab_path)?;
    if vocab.size() != model.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the checkpoint was trained with {}",
            vocab.size(),
            model.config().vocab_size
        )));
    }
    let (dataset, feats) = data::load_dataset(data, features)?;
    if feats.dim() != model.config().cond_dim {
        return Err(Error::Config(format!(
            "feature rows have {} values but the model conditions on {}",
            feats.dim(),
            model.config().cond_dim
        )));
    }

    let mut sample_cfg = run_cfg.sample.clone();
    if let Some(n) = n {
        sample_cfg.num_samples = n;
    }
    if let Some(s) = seed {
        sample_cfg.seed = s;
    }

    let conds: Vec<(String, Vec<f32>)> = if ids == "all" {
        dataset
            .records
            .iter()
            .map(|r| Ok((r.id.clone(), feats.row(r.feature_index)?.to_vec())))
            .collect::<Result<_>>()?
    } else {
        let mut out = Vec::new();
        for want in ids.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let rec = dataset
                .records
                .iter()
                .find(|r| r.id == want)
                .ok_or_else(|| Error::Config(format!("id '{want}' is not in the dataset")))?;
            out.push((rec.id.clone(), feats.row(rec.feature_index)?.to_vec()));
        }
        out
    };

    let schedule = NoiseSchedule::build(run_cfg.train.schedule, run_cfg.train.schedule_steps)?;
    let results = sample_batch(&model, &schedule, &vocab, &conds, &sample_cfg)?;

    let records: Vec<SampleRecord> = results.iter().map(|(r, _)| r.clone()).collect();
    write_samples_jsonl(&records, &out_path)?;
    if let Some(trace_dir) = &trace {
        write_traces(&results, trace_dir)?;
    }
    let resolved = RunConfig {
        model: model.config().clone(),
        sample: sample_cfg,
        ..run_cfg
    };
    resolved.save(&out_path.with_extension("config.json"))?;

    println!(
        "wrote {} samples for {} conditions to {}",
        records.len(),
        conds.len(),
        out_path.display()
    );
    Ok(())
}

fn cmd_eval(pred: &Path, refs: &Path, report: &Path) -> Result<()> {
    require_exists(pred, "predictions")?;
    require_exists(refs, "references")?;
    let preds = load_samples_jsonl(pred)?;
    let dataset = Dataset::load_jsonl(refs)?;
    let result = evaluate(&preds, &dataset)?;
    result.save(report)?;
    println!("{}", serde_json::to_string_pretty(&result).expect("report serializes"));
    Ok(())
}

fn cmd_inspect(kind: ScheduleKind, t_max: usize, out: Option<PathBuf>) -> Result<()> {
    let schedule = NoiseSchedule::build(kind, t_max)?;
    let csv = schedule.csv_rows();
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_gen_synth(scenes: usize, seed: u64, out: &Path) -> Result<()> {
    let (dataset, feats, key) = gen_synthetic(scenes, seed)?;
    std::fs::create_dir_all(out)?;
    dataset.save_jsonl(&out.join("data.jsonl"))?;
    feats.write(&out.join("features.bin"))?;
    key.save(&out.join("grammar-key.json"))?;
    println!(
        "wrote {} scenes ({} captions) to {}",
        dataset.records.len(),
        dataset.records.iter().map(|r| r.captions.len()).sum::<usize>(),
        out.display()
    );
    Ok(())
}
