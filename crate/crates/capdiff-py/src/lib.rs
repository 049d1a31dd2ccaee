//! Python bindings for the caption-diffusion engine.
//!
//! Exposes the tokenizer, noise schedules, the trained model (load +
//! sample), the synthetic scene generator, and the text metrics. Training
//! is wrapped as one function that mirrors the CLI's `train` subcommand,
//! so a checkpoint produced here is interchangeable with one from the
//! command line.
//!
//! Build with `cargo build -p capdiff-py`; the resulting cdylib imports as
//! `capdiff_py` once renamed to `capdiff_py.so` (see `python/smoke_test.py`).

use std::path::PathBuf;
use std::str::FromStr;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use capdiff::data::{gen_synthetic as core_gen_synthetic, load_dataset, Dataset, FeatureFile};
use capdiff::metrics;
use capdiff::model::{CaptionDenoiser, ModelConfig};
use capdiff::rng::{stream, STREAM_INIT};
use capdiff::sampler::{load_samples_jsonl, sample_batch, SampleConfig};
use capdiff::schedule::{NoiseSchedule as CoreSchedule, ScheduleKind};
use capdiff::tokenizer::Vocab as CoreVocab;
use capdiff::trainer::{build_examples, train as core_train, TrainConfig};
use capdiff::{checkpoint, cli};

fn py_err(e: capdiff::Error) -> PyErr {
    match e {
        capdiff::Error::Config(_) | capdiff::Error::Data(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Subword vocabulary with the [PAD]/[END]/[UNK] protocol.
#[pyclass(name = "Vocab")]
struct PyVocab {
    inner: CoreVocab,
}

#[pymethods]
impl PyVocab {
    /// Learn merges and the word table from raw caption strings.
    #[staticmethod]
    #[pyo3(signature = (corpus, vocab_size=200, min_freq=10))]
    fn train(corpus: Vec<String>, vocab_size: usize, min_freq: usize) -> PyResult<Self> {
        Ok(PyVocab { inner: CoreVocab::train(&corpus, vocab_size, min_freq).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVocab { inner: CoreVocab::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    /// Encode to a fixed-length id canvas; the mask is false exactly at
    /// [UNK] positions.
    fn encode(&self, text: &str, seq_len: usize) -> PyResult<(Vec<usize>, Vec<bool>)> {
        let seq = self.inner.encode(text, seq_len).map_err(py_err)?;
        Ok((seq.ids, seq.loss_mask))
    }

    fn decode(&self, ids: Vec<usize>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(py_err)
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    fn token(&self, id: usize) -> Option<String> {
        self.inner.token(id).map(|s| s.to_string())
    }
}

/// Forward-process noise schedule (`linear`, `cosine`, or `sqrt`).
#[pyclass(name = "NoiseSchedule")]
struct PySchedule {
    inner: CoreSchedule,
}

impl PySchedule {
    fn check_t(&self, t: usize) -> PyResult<()> {
        if t == 0 || t > self.inner.t_max() {
            return Err(PyValueError::new_err(format!(
                "t = {t} outside 1..={}",
                self.inner.t_max()
            )));
        }
        Ok(())
    }
}

#[pymethods]
impl PySchedule {
    #[new]
    fn new(kind: &str, t_max: usize) -> PyResult<Self> {
        let kind = ScheduleKind::from_str(kind).map_err(py_err)?;
        Ok(PySchedule { inner: CoreSchedule::build(kind, t_max).map_err(py_err)? })
    }

    #[getter]
    fn t_max(&self) -> usize {
        self.inner.t_max()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.check_t(t)?;
        Ok(self.inner.beta(t))
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.check_t(t)?;
        Ok(self.inner.alpha_bar(t))
    }

    fn snr(&self, t: usize) -> PyResult<f64> {
        self.check_t(t)?;
        Ok(self.inner.snr(t))
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    fn q_sample_coeffs(&self, t: usize) -> PyResult<(f64, f64)> {
        self.check_t(t)?;
        Ok(self.inner.q_sample_coeffs(t))
    }

    /// Posterior mean coefficients and variance `(c0, ct, var)`.
    fn posterior_coeffs(&self, t: usize) -> PyResult<(f64, f64, f64)> {
        self.check_t(t)?;
        Ok(self.inner.posterior_coeffs(t))
    }

    /// All rows as `t,beta,alpha_bar,snr` CSV (no header).
    fn csv(&self) -> String {
        self.inner.csv_rows()
    }
}

/// A trained denoiser checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    inner: CaptionDenoiser,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: checkpoint::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(self.inner.config())
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Reverse-diffusion sampling for `(id, feature_vector)` conditions.
    /// Returns one dict per generated caption.
    #[pyo3(signature = (vocab, schedule, conds, seed=7, num_samples=1, clamp=true, dedup=true))]
    #[allow(clippy::too_many_arguments)]
    fn sample<'py>(
        &self,
        py: Python<'py>,
        vocab: PyRef<'_, PyVocab>,
        schedule: PyRef<'_, PySchedule>,
        conds: Vec<(String, Vec<f32>)>,
        seed: u64,
        num_samples: usize,
        clamp: bool,
        dedup: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = SampleConfig {
            seed,
            num_samples,
            clamp,
            trace_every: 1_000_000,
            dedup_postprocess: dedup,
        };
        let results = sample_batch(&self.inner, &schedule.inner, &vocab.inner, &conds, &cfg)
            .map_err(py_err)?;
        results
            .into_iter()
            .map(|(rec, _)| {
                let d = PyDict::new(py);
                d.set_item("id", rec.id)?;
                d.set_item("sample", rec.sample)?;
                d.set_item("caption", rec.caption)?;
                d.set_item("raw_caption", rec.raw_caption)?;
                Ok(d)
            })
            .collect()
    }
}

/// Write a synthetic scene set (`data.jsonl`, `features.bin`,
/// `grammar-key.json`) into `out_dir`; returns `(scenes, cond_dim)`.
#[pyfunction]
#[pyo3(signature = (out_dir, scenes=256, seed=7))]
fn gen_synthetic(out_dir: PathBuf, scenes: usize, seed: u64) -> PyResult<(usize, usize)> {
    let (dataset, features, key) = core_gen_synthetic(scenes, seed).map_err(py_err)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| py_err(e.into()))?;
    dataset.save_jsonl(&out_dir.join("data.jsonl")).map_err(py_err)?;
    features.write(&out_dir.join("features.bin")).map_err(py_err)?;
    key.save(&out_dir.join("grammar-key.json")).map_err(py_err)?;
    Ok((dataset.records.len(), features.dim()))
}

/// Read a feature file back as `(dim, rows)`.
#[pyfunction]
fn read_features(path: PathBuf) -> PyResult<(usize, Vec<Vec<f32>>)> {
    let f = FeatureFile::read(&path).map_err(py_err)?;
    let rows = (0..f.count())
        .map(|i| f.row(i).map(|r| r.to_vec()))
        .collect::<capdiff::Result<Vec<_>>>()
        .map_err(py_err)?;
    Ok((f.dim(), rows))
}

/// Train a desk-scale model on a JSONL dataset + feature file; writes
/// `model-final.dckp`, `vocab.json`, and a resolved `config.json` into
/// `out_dir` (all interchangeable with the CLI) and returns a summary dict.
#[pyfunction]
#[pyo3(signature = (data, features, out_dir, epochs=8, lr=2e-3, batch_size=16, seed=7,
                    schedule="cosine", schedule_steps=100, jitter_sigma=0.1,
                    vocab_size=200, min_freq=10))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    data: PathBuf,
    features: PathBuf,
    out_dir: PathBuf,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    schedule: &str,
    schedule_steps: usize,
    jitter_sigma: f32,
    vocab_size: usize,
    min_freq: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let (dataset, feats) = load_dataset(&data, &features).map_err(py_err)?;
    if dataset.records.is_empty() {
        return Err(PyValueError::new_err("training needs a non-empty dataset"));
    }
    let corpus: Vec<String> =
        dataset.records.iter().flat_map(|r| r.captions.iter().cloned()).collect();
    let vocab = CoreVocab::train(&corpus, vocab_size, min_freq).map_err(py_err)?;
    let cfg = ModelConfig::desk(vocab.size(), feats.dim());
    let seq_len = cfg.seq_len;
    let mut model = CaptionDenoiser::init(cfg.clone(), &mut stream(seed, STREAM_INIT)).map_err(py_err)?;
    let examples = build_examples(&dataset, &feats, &vocab, seq_len).map_err(py_err)?;
    let tcfg = TrainConfig {
        lr,
        epochs,
        batch_size,
        grad_clip_norm: 1.0,
        seed,
        checkpoint_every: 1_000_000,
        schedule: ScheduleKind::from_str(schedule).map_err(py_err)?,
        schedule_steps,
        jitter_sigma,
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| py_err(e.into()))?;
    let outcome = core_train(&mut model, &examples, &tcfg, &out_dir).map_err(py_err)?;
    vocab.save(&out_dir.join("vocab.json")).map_err(py_err)?;
    let run_cfg = cli::RunConfig {
        model: cfg,
        train: tcfg,
        sample: SampleConfig::default(),
        tokenizer: cli::TokenizerConfig { vocab_size, min_freq },
    };
    run_cfg.save(&out_dir.join("config.json")).map_err(py_err)?;

    let d = PyDict::new(py);
    d.set_item("steps", outcome.steps)?;
    d.set_item("final_l_total", outcome.log.last().map(|r| r.l_total))?;
    d.set_item("checkpoint", outcome.final_checkpoint.display().to_string())?;
    d.set_item("vocab_size", vocab.size())?;
    Ok(d)
}

/// Corpus BLEU@4 (percent) for candidates against per-candidate references.
#[pyfunction]
fn bleu4(cands: Vec<String>, refs: Vec<Vec<String>>) -> PyResult<f64> {
    metrics::bleu4(&cands, &refs).map_err(py_err)
}

/// Mean best-reference ROUGE-L F (percent).
#[pyfunction]
fn rouge_l(cands: Vec<String>, refs: Vec<Vec<String>>) -> PyResult<f64> {
    metrics::rouge_l(&cands, &refs).map_err(py_err)
}

/// `(distinct-1, distinct-2)` pooled per condition, averaged (percent).
#[pyfunction]
fn inter_distinct(sample_sets: Vec<Vec<String>>) -> PyResult<(f64, f64)> {
    metrics::inter_distinct(&sample_sets).map_err(py_err)
}

/// Self-BLEU-1..4 (percent) over sample sets; 100 means identical samples.
#[pyfunction]
fn self_bleu(sample_sets: Vec<Vec<String>>) -> PyResult<Vec<f64>> {
    Ok(metrics::self_bleu(&sample_sets).map_err(py_err)?.to_vec())
}

/// Evaluate a samples JSONL against a reference JSONL; returns the report
/// as a JSON string.
#[pyfunction]
fn evaluate_files(pred: PathBuf, refs: PathBuf) -> PyResult<String> {
    let preds = load_samples_jsonl(&pred).map_err(py_err)?;
    let dataset = Dataset::load_jsonl(&refs).map_err(py_err)?;
    let report = metrics::evaluate(&preds, &dataset).map_err(py_err)?;
    serde_json::to_string_pretty(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn capdiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocab>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(inter_distinct, m)?)?;
    m.add_function(wrap_pyfunction!(self_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_files, m)?)?;
    Ok(())
}
