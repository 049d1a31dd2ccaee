//! Shared helpers for the integration suites.
//!
//! The centerpiece is a pure-f64 twin of the denoiser forward pass and the
//! training objective, written against the same formulas but with no tape
//! and no f32 storage. Finite differences on the twin have no
//! single-precision noise floor, which makes strict relative gradient
//! checks possible.

use capdiff::loss::LossDraws;
use capdiff::model::{FuseMode, ModelConfig, TimeMode};
use capdiff::schedule::NoiseSchedule;

/// One caption in the twin's batch.
pub struct TwinExample {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub cond: Vec<f32>,
    pub draws: LossDraws,
}

/// Parameters flattened to f64, in canonical order, addressed by name.
struct TwinParams<'a> {
    values: &'a [Vec<f64>],
    names: Vec<String>,
}

impl<'a> TwinParams<'a> {
    fn new(cfg: &ModelConfig, values: &'a [Vec<f64>]) -> Self {
        let names = cfg.param_shapes().into_iter().map(|(n, _)| n).collect();
        TwinParams { values, names }
    }

    fn get(&self, name: &str) -> &[f64] {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.values[idx]
    }
}

fn matmul(a: &[f64], (m, k): (usize, usize), b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}

/// x [rows, k] * w [k, n] + b [n], bias broadcast over rows.
fn linear(x: &[f64], rows: usize, k: usize, w: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = matmul(x, (rows, k), w, n);
    for i in 0..rows {
        for j in 0..n {
            out[i * n + j] += b[j];
        }
    }
    out
}

fn layer_norm(x: &[f64], rows: usize, cols: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    const LN_EPS: f64 = 1e-5;
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..cols {
            out[i * cols + j] = (row[j] - mean) * inv_std * g[j] + b[j];
        }
    }
    out
}

fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        let row = &mut x[i * cols..(i + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
}

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    const C: f64 = 0.044_715;
    0.5 * x * (1.0 + (K * (x + C * x * x * x)).tanh())
}

/// Interleaved sinusoidal timestep features, matching the model's layout.
fn timestep_embedding(t: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; h];
    for k in 0..h / 2 {
        let omega = 10000f64.powf(-2.0 * k as f64 / h as f64);
        let arg = t as f64 * omega;
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
    out
}

/// The denoiser forward pass in f64: condition/timestep fusion, pre-LN
/// transformer blocks, projection back to embedding width.
fn forward(cfg: &ModelConfig, p: &TwinParams, x_t: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
    let (l, d, h) = (cfg.seq_len, cfg.embed_dim, cfg.hidden_dim);

    let cond_row = linear(cond, 1, cfg.cond_dim, p.get("cond_proj.w"), p.get("cond_proj.b"), h);
    let time_row = timestep_embedding(t, h);

    let mut text = linear(x_t, l, d, p.get("in_proj.w"), p.get("in_proj.b"), h);
    let pos_text = p.get("pos.text");
    for i in 0..l * h {
        text[i] += pos_text[i];
    }

    let pos_prefix = p.get("pos.prefix");
    let mut prefix: Vec<Vec<f64>> = Vec::new();
    match cfg.fuse_mode {
        FuseMode::Prefix => {
            prefix.push((0..h).map(|j| cond_row[j] + pos_prefix[j]).collect());
        }
        FuseMode::Add => {
            for i in 0..l {
                for j in 0..h {
                    text[i * h + j] += cond_row[j];
                }
            }
        }
    }
    match cfg.time_mode {
        TimeMode::Prepend => {
            prefix.push((0..h).map(|j| time_row[j] + pos_prefix[h + j]).collect());
        }
        TimeMode::Add => {
            for i in 0..l {
                for j in 0..h {
                    text[i * h + j] += time_row[j];
                }
            }
        }
    }

    let rows = prefix.len() + l;
    let mut x = Vec::with_capacity(rows * h);
    for row in &prefix {
        x.extend_from_slice(row);
    }
    x.extend_from_slice(&text);

    for layer in 0..cfg.layers {
        let name = |s: &str| format!("block{layer}.{s}");
        let a = layer_norm(&x, rows, h, p.get(&name("ln1.g")), p.get(&name("ln1.b")));
        let attn = attention(cfg, p, layer, &a, rows);
        for i in 0..rows * h {
            x[i] += attn[i];
        }
        let f = layer_norm(&x, rows, h, p.get(&name("ln2.g")), p.get(&name("ln2.b")));
        let mut f1 = linear(&f, rows, h, p.get(&name("ffn.w1")), p.get(&name("ffn.b1")), 4 * h);
        for v in f1.iter_mut() {
            *v = gelu(*v);
        }
        let f2 = linear(&f1, rows, 4 * h, p.get(&name("ffn.w2")), p.get(&name("ffn.b2")), h);
        for i in 0..rows * h {
            x[i] += f2[i];
        }
    }

    let n_prefix = prefix.len();
    let text_out = &x[n_prefix * h..(n_prefix + l) * h];
    linear(text_out, l, h, p.get("out_proj.w"), p.get("out_proj.b"), d)
}

fn attention(cfg: &ModelConfig, p: &TwinParams, layer: usize, a: &[f64], rows: usize) -> Vec<f64> {
    let h = cfg.hidden_dim;
    let name = |s: &str| format!("block{layer}.{s}");
    let q = linear(a, rows, h, p.get(&name("attn.wq")), p.get(&name("attn.bq")), h);
    let k = linear(a, rows, h, p.get(&name("attn.wk")), p.get(&name("attn.bk")), h);
    let v = linear(a, rows, h, p.get(&name("attn.wv")), p.get(&name("attn.bv")), h);

    let dh = h / cfg.heads;
    let scale = 1.0 / (dh as f32).sqrt() as f64;
    let mut merged = vec![0.0; rows * h];
    for head in 0..cfg.heads {
        let cols = head * dh..(head + 1) * dh;
        let mut scores = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                let mut s = 0.0;
                for c in cols.clone() {
                    s += q[i * h + c] * k[j * h + c];
                }
                scores[i * rows + j] = s * scale;
            }
        }
        softmax_rows(&mut scores, rows, rows);
        for i in 0..rows {
            for (cc, c) in cols.clone().enumerate() {
                let mut s = 0.0;
                for j in 0..rows {
                    s += scores[i * rows + j] * v[j * h + head * dh + cc];
                }
                merged[i * h + c] = s;
            }
        }
    }
    linear(&merged, rows, h, p.get(&name("attn.wo")), p.get(&name("attn.bo")), h)
}

fn masked_mean(values: &[f64], mask: &[bool]) -> f64 {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return 0.0;
    }
    values.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>() / count as f64
}

/// Mean `l_total` over the batch, entirely in f64, mirroring the training
/// objective: jittered target, corruption at the drawn timestep, a fresh
/// t = 1 pass anchored to the clean embedding, and the masked decoder
/// cross-entropy.
pub fn twin_batch_loss(
    cfg: &ModelConfig,
    values: &[Vec<f64>],
    schedule: &NoiseSchedule,
    jitter_sigma: f64,
    examples: &[TwinExample],
) -> f64 {
    let params = &TwinParams::new(cfg, values);
    let (l, d, v) = (cfg.seq_len, cfg.embed_dim, cfg.vocab_size);
    let emb = params.get("embedding");
    let mut total = 0.0;
    for ex in examples {
        let cond: Vec<f64> = ex.cond.iter().map(|&c| c as f64).collect();
        let mut x0_clean = vec![0.0; l * d];
        for (i, &id) in ex.ids.iter().enumerate() {
            x0_clean[i * d..(i + 1) * d].copy_from_slice(&emb[id * d..(id + 1) * d]);
        }
        let x0: Vec<f64> = if jitter_sigma > 0.0 {
            x0_clean
                .iter()
                .zip(&ex.draws.jitter)
                .map(|(c, &j)| c + jitter_sigma * j as f64)
                .collect()
        } else {
            x0_clean.clone()
        };

        let (cs, cn) = schedule.q_sample_coeffs(ex.draws.t);
        let x_t: Vec<f64> = x0
            .iter()
            .zip(&ex.draws.eps)
            .map(|(x, &e)| cs * x + cn * e as f64)
            .collect();
        let x0_hat = forward(cfg, params, &x_t, ex.draws.t, &cond);

        let (cs1, cn1) = schedule.q_sample_coeffs(1);
        let x_1: Vec<f64> = x0
            .iter()
            .zip(&ex.draws.eps_t1)
            .map(|(x, &e)| cs1 * x + cn1 * e as f64)
            .collect();
        let x0_hat1 = forward(cfg, params, &x_1, 1, &cond);

        let sq: Vec<f64> = (0..l)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let diff = x0_hat[i * d + j] - x0[i * d + j];
                        diff * diff
                    })
                    .sum()
            })
            .collect();
        let l_simple = masked_mean(&sq, &ex.mask);

        let sq1: Vec<f64> = (0..l)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let diff = x0_hat1[i * d + j] - x0_clean[i * d + j];
                        diff * diff
                    })
                    .sum()
            })
            .collect();
        let l_mse = masked_mean(&sq1, &ex.mask);

        let logits = linear(&x0_hat, l, d, params.get("lm_head.w"), params.get("lm_head.b"), v);
        let ce: Vec<f64> = (0..l)
            .map(|i| {
                let row = &logits[i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                lse - row[ex.ids[i]]
            })
            .collect();
        let l_word = masked_mean(&ce, &ex.mask);

        total += l_simple + l_mse + l_word;
    }
    total / examples.len() as f64
}
