//! Transformer denoiser over token-embedding sequences.
//!
//! The network predicts clean embeddings `x0_hat` from a noised sequence
//! `x_t`, a timestep, and a conditioning feature vector. Layout:
//!
//! ```text
//! x_t [L,d] --in_proj--> [L,h] --+pos--> blocks (pre-LN attn + FFN) --slice--> out_proj --> x0_hat [L,d]
//! cond [c] --cond_proj--> [1,h]   (prefix row or added to every position)
//! t --sinusoid--> [1,h]           (prepended row or added to every position)
//! ```
//!
//! The prefix slots, when present, sit in the order `[condition, timestep,
//! text...]` and are dropped before `out_proj`, so the output is always
//! `[L,d]`. With zero blocks the network collapses to the closed form
//! `out_proj(in_proj(x_t) + fusion rows + positional rows)` — there is no
//! final layer norm. A tied-shape LM head (`[d, V]`, untied weights) scores
//! embeddings against the vocabulary for decoding and the word loss.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseMode {
    /// Condition projected to one hidden row, prepended to the sequence.
    Prefix,
    /// Condition projected and added to every text position.
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    /// Sinusoidal timestep row prepended to the sequence.
    Prepend,
    /// Sinusoidal timestep row added to every text position.
    Add,
}

impl std::str::FromStr for FuseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(FuseMode::Prefix),
            "add" => Ok(FuseMode::Add),
            other => Err(Error::Config(format!(
                "unknown fuse mode '{other}' (expected prefix or add)"
            ))),
        }
    }
}

impl std::str::FromStr for TimeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prepend" => Ok(TimeMode::Prepend),
            "add" => Ok(TimeMode::Add),
            other => Err(Error::Config(format!(
                "unknown time mode '{other}' (expected prepend or add)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Token-embedding width `d`.
    pub embed_dim: usize,
    /// Transformer width `h`.
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Fixed text canvas length `L`.
    pub seq_len: usize,
    /// Conditioning feature width `c`.
    pub cond_dim: usize,
    pub fuse_mode: FuseMode,
    pub time_mode: TimeMode,
}

impl ModelConfig {
    /// Small configuration for desk-scale experiments.
    pub fn desk(vocab_size: usize, cond_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            seq_len: 16,
            cond_dim,
            fuse_mode: FuseMode::Prefix,
            time_mode: TimeMode::Prepend,
        }
    }

    /// Reference-scale configuration (not trained here; shape echo only).
    pub fn reference_scale() -> Self {
        ModelConfig {
            vocab_size: 8016,
            embed_dim: 256,
            hidden_dim: 768,
            layers: 12,
            heads: 12,
            seq_len: 32,
            cond_dim: 512,
            fuse_mode: FuseMode::Prefix,
            time_mode: TimeMode::Prepend,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must be at least 4".into()));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("cond_dim", self.cond_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide hidden_dim ({})",
                self.heads, self.hidden_dim
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config("hidden_dim must be even for the sinusoid".into()));
        }
        Ok(())
    }

    /// Number of prefix rows ahead of the text canvas.
    pub fn n_prefix(&self) -> usize {
        (self.fuse_mode == FuseMode::Prefix) as usize + (self.time_mode == TimeMode::Prepend) as usize
    }

    /// Every parameter, in its fixed order: `(name, shape)`. This list is
    /// the single source of truth for construction, counting, checkpoints,
    /// and optimizer state.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, h, c, l) = (
            self.vocab_size,
            self.embed_dim,
            self.hidden_dim,
            self.cond_dim,
            self.seq_len,
        );
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embedding".into(), vec![v, d]),
            ("in_proj.w".into(), vec![d, h]),
            ("in_proj.b".into(), vec![1, h]),
            ("cond_proj.w".into(), vec![c, h]),
            ("cond_proj.b".into(), vec![1, h]),
            ("out_proj.w".into(), vec![h, d]),
            ("out_proj.b".into(), vec![1, d]),
            ("lm_head.w".into(), vec![d, v]),
            ("lm_head.b".into(), vec![1, v]),
            ("pos.text".into(), vec![l, h]),
            // Slot 0 carries the condition prefix, slot 1 the timestep
            // prefix; allocated in every mode so shapes don't depend on the
            // fusion choice.
            ("pos.prefix".into(), vec![2, h]),
        ];
        for i in 0..self.layers {
            let p = |s: &str| format!("block{i}.{s}");
            out.push((p("ln1.g"), vec![1, h]));
            out.push((p("ln1.b"), vec![1, h]));
            out.push((p("attn.wq"), vec![h, h]));
            out.push((p("attn.bq"), vec![1, h]));
            out.push((p("attn.wk"), vec![h, h]));
            out.push((p("attn.bk"), vec![1, h]));
            out.push((p("attn.wv"), vec![h, h]));
            out.push((p("attn.bv"), vec![1, h]));
            out.push((p("attn.wo"), vec![h, h]));
            out.push((p("attn.bo"), vec![1, h]));
            out.push((p("ln2.g"), vec![1, h]));
            out.push((p("ln2.b"), vec![1, h]));
            out.push((p("ffn.w1"), vec![h, 4 * h]));
            out.push((p("ffn.b1"), vec![1, 4 * h]));
            out.push((p("ffn.w2"), vec![4 * h, h]));
            out.push((p("ffn.b2"), vec![1, h]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Model parameters bound onto a tape for one forward/backward pass.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// The denoiser network: configuration plus parameter storage.
#[derive(Debug, Clone)]
pub struct CaptionDenoiser {
    cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl CaptionDenoiser {
    /// Fresh model with seeded initialization.
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.param_shapes();
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            let n: usize = shape.iter().product();
            let data = if name == "embedding" {
                rng::randn_vec(rng, n)
            } else if name.starts_with("pos.") {
                rng::randn_vec(rng, n).iter().map(|v| v * 0.02).collect()
            } else if name.ends_with(".w")
                || name.ends_with(".wq")
                || name.ends_with(".wk")
                || name.ends_with(".wv")
                || name.ends_with(".wo")
                || name.ends_with(".w1")
                || name.ends_with(".w2")
            {
                let scale = 1.0 / (shape[0] as f32).sqrt();
                rng::randn_vec(rng, n).iter().map(|v| v * scale).collect()
            } else if name.ends_with(".g") {
                vec![1.0; n]
            } else {
                vec![0.0; n] // biases
            };
            params.push(Tensor::new(shape.clone(), data)?);
        }
        Ok(Self::from_parts(cfg, params))
    }

    /// Assemble from parameters already in canonical order (checkpoint
    /// loading); shapes must match `cfg.param_shapes()` exactly.
    pub fn from_params(cfg: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::Data(format!(
                "expected {} parameters, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != &shape[..] {
                return Err(Error::Data(format!(
                    "parameter '{}' has shape {:?}, want {:?}",
                    name,
                    p.shape(),
                    shape
                )));
            }
        }
        Ok(Self::from_parts(cfg, params))
    }

    fn from_parts(cfg: ModelConfig, params: Vec<Tensor>) -> Self {
        let names: Vec<String> = cfg.param_shapes().into_iter().map(|(n, _)| n).collect();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        CaptionDenoiser {
            cfg,
            names,
            params,
            index,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Parameters in canonical order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.params.iter())
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Put every parameter on `tape` as a leaf, in canonical order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        BoundParams { vars }
    }

    fn v(&self, bp: &BoundParams, name: &str) -> Var {
        bp.vars[self.index[name]]
    }

    /// Clean embeddings for a token sequence: rows of the embedding table.
    pub fn embed_tokens(&self, tape: &mut Tape, bp: &BoundParams, ids: &[usize]) -> Result<Var> {
        tape.gather(self.v(bp, "embedding"), ids)
    }

    /// Interleaved sinusoidal timestep features of width `hidden_dim`:
    /// `[sin(t w_0), cos(t w_0), sin(t w_1), ...]`, `w_k = 10000^(-2k/h)`.
    pub fn timestep_embedding(&self, t: usize) -> Tensor {
        let h = self.cfg.hidden_dim;
        let mut data = vec![0.0f32; h];
        for k in 0..h / 2 {
            let omega = 10000f64.powf(-2.0 * k as f64 / h as f64);
            let arg = t as f64 * omega;
            data[2 * k] = arg.sin() as f32;
            data[2 * k + 1] = arg.cos() as f32;
        }
        Tensor::new(vec![1, h], data).expect("shape matches")
    }

    /// Predict clean embeddings from a noised canvas, timestep, and
    /// condition vector.
    pub fn fuse_and_denoise(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        x_t: Var,
        t: usize,
        cond: &[f32],
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let (rows, cols) = tape.value(x_t).dims2()?;
        if rows != cfg.seq_len || cols != cfg.embed_dim {
            return Err(Error::Shape(format!(
                "x_t shape {:?}, want [{}, {}]",
                tape.value(x_t).shape(),
                cfg.seq_len,
                cfg.embed_dim
            )));
        }
        if cond.len() != cfg.cond_dim {
            return Err(Error::Shape(format!(
                "condition has {} dims, want {}",
                cond.len(),
                cfg.cond_dim
            )));
        }

        let cond_leaf = tape.leaf(Tensor::new(vec![1, cfg.cond_dim], cond.to_vec())?);
        let cond_row = tape.linear(
            cond_leaf,
            self.v(bp, "cond_proj.w"),
            self.v(bp, "cond_proj.b"),
        )?;
        let time_row = tape.leaf(self.timestep_embedding(t));

        let mut text = tape.linear(x_t, self.v(bp, "in_proj.w"), self.v(bp, "in_proj.b"))?;
        text = tape.add(text, self.v(bp, "pos.text"))?;

        let pos_prefix = self.v(bp, "pos.prefix");
        let mut prefix_rows: Vec<Var> = Vec::new();
        match cfg.fuse_mode {
            FuseMode::Prefix => {
                let slot = tape.slice_rows(pos_prefix, 0, 1)?;
                prefix_rows.push(tape.add(cond_row, slot)?);
            }
            FuseMode::Add => {
                let tiled = tape.tile_rows(cond_row, cfg.seq_len)?;
                text = tape.add(text, tiled)?;
            }
        }
        match cfg.time_mode {
            TimeMode::Prepend => {
                let slot = tape.slice_rows(pos_prefix, 1, 1)?;
                prefix_rows.push(tape.add(time_row, slot)?);
            }
            TimeMode::Add => {
                let tiled = tape.tile_rows(time_row, cfg.seq_len)?;
                text = tape.add(text, tiled)?;
            }
        }

        let mut x = if prefix_rows.is_empty() {
            text
        } else {
            prefix_rows.push(text);
            tape.concat_rows(&prefix_rows)?
        };

        for i in 0..cfg.layers {
            let p = |s: &str| format!("block{i}.{s}");
            let a = tape.layer_norm(x, self.v(bp, &p("ln1.g")), self.v(bp, &p("ln1.b")))?;
            let attn = self.attention(tape, bp, i, a)?;
            x = tape.add(x, attn)?;
            let f = tape.layer_norm(x, self.v(bp, &p("ln2.g")), self.v(bp, &p("ln2.b")))?;
            let f1 = tape.linear(f, self.v(bp, &p("ffn.w1")), self.v(bp, &p("ffn.b1")))?;
            let g = tape.gelu(f1);
            let f2 = tape.linear(g, self.v(bp, &p("ffn.w2")), self.v(bp, &p("ffn.b2")))?;
            x = tape.add(x, f2)?;
        }

        let text_out = tape.slice_rows(x, cfg.n_prefix(), cfg.seq_len)?;
        tape.linear(text_out, self.v(bp, "out_proj.w"), self.v(bp, "out_proj.b"))
    }

    /// Bidirectional multi-head self-attention over the whole sequence.
    fn attention(&self, tape: &mut Tape, bp: &BoundParams, layer: usize, a: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let p = |s: &str| format!("block{layer}.{s}");
        let q = tape.linear(a, self.v(bp, &p("attn.wq")), self.v(bp, &p("attn.bq")))?;
        let k = tape.linear(a, self.v(bp, &p("attn.wk")), self.v(bp, &p("attn.bk")))?;
        let v = tape.linear(a, self.v(bp, &p("attn.wv")), self.v(bp, &p("attn.bv")))?;

        let dh = cfg.hidden_dim / cfg.heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let qt = tape.transpose(q)?; // [h, S]
        let kt = tape.transpose(k)?;
        let vt = tape.transpose(v)?;
        let mut head_outs_t = Vec::with_capacity(cfg.heads); // each [dh, S]
        for j in 0..cfg.heads {
            let qj_t = tape.slice_rows(qt, j * dh, dh)?; // [dh, S]
            let kj_t = tape.slice_rows(kt, j * dh, dh)?;
            let vj_t = tape.slice_rows(vt, j * dh, dh)?;
            let qj = tape.transpose(qj_t)?; // [S, dh]
            let scores = tape.matmul(qj, kj_t)?; // [S, S]
            let scaled = tape.scale(scores, scale);
            let probs = tape.softmax(scaled)?;
            let vj = tape.transpose(vj_t)?; // [S, dh]
            let oj = tape.matmul(probs, vj)?; // [S, dh]
            head_outs_t.push(tape.transpose(oj)?);
        }
        let stacked = tape.concat_rows(&head_outs_t)?; // [h, S]
        let merged = tape.transpose(stacked)?; // [S, h]
        tape.linear(merged, self.v(bp, &p("attn.wo")), self.v(bp, &p("attn.bo")))
    }

    /// Vocabulary logits for embedding rows.
    pub fn lm_logits(&self, tape: &mut Tape, bp: &BoundParams, x: Var) -> Result<Var> {
        tape.linear(x, self.v(bp, "lm_head.w"), self.v(bp, "lm_head.b"))
    }

    /// Nearest embedding row (squared L2) for each row of `x`; ties go to
    /// the lower id.
    pub fn knn_round(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (rows, cols) = x.dims2()?;
        if cols != self.cfg.embed_dim {
            return Err(Error::Shape(format!(
                "knn_round: {} columns, want {}",
                cols, self.cfg.embed_dim
            )));
        }
        let emb = &self.params[self.index["embedding"]];
        let v = self.cfg.vocab_size;
        let ed = emb.data();
        let xd = x.data();
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let xrow = &xd[i * cols..(i + 1) * cols];
            let mut best = (f64::INFINITY, 0usize);
            for kid in 0..v {
                let erow = &ed[kid * cols..(kid + 1) * cols];
                let mut dist = 0.0f64;
                for j in 0..cols {
                    let d = xrow[j] as f64 - erow[j] as f64;
                    dist += d * d;
                }
                if dist < best.0 {
                    best = (dist, kid);
                }
            }
            out.push(best.1);
        }
        Ok(out)
    }

    /// Embedding rows for the given ids, as a plain tensor.
    pub fn embedding_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let emb = &self.params[self.index["embedding"]];
        let (v, d) = emb.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Shape(format!("id {id} outside vocabulary of {v}")));
            }
            data.extend_from_slice(&emb.data()[id * d..(id + 1) * d]);
        }
        Tensor::new(vec![ids.len(), d], data)
    }
}
