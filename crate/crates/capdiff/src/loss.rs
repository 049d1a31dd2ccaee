//! Masked end-to-end training objective.
//!
//! One caption contributes three coupled terms, built on a single tape so
//! gradients flow through the denoiser, the decoder head, and the token
//! embedding at once:
//!
//! * `l_simple` — squared error between the denoiser's estimate at a
//!   uniformly drawn timestep and the (jittered) target embedding,
//! * `l_mse` — squared error between a fresh estimate at t = 1 and the
//!   clean token embedding, anchoring the embedding scale,
//! * `l_word` — cross-entropy of the decoder head applied to the estimate
//!   against the token ids.
//!
//! Every per-position term is masked before reduction, so positions holding
//! the unknown token contribute nothing — neither value nor gradient. A row
//! with every position masked yields a zero loss and a flag, not an error.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::model::{BoundParams, CaptionDenoiser};
use crate::rng::randn_vec;
use crate::schedule::NoiseSchedule;
use crate::tokenizer::UNK_ID;
use crate::{Error, Result};

/// Randomness for one caption's loss evaluation, drawn up-front in a fixed
/// order (timestep, embedding jitter, corruption noise, t = 1 noise) so the
/// stream position never depends on configuration.
#[derive(Debug, Clone)]
pub struct LossDraws {
    pub t: usize,
    pub jitter: Vec<f32>,
    pub eps: Vec<f32>,
    pub eps_t1: Vec<f32>,
}

/// Draw the noise for one caption of `l` positions and width `d`.
pub fn draw_loss_noise(rng: &mut ChaCha8Rng, t_max: usize, l: usize, d: usize) -> LossDraws {
    let t = rng.random_range(1..=t_max);
    let jitter = randn_vec(rng, l * d);
    let eps = randn_vec(rng, l * d);
    let eps_t1 = randn_vec(rng, l * d);
    LossDraws { t, jitter, eps, eps_t1 }
}

/// Loss terms still on the tape; `backward(l_total)` trains everything.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_simple: Var,
    pub l_mse: Var,
    pub l_word: Var,
    pub l_total: Var,
}

/// Detached scalar view of one example's loss.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub l_simple: f32,
    pub l_mse: f32,
    pub l_word: f32,
    pub l_total: f32,
    /// Fraction of positions masked *out* of the objective.
    pub masked_fraction: f32,
    /// True when no position was left to average over (loss is zero).
    pub all_masked: bool,
    pub t: usize,
}

/// Positions usable for the loss: everything except the unknown token.
pub fn unk_mask(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&id| id != UNK_ID).collect()
}

/// Combine denoiser outputs into the three loss terms and their sum.
///
/// `x0_hat` is the estimate at the drawn timestep, `x0_hat_t1` the fresh
/// estimate at t = 1; `x0` is the (possibly jittered) regression target and
/// `x0_clean` the clean token embedding. Factored out so the outputs can
/// also be supplied as plain leaves when probing the objective itself.
pub fn assemble_losses(
    tape: &mut Tape,
    model: &CaptionDenoiser,
    bp: &BoundParams,
    x0_hat: Var,
    x0_hat_t1: Var,
    x0: Var,
    x0_clean: Var,
    ids: &[usize],
    mask: &[bool],
) -> Result<LossVars> {
    let sq = tape.row_sq_diff(x0_hat, x0)?;
    let l_simple = tape.masked_mean(sq, mask)?;

    let sq1 = tape.row_sq_diff(x0_hat_t1, x0_clean)?;
    let l_mse = tape.masked_mean(sq1, mask)?;

    let logits = model.lm_logits(tape, bp, x0_hat)?;
    let ce = tape.row_cross_entropy(logits, ids)?;
    let l_word = tape.masked_mean(ce, mask)?;

    let partial = tape.add(l_simple, l_mse)?;
    let l_total = tape.add(partial, l_word)?;
    Ok(LossVars { l_simple, l_mse, l_word, l_total })
}

/// Full training objective for one caption with pre-drawn noise.
///
/// The chain: embed the ids, jitter the embedding (`jitter_sigma` = 0 skips
/// the perturbation but the draw is still consumed upstream), corrupt to the
/// drawn timestep, denoise, corrupt the same target to t = 1 with fresh
/// noise, denoise again, then assemble the masked terms.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_with_draws(
    tape: &mut Tape,
    model: &CaptionDenoiser,
    bp: &BoundParams,
    schedule: &NoiseSchedule,
    ids: &[usize],
    mask: &[bool],
    cond: &[f32],
    jitter_sigma: f32,
    draws: &LossDraws,
) -> Result<(LossVars, LossBreakdown)> {
    let cfg = model.config();
    let (l, d) = (cfg.seq_len, cfg.embed_dim);
    if ids.len() != l || mask.len() != l {
        return Err(Error::Shape(format!(
            "loss wants {} positions, got {} ids / {} mask entries",
            l,
            ids.len(),
            mask.len()
        )));
    }
    for field in [&draws.jitter, &draws.eps, &draws.eps_t1] {
        if field.len() != l * d {
            return Err(Error::Shape(format!(
                "noise draw of {} values does not cover {} positions of width {}",
                field.len(),
                l,
                d
            )));
        }
    }
    if draws.t == 0 || draws.t > schedule.t_max() {
        return Err(Error::Config(format!(
            "timestep {} outside 1..={}",
            draws.t,
            schedule.t_max()
        )));
    }

    let x0_clean = model.embed_tokens(tape, bp, ids)?;
    let x0 = if jitter_sigma > 0.0 {
        let jitter = tape.leaf(Tensor::new(vec![l, d], draws.jitter.clone())?);
        let scaled = tape.scale(jitter, jitter_sigma);
        tape.add(x0_clean, scaled)?
    } else {
        x0_clean
    };

    let (cs, cn) = schedule.q_sample_coeffs(draws.t);
    let eps = tape.leaf(Tensor::new(vec![l, d], draws.eps.clone())?);
    let signal = tape.scale(x0, cs as f32);
    let noise = tape.scale(eps, cn as f32);
    let x_t = tape.add(signal, noise)?;
    let x0_hat = model.fuse_and_denoise(tape, bp, x_t, draws.t, cond)?;

    let (cs1, cn1) = schedule.q_sample_coeffs(1);
    let eps1 = tape.leaf(Tensor::new(vec![l, d], draws.eps_t1.clone())?);
    let signal1 = tape.scale(x0, cs1 as f32);
    let noise1 = tape.scale(eps1, cn1 as f32);
    let x_1 = tape.add(signal1, noise1)?;
    let x0_hat_t1 = model.fuse_and_denoise(tape, bp, x_1, 1, cond)?;

    let vars = assemble_losses(tape, model, bp, x0_hat, x0_hat_t1, x0, x0_clean, ids, mask)?;
    let masked_out = mask.iter().filter(|&&m| !m).count();
    let breakdown = LossBreakdown {
        l_simple: tape.value(vars.l_simple).item()?,
        l_mse: tape.value(vars.l_mse).item()?,
        l_word: tape.value(vars.l_word).item()?,
        l_total: tape.value(vars.l_total).item()?,
        masked_fraction: masked_out as f32 / l as f32,
        all_masked: masked_out == l,
        t: draws.t,
    };
    Ok((vars, breakdown))
}

/// One caption in a training batch.
#[derive(Debug, Clone)]
pub struct LossExample {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub cond: Vec<f32>,
}

/// Mean `l_total` over a batch on one tape, plus per-example scalars.
///
/// `draws` runs parallel to `examples`; the batch loss is the chained sum
/// scaled by 1/B, so a one-example batch reproduces the single loss exactly.
pub fn batch_training_loss(
    tape: &mut Tape,
    model: &CaptionDenoiser,
    bp: &BoundParams,
    schedule: &NoiseSchedule,
    jitter_sigma: f32,
    examples: &[LossExample],
    draws: &[LossDraws],
) -> Result<(Var, Vec<LossBreakdown>)> {
    if examples.is_empty() {
        return Err(Error::Shape("batch loss over zero examples".into()));
    }
    if examples.len() != draws.len() {
        return Err(Error::Shape(format!(
            "{} examples but {} noise draws",
            examples.len(),
            draws.len()
        )));
    }
    let mut parts = Vec::with_capacity(examples.len());
    let mut total: Option<Var> = None;
    for (ex, dr) in examples.iter().zip(draws) {
        let (vars, breakdown) = training_loss_with_draws(
            tape, model, bp, schedule, &ex.ids, &ex.mask, &ex.cond, jitter_sigma, dr,
        )?;
        parts.push(breakdown);
        total = Some(match total {
            None => vars.l_total,
            Some(acc) => tape.add(acc, vars.l_total)?,
        });
    }
    let mean = tape.scale(total.expect("non-empty batch"), 1.0 / examples.len() as f32);
    Ok((mean, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FuseMode, ModelConfig, TimeMode};
    use crate::rng::{stream, STREAM_NOISE};
    use crate::schedule::ScheduleKind;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            embed_dim: 4,
            hidden_dim: 8,
            layers: 1,
            heads: 2,
            seq_len: 4,
            cond_dim: 3,
            fuse_mode: FuseMode::Prefix,
            time_mode: TimeMode::Prepend,
        }
    }

    fn tiny_model(seed: u64) -> CaptionDenoiser {
        CaptionDenoiser::init(tiny_config(), &mut stream(seed, 0)).unwrap()
    }

    fn param_index(model: &CaptionDenoiser, name: &str) -> usize {
        model
            .config()
            .param_shapes()
            .iter()
            .position(|(n, _)| n == name)
            .unwrap()
    }

    #[test]
    fn word_loss_matches_hand_computed_cross_entropy() {
        let cfg = ModelConfig {
            vocab_size: 4,
            embed_dim: 2,
            hidden_dim: 4,
            layers: 0,
            heads: 1,
            seq_len: 2,
            cond_dim: 2,
            fuse_mode: FuseMode::Add,
            time_mode: TimeMode::Add,
        };
        let mut model = CaptionDenoiser::init(cfg, &mut stream(0, 0)).unwrap();
        let wi = param_index(&model, "lm_head.w");
        let bi = param_index(&model, "lm_head.b");
        model.params_mut()[wi] =
            Tensor::new(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        model.params_mut()[bi] = Tensor::new(vec![1, 4], vec![0.01, 0.02, 0.03, 0.04]).unwrap();

        // Second position is masked out, so l_word is exactly the
        // cross-entropy of the first row.
        let mut tape = Tape::new();
        let bp = model.bind(&mut tape);
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -0.5, 9.0, 9.0]).unwrap());
        let zero = tape.leaf(Tensor::zeros(vec![2, 2]));
        let vars =
            assemble_losses(&mut tape, &model, &bp, x, zero, x, x, &[1, 0], &[true, false])
                .unwrap();

        // logits = [1, -0.5] . W + b = [-0.14, -0.08, -0.02, 0.04], target id 1
        let logits = [-0.14f64, -0.08, -0.02, 0.04];
        let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
        let want = lse - logits[1];
        let got = tape.value(vars.l_word).item().unwrap() as f64;
        assert!((got - want).abs() < 1e-6, "l_word {got} vs hand value {want}");
    }

    #[test]
    fn total_decomposes_into_parts_bitwise() {
        let model = tiny_model(3);
        let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 50).unwrap();
        let mut rng = stream(3, STREAM_NOISE);
        let draws = draw_loss_noise(&mut rng, 50, 4, 4);
        let cond = [0.3f32, -0.1, 0.8];

        let mut tape = Tape::new();
        let bp = model.bind(&mut tape);
        let (vars, breakdown) = training_loss_with_draws(
            &mut tape,
            &model,
            &bp,
            &schedule,
            &[3, 7, 1, 0],
            &[true, true, true, true],
            &cond,
            0.1,
            &draws,
        )
        .unwrap();

        let recomposed = (breakdown.l_simple + breakdown.l_mse) + breakdown.l_word;
        assert_eq!(
            recomposed.to_bits(),
            breakdown.l_total.to_bits(),
            "l_total must be the exact f32 sum of its parts"
        );
        assert_eq!(breakdown.t, draws.t);
        assert_eq!(breakdown.masked_fraction, 0.0);
        assert!(!breakdown.all_masked);
        assert!(tape.value(vars.l_total).item().unwrap() > 0.0);
    }

    #[test]
    fn all_masked_positions_give_zero_loss_and_flag() {
        let model = tiny_model(4);
        let schedule = NoiseSchedule::build(ScheduleKind::Linear, 20).unwrap();
        let mut rng = stream(4, STREAM_NOISE);
        let draws = draw_loss_noise(&mut rng, 20, 4, 4);
        let ids = [UNK_ID; 4];
        let mask = unk_mask(&ids);
        assert_eq!(mask, [false; 4]);

        let mut tape = Tape::new();
        let bp = model.bind(&mut tape);
        let (_, breakdown) = training_loss_with_draws(
            &mut tape,
            &model,
            &bp,
            &schedule,
            &ids,
            &mask,
            &[0.0, 0.0, 0.0],
            0.1,
            &draws,
        )
        .unwrap();
        assert_eq!(breakdown.l_total, 0.0);
        assert_eq!(breakdown.masked_fraction, 1.0);
        assert!(breakdown.all_masked);
    }

    #[test]
    fn masked_positions_do_not_touch_the_loss_bitwise() {
        // Perturbing the denoiser outputs only at masked positions must not
        // change any loss term, bit for bit.
        let model = tiny_model(5);
        let mut rng = stream(5, STREAM_NOISE);
        let ids = [3usize, UNK_ID, 5, UNK_ID];
        let mask = unk_mask(&ids);
        let base: Vec<f32> = randn_vec(&mut rng, 16);
        let base1: Vec<f32> = randn_vec(&mut rng, 16);
        let target: Vec<f32> = randn_vec(&mut rng, 16);

        let run = |bump: f32| {
            let mut tape = Tape::new();
            let bp = model.bind(&mut tape);
            let mut h = base.clone();
            let mut h1 = base1.clone();
            for (row, keep) in mask.iter().enumerate() {
                if !keep {
                    for c in 0..4 {
                        h[row * 4 + c] += bump;
                        h1[row * 4 + c] -= 2.0 * bump;
                    }
                }
            }
            let x0_hat = tape.leaf(Tensor::new(vec![4, 4], h).unwrap());
            let x0_hat_t1 = tape.leaf(Tensor::new(vec![4, 4], h1).unwrap());
            let x0 = tape.leaf(Tensor::new(vec![4, 4], target.clone()).unwrap());
            let vars = assemble_losses(
                &mut tape, &model, &bp, x0_hat, x0_hat_t1, x0, x0, &ids, &mask,
            )
            .unwrap();
            (
                tape.value(vars.l_simple).item().unwrap().to_bits(),
                tape.value(vars.l_mse).item().unwrap().to_bits(),
                tape.value(vars.l_word).item().unwrap().to_bits(),
                tape.value(vars.l_total).item().unwrap().to_bits(),
            )
        };

        assert_eq!(run(0.0), run(1.0e6));
    }

    #[test]
    fn gradients_reach_embedding_and_head() {
        let model = tiny_model(6);
        let schedule = NoiseSchedule::build(ScheduleKind::Sqrt, 30).unwrap();
        let mut rng = stream(6, STREAM_NOISE);
        let draws = draw_loss_noise(&mut rng, 30, 4, 4);

        let mut tape = Tape::new();
        let bp = model.bind(&mut tape);
        let (vars, _) = training_loss_with_draws(
            &mut tape,
            &model,
            &bp,
            &schedule,
            &[3, 7, 1, 0],
            &[true, true, true, true],
            &[0.5, 0.5, 0.5],
            0.1,
            &draws,
        )
        .unwrap();
        let grads = tape.backward(vars.l_total).unwrap();
        for name in ["embedding", "lm_head.w", "block0.attn.wq", "cond_proj.w"] {
            let idx = param_index(&model, name);
            let g = grads
                .get(bp.var(idx))
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            let norm: f64 = g.data().iter().map(|&v| (v as f64).powi(2)).sum();
            assert!(norm > 0.0, "{name} gradient is identically zero");
        }
    }

    #[test]
    fn tape_corruption_matches_pure_q_sample() {
        let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 100).unwrap();
        let mut rng = stream(9, STREAM_NOISE);
        let x0 = Tensor::new(vec![3, 4], randn_vec(&mut rng, 12)).unwrap();
        let eps = Tensor::new(vec![3, 4], randn_vec(&mut rng, 12)).unwrap();
        for t in [1usize, 50, 100] {
            let pure = schedule.q_sample(&x0, t, &eps).unwrap();

            let mut tape = Tape::new();
            let x0v = tape.leaf(x0.clone());
            let epsv = tape.leaf(eps.clone());
            let (cs, cn) = schedule.q_sample_coeffs(t);
            let s = tape.scale(x0v, cs as f32);
            let n = tape.scale(epsv, cn as f32);
            let xt = tape.add(s, n).unwrap();
            for (a, b) in tape.value(xt).data().iter().zip(pure.data()) {
                assert!((a - b).abs() < 1e-6, "tape {a} vs pure {b} at t={t}");
            }
        }
    }

    #[test]
    fn draws_are_deterministic_and_independent_of_sigma_use() {
        let a = draw_loss_noise(&mut stream(11, STREAM_NOISE), 40, 4, 4);
        let b = draw_loss_noise(&mut stream(11, STREAM_NOISE), 40, 4, 4);
        assert_eq!(a.t, b.t);
        assert_eq!(a.jitter, b.jitter);
        assert_eq!(a.eps, b.eps);
        assert_eq!(a.eps_t1, b.eps_t1);

        // sigma = 0 keeps the same draw structure; only the jitter add is
        // skipped, so losses stay finite and well-formed.
        let model = tiny_model(11);
        let schedule = NoiseSchedule::build(ScheduleKind::Linear, 40).unwrap();
        let mut tape = Tape::new();
        let bp = model.bind(&mut tape);
        let (_, breakdown) = training_loss_with_draws(
            &mut tape,
            &model,
            &bp,
            &schedule,
            &[2, 3, 4, 5],
            &[false, true, true, true],
            &[1.0, 0.0, 0.0],
            0.0,
            &a,
        )
        .unwrap();
        assert!(breakdown.l_total.is_finite());
        assert!((breakdown.masked_fraction - 0.25).abs() < 1e-6);
    }

    #[test]
    fn batch_mean_matches_manual_average() {
        let model = tiny_model(13);
        let schedule = NoiseSchedule::build(ScheduleKind::Cosine, 25).unwrap();
        let mut rng = stream(13, STREAM_NOISE);
        let examples = vec![
            LossExample {
                ids: vec![3, 7, 1, 0],
                mask: vec![true, true, true, true],
                cond: vec![0.1, 0.2, 0.3],
            },
            LossExample {
                ids: vec![4, 2, 6, 1],
                mask: vec![true, false, true, true],
                cond: vec![-0.5, 0.0, 0.5],
            },
        ];
        let draws: Vec<LossDraws> =
            (0..2).map(|_| draw_loss_noise(&mut rng, 25, 4, 4)).collect();

        let mut tape = Tape::new();
        let bp = model.bind(&mut tape);
        let (mean, parts) = batch_training_loss(
            &mut tape, &model, &bp, &schedule, 0.1, &examples, &draws,
        )
        .unwrap();
        assert_eq!(parts.len(), 2);
        let manual = (parts[0].l_total + parts[1].l_total) * 0.5;
        let got = tape.value(mean).item().unwrap();
        assert_eq!(got.to_bits(), manual.to_bits());

        let grads = tape.backward(mean).unwrap();
        let ei = param_index(&model, "embedding");
        assert!(grads.get(bp.var(ei)).is_some());
    }

    #[test]
    fn loss_mean_stabilizes_across_draw_groups() {
        // Weak sanity check on the stochastic objective: group means over
        // disjoint draw sets agree within a few standard errors.
        let model = tiny_model(17);
        let schedule = NoiseSchedule::build(ScheduleKind::Linear, 30).unwrap();
        let ids = [3usize, 7, 1, 0];
        let mask = [true; 4];
        let cond = [0.2f32, -0.2, 0.4];

        let group = |stream_id: u64| -> Vec<f64> {
            let mut rng = stream(17, stream_id);
            (0..64)
                .map(|_| {
                    let draws = draw_loss_noise(&mut rng, 30, 4, 4);
                    let mut tape = Tape::new();
                    let bp = model.bind(&mut tape);
                    let (_, b) = training_loss_with_draws(
                        &mut tape, &model, &bp, &schedule, &ids, &mask, &cond, 0.1, &draws,
                    )
                    .unwrap();
                    b.l_total as f64
                })
                .collect()
        };

        let (a, b) = (group(100), group(101));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], m: f64| {
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let (ma, mb) = (mean(&a), mean(&b));
        let se = ((var(&a, ma) + var(&b, mb)) / 64.0).sqrt();
        assert!(
            (ma - mb).abs() < 3.0 * se.max(1e-12),
            "group means {ma} vs {mb} differ by more than 3 standard errors ({se})"
        );
    }
}
