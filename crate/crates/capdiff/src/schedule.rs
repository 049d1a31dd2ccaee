//! Forward-process noise schedules and closed-form diffusion quantities.
//!
//! A schedule fixes `beta_t` for `t = 1..=T`; everything else (alphas,
//! cumulative products, posterior coefficients, SNR) derives from it in f64.
//! Three families:
//! - `linear`: beta linearly spaced 1e-4 -> 0.02,
//! - `cosine`: alpha_bar follows a squared cosine with offset s = 0.008,
//!   betas derived from consecutive ratios and capped at 0.999,
//! - `sqrt`: alpha_bar(t) = 1 - sqrt(t/T + s) with s = 1e-4, clamped to
//!   [1e-5, 1 - 1e-5] so the tail stays strictly positive.
//!
//! All betas are clamped to [1e-8, 0.999]; the stored `alpha_bars` are the
//! running product of `1 - beta_t`, which keeps `alpha_bar` strictly
//! decreasing for every family.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const BETA_MIN: f64 = 1e-8;
pub const BETA_MAX: f64 = 0.999;
pub const SQRT_ALPHA_BAR_FLOOR: f64 = 1e-5;
pub const SQRT_ALPHA_BAR_CEIL: f64 = 1.0 - 1e-5;
pub const SQRT_OFFSET: f64 = 1e-4;
pub const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    Sqrt,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Linear, ScheduleKind::Cosine, ScheduleKind::Sqrt];

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Sqrt => "sqrt",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "sqrt" => Ok(ScheduleKind::Sqrt),
            other => Err(Error::Config(format!(
                "unknown schedule '{other}' (expected linear, cosine, or sqrt)"
            ))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Precomputed schedule over `t = 1..=t_max` (accessors are 1-indexed).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let raw_betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let (lo, hi) = (1e-4, 0.02);
                (1..=t_max)
                    .map(|t| {
                        if t_max == 1 {
                            lo
                        } else {
                            lo + (t - 1) as f64 / (t_max - 1) as f64 * (hi - lo)
                        }
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                let f0 = f(0.0);
                let mut prev = 1.0;
                (1..=t_max)
                    .map(|t| {
                        let ab = f(t as f64) / f0;
                        let beta = 1.0 - ab / prev;
                        prev = ab;
                        beta
                    })
                    .collect()
            }
            ScheduleKind::Sqrt => {
                let ab = |t: f64| {
                    (1.0 - (t / t_max as f64 + SQRT_OFFSET).sqrt())
                        .clamp(SQRT_ALPHA_BAR_FLOOR, SQRT_ALPHA_BAR_CEIL)
                };
                let mut prev = 1.0;
                (1..=t_max)
                    .map(|t| {
                        let a = ab(t as f64);
                        let beta = 1.0 - a / prev;
                        prev = a;
                        beta
                    })
                    .collect()
            }
        };
        let betas: Vec<f64> = raw_betas
            .into_iter()
            .map(|b| b.clamp(BETA_MIN, BETA_MAX))
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::Config(format!(
                "timestep {} outside 1..={}",
                t,
                self.t_max()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `alpha_bar` one step earlier, with the convention `alpha_bar(0) = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)`.
    pub fn snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab / (1.0 - ab)
    }

    /// Closed-form forward sample:
    /// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::Shape(format!(
                "q_sample: x0 {:?} vs eps {:?}",
                x0.shape(),
                eps.shape()
            )));
        }
        let (cs, cn) = self.q_sample_coeffs(t);
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&x, &e)| (cs * x as f64 + cn * e as f64) as f32)
            .collect();
        Tensor::new(x0.shape().to_vec(), data)
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn q_sample_coeffs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Coefficients `(c0, ct)` of the posterior mean
    /// `c0 * x0 + ct * x_t`, and the posterior variance, for a step at `t`.
    pub fn posterior_coeffs(&self, t: usize) -> (f64, f64, f64) {
        let beta = self.beta(t);
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar_prev(t);
        let denom = 1.0 - ab;
        let c0 = ab_prev.sqrt() * beta / denom;
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / denom;
        let var = beta * (1.0 - ab_prev) / denom;
        (c0, ct, var)
    }

    /// Posterior mean tensor and (scalar) variance of `q(x_{t-1} | x_t, x0)`
    /// with `x0` replaced by a prediction.
    pub fn posterior_mean_var(&self, x0: &Tensor, x_t: &Tensor, t: usize) -> Result<(Tensor, f64)> {
        self.check_t(t)?;
        if x0.shape() != x_t.shape() {
            return Err(Error::Shape(format!(
                "posterior: x0 {:?} vs x_t {:?}",
                x0.shape(),
                x_t.shape()
            )));
        }
        let (c0, ct, var) = self.posterior_coeffs(t);
        let data = x0
            .data()
            .iter()
            .zip(x_t.data())
            .map(|(&a, &b)| (c0 * a as f64 + ct * b as f64) as f32)
            .collect();
        Ok((Tensor::new(x0.shape().to_vec(), data)?, var))
    }

    /// Diagnostic prior term: `KL(q(x_T | x0) || N(0, I))`, in nats.
    pub fn vlb_prior(&self, x0: &Tensor) -> f64 {
        let ab_t = self.alpha_bar(self.t_max());
        let sigma2 = 1.0 - ab_t;
        let d = x0.len() as f64;
        let sq: f64 = x0.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        0.5 * (d * (sigma2 - 1.0 - sigma2.ln()) + ab_t * sq)
    }

    /// Diagnostic per-step term. For `t >= 2` this is the Gaussian KL between
    /// the true and predicted posteriors (equal variances, so a scaled
    /// squared mean difference); for `t = 1` it is the quadratic decoder
    /// surrogate `||x0 - x0_hat||^2 / (2 beta_1)`. Always >= 0.
    pub fn vlb_step(&self, x0: &Tensor, x0_hat: &Tensor, x_t: &Tensor, t: usize) -> Result<f64> {
        self.check_t(t)?;
        if t == 1 {
            let sq = sq_dist(x0, x0_hat)?;
            return Ok(sq / (2.0 * self.beta(1)));
        }
        let (mu_q, var) = self.posterior_mean_var(x0, x_t, t)?;
        let (mu_p, _) = self.posterior_mean_var(x0_hat, x_t, t)?;
        let sq = sq_dist(&mu_q, &mu_p)?;
        Ok(sq / (2.0 * var))
    }

    /// CSV dump, one `t,beta,alpha_bar,snr` data row per timestep (no
    /// header).
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for t in 1..=self.t_max() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                t,
                self.beta(t),
                self.alpha_bar(t),
                self.snr(t)
            ));
        }
        out
    }
}

fn sq_dist(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "squared distance: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoints_match_the_declared_range() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1000).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        // Interior point against an independently written linspace formula.
        let expect = 1e-4 + 499.0 / 999.0 * (0.02 - 1e-4);
        assert!((s.beta(500) - expect).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
    }

    #[test]
    fn cosine_follows_the_squared_cosine_ratio() {
        let t_max = 1000usize;
        let s = NoiseSchedule::build(ScheduleKind::Cosine, t_max).unwrap();
        let f = |t: f64| {
            let x = (t / t_max as f64 + 0.008) / 1.008;
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        // Away from the clipped tail the stored cumulative product must
        // reproduce f(t)/f(0).
        for &t in &[1usize, 10, 100, 500, 900] {
            let expect = f(t as f64) / f(0.0);
            let got = s.alpha_bar(t);
            assert!(
                (got - expect).abs() / expect < 1e-9,
                "t={t}: {got} vs {expect}"
            );
        }
        assert!(s.betas.iter().all(|&b| b <= BETA_MAX + 1e-15));
    }

    #[test]
    fn sqrt_floor_engages_exactly_at_the_final_step() {
        let t_max = 1000usize;
        let s = NoiseSchedule::build(ScheduleKind::Sqrt, t_max).unwrap();
        // Raw formula, written independently of the implementation.
        let raw = |t: f64| 1.0 - (t / t_max as f64 + 1e-4).sqrt();
        let below: Vec<usize> = (1..=t_max)
            .filter(|&t| raw(t as f64) < SQRT_ALPHA_BAR_FLOOR)
            .collect();
        assert_eq!(below, vec![t_max], "floor must bind exactly at t = T");
        assert!((s.alpha_bar(t_max) - SQRT_ALPHA_BAR_FLOOR).abs() / SQRT_ALPHA_BAR_FLOOR < 1e-9);
        // And the step before the clamp follows the raw formula.
        let expect = raw((t_max - 1) as f64);
        assert!((s.alpha_bar(t_max - 1) - expect).abs() / expect < 1e-9);
    }

    #[test]
    fn all_schedules_decrease_strictly_and_end_noisy() {
        for kind in ScheduleKind::ALL {
            let s = NoiseSchedule::build(kind, 1000).unwrap();
            let mut prev = 1.0f64;
            for t in 1..=1000 {
                let ab = s.alpha_bar(t);
                assert!(ab < prev, "{kind}: alpha_bar not strictly decreasing at t={t}");
                assert!(ab > 0.0, "{kind}: alpha_bar must stay positive");
                prev = ab;
            }
            assert!(s.alpha_bar(1000) < 1e-3, "{kind}: terminal alpha_bar too large");
            assert!(
                s.betas.iter().all(|&b| (BETA_MIN..=BETA_MAX).contains(&b)),
                "{kind}: beta outside clamp range"
            );
        }
    }

    #[test]
    fn posterior_at_t1_returns_the_prediction_exactly_in_distribution() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 100).unwrap();
        let (c0, ct, var) = s.posterior_coeffs(1);
        assert!((c0 - 1.0).abs() < 1e-12);
        assert!(ct.abs() < 1e-12);
        assert!(var.abs() < 1e-18);
    }

    #[test]
    fn posterior_mean_interpolates_with_the_documented_coefficients() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 50).unwrap();
        let t = 20;
        // Independent recomputation of the posterior coefficients.
        let ab = s.alpha_bar(t);
        let abp = s.alpha_bar(t - 1);
        let beta = s.beta(t);
        let c0 = abp.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - abp) / (1.0 - ab);
        let var = beta * (1.0 - abp) / (1.0 - ab);

        let x0 = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let xt = Tensor::new(vec![2, 2], vec![0.3, 0.1, -0.4, 0.9]).unwrap();
        let (mean, v) = s.posterior_mean_var(&x0, &xt, t).unwrap();
        for i in 0..4 {
            let expect = c0 * x0.data()[i] as f64 + ct * xt.data()[i] as f64;
            assert!((mean.data()[i] as f64 - expect).abs() < 1e-6);
        }
        assert!((v - var).abs() < 1e-15);
    }

    #[test]
    fn q_sample_is_deterministic_given_noise_and_matches_coefficients() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 10).unwrap();
        let x0 = Tensor::new(vec![3], vec![1.0, 0.0, -1.0]).unwrap();
        let eps = Tensor::new(vec![3], vec![0.5, 1.0, 2.0]).unwrap();
        let out = s.q_sample(&x0, 5, &eps).unwrap();
        let (cs, cn) = s.q_sample_coeffs(5);
        for i in 0..3 {
            let expect = cs * x0.data()[i] as f64 + cn * eps.data()[i] as f64;
            assert!((out.data()[i] as f64 - expect).abs() < 1e-6);
        }
        let again = s.q_sample(&x0, 5, &eps).unwrap();
        assert_eq!(out.data(), again.data());
    }

    #[test]
    fn vlb_terms_are_nonnegative_and_zero_for_perfect_prediction() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 100).unwrap();
        let x0 = Tensor::new(vec![4], vec![0.3, -0.8, 1.2, 0.0]).unwrap();
        let xt = Tensor::new(vec![4], vec![1.0, 0.2, -0.5, 0.7]).unwrap();
        let x0_hat = Tensor::new(vec![4], vec![0.5, -0.5, 1.0, 0.1]).unwrap();
        assert!(s.vlb_prior(&x0) >= 0.0);
        for t in [1, 2, 50, 100] {
            let term = s.vlb_step(&x0, &x0_hat, &xt, t).unwrap();
            assert!(term >= 0.0, "t={t}");
            let zero = s.vlb_step(&x0, &x0, &xt, t).unwrap();
            assert_eq!(zero, 0.0, "t={t}");
        }
    }

    #[test]
    fn csv_rows_have_one_line_per_timestep_no_header() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 100).unwrap();
        let csv = s.csv_rows();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 100);
        assert!(lines[0].starts_with("1,"));
        assert!(lines[99].starts_with("100,"));
        for line in &lines {
            assert_eq!(line.split(',').count(), 4);
        }
    }

    #[test]
    fn zero_steps_is_a_config_error() {
        let err = NoiseSchedule::build(ScheduleKind::Linear, 0).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn kind_parses_and_prints_round_trip() {
        for kind in ScheduleKind::ALL {
            let parsed: ScheduleKind = kind.name().parse().unwrap();
            assert_eq!(parsed, kind);
        }
        assert!("banana".parse::<ScheduleKind>().is_err());
    }
}
