//! Noise schedules, forward noising, prediction-type conversion, sampler
//! steps, input preconditioning and the logit-normal timestep sampler.
//!
//! Two coordinate systems appear here:
//!
//! - *VP* schedules (`vp-linear`, `lcm-uniform`) store `x_t = a_t x0 + s_t eps`
//!   with `a_t^2 + s_t^2 = 1`; the denoiser sees `x_t` directly.
//! - *Euler-discrete* schedules store the variance-exploding form
//!   `x_t = x0 + sigma_t eps` (`alpha = 1`); the denoiser sees
//!   `c_in(sigma) x_t` with `c_in = 1 / sqrt(sigma^2 + 1)`, which is again a
//!   VP sample with coefficients `(c_in, sigma c_in)`.
//!
//! [`NoiseSchedule::vp_coeffs`] maps either kind to the VP coefficients of
//! the denoiser input, so prediction conversions are shared.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::tensor::Tensor;

/// Length of the discrete training grid every schedule is anchored to.
pub const TRAIN_TIMESTEPS: usize = 1000;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;
pub const EULER_SIGMA_MIN: f64 = 0.1;
pub const EULER_SIGMA_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    VpLinear,
    EulerDiscrete,
    LcmUniform,
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vp-linear" => Ok(Self::VpLinear),
            "euler-discrete" => Ok(Self::EulerDiscrete),
            "lcm-uniform" => Ok(Self::LcmUniform),
            other => Err(Error::InvalidArgument(format!("unknown schedule kind {other:?}"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::VpLinear => "vp-linear",
            Self::EulerDiscrete => "euler-discrete",
            Self::LcmUniform => "lcm-uniform",
        })
    }
}

/// What the denoiser output represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Epsilon,
    V,
    Sample,
}

impl FromStr for Prediction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" | "eps" => Ok(Self::Epsilon),
            "v" | "v_prediction" => Ok(Self::V),
            "sample" => Ok(Self::Sample),
            other => Err(Error::InvalidArgument(format!("unknown prediction type {other:?}"))),
        }
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Epsilon => "epsilon",
            Self::V => "v",
            Self::Sample => "sample",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMethod {
    Ddim,
    Euler,
    Lcm,
}

impl FromStr for SamplerMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(Self::Ddim),
            "euler" => Ok(Self::Euler),
            "lcm" => Ok(Self::Lcm),
            other => Err(Error::InvalidArgument(format!("unknown sampler method {other:?}"))),
        }
    }
}

/// Which network an input is being preconditioned for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PreconditionVariant {
    Student,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub num_steps: usize,
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub prediction: Prediction,
    /// Value fed to the denoiser's timestep embedding at each step, on the
    /// 1000-step training grid.
    pub model_times: Vec<f64>,
}

fn vp_linear_tables(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut alphas = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    let mut cum = 1.0;
    for i in 0..n {
        let beta = if n == 1 {
            BETA_START
        } else {
            BETA_START + (BETA_END - BETA_START) * i as f64 / (n - 1) as f64
        };
        cum *= 1.0 - beta;
        alphas.push(cum.sqrt());
        sigmas.push((1.0 - cum).sqrt());
    }
    (alphas, sigmas)
}

/// Fractional training-grid timestep whose VE noise level `s/a` equals `sigma`.
fn sigma_to_train_time(sigma: f64, alphas: &[f64], sigmas: &[f64]) -> f64 {
    let ve: Vec<f64> = alphas.iter().zip(sigmas).map(|(a, s)| (s / a).ln()).collect();
    let target = sigma.ln();
    if target <= ve[0] {
        return 0.0;
    }
    let last = ve.len() - 1;
    if target >= ve[last] {
        return last as f64;
    }
    let hi = ve.partition_point(|&v| v < target);
    let lo = hi - 1;
    let w = (target - ve[lo]) / (ve[hi] - ve[lo]);
    lo as f64 + w
}

/// Build a schedule table.
pub fn make_schedule(kind: ScheduleKind, num_steps: usize, prediction: Prediction) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(Error::InvalidArgument("num_steps must be >= 1".into()));
    }
    let (alphas, sigmas, model_times) = match kind {
        ScheduleKind::VpLinear => {
            let (a, s) = vp_linear_tables(num_steps);
            let scale = TRAIN_TIMESTEPS as f64 / num_steps as f64;
            let times = (0..num_steps).map(|i| i as f64 * scale).collect();
            (a, s, times)
        }
        ScheduleKind::LcmUniform => {
            if num_steps > TRAIN_TIMESTEPS {
                return Err(Error::InvalidArgument(format!(
                    "lcm-uniform supports at most {TRAIN_TIMESTEPS} steps"
                )));
            }
            let (pa, ps) = vp_linear_tables(TRAIN_TIMESTEPS);
            let idx: Vec<usize> = (0..num_steps).map(|k| (k + 1) * TRAIN_TIMESTEPS / num_steps - 1).collect();
            (
                idx.iter().map(|&i| pa[i]).collect(),
                idx.iter().map(|&i| ps[i]).collect(),
                idx.iter().map(|&i| i as f64).collect(),
            )
        }
        ScheduleKind::EulerDiscrete => {
            let (pa, ps) = vp_linear_tables(TRAIN_TIMESTEPS);
            let (lo, hi) = (EULER_SIGMA_MIN.ln(), EULER_SIGMA_MAX.ln());
            let sigmas: Vec<f64> = (0..num_steps)
                .map(|i| {
                    if num_steps == 1 {
                        EULER_SIGMA_MIN
                    } else {
                        (lo + (hi - lo) * i as f64 / (num_steps - 1) as f64).exp()
                    }
                })
                .collect();
            let times = sigmas.iter().map(|&s| sigma_to_train_time(s, &pa, &ps)).collect();
            (vec![1.0; num_steps], sigmas, times)
        }
    };
    Ok(NoiseSchedule {
        kind,
        num_steps,
        alphas,
        sigmas,
        prediction,
        model_times,
    })
}

impl NoiseSchedule {
    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_steps {
            return Err(Error::OutOfRange {
                what: "timestep",
                index: t,
                len: self.num_steps,
            });
        }
        Ok(())
    }

    /// Native `(alpha_t, sigma_t)`.
    pub fn coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        Ok((self.alphas[t], self.sigmas[t]))
    }

    /// Native coefficients, with `None` meaning the clean endpoint `(1, 0)`.
    pub fn coeffs_or_clean(&self, t: Option<usize>) -> Result<(f64, f64)> {
        match t {
            Some(t) => self.coeffs(t),
            None => Ok((1.0, 0.0)),
        }
    }

    /// Scale applied to the native latent before the denoiser sees it.
    pub fn input_scale(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(match self.kind {
            ScheduleKind::EulerDiscrete => c_in(self.sigmas[t]),
            _ => 1.0,
        })
    }

    /// VP coefficients of the denoiser input at step `t`.
    pub fn vp_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        let (a, s) = self.coeffs(t)?;
        let c = self.input_scale(t)?;
        Ok((a * c, s * c))
    }

    pub fn model_time(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.model_times[t])
    }

    /// Descending step indices for an `steps`-step sampling run.
    pub fn timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.num_steps {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {steps} steps from a {}-step schedule",
                self.num_steps
            )));
        }
        Ok((0..steps).map(|k| (steps - k) * self.num_steps / steps - 1).collect())
    }

    /// Schedule table as JSON for cross-implementation diffing.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `1 / sqrt(sigma^2 + 1)`
pub fn c_in(sigma: f64) -> f64 {
    1.0 / (sigma * sigma + 1.0).sqrt()
}

/// Forward diffusion: `alpha_t x0 + sigma_t eps`.
pub fn add_noise(x0: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    ensure_shape(x0.shape(), eps.shape())?;
    let (a, s) = sched.coeffs(t)?;
    x0.zip_map(eps, |x, e| a * x + s * e)
}

/// `(x0, eps)` implied by a prediction of kind `kind` for VP input `x_t`.
pub fn split_prediction(pred: &Tensor, kind: Prediction, x_t: &Tensor, alpha: f64, sigma: f64) -> Result<(Tensor, Tensor)> {
    ensure_shape(x_t.shape(), pred.shape())?;
    match kind {
        Prediction::Epsilon => {
            if alpha == 0.0 {
                return Err(Error::InvalidArgument("alpha_t = 0: cannot recover x0 from epsilon".into()));
            }
            let x0 = x_t.zip_map(pred, |x, e| (x - sigma * e) / alpha)?;
            Ok((x0, pred.clone()))
        }
        Prediction::V => {
            let n = alpha * alpha + sigma * sigma;
            let x0 = x_t.zip_map(pred, |x, v| (alpha * x - sigma * v) / n)?;
            let eps = x_t.zip_map(pred, |x, v| (sigma * x + alpha * v) / n)?;
            Ok((x0, eps))
        }
        Prediction::Sample => {
            if sigma == 0.0 {
                return Err(Error::InvalidArgument("sigma_t = 0: cannot recover epsilon from x0".into()));
            }
            let eps = x_t.zip_map(pred, |x, x0| (x - alpha * x0) / sigma)?;
            Ok((pred.clone(), eps))
        }
    }
}

/// Prediction-type conversion with explicit VP coefficients.
pub fn convert_prediction_with(pred: &Tensor, from: Prediction, to: Prediction, x_t: &Tensor, alpha: f64, sigma: f64) -> Result<Tensor> {
    if from == to {
        return Err(Error::InvalidArgument(format!("conversion {from} -> {to} is a no-op")));
    }
    ensure_shape(x_t.shape(), pred.shape())?;
    match (from, to) {
        // Direct forms keep the epsilon <-> v pair to the textbook expressions.
        (Prediction::Epsilon, Prediction::V) => {
            if alpha == 0.0 {
                return Err(Error::InvalidArgument("alpha_t = 0: cannot convert epsilon to v".into()));
            }
            x_t.zip_map(pred, |x, e| {
                let x0 = (x - sigma * e) / alpha;
                alpha * e - sigma * x0
            })
        }
        (Prediction::V, Prediction::Epsilon) => {
            let n = alpha * alpha + sigma * sigma;
            x_t.zip_map(pred, |x, v| (sigma * x + alpha * v) / n)
        }
        _ => {
            let (x0, eps) = split_prediction(pred, from, x_t, alpha, sigma)?;
            match to {
                Prediction::Epsilon => Ok(eps),
                Prediction::Sample => Ok(x0),
                Prediction::V => eps.zip_map(&x0, |e, x| alpha * e - sigma * x),
            }
        }
    }
}

/// Convert a denoiser output between parameterizations at step `t`;
/// `x_t` is the denoiser input.
pub fn convert_prediction(pred: &Tensor, from: Prediction, to: Prediction, x_t: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let (a, s) = sched.vp_coeffs(t)?;
    convert_prediction_with(pred, from, to, x_t, a, s)
}

/// Scale a latent by `c_in(sigma_t) = 1/sqrt(sigma_t^2 + 1)`.
pub fn precondition_input(x: &Tensor, t: usize, sched: &NoiseSchedule, variant: PreconditionVariant) -> Result<Tensor> {
    let (_, sigma) = sched.coeffs(t)?;
    let c = c_in(sigma);
    log::debug!("precondition {variant:?}: t={t} sigma={sigma:.6} c_in={c:.6}");
    Ok(x.scale(c))
}

/// One deterministic sampler update from step `t` to `t_next` (`None` is
/// the clean endpoint). `x_t` is in native coordinates; `model_out` is the
/// denoiser's output for input `input_scale(t) * x_t`, in the schedule's
/// parameterization. The LCM update re-noises with `fresh_noise` when
/// `t_next` is not the endpoint.
pub fn sampler_step(
    model_out: &Tensor,
    x_t: &Tensor,
    t: usize,
    t_next: Option<usize>,
    sched: &NoiseSchedule,
    method: SamplerMethod,
    fresh_noise: Option<&Tensor>,
) -> Result<Tensor> {
    ensure_shape(x_t.shape(), model_out.shape())?;
    if let Some(n) = t_next {
        if n >= t {
            return Err(Error::InvalidArgument(format!("sampler must move to lower noise: {t} -> {n}")));
        }
    }
    let (a_vp, s_vp) = sched.vp_coeffs(t)?;
    let x_in = x_t.scale(sched.input_scale(t)?);
    let (x0_hat, eps_hat) = split_prediction(model_out, sched.prediction, &x_in, a_vp, s_vp)?;
    let (a_next, s_next) = sched.coeffs_or_clean(t_next)?;
    match method {
        SamplerMethod::Ddim => {
            if t_next.is_none() {
                return Ok(x0_hat);
            }
            x0_hat.zip_map(&eps_hat, |x, e| a_next * x + s_next * e)
        }
        SamplerMethod::Euler => {
            let (a, s) = sched.coeffs(t)?;
            let sigma = s / a;
            let sigma_next = s_next / a_next;
            let dt = sigma_next - sigma;
            // Variance-exploding coordinates: x_ve = x / alpha.
            let x_ve = x_t.scale(1.0 / a);
            let stepped = x_ve.zip_map(&x0_hat, |x, x0| x + dt * (x - x0) / sigma)?;
            Ok(if a_next == 1.0 { stepped } else { stepped.scale(a_next) })
        }
        SamplerMethod::Lcm => match t_next {
            None => Ok(x0_hat),
            Some(_) => {
                let z = fresh_noise
                    .ok_or_else(|| Error::InvalidArgument("lcm step to a noisy level needs fresh noise".into()))?;
                ensure_shape(x0_hat.shape(), z.shape())?;
                x0_hat.zip_map(z, |x, e| a_next * x + s_next * e)
            }
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepSamplerConfig {
    pub mean: f64,
    pub std: f64,
    pub num_steps: usize,
}

impl TimestepSamplerConfig {
    pub fn new(mean: f64, std: f64, num_steps: usize) -> Result<Self> {
        let cfg = Self { mean, std, num_steps };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0) {
            return Err(Error::InvalidArgument(format!("logit-normal std must be > 0, got {}", self.std)));
        }
        if self.num_steps == 0 {
            return Err(Error::InvalidArgument("logit-normal num_steps must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for TimestepSamplerConfig {
    fn default() -> Self {
        Self {
            mean: -1.0,
            std: 1.0,
            num_steps: TRAIN_TIMESTEPS,
        }
    }
}

/// Draw a step index whose position on the grid is logit-normal:
/// `u ~ N(m, s)`, index `= round(sigmoid(u) * n)` clipped to `[0, n-1]`.
pub fn sample_logit_normal_t<R: Rng + ?Sized>(cfg: &TimestepSamplerConfig, rng: &mut R) -> usize {
    let z: f64 = rng.sample(StandardNormal);
    let u = cfg.mean + cfg.std * z;
    let p = 1.0 / (1.0 + (-u).exp());
    let idx = (p * cfg.num_steps as f64 + 0.5).floor();
    (idx.max(0.0) as usize).min(cfg.num_steps - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vp() -> NoiseSchedule {
        make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon).unwrap()
    }

    #[test]
    fn vp_identity_and_monotonicity() {
        let s = vp();
        for t in 0..1000 {
            let (a, sg) = s.coeffs(t).unwrap();
            assert!((a * a + sg * sg - 1.0).abs() < 1e-6);
            assert!(a > 0.0 && sg > 0.0);
            if t > 0 {
                assert!(a <= s.alphas[t - 1] && sg >= s.sigmas[t - 1]);
            }
        }
    }

    #[test]
    fn euler_student_schedule_has_eight_increasing_levels() {
        let s = make_schedule(ScheduleKind::EulerDiscrete, 8, Prediction::V).unwrap();
        assert_eq!(s.sigmas.len(), 8);
        assert!((s.sigmas[0] - EULER_SIGMA_MIN).abs() < 1e-12);
        assert!((s.sigmas[7] - EULER_SIGMA_MAX).abs() < 1e-9);
        assert!(s.sigmas.windows(2).all(|w| w[1] > w[0]));
        assert!(s.model_times.windows(2).all(|w| w[1] > w[0]));
        assert!(s.alphas.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn lcm_uniform_five_steps_on_parent_grid() {
        let s = make_schedule(ScheduleKind::LcmUniform, 5, Prediction::Epsilon).unwrap();
        assert_eq!(s.model_times, vec![199.0, 399.0, 599.0, 799.0, 999.0]);
        let parent = vp();
        assert_eq!(s.alphas[2], parent.alphas[599]);
        assert_eq!(s.timesteps(5).unwrap(), vec![4, 3, 2, 1, 0]);
    }

    #[test]
    fn make_schedule_rejects_bad_input() {
        assert!(make_schedule(ScheduleKind::VpLinear, 0, Prediction::Epsilon).is_err());
        assert!("cosine".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn add_noise_examples() {
        let x0 = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let eps = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        let mut s = vp();
        s.alphas[3] = 0.8;
        s.sigmas[3] = 0.6;
        let out = add_noise(&x0, &eps, 3, &s).unwrap();
        assert!((out.data()[0] - 1.4).abs() < 1e-12 && (out.data()[1] - 1.0).abs() < 1e-12);
        s.alphas[4] = 1.0;
        s.sigmas[4] = 0.0;
        assert_eq!(add_noise(&x0, &eps, 4, &s).unwrap(), x0);
        let zero = Tensor::zeros(&[2]);
        assert_eq!(add_noise(&zero, &eps, 10, &s).unwrap(), eps.scale(s.sigmas[10]));
        assert!(add_noise(&x0, &eps, 1000, &s).is_err());
        assert!(add_noise(&x0, &Tensor::zeros(&[3]), 0, &s).is_err());
    }

    #[test]
    fn convert_examples() {
        let e = Tensor::new(&[1], vec![1.0]).unwrap();
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let v = convert_prediction_with(&e, Prediction::Epsilon, Prediction::V, &x, 0.8, 0.6).unwrap();
        assert!((v.data()[0] - 0.5).abs() < 1e-12);
        let v1 = convert_prediction_with(&e, Prediction::Epsilon, Prediction::V, &x, 1.0, 0.0).unwrap();
        assert_eq!(v1, e);
        assert!(convert_prediction_with(&e, Prediction::Epsilon, Prediction::V, &x, 0.0, 1.0).is_err());
        assert!(convert_prediction_with(&e, Prediction::V, Prediction::V, &x, 0.8, 0.6).is_err());
    }

    #[test]
    fn precondition_examples() {
        let mut s = make_schedule(ScheduleKind::EulerDiscrete, 8, Prediction::V).unwrap();
        let x = Tensor::new(&[2], vec![2.0, -2.0]).unwrap();
        s.sigmas[0] = 0.0;
        assert_eq!(precondition_input(&x, 0, &s, PreconditionVariant::Student).unwrap(), x);
        s.sigmas[1] = 1.0;
        let y = precondition_input(&x, 1, &s, PreconditionVariant::Student).unwrap();
        assert!((y.data()[0] - 2.0 * std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        s.sigmas[2] = 3f64.sqrt();
        let y = precondition_input(&x, 2, &s, PreconditionVariant::Discriminator).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ddim_exact_noise_recovers_x0() {
        let s = vp();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x0 = Tensor::randn(&[4, 2, 2], &mut rng);
            let eps = Tensor::randn(&[4, 2, 2], &mut rng);
            let t = rand::Rng::random_range(&mut rng, 0..1000);
            let xt = add_noise(&x0, &eps, t, &s).unwrap();
            let out = sampler_step(&eps, &xt, t, None, &s, SamplerMethod::Ddim, None).unwrap();
            assert!(out.sub(&x0).unwrap().max_abs() < 1e-6);
        }
    }

    #[test]
    fn euler_zero_step_is_identity() {
        let mut s = make_schedule(ScheduleKind::EulerDiscrete, 8, Prediction::Epsilon).unwrap();
        s.sigmas[3] = s.sigmas[4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[6], &mut rng);
        let out = Tensor::randn(&[6], &mut rng);
        assert_eq!(sampler_step(&out, &x, 4, Some(3), &s, SamplerMethod::Euler, None).unwrap(), x);
    }

    #[test]
    fn lcm_single_step_linear_denoiser() {
        // Toy epsilon model eps_hat = 0.5 * x_in; from pure noise at the last
        // lcm level, x0_hat = (x - sigma * 0.5 x) / alpha.
        let s = make_schedule(ScheduleKind::LcmUniform, 5, Prediction::Epsilon).unwrap();
        let x = Tensor::new(&[3], vec![1.0, -0.5, 2.0]).unwrap();
        let out = sampler_step(&x.scale(0.5), &x, 4, None, &s, SamplerMethod::Lcm, None).unwrap();
        let (a, sg) = (s.alphas[4], s.sigmas[4]);
        for (o, xi) in out.data().iter().zip(x.data()) {
            assert!((o - (xi - sg * 0.5 * xi) / a).abs() < 1e-12);
        }
        assert!(sampler_step(&x, &x, 4, Some(2), &s, SamplerMethod::Lcm, None).is_err());
        assert!(sampler_step(&x, &x, 2, Some(4), &s, SamplerMethod::Lcm, Some(&x)).is_err());
        assert!("heun".parse::<SamplerMethod>().is_err());
    }

    #[test]
    fn logit_normal_medians() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &(m, want) in &[(-1.0, 269.0), (0.0, 500.0)] {
            let cfg = TimestepSamplerConfig::new(m, 1.0, 1000).unwrap();
            let mut v: Vec<usize> = (0..100_000).map(|_| sample_logit_normal_t(&cfg, &mut rng)).collect();
            v.sort_unstable();
            let median = v[50_000] as f64;
            assert!((median - want).abs() <= 10.0, "m={m}: median {median}");
        }
        let cfg = TimestepSamplerConfig::new(0.0, 1e-6, 1000).unwrap();
        assert!((0..1000).all(|_| sample_logit_normal_t(&cfg, &mut rng) == 500));
        assert!(TimestepSamplerConfig::new(0.0, 0.0, 1000).is_err());
    }

    #[test]
    fn logit_normal_is_reproducible() {
        let cfg = TimestepSamplerConfig::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64).map(|_| sample_logit_normal_t(&cfg, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn schedule_json_roundtrip() {
        let s = make_schedule(ScheduleKind::EulerDiscrete, 8, Prediction::V).unwrap();
        let back: NoiseSchedule = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(s.to_json().unwrap().contains("\"euler-discrete\""));
    }

    proptest! {
        #[test]
        fn add_noise_is_linear(seed in 0u64..1000, t in 0usize..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let s = vp();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x1 = Tensor::randn(&[5], &mut rng);
            let x2 = Tensor::randn(&[5], &mut rng);
            let e1 = Tensor::randn(&[5], &mut rng);
            let e2 = Tensor::randn(&[5], &mut rng);
            let comb = |p: &Tensor, q: &Tensor| p.scale(a).add(&q.scale(b)).unwrap();
            let lhs = add_noise(&comb(&x1, &x2), &comb(&e1, &e2), t, &s).unwrap();
            let rhs = comb(&add_noise(&x1, &e1, t, &s).unwrap(), &add_noise(&x2, &e2, t, &s).unwrap());
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-9);
        }

        #[test]
        fn eps_v_roundtrip(seed in 0u64..1000, t in 0usize..1000) {
            let s = vp();
            prop_assume!(s.alphas[t] > 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps = Tensor::randn(&[8], &mut rng);
            let xt = Tensor::randn(&[8], &mut rng);
            let v = convert_prediction(&eps, Prediction::Epsilon, Prediction::V, &xt, t, &s).unwrap();
            let back = convert_prediction(&v, Prediction::V, Prediction::Epsilon, &xt, t, &s).unwrap();
            prop_assert!(back.sub(&eps).unwrap().max_abs() < 1e-6);
            let x0 = convert_prediction(&v, Prediction::V, Prediction::Sample, &xt, t, &s).unwrap();
            let v2 = convert_prediction(&x0, Prediction::Sample, Prediction::V, &xt, t, &s).unwrap();
            prop_assert!(v2.sub(&v).unwrap().max_abs() < 1e-6);
        }
    }
}
