//! Multimodal classifier-free guidance: the three-pass combiner used by the
//! base model and the single-pass path of guidance-distilled models.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionContext, Conditioning, Denoiser, LayerKv};
use crate::error::{ensure_shape, Error, Result};
use crate::schedules::{sampler_step, NoiseSchedule, SamplerMethod, ScheduleKind};
use crate::tensor::Tensor;

/// Training ranges of the guidance-distilled models.
pub const IMAGE_SCALE_RANGE: (f64, f64) = (1.0, 3.0);
pub const TEXT_SCALE_RANGE: (f64, f64) = (2.0, 14.0);

/// Denoiser evaluations, one per batch item per pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeCounter {
    pub denoiser_calls: usize,
    pub steps: usize,
}

impl NfeCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Metrics record under the `nfe.*` keys.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "nfe.denoiser_calls": self.denoiser_calls, "nfe.steps": self.steps })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceMode {
    /// Three passes per step combined by [`cfg_combine`].
    Multipass,
    /// One pass per step with the scales fed to the model.
    Distilled,
}

impl GuidanceMode {
    pub fn passes(self) -> usize {
        match self {
            Self::Multipass => 3,
            Self::Distilled => 1,
        }
    }
}

/// `eps_u + s_I (eps_i - eps_u) + s_T (eps_f - eps_i)`, evaluated as
/// `(1 - s_I) eps_u + (s_I - s_T) eps_i + s_T eps_f` so the identities
/// at `(1, 1)`, `(1, 0)` and `(0, 0)` hold exactly.
pub fn cfg_combine(eps_uncond: &Tensor, eps_img: &Tensor, eps_full: &Tensor, s_i: f64, s_t: f64) -> Result<Tensor> {
    ensure_shape(eps_uncond.shape(), eps_img.shape())?;
    ensure_shape(eps_uncond.shape(), eps_full.shape())?;
    let (a, b, c) = (1.0 - s_i, s_i - s_t, s_t);
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_img.data())
        .zip(eps_full.data())
        .map(|((u, i), f)| a * u + b * i + c * f)
        .collect();
    Tensor::new(eps_uncond.shape(), data)
}

/// [`cfg_combine`] with one `(s_I, s_T)` pair per batch item.
pub fn cfg_combine_batch(eps_uncond: &Tensor, eps_img: &Tensor, eps_full: &Tensor, s_i: &[f64], s_t: &[f64]) -> Result<Tensor> {
    ensure_shape(eps_uncond.shape(), eps_img.shape())?;
    ensure_shape(eps_uncond.shape(), eps_full.shape())?;
    let b = eps_uncond.batch();
    if s_i.len() != b || s_t.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{} image and {} text scales for batch {b}",
            s_i.len(),
            s_t.len()
        )));
    }
    let per = eps_uncond.per_item();
    let mut out = Vec::with_capacity(eps_uncond.len());
    for k in 0..b {
        let (a, bb, c) = (1.0 - s_i[k], s_i[k] - s_t[k], s_t[k]);
        let r = k * per..(k + 1) * per;
        for ((u, i), f) in eps_uncond.data()[r.clone()].iter().zip(&eps_img.data()[r.clone()]).zip(&eps_full.data()[r]) {
            out.push(a * u + bb * i + c * f);
        }
    }
    Tensor::new(eps_uncond.shape(), out)
}

fn scales_for(cond: &Conditioning, batch: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = cond
        .scales
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("guided sampling needs guidance scales".into()))?;
    let widen = |v: &[f64]| -> Result<Vec<f64>> {
        match v.len() {
            1 => Ok(vec![v[0]; batch]),
            n if n == batch => Ok(v.to_vec()),
            n => Err(Error::InvalidArgument(format!("{n} guidance scales for batch {batch}"))),
        }
    };
    Ok((widen(&s.image)?, widen(&s.text)?))
}

fn check_mode(model: &Denoiser, mode: GuidanceMode) -> Result<()> {
    match (mode, model.cfg.guidance_conditioned) {
        (GuidanceMode::Multipass, true) => Err(Error::PipelineMismatch(
            "three-pass guidance needs a model without guidance conditioning".into(),
        )),
        (GuidanceMode::Distilled, false) => Err(Error::PipelineMismatch(
            "single-pass guidance needs a guidance-conditioned model".into(),
        )),
        _ => Ok(()),
    }
}

fn warn_extrapolation(s_i: &[f64], s_t: &[f64]) {
    let out = |v: &f64, (lo, hi): (f64, f64)| *v < lo || *v > hi;
    if s_i.iter().any(|v| out(v, IMAGE_SCALE_RANGE)) || s_t.iter().any(|v| out(v, TEXT_SCALE_RANGE)) {
        log::warn!("guidance scales outside the training ranges: s_I={s_i:?} s_T={s_t:?}");
    }
}

/// One guided model output at step `t` for the native latent `x`.
///
/// `ctx` holds one attention context per pass (or is empty for plain
/// self-attention). With `capture`, the keys and values of every pass are
/// returned, in pass order.
#[allow(clippy::too_many_arguments)]
pub fn guided_output(
    model: &Denoiser,
    mode: GuidanceMode,
    x: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    cond: &Conditioning,
    ctx: &[AttentionContext],
    capture: bool,
    nfe: &mut NfeCounter,
) -> Result<(Tensor, Option<Vec<LayerKv>>)> {
    check_mode(model, mode)?;
    if model.prediction() != sched.prediction {
        return Err(Error::ParameterizationMismatch(format!(
            "model predicts {} but the schedule expects {}",
            model.prediction(),
            sched.prediction
        )));
    }
    if !ctx.is_empty() && ctx.len() != mode.passes() {
        return Err(Error::InvalidArgument(format!(
            "{} attention contexts for {} passes",
            ctx.len(),
            mode.passes()
        )));
    }
    let b = x.dims4()?.0;
    let x_in = x.scale(sched.input_scale(t)?);
    let time = [sched.model_time(t)?];
    let (s_i, s_t) = scales_for(cond, b)?;
    let self_ctx = AttentionContext::self_attention();
    let ctx_for = |pass: usize| ctx.get(pass).unwrap_or(&self_ctx);
    let mut captured = capture.then(Vec::new);
    let mut call = |c: &Conditioning, pass: usize| -> Result<Tensor> {
        nfe.denoiser_calls += b;
        if let Some(store) = captured.as_mut() {
            let (out, kv) = model.predict_capture(&x_in, &time, c)?;
            store.push(kv);
            Ok(out)
        } else {
            model.predict(&x_in, &time, c, ctx_for(pass))
        }
    };
    let out = match mode {
        GuidanceMode::Multipass => {
            let plain = Conditioning { scales: None, ..cond.clone() };
            let uncond = call(&Conditioning::null(), 0)?;
            let img = call(&plain.without_text(), 1)?;
            let full = call(&plain, 2)?;
            cfg_combine_batch(&uncond, &img, &full, &s_i, &s_t)?
        }
        GuidanceMode::Distilled => {
            warn_extrapolation(&s_i, &s_t);
            let c = cond.clone().with_scales(s_i, s_t);
            call(&c, 0)?
        }
    };
    Ok((out, captured))
}

/// The sampler matching a schedule kind.
pub fn default_method(sched: &NoiseSchedule) -> SamplerMethod {
    match sched.kind {
        ScheduleKind::VpLinear => SamplerMethod::Ddim,
        ScheduleKind::LcmUniform => SamplerMethod::Lcm,
        ScheduleKind::EulerDiscrete => SamplerMethod::Euler,
    }
}

/// Run `steps` guided sampler steps from the native latent `x_t` at the
/// schedule's noisiest sampled level down to the clean endpoint. Fresh
/// noise for LCM re-noising is drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn sample<R: Rng + ?Sized>(
    model: &Denoiser,
    mode: GuidanceMode,
    x_t: &Tensor,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
    nfe: &mut NfeCounter,
) -> Result<Tensor> {
    let ts = sched.timesteps(steps)?;
    let method = default_method(sched);
    let mut x = x_t.clone();
    for (i, &t) in ts.iter().enumerate() {
        let next = ts.get(i + 1).copied();
        let (out, _) = guided_output(model, mode, &x, t, sched, cond, &[], false, nfe)?;
        let fresh = match (method, next) {
            (SamplerMethod::Lcm, Some(_)) => Some(Tensor::randn(x.shape(), rng)),
            _ => None,
        };
        x = sampler_step(&out, &x, t, next, sched, method, fresh.as_ref())?;
        nfe.steps += 1;
    }
    Ok(x)
}

/// Three-pass guided editing with a base model.
pub fn edit_multipass<R: Rng + ?Sized>(
    model: &Denoiser,
    x_t: &Tensor,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
    nfe: &mut NfeCounter,
) -> Result<Tensor> {
    sample(model, GuidanceMode::Multipass, x_t, cond, sched, steps, rng, nfe)
}

/// Single-pass editing with a guidance-distilled model.
pub fn edit_distilled<R: Rng + ?Sized>(
    model: &Denoiser,
    x_t: &Tensor,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
    nfe: &mut NfeCounter,
) -> Result<Tensor> {
    sample(model, GuidanceMode::Distilled, x_t, cond, sched, steps, rng, nfe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{build_denoiser, DenoiserConfig};
    use crate::schedules::{make_schedule, Prediction};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(guided: bool) -> Denoiser {
        let cfg = DenoiserConfig {
            base_channels: 8,
            embed_dim: 16,
            guidance_conditioned: guided,
            ..DenoiserConfig::toy()
        };
        build_denoiser(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn cond(rng: &mut ChaCha8Rng) -> Conditioning {
        Conditioning::new(Some(Tensor::randn(&[1, 4, 8, 8], rng)), Some(Tensor::randn(&[1, 4, 32], rng)))
    }

    #[test]
    fn combine_identities_and_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let u = Tensor::randn(&[2, 4, 3, 3], &mut rng);
            let i = Tensor::randn(&[2, 4, 3, 3], &mut rng);
            let f = Tensor::randn(&[2, 4, 3, 3], &mut rng);
            assert_eq!(cfg_combine(&u, &i, &f, 1.0, 1.0).unwrap(), f);
            assert_eq!(cfg_combine(&u, &i, &f, 1.0, 0.0).unwrap(), i);
            assert_eq!(cfg_combine(&u, &i, &f, 0.0, 0.0).unwrap(), u);
        }
        let s = |v| Tensor::scalar(v);
        assert_eq!(cfg_combine(&s(0.0), &s(1.0), &s(3.0), 2.0, 5.0).unwrap().data()[0], 12.0);
        assert!(cfg_combine(&s(0.0), &Tensor::zeros(&[2]), &s(3.0), 2.0, 5.0).is_err());
    }

    #[test]
    fn batch_combine_matches_scalar_combine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = Tensor::randn(&[2, 3], &mut rng);
        let i = Tensor::randn(&[2, 3], &mut rng);
        let f = Tensor::randn(&[2, 3], &mut rng);
        let out = cfg_combine_batch(&u, &i, &f, &[1.5, 2.0], &[7.0, 3.0]).unwrap();
        for (k, (si, st)) in [(1.5, 7.0), (2.0, 3.0)].into_iter().enumerate() {
            let want = cfg_combine(&u.batch_item(k).unwrap(), &i.batch_item(k).unwrap(), &f.batch_item(k).unwrap(), si, st).unwrap();
            assert_eq!(out.batch_item(k).unwrap(), want);
        }
    }

    #[test]
    fn nfe_ladder() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cond(&mut rng).with_scales(vec![1.5], vec![7.5]);
        let x = Tensor::randn(&[1, 4, 8, 8], &mut rng);
        let vp = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon).unwrap();
        let mut nfe = NfeCounter::new();
        edit_multipass(&tiny(false), &x, &c, &vp, 10, &mut rng, &mut nfe).unwrap();
        assert_eq!(nfe, NfeCounter { denoiser_calls: 30, steps: 10 });
        let mut nfe = NfeCounter::new();
        edit_distilled(&tiny(true), &x, &c, &vp, 10, &mut rng, &mut nfe).unwrap();
        assert_eq!(nfe.denoiser_calls, 10);
        let mut nfe = NfeCounter::new();
        edit_distilled(&tiny(true), &x, &c, &vp, 1, &mut rng, &mut nfe).unwrap();
        assert_eq!(nfe.denoiser_calls, 1);
    }

    #[test]
    fn pipeline_mixups_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cond(&mut rng).with_scales(vec![1.5], vec![7.5]);
        let x = Tensor::randn(&[1, 4, 8, 8], &mut rng);
        let vp = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon).unwrap();
        let mut nfe = NfeCounter::new();
        let e = edit_multipass(&tiny(true), &x, &c, &vp, 2, &mut rng, &mut nfe).unwrap_err();
        assert_eq!(e.kind(), "pipeline_mismatch");
        let e = edit_distilled(&tiny(false), &x, &c, &vp, 2, &mut rng, &mut nfe).unwrap_err();
        assert_eq!(e.kind(), "pipeline_mismatch");
        let v = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::V).unwrap();
        let e = edit_multipass(&tiny(false), &x, &c, &v, 2, &mut rng, &mut nfe).unwrap_err();
        assert_eq!(e.kind(), "parameterization_mismatch");
    }

    #[test]
    fn unit_scales_follow_conditional_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = cond(&mut rng);
        let x = Tensor::randn(&[1, 4, 8, 8], &mut rng);
        let vp = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon).unwrap();
        let m = tiny(false);
        let mut nfe = NfeCounter::new();
        let guided = edit_multipass(&m, &x, &base.clone().with_scales(vec![1.0], vec![1.0]), &vp, 4, &mut rng, &mut nfe).unwrap();
        let mut y = x.clone();
        let ts = vp.timesteps(4).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let eps = m.predict(&y, &[t as f64], &base, &AttentionContext::self_attention()).unwrap();
            y = sampler_step(&eps, &y, t, ts.get(i + 1).copied(), &vp, SamplerMethod::Ddim, None).unwrap();
        }
        assert!(guided.sub(&y).unwrap().max_abs() < 1e-5);
    }

    #[test]
    fn one_step_matches_hand_ddim_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = cond(&mut rng);
        let x = Tensor::randn(&[1, 4, 8, 8], &mut rng);
        let vp = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon).unwrap();
        let m = tiny(false);
        let (si, st) = (1.5, 4.0);
        let mut nfe = NfeCounter::new();
        let out = edit_multipass(&m, &x, &c.clone().with_scales(vec![si], vec![st]), &vp, 1, &mut rng, &mut nfe).unwrap();
        let ctx = AttentionContext::self_attention();
        let e_u = m.predict(&x, &[999.0], &Conditioning::null(), &ctx).unwrap();
        let e_i = m.predict(&x, &[999.0], &c.without_text(), &ctx).unwrap();
        let e_f = m.predict(&x, &[999.0], &c, &ctx).unwrap();
        let (a, s) = (vp.alphas[999], vp.sigmas[999]);
        for k in 0..x.len() {
            let eps = e_u.data()[k] + si * (e_i.data()[k] - e_u.data()[k]) + st * (e_f.data()[k] - e_i.data()[k]);
            let want = (x.data()[k] - s * eps) / a;
            assert!((out.data()[k] - want).abs() < 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn distilled_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = cond(&mut rng).with_scales(vec![2.0], vec![9.0]);
        let x = Tensor::randn(&[1, 4, 8, 8], &mut rng);
        let lcm = make_schedule(ScheduleKind::LcmUniform, 5, Prediction::Epsilon).unwrap();
        let m = tiny(true);
        let run = || edit_distilled(&m, &x, &c, &lcm, 5, &mut ChaCha8Rng::seed_from_u64(8), &mut NfeCounter::new()).unwrap();
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn combine_is_linear(seed in 0u64..500, si in -4.0f64..4.0, st in -4.0f64..16.0, a in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<Tensor> = (0..6).map(|_| Tensor::randn(&[7], &mut rng)).collect();
            let lhs = cfg_combine(
                &t[0].scale(a).add(&t[3]).unwrap(),
                &t[1].scale(a).add(&t[4]).unwrap(),
                &t[2].scale(a).add(&t[5]).unwrap(),
                si, st,
            ).unwrap();
            let rhs = cfg_combine(&t[0], &t[1], &t[2], si, st).unwrap().scale(a)
                .add(&cfg_combine(&t[3], &t[4], &t[5], si, st).unwrap()).unwrap();
            prop_assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-9);
        }
    }
}
