use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, combine_per_item, model_eval, model_graph, uniform_in, IterRecord, LatentDataset, Observer};
use crate::autograd::Tape;
use crate::denoiser::{build_denoiser, Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::{cfg_combine_batch, IMAGE_SCALE_RANGE, TEXT_SCALE_RANGE};
use crate::nn::Adam;
use crate::schedules::{convert_prediction_with, make_schedule, Prediction, ScheduleKind, TRAIN_TIMESTEPS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceDistillConfig {
    pub lambda: f64,
    pub lr: f64,
    pub warmup: u64,
    pub iters: usize,
    pub batch: usize,
    pub s_i_range: (f64, f64),
    pub s_t_range: (f64, f64),
    /// Half-open range of training timesteps.
    pub t_range: (usize, usize),
    /// Cosine-decay the learning rate to zero over the run.
    pub lr_decay: bool,
}

impl Default for GuidanceDistillConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr: 3e-4,
            warmup: 100,
            iters: 2000,
            batch: 8,
            s_i_range: IMAGE_SCALE_RANGE,
            s_t_range: TEXT_SCALE_RANGE,
            t_range: (0, TRAIN_TIMESTEPS),
            lr_decay: false,
        }
    }
}

impl GuidanceDistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.lambda < 0.0 {
            return Err(Error::InvalidArgument("lr and batch must be positive, lambda non-negative".into()));
        }
        if self.t_range.0 >= self.t_range.1 || self.t_range.1 > TRAIN_TIMESTEPS {
            return Err(Error::InvalidArgument(format!("bad t_range {:?}", self.t_range)));
        }
        if self.s_i_range.0 > self.s_i_range.1 || self.s_t_range.0 > self.s_t_range.1 {
            return Err(Error::InvalidArgument("guidance scale ranges must be ordered".into()));
        }
        Ok(())
    }
}

/// Guidance-conditioned copy of `teacher` with inert guidance pathways.
pub fn init_guided_student(teacher: &Denoiser) -> Result<Denoiser> {
    if teacher.cfg.guidance_conditioned {
        return Err(Error::PipelineMismatch("teacher is already guidance-conditioned".into()));
    }
    let mut cfg = teacher.cfg.clone();
    cfg.guidance_conditioned = true;
    let mut student = build_denoiser(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    for (name, t) in teacher.params.iter() {
        let dst = student
            .params
            .by_name_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("student lacks {name}")))?;
        *dst = t.clone();
    }
    for (name, t) in student.params.iter_mut() {
        if name.contains(".guide_") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(student)
}

/// Copy of `teacher` whose output is read as a v-prediction.
pub fn init_v_student(teacher: &Denoiser) -> Result<Denoiser> {
    if teacher.prediction() != Prediction::Epsilon {
        return Err(Error::ParameterizationMismatch("v finetuning starts from an epsilon model".into()));
    }
    let mut s = teacher.clone();
    s.cfg.prediction = Prediction::V;
    Ok(s)
}

/// Three-pass guided teacher output for per-item times and scales.
pub fn cfg_target(teacher: &Denoiser, x_t: &Tensor, times: &[f64], cond: &Conditioning) -> Result<Tensor> {
    let scales = cond
        .scales
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("guidance target needs scales".into()))?;
    let plain = Conditioning {
        scales: None,
        ..cond.clone()
    };
    let u = model_eval(teacher, x_t, times, &Conditioning::null())?;
    let i = model_eval(teacher, x_t, times, &plain.without_text())?;
    let f = model_eval(teacher, x_t, times, &plain)?;
    cfg_combine_batch(&u, &i, &f, &scales.image, &scales.text)
}

/// Fixed inputs and targets for tracking a student across training.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub x_in: Tensor,
    pub times: Vec<f64>,
    pub cond: Conditioning,
    pub target: Tensor,
}

pub type GuidanceProbe = Probe;

/// A probe of `n` items with the three-pass target. `scales` fixes
/// `(s_I, s_T)` for every item; otherwise they are drawn from the
/// training ranges.
pub fn guidance_probe(teacher: &Denoiser, data: &LatentDataset, n: usize, seed: u64, scales: Option<(f64, f64)>) -> Result<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..n).map(|i| i % data.len()).collect();
    let (x0, cond) = data.batch(&idx)?;
    let sched = make_schedule(ScheduleKind::VpLinear, TRAIN_TIMESTEPS, Prediction::Epsilon)?;
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(0..TRAIN_TIMESTEPS)).collect();
    let (si, st) = match scales {
        Some((a, b)) => (vec![a; n], vec![b; n]),
        None => (uniform_in(&mut rng, IMAGE_SCALE_RANGE, n), uniform_in(&mut rng, TEXT_SCALE_RANGE, n)),
    };
    let eps = Tensor::randn(x0.shape(), &mut rng);
    let a: Vec<f64> = ts.iter().map(|&t| sched.alphas[t]).collect();
    let s: Vec<f64> = ts.iter().map(|&t| sched.sigmas[t]).collect();
    let x_t = combine_per_item(&a, &x0, &s, &eps)?;
    let times: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let cond = cond.with_scales(si, st);
    let target = cfg_target(teacher, &x_t, &times, &cond)?;
    Ok(Probe {
        x_in: x_t,
        times,
        cond,
        target,
    })
}

pub fn probe_mse(model: &Denoiser, probe: &Probe) -> Result<f64> {
    model_eval(model, &probe.x_in, &probe.times, &probe.cond)?.mse(&probe.target)
}

fn check_pair(teacher: &Denoiser, student: &Denoiser) -> Result<()> {
    if teacher.cfg.guidance_conditioned || !student.cfg.guidance_conditioned {
        return Err(Error::PipelineMismatch(
            "guidance distillation needs a plain teacher and a guidance-conditioned student".into(),
        ));
    }
    if teacher.prediction() != student.prediction() {
        return Err(Error::ParameterizationMismatch(format!(
            "teacher predicts {}, student {}",
            teacher.prediction(),
            student.prediction()
        )));
    }
    Ok(())
}

/// Multimodal guidance distillation: the student learns the three-pass
/// guided output in one pass with the scales as inputs.
pub fn train_guidance_distill<R: Rng + ?Sized>(
    teacher: &Denoiser,
    student: &mut Denoiser,
    data: &LatentDataset,
    cfg: &GuidanceDistillConfig,
    rng: &mut R,
    on_iter: Observer<'_>,
) -> Result<Vec<IterRecord>> {
    check_pair(teacher, student)?;
    cfg.validate()?;
    let sched = make_schedule(ScheduleKind::VpLinear, TRAIN_TIMESTEPS, teacher.prediction())?;
    let mut opt = Adam::new(&student.params, cfg.lr).with_warmup(cfg.warmup);
    if cfg.lr_decay {
        opt = opt.with_cosine_decay((cfg.iters as u64).saturating_sub(cfg.warmup));
    }
    let mut log = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let b = cfg.batch;
        let (x0, cond) = data.sample(b, rng)?;
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(cfg.t_range.0..cfg.t_range.1)).collect();
        let si = uniform_in(rng, cfg.s_i_range, b);
        let st = uniform_in(rng, cfg.s_t_range, b);
        let eps = Tensor::randn(x0.shape(), rng);
        let a: Vec<f64> = ts.iter().map(|&t| sched.alphas[t]).collect();
        let s: Vec<f64> = ts.iter().map(|&t| sched.sigmas[t]).collect();
        let x_t = combine_per_item(&a, &x0, &s, &eps)?;
        let times: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let cond = cond.with_scales(si, st);
        let target = cfg_target(teacher, &x_t, &times, &cond)?;

        let mut tape = Tape::new();
        let p = student.params.bind(&mut tape, true);
        let out = model_graph(student, &mut tape, &p, &x_t, &times, &cond)?;
        let tv = tape.constant(target);
        let mse = tape.mse(out, tv)?;
        let loss = tape.scale(mse, cfg.lambda);
        let l = check_finite("distill-guidance", it, tape.value(loss).data()[0])?;
        let g = tape.backward(loss)?;
        opt.update(&mut student.params, &p.grads(&g))?;
        let rec = IterRecord::total(it, l);
        on_iter(&rec);
        log.push(rec);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VFinetuneConfig {
    pub lr: f64,
    pub warmup: u64,
    pub iters: usize,
    pub batch: usize,
    /// Noise levels are drawn uniformly from this schedule's steps.
    pub schedule: ScheduleKind,
    pub schedule_steps: usize,
    pub s_i_range: (f64, f64),
    pub s_t_range: (f64, f64),
}

impl Default for VFinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            warmup: 100,
            iters: 1000,
            batch: 8,
            schedule: ScheduleKind::EulerDiscrete,
            schedule_steps: 8,
            s_i_range: IMAGE_SCALE_RANGE,
            s_t_range: TEXT_SCALE_RANGE,
        }
    }
}

/// Per-item noise draw on `sched`: `(scaled input, times, vp alphas, vp sigmas)`.
fn noisy_input<R: Rng + ?Sized>(
    x0: &Tensor,
    sched: &crate::schedules::NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let b = x0.batch();
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..sched.num_steps)).collect();
    let eps = Tensor::randn(x0.shape(), rng);
    let mut a = Vec::with_capacity(b);
    let mut s = Vec::with_capacity(b);
    let mut times = Vec::with_capacity(b);
    for &t in &ts {
        let (av, sv) = sched.vp_coeffs(t)?;
        a.push(av);
        s.push(sv);
        times.push(sched.model_time(t)?);
    }
    Ok((combine_per_item(&a, x0, &s, &eps)?, times, a, s))
}

fn eps_to_v(eps: &Tensor, x_in: &Tensor, a: &[f64], s: &[f64]) -> Result<Tensor> {
    let parts = (0..eps.batch())
        .map(|i| convert_prediction_with(&eps.batch_item(i)?, Prediction::Epsilon, Prediction::V, &x_in.batch_item(i)?, a[i], s[i]))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
}

fn scaled_cond<R: Rng + ?Sized>(model: &Denoiser, cond: Conditioning, si: (f64, f64), st: (f64, f64), rng: &mut R) -> Conditioning {
    if model.cfg.guidance_conditioned {
        let b = cond.image.as_ref().map_or(1, Tensor::batch);
        let a = uniform_in(rng, si, b);
        let t = uniform_in(rng, st, b);
        cond.with_scales(a, t)
    } else {
        cond
    }
}

/// Probe for the v conversion: teacher epsilon outputs converted to v.
pub fn v_probe(teacher: &Denoiser, data: &LatentDataset, cfg: &VFinetuneConfig, n: usize, seed: u64) -> Result<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = make_schedule(cfg.schedule, cfg.schedule_steps, Prediction::V)?;
    let idx: Vec<usize> = (0..n).map(|i| i % data.len()).collect();
    let (x0, cond) = data.batch(&idx)?;
    let cond = scaled_cond(teacher, cond, cfg.s_i_range, cfg.s_t_range, &mut rng);
    let (x_in, times, a, s) = noisy_input(&x0, &sched, &mut rng)?;
    let eps = model_eval(teacher, &x_in, &times, &cond)?;
    let target = eps_to_v(&eps, &x_in, &a, &s)?;
    Ok(Probe {
        x_in,
        times,
        cond,
        target,
    })
}

/// Train `student` (v) to reproduce `teacher` (epsilon) converted to v.
pub fn finetune_v_prediction<R: Rng + ?Sized>(
    teacher: &Denoiser,
    student: &mut Denoiser,
    data: &LatentDataset,
    cfg: &VFinetuneConfig,
    rng: &mut R,
    on_iter: Observer<'_>,
) -> Result<Vec<IterRecord>> {
    if teacher.prediction() != Prediction::Epsilon || student.prediction() != Prediction::V {
        return Err(Error::ParameterizationMismatch(format!(
            "v finetuning needs an epsilon teacher and a v student, got {} and {}",
            teacher.prediction(),
            student.prediction()
        )));
    }
    if teacher.cfg.guidance_conditioned != student.cfg.guidance_conditioned {
        return Err(Error::PipelineMismatch("teacher and student differ in guidance conditioning".into()));
    }
    if !(cfg.lr > 0.0) || cfg.batch == 0 {
        return Err(Error::InvalidArgument("lr and batch must be positive".into()));
    }
    let sched = make_schedule(cfg.schedule, cfg.schedule_steps, Prediction::V)?;
    let mut opt = Adam::new(&student.params, cfg.lr).with_warmup(cfg.warmup);
    let mut log = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let (x0, cond) = data.sample(cfg.batch, rng)?;
        let cond = scaled_cond(teacher, cond, cfg.s_i_range, cfg.s_t_range, rng);
        let (x_in, times, a, s) = noisy_input(&x0, &sched, rng)?;
        let eps = model_eval(teacher, &x_in, &times, &cond)?;
        let target = eps_to_v(&eps, &x_in, &a, &s)?;
        let mut tape = Tape::new();
        let p = student.params.bind(&mut tape, true);
        let out = model_graph(student, &mut tape, &p, &x_in, &times, &cond)?;
        let tv = tape.constant(target);
        let loss = tape.mse(out, tv)?;
        let l = check_finite("finetune-v", it, tape.value(loss).data()[0])?;
        let g = tape.backward(loss)?;
        opt.update(&mut student.params, &p.grads(&g))?;
        let rec = IterRecord::total(it, l);
        on_iter(&rec);
        log.push(rec);
    }
    Ok(log)
}
