use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, combine_per_item, model_graph, IterRecord, LatentDataset, Observer};
use crate::autograd::Tape;
use crate::denoiser::{Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::schedules::{make_schedule, Prediction, ScheduleKind, TRAIN_TIMESTEPS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    /// Per-item probabilities of dropping only the text, only the image,
    /// or both conditions.
    pub drop_text: f64,
    pub drop_image: f64,
    pub drop_both: f64,
    /// Cosine-decay the learning rate to zero over the run.
    pub lr_decay: bool,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            iters: 3000,
            batch: 16,
            lr: 1e-3,
            warmup: 100,
            drop_text: 0.1,
            drop_image: 0.1,
            drop_both: 0.1,
            lr_decay: false,
        }
    }
}

fn drop_conditions<R: Rng + ?Sized>(cond: &mut Conditioning, cfg: &BaseTrainConfig, rng: &mut R) {
    let b = cond.image.as_ref().map_or(0, Tensor::batch);
    for i in 0..b {
        let u: f64 = rng.random();
        let (text, image) = if u < cfg.drop_text {
            (true, false)
        } else if u < cfg.drop_text + cfg.drop_image {
            (false, true)
        } else if u < cfg.drop_text + cfg.drop_image + cfg.drop_both {
            (true, true)
        } else {
            (false, false)
        };
        let zero = |t: &mut Option<Tensor>| {
            if let Some(t) = t {
                let per = t.per_item();
                t.data_mut()[i * per..(i + 1) * per].iter_mut().for_each(|v| *v = 0.0);
            }
        };
        if text {
            zero(&mut cond.text);
        }
        if image {
            zero(&mut cond.image);
        }
    }
}

/// Train an editing denoiser on the 1000-step VP schedule with
/// conditioning dropout, so one model provides all three guidance passes.
pub fn train_base<R: Rng + ?Sized>(
    model: &mut Denoiser,
    data: &LatentDataset,
    cfg: &BaseTrainConfig,
    rng: &mut R,
    on_iter: Observer<'_>,
) -> Result<Vec<IterRecord>> {
    if model.cfg.guidance_conditioned {
        return Err(Error::PipelineMismatch("the base model is not guidance-conditioned".into()));
    }
    if cfg.batch == 0 || cfg.lr <= 0.0 {
        return Err(Error::InvalidArgument("batch and lr must be positive".into()));
    }
    let sched = make_schedule(ScheduleKind::VpLinear, TRAIN_TIMESTEPS, model.prediction())?;
    let mut opt = Adam::new(&model.params, cfg.lr).with_warmup(cfg.warmup);
    if cfg.lr_decay {
        opt = opt.with_cosine_decay((cfg.iters as u64).saturating_sub(cfg.warmup));
    }
    let mut log = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let (x0, mut cond) = data.sample(cfg.batch, rng)?;
        drop_conditions(&mut cond, cfg, rng);
        let ts: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..TRAIN_TIMESTEPS)).collect();
        let eps = Tensor::randn(x0.shape(), rng);
        let a: Vec<f64> = ts.iter().map(|&t| sched.alphas[t]).collect();
        let s: Vec<f64> = ts.iter().map(|&t| sched.sigmas[t]).collect();
        let x_t = combine_per_item(&a, &x0, &s, &eps)?;
        let target = match model.prediction() {
            Prediction::Epsilon => eps,
            Prediction::Sample => x0,
            Prediction::V => {
                let neg: Vec<f64> = s.iter().map(|v| -v).collect();
                combine_per_item(&a, &eps, &neg, &x0)?
            }
        };
        let times: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let out = model_graph(model, &mut tape, &p, &x_t, &times, &cond)?;
        let tv = tape.constant(target);
        let loss = tape.mse(out, tv)?;
        let l = check_finite("train-base", it, tape.value(loss).data()[0])?;
        let g = tape.backward(loss)?;
        opt.update(&mut model.params, &p.grads(&g))?;
        let rec = IterRecord::total(it, l);
        on_iter(&rec);
        log.push(rec);
    }
    Ok(log)
}
