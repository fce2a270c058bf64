//! Training stages: the base editing model, multimodal guidance
//! distillation, v-prediction finetuning and adversarial single-step
//! distillation.

mod adversarial;
mod base;
mod data;
mod guidance;

pub use adversarial::{
    adversarial_losses, disc_loss, gen_loss, r1_penalty, student_sample, teacher_sample, AdvLosses, AdversarialConfig,
    AdversarialTrainer, DiscInputs, Discriminator, HeadConfig, TrainState,
};
pub use base::{train_base, BaseTrainConfig};
pub use data::LatentDataset;
pub use guidance::{
    cfg_target, finetune_v_prediction, guidance_probe, init_guided_student, init_v_student, probe_mse, train_guidance_distill,
    v_probe, GuidanceDistillConfig, GuidanceProbe, Probe, VFinetuneConfig,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::denoiser::{AttentionContext, Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::tensor::Tensor;

/// One metrics line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_gen: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_disc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
}

impl IterRecord {
    pub fn total(iter: usize, loss: f64) -> Self {
        Self {
            iter,
            loss_total: loss,
            ..Default::default()
        }
    }
}

/// Called once per finished iteration.
pub type Observer<'a> = &'a mut dyn FnMut(&IterRecord);

/// An observer that ignores everything.
pub fn ignore(_: &IterRecord) {}

pub(crate) fn check_finite(stage: &str, iteration: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            stage: stage.into(),
            iteration,
        })
    }
}

/// `(B, ...)` tensor holding `values[b]` everywhere in item `b`.
pub(crate) fn per_item(values: &[f64], shape: &[usize]) -> Tensor {
    let per: usize = shape[1..].iter().product();
    let data = values.iter().flat_map(|&v| std::iter::repeat_n(v, per)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// `a[b] * x + s[b] * y` per batch item.
pub(crate) fn combine_per_item(a: &[f64], x: &Tensor, s: &[f64], y: &Tensor) -> Result<Tensor> {
    let per = x.per_item();
    let mut out = Vec::with_capacity(x.len());
    let data = x.data().iter().zip(y.data()).enumerate();
    for (i, (xv, yv)) in data {
        let b = i / per;
        out.push(a[b] * xv + s[b] * yv);
    }
    crate::error::ensure_shape(x.shape(), y.shape())?;
    Tensor::new(x.shape(), out)
}

pub(crate) fn uniform_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo })
        .collect()
}

/// Model output on a tape for the already scaled latent `x_in`.
pub(crate) fn model_graph(model: &Denoiser, tape: &mut Tape, p: &Bound, x_in: &Tensor, times: &[f64], cond: &Conditioning) -> Result<Var> {
    let b = x_in.dims4()?.0;
    let full = model.prepare_input(x_in, cond)?;
    let emb = model.embeddings(b, times, cond)?;
    let text = model.text_context(b, cond)?;
    let xv = tape.constant(full);
    let ev = Denoiser::bind_embeddings(tape, &emb);
    let tv = tape.constant(text);
    model.graph(tape, p, xv, &ev, tv, &AttentionContext::self_attention(), None)
}

/// Model output without a tape for gradients.
pub(crate) fn model_eval(model: &Denoiser, x_in: &Tensor, times: &[f64], cond: &Conditioning) -> Result<Tensor> {
    model.predict(x_in, times, cond, &AttentionContext::self_attention())
}
