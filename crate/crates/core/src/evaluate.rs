//! Held-out measurements of the distilled models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::Variant;
use crate::denoiser::{Conditioning, Denoiser};
use crate::distill::{student_sample, teacher_sample, LatentDataset};
use crate::error::{Error, Result};
use crate::guidance::{edit_distilled, NfeCounter, IMAGE_SCALE_RANGE, TEXT_SCALE_RANGE};
use crate::tensor::Tensor;
use crate::videoedit::{initial_latent, variant_schedule};

/// Spearman rank correlation, ties given their average rank.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!("spearman needs two equal series of >= 2 values, got {} and {}", a.len(), b.len())));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// A guidance-conditioned sampler.
#[derive(Clone, Copy, Debug)]
pub enum Editor<'a> {
    /// Guidance-distilled epsilon model, deterministic VP steps.
    Distilled { model: &'a Denoiser, steps: usize },
    /// Single-step v student on its Euler levels.
    SingleStep { model: &'a Denoiser, timesteps: usize },
}

impl Editor<'_> {
    /// Edited latents from unit noise `z` (one row per item of `cond`).
    pub fn edit(&self, cond: &Conditioning, z: &Tensor, nfe: &mut NfeCounter) -> Result<Tensor> {
        match *self {
            Editor::Distilled { model, steps } => {
                let sched = variant_schedule(Variant::GuidanceDistilled, model.prediction())?;
                let x = initial_latent(&sched, z)?;
                edit_distilled(model, &x, cond, &sched, steps, &mut ChaCha8Rng::seed_from_u64(0), nfe)
            }
            Editor::SingleStep { model, timesteps } => student_sample(model, cond, z, timesteps, nfe),
        }
    }
}

/// Per-condition Spearman correlation between `s_T` and the edit
/// magnitude `‖edit - source‖`, on validation items `0..n` at fixed `s_I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controllability {
    pub s_image: f64,
    pub s_text: Vec<f64>,
    /// `magnitudes[i][k]`: condition `i` at `s_text[k]`.
    pub magnitudes: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
}

impl Controllability {
    pub fn min_rho(&self) -> f64 {
        self.rho.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_rho(&self) -> f64 {
        self.rho.iter().sum::<f64>() / self.rho.len().max(1) as f64
    }
}

pub fn controllability(editor: Editor<'_>, data: &LatentDataset, n: usize, s_image: f64, s_text: &[f64], seed: u64) -> Result<Controllability> {
    let idx: Vec<usize> = (0..n).map(|i| i % data.len()).collect();
    let (_, cond) = data.batch(&idx)?;
    let source = cond.image.clone().expect("dataset conditions carry the source");
    let z = Tensor::randn(source.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
    let mut magnitudes = vec![Vec::with_capacity(s_text.len()); n];
    for &st in s_text {
        let c = cond.clone().with_scales(vec![s_image; n], vec![st; n]);
        let out = editor.edit(&c, &z, &mut NfeCounter::new())?;
        for (i, m) in magnitudes.iter_mut().enumerate() {
            m.push(out.batch_item(i)?.sub(&source.batch_item(i)?)?.sq_norm().sqrt());
        }
    }
    let rho = magnitudes.iter().map(|m| spearman(s_text, m)).collect::<Result<Vec<_>>>()?;
    Ok(Controllability {
        s_image,
        s_text: s_text.to_vec(),
        magnitudes,
        rho,
    })
}

/// Latent MSE between single-step student samples and `teacher_steps`-step
/// teacher samples started from the same noise, over validation items
/// `0..n` with scales drawn from the training ranges.
pub fn single_step_gap(
    teacher: &Denoiser,
    student: &Denoiser,
    data: &LatentDataset,
    n: usize,
    teacher_steps: usize,
    student_timesteps: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..n).map(|i| i % data.len()).collect();
    let (_, cond) = data.batch(&idx)?;
    let si = crate::distill::uniform_in(&mut rng, IMAGE_SCALE_RANGE, n);
    let st = crate::distill::uniform_in(&mut rng, TEXT_SCALE_RANGE, n);
    let cond = cond.with_scales(si, st);
    // teacher_sample draws its start noise first from `rng`; replay it.
    let mut probe = rng.clone();
    let z = Tensor::randn(cond.image.as_ref().expect("source").shape(), &mut probe);
    let real = teacher_sample(teacher, &cond, teacher_steps, &mut rng, &mut NfeCounter::new())?;
    let fake = student_sample(student, &cond, &z, student_timesteps, &mut NfeCounter::new())?;
    fake.mse(&real)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 30.0, 40.0]).unwrap(), 1.0);
        assert_eq!(spearman(&x, &[1.0, 0.5, 0.2, 0.1]).unwrap(), -1.0);
        assert_eq!(spearman(&x, &[1.0, 8.0, 27.0, 64.0]).unwrap(), 1.0);
        // Ties: ranks (1, 2.5, 2.5, 4).
        let r = spearman(&x, &[1.0, 2.0, 2.0, 3.0]).unwrap();
        let want = 4.5 / (5.0f64 * 4.5).sqrt();
        assert!((r - want).abs() < 1e-12);
        assert!(spearman(&x, &[1.0]).is_err());
    }
}
