use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, combine_per_item, model_eval, model_graph, per_item, uniform_in, IterRecord, LatentDataset, Observer};
use crate::autograd::{Tape, Var};
use crate::checkpoint::{Checkpoint, Header, Stage};
use crate::denoiser::{embed_batch, Conditioning, Denoiser, DenoiserConfig, Embeddings};
use crate::error::{Error, Result};
use crate::guidance::{edit_distilled, sample, GuidanceMode, NfeCounter, IMAGE_SCALE_RANGE, TEXT_SCALE_RANGE};
use crate::nn::{Adam, Bound, Conv2d, Linear, ParamStore};
use crate::schedules::{
    make_schedule, sample_logit_normal_t, NoiseSchedule, Prediction, ScheduleKind, TimestepSamplerConfig, TRAIN_TIMESTEPS,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Hidden width of every spatial head.
    pub dim: usize,
    /// Feed the guidance-scale embeddings to the heads.
    pub guidance_conditioned: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            guidance_conditioned: true,
        }
    }
}

#[derive(Clone, Debug)]
struct Head {
    proj: Conv2d,
    t_emb: Linear,
    s_image: Option<Linear>,
    s_text: Option<Linear>,
    mid: Conv2d,
    out: Conv2d,
    prompt: Linear,
}

impl Head {
    fn forward(&self, tape: &mut Tape, p: &Bound, feat: Var, e: &HeadVars) -> Result<Var> {
        let a = self.proj.forward(tape, p, feat)?;
        let te = self.t_emb.forward(tape, p, e.time)?;
        let mut cond = tape.silu(te);
        for (lin, v) in [(&self.s_image, e.s_image), (&self.s_text, e.s_text)] {
            if let (Some(lin), Some(v)) = (lin, v) {
                let s = lin.forward(tape, p, v)?;
                let s = tape.silu(s);
                cond = tape.add(cond, s)?;
            }
        }
        let a = tape.add_channel(a, cond)?;
        let a = tape.silu(a);
        let a = self.mid.forward(tape, p, a)?;
        let a = tape.silu(a);
        let map = self.out.forward(tape, p, a)?;
        let c = self.prompt.forward(tape, p, e.prompt)?;
        let pm = tape.mul_channel(a, c)?;
        let pm = tape.sum_channels(pm)?;
        let map = tape.add(map, pm)?;
        tape.mean_spatial(map)
    }
}

struct HeadVars {
    time: Var,
    s_image: Option<Var>,
    s_text: Option<Var>,
    prompt: Var,
}

/// Everything the discriminator needs besides the noisy latent.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscInputs {
    image: Option<Tensor>,
    emb: Embeddings,
    text: Tensor,
    head_time: Tensor,
    head_s_image: Option<Tensor>,
    head_s_text: Option<Tensor>,
    prompt: Tensor,
}

/// Frozen copy of the teacher's encoder arm with one trainable spatial
/// head per level.
#[derive(Clone, Debug)]
pub struct Discriminator {
    extractor: Denoiser,
    pub heads: ParamStore,
    layers: Vec<Head>,
    pub cfg: HeadConfig,
    checksum: String,
    /// 1000-level Euler schedule the discriminator noise is drawn on.
    pub schedule: NoiseSchedule,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(teacher: &Denoiser, cfg: HeadConfig, rng: &mut R) -> Result<Self> {
        if cfg.dim < 2 || cfg.dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("head dim must be even and >= 2, got {}", cfg.dim)));
        }
        let mc = &teacher.cfg;
        let d = cfg.dim;
        let mut heads = ParamStore::new();
        let layers = (0..mc.num_levels())
            .map(|l| {
                let n = format!("head{l}");
                let s = &mut heads;
                Head {
                    proj: Conv2d::new(s, &format!("{n}.proj"), mc.level_channels(l), d, 1, 1, rng),
                    t_emb: Linear::new(s, &format!("{n}.t_emb"), d, d, rng),
                    s_image: cfg
                        .guidance_conditioned
                        .then(|| Linear::new(s, &format!("{n}.s_image"), d, d, rng)),
                    s_text: cfg
                        .guidance_conditioned
                        .then(|| Linear::new(s, &format!("{n}.s_text"), d, d, rng)),
                    mid: Conv2d::new(s, &format!("{n}.mid"), d, d, 1, 1, rng),
                    out: Conv2d::new(s, &format!("{n}.out"), d, 1, 1, 1, rng),
                    prompt: Linear::new(s, &format!("{n}.prompt"), mc.text_dim, d, rng),
                }
            })
            .collect();
        let extractor = teacher.clone();
        let checksum = Self::checksum_of(&extractor);
        Ok(Self {
            extractor,
            heads,
            layers,
            cfg,
            checksum,
            schedule: make_schedule(ScheduleKind::EulerDiscrete, TRAIN_TIMESTEPS, Prediction::Epsilon)?,
        })
    }

    fn checksum_of(m: &Denoiser) -> String {
        let prefixes = m.encoder_prefixes();
        m.params.checksum(&prefixes.iter().map(String::as_str).collect::<Vec<_>>())
    }

    /// Checksum of the frozen extractor recorded at construction.
    pub fn extractor_checksum(&self) -> &str {
        &self.checksum
    }

    pub fn verify_frozen(&self) -> Result<()> {
        let got = Self::checksum_of(&self.extractor);
        if got != self.checksum {
            return Err(Error::FrozenViolation {
                expected: self.checksum.clone(),
                got,
            });
        }
        Ok(())
    }

    /// Mutable access to the extractor, for tests of the frozen check.
    #[doc(hidden)]
    pub fn extractor_mut(&mut self) -> &mut Denoiser {
        &mut self.extractor
    }

    pub fn zero_heads(&mut self) {
        for (_, t) in self.heads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn inputs(&self, cond: &Conditioning, t_prime: &[usize]) -> Result<DiscInputs> {
        let b = t_prime.len();
        let times = t_prime
            .iter()
            .map(|&t| self.schedule.model_time(t))
            .collect::<Result<Vec<_>>>()?;
        let ext_cond = if self.extractor.cfg.guidance_conditioned {
            cond.clone()
        } else {
            Conditioning {
                scales: None,
                ..cond.clone()
            }
        };
        let emb = self.extractor.embeddings(b, &times, &ext_cond)?;
        let text = self.extractor.text_context(b, cond)?;
        let (l, td) = (self.extractor.cfg.text_len, self.extractor.cfg.text_dim);
        let mut prompt = vec![0.0; b * td];
        for (bi, row) in prompt.chunks_mut(td).enumerate() {
            for tok in 0..l {
                let off = (bi * l + tok) * td;
                row.iter_mut()
                    .zip(&text.data()[off..off + td])
                    .for_each(|(o, v)| *o += v / l as f64);
            }
        }
        let (head_s_image, head_s_text) = match (&cond.scales, self.cfg.guidance_conditioned) {
            (_, false) => (None, None),
            (Some(s), true) => (Some(embed_batch(&widen(&s.image, b)?, self.cfg.dim)?), Some(embed_batch(&widen(&s.text, b)?, self.cfg.dim)?)),
            (None, true) => return Err(Error::PipelineMismatch("guidance-conditioned heads need guidance scales".into())),
        };
        let image = if self.extractor.cfg.image_conditioned {
            Some(
                cond.image
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("discriminator needs the source latent".into()))?,
            )
        } else {
            None
        };
        Ok(DiscInputs {
            image,
            emb,
            text,
            head_time: embed_batch(&times, self.cfg.dim)?,
            head_s_image,
            head_s_text,
            prompt: Tensor::new(&[b, td], prompt)?,
        })
    }

    /// Per-item scores `(B, 1)` on `tape` for the preconditioned noisy latent `x`.
    pub fn score_graph(&self, tape: &mut Tape, heads: &Bound, x: Var, inp: &DiscInputs) -> Result<Var> {
        let ep = self.extractor.params.bind(tape, false);
        let x_in = match &inp.image {
            Some(img) => {
                let iv = tape.constant(img.clone());
                tape.concat_channels(x, iv)?
            }
            None => x,
        };
        let ev = Denoiser::bind_embeddings(tape, &inp.emb);
        let tv = tape.constant(inp.text.clone());
        let feats = self.extractor.encoder_features(tape, &ep, x_in, &ev, tv)?;
        let hv = HeadVars {
            time: tape.constant(inp.head_time.clone()),
            s_image: inp.head_s_image.as_ref().map(|t| tape.constant(t.clone())),
            s_text: inp.head_s_text.as_ref().map(|t| tape.constant(t.clone())),
            prompt: tape.constant(inp.prompt.clone()),
        };
        let mut total: Option<Var> = None;
        for (head, f) in self.layers.iter().zip(feats) {
            let s = head.forward(tape, heads, f, &hv)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        let total = total.ok_or_else(|| Error::InvalidArgument("extractor has no levels".into()))?;
        Ok(tape.scale(total, 1.0 / self.layers.len() as f64))
    }

    /// Per-item scores for the preconditioned noisy latent `x_noisy`.
    pub fn score(&self, x_noisy: &Tensor, cond: &Conditioning, t_prime: &[usize]) -> Result<Vec<f64>> {
        let inp = self.inputs(cond, t_prime)?;
        let mut tape = Tape::new();
        let hp = self.heads.bind(&mut tape, false);
        let x = tape.constant(x_noisy.clone());
        let s = self.score_graph(&mut tape, &hp, x, &inp)?;
        Ok(tape.value(s).data().to_vec())
    }

    /// `c_in'(t') (x0 + sigma'(t') eps)` per item.
    pub fn noised(&self, x0: &Tensor, eps: &Tensor, t_prime: &[usize]) -> Result<Tensor> {
        let (a, s) = self.noise_coeffs(t_prime)?;
        combine_per_item(&a, x0, &s, eps)
    }

    fn noise_coeffs(&self, t_prime: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut a = Vec::with_capacity(t_prime.len());
        let mut s = Vec::with_capacity(t_prime.len());
        for &t in t_prime {
            let (av, sv) = self.schedule.vp_coeffs(t)?;
            a.push(av);
            s.push(sv);
        }
        Ok((a, s))
    }

    /// Head gradients of the summed scores at `x`.
    fn head_grads_at(&self, x: &Tensor, inp: &DiscInputs) -> Result<Vec<Option<Tensor>>> {
        let mut tape = Tape::new();
        let hp = self.heads.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let s = self.score_graph(&mut tape, &hp, xv, inp)?;
        let total = tape.sum(s);
        Ok(hp.grads(&tape.backward(total)?))
    }

    /// `(r1, dr1/dheads)`. The head gradient is a central difference of
    /// head gradients along the input gradient.
    fn r1_with_grads(&self, x: &Tensor, inp: &DiscInputs) -> Result<(f64, Vec<Option<Tensor>>)> {
        let (r1, g) = r1_value(|tape, xv| {
            let hp = self.heads.bind(tape, false);
            self.score_graph(tape, &hp, xv, inp)
        }, x)?;
        let gmax = g.max_abs();
        if gmax == 0.0 {
            return Ok((r1, vec![None; self.heads.len()]));
        }
        let h = 1e-3 / gmax;
        let plus = self.head_grads_at(&x.zip_map(&g, |a, b| a + h * b)?, inp)?;
        let minus = self.head_grads_at(&x.zip_map(&g, |a, b| a - h * b)?, inp)?;
        let k = 1.0 / (x.batch() as f64 * h);
        let grads = plus
            .into_iter()
            .zip(minus)
            .map(|(p, m)| match (p, m) {
                (Some(p), Some(m)) => p.zip_map(&m, |a, b| (a - b) * k).ok(),
                _ => None,
            })
            .collect();
        Ok((r1, grads))
    }
}

fn widen(v: &[f64], b: usize) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; b]),
        n if n == b => Ok(v.to_vec()),
        n => Err(Error::InvalidArgument(format!("{n} guidance scales for batch {b}"))),
    }
}

/// `(‖∇_x Σ_b D_b‖² / B, ∇_x Σ_b D_b)` for any scorer `d`.
pub(crate) fn r1_value(d: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let s = d(&mut tape, xv)?;
    let total = tape.sum(s);
    let g = tape
        .backward(total)?
        .take(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((g.sq_norm() / x.batch().max(1) as f64, g))
}

impl Discriminator {
    /// R1 at `x_real_noisy` and its gradient with respect to every head
    /// parameter, in `heads` order.
    pub fn r1_with_head_grads(&self, x_real_noisy: &Tensor, cond: &Conditioning, t_prime: &[usize]) -> Result<(f64, Vec<Option<Tensor>>)> {
        let inp = self.inputs(cond, t_prime)?;
        self.r1_with_grads(x_real_noisy, &inp)
    }
}

/// R1 penalty: squared norm of the score gradient with respect to the
/// real noisy input, averaged over the batch.
pub fn r1_penalty(disc: &Discriminator, x_real_noisy: &Tensor, cond: &Conditioning, t_prime: &[usize]) -> Result<f64> {
    let inp = disc.inputs(cond, t_prime)?;
    Ok(r1_value(
        |tape, xv| {
            let hp = disc.heads.bind(tape, false);
            disc.score_graph(tape, &hp, xv, &inp)
        },
        x_real_noisy,
    )?
    .0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialConfig {
    pub lambda_mse: f64,
    pub lambda_gen: f64,
    pub lambda_r1: f64,
    pub lr_student: f64,
    pub lr_disc: f64,
    pub warmup: u64,
    pub iters: usize,
    pub batch: usize,
    pub teacher_steps: usize,
    pub student_timesteps: usize,
    pub disc_t_sampler: TimestepSamplerConfig,
    pub s_i_range: (f64, f64),
    pub s_t_range: (f64, f64),
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            lambda_mse: 1.0,
            lambda_gen: 0.5,
            lambda_r1: 1e-4,
            lr_student: 1e-5,
            lr_disc: 1e-4,
            warmup: 0,
            iters: 2000,
            batch: 4,
            teacher_steps: 5,
            student_timesteps: 8,
            disc_t_sampler: TimestepSamplerConfig::default(),
            s_i_range: IMAGE_SCALE_RANGE,
            s_t_range: TEXT_SCALE_RANGE,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_mse, self.lambda_gen, self.lambda_r1].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        if self.lr_student < 0.0 || self.lr_disc < 0.0 || self.batch == 0 {
            return Err(Error::InvalidArgument("learning rates must be >= 0 and batch > 0".into()));
        }
        if self.teacher_steps == 0 || self.student_timesteps == 0 {
            return Err(Error::InvalidArgument("step counts must be >= 1".into()));
        }
        self.disc_t_sampler.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvLosses {
    pub disc: f64,
    pub gen: f64,
}

/// Hinge as written: real scores are pushed to <= -1, fake scores to
/// >= +1, and the generator lowers its fake score.
pub fn disc_loss(real_score: f64, fake_score: f64, r1: f64, cfg: &AdversarialConfig) -> f64 {
    (1.0 + real_score).max(0.0) + cfg.lambda_r1 * r1 + (1.0 - fake_score).max(0.0)
}

/// `mse` is the mean squared latent error to the teacher sample.
pub fn gen_loss(mse: f64, fake_score: f64, cfg: &AdversarialConfig) -> f64 {
    cfg.lambda_mse * mse + cfg.lambda_gen * fake_score
}

pub fn adversarial_losses(
    real_score: f64,
    fake_score: f64,
    r1: f64,
    x0: &Tensor,
    x0_hat: &Tensor,
    cfg: &AdversarialConfig,
) -> Result<AdvLosses> {
    if r1 < 0.0 {
        return Err(Error::InvalidArgument(format!("r1 must be >= 0, got {r1}")));
    }
    Ok(AdvLosses {
        disc: disc_loss(real_score, fake_score, r1, cfg),
        gen: gen_loss(x0_hat.mse(x0)?, fake_score, cfg),
    })
}

/// Teacher sample: `steps` LCM steps of the guidance-distilled model from
/// fresh noise.
pub fn teacher_sample<R: Rng + ?Sized>(
    teacher: &Denoiser,
    cond: &Conditioning,
    steps: usize,
    rng: &mut R,
    nfe: &mut NfeCounter,
) -> Result<Tensor> {
    let img = cond
        .image
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("teacher sampling needs the source latent for its shape".into()))?;
    let sched = make_schedule(ScheduleKind::LcmUniform, steps, teacher.prediction())?;
    let x_t = Tensor::randn(img.shape(), rng);
    edit_distilled(teacher, &x_t, cond, &sched, steps, rng, nfe)
}

/// Single-step student sample from unit noise `noise`, shared with the
/// teacher's starting point.
pub fn student_sample(student: &Denoiser, cond: &Conditioning, noise: &Tensor, timesteps: usize, nfe: &mut NfeCounter) -> Result<Tensor> {
    let sched = make_schedule(ScheduleKind::EulerDiscrete, timesteps, student.prediction())?;
    let top = sched.num_steps - 1;
    let (a, s) = sched.coeffs(top)?;
    let x_t = noise.scale(s / a);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    sample(student, GuidanceMode::Distilled, &x_t, cond, &sched, 1, &mut rng, nfe)
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub student_cfg: DenoiserConfig,
    pub student: ParamStore,
    pub heads: ParamStore,
    pub opt_student: Adam,
    pub opt_disc: Adam,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub history: Vec<IterRecord>,
}

#[derive(Serialize, Deserialize)]
struct AdamScalars {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    warmup: u64,
    clip_norm: f64,
    #[serde(default)]
    decay_steps: u64,
    step: u64,
}

fn adam_to(c: &mut Checkpoint, name: &str, a: &Adam) -> serde_json::Value {
    for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
        c.push(format!("{name}.m/{i}"), m.clone());
        c.push(format!("{name}.v/{i}"), v.clone());
    }
    serde_json::to_value(AdamScalars {
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        warmup: a.warmup,
        clip_norm: a.clip_norm,
        decay_steps: a.decay_steps,
        step: a.step,
    })
    .expect("plain struct")
}

fn adam_from(c: &Checkpoint, name: &str, scalars: AdamScalars, n: usize) -> Result<Adam> {
    let get = |k: &str, i: usize| {
        c.get(&format!("{name}.{k}/{i}"))
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing {name}.{k}/{i}")))
    };
    Ok(Adam {
        lr: scalars.lr,
        beta1: scalars.beta1,
        beta2: scalars.beta2,
        eps: scalars.eps,
        warmup: scalars.warmup,
        clip_norm: scalars.clip_norm,
        decay_steps: scalars.decay_steps,
        step: scalars.step,
        m: (0..n).map(|i| get("m", i)).collect::<Result<_>>()?,
        v: (0..n).map(|i| get("v", i)).collect::<Result<_>>()?,
    })
}

impl TrainState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(Header::new(Stage::AdversarialState));
        c.push_store("student", &self.student);
        c.push_store("heads", &self.heads);
        let os = adam_to(&mut c, "opt_student", &self.opt_student);
        let od = adam_to(&mut c, "opt_disc", &self.opt_disc);
        c.header.meta = serde_json::json!({
            "version": 1,
            "iteration": self.iteration,
            "student_cfg": self.student_cfg,
            "opt_student": os,
            "opt_disc": od,
            "rng_seed": self.rng_seed.iter().map(|b| format!("{b:02x}")).collect::<String>(),
            "rng_stream": self.rng_stream,
            "rng_word_pos": self.rng_word_pos.to_string(),
            "history": self.history,
        });
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_stage(Stage::AdversarialState)?;
        let seed_hex: String = c.meta("rng_seed")?;
        if seed_hex.len() != 64 {
            return Err(Error::Checkpoint("bad rng seed".into()));
        }
        let mut rng_seed = [0u8; 32];
        for (i, b) in rng_seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let word_pos: String = c.meta("rng_word_pos")?;
        let student = c.store("student");
        let heads = c.store("heads");
        Ok(Self {
            iteration: c.meta("iteration")?,
            student_cfg: c.meta("student_cfg")?,
            opt_student: adam_from(c, "opt_student", c.meta("opt_student")?, student.len())?,
            opt_disc: adam_from(c, "opt_disc", c.meta("opt_disc")?, heads.len())?,
            student,
            heads,
            rng_seed,
            rng_stream: c.meta("rng_stream")?,
            rng_word_pos: word_pos.parse().map_err(|_| Error::Checkpoint("bad rng position".into()))?,
            history: c.meta("history")?,
        })
    }
}

/// Alternating discriminator and student updates.
pub struct AdversarialTrainer<'a> {
    teacher: &'a Denoiser,
    data: &'a LatentDataset,
    pub student: Denoiser,
    pub disc: Discriminator,
    pub cfg: AdversarialConfig,
    opt_student: Adam,
    opt_disc: Adam,
    rng: ChaCha8Rng,
    student_sched: NoiseSchedule,
    pub iteration: usize,
    pub history: Vec<IterRecord>,
    /// Teacher evaluations spent on real samples.
    pub teacher_nfe: NfeCounter,
}

impl<'a> AdversarialTrainer<'a> {
    pub fn new(
        teacher: &'a Denoiser,
        student: Denoiser,
        disc: Discriminator,
        data: &'a LatentDataset,
        cfg: AdversarialConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if !teacher.cfg.guidance_conditioned || teacher.prediction() != Prediction::Epsilon {
            return Err(Error::PipelineMismatch("the teacher must be the guidance-distilled epsilon model".into()));
        }
        if student.prediction() != Prediction::V {
            return Err(Error::ParameterizationMismatch(format!("student predicts {}, expected v", student.prediction())));
        }
        if !student.cfg.guidance_conditioned {
            return Err(Error::PipelineMismatch("the student must be guidance-conditioned".into()));
        }
        let opt_student = Adam::new(&student.params, cfg.lr_student).with_warmup(cfg.warmup);
        let opt_disc = Adam::new(&disc.heads, cfg.lr_disc).with_warmup(cfg.warmup);
        Ok(Self {
            teacher,
            data,
            student_sched: make_schedule(ScheduleKind::EulerDiscrete, cfg.student_timesteps, Prediction::V)?,
            student,
            disc,
            cfg,
            opt_student,
            opt_disc,
            rng: ChaCha8Rng::seed_from_u64(seed),
            iteration: 0,
            history: Vec::new(),
            teacher_nfe: NfeCounter::new(),
        })
    }

    /// Continue from `state`. `disc` supplies the frozen extractor; its
    /// heads are replaced by the saved ones.
    pub fn resume(
        teacher: &'a Denoiser,
        mut disc: Discriminator,
        data: &'a LatentDataset,
        cfg: AdversarialConfig,
        state: &TrainState,
    ) -> Result<Self> {
        let student = Denoiser::from_params(&state.student_cfg, &state.student)?;
        disc.heads.load_from(&state.heads)?;
        let mut t = Self::new(teacher, student, disc, data, cfg, 0)?;
        t.opt_student = state.opt_student.clone();
        t.opt_disc = state.opt_disc.clone();
        t.rng = ChaCha8Rng::from_seed(state.rng_seed);
        t.rng.set_stream(state.rng_stream);
        t.rng.set_word_pos(state.rng_word_pos);
        t.iteration = state.iteration;
        t.history = state.history.clone();
        Ok(t)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            iteration: self.iteration,
            student_cfg: self.student.cfg.clone(),
            student: self.student.params.clone(),
            heads: self.disc.heads.clone(),
            opt_student: self.opt_student.clone(),
            opt_disc: self.opt_disc.clone(),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            history: self.history.clone(),
        }
    }

    /// Student input at `levels`: `c_in(t) (alpha_t x0 + sigma_t eps)`,
    /// with its model times and VP coefficients.
    fn student_input(&mut self, x0: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let b = x0.batch();
        let levels: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..self.student_sched.num_steps)).collect();
        let eps = Tensor::randn(x0.shape(), &mut self.rng);
        let mut a = Vec::with_capacity(b);
        let mut s = Vec::with_capacity(b);
        let mut times = Vec::with_capacity(b);
        for &t in &levels {
            let (av, sv) = self.student_sched.vp_coeffs(t)?;
            a.push(av);
            s.push(sv);
            times.push(self.student_sched.model_time(t)?);
        }
        Ok((combine_per_item(&a, x0, &s, &eps)?, times, a, s))
    }

    fn disc_noise(&mut self, shape: &[usize]) -> (Vec<usize>, Tensor) {
        let t: Vec<usize> = (0..shape[0])
            .map(|_| sample_logit_normal_t(&self.cfg.disc_t_sampler, &mut self.rng))
            .collect();
        (t, Tensor::randn(shape, &mut self.rng))
    }

    /// One discriminator update followed by one student update.
    pub fn step(&mut self) -> Result<IterRecord> {
        self.disc.verify_frozen()?;
        let it = self.iteration;
        let b = self.cfg.batch;
        let (_, cond) = self.data.sample(b, &mut self.rng)?;
        let si = uniform_in(&mut self.rng, self.cfg.s_i_range, b);
        let st = uniform_in(&mut self.rng, self.cfg.s_t_range, b);
        let cond = cond.with_scales(si, st);
        let x0 = teacher_sample(self.teacher, &cond, self.cfg.teacher_steps, &mut self.rng, &mut self.teacher_nfe)?;

        // Discriminator update on a detached fake.
        let (x_in, times, a, s) = self.student_input(&x0)?;
        let v = model_eval(&self.student, &x_in, &times, &cond)?;
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let fake = combine_per_item(&a, &x_in, &neg, &v)?;
        let (tp, eps_p) = self.disc_noise(x0.shape());
        let inp = self.disc.inputs(&cond, &tp)?;
        let real_in = self.disc.noised(&x0, &eps_p, &tp)?;
        let fake_in = self.disc.noised(&fake, &eps_p, &tp)?;
        let mut tape = Tape::new();
        let hp = self.disc.heads.bind(&mut tape, true);
        let rv = tape.constant(real_in.clone());
        let fv = tape.constant(fake_in);
        let real = self.disc.score_graph(&mut tape, &hp, rv, &inp)?;
        let fake_s = self.disc.score_graph(&mut tape, &hp, fv, &inp)?;
        let real_mean = tape.value(real).mean();
        let fake_mean_d = tape.value(fake_s).mean();
        let hr = tape.affine(real, 1.0, 1.0);
        let hr = tape.relu(hr);
        let hr = tape.mean(hr);
        let hf = tape.affine(fake_s, -1.0, 1.0);
        let hf = tape.relu(hf);
        let hf = tape.mean(hf);
        let hinge = tape.add(hr, hf)?;
        let hinge_v = tape.value(hinge).data()[0];
        let mut grads = hp.grads(&tape.backward(hinge)?);
        let (r1, r1_grads) = if self.cfg.lambda_r1 > 0.0 {
            self.disc.r1_with_grads(&real_in, &inp)?
        } else {
            (r1_penalty(&self.disc, &real_in, &cond, &tp)?, vec![None; grads.len()])
        };
        for (g, r) in grads.iter_mut().zip(r1_grads) {
            if let Some(r) = r {
                match g {
                    Some(g) => g.axpy(self.cfg.lambda_r1, &r)?,
                    None => *g = Some(r.scale(self.cfg.lambda_r1)),
                }
            }
        }
        let loss_disc = check_finite("distill-adversarial", it, hinge_v + self.cfg.lambda_r1 * r1)?;
        self.opt_disc.update(&mut self.disc.heads, &grads)?;

        // Student update with fresh noise draws.
        let (x_in, times, a, s) = self.student_input(&x0)?;
        let (tp, eps_p) = self.disc_noise(x0.shape());
        let inp = self.disc.inputs(&cond, &tp)?;
        let (ca, cs) = self.disc.noise_coeffs(&tp)?;
        let mut tape = Tape::new();
        let sp = self.student.params.bind(&mut tape, true);
        let v = model_graph(&self.student, &mut tape, &sp, &x_in, &times, &cond)?;
        let ax = tape.constant(x_in.mul(&per_item(&a, x_in.shape()))?);
        let sc = tape.constant(per_item(&s, x_in.shape()));
        let sv = tape.mul(v, sc)?;
        let x0_hat = tape.sub(ax, sv)?;
        let target = tape.constant(x0.clone());
        let mse = tape.mse(x0_hat, target)?;
        let cav = tape.constant(per_item(&ca, x0.shape()));
        let scaled = tape.mul(x0_hat, cav)?;
        let offset = tape.constant(eps_p.mul(&per_item(&cs, eps_p.shape()))?);
        let noisy = tape.add(scaled, offset)?;
        let hp = self.disc.heads.bind(&mut tape, false);
        let score = self.disc.score_graph(&mut tape, &hp, noisy, &inp)?;
        let fake_mean = tape.mean(score);
        let wm = tape.scale(mse, self.cfg.lambda_mse);
        let wg = tape.scale(fake_mean, self.cfg.lambda_gen);
        let loss = tape.add(wm, wg)?;
        let mse_v = tape.value(mse).data()[0];
        let fake_v = tape.value(fake_mean).data()[0];
        let loss_v = check_finite("distill-adversarial", it, tape.value(loss).data()[0])?;
        let g = tape.backward(loss)?;
        self.opt_student.update(&mut self.student.params, &sp.grads(&g))?;

        let rec = IterRecord {
            iter: it,
            loss_total: loss_v,
            loss_mse: Some(mse_v),
            loss_gen: Some(fake_v),
            loss_disc: Some(loss_disc),
            r1: Some(r1),
        };
        log::trace!("adv iter {it}: real {real_mean:.4} fake {fake_mean_d:.4}");
        self.iteration += 1;
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Step until `cfg.iters` iterations are done.
    pub fn run(&mut self, on_iter: Observer<'_>) -> Result<Vec<IterRecord>> {
        let mut out = Vec::new();
        while self.iteration < self.cfg.iters {
            let rec = self.step()?;
            on_iter(&rec);
            out.push(rec);
        }
        self.disc.verify_frozen()?;
        Ok(out)
    }

    pub fn into_student(self) -> Denoiser {
        self.student
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AutoencoderPair;
    use crate::distill::{init_guided_student, init_v_student};
    use crate::synthdata::Split;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 8,
            embed_dim: 16,
            guidance_conditioned: true,
            ..DenoiserConfig::toy()
        }
    }

    fn setup() -> (Denoiser, LatentDataset) {
        let pair = AutoencoderPair::new(&mut ChaCha8Rng::seed_from_u64(0));
        let data = LatentDataset::synthetic(&pair, 6, 0, Split::Train).unwrap();
        let teacher = crate::denoiser::build_denoiser(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (teacher, data)
    }

    fn cond(data: &LatentDataset, n: usize) -> Conditioning {
        let idx: Vec<usize> = (0..n).collect();
        data.batch(&idx).unwrap().1.with_scales(vec![1.5; n], vec![6.0; n])
    }

    #[test]
    fn hinge_examples() {
        let cfg = AdversarialConfig {
            lambda_r1: 0.0,
            ..Default::default()
        };
        assert_eq!(disc_loss(-2.0, 2.0, 5.0, &cfg), 0.0);
        assert_eq!(disc_loss(0.0, 0.0, 0.0, &cfg), 2.0);
        let cfg = AdversarialConfig {
            lambda_r1: 0.5,
            ..Default::default()
        };
        assert_eq!(disc_loss(0.0, 0.0, 2.0, &cfg), 3.0);
        let cfg = AdversarialConfig {
            lambda_mse: 0.0,
            lambda_gen: 1.0,
            ..Default::default()
        };
        assert_eq!(gen_loss(9.0, -3.0, &cfg), -3.0);
        let x = Tensor::full(&[1, 2], 1.0);
        let y = Tensor::full(&[1, 2], 3.0);
        let l = adversarial_losses(0.5, -0.5, 0.0, &x, &y, &AdversarialConfig::default()).unwrap();
        assert_eq!(l.gen, 4.0 - 0.25);
        assert_eq!(l.disc, 1.5 + 1.5);
        assert!(adversarial_losses(0.0, 0.0, -1.0, &x, &y, &AdversarialConfig::default()).is_err());
    }

    #[test]
    fn linear_score_r1_is_weight_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[1, 2, 3, 3], &mut rng);
        for _ in 0..3 {
            let x = Tensor::randn(&[1, 2, 3, 3], &mut rng);
            let (r1, _) = r1_value(
                |tape, xv| {
                    let av = tape.constant(a.clone());
                    let p = tape.mul(xv, av)?;
                    Ok(tape.sum(p))
                },
                &x,
            )
            .unwrap();
            assert!((r1 - a.sq_norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_heads_score_zero_and_no_penalty() {
        let (teacher, data) = setup();
        let mut d = Discriminator::new(&teacher, HeadConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let c = cond(&data, 2);
        let x = Tensor::randn(&[2, 4, 8, 8], &mut ChaCha8Rng::seed_from_u64(3));
        let s1 = d.score(&x, &c, &[10, 500]).unwrap();
        assert_eq!(s1, d.score(&x, &c, &[10, 500]).unwrap());
        assert!(s1.iter().any(|v| *v != 0.0));
        d.zero_heads();
        assert_eq!(d.score(&x, &c, &[10, 500]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(r1_penalty(&d, &x, &c, &[10, 500]).unwrap(), 0.0);
    }

    #[test]
    fn r1_matches_finite_difference_gradient_norm() {
        let (teacher, data) = setup();
        let d = Discriminator::new(&teacher, HeadConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let c = cond(&data, 1);
        let x = Tensor::randn(&[1, 4, 8, 8], &mut ChaCha8Rng::seed_from_u64(3));
        let r1 = r1_penalty(&d, &x, &c, &[300]).unwrap();
        let h = 1e-5;
        let mut norm = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let g = (d.score(&xp, &c, &[300]).unwrap()[0] - d.score(&xm, &c, &[300]).unwrap()[0]) / (2.0 * h);
            norm += g * g;
        }
        assert!((r1 - norm).abs() / norm < 1e-2, "{r1} vs {norm}");
    }

    #[test]
    fn r1_head_gradient_matches_finite_differences() {
        let (teacher, data) = setup();
        let d = Discriminator::new(&teacher, HeadConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let c = cond(&data, 2);
        let tp = [100, 700];
        let x = Tensor::randn(&[2, 4, 8, 8], &mut ChaCha8Rng::seed_from_u64(3));
        let inp = d.inputs(&c, &tp).unwrap();
        let (_, grads) = d.r1_with_grads(&x, &inp).unwrap();
        let names: Vec<String> = d.heads.iter().map(|(n, _)| n.to_string()).collect();
        for (pi, name) in names.iter().enumerate().filter(|(_, n)| n.ends_with(".w")).take(4) {
            let g = grads[pi].as_ref().unwrap();
            let k = g.data().iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut dd = d.clone();
                dd.heads.by_name_mut(name).unwrap().data_mut()[k] += delta;
                r1_penalty(&dd, &x, &c, &tp).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.data()[k];
            assert!((an - fd).abs() / fd.abs().max(1e-8) < 1e-3, "{name}[{k}]: {an} vs {fd}");
        }
    }

    #[test]
    fn teacher_sample_counts_and_repeats() {
        let (teacher, data) = setup();
        let c = cond(&data, 1);
        let mut nfe = NfeCounter::new();
        let a = teacher_sample(&teacher, &c, 5, &mut ChaCha8Rng::seed_from_u64(9), &mut nfe).unwrap();
        assert_eq!(nfe.denoiser_calls, 5);
        let b = teacher_sample(&teacher, &c, 5, &mut ChaCha8Rng::seed_from_u64(9), &mut NfeCounter::new()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn teacher_sample_matches_unrolled_recursion() {
        let (teacher, data) = setup();
        let c = cond(&data, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let got = teacher_sample(&teacher, &c, 5, &mut rng, &mut NfeCounter::new()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = Tensor::randn(&[1, 4, 8, 8], &mut rng);
        let vp = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon).unwrap();
        let ts = [999usize, 799, 599, 399, 199];
        for (i, &t) in ts.iter().enumerate() {
            let eps = model_eval(&teacher, &x, &[t as f64], &c).unwrap();
            let (a, s) = (vp.alphas[t], vp.sigmas[t]);
            let x0 = x.zip_map(&eps, |x, e| (x - s * e) / a).unwrap();
            x = match ts.get(i + 1) {
                Some(&n) => {
                    let z = Tensor::randn(x.shape(), &mut rng);
                    x0.zip_map(&z, |x, z| vp.alphas[n] * x + vp.sigmas[n] * z).unwrap()
                }
                None => x0,
            };
        }
        assert!(got.sub(&x).unwrap().max_abs() < 1e-12);
    }

    fn trainer<'a>(teacher: &'a Denoiser, data: &'a LatentDataset, cfg: AdversarialConfig) -> AdversarialTrainer<'a> {
        let student = init_v_student(teacher).unwrap();
        let disc = Discriminator::new(teacher, HeadConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        AdversarialTrainer::new(teacher, student, disc, data, cfg, 11).unwrap()
    }

    fn small_adv() -> AdversarialConfig {
        AdversarialConfig {
            batch: 2,
            iters: 2,
            lr_student: 1e-3,
            lr_disc: 1e-3,
            lambda_r1: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn optimizers_touch_only_their_own_parameters() {
        let (teacher, data) = setup();
        let mut t = trainer(&teacher, &data, AdversarialConfig { lr_student: 0.0, ..small_adv() });
        let (s0, h0) = (t.student.params.clone(), t.disc.heads.clone());
        let sum0 = t.disc.extractor_checksum().to_string();
        t.step().unwrap();
        assert_eq!(t.student.params, s0);
        assert_ne!(t.disc.heads, h0);
        let mut t = trainer(&teacher, &data, AdversarialConfig { lr_disc: 0.0, ..small_adv() });
        t.step().unwrap();
        assert_ne!(t.student.params, s0);
        assert_eq!(t.disc.heads, h0);
        assert_eq!(t.disc.extractor_checksum(), sum0);
        t.disc.verify_frozen().unwrap();
    }

    #[test]
    fn resume_reproduces_next_step_bitwise() {
        let (teacher, data) = setup();
        let mut a = trainer(&teacher, &data, small_adv());
        a.step().unwrap();
        let bytes = a.state().to_checkpoint().to_bytes(crate::checkpoint::Dtype::F64).unwrap();
        let want = a.step().unwrap();
        let state = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let disc = Discriminator::new(&teacher, HeadConfig::default(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        let mut b = AdversarialTrainer::resume(&teacher, disc, &data, small_adv(), &state).unwrap();
        let got = b.step().unwrap();
        assert_eq!(got, want);
        assert_eq!(b.student.params, a.student.params);
    }

    #[test]
    fn tampered_extractor_aborts() {
        let (teacher, data) = setup();
        let mut t = trainer(&teacher, &data, small_adv());
        t.disc.extractor_mut().params.iter_mut().next().unwrap().1.data_mut()[0] += 1.0;
        assert_eq!(t.step().unwrap_err().kind(), "frozen_violation");
    }

    #[test]
    fn pairing_checks() {
        let (teacher, data) = setup();
        let disc = Discriminator::new(&teacher, HeadConfig::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let e = AdversarialTrainer::new(&teacher, teacher.clone(), disc, &data, small_adv(), 0).err().unwrap();
        assert_eq!(e.kind(), "parameterization_mismatch");
        let plain = DenoiserConfig {
            guidance_conditioned: false,
            ..small()
        };
        let base = crate::denoiser::build_denoiser(&plain, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let guided = init_guided_student(&base).unwrap();
        assert!(guided.cfg.guidance_conditioned);
    }

    #[test]
    fn one_step_student_is_the_x0_estimate() {
        let (teacher, data) = setup();
        let student = init_v_student(&teacher).unwrap();
        let c = cond(&data, 1);
        let noise = Tensor::randn(&[1, 4, 8, 8], &mut ChaCha8Rng::seed_from_u64(1));
        let mut nfe = NfeCounter::new();
        let x = student_sample(&student, &c, &noise, 8, &mut nfe).unwrap();
        assert_eq!(nfe.denoiser_calls, 1);
        let sched = make_schedule(ScheduleKind::EulerDiscrete, 8, Prediction::V).unwrap();
        let (a, s) = sched.vp_coeffs(7).unwrap();
        let x_in = noise.scale(10.0 * a);
        let v = model_eval(&student, &x_in, &[sched.model_times[7]], &c).unwrap();
        let want = x_in.zip_map(&v, |x, v| a * x - s * v).unwrap();
        assert!(x.sub(&want).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn no_guidance_heads_drop_both_scale_embeddings() {
        let (teacher, _) = setup();
        let cfg = HeadConfig {
            guidance_conditioned: false,
            ..Default::default()
        };
        let d = Discriminator::new(&teacher, cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(d.heads.iter().all(|(n, _)| !n.contains(".s_")));
    }
}
