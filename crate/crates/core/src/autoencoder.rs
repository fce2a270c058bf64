//! Big and tiny image autoencoders that share one latent space.
//!
//! Images are `(B, 3, H, W)` in `[0, 1]`; latents are `(B, 4, H/8, W/8)`
//! already multiplied by the pair's `latent_scale`.

use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::costmodel::{LayerShape, ShapeCatalog};
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Conv2d, ParamStore};
use crate::tensor::Tensor;

pub const DOWNSAMPLE: usize = 8;
pub const LATENT_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Big,
    Tiny,
}

impl FromStr for Which {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "big" => Ok(Self::Big),
            "tiny" => Ok(Self::Tiny),
            _ => Err(Error::InvalidArgument(format!("unknown autoencoder half {s:?}"))),
        }
    }
}

impl std::fmt::Display for Which {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Big => "big",
            Self::Tiny => "tiny",
        })
    }
}

#[derive(Clone, Copy, Debug)]
enum Spec {
    Conv { cin: usize, cout: usize, k: usize, stride: usize },
    Silu,
    Up,
    Res(usize),
}

fn c3(cin: usize, cout: usize) -> Spec {
    Spec::Conv { cin, cout, k: 3, stride: 1 }
}

fn down(cin: usize, cout: usize) -> Spec {
    Spec::Conv { cin, cout, k: 3, stride: 2 }
}

fn c1(cin: usize, cout: usize) -> Spec {
    Spec::Conv { cin, cout, k: 1, stride: 1 }
}

#[rustfmt::skip]
fn big_encoder_spec() -> Vec<Spec> {
    use Spec::Silu;
    vec![
        down(3, 32), Silu, c3(32, 32), Silu,
        down(32, 64), Silu, c3(64, 64), Silu,
        down(64, 128), Silu, c3(128, 128), Silu,
        c1(128, LATENT_CHANNELS),
    ]
}

#[rustfmt::skip]
fn big_decoder_spec() -> Vec<Spec> {
    use Spec::{Silu, Up};
    vec![
        c3(LATENT_CHANNELS, 128), Silu, c3(128, 128), Silu,
        Up, c3(128, 64), Silu, c3(64, 64), Silu,
        Up, c3(64, 32), Silu, c3(32, 32), Silu,
        Up, c3(32, 16), Silu, c3(16, 3),
    ]
}

#[rustfmt::skip]
fn tiny_encoder_spec() -> Vec<Spec> {
    use Spec::{Res, Silu};
    vec![
        down(3, 8), Silu, Res(8),
        down(8, 16), Silu, Res(16),
        down(16, 16), Silu, Res(16),
        c1(16, LATENT_CHANNELS),
    ]
}

#[rustfmt::skip]
fn tiny_decoder_spec() -> Vec<Spec> {
    use Spec::{Res, Silu, Up};
    vec![
        c3(LATENT_CHANNELS, 16), Silu, Res(16),
        Up, c3(16, 16), Silu, Res(16),
        Up, c3(16, 8), Silu, Res(8),
        Up, c3(8, 3),
    ]
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(Conv2d),
    Silu,
    Up,
    Res(Conv2d, Conv2d),
}

/// A plain feed-forward conv stack with its own parameters.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub params: ParamStore,
    layers: Vec<Layer>,
}

impl ConvStack {
    fn new<R: Rng + ?Sized>(spec: &[Spec], rng: &mut R) -> Self {
        let mut s = ParamStore::new();
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, sp)| match *sp {
                Spec::Conv { cin, cout, k, stride } => Layer::Conv(Conv2d::new(&mut s, &format!("l{i}"), cin, cout, k, stride, rng)),
                Spec::Silu => Layer::Silu,
                Spec::Up => Layer::Up,
                Spec::Res(c) => Layer::Res(
                    Conv2d::new(&mut s, &format!("l{i}.a"), c, c, 3, 1, rng),
                    Conv2d::new(&mut s, &format!("l{i}.b"), c, c, 3, 1, rng),
                ),
            })
            .collect();
        Self { params: s, layers }
    }

    pub fn graph(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            h = match l {
                Layer::Conv(c) => c.forward(tape, p, h)?,
                Layer::Silu => tape.silu(h),
                Layer::Up => tape.upsample2x(h)?,
                Layer::Res(a, b) => {
                    let r = a.forward(tape, p, h)?;
                    let r = tape.silu(r);
                    let r = b.forward(tape, p, r)?;
                    let r = tape.add(h, r)?;
                    tape.silu(r)
                }
            };
        }
        Ok(h)
    }

    pub fn run(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.graph(&mut tape, &p, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Layer shapes for an `h x w` input.
    pub fn catalog(&self, name: &str, h: usize, w: usize) -> ShapeCatalog {
        let mut cat = ShapeCatalog::new(name);
        let (mut h, mut w) = (h, w);
        let conv = |cat: &mut ShapeCatalog, n: String, c: &Conv2d, h: &mut usize, w: &mut usize| {
            *h = (*h + 2 * c.pad - c.k) / c.stride + 1;
            *w = (*w + 2 * c.pad - c.k) / c.stride + 1;
            cat.push(
                n,
                None,
                false,
                LayerShape::Conv {
                    cin: c.cin,
                    cout: c.cout,
                    k: c.k,
                    h: *h,
                    w: *w,
                },
            );
        };
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv(c) => conv(&mut cat, format!("{name}.l{i}"), c, &mut h, &mut w),
                Layer::Silu => {}
                Layer::Up => {
                    h *= 2;
                    w *= 2;
                }
                Layer::Res(a, b) => {
                    conv(&mut cat, format!("{name}.l{i}.a"), a, &mut h, &mut w);
                    conv(&mut cat, format!("{name}.l{i}.b"), b, &mut h, &mut w);
                }
            }
        }
        cat
    }
}

#[derive(Clone, Debug)]
pub struct AutoencoderPair {
    pub big_encoder: ConvStack,
    pub big_decoder: ConvStack,
    pub tiny_encoder: ConvStack,
    pub tiny_decoder: ConvStack,
    /// Multiplies raw encoder outputs; set to `1 / std` of big latents by training.
    pub latent_scale: f64,
}

fn check_image(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch {
            expected: vec![b, 3, h, w],
            got: x.shape().to_vec(),
        });
    }
    if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("image {h}x{w} not divisible by {DOWNSAMPLE}")));
    }
    Ok((b, h, w))
}

fn to_signed(x: &Tensor) -> Tensor {
    x.map(|v| 2.0 * v - 1.0)
}

impl AutoencoderPair {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            big_encoder: ConvStack::new(&big_encoder_spec(), rng),
            big_decoder: ConvStack::new(&big_decoder_spec(), rng),
            tiny_encoder: ConvStack::new(&tiny_encoder_spec(), rng),
            tiny_decoder: ConvStack::new(&tiny_decoder_spec(), rng),
            latent_scale: 1.0,
        }
    }

    fn encoder(&self, which: Which) -> &ConvStack {
        match which {
            Which::Big => &self.big_encoder,
            Which::Tiny => &self.tiny_encoder,
        }
    }

    fn decoder(&self, which: Which) -> &ConvStack {
        match which {
            Which::Big => &self.big_decoder,
            Which::Tiny => &self.tiny_decoder,
        }
    }

    pub fn encode(&self, image: &Tensor, which: Which) -> Result<Tensor> {
        check_image(image)?;
        Ok(self.encoder(which).run(&to_signed(image))?.scale(self.latent_scale))
    }

    /// Images clipped to `[0, 1]`.
    pub fn decode(&self, latent: &Tensor, which: Which) -> Result<Tensor> {
        let (b, c, h, w) = latent.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(Error::ShapeMismatch {
                expected: vec![b, LATENT_CHANNELS, h, w],
                got: latent.shape().to_vec(),
            });
        }
        let out = self.decoder(which).run(&latent.scale(1.0 / self.latent_scale))?;
        Ok(out.map(|v| (0.5 * (v + 1.0)).clamp(0.0, 1.0)))
    }

    pub fn roundtrip(&self, image: &Tensor, enc: Which, dec: Which) -> Result<Tensor> {
        self.decode(&self.encode(image, enc)?, dec)
    }

    /// Encode + decode layer shapes for one `h x w` image.
    pub fn catalog(&self, which: Which, h: usize, w: usize) -> ShapeCatalog {
        let e = self.encoder(which).catalog(&format!("{which}-encoder"), h, w);
        let d = self.decoder(which).catalog(&format!("{which}-decoder"), h / DOWNSAMPLE, w / DOWNSAMPLE);
        e.concat(&d)
    }

    /// All four parameter sets in one store, names prefixed by role.
    pub fn params(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (prefix, net) in self.parts() {
            for (n, t) in net.params.iter() {
                out.add(format!("{prefix}.{n}"), t.clone());
            }
        }
        out.add("latent_scale", Tensor::scalar(self.latent_scale));
        out
    }

    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        let mut expected = 1;
        for (prefix, net) in self.parts_mut() {
            for (n, t) in net.params.iter_mut() {
                let src = store
                    .by_name(&format!("{prefix}.{n}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {prefix}.{n}")))?;
                crate::error::ensure_shape(t.shape(), src.shape())?;
                *t = src.clone();
                expected += 1;
            }
        }
        if store.len() != expected {
            return Err(Error::Checkpoint(format!("expected {expected} autoencoder tensors, got {}", store.len())));
        }
        self.latent_scale = store
            .by_name("latent_scale")
            .ok_or_else(|| Error::Checkpoint("missing latent_scale".into()))?
            .data()[0];
        Ok(())
    }

    fn parts(&self) -> [(&'static str, &ConvStack); 4] {
        [
            ("big_encoder", &self.big_encoder),
            ("big_decoder", &self.big_decoder),
            ("tiny_encoder", &self.tiny_encoder),
            ("tiny_decoder", &self.tiny_decoder),
        ]
    }

    fn parts_mut(&mut self) -> [(&'static str, &mut ConvStack); 4] {
        [
            ("big_encoder", &mut self.big_encoder),
            ("big_decoder", &mut self.big_decoder),
            ("tiny_encoder", &mut self.tiny_encoder),
            ("tiny_decoder", &mut self.tiny_decoder),
        ]
    }
}

/// `10 log10(1 / mse)` for images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = a.mse(b)?;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean squared per-element gap between big and tiny latents.
pub fn latent_gap(pair: &AutoencoderPair, images: &Tensor) -> Result<f64> {
    pair.encode(images, Which::Big)?.mse(&pair.encode(images, Which::Tiny)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderTrainConfig {
    pub big_iters: usize,
    pub tiny_iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub tiny_lr: f64,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        Self {
            big_iters: 2000,
            tiny_iters: 2000,
            batch: 8,
            lr: 1e-3,
            tiny_lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderTrainLog {
    pub big_recon: Vec<f64>,
    pub tiny_distill: Vec<f64>,
    pub tiny_recon: Vec<f64>,
}

fn minibatch<R: Rng + ?Sized>(corpus: &[Tensor], batch: usize, rng: &mut R) -> Result<Tensor> {
    let idx: Vec<usize> = if batch <= corpus.len() {
        sample(rng, corpus.len(), batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..corpus.len())).collect()
    };
    let items: Vec<&Tensor> = idx.iter().map(|&i| &corpus[i]).collect();
    let (c, h, w) = match items[0].shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::InvalidArgument(format!("corpus images must be (3, H, W), got {s:?}")));
        }
    };
    let mut data = Vec::with_capacity(batch * c * h * w);
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[batch, c, h, w], data)
}

fn finite(stage: &str, iteration: usize, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged {
            stage: stage.into(),
            iteration,
        })
    }
}

/// Train the big pair by reconstruction, fix `latent_scale`, then distill
/// the tiny encoder onto big latents and fit the tiny decoder to
/// reconstruct from big latents. `corpus` holds `(3, H, W)` images.
pub fn train_pair<R: Rng + ?Sized>(
    pair: &mut AutoencoderPair,
    corpus: &[Tensor],
    cfg: &AutoencoderTrainConfig,
    rng: &mut R,
) -> Result<AutoencoderTrainLog> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("autoencoder corpus is empty".into()));
    }
    if cfg.batch == 0 || cfg.lr <= 0.0 || cfg.tiny_lr <= 0.0 {
        return Err(Error::InvalidArgument("batch and learning rates must be positive".into()));
    }
    let mut log = AutoencoderTrainLog::default();
    if cfg.big_iters > 0 {
        let mut oe = Adam::new(&pair.big_encoder.params, cfg.lr);
        let mut od = Adam::new(&pair.big_decoder.params, cfg.lr);
        for it in 0..cfg.big_iters {
            let x = to_signed(&minibatch(corpus, cfg.batch, rng)?);
            let mut tape = Tape::new();
            let pe = pair.big_encoder.params.bind(&mut tape, true);
            let pd = pair.big_decoder.params.bind(&mut tape, true);
            let xv = tape.constant(x);
            let z = pair.big_encoder.graph(&mut tape, &pe, xv)?;
            let y = pair.big_decoder.graph(&mut tape, &pd, z)?;
            // MSE on signed values is 4x the [0, 1] MSE.
            let l = tape.mse(y, xv)?;
            let loss = tape.scale(l, 0.25);
            log.big_recon.push(finite("autoencoder.big", it, tape.value(loss).data()[0])?);
            let g = tape.backward(loss)?;
            oe.update(&mut pair.big_encoder.params, &pe.grads(&g))?;
            od.update(&mut pair.big_decoder.params, &pd.grads(&g))?;
        }
        let probe = minibatch(corpus, corpus.len().min(64), rng)?;
        let raw = pair.big_encoder.run(&to_signed(&probe))?;
        let mean = raw.mean();
        let std = (raw.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();
        if std > 0.0 && std.is_finite() {
            pair.latent_scale = 1.0 / std;
        }
    }
    if cfg.tiny_iters > 0 {
        let mut oe = Adam::new(&pair.tiny_encoder.params, cfg.tiny_lr);
        let mut od = Adam::new(&pair.tiny_decoder.params, cfg.tiny_lr);
        let s = pair.latent_scale;
        for it in 0..cfg.tiny_iters {
            let x = to_signed(&minibatch(corpus, cfg.batch, rng)?);
            let target = pair.big_encoder.run(&x)?;
            let mut tape = Tape::new();
            let pe = pair.tiny_encoder.params.bind(&mut tape, true);
            let pd = pair.tiny_decoder.params.bind(&mut tape, true);
            let xv = tape.constant(x);
            let tv = tape.constant(target);
            let z = pair.tiny_encoder.graph(&mut tape, &pe, xv)?;
            let d = tape.mse(z, tv)?;
            let distill = tape.scale(d, s * s);
            let y = pair.tiny_decoder.graph(&mut tape, &pd, tv)?;
            let r = tape.mse(y, xv)?;
            let recon = tape.scale(r, 0.25);
            log.tiny_distill.push(finite("autoencoder.tiny_encoder", it, tape.value(distill).data()[0])?);
            log.tiny_recon.push(finite("autoencoder.tiny_decoder", it, tape.value(recon).data()[0])?);
            let total = tape.add(distill, recon)?;
            let g = tape.backward(total)?;
            oe.update(&mut pair.tiny_encoder.params, &pe.grads(&g))?;
            od.update(&mut pair.tiny_decoder.params, &pd.grads(&g))?;
        }
    }
    Ok(log)
}

/// Stack `(3, H, W)` images into one batch.
pub fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<Tensor> = images
        .iter()
        .map(|t| {
            let s = t.shape().to_vec();
            t.clone().reshape(&[1, s[0], s[1], s[2]])
        })
        .collect::<Result<_>>()?;
    Tensor::concat_batch(&refs.iter().collect::<Vec<_>>())
}

/// Window means of `losses`, in order.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    losses.chunks(window.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::flops_of;
    use crate::synthdata::{triplet_at, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn images(n: u64, split: Split) -> Vec<Tensor> {
        (0..n).map(|i| triplet_at(1, i, split).unwrap().source).collect()
    }

    #[test]
    fn shape_contract_and_determinism() {
        let pair = AutoencoderPair::new(&mut ChaCha8Rng::seed_from_u64(0));
        let x = stack_images(&images(2, Split::Val)).unwrap();
        for which in [Which::Big, Which::Tiny] {
            let z = pair.encode(&x, which).unwrap();
            assert_eq!(z.shape(), &[2, 4, 8, 8]);
            assert_eq!(z, pair.encode(&x, which).unwrap());
            let y = pair.decode(&z, which).unwrap();
            assert_eq!(y.shape(), &[2, 3, 64, 64]);
        }
        assert!(pair.encode(&Tensor::zeros(&[1, 3, 60, 64]), Which::Big).is_err());
        assert!(pair.decode(&Tensor::zeros(&[1, 3, 8, 8]), Which::Tiny).is_err());
        let y = pair.decode(&Tensor::zeros(&[1, 4, 8, 8]), Which::Big).unwrap();
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tiny_is_far_cheaper() {
        let pair = AutoencoderPair::new(&mut ChaCha8Rng::seed_from_u64(0));
        let big = flops_of(&pair.catalog(Which::Big, 64, 64));
        let tiny = flops_of(&pair.catalog(Which::Tiny, 64, 64));
        assert!(tiny < 0.15 * big, "tiny {tiny} big {big}");
        // First big conv: 3 -> 32, 3x3, stride 2 onto 32x32.
        let first = &pair.catalog(Which::Big, 64, 64).layers[0];
        assert_eq!(crate::costmodel::layer_flops(&first.shape, Default::default()), 2.0 * 3.0 * 32.0 * 9.0 * 1024.0);
    }

    #[test]
    fn zero_iterations_leave_pair_unchanged() {
        let mut pair = AutoencoderPair::new(&mut ChaCha8Rng::seed_from_u64(0));
        let before = pair.params();
        let cfg = AutoencoderTrainConfig {
            big_iters: 0,
            tiny_iters: 0,
            ..Default::default()
        };
        train_pair(&mut pair, &images(2, Split::Train), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(pair.params(), before);
        assert!(train_pair(&mut pair, &[], &cfg, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn params_roundtrip() {
        let mut a = AutoencoderPair::new(&mut ChaCha8Rng::seed_from_u64(0));
        let mut b = AutoencoderPair::new(&mut ChaCha8Rng::seed_from_u64(9));
        a.latent_scale = 0.7;
        b.load_params(&a.params()).unwrap();
        assert_eq!(b.params(), a.params());
    }

    #[test]
    fn short_training_reduces_loss() {
        let mut pair = AutoencoderPair::new(&mut ChaCha8Rng::seed_from_u64(0));
        let cfg = AutoencoderTrainConfig {
            big_iters: 30,
            tiny_iters: 30,
            batch: 4,
            ..Default::default()
        };
        let log = train_pair(&mut pair, &images(16, Split::Train), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for curve in [&log.big_recon, &log.tiny_distill, &log.tiny_recon] {
            let s = smoothed(curve, 10);
            assert!(s.last().unwrap() < s.first().unwrap(), "{s:?}");
        }
        assert!(pair.latent_scale.is_finite() && pair.latent_scale > 0.0);
    }
}
