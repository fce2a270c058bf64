//! Video editing with a shared anchor frame, plus clip I/O and the
//! temporal-consistency score.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoencoderPair, Which};
use crate::costmodel::Variant;
use crate::denoiser::{AttentionContext, Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::{default_method, guided_output, GuidanceMode, NfeCounter};
use crate::schedules::{make_schedule, sampler_step, NoiseSchedule, Prediction, SamplerMethod, ScheduleKind};
use crate::synthdata::{load_png, save_png};
use crate::tensor::Tensor;

const CONSISTENCY_DIM: usize = 128;
const CONSISTENCY_SEED: u64 = 0xc0_75_15;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `(3, H, W)` frames in `[0, 1]`.
    pub frames: Vec<Tensor>,
    pub fps: f64,
}

impl VideoClip {
    pub fn new(frames: Vec<Tensor>, fps: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("a clip needs at least one frame".into()))?
            .shape()
            .to_vec();
        if first.len() != 3 || first[0] != 3 || first[1] % 8 != 0 || first[2] % 8 != 0 || first[1] == 0 || first[2] == 0 {
            return Err(Error::InvalidArgument(format!(
                "frames must be (3, H, W) with H, W positive multiples of 8, got {first:?}"
            )));
        }
        for f in &frames {
            crate::error::ensure_shape(&first, f.shape())?;
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W)`
    pub fn dims(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }

    /// Frames stacked as one `(N, 3, H, W)` batch.
    pub fn to_batch(&self) -> Result<Tensor> {
        let (h, w) = self.dims();
        let mut data = Vec::with_capacity(self.len() * 3 * h * w);
        for f in &self.frames {
            data.extend_from_slice(f.data());
        }
        Tensor::new(&[self.len(), 3, h, w], data)
    }

    pub fn from_batch(batch: &Tensor, fps: f64) -> Result<Self> {
        let (n, c, h, w) = batch.dims4()?;
        let frames = (0..n)
            .map(|i| batch.batch_item(i)?.reshape(&[c, h, w]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, fps)
    }
}

/// The middle frame; for even counts the later of the two central frames.
pub fn select_anchor(n_frames: usize) -> Result<usize> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("a clip needs at least one frame".into()));
    }
    Ok(n_frames / 2)
}

fn projection(rows: usize, cols: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(CONSISTENCY_SEED);
    (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn frame_features(frame: &Tensor, proj: &[f64]) -> Vec<f64> {
    let mean = frame.mean();
    let n = frame.len();
    proj.chunks(n)
        .map(|row| row.iter().zip(frame.data()).map(|(p, x)| p * (x - mean)).sum())
        .collect()
}

/// Mean cosine similarity between random projections of consecutive
/// mean-centered frames.
pub fn frame_consistency(clip: &VideoClip) -> Result<f64> {
    if clip.len() < 2 {
        return Err(Error::InvalidArgument("frame consistency needs at least two frames".into()));
    }
    let proj = projection(CONSISTENCY_DIM, clip.frames[0].len());
    let feats: Vec<Vec<f64>> = clip.frames.iter().map(|f| frame_features(f, &proj)).collect();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            if na == nb {
                1.0
            } else {
                0.0
            }
        } else {
            dot / (na * nb)
        }
    };
    let total: f64 = feats.windows(2).map(|w| cos(&w[0], &w[1])).sum();
    Ok(total / (feats.len() - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawClipHeader {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
}

/// Read a clip from a directory of numbered PNG frames or from a raw
/// little-endian `f32` file with a `.json` sidecar.
pub fn read_clip(path: &Path) -> Result<VideoClip> {
    if path.is_dir() {
        let mut names: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        names.sort();
        let fps = fs::read_to_string(path.join("clip.json"))
            .ok()
            .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
            .and_then(|v| v["fps"].as_f64())
            .unwrap_or(8.0);
        let frames = names.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?;
        return VideoClip::new(frames, fps);
    }
    let header: RawClipHeader = serde_json::from_str(&fs::read_to_string(path.with_extension("json"))?)?;
    let bytes = fs::read(path)?;
    let per = header.channels * header.height * header.width;
    if bytes.len() != 4 * per * header.frames {
        return Err(Error::InvalidArgument(format!(
            "raw clip has {} bytes, header implies {}",
            bytes.len(),
            4 * per * header.frames
        )));
    }
    let values: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let frames = values
        .chunks(per)
        .map(|c| Tensor::new(&[header.channels, header.height, header.width], c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    VideoClip::new(frames, header.fps)
}

/// Write numbered PNG frames into a directory.
pub fn write_clip_pngs(dir: &Path, clip: &VideoClip) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in clip.frames.iter().enumerate() {
        save_png(&dir.join(format!("frame_{i:05}.png")), f)?;
    }
    fs::write(dir.join("clip.json"), serde_json::to_string(&serde_json::json!({ "fps": clip.fps }))?)?;
    Ok(())
}

/// Write a raw `f32` clip and its `.json` sidecar.
pub fn write_clip_raw(path: &Path, clip: &VideoClip) -> Result<()> {
    let (h, w) = clip.dims();
    let header = RawClipHeader {
        frames: clip.len(),
        channels: 3,
        height: h,
        width: w,
        fps: clip.fps,
    };
    let mut bytes = Vec::with_capacity(4 * 3 * h * w * clip.len());
    for f in &clip.frames {
        for v in f.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

/// Write in the same layout `read_clip` would accept from `like`.
pub fn write_clip_like(path: &Path, clip: &VideoClip, like: &Path) -> Result<()> {
    if like.is_dir() {
        write_clip_pngs(path, clip)
    } else {
        write_clip_raw(path, clip)
    }
}

/// One editing job applied to every frame of a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub instruction: usize,
    pub s_image: f64,
    pub s_text: f64,
    pub steps: usize,
    pub variant: Variant,
    pub encoder: Which,
    pub decoder: Which,
    /// Attend to the anchor frame's keys and values instead of each
    /// frame's own.
    pub cross_frame: bool,
    /// Seed of the initial noise shared by all frames.
    pub seed: u64,
}

impl EditRequest {
    /// Defaults for `variant`: its step count and autoencoder pairing.
    pub fn new(instruction: usize, variant: Variant) -> Self {
        let ae = if variant.tiny_autoencoder() { Which::Tiny } else { Which::Big };
        Self {
            instruction,
            s_image: 1.5,
            s_text: 7.5,
            steps: variant.default_steps(),
            variant,
            encoder: Which::Big,
            decoder: ae,
            cross_frame: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::Adversarial1Step && self.steps != 1 {
            return Err(Error::PipelineMismatch(format!(
                "the adversarial student runs 1 step, not {}",
                self.steps
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        crate::synthdata::encode_instruction(self.instruction)?;
        Ok(())
    }

    fn mode(&self) -> GuidanceMode {
        if self.variant.passes_per_step() == 3 {
            GuidanceMode::Multipass
        } else {
            GuidanceMode::Distilled
        }
    }
}

/// Work done by one [`edit_video`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounters {
    pub nfe: NfeCounter,
    /// Frames through the encoder.
    pub encoder_calls: usize,
    /// Frames through the decoder.
    pub decoder_calls: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditOutput {
    pub clip: VideoClip,
    pub counters: EditCounters,
}

/// Sampling schedule for a variant: the 1000-step VP grid for the
/// multi-step models, 8 Euler levels for the single-step student.
pub fn variant_schedule(variant: Variant, prediction: Prediction) -> Result<NoiseSchedule> {
    match variant {
        Variant::Adversarial1Step => make_schedule(ScheduleKind::EulerDiscrete, 8, prediction),
        _ => make_schedule(ScheduleKind::VpLinear, crate::schedules::TRAIN_TIMESTEPS, prediction),
    }
}

/// Native latent at the noisiest sampled level for unit noise `z`.
pub fn initial_latent(sched: &NoiseSchedule, z: &Tensor) -> Result<Tensor> {
    let (a, s) = sched.coeffs(sched.num_steps - 1)?;
    Ok(match sched.kind {
        ScheduleKind::EulerDiscrete => z.scale(s / a),
        _ => z.clone(),
    })
}

/// Edit every frame of `clip`. All frames start from the same noise; with
/// `cross_frame`, the anchor's keys and values are captured at every step
/// and every other frame attends to them.
pub fn edit_video(clip: &VideoClip, req: &EditRequest, ae: &AutoencoderPair, model: &Denoiser) -> Result<EditOutput> {
    req.validate()?;
    let sched = variant_schedule(req.variant, model.prediction())?;
    let mode = req.mode();
    let n = clip.len();
    let mut counters = EditCounters::default();

    let latents = ae.encode(&clip.to_batch()?, req.encoder)?;
    counters.encoder_calls += n;
    let text = crate::synthdata::encode_instructions(&vec![req.instruction; n])?;
    let cond = Conditioning::new(Some(latents.clone()), Some(text)).with_scales(vec![req.s_image; n], vec![req.s_text; n]);

    let (_, c, h, w) = latents.dims4()?;
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let z = Tensor::randn(&[1, c, h, w], &mut rng);
    let mut x = initial_latent(&sched, &z)?.repeat_batch(n)?;

    let anchor = select_anchor(n)?;
    let others: Vec<usize> = (0..n).filter(|&i| i != anchor).collect();
    let cond_anchor = cond.gather(&[anchor])?;
    let cond_others = cond.gather(&others)?;
    let method = default_method(&sched);
    let ts = sched.timesteps(req.steps)?;
    for (k, &t) in ts.iter().enumerate() {
        let next = ts.get(k + 1).copied();
        let out = if req.cross_frame && n > 1 {
            let xa = x.gather_batch(&[anchor])?;
            let (oa, kv) = guided_output(model, mode, &xa, t, &sched, &cond_anchor, &[], true, &mut counters.nfe)?;
            let ctx = kv
                .unwrap_or_default()
                .into_iter()
                .map(|kv| AttentionContext::cross_frame(vec![kv]))
                .collect::<Result<Vec<_>>>()?;
            let xo = x.gather_batch(&others)?;
            let (oo, _) = guided_output(model, mode, &xo, t, &sched, &cond_others, &ctx, false, &mut counters.nfe)?;
            let mut parts = (0..oo.batch()).map(|i| oo.batch_item(i)).collect::<Result<Vec<_>>>()?;
            parts.insert(anchor, oa);
            Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())?
        } else {
            guided_output(model, mode, &x, t, &sched, &cond, &[], false, &mut counters.nfe)?.0
        };
        let fresh = match (method, next) {
            (SamplerMethod::Lcm, Some(_)) => Some(Tensor::randn(x.shape(), &mut rng)),
            _ => None,
        };
        x = sampler_step(&out, &x, t, next, &sched, method, fresh.as_ref())?;
        counters.nfe.steps += 1;
    }

    let frames = ae.decode(&x, req.decoder)?;
    counters.decoder_calls += n;
    Ok(EditOutput {
        clip: VideoClip::from_batch(&frames, clip.fps)?,
        counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::gen_video;

    #[test]
    fn anchor_rule() {
        assert_eq!(select_anchor(1).unwrap(), 0);
        assert_eq!(select_anchor(7).unwrap(), 3);
        assert_eq!(select_anchor(120).unwrap(), 60);
        assert_eq!(select_anchor(4).unwrap(), 2);
        assert!(select_anchor(0).is_err());
    }

    #[test]
    fn consistency_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::uniform(&[3, 8, 8], 1.0, &mut rng);
        let same = VideoClip::new(vec![f.clone(), f.clone(), f.clone()], 8.0).unwrap();
        assert!((frame_consistency(&same).unwrap() - 1.0).abs() < 1e-12);
        let anti = VideoClip::new(vec![f.clone(), f.scale(-1.0)], 8.0).unwrap();
        assert!((frame_consistency(&anti).unwrap() + 1.0).abs() < 1e-12);
        assert!(frame_consistency(&VideoClip::new(vec![f], 8.0).unwrap()).is_err());
    }

    #[test]
    fn consistency_matches_reference_loop() {
        let (clip, _) = gen_video(&mut ChaCha8Rng::seed_from_u64(3), 5, 1).unwrap();
        let n = clip.frames[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(CONSISTENCY_SEED);
        let mut p = vec![vec![0.0; n]; CONSISTENCY_DIM];
        for row in p.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        let mut feats = Vec::new();
        for f in &clip.frames {
            let m = f.data().iter().sum::<f64>() / n as f64;
            let mut feat = vec![0.0; CONSISTENCY_DIM];
            for (d, row) in p.iter().enumerate() {
                for j in 0..n {
                    feat[d] += row[j] * (f.data()[j] - m);
                }
            }
            feats.push(feat);
        }
        let mut total = 0.0;
        for i in 0..feats.len() - 1 {
            let (a, b) = (&feats[i], &feats[i + 1]);
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for d in 0..CONSISTENCY_DIM {
                dot += a[d] * b[d];
                na += a[d] * a[d];
                nb += b[d] * b[d];
            }
            total += dot / (na.sqrt() * nb.sqrt());
        }
        let want = total / (feats.len() - 1) as f64;
        assert!((frame_consistency(&clip).unwrap() - want).abs() < 1e-6);
        assert!(want > 0.9, "default motion should be smooth: {want}");
    }

    #[test]
    fn clip_io_roundtrip() {
        let (clip, _) = gen_video(&mut ChaCha8Rng::seed_from_u64(6), 3, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("clip.f32");
        write_clip_raw(&raw, &clip).unwrap();
        let back = read_clip(&raw).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back.frames[1].sub(&clip.frames[1]).unwrap().max_abs() < 1e-6);
        let pngs = dir.path().join("frames");
        write_clip_pngs(&pngs, &clip).unwrap();
        let back = read_clip(&pngs).unwrap();
        assert_eq!(back.len(), 3);
        assert!(back.frames[2].sub(&clip.frames[2]).unwrap().max_abs() <= 0.5 / 255.0 + 1e-9);
    }
    fn toy_models(guided: bool) -> (AutoencoderPair, Denoiser) {
        let cfg = crate::denoiser::DenoiserConfig {
            base_channels: 8,
            embed_dim: 16,
            guidance_conditioned: guided,
            ..crate::denoiser::DenoiserConfig::toy()
        };
        let ae = AutoencoderPair::new(&mut ChaCha8Rng::seed_from_u64(0));
        (ae, crate::denoiser::build_denoiser(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap())
    }

    #[test]
    fn one_frame_clip_is_single_image_editing() {
        let (ae, model) = toy_models(false);
        let (clip, _) = gen_video(&mut ChaCha8Rng::seed_from_u64(3), 1, 2).unwrap();
        let req = EditRequest {
            steps: 3,
            ..EditRequest::new(2, Variant::BaseMultipass)
        };
        let got = edit_video(&clip, &req, &ae, &model).unwrap();

        let src = ae.encode(&clip.to_batch().unwrap(), Which::Big).unwrap();
        let cond = Conditioning::new(Some(src), Some(crate::synthdata::encode_instructions(&[2]).unwrap()))
            .with_scales(vec![1.5], vec![7.5]);
        let sched = make_schedule(ScheduleKind::VpLinear, 1000, Prediction::Epsilon).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::randn(&[1, 4, 8, 8], &mut rng);
        let mut nfe = NfeCounter::new();
        let x = crate::guidance::edit_multipass(&model, &z, &cond, &sched, 3, &mut rng, &mut nfe).unwrap();
        let want = ae.decode(&x, Which::Big).unwrap();
        assert_eq!(got.clip.frames[0], want.batch_item(0).unwrap().reshape(&[3, 64, 64]).unwrap());
        assert_eq!(got.counters.nfe, nfe);
    }

    #[test]
    fn cost_is_linear_in_frames() {
        let (ae, model) = toy_models(true);
        for n in [1, 4, 16] {
            let (clip, _) = gen_video(&mut ChaCha8Rng::seed_from_u64(3), n, 1).unwrap();
            let req = EditRequest {
                steps: 2,
                ..EditRequest::new(1, Variant::GuidanceDistilled)
            };
            let out = edit_video(&clip, &req, &ae, &model).unwrap();
            assert_eq!(out.counters.nfe.denoiser_calls, 2 * n);
            assert_eq!((out.counters.encoder_calls, out.counters.decoder_calls), (n, n));
            assert_eq!(out.clip.len(), n);
            assert_eq!(out.clip.dims(), clip.dims());
        }
    }

    #[test]
    fn request_checks() {
        let (ae, model) = toy_models(true);
        let (clip, _) = gen_video(&mut ChaCha8Rng::seed_from_u64(3), 2, 1).unwrap();
        let req = EditRequest {
            steps: 2,
            ..EditRequest::new(1, Variant::Adversarial1Step)
        };
        assert_eq!(edit_video(&clip, &req, &ae, &model).unwrap_err().kind(), "pipeline_mismatch");
        let req = EditRequest::new(1, Variant::BaseMultipass);
        assert_eq!(edit_video(&clip, &req, &ae, &model).unwrap_err().kind(), "pipeline_mismatch");
        assert_eq!(EditRequest::new(1, Variant::MobilePruned).decoder, Which::Tiny);
    }
}
