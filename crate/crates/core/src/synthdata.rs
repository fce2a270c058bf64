//! Procedural edit triplets and clips: colored shapes on a background,
//! a fixed vocabulary of exact image transforms, and the toy instruction
//! encoder.
//!
//! Images are `(3, H, W)` tensors with values in `[0, 1]`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::videoedit::VideoClip;

pub const IMAGE_SIZE: usize = 64;
pub const NULL_INSTRUCTION: usize = 0;
pub const TOKENS_PER_INSTRUCTION: usize = 4;
pub const TOKEN_DIM: usize = 32;
/// Strength used by brighten/darken when none is given.
pub const DEFAULT_STRENGTH: f64 = 0.35;
const TOKEN_TABLE_SEED: u64 = 0x70_6b_65_6e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Instruction {
    RecolorRed,
    RecolorBlue,
    Invert,
    AddBorder,
    Brighten,
    Darken,
    SwapChannels,
    Blur,
}

/// The instruction table; ids start at 1, id 0 is NULL.
pub const VOCAB: [Instruction; 8] = [
    Instruction::RecolorRed,
    Instruction::RecolorBlue,
    Instruction::Invert,
    Instruction::AddBorder,
    Instruction::Brighten,
    Instruction::Darken,
    Instruction::SwapChannels,
    Instruction::Blur,
];

impl Instruction {
    pub fn from_id(id: usize) -> Result<Self> {
        match id {
            1..=8 => Ok(VOCAB[id - 1]),
            _ => Err(Error::OutOfRange {
                what: "instruction id",
                index: id,
                len: VOCAB.len() + 1,
            }),
        }
    }

    pub fn id(self) -> usize {
        VOCAB.iter().position(|&i| i == self).unwrap() + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RecolorRed => "recolor-red",
            Self::RecolorBlue => "recolor-blue",
            Self::Invert => "invert",
            Self::AddBorder => "add-border",
            Self::Brighten => "brighten",
            Self::Darken => "darken",
            Self::SwapChannels => "swap-channels",
            Self::Blur => "blur",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        VOCAB
            .iter()
            .copied()
            .find(|i| i.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown instruction {name:?}")))
    }
}

const BORDER: usize = 4;
const BORDER_COLOR: [f64; 3] = [1.0, 1.0, 0.0];

fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::ShapeMismatch {
            expected: vec![3, s.get(1).copied().unwrap_or(0), s.get(2).copied().unwrap_or(0)],
            got: s.to_vec(),
        }),
    }
}

/// Apply an edit; `strength` only affects brighten and darken.
pub fn apply_instruction_with(img: &Tensor, id: usize, strength: f64) -> Result<Tensor> {
    let instr = Instruction::from_id(id)?;
    let (h, w) = image_dims(img)?;
    let hw = h * w;
    let d = img.data();
    let mut out = d.to_vec();
    match instr {
        Instruction::RecolorRed | Instruction::RecolorBlue => {
            let tint = if instr == Instruction::RecolorRed {
                [1.0, 0.2, 0.2]
            } else {
                [0.2, 0.2, 1.0]
            };
            for p in 0..hw {
                let l = luminance(d[p], d[hw + p], d[2 * hw + p]);
                for c in 0..3 {
                    out[c * hw + p] = l * tint[c];
                }
            }
        }
        Instruction::Invert => out.iter_mut().for_each(|v| *v = 1.0 - *v),
        Instruction::AddBorder => {
            for y in 0..h {
                for x in 0..w {
                    if y < BORDER || x < BORDER || y >= h - BORDER || x >= w - BORDER {
                        for c in 0..3 {
                            out[c * hw + y * w + x] = BORDER_COLOR[c];
                        }
                    }
                }
            }
        }
        Instruction::Brighten => out.iter_mut().for_each(|v| *v += strength * (1.0 - *v)),
        Instruction::Darken => out.iter_mut().for_each(|v| *v *= 1.0 - strength),
        Instruction::SwapChannels => {
            // (r, g, b) -> (b, r, g)
            out[..hw].copy_from_slice(&d[2 * hw..]);
            out[hw..2 * hw].copy_from_slice(&d[..hw]);
            out[2 * hw..].copy_from_slice(&d[hw..2 * hw]);
        }
        Instruction::Blur => {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let mut s = 0.0;
                        for dy in [-1i64, 0, 1] {
                            for dx in [-1i64, 0, 1] {
                                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                                s += d[c * hw + yy * w + xx];
                            }
                        }
                        out[c * hw + y * w + x] = s / 9.0;
                    }
                }
            }
        }
    }
    Tensor::new(img.shape(), out)
}

pub fn apply_instruction(img: &Tensor, id: usize) -> Result<Tensor> {
    apply_instruction_with(img, id, DEFAULT_STRENGTH)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ShapeKind {
    Circle,
    Rect,
    Triangle,
}

#[derive(Clone, Debug, PartialEq)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    size: f64,
    aspect: f64,
    angle: f64,
    color: [f64; 3],
    vx: f64,
    vy: f64,
    spin: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Scene {
    background: [f64; 3],
    shapes: Vec<Shape>,
}

fn random_scene<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Scene {
    let s = size as f64;
    let background = [rng.random_range(0.0..0.35), rng.random_range(0.0..0.35), rng.random_range(0.0..0.35)];
    let n = rng.random_range(2..=4);
    let shapes = (0..n)
        .map(|_| {
            let kind = match rng.random_range(0..3) {
                0 => ShapeKind::Circle,
                1 => ShapeKind::Rect,
                _ => ShapeKind::Triangle,
            };
            Shape {
                kind,
                cx: rng.random_range(0.15 * s..0.85 * s),
                cy: rng.random_range(0.15 * s..0.85 * s),
                size: rng.random_range(0.12 * s..0.25 * s),
                aspect: rng.random_range(0.6..1.4),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                color: [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)],
                vx: 0.0,
                vy: 0.0,
                spin: 0.0,
            }
        })
        .collect();
    Scene { background, shapes }
}

/// Approximate signed distance in pixels, negative inside.
fn shape_distance(sh: &Shape, px: f64, py: f64, frame: f64) -> f64 {
    let cx = sh.cx + sh.vx * frame;
    let cy = sh.cy + sh.vy * frame;
    let a = sh.angle + sh.spin * frame;
    let (dx, dy) = (px - cx, py - cy);
    let (ca, sa) = (a.cos(), a.sin());
    let (lx, ly) = (ca * dx + sa * dy, -sa * dx + ca * dy);
    match sh.kind {
        ShapeKind::Circle => (dx * dx + dy * dy).sqrt() - sh.size,
        ShapeKind::Rect => (lx.abs() - sh.size * sh.aspect).max(ly.abs() - sh.size / sh.aspect),
        ShapeKind::Triangle => {
            let mut d = f64::NEG_INFINITY;
            for k in 0..3 {
                let t = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                d = d.max(lx * t.cos() + ly * t.sin() - 0.6 * sh.size);
            }
            d
        }
    }
}

fn render(scene: &Scene, size: usize, frame: f64) -> Tensor {
    let hw = size * size;
    let mut out = vec![0.0; 3 * hw];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut col = scene.background;
            for sh in &scene.shapes {
                let cover = (0.5 - shape_distance(sh, px, py, frame)).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for c in 0..3 {
                        col[c] += cover * (sh.color[c] - col[c]);
                    }
                }
            }
            for c in 0..3 {
                out[c * hw + y * size + x] = col[c];
            }
        }
    }
    Tensor::from_parts(vec![3, size, size], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditTriplet {
    pub source: Tensor,
    pub instruction_id: usize,
    pub edited: Tensor,
}

/// A random source image and its exact edit. With `instruction_id` absent
/// the edit is drawn uniformly from the vocabulary first.
pub fn gen_triplet<R: Rng + ?Sized>(rng: &mut R, instruction_id: Option<usize>) -> Result<EditTriplet> {
    let id = match instruction_id {
        Some(id) => {
            Instruction::from_id(id)?;
            id
        }
        None => rng.random_range(1..=VOCAB.len()),
    };
    let scene = random_scene(rng, IMAGE_SIZE);
    let source = render(&scene, IMAGE_SIZE, 0.0);
    let edited = apply_instruction(&source, id)?;
    Ok(EditTriplet {
        source,
        instruction_id: id,
        edited,
    })
}

/// Shapes drift and spin slowly; returns `(source, edited)` clips.
pub fn gen_video<R: Rng + ?Sized>(rng: &mut R, n_frames: usize, instruction_id: usize) -> Result<(VideoClip, VideoClip)> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("a clip needs at least one frame".into()));
    }
    Instruction::from_id(instruction_id)?;
    let mut scene = random_scene(rng, IMAGE_SIZE);
    for sh in &mut scene.shapes {
        sh.vx = rng.random_range(-0.8..0.8);
        sh.vy = rng.random_range(-0.8..0.8);
        sh.spin = rng.random_range(-0.04..0.04);
    }
    let mut src = Vec::with_capacity(n_frames);
    let mut dst = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let frame = render(&scene, IMAGE_SIZE, f as f64);
        dst.push(apply_instruction(&frame, instruction_id)?);
        src.push(frame);
    }
    Ok((VideoClip::new(src, 8.0)?, VideoClip::new(dst, 8.0)?))
}

/// Token embeddings `(4, 32)` for an instruction; id 0 is all zeros.
pub fn encode_instruction(instruction_id: usize) -> Result<Tensor> {
    let shape = [TOKENS_PER_INSTRUCTION, TOKEN_DIM];
    if instruction_id == NULL_INSTRUCTION {
        return Ok(Tensor::zeros(&shape));
    }
    Instruction::from_id(instruction_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(TOKEN_TABLE_SEED);
    rng.set_stream(instruction_id as u64);
    let data = (0..TOKENS_PER_INSTRUCTION * TOKEN_DIM).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(&shape, data)
}

/// `(B, 4, 32)` stack of instruction tokens.
pub fn encode_instructions(ids: &[usize]) -> Result<Tensor> {
    let parts = ids.iter().map(|&i| encode_instruction(i)).collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(parts.len() * TOKENS_PER_INSTRUCTION * TOKEN_DIM);
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::new(&[ids.len(), TOKENS_PER_INSTRUCTION, TOKEN_DIM], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Per-item seed: train items use even seeds, validation items odd ones.
pub fn item_seed(base_seed: u64, index: u64, split: Split) -> u64 {
    let slot = base_seed.wrapping_add(index).wrapping_mul(2);
    match split {
        Split::Train => slot,
        Split::Val => slot | 1,
    }
}

pub fn triplet_at(base_seed: u64, index: u64, split: Split) -> Result<EditTriplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(base_seed, index, split));
    gen_triplet(&mut rng, None)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub instruction_id: usize,
    pub seed: u64,
}

/// Write `n` triplets as PNG pairs plus `manifest.jsonl`.
pub fn write_corpus(dir: &Path, n: u64, base_seed: u64, split: Split) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir)?;
    let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    let mut entries = Vec::new();
    for i in 0..n {
        let seed = item_seed(base_seed, i, split);
        let t = gen_triplet(&mut ChaCha8Rng::seed_from_u64(seed), None)?;
        save_png(&dir.join(format!("{i:06}_source.png")), &t.source)?;
        save_png(&dir.join(format!("{i:06}_edited.png")), &t.edited)?;
        let e = ManifestEntry {
            index: i,
            instruction_id: t.instruction_id,
            seed,
        };
        writeln!(manifest, "{}", serde_json::to_string(&e)?)?;
        entries.push(e);
    }
    Ok(entries)
}

/// Load a corpus written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Vec<EditTriplet>> {
    let f = fs::File::open(dir.join("manifest.jsonl"))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)?;
        out.push(EditTriplet {
            source: load_png(&dir.join(format!("{:06}_source.png", e.index)))?,
            instruction_id: e.instruction_id,
            edited: load_png(&dir.join(format!("{:06}_edited.png", e.index)))?,
        });
    }
    Ok(out)
}

/// 8-bit RGB PNG; values are clipped to `[0, 1]`.
pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = image_dims(img)?;
    let hw = h * w;
    let d = img.data();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = (d[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe() -> Tensor {
        triplet_at(0, 3, Split::Train).unwrap().source
    }

    #[test]
    fn invert_is_one_minus_source() {
        let t = gen_triplet(&mut ChaCha8Rng::seed_from_u64(1), Some(Instruction::Invert.id())).unwrap();
        for (a, b) in t.source.data().iter().zip(t.edited.data()) {
            assert_eq!(*b, 1.0 - a);
        }
    }

    #[test]
    fn triplets_are_deterministic_and_closed() {
        for id in 1..=8 {
            let a = gen_triplet(&mut ChaCha8Rng::seed_from_u64(9), Some(id)).unwrap();
            let b = gen_triplet(&mut ChaCha8Rng::seed_from_u64(9), Some(id)).unwrap();
            assert_eq!(a, b);
            assert_eq!(apply_instruction(&a.source, id).unwrap(), a.edited);
            assert!(a.source.data().iter().chain(a.edited.data()).all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(gen_triplet(&mut ChaCha8Rng::seed_from_u64(9), Some(9)).is_err());
    }

    #[test]
    fn recolor_red_matches_reference() {
        let img = probe();
        let out = apply_instruction(&img, Instruction::RecolorRed.id()).unwrap();
        let hw = 64 * 64;
        let d = img.data();
        for p in 0..hw {
            let lum = 0.299 * d[p] + 0.587 * d[hw + p] + 0.114 * d[2 * hw + p];
            assert_eq!(out.data()[p], lum);
            assert_eq!(out.data()[hw + p], lum * 0.2);
            assert_eq!(out.data()[2 * hw + p], lum * 0.2);
        }
    }

    #[test]
    fn strength_is_monotone() {
        let img = probe();
        for id in [Instruction::Brighten.id(), Instruction::Darken.id()] {
            let mags: Vec<f64> = [0.1, 0.3, 0.5, 0.7]
                .iter()
                .map(|&s| apply_instruction_with(&img, id, s).unwrap().sub(&img).unwrap().sq_norm())
                .collect();
            assert!(mags.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn single_frame_video_matches_triplet() {
        let (src, dst) = gen_video(&mut ChaCha8Rng::seed_from_u64(4), 1, 2).unwrap();
        let t = gen_triplet(&mut ChaCha8Rng::seed_from_u64(4), Some(2)).unwrap();
        assert_eq!(src.frames[0], t.source);
        assert_eq!(dst.frames[0], t.edited);
        assert!(gen_video(&mut ChaCha8Rng::seed_from_u64(4), 0, 2).is_err());
    }

    #[test]
    fn consecutive_frames_change_slowly() {
        let (src, _) = gen_video(&mut ChaCha8Rng::seed_from_u64(5), 8, 3).unwrap();
        for w in src.frames.windows(2) {
            let delta = w[1].sub(&w[0]).unwrap().map(f64::abs).mean();
            assert!(delta < 0.2, "{delta}");
        }
    }

    #[test]
    fn instruction_tokens() {
        assert_eq!(encode_instruction(0).unwrap(), Tensor::zeros(&[4, 32]));
        assert_eq!(encode_instruction(3).unwrap(), encode_instruction(3).unwrap());
        let all: Vec<Tensor> = (0..=8).map(|i| encode_instruction(i).unwrap()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert!(all[i].sub(&all[j]).unwrap().sq_norm() > 0.0);
            }
        }
        assert!(encode_instruction(9).is_err());
        assert_eq!(encode_instructions(&[1, 0]).unwrap().shape(), &[2, 4, 32]);
    }

    #[test]
    fn splits_use_disjoint_seeds() {
        let train: Vec<u64> = (0..100).map(|i| item_seed(7, i, Split::Train)).collect();
        let val: Vec<u64> = (0..100).map(|i| item_seed(7, i, Split::Val)).collect();
        assert!(train.iter().all(|s| !val.contains(s)));
    }

    #[test]
    fn corpus_roundtrip_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ea = write_corpus(a.path(), 3, 11, Split::Train).unwrap();
        let eb = write_corpus(b.path(), 3, 11, Split::Train).unwrap();
        assert_eq!(ea, eb);
        assert_eq!(
            fs::read(a.path().join("manifest.jsonl")).unwrap(),
            fs::read(b.path().join("manifest.jsonl")).unwrap()
        );
        let loaded = read_corpus(a.path()).unwrap();
        let orig = triplet_at(11, 1, Split::Train).unwrap();
        assert_eq!(loaded[1].instruction_id, orig.instruction_id);
        assert!(loaded[1].source.sub(&orig.source).unwrap().max_abs() <= 0.5 / 255.0 + 1e-12);
    }
}
