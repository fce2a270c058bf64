//! Static FLOP and NFE accounting.
//!
//! One multiply-accumulate is 2 FLOPs; biases, norms and nonlinearities are
//! ignored. Attention counts its four projections plus the `QK^T` and `AV`
//! products unless [`FlopConvention::ProjectionsOnly`] is requested.

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttn,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerShape {
    /// `h`, `w` are the output spatial dims.
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        h: usize,
        w: usize,
    },
    Linear { din: usize, dout: usize, rows: usize },
    /// `tokens` queries of width `dim` attending over `kv_tokens` keys
    /// projected from width `kv_dim`.
    Attention {
        attn: AttentionKind,
        tokens: usize,
        kv_tokens: usize,
        dim: usize,
        kv_dim: usize,
        heads: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub name: String,
    /// Resolution level, `None` for global layers and the bottleneck.
    pub level: Option<usize>,
    /// Part of a transformer block (attention, its projections, feed-forward).
    #[serde(default)]
    pub transformer: bool,
    pub shape: LayerShape,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeCatalog {
    pub name: String,
    pub layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlopConvention {
    /// Attention matmuls counted.
    #[default]
    Full,
    /// Only weight-bearing layers, as parameter-driven profilers count.
    ProjectionsOnly,
}

/// What pruning a level removes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    /// Self- and cross-attention layers.
    #[default]
    Attention,
    /// Whole transformer blocks, feed-forward and projections included.
    Transformer,
}

/// FLOPs of one layer.
pub fn layer_flops(layer: &LayerShape, convention: FlopConvention) -> f64 {
    let f = |x: usize| x as f64;
    match *layer {
        LayerShape::Conv { cin, cout, k, h, w } => 2.0 * f(cin) * f(cout) * f(k * k) * f(h * w),
        LayerShape::Linear { din, dout, rows } => 2.0 * f(din) * f(dout) * f(rows),
        LayerShape::Attention {
            tokens,
            kv_tokens,
            dim,
            kv_dim,
            ..
        } => {
            let proj = 2.0 * (2.0 * f(tokens) * f(dim) * f(dim) + 2.0 * f(kv_tokens) * f(kv_dim) * f(dim));
            let mm = 2.0 * 2.0 * f(tokens) * f(kv_tokens) * f(dim);
            match convention {
                FlopConvention::Full => proj + mm,
                FlopConvention::ProjectionsOnly => proj,
            }
        }
    }
}

impl ShapeCatalog {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            layers: Vec::new(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidArgument(format!("bad shape catalog: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn push(&mut self, name: impl Into<String>, level: Option<usize>, transformer: bool, shape: LayerShape) {
        self.layers.push(Layer {
            name: name.into(),
            level,
            transformer,
            shape,
        });
    }

    pub fn concat(&self, other: &ShapeCatalog) -> ShapeCatalog {
        let mut out = self.clone();
        out.name = format!("{}+{}", self.name, other.name);
        out.layers.extend(other.layers.iter().cloned());
        out
    }

    pub fn levels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.layers.iter().filter_map(|l| l.level).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Catalog with the given levels' attention (or transformer) layers removed.
    pub fn pruned(&self, levels: &[usize], scope: PruneScope) -> Result<ShapeCatalog> {
        let present = self.levels();
        for l in levels {
            if !present.contains(l) {
                return Err(Error::InvalidArgument(format!("level {l} not in catalog {}", self.name)));
            }
        }
        let drop = |l: &Layer| {
            let hit = l.level.is_some_and(|lv| levels.contains(&lv));
            hit && match scope {
                PruneScope::Attention => matches!(l.shape, LayerShape::Attention { .. }),
                PruneScope::Transformer => l.transformer,
            }
        };
        Ok(ShapeCatalog {
            name: format!("{}-pruned{levels:?}", self.name),
            layers: self.layers.iter().filter(|l| !drop(l)).cloned().collect(),
        })
    }
}

/// Total GFLOPs of a catalog.
pub fn flops_of(catalog: &ShapeCatalog) -> f64 {
    flops_with(catalog, FlopConvention::Full)
}

pub fn flops_with(catalog: &ShapeCatalog, convention: FlopConvention) -> f64 {
    catalog.layers.iter().map(|l| layer_flops(&l.shape, convention)).sum::<f64>() / 1e9
}

/// `(full - pruned) / full` for removing attention at `levels`.
pub fn pruning_delta(catalog: &ShapeCatalog, levels: &[usize]) -> Result<f64> {
    pruning_delta_with(catalog, levels, PruneScope::Attention, FlopConvention::Full)
}

pub fn pruning_delta_with(catalog: &ShapeCatalog, levels: &[usize], scope: PruneScope, convention: FlopConvention) -> Result<f64> {
    let full = flops_with(catalog, convention);
    if full == 0.0 {
        return Ok(0.0);
    }
    let pruned = flops_with(&catalog.pruned(levels, scope)?, convention);
    Ok((full - pruned) / full)
}

/// Architecture summary of an SD-style conditional U-Net.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetSpec {
    pub name: String,
    pub latent_height: usize,
    pub latent_width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub block_channels: Vec<usize>,
    pub layers_per_block: usize,
    pub attention_levels: Vec<usize>,
    pub mid_attention: bool,
    pub time_embed_dim: usize,
    pub cross_attention_dim: usize,
    pub text_tokens: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub ff_gated: bool,
}

const SD15_UNET: &str = include_str!("../data/sd15_unet.json");

impl UnetSpec {
    /// The instruction-editing SD-1.5 U-Net at 60x60 latents.
    pub fn sd15() -> Self {
        serde_json::from_str(SD15_UNET).expect("bundled architecture file parses")
    }

    pub fn catalog(&self) -> ShapeCatalog {
        let mut cat = ShapeCatalog::new(self.name.clone());
        let down = |s: usize| s.div_ceil(2);
        let nl = self.block_channels.len();
        let mut sizes = vec![(self.latent_height, self.latent_width)];
        for l in 1..nl {
            let (h, w) = sizes[l - 1];
            sizes.push((down(h), down(w)));
        }
        let c0 = self.block_channels[0];
        let (h0, w0) = sizes[0];
        cat.push("conv_in", None, false, conv(self.in_channels, c0, 3, h0, w0));
        cat.push("time.lin1", None, false, LayerShape::Linear { din: c0, dout: self.time_embed_dim, rows: 1 });
        cat.push("time.lin2", None, false, LayerShape::Linear { din: self.time_embed_dim, dout: self.time_embed_dim, rows: 1 });

        let mut skips = vec![c0];
        let mut c = c0;
        for l in 0..nl {
            let (h, w) = sizes[l];
            let co = self.block_channels[l];
            for i in 0..self.layers_per_block {
                self.resblock(&mut cat, &format!("down{l}.res{i}"), Some(l), c, co, h, w);
                c = co;
                if self.attention_levels.contains(&l) {
                    self.transformer(&mut cat, &format!("down{l}.attn{i}"), Some(l), c, h, w);
                }
                skips.push(c);
            }
            if l + 1 < nl {
                let (h2, w2) = sizes[l + 1];
                cat.push(format!("down{l}.downsample"), Some(l), false, conv(c, c, 3, h2, w2));
                skips.push(c);
            }
        }
        let (hb, wb) = sizes[nl - 1];
        self.resblock(&mut cat, "mid.res0", None, c, c, hb, wb);
        if self.mid_attention {
            self.transformer(&mut cat, "mid.attn", None, c, hb, wb);
        }
        self.resblock(&mut cat, "mid.res1", None, c, c, hb, wb);
        for l in (0..nl).rev() {
            let (h, w) = sizes[l];
            let co = self.block_channels[l];
            for i in 0..=self.layers_per_block {
                let s = skips.pop().expect("skip per up layer");
                self.resblock(&mut cat, &format!("up{l}.res{i}"), Some(l), c + s, co, h, w);
                c = co;
                if self.attention_levels.contains(&l) {
                    self.transformer(&mut cat, &format!("up{l}.attn{i}"), Some(l), c, h, w);
                }
            }
            if l > 0 {
                let (h2, w2) = sizes[l - 1];
                cat.push(format!("up{l}.upsample"), Some(l), false, conv(c, c, 3, h2, w2));
            }
        }
        cat.push("conv_out", None, false, conv(c0, self.out_channels, 3, h0, w0));
        cat
    }

    #[allow(clippy::too_many_arguments)]
    fn resblock(&self, cat: &mut ShapeCatalog, name: &str, level: Option<usize>, cin: usize, cout: usize, h: usize, w: usize) {
        cat.push(format!("{name}.conv1"), level, false, conv(cin, cout, 3, h, w));
        cat.push(format!("{name}.emb"), level, false, LayerShape::Linear { din: self.time_embed_dim, dout: cout, rows: 1 });
        cat.push(format!("{name}.conv2"), level, false, conv(cout, cout, 3, h, w));
        if cin != cout {
            cat.push(format!("{name}.skip"), level, false, conv(cin, cout, 1, h, w));
        }
    }

    fn transformer(&self, cat: &mut ShapeCatalog, name: &str, level: Option<usize>, c: usize, h: usize, w: usize) {
        let n = h * w;
        let inner = self.ff_mult * c;
        let lin = |din, dout| LayerShape::Linear { din, dout, rows: n };
        cat.push(format!("{name}.proj_in"), level, true, lin(c, c));
        cat.push(format!("{name}.self"), level, true, attention(AttentionKind::SelfAttn, n, n, c, c, self.heads));
        cat.push(
            format!("{name}.cross"),
            level,
            true,
            attention(AttentionKind::Cross, n, self.text_tokens, c, self.cross_attention_dim, self.heads),
        );
        let ff_out = if self.ff_gated { 2 * inner } else { inner };
        cat.push(format!("{name}.ff_in"), level, true, lin(c, ff_out));
        cat.push(format!("{name}.ff_out"), level, true, lin(inner, c));
        cat.push(format!("{name}.proj_out"), level, true, lin(c, c));
    }
}

fn conv(cin: usize, cout: usize, k: usize, h: usize, w: usize) -> LayerShape {
    LayerShape::Conv { cin, cout, k, h, w }
}

fn attention(attn: AttentionKind, tokens: usize, kv_tokens: usize, dim: usize, kv_dim: usize, heads: usize) -> LayerShape {
    LayerShape::Attention {
        attn,
        tokens,
        kv_tokens,
        dim,
        kv_dim,
        heads,
    }
}

/// Catalog of a [`crate::denoiser::Denoiser`] built from `cfg` at `h x w` latents.
pub fn denoiser_catalog(cfg: &DenoiserConfig, h: usize, w: usize) -> ShapeCatalog {
    let mut cat = ShapeCatalog::new("toy-denoiser");
    let e = cfg.embed_dim;
    let base = cfg.base_channels;
    let nl = cfg.num_levels();
    let sizes: Vec<(usize, usize)> = (0..nl).map(|l| (h >> l, w >> l)).collect();
    cat.push("conv_in", None, false, conv(cfg.in_channels(), base, 3, h, w));
    cat.push("time.lin1", None, false, LayerShape::Linear { din: e, dout: e, rows: 1 });
    cat.push("time.lin2", None, false, LayerShape::Linear { din: e, dout: e, rows: 1 });
    let res = |cat: &mut ShapeCatalog, name: &str, l: usize, cin: usize, cout: usize| {
        let (h, w) = sizes[l];
        cat.push(format!("{name}.conv1"), Some(l), false, conv(cin, cout, 3, h, w));
        cat.push(format!("{name}.emb"), Some(l), false, LayerShape::Linear { din: e, dout: cout, rows: 1 });
        if cfg.guidance_conditioned {
            cat.push(format!("{name}.guide_image"), Some(l), false, LayerShape::Linear { din: e, dout: e, rows: 1 });
            cat.push(format!("{name}.guide_text"), Some(l), false, LayerShape::Linear { din: e, dout: e, rows: 1 });
        }
        cat.push(format!("{name}.conv2"), Some(l), false, conv(cout, cout, 3, h, w));
        if cin != cout {
            cat.push(format!("{name}.skip"), Some(l), false, conv(cin, cout, 1, h, w));
        }
    };
    let attn = |cat: &mut ShapeCatalog, name: &str, l: usize, c: usize| {
        if !cfg.has_attention(l) {
            return;
        }
        let n = sizes[l].0 * sizes[l].1;
        cat.push(format!("{name}.self"), Some(l), true, attention(AttentionKind::SelfAttn, n, n, c, c, 1));
        cat.push(
            format!("{name}.cross"),
            Some(l),
            true,
            attention(AttentionKind::Cross, n, cfg.text_len, c, cfg.text_dim, 1),
        );
    };
    let mut ch = base;
    for l in 0..nl {
        let c = cfg.level_channels(l);
        res(&mut cat, &format!("down{l}.res"), l, ch, c);
        attn(&mut cat, &format!("down{l}.attn"), l, c);
        ch = c;
        if l + 1 < nl {
            let (h2, w2) = sizes[l + 1];
            cat.push(format!("down{l}.downsample"), Some(l), false, conv(c, c, 3, h2, w2));
        }
    }
    for l in (0..nl).rev() {
        let c = cfg.level_channels(l);
        res(&mut cat, &format!("up{l}.res"), l, ch + c, c);
        attn(&mut cat, &format!("up{l}.attn"), l, c);
        ch = c;
        if l > 0 {
            let next = cfg.level_channels(l - 1);
            let (h2, w2) = sizes[l - 1];
            cat.push(format!("up{l}.upsample"), Some(l), false, conv(c, next, 3, h2, w2));
            ch = next;
        }
    }
    cat.push("conv_out", None, false, conv(base, cfg.latent_channels, 3, h, w));
    cat
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    BaseMultipass,
    MobilePruned,
    GuidanceDistilled,
    #[serde(rename = "adversarial-1step")]
    Adversarial1Step,
}

impl Variant {
    pub const LADDER: [Variant; 4] = [
        Variant::BaseMultipass,
        Variant::MobilePruned,
        Variant::GuidanceDistilled,
        Variant::Adversarial1Step,
    ];

    pub fn passes_per_step(self) -> usize {
        match self {
            Variant::BaseMultipass | Variant::MobilePruned => 3,
            Variant::GuidanceDistilled | Variant::Adversarial1Step => 1,
        }
    }

    pub fn pruned(self) -> bool {
        self != Variant::BaseMultipass
    }

    pub fn tiny_autoencoder(self) -> bool {
        self != Variant::BaseMultipass
    }

    pub fn default_steps(self) -> usize {
        match self {
            Variant::Adversarial1Step => 1,
            _ => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaseMultipass => "base-multipass",
            Variant::MobilePruned => "mobile-pruned",
            Variant::GuidanceDistilled => "guidance-distilled",
            Variant::Adversarial1Step => "adversarial-1step",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::LADDER
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown pipeline variant {s:?}")))
    }
}

/// Per-pass and per-frame costs the report is assembled from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineCosts {
    pub denoiser_gflops: f64,
    pub pruned_denoiser_gflops: f64,
    /// Encode + decode of one frame.
    pub big_autoencoder_tflops: f64,
    pub tiny_autoencoder_tflops: f64,
}

/// Savings of the tiny autoencoder relative to the big one.
pub const TINY_AE_SAVING: f64 = 0.926;
/// Big autoencoder cost per frame at the reference resolution.
pub const BIG_AE_TFLOPS: f64 = 3.2;

impl PipelineCosts {
    /// Costs counted from catalogs.
    pub fn from_catalogs(denoiser: &ShapeCatalog, pruned: &ShapeCatalog, big_ae: &ShapeCatalog, tiny_ae: &ShapeCatalog) -> Self {
        Self {
            denoiser_gflops: flops_of(denoiser),
            pruned_denoiser_gflops: flops_of(pruned),
            big_autoencoder_tflops: flops_of(big_ae) / 1e3,
            tiny_autoencoder_tflops: flops_of(tiny_ae) / 1e3,
        }
    }

    /// The reference U-Net counted here, the level-0 attention pruning, and
    /// the stated autoencoder costs.
    pub fn reference() -> Result<Self> {
        let cat = UnetSpec::sd15().catalog();
        Ok(Self {
            denoiser_gflops: flops_of(&cat),
            pruned_denoiser_gflops: flops_of(&cat.pruned(&[0], PruneScope::Attention)?),
            big_autoencoder_tflops: BIG_AE_TFLOPS,
            tiny_autoencoder_tflops: BIG_AE_TFLOPS * (1.0 - TINY_AE_SAVING),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub variant: Variant,
    pub denoiser_gflops_per_pass: f64,
    pub passes_per_step: usize,
    pub steps: usize,
    pub nfe: usize,
    pub denoiser_tflops: f64,
    pub autoencoder_tflops: f64,
    pub per_frame_tflops: f64,
}

pub fn pipeline_report(variant: Variant, steps: usize, costs: &PipelineCosts) -> Result<FlopsReport> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    if variant == Variant::Adversarial1Step && steps != 1 {
        return Err(Error::PipelineMismatch(format!("adversarial-1step runs exactly one step, got {steps}")));
    }
    let per_pass = if variant.pruned() {
        costs.pruned_denoiser_gflops
    } else {
        costs.denoiser_gflops
    };
    let ae = if variant.tiny_autoencoder() {
        costs.tiny_autoencoder_tflops
    } else {
        costs.big_autoencoder_tflops
    };
    let passes = variant.passes_per_step();
    let nfe = passes * steps;
    let denoiser_tflops = per_pass * nfe as f64 / 1e3;
    Ok(FlopsReport {
        variant,
        denoiser_gflops_per_pass: per_pass,
        passes_per_step: passes,
        steps,
        nfe,
        denoiser_tflops,
        autoencoder_tflops: ae,
        per_frame_tflops: denoiser_tflops + ae,
    })
}

/// Reports for the whole ladder at each variant's default step count.
pub fn ladder(costs: &PipelineCosts) -> Result<Vec<FlopsReport>> {
    Variant::LADDER.iter().map(|&v| pipeline_report(v, v.default_steps(), costs)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_conv_hand_count() {
        let mut cat = ShapeCatalog::new("one");
        cat.push("c", None, false, conv(4, 4, 3, 8, 8));
        assert_eq!(flops_of(&cat) * 1e9, 18_432.0);
        assert_eq!(flops_of(&ShapeCatalog::new("empty")), 0.0);
    }

    #[test]
    fn attention_hand_count() {
        // 4 tokens of width 2 over 3 keys of width 5:
        // q,o 2*4*2*2 each, k,v 2*3*5*2 each, QK^T and AV 2*4*3*2 each.
        let a = attention(AttentionKind::Cross, 4, 3, 2, 5, 1);
        assert_eq!(layer_flops(&a, FlopConvention::Full), 32.0 + 32.0 + 60.0 + 60.0 + 48.0 + 48.0);
        assert_eq!(layer_flops(&a, FlopConvention::ProjectionsOnly), 184.0);
    }

    #[test]
    fn unknown_layer_kind_rejected() {
        let bad = r#"{"name":"x","layers":[{"name":"p","level":null,"shape":{"kind":"pool","k":2}}]}"#;
        assert!(ShapeCatalog::from_json(bad).is_err());
    }

    #[test]
    fn reference_unet_counts() {
        let cat = UnetSpec::sd15().catalog();
        let g = flops_of(&cat);
        assert!((g - 698.194_227_2).abs() < 1e-6, "{g}");
        assert!((g - 600.0).abs() <= 0.25 * 600.0);
        let d = pruning_delta(&cat, &[0]).unwrap();
        assert!((d - 0.153_560).abs() < 1e-5, "{d}");
        let g2 = flops_with(&cat, FlopConvention::ProjectionsOnly);
        assert!((g2 - 600.435_384_32).abs() < 1e-6, "{g2}");
        let d2 = pruning_delta_with(&cat, &[0], PruneScope::Transformer, FlopConvention::ProjectionsOnly).unwrap();
        assert!((d2 - 0.123_421).abs() < 1e-5, "{d2}");
    }

    #[test]
    fn catalog_json_roundtrip() {
        let cat = UnetSpec::sd15().catalog();
        assert_eq!(ShapeCatalog::from_json(&cat.to_json().unwrap()).unwrap(), cat);
    }

    #[test]
    fn pruning_examples() {
        let cat = denoiser_catalog(&DenoiserConfig::toy(), 8, 8);
        assert_eq!(pruning_delta(&cat, &[]).unwrap(), 0.0);
        assert!(pruning_delta(&cat, &[5]).is_err());
        let mut half = ShapeCatalog::new("half");
        half.push("conv", Some(1), false, conv(4, 4, 1, 1, 3));
        half.push("attn", Some(0), true, attention(AttentionKind::SelfAttn, 2, 2, 2, 2, 1));
        // 2*16*3 for the conv; 2*(16+16) for projections plus 2*2*8 for matmuls.
        assert_eq!(layer_flops(&half.layers[0].shape, FlopConvention::Full), 96.0);
        assert_eq!(layer_flops(&half.layers[1].shape, FlopConvention::Full), 96.0);
        assert_eq!(pruning_delta(&half, &[0]).unwrap(), 0.5);
    }

    #[test]
    fn toy_catalog_tracks_the_model() {
        let full = DenoiserConfig::toy();
        let cat = denoiser_catalog(&full, 8, 8);
        let pruned = denoiser_catalog(&full.pruned(), 8, 8);
        assert!(flops_of(&pruned) < flops_of(&cat));
        assert_eq!(cat.pruned(&[0], PruneScope::Attention).unwrap().layers, pruned.layers);
    }

    #[test]
    fn report_ladder_and_arithmetic() {
        let costs = PipelineCosts {
            denoiser_gflops: 600.0,
            pruned_denoiser_gflops: 528.0,
            big_autoencoder_tflops: BIG_AE_TFLOPS,
            tiny_autoencoder_tflops: BIG_AE_TFLOPS * (1.0 - TINY_AE_SAVING),
        };
        let base = pipeline_report(Variant::BaseMultipass, 10, &costs).unwrap();
        assert_eq!(base.nfe, 30);
        assert!((base.denoiser_tflops - 18.0).abs() < 1e-12);
        let nfes: Vec<usize> = [(Variant::BaseMultipass, 10), (Variant::GuidanceDistilled, 10), (Variant::Adversarial1Step, 1)]
            .iter()
            .map(|&(v, s)| pipeline_report(v, s, &costs).unwrap().nfe)
            .collect();
        assert_eq!(nfes, vec![30, 10, 1]);
        let adv = pipeline_report(Variant::Adversarial1Step, 1, &costs).unwrap();
        assert!((adv.autoencoder_tflops - 0.2368).abs() < 1e-12);
        assert!(pipeline_report(Variant::Adversarial1Step, 10, &costs).is_err());
        for r in ladder(&costs).unwrap() {
            assert_eq!(r.per_frame_tflops, r.denoiser_gflops_per_pass * r.nfe as f64 / 1e3 + r.autoencoder_tflops);
        }
    }

    proptest! {
        #[test]
        fn flops_additive(a in proptest::collection::vec((1usize..64, 1usize..64, 1usize..4, 1usize..16), 0..6),
                          b in proptest::collection::vec((1usize..64, 1usize..64, 1usize..4, 1usize..16), 0..6)) {
            let mk = |v: &[(usize, usize, usize, usize)]| {
                let mut c = ShapeCatalog::new("p");
                for (i, &(ci, co, k, s)) in v.iter().enumerate() {
                    c.push(format!("l{i}"), Some(i % 2), i % 3 == 0, conv(ci, co, k, s, s));
                    c.push(format!("a{i}"), Some(i % 2), true, attention(AttentionKind::SelfAttn, s * s, s * s, ci, ci, 1));
                }
                c
            };
            let (ca, cb) = (mk(&a), mk(&b));
            let sum = flops_of(&ca) + flops_of(&cb);
            prop_assert!((flops_of(&ca.concat(&cb)) - sum).abs() <= 1e-12 * sum.max(1.0));
            if !a.is_empty() {
                prop_assert!(flops_of(&ca.pruned(&[0], PruneScope::Attention).unwrap()) < flops_of(&ca));
            }
        }
    }
}
