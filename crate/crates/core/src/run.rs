//! The ten pipeline commands behind the `moviekit` binary.
//!
//! Every command resolves its config, writes `config.toml` into its run
//! directory, appends events to `metrics.jsonl` there and saves its outputs
//! next to them. All paths are relative to the workdir.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{latent_gap, psnr, stack_images, train_pair, AutoencoderPair, AutoencoderTrainConfig, Which};
use crate::checkpoint::{Checkpoint, Dtype, Header, Stage};
use crate::config;
use crate::costmodel::{denoiser_catalog, ladder, pipeline_report, PipelineCosts, Variant};
use crate::denoiser::{build_denoiser, Denoiser, DenoiserConfig};
use crate::distill::{
    finetune_v_prediction, guidance_probe, init_guided_student, init_v_student, probe_mse, train_base,
    train_guidance_distill, AdversarialConfig, AdversarialTrainer, BaseTrainConfig, Discriminator,
    GuidanceDistillConfig, HeadConfig, IterRecord, LatentDataset, TrainState, VFinetuneConfig,
};
use crate::error::{Error, Result};
use crate::evaluate::{controllability, single_step_gap, Editor};
use crate::metrics::{line_chart_svg, read_metrics, series, MetricsWriter};
use crate::nn::ParamStore;
use crate::synthdata::{gen_video, read_corpus, write_corpus, Instruction, Split};
use crate::tensor::Tensor;
use crate::videoedit::{edit_video, frame_consistency, read_clip, write_clip_like, write_clip_pngs, EditRequest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Command {
    GenData,
    TrainAutoencoder,
    TrainBase,
    DistillGuidance,
    FinetuneV,
    DistillAdversarial,
    EditVideo,
    ProfileFlops,
    Eval,
    Plot,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::GenData,
        Command::TrainAutoencoder,
        Command::TrainBase,
        Command::DistillGuidance,
        Command::FinetuneV,
        Command::DistillAdversarial,
        Command::EditVideo,
        Command::ProfileFlops,
        Command::Eval,
        Command::Plot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainAutoencoder => "train-autoencoder",
            Command::TrainBase => "train-base",
            Command::DistillGuidance => "distill-guidance",
            Command::FinetuneV => "finetune-v",
            Command::DistillAdversarial => "distill-adversarial",
            Command::EditVideo => "edit-video",
            Command::ProfileFlops => "profile-flops",
            Command::Eval => "eval",
            Command::Plot => "plot",
        }
    }

    /// Run directory used unless the config says otherwise.
    pub fn default_dir(self) -> String {
        format!("runs/{}", self.name())
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown command {s:?}")))
    }
}

/// Where a command runs and how its config is assembled.
#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub workdir: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
}

impl Invocation {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        Self {
            workdir: workdir.into(),
            ..Default::default()
        }
    }

    pub fn set(mut self, kv: impl Into<String>) -> Self {
        self.overrides.push(kv.into());
        self
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.workdir.join(rel)
    }
}

/// The machine-readable failure record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub command: String,
    pub error: String,
    pub message: String,
}

impl ErrorRecord {
    pub fn new(cmd: Command, e: &Error) -> Self {
        Self {
            command: cmd.name().into(),
            error: e.kind().into(),
            message: e.to_string(),
        }
    }
}

/// `MOVIEKIT_THREADS`, if set. Everything runs on one thread regardless.
pub fn thread_cap() -> Option<usize> {
    std::env::var("MOVIEKIT_THREADS").ok().and_then(|v| v.parse().ok())
}

/// Run `cmd`. On failure an `error.json` record is left in the default run
/// directory as well as returned.
pub fn run(cmd: Command, inv: &Invocation) -> Result<PathBuf> {
    if let Some(n) = thread_cap() {
        log::info!("MOVIEKIT_THREADS={n}; running single-threaded");
    }
    let out = match cmd {
        Command::GenData => gen_data(inv),
        Command::TrainAutoencoder => train_autoencoder(inv),
        Command::TrainBase => train_base_cmd(inv),
        Command::DistillGuidance => distill_guidance(inv),
        Command::FinetuneV => finetune_v(inv),
        Command::DistillAdversarial => distill_adversarial(inv),
        Command::EditVideo => edit_video_cmd(inv),
        Command::ProfileFlops => profile_flops(inv),
        Command::Eval => eval(inv),
        Command::Plot => plot(inv),
    };
    if let Err(e) = &out {
        let dir = inv.path(&cmd.default_dir());
        if std::fs::create_dir_all(&dir).is_ok() {
            let rec = serde_json::to_string_pretty(&ErrorRecord::new(cmd, e)).unwrap_or_default();
            let _ = std::fs::write(dir.join("error.json"), rec);
        }
    }
    out
}

/// Config text with every default spelled out.
pub fn default_config(cmd: Command) -> Result<String> {
    match cmd {
        Command::GenData => config::snapshot(&GenDataConfig::default()),
        Command::TrainAutoencoder => config::snapshot(&TrainAutoencoderRun::default()),
        Command::TrainBase => config::snapshot(&TrainBaseRun::default()),
        Command::DistillGuidance => config::snapshot(&DistillGuidanceRun::default()),
        Command::FinetuneV => config::snapshot(&FinetuneVRun::default()),
        Command::DistillAdversarial => config::snapshot(&DistillAdversarialRun::default()),
        Command::EditVideo => config::snapshot(&EditVideoRun::default()),
        Command::ProfileFlops => config::snapshot(&ProfileFlopsRun::default()),
        Command::Eval => config::snapshot(&EvalRun::default()),
        Command::Plot => config::snapshot(&PlotRun::default()),
    }
}

struct RunDir {
    dir: PathBuf,
    metrics: MetricsWriter,
}

impl RunDir {
    /// Create `dir`, snapshot `cfg` and start a fresh metrics file (or
    /// continue the existing one when `append`).
    fn open<T: Serialize>(inv: &Invocation, rel: &str, cfg: &T, append: bool) -> Result<Self> {
        let dir = inv.path(rel);
        std::fs::create_dir_all(&dir)?;
        let _ = std::fs::remove_file(dir.join("error.json"));
        std::fs::write(dir.join("config.toml"), config::snapshot(cfg)?)?;
        let mpath = dir.join("metrics.jsonl");
        if !append && mpath.exists() {
            std::fs::remove_file(&mpath)?;
        }
        Ok(Self {
            metrics: MetricsWriter::open(&mpath)?,
            dir,
        })
    }

    fn log<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        self.metrics.write(rec)
    }

    /// Run `train` with an observer that logs every iteration record.
    fn logged<F>(&mut self, train: F) -> Result<()>
    where
        F: FnOnce(&mut dyn FnMut(&IterRecord)) -> Result<Vec<IterRecord>>,
    {
        let mut failed = None;
        {
            let m = &mut self.metrics;
            let mut obs = |r: &IterRecord| {
                if failed.is_none() {
                    if let Err(e) = m.write(r) {
                        failed = Some(e);
                    }
                }
            };
            train(&mut obs)?;
        }
        failed.map_or(Ok(()), Err)
    }
}

fn resolve<T: Serialize + DeserializeOwned + Default>(inv: &Invocation) -> Result<T> {
    let file = inv.config.as_ref().map(|p| inv.workdir.join(p));
    let cfg: T = config::load(file.as_deref(), &inv.overrides)?;
    let version = toml::Value::try_from(&cfg)
        .ok()
        .and_then(|v| v.get("schema_version").and_then(|s| s.as_integer()))
        .unwrap_or(config::SCHEMA_VERSION as i64);
    config::check_schema(version as u32)?;
    Ok(cfg)
}

/// Load an upstream checkpoint and check which stage wrote it.
fn load_stage(inv: &Invocation, rel: &str, stage: Stage, producer: Command) -> Result<Checkpoint> {
    let path = inv.path(rel);
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "missing upstream {stage} checkpoint {}; run `{producer}` first",
            path.display()
        )));
    }
    let c = Checkpoint::load(&path)?;
    c.expect_stage(stage)?;
    Ok(c)
}

fn load_autoencoder(inv: &Invocation, rel: &str) -> Result<(AutoencoderPair, Checkpoint)> {
    let c = load_stage(inv, rel, Stage::Autoencoder, Command::TrainAutoencoder)?;
    let mut pair = AutoencoderPair::new(&mut ChaCha8Rng::seed_from_u64(0));
    pair.load_params(&c.store("ae"))?;
    Ok((pair, c))
}

fn model_checkpoint(stage: Stage, model: &Denoiser, parents: Vec<(Stage, String)>, meta: serde_json::Value) -> Checkpoint {
    let mut meta = meta;
    if !meta.is_object() {
        meta = serde_json::json!({});
    }
    meta["model"] = serde_json::to_value(&model.cfg).expect("config serializes");
    let mut c = Checkpoint::new(Header { stage, parents, meta });
    c.push_store("model", &model.params);
    c
}

fn load_model(c: &Checkpoint) -> Result<Denoiser> {
    let cfg: DenoiserConfig = c.meta("model")?;
    Denoiser::from_params(&cfg, &c.store("model"))
}

fn load_model_stage(inv: &Invocation, rel: &str, stage: Stage, producer: Command) -> Result<(Denoiser, Checkpoint)> {
    let c = load_stage(inv, rel, stage, producer)?;
    Ok((load_model(&c)?, c))
}

fn latent_data(inv: &Invocation, ae: &AutoencoderPair, rel: &str, limit: usize) -> Result<LatentDataset> {
    let dir = inv.path(rel);
    if !dir.join("manifest.jsonl").exists() {
        return Err(Error::InvalidArgument(format!(
            "no corpus at {}; run `gen-data` first",
            dir.display()
        )));
    }
    let mut triplets = read_corpus(&dir)?;
    if limit > 0 {
        triplets.truncate(limit);
    }
    LatentDataset::from_triplets(ae, &triplets, Which::Big)
}

fn save(c: &Checkpoint, path: &Path, dtype: Dtype) -> Result<String> {
    c.save(path, dtype)?;
    c.digest()
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub run_dir: String,
    /// Corpus root; `train/` and `val/` are written below it.
    pub out: String,
    pub train: u64,
    pub val: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            schema_version: config::SCHEMA_VERSION,
            seed: 0,
            run_dir: Command::GenData.default_dir(),
            out: "data".into(),
            train: 512,
            val: 64,
        }
    }
}

fn gen_data(inv: &Invocation) -> Result<PathBuf> {
    let cfg: GenDataConfig = resolve(inv)?;
    let mut rd = RunDir::open(inv, &cfg.run_dir, &cfg, false)?;
    for (split, n, name) in [(Split::Train, cfg.train, "train"), (Split::Val, cfg.val, "val")] {
        let dir = inv.path(&cfg.out).join(name);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        write_corpus(&dir, n, cfg.seed, split)?;
        let manifest = std::fs::read(dir.join("manifest.jsonl"))?;
        rd.log(&serde_json::json!({
            "event": "split",
            "split": name,
            "items": n,
            "manifest_sha256": sha256_hex(&manifest),
        }))?;
    }
    Ok(rd.dir)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------- train-autoencoder

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainAutoencoderRun {
    pub schema_version: u32,
    pub seed: u64,
    pub run_dir: String,
    pub data: String,
    pub val_data: String,
    pub dtype: Dtype,
    pub train: AutoencoderTrainConfig,
}

impl Default for TrainAutoencoderRun {
    fn default() -> Self {
        Self {
            schema_version: config::SCHEMA_VERSION,
            seed: 0,
            run_dir: Command::TrainAutoencoder.default_dir(),
            data: "data/train".into(),
            val_data: "data/val".into(),
            dtype: Dtype::F64,
            train: AutoencoderTrainConfig::default(),
        }
    }
}

fn corpus_images(dir: &Path) -> Result<Vec<Tensor>> {
    if !dir.join("manifest.jsonl").exists() {
        return Err(Error::InvalidArgument(format!("no corpus at {}; run `gen-data` first", dir.display())));
    }
    Ok(read_corpus(dir)?
        .into_iter()
        .flat_map(|t| [t.source, t.edited])
        .collect())
}

fn train_autoencoder(inv: &Invocation) -> Result<PathBuf> {
    let cfg: TrainAutoencoderRun = resolve(inv)?;
    let images = corpus_images(&inv.path(&cfg.data))?;
    let mut rd = RunDir::open(inv, &cfg.run_dir, &cfg, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pair = AutoencoderPair::new(&mut rng);
    let log = train_pair(&mut pair, &images, &cfg.train, &mut rng)?;
    for (i, l) in log.big_recon.iter().enumerate() {
        rd.log(&serde_json::json!({"iter": i, "big_recon": l}))?;
    }
    let off = log.big_recon.len();
    for (i, (d, r)) in log.tiny_distill.iter().zip(&log.tiny_recon).enumerate() {
        rd.log(&serde_json::json!({"iter": off + i, "tiny_distill": d, "tiny_recon": r}))?;
    }
    let val_dir = inv.path(&cfg.val_data);
    if val_dir.join("manifest.jsonl").exists() {
        let val = stack_images(&corpus_images(&val_dir)?)?;
        let mut summary = serde_json::json!({"event": "val", "latent_scale": pair.latent_scale});
        for (e, d) in [(Which::Big, Which::Big), (Which::Tiny, Which::Tiny), (Which::Big, Which::Tiny)] {
            summary[format!("psnr_{e}_{d}")] = psnr(&pair.roundtrip(&val, e, d)?, &val)?.into();
        }
        summary["latent_gap"] = latent_gap(&pair, &val)?.into();
        rd.log(&summary)?;
    }
    let mut c = Checkpoint::new(Header {
        stage: Stage::Autoencoder,
        parents: Vec::new(),
        meta: serde_json::json!({"latent_scale": pair.latent_scale}),
    });
    c.push_store("ae", &pair.params());
    save(&c, &rd.dir.join("autoencoder.mvkt"), cfg.dtype)?;
    Ok(rd.dir)
}

// ---------------------------------------------------------------- train-base

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBaseRun {
    pub schema_version: u32,
    pub seed: u64,
    pub run_dir: String,
    pub data: String,
    /// Use only the first `data_limit` items (0 = all).
    pub data_limit: usize,
    pub autoencoder: String,
    pub dtype: Dtype,
    pub model: DenoiserConfig,
    pub train: BaseTrainConfig,
}

impl Default for TrainBaseRun {
    fn default() -> Self {
        Self {
            schema_version: config::SCHEMA_VERSION,
            seed: 0,
            run_dir: Command::TrainBase.default_dir(),
            data: "data/train".into(),
            data_limit: 0,
            autoencoder: "runs/train-autoencoder/autoencoder.mvkt".into(),
            dtype: Dtype::F64,
            model: DenoiserConfig::toy(),
            train: BaseTrainConfig::default(),
        }
    }
}

fn train_base_cmd(inv: &Invocation) -> Result<PathBuf> {
    let cfg: TrainBaseRun = resolve(inv)?;
    let (ae, ae_ckpt) = load_autoencoder(inv, &cfg.autoencoder)?;
    let data = latent_data(inv, &ae, &cfg.data, cfg.data_limit)?;
    let mut rd = RunDir::open(inv, &cfg.run_dir, &cfg, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = build_denoiser(&cfg.model, &mut rng)?;
    rd.logged(|obs| train_base(&mut model, &data, &cfg.train, &mut rng, obs))?;
    let c = model_checkpoint(Stage::Base, &model, vec![(Stage::Autoencoder, ae_ckpt.digest()?)], serde_json::Value::Null);
    save(&c, &rd.dir.join("base.mvkt"), cfg.dtype)?;
    Ok(rd.dir)
}

// ---------------------------------------------------------------- distill-guidance

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillGuidanceRun {
    pub schema_version: u32,
    pub seed: u64,
    pub run_dir: String,
    pub data: String,
    pub data_limit: usize,
    pub autoencoder: String,
    pub teacher: String,
    pub dtype: Dtype,
    /// Probe items for the before/after target error.
    pub probe_items: usize,
    pub train: GuidanceDistillConfig,
}

impl Default for DistillGuidanceRun {
    fn default() -> Self {
        Self {
            schema_version: config::SCHEMA_VERSION,
            seed: 0,
            run_dir: Command::DistillGuidance.default_dir(),
            data: "data/train".into(),
            data_limit: 0,
            autoencoder: "runs/train-autoencoder/autoencoder.mvkt".into(),
            teacher: "runs/train-base/base.mvkt".into(),
            dtype: Dtype::F64,
            probe_items: 16,
            train: GuidanceDistillConfig::default(),
        }
    }
}

fn distill_guidance(inv: &Invocation) -> Result<PathBuf> {
    let cfg: DistillGuidanceRun = resolve(inv)?;
    let (teacher, base_ckpt) = load_model_stage(inv, &cfg.teacher, Stage::Base, Command::TrainBase)?;
    let (ae, _) = load_autoencoder(inv, &cfg.autoencoder)?;
    let data = latent_data(inv, &ae, &cfg.data, cfg.data_limit)?;
    let mut rd = RunDir::open(inv, &cfg.run_dir, &cfg, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut student = init_guided_student(&teacher)?;
    let probe = if cfg.probe_items > 0 {
        Some(guidance_probe(&teacher, &data, cfg.probe_items, cfg.seed ^ 0x9e37, None)?)
    } else {
        None
    };
    if let Some(p) = &probe {
        rd.log(&serde_json::json!({"iter": 0, "event": "probe", "probe_mse": probe_mse(&student, p)?}))?;
    }
    rd.logged(|obs| train_guidance_distill(&teacher, &mut student, &data, &cfg.train, &mut rng, obs))?;
    if let Some(p) = &probe {
        rd.log(&serde_json::json!({"iter": cfg.train.iters, "event": "probe", "probe_mse": probe_mse(&student, p)?}))?;
    }
    let c = model_checkpoint(
        Stage::GuidanceDistilled,
        &student,
        vec![(Stage::Base, base_ckpt.digest()?)],
        serde_json::Value::Null,
    );
    save(&c, &rd.dir.join("guidance.mvkt"), cfg.dtype)?;
    Ok(rd.dir)
}

// ---------------------------------------------------------------- finetune-v

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneVRun {
    pub schema_version: u32,
    pub seed: u64,
    pub run_dir: String,
    pub data: String,
    pub data_limit: usize,
    pub autoencoder: String,
    pub teacher: String,
    pub dtype: Dtype,
    pub train: VFinetuneConfig,
}

impl Default for FinetuneVRun {
    fn default() -> Self {
        Self {
            schema_version: config::SCHEMA_VERSION,
            seed: 0,
            run_dir: Command::FinetuneV.default_dir(),
            data: "data/train".into(),
            data_limit: 0,
            autoencoder: "runs/train-autoencoder/autoencoder.mvkt".into(),
            teacher: "runs/distill-guidance/guidance.mvkt".into(),
            dtype: Dtype::F64,
            train: VFinetuneConfig::default(),
        }
    }
}

fn finetune_v(inv: &Invocation) -> Result<PathBuf> {
    let cfg: FinetuneVRun = resolve(inv)?;
    let (teacher, parent) = load_model_stage(inv, &cfg.teacher, Stage::GuidanceDistilled, Command::DistillGuidance)?;
    let (ae, _) = load_autoencoder(inv, &cfg.autoencoder)?;
    let data = latent_data(inv, &ae, &cfg.data, cfg.data_limit)?;
    let mut rd = RunDir::open(inv, &cfg.run_dir, &cfg, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut student = init_v_student(&teacher)?;
    rd.logged(|obs| finetune_v_prediction(&teacher, &mut student, &data, &cfg.train, &mut rng, obs))?;
    let c = model_checkpoint(
        Stage::VFinetuned,
        &student,
        vec![(Stage::GuidanceDistilled, parent.digest()?)],
        serde_json::Value::Null,
    );
    save(&c, &rd.dir.join("v.mvkt"), cfg.dtype)?;
    Ok(rd.dir)
}

// ---------------------------------------------------------------- distill-adversarial

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillAdversarialRun {
    pub schema_version: u32,
    pub seed: u64,
    pub run_dir: String,
    pub data: String,
    pub data_limit: usize,
    pub val_data: String,
    pub autoencoder: String,
    /// Guidance-distilled epsilon model: teacher and frozen extractor.
    pub teacher: String,
    /// v-finetuned student initialization.
    pub student: String,
    /// Continue from `state.mvkt` in the run directory.
    pub resume: bool,
    /// Save `state.mvkt` every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    /// Held-out conditions for the before/after gap to the teacher (0 = skip).
    pub eval_items: usize,
    pub dtype: Dtype,
    pub heads: HeadConfig,
    pub train: AdversarialConfig,
}

impl Default for DistillAdversarialRun {
    fn default() -> Self {
        Self {
            schema_version: config::SCHEMA_VERSION,
            seed: 0,
            run_dir: Command::DistillAdversarial.default_dir(),
            data: "data/train".into(),
            data_limit: 0,
            val_data: "data/val".into(),
            autoencoder: "runs/train-autoencoder/autoencoder.mvkt".into(),
            teacher: "runs/distill-guidance/guidance.mvkt".into(),
            student: "runs/finetune-v/v.mvkt".into(),
            resume: false,
            checkpoint_every: 0,
            eval_items: 64,
            dtype: Dtype::F64,
            heads: HeadConfig::default(),
            train: AdversarialConfig::default(),
        }
    }
}

fn distill_adversarial(inv: &Invocation) -> Result<PathBuf> {
    let cfg: DistillAdversarialRun = resolve(inv)?;
    let (teacher, t_ckpt) = load_model_stage(inv, &cfg.teacher, Stage::GuidanceDistilled, Command::DistillGuidance)?;
    let (student, s_ckpt) = load_model_stage(inv, &cfg.student, Stage::VFinetuned, Command::FinetuneV)?;
    let t_digest = t_ckpt.digest()?;
    if !s_ckpt.header.parents.iter().any(|(s, d)| *s == Stage::GuidanceDistilled && *d == t_digest) {
        return Err(Error::PipelineMismatch("the v student was not finetuned from this teacher".into()));
    }
    let (ae, _) = load_autoencoder(inv, &cfg.autoencoder)?;
    let data = latent_data(inv, &ae, &cfg.data, cfg.data_limit)?;
    let val_dir = inv.path(&cfg.val_data);
    let val = if cfg.eval_items > 0 && val_dir.join("manifest.jsonl").exists() {
        Some(latent_data(inv, &ae, &cfg.val_data, 0)?)
    } else {
        None
    };
    let state_path = inv.path(&cfg.run_dir).join("state.mvkt");
    let state = if cfg.resume {
        let c = load_stage(inv, &format!("{}/state.mvkt", cfg.run_dir), Stage::AdversarialState, Command::DistillAdversarial)?;
        Some(TrainState::from_checkpoint(&c)?)
    } else {
        None
    };
    let mut rd = RunDir::open(inv, &cfg.run_dir, &cfg, cfg.resume)?;
    let disc = Discriminator::new(&teacher, cfg.heads.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd15c))?;
    let mut trainer = match &state {
        Some(s) => AdversarialTrainer::resume(&teacher, disc, &data, cfg.train.clone(), s)?,
        None => AdversarialTrainer::new(&teacher, student, disc, &data, cfg.train.clone(), cfg.seed)?,
    };
    let gap = |m: &Denoiser| -> Result<Option<f64>> {
        match &val {
            Some(v) => single_step_gap(&teacher, m, v, cfg.eval_items, cfg.train.teacher_steps, cfg.train.student_timesteps, cfg.seed).map(Some),
            None => Ok(None),
        }
    };
    if state.is_none() {
        if let Some(g) = gap(&trainer.student)? {
            rd.log(&serde_json::json!({"iter": 0, "event": "gap", "teacher_gap": g}))?;
        }
    }
    let checksum = trainer.disc.extractor_checksum().to_string();
    while trainer.iteration < cfg.train.iters {
        let rec = trainer.step()?;
        rd.log(&rec)?;
        if cfg.checkpoint_every > 0 && trainer.iteration % cfg.checkpoint_every == 0 {
            trainer.state().to_checkpoint().save(&state_path, Dtype::F64)?;
        }
    }
    trainer.disc.verify_frozen()?;
    trainer.state().to_checkpoint().save(&state_path, Dtype::F64)?;
    if let Some(g) = gap(&trainer.student)? {
        rd.log(&serde_json::json!({"iter": trainer.iteration, "event": "gap", "teacher_gap": g}))?;
    }
    rd.log(&serde_json::json!({
        "iter": trainer.iteration,
        "event": "done",
        "extractor_checksum": checksum,
        "teacher_nfe": trainer.teacher_nfe.denoiser_calls,
    }))?;
    let c = model_checkpoint(
        Stage::Adversarial,
        &trainer.student,
        vec![(Stage::GuidanceDistilled, t_digest), (Stage::VFinetuned, s_ckpt.digest()?)],
        serde_json::json!({"student_timesteps": cfg.train.student_timesteps}),
    );
    save(&c, &rd.dir.join("adversarial.mvkt"), cfg.dtype)?;
    Ok(rd.dir)
}

// ---------------------------------------------------------------- edit-video

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditVideoRun {
    pub schema_version: u32,
    pub seed: u64,
    pub run_dir: String,
    /// PNG frame directory or raw clip; empty generates a synthetic clip.
    pub input: String,
    /// Frames of the generated clip.
    pub frames: usize,
    pub instruction: String,
    pub variant: Variant,
    /// 0 uses the variant's default.
    pub steps: usize,
    pub s_image: f64,
    pub s_text: f64,
    pub cross_frame: bool,
    pub autoencoder: String,
    /// Empty picks the checkpoint the variant runs on.
    pub model: String,
}

impl Default for EditVideoRun {
    fn default() -> Self {
        Self {
            schema_version: config::SCHEMA_VERSION,
            seed: 0,
            run_dir: Command::EditVideo.default_dir(),
            input: String::new(),
            frames: 8,
            instruction: Instruction::from_id(1).expect("vocab").name().into(),
            variant: Variant::GuidanceDistilled,
            steps: 0,
            s_image: 1.5,
            s_text: 7.5,
            cross_frame: true,
            autoencoder: "runs/train-autoencoder/autoencoder.mvkt".into(),
            model: String::new(),
        }
    }
}

fn variant_model(inv: &Invocation, variant: Variant, rel: &str) -> Result<Denoiser> {
    let (default, stage, producer) = match variant {
        Variant::BaseMultipass | Variant::MobilePruned => ("runs/train-base/base.mvkt", Stage::Base, Command::TrainBase),
        Variant::GuidanceDistilled => ("runs/distill-guidance/guidance.mvkt", Stage::GuidanceDistilled, Command::DistillGuidance),
        Variant::Adversarial1Step => ("runs/distill-adversarial/adversarial.mvkt", Stage::Adversarial, Command::DistillAdversarial),
    };
    let rel = if rel.is_empty() { default } else { rel };
    let (model, _) = load_model_stage(inv, rel, stage, producer)?;
    if variant == Variant::MobilePruned {
        prune_model(&model)
    } else {
        Ok(model)
    }
}

/// The same network without the attention blocks the pruned config drops.
pub fn prune_model(model: &Denoiser) -> Result<Denoiser> {
    let cfg = model.cfg.pruned();
    let mut shell = build_denoiser(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut kept = ParamStore::new();
    for (name, t) in shell.params.iter() {
        let src = model
            .params
            .by_name(name)
            .ok_or_else(|| Error::Checkpoint(format!("pruned model parameter {name} has no source")))?;
        crate::error::ensure_shape(t.shape(), src.shape())?;
        kept.add(name, src.clone());
    }
    shell.params.load_from(&kept)?;
    Ok(shell)
}

fn edit_video_cmd(inv: &Invocation) -> Result<PathBuf> {
    let cfg: EditVideoRun = resolve(inv)?;
    let instruction = Instruction::from_name(&cfg.instruction)?.id();
    let mut req = EditRequest::new(instruction, cfg.variant);
    if cfg.steps > 0 {
        req.steps = cfg.steps;
    }
    req.s_image = cfg.s_image;
    req.s_text = cfg.s_text;
    req.cross_frame = cfg.cross_frame;
    req.seed = cfg.seed;
    req.validate()?;
    let (ae, _) = load_autoencoder(inv, &cfg.autoencoder)?;
    let model = variant_model(inv, cfg.variant, &cfg.model)?;
    let clip = if cfg.input.is_empty() {
        gen_video(&mut ChaCha8Rng::seed_from_u64(cfg.seed), cfg.frames, instruction)?.0
    } else {
        read_clip(&inv.path(&cfg.input))?
    };
    let mut rd = RunDir::open(inv, &cfg.run_dir, &cfg, false)?;
    let out = edit_video(&clip, &req, &ae, &model)?;
    let frames = clip.len();
    rd.log(&serde_json::json!({
        "iter": 0,
        "frames": frames,
        "nfe": out.counters.nfe.denoiser_calls,
        "nfe_per_frame": out.counters.nfe.denoiser_calls as f64 / frames as f64,
        "encoder_calls": out.counters.encoder_calls,
        "decoder_calls": out.counters.decoder_calls,
        "consistency_source": frame_consistency(&clip)?,
        "consistency": frame_consistency(&out.clip)?,
    }))?;
    if cfg.input.is_empty() {
        write_clip_pngs(&rd.dir.join("source"), &clip)?;
        write_clip_pngs(&rd.dir.join("edited"), &out.clip)?;
    } else {
        let input = inv.path(&cfg.input);
        let name = if input.is_dir() { "edited" } else { "edited.raw" };
        write_clip_like(&rd.dir.join(name), &out.clip, &input)?;
    }
    Ok(rd.dir)
}

// ---------------------------------------------------------------- profile-flops

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostSource {
    /// The reference U-Net catalog and stated autoencoder costs.
    Reference,
    /// Catalogs of the toy denoiser and the autoencoders in this crate.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileFlopsRun {
    pub schema_version: u32,
    pub run_dir: String,
    pub costs: CostSource,
    pub variants: Vec<Variant>,
    /// Per-variant step counts; empty uses each variant's default.
    pub steps: Vec<usize>,
    /// Toy frame size.
    pub height: usize,
    pub width: usize,
}

impl Default for ProfileFlopsRun {
    fn default() -> Self {
        Self {
            schema_version: config::SCHEMA_VERSION,
            run_dir: Command::ProfileFlops.default_dir(),
            costs: CostSource::Reference,
            variants: Variant::LADDER.to_vec(),
            steps: Vec::new(),
            height: 64,
            width: 64,
        }
    }
}

fn toy_costs(h: usize, w: usize) -> Result<PipelineCosts> {
    let cfg = DenoiserConfig::toy();
    let (lh, lw) = (h / crate::autoencoder::DOWNSAMPLE, w / crate::autoencoder::DOWNSAMPLE);
    let ae = AutoencoderPair::new(&mut ChaCha8Rng::seed_from_u64(0));
    Ok(PipelineCosts::from_catalogs(
        &denoiser_catalog(&cfg, lh, lw),
        &denoiser_catalog(&cfg.pruned(), lh, lw),
        &ae.catalog(Which::Big, h, w),
        &ae.catalog(Which::Tiny, h, w),
    ))
}

fn profile_flops(inv: &Invocation) -> Result<PathBuf> {
    let cfg: ProfileFlopsRun = resolve(inv)?;
    if !cfg.steps.is_empty() && cfg.steps.len() != cfg.variants.len() {
        return Err(Error::Config(format!(
            "{} step counts for {} variants",
            cfg.steps.len(),
            cfg.variants.len()
        )));
    }
    let costs = match cfg.costs {
        CostSource::Reference => PipelineCosts::reference()?,
        CostSource::Toy => toy_costs(cfg.height, cfg.width)?,
    };
    let mut rd = RunDir::open(inv, &cfg.run_dir, &cfg, false)?;
    let reports = if cfg.steps.is_empty() && cfg.variants == Variant::LADDER {
        ladder(&costs)?
    } else {
        cfg.variants
            .iter()
            .enumerate()
            .map(|(i, &v)| pipeline_report(v, cfg.steps.get(i).copied().unwrap_or(v.default_steps()), &costs))
            .collect::<Result<Vec<_>>>()?
    };
    for (i, r) in reports.iter().enumerate() {
        let mut v = serde_json::to_value(r)?;
        v["iter"] = i.into();
        rd.log(&v)?;
    }
    std::fs::write(
        rd.dir.join("report.json"),
        serde_json::to_string_pretty(&serde_json::json!({"costs": costs, "reports": reports}))?,
    )?;
    Ok(rd.dir)
}

// ---------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRun {
    pub schema_version: u32,
    pub seed: u64,
    pub run_dir: String,
    pub val_data: String,
    pub autoencoder: String,
    pub base: String,
    pub guidance: String,
    pub v_student: String,
    pub adversarial: String,
    /// Items for the unit-scale match to the teacher's conditional pass.
    pub probe_items: usize,
    /// Conditions for the controllability sweep.
    pub control_items: usize,
    pub control_s_image: f64,
    pub control_s_text: Vec<f64>,
    pub guidance_steps: usize,
    /// Held-out conditions for the single-step gap.
    pub gap_items: usize,
    pub teacher_steps: usize,
    pub student_timesteps: usize,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            schema_version: config::SCHEMA_VERSION,
            seed: 0,
            run_dir: Command::Eval.default_dir(),
            val_data: "data/val".into(),
            autoencoder: "runs/train-autoencoder/autoencoder.mvkt".into(),
            base: "runs/train-base/base.mvkt".into(),
            guidance: "runs/distill-guidance/guidance.mvkt".into(),
            v_student: "runs/finetune-v/v.mvkt".into(),
            adversarial: "runs/distill-adversarial/adversarial.mvkt".into(),
            probe_items: 16,
            control_items: 16,
            control_s_image: 1.5,
            control_s_text: vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0],
            guidance_steps: 10,
            gap_items: 64,
            teacher_steps: 5,
            student_timesteps: 8,
        }
    }
}

fn eval(inv: &Invocation) -> Result<PathBuf> {
    let cfg: EvalRun = resolve(inv)?;
    let (ae, _) = load_autoencoder(inv, &cfg.autoencoder)?;
    let (base, _) = load_model_stage(inv, &cfg.base, Stage::Base, Command::TrainBase)?;
    let (guided, _) = load_model_stage(inv, &cfg.guidance, Stage::GuidanceDistilled, Command::DistillGuidance)?;
    let val = latent_data(inv, &ae, &cfg.val_data, 0)?;
    let mut rd = RunDir::open(inv, &cfg.run_dir, &cfg, false)?;
    let mut report = serde_json::Map::new();

    let probe = guidance_probe(&base, &val, cfg.probe_items, cfg.seed, Some((1.0, 1.0)))?;
    report.insert("guidance_unit_scale_mse".into(), probe_mse(&guided, &probe)?.into());
    let c = controllability(
        Editor::Distilled { model: &guided, steps: cfg.guidance_steps },
        &val,
        cfg.control_items,
        cfg.control_s_image,
        &cfg.control_s_text,
        cfg.seed,
    )?;
    report.insert("guidance_control_min_rho".into(), c.min_rho().into());
    report.insert("guidance_control_mean_rho".into(), c.mean_rho().into());

    let adv_path = inv.path(&cfg.adversarial);
    if adv_path.exists() {
        let (adv, _) = load_model_stage(inv, &cfg.adversarial, Stage::Adversarial, Command::DistillAdversarial)?;
        let steps = cfg.student_timesteps;
        let c = controllability(
            Editor::SingleStep { model: &adv, timesteps: steps },
            &val,
            cfg.control_items,
            cfg.control_s_image,
            &cfg.control_s_text,
            cfg.seed,
        )?;
        report.insert("adversarial_control_min_rho".into(), c.min_rho().into());
        report.insert("adversarial_control_mean_rho".into(), c.mean_rho().into());
        let gap = single_step_gap(&guided, &adv, &val, cfg.gap_items, cfg.teacher_steps, steps, cfg.seed)?;
        report.insert("adversarial_teacher_gap".into(), gap.into());
        if inv.path(&cfg.v_student).exists() {
            let (v, _) = load_model_stage(inv, &cfg.v_student, Stage::VFinetuned, Command::FinetuneV)?;
            let g0 = single_step_gap(&guided, &v, &val, cfg.gap_items, cfg.teacher_steps, steps, cfg.seed)?;
            report.insert("untrained_teacher_gap".into(), g0.into());
            report.insert("gap_improvement".into(), (g0 / gap).into());
        }
    } else {
        log::warn!("no adversarial checkpoint at {}; skipping its metrics", adv_path.display());
    }

    let val_images = stack_images(&corpus_images(&inv.path(&cfg.val_data))?)?;
    report.insert("psnr_big".into(), psnr(&ae.roundtrip(&val_images, Which::Big, Which::Big)?, &val_images)?.into());
    report.insert("psnr_tiny".into(), psnr(&ae.roundtrip(&val_images, Which::Tiny, Which::Tiny)?, &val_images)?.into());

    let mut rec = serde_json::Value::Object(report.clone());
    rec["iter"] = 0.into();
    rd.log(&rec)?;
    std::fs::write(rd.dir.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(rd.dir)
}

// ---------------------------------------------------------------- plot

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotRun {
    pub schema_version: u32,
    pub run_dir: String,
    /// Run directories whose metrics are charted; missing ones are skipped.
    pub runs: Vec<String>,
}

impl Default for PlotRun {
    fn default() -> Self {
        Self {
            schema_version: config::SCHEMA_VERSION,
            run_dir: Command::Plot.default_dir(),
            runs: Command::ALL
                .iter()
                .filter(|&&c| c != Command::Plot)
                .map(|c| c.default_dir())
                .collect(),
        }
    }
}

fn plot(inv: &Invocation) -> Result<PathBuf> {
    let cfg: PlotRun = resolve(inv)?;
    let mut rd = RunDir::open(inv, &cfg.run_dir, &cfg, false)?;
    let mut charts = 0usize;
    for run in &cfg.runs {
        let path = inv.path(run).join("metrics.jsonl");
        if !path.exists() {
            continue;
        }
        let tag = Path::new(run)
            .file_name()
            .map_or_else(|| run.clone(), |s| s.to_string_lossy().into_owned());
        for (name, pts) in series(&read_metrics(&path)?) {
            let file = format!("{tag}__{name}.svg");
            std::fs::write(rd.dir.join(&file), line_chart_svg(&format!("{tag}: {name}"), &pts))?;
            rd.log(&serde_json::json!({"iter": charts, "chart": file, "points": pts.len()}))?;
            charts += 1;
        }
    }
    if charts == 0 {
        return Err(Error::InvalidArgument("no metrics found to plot".into()));
    }
    Ok(rd.dir)
}
