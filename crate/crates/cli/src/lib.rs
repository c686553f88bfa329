//! The `tap` command line: pretrain an image denoiser, build pseudo pairs,
//! fine-tune temporal modules, denoise and evaluate.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use tap_core::alignment::TemporalConfig;
use tap_core::backbone::{Backbone, DenoiserConfig, Profile};
use tap_core::checkpoint::{Checkpoint, CheckpointKind};
use tap_core::data::{
    load_srgb_video, make_toy_dataset, save_pseudo_pairs, save_srgb_video, write_npy, ColorSpace, DatasetLayout, ToyKind,
    VideoTensor,
};
use tap_core::eval::{emit_curve, emit_report, evaluate_video, mean_psnr, VideoReport};
use tap_core::finetune::{build_pairs, run_progressive, FinetuneSchedule, RunDir};
use tap_core::noise::{stream_rng, NoiseModel};
use tap_core::params::ParamStore;
use tap_core::pretrain::{pretrain_image, PretrainConfig};
use tap_core::video::{Tiling, VideoDenoiser, VideoState};
use tap_core::{Result, TapError, Tensor};

#[derive(Debug, Parser)]
#[command(name = "tap", version, about = "Unsupervised video denoising with temporal plug-in modules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the image denoiser on clean frames with blind AWGN.
    PretrainImage(RunArgs),
    /// Denoise noisy videos with a checkpoint and store recorrupted pseudo pairs.
    MakePairs(RunArgs),
    /// Progressive (or ablation-mode) fine-tuning of the temporal modules.
    Finetune(RunArgs),
    /// Denoise videos with any checkpoint; report metrics if ground truth is given.
    Denoise(RunArgs),
    /// PSNR / SSIM / temporal-coherence report for restored videos.
    Eval(RunArgs),
    /// Write procedural toy clips with their noisy versions.
    MakeToy(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config file; `--key value` flags override its entries.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Config overrides as `--key value`, dotted keys for nested tables.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

/// Process exit status for an error: 2 config, 3 data, 4 numeric.
pub fn exit_code(err: &TapError) -> i32 {
    match err {
        TapError::Config(_) | TapError::Incompatible { .. } => 2,
        TapError::Data(_) | TapError::Io { .. } | TapError::Image { .. } | TapError::Checkpoint(_) | TapError::Shape(_) => 3,
        TapError::Numeric(_) | TapError::NonFinite { .. } => 4,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainImage(a) => cmd_pretrain_image(&resolve(&a)?),
        Command::MakePairs(a) => cmd_make_pairs(&resolve(&a)?),
        Command::Finetune(a) => cmd_finetune(&resolve(&a)?),
        Command::Denoise(a) => cmd_denoise(&resolve(&a)?),
        Command::Eval(a) => cmd_eval(&resolve(&a)?),
        Command::MakeToy(a) => cmd_make_toy(&resolve(&a)?),
    }
}

fn resolve<T: serde::de::DeserializeOwned + Serialize>(a: &RunArgs) -> Result<T> {
    let cfg: T = config::resolve(a.config.as_deref(), &a.overrides)?;
    info!("resolved config:\n{}", config::render(&cfg));
    Ok(cfg)
}

fn default_layout() -> DatasetLayout {
    DatasetLayout::Srgb
}

fn default_profile() -> Profile {
    Profile::Desk
}

fn default_channels() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainArgs {
    /// Root with one sub-directory of clean frames per video.
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_profile")]
    pub profile: Profile,
    #[serde(default = "default_channels")]
    pub in_channels: usize,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub train: PretrainConfig,
}

pub fn cmd_pretrain_image(a: &PretrainArgs) -> Result<()> {
    let corpus: Vec<Tensor<f32>> = DatasetLayout::Srgb
        .load_all(&a.corpus)?
        .into_iter()
        .map(|(_, v)| v.frames)
        .collect();
    let cfg = match a.profile {
        Profile::Desk => DenoiserConfig::desk(a.in_channels),
        Profile::Full => DenoiserConfig::full(a.in_channels),
    };
    let backbone = Backbone::new(cfg)?;
    let mut params = backbone.init_params(&mut stream_rng(a.train.seed, &[0x1417]));
    let run = RunDir {
        dir: Some(a.out_dir.clone()),
        checkpoint_every: a.checkpoint_every,
        stop_after: None,
    };
    pretrain_image(&backbone, &mut params, &corpus, &a.train, &run)?;
    info!("wrote {}", a.out_dir.join("step0.ckpt").display());
    Ok(())
}

/// A denoiser restored from a checkpoint of either kind.
pub struct Loaded {
    pub net: VideoDenoiser,
    pub state: VideoState<f32>,
    pub kind: CheckpointKind,
}

/// Open a checkpoint as a video denoiser. Image checkpoints get fresh,
/// inactive temporal modules sized for `frames` and `patch`.
pub fn load_denoiser(path: &Path, frames: usize, patch: usize, seed: u64) -> Result<Loaded> {
    let ck = Checkpoint::<f32>::load(path)?;
    let cfg = ck.meta.config.clone();
    let tcfg = match (&ck.meta.kind, &ck.meta.temporal) {
        (CheckpointKind::Video, Some(t)) => t.clone(),
        _ => TemporalConfig::for_backbone(&cfg, frames, patch),
    };
    let kind = ck.meta.kind;
    let net = VideoDenoiser::new(cfg, tcfg)?;
    let state = ck.into_video_state(&net, &mut stream_rng(seed, &[0x7e3]))?;
    Ok(Loaded { net, state, kind })
}

fn default_frames(layout: &DatasetLayout) -> usize {
    match layout {
        DatasetLayout::Srgb => 5,
        DatasetLayout::Raw { .. } => 3,
    }
}

fn load_videos(layout: &DatasetLayout, root: &Path) -> Result<Vec<(String, VideoTensor)>> {
    let videos = layout.load_all(root)?;
    info!("loaded {} videos from {}", videos.len(), root.display());
    Ok(videos)
}

fn frames_only(videos: Vec<(String, VideoTensor)>) -> Vec<(String, Tensor<f32>)> {
    videos.into_iter().map(|(id, v)| (id, v.frames)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MakePairsArgs {
    pub checkpoint: PathBuf,
    /// Root with one sub-directory of noisy frames per video.
    pub videos: PathBuf,
    pub noise: NoiseModel,
    pub out_dir: PathBuf,
    #[serde(default = "default_layout")]
    pub layout: DatasetLayout,
    #[serde(default)]
    pub seed: u64,
    /// Window length for image checkpoints (default 5 sRGB, 3 raw).
    #[serde(default)]
    pub frames: Option<usize>,
}

pub fn cmd_make_pairs(a: &MakePairsArgs) -> Result<()> {
    let frames = a.frames.unwrap_or_else(|| default_frames(&a.layout));
    let loaded = load_denoiser(&a.checkpoint, frames, 32, a.seed)?;
    let videos = frames_only(load_videos(&a.layout, &a.videos)?);
    let step = loaded.state.step_index + 1;
    let pairs = build_pairs(&loaded.net, &loaded.state, &videos, &a.noise, step, a.seed)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| TapError::Data(format!("{}: {e}", a.out_dir.display())))?;
    save_pseudo_pairs(&pairs, &a.out_dir)?;
    info!("wrote {} pseudo pairs for step {step} to {}", pairs.pairs.len(), a.out_dir.display());
    Ok(())
}

/// Held-out clips with ground truth, scored after every step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSet {
    pub clean: PathBuf,
    pub noisy: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneArgs {
    /// Image-denoiser (step 0) checkpoint.
    pub checkpoint: PathBuf,
    pub videos: PathBuf,
    pub noise: NoiseModel,
    pub out_dir: PathBuf,
    #[serde(default = "default_layout")]
    pub layout: DatasetLayout,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub frames: Option<usize>,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub schedule: FinetuneSchedule,
    #[serde(default)]
    pub validation: Option<ValidationSet>,
}

fn score(net: &VideoDenoiser, params: &ParamStore<f32>, val: &[(String, Tensor<f32>, Tensor<f32>)]) -> Result<f64> {
    let reports = val
        .iter()
        .map(|(id, clean, noisy)| evaluate_video(id, &net.denoise_video(params, noisy, None)?, clean))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_psnr(&reports))
}

pub fn cmd_finetune(a: &FinetuneArgs) -> Result<()> {
    if !a.checkpoint.is_file() {
        return Err(TapError::Data(format!("step-0 checkpoint {} not found", a.checkpoint.display())));
    }
    let frames = a.frames.unwrap_or_else(|| default_frames(&a.layout));
    let loaded = load_denoiser(&a.checkpoint, frames, a.schedule.step.patch, a.seed)?;
    if loaded.kind != CheckpointKind::Image && loaded.state.step_index != 0 {
        return Err(TapError::Config(format!(
            "fine-tuning starts from a step-0 checkpoint, {} is at step {}",
            a.checkpoint.display(),
            loaded.state.step_index
        )));
    }
    let videos = frames_only(load_videos(&a.layout, &a.videos)?);
    let val = match &a.validation {
        Some(v) => {
            let clean = load_videos(&a.layout, &v.clean)?;
            let noisy = load_videos(&a.layout, &v.noisy)?;
            if clean.len() != noisy.len() || clean.iter().zip(&noisy).any(|(c, n)| c.0 != n.0) {
                return Err(TapError::Data("validation clean and noisy sets list different videos".into()));
            }
            clean.into_iter().zip(noisy).map(|((id, c), (_, n))| (id, c.frames, n.frames)).collect()
        }
        None => Vec::new(),
    };
    let mut curve = Vec::new();
    if !val.is_empty() {
        let p = score(&loaded.net, &loaded.state.params, &val)?;
        info!("validation psnr at step 0: {p:.3} dB");
        curve.push((0, p));
    }
    let run = RunDir {
        dir: Some(a.out_dir.clone()),
        checkpoint_every: a.checkpoint_every,
        stop_after: None,
    };
    let net = &loaded.net;
    run_progressive(net, loaded.state, &videos, &a.noise, &a.schedule, a.seed, &run, &mut |plan, st| {
        if !val.is_empty() {
            let p = score(net, &st.params, &val)?;
            info!("validation psnr after step {}: {p:.3} dB", plan.index);
            curve.push((plan.index, p));
        }
        Ok(())
    })?;
    if !curve.is_empty() {
        emit_curve(&curve, &a.out_dir.join("validation.csv"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseArgs {
    pub checkpoint: PathBuf,
    /// Root with one sub-directory of noisy frames per video.
    pub input: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_layout")]
    pub layout: DatasetLayout,
    /// Matching clean videos; enables `report.csv`.
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    #[serde(default)]
    pub tiling: Option<Tiling>,
    #[serde(default)]
    pub frames: Option<usize>,
}

fn save_video(v: &Tensor<f32>, colorspace: ColorSpace, dir: &Path) -> Result<()> {
    match colorspace {
        ColorSpace::Srgb => save_srgb_video(v, dir),
        ColorSpace::RawRgbg => {
            fs::create_dir_all(dir).map_err(|e| TapError::Data(format!("{}: {e}", dir.display())))?;
            (0..v.n()).try_for_each(|i| write_npy(&dir.join(format!("{i:05}.npy")), &v.select(i)))
        }
    }
}

pub fn cmd_denoise(a: &DenoiseArgs) -> Result<()> {
    let frames = a.frames.unwrap_or_else(|| default_frames(&a.layout));
    let loaded = load_denoiser(&a.checkpoint, frames, 32, 0)?;
    let videos = load_videos(&a.layout, &a.input)?;
    let mut reports = Vec::new();
    for (id, v) in &videos {
        let out = match loaded.kind {
            CheckpointKind::Image => loaded.net.backbone().denoise_image(&loaded.state.params, &v.frames)?,
            CheckpointKind::Video => loaded.net.denoise_video(&loaded.state.params, &v.frames, a.tiling)?,
        };
        save_video(&out, v.colorspace, &a.out_dir.join(id))?;
        if let Some(gt) = &a.ground_truth {
            let truth = a.layout.load_video(&gt.join(id))?;
            reports.push(evaluate_video(id, &out, &truth.frames)?);
        }
        info!("denoised {id} ({} frames)", v.len());
    }
    if a.ground_truth.is_some() {
        finish_report(&reports, &a.out_dir.join("report.csv"))?;
    }
    Ok(())
}

fn finish_report(reports: &[VideoReport], path: &Path) -> Result<()> {
    emit_report(reports, path)?;
    for r in reports {
        info!(
            "{}: psnr {:.3} ssim {:.4} tc {:.5}",
            r.video,
            r.mean_psnr(),
            r.mean_ssim(),
            r.temporal_coherence.unwrap_or(f64::NAN)
        );
    }
    info!("mean psnr {:.3} dB, report at {}", mean_psnr(reports), path.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    pub restored: PathBuf,
    pub ground_truth: PathBuf,
    pub out: PathBuf,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let restored = load_videos(&DatasetLayout::Srgb, &a.restored)?;
    let reports = restored
        .iter()
        .map(|(id, v)| evaluate_video(id, &v.frames, &load_srgb_video(&a.ground_truth.join(id))?.frames))
        .collect::<Result<Vec<_>>>()?;
    finish_report(&reports, &a.out)
}

fn default_count() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MakeToyArgs {
    pub out_dir: PathBuf,
    pub kind: ToyKind,
    pub size: usize,
    /// AWGN std in [0, 1] units.
    pub sigma: f64,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

/// `<out>/clean/toy{i}` and `<out>/noisy/toy{i}` as 8-bit PNG frames. The
/// noisy frames are clamped and quantized by the PNG encoding.
pub fn cmd_make_toy(a: &MakeToyArgs) -> Result<()> {
    if a.size == 0 || a.count == 0 {
        return Err(TapError::Config("size and count must be positive".into()));
    }
    for i in 0..a.count {
        let (clean, noisy) = make_toy_dataset(a.kind, a.size, a.sigma, a.seed.wrapping_add(i as u64))?;
        let id = format!("toy{i:03}");
        save_srgb_video(&clean.frames, &a.out_dir.join("clean").join(&id))?;
        save_srgb_video(&noisy.frames, &a.out_dir.join("noisy").join(&id))?;
    }
    info!("wrote {} toy clips to {}", a.count, a.out_dir.display());
    Ok(())
}
