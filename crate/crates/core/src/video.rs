//! Video denoiser: per-frame encoding, temporal modules on the level 1-3
//! skips, central-frame bottleneck and decoding.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{TemporalConfig, TemporalModule, Transfer, MODULE_LEVELS};
use crate::autograd::{Tape, Var};
use crate::backbone::{clamp01, padded_dims, Backbone, DenoiserConfig, FeaturePyramid};
use crate::error::{Result, TapError};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{reflect_index, Real, Tensor};

/// Frame indices of the window centred on `t`, mirrored at the ends.
pub fn window_indices(t: usize, n: usize, frames: usize) -> Vec<usize> {
    let half = (frames / 2) as isize;
    (-half..=half).map(|d| reflect_index(t as isize + d, n)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tiling {
    pub tile: usize,
    pub overlap: usize,
}

impl Default for Tiling {
    fn default() -> Self {
        Tiling {
            tile: 256,
            overlap: 16,
        }
    }
}

/// Trained weights plus the number of completed fine-tuning steps.
#[derive(Clone, Debug)]
pub struct VideoState<T> {
    pub params: ParamStore<T>,
    pub step_index: usize,
}

#[derive(Clone, Debug)]
pub struct VideoDenoiser {
    backbone: Backbone,
    tcfg: TemporalConfig,
    /// Indexed by level - 1.
    modules: Vec<TemporalModule>,
}

impl VideoDenoiser {
    pub fn new(cfg: DenoiserConfig, tcfg: TemporalConfig) -> Result<Self> {
        let backbone = Backbone::new(cfg)?;
        tcfg.validate(backbone.config())?;
        let modules = (1..=3)
            .map(|l| TemporalModule::new(l, backbone.config(), &tcfg))
            .collect::<Result<_>>()?;
        Ok(VideoDenoiser {
            backbone,
            tcfg,
            modules,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.backbone.config()
    }

    pub fn temporal_config(&self) -> &TemporalConfig {
        &self.tcfg
    }

    pub fn frames(&self) -> usize {
        self.tcfg.frames
    }

    pub fn module(&self, level: usize) -> &TemporalModule {
        &self.modules[level - 1]
    }

    /// Fresh temporal modules (gates at zero) around existing backbone weights.
    pub fn init_temporal<T: Real, R: Rng>(&self, backbone: &ParamStore<T>, rng: &mut R) -> Result<VideoState<T>> {
        self.backbone.check_params(backbone)?;
        let mut params = backbone.clone();
        for m in &self.modules {
            m.init(&mut params, rng);
        }
        Ok(VideoState {
            params,
            step_index: 0,
        })
    }

    pub fn init_params<T: Real, R: Rng>(&self, rng: &mut R) -> VideoState<T> {
        let backbone = self.backbone.init_params(rng);
        self.init_temporal(&backbone, rng).expect("fresh backbone matches its config")
    }

    /// A module that is bound as a constant with an all-zero gate.
    fn idle<T: Real>(&self, ctx: &Ctx<T>, level: usize) -> Result<bool> {
        let name = self.modules[level - 1].beta_name();
        let p = ctx
            .params()
            .param(&name)
            .ok_or_else(|| TapError::config(format!("unknown parameter {name}")))?;
        let constant = p.frozen || !ctx.tape.is_recording();
        Ok(constant && p.value.data().iter().all(|&b| b == T::zero()))
    }

    /// Temporal modules and decoder over pre-computed pyramids, one per frame
    /// of the window. With `skip_idle`, modules that provably contribute
    /// nothing (constant zero gate, no active module above) are not run.
    pub fn forward_pyramids<T: Real>(
        &self,
        ctx: &Ctx<T>,
        pyramids: &[&FeaturePyramid<T>],
        central_frame: &Var<T>,
        skip_idle: bool,
    ) -> Result<Var<T>> {
        let frames = self.tcfg.frames;
        if pyramids.len() != frames {
            return Err(TapError::config(format!(
                "window has {} frames, denoiser is configured for T = {frames}",
                pyramids.len()
            )));
        }
        let center = pyramids[self.tcfg.center()];
        // Finest level that must run: everything from level 3 down to it.
        let mut finest_needed = 4;
        for level in 1..=3 {
            if !skip_idle || !self.idle(ctx, level)? {
                finest_needed = level;
                break;
            }
        }
        let mut skips = center.skips.clone();
        let mut transfer: Option<Transfer<T>> = None;
        for level in MODULE_LEVELS {
            if level < finest_needed {
                break;
            }
            let feats: Vec<Var<T>> = pyramids.iter().map(|p| p.skips[level - 1].clone()).collect();
            let (out, tr) = self.modules[level - 1].forward(ctx, &feats, transfer.as_ref())?;
            skips[level - 1] = out;
            transfer = Some(tr);
        }
        self.backbone.decode(ctx, &skips, &center.bottleneck, central_frame)
    }

    /// Training-mode forward on padded frames `B x C x H x W`, one tensor per
    /// window position. Output is not clamped.
    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, frames: &[Var<T>], skip_idle: bool) -> Result<Var<T>> {
        if frames.len() != self.tcfg.frames {
            return Err(TapError::config(format!(
                "window has {} frames, denoiser is configured for T = {}",
                frames.len(),
                self.tcfg.frames
            )));
        }
        let pyramids = frames
            .iter()
            .map(|f| self.backbone.encode(ctx, f))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = pyramids.iter().collect();
        self.forward_pyramids(ctx, &refs, &frames[self.tcfg.center()], skip_idle)
    }

    /// Denoise the central frame of a window of `1 x C x H x W` frames.
    pub fn denoise_window<T: Real>(&self, params: &ParamStore<T>, window: &[Tensor<T>]) -> Result<Tensor<T>> {
        if window.len() != self.tcfg.frames {
            return Err(TapError::config(format!(
                "window has {} frames, denoiser is configured for T = {}",
                window.len(),
                self.tcfg.frames
            )));
        }
        let [_, _, h, w] = window[0].shape();
        if window.iter().any(|f| f.shape() != window[0].shape()) {
            return Err(TapError::shape("window frames differ in shape"));
        }
        let (ph, pw) = padded_dims(h, w);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, params);
        let frames: Vec<_> = window.iter().map(|f| tape.constant(f.reflect_pad_to(ph, pw))).collect();
        let out = self.forward(&ctx, &frames, false)?;
        Ok(clamp01(&out.value().crop(0, 0, h, w)))
    }

    /// Denoise every frame of an `N x C x H x W` video.
    pub fn denoise_video<T: Real>(
        &self,
        params: &ParamStore<T>,
        video: &Tensor<T>,
        tiling: Option<Tiling>,
    ) -> Result<Tensor<T>> {
        let [n, c, h, w] = video.shape();
        if n == 0 {
            return Err(TapError::Data("video has no frames".into()));
        }
        match tiling {
            Some(t) if h > t.tile || w > t.tile => self.denoise_tiled(params, video, t),
            _ => {
                let frames = self.denoise_untiled(params, video)?;
                let mut out = Tensor::zeros([n, c, h, w]);
                for (i, f) in frames.iter().enumerate() {
                    out.item_mut(i).copy_from_slice(f.data());
                }
                Ok(out)
            }
        }
    }

    fn denoise_untiled<T: Real>(&self, params: &ParamStore<T>, video: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let [n, _, h, w] = video.shape();
        let (ph, pw) = padded_dims(h, w);
        // Every frame is encoded once; windows share the pyramids.
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, params);
        let inputs: Vec<Var<T>> = (0..n)
            .map(|i| tape.constant(video.select(i).reflect_pad_to(ph, pw)))
            .collect();
        let pyramids = inputs
            .iter()
            .map(|f| self.backbone.encode(&ctx, f))
            .collect::<Result<Vec<_>>>()?;
        (0..n)
            .into_par_iter()
            .map(|t| {
                let tape = Tape::inference();
                let ctx = Ctx::new(&tape, params);
                let idx = window_indices(t, n, self.tcfg.frames);
                let win: Vec<_> = idx.iter().map(|&i| &pyramids[i]).collect();
                let out = self.forward_pyramids(&ctx, &win, &inputs[t], false)?;
                Ok(clamp01(&out.value().crop(0, 0, h, w)))
            })
            .collect()
    }

    fn denoise_tiled<T: Real>(&self, params: &ParamStore<T>, video: &Tensor<T>, t: Tiling) -> Result<Tensor<T>> {
        if t.overlap * 2 >= t.tile {
            return Err(TapError::config("tile overlap must be less than half the tile size"));
        }
        let [n, c, h, w] = video.shape();
        let ys = tile_starts(h, t);
        let xs = tile_starts(w, t);
        let mut acc = Tensor::zeros([n, c, h, w]);
        let mut wsum = vec![0.0f64; h * w];
        for &y0 in &ys {
            for &x0 in &xs {
                let th = t.tile.min(h);
                let tw = t.tile.min(w);
                let mut crop = Tensor::zeros([n, c, th, tw]);
                for i in 0..n {
                    let item = video.select(i).crop(y0, x0, th, tw);
                    crop.item_mut(i).copy_from_slice(item.data());
                }
                let out = self.denoise_untiled(params, &crop)?;
                let wy: Vec<f64> = (0..th).map(|y| blend_weight(y, th, y0 > 0, y0 + th < h, t.overlap)).collect();
                let wx: Vec<f64> = (0..tw).map(|x| blend_weight(x, tw, x0 > 0, x0 + tw < w, t.overlap)).collect();
                for yy in 0..th {
                    for xx in 0..tw {
                        wsum[(y0 + yy) * w + x0 + xx] += wy[yy] * wx[xx];
                    }
                }
                for (i, f) in out.iter().enumerate() {
                    for ch in 0..c {
                        for yy in 0..th {
                            for xx in 0..tw {
                                let idx = [i, ch, y0 + yy, x0 + xx];
                                let v = acc.at(idx) + f.at([0, ch, yy, xx]) * T::lit(wy[yy] * wx[xx]);
                                acc.set(idx, v);
                            }
                        }
                    }
                }
            }
        }
        for i in 0..n {
            for ch in 0..c {
                for p in 0..h * w {
                    let k = acc.index([i, ch, p / w, p % w]);
                    acc.data_mut()[k] = acc.data()[k] / T::lit(wsum[p]);
                }
            }
        }
        Ok(acc)
    }
}

fn tile_starts(len: usize, t: Tiling) -> Vec<usize> {
    if len <= t.tile {
        return vec![0];
    }
    let stride = t.tile - t.overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + t.tile < len).collect();
    starts.push(len - t.tile);
    starts
}

/// Linear ramp across the overlap on edges shared with another tile.
fn blend_weight(i: usize, len: usize, ramp_start: bool, ramp_end: bool, overlap: usize) -> f64 {
    let step = 1.0 / (overlap + 1) as f64;
    let mut wgt: f64 = 1.0;
    if ramp_start {
        wgt = wgt.min((i + 1) as f64 * step);
    }
    if ramp_end {
        wgt = wgt.min((len - i) as f64 * step);
    }
    wgt
}
