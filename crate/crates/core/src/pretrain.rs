//! Blind-sigma AWGN pretraining of the image denoiser.

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::{Backbone, DIVISOR};
use crate::checkpoint::{Checkpoint, Progress};
use crate::error::{Result, TapError};
use crate::finetune::{write_curve, CurvePoint, RunDir};
use crate::noise::{sample_awgn, stream_rng};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{reflect_index, Tensor};

const STREAM_PRETRAIN: u64 = 0x9e7a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch: usize,
    pub patch: usize,
    /// Noise std range in [0, 1] units, drawn uniformly per sample.
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig::desk()
    }
}

impl PretrainConfig {
    pub fn desk() -> Self {
        PretrainConfig {
            iterations: 2000,
            lr_start: 2e-3,
            lr_end: 1e-5,
            batch: 8,
            patch: 32,
            sigma_min: 10.0 / 255.0,
            sigma_max: 55.0 / 255.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 {
            return Err(TapError::config("iterations and batch must be positive"));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(DIVISOR) {
            return Err(TapError::config(format!("patch must be a positive multiple of {DIVISOR}")));
        }
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(TapError::config("need lr_start >= lr_end > 0"));
        }
        if !(0.0 <= self.sigma_min && self.sigma_min <= self.sigma_max) {
            return Err(TapError::config("need 0 <= sigma_min <= sigma_max"));
        }
        Ok(())
    }
}

/// Clean crops with random flips, plus their AWGN-corrupted copies. Each
/// sample draws from `stream_rng(seed, [it, i])`.
pub fn sample_denoising_batch(corpus: &[Tensor<f32>], cfg: &PretrainConfig, it: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let frames: usize = corpus.iter().map(|v| v.n()).sum();
    if frames == 0 {
        return Err(TapError::Data("pretraining corpus is empty".into()));
    }
    let c = corpus[0].c();
    let p = cfg.patch;
    let mut clean = Tensor::zeros([cfg.batch, c, p, p]);
    let mut noisy = Tensor::zeros([cfg.batch, c, p, p]);
    for i in 0..cfg.batch {
        let mut rng = stream_rng(cfg.seed, &[STREAM_PRETRAIN, it as u64, i as u64]);
        let mut k = rng.random_range(0..frames);
        let video = corpus
            .iter()
            .find(|v| {
                let hit = k < v.n();
                if !hit {
                    k -= v.n();
                }
                hit
            })
            .expect("index within corpus");
        if video.c() != c {
            return Err(TapError::Data("corpus mixes channel counts".into()));
        }
        let [_, _, h, w] = video.shape();
        let y0 = rng.random_range(0..=h.saturating_sub(p));
        let x0 = rng.random_range(0..=w.saturating_sub(p));
        let (flip_y, flip_x) = (rng.random_bool(0.5), rng.random_bool(0.5));
        let sigma = rng.random_range(cfg.sigma_min..=cfg.sigma_max);
        let out = clean.item_mut(i);
        for ch in 0..c {
            let plane = video.plane(k, ch);
            for yy in 0..p {
                let sy = if flip_y { p - 1 - yy } else { yy };
                let y = reflect_index((y0 + sy) as isize, h);
                for xx in 0..p {
                    let sx = if flip_x { p - 1 - xx } else { xx };
                    out[(ch * p + yy) * p + xx] = plane[y * w + reflect_index((x0 + sx) as isize, w)];
                }
            }
        }
        let noise: Tensor<f32> = sample_awgn([1, c, p, p], sigma, &mut rng);
        for ((d, &s), &e) in noisy.item_mut(i).iter_mut().zip(clean.item(i)).zip(noise.data()) {
            *d = s + e;
        }
    }
    Ok((clean, noisy))
}

/// Train `params` in place. Writes `step0.ckpt`, its partial checkpoints and
/// `step0_curve.csv` under the run directory, and resumes from a partial
/// checkpoint found there. Returns `false` if stopped early.
pub fn pretrain_image(
    backbone: &Backbone,
    params: &mut ParamStore<f32>,
    corpus: &[Tensor<f32>],
    cfg: &PretrainConfig,
    run: &RunDir,
) -> Result<bool> {
    cfg.validate()?;
    backbone.check_params(params)?;
    let mut adam = Adam::new(AdamConfig::default());
    let mut start = 0;
    if let Some(path) = run.partial_path(0).filter(|p| p.is_file()) {
        let ck = Checkpoint::<f32>::load(&path)?;
        let progress = ck.meta.progress.clone().ok_or_else(|| TapError::Checkpoint("partial checkpoint has no progress".into()))?;
        info!("resuming pretraining at iteration {} from {}", progress.iteration, path.display());
        adam = ck.optimizer.clone().unwrap_or_default();
        *params = ck.into_image_params(Some(backbone.config()))?.1;
        start = progress.iteration;
    }
    if let Some(d) = &run.dir {
        std::fs::create_dir_all(d).map_err(|e| TapError::io(d, e))?;
    }
    let mut curve = Vec::new();
    for it in start..cfg.iterations {
        let lr = cosine_lr(it, cfg.iterations, cfg.lr_start, cfg.lr_end);
        let (clean, noisy) = sample_denoising_batch(corpus, cfg, it)?;
        let tape = Tape::new();
        let (loss, grads) = {
            let ctx = Ctx::new(&tape, params);
            let out = backbone.forward(&ctx, &tape.constant(noisy))?;
            let loss = tape.l1_loss(&out, &clean)?;
            let value = loss.value().data()[0] as f64;
            if !value.is_finite() {
                return Err(TapError::Numeric(format!("non-finite pretraining loss at iteration {it}")));
            }
            (value, ctx.gradients(&tape.backward(&loss)?))
        };
        adam.step(params, &grads, lr)?;
        curve.push(CurvePoint { iteration: it, loss, lr });
        let done = it + 1;
        if done % 100 == 0 || done == cfg.iterations {
            info!("pretrain iteration {done}/{}: loss {loss:.6} lr {lr:.3e}", cfg.iterations);
        }
        let stop = run.stop_after.is_some_and(|n| done - start >= n) && done < cfg.iterations;
        if (run.checkpoint_every > 0 && done % run.checkpoint_every == 0 && done < cfg.iterations) || stop {
            if let Some(path) = run.partial_path(0) {
                let mut ck = Checkpoint::image(backbone.config(), params.clone(), None);
                ck.meta.progress = Some(Progress {
                    step: 0,
                    iteration: done,
                    adam_t: adam.steps(),
                });
                ck.optimizer = Some(adam.clone());
                ck.save(&path)?;
            }
        }
        if stop {
            return Ok(false);
        }
    }
    if let Some(path) = run.step_path(0) {
        Checkpoint::image(backbone.config(), params.clone(), None).save(&path)?;
        if let Some(partial) = run.partial_path(0).filter(|p| p.is_file()) {
            std::fs::remove_file(&partial).map_err(|e| TapError::io(&partial, e))?;
        }
    }
    if let Some(path) = run.curve_path(0) {
        write_curve(&path, &curve)?;
    }
    Ok(true)
}
