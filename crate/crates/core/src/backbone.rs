//! Four-level encoder-decoder image denoiser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Result, TapError};
use crate::nn::{Block, BlockKind, Conv};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LEVELS: usize = 4;
/// Spatial dims must be divisible by this after padding.
pub const DIVISOR: usize = 1 << (LEVELS - 1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Full,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampler {
    PixelShuffle,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub levels: usize,
    pub enc_blocks: Vec<usize>,
    pub dec_blocks: Vec<usize>,
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub profile: Profile,
    pub block: BlockKind,
    pub upsampler: Upsampler,
}

impl DenoiserConfig {
    pub fn full(in_channels: usize) -> Self {
        DenoiserConfig {
            levels: LEVELS,
            enc_blocks: vec![2, 2, 4, 6],
            dec_blocks: vec![2, 2, 2],
            channels: vec![64, 128, 256, 512],
            in_channels,
            out_channels: in_channels,
            profile: Profile::Full,
            block: BlockKind::Naf,
            upsampler: Upsampler::PixelShuffle,
        }
    }

    pub fn desk(in_channels: usize) -> Self {
        DenoiserConfig {
            levels: LEVELS,
            enc_blocks: vec![1, 1, 1, 2],
            dec_blocks: vec![1, 1, 1],
            channels: vec![8, 16, 32, 64],
            in_channels,
            out_channels: in_channels,
            profile: Profile::Desk,
            block: BlockKind::Naf,
            upsampler: Upsampler::PixelShuffle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels != LEVELS {
            return Err(TapError::config(format!("levels must be {LEVELS}, got {}", self.levels)));
        }
        if self.enc_blocks.len() != 4 || self.dec_blocks.len() != 3 || self.channels.len() != 4 {
            return Err(TapError::config(
                "enc_blocks and channels need 4 entries, dec_blocks needs 3",
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(TapError::config("channel counts must be positive"));
        }
        match self.profile {
            Profile::Full => {
                if self.enc_blocks != [2, 2, 4, 6]
                    || self.dec_blocks != [2, 2, 2]
                    || self.channels != [64, 128, 256, 512]
                {
                    return Err(TapError::config(
                        "full profile requires enc_blocks [2,2,4,6], dec_blocks [2,2,2], channels [64,128,256,512]",
                    ));
                }
            }
            Profile::Desk => {
                if self.channels.iter().any(|&c| c < 4) {
                    return Err(TapError::config("desk channels must each be at least 4"));
                }
                if self.enc_blocks.iter().chain(&self.dec_blocks).any(|&b| b < 1) {
                    return Err(TapError::config("desk block counts must each be at least 1"));
                }
            }
        }
        Ok(())
    }

    /// Fields that differ from `other`, by name.
    pub fn diff(&self, other: &DenoiserConfig) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, same: bool| {
            if !same {
                out.push(name.to_string());
            }
        };
        check("levels", self.levels == other.levels);
        check("enc_blocks", self.enc_blocks == other.enc_blocks);
        check("dec_blocks", self.dec_blocks == other.dec_blocks);
        check("channels", self.channels == other.channels);
        check("in_channels", self.in_channels == other.in_channels);
        check("out_channels", self.out_channels == other.out_channels);
        check("profile", self.profile == other.profile);
        check("block", self.block == other.block);
        check("upsampler", self.upsampler == other.upsampler);
        out
    }
}

/// Encoder outputs of one batch of frames: skip features for levels 1-3 and
/// the level-4 input.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T> {
    pub skips: Vec<Var<T>>,
    pub bottleneck: Var<T>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: DenoiserConfig,
    intro: Conv,
    enc: Vec<Vec<Block>>,
    down: Vec<Conv>,
    middle: Vec<Block>,
    up: Vec<Conv>,
    dec: Vec<Vec<Block>>,
    ending: Conv,
}

impl Backbone {
    pub fn new(cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let intro = Conv::new("intro", cfg.in_channels, ch[0], 3);
        let enc = (0..3)
            .map(|l| {
                (0..cfg.enc_blocks[l])
                    .map(|i| Block::new(cfg.block, &format!("enc{}.{i}", l + 1), ch[l]))
                    .collect()
            })
            .collect();
        let down = (0..3)
            .map(|l| Conv::new(format!("down{}", l + 1), ch[l], ch[l + 1], 2).strided(2, 0))
            .collect();
        let middle = (0..cfg.enc_blocks[3])
            .map(|i| Block::new(cfg.block, &format!("middle.{i}"), ch[3]))
            .collect();
        let up = (0..3)
            .map(|l| Conv::new(format!("up{}", l + 1), ch[l + 1], 4 * ch[l], 1).no_bias())
            .collect();
        let dec = (0..3)
            .map(|l| {
                (0..cfg.dec_blocks[l])
                    .map(|i| Block::new(cfg.block, &format!("dec{}.{i}", l + 1), ch[l]))
                    .collect()
            })
            .collect();
        let ending = Conv::new("ending", ch[0], cfg.out_channels, 3);
        Ok(Backbone {
            cfg,
            intro,
            enc,
            down,
            middle,
            up,
            dec,
            ending,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn init_params<T: Real, R: Rng>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.intro.init(&mut store, rng);
        for l in 0..3 {
            for b in &self.enc[l] {
                b.init(&mut store, rng);
            }
            self.down[l].init(&mut store, rng);
        }
        for b in &self.middle {
            b.init(&mut store, rng);
        }
        for l in 0..3 {
            self.up[l].init(&mut store, rng);
            for b in &self.dec[l] {
                b.init(&mut store, rng);
            }
        }
        self.ending.init(&mut store, rng);
        store
    }

    /// Names of the final projection's tensors.
    pub fn head_names(&self) -> [String; 2] {
        [self.ending.weight_name(), self.ending.bias_name()]
    }

    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        let reference = self.init_params::<T, _>(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
        for (name, p) in reference.iter() {
            let got = params.get(name)?;
            if got.shape() != p.value.shape() {
                return Err(TapError::config(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn encode<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<FeaturePyramid<T>> {
        let [_, c, h, w] = x.shape();
        if c != self.cfg.in_channels {
            return Err(TapError::config(format!(
                "frame has {c} channels, denoiser expects {}",
                self.cfg.in_channels
            )));
        }
        if h % DIVISOR != 0 || w % DIVISOR != 0 {
            return Err(TapError::shape(format!(
                "frame {h}x{w} is not padded to a multiple of {DIVISOR}"
            )));
        }
        let mut f = self.intro.forward(ctx, x)?;
        let mut skips = Vec::with_capacity(3);
        for l in 0..3 {
            for b in &self.enc[l] {
                f = b.forward(ctx, &f)?;
            }
            skips.push(f.clone());
            f = self.down[l].forward(ctx, &f)?;
        }
        Ok(FeaturePyramid {
            skips,
            bottleneck: f,
        })
    }

    /// Decode from per-level skip inputs. `input` is the frame the global
    /// residual is added to. Output is not clamped.
    pub fn decode<T: Real>(
        &self,
        ctx: &Ctx<T>,
        skips: &[Var<T>],
        bottleneck: &Var<T>,
        input: &Var<T>,
    ) -> Result<Var<T>> {
        if skips.len() != 3 {
            return Err(TapError::shape(format!("decoder needs 3 skip inputs, got {}", skips.len())));
        }
        let t = ctx.tape;
        let mut f = bottleneck.clone();
        for b in &self.middle {
            f = b.forward(ctx, &f)?;
        }
        check_finite(&f, 4)?;
        for l in (0..3).rev() {
            let up = t.pixel_shuffle(&self.up[l].forward(ctx, &f)?)?;
            if up.shape() != skips[l].shape() {
                return Err(TapError::shape(format!(
                    "level {} decoder input {:?} vs skip {:?}",
                    l + 1,
                    up.shape(),
                    skips[l].shape()
                )));
            }
            f = t.add(&up, &skips[l])?;
            for b in &self.dec[l] {
                f = b.forward(ctx, &f)?;
            }
            check_finite(&f, l + 1)?;
        }
        let residual = self.ending.forward(ctx, &f)?;
        let out = t.add(input, &residual)?;
        check_finite(&out, 0)?;
        Ok(out)
    }

    /// `decode(encode(x))` with direct skips; training-mode forward.
    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let p = self.encode(ctx, x)?;
        self.decode(ctx, &p.skips, &p.bottleneck, x)
    }

    /// Inference on `N x C x H x W` frames of any size: reflect-pad to a
    /// multiple of 8, denoise, crop, clamp to [0, 1].
    pub fn denoise_image<T: Real>(&self, params: &ParamStore<T>, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, _, h, w] = frames.shape();
        let (ph, pw) = padded_dims(h, w);
        let padded = frames.reflect_pad_to(ph, pw);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, params);
        let out = self.forward(&ctx, &tape.constant(padded))?;
        Ok(clamp01(&out.value().crop(0, 0, h, w)))
    }
}

pub fn padded_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(DIVISOR) * DIVISOR, w.div_ceil(DIVISOR) * DIVISOR)
}

pub fn clamp01<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()).min(T::one()))
}

fn check_finite<T: Real>(v: &Var<T>, level: usize) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(TapError::NonFinite {
            level,
            stage: "decoder",
        })
    }
}
