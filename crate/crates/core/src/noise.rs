//! Known noise models, recorruption and pseudo noisy-clean pairs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    /// Additive white Gaussian noise, std `sigma` in [0, 1] intensity units.
    Awgn { sigma: f64 },
    /// `alpha * Poisson(x / alpha) - x + N(0, delta^2)`: zero mean, variance
    /// `alpha * x + delta^2`. `alpha == 0` is pure Gaussian read noise.
    PoissonGaussian { alpha: f64, delta: f64 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseModel::Awgn { sigma } => sigma >= 0.0 && sigma.is_finite(),
            NoiseModel::PoissonGaussian { alpha, delta } => {
                alpha >= 0.0 && delta >= 0.0 && alpha.is_finite() && delta.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(TapError::config(format!("invalid noise parameters {self:?}")))
        }
    }

    /// Per-pixel noise variance at intensity `x`.
    pub fn variance_at(&self, x: f64) -> f64 {
        match *self {
            NoiseModel::Awgn { sigma } => sigma * sigma,
            NoiseModel::PoissonGaussian { alpha, delta } => alpha * x.max(0.0) + delta * delta,
        }
    }

    pub fn sample<T: Real, R: Rng>(&self, clean: &Tensor<T>, rng: &mut R) -> Tensor<T> {
        match *self {
            NoiseModel::Awgn { sigma } => sample_awgn(clean.shape(), sigma, rng),
            NoiseModel::PoissonGaussian { alpha, delta } => sample_poisson_gaussian(clean, alpha, delta, rng),
        }
    }

    /// `clean + noise`, unclamped.
    pub fn corrupt<T: Real, R: Rng>(&self, clean: &Tensor<T>, rng: &mut R) -> Tensor<T> {
        let mut out = self.sample(clean, rng);
        out.add_assign(clean);
        out
    }
}

pub fn sample_awgn<T: Real, R: Rng>(shape: [usize; 4], sigma: f64, rng: &mut R) -> Tensor<T> {
    if sigma == 0.0 {
        return Tensor::zeros(shape);
    }
    let normal = Normal::new(0.0, sigma).expect("finite non-negative sigma");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

/// Signal-dependent noise for `clean`. Negative intensities contribute no
/// shot noise.
pub fn sample_poisson_gaussian<T: Real, R: Rng>(clean: &Tensor<T>, alpha: f64, delta: f64, rng: &mut R) -> Tensor<T> {
    let read = (delta > 0.0).then(|| Normal::new(0.0, delta).expect("finite delta"));
    let mut out = clean.clone();
    for v in out.data_mut() {
        let x = v.as_f64();
        let shot = if alpha > 0.0 && x > 0.0 {
            let k: f64 = Poisson::new(x / alpha).expect("positive rate").sample(rng);
            alpha * k - x
        } else {
            0.0
        };
        let r = read.as_ref().map_or(0.0, |n| n.sample(rng));
        *v = T::lit(shot + r);
    }
    out
}

/// Independent, reproducible RNG stream for a position in a run, e.g.
/// `(seed, [step, video])`.
pub fn stream_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One pseudo pair: denoised video treated as clean, plus its recorruption.
#[derive(Clone, Debug)]
pub struct PseudoPair<T> {
    pub id: String,
    pub clean: Tensor<T>,
    pub noisy: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct PseudoPairSet<T> {
    pub pairs: Vec<PseudoPair<T>>,
    /// Fine-tuning step these pairs supervise (1 = built with the image denoiser).
    pub source_step: usize,
    pub model: NoiseModel,
    pub seed: u64,
}

impl<T: Real> PseudoPairSet<T> {
    /// Draw a new noise realization for every pair.
    pub fn resample<R: Rng>(&mut self, rng: &mut R) {
        for p in &mut self.pairs {
            p.noisy = self.model.corrupt(&p.clean, rng);
        }
    }
}

/// Denoise, clamp to [0, 1], recorrupt.
pub fn make_pseudo_pair<T: Real, R: Rng>(
    id: &str,
    noisy_video: &Tensor<T>,
    denoiser: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
    model: &NoiseModel,
    rng: &mut R,
) -> Result<PseudoPair<T>> {
    model.validate()?;
    let out = denoiser(noisy_video)?;
    if out.shape() != noisy_video.shape() {
        return Err(TapError::shape(format!(
            "denoiser returned {:?} for input {:?}",
            out.shape(),
            noisy_video.shape()
        )));
    }
    let clean = out.map(|v| v.max(T::zero()).min(T::one()));
    let noisy = model.corrupt(&clean, rng);
    Ok(PseudoPair {
        id: id.to_string(),
        clean,
        noisy,
    })
}

/// Pseudo pairs for a corpus; video `i` draws from `stream_rng(seed, [step, i])`.
pub fn make_pseudo_pairs<T: Real>(
    videos: &[(String, Tensor<T>)],
    mut denoiser: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    model: &NoiseModel,
    source_step: usize,
    seed: u64,
) -> Result<PseudoPairSet<T>> {
    let pairs = videos
        .iter()
        .enumerate()
        .map(|(i, (id, v))| {
            let mut rng = stream_rng(seed, &[source_step as u64, i as u64]);
            make_pseudo_pair(id, v, &mut denoiser, model, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(PseudoPairSet {
        pairs,
        source_step,
        model: *model,
        seed,
    })
}

/// ISO to Poisson-Gaussian parameters. Text format, one entry per line:
/// `iso alpha delta`; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationTable {
    pub entries: BTreeMap<u32, (f64, f64)>,
}

impl CalibrationTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || TapError::config(format!("calibration line {}: expected `iso alpha delta`", no + 1));
            if fields.len() != 3 {
                return Err(bad());
            }
            let iso: u32 = fields[0].parse().map_err(|_| bad())?;
            let alpha: f64 = fields[1].parse().map_err(|_| bad())?;
            let delta: f64 = fields[2].parse().map_err(|_| bad())?;
            NoiseModel::PoissonGaussian { alpha, delta }.validate()?;
            entries.insert(iso, (alpha, delta));
        }
        Ok(CalibrationTable { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TapError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn model(&self, iso: u32) -> Result<NoiseModel> {
        self.entries
            .get(&iso)
            .map(|&(alpha, delta)| NoiseModel::PoissonGaussian { alpha, delta })
            .ok_or_else(|| TapError::config(format!("ISO {iso} missing from calibration table")))
    }
}
