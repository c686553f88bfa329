//! PSNR, SSIM, temporal coherence and CSV reports.

use std::path::Path;

use serde::Serialize;

use crate::error::{Result, TapError};
use crate::tensor::{Real, Tensor};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TapError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)`, capped at 100 dB.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| win[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, win: &[f64]) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let ua = filter_valid(a, h, w, win);
    let ub = filter_valid(b, h, w, win);
    let uaa = filter_valid(&aa, h, w, win);
    let ubb = filter_valid(&bb, h, w, win);
    let uab = filter_valid(&ab, h, w, win);
    let n = ua.len();
    let mut total = 0.0;
    for i in 0..n {
        let va = uaa[i] - ua[i] * ua[i];
        let vb = ubb[i] - ub[i] * ub[i];
        let cov = uab[i] - ua[i] * ub[i];
        let num = (2.0 * ua[i] * ub[i] + c1) * (2.0 * cov + c2);
        let den = (ua[i] * ua[i] + ub[i] * ub[i] + c1) * (va + vb + c2);
        total += num / den;
    }
    total / n as f64
}

/// Windowed SSIM (Gaussian window 11, sigma 1.5, peak 1) of `N x C x H x W`
/// images: per-channel SSIM averaged over channels, then over frames.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let [n, c, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(TapError::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    for i in 0..n {
        for ch in 0..c {
            let pa: Vec<f64> = a.plane(i, ch).iter().map(|v| v.as_f64()).collect();
            let pb: Vec<f64> = b.plane(i, ch).iter().map(|v| v.as_f64()).collect();
            total += ssim_plane(&pa, &pb, h, w, &win);
        }
    }
    Ok(total / (n * c) as f64)
}

/// Mean over `t` of the mean absolute difference between frames `t` and `t+1`.
pub fn temporal_coherence<T: Real>(video: &Tensor<T>) -> Result<f64> {
    let n = video.n();
    if n < 2 {
        return Err(TapError::Data(format!(
            "temporal coherence needs at least 2 frames, got {n}"
        )));
    }
    let per: f64 = (0..n - 1)
        .map(|t| {
            let (a, b) = (video.item(t), video.item(t + 1));
            a.iter().zip(b).map(|(&x, &y)| (y.as_f64() - x.as_f64()).abs()).sum::<f64>() / a.len() as f64
        })
        .sum();
    Ok(per / (n - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoReport {
    pub video: String,
    pub frames: Vec<FrameMetrics>,
    pub temporal_coherence: Option<f64>,
}

impl VideoReport {
    pub fn mean_psnr(&self) -> f64 {
        self.frames.iter().map(|f| f.psnr).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.frames.iter().map(|f| f.ssim).sum::<f64>() / self.frames.len().max(1) as f64
    }
}

/// Per-frame PSNR/SSIM of a restored video against ground truth. SSIM is
/// skipped (NaN) for frames smaller than the SSIM window.
pub fn evaluate_video<T: Real>(video: &str, restored: &Tensor<T>, truth: &Tensor<T>) -> Result<VideoReport> {
    same_shape(restored, truth)?;
    let small = restored.h() < SSIM_WINDOW || restored.w() < SSIM_WINDOW;
    let frames = (0..restored.n())
        .map(|i| {
            let (a, b) = (restored.select(i), truth.select(i));
            Ok(FrameMetrics {
                frame: i,
                psnr: psnr(&a, &b, 1.0)?,
                ssim: if small { f64::NAN } else { ssim(&a, &b)? },
            })
        })
        .collect::<Result<_>>()?;
    let temporal_coherence = (restored.n() >= 2).then(|| temporal_coherence(restored)).transpose()?;
    Ok(VideoReport {
        video: video.to_string(),
        frames,
        temporal_coherence,
    })
}

/// Mean PSNR over every frame of every report.
pub fn mean_psnr(reports: &[VideoReport]) -> f64 {
    let all: Vec<f64> = reports.iter().flat_map(|r| r.frames.iter().map(|f| f.psnr)).collect();
    all.iter().sum::<f64>() / all.len().max(1) as f64
}

fn csv_err(path: &Path, e: csv::Error) -> TapError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => TapError::io(path, io),
        other => TapError::Data(format!("{}: {other:?}", path.display())),
    }
}

/// `video,frame,psnr,ssim` rows followed by a `mean` summary row.
pub fn emit_report(reports: &[VideoReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(TapError::Data("no reports to emit".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut write = |rec: [String; 4]| w.write_record(&rec).map_err(|e| csv_err(path, e));
    write(["video".into(), "frame".into(), "psnr".into(), "ssim".into()])?;
    let (mut sp, mut ss, mut count) = (0.0, 0.0, 0usize);
    for r in reports {
        for f in &r.frames {
            write([r.video.clone(), f.frame.to_string(), format!("{:.6}", f.psnr), format!("{:.6}", f.ssim)])?;
            sp += f.psnr;
            ss += f.ssim;
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    write(["mean".into(), String::new(), format!("{:.6}", sp / n), format!("{:.6}", ss / n)])?;
    w.flush().map_err(|e| TapError::io(path, e))
}

/// `step,mean_psnr` rows for a sequence of fine-tuning states.
pub fn emit_curve(points: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["step", "mean_psnr"]).map_err(|e| csv_err(path, e))?;
    for (step, p) in points {
        w.write_record([step.to_string(), format!("{p:.6}")])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| TapError::io(path, e))
}
