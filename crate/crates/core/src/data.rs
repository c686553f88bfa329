//! Video ingestion and on-disk layouts: sRGB frame directories, raw Bayer
//! frames packed to RGBG, toy textures, manifests and pseudo-pair storage.

use std::f64::consts::TAU;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageBuffer, Luma, Rgb};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};
use crate::noise::{stream_rng, CalibrationTable, NoiseModel, PseudoPair, PseudoPairSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    Srgb,
    RawRgbg,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Srgb => 3,
            ColorSpace::RawRgbg => 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub fps: Option<f64>,
    pub iso: Option<u32>,
    pub source: Option<PathBuf>,
}

/// `N x C x H x W` frames with values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    pub frames: Tensor<f32>,
    pub colorspace: ColorSpace,
    pub meta: VideoMeta,
}

impl VideoTensor {
    pub fn new(frames: Tensor<f32>, colorspace: ColorSpace) -> Result<Self> {
        if frames.n() == 0 {
            return Err(TapError::Data("video has no frames".into()));
        }
        if frames.c() != colorspace.channels() {
            return Err(TapError::Data(format!(
                "{colorspace:?} video needs {} channels, got {}",
                colorspace.channels(),
                frames.c()
            )));
        }
        Ok(VideoTensor {
            frames,
            colorspace,
            meta: VideoMeta::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.n()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.n() == 0
    }
}

fn sorted_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| TapError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| TapError::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && ext.is_some_and(|e| exts.contains(&e.as_str())) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| TapError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn stack_frames(frames: Vec<(PathBuf, Tensor<f32>)>) -> Result<Tensor<f32>> {
    let first = frames[0].1.shape();
    for (p, f) in &frames {
        if f.shape() != first {
            return Err(TapError::Data(format!(
                "frame {} has shape {:?}, expected {:?}",
                p.display(),
                &f.shape()[1..],
                &first[1..]
            )));
        }
    }
    let items: Vec<_> = frames.into_iter().map(|(_, f)| f).collect();
    Tensor::stack(&items)
}

/// Load a directory of 8-bit frames (PNG or JPEG), ordered by file name.
pub fn load_srgb_video(dir: &Path) -> Result<VideoTensor> {
    let files = sorted_files(dir, &["png", "jpg", "jpeg"])?;
    if files.is_empty() {
        return Err(TapError::Data(format!("no frames in {}", dir.display())));
    }
    let frames = files
        .into_iter()
        .map(|p| {
            let img = open_image(&p)?.into_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let t = Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
                img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
            });
            Ok((p, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut v = VideoTensor::new(stack_frames(frames)?, ColorSpace::Srgb)?;
    v.meta.source = Some(dir.to_path_buf());
    Ok(v)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write frames as `<dir>/%05d.png`, 8 bits per channel.
pub fn save_srgb_video(video: &Tensor<f32>, dir: &Path) -> Result<()> {
    if video.c() != 3 {
        return Err(TapError::Data(format!("sRGB frames need 3 channels, got {}", video.c())));
    }
    fs::create_dir_all(dir).map_err(|e| TapError::io(dir, e))?;
    let [n, _, h, w] = video.shape();
    for i in 0..n {
        let img = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            let at = |c| to_u8(video.at([i, c, y as usize, x as usize]));
            Rgb([at(0), at(1), at(2)])
        });
        let path = dir.join(format!("{i:05}.png"));
        img.save(&path).map_err(|source| TapError::Image { path, source })?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
#[derive(Default)]
pub enum CfaPattern {
    #[default]
    Rggb,
    Bggr,
    Grbg,
    Gbrg,
}


impl FromStr for CfaPattern {
    type Err = TapError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(CfaPattern::Rggb),
            "BGGR" => Ok(CfaPattern::Bggr),
            "GRBG" => Ok(CfaPattern::Grbg),
            "GBRG" => Ok(CfaPattern::Gbrg),
            _ => Err(TapError::config(format!("unknown CFA pattern {s:?}"))),
        }
    }
}

impl CfaPattern {
    /// Tile offsets `(dy, dx)` of R, G1 (red row), B, G2 (blue row).
    pub fn offsets(self) -> [(usize, usize); 4] {
        match self {
            CfaPattern::Rggb => [(0, 0), (0, 1), (1, 1), (1, 0)],
            CfaPattern::Bggr => [(1, 1), (1, 0), (0, 0), (0, 1)],
            CfaPattern::Grbg => [(0, 1), (0, 0), (1, 0), (1, 1)],
            CfaPattern::Gbrg => [(1, 0), (1, 1), (0, 1), (0, 0)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawLevels {
    pub black: f64,
    pub white: f64,
}

impl RawLevels {
    fn validate(&self) -> Result<()> {
        if !(self.white > self.black) {
            return Err(TapError::config(format!(
                "white level {} must exceed black level {}",
                self.white, self.black
            )));
        }
        Ok(())
    }
}

/// `1 x 1 x 2H x 2W` sensor values to normalized `1 x 4 x H x W` RGBG.
pub fn pack_raw_to_rgbg(bayer: &Tensor<f64>, pattern: CfaPattern, levels: RawLevels) -> Result<Tensor<f32>> {
    levels.validate()?;
    let [n, c, h2, w2] = bayer.shape();
    if c != 1 || h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(TapError::Data(format!(
            "Bayer frames must be single-channel with even dims, got {c}x{h2}x{w2}"
        )));
    }
    let offs = pattern.offsets();
    let range = levels.white - levels.black;
    Ok(Tensor::from_fn([n, 4, h2 / 2, w2 / 2], |[i, ch, y, x]| {
        let (dy, dx) = offs[ch];
        let v = (bayer.at([i, 0, 2 * y + dy, 2 * x + dx]) - levels.black) / range;
        v.clamp(0.0, 1.0) as f32
    }))
}

/// Inverse of [`pack_raw_to_rgbg`], rounding to whole sensor values.
pub fn unpack_rgbg_to_raw(packed: &Tensor<f32>, pattern: CfaPattern, levels: RawLevels) -> Result<Tensor<f64>> {
    levels.validate()?;
    let [n, c, h, w] = packed.shape();
    if c != 4 {
        return Err(TapError::Data(format!("packed raw needs 4 channels, got {c}")));
    }
    let offs = pattern.offsets();
    let mut out = Tensor::zeros([n, 1, 2 * h, 2 * w]);
    let range = levels.white - levels.black;
    for i in 0..n {
        for (ch, &(dy, dx)) in offs.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let v = packed.at([i, ch, y, x]) as f64 * range + levels.black;
                    out.set([i, 0, 2 * y + dy, 2 * x + dx], v.round());
                }
            }
        }
    }
    Ok(out)
}

/// Sidecar `meta.json` of a raw frame directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    pub black_level: f64,
    pub white_level: f64,
    #[serde(default)]
    pub cfa: CfaPattern,
    #[serde(default)]
    pub iso: Option<u32>,
}

impl RawSidecar {
    pub fn levels(&self) -> RawLevels {
        RawLevels {
            black: self.black_level,
            white: self.white_level,
        }
    }
}

/// Load 16-bit single-channel Bayer frames (PNG or TIFF) plus `meta.json`,
/// packed to RGBG. `cfa` overrides the sidecar pattern.
pub fn load_raw_video(dir: &Path, cfa: Option<CfaPattern>) -> Result<VideoTensor> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| TapError::io(&meta_path, e))?;
    let side: RawSidecar = serde_json::from_str(&text)
        .map_err(|e| TapError::Data(format!("{}: {e}", meta_path.display())))?;
    let files = sorted_files(dir, &["png", "tif", "tiff"])?;
    if files.is_empty() {
        return Err(TapError::Data(format!("no frames in {}", dir.display())));
    }
    let pattern = cfa.unwrap_or(side.cfa);
    let frames = files
        .into_iter()
        .map(|p| {
            let img = open_image(&p)?.into_luma16();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let bayer = Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| img.get_pixel(x as u32, y as u32)[0] as f64);
            let packed = pack_raw_to_rgbg(&bayer, pattern, side.levels())
                .map_err(|e| TapError::Data(format!("{}: {e}", p.display())))?;
            Ok((p, packed))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut v = VideoTensor::new(stack_frames(frames)?, ColorSpace::RawRgbg)?;
    v.meta.iso = side.iso;
    v.meta.source = Some(dir.to_path_buf());
    Ok(v)
}

/// Unpack and write 16-bit PNG Bayer frames with a `meta.json` sidecar.
pub fn save_raw_video(video: &Tensor<f32>, dir: &Path, side: &RawSidecar) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TapError::io(dir, e))?;
    let raw = unpack_rgbg_to_raw(video, side.cfa, side.levels())?;
    let [n, _, h, w] = raw.shape();
    for i in 0..n {
        let img = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
            Luma([raw.at([i, 0, y as usize, x as usize]).clamp(0.0, 65535.0) as u16])
        });
        let path = dir.join(format!("{i:05}.png"));
        img.save(&path).map_err(|source| TapError::Image { path, source })?;
    }
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(side).expect("sidecar serializes");
    fs::write(&meta_path, json).map_err(|e| TapError::io(&meta_path, e))
}

/// `clean + sample(model)`, unclamped.
pub fn synthesize_noisy<R: Rng>(clean: &VideoTensor, model: &NoiseModel, rng: &mut R) -> Result<VideoTensor> {
    model.validate()?;
    Ok(VideoTensor {
        frames: model.corrupt(&clean.frames, rng),
        colorspace: clean.colorspace,
        meta: clean.meta.clone(),
    })
}

/// Raw synthesis with the calibration entry for the video's ISO.
pub fn synthesize_raw_noisy<R: Rng>(clean: &VideoTensor, table: &CalibrationTable, rng: &mut R) -> Result<VideoTensor> {
    let iso = clean
        .meta
        .iso
        .ok_or_else(|| TapError::Data("raw video has no ISO for calibration lookup".into()))?;
    synthesize_noisy(clean, &table.model(iso)?, rng)
}

/// A smooth periodic color texture with a few soft edges, defined on the
/// continuous plane so it can be sampled at sub-pixel shifts.
#[derive(Clone, Debug)]
pub struct Texture {
    period: f64,
    waves: Vec<[f64; 6]>,
    edges: Vec<[f64; 6]>,
}

impl Texture {
    pub fn random<R: Rng>(period: usize, rng: &mut R) -> Self {
        let mut wave = |amp: f64| {
            let fx = rng.random_range(-5i32..=5) as f64;
            let fy = rng.random_range(1i32..=5) as f64 * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            [
                fx,
                fy,
                rng.random_range(0.0..TAU),
                amp * rng.random_range(0.3..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        };
        let waves = (0..5).map(|_| wave(0.12)).collect();
        let edges = (0..3).map(|_| wave(0.15)).collect();
        Texture {
            period: period as f64,
            waves,
            edges,
        }
    }

    pub fn sample(&self, c: usize, y: f64, x: f64) -> f64 {
        let mut v = 0.5;
        let arg = |p: &[f64; 6]| TAU * (p[0] * x + p[1] * y) / self.period + p[2];
        let tint = |p: &[f64; 6]| 1.0 + 0.4 * [0.0, p[4], p[5]][c];
        for p in &self.waves {
            v += p[3] * tint(p) * arg(p).sin();
        }
        for p in &self.edges {
            // Steep sigmoid of a sinusoid: soft-edged stripes.
            let s = (6.0 * arg(p).sin()).tanh();
            v += p[3] * tint(p) * s;
        }
        v.clamp(0.0, 1.0)
    }

    /// `1 x 3 x size x size` frame of the texture displaced by `(dy, dx)`.
    pub fn render(&self, size: usize, dy: f64, dx: f64) -> Tensor<f32> {
        Tensor::from_fn([1, 3, size, size], |[_, c, y, x]| {
            self.sample(c, y as f64 - dy, x as f64 - dx) as f32
        })
    }
}

/// Roll every frame right by `k` pixels (wrapping).
pub fn roll_x(frame: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let w = frame.w();
    Tensor::from_fn(frame.shape(), |[n, c, y, x]| frame.at([n, c, y, (x + w - k % w) % w]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToyKind {
    /// One texture repeated over 12 frames.
    Static12,
    /// Texture moving right by `shift` pixels per frame.
    Translating { frames: usize, shift: f64 },
}

/// Clean and AWGN-corrupted toy clip of `size x size` frames.
pub fn make_toy_dataset(kind: ToyKind, size: usize, sigma: f64, seed: u64) -> Result<(VideoTensor, VideoTensor)> {
    let mut rng = stream_rng(seed, &[0x70]);
    let tex = Texture::random(size, &mut rng);
    let frames: Vec<Tensor<f32>> = match kind {
        ToyKind::Static12 => vec![tex.render(size, 0.0, 0.0); 12],
        ToyKind::Translating { frames, shift } => {
            if frames == 0 {
                return Err(TapError::config("toy clip needs at least one frame"));
            }
            if shift.fract() == 0.0 && shift >= 0.0 {
                let base = tex.render(size, 0.0, 0.0);
                (0..frames).map(|k| roll_x(&base, k * shift as usize)).collect()
            } else {
                (0..frames).map(|k| tex.render(size, 0.0, k as f64 * shift)).collect()
            }
        }
    };
    let clean = VideoTensor::new(Tensor::stack(&frames)?, ColorSpace::Srgb)?;
    let noisy = synthesize_noisy(&clean, &NoiseModel::Awgn { sigma }, &mut rng)?;
    Ok((clean, noisy))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = TapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(TapError::Data(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub video_id: String,
    pub frames: Vec<PathBuf>,
    pub noise: String,
}

/// Text index of a dataset:
///
/// ```text
/// tap-manifest 1
/// split test
/// video <id> <noise descriptor>
/// frame <path>
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_HEADER: &str = "tap-manifest 1";

impl DatasetManifest {
    /// Index `<root>/<video_id>/<frame>` with frames in file-name order.
    pub fn scan(root: &Path, split: Split, noise: &str, exts: &[&str]) -> Result<Self> {
        let rd = fs::read_dir(root).map_err(|e| TapError::io(root, e))?;
        let mut dirs: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut entries = Vec::new();
        for d in dirs {
            let frames = sorted_files(&d, exts)?;
            if frames.is_empty() {
                continue;
            }
            let video_id = d.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            entries.push(ManifestEntry {
                video_id,
                frames,
                noise: noise.to_string(),
            });
        }
        if entries.is_empty() {
            return Err(TapError::Data(format!("no videos under {}", root.display())));
        }
        Ok(DatasetManifest { split, entries })
    }

    pub fn to_text(&self) -> String {
        let split = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let mut s = format!("{MANIFEST_HEADER}\nsplit {split}\n");
        for e in &self.entries {
            s.push_str(&format!("video {} {}\n", e.video_id, e.noise));
            for f in &e.frames {
                s.push_str(&format!("frame {}\n", f.display()));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
            return Err(TapError::Data("manifest header missing".into()));
        }
        let split = lines
            .next()
            .and_then(|l| l.strip_prefix("split "))
            .ok_or_else(|| TapError::Data("manifest split line missing".into()))?
            .trim()
            .parse()?;
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix("video ") {
                let (id, noise) = rest.split_once(' ').unwrap_or((rest, ""));
                entries.push(ManifestEntry {
                    video_id: id.to_string(),
                    frames: Vec::new(),
                    noise: noise.trim().to_string(),
                });
            } else if let Some(path) = line.strip_prefix("frame ") {
                entries
                    .last_mut()
                    .ok_or_else(|| TapError::Data("frame listed before any video".into()))?
                    .frames
                    .push(PathBuf::from(path));
            } else {
                return Err(TapError::Data(format!("unrecognized manifest line {line:?}")));
            }
        }
        Ok(DatasetManifest { split, entries })
    }

    /// Frames exist and are in file-name order within each video.
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.frames.is_empty() {
                return Err(TapError::Data(format!("video {} lists no frames", e.video_id)));
            }
            for f in &e.frames {
                if !f.is_file() {
                    return Err(TapError::Data(format!("missing frame {}", f.display())));
                }
            }
            if e.frames.windows(2).any(|p| p[0] >= p[1]) {
                return Err(TapError::Data(format!("frames of {} are not ordered", e.video_id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| TapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| TapError::io(path, e))?)
    }
}

/// Directory layouts of the supported corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetLayout {
    /// `<root>/<video>/<frame>.{png,jpg}` 8-bit sRGB (DAVIS, Set8, toy sets).
    Srgb,
    /// `<root>/<video>/<frame>.{png,tiff}` 16-bit Bayer with `meta.json`
    /// (CRVD-style). The CFA order and bit depth are required since they are
    /// sensor documentation, not something to guess.
    Raw { cfa: CfaPattern, bit_depth: u32 },
}

impl DatasetLayout {
    pub fn load_video(&self, dir: &Path) -> Result<VideoTensor> {
        match self {
            DatasetLayout::Srgb => load_srgb_video(dir),
            DatasetLayout::Raw { cfa, bit_depth } => {
                let v = load_raw_video(dir, Some(*cfa))?;
                let side: RawSidecar = serde_json::from_str(
                    &fs::read_to_string(dir.join("meta.json")).map_err(|e| TapError::io(dir.join("meta.json"), e))?,
                )
                .map_err(|e| TapError::Data(e.to_string()))?;
                if side.white_level > ((1u64 << bit_depth) - 1) as f64 {
                    return Err(TapError::Data(format!(
                        "white level {} exceeds the configured {bit_depth}-bit range",
                        side.white_level
                    )));
                }
                Ok(v)
            }
        }
    }

    /// Every video under `root`, in directory-name order.
    pub fn load_all(&self, root: &Path) -> Result<Vec<(String, VideoTensor)>> {
        let exts: &[&str] = match self {
            DatasetLayout::Srgb => &["png", "jpg", "jpeg"],
            DatasetLayout::Raw { .. } => &["png", "tif", "tiff"],
        };
        let manifest = DatasetManifest::scan(root, Split::Test, "", exts)?;
        manifest
            .entries
            .iter()
            .map(|e| Ok((e.video_id.clone(), self.load_video(&root.join(&e.video_id))?)))
            .collect()
    }
}

pub fn write_npy(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| TapError::io(path, e))?;
    let shape: Vec<u64> = t.shape()[1..].iter().map(|&d| d as u64).collect();
    let mut buf = BufWriter::new(file);
    let io = |e| TapError::io(path, e);
    {
        use npyz::WriterBuilder;
        let mut w = npyz::WriteOptions::new()
            .default_dtype()
            .shape(&shape)
            .writer(&mut buf)
            .begin_nd()
            .map_err(io)?;
        w.extend(t.data().iter().copied()).map_err(io)?;
        w.finish().map_err(io)?;
    }
    buf.flush().map_err(io)
}

/// Read a `C x H x W` float32 array as a `1 x C x H x W` tensor.
pub fn read_npy(path: &Path) -> Result<Tensor<f32>> {
    let file = fs::File::open(path).map_err(|e| TapError::io(path, e))?;
    let npy = npyz::NpyFile::new(BufReader::new(file)).map_err(|e| TapError::io(path, e))?;
    let shape = npy.shape().to_vec();
    if shape.len() != 3 || npy.order() != npyz::Order::C {
        return Err(TapError::Data(format!("{}: expected a C-order CxHxW array", path.display())));
    }
    let data: Vec<f32> = npy.into_vec().map_err(|e| TapError::io(path, e))?;
    Tensor::from_vec([1, shape[0] as usize, shape[1] as usize, shape[2] as usize], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairProvenance {
    pub source_step: usize,
    pub model: NoiseModel,
    pub seed: u64,
    pub clean_clamped: bool,
    pub noisy_clamped: bool,
    pub videos: Vec<PairVideo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairVideo {
    pub id: String,
    pub frames: usize,
}

pub const PROVENANCE_FILE: &str = "provenance.json";

/// `<dir>/<video>/{clean,noisy}/%05d.npy` plus `provenance.json`.
pub fn save_pseudo_pairs(set: &PseudoPairSet<f32>, dir: &Path) -> Result<()> {
    for p in &set.pairs {
        for (kind, t) in [("clean", &p.clean), ("noisy", &p.noisy)] {
            let d = dir.join(&p.id).join(kind);
            fs::create_dir_all(&d).map_err(|e| TapError::io(&d, e))?;
            for i in 0..t.n() {
                write_npy(&d.join(format!("{i:05}.npy")), &t.select(i))?;
            }
        }
    }
    let prov = PairProvenance {
        source_step: set.source_step,
        model: set.model,
        seed: set.seed,
        clean_clamped: true,
        noisy_clamped: false,
        videos: set
            .pairs
            .iter()
            .map(|p| PairVideo {
                id: p.id.clone(),
                frames: p.clean.n(),
            })
            .collect(),
    };
    let path = dir.join(PROVENANCE_FILE);
    let json = serde_json::to_string_pretty(&prov).expect("provenance serializes");
    fs::write(&path, json).map_err(|e| TapError::io(&path, e))
}

pub fn load_provenance(dir: &Path) -> Result<PairProvenance> {
    let path = dir.join(PROVENANCE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| TapError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| TapError::Data(format!("{}: {e}", path.display())))
}

pub fn load_pseudo_pairs(dir: &Path) -> Result<PseudoPairSet<f32>> {
    let prov = load_provenance(dir)?;
    let pairs = prov
        .videos
        .iter()
        .map(|v| {
            let load = |kind: &str| -> Result<Tensor<f32>> {
                let frames = (0..v.frames)
                    .map(|i| read_npy(&dir.join(&v.id).join(kind).join(format!("{i:05}.npy"))))
                    .collect::<Result<Vec<_>>>()?;
                Tensor::stack(&frames)
            };
            Ok(PseudoPair {
                id: v.id.clone(),
                clean: load("clean")?,
                noisy: load("noisy")?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PseudoPairSet {
        pairs,
        source_step: prov.source_step,
        model: prov.model,
        seed: prov.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_roundtrip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let v = Tensor::<f32>::from_fn([3, 3, 64, 64], |[n, c, y, x]| ((n * 7 + c * 3 + y * 5 + x) % 256) as f32 / 255.0);
        save_srgb_video(&v, dir.path()).unwrap();
        let back = load_srgb_video(dir.path()).unwrap();
        assert_eq!(back.frames.shape(), [3, 3, 64, 64]);
        assert_eq!(back.frames, v);
        assert!(back.frames.data().contains(&1.0));
    }

    #[test]
    fn srgb_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_srgb_video(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no frames"));
        save_srgb_video(&Tensor::zeros([2, 3, 8, 8]), dir.path()).unwrap();
        let odd = tempfile::tempdir().unwrap();
        save_srgb_video(&Tensor::zeros([1, 3, 4, 8]), odd.path()).unwrap();
        fs::rename(odd.path().join("00000.png"), dir.path().join("00002.png")).unwrap();
        let err = load_srgb_video(dir.path()).unwrap_err();
        assert!(err.to_string().contains("00002.png"), "{err}");
    }

    #[test]
    fn rggb_worked_example() {
        let bayer = Tensor::from_vec([1, 1, 2, 2], vec![4095.0, 2048.0, 2048.0, 0.0]).unwrap();
        let levels = RawLevels { black: 0.0, white: 4095.0 };
        let p = pack_raw_to_rgbg(&bayer, CfaPattern::Rggb, levels).unwrap();
        assert_eq!(p.shape(), [1, 4, 1, 1]);
        assert_eq!(p.data()[0], 1.0);
        assert!((p.data()[1] - 2048.0 / 4095.0).abs() < 1e-7);
        assert_eq!(p.data()[2], 0.0);
        assert!((p.data()[3] - 2048.0 / 4095.0).abs() < 1e-7);
    }

    #[test]
    fn pattern_parsing_and_odd_dims() {
        assert_eq!("bggr".parse::<CfaPattern>().unwrap(), CfaPattern::Bggr);
        assert!("RGBW".parse::<CfaPattern>().is_err());
        let levels = RawLevels { black: 0.0, white: 1.0 };
        assert!(pack_raw_to_rgbg(&Tensor::zeros([1, 1, 3, 4]), CfaPattern::Rggb, levels).is_err());
        assert!(pack_raw_to_rgbg(&Tensor::zeros([1, 1, 4, 4]), CfaPattern::Rggb, RawLevels { black: 1.0, white: 1.0 }).is_err());
    }

    #[test]
    fn raw_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let side = RawSidecar {
            black_level: 64.0,
            white_level: 1023.0,
            cfa: CfaPattern::Gbrg,
            iso: Some(3200),
        };
        let raw = Tensor::<f64>::from_fn([2, 1, 8, 6], |[n, _, y, x]| 64.0 + ((n * 131 + y * 37 + x * 11) % 960) as f64);
        let packed = pack_raw_to_rgbg(&raw, side.cfa, side.levels()).unwrap();
        save_raw_video(&packed, dir.path(), &side).unwrap();
        let v = load_raw_video(dir.path(), None).unwrap();
        assert_eq!(v.colorspace, ColorSpace::RawRgbg);
        assert_eq!(v.meta.iso, Some(3200));
        assert_eq!(v.frames, packed);
        let layout = DatasetLayout::Raw { cfa: CfaPattern::Gbrg, bit_depth: 8 };
        assert!(layout.load_video(dir.path()).is_err());
    }

    #[test]
    fn raw_synthesis_uses_calibration() {
        let table = CalibrationTable::parse("800 0.0 0.25\n").unwrap();
        let mut clean = VideoTensor::new(Tensor::full([1, 4, 100, 100], 0.5), ColorSpace::RawRgbg).unwrap();
        assert!(synthesize_raw_noisy(&clean, &table, &mut stream_rng(0, &[])).is_err());
        clean.meta.iso = Some(800);
        let noisy = synthesize_raw_noisy(&clean, &table, &mut stream_rng(0, &[])).unwrap();
        let var = noisy.frames.data().iter().map(|&v| (v as f64 - 0.5).powi(2)).sum::<f64>() / 40000.0;
        assert!((var.sqrt() / 0.25 - 1.0).abs() < 0.03);
    }

    #[test]
    fn synthesis_without_noise_is_identity() {
        let (clean, _) = make_toy_dataset(ToyKind::Static12, 16, 0.0, 1).unwrap();
        let same = synthesize_noisy(&clean, &NoiseModel::Awgn { sigma: 0.0 }, &mut stream_rng(0, &[])).unwrap();
        assert_eq!(same, clean);
    }

    #[test]
    fn static_toy_clip() {
        let (clean, noisy) = make_toy_dataset(ToyKind::Static12, 24, 30.0 / 255.0, 3).unwrap();
        assert_eq!(clean.len(), 12);
        for i in 1..12 {
            assert_eq!(clean.frames.item(i), clean.frames.item(0));
        }
        for i in 0..12 {
            for j in i + 1..12 {
                assert_ne!(noisy.frames.item(i), noisy.frames.item(j));
            }
        }
    }

    #[test]
    fn translating_toy_clip_rolls() {
        let (clean, _) = make_toy_dataset(ToyKind::Translating { frames: 6, shift: 1.0 }, 24, 0.1, 4).unwrap();
        let f0 = clean.frames.select(0);
        for k in 0..6 {
            assert_eq!(clean.frames.select(k), roll_x(&f0, k));
        }
        let (sub, _) = make_toy_dataset(ToyKind::Translating { frames: 3, shift: 0.5 }, 24, 0.1, 4).unwrap();
        assert_eq!(sub.len(), 3);
        assert_ne!(sub.frames.item(0), sub.frames.item(1));
    }

    #[test]
    fn toy_texture_is_in_range_and_periodic() {
        let tex = Texture::random(32, &mut stream_rng(9, &[]));
        for c in 0..3 {
            for (y, x) in [(0.0, 0.0), (3.5, 7.25), (31.0, 2.0)] {
                let v = tex.sample(c, y, x);
                assert!((0.0..=1.0).contains(&v));
                assert!((v - tex.sample(c, y + 32.0, x - 32.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let root = tempfile::tempdir().unwrap();
        for id in ["b", "a"] {
            save_srgb_video(&Tensor::zeros([3, 3, 8, 8]), &root.path().join(id)).unwrap();
        }
        let m = DatasetManifest::scan(root.path(), Split::Test, "awgn:0.1176", &["png"]).unwrap();
        assert_eq!(m.entries.iter().map(|e| e.video_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        m.validate().unwrap();
        let back = DatasetManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        let mut bad = m.clone();
        bad.entries[0].frames.swap(0, 1);
        assert!(bad.validate().is_err());
        bad.entries[0].frames[0] = root.path().join("nope.png");
        assert!(bad.validate().is_err());
        assert!(DatasetManifest::parse("split test\n").is_err());
    }

    #[test]
    fn pseudo_pairs_persist_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = stream_rng(2, &[]);
        let clean = Tensor::<f32>::from_fn([2, 3, 5, 7], |_| rng.random_range(0.0..1.0));
        let set = PseudoPairSet {
            pairs: vec![PseudoPair {
                id: "v0".into(),
                noisy: NoiseModel::Awgn { sigma: 0.2 }.corrupt(&clean, &mut rng),
                clean,
            }],
            source_step: 2,
            model: NoiseModel::Awgn { sigma: 0.2 },
            seed: 11,
        };
        save_pseudo_pairs(&set, dir.path()).unwrap();
        let back = load_pseudo_pairs(dir.path()).unwrap();
        assert_eq!(back.source_step, 2);
        assert_eq!(back.model, set.model);
        assert_eq!(back.pairs[0].clean, set.pairs[0].clean);
        assert_eq!(back.pairs[0].noisy, set.pairs[0].noisy);
        assert!(dir.path().join("v0/noisy/00001.npy").is_file());
    }
}
