//! Versioned safetensors checkpoints with a JSON metadata block.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::alignment::TemporalConfig;
use crate::backbone::{Backbone, DenoiserConfig};
use crate::error::{Result, TapError};
use crate::noise::NoiseModel;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::video::{VideoDenoiser, VideoState};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "tap";
const ADAM_M: &str = "__adam.m.";
const ADAM_V: &str = "__adam.v.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Image,
    Video,
}

/// Position inside an interrupted fine-tuning or pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    /// Step being trained (1-based; 0 for image pretraining).
    pub step: usize,
    /// Completed iterations of that step.
    pub iteration: usize,
    pub adam_t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: DenoiserConfig,
    pub temporal: Option<TemporalConfig>,
    pub step_index: usize,
    pub frozen_flags: BTreeMap<String, bool>,
    pub noise_model: Option<NoiseModel>,
    pub dtype: String,
    #[serde(default)]
    pub progress: Option<Progress>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: ParamStore<T>,
    pub optimizer: Option<Adam>,
}

impl<T: Real> Checkpoint<T> {
    pub fn image(cfg: &DenoiserConfig, params: ParamStore<T>, noise_model: Option<NoiseModel>) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                kind: CheckpointKind::Image,
                config: cfg.clone(),
                temporal: None,
                step_index: 0,
                frozen_flags: params.frozen_flags(),
                noise_model,
                dtype: T::DTYPE.to_string(),
                progress: None,
            },
            params,
            optimizer: None,
        }
    }

    pub fn video(net: &VideoDenoiser, state: VideoState<T>, noise_model: Option<NoiseModel>) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                kind: CheckpointKind::Video,
                config: net.config().clone(),
                temporal: Some(net.temporal_config().clone()),
                step_index: state.step_index,
                frozen_flags: state.params.frozen_flags(),
                noise_model,
                dtype: T::DTYPE.to_string(),
                progress: None,
            },
            params: state.params,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        meta.frozen_flags = self.params.frozen_flags();
        meta.dtype = T::DTYPE.to_string();
        let mut buffers: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), dtype::<T>(), p.value.shape().to_vec(), T::to_le_bytes_vec(p.value.data())))
            .collect();
        if let Some(adam) = &self.optimizer {
            for (name, m, v) in adam.export() {
                for (prefix, data) in [(ADAM_M, m), (ADAM_V, v)] {
                    buffers.push((format!("{prefix}{name}"), Dtype::F64, vec![data.len()], f64::to_le_bytes_vec(&data)));
                }
            }
        }
        let views = buffers
            .iter()
            .map(|(name, dt, shape, bytes)| {
                TensorView::new(*dt, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| TapError::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let json = serde_json::to_string(&meta).map_err(|e| TapError::Checkpoint(e.to_string()))?;
        let info = Some(HashMap::from([(META_KEY.to_string(), json)]));
        safetensors::serialize(views, &info).map_err(|e| TapError::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| TapError::Checkpoint(e.to_string()))?;
        let json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| TapError::Checkpoint("metadata block missing".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| TapError::Checkpoint(e.to_string()))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(TapError::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                meta.format_version
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| TapError::Checkpoint(e.to_string()))?;
        let mut params = ParamStore::new();
        let mut moments: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (name, view) in st.tensors() {
            if let Some(p) = name.strip_prefix(ADAM_M) {
                moments.entry(p.to_string()).or_default().0 = f64::from_le_bytes_slice(view.data());
            } else if let Some(p) = name.strip_prefix(ADAM_V) {
                moments.entry(p.to_string()).or_default().1 = f64::from_le_bytes_slice(view.data());
            } else {
                let shape: [usize; 4] = view
                    .shape()
                    .try_into()
                    .map_err(|_| TapError::Checkpoint(format!("tensor {name} is not 4-d")))?;
                let data: Vec<T> = match view.dtype() {
                    Dtype::F32 => f32::from_le_bytes_slice(view.data()).into_iter().map(|v| T::lit(v as f64)).collect(),
                    Dtype::F64 => f64::from_le_bytes_slice(view.data()).into_iter().map(T::lit).collect(),
                    other => return Err(TapError::Checkpoint(format!("tensor {name} has dtype {other:?}"))),
                };
                params.insert(name, Tensor::from_vec(shape, data)?);
            }
        }
        for (name, &frozen) in &meta.frozen_flags {
            params.set_frozen(name, frozen)?;
        }
        let optimizer = meta
            .progress
            .as_ref()
            .map(|p| Adam::import(p.adam_t, moments));
        Ok(Checkpoint { meta, params, optimizer })
    }

    /// Write atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| TapError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| TapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TapError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            TapError::Checkpoint(msg) => TapError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Image-denoiser weights, checked against `cfg` when given.
    pub fn into_image_params(self, cfg: Option<&DenoiserConfig>) -> Result<(DenoiserConfig, ParamStore<T>)> {
        if let Some(cfg) = cfg {
            let fields = cfg.diff(&self.meta.config);
            if !fields.is_empty() {
                return Err(TapError::Incompatible { fields });
            }
        }
        let backbone = Backbone::new(self.meta.config.clone())?;
        // Video checkpoints also carry module tensors; keep the backbone only.
        let reference: ParamStore<T> = backbone.init_params(&mut crate::noise::stream_rng(0, &[]));
        let mut params = ParamStore::new();
        for name in reference.names() {
            params.insert(name.clone(), self.params.get(name)?.clone());
            params.set_frozen(name, self.params.param(name).is_some_and(|p| p.frozen))?;
        }
        backbone.check_params(&params)?;
        Ok((self.meta.config, params))
    }

    /// Video denoiser state for `net`. An image checkpoint gets fresh temporal
    /// modules (gates at zero) drawn from `rng` around its backbone weights.
    pub fn into_video_state<R: Rng>(self, net: &VideoDenoiser, rng: &mut R) -> Result<VideoState<T>> {
        let mut fields = net.config().diff(&self.meta.config);
        if self.meta.kind == CheckpointKind::Video {
            if let Some(tc) = &self.meta.temporal {
                fields.extend(temporal_diff(net.temporal_config(), tc));
            }
        }
        if !fields.is_empty() {
            return Err(TapError::Incompatible { fields });
        }
        match self.meta.kind {
            CheckpointKind::Image => {
                let (_, backbone) = self.into_image_params(None)?;
                net.init_temporal(&backbone, rng)
            }
            CheckpointKind::Video => {
                let reference: VideoState<T> = net.init_params(&mut crate::noise::stream_rng(0, &[]));
                for (name, p) in reference.params.iter() {
                    let got = self.params.get(name)?;
                    if got.shape() != p.value.shape() {
                        return Err(TapError::Checkpoint(format!(
                            "parameter {name} has shape {:?}, expected {:?}",
                            got.shape(),
                            p.value.shape()
                        )));
                    }
                }
                Ok(VideoState {
                    params: self.params,
                    step_index: self.meta.step_index,
                })
            }
        }
    }
}

fn dtype<T: Real>() -> Dtype {
    if T::DTYPE == "F32" {
        Dtype::F32
    } else {
        Dtype::F64
    }
}

fn temporal_diff(a: &TemporalConfig, b: &TemporalConfig) -> Vec<String> {
    let mut out = Vec::new();
    if a.frames != b.frames {
        out.push("frames".to_string());
    }
    if a.kernel != b.kernel {
        out.push("kernel".to_string());
    }
    if a.groups != b.groups {
        out.push("groups".to_string());
    }
    if a.offset_clip != b.offset_clip {
        out.push("offset_clip".to_string());
    }
    out
}
