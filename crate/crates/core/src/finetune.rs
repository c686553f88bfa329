//! Progressive fine-tuning of the temporal modules on pseudo pairs, plus the
//! ablation modes that unfreeze more or train modules jointly.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, Progress};
use crate::error::{Result, TapError};
use crate::noise::{make_pseudo_pairs, stream_rng, NoiseModel, PseudoPairSet};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{reflect_index, Tensor};
use crate::video::{window_indices, VideoDenoiser, VideoState};

const STREAM_BATCH: u64 = 0xba7c;
const STREAM_RESAMPLE: u64 = 0x5e5a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Train one module per step, level 3, then 2, then 1.
    Progressive,
    /// Same steps, but the backbone and every module trained so far are
    /// unfrozen as well.
    AllParams,
    /// Three rounds that each train all three modules together.
    JointModules,
    /// The progressive sequence run twice.
    RepeatTwice,
}

/// Optimization settings shared by every step of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepParams {
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch: usize,
    pub patch: usize,
    /// Redraw the pseudo-noisy videos every this many iterations (0 keeps one
    /// realization per step).
    #[serde(default)]
    pub resample_every: usize,
}

impl Default for StepParams {
    fn default() -> Self {
        StepParams::desk()
    }
}

impl StepParams {
    /// Full-scale settings: 200k iterations, 160 px crops, batch 4.
    pub fn full() -> Self {
        StepParams {
            iterations: 200_000,
            lr_start: 1e-3,
            lr_end: 1e-5,
            batch: 4,
            patch: 160,
            resample_every: 0,
        }
    }

    /// Desk settings: 2000 iterations on 32 px crops, with the pseudo-noisy
    /// videos redrawn every 50 iterations.
    pub fn desk() -> Self {
        StepParams {
            iterations: 2000,
            patch: 32,
            resample_every: 50,
            ..StepParams::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(TapError::config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch == 0 {
            return Err(TapError::config("batch must be positive"));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(crate::backbone::DIVISOR) {
            return Err(TapError::config(format!(
                "patch must be a positive multiple of {}, got {}",
                crate::backbone::DIVISOR,
                self.patch
            )));
        }
        Ok(())
    }
}

/// One fine-tuning step: which modules it targets and what is trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    /// 1-based position in the run.
    pub index: usize,
    /// Module levels whose parameters are trained.
    pub levels: Vec<usize>,
    /// Also train the backbone (all_params mode).
    pub backbone: bool,
    pub params: StepParams,
}

impl StepPlan {
    pub fn is_trainable(&self, name: &str) -> bool {
        match module_level(name) {
            Some(l) => self.levels.contains(&l),
            None => self.backbone,
        }
    }
}

/// Level of a temporal-module parameter name (`tm{l}.`), `None` for backbone tensors.
pub fn module_level(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("tm")?;
    let (l, _) = rest.split_once('.')?;
    l.parse().ok()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSchedule {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub step: StepParams,
}

fn default_mode() -> Mode {
    Mode::Progressive
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        FinetuneSchedule {
            mode: Mode::Progressive,
            step: StepParams::default(),
        }
    }
}

impl FinetuneSchedule {
    pub fn plan(&self) -> Result<Vec<StepPlan>> {
        self.step.validate()?;
        if self.step.iterations == 0 {
            return Err(TapError::config("iterations must be positive"));
        }
        let plan = |index, levels: Vec<usize>, backbone| StepPlan {
            index,
            levels,
            backbone,
            params: self.step.clone(),
        };
        Ok(match self.mode {
            Mode::Progressive => (1..=3).map(|m| plan(m, vec![4 - m], false)).collect(),
            Mode::AllParams => (1..=3).map(|m| plan(m, (4 - m..=3).collect(), true)).collect(),
            Mode::JointModules => (1..=3).map(|m| plan(m, vec![1, 2, 3], false)).collect(),
            Mode::RepeatTwice => (1..=6).map(|m| plan(m, vec![4 - ((m - 1) % 3 + 1)], false)).collect(),
        })
    }
}

/// `batch` windows of `T` aligned crops plus the matching central pseudo-clean crops.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// One `B x C x P x P` tensor per window position.
    pub inputs: Vec<Tensor<f32>>,
    pub targets: Tensor<f32>,
}

/// Uniform video, time index and crop origin per sample. Sample `i` draws
/// from its own stream, so batch composition never shifts other samples.
pub fn sample_batch(pairs: &PseudoPairSet<f32>, seed: u64, path: &[u64], patch: usize, frames: usize, batch: usize) -> Result<TrainBatch> {
    if pairs.pairs.is_empty() {
        return Err(TapError::Data("no pseudo pairs to sample from".into()));
    }
    let c = pairs.pairs[0].clean.c();
    let mut inputs = vec![Tensor::zeros([batch, c, patch, patch]); frames];
    let mut targets = Tensor::zeros([batch, c, patch, patch]);
    for i in 0..batch {
        let mut p = path.to_vec();
        p.push(i as u64);
        let mut rng = stream_rng(seed, &p);
        let pair = &pairs.pairs[rng.random_range(0..pairs.pairs.len())];
        let [n, _, h, w] = pair.clean.shape();
        let t = rng.random_range(0..n);
        let y0 = rng.random_range(0..=h.saturating_sub(patch));
        let x0 = rng.random_range(0..=w.saturating_sub(patch));
        let crop = |video: &Tensor<f32>, k: usize| -> Vec<f32> {
            let mut out = Vec::with_capacity(c * patch * patch);
            for ch in 0..c {
                let plane = video.plane(k, ch);
                for yy in 0..patch {
                    let y = reflect_index((y0 + yy) as isize, h);
                    for xx in 0..patch {
                        out.push(plane[y * w + reflect_index((x0 + xx) as isize, w)]);
                    }
                }
            }
            out
        };
        targets.item_mut(i).copy_from_slice(&crop(&pair.clean, t));
        for (slot, k) in window_indices(t, n, frames).into_iter().enumerate() {
            inputs[slot].item_mut(i).copy_from_slice(&crop(&pair.noisy, k));
        }
    }
    Ok(TrainBatch { inputs, targets })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TapError::Data(format!("{}: {e}", path.display())))?;
    for p in points {
        w.serialize(p).map_err(|e| TapError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| TapError::io(path, e))
}

/// One optimizer update on a batch; returns the L1 loss.
pub fn train_iteration(net: &VideoDenoiser, params: &mut ParamStore<f32>, adam: &mut Adam, batch: &TrainBatch, lr: f64) -> Result<f64> {
    let tape = Tape::new();
    let (loss, grads) = {
        let ctx = Ctx::new(&tape, params);
        let inputs: Vec<_> = batch.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = net.forward(&ctx, &inputs, true)?;
        let loss = tape.l1_loss(&out, &batch.targets)?;
        let value = loss.value().data()[0] as f64;
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = tape.backward(&loss)?;
        (value, ctx.gradients(&grads))
    };
    adam.step(params, &grads, lr)?;
    Ok(loss)
}

/// Where a run writes checkpoints and curves, and how often it saves
/// intermediate state for resumption.
#[derive(Clone, Debug, Default)]
pub struct RunDir {
    pub dir: Option<PathBuf>,
    /// Save `step{m}.partial.ckpt` every this many iterations (0 = never).
    pub checkpoint_every: usize,
    /// Stop after this many iterations of the current invocation, leaving a
    /// partial checkpoint. Simulates an interrupted run.
    pub stop_after: Option<usize>,
}

impl RunDir {
    pub fn step_path(&self, m: usize) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("step{m}.ckpt")))
    }

    pub fn partial_path(&self, m: usize) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("step{m}.partial.ckpt")))
    }

    pub fn curve_path(&self, m: usize) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("step{m}_curve.csv")))
    }
}

/// Outcome of a step that ran to completion or was stopped early.
pub enum StepOutcome {
    Done(Vec<CurvePoint>),
    Interrupted,
}

/// Train the step's modules on `pairs`. The optimizer starts fresh unless
/// `resume` carries a partial checkpoint. On a non-finite loss the state is
/// rolled back to the last good parameters and a numeric error returned.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    net: &VideoDenoiser,
    state: &mut VideoState<f32>,
    pairs: &PseudoPairSet<f32>,
    plan: &StepPlan,
    seed: u64,
    run: &RunDir,
    resume: Option<Checkpoint<f32>>,
    model: &NoiseModel,
) -> Result<StepOutcome> {
    if pairs.source_step != plan.index {
        return Err(TapError::config(format!(
            "pseudo pairs were built for step {}, training step {}",
            pairs.source_step, plan.index
        )));
    }
    let sp = &plan.params;
    sp.validate()?;
    state.params.freeze_except(|n| plan.is_trainable(n));
    let (mut adam, mut start) = (Adam::new(AdamConfig::default()), 0);
    if let Some(ck) = resume {
        let progress = ck.meta.progress.clone().ok_or_else(|| TapError::Checkpoint("partial checkpoint has no progress".into()))?;
        state.params = ck.params;
        adam = ck.optimizer.unwrap_or_default();
        start = progress.iteration;
    }
    info!(
        "step {}: levels {:?}{}, {} trainable of {} parameters, iterations {}..{}",
        plan.index,
        plan.levels,
        if plan.backbone { " + backbone" } else { "" },
        state.params.num_trainable(),
        state.params.num_elements(),
        start,
        sp.iterations
    );
    let mut pairs = pairs.clone();
    let resample = |pairs: &mut PseudoPairSet<f32>, done: usize| {
        pairs.resample(&mut stream_rng(seed, &[STREAM_RESAMPLE, plan.index as u64, done as u64]));
    };
    if sp.resample_every > 0 && start >= sp.resample_every {
        resample(&mut pairs, start / sp.resample_every * sp.resample_every);
    }
    let mut last_good = state.params.clone();
    let mut curve = Vec::new();
    for it in start..sp.iterations {
        let lr = cosine_lr(it, sp.iterations, sp.lr_start, sp.lr_end);
        let batch = sample_batch(&pairs, seed, &[STREAM_BATCH, plan.index as u64, it as u64], sp.patch, net.frames(), sp.batch)?;
        let loss = match train_iteration(net, &mut state.params, &mut adam, &batch, lr) {
            Ok(loss) if loss.is_finite() => loss,
            Ok(_) | Err(TapError::NonFinite { .. }) => {
                state.params = last_good;
                return Err(TapError::Numeric(format!(
                    "non-finite loss at step {} iteration {it}; parameters restored to the last good state",
                    plan.index
                )));
            }
            Err(e) => return Err(e),
        };
        curve.push(CurvePoint { iteration: it, loss, lr });
        let done = it + 1;
        if done % 100 == 0 || done == sp.iterations {
            info!("step {} iteration {done}/{}: loss {loss:.6} lr {lr:.3e}", plan.index, sp.iterations);
        }
        let stop = run.stop_after.is_some_and(|n| done - start >= n) && done < sp.iterations;
        if (run.checkpoint_every > 0 && done % run.checkpoint_every == 0 && done < sp.iterations) || stop {
            last_good = state.params.clone();
            if let Some(path) = run.partial_path(plan.index) {
                let mut ck = Checkpoint::video(net, state.clone(), Some(*model));
                ck.meta.progress = Some(Progress {
                    step: plan.index,
                    iteration: done,
                    adam_t: adam.steps(),
                });
                ck.optimizer = Some(adam.clone());
                ck.save(&path)?;
            }
        }
        if stop {
            return Ok(StepOutcome::Interrupted);
        }
        if sp.resample_every > 0 && done % sp.resample_every == 0 {
            resample(&mut pairs, done);
        }
    }
    state.step_index = plan.index;
    Ok(StepOutcome::Done(curve))
}

/// Per-step hook, called with the step plan and the state after the step.
pub type StepHook<'a> = dyn FnMut(&StepPlan, &VideoState<f32>) -> Result<()> + 'a;

/// The fine-tuning loop: for each step, rebuild pseudo pairs with the current
/// denoiser (the image denoiser for step 1), then train that step's modules.
/// With a run directory, each step ends in `step{m}.ckpt` and an existing
/// directory is resumed from its latest checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn run_progressive(
    net: &VideoDenoiser,
    initial: VideoState<f32>,
    videos: &[(String, Tensor<f32>)],
    model: &NoiseModel,
    schedule: &FinetuneSchedule,
    seed: u64,
    run: &RunDir,
    on_step: &mut StepHook<'_>,
) -> Result<Option<VideoState<f32>>> {
    if initial.step_index != 0 {
        return Err(TapError::config(format!(
            "fine-tuning starts from an image denoiser state, got step {}",
            initial.step_index
        )));
    }
    model.validate()?;
    let plans = schedule.plan()?;
    if let Some(d) = &run.dir {
        fs::create_dir_all(d).map_err(|e| TapError::io(d, e))?;
    }
    let mut state = initial;
    let mut first = 0;
    for (k, p) in plans.iter().enumerate().rev() {
        if let Some(path) = run.step_path(p.index).filter(|p| p.is_file()) {
            info!("resuming after {}", path.display());
            state = Checkpoint::<f32>::load(&path)?.into_video_state(net, &mut stream_rng(seed, &[]))?;
            first = k + 1;
            break;
        }
    }
    for plan in &plans[first..] {
        let pairs = build_pairs(net, &state, videos, model, plan.index, seed)?;
        let resume = match run.partial_path(plan.index).filter(|p| p.is_file()) {
            Some(path) => {
                info!("resuming step {} from {}", plan.index, path.display());
                Some(Checkpoint::<f32>::load(&path)?)
            }
            None => None,
        };
        let curve = match finetune_step(net, &mut state, &pairs, plan, seed, run, resume, model)? {
            StepOutcome::Done(curve) => curve,
            StepOutcome::Interrupted => return Ok(None),
        };
        for l in &plan.levels {
            let beta = state.params.get(&net.module(*l).beta_name())?;
            if beta.data().iter().all(|&b| b == 0.0) {
                warn!("step {}: gate of level {l} is still zero", plan.index);
            }
        }
        if let Some(path) = run.step_path(plan.index) {
            Checkpoint::video(net, state.clone(), Some(*model)).save(&path)?;
            if let Some(partial) = run.partial_path(plan.index).filter(|p| p.is_file()) {
                fs::remove_file(&partial).map_err(|e| TapError::io(&partial, e))?;
            }
        }
        if let Some(path) = run.curve_path(plan.index) {
            write_curve(&path, &curve)?;
        }
        on_step(plan, &state)?;
    }
    Ok(Some(state))
}

/// Pseudo pairs supervising step `m`, built with the state before that step.
pub fn build_pairs(
    net: &VideoDenoiser,
    state: &VideoState<f32>,
    videos: &[(String, Tensor<f32>)],
    model: &NoiseModel,
    m: usize,
    seed: u64,
) -> Result<PseudoPairSet<f32>> {
    make_pseudo_pairs(
        videos,
        |v| {
            if state.step_index == 0 {
                net.backbone().denoise_image(&state.params, v)
            } else {
                net.denoise_video(&state.params, v, None)
            }
        },
        model,
        m,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::TemporalConfig;
    use crate::backbone::DenoiserConfig;
    use crate::noise::PseudoPair;

    fn tiny() -> (VideoDenoiser, VideoState<f32>) {
        let cfg = DenoiserConfig::desk(3);
        let tcfg = TemporalConfig::for_backbone(&cfg, 3, 16);
        let net = VideoDenoiser::new(cfg, tcfg).unwrap();
        let state = net.init_params(&mut stream_rng(1, &[]));
        (net, state)
    }

    fn pairs(step: usize, n: usize, size: usize) -> PseudoPairSet<f32> {
        let mut rng = stream_rng(3, &[]);
        let clean = Tensor::from_fn([n, 3, size, size], |_| rng.random_range(0.0..1.0));
        let model = NoiseModel::Awgn { sigma: 0.1 };
        PseudoPairSet {
            pairs: vec![PseudoPair {
                id: "v".into(),
                noisy: model.corrupt(&clean, &mut rng),
                clean,
            }],
            source_step: step,
            model,
            seed: 3,
        }
    }

    fn params(iterations: usize) -> StepParams {
        StepParams {
            iterations,
            lr_start: 1e-3,
            lr_end: 1e-4,
            batch: 2,
            patch: 16,
            resample_every: 0,
        }
    }

    fn plan_for(mode: Mode) -> Vec<StepPlan> {
        FinetuneSchedule { mode, step: params(1) }.plan().unwrap()
    }

    #[test]
    fn mode_plans() {
        let lv = |m| plan_for(m).into_iter().map(|p| (p.levels, p.backbone)).collect::<Vec<_>>();
        assert_eq!(lv(Mode::Progressive), [(vec![3], false), (vec![2], false), (vec![1], false)]);
        assert_eq!(lv(Mode::AllParams), [(vec![3], true), (vec![2, 3], true), (vec![1, 2, 3], true)]);
        assert_eq!(lv(Mode::JointModules), vec![(vec![1, 2, 3], false); 3]);
        let rep = lv(Mode::RepeatTwice);
        assert_eq!(rep.len(), 6);
        assert_eq!(rep[3..], rep[..3]);
        assert!(FinetuneSchedule { mode: Mode::Progressive, step: params(0) }.plan().is_err());
        let mut bad = params(5);
        bad.lr_end = 1e-2;
        assert!(bad.validate().is_err());
        assert_eq!(module_level("tm2.dcn.weight"), Some(2));
        assert_eq!(module_level("enc1.0.beta"), None);
    }

    #[test]
    fn full_frame_patch_and_alignment() {
        let set = pairs(1, 4, 16);
        let b = sample_batch(&set, 0, &[1], 16, 3, 3).unwrap();
        let p = &set.pairs[0];
        for i in 0..3 {
            let t = (0..4).find(|&t| p.clean.item(t) == b.targets.item(i)).expect("target is a whole frame");
            for (slot, k) in window_indices(t, 4, 3).into_iter().enumerate() {
                assert_eq!(b.inputs[slot].item(i), p.noisy.item(k));
            }
        }
    }

    #[test]
    fn crops_align_and_are_reproducible() {
        let set = pairs(1, 5, 24);
        let b1 = sample_batch(&set, 7, &[2, 9], 8, 3, 4).unwrap();
        let b2 = sample_batch(&set, 7, &[2, 9], 8, 3, 4).unwrap();
        assert_eq!(b1.targets, b2.targets);
        // Per-sample streams: a smaller batch is a prefix of a larger one.
        let small = sample_batch(&set, 7, &[2, 9], 8, 3, 2).unwrap();
        assert_eq!(small.targets.item(0), b1.targets.item(0));
        assert_eq!(small.inputs[1].item(1), b1.inputs[1].item(1));
        // Clean frames are i.i.d. noise, so an exact match locates the crop.
        let p = &set.pairs[0];
        for i in 0..4 {
            let mut hit = None;
            for t in 0..5 {
                for y in 0..=16 {
                    for x in 0..=16 {
                        if p.clean.select(t).crop(y, x, 8, 8).data() == b1.targets.item(i) {
                            hit = Some((t, y, x));
                        }
                    }
                }
            }
            let (t, y, x) = hit.unwrap();
            let idx = window_indices(t, 5, 3);
            for (slot, k) in idx.into_iter().enumerate() {
                assert_eq!(p.noisy.select(k).crop(y, x, 8, 8).data(), b1.inputs[slot].item(i));
            }
        }
    }

    #[test]
    fn small_frames_are_reflect_padded() {
        let set = pairs(1, 2, 12);
        let b = sample_batch(&set, 1, &[], 16, 3, 1).unwrap();
        assert_eq!(b.targets.shape(), [1, 3, 16, 16]);
        let t = (0..2).find(|&t| b.targets.item(0)[..12] == set.pairs[0].clean.item(t)[..12]).unwrap();
        let padded = set.pairs[0].clean.select(t).reflect_pad_to(16, 16);
        assert_eq!(b.targets.item(0), padded.data());
    }

    #[test]
    fn zero_iterations_only_advance_the_step() {
        let (net, mut state) = tiny();
        let before = state.params.clone();
        let plan = StepPlan { index: 1, levels: vec![3], backbone: false, params: params(0) };
        let model = NoiseModel::Awgn { sigma: 0.1 };
        finetune_step(&net, &mut state, &pairs(1, 3, 16), &plan, 0, &RunDir::default(), None, &model).unwrap();
        assert_eq!(state.step_index, 1);
        for (name, p) in before.iter() {
            assert_eq!(state.params.get(name).unwrap(), p.value.as_ref());
        }
    }

    fn changed(before: &ParamStore<f32>, after: &ParamStore<f32>) -> Vec<String> {
        before
            .iter()
            .filter(|(n, p)| after.get(n).unwrap() != p.value.as_ref())
            .map(|(n, _)| n.clone())
            .collect()
    }

    #[test]
    fn progressive_step_touches_only_its_module() {
        let (net, mut state) = tiny();
        let before = state.params.clone();
        let plan = &plan_for(Mode::Progressive)[0];
        let plan = StepPlan { params: params(3), ..plan.clone() };
        let model = NoiseModel::Awgn { sigma: 0.1 };
        finetune_step(&net, &mut state, &pairs(1, 3, 16), &plan, 0, &RunDir::default(), None, &model).unwrap();
        let moved = changed(&before, &state.params);
        assert!(moved.iter().all(|n| n.starts_with("tm3.")), "{moved:?}");
        assert!(moved.contains(&"tm3.beta".to_string()));
        assert!(state.params.num_trainable() < state.params.num_elements_with_prefix("tm"));
    }

    #[test]
    fn ablation_modes_unfreeze_what_they_claim() {
        let (net, state0) = tiny();
        let model = NoiseModel::Awgn { sigma: 0.1 };
        let mut state = state0.clone();
        let plan = StepPlan { params: params(2), ..plan_for(Mode::AllParams)[0].clone() };
        finetune_step(&net, &mut state, &pairs(1, 3, 16), &plan, 0, &RunDir::default(), None, &model).unwrap();
        let moved = changed(&state0.params, &state.params);
        assert!(moved.contains(&"intro.weight".to_string()));
        assert!(!moved.iter().any(|n| n.starts_with("tm1.") || n.starts_with("tm2.")));

        let mut state = state0.clone();
        let plan = StepPlan { params: params(2), ..plan_for(Mode::JointModules)[0].clone() };
        finetune_step(&net, &mut state, &pairs(1, 3, 16), &plan, 0, &RunDir::default(), None, &model).unwrap();
        for l in 1..=3 {
            assert!(state.params.get(&format!("tm{l}.beta")).unwrap().data().iter().any(|&b| b != 0.0));
        }
        assert!(!changed(&state0.params, &state.params).iter().any(|n| module_level(n).is_none()));
    }

    #[test]
    fn non_finite_loss_restores_last_good_state() {
        let (net, mut state) = tiny();
        let before = state.params.clone();
        let mut set = pairs(1, 3, 16);
        set.pairs[0].noisy.data_mut()[5] = f32::NAN;
        let plan = StepPlan { index: 1, levels: vec![3], backbone: false, params: params(2) };
        let model = NoiseModel::Awgn { sigma: 0.1 };
        let mut hit = false;
        for seed in 0..20 {
            match finetune_step(&net, &mut state, &set, &plan, seed, &RunDir::default(), None, &model) {
                Err(TapError::Numeric(msg)) => {
                    assert!(msg.contains("restored"));
                    hit = true;
                    break;
                }
                other => assert!(other.is_ok()),
            }
            state.params = before.clone();
        }
        assert!(hit);
        assert!(changed(&before, &state.params).is_empty());
    }

    #[test]
    fn pair_step_must_match() {
        let (net, mut state) = tiny();
        let plan = StepPlan { index: 2, levels: vec![2], backbone: false, params: params(1) };
        let err = finetune_step(&net, &mut state, &pairs(1, 3, 16), &plan, 0, &RunDir::default(), None, &NoiseModel::Awgn { sigma: 0.1 });
        assert!(err.is_err());
    }
}
