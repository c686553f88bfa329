//! Temporal modules: deformable alignment of neighbour-frame features to the
//! central frame, with offsets and aligned features passed from coarse to
//! fine levels, frame fusion and a zero-initialized per-channel gate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{DenoiserConfig, Profile};
use crate::error::{Result, TapError};
use crate::nn::{Conv, LEAKY_SLOPE};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Real, Tensor};

/// Levels that carry a temporal module, bottom (coarse) first.
pub const MODULE_LEVELS: [usize; 3] = [3, 2, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalConfig {
    /// Window length `T`, odd.
    pub frames: usize,
    /// Deformable kernel size.
    pub kernel: usize,
    /// Deformable groups for levels 1, 2, 3.
    pub groups: Vec<usize>,
    /// Offset magnitude bound in pixels for levels 1, 2, 3.
    pub offset_clip: Vec<f64>,
}

impl TemporalConfig {
    /// Defaults for a backbone. `patch` is the training crop size; the desk
    /// offset bound is half the level's crop side.
    pub fn for_backbone(cfg: &DenoiserConfig, frames: usize, patch: usize) -> Self {
        let (groups, offset_clip) = match cfg.profile {
            Profile::Full => (vec![8; 3], vec![32.0; 3]),
            Profile::Desk => (
                (0..3).map(|l| desk_groups(cfg.channels[l])).collect(),
                (0..3).map(|l| ((patch >> l) / 2).max(1) as f64).collect(),
            ),
        };
        TemporalConfig {
            frames,
            kernel: 3,
            groups,
            offset_clip,
        }
    }

    pub fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        if self.frames == 0 || self.frames.is_multiple_of(2) {
            return Err(TapError::config(format!("window length must be odd, got {}", self.frames)));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(TapError::config("deformable kernel size must be odd"));
        }
        if self.groups.len() != 3 || self.offset_clip.len() != 3 {
            return Err(TapError::config("groups and offset_clip need one entry per level 1-3"));
        }
        for l in 0..3 {
            let g = self.groups[l];
            if g == 0 || !cfg.channels[l].is_multiple_of(g) {
                return Err(TapError::config(format!(
                    "{g} deformable groups do not divide {} channels at level {}",
                    cfg.channels[l],
                    l + 1
                )));
            }
            if !(self.offset_clip[l] > 0.0) {
                return Err(TapError::config("offset_clip must be positive"));
            }
        }
        Ok(())
    }

    pub fn center(&self) -> usize {
        self.frames / 2
    }
}

/// Largest divisor of `c` not above `min(8, c / 4)`.
fn desk_groups(c: usize) -> usize {
    let target = (c / 4).clamp(1, 8);
    (1..=target).rev().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
}

/// Offsets and aligned features of every frame, handed to the level above.
#[derive(Clone, Debug)]
pub struct Transfer<T> {
    pub offsets: Vec<Var<T>>,
    pub aligned: Vec<Var<T>>,
}

#[derive(Clone, Debug)]
pub struct TemporalModule {
    pub level: usize,
    c: usize,
    frames: usize,
    k: usize,
    groups: usize,
    lower_groups: Option<usize>,
    clip: f64,
    offset_conv1: Conv,
    offset_conv2: Conv,
    offset_refine: Conv,
    dcn: Conv,
    feat_refine: Conv,
    frame_fuse: Conv,
}

impl TemporalModule {
    pub fn new(level: usize, cfg: &DenoiserConfig, tcfg: &TemporalConfig) -> Result<Self> {
        if !(1..=3).contains(&level) {
            return Err(TapError::config(format!("temporal modules live on levels 1-3, not {level}")));
        }
        let l = level - 1;
        let c = cfg.channels[l];
        let k = tcfg.kernel;
        let groups = tcfg.groups[l];
        let off_ch = 2 * k * k * groups;
        let (lower_groups, lower_c) = if level < 3 {
            (Some(tcfg.groups[l + 1]), Some(cfg.channels[l + 1]))
        } else {
            (None, None)
        };
        let lower_off_ch = lower_groups.map_or(0, |g| 2 * k * k * g);
        let n = |s: &str| format!("tm{level}.{s}");
        Ok(TemporalModule {
            level,
            c,
            frames: tcfg.frames,
            k,
            groups,
            lower_groups,
            clip: tcfg.offset_clip[l],
            offset_conv1: Conv::new(n("offset_conv1"), 2 * c, c, 3),
            offset_conv2: Conv::new(n("offset_conv2"), c, off_ch, 3),
            offset_refine: Conv::new(n("offset_refine"), off_ch + lower_off_ch, off_ch, 3),
            dcn: Conv::new(n("dcn"), c, c, k),
            feat_refine: Conv::new(n("feat_refine"), c + lower_c.unwrap_or(0), c, 3),
            frame_fuse: Conv::new(n("frame_fuse"), tcfg.frames * c, c, 1),
        })
    }

    pub fn prefix(&self) -> String {
        format!("tm{}.", self.level)
    }

    pub fn beta_name(&self) -> String {
        format!("tm{}.beta", self.level)
    }

    pub fn offset_channels(&self) -> usize {
        2 * self.k * self.k * self.groups
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.offset_conv1.init(store, rng);
        self.offset_conv2.init_zero(store);
        self.init_offset_refine(store);
        self.dcn.init(store, rng);
        self.feat_refine.init(store, rng);
        self.frame_fuse.init(store, rng);
        store.insert(self.beta_name(), Tensor::zeros([1, self.c, 1, 1]));
    }

    /// Identity on the raw offsets and on the transferred ones, so a fresh
    /// module starts from `raw + 2 * upsample(lower)`. When the group counts
    /// differ, group `g` reads lower group `g * G_lower / G`.
    fn init_offset_refine<T: Real>(&self, store: &mut ParamStore<T>) {
        let oc = self.offset_channels();
        let per_group = 2 * self.k * self.k;
        let mut w = Tensor::zeros(self.offset_refine.weight_shape());
        for o in 0..oc {
            w.set([o, o, 1, 1], T::one());
            if let Some(gl) = self.lower_groups {
                let (g, j) = (o / per_group, o % per_group);
                let src = g * gl / self.groups;
                w.set([o, oc + src * per_group + j, 1, 1], T::one());
            }
        }
        store.insert(self.offset_refine.weight_name(), w);
        store.insert(self.offset_refine.bias_name(), Tensor::zeros([1, oc, 1, 1]));
    }

    fn check_pair(a: &Var<impl Real>, b: &Var<impl Real>) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(TapError::shape(format!(
                "central features {:?} vs neighbour {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    }

    /// Raw offsets from the central and neighbour features.
    pub fn learn_offsets<T: Real>(&self, ctx: &Ctx<T>, central: &Var<T>, neighbor: &Var<T>) -> Result<Var<T>> {
        Self::check_pair(central, neighbor)?;
        let t = ctx.tape;
        let x = t.concat_channels(&[central, neighbor])?;
        let h = self.offset_conv1.forward(ctx, &x)?;
        let h = t.leaky_relu(&h, T::lit(LEAKY_SLOPE));
        self.offset_conv2.forward(ctx, &h)
    }

    /// Merge raw offsets with the lower level's refined offsets (upsampled
    /// 2x and scaled by 2 to the finer pixel grid).
    pub fn refine_offsets<T: Real>(&self, ctx: &Ctx<T>, raw: &Var<T>, lower: Option<&Var<T>>) -> Result<Var<T>> {
        let t = ctx.tape;
        match (lower, self.lower_groups) {
            (None, None) => self.offset_refine.forward(ctx, raw),
            (Some(lo), Some(_)) => {
                let up = t.scale(&t.upsample2x(lo), T::lit(2.0));
                if up.shape()[2..] != raw.shape()[2..] {
                    return Err(TapError::shape(format!(
                        "transferred offsets {:?} do not upsample to {:?}",
                        lo.shape(),
                        raw.shape()
                    )));
                }
                self.offset_refine.forward(ctx, &t.concat_channels(&[raw, &up])?)
            }
            (None, Some(_)) => Err(TapError::config(format!(
                "level {} module needs offsets from the level below",
                self.level
            ))),
            (Some(_), None) => Err(TapError::config("the bottom module takes no transferred offsets")),
        }
    }

    /// Deformable alignment of `neighbor`, merged with the lower level's
    /// aligned features when present.
    pub fn align_and_refine<T: Real>(
        &self,
        ctx: &Ctx<T>,
        neighbor: &Var<T>,
        offsets: &Var<T>,
        lower_aligned: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        let t = ctx.tape;
        let w = ctx.p(&self.dcn.weight_name())?;
        let b = ctx.p(&self.dcn.bias_name())?;
        let aligned = t.deform_conv2d(neighbor, offsets, &w, Some(&b))?;
        match (lower_aligned, self.lower_groups) {
            (None, None) => self.feat_refine.forward(ctx, &aligned),
            (Some(lo), Some(_)) => {
                let up = t.upsample2x(lo);
                self.feat_refine.forward(ctx, &t.concat_channels(&[&aligned, &up])?)
            }
            _ => Err(TapError::config(format!(
                "level {} module has inconsistent feature transfer",
                self.level
            ))),
        }
    }

    /// Fuse the aligned maps of all `T` frames, in temporal order.
    pub fn fuse_frames<T: Real>(&self, ctx: &Ctx<T>, aligned: &[Var<T>]) -> Result<Var<T>> {
        if aligned.len() != self.frames {
            return Err(TapError::config(format!(
                "frame fusion expects T = {} aligned maps, got {}",
                self.frames,
                aligned.len()
            )));
        }
        let refs: Vec<&Var<T>> = aligned.iter().collect();
        self.frame_fuse.forward(ctx, &ctx.tape.concat_channels(&refs)?)
    }

    /// `central + beta * fused`, per channel.
    pub fn gated_residual<T: Real>(&self, ctx: &Ctx<T>, central: &Var<T>, fused: &Var<T>) -> Result<Var<T>> {
        let t = ctx.tape;
        let gated = t.scale_channels(fused, &ctx.p(&self.beta_name())?)?;
        t.add(central, &gated)
    }

    /// Full module: align every frame of the window to the central one, fuse,
    /// gate. Returns the new skip feature and the transfer for the level above.
    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<T>,
        feats: &[Var<T>],
        lower: Option<&Transfer<T>>,
    ) -> Result<(Var<T>, Transfer<T>)> {
        if feats.len() != self.frames {
            return Err(TapError::config(format!(
                "temporal module expects T = {} frames, got {}",
                self.frames,
                feats.len()
            )));
        }
        let central = &feats[self.frames / 2];
        if central.shape()[1] != self.c {
            return Err(TapError::shape(format!(
                "level {} features have {} channels, module expects {}",
                self.level,
                central.shape()[1],
                self.c
            )));
        }
        let t = ctx.tape;
        let mut offsets = Vec::with_capacity(self.frames);
        let mut aligned = Vec::with_capacity(self.frames);
        for (m, neighbor) in feats.iter().enumerate() {
            let raw = self.learn_offsets(ctx, central, neighbor)?;
            let off = self.refine_offsets(ctx, &raw, lower.map(|l| &l.offsets[m]))?;
            let off = t.clamp_abs(&off, T::lit(self.clip));
            let al = self.align_and_refine(ctx, neighbor, &off, lower.map(|l| &l.aligned[m]))?;
            offsets.push(off);
            aligned.push(al);
        }
        let fused = self.fuse_frames(ctx, &aligned)?;
        let out = self.gated_residual(ctx, central, &fused)?;
        Ok((out, Transfer { offsets, aligned }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::ops::{conv2d, ConvSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(frames: usize) -> (DenoiserConfig, TemporalConfig, Vec<TemporalModule>, ParamStore<f64>) {
        let cfg = DenoiserConfig::desk(3);
        let tcfg = TemporalConfig::for_backbone(&cfg, frames, 32);
        tcfg.validate(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mods: Vec<_> = (1..=3).map(|l| TemporalModule::new(l, &cfg, &tcfg).unwrap()).collect();
        for m in &mods {
            m.init(&mut store, &mut rng);
        }
        (cfg, tcfg, mods, store)
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn desk_group_rule() {
        assert_eq!(desk_groups(8), 2);
        assert_eq!(desk_groups(16), 4);
        assert_eq!(desk_groups(64), 8);
        assert_eq!(desk_groups(4), 1);
        assert_eq!(desk_groups(36), 6);
    }

    #[test]
    fn identical_frames_give_zero_initial_offsets() {
        let (_, tcfg, mods, store) = setup(3);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let f = tape.constant(rand_t(&mut ChaCha8Rng::seed_from_u64(1), [1, 8, 16, 16]));
        let off = mods[0].learn_offsets(&ctx, &f, &f).unwrap();
        assert_eq!(off.shape(), [1, 2 * 9 * tcfg.groups[0], 16, 16]);
        assert!(off.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bottom_refinement_depends_only_on_raw() {
        let (_, _, mods, store) = setup(3);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let raw = tape.constant(rand_t(&mut ChaCha8Rng::seed_from_u64(2), [1, 144, 8, 8]));
        let out = mods[2].refine_offsets(&ctx, &raw, None).unwrap();
        assert_eq!(out.value(), raw.value());
        let bogus = tape.constant(Tensor::zeros([1, 144, 4, 4]));
        assert!(mods[2].refine_offsets(&ctx, &raw, Some(&bogus)).is_err());
    }

    #[test]
    fn zero_transfer_leaves_raw_offsets() {
        let (_, _, mods, store) = setup(3);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let raw = tape.constant(rand_t(&mut ChaCha8Rng::seed_from_u64(3), [1, 36, 16, 16]));
        let lower = tape.constant(Tensor::zeros([1, 72, 8, 8]));
        let out = mods[0].refine_offsets(&ctx, &raw, Some(&lower)).unwrap();
        assert_eq!(out.value(), raw.value());
    }

    #[test]
    fn transferred_offsets_are_doubled() {
        // Level 2 (G=4) reading level 3 (G=8): group g reads lower group 2g.
        let (_, _, mods, store) = setup(3);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let raw = tape.constant(Tensor::zeros([1, 72, 8, 8]));
        // Uniform (dy, dx) = (1, 0) in every lower group and tap.
        let lower = Tensor::from_fn([1, 144, 4, 4], |[_, c, _, _]| if c % 2 == 0 { 1.0 } else { 0.0 });
        let out = mods[1].refine_offsets(&ctx, &raw, Some(&tape.constant(lower))).unwrap();
        for c in 0..72 {
            // Hand upsampler: a constant field stays constant under bilinear 2x.
            let want = if c % 2 == 0 { 2.0 } else { 0.0 };
            assert!(out.value().plane(0, c).iter().all(|&v| (v - want).abs() < 1e-12), "channel {c}");
        }
    }

    #[test]
    fn zero_offsets_without_transfer_reduce_to_convolutions() {
        let (_, _, mods, mut store) = setup(3);
        let m = &mods[2];
        // feat_refine as identity on the aligned branch.
        let mut id = Tensor::zeros([32, 32, 3, 3]);
        for c in 0..32 {
            id.set([c, c, 1, 1], 1.0);
        }
        store.set("tm3.feat_refine.weight", id).unwrap();
        store.set("tm3.feat_refine.bias", Tensor::zeros([1, 32, 1, 1])).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let f = rand_t(&mut ChaCha8Rng::seed_from_u64(5), [1, 32, 8, 8]);
        let off = tape.constant(Tensor::zeros([1, 144, 8, 8]));
        let got = m.align_and_refine(&ctx, &tape.constant(f.clone()), &off, None).unwrap();
        let want = conv2d(
            &f,
            store.get("tm3.dcn.weight").unwrap(),
            Some(store.get("tm3.dcn.bias").unwrap()),
            ConvSpec::same(3),
        )
        .unwrap();
        assert!(got.value().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn fusion_rejects_wrong_count_and_respects_order() {
        let (_, _, mods, mut store) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let maps: Vec<_> = (0..3).map(|_| rand_t(&mut rng, [1, 8, 4, 4])).collect();
        let tape = Tape::inference();
        {
            let ctx = Ctx::new(&tape, &store);
            let vars: Vec<_> = maps.iter().map(|m| tape.constant(m.clone())).collect();
            let err = mods[0].fuse_frames(&ctx, &vars[..2]).unwrap_err();
            assert!(err.to_string().contains("T = 3"));
            let a = mods[0].fuse_frames(&ctx, &vars).unwrap();
            assert_eq!(a.shape(), [1, 8, 4, 4]);
            let swapped = [vars[2].clone(), vars[1].clone(), vars[0].clone()];
            let b = mods[0].fuse_frames(&ctx, &swapped).unwrap();
            assert!(a.value().max_abs_diff(b.value()) > 1e-3);
        }
        let shape = store.get("tm1.frame_fuse.weight").unwrap().shape();
        store.set("tm1.frame_fuse.weight", Tensor::zeros(shape)).unwrap();
        store.set("tm1.frame_fuse.bias", Tensor::zeros([1, 8, 1, 1])).unwrap();
        let ctx = Ctx::new(&tape, &store);
        let vars: Vec<_> = maps.iter().map(|m| tape.constant(m.clone())).collect();
        let z = mods[0].fuse_frames(&ctx, &vars).unwrap();
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_arithmetic() {
        let cfg = DenoiserConfig::desk(3);
        let m = TemporalModule::new(1, &cfg, &TemporalConfig::for_backbone(&cfg, 3, 32)).unwrap();
        let mut store = ParamStore::<f64>::new();
        store.insert("tm1.beta", Tensor::full([1, 8, 1, 1], 0.5));
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let c = tape.constant(Tensor::full([1, 8, 1, 1], 2.0));
        let f = tape.constant(Tensor::full([1, 8, 1, 1], 4.0));
        let out = m.gated_residual(&ctx, &c, &f).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 4.0));
        store.set("tm1.beta", Tensor::zeros([1, 8, 1, 1])).unwrap();
        let ctx = Ctx::new(&tape, &store);
        assert_eq!(m.gated_residual(&ctx, &c, &f).unwrap().value(), c.value());
    }

    fn pyramid_feats(rng: &mut ChaCha8Rng, frames: usize) -> Vec<Vec<Tensor<f64>>> {
        [(8, 16), (16, 8), (32, 4)]
            .iter()
            .map(|&(c, s)| (0..frames).map(|_| rand_t(rng, [1, c, s, s])).collect())
            .collect()
    }

    fn run_all(
        mods: &[TemporalModule],
        store: &ParamStore<f64>,
        feats: &[Vec<Tensor<f64>>],
    ) -> Vec<Tensor<f64>> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store);
        let mut transfer = None;
        let mut outs = vec![Tensor::zeros([1, 1, 1, 1]); 3];
        for level in MODULE_LEVELS {
            let vars: Vec<_> = feats[level - 1].iter().map(|f| tape.constant(f.clone())).collect();
            let (o, tr) = mods[level - 1].forward(&ctx, &vars, transfer.as_ref()).unwrap();
            outs[level - 1] = o.value().clone();
            transfer = Some(tr);
        }
        outs
    }

    #[test]
    fn fresh_modules_are_exact_no_ops() {
        let (_, tcfg, mods, store) = setup(5);
        let feats = pyramid_feats(&mut ChaCha8Rng::seed_from_u64(7), 5);
        let outs = run_all(&mods, &store, &feats);
        for l in 0..3 {
            assert_eq!(outs[l], feats[l][tcfg.center()]);
        }
    }

    #[test]
    fn gradients_reach_every_parameter_group_once_gated() {
        let (_, _, mods, mut store) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for l in 1..=3 {
            let c = [8, 16, 32][l - 1];
            store.set(&format!("tm{l}.beta"), Tensor::full([1, c, 1, 1], 0.7)).unwrap();
            // Nonzero final offset conv so the first offset conv is reachable.
            let name = format!("tm{l}.offset_conv2.weight");
            let shape = store.get(&name).unwrap().shape();
            store.set(&name, rand_t(&mut rng, shape).map(|v| 0.05 * v)).unwrap();
        }
        let feats = pyramid_feats(&mut rng, 3);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let mut transfer = None;
        let mut loss = None;
        for level in MODULE_LEVELS {
            let vars: Vec<_> = feats[level - 1].iter().map(|f| tape.constant(f.clone())).collect();
            let (o, tr) = mods[level - 1].forward(&ctx, &vars, transfer.as_ref()).unwrap();
            transfer = Some(tr);
            let l = tape.l1_loss(&o, &Tensor::zeros(o.shape())).unwrap();
            loss = Some(match loss {
                None => l,
                Some(acc) => tape.add(&acc, &l).unwrap(),
            });
        }
        let grads = ctx.gradients(&tape.backward(&loss.unwrap()).unwrap());
        for name in store.names() {
            let g = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(g.data().iter().any(|&v| v != 0.0), "zero gradient for {name}");
        }
    }

    fn offsets_loss(m: &TemporalModule, store: &ParamStore<f64>, f: &Tensor<f64>, off: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store);
        let y = m
            .align_and_refine(&ctx, &tape.constant(f.clone()), &tape.constant(off.clone()), None)
            .unwrap();
        y.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn offset_gradient_matches_finite_differences() {
        let (_, _, mods, store) = setup(3);
        let m = &mods[2];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = rand_t(&mut rng, [1, 32, 4, 4]);
        let off = Tensor::from_fn([1, 144, 4, 4], |_| rng.random_range(-1..=1) as f64 + rng.random_range(0.1..0.9));
        let probe = rand_t(&mut rng, [1, 32, 4, 4]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let ov = tape.leaf(off.clone());
        let y = m.align_and_refine(&ctx, &tape.constant(f.clone()), &ov, None).unwrap();
        let g = tape.backward_with(&y, probe.clone()).unwrap();
        let an = g.get(&ov).unwrap().clone();
        let step = 1e-3;
        let mut fd = Tensor::zeros(off.shape());
        for i in 0..off.len() {
            let mut p = off.clone();
            p.data_mut()[i] += step;
            let mut q = off.clone();
            q.data_mut()[i] -= step;
            fd.data_mut()[i] = (offsets_loss(m, &store, &f, &p, &probe) - offsets_loss(m, &store, &f, &q, &probe)) / (2.0 * step);
        }
        let diff: f64 = an.data().iter().zip(fd.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm <= 1e-3, "relative error {}", diff / norm);
    }

    #[test]
    fn offsets_are_clipped() {
        let (cfg, mut tcfg, _, _) = setup(3);
        tcfg.offset_clip = vec![0.25, 0.25, 0.25];
        let m = TemporalModule::new(3, &cfg, &tcfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        m.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        store.set("tm3.offset_refine.bias", Tensor::full([1, 144, 1, 1], 5.0)).unwrap();
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let feats: Vec<_> = (0..3).map(|_| tape.constant(Tensor::zeros([1, 32, 4, 4]))).collect();
        let (_, tr) = m.forward(&ctx, &feats, None).unwrap();
        assert!(tr.offsets.iter().all(|o| o.value().data().iter().all(|&v| v == 0.25)));
    }
}
