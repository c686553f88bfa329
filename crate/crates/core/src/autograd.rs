//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records an operation only when at least one of its inputs
//! requires a gradient, so forward passes through frozen sub-networks cost
//! no tape memory and inference on a non-recording tape records nothing.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Result, TapError};
use crate::ops::{self, ConvSpec};
use crate::tensor::{Real, Tensor};

type NodeId = Option<usize>;

/// A value produced on a tape. Cheap to clone.
#[derive(Clone, Debug)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    id: NodeId,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> [usize; 4] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|rc| (*rc).clone())
    }
}

enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Mul {
        a: NodeId,
        b: NodeId,
        av: Arc<Tensor<T>>,
        bv: Arc<Tensor<T>>,
    },
    ScaleChannels {
        x: NodeId,
        s: NodeId,
        xv: Arc<Tensor<T>>,
        sv: Arc<Tensor<T>>,
    },
    Scalar(NodeId, T),
    LeakyRelu {
        x: NodeId,
        xv: Arc<Tensor<T>>,
        slope: T,
    },
    Clamp {
        x: NodeId,
        xv: Arc<Tensor<T>>,
        bound: T,
    },
    Concat(Vec<(NodeId, usize)>),
    Slice {
        x: NodeId,
        start: usize,
        in_shape: [usize; 4],
    },
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        xv: Arc<Tensor<T>>,
        wv: Arc<Tensor<T>>,
        spec: ConvSpec,
    },
    Deform {
        x: NodeId,
        off: NodeId,
        w: NodeId,
        b: NodeId,
        xv: Arc<Tensor<T>>,
        offv: Arc<Tensor<T>>,
        wv: Arc<Tensor<T>>,
    },
    Upsample {
        x: NodeId,
        in_shape: [usize; 4],
    },
    PixelShuffle(NodeId),
    LayerNorm {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        xhat: Tensor<T>,
        rstd: Vec<T>,
        wv: Arc<Tensor<T>>,
    },
    AvgPool {
        x: NodeId,
        in_shape: [usize; 4],
    },
    L1 {
        pred: NodeId,
        sign: Tensor<T>,
    },
}

/// Records differentiable operations for one forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Op<T>>>,
    recording: bool,
}

/// Gradients of leaves, indexed by the leaf's [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id.and_then(|i| self.grads.get(i).and_then(|g| g.as_ref()))
    }
}

fn any(ids: &[NodeId]) -> bool {
    ids.iter().any(|i| i.is_some())
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that never records; every value is a constant.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(op);
        nodes.len() - 1
    }

    fn wrap(&self, value: Tensor<T>, ids: &[NodeId], op: impl FnOnce() -> Op<T>) -> Var<T> {
        let id = (self.recording && any(ids)).then(|| self.push(op()));
        Var {
            value: Arc::new(value),
            id,
        }
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var {
            value: Arc::new(t),
            id: None,
        }
    }

    /// A leaf that receives a gradient when the tape records.
    pub fn leaf(&self, t: Tensor<T>) -> Var<T> {
        self.leaf_shared(Arc::new(t))
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>) -> Var<T> {
        let id = self.recording.then(|| self.push(Op::Leaf));
        Var { value, id }
    }

    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<T> {
        Var { value, id: None }
    }

    fn same_shape(a: &Var<T>, b: &Var<T>, what: &str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(TapError::shape(format!(
                "{what}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape(a, b, "add")?;
        let v = a.value.zip_map(&b.value, |x, y| x + y);
        Ok(self.wrap(v, &[a.id, b.id], || Op::Add(a.id, b.id)))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        Self::same_shape(a, b, "mul")?;
        let v = a.value.zip_map(&b.value, |x, y| x * y);
        Ok(self.wrap(v, &[a.id, b.id], || Op::Mul {
            a: a.id,
            b: b.id,
            av: a.value.clone(),
            bv: b.value.clone(),
        }))
    }

    /// `x * s` with `s` of shape `1 x C x 1 x 1` or `N x C x 1 x 1`
    /// broadcast over the remaining axes.
    pub fn scale_channels(&self, x: &Var<T>, s: &Var<T>) -> Result<Var<T>> {
        let [n, c, h, w] = x.shape();
        let [sn, sc, sh, sw] = s.shape();
        if sc != c || sh != 1 || sw != 1 || (sn != 1 && sn != n) {
            return Err(TapError::shape(format!(
                "channel scale {:?} cannot broadcast over {:?}",
                s.shape(),
                x.shape()
            )));
        }
        let hw = h * w;
        let mut v = (*x.value).clone();
        for i in 0..n {
            for j in 0..c {
                let sv = s.value.data()[(if sn == 1 { 0 } else { i }) * c + j];
                let base = (i * c + j) * hw;
                for e in &mut v.data_mut()[base..base + hw] {
                    *e *= sv;
                }
            }
        }
        // A constant all-zero scale cuts the gradient path to `x` exactly.
        let x_id = if s.id.is_none() && s.value.data().iter().all(|&e| e == T::zero()) {
            None
        } else {
            x.id
        };
        Ok(self.wrap(v, &[x_id, s.id], || Op::ScaleChannels {
            x: x_id,
            s: s.id,
            xv: x.value.clone(),
            sv: s.value.clone(),
        }))
    }

    pub fn scale(&self, x: &Var<T>, k: T) -> Var<T> {
        let v = x.value.map(|e| e * k);
        self.wrap(v, &[x.id], || Op::Scalar(x.id, k))
    }

    pub fn leaky_relu(&self, x: &Var<T>, slope: T) -> Var<T> {
        let v = x.value.map(|e| if e >= T::zero() { e } else { e * slope });
        self.wrap(v, &[x.id], || Op::LeakyRelu {
            x: x.id,
            xv: x.value.clone(),
            slope,
        })
    }

    /// Clamp to `[-bound, bound]`; the gradient is zero where clamped.
    pub fn clamp_abs(&self, x: &Var<T>, bound: T) -> Var<T> {
        let v = x.value.map(|e| e.max(-bound).min(bound));
        self.wrap(v, &[x.id], || Op::Clamp {
            x: x.id,
            xv: x.value.clone(),
            bound,
        })
    }

    pub fn concat_channels(&self, xs: &[&Var<T>]) -> Result<Var<T>> {
        let first = xs
            .first()
            .ok_or_else(|| TapError::shape("concat of zero tensors"))?;
        let [n, _, h, w] = first.shape();
        let mut ctot = 0;
        for x in xs {
            let [xn, xc, xh, xw] = x.shape();
            if xn != n || xh != h || xw != w {
                return Err(TapError::shape(format!(
                    "concat {:?} with {:?}",
                    x.shape(),
                    first.shape()
                )));
            }
            ctot += xc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * ctot * hw);
        for i in 0..n {
            for x in xs {
                data.extend_from_slice(x.value.item(i));
            }
        }
        let v = Tensor::from_vec([n, ctot, h, w], data)?;
        let ids: Vec<NodeId> = xs.iter().map(|x| x.id).collect();
        Ok(self.wrap(v, &ids, || {
            Op::Concat(xs.iter().map(|x| (x.id, x.shape()[1])).collect())
        }))
    }

    pub fn slice_channels(&self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let [n, c, h, w] = x.shape();
        if start + len > c {
            return Err(TapError::shape(format!(
                "channel slice {start}..{} of {c}",
                start + len
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            data.extend_from_slice(&x.value.item(i)[start * hw..(start + len) * hw]);
        }
        let v = Tensor::from_vec([n, len, h, w], data)?;
        Ok(self.wrap(v, &[x.id], || Op::Slice {
            x: x.id,
            start,
            in_shape: x.shape(),
        }))
    }

    pub fn conv2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        spec: ConvSpec,
    ) -> Result<Var<T>> {
        let v = ops::conv2d(&x.value, &w.value, b.map(|b| &*b.value), spec)?;
        let bid = b.and_then(|b| b.id);
        Ok(self.wrap(v, &[x.id, w.id, bid], || Op::Conv {
            x: x.id,
            w: w.id,
            b: bid,
            xv: x.value.clone(),
            wv: w.value.clone(),
            spec,
        }))
    }

    pub fn deform_conv2d(
        &self,
        x: &Var<T>,
        offsets: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
    ) -> Result<Var<T>> {
        let v = ops::deform_conv2d(&x.value, &offsets.value, &w.value, b.map(|b| &*b.value))?;
        let bid = b.and_then(|b| b.id);
        Ok(self.wrap(v, &[x.id, offsets.id, w.id, bid], || Op::Deform {
            x: x.id,
            off: offsets.id,
            w: w.id,
            b: bid,
            xv: x.value.clone(),
            offv: offsets.value.clone(),
            wv: w.value.clone(),
        }))
    }

    pub fn upsample2x(&self, x: &Var<T>) -> Var<T> {
        let v = ops::upsample2x(&x.value);
        self.wrap(v, &[x.id], || Op::Upsample {
            x: x.id,
            in_shape: x.shape(),
        })
    }

    pub fn pixel_shuffle(&self, x: &Var<T>) -> Result<Var<T>> {
        if !x.shape()[1].is_multiple_of(4) {
            return Err(TapError::shape(format!(
                "pixel shuffle needs channels divisible by 4, got {}",
                x.shape()[1]
            )));
        }
        let v = ops::pixel_shuffle(&x.value);
        Ok(self.wrap(v, &[x.id], || Op::PixelShuffle(x.id)))
    }

    pub fn layer_norm2d(&self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let c = x.shape()[1];
        if w.value.len() != c || b.value.len() != c {
            return Err(TapError::shape("layer norm affine size"));
        }
        let (v, xhat, rstd) = ops::norm::layer_norm2d(&x.value, &w.value, &b.value);
        Ok(self.wrap(v, &[x.id, w.id, b.id], || Op::LayerNorm {
            x: x.id,
            w: w.id,
            b: b.id,
            xhat,
            rstd,
            wv: w.value.clone(),
        }))
    }

    /// Spatial mean per sample and channel: `N x C x 1 x 1`.
    pub fn global_avg_pool(&self, x: &Var<T>) -> Var<T> {
        let [n, c, h, w] = x.shape();
        let inv = T::one() / T::lit((h * w) as f64);
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                data.push(x.value.plane(i, j).iter().copied().sum::<T>() * inv);
            }
        }
        let v = Tensor::from_vec([n, c, 1, 1], data).expect("pool shape");
        self.wrap(v, &[x.id], || Op::AvgPool {
            x: x.id,
            in_shape: x.shape(),
        })
    }

    /// Mean absolute error against a constant target, as a 1x1x1x1 value.
    pub fn l1_loss(&self, pred: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
        if pred.shape() != target.shape() {
            return Err(TapError::shape(format!(
                "l1 loss {:?} vs {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        let count = T::lit(target.len() as f64);
        let mut total = T::zero();
        let mut sign = Tensor::zeros(target.shape());
        for ((s, &p), &t) in sign.data_mut().iter_mut().zip(pred.value.data()).zip(target.data()) {
            let d = p - t;
            total += d.abs();
            *s = if d > T::zero() {
                T::one() / count
            } else if d < T::zero() {
                -T::one() / count
            } else {
                T::zero()
            };
        }
        let v = Tensor::from_vec([1, 1, 1, 1], vec![total / count])?;
        Ok(self.wrap(v, &[pred.id], || Op::L1 {
            pred: pred.id,
            sign,
        }))
    }

    /// Back-propagate from a scalar `out` (seeded with 1) or any `out` with
    /// an explicit seed gradient.
    pub fn backward(&self, out: &Var<T>) -> Result<Grads<T>> {
        let seed = Tensor::full(out.shape(), T::one());
        self.backward_with(out, seed)
    }

    pub fn backward_with(&self, out: &Var<T>, seed: Tensor<T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = out.id else {
            return Ok(Grads { grads });
        };
        if seed.shape() != out.shape() {
            return Err(TapError::shape("seed gradient shape"));
        }
        grads[root] = Some(seed);
        for i in (0..=root).rev() {
            if matches!(nodes[i], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut send = |id: NodeId, t: Tensor<T>| {
                if let Some(j) = id {
                    accumulate(&mut grads[j], t);
                }
            };
            match &nodes[i] {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if b.is_some() {
                        send(*b, g.clone());
                    }
                    send(*a, g);
                }
                Op::Mul { a, b, av, bv } => {
                    if a.is_some() {
                        send(*a, g.zip_map(bv, |x, y| x * y));
                    }
                    if b.is_some() {
                        send(*b, g.zip_map(av, |x, y| x * y));
                    }
                }
                Op::ScaleChannels { x, s, xv, sv } => {
                    let [n, c, h, w] = xv.shape();
                    let hw = h * w;
                    let sn = sv.shape()[0];
                    if x.is_some() {
                        let mut dx = g.clone();
                        for b in 0..n {
                            for j in 0..c {
                                let k = sv.data()[(if sn == 1 { 0 } else { b }) * c + j];
                                let base = (b * c + j) * hw;
                                for e in &mut dx.data_mut()[base..base + hw] {
                                    *e *= k;
                                }
                            }
                        }
                        send(*x, dx);
                    }
                    if s.is_some() {
                        let mut ds = Tensor::zeros(sv.shape());
                        for b in 0..n {
                            for j in 0..c {
                                let base = (b * c + j) * hw;
                                let acc: T = g.data()[base..base + hw]
                                    .iter()
                                    .zip(&xv.data()[base..base + hw])
                                    .map(|(&a, &b)| a * b)
                                    .sum();
                                ds.data_mut()[(if sn == 1 { 0 } else { b }) * c + j] += acc;
                            }
                        }
                        send(*s, ds);
                    }
                }
                Op::Scalar(x, k) => send(*x, g.map(|e| e * *k)),
                Op::LeakyRelu { x, xv, slope } => {
                    send(*x, g.zip_map(xv, |gg, v| if v >= T::zero() { gg } else { gg * *slope }))
                }
                Op::Clamp { x, xv, bound } => send(
                    *x,
                    g.zip_map(xv, |gg, v| if v.abs() <= *bound { gg } else { T::zero() }),
                ),
                Op::Concat(parts) => {
                    let [n, _, h, w] = g.shape();
                    let hw = h * w;
                    let mut start = 0;
                    for &(id, c) in parts {
                        if id.is_some() {
                            let mut data = Vec::with_capacity(n * c * hw);
                            for b in 0..n {
                                data.extend_from_slice(&g.item(b)[start * hw..(start + c) * hw]);
                            }
                            send(id, Tensor::from_vec([n, c, h, w], data)?);
                        }
                        start += c;
                    }
                }
                Op::Slice { x, start, in_shape } => {
                    let [n, _, h, w] = *in_shape;
                    let hw = h * w;
                    let len = g.shape()[1];
                    let mut dx = Tensor::zeros(*in_shape);
                    for b in 0..n {
                        dx.item_mut(b)[start * hw..(start + len) * hw].copy_from_slice(g.item(b));
                    }
                    send(*x, dx);
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    xv,
                    wv,
                    spec,
                } => {
                    let gr = ops::conv2d_backward(
                        xv,
                        wv,
                        &g,
                        *spec,
                        [x.is_some(), w.is_some(), b.is_some()],
                    )?;
                    if let Some(t) = gr.dx {
                        send(*x, t);
                    }
                    if let Some(t) = gr.dw {
                        send(*w, t);
                    }
                    if let Some(t) = gr.db {
                        send(*b, t);
                    }
                }
                Op::Deform {
                    x,
                    off,
                    w,
                    b,
                    xv,
                    offv,
                    wv,
                } => {
                    let gr = ops::deform_conv2d_backward(
                        xv,
                        offv,
                        wv,
                        &g,
                        [x.is_some(), off.is_some(), w.is_some(), b.is_some()],
                    )?;
                    if let Some(t) = gr.dx {
                        send(*x, t);
                    }
                    if let Some(t) = gr.doffsets {
                        send(*off, t);
                    }
                    if let Some(t) = gr.dw {
                        send(*w, t);
                    }
                    if let Some(t) = gr.db {
                        send(*b, t);
                    }
                }
                Op::Upsample { x, in_shape } => {
                    send(*x, ops::resample::upsample2x_backward(&g, *in_shape))
                }
                Op::PixelShuffle(x) => send(*x, ops::resample::pixel_unshuffle(&g)),
                Op::LayerNorm {
                    x,
                    w,
                    b,
                    xhat,
                    rstd,
                    wv,
                } => {
                    let (dx, dw, db) = ops::norm::layer_norm2d_backward(&g, xhat, rstd, wv);
                    send(*x, dx);
                    send(*w, dw);
                    send(*b, db);
                }
                Op::AvgPool { x, in_shape } => {
                    let [n, c, h, w] = *in_shape;
                    let inv = T::one() / T::lit((h * w) as f64);
                    let dx = Tensor::from_fn(*in_shape, |[b, j, _, _]| g.data()[b * c + j] * inv);
                    let _ = n;
                    send(*x, dx);
                }
                Op::L1 { pred, sign } => {
                    let k = g.data()[0];
                    send(*pred, sign.map(|s| s * k));
                }
            }
        }
        Ok(Grads { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect()).unwrap()
    }

    /// Scalar probe loss <y, p> so every output element gets a distinct seed.
    fn probe_grad(
        build: &dyn Fn(&Tape<f64>, &Var<f64>) -> Var<f64>,
        x: &Tensor<f64>,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = build(&tape, &xv);
        let probe = Tensor::from_fn(y.shape(), |[a, b, c, d]| ((a + 2 * b + 3 * c + 5 * d) % 7) as f64 - 3.0);
        let grads = tape.backward_with(&y, probe.clone()).unwrap();
        let analytic = grads.get(&xv).unwrap().clone();
        let eps = 1e-6;
        let mut fd = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let tape = Tape::inference();
                let y = build(&tape, &tape.constant(xp));
                y.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            fd.data_mut()[i] = (eval(eps) - eval(-eps)) / (2.0 * eps);
        }
        (analytic, fd)
    }

    #[test]
    fn elementwise_and_structural_ops_have_correct_gradients() {
        let x = t([2, 4, 3, 4], |i| ((i * 37) % 19) as f64 / 7.0 - 1.3);
        let cases: Vec<Box<dyn Fn(&Tape<f64>, &Var<f64>) -> Var<f64>>> = vec![
            Box::new(|tp, v| tp.mul(v, v).unwrap()),
            Box::new(|tp, v| tp.leaky_relu(v, 0.1)),
            Box::new(|tp, v| {
                let s = tp.global_avg_pool(v);
                tp.scale_channels(v, &s).unwrap()
            }),
            Box::new(|tp, v| {
                let a = tp.slice_channels(v, 0, 2).unwrap();
                let b = tp.slice_channels(v, 2, 2).unwrap();
                let m = tp.mul(&a, &b).unwrap();
                tp.concat_channels(&[&m, v]).unwrap()
            }),
            Box::new(|tp, v| tp.upsample2x(v)),
            Box::new(|tp, v| tp.pixel_shuffle(v).unwrap()),
            Box::new(|tp, v| {
                let w = tp.constant(Tensor::channel_vector(&[1.0, 0.5, -0.7, 2.0]));
                let b = tp.constant(Tensor::channel_vector(&[0.1, 0.2, 0.3, 0.4]));
                tp.layer_norm2d(v, &w, &b).unwrap()
            }),
        ];
        for (k, build) in cases.iter().enumerate() {
            let (a, fd) = probe_grad(build.as_ref(), &x);
            assert!(a.max_abs_diff(&fd) < 1e-6, "case {k}: {}", a.max_abs_diff(&fd));
        }
    }

    #[test]
    fn frozen_inputs_record_nothing() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let b = tape.add(&a, &a).unwrap();
        assert!(!b.requires_grad());
        assert!(tape.is_empty());
        let inf = Tape::<f32>::inference();
        let l = inf.leaf(Tensor::full([1, 1, 1, 1], 2.0));
        assert!(!l.requires_grad());
    }

    #[test]
    fn l1_gradient_is_sign_over_count() {
        let tape = Tape::<f64>::new();
        let p = tape.leaf(Tensor::from_vec([1, 1, 1, 4], vec![1.0, -1.0, 0.5, 0.0]).unwrap());
        let target = Tensor::zeros([1, 1, 1, 4]);
        let loss = tape.l1_loss(&p, &target).unwrap();
        assert_eq!(loss.value().data()[0], 2.5 / 4.0);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&p).unwrap().data(), &[0.25, -0.25, 0.25, 0.0]);
    }
}
