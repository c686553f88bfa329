//! Layers whose weights live in a [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::Result;
use crate::ops::ConvSpec;
use crate::params::{uniform_init, Ctx, ParamStore};
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub spec: ConvSpec,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            k,
            spec: ConvSpec::same(k),
            bias: true,
        }
    }

    pub fn strided(mut self, stride: usize, pad: usize) -> Self {
        self.spec.stride = stride;
        self.spec.pad = pad;
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.spec.groups = self.cin;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin / self.spec.groups, self.k, self.k]
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let shape = self.weight_shape();
        let fan_in = shape[1] * self.k * self.k;
        store.insert(self.weight_name(), uniform_init(rng, shape, fan_in));
        if self.bias {
            store.insert(self.bias_name(), uniform_init(rng, [1, self.cout, 1, 1], fan_in));
        }
    }

    pub fn init_zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.insert(self.weight_name(), Tensor::zeros(self.weight_shape()));
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros([1, self.cout, 1, 1]));
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = ctx.p(&self.weight_name())?;
        let b = if self.bias {
            Some(ctx.p(&self.bias_name())?)
        } else {
            None
        };
        ctx.tape.conv2d(x, &w, b.as_ref(), self.spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// LayerNorm, pointwise/depthwise convs, simple gate, channel attention.
    Naf,
    /// conv3x3 - leaky relu - conv3x3 with identity skip.
    Plain,
}

#[derive(Clone, Debug)]
pub enum Block {
    Naf(NafBlock),
    Plain(PlainBlock),
}

impl Block {
    pub fn new(kind: BlockKind, name: &str, c: usize) -> Self {
        match kind {
            BlockKind::Naf => Block::Naf(NafBlock::new(name, c)),
            BlockKind::Plain => Block::Plain(PlainBlock::new(name, c)),
        }
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        match self {
            Block::Naf(b) => b.init(store, rng),
            Block::Plain(b) => b.init(store, rng),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Block::Naf(b) => b.forward(ctx, x),
            Block::Plain(b) => b.forward(ctx, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NafBlock {
    name: String,
    c: usize,
    conv1: Conv,
    conv2: Conv,
    sca: Conv,
    conv3: Conv,
    conv4: Conv,
    conv5: Conv,
}

impl NafBlock {
    pub fn new(name: &str, c: usize) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        NafBlock {
            name: name.to_string(),
            c,
            conv1: Conv::new(n("conv1"), c, 2 * c, 1),
            conv2: Conv::new(n("conv2"), 2 * c, 2 * c, 3).depthwise(),
            sca: Conv::new(n("sca"), c, c, 1),
            conv3: Conv::new(n("conv3"), c, c, 1),
            conv4: Conv::new(n("conv4"), c, 2 * c, 1),
            conv5: Conv::new(n("conv5"), c, c, 1),
        }
    }

    fn pname(&self, s: &str) -> String {
        format!("{}.{s}", self.name)
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = self.c;
        for norm in ["norm1", "norm2"] {
            store.insert(self.pname(&format!("{norm}.weight")), Tensor::full([1, c, 1, 1], T::one()));
            store.insert(self.pname(&format!("{norm}.bias")), Tensor::zeros([1, c, 1, 1]));
        }
        for conv in [&self.conv1, &self.conv2, &self.sca, &self.conv3, &self.conv4, &self.conv5] {
            conv.init(store, rng);
        }
        store.insert(self.pname("beta"), Tensor::zeros([1, c, 1, 1]));
        store.insert(self.pname("gamma"), Tensor::zeros([1, c, 1, 1]));
    }

    fn simple_gate<T: Real>(ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let half = x.shape()[1] / 2;
        let a = ctx.tape.slice_channels(x, 0, half)?;
        let b = ctx.tape.slice_channels(x, half, half)?;
        ctx.tape.mul(&a, &b)
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, inp: &Var<T>) -> Result<Var<T>> {
        let t = ctx.tape;
        let x = t.layer_norm2d(
            inp,
            &ctx.p(&self.pname("norm1.weight"))?,
            &ctx.p(&self.pname("norm1.bias"))?,
        )?;
        let x = self.conv1.forward(ctx, &x)?;
        let x = self.conv2.forward(ctx, &x)?;
        let x = Self::simple_gate(ctx, &x)?;
        let att = self.sca.forward(ctx, &t.global_avg_pool(&x))?;
        let x = t.scale_channels(&x, &att)?;
        let x = self.conv3.forward(ctx, &x)?;
        let y = t.add(inp, &t.scale_channels(&x, &ctx.p(&self.pname("beta"))?)?)?;

        let x = t.layer_norm2d(
            &y,
            &ctx.p(&self.pname("norm2.weight"))?,
            &ctx.p(&self.pname("norm2.bias"))?,
        )?;
        let x = self.conv4.forward(ctx, &x)?;
        let x = Self::simple_gate(ctx, &x)?;
        let x = self.conv5.forward(ctx, &x)?;
        t.add(&y, &t.scale_channels(&x, &ctx.p(&self.pname("gamma"))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct PlainBlock {
    conv1: Conv,
    conv2: Conv,
}

impl PlainBlock {
    pub fn new(name: &str, c: usize) -> Self {
        PlainBlock {
            conv1: Conv::new(format!("{name}.conv1"), c, c, 3),
            conv2: Conv::new(format!("{name}.conv2"), c, c, 3),
        }
    }

    pub fn init<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
    }

    pub fn forward<T: Real>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.conv1.forward(ctx, x)?;
        let h = ctx.tape.leaky_relu(&h, T::lit(LEAKY_SLOPE));
        let h = self.conv2.forward(ctx, &h)?;
        ctx.tape.add(x, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_of(block: &Block, store: &ParamStore<f64>, x: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store);
        let y = block.forward(&ctx, &tape.constant(x.clone())).unwrap();
        y.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    }

    fn check_block_gradients(kind: BlockKind) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = Block::new(kind, "b", 4);
        let mut store = ParamStore::<f64>::new();
        block.init(&mut store, &mut rng);
        // Nonzero gates so every branch contributes.
        for g in ["b.beta", "b.gamma"] {
            if store.contains(g) {
                store.set(g, Tensor::from_fn([1, 4, 1, 1], |_| rng.random_range(0.5..1.5))).unwrap();
            }
        }
        let x = Tensor::from_fn([2, 4, 5, 5], |_| rng.random_range(-1.0..1.0));
        let probe = Tensor::from_fn([2, 4, 5, 5], |_| rng.random_range(-1.0..1.0));

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let y = block.forward(&ctx, &tape.constant(x.clone())).unwrap();
        let grads = ctx.gradients(&tape.backward_with(&y, probe.clone()).unwrap());

        let eps = 1e-5;
        for name in store.names().cloned().collect::<Vec<_>>() {
            let g = &grads[&name];
            let base = store.get(&name).unwrap().clone();
            for i in [0, base.len() / 2, base.len() - 1] {
                let mut s = store.clone();
                s.get_mut(&name).unwrap().data_mut()[i] += eps;
                let lp = loss_of(&block, &s, &x, &probe);
                s.get_mut(&name).unwrap().data_mut()[i] -= 2.0 * eps;
                let lm = loss_of(&block, &s, &x, &probe);
                let fd = (lp - lm) / (2.0 * eps);
                let an = g.data()[i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{name}[{i}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn naf_block_gradients() {
        check_block_gradients(BlockKind::Naf);
    }

    #[test]
    fn plain_block_gradients() {
        check_block_gradients(BlockKind::Plain);
    }

    #[test]
    fn fresh_naf_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = Block::new(BlockKind::Naf, "b", 8);
        let mut store = ParamStore::<f32>::new();
        block.init(&mut store, &mut rng);
        let x = Tensor::from_fn([1, 8, 6, 6], |_| rng.random_range(-1.0..1.0));
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &store);
        let y = block.forward(&ctx, &tape.constant(x.clone())).unwrap();
        assert_eq!(y.value(), &x);
    }
}
