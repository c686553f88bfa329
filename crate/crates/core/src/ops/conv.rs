//! Grouped 2-D convolution via im2col + GEMM, with a direct path for
//! depthwise kernels.

use rayon::prelude::*;

use crate::error::{Result, TapError};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, "same" padding for an odd kernel.
    pub fn same(k: usize) -> Self {
        ConvSpec {
            stride: 1,
            pad: k / 2,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn out_dim(&self, len: usize, k: usize) -> usize {
        (len + 2 * self.pad - k) / self.stride + 1
    }
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub cin_g: usize,
    pub cout_g: usize,
}

pub(crate) fn conv_geometry<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    spec: ConvSpec,
) -> Result<ConvGeom> {
    let [n, cin, h, w] = x.shape();
    let [cout, cin_g, kh, kw] = weight.shape();
    if kh != kw {
        return Err(TapError::shape(format!("non-square kernel {kh}x{kw}")));
    }
    let g = spec.groups.max(1);
    if cin % g != 0 || cout % g != 0 || cin / g != cin_g {
        return Err(TapError::shape(format!(
            "conv weight {:?} incompatible with {cin} input channels in {g} groups",
            weight.shape()
        )));
    }
    if h + 2 * spec.pad < kh || w + 2 * spec.pad < kw {
        return Err(TapError::shape(format!(
            "input {h}x{w} smaller than kernel {kh}"
        )));
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        k: kh,
        ho: spec.out_dim(h, kh),
        wo: spec.out_dim(w, kw),
        cin_g,
        cout_g: cout / g,
    })
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let l = ho * wo;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * l..][..l];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let l = ho * wo;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * l..][..l];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom, spec: ConvSpec) -> bool {
    g.k == 1 && spec.stride == 1 && spec.pad == 0
}

fn is_depthwise(g: &ConvGeom) -> bool {
    g.cin_g == 1 && g.cout_g == 1
}

pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, weight, spec)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(TapError::shape(format!(
                "bias of {} for {} output channels",
                b.len(),
                g.cout
            )));
        }
    }
    let groups = spec.groups.max(1);
    let l = g.ho * g.wo;
    let kk = g.k * g.k;
    let mut out = Tensor::zeros([g.n, g.cout, g.ho, g.wo]);
    let wdata = weight.data();
    out.data_mut()
        .par_chunks_mut(g.cout * l)
        .enumerate()
        .for_each(|(i, y)| {
            let xi = x.item(i);
            if is_depthwise(&g) {
                depthwise_forward(xi, wdata, &g, spec, y);
            } else {
                let mut cols = Vec::new();
                for grp in 0..groups {
                    let xs = &xi[grp * g.cin_g * g.h * g.w..(grp + 1) * g.cin_g * g.h * g.w];
                    let colref: &[T] = if is_pointwise(&g, spec) {
                        xs
                    } else {
                        cols.resize(g.cin_g * kk * l, T::zero());
                        im2col(xs, g.cin_g, g.h, g.w, g.k, spec, g.ho, g.wo, &mut cols);
                        &cols
                    };
                    let wg = &wdata[grp * g.cout_g * g.cin_g * kk..(grp + 1) * g.cout_g * g.cin_g * kk];
                    let yg = &mut y[grp * g.cout_g * l..(grp + 1) * g.cout_g * l];
                    T::gemm(
                        g.cout_g,
                        g.cin_g * kk,
                        l,
                        T::one(),
                        wg,
                        false,
                        colref,
                        false,
                        T::zero(),
                        yg,
                    );
                }
            }
            if let Some(b) = bias {
                for (co, chunk) in y.chunks_mut(l).enumerate() {
                    let bv = b.data()[co];
                    for v in chunk {
                        *v += bv;
                    }
                }
            }
        });
    Ok(out)
}

fn depthwise_forward<T: Real>(x: &[T], w: &[T], g: &ConvGeom, spec: ConvSpec, y: &mut [T]) {
    let kk = g.k * g.k;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let wc = &w[c * kk..(c + 1) * kk];
        let yc = &mut y[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let wv = wc[ky * g.k + kx];
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut yc[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d += wv * src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    spec: ConvSpec,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let kk = g.k * g.k;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let wc = &w[c * kk..(c + 1) * kk];
        let gyc = &gy[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let wv = wc[ky * g.k + kx];
                let mut acc = T::zero();
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let row = iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let gv = gyc[oy * g.wo + ox];
                        acc += gv * plane[row + ix as usize];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[c * g.h * g.w + row + ix as usize] += wv * gv;
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[c * kk + ky * g.k + kx] += acc;
                }
            }
        }
    }
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias. Weight and bias
/// gradients are accumulated per sample and reduced in sample order.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    spec: ConvSpec,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(x, weight, spec)?;
    let groups = spec.groups.max(1);
    let l = g.ho * g.wo;
    let kk = g.k * g.k;
    let wdata = weight.data();
    let [need_dx, need_dw, need_db] = need;

    let per_item: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.n)
        .into_par_iter()
        .map(|i| {
            let xi = x.item(i);
            let gyi = gy.item(i);
            let mut dx = need_dx.then(|| vec![T::zero(); g.cin * g.h * g.w]);
            let mut dw = need_dw.then(|| vec![T::zero(); weight.len()]);
            if is_depthwise(&g) {
                depthwise_backward(xi, wdata, gyi, &g, spec, dx.as_deref_mut(), dw.as_deref_mut());
                return (dx, dw);
            }
            let mut cols = Vec::new();
            let mut dcols = Vec::new();
            for grp in 0..groups {
                let xs_range = grp * g.cin_g * g.h * g.w..(grp + 1) * g.cin_g * g.h * g.w;
                let wg_range = grp * g.cout_g * g.cin_g * kk..(grp + 1) * g.cout_g * g.cin_g * kk;
                let gyg = &gyi[grp * g.cout_g * l..(grp + 1) * g.cout_g * l];
                let pointwise = is_pointwise(&g, spec);
                if let Some(dw) = dw.as_mut() {
                    let colref: &[T] = if pointwise {
                        &xi[xs_range.clone()]
                    } else {
                        cols.resize(g.cin_g * kk * l, T::zero());
                        im2col(&xi[xs_range.clone()], g.cin_g, g.h, g.w, g.k, spec, g.ho, g.wo, &mut cols);
                        &cols
                    };
                    T::gemm(
                        g.cout_g,
                        l,
                        g.cin_g * kk,
                        T::one(),
                        gyg,
                        false,
                        colref,
                        true,
                        T::one(),
                        &mut dw[wg_range.clone()],
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let wg = &wdata[wg_range];
                    if pointwise {
                        T::gemm(
                            g.cin_g,
                            g.cout_g,
                            l,
                            T::one(),
                            wg,
                            true,
                            gyg,
                            false,
                            T::one(),
                            &mut dx[xs_range],
                        );
                    } else {
                        dcols.resize(g.cin_g * kk * l, T::zero());
                        T::gemm(
                            g.cin_g * kk,
                            g.cout_g,
                            l,
                            T::one(),
                            wg,
                            true,
                            gyg,
                            false,
                            T::zero(),
                            &mut dcols,
                        );
                        col2im(&dcols, g.cin_g, g.h, g.w, g.k, spec, g.ho, g.wo, &mut dx[xs_range]);
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let dx = if need_dx {
        let mut data = Vec::with_capacity(x.len());
        for (d, _) in &per_item {
            data.extend_from_slice(d.as_ref().unwrap());
        }
        Some(Tensor::from_vec(x.shape(), data)?)
    } else {
        None
    };
    let dw = if need_dw {
        let mut acc = Tensor::zeros(weight.shape());
        for (_, d) in &per_item {
            for (a, &v) in acc.data_mut().iter_mut().zip(d.as_ref().unwrap()) {
                *a += v;
            }
        }
        Some(acc)
    } else {
        None
    };
    let db = need_db.then(|| {
        let mut acc = vec![T::zero(); g.cout];
        for i in 0..g.n {
            for (co, a) in acc.iter_mut().enumerate() {
                *a += gy.plane(i, co).iter().copied().sum::<T>();
            }
        }
        Tensor::channel_vector(&acc)
    });
    Ok(ConvGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: ConvSpec) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let [cout, cin_g, k, _] = w.shape();
        let cout_g = cout / s.groups;
        let ho = s.out_dim(h, k);
        let wo = s.out_dim(wd, k);
        Tensor::from_fn([n, cout, ho, wo], |[i, co, oy, ox]| {
            let grp = co / cout_g;
            let mut acc = b.map(|b| b.data()[co]).unwrap_or(0.0);
            for ci in 0..cin_g {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.at([co, ci, ky, kx])
                                * x.at([i, grp * cin_g + ci, iy as usize, ix as usize]);
                        }
                    }
                }
            }
            let _ = cin;
            acc
        })
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_naive_for_all_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            (4, 6, 3, ConvSpec::same(3)),
            (4, 6, 1, ConvSpec { stride: 1, pad: 0, groups: 1 }),
            (4, 8, 2, ConvSpec { stride: 2, pad: 0, groups: 1 }),
            (6, 6, 3, ConvSpec::same(3).with_groups(6)),
            (4, 6, 3, ConvSpec::same(3).with_groups(2)),
        ];
        for (cin, cout, k, spec) in cases {
            let x = rand_tensor(&mut rng, [2, cin, 6, 8]);
            let w = rand_tensor(&mut rng, [cout, cin / spec.groups, k, k]);
            let b = rand_tensor(&mut rng, [1, cout, 1, 1]);
            let got = conv2d(&x, &w, Some(&b), spec).unwrap();
            let want = naive_conv(&x, &w, Some(&b), spec);
            assert!(got.max_abs_diff(&want) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cases = [
            (3, 4, 3, ConvSpec::same(3)),
            (3, 4, 1, ConvSpec { stride: 1, pad: 0, groups: 1 }),
            (2, 4, 2, ConvSpec { stride: 2, pad: 0, groups: 1 }),
            (4, 4, 3, ConvSpec::same(3).with_groups(4)),
        ];
        for (cin, cout, k, spec) in cases {
            let x = rand_tensor(&mut rng, [2, cin, 4, 4]);
            let w = rand_tensor(&mut rng, [cout, cin / spec.groups, k, k]);
            let probe = rand_tensor(&mut rng, [2, cout, spec.out_dim(4, k), spec.out_dim(4, k)]);
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>| {
                let y = conv2d(x, w, None, spec).unwrap();
                y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let grads = conv2d_backward(&x, &w, &probe, spec, [true, true, true]).unwrap();
            let eps = 1e-6;
            for idx in [0, 5, x.len() - 1] {
                let mut xp = x.clone();
                xp.data_mut()[idx] += eps;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= eps;
                let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * eps);
                assert!((fd - grads.dx.as_ref().unwrap().data()[idx]).abs() < 1e-7);
            }
            for idx in [0, w.len() / 2, w.len() - 1] {
                let mut wp = w.clone();
                wp.data_mut()[idx] += eps;
                let mut wm = w.clone();
                wm.data_mut()[idx] -= eps;
                let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * eps);
                assert!((fd - grads.dw.as_ref().unwrap().data()[idx]).abs() < 1e-7);
            }
        }
    }
}
