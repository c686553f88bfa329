//! Deformable convolution (v1, no modulation mask).
//!
//! For each output position `p` and kernel tap `k`, the input is sampled at
//! `p + p_k + offset_k(p)` by bilinear interpolation with zero padding, and
//! the samples are contracted with the kernel. Offsets are laid out per
//! deformable group, per tap, as `(dy, dx)` pairs: channel
//! `g * 2K^2 + 2k` holds `dy` and `g * 2K^2 + 2k + 1` holds `dx`.

use rayon::prelude::*;

use crate::error::{Result, TapError};
use crate::tensor::{Real, Tensor};

/// Bilinear sample of a single `h x w` plane at fractional `(y, x)`; corners
/// outside the plane read as zero.
#[inline]
pub fn bilinear<T: Real>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    let (v, _, _) = bilinear_with_grad(plane, h, w, y, x);
    v
}

/// Value and partial derivatives w.r.t. `y` and `x`.
#[inline]
pub fn bilinear_with_grad<T: Real>(plane: &[T], h: usize, w: usize, y: T, x: T) -> (T, T, T) {
    let y0f = y.floor();
    let x0f = x.floor();
    let ly = y - y0f;
    let lx = x - x0f;
    let hy = T::one() - ly;
    let hx = T::one() - lx;
    let y0 = y0f.to_isize().unwrap_or(isize::MIN / 2);
    let x0 = x0f.to_isize().unwrap_or(isize::MIN / 2);
    let get = |yy: isize, xx: isize| -> T {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            plane[yy as usize * w + xx as usize]
        } else {
            T::zero()
        }
    };
    let v1 = get(y0, x0);
    let v2 = get(y0, x0 + 1);
    let v3 = get(y0 + 1, x0);
    let v4 = get(y0 + 1, x0 + 1);
    let val = hy * hx * v1 + hy * lx * v2 + ly * hx * v3 + ly * lx * v4;
    let dy = hx * (v3 - v1) + lx * (v4 - v2);
    let dx = hy * (v2 - v1) + ly * (v4 - v3);
    (val, dy, dx)
}

#[inline]
fn bilinear_scatter<T: Real>(plane: &mut [T], h: usize, w: usize, y: T, x: T, g: T) {
    let y0f = y.floor();
    let x0f = x.floor();
    let ly = y - y0f;
    let lx = x - x0f;
    let hy = T::one() - ly;
    let hx = T::one() - lx;
    let y0 = y0f.to_isize().unwrap_or(isize::MIN / 2);
    let x0 = x0f.to_isize().unwrap_or(isize::MIN / 2);
    let mut put = |yy: isize, xx: isize, wgt: T| {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            plane[yy as usize * w + xx as usize] += wgt * g;
        }
    };
    put(y0, x0, hy * hx);
    put(y0, x0 + 1, hy * lx);
    put(y0 + 1, x0, ly * hx);
    put(y0 + 1, x0 + 1, ly * lx);
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    groups: usize,
}

impl Geom {
    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn l(&self) -> usize {
        self.h * self.w
    }
}

fn geometry<T: Real>(x: &Tensor<T>, offsets: &Tensor<T>, weight: &Tensor<T>) -> Result<Geom> {
    let [n, c, h, w] = x.shape();
    let [cout, cw, k, k2] = weight.shape();
    if k != k2 || k % 2 == 0 {
        return Err(TapError::config(format!(
            "deformable kernel must be square and odd, got {k}x{k2}"
        )));
    }
    if cw != c {
        return Err(TapError::config(format!(
            "deformable kernel expects {cw} input channels, features have {c}"
        )));
    }
    let [on, oc, oh, ow] = offsets.shape();
    if on != n || oh != h || ow != w {
        return Err(TapError::shape(format!(
            "offset field {:?} does not cover features {:?}",
            offsets.shape(),
            x.shape()
        )));
    }
    if oc == 0 || oc % (2 * k * k) != 0 {
        return Err(TapError::config(format!(
            "offset field has {oc} channels, expected a multiple of 2*{k}^2"
        )));
    }
    let groups = oc / (2 * k * k);
    if c % groups != 0 {
        return Err(TapError::config(format!(
            "{groups} deformable groups do not divide {c} feature channels"
        )));
    }
    Ok(Geom {
        c,
        h,
        w,
        cout,
        k,
        groups,
    })
}

/// Sample position of tap `(ky, kx)` for output pixel `(oy, ox)`.
#[inline]
fn sample_pos<T: Real>(g: &Geom, oy: usize, ox: usize, ky: usize, kx: usize, dy: T, dx: T) -> (T, T) {
    let py = T::lit((oy as isize - g.pad() + ky as isize) as f64) + dy;
    let px = T::lit((ox as isize - g.pad() + kx as isize) as f64) + dx;
    (py, px)
}

fn deform_im2col<T: Real>(x: &[T], off: &[T], g: &Geom, cols: &mut [T]) {
    let l = g.l();
    let kk = g.k * g.k;
    let cpg = g.c / g.groups;
    for c in 0..g.c {
        let grp = c / cpg;
        let plane = &x[c * l..(c + 1) * l];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let tap = ky * g.k + kx;
                let oy_ch = &off[(grp * 2 * kk + 2 * tap) * l..][..l];
                let ox_ch = &off[(grp * 2 * kk + 2 * tap + 1) * l..][..l];
                let row = &mut cols[(c * kk + tap) * l..][..l];
                for oy in 0..g.h {
                    for ox in 0..g.w {
                        let p = oy * g.w + ox;
                        let (sy, sx) = sample_pos(g, oy, ox, ky, kx, oy_ch[p], ox_ch[p]);
                        row[p] = bilinear(plane, g.h, g.w, sy, sx);
                    }
                }
            }
        }
    }
}

/// Forward deformable convolution: stride 1, "same" padding.
pub fn deform_conv2d<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = geometry(x, offsets, weight)?;
    let l = g.l();
    let kk = g.k * g.k;
    let mut out = Tensor::zeros([x.n(), g.cout, g.h, g.w]);
    out.data_mut()
        .par_chunks_mut(g.cout * l)
        .enumerate()
        .for_each(|(i, y)| {
            let mut cols = vec![T::zero(); g.c * kk * l];
            deform_im2col(x.item(i), offsets.item(i), &g, &mut cols);
            T::gemm(
                g.cout,
                g.c * kk,
                l,
                T::one(),
                weight.data(),
                false,
                &cols,
                false,
                T::zero(),
                y,
            );
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

pub struct DeformGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub doffsets: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

/// Gradients of [`deform_conv2d`] w.r.t. features, offsets, weight and bias.
pub fn deform_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
    need: [bool; 4],
) -> Result<DeformGrads<T>> {
    let g = geometry(x, offsets, weight)?;
    let [need_dx, need_doff, need_dw, need_db] = need;
    let l = g.l();
    let kk = g.k * g.k;
    let cpg = g.c / g.groups;

    type Item<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);
    let per_item: Vec<Item<T>> = (0..x.n())
        .into_par_iter()
        .map(|i| {
            let xi = x.item(i);
            let oi = offsets.item(i);
            let gyi = gy.item(i);
            let dw = need_dw.then(|| {
                let mut cols = vec![T::zero(); g.c * kk * l];
                deform_im2col(xi, oi, &g, &mut cols);
                let mut dw = vec![T::zero(); weight.len()];
                T::gemm(g.cout, l, g.c * kk, T::one(), gyi, false, &cols, true, T::zero(), &mut dw);
                dw
            });
            if !need_dx && !need_doff {
                return (None, None, dw);
            }
            let mut dcols = vec![T::zero(); g.c * kk * l];
            T::gemm(g.c * kk, g.cout, l, T::one(), weight.data(), true, gyi, false, T::zero(), &mut dcols);
            let mut dx = need_dx.then(|| vec![T::zero(); g.c * l]);
            let mut doff = need_doff.then(|| vec![T::zero(); oi.len()]);
            for c in 0..g.c {
                let grp = c / cpg;
                let plane = &xi[c * l..(c + 1) * l];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let tap = ky * g.k + kx;
                        let ych = (grp * 2 * kk + 2 * tap) * l;
                        let xch = ych + l;
                        let row = &dcols[(c * kk + tap) * l..][..l];
                        for oy in 0..g.h {
                            for ox in 0..g.w {
                                let p = oy * g.w + ox;
                                let gv = row[p];
                                let (sy, sx) = sample_pos(&g, oy, ox, ky, kx, oi[ych + p], oi[xch + p]);
                                if let Some(dx) = dx.as_mut() {
                                    bilinear_scatter(&mut dx[c * l..(c + 1) * l], g.h, g.w, sy, sx, gv);
                                }
                                if let Some(doff) = doff.as_mut() {
                                    let (_, dsy, dsx) = bilinear_with_grad(plane, g.h, g.w, sy, sx);
                                    doff[ych + p] += gv * dsy;
                                    doff[xch + p] += gv * dsx;
                                }
                            }
                        }
                    }
                }
            }
            (dx, doff, dw)
        })
        .collect();

    let gather = |sel: fn(&Item<T>) -> Option<&Vec<T>>, shape: [usize; 4]| -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for it in &per_item {
            data.extend_from_slice(sel(it).unwrap());
        }
        Tensor::from_vec(shape, data)
    };
    let dx = if need_dx {
        Some(gather(|it| it.0.as_ref(), x.shape())?)
    } else {
        None
    };
    let doffsets = if need_doff {
        Some(gather(|it| it.1.as_ref(), offsets.shape())?)
    } else {
        None
    };
    let dw = need_dw.then(|| {
        let mut acc = Tensor::zeros(weight.shape());
        for it in &per_item {
            for (a, &v) in acc.data_mut().iter_mut().zip(it.2.as_ref().unwrap()) {
                *a += v;
            }
        }
        acc
    });
    let db = need_db.then(|| {
        let mut acc = vec![T::zero(); g.cout];
        for i in 0..x.n() {
            for (co, a) in acc.iter_mut().enumerate() {
                *a += gy.plane(i, co).iter().copied().sum::<T>();
            }
        }
        Tensor::channel_vector(&acc)
    });
    Ok(DeformGrads {
        dx,
        doffsets,
        dw,
        db,
    })
}
