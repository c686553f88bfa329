//! 2x resampling between pyramid levels.

use crate::tensor::{Real, Tensor};

/// Source coordinate and blend for output index `i` of a 2x bilinear
/// upsample with half-pixel centers, edge-clamped.
#[inline]
fn up2_coord(i: usize, len: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear 2x upsampling (half-pixel centers, clamped edges).
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let ys: Vec<_> = (0..2 * h).map(|i| up2_coord(i, h)).collect();
    let xs: Vec<_> = (0..2 * w).map(|i| up2_coord(i, w)).collect();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let ow = 2 * w;
    let mut k = 0;
    for i in 0..n {
        for j in 0..c {
            let p = x.plane(i, j);
            let dst = &mut out.data_mut()[k * 4 * h * w..(k + 1) * 4 * h * w];
            k += 1;
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                let ly = T::lit(ly);
                let hy = T::one() - ly;
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let lx = T::lit(lx);
                    let hx = T::one() - lx;
                    dst[oy * ow + ox] = hy * (hx * p[y0 * w + x0] + lx * p[y0 * w + x1])
                        + ly * (hx * p[y1 * w + x0] + lx * p[y1 * w + x1]);
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(gy: &Tensor<T>, in_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let ys: Vec<_> = (0..2 * h).map(|i| up2_coord(i, h)).collect();
    let xs: Vec<_> = (0..2 * w).map(|i| up2_coord(i, w)).collect();
    let mut dx = Tensor::zeros(in_shape);
    let ow = 2 * w;
    for i in 0..n {
        for j in 0..c {
            let g = gy.plane(i, j).to_vec();
            let base = (i * c + j) * h * w;
            let d = &mut dx.data_mut()[base..base + h * w];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                let ly = T::lit(ly);
                let hy = T::one() - ly;
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let lx = T::lit(lx);
                    let hx = T::one() - lx;
                    let v = g[oy * ow + ox];
                    d[y0 * w + x0] += hy * hx * v;
                    d[y0 * w + x1] += hy * lx * v;
                    d[y1 * w + x0] += ly * hx * v;
                    d[y1 * w + x1] += ly * lx * v;
                }
            }
        }
    }
    dx
}

/// Rearranges `C*4 x H x W` into `C x 2H x 2W` (sub-pixel convolution layout).
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c4, h, w] = x.shape();
    let c = c4 / 4;
    Tensor::from_fn([n, c, 2 * h, 2 * w], |[i, j, y, xx]| {
        x.at([i, j * 4 + (y % 2) * 2 + (xx % 2), y / 2, xx / 2])
    })
}

pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = x.shape();
    Tensor::from_fn([n, c * 4, h2 / 2, w2 / 2], |[i, j, y, xx]| {
        let (ch, sub) = (j / 4, j % 4);
        x.at([i, ch, y * 2 + sub / 2, xx * 2 + sub % 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_constant_is_constant() {
        let x = Tensor::<f64>::full([1, 2, 3, 4], 1.5);
        let y = upsample2x(&x);
        assert_eq!(y.shape(), [1, 2, 6, 8]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn upsample_interior_weights() {
        // 1-D ramp 0,1,2,3 -> half-pixel bilinear gives 0,.25,.75,1.25,...
        let x = Tensor::<f64>::from_fn([1, 1, 1, 4], |[_, _, _, i]| i as f64);
        let y = upsample2x(&x);
        let row: Vec<f64> = y.plane(0, 0)[..8].to_vec();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0]);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn([1, 1, 3, 3], |[_, _, y, x]| (y * 3 + x) as f64 * 0.1);
        let g = Tensor::<f64>::from_fn([1, 1, 6, 6], |[_, _, y, x]| ((y * 7 + x * 3) % 5) as f64);
        let lhs: f64 = upsample2x(&x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let dx = upsample2x_backward(&g, x.shape());
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn shuffle_roundtrip() {
        let x = Tensor::<f32>::from_fn([2, 8, 3, 5], |[a, b, c, d]| (a * 1000 + b * 100 + c * 10 + d) as f32);
        assert_eq!(pixel_unshuffle(&pixel_shuffle(&x)), x);
    }
}
