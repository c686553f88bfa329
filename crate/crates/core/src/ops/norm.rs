//! Channel-wise layer normalization over each pixel (the 2-D variant used by
//! NAFNet-style blocks).

use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Returns the normalized tensor and per-pixel inverse standard deviations.
pub fn layer_norm2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let eps = T::lit(LAYER_NORM_EPS);
    let inv_c = T::one() / T::lit(c as f64);
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut rstd = vec![T::zero(); n * hw];
    for i in 0..n {
        let xi = x.item(i);
        for p in 0..hw {
            let mut mu = T::zero();
            for j in 0..c {
                mu += xi[j * hw + p];
            }
            mu *= inv_c;
            let mut var = T::zero();
            for j in 0..c {
                let d = xi[j * hw + p] - mu;
                var += d * d;
            }
            var *= inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd[i * hw + p] = r;
            for j in 0..c {
                let xh = (xi[j * hw + p] - mu) * r;
                let idx = (i * c + j) * hw + p;
                xhat.data_mut()[idx] = xh;
                out.data_mut()[idx] = xh * weight.data()[j] + bias.data()[j];
            }
        }
    }
    (out, xhat, rstd)
}

/// Gradients w.r.t. input, weight and bias given the saved `xhat` and `rstd`.
pub fn layer_norm2d_backward<T: Real>(
    gy: &Tensor<T>,
    xhat: &Tensor<T>,
    rstd: &[T],
    weight: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = gy.shape();
    let hw = h * w;
    let inv_c = T::one() / T::lit(c as f64);
    let mut dx = Tensor::zeros(gy.shape());
    let mut dw = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for i in 0..n {
        for p in 0..hw {
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for j in 0..c {
                let idx = (i * c + j) * hw + p;
                let g = gy.data()[idx] * weight.data()[j];
                mean_g += g;
                mean_gx += g * xhat.data()[idx];
                dw[j] += gy.data()[idx] * xhat.data()[idx];
                db[j] += gy.data()[idx];
            }
            mean_g *= inv_c;
            mean_gx *= inv_c;
            let r = rstd[i * hw + p];
            for j in 0..c {
                let idx = (i * c + j) * hw + p;
                let g = gy.data()[idx] * weight.data()[j];
                dx.data_mut()[idx] = r * (g - mean_g - xhat.data()[idx] * mean_gx);
            }
        }
    }
    (dx, Tensor::channel_vector(&dw), Tensor::channel_vector(&db))
}
