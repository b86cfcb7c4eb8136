//! Small 2-D resampling and filtering kernels shared across modules.
//!
//! Every linear operator here comes with its adjoint so that gradients can be
//! pushed back through it without an autodiff engine.

use ndarray::{Array2, ArrayView2};

/// Source index for nearest-neighbour sampling with half-pixel centres.
#[inline]
pub fn nearest_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64;
    (pos.floor() as usize).min(src_len - 1)
}

/// Two source taps and the weight of the second one, for bilinear sampling
/// with half-pixel centres (`align_corners = false`) and edge clamping.
#[inline]
pub fn bilinear_taps(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    let w = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
    (i0, i1, w)
}

pub fn bilinear_resize(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let rows: Vec<_> = (0..out_h).map(|y| bilinear_taps(y, out_h, h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| bilinear_taps(x, out_w, w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, wy) = rows[y];
        let (x0, x1, wx) = cols[x];
        let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
        let bot = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
        top * (1.0 - wy) + bot * wy
    })
}

/// Adjoint of [`bilinear_resize`]: scatters a gradient on the resized grid
/// back onto a `src_h x src_w` grid.
pub fn bilinear_resize_adjoint(grad: ArrayView2<f64>, src_h: usize, src_w: usize) -> Array2<f64> {
    let (out_h, out_w) = grad.dim();
    let rows: Vec<_> = (0..out_h).map(|y| bilinear_taps(y, out_h, src_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| bilinear_taps(x, out_w, src_w)).collect();
    let mut out = Array2::zeros((src_h, src_w));
    for y in 0..out_h {
        let (y0, y1, wy) = rows[y];
        for x in 0..out_w {
            let g = grad[[y, x]];
            if g == 0.0 {
                continue;
            }
            let (x0, x1, wx) = cols[x];
            out[[y0, x0]] += g * (1.0 - wy) * (1.0 - wx);
            out[[y0, x1]] += g * (1.0 - wy) * wx;
            out[[y1, x0]] += g * wy * (1.0 - wx);
            out[[y1, x1]] += g * wy * wx;
        }
    }
    out
}

/// Box-filter downsampling: each output cell is the mean of the source
/// pixels whose centres fall inside it.
pub fn area_resize(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let mut sum = Array2::<f64>::zeros((out_h, out_w));
    let mut count = Array2::<f64>::zeros((out_h, out_w));
    for y in 0..h {
        let oy = (y * out_h / h).min(out_h - 1);
        for x in 0..w {
            let ox = (x * out_w / w).min(out_w - 1);
            sum[[oy, ox]] += src[[y, x]];
            count[[oy, ox]] += 1.0;
        }
    }
    // upsampling through this path leaves empty cells; fill them bilinearly
    if count.iter().any(|&c| c == 0.0) {
        return bilinear_resize(src, out_h, out_w);
    }
    sum / count
}

/// Reflect index without repeating the edge sample (`-1 -> 1`, `n -> n-2`).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Normalised 2-D Gaussian kernel of odd side `size`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub size: usize,
    pub sigma: f64,
    weights: Array2<f64>,
}

impl GaussianKernel {
    pub fn new(size: usize, sigma: f64) -> crate::Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(crate::Error::invalid("kernel_size", format!("must be odd and positive, got {size}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(crate::Error::invalid("sigma", format!("must be positive, got {sigma}")));
        }
        let r = (size / 2) as f64;
        let mut weights = Array2::from_shape_fn((size, size), |(i, j)| {
            let dy = i as f64 - r;
            let dx = j as f64 - r;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        });
        let total = weights.sum();
        weights /= total;
        Ok(Self { size, sigma, weights })
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    /// Same-size convolution with reflect padding.
    pub fn smooth(&self, src: ArrayView2<f64>) -> Array2<f64> {
        let (h, w) = src.dim();
        let r = (self.size / 2) as isize;
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut acc = 0.0;
            for ky in 0..self.size {
                let sy = reflect(y as isize + ky as isize - r, h);
                for kx in 0..self.size {
                    let sx = reflect(x as isize + kx as isize - r, w);
                    acc += self.weights[[ky, kx]] * src[[sy, sx]];
                }
            }
            acc
        })
    }

    pub fn smooth_adjoint(&self, grad: ArrayView2<f64>) -> Array2<f64> {
        let (h, w) = grad.dim();
        let r = (self.size / 2) as isize;
        let mut out = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let g = grad[[y, x]];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..self.size {
                    let sy = reflect(y as isize + ky as isize - r, h);
                    for kx in 0..self.size {
                        let sx = reflect(x as isize + kx as isize - r, w);
                        out[[sy, sx]] += self.weights[[ky, kx]] * g;
                    }
                }
            }
        }
        out
    }
}
