//! Slow f64 reference implementations of the image transforms.
//!
//! These exist purely as independent oracles for the test suites: they share
//! no code with the production f32 path in [`crate::transforms`], evaluate
//! everything in f64, and are written as directly as possible from the
//! transform definitions. Finite-difference gradient checks probe through
//! these to keep truncation noise below the tolerances being asserted.

use ndarray::Array3;

/// `clamp(p * x, 0, 1)` in f64.
pub fn brightness(x: &Array3<f64>, p: f64) -> Array3<f64> {
    x.mapv(|v| (p * v).clamp(0.0, 1.0))
}

/// Mean luminance in f64 (pixel mean for 1 channel, BT.601 weights for 3).
pub fn mean_luminance(x: &Array3<f64>) -> f64 {
    let (c, h, w) = x.dim();
    let n = (h * w) as f64;
    if c == 1 {
        x.sum() / n
    } else {
        let weights = [0.299, 0.587, 0.114];
        let mut sum = 0.0;
        for (ch, wt) in weights.iter().enumerate() {
            sum += wt * x.index_axis(ndarray::Axis(0), ch).sum();
        }
        sum / n
    }
}

/// `clamp(m + p * (x - m), 0, 1)` in f64 with m the mean luminance.
pub fn contrast(x: &Array3<f64>, p: f64) -> Array3<f64> {
    let m = mean_luminance(x);
    x.mapv(|v| (m + p * (v - m)).clamp(0.0, 1.0))
}

/// Counterclockwise rotation about the image center, bilinear, zero fill.
pub fn rotation(x: &Array3<f64>, degrees: f64) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let theta = degrees.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                let sx = cx + cos_t * dx - sin_t * dy;
                let sy = cy + sin_t * dx + cos_t * dy;
                let y0 = sy.floor();
                let x0 = sx.floor();
                let fy = sy - y0;
                let fx = sx - x0;
                let tap = |yy: f64, xx: f64| -> f64 {
                    if yy >= 0.0 && yy <= (h - 1) as f64 && xx >= 0.0 && xx <= (w - 1) as f64 {
                        x[[ch, yy as usize, xx as usize]]
                    } else {
                        0.0
                    }
                };
                let v00 = tap(y0, x0);
                let v01 = tap(y0, x0 + 1.0);
                let v10 = tap(y0 + 1.0, x0);
                let v11 = tap(y0 + 1.0, x0 + 1.0);
                out[[ch, i, j]] =
                    (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy;
            }
        }
    }
    out
}

/// Composed backward transform: contrast, then brightness, then rotation.
pub fn backward_transform(x: &Array3<f64>, rot_deg: f64, bri: f64, con: f64) -> Array3<f64> {
    rotation(&brightness(&contrast(x, con), bri), rot_deg)
}

/// Widens an f32 image to f64 for the reference path.
pub fn to_f64(x: &Array3<f32>) -> Array3<f64> {
    x.mapv(|v| v as f64)
}

/// f64 mirrors of the network layer math, for the same purpose.
pub mod nn64 {
    use ndarray::{s, Array1, Array2, Array4};

    pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
        x.dot(&w.t()) + b
    }

    pub fn conv2d(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: &Array1<f64>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (o, _, kh, kw) = w.dim();
        let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
        let mut xp = Array4::zeros((n, c, hp, wp));
        xp.slice_mut(s![.., .., pad..pad + h, pad..pad + wd]).assign(x);
        let (oh, ow) = ((hp - kh) / stride + 1, (wp - kw) / stride + 1);
        let mut y = Array4::zeros((n, o, oh, ow));
        for img in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[oc];
                        for ch in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    acc += w[[oc, ch, ki, kj]]
                                        * xp[[img, ch, i * stride + ki, j * stride + kj]];
                                }
                            }
                        }
                        y[[img, oc, i, j]] = acc;
                    }
                }
            }
        }
        y
    }

    pub fn relu4(x: &Array4<f64>) -> Array4<f64> {
        x.mapv(|v| v.max(0.0))
    }

    pub fn relu2(x: &Array2<f64>) -> Array2<f64> {
        x.mapv(|v| v.max(0.0))
    }
}
