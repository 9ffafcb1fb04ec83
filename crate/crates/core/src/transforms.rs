//! Differentiable parametric image transforms and their composition.
//!
//! Three axes are supported: brightness (pixel scale), contrast (blend toward
//! the per-image mean luminance), and rotation (bilinear resampling about the
//! image center, zero fill outside the support). The composed backward
//! transform applies contrast, then brightness, then rotation.
//!
//! Every transform comes in two flavors: a plain application and a
//! forward-with-context variant whose context computes vector-Jacobian
//! products with respect to both the scalar parameter and the input pixels.
//! Parameter gradients are accumulated in f64.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// One (low, high, identity) interval for a transform parameter axis.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AxisBounds {
    pub low: f32,
    pub high: f32,
    pub identity: f32,
}

impl AxisBounds {
    pub fn clamp(&self, v: f32) -> f32 {
        v.clamp(self.low, self.high)
    }

    pub fn contains(&self, v: f32) -> bool {
        (self.low..=self.high).contains(&v)
    }
}

/// The backward-transform parameter space: per-axis operational bounds.
///
/// Rotation is bounded by the geometry of the transform; brightness and
/// contrast get finite operational bounds wide enough to invert every shift
/// exercised by the experiment grids.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamSpace {
    pub rotation: AxisBounds,
    pub brightness: AxisBounds,
    pub contrast: AxisBounds,
}

impl Default for ParamSpace {
    fn default() -> Self {
        Self {
            rotation: AxisBounds {
                low: -180.0,
                high: 180.0,
                identity: 0.0,
            },
            brightness: AxisBounds {
                low: 0.05,
                high: 4.0,
                identity: 1.0,
            },
            contrast: AxisBounds {
                low: 0.05,
                high: 4.0,
                identity: 1.0,
            },
        }
    }
}

impl ParamSpace {
    pub fn identity(&self) -> TransformParams {
        TransformParams {
            rotation_deg: self.rotation.identity,
            brightness: self.brightness.identity,
            contrast: self.contrast.identity,
        }
    }

    pub fn contains(&self, p: &TransformParams) -> bool {
        self.rotation.contains(p.rotation_deg)
            && self.brightness.contains(p.brightness)
            && self.contrast.contains(p.contrast)
    }
}

/// One (rotation degrees, brightness factor, contrast factor) triple.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformParams {
    pub rotation_deg: f32,
    pub brightness: f32,
    pub contrast: f32,
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams {
        rotation_deg: 0.0,
        brightness: 1.0,
        contrast: 1.0,
    };

    pub fn new(rotation_deg: f32, brightness: f32, contrast: f32) -> Self {
        Self {
            rotation_deg,
            brightness,
            contrast,
        }
    }

    pub fn as_array(&self) -> [f32; 3] {
        [self.rotation_deg, self.brightness, self.contrast]
    }
}

/// Clamps a raw (rotation, brightness, contrast) triple into the space.
/// Values already inside come back untouched.
pub fn clamp_params(raw: [f32; 3], space: &ParamSpace) -> TransformParams {
    TransformParams {
        rotation_deg: space.rotation.clamp(raw[0]),
        brightness: space.brightness.clamp(raw[1]),
        contrast: space.contrast.clamp(raw[2]),
    }
}

// ---------------------------------------------------------------------------
// Brightness
// ---------------------------------------------------------------------------

/// Scales every pixel by `p` and clamps back into [0, 1].
pub fn apply_brightness(x: &ImageTensor, p: f32) -> Result<ImageTensor> {
    let (y, _) = brightness_fwd(x, p)?;
    Ok(y)
}

/// Backward context for [`brightness_fwd`].
pub struct BrightnessCtx {
    x: Array3<f32>,
    p: f32,
}

/// Brightness forward pass that keeps what the backward pass needs.
pub fn brightness_fwd(x: &ImageTensor, p: f32) -> Result<(ImageTensor, BrightnessCtx)> {
    if !(p >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "brightness factor must be >= 0, got {p}"
        )));
    }
    let out = x.data().mapv(|v| (p * v).clamp(0.0, 1.0));
    Ok((
        ImageTensor::from_clamped(out),
        BrightnessCtx {
            x: x.data().clone(),
            p,
        },
    ))
}

impl BrightnessCtx {
    /// Given upstream pixel gradients, returns (d/dp, d/dinput).
    ///
    /// The clamp contributes zero subgradient wherever the pre-clamp value
    /// saturates.
    pub fn vjp(&self, gy: &Array3<f32>) -> (f64, Array3<f32>) {
        let mut dp = 0.0f64;
        let mut dx = Array3::<f32>::zeros(self.x.raw_dim());
        for ((g, &v), d) in gy.iter().zip(self.x.iter()).zip(dx.iter_mut()) {
            let raw = self.p * v;
            if (0.0..=1.0).contains(&raw) {
                dp += (*g as f64) * (v as f64);
                *d = self.p * *g;
            }
        }
        (dp, dx)
    }
}

// ---------------------------------------------------------------------------
// Contrast
// ---------------------------------------------------------------------------

/// Scales contrast about the per-image mean luminance m:
/// `clamp(p * x + (1 - p) * m, 0, 1)`. The mean is treated as a constant of
/// the input, not re-differentiated.
pub fn apply_contrast(x: &ImageTensor, p: f32) -> Result<ImageTensor> {
    let (y, _) = contrast_fwd(x, p)?;
    Ok(y)
}

/// Backward context for [`contrast_fwd`].
pub struct ContrastCtx {
    x: Array3<f32>,
    p: f32,
    mean: f32,
}

pub fn contrast_fwd(x: &ImageTensor, p: f32) -> Result<(ImageTensor, ContrastCtx)> {
    if !(p >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "contrast factor must be >= 0, got {p}"
        )));
    }
    let m = x.mean_luminance();
    // p*x + (1-p)*m rather than m + p*(x-m): bit-exact at p == 1.
    let off = (1.0 - p) * m;
    let out = x.data().mapv(|v| (p * v + off).clamp(0.0, 1.0));
    Ok((
        ImageTensor::from_clamped(out),
        ContrastCtx {
            x: x.data().clone(),
            p,
            mean: m,
        },
    ))
}

impl ContrastCtx {
    /// Given upstream pixel gradients, returns (d/dp, d/dinput).
    pub fn vjp(&self, gy: &Array3<f32>) -> (f64, Array3<f32>) {
        let mut dp = 0.0f64;
        let mut dx = Array3::<f32>::zeros(self.x.raw_dim());
        let off = (1.0 - self.p) * self.mean;
        for ((g, &v), d) in gy.iter().zip(self.x.iter()).zip(dx.iter_mut()) {
            let raw = self.p * v + off;
            if (0.0..=1.0).contains(&raw) {
                dp += (*g as f64) * ((v - self.mean) as f64);
                *d = self.p * *g;
            }
        }
        (dp, dx)
    }
}

// ---------------------------------------------------------------------------
// Rotation
// ---------------------------------------------------------------------------

/// Rotates counterclockwise by `p` degrees about the image center via inverse
/// mapping with bilinear interpolation. Samples outside the support fill with
/// zero.
pub fn apply_rotation(x: &ImageTensor, p: f32) -> Result<ImageTensor> {
    let (y, _) = rotation_fwd(x, p)?;
    Ok(y)
}

/// Snap tolerance for sample coordinates that should land exactly on pixel
/// centers (quarter turns, identity). Keeps those cases bit-exact.
const GRID_SNAP_EPS: f64 = 1e-6;

/// Backward context for [`rotation_fwd`].
pub struct RotationCtx {
    x: Array3<f32>,
    p: f32,
    // per output pixel: sample position (sy, sx), in f64
    grid: Vec<(f64, f64)>,
}

pub fn rotation_fwd(x: &ImageTensor, p: f32) -> Result<(ImageTensor, RotationCtx)> {
    if !(-180.0..=180.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "rotation must lie in [-180, 180] degrees, got {p}"
        )));
    }
    let (c, h, w) = x.shape();
    let theta = (p as f64).to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;

    let mut grid = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let mut sx = cx + cos_t * dx - sin_t * dy;
            let mut sy = cy + sin_t * dx + cos_t * dy;
            if (sx - sx.round()).abs() < GRID_SNAP_EPS {
                sx = sx.round();
            }
            if (sy - sy.round()).abs() < GRID_SNAP_EPS {
                sy = sy.round();
            }
            grid.push((sy, sx));
        }
    }

    let mut out = Array3::<f32>::zeros((c, h, w));
    let data = x.data();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let (sy, sx) = grid[i * w + j];
                out[[ch, i, j]] = bilinear_sample(data, ch, sy, sx, h, w);
            }
        }
    }
    Ok((
        ImageTensor::from_clamped(out),
        RotationCtx {
            x: data.clone(),
            p,
            grid,
        },
    ))
}

fn bilinear_sample(data: &Array3<f32>, ch: usize, sy: f64, sx: f64, h: usize, w: usize) -> f32 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let y0 = y0 as i64;
    let x0 = x0 as i64;
    let tap = |yy: i64, xx: i64| -> f64 {
        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
            data[[ch, yy as usize, xx as usize]] as f64
        } else {
            0.0
        }
    };
    let v00 = tap(y0, x0);
    let v01 = tap(y0, x0 + 1);
    let v10 = tap(y0 + 1, x0);
    let v11 = tap(y0 + 1, x0 + 1);
    let top = v00 * (1.0 - fx) + v01 * fx;
    let bot = v10 * (1.0 - fx) + v11 * fx;
    (top * (1.0 - fy) + bot * fy) as f32
}

impl RotationCtx {
    /// Given upstream pixel gradients, returns (d/dp in degrees, d/dinput).
    pub fn vjp(&self, gy: &Array3<f32>) -> (f64, Array3<f32>) {
        let (c, h, w) = self.x.dim();
        let theta = (self.p as f64).to_radians();
        let (sin_t, cos_t) = theta.sin_cos();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let deg = std::f64::consts::PI / 180.0;

        let mut dp = 0.0f64;
        let mut dx_img = Array3::<f32>::zeros((c, h, w));
        for i in 0..h {
            for j in 0..w {
                let (sy, sx) = self.grid[i * w + j];
                let y0f = sy.floor();
                let x0f = sx.floor();
                let fy = sy - y0f;
                let fx = sx - x0f;
                let y0 = y0f as i64;
                let x0 = x0f as i64;

                // sample-position derivatives w.r.t. the angle (degrees)
                let dyy = i as f64 - cy;
                let dxx = j as f64 - cx;
                let dsx_dp = (-sin_t * dxx - cos_t * dyy) * deg;
                let dsy_dp = (cos_t * dxx - sin_t * dyy) * deg;

                for ch in 0..c {
                    let g = gy[[ch, i, j]] as f64;
                    if g == 0.0 {
                        continue;
                    }
                    let mut v = [[0.0f64; 2]; 2];
                    for (ai, yy) in [y0, y0 + 1].iter().enumerate() {
                        for (bi, xx) in [x0, x0 + 1].iter().enumerate() {
                            if *yy >= 0 && *yy < h as i64 && *xx >= 0 && *xx < w as i64 {
                                v[ai][bi] = self.x[[ch, *yy as usize, *xx as usize]] as f64;
                                let wgt = (if ai == 0 { 1.0 - fy } else { fy })
                                    * (if bi == 0 { 1.0 - fx } else { fx });
                                dx_img[[ch, *yy as usize, *xx as usize]] += (g * wgt) as f32;
                            }
                        }
                    }
                    let dout_dfx = (1.0 - fy) * (v[0][1] - v[0][0]) + fy * (v[1][1] - v[1][0]);
                    let dout_dfy = (1.0 - fx) * (v[1][0] - v[0][0]) + fx * (v[1][1] - v[0][1]);
                    dp += g * (dout_dfx * dsx_dp + dout_dfy * dsy_dp);
                }
            }
        }
        (dp, dx_img)
    }

    /// Output pixels whose four sample taps all lie inside the input support.
    /// Gradient checks and interior-difference oracles restrict to these.
    pub fn interior_mask(&self) -> ndarray::Array2<bool> {
        let (_, h, w) = self.x.dim();
        let mut mask = ndarray::Array2::<bool>::from_elem((h, w), false);
        for i in 0..h {
            for j in 0..w {
                let (sy, sx) = self.grid[i * w + j];
                let y0 = sy.floor();
                let x0 = sx.floor();
                let inb = y0 >= 0.0 && x0 >= 0.0 && y0 + 1.0 <= (h - 1) as f64
                    && x0 + 1.0 <= (w - 1) as f64;
                mask[[i, j]] = inb;
            }
        }
        mask
    }
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

/// Applies the backward transform g_p = rotation ∘ brightness ∘ contrast:
/// contrast first, then brightness, then rotation.
pub fn apply_backward_transform(x: &ImageTensor, p: &TransformParams) -> Result<ImageTensor> {
    let space = ParamSpace::default();
    apply_backward_transform_in(x, p, &space)
}

/// Same as [`apply_backward_transform`] with an explicit parameter space.
pub fn apply_backward_transform_in(
    x: &ImageTensor,
    p: &TransformParams,
    space: &ParamSpace,
) -> Result<ImageTensor> {
    if !space.contains(p) {
        return Err(Error::InvalidParameter(format!(
            "params {p:?} outside the backward parameter space"
        )));
    }
    let (y, _) = backward_transform_fwd(x, p)?;
    Ok(y)
}

/// Backward context for the composed transform.
pub struct BackwardTransformCtx {
    contrast: ContrastCtx,
    brightness: BrightnessCtx,
    rotation: RotationCtx,
}

/// Composed forward pass keeping per-stage contexts for the chain rule.
pub fn backward_transform_fwd(
    x: &ImageTensor,
    p: &TransformParams,
) -> Result<(ImageTensor, BackwardTransformCtx)> {
    let (after_c, ctx_c) = contrast_fwd(x, p.contrast)?;
    let (after_b, ctx_b) = brightness_fwd(&after_c, p.brightness)?;
    let (out, ctx_r) = rotation_fwd(&after_b, p.rotation_deg)?;
    Ok((
        out,
        BackwardTransformCtx {
            contrast: ctx_c,
            brightness: ctx_b,
            rotation: ctx_r,
        },
    ))
}

impl BackwardTransformCtx {
    /// Chains the per-stage VJPs. Returns gradients for
    /// (rotation_deg, brightness, contrast) plus the input-pixel gradient.
    pub fn vjp(&self, gy: &Array3<f32>) -> ([f64; 3], Array3<f32>) {
        let (d_rot, g_after_b) = self.rotation.vjp(gy);
        let (d_bri, g_after_c) = self.brightness.vjp(&g_after_b);
        let (d_con, g_x) = self.contrast.vjp(&g_after_c);
        ([d_rot, d_bri, d_con], g_x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr3, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(vals: &[[f32; 2]; 2]) -> ImageTensor {
        ImageTensor::new(arr3(&[[
            [vals[0][0], vals[0][1]],
            [vals[1][0], vals[1][1]],
        ]]))
        .unwrap()
    }

    fn random_image(c: usize, h: usize, w: usize, lo: f32, hi: f32, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(lo..hi));
        ImageTensor::new(data).unwrap()
    }

    #[test]
    fn brightness_identity_is_bit_exact() {
        let x = random_image(1, 8, 8, 0.0, 1.0, 1);
        let y = apply_brightness(&x, 1.0).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn brightness_halves_constant_image() {
        let x = ImageTensor::new(Array3::from_elem((1, 4, 4), 0.5)).unwrap();
        let y = apply_brightness(&x, 0.5).unwrap();
        // pixelwise-multiply reference
        for &v in y.data().iter() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn brightness_zero_annihilates() {
        let x = random_image(3, 5, 5, 0.0, 1.0, 2);
        let y = apply_brightness(&x, 0.0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn brightness_rejects_negative_factor() {
        let x = random_image(1, 4, 4, 0.0, 1.0, 3);
        assert!(apply_brightness(&x, -0.1).is_err());
    }

    #[test]
    fn contrast_identity_is_bit_exact() {
        let x = random_image(1, 8, 8, 0.0, 1.0, 4);
        let y = apply_contrast(&x, 1.0).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn contrast_zero_collapses_to_mean() {
        let x = gray(&[[0.2, 0.4], [0.6, 0.8]]);
        let y = apply_contrast(&x, 0.0).unwrap();
        for &v in y.data().iter() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn contrast_doubling_matches_hand_computation() {
        // m = 0.5; clamp(0.5 + 2 (x - 0.5)) over [[0.2, 0.4], [0.6, 0.8]]
        let x = gray(&[[0.2, 0.4], [0.6, 0.8]]);
        let y = apply_contrast(&x, 2.0).unwrap();
        let want = [[0.0f32, 0.3], [0.7, 1.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (y.data()[[0, i, j]] - want[i][j]).abs() < 1e-6,
                    "pixel ({i},{j}): {} vs {}",
                    y.data()[[0, i, j]],
                    want[i][j]
                );
            }
        }
    }

    #[test]
    fn rotation_identity_is_bit_exact() {
        let x = random_image(1, 9, 9, 0.0, 1.0, 5);
        let y = apply_rotation(&x, 0.0).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rotation_by_180_reverses_indices() {
        // index-permutation oracle on an even-sized image
        let x = random_image(1, 8, 8, 0.0, 1.0, 6);
        let y = apply_rotation(&x, 180.0).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(y.data()[[0, i, j]], x.data()[[0, 7 - i, 7 - j]]);
            }
        }
    }

    #[test]
    fn rotation_quarter_turns_are_exact_index_permutations() {
        let x = random_image(1, 7, 7, 0.0, 1.0, 7);
        let (_, h, w) = x.shape();
        // +90 counterclockwise: out[i][j] == in[j][W-1-i]
        let y = apply_rotation(&x, 90.0).unwrap();
        for i in 0..h {
            for j in 0..w {
                assert_eq!(y.data()[[0, i, j]], x.data()[[0, j, w - 1 - i]]);
            }
        }
        let y = apply_rotation(&x, -180.0).unwrap();
        for i in 0..h {
            for j in 0..w {
                assert_eq!(y.data()[[0, i, j]], x.data()[[0, h - 1 - i, w - 1 - j]]);
            }
        }
    }

    /// Smooth low-frequency image; bilinear resampling is near-lossless on it.
    fn smooth_image(h: usize, w: usize) -> ImageTensor {
        let data = Array3::from_shape_fn((1, h, w), |(_, i, j)| {
            let a = (i as f32) * std::f32::consts::TAU / 20.0;
            let b = (j as f32) * std::f32::consts::TAU / 20.0;
            0.5 + 0.35 * a.sin() * b.cos()
        });
        ImageTensor::new(data).unwrap()
    }

    #[test]
    fn rotation_round_trip_recovers_interior() {
        let x = smooth_image(16, 16);
        let fwd = apply_rotation(&x, 33.0).unwrap();
        let (back, ctx) = rotation_fwd(&fwd, -33.0).unwrap();
        // compare only where both passes sampled inside the support
        let (_, fwd_ctx) = rotation_fwd(&x, 33.0).unwrap();
        let m1 = fwd_ctx.interior_mask();
        let m2 = ctx.interior_mask();
        let mut max_diff = 0.0f32;
        let mut checked = 0;
        for i in 3..13 {
            for j in 3..13 {
                if m1[[i, j]] && m2[[i, j]] {
                    max_diff = max_diff.max((back.data()[[0, i, j]] - x.data()[[0, i, j]]).abs());
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
        assert!(max_diff < 0.05, "round-trip interior diff {max_diff}");
    }

    #[test]
    fn rotation_rejects_out_of_range_angle() {
        let x = random_image(1, 4, 4, 0.0, 1.0, 9);
        assert!(apply_rotation(&x, 181.0).is_err());
        assert!(apply_rotation(&x, -180.5).is_err());
    }

    #[test]
    fn backward_transform_identity_is_bit_exact() {
        let x = random_image(3, 10, 10, 0.0, 1.0, 10);
        let y = apply_backward_transform(&x, &TransformParams::IDENTITY).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn backward_transform_reduces_to_brightness() {
        let x = random_image(1, 6, 6, 0.0, 1.0, 11);
        let via_compose =
            apply_backward_transform(&x, &TransformParams::new(0.0, 0.5, 1.0)).unwrap();
        let direct = apply_brightness(&x, 0.5).unwrap();
        assert_eq!(via_compose.data(), direct.data());
    }

    #[test]
    fn backward_transform_reduces_to_contrast_oracle() {
        let x = gray(&[[0.2, 0.4], [0.6, 0.8]]);
        let y = apply_backward_transform(&x, &TransformParams::new(0.0, 1.0, 2.0)).unwrap();
        let want = [[0.0f32, 0.3], [0.7, 1.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((y.data()[[0, i, j]] - want[i][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_transform_rejects_out_of_space_params() {
        let x = random_image(1, 4, 4, 0.0, 1.0, 12);
        let p = TransformParams::new(0.0, 5.0, 1.0);
        assert!(apply_backward_transform(&x, &p).is_err());
    }

    #[test]
    fn clamp_params_saturates_per_axis() {
        let space = ParamSpace::default();
        assert_eq!(
            clamp_params([0.0, 1.0, 1.0], &space),
            TransformParams::new(0.0, 1.0, 1.0)
        );
        assert_eq!(
            clamp_params([500.0, -3.0, 2.0], &space),
            TransformParams::new(180.0, 0.05, 2.0)
        );
        assert_eq!(
            clamp_params([-181.0, 4.5, 0.01], &space),
            TransformParams::new(-180.0, 4.0, 0.05)
        );
    }

    #[test]
    fn brightness_semigroup_before_clamping() {
        let x = random_image(1, 6, 6, 0.0, 0.4, 13);
        let (p1, p2) = (1.2f32, 1.5f32);
        // p1*p2*max < 1 so no clamp engages
        let once = apply_brightness(&x, p1 * p2).unwrap();
        let twice = apply_brightness(&apply_brightness(&x, p2).unwrap(), p1).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-6);
    }

    #[test]
    fn outputs_stay_in_range() {
        let x = random_image(3, 8, 8, 0.0, 1.0, 14);
        for p in [0.0f32, 0.3, 1.7, 4.0] {
            let y = apply_brightness(&x, p).unwrap();
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let y = apply_contrast(&x, p).unwrap();
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for r in [-180.0f32, -37.5, 90.0, 179.0] {
            let y = apply_rotation(&x, r).unwrap();
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    // -- gradient checks ----------------------------------------------------
    //
    // Finite differences run through the f64 reference implementations in
    // crate::reference, so the oracle's own rounding noise stays far below
    // the 1e-2 relative tolerance being asserted.

    use crate::reference;

    /// Central finite difference of a scalar probe through a transform.
    fn fd_param_grad<F>(f: F, p: f64, step: f64) -> f64
    where
        F: Fn(f64) -> f64,
    {
        (f(p + step) - f(p - step)) / (2.0 * step)
    }

    fn probe_weights(h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((1, h, w), |_| rng.gen_range(-1.0..1.0f32))
    }

    fn probe_f64(y: &ndarray::Array3<f64>, wts: &Array3<f32>) -> f64 {
        y.iter().zip(wts.iter()).map(|(&a, &b)| a * b as f64).sum()
    }

    #[test]
    fn forward_passes_match_f64_reference() {
        for seed in 0..8u64 {
            let x = random_image(1, 10, 10, 0.0, 1.0, 2000 + seed);
            let x64 = reference::to_f64(x.data());
            let b = apply_brightness(&x, 1.3).unwrap();
            let b_ref = reference::brightness(&x64, 1.3);
            let c = apply_contrast(&x, 0.7).unwrap();
            let c_ref = reference::contrast(&x64, 0.7);
            let r = apply_rotation(&x, 23.0).unwrap();
            let r_ref = reference::rotation(&x64, 23.0);
            for (got, want) in [(b, b_ref), (c, c_ref), (r, r_ref)] {
                let max = got
                    .data()
                    .iter()
                    .zip(want.iter())
                    .map(|(&a, &b)| (a as f64 - b).abs())
                    .fold(0.0, f64::max);
                assert!(max < 1e-5, "seed {seed}: impl vs reference diff {max}");
            }
        }
    }

    #[test]
    fn brightness_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let x = random_image(1, 8, 8, 0.1, 0.6, 100 + seed);
            let x64 = reference::to_f64(x.data());
            let wts = probe_weights(8, 8, 200 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let p = rng.gen_range(0.5..1.4f32);
            // keep far from clamp: max pixel * (p + step) must stay < 1
            assert!(0.6 * (p + 1e-3) < 1.0);
            let (_, ctx) = brightness_fwd(&x, p).unwrap();
            let (dp, _) = ctx.vjp(&wts);
            let fd = fd_param_grad(
                |q| probe_f64(&reference::brightness(&x64, q), &wts),
                p as f64,
                1e-3,
            );
            let rel = (dp - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-2, "seed {seed}: analytic {dp} vs fd {fd}");
        }
    }

    #[test]
    fn contrast_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let x = random_image(1, 8, 8, 0.25, 0.75, 400 + seed);
            let x64 = reference::to_f64(x.data());
            let wts = probe_weights(8, 8, 500 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
            let p = rng.gen_range(0.6..1.3f32);
            let (_, ctx) = contrast_fwd(&x, p).unwrap();
            let (dp, _) = ctx.vjp(&wts);
            let fd = fd_param_grad(
                |q| probe_f64(&reference::contrast(&x64, q), &wts),
                p as f64,
                1e-3,
            );
            let rel = (dp - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-2, "seed {seed}: analytic {dp} vs fd {fd}");
        }
    }

    #[test]
    fn rotation_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let x = random_image(1, 12, 12, 0.1, 0.9, 700 + seed);
            let x64 = reference::to_f64(x.data());
            let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
            let p = rng.gen_range(5.0..60.0f32);
            let (_, ctx) = rotation_fwd(&x, p).unwrap();
            // probe only pixels interior at p and at p +- step
            let (_, ctx_lo) = rotation_fwd(&x, p - 1e-3).unwrap();
            let (_, ctx_hi) = rotation_fwd(&x, p + 1e-3).unwrap();
            let m = ctx.interior_mask();
            let m_lo = ctx_lo.interior_mask();
            let m_hi = ctx_hi.interior_mask();
            let mut wts = probe_weights(12, 12, 900 + seed);
            for i in 0..12 {
                for j in 0..12 {
                    if !(m[[i, j]] && m_lo[[i, j]] && m_hi[[i, j]]) {
                        wts[[0, i, j]] = 0.0;
                    }
                }
            }
            let (dp, _) = ctx.vjp(&wts);
            let fd = fd_param_grad(
                |q| probe_f64(&reference::rotation(&x64, q), &wts),
                p as f64,
                1e-3,
            );
            let rel = (dp - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-2, "seed {seed}: analytic {dp} vs fd {fd}");
        }
    }

    #[test]
    fn composed_gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            let x = random_image(1, 12, 12, 0.25, 0.75, 1000 + seed);
            let x64 = reference::to_f64(x.data());
            let mut rng = ChaCha8Rng::seed_from_u64(1100 + seed);
            let p = TransformParams::new(
                rng.gen_range(5.0..40.0),
                rng.gen_range(0.85..1.1),
                rng.gen_range(0.8..1.1),
            );
            let (_, ctx) = backward_transform_fwd(&x, &p).unwrap();
            let m = ctx.rotation.interior_mask();
            let mut wts = probe_weights(12, 12, 1200 + seed);
            for i in 0..12 {
                for j in 0..12 {
                    // stay a couple of pixels clear of fill-region boundaries
                    let clear = (2..10).contains(&i) && (2..10).contains(&j) && m[[i, j]];
                    if !clear {
                        wts[[0, i, j]] = 0.0;
                    }
                }
            }
            let (grads, _) = ctx.vjp(&wts);
            let (rot, bri, con) = (
                p.rotation_deg as f64,
                p.brightness as f64,
                p.contrast as f64,
            );
            let probe_at = |r: f64, b: f64, c: f64| {
                probe_f64(&reference::backward_transform(&x64, r, b, c), &wts)
            };
            let fds = [
                fd_param_grad(|q| probe_at(q, bri, con), rot, 1e-3),
                fd_param_grad(|q| probe_at(rot, q, con), bri, 1e-3),
                fd_param_grad(|q| probe_at(rot, bri, q), con, 1e-3),
            ];
            for (axis, (a, f)) in grads.iter().zip(fds.iter()).enumerate() {
                let rel = (a - f).abs() / f.abs().max(1e-6);
                assert!(rel < 1e-2, "seed {seed} axis {axis}: analytic {a} vs fd {f}");
            }
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let x = random_image(1, 10, 10, 0.3, 0.7, 42);
        let p = TransformParams::new(17.0, 0.95, 1.05);
        let (_, ctx) = backward_transform_fwd(&x, &p).unwrap();
        let wts = probe_weights(10, 10, 43);
        let (_, gx) = ctx.vjp(&wts);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..12 {
            let i = rng.gen_range(0..10);
            let j = rng.gen_range(0..10);
            let step = 1e-4;
            let perturb = |delta: f64| {
                let mut d = reference::to_f64(x.data());
                d[[0, i, j]] += delta;
                probe_f64(
                    &reference::backward_transform(
                        &d,
                        p.rotation_deg as f64,
                        p.brightness as f64,
                        p.contrast as f64,
                    ),
                    &wts,
                )
            };
            let fd = (perturb(step) - perturb(-step)) / (2.0 * step);
            let a = gx[[0, i, j]] as f64;
            assert!(
                (a - fd).abs() < 1e-2 * fd.abs().max(1.0),
                "pixel ({i},{j}): analytic {a} vs fd {fd}"
            );
        }
    }
}
