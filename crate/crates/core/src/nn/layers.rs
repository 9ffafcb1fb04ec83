use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView4, Ix2, Ix4};
use rand_chacha::ChaCha8Rng;

use super::{init_conv, init_linear, Layer, Pass};

fn as_2d(x: ArrayD<f32>) -> Array2<f32> {
    x.into_dimensionality::<Ix2>().expect("expected 2-d input")
}

fn as_4d(x: ArrayD<f32>) -> Array4<f32> {
    x.into_dimensionality::<Ix4>().expect("expected 4-d input")
}

// -- Linear --------------------------------------------------------------------

pub struct Linear {
    pub w: Array2<f32>, // (out, in)
    pub b: Array1<f32>,
    gw: Array2<f32>,
    gb: Array1<f32>,
    cache: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(w: Array2<f32>, b: Array1<f32>) -> Self {
        assert_eq!(w.nrows(), b.len());
        let (gw, gb) = (Array2::zeros(w.raw_dim()), Array1::zeros(b.len()));
        Self {
            w,
            b,
            gw,
            gb,
            cache: None,
        }
    }

    pub fn from_rng(out: usize, inn: usize, rng: &mut ChaCha8Rng) -> Self {
        let (w, b) = init_linear(out, inn, rng);
        Self::new(w, b)
    }

    pub fn out_features(&self) -> usize {
        self.w.nrows()
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: ArrayD<f32>, pass: Pass) -> ArrayD<f32> {
        let x = as_2d(x);
        let y = x.dot(&self.w.t()) + &self.b;
        if pass.caches() {
            self.cache = Some(x);
        }
        y.into_dyn()
    }

    fn backward(&mut self, gy: ArrayD<f32>, accumulate: bool) -> ArrayD<f32> {
        let gy = as_2d(gy);
        let x = self.cache.as_ref().expect("backward without forward");
        if accumulate {
            self.gw += &gy.t().dot(x);
            self.gb += &gy.sum_axis(ndarray::Axis(0));
        }
        gy.dot(&self.w).into_dyn()
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>)) {
        visit2(&mut self.w, &mut self.gw, f);
        visit1(&mut self.b, &mut self.gb, f);
    }
}

// grads and params live in fixed-dim arrays; the visitor API is dyn-dim
fn visit2(
    p: &mut Array2<f32>,
    g: &mut Array2<f32>,
    f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>),
) {
    let mut pd = std::mem::take(p).into_dyn();
    let mut gd = std::mem::take(g).into_dyn();
    f(&mut pd, &mut gd);
    *p = pd.into_dimensionality().expect("visitor kept shape");
    *g = gd.into_dimensionality().expect("visitor kept shape");
}

fn visit1(
    p: &mut Array1<f32>,
    g: &mut Array1<f32>,
    f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>),
) {
    let mut pd = std::mem::take(p).into_dyn();
    let mut gd = std::mem::take(g).into_dyn();
    f(&mut pd, &mut gd);
    *p = pd.into_dimensionality().expect("visitor kept shape");
    *g = gd.into_dimensionality().expect("visitor kept shape");
}

fn visit4(
    p: &mut Array4<f32>,
    g: &mut Array4<f32>,
    f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>),
) {
    let mut pd = std::mem::take(p).into_dyn();
    let mut gd = std::mem::take(g).into_dyn();
    f(&mut pd, &mut gd);
    *p = pd.into_dimensionality().expect("visitor kept shape");
    *g = gd.into_dimensionality().expect("visitor kept shape");
}

fn visit1_state(p: &mut Array1<f32>, f: &mut dyn FnMut(&mut ArrayD<f32>)) {
    let mut pd = std::mem::take(p).into_dyn();
    f(&mut pd);
    *p = pd.into_dimensionality().expect("visitor kept shape");
}

// -- Conv2d ---------------------------------------------------------------------

/// im2col + GEMM convolution, chunked over the batch to bound the column
/// buffer at ~16 MB.
pub struct Conv2d {
    pub w: Array4<f32>, // (out, in, kh, kw)
    pub b: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
    gw: Array4<f32>,
    gb: Array1<f32>,
    cache: Option<Array4<f32>>, // padded input
}

const COL_BUDGET_BYTES: usize = 16 << 20;

impl Conv2d {
    pub fn new(w: Array4<f32>, b: Array1<f32>, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1);
        assert_eq!(w.dim().0, b.len());
        let (gw, gb) = (Array4::zeros(w.raw_dim()), Array1::zeros(b.len()));
        Self {
            w,
            b,
            stride,
            pad,
            gw,
            gb,
            cache: None,
        }
    }

    pub fn from_rng(
        out: usize,
        inn: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (w, b) = init_conv(out, inn, k, k, rng);
        Self::new(w, b, stride, pad)
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.w.dim();
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    fn pad_input(&self, x: &Array4<f32>) -> Array4<f32> {
        if self.pad == 0 {
            return x.clone();
        }
        let (n, c, h, w) = x.dim();
        let p = self.pad;
        let mut xp = Array4::zeros((n, c, h + 2 * p, w + 2 * p));
        xp.slice_mut(s![.., .., p..p + h, p..p + w]).assign(x);
        xp
    }
}

/// Column r = (c*kh + ki)*kw + kj, column index (n*oh + i)*ow + j.
fn im2col(
    xp: &ArrayView4<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let (n, c, _, _) = xp.dim();
    let mut cols = Array2::zeros((c * kh * kw, n * oh * ow));
    for img in 0..n {
        for ch in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let r = (ch * kh + ki) * kw + kj;
                    for i in 0..oh {
                        let base = (img * oh + i) * ow;
                        let src_row = ki + i * stride;
                        if stride == 1 {
                            let src = xp.slice(s![img, ch, src_row, kj..kj + ow]);
                            cols.row_mut(r)
                                .slice_mut(s![base..base + ow])
                                .assign(&src);
                        } else {
                            for j in 0..ow {
                                cols[[r, base + j]] = xp[[img, ch, src_row, kj + j * stride]];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Transpose of im2col: scatter-adds column gradients back into the padded
/// input gradient.
fn col2im(
    gcols: &Array2<f32>,
    gxp: &mut ndarray::ArrayViewMut4<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let (n, c, _, _) = gxp.dim();
    for img in 0..n {
        for ch in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let r = (ch * kh + ki) * kw + kj;
                    for i in 0..oh {
                        let base = (img * oh + i) * ow;
                        let dst_row = ki + i * stride;
                        if stride == 1 {
                            let src = gcols.slice(s![r, base..base + ow]);
                            let mut dst = gxp.slice_mut(s![img, ch, dst_row, kj..kj + ow]);
                            dst.zip_mut_with(&src, |a, &b| *a += b);
                        } else {
                            for j in 0..ow {
                                gxp[[img, ch, dst_row, kj + j * stride]] +=
                                    gcols[[r, base + j]];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: ArrayD<f32>, pass: Pass) -> ArrayD<f32> {
        let x = as_4d(x);
        let (n, c, h, w) = x.dim();
        let (o, ci, kh, kw) = self.w.dim();
        assert_eq!(c, ci, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let xp = self.pad_input(&x);
        let w_mat = self
            .w
            .to_shape((o, ci * kh * kw))
            .expect("conv weights contiguous")
            .to_owned();
        let mut y = Array4::zeros((n, o, oh, ow));
        let chunk = (COL_BUDGET_BYTES / (ci * kh * kw * oh * ow * 4)).clamp(1, n.max(1));
        for n0 in (0..n).step_by(chunk) {
            let n1 = (n0 + chunk).min(n);
            let cols = im2col(&xp.slice(s![n0..n1, .., .., ..]), kh, kw, self.stride, oh, ow);
            let ym = w_mat.dot(&cols); // (o, (n1-n0)*oh*ow)
            for img in n0..n1 {
                for oc in 0..o {
                    let bias = self.b[oc];
                    let base = (img - n0) * oh * ow;
                    for i in 0..oh {
                        for j in 0..ow {
                            y[[img, oc, i, j]] = ym[[oc, base + i * ow + j]] + bias;
                        }
                    }
                }
            }
        }
        if pass.caches() {
            self.cache = Some(xp);
        }
        y.into_dyn()
    }

    fn backward(&mut self, gy: ArrayD<f32>, accumulate: bool) -> ArrayD<f32> {
        let gy = as_4d(gy);
        let xp = self.cache.as_ref().expect("backward without forward");
        let (n, _, hp, wp) = xp.dim();
        let (o, ci, kh, kw) = self.w.dim();
        let (_, go, oh, ow) = gy.dim();
        assert_eq!(o, go);
        let w_mat = self
            .w
            .to_shape((o, ci * kh * kw))
            .expect("conv weights contiguous")
            .to_owned();
        let mut gw_mat = Array2::<f32>::zeros((o, ci * kh * kw));
        let mut gxp = Array4::<f32>::zeros((n, ci, hp, wp));
        let chunk = (COL_BUDGET_BYTES / (ci * kh * kw * oh * ow * 4)).clamp(1, n.max(1));
        for n0 in (0..n).step_by(chunk) {
            let n1 = (n0 + chunk).min(n);
            let cn = n1 - n0;
            let cols = im2col(&xp.slice(s![n0..n1, .., .., ..]), kh, kw, self.stride, oh, ow);
            let mut gym = Array2::zeros((o, cn * oh * ow));
            for img in n0..n1 {
                let base = (img - n0) * oh * ow;
                for oc in 0..o {
                    for i in 0..oh {
                        for j in 0..ow {
                            gym[[oc, base + i * ow + j]] = gy[[img, oc, i, j]];
                        }
                    }
                }
            }
            if accumulate {
                gw_mat += &gym.dot(&cols.t());
            }
            let gcols = w_mat.t().dot(&gym);
            col2im(
                &gcols,
                &mut gxp.slice_mut(s![n0..n1, .., .., ..]),
                kh,
                kw,
                self.stride,
                oh,
                ow,
            );
        }
        if accumulate {
            self.gw += &gw_mat
                .into_shape_with_order((o, ci, kh, kw))
                .expect("weight grad shape");
            for oc in 0..o {
                self.gb[oc] += gy.slice(s![.., oc, .., ..]).sum();
            }
        }
        let p = self.pad;
        let gx = if p == 0 {
            gxp
        } else {
            gxp.slice(s![.., .., p..hp - p, p..wp - p]).to_owned()
        };
        gx.into_dyn()
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>)) {
        visit4(&mut self.w, &mut self.gw, f);
        visit1(&mut self.b, &mut self.gb, f);
    }
}

// -- ReLU -----------------------------------------------------------------------

#[derive(Default)]
pub struct ReLU {
    mask: Option<ArrayD<bool>>,
}

impl ReLU {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for ReLU {
    fn forward(&mut self, mut x: ArrayD<f32>, pass: Pass) -> ArrayD<f32> {
        if pass.caches() {
            self.mask = Some(x.mapv(|v| v > 0.0));
        }
        x.mapv_inplace(|v| v.max(0.0));
        x
    }

    fn backward(&mut self, mut gy: ArrayD<f32>, _accumulate: bool) -> ArrayD<f32> {
        let mask = self.mask.as_ref().expect("backward without forward");
        gy.zip_mut_with(mask, |g, &m| {
            if !m {
                *g = 0.0;
            }
        });
        gy
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>)) {}
}

// -- Flatten ----------------------------------------------------------------------

#[derive(Default)]
pub struct Flatten {
    shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Flatten {
    fn forward(&mut self, x: ArrayD<f32>, pass: Pass) -> ArrayD<f32> {
        let shape = x.shape().to_vec();
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        if pass.caches() {
            self.shape = Some(shape);
        }
        x.into_shape_with_order((n, rest))
            .expect("flatten input contiguous")
            .into_dyn()
    }

    fn backward(&mut self, gy: ArrayD<f32>, _accumulate: bool) -> ArrayD<f32> {
        let shape = self.shape.as_ref().expect("backward without forward");
        gy.into_shape_with_order(shape.as_slice())
            .expect("gradient matches flattened shape")
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>)) {}
}

// -- MaxPool2 ----------------------------------------------------------------------

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
#[derive(Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, Array4<u8>)>, // input shape, argmax in window
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for MaxPool2 {
    fn forward(&mut self, x: ArrayD<f32>, pass: Pass) -> ArrayD<f32> {
        let x = as_4d(x);
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Array4::zeros((n, c, oh, ow));
        let mut arg = Array4::<u8>::zeros((n, c, oh, ow));
        for img in 0..n {
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut which = 0u8;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let v = x[[img, ch, 2 * i + di, 2 * j + dj]];
                                if v > best {
                                    best = v;
                                    which = (di * 2 + dj) as u8;
                                }
                            }
                        }
                        y[[img, ch, i, j]] = best;
                        arg[[img, ch, i, j]] = which;
                    }
                }
            }
        }
        if pass.caches() {
            self.cache = Some((vec![n, c, h, w], arg));
        }
        y.into_dyn()
    }

    fn backward(&mut self, gy: ArrayD<f32>, _accumulate: bool) -> ArrayD<f32> {
        let gy = as_4d(gy);
        let (shape, arg) = self.cache.as_ref().expect("backward without forward");
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (_, _, oh, ow) = gy.dim();
        let mut gx = Array4::zeros((n, c, h, w));
        for img in 0..n {
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let which = arg[[img, ch, i, j]] as usize;
                        let (di, dj) = (which / 2, which % 2);
                        gx[[img, ch, 2 * i + di, 2 * j + dj]] += gy[[img, ch, i, j]];
                    }
                }
            }
        }
        gx.into_dyn()
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>)) {}
}

// -- BatchNorm2d ---------------------------------------------------------------------

pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub momentum: f32,
    pub eps: f32,
    ggamma: Array1<f32>,
    gbeta: Array1<f32>,
    cache: Option<BnCache>,
}

struct BnCache {
    xhat: Array4<f32>,
    inv_std: Array1<f32>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: ArrayD<f32>, pass: Pass) -> ArrayD<f32> {
        let x = as_4d(x);
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f32;
        let (mean, inv_std) = if pass.train_stats() {
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for ch in 0..c {
                let v = x.slice(s![.., ch, .., ..]);
                let mu = v.sum() / m;
                mean[ch] = mu;
                var[ch] = v.fold(0.0, |acc, &val| acc + (val - mu) * (val - mu)) / m;
            }
            for ch in 0..c {
                self.running_mean[ch] =
                    (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                let unbiased = if m > 1.0 { var[ch] * m / (m - 1.0) } else { var[ch] };
                self.running_var[ch] =
                    (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
            }
            let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
            (mean, inv_std)
        } else {
            (
                self.running_mean.clone(),
                self.running_var.mapv(|v| 1.0 / (v + self.eps).sqrt()),
            )
        };
        let mut xhat = x;
        for ch in 0..c {
            let (mu, is) = (mean[ch], inv_std[ch]);
            xhat.slice_mut(s![.., ch, .., ..])
                .mapv_inplace(|v| (v - mu) * is);
        }
        let mut y = xhat.clone();
        for ch in 0..c {
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            y.slice_mut(s![.., ch, .., ..]).mapv_inplace(|v| g * v + b);
        }
        if pass.caches() {
            self.cache = Some(BnCache {
                xhat,
                inv_std,
                batch_stats: pass.train_stats(),
            });
        }
        y.into_dyn()
    }

    fn backward(&mut self, gy: ArrayD<f32>, accumulate: bool) -> ArrayD<f32> {
        let gy = as_4d(gy);
        let cache = self.cache.as_ref().expect("backward without forward");
        let (n, c, h, w) = gy.dim();
        let m = (n * h * w) as f32;
        let mut gx = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let gyc = gy.slice(s![.., ch, .., ..]);
            let xhatc = cache.xhat.slice(s![.., ch, .., ..]);
            let sum_gy = gyc.sum();
            let sum_gy_xhat = ndarray::Zip::from(&gyc)
                .and(&xhatc)
                .fold(0.0, |acc, &g, &xh| acc + g * xh);
            if accumulate {
                self.gbeta[ch] += sum_gy;
                self.ggamma[ch] += sum_gy_xhat;
            }
            let (g, is) = (self.gamma[ch], cache.inv_std[ch]);
            let mut gxc = gx.slice_mut(s![.., ch, .., ..]);
            if cache.batch_stats {
                // dx = gamma*inv_std/m * (m*gy - sum(gy) - xhat*sum(gy*xhat))
                let k = g * is / m;
                ndarray::Zip::from(&mut gxc)
                    .and(&gyc)
                    .and(&xhatc)
                    .for_each(|o, &gyv, &xh| {
                        *o = k * (m * gyv - sum_gy - xh * sum_gy_xhat);
                    });
            } else {
                // frozen statistics: the map is affine per channel
                let k = g * is;
                ndarray::Zip::from(&mut gxc).and(&gyc).for_each(|o, &gyv| {
                    *o = k * gyv;
                });
            }
        }
        gx.into_dyn()
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>)) {
        visit1(&mut self.gamma, &mut self.ggamma, f);
        visit1(&mut self.beta, &mut self.gbeta, f);
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>)) {
        visit1_state(&mut self.gamma, f);
        visit1_state(&mut self.beta, f);
        visit1_state(&mut self.running_mean, f);
        visit1_state(&mut self.running_var, f);
    }
}

// -- GlobalAvgPool ----------------------------------------------------------------

/// (N, C, H, W) -> (N, C) spatial mean.
#[derive(Default)]
pub struct GlobalAvgPool {
    hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: ArrayD<f32>, pass: Pass) -> ArrayD<f32> {
        let x = as_4d(x);
        let (n, c, h, w) = x.dim();
        let mut y = Array2::zeros((n, c));
        let denom = (h * w) as f32;
        for img in 0..n {
            for ch in 0..c {
                y[[img, ch]] = x.slice(s![img, ch, .., ..]).sum() / denom;
            }
        }
        if pass.caches() {
            self.hw = Some((h, w));
        }
        y.into_dyn()
    }

    fn backward(&mut self, gy: ArrayD<f32>, _accumulate: bool) -> ArrayD<f32> {
        let gy = as_2d(gy);
        let (h, w) = self.hw.expect("backward without forward");
        let (n, c) = gy.dim();
        let denom = (h * w) as f32;
        let mut gx = Array4::zeros((n, c, h, w));
        for img in 0..n {
            for ch in 0..c {
                gx.slice_mut(s![img, ch, .., ..])
                    .fill(gy[[img, ch]] / denom);
            }
        }
        gx.into_dyn()
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>)) {}
}
