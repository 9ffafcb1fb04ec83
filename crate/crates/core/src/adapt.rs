//! Adaptation: trains the transformation network against a frozen classifier
//! so that per-image backward transforms maximize temperature-scaled MSP.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;
use crate::models::{batch_from_images, msp, Classifier, TransformNet, EVAL_BATCH};
use crate::nn::{Adam, Network, ParamScope, Pass};
use crate::seeds;
use crate::shiftgen::Axis;
use crate::transforms::{
    backward_transform_fwd, clamp_params, AxisBounds, ParamSpace, TransformParams,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    /// Softmax temperature applied to logits before taking the max probability.
    pub temperature: f32,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            lr: 5e-5,
            epochs: 30,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// -(MSP(phi(g_p(x))/s) - MSP(phi(x)/s)). The second term does not depend on
/// `p`; it anchors the value so identity parameters score exactly zero.
pub fn msp_gap_loss(
    p: &TransformParams,
    x: &ImageTensor,
    phi: &mut Classifier,
    s: f32,
) -> Result<f64> {
    let (transformed, _) = backward_transform_fwd(x, p)?;
    let msp_t = image_msp(phi, &transformed, s)?;
    let msp_o = image_msp(phi, x, s)?;
    Ok(-(msp_t - msp_o))
}

fn image_msp(phi: &mut Classifier, x: &ImageTensor, s: f32) -> Result<f64> {
    let logits = phi.logits(&batch_from_images(&[x]), Pass::Infer);
    let row: Vec<f32> = logits.row(0).to_vec();
    Ok(msp(&row, s)? as f64)
}

/// Per-image MSP for a whole set, batched.
fn set_msp(phi: &mut Classifier, images: &[ImageTensor], s: f32) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let logits = phi.logits(&batch_from_images(&refs), Pass::Infer);
        for row in logits.rows() {
            let row: Vec<f32> = row.to_vec();
            out.push(msp(&row, s)? as f64);
        }
    }
    Ok(out)
}

/// d MSP(l/s) / d l for one logit row: q_k (delta_kj - q_j) / s with
/// q = softmax(l/s) and k its argmax.
fn msp_logit_grad(row: &[f32], s: f32) -> Vec<f32> {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = row.iter().map(|&l| ((l - max) / s).exp()).collect();
    let sum: f32 = exps.iter().sum();
    let q: Vec<f32> = exps.iter().map(|&e| e / sum).collect();
    let k = row
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let qk = q[k];
    q.iter()
        .enumerate()
        .map(|(j, &qj)| {
            let delta = if j == k { 1.0 } else { 0.0 };
            qk * (delta - qj) / s
        })
        .collect()
}

/// Forward + backward through the transform and the frozen classifier for one
/// batch of already-clamped parameters. Returns per-image loss terms
/// (-MSP of the transformed image; the caller adds the constant) and
/// d(-MSP_t)/dp per image in (rotation, brightness, contrast) order.
fn batch_loss_grads(
    phi: &mut Classifier,
    images: &[&ImageTensor],
    params: &[TransformParams],
    s: f32,
) -> Result<(Vec<f64>, Vec<[f64; 3]>)> {
    assert_eq!(images.len(), params.len());
    let mut transformed = Vec::with_capacity(images.len());
    let mut ctxs = Vec::with_capacity(images.len());
    for (img, p) in images.iter().zip(params) {
        let (t, ctx) = backward_transform_fwd(img, p)?;
        transformed.push(t);
        ctxs.push(ctx);
    }
    let trefs: Vec<&ImageTensor> = transformed.iter().collect();
    let logits = phi.logits(&batch_from_images(&trefs), Pass::Probe);

    let n = images.len();
    let mut neg_msp = Vec::with_capacity(n);
    let mut dlogits = Array2::<f32>::zeros(logits.raw_dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let row: Vec<f32> = row.to_vec();
        neg_msp.push(-(msp(&row, s)? as f64));
        // loss_i = -MSP_t(i): flip the MSP gradient sign.
        for (j, g) in msp_logit_grad(&row, s).into_iter().enumerate() {
            dlogits[[i, j]] = -g;
        }
    }
    let gx = phi.backward_to_input(dlogits, ParamScope::None);
    let mut grads = Vec::with_capacity(n);
    for (i, ctx) in ctxs.iter().enumerate() {
        let gi = gx.index_axis(ndarray::Axis(0), i).to_owned();
        let (gp, _) = ctx.vjp(&gi);
        grads.push(gp);
    }
    Ok((neg_msp, grads))
}

/// Trains `net` in place on an unlabeled target set against the frozen `phi`.
/// Returns the per-epoch mean loss history (length `cfg.epochs`).
///
/// `phi`'s weights are never touched: backpropagation runs with
/// `ParamScope::None` and only the transformation net sees the optimizer.
pub fn train_transform_net(
    net: &mut TransformNet,
    target: &[ImageTensor],
    phi: &mut Classifier,
    cfg: &AdaptConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::InvalidDataset("empty adaptation target set".into()));
    }
    let shape = target[0].shape();
    if target.iter().any(|img| img.shape() != shape) {
        return Err(Error::ShapeMismatch(
            "adaptation target images must share one shape".into(),
        ));
    }
    if shape.0 != phi.norm.mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "target images have {} channels, classifier expects {}",
            shape.0,
            phi.norm.mean.len()
        )));
    }

    let s = cfg.temperature;
    let msp_orig = set_msp(phi, target, s)?;
    let space = net.space;
    let mut adam = Adam::new(cfg.lr);
    let n = target.len();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seeds::rng(cfg.seed, "adapt-epoch", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }

        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let imgs: Vec<&ImageTensor> = batch_idx.iter().map(|&i| &target[i]).collect();
            let batch = batch_from_images(&imgs);
            let raw = net.raw_outputs(&batch, Pass::Train);

            let b = imgs.len();
            let mut params = Vec::with_capacity(b);
            let mut masks = Vec::with_capacity(b);
            for i in 0..b {
                let raw3 = [raw[[i, 0]], raw[[i, 1]], raw[[i, 2]]];
                let p = clamp_params(raw3, &space);
                let arr = p.as_array();
                // Hard clamp: zero gradient where the raw output was clipped.
                masks.push([
                    (arr[0] == raw3[0]) as u8 as f32,
                    (arr[1] == raw3[1]) as u8 as f32,
                    (arr[2] == raw3[2]) as u8 as f32,
                ]);
                params.push(p);
            }

            let (neg_msp, grads) = batch_loss_grads(phi, &imgs, &params, s)?;
            for (pos, &i) in batch_idx.iter().enumerate() {
                loss_sum += neg_msp[pos] + msp_orig[i];
            }

            let mut graw = Array2::<f32>::zeros((b, 3));
            let scale = 1.0 / b as f32;
            for (i, (g, m)) in grads.iter().zip(&masks).enumerate() {
                for j in 0..3 {
                    graw[[i, j]] = g[j] as f32 * m[j] * scale;
                }
            }

            let tn = net.net_mut();
            tn.zero_grads();
            tn.backward(graw.into_dyn(), ParamScope::All);
            adam.step(tn, ParamScope::All);
        }
        history.push(loss_sum / n as f64);
    }
    Ok(history)
}

/// Runs the full inference path: predict parameters, apply the backward
/// transform, classify. Returns predictions plus the parameters actually
/// used per image, for auditing against known forward shifts.
pub fn transform_and_classify(
    net: &mut TransformNet,
    images: &[ImageTensor],
    phi: &mut Classifier,
) -> Result<(Vec<usize>, Vec<TransformParams>)> {
    let mut predictions = Vec::with_capacity(images.len());
    let mut all_params = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        let params = net.predict_params(&refs);
        let mut transformed = Vec::with_capacity(chunk.len());
        for (img, p) in refs.iter().zip(&params) {
            let (t, _) = backward_transform_fwd(img, p)?;
            transformed.push(t);
        }
        let trefs: Vec<&ImageTensor> = transformed.iter().collect();
        predictions.extend(phi.predict(&trefs));
        all_params.extend(params);
    }
    Ok((predictions, all_params))
}

fn axis_bounds(space: &ParamSpace, axis: Axis) -> &AxisBounds {
    match axis {
        Axis::Rotation => &space.rotation,
        Axis::Brightness => &space.brightness,
        Axis::Contrast => &space.contrast,
    }
}

/// Brute-force single-axis MSP maximization used as an independent check on
/// the trained net. Evaluates a uniform grid over the axis bounds (identity
/// always included; a resolution-1 grid is just the identity point) and
/// returns (best parameter value, best MSP). Ties keep the first maximum.
pub fn grid_search_msp_oracle(
    x: &ImageTensor,
    phi: &mut Classifier,
    axis: Axis,
    space: &ParamSpace,
    resolution: usize,
    s: f32,
) -> Result<(f64, f64)> {
    if resolution == 0 {
        return Err(Error::InvalidParameter(
            "grid resolution must be >= 1".into(),
        ));
    }
    let bounds = axis_bounds(space, axis);
    let mut values: Vec<f32> = if resolution == 1 {
        vec![bounds.identity]
    } else {
        let step = (bounds.high - bounds.low) / (resolution - 1) as f32;
        (0..resolution)
            .map(|i| bounds.low + step * i as f32)
            .collect()
    };
    if !values.iter().any(|&v| (v - bounds.identity).abs() < 1e-6) {
        values.push(bounds.identity);
    }

    let identity = space.identity();
    let mut best: Option<(f64, f64)> = None;
    for &v in &values {
        let mut p = identity;
        match axis {
            Axis::Rotation => p.rotation_deg = v,
            Axis::Brightness => p.brightness = v,
            Axis::Contrast => p.contrast = v,
        }
        let (t, _) = backward_transform_fwd(x, &p)?;
        let m = image_msp(phi, &t, s)?;
        if best.map_or(true, |(_, bm)| m > bm) {
            best = Some((v as f64, m));
        }
    }
    Ok(best.unwrap())
}
