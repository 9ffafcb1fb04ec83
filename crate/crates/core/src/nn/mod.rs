//! Minimal dense/conv network stack with explicit backward passes.
//!
//! Everything is f32, single-threaded, and seeded, so a fixed seed gives
//! bit-identical training runs on one machine. Layers cache what their
//! backward needs during a caching forward pass; `backward` must follow the
//! matching `forward`.

mod layers;

pub use layers::{BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Linear, MaxPool2, ReLU};

use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// How a forward pass behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// No caching; inference statistics. Backward is not possible.
    Infer,
    /// Caching; training statistics (batch-norm batch stats + running update).
    Train,
    /// Caching with inference statistics: frozen nets that still need
    /// gradients w.r.t. their input, and head-only fine-tuning.
    Probe,
}

impl Pass {
    pub fn caches(self) -> bool {
        self != Pass::Infer
    }

    pub fn train_stats(self) -> bool {
        self == Pass::Train
    }
}

/// Which parameters accumulate gradients / get visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    All,
    /// Final classification layer only.
    Head,
    /// No parameters (input gradients only).
    None,
}

pub trait Layer: Send {
    fn forward(&mut self, x: ArrayD<f32>, pass: Pass) -> ArrayD<f32>;
    /// Returns the gradient w.r.t. the layer input; accumulates parameter
    /// gradients when `accumulate` is set.
    fn backward(&mut self, gy: ArrayD<f32>, accumulate: bool) -> ArrayD<f32>;
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>));

    /// Every persistent tensor, trainable or not. Checkpoints and snapshots
    /// go through this so non-parameter state (batch-norm running stats)
    /// survives save/restore. Layers with extra buffers must override.
    fn visit_state(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>)) {
        self.visit_params(&mut |p, _| f(p));
    }
}

pub trait Network: Send {
    fn forward(&mut self, x: ArrayD<f32>, pass: Pass) -> ArrayD<f32>;
    fn backward(&mut self, gy: ArrayD<f32>, scope: ParamScope) -> ArrayD<f32>;
    fn visit_params(
        &mut self,
        scope: ParamScope,
        f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>),
    );
    /// See [`Layer::visit_state`].
    fn visit_state(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>));

    fn zero_grads(&mut self) {
        self.visit_params(ParamScope::All, &mut |_, g| g.fill(0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(ParamScope::All, &mut |p, _| n += p.len());
        n
    }
}

/// Layer pipeline. `head` marks the final classification layer for
/// `ParamScope::Head`.
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
    head: usize,
}

impl Sequential {
    /// `head` must index a parameterized layer; by convention the last Linear.
    pub fn new(layers: Vec<Box<dyn Layer>>, head: usize) -> Self {
        assert!(head < layers.len());
        Self { layers, head }
    }
}

impl Network for Sequential {
    fn forward(&mut self, mut x: ArrayD<f32>, pass: Pass) -> ArrayD<f32> {
        for layer in &mut self.layers {
            x = layer.forward(x, pass);
        }
        x
    }

    fn backward(&mut self, mut gy: ArrayD<f32>, scope: ParamScope) -> ArrayD<f32> {
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let accumulate = match scope {
                ParamScope::All => true,
                ParamScope::Head => i == self.head,
                ParamScope::None => false,
            };
            gy = layer.backward(gy, accumulate);
        }
        gy
    }

    fn visit_params(
        &mut self,
        scope: ParamScope,
        f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>),
    ) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let visit = match scope {
                ParamScope::All => true,
                ParamScope::Head => i == self.head,
                ParamScope::None => false,
            };
            if visit {
                layer.visit_params(f);
            }
        }
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>)) {
        for layer in &mut self.layers {
            layer.visit_state(f);
        }
    }
}

// -- optimizer ----------------------------------------------------------------

/// Adam with the standard bias correction. Slot order follows the network's
/// parameter visit order, which is stable for a fixed architecture.
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut dyn Network, scope: ParamScope) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut slot = 0;
        net.visit_params(scope, &mut |p, g| {
            if slot == ms.len() {
                ms.push(ArrayD::zeros(p.raw_dim()));
                vs.push(ArrayD::zeros(p.raw_dim()));
            }
            let (m, v) = (&mut ms[slot], &mut vs[slot]);
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(
                |p, g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * *g;
                    *v = b2 * *v + (1.0 - b2) * *g * *g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                },
            );
            slot += 1;
        });
        assert!(
            slot == ms.len(),
            "optimizer slot count changed between steps"
        );
    }
}

// -- losses -------------------------------------------------------------------

/// Row-wise stable softmax.
pub fn softmax(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f32 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean cross-entropy and its logit gradient `(softmax - onehot) / N`.
pub fn cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> (f32, Array2<f32>) {
    let n = logits.nrows();
    assert_eq!(n, labels.len());
    let probs = softmax(logits);
    let mut loss = 0.0f64;
    let mut grad = probs;
    for (i, &y) in labels.iter().enumerate() {
        loss -= (grad[[i, y]].max(1e-12) as f64).ln();
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|v| v / n as f32);
    ((loss / n as f64) as f32, grad)
}

pub fn accuracy(logits: &Array2<f32>, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn argmax_rows(logits: &Array2<f32>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// -- initialization -----------------------------------------------------------

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
pub fn init_linear(out: usize, inn: usize, rng: &mut ChaCha8Rng) -> (Array2<f32>, Array1<f32>) {
    let bound = 1.0 / (inn as f32).sqrt();
    let w = Array2::from_shape_simple_fn((out, inn), || rng.gen_range(-bound..bound));
    let b = Array1::from_shape_simple_fn(out, || rng.gen_range(-bound..bound));
    (w, b)
}

pub fn init_conv(
    out: usize,
    inn: usize,
    kh: usize,
    kw: usize,
    rng: &mut ChaCha8Rng,
) -> (ndarray::Array4<f32>, Array1<f32>) {
    let bound = 1.0 / ((inn * kh * kw) as f32).sqrt();
    let w = ndarray::Array4::from_shape_simple_fn((out, inn, kh, kw), || {
        rng.gen_range(-bound..bound)
    });
    let b = Array1::from_shape_simple_fn(out, || rng.gen_range(-bound..bound));
    (w, b)
}
