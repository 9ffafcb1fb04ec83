//! Classifier and transformation-network architectures, the temperature-scaled
//! MSP probe, the shared supervised training loop, and checkpoint I/O.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, Array4, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetId, LabeledDataset};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{
    self, Adam, BatchNorm2d, Conv2d, Flatten, GlobalAvgPool, Layer, Linear, MaxPool2, Network,
    ParamScope, Pass, ReLU, Sequential,
};
use crate::seeds;
use crate::transforms::{clamp_params, ParamSpace, TransformParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchId {
    MnistCnn,
    Resnet18,
    MnistTnet,
    CifarTnet,
}

impl ArchId {
    pub fn name(self) -> &'static str {
        match self {
            ArchId::MnistCnn => "mnist-cnn",
            ArchId::Resnet18 => "resnet18",
            ArchId::MnistTnet => "mnist-tnet",
            ArchId::CifarTnet => "cifar-tnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist-cnn" => Ok(ArchId::MnistCnn),
            "resnet18" => Ok(ArchId::Resnet18),
            "mnist-tnet" => Ok(ArchId::MnistTnet),
            "cifar-tnet" => Ok(ArchId::CifarTnet),
            other => Err(Error::Checkpoint(format!("unknown architecture {other:?}"))),
        }
    }
}

// -- temperature-scaled MSP -----------------------------------------------------

/// Max over softmax(logits / s). In (0, 1]; equals 1/C for uniform logits.
pub fn msp(logits: &[f32], s: f32) -> Result<f32> {
    if !(s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature {s} must be positive"
        )));
    }
    if logits.is_empty() {
        return Err(Error::InvalidParameter("empty logit vector".into()));
    }
    Ok(msp_unchecked(logits, s))
}

/// Caller guarantees s > 0 and a non-empty slice.
pub(crate) fn msp_unchecked(logits: &[f32], s: f32) -> f32 {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = logits.iter().map(|&l| ((l - max) / s).exp()).sum();
    1.0 / sum
}

// -- batches and normalization ----------------------------------------------------

pub fn batch_from_images(images: &[&ImageTensor]) -> Array4<f32> {
    let (c, h, w) = images[0].shape();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).assign(img.data());
    }
    out
}

pub fn batch_from_dataset(ds: &LabeledDataset, idx: &[usize]) -> (Array4<f32>, Vec<usize>) {
    let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| ds.image(i)).collect();
    let labels = idx.iter().map(|&i| ds.label(i)).collect();
    (batch_from_images(&imgs), labels)
}

/// Per-channel standardization applied after backward transforms, immediately
/// before the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn for_dataset(id: DatasetId) -> Self {
        match id {
            DatasetId::Mnist => Normalization {
                mean: vec![0.1307],
                std: vec![0.3081],
            },
            DatasetId::Cifar10 => Normalization {
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            },
        }
    }

    pub fn apply(&self, batch: &mut Array4<f32>) {
        for (c, (&m, &sd)) in self.mean.iter().zip(&self.std).enumerate() {
            batch
                .slice_mut(s![.., c, .., ..])
                .mapv_inplace(|v| (v - m) / sd);
        }
    }

    /// Chain rule through `apply`: d(input) = d(normalized) / std.
    pub fn backprop(&self, grad: &mut Array4<f32>) {
        for (c, &sd) in self.std.iter().enumerate() {
            grad.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v / sd);
        }
    }
}

// -- classifier ---------------------------------------------------------------------

pub struct Classifier {
    pub arch: ArchId,
    pub num_classes: usize,
    pub norm: Normalization,
    net: Box<dyn Network>,
}

pub const EVAL_BATCH: usize = 256;

impl Classifier {
    pub(crate) fn from_parts(
        arch: ArchId,
        num_classes: usize,
        norm: Normalization,
        net: Box<dyn Network>,
    ) -> Self {
        Self {
            arch,
            num_classes,
            norm,
            net,
        }
    }

    /// Normalizes and runs the network. Input batch is raw pixels in [0, 1].
    pub fn logits(&mut self, batch: &Array4<f32>, pass: Pass) -> Array2<f32> {
        let mut x = batch.clone();
        self.norm.apply(&mut x);
        self.net
            .forward(x.into_dyn(), pass)
            .into_dimensionality()
            .expect("classifier output is 2-d")
    }

    /// Gradient w.r.t. the raw pixel batch of the last cached forward.
    pub fn backward_to_input(&mut self, dlogits: Array2<f32>, scope: ParamScope) -> Array4<f32> {
        let mut gx: Array4<f32> = self
            .net
            .backward(dlogits.into_dyn(), scope)
            .into_dimensionality()
            .expect("classifier input is 4-d");
        self.norm.backprop(&mut gx);
        gx
    }

    pub fn predict(&mut self, images: &[&ImageTensor]) -> Vec<usize> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let batch = batch_from_images(chunk);
            let logits = self.logits(&batch, Pass::Infer);
            out.extend(nn::argmax_rows(&logits));
        }
        out
    }

    pub fn accuracy_on(&mut self, ds: &LabeledDataset, idx: &[usize]) -> f64 {
        let mut hits = 0usize;
        for chunk in idx.chunks(EVAL_BATCH) {
            let (batch, labels) = batch_from_dataset(ds, chunk);
            let logits = self.logits(&batch, Pass::Infer);
            hits += nn::argmax_rows(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, y)| p == y)
                .count();
        }
        hits as f64 / idx.len() as f64
    }

    pub fn accuracy(&mut self, ds: &LabeledDataset) -> f64 {
        let idx: Vec<usize> = (0..ds.len()).collect();
        self.accuracy_on(ds, &idx)
    }

    pub fn net_mut(&mut self) -> &mut dyn Network {
        self.net.as_mut()
    }

    /// Full persistent state, including batch-norm running stats.
    pub fn snapshot(&mut self) -> Vec<ArrayD<f32>> {
        let mut out = Vec::new();
        self.net.visit_state(&mut |p| out.push(p.clone()));
        out
    }

    pub fn restore(&mut self, snapshot: &[ArrayD<f32>]) {
        let mut i = 0;
        self.net.visit_state(&mut |p| {
            p.assign(&snapshot[i]);
            i += 1;
        });
        assert_eq!(i, snapshot.len(), "snapshot does not match architecture");
    }
}

/// Deep copy: rebuilds the architecture and restores the full state,
/// batch-norm running stats included.
pub fn clone_classifier(src: &mut Classifier) -> Classifier {
    let mut rng = seeds::rng(0, "clone-scaffold", &[]);
    let net: Box<dyn Network> = match src.arch {
        ArchId::MnistCnn => Box::new(build_mnist_cnn(src.num_classes, &mut rng)),
        ArchId::Resnet18 => Box::new(build_resnet18(src.num_classes, &mut rng)),
        other => panic!("not a classifier architecture: {other:?}"),
    };
    let mut copy = Classifier::from_parts(src.arch, src.num_classes, src.norm.clone(), net);
    copy.restore(&src.snapshot());
    copy
}

/// Untrained classifier for the dataset: the 5-layer CNN for MNIST or a
/// CIFAR-style ResNet-18.
pub fn build_source_classifier(id: DatasetId, seed: u64) -> Classifier {
    let mut rng = seeds::rng(seed, "classifier-init", &[]);
    let net: Box<dyn Network> = match id {
        DatasetId::Mnist => Box::new(build_mnist_cnn(id.num_classes(), &mut rng)),
        DatasetId::Cifar10 => Box::new(build_resnet18(id.num_classes(), &mut rng)),
    };
    Classifier {
        arch: match id {
            DatasetId::Mnist => ArchId::MnistCnn,
            DatasetId::Cifar10 => ArchId::Resnet18,
        },
        num_classes: id.num_classes(),
        norm: Normalization::for_dataset(id),
        net,
    }
}

fn build_mnist_cnn(classes: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Sequential {
    // 28x28 -> conv3 -> 26x26 -> conv3 -> 24x24; no pooling
    Sequential::new(
        vec![
            Box::new(Conv2d::from_rng(6, 1, 3, 1, 0, rng)),
            Box::new(ReLU::new()),
            Box::new(Conv2d::from_rng(16, 6, 3, 1, 0, rng)),
            Box::new(ReLU::new()),
            Box::new(Flatten::new()),
            Box::new(Linear::from_rng(120, 16 * 24 * 24, rng)),
            Box::new(ReLU::new()),
            Box::new(Linear::from_rng(84, 120, rng)),
            Box::new(ReLU::new()),
            Box::new(Linear::from_rng(classes, 84, rng)),
        ],
        9,
    )
}

// -- ResNet-18 (CIFAR variant: 3x3 stem, no initial pooling) ------------------------

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: ReLU,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: ReLU,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(inn: usize, out: usize, stride: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let down = if stride != 1 || inn != out {
            let (w, b) = nn::init_conv(out, inn, 1, 1, rng);
            Some((Conv2d::new(w, b, stride, 0), BatchNorm2d::new(out)))
        } else {
            None
        };
        Self {
            conv1: Conv2d::from_rng(out, inn, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(out),
            relu1: ReLU::new(),
            conv2: Conv2d::from_rng(out, out, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(out),
            relu2: ReLU::new(),
            down,
        }
    }
}

impl Layer for BasicBlock {
    fn forward(&mut self, x: ArrayD<f32>, pass: Pass) -> ArrayD<f32> {
        let skip = match &mut self.down {
            Some((c, b)) => b.forward(c.forward(x.clone(), pass), pass),
            None => x.clone(),
        };
        let mut h = self.conv1.forward(x, pass);
        h = self.bn1.forward(h, pass);
        h = self.relu1.forward(h, pass);
        h = self.conv2.forward(h, pass);
        h = self.bn2.forward(h, pass);
        self.relu2.forward(h + skip, pass)
    }

    fn backward(&mut self, gy: ArrayD<f32>, accumulate: bool) -> ArrayD<f32> {
        let g = self.relu2.backward(gy, accumulate);
        let gskip = match &mut self.down {
            Some((c, b)) => c.backward(b.backward(g.clone(), accumulate), accumulate),
            None => g.clone(),
        };
        let mut gm = self.bn2.backward(g, accumulate);
        gm = self.conv2.backward(gm, accumulate);
        gm = self.relu1.backward(gm, accumulate);
        gm = self.bn1.backward(gm, accumulate);
        gm = self.conv1.backward(gm, accumulate);
        gm + gskip
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>, &mut ArrayD<f32>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some((c, b)) = &mut self.down {
            c.visit_params(f);
            b.visit_params(f);
        }
    }

    fn visit_state(&mut self, f: &mut dyn FnMut(&mut ArrayD<f32>)) {
        self.conv1.visit_state(f);
        self.bn1.visit_state(f);
        self.conv2.visit_state(f);
        self.bn2.visit_state(f);
        if let Some((c, b)) = &mut self.down {
            c.visit_state(f);
            b.visit_state(f);
        }
    }
}

fn build_resnet18(classes: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Sequential {
    let mut layers: Vec<Box<dyn Layer>> = vec![
        Box::new(Conv2d::from_rng(64, 3, 3, 1, 1, rng)),
        Box::new(BatchNorm2d::new(64)),
        Box::new(ReLU::new()),
    ];
    let stages: [(usize, usize, usize); 4] =
        [(64, 64, 1), (64, 128, 2), (128, 256, 2), (256, 512, 2)];
    for (inn, out, stride) in stages {
        layers.push(Box::new(BasicBlock::new(inn, out, stride, rng)));
        layers.push(Box::new(BasicBlock::new(out, out, 1, rng)));
    }
    layers.push(Box::new(GlobalAvgPool::new()));
    layers.push(Box::new(Linear::from_rng(classes, 512, rng)));
    let head = layers.len() - 1;
    Sequential::new(layers, head)
}

// -- transformation network ------------------------------------------------------------

/// Predicts one (rotation, brightness, contrast) triple per image. Fresh nets
/// predict exactly the identity triple: the final layer has zero weights and
/// identity bias.
pub struct TransformNet {
    pub arch: ArchId,
    pub space: ParamSpace,
    net: Sequential,
}

impl TransformNet {
    /// Raw head outputs before clamping; rows are (rotation, brightness, contrast).
    pub fn raw_outputs(&mut self, batch: &Array4<f32>, pass: Pass) -> Array2<f32> {
        self.net
            .forward(batch.clone().into_dyn(), pass)
            .into_dimensionality()
            .expect("transform net output is 2-d")
    }

    pub fn backward(&mut self, grad: Array2<f32>, scope: ParamScope) {
        self.net.backward(grad.into_dyn(), scope);
    }

    pub fn net_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    pub fn predict_params(&mut self, images: &[&ImageTensor]) -> Vec<TransformParams> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let batch = batch_from_images(chunk);
            let raw = self.raw_outputs(&batch, Pass::Infer);
            for row in raw.rows() {
                out.push(clamp_params([row[0], row[1], row[2]], &self.space));
            }
        }
        out
    }
}

pub fn build_transform_net(id: DatasetId, space: ParamSpace, seed: u64) -> TransformNet {
    let mut rng = seeds::rng(seed, "tnet-init", &[]);
    let identity = space.identity();
    let bias = Array1::from(vec![
        identity.rotation_deg,
        identity.brightness,
        identity.contrast,
    ]);
    let (arch, net) = match id {
        DatasetId::Mnist => {
            let layers: Vec<Box<dyn Layer>> = vec![
                Box::new(Conv2d::from_rng(6, 1, 3, 1, 0, &mut rng)),
                Box::new(ReLU::new()),
                Box::new(Conv2d::from_rng(16, 6, 3, 1, 0, &mut rng)),
                Box::new(ReLU::new()),
                Box::new(Flatten::new()),
                Box::new(Linear::from_rng(120, 16 * 24 * 24, &mut rng)),
                Box::new(ReLU::new()),
                Box::new(Linear::from_rng(84, 120, &mut rng)),
                Box::new(ReLU::new()),
                Box::new(Linear::new(Array2::zeros((3, 84)), bias)),
            ];
            (ArchId::MnistTnet, Sequential::new(layers, 9))
        }
        DatasetId::Cifar10 => {
            // 32 -> conv5 -> 28 -> pool -> 14 -> conv5 -> 10
            let layers: Vec<Box<dyn Layer>> = vec![
                Box::new(Conv2d::from_rng(6, 3, 5, 1, 0, &mut rng)),
                Box::new(ReLU::new()),
                Box::new(MaxPool2::new()),
                Box::new(Conv2d::from_rng(16, 6, 5, 1, 0, &mut rng)),
                Box::new(ReLU::new()),
                Box::new(Flatten::new()),
                Box::new(Linear::from_rng(120, 16 * 10 * 10, &mut rng)),
                Box::new(ReLU::new()),
                Box::new(Linear::from_rng(84, 120, &mut rng)),
                Box::new(ReLU::new()),
                Box::new(Linear::new(Array2::zeros((3, 84)), bias)),
            ];
            (ArchId::CifarTnet, Sequential::new(layers, 10))
        }
    };
    TransformNet { arch, space, net }
}

// -- supervised training loop -------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub augment: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            patience: 5,
            max_epochs: 50,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainReport {
    /// Running maximum of per-epoch validation accuracy.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.val_accuracy
            .iter()
            .map(|&a| {
                best = best.max(a);
                best
            })
            .collect()
    }
}

/// Early-stopped Adam training on explicit train/validation index sets.
/// Restores the best-validation weights before returning.
pub fn fit_classifier(
    model: &mut Classifier,
    data: &LabeledDataset,
    train_idx: &[usize],
    val_idx: &[usize],
    scope: ParamScope,
    seed: u64,
    cfg: &FitConfig,
) -> Result<TrainReport> {
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::InvalidDataset(
            "empty train or validation split".into(),
        ));
    }
    let pass = if scope == ParamScope::All {
        Pass::Train
    } else {
        Pass::Probe
    };
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport {
        val_accuracy: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
    };
    let mut best: Vec<ArrayD<f32>> = model.snapshot();
    let mut since_best = 0usize;
    let mut order: Vec<usize> = train_idx.to_vec();
    for epoch in 0..cfg.max_epochs {
        let mut rng = seeds::rng(seed, "fit-epoch", &[epoch as u64]);
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (mut batch, labels) = batch_from_dataset(data, chunk);
            if cfg.augment {
                augment_batch(&mut batch, &mut rng);
            }
            let logits = model.logits(&batch, pass);
            let (_, dlogits) = nn::cross_entropy(&logits, &labels);
            model.net.zero_grads();
            model.net.backward(dlogits.into_dyn(), scope);
            opt.step(model.net.as_mut(), scope);
        }
        let acc = model.accuracy_on(data, val_idx);
        report.val_accuracy.push(acc);
        if acc > report.best_val_accuracy {
            report.best_val_accuracy = acc;
            report.best_epoch = epoch;
            best = model.snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.restore(&best);
    Ok(report)
}

/// The source recipe: seeded 80/20 train/validation split, Adam 1e-3, early
/// stopping; augmentation only for CIFAR.
pub fn train_source_classifier(
    model: &mut Classifier,
    train: &LabeledDataset,
    seed: u64,
) -> Result<TrainReport> {
    let distinct: std::collections::BTreeSet<usize> = train.labels().iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidDataset(
            "training data has fewer than two classes".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let mut rng = seeds::rng(seed, "source-split", &[]);
    shuffle(&mut idx, &mut rng);
    let n_val = (train.len() / 5).max(1);
    let (val_idx, train_idx) = idx.split_at(n_val);
    let cfg = FitConfig {
        augment: model.arch == ArchId::Resnet18,
        ..FitConfig::default()
    };
    fit_classifier(model, train, train_idx, val_idx, ParamScope::All, seed, &cfg)
}

pub(crate) fn shuffle(idx: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    // Fisher-Yates; rand::seq::SliceRandom would also do, pinned here so the
    // permutation is stable across rand versions
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
}

/// Horizontal flips + 4-pixel random crops, in place on raw pixels.
fn augment_batch(batch: &mut Array4<f32>, rng: &mut rand_chacha::ChaCha8Rng) {
    let (n, c, h, w) = batch.dim();
    for img in 0..n {
        if rng.gen_bool(0.5) {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w / 2 {
                        let tmp = batch[[img, ch, i, j]];
                        batch[[img, ch, i, j]] = batch[[img, ch, i, w - 1 - j]];
                        batch[[img, ch, i, w - 1 - j]] = tmp;
                    }
                }
            }
        }
        let (di, dj) = (rng.gen_range(0..9) as isize, rng.gen_range(0..9) as isize);
        let (oi, oj) = (di - 4, dj - 4);
        if oi == 0 && oj == 0 {
            continue;
        }
        let mut shifted = ndarray::Array3::zeros((c, h, w));
        for ch in 0..c {
            for i in 0..h {
                let si = i as isize + oi;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let sj = j as isize + oj;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    shifted[[ch, i, j]] = batch[[img, ch, si as usize, sj as usize]];
                }
            }
        }
        batch.slice_mut(s![img, .., .., ..]).assign(&shifted);
    }
}

// -- checkpoints -----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub arch: String,
    pub dataset: String,
    pub classes: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub seed: u64,
    pub val_accuracy: Option<f64>,
    /// Baseline bookkeeping: fine-tuning scheme and label budget, when relevant.
    pub scheme: Option<String>,
    pub n_labels: Option<usize>,
}

const WEIGHTS: &str = "weights.bin";
const META: &str = "meta.toml";
const WEIGHTS_MAGIC: &[u8; 4] = b"UNSW";

fn write_weights(path: &Path, net: &mut dyn Network) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(WEIGHTS_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(1).map_err(io)?;
    let mut count = 0u32;
    net.visit_state(&mut |_| count += 1);
    w.write_u32::<LittleEndian>(count).map_err(io)?;
    let mut result = Ok(());
    net.visit_state(&mut |p| {
        if result.is_err() {
            return;
        }
        result = (|| {
            w.write_u32::<LittleEndian>(p.ndim() as u32).map_err(io)?;
            for &d in p.shape() {
                w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
            }
            for &v in p.iter() {
                w.write_f32::<LittleEndian>(v).map_err(io)?;
            }
            Ok(())
        })();
    });
    result?;
    w.flush().map_err(io)
}

fn read_weights(path: &Path, net: &mut dyn Network) -> Result<()> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(bad("not a weights file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    if version != 1 {
        return Err(bad(format!("unsupported weights version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    let mut expected = 0u32;
    net.visit_state(&mut |_| expected += 1);
    if count != expected {
        return Err(bad(format!(
            "checkpoint has {count} tensors, architecture has {expected}"
        )));
    }
    let mut result = Ok(());
    net.visit_state(&mut |p| {
        if result.is_err() {
            return;
        }
        result = (|| {
            let ndim = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize);
            }
            if dims != p.shape() {
                return Err(bad(format!(
                    "tensor shape {dims:?} does not match architecture {:?}",
                    p.shape()
                )));
            }
            for v in p.iter_mut() {
                *v = r.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
            }
            Ok(())
        })();
    });
    result
}

pub fn save_classifier(dir: &Path, model: &mut Classifier, meta: &ClassifierMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let toml = toml::to_string_pretty(meta)
        .map_err(|e| Error::Checkpoint(format!("serializing metadata: {e}")))?;
    fs::write(dir.join(META), toml).map_err(|e| Error::io(&dir.join(META), e))?;
    write_weights(&dir.join(WEIGHTS), model.net.as_mut())
}

pub fn load_classifier(dir: &Path) -> Result<(Classifier, ClassifierMeta)> {
    let mpath = dir.join(META);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: ClassifierMeta =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("parsing metadata: {e}")))?;
    let arch = ArchId::parse(&meta.arch)?;
    let id = DatasetId::parse(&meta.dataset)?;
    let mut model = build_source_classifier(id, meta.seed);
    if model.arch != arch {
        return Err(Error::Checkpoint(format!(
            "architecture {} does not belong to dataset {}",
            meta.arch, meta.dataset
        )));
    }
    model.num_classes = meta.classes;
    model.norm = Normalization {
        mean: meta.mean.clone(),
        std: meta.std.clone(),
    };
    read_weights(&dir.join(WEIGHTS), model.net.as_mut())?;
    Ok((model, meta))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TnetMeta {
    pub arch: String,
    pub dataset: String,
    pub seed: u64,
    pub space: ParamSpace,
    /// (epoch, mean loss) pairs from adaptation.
    pub loss_history: Vec<f64>,
}

pub fn save_transform_net(dir: &Path, net: &mut TransformNet, meta: &TnetMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let toml = toml::to_string_pretty(meta)
        .map_err(|e| Error::Checkpoint(format!("serializing metadata: {e}")))?;
    fs::write(dir.join(META), toml).map_err(|e| Error::io(&dir.join(META), e))?;
    write_weights(&dir.join(WEIGHTS), &mut net.net)
}

pub fn load_transform_net(dir: &Path) -> Result<(TransformNet, TnetMeta)> {
    let mpath = dir.join(META);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: TnetMeta =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("parsing metadata: {e}")))?;
    let id = DatasetId::parse(&meta.dataset)?;
    let mut net = build_transform_net(id, meta.space.clone(), meta.seed);
    if net.arch != ArchId::parse(&meta.arch)? {
        return Err(Error::Checkpoint(format!(
            "architecture {} does not belong to dataset {}",
            meta.arch, meta.dataset
        )));
    }
    read_weights(&dir.join(WEIGHTS), &mut net.net)?;
    Ok((net, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::apply_backward_transform;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_images(n: usize, c: usize, hw: usize, seed: u64) -> Vec<ImageTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                ImageTensor::new(Array3::from_shape_simple_fn((c, hw, hw), || {
                    rng.gen_range(0.0..1.0f32)
                }))
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn msp_matches_hand_computed_values() {
        assert_eq!(msp(&[0.7; 10], 1.0).unwrap(), 0.1);
        assert_eq!(msp(&[0.0; 4], 3.0).unwrap(), 0.25);
        let two_class = msp(&[2.0, 0.0], 1.0).unwrap();
        assert!((two_class - 0.880_797) .abs() < 1e-5, "{two_class}");
        let hot = msp(&[2.0, 0.0], 1000.0).unwrap();
        assert!((hot - 0.5).abs() < 1e-3);
        assert!(msp(&[1.0], 0.0).is_err());
        assert!(msp(&[1.0], -1.0).is_err());
        assert!(msp(&[], 1.0).is_err());
    }

    #[test]
    fn msp_is_monotone_nonincreasing_in_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let logits: Vec<f32> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let s1 = rng.gen_range(0.1..10.0f32);
            let s2 = s1 * rng.gen_range(1.0..5.0f32);
            let a = msp(&logits, s1).unwrap();
            let b = msp(&logits, s2).unwrap();
            assert!(a >= b - 1e-7, "msp({s1}) = {a} < msp({s2}) = {b}");
        }
    }

    #[test]
    fn untrained_classifiers_produce_valid_distributions() {
        for (id, c, hw) in [(DatasetId::Mnist, 1, 28), (DatasetId::Cifar10, 3, 32)] {
            let mut model = build_source_classifier(id, 5);
            let imgs = random_images(2, c, hw, 6);
            let refs: Vec<&ImageTensor> = imgs.iter().collect();
            let logits = model.logits(&batch_from_images(&refs), Pass::Infer);
            assert_eq!(logits.dim(), (2, 10));
            assert!(logits.iter().all(|v| v.is_finite()));
            let probs = nn::softmax(&logits);
            for row in probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn fresh_transform_net_predicts_identity_everywhere() {
        let mut tnet = build_transform_net(DatasetId::Mnist, ParamSpace::default(), 11);
        let imgs = random_images(100, 1, 28, 12);
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        let params = tnet.predict_params(&refs);
        for (img, p) in refs.iter().zip(&params) {
            assert_eq!(p.as_array(), [0.0, 1.0, 1.0]);
            let back = apply_backward_transform(img, p).unwrap();
            assert_eq!(back.max_abs_diff(img), 0.0);
        }
        let mut cifar = build_transform_net(DatasetId::Cifar10, ParamSpace::default(), 13);
        let imgs = random_images(5, 3, 32, 14);
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        for p in cifar.predict_params(&refs) {
            assert_eq!(p.as_array(), [0.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn transform_net_outputs_are_clamped_into_space() {
        let mut tnet = build_transform_net(DatasetId::Mnist, ParamSpace::default(), 15);
        let mut slot = 0;
        tnet.net_mut().visit_params(ParamScope::All, &mut |p, _| {
            slot += 1;
            if p.ndim() == 1 && p.len() == 3 {
                p.fill(999.0);
            }
        });
        let imgs = random_images(3, 1, 28, 16);
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        for p in tnet.predict_params(&refs) {
            assert_eq!(p.as_array(), [180.0, 4.0, 4.0]);
        }
    }

    fn toy_two_class(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let base = if class == 0 { 0.2 } else { 0.8 };
            let img = Array3::from_shape_simple_fn((1, 6, 6), || {
                (base + rng.gen_range(-0.1..0.1f32)).clamp(0.0, 1.0)
            });
            images.push(ImageTensor::new(img).unwrap());
            labels.push(class);
        }
        LabeledDataset::new("toy", images, labels, 2).unwrap()
    }

    fn toy_classifier(seed: u64) -> Classifier {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Classifier {
            arch: ArchId::MnistCnn,
            num_classes: 2,
            norm: Normalization {
                mean: vec![0.0],
                std: vec![1.0],
            },
            net: Box::new(Sequential::new(
                vec![
                    Box::new(Flatten::new()),
                    Box::new(Linear::from_rng(2, 36, &mut rng)),
                ],
                1,
            )),
        }
    }

    #[test]
    fn fit_converges_and_stops_early_on_separable_data() {
        let data = toy_two_class(60, 21);
        let mut model = toy_classifier(22);
        let train_idx: Vec<usize> = (0..48).collect();
        let val_idx: Vec<usize> = (48..60).collect();
        let cfg = FitConfig {
            lr: 0.05,
            batch_size: 16,
            patience: 5,
            max_epochs: 50,
            augment: false,
        };
        let report =
            fit_classifier(&mut model, &data, &train_idx, &val_idx, ParamScope::All, 23, &cfg)
                .unwrap();
        assert_eq!(report.best_val_accuracy, 1.0);
        assert!(report.val_accuracy.len() < 50, "early stopping never fired");
        let best = report.best_so_far();
        assert!(best.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(model.accuracy(&data), 1.0);
    }

    #[test]
    fn fit_is_deterministic_for_fixed_seed() {
        let data = toy_two_class(40, 31);
        let mut a = toy_classifier(32);
        let mut b = toy_classifier(32);
        let ra = train_source_classifier(&mut a, &data, 33).unwrap();
        let rb = train_source_classifier(&mut b, &data, 33).unwrap();
        assert_eq!(ra.val_accuracy, rb.val_accuracy);
        let (sa, sb) = (a.snapshot(), b.snapshot());
        for (x, y) in sa.iter().zip(&sb) {
            assert!(x.iter().zip(y.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn degenerate_training_data_is_rejected() {
        let imgs = random_images(4, 1, 6, 41);
        let data = LabeledDataset::new("t", imgs, vec![1, 1, 1, 1], 2).unwrap();
        let mut model = toy_classifier(42);
        assert!(train_source_classifier(&mut model, &data, 43).is_err());
    }

    #[test]
    fn classifier_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_source_classifier(DatasetId::Mnist, 51);
        let meta = ClassifierMeta {
            arch: model.arch.name().into(),
            dataset: "mnist".into(),
            classes: 10,
            mean: model.norm.mean.clone(),
            std: model.norm.std.clone(),
            seed: 51,
            val_accuracy: Some(0.5),
            scheme: None,
            n_labels: None,
        };
        save_classifier(dir.path(), &mut model, &meta).unwrap();
        let (mut loaded, meta2) = load_classifier(dir.path()).unwrap();
        assert_eq!(meta2.seed, 51);
        assert_eq!(meta2.val_accuracy, Some(0.5));
        let imgs = random_images(3, 1, 28, 52);
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        let batch = batch_from_images(&refs);
        let la = model.logits(&batch, Pass::Infer);
        let lb = loaded.logits(&batch, Pass::Infer);
        assert!(la.iter().zip(lb.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn transform_net_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut tnet = build_transform_net(DatasetId::Mnist, ParamSpace::default(), 61);
        let meta = TnetMeta {
            arch: tnet.arch.name().into(),
            dataset: "mnist".into(),
            seed: 61,
            space: tnet.space,
            loss_history: vec![-0.01, -0.05],
        };
        save_transform_net(dir.path(), &mut tnet, &meta).unwrap();
        let (mut loaded, meta2) = load_transform_net(dir.path()).unwrap();
        assert_eq!(meta2.loss_history, vec![-0.01, -0.05]);
        let imgs = random_images(2, 1, 28, 62);
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        let batch = batch_from_images(&refs);
        let a = tnet.raw_outputs(&batch, Pass::Infer);
        let b = loaded.raw_outputs(&batch, Pass::Infer);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupt_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_source_classifier(DatasetId::Mnist, 71);
        let meta = ClassifierMeta {
            arch: model.arch.name().into(),
            dataset: "mnist".into(),
            classes: 10,
            mean: vec![0.1307],
            std: vec![0.3081],
            seed: 71,
            val_accuracy: None,
            scheme: None,
            n_labels: None,
        };
        save_classifier(dir.path(), &mut model, &meta).unwrap();
        let wpath = dir.path().join("weights.bin");
        let mut bytes = fs::read(&wpath).unwrap();
        bytes[0] = b'X';
        fs::write(&wpath, &bytes).unwrap();
        assert!(load_classifier(dir.path()).is_err());
    }

    #[test]
    fn resnet_checkpoint_and_clone_keep_running_stats() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_source_classifier(DatasetId::Cifar10, 81);
        // A train-mode pass moves the batch-norm running stats off their init.
        let imgs = random_images(4, 3, 32, 82);
        let refs: Vec<&ImageTensor> = imgs.iter().collect();
        let batch = batch_from_images(&refs);
        let _ = model.logits(&batch, Pass::Train);

        let probe = random_images(2, 3, 32, 83);
        let prefs: Vec<&ImageTensor> = probe.iter().collect();
        let pbatch = batch_from_images(&prefs);
        let expected = model.logits(&pbatch, Pass::Infer);

        let mut cloned = clone_classifier(&mut model);
        let got = cloned.logits(&pbatch, Pass::Infer);
        assert!(expected.iter().zip(got.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

        let meta = ClassifierMeta {
            arch: model.arch.name().into(),
            dataset: "cifar10".into(),
            classes: 10,
            mean: model.norm.mean.clone(),
            std: model.norm.std.clone(),
            seed: 81,
            val_accuracy: None,
            scheme: None,
            n_labels: None,
        };
        save_classifier(dir.path(), &mut model, &meta).unwrap();
        let (mut loaded, _) = load_classifier(dir.path()).unwrap();
        let got = loaded.logits(&pbatch, Pass::Infer);
        assert!(expected.iter().zip(got.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn normalization_standardizes_and_backprops() {
        let norm = Normalization {
            mean: vec![0.5],
            std: vec![0.25],
        };
        let mut batch = Array4::from_elem((1, 1, 2, 2), 0.75);
        norm.apply(&mut batch);
        assert!(batch.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        let mut grad = Array4::from_elem((1, 1, 2, 2), 1.0);
        norm.backprop(&mut grad);
        assert!(grad.iter().all(|&v| (v - 4.0).abs() < 1e-6));
    }
}
