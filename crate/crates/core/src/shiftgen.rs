//! Target-domain generation: each image gets its own Gaussian parameter draw
//! per stage, applied as a label-preserving forward transform.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::seeds;
use crate::transforms::{apply_brightness, apply_contrast, apply_rotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Brightness,
    Contrast,
    Rotation,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "brightness" => Ok(Axis::Brightness),
            "contrast" => Ok(Axis::Contrast),
            "rotation" => Ok(Axis::Rotation),
            other => Err(Error::InvalidParameter(format!("unknown axis {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Brightness => "brightness",
            Axis::Contrast => "contrast",
            Axis::Rotation => "rotation",
        }
    }

    pub fn identity(self) -> f64 {
        match self {
            Axis::Brightness | Axis::Contrast => 1.0,
            Axis::Rotation => 0.0,
        }
    }

    /// Forward-parameter space the Gaussian is truncated into.
    pub fn forward_space(self) -> (f64, f64) {
        match self {
            Axis::Brightness | Axis::Contrast => (0.0, f64::INFINITY),
            Axis::Rotation => (-180.0, 180.0),
        }
    }

    fn truncate(self, v: f64) -> f64 {
        let (lo, hi) = self.forward_space();
        v.clamp(lo, hi)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftStage {
    pub axis: Axis,
    pub mu: f64,
    pub sigma: f64,
}

impl ShiftStage {
    pub fn new(axis: Axis, mu: f64, sigma: f64) -> Self {
        Self { axis, mu, sigma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub stages: Vec<ShiftStage>,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn single(axis: Axis, mu: f64, sigma: f64, seed: u64) -> Self {
        Self {
            stages: vec![ShiftStage::new(axis, mu, sigma)],
            seed,
        }
    }

    /// Hard errors for malformed specs; warnings when a stage's 3-sigma
    /// interval leaves its axis's forward space (draws will be truncated).
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.stages.is_empty() {
            return Err(Error::InvalidParameter("shift spec has no stages".into()));
        }
        let mut warnings = Vec::new();
        for st in &self.stages {
            if !st.sigma.is_finite() || st.sigma < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "{} sigma {} must be finite and >= 0",
                    st.axis, st.sigma
                )));
            }
            if !st.mu.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{} mu {} must be finite",
                    st.axis, st.mu
                )));
            }
            let (lo, hi) = st.axis.forward_space();
            if st.mu - 3.0 * st.sigma < lo || st.mu + 3.0 * st.sigma > hi {
                warnings.push(format!(
                    "{}: mu={} sigma={} places >0.3% of mass outside [{lo}, {hi}]; \
                     draws are truncated",
                    st.axis, st.mu, st.sigma
                ));
            }
        }
        Ok(warnings)
    }

    /// Compact tag for dataset names and output paths.
    pub fn summary(&self) -> String {
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{}({},{})", s.axis, s.mu, s.sigma))
            .collect();
        format!("{}#seed{}", stages.join("+"), self.seed)
    }
}

/// One vector of truncated draws per stage, each of length `n`. Draw `i` of
/// every stage comes from a substream keyed on (seed, stage, i), so outputs
/// are independent of iteration order.
pub fn sample_shift_params(spec: &ShiftSpec, n: usize) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one draw".into()));
    }
    for w in spec.validate()? {
        log::warn!("{w}");
    }
    let mut out = Vec::with_capacity(spec.stages.len());
    for (si, st) in spec.stages.iter().enumerate() {
        let mut draws = Vec::with_capacity(n);
        for i in 0..n {
            let v = if st.sigma == 0.0 {
                st.mu
            } else {
                let mut rng = seeds::rng(spec.seed, "shift-draw", &[si as u64, i as u64]);
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                st.mu + st.sigma * z
            };
            draws.push(st.axis.truncate(v));
        }
        out.push(draws);
    }
    Ok(out)
}

/// Applies the spec to every item with fresh per-image parameter draws.
/// Labels are copied positionally.
pub fn apply_shift(dataset: &LabeledDataset, spec: &ShiftSpec) -> Result<LabeledDataset> {
    let params = sample_shift_params(spec, dataset.len())?;
    let mut images = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let mut img = dataset.image(i).clone();
        for (si, st) in spec.stages.iter().enumerate() {
            let p = params[si][i] as f32;
            img = match st.axis {
                Axis::Brightness => apply_brightness(&img, p)?,
                Axis::Contrast => apply_contrast(&img, p)?,
                Axis::Rotation => apply_rotation(&img, p)?,
            };
        }
        images.push(img);
    }
    LabeledDataset::new(
        format!("{}@{}", dataset.name(), spec.summary()),
        images,
        dataset.labels().to_vec(),
        dataset.num_classes(),
    )
}

// -- persistence ---------------------------------------------------------------

/// Self-describing record written next to a persisted shifted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftManifest {
    pub source: String,
    pub count: usize,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub stages: Vec<ShiftStage>,
}

const MANIFEST: &str = "manifest";
const LABELS: &str = "labels";
const IMAGES_DIR: &str = "images";

/// Layout: `manifest` (TOML), `labels` (one index per line), `images/NNNNNN.png`
/// (16-bit lossless). Pixel round-trip error is bounded by 1/131070.
pub fn write_shifted_dataset(
    dataset: &LabeledDataset,
    spec: &ShiftSpec,
    dir: &Path,
) -> Result<ShiftManifest> {
    let (c, h, w) = dataset.image_shape();
    let manifest = ShiftManifest {
        source: dataset.name().to_string(),
        count: dataset.len(),
        classes: dataset.num_classes(),
        channels: c,
        height: h,
        width: w,
        seed: spec.seed,
        stages: spec.stages.clone(),
    };
    let img_dir = dir.join(IMAGES_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let toml = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("serializing manifest: {e}")))?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, toml).map_err(|e| Error::io(&mpath, e))?;
    let labels: String = dataset
        .labels()
        .iter()
        .map(|l| format!("{l}\n"))
        .collect();
    let lpath = dir.join(LABELS);
    fs::write(&lpath, labels).map_err(|e| Error::io(&lpath, e))?;
    for i in 0..dataset.len() {
        write_png16(&img_dir.join(format!("{i:06}.png")), dataset.image(i))?;
    }
    Ok(manifest)
}

/// Reads only the manifest, skipping image decode.
pub fn read_shift_manifest(dir: &Path) -> Result<ShiftManifest> {
    let mpath = dir.join(MANIFEST);
    let mtext = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    toml::from_str(&mtext).map_err(|e| Error::Config(format!("parsing manifest: {e}")))
}

pub fn read_shifted_dataset(dir: &Path) -> Result<(LabeledDataset, ShiftManifest)> {
    let manifest = read_shift_manifest(dir)?;
    let lpath = dir.join(LABELS);
    let ltext = fs::read_to_string(&lpath).map_err(|e| Error::io(&lpath, e))?;
    let labels = ltext
        .lines()
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidDataset(format!("bad label line {l:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != manifest.count {
        return Err(Error::InvalidDataset(format!(
            "manifest count {} but {} labels",
            manifest.count,
            labels.len()
        )));
    }
    let mut images = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let path = dir.join(IMAGES_DIR).join(format!("{i:06}.png"));
        let img = read_png16(&path, manifest.channels)?;
        if img.shape() != (manifest.channels, manifest.height, manifest.width) {
            return Err(Error::InvalidDataset(format!(
                "{}: image shape {:?} does not match manifest",
                path.display(),
                img.shape()
            )));
        }
        images.push(img);
    }
    let dataset = LabeledDataset::new(
        manifest.source.clone(),
        images,
        labels,
        manifest.classes,
    )?;
    Ok((dataset, manifest))
}

fn write_png16(path: &Path, img: &ImageTensor) -> Result<()> {
    let (c, h, w) = img.shape();
    let quant = |v: f32| (v * 65535.0).round() as u16;
    let dynimg = if c == 1 {
        let buf: Vec<u16> = img.data().iter().map(|&v| quant(v)).collect();
        image::DynamicImage::ImageLuma16(
            image::ImageBuffer::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from shape"),
        )
    } else {
        // PNG wants interleaved RGB; the tensor is planar
        let d = img.data();
        let mut buf = Vec::with_capacity(c * h * w);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..3 {
                    buf.push(quant(d[[ch, i, j]]));
                }
            }
        }
        image::DynamicImage::ImageRgb16(
            image::ImageBuffer::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized from shape"),
        )
    };
    dynimg
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn read_png16(path: &Path, channels: usize) -> Result<ImageTensor> {
    let dynimg = image::open(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let dequant = |v: u16| v as f32 / 65535.0;
    let data = if channels == 1 {
        let gray = dynimg.into_luma16();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        Array3::from_shape_vec((1, h, w), gray.into_raw().iter().map(|&v| dequant(v)).collect())
            .expect("decoded buffer matches dims")
    } else {
        let rgb = dynimg.into_rgb16();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let raw = rgb.into_raw();
        let mut data = Array3::zeros((3, h, w));
        for i in 0..h {
            for j in 0..w {
                for ch in 0..3 {
                    data[[ch, i, j]] = dequant(raw[(i * w + j) * 3 + ch]);
                }
            }
        }
        data
    };
    ImageTensor::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_dataset(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = (0..n)
            .map(|_| {
                let data =
                    Array3::from_shape_simple_fn((1, 8, 8), || rng.gen_range(0.1..0.9f32));
                ImageTensor::new(data).unwrap()
            })
            .collect();
        let labels = (0..n).map(|i| i % 3).collect();
        LabeledDataset::new("toy", images, labels, 3).unwrap()
    }

    fn bit_equal(a: &LabeledDataset, b: &LabeledDataset) -> bool {
        a.len() == b.len()
            && a.labels() == b.labels()
            && (0..a.len()).all(|i| {
                a.image(i)
                    .data()
                    .iter()
                    .zip(b.image(i).data().iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    #[test]
    fn degenerate_gaussian_draws_are_exact() {
        let spec = ShiftSpec::single(Axis::Brightness, 0.5, 0.0, 1);
        let draws = sample_shift_params(&spec, 5).unwrap();
        assert_eq!(draws, vec![vec![0.5; 5]]);
    }

    #[test]
    fn sample_mean_approaches_mu() {
        let spec = ShiftSpec::single(Axis::Brightness, 0.5, 0.05, 99);
        let draws = sample_shift_params(&spec, 10_000).unwrap();
        let mean: f64 = draws[0].iter().sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.01, "sample mean {mean}");
    }

    #[test]
    fn truncation_keeps_draws_in_forward_space() {
        let spec = ShiftSpec::single(Axis::Brightness, 0.05, 0.05, 7);
        let draws = sample_shift_params(&spec, 1000).unwrap();
        assert!(draws[0].iter().all(|&v| v >= 0.0));
        let spec = ShiftSpec::single(Axis::Rotation, 170.0, 20.0, 7);
        let draws = sample_shift_params(&spec, 1000).unwrap();
        assert!(draws[0].iter().all(|&v| (-180.0..=180.0).contains(&v)));
        assert!(draws[0].iter().any(|&v| v == 180.0), "expected clipped draws");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let spec = ShiftSpec::single(Axis::Brightness, 0.5, -1.0, 1);
        assert!(sample_shift_params(&spec, 10).is_err());
        let spec = ShiftSpec {
            stages: vec![],
            seed: 1,
        };
        assert!(sample_shift_params(&spec, 10).is_err());
        let spec = ShiftSpec::single(Axis::Brightness, 0.5, 0.1, 1);
        assert!(sample_shift_params(&spec, 0).is_err());
    }

    #[test]
    fn three_sigma_exit_warns_but_samples() {
        let spec = ShiftSpec::single(Axis::Rotation, 175.0, 10.0, 1);
        let warnings = spec.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("truncated"));
        let ok = ShiftSpec::single(Axis::Rotation, 30.0, 2.0, 1);
        assert!(ok.validate().unwrap().is_empty());
    }

    #[test]
    fn identity_shift_is_a_noop() {
        let d = toy_dataset(6, 3);
        for spec in [
            ShiftSpec::single(Axis::Brightness, 1.0, 0.0, 1),
            ShiftSpec::single(Axis::Contrast, 1.0, 0.0, 1),
            ShiftSpec::single(Axis::Rotation, 0.0, 0.0, 1),
        ] {
            let shifted = apply_shift(&d, &spec).unwrap();
            assert!(bit_equal(&d, &shifted), "{} changed pixels", spec.summary());
        }
    }

    #[test]
    fn labels_and_count_are_preserved() {
        let d = toy_dataset(10, 4);
        let spec = ShiftSpec {
            stages: vec![
                ShiftStage::new(Axis::Contrast, 0.6, 0.1),
                ShiftStage::new(Axis::Rotation, 20.0, 5.0),
            ],
            seed: 11,
        };
        let s = apply_shift(&d, &spec).unwrap();
        assert_eq!(s.len(), d.len());
        assert_eq!(s.labels(), d.labels());
    }

    #[test]
    fn same_spec_same_dataset_is_deterministic() {
        let d = toy_dataset(8, 5);
        let spec = ShiftSpec::single(Axis::Rotation, 30.0, 2.0, 7);
        let a = apply_shift(&d, &spec).unwrap();
        let b = apply_shift(&d, &spec).unwrap();
        assert!(bit_equal(&a, &b));
    }

    #[test]
    fn stages_apply_in_listed_order() {
        let d = toy_dataset(3, 6);
        let spec = ShiftSpec {
            stages: vec![
                ShiftStage::new(Axis::Contrast, 0.5, 0.0),
                ShiftStage::new(Axis::Brightness, 1.5, 0.0),
            ],
            seed: 1,
        };
        let got = apply_shift(&d, &spec).unwrap();
        for i in 0..d.len() {
            let want =
                apply_brightness(&apply_contrast(d.image(i), 0.5).unwrap(), 1.5).unwrap();
            assert_eq!(got.image(i).max_abs_diff(&want), 0.0);
        }
    }

    #[test]
    fn per_image_draws_differ() {
        let d = toy_dataset(4, 8);
        let spec = ShiftSpec::single(Axis::Brightness, 1.0, 0.3, 9);
        let params = sample_shift_params(&spec, d.len()).unwrap();
        let distinct: std::collections::HashSet<u64> =
            params[0].iter().map(|p| p.to_bits()).collect();
        assert_eq!(distinct.len(), d.len());
    }

    #[test]
    fn written_dataset_round_trips() {
        let d = toy_dataset(5, 10);
        let spec = ShiftSpec::single(Axis::Rotation, 15.0, 2.0, 21);
        let shifted = apply_shift(&d, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_shifted_dataset(&shifted, &spec, dir.path()).unwrap();
        assert_eq!(manifest.stages[0].mu, 15.0);
        assert_eq!(manifest.seed, 21);
        assert_eq!(manifest.count, 5);
        let (back, manifest2) = read_shifted_dataset(dir.path()).unwrap();
        assert_eq!(manifest, manifest2);
        assert_eq!(back.labels(), shifted.labels());
        for i in 0..back.len() {
            let diff = back.image(i).max_abs_diff(shifted.image(i));
            assert!(diff <= 0.5 / 65535.0 + 1e-9, "image {i} diff {diff}");
        }
    }

    #[test]
    fn seed_changes_payload_but_not_labels() {
        let d = toy_dataset(5, 12);
        let a = apply_shift(&d, &ShiftSpec::single(Axis::Rotation, 30.0, 5.0, 1)).unwrap();
        let b = apply_shift(&d, &ShiftSpec::single(Axis::Rotation, 30.0, 5.0, 2)).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert!(!bit_equal(&a, &b));
    }

    #[test]
    fn rgb_png_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data = Array3::from_shape_simple_fn((3, 6, 7), || rng.gen_range(0.0..1.0f32));
        let img = ImageTensor::new(data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        write_png16(&path, &img).unwrap();
        let back = read_png16(&path, 3).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 65535.0 + 1e-9);
    }
}
