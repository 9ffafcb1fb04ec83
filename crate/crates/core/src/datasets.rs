//! Dataset containers and ingestion for the built-in corpora.
//!
//! Images are normalized to `[0, 1]` floats at load time. Canonical files are
//! verified against pinned SHA-256 digests before use; missing files are
//! fetched into the data root (override with `--data-root` or
//! `UNSHIFT_DATA_DIR` for offline work).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetId {
    Mnist,
    Cifar10,
}

impl DatasetId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetId::Mnist),
            "cifar10" => Ok(DatasetId::Cifar10),
            other => Err(Error::UnknownDataset(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Cifar10 => "cifar10",
        }
    }

    pub fn num_classes(self) -> usize {
        10
    }

    /// (channels, height, width) of one example.
    pub fn image_shape(self) -> (usize, usize, usize) {
        match self {
            DatasetId::Mnist => (1, 28, 28),
            DatasetId::Cifar10 => (3, 32, 32),
        }
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images with class labels. Labels ride along for evaluation and supervised
/// baselines only; the adapter receives bare image slices.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    name: String,
    images: Vec<ImageTensor>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<ImageTensor>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidDataset("zero classes".into()));
        }
        if images.is_empty() {
            return Err(Error::InvalidDataset("empty dataset".into()));
        }
        if images.len() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let shape = images[0].shape();
        if images.iter().any(|im| im.shape() != shape) {
            return Err(Error::InvalidDataset("images differ in shape".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidDataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.images[0].shape()
    }

    pub fn image(&self, i: usize) -> &ImageTensor {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// New dataset holding the given items, in index order. Indices may repeat.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidDataset(format!(
                    "index {i} out of range for {} items",
                    self.len()
                )));
            }
            images.push(self.images[i].clone());
            labels.push(self.labels[i]);
        }
        Self::new(name, images, labels, self.num_classes)
    }
}

pub fn default_data_root() -> PathBuf {
    if let Ok(dir) = std::env::var("UNSHIFT_DATA_DIR") {
        return PathBuf::from(dir);
    }
    if let Ok(home) = std::env::var("HOME") {
        return Path::new(&home).join(".cache").join("unshift");
    }
    PathBuf::from("unshift-data")
}

pub fn load_dataset(id: DatasetId, split: Split, root: &Path) -> Result<LabeledDataset> {
    match id {
        DatasetId::Mnist => load_mnist(split, root),
        DatasetId::Cifar10 => load_cifar10(split, root),
    }
}

// -- MNIST (IDX format) ------------------------------------------------------

struct RemoteFile {
    name: &'static str,
    sha256: &'static str,
    url: &'static str,
}

const MNIST_BASE: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";

const MNIST_TRAIN_IMAGES: RemoteFile = RemoteFile {
    name: "train-images-idx3-ubyte",
    sha256: "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    url: MNIST_BASE,
};
const MNIST_TRAIN_LABELS: RemoteFile = RemoteFile {
    name: "train-labels-idx1-ubyte",
    sha256: "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    url: MNIST_BASE,
};
const MNIST_TEST_IMAGES: RemoteFile = RemoteFile {
    name: "t10k-images-idx3-ubyte",
    sha256: "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    url: MNIST_BASE,
};
const MNIST_TEST_LABELS: RemoteFile = RemoteFile {
    name: "t10k-labels-idx1-ubyte",
    sha256: "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    url: MNIST_BASE,
};

pub fn load_mnist(split: Split, root: &Path) -> Result<LabeledDataset> {
    let (img_file, lbl_file) = match split {
        Split::Train => (&MNIST_TRAIN_IMAGES, &MNIST_TRAIN_LABELS),
        Split::Test => (&MNIST_TEST_IMAGES, &MNIST_TEST_LABELS),
    };
    let dir = root.join("mnist");
    let images = parse_idx_images(&fetch_verified(&dir, img_file)?)?;
    let labels = parse_idx_labels(&fetch_verified(&dir, lbl_file)?)?;
    LabeledDataset::new(
        format!("mnist-{}", split.name()),
        images,
        labels,
        10,
    )
}

/// Returns the decompressed file contents, fetching and checksumming first if
/// no verified local copy exists. Local copies may be raw or gzip.
fn fetch_verified(dir: &Path, file: &RemoteFile) -> Result<Vec<u8>> {
    let raw = dir.join(file.name);
    let gz = dir.join(format!("{}.gz", file.name));
    let bytes = if raw.is_file() {
        fs::read(&raw).map_err(|e| Error::io(&raw, e))?
    } else if gz.is_file() {
        gunzip(&gz)?
    } else {
        download(dir, file)?;
        gunzip(&gz)?
    };
    let digest = sha256_hex(&bytes);
    if digest != file.sha256 {
        return Err(Error::InvalidDataset(format!(
            "{}: checksum mismatch (got {digest}, want {})",
            file.name, file.sha256
        )));
    }
    Ok(bytes)
}

fn gunzip(path: &Path) -> Result<Vec<u8>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(f)
        .read_to_end(&mut out)
        .map_err(|e| Error::io(path, e))?;
    Ok(out)
}

fn download(dir: &Path, file: &RemoteFile) -> Result<()> {
    let url = format!("{}{}.gz", file.url, file.name);
    log::info!("fetching {url}");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resp = ureq::get(&url)
        .call()
        .map_err(|e| Error::Fetch(format!("{url}: {e} (use --data-root for offline data)")))?;
    let mut body = Vec::new();
    resp.into_reader()
        .read_to_end(&mut body)
        .map_err(|e| Error::Fetch(format!("{url}: {e}")))?;
    let dest = dir.join(format!("{}.gz", file.name));
    fs::write(&dest, body).map_err(|e| Error::io(&dest, e))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn parse_idx_images(bytes: &[u8]) -> Result<Vec<ImageTensor>> {
    let mut r = bytes;
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| Error::InvalidDataset("truncated IDX header".into()))?;
    if magic != 0x0000_0803 {
        return Err(Error::InvalidDataset(format!(
            "bad IDX image magic {magic:#010x}"
        )));
    }
    let n = r.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let h = r.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let w = r.read_u32::<BigEndian>().unwrap_or(0) as usize;
    if r.len() != n * h * w {
        return Err(Error::InvalidDataset(format!(
            "IDX image payload {} bytes, expected {}",
            r.len(),
            n * h * w
        )));
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let px = &r[i * h * w..(i + 1) * h * w];
        let data = Array3::from_shape_vec(
            (1, h, w),
            px.iter().map(|&b| b as f32 / 255.0).collect(),
        )
        .expect("IDX pixel count matches shape");
        images.push(ImageTensor::new(data)?);
    }
    Ok(images)
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = bytes;
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| Error::InvalidDataset("truncated IDX header".into()))?;
    if magic != 0x0000_0801 {
        return Err(Error::InvalidDataset(format!(
            "bad IDX label magic {magic:#010x}"
        )));
    }
    let n = r.read_u32::<BigEndian>().unwrap_or(0) as usize;
    if r.len() != n {
        return Err(Error::InvalidDataset(format!(
            "IDX label payload {} bytes, expected {n}",
            r.len()
        )));
    }
    Ok(r.iter().map(|&b| b as usize).collect())
}

// -- CIFAR-10 (binary batches) -----------------------------------------------

const CIFAR_ARCHIVE_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
// the checksum published alongside the archive
const CIFAR_ARCHIVE_MD5: &str = "c32a1d4ab5d03f1284b67883e8d87530";
const CIFAR_DIR: &str = "cifar-10-batches-bin";
const CIFAR_RECORD: usize = 3073;

pub fn load_cifar10(split: Split, root: &Path) -> Result<LabeledDataset> {
    let dir = root.join(CIFAR_DIR);
    let batches: &[&str] = match split {
        Split::Train => &[
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
        Split::Test => &["test_batch.bin"],
    };
    if !dir.join(batches[0]).is_file() {
        fetch_cifar10(root)?;
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in batches {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        parse_cifar_batch(&bytes, &mut images, &mut labels)?;
    }
    LabeledDataset::new(
        format!("cifar10-{}", split.name()),
        images,
        labels,
        10,
    )
}

fn parse_cifar_batch(
    bytes: &[u8],
    images: &mut Vec<ImageTensor>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::InvalidDataset(format!(
            "CIFAR batch of {} bytes is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::InvalidDataset(format!("CIFAR label {label} > 9")));
        }
        // payload is three 32x32 row-major planes: R, then G, then B
        let data = Array3::from_shape_vec(
            (3, 32, 32),
            rec[1..].iter().map(|&b| b as f32 / 255.0).collect(),
        )
        .expect("record length fixed");
        images.push(ImageTensor::new(data)?);
        labels.push(label);
    }
    Ok(())
}

fn fetch_cifar10(root: &Path) -> Result<()> {
    log::info!("fetching {CIFAR_ARCHIVE_URL}");
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let resp = ureq::get(CIFAR_ARCHIVE_URL).call().map_err(|e| {
        Error::Fetch(format!(
            "{CIFAR_ARCHIVE_URL}: {e} (use --data-root for offline data)"
        ))
    })?;
    let mut body = Vec::new();
    resp.into_reader()
        .read_to_end(&mut body)
        .map_err(|e| Error::Fetch(format!("{CIFAR_ARCHIVE_URL}: {e}")))?;
    let digest = format!("{:x}", md5::Md5::digest(&body));
    if digest != CIFAR_ARCHIVE_MD5 {
        return Err(Error::Fetch(format!(
            "cifar-10-binary.tar.gz: checksum mismatch (got {digest})"
        )));
    }
    let gz = flate2::read::GzDecoder::new(&body[..]);
    tar::Archive::new(gz)
        .unpack(root)
        .map_err(|e| Error::Fetch(format!("unpacking CIFAR archive: {e}")))?;
    Ok(())
}
