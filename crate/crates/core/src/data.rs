//! Labeled image datasets: the synthetic oriented-patch task, IDX files and
//! PPM images.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

pub const IDX_UBYTE: u8 = 0x08;
pub const IDX_FLOAT: u8 = 0x0D;
/// Magic of an unsigned-byte rank-3 IDX image file.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Idx(IdxSpec),
}

/// K-class oriented grating patches on a square grayscale canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_noise() -> f64 {
    0.8
}

impl SyntheticSpec {
    pub fn new(classes: usize, samples_per_class: usize, image_size: usize, seed: u64) -> Self {
        Self {
            classes,
            samples_per_class,
            image_size,
            seed,
            test_fraction: default_test_fraction(),
            noise: default_noise(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Standardize pixels with train-split statistics after loading.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_true() -> bool {
    true
}

/// Images `[N, C, H, W]` with one class label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Content hash over shape, pixel bits and labels.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        hash_split(&mut h, self);
        hex::encode(h.finalize())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Split> {
        Ok(Split {
            images: self.images.gather_batch(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

fn hash_split(h: &mut Sha256, s: &Split) {
    for &d in s.images.shape() {
        h.update((d as u64).to_le_bytes());
    }
    h.update(s.images.to_le_bytes());
    for &l in &s.labels {
        h.update((l as u32).to_le_bytes());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub num_classes: usize,
    /// Pixel standardization applied to every image: `(x - mean) / std`.
    pub pixel_mean: f32,
    pub pixel_std: f32,
    pub split_hash: String,
}

impl Dataset {
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.train.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Accuracy of always predicting one class on a balanced test set.
    pub fn chance_level(&self) -> f64 {
        100.0 / self.num_classes as f64
    }

    /// Identifier of sample `index` of the `"train"` or `"test"` split.
    pub fn image_id(split: &str, index: usize) -> String {
        format!("{split}/{index}")
    }

    /// Looks up a sample by [`Dataset::image_id`]; returns `[1, C, H, W]` and its label.
    pub fn image_by_id(&self, id: &str) -> Result<(Tensor, usize)> {
        let (split, index) = id
            .split_once('/')
            .and_then(|(s, i)| Some((s, i.parse::<usize>().ok()?)))
            .ok_or_else(|| Error::Data(format!("malformed image id {id:?}")))?;
        let s = match split {
            "train" => &self.train,
            "test" => &self.test,
            _ => return Err(Error::Data(format!("unknown split in image id {id:?}"))),
        };
        if index >= s.len() {
            return Err(Error::Data(format!("image id {id:?} out of range")));
        }
        Ok((s.images.batch_item(index)?, s.labels[index]))
    }

    fn finish(train: Split, test: Split, num_classes: usize, pixel_mean: f32, pixel_std: f32) -> Result<Self> {
        for split in [&train, &test] {
            if let Some(&l) = split.labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Label {
                    label: l,
                    classes: num_classes,
                });
            }
        }
        let mut h = Sha256::new();
        hash_split(&mut h, &train);
        hash_split(&mut h, &test);
        Ok(Self {
            train,
            test,
            num_classes,
            pixel_mean,
            pixel_std,
            split_hash: hex::encode(h.finalize()),
        })
    }
}

/// Materializes a dataset from its spec.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic(s) => synthetic(s),
        DatasetSpec::Idx(s) => load_idx_dataset(s),
    }
}

fn standardize_pair(train: &mut Tensor, test: &mut Tensor) -> (f32, f32) {
    let n = train.len().max(1) as f64;
    let mean = train.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = train.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let (m, s) = (mean as f32, std as f32);
    for t in [train, test] {
        for v in t.data_mut() {
            *v = (*v - m) / s;
        }
    }
    (m, s)
}

/// Class `k` is an oriented grating patch: orientation index `k % n_orient`,
/// spatial-frequency index `k / n_orient`.
pub fn synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.samples_per_class == 0 || spec.image_size == 0 {
        return Err(Error::Data(format!("degenerate synthetic spec {spec:?}")));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::Range(format!(
            "test_fraction {} outside [0, 1)",
            spec.test_fraction
        )));
    }
    let k = spec.classes;
    let n_freq = if k >= 4 { 2 } else { 1 };
    let n_orient = k.div_ceil(n_freq);
    let size = spec.image_size;
    let n_test = ((spec.samples_per_class as f64) * spec.test_fraction).round() as usize;
    let n_train = spec.samples_per_class - n_test;
    if n_train == 0 {
        return Err(Error::Data("synthetic spec leaves no training samples".into()));
    }
    let mut rng = substream(spec.seed, "synthetic-images");
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Data(e.to_string()))?;
    let px = size * size;
    let mut per_class: Vec<Vec<Vec<f32>>> = Vec::with_capacity(k);
    for class in 0..k {
        let orient = class % n_orient;
        let freq_idx = class / n_orient;
        let mut samples = Vec::with_capacity(spec.samples_per_class);
        for _ in 0..spec.samples_per_class {
            let step = PI / n_orient as f64;
            let theta = orient as f64 * step + rng.random_range(-0.1..0.1) * step;
            let freq = [0.14, 0.28][freq_idx] * rng.random_range(0.95..1.05);
            let phase = rng.random_range(0.0..2.0 * PI);
            let jitter = size as f64 / 8.0;
            let cx = size as f64 / 2.0 + rng.random_range(-jitter..=jitter);
            let cy = size as f64 / 2.0 + rng.random_range(-jitter..=jitter);
            let sigma = size as f64 * 0.3;
            let (ct, st) = (theta.cos(), theta.sin());
            let mut img = vec![0.0f32; px];
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let env = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    let wave = (2.0 * PI * freq * (dx * ct + dy * st) + phase).cos();
                    let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    img[y * size + x] = (env * wave + n) as f32;
                }
            }
            samples.push(img);
        }
        per_class.push(samples);
    }
    let assemble = |range: std::ops::Range<usize>| -> Result<Split> {
        let count = range.len() * k;
        let mut data = Vec::with_capacity(count * px);
        let mut labels = Vec::with_capacity(count);
        for i in range {
            for (class, samples) in per_class.iter().enumerate() {
                data.extend_from_slice(&samples[i]);
                labels.push(class);
            }
        }
        Ok(Split {
            images: Tensor::new(vec![count, 1, size, size], data)?,
            labels,
        })
    };
    let mut train = assemble(0..n_train)?;
    let mut test = assemble(n_train..spec.samples_per_class)?;
    let (m, s) = standardize_pair(&mut train.images, &mut test.images);
    Dataset::finish(train, test, k, m, s)
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("IDX header truncated".into()))
}

/// Parsed IDX array: element type code, extents, values as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub type_code: u8,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("IDX magic must start with two zero bytes".into()));
    }
    let type_code = bytes[2];
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::Format("IDX rank 0".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| read_u32_be(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let count: usize = dims.iter().product();
    let body = &bytes[4 + 4 * rank..];
    let values = match type_code {
        IDX_UBYTE => {
            if body.len() != count {
                return Err(Error::Format(format!(
                    "IDX payload has {} bytes, header promises {count}",
                    body.len()
                )));
            }
            body.iter().map(|&b| b as f32).collect()
        }
        IDX_FLOAT => {
            if body.len() != count * 4 {
                return Err(Error::Format(format!(
                    "IDX payload has {} bytes, header promises {}",
                    body.len(),
                    count * 4
                )));
            }
            body.chunks_exact(4)
                .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
        other => return Err(Error::Format(format!("unsupported IDX type code {other:#04x}"))),
    };
    Ok(IdxArray {
        type_code,
        dims,
        values,
    })
}

pub fn encode_idx_float(dims: &[usize], values: &[f32]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_FLOAT, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, 1];
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

fn read_idx_split(images: &Path, labels: &Path) -> Result<(Tensor, Vec<usize>, u8)> {
    let img = parse_idx(&fs::read(images)?)?;
    let lab = parse_idx(&fs::read(labels)?)?;
    if img.dims.len() != 3 {
        return Err(Error::Format(format!(
            "{}: expected rank-3 images, got dims {:?}",
            images.display(),
            img.dims
        )));
    }
    if lab.dims.len() != 1 || lab.type_code != IDX_UBYTE {
        return Err(Error::Format(format!(
            "{}: expected rank-1 unsigned-byte labels",
            labels.display()
        )));
    }
    if lab.dims[0] != img.dims[0] {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            img.dims[0], lab.dims[0]
        )));
    }
    let mut values = img.values;
    if img.type_code == IDX_UBYTE {
        for v in &mut values {
            *v /= 255.0;
        }
    }
    let t = Tensor::new(vec![img.dims[0], 1, img.dims[1], img.dims[2]], values)?;
    Ok((t, lab.values.iter().map(|&v| v as usize).collect(), img.type_code))
}

pub fn load_idx_dataset(spec: &IdxSpec) -> Result<Dataset> {
    let (mut train_x, train_y, _) = read_idx_split(&spec.train_images, &spec.train_labels)?;
    let (mut test_x, test_y, _) = read_idx_split(&spec.test_images, &spec.test_labels)?;
    if train_x.shape()[1..] != test_x.shape()[1..] {
        return Err(Error::Format("train and test image shapes differ".into()));
    }
    if train_y.is_empty() {
        return Err(Error::Data("IDX training split is empty".into()));
    }
    let (m, s) = if spec.standardize {
        standardize_pair(&mut train_x, &mut test_x)
    } else {
        (0.0, 1.0)
    };
    let num_classes = train_y.iter().chain(&test_y).max().map_or(1, |&m| m + 1);
    Dataset::finish(
        Split {
            images: train_x,
            labels: train_y,
        },
        Split {
            images: test_x,
            labels: test_y,
        },
        num_classes,
        m,
        s,
    )
}

/// Writes a dataset as four float/label IDX files; returns the spec that reloads it.
pub fn write_idx_dataset(ds: &Dataset, dir: &Path) -> Result<IdxSpec> {
    fs::create_dir_all(dir)?;
    let spec = IdxSpec {
        train_images: dir.join("train-images.idx"),
        train_labels: dir.join("train-labels.idx"),
        test_images: dir.join("test-images.idx"),
        test_labels: dir.join("test-labels.idx"),
        standardize: false,
    };
    for (split, ipath, lpath) in [
        (&ds.train, &spec.train_images, &spec.train_labels),
        (&ds.test, &spec.test_images, &spec.test_labels),
    ] {
        let s = split.images.shape();
        if s[1] != 1 {
            return Err(Error::Format("IDX export supports single-channel images".into()));
        }
        crate::persist::write_atomic(ipath, &encode_idx_float(&[s[0], s[2], s[3]], split.images.data()))?;
        crate::persist::write_atomic(lpath, &encode_idx_labels(&split.labels))?;
    }
    Ok(spec)
}

/// Decoded binary PPM (P6) or PGM (P5) image.
#[derive(Debug, Clone, PartialEq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_pnm(bytes: &[u8]) -> Result<PnmImage> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("PPM header truncated".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic {m}"))),
    };
    let num = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
    };
    let width = num(token()?)?;
    let height = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format("PPM raster truncated".into()))?;
    let pixels = raster.iter().map(|&b| ((b as usize * 255) / maxval) as u8).collect();
    Ok(PnmImage {
        width,
        height,
        channels,
        pixels,
    })
}

/// Loads a PPM/PGM image as a `[1, C, size, size]` tensor.
///
/// Resizing is nearest neighbour. RGB is averaged when one channel is
/// requested. Pixels go to `[0, 1]` and then through the dataset
/// standardization so they match the training distribution.
pub fn image_from_pnm(path: &Path, channels: usize, size: usize, mean: f32, std: f32) -> Result<Tensor> {
    let img = parse_pnm(&fs::read(path)?)?;
    if channels != 1 && channels != img.channels {
        return Err(Error::Data(format!(
            "{} has {} channels, model expects {channels}",
            path.display(),
            img.channels
        )));
    }
    let mut data = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        for y in 0..size {
            let sy = y * img.height / size;
            for x in 0..size {
                let sx = x * img.width / size;
                let base = (sy * img.width + sx) * img.channels;
                let v = if channels == 1 {
                    let s: u32 = img.pixels[base..base + img.channels].iter().map(|&b| b as u32).sum();
                    s as f32 / img.channels as f32
                } else {
                    img.pixels[base + c] as f32
                };
                data.push((v / 255.0 - mean) / std);
            }
        }
    }
    Tensor::new(vec![1, channels, size, size], data)
}
