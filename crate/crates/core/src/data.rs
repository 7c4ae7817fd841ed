//! Datasets: IDX and CIFAR binary loaders, synthetic blobs, per-channel
//! normalization and augmentation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{s, Array, Array3, Array4, ArrayD, ArrayView3, ArrayViewD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result, RpuError};
use crate::scalar::Scalar;

/// Environment variable naming the directory that holds datasets.
pub const DATA_ROOT_ENV: &str = "RPU_DATA_ROOT";

/// An explicit root wins over the environment.
pub fn data_root(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Images `(N, C, H, W)` or feature vectors `(N, F)` with class labels.
///
/// Loaded images are scaled to `[0, 1]`. After [`Dataset::normalize`] every
/// channel is z-scored with the given statistics; `channel_stats` records
/// them and `value_range` tracks the per-channel range of valid values.
#[derive(Debug, Clone)]
pub struct Dataset<T: Scalar> {
    pub images: ArrayD<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub channel_stats: Option<ChannelStats>,
    pub value_range: Vec<(f64, f64)>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: ArrayD<T>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.ndim() != 2 && images.ndim() != 4 {
            return Err(shape_err("dataset rank", "2 or 4", images.ndim()));
        }
        if images.shape()[0] != labels.len() {
            return Err(shape_err("dataset labels", images.shape()[0], labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(config_err(format!("label {bad} is not below the class count {num_classes}")));
        }
        let c = images.shape()[1];
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
            channel_stats: None,
            value_range: vec![(0.0, 1.0); c],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample, without the batch axis.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Copies the given samples, in order, into one batch.
    pub fn batch(&self, indices: &[usize]) -> (ArrayD<T>, Vec<usize>) {
        (
            self.images.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice_axis(Axis(0), (0..n).into()).to_owned(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Mean and population standard deviation per channel (axis 1).
    pub fn compute_channel_stats(&self) -> Result<ChannelStats> {
        if self.is_empty() {
            return Err(RpuError::Empty("dataset"));
        }
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for lane in self.images.axis_iter(Axis(1)) {
            let m = lane.iter().map(|v| v.as_f64()).sum::<f64>() / lane.len() as f64;
            let var = lane.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / lane.len() as f64;
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(ChannelStats { mean, std })
    }

    /// `(x - mean_c) / std_c` per channel. Channels with zero spread are only
    /// centred.
    pub fn normalize(&mut self, stats: &ChannelStats) -> Result<()> {
        if self.channel_stats.is_some() {
            return Err(RpuError::State("dataset is already normalized"));
        }
        let c = self.channels();
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(shape_err("channel stats", c, stats.mean.len()));
        }
        for (ch, mut lane) in self.images.axis_iter_mut(Axis(1)).enumerate() {
            let m = stats.mean[ch];
            let sd = if stats.std[ch] > 0.0 { stats.std[ch] } else { 1.0 };
            let (mt, inv) = (T::lit(m), T::lit(1.0 / sd));
            lane.mapv_inplace(|v| (v - mt) * inv);
            let (lo, hi) = self.value_range[ch];
            self.value_range[ch] = ((lo - m) / sd, (hi - m) / sd);
        }
        self.channel_stats = Some(stats.clone());
        Ok(())
    }

    /// Size of one raw `[0, 1]` intensity unit in the current value space.
    pub fn channel_units(&self) -> Vec<f64> {
        match &self.channel_stats {
            Some(st) => st.std.iter().map(|&s| if s > 0.0 { 1.0 / s } else { 1.0 }).collect(),
            None => vec![1.0; self.channels()],
        }
    }
}

/// Normalizes both splits with statistics of the training split.
pub fn normalize_pair<T: Scalar>(train: &mut Dataset<T>, test: &mut Dataset<T>) -> Result<ChannelStats> {
    let stats = train.compute_channel_stats()?;
    train.normalize(&stats)?;
    test.normalize(&stats)?;
    Ok(stats)
}

// ---------------------------------------------------------------- IDX

/// Raw unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];
const IDX_UBYTE: u8 = 0x08;

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> RpuError {
    RpuError::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses an IDX byte stream of element type `ubyte`.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), "truncated IDX magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, format!("bad IDX magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(parse_err(2, format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(parse_err(3, "IDX rank is 0"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(parse_err(bytes.len(), format!("truncated IDX header, need {header} bytes")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| parse_err(4, "IDX dimensions overflow"))?;
    let body = &bytes[header..];
    if body.len() < count {
        return Err(parse_err(bytes.len(), format!("truncated IDX data, expected {count} bytes after header")));
    }
    if body.len() > count {
        return Err(parse_err(header + count, "trailing bytes after IDX data"));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&open_maybe_gz(path)?)
}

/// Writes an IDX `ubyte` file, gzip-compressed when the name ends in `.gz`.
pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    let count: usize = array.dims.iter().product();
    if count != array.data.len() {
        return Err(shape_err("idx data", count, array.data.len()));
    }
    if array.dims.is_empty() || array.dims.len() > 255 {
        return Err(config_err("IDX rank must be in 1..=255"));
    }
    let mut bytes = vec![0, 0, IDX_UBYTE, array.dims.len() as u8];
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| config_err(format!("IDX dimension {d} exceeds u32")))?;
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(&array.data);
    let file = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(&bytes)?;
        file.flush()?;
    }
    Ok(())
}

/// Image/label IDX pair as a `(N, 1, H, W)` dataset in `[0, 1]`.
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path, split: Split) -> Result<Dataset<T>> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if img.dims.len() != 3 {
        return Err(shape_err("idx images rank", 3, img.dims.len()));
    }
    if lab.dims.len() != 1 {
        return Err(shape_err("idx labels rank", 1, lab.dims.len()));
    }
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != n {
        return Err(shape_err("idx label count", n, lab.dims[0]));
    }
    let scale = T::lit(1.0 / 255.0);
    let x = Array::from_shape_vec(IxDyn(&[n, 1, h, w]), img.data.iter().map(|&b| T::lit(b as f64) * scale).collect())
        .expect("count checked by parser");
    let labels: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    // IDX label files carry no class count; digit sets have ten.
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(x, labels, classes, split)
}

/// Locates `{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]` in `dir`.
pub fn load_mnist_dir<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let find = |stem: &str| -> Result<PathBuf> {
        [format!("{stem}.gz"), stem.to_string()]
            .into_iter()
            .map(|n| dir.join(n))
            .find(|p| p.is_file())
            .ok_or_else(|| config_err(format!("{stem}[.gz] not found in {}", dir.display())))
    };
    let train = load_idx(&find("train-images-idx3-ubyte")?, &find("train-labels-idx1-ubyte")?, Split::Train)?;
    let test = load_idx(&find("t10k-images-idx3-ubyte")?, &find("t10k-labels-idx1-ubyte")?, Split::Test)?;
    Ok((train, test))
}

// ---------------------------------------------------------------- CIFAR

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    /// One label byte per record.
    Cifar10,
    /// Coarse and fine label bytes; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            Self::Cifar10 => 1,
            Self::Cifar100 => 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }
}

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

/// Parses concatenated CIFAR binary records into `(N, 3, 32, 32)` in `[0, 1]`.
pub fn parse_cifar<T: Scalar>(bytes: &[u8], variant: CifarVariant, split: Split) -> Result<Dataset<T>> {
    let rec = variant.label_bytes() + CIFAR_IMAGE_BYTES;
    if bytes.len() % rec != 0 {
        let n = bytes.len() / rec;
        return Err(parse_err(n * rec, format!("truncated CIFAR record, records are {rec} bytes")));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_IMAGE_BYTES);
    let scale = T::lit(1.0 / 255.0);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            return Err(parse_err(i * rec + variant.label_bytes() - 1, format!("label {label} out of range")));
        }
        labels.push(label);
        data.extend(r[variant.label_bytes()..].iter().map(|&b| T::lit(b as f64) * scale));
    }
    let x = Array::from_shape_vec(IxDyn(&[n, 3, 32, 32]), data).expect("record size checked");
    Dataset::new(x, labels, variant.classes(), split)
}

/// Reads and concatenates CIFAR binary batch files.
pub fn load_cifar_binary<T: Scalar>(paths: &[PathBuf], variant: CifarVariant, split: Split) -> Result<Dataset<T>> {
    let mut bytes = Vec::new();
    for p in paths {
        BufReader::new(File::open(p)?).read_to_end(&mut bytes)?;
    }
    parse_cifar(&bytes, variant, split)
}

/// Standard CIFAR-10 file layout under `dir`.
pub fn load_cifar10_dir<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    let train = load_cifar_binary(&train, CifarVariant::Cifar10, Split::Train)?;
    let test = load_cifar_binary(&[dir.join("test_batch.bin")], CifarVariant::Cifar10, Split::Test)?;
    Ok((train, test))
}

// ---------------------------------------------------------------- synthetic

/// Gaussian blobs with unit variance around mutually orthogonal centres at
/// pairwise distance `separation`. Features form a `(n, dims)` dataset;
/// labels cycle through the classes in a seeded random order.
pub fn make_synthetic<T: Scalar>(
    classes: usize,
    dims: usize,
    n: usize,
    separation: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset<T>> {
    if classes < 2 {
        return Err(config_err("synthetic data needs at least 2 classes"));
    }
    if dims < classes {
        return Err(config_err(format!("synthetic data needs dims >= classes ({dims} < {classes})")));
    }
    if n < classes {
        return Err(config_err(format!("synthetic data needs n >= classes ({n} < {classes})")));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(config_err(format!("separation must be >= 0, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let a = separation / 2f64.sqrt();
    let mut x = ArrayD::zeros(IxDyn(&[n, dims]));
    for (mut row, &l) in x.axis_iter_mut(Axis(0)).zip(&labels) {
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = T::lit(z + if j == l { a } else { 0.0 });
        }
    }
    let mut ds = Dataset::new(x, labels, classes, split)?;
    ds.value_range = vec![(f64::NEG_INFINITY, f64::INFINITY); dims];
    Ok(ds)
}

// ---------------------------------------------------------------- augmentation

fn default_scale_jitter() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// Training-time augmentation. `color_jitter` is in raw `[0, 1]` intensity
/// units; `scale_jitter` is the largest upscale factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    #[serde(default)]
    pub mirror: bool,
    #[serde(default)]
    pub color_jitter: f64,
    #[serde(default = "default_scale_jitter")]
    pub scale_jitter: f64,
    #[serde(default)]
    pub random_crop: bool,
    #[serde(default = "default_true")]
    pub shuffle_per_epoch: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl AugmentConfig {
    pub const fn none() -> Self {
        Self {
            mirror: false,
            color_jitter: 0.0,
            scale_jitter: 1.0,
            random_crop: false,
            shuffle_per_epoch: true,
        }
    }

    /// Mirroring and color jitter of amplitude 0.1.
    pub const fn weak() -> Self {
        Self {
            mirror: true,
            color_jitter: 0.1,
            ..Self::none()
        }
    }

    /// Weak augmentation plus 1.3x scale jitter with random crops.
    pub const fn strong() -> Self {
        Self {
            scale_jitter: 1.3,
            random_crop: true,
            ..Self::weak()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_jitter >= 1.0 && self.scale_jitter.is_finite()) {
            return Err(config_err(format!("scale_jitter must be >= 1, got {}", self.scale_jitter)));
        }
        if !(self.color_jitter >= 0.0 && self.color_jitter.is_finite()) {
            return Err(config_err(format!("color_jitter must be >= 0, got {}", self.color_jitter)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.mirror && self.color_jitter == 0.0 && self.scale_jitter == 1.0 && !self.random_crop
    }
}

/// Flips a `(C, H, W)` sample left-right.
pub fn mirror_horizontal<T: Scalar>(x: ArrayView3<'_, T>) -> Array3<T> {
    x.slice(s![.., .., ..;-1]).to_owned()
}

/// Bilinear resize of a `(C, H, W)` sample with half-pixel centres.
pub fn resize_bilinear<T: Scalar>(x: ArrayView3<'_, T>, oh: usize, ow: usize) -> Array3<T> {
    let (c, h, w) = x.dim();
    let src = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let p = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), p - i0 as f64)
    };
    let mut out = Array3::zeros((c, oh, ow));
    for oy in 0..oh {
        let (y0, y1, fy) = src(oy, oh, h);
        for ox in 0..ow {
            let (x0, x1, fx) = src(ox, ow, w);
            for ch in 0..c {
                let v = (1.0 - fy) * ((1.0 - fx) * x[[ch, y0, x0]].as_f64() + fx * x[[ch, y0, x1]].as_f64())
                    + fy * ((1.0 - fx) * x[[ch, y1, x0]].as_f64() + fx * x[[ch, y1, x1]].as_f64());
                out[[ch, oy, ox]] = T::lit(v);
            }
        }
    }
    out
}

/// Augments a `(N, C, H, W)` batch sample by sample.
///
/// Per sample: mirror with probability 1/2, add a uniform per-channel offset
/// of at most `color_jitter` raw units (clipped to `value_range`), and with
/// `scale_jitter > 1` upscale by a uniform factor in `[1, scale_jitter]` and
/// crop back to `H × W` (random offset with `random_crop`, else centred).
/// `units[c]` is one raw intensity unit in channel `c`'s value space.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    batch: ArrayViewD<'_, T>,
    cfg: &AugmentConfig,
    units: &[f64],
    value_range: &[(f64, f64)],
    rng: &mut R,
) -> Result<ArrayD<T>> {
    cfg.validate()?;
    if cfg.is_identity() {
        return Ok(batch.to_owned());
    }
    let b4: Array4<T> = batch
        .to_owned()
        .into_dimensionality()
        .map_err(|_| shape_err("augment batch rank", 4, batch.ndim()))?;
    let (n, c, h, w) = b4.dim();
    if units.len() != c || value_range.len() != c {
        return Err(shape_err("augment channels", c, units.len()));
    }
    let mut out = Array4::zeros((n, c, h, w));
    for (i, sample) in b4.outer_iter().enumerate() {
        let mut x = sample.to_owned();
        if cfg.mirror && rng.random_bool(0.5) {
            x = mirror_horizontal(x.view());
        }
        if cfg.color_jitter > 0.0 {
            for (ch, mut lane) in x.outer_iter_mut().enumerate() {
                let off = rng.random_range(-cfg.color_jitter..=cfg.color_jitter) * units[ch];
                let (lo, hi) = value_range[ch];
                lane.mapv_inplace(|v| T::lit((v.as_f64() + off).clamp(lo, hi)));
            }
        }
        if cfg.scale_jitter > 1.0 {
            let f = rng.random_range(1.0..=cfg.scale_jitter);
            let (sh, sw) = (((h as f64) * f).round() as usize, ((w as f64) * f).round() as usize);
            let big = resize_bilinear(x.view(), sh.max(h), sw.max(w));
            let (my, mx) = (big.dim().1 - h, big.dim().2 - w);
            let (oy, ox) = if cfg.random_crop {
                (rng.random_range(0..=my), rng.random_range(0..=mx))
            } else {
                (my / 2, mx / 2)
            };
            x = big.slice(s![.., oy..oy + h, ox..ox + w]).to_owned();
        } else if cfg.random_crop {
            // crop without rescale: shift by up to 1/8 of the size, zero fill
            let (py, px) = (h / 8, w / 8);
            let dy = rng.random_range(0..=2 * py) as isize - py as isize;
            let dx = rng.random_range(0..=2 * px) as isize - px as isize;
            let mut shifted = Array3::zeros((c, h, w));
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let (sy, sx) = (y as isize + dy, xx as isize + dx);
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            shifted[[ch, y, xx]] = x[[ch, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            x = shifted;
        }
        out.index_axis_mut(Axis(0), i).assign(&x);
    }
    Ok(out.into_dyn())
}
