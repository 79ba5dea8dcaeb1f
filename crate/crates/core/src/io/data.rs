//! Image classification datasets.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// CIFAR-10 per-channel mean and std of [0, 1] pixels.
pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Channel-planar images with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    /// Normalization applied to both halves, per channel.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        self.labels.iter().for_each(|&y| c[y] += 1);
        c
    }

    /// Per-channel mean and (population) std.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let plane = self.height * self.width;
        let mut sum = vec![0f64; self.channels];
        let mut sq = vec![0f64; self.channels];
        for img in self.images.chunks(self.image_len()) {
            for (c, p) in img.chunks(plane).enumerate() {
                for &v in p {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(1e-12).sqrt()).collect();
        (mean, std)
    }

    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        if mean.len() != self.channels || std.len() != self.channels {
            return Err(Error::dim("normalize", &[self.channels], &[mean.len(), std.len()]));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Data(format!("normalization std must be positive: {std:?}")));
        }
        let plane = self.height * self.width;
        let n = self.image_len();
        for img in self.images.chunks_mut(n) {
            for (c, p) in img.chunks_mut(plane).enumerate() {
                let (m, s) = (mean[c] as f32, std[c] as f32);
                p.iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
        Ok(())
    }

    /// Bilinear resize to `size`×`size` (pixel-centre aligned).
    pub fn resized(&self, size: usize) -> Result<Dataset> {
        if size == 0 {
            return Err(Error::Config("resize target must be positive".into()));
        }
        if size == self.height && size == self.width {
            return Ok(self.clone());
        }
        let (h, w) = (self.height, self.width);
        let sample = |plane: &[f32], y: f64, x: f64| -> f32 {
            let y = y.clamp(0.0, (h - 1) as f64);
            let x = x.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            top * (1.0 - fy) + bot * fy
        };
        let sy = h as f64 / size as f64;
        let sx = w as f64 / size as f64;
        let mut images = Vec::with_capacity(self.len() * self.channels * size * size);
        for img in self.images.chunks(self.image_len()) {
            for plane in img.chunks(h * w) {
                for r in 0..size {
                    for c in 0..size {
                        images.push(sample(plane, (r as f64 + 0.5) * sy - 0.5, (c as f64 + 0.5) * sx - 0.5));
                    }
                }
            }
        }
        Ok(Dataset { images, height: size, width: size, ..self.clone() })
    }

    /// B×C×H×W batch of `indices`; image `i` is mirrored left-right when `flips[i]`.
    pub fn batch<T: Element>(&self, indices: &[usize], flips: &[bool]) -> Result<(Tensor<T>, Vec<usize>)> {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::Usage(format!("sample {i} out of range ({})", self.len())));
            }
            let flip = flips.get(k).copied().unwrap_or(false);
            for plane in self.image(i).chunks(h * w) {
                for row in plane.chunks(w) {
                    if flip {
                        data.extend(row.iter().rev().map(|&v| T::c(v as f64)));
                    } else {
                        data.extend(row.iter().map(|&v| T::c(v as f64)));
                    }
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::from_vec(data, &[indices.len(), self.channels, h, w])?, labels))
    }
}

impl Split {
    /// Normalizes both halves with the training set's channel statistics.
    /// Both halves resized to `size`×`size`; normalization constants are kept.
    pub fn resized(&self, size: usize) -> Result<Split> {
        Ok(Split { train: self.train.resized(size)?, test: self.test.resized(size)?, ..self.clone() })
    }

    pub fn normalized_by_train(mut train: Dataset, mut test: Dataset) -> Result<Split> {
        let (mean, std) = train.channel_stats();
        train.normalize(&mean, &std)?;
        test.normalize(&mean, &std)?;
        Ok(Split { train, test, mean, std })
    }

    pub fn with_constants(mut train: Dataset, mut test: Dataset, mean: &[f64], std: &[f64]) -> Result<Split> {
        train.normalize(mean, std)?;
        test.normalize(mean, std)?;
        Ok(Split { train, test, mean: mean.to_vec(), std: std.to_vec() })
    }
}

const SHAPES: usize = 5;
const COLORS: [[f32; 3]; 6] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
];

/// Largest class count the shape × colour grid supports.
pub const MAX_SYNTHETIC_CLASSES: usize = SHAPES * COLORS.len();

fn inside(shape: usize, dy: f64, dx: f64, r: f64) -> bool {
    let d = (dy * dy + dx * dx).sqrt();
    match shape {
        0 => d <= r,
        1 => dy.abs().max(dx.abs()) <= 0.8 * r,
        2 => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.55 * (dy + r),
        3 => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
        _ => d <= r && d >= 0.55 * r,
    }
}

/// One synthetic image, a pure function of `(seed, index)`.
/// Class `index % n_classes` selects shape `class % 5` and colour `class / 5`.
pub fn synthetic_image(seed: u64, index: u64, res: usize, n_classes: usize) -> (Vec<f32>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let label = (index % n_classes as u64) as usize;
    let (shape, color) = (label % SHAPES, label / SHAPES);
    let resf = res as f64;
    let r = resf * rng.random_range(0.18..0.32);
    let cy = rng.random_range(r..resf - r);
    let cx = rng.random_range(r..resf - r);
    let level: f32 = rng.random_range(0.15..0.45);
    let tint: [f32; 3] = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let plane = res * res;
    let mut img = vec![0f32; 3 * plane];
    for y in 0..res {
        for x in 0..res {
            let on = inside(shape, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r);
            for c in 0..3 {
                let noise: f32 = rng.random_range(-0.2..0.2);
                let base = if on { COLORS[color][c] + tint[c] } else { level };
                img[c * plane + y * res + x] = (base + noise).clamp(0.0, 1.0);
            }
        }
    }
    (img, label)
}

/// `n` RGB images of side `res`, labels cycling through `n_classes`, pixels in [0, 1].
pub fn gen_synthetic(n: usize, res: usize, n_classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || res < 4 || n_classes == 0 || n_classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::Config(format!(
            "synthetic data needs n > 0, res >= 4, 1..={MAX_SYNTHETIC_CLASSES} classes; got n={n} res={res} classes={n_classes}"
        )));
    }
    let mut images = Vec::with_capacity(n * 3 * res * res);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (img, y) = synthetic_image(seed, i as u64, res, n_classes);
        images.extend(img);
        labels.push(y);
    }
    Ok(Dataset { images, labels, n_classes, channels: 3, height: res, width: res })
}

/// Train and test sets from disjoint index streams of one seed, normalized by train statistics.
pub fn synthetic_split(n_train: usize, n_test: usize, res: usize, n_classes: usize, seed: u64) -> Result<Split> {
    let train = gen_synthetic(n_train, res, n_classes, seed)?;
    let test = gen_synthetic(n_test, res, n_classes, seed ^ 0x5eed_7e57)?;
    Split::normalized_by_train(train, test)
}

/// Parses one CIFAR-10 binary batch file.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "CIFAR-10 batch length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Data(format!("record {i}: label {} outside [0, 10)", rec[0])));
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Dataset { images, labels, n_classes: 10, channels: 3, height: 32, width: 32 })
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut it = parts.into_iter();
    let mut first = it.next().expect("at least one part");
    for d in it {
        first.images.extend(d.images);
        first.labels.extend(d.labels);
    }
    first
}

/// Reads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`, normalized with
/// [`CIFAR10_MEAN`] / [`CIFAR10_STD`].
pub fn load_cifar10(dir: &Path) -> Result<Split> {
    let read = |name: &str| -> Result<Dataset> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        parse_cifar10(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    };
    let train = concat((1..=5).map(|i| read(&format!("data_batch_{i}.bin"))).collect::<Result<_>>()?);
    let test = read("test_batch.bin")?;
    Split::with_constants(train, test, &CIFAR10_MEAN, &CIFAR10_STD)
}
