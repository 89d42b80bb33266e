//! Datasets: the CIFAR-10 binary format, synthetic stand-ins and augmentation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use crate::Real;

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
/// One label byte followed by a channel-major 32×32 RGB image.
pub const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Labelled samples stored in `f32`, already standardized.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Per-channel constants subtracted from and divided into raw values.
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let c = images.shape().channels();
        let ds = Dataset {
            images,
            labels,
            classes,
            mean: vec![0.0; c],
            std: vec![1.0; c],
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.labels.len() != self.images.shape().batch() {
            return Err(Error::Data(format!(
                "{} labels for {} samples",
                self.labels.len(),
                self.images.shape().batch()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Data(format!("label {bad} outside {} classes", self.classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a batch of `n` samples.
    pub fn batch_shape(&self, n: usize) -> Shape {
        self.images.shape().with_batch(n)
    }

    /// The first `n` samples (all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.images.shape().sample_len();
        Dataset {
            images: Tensor::from_vec(self.batch_shape(n), self.images.data()[..n * per].to_vec())
                .expect("prefix has the right length"),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    /// Gathers the given samples into a batch tensor.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per = self.images.shape().sample_len();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend(src[i * per..(i + 1) * per].iter().map(|&v| T::from_f64(v as f64)));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::from_vec(self.batch_shape(indices.len()), data).expect("gathered batch"),
            labels,
        )
    }
}

/// Undecoded 8-bit images with labels, in the CIFAR record layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Per-channel mean and population standard deviation of `pixel / 255`.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let plane = self.height * self.width;
        let mut sum = vec![0.0f64; self.channels];
        let mut sq = vec![0.0f64; self.channels];
        for img in self.pixels.chunks(self.sample_len()) {
            for (c, run) in img.chunks(plane).enumerate() {
                for &p in run {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (self.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        (mean.into_iter().map(|m| m as f32).collect(), std)
    }

    /// Scales pixels to `[0, 1]` and standardizes with the given constants.
    pub fn to_dataset(&self, classes: usize, mean: &[f32], std: &[f32]) -> Result<Dataset> {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(self.pixels.len());
        for img in self.pixels.chunks(self.sample_len()) {
            for (c, run) in img.chunks(plane).enumerate() {
                data.extend(run.iter().map(|&p| (p as f32 / 255.0 - mean[c]) / std[c]));
            }
        }
        let shape = Shape::image(self.len(), self.channels, self.height, self.width);
        let mut ds = Dataset::new(
            Tensor::from_vec(shape, data)?,
            self.labels.iter().map(|&l| l as usize).collect(),
            classes,
        )?;
        ds.mean = mean.to_vec();
        ds.std = std.to_vec();
        Ok(ds)
    }

    /// Standardized with constants from these same images.
    pub fn standardize(&self, classes: usize) -> Result<Dataset> {
        let (mean, std) = self.channel_stats();
        self.to_dataset(classes, &mean, &std)
    }

    /// Writes 32×32×3 images as CIFAR-10 binary records.
    pub fn write_cifar(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if (self.channels, self.height, self.width) != (CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE) {
            return Err(Error::Data("only 3x32x32 images fit the CIFAR record layout".into()));
        }
        let mut out = Vec::with_capacity(self.len() * CIFAR_RECORD);
        for (img, &label) in self.pixels.chunks(self.sample_len()).zip(&self.labels) {
            out.push(label);
            out.extend_from_slice(img);
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    fn append(&mut self, other: RawImages) {
        self.pixels.extend(other.pixels);
        self.labels.extend(other.labels);
    }
}

/// Parses CIFAR-10 binary records.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<RawImages> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    let mut raw = RawImages {
        channels: CIFAR_CHANNELS,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        pixels: Vec::with_capacity(bytes.len() / CIFAR_RECORD * (CIFAR_RECORD - 1)),
        labels: Vec::with_capacity(bytes.len() / CIFAR_RECORD),
    };
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("label byte {} out of range", rec[0]),
            });
        }
        raw.labels.push(rec[0]);
        raw.pixels.extend_from_slice(&rec[1..]);
    }
    Ok(raw)
}

pub fn read_cifar_file(path: impl AsRef<Path>) -> Result<RawImages> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_records(&bytes, path)
}

fn read_cifar_files(dir: &Path, names: &[&str]) -> Result<RawImages> {
    let mut all: Option<RawImages> = None;
    for name in names {
        let part = read_cifar_file(dir.join(name))?;
        match all.as_mut() {
            Some(a) => a.append(part),
            None => all = Some(part),
        }
    }
    all.ok_or_else(|| Error::Data("no CIFAR files requested".into()))
}

/// The five training batches, standardized with their own constants.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<Dataset> {
    read_cifar_files(dir.as_ref(), &CIFAR_TRAIN_FILES)?.standardize(CIFAR_CLASSES)
}

/// The test batch, standardized with the training set's constants.
pub fn load_cifar10_test(dir: impl AsRef<Path>, train: &Dataset) -> Result<Dataset> {
    read_cifar_files(dir.as_ref(), &[CIFAR_TEST_FILE])?.to_dataset(CIFAR_CLASSES, &train.mean, &train.std)
}

/// Balanced labels `0, 1, …, classes-1, 0, …` in a seeded random order.
fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

/// Unit-variance Gaussian clusters whose class means sit `separation`
/// standard deviations apart.
///
/// With at least as many dimensions as classes the means are scaled basis
/// vectors, so every pair is exactly `separation` apart; otherwise they are
/// random directions of the same norm.
pub fn synth_blobs(seed: u64, n: usize, classes: usize, sample: Shape, separation: f64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::Data(format!(
            "need at least one sample per class ({n} for {classes})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = sample.sample_len();
    let radius = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if dim >= classes {
                (0..dim).map(|d| if d == c { radius } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x * radius / norm).collect()
            }
        })
        .collect();
    let labels = balanced_labels(n, classes, &mut rng);
    let mut data = Vec::with_capacity(n * dim);
    for &l in &labels {
        for m in &means[l] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((m + z) as f32);
        }
    }
    Dataset::new(Tensor::from_vec(sample.with_batch(n), data)?, labels, classes)
}

/// Parameters of [`synth_textures`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub channels: usize,
    pub side: usize,
    /// Standard deviation of the per-pixel noise, in pixel levels.
    pub noise: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            channels: CIFAR_CHANNELS,
            side: CIFAR_SIDE,
            noise: 48.0,
        }
    }
}

/// 8-bit images of class-specific oriented gratings.
///
/// Each class owns an orientation, a spatial frequency and a colour; every
/// image draws its own phase, contrast, brightness and pixel noise, so the
/// classes overlap and a small network cannot separate them perfectly.
pub fn synth_textures(seed: u64, n: usize, classes: usize, params: TextureParams) -> Result<RawImages> {
    if classes == 0 || classes > 256 || n < classes {
        return Err(Error::Data(format!("cannot draw {n} images over {classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let TextureParams { channels, side, noise } = params;
    let styles: Vec<(f64, f64, Vec<f64>)> = (0..classes)
        .map(|c| {
            let angle = std::f64::consts::PI * c as f64 / classes as f64;
            let freq = 2.0 + (c % 3) as f64 * 1.5;
            let colour = (0..channels).map(|_| rng.random_range(0.3..1.0)).collect();
            (angle, freq, colour)
        })
        .collect();
    let labels = balanced_labels(n, classes, &mut rng);
    let noise = Normal::new(0.0, noise).map_err(|e| Error::Data(e.to_string()))?;
    let mut pixels = Vec::with_capacity(n * channels * side * side);
    for &l in &labels {
        let (angle, freq, colour) = &styles[l];
        let jitter = rng.random_range(-0.25..0.25);
        let (s, c) = (angle + jitter).sin_cos();
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let contrast = rng.random_range(30.0..90.0);
        let bright = rng.random_range(90.0..160.0);
        for &tint in colour {
            for y in 0..side {
                for x in 0..side {
                    let t = (x as f64 * c + y as f64 * s) / side as f64;
                    let wave = (std::f64::consts::TAU * freq * t + phase).sin();
                    let v = bright + contrast * tint * wave + noise.sample(&mut rng);
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Ok(RawImages {
        channels,
        height: side,
        width: side,
        pixels,
        labels: labels.into_iter().map(|l| l as u8).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    #[serde(default)]
    pub flip: bool,
    /// Zero-pad by this many pixels and crop back at a random offset.
    #[serde(default)]
    pub translate: usize,
}

impl Augment {
    pub const CIFAR: Augment = Augment {
        flip: true,
        translate: 4,
    };

    pub fn is_off(&self) -> bool {
        !self.flip && self.translate == 0
    }
}

/// Random horizontal flips and translations, drawn per image in batch order.
pub fn augment_batch<T: Real>(batch: &mut Tensor<T>, flags: Augment, rng: &mut impl Rng) -> Result<()> {
    let Shape::Image { n, c, h, w } = batch.shape() else {
        return Err(Error::Data("augmentation needs image batches".into()));
    };
    if flags.is_off() {
        return Ok(());
    }
    let plane = h * w;
    let mut tmp = vec![T::zero(); plane];
    let pad = flags.translate as i64;
    for img in batch.data_mut().chunks_mut(c * plane).take(n) {
        let flip = flags.flip && rng.random_bool(0.5);
        let (dy, dx) = if pad > 0 {
            let dy = rng.random_range(-pad..=pad) as isize;
            (dy, rng.random_range(-pad..=pad) as isize)
        } else {
            (0, 0)
        };
        for chan in img.chunks_mut(plane) {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = x as isize + dx;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    tmp[y * w + x] = if (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx0) {
                        chan[sy as usize * w + sx as usize]
                    } else {
                        T::zero()
                    };
                }
            }
            chan.copy_from_slice(&tmp);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_RECORD - 1).map(fill));
        r
    }

    #[test]
    fn parses_hand_built_records() {
        let mut bytes = record(3, |i| (i % 256) as u8);
        bytes.extend(record(9, |i| if i < 1024 { 255 } else { 0 }));
        let raw = parse_cifar_records(&bytes, Path::new("fixture")).unwrap();
        assert_eq!(raw.labels, vec![3, 9]);
        assert_eq!(raw.pixels[1025], 1);
        let ds = raw.to_dataset(10, &[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(ds.images.shape(), Shape::image(2, 3, 32, 32));
        // Second image: red channel all 255 → 1.0, green 0.
        assert_eq!(ds.images.at(1, 0, 5, 7), 1.0);
        assert_eq!(ds.images.at(1, 1, 0, 0), 0.0);
        assert_eq!(ds.images.at(0, 0, 0, 2), 2.0 / 255.0);
        assert_eq!(ds.images.at(0, 1, 0, 0), (1024 % 256) as f32 / 255.0);
    }

    #[test]
    fn truncated_and_bad_label_records() {
        let bytes = record(1, |_| 0);
        assert!(matches!(
            parse_cifar_records(&bytes[..100], Path::new("x")),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            parse_cifar_records(&record(10, |_| 0), Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn standardization() {
        let raw = synth_textures(1, 40, 10, TextureParams::default()).unwrap();
        let ds = raw.standardize(10).unwrap();
        let (mean, var) = crate::tensor::channel_moments(&ds.images);
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-4 && (var[c] - 1.0).abs() < 1e-3, "{mean:?} {var:?}");
        }
    }

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let a = synth_blobs(5, 103, 10, Shape::matrix(1, 16), 10.0).unwrap();
        assert_eq!(a, synth_blobs(5, 103, 10, Shape::matrix(1, 16), 10.0).unwrap());
        let mut counts = [0usize; 10];
        a.labels.iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| c == 10 || c == 11));
        assert_ne!(a, synth_blobs(6, 103, 10, Shape::matrix(1, 16), 10.0).unwrap());
    }

    #[test]
    fn augmentation_properties() {
        let x = Tensor::<f32>::from_fn(Shape::image(4, 2, 6, 6), |i| i as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut y = x.clone();
        augment_batch(&mut y, Augment::default(), &mut rng).unwrap();
        assert_eq!(y, x);

        let flip = Augment {
            flip: true,
            translate: 0,
        };
        augment_batch(&mut y, flip, &mut rng).unwrap();
        // Flipped images keep their pixel multiset.
        for (a, b) in x.data().chunks(72).zip(y.data().chunks(72)) {
            let (mut a, mut b) = (a.to_vec(), b.to_vec());
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            assert_eq!(a, b);
        }

        let one = Tensor::<f32>::from_fn(Shape::image(1, 1, 3, 3), |i| i as f32);
        // Find a seed whose first flip draw is true, then flip twice.
        let mut twice = one.clone();
        let mut seed = 0;
        loop {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut t = one.clone();
            augment_batch(&mut t, flip, &mut r).unwrap();
            if t != one {
                assert_eq!(t.data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0, 8.0, 7.0, 6.0]);
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                augment_batch(&mut twice, flip, &mut r).unwrap();
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                augment_batch(&mut twice, flip, &mut r).unwrap();
                break;
            }
            seed += 1;
        }
        assert_eq!(twice, one);
    }

    #[test]
    fn translation_shifts_with_zero_fill() {
        let x = Tensor::<f64>::filled(Shape::image(8, 1, 5, 5), 1.0);
        let mut y = x.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        augment_batch(
            &mut y,
            Augment {
                flip: false,
                translate: 2,
            },
            &mut rng,
        )
        .unwrap();
        for img in y.data().chunks(25) {
            let ones = img.iter().filter(|&&v| v == 1.0).count();
            assert!(ones >= 9 && img.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn cifar_dump_roundtrip() {
        let raw = synth_textures(2, 12, 10, TextureParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        raw.write_cifar(&path).unwrap();
        assert_eq!(read_cifar_file(&path).unwrap(), raw);
        assert!(matches!(load_cifar10(dir.path()), Err(Error::Io { .. })));
    }
}
