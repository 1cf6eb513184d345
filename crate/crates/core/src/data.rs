//! In-memory image classification datasets.
//!
//! Two sources are supported: a seeded synthetic generator (Gaussian class
//! prototypes plus per-sample noise) and a small raw binary format:
//!
//! ```text
//! bytes 0..4   magic "HNDS"
//! then five little-endian u32: count, channels, height, width, classes
//! then per sample: one u8 label, channels*height*width u8 pixels (CHW)
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[channels, height, width]` of one sample.
    pub sample_shape: [usize; 3],
    pub num_classes: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of per-pixel noise around the class prototype.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples: 256,
            classes: 4,
            channels: 3,
            height: 8,
            width: 8,
            noise: 0.5,
            seed: 0,
        }
    }
}

impl Dataset {
    pub fn new(
        sample_shape: [usize; 3],
        num_classes: usize,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = sample_shape.iter().product::<usize>();
        if images.len() != per * labels.len() {
            return Err(Error::shape(format!(
                "{} pixel values for {} samples of shape {:?}",
                images.len(),
                labels.len(),
                sample_shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            sample_shape,
            num_classes,
            images,
            labels,
        })
    }

    /// Class prototypes are standard-normal images; each sample is its
    /// prototype plus isotropic noise. Classes are assigned round-robin so
    /// the set is balanced.
    pub fn synthetic(spec: &SyntheticSpec) -> Result<Self> {
        if spec.classes < 2 || spec.samples < spec.classes {
            return Err(Error::invalid(format!(
                "synthetic set needs >= 2 classes and at least one sample per class, got {} samples / {} classes",
                spec.samples, spec.classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let per = spec.channels * spec.height * spec.width;
        let prototypes: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| (0..per).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut images = Vec::with_capacity(per * spec.samples);
        let mut labels = Vec::with_capacity(spec.samples);
        for i in 0..spec.samples {
            let label = i % spec.classes;
            labels.push(label);
            images.extend(
                prototypes[label]
                    .iter()
                    .map(|p| p + spec.noise * rng.sample::<f64, _>(StandardNormal)),
            );
        }
        Dataset::new(
            [spec.channels, spec.height, spec.width],
            spec.classes,
            images,
            labels,
        )
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let name = path.display().to_string();
        if bytes.len() < 24 || &bytes[..4] != b"HNDS" {
            return Err(Error::format(&name, 1, "missing HNDS header"));
        }
        let field = |i: usize| {
            u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
        };
        let (count, c, h, w, classes) = (field(0), field(1), field(2), field(3), field(4));
        let per = c * h * w;
        if bytes.len() != 24 + count * (per + 1) {
            return Err(Error::format(
                &name,
                1,
                format!(
                    "expected {} bytes for {count} samples of {c}x{h}x{w}, found {}",
                    24 + count * (per + 1),
                    bytes.len()
                ),
            ));
        }
        let mut images = Vec::with_capacity(count * per);
        let mut labels = Vec::with_capacity(count);
        for rec in bytes[24..].chunks(per + 1) {
            labels.push(rec[0] as usize);
            images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
        let mut ds = Dataset::new([c, h, w], classes, images, labels)?;
        ds.standardize();
        Ok(ds)
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let [c, h, w] = self.sample_shape;
        let mut out = Vec::with_capacity(24 + self.len() * (c * h * w + 1));
        out.extend_from_slice(b"HNDS");
        for v in [self.len(), c, h, w, self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for i in 0..self.len() {
            out.push(self.labels[i] as u8);
            out.extend(
                self.sample(i)
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
            );
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.sample_len();
        &self.images[i * per..][..per]
    }

    /// Per-channel zero mean and unit variance over the whole set.
    pub fn standardize(&mut self) {
        let [c, h, w] = self.sample_shape;
        let plane = h * w;
        let n = self.len();
        for ch in 0..c {
            let values = (0..n).flat_map(|i| {
                let off = i * c * plane + ch * plane;
                self.images[off..off + plane].iter().copied()
            });
            let count = (n * plane) as f64;
            let mean = values.clone().sum::<f64>() / count;
            let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let sd = var.sqrt().max(1e-12);
            for i in 0..n {
                let off = i * c * plane + ch * plane;
                self.images[off..off + plane]
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean) / sd);
            }
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            images.extend_from_slice(self.sample(i));
        }
        Dataset {
            sample_shape: self.sample_shape,
            num_classes: self.num_classes,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Stacks the given samples into an `[N, C, H, W]` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sub = self.subset(indices);
        let [c, h, w] = self.sample_shape;
        let x = Tensor::new(&[indices.len(), c, h, w], sub.images).expect("consistent batch");
        (x, sub.labels)
    }

    /// Same images with labels permuted by a seeded shuffle.
    pub fn with_shuffled_labels(&self, seed: u64) -> Dataset {
        let mut labels = self.labels.clone();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Dataset {
            labels,
            ..self.clone()
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }
}

/// Seeded, class-stratified split into `(first, second)` where `first`
/// receives `fraction` of every class (rounded to nearest).
pub fn stratified_split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for class in 0..ds.num_classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let take = (members.len() as f64 * fraction).round() as usize;
        if take == 0 || take == members.len() {
            return Err(Error::invalid(format!(
                "class {class} has {} samples; split {fraction} leaves one side empty",
                members.len()
            )));
        }
        first.extend_from_slice(&members[..take]);
        second.extend_from_slice(&members[take..]);
    }
    first.shuffle(&mut rng);
    second.shuffle(&mut rng);
    Ok((ds.subset(&first), ds.subset(&second)))
}

/// A seeded permutation of `0..n` cut into batches of at most `batch`.
pub fn shuffled_batches<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}
