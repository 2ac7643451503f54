//! Class-conditional synthetic images: a fixed random template per class plus
//! Gaussian noise per sample.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub image_size: usize,
    #[serde(default = "three")]
    pub channels: usize,
    /// Standard deviation of the additive noise.
    pub noise: f32,
}

fn three() -> usize {
    3
}

/// A dataset spec file: the spec plus the seed that generated it. A run
/// config is also a valid dataset spec file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub seed: u64,
    #[serde(flatten)]
    pub spec: DatasetSpec,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.train_samples == 0 || self.val_samples == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("sample counts, image size and channels must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise level {} must be >= 0", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[C, H, W]` of one sample.
    pub sample_shape: [usize; 3],
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the given samples into `[B, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange { index: i, len: self.len() });
            }
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.sample_shape;
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// Consecutive batches over all samples, in order.
    pub fn chunks(&self, batch: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.len()).step_by(batch.max(1)).map(move |s| (s..(s + batch).min(self.len())).collect())
    }

    /// Epoch order, fixed by `(seed, epoch)`.
    pub fn shuffled(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        order
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub templates: Vec<Vec<f32>>,
}

/// Deterministic in `(spec, seed)`. Labels cycle through the classes, so each
/// split is exactly balanced when its size is a multiple of the class count.
pub fn synth_dataset(spec: &DatasetSpec, seed: u64) -> Result<Split> {
    spec.validate()?;
    let shape = [spec.channels, spec.image_size, spec.image_size];
    let len: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let mut make = |count: usize| {
        let mut images = Vec::with_capacity(count * len);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % spec.classes;
            labels.push(label);
            for &t in &templates[label] {
                let z: f32 = StandardNormal.sample(&mut rng);
                images.push(t + spec.noise * z);
            }
        }
        Dataset {
            sample_shape: shape,
            images,
            labels,
        }
    };
    let train = make(spec.train_samples);
    let val = make(spec.val_samples);
    Ok(Split { train, val, templates })
}
