//! Datasets: CIFAR binary files, a synthetic quadratic task, augmentation.

pub mod augment;
pub mod cifar;
pub mod synthetic;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{dim_err, FbError, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
enum Samples {
    /// 8-bit images normalized per channel on the way out.
    Bytes {
        pixels: Vec<u8>,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    Dense(Vec<f64>),
}

/// Labelled samples of a fixed per-sample shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    samples: Samples,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn dense(sample_shape: &[usize], values: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        Self::checked(sample_shape, values.len(), Samples::Dense(values), labels, classes)
    }

    /// Byte images `[C, H, W]` mapped to `(v/255 − mean_c)/std_c`.
    pub fn bytes(
        sample_shape: &[usize],
        pixels: Vec<u8>,
        labels: Vec<usize>,
        classes: usize,
        mean: Vec<f64>,
        std: Vec<f64>,
    ) -> Result<Self> {
        if sample_shape.len() != 3 || mean.len() != sample_shape[0] || std.len() != sample_shape[0] {
            return Err(dim_err(format!(
                "byte images need [C, H, W] with C statistics, got {sample_shape:?}"
            )));
        }
        let len = pixels.len();
        Self::checked(sample_shape, len, Samples::Bytes { pixels, mean, std }, labels, classes)
    }

    fn checked(shape: &[usize], len: usize, samples: Samples, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || len != per * labels.len() {
            return Err(dim_err(format!(
                "{len} values for {} samples of shape {shape:?}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(FbError::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            sample_shape: shape.to_vec(),
            samples,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Reinterprets every sample under a new shape of equal size.
    pub fn with_sample_shape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.sample_shape.iter().product::<usize>() {
            return Err(dim_err(format!("cannot view {:?} as {shape:?}", self.sample_shape)));
        }
        if matches!(self.samples, Samples::Bytes { .. }) {
            return Err(dim_err("byte images keep their channel layout"));
        }
        self.sample_shape = shape.to_vec();
        Ok(self)
    }

    /// Samples `idx` as a `[idx.len(), ...shape]` tensor.
    pub fn batch<T: Element>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per: usize = self.sample_shape.iter().product();
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            match &self.samples {
                Samples::Dense(v) => out.extend(v[i * per..(i + 1) * per].iter().map(|&x| T::of(x))),
                Samples::Bytes { pixels, mean, std } => {
                    let plane = per / mean.len();
                    for (j, &b) in pixels[i * per..(i + 1) * per].iter().enumerate() {
                        let c = j / plane;
                        out.push(T::of((b as f64 / 255.0 - mean[c]) / std[c]));
                    }
                }
            }
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.sample_shape);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, out).expect("batch size matches shape"), labels)
    }

    /// Keeps only the samples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let per: usize = self.sample_shape.iter().product();
        let samples = match &self.samples {
            Samples::Dense(v) => Samples::Dense(idx.iter().flat_map(|&i| v[i * per..(i + 1) * per].to_vec()).collect()),
            Samples::Bytes { pixels, mean, std } => Samples::Bytes {
                pixels: idx
                    .iter()
                    .flat_map(|&i| pixels[i * per..(i + 1) * per].to_vec())
                    .collect(),
                mean: mean.clone(),
                std: std.clone(),
            },
        };
        Dataset {
            sample_shape: self.sample_shape.clone(),
            samples,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Content hash over shape, labels and raw sample values.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for &d in &self.sample_shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &l in &self.labels {
            bytes.extend_from_slice(&(l as u32).to_le_bytes());
        }
        match &self.samples {
            Samples::Dense(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            Samples::Bytes { pixels, .. } => bytes.extend_from_slice(pixels),
        }
        crate::report::content_hash(&bytes)
    }

    /// Sample count per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Indices of a class-balanced subset of `total` samples: an equal share
/// per class (remainder to the lowest classes), drawn without replacement.
pub fn balanced_subset<R: Rng + ?Sized>(
    labels: &[usize],
    classes: usize,
    total: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut out = Vec::with_capacity(total);
    for (c, members) in by_class.iter_mut().enumerate() {
        let want = total / classes + usize::from(c < total % classes);
        if members.len() < want {
            return Err(FbError::Data(format!(
                "class {c} has {} samples, subset needs {want}",
                members.len()
            )));
        }
        members.shuffle(rng);
        out.extend_from_slice(&members[..want]);
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn dense_batches() {
        let d = Dataset::dense(&[2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0], vec![0, 1, 0], 2).unwrap();
        let (x, y) = d.batch::<f32>(&[2, 0]);
        assert_eq!(x.shape(), [2, 2]);
        assert_eq!(x.data(), [4.0, 5.0, 0.0, 1.0]);
        assert_eq!(y, [0, 0]);
    }

    #[test]
    fn byte_normalization() {
        let d = Dataset::bytes(&[2, 1, 1], vec![255, 0], vec![1], 2, vec![0.5, 0.0], vec![0.5, 1.0]).unwrap();
        let (x, _) = d.batch::<f64>(&[0]);
        assert_eq!(x.data(), [1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_labels_and_sizes() {
        assert!(matches!(
            Dataset::dense(&[1], vec![0.0], vec![3], 2),
            Err(FbError::Data(_))
        ));
        assert!(Dataset::dense(&[2], vec![0.0], vec![0], 2).is_err());
    }

    #[test]
    fn balanced_subset_counts() {
        let labels: Vec<usize> = (0..100).map(|i| (i * 7) % 3).collect();
        let idx = balanced_subset(&labels, 3, 30, &mut stream(1, Stream::Data)).unwrap();
        let mut h = [0; 3];
        idx.iter().for_each(|&i| h[labels[i]] += 1);
        assert_eq!(h, [10, 10, 10]);
        assert!(balanced_subset(&labels, 3, 200, &mut stream(1, Stream::Data)).is_err());
    }
}
