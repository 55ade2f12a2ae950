//! Synthetic classification with planted low-rank quadratic structure.
//!
//! Inputs are standard Gaussian vectors. Class `j` scores
//!
//! ```text
//! s_j(x) = a_j·x + Σ_{t<r} (u_{j,t}·x)² + noise·ε
//! ```
//!
//! and the label is the arg-max score. A factorized layer with `k ≥ r`
//! represents the noiseless rule exactly; a linear classifier cannot.
//!
//! Samples are drawn with per-class quotas, so every split is class
//! balanced and a label-blind predictor scores exactly chance.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{FbError, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub rank: usize,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub noise: f64,
    /// Standard deviation of the linear part of each score.
    pub linear_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 16,
            rank: 4,
            classes: 4,
            train: 8000,
            test: 2000,
            noise: 0.0,
            linear_scale: 1.0,
            seed: 0,
        }
    }
}

/// The generator's planted parameters, kept for auditing.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticSpec,
    /// `[classes, n]`
    pub linear: Tensor<f64>,
    /// `[classes, rank, n]`
    pub factors: Tensor<f64>,
}

impl SyntheticTask {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        if spec.n == 0 || spec.classes < 2 || spec.rank > spec.n {
            return Err(FbError::Config(format!(
                "synthetic task needs n ≥ 1, rank ≤ n and at least 2 classes, got n={} rank={} classes={}",
                spec.n, spec.rank, spec.classes
            )));
        }
        if !(spec.noise >= 0.0 && spec.linear_scale >= 0.0) {
            return Err(FbError::Config(
                "synthetic noise and linear scale must be non-negative".into(),
            ));
        }
        let mut rng = stream(spec.seed, Stream::Data);
        let (n, c, r) = (spec.n, spec.classes, spec.rank);
        let unit = 1.0 / (n as f64).sqrt();
        let mut gauss = |s: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            s * z
        };
        let linear = Tensor::from_fn(&[c, n], |_| gauss(spec.linear_scale * unit));
        let factors = Tensor::from_fn(&[c, r, n], |_| gauss(unit));
        Ok(SyntheticTask { spec, linear, factors })
    }

    /// Noiseless class scores of one input.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let (n, r) = (self.spec.n, self.spec.rank);
        (0..self.spec.classes)
            .map(|j| {
                let lin: f64 = self.linear.outer(j).iter().zip(x).map(|(a, b)| a * b).sum();
                let quad: f64 = (0..r)
                    .map(|t| {
                        let row = &self.factors.data()[(j * r + t) * n..(j * r + t + 1) * n];
                        let s: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
                        s * s
                    })
                    .sum();
                lin + quad
            })
            .collect()
    }

    fn label_of<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> usize {
        let mut s = self.scores(x);
        if self.spec.noise > 0.0 {
            for v in &mut s {
                let z: f64 = StandardNormal.sample(rng);
                *v += self.spec.noise * z;
            }
        }
        s.iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > s[best] { i } else { best })
    }

    /// `count` samples, `count / classes` per class with the remainder going
    /// to the lowest labels. Draws past a full quota are discarded.
    fn draw<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Dataset> {
        let (n, c) = (self.spec.n, self.spec.classes);
        let mut quota: Vec<usize> = (0..c).map(|j| count / c + usize::from(j < count % c)).collect();
        let mut values = Vec::with_capacity(count * n);
        let mut labels = Vec::with_capacity(count);
        let budget = 1000 * count + 10_000;
        for _ in 0..budget {
            if labels.len() == count {
                break;
            }
            let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let label = self.label_of(&x, rng);
            if quota[label] > 0 {
                quota[label] -= 1;
                values.extend(x);
                labels.push(label);
            }
        }
        if labels.len() < count {
            let starved: Vec<usize> = (0..c).filter(|&j| quota[j] > 0).collect();
            return Err(FbError::Data(format!(
                "synthetic classes {starved:?} are too rare to fill a balanced split"
            )));
        }
        Dataset::dense(&[n], values, labels, c)
    }

    /// Independent train and test samples.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        let mut rng = stream(self.spec.seed.wrapping_add(1), Stream::Data);
        let train = self.draw(self.spec.train, &mut rng)?;
        let test = self.draw(self.spec.test, &mut rng)?;
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_labelled_by_argmax() {
        let spec = SyntheticSpec {
            train: 50,
            test: 10,
            ..Default::default()
        };
        let task = SyntheticTask::new(spec.clone()).unwrap();
        let (a, _) = task.generate().unwrap();
        let (b, _) = SyntheticTask::new(spec).unwrap().generate().unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            let (x, y) = a.batch::<f64>(&[i]);
            let s = task.scores(x.data());
            let best = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(s[y[0]], best);
        }
    }

    #[test]
    fn splits_are_class_balanced() {
        let task = SyntheticTask::new(SyntheticSpec {
            train: 4002,
            test: 40,
            classes: 10,
            ..Default::default()
        })
        .unwrap();
        let (train, test) = task.generate().unwrap();
        assert_eq!(
            train.class_histogram(),
            [401, 401, 400, 400, 400, 400, 400, 400, 400, 400]
        );
        assert_eq!(test.class_histogram(), [4; 10]);
    }

    #[test]
    fn rank_zero_is_linear() {
        let task = SyntheticTask::new(SyntheticSpec {
            rank: 0,
            ..Default::default()
        })
        .unwrap();
        let x = [1.0; 16];
        let s = task.scores(&x);
        for (j, v) in s.iter().enumerate() {
            assert!((v - task.linear.outer(j).iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(SyntheticTask::new(SyntheticSpec {
            classes: 1,
            ..Default::default()
        })
        .is_err());
        assert!(SyntheticTask::new(SyntheticSpec {
            noise: -1.0,
            ..Default::default()
        })
        .is_err());
        assert!(SyntheticTask::new(SyntheticSpec {
            rank: 17,
            ..Default::default()
        })
        .is_err());
    }
}
