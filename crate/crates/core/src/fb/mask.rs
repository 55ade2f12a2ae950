use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FbError, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Training,
    Inference,
}

/// How retained factors are weighted.
///
/// `Standard` multiplies kept factors by 1 during training and every factor
/// by `p` at inference. `Inverted` multiplies kept factors by `1/p` during
/// training and leaves inference unscaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskScheme {
    #[default]
    Standard,
    Inverted,
}

/// One DropFactor draw: a keep flag per factor, shared by every output unit,
/// sample and spatial position of a layer for one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct DropFactorMask {
    p: f64,
    keep: Vec<bool>,
    mode: MaskMode,
    scheme: MaskScheme,
}

pub(crate) fn check_retain_probability(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(FbError::Config(format!(
            "retain probability must lie in (0, 1], got {p}"
        )));
    }
    Ok(())
}

impl DropFactorMask {
    pub fn training(p: f64, keep: Vec<bool>) -> Result<Self> {
        check_retain_probability(p)?;
        Ok(DropFactorMask {
            p,
            keep,
            mode: MaskMode::Training,
            scheme: MaskScheme::Standard,
        })
    }

    pub fn inference(k: usize, p: f64) -> Result<Self> {
        check_retain_probability(p)?;
        Ok(DropFactorMask {
            p,
            keep: vec![true; k],
            mode: MaskMode::Inference,
            scheme: MaskScheme::Standard,
        })
    }

    /// All factors kept, unit weights: the undropped layer.
    pub fn identity(k: usize) -> Self {
        DropFactorMask {
            p: 1.0,
            keep: vec![true; k],
            mode: MaskMode::Inference,
            scheme: MaskScheme::Standard,
        }
    }

    pub fn with_scheme(mut self, scheme: MaskScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn k(&self) -> usize {
        self.keep.len()
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn scheme(&self) -> MaskScheme {
        self.scheme
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    /// Mask values as a `{0,1}` tensor of length k.
    pub fn as_tensor(&self) -> Tensor<f64> {
        Tensor::from_fn(&[self.keep.len()], |i| if self.keep[i] { 1.0 } else { 0.0 })
    }

    /// Per-factor multipliers applied to the squared projections.
    pub fn gates<T: Element>(&self) -> Vec<T> {
        self.keep
            .iter()
            .map(|&kept| match (self.mode, self.scheme) {
                (MaskMode::Inference, MaskScheme::Standard) => T::of(self.p),
                (MaskMode::Inference, MaskScheme::Inverted) => T::one(),
                (MaskMode::Training, _) if !kept => T::zero(),
                (MaskMode::Training, MaskScheme::Standard) => T::one(),
                (MaskMode::Training, MaskScheme::Inverted) => T::of(1.0 / self.p),
            })
            .collect()
    }
}

/// Draws k independent Bernoulli(p) keep flags from `rng`.
pub fn sample_mask_with<R: Rng + ?Sized>(k: usize, p: f64, rng: &mut R) -> Result<DropFactorMask> {
    check_retain_probability(p)?;
    let keep = (0..k).map(|_| rng.random::<f64>() < p).collect();
    DropFactorMask::training(p, keep)
}

pub fn sample_mask(k: usize, p: f64, seed: u64) -> Result<DropFactorMask> {
    sample_mask_with(k, p, &mut stream(seed, Stream::Mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_one_keeps_everything() {
        for seed in 0..20 {
            let m = sample_mask(50, 1.0, seed).unwrap();
            assert!(m.keep().iter().all(|&b| b));
        }
    }

    #[test]
    fn bernoulli_concentration() {
        let m = sample_mask(10_000, 0.5, 2024).unwrap();
        let mean = m.as_tensor().sum() / 10_000.0;
        let three_sigma = 3.0 * (0.25f64 / 10_000.0).sqrt();
        assert!((mean - 0.5).abs() <= three_sigma, "mean {mean}");
    }

    #[test]
    fn same_seed_same_mask() {
        assert_eq!(sample_mask(64, 0.3, 9).unwrap(), sample_mask(64, 0.3, 9).unwrap());
        assert_ne!(sample_mask(64, 0.3, 9).unwrap(), sample_mask(64, 0.3, 10).unwrap());
    }

    #[test]
    fn invalid_probability_is_config_error() {
        for p in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(sample_mask(3, p, 1), Err(FbError::Config(_))));
        }
    }

    #[test]
    fn gate_values() {
        let m = DropFactorMask::training(0.5, vec![true, false]).unwrap();
        assert_eq!(m.gates::<f64>(), vec![1.0, 0.0]);
        assert_eq!(
            m.clone().with_scheme(MaskScheme::Inverted).gates::<f64>(),
            vec![2.0, 0.0]
        );
        let inf = DropFactorMask::inference(2, 0.25).unwrap();
        assert_eq!(inf.gates::<f64>(), vec![0.25, 0.25]);
        assert_eq!(inf.with_scheme(MaskScheme::Inverted).gates::<f64>(), vec![1.0, 1.0]);
    }
}
