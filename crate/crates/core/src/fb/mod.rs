//! Factorized bilinear layers.
//!
//! Each output unit `j` computes
//!
//! ```text
//! y_j = b_j + w_j·x + Σ_t g_t (f_{j,t}·x)²
//! ```
//!
//! where `f_{j,t}` is row `t` of the unit's `k×n` factor matrix and `g_t`
//! is the DropFactor gate of factor `t`. The interaction matrix `F_jᵀF_j`
//! is never formed; every term costs `O(kn)`.

pub mod conv;
pub mod dense;
pub mod mask;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, FbError, Result};
use crate::tensor::{Element, Tensor};

pub use conv::{fb_conv_backward, fb_conv_forward, FbConvCache, FbConvLayer};
pub use dense::{fb_backward, fb_forward, FbCache, FbGradients};
pub use mask::{sample_mask, sample_mask_with, DropFactorMask, MaskMode, MaskScheme};

/// Parameters of `c` factorized bilinear units over `n` inputs with `k`
/// factors each.
#[derive(Clone, Debug, PartialEq)]
pub struct FbLayerParams<T = f64> {
    /// `[c]`
    pub bias: Tensor<T>,
    /// `[c, n]`, row `j` is the linear weight of unit `j`.
    pub weight: Tensor<T>,
    /// `[c, k, n]`, slice `j` is the factor matrix of unit `j`.
    pub factors: Tensor<T>,
}

impl<T: Element> FbLayerParams<T> {
    pub fn new(bias: Tensor<T>, weight: Tensor<T>, factors: Tensor<T>) -> Result<Self> {
        let (c, n) = weight.dims2()?;
        if bias.shape() != [c] {
            return Err(dim_err(format!(
                "bias shape {:?} does not match {c} output units",
                bias.shape()
            )));
        }
        match factors.shape()[..] {
            [fc, _, fn_] if fc == c && fn_ == n => {}
            _ => {
                return Err(dim_err(format!(
                    "factor shape {:?} does not match weight shape {:?}",
                    factors.shape(),
                    weight.shape()
                )))
            }
        }
        Ok(FbLayerParams { bias, weight, factors })
    }

    pub fn zeros(c: usize, n: usize, k: usize) -> Self {
        FbLayerParams {
            bias: Tensor::zeros(&[c]),
            weight: Tensor::zeros(&[c, n]),
            factors: Tensor::zeros(&[c, k, n]),
        }
    }

    /// Draws `b`, `w` uniformly in `±1/√n` and factor entries from
    /// `N(0, σ²)`, `σ = init.factor_std` or `√(1/(k·n))` when unset.
    pub fn init<R: Rng + ?Sized>(c: usize, n: usize, k: usize, init: &FactorInit, rng: &mut R) -> Self {
        let bound = 1.0 / (n.max(1) as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weight = Tensor::from_fn(&[c, n], |_| T::of(uniform.sample(rng)));
        let bias = Tensor::from_fn(&[c], |_| T::of(uniform.sample(rng)));
        let std = init.std_for(n, k);
        let normal = Normal::new(0.0, std).expect("finite std");
        let factors = Tensor::from_fn(&[c, k, n], |_| T::of(normal.sample(rng)));
        FbLayerParams { bias, weight, factors }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn factor_count(&self) -> usize {
        self.factors.shape()[1]
    }

    pub fn count(&self) -> ParamCount {
        param_count(self.outputs(), self.inputs(), self.factor_count())
    }

    /// Factor row `t` of unit `j`.
    pub fn factor(&self, j: usize, t: usize) -> &[T] {
        let (k, n) = (self.factor_count(), self.inputs());
        let start = (j * k + t) * n;
        &self.factors.data()[start..start + n]
    }

    pub fn all_finite(&self) -> bool {
        self.bias.all_finite() && self.weight.all_finite() && self.factors.all_finite()
    }
}

/// Initialization of the factor matrices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorInit {
    pub factor_std: Option<f64>,
}

impl FactorInit {
    pub fn std_for(&self, n: usize, k: usize) -> f64 {
        self.factor_std
            .unwrap_or_else(|| (1.0 / ((k.max(1) * n.max(1)) as f64)).sqrt())
    }
}

/// Parameter budget of a layer, split into the linear part and the factor
/// part.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub linear: u64,
    pub quadratic: u64,
    pub total: u64,
}

pub fn param_count(c: usize, n: usize, k: usize) -> ParamCount {
    let (c, n, k) = (c as u64, n as u64, k as u64);
    let linear = c * n + c;
    let quadratic = c * k * n;
    ParamCount {
        linear,
        quadratic,
        total: linear + quadratic,
    }
}

pub(crate) fn check_mask_len(mask: &DropFactorMask, k: usize) -> Result<()> {
    if mask.k() != k {
        return Err(dim_err(format!("mask has {} entries, layer has {k} factors", mask.k())));
    }
    Ok(())
}

pub(crate) fn contract(msg: impl Into<String>) -> FbError {
    FbError::Contract(msg.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn table_one_factorized_count() {
        let pc = param_count(1000, 512, 20);
        assert_eq!(pc.quadratic, 10_240_000);
        assert_eq!(pc.linear, 1000 * 512 + 1000);
        assert_eq!(pc.total, pc.linear + pc.quadratic);
        assert_eq!(param_count(1000, 512, 0).quadratic, 0);
        // Bilinear comparator c·n².
        assert_eq!(1000u64 * 512 * 512, 262_144_000);
    }

    #[test]
    fn init_shapes_and_scale() {
        let mut rng = stream(1, Stream::Init);
        let p: FbLayerParams<f64> = FbLayerParams::init(3, 200, 5, &FactorInit::default(), &mut rng);
        assert_eq!(p.factors.shape(), &[3, 5, 200]);
        assert_eq!(p.count().quadratic, 3 * 5 * 200);
        let var = p.factors.data().iter().map(|v| v * v).sum::<f64>() / p.factors.len() as f64;
        let expect = 1.0 / 1000.0;
        assert!((var - expect).abs() < 0.2 * expect, "{var}");
        let bound = 1.0 / 200f64.sqrt();
        assert!(p.weight.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn new_rejects_inconsistent_shapes() {
        let ok = FbLayerParams::<f64>::zeros(2, 3, 1);
        assert!(FbLayerParams::new(ok.bias.clone(), ok.weight.clone(), Tensor::zeros(&[2, 1, 4])).is_err());
        assert!(FbLayerParams::new(Tensor::zeros(&[3]), ok.weight.clone(), ok.factors.clone()).is_err());
        assert!(FbLayerParams::new(ok.bias, ok.weight, ok.factors).is_ok());
    }
}
