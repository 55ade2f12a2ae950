//! Finite-difference audit of the factorized layers' analytic gradients.
//!
//! The probe loss is `L = Σ r ⊙ y` for a fixed random `r`, so `∂L/∂y = r`.
//! In every single coordinate `L` is a polynomial of degree at most two,
//! which makes central differences exact up to rounding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::fb::{
    fb_backward, fb_conv_backward, fb_conv_forward, fb_forward, sample_mask_with, DropFactorMask, FactorInit,
    FbConvLayer, FbGradients, FbLayerParams, MaskMode,
};
use crate::oracles::{finite_diff_grad, rel_err};
use crate::rng::{stream, Stream};
use crate::tensor::{ConvGeometry, Tensor};

const STEP: f64 = 1e-4;
const RETAIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Dense,
    Conv1x1,
    Conv3x3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Offender {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub shape: Shape,
    pub k: usize,
    pub mode: MaskMode,
    pub checked: usize,
    pub worst: Offender,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub cases: Vec<GradcheckCase>,
    pub max_rel_err: f64,
    pub worst_case: Option<usize>,
    pub passed: bool,
}

type Eval<'a> = dyn FnMut(&Tensor<f64>, &FbLayerParams<f64>) -> Tensor<f64> + 'a;

fn check_case(
    x: &Tensor<f64>,
    params: &FbLayerParams<f64>,
    probe: &Tensor<f64>,
    analytic: &FbGradients<f64>,
    eval: &mut Eval<'_>,
) -> (usize, Offender) {
    let mut worst = Offender {
        tensor: String::new(),
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_err: -1.0,
    };
    let mut checked = 0;
    let mut consider = |name: &str, a: &[f64], num: &[f64]| {
        for (i, (&a, &b)) in a.iter().zip(num).enumerate() {
            let e = rel_err(a, b);
            checked += 1;
            if e > worst.rel_err {
                worst = Offender {
                    tensor: name.into(),
                    index: i,
                    analytic: a,
                    numeric: b,
                    rel_err: e,
                };
            }
        }
    };

    let fd = finite_diff_grad(
        |v| {
            let xi = Tensor::new(x.shape().to_vec(), v.to_vec()).expect("same shape");
            eval(&xi, params).dot(probe).expect("same shape")
        },
        x.data(),
        STEP,
    );
    consider("input", analytic.d_input.data(), &fd);

    let tensors: [(&str, &Tensor<f64>, &Tensor<f64>); 3] = [
        ("bias", &params.bias, &analytic.d_bias),
        ("weight", &params.weight, &analytic.d_weight),
        ("factors", &params.factors, &analytic.d_factors),
    ];
    for (ti, (name, value, grad)) in tensors.into_iter().enumerate() {
        let fd = finite_diff_grad(
            |v| {
                let mut p = params.clone();
                let slot = match ti {
                    0 => &mut p.bias,
                    1 => &mut p.weight,
                    _ => &mut p.factors,
                };
                slot.data_mut().copy_from_slice(v);
                eval(x, &p).dot(probe).expect("same shape")
            },
            value.data(),
            STEP,
        );
        consider(name, grad.data(), &fd);
    }
    (checked, worst)
}

fn run_case<R: Rng>(shape: Shape, k: usize, mode: MaskMode, corrupt: bool, rng: &mut R) -> Result<(usize, Offender)> {
    let uniform = |shape: &[usize], rng: &mut R| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let init = FactorInit { factor_std: Some(0.5) };
    let mask = match mode {
        MaskMode::Training => sample_mask_with(k, RETAIN, rng)?,
        MaskMode::Inference => DropFactorMask::inference(k, RETAIN)?,
    };
    let corrupted = |mut g: FbGradients<f64>| {
        if corrupt {
            g.d_weight.data_mut()[0] = -g.d_weight.data()[0];
        }
        g
    };
    match shape {
        Shape::Dense => {
            let (batch, n, c) = (3, 6, 3);
            let params = FbLayerParams::init(c, n, k, &init, rng);
            let x = uniform(&[batch, n], rng);
            let probe = uniform(&[batch, c], rng);
            let (_, cache) = fb_forward(&x, &params, &mask)?;
            let g = corrupted(fb_backward(&probe, &cache, &params, &mask)?);
            let mut eval = |x: &Tensor<f64>, p: &FbLayerParams<f64>| fb_forward(x, p, &mask).expect("valid").0;
            Ok(check_case(&x, &params, &probe, &g, &mut eval))
        }
        Shape::Conv1x1 | Shape::Conv3x3 => {
            let (kernel, pad, side) = if shape == Shape::Conv1x1 { (1, 0, 3) } else { (3, 1, 4) };
            let g = ConvGeometry::new(2, 2, kernel, 1, pad);
            let params = FbLayerParams::init(2, g.patch_len(), k, &init, rng);
            let layer = FbConvLayer::new(g, params.clone(), RETAIN)?;
            let x = uniform(&[2, 2, side, side], rng);
            let (y, cache) = fb_conv_forward(&x, &layer, &mask)?;
            let probe = uniform(y.shape(), rng);
            let grads = corrupted(fb_conv_backward(&probe, &cache, &layer, &mask)?);
            let mut eval = |x: &Tensor<f64>, p: &FbLayerParams<f64>| {
                let l = FbConvLayer {
                    geometry: g,
                    params: p.clone(),
                    p: RETAIN,
                };
                fb_conv_forward(x, &l, &mask).expect("valid").0
            };
            Ok(check_case(&x, &params, &probe, &grads, &mut eval))
        }
    }
}

/// Runs every (shape, k, mask mode) combination of the configured grid.
pub fn gradcheck_suite(cfg: &RunConfig) -> Result<GradcheckReport> {
    let mut rng = stream(cfg.seed, Stream::Probe);
    let mut cases = Vec::new();
    for shape in [Shape::Dense, Shape::Conv1x1, Shape::Conv3x3] {
        for &k in &cfg.gradcheck_ks {
            for mode in [MaskMode::Training, MaskMode::Inference] {
                let (checked, worst) = run_case(shape, k, mode, cfg.corrupt_gradient, &mut rng)?;
                cases.push(GradcheckCase {
                    shape,
                    k,
                    mode,
                    checked,
                    passed: worst.rel_err <= cfg.gradcheck_tol,
                    worst,
                });
            }
        }
    }
    let worst_case = (0..cases.len()).max_by(|&a, &b| cases[a].worst.rel_err.total_cmp(&cases[b].worst.rel_err));
    let max_rel_err = worst_case.map_or(0.0, |i| cases[i].worst.rel_err);
    Ok(GradcheckReport {
        threshold: cfg.gradcheck_tol,
        passed: cases.iter().all(|c| c.passed),
        cases,
        max_rel_err,
        worst_case,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_grid_passes_and_corruption_fails() {
        let cfg = RunConfig {
            gradcheck_ks: vec![0, 2],
            ..Default::default()
        };
        let report = gradcheck_suite(&cfg).unwrap();
        assert_eq!(report.cases.len(), 12);
        assert!(report.passed, "{}", report.max_rel_err);

        let bad = gradcheck_suite(&RunConfig {
            corrupt_gradient: true,
            ..cfg
        })
        .unwrap();
        assert!(!bad.passed);
        let worst = &bad.cases[bad.worst_case.unwrap()].worst;
        assert_eq!((worst.tensor.as_str(), worst.index), ("weight", 0));
    }
}
