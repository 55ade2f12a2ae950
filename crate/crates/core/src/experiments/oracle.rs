//! Factorized kernels against their brute-force references.

use rand::Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::fb::{fb_forward, sample_mask_with, DropFactorMask, FactorInit, FbLayerParams};
use crate::oracles::{fb_equals_bilinear_construction, naive_fb_gated, EquivalenceReport};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub const EXACT_TOL: f64 = 1e-10;
/// Monte-Carlo means must land within this many standard errors.
pub const MC_SIGMAS: f64 = 4.0;

fn uniform<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[derive(Clone, Debug, Serialize)]
pub struct NaiveComparison {
    pub instances: usize,
    pub max_n: usize,
    pub max_k: usize,
    pub max_abs_diff: f64,
    pub passed: bool,
}

/// Random layers with `n ≤ 32`, `k ≤ 8`, random masks in either mode.
pub fn compare_naive(instances: usize, seed: u64) -> Result<NaiveComparison> {
    let mut rng = stream(seed, Stream::Probe);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..=32);
        let k = rng.random_range(0..=8);
        let c = rng.random_range(1..=4);
        let batch = rng.random_range(1..=3);
        let p = rng.random_range(0.05..=1.0);
        let params = FbLayerParams::init(c, n, k, &FactorInit { factor_std: Some(0.5) }, &mut rng);
        let mask = if rng.random::<bool>() {
            sample_mask_with(k, p, &mut rng)?
        } else {
            DropFactorMask::inference(k, p)?
        };
        let x = uniform(&[batch, n], &mut rng);
        let (y, _) = fb_forward(&x, &params, &mask)?;
        let gates = mask.gates::<f64>();
        for s in 0..batch {
            let naive = naive_fb_gated(x.outer(s), &params, &gates)?;
            for (a, b) in y.outer(s).iter().zip(&naive) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(NaiveComparison {
        instances,
        max_n: 32,
        max_k: 8,
        max_abs_diff: worst,
        passed: worst <= EXACT_TOL,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BilinearComparison {
    pub instances: Vec<EquivalenceReport>,
    pub max_pipeline_diff: f64,
    pub max_descriptor_diff: f64,
    pub passed: bool,
}

pub fn compare_bilinear(seed: u64) -> Result<BilinearComparison> {
    let mut rng = stream(seed, Stream::Probe);
    let mut instances = Vec::new();
    for (n, k, c, s) in [(4, 2, 2, 5), (6, 3, 3, 10), (8, 1, 4, 1), (5, 5, 2, 7)] {
        let params = FbLayerParams::init(c, n, k, &FactorInit { factor_std: Some(0.5) }, &mut rng);
        let features = uniform(&[s, n], &mut rng);
        instances.push(fb_equals_bilinear_construction(&params, &features, &mut rng)?);
    }
    let max_pipeline_diff = instances.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    let max_descriptor_diff = instances.iter().map(|r| r.descriptor_vs_forms_diff).fold(0.0, f64::max);
    Ok(BilinearComparison {
        instances,
        max_pipeline_diff,
        max_descriptor_diff,
        passed: max_pipeline_diff <= EXACT_TOL && max_descriptor_diff <= EXACT_TOL,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ExactExpectation {
    pub k: usize,
    pub p: f64,
    pub masks: usize,
    pub max_abs_diff: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MonteCarloOutput {
    pub inference: f64,
    pub mean: f64,
    pub std_err: f64,
    pub z: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpectationComparison {
    pub exact: Vec<ExactExpectation>,
    pub exact_passed: bool,
    pub mc_k: usize,
    pub mc_masks: usize,
    pub mc_outputs: Vec<MonteCarloOutput>,
    pub mc_passed: bool,
    pub passed: bool,
}

/// Inference output against the probability-weighted mean over every mask
/// for `k ≤ 10`, and against a Monte-Carlo mean at `k = 64`.
pub fn compare_expectation(mc_masks: usize, seed: u64) -> Result<ExpectationComparison> {
    let mut rng = stream(seed, Stream::Probe);
    let (n, c, batch) = (5, 2, 2);
    let mut exact = Vec::new();
    for k in 0..=10 {
        for p in [0.5, 0.3] {
            let params = FbLayerParams::init(c, n, k, &FactorInit { factor_std: Some(0.5) }, &mut rng);
            let x = uniform(&[batch, n], &mut rng);
            let (inference, _) = fb_forward(&x, &params, &DropFactorMask::inference(k, p)?)?;
            let mut mean = vec![0.0; batch * c];
            for bits in 0u32..(1 << k) {
                let keep: Vec<bool> = (0..k).map(|t| bits >> t & 1 == 1).collect();
                let kept = keep.iter().filter(|&&b| b).count() as i32;
                let weight = p.powi(kept) * (1.0 - p).powi(k as i32 - kept);
                let (y, _) = fb_forward(&x, &params, &DropFactorMask::training(p, keep)?)?;
                for (m, v) in mean.iter_mut().zip(y.data()) {
                    *m += weight * v;
                }
            }
            let diff = mean
                .iter()
                .zip(inference.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            exact.push(ExactExpectation {
                k,
                p,
                masks: 1 << k,
                max_abs_diff: diff,
            });
        }
    }

    let (k, p) = (64, 0.5);
    let params = FbLayerParams::init(c, n, k, &FactorInit::default(), &mut rng);
    let x = uniform(&[1, n], &mut rng);
    let (inference, _) = fb_forward(&x, &params, &DropFactorMask::inference(k, p)?)?;
    let mut sum = vec![0.0; c];
    let mut sum_sq = vec![0.0; c];
    let mut mask_rng = stream(seed, Stream::Mask);
    for _ in 0..mc_masks {
        let (y, _) = fb_forward(&x, &params, &sample_mask_with(k, p, &mut mask_rng)?)?;
        for j in 0..c {
            sum[j] += y.data()[j];
            sum_sq[j] += y.data()[j] * y.data()[j];
        }
    }
    let m = mc_masks as f64;
    let mc_outputs: Vec<MonteCarloOutput> = (0..c)
        .map(|j| {
            let mean = sum[j] / m;
            let var = (sum_sq[j] / m - mean * mean) * m / (m - 1.0);
            let std_err = (var.max(0.0) / m).sqrt();
            let z = (mean - inference.data()[j]) / std_err;
            MonteCarloOutput {
                inference: inference.data()[j],
                mean,
                std_err,
                z,
            }
        })
        .collect();
    let exact_passed = exact.iter().all(|e| e.max_abs_diff <= EXACT_TOL);
    let mc_passed = mc_masks > 1 && mc_outputs.iter().all(|o| o.z.abs() <= MC_SIGMAS);
    Ok(ExpectationComparison {
        exact,
        exact_passed,
        mc_k: k,
        mc_masks,
        mc_outputs,
        mc_passed,
        passed: exact_passed && mc_passed,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub naive: NaiveComparison,
    pub bilinear: BilinearComparison,
    pub expectation: ExpectationComparison,
    pub passed: bool,
}

pub fn oracle_compare(cfg: &RunConfig) -> Result<OracleReport> {
    let naive = compare_naive(cfg.oracle_instances, cfg.seed)?;
    let bilinear = compare_bilinear(cfg.seed)?;
    let expectation = compare_expectation(cfg.mc_masks, cfg.seed)?;
    Ok(OracleReport {
        passed: naive.passed && bilinear.passed && expectation.passed,
        naive,
        bilinear,
        expectation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_runs_pass() {
        assert!(compare_naive(20, 1).unwrap().passed);
        assert!(compare_bilinear(1).unwrap().passed);
        let e = compare_expectation(2000, 1).unwrap();
        assert!(e.exact_passed);
        assert_eq!(e.exact.len(), 22);
        assert!(e.mc_passed, "{:?}", e.mc_outputs);
    }
}
