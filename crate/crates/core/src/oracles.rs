//! Brute-force reference implementations.
//!
//! Nothing here calls the factorized kernels' inner loops: quadratic forms,
//! outer products and convolutions are written out directly so that the
//! fast paths can be checked against code that shares none of their logic.
//! Everything is `f64`.

use rand::Rng;
use serde::Serialize;

use crate::error::{dim_err, FbError, Result};
use crate::fb::{fb_conv_forward, DropFactorMask, FbConvLayer, FbLayerParams};
use crate::report::content_hash;
use crate::tensor::{ConvGeometry, Tensor};

/// Symmetric relative error `|a−b| / max(|a|+|b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Central-difference gradient of `f` at `point`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn check_params(x: &[f64], params: &FbLayerParams<f64>) -> Result<(usize, usize, usize)> {
    let (c, n, k) = (params.outputs(), params.inputs(), params.factor_count());
    if x.len() != n {
        return Err(dim_err(format!("input length {} vs layer width {n}", x.len())));
    }
    Ok((c, n, k))
}

/// Literal double sum `b + Σ_i w_i x_i + Σ_i Σ_j ⟨f_·i, f_·j⟩_g x_i x_j`
/// where the column inner product weighs factor `t` by `gates[t]`. `O(kn²)`
/// per output unit.
pub fn naive_fb_gated(x: &[f64], params: &FbLayerParams<f64>, gates: &[f64]) -> Result<Vec<f64>> {
    let (c, n, k) = check_params(x, params)?;
    if gates.len() != k {
        return Err(dim_err(format!("{} gates for {k} factors", gates.len())));
    }
    let f = params.factors.data();
    let w = params.weight.data();
    let b = params.bias.data();
    let mut out = Vec::with_capacity(c);
    for j in 0..c {
        let base = j * k * n;
        let mut y = b[j];
        for i in 0..n {
            y += w[j * n + i] * x[i];
        }
        for i in 0..n {
            for l in 0..n {
                let mut inner = 0.0;
                for t in 0..k {
                    inner += gates[t] * f[base + t * n + i] * f[base + t * n + l];
                }
                y += inner * x[i] * x[l];
            }
        }
        out.push(y);
    }
    Ok(out)
}

/// Double-sum evaluation with every factor scaled by `p` (the inference
/// form; `p = 1` is the undropped layer).
pub fn naive_fb(x: &[f64], params: &FbLayerParams<f64>, p: f64) -> Result<Vec<f64>> {
    naive_fb_gated(x, params, &vec![p; params.factor_count()])
}

/// Sum of outer products `z = Σ_i x_i x_iᵀ` over the rows of a `|S|×n`
/// feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor {
    pub z: Tensor<f64>,
}

pub fn bilinear_pool(features: &Tensor<f64>) -> Result<GlobalDescriptor> {
    let (s, n) = features.dims2()?;
    if s == 0 {
        return Err(FbError::Domain("bilinear pooling needs at least one location".into()));
    }
    let mut z = vec![0.0; n * n];
    for loc in 0..s {
        let x = features.outer(loc);
        for a in 0..n {
            for b in 0..n {
                z[a * n + b] += x[a] * x[b];
            }
        }
    }
    Ok(GlobalDescriptor {
        z: Tensor::new(vec![n, n], z)?,
    })
}

/// Fully connected layer over the vectorized descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearPoolingModel {
    /// `[c, n²]`
    pub weight: Tensor<f64>,
    /// `[c]`
    pub bias: Tensor<f64>,
}

impl BilinearPoolingModel {
    pub fn new(weight: Tensor<f64>, bias: Tensor<f64>) -> Result<Self> {
        let (c, nn) = weight.dims2()?;
        let n = (nn as f64).sqrt().round() as usize;
        if n * n != nn || bias.shape() != [c] {
            return Err(dim_err(format!(
                "bilinear weight {:?} / bias {:?} are inconsistent",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(BilinearPoolingModel { weight, bias })
    }

    /// Builds row `j` of the weight from the `n×n` matrix `W_j^R`.
    pub fn from_matrices(matrices: &[Tensor<f64>], bias: Tensor<f64>) -> Result<Self> {
        let n = matrices.first().map_or(0, |m| m.shape()[0]);
        let mut w = Vec::with_capacity(matrices.len() * n * n);
        for m in matrices {
            if m.shape() != [n, n] {
                return Err(dim_err(format!("matrix {:?} is not {n}×{n}", m.shape())));
            }
            w.extend_from_slice(m.data());
        }
        Self::new(Tensor::new(vec![matrices.len(), n * n], w)?, bias)
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        (self.weight.shape()[1] as f64).sqrt().round() as usize
    }

    /// `W_j^R`, the `n×n` reshape of row `j`.
    pub fn reshaped(&self, j: usize) -> Tensor<f64> {
        let n = self.dim();
        Tensor::new(vec![n, n], self.weight.outer(j).to_vec()).expect("row has n² entries")
    }
}

/// Class scores computed both from `vec(z)` and from per-location quadratic
/// forms.
#[derive(Clone, Debug, Serialize)]
pub struct BilinearScores {
    pub via_descriptor: Vec<f64>,
    pub via_quadratic_forms: Vec<f64>,
    pub max_abs_diff: f64,
}

pub fn bilinear_classify(features: &Tensor<f64>, model: &BilinearPoolingModel) -> Result<BilinearScores> {
    let (s, n) = features.dims2()?;
    if n != model.dim() {
        return Err(dim_err(format!(
            "features have width {n}, model expects {}",
            model.dim()
        )));
    }
    let z = bilinear_pool(features)?.z;
    let c = model.classes();
    let mut via_descriptor = Vec::with_capacity(c);
    let mut via_forms = Vec::with_capacity(c);
    for j in 0..c {
        let row = model.weight.outer(j);
        let mut y = model.bias.data()[j];
        for (wv, zv) in row.iter().zip(z.data()) {
            y += wv * zv;
        }
        via_descriptor.push(y);

        let mut y = model.bias.data()[j];
        for loc in 0..s {
            let x = features.outer(loc);
            for a in 0..n {
                let mut wx = 0.0;
                for b in 0..n {
                    wx += row[a * n + b] * x[b];
                }
                y += x[a] * wx;
            }
        }
        via_forms.push(y);
    }
    let max_abs_diff = max_diff(&via_descriptor, &via_forms);
    Ok(BilinearScores {
        via_descriptor,
        via_quadratic_forms: via_forms,
        max_abs_diff,
    })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `F_jᵀ F_j` for unit `j`, built entry by entry.
pub fn interaction_matrix(params: &FbLayerParams<f64>, j: usize) -> Tensor<f64> {
    let (n, k) = (params.inputs(), params.factor_count());
    let f = &params.factors.data()[j * k * n..(j + 1) * k * n];
    Tensor::from_fn(&[n, n], |idx| {
        let (a, b) = (idx / n, idx % n);
        (0..k).map(|t| f[t * n + a] * f[t * n + b]).sum()
    })
}

/// Leading `m` eigenvalue magnitudes of a symmetric matrix by subspace
/// iteration with modified Gram-Schmidt, largest first.
pub fn leading_spectrum<R: Rng + ?Sized>(a: &Tensor<f64>, m: usize, iters: usize, rng: &mut R) -> Result<Vec<f64>> {
    let (n, n2) = a.dims2()?;
    if n != n2 {
        return Err(dim_err(format!("spectrum of non-square {:?}", a.shape())));
    }
    let m = m.min(n);
    let mut q: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut diag = vec![0.0; m];
    orthonormalize(&mut q, &mut diag, rng);
    for _ in 0..iters.max(1) {
        let mut v: Vec<Vec<f64>> = q
            .iter()
            .map(|col| {
                (0..n)
                    .map(|r| (0..n).map(|c| a.data()[r * n + c] * col[c]).sum())
                    .collect()
            })
            .collect();
        orthonormalize(&mut v, &mut diag, rng);
        q = v;
    }
    Ok(diag)
}

// Modified Gram-Schmidt. Writes column norms after projection to `norms`;
// columns that vanish are replaced with a random direction orthogonal to the
// preceding ones.
fn orthonormalize<R: Rng + ?Sized>(cols: &mut [Vec<f64>], norms: &mut [f64], rng: &mut R) {
    for i in 0..cols.len() {
        let (done, rest) = cols.split_at_mut(i);
        let col = &mut rest[0];
        for prev in done.iter() {
            let proj: f64 = prev.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
            col.iter_mut().zip(prev).for_each(|(c, p)| *c -= proj * p);
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms[i] = norm;
        if norm > 1e-300 {
            col.iter_mut().for_each(|v| *v /= norm);
        } else {
            let mut fresh: Vec<f64> = (0..col.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            for prev in done.iter() {
                let proj: f64 = prev.iter().zip(&fresh).map(|(a, b)| a * b).sum();
                fresh.iter_mut().zip(prev).for_each(|(c, p)| *c -= proj * p);
            }
            let fnorm = fresh.iter().map(|v| v * v).sum::<f64>().sqrt();
            *col = fresh.into_iter().map(|v| v / fnorm).collect();
        }
    }
}

/// Smallest value of `vᵀ z v / vᵀv` over `probes` random directions.
pub fn min_rayleigh_quotient<R: Rng + ?Sized>(z: &Tensor<f64>, probes: usize, rng: &mut R) -> Result<f64> {
    let (n, n2) = z.dims2()?;
    if n != n2 {
        return Err(dim_err(format!("quadratic form of non-square {:?}", z.shape())));
    }
    let mut lowest = f64::INFINITY;
    for _ in 0..probes {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut q = 0.0;
        for a in 0..n {
            for b in 0..n {
                q += v[a] * z.data()[a * n + b] * v[b];
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum();
        lowest = lowest.min(q / norm);
    }
    Ok(lowest)
}

#[derive(Clone, Debug, Serialize)]
pub struct RankCheck {
    pub unit: usize,
    /// Leading `k+1` eigenvalue estimates of `F_jᵀF_j`.
    pub spectrum: Vec<f64>,
    /// Largest eigenvalue beyond index `k`, relative to the top one.
    pub tail_ratio: f64,
}

/// Compares the 1×1 factorized-bilinear convolution followed by global
/// average pooling against bilinear pooling with `W_j^R = F_jᵀF_j`.
#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub inputs_digest: String,
    pub locations: usize,
    /// Pooled output of the factorized pipeline.
    pub fb_pipeline: Vec<f64>,
    /// `b_j + (1/|S|)·(Σ_i w_j·x_i + bilinear_j)`.
    pub bilinear_side: Vec<f64>,
    /// Unnormalized bilinear-pooling scores `Σ_i x_iᵀ W_j^R x_i` (zero bias).
    pub bilinear_scores: Vec<f64>,
    /// Disagreement between the `vec(z)` and quadratic-form evaluations.
    pub descriptor_vs_forms_diff: f64,
    pub max_abs_diff: f64,
    pub rank_checks: Vec<RankCheck>,
}

pub fn fb_equals_bilinear_construction<R: Rng + ?Sized>(
    params: &FbLayerParams<f64>,
    features: &Tensor<f64>,
    rng: &mut R,
) -> Result<EquivalenceReport> {
    let (s, n) = features.dims2()?;
    if n != params.inputs() {
        return Err(dim_err(format!(
            "features have width {n}, layer expects {}",
            params.inputs()
        )));
    }
    if s == 0 {
        return Err(FbError::Domain("need at least one location".into()));
    }
    let (c, k) = (params.outputs(), params.factor_count());

    // Factorized side: features laid out as a 1×|S| map with n channels.
    let mut image = vec![0.0; n * s];
    for loc in 0..s {
        for ch in 0..n {
            image[ch * s + loc] = features.data()[loc * n + ch];
        }
    }
    let x = Tensor::new(vec![1, n, 1, s], image)?;
    let layer = FbConvLayer::new(ConvGeometry::new(n, c, 1, 1, 0), params.clone(), 1.0)?;
    let (y, _) = fb_conv_forward(&x, &layer, &DropFactorMask::identity(k))?;
    let fb_pipeline: Vec<f64> = (0..c)
        .map(|j| y.data()[j * s..(j + 1) * s].iter().sum::<f64>() / s as f64)
        .collect();

    // Bilinear side.
    let matrices: Vec<Tensor<f64>> = (0..c).map(|j| interaction_matrix(params, j)).collect();
    let model = BilinearPoolingModel::from_matrices(&matrices, Tensor::zeros(&[c]))?;
    let scores = bilinear_classify(features, &model)?;
    let bilinear_side: Vec<f64> = (0..c)
        .map(|j| {
            let w = params.weight.outer(j);
            let mut linear = 0.0;
            for loc in 0..s {
                let xi = features.outer(loc);
                for i in 0..n {
                    linear += w[i] * xi[i];
                }
            }
            params.bias.data()[j] + (linear + scores.via_quadratic_forms[j]) / s as f64
        })
        .collect();

    let rank_checks = matrices
        .iter()
        .enumerate()
        .map(|(unit, m)| {
            let spectrum = leading_spectrum(m, k + 1, 60, rng)?;
            let top = spectrum.first().copied().unwrap_or(0.0);
            let tail = spectrum.get(k).copied().unwrap_or(0.0);
            Ok(RankCheck {
                unit,
                tail_ratio: if top > 0.0 { tail / top } else { 0.0 },
                spectrum,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut digest_input = features.to_bytes();
    digest_input.extend(params.bias.to_bytes());
    digest_input.extend(params.weight.to_bytes());
    digest_input.extend(params.factors.to_bytes());

    Ok(EquivalenceReport {
        inputs_digest: content_hash(&digest_input),
        locations: s,
        max_abs_diff: max_diff(&fb_pipeline, &bilinear_side),
        fb_pipeline,
        bilinear_side,
        bilinear_scores: scores.via_quadratic_forms,
        descriptor_vs_forms_diff: scores.max_abs_diff,
        rank_checks,
    })
}

/// Two-way factorization machine over sparse `(index, value)` input, using
/// the parameters of a single-unit factorized bilinear layer.
///
/// The interaction term sums over all ordered pairs including `i = j`,
/// matching the layer, so it carries a self-interaction `p Σ_t f_{t,i}² x_i²`
/// that a classic FM (pairs `i < j` only) omits. Classic FM equals
/// `(this − b − w·x − self) / 2 + b + w·x`.
pub fn fm_predict(x_sparse: &[(usize, f64)], params: &FbLayerParams<f64>, p: f64) -> Result<f64> {
    if params.outputs() != 1 {
        return Err(dim_err(format!(
            "factorization machine needs one output unit, got {}",
            params.outputs()
        )));
    }
    let (n, k) = (params.inputs(), params.factor_count());
    if let Some(&(i, _)) = x_sparse.iter().find(|(i, _)| *i >= n) {
        return Err(dim_err(format!("feature index {i} out of range for width {n}")));
    }
    let w = params.weight.data();
    let f = params.factors.data();
    let mut y = params.bias.data()[0];
    for &(i, v) in x_sparse {
        y += w[i] * v;
    }
    for t in 0..k {
        let mut proj = 0.0;
        for &(i, v) in x_sparse {
            proj += f[t * n + i] * v;
        }
        y += p * proj * proj;
    }
    Ok(y)
}

/// Sliding-window convolution of `[batch, C, H, W]` with weights
/// `[c_out, C·kh·kw]` (channel, kernel row, kernel column order).
pub fn direct_conv2d(
    x: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: &Tensor<f64>,
    g: &ConvGeometry,
) -> Result<Tensor<f64>> {
    let [batch, ch, h, w] = match x.shape()[..] {
        [b, c, h, w] => [b, c, h, w],
        _ => return Err(dim_err(format!("expected [batch, C, H, W], got {:?}", x.shape()))),
    };
    let (oh, ow) = g.output_hw(h, w)?;
    let co = g.out_channels;
    if weight.shape() != [co, g.patch_len()] || ch != g.in_channels {
        return Err(dim_err("weight or input does not match geometry"));
    }
    let mut out = vec![0.0; batch * co * oh * ow];
    for b in 0..batch {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[o];
                    for c in 0..ch {
                        for ki in 0..g.kernel_h {
                            for kj in 0..g.kernel_w {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * ch + c) * h + iy as usize) * w + ix as usize];
                                let wv = weight.data()[o * g.patch_len() + (c * g.kernel_h + ki) * g.kernel_w + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![batch, co, oh, ow], out)
}
