//! Fully connected factorized bilinear forward and backward passes.
//!
//! Per sample `x` and unit `j` the forward pass does, in order:
//!
//! | step                                   | multiply-adds |
//! |----------------------------------------|---------------|
//! | linear term `b_j + w_j·x`              | `n`           |
//! | projections `s_t = f_{j,t}·x`          | `k·n`         |
//! | gated squared norm `Σ_t g_t s_t²`      | `k`           |
//! | back-projection `u_j = Σ_t g_t s_t f_{j,t}` | `k·n`    |
//!
//! so a batch costs exactly `batch·c·(n + 2kn + k)` multiply-adds. The
//! back-projection `u_j = F_jᵀ G F_j x` is the `xᵀFᵀ` half of the quadratic
//! form kept for the input gradient, which then needs only `O(c·n)` work.

use crate::error::{dim_err, Result};
use crate::tensor::{axpy, dot, Element, Tensor};

use super::{check_mask_len, contract, DropFactorMask, FbLayerParams, MaskMode};

/// Per-call state retained by [`fb_forward`] for [`fb_backward`].
#[derive(Clone, Debug)]
pub struct FbCache<T = f64> {
    input: Tensor<T>,
    /// `[batch, c, k]` projections `f_{j,t}·x_s`.
    proj: Vec<T>,
    /// `[batch, c, n]` back-projections.
    back: Vec<T>,
    gates: Vec<T>,
    mode: MaskMode,
    macs: u64,
}

impl<T: Element> FbCache<T> {
    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    /// Multiply-adds performed by the forward pass that produced this cache.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    pub fn projections(&self) -> &[T] {
        &self.proj
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FbGradients<T = f64> {
    pub d_bias: Tensor<T>,
    pub d_weight: Tensor<T>,
    pub d_factors: Tensor<T>,
    pub d_input: Tensor<T>,
}

impl<T: Element> FbGradients<T> {
    pub(crate) fn zeros_like(params: &FbLayerParams<T>, input_shape: &[usize]) -> Self {
        FbGradients {
            d_bias: Tensor::zeros(params.bias.shape()),
            d_weight: Tensor::zeros(params.weight.shape()),
            d_factors: Tensor::zeros(params.factors.shape()),
            d_input: Tensor::zeros(input_shape),
        }
    }
}

/// Linear part of one row: `b + w·x`. Shared with the plain linear layer so
/// that a `k = 0` layer is the same computation, bit for bit.
#[inline]
pub fn affine<T: Element>(bias: T, w: &[T], x: &[T]) -> T {
    bias + dot(w, x)
}

/// Raw output buffers of [`forward_rows`].
pub(crate) struct RowsOutput<T> {
    pub y: Vec<T>,
    pub proj: Vec<T>,
    pub back: Vec<T>,
    pub macs: u64,
}

/// Forward pass over `rows` input vectors stored back to back in `x`.
pub(crate) fn forward_rows<T: Element>(x: &[T], rows: usize, params: &FbLayerParams<T>, gates: &[T]) -> RowsOutput<T> {
    let (c, n, k) = (params.outputs(), params.inputs(), params.factor_count());
    let w = params.weight.data();
    let b = params.bias.data();
    let mut y = vec![T::zero(); rows * c];
    let mut proj = vec![T::zero(); rows * c * k];
    let mut back = vec![T::zero(); if k == 0 { 0 } else { rows * c * n }];
    let mut macs = 0u64;
    for s in 0..rows {
        let xs = &x[s * n..(s + 1) * n];
        for j in 0..c {
            let linear = affine(b[j], &w[j * n..(j + 1) * n], xs);
            macs += n as u64;
            if k == 0 {
                y[s * c + j] = linear;
                continue;
            }
            let pj = &mut proj[(s * c + j) * k..(s * c + j + 1) * k];
            for (t, pt) in pj.iter_mut().enumerate() {
                *pt = dot(params.factor(j, t), xs);
            }
            macs += (k * n) as u64;
            let mut quad = T::zero();
            for t in 0..k {
                quad = quad + gates[t] * pj[t] * pj[t];
            }
            macs += k as u64;
            let uj = &mut back[(s * c + j) * n..(s * c + j + 1) * n];
            for t in 0..k {
                axpy(gates[t] * pj[t], params.factor(j, t), uj);
            }
            macs += (k * n) as u64;
            y[s * c + j] = linear + quad;
        }
    }
    RowsOutput { y, proj, back, macs }
}

/// Accumulates parameter gradients into `grads` and writes input gradients
/// for `rows` samples into `d_x` (overwritten).
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_rows<T: Element>(
    d_y: &[T],
    x: &[T],
    rows: usize,
    proj: &[T],
    back: &[T],
    gates: &[T],
    params: &FbLayerParams<T>,
    d_bias: &mut [T],
    d_weight: &mut [T],
    d_factors: &mut [T],
    d_x: &mut [T],
) {
    let (c, n, k) = (params.outputs(), params.inputs(), params.factor_count());
    let w = params.weight.data();
    let two = T::of(2.0);
    for s in 0..rows {
        let xs = &x[s * n..(s + 1) * n];
        let dxs = &mut d_x[s * n..(s + 1) * n];
        dxs.iter_mut().for_each(|v| *v = T::zero());
        for j in 0..c {
            let g = d_y[s * c + j];
            if g == T::zero() {
                continue;
            }
            d_bias[j] = d_bias[j] + g;
            axpy(g, xs, &mut d_weight[j * n..(j + 1) * n]);
            axpy(g, &w[j * n..(j + 1) * n], dxs);
            if k == 0 {
                continue;
            }
            let pj = &proj[(s * c + j) * k..(s * c + j + 1) * k];
            for t in 0..k {
                let coef = two * gates[t] * g * pj[t];
                if coef != T::zero() {
                    let row = (j * k + t) * n;
                    axpy(coef, xs, &mut d_factors[row..row + n]);
                }
            }
            axpy(two * g, &back[(s * c + j) * n..(s * c + j + 1) * n], dxs);
        }
    }
}

/// Evaluates the layer on a `[batch, n]` input.
///
/// Returns `[batch, c]` outputs and the cache needed by [`fb_backward`].
pub fn fb_forward<T: Element>(
    x: &Tensor<T>,
    params: &FbLayerParams<T>,
    mask: &DropFactorMask,
) -> Result<(Tensor<T>, FbCache<T>)> {
    let (batch, n) = x.dims2()?;
    if n != params.inputs() {
        return Err(dim_err(format!(
            "input width {n} does not match layer input dimension {}",
            params.inputs()
        )));
    }
    check_mask_len(mask, params.factor_count())?;
    let gates = mask.gates::<T>();
    let out = forward_rows(x.data(), batch, params, &gates);
    let y = Tensor::new(vec![batch, params.outputs()], out.y)?;
    Ok((
        y,
        FbCache {
            input: x.clone(),
            proj: out.proj,
            back: out.back,
            gates,
            mode: mask.mode(),
            macs: out.macs,
        },
    ))
}

pub(crate) fn check_cache_mask<T: Element>(gates: &[T], mode: MaskMode, mask: &DropFactorMask) -> Result<()> {
    if mode != mask.mode() {
        return Err(contract(format!(
            "cache built in {mode:?} mode, backward called with {:?} mask",
            mask.mode()
        )));
    }
    if gates != mask.gates::<T>().as_slice() {
        return Err(contract("mask differs from the one used in the forward pass"));
    }
    Ok(())
}

/// Gradients of a loss with upstream gradient `d_y` (`[batch, c]`).
/// Parameter gradients are summed over the batch.
pub fn fb_backward<T: Element>(
    d_y: &Tensor<T>,
    cache: &FbCache<T>,
    params: &FbLayerParams<T>,
    mask: &DropFactorMask,
) -> Result<FbGradients<T>> {
    let (batch, n) = cache.input.dims2()?;
    if d_y.shape() != [batch, params.outputs()] {
        return Err(dim_err(format!(
            "upstream gradient shape {:?}, expected {:?}",
            d_y.shape(),
            [batch, params.outputs()]
        )));
    }
    if n != params.inputs() || cache.proj.len() != batch * params.outputs() * params.factor_count() {
        return Err(contract("cache does not belong to these parameters"));
    }
    check_cache_mask(&cache.gates, cache.mode, mask)?;
    let mut grads = FbGradients::zeros_like(params, cache.input.shape());
    backward_rows(
        d_y.data(),
        cache.input.data(),
        batch,
        &cache.proj,
        &cache.back,
        &cache.gates,
        params,
        grads.d_bias.data_mut(),
        grads.d_weight.data_mut(),
        grads.d_factors.data_mut(),
        grads.d_input.data_mut(),
    );
    Ok(grads)
}

/// True when every factor term obeys `s_t² ≤ (Σ_i |f_{t,i}|)²`, which must
/// hold whenever all inputs lie in `[-1, 1]`.
pub fn factor_terms_bounded<T: Element>(params: &FbLayerParams<T>, proj: &[T]) -> bool {
    let (c, k) = (params.outputs(), params.factor_count());
    if k == 0 {
        return true;
    }
    let bounds: Vec<f64> = (0..c * k)
        .map(|i| {
            let l1: f64 = params.factor(i / k, i % k).iter().map(|v| v.as_f64().abs()).sum();
            l1 * l1 * (1.0 + 1e-6) + 1e-12
        })
        .collect();
    proj.chunks(c * k).all(|row| {
        row.iter()
            .zip(&bounds)
            .all(|(s, &bound)| s.as_f64() * s.as_f64() <= bound)
    })
}
