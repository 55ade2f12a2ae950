//! Layers with hand-written backward passes.
//!
//! Activations carry a leading batch axis. Each layer caches what its
//! backward pass needs during `forward` and accumulates parameter gradients
//! during `backward`; [`Layer::zero_grad`] clears them.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, FbError, Result};
use crate::fb::dense::{backward_rows, factor_terms_bounded, forward_rows};
use crate::fb::{
    fb_backward, fb_conv_backward, fb_conv_forward, fb_forward, sample_mask_with, DropFactorMask, FactorInit, FbCache,
    FbConvCache, FbConvLayer, FbLayerParams, MaskScheme,
};
use crate::rng::StreamRng;
use crate::tensor::{col2im_accumulate, gemm_nn, gemm_nt, gemm_tn, im2col_into, ConvGeometry, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call context threaded through the forward pass.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    /// Source of DropFactor and dropout masks.
    pub mask_rng: &'a mut StreamRng,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Weight,
    Bias,
    Factor,
    /// Batch-normalization scale and shift.
    Norm,
}

pub struct ParamSlot<'a, T> {
    pub role: ParamRole,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a mut Tensor<T>,
}

pub trait Layer<T: Element>: Send {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>>;

    /// Gradient w.r.t. the input of the last `forward`; parameter gradients
    /// are added to the layer's accumulators.
    fn backward(&mut self, d_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn params(&mut self) -> Vec<ParamSlot<'_, T>> {
        Vec::new()
    }

    /// Parameters plus non-trainable state that must survive a checkpoint.
    fn state(&mut self) -> (Vec<ParamSlot<'_, T>>, Vec<&mut Tensor<T>>) {
        (self.params(), Vec::new())
    }

    fn zero_grad(&mut self) {
        for slot in self.params() {
            slot.grad.fill_zero_inplace();
        }
    }

    /// Whether this layer has an active factor term (gets FB warmup).
    fn is_factorized(&self) -> bool {
        false
    }

    /// For factorized layers: do the last forward's factor terms respect the
    /// bound implied by inputs in `[-1, 1]`?
    fn factor_bound_holds(&self) -> bool {
        true
    }
}

fn missing_cache() -> FbError {
    FbError::Contract("backward called before forward".into())
}

fn batch_of<T: Element>(x: &Tensor<T>) -> usize {
    x.shape().first().copied().unwrap_or(0)
}

fn check_sample_shape<T: Element>(x: &Tensor<T>, expect: &[usize], layer: &str) -> Result<usize> {
    if x.rank() != expect.len() + 1 || &x.shape()[1..] != expect {
        return Err(dim_err(format!(
            "{layer}: input {:?}, expected [batch, {expect:?}]",
            x.shape()
        )));
    }
    Ok(x.shape()[0])
}

/// Fully connected layer. Runs the factorized kernel with zero factors, so
/// it is numerically identical to a `k = 0` factorized layer.
pub struct Linear<T> {
    params: FbLayerParams<T>,
    d_weight: Tensor<T>,
    d_bias: Tensor<T>,
    input: Option<Tensor<T>>,
}

impl<T: Element> Linear<T> {
    pub fn new<R: Rng + ?Sized>(n: usize, c: usize, rng: &mut R) -> Self {
        Self::from_params(FbLayerParams::init(c, n, 0, &FactorInit::default(), rng))
    }

    fn from_params(params: FbLayerParams<T>) -> Self {
        Linear {
            d_weight: Tensor::zeros(params.weight.shape()),
            d_bias: Tensor::zeros(params.bias.shape()),
            params,
            input: None,
        }
    }
}

impl<T: Element> Layer<T> for Linear<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        let batch = check_sample_shape(x, &[self.params.inputs()], "linear")?;
        let out = forward_rows(x.data(), batch, &self.params, &[]);
        self.input = Some(x.clone());
        Tensor::new(vec![batch, self.params.outputs()], out.y)
    }

    fn backward(&mut self, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(missing_cache)?;
        let batch = batch_of(x);
        let mut d_x = Tensor::zeros(x.shape());
        let mut no_factors = [];
        backward_rows(
            d_out.data(),
            x.data(),
            batch,
            &[],
            &[],
            &[],
            &self.params,
            self.d_bias.data_mut(),
            self.d_weight.data_mut(),
            &mut no_factors,
            d_x.data_mut(),
        );
        Ok(d_x)
    }

    fn params(&mut self) -> Vec<ParamSlot<'_, T>> {
        vec![
            ParamSlot {
                role: ParamRole::Weight,
                value: &mut self.params.weight,
                grad: &mut self.d_weight,
            },
            ParamSlot {
                role: ParamRole::Bias,
                value: &mut self.params.bias,
                grad: &mut self.d_bias,
            },
        ]
    }
}

/// Fully connected factorized bilinear layer with DropFactor.
pub struct FbDense<T> {
    params: FbLayerParams<T>,
    p: f64,
    scheme: MaskScheme,
    d_weight: Tensor<T>,
    d_bias: Tensor<T>,
    d_factors: Tensor<T>,
    state: Option<(FbCache<T>, DropFactorMask)>,
}

impl<T: Element> FbDense<T> {
    pub fn new(params: FbLayerParams<T>, p: f64, scheme: MaskScheme) -> Self {
        FbDense {
            d_weight: Tensor::zeros(params.weight.shape()),
            d_bias: Tensor::zeros(params.bias.shape()),
            d_factors: Tensor::zeros(params.factors.shape()),
            params,
            p,
            scheme,
            state: None,
        }
    }

    pub fn layer_params(&self) -> &FbLayerParams<T> {
        &self.params
    }
}

fn layer_mask(k: usize, p: f64, scheme: MaskScheme, ctx: &mut ForwardCtx<'_>) -> Result<DropFactorMask> {
    let mask = match ctx.mode {
        Mode::Train => sample_mask_with(k, p, ctx.mask_rng)?,
        Mode::Eval => DropFactorMask::inference(k, p)?,
    };
    Ok(mask.with_scheme(scheme))
}

impl<T: Element> Layer<T> for FbDense<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        let mask = layer_mask(self.params.factor_count(), self.p, self.scheme, ctx)?;
        let (y, cache) = fb_forward(x, &self.params, &mask)?;
        self.state = Some((cache, mask));
        Ok(y)
    }

    fn backward(&mut self, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (cache, mask) = self.state.as_ref().ok_or_else(missing_cache)?;
        let g = fb_backward(d_out, cache, &self.params, mask)?;
        self.d_weight.axpy_inplace(T::one(), &g.d_weight)?;
        self.d_bias.axpy_inplace(T::one(), &g.d_bias)?;
        self.d_factors.axpy_inplace(T::one(), &g.d_factors)?;
        Ok(g.d_input)
    }

    fn params(&mut self) -> Vec<ParamSlot<'_, T>> {
        vec![
            ParamSlot {
                role: ParamRole::Weight,
                value: &mut self.params.weight,
                grad: &mut self.d_weight,
            },
            ParamSlot {
                role: ParamRole::Bias,
                value: &mut self.params.bias,
                grad: &mut self.d_bias,
            },
            ParamSlot {
                role: ParamRole::Factor,
                value: &mut self.params.factors,
                grad: &mut self.d_factors,
            },
        ]
    }

    fn is_factorized(&self) -> bool {
        self.params.factor_count() > 0
    }

    fn factor_bound_holds(&self) -> bool {
        self.state
            .as_ref()
            .is_none_or(|(cache, _)| factor_terms_bounded(&self.params, cache.projections()))
    }
}

/// Convolution through im2col and a dense product.
pub struct Conv2d<T> {
    geometry: ConvGeometry,
    /// `[c_out, C·kh·kw]`
    weight: Tensor<T>,
    bias: Tensor<T>,
    d_weight: Tensor<T>,
    d_bias: Tensor<T>,
    /// Per-sample patch matrices and the input extent.
    cache: Option<(Vec<Vec<T>>, [usize; 4])>,
}

impl<T: Element> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(geometry: ConvGeometry, rng: &mut R) -> Self {
        let n = geometry.patch_len();
        let bound = 1.0 / (n as f64).sqrt();
        let weight = Tensor::from_fn(&[geometry.out_channels, n], |_| T::of(rng.random_range(-bound..=bound)));
        let bias = Tensor::from_fn(&[geometry.out_channels], |_| T::of(rng.random_range(-bound..=bound)));
        Conv2d {
            geometry,
            d_weight: Tensor::zeros(weight.shape()),
            d_bias: Tensor::zeros(bias.shape()),
            weight,
            bias,
            cache: None,
        }
    }
}

impl<T: Element> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        let g = self.geometry;
        let [batch, ch, h, w] = match x.shape()[..] {
            [b, c, h, w] if c == g.in_channels => [b, c, h, w],
            _ => return Err(dim_err(format!("conv: input {:?} vs geometry {g:?}", x.shape()))),
        };
        let (oh, ow) = g.output_hw(h, w)?;
        let (n, co, positions) = (g.patch_len(), g.out_channels, oh * ow);
        let weight = self.weight.data();
        let bias = self.bias.data();
        let results: Vec<(Vec<T>, Vec<T>)> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let mut cols = vec![T::zero(); n * positions];
                im2col_into(x.outer(b), ch, h, w, &g, oh, ow, &mut cols);
                let mut y = vec![T::zero(); co * positions];
                for (o, row) in y.chunks_mut(positions).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[o]);
                }
                gemm_nn(co, n, positions, weight, &cols, &mut y);
                (y, cols)
            })
            .collect();
        let mut out = Vec::with_capacity(batch * co * positions);
        let mut cols = Vec::with_capacity(batch);
        for (y, c) in results {
            out.extend_from_slice(&y);
            cols.push(c);
        }
        self.cache = Some((cols, [batch, ch, h, w]));
        Tensor::new(vec![batch, co, oh, ow], out)
    }

    fn backward(&mut self, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (cols, [batch, ch, h, w]) = self.cache.as_ref().ok_or_else(missing_cache)?;
        let g = self.geometry;
        let (oh, ow) = g.output_hw(*h, *w)?;
        let (n, co, positions) = (g.patch_len(), g.out_channels, oh * ow);
        if d_out.shape() != [*batch, co, oh, ow] {
            return Err(dim_err(format!("conv backward: gradient {:?}", d_out.shape())));
        }
        let weight = self.weight.data();
        let results: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..*batch)
            .into_par_iter()
            .map(|b| {
                let dy = d_out.outer(b);
                let mut dw = vec![T::zero(); co * n];
                gemm_nt(co, positions, n, dy, &cols[b], &mut dw);
                let db: Vec<T> = dy
                    .chunks(positions)
                    .map(|r| r.iter().fold(T::zero(), |a, &v| a + v))
                    .collect();
                let mut dcols = vec![T::zero(); n * positions];
                gemm_tn(n, co, positions, weight, dy, &mut dcols);
                let mut dx = vec![T::zero(); ch * h * w];
                col2im_accumulate(&dcols, *ch, *h, *w, &g, oh, ow, &mut dx);
                (dw, db, dx)
            })
            .collect();
        let mut d_x = Tensor::zeros(&[*batch, *ch, *h, *w]);
        for (b, (dw, db, dx)) in results.into_iter().enumerate() {
            crate::tensor::axpy(T::one(), &dw, self.d_weight.data_mut());
            crate::tensor::axpy(T::one(), &db, self.d_bias.data_mut());
            d_x.outer_mut(b).copy_from_slice(&dx);
        }
        Ok(d_x)
    }

    fn params(&mut self) -> Vec<ParamSlot<'_, T>> {
        vec![
            ParamSlot {
                role: ParamRole::Weight,
                value: &mut self.weight,
                grad: &mut self.d_weight,
            },
            ParamSlot {
                role: ParamRole::Bias,
                value: &mut self.bias,
                grad: &mut self.d_bias,
            },
        ]
    }
}

/// Factorized bilinear convolution with DropFactor.
pub struct FbConv<T> {
    layer: FbConvLayer<T>,
    scheme: MaskScheme,
    d_weight: Tensor<T>,
    d_bias: Tensor<T>,
    d_factors: Tensor<T>,
    state: Option<(FbConvCache<T>, DropFactorMask)>,
}

impl<T: Element> FbConv<T> {
    pub fn new(layer: FbConvLayer<T>, scheme: MaskScheme) -> Self {
        FbConv {
            d_weight: Tensor::zeros(layer.params.weight.shape()),
            d_bias: Tensor::zeros(layer.params.bias.shape()),
            d_factors: Tensor::zeros(layer.params.factors.shape()),
            layer,
            scheme,
            state: None,
        }
    }
}

impl<T: Element> Layer<T> for FbConv<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        let mask = layer_mask(self.layer.params.factor_count(), self.layer.p, self.scheme, ctx)?;
        let (y, cache) = fb_conv_forward(x, &self.layer, &mask)?;
        self.state = Some((cache, mask));
        Ok(y)
    }

    fn backward(&mut self, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (cache, mask) = self.state.as_ref().ok_or_else(missing_cache)?;
        let g = fb_conv_backward(d_out, cache, &self.layer, mask)?;
        self.d_weight.axpy_inplace(T::one(), &g.d_weight)?;
        self.d_bias.axpy_inplace(T::one(), &g.d_bias)?;
        self.d_factors.axpy_inplace(T::one(), &g.d_factors)?;
        Ok(g.d_input)
    }

    fn params(&mut self) -> Vec<ParamSlot<'_, T>> {
        let p = &mut self.layer.params;
        vec![
            ParamSlot {
                role: ParamRole::Weight,
                value: &mut p.weight,
                grad: &mut self.d_weight,
            },
            ParamSlot {
                role: ParamRole::Bias,
                value: &mut p.bias,
                grad: &mut self.d_bias,
            },
            ParamSlot {
                role: ParamRole::Factor,
                value: &mut p.factors,
                grad: &mut self.d_factors,
            },
        ]
    }

    fn is_factorized(&self) -> bool {
        self.layer.params.factor_count() > 0
    }

    fn factor_bound_holds(&self) -> bool {
        self.state.as_ref().is_none_or(|(cache, _)| {
            cache
                .projections()
                .all(|proj| factor_terms_bounded(&self.layer.params, proj))
        })
    }
}

#[derive(Default)]
pub struct Relu<T> {
    output: Option<Tensor<T>>,
}

impl<T: Element> Relu<T> {
    pub fn new() -> Self {
        Relu { output: None }
    }
}

impl<T: Element> Layer<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        let y = x.map(|v| v.max(T::zero()));
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.as_ref().ok_or_else(missing_cache)?;
        d_out.zip_map(y, |g, v| if v > T::zero() { g } else { T::zero() })
    }
}

#[derive(Default)]
pub struct Tanh<T> {
    output: Option<Tensor<T>>,
}

impl<T: Element> Tanh<T> {
    pub fn new() -> Self {
        Tanh { output: None }
    }
}

impl<T: Element> Layer<T> for Tanh<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        let y = x.map(|v| v.tanh());
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.as_ref().ok_or_else(missing_cache)?;
        d_out.zip_map(y, |g, v| g * (T::one() - v * v))
    }
}

/// Batch normalization over the batch (and spatial) axes, per channel or
/// per feature. Running statistics use `running ← m·running + (1−m)·batch`.
pub struct BatchNorm<T> {
    channels: usize,
    momentum: f64,
    eps: f64,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    d_gamma: Tensor<T>,
    d_beta: Tensor<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    /// Normalized activations and per-channel inverse std of the last
    /// training-mode forward.
    cache: Option<(Tensor<T>, Vec<f64>, Mode)>,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            momentum: 0.9,
            eps: 1e-5,
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            d_gamma: Tensor::zeros(&[channels]),
            d_beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            cache: None,
        }
    }

    // (batch, spatial) extents for a `[batch, C]` or `[batch, C, H, W]` input.
    fn layout(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        match x.shape()[..] {
            [b, c] if c == self.channels => Ok((b, 1)),
            [b, c, h, w] if c == self.channels => Ok((b, h * w)),
            _ => Err(dim_err(format!(
                "batch norm over {} channels got {:?}",
                self.channels,
                x.shape()
            ))),
        }
    }
}

impl<T: Element> Layer<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        let (batch, spatial) = self.layout(x)?;
        let c = self.channels;
        let count = (batch * spatial) as f64;
        let idx = |b: usize, ch: usize, s: usize| (b * c + ch) * spatial + s;
        let (mean, var): (Vec<f64>, Vec<f64>) = match ctx.mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s1 = 0.0;
                    for b in 0..batch {
                        for s in 0..spatial {
                            s1 += x.data()[idx(b, ch, s)].as_f64();
                        }
                    }
                    let m = s1 / count;
                    let mut s2 = 0.0;
                    for b in 0..batch {
                        for s in 0..spatial {
                            let d = x.data()[idx(b, ch, s)].as_f64() - m;
                            s2 += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = s2 / count;
                }
                let mom = self.momentum;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = T::of(mom * rm.as_f64() + (1.0 - mom) * mean[ch]);
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = T::of(mom * rv.as_f64() + (1.0 - mom) * var[ch] * unbias);
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.to_f64_vec(), self.running_var.to_f64_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for b in 0..batch {
            for ch in 0..c {
                let (g, bt) = (self.gamma.data()[ch], self.beta.data()[ch]);
                for s in 0..spatial {
                    let i = idx(b, ch, s);
                    let xh = T::of((x.data()[i].as_f64() - mean[ch]) * inv_std[ch]);
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = g * xh + bt;
                }
            }
        }
        self.cache = Some((xhat, inv_std, ctx.mode));
        Ok(y)
    }

    fn backward(&mut self, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (xhat, inv_std, mode) = self.cache.as_ref().ok_or_else(missing_cache)?;
        let (batch, spatial) = self.layout(xhat)?;
        let c = self.channels;
        let count = (batch * spatial) as f64;
        let idx = |b: usize, ch: usize, s: usize| (b * c + ch) * spatial + s;
        let mut d_x = Tensor::zeros(xhat.shape());
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for b in 0..batch {
                for s in 0..spatial {
                    let i = idx(b, ch, s);
                    let dy = d_out.data()[i].as_f64();
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat.data()[i].as_f64();
                }
            }
            let gd = &mut self.d_gamma.data_mut()[ch];
            *gd = *gd + T::of(sum_dy_xhat);
            let bd = &mut self.d_beta.data_mut()[ch];
            *bd = *bd + T::of(sum_dy);
            let g = self.gamma.data()[ch].as_f64();
            for b in 0..batch {
                for s in 0..spatial {
                    let i = idx(b, ch, s);
                    let dy = d_out.data()[i].as_f64();
                    let dx = match mode {
                        Mode::Train => {
                            g * inv_std[ch] / count * (count * dy - sum_dy - xhat.data()[i].as_f64() * sum_dy_xhat)
                        }
                        Mode::Eval => g * inv_std[ch] * dy,
                    };
                    d_x.data_mut()[i] = T::of(dx);
                }
            }
        }
        Ok(d_x)
    }

    fn params(&mut self) -> Vec<ParamSlot<'_, T>> {
        vec![
            ParamSlot {
                role: ParamRole::Norm,
                value: &mut self.gamma,
                grad: &mut self.d_gamma,
            },
            ParamSlot {
                role: ParamRole::Norm,
                value: &mut self.beta,
                grad: &mut self.d_beta,
            },
        ]
    }

    fn state(&mut self) -> (Vec<ParamSlot<'_, T>>, Vec<&mut Tensor<T>>) {
        (
            vec![
                ParamSlot {
                    role: ParamRole::Norm,
                    value: &mut self.gamma,
                    grad: &mut self.d_gamma,
                },
                ParamSlot {
                    role: ParamRole::Norm,
                    value: &mut self.beta,
                    grad: &mut self.d_beta,
                },
            ],
            vec![&mut self.running_mean, &mut self.running_var],
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Window pooling without padding.
pub struct Pool2d<T> {
    kind: PoolKind,
    size: usize,
    stride: usize,
    /// Input shape and, for max pooling, the source index of every output.
    cache: Option<(Vec<usize>, Vec<usize>)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Element> Pool2d<T> {
    pub fn new(kind: PoolKind, size: usize, stride: usize) -> Self {
        Pool2d {
            kind,
            size,
            stride,
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.size || w < self.size || self.stride == 0 {
            return Err(dim_err(format!("pool window {} exceeds {h}×{w}", self.size)));
        }
        Ok(((h - self.size) / self.stride + 1, (w - self.size) / self.stride + 1))
    }
}

impl<T: Element> Layer<T> for Pool2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        let [batch, ch, h, w] = match x.shape()[..] {
            [b, c, h, w] => [b, c, h, w],
            _ => return Err(dim_err(format!("pool expects [batch, C, H, W], got {:?}", x.shape()))),
        };
        let (oh, ow) = self.output_hw(h, w)?;
        let mut out = Vec::with_capacity(batch * ch * oh * ow);
        let mut argmax = Vec::new();
        let area = T::of((self.size * self.size) as f64);
        for plane in 0..batch * ch {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    let mut acc = T::zero();
                    for dy in 0..self.size {
                        for dx in 0..self.size {
                            let i = base + (oy * self.stride + dy) * w + ox * self.stride + dx;
                            let v = x.data()[i];
                            acc = acc + v;
                            if v > best {
                                best = v;
                                best_i = i;
                            }
                        }
                    }
                    match self.kind {
                        PoolKind::Max => {
                            out.push(best);
                            argmax.push(best_i);
                        }
                        PoolKind::Avg => out.push(acc / area),
                    }
                }
            }
        }
        self.cache = Some((x.shape().to_vec(), argmax));
        Tensor::new(vec![batch, ch, oh, ow], out)
    }

    fn backward(&mut self, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, argmax) = self.cache.as_ref().ok_or_else(missing_cache)?;
        let mut d_x = Tensor::zeros(shape);
        match self.kind {
            PoolKind::Max => {
                for (&src, &g) in argmax.iter().zip(d_out.data()) {
                    let v = &mut d_x.data_mut()[src];
                    *v = *v + g;
                }
            }
            PoolKind::Avg => {
                let (h, w) = (shape[2], shape[3]);
                let (oh, ow) = self.output_hw(h, w)?;
                let area = T::of((self.size * self.size) as f64);
                for plane in 0..shape[0] * shape[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = d_out.data()[(plane * oh + oy) * ow + ox] / area;
                            for dy in 0..self.size {
                                for dx in 0..self.size {
                                    let i = plane * h * w + (oy * self.stride + dy) * w + ox * self.stride + dx;
                                    d_x.data_mut()[i] = d_x.data_mut()[i] + g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(d_x)
    }
}

/// `[batch, C, H, W]` → `[batch, C]` by spatial mean.
#[derive(Default)]
pub struct GlobalAvgPool<T> {
    shape: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Element> GlobalAvgPool<T> {
    pub fn new() -> Self {
        GlobalAvgPool {
            shape: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Element> Layer<T> for GlobalAvgPool<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        let [batch, ch, h, w] = match x.shape()[..] {
            [b, c, h, w] => [b, c, h, w],
            _ => {
                return Err(dim_err(format!(
                    "global pool expects [batch, C, H, W], got {:?}",
                    x.shape()
                )))
            }
        };
        let area = T::of((h * w) as f64);
        let out = x
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / area)
            .collect();
        self.shape = Some(x.shape().to_vec());
        Tensor::new(vec![batch, ch], out)
    }

    fn backward(&mut self, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.shape.as_ref().ok_or_else(missing_cache)?;
        let spatial = shape[2] * shape[3];
        let area = T::of(spatial as f64);
        let mut d_x = Tensor::zeros(shape);
        for (plane, &g) in d_out.data().iter().enumerate() {
            d_x.data_mut()[plane * spatial..(plane + 1) * spatial]
                .iter_mut()
                .for_each(|v| *v = g / area);
        }
        Ok(d_x)
    }
}

#[derive(Default)]
pub struct Flatten<T> {
    shape: Option<Vec<usize>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Element> Flatten<T> {
    pub fn new() -> Self {
        Flatten {
            shape: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Element> Layer<T> for Flatten<T> {
    fn forward(&mut self, x: &Tensor<T>, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        let batch = batch_of(x);
        self.shape = Some(x.shape().to_vec());
        x.clone().reshape(&[batch, x.len() / batch.max(1)])
    }

    fn backward(&mut self, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.shape.as_ref().ok_or_else(missing_cache)?;
        d_out.clone().reshape(shape)
    }
}

/// Inverted dropout: zeroes units with probability `rate` during training
/// and rescales survivors by `1/(1−rate)`; identity at evaluation.
pub struct Dropout<T> {
    rate: f64,
    scale: Option<Vec<T>>,
}

impl<T: Element> Dropout<T> {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(FbError::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        Ok(Dropout { rate, scale: None })
    }
}

impl<T: Element> Layer<T> for Dropout<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        if ctx.mode == Mode::Eval {
            self.scale = None;
            return Ok(x.clone());
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        let scale: Vec<T> = (0..x.len())
            .map(|_| {
                if ctx.mask_rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let y = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect(),
        )?;
        self.scale = Some(scale);
        Ok(y)
    }

    fn backward(&mut self, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.scale {
            None => Ok(d_out.clone()),
            Some(scale) => Tensor::new(
                d_out.shape().to_vec(),
                d_out.data().iter().zip(scale).map(|(&g, &s)| g * s).collect(),
            ),
        }
    }
}
