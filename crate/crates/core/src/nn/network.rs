//! Sequential networks built from serializable layer specs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    BatchNorm, Conv2d, Dropout, FbConv, FbDense, Flatten, ForwardCtx, GlobalAvgPool, Layer, Linear, Mode, ParamRole,
    ParamSlot, Pool2d, PoolKind, Relu, Tanh,
};
use crate::error::{dim_err, FbError, Result};
use crate::fb::{FactorInit, FbConvLayer, FbLayerParams, MaskScheme};
use crate::rng::StreamRng;
use crate::tensor::{ConvGeometry, Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        out: usize,
    },
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    FbDense {
        out: usize,
        k: usize,
        p: f64,
    },
    FbConv {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        k: usize,
        p: f64,
    },
    Relu,
    Tanh,
    BatchNorm,
    Pool {
        kind: PoolKind,
        size: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dropout {
        rate: f64,
    },
}

/// Settings that affect how factorized layers are initialized and masked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub factor_init: FactorInit,
    pub scheme: MaskScheme,
}

/// Per-sample output shape of `spec` applied to per-sample shape `input`.
pub fn output_shape(spec: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    let image = |what: &str| -> Result<(usize, usize, usize)> {
        match input {
            [c, h, w] => Ok((*c, *h, *w)),
            _ => Err(dim_err(format!("{what} needs a [C, H, W] input, got {input:?}"))),
        }
    };
    let vector = |what: &str| -> Result<usize> {
        match input {
            [n] => Ok(*n),
            _ => Err(dim_err(format!("{what} needs a vector input, got {input:?}"))),
        }
    };
    Ok(match *spec {
        LayerSpec::Linear { out } | LayerSpec::FbDense { out, .. } => {
            vector("dense layer")?;
            vec![out]
        }
        LayerSpec::Conv {
            out,
            kernel,
            stride,
            pad,
        }
        | LayerSpec::FbConv {
            out,
            kernel,
            stride,
            pad,
            ..
        } => {
            let (c, h, w) = image("convolution")?;
            let (oh, ow) = ConvGeometry::new(c, out, kernel, stride, pad).output_hw(h, w)?;
            vec![out, oh, ow]
        }
        LayerSpec::Pool { kind, size, stride } => {
            let (c, h, w) = image("pooling")?;
            let (oh, ow) = Pool2d::<f64>::new(kind, size, stride).output_hw(h, w)?;
            vec![c, oh, ow]
        }
        LayerSpec::GlobalAvgPool => vec![image("global pooling")?.0],
        LayerSpec::Flatten => vec![input.iter().product()],
        LayerSpec::BatchNorm if input.len() != 1 && input.len() != 3 => {
            return Err(dim_err(format!("batch norm input {input:?}")))
        }
        LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::BatchNorm | LayerSpec::Dropout { .. } => input.to_vec(),
    })
}

fn build_layer<T: Element, R: Rng + ?Sized>(
    spec: &LayerSpec,
    input: &[usize],
    opts: &BuildOptions,
    rng: &mut R,
) -> Result<Box<dyn Layer<T>>> {
    Ok(match *spec {
        LayerSpec::Linear { out } => Box::new(Linear::new(input[0], out, rng)),
        LayerSpec::FbDense { out, k, p } => {
            crate::fb::mask::check_retain_probability(p)?;
            let params = FbLayerParams::init(out, input[0], k, &opts.factor_init, rng);
            Box::new(FbDense::new(params, p, opts.scheme))
        }
        LayerSpec::Conv {
            out,
            kernel,
            stride,
            pad,
        } => Box::new(Conv2d::new(ConvGeometry::new(input[0], out, kernel, stride, pad), rng)),
        LayerSpec::FbConv {
            out,
            kernel,
            stride,
            pad,
            k,
            p,
        } => {
            let g = ConvGeometry::new(input[0], out, kernel, stride, pad);
            let params = FbLayerParams::init(out, g.patch_len(), k, &opts.factor_init, rng);
            Box::new(FbConv::new(FbConvLayer::new(g, params, p)?, opts.scheme))
        }
        LayerSpec::Relu => Box::new(Relu::new()),
        LayerSpec::Tanh => Box::new(Tanh::new()),
        LayerSpec::BatchNorm => Box::new(BatchNorm::new(input[0])),
        LayerSpec::Pool { kind, size, stride } => Box::new(Pool2d::new(kind, size, stride)),
        LayerSpec::GlobalAvgPool => Box::new(GlobalAvgPool::new()),
        LayerSpec::Flatten => Box::new(Flatten::new()),
        LayerSpec::Dropout { rate } => Box::new(Dropout::new(rate)?),
    })
}

/// A sequential classifier: per-sample input shape in, class logits out.
pub struct Network<T: Element = f64> {
    specs: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<Box<dyn Layer<T>>>,
}

/// Outcome of one [`Network::forward_backward`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub correct: usize,
}

impl<T: Element> Network<T> {
    pub fn build<R: Rng + ?Sized>(
        specs: Vec<LayerSpec>,
        input_shape: &[usize],
        opts: &BuildOptions,
        rng: &mut R,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in &specs {
            let next = output_shape(spec, &shape)?;
            layers.push(build_layer(spec, &shape, opts, rng)?);
            shape = next;
        }
        let classes = match shape[..] {
            [c] if c > 0 => c,
            _ => {
                return Err(FbError::Config(format!(
                    "network must end in a class vector, ends in {shape:?}"
                )))
            }
        };
        Ok(Network {
            specs,
            input_shape: input_shape.to_vec(),
            classes,
            layers,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of trainable scalars, broken down by role.
    pub fn param_count(&mut self) -> ParamTally {
        let mut tally = ParamTally::default();
        for slot in self.layers.iter_mut().flat_map(|l| l.params()) {
            let n = slot.value.len() as u64;
            match slot.role {
                ParamRole::Factor => tally.factor += n,
                _ => tally.other += n,
            }
        }
        tally
    }

    pub fn forward(&mut self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_>) -> Result<Tensor<T>> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(dim_err(format!(
                "network input {:?}, expected [batch, {:?}]",
                x.shape(),
                self.input_shape
            )));
        }
        let mut h = x.clone();
        let mut after_tanh = false;
        for (layer, spec) in self.layers.iter_mut().zip(&self.specs) {
            h = layer.forward(&h, ctx)?;
            if after_tanh {
                debug_assert!(
                    layer.factor_bound_holds(),
                    "factor term exceeds the bound for tanh inputs"
                );
            }
            after_tanh = matches!(spec, LayerSpec::Tanh);
        }
        Ok(h)
    }

    pub fn backward(&mut self, d_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = d_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(|l| l.zero_grad());
    }

    /// Clears gradients, runs forward and backward on one batch under the
    /// softmax cross-entropy loss, and leaves the batch gradients in the
    /// layers. DropFactor masks are drawn once, here, from `mask_rng`.
    pub fn forward_backward(
        &mut self,
        x: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
        mask_rng: &mut StreamRng,
    ) -> Result<StepOutput> {
        self.zero_grad();
        let logits = self.forward(x, &mut ForwardCtx { mode, mask_rng })?;
        let (loss, correct, d_logits) = softmax_cross_entropy(&logits, labels)?;
        self.backward(&d_logits)?;
        Ok(StepOutput { loss, correct })
    }

    /// Trainable parameters in a fixed order, with their layer index and
    /// whether the owning layer has an active factor term.
    pub fn params(&mut self) -> Vec<(usize, bool, ParamSlot<'_, T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let fb = layer.is_factorized();
            out.extend(layer.params().into_iter().map(|s| (i, fb, s)));
        }
        out
    }

    /// Every tensor that defines the network state: parameters followed by
    /// buffers, layer by layer.
    pub fn state_tensors(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            let (params, buffers) = layer.state();
            out.extend(params.into_iter().map(|s| s.value));
            out.extend(buffers);
        }
        out
    }

    pub fn gradients(&mut self) -> Vec<Tensor<T>> {
        self.params().into_iter().map(|(_, _, s)| s.grad.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTally {
    pub factor: u64,
    pub other: u64,
}

impl ParamTally {
    pub fn total(&self) -> u64 {
        self.factor + self.other
    }
}

/// Mean softmax cross-entropy over a `[batch, c]` logit matrix.
///
/// Returns the loss, the number of top-1 hits and `∂loss/∂logits`
/// (`(softmax − onehot)/batch`).
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, usize, Tensor<T>)> {
    let (batch, c) = logits.dims2()?;
    if labels.len() != batch {
        return Err(dim_err(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(FbError::Data(format!("label {bad} out of range for {c} classes")));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grad = Tensor::zeros(&[batch, c]);
    for (s, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.outer(s).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[label];
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
        correct += usize::from(argmax == label);
        for (j, g) in grad.outer_mut(s).iter_mut().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            *g = T::of((exps[j] / z - onehot) / batch as f64);
        }
    }
    if !loss.is_finite() {
        return Err(FbError::Numeric(format!("non-finite loss {loss}")));
    }
    Ok((loss / batch as f64, correct, grad))
}
