//! Factorized bilinear convolution: the dense transform applied to every
//! im2col patch, with one DropFactor mask shared across all positions.
//!
//! Padded taps enter the patch vectors as zeros and therefore also take
//! part in the quadratic term as zeros.

use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::tensor::{col2im_accumulate, im2col_into, ConvGeometry, Element, Tensor};

use super::dense::{backward_rows, check_cache_mask, forward_rows, FbGradients};
use super::{check_mask_len, contract, DropFactorMask, FbLayerParams, MaskMode};

#[derive(Clone, Debug, PartialEq)]
pub struct FbConvLayer<T = f64> {
    pub geometry: ConvGeometry,
    pub params: FbLayerParams<T>,
    /// Retain probability used by this layer's DropFactor masks.
    pub p: f64,
}

impl<T: Element> FbConvLayer<T> {
    pub fn new(geometry: ConvGeometry, params: FbLayerParams<T>, p: f64) -> Result<Self> {
        geometry.validate()?;
        if params.inputs() != geometry.patch_len() || params.outputs() != geometry.out_channels {
            return Err(dim_err(format!(
                "parameters are {}→{}, geometry needs {}→{}",
                params.inputs(),
                params.outputs(),
                geometry.patch_len(),
                geometry.out_channels
            )));
        }
        super::mask::check_retain_probability(p)?;
        Ok(FbConvLayer { geometry, params, p })
    }
}

#[derive(Clone, Debug)]
struct SampleCache<T> {
    /// `[P, n]` patch rows.
    rows: Vec<T>,
    proj: Vec<T>,
    back: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct FbConvCache<T = f64> {
    input_shape: [usize; 4],
    out_hw: (usize, usize),
    samples: Vec<SampleCache<T>>,
    gates: Vec<T>,
    mode: MaskMode,
    macs: u64,
}

impl<T: Element> FbConvCache<T> {
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    /// Projections of every sample, concatenated in `[batch, P, c, k]` order.
    pub fn projections(&self) -> impl Iterator<Item = &[T]> {
        self.samples.iter().map(|s| s.proj.as_slice())
    }
}

fn transpose<T: Element>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn dims4<T: Element>(x: &Tensor<T>) -> Result<[usize; 4]> {
    match x.shape()[..] {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(dim_err(format!("expected [batch, C, H, W], got {:?}", x.shape()))),
    }
}

/// `[batch, C, H, W]` → `[batch, c, Ho, Wo]`.
pub fn fb_conv_forward<T: Element>(
    x: &Tensor<T>,
    layer: &FbConvLayer<T>,
    mask: &DropFactorMask,
) -> Result<(Tensor<T>, FbConvCache<T>)> {
    let [batch, ch, h, w] = dims4(x)?;
    let g = &layer.geometry;
    if ch != g.in_channels {
        return Err(dim_err(format!(
            "input has {ch} channels, layer expects {}",
            g.in_channels
        )));
    }
    let (oh, ow) = g.output_hw(h, w)?;
    check_mask_len(mask, layer.params.factor_count())?;
    let gates = mask.gates::<T>();
    let (n, c, positions) = (g.patch_len(), g.out_channels, oh * ow);

    let per_sample: Vec<(Vec<T>, SampleCache<T>, u64)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let mut cols = vec![T::zero(); n * positions];
            im2col_into(x.outer(b), ch, h, w, g, oh, ow, &mut cols);
            let rows = transpose(&cols, n, positions);
            let out = forward_rows(&rows, positions, &layer.params, &gates);
            let y = transpose(&out.y, positions, c);
            (
                y,
                SampleCache {
                    rows,
                    proj: out.proj,
                    back: out.back,
                },
                out.macs,
            )
        })
        .collect();

    let mut y = Vec::with_capacity(batch * c * positions);
    let mut samples = Vec::with_capacity(batch);
    let mut macs = 0;
    for (ys, cache, m) in per_sample {
        y.extend_from_slice(&ys);
        samples.push(cache);
        macs += m;
    }
    Ok((
        Tensor::new(vec![batch, c, oh, ow], y)?,
        FbConvCache {
            input_shape: [batch, ch, h, w],
            out_hw: (oh, ow),
            samples,
            gates,
            mode: mask.mode(),
            macs,
        },
    ))
}

/// Parameter gradients summed over batch and positions; `d_input` has the
/// input's `[batch, C, H, W]` shape.
pub fn fb_conv_backward<T: Element>(
    d_y: &Tensor<T>,
    cache: &FbConvCache<T>,
    layer: &FbConvLayer<T>,
    mask: &DropFactorMask,
) -> Result<FbGradients<T>> {
    let [batch, ch, h, w] = cache.input_shape;
    let (oh, ow) = cache.out_hw;
    let g = &layer.geometry;
    let (n, c, positions) = (g.patch_len(), g.out_channels, oh * ow);
    if d_y.shape() != [batch, c, oh, ow] {
        return Err(dim_err(format!(
            "upstream gradient shape {:?}, expected {:?}",
            d_y.shape(),
            [batch, c, oh, ow]
        )));
    }
    if ch != g.in_channels || layer.params.inputs() != n || cache.samples.len() != batch {
        return Err(contract("cache does not belong to this layer"));
    }
    check_cache_mask(&cache.gates, cache.mode, mask)?;

    let params = &layer.params;
    let per_sample: Vec<(FbGradients<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let sc = &cache.samples[b];
            let dy_rows = transpose(d_y.outer(b), c, positions);
            let mut grads = FbGradients::zeros_like(params, &[0]);
            let mut d_rows = vec![T::zero(); positions * n];
            backward_rows(
                &dy_rows,
                &sc.rows,
                positions,
                &sc.proj,
                &sc.back,
                &cache.gates,
                params,
                grads.d_bias.data_mut(),
                grads.d_weight.data_mut(),
                grads.d_factors.data_mut(),
                &mut d_rows,
            );
            let d_cols = transpose(&d_rows, positions, n);
            let mut dx = vec![T::zero(); ch * h * w];
            col2im_accumulate(&d_cols, ch, h, w, g, oh, ow, &mut dx);
            (grads, dx)
        })
        .collect();

    let mut total = FbGradients::zeros_like(params, &[batch, ch, h, w]);
    for (b, (grads, dx)) in per_sample.into_iter().enumerate() {
        total.d_bias.axpy_inplace(T::one(), &grads.d_bias)?;
        total.d_weight.axpy_inplace(T::one(), &grads.d_weight)?;
        total.d_factors.axpy_inplace(T::one(), &grads.d_factors)?;
        total.d_input.outer_mut(b).copy_from_slice(&dx);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fb::{fb_backward, fb_forward, FactorInit};
    use crate::oracles::{direct_conv2d, finite_diff_grad, rel_err};
    use crate::rng::{stream, Stream};
    use rand::Rng;

    fn layer(c_in: usize, c_out: usize, kernel: usize, pad: usize, k: usize, rng: &mut impl Rng) -> FbConvLayer<f64> {
        let g = ConvGeometry::new(c_in, c_out, kernel, 1, pad);
        let params = FbLayerParams::init(c_out, g.patch_len(), k, &FactorInit { factor_std: Some(0.5) }, rng);
        FbConvLayer::new(g, params, 0.5).unwrap()
    }

    fn input(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn unit_spatial_extent_matches_dense() {
        let mut rng = stream(20, Stream::Probe);
        let l = layer(5, 3, 1, 0, 2, &mut rng);
        let x = input(&[2, 5, 1, 1], &mut rng);
        let mask = DropFactorMask::training(0.5, vec![true, false]).unwrap();
        let (y, _) = fb_conv_forward(&x, &l, &mask).unwrap();
        let (yd, _) = fb_forward(&x.clone().reshape(&[2, 5]).unwrap(), &l.params, &mask).unwrap();
        assert_eq!(y.data(), yd.data());
    }

    #[test]
    fn zero_factors_match_direct_convolution() {
        let mut rng = stream(21, Stream::Probe);
        for (kernel, pad) in [(1, 0), (3, 1), (3, 0), (2, 1)] {
            let mut l = layer(2, 3, kernel, pad, 2, &mut rng);
            l.params.factors.fill_zero_inplace();
            let x = input(&[2, 2, 5, 6], &mut rng);
            let (y, _) = fb_conv_forward(&x, &l, &DropFactorMask::identity(2)).unwrap();
            let oracle = direct_conv2d(&x, &l.params.weight, &l.params.bias, &l.geometry).unwrap();
            assert!(y.max_abs_diff(&oracle).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let mut rng = stream(22, Stream::Probe);
        let l = layer(2, 2, 3, 1, 2, &mut rng);
        let x = input(&[1, 2, 4, 4], &mut rng);
        let mask = DropFactorMask::identity(2);
        let (y, cache) = fb_conv_forward(&x, &l, &mask).unwrap();
        let g = fb_conv_backward(&Tensor::zeros(y.shape()), &cache, &l, &mask).unwrap();
        for t in [&g.d_bias, &g.d_weight, &g.d_factors, &g.d_input] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn one_by_one_gradients_equal_dense_on_reshaped_input() {
        let mut rng = stream(23, Stream::Probe);
        let l = layer(4, 3, 1, 0, 3, &mut rng);
        let x = input(&[1, 4, 2, 3], &mut rng);
        let mask = DropFactorMask::inference(3, 0.5).unwrap();
        let (y, cache) = fb_conv_forward(&x, &l, &mask).unwrap();
        let dy = input(y.shape(), &mut rng);
        let g = fb_conv_backward(&dy, &cache, &l, &mask).unwrap();

        // Single sample: rows are positions, columns are channels.
        let rows = x.clone().reshape(&[4, 6]).unwrap().transpose2d().unwrap();
        let dy_rows = dy.clone().reshape(&[3, 6]).unwrap().transpose2d().unwrap();
        let (_, dcache) = fb_forward(&rows, &l.params, &mask).unwrap();
        let gd = fb_backward(&dy_rows, &dcache, &l.params, &mask).unwrap();
        assert!(g.d_weight.max_abs_diff(&gd.d_weight).unwrap() < 1e-13);
        assert!(g.d_factors.max_abs_diff(&gd.d_factors).unwrap() < 1e-13);
        assert!(g.d_bias.max_abs_diff(&gd.d_bias).unwrap() < 1e-13);
        let dx = gd.d_input.transpose2d().unwrap().reshape(&[1, 4, 2, 3]).unwrap();
        assert!(g.d_input.max_abs_diff(&dx).unwrap() < 1e-13);
    }

    #[test]
    fn three_by_three_gradients_match_finite_differences() {
        let mut rng = stream(24, Stream::Probe);
        let l = layer(2, 2, 3, 1, 2, &mut rng);
        let x = input(&[2, 2, 5, 5], &mut rng);
        let mask = DropFactorMask::training(0.5, vec![true, true]).unwrap();
        let (y, cache) = fb_conv_forward(&x, &l, &mask).unwrap();
        let r = input(y.shape(), &mut rng);
        let g = fb_conv_backward(&r, &cache, &l, &mask).unwrap();
        let loss = |l: &FbConvLayer<f64>, x: &Tensor<f64>| fb_conv_forward(x, l, &mask).unwrap().0.dot(&r).unwrap();

        let fd = finite_diff_grad(
            |v| {
                let mut q = l.clone();
                q.params.factors.data_mut().copy_from_slice(v);
                loss(&q, &x)
            },
            l.params.factors.data(),
            1e-5,
        );
        for (a, b) in g.d_factors.data().iter().zip(fd) {
            assert!(rel_err(*a, b) <= 1e-5);
        }
        let fd = finite_diff_grad(
            |v| {
                let xi = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
                loss(&l, &xi)
            },
            x.data(),
            1e-5,
        );
        for (a, b) in g.d_input.data().iter().zip(fd) {
            assert!(rel_err(*a, b) <= 1e-5);
        }
    }

    #[test]
    fn interior_translation_equivariance() {
        let mut rng = stream(25, Stream::Probe);
        let l = layer(2, 2, 3, 1, 3, &mut rng);
        let (h, w) = (7, 8);
        let x = input(&[1, 2, h, w], &mut rng);
        let mut shifted = Tensor::<f64>::zeros(x.shape());
        for ch in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    shifted.data_mut()[(ch * h + (i + 1) % h) * w + (j + 2) % w] = x.data()[(ch * h + i) * w + j];
                }
            }
        }
        let mask = DropFactorMask::identity(3);
        let (y, _) = fb_conv_forward(&x, &l, &mask).unwrap();
        let (ys, _) = fb_conv_forward(&shifted, &l, &mask).unwrap();
        // Output (i, j) sees inputs i-1..=i+1; away from borders and the
        // wrap seam the shifted map is the original moved by (1, 2).
        for ch in 0..2 {
            for i in 1..h - 2 {
                for j in 1..w - 3 {
                    let a = y.data()[(ch * h + i) * w + j];
                    let b = ys.data()[(ch * h + i + 1) * w + j + 2];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_consistency_checks() {
        let g = ConvGeometry::new(2, 3, 3, 1, 1);
        assert!(FbConvLayer::new(g, FbLayerParams::<f64>::zeros(3, 18, 1), 0.5).is_ok());
        assert!(FbConvLayer::new(g, FbLayerParams::<f64>::zeros(3, 9, 1), 0.5).is_err());
        assert!(FbConvLayer::new(g, FbLayerParams::<f64>::zeros(3, 18, 1), 0.0).is_err());
    }
}
