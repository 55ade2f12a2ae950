//! Named architectures.
//!
//! The convolutional presets share one backbone (three conv/BN stages with
//! 2×2 max pooling between them) and differ only in the classifier head.

use serde::{Deserialize, Serialize};

use super::layers::PoolKind;
use super::network::LayerSpec;
use crate::error::{FbError, Result};

pub const PRESETS: &[&str] = &["linear", "fb", "baseline", "baseline-conv1x1", "fbn"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetOptions {
    pub classes: usize,
    pub k: usize,
    pub p: f64,
    /// Channels of the first backbone stage; doubled at each later stage.
    pub width: usize,
    /// Kernel size of the factorized head convolution.
    pub head_kernel: usize,
    /// Dropout rate inserted in front of the head layer.
    pub dropout: Option<f64>,
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            classes: 10,
            k: 20,
            p: 0.5,
            width: 16,
            head_kernel: 1,
            dropout: None,
        }
    }
}

fn backbone(width: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for (stage, mult) in [1, 2, 4].into_iter().enumerate() {
        if stage > 0 {
            specs.push(LayerSpec::Relu);
            specs.push(LayerSpec::Pool {
                kind: PoolKind::Max,
                size: 2,
                stride: 2,
            });
        }
        specs.push(LayerSpec::Conv {
            out: width * mult,
            kernel: 3,
            stride: 1,
            pad: 1,
        });
        specs.push(LayerSpec::BatchNorm);
    }
    specs
}

/// Layer list for preset `name` on inputs of per-sample shape `input`.
pub fn preset(name: &str, input: &[usize], opts: &PresetOptions) -> Result<Vec<LayerSpec>> {
    let c = opts.classes;
    let dropout = opts.dropout.map(|rate| LayerSpec::Dropout { rate });
    let flatten = (input.len() != 1).then_some(LayerSpec::Flatten);
    let image = || {
        if input.len() == 3 {
            Ok(backbone(opts.width))
        } else {
            Err(FbError::Config(format!(
                "preset {name} needs image inputs, got shape {input:?}"
            )))
        }
    };
    let specs: Vec<LayerSpec> = match name {
        "linear" => flatten
            .into_iter()
            .chain(dropout)
            .chain([LayerSpec::Linear { out: c }])
            .collect(),
        "fb" => flatten
            .into_iter()
            .chain(dropout)
            .chain([LayerSpec::FbDense {
                out: c,
                k: opts.k,
                p: opts.p,
            }])
            .collect(),
        "baseline" => image()?
            .into_iter()
            .chain([LayerSpec::Relu, LayerSpec::GlobalAvgPool])
            .chain(dropout)
            .chain([LayerSpec::Linear { out: c }])
            .collect(),
        "baseline-conv1x1" => image()?
            .into_iter()
            .chain([LayerSpec::Relu])
            .chain(dropout)
            .chain([
                LayerSpec::Conv {
                    out: c,
                    kernel: 1,
                    stride: 1,
                    pad: 0,
                },
                LayerSpec::GlobalAvgPool,
            ])
            .collect(),
        "fbn" => {
            let kernel = opts.head_kernel;
            if kernel.is_multiple_of(2) {
                return Err(FbError::Config(format!("head kernel must be odd, got {kernel}")));
            }
            image()?
                .into_iter()
                .chain([LayerSpec::Tanh])
                .chain(dropout)
                .chain([
                    LayerSpec::FbConv {
                        out: c,
                        kernel,
                        stride: 1,
                        pad: kernel / 2,
                        k: opts.k,
                        p: opts.p,
                    },
                    LayerSpec::GlobalAvgPool,
                ])
                .collect()
        }
        other => {
            return Err(FbError::Config(format!(
                "unknown preset {other:?}; known: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(specs)
}

/// Where two layer lists diverge: the length of their common prefix and
/// the differing remainders.
pub fn structural_diff<'a>(a: &'a [LayerSpec], b: &'a [LayerSpec]) -> (usize, &'a [LayerSpec], &'a [LayerSpec]) {
    let common = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    (common, &a[common..], &b[common..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::network::{BuildOptions, Network};
    use crate::rng::{stream, Stream};

    fn count(specs: Vec<LayerSpec>) -> (u64, u64) {
        let mut net = Network::<f64>::build(
            specs,
            &[3, 32, 32],
            &BuildOptions::default(),
            &mut stream(0, Stream::Init),
        )
        .unwrap();
        let t = net.param_count();
        (t.factor, t.other)
    }

    #[test]
    fn zero_factor_head_matches_conv1x1_baseline() {
        let opts = PresetOptions {
            k: 0,
            ..Default::default()
        };
        let fbn = count(preset("fbn", &[3, 32, 32], &opts).unwrap());
        let base = count(preset("baseline-conv1x1", &[3, 32, 32], &opts).unwrap());
        assert_eq!(fbn, base);
        assert_eq!(fbn.0, 0);
    }

    #[test]
    fn factor_budget_of_head() {
        let opts = PresetOptions {
            k: 20,
            classes: 10,
            ..Default::default()
        };
        let (factor, _) = count(preset("fbn", &[3, 32, 32], &opts).unwrap());
        assert_eq!(factor, 10 * 20 * 64);
    }

    #[test]
    fn presets_differ_only_in_head() {
        let opts = PresetOptions::default();
        let base = preset("baseline-conv1x1", &[3, 32, 32], &opts).unwrap();
        let fbn = preset("fbn", &[3, 32, 32], &opts).unwrap();
        let (common, a, b) = structural_diff(&base, &fbn);
        assert_eq!(common, backbone(16).len());
        assert_eq!(a[0], LayerSpec::Relu);
        assert_eq!(b[0], LayerSpec::Tanh);
        assert!(matches!(b[1], LayerSpec::FbConv { k: 20, .. }));
    }

    #[test]
    fn every_preset_builds_on_small_images() {
        for name in PRESETS {
            let specs = preset(
                name,
                &[1, 4, 4],
                &PresetOptions {
                    classes: 3,
                    k: 2,
                    ..Default::default()
                },
            )
            .unwrap();
            Network::<f64>::build(
                specs,
                &[1, 4, 4],
                &BuildOptions::default(),
                &mut stream(0, Stream::Init),
            )
            .unwrap();
        }
    }

    #[test]
    fn unknown_and_mismatched_presets() {
        assert!(matches!(
            preset("resnet", &[4], &PresetOptions::default()),
            Err(FbError::Config(_))
        ));
        assert!(preset("fbn", &[16], &PresetOptions::default()).is_err());
        let even = PresetOptions {
            head_kernel: 2,
            ..Default::default()
        };
        assert!(preset("fbn", &[3, 8, 8], &even).is_err());
    }
}
