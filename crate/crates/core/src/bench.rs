//! Parameter and cost formulas for bilinear-style classifiers, instrumented
//! multiply-add counts, and wall-clock scaling of the factorized kernel
//! against the literal double-sum expansion.

use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;

use crate::error::{FbError, Result};
use crate::fb::{fb_forward, DropFactorMask, FactorInit, FbLayerParams};
use crate::oracles::naive_fb;
use crate::report::text_table;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodCost {
    pub method: &'static str,
    pub params_formula: &'static str,
    pub params: u64,
    pub computation_formula: &'static str,
    /// Evaluated cost expression; `c(n + d·log2 d)` is not an integer.
    pub computation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostTable {
    pub n: u64,
    pub c: u64,
    pub d: u64,
    pub k: u64,
    pub rows: Vec<MethodCost>,
}

impl CostTable {
    pub fn get(&self, method: &str) -> Option<&MethodCost> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Full bilinear pooling, Random Maclaurin and Tensor Sketch projections
/// to `d` dimensions, and the factorized layer with `k` factors, all with
/// an `n`-dimensional input and `c` outputs.
pub fn cost_table(n: u64, c: u64, d: u64, k: u64) -> Result<CostTable> {
    if n == 0 || c == 0 || d == 0 || k == 0 {
        return Err(FbError::Domain("table arguments must be positive".into()));
    }
    let rows = vec![
        MethodCost {
            method: "bilinear",
            params_formula: "c·n²",
            params: c * n * n,
            computation_formula: "c·n²",
            computation: (c * n * n) as f64,
        },
        MethodCost {
            method: "random-maclaurin",
            params_formula: "2nd + cd",
            params: 2 * n * d + c * d,
            computation_formula: "c·n·d",
            computation: (c * n * d) as f64,
        },
        MethodCost {
            method: "tensor-sketch",
            params_formula: "2n + cd",
            params: 2 * n + c * d,
            computation_formula: "c·(n + d·log2 d)",
            computation: c as f64 * (n as f64 + d as f64 * (d as f64).log2()),
        },
        MethodCost {
            method: "factorized",
            params_formula: "c·k·n",
            params: c * k * n,
            computation_formula: "c·k·n",
            computation: (c * k * n) as f64,
        },
    ];
    Ok(CostTable { n, c, d, k, rows })
}

/// Multiply-adds of one factorized forward pass, as documented in the
/// dense kernel: linear term, projections, gated squares, back-projection.
pub fn mac_closed_form(batch: u64, c: u64, n: u64, k: u64) -> u64 {
    batch * c * (n + 2 * k * n + k)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacPoint {
    pub n: usize,
    pub k: usize,
    pub c: usize,
    pub batch: usize,
    pub counted: u64,
    pub closed_form: u64,
    /// Counted multiply-adds beyond the linear term.
    pub factor_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacGrid {
    pub points: Vec<MacPoint>,
    /// Every counter equals the closed form.
    pub exact: bool,
    /// Doubling `k` at fixed `n` exactly doubles the factor multiply-adds.
    pub doubling_exact: bool,
}

pub fn mac_grid(ns: &[usize], ks: &[usize], c: usize, batch: usize) -> Result<MacGrid> {
    let mut rng = stream(0, Stream::Probe);
    let mut points = Vec::new();
    for &n in ns {
        for &k in ks {
            let params = FbLayerParams::<f64>::init(c, n, k, &FactorInit::default(), &mut rng);
            let x = Tensor::from_fn(&[batch, n], |_| rng.random_range(-1.0..1.0));
            let (_, cache) = fb_forward(&x, &params, &DropFactorMask::identity(k))?;
            let counted = cache.mac_count();
            let linear = (batch * c * n) as u64;
            points.push(MacPoint {
                n,
                k,
                c,
                batch,
                counted,
                closed_form: mac_closed_form(batch as u64, c as u64, n as u64, k as u64),
                factor_macs: counted - linear,
            });
        }
    }
    let exact = points.iter().all(|p| p.counted == p.closed_form);
    let doubling_exact = points.iter().all(|a| {
        points
            .iter()
            .filter(|b| b.n == a.n && b.k == 2 * a.k)
            .all(|b| b.factor_macs == 2 * a.factor_macs)
    });
    Ok(MacGrid {
        points,
        exact,
        doubling_exact,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimedPoint {
    pub n: usize,
    pub k: usize,
    pub c: usize,
    pub batch: usize,
    pub reps: usize,
    /// Median seconds per call.
    pub median_secs: f64,
    pub per_sample_secs: f64,
    /// The timer's resolution exceeds 1% of a repetition.
    pub unreliable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sweep {
    pub label: String,
    /// Which argument varies: `n` or `k`.
    pub axis: &'static str,
    pub points: Vec<TimedPoint>,
    pub slope: f64,
    pub band: Option<(f64, f64)>,
    pub within_band: Option<bool>,
}

/// Smallest nonzero step the monotonic clock reports.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Median over `reps` repetitions of the time per call of `f`; each
/// repetition loops until at least `min_rep` has elapsed.
pub fn time_median(reps: usize, min_rep: Duration, resolution: Duration, mut f: impl FnMut()) -> (f64, bool) {
    let mut samples = Vec::with_capacity(reps);
    let mut unreliable = false;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let mut calls = 0u32;
        loop {
            f();
            calls += 1;
            if start.elapsed() >= min_rep {
                break;
            }
        }
        let total = start.elapsed();
        unreliable |= resolution.as_secs_f64() > 0.01 * total.as_secs_f64();
        samples.push(total.as_secs_f64() / calls as f64);
    }
    samples.sort_by(f64::total_cmp);
    (samples[samples.len() / 2], unreliable)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    Factorized,
    /// The literal double sum over input pairs, `O(k·n²)` per unit.
    Naive,
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub label: String,
    pub kernel: Kernel,
    /// `(n, k)` per point; exactly one of them varies.
    pub grid: Vec<(usize, usize)>,
    pub c: usize,
    pub batch: usize,
    pub reps: usize,
    pub min_rep: Duration,
    pub band: Option<(f64, f64)>,
}

pub fn runtime_sweep(spec: &SweepSpec) -> Result<Sweep> {
    let resolution = timer_resolution();
    let mut rng = stream(0, Stream::Probe);
    let mut points = Vec::new();
    for &(n, k) in &spec.grid {
        let params = FbLayerParams::<f64>::init(spec.c, n, k, &FactorInit::default(), &mut rng);
        let x = Tensor::from_fn(&[spec.batch, n], |_| rng.random_range(-1.0..1.0));
        let mask = DropFactorMask::identity(k);
        let (median_secs, unreliable) = match spec.kernel {
            Kernel::Factorized => time_median(spec.reps, spec.min_rep, resolution, || {
                black_box(fb_forward(black_box(&x), &params, &mask).expect("valid shapes"));
            }),
            Kernel::Naive => time_median(spec.reps, spec.min_rep, resolution, || {
                for s in 0..spec.batch {
                    black_box(naive_fb(black_box(x.outer(s)), &params, 1.0).expect("valid shapes"));
                }
            }),
        };
        points.push(TimedPoint {
            n,
            k,
            c: spec.c,
            batch: spec.batch,
            reps: spec.reps,
            median_secs,
            per_sample_secs: median_secs / spec.batch as f64,
            unreliable,
        });
    }
    let varies_n = spec.grid.first().map(|g| g.0) != spec.grid.last().map(|g| g.0);
    let xs: Vec<f64> = points.iter().map(|p| if varies_n { p.n } else { p.k } as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.median_secs).collect();
    let slope = loglog_slope(&xs, &ys);
    Ok(Sweep {
        label: spec.label.clone(),
        axis: if varies_n { "n" } else { "k" },
        points,
        slope,
        band: spec.band,
        within_band: spec.band.map(|(lo, hi)| (lo..=hi).contains(&slope)),
    })
}

pub const FACTORIZED_BAND: (f64, f64) = (0.8, 1.3);
pub const NAIVE_BAND: (f64, f64) = (1.7, 2.3);

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub costs: CostTable,
    pub mac_grid: MacGrid,
    pub sweeps: Vec<Sweep>,
    pub passed: bool,
}

/// Table, counters and the three standard sweeps (factorized and naive vs
/// `n`, factorized vs `k`), on a single-threaded pool.
pub fn run_bench(sizes: &[usize], reps: usize) -> Result<BenchReport> {
    if sizes.len() < 2 {
        return Err(FbError::Config("bench needs at least two sizes".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| FbError::Config(e.to_string()))?;
    pool.install(|| {
        let costs = cost_table(512, 1000, 10_000, 20)?;
        let mac_grid = mac_grid(&[16, 64, 256], &[0, 1, 2, 4, 8, 16], 3, 2)?;
        let min_rep = Duration::from_millis(20);
        let mid = sizes[sizes.len() / 2];
        let sweeps = vec![
            runtime_sweep(&SweepSpec {
                label: "factorized".into(),
                kernel: Kernel::Factorized,
                grid: sizes.iter().map(|&n| (n, 8)).collect(),
                c: 16,
                batch: 32,
                reps,
                min_rep,
                band: Some(FACTORIZED_BAND),
            })?,
            runtime_sweep(&SweepSpec {
                label: "naive".into(),
                kernel: Kernel::Naive,
                grid: sizes.iter().map(|&n| (n, 2)).collect(),
                c: 1,
                batch: 1,
                reps,
                min_rep,
                band: Some(NAIVE_BAND),
            })?,
            runtime_sweep(&SweepSpec {
                label: "factorized".into(),
                kernel: Kernel::Factorized,
                grid: [2, 4, 8, 16, 32].iter().map(|&k| (mid, k)).collect(),
                c: 16,
                batch: 8,
                reps,
                min_rep,
                band: None,
            })?,
        ];
        let passed = mac_grid.exact && mac_grid.doubling_exact && sweeps.iter().all(|s| s.within_band != Some(false));
        Ok(BenchReport {
            costs,
            mac_grid,
            sweeps,
            passed,
        })
    })
}

pub fn render_text(report: &BenchReport) -> String {
    let t = &report.costs;
    let mut out = format!("cost formulas at n={} c={} d={} k={}\n", t.n, t.c, t.d, t.k);
    let rows: Vec<Vec<String>> = t
        .rows
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                r.params_formula.to_string(),
                r.params.to_string(),
                r.computation_formula.to_string(),
                format!("{:.0}", r.computation),
            ]
        })
        .collect();
    out.push_str(&text_table(
        &["method", "params", "value", "computation", "value"],
        &rows,
    ));
    out.push_str(&format!(
        "\nmultiply-add counters: {} points, exact={} doubling_exact={}\n",
        report.mac_grid.points.len(),
        report.mac_grid.exact,
        report.mac_grid.doubling_exact
    ));
    for s in &report.sweeps {
        out.push_str(&format!("\n{} vs {}: slope {:.3}", s.label, s.axis, s.slope));
        if let (Some((lo, hi)), Some(ok)) = (s.band, s.within_band) {
            out.push_str(&format!(" (band [{lo}, {hi}], {})", if ok { "ok" } else { "OUT" }));
        }
        out.push('\n');
        let rows: Vec<Vec<String>> = s
            .points
            .iter()
            .map(|p| {
                vec![
                    p.n.to_string(),
                    p.k.to_string(),
                    format!("{:.3e}", p.median_secs),
                    format!("{:.3e}", p.per_sample_secs),
                    if p.unreliable { "yes".into() } else { "no".into() },
                ]
            })
            .collect();
        out.push_str(&text_table(
            &["n", "k", "median s", "per sample s", "unreliable"],
            &rows,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_values_at_reference_point() {
        let t = cost_table(512, 1000, 10_000, 20).unwrap();
        assert_eq!(t.get("bilinear").unwrap().params, 262_144_000);
        assert_eq!(t.get("random-maclaurin").unwrap().params, 20_240_000);
        assert_eq!(t.get("tensor-sketch").unwrap().params, 10_001_024);
        assert_eq!(t.get("factorized").unwrap().params, 10_240_000);
        assert_eq!(t.get("random-maclaurin").unwrap().computation, 5.12e9);
        let ts = t.get("tensor-sketch").unwrap().computation;
        assert!((ts / 1e6).round() == 133.0, "{ts}");
    }

    #[test]
    fn single_factor_params() {
        let t = cost_table(7, 3, 5, 1).unwrap();
        assert_eq!(t.get("factorized").unwrap().params, 21);
        assert!(cost_table(0, 1, 1, 1).is_err());
    }

    #[test]
    fn counters_match_closed_form() {
        let g = mac_grid(&[4, 9], &[0, 1, 2, 4], 2, 3).unwrap();
        assert!(g.exact && g.doubling_exact);
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn tiny_sweep_runs() {
        let s = runtime_sweep(&SweepSpec {
            label: "factorized".into(),
            kernel: Kernel::Factorized,
            grid: vec![(8, 2), (16, 2)],
            c: 2,
            batch: 2,
            reps: 3,
            min_rep: Duration::from_micros(200),
            band: None,
        })
        .unwrap();
        assert_eq!(s.points.len(), 2);
        assert!(s.slope.is_finite());
        assert_eq!(s.axis, "n");
    }
}
