//! One-factor-at-a-time ablations. Every row trains from the same seed and
//! data under the same epoch budget; only the swept setting changes.

use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{FbError, Result};
use crate::experiments::train::{load_data, train_run, EpochMetrics, LoadedData, Trainer};
use crate::report::text_table;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    KSweep,
    PSweep,
    KernelSize,
    DropoutVsDropfactor,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::KSweep,
        Ablation::PSweep,
        Ablation::KernelSize,
        Ablation::DropoutVsDropfactor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::KSweep => "k-sweep",
            Ablation::PSweep => "p-sweep",
            Ablation::KernelSize => "kernel-size",
            Ablation::DropoutVsDropfactor => "dropout-vs-dropfactor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Header of the swept column.
    pub fn axis(self) -> &'static str {
        match self {
            Ablation::KSweep => "k",
            Ablation::PSweep => "p",
            Ablation::KernelSize => "kernel",
            Ablation::DropoutVsDropfactor => "regularizer",
        }
    }

    /// Row labels with the configuration each row trains.
    pub fn grid(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Ablation::KSweep => base
                .ablate_ks
                .iter()
                .map(|&k| (k.to_string(), with(&|c| c.k = k)))
                .collect(),
            Ablation::PSweep => {
                let mut ps = base.ablate_ps.clone();
                if !ps.contains(&1.0) {
                    ps.push(1.0);
                }
                ps.iter().map(|&p| (p.to_string(), with(&|c| c.p = p))).collect()
            }
            Ablation::KernelSize => [1, 3]
                .iter()
                .map(|&kern| {
                    (
                        format!("{kern}x{kern}"),
                        with(&|c| {
                            c.preset = "fbn".into();
                            c.head_kernel = kern;
                        }),
                    )
                })
                .collect(),
            Ablation::DropoutVsDropfactor => {
                let drop = if base.dropout > 0.0 { base.dropout } else { 0.5 };
                let keep = if base.p < 1.0 { base.p } else { 0.5 };
                vec![
                    ("none".into(), with(&|c| (c.dropout, c.p) = (0.0, 1.0))),
                    ("dropout".into(), with(&|c| (c.dropout, c.p) = (drop, 1.0))),
                    ("dropfactor".into(), with(&|c| (c.dropout, c.p) = (0.0, keep))),
                    ("both".into(), with(&|c| (c.dropout, c.p) = (drop, keep))),
                ]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Complete,
    /// Stopped by the wallclock cap partway through its epochs.
    Truncated,
    /// Never started because the cap was already spent.
    NotRun,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub status: RowStatus,
    pub epochs_completed: usize,
    pub train_err: Option<f64>,
    pub test_err: Option<f64>,
    pub factor_params: u64,
    pub total_params: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub axis: &'static str,
    pub preset: String,
    pub epochs: usize,
    pub data_hash: String,
    pub rows: Vec<AblationRow>,
    pub truncated: bool,
}

impl AblationReport {
    pub const COLUMNS: [&'static str; 6] = [
        "epochs",
        "train err %",
        "test err %",
        "factor params",
        "params",
        "status",
    ];

    pub fn text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".into(), |e| format!("{:.2}", 100.0 * e));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.setting.clone(),
                    r.epochs_completed.to_string(),
                    pct(r.train_err),
                    pct(r.test_err),
                    r.factor_params.to_string(),
                    r.total_params.to_string(),
                    match r.status {
                        RowStatus::Complete => "ok",
                        RowStatus::Truncated => "TRUNCATED",
                        RowStatus::NotRun => "NOT RUN",
                    }
                    .into(),
                ]
            })
            .collect();
        let mut header = vec![self.axis];
        header.extend(Self::COLUMNS);
        let mut out = format!("{} ({}, {} epochs)\n", self.ablation.name(), self.preset, self.epochs);
        out.push_str(&text_table(&header, &rows));
        if self.truncated {
            out.push_str("TRUNCATED: wallclock cap reached before all rows finished\n");
        }
        out
    }
}

fn run_row<T: Element>(
    cfg: &RunConfig,
    data: &LoadedData,
    cap_left: f64,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<(AblationRow, bool)> {
    let row_cfg = RunConfig {
        wallclock_cap_secs: cap_left,
        ..cfg.clone()
    };
    let mut trainer = Trainer::<T>::new(&row_cfg, data.train.sample_shape(), data.train.classes())?;
    let s = train_run(&mut trainer, data, None, on_epoch)?;
    let complete = s.epochs_completed >= cfg.epochs;
    Ok((
        AblationRow {
            setting: String::new(),
            status: if complete {
                RowStatus::Complete
            } else {
                RowStatus::Truncated
            },
            epochs_completed: s.epochs_completed,
            train_err: trainer.history.last().map(|m| m.train_err),
            test_err: trainer.history.last().map(|m| m.test_err),
            factor_params: s.factor_params,
            total_params: s.total_params,
        },
        complete,
    ))
}

/// Trains every row of `ablation`. `on_epoch` receives the row label with
/// each epoch's metrics. The wallclock cap covers the whole table.
pub fn ablate(
    cfg: &RunConfig,
    ablation: Ablation,
    mut on_epoch: impl FnMut(&str, &EpochMetrics) -> Result<()>,
) -> Result<AblationReport> {
    cfg.validate()?;
    let grid = ablation.grid(cfg);
    if grid.is_empty() {
        return Err(FbError::Config(format!("{} has an empty grid", ablation.name())));
    }
    let started = Instant::now();
    let cap = cfg.wallclock_cap_secs;
    let mut rows = Vec::with_capacity(grid.len());
    let mut truncated = false;
    let mut data: Option<(String, LoadedData)> = None;
    for (label, row_cfg) in &grid {
        row_cfg.validate()?;
        let cap_left = if cap > 0.0 {
            cap - started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        if truncated || (cap > 0.0 && cap_left <= 0.0) {
            truncated = true;
            rows.push(AblationRow {
                setting: label.clone(),
                status: RowStatus::NotRun,
                epochs_completed: 0,
                train_err: None,
                test_err: None,
                factor_params: 0,
                total_params: 0,
            });
            continue;
        }
        // Rows of the kernel-size table switch to an image preset, which
        // may change how the data is viewed.
        if data.as_ref().is_none_or(|(preset, _)| *preset != row_cfg.preset) {
            data = Some((row_cfg.preset.clone(), load_data(row_cfg)?));
        }
        let loaded = &data.as_ref().expect("loaded above").1;
        let mut cb = |m: &EpochMetrics| on_epoch(label, m);
        let (mut row, complete) = match row_cfg.dtype.as_str() {
            "f32" => run_row::<f32>(row_cfg, loaded, cap_left.max(0.0), &mut cb)?,
            _ => run_row::<f64>(row_cfg, loaded, cap_left.max(0.0), &mut cb)?,
        };
        row.setting = label.clone();
        truncated |= !complete;
        rows.push(row);
    }
    let data_hash = data.as_ref().map(|(_, d)| d.digest()).unwrap_or_default();
    Ok(AblationReport {
        ablation,
        axis: ablation.axis(),
        preset: grid[0].1.preset.clone(),
        epochs: cfg.epochs,
        data_hash,
        rows,
        truncated,
    })
}
