//! Training loop, evaluation and checkpoints.
//!
//! A checkpoint is a pair of files: `<name>.fbkt` holds every network state
//! tensor followed by every momentum buffer, back to back in the tensor
//! binary format; `<name>.json` is the manifest (config, layer specs, rng
//! positions, epoch counter, metrics so far). Restoring both reproduces
//! the uninterrupted run bit for bit.

use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::augment::augment;
use crate::data::synthetic::SyntheticTask;
use crate::data::{balanced_subset, cifar, Dataset};
use crate::error::{FbError, Result};
use crate::nn::{preset, step_lr, warmup_multiplier, ForwardCtx, LayerSpec, Mode, Network, Sgd};
use crate::rng::{stream, Stream, StreamRng, StreamState};
use crate::tensor::{Element, Tensor};

/// Presets whose first layer is a convolution.
const IMAGE_PRESETS: &[&str] = &["baseline", "baseline-conv1x1", "fbn"];

pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub synthetic: Option<SyntheticTask>,
}

impl LoadedData {
    /// Hash of both splits, for reports.
    pub fn digest(&self) -> String {
        crate::report::content_hash(format!("{}{}", self.train.digest(), self.test.digest()).as_bytes())
    }
}

pub fn data_dir(cfg: &RunConfig) -> Result<PathBuf> {
    if !cfg.data_dir.is_empty() {
        return Ok(PathBuf::from(&cfg.data_dir));
    }
    std::env::var_os("FBK_DATA_DIR")
        .map(PathBuf::from)
        .ok_or_else(|| FbError::Config(format!("dataset {} needs data_dir or FBK_DATA_DIR", cfg.dataset)))
}

/// Loads the configured dataset, applies the training subset, and views
/// square synthetic vectors as one-channel images for image presets.
pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let (mut train, mut test, synthetic) = match cfg.dataset.as_str() {
        "synthetic" => {
            let task = SyntheticTask::new(cfg.synthetic())?;
            let (train, test) = task.generate()?;
            (train, test, Some(task))
        }
        name => {
            let variant =
                cifar::Variant::parse(name).ok_or_else(|| FbError::Config(format!("unknown dataset {name:?}")))?;
            let (train, test) = cifar::load(&data_dir(cfg)?, variant)?;
            (train, test, None)
        }
    };
    if cfg.subset > 0 && cfg.subset < train.len() {
        let idx = balanced_subset(
            train.labels(),
            train.classes(),
            cfg.subset,
            &mut stream(cfg.data_seed, Stream::Data),
        )?;
        train = train.select(&idx);
    }
    if IMAGE_PRESETS.contains(&cfg.preset.as_str()) && train.sample_shape().len() == 1 {
        let n = train.sample_shape()[0];
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(FbError::Config(format!(
                "preset {} needs images; {n}-dimensional vectors are not square",
                cfg.preset
            )));
        }
        train = train.with_sample_shape(&[1, side, side])?;
        test = test.with_sample_shape(&[1, side, side])?;
    }
    Ok(LoadedData { train, test, synthetic })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub fb_lr_multiplier: f64,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: f64,
    pub wallclock: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    config_digest: String,
    dtype: String,
    specs: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    classes: usize,
    epochs_completed: usize,
    mask_rng: StreamState,
    augment_rng: StreamState,
    data_rng: StreamState,
    tensor_shapes: Vec<Vec<usize>>,
    history: Vec<EpochMetrics>,
}

pub struct Trainer<T: Element> {
    pub cfg: RunConfig,
    pub net: Network<T>,
    pub sgd: Sgd<T>,
    mask_rng: StreamRng,
    augment_rng: StreamRng,
    data_rng: StreamRng,
    pub epochs_completed: usize,
    pub history: Vec<EpochMetrics>,
}

impl<T: Element> Trainer<T> {
    pub fn new(cfg: &RunConfig, input_shape: &[usize], classes: usize) -> Result<Self> {
        cfg.validate()?;
        let specs = preset(&cfg.preset, input_shape, &cfg.preset_options(classes))?;
        let mut net = Network::build(
            specs,
            input_shape,
            &cfg.build_options(),
            &mut stream(cfg.seed, Stream::Init),
        )?;
        let sgd = Sgd::new(cfg.sgd(), &mut net);
        Ok(Trainer {
            cfg: cfg.clone(),
            net,
            sgd,
            mask_rng: stream(cfg.seed, Stream::Mask),
            augment_rng: stream(cfg.seed, Stream::Augment),
            data_rng: stream(cfg.seed, Stream::Data),
            epochs_completed: 0,
            history: Vec::new(),
        })
    }

    fn augmenting(&self, data: &Dataset) -> bool {
        self.cfg.augment && self.cfg.dataset != "synthetic" && data.sample_shape().len() == 3
    }

    /// One pass over `train` in a fresh random order. Returns mean loss and
    /// error rate over the pass.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<(f64, f64)> {
        let epoch = self.epochs_completed;
        let lr = step_lr(self.cfg.lr, epoch, &self.cfg.lr_milestones, self.cfg.lr_decay);
        let fb_mult = warmup_multiplier(epoch, self.cfg.warmup_epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.data_rng);
        let augmenting = self.augmenting(train);
        let (mut loss_sum, mut wrong) = (0.0, 0usize);
        for idx in order.chunks(self.cfg.batch_size) {
            let (mut x, labels) = train.batch::<T>(idx);
            if augmenting {
                let [c, h, w] = [x.shape()[1], x.shape()[2], x.shape()[3]];
                for s in 0..idx.len() {
                    let out = augment(x.outer(s), c, h, w, 4, &mut self.augment_rng);
                    x.outer_mut(s).copy_from_slice(&out);
                }
            }
            let step = self
                .net
                .forward_backward(&x, &labels, Mode::Train, &mut self.mask_rng)?;
            self.sgd.step(&mut self.net, lr, fb_mult)?;
            loss_sum += step.loss * idx.len() as f64;
            wrong += idx.len() - step.correct;
        }
        let n = train.len().max(1) as f64;
        Ok((loss_sum / n, wrong as f64 / n))
    }

    /// Top-1 error in inference mode.
    pub fn evaluate(&mut self, data: &Dataset) -> Result<f64> {
        let mut scratch = self.mask_rng.clone();
        let mut wrong = 0usize;
        let order: Vec<usize> = (0..data.len()).collect();
        for idx in order.chunks(self.cfg.batch_size.max(256)) {
            let (x, labels) = data.batch::<T>(idx);
            let logits = self.net.forward(
                &x,
                &mut ForwardCtx {
                    mode: Mode::Eval,
                    mask_rng: &mut scratch,
                },
            )?;
            let (_, correct, _) = crate::nn::softmax_cross_entropy(&logits, &labels)?;
            wrong += idx.len() - correct;
        }
        Ok(wrong as f64 / data.len().max(1) as f64)
    }

    /// Trains one epoch and evaluates; `started` anchors the wallclock column.
    pub fn run_epoch(&mut self, train: &Dataset, test: &Dataset, started: Instant) -> Result<EpochMetrics> {
        let epoch = self.epochs_completed;
        let (train_loss, train_err) = self.train_epoch(train)?;
        let test_err = self.evaluate(test)?;
        self.epochs_completed += 1;
        let m = EpochMetrics {
            epoch,
            lr: step_lr(self.cfg.lr, epoch, &self.cfg.lr_milestones, self.cfg.lr_decay),
            fb_lr_multiplier: warmup_multiplier(epoch, self.cfg.warmup_epochs),
            train_loss,
            train_err,
            test_err,
            wallclock: started.elapsed().as_secs_f64(),
        };
        self.history.push(m.clone());
        Ok(m)
    }

    fn manifest(&mut self) -> Manifest {
        let shapes = self
            .net
            .state_tensors()
            .iter()
            .map(|t| t.shape().to_vec())
            .chain(self.sgd.velocity().iter().map(|t| t.shape().to_vec()))
            .collect();
        Manifest {
            config: self.cfg.clone(),
            config_digest: self.cfg.digest(),
            dtype: self.cfg.dtype.clone(),
            specs: self.net.specs().to_vec(),
            input_shape: self.net.input_shape().to_vec(),
            classes: self.net.classes(),
            epochs_completed: self.epochs_completed,
            mask_rng: StreamState::capture(&self.mask_rng),
            augment_rng: StreamState::capture(&self.augment_rng),
            data_rng: StreamState::capture(&self.data_rng),
            tensor_shapes: shapes,
            history: self.history.clone(),
        }
    }

    /// Writes `<dir>/latest.fbkt` and `<dir>/latest.json`.
    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| FbError::io(dir, e))?;
        let tensors_path = dir.join("latest.fbkt");
        let file = std::fs::File::create(&tensors_path).map_err(|e| FbError::io(&tensors_path, e))?;
        let mut w = BufWriter::new(file);
        for t in self.net.state_tensors() {
            t.write_to(&mut w).map_err(|e| FbError::io(&tensors_path, e))?;
        }
        for t in self.sgd.velocity() {
            t.write_to(&mut w).map_err(|e| FbError::io(&tensors_path, e))?;
        }
        w.flush().map_err(|e| FbError::io(&tensors_path, e))?;
        let manifest_path = dir.join("latest.json");
        let json = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        std::fs::write(&manifest_path, json).map_err(|e| FbError::io(&manifest_path, e))
    }

    /// Rebuilds a trainer from a checkpoint written under `cfg`-compatible
    /// settings. The architecture and dtype must match `cfg`; anything else
    /// (epoch budget, say) is taken from `cfg`.
    pub fn resume(cfg: &RunConfig, dir: &Path, input_shape: &[usize], classes: usize) -> Result<Self> {
        let manifest_path = dir.join("latest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| FbError::io(&manifest_path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| FbError::Format(format!("{}: {e}", manifest_path.display())))?;
        let mut trainer = Trainer::<T>::new(cfg, input_shape, classes)?;
        let mismatch = |what: &str| FbError::Config(format!("checkpoint {what} does not match the configuration"));
        if m.dtype != cfg.dtype {
            return Err(mismatch("dtype"));
        }
        if m.specs != trainer.net.specs() || m.input_shape != input_shape || m.classes != classes {
            return Err(mismatch("architecture"));
        }
        let tensors_path = dir.join("latest.fbkt");
        let file = std::fs::File::open(&tensors_path).map_err(|e| FbError::io(&tensors_path, e))?;
        let mut r = BufReader::new(file);
        let mut targets: Vec<&mut Tensor<T>> = trainer.net.state_tensors();
        targets.extend(trainer.sgd.velocity_mut().iter_mut());
        if targets.len() != m.tensor_shapes.len() {
            return Err(mismatch("tensor count"));
        }
        for target in targets {
            let t = Tensor::<T>::read_from(&mut r)?;
            if t.shape() != target.shape() {
                return Err(mismatch("tensor shape"));
            }
            *target = t;
        }
        let restore = |s: &StreamState| {
            s.restore()
                .ok_or_else(|| FbError::Format("unreadable rng state in checkpoint".into()))
        };
        trainer.mask_rng = restore(&m.mask_rng)?;
        trainer.augment_rng = restore(&m.augment_rng)?;
        trainer.data_rng = restore(&m.data_rng)?;
        trainer.epochs_completed = m.epochs_completed;
        trainer.history = m.history;
        Ok(trainer)
    }
}

/// Result of [`train_run`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_completed: usize,
    pub truncated: bool,
    pub final_test_err: f64,
    pub final_train_err: f64,
    pub factor_params: u64,
    pub total_params: u64,
}

/// Runs epochs until `cfg.epochs` or the wallclock cap. Calls `on_epoch`
/// after each epoch; checkpoints after each epoch when `checkpoint_dir` is
/// given.
pub fn train_run<T: Element>(
    trainer: &mut Trainer<T>,
    data: &LoadedData,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainSummary> {
    let started = Instant::now();
    let cap = trainer.cfg.wallclock_cap_secs;
    let mut truncated = false;
    while trainer.epochs_completed < trainer.cfg.epochs {
        if cap > 0.0 && started.elapsed().as_secs_f64() >= cap {
            truncated = true;
            break;
        }
        let m = trainer.run_epoch(&data.train, &data.test, started)?;
        on_epoch(&m)?;
        if let Some(dir) = checkpoint_dir {
            trainer.save_checkpoint(dir)?;
        }
    }
    let tally = trainer.net.param_count();
    let (final_test_err, final_train_err) = match trainer.history.last() {
        Some(m) => (m.test_err, m.train_err),
        None => (trainer.evaluate(&data.test)?, f64::NAN),
    };
    Ok(TrainSummary {
        epochs_completed: trainer.epochs_completed,
        truncated,
        final_test_err,
        final_train_err,
        factor_params: tally.factor,
        total_params: tally.total(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub dtype: String,
    pub data_hash: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub resumed_at_epoch: Option<usize>,
    pub summary: TrainSummary,
}

fn train_typed<T: Element>(
    cfg: &RunConfig,
    data: &LoadedData,
    checkpoint_dir: Option<&Path>,
    resume: bool,
    on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainReport> {
    let (shape, classes) = (data.train.sample_shape(), data.train.classes());
    let mut trainer = match checkpoint_dir {
        Some(dir) if resume => Trainer::<T>::resume(cfg, dir, shape, classes)?,
        _ => Trainer::<T>::new(cfg, shape, classes)?,
    };
    let resumed_at_epoch = resume.then_some(trainer.epochs_completed);
    let summary = train_run(&mut trainer, data, checkpoint_dir, on_epoch)?;
    Ok(TrainReport {
        dtype: cfg.dtype.clone(),
        data_hash: data.digest(),
        input_shape: shape.to_vec(),
        classes,
        resumed_at_epoch,
        summary,
    })
}

/// Loads data and trains in the configured dtype, optionally resuming from
/// and checkpointing to `checkpoint_dir`.
pub fn train_command(
    cfg: &RunConfig,
    checkpoint_dir: Option<&Path>,
    resume: bool,
    on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    match cfg.dtype.as_str() {
        "f32" => train_typed::<f32>(cfg, &data, checkpoint_dir, resume, on_epoch),
        _ => train_typed::<f64>(cfg, &data, checkpoint_dir, resume, on_epoch),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub dtype: String,
    pub data_hash: String,
    pub classes: usize,
    pub test_samples: usize,
    /// Error of a constant guess, `(c - 1) / c`.
    pub chance_err: f64,
    pub test_err: f64,
    pub epochs_completed: usize,
    pub untrained: bool,
}

fn eval_typed<T: Element>(cfg: &RunConfig, data: &LoadedData, checkpoint_dir: Option<&Path>) -> Result<EvalReport> {
    let (shape, classes) = (data.train.sample_shape(), data.train.classes());
    let mut trainer = match checkpoint_dir {
        Some(dir) => Trainer::<T>::resume(cfg, dir, shape, classes)?,
        None => Trainer::<T>::new(cfg, shape, classes)?,
    };
    Ok(EvalReport {
        dtype: cfg.dtype.clone(),
        data_hash: data.digest(),
        classes,
        test_samples: data.test.len(),
        chance_err: (classes - 1) as f64 / classes as f64,
        test_err: trainer.evaluate(&data.test)?,
        epochs_completed: trainer.epochs_completed,
        untrained: checkpoint_dir.is_none(),
    })
}

/// Top-1 test error of the checkpoint in `checkpoint_dir`, or of a freshly
/// initialized model when `None`.
pub fn eval_command(cfg: &RunConfig, checkpoint_dir: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    match cfg.dtype.as_str() {
        "f32" => eval_typed::<f32>(cfg, &data, checkpoint_dir),
        _ => eval_typed::<f64>(cfg, &data, checkpoint_dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> RunConfig {
        RunConfig {
            synth_train: 256,
            synth_test: 128,
            epochs: 3,
            batch_size: 32,
            k: 4,
            p: 0.5,
            ..Default::default()
        }
    }

    fn losses(h: &[EpochMetrics]) -> Vec<(u64, u64, u64)> {
        h.iter()
            .map(|m| (m.train_loss.to_bits(), m.train_err.to_bits(), m.test_err.to_bits()))
            .collect()
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = small_cfg();
        let data = load_data(&cfg).unwrap();
        let run = || {
            let mut t = Trainer::<f64>::new(&cfg, data.train.sample_shape(), 4).unwrap();
            train_run(&mut t, &data, None, |_| Ok(())).unwrap();
            losses(&t.history)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_reproduces_trajectory() {
        let cfg = small_cfg();
        let data = load_data(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut full = Trainer::<f64>::new(&cfg, &[16], 4).unwrap();
        train_run(&mut full, &data, None, |_| Ok(())).unwrap();

        let mut first = Trainer::<f64>::new(
            &RunConfig {
                epochs: 1,
                ..cfg.clone()
            },
            &[16],
            4,
        )
        .unwrap();
        train_run(&mut first, &data, Some(dir.path()), |_| Ok(())).unwrap();
        let mut rest = Trainer::<f64>::resume(&cfg, dir.path(), &[16], 4).unwrap();
        train_run(&mut rest, &data, None, |_| Ok(())).unwrap();
        assert_eq!(losses(&rest.history), losses(&full.history));
    }

    #[test]
    fn resume_rejects_other_architecture() {
        let cfg = small_cfg();
        let data = load_data(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::<f64>::new(
            &RunConfig {
                epochs: 1,
                ..cfg.clone()
            },
            &[16],
            4,
        )
        .unwrap();
        train_run(&mut t, &data, Some(dir.path()), |_| Ok(())).unwrap();
        let other = RunConfig { k: 5, ..cfg.clone() };
        assert!(matches!(
            Trainer::<f64>::resume(&other, dir.path(), &[16], 4),
            Err(FbError::Config(_))
        ));
        let f32_cfg = RunConfig {
            dtype: "f32".into(),
            ..cfg
        };
        assert!(matches!(
            Trainer::<f32>::resume(&f32_cfg, dir.path(), &[16], 4),
            Err(FbError::Config(_))
        ));
    }

    #[test]
    fn image_presets_view_square_vectors() {
        let cfg = RunConfig {
            preset: "fbn".into(),
            ..small_cfg()
        };
        let data = load_data(&cfg).unwrap();
        assert_eq!(data.train.sample_shape(), [1, 4, 4]);
        let bad = RunConfig {
            synth_n: 15,
            synth_rank: 2,
            ..cfg
        };
        assert!(matches!(load_data(&bad), Err(FbError::Config(_))));
    }

    #[test]
    fn eval_matches_training_history() {
        let cfg = RunConfig {
            dtype: "f32".into(),
            ..small_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let trained = train_command(&cfg, Some(dir.path()), false, |_| Ok(())).unwrap();
        let eval = eval_command(&cfg, Some(dir.path())).unwrap();
        assert_eq!(eval.test_err, trained.summary.final_test_err);
        assert_eq!(eval.epochs_completed, 3);
        let fresh = eval_command(&cfg, None).unwrap();
        assert!(fresh.untrained && fresh.epochs_completed == 0);
    }

    #[test]
    fn wallclock_cap_truncates() {
        let cfg = RunConfig {
            wallclock_cap_secs: 1e-9,
            ..small_cfg()
        };
        let data = load_data(&cfg).unwrap();
        let mut t = Trainer::<f64>::new(&cfg, &[16], 4).unwrap();
        std::thread::sleep(std::time::Duration::from_millis(1));
        let s = train_run(&mut t, &data, None, |_| Ok(())).unwrap();
        assert!(s.truncated);
        assert_eq!(s.epochs_completed, 0);
    }
}
