use fbk_core::config::RunConfig;
use fbk_core::experiments::train::{eval_command, load_data, train_run, Trainer};

fn bits(t: &Trainer<f64>) -> Vec<(u64, u64, u64)> {
    t.history
        .iter()
        .map(|m| (m.train_loss.to_bits(), m.train_err.to_bits(), m.test_err.to_bits()))
        .collect()
}

fn trained(cfg: &RunConfig) -> Trainer<f64> {
    let data = load_data(cfg).unwrap();
    let mut t = Trainer::<f64>::new(cfg, data.train.sample_shape(), data.train.classes()).unwrap();
    train_run(&mut t, &data, None, |_| Ok(())).unwrap();
    t
}

#[test]
fn linear_model_separates_noise_free_linear_data() {
    let cfg = RunConfig {
        preset: "linear".into(),
        synth_rank: 0,
        synth_train: 20_000,
        lr: 0.1,
        weight_decay: 0.0,
        ..Default::default()
    };
    let t = trained(&cfg);
    let last = t.history.last().unwrap();
    assert!(last.test_err <= 0.01, "test error {}", last.test_err);
    assert!(last.train_err <= 0.01, "train error {}", last.train_err);
}

#[test]
fn untrained_models_sit_at_chance() {
    for (preset, classes) in [("fb", 4), ("linear", 10), ("fbn", 10)] {
        let cfg = RunConfig {
            preset: preset.into(),
            synth_classes: classes,
            synth_test: 5000,
            ..Default::default()
        };
        let r = eval_command(&cfg, None).unwrap();
        assert!(
            (r.test_err - r.chance_err).abs() <= 0.03,
            "{preset}: {} vs chance {}",
            r.test_err,
            r.chance_err
        );
    }
}

#[test]
fn fixed_seed_gives_bit_identical_trajectory_on_one_thread() {
    let cfg = RunConfig {
        synth_train: 640,
        synth_test: 200,
        batch_size: 16,
        epochs: 2,
        p: 0.5,
        ..Default::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (a, b) = pool.install(|| (bits(&trained(&cfg)), bits(&trained(&cfg))));
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
}

#[test]
fn zero_factor_layer_trains_like_linear_layer() {
    let base = RunConfig {
        synth_train: 1000,
        synth_test: 200,
        epochs: 5,
        k: 0,
        ..Default::default()
    };
    let mut fb = trained(&RunConfig {
        preset: "fb".into(),
        ..base.clone()
    });
    let mut linear = trained(&RunConfig {
        preset: "linear".into(),
        ..base
    });
    assert_eq!(bits(&fb), bits(&linear));
    let values = |t: &mut Trainer<f64>| -> Vec<u64> {
        t.net
            .state_tensors()
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(values(&mut fb), values(&mut linear));
}
