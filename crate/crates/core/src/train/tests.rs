use super::*;
use crate::attention::{DeltaTransform, TimeAliBiConfig};
use crate::journey::{generate_journeys, GeneratorConfig};
use crate::model::{ModelConfig, ModelDims, ModelKind};
use crate::pipeline::{preprocess, PipelineConfig, Preprocessed};

fn data(n_users: usize) -> Preprocessed {
    let g = GeneratorConfig {
        n_users,
        ..GeneratorConfig::default()
    };
    let j = generate_journeys(&g, 7).unwrap();
    let p = PipelineConfig {
        max_context_len: 64,
        ..PipelineConfig::default()
    };
    preprocess(&j.events, &j.intents, g.start_timestamp, &p).unwrap()
}

fn compact() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        ffn_dim: 32,
        dropout: 0.0,
        alibi: TimeAliBiConfig {
            delta_transform: DeltaTransform::Linear,
            time_unit_seconds: 3600.0,
            ..TimeAliBiConfig::new(2)
        },
        ..ModelConfig::default()
    }
}

fn model(kind: ModelKind, d: &Preprocessed, seed: u64) -> Model {
    Model::new(kind, &compact(), ModelDims::from_state(&d.state), seed).unwrap()
}

fn quick(max_steps: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 4,
        max_steps,
        eval_every: 5,
        early_stop_patience: 100,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let d = data(8);
    let mut m = model(ModelKind::Timesync, &d, 1);
    let before = snapshot(&m.params);
    let config = TrainConfig {
        learning_rate: 0.0,
        ..quick(1)
    };
    let batch: Vec<&TokenizedSample> = d.train.iter().take(4).collect();
    let mut adam = Adam::new(&m.params);
    let mut rng = stream(0, &[1]);
    for _ in 0..3 {
        train_step(&mut m, &batch, &mut adam, &config, &mut rng).unwrap();
    }
    assert_eq!(snapshot(&m.params), before);
    assert!(config.validate().is_err());
}

#[test]
fn initial_loss_is_near_uniform_entropy() {
    let d = data(16);
    let batch: Vec<&TokenizedSample> = d.train.iter().collect();
    for kind in ModelKind::LADDER {
        let mut m = model(kind, &d, 2);
        let uniform = (m.dims.n_classes as f64).ln();
        let mut adam = Adam::new(&m.params);
        let out = train_step(&mut m, &batch, &mut adam, &quick(1), &mut stream(0, &[2])).unwrap();
        assert!((out.loss - uniform).abs() < 0.1 * uniform, "{kind}: {} vs {uniform}", out.loss);
    }
    assert_eq!(d.state.vocabs.n_intent_classes(), 20);
}

#[test]
fn single_batch_overfits() {
    let d = data(8);
    let batch: Vec<&TokenizedSample> = d.train.iter().take(2).collect();
    let mut m = model(ModelKind::Timesync, &d, 3);
    let config = TrainConfig {
        learning_rate: 1e-2,
        gradient_clip_norm: 5.0,
        ..quick(1)
    };
    let mut adam = Adam::new(&m.params);
    let mut rng = stream(0, &[3]);
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        loss = train_step(&mut m, &batch, &mut adam, &config, &mut rng).unwrap().loss;
    }
    assert!(loss < 0.05, "loss after 200 steps {loss}");
}

#[test]
fn empty_batch_is_rejected() {
    let d = data(4);
    let mut m = model(ModelKind::Sasrec, &d, 0);
    let mut adam = Adam::new(&m.params);
    let err = train_step(&mut m, &[], &mut adam, &quick(1), &mut stream(0, &[0]));
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn non_finite_loss_names_the_sample() {
    let d = data(4);
    let mut m = model(ModelKind::Timesync, &d, 0);
    let head = m.params.id("head.w").unwrap();
    m.params.get_mut(head).data_mut()[0] = f64::NAN;
    let batch: Vec<&TokenizedSample> = d.train.iter().take(1).collect();
    let mut adam = Adam::new(&m.params);
    match train_step(&mut m, &batch, &mut adam, &quick(1), &mut stream(0, &[0])) {
        Err(Error::NonFinite { sample, .. }) => assert_eq!(sample, format!("user {}", batch[0].user_id)),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn zero_steps_returns_initialization() {
    let d = data(8);
    let mut m = model(ModelKind::Timesync, &d, 4);
    let before = snapshot(&m.params);
    let out = run_training(&mut m, &d.train, &d.validation, &quick(0)).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.steps_run, 0);
    assert_eq!(snapshot(&m.params), before);
}

#[test]
fn log_has_one_row_per_evaluation() {
    let d = data(8);
    let mut m = model(ModelKind::Sasrec, &d, 5);
    let out = run_training(&mut m, &d.train, &d.validation, &quick(12)).unwrap();
    // evaluations at steps 5, 10 and the final step 12
    assert_eq!(out.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![5, 10, 12]);
    assert!(out.log.iter().all(|r| (0.0..=1.0).contains(&r.val_recall_1) && r.val_recall_1 <= r.val_recall_5));
}

#[test]
fn training_is_reproducible() {
    let d = data(8);
    let config = TrainConfig {
        seed: 11,
        ..quick(10)
    };
    let run = || {
        let mut m = Model::new(ModelKind::Timesync, &ModelConfig { dropout: 0.1, ..compact() }, ModelDims::from_state(&d.state), 6).unwrap();
        let out = run_training(&mut m, &d.train, &d.validation, &config).unwrap();
        (out.log, snapshot(&m.params))
    };
    assert_eq!(run(), run());
}

#[test]
fn clip_above_observed_norm_is_bit_identical() {
    let d = data(8);
    let run = |clip: f64| {
        let mut m = model(ModelKind::Timesync, &d, 7);
        let config = TrainConfig {
            gradient_clip_norm: clip,
            ..quick(10)
        };
        let out = run_training(&mut m, &d.train, &d.validation, &config).unwrap();
        (out.log, snapshot(&m.params))
    };
    assert_eq!(run(1e6), run(1e9));
}

#[test]
fn early_stopping_restores_best_checkpoint() {
    let d = data(8);
    let mut m = model(ModelKind::Sasrec, &d, 8);
    let config = TrainConfig {
        early_stop_patience: 1,
        eval_every: 1,
        ..quick(50)
    };
    let out = run_training(&mut m, &d.train, &d.validation, &config).unwrap();
    let best = out.log.iter().map(|r| r.val_recall_1).fold(f64::MIN, f64::max);
    assert_eq!(out.best_val_recall_1, Some(best));
    assert!(out.steps_run < 50 || out.log.len() == 50);
    let again = crate::eval::evaluate(&m, &d.validation, &[1]).unwrap();
    assert_eq!(again.values[0], best);
}

#[test]
fn invalid_configs_are_rejected() {
    for c in [
        TrainConfig { early_stop_patience: 0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { beta1: 1.0, ..TrainConfig::default() },
        TrainConfig { gradient_clip_norm: 0.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
    TrainConfig::default().validate().unwrap();
}

