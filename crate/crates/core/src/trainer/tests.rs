use super::*;
use crate::error::OclipError;
use crate::model::{ModelConfig, TEMPERATURE};
use crate::synthdata::{render_corpus, GenConfig, Sample};

fn corpus(count: usize) -> Vec<Sample> {
    let gen = GenConfig {
        image_size: 32,
        max_instances: 3,
        max_len: 4,
        ..GenConfig::default()
    };
    render_corpus(11, count, &gen).unwrap()
}

fn hyper(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 3,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn run(trainer: &mut Trainer, data: &[Sample], n: usize) -> Vec<StepMetrics> {
    (0..n).map(|_| trainer.step(data).unwrap()).collect()
}

#[test]
fn untrained_loss_is_near_uniform() {
    let data = corpus(6);
    let cfg = ModelConfig::tiny();
    let ln_v = (cfg.vocab_size as f64).ln();
    let m = Trainer::new(cfg, hyper(5)).unwrap().step(&data).unwrap();
    assert!((m.l_cls - ln_v).abs() < 0.1 * ln_v, "{} vs {ln_v}", m.l_cls);
    assert_eq!(m.total, m.l_cls + m.l_bc);
    assert_eq!(m.step, 0);
}

#[test]
fn no_bcl_logs_zero_contrastive_loss() {
    let data = corpus(6);
    let mut t = Trainer::new(
        ModelConfig::tiny(),
        TrainConfig {
            use_bcl: false,
            ..hyper(4)
        },
    )
    .unwrap();
    for m in run(&mut t, &data, 4) {
        assert_eq!(m.l_bc, 0.0);
        assert_eq!(m.total, m.l_cls);
    }
    // The temperature receives no gradient and is exempt from decay.
    assert_eq!(t.params().temperature(), 0.07);
}

#[test]
fn head_and_char_table_change_after_one_step() {
    let data = corpus(6);
    let mut t = Trainer::new(ModelConfig::tiny(), hyper(3)).unwrap();
    let before = t.params().clone();
    t.step(&data).unwrap();
    for name in ["head.weight", "text.char_embed", TEMPERATURE] {
        assert_ne!(t.params().get(name), before.get(name), "{name}");
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = corpus(6);
    let a = run(
        &mut Trainer::new(ModelConfig::tiny(), hyper(4)).unwrap(),
        &data,
        4,
    );
    let b = run(
        &mut Trainer::new(ModelConfig::tiny(), hyper(4)).unwrap(),
        &data,
        4,
    );
    assert_eq!(a, b);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = corpus(6);
    let mut straight = Trainer::new(ModelConfig::tiny(), hyper(20)).unwrap();
    let full = run(&mut straight, &data, 20);

    let mut first = Trainer::new(ModelConfig::tiny(), hyper(20)).unwrap();
    let mut resumed_log = run(&mut first, &data, 10);
    let bytes = first.checkpoint().to_bytes().unwrap();
    let mut second = Trainer::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    resumed_log.extend(run(&mut second, &data, 10));

    assert_eq!(resumed_log, full);
    assert_eq!(second.params(), straight.params());
    assert!(second.step(&data).is_err());
}

#[test]
fn run_training_writes_log_and_checkpoint() {
    let data = corpus(4);
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutputs {
        checkpoint_every: Some(2),
        ..RunOutputs::in_dir(dir.path())
    };
    let mut t = Trainer::new(ModelConfig::tiny(), hyper(3)).unwrap();
    let history = run_training(&mut t, &data, &out).unwrap();
    assert_eq!(read_metrics(&out.metrics).unwrap(), history);
    let ck = Checkpoint::load(&out.checkpoint).unwrap();
    assert_eq!(ck.step, 3);
    assert_eq!(&ck.params, t.params());
}

#[test]
fn divergence_keeps_last_good_state() {
    let data = corpus(4);
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutputs::in_dir(dir.path());
    let mut ck = Trainer::new(ModelConfig::tiny(), hyper(3))
        .unwrap()
        .checkpoint();
    ck.params.get_mut("head.bias").unwrap().data_mut()[2] = f64::NAN;
    let mut t = Trainer::from_checkpoint(ck.clone()).unwrap();
    assert!(matches!(
        run_training(&mut t, &data, &out),
        Err(OclipError::Divergence(_))
    ));
    let saved = Checkpoint::load(&out.checkpoint).unwrap();
    assert_eq!(saved.step, 0);
    assert_eq!(saved.rng_state, ck.rng_state);
    assert!(read_metrics(&out.metrics).unwrap().is_empty());
}

#[test]
fn invalid_hyperparameters_are_rejected() {
    let bad = TrainConfig {
        fraction: 0.0,
        ..hyper(3)
    };
    assert!(matches!(
        Trainer::new(ModelConfig::tiny(), bad),
        Err(OclipError::Usage(_))
    ));
}

#[test]
fn annotated_view_is_fixed_per_run() {
    let data = corpus(8);
    for s in &data {
        let a = annotated_view(s, 0.25, 3).unwrap();
        assert_eq!(a, annotated_view(s, 0.25, 3).unwrap());
        assert_eq!(a.instances.len(), 1);
        assert!(s.instances.contains(&a.instances[0]));
        assert_eq!(a.pixels, s.pixels);
        assert_eq!(&annotated_view(s, 1.0, 3).unwrap(), s);
    }
}
