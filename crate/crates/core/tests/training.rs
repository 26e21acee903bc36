use std::sync::Arc;

use candle_core::{DType, Device};
use makeup_core::data::{load_dataset, DataConfig, FaceServices, SampleLoader};
use makeup_core::face::{EllipseParser, IdentityRemover, MakeupRegionPolicy};
use makeup_core::generator::GeneratorConfig;
use makeup_core::nn::TensorRecord;
use makeup_core::synthetic;
use makeup_core::training::{
    checkpoint_path, load_checkpoint, resume, save_checkpoint, train, Checkpoint, StepReport, TrainConfig, TrainState,
};
use makeup_core::Error;

fn gen_config() -> GeneratorConfig {
    GeneratorConfig {
        resolution: 16,
        z_dim: 8,
        w_dim: 8,
        mapping_depth: 2,
        channel_base: 64,
        max_channels: 8,
        seed: 1,
        ..Default::default()
    }
}

fn train_config(lr: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        total_steps: 6,
        log_interval: 1,
        checkpoint_interval: 3,
        hrfpl_width: 4,
        r1: makeup_core::training::R1Config { interval: 2, ..Default::default() },
        ..Default::default()
    }
}

fn state(lr: f64) -> TrainState {
    TrainState::new(&gen_config(), &train_config(lr), "fixture", DType::F32, &Device::Cpu).unwrap()
}

fn batch(step: usize) -> Vec<makeup_core::data::MakeupSample> {
    vec![synthetic::sample(step as u64 % 3, 16), synthetic::sample(3 + step as u64 % 2, 16)]
}

fn snapshot(s: &TrainState) -> (Vec<TensorRecord>, Vec<TensorRecord>) {
    (s.generator.params().records().unwrap(), s.discriminator.params().records().unwrap())
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut s = state(0.0);
    let before = snapshot(&s);
    for i in 0..2 {
        s.train_step(&batch(i)).unwrap();
    }
    assert_eq!(before, snapshot(&s));
}

#[test]
fn each_update_touches_only_its_own_network() {
    let mut s = state(1e-3);
    let (g0, d0) = snapshot(&s);
    let fwd = s.forward(&batch(0)).unwrap();
    let d = s.update_discriminator(&fwd).unwrap();
    let (g1, d1) = snapshot(&s);
    assert_eq!(g0, g1, "generator moved during the discriminator update");
    assert_ne!(d0, d1);
    s.update_generator(&fwd, &d).unwrap();
    let (g2, d2) = snapshot(&s);
    assert_eq!(d1, d2, "discriminator moved during the generator update");
    assert_ne!(g1, g2);
}

#[test]
fn same_seed_same_loss_sequence() {
    let run = || -> Vec<StepReport> {
        let mut s = state(1e-3);
        (0..3).map(|i| s.train_step(&batch(i)).unwrap()).collect()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a[0].r1.is_some() && a[1].r1.is_none());
    for r in &a {
        let recomputed = r.losses.adv + 5.0 * r.losses.hrfpl + 10.0 * r.losses.rec;
        assert!((r.losses.total - recomputed).abs() < 1e-6);
    }
}

#[test]
fn checkpoint_round_trip_and_resume_match_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut straight = state(1e-3);
    let reference: Vec<StepReport> = (0..4).map(|i| straight.train_step(&batch(i)).unwrap()).collect();

    let mut first = state(1e-3);
    for i in 0..2 {
        first.train_step(&batch(i)).unwrap();
    }
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    save_checkpoint(&first, &a).unwrap();
    let mut resumed = load_checkpoint(&a, &Device::Cpu).unwrap();
    save_checkpoint(&resumed, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    assert_eq!(resumed.step(), 2);
    let tail: Vec<StepReport> = (2..4).map(|i| resumed.train_step(&batch(i)).unwrap()).collect();
    assert_eq!(tail, reference[2..]);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let mut s = state(1e-3);
    let mut bad = batch(0);
    bad[0].bare.data_mut()[3 * (8 * 16 + 8)] = f32::NAN;
    match s.train_step(&bad) {
        Err(Error::NonFiniteActivation(_)) | Err(Error::NonFiniteLoss { .. }) => {}
        other => panic!("expected an abort, got {other:?}"),
    }
}

fn loader(root: &std::path::Path) -> SampleLoader {
    let manifest = Arc::new(load_dataset(root, &DataConfig { resolution: 16, ..Default::default() }).unwrap());
    let services = FaceServices {
        parser: Arc::new(EllipseParser::default()),
        policy: MakeupRegionPolicy::default(),
        remover: Arc::new(IdentityRemover),
    };
    SampleLoader::new(manifest, services, 16, 0, true)
}

#[test]
fn train_loop_logs_checkpoints_and_resumes() {
    let data = tempfile::tempdir().unwrap();
    synthetic::write_dataset(data.path(), 5, 16, true).unwrap();
    let loader = loader(data.path());
    let hash = loader.manifest().hash();
    let out = tempfile::tempdir().unwrap();

    let mut full = TrainState::new(&gen_config(), &train_config(1e-3), &hash, DType::F32, &Device::Cpu).unwrap();
    let mut full_reports = Vec::new();
    let last = train(&mut full, &loader, &out.path().join("full"), |r| full_reports.push(*r)).unwrap();
    assert_eq!(last, checkpoint_path(&out.path().join("full"), 6));
    assert!(checkpoint_path(&out.path().join("full"), 3).exists());
    let log = std::fs::read_to_string(out.path().join("full/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    for (line, r) in log.lines().zip(&full_reports) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "adv", "hrfpl", "rec", "total"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["step"].as_u64().unwrap(), r.step);
    }

    // Stop at 3, resume to 6.
    let half_cfg = TrainConfig { total_steps: 3, ..train_config(1e-3) };
    let mut half = TrainState::new(&gen_config(), &half_cfg, &hash, DType::F32, &Device::Cpu).unwrap();
    let ckpt = train(&mut half, &loader, &out.path().join("half"), |_| {}).unwrap();
    let mut resumed = resume(&ckpt, &gen_config(), &train_config(1e-3), &hash, false, &Device::Cpu).unwrap();
    let mut tail = Vec::new();
    train(&mut resumed, &loader, &out.path().join("half"), |r| tail.push(*r)).unwrap();
    assert_eq!(tail, full_reports[3..]);

    // Changing a hyperparameter is refused unless forced.
    let other = TrainConfig { learning_rate: 5e-4, ..train_config(1e-3) };
    match resume(&ckpt, &gen_config(), &other, &hash, false, &Device::Cpu) {
        Err(Error::ConfigMismatch(fields)) => assert_eq!(fields, ["train.learning_rate"]),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched resume was accepted"),
    }
    assert!(resume(&ckpt, &gen_config(), &other, &hash, true, &Device::Cpu).is_ok());
    assert!(matches!(
        resume(&ckpt, &gen_config(), &train_config(1e-3), "different", false, &Device::Cpu),
        Err(Error::ConfigMismatch(_))
    ));
}

#[test]
fn checkpoint_stores_the_config_echo() {
    let s = state(1e-3);
    let c = s.to_checkpoint().unwrap();
    let echo: serde_json::Value = serde_json::from_str(&c.config_echo).unwrap();
    assert_eq!(echo["generator"]["resolution"], 16);
    assert_eq!(echo["train"]["batch_size"], 2);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.ckpt");
    c.write(&p).unwrap();
    assert_eq!(Checkpoint::read(&p).unwrap(), c);
}
