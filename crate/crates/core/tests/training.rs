use prelax::augment::{sample_pretext, AugmentConfig, Image, RotationLabel, ViewBundle};
use prelax::checkpoint::Checkpoint;
use prelax::data::{synthetic_dataset, LabeledDataset, SyntheticScheme};
use prelax::eval::{extract_embeddings, Pooling};
use prelax::losses::ViewBatch;
use prelax::model::{BackboneSpec, ModelConfig, NetworkSet};
use prelax::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg(variant: Variant, epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        variant,
        epochs,
        batch_size: batch,
        model: ModelConfig {
            input_size: 16,
            backbone: BackboneSpec::SmallConv { widths: [4, 8, 8] },
            proj_hidden: 16,
            d_z: 8,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn aug16() -> AugmentConfig {
    AugmentConfig {
        output_size: 16,
        ..Default::default()
    }
}

fn data(n: usize) -> LabeledDataset {
    synthetic_dataset(n, 4, 16, 1, &SyntheticScheme::default()).unwrap()
}

#[test]
fn eight_images_in_batches_of_four_take_two_steps() {
    let out = pretrain(&small_cfg(Variant::PrelaxStd, 1, 4), &aug16(), &data(8), &PretrainOptions::default()).unwrap();
    assert_eq!(out.steps, 2);
    assert_eq!(out.metrics.len(), 1);
    assert_eq!(out.metrics[0].step, 2);
    // the remainder is dropped
    let out = pretrain(&small_cfg(Variant::PrelaxStd, 1, 3), &aug16(), &data(8), &PretrainOptions::default()).unwrap();
    assert_eq!(out.steps, 2);
}

#[test]
fn deterministic_runs_write_identical_logs() {
    let cfg = small_cfg(Variant::PrelaxAll, 2, 8);
    let ds = data(32);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let opts = PretrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            deterministic: true,
            prefetch: 0,
        };
        pretrain(&cfg, &aug16(), &ds, &opts).unwrap();
        (
            std::fs::read(dir.path().join(METRICS_FILE)).unwrap(),
            std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap(),
        )
    };
    let (m1, c1) = run();
    let (m2, c2) = run();
    assert!(!m1.is_empty());
    assert_eq!(m1, m2);
    assert_eq!(c1, c2);
}

#[test]
fn prefetching_does_not_change_what_is_learned() {
    let cfg = small_cfg(Variant::PrelaxRot, 2, 8);
    let ds = data(32);
    let go = |deterministic| {
        pretrain(
            &cfg,
            &aug16(),
            &ds,
            &PretrainOptions {
                deterministic,
                prefetch: 3,
                ..Default::default()
            },
        )
        .unwrap()
    };
    let (a, b) = (go(true), go(false));
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(x.loss, y.loss);
        assert_eq!(x.residual_norm, y.residual_norm);
    }
    assert_eq!(a.net.online().checksum(), b.net.online().checksum());
}

#[test]
fn baseline_logs_only_the_similarity_term() {
    let out = pretrain(&small_cfg(Variant::BaselineSimsiam, 2, 8), &aug16(), &data(16), &PretrainOptions::default()).unwrap();
    for m in &out.metrics {
        assert_eq!(m.loss.active.names(), vec!["sim"]);
        assert_eq!(m.tau, 0.0);
    }
}

#[test]
fn metrics_carry_finite_positive_residual_norms() {
    let dir = tempfile::tempdir().unwrap();
    let opts = PretrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        deterministic: true,
        prefetch: 0,
    };
    let mut cfg = small_cfg(Variant::PrelaxRot, 3, 8);
    cfg.target_rule = Some(TargetRuleKind::Ema);
    pretrain(&cfg, &aug16(), &data(32), &opts).unwrap();
    let log = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log.len(), 3);
    for (e, m) in log.iter().enumerate() {
        assert_eq!(m.epoch, e);
        assert!(m.residual_norm.is_finite() && m.residual_norm > 0.0);
        assert!(m.loss.is_finite());
        assert!(m.tau >= 0.996 && m.tau <= 1.0);
        assert_eq!(m.wall_time, 0.0);
    }
    assert_eq!(log.last().unwrap().tau, 1.0);
}

#[test]
fn degenerate_bundles_have_zero_residual_in_a_step() {
    let cfg = small_cfg(Variant::PrelaxAll, 1, 4);
    let net = NetworkSet::new(&cfg.model, cfg.target_rule(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bundles: Vec<_> = (0..4)
        .map(|_| {
            let img = Image::new(16, (0..768).map(|_| rng.random()).collect()).unwrap();
            let (_, rec) = sample_pretext(&mut rng, &aug16(), 16);
            ViewBundle::from_records(&img, &aug16(), rec.clone(), rec, Some(RotationLabel::new(0).unwrap())).unwrap()
        })
        .collect();
    let batch = ViewBatch::new(&net, &bundles).unwrap();
    let mut trainer = Trainer::new(cfg, net, 1).unwrap();
    let report = trainer.step(&batch).unwrap();
    assert_eq!(report.residual_norm, 0.0);
}

#[test]
fn checkpoints_round_trip_and_restore() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(Variant::PrelaxStd, 2, 8);
    cfg.target_rule = Some(TargetRuleKind::Ema);
    let ds = data(16);
    let opts = PretrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        deterministic: true,
        prefetch: 0,
    };
    let out = pretrain(&cfg, &aug16(), &ds, &opts).unwrap();
    let path = out.checkpoint.unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.config, cfg);
    assert!(ck.target.is_some());
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());

    // values are stored as f32
    let restored = ck.restore().unwrap();
    let a = extract_embeddings(&out.net, &ds, Pooling::PostProjector).unwrap();
    let b = extract_embeddings(&restored, &ds, Pooling::PostProjector).unwrap();
    for (x, y) in a.values().iter().zip(b.values()) {
        assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn invalid_configs_name_the_field() {
    let mut cfg = small_cfg(Variant::PrelaxStd, 1, 4);
    cfg.coefficients.alpha = 1.5;
    let e = pretrain(&cfg, &aug16(), &data(8), &PretrainOptions::default()).err().unwrap();
    assert!(e.to_string().contains("train.coefficients.alpha"), "{e}");
    let mut cfg = small_cfg(Variant::PrelaxRot, 1, 4);
    cfg.loss.symmetrize = true;
    let e = pretrain(&cfg, &aug16(), &data(8), &PretrainOptions::default()).err().unwrap();
    assert!(e.to_string().contains("train.loss.symmetrize"), "{e}");
}
