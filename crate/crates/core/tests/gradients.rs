use prelax::augment::{make_bundle, AugmentConfig, Image, ViewMode};
use prelax::autograd::Mode;
use prelax::losses::{compute_targets, Coefficients, ViewBatch};
use prelax::model::{tau_schedule, BackboneSpec, ModelConfig, NetworkSet, PredictorSpec};
use prelax::params::ParamGroup;
use prelax::trainer::{evaluate_objective, TargetRuleKind, TrainConfig, Trainer, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(variant: Variant, rule: TargetRuleKind) -> TrainConfig {
    TrainConfig {
        variant,
        target_rule: Some(rule),
        coefficients: Coefficients {
            alpha: 0.6,
            gamma: 0.4,
            gamma1: 0.3,
            gamma2: 0.2,
            ..Default::default()
        },
        model: ModelConfig {
            input_size: 8,
            backbone: BackboneSpec::Mlp { hidden: 16 },
            proj_hidden: 16,
            d_z: 8,
            predictor: PredictorSpec::Mlp { hidden: 8 },
            ..Default::default()
        },
        base_lr: 0.1,
        ..Default::default()
    }
}

fn views(net: &NetworkSet, n: usize, seed: u64) -> ViewBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug = AugmentConfig {
        output_size: 8,
        ..Default::default()
    };
    let bundles: Vec<_> = (0..n)
        .map(|_| {
            let img = Image::new(8, (0..192).map(|_| rng.random()).collect()).unwrap();
            make_bundle(&img, &mut rng, &aug, ViewMode::All).unwrap()
        })
        .collect();
    ViewBatch::new(net, &bundles).unwrap()
}

/// Max relative error of analytic vs central-difference gradients over all
/// trainable scalars, skipping scalars whose probe crosses a ReLU kink.
fn max_fd_error(cfg: &TrainConfig, seed: u64) -> (f64, usize, usize) {
    let mut net = NetworkSet::new(&cfg.model, cfg.target_rule(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let b = views(&net, 4, seed + 100);
    let frozen = compute_targets(&net, &b, Mode::Train).unwrap();
    let out = evaluate_objective(cfg, &net, &b, Some(&frozen), Mode::Train).unwrap();
    let pattern = out.graph.relu_pattern();
    let grads = out.graph.backward(out.loss);
    let f = |net: &NetworkSet| {
        let o = evaluate_objective(cfg, net, &b, Some(&frozen), Mode::Train).unwrap();
        (o.graph.value(o.loss).item(), o.graph.relu_pattern() == pattern)
    };
    let h = 1e-5;
    let (mut worst, mut n, mut kinks) = (0.0f64, 0, 0);
    let ids: Vec<_> = net.online().trainable_ids().collect();
    for id in ids {
        for i in 0..net.online().get(id).len() {
            let x = net.online().get(id).data()[i];
            let mut at = |d: f64| {
                net.online_mut().get_mut(id).data_mut()[i] = x + d;
                let r = f(&net);
                net.online_mut().get_mut(id).data_mut()[i] = x;
                r
            };
            let (p1, s1) = at(h);
            let (m1, s2) = at(-h);
            let (p2, s3) = at(2.0 * h);
            let (m2, s4) = at(-2.0 * h);
            if !(s1 && s2 && s3 && s4) {
                kinks += 1;
                continue;
            }
            let numeric = (4.0 * (p1 - m1) / (2.0 * h) - (p2 - m2) / (4.0 * h)) / 3.0;
            let analytic = grads.param(id).map_or(0.0, |t| t.data()[i]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            n += 1;
        }
    }
    (worst, n, kinks)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for variant in [
        Variant::PrelaxStd,
        Variant::PrelaxRot,
        Variant::PrelaxAll,
        Variant::BaselineSimsiam,
        Variant::MarginBaseline,
    ] {
        for seed in [0, 1] {
            let (err, n, kinks) = max_fd_error(&config(variant, TargetRuleKind::StopGradient), seed);
            assert!(n > 4000, "{variant:?}: only {n} scalars compared");
            assert!(kinks * 100 <= n, "{variant:?}: {kinks} kinks");
            assert!(err <= 1e-4, "{variant:?} seed {seed}: max relative error {err:.3e}");
        }
    }
}

#[test]
fn detached_targets_receive_no_gradient() {
    for rule in [TargetRuleKind::StopGradient, TargetRuleKind::Ema] {
        let cfg = config(Variant::PrelaxAll, rule);
        let net = NetworkSet::new(&cfg.model, cfg.target_rule(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut trainer = Trainer::new(cfg.clone(), net, 10).unwrap();
        for step in 0..10 {
            let b = views(trainer.network(), 4, step);
            let live = evaluate_objective(&cfg, trainer.network(), &b, None, Mode::Train).unwrap();
            assert!(!live.target_nodes.is_empty());
            for &v in &live.target_nodes {
                assert!(!live.graph.requires_grad(v));
            }
            let frozen = compute_targets(trainer.network(), &b, Mode::Train).unwrap();
            let fixed = evaluate_objective(&cfg, trainer.network(), &b, Some(&frozen), Mode::Train).unwrap();
            let (ga, gb) = (live.graph.backward(live.loss), fixed.graph.backward(fixed.loss));
            assert_eq!(ga.params().len(), gb.params().len());
            for (id, t) in ga.params() {
                assert_eq!(t.data(), gb.param(*id).unwrap().data(), "{rule:?} step {step}");
            }
            trainer.step(&b).unwrap();
        }
    }
}

#[test]
fn ema_targets_follow_the_recurrence_exactly() {
    let cfg = config(Variant::PrelaxStd, TargetRuleKind::Ema);
    let net = NetworkSet::new(&cfg.model, cfg.target_rule(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let steps = 10;
    let mut trainer = Trainer::new(cfg, net, steps).unwrap();
    for s in 0..steps {
        let b = views(trainer.network(), 4, 50 + s as u64);
        let target_before = trainer.network().target_store().clone();
        let report = trainer.step(&b).unwrap();
        let tau = tau_schedule(s + 1, steps, 0.996).unwrap();
        assert_eq!(report.tau, tau);
        let net = trainer.network();
        for ((old, new), online) in target_before
            .entries()
            .iter()
            .zip(net.target_store().entries())
            .zip(net.online().entries())
        {
            for ((t0, t1), o) in old.value.data().iter().zip(new.value.data()).zip(online.value.data()) {
                let want = if online.group != ParamGroup::Encoder {
                    *t0
                } else if online.kind.trainable() {
                    tau * t0 + (1.0 - tau) * o
                } else if online.kind.is_copied_state() {
                    *o
                } else {
                    *t0
                };
                assert_eq!(*t1, want, "{} at step {s}", online.name);
            }
        }
    }
    // the last step ends the schedule at 1: targets stop moving
    assert_eq!(tau_schedule(steps, steps, 0.996).unwrap(), 1.0);
}

#[test]
fn stop_gradient_target_is_the_online_store() {
    let cfg = config(Variant::PrelaxRot, TargetRuleKind::StopGradient);
    let net = NetworkSet::new(&cfg.model, cfg.target_rule(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut trainer = Trainer::new(cfg, net, 3).unwrap();
    for s in 0..3 {
        let b = views(trainer.network(), 4, s);
        trainer.step(&b).unwrap();
        let net = trainer.network();
        assert!(std::ptr::eq(net.target_store(), net.online()));
    }
}

#[test]
fn tau_schedule_endpoints() {
    assert_eq!(tau_schedule(0, 500, 0.996).unwrap(), 0.996);
    assert_eq!(tau_schedule(500, 500, 0.996).unwrap(), 1.0);
    let mid = tau_schedule(250, 500, 0.996).unwrap();
    assert!((mid - 0.998).abs() < 1e-12);
}
