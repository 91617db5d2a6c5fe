use prelax::augment::{make_bundle, sample_pretext, AugmentConfig, Image, RotationLabel, ViewBundle, ViewMode};
use prelax::autograd::{Graph, Mode};
use prelax::losses::*;
use prelax::model::{BackboneSpec, ModelConfig, NetworkSet, PredictorSpec, TargetRule};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// independent scalar oracles

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sim_oracle(p: &[f64], z: &[f64]) -> f64 {
    sq_dist(&unit(p), &unit(z))
}

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn alpha_zero_recovers_alignment(p in vec_strategy(64), g in vec_strategy(64), z in vec_strategy(64)) {
        let a = r2s_loss(&p, &g, &z, 0.0).unwrap();
        let b = sim_loss(&p, &z).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn relaxing_the_true_residual_aligns_exactly(zp in vec_strategy(32), z in vec_strategy(32)) {
        let r: Vec<f64> = zp.iter().zip(&z).map(|(a, b)| a - b).collect();
        prop_assert!(r2s_loss(&zp, &r, &z, 1.0).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn sim_matches_oracle_and_range(p in vec_strategy(16), z in vec_strategy(16)) {
        let s = sim_loss(&p, &z).unwrap();
        prop_assert!((s - sim_oracle(&p, &z)).abs() <= 1e-12);
        prop_assert!((0.0..=4.0 + 1e-12).contains(&s));
    }

    #[test]
    fn sim_is_scale_invariant(p in vec_strategy(8), z in vec_strategy(8), k in 0.01f64..100.0) {
        prop_assume!(p.iter().any(|v| v.abs() > 1e-3) && z.iter().any(|v| v.abs() > 1e-3));
        let scaled: Vec<f64> = p.iter().map(|v| v * k).collect();
        prop_assert!((sim_loss(&scaled, &z).unwrap() - sim_loss(&p, &z).unwrap()).abs() <= 1e-10);
    }

    #[test]
    fn margin_is_shifted_hinge(p in vec_strategy(8), z in vec_strategy(8), eta in 0.01f64..2.0) {
        let want = (sim_oracle(&p, &z) - eta).max(0.0);
        prop_assert!((margin_loss(&p, &z, eta).unwrap() - want).abs() <= 1e-12);
    }

    #[test]
    fn normalize_gives_unit_norm(v in vec_strategy(12)) {
        let n = normalize(&v);
        let norm: f64 = n.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n.degenerate {
            prop_assert_eq!(n.vector, v);
        } else {
            prop_assert!((norm - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn scalar_examples() {
    let n = normalize(&[3.0, 4.0]);
    assert!((n.vector[0] - 0.6).abs() < 1e-15 && (n.vector[1] - 0.8).abs() < 1e-15);
    assert!(normalize(&[0.0, 0.0]).degenerate);
    assert!((sim_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2.0).abs() < 1e-15);
    assert_eq!(sim_loss(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    assert!(r2s_loss(&[1.0, 0.0], &[1.0, -1.0], &[0.0, 1.0], 1.0).unwrap().abs() < 1e-15);
    // softmax cross entropy of (1, 0, 0, 0) at class 0
    let e = std::f64::consts::E;
    assert!((rotpl_loss(&[1.0, 0.0, 0.0, 0.0], 0).unwrap() + (e / (e + 3.0)).ln()).abs() < 1e-12);
    assert!((rotpl_loss(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
    assert!((margin_loss(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap() - 1.5).abs() < 1e-15);
}

// objectives on a small network

fn small_net(predictor: PredictorSpec, seed: u64) -> NetworkSet {
    let cfg = ModelConfig {
        input_size: 8,
        backbone: BackboneSpec::Mlp { hidden: 16 },
        proj_hidden: 16,
        d_z: 8,
        predictor,
        ..Default::default()
    };
    NetworkSet::new(&cfg, TargetRule::StopGradient, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn aug8() -> AugmentConfig {
    AugmentConfig {
        output_size: 8,
        ..Default::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng) -> Image {
    Image::new(8, (0..3 * 64).map(|_| rng.random()).collect()).unwrap()
}

fn batch(net: &NetworkSet, mode: ViewMode, n: usize, seed: u64) -> ViewBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundles: Vec<ViewBundle> = (0..n)
        .map(|_| {
            let img = random_image(&mut rng);
            make_bundle(&img, &mut rng, &aug8(), mode).unwrap()
        })
        .collect();
    ViewBatch::new(net, &bundles).unwrap()
}

/// Bundles whose two views share one plan and whose rotation is 0.
fn degenerate_batch(net: &NetworkSet, n: usize, seed: u64) -> ViewBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundles: Vec<ViewBundle> = (0..n)
        .map(|_| {
            let img = random_image(&mut rng);
            let (_, rec) = sample_pretext(&mut rng, &aug8(), 8);
            ViewBundle::from_records(&img, &aug8(), rec.clone(), rec, Some(RotationLabel::new(0).unwrap())).unwrap()
        })
        .collect();
    ViewBatch::new(net, &bundles).unwrap()
}

fn coeffs(alpha: f64, beta: f64, gamma: f64) -> Coefficients {
    Coefficients {
        alpha,
        beta,
        gamma,
        alpha1: alpha,
        alpha2: alpha,
        gamma1: gamma,
        gamma2: gamma,
        ..Default::default()
    }
}

fn total(o: &ObjectiveOutput) -> f64 {
    o.graph.value(o.loss).item()
}

#[test]
fn std_reduces_to_the_dual_pair() {
    let net = small_net(PredictorSpec::Mlp { hidden: 8 }, 1);
    let b = batch(&net, ViewMode::Std, 6, 2);
    let std = prelax_std(&net, &b, &coeffs(0.0, 1.0, 0.0), &LossOptions::default(), None, Mode::Train).unwrap();
    let dual = simsiam_dual(&net, &b, None, Mode::Train).unwrap();
    assert!((total(&std) - total(&dual)).abs() <= 1e-12, "{} vs {}", total(&std), total(&dual));
}

#[test]
fn reverse_flag_is_invisible_at_alpha_zero() {
    let net = small_net(PredictorSpec::Mlp { hidden: 8 }, 3);
    let b = batch(&net, ViewMode::Std, 6, 4);
    for gamma in [0.0, 0.1, 1.0] {
        let run = |reverse| {
            let opts = LossOptions {
                reverse_residual: reverse,
                ..Default::default()
            };
            total(&prelax_std(&net, &b, &coeffs(0.0, 1.0, gamma), &opts, None, Mode::Train).unwrap())
        };
        assert!((run(false) - run(true)).abs() <= 1e-12, "gamma {gamma}");
    }
    // with relaxation on, the flag matters
    let opts = LossOptions {
        reverse_residual: true,
        ..Default::default()
    };
    let a = total(&prelax_std(&net, &b, &coeffs(1.0, 1.0, 0.1), &LossOptions::default(), None, Mode::Train).unwrap());
    let r = total(&prelax_std(&net, &b, &coeffs(1.0, 1.0, 0.1), &opts, None, Mode::Train).unwrap());
    assert!((a - r).abs() > 1e-9);
}

#[test]
fn identical_views_zero_the_residual() {
    let net = small_net(PredictorSpec::Identity, 5);
    let b = degenerate_batch(&net, 4, 6);
    let out = prelax_std(&net, &b, &coeffs(1.0, 1.0, 0.1), &LossOptions::default(), None, Mode::Train).unwrap();
    assert_eq!(out.residual_norm, 0.0);
    // r = 0 so R2S is plain alignment; with x1 == x2 both directions agree
    assert!((out.breakdown.r2s - out.breakdown.sim).abs() <= 1e-12);
    // PL equals the head's loss on a zero residual
    let mut g = Graph::new();
    let zero = g.constant(prelax::tensor::Tensor::zeros(&[4, 8]));
    let logits = net.predict_pretext(&mut g, zero).unwrap();
    let (ce, mse) = pl_terms(&mut g, &logits, &b.t1).unwrap();
    assert!((g.value(ce).item() - out.breakdown.pl_ce).abs() <= 1e-12);
    assert!((g.value(mse).item() - out.breakdown.pl_mse).abs() <= 1e-12);

    let rot = prelax_rot(&net, &b, &coeffs(1.0, 1.0, 0.1), &LossOptions::default(), None, Mode::Train).unwrap();
    assert_eq!(rot.residual_norm, 0.0);
    let all = prelax_all(&net, &b, &coeffs(1.0, 1.0, 0.1), &LossOptions::default(), None, Mode::Train).unwrap();
    assert_eq!(all.residual_norm, 0.0);
}

#[test]
fn rotation_objective_needs_the_rotation_view() {
    let net = small_net(PredictorSpec::Mlp { hidden: 8 }, 7);
    let b = batch(&net, ViewMode::Std, 4, 8);
    assert!(prelax_rot(&net, &b, &Coefficients::default(), &LossOptions::default(), None, Mode::Train).is_err());
    assert!(prelax_all(&net, &b, &Coefficients::default(), &LossOptions::default(), None, Mode::Train).is_err());
}

#[test]
fn all_reduces_to_pure_alignment() {
    let net = small_net(PredictorSpec::Mlp { hidden: 8 }, 9);
    let b = batch(&net, ViewMode::All, 6, 10);
    let out = prelax_all(&net, &b, &coeffs(0.0, 1.0, 0.0), &LossOptions::default(), None, Mode::Train).unwrap();
    let bd = &out.breakdown;
    assert!((bd.total - (0.5 * (bd.r2s + bd.r3s) + bd.sim)).abs() <= 1e-12);
    assert_eq!(bd.weights.pl, 0.0);
    assert_eq!(bd.weights.rotpl, 0.0);
}

fn assert_recombines(o: &ObjectiveOutput) {
    let bd = &o.breakdown;
    let t = total(o);
    assert!((bd.total - t).abs() <= 1e-12 * t.abs().max(1.0));
    assert!((bd.recombine() - t).abs() <= 1e-6 * t.abs().max(1e-12), "{} vs {t}", bd.recombine());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn breakdowns_recombine(seed in 0u64..1000, alpha in 0.0f64..=1.0, beta in 0.0f64..2.0, gamma in 0.0f64..2.0) {
        let net = small_net(PredictorSpec::Mlp { hidden: 8 }, seed);
        let b = batch(&net, ViewMode::All, 4, seed + 1);
        let c = Coefficients { alpha, beta, gamma, alpha1: alpha, alpha2: 1.0 - alpha, gamma1: gamma, gamma2: gamma / 2.0, ..Default::default() };
        let o = LossOptions::default();
        assert_recombines(&prelax_std(&net, &b, &c, &o, None, Mode::Train).unwrap());
        assert_recombines(&prelax_rot(&net, &b, &c, &o, None, Mode::Train).unwrap());
        assert_recombines(&prelax_all(&net, &b, &c, &o, None, Mode::Train).unwrap());
        assert_recombines(&simsiam_dual(&net, &b, None, Mode::Train).unwrap());
        assert_recombines(&margin_dual(&net, &b, 0.5, None, Mode::Train).unwrap());
    }

    #[test]
    fn ablation_activates_exactly_the_toggled_terms(bits in 1u8..32, seed in 0u64..100) {
        let t = Toggles { sim: bits & 1 != 0, pl: bits & 2 != 0, r2s: bits & 4 != 0, r3s: bits & 8 != 0, rotpl: bits & 16 != 0 };
        let net = small_net(PredictorSpec::Mlp { hidden: 8 }, seed);
        let b = batch(&net, ViewMode::All, 4, seed);
        let out = ablation_compose(&net, &b, &t, &Coefficients::default(), &LossOptions::default(), None, Mode::Train).unwrap();
        let a = out.breakdown.active;
        prop_assert_eq!((a.sim, a.pl, a.r2s, a.r3s, a.rotpl, a.margin), (t.sim, t.pl, t.r2s, t.r3s, t.rotpl, false));
        prop_assert_eq!(out.breakdown.no_similarity_constraint, !t.sim);
        assert_recombines(&out);
    }
}

#[test]
fn ablation_rows_and_sim_only() {
    let net = small_net(PredictorSpec::Mlp { hidden: 8 }, 11);
    let b = batch(&net, ViewMode::All, 4, 12);
    let c = Coefficients::default();
    let o = LossOptions::default();
    for (row, names) in [
        ("Sim + PL", vec!["sim", "pl"]),
        ("Sim + R2S", vec!["sim", "r2s"]),
        ("R3S + RotPL", vec!["r3s", "rotpl"]),
        ("Sim + PL + R2S", vec!["sim", "r2s", "pl"]),
        ("Sim + RotPL + R3S", vec!["sim", "r3s", "rotpl"]),
    ] {
        let t = Toggles::named(row).unwrap();
        let out = ablation_compose(&net, &b, &t, &c, &o, None, Mode::Train).unwrap();
        assert_eq!(out.breakdown.active.names(), names, "{row}");
    }
    // the full rows match the composites
    let full_std = Toggles::named("Sim + PL + R2S").unwrap();
    let a = ablation_compose(&net, &b, &full_std, &c, &o, None, Mode::Train).unwrap();
    let s = prelax_std(&net, &b, &c, &o, None, Mode::Train).unwrap();
    assert!((total(&a) - total(&s)).abs() <= 1e-12);
    let full_rot = Toggles::named("Sim + RotPL + R3S").unwrap();
    let a = ablation_compose(&net, &b, &full_rot, &c, &o, None, Mode::Train).unwrap();
    let r = prelax_rot(&net, &b, &c, &o, None, Mode::Train).unwrap();
    assert!((total(&a) - total(&r)).abs() <= 1e-12);
    // sim alone is the dual pair
    let a = ablation_compose(&net, &b, &Toggles::named("Sim").unwrap(), &c, &o, None, Mode::Train).unwrap();
    let d = simsiam_dual(&net, &b, None, Mode::Train).unwrap();
    assert!((total(&a) - total(&d)).abs() <= 1e-12);
    // no toggles, or rotation terms without the rotation view, are rejected
    assert!(ablation_compose(&net, &b, &Toggles::default(), &c, &o, None, Mode::Train).is_err());
    let std_only = batch(&net, ViewMode::Std, 4, 13);
    assert!(ablation_compose(&net, &std_only, &full_rot, &c, &o, None, Mode::Train).is_err());
}
