//! Self-contained property suites run by `prelax check`.
//!
//! Each suite returns one [`CheckOutcome`] per property so callers can print
//! a table and decide the exit status.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{make_bundle, rotate90, AugmentConfig, Image, RotationLabel, ViewMode};
use crate::autograd::Mode;
use crate::error::Result;
use crate::losses::{
    compute_targets, margin_loss, normalize, r2s_loss, sim_loss, Coefficients, TargetReps, ViewBatch,
};
use crate::model::{tau_schedule, BackboneSpec, ModelConfig, NetworkSet, PredictorSpec, TargetRule};
use crate::params::{ParamGroup, ParamId};
use crate::tensor::Tensor;
use crate::trainer::{evaluate_objective, TargetRuleKind, TrainConfig, Trainer, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(suite: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            suite,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(suite: &'static str, name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(suite, name, passed, detail),
            Err(e) => Self::new(suite, name, false, format!("error: {e}")),
        }
    }
}

pub const SUITES: [&str; 4] = ["loss_identities", "gradients", "stopgrad_ema", "rotation_group"];

/// Runs every suite in order.
pub fn run_all() -> Vec<CheckOutcome> {
    let mut out = loss_identity_suite(0);
    out.extend(gradient_suite());
    out.extend(stopgrad_ema_suite());
    out.extend(rotation_group_suite(0));
    out
}

fn uniform(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

/// Closed-form identities of the alignment losses.
pub fn loss_identity_suite(seed: u64) -> Vec<CheckOutcome> {
    const S: &str = "loss_identities";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    let reduction = (0..1000).try_for_each(|_| -> Result<()> {
        let p = uniform(&mut rng, 64);
        let gr = uniform(&mut rng, 64);
        let z = uniform(&mut rng, 64);
        worst = worst.max((r2s_loss(&p, &gr, &z, 0.0)? - sim_loss(&p, &z)?).abs());
        Ok(())
    });
    out.push(CheckOutcome::from_result(
        S,
        "r2s(alpha=0) == sim",
        reduction.map(|_| (worst <= 1e-9, format!("max |diff| {worst:.2e}"))),
    ));

    let mut worst = 0.0f64;
    let identity = (0..1000).try_for_each(|_| -> Result<()> {
        let zp = uniform(&mut rng, 64);
        let z = uniform(&mut rng, 64);
        let r: Vec<f64> = zp.iter().zip(&z).map(|(a, b)| a - b).collect();
        worst = worst.max(r2s_loss(&zp, &r, &z, 1.0)?.abs());
        Ok(())
    });
    out.push(CheckOutcome::from_result(
        S,
        "r2s(z', z'-z, z) == 0",
        identity.map(|_| (worst <= 1e-9, format!("max loss {worst:.2e}"))),
    ));

    let v = uniform(&mut rng, 16);
    let n = normalize(&v);
    let norm: f64 = n.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tiny = normalize(&[1e-13, 0.0]);
    out.push(CheckOutcome::new(
        S,
        "normalize",
        (norm - 1.0).abs() <= 1e-12 && !n.degenerate && tiny.degenerate && tiny.vector == vec![1e-13, 0.0],
        format!("|n(v)| = {norm:.15}"),
    ));

    let margin = (|| -> Result<(bool, String)> {
        let p = uniform(&mut rng, 8);
        let m_same = margin_loss(&p, &p, 0.5)?;
        let neg: Vec<f64> = p.iter().map(|x| -x).collect();
        let m_opp = margin_loss(&p, &neg, 0.5)?;
        Ok((
            m_same.abs() <= 1e-12 && (m_opp - 3.5).abs() <= 1e-12,
            format!("aligned {m_same:.2e}, opposite {m_opp:.6}"),
        ))
    })();
    out.push(CheckOutcome::from_result(S, "margin hinge", margin));
    out
}

/// The two-layer network used by the gradient and detachment suites.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_size: 8,
        backbone: BackboneSpec::Mlp { hidden: 16 },
        proj_hidden: 16,
        d_z: 8,
        predictor: PredictorSpec::Mlp { hidden: 8 },
        ..Default::default()
    }
}

/// Random views of random 8x8 images carrying every view kind.
pub fn tiny_batch(net: &NetworkSet, n: usize, seed: u64) -> Result<ViewBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = net.config().input_size;
    let aug = AugmentConfig {
        output_size: size,
        ..Default::default()
    };
    let bundles = (0..n)
        .map(|_| {
            let img = Image::new(size, (0..3 * size * size).map(|_| rng.random()).collect())?;
            make_bundle(&img, &mut rng, &aug, ViewMode::All)
        })
        .collect::<Result<Vec<_>>>()?;
    ViewBatch::new(net, &bundles)
}

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|a - n| / max(|a|, |n|, floor)` over the compared scalars.
    pub max_rel_error: f64,
    pub worst: String,
    /// Scalars compared.
    pub scalars: usize,
    /// Scalars whose perturbation moved a ReLU input across zero; the
    /// central difference does not estimate a derivative there.
    pub kinks: usize,
}

impl GradCheck {
    /// At most 1% of scalars may sit at kinks, so a broken activation cannot
    /// hide behind the exclusion.
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol && self.kinks * 100 <= self.scalars + self.kinks
    }
}

/// Compares analytic parameter gradients with central differences over every
/// trainable scalar, holding the targets fixed. Differences at `h` and `2h`
/// are Richardson-combined; near a kink the plain `h^2` truncation error can
/// exceed a small gradient.
pub fn finite_difference_check(
    cfg: &TrainConfig,
    net: &mut NetworkSet,
    batch: &ViewBatch,
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let frozen: TargetReps = compute_targets(net, batch, Mode::Train)?;
    let out = evaluate_objective(cfg, net, batch, Some(&frozen), Mode::Train)?;
    let pattern = out.graph.relu_pattern();
    let grads = out.graph.backward(out.loss);
    let analytic: HashMap<ParamId, Tensor> = grads.params().clone();
    let ids: Vec<ParamId> = net.online().trainable_ids().collect();
    let eval = |net: &NetworkSet| -> Result<(f64, bool)> {
        let o = evaluate_objective(cfg, net, batch, Some(&frozen), Mode::Train)?;
        Ok((o.graph.value(o.loss).item(), o.graph.relu_pattern() == pattern))
    };
    let mut check = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        scalars: 0,
        kinks: 0,
    };
    for id in ids {
        for i in 0..net.online().get(id).len() {
            let orig = net.online().get(id).data()[i];
            let mut central = |step: f64| -> Result<(f64, bool)> {
                net.online_mut().get_mut(id).data_mut()[i] = orig + step;
                let (up, same_up) = eval(net)?;
                net.online_mut().get_mut(id).data_mut()[i] = orig - step;
                let (down, same_down) = eval(net)?;
                net.online_mut().get_mut(id).data_mut()[i] = orig;
                Ok(((up - down) / (2.0 * step), same_up && same_down))
            };
            let (d1, smooth1) = central(h)?;
            let (d2, smooth2) = central(2.0 * h)?;
            if !(smooth1 && smooth2) {
                check.kinks += 1;
                continue;
            }
            // one Richardson step cancels the h^2 truncation term
            let numeric = (4.0 * d1 - d2) / 3.0;
            let a = analytic.get(&id).map_or(0.0, |t| t.data()[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            check.scalars += 1;
            if rel > check.max_rel_error || !rel.is_finite() {
                check.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                check.worst = format!("{}[{i}]: analytic {a:.6e}, numeric {numeric:.6e}", net.online().entry(id).name);
            }
        }
    }
    Ok(check)
}

fn objective_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        model: tiny_model(),
        coefficients: Coefficients {
            alpha: 0.7,
            gamma: 0.3,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Analytic gradients of every composite objective against central
/// differences on the tiny network.
pub fn gradient_suite() -> Vec<CheckOutcome> {
    const S: &str = "gradients";
    [
        ("prelax_std", Variant::PrelaxStd),
        ("prelax_rot", Variant::PrelaxRot),
        ("prelax_all", Variant::PrelaxAll),
        ("simsiam_dual", Variant::BaselineSimsiam),
        ("margin_dual", Variant::MarginBaseline),
    ]
    .into_iter()
    .map(|(name, variant)| {
        let r = (|| {
            let cfg = objective_config(variant);
            let mut net = NetworkSet::new(&cfg.model, cfg.target_rule(), &mut ChaCha8Rng::seed_from_u64(1))?;
            let batch = tiny_batch(&net, 4, 2)?;
            let c = finite_difference_check(&cfg, &mut net, &batch, 1e-5, 1e-6)?;
            Ok((
                c.passed(1e-4),
                format!(
                    "max rel err {:.2e} over {} scalars, {} at kinks ({})",
                    c.max_rel_error, c.scalars, c.kinks, c.worst
                ),
            ))
        })();
        CheckOutcome::from_result(S, name, r)
    })
    .collect()
}

/// Parameter gradients with live targets must equal those with the same
/// targets fed in as constants, bit for bit.
fn target_paths_carry_no_gradient(cfg: &TrainConfig, net: &NetworkSet, batch: &ViewBatch) -> Result<(bool, String)> {
    let live = evaluate_objective(cfg, net, batch, None, Mode::Train)?;
    let frozen = compute_targets(net, batch, Mode::Train)?;
    let fixed = evaluate_objective(cfg, net, batch, Some(&frozen), Mode::Train)?;
    let a = live.graph.backward(live.loss);
    let b = fixed.graph.backward(fixed.loss);
    if live.target_nodes.iter().any(|&v| live.graph.requires_grad(v)) {
        return Ok((false, "a target node requires grad".into()));
    }
    if a.params().len() != b.params().len() {
        return Ok((false, "different parameter sets receive gradients".into()));
    }
    for (id, ga) in a.params() {
        match b.params().get(id) {
            Some(gb) if gb.data() == ga.data() => {}
            _ => return Ok((false, format!("gradient of `{}` depends on the target path", net.online().entry(*id).name))),
        }
    }
    Ok((true, format!("{} parameters identical", a.params().len())))
}

/// Runs `steps` optimizer steps, checking detachment before each one and the
/// exact EMA recurrence after each one.
pub fn run_detachment_steps(rule: TargetRuleKind, steps: usize, seed: u64) -> Result<(bool, String)> {
    let cfg = TrainConfig {
        target_rule: Some(rule),
        base_lr: 0.1,
        ..objective_config(Variant::PrelaxAll)
    };
    let net = NetworkSet::new(&cfg.model, cfg.target_rule(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut trainer = Trainer::new(cfg.clone(), net, steps)?;
    for s in 0..steps {
        let batch = tiny_batch(trainer.network(), 4, seed.wrapping_add(s as u64 + 1))?;
        let (ok, detail) = target_paths_carry_no_gradient(&cfg, trainer.network(), &batch)?;
        if !ok {
            return Ok((false, format!("step {s}: {detail}")));
        }
        let before = trainer.network().target_store().clone();
        let report = trainer.step(&batch)?;
        let net = trainer.network();
        match net.rule() {
            TargetRule::StopGradient => {
                if !std::ptr::eq(net.target_store(), net.online()) {
                    return Ok((false, "stop-gradient target is a separate copy".into()));
                }
            }
            TargetRule::Ema { .. } => {
                let tau = report.tau;
                for ((old, new), on) in before
                    .entries()
                    .iter()
                    .zip(net.target_store().entries())
                    .zip(net.online().entries())
                {
                    let expect: Vec<f64> = if on.group != ParamGroup::Encoder {
                        old.value.data().to_vec()
                    } else if on.kind.trainable() {
                        old.value.data().iter().zip(on.value.data()).map(|(t, o)| tau * t + (1.0 - tau) * o).collect()
                    } else if on.kind.is_copied_state() {
                        on.value.data().to_vec()
                    } else {
                        old.value.data().to_vec()
                    };
                    if new.value.data() != expect.as_slice() {
                        return Ok((false, format!("step {s}: EMA recurrence broken at `{}`", on.name)));
                    }
                }
            }
        }
    }
    Ok((true, format!("{steps} steps")))
}

/// Stop-gradient detachment, the EMA recurrence and the decay schedule.
pub fn stopgrad_ema_suite() -> Vec<CheckOutcome> {
    const S: &str = "stopgrad_ema";
    let mut out = vec![
        CheckOutcome::from_result(S, "stop-gradient detachment", run_detachment_steps(TargetRuleKind::StopGradient, 10, 3)),
        CheckOutcome::from_result(S, "ema detachment + recurrence", run_detachment_steps(TargetRuleKind::Ema, 10, 4)),
    ];
    let ends = (|| {
        let a = tau_schedule(0, 100, 0.996)?;
        let b = tau_schedule(100, 100, 0.996)?;
        Ok((a == 0.996 && b == 1.0, format!("tau(0) = {a}, tau(T) = {b}")))
    })();
    out.push(CheckOutcome::from_result(S, "tau schedule endpoints", ends));
    out
}

/// Quarter turns form the cyclic group of order four and act as clockwise
/// pixel permutations.
pub fn rotation_group_suite(seed: u64) -> Vec<CheckOutcome> {
    const S: &str = "rotation_group";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = (|| -> Result<(bool, String)> {
        for size in [1, 2, 5, 8] {
            let img = Image::new(size, (0..3 * size * size).map(|_| rng.random()).collect())?;
            if rotate90(&img, 0)? != img {
                return Ok((false, "rotation by 0 is not the identity".into()));
            }
            for a in 0..4 {
                for b in 0..4 {
                    if rotate90(&rotate90(&img, a)?, b)? != rotate90(&img, (a + b) % 4)? {
                        return Ok((false, format!("r{a} then r{b} != r{}", (a + b) % 4)));
                    }
                }
            }
            let r1 = rotate90(&img, 1)?;
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        if r1.get(c, y, x) != img.get(c, size - 1 - x, y) {
                            return Ok((false, format!("quarter turn is not clockwise at size {size}")));
                        }
                    }
                }
            }
        }
        Ok((true, "closure, identity, orientation".into()))
    })();
    let labels = (0..4).all(|k| RotationLabel::new(k).map(|l| l.degrees() == 90 * k as u32).unwrap_or(false))
        && RotationLabel::new(4).is_err();
    vec![
        CheckOutcome::from_result(S, "cyclic group", r),
        CheckOutcome::new(S, "labels", labels, "0/90/180/270, 4 rejected"),
    ]
}
