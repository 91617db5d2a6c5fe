//! End-to-end acceptance gate. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. The CIFAR-10 smoke run only happens when
//! `PRELAX_CIFAR_DIR` points at the binary batches.

use std::time::{Duration, Instant};

use prelax::augment::{sample_pretext, AugmentConfig, RotationLabel, ViewBundle};
use prelax::autograd::Mode;
use prelax::checks::{gradient_suite, stopgrad_ema_suite, tiny_batch, tiny_model};
use prelax::data::{CifarVariant, DatasetSpec, LabeledDataset, Split, SyntheticScheme};
use prelax::eval::*;
use prelax::losses::*;
use prelax::model::NetworkSet;
use prelax::trainer::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn timed(limit: Duration, f: impl FnOnce() -> Verdict) -> Verdict {
    let t = Instant::now();
    let v = f();
    let el = t.elapsed();
    verdict(v.passed && el <= limit, format!("{}; {:.2}s of {}s", v.detail, el.as_secs_f64(), limit.as_secs()))
}

fn uniform(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

// oracles written from the definitions, independent of the library

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn sim_oracle(p: &[f64], z: &[f64]) -> f64 {
    unit(p).iter().zip(unit(z)).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn exhaustive(query: &[f64], table: &EmbeddingTable, k: usize) -> Vec<u64> {
    let mut all: Vec<(f64, u64)> = (0..table.len()).map(|i| (cosine_oracle(query, table.row(i)), table.ids()[i])).collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.truncate(k);
    all.into_iter().map(|(_, id)| id).collect()
}

fn reduction_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut oracle) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (p, g, z) = (uniform(&mut rng, 64), uniform(&mut rng, 64), uniform(&mut rng, 64));
        let r = r2s_loss(&p, &g, &z, 0.0).unwrap();
        worst = worst.max((r - sim_loss(&p, &z).unwrap()).abs());
        oracle = oracle.max((r - sim_oracle(&p, &z)).abs());
    }
    verdict(worst <= 1e-9 && oracle <= 1e-9, format!("max |r2s - sim| {worst:.1e}, vs oracle {oracle:.1e}"))
}

fn representation_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let zp = uniform(&mut rng, 64);
        let z = uniform(&mut rng, 64);
        let r: Vec<f64> = zp.iter().zip(&z).map(|(a, b)| a - b).collect();
        worst = worst.max(r2s_loss(&zp, &r, &z, 1.0).unwrap().abs());
    }
    verdict(worst <= 1e-9, format!("max loss {worst:.1e}"))
}

fn suite_verdict(outcomes: Vec<prelax::checks::CheckOutcome>) -> Verdict {
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).map(|o| format!("{}: {}", o.name, o.detail)).collect();
    if failed.is_empty() {
        let names: Vec<_> = outcomes.iter().map(|o| o.name.as_str()).collect();
        verdict(true, names.join(", "))
    } else {
        verdict(false, failed.join("; "))
    }
}

fn ablation_wiring() -> Verdict {
    let cfg = TrainConfig {
        model: tiny_model(),
        ..Default::default()
    };
    let net = NetworkSet::new(&cfg.model, cfg.target_rule(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let b = tiny_batch(&net, 4, 6).unwrap();
    let (c, o) = (Coefficients::default(), LossOptions::default());
    let mut bad = Vec::new();
    for (row, names) in [
        ("Sim + PL", vec!["sim", "pl"]),
        ("Sim + R2S", vec!["sim", "r2s"]),
        ("R3S + RotPL", vec!["r3s", "rotpl"]),
        ("Sim + PL + R2S", vec!["sim", "r2s", "pl"]),
        ("Sim + RotPL + R3S", vec!["sim", "r3s", "rotpl"]),
    ] {
        let t = Toggles::named(row).unwrap();
        let out = ablation_compose(&net, &b, &t, &c, &o, None, Mode::Train).unwrap();
        if out.breakdown.active.names() != names {
            bad.push(format!("{row} activates {:?}", out.breakdown.active.names()));
        }
    }
    let full = |row: &str| {
        let out = ablation_compose(&net, &b, &Toggles::named(row).unwrap(), &c, &o, None, Mode::Train).unwrap();
        out.breakdown.total
    };
    let std_total = prelax_std(&net, &b, &c, &o, None, Mode::Train).unwrap().breakdown.total;
    let rot_total = prelax_rot(&net, &b, &c, &o, None, Mode::Train).unwrap().breakdown.total;
    if (full("Sim + PL + R2S") - std_total).abs() > 1e-12 {
        bad.push("full std row differs from prelax_std".into());
    }
    if (full("Sim + RotPL + R3S") - rot_total).abs() > 1e-12 {
        bad.push("full rot row differs from prelax_rot".into());
    }
    if bad.is_empty() {
        verdict(true, "5 rows, full rows equal the composites")
    } else {
        verdict(false, bad.join("; "))
    }
}

fn tied_table(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingTable {
    let mut values: Vec<Vec<f64>> = Vec::new();
    for i in 0..rows {
        let r = match rng.random_range(0..4) {
            0 if i > 0 => {
                let s = [0.5, 2.0, 4.0][rng.random_range(0..3)];
                values[rng.random_range(0..i)].iter().map(|v| v * s).collect()
            }
            1 if i > 0 => values[rng.random_range(0..i)].clone(),
            _ => uniform(rng, dim),
        };
        values.push(r);
    }
    let mut ids: Vec<u64> = (0..rows as u64).collect();
    for i in (1..rows).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    EmbeddingTable::new(dim, ids, None, values.concat()).unwrap()
}

fn knn_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ties = 0;
    for t in 0..100 {
        let rows = rng.random_range(1..=64);
        let dim = rng.random_range(1..=32);
        let table = tied_table(rows, dim, &mut rng);
        let k = rng.random_range(1..=rows);
        let q_row = table.row(rng.random_range(0..rows)).to_vec();
        for q in [q_row, uniform(&mut rng, dim)] {
            let want = exhaustive(&q, &table, k);
            let cos: Vec<f64> = (0..rows).map(|i| cosine_oracle(&q, table.row(i))).collect();
            ties += (0..rows).any(|i| (i + 1..rows).any(|j| cos[i] == cos[j])) as usize;
            let got = knn_retrieve(&q, &table, k).unwrap();
            if got != want {
                return verdict(false, format!("table {t}: {got:?} vs {want:?}"));
            }
        }
    }
    verdict(ties > 0, format!("200 queries over 100 tables, {ties} with tied scores"))
}

struct ToyRun {
    trained: Vec<MetricsRecord>,
    rotation: f64,
    probe: f64,
    random_probe: f64,
    degenerate_norm: f64,
    seconds: f64,
}

fn probe(net: &NetworkSet, train: &LabeledDataset, test: &LabeledDataset) -> f64 {
    let a = extract_embeddings(net, train, Pooling::PreProjector).unwrap();
    let b = extract_embeddings(net, test, Pooling::PreProjector).unwrap();
    linear_probe(&a, &b, &ProbeConfig::default()).unwrap()
}

/// Prelax-rot on the four-class synthetic gratings, shared by the rotation,
/// probe and residual-norm criteria.
fn toy_run() -> ToyRun {
    let t = Instant::now();
    let spec = DatasetSpec::Synthetic {
        n_train: 2048,
        n_test: 512,
        classes: 4,
        size: 32,
        seed: 7,
        scheme: SyntheticScheme::default(),
    };
    let train = spec.load(Split::Train).unwrap();
    let test = spec.load(Split::Test).unwrap();
    let cfg = TrainConfig {
        variant: Variant::PrelaxRot,
        epochs: 50,
        batch_size: 64,
        ..Default::default()
    };
    let aug = AugmentConfig::default();
    let opts = PretrainOptions {
        deterministic: true,
        ..Default::default()
    };
    let out = pretrain(&cfg, &aug, &train, &opts).unwrap();
    let seconds = t.elapsed().as_secs_f64();

    let rotation = rotation_accuracy(&out.net, &test, &aug, 99).unwrap();
    let trained_probe = probe(&out.net, &train, &test);
    let mut random = NetworkSet::new(&cfg.model, cfg.target_rule(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let (m, s) = train.channel_stats();
    random.set_input_normalization(m, s).unwrap();
    let random_probe = probe(&random, &train, &test);

    // both views from one record and no rotation: nothing to encode
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bundles: Vec<_> = test.images()[..16]
        .iter()
        .map(|img| {
            let (_, rec) = sample_pretext(&mut rng, &aug, img.size());
            ViewBundle::from_records(img, &aug, rec.clone(), rec, Some(RotationLabel::new(0).unwrap())).unwrap()
        })
        .collect();
    let vb = ViewBatch::new(&out.net, &bundles).unwrap();
    let degenerate_norm = prelax_rot(&out.net, &vb, &cfg.coefficients, &cfg.loss, None, Mode::Train)
        .unwrap()
        .residual_norm;

    ToyRun {
        trained: out.metrics,
        rotation,
        probe: trained_probe,
        random_probe,
        degenerate_norm,
        seconds,
    }
}

fn cifar_smoke(dir: &str) -> Verdict {
    let spec = DatasetSpec::Cifar {
        path: dir.into(),
        variant: CifarVariant::Cifar10,
    };
    let train = spec.load(Split::Train).unwrap();
    let test = spec.load(Split::Test).unwrap();
    let run = |variant| {
        let cfg = TrainConfig {
            variant,
            epochs: 40,
            ..Default::default()
        };
        let out = pretrain(&cfg, &AugmentConfig::default(), &train, &PretrainOptions::default()).unwrap();
        probe(&out.net, &train, &test)
    };
    let prelax = run(Variant::PrelaxStd);
    let baseline = run(Variant::BaselineSimsiam);
    verdict(
        prelax >= 0.55 && prelax >= baseline - 0.02,
        format!("prelax_std {prelax:.3}, baseline {baseline:.3}"),
    )
}

fn report(n: usize, name: &str, v: &Verdict) {
    let tag = if v.passed { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {tag} {name} ({})", v.detail);
}

fn main() {
    // `cargo test` passes harness flags such as `--list` or filters; only
    // the bare invocation runs the gate
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }

    let mut all = true;
    let mut show = |n, name, v: Verdict| {
        report(n, name, &v);
        all &= v.passed;
    };
    std::thread::scope(|s| {
        let long = s.spawn(toy_run);

        show(1, "reduction identity", timed(Duration::from_secs(1), reduction_identity));
        show(2, "representation identity", timed(Duration::from_secs(1), representation_identity));
        show(3, "gradient correctness", timed(Duration::from_secs(120), || suite_verdict(gradient_suite())));
        show(4, "detachment and EMA", timed(Duration::from_secs(30), || suite_verdict(stopgrad_ema_suite())));
        show(7, "ablation wiring", timed(Duration::from_secs(10), ablation_wiring));
        show(9, "kNN oracle equivalence", timed(Duration::from_secs(5), knn_equivalence));

        let run = long.join().unwrap();
        let within = run.seconds <= 20.0 * 60.0;
        show(
            5,
            "rotation learnability",
            verdict(
                run.rotation >= 0.9 && within,
                format!("held-out rotation accuracy {:.3}; trained in {:.0}s", run.rotation, run.seconds),
            ),
        );
        show(
            6,
            "toy representation quality",
            verdict(
                run.probe >= 0.9 && run.probe - run.random_probe >= 0.15,
                format!("probe {:.3}, random encoder {:.3}", run.probe, run.random_probe),
            ),
        );
        let norms_ok = run.trained.len() == 50 && run.trained.iter().all(|m| m.residual_norm.is_finite() && m.residual_norm > 0.0);
        let (lo, hi) = run
            .trained
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), m| (lo.min(m.residual_norm), hi.max(m.residual_norm)));
        show(
            8,
            "residual-norm logging",
            verdict(
                norms_ok && run.degenerate_norm == 0.0,
                format!("{} epochs, norms in [{lo:.3}, {hi:.3}], degenerate {}", run.trained.len(), run.degenerate_norm),
            ),
        );
    });

    match std::env::var("PRELAX_CIFAR_DIR") {
        Ok(dir) => show(10, "CIFAR-10 smoke", cifar_smoke(&dir)),
        Err(_) => println!("criterion 10 SKIP CIFAR-10 smoke (set PRELAX_CIFAR_DIR to run)"),
    }

    if !all {
        std::process::exit(1);
    }
}
