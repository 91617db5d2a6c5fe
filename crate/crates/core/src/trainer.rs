//! Pretraining: SGD with momentum, cosine learning rate, target updates,
//! per-epoch metrics and checkpoints.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_bundle, AugmentConfig, ViewBundle, ViewMode};
use crate::autograd::Mode;
use crate::checkpoint::Checkpoint;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{
    ablation_compose, margin_dual, prelax_all, prelax_rot, prelax_std, simsiam_dual, Coefficients,
    LossBreakdown, LossOptions, ObjectiveOutput, TargetReps, Toggles, ViewBatch,
};
use crate::model::{tau_schedule, ModelConfig, NetworkSet, TargetRule};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    BaselineSimsiam,
    BaselineByol,
    PrelaxStd,
    PrelaxRot,
    PrelaxAll,
    MarginBaseline,
    /// Uses `TrainConfig::toggles`.
    Ablation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRuleKind {
    StopGradient,
    Ema,
}

/// Only SGD is implemented; the field keeps room for LARS.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub toggles: Toggles,
    pub coefficients: Coefficients,
    pub loss: LossOptions,
    /// Defaults to EMA for `baseline_byol`, stop-gradient otherwise.
    pub target_rule: Option<TargetRuleKind>,
    pub tau_base: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Skip biases and normalization parameters in weight decay. Defaults to
    /// on for `baseline_byol`, off otherwise.
    pub decay_mask: Option<bool>,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Checkpoint interval in epochs; defaults to `max(1, epochs / 10)`.
    pub checkpoint_every: Option<usize>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::PrelaxStd,
            toggles: Toggles::default(),
            coefficients: Coefficients::default(),
            loss: LossOptions::default(),
            target_rule: None,
            tau_base: 0.996,
            epochs: 50,
            batch_size: 64,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_mask: None,
            optimizer: Optimizer::Sgd,
            seed: 0,
            checkpoint_every: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn target_rule(&self) -> TargetRule {
        let kind = self.target_rule.unwrap_or(match self.variant {
            Variant::BaselineByol => TargetRuleKind::Ema,
            _ => TargetRuleKind::StopGradient,
        });
        match kind {
            TargetRuleKind::StopGradient => TargetRule::StopGradient,
            TargetRuleKind::Ema => TargetRule::Ema {
                tau_base: self.tau_base,
            },
        }
    }

    pub fn decay_mask(&self) -> bool {
        self.decay_mask
            .unwrap_or(self.variant == Variant::BaselineByol)
    }

    pub fn view_mode(&self) -> ViewMode {
        match self.variant {
            Variant::BaselineSimsiam | Variant::BaselineByol | Variant::MarginBaseline => ViewMode::Baseline,
            Variant::PrelaxStd => ViewMode::Std,
            Variant::PrelaxRot => ViewMode::Rot,
            Variant::PrelaxAll => ViewMode::All,
            Variant::Ablation if self.toggles.needs_rotation() => ViewMode::Rot,
            Variant::Ablation => ViewMode::Std,
        }
    }

    pub fn checkpoint_every(&self) -> usize {
        self.checkpoint_every.unwrap_or((self.epochs / 10).max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.coefficients.validate()?;
        self.model.validate()?;
        self.target_rule().validate()?;
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be finite and >= 0"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("train.checkpoint_every", "must be positive"));
        }
        if self.variant == Variant::Ablation && !self.toggles.any() {
            return Err(Error::config("train.toggles", "ablation needs at least one term"));
        }
        if self.loss.symmetrize && self.variant != Variant::PrelaxStd {
            return Err(Error::config("train.loss.symmetrize", "only supported by prelax_std"));
        }
        Ok(())
    }
}

/// Evaluates the configured objective on one batch.
pub fn evaluate_objective(
    cfg: &TrainConfig,
    net: &NetworkSet,
    batch: &ViewBatch,
    frozen: Option<&TargetReps>,
    mode: Mode,
) -> Result<ObjectiveOutput> {
    let c = &cfg.coefficients;
    let o = &cfg.loss;
    match cfg.variant {
        Variant::BaselineSimsiam | Variant::BaselineByol => simsiam_dual(net, batch, frozen, mode),
        Variant::MarginBaseline => margin_dual(net, batch, c.eta, frozen, mode),
        Variant::PrelaxStd => prelax_std(net, batch, c, o, frozen, mode),
        Variant::PrelaxRot => prelax_rot(net, batch, c, o, frozen, mode),
        Variant::PrelaxAll => prelax_all(net, batch, c, o, frozen, mode),
        Variant::Ablation => ablation_compose(net, batch, &cfg.toggles, c, o, frozen, mode),
    }
}

/// `base_lr * (cos(pi * step / total) + 1) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    base_lr * ((std::f64::consts::PI * step as f64 / total_steps as f64).cos() + 1.0) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Skip decay on biases and normalization parameters.
    pub decay_mask: bool,
}

/// `v <- momentum * v + g + wd * theta; theta <- theta - lr * v` for every
/// parameter that received a gradient. All gradients are checked before
/// anything is written, so a non-finite gradient leaves the store untouched.
pub fn sgd_step(
    store: &mut ParamStore,
    grads: &HashMap<ParamId, Tensor>,
    velocity: &mut HashMap<ParamId, Tensor>,
    hp: &SgdConfig,
) -> Result<()> {
    let mut ids: Vec<ParamId> = grads.keys().copied().filter(|id| store.entry(*id).kind.trainable()).collect();
    ids.sort();
    for &id in &ids {
        let g = &grads[&id];
        if g.shape() != store.get(id).shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                expected: store.get(id).shape().to_vec(),
                actual: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                param: store.entry(id).name.clone(),
            });
        }
    }
    for id in ids {
        let e = store.entry(id);
        let wd = if hp.decay_mask && e.kind.is_bias_or_norm() {
            0.0
        } else {
            hp.weight_decay
        };
        let g = &grads[&id];
        let v = velocity.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
        let theta = store.get_mut(id);
        for ((p, vi), gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = hp.momentum * *vi + gi + wd * *p;
            *p -= hp.lr * *vi;
        }
    }
    Ok(())
}

/// One epoch's log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// EMA decay of the epoch's last step; 0 under stop-gradient, whose
    /// target is the online network itself.
    pub tau: f64,
    /// Epoch means of every term.
    pub loss: LossBreakdown,
    pub residual_norm: f64,
    /// Seconds since the run started; 0 in deterministic mode.
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    pub residual_norm: f64,
    pub lr: f64,
    pub tau: f64,
}

/// Optimizer state around a [`NetworkSet`].
pub struct Trainer {
    cfg: TrainConfig,
    net: NetworkSet,
    velocity: HashMap<ParamId, Tensor>,
    step: usize,
    total_steps: usize,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, net: NetworkSet, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        if net.rule() != cfg.target_rule() {
            return Err(Error::Contract("network target rule differs from the config".into()));
        }
        Ok(Self {
            cfg,
            net,
            velocity: HashMap::new(),
            step: 0,
            total_steps: total_steps.max(1),
            epoch: 0,
        })
    }

    pub fn network(&self) -> &NetworkSet {
        &self.net
    }

    pub fn into_network(self) -> NetworkSet {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimizer step plus the target update.
    pub fn step(&mut self, batch: &ViewBatch) -> Result<StepReport> {
        let lr = cosine_lr(self.step, self.total_steps, self.cfg.base_lr);
        let mut out = evaluate_objective(&self.cfg, &self.net, batch, None, Mode::Train)?;
        if !out.breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                step: self.step,
            });
        }
        let grads = out.graph.backward(out.loss);
        self.net.apply_stat_updates(&mut out.graph);
        let hp = SgdConfig {
            lr,
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
            decay_mask: self.cfg.decay_mask(),
        };
        sgd_step(self.net.online_mut(), grads.params(), &mut self.velocity, &hp)?;
        self.step += 1;
        let tau = match self.net.rule() {
            TargetRule::Ema { tau_base } => {
                let tau = tau_schedule(self.step.min(self.total_steps), self.total_steps, tau_base)?;
                self.net.ema_update(tau)?;
                tau
            }
            TargetRule::StopGradient => 0.0,
        };
        Ok(StepReport {
            breakdown: out.breakdown,
            residual_norm: out.residual_norm,
            lr,
            tau,
        })
    }

    /// Like [`Trainer::step`], then verifies the EMA recurrence on a few
    /// randomly chosen encoder scalars against values recorded before the
    /// update.
    fn step_with_ema_check<R: Rng>(&mut self, batch: &ViewBatch, rng: &mut R, probes: usize) -> Result<StepReport> {
        let TargetRule::Ema { .. } = self.net.rule() else {
            return self.step(batch);
        };
        let candidates: Vec<ParamId> = self
            .net
            .online()
            .trainable_ids()
            .filter(|&id| self.net.online().entry(id).group == ParamGroup::Encoder)
            .collect();
        let picks: Vec<(ParamId, usize)> = (0..probes)
            .map(|_| {
                let id = candidates[rng.random_range(0..candidates.len())];
                (id, rng.random_range(0..self.net.online().get(id).len()))
            })
            .collect();
        let before: Vec<f64> = picks
            .iter()
            .map(|&(id, i)| self.net.target_store().get(id).data()[i])
            .collect();
        let report = self.step(batch)?;
        for (&(id, i), old) in picks.iter().zip(before) {
            let online = self.net.online().get(id).data()[i];
            let want = report.tau * old + (1.0 - report.tau) * online;
            let got = self.net.target_store().get(id).data()[i];
            if got != want {
                return Err(Error::Contract(format!(
                    "EMA recurrence violated for `{}`[{i}]: {got} != {want}",
                    self.net.online().entry(id).name
                )));
            }
        }
        Ok(report)
    }
}

/// Runtime knobs that do not change what is learned.
#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Metrics log and checkpoint destination; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Build views on the training thread and log zero wall time.
    pub deterministic: bool,
    /// Prefetch queue depth in batches (0 picks 2).
    pub prefetch: usize,
}

pub struct PretrainOutcome {
    pub net: NetworkSet,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoint: Option<PathBuf>,
    pub steps: usize,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.prlx";

/// Derives an independent stream seed.
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n / batch` full batches (the remainder is dropped), at least one.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    (n / batch).max(1)
}

/// Bundles of one epoch in order. Each batch has its own RNG stream, so the
/// result does not depend on which thread builds it.
fn epoch_batches(
    data: &LabeledDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Vec<(usize, Vec<usize>)> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, u64::MAX));
    order.shuffle(&mut rng);
    let per = cfg.batch_size.min(data.len());
    (0..steps_per_epoch(data.len(), cfg.batch_size))
        .map(|b| (b, order[b * per..(b + 1) * per].to_vec()))
        .collect()
}

fn build_bundles(
    data: &LabeledDataset,
    aug: &AugmentConfig,
    cfg: &TrainConfig,
    epoch: usize,
    batch: usize,
    idx: &[usize],
) -> Result<Vec<ViewBundle>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, batch as u64));
    let mode = cfg.view_mode();
    idx.iter()
        .map(|&i| make_bundle(&data.images()[i], &mut rng, aug, mode))
        .collect()
}

/// Trains from scratch on `data`.
pub fn pretrain(
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    data: &LabeledDataset,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if data.is_empty() {
        return Err(Error::config("dataset", "training set is empty"));
    }
    if data.image_size() != Some(cfg.model.input_size) || aug.output_size != cfg.model.input_size {
        return Err(Error::config(
            "train.model.input_size",
            format!(
                "model expects {}, images are {:?}, augmentation emits {}",
                cfg.model.input_size,
                data.image_size(),
                aug.output_size
            ),
        ));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = NetworkSet::new(&cfg.model, cfg.target_rule(), &mut init_rng)?;
    let (mean, std) = data.channel_stats();
    net.set_input_normalization(mean, std)?;

    let steps = steps_per_epoch(data.len(), cfg.batch_size);
    let total = steps * cfg.epochs;
    let mut trainer = Trainer::new(cfg.clone(), net, total)?;

    let mut log: Option<File> = None;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(METRICS_FILE);
        log = Some(
            OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?,
        );
    }
    let ckpt_path = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        trainer.epoch = epoch;
        let plan = epoch_batches(data, cfg, epoch);
        let mut check_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0xe3a));
        let mut sum = LossBreakdown::default();
        let mut rn_sum = 0.0;
        let mut last: Option<StepReport> = None;
        let n_batches = plan.len();

        let mut consume = |b: usize, bundles: Vec<ViewBundle>, trainer: &mut Trainer| -> Result<()> {
            let batch = ViewBatch::new(trainer.network(), &bundles)?;
            let report = if b + 1 == n_batches {
                trainer.step_with_ema_check(&batch, &mut check_rng, 3)?
            } else {
                trainer.step(&batch)?
            };
            sum.accumulate(&report.breakdown);
            rn_sum += report.residual_norm;
            last = Some(report);
            Ok(())
        };

        if opts.deterministic {
            for (b, idx) in &plan {
                let bundles = build_bundles(data, aug, cfg, epoch, *b, idx)?;
                consume(*b, bundles, &mut trainer)?;
            }
        } else {
            let depth = if opts.prefetch == 0 { 2 } else { opts.prefetch };
            std::thread::scope(|s| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel::<Result<(usize, Vec<ViewBundle>)>>(depth);
                let plan_ref = &plan;
                s.spawn(move || {
                    for (b, idx) in plan_ref {
                        let item = build_bundles(data, aug, cfg, epoch, *b, idx).map(|v| (*b, v));
                        if tx.send(item).is_err() {
                            break;
                        }
                    }
                });
                for item in rx.iter() {
                    let (b, bundles) = item?;
                    consume(b, bundles, &mut trainer)?;
                }
                Ok(())
            })?;
        }

        if let TargetRule::StopGradient = trainer.network().rule() {
            // the target is the online store, not a copy that could drift
            if !std::ptr::eq(trainer.network().target_store(), trainer.network().online()) {
                return Err(Error::Contract("stop-gradient target detached from online parameters".into()));
            }
        }

        let last = last.expect("at least one step per epoch");
        let k = n_batches as f64;
        let record = MetricsRecord {
            epoch,
            step: trainer.steps_done(),
            lr: last.lr,
            tau: last.tau,
            loss: sum.scaled(1.0 / k),
            residual_norm: rn_sum / k,
            wall_time: if opts.deterministic {
                0.0
            } else {
                start.elapsed().as_secs_f64()
            },
        };
        if let (Some(f), Some(dir)) = (log.as_mut(), &opts.out_dir) {
            let line = serde_json::to_string(&record).map_err(|e| Error::Contract(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
            f.flush().map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
        }
        log::info!(
            "epoch {epoch}: loss {:.4} residual {:.4} lr {:.4}",
            record.loss.total,
            record.residual_norm,
            record.lr
        );
        metrics.push(record);

        let final_epoch = epoch + 1 == cfg.epochs;
        if let Some(p) = &ckpt_path {
            if final_epoch || (epoch + 1) % cfg.checkpoint_every() == 0 {
                Checkpoint::capture(cfg, trainer.network()).save(p)?;
            }
        }
    }

    Ok(PretrainOutcome {
        steps: trainer.steps_done(),
        net: trainer.into_network(),
        metrics,
        checkpoint: ckpt_path,
    })
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: i as u64,
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
