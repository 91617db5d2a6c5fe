//! Alignment, relaxation and pretext losses, and the composite objectives
//! built from them.
//!
//! Two layers live here. The slice functions ([`sim_loss`], [`r2s_loss`],
//! [`pl_loss`], ...) evaluate one sample and are the reference definitions.
//! The composites ([`simsiam_dual`], [`prelax_std`], [`prelax_rot`],
//! [`prelax_all`], [`margin_dual`], [`ablation_compose`]) build a batched,
//! differentiable graph over a [`ViewBatch`]; every batch reduction is a mean.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::augment::{encode_targets, Image, ViewBundle, NUM_CONTINUOUS, NUM_DISCRETE, NUM_ROTATIONS};
use crate::autograd::{Graph, Mode, Var, NORM_FLOOR};
use crate::error::{Error, Result};
use crate::model::{NetworkSet, OnlineOutput, TargetRule};
use crate::tensor::Tensor;

static R2S_SIGN_FAULT: AtomicBool = AtomicBool::new(false);

/// Test hook: flips the sign of the relaxation term in every R2S/R3S
/// evaluation until switched off again.
#[doc(hidden)]
pub fn set_r2s_sign_fault(on: bool) {
    R2S_SIGN_FAULT.store(on, Ordering::SeqCst);
}

fn relax_sign() -> f64 {
    if R2S_SIGN_FAULT.load(Ordering::SeqCst) {
        1.0
    } else {
        -1.0
    }
}

/// Where the unit-sphere projection is applied in the relaxed losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// `|| n(p - a*g) - n(z) ||^2`
    #[default]
    Composite,
    /// `|| n(p) - a*n(g) - n(z) ||^2`
    EndpointsOnly,
    /// `|| p - a*g - z ||^2`
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f64>,
    /// Norm fell below the floor; the input was returned unchanged.
    pub degenerate: bool,
}

pub fn normalize(v: &[f64]) -> Normalized {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < NORM_FLOOR {
        Normalized {
            vector: v.to_vec(),
            degenerate: true,
        }
    } else {
        Normalized {
            vector: v.iter().map(|x| x / n).collect(),
            degenerate: false,
        }
    }
}

fn check_dims(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `|| n(p) - n(z) ||^2`, in `[0, 4]`.
pub fn sim_loss(p: &[f64], z_target: &[f64]) -> Result<f64> {
    check_dims("sim_loss", p, z_target)?;
    Ok(sq_dist(&normalize(p).vector, &normalize(z_target).vector))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config("alpha", format!("{alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Residual-relaxed similarity of `p - alpha * g_r` against `z_target`.
pub fn r2s_loss(p: &[f64], g_r: &[f64], z_target: &[f64], alpha: f64) -> Result<f64> {
    r2s_loss_with(p, g_r, z_target, alpha, NormalizationMode::Composite)
}

pub fn r2s_loss_with(
    p: &[f64],
    g_r: &[f64],
    z_target: &[f64],
    alpha: f64,
    mode: NormalizationMode,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_dims("r2s_loss", p, g_r)?;
    check_dims("r2s_loss", p, z_target)?;
    let s = relax_sign() * alpha;
    Ok(match mode {
        NormalizationMode::Composite => {
            let d: Vec<f64> = p.iter().zip(g_r).map(|(a, b)| a + s * b).collect();
            sq_dist(&normalize(&d).vector, &normalize(z_target).vector)
        }
        NormalizationMode::EndpointsOnly => {
            let (np, ng) = (normalize(p).vector, normalize(g_r).vector);
            let d: Vec<f64> = np.iter().zip(&ng).map(|(a, b)| a + s * b).collect();
            sq_dist(&d, &normalize(z_target).vector)
        }
        NormalizationMode::None => {
            let d: Vec<f64> = p.iter().zip(g_r).map(|(a, b)| a + s * b).collect();
            sq_dist(&d, z_target)
        }
    })
}

fn cross_entropy(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(Error::Contract(format!(
            "target class {class} out of range for {} logits",
            logits.len()
        )));
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(lse - logits[class])
}

/// Sum of per-variable cross entropies and the squared error of the
/// continuous block, for one sample.
pub fn pl_loss(
    logits: &[Vec<f64>],
    continuous_pred: &[f64],
    categorical: &[usize],
    continuous: &[f64],
) -> Result<(f64, f64)> {
    if logits.len() != categorical.len() {
        return Err(Error::ShapeMismatch {
            op: "pl_loss",
            expected: vec![categorical.len()],
            actual: vec![logits.len()],
        });
    }
    check_dims("pl_loss", continuous_pred, continuous)?;
    let ce = logits
        .iter()
        .zip(categorical)
        .map(|(l, &c)| cross_entropy(l, c))
        .sum::<Result<f64>>()?;
    Ok((ce, sq_dist(continuous_pred, continuous)))
}

pub fn rotpl_loss(rot_logits: &[f64], class: usize) -> Result<f64> {
    if rot_logits.len() != NUM_ROTATIONS {
        return Err(Error::ShapeMismatch {
            op: "rotpl_loss",
            expected: vec![NUM_ROTATIONS],
            actual: vec![rot_logits.len()],
        });
    }
    cross_entropy(rot_logits, class)
}

fn check_eta(eta: f64) -> Result<()> {
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::config("eta", format!("margin must be > 0, got {eta}")));
    }
    Ok(())
}

/// `max(sim_loss - eta, 0)`.
pub fn margin_loss(p: &[f64], z_target: &[f64], eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok((sim_loss(p, z_target)? - eta).max(0.0))
}

/// One alignment instance: the online side `p`, an optional predicted
/// residual `g_r`, and the detached target.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentInputs<'a> {
    pub p: &'a [f64],
    pub g_r: Option<&'a [f64]>,
    pub z_target: &'a [f64],
}

impl AlignmentInputs<'_> {
    /// Plain similarity without a residual, relaxed similarity with one.
    pub fn loss(&self, alpha: f64, mode: NormalizationMode) -> Result<f64> {
        match self.g_r {
            Some(g) => r2s_loss_with(self.p, g, self.z_target, alpha, mode),
            None => sim_loss(self.p, self.z_target),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Coefficients {
    pub alpha: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub gamma: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Margin threshold of the margin objective.
    pub eta: f64,
    /// Tolerance of the similarity constraint. The Lagrangian form with a
    /// fixed `beta` absorbs it; kept for the record only.
    pub epsilon: Option<f64>,
}

impl Default for Coefficients {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            beta: 1.0,
            gamma: 0.1,
            gamma1: 0.1,
            gamma2: 0.1,
            eta: 0.5,
            epsilon: None,
        }
    }
}

impl Coefficients {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha", self.alpha), ("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config(format!("train.coefficients.{name}"), format!("{a} outside [0, 1]")));
            }
        }
        for (name, c) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
        ] {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::config(format!("train.coefficients.{name}"), format!("{c} must be finite and >= 0")));
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("train.coefficients.eta", "must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub sim: bool,
    pub pl: bool,
    pub r2s: bool,
    pub r3s: bool,
    pub rotpl: bool,
}

impl Toggles {
    pub fn any(&self) -> bool {
        self.sim || self.pl || self.r2s || self.r3s || self.rotpl
    }

    pub fn needs_rotation(&self) -> bool {
        self.r3s || self.rotpl
    }

    /// Rows of the component ablation, by name.
    pub fn named(row: &str) -> Option<Self> {
        let t = |sim, pl, r2s, r3s, rotpl| Toggles { sim, pl, r2s, r3s, rotpl };
        Some(match row {
            "Sim" => t(true, false, false, false, false),
            "Sim + PL" => t(true, true, false, false, false),
            "Sim + R2S" => t(true, false, true, false, false),
            "R2S + PL" => t(false, true, true, false, false),
            "Sim + PL + R2S" => t(true, true, true, false, false),
            "Sim + RotPL" => t(true, false, false, false, true),
            "Sim + R3S" => t(true, false, false, true, false),
            "R3S + RotPL" => t(false, false, false, true, true),
            "Sim + RotPL + R3S" => t(true, false, false, true, true),
            _ => return None,
        })
    }
}

/// Weight each term carries in `total`. `pl` scales both `pl_ce` and `pl_mse`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub sim: f64,
    pub r2s: f64,
    pub r3s: f64,
    pub pl: f64,
    pub rotpl: f64,
    pub margin: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveTerms {
    pub sim: bool,
    pub r2s: bool,
    pub r3s: bool,
    pub pl: bool,
    pub rotpl: bool,
    pub margin: bool,
}

impl ActiveTerms {
    pub fn names(&self) -> Vec<&'static str> {
        [
            ("sim", self.sim),
            ("r2s", self.r2s),
            ("r3s", self.r3s),
            ("pl", self.pl),
            ("rotpl", self.rotpl),
            ("margin", self.margin),
        ]
        .into_iter()
        .filter_map(|(n, on)| on.then_some(n))
        .collect()
    }
}

/// Per-term values of one objective evaluation. Inactive terms are exactly 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub r2s: f64,
    pub r3s: f64,
    pub pl_ce: f64,
    pub pl_mse: f64,
    pub rotpl: f64,
    pub margin: f64,
    pub total: f64,
    pub weights: TermWeights,
    pub active: ActiveTerms,
    pub coefficients: Coefficients,
    /// Set when no similarity constraint anchors the objective.
    pub no_similarity_constraint: bool,
}

impl LossBreakdown {
    /// Weighted sum of the term fields.
    pub fn recombine(&self) -> f64 {
        let w = &self.weights;
        w.sim * self.sim
            + w.r2s * self.r2s
            + w.r3s * self.r3s
            + w.pl * (self.pl_ce + self.pl_mse)
            + w.rotpl * self.rotpl
            + w.margin * self.margin
    }

    /// Field-wise accumulation used for epoch averages.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.sim += other.sim;
        self.r2s += other.r2s;
        self.r3s += other.r3s;
        self.pl_ce += other.pl_ce;
        self.pl_mse += other.pl_mse;
        self.rotpl += other.rotpl;
        self.margin += other.margin;
        self.total += other.total;
        self.weights = other.weights;
        self.active = other.active;
        self.coefficients = other.coefficients;
        self.no_similarity_constraint = other.no_similarity_constraint;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            sim: self.sim * s,
            r2s: self.r2s * s,
            r3s: self.r3s * s,
            pl_ce: self.pl_ce * s,
            pl_mse: self.pl_mse * s,
            rotpl: self.rotpl * s,
            margin: self.margin * s,
            total: self.total * s,
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.sim, self.r2s, self.r3s, self.pl_ce, self.pl_mse, self.rotpl, self.margin, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Batched pretext targets of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    /// `categorical[v][i]`: class of discrete variable `v` for sample `i`.
    pub categorical: Vec<Vec<usize>>,
    /// `[N, NUM_CONTINUOUS]`
    pub continuous: Tensor,
}

impl TargetBatch {
    fn from_records<'a>(recs: impl Iterator<Item = &'a crate::augment::PretextRecord>) -> Self {
        let mut categorical = vec![Vec::new(); NUM_DISCRETE];
        let mut cont = Vec::new();
        let mut n = 0;
        for r in recs {
            let t = encode_targets(r);
            for (v, c) in t.categorical.iter().enumerate() {
                categorical[v].push(*c);
            }
            cont.extend_from_slice(&t.continuous);
            n += 1;
        }
        Self {
            categorical,
            continuous: Tensor::from_vec(&[n, NUM_CONTINUOUS], cont).expect("continuous targets"),
        }
    }
}

/// A batch of bundles converted to network inputs.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub x1: Tensor,
    pub x2: Tensor,
    pub x3: Option<Tensor>,
    pub t1: TargetBatch,
    pub t2: TargetBatch,
    pub rotation: Option<Vec<usize>>,
}

impl ViewBatch {
    pub fn new(net: &NetworkSet, bundles: &[ViewBundle]) -> Result<Self> {
        if bundles.is_empty() {
            return Err(Error::Contract("empty bundle batch".into()));
        }
        let has_rot = bundles[0].rotated.is_some();
        if bundles.iter().any(|b| b.rotated.is_some() != has_rot) {
            return Err(Error::Contract("bundles disagree on the rotation view".into()));
        }
        let store = net.online();
        let views = |f: &dyn Fn(&ViewBundle) -> &Image| -> Result<Tensor> {
            let imgs: Vec<&Image> = bundles.iter().map(f).collect();
            net.batch_tensor(store, &imgs)
        };
        let x3 = if has_rot {
            Some(views(&|b| b.x3().expect("checked"))?)
        } else {
            None
        };
        Ok(Self {
            x1: views(&|b| &b.x1)?,
            x2: views(&|b| &b.x2)?,
            x3,
            t1: TargetBatch::from_records(bundles.iter().map(|b| &b.t1)),
            t2: TargetBatch::from_records(bundles.iter().map(|b| &b.t2)),
            rotation: has_rot.then(|| bundles.iter().map(|b| b.rotation().unwrap().class()).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.x1.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Detached target-network representations of both views.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetReps {
    pub z1: Tensor,
    pub z2: Tensor,
}

impl ViewBatch {
    /// Every view the batch carries, in the order x1, x2, x3.
    pub fn views(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.x1, &self.x2];
        v.extend(self.x3.as_ref());
        v
    }
}

/// Target representations computed outside any objective graph. All views
/// of the batch are encoded together, as inside the objectives.
pub fn compute_targets(net: &NetworkSet, batch: &ViewBatch, mode: Mode) -> Result<TargetReps> {
    let mut z = net.forward_target_views(&batch.views(), mode)?.into_iter();
    Ok(TargetReps {
        z1: z.next().expect("x1"),
        z2: z.next().expect("x2"),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOptions {
    /// Use `F(x2) - F(x1)` inside the R2S term.
    pub reverse_residual: bool,
    pub normalization: NormalizationMode,
    /// Block the pretext-head gradient from reaching the encoder through `r`.
    pub detach_residual_for_pl: bool,
    /// Average the std objective with its view-swapped mirror.
    pub symmetrize: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            reverse_residual: false,
            normalization: NormalizationMode::Composite,
            detach_residual_for_pl: false,
            symmetrize: false,
        }
    }
}

/// Graph, loss node and bookkeeping of one objective evaluation.
pub struct ObjectiveOutput {
    pub graph: Graph,
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Mean `||r||_2` of the objective's residual(s).
    pub residual_norm: f64,
    /// Nodes carrying the detached target representations.
    pub target_nodes: Vec<Var>,
}

/// Lazily evaluated online views and targets within one graph.
struct Ctx<'a> {
    net: &'a NetworkSet,
    batch: &'a ViewBatch,
    frozen: Option<&'a TargetReps>,
    mode: Mode,
    g: Graph,
    v1: Option<OnlineOutput>,
    v2: Option<OnlineOutput>,
    v3: Option<OnlineOutput>,
    t1: Option<Var>,
    t2: Option<Var>,
}

impl<'a> Ctx<'a> {
    fn new(net: &'a NetworkSet, batch: &'a ViewBatch, frozen: Option<&'a TargetReps>, mode: Mode) -> Self {
        Self {
            net,
            batch,
            frozen,
            mode,
            g: Graph::new(),
            v1: None,
            v2: None,
            v3: None,
            t1: None,
            t2: None,
        }
    }

    /// Online outputs of view `which`. The first request encodes every
    /// view of the batch in one joint pass.
    fn view(&mut self, which: usize) -> Result<OnlineOutput> {
        if self.v1.is_none() {
            let outs = self.net.forward_online_views(&mut self.g, &self.batch.views(), self.mode)?;
            self.v1 = Some(outs[0]);
            self.v2 = Some(outs[1]);
            self.v3 = outs.get(2).copied();
        }
        match which {
            1 => Ok(self.v1.expect("encoded")),
            2 => Ok(self.v2.expect("encoded")),
            _ => self
                .v3
                .ok_or_else(|| Error::Contract("objective needs the rotation view".into())),
        }
    }

    /// Detached `F_target(x_which)`.
    fn target(&mut self, which: usize) -> Result<Var> {
        if self.t1.is_none() {
            let (z1, z2) = match (self.frozen, self.net.rule()) {
                (Some(f), _) => (self.g.constant(f.z1.clone()), self.g.constant(f.z2.clone())),
                (None, TargetRule::StopGradient) => {
                    let (a, b) = (self.view(1)?.z, self.view(2)?.z);
                    (self.g.detach(a), self.g.detach(b))
                }
                (None, TargetRule::Ema { .. }) => {
                    let t = compute_targets(self.net, self.batch, self.mode)?;
                    (self.g.constant(t.z1), self.g.constant(t.z2))
                }
            };
            self.t1 = Some(z1);
            self.t2 = Some(z2);
        }
        Ok(if which == 1 { self.t1 } else { self.t2 }.expect("targets built"))
    }

    fn residual(&mut self, a: usize, b: usize) -> Result<Var> {
        let za = self.view(a)?.z;
        let zb = self.view(b)?.z;
        self.net.residual(&mut self.g, za, zb)
    }

    fn mean_row_norm(&self, r: Var) -> f64 {
        let t = self.g.value(r);
        let n = t.dim(0);
        (0..n)
            .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64
    }

    fn target_nodes(&self) -> Vec<Var> {
        [self.t1, self.t2].into_iter().flatten().collect()
    }
}

/// Batch mean of `|| n(p) - n(z) ||^2`.
pub fn sim_term(g: &mut Graph, p: Var, z: Var) -> Var {
    let np = g.row_normalize(p);
    let nz = g.row_normalize(z);
    let d = g.sub(np, nz);
    let sq = g.row_sq_norm(d);
    g.mean(sq)
}

/// Batch mean of the relaxed similarity of `p - alpha * gr` against `z`.
pub fn relaxed_term(g: &mut Graph, p: Var, gr: Var, z: Var, alpha: f64, mode: NormalizationMode) -> Var {
    let s = relax_sign() * alpha;
    let d = match mode {
        NormalizationMode::Composite => {
            let sg = g.scale(gr, s);
            let sum = g.add(p, sg);
            let n = g.row_normalize(sum);
            let nz = g.row_normalize(z);
            g.sub(n, nz)
        }
        NormalizationMode::EndpointsOnly => {
            let np = g.row_normalize(p);
            let ng = g.row_normalize(gr);
            let sg = g.scale(ng, s);
            let sum = g.add(np, sg);
            let nz = g.row_normalize(z);
            g.sub(sum, nz)
        }
        NormalizationMode::None => {
            let sg = g.scale(gr, s);
            let sum = g.add(p, sg);
            g.sub(sum, z)
        }
    };
    let sq = g.row_sq_norm(d);
    g.mean(sq)
}

/// Batch mean of `max(|| n(p) - n(z) ||^2 - eta, 0)`.
pub fn margin_term(g: &mut Graph, p: Var, z: Var, eta: f64) -> Var {
    let np = g.row_normalize(p);
    let nz = g.row_normalize(z);
    let d = g.sub(np, nz);
    let sq = g.row_sq_norm(d);
    let shifted = g.add_const(sq, -eta);
    let hinge = g.relu(shifted);
    g.mean(hinge)
}

/// Cross-entropy summed over discrete variables and squared error of the
/// continuous block, both batch means.
pub fn pl_terms(g: &mut Graph, logits: &crate::model::PretextLogits, targets: &TargetBatch) -> Result<(Var, Var)> {
    if logits.discrete.len() != targets.categorical.len() {
        return Err(Error::ShapeMismatch {
            op: "pl_terms",
            expected: vec![targets.categorical.len()],
            actual: vec![logits.discrete.len()],
        });
    }
    let mut ce: Option<Var> = None;
    for (l, t) in logits.discrete.iter().zip(&targets.categorical) {
        let k = g.value(*l).dim(1);
        if let Some(bad) = t.iter().find(|&&c| c >= k) {
            return Err(Error::Contract(format!("target class {bad} out of range for {k} logits")));
        }
        let term = g.softmax_cross_entropy(*l, t);
        ce = Some(match ce {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    let ce = ce.ok_or_else(|| Error::Contract("no discrete pretext variables".into()))?;
    let tc = g.constant(targets.continuous.clone());
    let d = g.sub(logits.continuous, tc);
    let sq = g.row_sq_norm(d);
    let mse = g.mean(sq);
    Ok((ce, mse))
}

fn weighted_sum(g: &mut Graph, terms: &[(Var, f64)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let t = if w == 1.0 { v } else { g.scale(v, w) };
        acc = Some(match acc {
            Some(a) => g.add(a, t),
            None => t,
        });
    }
    acc.expect("at least one term")
}

fn finish(ctx: Ctx<'_>, terms: Vec<(Var, f64)>, breakdown: LossBreakdown, residual_norm: f64) -> ObjectiveOutput {
    let target_nodes = ctx.target_nodes();
    let mut g = ctx.g;
    let loss = weighted_sum(&mut g, &terms);
    let mut breakdown = breakdown;
    breakdown.total = g.value(loss).item();
    ObjectiveOutput {
        graph: g,
        loss,
        breakdown,
        residual_norm,
        target_nodes,
    }
}

fn base_breakdown(coefficients: Coefficients) -> LossBreakdown {
    LossBreakdown {
        coefficients,
        ..Default::default()
    }
}

/// `sim(G(F(x1)), sg F(x2)) + sim(G(F(x2)), sg F(x1))`.
pub fn simsiam_dual(
    net: &NetworkSet,
    batch: &ViewBatch,
    frozen: Option<&TargetReps>,
    mode: Mode,
) -> Result<ObjectiveOutput> {
    let mut ctx = Ctx::new(net, batch, frozen, mode);
    let p1 = ctx.view(1)?.p;
    let p2 = ctx.view(2)?.p;
    let t1 = ctx.target(1)?;
    let t2 = ctx.target(2)?;
    let a = sim_term(&mut ctx.g, p1, t2);
    let b = sim_term(&mut ctx.g, p2, t1);
    let s = ctx.g.add(a, b);
    let r = ctx.residual(1, 2)?;
    let rn = ctx.mean_row_norm(r);
    let mut bd = base_breakdown(Coefficients::default());
    bd.sim = ctx.g.value(s).item();
    bd.weights.sim = 1.0;
    bd.active.sim = true;
    Ok(finish(ctx, vec![(s, 1.0)], bd, rn))
}

/// Dual margin objective: `margin(p1, sg z2) + margin(p2, sg z1)`.
pub fn margin_dual(
    net: &NetworkSet,
    batch: &ViewBatch,
    eta: f64,
    frozen: Option<&TargetReps>,
    mode: Mode,
) -> Result<ObjectiveOutput> {
    check_eta(eta)?;
    let mut ctx = Ctx::new(net, batch, frozen, mode);
    let p1 = ctx.view(1)?.p;
    let p2 = ctx.view(2)?.p;
    let t1 = ctx.target(1)?;
    let t2 = ctx.target(2)?;
    let a = margin_term(&mut ctx.g, p1, t2, eta);
    let b = margin_term(&mut ctx.g, p2, t1, eta);
    let m = ctx.g.add(a, b);
    let r = ctx.residual(1, 2)?;
    let rn = ctx.mean_row_norm(r);
    let mut bd = base_breakdown(Coefficients {
        eta,
        ..Default::default()
    });
    bd.margin = ctx.g.value(m).item();
    bd.weights.margin = 1.0;
    bd.active.margin = true;
    Ok(finish(ctx, vec![(m, 1.0)], bd, rn))
}

/// Pretext logits from a residual, optionally through a detached copy.
fn head_on(ctx: &mut Ctx<'_>, r: Var, detach: bool) -> Result<crate::model::PretextLogits> {
    let input = if detach { ctx.g.detach(r) } else { r };
    ctx.net.predict_pretext(&mut ctx.g, input)
}

struct StdParts {
    r2s: Var,
    ce: Var,
    mse: Var,
    sim: Var,
    residual_norm: f64,
}

/// R2S on `x1 -> x2`, PL on `r_12` against `t1`, sim on `x2 -> x1`, with
/// views `a`/`b` standing for (1, 2) or the mirrored (2, 1).
fn std_parts(ctx: &mut Ctx<'_>, a: usize, b: usize, alpha: f64, opts: &LossOptions) -> Result<StdParts> {
    let pa = ctx.view(a)?.p;
    let pb = ctx.view(b)?.p;
    let ta = ctx.target(a)?;
    let tb = ctx.target(b)?;
    let r_ab = ctx.residual(a, b)?;
    let r_rel = if opts.reverse_residual {
        ctx.residual(b, a)?
    } else {
        r_ab
    };
    let gr = ctx.net.predict(&mut ctx.g, r_rel, ctx.mode);
    let r2s = relaxed_term(&mut ctx.g, pa, gr, tb, alpha, opts.normalization);
    let logits = head_on(ctx, r_ab, opts.detach_residual_for_pl)?;
    let targets = if a == 1 { &ctx.batch.t1 } else { &ctx.batch.t2 };
    let (ce, mse) = pl_terms(&mut ctx.g, &logits, targets)?;
    let sim = sim_term(&mut ctx.g, pb, ta);
    Ok(StdParts {
        r2s,
        ce,
        mse,
        sim,
        residual_norm: ctx.mean_row_norm(r_ab),
    })
}

/// `R2S_alpha(x1, x2) + gamma * PL(r_12, t1) + beta * sim(x2 -> x1)`.
pub fn prelax_std(
    net: &NetworkSet,
    batch: &ViewBatch,
    coeffs: &Coefficients,
    opts: &LossOptions,
    frozen: Option<&TargetReps>,
    mode: Mode,
) -> Result<ObjectiveOutput> {
    check_alpha(coeffs.alpha)?;
    let mut ctx = Ctx::new(net, batch, frozen, mode);
    let mut parts = vec![std_parts(&mut ctx, 1, 2, coeffs.alpha, opts)?];
    if opts.symmetrize {
        parts.push(std_parts(&mut ctx, 2, 1, coeffs.alpha, opts)?);
    }
    let k = parts.len() as f64;
    let mut bd = base_breakdown(*coeffs);
    let mut terms = Vec::new();
    for p in &parts {
        bd.r2s += ctx.g.value(p.r2s).item() / k;
        bd.pl_ce += ctx.g.value(p.ce).item() / k;
        bd.pl_mse += ctx.g.value(p.mse).item() / k;
        bd.sim += ctx.g.value(p.sim).item() / k;
        terms.extend([(p.r2s, 1.0 / k), (p.ce, coeffs.gamma / k), (p.mse, coeffs.gamma / k), (p.sim, coeffs.beta / k)]);
    }
    bd.weights = TermWeights {
        r2s: 1.0,
        pl: coeffs.gamma,
        sim: coeffs.beta,
        ..Default::default()
    };
    bd.active = ActiveTerms {
        r2s: true,
        pl: true,
        sim: true,
        ..Default::default()
    };
    let rn = parts.iter().map(|p| p.residual_norm).sum::<f64>() / k;
    Ok(finish(ctx, terms, bd, rn))
}

struct RotParts {
    r3s: Var,
    rotpl: Var,
    residual_norm: f64,
}

fn rot_parts(ctx: &mut Ctx<'_>, alpha: f64, opts: &LossOptions) -> Result<RotParts> {
    let labels = ctx
        .batch
        .rotation
        .clone()
        .ok_or_else(|| Error::Contract("objective needs the rotation view".into()))?;
    let p3 = ctx.view(3)?.p;
    let t2 = ctx.target(2)?;
    let r31 = ctx.residual(3, 1)?;
    let gr = ctx.net.predict(&mut ctx.g, r31, ctx.mode);
    let r3s = relaxed_term(&mut ctx.g, p3, gr, t2, alpha, opts.normalization);
    let logits = head_on(ctx, r31, opts.detach_residual_for_pl)?;
    let rotpl = ctx.g.softmax_cross_entropy(logits.rotation, &labels);
    Ok(RotParts {
        r3s,
        rotpl,
        residual_norm: ctx.mean_row_norm(r31),
    })
}

/// `R3S_alpha(x3; x2) + gamma * RotPL(r_31, a) + beta * sim(x2 -> x1)`.
pub fn prelax_rot(
    net: &NetworkSet,
    batch: &ViewBatch,
    coeffs: &Coefficients,
    opts: &LossOptions,
    frozen: Option<&TargetReps>,
    mode: Mode,
) -> Result<ObjectiveOutput> {
    check_alpha(coeffs.alpha)?;
    if batch.x3.is_none() || batch.rotation.is_none() {
        return Err(Error::Contract("prelax_rot needs the rotation view".into()));
    }
    let mut ctx = Ctx::new(net, batch, frozen, mode);
    let rp = rot_parts(&mut ctx, coeffs.alpha, opts)?;
    let p2 = ctx.view(2)?.p;
    let t1 = ctx.target(1)?;
    let sim = sim_term(&mut ctx.g, p2, t1);
    let mut bd = base_breakdown(*coeffs);
    bd.r3s = ctx.g.value(rp.r3s).item();
    bd.rotpl = ctx.g.value(rp.rotpl).item();
    bd.sim = ctx.g.value(sim).item();
    bd.weights = TermWeights {
        r3s: 1.0,
        rotpl: coeffs.gamma,
        sim: coeffs.beta,
        ..Default::default()
    };
    bd.active = ActiveTerms {
        r3s: true,
        rotpl: true,
        sim: true,
        ..Default::default()
    };
    let terms = vec![(rp.r3s, 1.0), (rp.rotpl, coeffs.gamma), (sim, coeffs.beta)];
    Ok(finish(ctx, terms, bd, rp.residual_norm))
}

/// `(R2S + R3S)/2 + (gamma1/2) PL + (gamma2/2) RotPL + beta * sim`.
pub fn prelax_all(
    net: &NetworkSet,
    batch: &ViewBatch,
    coeffs: &Coefficients,
    opts: &LossOptions,
    frozen: Option<&TargetReps>,
    mode: Mode,
) -> Result<ObjectiveOutput> {
    check_alpha(coeffs.alpha1)?;
    check_alpha(coeffs.alpha2)?;
    if batch.x3.is_none() || batch.rotation.is_none() {
        return Err(Error::Contract("prelax_all needs the rotation view".into()));
    }
    let mut ctx = Ctx::new(net, batch, frozen, mode);
    let sp = std_parts(&mut ctx, 1, 2, coeffs.alpha1, opts)?;
    let rp = rot_parts(&mut ctx, coeffs.alpha2, opts)?;
    let mut bd = base_breakdown(*coeffs);
    bd.r2s = ctx.g.value(sp.r2s).item();
    bd.r3s = ctx.g.value(rp.r3s).item();
    bd.pl_ce = ctx.g.value(sp.ce).item();
    bd.pl_mse = ctx.g.value(sp.mse).item();
    bd.rotpl = ctx.g.value(rp.rotpl).item();
    bd.sim = ctx.g.value(sp.sim).item();
    bd.weights = TermWeights {
        r2s: 0.5,
        r3s: 0.5,
        pl: coeffs.gamma1 / 2.0,
        rotpl: coeffs.gamma2 / 2.0,
        sim: coeffs.beta,
        margin: 0.0,
    };
    bd.active = ActiveTerms {
        sim: true,
        r2s: true,
        r3s: true,
        pl: true,
        rotpl: true,
        margin: false,
    };
    let terms = vec![
        (sp.r2s, 0.5),
        (rp.r3s, 0.5),
        (sp.ce, coeffs.gamma1 / 2.0),
        (sp.mse, coeffs.gamma1 / 2.0),
        (rp.rotpl, coeffs.gamma2 / 2.0),
        (sp.sim, coeffs.beta),
    ];
    let rn = (sp.residual_norm + rp.residual_norm) / 2.0;
    Ok(finish(ctx, terms, bd, rn))
}

/// Sum of exactly the toggled terms.
///
/// With a relaxed term (R2S and/or R3S) present, `sim` is the single
/// `x2 -> x1` constraint weighted by `beta`; without one it is the SimSiam
/// dual pair. With both relaxed terms on, weights follow the combined
/// objective (`1/2`, `gamma1/2`, `gamma2/2`, `alpha1`, `alpha2`); otherwise
/// `alpha` and `gamma` are used.
pub fn ablation_compose(
    net: &NetworkSet,
    batch: &ViewBatch,
    toggles: &Toggles,
    coeffs: &Coefficients,
    opts: &LossOptions,
    frozen: Option<&TargetReps>,
    mode: Mode,
) -> Result<ObjectiveOutput> {
    if !toggles.any() {
        return Err(Error::config("train.toggles", "at least one term must be on"));
    }
    let has_rot = batch.x3.is_some() && batch.rotation.is_some();
    if toggles.needs_rotation() && !has_rot {
        return Err(Error::config(
            "train.toggles",
            "r3s/rotpl need the rotation view",
        ));
    }
    let both = toggles.r2s && toggles.r3s;
    let relaxed = toggles.r2s || toggles.r3s;
    let (a_std, a_rot) = if both { (coeffs.alpha1, coeffs.alpha2) } else { (coeffs.alpha, coeffs.alpha) };
    let (w_pl, w_rotpl) = if both { (coeffs.gamma1 / 2.0, coeffs.gamma2 / 2.0) } else { (coeffs.gamma, coeffs.gamma) };
    let w_relaxed = if both { 0.5 } else { 1.0 };
    check_alpha(a_std)?;
    check_alpha(a_rot)?;

    let mut ctx = Ctx::new(net, batch, frozen, mode);
    let mut bd = base_breakdown(*coeffs);
    let mut terms = Vec::new();
    let mut norms = Vec::new();

    if toggles.r2s || toggles.pl {
        let r12 = ctx.residual(1, 2)?;
        norms.push(ctx.mean_row_norm(r12));
        if toggles.r2s {
            let p1 = ctx.view(1)?.p;
            let t2 = ctx.target(2)?;
            let r_rel = if opts.reverse_residual { ctx.residual(2, 1)? } else { r12 };
            let gr = ctx.net.predict(&mut ctx.g, r_rel, mode);
            let v = relaxed_term(&mut ctx.g, p1, gr, t2, a_std, opts.normalization);
            bd.r2s = ctx.g.value(v).item();
            bd.weights.r2s = w_relaxed;
            bd.active.r2s = true;
            terms.push((v, w_relaxed));
        }
        if toggles.pl {
            let logits = head_on(&mut ctx, r12, opts.detach_residual_for_pl)?;
            let (ce, mse) = pl_terms(&mut ctx.g, &logits, &batch.t1)?;
            bd.pl_ce = ctx.g.value(ce).item();
            bd.pl_mse = ctx.g.value(mse).item();
            bd.weights.pl = w_pl;
            bd.active.pl = true;
            terms.extend([(ce, w_pl), (mse, w_pl)]);
        }
    }
    if toggles.r3s || toggles.rotpl {
        let labels = batch.rotation.clone().expect("checked");
        let r31 = ctx.residual(3, 1)?;
        norms.push(ctx.mean_row_norm(r31));
        if toggles.r3s {
            let p3 = ctx.view(3)?.p;
            let t2 = ctx.target(2)?;
            let gr = ctx.net.predict(&mut ctx.g, r31, mode);
            let v = relaxed_term(&mut ctx.g, p3, gr, t2, a_rot, opts.normalization);
            bd.r3s = ctx.g.value(v).item();
            bd.weights.r3s = w_relaxed;
            bd.active.r3s = true;
            terms.push((v, w_relaxed));
        }
        if toggles.rotpl {
            let logits = head_on(&mut ctx, r31, opts.detach_residual_for_pl)?;
            let v = ctx.g.softmax_cross_entropy(logits.rotation, &labels);
            bd.rotpl = ctx.g.value(v).item();
            bd.weights.rotpl = w_rotpl;
            bd.active.rotpl = true;
            terms.push((v, w_rotpl));
        }
    }
    if toggles.sim {
        let p2 = ctx.view(2)?.p;
        let t1 = ctx.target(1)?;
        let back = sim_term(&mut ctx.g, p2, t1);
        if relaxed {
            bd.sim = ctx.g.value(back).item();
            bd.weights.sim = coeffs.beta;
            terms.push((back, coeffs.beta));
        } else {
            let p1 = ctx.view(1)?.p;
            let t2 = ctx.target(2)?;
            let fwd = sim_term(&mut ctx.g, p1, t2);
            let pair = ctx.g.add(fwd, back);
            bd.sim = ctx.g.value(pair).item();
            bd.weights.sim = 1.0;
            terms.push((pair, 1.0));
        }
        bd.active.sim = true;
    } else {
        bd.no_similarity_constraint = true;
        log::warn!("ablation without a similarity term: no similarity constraint");
    }
    if norms.is_empty() {
        let r12 = ctx.residual(1, 2)?;
        norms.push(ctx.mean_row_norm(r12));
    }
    let rn = norms.iter().sum::<f64>() / norms.len() as f64;
    Ok(finish(ctx, terms, bd, rn))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize(&[3.0, 4.0]).vector, vec![0.6, 0.8]);
        let u = normalize(&[0.0, 1.0]);
        assert_eq!(u.vector, vec![0.0, 1.0]);
        assert!(!u.degenerate);
        let z = normalize(&[0.0, 0.0]);
        assert!(z.degenerate);
        assert_eq!(z.vector, vec![0.0, 0.0]);
    }

    #[test]
    fn sim_loss_examples() {
        assert_eq!(sim_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((sim_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(sim_loss(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(sim_loss(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn r2s_examples() {
        // p - g_r = (0, 1) aligns with z
        let v = r2s_loss(&[1.0, 0.0], &[1.0, -1.0], &[0.0, 1.0], 1.0).unwrap();
        assert!(v.abs() < 1e-15);
        assert!(r2s_loss(&[1.0], &[1.0], &[1.0], 1.5).is_err());
        let p = [0.3, -1.2, 0.7];
        let g = [2.0, 0.1, -0.4];
        let z = [1.0, 0.5, 0.2];
        for mode in [NormalizationMode::Composite, NormalizationMode::EndpointsOnly] {
            assert_eq!(r2s_loss_with(&p, &g, &z, 0.0, mode).unwrap(), sim_loss(&p, &z).unwrap());
        }
    }

    #[test]
    fn pl_and_rotpl_examples() {
        let (ce, mse) = pl_loss(&[vec![0.0, 0.0]], &[0.2, 0.4], &[1], &[0.2, 0.4]).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-15);
        assert_eq!(mse, 0.0);
        // -ln(e^10 / (e^10 + e^-10)) = ln(1 + e^-20)
        let (ce, _) = pl_loss(&[vec![10.0, -10.0]], &[], &[0], &[]).unwrap();
        assert!((ce - (-20f64).exp().ln_1p()).abs() < 1e-6 * ce);
        assert!((ce - 2.06e-9).abs() < 1e-11);
        assert!(pl_loss(&[vec![0.0, 0.0]], &[], &[2], &[]).is_err());

        assert!((rotpl_loss(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(rotpl_loss(&[20.0, -20.0, -20.0, -20.0], 0).unwrap() < 1e-15);
        let e = std::f64::consts::E;
        let want = -(e / (e + 3.0)).ln();
        assert!((rotpl_loss(&[1.0, 0.0, 0.0, 0.0], 0).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.7437).abs() < 1e-4);
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_loss(&[1.0, 0.0], &[1.0, 0.0], 0.5).unwrap(), 0.0);
        assert!((margin_loss(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap() - 1.5).abs() < 1e-15);
        assert!(margin_loss(&[1.0], &[1.0], 0.0).is_err());
        assert!(margin_loss(&[1.0], &[1.0], -1.0).is_err());
    }

    #[test]
    fn ablation_rows_parse() {
        let t = Toggles::named("R3S + RotPL").unwrap();
        assert!(!t.sim && t.r3s && t.rotpl);
        assert!(Toggles::named("nonsense").is_none());
        assert!(!Toggles::default().any());
    }

    #[test]
    fn coefficient_defaults_validate() {
        let c = Coefficients::default();
        assert_eq!((c.alpha, c.beta, c.gamma), (1.0, 1.0, 0.1));
        assert_eq!((c.alpha1, c.alpha2, c.gamma1, c.gamma2), (1.0, 1.0, 0.1, 0.1));
        assert_eq!(c.eta, 0.5);
        c.validate().unwrap();
        assert!(Coefficients { alpha: 1.1, ..c }.validate().is_err());
        assert!(Coefficients { gamma: -0.1, ..c }.validate().is_err());
    }
}
