//! Online encoder (backbone + projector), predictor, pretext head, and the
//! target network with its update rule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Image, DISCRETE_ARITY, NUM_CONTINUOUS, NUM_ROTATIONS};
use crate::autograd::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBn, Linear, LinearBnRelu, BatchNorm};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSpec {
    /// Two hidden layers over the flattened image.
    Mlp { hidden: usize },
    /// Three stride-2 3x3 conv stages and global average pooling.
    SmallConv { widths: [usize; 3] },
    /// CIFAR-style ResNet (3x3 stem, no max-pool); depth 18 or 34.
    Resnet { depth: usize, base_width: usize },
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::SmallConv {
            widths: [16, 32, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorSpec {
    Mlp { hidden: usize },
    /// `G(v) = v`; used to check identities.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub backbone: BackboneSpec,
    pub proj_hidden: usize,
    /// 2 or 3 layers.
    pub proj_layers: usize,
    pub d_z: usize,
    pub predictor: PredictorSpec,
    /// Pretext-head trunk width; defaults to `d_z`.
    pub head_hidden: Option<usize>,
    /// Zero the pretext head's output blocks at construction.
    pub zero_init_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            backbone: BackboneSpec::default(),
            proj_hidden: 128,
            proj_layers: 2,
            d_z: 64,
            predictor: PredictorSpec::Mlp { hidden: 32 },
            head_hidden: None,
            zero_init_head: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("model.{field}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        pos("input_size", self.input_size)?;
        pos("proj_hidden", self.proj_hidden)?;
        pos("d_z", self.d_z)?;
        if !(2..=3).contains(&self.proj_layers) {
            return Err(Error::config("model.proj_layers", "must be 2 or 3"));
        }
        if let Some(h) = self.head_hidden {
            pos("head_hidden", h)?;
        }
        match &self.backbone {
            BackboneSpec::Mlp { hidden } => pos("backbone.hidden", *hidden)?,
            BackboneSpec::SmallConv { widths } => {
                if widths.contains(&0) {
                    return Err(Error::config("model.backbone.widths", "must be positive"));
                }
            }
            BackboneSpec::Resnet { depth, base_width } => {
                if ![18, 34].contains(depth) {
                    return Err(Error::config("model.backbone.depth", "must be 18 or 34"));
                }
                pos("backbone.base_width", *base_width)?;
            }
        }
        if let PredictorSpec::Mlp { hidden } = self.predictor {
            pos("predictor.hidden", hidden)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Clone, Debug)]
enum Backbone {
    Mlp {
        l1: LinearBnRelu,
        l2: LinearBnRelu,
    },
    Conv {
        stages: Vec<ConvBn>,
    },
    Resnet {
        stem: ConvBn,
        blocks: Vec<BasicBlock>,
    },
}

impl Backbone {
    fn build<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> (Self, usize) {
        let group = ParamGroup::Encoder;
        match &cfg.backbone {
            BackboneSpec::Mlp { hidden } => {
                let d_in = Image::CHANNELS * cfg.input_size * cfg.input_size;
                let l1 = LinearBnRelu::new(store, "encoder.backbone.l1", group, d_in, *hidden, rng);
                let l2 = LinearBnRelu::new(store, "encoder.backbone.l2", group, *hidden, *hidden, rng);
                (Backbone::Mlp { l1, l2 }, *hidden)
            }
            BackboneSpec::SmallConv { widths } => {
                let mut in_ch = Image::CHANNELS;
                let stages = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let s = ConvBn::new(
                            store,
                            &format!("encoder.backbone.stage{i}"),
                            group,
                            in_ch,
                            w,
                            3,
                            2,
                            rng,
                        );
                        in_ch = w;
                        s
                    })
                    .collect();
                (Backbone::Conv { stages }, widths[2])
            }
            BackboneSpec::Resnet { depth, base_width } => {
                let per_stage: [usize; 4] = if *depth == 34 { [3, 4, 6, 3] } else { [2, 2, 2, 2] };
                let stem = ConvBn::new(
                    store,
                    "encoder.backbone.stem",
                    group,
                    Image::CHANNELS,
                    *base_width,
                    3,
                    1,
                    rng,
                );
                let mut blocks = Vec::new();
                let mut in_ch = *base_width;
                for (s, &n) in per_stage.iter().enumerate() {
                    let out_ch = base_width << s;
                    for b in 0..n {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        let name = format!("encoder.backbone.layer{}.{b}", s + 1);
                        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
                            ConvBn::new(store, &format!("{name}.down"), group, in_ch, out_ch, 1, stride, rng)
                        });
                        blocks.push(BasicBlock {
                            a: ConvBn::new(store, &format!("{name}.a"), group, in_ch, out_ch, 3, stride, rng),
                            b: ConvBn::new(store, &format!("{name}.b"), group, out_ch, out_ch, 3, 1, rng),
                            shortcut,
                        });
                        in_ch = out_ch;
                    }
                }
                (Backbone::Resnet { stem, blocks }, in_ch)
            }
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        match self {
            Backbone::Mlp { l1, l2 } => {
                let n = g.value(x).dim(0);
                let d = g.value(x).len() / n;
                let flat = g.reshape(x, &[n, d]);
                let h = l1.forward(g, store, flat, mode);
                l2.forward(g, store, h, mode)
            }
            Backbone::Conv { stages } => {
                let mut h = x;
                for s in stages {
                    let y = s.forward(g, store, h, mode);
                    h = g.relu(y);
                }
                g.global_avg_pool(h)
            }
            Backbone::Resnet { stem, blocks } => {
                let y = stem.forward(g, store, x, mode);
                let mut h = g.relu(y);
                for blk in blocks {
                    let a = blk.a.forward(g, store, h, mode);
                    let a = g.relu(a);
                    let b = blk.b.forward(g, store, a, mode);
                    let skip = match &blk.shortcut {
                        Some(sc) => sc.forward(g, store, h, mode),
                        None => h,
                    };
                    let sum = g.add(b, skip);
                    h = g.relu(sum);
                }
                g.global_avg_pool(h)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Projector {
    hidden: Vec<LinearBnRelu>,
    out: Linear,
    out_bn: BatchNorm,
}

#[derive(Clone, Debug)]
enum Predictor {
    Identity,
    Mlp { hidden: LinearBnRelu, out: Linear },
}

#[derive(Clone, Debug)]
struct PretextHead {
    trunk: Linear,
    discrete: Vec<Linear>,
    continuous: Linear,
    rotation: Linear,
}

/// How the target network follows the online network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetRule {
    /// Target is the online network with gradients blocked.
    StopGradient,
    /// Exponential moving average with a cosine ramp from `tau_base` to 1.
    Ema { tau_base: f64 },
}

impl TargetRule {
    pub fn validate(&self) -> Result<()> {
        if let TargetRule::Ema { tau_base } = self {
            if !(0.0..=1.0).contains(tau_base) {
                return Err(Error::config(
                    "train.target_rule.tau_base",
                    format!("{tau_base} outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

/// Decay for EMA step `step` of `total_steps`:
/// `1 - (1 - tau_base) * (cos(pi * step / total) + 1) / 2`.
pub fn tau_schedule(step: usize, total_steps: usize, tau_base: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau_base) {
        return Err(Error::config("tau_base", format!("{tau_base} outside [0, 1]")));
    }
    if total_steps == 0 || step > total_steps {
        return Err(Error::Contract(format!(
            "tau_schedule needs 0 <= step <= total_steps, total_steps > 0 (got {step}/{total_steps})"
        )));
    }
    if step == total_steps {
        return Ok(1.0);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(1.0 - (1.0 - tau_base) * ((std::f64::consts::PI * progress).cos() + 1.0) / 2.0)
}

/// Per-view result of the online branch.
#[derive(Clone, Copy, Debug)]
pub struct OnlineOutput {
    /// Pooled backbone features (pre-projector).
    pub features: Var,
    /// Projector output.
    pub z: Var,
    /// Predictor output `G(z)`.
    pub p: Var,
}

/// Pretext-head outputs for a batch of residuals.
#[derive(Clone, Debug)]
pub struct PretextLogits {
    pub discrete: Vec<Var>,
    pub continuous: Var,
    pub rotation: Var,
}

#[derive(Clone, Debug)]
enum Target {
    StopGradient,
    Ema(ParamStore),
}

#[derive(Clone, Debug)]
pub struct NetworkSet {
    config: ModelConfig,
    rule: TargetRule,
    input_mean: ParamId,
    input_std: ParamId,
    backbone: Backbone,
    feature_dim: usize,
    projector: Projector,
    predictor: Predictor,
    head: PretextHead,
    online: ParamStore,
    target: Target,
}

impl NetworkSet {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rule: TargetRule, rng: &mut R) -> Result<Self> {
        config.validate()?;
        rule.validate()?;
        let mut store = ParamStore::new();
        let enc = ParamGroup::Encoder;
        let input_mean = store.add("encoder.input_norm.mean", Tensor::zeros(&[3]), ParamKind::InputStat, enc);
        let input_std = store.add("encoder.input_norm.std", Tensor::full(&[3], 1.0), ParamKind::InputStat, enc);
        let (backbone, feature_dim) = Backbone::build(config, &mut store, rng);

        let mut hidden = Vec::new();
        let mut width = feature_dim;
        for i in 0..config.proj_layers - 1 {
            hidden.push(LinearBnRelu::new(
                &mut store,
                &format!("encoder.projector.l{i}"),
                enc,
                width,
                config.proj_hidden,
                rng,
            ));
            width = config.proj_hidden;
        }
        let out = Linear::new(&mut store, "encoder.projector.out", enc, width, config.d_z, false, rng);
        let out_bn = BatchNorm::new(&mut store, "encoder.projector.out_bn", enc, config.d_z);
        let projector = Projector { hidden, out, out_bn };

        let pg = ParamGroup::Predictor;
        let predictor = match config.predictor {
            PredictorSpec::Identity => Predictor::Identity,
            PredictorSpec::Mlp { hidden } => Predictor::Mlp {
                hidden: LinearBnRelu::new(&mut store, "predictor.l0", pg, config.d_z, hidden, rng),
                out: Linear::new(&mut store, "predictor.out", pg, hidden, config.d_z, true, rng),
            },
        };

        let hg = ParamGroup::PretextHead;
        let hh = config.head_hidden.unwrap_or(config.d_z);
        let trunk = Linear::new(&mut store, "pretext_head.trunk", hg, config.d_z, hh, true, rng);
        let discrete: Vec<Linear> = DISCRETE_ARITY
            .iter()
            .enumerate()
            .map(|(i, &k)| Linear::new(&mut store, &format!("pretext_head.discrete{i}"), hg, hh, k, true, rng))
            .collect();
        let continuous = Linear::new(&mut store, "pretext_head.continuous", hg, hh, NUM_CONTINUOUS, true, rng);
        let rotation = Linear::new(&mut store, "pretext_head.rotation", hg, hh, NUM_ROTATIONS, true, rng);
        if config.zero_init_head {
            for l in discrete.iter().chain([&continuous, &rotation]) {
                l.zero_init(&mut store);
            }
        }
        let head = PretextHead {
            trunk,
            discrete,
            continuous,
            rotation,
        };

        let target = match rule {
            TargetRule::StopGradient => Target::StopGradient,
            TargetRule::Ema { .. } => Target::Ema(store.clone()),
        };
        Ok(Self {
            config: config.clone(),
            rule,
            input_mean,
            input_std,
            backbone,
            feature_dim,
            projector,
            predictor,
            head,
            online: store,
            target,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rule(&self) -> TargetRule {
        self.rule
    }

    pub fn d_z(&self) -> usize {
        self.config.d_z
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn online(&self) -> &ParamStore {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut ParamStore {
        &mut self.online
    }

    /// Store the target encoder reads from. Under stop-gradient this is the
    /// online store itself.
    pub fn target_store(&self) -> &ParamStore {
        match &self.target {
            Target::StopGradient => &self.online,
            Target::Ema(s) => s,
        }
    }

    pub fn target_store_mut(&mut self) -> Option<&mut ParamStore> {
        match &mut self.target {
            Target::StopGradient => None,
            Target::Ema(s) => Some(s),
        }
    }

    /// Sets the per-channel input standardization (kept in both stores).
    pub fn set_input_normalization(&mut self, mean: [f64; 3], std: [f64; 3]) -> Result<()> {
        if std.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::config("input_norm.std", "must be positive"));
        }
        let (m, s) = (self.input_mean, self.input_std);
        for store in std::iter::once(&mut self.online).chain(match &mut self.target {
            Target::Ema(t) => Some(t),
            Target::StopGradient => None,
        }) {
            store.get_mut(m).data_mut().copy_from_slice(&mean);
            store.get_mut(s).data_mut().copy_from_slice(&std);
        }
        Ok(())
    }

    /// Stacks images into a standardized `[N, 3, S, S]` batch.
    pub fn batch_tensor(&self, store: &ParamStore, images: &[&Image]) -> Result<Tensor> {
        let s = self.config.input_size;
        if let Some(bad) = images.iter().find(|im| im.size() != s) {
            return Err(Error::ShapeMismatch {
                op: "NetworkSet::batch_tensor",
                expected: vec![3, s, s],
                actual: vec![3, bad.size(), bad.size()],
            });
        }
        if images.is_empty() {
            return Err(Error::Contract("empty image batch".into()));
        }
        let mean = store.get(self.input_mean).data();
        let std = store.get(self.input_std).data();
        let hw = s * s;
        let mut data = Vec::with_capacity(images.len() * 3 * hw);
        for im in images {
            for (c, plane) in im.pixels().chunks(hw).enumerate() {
                data.extend(plane.iter().map(|v| (v - mean[c]) / std[c]));
            }
        }
        Tensor::from_vec(&[images.len(), 3, s, s], data)
    }

    fn encode_with(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> (Var, Var) {
        let features = self.backbone.forward(g, store, x, mode);
        let mut h = features;
        for l in &self.projector.hidden {
            h = l.forward(g, store, h, mode);
        }
        let y = self.projector.out.forward(g, store, h);
        let z = self.projector.out_bn.forward(g, store, y, mode);
        (features, z)
    }

    /// Backbone features and projector output of the online encoder.
    pub fn encode(&self, g: &mut Graph, x: Var, mode: Mode) -> (Var, Var) {
        self.encode_with(g, &self.online, x, mode)
    }

    /// Online encoder followed by the predictor.
    pub fn forward_online(&self, g: &mut Graph, x: Var, mode: Mode) -> OnlineOutput {
        let (features, z) = self.encode(g, x, mode);
        let p = self.predict(g, z, mode);
        OnlineOutput { features, z, p }
    }

    /// Target representation as a plain tensor: there is no tape path back
    /// to any parameter.
    pub fn forward_target(&self, x: &Tensor, mode: Mode) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (_, z) = self.encode_with(&mut g, self.target_store(), xv, mode);
        g.value(z).clone()
    }

    /// Encodes several equally shaped inputs as one batch, so they share
    /// batch statistics, and splits the outputs back per input.
    pub fn forward_online_views(&self, g: &mut Graph, xs: &[&Tensor], mode: Mode) -> Result<Vec<OnlineOutput>> {
        let joint = Tensor::concat_rows(xs)?;
        let xv = g.constant(joint);
        let all = self.forward_online(g, xv, mode);
        let mut start = 0;
        Ok(xs
            .iter()
            .map(|x| {
                let n = x.dim(0);
                let out = OnlineOutput {
                    features: g.slice_rows(all.features, start, n),
                    z: g.slice_rows(all.z, start, n),
                    p: g.slice_rows(all.p, start, n),
                };
                start += n;
                out
            })
            .collect())
    }

    /// Target representations of several inputs encoded as one batch.
    pub fn forward_target_views(&self, xs: &[&Tensor], mode: Mode) -> Result<Vec<Tensor>> {
        let joint = Tensor::concat_rows(xs)?;
        let z = self.forward_target(&joint, mode);
        let mut start = 0;
        Ok(xs
            .iter()
            .map(|x| {
                let n = x.dim(0);
                let per = z.len() / z.dim(0);
                let t = Tensor::from_vec(&[n, per], z.data()[start * per..(start + n) * per].to_vec())
                    .expect("target slice");
                start += n;
                t
            })
            .collect())
    }

    pub fn predict(&self, g: &mut Graph, v: Var, mode: Mode) -> Var {
        match &self.predictor {
            Predictor::Identity => v,
            Predictor::Mlp { hidden, out } => {
                let h = hidden.forward(g, &self.online, v, mode);
                out.forward(g, &self.online, h)
            }
        }
    }

    /// `z_a - z_b`; gradients flow to both sides.
    pub fn residual(&self, g: &mut Graph, z_a: Var, z_b: Var) -> Result<Var> {
        let (a, b) = (g.value(z_a).shape(), g.value(z_b).shape());
        if a != b {
            return Err(Error::ShapeMismatch {
                op: "residual",
                expected: a.to_vec(),
                actual: b.to_vec(),
            });
        }
        Ok(g.sub(z_a, z_b))
    }

    pub fn predict_pretext(&self, g: &mut Graph, r: Var) -> Result<PretextLogits> {
        let w = g.value(r).len() / g.value(r).dim(0).max(1);
        if w != self.config.d_z {
            return Err(Error::ShapeMismatch {
                op: "predict_pretext",
                expected: vec![self.config.d_z],
                actual: vec![w],
            });
        }
        let h = self.head.trunk.forward(g, &self.online, r);
        let h = g.relu(h);
        let discrete = self
            .head
            .discrete
            .iter()
            .map(|l| l.forward(g, &self.online, h))
            .collect();
        let continuous = self.head.continuous.forward(g, &self.online, h);
        let rotation = self.head.rotation.forward(g, &self.online, h);
        Ok(PretextLogits {
            discrete,
            continuous,
            rotation,
        })
    }

    /// `target = tau * target + (1 - tau) * online` over the encoder's
    /// trainable parameters; normalization statistics are copied.
    pub fn ema_update(&mut self, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Contract(format!("ema decay {tau} outside [0, 1]")));
        }
        let Target::Ema(target) = &mut self.target else {
            return Err(Error::Contract(
                "ema_update called under the stop-gradient target rule".into(),
            ));
        };
        for (t, o) in target.entries_mut().iter_mut().zip(self.online.entries()) {
            if o.group != ParamGroup::Encoder {
                continue;
            }
            if o.kind.trainable() {
                for (tv, ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
                    *tv = tau * *tv + (1.0 - tau) * ov;
                }
            } else if o.kind.is_copied_state() {
                t.value.data_mut().copy_from_slice(o.value.data());
            }
        }
        Ok(())
    }

    /// Replaces every stored value from a name-keyed source; fails on missing
    /// names or shape mismatches.
    pub fn load_values(
        &mut self,
        online: &[(String, Tensor)],
        target: Option<&[(String, Tensor)]>,
    ) -> Result<()> {
        fn fill(store: &mut ParamStore, values: &[(String, Tensor)]) -> Result<()> {
            for e in store.entries_mut() {
                let (_, t) = values
                    .iter()
                    .find(|(n, _)| *n == e.name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", e.name)))?;
                if t.shape() != e.value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "load_values",
                        expected: e.value.shape().to_vec(),
                        actual: t.shape().to_vec(),
                    });
                }
                e.value = t.clone();
            }
            Ok(())
        }
        fill(&mut self.online, online)?;
        match (&mut self.target, target) {
            (Target::Ema(store), Some(values)) => fill(store, values),
            (Target::Ema(store), None) => {
                *store = self.online.clone();
                Ok(())
            }
            (Target::StopGradient, _) => Ok(()),
        }
    }

    /// Applies queued batch-norm running-statistic updates to the online store.
    pub fn apply_stat_updates(&mut self, g: &mut Graph) {
        for u in g.take_stat_updates() {
            u.apply(&mut self.online);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(rule: TargetRule, predictor: PredictorSpec) -> NetworkSet {
        let cfg = ModelConfig {
            input_size: 8,
            backbone: BackboneSpec::Mlp { hidden: 16 },
            proj_hidden: 16,
            d_z: 8,
            predictor,
            ..Default::default()
        };
        NetworkSet::new(&cfg, rule, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    fn images(n: usize, size: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Image::new(size, (0..3 * size * size).map(|_| rng.random()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn tau_schedule_endpoints_and_midpoint() {
        assert_eq!(tau_schedule(0, 100, 0.996).unwrap(), 0.996);
        assert_eq!(tau_schedule(100, 100, 0.996).unwrap(), 1.0);
        assert!((tau_schedule(50, 100, 0.996).unwrap() - 0.998).abs() < 1e-12);
        let mut prev = 0.0;
        for k in 0..=100 {
            let t = tau_schedule(k, 100, 0.996).unwrap();
            assert!(t >= prev);
            prev = t;
        }
        assert!(tau_schedule(0, 10, 1.5).is_err());
        assert!(tau_schedule(11, 10, 0.9).is_err());
    }

    #[test]
    fn ema_update_arithmetic() {
        let mut net = tiny(TargetRule::Ema { tau_base: 0.996 }, PredictorSpec::Mlp { hidden: 8 });
        let id = net.online().find("encoder.backbone.l1.fc.weight").unwrap();
        net.online_mut().get_mut(id).data_mut()[0] = 4.0;
        net.target_store_mut().unwrap().get_mut(id).data_mut()[0] = 2.0;
        net.ema_update(0.5).unwrap();
        assert_eq!(net.target_store().get(id).data()[0], 3.0);

        let before = net.target_store().clone();
        net.ema_update(1.0).unwrap();
        assert_eq!(net.target_store().checksum(), before.checksum());
        net.ema_update(0.0).unwrap();
        for (t, o) in net.target_store().entries().iter().zip(net.online().entries()) {
            if o.group == ParamGroup::Encoder {
                assert_eq!(t.value, o.value, "{}", o.name);
            }
        }
        let mut sg = tiny(TargetRule::StopGradient, PredictorSpec::Identity);
        assert!(sg.ema_update(0.5).is_err());
    }

    #[test]
    fn identity_predictor_and_shapes() {
        let net = tiny(TargetRule::StopGradient, PredictorSpec::Identity);
        for n in [1, 2, 17] {
            let imgs = images(n, 8, n as u64);
            let refs: Vec<&Image> = imgs.iter().collect();
            let x = net.batch_tensor(net.online(), &refs).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let out = net.forward_online(&mut g, xv, Mode::Eval);
            assert_eq!(g.value(out.z).shape(), &[n, 8]);
            assert_eq!(g.value(out.z), g.value(out.p));
            // stop-gradient target aliases online parameters
            assert_eq!(&net.forward_target(&x, Mode::Eval), g.value(out.z));
            let r = net.residual(&mut g, out.z, out.z).unwrap();
            assert!(g.value(r).data().iter().all(|v| *v == 0.0));
            let logits = net.predict_pretext(&mut g, r).unwrap();
            let sizes: Vec<usize> = logits.discrete.iter().map(|v| g.value(*v).dim(1)).collect();
            assert_eq!(sizes, vec![2, 2, 2]);
            assert_eq!(g.value(logits.rotation).shape(), &[n, 4]);
            assert_eq!(g.value(logits.continuous).shape(), &[n, 8]);
        }
    }

    #[test]
    fn zero_initialized_head_gives_zero_logits_on_zero_residual() {
        let cfg = ModelConfig {
            input_size: 8,
            backbone: BackboneSpec::Mlp { hidden: 8 },
            d_z: 8,
            zero_init_head: true,
            ..Default::default()
        };
        let net = NetworkSet::new(&cfg, TargetRule::StopGradient, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut g = Graph::new();
        let r = g.constant(Tensor::zeros(&[3, 8]));
        let out = net.predict_pretext(&mut g, r).unwrap();
        for v in out.discrete.iter().chain([&out.continuous, &out.rotation]) {
            assert!(g.value(*v).data().iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn residual_rejects_dimension_mismatch() {
        let net = tiny(TargetRule::StopGradient, PredictorSpec::Identity);
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 8]));
        let b = g.constant(Tensor::zeros(&[2, 4]));
        assert!(net.residual(&mut g, a, b).is_err());
        let a = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, 2.0]).unwrap());
        let r = net.residual(&mut g, a, b).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 0.0]);
    }

    #[test]
    fn conv_and_resnet_backbones_build_and_run() {
        for backbone in [
            BackboneSpec::SmallConv { widths: [4, 8, 8] },
            BackboneSpec::Resnet { depth: 18, base_width: 4 },
        ] {
            let cfg = ModelConfig {
                input_size: 8,
                backbone,
                proj_hidden: 8,
                proj_layers: 3,
                d_z: 8,
                ..Default::default()
            };
            let net = NetworkSet::new(&cfg, TargetRule::StopGradient, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            let imgs = images(2, 8, 5);
            let refs: Vec<&Image> = imgs.iter().collect();
            let x = net.batch_tensor(net.online(), &refs).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let out = net.forward_online(&mut g, xv, Mode::Train);
            assert_eq!(g.value(out.p).shape(), &[2, 8]);
            assert!(g.value(out.p).all_finite());
        }
    }

    #[test]
    fn wrong_input_size_rejected() {
        let net = tiny(TargetRule::StopGradient, PredictorSpec::Identity);
        let imgs = images(1, 4, 0);
        assert!(net.batch_tensor(net.online(), &[&imgs[0]]).is_err());
    }
}
