//! Frozen-encoder evaluation: embedding export, linear probe, kNN retrieval.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_bundle, AugmentConfig, Image, ViewMode};
use crate::autograd::{Graph, Mode};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::ViewBatch;
use crate::model::NetworkSet;

/// Where embeddings are read from the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Pooled backbone features.
    #[default]
    PreProjector,
    /// Projector output, `d_z` wide.
    PostProjector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<u64>,
    labels: Option<Vec<usize>>,
    /// Row-major `[len, dim]`.
    values: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, ids: Vec<u64>, labels: Option<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("embedding width must be positive".into()));
        }
        if values.len() != ids.len() * dim {
            return Err(Error::ShapeMismatch {
                op: "EmbeddingTable::new",
                expected: vec![ids.len(), dim],
                actual: vec![values.len()],
            });
        }
        if labels.as_ref().is_some_and(|l| l.len() != ids.len()) {
            return Err(Error::Contract("one label per row required".into()));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("duplicate row ids".into()));
        }
        Ok(Self {
            dim,
            ids,
            labels,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same rows with every embedding multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    /// `u32 dim, u64 count, u8 has_labels`, then per row
    /// `u64 id, i32 label (-1 if absent), f32 * dim`, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + self.len() * (12 + 4 * self.dim));
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.push(self.labels.is_some() as u8);
        for i in 0..self.len() {
            out.extend_from_slice(&self.ids[i].to_le_bytes());
            let l = self.labels.as_ref().map_or(-1, |l| l[i] as i32);
            out.extend_from_slice(&l.to_le_bytes());
            for &v in self.row(i) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let err = |offset: usize, reason: &str| Error::Parse {
            path: origin.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        };
        if bytes.len() < 13 {
            return Err(err(0, "header truncated"));
        }
        let dim = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let has_labels = match bytes[12] {
            0 => false,
            1 => true,
            _ => return Err(err(12, "label flag must be 0 or 1")),
        };
        let row = 12 + 4 * dim;
        let body = &bytes[13..];
        if Some(body.len()) != count.checked_mul(row) {
            return Err(err(13 + body.len() / row.max(1) * row, "row data does not match the header"));
        }
        let mut ids = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count * dim);
        for (i, r) in body.chunks_exact(row).enumerate() {
            ids.push(u64::from_le_bytes(r[0..8].try_into().unwrap()));
            let l = i32::from_le_bytes(r[8..12].try_into().unwrap());
            if has_labels {
                if l < 0 {
                    return Err(err(13 + i * row + 8, "missing label in a labeled table"));
                }
                labels.push(l as usize);
            }
            values.extend(r[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64));
        }
        Self::new(dim, ids, has_labels.then_some(labels), values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

const EXTRACT_CHUNK: usize = 64;

fn embed_chunk(net: &NetworkSet, images: &[&Image], pooling: Pooling) -> Result<Vec<f64>> {
    let x = net.batch_tensor(net.online(), images)?;
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (features, z) = net.encode(&mut g, xv, Mode::Eval);
    let v = match pooling {
        Pooling::PreProjector => features,
        Pooling::PostProjector => z,
    };
    Ok(g.value(v).data().to_vec())
}

/// Embeds every image of `data` with the online encoder in evaluation mode.
/// Row `i` has id `i`. Work is split into fixed chunks spread over threads,
/// so the result does not depend on the thread count.
pub fn extract_embeddings(net: &NetworkSet, data: &LabeledDataset, pooling: Pooling) -> Result<EmbeddingTable> {
    if data.image_size().is_some_and(|s| s != net.config().input_size) {
        return Err(Error::ShapeMismatch {
            op: "extract_embeddings",
            expected: vec![net.config().input_size],
            actual: vec![data.image_size().unwrap_or(0)],
        });
    }
    let dim = match pooling {
        Pooling::PreProjector => net.feature_dim(),
        Pooling::PostProjector => net.d_z(),
    };
    let refs: Vec<&Image> = data.images().iter().collect();
    let chunks: Vec<&[&Image]> = refs.chunks(EXTRACT_CHUNK).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(chunks.len()).max(1);
    let mut parts: Vec<Option<Result<Vec<f64>>>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let mut slots: Vec<&mut [Option<Result<Vec<f64>>>]> = Vec::new();
        let per = chunks.len().div_ceil(threads);
        let mut rest = parts.as_mut_slice();
        while !rest.is_empty() {
            let (a, b) = rest.split_at_mut(per.min(rest.len()));
            slots.push(a);
            rest = b;
        }
        for (t, slot) in slots.into_iter().enumerate() {
            let chunks = &chunks;
            s.spawn(move || {
                for (j, out) in slot.iter_mut().enumerate() {
                    *out = Some(embed_chunk(net, chunks[t * per + j], pooling));
                }
            });
        }
    });
    let mut values = Vec::with_capacity(data.len() * dim);
    for p in parts {
        values.extend(p.expect("every chunk processed")?);
    }
    EmbeddingTable::new(
        dim,
        (0..data.len() as u64).collect(),
        Some(data.labels().to_vec()),
        values,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Fractions of training after which the learning rate drops by `decay`.
    pub milestones: Vec<f64>,
    pub decay: f64,
    /// Standardize features with train-table statistics.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 256,
            milestones: vec![0.6, 0.8],
            decay: 0.1,
            standardize: true,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("eval.probe.batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("eval.probe.lr", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("eval.probe.momentum", "must lie in [0, 1)"));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("eval.probe.milestones", "fractions must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A trained linear classifier over (optionally standardized) features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// `[dim, classes]`
    weight: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
}

impl LinearProbe {
    fn logits(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (j, &v) in x.iter().enumerate() {
            let v = (v - self.mean[j]) * self.inv_std[j];
            let w = &self.weight[j * self.classes..(j + 1) * self.classes];
            for (o, wk) in out.iter_mut().zip(w) {
                *o += v * wk;
            }
        }
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut l = vec![0.0; self.classes];
        self.logits(x, &mut l);
        let mut best = 0;
        for (k, &v) in l.iter().enumerate() {
            if v > l[best] {
                best = k;
            }
        }
        best
    }

    pub fn accuracy(&self, table: &EmbeddingTable) -> Result<f64> {
        let labels = table
            .labels()
            .ok_or_else(|| Error::Contract("accuracy needs a labeled table".into()))?;
        if table.is_empty() {
            return Err(Error::Contract("empty evaluation table".into()));
        }
        let hits = (0..table.len()).filter(|&i| self.predict(table.row(i)) == labels[i]).count();
        Ok(hits as f64 / table.len() as f64)
    }
}

/// Softmax regression trained with momentum SGD and step decay.
pub fn train_probe(train: &EmbeddingTable, classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    let labels = train
        .labels()
        .ok_or_else(|| Error::Contract("linear probe needs a labeled train table".into()))?;
    if train.is_empty() {
        return Err(Error::Contract("empty train table".into()));
    }
    let (n, d) = (train.len(), train.dim());
    let (mut mean, mut inv_std) = (vec![0.0; d], vec![1.0; d]);
    if cfg.standardize {
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(train.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for (is, s) in inv_std.iter_mut().zip(&var) {
            let sd = (s / n as f64).sqrt();
            // constant features are centred but not scaled
            *is = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
        }
    }
    let mut probe = LinearProbe {
        mean,
        inv_std,
        weight: vec![0.0; d * classes],
        bias: vec![0.0; classes],
        classes,
    };
    let mut vw = vec![0.0; d * classes];
    let mut vb = vec![0.0; classes];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut logits = vec![0.0; classes];
    let mut x = vec![0.0; d];
    for epoch in 0..cfg.epochs {
        let progress = epoch as f64 / cfg.epochs as f64;
        let drops = cfg.milestones.iter().filter(|&&m| progress >= m).count();
        let lr = cfg.lr * cfg.decay.powi(drops as i32);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; d * classes];
            let mut gb = vec![0.0; classes];
            for &i in batch {
                let row = train.row(i);
                for j in 0..d {
                    x[j] = (row[j] - probe.mean[j]) * probe.inv_std[j];
                }
                probe.logits(row, &mut logits);
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for k in 0..classes {
                    let g = (logits[k] - mx).exp() / z - if k == labels[i] { 1.0 } else { 0.0 };
                    gb[k] += g;
                    for j in 0..d {
                        gw[j * classes + k] += g * x[j];
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for ((w, v), g) in probe.weight.iter_mut().zip(vw.iter_mut()).zip(&gw) {
                *v = cfg.momentum * *v + g * inv + cfg.weight_decay * *w;
                *w -= lr * *v;
            }
            for ((b, v), g) in probe.bias.iter_mut().zip(vb.iter_mut()).zip(&gb) {
                *v = cfg.momentum * *v + g * inv;
                *b -= lr * *v;
            }
        }
    }
    Ok(probe)
}

fn class_count(tables: &[&EmbeddingTable]) -> Result<usize> {
    let mut k = 0;
    for t in tables {
        let l = t
            .labels()
            .ok_or_else(|| Error::Contract("linear probe needs labeled tables".into()))?;
        k = k.max(l.iter().copied().max().map_or(0, |m| m + 1));
    }
    Ok(k.max(1))
}

/// Top-1 test accuracy of a probe trained on `train`.
pub fn linear_probe(train: &EmbeddingTable, test: &EmbeddingTable, cfg: &ProbeConfig) -> Result<f64> {
    if train.dim() != test.dim() {
        return Err(Error::ShapeMismatch {
            op: "linear_probe",
            expected: vec![train.dim()],
            actual: vec![test.dim()],
        });
    }
    let k = class_count(&[train, test])?;
    train_probe(train, k, cfg)?.accuracy(test)
}

/// Embeds a labeled dataset from another domain with a frozen encoder and
/// probes it exactly like [`linear_probe`].
pub fn transfer_probe(
    net: &NetworkSet,
    train: &LabeledDataset,
    test: &LabeledDataset,
    pooling: Pooling,
    cfg: &ProbeConfig,
) -> Result<f64> {
    for ds in [train, test] {
        if ds.image_size().is_some_and(|s| s != net.config().input_size) {
            return Err(Error::ShapeMismatch {
                op: "transfer_probe",
                expected: vec![net.config().input_size],
                actual: vec![ds.image_size().unwrap_or(0)],
            });
        }
    }
    let a = extract_embeddings(net, train, pooling)?;
    let b = extract_embeddings(net, test, pooling)?;
    linear_probe(&a, &b, cfg)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Ids of the `k` rows most cosine-similar to `query`, most similar first;
/// equal similarities are ordered by ascending id. Zero vectors have
/// similarity 0 to everything.
pub fn knn_retrieve(query: &[f64], table: &EmbeddingTable, k: usize) -> Result<Vec<u64>> {
    if table.is_empty() {
        return Err(Error::Contract("retrieval from an empty table".into()));
    }
    if query.len() != table.dim() {
        return Err(Error::ShapeMismatch {
            op: "knn_retrieve",
            expected: vec![table.dim()],
            actual: vec![query.len()],
        });
    }
    if k > table.len() {
        return Err(Error::Contract(format!("k = {k} exceeds the table size {}", table.len())));
    }
    let mut scored: Vec<(f64, u64)> = (0..table.len())
        .map(|i| (cosine(query, table.row(i)), table.ids()[i]))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
}

/// Held-out accuracy of the pretext head's rotation block applied to
/// `F(x3) - F(x1)`, with fresh augmented views drawn from `seed`.
pub fn rotation_accuracy(net: &NetworkSet, data: &LabeledDataset, aug: &AugmentConfig, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for chunk in data.images().chunks(EXTRACT_CHUNK) {
        let bundles = chunk
            .iter()
            .map(|img| make_bundle(img, &mut rng, aug, ViewMode::Rot))
            .collect::<Result<Vec<_>>>()?;
        let batch = ViewBatch::new(net, &bundles)?;
        let labels = batch.rotation.as_ref().expect("rotation mode");
        let mut g = Graph::new();
        let x1 = g.constant(batch.x1.clone());
        let x3 = g.constant(batch.x3.clone().expect("rotation mode"));
        let (_, z1) = net.encode(&mut g, x1, Mode::Eval);
        let (_, z3) = net.encode(&mut g, x3, Mode::Eval);
        let r = net.residual(&mut g, z3, z1)?;
        let logits = net.predict_pretext(&mut g, r)?;
        let t = g.value(logits.rotation);
        for (i, &a) in labels.iter().enumerate() {
            let row = t.row(i);
            let pred = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            hits += (pred == a) as usize;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[&[f64]], ids: &[u64]) -> EmbeddingTable {
        EmbeddingTable::new(rows[0].len(), ids.to_vec(), None, rows.concat()).unwrap()
    }

    #[test]
    fn knn_tie_break_by_id() {
        // cosine sims 0.9, 0.1, 0.9 against (1, 0)
        let a = [0.9, (1.0f64 - 0.81).sqrt()];
        let b = [0.1, (1.0f64 - 0.01).sqrt()];
        let t = table(&[&a, &b, &a], &[2, 1, 0]);
        assert_eq!(knn_retrieve(&[1.0, 0.0], &t, 2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn knn_contracts() {
        let t = table(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 0.0]], &[5, 6, 7]);
        assert_eq!(knn_retrieve(&[0.0, 2.0], &t, 1).unwrap(), vec![6]);
        let mut all = knn_retrieve(&[1.0, 1.0], &t, 3).unwrap();
        all.sort();
        assert_eq!(all, vec![5, 6, 7]);
        assert!(knn_retrieve(&[1.0, 1.0], &t, 4).is_err());
        let empty = EmbeddingTable::new(2, vec![], None, vec![]).unwrap();
        assert!(knn_retrieve(&[1.0, 1.0], &empty, 0).is_err());
    }

    #[test]
    fn table_rejects_duplicates_and_round_trips() {
        assert!(EmbeddingTable::new(1, vec![1, 1], None, vec![0.0, 0.0]).is_err());
        let t = EmbeddingTable::new(2, vec![9, 3], Some(vec![1, 0]), vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let back = EmbeddingTable::from_bytes(&t.to_bytes(), Path::new("t")).unwrap();
        assert_eq!(back, t);
        let unl = EmbeddingTable::new(1, vec![4], None, vec![1.5]).unwrap();
        let bytes = unl.to_bytes();
        assert_eq!(&bytes[21..25], &(-1i32).to_le_bytes());
        assert_eq!(EmbeddingTable::from_bytes(&bytes, Path::new("t")).unwrap(), unl);
        assert!(EmbeddingTable::from_bytes(&bytes[..bytes.len() - 1], Path::new("t")).is_err());
    }

    #[test]
    fn probe_degenerate_cases() {
        let t = EmbeddingTable::new(1, vec![0, 1, 2], Some(vec![0, 0, 0]), vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(linear_probe(&t, &t, &ProbeConfig::default()).unwrap(), 1.0);
        let unl = EmbeddingTable::new(1, vec![0], None, vec![1.0]).unwrap();
        assert!(linear_probe(&unl, &unl, &ProbeConfig::default()).is_err());
        // untrained probe predicts class 0 everywhere
        let bal = EmbeddingTable::new(1, (0..8).collect(), Some((0..8).map(|i| i % 4).collect()), (0..8).map(|i| i as f64).collect()).unwrap();
        let cfg = ProbeConfig {
            epochs: 0,
            ..Default::default()
        };
        assert_eq!(linear_probe(&bal, &bal, &cfg).unwrap(), 0.25);
    }
}
