//! Binary checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PRLX"  u32 version  u64 config_len  config (JSON TrainConfig)
//! u32 n_online  tensor * n_online
//! u32 n_target  tensor * n_target        (0 under the stop-gradient rule)
//! tensor := u32 name_len  name (UTF-8)  u32 ndim  u64 dim * ndim  f32 * prod(dims)
//! ```
//!
//! Parameter names are dotted paths, e.g. `encoder.backbone.stage0.conv.weight`,
//! `encoder.projector.out_bn.running_mean`, `predictor.out.bias`,
//! `pretext_head.rotation.weight`. Target tensors reuse the online names.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{NetworkSet, TargetRule};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"PRLX";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub online: Vec<(String, Tensor)>,
    pub target: Option<Vec<(String, Tensor)>>,
}

fn named(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect()
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, net: &NetworkSet) -> Self {
        let target = match net.rule() {
            TargetRule::StopGradient => None,
            TargetRule::Ema { .. } => Some(named(net.target_store())),
        };
        Self {
            config: config.clone(),
            online: named(net.online()),
            target,
        }
    }

    /// Rebuilds the networks described by the stored config and loads values.
    pub fn restore(&self) -> Result<NetworkSet> {
        let rule = self.config.target_rule();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = NetworkSet::new(&self.config.model, rule, &mut rng)?;
        net.load_values(&self.online, self.target.as_deref())?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        write_tensors(&mut out, &self.online);
        write_tensors(&mut out, self.target.as_deref().unwrap_or(&[]));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let len = r.u64()? as usize;
        let config: TrainConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let online = read_tensors(&mut r)?;
        let target = read_tensors(&mut r)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            online,
            target: (!target.is_empty()).then_some(target),
        })
    }

    /// Writes through a temporary sibling and renames, so an interrupted
    /// write never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_tensors(out: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_tensors(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor)>> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflows")))?;
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}
