//! Named parameter and buffer storage shared by every network in a run.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
    /// Fixed per-channel input standardization constants.
    InputStat,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        matches!(
            self,
            ParamKind::Weight | ParamKind::Bias | ParamKind::NormScale | ParamKind::NormShift
        )
    }

    /// Biases and normalization affine terms are the ones a decay mask skips.
    pub fn is_bias_or_norm(self) -> bool {
        matches!(
            self,
            ParamKind::Bias | ParamKind::NormScale | ParamKind::NormShift
        )
    }

    /// Non-trainable state copied verbatim into an EMA target.
    pub fn is_copied_state(self) -> bool {
        matches!(
            self,
            ParamKind::RunningMean | ParamKind::RunningVar | ParamKind::InputStat
        )
    }
}

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Predictor,
    PretextHead,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        kind: ParamKind,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            kind,
            group,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind.trainable())
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).len()).sum()
    }

    /// Order-sensitive FNV-1a digest over every stored value, used to prove
    /// an operation left the parameters untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in &self.entries {
            for v in e.value.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}
