use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Mat;
use crate::error::{Error, Result};

/// The five independently optimized parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Graph encoder.
    ThetaE,
    /// Rationale vectors and their Gaussian heads.
    ThetaR,
    /// Local-embedding projections and the classifier.
    ThetaCls,
    /// Graph decoder.
    ThetaD,
    /// Variational posterior.
    Phi,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::ThetaE,
        ParamGroup::ThetaR,
        ParamGroup::ThetaCls,
        ParamGroup::ThetaD,
        ParamGroup::Phi,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::ThetaE => "theta_e",
            ParamGroup::ThetaR => "theta_r",
            ParamGroup::ThetaCls => "theta_cls",
            ParamGroup::ThetaD => "theta_d",
            ParamGroup::Phi => "phi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ParamGroup::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    group: ParamGroup,
    name: String,
    value: Mat,
}

/// Named parameter arrays, addressed as `group/name`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn insert(&mut self, group: ParamGroup, name: &str, value: Mat) -> ParamId {
        let key = format!("{group}/{name}");
        assert!(!self.index.contains_key(&key), "duplicate parameter {key}");
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            group,
            name: name.to_string(),
            value,
        });
        self.index.insert(key, id);
        id
    }

    /// Glorot-uniform weight of shape `fan_in × fan_out`.
    pub fn glorot(&mut self, group: ParamGroup, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Mat::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
        self.insert(group, name, value)
    }

    pub fn zeros(&mut self, group: ParamGroup, name: &str, rows: usize, cols: usize) -> ParamId {
        self.insert(group, name, Mat::zeros((rows, cols)))
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

    pub fn ids_in(&self, groups: &[ParamGroup]) -> Vec<ParamId> {
        self.ids().filter(|&id| groups.contains(&self.group(id))).collect()
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn name(&self, id: ParamId) -> String {
        let e = &self.entries[id.0];
        format!("{}/{}", e.group, e.name)
    }

    pub fn lookup(&self, key: &str) -> Option<ParamId> {
        self.index.get(key).copied()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn num_scalars(&self, groups: &[ParamGroup]) -> usize {
        self.ids_in(groups).iter().map(|&id| self.value(id).len()).sum()
    }

    /// Bitwise equality of all entries in `groups`.
    pub fn same_values(&self, other: &ParamStore, groups: &[ParamGroup]) -> bool {
        self.ids_in(groups).into_iter().all(|id| {
            let (a, b) = (self.value(id), other.value(id));
            a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }

    /// Binary container: magic, entry count, then per entry the `group/name`
    /// key, rows, cols and little-endian `f64` data in row-major order.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for id in self.ids() {
            let key = self.name(id);
            let value = self.value(id);
            w.write_u32::<LittleEndian>(key.len() as u32)?;
            w.write_all(key.as_bytes())?;
            w.write_u64::<LittleEndian>(value.nrows() as u64)?;
            w.write_u64::<LittleEndian>(value.ncols() as u64)?;
            for &x in value.iter() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    /// Overwrites every entry from a container written by [`write_to`];
    /// keys and shapes must match exactly.
    ///
    /// [`write_to`]: ParamStore::write_to
    pub fn read_from(&mut self, mut r: impl Read) -> Result<()> {
        let bad = |m: String| Error::Checkpoint(m);
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a parameter container".into()));
        }
        let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        if count != self.entries.len() {
            return Err(bad(format!("{count} entries, model has {}", self.entries.len())));
        }
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut key = vec![0u8; len];
            r.read_exact(&mut key).map_err(io)?;
            let key = String::from_utf8(key).map_err(|e| bad(e.to_string()))?;
            let id = self.lookup(&key).ok_or_else(|| bad(format!("unknown entry {key}")))?;
            let rows = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            let cols = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            if self.value(id).dim() != (rows, cols) {
                return Err(bad(format!("{key}: shape {rows}x{cols}, model {:?}", self.value(id).dim())));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(r.read_f64::<LittleEndian>().map_err(io)?);
            }
            *self.value_mut(id) = Mat::from_shape_vec((rows, cols), data).expect("checked shape");
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"GFNPPRM1";

/// Gradient arrays aligned with a [`ParamStore`]; absent means zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn zeros_like_none(store: &ParamStore) -> Self {
        Gradients {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: Mat) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    pub fn merge(&mut self, other: Gradients) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= k;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn flat(&self, store: &ParamStore, groups: &[ParamGroup]) -> Vec<f64> {
        let mut out = Vec::new();
        for id in store.ids_in(groups) {
            match self.get(id) {
                Some(g) => out.extend(g.iter().copied()),
                None => out.extend(std::iter::repeat_n(0.0, store.value(id).len())),
            }
        }
        out
    }

    pub fn is_zero_for(&self, store: &ParamStore, groups: &[ParamGroup]) -> bool {
        self.flat(store, groups).iter().all(|&g| g == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn container_round_trip() {
        let mut store = ParamStore::default();
        store.insert(ParamGroup::ThetaE, "w", array![[1.0, -2.5], [0.125, 3.0]]);
        store.insert(ParamGroup::Phi, "b", array![[f64::MIN_POSITIVE, 1e300]]);
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();

        let mut other = store.clone();
        *other.value_mut(ParamId(0)) *= 0.0;
        other.read_from(buf.as_slice()).unwrap();
        assert!(other.same_values(&store, &ParamGroup::ALL));

        let mut wrong = ParamStore::default();
        wrong.insert(ParamGroup::ThetaE, "w", Mat::zeros((3, 2)));
        wrong.insert(ParamGroup::Phi, "b", Mat::zeros((1, 2)));
        assert!(wrong.read_from(buf.as_slice()).is_err());
    }
}
