use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Descriptive tags stored alongside the tensors of a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// Free-form tag such as `"encoder"`, `"heads"` or `"surgery"`.
    pub kind: String,
    pub feature_dim: usize,
    pub layers: usize,
}

/// Ordered layer-name → tensor map; iteration order is serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterMap {
    pub meta: ModelMeta,
    entries: IndexMap<String, Tensor>,
}

impl ParameterMap {
    pub fn new(meta: ModelMeta) -> Self {
        ParameterMap {
            meta,
            entries: IndexMap::new(),
        }
    }

    /// Appends a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate layer name {name:?}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Replaces the tensor stored under an existing name, keeping its position.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("no layer named {name:?}")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape("replace", slot.shape(), tensor.shape()));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Usage(format!("missing layer {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Applies `f` to every tensor, keeping names, order and metadata.
    pub fn try_map(
        &self,
        mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>,
    ) -> Result<ParameterMap> {
        let mut out = ParameterMap::new(self.meta.clone());
        for (name, t) in self.iter() {
            out.insert(name, f(name, t)?)?;
        }
        Ok(out)
    }

    /// Same names, same order, same shapes, bit-identical values.
    pub fn bit_eq(&self, other: &ParameterMap) -> bool {
        self.meta == other.meta
            && self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Largest absolute elementwise difference to a compatible map.
    pub fn max_abs_diff(&self, other: &ParameterMap) -> Result<f64> {
        assert_compatible(&[self, other])?;
        let mut worst = 0.0f64;
        for (name, a) in self.iter() {
            let b = other.require(name)?;
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((*x as f64 - *y as f64).abs());
            }
        }
        Ok(worst)
    }

    /// FNV-1a over names, shapes and raw value bits; used to assert that
    /// training leaves frozen weights untouched.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

/// Succeeds only if every map has the same layer names with the same shapes.
pub fn assert_compatible(maps: &[&ParameterMap]) -> Result<()> {
    let Some((first, rest)) = maps.split_first() else {
        return Ok(());
    };
    for other in rest {
        let a: BTreeSet<&str> = first.names().collect();
        let b: BTreeSet<&str> = other.names().collect();
        let diff: Vec<&str> = a.symmetric_difference(&b).copied().collect();
        if !diff.is_empty() {
            return Err(Error::Incompatible(format!(
                "layer sets differ: {}",
                diff.join(", ")
            )));
        }
        let mismatched: Vec<String> = first
            .iter()
            .filter_map(|(name, t)| {
                let o = other.get(name)?;
                (o.shape() != t.shape())
                    .then(|| format!("{name} {:?} vs {:?}", t.shape(), o.shape()))
            })
            .collect();
        if !mismatched.is_empty() {
            return Err(Error::Incompatible(format!(
                "shape mismatch: {}",
                mismatched.join(", ")
            )));
        }
    }
    Ok(())
}
