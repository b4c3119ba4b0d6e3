//! Named parameter collections.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CbtError, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
/// Standard deviation of a unit normal truncated to `[-2, 2]`.
const TRUNCATED_UNIT_STD: f64 = 0.879_625_661_034_239_8;

/// Ordered map from parameter name to tensor, with per-group freeze flags.
///
/// A parameter's group is the part of its name before the first `.`
/// (`visual.layer0.attn.wq` belongs to `visual`). Frozen groups are bound
/// into graphs as constants and never receive optimizer updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

/// How a parameter is filled at initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal truncated at two standard deviations, rescaled to std 0.02.
    Normal,
    /// Truncated normal with row 0 held at zero (a padding embedding).
    NormalPadRow,
    Zeros,
    Ones,
}

/// Name, shape, and initializer of one parameter a module needs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * INIT_STD / TRUNCATED_UNIT_STD;
        }
    }
}

/// Fresh store for `specs`, filled per each spec's [`Init`] from one seeded
/// stream consumed in spec order.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal => (0..n).map(|_| truncated_normal(&mut rng)).collect(),
            Init::NormalPadRow => {
                let cols = spec.shape.last().copied().unwrap_or(1);
                (0..n)
                    .map(|i| if i < cols { 0.0 } else { truncated_normal(&mut rng) })
                    .collect()
            }
        };
        store.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?)?;
    }
    Ok(store)
}

/// Store with every entry uniform in `[-scale, scale]` (layer-norm gains
/// around one, padding rows zero). Meant for gradient and oracle checks,
/// where near-zero initial weights would hide errors.
pub fn random_params(specs: &[ParamSpec], seed: u64, scale: f64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let cols = spec.shape.last().copied().unwrap_or(1);
        let data = (0..n)
            .map(|i| match spec.init {
                Init::Ones => 1.0 + rng.random_range(-0.2..0.2),
                Init::NormalPadRow if i < cols => 0.0,
                _ => rng.random_range(-scale..scale),
            })
            .collect();
        store.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?)?;
    }
    Ok(store)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(CbtError::Config(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| CbtError::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Replaces a tensor's values; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| CbtError::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(CbtError::Shape(format!(
                "parameter {name}: {:?} cannot become {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.tensors.keys().map(|n| group_of(n).to_string()).collect()
    }

    pub fn freeze_group(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn unfreeze_group(&mut self, group: &str) {
        self.frozen.remove(group);
    }

    /// Freezes every group except the listed ones.
    pub fn freeze_all_but(&mut self, keep: &[&str]) {
        for g in self.groups() {
            if keep.contains(&g.as_str()) {
                self.frozen.remove(&g);
            } else {
                self.frozen.insert(g);
            }
        }
    }

    pub fn frozen_groups(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(group_of(name))
    }

    /// Bitwise equality of every tensor (freeze flags are ignored).
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Bitwise equality restricted to one group.
    pub fn group_bit_eq(&self, other: &ParamStore, group: &str) -> bool {
        let pick = |s: &ParamStore| {
            s.tensors
                .iter()
                .filter(|(n, _)| group_of(n) == group)
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect::<Vec<_>>()
        };
        let (a, b) = (pick(self), pick(other));
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}
