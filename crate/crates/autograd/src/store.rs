use std::sync::atomic::{AtomicU32, Ordering};

use indexmap::IndexMap;
use ndarray::ArrayD;
use rand::Rng;

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

/// Identifies one tensor inside one [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub(crate) store: u32,
    pub(crate) index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Updated by the optimizer.
    Trainable,
    /// Updated out of band (running statistics, EMA codebooks).
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry {
    value: ArrayD<f64>,
    kind: Kind,
}

/// Ordered, named collection of tensors owned by one model.
///
/// Insertion order is stable, which keeps optimizer state, checkpoints and
/// gradient norms reproducible.
#[derive(Debug)]
pub struct ParamStore {
    id: u32,
    entries: IndexMap<String, Entry>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        // A clone is a distinct store: graphs must not confuse the two.
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: IndexMap::new(),
        }
    }

    pub fn store_id(&self) -> u32 {
        self.id
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>, kind: Kind) -> ParamId {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter name {name}"
        );
        let (index, _) = self.entries.insert_full(name.to_string(), Entry { value, kind });
        ParamId {
            store: self.id,
            index: index as u32,
        }
    }

    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.id && (id.index as usize) < self.entries.len()
    }

    fn check(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.id, "parameter belongs to another store");
        id.index as usize
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.entries[self.check(id)].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        let i = self.check(id);
        &mut self.entries[i].value
    }

    pub fn kind(&self, id: ParamId) -> Kind {
        self.entries[self.check(id)].kind
    }

    pub fn name(&self, id: ParamId) -> &str {
        let i = self.check(id);
        self.entries.get_index(i).map(|(k, _)| k.as_str()).unwrap()
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(|i| ParamId {
            store: self.id,
            index: i as u32,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(|i| ParamId {
            store: self.id,
            index: i as u32,
        })
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == Kind::Trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>, Kind)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.value, e.kind))
    }

    /// Number of scalar trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == Kind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Bitwise equality of every tensor (names, shapes and values).
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .iter()
                        .zip(b.value.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Copies values from `other` for every name present in both stores
    /// with matching shapes; returns the names that were not found.
    pub fn load_from<'a>(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<&'a ArrayD<f64>>,
    ) -> Vec<String> {
        let mut missing = Vec::new();
        for (name, entry) in self.entries.iter_mut() {
            match lookup(name) {
                Some(v) if v.shape() == entry.value.shape() => entry.value = v.clone(),
                _ => missing.push(name.clone()),
            }
        }
        missing
    }
}

/// Hierarchical name builder used while constructing modules, in the spirit
/// of a var-builder: `vb.pp("conv0").weight(..)` registers `prefix.conv0.weight`.
pub struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn pp(&mut self, name: &str) -> Builder<'_, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Uniform(-bound, bound) trainable tensor.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let value = ArrayD::from_shape_vec(shape.to_vec(), data).unwrap();
        let full = self.full(name);
        self.store.insert(&full, value, Kind::Trainable)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64, kind: Kind) -> ParamId {
        let full = self.full(name);
        self.store
            .insert(&full, ArrayD::from_elem(shape.to_vec(), v), kind)
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }
}
