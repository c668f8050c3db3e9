//! Named parameter arrays and their tape bindings.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::tensor::{Scalar, Tape, Var};

/// All learned parameters, keyed by name. Iteration order is the sorted name
/// order everywhere, which keeps initialization, updates, and serialization
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<F: Scalar> {
    arrays: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore {
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        let name = name.into();
        let prev = self.arrays.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        self.arrays
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<F>)> {
        self.arrays.iter_mut()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays
            .values()
            .all(|a| a.iter().all(|x| x.is_finite()))
    }

    /// Euclidean norm per parameter, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.arrays
            .iter()
            .map(|(n, a)| {
                let sq: f64 = a.iter().map(|x| x.as_f64() * x.as_f64()).sum();
                (n.clone(), sq.sqrt())
            })
            .collect()
    }

    /// Push every parameter onto a tape as a leaf, returning the bindings.
    pub fn bind(&self, tape: &mut Tape<F>) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.arrays {
            vars.insert(name.clone(), tape.leaf(value.clone()));
        }
        BoundParams { vars }
    }
}

/// Map from parameter name to its leaf on the current tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Bindings over externally created leaves (gradient-check harnesses).
    pub fn from_map(vars: BTreeMap<String, Var>) -> Self {
        BoundParams { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter not bound: {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
