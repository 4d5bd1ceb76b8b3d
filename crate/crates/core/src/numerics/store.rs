//! Named parameter storage and graph binding.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names
//! ("encoder.visual.w", "fda.hyper.out.b", ...). Iteration order is the
//! sorted name order, which is what makes optimizer sweeps and checkpoint
//! layout deterministic. A [`ParamBinder`] injects store entries into an
//! execution context and remembers which handles belong to trainable names so
//! the trainer can route gradients back by name.

use std::collections::BTreeMap;

use super::tape::Context;
use super::tensor::Tensor;
use super::{NumericsError, Result};

#[derive(Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a fresh parameter; duplicate names are a wiring bug.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        let prior = self.map.insert(name.clone(), t);
        assert!(prior.is_none(), "parameter {name:?} registered twice");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| NumericsError::MissingParam { name: name.to_string() })
    }

    /// Replace the value of an existing parameter (optimizer updates,
    /// checkpoint restore). Shape must be unchanged.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .map
            .get_mut(name)
            .ok_or_else(|| NumericsError::MissingParam { name: name.to_string() })?;
        if slot.shape() != t.shape() {
            return Err(NumericsError::ParamShape {
                name: name.to_string(),
                got: t.shape().to_vec(),
                want: slot.shape().to_vec(),
            });
        }
        *slot = t;
        Ok(())
    }

    /// Sorted-name iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count, optionally restricted to a name prefix.
    pub fn scalar_count(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }
}

/// Binds store entries into a context, tracking trainable handles by name.
pub struct ParamBinder<'a, C: Context> {
    pub ctx: &'a mut C,
    store: &'a ParamStore,
    tracked: Vec<(String, C::Handle)>,
}

impl<'a, C: Context> ParamBinder<'a, C> {
    pub fn new(ctx: &'a mut C, store: &'a ParamStore) -> Self {
        Self { ctx, store, tracked: Vec::new() }
    }

    /// Bind one parameter. Trainable bindings are recorded so a later
    /// backward pass can be read out per name.
    pub fn bind(&mut self, name: &str, trainable: bool) -> Result<C::Handle> {
        let t = self.store.get(name)?;
        let h = self.ctx.param(t, trainable);
        if trainable {
            self.tracked.push((name.to_string(), h));
        }
        Ok(h)
    }

    /// The (name, handle) pairs bound as trainable, in bind order.
    pub fn into_tracked(self) -> Vec<(String, C::Handle)> {
        self.tracked
    }
}
