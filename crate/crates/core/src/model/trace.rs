use alloc::string::String;
use alloc::vec::Vec;

use crate::numerics::{Graph, Tensor, Var};

/// Named intermediate activations (`y`, per-head `q`/`k`/`v`/`alpha`, `z`,
/// `h`, `s`, `r`) captured during a forward pass. Recording is a no-op
/// unless the trace was created with [`ActivationTrace::enabled`].
#[derive(Clone, Debug, Default)]
pub struct ActivationTrace {
    enabled: bool,
    entries: Vec<(String, Tensor)>,
}

impl ActivationTrace {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn enabled() -> Self {
        Self {
            enabled: true,
            entries: Vec::new(),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&mut self, name: impl Into<String>, value: &Tensor) {
        if self.enabled {
            self.entries.push((name.into(), value.clone()));
        }
    }

    pub fn record_var(&mut self, g: &Graph<'_>, name: impl Into<String>, v: Var) {
        if self.enabled {
            self.entries.push((name.into(), g.value(v).clone()));
        }
    }

    /// Most recent activation recorded under `name`.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().rev().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
