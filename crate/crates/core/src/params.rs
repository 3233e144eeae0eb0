//! Named parameter tensors with their roles and the frozen starting point.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Backbone,
    Fc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub role: Role,
    pub value: Tensor,
}

/// Ordered parameter collection. The FC entries (the head) must form one
/// contiguous group; `start_point` holds the frozen reference weights ω_s.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    start_point: Option<Vec<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, role: Role, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        if role == Role::Fc {
            if let Some(last_fc) = self.entries.iter().rposition(|e| e.role == Role::Fc) {
                if last_fc + 1 != self.entries.len() {
                    return Err(invalid(format!("FC parameter `{name}` would split the FC group")));
                }
            }
        }
        self.entries.push(ParamEntry { name, role, value });
        self.start_point = None;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.entries[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].value
    }

    pub fn role(&self, i: usize) -> Role {
        self.entries[i].role
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| invalid(format!("unknown parameter `{name}`")))?;
        if self.entries[i].value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                left: self.entries[i].value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.entries[i].value = value;
        Ok(())
    }

    /// Index range of the FC group.
    pub fn fc_range(&self) -> Result<Range<usize>> {
        let first = self
            .entries
            .iter()
            .position(|e| e.role == Role::Fc)
            .ok_or_else(|| contract("parameter store has no FC group"))?;
        let len = self.entries[first..].iter().take_while(|e| e.role == Role::Fc).count();
        Ok(first..first + len)
    }

    /// Freezes the current values as the starting point ω_s. FC entries get
    /// a zero reference: the head has no source counterpart.
    pub fn freeze_start_point(&mut self) {
        self.start_point = Some(
            self.entries
                .iter()
                .map(|e| match e.role {
                    Role::Backbone => e.value.clone(),
                    Role::Fc => Tensor::zeros(e.value.shape()),
                })
                .collect(),
        );
    }

    pub fn set_start_point(&mut self, start: Vec<Tensor>) -> Result<()> {
        if start.len() != self.entries.len() {
            return Err(invalid(format!(
                "start point has {} tensors, store has {}",
                start.len(),
                self.entries.len()
            )));
        }
        for (e, s) in self.entries.iter().zip(&start) {
            if e.value.shape() != s.shape() {
                return Err(Error::Shape {
                    op: "set_start_point",
                    left: e.value.shape().to_vec(),
                    right: s.shape().to_vec(),
                });
            }
        }
        self.start_point = Some(start);
        Ok(())
    }

    pub fn start_point(&self) -> Option<&[Tensor]> {
        self.start_point.as_deref()
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.role == b.role && a.value.bitwise_eq(&b.value))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Per-parameter tensors aligned index-by-index with a [`ParamStore`].
/// Used for gradients and for momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            names: params.names().map(str::to_string).collect(),
            values: params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Checks that shapes agree entry-by-entry with `params`.
    pub fn check_aligned(&self, params: &ParamStore) -> Result<()> {
        if self.values.len() != params.len() {
            return Err(contract(format!(
                "{} gradient tensors for {} parameters",
                self.values.len(),
                params.len()
            )));
        }
        for (i, v) in self.values.iter().enumerate() {
            if v.shape() != params.value(i).shape() || self.names[i] != params.entries()[i].name {
                return Err(contract(format!(
                    "gradient `{}` {:?} does not match parameter `{}` {:?}",
                    self.names[i],
                    v.shape(),
                    params.entries()[i].name,
                    params.value(i).shape()
                )));
            }
        }
        Ok(())
    }
}
