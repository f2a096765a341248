use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ownership group of a trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Plm,
    Template,
    Verbalizer,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Plm,
        ParamGroup::Template,
        ParamGroup::Verbalizer,
        ParamGroup::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Plm => "plm",
            ParamGroup::Template => "template",
            ParamGroup::Verbalizer => "verbalizer",
            ParamGroup::Head => "head",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub tensor: Tensor<T>,
    pub frozen: bool,
    pub name: String,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat registry of every parameter owned by one model assembly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> ParamId {
        self.params.push(Parameter {
            tensor,
            frozen: false,
            name: name.into(),
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    pub fn set_group_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    /// Number of scalars that an optimizer may update.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        let mut groups: Vec<_> = self
            .params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.group)
            .collect();
        groups.sort();
        groups.dedup();
        groups
    }

    /// Copy of every non-frozen parameter's values, in registry order.
    pub fn snapshot_trainable(&self) -> Vec<(ParamId, Vec<T>)> {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, p)| (id, p.tensor.data().to_vec()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[(ParamId, Vec<T>)]) -> Result<()> {
        for (id, data) in snapshot {
            let p = self.params.get_mut(id.0).ok_or(Error::OutOfRange {
                op: "restore",
                index: id.0,
                len: 0,
            })?;
            if p.tensor.len() != data.len() {
                return Err(Error::Shape {
                    op: "restore",
                    detail: format!("{}: {} vs {}", p.name, p.tensor.len(), data.len()),
                });
            }
            p.tensor.data_mut().copy_from_slice(data);
        }
        Ok(())
    }
}
