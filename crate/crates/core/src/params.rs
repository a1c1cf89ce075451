//! Named parameter vectors spanning model (θ) and proposal (φ) components.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::MAX_PARAMS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Model,
    Proposal,
}

/// Which components an operation touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamMask {
    Model,
    Proposal,
    All,
}

impl ParamMask {
    pub fn includes(self, group: ParamGroup) -> bool {
        matches!(
            (self, group),
            (ParamMask::All, _)
                | (ParamMask::Model, ParamGroup::Model)
                | (ParamMask::Proposal, ParamGroup::Proposal)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: f64,
}

/// Ordered, uniquely named real parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    entries: Vec<Param>,
}

impl ParamVector {
    pub fn new(entries: Vec<Param>) -> Result<Self> {
        if entries.len() > MAX_PARAMS {
            return Err(Error::InvalidParameter(format!(
                "{} parameters exceeds the supported maximum of {MAX_PARAMS}",
                entries.len()
            )));
        }
        for (i, p) in entries.iter().enumerate() {
            if !p.value.is_finite() {
                return Err(Error::InvalidParameter(format!("{} is not finite", p.name)));
            }
            if entries[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::InvalidParameter(format!("duplicate name {}", p.name)));
            }
        }
        Ok(ParamVector { entries })
    }

    /// Builds a vector from `(name, group, value)` triples.
    pub fn from_triples(items: &[(&str, ParamGroup, f64)]) -> Result<Self> {
        Self::new(
            items
                .iter()
                .map(|(n, g, v)| Param {
                    name: n.to_string(),
                    group: *g,
                    value: *v,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|p| p.value).collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|p| p.name == name).map(|p| p.value)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    /// Same names and groups, new values. Values are not checked for
    /// finiteness so gradients and diverged iterates can be represented.
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: values.len(),
            });
        }
        let entries = self
            .entries
            .iter()
            .zip(values)
            .map(|(p, &value)| Param { value, ..p.clone() })
            .collect();
        Ok(ParamVector { entries })
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        match self.entries.iter_mut().find(|p| p.name == name) {
            Some(p) => {
                p.value = value;
                Ok(())
            }
            None => Err(Error::InvalidParameter(format!("unknown parameter {name}"))),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.with_values(&vec![0.0; self.len()]).expect("same length")
    }

    /// Components outside `mask` set to zero.
    pub fn masked(&self, mask: ParamMask) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|p| Param {
                value: if mask.includes(p.group) { p.value } else { 0.0 },
                ..p.clone()
            })
            .collect();
        ParamVector { entries }
    }

    fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        if let Some((a, b)) = self
            .entries
            .iter()
            .zip(&other.entries)
            .find(|(a, b)| a.name != b.name)
        {
            return Err(Error::InvalidParameter(format!(
                "component mismatch: {} vs {}",
                a.name, b.name
            )));
        }
        Ok(())
    }

    /// `self + scale * other`, componentwise.
    pub fn add_scaled(&self, other: &ParamVector, scale: f64) -> Result<Self> {
        self.check_layout(other)?;
        let values: Vec<f64> = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.value + scale * b.value)
            .collect();
        self.with_values(&values)
    }

    pub fn scale(&self, s: f64) -> Self {
        let values: Vec<f64> = self.entries.iter().map(|p| p.value * s).collect();
        self.with_values(&values).expect("same length")
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.is_finite())
    }
}
