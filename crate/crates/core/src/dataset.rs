//! Labeled embedding collections.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class identifier, shared by datasets and the knowledge file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSplit {
    Base,
    NovelVal,
    NovelTest,
}

/// An `n × d` embedding matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotDataset {
    dim: usize,
    data: Vec<f64>,
    labels: Vec<ClassId>,
    split: DatasetSplit,
    by_class: BTreeMap<ClassId, Vec<usize>>,
}

impl FewShotDataset {
    pub fn new(dim: usize, data: Vec<f64>, labels: Vec<ClassId>, split: DatasetSplit) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        if labels.is_empty() {
            return Err(Error::Insufficient("dataset has no samples".into()));
        }
        if data.len() != dim * labels.len() {
            return Err(Error::dim("embedding matrix size", dim * labels.len(), data.len()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row {}", pos / dim)));
        }
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (i, &c) in labels.iter().enumerate() {
            by_class.entry(c).or_default().push(i);
        }
        Ok(Self {
            dim,
            data,
            labels,
            split,
            by_class,
        })
    }

    /// Builds a dataset from per-row vectors.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<ClassId>, split: DatasetSplit) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(dim * rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::dim(format!("row {i}"), dim, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data, labels, split)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> DatasetSplit {
        self.split
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> ClassId {
        self.labels[i]
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Class ids in ascending order.
    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.by_class.keys().copied()
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    /// Row indices of one class, in dataset order.
    pub fn indices_of(&self, class: ClassId) -> Option<&[usize]> {
        self.by_class.get(&class).map(Vec::as_slice)
    }

    pub fn rows_of(&self, class: ClassId) -> impl Iterator<Item = &[f64]> + '_ {
        self.by_class
            .get(&class)
            .into_iter()
            .flatten()
            .map(move |&i| self.row(i))
    }
}
