//! Primitive knowledge (class–attribute associations plus semantic embeddings)
//! and the statistics derived from base-class embeddings: class prototypes and
//! attribute feature distributions.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, FewShotDataset};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributeId(pub u32);

impl fmt::Display for AttributeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassSplit {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: ClassId,
    pub name: String,
    pub semantic: Vec<f64>,
    pub split: ClassSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeEntry {
    pub id: AttributeId,
    pub name: String,
    pub semantic: Vec<f64>,
}

/// Binary class–attribute association matrix with semantic embeddings for
/// every class and attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveKnowledge {
    classes: Vec<ClassEntry>,
    attributes: Vec<AttributeEntry>,
    /// Row-major `num_classes × num_attributes`, entries in {0, 1}.
    association: Vec<u8>,
    semantic_dim: usize,
    class_index: HashMap<ClassId, usize>,
    attribute_index: HashMap<AttributeId, usize>,
}

impl PrimitiveKnowledge {
    pub fn new(
        classes: Vec<ClassEntry>,
        attributes: Vec<AttributeEntry>,
        associations: &[(ClassId, AttributeId)],
    ) -> Result<Self> {
        let semantic_dim = validate_semantics(&classes, &attributes)?;
        let class_index = index_unique(classes.iter().map(|c| c.id), "classes", |id| id.0)?;
        let attribute_index =
            index_unique(attributes.iter().map(|a| a.id), "attributes", |id| id.0)?;
        let mut association = vec![0u8; classes.len() * attributes.len()];
        for (i, (c, a)) in associations.iter().enumerate() {
            let ci = *class_index.get(c).ok_or_else(|| Error::Knowledge {
                field: format!("associations[{i}][0]"),
                message: format!("unknown class id {c}"),
            })?;
            let ai = *attribute_index.get(a).ok_or_else(|| Error::Knowledge {
                field: format!("associations[{i}][1]"),
                message: format!("unknown attribute id {a}"),
            })?;
            association[ci * attributes.len() + ai] = 1;
        }
        Ok(Self {
            classes,
            attributes,
            association,
            semantic_dim,
            class_index,
            attribute_index,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn semantic_dim(&self) -> usize {
        self.semantic_dim
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn attributes(&self) -> &[AttributeEntry] {
        &self.attributes
    }

    pub fn class_index(&self, id: ClassId) -> Result<usize> {
        self.class_index.get(&id).copied().ok_or(Error::UnknownClass(id.0))
    }

    pub fn attribute_index(&self, id: AttributeId) -> Result<usize> {
        self.attribute_index
            .get(&id)
            .copied()
            .ok_or(Error::UnknownAttribute(id.0))
    }

    pub fn class_semantic(&self, class_idx: usize) -> &[f64] {
        &self.classes[class_idx].semantic
    }

    pub fn attribute_semantic(&self, attr_idx: usize) -> &[f64] {
        &self.attributes[attr_idx].semantic
    }

    pub fn is_associated(&self, class_idx: usize, attr_idx: usize) -> bool {
        self.association[class_idx * self.attributes.len() + attr_idx] == 1
    }

    /// The association row of one class (R_k).
    pub fn row(&self, class_idx: usize) -> &[u8] {
        let f = self.attributes.len();
        &self.association[class_idx * f..(class_idx + 1) * f]
    }

    pub fn association(&self) -> &[u8] {
        &self.association
    }

    /// Attribute indices with `R_{ka} = 1`, ascending.
    pub fn associated_attributes(&self, class_idx: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(class_idx)
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == 1)
            .map(|(a, _)| a)
    }

    pub fn base_class_ids(&self) -> Vec<ClassId> {
        self.ids_with_split(ClassSplit::Base)
    }

    pub fn novel_class_ids(&self) -> Vec<ClassId> {
        self.ids_with_split(ClassSplit::Novel)
    }

    fn ids_with_split(&self, split: ClassSplit) -> Vec<ClassId> {
        self.classes
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.id)
            .collect()
    }

    /// Returns a copy with a replaced association matrix (same shape).
    pub fn with_association(&self, association: Vec<u8>) -> Result<Self> {
        if association.len() != self.association.len() {
            return Err(Error::dim("association matrix", self.association.len(), association.len()));
        }
        if association.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("association entries must be 0 or 1".into()));
        }
        Ok(Self {
            association,
            ..self.clone()
        })
    }

    /// Drops attributes that no base class possesses. Returns the pruned
    /// knowledge and the removed attribute ids.
    pub fn prune_unseen_attributes(&self) -> (Self, Vec<AttributeId>) {
        let f = self.attributes.len();
        let seen: Vec<bool> = (0..f)
            .map(|a| {
                self.classes
                    .iter()
                    .enumerate()
                    .any(|(k, c)| c.split == ClassSplit::Base && self.is_associated(k, a))
            })
            .collect();
        let removed: Vec<AttributeId> = self
            .attributes
            .iter()
            .zip(&seen)
            .filter(|(_, &s)| !s)
            .map(|(a, _)| a.id)
            .collect();
        if removed.is_empty() {
            return (self.clone(), removed);
        }
        let attributes: Vec<AttributeEntry> = self
            .attributes
            .iter()
            .zip(&seen)
            .filter(|(_, &s)| s)
            .map(|(a, _)| a.clone())
            .collect();
        let mut pairs = Vec::new();
        for (k, c) in self.classes.iter().enumerate() {
            for a in self.associated_attributes(k) {
                if seen[a] {
                    pairs.push((c.id, self.attributes[a].id));
                }
            }
        }
        let pruned = Self::new(self.classes.clone(), attributes, &pairs)
            .expect("pruning preserves validity");
        (pruned, removed)
    }
}

fn validate_semantics(classes: &[ClassEntry], attributes: &[AttributeEntry]) -> Result<usize> {
    if classes.is_empty() {
        return Err(Error::Knowledge {
            field: "classes".into(),
            message: "at least one class is required".into(),
        });
    }
    if attributes.is_empty() {
        return Err(Error::Knowledge {
            field: "attributes".into(),
            message: "at least one attribute is required".into(),
        });
    }
    let s = classes[0].semantic.len();
    if s == 0 {
        return Err(Error::Knowledge {
            field: "classes[0].semantic".into(),
            message: "semantic vectors must be non-empty".into(),
        });
    }
    let named = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (format!("classes[{i}].semantic"), &c.semantic))
        .chain(
            attributes
                .iter()
                .enumerate()
                .map(|(i, a)| (format!("attributes[{i}].semantic"), &a.semantic)),
        );
    for (field, v) in named {
        if v.len() != s {
            return Err(Error::Knowledge {
                field,
                message: format!("expected dimension {s}, found {}", v.len()),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Knowledge {
                field,
                message: "non-finite entry".into(),
            });
        }
    }
    Ok(s)
}

fn index_unique<T: Copy + Eq + std::hash::Hash>(
    ids: impl Iterator<Item = T>,
    field: &str,
    raw: impl Fn(T) -> u32,
) -> Result<HashMap<T, usize>> {
    let mut map = HashMap::new();
    for (i, id) in ids.enumerate() {
        if map.insert(id, i).is_some() {
            return Err(Error::Knowledge {
                field: format!("{field}[{i}].id"),
                message: format!("duplicate id {}", raw(id)),
            });
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Knowledge file
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KnowledgeFile {
    classes: Vec<ClassEntry>,
    attributes: Vec<AttributeEntry>,
    associations: Vec<(ClassId, AttributeId)>,
}

/// Parses a knowledge document. Attributes unseen in every base class are
/// removed (with a warning), since no feature distribution exists for them.
pub fn knowledge_from_json(text: &str, path: &Path) -> Result<PrimitiveKnowledge> {
    let file: KnowledgeFile = serde_json::from_str(text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let pairs = file.associations;
    let k = PrimitiveKnowledge::new(file.classes, file.attributes, &pairs)?;
    let (pruned, removed) = k.prune_unseen_attributes();
    if !removed.is_empty() {
        warn!(
            "{}: removed {} attribute(s) unseen in base classes: {:?}",
            path.display(),
            removed.len(),
            removed.iter().map(|a| a.0).collect::<Vec<_>>()
        );
    }
    Ok(pruned)
}

pub fn load_knowledge(path: &Path) -> Result<PrimitiveKnowledge> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    knowledge_from_json(&text, path)
}

pub fn knowledge_to_json(knowledge: &PrimitiveKnowledge) -> String {
    let mut associations = Vec::new();
    for (k, c) in knowledge.classes.iter().enumerate() {
        for a in knowledge.associated_attributes(k) {
            associations.push((c.id, knowledge.attributes[a].id));
        }
    }
    let file = KnowledgeFile {
        classes: knowledge.classes.clone(),
        attributes: knowledge.attributes.clone(),
        associations,
    };
    serde_json::to_string_pretty(&file).expect("knowledge serializes")
}

// ---------------------------------------------------------------------------
// Base prototypes and attribute statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub prototype: Vec<f64>,
    pub sample_count: usize,
}

/// Full-class mean embeddings (`p_k^real`) keyed by class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypeTable {
    dim: usize,
    entries: BTreeMap<ClassId, ClassPrototype>,
}

impl ClassPrototypeTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, class: ClassId) -> Option<&ClassPrototype> {
        self.entries.get(&class)
    }

    pub fn prototype(&self, class: ClassId) -> Result<&[f64]> {
        self.entries
            .get(&class)
            .map(|e| e.prototype.as_slice())
            .ok_or(Error::UnknownClass(class.0))
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Averages the embeddings of every class present in `embeddings`.
pub fn compute_base_prototypes(embeddings: &FewShotDataset) -> Result<ClassPrototypeTable> {
    let dim = embeddings.dim();
    let mut entries = BTreeMap::new();
    for class in embeddings.classes() {
        let prototype = linalg::mean_of(embeddings.rows_of(class), dim)?;
        let sample_count = embeddings.indices_of(class).map_or(0, <[usize]>::len);
        entries.insert(
            class,
            ClassPrototype {
                prototype,
                sample_count,
            },
        );
    }
    if entries.is_empty() {
        return Err(Error::Insufficient("no classes to average".into()));
    }
    Ok(ClassPrototypeTable { dim, entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeStat {
    pub id: AttributeId,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub support_count: usize,
}

/// Per-attribute feature distributions `N(mean, diag(std²))`, in the
/// attribute order of the knowledge they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeStats {
    dim: usize,
    entries: Vec<AttributeStat>,
}

impl AttributeStats {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lookup by attribute index (position in the knowledge's attribute list).
    pub fn get(&self, attr_idx: usize) -> Result<&AttributeStat> {
        self.entries
            .get(attr_idx)
            .ok_or(Error::UnknownAttribute(attr_idx as u32))
    }

    pub fn entries(&self) -> &[AttributeStat] {
        &self.entries
    }
}

/// Population mean and standard deviation of all base-class samples whose
/// class carries each attribute. Samples of classes that the knowledge marks
/// as novel are ignored.
pub fn compute_attribute_stats(
    embeddings: &FewShotDataset,
    knowledge: &PrimitiveKnowledge,
) -> Result<AttributeStats> {
    let dim = embeddings.dim();
    let f = knowledge.num_attributes();
    // support[a] lists the base classes with R_{ka} = 1 that have samples.
    let mut support: Vec<Vec<ClassId>> = vec![Vec::new(); f];
    for class in embeddings.classes() {
        let Ok(k) = knowledge.class_index(class) else {
            continue;
        };
        if knowledge.classes()[k].split != ClassSplit::Base {
            continue;
        }
        for a in knowledge.associated_attributes(k) {
            support[a].push(class);
        }
    }
    let empty: Vec<u32> = support
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_empty())
        .map(|(a, _)| knowledge.attributes()[a].id.0)
        .collect();
    if !empty.is_empty() {
        return Err(Error::EmptyAttributeSupport(empty));
    }

    let entries = support
        .iter()
        .enumerate()
        .map(|(a, classes)| {
            let rows = || classes.iter().flat_map(|&c| embeddings.rows_of(c));
            let mean = linalg::mean_of(rows(), dim)?;
            let mut var = vec![0.0; dim];
            let mut n = 0usize;
            for row in rows() {
                for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let dlt = x - m;
                    *v += dlt * dlt;
                }
                n += 1;
            }
            let std = var.iter().map(|v| (v / n as f64).sqrt()).collect();
            Ok(AttributeStat {
                id: knowledge.attributes()[a].id,
                mean,
                std,
                support_count: n,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttributeStats { dim, entries })
}

/// Flips every association entry independently with probability `level`.
pub fn inject_knowledge_noise(
    knowledge: &PrimitiveKnowledge,
    level: f64,
    seed: u64,
) -> Result<PrimitiveKnowledge> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidArgument(format!(
            "noise level must lie in [0, 1], got {level}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flipped = knowledge
        .association()
        .iter()
        .map(|&r| if rng.random_bool(level) { 1 - r } else { r })
        .collect();
    knowledge.with_association(flipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// Mean over dimensions of the per-dimension population variance.
    pub per_class: BTreeMap<ClassId, f64>,
    /// Average of `per_class` values.
    pub average: f64,
    /// Classes skipped for having fewer than two samples.
    pub skipped: usize,
}

pub fn cluster_variance_report(embeddings: &FewShotDataset) -> VarianceReport {
    let dim = embeddings.dim();
    let mut per_class = BTreeMap::new();
    let mut skipped = 0;
    for class in embeddings.classes() {
        let n = embeddings.indices_of(class).map_or(0, <[usize]>::len);
        if n < 2 {
            skipped += 1;
            continue;
        }
        let mean = linalg::mean_of(embeddings.rows_of(class), dim).expect("non-empty class");
        let mut total = 0.0;
        for row in embeddings.rows_of(class) {
            total += row
                .iter()
                .zip(&mean)
                .map(|(x, m)| (x - m) * (x - m))
                .sum::<f64>();
        }
        per_class.insert(class, total / (n as f64 * dim as f64));
    }
    if skipped > 0 {
        warn!("variance report skipped {skipped} class(es) with fewer than 2 samples");
    }
    let average = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    VarianceReport {
        per_class,
        average,
        skipped,
    }
}
