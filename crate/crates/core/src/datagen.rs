//! Synthetic embedding worlds and the on-disk embedding manifest.
//!
//! Every attribute owns a unit direction in embedding space. A class center is
//! the sum of its attributes' directions plus a class-specific offset; each
//! sample independently loses every attribute with probability `dropout_rate`
//! and receives isotropic Gaussian noise. Samples far from their center are
//! therefore exactly those missing attribute components.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{ClassId, DatasetSplit, FewShotDataset};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::knowledge::{AttributeEntry, AttributeId, ClassEntry, ClassSplit, PrimitiveKnowledge};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub embed_dim: usize,
    pub semantic_dim: usize,
    pub num_base_classes: usize,
    pub num_val_classes: usize,
    pub num_novel_classes: usize,
    pub num_attributes: usize,
    /// Inclusive range of attributes drawn per class.
    pub attributes_per_class: (usize, usize),
    pub samples_per_class: usize,
    pub noise_std: f64,
    /// Per-dimension noise for validation and novel classes; defaults to `noise_std`.
    pub novel_noise_std: Option<f64>,
    /// Probability that a sample loses each of its class's attribute components.
    pub dropout_rate: f64,
    /// Expected norm of the per-class offset added to the attribute sum.
    pub offset_scale: f64,
    /// Per-dimension noise added to the mean of attribute semantics for class semantics.
    pub semantic_noise: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            semantic_dim: 300,
            num_base_classes: 64,
            num_val_classes: 16,
            num_novel_classes: 20,
            num_attributes: 48,
            attributes_per_class: (3, 6),
            samples_per_class: 100,
            noise_std: 0.1,
            novel_noise_std: None,
            dropout_rate: 0.5,
            offset_scale: 0.5,
            semantic_noise: 0.05,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let counts = [
            ("embed_dim", self.embed_dim),
            ("semantic_dim", self.semantic_dim),
            ("num_base_classes", self.num_base_classes),
            ("num_novel_classes", self.num_novel_classes),
            ("num_attributes", self.num_attributes),
            ("samples_per_class", self.samples_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        let (lo, hi) = self.attributes_per_class;
        if lo == 0 || lo > hi || hi > self.num_attributes {
            return bad(format!(
                "attributes_per_class ({lo}, {hi}) must satisfy 1 <= min <= max <= num_attributes"
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("novel_noise_std", self.novel_noise_std.unwrap_or(0.0)),
            ("offset_scale", self.offset_scale),
            ("semantic_noise", self.semantic_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.num_base_classes + self.num_val_classes + self.num_novel_classes
    }
}

/// A generated world. `*_dropped[i]` counts the attribute components removed
/// from sample `i` of the corresponding split.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub knowledge: PrimitiveKnowledge,
    pub base: FewShotDataset,
    pub val: Option<FewShotDataset>,
    pub novel: FewShotDataset,
    /// Generator ground-truth center of every class.
    pub centers: BTreeMap<ClassId, Vec<f64>>,
    /// Unit attribute directions, by attribute index.
    pub components: Vec<Vec<f64>>,
    pub base_dropped: Vec<usize>,
    pub val_dropped: Vec<usize>,
    pub novel_dropped: Vec<usize>,
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::linalg::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, s, f) = (spec.embed_dim, spec.semantic_dim, spec.num_attributes);

    let components: Vec<Vec<f64>> = (0..f).map(|_| random_unit(&mut rng, d)).collect();
    let attr_semantics: Vec<Vec<f64>> = (0..f).map(|_| random_unit(&mut rng, s)).collect();

    let total = spec.total_classes();
    let (lo, hi) = spec.attributes_per_class;
    let mut subsets: Vec<Vec<usize>> = (0..total)
        .map(|_| {
            let m = rng.random_range(lo..=hi);
            let mut v = sample(&mut rng, f, m).into_vec();
            v.sort_unstable();
            v
        })
        .collect();
    // Every attribute must be observable on some base class.
    for a in 0..f {
        if !subsets[..spec.num_base_classes].iter().any(|sub| sub.contains(&a)) {
            let k = rng.random_range(0..spec.num_base_classes);
            subsets[k].push(a);
            subsets[k].sort_unstable();
        }
    }

    let offset_dist = Normal::new(0.0, spec.offset_scale / (d as f64).sqrt()).expect("valid std");
    let sem_noise = Normal::new(0.0, spec.semantic_noise).expect("valid std");
    let mut classes = Vec::with_capacity(total);
    let mut centers = BTreeMap::new();
    let mut pairs = Vec::new();
    for (k, subset) in subsets.iter().enumerate() {
        let id = ClassId(k as u32);
        let split = if k < spec.num_base_classes {
            ClassSplit::Base
        } else {
            ClassSplit::Novel
        };
        let mut center: Vec<f64> = (0..d).map(|_| offset_dist.sample(&mut rng)).collect();
        let mut semantic = vec![0.0; s];
        for &a in subset {
            for (c, x) in center.iter_mut().zip(&components[a]) {
                *c += x;
            }
            for (h, x) in semantic.iter_mut().zip(&attr_semantics[a]) {
                *h += x / subset.len() as f64;
            }
            pairs.push((id, AttributeId(a as u32)));
        }
        for h in &mut semantic {
            *h += sem_noise.sample(&mut rng);
        }
        classes.push(ClassEntry {
            id,
            name: format!("class_{k:03}"),
            semantic,
            split,
        });
        centers.insert(id, center);
    }
    let attributes = attr_semantics
        .into_iter()
        .enumerate()
        .map(|(a, semantic)| AttributeEntry {
            id: AttributeId(a as u32),
            name: format!("attribute_{a:03}"),
            semantic,
        })
        .collect();
    let knowledge = PrimitiveKnowledge::new(classes, attributes, &pairs)?;

    let mut draw_split = |range: std::ops::Range<usize>, noise: f64, split: DatasetSplit| -> Result<(FewShotDataset, Vec<usize>)> {
        let noise = Normal::new(0.0, noise).expect("valid std");
        let n = range.len() * spec.samples_per_class;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut dropped = Vec::with_capacity(n);
        for k in range {
            let center = &centers[&ClassId(k as u32)];
            for _ in 0..spec.samples_per_class {
                let mut x = center.clone();
                let mut lost = 0;
                for &a in &subsets[k] {
                    if rng.random_bool(spec.dropout_rate) {
                        lost += 1;
                        for (xi, c) in x.iter_mut().zip(&components[a]) {
                            *xi -= c;
                        }
                    }
                }
                for xi in &mut x {
                    *xi += noise.sample(&mut rng);
                }
                data.extend_from_slice(&x);
                labels.push(ClassId(k as u32));
                dropped.push(lost);
            }
        }
        Ok((FewShotDataset::new(d, data, labels, split)?, dropped))
    };
    let nb = spec.num_base_classes;
    let nv = spec.num_val_classes;
    let novel_noise = spec.novel_noise_std.unwrap_or(spec.noise_std);
    let (base, base_dropped) = draw_split(0..nb, spec.noise_std, DatasetSplit::Base)?;
    let (val, val_dropped) = if nv > 0 {
        let (v, dr) = draw_split(nb..nb + nv, novel_noise, DatasetSplit::NovelVal)?;
        (Some(v), dr)
    } else {
        (None, Vec::new())
    };
    let (novel, novel_dropped) = draw_split(nb + nv..total, novel_noise, DatasetSplit::NovelTest)?;

    Ok(World {
        spec: spec.clone(),
        knowledge,
        base,
        val,
        novel,
        centers,
        components,
        base_dropped,
        val_dropped,
        novel_dropped,
    })
}

// ---------------------------------------------------------------------------
// Embedding manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadDtype {
    F32le,
    F64le,
}

impl PayloadDtype {
    pub fn width(self) -> usize {
        match self {
            PayloadDtype::F32le => 4,
            PayloadDtype::F64le => 8,
        }
    }
}

/// JSON manifest describing a row-major little-endian embedding payload and
/// a labels file with one class id per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub d: usize,
    pub n: usize,
    pub classes: Vec<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<DatasetSplit>,
    pub labels_file: String,
    pub payload_file: String,
    pub payload_dtype: PayloadDtype,
    /// SHA-256 of the payload file, lowercase hex.
    pub checksum: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `<stem>.json`, `<stem>.labels` and `<stem>.<f32|f64>` next to each other.
pub fn save_embeddings(dataset: &FewShotDataset, manifest_path: &Path, dtype: PayloadDtype) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad manifest path {}", manifest_path.display())))?;
    let payload_file = format!(
        "{stem}.{}",
        match dtype {
            PayloadDtype::F32le => "f32",
            PayloadDtype::F64le => "f64",
        }
    );
    let labels_file = format!("{stem}.labels");
    let mut payload = Vec::with_capacity(dataset.data().len() * dtype.width());
    for &v in dataset.data() {
        match dtype {
            PayloadDtype::F32le => payload.extend_from_slice(&(v as f32).to_le_bytes()),
            PayloadDtype::F64le => payload.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let mut labels = String::with_capacity(dataset.len() * 4);
    for l in dataset.labels() {
        labels.push_str(&l.0.to_string());
        labels.push('\n');
    }
    let manifest = EmbeddingManifest {
        d: dataset.dim(),
        n: dataset.len(),
        classes: dataset.classes().collect(),
        split: Some(dataset.split()),
        labels_file: labels_file.clone(),
        payload_file: payload_file.clone(),
        payload_dtype: dtype,
        checksum: sha256_hex(&payload),
    };
    write_atomic(&dir.join(&payload_file), &payload)?;
    write_atomic(&dir.join(&labels_file), labels.as_bytes())?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(manifest_path, json.as_bytes())
}

/// Loads and validates a dataset described by an embedding manifest.
/// `default_split` applies when the manifest carries no split tag.
pub fn load_embeddings(manifest_path: &Path, default_split: DatasetSplit) -> Result<FewShotDataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: EmbeddingManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let format_err = |path: &Path, message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if manifest.d == 0 || manifest.n == 0 {
        return Err(format_err(manifest_path, "d and n must be positive".into()));
    }

    let payload_path: PathBuf = dir.join(&manifest.payload_file);
    let payload = std::fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let expected = (manifest.n * manifest.d * manifest.payload_dtype.width()) as u64;
    let actual = payload.len() as u64;
    if actual < expected {
        return Err(Error::Truncated {
            path: payload_path,
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(format_err(
            &payload_path,
            format!("payload has {actual} bytes, manifest (d={}, n={}) implies {expected}", manifest.d, manifest.n),
        ));
    }
    let digest = sha256_hex(&payload);
    if !digest.eq_ignore_ascii_case(&manifest.checksum) {
        return Err(Error::Checksum {
            path: payload_path,
            expected: manifest.checksum.clone(),
            actual: digest,
        });
    }
    let data: Vec<f64> = match manifest.payload_dtype {
        PayloadDtype::F32le => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        PayloadDtype::F64le => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };

    let labels_path = dir.join(&manifest.labels_file);
    let labels_text = std::fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let known: std::collections::HashSet<ClassId> = manifest.classes.iter().copied().collect();
    let mut labels = Vec::with_capacity(manifest.n);
    for (line_no, line) in labels_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id: u32 = line
            .parse()
            .map_err(|_| format_err(&labels_path, format!("line {}: invalid class id {line:?}", line_no + 1)))?;
        if !known.contains(&ClassId(id)) {
            return Err(format_err(
                &labels_path,
                format!("line {}: label {id} references unknown class", line_no + 1),
            ));
        }
        labels.push(ClassId(id));
    }
    if labels.len() != manifest.n {
        return Err(format_err(
            &labels_path,
            format!("expected {} labels, found {}", manifest.n, labels.len()),
        ));
    }
    FewShotDataset::new(manifest.d, data, labels, manifest.split.unwrap_or(default_split))
}

// ---------------------------------------------------------------------------
// World directories
// ---------------------------------------------------------------------------

pub const WORLD_SPEC_FILE: &str = "world.json";
pub const KNOWLEDGE_FILE: &str = "knowledge.json";
pub const CENTERS_FILE: &str = "centers.json";
pub const BASE_MANIFEST: &str = "base.json";
pub const VAL_MANIFEST: &str = "val.json";
pub const NOVEL_MANIFEST: &str = "novel.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CenterRecord {
    class: ClassId,
    center: Vec<f64>,
}

/// Writes every file of a world directory. The directory must exist.
pub fn save_world(world: &World, dir: &Path, dtype: PayloadDtype) -> Result<()> {
    save_embeddings(&world.base, &dir.join(BASE_MANIFEST), dtype)?;
    if let Some(val) = &world.val {
        save_embeddings(val, &dir.join(VAL_MANIFEST), dtype)?;
    }
    save_embeddings(&world.novel, &dir.join(NOVEL_MANIFEST), dtype)?;
    let knowledge = crate::knowledge::knowledge_to_json(&world.knowledge);
    write_atomic(&dir.join(KNOWLEDGE_FILE), knowledge.as_bytes())?;
    let centers: Vec<CenterRecord> = world
        .centers
        .iter()
        .map(|(&class, c)| CenterRecord { class, center: c.clone() })
        .collect();
    let json = serde_json::to_string(&centers).expect("centers serialize");
    write_atomic(&dir.join(CENTERS_FILE), json.as_bytes())?;
    // Written last: its presence marks a complete world.
    let json = serde_json::to_string_pretty(&world.spec).expect("spec serializes");
    write_atomic(&dir.join(WORLD_SPEC_FILE), json.as_bytes())
}

/// A world directory as read back from disk. Worlds built from external
/// embeddings may lack a validation split and ground-truth centers.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldFiles {
    pub knowledge: PrimitiveKnowledge,
    pub base: FewShotDataset,
    pub val: Option<FewShotDataset>,
    pub novel: FewShotDataset,
    pub centers: Option<BTreeMap<ClassId, Vec<f64>>>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads `dir`, taking knowledge from `knowledge` when given.
pub fn load_world(dir: &Path, knowledge: Option<&Path>) -> Result<WorldFiles> {
    let knowledge_path = knowledge.map_or_else(|| dir.join(KNOWLEDGE_FILE), Path::to_path_buf);
    let knowledge = crate::knowledge::load_knowledge(&knowledge_path)?;
    let base = load_embeddings(&dir.join(BASE_MANIFEST), DatasetSplit::Base)?;
    let val_path = dir.join(VAL_MANIFEST);
    let val = if val_path.exists() {
        Some(load_embeddings(&val_path, DatasetSplit::NovelVal)?)
    } else {
        None
    };
    let novel = load_embeddings(&dir.join(NOVEL_MANIFEST), DatasetSplit::NovelTest)?;
    for ds in std::iter::once(&base).chain(&val).chain(std::iter::once(&novel)) {
        if ds.dim() != base.dim() {
            return Err(Error::dim("embedding dimension across splits", base.dim(), ds.dim()));
        }
        for class in ds.classes() {
            knowledge.class_index(class)?;
        }
    }
    let centers_path = dir.join(CENTERS_FILE);
    let centers = if centers_path.exists() {
        let records: Vec<CenterRecord> = read_json(&centers_path)?;
        Some(records.into_iter().map(|r| (r.class, r.center)).collect())
    } else {
        None
    };
    Ok(WorldFiles {
        knowledge,
        base,
        val,
        novel,
        centers,
    })
}
