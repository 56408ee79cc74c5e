use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{map_episodes, EpisodeConfig, Pipeline, PrototypeMode};
use crate::dataset::{ClassId, FewShotDataset};
use crate::error::{Error, Result};
use crate::linalg::cosine;

/// Mean cosine similarity of each prototype estimate to the true class center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub seed: u64,
    pub mean_based: f64,
    pub completed: f64,
    pub fused: f64,
}

fn center(centers: &BTreeMap<ClassId, Vec<f64>>, class: ClassId) -> Result<&[f64]> {
    centers
        .get(&class)
        .map(Vec::as_slice)
        .ok_or(Error::UnknownClass(class.0))
}

pub fn prototype_similarity_report(
    pipeline: &Pipeline<'_>,
    dataset: &FewShotDataset,
    centers: &BTreeMap<ClassId, Vec<f64>>,
    config: &EpisodeConfig,
) -> Result<SimilarityReport> {
    let per_episode = map_episodes(dataset, config, |episode| {
        let protos = pipeline.prototypes(dataset, episode, PrototypeMode::GaussFusion)?;
        let completed = protos.completed.as_ref().expect("gauss fusion completes");
        let mut sums = [0.0; 3];
        for (c, &class) in episode.roster.iter().enumerate() {
            let truth = center(centers, class)?;
            sums[0] += cosine(&protos.mean_based[c], truth)?;
            sums[1] += cosine(&completed[c], truth)?;
            sums[2] += cosine(&protos.classifier[c], truth)?;
        }
        Ok(sums.map(|s| s / episode.n_way() as f64))
    })?;
    let n = per_episode.len() as f64;
    let avg = |j: usize| per_episode.iter().map(|s| s[j]).sum::<f64>() / n;
    Ok(SimilarityReport {
        n_way: config.n_way,
        k_shot: config.k_shot,
        episodes: per_episode.len(),
        seed: config.seed,
        mean_based: avg(0),
        completed: avg(1),
        fused: avg(2),
    })
}

/// Trailing-window means over every full window (`len - window + 1` values).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    if values.len() < window {
        return Vec::new();
    }
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Similarity to the true center as a function of how atypical the single
/// support sample is. Rank 0 is each class's sample closest to its center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCurve {
    pub window: usize,
    /// Classes whose sample count forced a smaller window.
    pub shrunk_classes: Vec<ClassId>,
    /// Smoothed `cos(x, center)` of the raw sample.
    pub raw: Vec<f64>,
    /// Smoothed `cos(p̂, center)` of the completed one-shot prototype.
    pub completed: Vec<f64>,
}

impl RankCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,raw,completed\n");
        for (i, (r, c)) in self.raw.iter().zip(&self.completed).enumerate() {
            out.push_str(&format!("{i},{r:.6},{c:.6}\n"));
        }
        out
    }
}

pub fn rank_curve_report(
    pipeline: &Pipeline<'_>,
    dataset: &FewShotDataset,
    centers: &BTreeMap<ClassId, Vec<f64>>,
    window: usize,
) -> Result<RankCurve> {
    if window == 0 {
        return Err(Error::InvalidArgument("moving-average window must be at least 1".into()));
    }
    let mut raw_curves = Vec::new();
    let mut completed_curves = Vec::new();
    let mut shrunk = Vec::new();
    for class in dataset.classes() {
        let truth = center(centers, class)?;
        let mut scored: Vec<(f64, usize)> = dataset
            .indices_of(class)
            .expect("listed class")
            .iter()
            .map(|&i| Ok((cosine(dataset.row(i), truth)?, i)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut completed = Vec::with_capacity(scored.len());
        for &(_, i) in &scored {
            let p_hat = pipeline.complete(&[class], &[dataset.row(i).to_vec()])?.remove(0);
            completed.push(cosine(&p_hat, truth)?);
        }
        let raw: Vec<f64> = scored.iter().map(|s| s.0).collect();
        let w = if raw.len() < window {
            log::warn!("class {class} has {} samples; smoothing window reduced from {window}", raw.len());
            shrunk.push(class);
            raw.len()
        } else {
            window
        };
        raw_curves.push(moving_average(&raw, w));
        completed_curves.push(moving_average(&completed, w));
    }
    let len = raw_curves.iter().map(Vec::len).min().unwrap_or(0);
    let average = |curves: &[Vec<f64>]| -> Vec<f64> {
        (0..len)
            .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
            .collect()
    };
    Ok(RankCurve {
        window,
        shrunk_classes: shrunk,
        raw: average(&raw_curves),
        completed: average(&completed_curves),
    })
}
