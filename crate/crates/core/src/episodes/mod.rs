//! N-way K-shot episodes, cosine classification and the evaluation harness.

mod meta;
mod report;

pub use meta::{meta_loss_and_grad, meta_train, MetaTrainConfig};
pub use report::{
    moving_average, prototype_similarity_report, rank_curve_report, RankCurve, SimilarityReport,
};

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, FewShotDataset};
use crate::error::{Error, Result};
use crate::fusion::{fuse_prototypes, mean_fuse, Fusion, FusionConfig};
use crate::knowledge::{AttributeStats, PrimitiveKnowledge};
use crate::linalg::{self, argmax, cosine, softmax};
use crate::protocomnet::{Mode, ProtoComNet};

pub const DEFAULT_N_WAY: usize = 5;
pub const DEFAULT_QUERIES: usize = 15;
pub const DEFAULT_EPISODES: usize = 600;
pub const THREADS_ENV: &str = "PROTOFUSE_THREADS";

/// Sample indices into a dataset. `support[c]` and `query[c]` belong to `roster[c]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub roster: Vec<ClassId>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.roster.len()
    }

    pub fn position(&self, class: ClassId) -> Result<usize> {
        self.roster
            .iter()
            .position(|&c| c == class)
            .ok_or(Error::UnknownClass(class.0))
    }

    /// Support rows followed by query rows, with roster labels for supports only.
    pub fn transductive_set<'a>(&self, dataset: &'a FewShotDataset) -> (Vec<&'a [f64]>, Vec<Option<usize>>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, idx) in self.support.iter().enumerate() {
            for &i in idx {
                rows.push(dataset.row(i));
                labels.push(Some(c));
            }
        }
        for idx in &self.query {
            for &i in idx {
                rows.push(dataset.row(i));
                labels.push(None);
            }
        }
        (rows, labels)
    }

    /// `(row, roster index)` for every query sample.
    pub fn queries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.query
            .iter()
            .enumerate()
            .flat_map(|(c, idx)| idx.iter().map(move |&i| (i, c)))
    }

    pub fn num_queries(&self) -> usize {
        self.query.iter().map(Vec::len).sum()
    }
}

pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &FewShotDataset,
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::InvalidArgument("N and K must be at least 1".into()));
    }
    let need = k_shot + m_query;
    let eligible: Vec<ClassId> = dataset
        .classes()
        .filter(|&c| dataset.indices_of(c).map_or(0, <[usize]>::len) >= need)
        .collect();
    if eligible.len() < n_way {
        return Err(Error::Insufficient(format!(
            "{n_way}-way episodes need classes with {need} samples; only {} of {} qualify",
            eligible.len(),
            dataset.num_classes()
        )));
    }
    let roster: Vec<ClassId> = sample(rng, eligible.len(), n_way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut support = Vec::with_capacity(n_way);
    let mut query = Vec::with_capacity(n_way);
    for &class in &roster {
        let pool = dataset.indices_of(class).expect("eligible class");
        let picked: Vec<usize> = sample(rng, pool.len(), need).into_iter().map(|i| pool[i]).collect();
        support.push(picked[..k_shot].to_vec());
        query.push(picked[k_shot..].to_vec());
    }
    Ok(Episode { roster, support, query })
}

pub fn mean_prototype(dataset: &FewShotDataset, episode: &Episode, class: ClassId) -> Result<Vec<f64>> {
    let c = episode.position(class)?;
    linalg::mean_of(episode.support[c].iter().map(|&i| dataset.row(i)), dataset.dim())
}

/// Cosine similarity of `query` to every prototype.
pub fn similarities(query: &[f64], prototypes: &[Vec<f64>]) -> Result<Vec<f64>> {
    prototypes.iter().map(|p| cosine(query, p)).collect()
}

/// `softmax_c(γ · cos(query, p_c))`.
pub fn classify(query: &[f64], prototypes: &[Vec<f64>], scale: f64) -> Result<Vec<f64>> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    if prototypes.is_empty() {
        return Err(Error::Insufficient("no prototypes to classify against".into()));
    }
    let logits: Vec<f64> = similarities(query, prototypes)?.into_iter().map(|s| scale * s).collect();
    Ok(softmax(&logits))
}

/// Roster index of the most similar prototype. Equal to the argmax of
/// [`classify`] for every positive scale; ties go to the lowest index.
pub fn predict(query: &[f64], prototypes: &[Vec<f64>]) -> Result<usize> {
    Ok(argmax(&similarities(query, prototypes)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeMode {
    MeanOnly,
    CompletedOnly,
    MeanFusion,
    GaussFusion,
}

impl PrototypeMode {
    pub const ALL: [PrototypeMode; 4] = [
        PrototypeMode::MeanOnly,
        PrototypeMode::CompletedOnly,
        PrototypeMode::MeanFusion,
        PrototypeMode::GaussFusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PrototypeMode::MeanOnly => "mean-only",
            PrototypeMode::CompletedOnly => "completed-only",
            PrototypeMode::MeanFusion => "mean-fusion",
            PrototypeMode::GaussFusion => "gauss-fusion",
        }
    }

    fn needs_completion(self) -> bool {
        self != PrototypeMode::MeanOnly
    }
}

impl fmt::Display for PrototypeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrototypeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s:?}")))
    }
}

/// Everything prototype estimation needs besides the episode itself.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub net: &'a ProtoComNet,
    pub knowledge: &'a PrimitiveKnowledge,
    pub stats: &'a AttributeStats,
    pub fusion: FusionConfig,
}

/// Prototypes produced for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePrototypes {
    pub mean_based: Vec<Vec<f64>>,
    /// Present for every mode except mean-only.
    pub completed: Option<Vec<Vec<f64>>>,
    pub fusion: Option<Fusion>,
    /// The prototypes the classifier uses under the requested mode.
    pub classifier: Vec<Vec<f64>>,
}

impl Pipeline<'_> {
    /// Test-mode completion of every roster class.
    pub fn complete(&self, roster: &[ClassId], mean_based: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        // Test mode never draws from the generator.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        roster
            .iter()
            .zip(mean_based)
            .map(|(&c, p)| self.net.complete_prototype(self.knowledge, self.stats, c, p, Mode::Test, &mut unused))
            .collect()
    }

    pub fn prototypes(&self, dataset: &FewShotDataset, episode: &Episode, mode: PrototypeMode) -> Result<EpisodePrototypes> {
        let mean_based = episode
            .roster
            .iter()
            .map(|&c| mean_prototype(dataset, episode, c))
            .collect::<Result<Vec<_>>>()?;
        if !mode.needs_completion() {
            return Ok(EpisodePrototypes {
                classifier: mean_based.clone(),
                mean_based,
                completed: None,
                fusion: None,
            });
        }
        let completed = self.complete(&episode.roster, &mean_based)?;
        let (classifier, fusion) = match mode {
            PrototypeMode::MeanOnly => unreachable!(),
            PrototypeMode::CompletedOnly => (completed.clone(), None),
            PrototypeMode::MeanFusion => (
                mean_based
                    .iter()
                    .zip(&completed)
                    .map(|(p, q)| mean_fuse(p, q))
                    .collect::<Result<Vec<_>>>()?,
                None,
            ),
            PrototypeMode::GaussFusion => {
                let (rows, labels) = episode.transductive_set(dataset);
                let f = fuse_prototypes(&rows, &labels, &mean_based, &completed, &self.fusion)?;
                (f.fused.clone(), Some(f))
            }
        };
        Ok(EpisodePrototypes {
            mean_based,
            completed: Some(completed),
            fusion,
            classifier,
        })
    }

    /// Predicted roster index of every query, in [`Episode::queries`] order.
    pub fn episode_predictions(&self, dataset: &FewShotDataset, episode: &Episode, mode: PrototypeMode) -> Result<Vec<usize>> {
        let protos = self.prototypes(dataset, episode, mode)?;
        episode
            .queries()
            .map(|(i, _)| predict(dataset.row(i), &protos.classifier))
            .collect()
    }

    /// Fraction of the episode's queries assigned to their own class.
    pub fn episode_accuracy(&self, dataset: &FewShotDataset, episode: &Episode, mode: PrototypeMode) -> Result<f64> {
        let total = episode.num_queries();
        if total == 0 {
            return Err(Error::Insufficient("episode has no queries".into()));
        }
        let predictions = self.episode_predictions(dataset, episode, mode)?;
        let correct = predictions
            .iter()
            .zip(episode.queries())
            .filter(|(&p, (_, c))| p == *c)
            .count();
        Ok(correct as f64 / total as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_way: DEFAULT_N_WAY,
            k_shot: 1,
            m_query: DEFAULT_QUERIES,
            episodes: DEFAULT_EPISODES,
            seed: 0,
        }
    }
}

/// RNG of episode `index` under master seed `seed`.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// The episodes an evaluation with `config` visits, in index order.
pub fn episode_schedule(dataset: &FewShotDataset, config: &EpisodeConfig) -> Result<Vec<Episode>> {
    (0..config.episodes)
        .map(|i| {
            sample_episode(
                dataset,
                config.n_way,
                config.k_shot,
                config.m_query,
                &mut episode_rng(config.seed, i),
            )
        })
        .collect()
}

/// Runs `f` on a pool capped by `PROTOFUSE_THREADS` when set.
pub fn with_eval_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Applies `f` to every episode index in parallel; results come back in index order.
pub(crate) fn map_episodes<T: Send>(
    dataset: &FewShotDataset,
    config: &EpisodeConfig,
    f: impl Fn(&Episode) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if config.episodes == 0 {
        return Err(Error::InvalidArgument("episode count must be at least 1".into()));
    }
    with_eval_pool(|| {
        (0..config.episodes)
            .into_par_iter()
            .map(|i| {
                let episode = sample_episode(
                    dataset,
                    config.n_way,
                    config.k_shot,
                    config.m_query,
                    &mut episode_rng(config.seed, i),
                )?;
                f(&episode)
            })
            .collect::<Result<Vec<T>>>()
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: PrototypeMode,
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub seed: u64,
    pub per_episode: Vec<f64>,
}

/// `1.96 · σ / √n` with σ the population standard deviation.
pub fn ci95_half_width(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    1.96 * var.sqrt() / n.sqrt()
}

impl EvalReport {
    pub fn from_accuracies(mode: PrototypeMode, config: &EpisodeConfig, per_episode: Vec<f64>) -> Self {
        let n = per_episode.len().max(1) as f64;
        Self {
            mode,
            n_way: config.n_way,
            k_shot: config.k_shot,
            episodes: per_episode.len(),
            mean_acc: per_episode.iter().sum::<f64>() / n,
            ci95: ci95_half_width(&per_episode),
            seed: config.seed,
            per_episode,
        }
    }
}

pub fn evaluate(
    pipeline: &Pipeline<'_>,
    dataset: &FewShotDataset,
    mode: PrototypeMode,
    config: &EpisodeConfig,
) -> Result<EvalReport> {
    let accs = map_episodes(dataset, config, |ep| pipeline.episode_accuracy(dataset, ep, mode))?;
    Ok(EvalReport::from_accuracies(mode, config, accs))
}
