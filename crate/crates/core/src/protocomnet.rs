//! The encoder–aggregator–decoder completion network.
//!
//! An incomplete prototype `p_k` and the attribute features of class `k` are
//! encoded into a shared latent space, combined by attention weights
//! `α_{ka} = R_{ka} · g_a(p_k ‖ h_k ‖ h_a)` as `g_k = Σ_a α_{ka} z'_a + z'_k`,
//! and decoded back to a completed prototype.

use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, FewShotDataset};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::knowledge::{AttributeStats, ClassPrototypeTable, PrimitiveKnowledge};
use crate::linalg;
use crate::nn::{self, Activation, Mlp, ParamId, ParamStore, Sgd, SgdConfig, Tape};

/// Layer widths. Defaults follow the reference architecture: a 256-unit
/// encoder, a 300-unit aggregator hidden layer and a 512-unit decoder hidden
/// layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub semantic_dim: usize,
    pub encoder_units: usize,
    pub aggregator_hidden: usize,
    pub decoder_hidden: usize,
}

impl ArchConfig {
    pub fn new(embed_dim: usize, semantic_dim: usize) -> Self {
        Self {
            embed_dim,
            semantic_dim,
            encoder_units: 256,
            aggregator_hidden: 300,
            decoder_hidden: 512,
        }
    }

    pub fn aggregator_input(&self) -> usize {
        self.embed_dim + 2 * self.semantic_dim
    }
}

pub const DEFAULT_INITIAL_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoComNet {
    arch: ArchConfig,
    store: ParamStore,
    encoder: Mlp,
    aggregator: Mlp,
    decoder: Mlp,
    log_scale: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Attribute features are drawn from their distributions.
    Train,
    /// Attribute features are replaced by their means.
    Test,
}

/// Draws `z_a`: `μ_a + σ_a ⊙ ε` in train mode, exactly `μ_a` in test mode.
pub fn sample_attribute_feature<R: RngCore + ?Sized>(
    stats: &AttributeStats,
    attr_idx: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let stat = stats.get(attr_idx)?;
    Ok(match mode {
        Mode::Test => stat.mean.clone(),
        Mode::Train => stat
            .mean
            .iter()
            .zip(&stat.std)
            .map(|(&m, &s)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + s * eps
            })
            .collect(),
    })
}

/// Output of [`ProtoComNet::aggregate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub g: Vec<f64>,
    /// `(attribute index, α)` for every latent passed in, in input order.
    pub alphas: Vec<(usize, f64)>,
}

struct AttrTrace {
    encoder: Tape,
    latent: Vec<f64>,
    aggregator: Tape,
    alpha: f64,
}

/// Everything needed to backpropagate one completion.
pub struct CompletionTrace {
    attrs: Vec<AttrTrace>,
    proto_encoder: Tape,
    decoder: Tape,
    pub output: Vec<f64>,
}

impl ProtoComNet {
    pub fn new(arch: ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Mlp::new(
            &mut store,
            "encoder",
            &[arch.embed_dim, arch.encoder_units],
            Activation::Relu,
            &mut rng,
        );
        let aggregator = Mlp::new(
            &mut store,
            "aggregator",
            &[arch.aggregator_input(), arch.aggregator_hidden, 1],
            Activation::Identity,
            &mut rng,
        );
        let decoder = Mlp::new(
            &mut store,
            "decoder",
            &[arch.encoder_units, arch.decoder_hidden, arch.embed_dim],
            Activation::Identity,
            &mut rng,
        );
        let log_scale = store.add("log_scale", &[], vec![DEFAULT_INITIAL_SCALE.ln()], false);
        Self {
            arch,
            store,
            encoder,
            aggregator,
            decoder,
            log_scale,
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn aggregator(&self) -> &Mlp {
        &self.aggregator
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    /// The classifier scale γ (kept positive by storing `ln γ`).
    pub fn scale(&self) -> f64 {
        self.store.value(self.log_scale)[0].exp()
    }

    pub fn set_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
        }
        self.store.value_mut(self.log_scale)[0] = scale.ln();
        Ok(())
    }

    pub(crate) fn log_scale_id(&self) -> ParamId {
        self.log_scale
    }

    /// `z' = relu(W x + b)`.
    pub fn encode(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.encoder.infer(&self.store, input)
    }

    fn aggregator_input(&self, knowledge: &PrimitiveKnowledge, class_idx: usize, p_k: &[f64], attr_idx: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.arch.aggregator_input());
        x.extend_from_slice(p_k);
        x.extend_from_slice(knowledge.class_semantic(class_idx));
        x.extend_from_slice(knowledge.attribute_semantic(attr_idx));
        x
    }

    fn check_inputs(&self, knowledge: &PrimitiveKnowledge, class_idx: usize, p_k: &[f64]) -> Result<()> {
        if p_k.len() != self.arch.embed_dim {
            return Err(Error::dim("incomplete prototype", self.arch.embed_dim, p_k.len()));
        }
        if knowledge.semantic_dim() != self.arch.semantic_dim {
            return Err(Error::dim("semantic vectors", self.arch.semantic_dim, knowledge.semantic_dim()));
        }
        if class_idx >= knowledge.num_classes() {
            return Err(Error::InvalidArgument(format!("class index {class_idx} out of range")));
        }
        Ok(())
    }

    /// Attention-weighted sum of attribute latents plus the prototype latent.
    /// Attributes not associated with the class get `α = 0` and skip the MLP.
    pub fn aggregate(
        &self,
        knowledge: &PrimitiveKnowledge,
        class_idx: usize,
        p_k: &[f64],
        attr_latents: &[(usize, Vec<f64>)],
        proto_latent: &[f64],
    ) -> Result<Aggregation> {
        self.check_inputs(knowledge, class_idx, p_k)?;
        let mut g = proto_latent.to_vec();
        let mut alphas = Vec::with_capacity(attr_latents.len());
        for (a, latent) in attr_latents {
            if *a >= knowledge.num_attributes() {
                return Err(Error::UnknownAttribute(*a as u32));
            }
            if latent.len() != g.len() {
                return Err(Error::dim("attribute latent", g.len(), latent.len()));
            }
            let alpha = if knowledge.is_associated(class_idx, *a) {
                let x = self.aggregator_input(knowledge, class_idx, p_k, *a);
                self.aggregator.infer(&self.store, &x)?[0]
            } else {
                0.0
            };
            if alpha != 0.0 {
                for (gi, &z) in g.iter_mut().zip(latent) {
                    *gi += alpha * z;
                }
            }
            alphas.push((*a, alpha));
        }
        Ok(Aggregation { g, alphas })
    }

    /// Completes `p_k` for class `class` (inference only).
    pub fn complete_prototype<R: RngCore + ?Sized>(
        &self,
        knowledge: &PrimitiveKnowledge,
        stats: &AttributeStats,
        class: ClassId,
        p_k: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let class_idx = knowledge.class_index(class)?;
        self.check_inputs(knowledge, class_idx, p_k)?;
        let mut latents = Vec::new();
        for a in knowledge.associated_attributes(class_idx) {
            let z = sample_attribute_feature(stats, a, mode, rng)?;
            latents.push((a, self.encode(&z)?));
        }
        let proto_latent = self.encode(p_k)?;
        let agg = self.aggregate(knowledge, class_idx, p_k, &latents, &proto_latent)?;
        self.decoder.infer(&self.store, &agg.g)
    }

    /// Same computation as [`complete_prototype`](Self::complete_prototype),
    /// recording every intermediate for [`backward`](Self::backward).
    pub fn complete_traced<R: RngCore + ?Sized>(
        &self,
        knowledge: &PrimitiveKnowledge,
        stats: &AttributeStats,
        class: ClassId,
        p_k: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<CompletionTrace> {
        let class_idx = knowledge.class_index(class)?;
        self.check_inputs(knowledge, class_idx, p_k)?;
        let mut attrs = Vec::new();
        for a in knowledge.associated_attributes(class_idx) {
            let z = sample_attribute_feature(stats, a, mode, rng)?;
            let (latent, encoder) = self.encoder.forward(&self.store, &z)?;
            let x = self.aggregator_input(knowledge, class_idx, p_k, a);
            let (alpha, aggregator) = self.aggregator.forward(&self.store, &x)?;
            attrs.push(AttrTrace {
                encoder,
                latent,
                aggregator,
                alpha: alpha[0],
            });
        }
        let (mut g, proto_encoder) = self.encoder.forward(&self.store, p_k)?;
        for t in &attrs {
            for (gi, &z) in g.iter_mut().zip(&t.latent) {
                *gi += t.alpha * z;
            }
        }
        let (output, decoder) = self.decoder.forward(&self.store, &g)?;
        Ok(CompletionTrace {
            attrs,
            proto_encoder,
            decoder,
            output,
        })
    }

    /// Accumulates `∂L/∂θ` given `∂L/∂p̂_k`.
    pub fn backward(&mut self, trace: &CompletionTrace, output_grad: &[f64]) -> Result<()> {
        let grad_g = self.decoder.backward(&mut self.store, &trace.decoder, output_grad)?;
        self.encoder.backward(&mut self.store, &trace.proto_encoder, &grad_g)?;
        for t in &trace.attrs {
            let grad_alpha = linalg::dot(&grad_g, &t.latent);
            self.aggregator.backward(&mut self.store, &t.aggregator, &[grad_alpha])?;
            let grad_latent: Vec<f64> = grad_g.iter().map(|g| t.alpha * g).collect();
            self.encoder.backward(&mut self.store, &t.encoder, &grad_latent)?;
        }
        Ok(())
    }

    pub fn encode_checkpoint(&self) -> Vec<u8> {
        nn::encode_checkpoint(&self.store)
    }

    /// Rebuilds a network from checkpoint bytes and the architecture recorded
    /// in its sidecar.
    pub fn from_checkpoint(arch: ArchConfig, bytes: &[u8], path: &Path) -> Result<Self> {
        let tensors = nn::decode_checkpoint(bytes, path)?;
        let mut net = Self::new(arch, 0);
        net.store
            .assign_from(tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.values.as_slice())))
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        net.store.zero_grad();
        Ok(net)
    }
}

// ---------------------------------------------------------------------------
// Completion tasks and training
// ---------------------------------------------------------------------------

/// A base-class K-shot task: the mean of K random samples and its full-class target.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionTask {
    pub class: ClassId,
    pub support: Vec<usize>,
    pub incomplete: Vec<f64>,
    pub target: Vec<f64>,
}

/// Draws `count` tasks: a uniform class from `prototypes`, then `k_shot`
/// samples of it without replacement.
pub fn sample_completion_tasks<R: Rng + ?Sized>(
    base: &FewShotDataset,
    prototypes: &ClassPrototypeTable,
    k_shot: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<CompletionTask>> {
    if k_shot == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let classes: Vec<ClassId> = prototypes.classes().collect();
    if classes.is_empty() {
        return Err(Error::Insufficient("no base classes".into()));
    }
    for &c in &classes {
        let n = base.indices_of(c).map_or(0, <[usize]>::len);
        if n < k_shot {
            return Err(Error::Insufficient(format!(
                "class {c} has {n} samples, K = {k_shot}"
            )));
        }
    }
    (0..count)
        .map(|_| {
            let class = classes[rng.random_range(0..classes.len())];
            let pool = base.indices_of(class).expect("checked above");
            let support: Vec<usize> = sample(rng, pool.len(), k_shot)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            let incomplete = linalg::mean_of(support.iter().map(|&i| base.row(i)), base.dim())?;
            Ok(CompletionTask {
                class,
                support,
                incomplete,
                target: prototypes.prototype(class)?.to_vec(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionTrainConfig {
    pub sgd: SgdConfig,
    pub k_shot: usize,
    /// Tasks drawn per epoch; `None` means four per base class.
    pub tasks_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CompletionTrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            k_shot: 1,
            tasks_per_epoch: None,
            batch_size: 1,
            seed: 0,
        }
    }
}

/// Mean-over-dimensions squared error and its gradient.
pub fn mse(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let d = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let e = p - t;
            loss += e * e;
            2.0 * e / d
        })
        .collect();
    (loss / d, grad)
}

/// Completion loss for one task plus gradient accumulation (scaled by `weight`).
pub fn completion_loss_and_grad<R: RngCore + ?Sized>(
    net: &mut ProtoComNet,
    knowledge: &PrimitiveKnowledge,
    stats: &AttributeStats,
    task: &CompletionTask,
    mode: Mode,
    weight: f64,
    rng: &mut R,
) -> Result<f64> {
    let trace = net.complete_traced(knowledge, stats, task.class, &task.incomplete, mode, rng)?;
    let (loss, mut grad) = mse(&trace.output, &task.target);
    grad.iter_mut().for_each(|g| *g *= weight);
    net.backward(&trace, &grad)?;
    Ok(loss)
}

/// One pass of mini-batch SGD over `tasks` in the given order; returns the mean loss.
pub fn fit_tasks<R: RngCore + ?Sized>(
    net: &mut ProtoComNet,
    knowledge: &PrimitiveKnowledge,
    stats: &AttributeStats,
    tasks: &[CompletionTask],
    optimizer: &mut Sgd,
    batch_size: usize,
    rng: &mut R,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Insufficient("no completion tasks".into()));
    }
    let batch_size = batch_size.max(1);
    let mut total = 0.0;
    for batch in tasks.chunks(batch_size) {
        net.store.zero_grad();
        let w = 1.0 / batch.len() as f64;
        for task in batch {
            let loss = completion_loss_and_grad(net, knowledge, stats, task, Mode::Train, w, rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("completion loss for class {}", task.class)));
            }
            total += loss;
        }
        // γ is not part of the completion objective.
        net.store.grad_mut(net.log_scale)[0] = 0.0;
        optimizer.step(&mut net.store)?;
    }
    Ok(total / tasks.len() as f64)
}

/// Trains the completion network for `config.sgd.epochs` epochs, sampling
/// fresh tasks each epoch. Returns the per-epoch mean loss.
pub fn train_completion(
    net: &mut ProtoComNet,
    knowledge: &PrimitiveKnowledge,
    stats: &AttributeStats,
    base: &FewShotDataset,
    prototypes: &ClassPrototypeTable,
    config: &CompletionTrainConfig,
) -> Result<Vec<f64>> {
    let mut optimizer = Sgd::new(config.sgd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_epoch = config.tasks_per_epoch.unwrap_or(4 * prototypes.len());
    let mut losses = Vec::with_capacity(config.sgd.epochs);
    for _ in 0..config.sgd.epochs {
        let mut tasks = sample_completion_tasks(base, prototypes, config.k_shot, per_epoch, &mut rng)?;
        tasks.shuffle(&mut rng);
        let loss = fit_tasks(net, knowledge, stats, &tasks, &mut optimizer, config.batch_size, &mut rng)?;
        log::debug!("completion epoch {}: loss {loss:.6}", losses.len() + 1);
        losses.push(loss);
    }
    Ok(losses)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMetadata {
    pub completion_seed: Option<u64>,
    pub completion_epochs: usize,
    pub completion_losses: Vec<f64>,
    pub meta_seed: Option<u64>,
    pub meta_epochs: usize,
    pub meta_losses: Vec<f64>,
}

/// JSON sidecar written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format: String,
    pub embed_dim: usize,
    pub semantic_dim: usize,
    pub arch: ArchConfig,
    pub scale: f64,
    pub training: TrainingMetadata,
}

pub fn sidecar_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn save_model(net: &ProtoComNet, training: &TrainingMetadata, path: &Path) -> Result<()> {
    let sidecar = ModelSidecar {
        format: "PCN1".into(),
        embed_dim: net.arch.embed_dim,
        semantic_dim: net.arch.semantic_dim,
        arch: net.arch,
        scale: net.scale(),
        training: training.clone(),
    };
    write_atomic(path, &net.encode_checkpoint())?;
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&sidecar_path(path), json.as_bytes())
}

pub fn load_model(path: &Path) -> Result<(ProtoComNet, ModelSidecar)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: ModelSidecar = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: side.clone(),
        source,
    })?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let net = ProtoComNet::from_checkpoint(sidecar.arch, &bytes, path)?;
    Ok((net, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetSplit;
    use crate::knowledge::{
        compute_attribute_stats, compute_base_prototypes, AttributeEntry, AttributeId, ClassEntry,
        ClassSplit,
    };

    fn small_arch(d: usize, s: usize) -> ArchConfig {
        ArchConfig {
            embed_dim: d,
            semantic_dim: s,
            encoder_units: 6,
            aggregator_hidden: 5,
            decoder_hidden: 7,
        }
    }

    /// Three base classes in 3-d with three attributes; class k owns attribute k
    /// and class 2 additionally owns attribute 0.
    fn toy() -> (PrimitiveKnowledge, FewShotDataset) {
        let classes = (0..3)
            .map(|i| ClassEntry {
                id: ClassId(i),
                name: format!("c{i}"),
                semantic: vec![i as f64, 1.0],
                split: ClassSplit::Base,
            })
            .collect();
        let attrs = (0..3)
            .map(|i| AttributeEntry {
                id: AttributeId(i),
                name: format!("a{i}"),
                semantic: vec![1.0, -(i as f64)],
            })
            .collect();
        let pairs: Vec<_> = [(0, 0), (1, 1), (2, 2), (2, 0)]
            .iter()
            .map(|&(c, a)| (ClassId(c), AttributeId(a)))
            .collect();
        let k = PrimitiveKnowledge::new(classes, attrs, &pairs).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for c in 0..3u32 {
            for _ in 0..6 {
                let mut r = vec![0.2; 3];
                r[c as usize] += 1.0;
                for v in &mut r {
                    *v += rng.random_range(-0.1..0.1);
                }
                rows.push(r);
                labels.push(ClassId(c));
            }
        }
        (k, FewShotDataset::from_rows(&rows, labels, DatasetSplit::Base).unwrap())
    }

    fn randomize(net: &mut ProtoComNet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in net.store.ids().collect::<Vec<_>>() {
            for v in net.store.value_mut(id) {
                *v = rng.random_range(-0.8..0.8);
            }
        }
    }

    #[test]
    fn zero_encoder_gives_zero_latent() {
        let mut net = ProtoComNet::new(small_arch(3, 2), 0);
        for id in [net.encoder.layers[0].weight, net.encoder.layers[0].bias] {
            net.store.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(net.encode(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn identity_encoder_passes_nonnegative_input() {
        let arch = ArchConfig {
            encoder_units: 4,
            ..small_arch(4, 2)
        };
        let mut net = ProtoComNet::new(arch, 0);
        let w = net.store.value_mut(net.encoder.layers[0].weight);
        w.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        assert_eq!(net.encode(&[0.0, 1.5, 2.0, 3.0]).unwrap(), vec![0.0, 1.5, 2.0, 3.0]);
    }

    #[test]
    fn encode_matches_scalar_reference() {
        let mut net = ProtoComNet::new(small_arch(3, 2), 0);
        randomize(&mut net, 9);
        let x = [0.4, -1.0, 0.7];
        let w = net.store.value(net.encoder.layers[0].weight);
        let b = net.store.value(net.encoder.layers[0].bias);
        let want: Vec<f64> = (0..6)
            .map(|j| (b[j] + (0..3).map(|i| w[j * 3 + i] * x[i]).sum::<f64>()).max(0.0))
            .collect();
        assert_eq!(net.encode(&x).unwrap(), want);
    }

    #[test]
    fn attribute_feature_modes() {
        let (k, base) = toy();
        let stats = compute_attribute_stats(&base, &k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            sample_attribute_feature(&stats, 1, Mode::Test, &mut rng).unwrap(),
            stats.get(1).unwrap().mean
        );
        assert!(sample_attribute_feature(&stats, 7, Mode::Test, &mut rng).is_err());
    }

    #[test]
    fn all_zero_row_gates_everything_out() {
        let (k, _) = toy();
        let k = k.with_association(vec![0; 9]).unwrap();
        let net = ProtoComNet::new(small_arch(3, 2), 3);
        let latents = vec![(0, vec![1.0; 6]), (1, vec![2.0; 6])];
        let z_k = vec![0.5; 6];
        let agg = net.aggregate(&k, 0, &[1.0, 0.0, 0.0], &latents, &z_k).unwrap();
        assert_eq!(agg.g, z_k);
        assert!(agg.alphas.iter().all(|(_, a)| *a == 0.0));
    }

    #[test]
    fn forced_unit_attention() {
        let (k, _) = toy();
        let mut net = ProtoComNet::new(small_arch(3, 2), 3);
        let last = net.aggregator.layers[1].clone();
        net.store.value_mut(last.weight).iter_mut().for_each(|v| *v = 0.0);
        net.store.value_mut(last.bias)[0] = 1.0;
        let z_a = vec![0.25, 0.5, 0.0, 1.0, 2.0, 3.0];
        let z_k = vec![1.0; 6];
        let agg = net.aggregate(&k, 0, &[1.0, 0.0, 0.0], &[(0, z_a.clone())], &z_k).unwrap();
        let want: Vec<f64> = z_a.iter().zip(&z_k).map(|(a, b)| a + b).collect();
        assert_eq!(agg.g, want);
    }

    #[test]
    fn aggregate_matches_scalar_reference() {
        let (k, _) = toy();
        // class 2 owns attributes {0, 2}; add attribute 1 too.
        let mut r = k.association().to_vec();
        r[2 * 3 + 1] = 1;
        let k = k.with_association(r).unwrap();
        let mut net = ProtoComNet::new(small_arch(3, 2), 4);
        randomize(&mut net, 11);
        let p = [0.3, -0.2, 0.9];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let latents: Vec<(usize, Vec<f64>)> = (0..3)
            .map(|a| (a, (0..6).map(|_| rng.random_range(0.0..1.0)).collect()))
            .collect();
        let z_k: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        let agg = net.aggregate(&k, 2, &p, &latents, &z_k).unwrap();

        // Independent nested-loop evaluation of α and g.
        let (l0, l1) = (&net.aggregator.layers[0], &net.aggregator.layers[1]);
        let (w1, b1) = (net.store.value(l0.weight), net.store.value(l0.bias));
        let (w2, b2) = (net.store.value(l1.weight), net.store.value(l1.bias));
        let mut g = z_k.clone();
        for (a, z) in &latents {
            let mut input = p.to_vec();
            input.extend_from_slice(k.class_semantic(2));
            input.extend_from_slice(k.attribute_semantic(*a));
            let mut out = b2[0];
            for j in 0..5 {
                let mut h = b1[j];
                for i in 0..7 {
                    h += w1[j * 7 + i] * input[i];
                }
                out += w2[j] * h.max(0.0);
            }
            for i in 0..6 {
                g[i] += out * z[i];
            }
        }
        for (x, y) in agg.g.iter().zip(&g) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gating_removes_exactly_one_term() {
        let (k, _) = toy();
        let mut net = ProtoComNet::new(small_arch(3, 2), 4);
        randomize(&mut net, 12);
        let p = [0.3, 0.1, 0.9];
        let latents: Vec<(usize, Vec<f64>)> = (0..3).map(|a| (a, vec![0.1 * (a + 1) as f64; 6])).collect();
        let z_k = vec![0.2; 6];
        let full = net.aggregate(&k, 2, &p, &latents, &z_k).unwrap();
        let mut r = k.association().to_vec();
        r[2 * 3] = 0;
        let gated = net.aggregate(&k.with_association(r).unwrap(), 2, &p, &latents, &z_k).unwrap();
        let alpha0 = full.alphas[0].1;
        for i in 0..6 {
            assert!((full.g[i] - alpha0 * latents[0].1[i] - gated.g[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_is_order_invariant() {
        let (k, _) = toy();
        let mut net = ProtoComNet::new(small_arch(3, 2), 4);
        randomize(&mut net, 13);
        let p = [0.3, 0.1, 0.9];
        let latents: Vec<(usize, Vec<f64>)> = (0..3).map(|a| (a, vec![0.3 * a as f64 + 0.1; 6])).collect();
        let mut reversed = latents.clone();
        reversed.reverse();
        let a = net.aggregate(&k, 2, &p, &latents, &[0.0; 6]).unwrap();
        let b = net.aggregate(&k, 2, &p, &reversed, &[0.0; 6]).unwrap();
        for (x, y) in a.g.iter().zip(&b.g) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_decoder_outputs_zero_and_test_mode_is_deterministic() {
        let (k, base) = toy();
        let stats = compute_attribute_stats(&base, &k).unwrap();
        let mut net = ProtoComNet::new(small_arch(3, 2), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = net.complete_prototype(&k, &stats, ClassId(2), &[1.0, 0.0, 0.5], Mode::Test, &mut rng).unwrap();
        let b = net.complete_prototype(&k, &stats, ClassId(2), &[1.0, 0.0, 0.5], Mode::Test, &mut rng).unwrap();
        assert_eq!(a, b);
        for l in net.decoder.layers.clone() {
            net.store.value_mut(l.weight).iter_mut().for_each(|v| *v = 0.0);
            net.store.value_mut(l.bias).iter_mut().for_each(|v| *v = 0.0);
        }
        let z = net.complete_prototype(&k, &stats, ClassId(2), &[1.0, 0.0, 0.5], Mode::Test, &mut rng).unwrap();
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn traced_matches_untraced() {
        let (k, base) = toy();
        let stats = compute_attribute_stats(&base, &k).unwrap();
        let mut net = ProtoComNet::new(small_arch(3, 2), 5);
        randomize(&mut net, 14);
        let p = [0.5, 0.5, 1.0];
        let plain = net
            .complete_prototype(&k, &stats, ClassId(2), &p, Mode::Train, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let traced = net
            .complete_traced(&k, &stats, ClassId(2), &p, Mode::Train, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(plain, traced.output);
    }

    #[test]
    fn completion_tasks_edge_cases() {
        let (_, base) = toy();
        let table = compute_base_prototypes(&base).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = sample_completion_tasks(&base, &table, 6, 5, &mut rng).unwrap();
        for t in &full {
            let target = table.prototype(t.class).unwrap();
            for (a, b) in t.incomplete.iter().zip(target) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let one = sample_completion_tasks(&base, &table, 1, 5, &mut rng).unwrap();
        for t in &one {
            assert_eq!(t.incomplete, base.row(t.support[0]));
            assert_eq!(base.label(t.support[0]), t.class);
        }
        assert!(sample_completion_tasks(&base, &table, 7, 1, &mut rng).is_err());
    }

    #[test]
    fn empty_task_list_is_an_error() {
        let (k, base) = toy();
        let stats = compute_attribute_stats(&base, &k).unwrap();
        let mut net = ProtoComNet::new(small_arch(3, 2), 0);
        let mut opt = Sgd::new(SgdConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(fit_tasks(&mut net, &k, &stats, &[], &mut opt, 1, &mut rng).is_err());
    }

    #[test]
    fn completion_gradient_matches_finite_differences() {
        let (k, base) = toy();
        let stats = compute_attribute_stats(&base, &k).unwrap();
        let table = compute_base_prototypes(&base).unwrap();
        for seed in 0..4u64 {
            let mut net = ProtoComNet::new(small_arch(3, 2), seed);
            randomize(&mut net, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let task = sample_completion_tasks(&base, &table, 2, 1, &mut rng).unwrap().remove(0);
            let loss = |s: &ParamStore| -> Result<f64> {
                let mut probe = net.clone();
                probe.store = s.clone();
                let out = probe.complete_prototype(
                    &k,
                    &stats,
                    task.class,
                    &task.incomplete,
                    Mode::Train,
                    &mut ChaCha8Rng::seed_from_u64(77),
                )?;
                Ok(mse(&out, &task.target).0)
            };
            let template = net.clone();
            let loss_grad = |s: &mut ParamStore| -> Result<f64> {
                let mut probe = template.clone();
                probe.store = s.clone();
                let l = completion_loss_and_grad(
                    &mut probe,
                    &k,
                    &stats,
                    &task,
                    Mode::Train,
                    1.0,
                    &mut ChaCha8Rng::seed_from_u64(77),
                )?;
                *s = probe.store;
                Ok(l)
            };
            let mut store = net.store.clone();
            let report = nn::gradient_check(&mut store, loss, loss_grad, &nn::GradCheckOptions::default()).unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn training_reduces_loss_on_toy_world() {
        let (k, base) = toy();
        let stats = compute_attribute_stats(&base, &k).unwrap();
        let table = compute_base_prototypes(&base).unwrap();
        let mut net = ProtoComNet::new(ArchConfig::new(3, 2), 1);
        let config = CompletionTrainConfig {
            sgd: SgdConfig {
                learning_rate: 1e-2,
                epochs: 60,
                ..SgdConfig::default()
            },
            k_shot: 6,
            tasks_per_epoch: Some(12),
            batch_size: 1,
            seed: 3,
        };
        let losses = train_completion(&mut net, &k, &stats, &base, &table, &config).unwrap();
        let last = *losses.last().unwrap();
        assert!(last < 1e-3, "final loss {last}, first {}", losses[0]);
    }

    #[test]
    fn checkpoint_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pcn");
        let mut net = ProtoComNet::new(small_arch(3, 2), 8);
        net.set_scale(12.5).unwrap();
        let meta = TrainingMetadata {
            completion_seed: Some(1),
            completion_epochs: 3,
            completion_losses: vec![0.5, 0.25, 0.125],
            ..Default::default()
        };
        save_model(&net, &meta, &path).unwrap();
        let (back, sidecar) = load_model(&path).unwrap();
        assert_eq!(back.encode_checkpoint(), net.encode_checkpoint());
        assert_eq!(sidecar.training, meta);
        assert!((sidecar.scale - 12.5).abs() < 1e-12);
    }
}
