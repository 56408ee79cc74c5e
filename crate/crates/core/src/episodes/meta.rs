use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mean_prototype, sample_episode, similarities, Episode, DEFAULT_N_WAY, DEFAULT_QUERIES};
use crate::dataset::FewShotDataset;
use crate::error::{Error, Result};
use crate::fusion::{fuse_prototypes, fusion_backward, FusionConfig};
use crate::knowledge::{AttributeStats, PrimitiveKnowledge};
use crate::linalg::{cosine_grad_wrt_second, softmax};
use crate::nn::{Sgd, SgdConfig};
use crate::protocomnet::{Mode, ProtoComNet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub sgd: SgdConfig,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub episodes_per_epoch: usize,
    pub fusion: FusionConfig,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig {
                learning_rate: 1e-4,
                epochs: 40,
                ..SgdConfig::default()
            },
            n_way: DEFAULT_N_WAY,
            k_shot: 1,
            m_query: DEFAULT_QUERIES,
            episodes_per_epoch: 100,
            fusion: FusionConfig::default(),
            seed: 0,
        }
    }
}

/// Query cross-entropy of one episode under the transductive Gauss-fusion
/// pipeline. Accumulates `weight · ∂L/∂θ` (including `ln γ`) and returns the
/// unweighted mean loss. Completion runs in train mode, drawing from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn meta_loss_and_grad<R: RngCore + ?Sized>(
    net: &mut ProtoComNet,
    knowledge: &PrimitiveKnowledge,
    stats: &AttributeStats,
    dataset: &FewShotDataset,
    episode: &Episode,
    fusion: &FusionConfig,
    weight: f64,
    rng: &mut R,
) -> Result<f64> {
    let nq = episode.num_queries();
    if nq == 0 {
        return Err(Error::Insufficient("meta-training episode has no queries".into()));
    }
    let mean_based = episode
        .roster
        .iter()
        .map(|&c| mean_prototype(dataset, episode, c))
        .collect::<Result<Vec<_>>>()?;
    let traces = episode
        .roster
        .iter()
        .zip(&mean_based)
        .map(|(&c, p)| net.complete_traced(knowledge, stats, c, p, Mode::Train, rng))
        .collect::<Result<Vec<_>>>()?;
    let completed: Vec<Vec<f64>> = traces.iter().map(|t| t.output.clone()).collect();
    let (rows, labels) = episode.transductive_set(dataset);
    let fused = fuse_prototypes(&rows, &labels, &mean_based, &completed, fusion)?;

    let scale = net.scale();
    let mut fused_grad = vec![vec![0.0; dataset.dim()]; episode.n_way()];
    let mut scale_grad = 0.0;
    let mut loss = 0.0;
    for (i, target) in episode.queries() {
        let q = dataset.row(i);
        let sims = similarities(q, &fused.fused)?;
        let logits: Vec<f64> = sims.iter().map(|s| scale * s).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[target];
        let probs = softmax(&logits);
        for (k, (&p, &s)) in probs.iter().zip(&sims).enumerate() {
            let d_logit = (p - f64::from(u8::from(k == target))) * weight / nq as f64;
            scale_grad += d_logit * s;
            cosine_grad_wrt_second(q, &fused.fused[k], d_logit * scale, &mut fused_grad[k]);
        }
    }
    let loss = loss / nq as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("meta-training loss".into()));
    }

    let proto_grad = fusion_backward(&rows, &completed, &fused, &fused_grad, fusion)?;
    for (trace, g) in traces.iter().zip(&proto_grad) {
        net.backward(trace, g)?;
    }
    // ∂L/∂ln γ = γ · ∂L/∂γ.
    let id = net.log_scale_id();
    net.store_mut().grad_mut(id)[0] += scale * scale_grad;
    Ok(loss)
}

/// Episodic fine-tuning of the completion network and γ on base classes.
/// Returns the mean loss of every epoch.
pub fn meta_train(
    net: &mut ProtoComNet,
    knowledge: &PrimitiveKnowledge,
    stats: &AttributeStats,
    base: &FewShotDataset,
    config: &MetaTrainConfig,
) -> Result<Vec<f64>> {
    if config.episodes_per_epoch == 0 {
        return Err(Error::InvalidArgument("episodes_per_epoch must be at least 1".into()));
    }
    let mut optimizer = Sgd::new(config.sgd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.sgd.epochs);
    for epoch in 0..config.sgd.epochs {
        let mut total = 0.0;
        for _ in 0..config.episodes_per_epoch {
            let episode = sample_episode(base, config.n_way, config.k_shot, config.m_query, &mut rng)?;
            net.store_mut().zero_grad();
            total += meta_loss_and_grad(net, knowledge, stats, base, &episode, &config.fusion, 1.0, &mut rng)?;
            optimizer.step(net.store_mut())?;
        }
        let mean = total / config.episodes_per_epoch as f64;
        log::debug!("meta epoch {}: loss {mean:.6}, scale {:.4}", epoch + 1, net.scale());
        losses.push(mean);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_world, WorldSpec};
    use crate::knowledge::compute_attribute_stats;
    use crate::nn::{gradient_check, GradCheckOptions, ParamStore};
    use crate::protocomnet::ArchConfig;

    fn setup(seed: u64) -> (crate::datagen::World, AttributeStats, ProtoComNet) {
        let spec = WorldSpec {
            embed_dim: 6,
            semantic_dim: 4,
            num_base_classes: 6,
            num_val_classes: 0,
            num_novel_classes: 3,
            num_attributes: 6,
            attributes_per_class: (1, 3),
            samples_per_class: 8,
            noise_std: 0.3,
            seed,
            ..WorldSpec::default()
        };
        let world = generate_world(&spec).unwrap();
        let stats = compute_attribute_stats(&world.base, &world.knowledge).unwrap();
        let arch = ArchConfig {
            encoder_units: 5,
            aggregator_hidden: 4,
            decoder_hidden: 6,
            ..ArchConfig::new(6, 4)
        };
        (world, stats, ProtoComNet::new(arch, seed + 100))
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..4 {
            let (world, stats, net) = setup(seed);
            let episode = sample_episode(&world.base, 3, 2, 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let cfg = FusionConfig::default();
            let run = |s: &ParamStore| -> Result<(f64, ParamStore)> {
                let mut probe = net.clone();
                *probe.store_mut() = s.clone();
                let mut noise = ChaCha8Rng::seed_from_u64(77 + seed);
                let l = meta_loss_and_grad(&mut probe, &world.knowledge, &stats, &world.base, &episode, &cfg, 1.0, &mut noise)?;
                Ok((l, probe.store().clone()))
            };
            let mut store = net.store().clone();
            let report = gradient_check(
                &mut store,
                |s| run(s).map(|r| r.0),
                |s| {
                    let (l, out) = run(s)?;
                    *s = out;
                    Ok(l)
                },
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn training_is_deterministic_and_moves_scale() {
        let (world, stats, net) = setup(5);
        let config = MetaTrainConfig {
            sgd: SgdConfig {
                learning_rate: 1e-2,
                epochs: 3,
                ..SgdConfig::default()
            },
            n_way: 3,
            k_shot: 1,
            m_query: 4,
            episodes_per_epoch: 5,
            seed: 9,
            ..MetaTrainConfig::default()
        };
        let mut a = net.clone();
        let mut b = net.clone();
        let la = meta_train(&mut a, &world.knowledge, &stats, &world.base, &config).unwrap();
        let lb = meta_train(&mut b, &world.knowledge, &stats, &world.base, &config).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_ne!(a.scale(), net.scale());
        assert!(la.iter().all(|l| l.is_finite()));
    }
}
