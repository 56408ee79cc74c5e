//! Acceptance checks, one PASS/FAIL line each. Exits nonzero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use protofuse::datagen::{generate_world, World, WorldSpec};
use protofuse::episodes::{
    episode_schedule, evaluate, meta_loss_and_grad, meta_train, prototype_similarity_report, sample_episode,
    EpisodeConfig, EvalReport, MetaTrainConfig, Pipeline, PrototypeMode,
};
use protofuse::fusion::{fuse_prototypes, gaussian_product, DiagonalGaussian, FusionConfig};
use protofuse::knowledge::{
    compute_attribute_stats, compute_base_prototypes, inject_knowledge_noise, AttributeStats,
};
use protofuse::nn::{gradient_check, GradCheckOptions, ParamStore, SgdConfig};
use protofuse::protocomnet::{
    completion_loss_and_grad, sample_completion_tasks, train_completion, ArchConfig, CompletionTrainConfig, Mode,
    ProtoComNet,
};
use protofuse::{FewShotDataset, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GAMMA_HIGH: f64 = 0.3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, started: Instant, outcome: Outcome) -> bool {
    println!(
        "[{}] {id:>2}. {name}: {} ({:.1}s)",
        if outcome.pass { "PASS" } else { "FAIL" },
        outcome.detail,
        started.elapsed().as_secs_f64()
    );
    outcome.pass
}

// ---------------------------------------------------------------------------
// 1. Gaussian product against a grid-normalized pointwise product
// ---------------------------------------------------------------------------

fn grid_posterior(m1: f64, s1: f64, m2: f64, s2: f64) -> (f64, f64) {
    let lo = (m1 - 12.0 * s1).min(m2 - 12.0 * s2);
    let hi = (m1 + 12.0 * s1).max(m2 + 12.0 * s2);
    let h = s1.min(s2) / 40.0;
    let n = ((hi - lo) / h).ceil() as usize + 1;
    let log_density = |x: f64| -0.5 * ((x - m1) / s1).powi(2) - 0.5 * ((x - m2) / s2).powi(2);
    let peak = (0..n).map(|i| log_density(lo + i as f64 * h)).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m, mut m2_) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let x = lo + i as f64 * h;
        let w = (log_density(x) - peak).exp();
        z += w;
        m += w * x;
        m2_ += w * x * x;
    }
    let mean = m / z;
    (mean, m2_ / z - mean * mean)
}

fn criterion_gaussian_product() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (m1, m2) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let (s1, s2): (f64, f64) = (rng.random_range(0.1..3.0), rng.random_range(0.1..3.0));
        let prior = DiagonalGaussian::new(vec![m1], vec![s1 * s1], 1e-12).unwrap();
        let like = DiagonalGaussian::new(vec![m2], vec![s2 * s2], 1e-12).unwrap();
        let post = gaussian_product(&prior, &like).unwrap();
        let (gm, gv) = grid_posterior(m1, s1, m2, s2);
        worst = worst.max((post.mean()[0] - gm).abs()).max((post.variance()[0] - gv).abs());
    }
    Outcome {
        pass: worst < 1e-6,
        detail: format!("1000 pairs, max abs error {worst:.2e} (tol 1e-6)"),
    }
}

// ---------------------------------------------------------------------------
// 2. Finite-difference gradient checks
// ---------------------------------------------------------------------------

struct TinyCase {
    world: World,
    stats: AttributeStats,
    net: ProtoComNet,
}

fn tiny_case(rng: &mut ChaCha8Rng, seed: u64) -> TinyCase {
    let d = rng.random_range(3..=8);
    let s = rng.random_range(2..=5);
    let f = rng.random_range(3..=7);
    let spec = WorldSpec {
        embed_dim: d,
        semantic_dim: s,
        num_base_classes: rng.random_range(4..=7),
        num_val_classes: 0,
        num_novel_classes: 2,
        num_attributes: f,
        attributes_per_class: (1, rng.random_range(1..=3)),
        samples_per_class: rng.random_range(6..=10),
        noise_std: rng.random_range(0.05..0.5),
        seed,
        ..WorldSpec::default()
    };
    let world = generate_world(&spec).unwrap();
    let stats = compute_attribute_stats(&world.base, &world.knowledge).unwrap();
    let arch = ArchConfig {
        encoder_units: rng.random_range(3..=8),
        aggregator_hidden: rng.random_range(3..=8),
        decoder_hidden: rng.random_range(3..=8),
        ..ArchConfig::new(d, s)
    };
    let mut net = ProtoComNet::new(arch, seed);
    // Probe a random point rather than the initialization (zero biases can
    // leave a three-unit layer entirely inactive).
    let store = net.store_mut();
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id) {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    net.set_scale(rng.random_range(2.0..15.0)).unwrap();
    TinyCase { world, stats, net }
}

/// Runs the gradient check with `objective` re-evaluated on a fresh copy of
/// `net` carrying the probed parameters.
fn check_objective(
    net: &ProtoComNet,
    objective: impl Fn(&mut ProtoComNet) -> Result<f64>,
) -> f64 {
    let run = |s: &ParamStore| -> Result<(f64, ParamStore)> {
        let mut probe = net.clone();
        *probe.store_mut() = s.clone();
        let l = objective(&mut probe)?;
        Ok((l, probe.store().clone()))
    };
    let mut store = net.store().clone();
    gradient_check(
        &mut store,
        |s| run(s).map(|r| r.0),
        |s| {
            let (l, out) = run(s)?;
            *s = out;
            Ok(l)
        },
        &GradCheckOptions::default(),
    )
    .unwrap()
    .max_rel_error
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let configs = 24;
    let (mut worst_completion, mut worst_meta): (f64, f64) = (0.0, 0.0);
    for c in 0..configs {
        let case = tiny_case(&mut rng, 500 + c);
        let (k, st, base) = (&case.world.knowledge, &case.stats, &case.world.base);
        let noise = rng.random::<u64>();

        let table = compute_base_prototypes(base).unwrap();
        let k_shot = rng.random_range(1..=3);
        let task = sample_completion_tasks(base, &table, k_shot, 1, &mut rng).unwrap().remove(0);
        worst_completion = worst_completion.max(check_objective(&case.net, |n| {
            completion_loss_and_grad(n, k, st, &task, Mode::Train, 1.0, &mut ChaCha8Rng::seed_from_u64(noise))
        }));

        let n_way = rng.random_range(2..=4);
        let episode = sample_episode(base, n_way, rng.random_range(1..=2), rng.random_range(2..=3), &mut rng).unwrap();
        let fusion = FusionConfig::default();
        worst_meta = worst_meta.max(check_objective(&case.net, |n| {
            meta_loss_and_grad(n, k, st, base, &episode, &fusion, 1.0, &mut ChaCha8Rng::seed_from_u64(noise))
        }));
    }
    Outcome {
        pass: worst_completion < 1e-4 && worst_meta < 1e-4,
        detail: format!(
            "{configs} configs, max rel error completion {worst_completion:.2e}, meta {worst_meta:.2e} (tol 1e-4)"
        ),
    }
}

// ---------------------------------------------------------------------------
// Trained pipelines shared by the trend criteria
// ---------------------------------------------------------------------------

fn acceptance_spec(seed: u64) -> WorldSpec {
    WorldSpec {
        embed_dim: 64,
        semantic_dim: 32,
        num_base_classes: 32,
        num_val_classes: 8,
        num_novel_classes: 16,
        num_attributes: 24,
        attributes_per_class: (3, 6),
        samples_per_class: 60,
        noise_std: 0.1,
        dropout_rate: 0.5,
        seed,
        ..WorldSpec::default()
    }
}

struct Trained {
    world: World,
    stats: AttributeStats,
    net: ProtoComNet,
}

impl Trained {
    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline {
            net: &self.net,
            knowledge: &self.world.knowledge,
            stats: &self.stats,
            fusion: FusionConfig::default(),
        }
    }
}

fn train(seed: u64) -> Trained {
    let world = generate_world(&acceptance_spec(seed)).unwrap();
    let stats = compute_attribute_stats(&world.base, &world.knowledge).unwrap();
    let table = compute_base_prototypes(&world.base).unwrap();
    let mut net = ProtoComNet::new(ArchConfig::new(64, 32), seed);
    let completion = CompletionTrainConfig {
        sgd: SgdConfig {
            learning_rate: 1e-2,
            epochs: 100,
            ..SgdConfig::default()
        },
        seed,
        ..CompletionTrainConfig::default()
    };
    train_completion(&mut net, &world.knowledge, &stats, &world.base, &table, &completion).unwrap();
    let meta = MetaTrainConfig {
        seed,
        ..MetaTrainConfig::default()
    };
    meta_train(&mut net, &world.knowledge, &stats, &world.base, &meta).unwrap();
    Trained { world, stats, net }
}

fn eval_config(k_shot: usize, seed: u64) -> EpisodeConfig {
    EpisodeConfig {
        k_shot,
        seed: 1000 + seed,
        ..EpisodeConfig::default()
    }
}

// ---------------------------------------------------------------------------
// 3. Mean-only against an independent nearest-centroid classifier
// ---------------------------------------------------------------------------

fn oracle_nearest_centroid(dataset: &FewShotDataset, support: &[Vec<usize>], query: usize) -> usize {
    let x = dataset.row(query);
    let mut best = (0, f64::NEG_INFINITY);
    for (c, idx) in support.iter().enumerate() {
        let mut centroid = vec![0.0; x.len()];
        for &i in idx {
            for (j, v) in dataset.row(i).iter().enumerate() {
                centroid[j] += v / idx.len() as f64;
            }
        }
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        for j in 0..x.len() {
            xy += x[j] * centroid[j];
            xx += x[j] * x[j];
            yy += centroid[j] * centroid[j];
        }
        let cos = xy / (xx.sqrt() * yy.sqrt());
        if cos > best.1 {
            best = (c, cos);
        }
    }
    best.0
}

fn criterion_nearest_centroid(t: &Trained) -> Outcome {
    let pipe = t.pipeline();
    let config = eval_config(1, 3);
    let episodes = episode_schedule(&t.world.novel, &config).unwrap();
    let report = evaluate(&pipe, &t.world.novel, PrototypeMode::MeanOnly, &config).unwrap();
    let mut mismatched_predictions = 0;
    let mut mismatched_episodes = 0;
    for (ep, &acc) in episodes.iter().zip(&report.per_episode) {
        let got = pipe.episode_predictions(&t.world.novel, ep, PrototypeMode::MeanOnly).unwrap();
        let mut correct = 0;
        for ((q, c), g) in ep.queries().zip(&got) {
            let want = oracle_nearest_centroid(&t.world.novel, &ep.support, q);
            mismatched_predictions += usize::from(want != *g);
            correct += usize::from(want == c);
        }
        mismatched_episodes += usize::from(correct as f64 / ep.num_queries() as f64 != acc);
    }
    Outcome {
        pass: mismatched_predictions == 0 && mismatched_episodes == 0 && episodes.len() == 600,
        detail: format!(
            "{} episodes, {mismatched_predictions} prediction and {mismatched_episodes} accuracy mismatches",
            episodes.len()
        ),
    }
}

// ---------------------------------------------------------------------------
// 4. Soft assignment, weighted Gaussians and product against scalar loops
// ---------------------------------------------------------------------------

struct ScalarFusion {
    weights: Vec<Vec<f64>>,
    mean: Vec<Vec<f64>>,
    var: Vec<Vec<f64>>,
}

fn scalar_branch(rows: &[&[f64]], labels: &[Option<usize>], protos: &[Vec<f64>], lambda: f64, floor: f64) -> ScalarFusion {
    let c = protos.len();
    let d = protos[0].len();
    let mut weights = vec![vec![0.0; c]; rows.len()];
    for (i, x) in rows.iter().enumerate() {
        if let Some(l) = labels[i] {
            weights[i][l] = 1.0;
            continue;
        }
        let mut z = 0.0;
        for k in 0..c {
            let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
            for j in 0..d {
                xy += x[j] * protos[k][j];
                xx += x[j] * x[j];
                yy += protos[k][j] * protos[k][j];
            }
            weights[i][k] = (lambda * xy / (xx * yy).sqrt()).exp();
            z += weights[i][k];
        }
        for w in weights[i].iter_mut() {
            *w /= z;
        }
    }
    let mut mean = vec![vec![0.0; d]; c];
    let mut var = vec![vec![0.0; d]; c];
    for k in 0..c {
        let total: f64 = (0..rows.len()).map(|i| weights[i][k]).sum();
        for j in 0..d {
            let mut m = 0.0;
            for i in 0..rows.len() {
                m += weights[i][k] * rows[i][j];
            }
            m /= total;
            let mut v = 0.0;
            for i in 0..rows.len() {
                v += weights[i][k] * (rows[i][j] - m) * (rows[i][j] - m);
            }
            mean[k][j] = m;
            var[k][j] = (v / total).max(floor);
        }
    }
    ScalarFusion { weights, mean, var }
}

fn criterion_scalar_fusion(t: &Trained) -> Outcome {
    let pipe = t.pipeline();
    let cfg = FusionConfig::default();
    let config = EpisodeConfig {
        episodes: 100,
        seed: 44,
        ..EpisodeConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut diff = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for (e, ep) in episode_schedule(&t.world.novel, &config).unwrap().iter().enumerate() {
        let k_shot = 1 + e % 3;
        let ep = if k_shot == 1 {
            ep.clone()
        } else {
            sample_episode(&t.world.novel, 5, k_shot, 15, &mut ChaCha8Rng::seed_from_u64(e as u64)).unwrap()
        };
        let (rows, labels) = ep.transductive_set(&t.world.novel);
        let protos = pipe.prototypes(&t.world.novel, &ep, PrototypeMode::GaussFusion).unwrap();
        let completed = protos.completed.unwrap();
        let lib = fuse_prototypes(&rows, &labels, &protos.mean_based, &completed, &cfg).unwrap();
        let like = scalar_branch(&rows, &labels, &protos.mean_based, cfg.lambda, cfg.variance_floor);
        let prior = scalar_branch(&rows, &labels, &completed, cfg.lambda, cfg.variance_floor);
        for i in 0..rows.len() {
            for k in 0..ep.n_way() {
                diff(lib.mean_assignment.rows[i][k], like.weights[i][k]);
                diff(lib.completed_assignment.rows[i][k], prior.weights[i][k]);
            }
        }
        for k in 0..ep.n_way() {
            for j in 0..rows[0].len() {
                let (m1, v1) = (prior.mean[k][j], prior.var[k][j]);
                let (m2, v2) = (like.mean[k][j], like.var[k][j]);
                diff(lib.mean_based[k].mean()[j], m2);
                diff(lib.mean_based[k].variance()[j], v2);
                diff(lib.completed[k].mean()[j], m1);
                diff(lib.completed[k].variance()[j], v1);
                diff(lib.fused[k][j], (v2 * m1 + v1 * m2) / (v1 + v2));
                diff(lib.posterior[k].variance()[j], v1 * v2 / (v1 + v2));
            }
        }
    }
    Outcome {
        pass: worst < 1e-9,
        detail: format!("100 episodes, max abs error {worst:.2e} (tol 1e-9)"),
    }
}

// ---------------------------------------------------------------------------
// 5-8. Trends
// ---------------------------------------------------------------------------

/// Mean paired difference `a - b` over episodes and its 95% half-width.
fn paired_gap(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (mean, 1.96 * sd / n.sqrt())
}

struct SeedResults {
    one_shot: BTreeMap<&'static str, EvalReport>,
    five_shot: BTreeMap<&'static str, EvalReport>,
    noisy: BTreeMap<&'static str, EvalReport>,
    similarity: (f64, f64),
}

fn seed_results(t: &Trained, seed: u64) -> SeedResults {
    let pipe = t.pipeline();
    let run = |pipe: &Pipeline<'_>, k: usize| -> BTreeMap<&'static str, EvalReport> {
        PrototypeMode::ALL
            .iter()
            .map(|&m| (m.as_str(), evaluate(pipe, &t.world.novel, m, &eval_config(k, seed)).unwrap()))
            .collect()
    };
    let noisy_knowledge = inject_knowledge_noise(&t.world.knowledge, GAMMA_HIGH, 7 + seed).unwrap();
    let noisy_pipe = Pipeline {
        knowledge: &noisy_knowledge,
        ..pipe
    };
    let sim = prototype_similarity_report(
        &pipe,
        &t.world.novel,
        &t.world.centers,
        &EpisodeConfig {
            episodes: 1000,
            seed: 2000 + seed,
            ..EpisodeConfig::default()
        },
    )
    .unwrap();
    SeedResults {
        one_shot: run(&pipe, 1),
        five_shot: run(&pipe, 5),
        noisy: run(&noisy_pipe, 1),
        similarity: (sim.mean_based, sim.fused),
    }
}

fn pooled(results: &[SeedResults], pick: impl Fn(&SeedResults) -> &EvalReport) -> Vec<f64> {
    results.iter().flat_map(|r| pick(r).per_episode.iter().copied()).collect()
}

fn mean_acc(results: &[SeedResults], pick: impl Fn(&SeedResults) -> &EvalReport) -> f64 {
    results.iter().map(|r| pick(r).mean_acc).sum::<f64>() / results.len() as f64
}

fn criterion_table4(results: &[SeedResults]) -> Outcome {
    let gauss = pooled(results, |r| &r.one_shot["gauss-fusion"]);
    let mean_fusion = pooled(results, |r| &r.one_shot["mean-fusion"]);
    let mean_only = pooled(results, |r| &r.one_shot["mean-only"]);
    let (g1, ci1) = paired_gap(&gauss, &mean_fusion);
    let (g2, ci2) = paired_gap(&mean_fusion, &mean_only);
    Outcome {
        pass: g1 - ci1 > 0.0 && g2 - ci2 > 0.0,
        detail: format!(
            "gauss {:.4} > mean-fusion {:.4} > mean-only {:.4}; gaps {g1:.4}±{ci1:.4}, {g2:.4}±{ci2:.4} over {} paired episodes",
            mean_acc(results, |r| &r.one_shot["gauss-fusion"]),
            mean_acc(results, |r| &r.one_shot["mean-fusion"]),
            mean_acc(results, |r| &r.one_shot["mean-only"]),
            gauss.len()
        ),
    }
}

fn criterion_table3(results: &[SeedResults]) -> Outcome {
    let margins: Vec<f64> = results.iter().map(|r| r.similarity.1 - r.similarity.0).collect();
    let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let n = results.len() as f64;
    let mean_based = results.iter().map(|r| r.similarity.0).sum::<f64>() / n;
    let fused = results.iter().map(|r| r.similarity.1).sum::<f64>() / n;
    Outcome {
        pass: worst >= 0.05,
        detail: format!("cos fused {fused:.4} vs mean-based {mean_based:.4}; smallest per-seed margin {worst:.4} (need >= 0.05)"),
    }
}

fn criterion_table5(results: &[SeedResults]) -> Outcome {
    let drop = |mode: &str| {
        results
            .iter()
            .map(|r| r.one_shot[mode].mean_acc - r.noisy[mode].mean_acc)
            .sum::<f64>()
            / results.len() as f64
    };
    let (dc, dg) = (drop("completed-only"), drop("gauss-fusion"));
    Outcome {
        pass: dg < dc,
        detail: format!("drop from noise 0 to {GAMMA_HIGH}: gauss-fusion {dg:.4} vs completed-only {dc:.4}"),
    }
}

fn criterion_shots(results: &[SeedResults]) -> Outcome {
    let gain = |pick: fn(&SeedResults) -> &BTreeMap<&'static str, EvalReport>| {
        mean_acc(results, |r| &pick(r)["completed-only"]) - mean_acc(results, |r| &pick(r)["mean-only"])
    };
    let (g1, g5) = (gain(|r| &r.one_shot), gain(|r| &r.five_shot));
    Outcome {
        pass: g1 > g5,
        detail: format!("completed-only minus mean-only: K=1 {g1:+.4}, K=5 {g5:+.4}"),
    }
}

// ---------------------------------------------------------------------------
// 9. CLI determinism
// ---------------------------------------------------------------------------

fn cli_runs(dir: &Path) -> std::result::Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_protofuse");
    let world = ["--world", "w"];
    let commands: Vec<Vec<&str>> = vec![
        vec![
            "gen", "--out", "w", "--seed", "5", "--embed-dim", "16", "--semantic-dim", "8", "--base-classes", "8",
            "--val-classes", "2", "--novel-classes", "6", "--attributes", "10", "--samples-per-class", "25",
        ],
        [&["train-completion"][..], &world, &["--out", "c.pcn", "--seed", "1", "--epochs", "3"]].concat(),
        [&["meta-train"][..], &world, &["--checkpoint", "c.pcn", "--out", "m.pcn", "--seed", "2", "--epochs", "2", "--episodes-per-epoch", "5"]].concat(),
        [&["eval"][..], &world, &["--checkpoint", "m.pcn", "--seed", "3", "--episodes", "50", "--report", "eval.json"]].concat(),
        [&["ablate"][..], &world, &["--checkpoint", "m.pcn", "--seed", "3", "--episodes", "30", "--report", "ablate.json"]].concat(),
        [&["noise-sweep"][..], &world, &["--checkpoint", "m.pcn", "--seed", "3", "--episodes", "30", "--report", "noise.json"]].concat(),
        [&["report"][..], &world, &["--checkpoint", "m.pcn", "--seed", "3", "--episodes", "50", "--window", "10", "--out-dir", "."]].concat(),
    ];
    for args in commands {
        let out = Command::new(bin)
            .args(&args)
            .current_dir(dir)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn list_files(dir: &Path, prefix: &Path, out: &mut Vec<std::path::PathBuf>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            list_files(&path, prefix, out);
        } else {
            out.push(path.strip_prefix(prefix).unwrap().to_path_buf());
        }
    }
}

fn criterion_cli_determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for d in [&a, &b] {
        std::fs::create_dir(d).unwrap();
        if let Err(e) = cli_runs(d) {
            return Outcome { pass: false, detail: e };
        }
    }
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    list_files(&a, &a, &mut fa);
    list_files(&b, &b, &mut fb);
    fa.sort();
    fb.sort();
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    Outcome {
        pass: fa == fb && differing.is_empty() && fa.len() >= 20,
        detail: format!("7 commands, {} output files compared, {} differ {differing:?}", fa.len(), differing.len()),
    }
}

// ---------------------------------------------------------------------------
// 10. Confidence interval
// ---------------------------------------------------------------------------

fn criterion_ci(results: &[SeedResults]) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for r in results {
        for report in r.one_shot.values().chain(r.five_shot.values()) {
            let v = &report.per_episode;
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
            worst = worst.max((report.ci95 - 1.96 * std / 600f64.sqrt()).abs());
            worst = worst.max((report.mean_acc - mean).abs());
            checked += usize::from(v.len() == 600);
        }
    }
    Outcome {
        pass: worst <= 1e-12 && checked == results.len() * 8,
        detail: format!("{checked} reports of 600 episodes, max deviation {worst:.2e} (tol 1e-12)"),
    }
}

fn main() {
    let start = Instant::now();
    let mut all = true;

    let t = Instant::now();
    all &= report(1, "Gaussian product vs grid product", t, criterion_gaussian_product());
    let t = Instant::now();
    all &= report(2, "gradient fidelity", t, criterion_gradients());

    let t = Instant::now();
    let trained: Vec<Trained> = SEEDS.iter().map(|&s| train(s)).collect();
    let results: Vec<SeedResults> = trained.iter().zip(SEEDS).map(|(t, s)| seed_results(t, s)).collect();
    println!("       trained and evaluated {} seeds in {:.1}s", SEEDS.len(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    all &= report(3, "mean-only vs nearest-centroid oracle", t, criterion_nearest_centroid(&trained[0]));
    let t = Instant::now();
    all &= report(4, "fusion vs scalar-loop oracle", t, criterion_scalar_fusion(&trained[0]));
    let t = Instant::now();
    all &= report(5, "ablation ordering (5-way 1-shot, 5 seeds)", t, criterion_table4(&results));
    let t = Instant::now();
    all &= report(6, "prototype similarity to true centers", t, criterion_table3(&results));
    let t = Instant::now();
    all &= report(7, "robustness to knowledge noise", t, criterion_table5(&results));
    let t = Instant::now();
    all &= report(8, "completion gain shrinks with shots", t, criterion_shots(&results));
    let t = Instant::now();
    all &= report(9, "CLI byte determinism", t, criterion_cli_determinism());
    let t = Instant::now();
    all &= report(10, "CI half-width formula", t, criterion_ci(&results));

    println!(
        "acceptance: {} in {:.1}s",
        if all { "all criteria passed" } else { "FAILURES" },
        start.elapsed().as_secs_f64()
    );
    if !all {
        std::process::exit(1);
    }
}
