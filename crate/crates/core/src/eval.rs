//! Episodic evaluation: end-to-end task solving, accuracy aggregation with
//! 95% confidence intervals, k sweeps and the ablation grid.
//!
//! Task `t` of a run with seed `s` samples its episode from
//! `mix_seed(s, t)` and trains from `mix_seed(mix_seed(s, t), 1)`, so results
//! do not depend on how tasks are scheduled over workers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::classifier::{aggregate, predict, train_stage1, train_stage2, ClassifierParams, TaskTrainConfig};
use crate::contrastive::random_orthonormal;
use crate::dataset::{check_feasible, sample_episode, Episode, EpisodeSpec, FeatureDataset, Record};
use crate::error::{Error, Result};
use crate::graph::{GraphConfig, TaskGraph};
use crate::rng::{mix_seed, rng_from_seed, standard_normal};
use crate::scalar::Scalar;

use rand::seq::SliceRandom;

/// Pipeline variants compared in the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, PartialOrd, Ord)]
pub enum Ablation {
    #[default]
    Full,
    NoDistill,
    NoAug,
    NoBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Self::Full, Self::NoDistill, Self::NoAug, Self::NoBoth];

    pub fn from_flags(no_aug: bool, no_distill: bool) -> Self {
        match (no_aug, no_distill) {
            (false, false) => Self::Full,
            (false, true) => Self::NoDistill,
            (true, false) => Self::NoAug,
            (true, true) => Self::NoBoth,
        }
    }

    pub fn uses_mixup(self) -> bool {
        matches!(self, Self::Full | Self::NoDistill)
    }

    pub fn uses_distillation(self) -> bool {
        matches!(self, Self::Full | Self::NoAug)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoDistill => "no_distill",
            Self::NoAug => "no_aug",
            Self::NoBoth => "no_both",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub spec: EpisodeSpec,
    pub tasks: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub graph: GraphConfig,
    pub train: TaskTrainConfig,
}

impl EvalConfig {
    pub fn new(spec: EpisodeSpec) -> Self {
        Self {
            spec,
            tasks: 600,
            seed: 0,
            ablation: Ablation::Full,
            graph: GraphConfig::default(),
            train: TaskTrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.tasks == 0 {
            return Err(Error::param("tasks", "must be at least 1"));
        }
        self.graph.validate()?;
        self.train.validate()
    }

    /// Seed of task `index`'s episode.
    pub fn episode_seed(&self, index: usize) -> u64 {
        mix_seed(self.seed, index as u64)
    }
}

/// Accuracy summary of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub per_task_accuracies: Vec<f64>,
    pub episode_seeds: Vec<u64>,
    /// Not serialized; varies between runs.
    pub wall_time: Duration,
}

/// `(mean, 1.96 · s / √T)` with `s` the sample standard deviation; a single
/// task has `ci95 = 0`.
pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Everything `run_episode` needs besides data.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub graph: GraphConfig,
    pub train: TaskTrainConfig,
    pub ablation: Ablation,
}

impl From<&EvalConfig> for EpisodeConfig {
    fn from(c: &EvalConfig) -> Self {
        Self {
            graph: c.graph,
            train: c.train.clone(),
            ablation: c.ablation,
        }
    }
}

/// Result of solving one task.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome<T> {
    /// Predicted episode label per query, in query order.
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub classifier: ClassifierParams<T>,
}

/// Builds the task graph, trains both stages (as the ablation allows) and
/// classifies the queries.
pub fn solve_episode<T: Scalar>(
    features: &FeatureDataset,
    episode: &Episode,
    cfg: &EpisodeConfig,
) -> Result<EpisodeOutcome<T>> {
    cfg.graph.validate()?;
    let v = episode.vertex_matrix::<T>(features);
    let graph = TaskGraph::build(v, cfg.graph.m, cfg.graph.rule)?;
    let prop = cfg.graph.propagation::<T>();
    let mut train = cfg.train.clone();
    if !cfg.ablation.uses_mixup() {
        train.copies = 0;
    }
    let theta0 = train_stage1(&graph, episode, &train, &prop)?.params;
    let theta = if cfg.ablation.uses_distillation() {
        train_stage2(&graph, episode, &theta0, &train, &prop)?.params
    } else {
        theta0
    };
    let v_new = aggregate(&graph, &theta, prop.gamma)?;
    let ns = episode.spec.support_len();
    let query_rows: Vec<usize> = (ns..ns + episode.query.len()).collect();
    let predictions = predict(&theta, &v_new.select_rows(&query_rows))?;
    let correct = predictions
        .iter()
        .zip(episode.query_labels())
        .filter(|(p, y)| **p == *y)
        .count();
    Ok(EpisodeOutcome {
        accuracy: correct as f64 / episode.query.len() as f64,
        predictions,
        classifier: theta,
    })
}

/// Query accuracy of one task.
pub fn run_episode<T: Scalar>(features: &FeatureDataset, episode: &Episode, cfg: &EpisodeConfig) -> Result<f64> {
    Ok(solve_episode::<T>(features, episode, cfg)?.accuracy)
}

fn evaluate_with<T: Scalar>(features: &FeatureDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let start = Instant::now();
    let episode_seeds: Vec<u64> = (0..cfg.tasks).map(|t| cfg.episode_seed(t)).collect();
    let base = EpisodeConfig::from(cfg);
    let per_task_accuracies = episode_seeds
        .par_iter()
        .map(|&seed| {
            let episode = sample_episode(features, cfg.spec, seed)?;
            let mut ep_cfg = base.clone();
            ep_cfg.train.seed = mix_seed(seed, 1);
            run_episode::<T>(features, &episode, &ep_cfg)
        })
        .collect::<Result<Vec<f64>>>()?;
    log::debug!(
        "evaluate {}: episode seeds {:?}",
        cfg.ablation.name(),
        episode_seeds
    );
    let (mean_accuracy, ci95) = mean_and_ci95(&per_task_accuracies);
    Ok(EvalReport {
        config: cfg.clone(),
        mean_accuracy,
        ci95,
        per_task_accuracies,
        episode_seeds,
        wall_time: start.elapsed(),
    })
}

/// Evaluates `cfg.tasks` sampled episodes on the current rayon pool.
pub fn evaluate<T: Scalar>(features: &FeatureDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    check_feasible(features, &cfg.spec)?;
    evaluate_with::<T>(features, cfg)
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::param("workers", e.to_string()))?;
    Ok(pool.install(f))
}

/// One evaluation per shot count, everything else fixed.
pub fn sweep_k<T: Scalar>(features: &FeatureDataset, base: &EvalConfig, k_list: &[usize]) -> Result<Vec<EvalReport>> {
    for &k in k_list {
        let spec = EpisodeSpec {
            k_shot: k,
            ..base.spec
        };
        check_feasible(features, &spec)?;
    }
    k_list
        .iter()
        .map(|&k| {
            let cfg = EvalConfig {
                spec: EpisodeSpec {
                    k_shot: k,
                    ..base.spec
                },
                ..base.clone()
            };
            evaluate::<T>(features, &cfg)
        })
        .collect()
}

/// Full, no_distill, no_aug, no_both on identical episode seeds.
pub fn ablation_grid<T: Scalar>(features: &FeatureDataset, base: &EvalConfig) -> Result<Vec<EvalReport>> {
    Ablation::ALL
        .iter()
        .map(|&ablation| {
            let cfg = EvalConfig {
                ablation,
                ..base.clone()
            };
            evaluate::<T>(features, &cfg)
        })
        .collect()
}

impl EvalReport {
    /// Key-value configuration lines shared by the text report and CLI
    /// headers.
    pub fn config_lines(cfg: &EvalConfig) -> Vec<(&'static str, String)> {
        let t = &cfg.train;
        vec![
            ("variant", cfg.ablation.name().to_string()),
            ("n_way", cfg.spec.n_way.to_string()),
            ("k_shot", cfg.spec.k_shot.to_string()),
            ("q_query", cfg.spec.q_query.to_string()),
            ("tasks", cfg.tasks.to_string()),
            ("seed", cfg.seed.to_string()),
            ("m", cfg.graph.m.to_string()),
            ("gamma", cfg.graph.gamma.to_string()),
            ("alpha_init", cfg.graph.alpha_init.to_string()),
            ("sparsify_rule", cfg.graph.rule.to_string()),
            ("lambda_mix", t.lambda_mix.to_string()),
            ("copies", t.copies.to_string()),
            ("beta", t.beta.to_string()),
            ("stage1_epochs", t.stage1_epochs.to_string()),
            ("stage2_epochs", t.stage2_epochs.to_string()),
            ("lr1", t.lr1.to_string()),
            ("lr2", t.lr2.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("kl_direction", t.kl_direction.to_string()),
        ]
    }

    /// Diff-stable text form: `key: value` header, then one
    /// `task_index<TAB>accuracy` line per task.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in Self::config_lines(&self.config) {
            writeln!(out, "{k}: {v}").unwrap();
        }
        writeln!(out, "mean_accuracy: {}", self.mean_accuracy).unwrap();
        writeln!(out, "ci95: {}", self.ci95).unwrap();
        for (i, a) in self.per_task_accuracies.iter().enumerate() {
            writeln!(out, "{i}\t{a}").unwrap();
        }
        out
    }

    /// Parses [`EvalReport::to_text`] output; `#` lines are ignored. Episode
    /// seeds are re-derived from the configuration.
    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::param("report", reason);
        let mut header = BTreeMap::new();
        let mut per_task = Vec::new();
        for line in text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        {
            if let Some((k, v)) = line.split_once(": ") {
                header.insert(k.to_string(), v.to_string());
            } else if let Some((i, a)) = line.split_once('\t') {
                let i: usize = i.parse().map_err(|_| bad(format!("bad task index {i:?}")))?;
                if i != per_task.len() {
                    return Err(bad(format!("task index {i} out of order")));
                }
                per_task.push(a.parse::<f64>().map_err(|_| bad(format!("bad accuracy {a:?}")))?);
            } else {
                return Err(bad(format!("unrecognized line {line:?}")));
            }
        }
        fn get<V: FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<V> {
            h.get(key)
                .ok_or_else(|| Error::param("report", format!("missing key {key}")))?
                .parse()
                .map_err(|_| Error::param("report", format!("bad value for {key}")))
        }
        let config = EvalConfig {
            spec: EpisodeSpec::new(get(&header, "n_way")?, get(&header, "k_shot")?, get(&header, "q_query")?)?,
            tasks: get(&header, "tasks")?,
            seed: get(&header, "seed")?,
            ablation: get(&header, "variant")?,
            graph: GraphConfig {
                m: get(&header, "m")?,
                gamma: get(&header, "gamma")?,
                alpha_init: get(&header, "alpha_init")?,
                rule: get(&header, "sparsify_rule")?,
            },
            train: TaskTrainConfig {
                lambda_mix: get(&header, "lambda_mix")?,
                copies: get(&header, "copies")?,
                beta: get(&header, "beta")?,
                stage1_epochs: get(&header, "stage1_epochs")?,
                stage2_epochs: get(&header, "stage2_epochs")?,
                lr1: get(&header, "lr1")?,
                lr2: get(&header, "lr2")?,
                adam_beta1: get(&header, "adam_beta1")?,
                adam_beta2: get(&header, "adam_beta2")?,
                adam_eps: get(&header, "adam_eps")?,
                kl_direction: get(&header, "kl_direction")?,
                seed: 0,
            },
        };
        if per_task.len() != config.tasks {
            return Err(bad(format!(
                "{} task lines for {} tasks",
                per_task.len(),
                config.tasks
            )));
        }
        let episode_seeds = (0..config.tasks).map(|t| config.episode_seed(t)).collect();
        Ok(Self {
            mean_accuracy: get(&header, "mean_accuracy")?,
            ci95: get(&header, "ci95")?,
            config,
            per_task_accuracies: per_task,
            episode_seeds,
            wall_time: Duration::ZERO,
        })
    }
}

/// Gaussian clusters standing in for extracted features.
///
/// Centroids are `sep / √2` times orthonormal directions, so every pair of
/// centroids is exactly `sep` apart (in units of the within-class std of 1)
/// whenever `clusters ≤ dim`. With more clusters than dimensions the
/// directions are independent random unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClusters {
    pub clusters: usize,
    pub sep: f64,
    pub dim: usize,
    pub per_class: usize,
    /// Replace the class ids by a seeded permutation of themselves.
    pub shuffle_labels: bool,
    pub seed: u64,
}

impl Default for SyntheticClusters {
    fn default() -> Self {
        Self {
            clusters: 5,
            sep: 10.0,
            dim: 64,
            per_class: 100,
            shuffle_labels: false,
            seed: 0,
        }
    }
}

impl SyntheticClusters {
    pub fn generate(&self) -> Result<FeatureDataset> {
        if self.clusters == 0 || self.dim == 0 || self.per_class == 0 {
            return Err(Error::param(
                "synthetic",
                "clusters, dim and per_class must be positive",
            ));
        }
        if !(self.sep >= 0.0 && self.sep.is_finite()) {
            return Err(Error::param("sep", "must be a non-negative number"));
        }
        let mut rng = rng_from_seed(self.seed);
        let directions = if self.clusters <= self.dim {
            random_orthonormal(self.clusters, self.dim, &mut rng)
        } else {
            (0..self.clusters)
                .map(|_| random_orthonormal(1, self.dim, &mut rng).remove(0))
                .collect()
        };
        let radius = self.sep / std::f64::consts::SQRT_2;
        let mut records = Vec::with_capacity(self.clusters * self.per_class);
        for (c, dir) in directions.iter().enumerate() {
            for _ in 0..self.per_class {
                let vector = dir
                    .iter()
                    .map(|d| radius * d + standard_normal(&mut rng))
                    .collect();
                records.push(Record {
                    class_id: c as u32,
                    vector,
                });
            }
        }
        if self.shuffle_labels {
            let mut ids: Vec<u32> = records.iter().map(|r| r.class_id).collect();
            ids.shuffle(&mut rng);
            for (r, id) in records.iter_mut().zip(ids) {
                r.class_id = id;
            }
        }
        FeatureDataset::new(self.dim, records, None)
    }
}

impl FromStr for SyntheticClusters {
    type Err = String;

    /// `clusters=5,sep=10,dim=64,per_class=100[,shuffle=1][,seed=3]`;
    /// omitted keys keep their defaults.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut out = Self::default();
        for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {item:?}"))?;
            let num_err = |_| format!("bad value for {k}: {v:?}");
            match k.trim() {
                "clusters" => out.clusters = v.parse().map_err(num_err)?,
                "sep" => out.sep = v.parse().map_err(|_| format!("bad value for sep: {v:?}"))?,
                "dim" => out.dim = v.parse().map_err(num_err)?,
                "per_class" => out.per_class = v.parse().map_err(num_err)?,
                "seed" => out.seed = v.parse().map_err(num_err)?,
                "shuffle" => {
                    out.shuffle_labels = match v {
                        "1" | "true" => true,
                        "0" | "false" => false,
                        _ => return Err(format!("bad value for shuffle: {v:?}")),
                    }
                }
                other => return Err(format!("unknown synthetic key {other:?}")),
            }
        }
        Ok(out)
    }
}

impl std::fmt::Display for SyntheticClusters {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "clusters={},sep={},dim={},per_class={},shuffle={},seed={}",
            self.clusters,
            self.sep,
            self.dim,
            self.per_class,
            u8::from(self.shuffle_labels),
            self.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_conventions() {
        assert_eq!(mean_and_ci95(&[0.7]), (0.7, 0.0));
        let (m, ci) = mean_and_ci95(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        // s = sqrt(0.5), ci = 1.96 * s / sqrt(2) = 0.98
        assert!((ci - 0.98).abs() < 1e-12);
    }

    #[test]
    fn ablation_flags() {
        assert_eq!(Ablation::from_flags(true, true), Ablation::NoBoth);
        assert!(!Ablation::NoAug.uses_mixup());
        assert!(Ablation::NoAug.uses_distillation());
        assert!(!Ablation::NoDistill.uses_distillation());
        assert_eq!("no_aug".parse::<Ablation>().unwrap(), Ablation::NoAug);
    }

    #[test]
    fn synthetic_separation_is_exact() {
        let ds = SyntheticClusters {
            clusters: 3,
            sep: 10.0,
            dim: 8,
            per_class: 4000,
            ..Default::default()
        }
        .generate()
        .unwrap();
        let centroid = |c: usize| -> Vec<f64> {
            let m = ds.class_members(c);
            (0..8)
                .map(|f| m.iter().map(|&i| ds.record(i).vector[f]).sum::<f64>() / m.len() as f64)
                .collect()
        };
        let (a, b) = (centroid(0), centroid(1));
        let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((d - 10.0).abs() < 0.2, "{d}");
    }

    #[test]
    fn synthetic_spec_parsing() {
        let s: SyntheticClusters = "clusters=5,sep=10,dim=64,per_class=100".parse().unwrap();
        assert_eq!(s, SyntheticClusters::default());
        assert!("clusters=5,bogus=1".parse::<SyntheticClusters>().is_err());
        let s: SyntheticClusters = "sep=0,shuffle=1".parse().unwrap();
        assert!(s.shuffle_labels);
        assert_eq!(s.to_string().parse::<SyntheticClusters>().unwrap(), s);
    }

    #[test]
    fn shuffled_labels_keep_class_sizes() {
        let ds = SyntheticClusters {
            shuffle_labels: true,
            per_class: 7,
            ..Default::default()
        }
        .generate()
        .unwrap();
        assert!((0..5).all(|c| ds.class_members(c).len() == 7));
    }
}
