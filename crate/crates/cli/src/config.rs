//! Flat `key = value` run configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use fewshot::{
    Ablation, EpisodeSpec, EvalConfig, GraphConfig, KlDirection, PretrainConfig, SparsifyRule,
    TaskTrainConfig,
};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f64" => Ok(Self::F64),
            "f32" => Ok(Self::F32),
            _ => Err(format!("expected f64 or f32, got {s:?}")),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F64 => "f64",
            Self::F32 => "f32",
        })
    }
}

/// Every tunable of every command. Defaults mirror the library defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub n: usize,
    pub k: usize,
    pub q: usize,
    pub tasks: usize,
    pub graph: GraphConfig,
    pub train: TaskTrainConfig,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            n: 5,
            k: 1,
            q: 15,
            tasks: 600,
            graph: GraphConfig::default(),
            train: TaskTrainConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn int_in(key: &str, value: &str, lo: usize, hi: usize) -> Result<usize, String> {
    let v: usize = parse(key, value)?;
    if (lo..=hi).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{key}: {v} outside [{lo}, {hi}]"))
    }
}

fn real(key: &str, value: &str, ok: impl Fn(f64) -> bool, range: &str) -> Result<f64, String> {
    let v: f64 = parse(key, value)?;
    if v.is_finite() && ok(v) {
        Ok(v)
    } else {
        Err(format!("{key}: {value} must be {range}"))
    }
}

fn positive(key: &str, value: &str) -> Result<f64, String> {
    real(key, value, |v| v > 0.0, "a positive number")
}

fn unit_open(key: &str, value: &str) -> Result<f64, String> {
    real(key, value, |v| (0.0..1.0).contains(&v), "in [0, 1)")
}

fn widths(key: &str, value: &str) -> Result<Vec<usize>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .map(|w| int_in(key, w, 1, 1 << 16))
        .collect()
}

const LIMIT: usize = 1 << 24;

impl RunConfig {
    #[cfg(test)]
    pub const KEYS: [&'static str; 28] = [
        "seed",
        "precision",
        "n",
        "k",
        "q",
        "tasks",
        "m",
        "gamma",
        "alpha_init",
        "sparsify_rule",
        "lambda_mix",
        "copies",
        "beta",
        "stage1_epochs",
        "stage2_epochs",
        "lr1",
        "lr2",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "kl_direction",
        "temperature",
        "pretrain_epochs",
        "batch_size",
        "pretrain_lr",
        "momentum",
        "embed_dim",
        "hidden",
    ];

    /// Sets one key, rejecting unknown keys and out-of-range values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        let t = &mut self.train;
        let p = &mut self.pretrain;
        match key.trim() {
            "seed" => self.seed = parse(key, value)?,
            "precision" => self.precision = value.parse()?,
            "n" => self.n = int_in(key, value, 2, LIMIT)?,
            "k" => self.k = int_in(key, value, 1, LIMIT)?,
            "q" => self.q = int_in(key, value, 1, LIMIT)?,
            "tasks" => self.tasks = int_in(key, value, 1, LIMIT)?,
            "m" => self.graph.m = int_in(key, value, 1, LIMIT)?,
            "gamma" => self.graph.gamma = int_in(key, value, 0, 64)?,
            "alpha_init" => self.graph.alpha_init = real(key, value, |_| true, "finite")?,
            "sparsify_rule" => self.graph.rule = value.parse::<SparsifyRule>()?,
            "lambda_mix" => t.lambda_mix = real(key, value, |v| v > 0.0 && v <= 1.0, "in (0, 1]")?,
            "copies" => t.copies = int_in(key, value, 0, 100_000)?,
            "beta" => t.beta = real(key, value, |v| (0.0..=1.0).contains(&v), "in [0, 1]")?,
            "stage1_epochs" => t.stage1_epochs = int_in(key, value, 0, LIMIT)?,
            "stage2_epochs" => t.stage2_epochs = int_in(key, value, 0, LIMIT)?,
            "lr1" => t.lr1 = positive(key, value)?,
            "lr2" => t.lr2 = positive(key, value)?,
            "adam_beta1" => t.adam_beta1 = unit_open(key, value)?,
            "adam_beta2" => t.adam_beta2 = unit_open(key, value)?,
            "adam_eps" => t.adam_eps = positive(key, value)?,
            "kl_direction" => t.kl_direction = value.parse::<KlDirection>()?,
            "temperature" => p.temperature = positive(key, value)?,
            "pretrain_epochs" => p.epochs = int_in(key, value, 1, LIMIT)?,
            "batch_size" => p.batch_size = int_in(key, value, 1, LIMIT)?,
            "pretrain_lr" => p.learning_rate = positive(key, value)?,
            "momentum" => p.momentum = unit_open(key, value)?,
            "embed_dim" => p.arch.embed_dim = int_in(key, value, 1, 1 << 16)?,
            "hidden" => p.arch.hidden = widths(key, value)?,
            other => return Err(format!("unknown configuration key {other:?}")),
        }
        Ok(())
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key = value", path.display(), no + 1)))?;
            self.set(k, v)
                .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), no + 1)))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {pair:?}")))?;
        self.set(k, v).map_err(CliError::Usage)
    }

    pub fn value(&self, key: &str) -> String {
        let t = &self.train;
        let p = &self.pretrain;
        match key {
            "seed" => self.seed.to_string(),
            "precision" => self.precision.to_string(),
            "n" => self.n.to_string(),
            "k" => self.k.to_string(),
            "q" => self.q.to_string(),
            "tasks" => self.tasks.to_string(),
            "m" => self.graph.m.to_string(),
            "gamma" => self.graph.gamma.to_string(),
            "alpha_init" => self.graph.alpha_init.to_string(),
            "sparsify_rule" => self.graph.rule.to_string(),
            "lambda_mix" => t.lambda_mix.to_string(),
            "copies" => t.copies.to_string(),
            "beta" => t.beta.to_string(),
            "stage1_epochs" => t.stage1_epochs.to_string(),
            "stage2_epochs" => t.stage2_epochs.to_string(),
            "lr1" => t.lr1.to_string(),
            "lr2" => t.lr2.to_string(),
            "adam_beta1" => t.adam_beta1.to_string(),
            "adam_beta2" => t.adam_beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "kl_direction" => t.kl_direction.to_string(),
            "temperature" => p.temperature.to_string(),
            "pretrain_epochs" => p.epochs.to_string(),
            "batch_size" => p.batch_size.to_string(),
            "pretrain_lr" => p.learning_rate.to_string(),
            "momentum" => p.momentum.to_string(),
            "embed_dim" => p.arch.embed_dim.to_string(),
            "hidden" => p
                .arch
                .hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// `# key = value` lines for the given keys.
    pub fn echo(&self, keys: &[&str]) -> String {
        keys.iter()
            .map(|k| format!("# {k} = {}\n", self.value(k)))
            .collect()
    }

    pub fn spec(&self) -> Result<EpisodeSpec, CliError> {
        Ok(EpisodeSpec::new(self.n, self.k, self.q)?)
    }

    pub fn eval_config(&self, ablation: Ablation) -> Result<EvalConfig, CliError> {
        let cfg = EvalConfig {
            spec: self.spec()?,
            tasks: self.tasks,
            seed: self.seed,
            ablation,
            graph: self.graph,
            train: self.train.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig, CliError> {
        let cfg = PretrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const TASK_KEYS: [&str; 21] = [
    "seed",
    "precision",
    "n",
    "k",
    "q",
    "tasks",
    "m",
    "gamma",
    "alpha_init",
    "sparsify_rule",
    "lambda_mix",
    "copies",
    "beta",
    "stage1_epochs",
    "stage2_epochs",
    "lr1",
    "lr2",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "kl_direction",
];

pub const PRETRAIN_KEYS: [&str; 9] = [
    "seed",
    "precision",
    "temperature",
    "pretrain_epochs",
    "batch_size",
    "pretrain_lr",
    "momentum",
    "embed_dim",
    "hidden",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips_through_its_echo() {
        let cfg = RunConfig::default();
        for key in RunConfig::KEYS {
            let mut copy = RunConfig::default();
            copy.set(key, &cfg.value(key)).unwrap();
            assert_eq!(copy, cfg, "{key}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_ranges_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("bogus", "1").is_err());
        assert!(cfg.set("beta", "1.5").is_err());
        assert!(cfg.set("lambda_mix", "0").is_err());
        assert!(cfg.set("n", "1").is_err());
        assert!(cfg.set("lr1", "nan").is_err());
        assert!(cfg.set("adam_beta2", "1").is_err());
        assert!(cfg.set("kl_direction", "sideways").is_err());
        cfg.set("hidden", "").unwrap();
        assert!(cfg.pretrain.arch.hidden.is_empty());
        cfg.set("hidden", "8, 4").unwrap();
        assert_eq!(cfg.pretrain.arch.hidden, vec![8, 4]);
    }

    #[test]
    fn file_values_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nbeta = 0.25\n\nm=4\nbeta=0.75\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!((cfg.train.beta, cfg.graph.m), (0.75, 4));
        std::fs::write(&path, "gamma = x\n").unwrap();
        assert!(matches!(cfg.apply_file(&path), Err(CliError::Usage(_))));
    }
}
