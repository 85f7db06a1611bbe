use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use fewshot::contrastive::load_images;
use fewshot::eval::{solve_episode, with_workers};
use fewshot::rng::mix_seed;
use fewshot::{
    evaluate, extract_features, import_csv, load_encoders, load_features, pretrain as train_encoders,
    sample_episode, save_encoders, save_features, Ablation, EpisodeConfig, EvalReport, FeatureDataset, RawSample,
    Scalar, SyntheticClusters, SyntheticPairs,
};

use crate::config::{Precision, RunConfig, PRETRAIN_KEYS, TASK_KEYS};
use crate::CliError;

pub enum Samples {
    File(PathBuf),
    Synthetic(SyntheticPairs),
}

impl Samples {
    fn load(&self) -> Result<(Vec<RawSample>, Vec<u32>), CliError> {
        Ok(match self {
            Self::File(path) => load_images(path)?,
            Self::Synthetic(spec) => spec.generate()?,
        })
    }

    fn describe(&self) -> String {
        match self {
            Self::File(path) => format!("data:{}", path.display()),
            Self::Synthetic(spec) => format!("synthetic:{spec}"),
        }
    }
}

pub enum Features {
    File(PathBuf),
    Csv(PathBuf),
    Synthetic(SyntheticClusters),
}

impl Features {
    fn load(&self) -> Result<FeatureDataset, CliError> {
        Ok(match self {
            Self::File(path) => load_features(path)?,
            Self::Csv(path) => import_csv(path)?,
            Self::Synthetic(spec) => spec.generate()?,
        })
    }

    fn describe(&self) -> String {
        match self {
            Self::File(path) => format!("features:{}", path.display()),
            Self::Csv(path) => format!("csv:{}", path.display()),
            Self::Synthetic(spec) => format!("synthetic:{spec}"),
        }
    }
}

fn header(command: &str, source: &str, cfg: &RunConfig, keys: &[&str]) -> String {
    format!("# command = {command}\n# source = {source}\n{}", cfg.echo(keys))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io {
        path: "stdout".into(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn pretrain_as<T: Scalar>(
    cfg: &RunConfig,
    data: &[RawSample],
    path: &Path,
) -> Result<Vec<f64>, CliError> {
    let outcome = train_encoders::<T>(data, &cfg.pretrain_config()?)?;
    save_encoders(&outcome.params, path)?;
    Ok(outcome.loss_trace.into_iter().map(Scalar::as_f64).collect())
}

pub fn pretrain(cfg: &RunConfig, source: &Samples, path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let pcfg = cfg.pretrain_config()?;
    let (data, _) = source.load()?;
    let trace = match cfg.precision {
        Precision::F64 => pretrain_as::<f64>(cfg, &data, path)?,
        Precision::F32 => pretrain_as::<f32>(cfg, &data, path)?,
    };
    let mut text = header("pretrain", &source.describe(), cfg, &PRETRAIN_KEYS);
    writeln!(text, "# samples = {}", data.len()).unwrap();
    writeln!(text, "# feature_dim = {}", 2 * pcfg.arch.embed_dim).unwrap();
    text.push_str("# epoch\tloss\n");
    for (i, loss) in trace.iter().enumerate() {
        writeln!(text, "{}\t{loss}", i + 1).unwrap();
    }
    emit(out, &text)
}

fn embed_as<T: Scalar>(encoder: &Path, data: &[RawSample], labels: &[u32]) -> Result<FeatureDataset, CliError> {
    let params = load_encoders::<T>(encoder)?;
    Ok(extract_features(&params, data, labels)?)
}

pub fn embed(
    cfg: &RunConfig,
    encoder: &Path,
    source: &Samples,
    path: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (data, labels) = source.load()?;
    let features = match cfg.precision {
        Precision::F64 => embed_as::<f64>(encoder, &data, &labels)?,
        Precision::F32 => embed_as::<f32>(encoder, &data, &labels)?,
    };
    save_features(&features, path)?;
    let mut text = header("embed", &source.describe(), cfg, &["precision"]);
    writeln!(text, "# encoder = {}", encoder.display()).unwrap();
    writeln!(text, "# records = {}", features.len()).unwrap();
    writeln!(text, "# dim = {}", features.dim()).unwrap();
    emit(out, &text)
}

pub fn solve(cfg: &RunConfig, source: &Features, ablation: Ablation, out: &mut dyn Write) -> Result<(), CliError> {
    let eval_cfg = cfg.eval_config(ablation)?;
    let data = source.load()?;
    let episode_seed = eval_cfg.episode_seed(0);
    let episode = sample_episode(&data, eval_cfg.spec, episode_seed)?;
    let mut ep_cfg = EpisodeConfig::from(&eval_cfg);
    ep_cfg.train.seed = mix_seed(episode_seed, 1);
    let (predictions, accuracy) = match cfg.precision {
        Precision::F64 => {
            let o = solve_episode::<f64>(&data, &episode, &ep_cfg)?;
            (o.predictions, o.accuracy)
        }
        Precision::F32 => {
            let o = solve_episode::<f32>(&data, &episode, &ep_cfg)?;
            (o.predictions, o.accuracy)
        }
    };
    let keys: Vec<&str> = TASK_KEYS.into_iter().filter(|&k| k != "tasks").collect();
    let mut text = header("solve", &source.describe(), cfg, &keys);
    writeln!(text, "# variant = {}", ablation.name()).unwrap();
    text.push_str("# record\tpredicted_class\ttrue_class\n");
    for (&(record, label), &pred) in episode.query.iter().zip(&predictions) {
        writeln!(
            text,
            "{record}\t{}\t{}",
            episode.class_map[pred], episode.class_map[label]
        )
        .unwrap();
    }
    writeln!(text, "# accuracy = {accuracy}").unwrap();
    emit(out, &text)
}

pub struct EvalOptions {
    pub sweep_k: Vec<usize>,
    pub ablate: bool,
    pub ablation: Ablation,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

fn evaluate_grid(
    cfg: &RunConfig,
    data: &FeatureDataset,
    variants: &[Ablation],
    ks: &[usize],
) -> Result<Vec<Vec<EvalReport>>, CliError> {
    variants
        .iter()
        .map(|&variant| {
            ks.iter()
                .map(|&k| {
                    let mut run = cfg.clone();
                    run.k = k;
                    let ecfg = run.eval_config(variant)?;
                    Ok(match cfg.precision {
                        Precision::F64 => evaluate::<f64>(data, &ecfg)?,
                        Precision::F32 => evaluate::<f32>(data, &ecfg)?,
                    })
                })
                .collect()
        })
        .collect()
}

pub fn eval(cfg: &RunConfig, source: &Features, opts: &EvalOptions, out: &mut dyn Write) -> Result<(), CliError> {
    let ks = if opts.sweep_k.is_empty() {
        vec![cfg.k]
    } else {
        opts.sweep_k.clone()
    };
    if ks.contains(&0) {
        return Err(CliError::Usage("--sweep-k entries must be positive".into()));
    }
    let variants: Vec<Ablation> = if opts.ablate {
        Ablation::ALL.to_vec()
    } else {
        vec![opts.ablation]
    };
    for &k in &ks {
        let mut probe = cfg.clone();
        probe.k = k;
        probe.eval_config(opts.ablation)?;
    }
    let data = source.load()?;
    let grid = match opts.workers {
        Some(w) => with_workers(w, || evaluate_grid(cfg, &data, &variants, &ks))??,
        None => evaluate_grid(cfg, &data, &variants, &ks)?,
    };

    let mut text = header("eval", &source.describe(), cfg, &TASK_KEYS);
    text.push_str("# variant");
    for k in &ks {
        write!(text, "\tk={k}_mean\tk={k}_ci95").unwrap();
    }
    text.push('\n');
    for (variant, row) in variants.iter().zip(&grid) {
        text.push_str(variant.name());
        for r in row {
            write!(text, "\t{:.4}\t{:.4}", r.mean_accuracy, r.ci95).unwrap();
        }
        text.push('\n');
    }
    let mut reports = String::new();
    for report in grid.iter().flatten() {
        writeln!(
            reports,
            "# report variant={} k={}",
            report.config.ablation.name(),
            report.config.spec.k_shot
        )
        .unwrap();
        reports.push_str(&report.to_text());
    }
    match &opts.out {
        Some(path) => write_file(path, &reports)?,
        None => text.push_str(&reports),
    }
    emit(out, &text)
}

/// Splits `eval` report output at its `# report` markers.
#[cfg(test)]
pub fn split_reports(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in text.lines() {
        if line.starts_with("# report ") {
            out.push(String::new());
        } else if let Some(cur) = out.last_mut() {
            cur.push_str(line);
            cur.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig {
            tasks: 3,
            ..Default::default()
        };
        cfg.train.stage2_epochs = 20;
        cfg
    }

    fn clusters() -> Features {
        Features::Synthetic("clusters=5,sep=10,dim=16,per_class=30".parse().unwrap())
    }

    #[test]
    fn solve_prints_one_line_per_query() {
        let mut buf = Vec::new();
        solve(&small(), &clusters(), Ablation::Full, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 75);
        assert!(text.contains("# accuracy = "));
    }

    #[test]
    fn eval_table_and_reports_agree() {
        let opts = EvalOptions {
            sweep_k: vec![1, 2],
            ablate: true,
            ablation: Ablation::Full,
            workers: Some(2),
            out: None,
        };
        let mut buf = Vec::new();
        eval(&small(), &clusters(), &opts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text
            .lines()
            .filter(|l| Ablation::ALL.iter().any(|a| l.starts_with(&format!("{}\t", a.name()))))
            .collect();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.split('\t').count() == 5));
        let reports = split_reports(&text);
        assert_eq!(reports.len(), 8);
        let first = EvalReport::from_text(&reports[0]).unwrap();
        assert_eq!(first.per_task_accuracies.len(), 3);
    }
}
