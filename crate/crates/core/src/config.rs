//! Flat `key = value` experiment configuration files.
//!
//! One assignment per line, `#` starts a comment. Unknown keys and duplicate
//! keys are errors; missing keys keep their defaults. Lists are comma
//! separated (`seeds = 1,2,3,4`, `detector_hidden_dims = 64,32`).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::datapool::SyntheticParams;
use crate::harness::{DataSource, ExperimentConfig, NetTraining};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {message}")]
    BadValue { line: usize, key: String, message: String },
    #[error("{0}")]
    Inconsistent(String),
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(s.trim())).collect()
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("expected true/false, got `{other}`")),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn net_key(net: &mut NetTraining, field: &str, v: &str) -> Option<Result<(), String>> {
    let t = &mut net.train;
    let r = match field {
        "hidden_dims" => parse_list(v).map(|x| net.hidden_dims = x),
        "dropout" => parse(v).map(|x| net.dropout_rate = x),
        "epochs" => parse(v).map(|x| t.epochs = x),
        "learning_rate" => parse(v).map(|x| t.learning_rate = x),
        "momentum" => parse(v).map(|x| t.momentum = x),
        "weight_decay" => parse(v).map(|x| t.weight_decay = x),
        "batch_size" => parse(v).map(|x| t.batch_size = x),
        "temperature" => parse(v).map(|x| t.temperature = x),
        _ => return None,
    };
    Some(r)
}

#[derive(Default)]
struct Builder {
    synthetic: SyntheticParams,
    train_csv: Option<PathBuf>,
    test_csv: Option<PathBuf>,
    cfg: ExperimentConfig,
}

impl Builder {
    fn set(&mut self, key: &str, v: &str) -> Option<Result<(), String>> {
        let s = &mut self.synthetic;
        let c = &mut self.cfg;
        let r = match key {
            "n_classes" => parse(v).map(|x| s.n_classes = x),
            "dims" => parse(v).map(|x| s.dims = x),
            "per_class" => parse(v).map(|x| s.per_class = x),
            "cluster_spread" => parse(v).map(|x| s.cluster_spread = x),
            "center_scale" => parse(v).map(|x| s.center_scale = x),
            "train_csv" => {
                self.train_csv = Some(PathBuf::from(v));
                Ok(())
            }
            "test_csv" => {
                self.test_csv = Some(PathBuf::from(v));
                Ok(())
            }
            "standardize" => parse_bool(v).map(|x| c.standardize = x),
            "mismatch_ratio" => parse(v).map(|x| c.mismatch_ratio = x),
            "init_per_class" => parse(v).map(|x| c.init_per_class = x),
            "rounds" => parse(v).map(|x| c.rounds = x),
            "b" => parse(v).map(|x| c.b = x),
            "strategy" => parse(v).map(|x| c.strategy = x),
            "ablation" => parse(v).map(|x| c.ablation = x),
            "seeds" => parse_list(v).map(|x| c.seeds = x),
            "bald_samples" => parse(v).map(|x| c.bald_samples = x),
            "bald_dropout" => parse(v).map(|x| c.bald_dropout = x),
            "certainty_score" => parse(v).map(|x| c.certainty_score = x),
            "gmm_max_iter" => parse(v).map(|x| c.em.max_iter = x),
            "gmm_tol" => parse(v).map(|x| c.em.tol = x),
            _ => {
                if let Some(field) = key.strip_prefix("detector_") {
                    return net_key(&mut c.detector, field, v);
                }
                if let Some(field) = key.strip_prefix("classifier_") {
                    return net_key(&mut c.classifier, field, v);
                }
                return None;
            }
        };
        Some(r)
    }

    fn finish(mut self) -> Result<ExperimentConfig, ConfigError> {
        self.cfg.data = match (self.train_csv, self.test_csv) {
            (None, None) => DataSource::Synthetic(self.synthetic),
            (Some(train), Some(test)) => DataSource::Csv { train, test },
            _ => return Err(ConfigError::Inconsistent("train_csv and test_csv must be given together".into())),
        };
        Ok(self.cfg)
    }
}

/// Parses config text on top of [`ExperimentConfig::default`].
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut builder = Builder::default();
    let mut seen = HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        match builder.set(key, value) {
            None => return Err(ConfigError::UnknownKey { line, key: key.into() }),
            Some(Err(message)) => {
                return Err(ConfigError::BadValue {
                    line,
                    key: key.into(),
                    message,
                })
            }
            Some(Ok(())) => {}
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::DuplicateKey { line, key: key.into() });
        }
    }
    builder.finish()
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}

/// Renders every key; `parse_config(&render_config(c))` reproduces `c`.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    match &cfg.data {
        DataSource::Synthetic(s) => {
            kv("n_classes", s.n_classes.to_string());
            kv("dims", s.dims.to_string());
            kv("per_class", s.per_class.to_string());
            kv("cluster_spread", s.cluster_spread.to_string());
            kv("center_scale", s.center_scale.to_string());
        }
        DataSource::Csv { train, test } => {
            kv("train_csv", train.display().to_string());
            kv("test_csv", test.display().to_string());
        }
    }
    kv("standardize", cfg.standardize.to_string());
    kv("mismatch_ratio", cfg.mismatch_ratio.to_string());
    kv("init_per_class", cfg.init_per_class.to_string());
    kv("rounds", cfg.rounds.to_string());
    kv("b", cfg.b.to_string());
    kv("strategy", cfg.strategy.to_string());
    kv("ablation", cfg.ablation.to_string());
    kv("seeds", join(&cfg.seeds));
    for (prefix, net) in [("detector", &cfg.detector), ("classifier", &cfg.classifier)] {
        kv(&format!("{prefix}_hidden_dims"), join(&net.hidden_dims));
        kv(&format!("{prefix}_dropout"), net.dropout_rate.to_string());
        kv(&format!("{prefix}_epochs"), net.train.epochs.to_string());
        kv(&format!("{prefix}_learning_rate"), net.train.learning_rate.to_string());
        kv(&format!("{prefix}_momentum"), net.train.momentum.to_string());
        kv(&format!("{prefix}_weight_decay"), net.train.weight_decay.to_string());
        kv(&format!("{prefix}_batch_size"), net.train.batch_size.to_string());
        kv(&format!("{prefix}_temperature"), net.train.temperature.to_string());
    }
    kv("bald_samples", cfg.bald_samples.to_string());
    kv("bald_dropout", cfg.bald_dropout.to_string());
    kv("certainty_score", cfg.certainty_score.to_string());
    kv("gmm_max_iter", cfg.em.max_iter.to_string());
    kv("gmm_tol", cfg.em.tol.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Ablation;
    use crate::samplers::Strategy;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(parse_config("# nothing\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn parses_values_and_comments() {
        let cfg = parse_config(
            "strategy = random   # baseline\nseeds = 7, 8\nrounds=2\ndetector_hidden_dims = 32,16\nablation = no_invalid_set\nclassifier_temperature = 1.5\n",
        )
        .unwrap();
        assert_eq!(cfg.strategy, Strategy::Random);
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert_eq!(cfg.rounds, 2);
        assert_eq!(cfg.detector.hidden_dims, vec![32, 16]);
        assert_eq!(cfg.ablation, Ablation::NoInvalidSet);
        assert_eq!(cfg.classifier.train.temperature, 1.5);
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = ExperimentConfig {
            seeds: vec![3, 1],
            ..ExperimentConfig::default()
        };
        cfg.detector.hidden_dims = vec![];
        cfg.em.tol = 1e-8;
        assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
        let csv = ExperimentConfig {
            data: DataSource::Csv {
                train: "a.csv".into(),
                test: "b.csv".into(),
            },
            ..ExperimentConfig::default()
        };
        assert_eq!(parse_config(&render_config(&csv)).unwrap(), csv);
    }

    #[test]
    fn errors_name_the_line() {
        assert!(matches!(
            parse_config("rounds = 2\nfoo = 1"),
            Err(ConfigError::UnknownKey { line: 2, .. })
        ));
        assert!(matches!(
            parse_config("detector_colour = red"),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(parse_config("rounds"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(parse_config("rounds = two"), Err(ConfigError::BadValue { line: 1, .. })));
        assert!(matches!(parse_config("strategy = openmax"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(
            parse_config("b = 1\nb = 2"),
            Err(ConfigError::DuplicateKey { line: 2, .. })
        ));
        assert!(matches!(parse_config("train_csv = x.csv"), Err(ConfigError::Inconsistent(_))));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_config(Path::new("/nonexistent/osal.conf")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/osal.conf"));
    }
}
