//! Experiment configuration: a flat `key = value` file plus `--key value`
//! command-line overrides. Every key has a default, so an empty config is a
//! complete one.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{FileFormat, SynthConfig};
use crate::encoder::Activation;
use crate::error::{Error, Result};
use crate::trainer::Hyperparams;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub hp: Hyperparams,
    /// Generator settings; `synth.seed` is the dataset seed, independent of
    /// the training seed in `hp.seed`.
    pub synth: SynthConfig,
    /// Fraction of each class kept for training.
    pub split_ratio: f64,
    pub format: FileFormat,
    pub out: PathBuf,
    /// Directory holding the four feature files when individual paths are
    /// not given. Defaults to `out`.
    pub data: Option<PathBuf>,
    pub train_a: Option<PathBuf>,
    pub train_b: Option<PathBuf>,
    pub test_a: Option<PathBuf>,
    pub test_b: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub query: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
    pub top_k: usize,
    pub threads: Option<usize>,
    pub gradcheck_configs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            hp: Hyperparams::default(),
            synth: SynthConfig::default(),
            split_ratio: 0.8,
            format: FileFormat::Text,
            out: PathBuf::from("out"),
            data: None,
            train_a: None,
            train_b: None,
            test_a: None,
            test_b: None,
            checkpoint: None,
            query: None,
            gallery: None,
            top_k: 10,
            threads: None,
            gradcheck_configs: 20,
        }
    }
}

pub const FEATURE_FILES: [&str; 4] = ["A_train.feat", "A_test.feat", "B_train.feat", "B_test.feat"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_activation(key: &str, value: &str) -> Result<Activation> {
    match value.trim() {
        "tanh" => Ok(Activation::Tanh),
        "identity" | "linear" => Ok(Activation::Identity),
        other => Err(Error::Config(format!("{key}: unknown activation {other:?}"))),
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    }
}

fn parse_format(key: &str, value: &str) -> Result<FileFormat> {
    match value.trim() {
        "text" => Ok(FileFormat::Text),
        "binary" => Ok(FileFormat::Binary),
        other => Err(Error::Config(format!("{key}: unknown format {other:?}"))),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let hp = &mut self.hp;
        let sy = &mut self.synth;
        let path = || Some(PathBuf::from(value.trim()));
        match key {
            "momentum" | "eta" => hp.momentum = parse(key, value)?,
            "batch_size" => hp.batch_size = parse(key, value)?,
            "lambda" => hp.lambda = parse(key, value)?,
            "epochs" => hp.epochs = parse(key, value)?,
            "tau" => hp.tau = parse(key, value)?,
            "lr" => hp.lr = parse(key, value)?,
            "n_k" => hp.base_k = parse(key, value)?,
            "runs" => hp.runs = parse(key, value)?,
            "seed" => hp.seed = parse(key, value)?,
            "hidden" => hp.hidden = parse_list(key, value)?,
            "embed_dim" => hp.embed_dim = parse(key, value)?,
            "activation" => hp.activation = parse_activation(key, value)?,
            "reduction" => hp.reduction = parse(key, value)?,
            "variant" => hp.variant = parse(key, value)?,
            "kmeans_max_iters" => hp.kmeans.max_iters = parse(key, value)?,
            "kmeans_tol" => hp.kmeans.tol = parse(key, value)?,
            "kmeans_restarts" => hp.kmeans.restarts = parse(key, value)?,
            "eval_every" => hp.eval_every = parse(key, value)?,
            "classes" => sy.num_classes = parse(key, value)?,
            "per_class" => sy.samples_per_class = parse(key, value)?,
            "input_dim" => sy.input_dim = parse(key, value)?,
            "separation" => sy.prototype_separation = parse(key, value)?,
            "rotation" => sy.rotation_strength = parse(key, value)?,
            "bias_scale" => sy.bias_scale = parse(key, value)?,
            "noise" => sy.noise_sigma = parse(key, value)?,
            "data_seed" => sy.seed = parse(key, value)?,
            "split" => self.split_ratio = parse(key, value)?,
            "format" => self.format = parse_format(key, value)?,
            "out" => self.out = PathBuf::from(value.trim()),
            "data" => self.data = path(),
            "train_a" => self.train_a = path(),
            "train_b" => self.train_b = path(),
            "test_a" => self.test_a = path(),
            "test_b" => self.test_b = path(),
            "checkpoint" => self.checkpoint = path(),
            "query" => self.query = path(),
            "gallery" => self.gallery = path(),
            "top_k" => self.top_k = parse(key, value)?,
            "threads" => self.threads = Some(parse(key, value)?),
            "gradcheck_configs" => self.gradcheck_configs = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses config text: one `key = value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line: n + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Parse {
                path: source.to_string(),
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        self.synth.validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split {} must lie in (0, 1)", self.split_ratio)));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be ≥ 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be ≥ 1".into()));
        }
        if self.gradcheck_configs == 0 {
            return Err(Error::Config("gradcheck_configs must be ≥ 1".into()));
        }
        Ok(())
    }

    fn data_dir(&self) -> &Path {
        self.data.as_deref().unwrap_or(&self.out)
    }

    /// `[A_train, A_test, B_train, B_test]`, explicit paths taking precedence
    /// over the data directory.
    pub fn feature_paths(&self) -> [PathBuf; 4] {
        let explicit = [&self.train_a, &self.test_a, &self.train_b, &self.test_b];
        let dir = self.data_dir();
        std::array::from_fn(|i| explicit[i].clone().unwrap_or_else(|| dir.join(FEATURE_FILES[i])))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.bin"))
    }

    /// Resolved settings in the same format [`apply_text`](Self::apply_text)
    /// reads.
    pub fn to_text(&self) -> String {
        let hp = &self.hp;
        let sy = &self.synth;
        let hidden = if hp.hidden.is_empty() {
            "none".to_string()
        } else {
            hp.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("momentum", hp.momentum.to_string());
        kv("batch_size", hp.batch_size.to_string());
        kv("lambda", hp.lambda.to_string());
        kv("epochs", hp.epochs.to_string());
        kv("tau", hp.tau.to_string());
        kv("lr", hp.lr.to_string());
        kv("n_k", hp.base_k.to_string());
        kv("runs", hp.runs.to_string());
        kv("seed", hp.seed.to_string());
        kv("hidden", hidden);
        kv("embed_dim", hp.embed_dim.to_string());
        kv("activation", activation_name(hp.activation).into());
        kv("reduction", hp.reduction.to_string());
        kv("variant", hp.variant.to_string());
        kv("kmeans_max_iters", hp.kmeans.max_iters.to_string());
        kv("kmeans_tol", hp.kmeans.tol.to_string());
        kv("kmeans_restarts", hp.kmeans.restarts.to_string());
        kv("eval_every", hp.eval_every.to_string());
        kv("classes", sy.num_classes.to_string());
        kv("per_class", sy.samples_per_class.to_string());
        kv("input_dim", sy.input_dim.to_string());
        kv("separation", sy.prototype_separation.to_string());
        kv("rotation", sy.rotation_strength.to_string());
        kv("bias_scale", sy.bias_scale.to_string());
        kv("noise", sy.noise_sigma.to_string());
        kv("data_seed", sy.seed.to_string());
        kv("split", self.split_ratio.to_string());
        kv(
            "format",
            match self.format {
                FileFormat::Text => "text".into(),
                FileFormat::Binary => "binary".into(),
            },
        );
        kv("top_k", self.top_k.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{CrossReduction, LossVariant};

    #[test]
    fn defaults_follow_published_hyperparameters() {
        let c = ExperimentConfig::default();
        assert_eq!(c.hp.momentum, 0.95);
        assert_eq!(c.hp.batch_size, 16);
        assert_eq!(c.hp.lambda, 0.01);
        assert_eq!(c.hp.epochs, 20);
        assert_eq!(c.hp.tau, 0.01);
        assert_eq!(c.hp.lr, 0.003);
        assert_eq!(c.hp.runs, 4);
        assert_eq!(c.split_ratio, 0.8);
        assert_eq!(c.top_k, 10);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# comment\nlambda = 0.5\nhidden = 16,8  # two layers\nvariant = iss\nreduction=sum\nactivation = identity\n", "t").unwrap();
        assert_eq!(c.hp.lambda, 0.5);
        assert_eq!(c.hp.hidden, vec![16, 8]);
        assert_eq!(c.hp.variant, LossVariant::IssOnly);
        assert_eq!(c.hp.reduction, CrossReduction::Sum);
        assert_eq!(c.hp.activation, Activation::Identity);
        let mut back = ExperimentConfig::default();
        back.apply_text(&c.to_text(), "t").unwrap();
        assert_eq!(back.hp, c.hp);
        assert_eq!(back.synth, c.synth);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let mut c = ExperimentConfig::default();
        match c.apply_text("lr = 0.1\n\nbogus = 3\n", "cfg.txt") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(c.apply_text("lr 0.1", "cfg").is_err());
        assert!(c.set("epochs", "-1").is_err());
    }

    #[test]
    fn validation_catches_ranges() {
        for (k, v) in [("momentum", "1.5"), ("tau", "0"), ("split", "1"), ("top_k", "0"), ("threads", "0"), ("epochs", "0")] {
            let mut c = ExperimentConfig::default();
            c.set(k, v).unwrap();
            assert!(c.validate().unwrap_err().is_validation(), "{k}");
        }
    }

    #[test]
    fn feature_paths_resolve() {
        let mut c = ExperimentConfig::default();
        c.set("out", "run").unwrap();
        assert_eq!(c.feature_paths()[0], PathBuf::from("run/A_train.feat"));
        c.set("data", "d").unwrap();
        c.set("test_b", "x.feat").unwrap();
        let p = c.feature_paths();
        assert_eq!(p[1], PathBuf::from("d/A_test.feat"));
        assert_eq!(p[3], PathBuf::from("x.feat"));
        assert_eq!(c.checkpoint_path(), PathBuf::from("run/checkpoint.bin"));
    }
}
