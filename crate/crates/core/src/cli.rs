//! Command-line front end: `synth`, `train`, `eval`, `retrieve` and
//! `gradcheck`. Exit status is 0 on success, 1 for invalid configuration or
//! input, 2 for failures while running.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::{generate_synthetic, load_feature_file, split_train_test, write_feature_file, Domain, DomainDataset};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::io::write_atomic;
use crate::retrieval::{evaluate_cross_domain, reports_to_csv, reports_to_table, RetrievalIndex};
use crate::trainer::{batch_log_csv, train_with, DIRECTIONS};

pub const USAGE: &str = "\
usage: coda <command> [--config PATH] [--seed N] [--threads N] [--out DIR] [--KEY VALUE ...]

commands:
  synth      generate the synthetic two-domain dataset and write train/test feature files
  train      train on feature files; writes checkpoint.bin, metrics.csv, batches.csv
  eval       evaluate a checkpoint on the test files in both retrieval directions
  retrieve   rank a gallery file for every query in a query file (top_k per query)
  gradcheck  compare analytic gradients with finite differences

Any config key can be given as --KEY VALUE or --KEY=VALUE; see README for keys.
On `synth`, --seed sets the dataset seed; elsewhere it sets the training seed.
";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Eval,
    Retrieve,
    Gradcheck,
}

impl std::str::FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(Command::Synth),
            "train" => Ok(Command::Train),
            "eval" => Ok(Command::Eval),
            "retrieve" => Ok(Command::Retrieve),
            "gradcheck" => Ok(Command::Gradcheck),
            _ => Err(Error::Config(format!("unknown command {s:?}"))),
        }
    }
}

/// Splits `--key value` / `--key=value` pairs. `--config` is returned
/// separately so the file can be applied before the overrides.
fn parse_flags(args: &[String]) -> Result<(Option<PathBuf>, Vec<(String, String)>)> {
    let mut config = None;
    let mut overrides = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg.strip_prefix("--").ok_or_else(|| Error::Config(format!("unexpected argument {arg:?}")))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            overrides.push((key.replace('-', "_"), value));
        }
    }
    Ok((config, overrides))
}

pub fn build_config(command: Command, args: &[String]) -> Result<ExperimentConfig> {
    let (file, overrides) = parse_flags(args)?;
    let mut cfg = match file {
        Some(p) => ExperimentConfig::load(&p)?,
        None => ExperimentConfig::default(),
    };
    for (k, v) in &overrides {
        let key = if command == Command::Synth && k == "seed" { "data_seed" } else { k.as_str() };
        cfg.set(key, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Entry point shared by the binary and the tests.
pub fn run(args: &[String], stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> i32 {
    let Some(first) = args.first() else {
        let _ = write!(stderr, "{USAGE}");
        return 1;
    };
    if first == "--help" || first == "-h" || first == "help" {
        let _ = write!(stdout, "{USAGE}");
        return 0;
    }
    let result = first.parse::<Command>().and_then(|cmd| {
        let cfg = build_config(cmd, &args[1..])?;
        with_threads(cfg.threads, || dispatch(cmd, &cfg, stdout, stderr))?
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn dispatch(cmd: Command, cfg: &ExperimentConfig, stdout: &mut (dyn Write + Send), stderr: &mut (dyn Write + Send)) -> Result<i32> {
    let text = match cmd {
        Command::Synth => cmd_synth(cfg)?,
        Command::Train => cmd_train(cfg, stdout)?,
        Command::Eval => cmd_eval(cfg)?,
        Command::Retrieve => cmd_retrieve(cfg, stderr)?,
        Command::Gradcheck => {
            let (text, passed) = cmd_gradcheck(cfg)?;
            let _ = write!(stdout, "{text}");
            return Ok(if passed { 0 } else { 2 });
        }
    };
    let _ = write!(stdout, "{text}");
    Ok(0)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn load_domain(path: &Path, domain: Domain) -> Result<DomainDataset> {
    let ds = load_feature_file(path)?;
    if ds.domain() != domain {
        return Err(Error::invalid(format!("{}: expected domain {domain}, found {}", path.display(), ds.domain())));
    }
    Ok(ds)
}

/// Writes `[A_train, A_test, B_train, B_test]` and returns a summary.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<String> {
    let (a, b) = generate_synthetic(&cfg.synth)?;
    let (tra, tea) = split_train_test(&a, cfg.split_ratio, cfg.synth.seed)?;
    let (trb, teb) = split_train_test(&b, cfg.split_ratio, cfg.synth.seed)?;
    let sets = [&tra, &tea, &trb, &teb];
    let paths = cfg.feature_paths();
    let mut out = String::new();
    for (ds, path) in sets.iter().zip(&paths) {
        write_feature_file(path, ds, cfg.format)?;
        writeln!(out, "wrote {} ({} samples, dim {})", path.display(), ds.len(), ds.dim()).unwrap();
    }
    Ok(out)
}

pub fn cmd_train(cfg: &ExperimentConfig, stdout: &mut (dyn Write + Send)) -> Result<String> {
    let [pa, pta, pb, ptb] = cfg.feature_paths();
    let train_a = load_domain(&pa, Domain::A)?;
    let test_a = load_domain(&pta, Domain::A)?;
    let train_b = load_domain(&pb, Domain::B)?;
    let test_b = load_domain(&ptb, Domain::B)?;
    for t in [&test_a, &test_b] {
        if t.labels().is_none() {
            return Err(Error::invalid("test files must be fully labelled"));
        }
    }
    let outcome = train_with(&train_a.unlabeled(), &train_b.unlabeled(), &test_a, &test_b, &cfg.hp, |epoch, rows| {
        let maps: Vec<String> = rows.iter().map(|r| format!("{}->{} {:.4}", r.direction.0, r.direction.1, r.map)).collect();
        let _ = writeln!(stdout, "epoch {epoch:>3}  {}", maps.join("  "));
    })?;

    checkpoint::save(cfg.checkpoint_path(), &outcome.state)?;
    write_text(&cfg.out.join("metrics.csv"), &outcome.metrics.to_csv())?;
    write_text(&cfg.out.join("batches.csv"), &batch_log_csv(&outcome.batches))?;
    write_text(&cfg.out.join("config.txt"), &cfg.to_text())?;

    let mut out = String::new();
    writeln!(out, "untrained  A->B {:.4}  B->A {:.4}", outcome.baseline[0], outcome.baseline[1]).unwrap();
    for d in DIRECTIONS {
        let m = &outcome.metrics;
        writeln!(out, "{}->{}  best {:.4}  last {:.4}", d.0, d.1, m.best(d).unwrap_or(f64::NAN), m.last(d).unwrap_or(f64::NAN)).unwrap();
    }
    writeln!(out, "wrote {}", cfg.checkpoint_path().display()).unwrap();
    Ok(out)
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<String> {
    let state = checkpoint::load(cfg.checkpoint_path())?;
    let [_, pta, _, ptb] = cfg.feature_paths();
    let test_a = load_domain(&pta, Domain::A)?;
    let test_b = load_domain(&ptb, Domain::B)?;
    for t in [&test_a, &test_b] {
        if t.dim() != state.encoder.input_dim() {
            return Err(Error::invalid(format!(
                "test features have dimension {} but the checkpoint encoder expects {}",
                t.dim(),
                state.encoder.input_dim()
            )));
        }
    }
    let reports = evaluate_cross_domain(&state.encoder, &test_a, &test_b)?;
    let table = reports_to_table(&reports);
    write_text(&cfg.out.join("eval.csv"), &reports_to_csv(&reports))?;
    write_text(&cfg.out.join("eval.txt"), &table)?;
    Ok(table)
}

pub fn cmd_retrieve(cfg: &ExperimentConfig, stderr: &mut (dyn Write + Send)) -> Result<String> {
    let state = checkpoint::load(cfg.checkpoint_path())?;
    let [_, pta, _, ptb] = cfg.feature_paths();
    let query = load_feature_file(cfg.query.clone().unwrap_or(pta))?;
    let gallery = load_feature_file(cfg.gallery.clone().unwrap_or(ptb))?;
    for (name, ds) in [("query", &query), ("gallery", &gallery)] {
        if ds.dim() != state.encoder.input_dim() {
            return Err(Error::invalid(format!(
                "{name} features have dimension {} but the checkpoint encoder expects {}",
                ds.dim(),
                state.encoder.input_dim()
            )));
        }
    }
    let mut top_k = cfg.top_k;
    if top_k > gallery.len() {
        let _ = writeln!(stderr, "warning: top_k {top_k} exceeds gallery size {}; clamping", gallery.len());
        top_k = gallery.len();
    }
    let index = RetrievalIndex::encode(&gallery, &state.encoder)?;
    let mut csv = String::from("query_id,rank,gallery_id,score\n");
    for r in query.records() {
        let v = state.encoder.encode(&r.x)?;
        for (rank, (gid, score)) in index.rank(&v)?.into_iter().take(top_k).enumerate() {
            writeln!(csv, "{},{},{gid},{score}", r.id, rank + 1).unwrap();
        }
    }
    let path = cfg.out.join("retrieval.csv");
    write_text(&path, &csv)?;
    Ok(format!("wrote {} ({} queries, top {top_k})\n", path.display(), query.len()))
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<(String, bool)> {
    let report = run_gradcheck(&GradcheckOptions {
        seed: cfg.hp.seed,
        configs: cfg.gradcheck_configs,
        ..GradcheckOptions::default()
    })?;
    Ok((report.to_table(), report.passed()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn flags_and_overrides() {
        let cfg = build_config(Command::Train, &args("--lr 0.1 --epochs=3 --batch-size 4 --threads 1")).unwrap();
        assert_eq!(cfg.hp.lr, 0.1);
        assert_eq!(cfg.hp.epochs, 3);
        assert_eq!(cfg.hp.batch_size, 4);
        assert_eq!(cfg.threads, Some(1));
        let synth = build_config(Command::Synth, &args("--seed 11")).unwrap();
        assert_eq!(synth.synth.seed, 11);
        assert_eq!(synth.hp.seed, 0);
    }

    #[test]
    fn bad_invocations_exit_with_validation_status() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(&args("frobnicate"), &mut o, &mut e), 1);
        assert_eq!(run(&args("train --lr"), &mut o, &mut e), 1);
        assert_eq!(run(&args("train --nope 3"), &mut o, &mut e), 1);
        assert_eq!(run(&args("train positional"), &mut o, &mut e), 1);
        assert_eq!(run(&[], &mut o, &mut e), 1);
        assert_eq!(run(&args("--help"), &mut o, &mut e), 0);
    }
}
