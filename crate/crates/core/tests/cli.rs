use std::fs;
use std::path::Path;

use coda::checkpoint;
use coda::dataset::load_feature_file;
use coda::retrieval::{encode_dataset, RetrievalIndex};

const TINY: &str = "--classes 4 --per_class 10 --input_dim 8 --hidden 16 --embed_dim 8 --n_k 2 --runs 2 --batch_size 8 --epochs 2 --lr 0.05";

fn run(cmd: &str, extra: &str, dir: &Path) -> (i32, String, String) {
    let mut args: Vec<String> = vec![cmd.to_string()];
    args.extend(extra.split_whitespace().map(String::from));
    args.extend(["--out".to_string(), dir.display().to_string()]);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = coda::cli::run(&args, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn synth_and_train(dir: &Path, extra: &str) {
    assert_eq!(run("synth", TINY, dir).0, 0);
    let (code, _, err) = run("train", &format!("{TINY} --threads 1 {extra}"), dir);
    assert_eq!(code, 0, "{err}");
}

#[test]
fn synth_writes_four_reloadable_files_with_expected_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, _) = run("synth", TINY, dir.path());
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 4);
    let counts: Vec<usize> = coda::config::FEATURE_FILES
        .iter()
        .map(|f| load_feature_file(dir.path().join(f)).unwrap().len())
        .collect();
    // 4 classes × 10 samples, 80/20 per class
    assert_eq!(counts, vec![32, 8, 32, 8]);
}

#[test]
fn synth_is_bitwise_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        assert_eq!(run("synth", &format!("{TINY} --seed 3 --format binary"), d).0, 0);
    }
    for f in coda::config::FEATURE_FILES {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn train_smoke_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run("synth", TINY, dir.path()).0, 0);
    let start = std::time::Instant::now();
    let (code, out, _) = run("train", &format!("{TINY} --epochs 1"), dir.path());
    assert_eq!(code, 0);
    assert!(start.elapsed().as_secs() < 10);
    assert!(out.contains("best") && out.contains("last"));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.starts_with("1,")).count(), 2);
    assert!(dir.path().join("checkpoint.bin").exists());
    assert!(dir.path().join("batches.csv").exists());
}

#[test]
fn zero_lambda_logs_zero_cross_contribution() {
    let dir = tempfile::tempdir().unwrap();
    synth_and_train(dir.path(), "--lambda 0");
    let batches = fs::read_to_string(dir.path().join("batches.csv")).unwrap();
    for line in batches.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[4], 0.0, "{line}");
        assert_eq!(cols[5], cols[2]);
    }
}

#[test]
fn training_is_bitwise_deterministic_single_threaded() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth_and_train(a.path(), "--seed 5");
    synth_and_train(b.path(), "--seed 5");
    for f in ["checkpoint.bin", "metrics.csv", "batches.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_reproduces_final_logged_map() {
    let dir = tempfile::tempdir().unwrap();
    synth_and_train(dir.path(), "");
    let (code, _, _) = run("eval", TINY, dir.path());
    assert_eq!(code, 0);
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let eval = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    let rows: Vec<&str> = eval.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        let logged = metrics.lines().find(|l| l.starts_with(&format!("last,{},", cols[0]))).unwrap();
        assert_eq!(logged.rsplit(',').next().unwrap(), cols[1]);
    }
}

#[test]
fn untrained_encoder_is_perfect_on_gapless_noiseless_data() {
    let dir = tempfile::tempdir().unwrap();
    let gapless = format!("{TINY} --rotation 0 --bias_scale 0 --noise 0 --runs 1");
    assert_eq!(run("synth", &gapless, dir.path()).0, 0);
    assert_eq!(run("train", &format!("{gapless} --lr 0 --epochs 1"), dir.path()).0, 0);
    assert_eq!(run("eval", &gapless, dir.path()).0, 0);
    let eval = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    for row in eval.lines().skip(1) {
        let map: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((map - 1.0).abs() <= 1e-9, "{row}");
    }
}

#[test]
fn retrieve_ranks_match_index_and_find_self_first() {
    let dir = tempfile::tempdir().unwrap();
    synth_and_train(dir.path(), "");
    let gallery = dir.path().join("B_test.feat");
    let extra = format!("{TINY} --query {} --gallery {} --top_k 50", gallery.display(), gallery.display());
    let (code, _, err) = run("retrieve", &extra, dir.path());
    assert_eq!(code, 0);
    assert!(err.contains("clamping"));

    let csv = fs::read_to_string(dir.path().join("retrieval.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let g = load_feature_file(&gallery).unwrap();
    assert_eq!(rows.len(), g.len() * g.len());
    for r in rows.iter().filter(|r| r[1] == "1") {
        assert_eq!(r[0], r[2], "query should retrieve itself first");
    }

    let state = checkpoint::load(dir.path().join("checkpoint.bin")).unwrap();
    let index = RetrievalIndex::encode(&g, &state.encoder).unwrap();
    let (features, ids, _) = encode_dataset(&g, &state.encoder).unwrap();
    let ranked = index.rank(features.row(0)).unwrap();
    let from_csv: Vec<u64> = rows.iter().filter(|r| r[0] == ids[0].to_string()).map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(from_csv, ranked.iter().map(|(id, _)| *id).collect::<Vec<_>>());
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, _) = run("gradcheck", "", dir.path());
    assert_eq!(code, 0);
    for name in ["encoder", "iss", "cca", "joint"] {
        assert!(out.lines().any(|l| l.starts_with(name) && l.ends_with("PASS")), "{out}");
    }
}

#[test]
fn validation_failures_touch_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    for (cmd, extra) in [("synth", "--rotation 2"), ("train", "--momentum 3"), ("synth", "--nonsense 1"), ("eval", "--top_k 0")] {
        let (code, _, err) = run(cmd, extra, &out);
        assert_eq!(code, 1, "{cmd} {extra}: {err}");
        assert!(!out.exists());
    }
}

#[test]
fn dimension_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    synth_and_train(dir.path(), "");
    let other = dir.path().join("other");
    assert_eq!(run("synth", "--classes 2 --per_class 5 --input_dim 5", &other).0, 0);
    let (code, _, err) = run("eval", &format!("--data {}", other.display()), dir.path());
    assert_eq!(code, 1);
    assert!(err.contains("dimension"), "{err}");
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "# tiny\nclasses = 3\nper_class = 5\ninput_dim = 4\n").unwrap();
    let (code, _, _) = run("synth", &format!("--config {} --per_class 10", cfg.display()), dir.path());
    assert_eq!(code, 0);
    assert_eq!(load_feature_file(dir.path().join("A_train.feat")).unwrap().len(), 24);
}
