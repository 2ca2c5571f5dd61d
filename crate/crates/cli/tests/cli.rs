use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use nmsparse::mask::{decode_masks, MaskCandidateSet};
use nmsparse_cli::{run, CliError};

const CORPUS: &str = "synthetic:a:6000";

fn run_ok(args: &[&str]) {
    let mut full = vec!["nmsparse"];
    full.extend_from_slice(args);
    if let Err(e) = run(full) {
        panic!("{args:?} failed: {e}");
    }
}

fn run_err(args: &[&str]) -> CliError {
    let mut full = vec!["nmsparse"];
    full.extend_from_slice(args);
    run(full).expect_err("command should fail")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny pretrained model shared by the tests of one process.
fn model(dir: &Path) -> PathBuf {
    let out = dir.join("pre");
    run_ok(&[
        "pretrain", "--out", s(&out), "--corpus", CORPUS, "--steps", "15", "--embed-dim", "16", "--layers", "2",
        "--heads", "2", "--context", "16", "--seed", "3",
    ]);
    out.join("model.nmd")
}

#[test]
fn pipeline_artifacts_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let model = model(tmp.path());
    let m = s(&model);
    let pre_manifest = fs::read_to_string(model.with_file_name("manifest.txt")).unwrap();
    assert!(pre_manifest.contains("command=pretrain") && pre_manifest.contains("seed=3"));
    assert!(pre_manifest.contains(&format!("version={}", nmsparse_cli::VERSION)));

    let prune = tmp.path().join("prune");
    run_ok(&["prune", "--out", s(&prune), "--model", m, "--corpus", CORPUS, "--method", "magnitude"]);
    let pruned = decode_masks(&fs::read(prune.join("masks.nmmk")).unwrap()).unwrap();
    assert_eq!(pruned.masks.len(), 12);
    let report = fs::read_to_string(prune.join("report.txt")).unwrap();
    assert!(report.contains("masked_ppl=") && report.contains("bits_per_param="));

    let wanda = tmp.path().join("wanda");
    run_ok(&[
        "prune", "--out", s(&wanda), "--model", m, "--corpus", CORPUS, "--method", "wanda", "--skip-layers", "layer0",
    ]);
    let w = decode_masks(&fs::read(wanda.join("masks.nmmk")).unwrap()).unwrap();
    assert_eq!(w.masks.len(), 6);

    // Zero steps with a magnitude prior keeps almost every block.
    let learn = tmp.path().join("learn");
    run_ok(&[
        "learn", "--out", s(&learn), "--model", m, "--corpus", CORPUS, "--steps", "0", "--prior", "magnitude",
    ]);
    let learned = decode_masks(&fs::read(learn.join("masks.nmmk")).unwrap()).unwrap();
    let (mut same, mut total) = (0usize, 0usize);
    for (a, b) in learned.masks.iter().zip(&pruned.masks) {
        assert_eq!(a.tensor_name, b.tensor_name);
        same += a.block_indices.iter().zip(&b.block_indices).filter(|(x, y)| x == y).count();
        total += a.block_indices.len();
    }
    assert!(same as f64 >= 0.99 * total as f64, "{same}/{total}");
    for f in ["metrics.txt", "checkpoint.nmck", "config.txt", "report.txt", "manifest.txt"] {
        assert!(learn.join(f).exists(), "{f}");
    }

    // A short run from the archive prior, then transfer from its checkpoint.
    let learn2 = tmp.path().join("learn2");
    let prior = prune.join("masks.nmmk");
    run_ok(&[
        "learn", "--out", s(&learn2), "--model", m, "--corpus", CORPUS, "--steps", "3", "--prior", s(&prior),
        "--skip-layers", "layer1", "--lambda", "0", "--alpha", "2",
    ]);
    let metrics = fs::read_to_string(learn2.join("metrics.txt")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let manifest = fs::read_to_string(learn2.join("manifest.txt")).unwrap();
    assert!(manifest.contains("config.prior_strength=2.0"));
    assert!(manifest.contains("config.layers_to_skip=layer1"));
    let transfer = tmp.path().join("transfer");
    run_ok(&[
        "transfer", "--out", s(&transfer), "--model", m, "--corpus", "synthetic:b:6000", "--base",
        s(&learn2.join("checkpoint.nmck")), "--config", s(&learn2.join("config.txt")), "--steps", "2",
    ]);
    let t = decode_masks(&fs::read(transfer.join("masks.nmmk")).unwrap()).unwrap();
    assert_eq!(t.masks.len(), 6);
    let transfer2 = tmp.path().join("transfer2");
    run_ok(&[
        "transfer", "--out", s(&transfer2), "--model", m, "--corpus", "synthetic:b:6000", "--base", s(&prior),
        "--steps", "0",
    ]);
    assert_eq!(fs::read(transfer2.join("masks.nmmk")).unwrap(), fs::read(&prior).unwrap());

    // Keeping every layer dense gives the dense perplexity.
    let ev = tmp.path().join("eval");
    run_ok(&[
        "eval", "--out", s(&ev), "--model", m, "--corpus", CORPUS, "--masks", s(&prior), "--skip-layers", "all",
    ]);
    let report = fs::read_to_string(ev.join("report.txt")).unwrap();
    let ppl = |label: &str| -> f64 {
        let line = report.lines().find(|l| l.starts_with(&format!("label={label} "))).unwrap();
        line.rsplit("ppl=").next().unwrap().parse().unwrap()
    };
    assert_eq!(ppl("dense"), ppl("explicit"));
    let ev2 = tmp.path().join("eval2");
    run_ok(&["eval", "--out", s(&ev2), "--model", m, "--corpus", CORPUS, "--masks", s(&prior), "--skip-layers", "each"]);
    assert_eq!(fs::read_to_string(ev2.join("report.txt")).unwrap().lines().count(), 4);
}

#[test]
fn pack_unpack_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let model = model(tmp.path());
    let prune = tmp.path().join("prune");
    run_ok(&["prune", "--out", s(&prune), "--model", s(&model), "--corpus", CORPUS]);
    let coded = prune.join("masks.nmmk");
    let un = tmp.path().join("un");
    run_ok(&["unpack", "--out", s(&un), "--input", s(&coded)]);
    let dense = un.join("masks.dense");
    let pk = tmp.path().join("pk");
    run_ok(&["pack", "--out", s(&pk), "--input", s(&dense)]);
    assert_eq!(fs::read(pk.join("masks.nmmk")).unwrap(), fs::read(&coded).unwrap());
    let a = decode_masks(&fs::read(&dense).unwrap()).unwrap();
    let b = decode_masks(&fs::read(&coded).unwrap()).unwrap();
    assert_eq!(a.masks, b.masks);
    let set = MaskCandidateSet::for_pattern(b.pattern);
    assert!(b.masks.iter().all(|m| m.bits(&set).len() == m.num_params()));
    let report = fs::read_to_string(pk.join("report.txt")).unwrap();
    let bpp: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("bits_per_param="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(bpp > 0.6462 && bpp < 1.0, "{bpp}");
}

#[test]
fn validation_errors_name_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.txt");
    fs::write(&cfg, "steps=3\nlearning_rat=0.1\n").unwrap();
    let out = tmp.path().join("o");
    let e = run_err(&[
        "learn", "--out", s(&out), "--model", "missing.nmd", "--corpus", CORPUS, "--config", s(&cfg),
    ]);
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().contains("learning_rat"), "{e}");
    assert_eq!(run_err(&["learn", "--bogus"]).exit_code(), 1);
    assert_eq!(run_err(&["bench", "--out", s(&out), "--sizes", "6"]).exit_code(), 1);
    assert_eq!(run_err(&["bench", "--out", s(&out), "--dtype", "f16"]).exit_code(), 1);
    let e = run_err(&["pack", "--out", s(&out), "--input", s(&tmp.path().join("nope"))]);
    assert_eq!(e.exit_code(), 2);
    let model = model(tmp.path());
    let e = run_err(&[
        "learn", "--out", s(&out), "--model", s(&model), "--corpus", CORPUS, "--skip-layers", "layer9",
    ]);
    assert_eq!(e.exit_code(), 1);
    assert!(e.to_string().contains("layer9"));
    let e = run_err(&["learn", "--out", s(&out), "--model", s(&model), "--corpus", CORPUS, "--pattern", "2:3"]);
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn bench_report_and_binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("b");
    run_ok(&["bench", "--out", s(&out), "--sizes", "16,32", "--rhs-cols", "4", "--repeats", "1"]);
    let reports = nmsparse::sparse::parse_reports(&fs::read_to_string(out.join("bench.txt")).unwrap()).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.footprint_ratio() == 0.53125));

    let bin = env!("CARGO_BIN_EXE_nmsparse");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(status(&["--help"]), Some(0));
    assert_eq!(status(&["bench", "--out", s(&out), "--sizes", "8", "--rhs-cols", "2", "--repeats", "1"]), Some(0));
    assert_eq!(status(&["frobnicate"]), Some(1));
    assert_eq!(status(&["unpack", "--out", s(&out), "--input", s(&out.join("bench.txt"))]), Some(1));
}
