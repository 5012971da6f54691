//! End-to-end runs of the `ncadapt` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ncadapt::config::{DataConfig, RunConfig};
use ncadapt::data::DomainSpec;
use ncadapt::metrics::{read_report, CSV_FILE, JSON_FILE};
use ncadapt::nca::ArchConfig;
use ncadapt::persist::MANIFEST_FILE;
use ncadapt::train::TrainConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ncadapt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let domains: Vec<DomainSpec> = DomainSpec::benchmark(6, 42)
        .into_iter()
        .map(|mut d| {
            d.resolution = vec![16, 16];
            d
        })
        .collect();
    let cfg = RunConfig {
        arch: ArchConfig {
            hidden: 8,
            steps: vec![2, 2],
            ..ArchConfig::default_2d()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 42,
            ..TrainConfig::default()
        },
        n_samples: 2,
        data: DataConfig {
            n_cases: 6,
            domains,
            ..DataConfig::default()
        },
        data_dir: dir.join("data"),
        runs_dir: dir.join("runs"),
        ..RunConfig::default()
    };
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

const DOMAINS: [&str; 3] = ["clean", "noisy", "inverted"];

/// gen-data → train → adapt ×2 → baseline ×3 → eval → report, under `dir`.
fn pipeline(dir: &Path) -> PathBuf {
    let cfg = tiny_config(dir);
    let cfg = cfg.to_str().unwrap();
    let p = |s: &str| dir.join(s).to_str().unwrap().to_string();
    ok(&["gen-data", "--config", cfg]);
    ok(&["train", "--config", cfg, "--domain", DOMAINS[0], "--out", &p("s1")]);
    let audit = ok(&["adapt", "--config", cfg, "--from", &p("s1"), "--domain", DOMAINS[1], "--out", &p("s2")]);
    assert!(audit.contains("hash audit:"), "{audit}");
    ok(&["adapt", "--config", cfg, "--from", &p("s2"), "--domain", DOMAINS[2], "--out", &p("s3")]);
    for (i, d) in DOMAINS.iter().enumerate() {
        ok(&["baseline", "--config", cfg, "--domain", d, "--out", &p(&format!("b{}", i + 1))]);
    }
    let stages = [p("s1"), p("s2"), p("s3")].join(",");
    let bases = [p("b1"), p("b2"), p("b3")].join(",");
    ok(&[
        "eval",
        "--config",
        cfg,
        "--stages",
        &stages,
        "--baselines",
        &bases,
        "--domains",
        &DOMAINS.join(","),
        "--out",
        &p("eval.json"),
    ]);
    ok(&["report", "--config", cfg, "--eval", &p("eval.json"), "--out", &p("report")]);
    dir.join("report")
}

#[test]
fn full_pipeline_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (pipeline(a.path()), pipeline(b.path()));
    for f in [CSV_FILE, JSON_FILE] {
        let (x, y) = (fs::read(ra.join(f)).unwrap(), fs::read(rb.join(f)).unwrap());
        assert!(x == y, "{f} differs between identical runs");
    }
    for stage in ["s1", "s2", "s3"] {
        let m = |d: &Path| fs::read(d.join(stage).join(MANIFEST_FILE)).unwrap();
        assert_eq!(m(a.path()), m(b.path()), "{stage} manifest");
    }

    let report = read_report(&ra.join(JSON_FILE)).unwrap();
    assert_eq!(report.tasks, DOMAINS);
    assert_eq!(report.dice.len(), 3);
    assert_eq!(report.bwt.len(), 2);
    assert_eq!(report.fwt.len(), 2);
    let arch = ArchConfig {
        hidden: 8,
        steps: vec![2, 2],
        ..ArchConfig::default_2d()
    };
    let adapter = arch.adapter_params();
    assert_eq!(
        report.stored_params,
        (1..=3).map(|k| arch.backbone_params() + k * adapter).collect::<Vec<_>>()
    );
    let csv = fs::read_to_string(ra.join(CSV_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("model,clean,noisy,inverted\nstage1,"));
    assert!(ra.join("timings.json").is_file());
}

#[test]
fn infer_picks_the_only_head() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    ok(&["gen-data", "--config", cfg]);
    let ckpt = dir.path().join("s1");
    ok(&["train", "--config", cfg, "--domain", "clean", "--out", ckpt.to_str().unwrap()]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("data/clean/manifest.json")).unwrap()).unwrap();
    let image = dir.path().join(format!("data/clean/{}_img.rti", manifest["cases"][0].as_str().unwrap()));
    let mask = dir.path().join("mask.rti");
    let out = ok(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--domain",
        "auto",
        "--samples",
        "2",
        "--out",
        mask.to_str().unwrap(),
    ]);
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["domain"], 1);
    assert_eq!(v["label"], "clean");
    let m = ncadapt::data::read_label(&mask).unwrap();
    assert_eq!(m.shape(), &[16, 16]);
}

#[test]
fn param_audit_matches_reference_counts() {
    let out = ok(&["param-audit", "--arch", "default3d"]);
    assert!(!out.contains("MISMATCH"), "{out}");
    for needle in ["=12480\t", "=6336\t", "=384\t"] {
        assert!(out.contains(needle), "missing {needle} in\n{out}");
    }
    let out2d = ok(&["param-audit", "--arch", "default2d"]);
    assert!(out2d.contains("7488"), "{out2d}");
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let usage = run(&["train", "--bogus"]);
    assert_eq!(usage.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&usage.stderr).starts_with("error[usage]"));

    let dir = tempfile::tempdir().unwrap();
    let missing = run(&[
        "train",
        "--data",
        dir.path().join("nowhere").to_str().unwrap(),
        "--domain",
        "clean",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(2), "{}", String::from_utf8_lossy(&missing.stderr));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error[data]"));

    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, "{\"schema_version\": 1}").unwrap();
    assert_eq!(run(&["gen-data", "--config", bad_cfg.to_str().unwrap()]).status.code(), Some(1));

    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn adapt_refuses_a_checkpoint_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    ok(&["gen-data", "--config", cfg]);
    let s1 = dir.path().join("s1");
    ok(&["train", "--config", cfg, "--domain", "clean", "--out", s1.to_str().unwrap()]);
    let out = run(&[
        "adapt",
        "--config",
        cfg,
        "--seed",
        "7",
        "--from",
        s1.to_str().unwrap(),
        "--domain",
        "noisy",
        "--out",
        dir.path().join("s2").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    // An existing checkpoint is never overwritten.
    let again = run(&["train", "--config", cfg, "--domain", "clean", "--out", s1.to_str().unwrap()]);
    assert!(!again.status.success());
}
