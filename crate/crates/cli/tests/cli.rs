use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ckarank_core::cka::ActivationSet;
use ckarank_core::encoder::EncoderConfig;
use ckarank_core::experiments::suites::SplitSizes;
use ckarank_core::experiments::{PretrainConfig, TrainConfig};
use ckarank_core::io::{write_activations, write_json, RankPlanDoc, RunConfigDoc};
use ckarank_core::Matrix;
use tempfile::TempDir;

fn ckarank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckarank"))
        .args(args)
        .env_remove("CKARANK_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        layer_count: 3,
        d_model: 8,
        head_count: 2,
        patch_size: 4,
        image_size: 32,
        seed: 5,
    }
}

fn tiny_run_config() -> RunConfigDoc {
    RunConfigDoc {
        encoder: tiny_encoder(),
        train: TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 5e-3,
            seeds: vec![1, 2],
            ..TrainConfig::default()
        },
        sizes: SplitSizes {
            train: 8,
            test: 4,
            profile: 8,
        },
        ..RunConfigDoc::default()
    }
}

/// Activation dump with layer `l` drifting by `l` between the two domains.
fn write_dumps(dir: &Path, layers: usize) -> (PathBuf, PathBuf) {
    let n = 12;
    let base = |l: usize| Matrix::from_fn(n, 4, |i, j| ((i * 7 + j * 3 + l) % 11) as f64 + (i * j) as f64 * 0.1);
    let src = ActivationSet::new((0..layers).map(base).collect(), "source").unwrap();
    let tgt = ActivationSet::new(
        (0..layers)
            .map(|l| {
                let b = base(l);
                Matrix::from_fn(n, 4, |i, j| b.get(i, j) + (l as f64 + 1.0) * (((i * 5 + j) % 7) as f64))
            })
            .collect(),
        "target",
    )
    .unwrap();
    let (s, t) = (dir.join("src.actv"), dir.join("tgt.actv"));
    write_activations(&s, &src).unwrap();
    write_activations(&t, &tgt).unwrap();
    (s, t)
}

#[test]
fn analyze_and_allocate_toy_profile() {
    let dir = TempDir::new().unwrap();
    let (s, t) = write_dumps(dir.path(), 8);
    let prof = dir.path().join("profile.json");
    let o = ckarank(&["analyze", "--source", p(&s), "--target", p(&t), "--seeds", "4", "--out", p(&prof)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let plan = dir.path().join("plan.json");
    let o = ckarank(&[
        "allocate", "--profile", p(&prof), "--bands", "3,3,2", "--ranks", "8,4,2", "--dims", "32", "--out", p(&plan),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: RankPlanDoc = serde_json::from_str(&fs::read_to_string(&plan).unwrap()).unwrap();
    let plan = doc.to_plan().unwrap();
    assert_eq!(plan.total_trainable, 10_240);
    let mut ranks = plan.ranks();
    ranks.sort_unstable();
    assert_eq!(ranks, vec![2, 2, 4, 4, 4, 8, 8, 8]);
}

#[test]
fn allocate_argument_and_io_errors() {
    let dir = TempDir::new().unwrap();
    let (s, t) = write_dumps(dir.path(), 4);
    let prof = dir.path().join("profile.json");
    assert_eq!(code(&ckarank(&["analyze", "--source", p(&s), "--target", p(&t), "--seeds", "0", "--out", p(&prof)])), 0);
    let out = dir.path().join("plan.json");

    let o = ckarank(&["allocate", "--profile", p(&prof), "--thresholds", "0.7,0.5", "--out", p(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = ckarank(&["allocate", "--profile", p(&prof), "--ranks", "8,4", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--ranks"));
    let o = ckarank(&["allocate", "--profile", p(&dir.path().join("missing.json")), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());

    let o = ckarank(&["analyze", "--source", p(&s), "--target", p(&t), "--seeds", "1", "--out", p(&prof)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn truncated_dump_reports_offset() {
    let dir = TempDir::new().unwrap();
    let (s, t) = write_dumps(dir.path(), 2);
    let bytes = fs::read(&s).unwrap();
    fs::write(&s, &bytes[..bytes.len() - 5]).unwrap();
    let o = ckarank(&["analyze", "--source", p(&s), "--target", p(&t), "--out", p(&dir.path().join("x.json"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("offset"), "{}", stderr(&o));
}

#[test]
fn mismatched_dumps_are_rejected() {
    let dir = TempDir::new().unwrap();
    let (s, _) = write_dumps(dir.path(), 2);
    let other = TempDir::new().unwrap();
    let (_, t) = write_dumps(other.path(), 3);
    let o = ckarank(&["analyze", "--source", p(&s), "--target", p(&t), "--out", p(&dir.path().join("x.json"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn bad_seed_variable_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let (s, t) = write_dumps(dir.path(), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_ckarank"))
        .args(["analyze", "--source", p(&s), "--target", p(&t), "--out", p(&dir.path().join("x.json"))])
        .env("CKARANK_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("CKARANK_SEED"));
}

#[test]
fn init_config_writes_parseable_defaults() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run.json");
    assert_eq!(code(&ckarank(&["init-config", "--out", p(&run)])), 0);
    assert_eq!(RunConfigDoc::read(&run).unwrap(), RunConfigDoc::default());
    let pre = dir.path().join("pre.json");
    assert_eq!(code(&ckarank(&["init-config", "--kind", "pretrain", "--out", p(&pre)])), 0);
    let parsed: PretrainConfig = serde_json::from_str(&fs::read_to_string(&pre).unwrap()).unwrap();
    assert_eq!(parsed, PretrainConfig::default());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run.json");
    let mut v = serde_json::to_value(RunConfigDoc::default()).unwrap();
    v["train"]["epochz"] = 3.into();
    fs::write(&run, v.to_string()).unwrap();
    let (s, _) = write_dumps(dir.path(), 2);
    let o = ckarank(&[
        "train", "--config", p(&run), "--plan", p(&s), "--backbone", p(&s), "--out", p(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("epochz"));
}

#[test]
fn report_needs_artifacts() {
    let dir = TempDir::new().unwrap();
    let o = ckarank(&["report", "--in", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no run artifacts"));
}

/// Pretrain → dump → analyze → allocate → train → report on a tiny model.
#[test]
fn full_pipeline_on_a_tiny_model() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let pre_cfg = PretrainConfig {
        encoder: tiny_encoder(),
        train_size: 8,
        test_size: 4,
        max_epochs: 1,
        batch_size: 4,
        threshold: 0.0,
        ..PretrainConfig::default()
    };
    let pre = d.join("pre.json");
    write_json(&pre, &pre_cfg).unwrap();
    let bb = d.join("bb.rsam");
    let o = ckarank(&["pretrain", "--config", p(&pre), "--out", p(&bb)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let run = d.join("run.json");
    write_json(&run, &tiny_run_config()).unwrap();
    for domain in ["source", "target"] {
        let out = d.join(format!("{domain}.actv"));
        let o = ckarank(&[
            "dump-activations", "--checkpoint", p(&bb), "--domain", domain, "--config", p(&run), "--samples", "8",
            "--out", p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let prof = d.join("profile.json");
    let o = ckarank(&[
        "analyze", "--source", p(&d.join("source.actv")), "--target", p(&d.join("target.actv")), "--out", p(&prof),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let plan = d.join("plan.json");
    let o = ckarank(&["allocate", "--profile", p(&prof), "--bands", "1,1,1", "--ranks", "4,2,1", "--dims", "8", "--out", p(&plan)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let runs = d.join("runs");
    let a = runs.join("a");
    let o = ckarank(&["train", "--config", p(&run), "--plan", p(&plan), "--backbone", p(&bb), "--out", p(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["manifest.json", "metrics.csv", "custom-1.rsam", "custom-2.rsam"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    // Same inputs give byte-identical metrics.
    let b = runs.join("b");
    assert_eq!(code(&ckarank(&["train", "--config", p(&run), "--plan", p(&plan), "--backbone", p(&bb), "--out", p(&b)])), 0);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());

    let o = ckarank(&["report", "--in", p(&runs)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let md = String::from_utf8(o.stdout).unwrap();
    assert!(md.contains("| custom | 4 |"), "{md}");
    let csv_out = d.join("report.csv");
    assert_eq!(code(&ckarank(&["report", "--in", p(&runs), "--format", "csv", "--out", p(&csv_out)])), 0);
    assert!(fs::read_to_string(&csv_out).unwrap().starts_with("table,kind,variant"));

    // A run from a different config cannot be mixed in.
    let mut other = tiny_run_config();
    other.train.epochs = 2;
    let run2 = d.join("run2.json");
    write_json(&run2, &other).unwrap();
    let c = runs.join("c");
    let o = ckarank(&["train", "--config", p(&run2), "--plan", p(&plan), "--backbone", p(&bb), "--out", p(&c), "--epochs", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = ckarank(&["report", "--in", p(&runs)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("incompatible"), "{}", stderr(&o));

    // A plan for another width is refused before training.
    let wide = d.join("wide.json");
    let o = ckarank(&["allocate", "--profile", p(&prof), "--bands", "1,1,1", "--ranks", "4,2,1", "--dims", "16", "--out", p(&wide)]);
    assert_eq!(code(&o), 0);
    let o = ckarank(&["train", "--config", p(&run), "--plan", p(&wide), "--backbone", p(&bb), "--out", p(&d.join("w"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
