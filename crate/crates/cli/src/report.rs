//! Consolidates `train` and `ablate` output directories into tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use ckarank_core::experiments::suites::{Comparison, ExperimentReport, Metric, VariantSummary};
use ckarank_core::io::{atomic_write, read_json, read_metrics, rows_to_csv};
use ckarank_core::stats::{mean, sample_std};
use ckarank_core::{Error, Result};

use crate::commands::{ArtifactKind, Manifest, MANIFEST, METRICS_FILE, SUITE_REPORT};
use crate::{Format, ReportArgs};

/// One table: per-variant summaries plus paired comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    pub summaries: Vec<Summary>,
    pub comparisons: Vec<Comparison>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub variant: String,
    pub n: usize,
    pub trainable: Option<u64>,
    pub miou: (f64, f64),
    pub boundary_f1: (f64, f64),
}

impl Summary {
    fn from_variant(s: &VariantSummary, n: usize) -> Self {
        Self {
            variant: s.variant.clone(),
            n,
            trainable: Some(s.trainable),
            miou: (s.miou_mean, s.miou_std),
            boundary_f1: (s.boundary_f1_mean, s.boundary_f1_std),
        }
    }
}

/// Directories holding a manifest: `dir` itself and its direct children, sorted.
fn artifact_dirs(dir: &Path) -> Result<Vec<(PathBuf, Manifest)>> {
    let mut candidates = vec![dir.to_path_buf()];
    let mut children: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    candidates.extend(children);
    let mut out = Vec::new();
    for c in candidates {
        let m = c.join(MANIFEST);
        if m.is_file() {
            out.push((c, read_json::<Manifest>(&m)?));
        }
    }
    Ok(out)
}

/// Refuses directories produced from different configs or backbones.
fn check_compatible(found: &[(PathBuf, Manifest)]) -> Result<()> {
    let mut by_key: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for (p, m) in found {
        by_key
            .entry((m.config_hash.clone(), m.backbone_hash.clone()))
            .or_default()
            .push(p.display().to_string());
    }
    if by_key.len() > 1 {
        let mut msg = String::from("artifacts come from incompatible configurations:");
        for ((cfg, bb), dirs) in &by_key {
            let _ = write!(msg, "\n  config {} backbone {}: {}", &cfg[..12.min(cfg.len())], &bb[..12.min(bb.len())], dirs.join(", "));
        }
        return Err(Error::Config(msg));
    }
    Ok(())
}

/// Final test metrics per strategy from `train` directories.
fn train_table(dirs: &[&Path]) -> Result<Table> {
    let mut per_strategy: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for d in dirs {
        let rows = read_metrics(&d.join(METRICS_FILE))?;
        let mut last: BTreeMap<String, (usize, String, f64, f64)> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.split == "test") {
            let e = last.entry(r.run_id.clone()).or_insert((0, r.strategy.clone(), r.miou, r.boundary_f1));
            if r.epoch >= e.0 {
                *e = (r.epoch, r.strategy.clone(), r.miou, r.boundary_f1);
            }
        }
        for (_, (_, strategy, miou, bf1)) in last {
            per_strategy.entry(strategy).or_default().push((miou, bf1));
        }
    }
    let summaries = per_strategy
        .into_iter()
        .map(|(variant, v)| {
            let m: Vec<f64> = v.iter().map(|x| x.0).collect();
            let b: Vec<f64> = v.iter().map(|x| x.1).collect();
            Summary {
                variant,
                n: v.len(),
                trainable: None,
                miou: (mean(&m), sample_std(&m)),
                boundary_f1: (mean(&b), sample_std(&b)),
            }
        })
        .collect();
    Ok(Table {
        title: "training runs".into(),
        summaries,
        comparisons: Vec::new(),
    })
}

fn suite_table(dir: &Path) -> Result<Table> {
    let r: ExperimentReport = read_json(&dir.join(SUITE_REPORT))?;
    let n = r.seeds.len();
    Ok(Table {
        title: r.suite.clone(),
        summaries: r.summaries.iter().map(|s| Summary::from_variant(s, n)).collect(),
        comparisons: r.comparisons,
    })
}

/// Tables for every artifact directory under `dir`.
pub fn collect(dir: &Path) -> Result<Vec<Table>> {
    if !dir.is_dir() {
        return Err(Error::Argument(format!("{} is not a directory", dir.display())));
    }
    let found = artifact_dirs(dir)?;
    if found.is_empty() {
        return Err(Error::Argument(format!("no run artifacts under {}", dir.display())));
    }
    check_compatible(&found)?;
    let mut tables = Vec::new();
    let train: Vec<&Path> = found
        .iter()
        .filter(|(_, m)| m.kind == ArtifactKind::Train)
        .map(|(p, _)| p.as_path())
        .collect();
    if !train.is_empty() {
        tables.push(train_table(&train)?);
    }
    for (p, m) in &found {
        if m.kind == ArtifactKind::Suite {
            tables.push(suite_table(p)?);
        }
    }
    Ok(tables)
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Miou => "mIoU",
        Metric::BoundaryF1 => "boundary F1",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn markdown(tables: &[Table]) -> String {
    let mut s = String::new();
    for t in tables {
        let _ = writeln!(s, "## {}\n", t.title);
        let _ = writeln!(s, "| variant | n | trainable | mIoU | boundary F1 |");
        let _ = writeln!(s, "|---|---:|---:|---|---|");
        for r in &t.summaries {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |",
                r.variant,
                r.n,
                r.trainable.map_or_else(|| "-".into(), |x| x.to_string()),
                r.miou.0,
                r.miou.1,
                r.boundary_f1.0,
                r.boundary_f1.1
            );
        }
        if !t.comparisons.is_empty() {
            let _ = writeln!(s, "\n| reference | other | metric | mean Δ | 95% CI | t | p | p (Holm) | reject |");
            let _ = writeln!(s, "|---|---|---|---:|---|---:|---:|---:|---|");
            for c in &t.comparisons {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {:+.4} | [{:+.4}, {:+.4}] | {:.3} | {:.4} | {} | {} |",
                    c.reference,
                    c.other,
                    metric_name(c.metric),
                    c.test.mean,
                    c.test.ci95.0,
                    c.test.ci95.1,
                    c.test.t,
                    c.test.p,
                    opt(c.p_holm),
                    c.reject.map_or("-", |r| if r { "yes" } else { "no" })
                );
            }
        }
        s.push('\n');
    }
    s
}

/// Flat CSV with one row per summary statistic or comparison.
#[derive(Serialize)]
struct CsvRow<'a> {
    table: &'a str,
    kind: &'static str,
    variant: &'a str,
    other: &'a str,
    metric: &'static str,
    n: usize,
    mean: f64,
    std: f64,
    p: Option<f64>,
    p_holm: Option<f64>,
    reject: Option<bool>,
}

pub fn csv(tables: &[Table]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for t in tables {
        for r in &t.summaries {
            for (metric, (m, sd)) in [("miou", r.miou), ("boundary_f1", r.boundary_f1)] {
                rows.push(CsvRow {
                    table: &t.title,
                    kind: "summary",
                    variant: &r.variant,
                    other: "",
                    metric,
                    n: r.n,
                    mean: m,
                    std: sd,
                    p: None,
                    p_holm: None,
                    reject: None,
                });
            }
        }
        for c in &t.comparisons {
            rows.push(CsvRow {
                table: &t.title,
                kind: "comparison",
                variant: &c.reference,
                other: &c.other,
                metric: match c.metric {
                    Metric::Miou => "miou",
                    Metric::BoundaryF1 => "boundary_f1",
                },
                n: c.test.n,
                mean: c.test.mean,
                std: c.test.std,
                p: Some(c.test.p),
                p_holm: c.p_holm,
                reject: c.reject,
            });
        }
    }
    rows_to_csv(&rows)
}

pub fn run(a: &ReportArgs) -> Result<()> {
    let tables = collect(&a.input)?;
    let bytes = match a.format {
        Format::Markdown => markdown(&tables).into_bytes(),
        Format::Csv => csv(&tables)?,
    };
    match &a.out {
        Some(p) => atomic_write(p, &bytes),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(&bytes)?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ckarank_core::stats::paired_t_test;

    fn manifest(cfg: &str) -> Manifest {
        Manifest {
            kind: ArtifactKind::Train,
            name: "custom".into(),
            config_hash: cfg.into(),
            backbone_hash: "b".repeat(64),
            tool_version: "0".into(),
        }
    }

    fn table() -> Table {
        Table {
            title: "ranks".into(),
            summaries: vec![Summary {
                variant: "cka-guided".into(),
                n: 3,
                trainable: Some(10),
                miou: (0.5, 0.01),
                boundary_f1: (0.75, 0.02),
            }],
            comparisons: vec![Comparison {
                reference: "cka-guided".into(),
                other: "uniform-mid".into(),
                metric: Metric::Miou,
                deltas: vec![2.0, 4.0, 6.0],
                test: paired_t_test(&[2.0, 4.0, 6.0]).unwrap(),
                p_holm: Some(0.1484),
                reject: Some(false),
            }],
        }
    }

    #[test]
    fn mixed_hashes_are_listed() {
        let same = vec![(PathBuf::from("a"), manifest("x")), (PathBuf::from("b"), manifest("x"))];
        assert!(check_compatible(&same).is_ok());
        let mixed = vec![(PathBuf::from("a"), manifest("x")), (PathBuf::from("b"), manifest("y"))];
        match check_compatible(&mixed) {
            Err(Error::Config(msg)) => assert!(msg.contains("a") && msg.contains("b") && msg.lines().count() == 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn markdown_has_summary_and_comparison_rows() {
        let md = markdown(&[table()]);
        assert!(md.contains("## ranks"));
        assert!(md.contains("| cka-guided | 3 | 10 | 0.5000 ± 0.0100 | 0.7500 ± 0.0200 |"));
        assert!(md.contains("| cka-guided | uniform-mid | mIoU | +4.0000 |"));
        assert!(md.contains("| 3.464 | 0.0742 | 0.1484 | no |"));
    }

    #[test]
    fn csv_rows_per_statistic() {
        let text = String::from_utf8(csv(&[table()]).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "table,kind,variant,other,metric,n,mean,std,p,p_holm,reject");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("ranks,comparison,cka-guided,uniform-mid,miou,3,4"));
        assert!(lines[3].ends_with(",0.1484,false"));
    }
}
