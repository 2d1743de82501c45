use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use ckarank_core::allocation::{allocate_ranks, count_trainable_params, AdapterDims, RankPlan, RegimeRanks};
use ckarank_core::cka::{bootstrap_profiles, profile, profile_stats, Regime, Thresholds};
use ckarank_core::encoder::{extras_for, Backbone, EncoderConfig};
use ckarank_core::experiments::data::Domain;
use ckarank_core::experiments::suites::{
    boundary_shift_study, component_ablation, lambda_sweep, prepare_suite, quantile_thresholds, rank_strategy_ablation,
    ExperimentReport, Runner, Strategy,
};
use ckarank_core::experiments::{
    adapted_model, generate_dataset, Dataset, pretrain_frozen_backbone, train_adapters, Corruption, PretrainConfig,
    SyntheticTaskConfig,
};
use ckarank_core::io::{
    atomic_write, content_hash, read_activations, read_checkpoint, read_json, read_plan, write_activations,
    write_checkpoint, write_json, write_metrics, BootstrapDoc, MetricsRow, ProfileDoc, Provenance, RankPlanDoc,
    RunConfigDoc, TOOL_VERSION,
};
use ckarank_core::{Error, Result};

use crate::{seed_override, AblateArgs, AllocateArgs, AnalyzeArgs, ConfigKind, DomainArg, DumpArgs, InitConfigArgs};
use crate::{PretrainArgs, SuiteArg, TrainArgs};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUITE_CSV: &str = "runs.csv";
pub const SUITE_REPORT: &str = "report.json";
pub const SUITE_SUMMARY: &str = "summary.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Train,
    Suite,
}

/// Identifies what produced a directory of artifacts; `report` refuses to
/// mix directories whose configs or backbones differ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: ArtifactKind,
    /// Strategy label for training runs, suite name for ablations.
    pub name: String,
    pub config_hash: String,
    pub backbone_hash: String,
    pub tool_version: String,
}

pub fn init_config(a: &InitConfigArgs) -> Result<()> {
    match a.kind {
        ConfigKind::Run => write_json(&a.out, &RunConfigDoc::default()),
        ConfigKind::Pretrain => write_json(&a.out, &PretrainConfig::default()),
    }
}

fn read_run_config(path: &Path) -> Result<RunConfigDoc> {
    let mut cfg = RunConfigDoc::read(path)?;
    if let Some(seed) = seed_override()? {
        cfg.train.seeds = vec![seed];
    }
    Ok(cfg)
}

/// Rank-1 placeholder plan for a bare backbone; the adapters start at zero.
fn bare_plan(cfg: &EncoderConfig) -> Result<RankPlan> {
    RankPlan::from_ranks(
        &vec![1; cfg.layer_count],
        Thresholds::default(),
        RegimeRanks::new(1, 1, 1)?,
        AdapterDims {
            d_model: cfg.d_model,
            extras: 0,
        },
    )
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<PretrainConfig>(p)?,
        None => PretrainConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.encoder.seed = seed;
    }
    cfg.encoder.validate()?;
    let (backbone, report) = pretrain_frozen_backbone(&cfg)?;
    let model = adapted_model(&backbone, &cfg.encoder, &bare_plan(&cfg.encoder)?, cfg.encoder.seed, false)?;
    write_checkpoint(&a.out, &model)?;
    println!(
        "held-out source mIoU {:.4} after {} epochs; backbone {}",
        report.source_miou,
        report.epochs_run,
        backbone.hash()
    );
    Ok(())
}

/// Backbone and encoder config stored in a checkpoint.
fn load_backbone(path: &Path) -> Result<(Backbone, EncoderConfig)> {
    let model = read_checkpoint(path)?;
    let cfg = model.config().clone();
    Ok((model.encoder.frozen, cfg))
}

fn check_architecture(stored: &EncoderConfig, wanted: &EncoderConfig) -> Result<()> {
    let same = stored.layer_count == wanted.layer_count
        && stored.d_model == wanted.d_model
        && stored.head_count == wanted.head_count
        && stored.patch_size == wanted.patch_size
        && stored.image_size == wanted.image_size;
    if !same {
        return Err(Error::Config(format!(
            "backbone architecture {stored:?} does not match the config's encoder {wanted:?}"
        )));
    }
    Ok(())
}

pub fn dump_activations(a: &DumpArgs) -> Result<()> {
    let model = read_checkpoint(&a.checkpoint)?;
    let target = match &a.config {
        Some(p) => RunConfigDoc::read(p)?.task,
        None => SyntheticTaskConfig::target(a.seed),
    };
    let seed = seed_override()?.unwrap_or(a.seed);
    let task = SyntheticTaskConfig { seed, ..target };
    let task = match a.domain {
        DomainArg::Target => task,
        DomainArg::Source => task.with_domain(Domain::Source, Corruption::NONE),
    };
    if task.image_size != model.config().image_size {
        return Err(Error::Config(format!(
            "scene size {} differs from the checkpoint's image size {}",
            task.image_size,
            model.config().image_size
        )));
    }
    let data = generate_dataset(&task, a.samples)?;
    write_activations(&a.out, &model.activations(&data.images(), true)?)
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let src = read_activations(&a.source)?;
    let tgt = read_activations(&a.target)?;
    let p = profile(&src, &tgt)?;
    let doc = match a.resamples {
        0 => ProfileDoc::new(src.sample_count(), &p, None),
        1 => return Err(Error::Argument("bootstrap needs at least 2 resamples".into())),
        k => {
            let seed = seed_override()?.unwrap_or(a.bootstrap_seed);
            let stats = profile_stats(&bootstrap_profiles(&src, &tgt, k, seed)?)?;
            ProfileDoc::new(src.sample_count(), &p, Some((&stats, BootstrapDoc { resamples: k, seed })))
        }
    };
    write_json(&a.out, &doc)?;
    for l in &doc.layers {
        match (l.bootstrap_mean, l.bootstrap_std) {
            (Some(m), Some(s)) => println!("layer {:>2}  rho {:.4}  bootstrap {:.4} ± {:.4}", l.layer, l.rho, m, s),
            _ => println!("layer {:>2}  rho {:.4}", l.layer, l.rho),
        }
    }
    Ok(())
}

/// Exactly `N` comma-separated values of option `--{name}`.
fn exactly<T: Copy, const N: usize>(v: &[T], name: &str) -> Result<[T; N]> {
    v.try_into()
        .map_err(|_| Error::Argument(format!("--{name} takes {N} comma-separated values, got {}", v.len())))
}

pub fn allocate(a: &AllocateArgs) -> Result<()> {
    let ranks: [usize; 3] = exactly(&a.ranks, "ranks")?;
    let (d_model, extras) = match a.dims.as_slice() {
        [d] => (*d, 0),
        [d, e] => (*d, *e),
        _ => return Err(Error::Argument("--dims takes a width and an optional extra count".into())),
    };
    let bands = a.bands.as_deref().map(|b| exactly::<usize, 3>(b, "bands")).transpose()?;
    let bounds: [f64; 2] = exactly(&a.thresholds, "thresholds")?;
    let doc: ProfileDoc = read_json(&a.profile)?;
    let prof = doc.profile()?;
    let thresholds = match bands {
        Some([s, m, d]) => quantile_thresholds(&prof, (s, m, d))?,
        None => Thresholds::new(bounds[0], bounds[1])?,
    };
    let ranks: BTreeMap<Regime, usize> = Regime::ALL.into_iter().zip(ranks).collect();
    let dims = AdapterDims {
        d_model: d_model as usize,
        extras,
    };
    let plan = allocate_ranks(&prof, thresholds, &ranks, dims)?;
    let provenance = Provenance {
        profile_hash: content_hash(&doc)?,
        tool_version: TOOL_VERSION.into(),
    };
    write_json(&a.out, &RankPlanDoc::from_plan(&plan, provenance))?;
    println!(
        "ranks {} total trainable {}",
        plan.ranks().iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        plan.total_trainable
    );
    Ok(())
}

/// Target train split (scene seed `task.seed`) and test split (`task.seed + 1`).
fn target_splits(cfg: &RunConfigDoc) -> Result<(Dataset, Dataset)> {
    let train = generate_dataset(&cfg.task, cfg.sizes.train)?;
    let test_task = SyntheticTaskConfig {
        seed: cfg.task.seed.wrapping_add(1),
        ..cfg.task
    };
    Ok((train, generate_dataset(&test_task, cfg.sizes.test)?))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = read_run_config(&a.config)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let (backbone, stored) = load_backbone(&a.backbone)?;
    check_architecture(&stored, &cfg.encoder)?;
    let mut plan = read_plan(&a.plan)?;
    if plan.layer_count() != cfg.encoder.layer_count || plan.dims.d_model != cfg.encoder.d_model {
        return Err(Error::Config(format!(
            "plan covers {} layers of width {}, encoder has {} of width {}",
            plan.layer_count(),
            plan.dims.d_model,
            cfg.encoder.layer_count,
            cfg.encoder.d_model
        )));
    }
    let with_depth = !a.no_depth;
    plan.dims.extras = extras_for(&cfg.encoder, with_depth);
    plan.total_trainable = count_trainable_params(&plan.ranks(), plan.dims.d_model, plan.dims.extras);

    let (train, test) = target_splits(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let mut rows = Vec::new();
    for &seed in &cfg.train.seeds {
        let model = adapted_model(&backbone, &cfg.encoder, &plan, seed, with_depth)?;
        let out = train_adapters(model, &train, &test, &cfg.train, seed, &cfg.loss)?;
        let run_id = format!("{}-{seed}", a.strategy);
        rows.extend(out.history.iter().map(|r| MetricsRow::from_record(&run_id, seed, &a.strategy, r)));
        write_checkpoint(&a.out.join(format!("{run_id}.rsam")), &out.model)?;
        println!(
            "{run_id}: zero-shot mIoU {:.4} → {:.4}, boundary F1 {:.4}",
            out.zero_shot.metrics.miou, out.final_eval.metrics.miou, out.final_eval.metrics.boundary_f1
        );
    }
    write_metrics(&a.out.join(METRICS_FILE), &rows)?;
    write_manifest(&a.out, ArtifactKind::Train, &a.strategy, &cfg, &backbone)
}

fn write_manifest(dir: &Path, kind: ArtifactKind, name: &str, cfg: &RunConfigDoc, backbone: &Backbone) -> Result<()> {
    let m = Manifest {
        kind,
        name: name.into(),
        config_hash: content_hash(cfg)?,
        backbone_hash: backbone.hash(),
        tool_version: TOOL_VERSION.into(),
    };
    write_json(&dir.join(MANIFEST), &m)
}

fn parse_values<T: std::str::FromStr>(values: &[String], what: &str) -> Result<Vec<T>> {
    values
        .iter()
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Argument(format!("{v:?} is not a valid {what}")))
        })
        .collect()
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = read_run_config(&a.config)?;
    let (backbone, stored) = load_backbone(&a.backbone)?;
    check_architecture(&stored, &cfg.encoder)?;
    let [s, m, d] = exactly(&a.ranks, "ranks")?;
    let regime_ranks = RegimeRanks::new(s, m, d)?;
    let values = a.values.clone();
    // Parse suite values before any training starts.
    enum Plan {
        Ranks(Vec<Strategy>),
        Lambda(Vec<f64>),
        Components,
        Shift(Vec<i64>),
    }
    let job = match a.suite {
        SuiteArg::Ranks => Plan::Ranks(match &values {
            Some(v) => parse_values(v, "strategy")?,
            None => Strategy::ALL.to_vec(),
        }),
        SuiteArg::Lambda => Plan::Lambda(match &values {
            Some(v) => parse_values(v, "lambda")?,
            None => vec![0.0, 0.3, 0.5, 0.7, 1.0],
        }),
        SuiteArg::Components => {
            if values.is_some() {
                return Err(Error::Argument("the components suite takes no values".into()));
            }
            Plan::Components
        }
        SuiteArg::BoundaryShift => Plan::Shift(match &values {
            Some(v) => parse_values(v, "shift")?,
            None => vec![-1, 1],
        }),
    };
    let (setup, study) = prepare_suite(
        backbone.clone(),
        &cfg.encoder,
        &cfg.task,
        &cfg.train,
        cfg.loss,
        regime_ranks,
        cfg.sizes,
    )?;
    let guided_doc = RankPlanDoc::from_plan(
        &setup.guided,
        Provenance {
            profile_hash: content_hash(&study)?,
            tool_version: TOOL_VERSION.into(),
        },
    );
    let runner = Runner::new(setup)?;
    let report: ExperimentReport = match job {
        Plan::Ranks(s) => rank_strategy_ablation(&runner, &s)?,
        Plan::Lambda(l) => lambda_sweep(&runner, &l)?,
        Plan::Components => component_ablation(&runner)?,
        Plan::Shift(k) => boundary_shift_study(&runner, &k)?,
    };
    fs::create_dir_all(&a.out)?;
    atomic_write(&a.out.join(SUITE_CSV), &report.to_csv()?)?;
    atomic_write(&a.out.join(SUITE_SUMMARY), format!("{}\n", report.summary_json()?).as_bytes())?;
    write_json(&a.out.join(SUITE_REPORT), &report)?;
    write_json(&a.out.join("profile.json"), &study)?;
    write_json(&a.out.join("guided-plan.json"), &guided_doc)?;
    write_manifest(&a.out, ArtifactKind::Suite, &report.suite, &cfg, &backbone)?;
    for s in &report.summaries {
        println!(
            "{:<16} mIoU {:.4} ± {:.4}  boundary F1 {:.4} ± {:.4}",
            s.variant, s.miou_mean, s.miou_std, s.boundary_f1_mean, s.boundary_f1_std
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exactly_checks_counts() {
        assert_eq!(exactly::<usize, 3>(&[8, 4, 2], "ranks").unwrap(), [8, 4, 2]);
        match exactly::<usize, 3>(&[8, 4], "ranks") {
            Err(Error::Argument(m)) => assert!(m.contains("--ranks") && m.contains("got 2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn architecture_mismatch_is_a_config_error() {
        let cfg = EncoderConfig::default();
        assert!(check_architecture(&cfg, &EncoderConfig { seed: 9, ..cfg.clone() }).is_ok());
        assert!(matches!(
            check_architecture(&cfg, &EncoderConfig { d_model: 16, ..cfg.clone() }),
            Err(Error::Config(_))
        ));
    }
}
