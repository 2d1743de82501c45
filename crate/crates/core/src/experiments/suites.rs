//! Ablation suites: rank strategies, edge-loss weight sweep, component
//! removal and regime-boundary shifts, all scored with paired tests over
//! seeds.
//!
//! Runs are memoised in a [`Runner`] keyed by everything that affects the
//! outcome, so suites that share a configuration (the full model appears in
//! most of them) train it once per seed.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{allocate_ranks, count_trainable_params, AdapterDims, RankPlan, RegimeRanks};
use crate::cka::{profile, profile_stats, CkaProfile, ProfileStats, Regime, Thresholds};
use crate::encoder::{extras_for, Backbone, EncoderConfig, SegmentationModel};
use crate::error::{Error, Result};
use crate::fusion_loss::LossWeights;
use crate::io::rows_to_csv;
use crate::stats::{holm_bonferroni, mean, paired_t_test, sample_std, PairedTTest};

use super::data::{generate_dataset, Dataset, Domain, SyntheticTaskConfig};
use super::train::{adapted_model, evaluate, train_adapters, EpochRecord, TrainConfig};

/// Family-wise level for the Holm correction.
pub const ALPHA: f64 = 0.05;
/// Relative tolerance for equal-budget comparisons.
pub const BUDGET_TOLERANCE: f64 = 0.05;
/// Seed of the draw among admissible regime permutations.
const PERMUTATION_SEED: u64 = 0x5045_524d;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    CkaGuided,
    UniformLow,
    UniformMid,
    UniformHigh,
    Inverted,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::CkaGuided,
        Strategy::UniformLow,
        Strategy::UniformMid,
        Strategy::UniformHigh,
        Strategy::Inverted,
        Strategy::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::CkaGuided => "cka-guided",
            Strategy::UniformLow => "uniform-low",
            Strategy::UniformMid => "uniform-mid",
            Strategy::UniformHigh => "uniform-high",
            Strategy::Inverted => "inverted",
            Strategy::Random => "random",
        }
    }

    /// Strategies that must match the guided plan's budget.
    pub fn equal_budget(self) -> bool {
        matches!(self, Strategy::UniformMid | Strategy::Inverted | Strategy::Random)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown strategy {s:?}")))
    }
}

fn with_ranks(guided: &RankPlan, ranks: &[usize]) -> Result<RankPlan> {
    RankPlan::from_ranks(ranks, guided.thresholds, guided.regime_ranks, guided.dims)
}

fn regime_of(guided: &RankPlan) -> Result<Vec<Regime>> {
    guided
        .per_layer
        .iter()
        .map(|l| {
            l.regime
                .ok_or_else(|| Error::Config(format!("layer {} of the guided plan has no regime", l.layer)))
        })
        .collect()
}

/// Per-layer ranks of `strategy`, derived from the CKA-guided plan.
pub fn strategy_plan(strategy: Strategy, guided: &RankPlan) -> Result<RankPlan> {
    let ranks = guided.ranks();
    let rr = guided.regime_ranks;
    let lo = rr.shallow.min(rr.middle).min(rr.deep);
    let hi = rr.shallow.max(rr.middle).max(rr.deep);
    let n = ranks.len();
    let plan = match strategy {
        Strategy::CkaGuided => guided.clone(),
        Strategy::UniformLow => with_ranks(guided, &vec![lo; n])?,
        Strategy::UniformHigh => with_ranks(guided, &vec![hi; n])?,
        Strategy::UniformMid => {
            // Uniform rank closest to the guided budget.
            let total: usize = ranks.iter().sum();
            let r = ((total as f64 / n as f64).round() as usize).max(1);
            with_ranks(guided, &vec![r; n])?
        }
        Strategy::Inverted => {
            // The k-th most drifted layer takes the rank of the k-th least drifted.
            let order = drift_order(guided);
            let mut inverted = vec![0; n];
            for (pos, &i) in order.iter().enumerate() {
                inverted[i] = ranks[order[n - 1 - pos]];
            }
            with_ranks(guided, &inverted)?
        }
        Strategy::Random => random_permutation_plan(guided)?,
    };
    if strategy.equal_budget() {
        check_equal_budget(guided, &plan)?;
    }
    Ok(plan)
}

/// Reassigns the regime ranks to regimes by a non-identity permutation that
/// keeps the budget within tolerance, drawn with a fixed seed.
fn random_permutation_plan(guided: &RankPlan) -> Result<RankPlan> {
    let regimes = regime_of(guided)?;
    let rr = guided.regime_ranks;
    let base = [rr.shallow, rr.middle, rr.deep];
    let perms: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut admissible = Vec::new();
    for p in perms {
        let assigned = [base[p[0]], base[p[1]], base[p[2]]];
        if assigned == base {
            continue;
        }
        let ranks: Vec<usize> = regimes
            .iter()
            .map(|r| match r {
                Regime::Shallow => assigned[0],
                Regime::Middle => assigned[1],
                Regime::Deep => assigned[2],
            })
            .collect();
        let plan = with_ranks(guided, &ranks)?;
        if check_equal_budget(guided, &plan).is_ok() {
            admissible.push(plan);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PERMUTATION_SEED);
    admissible.shuffle(&mut rng);
    admissible.into_iter().next().ok_or_else(|| {
        Error::Config("no regime permutation keeps the budget within tolerance".into())
    })
}

/// Adapter budgets of `a` and `b` must agree within [`BUDGET_TOLERANCE`].
pub fn check_equal_budget(a: &RankPlan, b: &RankPlan) -> Result<()> {
    let (x, y) = (a.total_trainable as f64, b.total_trainable as f64);
    let rel = (x - y).abs() / x.max(y).max(1.0);
    if rel >= BUDGET_TOLERANCE {
        return Err(Error::Config(format!(
            "budget mismatch: {} vs {} trainable parameters ({:.1}% apart)",
            a.total_trainable,
            b.total_trainable,
            100.0 * rel
        )));
    }
    Ok(())
}

/// Layers ordered from most to least drifted: by rho when every layer
/// carries one, by depth otherwise.
fn drift_order(plan: &RankPlan) -> Vec<usize> {
    let mut order: Vec<usize> = (0..plan.layer_count()).collect();
    if plan.per_layer.iter().all(|l| l.rho.is_some()) {
        order.sort_by(|&a, &b| {
            let (x, y) = (plan.per_layer[a].rho.unwrap_or(0.0), plan.per_layer[b].rho.unwrap_or(0.0));
            x.total_cmp(&y).then(a.cmp(&b))
        });
    }
    order
}

/// Layer counts per regime. Regimes must be contiguous along the drift
/// order, which holds for any threshold rule and for positional bands.
pub fn regime_bands(plan: &RankPlan) -> Result<(usize, usize, usize)> {
    let regimes = regime_of(plan)?;
    let ordered: Vec<Regime> = drift_order(plan).into_iter().map(|i| regimes[i]).collect();
    if ordered.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("regimes are not contiguous shallow → middle → deep bands".into()));
    }
    let count = |r: Regime| regimes.iter().filter(|&&x| x == r).count();
    Ok((count(Regime::Shallow), count(Regime::Middle), count(Regime::Deep)))
}

/// Moves both regime boundaries by `shift` layers along the drift order:
/// a positive shift turns the `shift` most drifted middle layers shallow and
/// the `shift` most drifted deep layers middle. For a profile that rises with
/// depth this is the same as moving the boundaries deeper.
pub fn shifted_plan(guided: &RankPlan, shift: i64) -> Result<RankPlan> {
    let (s, m, d) = regime_bands(guided)?;
    let s2 = s as i64 + shift;
    let d2 = d as i64 - shift;
    if s2 < 1 || d2 < 1 {
        return Err(Error::Config(format!(
            "shift {shift:+} collapses a regime (bands {s2}/{m}/{d2})"
        )));
    }
    let s2 = s2 as usize;
    let rr = guided.regime_ranks;
    let mut per_layer = guided.per_layer.clone();
    for (pos, i) in drift_order(guided).into_iter().enumerate() {
        let regime = if pos < s2 {
            Regime::Shallow
        } else if pos < s2 + m {
            Regime::Middle
        } else {
            Regime::Deep
        };
        per_layer[i].regime = Some(regime);
        per_layer[i].rank = rr.rank_for(regime);
    }
    let mut plan = RankPlan {
        per_layer,
        total_trainable: 0,
        ..guided.clone()
    };
    plan.total_trainable = count_trainable_params(&plan.ranks(), plan.dims.d_model, plan.dims.extras);
    Ok(plan)
}

/// Thresholds that split `profile` into `bands` = (shallow, middle, deep)
/// layer counts by rho, each placed halfway between neighbouring values.
pub fn quantile_thresholds(profile: &CkaProfile, bands: (usize, usize, usize)) -> Result<Thresholds> {
    let (s, m, d) = bands;
    let n = profile.layer_count();
    if s == 0 || m == 0 || d == 0 || s + m + d != n {
        return Err(Error::Argument(format!("bands {s}/{m}/{d} do not cover {n} layers")));
    }
    let mut sorted = profile.rho_per_layer.clone();
    sorted.sort_by(f64::total_cmp);
    let lower = 0.5 * (sorted[s - 1] + sorted[s]);
    let upper = 0.5 * (sorted[s + m - 1] + sorted[s + m]);
    if !(sorted[s - 1] < lower && lower < upper && upper < sorted[s + m]) {
        return Err(Error::Degenerate(format!("tied rho values prevent a {s}/{m}/{d} split")));
    }
    Thresholds::new(lower, upper)
}

// ---------------------------------------------------------------------------
// CKA profile of the frozen backbone
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileStudy {
    pub seeds: Vec<u64>,
    pub profiles: Vec<CkaProfile>,
    pub stats: ProfileStats,
    /// Per seed: mean rho over the first `positional_bands.0` layers and over
    /// the last `positional_bands.2` layers.
    pub shallow_mean: Vec<f64>,
    pub deep_mean: Vec<f64>,
    pub positional_bands: (usize, usize, usize),
}

impl ProfileStudy {
    /// Mean profile across seeds.
    pub fn mean_profile(&self) -> Result<CkaProfile> {
        CkaProfile::new(self.stats.mean_per_layer.clone())
    }

    pub fn shallow_below_deep(&self) -> bool {
        self.shallow_mean.iter().zip(&self.deep_mean).all(|(s, d)| s < d)
    }
}

/// Layer bands in the paper-style 10/12/10 proportion for `layers` layers.
pub fn positional_bands(layers: usize) -> (usize, usize, usize) {
    let s = ((layers as f64) * 10.0 / 32.0).round().max(1.0) as usize;
    let d = ((layers as f64) * 10.0 / 32.0).floor().max(1.0) as usize;
    (s, layers.saturating_sub(s + d).max(1), d)
}

/// Per-seed CKA profiles between frozen-backbone activations on Source scenes
/// and on the same scenes rendered in the Target domain.
pub fn cka_profile_study(
    backbone: &Backbone,
    encoder: &EncoderConfig,
    task: &SyntheticTaskConfig,
    seeds: &[u64],
    samples: usize,
) -> Result<ProfileStudy> {
    if seeds.is_empty() {
        return Err(Error::Argument("profile study needs at least one seed".into()));
    }
    let layers = encoder.layer_count;
    let probe = RankPlan::from_ranks(
        &vec![1; layers],
        Thresholds::default(),
        RegimeRanks::new(1, 1, 1)?,
        AdapterDims {
            d_model: encoder.d_model,
            extras: 0,
        },
    )?;
    let model = adapted_model(backbone, encoder, &probe, encoder.seed, false)?;
    let bands = positional_bands(layers);
    let mut profiles = Vec::new();
    let (mut shallow_mean, mut deep_mean) = (Vec::new(), Vec::new());
    for &seed in seeds {
        let target_cfg = SyntheticTaskConfig { seed, ..*task };
        let source_cfg = target_cfg.with_domain(Domain::Source, super::data::Corruption::NONE);
        let src = generate_dataset(&source_cfg, samples)?;
        let tgt = generate_dataset(&target_cfg, samples)?;
        let p = profile(&model.activations(&src.images(), false)?, &model.activations(&tgt.images(), false)?)?;
        shallow_mean.push(mean(&p.rho_per_layer[..bands.0]));
        deep_mean.push(mean(&p.rho_per_layer[layers - bands.2..]));
        profiles.push(p);
    }
    Ok(ProfileStudy {
        seeds: seeds.to_vec(),
        stats: profile_stats(&profiles)?,
        profiles,
        shallow_mean,
        deep_mean,
        positional_bands: bands,
    })
}

/// CKA-guided plan from the mean profile.
pub fn guided_plan(
    study: &ProfileStudy,
    thresholds: Thresholds,
    regime_ranks: RegimeRanks,
    dims: AdapterDims,
) -> Result<RankPlan> {
    let map: BTreeMap<Regime, usize> = Regime::ALL.into_iter().map(|r| (r, regime_ranks.rank_for(r))).collect();
    allocate_ranks(&study.mean_profile()?, thresholds, &map, dims)
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

/// What the depth stream sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthInput {
    Sensor,
    /// Depth stream kept, sensor replaced by a constant plane.
    Blank,
    /// No depth stream at all.
    Absent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub plan: RankPlan,
    pub weights: LossWeights,
    pub depth: DepthInput,
}

/// Everything a suite needs besides the variant list.
#[derive(Clone, Debug)]
pub struct SuiteSetup {
    pub encoder: EncoderConfig,
    pub backbone: Backbone,
    /// Guided plan sized for a model with the depth stream.
    pub guided: RankPlan,
    pub train: Dataset,
    pub test: Dataset,
    pub train_cfg: TrainConfig,
    pub weights: LossWeights,
}

impl SuiteSetup {
    pub fn variant(&self, name: impl Into<String>, plan: RankPlan) -> Variant {
        Variant {
            name: name.into(),
            plan,
            weights: self.weights,
            depth: DepthInput::Sensor,
        }
    }
}

/// Scene counts for the target splits and the profile study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
    /// Scenes per seed in the CKA profile study.
    pub profile: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 256,
            test: 128,
            profile: 128,
        }
    }
}

impl SplitSizes {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.test == 0 || self.profile < 2 {
            return Err(Error::Config("split sizes must be positive (profile at least 2)".into()));
        }
        Ok(())
    }
}

/// Profiles the backbone over the training seeds, places the regime
/// thresholds at the profile quantiles matching [`positional_bands`],
/// allocates the guided plan and renders the target train/test splits
/// (scene seeds `task.seed` and `task.seed + 1`).
#[allow(clippy::too_many_arguments)]
pub fn prepare_suite(
    backbone: Backbone,
    encoder: &EncoderConfig,
    task: &SyntheticTaskConfig,
    train_cfg: &TrainConfig,
    weights: LossWeights,
    regime_ranks: RegimeRanks,
    sizes: SplitSizes,
) -> Result<(SuiteSetup, ProfileStudy)> {
    sizes.validate()?;
    train_cfg.validate()?;
    let study = cka_profile_study(&backbone, encoder, task, &train_cfg.seeds, sizes.profile)?;
    let mean = study.mean_profile()?;
    let thresholds = quantile_thresholds(&mean, positional_bands(encoder.layer_count))?;
    let dims = AdapterDims {
        d_model: encoder.d_model,
        extras: extras_for(encoder, true),
    };
    let guided = guided_plan(&study, thresholds, regime_ranks, dims)?;
    let train = generate_dataset(task, sizes.train)?;
    let test = generate_dataset(
        &SyntheticTaskConfig {
            seed: task.seed.wrapping_add(1),
            ..*task
        },
        sizes.test,
    )?;
    let setup = SuiteSetup {
        encoder: encoder.clone(),
        backbone,
        guided,
        train,
        test,
        train_cfg: train_cfg.clone(),
        weights,
    };
    Ok((setup, study))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    pub ranks: Vec<usize>,
    pub trainable: u64,
    pub lambda_edge: f64,
    pub depth: DepthInput,
    pub zero_shot_miou: f64,
    pub miou: f64,
    pub boundary_f1: f64,
    pub transparent_miou: Option<f64>,
    pub transparent_boundary_f1: Option<f64>,
    pub loss_dice: f64,
    pub loss_bce: f64,
    pub loss_edge: f64,
    pub history: Vec<EpochRecord>,
    pub wall_clock_s: f64,
}

/// One CSV row per run. Wall-clock time is left out so that reruns are
/// byte-identical; it lives in the JSON summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub suite: String,
    pub variant: String,
    pub seed: u64,
    pub ranks: String,
    pub trainable: u64,
    pub lambda_edge: f64,
    pub depth: DepthInput,
    pub zero_shot_miou: f64,
    pub miou: f64,
    pub boundary_f1: f64,
    pub transparent_miou: Option<f64>,
    pub transparent_boundary_f1: Option<f64>,
    pub loss_dice: f64,
    pub loss_bce: f64,
    pub loss_edge: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct RunKey {
    ranks: Vec<usize>,
    lambda_bits: u64,
    smooth_bits: u64,
    edge_width: usize,
    depth: DepthInput,
    seed: u64,
}

impl RunKey {
    fn new(v: &Variant, seed: u64) -> Self {
        Self {
            ranks: v.plan.ranks(),
            lambda_bits: v.weights.lambda_edge.to_bits(),
            smooth_bits: v.weights.dice_smooth.to_bits(),
            edge_width: v.weights.edge_width,
            depth: v.depth,
            seed,
        }
    }
}

/// Trains and memoises runs over a fixed setup.
pub struct Runner {
    pub setup: SuiteSetup,
    blank_train: Dataset,
    blank_test: Dataset,
    cache: Mutex<BTreeMap<RunKey, (RunRecord, SegmentationModel)>>,
}

impl Runner {
    pub fn new(setup: SuiteSetup) -> Result<Self> {
        setup.train_cfg.validate()?;
        setup.guided.validate()?;
        Ok(Self {
            blank_train: setup.train.with_blank_depth(),
            blank_test: setup.test.with_blank_depth(),
            setup,
            cache: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn seeds(&self) -> &[u64] {
        &self.setup.train_cfg.seeds
    }

    /// Number of distinct runs trained so far.
    pub fn runs_trained(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    fn train_one(&self, v: &Variant, seed: u64) -> Result<(RunRecord, SegmentationModel)> {
        let s = &self.setup;
        let with_depth = v.depth != DepthInput::Absent;
        let mut plan = v.plan.clone();
        plan.dims.extras = extras_for(&s.encoder, with_depth);
        let model = adapted_model(&s.backbone, &s.encoder, &plan, seed, with_depth)?;
        let (train, test) = match v.depth {
            DepthInput::Blank => (&self.blank_train, &self.blank_test),
            _ => (&s.train, &s.test),
        };
        let out = train_adapters(model, train, test, &s.train_cfg, seed, &v.weights)?;
        let m = out.final_eval.metrics;
        let record = RunRecord {
            variant: v.name.clone(),
            seed,
            ranks: plan.ranks(),
            trainable: out.model.adapt_param_count(),
            lambda_edge: v.weights.lambda_edge,
            depth: v.depth,
            zero_shot_miou: out.zero_shot.metrics.miou,
            miou: m.miou,
            boundary_f1: m.boundary_f1,
            transparent_miou: out.final_eval.transparent.map(|t| t.miou),
            transparent_boundary_f1: out.final_eval.transparent.map(|t| t.boundary_f1),
            loss_dice: out.final_eval.loss_dice,
            loss_bce: out.final_eval.loss_bce,
            loss_edge: out.final_eval.loss_edge,
            history: out.history,
            wall_clock_s: out.wall_clock_s,
        };
        Ok((record, out.model))
    }

    /// Runs every (variant, seed) pair not yet cached, in parallel when
    /// threads are available, and returns records in variant-major order.
    pub fn run(&self, variants: &[Variant]) -> Result<Vec<RunRecord>> {
        let seeds = self.seeds().to_vec();
        let pending: Vec<(&Variant, u64)> = {
            let cache = self.cache.lock().expect("cache lock");
            let mut seen = std::collections::BTreeSet::new();
            variants
                .iter()
                .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
                .filter(|(v, s)| {
                    let k = RunKey::new(v, *s);
                    !cache.contains_key(&k) && seen.insert(k)
                })
                .collect()
        };
        let fresh: Vec<Result<(RunKey, (RunRecord, SegmentationModel))>> = pending
            .par_iter()
            .map(|(v, s)| Ok((RunKey::new(v, *s), self.train_one(v, *s)?)))
            .collect();
        let mut cache = self.cache.lock().expect("cache lock");
        for r in fresh {
            let (k, v) = r?;
            cache.insert(k, v);
        }
        let mut out = Vec::new();
        for v in variants {
            for &s in &seeds {
                let mut rec = cache[&RunKey::new(v, s)].0.clone();
                rec.variant = v.name.clone();
                out.push(rec);
            }
        }
        Ok(out)
    }

    /// Trained model of a cached run.
    pub fn model(&self, v: &Variant, seed: u64) -> Option<SegmentationModel> {
        self.cache
            .lock()
            .expect("cache lock")
            .get(&RunKey::new(v, seed))
            .map(|(_, m)| m.clone())
    }

    pub fn strategy_variant(&self, strategy: Strategy) -> Result<Variant> {
        Ok(self.setup.variant(strategy.as_str(), strategy_plan(strategy, &self.setup.guided)?))
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Miou,
    BoundaryF1,
}

impl Metric {
    fn of(self, r: &RunRecord) -> f64 {
        match self {
            Metric::Miou => r.miou,
            Metric::BoundaryF1 => r.boundary_f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub trainable: u64,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub boundary_f1_mean: f64,
    pub boundary_f1_std: f64,
    pub transparent_miou_mean: Option<f64>,
}

/// Paired comparison `reference − other` over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: String,
    pub other: String,
    pub metric: Metric,
    pub deltas: Vec<f64>,
    pub test: PairedTTest,
    /// Holm-adjusted p-value, for comparisons inside the tested family.
    pub p_holm: Option<f64>,
    pub reject: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
    pub runs: Vec<RunRecord>,
    pub summaries: Vec<VariantSummary>,
    pub comparisons: Vec<Comparison>,
}

/// A requested paired comparison; `family` marks membership in the Holm family.
struct Pairing<'a> {
    reference: &'a str,
    other: &'a str,
    metric: Metric,
    family: bool,
}

impl ExperimentReport {
    fn build(suite: &str, seeds: &[u64], variants: &[Variant], runs: Vec<RunRecord>, pairings: &[Pairing]) -> Result<Self> {
        let names: Vec<String> = variants.iter().map(|v| v.name.clone()).collect();
        let by = |name: &str| -> Vec<&RunRecord> { runs.iter().filter(|r| r.variant == name).collect() };
        let summaries = names
            .iter()
            .map(|n| {
                let rs = by(n);
                let miou: Vec<f64> = rs.iter().map(|r| r.miou).collect();
                let bf1: Vec<f64> = rs.iter().map(|r| r.boundary_f1).collect();
                let tr: Vec<f64> = rs.iter().filter_map(|r| r.transparent_miou).collect();
                VariantSummary {
                    variant: n.clone(),
                    trainable: rs.first().map_or(0, |r| r.trainable),
                    miou_mean: mean(&miou),
                    miou_std: sample_std(&miou),
                    boundary_f1_mean: mean(&bf1),
                    boundary_f1_std: sample_std(&bf1),
                    transparent_miou_mean: (tr.len() == rs.len() && !tr.is_empty()).then(|| mean(&tr)),
                }
            })
            .collect();
        let mut comparisons = Vec::new();
        if seeds.len() >= 2 {
            for p in pairings {
                let (a, b) = (by(p.reference), by(p.other));
                let deltas: Vec<f64> = a.iter().zip(&b).map(|(x, y)| p.metric.of(x) - p.metric.of(y)).collect();
                comparisons.push(Comparison {
                    reference: p.reference.into(),
                    other: p.other.into(),
                    metric: p.metric,
                    test: paired_t_test(&deltas)?,
                    deltas,
                    p_holm: None,
                    reject: None,
                });
            }
            let family: Vec<usize> = pairings.iter().enumerate().filter(|(_, p)| p.family).map(|(i, _)| i).collect();
            if !family.is_empty() {
                let ps: Vec<f64> = family.iter().map(|&i| comparisons[i].test.p).collect();
                let holm = holm_bonferroni(&ps, ALPHA)?;
                for (k, &i) in family.iter().enumerate() {
                    comparisons[i].p_holm = Some(holm.adjusted[k]);
                    comparisons[i].reject = Some(holm.reject[k]);
                }
            }
        }
        Ok(Self {
            suite: suite.into(),
            seeds: seeds.to_vec(),
            variants: names,
            runs,
            summaries,
            comparisons,
        })
    }

    pub fn summary(&self, variant: &str) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }

    pub fn comparison(&self, reference: &str, other: &str, metric: Metric) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .find(|c| c.reference == reference && c.other == other && c.metric == metric)
    }

    /// Largest |mean delta| over the comparisons on `metric`.
    pub fn max_abs_mean_delta(&self, metric: Metric) -> Option<f64> {
        self.comparisons
            .iter()
            .filter(|c| c.metric == metric)
            .map(|c| c.test.mean.abs())
            .reduce(f64::max)
    }

    pub fn rows(&self) -> Vec<RunRow> {
        self.runs
            .iter()
            .map(|r| RunRow {
                suite: self.suite.clone(),
                variant: r.variant.clone(),
                seed: r.seed,
                ranks: r.ranks.iter().map(usize::to_string).collect::<Vec<_>>().join("-"),
                trainable: r.trainable,
                lambda_edge: r.lambda_edge,
                depth: r.depth,
                zero_shot_miou: r.zero_shot_miou,
                miou: r.miou,
                boundary_f1: r.boundary_f1,
                transparent_miou: r.transparent_miou,
                transparent_boundary_f1: r.transparent_boundary_f1,
                loss_dice: r.loss_dice,
                loss_bce: r.loss_bce,
                loss_edge: r.loss_edge,
            })
            .collect()
    }

    /// One row per (variant, seed).
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        rows_to_csv(&self.rows())
    }

    /// Summary JSON: per-variant statistics, paired tests and per-run timing.
    pub fn summary_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Timing<'a> {
            variant: &'a str,
            seed: u64,
            wall_clock_s: f64,
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            suite: &'a str,
            seeds: &'a [u64],
            alpha: f64,
            summaries: &'a [VariantSummary],
            comparisons: &'a [Comparison],
            timing: Vec<Timing<'a>>,
        }
        let s = Summary {
            suite: &self.suite,
            seeds: &self.seeds,
            alpha: ALPHA,
            summaries: &self.summaries,
            comparisons: &self.comparisons,
            timing: self
                .runs
                .iter()
                .map(|r| Timing {
                    variant: &r.variant,
                    seed: r.seed,
                    wall_clock_s: r.wall_clock_s,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&s)?)
    }
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

/// Compares rank strategies on Target-test mIoU. The Holm family is the
/// guided plan against every equal-budget alternative in the list.
pub fn rank_strategy_ablation(runner: &Runner, strategies: &[Strategy]) -> Result<ExperimentReport> {
    if strategies.is_empty() {
        return Err(Error::Argument("no strategies given".into()));
    }
    let variants = strategies
        .iter()
        .map(|&s| runner.strategy_variant(s))
        .collect::<Result<Vec<_>>>()?;
    let runs = runner.run(&variants)?;
    let guided = Strategy::CkaGuided.as_str();
    let pairings: Vec<Pairing> = if strategies.len() > 1 && strategies.contains(&Strategy::CkaGuided) {
        strategies
            .iter()
            .filter(|&&s| s != Strategy::CkaGuided)
            .map(|&s| Pairing {
                reference: guided,
                other: s.as_str(),
                metric: Metric::Miou,
                family: s.equal_budget(),
            })
            .collect()
    } else {
        Vec::new()
    };
    ExperimentReport::build("ranks", runner.seeds(), &variants, runs, &pairings)
}

pub fn lambda_label(lambda: f64) -> String {
    format!("lambda={lambda}")
}

/// Guided plan trained with each edge-loss weight; every weight is compared
/// with λ = 0 on boundary F1.
pub fn lambda_sweep(runner: &Runner, values: &[f64]) -> Result<ExperimentReport> {
    if !values.contains(&0.0) {
        return Err(Error::Argument("lambda sweep must include 0".into()));
    }
    let mut variants = Vec::new();
    for &l in values {
        let weights = LossWeights::new(l, runner.setup.weights.dice_smooth)?;
        variants.push(Variant {
            weights: LossWeights {
                edge_width: runner.setup.weights.edge_width,
                ..weights
            },
            ..runner.setup.variant(lambda_label(l), runner.setup.guided.clone())
        });
    }
    let runs = runner.run(&variants)?;
    let zero = lambda_label(0.0);
    let labels: Vec<String> = values.iter().filter(|&&l| l != 0.0).map(|&l| lambda_label(l)).collect();
    let pairings: Vec<Pairing> = labels
        .iter()
        .map(|l| Pairing {
            reference: l,
            other: &zero,
            metric: Metric::BoundaryF1,
            family: true,
        })
        .collect();
    ExperimentReport::build("lambda", runner.seeds(), &variants, runs, &pairings)
}

pub const COMPONENT_VARIANTS: [&str; 5] = ["full", "w/o-cka", "w/o-depth", "w/o-edge", "rgb-only-cka"];

/// Full model against single-component removals.
pub fn component_ablation(runner: &Runner) -> Result<ExperimentReport> {
    let s = &runner.setup;
    let full = s.variant("full", s.guided.clone());
    let uniform = Variant {
        name: "w/o-cka".into(),
        ..runner.strategy_variant(Strategy::UniformMid)?
    };
    let no_depth = Variant {
        name: "w/o-depth".into(),
        depth: DepthInput::Blank,
        ..full.clone()
    };
    let no_edge = Variant {
        name: "w/o-edge".into(),
        weights: LossWeights {
            lambda_edge: 0.0,
            ..s.weights
        },
        ..full.clone()
    };
    let rgb_only = Variant {
        name: "rgb-only-cka".into(),
        depth: DepthInput::Absent,
        ..full.clone()
    };
    let variants = vec![full, uniform, no_depth, no_edge, rgb_only];
    let runs = runner.run(&variants)?;
    let mut pairings = Vec::new();
    for other in &COMPONENT_VARIANTS[1..] {
        pairings.push(Pairing {
            reference: "full",
            other,
            metric: Metric::Miou,
            family: true,
        });
        pairings.push(Pairing {
            reference: "full",
            other,
            metric: Metric::BoundaryF1,
            family: false,
        });
    }
    ExperimentReport::build("components", runner.seeds(), &variants, runs, &pairings)
}

pub fn shift_label(shift: i64) -> String {
    format!("shift={shift:+}")
}

/// Guided plan with both regime boundaries moved by each offset, compared
/// with the unshifted plan.
pub fn boundary_shift_study(runner: &Runner, shifts: &[i64]) -> Result<ExperimentReport> {
    let mut all: Vec<i64> = shifts.to_vec();
    if !all.contains(&0) {
        all.insert(0, 0);
    }
    let variants = all
        .iter()
        .map(|&k| {
            let plan = if k == 0 {
                runner.setup.guided.clone()
            } else {
                shifted_plan(&runner.setup.guided, k)?
            };
            Ok(runner.setup.variant(shift_label(k), plan))
        })
        .collect::<Result<Vec<_>>>()?;
    let runs = runner.run(&variants)?;
    let base = shift_label(0);
    let labels: Vec<String> = all.iter().filter(|&&k| k != 0).map(|&k| shift_label(k)).collect();
    let pairings: Vec<Pairing> = labels
        .iter()
        .map(|l| Pairing {
            reference: &base,
            other: l,
            metric: Metric::Miou,
            family: true,
        })
        .collect();
    ExperimentReport::build("boundary-shift", runner.seeds(), &variants, runs, &pairings)
}

// ---------------------------------------------------------------------------
// Layer-resolved attribution
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// mIoU with all adapters minus mIoU with every adapter zeroed.
    pub total_delta: f64,
    /// mIoU with all adapters minus mIoU with one regime's adapters zeroed.
    pub per_regime: BTreeMap<Regime, f64>,
}

impl Attribution {
    pub fn largest(&self) -> Option<Regime> {
        self.per_regime
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(r, _)| *r)
    }

    pub fn partial_sum(&self) -> f64 {
        self.per_regime.values().sum()
    }
}

/// Zeroes the adapters of one regime at a time (bands from `regimes`) and
/// re-evaluates the trained model on `test`.
pub fn regime_attribution(
    model: &SegmentationModel,
    regimes: &[Regime],
    test: &Dataset,
    weights: &LossWeights,
) -> Result<Attribution> {
    if regimes.len() != model.encoder.adapters.len() {
        return Err(Error::Shape(format!(
            "{} regimes for {} adapted layers",
            regimes.len(),
            model.encoder.adapters.len()
        )));
    }
    let full = evaluate(model, test, weights)?.metrics.miou;
    let zeroed = |keep: &dyn Fn(Regime) -> bool| -> Result<f64> {
        let mut m = model.clone();
        for (layer, r) in m.encoder.adapters.iter_mut().zip(regimes) {
            if !keep(*r) {
                for a in layer.iter_mut() {
                    a.b.data_mut().fill(0.0);
                }
            }
        }
        Ok(evaluate(&m, test, weights)?.metrics.miou)
    };
    let total_delta = full - zeroed(&|_| false)?;
    let mut per_regime = BTreeMap::new();
    for r in Regime::ALL {
        if regimes.contains(&r) {
            per_regime.insert(r, full - zeroed(&|x| x != r)?);
        }
    }
    Ok(Attribution { total_delta, per_regime })
}

/// Regime labels of the guided plan, layer by layer.
pub fn plan_regimes(plan: &RankPlan) -> Result<Vec<Regime>> {
    regime_of(plan)
}
