//! On-disk formats: binary activation dumps and checkpoints, JSON plans and
//! run configs, CSV metrics. Every writer goes through [`atomic_write`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocation::{AdapterDims, LayerRank, RankPlan, RegimeRanks};
use crate::cka::{ActivationSet, CkaProfile, ProfileStats, Regime, Thresholds};
use crate::encoder::{EncoderConfig, Phase, SegmentationModel};
use crate::error::{Error, Result};
use crate::experiments::suites::SplitSizes;
use crate::experiments::{EpochRecord, SyntheticTaskConfig, TrainConfig};
use crate::fusion_loss::LossWeights;
use crate::numerics::DenseMatrix;

pub const ACTIVATION_MAGIC: &[u8; 4] = b"ACTV";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSAM";
pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Little-endian cursor that reports the byte offset of any failure.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Parse {
                offset: self.pos,
                message: format!("{what} length overflows"),
            })?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let start = self.pos;
        let got = self.take(4, "magic")?;
        if got != want {
            self.pos = start;
            return self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            ));
        }
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            self.pos -= 4;
            return self.fail(format!("unsupported version {v}"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn checked_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Argument(format!("{what} {n} does not fit in u32")))
}

// ---------------------------------------------------------------------------
// Activation dumps
// ---------------------------------------------------------------------------

pub fn encode_activations(set: &ActivationSet<f64>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(ACTIVATION_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&checked_u32(set.layer_count(), "layer count")?.to_le_bytes());
    out.extend_from_slice(&checked_u32(set.sample_count(), "sample count")?.to_le_bytes());
    for (i, m) in set.per_layer.iter().enumerate() {
        out.extend_from_slice(&checked_u32(i + 1, "layer index")?.to_le_bytes());
        out.extend_from_slice(&checked_u32(m.cols(), "feature dim")?.to_le_bytes());
        put_f64s(&mut out, m.data());
    }
    Ok(out)
}

/// Parses an activation dump. `tag` becomes the set's source tag.
pub fn decode_activations(bytes: &[u8], tag: &str) -> Result<ActivationSet<f64>> {
    let mut r = Reader::new(bytes);
    r.magic(ACTIVATION_MAGIC)?;
    let layers = r.u32("layer count")? as usize;
    let samples = r.u32("sample count")? as usize;
    if layers == 0 || samples == 0 {
        r.pos -= 8;
        return r.fail("dump declares zero layers or samples");
    }
    let mut per_layer = Vec::with_capacity(layers.min(1024));
    for expected in 1..=layers {
        let at = r.pos;
        let index = r.u32("layer index")? as usize;
        if index != expected {
            r.pos = at;
            return r.fail(format!("layer index {index}, expected {expected}"));
        }
        let dim = r.u32("feature dim")? as usize;
        if dim == 0 {
            r.pos -= 4;
            return r.fail(format!("layer {index} has zero feature dim"));
        }
        let n = samples.checked_mul(dim).ok_or_else(|| Error::Parse {
            offset: r.pos,
            message: "layer size overflows".into(),
        })?;
        let data = r.f64s(n, &format!("layer {index} values"))?;
        per_layer.push(DenseMatrix::new(samples, dim, data)?);
    }
    r.finish()?;
    ActivationSet::new(per_layer, tag)
}

pub fn write_activations(path: &Path, set: &ActivationSet<f64>) -> Result<()> {
    atomic_write(path, &encode_activations(set)?)
}

pub fn read_activations(path: &Path) -> Result<ActivationSet<f64>> {
    let bytes = fs::read(path)?;
    decode_activations(&bytes, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Rank plans
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// SHA-256 of the profile the plan was derived from; empty for hand-built plans.
    pub profile_hash: String,
    pub tool_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanLayerDoc {
    pub layer: usize,
    pub rho: Option<f64>,
    pub regime: Option<Regime>,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankPlanDoc {
    pub thresholds: [f64; 2],
    pub regime_ranks: RegimeRanks,
    pub per_layer: Vec<PlanLayerDoc>,
    pub total_trainable: u64,
    /// Dimensions the count was computed for.
    pub dims: AdapterDims,
    pub provenance: Provenance,
}

impl RankPlanDoc {
    pub fn from_plan(plan: &RankPlan, provenance: Provenance) -> Self {
        Self {
            thresholds: [plan.thresholds.lower, plan.thresholds.upper],
            regime_ranks: plan.regime_ranks,
            per_layer: plan
                .per_layer
                .iter()
                .map(|l| PlanLayerDoc {
                    layer: l.layer,
                    rho: l.rho,
                    regime: l.regime,
                    rank: l.rank,
                })
                .collect(),
            total_trainable: plan.total_trainable,
            dims: plan.dims,
            provenance,
        }
    }

    /// Rebuilds and validates the plan.
    pub fn to_plan(&self) -> Result<RankPlan> {
        let plan = RankPlan {
            per_layer: self
                .per_layer
                .iter()
                .map(|l| LayerRank {
                    layer: l.layer,
                    rho: l.rho,
                    regime: l.regime,
                    rank: l.rank,
                })
                .collect(),
            thresholds: Thresholds::new(self.thresholds[0], self.thresholds[1])?,
            regime_ranks: self.regime_ranks,
            dims: self.dims,
            total_trainable: self.total_trainable,
        };
        plan.validate()?;
        Ok(plan)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_plan(path: &Path) -> Result<RankPlan> {
    read_json::<RankPlanDoc>(path)?.to_plan()
}

/// Hex SHA-256 of the JSON form of any serializable value.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Per-layer CKA profile with optional bootstrap spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileDoc {
    pub sample_count: usize,
    pub layers: Vec<ProfileLayerDoc>,
    pub bootstrap: Option<BootstrapDoc>,
    pub tool_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileLayerDoc {
    pub layer: usize,
    pub rho: f64,
    pub bootstrap_mean: Option<f64>,
    pub bootstrap_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapDoc {
    pub resamples: usize,
    pub seed: u64,
}

impl ProfileDoc {
    pub fn new(sample_count: usize, profile: &CkaProfile, bootstrap: Option<(&ProfileStats, BootstrapDoc)>) -> Self {
        let layers = profile
            .rho_per_layer
            .iter()
            .enumerate()
            .map(|(i, &rho)| ProfileLayerDoc {
                layer: i + 1,
                rho,
                bootstrap_mean: bootstrap.as_ref().map(|(s, _)| s.mean_per_layer[i]),
                bootstrap_std: bootstrap.as_ref().map(|(s, _)| s.std_per_layer[i]),
            })
            .collect();
        Self {
            sample_count,
            layers,
            bootstrap: bootstrap.map(|(_, b)| b),
            tool_version: TOOL_VERSION.into(),
        }
    }

    /// The point-estimate profile; layers must run 1, 2, ….
    pub fn profile(&self) -> Result<CkaProfile> {
        if let Some((i, l)) = self.layers.iter().enumerate().find(|(i, l)| l.layer != i + 1) {
            return Err(Error::Config(format!("profile layer {} found at position {}", l.layer, i + 1)));
        }
        CkaProfile::new(self.layers.iter().map(|l| l.rho).collect())
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigDoc {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub task: SyntheticTaskConfig,
    pub loss: LossWeights,
    #[serde(default)]
    pub sizes: SplitSizes,
}

impl Default for RunConfigDoc {
    /// Desk-scale defaults: adapters train for 10 epochs at a learning rate
    /// of 5e-3 on 256 target scenes.
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            train: TrainConfig {
                epochs: 10,
                learning_rate: 5e-3,
                ..TrainConfig::default()
            },
            task: SyntheticTaskConfig::target(TARGET_TASK_SEED),
            loss: LossWeights::default(),
            sizes: SplitSizes::default(),
        }
    }
}

/// Scene seed of the default target train split; the test split uses the next seed.
pub const TARGET_TASK_SEED: u64 = 9000;

impl RunConfigDoc {
    pub fn validate(&self) -> Result<()> {
        self.sizes.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        LossWeights::new(self.loss.lambda_edge, self.loss.dice_smooth).map_err(|e| Error::Config(e.to_string()))?;
        if self.loss.edge_width == 0 {
            return Err(Error::Config("edge width must be at least 1".into()));
        }
        if self.task.image_size != self.encoder.image_size {
            return Err(Error::Config(format!(
                "task image size {} differs from encoder image size {}",
                self.task.image_size, self.encoder.image_size
            )));
        }
        Ok(())
    }

    /// Parses and validates; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    encoder: EncoderConfig,
    plan: RankPlan,
    with_depth: bool,
    frozen_len: usize,
    trainable_len: usize,
}

/// Layout: magic, version, u32 header length, JSON header, frozen weights,
/// then adapter and fusion weights, all as little-endian f64.
pub fn encode_checkpoint(model: &SegmentationModel) -> Result<Vec<u8>> {
    let frozen = model.encoder.frozen.flatten();
    let mut scratch = model.clone();
    let trainable: Vec<f64> = scratch
        .trainable_slices_mut(Phase::Adapt)
        .iter()
        .flat_map(|s| s.iter().copied())
        .collect();
    let header = serde_json::to_vec(&CheckpointHeader {
        encoder: model.encoder.config.clone(),
        plan: model.encoder.plan.clone(),
        with_depth: model.depth.is_some(),
        frozen_len: frozen.len(),
        trainable_len: trainable.len(),
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + 8 * (frozen.len() + trainable.len()));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&checked_u32(header.len(), "header length")?.to_le_bytes());
    out.extend_from_slice(&header);
    put_f64s(&mut out, &frozen);
    put_f64s(&mut out, &trainable);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SegmentationModel> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let len = r.u32("header length")? as usize;
    let at = r.pos;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::Parse {
        offset: at,
        message: format!("header: {e}"),
    })?;
    let mut state = crate::encoder::build_encoder(&header.encoder, &header.plan)?;
    let mut model = {
        let at = r.pos;
        let frozen = r.f64s(header.frozen_len, "frozen weights")?;
        state.frozen.load_flat(&frozen).map_err(|e| Error::Parse {
            offset: at,
            message: e.to_string(),
        })?;
        SegmentationModel::new(state, header.with_depth)
    };
    let at = r.pos;
    let trainable = r.f64s(header.trainable_len, "trainable weights")?;
    let mut slices = model.trainable_slices_mut(Phase::Adapt);
    let total: usize = slices.iter().map(|s| s.len()).sum();
    if total != trainable.len() {
        return Err(Error::Parse {
            offset: at,
            message: format!("header declares {} trainable values, model has {total}", trainable.len()),
        });
    }
    let mut offset = 0;
    for s in slices.iter_mut() {
        s.copy_from_slice(&trainable[offset..offset + s.len()]);
        offset += s.len();
    }
    r.finish()?;
    Ok(model)
}

pub fn write_checkpoint(path: &Path, model: &SegmentationModel) -> Result<()> {
    atomic_write(path, &encode_checkpoint(model)?)
}

pub fn read_checkpoint(path: &Path) -> Result<SegmentationModel> {
    decode_checkpoint(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

pub const METRICS_COLUMNS: [&str; 10] = [
    "run_id",
    "seed",
    "strategy",
    "epoch",
    "split",
    "miou",
    "boundary_f1",
    "loss_dice",
    "loss_bce",
    "loss_edge",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub strategy: String,
    pub epoch: usize,
    pub split: String,
    pub miou: f64,
    pub boundary_f1: f64,
    pub loss_dice: f64,
    pub loss_bce: f64,
    pub loss_edge: f64,
}

impl MetricsRow {
    pub fn from_record(run_id: &str, seed: u64, strategy: &str, r: &EpochRecord) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            strategy: strategy.into(),
            epoch: r.epoch,
            split: r.split.clone(),
            miou: r.miou,
            boundary_f1: r.boundary_f1,
            loss_dice: r.loss_dice,
            loss_bce: r.loss_bce,
            loss_edge: r.loss_edge,
        }
    }
}

/// Serializes any row type to RFC-4180 CSV with a header line.
pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn rows_from_csv<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    if rows.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(METRICS_COLUMNS)?;
        return w.into_inner().map_err(|e| Error::Io(e.into_error()));
    }
    rows_to_csv(rows)
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    atomic_write(path, &metrics_to_csv(rows)?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let bytes = fs::read(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unexpected metrics header {header:?}"),
        });
    }
    rows_from_csv(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::count_trainable_params;

    fn toy_set() -> ActivationSet<f64> {
        let layers = (0..3)
            .map(|l| DenseMatrix::from_fn(4, 2 + l, |i, j| (i * 7 + j) as f64 * 0.1 - l as f64 + 1e-300))
            .collect();
        ActivationSet::new(layers, "toy").unwrap()
    }

    #[test]
    fn activation_round_trip_is_bit_exact() {
        let set = toy_set();
        let bytes = encode_activations(&set).unwrap();
        assert_eq!(&bytes[..4], b"ACTV");
        assert_eq!(bytes.len(), 16 + 3 * 8 + 8 * 4 * (2 + 3 + 4));
        let back = decode_activations(&bytes, "toy").unwrap();
        for (a, b) in set.per_layer.iter().zip(&back.per_layer) {
            let bits = |m: &DenseMatrix<f64>| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_dump_reports_offset() {
        let bytes = encode_activations(&toy_set()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode_activations(cut, "t") {
            Err(Error::Parse { offset, message }) => {
                assert!(message.contains("truncated"), "{message}");
                assert!(offset > 16 && offset < cut.len());
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        match decode_activations(b"ACT", "t") {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dump_rejects_bad_index_and_trailing_bytes() {
        let mut bytes = encode_activations(&toy_set()).unwrap();
        bytes[16] = 2;
        assert!(matches!(decode_activations(&bytes, "t"), Err(Error::Parse { offset: 16, .. })));
        let mut bytes = encode_activations(&toy_set()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_activations(&bytes, "t"), Err(Error::Parse { .. })));
        let mut bytes = encode_activations(&toy_set()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_activations(&bytes, "t"), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn plan_doc_round_trip_and_validation() {
        let dims = AdapterDims { d_model: 32, extras: 0 };
        let plan = RankPlan::from_ranks(&[8, 8, 4, 2], Thresholds::default(), RegimeRanks::new(8, 4, 2).unwrap(), dims).unwrap();
        let doc = RankPlanDoc::from_plan(
            &plan,
            Provenance {
                profile_hash: String::new(),
                tool_version: TOOL_VERSION.into(),
            },
        );
        let text = serde_json::to_string(&doc).unwrap();
        let back: RankPlanDoc = serde_json::from_str(&text).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.to_plan().unwrap(), plan);
        assert_eq!(back.total_trainable, count_trainable_params(&[8, 8, 4, 2], 32, 0));

        let mut bad = doc.clone();
        bad.total_trainable += 1;
        assert!(matches!(bad.to_plan(), Err(Error::Config(_))));
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let doc = RunConfigDoc {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            task: SyntheticTaskConfig::target(7),
            loss: LossWeights::default(),
            sizes: SplitSizes::default(),
        };
        let mut value = serde_json::to_value(&doc).unwrap();
        assert_eq!(RunConfigDoc::parse(&value.to_string()).unwrap(), doc);
        value["train"]["momentum"] = serde_json::json!(0.5);
        assert!(RunConfigDoc::parse(&value.to_string()).is_err());
        let mut value = serde_json::to_value(&doc).unwrap();
        value["extra"] = serde_json::json!(1);
        assert!(RunConfigDoc::parse(&value.to_string()).is_err());
        let mut value = serde_json::to_value(&doc).unwrap();
        value["train"]["learning_rate"] = serde_json::json!(0.0);
        assert!(matches!(RunConfigDoc::parse(&value.to_string()), Err(Error::Config(_))));
    }

    #[test]
    fn metrics_csv_round_trip_and_quoting() {
        let rows = vec![
            MetricsRow {
                run_id: "a,\"b\"".into(),
                seed: 42,
                strategy: "cka-guided".into(),
                epoch: 0,
                split: "test".into(),
                miou: 0.1 + 0.2,
                boundary_f1: 1.0 / 3.0,
                loss_dice: 5e-324,
                loss_bce: 1e300,
                loss_edge: -0.0,
            },
            MetricsRow {
                run_id: "r2".into(),
                seed: 1024,
                strategy: "uniform-mid".into(),
                epoch: 3,
                split: "train".into(),
                miou: 0.5,
                boundary_f1: 0.25,
                loss_dice: 0.125,
                loss_bce: 0.0625,
                loss_edge: 0.03125,
            },
        ];
        let bytes = metrics_to_csv(&rows).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("run_id,seed,strategy,epoch,split,miou,boundary_f1,loss_dice,loss_bce,loss_edge\n"));
        assert!(text.contains("\"a,\"\"b\"\"\""));
        let back: Vec<MetricsRow> = rows_from_csv(&bytes).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.run_id, b.run_id);
            for (x, y) in [(a.miou, b.miou), (a.boundary_f1, b.boundary_f1), (a.loss_dice, b.loss_dice), (a.loss_bce, b.loss_bce), (a.loss_edge, b.loss_edge)] {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let empty = String::from_utf8(metrics_to_csv(&[]).unwrap()).unwrap();
        assert_eq!(empty.trim_end(), METRICS_COLUMNS.join(","));
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        atomic_write(&path, b"one").unwrap();
        atomic_write(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
