//! Small vision-transformer encoder with frozen weights and low-rank adapters
//! on the four attention projections, plus the optional depth stream and
//! gated fusion used by the segmentation model.
//!
//! Feature maps are `(images · tokens) × channels` matrices; tokens of one
//! image are contiguous and ordered row-major over the patch grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocation::{count_trainable_params, RankPlan, PROJECTIONS_PER_LAYER};
use crate::autograd::{Tape, Var};
use crate::cka::ActivationSet;
use crate::error::{Error, Result};
use crate::fusion_loss::{FusionParams, Grid};
use crate::Matrix;

pub const MLP_RATIO: usize = 4;
pub const IN_CHANNELS: usize = 3;
pub const LORA_INIT_STD: f64 = 0.02;
/// Hidden width of the depth stream.
pub const DEPTH_CHANNELS: usize = 16;

/// Offset mixed into the seed for adapter initialisation so the backbone
/// and adapters draw from independent streams.
const ADAPTER_STREAM: u64 = 0x4144_4150_5445_5253;
const DEPTH_STREAM: u64 = 0x4445_5054_4853_5452;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layer_count: usize,
    pub d_model: usize,
    pub head_count: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layer_count: 8,
            d_model: 32,
            head_count: 4,
            patch_size: 4,
            image_size: 32,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0
            || self.d_model == 0
            || self.head_count == 0
            || self.patch_size == 0
        {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.d_model % self.head_count != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.head_count
            )));
        }
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// `y = x · Wᵀ + b` with `W` stored `d_out × d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn random(d_out: usize, d_in: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            weight: Matrix::from_fn(d_out, d_in, |_, _| normal.sample(rng)),
            bias: vec![0.0; d_out],
        }
    }

    fn zeros(d_out: usize, d_in: usize) -> Self {
        Self {
            weight: Matrix::zeros(d_out, d_in),
            bias: vec![0.0; d_out],
        }
    }

    pub fn param_count(&self) -> u64 {
        (self.weight.data().len() + self.bias.len()) as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; PROJECTIONS_PER_LAYER] = [Self::Q, Self::K, Self::V, Self::O];
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `r × d_in`.
    pub a: Matrix,
    /// `d_out × r`.
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    /// `A ~ N(0, 0.02²)`, `B = 0`, `alpha = 2r`.
    pub fn new(d_in: usize, d_out: usize, rank: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Argument("adapter rank must be >= 1".into()));
        }
        let normal = Normal::new(0.0, LORA_INIT_STD).expect("positive std");
        Ok(Self {
            a: Matrix::from_fn(rank, d_in, |_, _| normal.sample(rng)),
            b: Matrix::zeros(d_out, rank),
            rank,
            alpha: 2.0 * rank as f64,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Dense update `(alpha / r) · B · A`.
    pub fn delta(&self) -> Result<Matrix> {
        Ok(self.b.matmul(&self.a)?.scale(self.scaling()))
    }

    pub fn param_count(&self) -> u64 {
        (self.a.data().len() + self.b.data().len()) as u64
    }

    fn check(&self) -> Result<()> {
        if self.a.rows() != self.rank || self.b.cols() != self.rank {
            return Err(Error::Shape(format!(
                "adapter factors {}x{} and {}x{} disagree with rank {}",
                self.a.rows(),
                self.a.cols(),
                self.b.rows(),
                self.b.cols(),
                self.rank
            )));
        }
        Ok(())
    }
}

/// Applies `W x + (alpha/r) · B (A x)` to each row `x` of `x`.
pub fn adapted_projection(w_frozen: &Matrix, adapter: &LoraAdapter, x: &Matrix) -> Result<Matrix> {
    adapter.check()?;
    if adapter.a.cols() != w_frozen.cols() || adapter.b.rows() != w_frozen.rows() {
        return Err(Error::Shape(format!(
            "adapter {}x{} does not fit weight {}x{}",
            adapter.b.rows(),
            adapter.a.cols(),
            w_frozen.rows(),
            w_frozen.cols()
        )));
    }
    let base = x.matmul_nt(w_frozen)?;
    let low = x.matmul_nt(&adapter.a)?.matmul_nt(&adapter.b)?;
    let mut out = base;
    out.axpy(adapter.scaling(), &low);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn projection(&self, p: Projection) -> &Linear {
        match p {
            Projection::Q => &self.q,
            Projection::K => &self.k,
            Projection::V => &self.v,
            Projection::O => &self.o,
        }
    }
}

/// Weights that stay frozen during adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub patch_embed: Linear,
    /// `tokens × d_model`.
    pub pos: Matrix,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNormParams,
    /// Per-token pixel logits, `patch_pixels × d_model`.
    pub head: Linear,
}

impl Backbone {
    fn random(cfg: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let patch_in = IN_CHANNELS * cfg.patch_pixels();
        let std = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let patch_embed = Linear::random(d, patch_in, std(patch_in), &mut rng);
        let pos_dist = Normal::new(0.0, 0.02).expect("positive std");
        let pos = Matrix::from_fn(cfg.tokens(), d, |_, _| pos_dist.sample(&mut rng));
        let blocks = (0..cfg.layer_count)
            .map(|_| Block {
                ln1: LayerNormParams::new(d),
                q: Linear::random(d, d, std(d), &mut rng),
                k: Linear::random(d, d, std(d), &mut rng),
                v: Linear::random(d, d, std(d), &mut rng),
                o: Linear::random(d, d, std(d) * 0.5, &mut rng),
                ln2: LayerNormParams::new(d),
                fc1: Linear::random(MLP_RATIO * d, d, std(d), &mut rng),
                fc2: Linear::random(d, MLP_RATIO * d, std(MLP_RATIO * d) * 0.5, &mut rng),
            })
            .collect();
        let head = Linear::random(cfg.patch_pixels(), d, std(d), &mut rng);
        Self {
            patch_embed,
            pos,
            blocks,
            ln_final: LayerNormParams::new(d),
            head,
        }
    }

    fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a [f64], usize, usize)) {
        let lin = |l: &'a Linear, f: &mut dyn FnMut(&'a [f64], usize, usize)| {
            f(l.weight.data(), l.weight.rows(), l.weight.cols());
            f(&l.bias, 1, l.bias.len());
        };
        lin(&self.patch_embed, f);
        f(self.pos.data(), self.pos.rows(), self.pos.cols());
        for b in &self.blocks {
            f(&b.ln1.gamma, 1, b.ln1.gamma.len());
            f(&b.ln1.beta, 1, b.ln1.beta.len());
            for l in [&b.q, &b.k, &b.v, &b.o] {
                lin(l, f);
            }
            f(&b.ln2.gamma, 1, b.ln2.gamma.len());
            f(&b.ln2.beta, 1, b.ln2.beta.len());
            lin(&b.fc1, f);
            lin(&b.fc2, f);
        }
        f(&self.ln_final.gamma, 1, self.ln_final.gamma.len());
        f(&self.ln_final.beta, 1, self.ln_final.beta.len());
        lin(&self.head, f);
    }

    /// Mutable views of every weight in canonical order.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        fn lin<'a>(l: &'a mut Linear, out: &mut Vec<&'a mut [f64]>) {
            out.push(l.weight.data_mut());
            out.push(&mut l.bias);
        }
        let mut out: Vec<&mut [f64]> = Vec::new();
        lin(&mut self.patch_embed, &mut out);
        out.push(self.pos.data_mut());
        for b in &mut self.blocks {
            out.push(&mut b.ln1.gamma);
            out.push(&mut b.ln1.beta);
            for l in [&mut b.q, &mut b.k, &mut b.v, &mut b.o] {
                lin(l, &mut out);
            }
            out.push(&mut b.ln2.gamma);
            out.push(&mut b.ln2.beta);
            lin(&mut b.fc1, &mut out);
            lin(&mut b.fc2, &mut out);
        }
        out.push(&mut self.ln_final.gamma);
        out.push(&mut self.ln_final.beta);
        lin(&mut self.head, &mut out);
        out
    }

    /// Flat copy of every weight in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.walk(&mut |d, _, _| out.extend_from_slice(d));
        out
    }

    /// Overwrites every weight from a flat canonical-order vector.
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.flatten().len();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "backbone expects {expected} values, got {}",
                values.len()
            )));
        }
        let mut at = 0;
        for d in self.slices_mut() {
            d.copy_from_slice(&values[at..at + d.len()]);
            at += d.len();
        }
        Ok(())
    }

    /// SHA-256 over the little-endian bytes of every weight.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        self.walk(&mut |d, _, _| {
            for v in d {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

// ---------------------------------------------------------------------------
// Encoder state
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub frozen: Backbone,
    /// `adapters[layer][projection]` in [`Projection::ALL`] order.
    pub adapters: Vec<Vec<LoraAdapter>>,
    pub plan: RankPlan,
}

/// Builds a randomly initialised backbone with zero-update adapters sized by
/// `plan`.
pub fn build_encoder(cfg: &EncoderConfig, plan: &RankPlan) -> Result<EncoderState> {
    cfg.validate()?;
    let backbone = Backbone::random(cfg);
    EncoderState::with_backbone(cfg.clone(), backbone, plan)
}

impl EncoderState {
    /// Attaches fresh adapters for `plan` to an existing backbone.
    pub fn with_backbone(config: EncoderConfig, frozen: Backbone, plan: &RankPlan) -> Result<Self> {
        config.validate()?;
        if plan.layer_count() != config.layer_count {
            return Err(Error::Shape(format!(
                "plan covers {} layers, encoder has {}",
                plan.layer_count(),
                config.layer_count
            )));
        }
        if plan.dims.d_model != config.d_model {
            return Err(Error::Shape(format!(
                "plan sized for d_model {}, encoder has {}",
                plan.dims.d_model, config.d_model
            )));
        }
        if frozen.blocks.len() != config.layer_count {
            return Err(Error::Shape("backbone depth differs from config".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ ADAPTER_STREAM);
        let d = config.d_model;
        let adapters = plan
            .ranks()
            .iter()
            .map(|&r| {
                Projection::ALL
                    .iter()
                    .map(|_| LoraAdapter::new(d, d, r, &mut rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            frozen,
            adapters,
            plan: plan.clone(),
        })
    }

    pub fn adapter(&self, layer: usize, p: Projection) -> &LoraAdapter {
        &self.adapters[layer][p as usize]
    }

    /// Adapter factor count; equals the closed-form count without extras.
    pub fn trainable_parameter_count(&self) -> u64 {
        self.adapters
            .iter()
            .flatten()
            .map(LoraAdapter::param_count)
            .sum()
    }

    /// Flat copy of every adapter factor (A then B, layer-major, Q/K/V/O).
    pub fn trainable_parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for a in self.adapters.iter().flatten() {
            out.extend_from_slice(a.a.data());
            out.extend_from_slice(a.b.data());
        }
        out
    }

    /// Mutable views of every adapter factor in the same order.
    pub fn trainable_parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for a in self.adapters.iter_mut().flatten() {
            out.push(a.a.data_mut());
            out.push(a.b.data_mut());
        }
        out
    }

    /// Resets every `B` factor to zero, recovering the frozen model.
    pub fn zero_adapters(&mut self) {
        for a in self.adapters.iter_mut().flatten() {
            a.b.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Per-layer mean-pooled activations and final token features (after the
    /// closing layer norm) for a batch of images.
    pub fn forward(&self, images: &[RgbdImage]) -> Result<EncoderOutput> {
        let batch = ImageBatch::new(&self.config, images)?;
        let mut tape = Tape::new();
        let mut unused = Vec::new();
        let mut vars = register_backbone(&self.frozen, &mut tape, false, &mut unused);
        register_adapters(self, &mut vars, &mut tape, false, &mut unused);
        let out = encoder_graph(self, &vars, &mut tape, &batch, true);
        Ok(EncoderOutput {
            activations: pooled_activations(
                &tape,
                &out.block_outputs,
                batch.count,
                self.config.tokens(),
            )?,
            features: tape.value(out.features).clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// One `images × d_model` matrix per layer.
    pub activations: ActivationSet<f64>,
    /// `(images · tokens) × d_model`.
    pub features: Matrix,
}

fn pooled_activations(
    tape: &Tape<f64>,
    block_outputs: &[Var],
    images: usize,
    tokens: usize,
) -> Result<ActivationSet<f64>> {
    let per_layer = block_outputs
        .iter()
        .map(|&v| {
            let x = tape.value(v);
            let mut pooled = Matrix::zeros(images, x.cols());
            for img in 0..images {
                let row = pooled.row_mut(img);
                for t in 0..tokens {
                    for (p, &val) in row.iter_mut().zip(x.row(img * tokens + t)) {
                        *p += val;
                    }
                }
                row.iter_mut().for_each(|p| *p /= tokens as f64);
            }
            pooled
        })
        .collect();
    ActivationSet::new(per_layer, "encoder")
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// Square RGB image (`H × W × 3`, row-major, channels last) with a depth map.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdImage {
    pub size: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
}

impl RgbdImage {
    pub fn new(size: usize, rgb: Vec<f64>, depth: Vec<f64>) -> Result<Self> {
        if rgb.len() != size * size * IN_CHANNELS || depth.len() != size * size {
            return Err(Error::Shape(format!(
                "image of side {size} needs {} rgb and {} depth values",
                size * size * IN_CHANNELS,
                size * size
            )));
        }
        Ok(Self { size, rgb, depth })
    }
}

/// Patchified batch ready for the encoder.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    pub count: usize,
    /// `(images · tokens) × (3 · patch²)`.
    pub rgb: Matrix,
    /// `(images · tokens) × patch²`.
    pub depth: Matrix,
}

impl ImageBatch {
    pub fn new(cfg: &EncoderConfig, images: &[RgbdImage]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Argument("empty image batch".into()));
        }
        let (p, g, s) = (cfg.patch_size, cfg.grid(), cfg.image_size);
        let tokens = cfg.tokens();
        let mut rgb = Matrix::zeros(images.len() * tokens, IN_CHANNELS * p * p);
        let mut depth = Matrix::zeros(images.len() * tokens, p * p);
        for (i, img) in images.iter().enumerate() {
            if img.size != s {
                return Err(Error::Dimension(format!(
                    "image side {} but encoder expects {s}",
                    img.size
                )));
            }
            for ty in 0..g {
                for tx in 0..g {
                    let row = i * tokens + ty * g + tx;
                    for py in 0..p {
                        for px in 0..p {
                            let pix = (ty * p + py) * s + tx * p + px;
                            let k = py * p + px;
                            depth.set(row, k, img.depth[pix]);
                            for c in 0..IN_CHANNELS {
                                rgb.set(row, k * IN_CHANNELS + c, img.rgb[pix * IN_CHANNELS + c]);
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            count: images.len(),
            rgb,
            depth,
        })
    }
}

/// Inverse of patchification for a one-value-per-pixel token matrix.
pub fn tokens_to_grids(cfg: &EncoderConfig, values: &Matrix) -> Vec<Grid<f64>> {
    let (p, g, s) = (cfg.patch_size, cfg.grid(), cfg.image_size);
    let tokens = cfg.tokens();
    (0..values.rows() / tokens)
        .map(|i| {
            let mut grid = Grid::filled(s, s, 0.0);
            for ty in 0..g {
                for tx in 0..g {
                    let row = values.row(i * tokens + ty * g + tx);
                    for py in 0..p {
                        for px in 0..p {
                            grid.set(ty * p + py, tx * p + px, row[py * p + px]);
                        }
                    }
                }
            }
            grid
        })
        .collect()
}

/// Inverse of [`tokens_to_grids`].
pub fn grids_to_tokens(cfg: &EncoderConfig, grids: &[Grid<f64>]) -> Matrix {
    let (p, g) = (cfg.patch_size, cfg.grid());
    let tokens = cfg.tokens();
    let mut out = Matrix::zeros(grids.len() * tokens, p * p);
    for (i, grid) in grids.iter().enumerate() {
        for ty in 0..g {
            for tx in 0..g {
                let row = out.row_mut(i * tokens + ty * g + tx);
                for py in 0..p {
                    for px in 0..p {
                        row[py * p + px] = grid.get(ty * p + py, tx * p + px);
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Segmentation model
// ---------------------------------------------------------------------------

/// Depth stream (three convolution-like stages on the patch grid) and the
/// gated fusion into the RGB features.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFusion {
    /// Per-patch depth pixels to `DEPTH_CHANNELS`.
    pub conv1: Linear,
    /// 3×3 neighbourhood mixing.
    pub conv2: Linear,
    /// 3×3 neighbourhood to `d_model`; zero at start so fusion is inert.
    pub conv3: Linear,
    pub fusion: FusionParams<f64>,
}

impl DepthFusion {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DEPTH_STREAM);
        let d = cfg.d_model;
        let c = DEPTH_CHANNELS;
        let pp = cfg.patch_pixels();
        let conv1 = Linear::random(c, pp, (1.0 / pp as f64).sqrt(), &mut rng);
        let conv2 = Linear::random(c, 9 * c, (1.0 / (9 * c) as f64).sqrt(), &mut rng);
        let conv3 = Linear::zeros(d, 9 * c);
        let w_f = Matrix::from_fn(d, 2 * d, |i, j| if i == j { 1.0 } else { 0.0 });
        let g1 = Linear::random(d, 2 * d, (1.0 / (2 * d) as f64).sqrt(), &mut rng);
        let g2 = Linear::random(d, d, (1.0 / d as f64).sqrt(), &mut rng);
        Self {
            conv1,
            conv2,
            conv3,
            fusion: FusionParams {
                w_f,
                gate_w1: g1.weight,
                gate_b1: g1.bias,
                gate_w2: g2.weight,
                gate_b2: g2.bias,
            },
        }
    }

    pub fn depth_param_count(&self) -> u64 {
        self.conv1.param_count() + self.conv2.param_count() + self.conv3.param_count()
    }

    pub fn fusion_param_count(&self) -> u64 {
        let f = &self.fusion;
        (f.w_f.data().len()
            + f.gate_w1.data().len()
            + f.gate_b1.len()
            + f.gate_w2.data().len()
            + f.gate_b2.len()) as u64
    }

    pub fn param_count(&self) -> u64 {
        self.depth_param_count() + self.fusion_param_count()
    }
}

/// Trainable-parameter count outside the adapters for a given configuration.
pub fn extras_for(cfg: &EncoderConfig, with_depth: bool) -> u64 {
    if with_depth {
        DepthFusion::new(cfg).param_count()
    } else {
        0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Adapter,
    DepthFusion,
}

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Whole backbone trains; adapters are bypassed.
    Pretrain,
    /// Backbone frozen; adapters, depth stream and fusion train.
    Adapt,
}

impl Phase {
    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            Phase::Pretrain => group == ParamGroup::Backbone,
            Phase::Adapt => group != ParamGroup::Backbone,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationModel {
    pub encoder: EncoderState,
    pub depth: Option<DepthFusion>,
}

/// A recorded forward pass.
pub struct Graph {
    pub tape: Tape<f64>,
    /// `(images · tokens) × patch²` pixel logits.
    pub logits: Var,
    pub block_outputs: Vec<Var>,
    /// Trainable leaves in canonical parameter order.
    pub trainable: Vec<Var>,
    pub images: usize,
}

impl SegmentationModel {
    pub fn new(encoder: EncoderState, with_depth: bool) -> Self {
        let depth = with_depth.then(|| DepthFusion::new(&encoder.config));
        Self { encoder, depth }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    /// Adapters plus depth stream and fusion.
    pub fn adapt_param_count(&self) -> u64 {
        self.encoder.trainable_parameter_count()
            + self.depth.as_ref().map_or(0, DepthFusion::param_count)
    }

    /// Closed-form count for the attached plan with this model's extras.
    pub fn closed_form_count(&self) -> u64 {
        count_trainable_params(
            &self.encoder.plan.ranks(),
            self.encoder.config.d_model,
            self.depth.as_ref().map_or(0, DepthFusion::param_count),
        )
    }

    /// Records the forward pass. With `use_adapters = false` the adapters are
    /// bypassed entirely (the frozen model).
    pub fn graph(&self, images: &[RgbdImage], phase: Phase, use_adapters: bool) -> Result<Graph> {
        let batch = ImageBatch::new(self.config(), images)?;
        Ok(self.graph_from_batch(&batch, phase, use_adapters))
    }

    pub fn graph_from_batch(&self, batch: &ImageBatch, phase: Phase, use_adapters: bool) -> Graph {
        let mut tape = Tape::new();
        let mut trainable = Vec::new();
        let mut enc_vars = register_backbone(
            &self.encoder.frozen,
            &mut tape,
            phase == Phase::Pretrain,
            &mut trainable,
        );
        if use_adapters {
            register_adapters(
                &self.encoder,
                &mut enc_vars,
                &mut tape,
                phase == Phase::Adapt,
                &mut trainable,
            );
        }
        let enc = encoder_graph(&self.encoder, &enc_vars, &mut tape, batch, use_adapters);
        let mut features = enc.features;
        if let Some(df) = &self.depth {
            let dv = register_depth(
                df,
                &mut tape,
                phase.trains(ParamGroup::DepthFusion),
                &mut trainable,
            );
            features = depth_fusion_graph(&dv, &mut tape, batch, features, self.config().grid()).0;
        }
        let head = &enc_vars.head;
        let logits = tape.matmul_nt(features, head.w);
        let logits = tape.add_row(logits, head.b);
        Graph {
            tape,
            logits,
            block_outputs: enc.block_outputs,
            trainable,
            images: batch.count,
        }
    }

    /// Pixel logits per image.
    pub fn predict_logits(&self, images: &[RgbdImage]) -> Result<Vec<Grid<f64>>> {
        let g = self.graph(images, Phase::Adapt, true)?;
        Ok(tokens_to_grids(self.config(), g.tape.value(g.logits)))
    }

    /// Per-layer pooled activations of the (adapted) encoder.
    pub fn activations(
        &self,
        images: &[RgbdImage],
        use_adapters: bool,
    ) -> Result<ActivationSet<f64>> {
        let g = self.graph(images, Phase::Adapt, use_adapters)?;
        pooled_activations(&g.tape, &g.block_outputs, g.images, self.config().tokens())
    }

    /// Mutable views of the parameters trained in `phase`, in the same order
    /// as [`Graph::trainable`].
    pub fn trainable_slices_mut(&mut self, phase: Phase) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match phase {
            Phase::Pretrain => out.extend(self.encoder.frozen.slices_mut()),
            Phase::Adapt => {
                out.extend(self.encoder.trainable_parameters_mut());
                if let Some(df) = &mut self.depth {
                    for l in [&mut df.conv1, &mut df.conv2, &mut df.conv3] {
                        out.push(l.weight.data_mut());
                        out.push(&mut l.bias);
                    }
                    let f = &mut df.fusion;
                    out.push(f.w_f.data_mut());
                    out.push(f.gate_w1.data_mut());
                    out.push(&mut f.gate_b1);
                    out.push(f.gate_w2.data_mut());
                    out.push(&mut f.gate_b2);
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

struct LinearVars {
    w: Var,
    b: Var,
}

struct NormVars {
    g: Var,
    b: Var,
}

struct AdapterVars {
    a: Var,
    b: Var,
    scale: f64,
}

struct BlockVars {
    ln1: NormVars,
    proj: [LinearVars; 4],
    adapters: Option<Vec<AdapterVars>>,
    ln2: NormVars,
    fc1: LinearVars,
    fc2: LinearVars,
}

struct EncoderVars {
    patch: LinearVars,
    pos: Var,
    blocks: Vec<BlockVars>,
    ln_final: NormVars,
    head: LinearVars,
}

struct DepthVars {
    conv1: LinearVars,
    conv2: LinearVars,
    conv3: LinearVars,
    w_f: Var,
    g1: LinearVars,
    g2: LinearVars,
}

fn leaf(
    tape: &mut Tape<f64>,
    data: &[f64],
    rows: usize,
    cols: usize,
    train: bool,
    list: &mut Vec<Var>,
) -> Var {
    let v = tape.leaf(Matrix::from_vec_unchecked(rows, cols, data.to_vec()), train);
    if train {
        list.push(v);
    }
    v
}

fn row_leaf(tape: &mut Tape<f64>, data: &[f64], train: bool, list: &mut Vec<Var>) -> Var {
    leaf(tape, data, 1, data.len(), train, list)
}

fn mat_leaf(tape: &mut Tape<f64>, m: &Matrix, train: bool, list: &mut Vec<Var>) -> Var {
    leaf(tape, m.data(), m.rows(), m.cols(), train, list)
}

fn linear_leaf(tape: &mut Tape<f64>, l: &Linear, train: bool, list: &mut Vec<Var>) -> LinearVars {
    LinearVars {
        w: mat_leaf(tape, &l.weight, train, list),
        b: row_leaf(tape, &l.bias, train, list),
    }
}

fn norm_leaf(
    tape: &mut Tape<f64>,
    n: &LayerNormParams,
    train: bool,
    list: &mut Vec<Var>,
) -> NormVars {
    NormVars {
        g: row_leaf(tape, &n.gamma, train, list),
        b: row_leaf(tape, &n.beta, train, list),
    }
}

/// Adapter leaves, appended to `list` (when trainable) in the order of
/// [`EncoderState::trainable_parameters_mut`].
fn register_adapters(
    state: &EncoderState,
    vars: &mut EncoderVars,
    tape: &mut Tape<f64>,
    train: bool,
    list: &mut Vec<Var>,
) {
    for (bv, layer) in vars.blocks.iter_mut().zip(&state.adapters) {
        bv.adapters = Some(
            layer
                .iter()
                .map(|a| AdapterVars {
                    a: mat_leaf(tape, &a.a, train, list),
                    b: mat_leaf(tape, &a.b, train, list),
                    scale: a.scaling(),
                })
                .collect(),
        );
    }
}

/// Registers leaves in the order of [`Backbone::slices_mut`].
fn register_backbone(
    bb: &Backbone,
    tape: &mut Tape<f64>,
    train: bool,
    list: &mut Vec<Var>,
) -> EncoderVars {
    let patch = linear_leaf(tape, &bb.patch_embed, train, list);
    let pos = mat_leaf(tape, &bb.pos, train, list);
    let blocks = bb
        .blocks
        .iter()
        .map(|b| {
            let ln1 = norm_leaf(tape, &b.ln1, train, list);
            let proj = [
                linear_leaf(tape, &b.q, train, list),
                linear_leaf(tape, &b.k, train, list),
                linear_leaf(tape, &b.v, train, list),
                linear_leaf(tape, &b.o, train, list),
            ];
            let ln2 = norm_leaf(tape, &b.ln2, train, list);
            let fc1 = linear_leaf(tape, &b.fc1, train, list);
            let fc2 = linear_leaf(tape, &b.fc2, train, list);
            BlockVars {
                ln1,
                proj,
                adapters: None,
                ln2,
                fc1,
                fc2,
            }
        })
        .collect();
    let ln_final = norm_leaf(tape, &bb.ln_final, train, list);
    let head = linear_leaf(tape, &bb.head, train, list);
    EncoderVars {
        patch,
        pos,
        blocks,
        ln_final,
        head,
    }
}

fn register_depth(
    df: &DepthFusion,
    tape: &mut Tape<f64>,
    train: bool,
    list: &mut Vec<Var>,
) -> DepthVars {
    let conv1 = linear_leaf(tape, &df.conv1, train, list);
    let conv2 = linear_leaf(tape, &df.conv2, train, list);
    let conv3 = linear_leaf(tape, &df.conv3, train, list);
    let f = &df.fusion;
    let w_f = mat_leaf(tape, &f.w_f, train, list);
    let g1 = LinearVars {
        w: mat_leaf(tape, &f.gate_w1, train, list),
        b: row_leaf(tape, &f.gate_b1, train, list),
    };
    let g2 = LinearVars {
        w: mat_leaf(tape, &f.gate_w2, train, list),
        b: row_leaf(tape, &f.gate_b2, train, list),
    };
    DepthVars {
        conv1,
        conv2,
        conv3,
        w_f,
        g1,
        g2,
    }
}

fn affine(tape: &mut Tape<f64>, x: Var, l: &LinearVars) -> Var {
    let y = tape.matmul_nt(x, l.w);
    tape.add_row(y, l.b)
}

struct EncoderGraph {
    block_outputs: Vec<Var>,
    features: Var,
}

fn encoder_graph(
    state: &EncoderState,
    vars: &EncoderVars,
    tape: &mut Tape<f64>,
    batch: &ImageBatch,
    use_adapters: bool,
) -> EncoderGraph {
    let cfg = &state.config;
    let input = tape.leaf(batch.rgb.clone(), false);
    let x = affine(tape, input, &vars.patch);
    let mut x = tape.add_blocks(x, vars.pos);
    let mut block_outputs = Vec::with_capacity(vars.blocks.len());
    for bv in &vars.blocks {
        let h = tape.layer_norm(x, bv.ln1.g, bv.ln1.b);
        let adapters = bv.adapters.as_ref().filter(|_| use_adapters);
        let proj = |tape: &mut Tape<f64>, input: Var, i: usize| {
            let y = affine(tape, input, &bv.proj[i]);
            match adapters {
                Some(ad) => {
                    let t = tape.matmul_nt(input, ad[i].a);
                    let u = tape.matmul_nt(t, ad[i].b);
                    let u = tape.scale(u, ad[i].scale);
                    tape.add(y, u)
                }
                None => y,
            }
        };
        let q = proj(tape, h, 0);
        let k = proj(tape, h, 1);
        let v = proj(tape, h, 2);
        let att = tape.attention(q, k, v, cfg.tokens(), cfg.head_count);
        let o = proj(tape, att, 3);
        x = tape.add(x, o);
        let h2 = tape.layer_norm(x, bv.ln2.g, bv.ln2.b);
        let m = affine(tape, h2, &bv.fc1);
        let m = tape.gelu(m);
        let m = affine(tape, m, &bv.fc2);
        x = tape.add(x, m);
        block_outputs.push(x);
    }
    let features = tape.layer_norm(x, vars.ln_final.g, vars.ln_final.b);
    EncoderGraph {
        block_outputs,
        features,
    }
}

/// Returns the fused features and the depth features `F_d`.
fn depth_fusion_graph(
    dv: &DepthVars,
    tape: &mut Tape<f64>,
    batch: &ImageBatch,
    f_rgb: Var,
    grid: usize,
) -> (Var, Var) {
    let depth_in = tape.leaf(batch.depth.clone(), false);
    let d1 = affine(tape, depth_in, &dv.conv1);
    let d1 = tape.gelu(d1);
    let u1 = tape.unfold3x3(d1, grid, grid);
    let d2 = affine(tape, u1, &dv.conv2);
    let d2 = tape.gelu(d2);
    let u2 = tape.unfold3x3(d2, grid, grid);
    let f_d = affine(tape, u2, &dv.conv3);
    let cat = tape.concat_cols(f_rgb, f_d);
    let h = affine(tape, cat, &dv.g1);
    let h = tape.gelu(h);
    let g = affine(tape, h, &dv.g2);
    let g = tape.sigmoid(g);
    let base = tape.matmul_nt(cat, dv.w_f);
    let gated = tape.mul(g, f_d);
    (tape.add(base, gated), f_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{AdapterDims, RegimeRanks};
    use crate::cka::Thresholds;
    use crate::fusion_loss::fuse;

    fn plan(ranks: &[usize], d: usize) -> RankPlan {
        RankPlan::from_ranks(
            ranks,
            Thresholds::default(),
            RegimeRanks::new(8, 4, 2).unwrap(),
            AdapterDims {
                d_model: d,
                extras: 0,
            },
        )
        .unwrap()
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            layer_count: 2,
            d_model: 8,
            head_count: 2,
            patch_size: 2,
            image_size: 6,
            seed: 3,
        }
    }

    fn images(cfg: &EncoderConfig, n: usize, seed: u64) -> Vec<RgbdImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = rand_distr::Uniform::new(0.0, 1.0).unwrap();
        let s = cfg.image_size;
        (0..n)
            .map(|_| {
                let rgb = (0..s * s * 3).map(|_| u.sample(&mut rng)).collect();
                let depth = (0..s * s).map(|_| u.sample(&mut rng)).collect();
                RgbdImage::new(s, rgb, depth).unwrap()
            })
            .collect()
    }

    fn randomise_adapters(state: &mut EncoderState, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 0.3).unwrap();
        for a in state.adapters.iter_mut().flatten() {
            a.b.data_mut()
                .iter_mut()
                .for_each(|v| *v = n.sample(&mut rng));
        }
    }

    #[test]
    fn toy_adapter_count() {
        let cfg = EncoderConfig::default();
        let st = build_encoder(&cfg, &plan(&[8, 8, 8, 4, 4, 4, 2, 2], 32)).unwrap();
        assert_eq!(st.trainable_parameter_count(), 10_240);
        assert_eq!(st.trainable_parameters().len(), 10_240);
    }

    #[test]
    fn minimal_adapter_count() {
        let cfg = EncoderConfig {
            layer_count: 1,
            d_model: 2,
            head_count: 1,
            patch_size: 1,
            image_size: 2,
            seed: 0,
        };
        let st = build_encoder(&cfg, &plan(&[1], 2)).unwrap();
        assert_eq!(st.trainable_parameter_count(), 16);
    }

    #[test]
    fn uniform_rank_closed_form() {
        let cfg = EncoderConfig::default();
        for r in [1, 3, 6] {
            let st = build_encoder(&cfg, &plan(&[r; 8], 32)).unwrap();
            assert_eq!(st.trainable_parameter_count(), (4 * 2 * 32 * r * 8) as u64);
        }
    }

    #[test]
    fn builds_are_deterministic() {
        let cfg = EncoderConfig::default();
        let p = plan(&[2; 8], 32);
        let a = build_encoder(&cfg, &p).unwrap();
        let b = build_encoder(&cfg, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frozen.hash(), b.frozen.hash());
    }

    #[test]
    fn plan_mismatch_is_shape_error() {
        let cfg = EncoderConfig::default();
        assert!(matches!(
            build_encoder(&cfg, &plan(&[2; 7], 32)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            build_encoder(&cfg, &plan(&[2; 8], 16)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn adapted_projection_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 1.0).unwrap();
        let w = Matrix::from_fn(3, 4, |_, _| n.sample(&mut rng));
        let x = Matrix::from_fn(5, 4, |_, _| n.sample(&mut rng));
        let mut ad = LoraAdapter::new(4, 3, 2, &mut rng).unwrap();
        assert_eq!(
            adapted_projection(&w, &ad, &x).unwrap(),
            x.matmul_nt(&w).unwrap()
        );

        ad.b = Matrix::from_fn(3, 2, |_, _| n.sample(&mut rng));
        let dense = w.add(&ad.delta().unwrap()).unwrap();
        let expect = x.matmul_nt(&dense).unwrap();
        let got = adapted_projection(&w, &ad, &x).unwrap();
        assert!(got.sub(&expect).unwrap().max_abs() < 1e-12);

        let id = LoraAdapter {
            a: Matrix::identity(3),
            b: Matrix::identity(3),
            rank: 3,
            alpha: 3.0,
        };
        let x3 = Matrix::from_fn(4, 3, |_, _| n.sample(&mut rng));
        assert_eq!(
            adapted_projection(&Matrix::zeros(3, 3), &id, &x3).unwrap(),
            x3
        );

        let bad = LoraAdapter {
            a: Matrix::zeros(2, 4),
            b: Matrix::zeros(3, 3),
            rank: 2,
            alpha: 4.0,
        };
        assert!(matches!(
            adapted_projection(&w, &bad, &x),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_adapters_match_frozen_exactly() {
        let cfg = EncoderConfig::default();
        let model = SegmentationModel::new(
            build_encoder(&cfg, &plan(&[8, 8, 8, 4, 4, 4, 2, 2], 32)).unwrap(),
            true,
        );
        let imgs = images(&cfg, 2, 5);
        let adapted = model.graph(&imgs, Phase::Adapt, true).unwrap();
        let frozen = model.graph(&imgs, Phase::Adapt, false).unwrap();
        assert_eq!(
            adapted.tape.value(adapted.logits),
            frozen.tape.value(frozen.logits)
        );
        // The zero-initialised depth stream leaves the RGB path untouched.
        let rgb_only = SegmentationModel::new(model.encoder.clone(), false);
        let r = rgb_only.graph(&imgs, Phase::Adapt, false).unwrap();
        assert_eq!(r.tape.value(r.logits), frozen.tape.value(frozen.logits));
    }

    #[test]
    fn batch_independence_and_shapes() {
        let cfg = tiny_cfg();
        let mut st = build_encoder(&cfg, &plan(&[2, 1], 8)).unwrap();
        randomise_adapters(&mut st, 9);
        let imgs = images(&cfg, 4, 2);
        let all = st.forward(&imgs).unwrap();
        assert_eq!(all.activations.layer_count(), 2);
        for m in &all.activations.per_layer {
            assert_eq!(m.shape(), (4, 8));
        }
        assert_eq!(all.features.shape(), (4 * cfg.tokens(), 8));
        let one = st.forward(&imgs[2..3]).unwrap();
        for (l, m) in one.activations.per_layer.iter().enumerate() {
            for j in 0..8 {
                assert!((m.get(0, j) - all.activations.per_layer[l].get(2, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn wrong_image_size_rejected() {
        let cfg = tiny_cfg();
        let st = build_encoder(&cfg, &plan(&[1, 1], 8)).unwrap();
        let other = EncoderConfig {
            image_size: 8,
            ..tiny_cfg()
        };
        assert!(matches!(
            st.forward(&images(&other, 1, 1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn patchify_round_trip() {
        let cfg = tiny_cfg();
        let g = Grid::new(6, 6, (0..36).map(|v| v as f64).collect()).unwrap();
        let neg = Grid::new(6, 6, g.data.iter().map(|v| -v).collect()).unwrap();
        let t = grids_to_tokens(&cfg, &[g.clone(), neg.clone()]);
        let back = tokens_to_grids(&cfg, &t);
        assert_eq!(back, vec![g, neg]);
    }

    #[test]
    fn trainable_order_matches_graph() {
        let cfg = tiny_cfg();
        let mut model =
            SegmentationModel::new(build_encoder(&cfg, &plan(&[2, 1], 8)).unwrap(), true);
        let imgs = images(&cfg, 1, 1);
        for phase in [Phase::Pretrain, Phase::Adapt] {
            let g = model.graph(&imgs, phase, phase == Phase::Adapt).unwrap();
            let shapes: Vec<usize> = g
                .trainable
                .iter()
                .map(|&v| g.tape.value(v).data().len())
                .collect();
            let slices: Vec<usize> = model
                .trainable_slices_mut(phase)
                .iter()
                .map(|s| s.len())
                .collect();
            assert_eq!(shapes, slices, "{phase:?}");
        }
        assert_eq!(model.adapt_param_count(), model.closed_form_count());
    }

    #[test]
    fn depth_fusion_graph_matches_reference() {
        let cfg = tiny_cfg();
        let mut model =
            SegmentationModel::new(build_encoder(&cfg, &plan(&[1, 1], 8)).unwrap(), true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Normal::new(0.0, 0.5).unwrap();
        let df = model.depth.as_mut().unwrap();
        df.conv3.weight = Matrix::from_fn(8, 9 * DEPTH_CHANNELS, |_, _| n.sample(&mut rng));
        df.fusion.w_f = Matrix::from_fn(8, 16, |_, _| n.sample(&mut rng));
        let imgs = images(&cfg, 2, 8);
        let g = model.graph(&imgs, Phase::Adapt, true).unwrap();
        // Recover F_rgb and F_d from the tape and compare against the
        // stand-alone fusion function.
        let enc = model.encoder.forward(&imgs).unwrap();
        let batch = ImageBatch::new(&cfg, &imgs).unwrap();
        let df = model.depth.as_ref().unwrap();
        let mut t = Tape::new();
        let mut l = Vec::new();
        let dv = register_depth(df, &mut t, false, &mut l);
        let f_rgb = t.leaf(enc.features.clone(), false);
        let (fused, f_d) = depth_fusion_graph(&dv, &mut t, &batch, f_rgb, cfg.grid());
        let f_d = t.value(f_d).clone();
        let reference = fuse(&enc.features, &f_d, &df.fusion).unwrap();
        assert!(t.value(fused).sub(&reference).unwrap().max_abs() < 1e-12);
        let head = &model.encoder.frozen.head;
        let mut logits = reference.matmul_nt(&head.weight).unwrap();
        for i in 0..logits.rows() {
            for (v, b) in logits.row_mut(i).iter_mut().zip(&head.bias) {
                *v += b;
            }
        }
        assert!(g.tape.value(g.logits).sub(&logits).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn backbone_flat_round_trip() {
        let cfg = tiny_cfg();
        let st = build_encoder(&cfg, &plan(&[1, 1], 8)).unwrap();
        let flat = st.frozen.flatten();
        let mut other = Backbone::random(&EncoderConfig {
            seed: 99,
            ..tiny_cfg()
        });
        assert_ne!(other, st.frozen);
        other.load_flat(&flat).unwrap();
        assert_eq!(other, st.frozen);
        assert!(other.load_flat(&flat[1..]).is_err());
    }
}
