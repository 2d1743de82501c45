//! Synthetic RGB-D segmentation scenes with a controllable RGB domain shift.
//!
//! Scene geometry (shapes, colours, depth) is drawn from one random stream and
//! the target-domain corruption from another, so a Source and a Target
//! dataset generated with the same seed show the same scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{RgbdImage, IN_CHANNELS};
use crate::error::{Error, Result};
use crate::fusion_loss::Grid;

const CORRUPTION_STREAM: u64 = 0x434f_5252_5550_5421;
const TARGET_SENSOR_SEED: u64 = 0x5345_4e53_4f52;
/// Blend weight of a transparent object's own colour over the background.
pub const TRANSPARENT_ALPHA: f64 = 0.35;
pub const DEPTH_NOISE_STD: f64 = 0.04;
/// Depth value used when the sensor is withheld.
pub const BLANK_DEPTH: f64 = 1.0;
/// Depth is reported on blocks of this many pixels per side.
pub const DEPTH_BLOCK: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub noise_std: f64,
    pub blur_radius: usize,
    /// Contrast is scaled by a factor drawn from `[1 − jitter, 1]`.
    pub contrast_jitter: f64,
}

impl Corruption {
    pub const NONE: Self = Self {
        noise_std: 0.0,
        blur_radius: 0,
        contrast_jitter: 0.0,
    };

    pub fn is_zero(&self) -> bool {
        self.noise_std == 0.0 && self.blur_radius == 0 && self.contrast_jitter == 0.0
    }

    pub fn is_positive(&self) -> bool {
        self.noise_std > 0.0 && self.blur_radius > 0 && self.contrast_jitter > 0.0 && self.contrast_jitter <= 1.0
    }
}

impl Default for Corruption {
    fn default() -> Self {
        Self {
            noise_std: 0.05,
            blur_radius: 1,
            contrast_jitter: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub domain: Domain,
    pub corruption: Corruption,
    pub includes_transparent_analog: bool,
    /// Probability that an object is rendered transparent.
    pub transparent_probability: f64,
    pub seed: u64,
}

impl SyntheticTaskConfig {
    pub fn source(seed: u64) -> Self {
        Self {
            image_size: 32,
            min_objects: 1,
            max_objects: 3,
            domain: Domain::Source,
            corruption: Corruption::NONE,
            includes_transparent_analog: true,
            transparent_probability: 0.2,
            seed,
        }
    }

    pub fn target(seed: u64) -> Self {
        Self {
            domain: Domain::Target,
            corruption: Corruption::default(),
            ..Self::source(seed)
        }
    }

    /// Same scenes rendered in the other domain.
    pub fn with_domain(&self, domain: Domain, corruption: Corruption) -> Self {
        Self {
            domain,
            corruption,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config("image size must be at least 8".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range {}..={} is invalid",
                self.min_objects, self.max_objects
            )));
        }
        match self.domain {
            Domain::Source if !self.corruption.is_zero() => {
                Err(Error::Config("source domain must carry no corruption".into()))
            }
            Domain::Target if !self.corruption.is_positive() => Err(Error::Config(
                "target domain needs positive noise, blur and contrast jitter (at most 1)".into(),
            )),
            _ if !(0.0..=1.0).contains(&self.transparent_probability) => {
                Err(Error::Config("transparent probability must lie in [0, 1]".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbdImage,
    /// 1 on object pixels.
    pub mask: Grid<u8>,
    /// At least one object is a transparent analog.
    pub transparent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub domain: Domain,
    pub corruption: Corruption,
    pub seed: u64,
    pub count: usize,
    /// Indices of samples containing a transparent analog.
    pub transparent_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> Vec<RgbdImage> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    /// Subset by index, keeping metadata consistent.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let samples: Vec<Sample> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let transparent_indices = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.transparent)
            .map(|(i, _)| i)
            .collect();
        Dataset {
            meta: DatasetMeta {
                count: samples.len(),
                transparent_indices,
                ..self.meta.clone()
            },
            samples,
        }
    }

    /// Same scenes with the depth channel replaced by a constant plane, so a
    /// depth stream sees no scene information.
    pub fn with_blank_depth(&self) -> Dataset {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.image.depth.fill(BLANK_DEPTH);
        }
        out
    }

    /// Photometric copy: `corruption` applied to every RGB image with a
    /// stream seeded by `seed`. Geometry, depth and masks are unchanged.
    pub fn augmented(&self, corruption: &Corruption, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for s in &mut out.samples {
            s.image.rgb = corrupt(&s.image.rgb, s.image.size, corruption, &mut rng);
        }
        out
    }

    /// Canonical bytes (little-endian floats and mask bytes) for hashing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in &self.samples {
            for v in s.image.rgb.iter().chain(&s.image.depth) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&s.mask.data);
            out.push(s.transparent as u8);
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            Shape::Ellipse { cy, cx, ry, rx } => ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0,
        }
    }
}

struct Object {
    shape: Shape,
    colour: [f64; 3],
    depth: f64,
    transparent: bool,
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

/// Draws the scene layout and renders clean RGB, mask and depth.
fn render_scene(cfg: &SyntheticTaskConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, Grid<u8>, Vec<f64>, bool) {
    let s = cfg.image_size;
    let sf = s as f64;
    let bg = [rng.random_range(0.25..0.75), rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)];
    let grad = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let tex_freq = rng.random_range(1.0..3.0);
    let tex_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let plane = (rng.random_range(0.9..1.1), rng.random_range(-0.1..0.1));

    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let objects: Vec<Object> = (0..count)
        .map(|_| {
            let kind = rng.random_range(0..3);
            let margin = sf * 0.15;
            let cy = rng.random_range(margin..sf - margin);
            let cx = rng.random_range(margin..sf - margin);
            let shape = match kind {
                0 => Shape::Disc {
                    cy,
                    cx,
                    r: rng.random_range(sf * 0.12..sf * 0.26),
                },
                1 => {
                    let hh = rng.random_range(sf * 0.1..sf * 0.25);
                    let hw = rng.random_range(sf * 0.1..sf * 0.25);
                    Shape::Rect {
                        y0: cy - hh,
                        x0: cx - hw,
                        y1: cy + hh,
                        x1: cx + hw,
                    }
                }
                _ => Shape::Ellipse {
                    cy,
                    cx,
                    ry: rng.random_range(sf * 0.08..sf * 0.25),
                    rx: rng.random_range(sf * 0.08..sf * 0.25),
                },
            };
            // Keep a visible colour difference from the background.
            let mut colour = random_colour(rng);
            let dist: f64 = colour.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum();
            if dist < 0.6 {
                for (c, b) in colour.iter_mut().zip(&bg) {
                    *c = if *b > 0.5 { (*b - 0.45).max(0.0) } else { (*b + 0.45).min(1.0) };
                }
            }
            Object {
                shape,
                colour,
                depth: rng.random_range(0.45..0.75),
                transparent: cfg.includes_transparent_analog && rng.random_bool(cfg.transparent_probability),
            }
        })
        .collect();

    let mut rgb = vec![0.0; s * s * IN_CHANNELS];
    let mut depth = vec![0.0; s * s];
    let mut mask = Grid::filled(s, s, 0u8);
    for y in 0..s {
        for x in 0..s {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let tex = 0.06 * (tex_freq * (xf + yf) / sf * std::f64::consts::TAU + tex_phase).sin();
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = bg[c] + grad[0] * (yf / sf - 0.5) + grad[1] * (xf / sf - 0.5) + tex;
            }
            let mut d = plane.0 + plane.1 * (yf / sf - 0.5);
            for o in &objects {
                if o.shape.contains(yf, xf) {
                    mask.set(y, x, 1);
                    d = d.min(o.depth);
                    let a = if o.transparent { TRANSPARENT_ALPHA } else { 1.0 };
                    for c in 0..3 {
                        px[c] = (1.0 - a) * px[c] + a * o.colour[c];
                    }
                }
            }
            rgb[(y * s + x) * IN_CHANNELS..(y * s + x + 1) * IN_CHANNELS].copy_from_slice(&px);
            depth[y * s + x] = d;
        }
    }
    // Coarse, noisy depth sensor.
    let noise = Normal::new(0.0, DEPTH_NOISE_STD).expect("positive std");
    for by in (0..s).step_by(DEPTH_BLOCK) {
        for bx in (0..s).step_by(DEPTH_BLOCK) {
            let cells: Vec<usize> = (by..(by + DEPTH_BLOCK).min(s))
                .flat_map(|y| (bx..(bx + DEPTH_BLOCK).min(s)).map(move |x| y * s + x))
                .collect();
            let mean = cells.iter().map(|&i| depth[i]).sum::<f64>() / cells.len() as f64;
            let v = mean + noise.sample(rng);
            for i in cells {
                depth[i] = v;
            }
        }
    }
    let transparent = objects.iter().any(|o| o.transparent);
    (rgb, mask, depth, transparent)
}

fn box_blur(rgb: &[f64], s: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return rgb.to_vec();
    }
    let mut out = vec![0.0; rgb.len()];
    let r = radius as isize;
    for y in 0..s as isize {
        for x in 0..s as isize {
            for c in 0..IN_CHANNELS {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && yy < s as isize && xx < s as isize {
                            acc += rgb[(yy as usize * s + xx as usize) * IN_CHANNELS + c];
                            n += 1.0;
                        }
                    }
                }
                out[(y as usize * s + x as usize) * IN_CHANNELS + c] = acc / n;
            }
        }
    }
    out
}

/// Camera model. Every capture draws a per-channel gain in
/// `[1 − jitter, 1]` about a random anchor (which also casts the colour),
/// blurs, adds the sensor's fixed per-pixel offset pattern if it has one,
/// then adds fresh Gaussian noise.
struct Sensor {
    pattern: Option<Vec<f64>>,
}

impl Sensor {
    fn with_pattern(c: &Corruption, s: usize, rng: &mut ChaCha8Rng) -> Self {
        let pattern = (c.noise_std > 0.0).then(|| {
            let noise = Normal::new(0.0, c.noise_std).expect("positive std");
            (0..s * s * IN_CHANNELS).map(|_| noise.sample(rng)).collect()
        });
        Self { pattern }
    }

    fn capture(&self, rgb: &[f64], s: usize, c: &Corruption, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let gains: [f64; IN_CHANNELS] = std::array::from_fn(|_| 1.0 - c.contrast_jitter * rng.random_range(0.0..1.0));
        let anchors: [f64; IN_CHANNELS] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let scaled: Vec<f64> = rgb
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = i % IN_CHANNELS;
                anchors[ch] + gains[ch] * (v - anchors[ch])
            })
            .collect();
        let mut out = box_blur(&scaled, s, c.blur_radius);
        if let Some(p) = &self.pattern {
            out.iter_mut().zip(p).for_each(|(v, d)| *v += d);
        }
        if c.noise_std > 0.0 {
            let noise = Normal::new(0.0, c.noise_std).expect("positive std");
            out.iter_mut().for_each(|v| *v += noise.sample(rng));
        }
        out
    }
}

/// Capture without a fixed pattern: used for augmentation.
fn corrupt(rgb: &[f64], s: usize, c: &Corruption, rng: &mut ChaCha8Rng) -> Vec<f64> {
    Sensor { pattern: None }.capture(rgb, s, c, rng)
}

/// Deterministic dataset of `n` scenes.
pub fn generate_dataset(cfg: &SyntheticTaskConfig, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Argument("dataset size must be >= 1".into()));
    }
    let mut scene_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut corruption_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ CORRUPTION_STREAM);
    // Every Target dataset is captured by the same sensor.
    let sensor = Sensor::with_pattern(
        &cfg.corruption,
        cfg.image_size,
        &mut ChaCha8Rng::seed_from_u64(TARGET_SENSOR_SEED),
    );
    let s = cfg.image_size;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let (rgb, mask, depth, transparent) = render_scene(cfg, &mut scene_rng);
        let rgb = match cfg.domain {
            Domain::Source => rgb,
            Domain::Target => sensor.capture(&rgb, s, &cfg.corruption, &mut corruption_rng),
        };
        samples.push(Sample {
            image: RgbdImage::new(s, rgb, depth)?,
            mask,
            transparent,
        });
    }
    let transparent_indices = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.transparent)
        .map(|(i, _)| i)
        .collect();
    Ok(Dataset {
        samples,
        meta: DatasetMeta {
            domain: cfg.domain,
            corruption: cfg.corruption,
            seed: cfg.seed,
            count: n,
            transparent_indices,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SyntheticTaskConfig::target(7);
        let a = generate_dataset(&cfg, 6).unwrap();
        let b = generate_dataset(&cfg, 6).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_dataset(&SyntheticTaskConfig::target(8), 6).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn source_metadata_has_zero_corruption() {
        let d = generate_dataset(&SyntheticTaskConfig::source(1), 3).unwrap();
        assert_eq!(d.meta.domain, Domain::Source);
        assert!(d.meta.corruption.is_zero());
    }

    #[test]
    fn domains_share_geometry() {
        let src = generate_dataset(&SyntheticTaskConfig::source(3), 5).unwrap();
        let tgt = generate_dataset(&SyntheticTaskConfig::target(3), 5).unwrap();
        for (a, b) in src.samples.iter().zip(&tgt.samples) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.image.depth, b.image.depth);
            assert_eq!(a.transparent, b.transparent);
            assert_ne!(a.image.rgb, b.image.rgb);
        }
    }

    #[test]
    fn masks_are_binary_and_nonempty() {
        let d = generate_dataset(&SyntheticTaskConfig::source(5), 20).unwrap();
        for s in &d.samples {
            assert!(s.mask.data.iter().all(|&v| v <= 1));
            assert!(s.mask.data.iter().any(|&v| v == 1));
        }
        assert!(!d.meta.transparent_indices.is_empty());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = SyntheticTaskConfig::source(1);
        c.corruption.noise_std = 0.1;
        assert!(generate_dataset(&c, 1).is_err());
        let mut t = SyntheticTaskConfig::target(1);
        t.corruption.blur_radius = 0;
        assert!(generate_dataset(&t, 1).is_err());
        assert!(generate_dataset(&SyntheticTaskConfig::source(1), 0).is_err());
    }

    #[test]
    fn blur_preserves_constant_images() {
        let rgb = vec![0.3; 8 * 8 * 3];
        let b = box_blur(&rgb, 8, 2);
        assert!(b.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }
}
