//! Linear centered kernel alignment between activation matrices.
//!
//! Inputs are `n × p` with one row per sample. Columns are centered first and
//! the biased HSIC estimator `trace(K_X K_Y) / (n-1)²` is evaluated through
//! the feature-space identity `trace(X Xᵀ Y Yᵀ) = ‖Yᵀ X‖_F²`, which never forms
//! the `n × n` Gram matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{center_columns, DenseMatrix, Scalar};

/// Numeric slack before `rho` is clamped into `[0, 1]`.
pub const RHO_SLACK: f64 = 1e-9;

pub const DEFAULT_LOWER_THRESHOLD: f64 = 0.5;
pub const DEFAULT_UPPER_THRESHOLD: f64 = 0.7;

/// Per-layer activations for one domain; `per_layer[0]` is layer 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet<T> {
    pub per_layer: Vec<DenseMatrix<T>>,
    pub source_tag: String,
}

impl<T: Scalar> ActivationSet<T> {
    pub fn new(per_layer: Vec<DenseMatrix<T>>, source_tag: impl Into<String>) -> Result<Self> {
        if let Some(first) = per_layer.first() {
            let n = first.rows();
            if let Some(pos) = per_layer.iter().position(|m| m.rows() != n) {
                return Err(Error::Shape(format!(
                    "layer {} has {} samples, layer 1 has {n}",
                    pos + 1,
                    per_layer[pos].rows()
                )));
            }
        }
        Ok(Self {
            per_layer,
            source_tag: source_tag.into(),
        })
    }

    pub fn layer_count(&self) -> usize {
        self.per_layer.len()
    }

    pub fn sample_count(&self) -> usize {
        self.per_layer.first().map_or(0, DenseMatrix::rows)
    }

    /// Keeps only the listed sample rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let per_layer = self
            .per_layer
            .iter()
            .map(|m| {
                let mut data = Vec::with_capacity(rows.len() * m.cols());
                for &r in rows {
                    data.extend_from_slice(m.row(r));
                }
                DenseMatrix::from_vec_unchecked(rows.len(), m.cols(), data)
            })
            .collect();
        Self {
            per_layer,
            source_tag: self.source_tag.clone(),
        }
    }
}

/// HSIC terms and the resulting similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CkaBreakdown<T> {
    pub hsic_xy: T,
    pub hsic_xx: T,
    pub hsic_yy: T,
    pub rho: T,
}

pub fn linear_cka<T: Scalar>(x: &DenseMatrix<T>, y: &DenseMatrix<T>) -> Result<CkaBreakdown<T>> {
    let n = x.rows();
    if n != y.rows() {
        return Err(Error::Shape(format!(
            "sample counts differ: {} vs {}",
            n,
            y.rows()
        )));
    }
    if n < 2 {
        return Err(Error::Argument(
            "linear CKA needs at least 2 samples".into(),
        ));
    }
    let xc = center_columns(x)?;
    let yc = center_columns(y)?;
    let scale = T::from_count((n - 1) * (n - 1));

    let hsic_xy = xc.matmul_tn(&yc)?.frobenius_norm_sq() / scale;
    let hsic_xx = xc.matmul_tn(&xc)?.frobenius_norm_sq() / scale;
    let hsic_yy = yc.matmul_tn(&yc)?.frobenius_norm_sq() / scale;
    if hsic_xx <= T::zero() || hsic_yy <= T::zero() {
        return Err(Error::Degenerate(
            "input is constant after centering (zero self-HSIC)".into(),
        ));
    }
    let raw = hsic_xy / (hsic_xx * hsic_yy).sqrt();
    let slack = T::lit(RHO_SLACK);
    if raw < -slack || raw > T::one() + slack || !raw.is_finite() {
        return Err(Error::Degenerate(format!("CKA {raw} outside [0, 1]")));
    }
    Ok(CkaBreakdown {
        hsic_xy,
        hsic_xx,
        hsic_yy,
        rho: raw.max(T::zero()).min(T::one()),
    })
}

/// Per-layer similarity, index 0 is layer 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaProfile {
    pub rho_per_layer: Vec<f64>,
}

impl CkaProfile {
    pub fn new(rho_per_layer: Vec<f64>) -> Result<Self> {
        if let Some(bad) = rho_per_layer
            .iter()
            .find(|r| !(-RHO_SLACK..=1.0 + RHO_SLACK).contains(*r))
        {
            return Err(Error::Argument(format!("rho {bad} outside [0, 1]")));
        }
        Ok(Self { rho_per_layer })
    }

    pub fn layer_count(&self) -> usize {
        self.rho_per_layer.len()
    }
}

pub fn profile<T: Scalar>(
    source: &ActivationSet<T>,
    target: &ActivationSet<T>,
) -> Result<CkaProfile> {
    if source.layer_count() != target.layer_count() {
        return Err(Error::Shape(format!(
            "layer counts differ: {} vs {}",
            source.layer_count(),
            target.layer_count()
        )));
    }
    let rho = source
        .per_layer
        .iter()
        .zip(&target.per_layer)
        .map(|(s, t)| linear_cka(s, t).map(|b| b.rho.to_f64_lossy()))
        .collect::<Result<Vec<_>>>()?;
    Ok(CkaProfile { rho_per_layer: rho })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileStats {
    pub mean_per_layer: Vec<f64>,
    /// Sample standard deviation (n−1 denominator).
    pub std_per_layer: Vec<f64>,
    pub seed_count: usize,
}

pub fn profile_stats(profiles: &[CkaProfile]) -> Result<ProfileStats> {
    if profiles.len() < 2 {
        return Err(Error::InsufficientData(
            "profile statistics need at least 2 profiles".into(),
        ));
    }
    let layers = profiles[0].layer_count();
    if profiles.iter().any(|p| p.layer_count() != layers) {
        return Err(Error::Shape("profiles have different lengths".into()));
    }
    let k = profiles.len() as f64;
    let mut mean = vec![0.0; layers];
    let mut std = vec![0.0; layers];
    for l in 0..layers {
        // Shift by the first value so identical profiles give exactly zero.
        let shift = profiles[0].rho_per_layer[l];
        let m = profiles
            .iter()
            .map(|p| p.rho_per_layer[l] - shift)
            .sum::<f64>()
            / k;
        let ss = profiles
            .iter()
            .map(|p| (p.rho_per_layer[l] - shift - m).powi(2))
            .sum::<f64>();
        mean[l] = shift + m;
        std[l] = (ss / (k - 1.0)).sqrt();
    }
    Ok(ProfileStats {
        mean_per_layer: mean,
        std_per_layer: std,
        seed_count: profiles.len(),
    })
}

/// Profiles over `k` bootstrap resamples of the paired sample rows, drawn
/// with replacement from a generator seeded by `seed`.
pub fn bootstrap_profiles<T: Scalar>(
    source: &ActivationSet<T>,
    target: &ActivationSet<T>,
    k: usize,
    seed: u64,
) -> Result<Vec<CkaProfile>> {
    let n = source.sample_count();
    if n != target.sample_count() {
        return Err(Error::Shape(format!(
            "sample counts differ: {n} vs {}",
            target.sample_count()
        )));
    }
    if k == 0 {
        return Err(Error::Argument("at least one resample is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            profile(&source.select_rows(&rows), &target.select_rows(&rows))
        })
        .collect()
}

/// Transferability regime of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Shallow,
    Middle,
    Deep,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Shallow, Regime::Middle, Regime::Deep];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Shallow => "shallow",
            Regime::Middle => "middle",
            Regime::Deep => "deep",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(Regime::Shallow),
            "middle" => Ok(Regime::Middle),
            "deep" => Ok(Regime::Deep),
            other => Err(Error::Argument(format!("unknown regime {other:?}"))),
        }
    }
}

/// `(lower, upper)` CKA thresholds separating the three regimes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub lower: f64,
    pub upper: f64,
}

impl Thresholds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lower) || !(0.0..=1.0).contains(&upper) || lower >= upper {
            return Err(Error::Argument(format!(
                "thresholds must satisfy 0 <= lower < upper <= 1, got ({lower}, {upper})"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn classify(&self, rho: f64) -> Regime {
        if rho < self.lower {
            Regime::Shallow
        } else if rho < self.upper {
            Regime::Middle
        } else {
            Regime::Deep
        }
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            lower: DEFAULT_LOWER_THRESHOLD,
            upper: DEFAULT_UPPER_THRESHOLD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegimeLabel {
    pub label: Regime,
    pub lower_threshold: f64,
    pub upper_threshold: f64,
}

pub fn classify_regimes(profile: &CkaProfile, lower: f64, upper: f64) -> Result<Vec<RegimeLabel>> {
    let t = Thresholds::new(lower, upper)?;
    Ok(profile
        .rho_per_layer
        .iter()
        .map(|&rho| RegimeLabel {
            label: t.classify(rho),
            lower_threshold: lower,
            upper_threshold: upper,
        })
        .collect())
}
