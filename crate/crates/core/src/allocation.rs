//! Rank plans from CKA profiles, parameter accounting, and the rank/similarity
//! bound together with its empirical counterpart.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cka::{CkaProfile, Regime, Thresholds};
use crate::error::{Error, Result};
use crate::numerics::{condition_number, pseudo_inverse, svd, DenseMatrix, Scalar};

/// Adapted projections per layer: query, key, value, output.
pub const PROJECTIONS_PER_LAYER: usize = 4;

/// Rank assigned to each regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimeRanks {
    pub shallow: usize,
    pub middle: usize,
    pub deep: usize,
}

impl RegimeRanks {
    pub fn new(shallow: usize, middle: usize, deep: usize) -> Result<Self> {
        if shallow == 0 || middle == 0 || deep == 0 {
            return Err(Error::Argument("regime ranks must be at least 1".into()));
        }
        Ok(Self {
            shallow,
            middle,
            deep,
        })
    }

    /// Builds from a map, failing when any regime is absent.
    pub fn from_map(map: &BTreeMap<Regime, usize>) -> Result<Self> {
        let get = |r: Regime| {
            map.get(&r)
                .copied()
                .ok_or_else(|| Error::Argument(format!("missing rank for {r} regime")))
        };
        Self::new(
            get(Regime::Shallow)?,
            get(Regime::Middle)?,
            get(Regime::Deep)?,
        )
    }

    pub fn rank_for(&self, regime: Regime) -> usize {
        match regime {
            Regime::Shallow => self.shallow,
            Regime::Middle => self.middle,
            Regime::Deep => self.deep,
        }
    }
}

/// Model width and non-adapter trainable parameters for accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterDims {
    pub d_model: usize,
    /// Fusion, depth and other trainable parameters outside the adapters.
    pub extras: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRank {
    /// 1-based.
    pub layer: usize,
    pub rho: Option<f64>,
    /// `None` for hand-built plans that do not follow the regime rule.
    pub regime: Option<Regime>,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub per_layer: Vec<LayerRank>,
    pub thresholds: Thresholds,
    pub regime_ranks: RegimeRanks,
    pub dims: AdapterDims,
    pub total_trainable: u64,
}

impl RankPlan {
    /// Plan from an explicit rank list (strategies that ignore the profile).
    pub fn from_ranks(
        ranks: &[usize],
        thresholds: Thresholds,
        regime_ranks: RegimeRanks,
        dims: AdapterDims,
    ) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Argument("plan needs at least one layer".into()));
        }
        if ranks.contains(&0) {
            return Err(Error::Argument("every layer needs rank >= 1".into()));
        }
        let per_layer = ranks
            .iter()
            .enumerate()
            .map(|(i, &rank)| LayerRank {
                layer: i + 1,
                rho: None,
                regime: None,
                rank,
            })
            .collect();
        Ok(Self::finish(per_layer, thresholds, regime_ranks, dims))
    }

    /// Plan that assigns regimes by contiguous layer bands rather than CKA
    /// values: `bands = (shallow_layers, middle_layers, deep_layers)`.
    pub fn from_bands(
        bands: (usize, usize, usize),
        regime_ranks: RegimeRanks,
        thresholds: Thresholds,
        dims: AdapterDims,
    ) -> Result<Self> {
        let (s, m, d) = bands;
        if s == 0 || m == 0 || d == 0 {
            return Err(Error::Config(format!(
                "regime bands {s}/{m}/{d} leave a regime with no layers"
            )));
        }
        let per_layer = (0..s + m + d)
            .map(|i| {
                let regime = if i < s {
                    Regime::Shallow
                } else if i < s + m {
                    Regime::Middle
                } else {
                    Regime::Deep
                };
                LayerRank {
                    layer: i + 1,
                    rho: None,
                    regime: Some(regime),
                    rank: regime_ranks.rank_for(regime),
                }
            })
            .collect();
        Ok(Self::finish(per_layer, thresholds, regime_ranks, dims))
    }

    fn finish(
        per_layer: Vec<LayerRank>,
        thresholds: Thresholds,
        regime_ranks: RegimeRanks,
        dims: AdapterDims,
    ) -> Self {
        let mut plan = Self {
            per_layer,
            thresholds,
            regime_ranks,
            dims,
            total_trainable: 0,
        };
        plan.total_trainable = count_trainable_params(&plan.ranks(), dims.d_model, dims.extras);
        plan
    }

    pub fn layer_count(&self) -> usize {
        self.per_layer.len()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.per_layer.iter().map(|l| l.rank).collect()
    }

    /// Adapter-only parameter count.
    pub fn adapter_params(&self) -> u64 {
        count_trainable_params(&self.ranks(), self.dims.d_model, 0)
    }

    /// Checks the structural invariants of a plan.
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.per_layer.iter().enumerate() {
            if l.layer != i + 1 {
                return Err(Error::Config(format!(
                    "layer indices must be contiguous from 1 (found {} at position {i})",
                    l.layer
                )));
            }
            if l.rank == 0 {
                return Err(Error::Config(format!("layer {} has rank 0", l.layer)));
            }
            if let Some(regime) = l.regime {
                let want = self.regime_ranks.rank_for(regime);
                if l.rank != want {
                    return Err(Error::Config(format!(
                        "layer {} is {regime} but has rank {} (regime rank {want})",
                        l.layer, l.rank
                    )));
                }
            }
        }
        let expected = count_trainable_params(&self.ranks(), self.dims.d_model, self.dims.extras);
        if expected != self.total_trainable {
            return Err(Error::Config(format!(
                "total_trainable {} differs from closed form {expected}",
                self.total_trainable
            )));
        }
        Ok(())
    }
}

/// Applies the regime rule to every layer of the profile.
pub fn allocate_ranks(
    profile: &CkaProfile,
    thresholds: Thresholds,
    regime_ranks: &BTreeMap<Regime, usize>,
    dims: AdapterDims,
) -> Result<RankPlan> {
    let ranks = RegimeRanks::from_map(regime_ranks)?;
    let per_layer = profile
        .rho_per_layer
        .iter()
        .enumerate()
        .map(|(i, &rho)| {
            let regime = thresholds.classify(rho);
            LayerRank {
                layer: i + 1,
                rho: Some(rho),
                regime: Some(regime),
                rank: ranks.rank_for(regime),
            }
        })
        .collect();
    Ok(RankPlan::finish(per_layer, thresholds, ranks, dims))
}

/// `Σ_ℓ 4 · r_ℓ · (d_in + d_out) + extras` with square `d_model` projections.
pub fn count_trainable_params(ranks: &[usize], d_model: usize, extras: u64) -> u64 {
    let per_rank = (PROJECTIONS_PER_LAYER * 2 * d_model) as u64;
    ranks.iter().map(|&r| per_rank * r as u64).sum::<u64>() + extras
}

/// `ceil(constant · d · (1 − rho) · κx · κy / eps)`, clamped to `[0, d]`.
pub fn theoretical_rank_bound(
    d: usize,
    rho: f64,
    kappa_x: f64,
    kappa_y: f64,
    eps: f64,
    constant: f64,
) -> Result<usize> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Argument(format!(
            "rho must lie in [0, 1], got {rho}"
        )));
    }
    if kappa_x < 1.0 || kappa_y < 1.0 {
        return Err(Error::Argument("condition numbers must be >= 1".into()));
    }
    let raw = (constant * d as f64 * (1.0 - rho) * kappa_x * kappa_y / eps).ceil();
    Ok(if raw <= 0.0 { 0 } else { (raw as usize).min(d) })
}

/// Which matrix the empirical rank search approximates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignerTarget {
    /// `W*` itself.
    ApproximateWStar,
    /// The update `W* − I`.
    ApproximateWStarMinusI,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignerResult<T> {
    pub w_star: DenseMatrix<T>,
    pub feature_dim: usize,
    /// Condition number of `X Xᵀ`.
    pub kappa_x: T,
    /// Condition number of `Y Yᵀ`.
    pub kappa_y: T,
    /// Frobenius error of the rank-r truncation of `W*`, `r = 0..=d`.
    pub residual_at_rank: Vec<T>,
    /// Same for `W* − I`.
    pub residual_minus_identity_at_rank: Vec<T>,
    pub singular_values: Vec<T>,
    pub singular_values_minus_identity: Vec<T>,
    /// Set when `X Xᵀ` was singular at the pseudo-inverse tolerance.
    pub singular_gram: bool,
}

fn residual_curve<T: Scalar>(s: &[T]) -> Vec<T> {
    (0..=s.len())
        .map(|r| s.iter().skip(r).fold(T::zero(), |a, &v| a + v * v).sqrt())
        .collect()
}

/// Least-squares aligner `W* = Y Xᵀ (X Xᵀ)⁺` for `d × n` feature matrices.
pub fn optimal_aligner<T: Scalar>(
    x: &DenseMatrix<T>,
    y: &DenseMatrix<T>,
    tol: T,
) -> Result<AlignerResult<T>> {
    if x.cols() != y.cols() {
        return Err(Error::Shape(format!(
            "sample counts differ: {} vs {}",
            x.cols(),
            y.cols()
        )));
    }
    if x.rows() != y.rows() {
        return Err(Error::Shape(format!(
            "feature dims differ: {} vs {}",
            x.rows(),
            y.rows()
        )));
    }
    let d = x.rows();
    let gram_x = x.matmul_nt(x)?;
    let gram_y = y.matmul_nt(y)?;
    let gram_svd = svd(&gram_x)?;
    let smax = gram_svd
        .singular_values
        .first()
        .copied()
        .unwrap_or_else(T::zero);
    let singular_gram = gram_svd.singular_values.iter().any(|&s| s <= tol * smax);
    let w_star = y.matmul_nt(x)?.matmul(&pseudo_inverse(&gram_x, tol)?)?;

    let w_svd = svd(&w_star)?;
    let delta = w_star.sub(&DenseMatrix::identity(d))?;
    let delta_svd = svd(&delta)?;
    Ok(AlignerResult {
        feature_dim: d,
        kappa_x: condition_number(&gram_x, tol)?,
        kappa_y: condition_number(&gram_y, tol)?,
        residual_at_rank: residual_curve(&w_svd.singular_values),
        residual_minus_identity_at_rank: residual_curve(&delta_svd.singular_values),
        singular_values: w_svd.singular_values,
        singular_values_minus_identity: delta_svd.singular_values,
        singular_gram,
        w_star,
    })
}

/// Smallest rank whose truncation error is within `eps` for the chosen target.
pub fn required_rank_empirical<T: Scalar>(
    aligner: &AlignerResult<T>,
    eps: T,
    mode: AlignerTarget,
) -> usize {
    let curve = match mode {
        AlignerTarget::ApproximateWStar => &aligner.residual_at_rank,
        AlignerTarget::ApproximateWStarMinusI => &aligner.residual_minus_identity_at_rank,
    };
    curve
        .iter()
        .position(|&res| res <= eps)
        .unwrap_or(aligner.feature_dim)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralDecayFit {
    pub c: f64,
    pub alpha: f64,
    /// RMS residual of the log-log fit.
    pub fit_residual: f64,
    /// `alpha > 1/2`, the decay rate the rank argument relies on.
    pub decay_sufficient: bool,
}

/// Least-squares fit of `log λ_i = log C − α log i` over strictly positive
/// values (`i` is the 1-based position in the input).
pub fn fit_spectral_decay(singular_values: &[f64]) -> Result<SpectralDecayFit> {
    let points: Vec<(f64, f64)> = singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0 && s.is_finite())
        .map(|(i, &s)| (((i + 1) as f64).ln(), s.ln()))
        .collect();
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 positive singular values, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let sxx = points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss = points
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum::<f64>();
    let alpha = -slope;
    Ok(SpectralDecayFit {
        c: intercept.exp(),
        alpha,
        fit_residual: (rss / n).sqrt(),
        decay_sufficient: alpha > 0.5,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ranks_map(s: usize, m: usize, d: usize) -> BTreeMap<Regime, usize> {
        BTreeMap::from([(Regime::Shallow, s), (Regime::Middle, m), (Regime::Deep, d)])
    }

    const TOY_DIMS: AdapterDims = AdapterDims {
        d_model: 32,
        extras: 0,
    };

    #[test]
    fn toy_profile_allocation() {
        let profile = CkaProfile::new(vec![0.3, 0.3, 0.3, 0.6, 0.6, 0.6, 0.8, 0.8]).unwrap();
        let plan = allocate_ranks(
            &profile,
            Thresholds::default(),
            &ranks_map(8, 4, 2),
            TOY_DIMS,
        )
        .unwrap();
        assert_eq!(plan.ranks(), vec![8, 8, 8, 4, 4, 4, 2, 2]);
        assert_eq!(plan.total_trainable, 10_240);
        plan.validate().unwrap();
    }

    #[test]
    fn regime_mean_profile_gives_sixteen_eight_four() {
        let mut rho = vec![0.38; 10];
        rho.extend(vec![0.60; 12]);
        rho.extend(vec![0.81; 10]);
        let profile = CkaProfile::new(rho).unwrap();
        let dims = AdapterDims {
            d_model: 1280,
            extras: 0,
        };
        let plan =
            allocate_ranks(&profile, Thresholds::default(), &ranks_map(16, 8, 4), dims).unwrap();
        let ranks = plan.ranks();
        assert!(ranks[..10].iter().all(|&r| r == 16));
        assert!(ranks[10..22].iter().all(|&r| r == 8));
        assert!(ranks[22..].iter().all(|&r| r == 4));
        assert_eq!(plan.total_trainable, 3_031_040);
    }

    #[test]
    fn all_ones_profile_is_uniform_deep() {
        let profile = CkaProfile::new(vec![1.0; 5]).unwrap();
        let plan = allocate_ranks(
            &profile,
            Thresholds::default(),
            &ranks_map(8, 4, 2),
            TOY_DIMS,
        )
        .unwrap();
        assert_eq!(plan.ranks(), vec![2; 5]);
    }

    #[test]
    fn missing_regime_rank_is_an_argument_error() {
        let profile = CkaProfile::new(vec![0.2]).unwrap();
        let mut map = ranks_map(8, 4, 2);
        map.remove(&Regime::Middle);
        assert!(matches!(
            allocate_ranks(&profile, Thresholds::default(), &map, TOY_DIMS),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            allocate_ranks(
                &profile,
                Thresholds::default(),
                &ranks_map(0, 4, 2),
                TOY_DIMS
            ),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn allocation_is_deterministic() {
        let profile = CkaProfile::new(vec![0.45, 0.52, 0.69, 0.7, 0.95]).unwrap();
        let a = allocate_ranks(
            &profile,
            Thresholds::default(),
            &ranks_map(8, 4, 2),
            TOY_DIMS,
        )
        .unwrap();
        let b = allocate_ranks(
            &profile,
            Thresholds::default(),
            &ranks_map(8, 4, 2),
            TOY_DIMS,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_count_examples() {
        assert_eq!(count_trainable_params(&[1], 2, 0), 16);
        let mut sam = vec![16; 10];
        sam.extend(vec![8; 12]);
        sam.extend(vec![4; 10]);
        assert_eq!(count_trainable_params(&sam, 1280, 0), 3_031_040);
        assert_eq!(
            count_trainable_params(&[8, 8, 8, 4, 4, 4, 2, 2], 32, 0),
            10_240
        );
        assert_eq!(count_trainable_params(&[1], 2, 7), 23);
    }

    #[test]
    fn band_shift_changes_count_by_closed_form_delta() {
        let rr = RegimeRanks::new(8, 4, 2).unwrap();
        let t = Thresholds::default();
        let base = RankPlan::from_bands((3, 3, 2), rr, t, TOY_DIMS).unwrap();
        let up = RankPlan::from_bands((4, 3, 1), rr, t, TOY_DIMS).unwrap();
        let down = RankPlan::from_bands((2, 3, 3), rr, t, TOY_DIMS).unwrap();
        let per = (PROJECTIONS_PER_LAYER * 2 * 32) as i64;
        // +1: one middle layer becomes shallow (+4), one deep becomes middle (+2).
        assert_eq!(
            up.total_trainable as i64 - base.total_trainable as i64,
            per * (4 + 2)
        );
        assert_eq!(
            down.total_trainable as i64 - base.total_trainable as i64,
            -per * (4 + 2)
        );
        assert!(matches!(
            RankPlan::from_bands((0, 5, 3), rr, t, TOY_DIMS),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validate_catches_inconsistent_plans() {
        let rr = RegimeRanks::new(8, 4, 2).unwrap();
        let mut plan =
            RankPlan::from_bands((3, 3, 2), rr, Thresholds::default(), TOY_DIMS).unwrap();
        plan.per_layer[0].rank = 4;
        assert!(plan.validate().is_err());
        let mut plan =
            RankPlan::from_bands((3, 3, 2), rr, Thresholds::default(), TOY_DIMS).unwrap();
        plan.total_trainable += 1;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn rank_bound_examples() {
        assert_eq!(
            theoretical_rank_bound(32, 1.0, 1.0, 1.0, 1.0, 1.0).unwrap(),
            0
        );
        assert_eq!(
            theoretical_rank_bound(32, 0.5, 1.0, 1.0, 16.0, 1.0).unwrap(),
            1
        );
        let b = |rho| theoretical_rank_bound(32, rho, 1.5, 1.5, 4.0, 1.0).unwrap();
        assert!(b(0.38) > b(0.60));
        assert!(b(0.60) > b(0.81));
        assert_eq!(
            theoretical_rank_bound(32, 0.0, 10.0, 10.0, 0.1, 1.0).unwrap(),
            32
        );
        assert!(matches!(
            theoretical_rank_bound(32, 0.5, 1.0, 1.0, 0.0, 1.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn rank_bound_monotone() {
        let mut prev = usize::MAX;
        for i in 0..=20 {
            let b = theoretical_rank_bound(64, i as f64 / 20.0, 2.0, 3.0, 5.0, 1.0).unwrap();
            assert!(b <= prev);
            prev = b;
        }
        let mut prev = usize::MAX;
        for eps in [0.5, 1.0, 2.0, 4.0, 8.0, 100.0] {
            let b = theoretical_rank_bound(64, 0.4, 2.0, 3.0, eps, 1.0).unwrap();
            assert!(b <= prev);
            prev = b;
        }
    }

    fn pseudo_random(rows: usize, cols: usize, seed: u64) -> DenseMatrix<f64> {
        let mut s = seed;
        DenseMatrix::from_fn(rows, cols, |_, _| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn aligner_identity_and_scaling() {
        let x = pseudo_random(4, 20, 3);
        let a = optimal_aligner(&x, &x, 1e-10).unwrap();
        let eye = DenseMatrix::<f64>::identity(4);
        assert!(a.w_star.sub(&eye).unwrap().max_abs() < 1e-10);
        assert!(!a.singular_gram);

        let a2 = optimal_aligner(&x, &x.scale(2.0), 1e-10).unwrap();
        assert!(a2.w_star.sub(&eye.scale(2.0)).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn aligner_recovers_linear_map() {
        let x = pseudo_random(4, 20, 5);
        let m = pseudo_random(4, 4, 6);
        let y = m.matmul(&x).unwrap();
        let a = optimal_aligner(&x, &y, 1e-10).unwrap();
        assert!(a.w_star.sub(&m).unwrap().max_abs() < 1e-8);
        assert!(a.residual_at_rank.windows(2).all(|w| w[1] <= w[0]));
        assert!(*a.residual_at_rank.last().unwrap() <= 1e-8 * a.w_star.frobenius_norm());
        assert!(a.kappa_x >= 1.0 && a.kappa_y >= 1.0);
    }

    #[test]
    fn aligner_flags_singular_gram() {
        // Rows 0 and 1 identical: X Xᵀ is rank-deficient.
        let mut x = pseudo_random(3, 10, 8);
        for j in 0..10 {
            let v = x.get(0, j);
            x.set(1, j, v);
        }
        let a = optimal_aligner(&x, &x, 1e-10).unwrap();
        assert!(a.singular_gram);
        assert!(a.w_star.all_finite());
    }

    #[test]
    fn required_rank_examples() {
        let x = pseudo_random(4, 30, 1);
        let u = pseudo_random(4, 1, 2);
        let v = pseudo_random(1, 4, 3);
        // W* = I + u vᵀ so W* − I is rank one.
        let w = DenseMatrix::identity(4)
            .add(&u.matmul(&v).unwrap())
            .unwrap();
        let y = w.matmul(&x).unwrap();
        let a = optimal_aligner(&x, &y, 1e-10).unwrap();
        let target_norm = a.residual_minus_identity_at_rank[0];
        assert_eq!(
            required_rank_empirical(
                &a,
                target_norm * 1.01,
                AlignerTarget::ApproximateWStarMinusI
            ),
            0
        );
        assert_eq!(
            required_rank_empirical(&a, target_norm * 0.5, AlignerTarget::ApproximateWStarMinusI),
            1
        );
        assert_eq!(
            required_rank_empirical(&a, a.residual_at_rank[0], AlignerTarget::ApproximateWStar),
            0
        );
        let mut prev = usize::MAX;
        for eps in [1e-6, 1e-3, 0.1, 0.5, 1.0, 2.0, 10.0] {
            let r = required_rank_empirical(&a, eps, AlignerTarget::ApproximateWStar);
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn spectral_decay_exact_power_laws() {
        let inv: Vec<f64> = (1..=10).map(|i| 1.0 / i as f64).collect();
        let f = fit_spectral_decay(&inv).unwrap();
        assert_abs_diff_eq!(f.c, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.alpha, 1.0, epsilon = 1e-12);
        assert!(f.fit_residual < 1e-12);
        assert!(f.decay_sufficient);

        let sq: Vec<f64> = (1..=10).map(|i| 2.0 / (i * i) as f64).collect();
        let f = fit_spectral_decay(&sq).unwrap();
        assert_abs_diff_eq!(f.c, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.alpha, 2.0, epsilon = 1e-12);

        let flat = fit_spectral_decay(&[1.0, 0.9, 0.85, 0.8]).unwrap();
        assert!(!flat.decay_sufficient);
    }

    #[test]
    fn spectral_decay_needs_three_positive_values() {
        assert!(matches!(
            fit_spectral_decay(&[1.0, 0.5, 0.0, 0.0]),
            Err(Error::InsufficientData(_))
        ));
    }
}
