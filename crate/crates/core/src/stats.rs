//! Paired significance tests, Holm–Bonferroni correction and rank correlation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation of the differences.
    pub std: f64,
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub ci95: (f64, f64),
    /// Zero variance; `p` is then 0 for a nonzero mean and 1 otherwise.
    pub degenerate: bool,
}

/// Two-sided paired t-test on per-seed differences (Student t, `n − 1` dof).
pub fn paired_t_test(deltas: &[f64]) -> Result<PairedTTest> {
    let n = deltas.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "paired t-test needs at least 2 differences, got {n}"
        )));
    }
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired differences".into()));
    }
    let nf = n as f64;
    let mean = deltas.iter().sum::<f64>() / nf;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let std = var.sqrt();
    if std == 0.0 {
        let t = if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(mean)
        };
        return Ok(PairedTTest {
            n,
            mean,
            std,
            t,
            p: if mean == 0.0 { 1.0 } else { 0.0 },
            ci95: (mean, mean),
            degenerate: true,
        });
    }
    let se = std / nf.sqrt();
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0)
        .map_err(|e| Error::Argument(format!("t distribution: {e}")))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    let q = dist.inverse_cdf(0.975);
    Ok(PairedTTest {
        n,
        mean,
        std,
        t,
        p,
        ci95: (mean - q * se, mean + q * se),
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolmResult {
    pub reject: Vec<bool>,
    /// Adjusted p-values in input order.
    pub adjusted: Vec<f64>,
}

/// Holm's step-down procedure at family-wise level `alpha`.
pub fn holm_bonferroni(p_values: &[f64], alpha: f64) -> Result<HolmResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Argument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut adjusted = vec![0.0; m];
    let mut reject = vec![false; m];
    let mut running = 0.0f64;
    let mut still_rejecting = true;
    for (k, &i) in order.iter().enumerate() {
        let adj = ((m - k) as f64 * p_values[i]).min(1.0);
        running = running.max(adj);
        adjusted[i] = running;
        if still_rejecting && p_values[i] <= alpha / (m - k) as f64 {
            reject[i] = true;
        } else {
            still_rejecting = false;
        }
    }
    Ok(HolmResult { reject, adjusted })
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(
            "spearman needs two equal-length samples of size >= 2".into(),
        ));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate(
            "constant sample in rank correlation".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}
