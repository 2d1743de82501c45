//! Gated depth fusion, segmentation losses with edge supervision, Sobel edge
//! bands, and the evaluation metrics.
//!
//! The loss functions return analytic gradients with respect to the predicted
//! probabilities alongside their values; the training loop chains them through
//! the logistic output.

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, Scalar};

/// Probability clamp used by the BCE terms.
pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_EDGE_WIDTH: usize = 2;
pub const DEFAULT_BOUNDARY_TOL: usize = 2;

/// Row-major 2-D grid (probability map, mask or label map).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "grid data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn same_shape<U>(&self, other: &Grid<U>, what: &str) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

impl Grid<u8> {
    pub fn complement(&self) -> Self {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| u8::from(v == 0)).collect(),
        }
    }

    pub fn to_float<T: Scalar>(&self) -> Grid<T> {
        Grid {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| if v != 0 { T::one() } else { T::zero() })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

/// Weights of the gated fusion; feature maps have one row per spatial
/// location and one column per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    /// `fused × (rgb + depth)`.
    pub w_f: DenseMatrix<T>,
    /// `fused × (rgb + depth)`.
    pub gate_w1: DenseMatrix<T>,
    pub gate_b1: Vec<T>,
    /// `fused × fused`.
    pub gate_w2: DenseMatrix<T>,
    pub gate_b2: Vec<T>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn fused_width(&self) -> usize {
        self.w_f.rows()
    }

    pub fn input_width(&self) -> usize {
        self.w_f.cols()
    }

    pub fn validate(&self, rgb_width: usize, depth_width: usize) -> Result<()> {
        let fused = self.fused_width();
        let input = rgb_width + depth_width;
        let ok = self.w_f.cols() == input
            && self.gate_w1.shape() == (fused, input)
            && self.gate_b1.len() == fused
            && self.gate_w2.shape() == (fused, fused)
            && self.gate_b2.len() == fused
            && depth_width == fused;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "fusion params do not fit rgb width {rgb_width} + depth width {depth_width} -> {fused}"
            )))
        }
    }
}

/// Smooth activation of the gate MLP's hidden layer (tanh-form GELU).
pub fn gelu<T: Scalar>(x: T) -> T {
    // 0.5·(1 + tanh(u)) = σ(2u), which needs a single exp.
    let c = T::lit(2.0 * (2.0 / std::f64::consts::PI).sqrt());
    x * sigmoid(c * (x + T::lit(0.044715) * x * x * x))
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(2.0 * (2.0 / std::f64::consts::PI).sqrt());
    let x2 = x * x;
    let s = sigmoid(c * (x + T::lit(0.044715) * x2 * x));
    let du = c * (T::one() + T::lit(3.0 * 0.044715) * x2);
    s + x * s * (T::one() - s) * du
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Per location: `W_f · [rgb; d] + g ⊙ d` with
/// `g = σ(W2 · gelu(W1 · [rgb; d] + b1) + b2)`.
pub fn fuse<T: Scalar>(
    f_rgb: &DenseMatrix<T>,
    f_d: &DenseMatrix<T>,
    params: &FusionParams<T>,
) -> Result<DenseMatrix<T>> {
    if f_rgb.rows() != f_d.rows() {
        return Err(Error::Shape(format!(
            "feature maps cover {} vs {} locations",
            f_rgb.rows(),
            f_d.rows()
        )));
    }
    params.validate(f_rgb.cols(), f_d.cols())?;
    let locations = f_rgb.rows();
    let mut concat = DenseMatrix::zeros(locations, f_rgb.cols() + f_d.cols());
    for i in 0..locations {
        let row = concat.row_mut(i);
        row[..f_rgb.cols()].copy_from_slice(f_rgb.row(i));
        row[f_rgb.cols()..].copy_from_slice(f_d.row(i));
    }
    let mut hidden = concat.matmul_nt(&params.gate_w1)?;
    for i in 0..locations {
        for (h, &b) in hidden.row_mut(i).iter_mut().zip(&params.gate_b1) {
            *h = gelu(*h + b);
        }
    }
    let mut gate = hidden.matmul_nt(&params.gate_w2)?;
    for i in 0..locations {
        for (g, &b) in gate.row_mut(i).iter_mut().zip(&params.gate_b2) {
            *g = sigmoid(*g + b);
        }
    }
    let mut out = concat.matmul_nt(&params.w_f)?;
    for i in 0..locations {
        let d = f_d.row(i);
        let g = gate.row(i);
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = *o + g[k] * d[k];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_edge: f64,
    pub dice_smooth: f64,
    pub edge_width: usize,
}

impl LossWeights {
    pub fn new(lambda_edge: f64, dice_smooth: f64) -> Result<Self> {
        if !lambda_edge.is_finite() || lambda_edge < 0.0 {
            return Err(Error::Argument(format!(
                "edge weight must be finite and >= 0, got {lambda_edge}"
            )));
        }
        if !dice_smooth.is_finite() || dice_smooth < 0.0 {
            return Err(Error::Argument("dice smoothing must be >= 0".into()));
        }
        Ok(Self {
            lambda_edge,
            dice_smooth,
            edge_width: DEFAULT_EDGE_WIDTH,
        })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_edge: 0.5,
            dice_smooth: 1.0,
            edge_width: DEFAULT_EDGE_WIDTH,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<T> {
    pub dice: T,
    pub bce: T,
    pub edge: T,
    pub total: T,
}

/// Value and gradient with respect to the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct WithGrad<T, V> {
    pub value: V,
    pub grad: Grid<T>,
}

fn check_pred<T: Scalar>(pred: &Grid<T>, target: &Grid<T>) -> Result<()> {
    pred.same_shape(target, "prediction vs target")?;
    if pred.data.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("prediction".into()));
    }
    Ok(())
}

/// `1 − (2 Σ p t + s) / (Σ p + Σ t + s)`.
pub fn dice_loss<T: Scalar>(pred: &Grid<T>, target: &Grid<T>, smooth: T) -> Result<WithGrad<T, T>> {
    check_pred(pred, target)?;
    let (mut inter, mut sp, mut st) = (T::zero(), T::zero(), T::zero());
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        inter = inter + p * t;
        sp = sp + p;
        st = st + t;
    }
    let num = T::lit(2.0) * inter + smooth;
    let den = sp + st + smooth;
    if den <= T::zero() {
        // Empty prediction and target with zero smoothing: perfect agreement.
        return Ok(WithGrad {
            value: T::zero(),
            grad: Grid::filled(pred.height, pred.width, T::zero()),
        });
    }
    let value = T::one() - num / den;
    let grad = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(_, &t)| -(T::lit(2.0) * t * den - num) / (den * den))
        .collect();
    Ok(WithGrad {
        value,
        grad: Grid {
            height: pred.height,
            width: pred.width,
            data: grad,
        },
    })
}

fn bce_terms<T: Scalar>(p: T, t: T) -> (T, T) {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    let pc = p.max(lo).min(hi);
    let value = -(t * pc.ln() + (T::one() - t) * (T::one() - pc).ln());
    let grad = if p < lo || p > hi {
        T::zero()
    } else {
        -t / pc + (T::one() - t) / (T::one() - pc)
    };
    (value, grad)
}

/// Mean binary cross-entropy over all pixels.
pub fn bce_loss<T: Scalar>(pred: &Grid<T>, target: &Grid<T>) -> Result<WithGrad<T, T>> {
    check_pred(pred, target)?;
    masked_bce(pred, target, None)
}

fn masked_bce<T: Scalar>(
    pred: &Grid<T>,
    target: &Grid<T>,
    mask: Option<&Grid<u8>>,
) -> Result<WithGrad<T, T>> {
    let count = match mask {
        Some(m) => m.data.iter().filter(|&&v| v != 0).count(),
        None => pred.len(),
    };
    let mut grad = Grid::filled(pred.height, pred.width, T::zero());
    if count == 0 {
        return Ok(WithGrad {
            value: T::zero(),
            grad,
        });
    }
    let n = T::from_count(count);
    let mut sum = T::zero();
    for i in 0..pred.len() {
        if mask.is_some_and(|m| m.data[i] == 0) {
            continue;
        }
        let (v, g) = bce_terms(pred.data[i], target.data[i]);
        sum = sum + v;
        grad.data[i] = g / n;
    }
    Ok(WithGrad {
        value: sum / n,
        grad,
    })
}

/// Binary edge band of a mask: pixels with nonzero Sobel response (replicate
/// padding) or a non-constant 3×3 neighbourhood, dilated by
/// `⌊(width − 1) / 2⌋` pixels. A straight step therefore yields a band
/// `2 + 2·⌊(width − 1)/2⌋` pixels wide, i.e. exactly 2 for the default width.
pub fn sobel_edges(mask: &Grid<u8>, width: usize) -> Grid<u8> {
    let (h, w) = (mask.height, mask.width);
    let mut raw = Grid::filled(h, w, 0u8);
    if h == 0 || w == 0 {
        return raw;
    }
    let at = |y: isize, x: isize| -> i32 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        i32::from(mask.get(yy, xx) != 0)
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
            let mut edge = gx != 0 || gy != 0;
            if !edge {
                // Symmetric configurations (e.g. an isolated pixel) cancel in
                // both Sobel kernels at their centre.
                let c = at(y, x);
                edge = (-1..=1).any(|dy| (-1..=1).any(|dx| at(y + dy, x + dx) != c));
            }
            if edge {
                raw.set(y as usize, x as usize, 1);
            }
        }
    }
    let radius = width.max(1).saturating_sub(1) / 2;
    dilate(&raw, radius)
}

/// Square (Chebyshev) dilation.
pub fn dilate(mask: &Grid<u8>, radius: usize) -> Grid<u8> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = (mask.height, mask.width);
    let r = radius as isize;
    let mut out = Grid::filled(h, w, 0u8);
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 {
                continue;
            }
            for yy in (y as isize - r).max(0)..=(y as isize + r).min(h as isize - 1) {
                for xx in (x as isize - r).max(0)..=(x as isize + r).min(w as isize - 1) {
                    out.set(yy as usize, xx as usize, 1);
                }
            }
        }
    }
    out
}

/// BCE restricted to the edge band of the target mask; 0 when the band is empty.
pub fn edge_loss<T: Scalar>(
    pred: &Grid<T>,
    target_mask: &Grid<u8>,
    width: usize,
) -> Result<WithGrad<T, T>> {
    let target = target_mask.to_float::<T>();
    check_pred(pred, &target)?;
    let band = sobel_edges(target_mask, width);
    masked_bce(pred, &target, Some(&band))
}

/// `dice + bce + λ · edge` with the summed gradient.
pub fn total_loss<T: Scalar>(
    pred: &Grid<T>,
    target_mask: &Grid<u8>,
    weights: &LossWeights,
) -> Result<WithGrad<T, LossTerms<T>>> {
    let target = target_mask.to_float::<T>();
    let dice = dice_loss(pred, &target, T::lit(weights.dice_smooth))?;
    let bce = bce_loss(pred, &target)?;
    let lambda = T::lit(weights.lambda_edge);
    // Reported even when λ = 0.
    let edge = edge_loss(pred, target_mask, weights.edge_width)?;
    let total = dice.value + bce.value + lambda * edge.value;
    let grad = dice
        .grad
        .data
        .iter()
        .zip(&bce.grad.data)
        .zip(&edge.grad.data)
        .map(|((&a, &b), &c)| a + b + lambda * c)
        .collect();
    Ok(WithGrad {
        value: LossTerms {
            dice: dice.value,
            bce: bce.value,
            edge: edge.value,
            total,
        },
        grad: Grid {
            height: pred.height,
            width: pred.width,
            data: grad,
        },
    })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegMetrics {
    pub miou: f64,
    pub boundary_f1: f64,
}

/// Per-class intersection and union counts, accumulated over images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouCounts {
    pub fn new(class_count: usize) -> Self {
        Self {
            intersection: vec![0; class_count],
            union: vec![0; class_count],
        }
    }

    pub fn add(&mut self, pred: &Grid<u8>, target: &Grid<u8>) -> Result<()> {
        pred.same_shape(target, "miou")?;
        let classes = self.intersection.len();
        for (&p, &t) in pred.data.iter().zip(&target.data) {
            let (p, t) = (p as usize, t as usize);
            if p >= classes || t >= classes {
                return Err(Error::Argument(format!(
                    "label {} outside {classes} classes",
                    p.max(t)
                )));
            }
            if p == t {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[t] += 1;
            }
        }
        Ok(())
    }

    /// Mean IoU over non-background classes present in prediction or target.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = (1..self.union.len())
            .filter(|&c| self.union[c] > 0)
            .map(|c| self.intersection[c] as f64 / self.union[c] as f64)
            .collect();
        if ious.is_empty() {
            return Err(Error::UndefinedMetric(
                "no non-background class in prediction or target".into(),
            ));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn miou(pred: &Grid<u8>, target: &Grid<u8>, class_count: usize) -> Result<f64> {
    let mut counts = IouCounts::new(class_count);
    counts.add(pred, target)?;
    counts.miou()
}

/// Non-background pixels with an 8-neighbour of a different label.
pub fn boundary_pixels(labels: &Grid<u8>) -> Vec<(usize, usize)> {
    let (h, w) = (labels.height, labels.width);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = labels.get(y, x);
            if v == 0 {
                continue;
            }
            let differs = (y.saturating_sub(1)..=(y + 1).min(h - 1)).any(|yy| {
                (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| labels.get(yy, xx) != v)
            });
            if differs {
                out.push((y, x));
            }
        }
    }
    out
}

/// Matched / total counts for boundary F1, accumulated over images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BoundaryCounts {
    pub pred_matched: u64,
    pub pred_total: u64,
    pub target_matched: u64,
    pub target_total: u64,
}

impl BoundaryCounts {
    pub fn add(&mut self, pred: &Grid<u8>, target: &Grid<u8>, tol_px: usize) -> Result<()> {
        pred.same_shape(target, "boundary_f1")?;
        let pb = boundary_pixels(pred);
        let tb = boundary_pixels(target);
        let near = |set: &Grid<u8>| dilate(set, tol_px);
        let mut pmask = Grid::filled(pred.height, pred.width, 0u8);
        for &(y, x) in &pb {
            pmask.set(y, x, 1);
        }
        let mut tmask = Grid::filled(pred.height, pred.width, 0u8);
        for &(y, x) in &tb {
            tmask.set(y, x, 1);
        }
        let tnear = near(&tmask);
        let pnear = near(&pmask);
        self.pred_total += pb.len() as u64;
        self.target_total += tb.len() as u64;
        self.pred_matched += pb.iter().filter(|&&(y, x)| tnear.get(y, x) != 0).count() as u64;
        self.target_matched += tb.iter().filter(|&&(y, x)| pnear.get(y, x) != 0).count() as u64;
        Ok(())
    }

    pub fn f1(&self) -> f64 {
        match (self.pred_total, self.target_total) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            (pt, tt) => {
                let precision = self.pred_matched as f64 / pt as f64;
                let recall = self.target_matched as f64 / tt as f64;
                if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                }
            }
        }
    }
}

/// F1 of boundary pixels matched within `tol_px` Chebyshev distance in both
/// directions. Both boundaries empty scores 1.
pub fn boundary_f1(pred: &Grid<u8>, target: &Grid<u8>, tol_px: usize) -> Result<f64> {
    let mut c = BoundaryCounts::default();
    c.add(pred, target, tol_px)?;
    Ok(c.f1())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn g(h: usize, w: usize, v: &[f64]) -> Grid<f64> {
        Grid::new(h, w, v.to_vec()).unwrap()
    }

    fn half_plane(n: usize) -> Grid<u8> {
        let mut m = Grid::filled(n, n, 0u8);
        for y in 0..n {
            for x in 0..n / 2 {
                m.set(y, x, 1);
            }
        }
        m
    }

    fn square(n: usize, y0: usize, x0: usize, side: usize) -> Grid<u8> {
        let mut m = Grid::filled(n, n, 0u8);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(y, x, 1);
            }
        }
        m
    }

    #[test]
    fn dice_examples() {
        let pred = g(2, 2, &[0.8, 0.2, 0.6, 0.4]);
        let target = g(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let d = dice_loss(&pred, &target, 1.0).unwrap();
        assert_abs_diff_eq!(d.value, 0.24, epsilon = 1e-12);

        let t = g(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        assert!(dice_loss(&t, &t, 1e-9).unwrap().value < 1e-9);
        let inv = g(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        assert!(dice_loss(&inv, &t, 1e-9).unwrap().value > 1.0 - 1e-9);
        assert!(dice_loss(&pred, &g(1, 4, &[0.0; 4]), 1.0).is_err());
    }

    #[test]
    fn bce_examples() {
        let ones = g(1, 3, &[1.0; 3]);
        assert!(bce_loss(&ones, &ones).unwrap().value <= 1e-6);
        let half = g(1, 4, &[0.5; 4]);
        let t = g(1, 4, &[1.0, 0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(
            bce_loss(&half, &t).unwrap().value,
            2f64.ln(),
            epsilon = 1e-12
        );
        let p = g(1, 2, &[0.9, 0.1]);
        let t = g(1, 2, &[1.0, 0.0]);
        assert_abs_diff_eq!(
            bce_loss(&p, &t).unwrap().value,
            -(0.9f64.ln()),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(bce_loss(&p, &t).unwrap().value, 0.1054, epsilon = 1e-4);
    }

    #[test]
    fn sobel_constant_mask_is_empty() {
        let m = Grid::filled(6, 6, 1u8);
        assert!(sobel_edges(&m, 2).data.iter().all(|&v| v == 0));
        let z = Grid::filled(6, 6, 0u8);
        assert!(sobel_edges(&z, 2).data.iter().all(|&v| v == 0));
    }

    #[test]
    fn sobel_half_plane_band_is_two_columns() {
        let e = sobel_edges(&half_plane(8), 2);
        for y in 0..8 {
            for x in 0..8 {
                let want = u8::from(x == 3 || x == 4);
                assert_eq!(e.get(y, x), want, "pixel ({y},{x})");
            }
        }
        let wide = sobel_edges(&half_plane(8), 4);
        for x in 0..8 {
            assert_eq!(wide.get(4, x), u8::from((2..=5).contains(&x)));
        }
    }

    #[test]
    fn sobel_single_pixel_covers_pixel_and_ring() {
        let m = square(7, 3, 3, 1);
        let e = sobel_edges(&m, 2);
        for y in 0..7 {
            for x in 0..7 {
                let want = u8::from((2..=4).contains(&y) && (2..=4).contains(&x));
                assert_eq!(e.get(y, x), want, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn sobel_complement_invariant() {
        let m = square(10, 2, 3, 4);
        assert_eq!(sobel_edges(&m, 2), sobel_edges(&m.complement(), 2));
        assert_eq!(sobel_edges(&m, 3), sobel_edges(&m.complement(), 3));
    }

    #[test]
    fn edge_loss_examples() {
        let pred = Grid::filled(8, 8, 0.5);
        assert_eq!(
            edge_loss(&pred, &Grid::filled(8, 8, 1u8), 2).unwrap().value,
            0.0
        );
        let mask = half_plane(8);
        assert_abs_diff_eq!(
            edge_loss(&pred, &mask, 2).unwrap().value,
            2f64.ln(),
            epsilon = 1e-12
        );
        let perfect = mask.to_float::<f64>();
        assert!(edge_loss(&perfect, &mask, 2).unwrap().value < 1e-6);
    }

    #[test]
    fn total_identity() {
        let mask = square(8, 1, 2, 4);
        let pred = Grid {
            height: 8,
            width: 8,
            data: (0..64)
                .map(|i| 0.05 + 0.9 * ((i * 37 % 64) as f64 / 64.0))
                .collect(),
        };
        for lambda in [0.0, 0.5, 2.0] {
            let w = LossWeights::new(lambda, 1.0).unwrap();
            let t = total_loss(&pred, &mask, &w).unwrap().value;
            assert_abs_diff_eq!(t.total, t.dice + t.bce + lambda * t.edge, epsilon = 1e-12);
            assert!(t.dice >= 0.0 && t.bce >= 0.0 && t.edge >= 0.0);
        }
        let zero = total_loss(&pred, &mask, &LossWeights::new(0.0, 1.0).unwrap())
            .unwrap()
            .value;
        assert_abs_diff_eq!(zero.total, zero.dice + zero.bce, epsilon = 1e-15);
    }

    #[test]
    fn lambda_arithmetic_example() {
        let terms = LossTerms {
            dice: 0.2,
            bce: 0.3,
            edge: 0.4,
            total: 0.2 + 0.3 + 0.5 * 0.4,
        };
        assert_abs_diff_eq!(terms.total, 0.7, epsilon = 1e-15);
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::new(-0.1, 1.0).is_err());
        assert!(LossWeights::new(f64::NAN, 1.0).is_err());
        assert!(LossWeights::new(0.0, 1.0).is_ok());
    }

    #[test]
    fn miou_examples() {
        let a = square(8, 0, 0, 4);
        assert_eq!(miou(&a, &a, 2).unwrap(), 1.0);
        let b = square(8, 4, 4, 4);
        assert_eq!(miou(&a, &b, 2).unwrap(), 0.0);
        // Two 4x4 squares offset by 2 columns: overlap 8, union 24.
        let c = square(8, 0, 2, 4);
        assert_abs_diff_eq!(miou(&a, &c, 2).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        let empty = Grid::filled(8, 8, 0u8);
        assert!(matches!(
            miou(&empty, &empty, 2),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn boundary_f1_examples() {
        let a = square(16, 4, 4, 6);
        assert_eq!(boundary_f1(&a, &a, 2).unwrap(), 1.0);
        let shifted1 = square(16, 5, 5, 6);
        assert_eq!(boundary_f1(&shifted1, &a, 2).unwrap(), 1.0);
        let far = square(16, 0, 0, 2);
        let far_t = square(16, 13, 13, 3);
        assert_eq!(boundary_f1(&far, &far_t, 2).unwrap(), 0.0);
        let empty = Grid::filled(8, 8, 0u8);
        assert_eq!(boundary_f1(&empty, &empty, 2).unwrap(), 1.0);
        assert_eq!(boundary_f1(&square(8, 1, 1, 3), &empty, 2).unwrap(), 0.0);
    }

    #[test]
    fn boundary_f1_offset_beyond_tolerance_is_zero() {
        // Thin vertical bars: boundaries are the bars themselves.
        let mut a = Grid::filled(12, 12, 0u8);
        let mut b = Grid::filled(12, 12, 0u8);
        for y in 0..12 {
            a.set(y, 2, 1);
            b.set(y, 2 + 3, 1);
        }
        assert_eq!(boundary_f1(&a, &b, 2).unwrap(), 0.0);
        assert_eq!(boundary_f1(&a, &b, 3).unwrap(), 1.0);
    }

    fn tiny_fusion(bias: f64, zero_wf: bool) -> FusionParams<f64> {
        let w = |r: usize, c: usize, s: u64| {
            let mut st = s;
            DenseMatrix::from_fn(r, c, |_, _| {
                st = st
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((st >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
        };
        FusionParams {
            w_f: if zero_wf {
                DenseMatrix::zeros(2, 5)
            } else {
                w(2, 5, 1)
            },
            gate_w1: w(2, 5, 2),
            gate_b1: vec![0.1, -0.2],
            gate_w2: w(2, 2, 3),
            gate_b2: vec![bias; 2],
        }
    }

    #[test]
    fn fuse_gate_limits() {
        let rgb = DenseMatrix::from_rows(&[vec![0.2, -0.4, 0.9], vec![1.0, 0.3, -0.2]]).unwrap();
        let d = DenseMatrix::from_rows(&[vec![0.5, -0.1], vec![-0.7, 0.8]]).unwrap();
        let closed = tiny_fusion(-50.0, false);
        let out = fuse(&rgb, &d, &closed).unwrap();
        let mut concat = DenseMatrix::zeros(2, 5);
        for i in 0..2 {
            concat.row_mut(i)[..3].copy_from_slice(rgb.row(i));
            concat.row_mut(i)[3..].copy_from_slice(d.row(i));
        }
        let lin = concat.matmul_nt(&closed.w_f).unwrap();
        assert!(out.sub(&lin).unwrap().max_abs() < 1e-10);

        let open = tiny_fusion(50.0, true);
        let out = fuse(&rgb, &d, &open).unwrap();
        assert!(out.sub(&d).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn fuse_matches_scalar_loop() {
        let rgb = DenseMatrix::from_rows(&[vec![0.2, -0.4, 0.9], vec![1.0, 0.3, -0.2]]).unwrap();
        let d = DenseMatrix::from_rows(&[vec![0.5, -0.1], vec![-0.7, 0.8]]).unwrap();
        let p = tiny_fusion(0.3, false);
        let out = fuse(&rgb, &d, &p).unwrap();
        for loc in 0..2 {
            let x: Vec<f64> = rgb.row(loc).iter().chain(d.row(loc)).copied().collect();
            for k in 0..2 {
                let mut lin = 0.0;
                for (j, xj) in x.iter().enumerate() {
                    lin += p.w_f.get(k, j) * xj;
                }
                let mut pre = p.gate_b2[k];
                for h in 0..2 {
                    let mut a = p.gate_b1[h];
                    for (j, xj) in x.iter().enumerate() {
                        a += p.gate_w1.get(h, j) * xj;
                    }
                    let gl = 0.5
                        * a
                        * (1.0
                            + ((2.0 / std::f64::consts::PI).sqrt() * (a + 0.044715 * a * a * a))
                                .tanh());
                    pre += p.gate_w2.get(k, h) * gl;
                }
                let gate = 1.0 / (1.0 + (-pre).exp());
                let expected = lin + gate * d.get(loc, k);
                assert_abs_diff_eq!(out.get(loc, k), expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fuse_rejects_width_mismatch() {
        let rgb = DenseMatrix::zeros(2, 4);
        let d = DenseMatrix::zeros(2, 2);
        assert!(matches!(
            fuse(&rgb, &d, &tiny_fusion(0.0, false)),
            Err(Error::Shape(_))
        ));
    }
}
