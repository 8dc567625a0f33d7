//! Segmentation losses on the tape.
//!
//! Every loss takes a constant ground truth and a prediction of equal shape
//! with rank ≥ 2. The last two axes are one `H×W` plane; leading axes index
//! independent planes and the loss is the mean of the per-plane values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const BCE_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-6;

/// Mixture weights of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_mae: f64,
    pub lambda_dice: f64,
    pub lambda_iou: f64,
    pub lambda_bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mae: 0.15,
            lambda_dice: 0.4,
            lambda_iou: 0.3,
            lambda_bce: 0.15,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_mae, self.lambda_dice, self.lambda_iou, self.lambda_bce];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {all:?}")));
        }
        Ok(())
    }
}

/// Unweighted loss terms of one output channel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Components {
    pub mae: f64,
    pub dice: f64,
    pub iou: f64,
    pub bce: f64,
}

impl Components {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.lambda_mae * self.mae + w.lambda_dice * self.dice + w.lambda_iou * self.iou + w.lambda_bce * self.bce
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub disc: Components,
    pub cup: Components,
}

impl LossBreakdown {
    pub const NAMES: [&'static str; 8] = [
        "disc_mae", "disc_dice", "disc_iou", "disc_bce", "cup_mae", "cup_dice", "cup_iou", "cup_bce",
    ];

    pub fn components(&self) -> [f64; 8] {
        let (d, c) = (&self.disc, &self.cup);
        [d.mae, d.dice, d.iou, d.bce, c.mae, c.dice, c.iou, c.bce]
    }
}

/// `(planes, H, W)` after checking shapes.
fn planes<T: Element>(op: &'static str, tape: &Tape<T>, gt: &Tensor<T>, s: Var) -> Result<(usize, usize, usize)> {
    let sh = tape.shape(s);
    if sh != gt.shape() {
        return Err(Error::shapes(op, gt.shape(), sh));
    }
    if sh.len() < 2 {
        return Err(Error::dim(op, format!("need at least an H×W plane, got {sh:?}")));
    }
    let (h, w) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    let p = sh[..sh.len() - 2].iter().product();
    if h * w == 0 || p == 0 {
        return Err(Error::dim(op, format!("empty input {sh:?}")));
    }
    Ok((p, h, w))
}

/// Per-plane sums of a `P×HW` map, as `P×1`.
fn row_sums<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let hw = tape.shape(x)[1];
    let ones = tape.constant(Tensor::ones([hw, 1]));
    tape.matmul(x, ones)
}

/// Flattened prediction and ground truth as `P×HW`.
fn flat<T: Element>(tape: &mut Tape<T>, gt: &Tensor<T>, s: Var, p: usize, hw: usize) -> Result<(Var, Var)> {
    let sf = tape.reshape(s, [p, hw])?;
    let g = tape.constant(gt.reshape([p, hw])?);
    Ok((sf, g))
}

/// Mean absolute error; subgradient 0 at exact ties.
pub fn mae_loss<T: Element>(tape: &mut Tape<T>, gt: &Tensor<T>, s: Var) -> Result<Var> {
    planes("mae_loss", tape, gt, s)?;
    let g = tape.constant(gt.clone());
    let d = tape.sub(s, g)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Binary cross-entropy with the prediction clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Element>(tape: &mut Tape<T>, gt: &Tensor<T>, s: Var) -> Result<Var> {
    planes("bce_loss", tape, gt, s)?;
    let c = tape.clamp(s, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let log_s = tape.log(c)?;
    let one_minus = tape.scale(c, -1.0)?;
    let one_minus = tape.offset(one_minus, 1.0)?;
    let log_1s = tape.log(one_minus)?;
    let g = tape.constant(gt.clone());
    let g1 = tape.constant(gt.map(|v| T::one() - v));
    let a = tape.mul(g, log_s)?;
    let b = tape.mul(g1, log_1s)?;
    let t = tape.add(a, b)?;
    let m = tape.mean(t)?;
    tape.scale(m, -1.0)
}

/// `1 - (2 Σ s·g + ε) / (Σ s² + Σ g² + ε)` per plane.
pub fn dice_loss<T: Element>(tape: &mut Tape<T>, gt: &Tensor<T>, s: Var) -> Result<Var> {
    let (p, h, w) = planes("dice_loss", tape, gt, s)?;
    let (sf, g) = flat(tape, gt, s, p, h * w)?;
    let sg = tape.mul(sf, g)?;
    let inter = row_sums(tape, sg)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.offset(num, DICE_EPS)?;
    let s2 = tape.mul(sf, sf)?;
    let s2 = row_sums(tape, s2)?;
    let g2: Vec<T> = gt
        .data()
        .chunks(h * w)
        .map(|c| c.iter().map(|&v| v * v).sum::<T>() + T::of(DICE_EPS))
        .collect();
    let g2 = tape.constant(Tensor::new([p, 1], g2)?);
    let den = tape.add(s2, g2)?;
    let ratio = tape.div(num, den)?;
    let m = tape.mean(ratio)?;
    let neg = tape.scale(m, -1.0)?;
    tape.offset(neg, 1.0)
}

/// Bounding box `(y0, y1, x0, x1)` inclusive of `{gt = 1} ∪ {s ≥ 0.5}` on one plane.
fn union_box<T: Element>(gt: &[T], s: &[T], h: usize, w: usize) -> Option<[usize; 4]> {
    let half = T::of(0.5);
    let mut bx: Option<[usize; 4]> = None;
    for y in 0..h {
        for x in 0..w {
            let k = y * w + x;
            if gt[k] >= half || s[k] >= half {
                bx = Some(match bx {
                    None => [y, y, x, x],
                    Some([y0, y1, x0, x1]) => [y0.min(y), y1.max(y), x0.min(x), x1.max(x)],
                });
            }
        }
    }
    bx
}

const NO_BOX: u32 = u32::MAX;

/// Generalized IoU loss `1 - IoU + |X \ (GT ∪ S)| / |X|` per plane, with soft
/// intersection `Σ s·g`, soft union `Σ (s + g - s·g)`, and `X` the bounding
/// box of the thresholded union. Planes with an empty union score 1.
pub fn iou_loss<T: Element>(tape: &mut Tape<T>, gt: &Tensor<T>, s: Var) -> Result<Var> {
    let (p, h, w) = planes("iou_loss", tape, gt, s)?;
    let hw = h * w;
    let mut fresh = Vec::with_capacity(4 * p);
    {
        let sv = tape.value(s).data();
        for i in 0..p {
            let b = union_box(&gt.data()[i * hw..(i + 1) * hw], &sv[i * hw..(i + 1) * hw], h, w);
            fresh.extend(b.map_or([NO_BOX; 4], |b| b.map(|v| v as u32)));
        }
    }
    let boxes = tape.resolve("iou_loss", fresh)?;
    let mut mask = vec![T::zero(); p * hw];
    let mut valid = vec![T::zero(); p];
    let mut area = vec![T::one(); p];
    let mut union_guard = vec![T::zero(); p];
    for i in 0..p {
        let b = &boxes[4 * i..4 * i + 4];
        if b[0] == NO_BOX {
            union_guard[i] = T::one();
            continue;
        }
        let [y0, y1, x0, x1] = [b[0], b[1], b[2], b[3]].map(|v| v as usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                mask[i * hw + y * w + x] = T::one();
            }
        }
        valid[i] = T::one();
        area[i] = T::of(((y1 - y0 + 1) * (x1 - x0 + 1)) as f64);
    }
    let (sf, g) = flat(tape, gt, s, p, hw)?;
    let sg = tape.mul(sf, g)?;
    let inter = row_sums(tape, sg)?;
    let sg_sum = tape.add(sf, g)?;
    let u = tape.sub(sg_sum, sg)?;
    let uni = row_sums(tape, u)?;
    let guard = tape.constant(Tensor::new([p, 1], union_guard)?);
    let uni = tape.add(uni, guard)?;
    let iou = tape.div(inter, uni)?;
    let mask = tape.constant(Tensor::new([p, hw], mask)?);
    let inside = tape.mul(u, mask)?;
    let covered = row_sums(tape, inside)?;
    let area = tape.constant(Tensor::new([p, 1], area)?);
    let frac = tape.div(covered, area)?;
    // slack = 1 - covered / |X|; per-plane loss = 1 + valid·(slack - iou)
    let neg_frac = tape.scale(frac, -1.0)?;
    let slack = tape.offset(neg_frac, 1.0)?;
    let diff = tape.sub(slack, iou)?;
    let valid = tape.constant(Tensor::new([p, 1], valid)?);
    let per = tape.mul(diff, valid)?;
    let m = tape.mean(per)?;
    tape.offset(m, 1.0)
}

/// Weighted four-term loss on both output channels.
///
/// `gt` and the prediction are `N×2×H×W`; each channel contributes
/// `ω_c (λ_mae MAE + λ_dice Dice + λ_iou IoU + λ_bce BCE)` and the total is their sum.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    gt: &Tensor<T>,
    pred: Var,
    weights: &LossWeights,
    channel_weights: [f64; 2],
) -> Result<(Var, LossBreakdown)> {
    let sh = tape.shape(pred).to_vec();
    if sh.len() != 4 || sh[1] != 2 || gt.shape() != sh.as_slice() {
        return Err(Error::shapes("total_loss", gt.shape(), &sh));
    }
    let mut terms = Vec::with_capacity(2);
    let mut parts = [Components::default(); 2];
    for c in 0..2 {
        let s = tape.narrow(pred, 1, c, 1)?;
        let g = channel(gt, c)?;
        let mae = mae_loss(tape, &g, s)?;
        let dice = dice_loss(tape, &g, s)?;
        let iou = iou_loss(tape, &g, s)?;
        let bce = bce_loss(tape, &g, s)?;
        parts[c] = Components {
            mae: tape.value(mae).item().as_f64(),
            dice: tape.value(dice).item().as_f64(),
            iou: tape.value(iou).item().as_f64(),
            bce: tape.value(bce).item().as_f64(),
        };
        let om = channel_weights[c];
        let weighted = [
            (mae, weights.lambda_mae),
            (dice, weights.lambda_dice),
            (iou, weights.lambda_iou),
            (bce, weights.lambda_bce),
        ]
        .into_iter()
        .map(|(v, l)| tape.scale(v, l * om))
        .collect::<Result<Vec<_>>>()?;
        let mut acc = weighted[0];
        for &t in &weighted[1..] {
            acc = tape.add(acc, t)?;
        }
        terms.push(acc);
    }
    let total = tape.add(terms[0], terms[1])?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item().as_f64(),
        disc: parts[0],
        cup: parts[1],
    };
    Ok((total, breakdown))
}

/// Channel `c` of an `N×C×H×W` tensor, kept as `N×1×H×W`.
pub fn channel<T: Element>(x: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    if sh.len() != 4 || c >= sh[1] {
        return Err(Error::dim("channel", format!("channel {c} of {sh:?}")));
    }
    let (n, ch, hw) = (sh[0], sh[1], sh[2] * sh[3]);
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        out.extend_from_slice(&x.data()[(i * ch + c) * hw..(i * ch + c + 1) * hw]);
    }
    Tensor::new([n, 1, sh[2], sh[3]], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Tensor<f64> {
        Tensor::from_fn([1, h, w], |i| {
            let (y, x) = (i / w, i % w);
            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    }

    fn eval(f: fn(&mut Tape<f64>, &Tensor<f64>, Var) -> Result<Var>, gt: &Tensor<f64>, s: &Tensor<f64>) -> f64 {
        let mut t = Tape::new();
        let sv = t.constant(s.clone());
        let l = f(&mut t, gt, sv).unwrap();
        t.value(l).item()
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let g = Tensor::full([1, 4, 4], 0.5);
        assert!((eval(bce_loss, &g, &g) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let g = rect(8, 8, 2, 6, 1, 5);
        assert!(eval(bce_loss, &g, &g) < 1e-5);
        assert!(eval(dice_loss, &g, &g) < 1e-5);
        assert!(eval(iou_loss, &g, &g).abs() < 1e-12);
        assert_eq!(eval(mae_loss, &g, &g), 0.0);
    }

    #[test]
    fn dice_half_overlap() {
        let a = rect(8, 8, 0, 4, 0, 4);
        let b = rect(8, 8, 0, 4, 2, 6);
        let want = 1.0 - (2.0 * 8.0 + DICE_EPS) / (16.0 + 16.0 + DICE_EPS);
        assert!((eval(dice_loss, &a, &b) - want).abs() < 1e-12);
        assert!((eval(dice_loss, &a, &b) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn disjoint_dice_is_one() {
        let a = rect(8, 8, 0, 2, 0, 2);
        let b = rect(8, 8, 5, 7, 5, 7);
        assert!((eval(dice_loss, &a, &b) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn giou_of_side_by_side_rectangles() {
        // two 2×3 blocks separated by one column: box 2×7, union 12, intersection 0
        let a = rect(6, 8, 1, 3, 0, 3);
        let b = rect(6, 8, 1, 3, 4, 7);
        let want = 1.0 - 0.0 + (14.0 - 12.0) / 14.0;
        assert!((eval(iou_loss, &a, &b) - want).abs() < 1e-12);
    }

    #[test]
    fn empty_union_scores_one() {
        let z = Tensor::zeros([2, 4, 4]);
        let s = Tensor::full([2, 4, 4], 0.2);
        assert_eq!(eval(iou_loss, &z, &s), 1.0);
    }

    #[test]
    fn mae_constant() {
        let g = Tensor::ones([1, 3, 3]);
        let s = Tensor::full([1, 3, 3], 0.25);
        assert!((eval(mae_loss, &g, &s) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut t = Tape::<f64>::new();
        let s = t.constant(Tensor::zeros([1, 4, 4]));
        assert!(matches!(dice_loss(&mut t, &Tensor::zeros([1, 4, 5]), s), Err(Error::Dimension { .. })));
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!([w.lambda_mae, w.lambda_dice, w.lambda_iou, w.lambda_bce], [0.15, 0.4, 0.3, 0.15]);
    }
}
