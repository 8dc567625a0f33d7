//! Segmentation metrics, cup-to-disc ratio, grading and screening statistics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Binary `H×W` mask stored row-major with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("mask", format!("{} values for {height}×{width}", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Contract(format!("mask value {v} is not binary")));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// `self ∧ other`, used to clip a cup to its disc.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        same_extent("mask_and", self, other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect();
        Ok(Mask { data, ..*self })
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn flip_horizontal(&self) -> Mask {
        Mask::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }
}

fn same_extent(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shapes(op, &[a.height, a.width], &[b.height, b.width]));
    }
    Ok(())
}

/// Thresholds an `H×W` probability map: `p ≥ threshold` is foreground.
pub fn binarize<T: Element>(map: &Tensor<T>, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::domain("binarize", format!("threshold {threshold} outside (0, 1)")));
    }
    let [h, w] = <[usize; 2]>::try_from(map.shape())
        .map_err(|_| Error::dim("binarize", format!("expected H×W, got {:?}", map.shape())))?;
    let t = T::of(threshold);
    Ok(Mask {
        height: h,
        width: w,
        data: map.data().iter().map(|&p| (p >= t) as u8).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn of(pred: &Mask, gt: &Mask) -> Result<Self> {
        same_extent("confusion", pred, gt)?;
        let mut c = Self::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dsc: f64,
    pub iou: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub accuracy: f64,
}

impl SegMetrics {
    pub const NAMES: [&'static str; 5] = ["dsc", "iou", "precision", "sensitivity", "accuracy"];

    pub fn from_counts(c: &ConfusionCounts) -> Self {
        // a zero denominator scores 1 when both masks are empty and 0 otherwise
        let both_empty = c.tp + c.fp + c.fn_ == 0;
        let ratio = |num: u64, den: u64| match den {
            0 if both_empty => 1.0,
            0 => 0.0,
            _ => num as f64 / den as f64,
        };
        Self {
            dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
            precision: ratio(c.tp, c.tp + c.fp),
            sensitivity: ratio(c.tp, c.tp + c.fn_),
            accuracy: ratio(c.tp + c.tn, c.total()),
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.dsc, self.iou, self.precision, self.sensitivity, self.accuracy]
    }
}

pub fn seg_metrics(pred: &Mask, gt: &Mask) -> Result<SegMetrics> {
    Ok(SegMetrics::from_counts(&ConfusionCounts::of(pred, gt)?))
}

/// Pixels of the largest 4-connected component; ties go to the component
/// met first in raster order.
pub fn largest_component(mask: &Mask) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let mut label = vec![0u32; h * w];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0;
        while let Some(k) = stack.pop() {
            size += 1;
            let (y, x) = (k / w, k % w);
            let mut visit = |j: usize| {
                if mask.data[j] == 1 && label[j] == 0 {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(k - w);
            }
            if y + 1 < h {
                visit(k + w);
            }
            if x > 0 {
                visit(k - 1);
            }
            if x + 1 < w {
                visit(k + 1);
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    Mask {
        height: h,
        width: w,
        data: label.iter().map(|&l| (best.1 != 0 && l == best.1) as u8).collect(),
    }
}

/// Row extent of the largest 4-connected component; 0 for an empty mask.
pub fn vertical_diameter(mask: &Mask) -> usize {
    let comp = largest_component(mask);
    let rows: Vec<usize> = (0..comp.height)
        .filter(|&y| comp.data[y * comp.width..(y + 1) * comp.width].contains(&1))
        .collect();
    match (rows.first(), rows.last()) {
        (Some(lo), Some(hi)) => hi - lo + 1,
        _ => 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Normal,
    Mild,
    Severe,
    OutOfRange,
}

impl Grade {
    /// `≤ 0.4` normal, `≤ 0.5` mild, `≤ 0.8` severe, above that out of range.
    pub fn of(cdr: f64) -> Self {
        if cdr <= 0.4 {
            Grade::Normal
        } else if cdr <= 0.5 {
            Grade::Mild
        } else if cdr <= 0.8 {
            Grade::Severe
        } else {
            Grade::OutOfRange
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Grade::Normal => "normal",
            Grade::Mild => "mild",
            Grade::Severe => "severe",
            Grade::OutOfRange => "out_of_range",
        }
    }

    pub fn is_glaucomatous(self) -> bool {
        self != Grade::Normal
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Grade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Grade::Normal, Grade::Mild, Grade::Severe, Grade::OutOfRange]
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Load(format!("unknown grade {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CdrResult {
    pub d_cup: usize,
    pub d_disc: usize,
    pub cdr: f64,
    pub grade: Grade,
}

pub fn compute_cdr(disc: &Mask, cup: &Mask) -> Result<CdrResult> {
    same_extent("compute_cdr", disc, cup)?;
    let d_disc = vertical_diameter(disc);
    if d_disc == 0 {
        return Err(Error::UndefinedCdr("disc mask is empty".into()));
    }
    let d_cup = vertical_diameter(cup);
    let cdr = d_cup as f64 / d_disc as f64;
    Ok(CdrResult {
        d_cup,
        d_disc,
        cdr,
        grade: Grade::of(cdr),
    })
}

/// Mean absolute difference over `(ground truth, predicted)` pairs.
pub fn cdr_error(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("cdr_error needs at least one pair".into()));
    }
    Ok(pairs.iter().map(|(g, p)| (g - p).abs()).sum::<f64>() / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Roc {
    pub auc: f64,
    /// `(false positive rate, true positive rate)` from the strictest threshold down.
    pub points: Vec<(f64, f64)>,
}

/// Rank-statistic AUC with tied scores counted half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(Error::shapes("roc_auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::domain("roc_auc", "non-finite score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Contract(format!(
            "roc_auc needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    let auc = (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n);

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = order.len();
    while k > 0 {
        let s = scores[order[k - 1]];
        while k > 0 && scores[order[k - 1]] == s {
            if labels[order[k - 1]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        points.push((fp as f64 / n, tp as f64 / p));
    }
    Ok(Roc { auc, points })
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shapes("pearson", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::Contract("pearson needs at least two points".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Contract("pearson needs nonzero variance in both inputs".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
