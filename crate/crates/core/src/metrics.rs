//! Change-class scores: confusion counts and the ratios derived from them,
//! ROC points, and mean boundary accuracy.
//!
//! Masks are row-major `u8` slices holding 0 (unchanged) or 1 (changed).
//! Ratios with a zero denominator are reported as 0.

use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const MBA_RADII: [usize; 4] = [1, 3, 5, 7];
pub const ROC_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn oa(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// `(FPR, TPR)`.
    pub fn roc_point(&self) -> (f64, f64) {
        (ratio(self.fp, self.fp + self.tn), ratio(self.tp, self.tp + self.fn_))
    }
}

fn check_binary(what: &str, m: &[u8]) -> Result<()> {
    match m.iter().find(|&&v| v > 1) {
        Some(v) => Err(Error::Data(format!("{what} mask holds value {v}; expected 0 or 1"))),
        None => Ok(()),
    }
}

fn check_pair(pred_len: usize, gt_len: usize) -> Result<()> {
    if pred_len != gt_len {
        return Err(Error::Data(format!("prediction has {pred_len} pixels, ground truth {gt_len}")));
    }
    Ok(())
}

pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    check_pair(pred.len(), gt.len())?;
    check_binary("prediction", pred)?;
    check_binary("ground-truth", gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// `prob ≥ t` as a binary mask.
pub fn binarize(prob: &[f64], t: f64) -> Vec<u8> {
    prob.iter().map(|&p| u8::from(p >= t)).collect()
}

/// `n + 1` evenly spaced thresholds from 1 down to 0.
pub fn default_thresholds() -> Vec<f64> {
    (0..=ROC_STEPS).map(|i| 1.0 - i as f64 / ROC_STEPS as f64).collect()
}

/// Confusion counts at each threshold (predicting `prob ≥ t`).
pub fn roc_counts(prob: &[f64], gt: &[u8], thresholds: &[f64]) -> Result<Vec<ConfusionCounts>> {
    check_pair(prob.len(), gt.len())?;
    check_binary("ground-truth", gt)?;
    if let Some(p) = prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Data(format!("probability {p} outside [0, 1]")));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let mut c = ConfusionCounts::default();
            for (&p, &g) in prob.iter().zip(gt) {
                match (p >= t, g == 1) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
            c
        })
        .collect())
}

pub fn roc_curve(prob: &[f64], gt: &[u8], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    Ok(roc_counts(prob, gt, thresholds)?.iter().map(ConfusionCounts::roc_point).collect())
}

/// Pixels with a 4-neighbor of a different label.
pub fn label_boundary<T: PartialEq + Copy>(m: &[T], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = m[y * w + x];
            out[y * w + x] = (y > 0 && m[(y - 1) * w + x] != v)
                || (y + 1 < h && m[(y + 1) * w + x] != v)
                || (x > 0 && m[y * w + x - 1] != v)
                || (x + 1 < w && m[y * w + x + 1] != v);
        }
    }
    out
}

/// Square dilation: pixels within Chebyshev distance `r` of a set pixel.
fn dilate(m: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = m[y * w + lo..=y * w + hi].iter().any(|&b| b);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

/// Accuracy inside the band of radius `r` around ground-truth boundaries,
/// or `None` when the ground truth has no boundary.
pub fn band_accuracy(pred: &[u8], gt: &[u8], h: usize, w: usize, r: usize) -> Option<f64> {
    let band = dilate(&label_boundary(gt, h, w), h, w, r);
    let mut inside = 0u64;
    let mut correct = 0u64;
    for ((&b, &p), &g) in band.iter().zip(pred).zip(gt) {
        if b {
            inside += 1;
            correct += u64::from(p == g);
        }
    }
    (inside > 0).then(|| correct as f64 / inside as f64)
}

/// Mean boundary accuracy over [`MBA_RADII`] for one `h×w` image. Without
/// any ground-truth boundary the overall accuracy is returned.
pub fn mba(pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<f64> {
    check_pair(pred.len(), gt.len())?;
    if pred.len() != h * w {
        return Err(Error::Data(format!("{} pixels do not form a {h}x{w} image", pred.len())));
    }
    check_binary("prediction", pred)?;
    check_binary("ground-truth", gt)?;
    let mut acc = Vec::with_capacity(MBA_RADII.len());
    for r in MBA_RADII {
        match band_accuracy(pred, gt, h, w, r) {
            Some(a) => acc.push(a),
            None => return Ok(confusion(pred, gt)?.oa()),
        }
    }
    Ok(acc.iter().sum::<f64>() / acc.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    pub roc: Vec<(f64, f64)>,
    pub mba: f64,
    pub counts: ConfusionCounts,
    pub images: usize,
}

/// Accumulates exact counts over many images; mBA is the mean of the
/// per-image values.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    threshold: f64,
    thresholds: Vec<f64>,
    counts: ConfusionCounts,
    roc: Vec<ConfusionCounts>,
    mba_sum: f64,
    images: usize,
}

impl Default for MetricsAccumulator {
    fn default() -> Self {
        Self::new(DEFAULT_THRESHOLD)
    }
}

impl MetricsAccumulator {
    pub fn new(threshold: f64) -> Self {
        let thresholds = default_thresholds();
        MetricsAccumulator {
            threshold,
            roc: vec![ConfusionCounts::default(); thresholds.len()],
            thresholds,
            counts: ConfusionCounts::default(),
            mba_sum: 0.0,
            images: 0,
        }
    }

    /// Adds one `h×w` probability map and its ground truth.
    pub fn add(&mut self, prob: &[f64], gt: &[u8], h: usize, w: usize) -> Result<()> {
        let pred = binarize(prob, self.threshold);
        self.counts.merge(&confusion(&pred, gt)?);
        for (acc, c) in self.roc.iter_mut().zip(roc_counts(prob, gt, &self.thresholds)?) {
            acc.merge(&c);
        }
        self.mba_sum += mba(&pred, gt, h, w)?;
        self.images += 1;
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let c = self.counts;
        MetricsReport {
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            iou: c.iou(),
            oa: c.oa(),
            roc: self.roc.iter().map(ConfusionCounts::roc_point).collect(),
            mba: if self.images == 0 { 0.0 } else { self.mba_sum / self.images as f64 },
            counts: c,
            images: self.images,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let mut gt = vec![0u8; 100];
        gt[..10].iter_mut().for_each(|v| *v = 1);
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (10, 90, 0, 0));
        for v in [c.precision(), c.recall(), c.f1(), c.iou(), c.oa()] {
            assert_eq!(v, 1.0);
        }

        let c = ConfusionCounts { tp: 8, fp: 2, fn_: 2, tn: 88 };
        assert!((c.precision() - 0.8).abs() < 1e-15);
        assert!((c.recall() - 0.8).abs() < 1e-15);
        assert!((c.f1() - 0.8).abs() < 1e-15);
        assert!((c.iou() - 8.0 / 12.0).abs() < 1e-15);
        assert!((c.oa() - 0.96).abs() < 1e-15);

        let c = confusion(&[0u8; 100], &gt).unwrap();
        assert_eq!((c.precision(), c.recall(), c.f1()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn confusion_rejects_bad_input() {
        assert!(confusion(&[0, 1], &[0]).is_err());
        assert!(confusion(&[0, 2], &[0, 1]).is_err());
    }

    #[test]
    fn roc_endpoints() {
        let prob = [0.1, 0.9, 0.4, 0.6];
        let gt = [0, 1, 1, 0];
        let pts = roc_curve(&prob, &gt, &[1.5, 0.0]).unwrap();
        assert_eq!(pts, vec![(0.0, 0.0), (1.0, 1.0)]);
        let grid = default_thresholds();
        assert_eq!(grid.len(), 101);
        assert_eq!((grid[0], grid[100]), (1.0, 0.0));
        assert!(roc_curve(&[1.2], &[1], &grid).is_err());
    }

    #[test]
    fn roc_matches_exhaustive_counting() {
        let prob = [0.05, 0.93, 0.41, 0.67, 0.5, 0.5, 0.12, 0.88, 0.3, 0.76];
        let gt = [0u8, 1, 0, 1, 1, 0, 0, 1, 1, 0];
        let grid = default_thresholds();
        let pts = roc_curve(&prob, &gt, &grid).unwrap();
        for (&t, &(fpr, tpr)) in grid.iter().zip(&pts) {
            let mut tp = 0;
            let mut fp = 0;
            for i in 0..10 {
                if prob[i] >= t {
                    if gt[i] == 1 {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            assert_eq!((fpr, tpr), (fp as f64 / 5.0, tp as f64 / 5.0), "t={t}");
        }
    }

    #[test]
    fn mba_examples() {
        let (h, w) = (8, 8);
        let gt: Vec<u8> = (0..64).map(|i| u8::from(i % 8 >= 4)).collect();
        assert_eq!(mba(&gt, &gt, h, w).unwrap(), 1.0);
        let inv: Vec<u8> = gt.iter().map(|v| 1 - v).collect();
        assert_eq!(mba(&inv, &gt, h, w).unwrap(), 0.0);

        // prediction edge one column to the right: column 4 is wrong
        let pred: Vec<u8> = (0..64).map(|i| u8::from(i % 8 >= 5)).collect();
        // boundary columns 3,4; bands: r=1 → cols 2..=5, r≥3 → 0..=7 (clipped)
        let want = [1.0 / 4.0, 1.0 / 8.0, 1.0 / 8.0, 1.0 / 8.0];
        let got: Vec<f64> = MBA_RADII.iter().map(|&r| band_accuracy(&pred, &gt, h, w, r).unwrap()).collect();
        let want: Vec<f64> = want.iter().map(|e| 1.0 - e).collect();
        assert_eq!(got, want);
        let m = mba(&pred, &gt, h, w).unwrap();
        assert!((m - want.iter().sum::<f64>() / 4.0).abs() < 1e-15);

        // no boundary: overall accuracy
        let flat = vec![0u8; 64];
        let mut p = flat.clone();
        p[0] = 1;
        assert_eq!(mba(&p, &flat, h, w).unwrap(), 63.0 / 64.0);
    }

    #[test]
    fn accumulator_merges_exactly() {
        let mut acc = MetricsAccumulator::default();
        acc.add(&[0.9, 0.2, 0.7, 0.1], &[1, 0, 0, 0], 2, 2).unwrap();
        acc.add(&[0.4, 0.6, 0.8, 0.3], &[1, 1, 1, 0], 2, 2).unwrap();
        let r = acc.report();
        assert_eq!(r.counts, ConfusionCounts { tp: 3, fp: 1, tn: 3, fn_: 1 });
        assert_eq!(r.images, 2);
        assert_eq!(r.roc.len(), 101);
    }

    fn brute_band(gt: &[u8], h: usize, w: usize, r: usize) -> Vec<bool> {
        let b = label_boundary(gt, h, w);
        (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                (0..h * w).any(|j| b[j] && ((j / w) as isize - y).abs().max(((j % w) as isize - x).abs()) <= r as isize)
            })
            .collect()
    }

    fn arb_pair() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (prop::collection::vec(0u8..2, 144), prop::collection::vec(0u8..2, 144))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn band_matches_brute_force((pred, gt) in arb_pair(), r in 0usize..8) {
            let band = brute_band(&gt, 12, 12, r);
            let n = band.iter().filter(|&&b| b).count();
            let correct = band.iter().zip(&pred).zip(&gt).filter(|((&b, p), g)| b && p == g).count();
            let want = (n > 0).then(|| correct as f64 / n as f64);
            prop_assert_eq!(band_accuracy(&pred, &gt, 12, 12, r), want);
        }

        #[test]
        fn f1_iou_identity((pred, gt) in arb_pair()) {
            let c = confusion(&pred, &gt).unwrap();
            let (f1, iou) = (c.f1(), c.iou());
            prop_assert!(iou <= f1 + 1e-15);
            prop_assert!((f1 - 2.0 * iou / (1.0 + iou)).abs() <= 1e-12);
        }

        #[test]
        fn mba_complement_symmetry((pred, gt) in arb_pair()) {
            let cp: Vec<u8> = pred.iter().map(|v| 1 - v).collect();
            let cg: Vec<u8> = gt.iter().map(|v| 1 - v).collect();
            prop_assert_eq!(mba(&pred, &gt, 12, 12).unwrap(), mba(&cp, &cg, 12, 12).unwrap());
        }

        #[test]
        fn roc_monotone(prob in prop::collection::vec(0.0f64..=1.0, 64), gt in prop::collection::vec(0u8..2, 64)) {
            let pts = roc_curve(&prob, &gt, &default_thresholds()).unwrap();
            for w in pts.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }
    }
}
