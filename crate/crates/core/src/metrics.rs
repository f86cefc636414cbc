//! Pixel-level (KL divergence, correlation) and object-level (confusion
//! counts, precision/recall/F1/accuracy, ROC and AUC) evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::{normalize_distribution, resize_bilinear, SaliencyMap};

/// Both maps are resized to this size before pixel-level metrics.
pub const METRIC_WIDTH: usize = 64;
pub const METRIC_HEIGHT: usize = 36;

/// Added to every pixel of each distribution before the KL divergence.
pub const KL_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMetrics {
    pub kl_divergence: f64,
    pub correlation: f64,
}

fn eps_distribution(map: &SaliencyMap, width: usize, height: usize) -> Result<Vec<f64>> {
    let resized = resize_bilinear(map, width, height)?;
    let dist = normalize_distribution(&resized)?;
    let shifted: Vec<f64> = dist.values().iter().map(|v| v + KL_EPS).collect();
    let total: f64 = shifted.iter().sum();
    Ok(shifted.into_iter().map(|v| v / total).collect())
}

/// `D_KL(gt || pred)` at the given resolution.
pub fn kl_divergence_at(gt: &SaliencyMap, pred: &SaliencyMap, width: usize, height: usize) -> Result<f64> {
    let p = eps_distribution(gt, width, height)?;
    let q = eps_distribution(pred, width, height)?;
    Ok(p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum())
}

/// `D_KL(gt || pred)` with both maps resized to 36x64.
pub fn kl_divergence(gt: &SaliencyMap, pred: &SaliencyMap) -> Result<f64> {
    kl_divergence_at(gt, pred, METRIC_WIDTH, METRIC_HEIGHT)
}

/// Pearson correlation over the pixels of both maps resized to `width x height`.
pub fn pearson_cc_at(gt: &SaliencyMap, pred: &SaliencyMap, width: usize, height: usize) -> Result<f64> {
    let a = resize_bilinear(gt, width, height)?;
    let b = resize_bilinear(pred, width, height)?;
    // single-pass co-moment update
    let (mut mean_a, mut mean_b) = (0.0, 0.0);
    let (mut m2a, mut m2b, mut cab) = (0.0, 0.0, 0.0);
    for (n, (x, y)) in a.values().iter().zip(b.values()).enumerate() {
        let n = (n + 1) as f64;
        let dx = x - mean_a;
        let dy = y - mean_b;
        mean_a += dx / n;
        mean_b += dy / n;
        m2a += dx * (x - mean_a);
        m2b += dy * (y - mean_b);
        cab += dx * (y - mean_b);
    }
    if m2a <= 0.0 || m2b <= 0.0 {
        return Err(Error::ConstantMap);
    }
    Ok((cab / (m2a * m2b).sqrt()).clamp(-1.0, 1.0))
}

pub fn pearson_cc(gt: &SaliencyMap, pred: &SaliencyMap) -> Result<f64> {
    pearson_cc_at(gt, pred, METRIC_WIDTH, METRIC_HEIGHT)
}

pub fn pixel_metrics(gt: &SaliencyMap, pred: &SaliencyMap) -> Result<PixelMetrics> {
    Ok(PixelMetrics {
        kl_divergence: kl_divergence(gt, pred)?,
        correlation: pearson_cc(gt, pred)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

pub fn confusion(labels: &[bool], decisions: &[bool]) -> Result<Confusion> {
    if labels.len() != decisions.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: decisions.len(),
        });
    }
    let mut c = Confusion::default();
    for (l, d) in labels.iter().zip(decisions) {
        match (l, d) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Zero denominators yield 0.
pub fn prf_accuracy(c: &Confusion) -> Prf {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf {
        precision,
        recall,
        f1,
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

fn check_scored(labels: &[bool], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores must not be NaN".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Rank-statistic AUC: the share of (positive, negative) pairs ordered
/// correctly by score, ties counting one half. Computed from mid-ranks.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check_scored(labels, scores)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        let tied_pos = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += mid * tied_pos as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC points ordered by decreasing threshold. A point at threshold `t`
/// counts scores strictly greater than `t` as positive, the same rule used
/// when selecting focused objects, so any threshold on the curve can be
/// passed straight to [`crate::attention::detect_focused`].
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
            .sum()
    }
}

pub fn roc_curve(labels: &[bool], scores: &[f64]) -> Result<RocCurve> {
    let (pos, neg) = check_scored(labels, scores)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        // nothing at or below s is counted yet
        points.push(RocPoint {
            threshold: s,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    let lowest = scores[idx[idx.len() - 1]];
    points.push(RocPoint {
        threshold: lowest.next_down(),
        tpr: 1.0,
        fpr: 1.0,
    });
    Ok(RocCurve { points })
}

/// How an operating point is picked from a ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdRule {
    /// Maximize `sqrt(TPR * (1 - FPR))`.
    #[default]
    GMean,
    /// Minimize the Euclidean distance to `(FPR, TPR) = (0, 1)`.
    Distance,
}

impl ThresholdRule {
    fn objective(self, p: &RocPoint) -> f64 {
        match self {
            ThresholdRule::GMean => (p.tpr * (1.0 - p.fpr)).sqrt(),
            ThresholdRule::Distance => -(p.fpr * p.fpr + (1.0 - p.tpr) * (1.0 - p.tpr)).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub point: RocPoint,
    pub objective: f64,
}

/// Best point under `rule`; among equal objectives the largest threshold wins.
pub fn optimal_threshold(curve: &RocCurve, rule: ThresholdRule) -> Result<OperatingPoint> {
    let mut best: Option<OperatingPoint> = None;
    for p in &curve.points {
        let objective = rule.objective(p);
        let better = match &best {
            None => true,
            Some(b) => objective > b.objective || (objective == b.objective && p.threshold > b.point.threshold),
        };
        if better {
            best = Some(OperatingPoint { point: *p, objective });
        }
    }
    best.ok_or(Error::EmptyInput)
}

/// Serialized evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kl: f64,
    pub cc: f64,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub threshold: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> SaliencyMap {
        SaliencyMap::new(w, h, (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn kl_identical_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_map(&mut rng, 90, 50);
        assert!(kl_divergence(&m, &m).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_point_mass_vs_uniform() {
        let mut v = vec![0.0; 64 * 36];
        v[700] = 1.0;
        let gt = SaliencyMap::new(64, 36, v).unwrap();
        let uniform = SaliencyMap::new(64, 36, vec![1.0; 64 * 36]).unwrap();
        let kl = kl_divergence(&gt, &uniform).unwrap();
        assert!((kl - 2304f64.ln()).abs() < 1e-2, "{kl}");
    }

    #[test]
    fn kl_scale_invariant_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_map(&mut rng, 64, 36);
        let b = random_map(&mut rng, 64, 36);
        let k1 = kl_divergence(&a, &b).unwrap();
        let k2 = kl_divergence(&a.scaled(7.0).unwrap(), &b.scaled(0.1).unwrap()).unwrap();
        assert!((k1 - k2).abs() < 1e-12);
        assert!(k1 > 0.0);
        let z = SaliencyMap::zeros(64, 36).unwrap();
        assert!(matches!(kl_divergence(&z, &a), Err(Error::AllZeroMap)));
    }

    #[test]
    fn cc_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_map(&mut rng, 64, 36);
        assert!((pearson_cc(&m, &m).unwrap() - 1.0).abs() < 1e-12);
        let inv = SaliencyMap::new(64, 36, m.values().iter().map(|v| 2.0 - v).collect()).unwrap();
        assert!((pearson_cc(&m, &inv).unwrap() + 1.0).abs() < 1e-12);
        let c = SaliencyMap::new(64, 36, vec![0.4; 2304]).unwrap();
        assert!(matches!(pearson_cc(&m, &c), Err(Error::ConstantMap)));
    }

    /// Textbook two-pass Pearson correlation.
    fn cc_oracle(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut sab = 0.0;
        let mut saa = 0.0;
        let mut sbb = 0.0;
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / (saa.sqrt() * sbb.sqrt())
    }

    #[test]
    fn cc_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = random_map(&mut rng, 64, 36);
            let b = random_map(&mut rng, 64, 36);
            let got = pearson_cc(&a, &b).unwrap();
            assert!((got - cc_oracle(a.values(), b.values())).abs() < 1e-10);
        }
    }

    #[test]
    fn confusion_examples() {
        let l = [true, false, true, false, true];
        assert_eq!(confusion(&l, &l).unwrap(), Confusion { tp: 3, fp: 0, tn: 2, fn_: 0 });
        let c = confusion(&l, &[true; 5]).unwrap();
        assert_eq!((c.fn_, c.tn), (0, 0));
        assert!(matches!(
            confusion(&l, &[true; 4]),
            Err(Error::LengthMismatch { left: 5, right: 4 })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<bool> = (0..1000).map(|_| rng.gen()).collect();
        let b: Vec<bool> = (0..1000).map(|_| rng.gen()).collect();
        let c = confusion(&a, &b).unwrap();
        let mut naive = [0usize; 4];
        for i in 0..1000 {
            let slot = if a[i] { if b[i] { 0 } else { 3 } } else if b[i] { 1 } else { 2 };
            naive[slot] += 1;
        }
        assert_eq!([c.tp, c.fp, c.tn, c.fn_], naive);
    }

    #[test]
    fn prf_examples() {
        let p = prf_accuracy(&Confusion { tp: 3, fp: 1, tn: 5, fn_: 1 });
        assert!((p.precision - 0.75).abs() < 1e-15);
        assert!((p.recall - 0.75).abs() < 1e-15);
        assert!((p.f1 - 0.75).abs() < 1e-15);
        assert!((p.accuracy - 0.8).abs() < 1e-15);
        let p = prf_accuracy(&Confusion { tp: 0, fp: 0, tn: 10, fn_: 0 });
        assert_eq!((p.precision, p.recall, p.f1, p.accuracy), (0.0, 0.0, 0.0, 1.0));
        let p = prf_accuracy(&Confusion { tp: 4, fp: 0, tn: 6, fn_: 0 });
        assert_eq!((p.precision, p.recall, p.f1, p.accuracy), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[true, true, false], &[0.9, 0.8, 0.1]).unwrap(), 1.0);
        assert_eq!(auc(&[true, false, true, false], &[0.3; 4]).unwrap(), 0.5);
        assert_eq!(auc(&[true, false, true, false], &[0.9, 0.8, 0.7, 0.1]).unwrap(), 0.75);
        assert!(matches!(auc(&[true, true], &[0.1, 0.2]), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn roc_examples() {
        let c = roc_curve(&[true, true, false, false], &[0.9, 0.8, 0.3, 0.1]).unwrap();
        assert!(c.points.iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(c.trapezoid_area(), 1.0);
        let c = roc_curve(&[true, false, false], &[0.4; 3]).unwrap();
        assert_eq!(c.points.len(), 2);
        assert_eq!((c.points[0].fpr, c.points[0].tpr), (0.0, 0.0));
        assert_eq!((c.points[1].fpr, c.points[1].tpr), (1.0, 1.0));
        for w in c.points.windows(2) {
            assert!(w[0].threshold > w[1].threshold);
        }
    }

    #[test]
    fn optimal_threshold_examples() {
        // perfect separation: thresholds 0.9, 0.8 (tpr .5), 0.3 (tpr 1, fpr 0), 0.1, below
        let c = roc_curve(&[true, true, false, false], &[0.9, 0.8, 0.3, 0.1]).unwrap();
        let op = optimal_threshold(&c, ThresholdRule::GMean).unwrap();
        assert_eq!(op.objective, 1.0);
        assert_eq!(op.point.threshold, 0.3);

        let curve = RocCurve {
            points: vec![
                RocPoint { threshold: 0.9, tpr: 0.25, fpr: 0.0 },
                RocPoint { threshold: 0.5, tpr: 0.8, fpr: 0.2 },
                RocPoint { threshold: 0.2, tpr: 0.9, fpr: 0.6 },
            ],
        };
        let objectives: Vec<f64> = curve.points.iter().map(|p| ThresholdRule::GMean.objective(p)).collect();
        assert!((objectives[0] - 0.5).abs() < 1e-12);
        assert!((objectives[1] - 0.8).abs() < 1e-12);
        assert!((objectives[2] - 0.6).abs() < 1e-12);
        assert_eq!(optimal_threshold(&curve, ThresholdRule::GMean).unwrap().point.threshold, 0.5);

        let flat = roc_curve(&[true, false, true], &[0.6; 3]).unwrap();
        assert_eq!(optimal_threshold(&flat, ThresholdRule::GMean).unwrap().point.threshold, 0.6);
    }

    #[test]
    fn rules_can_disagree() {
        let curve = RocCurve {
            points: vec![
                RocPoint { threshold: 0.8, tpr: 0.5, fpr: 0.0 },
                RocPoint { threshold: 0.4, tpr: 0.9, fpr: 0.45 },
            ],
        };
        // g-mean: 0.7071 vs 0.7036; distance to (0, 1): 0.5 vs 0.4610
        assert_eq!(optimal_threshold(&curve, ThresholdRule::GMean).unwrap().point.threshold, 0.8);
        assert_eq!(optimal_threshold(&curve, ThresholdRule::Distance).unwrap().point.threshold, 0.4);
    }

    fn pair_count_auc(labels: &[bool], scores: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn auc_agrees_with_pairs_and_trapezoid(
            data in proptest::collection::vec((any::<bool>(), 0u8..12), 2..80)
        ) {
            let labels: Vec<bool> = data.iter().map(|d| d.0).collect();
            let scores: Vec<f64> = data.iter().map(|d| d.1 as f64 / 11.0).collect();
            prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
            let a = auc(&labels, &scores).unwrap();
            prop_assert!((a - pair_count_auc(&labels, &scores)).abs() < 1e-12);
            let curve = roc_curve(&labels, &scores).unwrap();
            prop_assert!((curve.trapezoid_area() - a).abs() < 1e-12);
            // strictly increasing transform leaves AUC alone
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert!((auc(&labels, &warped).unwrap() - a).abs() < 1e-12);
            for p in &curve.points {
                prop_assert!((0.0..=1.0).contains(&p.tpr) && (0.0..=1.0).contains(&p.fpr));
            }
            for w in curve.points.windows(2) {
                prop_assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
            }
        }

        #[test]
        fn prf_in_unit_interval(tp in 0usize..50, fp in 0usize..50, tn in 0usize..50, fn_ in 0usize..50) {
            let c = Confusion { tp, fp, tn, fn_ };
            prop_assume!(c.total() > 0);
            let p = prf_accuracy(&c);
            for v in [p.precision, p.recall, p.f1, p.accuracy] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(p.accuracy == 1.0, fp == 0 && fn_ == 0);
        }

        #[test]
        fn cc_affine_invariant(seed in 0u64..1000, a in 0.1f64..10.0, b in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_map(&mut rng, 64, 36);
            let y = random_map(&mut rng, 64, 36);
            let yt = SaliencyMap::new(64, 36, y.values().iter().map(|v| a * v + b).collect()).unwrap();
            prop_assert!((pearson_cc(&x, &y).unwrap() - pearson_cc(&x, &yt).unwrap()).abs() < 1e-10);
        }
    }
}
