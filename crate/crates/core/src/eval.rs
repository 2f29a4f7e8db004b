//! Mask IoU, greedy matching, 101-point interpolated AP, mAP50-95 and
//! classification accuracy / loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};

/// One detected instance. `class` indexes the evaluation's class list.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    pub mask: Mask,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub mask: Mask,
    pub class: usize,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// `|a & b| / |a | b|`, zero when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    let (inter, union) = a.overlap_counts(b)?;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Indices into the prediction list, highest confidence first.
    pub order: Vec<usize>,
    /// TP flag for each entry of `order`.
    pub tp: Vec<bool>,
    pub num_gt: usize,
    pub false_negatives: usize,
}

/// Greedy matching of one class at one IoU threshold.
///
/// Predictions are visited by descending confidence (stable), each taking
/// the unmatched same-class ground truth with the highest IoU at or above
/// the threshold.
pub fn match_predictions(
    preds: &[InstancePrediction],
    gts: &[GroundTruth],
    class: usize,
    iou_threshold: f64,
) -> Result<MatchResult> {
    let p: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class == class).collect();
    let g: Vec<usize> = (0..gts.len()).filter(|&j| gts[j].class == class).collect();
    let mut ious = vec![0.0; p.len() * g.len()];
    for (a, &i) in p.iter().enumerate() {
        for (b, &j) in g.iter().enumerate() {
            ious[a * g.len() + b] = mask_iou(&preds[i].mask, &gts[j].mask)?;
        }
    }
    let (order, tp) = greedy(&p, preds, &ious, g.len(), iou_threshold);
    let hits = tp.iter().filter(|&&t| t).count();
    Ok(MatchResult {
        order,
        tp,
        num_gt: g.len(),
        false_negatives: g.len() - hits,
    })
}

/// `ious` is row-major over (class predictions `p`, class ground truths).
fn greedy(
    p: &[usize],
    preds: &[InstancePrediction],
    ious: &[f64],
    n_gt: usize,
    threshold: f64,
) -> (Vec<usize>, Vec<bool>) {
    let mut rank: Vec<usize> = (0..p.len()).collect();
    rank.sort_by(|&a, &b| preds[p[b]].confidence.total_cmp(&preds[p[a]].confidence));
    let mut taken = vec![false; n_gt];
    let mut tp = Vec::with_capacity(p.len());
    for &a in &rank {
        let mut best: Option<(usize, f64)> = None;
        for (b, &iou) in ious[a * n_gt..(a + 1) * n_gt].iter().enumerate() {
            if !taken[b] && iou >= threshold && best.is_none_or(|(_, v)| iou > v) {
                best = Some((b, iou));
            }
        }
        if let Some((b, _)) = best {
            taken[b] = true;
        }
        tp.push(best.is_some());
    }
    (rank.into_iter().map(|a| p[a]).collect(), tp)
}

/// 101-point interpolated AP from flags already in descending-confidence
/// order. `None` when there is nothing to score (no GT, no predictions).
pub fn average_precision(tp_flags: &[bool], num_gt: usize) -> Option<f64> {
    // strictly decreasing scores keep the given order
    let scored: Vec<(f64, bool)> = tp_flags.iter().enumerate().map(|(i, &t)| (-(i as f64), t)).collect();
    average_precision_scored(&scored, num_gt)
}

/// AP from `(confidence, is_tp)` pairs in any order. Tied confidences are
/// scored as one block, so the result depends only on the ranking.
pub fn average_precision_scored(scored: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if scored.is_empty() { None } else { Some(0.0) };
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // (tp, predictions) at the end of each confidence block
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, &(conf, hit)) in sorted.iter().enumerate() {
        tp += usize::from(hit);
        if sorted.get(k + 1).is_none_or(|n| n.0 != conf) {
            points.push((tp, k + 1));
        }
    }
    // interpolated precision: best precision at any recall >= r
    let mut best_from = vec![0.0f64; points.len() + 1];
    for i in (0..points.len()).rev() {
        let (t, n) = points[i];
        best_from[i] = best_from[i + 1].max(t as f64 / n as f64);
    }
    let mut sum = 0.0;
    let mut cursor = 0;
    for r in 0..=100usize {
        // first point with recall >= r / 100, compared in integers
        while cursor < points.len() && points[cursor].0 * 100 < r * num_gt {
            cursor += 1;
        }
        sum += best_from[cursor];
    }
    Some(sum / 101.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapSummary {
    /// AP per class at each of the ten thresholds; `None` when undefined.
    pub ap: Vec<[Option<f64>; 10]>,
    /// Mean over thresholds per class.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes that have ground truth.
    pub overall: Option<f64>,
}

/// mAP50-95 over a set of images, each a (predictions, ground truth) pair.
pub fn map50_95(images: &[(Vec<InstancePrediction>, Vec<GroundTruth>)], num_classes: usize) -> Result<MapSummary> {
    let thresholds = iou_thresholds();
    let mut ap = vec![[None; 10]; num_classes];
    let mut gt_present = vec![false; num_classes];
    for class in 0..num_classes {
        // IoUs do not depend on the threshold
        let per_image: Vec<(Vec<usize>, Vec<f64>, usize)> = images
            .iter()
            .map(|(preds, gts)| {
                let p: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class == class).collect();
                let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
                let mut ious = Vec::with_capacity(p.len() * g.len());
                for &i in &p {
                    for gt in &g {
                        ious.push(mask_iou(&preds[i].mask, &gt.mask)?);
                    }
                }
                Ok((p, ious, g.len()))
            })
            .collect::<Result<_>>()?;
        let num_gt: usize = per_image.iter().map(|x| x.2).sum();
        gt_present[class] = num_gt > 0;
        for (t, &thr) in thresholds.iter().enumerate() {
            let mut scored = Vec::new();
            for ((preds, _), (p, ious, n_gt)) in images.iter().zip(&per_image) {
                let (order, tp) = greedy(p, preds, ious, *n_gt, thr);
                scored.extend(order.iter().zip(tp).map(|(&i, hit)| (preds[i].confidence, hit)));
            }
            ap[class][t] = average_precision_scored(&scored, num_gt);
        }
    }
    let per_class: Vec<Option<f64>> = ap
        .iter()
        .map(|row| {
            let vals: Vec<f64> = row.iter().flatten().copied().collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let present: Vec<f64> = (0..num_classes)
        .filter(|&c| gt_present[c])
        .filter_map(|c| per_class[c])
        .collect();
    let overall = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(MapSummary { ap, per_class, overall })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub loss: f64,
    pub n: usize,
}

/// Argmax accuracy (ties to the lowest index) and mean negative log
/// likelihood of the true class, probabilities floored at 1e-15.
pub fn classification_report(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<ClassificationReport> {
    if probabilities.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probability rows for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("classification report over zero samples".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (row, &y) in probabilities.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {} classes", row.len())));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!("probability row sums to {s}")));
        }
        let arg = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > row[best] { i } else { best });
        correct += usize::from(arg == y);
        loss -= row[y].max(1e-15).ln();
    }
    let n = labels.len();
    Ok(ClassificationReport {
        accuracy: correct as f64 / n as f64,
        loss: loss / n as f64,
        n,
    })
}

/// Detection results in the layout of a results table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_all: Option<f64>,
    pub map_per_class: BTreeMap<String, Option<f64>>,
    pub inference_ms: Option<f64>,
    /// Per class, AP at 0.50, 0.55, ..., 0.95.
    #[serde(default)]
    pub ap_per_threshold: BTreeMap<String, Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
}

impl EvalReport {
    pub fn from_summary(summary: &MapSummary, class_names: &[&str], inference_ms: Option<f64>) -> Self {
        let map_per_class = class_names
            .iter()
            .zip(&summary.per_class)
            .map(|(n, v)| (n.to_string(), *v))
            .collect();
        let ap_per_threshold = class_names
            .iter()
            .zip(&summary.ap)
            .map(|(n, row)| (n.to_string(), row.to_vec()))
            .collect();
        EvalReport {
            map_all: summary.overall,
            map_per_class,
            inference_ms,
            ap_per_threshold,
            classification: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(w: usize, h: usize, x0: usize, y0: usize, bw: usize, bh: usize) -> Mask {
        let mut m = Mask::new(w, h);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                m.set(x, y, true);
            }
        }
        m
    }

    fn pred(mask: Mask, class: usize, confidence: f64) -> InstancePrediction {
        InstancePrediction { mask, class, confidence }
    }

    fn gt(mask: Mask, class: usize) -> GroundTruth {
        GroundTruth { mask, class }
    }

    #[test]
    fn iou_basics() {
        let a = block(4, 4, 0, 0, 2, 2);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &block(4, 4, 2, 2, 2, 2)).unwrap(), 0.0);
        assert!((mask_iou(&a, &block(4, 4, 1, 0, 2, 2)).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(mask_iou(&Mask::new(4, 4), &Mask::new(4, 4)).unwrap(), 0.0);
        assert!(mask_iou(&a, &Mask::new(3, 4)).is_err());
    }

    #[test]
    fn single_match_rule() {
        let g = vec![gt(block(8, 8, 0, 0, 4, 4), 0)];
        let p = vec![pred(block(8, 8, 0, 0, 4, 4), 0, 0.6), pred(block(8, 8, 0, 0, 4, 4), 0, 0.9)];
        let m = match_predictions(&p, &g, 0, 0.5).unwrap();
        assert_eq!(m.order, vec![1, 0]);
        assert_eq!(m.tp, vec![true, false]);
        assert_eq!(m.false_negatives, 0);

        let one = match_predictions(&p[..1], &g, 0, 0.5).unwrap();
        assert_eq!(one.tp, vec![true]);
        // wrong class never matches
        assert_eq!(match_predictions(&p, &g, 1, 0.5).unwrap().num_gt, 0);
    }

    #[test]
    fn greedy_prefers_highest_iou_gt() {
        // pred 0 overlaps both GTs, more so the second; pred 1 only fits the second
        let g = vec![gt(block(10, 1, 0, 0, 4, 1), 0), gt(block(10, 1, 3, 0, 4, 1), 0)];
        let p = vec![pred(block(10, 1, 2, 0, 4, 1), 0, 0.9), pred(block(10, 1, 3, 0, 4, 1), 0, 0.8)];
        let m = match_predictions(&p, &g, 0, 0.3).unwrap();
        // pred 0 takes GT 1 (IoU 0.6 vs 0.33); pred 1 then has no free GT above 0.3
        assert_eq!(m.tp, vec![true, false]);
        assert_eq!(m.false_negatives, 1);
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[false, true], 1), Some(0.5));
        assert_eq!(average_precision(&[], 1), Some(0.0));
        assert_eq!(average_precision(&[false], 0), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        // 2 GT, [TP, FP, TP]: precision 1 up to recall .5, 2/3 after
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
    }

    #[test]
    fn tied_confidences_score_as_a_block() {
        let a = average_precision_scored(&[(0.5, false), (0.5, true)], 1).unwrap();
        let b = average_precision_scored(&[(0.5, true), (0.5, false)], 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, 0.5);
    }

    #[test]
    fn perfect_predictions_give_one() {
        let g = vec![gt(block(8, 8, 0, 0, 3, 3), 0), gt(block(8, 8, 4, 4, 3, 2), 2)];
        let p = g.iter().map(|g| pred(g.mask.clone(), g.class, 1.0)).collect();
        let s = map50_95(&[(p, g)], 3).unwrap();
        assert_eq!(s.per_class, vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(s.overall, Some(1.0));
    }

    #[test]
    fn nothing_at_all_is_undefined() {
        let s = map50_95(&[(vec![], vec![])], 3).unwrap();
        assert_eq!(s.overall, None);
        assert!(s.per_class.iter().all(Option::is_none));
        let rep = EvalReport::from_summary(&s, &["healthy", "stressed", "spidermite"], None);
        let v: serde_json::Value = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert!(v["map_all"].is_null());
        assert!(v["map_per_class"]["stressed"].is_null());
        assert!(v["inference_ms"].is_null());
    }

    #[test]
    fn false_positive_class_scores_zero_but_is_excluded_from_overall() {
        let g = vec![gt(block(8, 8, 0, 0, 3, 3), 0)];
        let p = vec![pred(block(8, 8, 0, 0, 3, 3), 0, 0.9), pred(block(8, 8, 5, 5, 2, 2), 1, 0.4)];
        let s = map50_95(&[(p, g)], 2).unwrap();
        assert_eq!(s.per_class, vec![Some(1.0), Some(0.0)]);
        assert_eq!(s.overall, Some(1.0));
    }

    #[test]
    fn classification_cases() {
        let mut probs = vec![vec![0.8, 0.1, 0.1]; 29];
        probs.extend(vec![vec![0.1, 0.8, 0.1]; 3]);
        let r = classification_report(&probs, &[0; 32]).unwrap();
        assert_eq!(r.accuracy, 29.0 / 32.0);
        assert_eq!(format!("{:.2}", 100.0 * r.accuracy), "90.62");

        let r = classification_report(&vec![vec![1.0 / 3.0; 3]; 4], &[0, 1, 2, 0]).unwrap();
        assert!((r.loss - 3f64.ln()).abs() < 1e-12);
        // ties go to class 0
        assert_eq!(r.accuracy, 0.5);

        let r = classification_report(&[vec![0.0, 1.0], vec![1.0, 0.0]], &[1, 0]).unwrap();
        assert_eq!((r.accuracy, r.loss), (1.0, 0.0));

        assert!(classification_report(&[vec![0.5, 0.5]], &[2]).is_err());
        assert!(classification_report(&[vec![0.5, 0.6]], &[0]).is_err());
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 16), b in prop::collection::vec(any::<bool>(), 16)) {
            let ma = Mask::from_data(4, 4, a.clone()).unwrap();
            let mb = Mask::from_data(4, 4, b.clone()).unwrap();
            let x = mask_iou(&ma, &mb).unwrap();
            prop_assert_eq!(x, mask_iou(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x == 1.0, a == b && a.iter().any(|&v| v));
        }

        #[test]
        fn ap_depends_only_on_rank(
            flags in prop::collection::vec(any::<bool>(), 0..20),
            extra_gt in 0usize..4,
            scale in 0.1f64..10.0,
        ) {
            let num_gt = flags.iter().filter(|&&f| f).count() + extra_gt;
            let scored: Vec<(f64, bool)> = flags.iter().enumerate().map(|(i, &f)| (1.0 - i as f64 / 20.0, f)).collect();
            let warped: Vec<(f64, bool)> = scored.iter().map(|&(c, f)| ((scale * c).exp(), f)).collect();
            let a = average_precision_scored(&scored, num_gt);
            prop_assert_eq!(a, average_precision_scored(&warped, num_gt));
            prop_assert_eq!(a, average_precision(&flags, num_gt));
            if let Some(v) = a {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn map_is_monotone_in_threshold_and_image_order_free(
            boxes in prop::collection::vec((0usize..6, 0usize..6, 1usize..4, 0usize..6, 0usize..6, 1usize..4, 0usize..2, 0u8..4), 1..8),
        ) {
            let mut images = Vec::new();
            for (i, &(gx, gy, gs, px, py, ps, class, conf)) in boxes.iter().enumerate() {
                let g = vec![gt(block(10, 10, gx, gy, gs, gs), class)];
                let p = vec![pred(block(10, 10, px, py, ps, ps), class, f64::from(conf) / 4.0 + i as f64 * 1e-3)];
                images.push((p, g));
            }
            let s = map50_95(&images, 2).unwrap();
            for row in &s.ap {
                let vals: Vec<f64> = row.iter().flatten().copied().collect();
                for w in vals.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-12);
                }
            }
            let mut rev = images.clone();
            rev.reverse();
            prop_assert_eq!(s, map50_95(&rev, 2).unwrap());
        }
    }
}
