//! Temporal action localization metrics: tIoU, per-class AP and mAP.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{rank_order, ActionInstance};
use crate::parallel::{self, Execution};

/// `0.50, 0.55, …, 0.95`.
pub const AVERAGE_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
pub const SINGLE_THRESHOLD: [f64; 1] = [0.5];

/// Intersection over union of two intervals.
pub fn t_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    if !(a.0 < a.1) || !(b.0 < b.1) {
        return Err(Error::Contract(format!("t_iou on degenerate interval {a:?} / {b:?}")));
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(inter / union)
}

/// An instance tagged with the video it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub video_id: String,
    #[serde(flatten)]
    pub instance: ActionInstance,
}

impl Labeled {
    pub fn new(video_id: impl Into<String>, instance: ActionInstance) -> Self {
        Self {
            video_id: video_id.into(),
            instance,
        }
    }
}

fn labeled_order(a: &Labeled, b: &Labeled) -> std::cmp::Ordering {
    rank_order(&a.instance, &b.instance).then_with(|| a.video_id.cmp(&b.video_id))
}

/// True-positive flags of `preds` (in ranked order) under greedy matching
/// to the unmatched ground truth with the highest tIoU ≥ `thresh`.
fn match_ranked(preds: &[&Labeled], gts: &[&Labeled], thresh: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.video_id != p.video_id {
                    continue;
                }
                let iou = t_iou(p.instance.span(), g.instance.span()).unwrap_or(0.0);
                if iou >= thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Average precision of one class with an all-points interpolated envelope.
///
/// `None` when there is neither ground truth nor a prediction; `Some(0.0)`
/// when predictions exist without ground truth.
pub fn average_precision(preds: &[Labeled], gts: &[Labeled], thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return (!preds.is_empty()).then_some(0.0);
    }
    let mut ranked: Vec<&Labeled> = preds.iter().collect();
    ranked.sort_by(|a, b| labeled_order(a, b));
    let gts: Vec<&Labeled> = gts.iter().collect();
    let hits = match_ranked(&ranked, &gts, thresh);

    let n_gt = gts.len() as f64;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0.0;
    for (k, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1.0;
        }
        precision.push(tp / (k + 1) as f64);
        recall.push(tp / n_gt);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub predictions: usize,
    pub ground_truth: usize,
}

/// mAP summary. Threshold keys are formatted with two decimals; per-class
/// keys are `"<class>@<threshold>"`. mAP values are `None` when no class has
/// ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub per_threshold_map: BTreeMap<String, Option<f64>>,
    pub average_map: Option<f64>,
    pub per_class_ap: BTreeMap<String, f64>,
    pub counts: Counts,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold_map.get(&threshold_key(threshold)).copied().flatten()
    }

    /// True when there was no ground truth to score against, so every
    /// metric is undefined.
    pub fn is_empty(&self) -> bool {
        self.counts.ground_truth == 0
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("eval report", e))
    }
}

pub fn evaluate(preds: &[Labeled], gts: &[Labeled], thresholds: &[f64]) -> Result<EvalReport> {
    evaluate_with(Execution::default(), preds, gts, thresholds)
}

/// mAP at every threshold (mean AP over classes with ground truth) and
/// their mean. Class × threshold cells are scheduled by `exec`.
pub fn evaluate_with(exec: Execution, preds: &[Labeled], gts: &[Labeled], thresholds: &[f64]) -> Result<EvalReport> {
    if thresholds.is_empty() {
        return Err(Error::Config("evaluation needs at least one threshold".into()));
    }
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Config(format!("tIoU threshold {t} outside (0, 1]")));
    }
    for inst in preds.iter().chain(gts) {
        if !(inst.instance.start_sec < inst.instance.end_sec) {
            return Err(Error::Contract(format!(
                "degenerate instance in video {}",
                inst.video_id
            )));
        }
    }

    let gt_classes: BTreeSet<usize> = gts.iter().map(|g| g.instance.class_id).collect();
    let classes: BTreeSet<usize> = gt_classes
        .iter()
        .copied()
        .chain(preds.iter().map(|p| p.instance.class_id))
        .collect();
    let by_class = |c: usize, set: &[Labeled]| -> Vec<Labeled> {
        set.iter().filter(|x| x.instance.class_id == c).cloned().collect()
    };
    let grouped: Vec<(usize, Vec<Labeled>, Vec<Labeled>)> = classes
        .iter()
        .map(|&c| (c, by_class(c, preds), by_class(c, gts)))
        .collect();

    let cells: Vec<(usize, usize)> = (0..thresholds.len())
        .flat_map(|t| (0..grouped.len()).map(move |c| (t, c)))
        .collect();
    let aps = parallel::map(exec, &cells, |&(t, c)| {
        let (_, p, g) = &grouped[c];
        average_precision(p, g, thresholds[t])
    });

    let mut per_threshold_map = BTreeMap::new();
    let mut per_class_ap = BTreeMap::new();
    let mut maps = Vec::with_capacity(thresholds.len());
    for (t, &thr) in thresholds.iter().enumerate() {
        let mut sum = 0.0;
        for (c, (class, _, _)) in grouped.iter().enumerate() {
            if let Some(ap) = aps[t * grouped.len() + c] {
                per_class_ap.insert(format!("{class}@{}", threshold_key(thr)), ap);
                if gt_classes.contains(class) {
                    sum += ap;
                }
            }
        }
        let map = (!gt_classes.is_empty()).then(|| sum / gt_classes.len() as f64);
        per_threshold_map.insert(threshold_key(thr), map);
        maps.push(map);
    }
    let average_map = maps
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .map(|m| m.iter().sum::<f64>() / m.len() as f64);

    Ok(EvalReport {
        per_threshold_map,
        average_map,
        per_class_ap,
        counts: Counts {
            predictions: preds.len(),
            ground_truth: gts.len(),
        },
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn lab(video: &str, c: usize, s: f64, e: f64, score: f64) -> Labeled {
        Labeled::new(video, ActionInstance::new(c, s, e, score).unwrap())
    }

    /// Brute force: for every prefix of the ranked list re-run matching from
    /// scratch, then integrate recall steps against the best precision of any
    /// prefix reaching at least that recall.
    fn oracle_ap(preds: &[Labeled], gts: &[Labeled], thresh: f64) -> Option<f64> {
        if gts.is_empty() {
            return (!preds.is_empty()).then_some(0.0);
        }
        let mut ranked = preds.to_vec();
        ranked.sort_by(labeled_order);
        let mut points = Vec::new();
        for k in 1..=ranked.len() {
            let mut used = vec![false; gts.len()];
            let mut tp = 0;
            for p in &ranked[..k] {
                let cand = gts
                    .iter()
                    .enumerate()
                    .filter(|(j, g)| !used[*j] && g.video_id == p.video_id)
                    .map(|(j, g)| {
                        let (a, b) = (p.instance.span(), g.instance.span());
                        let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
                        (j, inter / ((a.1 - a.0) + (b.1 - b.0) - inter))
                    })
                    .filter(|&(_, iou)| iou >= thresh)
                    .fold(None::<(usize, f64)>, |acc, (j, iou)| match acc {
                        Some((_, best)) if best >= iou => acc,
                        _ => Some((j, iou)),
                    });
                if let Some((j, _)) = cand {
                    used[j] = true;
                    tp += 1;
                }
            }
            points.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64));
        }
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            if r <= prev {
                continue;
            }
            let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev) * best;
            prev = r;
        }
        Some(ap)
    }

    #[test]
    fn t_iou_examples() {
        assert_eq!(t_iou((0.0, 2.0), (0.0, 2.0)).unwrap(), 1.0);
        assert_eq!(t_iou((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
        assert!((t_iou((0.0, 2.0), (1.0, 3.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(t_iou((1.0, 1.0), (0.0, 2.0)).is_err());
    }

    #[test]
    fn ap_examples() {
        let gt = [lab("v", 1, 0.0, 10.0, 1.0)];
        let hit = [lab("v", 1, 0.0, 6.0, 0.9)];
        assert_eq!(average_precision(&hit, &gt, 0.5), Some(1.0));
        let miss = [lab("v", 1, 20.0, 30.0, 0.9)];
        assert_eq!(average_precision(&miss, &gt, 0.5), Some(0.0));

        let gts = [lab("v", 1, 0.0, 10.0, 1.0), lab("v", 1, 20.0, 30.0, 1.0)];
        let preds = [
            lab("v", 1, 0.0, 10.0, 0.9),
            lab("v", 1, 40.0, 50.0, 0.8),
            lab("v", 1, 20.0, 30.0, 0.7),
        ];
        let ap = average_precision(&preds, &gts, 0.5).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert!((oracle_ap(&preds, &gts, 0.5).unwrap() - 5.0 / 6.0).abs() < 1e-12);

        assert_eq!(average_precision(&preds, &[], 0.5), Some(0.0));
        assert_eq!(average_precision(&[], &[], 0.5), None);
    }

    #[test]
    fn matching_respects_video_boundaries() {
        let gts = [lab("a", 1, 0.0, 10.0, 1.0)];
        let preds = [lab("b", 1, 0.0, 10.0, 0.9)];
        assert_eq!(average_precision(&preds, &gts, 0.5), Some(0.0));
    }

    #[test]
    fn evaluate_examples() {
        let gts = vec![
            lab("a", 1, 0.0, 4.0, 1.0),
            lab("a", 2, 5.0, 9.0, 1.0),
            lab("b", 3, 1.0, 2.0, 1.0),
        ];
        let r = evaluate(&gts, &gts, &AVERAGE_THRESHOLDS).unwrap();
        assert_eq!(r.average_map, Some(1.0));
        assert!(r.per_threshold_map.values().all(|m| *m == Some(1.0)));
        assert_eq!(r.per_class_ap.len(), 30);

        let r = evaluate(&[], &gts, &SINGLE_THRESHOLD).unwrap();
        assert_eq!(r.map_at(0.5), Some(0.0));

        let r = evaluate(&gts, &[], &SINGLE_THRESHOLD).unwrap();
        assert_eq!(r.average_map, None);
        assert_eq!(
            r.counts,
            Counts {
                predictions: 3,
                ground_truth: 0
            }
        );

        assert!(matches!(evaluate(&gts, &gts, &[]), Err(Error::Config(_))));
        assert!(matches!(evaluate(&gts, &gts, &[0.0]), Err(Error::Config(_))));
        assert!(matches!(evaluate(&gts, &gts, &[1.2]), Err(Error::Config(_))));
    }

    #[test]
    fn evaluate_toy_set_matches_oracle() {
        let gts = vec![
            lab("a", 1, 0.0, 4.0, 1.0),
            lab("a", 1, 6.0, 9.0, 1.0),
            lab("a", 2, 5.0, 9.0, 1.0),
            lab("b", 3, 1.0, 3.0, 1.0),
            lab("b", 2, 4.0, 8.0, 1.0),
        ];
        let preds = vec![
            lab("a", 1, 0.5, 4.0, 0.95),
            lab("a", 1, 5.5, 8.0, 0.6),
            lab("a", 1, 10.0, 12.0, 0.7),
            lab("a", 2, 5.0, 7.0, 0.5),
            lab("b", 2, 4.5, 8.0, 0.8),
            lab("b", 3, 0.0, 3.0, 0.4),
            lab("b", 3, 1.0, 3.0, 0.3),
        ];
        for thr in [0.3, 0.5, 0.7] {
            let r = evaluate(&preds, &gts, &[thr]).unwrap();
            let mut expected = 0.0;
            for c in 1..=3 {
                let p: Vec<_> = preds.iter().filter(|x| x.instance.class_id == c).cloned().collect();
                let g: Vec<_> = gts.iter().filter(|x| x.instance.class_id == c).cloned().collect();
                expected += oracle_ap(&p, &g, thr).unwrap();
            }
            assert!((r.map_at(thr).unwrap() - expected / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn report_json_has_exact_keys() {
        let gts = vec![lab("a", 1, 0.0, 4.0, 1.0)];
        let r = evaluate(&gts, &gts, &SINGLE_THRESHOLD).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["average_map", "counts", "per_class_ap", "per_threshold_map"]);
        assert_eq!(v["per_class_ap"]["1@0.50"], 1.0);
        let empty = evaluate(&gts, &[], &SINGLE_THRESHOLD).unwrap();
        let v: serde_json::Value = serde_json::from_str(&empty.to_json().unwrap()).unwrap();
        assert!(v["average_map"].is_null());
    }

    fn arb_instances(max: usize, score: bool) -> impl Strategy<Value = Vec<Labeled>> {
        prop::collection::vec((0usize..2, 1usize..4, 0.0f64..20.0, 0.5f64..6.0, 0.0f64..1.0), 0..=max).prop_map(
            move |v| {
                v.into_iter()
                    .map(|(vid, c, s, len, sc)| {
                        // Quantized scores provoke ties.
                        let sc = if score { (sc * 4.0).round() / 4.0 } else { 1.0 };
                        lab(["x", "y"][vid], c, s, s + len, sc)
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn evaluate_matches_brute_force(preds in arb_instances(18, true), gts in arb_instances(12, false)) {
            let thresholds = [0.1, 0.5, 0.75];
            let r = evaluate(&preds, &gts, &thresholds).unwrap();
            let classes: BTreeSet<usize> = gts.iter().map(|g| g.instance.class_id).collect();
            for thr in thresholds {
                if classes.is_empty() {
                    prop_assert_eq!(r.map_at(thr), None);
                    continue;
                }
                let mut sum = 0.0;
                for &c in &classes {
                    let p: Vec<_> = preds.iter().filter(|x| x.instance.class_id == c).cloned().collect();
                    let g: Vec<_> = gts.iter().filter(|x| x.instance.class_id == c).cloned().collect();
                    sum += oracle_ap(&p, &g, thr).unwrap();
                }
                prop_assert!((r.map_at(thr).unwrap() - sum / classes.len() as f64).abs() < 1e-9);
            }
        }

        #[test]
        fn map_non_increasing_in_threshold(preds in arb_instances(18, true), gts in arb_instances(12, false)) {
            let r = evaluate(&preds, &gts, &AVERAGE_THRESHOLDS).unwrap();
            let maps: Vec<Option<f64>> = AVERAGE_THRESHOLDS.iter().map(|&t| r.map_at(t)).collect();
            for w in maps.windows(2) {
                if let (Some(a), Some(b)) = (w[0], w[1]) {
                    prop_assert!(b <= a + 1e-12);
                }
            }
            for ap in r.per_class_ap.values() {
                prop_assert!((0.0..=1.0 + 1e-12).contains(ap));
            }
        }

        #[test]
        fn ap_invariant_to_monotone_rescaling(preds in arb_instances(18, true), gts in arb_instances(12, false)) {
            let rescaled: Vec<Labeled> = preds
                .iter()
                .map(|p| {
                    let mut q = p.clone();
                    q.instance.score = (3.0 * p.instance.score).exp() - 0.5;
                    q
                })
                .collect();
            let a = evaluate(&preds, &gts, &[0.5]).unwrap();
            let b = evaluate(&rescaled, &gts, &[0.5]).unwrap();
            prop_assert_eq!(a.per_threshold_map, b.per_threshold_map);
        }

        #[test]
        fn sequential_and_parallel_agree(preds in arb_instances(18, true), gts in arb_instances(12, false)) {
            let a = evaluate_with(Execution::Sequential, &preds, &gts, &AVERAGE_THRESHOLDS).unwrap();
            let b = evaluate_with(Execution::Parallel, &preds, &gts, &AVERAGE_THRESHOLDS).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
