//! Role AP: triplet matching, all-points average precision, and the mean over verbs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{sort_triplets, ScoredTriplet};
use crate::scene::{iou, GtTriplet, Scene};

pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// True positive flag per detection, in input order.
    pub flags: Vec<bool>,
    /// Ground-truth triplets per verb.
    pub gt_per_verb: Vec<usize>,
}

/// Greedy score-order matching. A detection consumes the unmatched ground
/// truth of the same scene, verb and object class whose smaller box IoU is
/// largest, provided both IoUs reach `iou_thresh`.
pub fn match_triplets(
    detections: &[ScoredTriplet],
    gts: &[&[GtTriplet]],
    num_verbs: usize,
    iou_thresh: f64,
) -> Result<MatchResult> {
    if detections.windows(2).any(|w| !(w[0].score >= w[1].score)) {
        return Err(Error::Unsorted);
    }
    let mut gt_per_verb = vec![0; num_verbs];
    for t in gts.iter().flat_map(|g| g.iter()) {
        if t.verb >= num_verbs {
            return Err(Error::Data(format!("ground-truth verb {} outside {num_verbs} verbs", t.verb)));
        }
        gt_per_verb[t.verb] += 1;
    }
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(detections.len());
    for d in detections {
        if d.verb >= num_verbs {
            return Err(Error::Data(format!("detected verb {} outside {num_verbs} verbs", d.verb)));
        }
        let Some(scene_gts) = gts.get(d.scene) else {
            return Err(Error::Data(format!("detection refers to scene {} of {}", d.scene, gts.len())));
        };
        let mut best: Option<(usize, f64)> = None;
        for (k, t) in scene_gts.iter().enumerate() {
            if used[d.scene][k] || t.verb != d.verb || t.object_class != d.object_class {
                continue;
            }
            let hi = iou(&d.human_box, &t.human_box);
            let oi = iou(&d.object_box, &t.object_box);
            if hi < iou_thresh || oi < iou_thresh {
                continue;
            }
            let overlap = hi.min(oi);
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((k, overlap));
            }
        }
        if let Some((k, _)) = best {
            used[d.scene][k] = true;
        }
        flags.push(best.is_some());
    }
    Ok(MatchResult { flags, gt_per_verb })
}

/// Area under the precision/recall step curve; `None` without ground truth.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / num_gt as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerbAp {
    pub verb: usize,
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
    pub true_positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub map: f64,
    pub verbs_evaluated: usize,
    pub num_detections: usize,
    pub num_gt: usize,
    pub per_verb: Vec<VerbAp>,
}

impl ApReport {
    pub fn table(&self) -> String {
        let mut s = String::from("verb      AP   gt  dets    tp\n");
        for v in &self.per_verb {
            let ap = v.ap.map_or_else(|| "     -".to_string(), |a| format!("{a:6.4}"));
            let _ = writeln!(s, "{:4} {ap} {:4} {:5} {:5}", v.verb, v.num_gt, v.num_detections, v.true_positives);
        }
        let _ = writeln!(s, "mAP {:.4} over {} verbs", self.map, self.verbs_evaluated);
        s
    }
}

/// Mean AP over verbs with ground truth.
pub fn role_map(per_verb: Vec<VerbAp>) -> Result<ApReport> {
    let aps: Vec<f64> = per_verb.iter().filter_map(|v| v.ap).collect();
    if aps.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    Ok(ApReport {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        verbs_evaluated: aps.len(),
        num_detections: per_verb.iter().map(|v| v.num_detections).sum(),
        num_gt: per_verb.iter().map(|v| v.num_gt).sum(),
        per_verb,
    })
}

/// Matches sorted detections against the scenes' triplets and reports role mAP.
pub fn evaluate(detections: &[ScoredTriplet], scenes: &[Scene], num_verbs: usize) -> Result<ApReport> {
    let gts: Vec<&[GtTriplet]> = scenes.iter().map(|s| s.gt_triplets.as_slice()).collect();
    let m = match_triplets(detections, &gts, num_verbs, MATCH_IOU)?;
    let per_verb = (0..num_verbs)
        .map(|verb| {
            let flags: Vec<bool> = detections
                .iter()
                .zip(&m.flags)
                .filter(|(d, _)| d.verb == verb)
                .map(|(_, &f)| f)
                .collect();
            VerbAp {
                verb,
                ap: average_precision(&flags, m.gt_per_verb[verb]),
                num_gt: m.gt_per_verb[verb],
                num_detections: flags.len(),
                true_positives: flags.iter().filter(|&&f| f).count(),
            }
        })
        .collect();
    role_map(per_verb)
}

/// Mean mAP over `rounds` random permutations of the detection scores: the
/// same detections ranked without information.
pub fn shuffled_score_baseline(
    detections: &[ScoredTriplet],
    scenes: &[Scene],
    num_verbs: usize,
    rounds: usize,
    seed: u64,
) -> Result<f64> {
    if rounds == 0 {
        return Err(Error::Domain("baseline needs at least one round".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..rounds {
        let mut scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
        scores.shuffle(&mut rng);
        let mut shuffled = detections.to_vec();
        for (d, s) in shuffled.iter_mut().zip(scores) {
            d.score = s;
        }
        sort_triplets(&mut shuffled);
        total += evaluate(&shuffled, scenes, num_verbs)?.map;
    }
    Ok(total / rounds as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::BoundingBox;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(h: BoundingBox, o: BoundingBox, verb: usize) -> GtTriplet {
        GtTriplet {
            human_box: h,
            object_box: o,
            object_class: 1,
            verb,
        }
    }

    fn det(h: BoundingBox, o: BoundingBox, verb: usize, score: f64) -> ScoredTriplet {
        ScoredTriplet {
            scene: 0,
            human_id: 0,
            human_box: h,
            human_score: 1.0,
            object_id: 1,
            object_box: o,
            object_class: 1,
            object_score: 1.0,
            verb,
            s_r: score,
            s_c: score,
            score,
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert!((average_precision(&[true, false, true], 2).unwrap() - 0.8333333333).abs() < 1e-9);
        assert_eq!(average_precision(&[false, false], 3), Some(0.0));
        assert_eq!(average_precision(&[true], 0), None);
    }

    #[test]
    fn matching_examples() {
        let h = bx(0.0, 0.0, 10.0, 10.0);
        let o = bx(20.0, 0.0, 30.0, 10.0);
        let g = [gt(h, o, 0)];
        let r = match_triplets(&[det(h, o, 0, 0.9)], &[&g], 1, MATCH_IOU).unwrap();
        assert_eq!(r.flags, vec![true]);
        let r = match_triplets(&[det(h, o, 0, 0.9), det(h, o, 0, 0.8)], &[&g], 1, MATCH_IOU).unwrap();
        assert_eq!(r.flags, vec![true, false]);
        // human iou 0.6, object iou 0.45
        let hd = bx(0.0, 0.0, 10.0, 6.0);
        let od = bx(20.0, 0.0, 30.0, 4.5);
        assert!((iou(&h, &hd) - 0.6).abs() < 1e-12 && (iou(&o, &od) - 0.45).abs() < 1e-12);
        let r = match_triplets(&[det(hd, od, 0, 0.9)], &[&g], 1, MATCH_IOU).unwrap();
        assert_eq!(r.flags, vec![false]);
        // exactly 0.5 counts
        let od = bx(20.0, 0.0, 30.0, 5.0);
        let r = match_triplets(&[det(h, od, 0, 0.9)], &[&g], 1, MATCH_IOU).unwrap();
        assert_eq!(r.flags, vec![true]);
        // wrong verb
        let r = match_triplets(&[det(h, o, 1, 0.9)], &[&g], 2, MATCH_IOU).unwrap();
        assert_eq!(r.flags, vec![false]);
    }

    #[test]
    fn prefers_the_best_overlap() {
        let h = bx(0.0, 0.0, 10.0, 10.0);
        let o = bx(20.0, 0.0, 30.0, 10.0);
        // the first gt is eligible for the first detection but only the second overlaps fully
        let g = [gt(h, bx(20.0, 0.0, 30.0, 5.0), 0), gt(h, o, 0)];
        let r = match_triplets(&[det(h, o, 0, 0.9), det(h, bx(20.0, 0.0, 30.0, 4.0), 0, 0.5)], &[&g], 1, MATCH_IOU).unwrap();
        assert_eq!(r.flags, vec![true, true]);
    }

    #[test]
    fn unsorted_rejected() {
        let h = bx(0.0, 0.0, 10.0, 10.0);
        let g: [GtTriplet; 0] = [];
        assert!(matches!(
            match_triplets(&[det(h, h, 0, 0.1), det(h, h, 0, 0.2)], &[&g], 1, MATCH_IOU),
            Err(Error::Unsorted)
        ));
    }

    #[test]
    fn role_map_examples() {
        let v = |verb, ap: Option<f64>| VerbAp {
            verb,
            ap,
            num_gt: usize::from(ap.is_some()),
            num_detections: 0,
            true_positives: 0,
        };
        assert_eq!(role_map(vec![v(0, Some(1.0))]).unwrap().map, 1.0);
        assert_eq!(role_map(vec![v(0, Some(1.0)), v(1, Some(0.5))]).unwrap().map, 0.75);
        assert_eq!(role_map(vec![v(0, Some(1.0)), v(1, Some(0.5)), v(2, None)]).unwrap().map, 0.75);
        let err = role_map(vec![v(0, None)]).unwrap_err();
        assert_eq!(err.to_string(), "empty evaluation");
    }
}
