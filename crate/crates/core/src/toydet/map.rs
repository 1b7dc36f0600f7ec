//! Mean average precision over IoU thresholds, all-points interpolation.

use crate::pseudo::Detection;
use crate::toydet::scene::Annotation;

pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq)]
pub struct MapTable {
    pub thresholds: Vec<f64>,
    /// `ap[t][c]`; `None` when class `c` has no ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    /// Mean over classes with ground truth, per threshold.
    pub map: Vec<f64>,
}

impl MapTable {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-12)
            .map(|i| self.map[i])
    }

    /// `mAP@t / mAP@0.5`; zero when `mAP@0.5` is zero.
    pub fn ratio(&self, threshold: f64) -> Option<f64> {
        let base = self.at(0.5)?;
        let v = self.at(threshold)?;
        Some(if base > 0.0 { v / base } else { 0.0 })
    }
}

/// Average precision for one class at one IoU threshold.
///
/// Detections are ranked by score (descending), ties by image index and then
/// by position within the image. Each ground-truth box can be claimed once;
/// a detection claims the unclaimed box of its class with the highest IoU.
pub fn average_precision(preds: &[Vec<Detection>], gts: &[Vec<Annotation>], class: usize, threshold: f64) -> Option<f64> {
    let total: usize = gts.iter().map(|g| g.iter().filter(|a| a.class == class).count()).sum();
    if total == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, usize, &Detection)> = preds
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().enumerate().filter(|(_, d)| d.class == class).map(move |(j, d)| (i, j, d)))
        .collect();
    ranked.sort_by(|a, b| b.2.score.total_cmp(&a.2.score).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(ranked.len());
    for (img, _, d) in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (k, a) in gts.get(*img).into_iter().flatten().enumerate() {
            if a.class != class || claimed[*img][k] {
                continue;
            }
            let iou = d.bbox.iou(&a.bbox);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((k, iou));
            }
        }
        match best {
            Some((k, _)) => {
                claimed[*img][k] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }

    // precision envelope integrated over recall steps
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / total as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

pub fn evaluate_map(preds: &[Vec<Detection>], gts: &[Vec<Annotation>], num_classes: usize, thresholds: &[f64]) -> MapTable {
    let ap: Vec<Vec<Option<f64>>> = thresholds
        .iter()
        .map(|&t| (0..num_classes).map(|c| average_precision(preds, gts, c, t)).collect())
        .collect();
    let map = ap
        .iter()
        .map(|row| {
            let present: Vec<f64> = row.iter().flatten().copied().collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        })
        .collect();
    MapTable {
        thresholds: thresholds.to_vec(),
        ap,
        map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn ann(x: f64, class: usize) -> Annotation {
        Annotation {
            bbox: BBox::new(x, x, x + 10.0, x + 10.0),
            class,
        }
    }

    fn det(a: &Annotation, score: f64) -> Detection {
        Detection {
            bbox: a.bbox,
            score,
            class: a.class,
        }
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let gts = vec![vec![ann(0.0, 0), ann(20.0, 1)], vec![ann(5.0, 2)]];
        let preds: Vec<Vec<Detection>> = gts.iter().map(|g| g.iter().map(|a| det(a, 1.0)).collect()).collect();
        let t = evaluate_map(&preds, &gts, 3, &THRESHOLDS);
        assert!(t.map.iter().all(|&m| m == 1.0));
        assert_eq!(t.ratio(0.9), Some(1.0));
    }

    #[test]
    fn no_predictions_score_zero() {
        let gts = vec![vec![ann(0.0, 0)]];
        let t = evaluate_map(&[vec![]], &gts, 3, &THRESHOLDS);
        assert!(t.map.iter().all(|&m| m == 0.0));
    }
}
