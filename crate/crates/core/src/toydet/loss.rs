//! Set matching between queries and ground truth, and the supervised
//! detection loss built on it.

use ndnum::{Graph, Tensor, Var};

use crate::assignment::min_cost_assignment;
use crate::error::{Error, Result};
use crate::toydet::detector::DetectorOutput;

/// Weights shared by the matching cost and the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub iou: f64,
    /// Cross-entropy weight of background targets.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            l1: 5.0,
            iou: 2.0,
            no_object: 0.1,
        }
    }
}

/// Ground-truth object with a normalised `cx, cy, w, h` box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub cxcywh: [f64; 4],
    pub class: usize,
}

/// `query_for_target[j]` is the query matched to target `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub query_for_target: Vec<usize>,
    pub cost: f64,
}

fn xyxy(c: &[f64]) -> [f64; 4] {
    [c[0] - 0.5 * c[2], c[1] - 0.5 * c[3], c[0] + 0.5 * c[2], c[1] + 0.5 * c[3]]
}

pub fn box_iou(a: &[f64], b: &[f64]) -> f64 {
    let (a, b) = (xyxy(a), xyxy(b));
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Cost of assigning a query (class probabilities `probs`, box `pred`) to `t`.
pub fn pair_cost(probs: &[f64], pred: &[f64], t: &Target, w: &LossWeights) -> f64 {
    let l1: f64 = pred.iter().zip(&t.cxcywh).map(|(p, q)| (p - q).abs()).sum();
    -w.class * probs[t.class] + w.l1 * l1 + w.iou * (1.0 - box_iou(pred, &t.cxcywh))
}

/// Minimum-cost matching of the targets of one image onto its queries.
/// `probs` and `boxes` hold one row per query.
pub fn match_predictions(probs: &[Vec<f64>], boxes: &[[f64; 4]], targets: &[Target], w: &LossWeights) -> Result<Matching> {
    if probs.len() != boxes.len() {
        return Err(Error::Mismatch {
            what: "query count",
            left: probs.len(),
            right: boxes.len(),
        });
    }
    if targets.len() > boxes.len() {
        return Err(Error::TooManyObjects {
            objects: targets.len(),
            queries: boxes.len(),
        });
    }
    if targets.is_empty() {
        return Ok(Matching {
            query_for_target: Vec::new(),
            cost: 0.0,
        });
    }
    let cost: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| probs.iter().zip(boxes).map(|(p, b)| pair_cost(p, b, t, w)).collect())
        .collect();
    let a = min_cost_assignment(&cost)?;
    Ok(Matching {
        query_for_target: a.row_to_col,
        cost: a.cost,
    })
}

/// Matches every image of a forward pass against its targets.
pub fn match_batch(g: &mut Graph, out: &DetectorOutput, targets: &[Vec<Target>], w: &LossWeights) -> Result<Vec<Matching>> {
    if targets.len() != out.batch {
        return Err(Error::Mismatch {
            what: "target batch size",
            left: out.batch,
            right: targets.len(),
        });
    }
    let probs_var = g.softmax(out.logits)?;
    let probs = g.value(probs_var);
    let boxes = g.value(out.boxes);
    let m = boxes.shape()[0] / out.batch;
    let result: Result<Vec<Matching>> = (0..out.batch)
        .map(|b| {
            let p: Vec<Vec<f64>> = (0..m).map(|q| probs.row(b * m + q).to_vec()).collect();
            let bx: Vec<[f64; 4]> = (0..m)
                .map(|q| {
                    let r = boxes.row(b * m + q);
                    [r[0], r[1], r[2], r[3]]
                })
                .collect();
            match_predictions(&p, &bx, &targets[b], w)
        })
        .collect();
    let result = result?;
    // the assignment is a discrete decision; record it for gradient checks
    for m in &result {
        let token = m.query_for_target.iter().fold(0x5bd1_e995u64, |h, &q| h.wrapping_mul(31).wrapping_add(q as u64 + 1));
        g.mark_branch(token);
    }
    Ok(result)
}

/// The three loss components and their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub total: Var,
    pub class: Var,
    pub l1: Option<Var>,
    pub iou: Option<Var>,
}

/// Weighted cross-entropy over all queries (background for unmatched ones)
/// plus L1 and `1 − IoU` over matched pairs, box terms averaged over targets.
pub fn detection_loss(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    targets: &[Vec<Target>],
    matchings: &[Matching],
    w: &LossWeights,
) -> Result<DetectionLoss> {
    let [rows, k] = *g.shape(logits) else {
        return Err(Error::Invalid("logits must be a matrix".into()));
    };
    let batch = targets.len();
    if batch == 0 || rows % batch != 0 || matchings.len() != batch {
        return Err(Error::Invalid("batch layout mismatch in detection loss".into()));
    }
    let m = rows / batch;
    let background = k - 1;
    let mut class_of_row = vec![background; rows];
    let mut matched_rows = Vec::new();
    let mut matched_targets = Vec::new();
    for (b, (ts, mt)) in targets.iter().zip(matchings).enumerate() {
        for (t, &q) in ts.iter().zip(&mt.query_for_target) {
            class_of_row[b * m + q] = t.class;
            matched_rows.push(b * m + q);
            matched_targets.push(*t);
        }
    }

    let probs = g.softmax(logits)?;
    let logp = g.log(probs)?;
    let picked = g.select(logp, class_of_row.iter().enumerate().map(|(r, &c)| r * k + c).collect::<Vec<_>>())?;
    let weights: Vec<f64> = class_of_row.iter().map(|&c| if c == background { w.no_object } else { 1.0 }).collect();
    let wsum: f64 = weights.iter().sum();
    let wv = g.constant(Tensor::vector(weights));
    let weighted = g.mul(picked, wv)?;
    let ce = g.sum(weighted)?;
    let class = g.scalar_mul(ce, -1.0 / wsum)?;

    if matched_rows.is_empty() {
        let total = g.scalar_mul(class, w.class)?;
        return Ok(DetectionLoss {
            total,
            class,
            l1: None,
            iou: None,
        });
    }
    let n = matched_rows.len();
    let index: Vec<usize> = matched_rows.iter().flat_map(|&r| (0..4).map(move |c| r * 4 + c)).collect();
    let pred = g.gather(boxes, index, &[n, 4])?;
    let gt = g.constant(Tensor::matrix(n, 4, matched_targets.iter().flat_map(|t| t.cxcywh).collect())?);
    let diff = g.sub(pred, gt)?;
    let ad = g.abs(diff)?;
    let l1_sum = g.sum(ad)?;
    let l1 = g.scalar_mul(l1_sum, 1.0 / n as f64)?;

    let iou = iou_rows(g, pred, gt)?;
    let one_minus = g.rsub_scalar(1.0, iou)?;
    let iou_sum = g.sum(one_minus)?;
    let iou_loss = g.scalar_mul(iou_sum, 1.0 / n as f64)?;

    let terms = [
        g.scalar_mul(class, w.class)?,
        g.scalar_mul(l1, w.l1)?,
        g.scalar_mul(iou_loss, w.iou)?,
    ];
    let total = g.add_all(&terms)?;
    Ok(DetectionLoss {
        total,
        class,
        l1: Some(l1),
        iou: Some(iou_loss),
    })
}

/// Row-wise IoU of two `n × 4` centre/size matrices, as a length-`n` vector.
pub fn iou_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let corners = |g: &mut Graph, m: Var| -> Result<[Var; 4]> {
        let cx = g.column(m, 0)?;
        let cy = g.column(m, 1)?;
        let w = g.column(m, 2)?;
        let h = g.column(m, 3)?;
        let hw = g.scalar_mul(w, 0.5)?;
        let hh = g.scalar_mul(h, 0.5)?;
        Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
    };
    let pa = corners(g, a)?;
    let pb = corners(g, b)?;
    let ix0 = g.maximum(pa[0], pb[0])?;
    let iy0 = g.maximum(pa[1], pb[1])?;
    let ix1 = g.minimum(pa[2], pb[2])?;
    let iy1 = g.minimum(pa[3], pb[3])?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw)?;
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;
    let area = |g: &mut Graph, p: &[Var; 4]| -> Result<Var> {
        let w = g.sub(p[2], p[0])?;
        let h = g.sub(p[3], p[1])?;
        Ok(g.mul(w, h)?)
    };
    let aa = area(g, &pa)?;
    let ab = area(g, &pb)?;
    let sum = g.add(aa, ab)?;
    let union = g.sub(sum, inter)?;
    Ok(g.div(inter, union)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_perfect_query_is_matched() {
        let t = Target {
            cxcywh: [0.5, 0.5, 0.2, 0.2],
            class: 1,
        };
        let m = match_predictions(&[vec![0.0, 1.0, 0.0, 0.0]], &[t.cxcywh], &[t], &LossWeights::default()).unwrap();
        assert_eq!(m.query_for_target, vec![0]);
        assert!((m.cost + 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_many_objects() {
        let t = Target {
            cxcywh: [0.5, 0.5, 0.2, 0.2],
            class: 0,
        };
        let r = match_predictions(&[vec![0.25; 4]], &[[0.5; 4]], &[t, t], &LossWeights::default());
        assert!(matches!(r, Err(Error::TooManyObjects { .. })));
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 4, vec![0.5, 0.5, 0.2, 0.2, 0.2, 0.2, 0.1, 0.1]).unwrap());
        let b = g.constant(Tensor::matrix(2, 4, vec![0.5, 0.5, 0.2, 0.2, 0.8, 0.8, 0.1, 0.1]).unwrap());
        let iou = iou_rows(&mut g, a, b).unwrap();
        assert!((g.value(iou).data()[0] - 1.0).abs() < 1e-15);
        assert_eq!(g.value(iou).data()[1], 0.0);
    }

    #[test]
    fn perfect_prediction_has_zero_box_terms() {
        let mut g = Graph::new();
        let t = Target {
            cxcywh: [0.4, 0.6, 0.3, 0.2],
            class: 2,
        };
        let logits = g.constant(Tensor::matrix(1, 4, vec![0.0, 0.0, 50.0, 0.0]).unwrap());
        let boxes = g.constant(Tensor::matrix(1, 4, t.cxcywh.to_vec()).unwrap());
        let m = Matching {
            query_for_target: vec![0],
            cost: 0.0,
        };
        let l = detection_loss(&mut g, logits, boxes, &[vec![t]], &[m], &LossWeights::default()).unwrap();
        assert_eq!(g.scalar(l.l1.unwrap()), 0.0);
        assert!(g.scalar(l.iou.unwrap()).abs() < 1e-15);
        assert!(g.scalar(l.class) < 1e-20);
    }
}
