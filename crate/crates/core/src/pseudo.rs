//! Pseudo-label filtering and box-to-mask rasterisation.
//!
//! Target images get their boxes from confident detections, source images from
//! ground truth; both become class-agnostic [`PseudoBoxSet`]s and then per-level
//! binary [`WeightMask`]s used to gate the object-aware alignment loss.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{BBox, LevelGeometry};

/// Pseudo-label confidence threshold used unless configured otherwise.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxOrigin {
    Pseudo,
    GroundTruth,
}

/// Class-agnostic boxes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBoxSet {
    pub boxes: Vec<BBox>,
    /// Confidence per box; 1.0 for ground truth.
    pub scores: Vec<f64>,
    pub origin: BoxOrigin,
}

impl PseudoBoxSet {
    pub fn ground_truth(boxes: impl IntoIterator<Item = BBox>) -> Self {
        let boxes: Vec<BBox> = boxes.into_iter().collect();
        let scores = vec![1.0; boxes.len()];
        Self {
            boxes,
            scores,
            origin: BoxOrigin::GroundTruth,
        }
    }

    pub fn empty(origin: BoxOrigin) -> Self {
        Self {
            boxes: Vec::new(),
            scores: Vec::new(),
            origin,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub set: PseudoBoxSet,
    /// Detections dropped because their box was degenerate or non-finite.
    pub malformed: usize,
}

/// Keeps the boxes whose score is strictly greater than `tau`; classes are
/// discarded.
pub fn filter_detections(dets: &[Detection], tau: f64) -> FilterOutcome {
    let mut set = PseudoBoxSet::empty(BoxOrigin::Pseudo);
    let mut malformed = 0;
    for d in dets {
        if !d.bbox.is_well_formed() || !d.score.is_finite() {
            malformed += 1;
            continue;
        }
        if d.score > tau {
            set.boxes.push(d.bbox);
            set.scores.push(d.score);
        }
    }
    FilterOutcome { set, malformed }
}

/// Per-level binary foreground indicator for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightMask {
    pub levels: Vec<Vec<u8>>,
}

impl WeightMask {
    pub fn zeros(geometry: &[LevelGeometry]) -> Self {
        Self {
            levels: geometry.iter().map(|l| vec![0; l.cells()]).collect(),
        }
    }

    pub fn ones(geometry: &[LevelGeometry]) -> Self {
        Self {
            levels: geometry.iter().map(|l| vec![1; l.cells()]).collect(),
        }
    }

    pub fn count(&self, level: usize) -> usize {
        self.levels[level].iter().filter(|&&w| w != 0).count()
    }
}

/// Marks cell `(u, v)` of level `l` iff its centre lies inside at least one
/// box (inclusive bounds).
pub fn rasterize_masks(boxes: &PseudoBoxSet, geometry: &[LevelGeometry]) -> WeightMask {
    let mut mask = WeightMask::zeros(geometry);
    for (level, geo) in geometry.iter().enumerate() {
        let s = geo.stride as f64;
        let cells = &mut mask.levels[level];
        for b in &boxes.boxes {
            // centres (i + 0.5)·s inside [lo, hi]  ⇔  i ∈ [lo/s − 0.5, hi/s − 0.5]
            let (Some((u0, u1)), Some((v0, v1))) = (
                index_span(b.x_min, b.x_max, s, geo.width),
                index_span(b.y_min, b.y_max, s, geo.height),
            ) else {
                continue;
            };
            for v in v0..=v1 {
                for u in u0..=u1 {
                    cells[v * geo.width + u] = 1;
                }
            }
        }
    }
    mask
}

/// Ground-truth boxes take exactly the same path as pseudo boxes.
pub fn source_masks_from_gt(annotations: &[BBox], geometry: &[LevelGeometry]) -> WeightMask {
    rasterize_masks(&PseudoBoxSet::ground_truth(annotations.iter().copied()), geometry)
}

fn index_span(lo: f64, hi: f64, stride: f64, extent: usize) -> Option<(usize, usize)> {
    if extent == 0 || !(lo <= hi) {
        return None;
    }
    let center = |i: i64| (i as f64 + 0.5) * stride;
    let mut first = (lo / stride - 0.5).ceil() as i64;
    // settle rounding at exact boundaries against the centre formula itself
    while first > 0 && center(first - 1) >= lo {
        first -= 1;
    }
    while center(first) < lo {
        first += 1;
    }
    let mut last = (hi / stride - 0.5).floor() as i64;
    while center(last + 1) <= hi {
        last += 1;
    }
    while last >= first && center(last) > hi {
        last -= 1;
    }
    let first = first.max(0);
    let last = last.min(extent as i64 - 1);
    (first <= last).then_some((first as usize, last as usize))
}

/// Reference rasteriser: tests every cell centre against every box.
pub mod oracle {
    use super::*;

    pub fn point_in_box_masks(boxes: &[BBox], geometry: &[LevelGeometry]) -> WeightMask {
        let levels = geometry
            .iter()
            .map(|geo| {
                let mut cells = Vec::with_capacity(geo.cells());
                for v in 0..geo.height {
                    for u in 0..geo.width {
                        let x = (u as f64 + 0.5) * geo.stride as f64;
                        let y = (v as f64 + 0.5) * geo.stride as f64;
                        let inside = boxes
                            .iter()
                            .any(|b| x >= b.x_min && x <= b.x_max && y >= b.y_min && y <= b.y_max);
                        cells.push(u8::from(inside));
                    }
                }
                cells
            })
            .collect();
        WeightMask { levels }
    }
}

/// Writes the pseudo-label debugging dump: per image a header line
/// `<image id> <box count>` followed by one `x_min y_min x_max y_max score`
/// line per box, six decimals each.
pub fn format_dump(records: &[(u64, &PseudoBoxSet)]) -> String {
    let mut out = String::new();
    for (id, set) in records {
        let _ = writeln!(out, "{id} {}", set.len());
        for (b, s) in set.boxes.iter().zip(&set.scores) {
            let _ = writeln!(out, "{:.6} {:.6} {:.6} {:.6} {:.6}", b.x_min, b.y_min, b.x_max, b.y_max, s);
        }
    }
    out
}

pub fn parse_dump(text: &str) -> Result<Vec<(u64, PseudoBoxSet)>> {
    let bad = |line: usize, why: &str| Error::Format {
        path: format!("pseudo-label dump line {}", line + 1),
        reason: why.to_owned(),
    };
    let mut lines = text.lines().enumerate();
    let mut out = Vec::new();
    while let Some((ln, header)) = lines.next() {
        let mut parts = header.split_whitespace();
        let id: u64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(ln, "bad image id"))?;
        let n: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(ln, "bad box count"))?;
        let mut set = PseudoBoxSet::empty(BoxOrigin::Pseudo);
        for _ in 0..n {
            let (ln, line) = lines.next().ok_or_else(|| bad(ln, "missing box line"))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(ln, "bad number"))?;
            if v.len() != 5 {
                return Err(bad(ln, "expected 5 values"));
            }
            set.boxes.push(BBox::new(v[0], v[1], v[2], v[3]));
            set.scores.push(v[4]);
        }
        out.push((id, set));
    }
    Ok(out)
}
