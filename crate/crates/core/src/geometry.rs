//! Boxes and feature-map geometry shared by masking, detection and evaluation.

/// Axis-aligned box in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// From normalised centre/size to pixels for a `size × size` image.
    pub fn from_cxcywh(c: [f64; 4], width: f64, height: f64) -> Self {
        let [cx, cy, w, h] = c;
        Self::new(
            (cx - 0.5 * w) * width,
            (cy - 0.5 * h) * height,
            (cx + 0.5 * w) * width,
            (cy + 0.5 * h) * height,
        )
    }

    /// Normalised centre/size for an image of the given extent.
    pub fn to_cxcywh(&self, width: f64, height: f64) -> [f64; 4] {
        [
            0.5 * (self.x_min + self.x_max) / width,
            0.5 * (self.y_min + self.y_max) / height,
            (self.x_max - self.x_min) / width,
            (self.y_max - self.y_min) / height,
        ]
    }

    pub fn is_well_formed(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn clamped(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    /// Inclusive containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x_min <= x && x <= self.x_max && self.y_min <= y && y <= self.y_max
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// One pyramid level: a `width × height` grid of cells, each covering a
/// `stride × stride` block of image pixels, with `channels` features per cell.
///
/// Cells are stored row-major: cell `(u, v)` (column `u`, row `v`) is at
/// flat index `v * width + u`. Its centre in image coordinates is
/// `((u + 0.5)·stride, (v + 0.5)·stride)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LevelGeometry {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub channels: usize,
}

impl LevelGeometry {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell_center(&self, u: usize, v: usize) -> (f64, f64) {
        let s = self.stride as f64;
        ((u as f64 + 0.5) * s, (v as f64 + 0.5) * s)
    }
}
