//! A small query-based detector.
//!
//! Two patch-embedding levels form the feature pyramid. Each level's cells
//! become tokens (features plus a fixed position code), and `M` learned
//! queries read them through one softmax cross-attention block followed by a
//! residual feed-forward layer. The resulting per-query vectors are the
//! decoder features; a linear class head and a two-layer box head sit on top.

use ndnum::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{BBox, LevelGeometry};
use crate::oaa::FeaturePyramid;
use crate::params::{Bound, ParamSet};
use crate::pseudo::Detection;
use crate::toydet::scene::{Image, NUM_CLASSES};

const POS_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub strides: Vec<usize>,
    pub channels: Vec<usize>,
    pub queries: usize,
    pub dim: usize,
    pub box_hidden: usize,
    pub num_classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            strides: vec![4, 8],
            channels: vec![16, 32],
            queries: 8,
            dim: 32,
            box_hidden: 32,
            num_classes: NUM_CLASSES,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.len() != self.channels.len() {
            return Err(Error::Invalid("strides and channels must be nonempty and equally long".into()));
        }
        if self.strides.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid("strides must be nondecreasing".into()));
        }
        for &s in &self.strides {
            if s == 0 || self.image_size % s != 0 {
                return Err(Error::Invalid(format!("image size {} not divisible by stride {s}", self.image_size)));
            }
        }
        if self.queries == 0 || self.dim == 0 || self.box_hidden == 0 || self.num_classes == 0 || self.channels.contains(&0) {
            return Err(Error::Invalid("detector sizes must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Vec<LevelGeometry> {
        self.strides
            .iter()
            .zip(&self.channels)
            .map(|(&s, &c)| LevelGeometry {
                width: self.image_size / s,
                height: self.image_size / s,
                stride: s,
                channels: c,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Slots {
    embed: Vec<(usize, usize)>,
    token: Vec<(usize, usize)>,
    wk: usize,
    wv: usize,
    queries: usize,
    ffn: (usize, usize),
    cls: (usize, usize),
    box1: (usize, usize),
    box2: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ToyDetector {
    pub config: DetectorConfig,
    pub params: ParamSet,
    slots: Slots,
}

/// Everything a training step needs from one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    pub pyramid: FeaturePyramid,
    /// `(batch · M) × d` decoder features, image-major.
    pub decoder: Var,
    /// `(batch · M) × 4` normalised `cx, cy, w, h` in (0, 1).
    pub boxes: Var,
    /// `(batch · M) × (classes + 1)`; the last column is background.
    pub logits: Var,
    pub batch: usize,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Result<Tensor> {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(Tensor::matrix(rows, cols, data)?)
}

impl ToyDetector {
    pub fn new<R: Rng + ?Sized>(config: DetectorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut p = ParamSet::new();
        let mut embed = Vec::new();
        let mut token = Vec::new();
        for (l, (&s, &c)) in config.strides.iter().zip(&config.channels).enumerate() {
            let fan_in = s * s * 3;
            embed.push((
                p.push(format!("embed.{l}.w"), gaussian(rng, fan_in, c, (2.0 / fan_in as f64).sqrt())?),
                p.push(format!("embed.{l}.b"), Tensor::zeros(&[c])),
            ));
        }
        for (l, &c) in config.channels.iter().enumerate() {
            let fan_in = c + POS_DIM;
            token.push((
                p.push(format!("token.{l}.w"), gaussian(rng, fan_in, d, (1.0 / fan_in as f64).sqrt())?),
                p.push(format!("token.{l}.b"), Tensor::zeros(&[d])),
            ));
        }
        let inv = (1.0 / d as f64).sqrt();
        let wk = p.push("attn.wk", gaussian(rng, d, d, inv)?);
        let wv = p.push("attn.wv", gaussian(rng, d, d, inv)?);
        let queries = p.push("queries", gaussian(rng, config.queries, d, 1.0)?);
        let ffn = (
            p.push("ffn.w", gaussian(rng, d, d, inv)?),
            p.push("ffn.b", Tensor::zeros(&[d])),
        );
        let k = config.num_classes + 1;
        let cls = (
            p.push("cls.w", Tensor::zeros(&[d, k])),
            p.push("cls.b", Tensor::zeros(&[k])),
        );
        let h = config.box_hidden;
        let box1 = (
            p.push("box.w1", gaussian(rng, d, h, inv)?),
            p.push("box.b1", Tensor::zeros(&[h])),
        );
        // start near small centred boxes: sigmoid(−1.1) ≈ 0.25 for w and h
        let box2 = (
            p.push("box.w2", gaussian(rng, h, 4, 0.1 * (1.0 / h as f64).sqrt())?),
            p.push("box.b2", Tensor::vector(vec![0.0, 0.0, -1.1, -1.1])),
        );
        Ok(Self {
            config,
            params: p,
            slots: Slots {
                embed,
                token,
                wk,
                wv,
                queries,
                ffn,
                cls,
                box1,
                box2,
            },
        })
    }

    /// Flattened `s × s × 3` patches, one row per cell, image-major.
    fn patches(&self, images: &[&Image], stride: usize) -> Result<Tensor> {
        let n = self.config.image_size;
        let cells = n / stride;
        let width = stride * stride * 3;
        let mut data = Vec::with_capacity(images.len() * cells * cells * width);
        for img in images {
            if img.width != n || img.height != n {
                return Err(Error::Invalid(format!(
                    "image is {}×{}, detector expects {n}×{n}",
                    img.width, img.height
                )));
            }
            for v in 0..cells {
                for u in 0..cells {
                    for dy in 0..stride {
                        let row = 3 * ((v * stride + dy) * n + u * stride);
                        data.extend(img.data[row..row + 3 * stride].iter().map(|&b| f64::from(b) / 255.0 - 0.5));
                    }
                }
            }
        }
        Ok(Tensor::matrix(images.len() * cells * cells, width, data)?)
    }

    fn positions(geo: &LevelGeometry, batch: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(batch * geo.cells() * POS_DIM);
        let tau = std::f64::consts::TAU;
        for _ in 0..batch {
            for v in 0..geo.height {
                for u in 0..geo.width {
                    let cx = (u as f64 + 0.5) / geo.width as f64;
                    let cy = (v as f64 + 0.5) / geo.height as f64;
                    data.extend([cx - 0.5, cy - 0.5, (tau * cx).sin(), (tau * cx).cos(), (tau * cy).sin(), (tau * cy).cos()]);
                }
            }
        }
        Ok(Tensor::matrix(batch * geo.cells(), POS_DIM, data)?)
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, images: &[&Image]) -> Result<DetectorOutput> {
        if images.is_empty() {
            return Err(Error::Empty("image batch"));
        }
        let b = images.len();
        let geometry = self.config.geometry();
        let s = &self.slots;
        let mut levels = Vec::with_capacity(geometry.len());
        let mut tokens = Vec::with_capacity(geometry.len());
        for (l, geo) in geometry.iter().enumerate() {
            let p = g.constant(self.patches(images, geo.stride)?);
            let f = g.linear(p, bound.var(s.embed[l].0), bound.var(s.embed[l].1))?;
            let f = g.silu(f)?;
            levels.push(f);
            let pos = g.constant(Self::positions(geo, b)?);
            let x = g.concat(&[f, pos], 1)?;
            tokens.push(g.linear(x, bound.var(s.token[l].0), bound.var(s.token[l].1))?);
        }
        let pyramid = FeaturePyramid::new(g, levels, geometry.clone(), b, (self.config.image_size, self.config.image_size))?;

        let d = self.config.dim;
        let q = bound.var(s.queries);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut per_image = Vec::with_capacity(b);
        for i in 0..b {
            let parts = tokens
                .iter()
                .zip(&geometry)
                .map(|(&t, geo)| g.rows(t, i * geo.cells(), (i + 1) * geo.cells()))
                .collect::<ndnum::Result<Vec<_>>>()?;
            let kv = g.concat(&parts, 0)?;
            let keys = g.matmul(kv, bound.var(s.wk))?;
            let vals = g.matmul(kv, bound.var(s.wv))?;
            let kt = g.transpose(keys)?;
            let logits = g.matmul(q, kt)?;
            let logits = g.scalar_mul(logits, inv_sqrt_d)?;
            let attn = g.softmax(logits)?;
            let o = g.matmul(attn, vals)?;
            let h = g.add(q, o)?;
            let ff = g.linear(h, bound.var(s.ffn.0), bound.var(s.ffn.1))?;
            let ff = g.silu(ff)?;
            per_image.push(g.add(h, ff)?);
        }
        let decoder = if b == 1 { per_image[0] } else { g.concat(&per_image, 0)? };
        let logits = g.linear(decoder, bound.var(s.cls.0), bound.var(s.cls.1))?;
        let hb = g.linear(decoder, bound.var(s.box1.0), bound.var(s.box1.1))?;
        let hb = g.silu(hb)?;
        let bz = g.linear(hb, bound.var(s.box2.0), bound.var(s.box2.1))?;
        let boxes = g.sigmoid(bz)?;
        Ok(DetectorOutput {
            pyramid,
            decoder,
            boxes,
            logits,
            batch: b,
        })
    }

    /// Inference without gradients: one detection per query.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<Vec<Detection>>> {
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let out = self.forward(&mut g, &bound, images)?;
        let probs = g.softmax(out.logits)?;
        Ok(decode(g.value(probs), g.value(out.boxes), images.len(), self.config.queries, self.config.image_size as f64))
    }
}

/// Turns class probabilities and normalised boxes into pixel-space detections.
pub fn decode(probs: &Tensor, boxes: &Tensor, batch: usize, queries: usize, size: f64) -> Vec<Vec<Detection>> {
    let k = probs.shape()[1];
    (0..batch)
        .map(|b| {
            (0..queries)
                .map(|m| {
                    let r = b * queries + m;
                    let p = probs.row(r);
                    let (class, score) = p[..k - 1]
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best });
                    let c = boxes.row(r);
                    let bbox = BBox::from_cxcywh([c[0], c[1], c[2], c[3]], size, size).clamped(size, size);
                    Detection { bbox, score, class }
                })
                .collect()
        })
        .collect()
}
