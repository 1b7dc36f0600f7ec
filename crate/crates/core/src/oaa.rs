//! Object-aware adversarial alignment of backbone feature maps.
//!
//! A small per-pixel discriminator scores every cell of every pyramid level.
//! Features pass through a gradient-reversal node first, so a single backward
//! sweep trains the discriminator to separate domains and the feature
//! producer to confuse it.
//!
//! For one level with source scores `p_s` and target scores `p_t`:
//!
//! ```text
//! L_d  = Σ_l  mean(−log p_s) + mean(−log(1 − p_t))
//! L̂_d = Σ_l  Σ_{w=1}(−log p_s)/max(1,n_s) + Σ_{w=1}(−log(1 − p_t))/max(1,n_t)
//! L_OAA = L_d + λ·L̂_d
//! ```
//!
//! Scores are kept as logits so `log(1 − p)` is evaluated as `log σ(−z)`.

use ndnum::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::LevelGeometry;
use crate::ota::Domain;
use crate::params::{Bound, ParamSet};
use crate::pseudo::WeightMask;

/// Multi-level backbone features for a batch of images.
///
/// Level `l` is a `(batch · H_l · W_l) × C_l` matrix; image `b` owns rows
/// `b·H·W .. (b+1)·H·W` in row-major cell order.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub geometry: Vec<LevelGeometry>,
    pub batch: usize,
}

impl FeaturePyramid {
    pub fn new(
        g: &Graph,
        levels: Vec<Var>,
        geometry: Vec<LevelGeometry>,
        batch: usize,
        image: (usize, usize),
    ) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Empty("feature pyramid"));
        }
        if levels.len() != geometry.len() {
            return Err(Error::Mismatch {
                what: "pyramid level count",
                left: levels.len(),
                right: geometry.len(),
            });
        }
        for (l, (&v, geo)) in levels.iter().zip(&geometry).enumerate() {
            if g.shape(v) != [batch * geo.cells(), geo.channels] {
                return Err(Error::Invalid(format!(
                    "level {l}: expected {}×{} features, got {:?}",
                    batch * geo.cells(),
                    geo.channels,
                    g.shape(v)
                )));
            }
            let covers = |cells: usize, extent: usize| cells * geo.stride <= extent + geo.stride && extent < (cells + 1) * geo.stride;
            if !covers(geo.width, image.0) || !covers(geo.height, image.1) {
                return Err(Error::Invalid(format!("level {l}: stride {} does not cover the image", geo.stride)));
            }
            if l > 0 {
                let prev = &geometry[l - 1];
                if geo.width > prev.width || geo.height > prev.height {
                    return Err(Error::Invalid(format!("level {l} is larger than level {}", l - 1)));
                }
            }
        }
        Ok(Self {
            levels,
            geometry,
            batch,
        })
    }
}

/// Discriminator output for one domain batch: per level, a
/// `(batch · cells) × 1` logit column and its sigmoid.
#[derive(Debug, Clone)]
pub struct DomainScoreMap {
    pub logits: Vec<Var>,
    pub scores: Vec<Var>,
    pub geometry: Vec<LevelGeometry>,
    pub batch: usize,
    pub domain: Domain,
}

impl DomainScoreMap {
    /// Builds a map directly from logit columns (used for tests and oracles).
    pub fn from_logits(
        g: &mut Graph,
        logits: Vec<Var>,
        geometry: Vec<LevelGeometry>,
        batch: usize,
        domain: Domain,
    ) -> Result<Self> {
        if logits.len() != geometry.len() {
            return Err(Error::Mismatch {
                what: "score level count",
                left: logits.len(),
                right: geometry.len(),
            });
        }
        let mut scores = Vec::with_capacity(logits.len());
        for (&z, geo) in logits.iter().zip(&geometry) {
            if g.value(z).len() != batch * geo.cells() {
                return Err(Error::Mismatch {
                    what: "score map size",
                    left: g.value(z).len(),
                    right: batch * geo.cells(),
                });
            }
            scores.push(g.sigmoid(z)?);
        }
        Ok(Self {
            logits,
            scores,
            geometry,
            batch,
            domain,
        })
    }

    pub fn levels(&self) -> usize {
        self.logits.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct HeadSlots {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// One two-layer per-pixel scoring head per pyramid level.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub params: ParamSet,
    heads: Vec<HeadSlots>,
    channels: Vec<usize>,
    pub grl_factor: f64,
}

impl Discriminator {
    /// `channels[l]` is the input width of level `l`. The output layer starts
    /// at zero, so a fresh discriminator scores every cell 0.5.
    pub fn new<R: Rng + ?Sized>(prefix: &str, channels: &[usize], hidden: usize, rng: &mut R) -> Result<Self> {
        if channels.is_empty() || hidden == 0 || channels.contains(&0) {
            return Err(Error::Invalid("discriminator needs ≥ 1 level and nonzero widths".into()));
        }
        let mut params = ParamSet::new();
        let mut heads = Vec::new();
        for (l, &c) in channels.iter().enumerate() {
            let scale = (1.0 / c as f64).sqrt();
            let w1: Vec<f64> = (0..c * hidden).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            heads.push(HeadSlots {
                w1: params.push(format!("{prefix}.{l}.w1"), Tensor::matrix(c, hidden, w1)?),
                b1: params.push(format!("{prefix}.{l}.b1"), Tensor::zeros(&[hidden])),
                w2: params.push(format!("{prefix}.{l}.w2"), Tensor::zeros(&[hidden, 1])),
                b2: params.push(format!("{prefix}.{l}.b2"), Tensor::zeros(&[1])),
            });
        }
        Ok(Self {
            params,
            heads,
            channels: channels.to_vec(),
            grl_factor: 1.0,
        })
    }

    pub fn levels(&self) -> usize {
        self.heads.len()
    }

    /// Logits for the rows of `x` through head `level`, behind gradient reversal.
    pub fn score_rows(&self, g: &mut Graph, bound: &Bound, level: usize, x: Var) -> Result<Var> {
        let head = self.heads.get(level).ok_or(Error::Mismatch {
            what: "discriminator level",
            left: level,
            right: self.heads.len(),
        })?;
        let c = g.shape(x)[1];
        if c != self.channels[level] {
            return Err(Error::Mismatch {
                what: "discriminator channel width",
                left: self.channels[level],
                right: c,
            });
        }
        let r = g.grad_reverse(x, self.grl_factor)?;
        let h = g.linear(r, bound.var(head.w1), bound.var(head.b1))?;
        let h = g.silu(h)?;
        Ok(g.linear(h, bound.var(head.w2), bound.var(head.b2))?)
    }
}

pub fn discriminate(
    g: &mut Graph,
    disc: &Discriminator,
    bound: &Bound,
    pyr: &FeaturePyramid,
    domain: Domain,
) -> Result<DomainScoreMap> {
    if pyr.levels.len() != disc.levels() {
        return Err(Error::Mismatch {
            what: "pyramid level count",
            left: disc.levels(),
            right: pyr.levels.len(),
        });
    }
    let logits = pyr
        .levels
        .iter()
        .enumerate()
        .map(|(l, &x)| disc.score_rows(g, bound, l, x))
        .collect::<Result<Vec<_>>>()?;
    DomainScoreMap::from_logits(g, logits, pyr.geometry.clone(), pyr.batch, domain)
}

/// `−log p` for source scores, `−log(1 − p)` for target scores, per cell.
fn domain_terms(g: &mut Graph, map: &DomainScoreMap, level: usize) -> Result<Var> {
    let z = map.logits[level];
    let p = match map.domain {
        Domain::Source => map.scores[level],
        Domain::Target => {
            let nz = g.neg(z)?;
            g.sigmoid(nz)?
        }
    };
    let lp = g.log(p)?;
    let n = g.value(lp).len();
    let flat = g.reshape(lp, &[n])?;
    Ok(g.neg(flat)?)
}

fn check_pair(src: &DomainScoreMap, tgt: &DomainScoreMap) -> Result<()> {
    if src.batch == 0 {
        return Err(Error::Empty("source batch"));
    }
    if tgt.batch == 0 {
        return Err(Error::Empty("target batch"));
    }
    if src.levels() == 0 {
        return Err(Error::Empty("score map"));
    }
    if src.levels() != tgt.levels() {
        return Err(Error::Mismatch {
            what: "score level count",
            left: src.levels(),
            right: tgt.levels(),
        });
    }
    if src.domain != Domain::Source || tgt.domain != Domain::Target {
        return Err(Error::Invalid("score maps passed with swapped domains".into()));
    }
    Ok(())
}

/// Global adversarial loss, each domain averaged over its cells per level.
pub fn global_align_loss(g: &mut Graph, src: &DomainScoreMap, tgt: &DomainScoreMap) -> Result<Var> {
    check_pair(src, tgt)?;
    let mut terms = Vec::with_capacity(2 * src.levels());
    for l in 0..src.levels() {
        for map in [src, tgt] {
            let t = domain_terms(g, map, l)?;
            terms.push(g.mean(t)?);
        }
    }
    Ok(g.add_all(&terms)?)
}

/// How the masked sum is scaled per level and domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskNormalization {
    /// Divide by `max(1, selected cells)`.
    PerLevelCount,
    /// Plain sum over selected cells.
    None,
}

/// Object-aware loss: only cells with mask value 1 contribute.
pub fn masked_align_loss(
    g: &mut Graph,
    src: &DomainScoreMap,
    tgt: &DomainScoreMap,
    masks_src: &[WeightMask],
    masks_tgt: &[WeightMask],
) -> Result<Var> {
    masked_align_loss_with(g, src, tgt, masks_src, masks_tgt, MaskNormalization::PerLevelCount)
}

pub fn masked_align_loss_with(
    g: &mut Graph,
    src: &DomainScoreMap,
    tgt: &DomainScoreMap,
    masks_src: &[WeightMask],
    masks_tgt: &[WeightMask],
    norm: MaskNormalization,
) -> Result<Var> {
    check_pair(src, tgt)?;
    let mut terms = Vec::new();
    for l in 0..src.levels() {
        for (map, masks) in [(src, masks_src), (tgt, masks_tgt)] {
            let index = selected_cells(map, masks, l)?;
            if index.is_empty() {
                continue;
            }
            let t = domain_terms(g, map, l)?;
            let sel = g.select(t, index)?;
            terms.push(match norm {
                MaskNormalization::PerLevelCount => g.mean(sel)?,
                MaskNormalization::None => g.sum(sel)?,
            });
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    Ok(g.add_all(&terms)?)
}

fn selected_cells(map: &DomainScoreMap, masks: &[WeightMask], level: usize) -> Result<Vec<usize>> {
    if masks.len() != map.batch {
        return Err(Error::Mismatch {
            what: "mask batch size",
            left: map.batch,
            right: masks.len(),
        });
    }
    let cells = map.geometry[level].cells();
    let mut index = Vec::new();
    for (b, m) in masks.iter().enumerate() {
        let lvl = m.levels.get(level).ok_or(Error::Mismatch {
            what: "mask level count",
            left: map.levels(),
            right: m.levels.len(),
        })?;
        if lvl.len() != cells {
            return Err(Error::Mismatch {
                what: "mask cell count",
                left: cells,
                right: lvl.len(),
            });
        }
        index.extend(lvl.iter().enumerate().filter(|(_, &w)| w != 0).map(|(i, _)| b * cells + i));
    }
    Ok(index)
}

/// `L_d + λ·L̂_d`.
pub fn oaa_loss(g: &mut Graph, global: Var, masked: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("λ must be ≥ 0, got {lambda}")));
    }
    let scaled = g.scalar_mul(masked, lambda)?;
    Ok(g.add(global, scaled)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn geo(w: usize, h: usize) -> LevelGeometry {
        LevelGeometry {
            width: w,
            height: h,
            stride: 1,
            channels: 1,
        }
    }

    fn map(g: &mut Graph, z: &[f64], domain: Domain) -> DomainScoreMap {
        let v = g.param(Tensor::matrix(z.len(), 1, z.to_vec()).unwrap());
        DomainScoreMap::from_logits(g, vec![v], vec![geo(z.len(), 1)], 1, domain).unwrap()
    }

    #[test]
    fn zero_features_score_one_half() {
        let mut rng = stream(1, "disc");
        let disc = Discriminator::new("d", &[3, 5], 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = disc.params.bind(&mut g);
        let geos = vec![
            LevelGeometry { width: 4, height: 4, stride: 4, channels: 3 },
            LevelGeometry { width: 2, height: 2, stride: 8, channels: 5 },
        ];
        let f0 = g.constant(Tensor::zeros(&[32, 3]));
        let f1 = g.constant(Tensor::zeros(&[8, 5]));
        let pyr = FeaturePyramid::new(&g, vec![f0, f1], geos, 2, (16, 16)).unwrap();
        let s = discriminate(&mut g, &disc, &bound, &pyr, Domain::Source).unwrap();
        for &p in &s.scores {
            assert!(g.value(p).data().iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut rng = stream(1, "disc");
        let disc = Discriminator::new("d", &[3], 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let bound = disc.params.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[4, 2]));
        assert!(disc.score_rows(&mut g, &bound, 0, x).is_err());
    }

    #[test]
    fn half_scores_give_two_ln2_per_level() {
        let mut g = Graph::new();
        let s = map(&mut g, &[0.0; 4], Domain::Source);
        let t = map(&mut g, &[0.0; 4], Domain::Target);
        let l = global_align_loss(&mut g, &s, &t).unwrap();
        assert!((g.scalar(l) - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_discrimination_has_vanishing_loss() {
        let mut g = Graph::new();
        let s = map(&mut g, &[40.0; 4], Domain::Source);
        let t = map(&mut g, &[-40.0; 4], Domain::Target);
        let l = global_align_loss(&mut g, &s, &t).unwrap();
        assert!(g.scalar(l) < 1e-15);
    }

    #[test]
    fn zero_masks_give_zero_loss_and_gradient() {
        let mut g = Graph::new();
        let s = map(&mut g, &[0.3, -0.2], Domain::Source);
        let t = map(&mut g, &[1.0, 0.5], Domain::Target);
        let m = vec![WeightMask { levels: vec![vec![0, 0]] }];
        let l = masked_align_loss(&mut g, &s, &t, &m, &m).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(s.logits[0]).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn single_pixel_mask_picks_that_term() {
        let mut g = Graph::new();
        let z = [0.3, -1.1, 0.7, 2.0];
        let s = map(&mut g, &z, Domain::Source);
        let t = map(&mut g, &z, Domain::Target);
        let ms = vec![WeightMask { levels: vec![vec![0, 0, 1, 0]] }];
        let mt = vec![WeightMask { levels: vec![vec![0, 0, 0, 0]] }];
        let l = masked_align_loss(&mut g, &s, &t, &ms, &mt).unwrap();
        let p = 1.0 / (1.0 + (-0.7f64).exp());
        assert!((g.scalar(l) + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn mask_shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let s = map(&mut g, &[0.0; 4], Domain::Source);
        let t = map(&mut g, &[0.0; 4], Domain::Target);
        let m = vec![WeightMask { levels: vec![vec![1; 3]] }];
        assert!(masked_align_loss(&mut g, &s, &t, &m, &m).is_err());
    }

    #[test]
    fn oaa_combination() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.7));
        let b = g.constant(Tensor::scalar(0.3));
        let l = oaa_loss(&mut g, a, b, 1.0).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-15);
        let one = g.constant(Tensor::scalar(1.0));
        let l = oaa_loss(&mut g, one, one, 0.1).unwrap();
        assert!((g.scalar(l) - 1.1).abs() < 1e-15);
        let l = oaa_loss(&mut g, a, b, 0.0).unwrap();
        assert_eq!(g.scalar(l), 0.7);
    }
}
