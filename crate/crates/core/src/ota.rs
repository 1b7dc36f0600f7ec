//! Optimal-transport alignment of decoder features.
//!
//! Both feature sets are projected onto `K` random unit directions. On each
//! direction the squared 2-Wasserstein cost between two equal-size empirical
//! measures is the squared distance between their sorted projections, so
//!
//! ```text
//! L = Σ_k Σ_i (sort(θ_k·src)_i − sort(θ_k·tgt)_i)²
//! ```
//!
//! No `1/K` or `1/N` normalisation is applied; callers scale the loss.

use ndnum::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::assignment::min_cost_assignment;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

/// `N × d` decoder outputs (one row per object query) living in a graph.
#[derive(Debug, Clone, Copy)]
pub struct DecoderFeatures {
    pub features: Var,
    pub domain: Domain,
}

impl DecoderFeatures {
    pub fn new(g: &Graph, features: Var, domain: Domain) -> Result<Self> {
        match *g.shape(features) {
            [n, d] if n >= 1 && d >= 1 => Ok(Self { features, domain }),
            [_, _] => Err(Error::Empty("decoder feature set")),
            ref s => Err(Error::Invalid(format!("decoder features must be N×d, got {s:?}"))),
        }
    }

    pub fn count(&self, g: &Graph) -> usize {
        g.shape(self.features)[0]
    }

    pub fn dim(&self, g: &Graph) -> usize {
        g.shape(self.features)[1]
    }
}

/// `K × d` matrix of unit-norm projection directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    thetas: Tensor,
}

impl ProjectionSet {
    /// Wraps explicit directions, normalising every row.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or(Error::Empty("projection set"))?;
        if d == 0 {
            return Err(Error::Invalid("projection dimension must be ≥ 1".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::Mismatch {
                    what: "projection dimension",
                    left: d,
                    right: r.len(),
                });
            }
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Invalid("projection direction has zero norm".into()));
            }
            data.extend(r.iter().map(|x| x / norm));
        }
        Ok(Self {
            thetas: Tensor::matrix(rows.len(), d, data)?,
        })
    }

    pub fn count(&self) -> usize {
        self.thetas.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.thetas.shape()[1]
    }

    pub fn thetas(&self) -> &Tensor {
        &self.thetas
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.thetas.row(k)
    }
}

/// Draws `k` directions uniformly from the unit sphere in `R^d`
/// (normalised standard-normal vectors).
pub fn sample_projections<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Result<ProjectionSet> {
    if d == 0 {
        return Err(Error::Invalid("projection dimension must be ≥ 1".into()));
    }
    if k == 0 {
        return Err(Error::Invalid("projection count must be ≥ 1".into()));
    }
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-300 {
                data.extend(v.iter().map(|x| x / norm));
                break;
            }
        }
    }
    Ok(ProjectionSet {
        thetas: Tensor::matrix(k, d, data)?,
    })
}

/// Sliced squared 2-Wasserstein loss between two equally sized feature sets.
///
/// Gradients reach both sets through the sort permutations frozen at
/// forward time.
pub fn sliced_w2(g: &mut Graph, src: &DecoderFeatures, tgt: &DecoderFeatures, proj: &ProjectionSet) -> Result<Var> {
    let (ns, nt) = (src.count(g), tgt.count(g));
    if ns != nt {
        return Err(Error::Mismatch {
            what: "feature count",
            left: ns,
            right: nt,
        });
    }
    let (ds, dt) = (src.dim(g), tgt.dim(g));
    if ds != dt {
        return Err(Error::Mismatch {
            what: "feature dimension",
            left: ds,
            right: dt,
        });
    }
    if proj.dim() != ds {
        return Err(Error::Mismatch {
            what: "projection dimension",
            left: proj.dim(),
            right: ds,
        });
    }
    let theta = g.constant(proj.thetas.clone());
    let sorted_s = sorted_projections(g, theta, src.features)?;
    let sorted_t = sorted_projections(g, theta, tgt.features)?;
    let diff = g.sub(sorted_s, sorted_t)?;
    let sq = g.square(diff)?;
    Ok(g.sum(sq)?)
}

fn sorted_projections(g: &mut Graph, theta: Var, feats: Var) -> Result<Var> {
    let ft = g.transpose(feats)?;
    let p = g.matmul(theta, ft)?;
    Ok(g.sort_with_permutation(p)?.0)
}

/// Exact 1-D optimal-transport cost `min_π Σ_i (a_i − b_π(i))²` between two
/// uniform empirical measures of equal size, found by searching assignments
/// (never by sorting). Exhaustive permutation search for `n ≤ 8`, the
/// Hungarian method up to `n = 16`.
pub fn exact_1d_w2(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Mismatch {
            what: "sample count",
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    let cost = |i: usize, j: usize| (a[i] - b[j]) * (a[i] - b[j]);
    match n {
        0 => Ok(0.0),
        1..=8 => {
            // Heap's algorithm over assignments of b to a.
            let mut perm: Vec<usize> = (0..n).collect();
            let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>();
            let mut best = total(&perm);
            let mut c = vec![0usize; n];
            let mut i = 0;
            while i < n {
                if c[i] < i {
                    if i % 2 == 0 {
                        perm.swap(0, i);
                    } else {
                        perm.swap(c[i], i);
                    }
                    best = best.min(total(&perm));
                    c[i] += 1;
                    i = 0;
                } else {
                    c[i] = 0;
                    i += 1;
                }
            }
            Ok(best)
        }
        9..=16 => {
            let m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cost(i, j)).collect()).collect();
            Ok(min_cost_assignment(&m)?.cost)
        }
        _ => Err(Error::Invalid(format!("exact_1d_w2 supports n ≤ 16, got {n}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn feats(g: &mut Graph, rows: usize, cols: usize, data: Vec<f64>, domain: Domain) -> DecoderFeatures {
        let v = g.param(Tensor::matrix(rows, cols, data).unwrap());
        DecoderFeatures::new(g, v, domain).unwrap()
    }

    #[test]
    fn one_dimensional_projections_are_signs() {
        let mut rng = stream(3, "t");
        for _ in 0..20 {
            let p = sample_projections(1, 1, &mut rng).unwrap();
            assert!(p.row(0) == [1.0] || p.row(0) == [-1.0]);
        }
    }

    #[test]
    fn projections_have_unit_norm() {
        let mut rng = stream(7, "projections");
        let p = sample_projections(256, 32, &mut rng).unwrap();
        for k in 0..256 {
            let n = p.row(k).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_directions_concentrate_around_zero_mean() {
        for seed in 0..5 {
            let mut rng = stream(seed, "projections");
            let p = sample_projections(1000, 2, &mut rng).unwrap();
            let mut m = [0.0; 2];
            for k in 0..1000 {
                m[0] += p.row(k)[0] / 1000.0;
                m[1] += p.row(k)[1] / 1000.0;
            }
            assert!((m[0] * m[0] + m[1] * m[1]).sqrt() < 0.1);
        }
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let mut rng = stream(1, "t");
        assert!(sample_projections(4, 0, &mut rng).is_err());
    }

    #[test]
    fn single_point_hand_value() {
        let mut g = Graph::new();
        let s = feats(&mut g, 1, 2, vec![1.0, 0.0], Domain::Source);
        let t = feats(&mut g, 1, 2, vec![3.0, 0.0], Domain::Target);
        let proj = ProjectionSet::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let l = sliced_w2(&mut g, &s, &t, &proj).unwrap();
        assert_eq!(g.scalar(l), 4.0);
    }

    #[test]
    fn identical_sets_have_zero_loss() {
        let mut g = Graph::new();
        let data = vec![0.3, -1.2, 2.0, 0.5, 0.1, 0.9];
        let s = feats(&mut g, 3, 2, data.clone(), Domain::Source);
        let t = feats(&mut g, 3, 2, data, Domain::Target);
        let mut rng = stream(11, "p");
        let proj = sample_projections(16, 2, &mut rng).unwrap();
        let l = sliced_w2(&mut g, &s, &t, &proj).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn mismatched_sets_are_rejected() {
        let mut g = Graph::new();
        let s = feats(&mut g, 2, 2, vec![0.0; 4], Domain::Source);
        let t = feats(&mut g, 3, 2, vec![0.0; 6], Domain::Target);
        let u = feats(&mut g, 2, 3, vec![0.0; 6], Domain::Target);
        let proj = ProjectionSet::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(sliced_w2(&mut g, &s, &t, &proj), Err(Error::Mismatch { .. })));
        assert!(matches!(sliced_w2(&mut g, &s, &u, &proj), Err(Error::Mismatch { .. })));
        let empty = g.param(Tensor::zeros(&[0, 2]));
        assert!(DecoderFeatures::new(&g, empty, Domain::Source).is_err());
    }

    #[test]
    fn exact_1d_hand_values() {
        assert_eq!(exact_1d_w2(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(exact_1d_w2(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert!(exact_1d_w2(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn hungarian_and_permutation_routes_agree() {
        // n = 8 via permutations vs the same data padded through n = 9 with a
        // shared far-away point, which the assignment must pair with itself.
        let a = [0.3, -1.0, 2.2, 0.7, -0.4, 1.9, 0.05, -2.2];
        let b = [1.1, 0.2, -0.9, 2.5, -1.7, 0.6, 0.0, 1.4];
        let small = exact_1d_w2(&a, &b).unwrap();
        let mut a9 = a.to_vec();
        let mut b9 = b.to_vec();
        a9.push(1e3);
        b9.push(1e3);
        let big = exact_1d_w2(&a9, &b9).unwrap();
        assert!((small - big).abs() < 1e-9);
    }
}
