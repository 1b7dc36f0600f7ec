//! Randomised oracle and invariant checks shared by the `check` command and
//! the acceptance tests. Every routine is deterministic given its seed.

use std::time::{Duration, Instant};

use ndnum::{finite_diff_check, finite_diff_check_multi, Graph, Probes, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::geometry::{BBox, LevelGeometry};
use crate::oaa::{global_align_loss, masked_align_loss, Discriminator, DomainScoreMap, FeaturePyramid};
use crate::ota::{exact_1d_w2, sample_projections, sliced_w2, DecoderFeatures, Domain, ProjectionSet};
use crate::params::{Bound, ParamSet};
use crate::pseudo::{oracle, rasterize_masks, BoxOrigin, PseudoBoxSet, WeightMask};
use crate::rng::{stream, Rng as StdRng};
use crate::toydet::dataset::Scenario;
use crate::toydet::detector::DetectorConfig;
use crate::toydet::scene::{generate_scene, DomainShiftConfig, SceneConfig};
use crate::toydet::train::{build_objective, Models, Placement, TrainConfig, Trainer};

pub const FD_EPS: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl CheckOutcome {
    fn new(name: &'static str, started: Instant, passed: bool, detail: String) -> Self {
        Self {
            name,
            passed,
            detail,
            elapsed: started.elapsed(),
        }
    }
}

fn matrix(rng: &mut StdRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

fn project(theta: &[f64], x: &Tensor) -> Vec<f64> {
    (0..x.shape()[0])
        .map(|i| theta.iter().zip(x.row(i)).map(|(a, b)| a * b).sum())
        .collect()
}

/// Per-projection sliced terms against the assignment oracle.
pub fn ot_oracle(pairs: usize, seed: u64) -> Result<CheckOutcome> {
    let started = Instant::now();
    let mut rng = stream(seed, "verify-ot-oracle");
    let mut worst: f64 = 0.0;
    let mut terms = 0usize;
    for _ in 0..pairs {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=8);
        let a = matrix(&mut rng, n, d, -2.0, 2.0);
        let b = matrix(&mut rng, n, d, -2.0, 2.0);
        let proj = sample_projections(8, d, &mut rng)?;
        for k in 0..proj.count() {
            let single = ProjectionSet::from_rows(&[proj.row(k).to_vec()])?;
            let mut g = Graph::new();
            let va = g.constant(a.clone());
            let vb = g.constant(b.clone());
            let fa = DecoderFeatures::new(&g, va, Domain::Source)?;
            let fb = DecoderFeatures::new(&g, vb, Domain::Target)?;
            let l = sliced_w2(&mut g, &fa, &fb, &single)?;
            let exact = exact_1d_w2(&project(single.row(0), &a), &project(single.row(0), &b))?;
            worst = worst.max((g.scalar(l) - exact).abs());
            terms += 1;
        }
    }
    Ok(CheckOutcome::new(
        "ot-oracle",
        started,
        worst <= 1e-9,
        format!("{pairs} pairs, {terms} projection terms, max |Δ| = {worst:.3e} (tol 1e-9)"),
    ))
}

/// Metric properties of the sliced loss over random trials.
pub fn swd_properties(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let started = Instant::now();
    let mut rng = stream(seed, "verify-swd");
    let mut violations = 0usize;
    let eval = |a: &Tensor, b: &Tensor, p: &ProjectionSet| -> Result<f64> {
        let mut g = Graph::new();
        let va = g.constant(a.clone());
        let vb = g.constant(b.clone());
        let fa = DecoderFeatures::new(&g, va, Domain::Source)?;
        let fb = DecoderFeatures::new(&g, vb, Domain::Target)?;
        let l = sliced_w2(&mut g, &fa, &fb, p)?;
        Ok(g.scalar(l))
    };
    let permute = |x: &Tensor, perm: &[usize]| {
        let d = x.shape()[1];
        Tensor::matrix(x.shape()[0], d, perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).expect("sized")
    };
    for _ in 0..trials {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=8);
        let k = rng.random_range(1..=16);
        let a = matrix(&mut rng, n, d, -2.0, 2.0);
        let b = matrix(&mut rng, n, d, -2.0, 2.0);
        let p = sample_projections(k, d, &mut rng)?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let ab = eval(&a, &b, &p)?;
        let ba = eval(&b, &a, &p)?;
        let self_perm = eval(&a, &permute(&a, &perm), &p)?;
        let ab_perm = eval(&permute(&a, &perm), &b, &p)?;
        let ok = ab >= 0.0 && ab == ba && self_perm == 0.0 && ab_perm == ab;
        violations += usize::from(!ok);
    }
    Ok(CheckOutcome::new(
        "swd-properties",
        started,
        violations == 0,
        format!("{trials} trials, {violations} violations"),
    ))
}

fn random_geometry(rng: &mut StdRng) -> (Vec<LevelGeometry>, f64) {
    let levels = rng.random_range(1..=3);
    let base = rng.random_range(1..=4usize);
    let cells = rng.random_range(2..=12usize);
    let image = (base * cells) as f64;
    let geo = (0..levels)
        .map(|l| {
            let stride = base << l;
            let n = (base * cells).div_ceil(stride);
            LevelGeometry {
                width: n,
                height: n,
                stride,
                channels: 1,
            }
        })
        .collect();
    (geo, image)
}

fn random_boxes(rng: &mut StdRng, image: f64, geo: &[LevelGeometry]) -> Vec<BBox> {
    let count = rng.random_range(0..=5);
    (0..count)
        .map(|_| {
            // half of the coordinates land exactly on a cell centre
            let coord = |rng: &mut StdRng| {
                if rng.random_bool(0.5) {
                    let l = &geo[rng.random_range(0..geo.len())];
                    ((rng.random_range(0..l.width) as f64 + 0.5) * l.stride as f64).min(image)
                } else {
                    rng.random_range(0.0..image)
                }
            };
            let (x0, x1, y0, y1) = (coord(rng), coord(rng), coord(rng), coord(rng));
            BBox::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1))
        })
        .collect()
}

fn score_map(g: &mut Graph, rng: &mut StdRng, geo: &[LevelGeometry], batch: usize, domain: Domain) -> Result<DomainScoreMap> {
    let logits = geo
        .iter()
        .map(|l| g.param(matrix(rng, batch * l.cells(), 1, -3.0, 3.0)))
        .collect();
    DomainScoreMap::from_logits(g, logits, geo.to_vec(), batch, domain)
}

/// Rasteriser against the point-in-box oracle, then masked loss with all-one
/// masks against the global loss (values and gradients).
pub fn mask_oracle(geometries: usize, loss_trials: usize, seed: u64) -> Result<CheckOutcome> {
    let started = Instant::now();
    let mut rng = stream(seed, "verify-masks");
    let mut mismatches = 0usize;
    let mut cells = 0usize;
    for _ in 0..geometries {
        let (geo, image) = random_geometry(&mut rng);
        let boxes = random_boxes(&mut rng, image, &geo);
        let fast = rasterize_masks(&PseudoBoxSet::ground_truth(boxes.iter().copied()), &geo);
        let slow = oracle::point_in_box_masks(&boxes, &geo);
        for (a, b) in fast.levels.iter().zip(&slow.levels) {
            cells += a.len();
            mismatches += a.iter().zip(b).filter(|(x, y)| x != y).count();
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..loss_trials {
        let (geo, _) = random_geometry(&mut rng);
        let batch = rng.random_range(1..=3);
        let mut g = Graph::new();
        let s = score_map(&mut g, &mut rng, &geo, batch, Domain::Source)?;
        let t = score_map(&mut g, &mut rng, &geo, batch, Domain::Target)?;
        let ones = vec![WeightMask::ones(&geo); batch];
        let lg = global_align_loss(&mut g, &s, &t)?;
        let lm = masked_align_loss(&mut g, &s, &t, &ones, &ones)?;
        worst = worst.max((g.scalar(lg) - g.scalar(lm)).abs());
        let gg = g.backward(lg)?;
        let gm = g.backward(lm)?;
        for &v in s.logits.iter().chain(&t.logits) {
            let (a, b) = (gg.get(v).expect("grad"), gm.get(v).expect("grad"));
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(CheckOutcome::new(
        "mask-oracle",
        started,
        mismatches == 0 && worst <= 1e-12,
        format!("{geometries} geometries, {cells} cells, {mismatches} mismatches; all-ones masked vs global max |Δ| = {worst:.3e} over {loss_trials} inputs"),
    ))
}

fn away_from_zero(t: Tensor, gap: f64) -> Tensor {
    t.map(|x| if x.abs() < gap { x.signum() * gap + x } else { x })
}

/// One finite-difference case over a single random input tensor.
type OpCase = (&'static str, Vec<usize>, fn(&mut Graph, Var) -> ndnum::Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("add", vec![2, 3], |g, x| {
            let c = g.constant(Tensor::matrix(2, 3, vec![0.3, -1.0, 0.7, 1.1, -0.2, 0.5]).expect("sized"));
            let y = g.add(x, c)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        }),
        ("sub", vec![4], |g, x| {
            let c = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 0.0]));
            let y = g.sub(c, x)?;
            let y = g.square(y)?;
            g.sum(y)
        }),
        ("mul", vec![2, 2], |g, x| {
            let y = g.mul(x, x)?;
            let y = g.mul(y, x)?;
            g.sum(y)
        }),
        ("div", vec![4], |g, x| {
            let c = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
            let s = g.square(x)?;
            let d = g.add_scalar(s, 0.5)?;
            let q = g.div(c, d)?;
            let q2 = g.div(x, d)?;
            let y = g.add(q, q2)?;
            g.sum(y)
        }),
        ("scalar-mul", vec![3], |g, x| {
            let y = g.scalar_mul(x, -1.7)?;
            let y = g.square(y)?;
            g.sum(y)
        }),
        ("matmul", vec![3, 2], |g, x| {
            let w = g.constant(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7]).expect("sized"));
            let p = g.matmul(x, w)?;
            let q = g.matmul(w, x)?;
            let p = g.square(p)?;
            let a = g.sum(p)?;
            let q = g.square(q)?;
            let b = g.sum(q)?;
            g.add(a, b)
        }),
        ("relu", vec![6], |g, x| {
            let w = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]));
            let r = g.relu(x)?;
            let y = g.mul(r, w)?;
            g.sum(y)
        }),
        ("sigmoid", vec![5], |g, x| {
            let s = g.sigmoid(x)?;
            let s = g.square(s)?;
            g.sum(s)
        }),
        ("softmax", vec![2, 3], |g, x| {
            let w = g.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.1, -1.0]).expect("sized"));
            let s = g.softmax(x)?;
            let y = g.mul(s, w)?;
            g.sum(y)
        }),
        ("log", vec![4], |g, x| {
            let s = g.square(x)?;
            let s = g.add_scalar(s, 0.1)?;
            let l = g.log(s)?;
            g.sum(l)
        }),
        ("square", vec![4], |g, x| {
            let y = g.square(x)?;
            let y = g.square(y)?;
            g.sum(y)
        }),
        ("sum-mean", vec![2, 2], |g, x| {
            let s = g.sum(x)?;
            let m = g.mean(x)?;
            let y = g.mul(s, m)?;
            g.square(y)
        }),
        ("reshape-concat-gather", vec![6], |g, x| {
            let r = g.reshape(x, &[3, 2])?;
            let c = g.concat(&[r, r], 1)?;
            let c2 = g.concat(&[r, r], 0)?;
            let t = g.gather(c, vec![0, 5, 5, 7, 11, 2], &[6])?;
            let t2 = g.gather(c2, vec![1, 11, 4], &[3])?;
            let t = g.square(t)?;
            let a = g.sum(t)?;
            let t2 = g.square(t2)?;
            let b = g.sum(t2)?;
            g.add(a, b)
        }),
        ("sort", vec![2, 4], |g, x| {
            let (s, _) = g.sort_with_permutation(x)?;
            let w = g.constant(Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 1.0]).expect("sized"));
            let y = g.mul(s, w)?;
            let y = g.square(y)?;
            g.sum(y)
        }),
        ("grad-reverse", vec![3], |g, x| {
            // two reversals cancel; a factor of -1 is the identity
            let r = g.grad_reverse(x, 0.5)?;
            let r = g.grad_reverse(r, 2.0)?;
            let r = g.grad_reverse(r, -1.0)?;
            let y = g.square(r)?;
            g.sum(y)
        }),
    ]
}

fn tie_free_rows(t: Tensor, gap: f64) -> Tensor {
    let cols = t.shape()[t.rank() - 1];
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(cols) {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        for w in 1..idx.len() {
            if row[idx[w]] - row[idx[w - 1]] < gap {
                row[idx[w]] = row[idx[w - 1]] + gap;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("sized")
}

#[derive(Debug, Clone, Default)]
struct SuiteTally {
    cases: usize,
    failures: Vec<String>,
    worst: f64,
    probes: usize,
    crossings: usize,
}

impl SuiteTally {
    fn record(&mut self, name: &str, r: &ndnum::GradCheckReport) {
        self.cases += 1;
        self.probes += r.probes;
        self.crossings += r.branch_crossings;
        if r.max_rel_err.is_finite() {
            self.worst = self.worst.max(r.max_rel_err);
        }
        if !r.passed && self.failures.len() < 5 {
            self.failures.push(format!("{name}: {r:?}"));
        }
        if !r.passed && self.failures.len() >= 5 {
            self.failures.truncate(5);
        }
    }

    fn failed(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Central differences for every op kind, the masked alignment loss, the
/// sliced loss and the full training objective on a 16×16 scene.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let started = Instant::now();
    let mut rng = stream(seed, "verify-gradients");
    let mut tally = SuiteTally::default();
    let mut failed_cases = 0usize;
    let mut per_group = Vec::new();

    for (name, shape, f) in op_cases() {
        let mut t = SuiteTally::default();
        for _ in 0..trials {
            let n: usize = shape.iter().product();
            let x = Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())?;
            let x = match name {
                "relu" => away_from_zero(x, 1e-3),
                "sort" => tie_free_rows(x, 1e-3),
                _ => x,
            };
            let r = finite_diff_check(f, &x, FD_EPS, FD_TOL);
            t.record(name, &r);
        }
        per_group.push((name, t.worst));
        failed_cases += usize::from(t.failed());
        merge(&mut tally, t);
    }

    let t = masked_loss_gradients(&mut rng, trials)?;
    per_group.push(("masked-align", t.worst));
    failed_cases += usize::from(t.failed());
    merge(&mut tally, t);

    let t = sliced_gradients(&mut rng, trials)?;
    per_group.push(("sliced-w2", t.worst));
    failed_cases += usize::from(t.failed());
    merge(&mut tally, t);

    let t = objective_gradients(seed, trials)?;
    per_group.push(("full-objective", t.worst));
    failed_cases += usize::from(t.failed());
    merge(&mut tally, t);

    let groups: Vec<String> = per_group.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect();
    let mut detail = format!(
        "{} checks, {} probes ({} skipped at kinks), worst rel err {:.3e} (tol {FD_TOL:.0e}); {}",
        tally.cases,
        tally.probes,
        tally.crossings,
        tally.worst,
        groups.join(", ")
    );
    for f in &tally.failures {
        detail.push_str("\n  failed ");
        detail.push_str(f);
    }
    Ok(CheckOutcome::new("gradients", started, failed_cases == 0, detail))
}

fn merge(into: &mut SuiteTally, t: SuiteTally) {
    into.cases += t.cases;
    into.probes += t.probes;
    into.crossings += t.crossings;
    into.worst = into.worst.max(t.worst);
    into.failures.extend(t.failures);
    into.failures.truncate(5);
}

/// Randomises every discriminator tensor, including the zero-initialised
/// output layer, so gradients are nontrivial.
fn jitter(params: &mut ParamSet, rng: &mut StdRng, scale: f64) {
    for slot in 0..params.len() {
        for v in params.tensor_mut(slot).data_mut() {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
}

/// Reversal deliberately disagrees with finite differences by sign; with this
/// factor the layer is an identity, so the composite checks see the true
/// derivative of the written loss. The reversal rule has its own case.
const IDENTITY_REVERSAL: f64 = -1.0;

fn masked_loss_gradients(rng: &mut StdRng, trials: usize) -> Result<SuiteTally> {
    let mut tally = SuiteTally::default();
    let geo = vec![
        LevelGeometry {
            width: 3,
            height: 3,
            stride: 2,
            channels: 3,
        },
        LevelGeometry {
            width: 2,
            height: 2,
            stride: 4,
            channels: 4,
        },
    ];
    for _ in 0..trials {
        let mut disc = Discriminator::new("d", &[3, 4], 5, rng)?;
        jitter(&mut disc.params, rng, 0.5);
        disc.grl_factor = IDENTITY_REVERSAL;
        let feats: Vec<Tensor> = [0usize, 1]
            .iter()
            .flat_map(|&_d| geo.iter().map(|l| (l.cells(), l.channels)).collect::<Vec<_>>())
            .map(|(r, c)| matrix(rng, r, c, -2.0, 2.0))
            .collect();
        let mask = |rng: &mut StdRng| WeightMask {
            levels: geo.iter().map(|l| (0..l.cells()).map(|_| u8::from(rng.random_bool(0.5))).collect()).collect(),
        };
        let (ms, mt) = (vec![mask(rng)], vec![mask(rng)]);
        let mut inputs = feats;
        inputs.extend(disc.params.tensors().iter().cloned());
        let n_feat = 4;
        let geo_ref = &geo;
        let disc_ref = &disc;
        let r = finite_diff_check_multi(
            |g, vs| {
                let bound = Bound::from_vars(vs[n_feat..].to_vec());
                let py_s = FeaturePyramid::new(g, vs[0..2].to_vec(), geo_ref.clone(), 1, (6, 6)).map_err(to_nd)?;
                let py_t = FeaturePyramid::new(g, vs[2..4].to_vec(), geo_ref.clone(), 1, (6, 6)).map_err(to_nd)?;
                let s = crate::oaa::discriminate(g, disc_ref, &bound, &py_s, Domain::Source).map_err(to_nd)?;
                let t = crate::oaa::discriminate(g, disc_ref, &bound, &py_t, Domain::Target).map_err(to_nd)?;
                masked_align_loss(g, &s, &t, &ms, &mt).map_err(to_nd)
            },
            &inputs,
            &Probes::All,
            FD_EPS,
            FD_TOL,
        );
        tally.record("masked-align", &r);
    }
    Ok(tally)
}

fn to_nd(e: crate::Error) -> ndnum::Error {
    match e {
        crate::Error::Tensor(t) => t,
        other => ndnum::Error::Fragment {
            offset: 0,
            reason: other.to_string(),
        },
    }
}

fn min_projection_gap(p: &ProjectionSet, x: &Tensor) -> f64 {
    (0..p.count())
        .map(|k| {
            let mut v = project(p.row(k), x);
            v.sort_by(f64::total_cmp);
            v.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min)
}

fn sliced_gradients(rng: &mut StdRng, trials: usize) -> Result<SuiteTally> {
    let mut tally = SuiteTally::default();
    let mut done = 0;
    while done < trials {
        let (n, d) = (6, 4);
        let a = matrix(rng, n, d, -2.0, 2.0);
        let b = matrix(rng, n, d, -2.0, 2.0);
        let p = sample_projections(8, d, rng)?;
        // keep inputs whose projections are separated by well over 10·eps
        if min_projection_gap(&p, &a).min(min_projection_gap(&p, &b)) < 1e-4 {
            continue;
        }
        let r = finite_diff_check_multi(
            |g, vs| {
                let fa = DecoderFeatures::new(g, vs[0], Domain::Source).map_err(to_nd)?;
                let fb = DecoderFeatures::new(g, vs[1], Domain::Target).map_err(to_nd)?;
                sliced_w2(g, &fa, &fb, &p).map_err(to_nd)
            },
            &[a, b],
            &Probes::All,
            FD_EPS,
            FD_TOL,
        );
        tally.record("sliced-w2", &r);
        done += 1;
    }
    Ok(tally)
}

/// Coordinates probed per parameter tensor in the end-to-end check.
const OBJECTIVE_PROBES_PER_TENSOR: usize = 2;

fn objective_gradients(seed: u64, trials: usize) -> Result<SuiteTally> {
    let mut tally = SuiteTally::default();
    let mut rng = stream(seed, "verify-objective");
    let scene_cfg = SceneConfig {
        size: 16,
        max_objects: 2,
        min_extent: 4,
        max_extent: 7,
        ..SceneConfig::default()
    };
    let cfg = TrainConfig {
        detector: DetectorConfig {
            image_size: 16,
            ..DetectorConfig::default()
        },
        projections: 16,
        batch: 2,
        ..TrainConfig::default()
    };
    for trial in 0..trials {
        let mut tr = Trainer::new(cfg.clone(), seed.wrapping_add(trial as u64))?;
        jitter(&mut tr.backbone_disc.params, &mut rng, 0.3);
        tr.backbone_disc.grl_factor = IDENTITY_REVERSAL;
        tr.decoder_disc.grl_factor = IDENTITY_REVERSAL;
        // move the zero-initialised class head off its symmetric start
        jitter(&mut tr.detector.params, &mut rng, 0.05);
        let src: Vec<_> = (0..2)
            .map(|i| generate_scene(&scene_cfg, rng.random::<u64>() ^ i, None))
            .collect::<Result<_>>()?;
        let tgt: Vec<_> = (0..2)
            .map(|_| generate_scene(&scene_cfg, rng.random(), Some(&DomainShiftConfig::default())))
            .collect::<Result<_>>()?;
        let boxes: Vec<PseudoBoxSet> = tgt
            .iter()
            .map(|s| PseudoBoxSet {
                boxes: s.annotations.iter().map(|a| a.bbox).collect(),
                scores: vec![0.9; s.annotations.len()],
                origin: BoxOrigin::Pseudo,
            })
            .collect();
        let proj = sample_projections(cfg.projections, cfg.detector.dim, &mut rng)?;

        let n_det = tr.detector.params.len();
        let mut inputs: Vec<Tensor> = tr.detector.params.tensors().to_vec();
        inputs.extend(tr.backbone_disc.params.tensors().iter().cloned());
        let coords: Vec<Vec<usize>> = inputs
            .iter()
            .map(|t| (0..OBJECTIVE_PROBES_PER_TENSOR).map(|_| rng.random_range(0..t.len())).collect())
            .collect();
        let src_refs: Vec<_> = src.iter().collect();
        let tgt_refs: Vec<_> = tgt.iter().collect();
        let box_refs: Vec<_> = boxes.iter().collect();
        let models = Models {
            detector: &tr.detector,
            backbone_disc: &tr.backbone_disc,
            decoder_disc: &tr.decoder_disc,
        };
        let dec_params = tr.decoder_disc.params.clone();
        let r = finite_diff_check_multi(
            |g, vs| {
                let det_bound = Bound::from_vars(vs[..n_det].to_vec());
                let bb_bound = Bound::from_vars(vs[n_det..].to_vec());
                let dec_bound = dec_params.bind_frozen(g);
                let obj = build_objective(
                    g,
                    &cfg,
                    Placement::Both,
                    &models,
                    [&det_bound, &bb_bound, &dec_bound],
                    &src_refs,
                    &tgt_refs,
                    &box_refs,
                    Some(&proj),
                )
                .map_err(to_nd)?;
                Ok(obj.total)
            },
            &inputs,
            &Probes::Coordinates(coords),
            FD_EPS,
            FD_TOL,
        );
        tally.record("full-objective", &r);
    }
    Ok(tally)
}

/// Zero alignment weights with a frozen discriminator against plain source
/// training, compared bit for bit after every step.
pub fn degenerate_equivalence(steps: u64, seed: u64) -> Result<CheckOutcome> {
    let started = Instant::now();
    let scenario = Scenario {
        data_seed: seed,
        source_train: 32,
        target_train: 32,
        target_test: 1,
        ..Scenario::default()
    };
    let data = scenario.build(1)?;
    let base = TrainConfig {
        placement: Placement::None,
        ..TrainConfig::default()
    };
    let degenerate = TrainConfig {
        placement: Placement::Both,
        lambda: 0.0,
        beta: 0.0,
        freeze_discriminator: true,
        ..TrainConfig::default()
    };
    let mut a = Trainer::new(base, seed)?;
    let mut b = Trainer::new(degenerate, seed)?;
    let mut first_divergence = None;
    for step in 0..steps {
        a.step_on(&data)?;
        b.step_on(&data)?;
        let same = a
            .detector
            .params
            .tensors()
            .iter()
            .zip(b.detector.params.tensors())
            .all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        if !same {
            first_divergence = Some(step);
            break;
        }
    }
    Ok(CheckOutcome::new(
        "degenerate-weights",
        started,
        first_divergence.is_none(),
        match first_divergence {
            None => format!("{steps} steps, parameter trajectories bit-identical"),
            Some(s) => format!("trajectories diverge at step {s}"),
        },
    ))
}
