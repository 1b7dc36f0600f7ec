//! The joint training step and the run loop around it.
//!
//! One step builds a single graph holding the source and target forward
//! passes, the detection loss on source, the backbone alignment loss on both
//! pyramids and the decoder alignment loss on the pooled query features, and
//! then takes one backward pass. Gradient reversal inside the discriminators
//! lets the detector and the discriminators update from that same pass, each
//! with its own Adam optimizer and learning rate.

use ndnum::{Graph, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::oaa::{discriminate, global_align_loss, masked_align_loss, oaa_loss, Discriminator, DomainScoreMap};
use crate::ota::{sample_projections, sliced_w2, DecoderFeatures, Domain, ProjectionSet};
use crate::params::{Adam, Bound};
use crate::pseudo::{filter_detections, BoxOrigin, rasterize_masks, source_masks_from_gt, PseudoBoxSet, DEFAULT_TAU};
use crate::rng::{stream, stream_at};
use crate::toydet::detector::{DetectorConfig, ToyDetector};
use crate::toydet::loss::{detection_loss, match_batch, LossWeights, Target};
use crate::toydet::map::{evaluate_map, MapTable};
use crate::toydet::scene::{Annotation, Scene};

/// Where alignment is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    None,
    Backbone,
    Decoder,
    Both,
}

impl Placement {
    pub fn backbone(self) -> bool {
        matches!(self, Self::Backbone | Self::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, Self::Decoder | Self::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Backbone => "backbone",
            Self::Decoder => "decoder",
            Self::Both => "backbone+decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => Self::None,
            "backbone" => Self::Backbone,
            "decoder" => Self::Decoder,
            "backbone+decoder" | "both" => Self::Both,
            _ => return None,
        })
    }
}

/// Backbone alignment: object-aware (global plus masked) or global only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackboneMethod {
    ObjectAware,
    Global,
}

impl BackboneMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::ObjectAware => "oaa",
            Self::Global => "ga",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "oaa" => Some(Self::ObjectAware),
            "ga" => Some(Self::Global),
            _ => None,
        }
    }
}

/// Decoder alignment: sliced Wasserstein, or a query-level discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecoderMethod {
    Transport,
    Adversarial,
}

impl DecoderMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Transport => "ota",
            Self::Adversarial => "ada",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ota" => Some(Self::Transport),
            "ada" => Some(Self::Adversarial),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub detector: DetectorConfig,
    pub weights: LossWeights,
    pub placement: Placement,
    pub backbone_method: BackboneMethod,
    pub decoder_method: DecoderMethod,
    pub tau: f64,
    pub lambda: f64,
    pub beta: f64,
    pub projections: usize,
    pub lr_detector: f64,
    pub lr_discriminator: f64,
    pub disc_hidden: usize,
    pub grl_factor: f64,
    pub freeze_discriminator: bool,
    pub batch: usize,
    /// Source-only steps before alignment starts.
    pub pretrain_steps: u64,
    /// Steps between pseudo-label refreshes once alignment is on; the default
    /// is one pass over 256 target images at batch 4.
    pub refresh_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            weights: LossWeights::default(),
            placement: Placement::Both,
            backbone_method: BackboneMethod::ObjectAware,
            decoder_method: DecoderMethod::Transport,
            tau: DEFAULT_TAU,
            lambda: 1.0,
            beta: 1.0,
            projections: 256,
            lr_detector: 2e-4,
            lr_discriminator: 4e-3,
            disc_hidden: 16,
            grl_factor: 1.0,
            freeze_discriminator: false,
            batch: 4,
            pretrain_steps: 0,
            refresh_every: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        let bad = |what: &str| Err(Error::Invalid(what.to_owned()));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0) || !(self.beta >= 0.0) {
            return bad("lambda and beta must be ≥ 0");
        }
        if self.projections == 0 {
            return bad("projection count must be ≥ 1");
        }
        if !(self.lr_detector > 0.0) || !(self.lr_discriminator > 0.0) {
            return bad("learning rates must be > 0");
        }
        if self.batch == 0 || self.disc_hidden == 0 || self.refresh_every == 0 {
            return bad("batch, discriminator width and refresh interval must be ≥ 1");
        }
        Ok(())
    }
}

/// Scalar loss values of one step. Alignment entries are `None` when the
/// corresponding term is not part of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub det: f64,
    pub global: Option<f64>,
    pub masked: Option<f64>,
    pub ota: Option<f64>,
    pub ada: Option<f64>,
    pub total: f64,
}

/// Normalised targets for a scene.
pub fn targets_of(scene: &Scene) -> Vec<Target> {
    let (w, h) = (scene.image.width as f64, scene.image.height as f64);
    scene
        .annotations
        .iter()
        .map(|a| Target {
            cxcywh: a.bbox.to_cxcywh(w, h),
            class: a.class,
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub seed: u64,
    pub detector: ToyDetector,
    pub backbone_disc: Discriminator,
    pub decoder_disc: Discriminator,
    pub opt_detector: Adam,
    pub opt_backbone_disc: Adam,
    pub opt_decoder_disc: Adam,
    /// Current pseudo boxes, one set per target training scene.
    pub pseudo: Vec<PseudoBoxSet>,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let detector = ToyDetector::new(config.detector.clone(), &mut stream(seed, "detector-init"))?;
        let mut disc_rng = stream(seed, "discriminator-init");
        let mut backbone_disc = Discriminator::new("disc.backbone", &config.detector.channels, config.disc_hidden, &mut disc_rng)?;
        let mut decoder_disc = Discriminator::new("disc.decoder", &[config.detector.dim], config.disc_hidden, &mut disc_rng)?;
        backbone_disc.grl_factor = config.grl_factor;
        decoder_disc.grl_factor = config.grl_factor;
        let opt_detector = Adam::new(&detector.params, config.lr_detector);
        let opt_backbone_disc = Adam::new(&backbone_disc.params, config.lr_discriminator);
        let opt_decoder_disc = Adam::new(&decoder_disc.params, config.lr_discriminator);
        Ok(Self {
            config,
            seed,
            detector,
            backbone_disc,
            decoder_disc,
            opt_detector,
            opt_backbone_disc,
            opt_decoder_disc,
            pseudo: Vec::new(),
            step: 0,
        })
    }

    /// Alignment placement in force at the current step.
    pub fn active_placement(&self) -> Placement {
        if self.step < self.config.pretrain_steps {
            Placement::None
        } else {
            self.config.placement
        }
    }

    /// Re-derives pseudo boxes for every target scene from the current model.
    pub fn refresh_pseudo(&mut self, target: &[Scene]) -> Result<usize> {
        let mut malformed = 0;
        self.pseudo = target
            .chunks(16)
            .map(|chunk| {
                let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
                self.detector.predict(&imgs)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .map(|dets| {
                let out = filter_detections(&dets, self.config.tau);
                malformed += out.malformed;
                out.set
            })
            .collect();
        Ok(malformed)
    }

    /// One optimisation step on a source batch and a target batch with the
    /// given target pseudo boxes.
    pub fn train_step(&mut self, src: &[&Scene], tgt: &[&Scene], tgt_boxes: &[&PseudoBoxSet]) -> Result<LossBundle> {
        let placement = self.active_placement();
        let cfg = &self.config;
        if src.is_empty() {
            return Err(Error::Empty("source batch"));
        }
        if placement != Placement::None && (src.len() != tgt.len() || tgt.len() != tgt_boxes.len()) {
            return Err(Error::Mismatch {
                what: "source/target batch size",
                left: src.len(),
                right: tgt.len(),
            });
        }

        let mut g = Graph::new();
        let det_bound = self.detector.params.bind(&mut g);
        let bind_disc = |g: &mut Graph, d: &Discriminator| {
            if cfg.freeze_discriminator {
                d.params.bind_frozen(g)
            } else {
                d.params.bind(g)
            }
        };
        let bb_bound = bind_disc(&mut g, &self.backbone_disc);
        let dec_bound = bind_disc(&mut g, &self.decoder_disc);

        let proj = if placement.decoder() && cfg.decoder_method == DecoderMethod::Transport {
            let mut rng = stream_at(self.seed, "projections", self.step);
            Some(sample_projections(cfg.projections, cfg.detector.dim, &mut rng)?)
        } else {
            None
        };
        let models = Models {
            detector: &self.detector,
            backbone_disc: &self.backbone_disc,
            decoder_disc: &self.decoder_disc,
        };
        let bounds = [&det_bound, &bb_bound, &dec_bound];
        let obj = build_objective(&mut g, cfg, placement, &models, bounds, src, tgt, tgt_boxes, proj.as_ref())?;
        let Objective {
            total,
            det,
            global,
            masked,
            ota,
            ada,
        } = obj;
        let value = |v: Option<Var>| v.map(|v| g.scalar(v));
        let bundle = LossBundle {
            det: g.scalar(det),
            global: value(global),
            masked: value(masked),
            ota: value(ota),
            ada: value(ada),
            total: g.scalar(total),
        };
        if !bundle.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("{bundle:?}"),
            });
        }

        let grads = g.backward(total)?;
        let gd = det_bound.gradients(&grads, &self.detector.params);
        self.opt_detector.apply(&mut self.detector.params, &gd);
        if !self.config.freeze_discriminator {
            if placement.backbone() {
                let gb = bb_bound.gradients(&grads, &self.backbone_disc.params);
                self.opt_backbone_disc.apply(&mut self.backbone_disc.params, &gb);
            }
            if placement.decoder() && self.config.decoder_method == DecoderMethod::Adversarial {
                let gq = dec_bound.gradients(&grads, &self.decoder_disc.params);
                self.opt_decoder_disc.apply(&mut self.decoder_disc.params, &gq);
            }
        }
        self.step += 1;
        Ok(bundle)
    }

    /// Draws the step's batches and runs [`Trainer::train_step`], refreshing
    /// pseudo boxes first when an alignment epoch starts.
    pub fn step_on(&mut self, data: &Datasets) -> Result<LossBundle> {
        if data.source_train.is_empty() || data.target_train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let placement = self.active_placement();
        let needs_boxes = placement.backbone() && self.config.backbone_method == BackboneMethod::ObjectAware;
        if needs_boxes {
            let since = self.step - self.config.pretrain_steps;
            if since % self.config.refresh_every == 0 || self.pseudo.len() != data.target_train.len() {
                self.refresh_pseudo(&data.target_train)?;
            }
        }
        let b = self.config.batch;
        let mut rs = stream_at(self.seed, "source-batch", self.step);
        let src: Vec<&Scene> = (0..b).map(|_| &data.source_train[rs.random_range(0..data.source_train.len())]).collect();
        let mut rt = stream_at(self.seed, "target-batch", self.step);
        let idx: Vec<usize> = (0..b).map(|_| rt.random_range(0..data.target_train.len())).collect();
        let tgt: Vec<&Scene> = idx.iter().map(|&i| &data.target_train[i]).collect();
        let boxes: Vec<PseudoBoxSet> = idx
            .iter()
            .map(|&i| self.pseudo.get(i).cloned().unwrap_or_else(|| PseudoBoxSet::empty(BoxOrigin::Pseudo)))
            .collect();
        let boxes: Vec<&PseudoBoxSet> = boxes.iter().collect();
        self.train_step(&src, &tgt, &boxes)
    }

    pub fn evaluate(&self, scenes: &[Scene], thresholds: &[f64]) -> Result<MapTable> {
        if scenes.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let mut preds = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(16) {
            let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
            preds.extend(self.detector.predict(&imgs)?);
        }
        let gts: Vec<Vec<Annotation>> = scenes.iter().map(|s| s.annotations.clone()).collect();
        Ok(evaluate_map(&preds, &gts, self.config.detector.num_classes, thresholds))
    }
}

/// The models an objective is built from.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub detector: &'a ToyDetector,
    pub backbone_disc: &'a Discriminator,
    pub decoder_disc: &'a Discriminator,
}

/// Graph handles of the scalar terms of one objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub det: Var,
    pub global: Option<Var>,
    pub masked: Option<Var>,
    pub ota: Option<Var>,
    pub ada: Option<Var>,
}

/// Builds `L_det + L_OAA + β·L_align` for one source/target batch.
///
/// `bounds` are the detector, backbone-discriminator and
/// decoder-discriminator parameters bound in `g`. `proj` is required when
/// transport alignment is active.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    g: &mut Graph,
    cfg: &TrainConfig,
    placement: Placement,
    models: &Models<'_>,
    bounds: [&Bound; 3],
    src: &[&Scene],
    tgt: &[&Scene],
    tgt_boxes: &[&PseudoBoxSet],
    proj: Option<&ProjectionSet>,
) -> Result<Objective> {
    let [det_bound, bb_bound, dec_bound] = bounds;
    let src_imgs: Vec<_> = src.iter().map(|s| &s.image).collect();
    let out_s = models.detector.forward(g, det_bound, &src_imgs)?;
    let targets: Vec<Vec<Target>> = src.iter().map(|s| targets_of(s)).collect();
    let matchings = match_batch(g, &out_s, &targets, &cfg.weights)?;
    let det = detection_loss(g, out_s.logits, out_s.boxes, &targets, &matchings, &cfg.weights)?.total;

    let mut terms = vec![det];
    let (mut global, mut masked, mut ota, mut ada) = (None, None, None, None);
    if placement != Placement::None {
        let tgt_imgs: Vec<_> = tgt.iter().map(|s| &s.image).collect();
        let out_t = models.detector.forward(g, det_bound, &tgt_imgs)?;

        if placement.backbone() {
            let ss = discriminate(g, models.backbone_disc, bb_bound, &out_s.pyramid, Domain::Source)?;
            let st = discriminate(g, models.backbone_disc, bb_bound, &out_t.pyramid, Domain::Target)?;
            let ld = global_align_loss(g, &ss, &st)?;
            global = Some(ld);
            let l_oaa = match cfg.backbone_method {
                BackboneMethod::ObjectAware => {
                    let geo = &out_s.pyramid.geometry;
                    let ms: Vec<_> = src
                        .iter()
                        .map(|s| source_masks_from_gt(&s.annotations.iter().map(|a| a.bbox).collect::<Vec<BBox>>(), geo))
                        .collect();
                    let mt: Vec<_> = tgt_boxes.iter().map(|b| rasterize_masks(b, geo)).collect();
                    let lm = masked_align_loss(g, &ss, &st, &ms, &mt)?;
                    masked = Some(lm);
                    oaa_loss(g, ld, lm, cfg.lambda)?
                }
                BackboneMethod::Global => ld,
            };
            terms.push(l_oaa);
        }

        if placement.decoder() {
            let l = match cfg.decoder_method {
                DecoderMethod::Transport => {
                    let proj = proj.ok_or_else(|| Error::Invalid("transport alignment needs projections".into()))?;
                    let fs = DecoderFeatures::new(g, out_s.decoder, Domain::Source)?;
                    let ft = DecoderFeatures::new(g, out_t.decoder, Domain::Target)?;
                    let l = sliced_w2(g, &fs, &ft, proj)?;
                    ota = Some(l);
                    l
                }
                DecoderMethod::Adversarial => {
                    let l = query_adversarial_loss(g, models.decoder_disc, dec_bound, out_s.decoder, out_t.decoder)?;
                    ada = Some(l);
                    l
                }
            };
            terms.push(g.scalar_mul(l, cfg.beta)?);
        }
    }
    let total = g.add_all(&terms)?;
    Ok(Objective {
        total,
        det,
        global,
        masked,
        ota,
        ada,
    })
}

/// Adversarial alignment of decoder outputs: the query rows of each domain
/// are scored by a discriminator behind gradient reversal.
pub fn query_adversarial_loss(g: &mut Graph, disc: &Discriminator, bound: &Bound, src: Var, tgt: Var) -> Result<Var> {
    let mut maps = Vec::with_capacity(2);
    for (x, domain) in [(src, Domain::Source), (tgt, Domain::Target)] {
        let rows = g.shape(x)[0];
        let z = disc.score_rows(g, bound, 0, x)?;
        let geo = crate::geometry::LevelGeometry {
            width: rows,
            height: 1,
            stride: 1,
            channels: g.shape(x)[1],
        };
        maps.push(DomainScoreMap::from_logits(g, vec![z], vec![geo], 1, domain)?);
    }
    global_align_loss(g, &maps[0], &maps[1])
}

/// Source training, target training (unlabelled in use) and target test scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub source_train: Vec<Scene>,
    pub target_train: Vec<Scene>,
    pub target_test: Vec<Scene>,
}
