//! Train, evaluate, ablate and generate data.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use detalign::pseudo::Detection;
use detalign::toydet::dataset::{load_snapshot, save_snapshot};
use detalign::toydet::map::{evaluate_map, MapTable, THRESHOLDS};
use detalign::toydet::scene::{Annotation, Scene, CLASS_NAMES};
use detalign::toydet::train::{BackboneMethod, DecoderMethod, Datasets, LossBundle, Placement, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MAP_FILE: &str = "map.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const FINAL_CHECKPOINT: &str = "final.daal";

/// Loss columns present in the metrics log for a given configuration.
fn loss_columns(cfg: &RunConfig) -> Vec<&'static str> {
    let mut cols = vec!["det"];
    if cfg.placement.backbone() {
        cols.push("global");
        if cfg.backbone_method == BackboneMethod::ObjectAware {
            cols.push("masked");
        }
    }
    if cfg.placement.decoder() {
        cols.push(match cfg.decoder_method {
            DecoderMethod::Transport => "ota",
            DecoderMethod::Adversarial => "ada",
        });
    }
    cols.push("total");
    cols
}

fn loss_row(step: u64, cols: &[&str], b: &LossBundle) -> String {
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut row = step.to_string();
    for c in cols {
        row.push(',');
        row.push_str(&match *c {
            "det" => b.det.to_string(),
            "global" => cell(b.global),
            "masked" => cell(b.masked),
            "ota" => cell(b.ota),
            "ada" => cell(b.ada),
            _ => b.total.to_string(),
        });
    }
    row
}

fn map_header() -> String {
    let mut h = String::from("step");
    for t in THRESHOLDS {
        let _ = write!(h, ",map{}", (t * 100.0).round());
    }
    h.push_str(",ratio70,ratio80,ratio90");
    h
}

fn map_row(step: u64, m: &MapTable) -> String {
    let mut row = step.to_string();
    for v in &m.map {
        let _ = write!(row, ",{v}");
    }
    for t in [0.7, 0.8, 0.9] {
        let _ = write!(row, ",{}", m.ratio(t).unwrap_or(0.0));
    }
    row
}

/// Appends rows to a CSV, keeping earlier rows with `step < keep_below` when
/// resuming and writing a header otherwise.
struct CsvLog {
    out: BufWriter<File>,
}

impl CsvLog {
    fn open(path: &Path, header: &str, keep_below: Option<u64>) -> Result<Self> {
        let mut kept = Vec::new();
        if let (Some(limit), Ok(text)) = (keep_below, fs::read_to_string(path)) {
            let mut lines = text.lines();
            if lines.next() != Some(header) {
                bail!("{} has an unexpected header; refusing to append", path.display());
            }
            for line in lines {
                let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).context("malformed log row")?;
                if step < limit {
                    kept.push(line.to_owned());
                }
            }
        }
        let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(out, "{header}")?;
        for line in kept {
            writeln!(out, "{line}")?;
        }
        Ok(Self { out })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub steps: u64,
    pub final_map: MapTable,
}

fn checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.daal")
}

/// Runs (or resumes) training as configured and writes logs, checkpoints and
/// a final evaluation into `cfg.out_dir`.
pub fn run_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = cfg.scenario().build(cfg.workers)?;
    let mut trainer = Trainer::new(cfg.train_config(), cfg.seed)?;
    let hash = cfg.hash();

    let resumed_at = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            ck.ensure_hash(&hash)?;
            ck.restore(&mut trainer)?;
            Some(ck.step)
        }
        None => None,
    };
    fs::write(out.join("config.txt"), cfg.serialize())?;

    let cols = loss_columns(cfg);
    let mut metrics = CsvLog::open(&out.join(METRICS_FILE), &format!("step,{}", cols.join(",")), resumed_at)?;
    // evaluation rows are keyed by completed steps, hence the `+ 1`
    let mut maps = CsvLog::open(&out.join(MAP_FILE), &map_header(), resumed_at.map(|s| s + 1))?;
    let mut timings = CsvLog::open(&out.join(TIMINGS_FILE), "step,millis", resumed_at)?;

    let text = cfg.hashed_text();
    while trainer.step < cfg.steps {
        let step = trainer.step;
        let started = Instant::now();
        let bundle = trainer.step_on(&data).with_context(|| format!("training step {step}"))?;
        metrics.row(&loss_row(step, &cols, &bundle))?;
        timings.row(&format!("{step},{}", started.elapsed().as_millis()))?;
        let done = trainer.step;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.steps {
            maps.row(&map_row(done, &trainer.evaluate(&data.target_test, &THRESHOLDS)?))?;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
            metrics.flush()?;
            maps.flush()?;
            Checkpoint::capture(&trainer, hash, &text).save(&out.join(checkpoint_name(done)))?;
        }
    }
    let final_map = trainer.evaluate(&data.target_test, &THRESHOLDS)?;
    maps.row(&map_row(trainer.step, &final_map))?;
    metrics.flush()?;
    maps.flush()?;
    timings.flush()?;
    Checkpoint::capture(&trainer, hash, &text).save(&out.join(FINAL_CHECKPOINT))?;
    Ok(TrainSummary {
        out_dir: out.clone(),
        steps: trainer.step,
        final_map,
    })
}

/// Rebuilds the trainer a checkpoint was taken from.
pub fn load_trainer(path: &Path) -> Result<(RunConfig, Trainer)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = RunConfig::parse(&ck.config_text).context("checkpoint config")?;
    ck.ensure_hash(&cfg.hash())?;
    let mut trainer = Trainer::new(cfg.train_config(), cfg.seed)?;
    ck.restore(&mut trainer)?;
    Ok((cfg, trainer))
}

/// Text table and CSV for a set of predictions against ground truth.
pub fn map_report(preds: &[Vec<Detection>], gts: &[Vec<Annotation>]) -> (MapTable, String, String) {
    let table = evaluate_map(preds, gts, CLASS_NAMES.len(), &THRESHOLDS);
    let mut text = format!("{:>6}", "IoU");
    let mut csv = String::from("threshold");
    for name in CLASS_NAMES {
        let _ = write!(text, " {name:>9}");
        let _ = write!(csv, ",{name}");
    }
    text.push_str("       mAP  mAP/mAP50\n");
    csv.push_str(",map,ratio\n");
    for (i, t) in table.thresholds.iter().enumerate() {
        let _ = write!(text, "{t:>6.2}");
        let _ = write!(csv, "{t}");
        for ap in &table.ap[i] {
            match ap {
                Some(v) => {
                    let _ = write!(text, " {v:>9.4}");
                    let _ = write!(csv, ",{v}");
                }
                None => {
                    let _ = write!(text, " {:>9}", "-");
                    csv.push(',');
                }
            }
        }
        let ratio = table.ratio(*t).unwrap_or(0.0);
        let _ = writeln!(text, " {:>9.4} {ratio:>10.4}", table.map[i]);
        let _ = writeln!(csv, ",{},{ratio}", table.map[i]);
    }
    (table, text, csv)
}

fn predict_all(trainer: &Trainer, scenes: &[Scene]) -> Result<Vec<Vec<Detection>>> {
    let mut preds = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(16) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        preds.extend(trainer.detector.predict(&imgs)?);
    }
    Ok(preds)
}

/// Evaluates a checkpoint on the target test split, either regenerated from
/// the checkpoint's config or read from a snapshot directory. Writes
/// `eval.csv` into `out_dir` and returns the text table.
pub fn run_eval(checkpoint: &Path, snapshot: Option<&Path>, out_dir: &Path) -> Result<(MapTable, String)> {
    let (cfg, trainer) = load_trainer(checkpoint)?;
    let scenes = match snapshot {
        Some(dir) => load_snapshot(dir)?.1.target_test,
        None => cfg.scenario().build(cfg.workers)?.target_test,
    };
    if scenes.is_empty() {
        bail!("evaluation set is empty");
    }
    let preds = predict_all(&trainer, &scenes)?;
    let gts: Vec<Vec<Annotation>> = scenes.iter().map(|s| s.annotations.clone()).collect();
    let (table, text, csv) = map_report(&preds, &gts);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("eval.csv"), csv)?;
    Ok((table, text))
}

pub fn run_gen_data(cfg: &RunConfig, dir: &Path) -> Result<Datasets> {
    cfg.validate()?;
    let scenario = cfg.scenario();
    let data = scenario.build(cfg.workers)?;
    save_snapshot(dir, &scenario, &data)?;
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub placement: Placement,
    pub backbone: BackboneMethod,
    pub decoder: DecoderMethod,
}

pub const VARIANTS: [Variant; 6] = [
    Variant {
        name: "source-only",
        placement: Placement::None,
        backbone: BackboneMethod::ObjectAware,
        decoder: DecoderMethod::Transport,
    },
    Variant {
        name: "backbone-oaa",
        placement: Placement::Backbone,
        backbone: BackboneMethod::ObjectAware,
        decoder: DecoderMethod::Transport,
    },
    Variant {
        name: "decoder-ota",
        placement: Placement::Decoder,
        backbone: BackboneMethod::ObjectAware,
        decoder: DecoderMethod::Transport,
    },
    Variant {
        name: "oaa+ota",
        placement: Placement::Both,
        backbone: BackboneMethod::ObjectAware,
        decoder: DecoderMethod::Transport,
    },
    Variant {
        name: "ga+ota",
        placement: Placement::Both,
        backbone: BackboneMethod::Global,
        decoder: DecoderMethod::Transport,
    },
    Variant {
        name: "oaa+ada",
        placement: Placement::Both,
        backbone: BackboneMethod::ObjectAware,
        decoder: DecoderMethod::Adversarial,
    },
];

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: &'static str,
    pub map: Vec<f64>,
    pub ratio80: f64,
    pub ratio90: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

fn stat(xs: &[f64]) -> Stat {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Stat { mean, sd: var.sqrt() }
}

#[derive(Debug, Clone)]
pub struct Ordering {
    pub label: String,
    pub holds: bool,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    pub seconds: f64,
}

impl AblationReport {
    fn column(&self, variant: &str, f: impl Fn(&AblationRow) -> f64) -> Vec<f64> {
        self.rows.iter().filter(|r| r.variant == variant).map(f).collect()
    }

    pub fn map50(&self, variant: &str) -> Stat {
        stat(&self.column(variant, |r| r.map[0]))
    }

    pub fn ratio(&self, variant: &str, t: f64) -> Stat {
        stat(&self.column(variant, |r| if t == 0.8 { r.ratio80 } else { r.ratio90 }))
    }

    /// The comparisons the ablation is meant to exhibit, on mean target mAP@0.5.
    pub fn orderings(&self) -> Vec<Ordering> {
        let m = |v: &str| self.map50(v).mean;
        let mut out = Vec::new();
        let mut push = |label: String, holds: bool| out.push(Ordering { label, holds });
        for (lo, hi) in [
            ("source-only", "backbone-oaa"),
            ("source-only", "decoder-ota"),
            ("backbone-oaa", "oaa+ota"),
            ("decoder-ota", "oaa+ota"),
        ] {
            push(format!("{lo} < {hi}"), m(lo) < m(hi));
        }
        for (hi, lo) in [("oaa+ota", "ga+ota"), ("oaa+ota", "oaa+ada")] {
            push(format!("{hi} >= {lo}"), m(hi) >= m(lo));
        }
        let gain = m("oaa+ota") - m("source-only");
        push(format!("oaa+ota - source-only = {gain:+.4} >= 0.05"), gain >= 0.05);
        out
    }

    pub fn summary(&self) -> String {
        let mut s = format!("seeds {:?}, {:.0} s\n", self.seeds, self.seconds);
        let _ = writeln!(s, "{:<14} {:>17} {:>17} {:>17}", "variant", "mAP50", "mAP80/mAP50", "mAP90/mAP50");
        for v in VARIANTS {
            let (a, b, c) = (self.map50(v.name), self.ratio(v.name, 0.8), self.ratio(v.name, 0.9));
            let _ = writeln!(
                s,
                "{:<14} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
                v.name, a.mean, a.sd, b.mean, b.sd, c.mean, c.sd
            );
        }
        for o in self.orderings() {
            let _ = writeln!(s, "{} {}", if o.holds { "holds " } else { "FAILS " }, o.label);
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("seed,variant");
        for t in THRESHOLDS {
            let _ = write!(s, ",map{}", (t * 100.0).round());
        }
        s.push_str(",ratio80,ratio90\n");
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.seed, r.variant);
            for v in &r.map {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{},{}", r.ratio80, r.ratio90);
        }
        s
    }
}

/// Trains every variant for each seed. A source-only model is trained for
/// `pretrain_steps` once per seed and shared by all variants, which then
/// run to `steps` total, so each variant equals a standalone `train` run
/// with the same settings.
pub fn run_ablation(base: &RunConfig, seeds: &[u64], mut progress: impl FnMut(&str)) -> Result<AblationReport> {
    if seeds.len() < 3 {
        bail!("ablation needs at least 3 seeds, got {}", seeds.len());
    }
    base.validate()?;
    if base.pretrain_steps > base.steps {
        bail!("pretrain_steps exceeds steps");
    }
    let started = Instant::now();
    let mut rows = Vec::new();
    for &seed in seeds {
        let cfg = RunConfig { seed, ..base.clone() };
        let data = cfg.scenario().build(cfg.workers)?;
        let mut pre = Trainer::new(
            detalign::toydet::train::TrainConfig {
                placement: Placement::None,
                ..cfg.train_config()
            },
            seed,
        )?;
        while pre.step < cfg.pretrain_steps {
            pre.step_on(&data)?;
        }
        for v in VARIANTS {
            let mut tr = pre.clone();
            tr.config.placement = v.placement;
            tr.config.backbone_method = v.backbone;
            tr.config.decoder_method = v.decoder;
            while tr.step < cfg.steps {
                tr.step_on(&data).with_context(|| format!("seed {seed} variant {}", v.name))?;
            }
            let m = tr.evaluate(&data.target_test, &THRESHOLDS)?;
            let row = AblationRow {
                seed,
                variant: v.name,
                ratio80: m.ratio(0.8).unwrap_or(0.0),
                ratio90: m.ratio(0.9).unwrap_or(0.0),
                map: m.map.clone(),
            };
            progress(&format!("seed {seed} {:<13} mAP50 {:.4} ratio80 {:.4}", v.name, row.map[0], row.ratio80));
            rows.push(row);
        }
    }
    Ok(AblationReport {
        rows,
        seeds: seeds.to_vec(),
        seconds: started.elapsed().as_secs_f64(),
    })
}
