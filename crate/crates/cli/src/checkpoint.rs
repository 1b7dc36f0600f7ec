//! Training checkpoints.
//!
//! ```text
//! "DAAL" | version u32 | config hash [u8; 32] | step u64
//!        | config text length u64 | config text (UTF-8)
//!        | fragment count u64 | fragments
//! ```
//!
//! Integers are little-endian. Fragments use the `ndnum` named-tensor layout
//! and hold every parameter tensor, each optimizer's moments and step count,
//! and the current target pseudo boxes (`pseudo.counts` per image plus a
//! `pseudo.boxes` matrix of `x_min y_min x_max y_max score` rows).

use std::fs;
use std::path::Path;

use detalign::geometry::BBox;
use detalign::params::{Adam, ParamSet};
use detalign::pseudo::{BoxOrigin, PseudoBoxSet};
use detalign::toydet::train::Trainer;
use ndnum::fragment::{read_fragment, write_fragment};
use ndnum::Tensor;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"DAAL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("unsupported checkpoint version {found} at byte {offset} (expected {VERSION})")]
    Version { found: u32, offset: usize },
    #[error("truncated checkpoint at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint config text is not UTF-8 at byte {offset}")]
    Text { offset: usize },
    #[error("checkpoint was written for config {found}, current config is {expected}; refusing to resume")]
    HashMismatch { expected: String, found: String },
    #[error("checkpoint is missing `{0}`")]
    Missing(String),
    #[error("pseudo-box counts disagree with the stored box rows")]
    PseudoLayout,
    #[error("{0} trailing bytes after the last fragment")]
    Trailing(usize),
    #[error(transparent)]
    Fragment(#[from] ndnum::Error),
    #[error(transparent)]
    Model(#[from] detalign::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub hash: [u8; 32],
    pub step: u64,
    pub config_text: String,
    pub fragments: Vec<(String, Tensor)>,
}

fn hex(h: &[u8; 32]) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_params(out: &mut Vec<(String, Tensor)>, p: &ParamSet) {
    out.extend(p.iter().map(|(n, t)| (n.to_owned(), t.clone())));
}

fn push_adam(out: &mut Vec<(String, Tensor)>, group: &str, opt: &Adam) {
    let (step, m, v) = opt.state();
    out.push((format!("adam.{group}.step"), Tensor::scalar(step as f64)));
    for (i, t) in m.iter().enumerate() {
        out.push((format!("adam.{group}.m.{i}"), t.clone()));
    }
    for (i, t) in v.iter().enumerate() {
        out.push((format!("adam.{group}.v.{i}"), t.clone()));
    }
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer, hash: [u8; 32], config_text: &str) -> Self {
        let mut f = Vec::new();
        push_params(&mut f, &trainer.detector.params);
        push_params(&mut f, &trainer.backbone_disc.params);
        push_params(&mut f, &trainer.decoder_disc.params);
        push_adam(&mut f, "detector", &trainer.opt_detector);
        push_adam(&mut f, "backbone_disc", &trainer.opt_backbone_disc);
        push_adam(&mut f, "decoder_disc", &trainer.opt_decoder_disc);
        let counts: Vec<f64> = trainer.pseudo.iter().map(|s| s.len() as f64).collect();
        let rows: Vec<f64> = trainer
            .pseudo
            .iter()
            .flat_map(|s| s.boxes.iter().zip(&s.scores).flat_map(|(b, &sc)| [b.x_min, b.y_min, b.x_max, b.y_max, sc]))
            .collect();
        f.push(("pseudo.counts".into(), Tensor::vector(counts)));
        let n = rows.len() / 5;
        f.push(("pseudo.boxes".into(), Tensor::new(vec![n, 5], rows).expect("five columns")));
        Self {
            hash,
            step: trainer.step,
            config_text: config_text.to_owned(),
            fragments: f,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.hash);
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        b.extend_from_slice(self.config_text.as_bytes());
        b.extend_from_slice(&(self.fragments.len() as u64).to_le_bytes());
        for (name, t) in &self.fragments {
            write_fragment(&mut b, name, t);
        }
        b
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut at = 0usize;
        let take = |n: usize, at: &mut usize| -> Result<&[u8], CheckpointError> {
            let s = buf.get(*at..*at + n).ok_or(CheckpointError::Truncated { offset: *at })?;
            *at += n;
            Ok(s)
        };
        if take(4, &mut at).map_err(|_| CheckpointError::BadMagic { offset: 0 })? != MAGIC {
            return Err(CheckpointError::BadMagic { offset: 0 });
        }
        let version = u32::from_le_bytes(take(4, &mut at)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, offset: 4 });
        }
        let hash: [u8; 32] = take(32, &mut at)?.try_into().expect("32 bytes");
        let u64le = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
        let step = u64le(take(8, &mut at)?);
        let len = u64le(take(8, &mut at)?) as usize;
        let text_at = at;
        let config_text = std::str::from_utf8(take(len, &mut at)?)
            .map_err(|_| CheckpointError::Text { offset: text_at })?
            .to_owned();
        let count = u64le(take(8, &mut at)?) as usize;
        let mut fragments = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            fragments.push(read_fragment(buf, &mut at)?);
        }
        if at != buf.len() {
            return Err(CheckpointError::Trailing(buf.len() - at));
        }
        Ok(Self {
            hash,
            step,
            config_text,
            fragments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&fs::read(path)?)
    }

    pub fn ensure_hash(&self, expected: &[u8; 32]) -> Result<(), CheckpointError> {
        if &self.hash != expected {
            return Err(CheckpointError::HashMismatch {
                expected: hex(expected),
                found: hex(&self.hash),
            });
        }
        Ok(())
    }

    fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.fragments
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_owned()))
    }

    fn load_params(&self, p: &mut ParamSet) -> Result<(), CheckpointError> {
        let entries: Vec<(String, Tensor)> = (0..p.len())
            .map(|i| Ok((p.name(i).to_owned(), self.get(p.name(i))?.clone())))
            .collect::<Result<_, CheckpointError>>()?;
        p.load(&entries)?;
        Ok(())
    }

    fn load_adam(&self, group: &str, opt: &mut Adam, slots: usize) -> Result<(), CheckpointError> {
        let step = self.get(&format!("adam.{group}.step"))?.item() as u64;
        let m = (0..slots).map(|i| self.get(&format!("adam.{group}.m.{i}")).cloned()).collect::<Result<_, _>>()?;
        let v = (0..slots).map(|i| self.get(&format!("adam.{group}.v.{i}")).cloned()).collect::<Result<_, _>>()?;
        opt.restore(step, m, v)?;
        Ok(())
    }

    /// Overwrites the trainer's state with the checkpoint's.
    pub fn restore(&self, trainer: &mut Trainer) -> Result<(), CheckpointError> {
        self.load_params(&mut trainer.detector.params)?;
        self.load_params(&mut trainer.backbone_disc.params)?;
        self.load_params(&mut trainer.decoder_disc.params)?;
        let n = (trainer.detector.params.len(), trainer.backbone_disc.params.len(), trainer.decoder_disc.params.len());
        self.load_adam("detector", &mut trainer.opt_detector, n.0)?;
        self.load_adam("backbone_disc", &mut trainer.opt_backbone_disc, n.1)?;
        self.load_adam("decoder_disc", &mut trainer.opt_decoder_disc, n.2)?;
        let counts = self.get("pseudo.counts")?;
        let rows = self.get("pseudo.boxes")?.data();
        let total: f64 = counts.data().iter().sum();
        if counts.data().iter().any(|c| c.fract() != 0.0 || *c < 0.0) || total as usize * 5 != rows.len() {
            return Err(CheckpointError::PseudoLayout);
        }
        let mut at = 0;
        trainer.pseudo = counts
            .data()
            .iter()
            .map(|&c| {
                let mut set = PseudoBoxSet::empty(BoxOrigin::Pseudo);
                for r in rows[at * 5..(at + c as usize) * 5].chunks(5) {
                    set.boxes.push(BBox::new(r[0], r[1], r[2], r[3]));
                    set.scores.push(r[4]);
                }
                at += c as usize;
                set
            })
            .collect();
        trainer.step = self.step;
        Ok(())
    }
}
