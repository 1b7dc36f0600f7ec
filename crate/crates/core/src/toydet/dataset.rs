//! Benchmark construction and on-disk snapshots.
//!
//! A snapshot directory holds `manifest.txt` (the scenario as `key=value`
//! lines) and one `NNNNNN.scene` file per scene:
//!
//! ```text
//! "SCN1" | split u8 | domain u8 | seed u64 | width u32 | height u32
//!        | objects u32 | objects × (x_min y_min x_max y_max f64, class u32)
//!        | width·height·3 bytes
//! ```
//!
//! All integers and floats are little-endian. Split codes: 0 source-train,
//! 1 target-train, 2 target-test.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::toydet::scene::{generate_dataset, Annotation, DomainShiftConfig, Image, Scene, SceneConfig, SceneDomain, NUM_CLASSES};
use crate::toydet::train::Datasets;

const MAGIC: &[u8; 4] = b"SCN1";
const SPLITS: [&str; 3] = ["source-train", "target-train", "target-test"];

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub scene: SceneConfig,
    pub shift: DomainShiftConfig,
    pub data_seed: u64,
    pub source_train: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            shift: DomainShiftConfig::default(),
            data_seed: 0,
            source_train: 256,
            target_train: 256,
            target_test: 128,
        }
    }
}

impl Scenario {
    pub fn build(&self, workers: usize) -> Result<Datasets> {
        let s = &self.scene;
        Ok(Datasets {
            source_train: generate_dataset(s, None, self.data_seed, SPLITS[0], self.source_train, workers)?,
            target_train: generate_dataset(s, Some(&self.shift), self.data_seed, SPLITS[1], self.target_train, workers)?,
            target_test: generate_dataset(s, Some(&self.shift), self.data_seed, SPLITS[2], self.target_test, workers)?,
        })
    }

    pub fn manifest(&self) -> String {
        let s = &self.scene;
        let h = &self.shift;
        let probs: Vec<String> = s.class_probs.iter().map(|p| format!("{p:?}")).collect();
        format!(
            "data_seed={}\nsource_train={}\ntarget_train={}\ntarget_test={}\nsize={}\nmax_objects={}\nmin_extent={}\nmax_extent={}\nclass_probs={}\nhaze={:?}\nbrightness={:?}\ntexture_frequency={:?}\ntexture_amplitude={:?}\nnoise_sigma={:?}\nshift_seed={}\n",
            self.data_seed,
            self.source_train,
            self.target_train,
            self.target_test,
            s.size,
            s.max_objects,
            s.min_extent,
            s.max_extent,
            probs.join(","),
            h.haze,
            h.brightness,
            h.texture_frequency,
            h.texture_amplitude,
            h.noise_sigma,
            h.seed,
        )
    }

    pub fn parse_manifest(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: String| Error::Format {
                path: format!("manifest line {}", ln + 1),
                reason: why,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value".into()))?;
            let f = || v.parse::<f64>().map_err(|e| bad(format!("{k}: {e}")));
            let u = || v.parse::<u64>().map_err(|e| bad(format!("{k}: {e}")));
            match k {
                "data_seed" => out.data_seed = u()?,
                "source_train" => out.source_train = u()? as usize,
                "target_train" => out.target_train = u()? as usize,
                "target_test" => out.target_test = u()? as usize,
                "size" => out.scene.size = u()? as usize,
                "max_objects" => out.scene.max_objects = u()? as usize,
                "min_extent" => out.scene.min_extent = u()? as usize,
                "max_extent" => out.scene.max_extent = u()? as usize,
                "class_probs" => {
                    let p: Vec<f64> = v
                        .split(',')
                        .map(|x| x.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(format!("{k}: {e}")))?;
                    out.scene.class_probs = p.try_into().map_err(|_| bad(format!("{k}: expected {NUM_CLASSES} values")))?;
                }
                "haze" => out.shift.haze = f()?,
                "brightness" => out.shift.brightness = f()?,
                "texture_frequency" => out.shift.texture_frequency = f()?,
                "texture_amplitude" => out.shift.texture_amplitude = f()?,
                "noise_sigma" => out.shift.noise_sigma = f()?,
                "shift_seed" => out.shift.seed = u()?,
                _ => return Err(bad(format!("unknown key {k}"))),
            }
        }
        Ok(out)
    }
}

pub fn encode_scene(scene: &Scene, split: u8) -> Vec<u8> {
    let mut b = Vec::with_capacity(40 + scene.annotations.len() * 36 + scene.image.data.len());
    b.extend_from_slice(MAGIC);
    b.push(split);
    b.push(match scene.domain {
        SceneDomain::Source => 0,
        SceneDomain::Target => 1,
    });
    b.extend_from_slice(&scene.seed.to_le_bytes());
    b.extend_from_slice(&(scene.image.width as u32).to_le_bytes());
    b.extend_from_slice(&(scene.image.height as u32).to_le_bytes());
    b.extend_from_slice(&(scene.annotations.len() as u32).to_le_bytes());
    for a in &scene.annotations {
        for v in [a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(a.class as u32).to_le_bytes());
    }
    b.extend_from_slice(&scene.image.data);
    b
}

pub fn decode_scene(buf: &[u8], path: &str) -> Result<(u8, Scene)> {
    let mut at = 0usize;
    let bad = |at: usize, why: &str| Error::Format {
        path: path.to_owned(),
        reason: format!("{why} at byte {at}"),
    };
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = buf.get(at..at + n).ok_or_else(|| bad(at, "truncated record"))?;
        at += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad(0, "bad magic"));
    }
    let split = take(1)?[0];
    let domain = match take(1)?[0] {
        0 => SceneDomain::Source,
        1 => SceneDomain::Target,
        _ => return Err(bad(5, "bad domain code")),
    };
    let u32le = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let width = u32le(take(4)?);
    let height = u32le(take(4)?);
    let n = u32le(take(4)?);
    let mut annotations = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let mut v = [0.0; 4];
        for x in &mut v {
            *x = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        }
        let class = u32le(take(4)?);
        annotations.push(Annotation {
            bbox: BBox::new(v[0], v[1], v[2], v[3]),
            class,
        });
    }
    let data = take(width * height * 3)?.to_vec();
    if at != buf.len() {
        return Err(bad(at, "trailing bytes"));
    }
    Ok((
        split,
        Scene {
            image: Image { width, height, data },
            annotations,
            domain,
            seed,
        },
    ))
}

/// Writes the manifest and every scene; the directory is created if needed.
pub fn save_snapshot(dir: &Path, scenario: &Scenario, data: &Datasets) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("manifest.txt"), scenario.manifest())?;
    let mut k = 0usize;
    for (split, scenes) in [&data.source_train, &data.target_train, &data.target_test].into_iter().enumerate() {
        for scene in scenes {
            fs::write(dir.join(format!("{k:06}.scene")), encode_scene(scene, split as u8))?;
            k += 1;
        }
    }
    Ok(())
}

pub fn load_snapshot(dir: &Path) -> Result<(Scenario, Datasets)> {
    let scenario = Scenario::parse_manifest(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    let total = scenario.source_train + scenario.target_train + scenario.target_test;
    let mut data = Datasets {
        source_train: Vec::new(),
        target_train: Vec::new(),
        target_test: Vec::new(),
    };
    for k in 0..total {
        let path = dir.join(format!("{k:06}.scene"));
        let (split, scene) = decode_scene(&fs::read(&path)?, &path.display().to_string())?;
        match split {
            0 => data.source_train.push(scene),
            1 => data.target_train.push(scene),
            2 => data.target_test.push(scene),
            _ => {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("unknown split code {split}"),
                })
            }
        }
    }
    if (data.source_train.len(), data.target_train.len(), data.target_test.len())
        != (scenario.source_train, scenario.target_train, scenario.target_test)
    {
        return Err(Error::Format {
            path: dir.display().to_string(),
            reason: "split sizes disagree with manifest".into(),
        });
    }
    Ok((scenario, data))
}
