//! Feature files, pair manifests and the synthetic class dataset.
//!
//! A feature file is little-endian: the magic `H2AR`, then `u32` version,
//! rows and cols, then `rows * cols` `f32` values row-major.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::losses::BatchPairing;

pub const FEATURE_MAGIC: &[u8; 4] = b"H2AR";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * seq.data().len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(seq.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.cols() as u32).to_le_bytes());
    for &x in seq.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8], modality: Modality) -> Result<FeatureSequence> {
    let format = |offset: usize, detail: String| Error::Format {
        offset: offset as u64,
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(format(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(format(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(format(4, format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if rows == 0 {
        return Err(format(8, "zero rows".into()));
    }
    if cols == 0 {
        return Err(format(12, "zero cols".into()));
    }
    let expected = HEADER_LEN + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(format(
            bytes.len().min(expected),
            format!("{rows}x{cols} matrix needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (i, ch) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(ch.try_into().unwrap());
        if !x.is_finite() {
            return Err(format(HEADER_LEN + 4 * i, format!("non-finite value {x}")));
        }
        data.push(x as f64);
    }
    FeatureSequence::new(rows, cols, data, modality)
}

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    fs::write(path, encode_features(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path, modality: Modality) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, modality)
}

/// One `(text, point cloud)` pair; records sharing `group` are mutual
/// positives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub text: PathBuf,
    pub pc: PathBuf,
    pub group: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairManifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl PairManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A training pair as indices into [`Dataset::texts`] and [`Dataset::pcs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Record {
    pub text: usize,
    pub pc: usize,
    pub group: u64,
}

/// Unique text and point-cloud instances plus the pairs that link them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub texts: Vec<FeatureSequence>,
    pub pcs: Vec<FeatureSequence>,
    pub records: Vec<Record>,
    text_groups: Vec<u64>,
    pc_groups: Vec<u64>,
}

impl Dataset {
    pub fn new(texts: Vec<FeatureSequence>, pcs: Vec<FeatureSequence>, records: Vec<Record>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::usage("dataset has no records"));
        }
        let mut text_groups = vec![None; texts.len()];
        let mut pc_groups = vec![None; pcs.len()];
        for (n, r) in records.iter().enumerate() {
            for (slot, idx, what) in [(&mut text_groups, r.text, "text"), (&mut pc_groups, r.pc, "pc")] {
                let g = slot
                    .get_mut(idx)
                    .ok_or_else(|| Error::usage(format!("record {n}: {what} index {idx} out of range")))?;
                match *g {
                    Some(old) if old != r.group => {
                        return Err(Error::usage(format!(
                            "record {n}: {what} {idx} is in groups {old} and {}",
                            r.group
                        )))
                    }
                    _ => *g = Some(r.group),
                }
            }
        }
        let collect = |gs: Vec<Option<u64>>, what: &str| -> Result<Vec<u64>> {
            gs.into_iter()
                .enumerate()
                .map(|(i, g)| g.ok_or_else(|| Error::usage(format!("{what} {i} is not used by any record"))))
                .collect()
        };
        let text_groups = collect(text_groups, "text")?;
        let pc_groups = collect(pc_groups, "pc")?;
        let check_width = |seqs: &[FeatureSequence], what: &str| -> Result<()> {
            if seqs.windows(2).any(|w| w[0].cols() != w[1].cols()) {
                return Err(Error::usage(format!("{what} features have mixed widths")));
            }
            Ok(())
        };
        check_width(&texts, "text")?;
        check_width(&pcs, "pc")?;
        Ok(Self {
            texts,
            pcs,
            records,
            text_groups,
            pc_groups,
        })
    }

    /// Reads a manifest and every feature file it names. Paths are relative
    /// to the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = PairManifest::read(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut text_paths: Vec<PathBuf> = Vec::new();
        let mut pc_paths: Vec<PathBuf> = Vec::new();
        let mut records = Vec::with_capacity(manifest.records.len());
        let index_of = |paths: &mut Vec<PathBuf>, p: &Path| match paths.iter().position(|q| q == p) {
            Some(i) => i,
            None => {
                paths.push(p.to_path_buf());
                paths.len() - 1
            }
        };
        for r in &manifest.records {
            records.push(Record {
                text: index_of(&mut text_paths, &r.text),
                pc: index_of(&mut pc_paths, &r.pc),
                group: r.group,
            });
        }
        let read_all = |paths: &[PathBuf], m: Modality| -> Result<Vec<FeatureSequence>> {
            paths.iter().map(|p| read_features(&root.join(p), m)).collect()
        };
        let texts = read_all(&text_paths, Modality::Text)?;
        let pcs = read_all(&pc_paths, Modality::PointCloud)?;
        Self::new(texts, pcs, records)
    }

    /// Loads `dir/manifest.json`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Self::load(&dir.join(MANIFEST_FILE))
    }

    pub fn text_groups(&self) -> &[u64] {
        &self.text_groups
    }

    pub fn pc_groups(&self) -> &[u64] {
        &self.pc_groups
    }

    pub fn text_width(&self) -> usize {
        self.texts[0].cols()
    }

    pub fn pc_width(&self) -> usize {
        self.pcs[0].cols()
    }

    /// Positives between every unique text and every unique point cloud.
    pub fn eval_pairing(&self) -> Result<BatchPairing> {
        BatchPairing::from_groups(&self.text_groups, &self.pc_groups)
    }
}

/// Parameters of the synthetic dataset: one Gaussian prototype per class,
/// shared by both modalities; every token is the prototype plus noise of
/// standard deviation `1/snr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub captions_per_class: usize,
    pub l_text: usize,
    pub l_pc: usize,
    pub width: usize,
    pub snr: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 16,
            captions_per_class: 4,
            l_text: 8,
            l_pc: 16,
            width: 32,
            snr: 4.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("synth.n_classes", self.n_classes),
            ("synth.captions_per_class", self.captions_per_class),
            ("synth.l_text", self.l_text),
            ("synth.l_pc", self.l_pc),
            ("synth.width", self.width),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.snr.is_nan() || self.snr <= 0.0 {
            return Err(Error::config("synth.snr", "must be > 0"));
        }
        Ok(())
    }

    /// Builds the dataset in memory.
    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = 1.0 / self.snr;
        let draw = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        let (mut texts, mut pcs, mut records) = (Vec::new(), Vec::new(), Vec::new());
        for class in 0..self.n_classes {
            let proto: Vec<f64> = (0..self.width).map(|_| draw(&mut rng)).collect();
            let tokens = |rng: &mut ChaCha8Rng, rows: usize, m: Modality| {
                let data = (0..rows * self.width)
                    .map(|i| proto[i % self.width] + noise * draw(rng))
                    .collect();
                FeatureSequence::new(rows, self.width, data, m)
            };
            pcs.push(tokens(&mut rng, self.l_pc, Modality::PointCloud)?);
            for _ in 0..self.captions_per_class {
                texts.push(tokens(&mut rng, self.l_text, Modality::Text)?);
                records.push(Record {
                    text: texts.len() - 1,
                    pc: class,
                    group: class as u64,
                });
            }
        }
        Dataset::new(texts, pcs, records)
    }

    /// Writes `out/manifest.json`, `out/text/*.h2ar` and `out/pc/*.h2ar`.
    pub fn write(&self, out: &Path) -> Result<Dataset> {
        let ds = self.generate()?;
        for sub in ["text", "pc"] {
            fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
        }
        let text_path = |i: usize| PathBuf::from(format!("text/{i:05}.h2ar"));
        let pc_path = |i: usize| PathBuf::from(format!("pc/{i:05}.h2ar"));
        for (i, s) in ds.texts.iter().enumerate() {
            write_features(&out.join(text_path(i)), s)?;
        }
        for (i, s) in ds.pcs.iter().enumerate() {
            write_features(&out.join(pc_path(i)), s)?;
        }
        let manifest = PairManifest {
            records: ds
                .records
                .iter()
                .map(|r| ManifestRecord {
                    text: text_path(r.text),
                    pc: pc_path(r.pc),
                    group: r.group,
                })
                .collect(),
        };
        manifest.write(&out.join(MANIFEST_FILE))?;
        // what a reader sees after the f32 round trip
        Dataset::load_dir(out)
    }
}
