//! Synthetic dataset generation and the JSON-lines manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    decode_ppm, degrade, encode_ppm, load_ppm, ncc_filter, synth, BlurKernel, DegradeSpec,
    ImagePair, NCC_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::seed;

/// Validation share of the reference protocol (600 of 19,000 pairs).
pub const DEFAULT_VAL_FRACTION: f64 = 600.0 / 19000.0;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const AUDIT_FILE: &str = "rejected.jsonl";

fn default_threshold() -> f64 {
    NCC_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Number of pairs that pass the NCC gate.
    pub count: usize,
    pub hr_size: usize,
    pub scale: usize,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Validation pairs; defaults to `round(count * DEFAULT_VAL_FRACTION)`.
    #[serde(default)]
    pub val_count: Option<usize>,
    #[serde(default = "default_threshold")]
    pub ncc_threshold: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn val_count(&self) -> usize {
        self.val_count
            .unwrap_or_else(|| (self.count as f64 * DEFAULT_VAL_FRACTION).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.scale) {
            return Err(Error::invalid(format!(
                "scale {} not in {{2, 3, 4}}",
                self.scale
            )));
        }
        if self.count == 0 {
            return Err(Error::invalid("dataset count must be positive"));
        }
        if self.hr_size == 0 || !self.hr_size.is_multiple_of(self.scale) {
            return Err(Error::invalid(format!(
                "HR size {} must be a positive multiple of scale {}",
                self.hr_size, self.scale
            )));
        }
        if self.val_count() > self.count {
            return Err(Error::invalid(format!(
                "val count {} exceeds count {}",
                self.val_count(),
                self.count
            )));
        }
        BlurKernel::gaussian(self.blur_sigma)?;
        if !(0.0..=1.0).contains(&self.noise_sigma) {
            return Err(Error::invalid(format!(
                "noise sigma {} outside [0, 1]",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub lr_path: String,
    pub hr_path: String,
    pub scale: usize,
    pub split: Split,
    pub ncc: f64,
}

/// Manifest records plus the directory relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

/// One rejected candidate in the NCC audit file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterAudit {
    pub id: String,
    pub ncc: Option<f64>,
    pub reason: String,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("{} line {}: {e}", path.display(), i + 1)))?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = DatasetManifest { root, records };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::invalid(format!("manifest lists id {} twice", r.id)));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.split(Split::Train).len(), self.split(Split::Val).len())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_pair(&self, rec: &ManifestRecord) -> Result<ImagePair> {
        let lr = load_ppm(self.resolve(&rec.lr_path))?;
        let hr = load_ppm(self.resolve(&rec.hr_path))?;
        let mut pair = ImagePair::new(rec.id.clone(), lr, hr)?;
        if pair.scale() != rec.scale {
            return Err(Error::invalid(format!(
                "pair {}: files are x{}, manifest says x{}",
                rec.id,
                pair.scale(),
                rec.scale
            )));
        }
        pair.ncc = rec.ncc;
        Ok(pair)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<ImagePair>> {
        self.split(split)
            .into_par_iter()
            .map(|r| self.load_pair(r))
            .collect()
    }
}

/// Holdout: the `k` ids with the smallest hash form the validation split.
fn assign_splits(ids: &[String], k: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (seed::mix64(seed::fnv1a(ids[i].as_bytes())), i));
    let mut splits = vec![Split::Train; ids.len()];
    for &i in order.iter().take(k) {
        splits[i] = Split::Val;
    }
    splits
}

fn candidate(spec: &DatasetSpec, index: usize) -> Result<ImagePair> {
    let id = format!("pair-{index:05}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &format!("{id}/image")));
    let raw = synth::synthetic_image(spec.hr_size, spec.hr_size, &mut rng);
    // quantize first so the stored HR is exactly what the LR was made from
    let hr = decode_ppm(&encode_ppm(&raw)?)?;
    let degrade_spec = DegradeSpec {
        kernel: BlurKernel::gaussian(spec.blur_sigma)?,
        scale: spec.scale,
        noise_sigma: spec.noise_sigma,
        seed: seed::derive(spec.seed, &format!("{id}/noise")),
    };
    let lr = decode_ppm(&encode_ppm(&degrade(&hr, &degrade_spec)?)?)?;
    ImagePair::new(id, lr, hr)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generate candidates in index order until `count` pass the NCC gate, write
/// `hr/`, `lr/`, the manifest and the rejection audit under `out_dir`.
pub fn make_synthetic_dataset(
    out_dir: impl AsRef<Path>,
    spec: &DatasetSpec,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let out = out_dir.as_ref();
    for sub in ["hr", "lr"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let max_candidates = 4 * spec.count + 16;
    let mut kept: Vec<ImagePair> = Vec::new();
    let mut audit: Vec<FilterAudit> = Vec::new();
    let mut next = 0;
    while kept.len() < spec.count {
        if next >= max_candidates {
            return Err(Error::Degenerate(format!(
                "only {} of {} candidates passed the NCC gate at {}",
                kept.len(),
                next,
                spec.ncc_threshold
            )));
        }
        let wave: Vec<usize> = (next..next + (spec.count - kept.len())).collect();
        next += wave.len();
        let pairs: Vec<ImagePair> = wave
            .into_par_iter()
            .map(|i| candidate(spec, i))
            .collect::<Result<_>>()?;
        let (ok, rejected) = ncc_filter(pairs, spec.ncc_threshold);
        kept.extend(ok);
        audit.extend(rejected.into_iter().map(|r| FilterAudit {
            id: r.pair.id,
            ncc: r.pair.ncc.is_finite().then_some(r.pair.ncc),
            reason: r.reason,
        }));
    }
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    audit.sort_by(|a, b| a.id.cmp(&b.id));
    let ids: Vec<String> = kept.iter().map(|p| p.id.clone()).collect();
    let splits = assign_splits(&ids, spec.val_count());
    let records: Vec<ManifestRecord> = kept
        .par_iter()
        .zip(splits)
        .map(|(p, split)| {
            let rec = ManifestRecord {
                id: p.id.clone(),
                lr_path: format!("lr/{}.ppm", p.id),
                hr_path: format!("hr/{}.ppm", p.id),
                scale: spec.scale,
                split,
                ncc: p.ncc,
            };
            write_file(&out.join(&rec.lr_path), &encode_ppm(&p.lr)?)?;
            write_file(&out.join(&rec.hr_path), &encode_ppm(&p.hr)?)?;
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        records,
    };
    manifest.save(out.join(MANIFEST_FILE))?;
    let audit_path = out.join(AUDIT_FILE);
    let mut f = fs::File::create(&audit_path).map_err(|e| Error::io(&audit_path, e))?;
    for a in &audit {
        writeln!(f, "{}", serde_json::to_string(a)?).map_err(|e| Error::io(&audit_path, e))?;
    }
    Ok(manifest)
}
