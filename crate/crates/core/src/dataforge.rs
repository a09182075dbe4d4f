//! Synthetic clinical/biomarker datasets, manifest I/O, eye-level splits and
//! balanced per-biomarker test sets.
//!
//! The generator gives every eye a latent severity trajectory. Severity drives
//! three things at once: the clinical values (BCVA falls and CST rises with
//! severity, scaled by the separation dial), the biomarker probabilities, and
//! a class-specific structure in feature space. Clinical values are therefore
//! a noisy surrogate for the biomarkers, and how noisy is set by one number.
//!
//! # Manifest format
//!
//! ```text
//! surrocon-manifest v1 input_dim=<d>
//! sample_id,eye_id,bcva,cst,b0,...,b15,offset
//! 0,0,71,352,1,0,-1,...,0
//! ```
//!
//! Biomarker cells are `1` (present), `0` (absent) or `-1` (unknown). Features
//! live in a sidecar file next to the manifest with extension `.f64`: raw
//! little-endian `f64`, `d` values per sample, starting at byte `offset`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

pub const NUM_BIOMARKERS: usize = 16;

/// Slot names. The first five are the balanced detection targets.
pub const BIOMARKER_NAMES: [&str; NUM_BIOMARKERS] = [
    "IRF", "DRT/ME", "IRHRF", "FAVF", "PAVF", "VD", "PRT", "EZD", "IRH", "SRF", "VMT", "ATR",
    "SHRM", "RPED", "PED", "DRIL",
];

pub const TARGET_SLOTS: [usize; 5] = [0, 1, 2, 3, 4];

pub const MANIFEST_MAGIC: &str = "surrocon-manifest v1";

pub const BCVA_RANGE: (i64, i64) = (0, 100);
pub const CST_RANGE: (i64, i64) = (150, 600);

/// One scan: clinical labels, 16 biomarker slots (`None` = unknown) and features.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: u64,
    pub eye_id: u32,
    pub bcva: i64,
    pub cst: i64,
    pub biomarkers: [Option<bool>; NUM_BIOMARKERS],
    pub features: Vec<f64>,
}

impl Sample {
    pub fn has_biomarker_labels(&self) -> bool {
        self.biomarkers.iter().any(Option::is_some)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Pretrain,
    ProbeTrain,
    Test,
}

/// Which train-side samples feed contrastive pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainPool {
    /// Every train-side sample, biomarker-labelled or not.
    #[default]
    AllTrain,
    /// Only train-side samples without biomarker labels.
    UnlabeledOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub samples: Vec<Sample>,
    pub splits: Option<Vec<Split>>,
    /// Generator config hash or manifest path.
    pub provenance: String,
    /// Hidden severity class per sample, when known (generated data only).
    pub latent: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn eyes(&self) -> BTreeSet<u32> {
        self.samples.iter().map(|s| s.eye_id).collect()
    }

    fn splits(&self) -> Result<&[Split]> {
        self.splits
            .as_deref()
            .ok_or_else(|| Error::Contract("dataset has not been split by eye".into()))
    }

    pub fn indices_in(&self, split: Split) -> Result<Vec<usize>> {
        Ok(self
            .splits()?
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect())
    }

    pub fn pretrain_indices(&self, pool: PretrainPool) -> Result<Vec<usize>> {
        let splits = self.splits()?;
        Ok((0..self.len())
            .filter(|&i| match pool {
                PretrainPool::AllTrain => splits[i] != Split::Test,
                PretrainPool::UnlabeledOnly => splits[i] == Split::Pretrain,
            })
            .collect())
    }

    pub fn train_eyes(&self) -> Result<BTreeSet<u32>> {
        let splits = self.splits()?;
        Ok(self
            .samples
            .iter()
            .zip(splits)
            .filter(|(_, s)| **s != Split::Test)
            .map(|(x, _)| x.eye_id)
            .collect())
    }

    pub fn test_eyes(&self) -> Result<BTreeSet<u32>> {
        let splits = self.splits()?;
        Ok(self
            .samples
            .iter()
            .zip(splits)
            .filter(|(_, s)| **s == Split::Test)
            .map(|(x, _)| x.eye_id)
            .collect())
    }

    /// Row-major features of the selected samples.
    pub fn feature_matrix(&self, indices: &[usize]) -> Result<crate::numcore::Tensor> {
        let rows: Vec<&[f64]> = indices
            .iter()
            .map(|&i| self.samples[i].features.as_slice())
            .collect();
        crate::numcore::Tensor::from_rows(&rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    pub class_prior: Vec<f64>,
    pub input_dim: usize,
    pub n_eyes: usize,
    pub visits_per_eye: usize,
    /// Per-visit probability that severity moves one class up or down.
    pub class_drift: f64,
    /// Gap between adjacent class means of BCVA and CST, in units of their sigma.
    pub separation: f64,
    pub bcva_mean: f64,
    pub bcva_sigma: f64,
    pub cst_mean: f64,
    pub cst_sigma: f64,
    /// Dimension of the subspace carrying class structure.
    pub signal_dims: usize,
    /// Spacing of class means along one signal direction.
    pub class_shift: f64,
    /// Spacing of class-specific radii in the signal subspace.
    pub class_radius: f64,
    pub feature_sigma: f64,
    /// Scale of a per-eye offset shared by all visits of that eye.
    pub eye_nuisance: f64,
    /// `biomarker_prob[j][c]`: probability slot `j` is present in class `c`.
    pub biomarker_prob: Vec<Vec<f64>>,
    /// Fraction of samples that carry biomarker labels.
    pub labeled_fraction: f64,
}

/// `(absent-class end, most-severe-class end)` presence probabilities.
const DEFAULT_BIOMARKER_RANGES: [(f64, f64); NUM_BIOMARKERS] = [
    (0.10, 0.90),
    (0.05, 0.85),
    (0.25, 0.75),
    (0.80, 0.20),
    (0.30, 0.70),
    (0.05, 0.10),
    (0.02, 0.08),
    (0.05, 0.30),
    (0.02, 0.15),
    (0.02, 0.20),
    (0.05, 0.05),
    (0.02, 0.12),
    (0.01, 0.10),
    (0.03, 0.15),
    (0.02, 0.06),
    (0.05, 0.35),
];

pub fn interpolated_biomarker_prob(n_classes: usize) -> Vec<Vec<f64>> {
    DEFAULT_BIOMARKER_RANGES
        .iter()
        .map(|&(lo, hi)| {
            (0..n_classes)
                .map(|c| {
                    if n_classes == 1 {
                        (lo + hi) / 2.0
                    } else {
                        lo + (hi - lo) * c as f64 / (n_classes - 1) as f64
                    }
                })
                .collect()
        })
        .collect()
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let k = 4;
        Self {
            n_classes: k,
            class_prior: vec![1.0 / k as f64; k],
            input_dim: 32,
            n_eyes: 96,
            visits_per_eye: 40,
            class_drift: 0.05,
            separation: 3.0,
            bcva_mean: 70.0,
            bcva_sigma: 6.0,
            cst_mean: 350.0,
            cst_sigma: 15.0,
            signal_dims: 3,
            class_shift: 0.0,
            class_radius: 1.0,
            feature_sigma: 0.3,
            eye_nuisance: 1.0,
            biomarker_prob: interpolated_biomarker_prob(k),
            labeled_fraction: 0.5,
        }
    }
}

fn bad(key: &str, detail: impl Into<String>) -> Error {
    Error::BadValue {
        key: format!("generator.{key}"),
        detail: detail.into(),
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.n_classes;
        if k == 0 {
            return Err(bad("n_classes", "must be >= 1"));
        }
        if self.class_prior.len() != k {
            return Err(bad(
                "class_prior",
                format!("needs {k} entries, got {}", self.class_prior.len()),
            ));
        }
        if self.class_prior.iter().any(|p| !(0.0..=1.0).contains(p))
            || (self.class_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(bad("class_prior", "must be probabilities summing to 1"));
        }
        for (name, v) in [
            ("class_drift", self.class_drift),
            ("labeled_fraction", self.labeled_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(bad(name, format!("must be a probability, got {v}")));
            }
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(bad(
                "separation",
                format!("must be >= 0, got {}", self.separation),
            ));
        }
        for (name, v) in [
            ("bcva_sigma", self.bcva_sigma),
            ("cst_sigma", self.cst_sigma),
            ("feature_sigma", self.feature_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(name, format!("must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("eye_nuisance", self.eye_nuisance),
            ("class_shift", self.class_shift),
            ("class_radius", self.class_radius),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(name, format!("must be >= 0, got {v}")));
            }
        }
        if self.input_dim == 0 || self.signal_dims == 0 || self.signal_dims > self.input_dim {
            return Err(bad("signal_dims", "need 1 <= signal_dims <= input_dim"));
        }
        if self.n_eyes == 0 || self.visits_per_eye == 0 {
            return Err(bad("n_eyes", "need at least one eye and one visit"));
        }
        if self.biomarker_prob.len() != NUM_BIOMARKERS {
            return Err(bad(
                "biomarker_prob",
                format!("needs {NUM_BIOMARKERS} slots"),
            ));
        }
        for (j, row) in self.biomarker_prob.iter().enumerate() {
            if row.len() != k || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(bad(
                    &format!("biomarker_prob.{j}"),
                    format!("needs {k} probabilities in [0, 1]"),
                ));
            }
        }
        Ok(())
    }

    /// Canonical JSON, used for hashing.
    pub fn hash(&self) -> String {
        seed::short_hash(&serde_json::to_vec(self).expect("config serialises"))
    }
}

/// Hidden geometry shared by all samples of one generated dataset.
struct FeatureLayout {
    /// Orthonormal basis of the signal subspace, `signal_dims` rows of length `input_dim`.
    basis: Vec<Vec<f64>>,
}

impl FeatureLayout {
    fn new(input_dim: usize, signal_dims: usize, rng: &mut impl Rng) -> Self {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(signal_dims);
        while basis.len() < signal_dims {
            let mut v: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        Self { basis }
    }

    /// Removes the signal-subspace component, so eye offsets never blur class structure.
    fn project_out(&self, v: &mut [f64]) {
        for b in &self.basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
    }
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws a dataset. Same config and seed give an identical dataset.
pub fn generate(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let k = cfg.n_classes;
    let d = cfg.input_dim;
    let mid = (k as f64 - 1.0) / 2.0;
    let mut layout_rng = seed::rng_for(seed, Stream::Generator, 0);
    let layout = FeatureLayout::new(d, cfg.signal_dims, &mut layout_rng);

    let bcva_noise = Normal::new(0.0, cfg.bcva_sigma).expect("validated");
    let cst_noise = Normal::new(0.0, cfg.cst_sigma).expect("validated");

    let mut samples = Vec::with_capacity(cfg.n_eyes * cfg.visits_per_eye);
    let mut latent = Vec::with_capacity(samples.capacity());
    for eye in 0..cfg.n_eyes {
        let mut rng = seed::rng_for(seed, Stream::Generator, 1 + eye as u64);
        let mut eye_offset: Vec<f64> = (0..d)
            .map(|_| cfg.eye_nuisance * rng.sample::<f64, _>(StandardNormal))
            .collect();
        layout.project_out(&mut eye_offset);
        let mut class = sample_categorical(&cfg.class_prior, &mut rng);
        for visit in 0..cfg.visits_per_eye {
            if visit > 0 && k > 1 && rng.random_bool(cfg.class_drift) {
                class = if class == 0 {
                    1
                } else if class == k - 1 || rng.random_bool(0.5) {
                    class - 1
                } else {
                    class + 1
                };
            }
            let centred = class as f64 - mid;
            let bcva = (cfg.bcva_mean - cfg.separation * cfg.bcva_sigma * centred
                + bcva_noise.sample(&mut rng))
            .round() as i64;
            let cst = (cfg.cst_mean
                + cfg.separation * cfg.cst_sigma * centred
                + cst_noise.sample(&mut rng))
            .round() as i64;

            let mut features = eye_offset.clone();
            let mut direction: Vec<f64> = (0..cfg.signal_dims)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let norm = direction
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            direction.iter_mut().for_each(|x| *x /= norm);
            let radius = cfg.class_radius * (class as f64 + 1.0);
            for (coef, basis) in direction.iter().zip(&layout.basis) {
                for (f, b) in features.iter_mut().zip(basis) {
                    *f += radius * coef * b;
                }
            }
            for (f, b) in features.iter_mut().zip(&layout.basis[0]) {
                *f += cfg.class_shift * centred * b;
            }
            for f in &mut features {
                *f += cfg.feature_sigma * rng.sample::<f64, _>(StandardNormal);
            }

            let labelled = rng.random_bool(cfg.labeled_fraction);
            let mut biomarkers = [None; NUM_BIOMARKERS];
            for (slot, probs) in biomarkers.iter_mut().zip(&cfg.biomarker_prob) {
                let present = rng.random_bool(probs[class]);
                if labelled {
                    *slot = Some(present);
                }
            }
            samples.push(Sample {
                sample_id: samples.len() as u64,
                eye_id: eye as u32,
                bcva: bcva.clamp(BCVA_RANGE.0, BCVA_RANGE.1),
                cst: cst.clamp(CST_RANGE.0, CST_RANGE.1),
                biomarkers,
                features,
            });
            latent.push(class);
        }
    }
    Ok(Dataset {
        input_dim: d,
        samples,
        splits: None,
        provenance: cfg.hash(),
        latent: Some(latent),
    })
}

/// Sidecar path for a manifest: same stem, extension `.f64`.
pub fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("f64")
}

fn manifest_columns() -> String {
    let mut s = String::from("sample_id,eye_id,bcva,cst");
    for j in 0..NUM_BIOMARKERS {
        write!(s, ",b{j}").unwrap();
    }
    s.push_str(",offset");
    s
}

/// Manifest text and sidecar bytes for a dataset.
pub fn encode_manifest(ds: &Dataset) -> (String, Vec<u8>) {
    let mut text = format!(
        "{MANIFEST_MAGIC} input_dim={}\n{}\n",
        ds.input_dim,
        manifest_columns()
    );
    let mut blob = Vec::with_capacity(ds.len() * ds.input_dim * 8);
    for s in &ds.samples {
        write!(text, "{},{},{},{}", s.sample_id, s.eye_id, s.bcva, s.cst).unwrap();
        for b in &s.biomarkers {
            text.push_str(match b {
                Some(true) => ",1",
                Some(false) => ",0",
                None => ",-1",
            });
        }
        writeln!(text, ",{}", blob.len()).unwrap();
        for v in &s.features {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (text, blob)
}

/// Writes the manifest and its sidecar; returns the dataset hash.
pub fn save_manifest(ds: &Dataset, path: &Path) -> Result<String> {
    let (text, blob) = encode_manifest(ds);
    std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, &blob).map_err(|e| Error::io(&side, e))?;
    Ok(dataset_hash(text.as_bytes(), &blob))
}

pub fn dataset_hash(manifest: &[u8], sidecar: &[u8]) -> String {
    let mut bytes = manifest.to_vec();
    bytes.extend_from_slice(sidecar);
    seed::short_hash(&bytes)
}

/// Hash of the files on disk, as [`save_manifest`] reports it.
pub fn hash_files(path: &Path) -> Result<String> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let blob = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    Ok(dataset_hash(&text, &blob))
}

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let blob = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let mut ds = decode_manifest(&text, &blob)?;
    ds.provenance = path.display().to_string();
    Ok(ds)
}

pub fn decode_manifest(text: &str, blob: &[u8]) -> Result<Dataset> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        detail: "empty manifest".into(),
    })?;
    let input_dim = header
        .strip_prefix(MANIFEST_MAGIC)
        .and_then(|rest| rest.strip_prefix(" input_dim="))
        .and_then(|d| d.parse::<usize>().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Parse {
            line: 1,
            detail: format!("expected `{MANIFEST_MAGIC} input_dim=<d>`, got `{header}`"),
        })?;
    let columns = lines.next().unwrap_or_default();
    if columns != manifest_columns() {
        return Err(Error::Parse {
            line: 2,
            detail: "unexpected column header".into(),
        });
    }

    let row_bytes = input_dim * 8;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 3;
        if line.is_empty() {
            continue;
        }
        let perr = |detail: String| Error::Parse {
            line: lineno,
            detail,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 + NUM_BIOMARKERS {
            return Err(perr(format!(
                "expected {} fields, got {}",
                5 + NUM_BIOMARKERS,
                fields.len()
            )));
        }
        let int = |idx: usize| -> Result<i64> {
            fields[idx].trim().parse::<i64>().map_err(|_| {
                perr(format!(
                    "field {} (`{}`) is not an integer",
                    idx + 1,
                    fields[idx]
                ))
            })
        };
        let sample_id = u64::try_from(int(0)?).map_err(|_| perr("negative sample_id".into()))?;
        let eye_id = u32::try_from(int(1)?).map_err(|_| perr("eye_id out of range".into()))?;
        let bcva = int(2)?;
        let cst = int(3)?;
        let mut biomarkers = [None; NUM_BIOMARKERS];
        for (j, slot) in biomarkers.iter_mut().enumerate() {
            *slot = match int(4 + j)? {
                1 => Some(true),
                0 => Some(false),
                -1 => None,
                v => return Err(perr(format!("biomarker b{j} must be 1, 0 or -1, got {v}"))),
            };
        }
        let offset = usize::try_from(int(4 + NUM_BIOMARKERS)?)
            .map_err(|_| perr("negative offset".into()))?;
        let end = offset
            .checked_add(row_bytes)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| Error::Integrity {
                sample_id,
                detail: format!(
                    "feature bytes {offset}..{} exceed sidecar length {}",
                    offset + row_bytes,
                    blob.len()
                ),
            })?;
        let features = blob[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        samples.push(Sample {
            sample_id,
            eye_id,
            bcva,
            cst,
            biomarkers,
            features,
        });
    }
    Ok(Dataset {
        input_dim,
        samples,
        splits: None,
        provenance: String::new(),
        latent: None,
    })
}

/// Eye-level train/test partition. Train-side samples with biomarker labels
/// become [`Split::ProbeTrain`], the rest [`Split::Pretrain`].
pub fn split_by_eye(mut ds: Dataset, test_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
        return Err(Error::Parameter {
            name: "test_fraction",
            detail: format!("must lie in (0, 1), got {test_fraction}"),
        });
    }
    let eyes: Vec<u32> = ds.eyes().into_iter().collect();
    if eyes.len() < 2 {
        return Err(Error::Contract(format!(
            "eye-level split needs at least 2 eyes, got {}",
            eyes.len()
        )));
    }
    let n_test = ((test_fraction * eyes.len() as f64).round() as usize).clamp(1, eyes.len() - 1);
    let mut shuffled = eyes;
    shuffled.shuffle(&mut seed::rng_for(seed, Stream::Split, 0));
    let test: BTreeSet<u32> = shuffled[..n_test].iter().copied().collect();
    ds.splits = Some(
        ds.samples
            .iter()
            .map(|s| {
                if test.contains(&s.eye_id) {
                    Split::Test
                } else if s.has_biomarker_labels() {
                    Split::ProbeTrain
                } else {
                    Split::Pretrain
                }
            })
            .collect(),
    );
    Ok(ds)
}

/// `n_per_class` present and `n_per_class` absent test-side samples for one
/// slot, drawn without replacement. Returned indices are ascending.
pub fn balanced_test_set(
    ds: &Dataset,
    slot: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if slot >= NUM_BIOMARKERS {
        return Err(Error::Parameter {
            name: "slot",
            detail: format!("{slot} >= {NUM_BIOMARKERS}"),
        });
    }
    let test = ds.indices_in(Split::Test)?;
    let (mut present, mut absent): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
    for i in test {
        match ds.samples[i].biomarkers[slot] {
            Some(true) => present.push(i),
            Some(false) => absent.push(i),
            None => {}
        }
    }
    if present.len() < n_per_class || absent.len() < n_per_class {
        return Err(Error::Shortage {
            slot,
            needed: n_per_class,
            present: present.len(),
            absent: absent.len(),
        });
    }
    let mut rng = seed::rng_for(seed, Stream::TestSet, slot as u64);
    present.shuffle(&mut rng);
    absent.shuffle(&mut rng);
    let mut out: Vec<usize> = present[..n_per_class]
        .iter()
        .chain(&absent[..n_per_class])
        .copied()
        .collect();
    out.sort_unstable();
    Ok(out)
}
