//! Dataset manifest (JSON) and its consistency report.
//!
//! Paths inside a manifest are relative to the manifest's own directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::ClassId;
use crate::tensor_io::{read_tensor, DenseTensor, TensorData};

pub const PROB_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse manifest {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    #[serde(serialize_with = "ser_ignore", deserialize_with = "de_ignore", default)]
    pub ignore_id: Option<ClassId>,
    pub images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_label_path: Option<PathBuf>,
    pub pseudo_label_path: PathBuf,
    pub superpixel_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob_path: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
}

fn ser_ignore<S: Serializer>(v: &Option<ClassId>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(c) => s.serialize_u16(c.0),
        None => s.serialize_str("none"),
    }
}

fn de_ignore<'de, D: Deserializer<'de>>(d: D) -> Result<Option<ClassId>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Id(u16),
        Word(String),
    }
    match Raw::deserialize(d)? {
        Raw::Id(v) => Ok(Some(ClassId(v))),
        Raw::Word(w) if w == "none" => Ok(None),
        Raw::Word(w) => Err(serde::de::Error::custom(format!(
            "ignore_id must be a class id or \"none\", got \"{w}\""
        ))),
    }
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ManifestError::Parse {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Whether `value` is a usable label under this manifest.
    pub fn label_in_range(&self, value: u16) -> bool {
        (value as usize) < self.class_names.len() || Some(ClassId(value)) == self.ignore_id
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    TooFewClasses,
    DuplicateImageId,
    MissingFile,
    UnreadableTensor,
    WrongDtype,
    DimMismatch,
    LabelOutOfRange,
    ProbRowSum,
    NegativeProbability,
    NonFiniteProbability,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// Empty for manifest-level problems.
    pub image_id: String,
    pub kind: ViolationKind,
    pub message: String,
    /// Number of offending pixels or rows where that applies.
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, image_id: &str, kind: ViolationKind, message: String, count: usize) {
        self.violations.push(Violation {
            image_id: image_id.to_string(),
            kind,
            message,
            count,
        });
    }
}

/// Checks every image of the manifest against its files. `base_dir` is the
/// directory relative paths resolve against.
pub fn validate_manifest(manifest: &DatasetManifest, base_dir: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    if manifest.class_names.len() < 2 {
        report.push(
            "",
            ViolationKind::TooFewClasses,
            format!("need at least 2 classes, found {}", manifest.class_names.len()),
            1,
        );
    }
    let mut seen = HashSet::new();
    for entry in &manifest.images {
        if !seen.insert(entry.image_id.as_str()) {
            report.push(
                &entry.image_id,
                ViolationKind::DuplicateImageId,
                format!("image id \"{}\" appears more than once", entry.image_id),
                1,
            );
        }
        validate_image(manifest, entry, base_dir, &mut report);
    }
    report
}

fn validate_image(manifest: &DatasetManifest, entry: &ImageEntry, base_dir: &Path, report: &mut ValidationReport) {
    let id = entry.image_id.as_str();
    let (w, h) = (entry.width, entry.height);

    if let Some(t) = load_checked(report, id, base_dir, &entry.image_path, "image") {
        match t.data() {
            TensorData::U8(_) => {
                check_dims(report, id, "image", t.dims(), &[h, w, 3]);
            }
            _ => wrong_dtype(report, id, "image", "u8"),
        }
    }

    let mut labels = vec![("pseudo label", Some(&entry.pseudo_label_path))];
    labels.push(("ground-truth label", entry.gt_label_path.as_ref()));
    for (what, path) in labels {
        let Some(path) = path else { continue };
        let Some(t) = load_checked(report, id, base_dir, path, what) else {
            continue;
        };
        match t.data() {
            TensorData::U16(values) => {
                if check_dims(report, id, what, t.dims(), &[h, w]) {
                    let bad: Vec<u16> = values
                        .iter()
                        .copied()
                        .filter(|&v| !manifest.label_in_range(v))
                        .collect();
                    if let Some(first) = bad.first() {
                        report.push(
                            id,
                            ViolationKind::LabelOutOfRange,
                            format!(
                                "{what}: label id out of range (e.g. {first} with {} classes)",
                                manifest.num_classes()
                            ),
                            bad.len(),
                        );
                    }
                }
            }
            _ => wrong_dtype(report, id, what, "u16"),
        }
    }

    if let Some(t) = load_checked(report, id, base_dir, &entry.superpixel_path, "superpixels") {
        match t.data() {
            TensorData::U32(_) => {
                check_dims(report, id, "superpixels", t.dims(), &[h, w]);
            }
            _ => wrong_dtype(report, id, "superpixels", "u32"),
        }
    }

    if let Some(path) = &entry.prob_path {
        if let Some(t) = load_checked(report, id, base_dir, path, "probabilities") {
            match t.data() {
                TensorData::F32(values) => {
                    let c = manifest.num_classes() as u32;
                    if check_dims(report, id, "probabilities", t.dims(), &[h, w, c]) {
                        for v in check_prob_rows(values, c as usize) {
                            report.violations.push(Violation {
                                image_id: id.to_string(),
                                ..v
                            });
                        }
                    }
                }
                _ => wrong_dtype(report, id, "probabilities", "f32"),
            }
        }
    }
}

fn load_checked(
    report: &mut ValidationReport,
    id: &str,
    base_dir: &Path,
    rel: &Path,
    what: &str,
) -> Option<DenseTensor> {
    let path = base_dir.join(rel);
    if !path.exists() {
        report.push(
            id,
            ViolationKind::MissingFile,
            format!("{what}: missing file {}", path.display()),
            1,
        );
        return None;
    }
    match read_tensor(&path) {
        Ok(t) => Some(t),
        Err(e) => {
            report.push(id, ViolationKind::UnreadableTensor, format!("{what}: {e}"), 1);
            None
        }
    }
}

fn check_dims(report: &mut ValidationReport, id: &str, what: &str, found: &[u32], expected: &[u32]) -> bool {
    if found == expected {
        return true;
    }
    report.push(
        id,
        ViolationKind::DimMismatch,
        format!("{what}: dims {found:?}, expected {expected:?}"),
        1,
    );
    false
}

fn wrong_dtype(report: &mut ValidationReport, id: &str, what: &str, expected: &str) {
    report.push(
        id,
        ViolationKind::WrongDtype,
        format!("{what}: expected {expected} tensor"),
        1,
    );
}

/// Row-sum, sign and finiteness checks over an `N x C` probability buffer.
/// Returned violations carry an empty `image_id`.
pub fn check_prob_rows(values: &[f32], num_classes: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut sum_bad = 0usize;
    let mut worst: Option<f64> = None;
    let mut negative = 0usize;
    let mut non_finite = 0usize;
    for row in values.chunks_exact(num_classes.max(1)) {
        if row.iter().any(|p| !p.is_finite()) {
            non_finite += 1;
            continue;
        }
        if row.iter().any(|&p| p < 0.0) {
            negative += 1;
        }
        let sum: f64 = row.iter().map(|&p| p as f64).sum();
        if (sum - 1.0).abs() > PROB_TOLERANCE {
            sum_bad += 1;
            if worst.is_none_or(|w| (sum - 1.0).abs() > (w - 1.0).abs()) {
                worst = Some(sum);
            }
        }
    }
    let mut push = |kind, message: String, count| {
        out.push(Violation {
            image_id: String::new(),
            kind,
            message,
            count,
        })
    };
    if non_finite > 0 {
        push(
            ViolationKind::NonFiniteProbability,
            "probability row contains NaN or infinity".to_string(),
            non_finite,
        );
    }
    if negative > 0 {
        push(
            ViolationKind::NegativeProbability,
            "negative probability".to_string(),
            negative,
        );
    }
    if let Some(w) = worst {
        let verb = if w > 1.0 { "exceeds" } else { "falls short of" };
        push(
            ViolationKind::ProbRowSum,
            format!("row sum {} {verb} tolerance", trim_float(w)),
            sum_bad,
        );
    }
    out
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}
