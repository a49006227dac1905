//! In-memory dataset assembled from a manifest and its tensors.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::manifest::{validate_manifest, DatasetManifest, ImageEntry, ManifestError, ValidationReport};
use crate::model::{ClassId, LabelMap, LabelRole, ProbMap, ResidualPolicy, SuperpixelPartition};
use crate::predictor::{label_tensor, prob_tensor};
use crate::tensor_io::{read_tensor, write_tensor, DenseTensor, TensorData, TensorError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("manifest has {} violation(s); first: {}", .0.violations.len(), .0.violations.first().map(|v| v.message.as_str()).unwrap_or(""))]
    Invalid(ValidationReport),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageData {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// `H x W x 3` bytes.
    pub rgb: Vec<u8>,
    pub gt: Option<LabelMap>,
    pub pseudo: LabelMap,
    /// Superpixel ids as ingested, before residual handling.
    pub raw_superpixels: Vec<u32>,
    pub partition: SuperpixelPartition,
    pub probs: Option<ProbMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub ignore: Option<ClassId>,
    /// Sorted by `image_id`.
    pub images: Vec<ImageData>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageData> {
        self.images
            .binary_search_by(|img| img.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.images[i])
    }

    pub fn image_position(&self, image_id: &str) -> Option<usize> {
        self.images
            .binary_search_by(|img| img.image_id.as_str().cmp(image_id))
            .ok()
    }

    pub fn total_segments(&self) -> usize {
        self.images.iter().map(|i| i.partition.num_segments()).sum()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.images.iter().all(|i| i.gt.is_some())
    }

    /// Loads and validates every tensor the manifest references.
    pub fn load(manifest_path: impl AsRef<Path>, residual: ResidualPolicy) -> Result<Self, DatasetError> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&manifest, base, residual)
    }

    pub fn from_manifest(
        manifest: &DatasetManifest,
        base_dir: &Path,
        residual: ResidualPolicy,
    ) -> Result<Self, DatasetError> {
        let report = validate_manifest(manifest, base_dir);
        if !report.is_clean() {
            return Err(DatasetError::Invalid(report));
        }
        let c = manifest.num_classes();
        let mut images = manifest
            .images
            .iter()
            .map(|e| load_image(e, base_dir, c, residual))
            .collect::<Result<Vec<_>, _>>()?;
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        Ok(Self {
            class_names: manifest.class_names.clone(),
            ignore: manifest.ignore_id,
            images,
        })
    }

    /// Writes a self-contained copy under `dir`. `labels`, when given,
    /// replaces the pseudo labels (used to export corrected datasets).
    pub fn write(&self, dir: &Path, labels: Option<&[LabelMap]>) -> Result<DatasetManifest, DatasetError> {
        let mut entries = Vec::new();
        for (k, img) in self.images.iter().enumerate() {
            let id = &img.image_id;
            let rel = |sub: &str| PathBuf::from(sub).join(format!("{id}.alct"));
            let rgb = DenseTensor::new(vec![img.height, img.width, 3], TensorData::U8(img.rgb.clone()))?;
            write_tensor(dir.join(rel("images")), &rgb)?;
            let pseudo = labels.map_or(&img.pseudo, |l| &l[k]);
            write_tensor(dir.join(rel("labels")), &label_tensor(pseudo))?;
            let sp = DenseTensor::new(
                vec![img.height, img.width],
                TensorData::U32(img.raw_superpixels.clone()),
            )?;
            write_tensor(dir.join(rel("superpixels")), &sp)?;
            if let Some(gt) = &img.gt {
                write_tensor(dir.join(rel("gt")), &label_tensor(gt))?;
            }
            if let Some(p) = &img.probs {
                write_tensor(dir.join(rel("probs")), &prob_tensor(p))?;
            }
            entries.push(ImageEntry {
                image_id: id.clone(),
                image_path: rel("images"),
                gt_label_path: img.gt.as_ref().map(|_| rel("gt")),
                pseudo_label_path: rel("labels"),
                superpixel_path: rel("superpixels"),
                prob_path: img.probs.as_ref().map(|_| rel("probs")),
                width: img.width,
                height: img.height,
            });
        }
        let manifest = DatasetManifest {
            class_names: self.class_names.clone(),
            ignore_id: self.ignore,
            images: entries,
        };
        manifest.save(dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

fn load_image(
    entry: &ImageEntry,
    base: &Path,
    num_classes: usize,
    residual: ResidualPolicy,
) -> Result<ImageData, DatasetError> {
    let (w, h) = (entry.width, entry.height);
    let id = entry.image_id.as_str();
    let rgb = match read_tensor(base.join(&entry.image_path))?.into_data() {
        TensorData::U8(v) => v,
        _ => unreachable!("validated"),
    };
    let load_labels = |path: &Path, role| -> Result<LabelMap, DatasetError> {
        match read_tensor(base.join(path))?.into_data() {
            TensorData::U16(v) => Ok(LabelMap::new(id, role, w, h, v).expect("validated dims")),
            _ => unreachable!("validated"),
        }
    };
    let pseudo = load_labels(&entry.pseudo_label_path, LabelRole::Pseudo)?;
    let gt = entry
        .gt_label_path
        .as_deref()
        .map(|p| load_labels(p, LabelRole::GroundTruth))
        .transpose()?;
    let raw_superpixels = match read_tensor(base.join(&entry.superpixel_path))?.into_data() {
        TensorData::U32(v) => v,
        _ => unreachable!("validated"),
    };
    let partition = SuperpixelPartition::new(id, w, h, raw_superpixels.clone(), residual).expect("validated dims");
    let probs = match &entry.prob_path {
        Some(p) => match read_tensor(base.join(p))?.into_data() {
            TensorData::F32(v) => Some(ProbMap::new(id, w, h, num_classes, v).expect("validated dims")),
            _ => unreachable!("validated"),
        },
        None => None,
    };
    Ok(ImageData {
        image_id: entry.image_id.clone(),
        width: w,
        height: h,
        rgb,
        gt,
        pseudo,
        raw_superpixels,
        partition,
        probs,
    })
}
