//! Per-pixel class probabilities for the loop.
//!
//! The built-in predictor is a Gaussian naive Bayes model over
//! `(r, g, b, x/width, y/height)`. It refits from scratch on the working
//! labels every round. Heavier models plug in through a round directory
//! exchange: the loop writes labels, an external command writes
//! probabilities back.

use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use thiserror::Error;

use crate::manifest::check_prob_rows;
use crate::model::{ClassId, LabelMap, ProbMap};
use crate::tensor_io::{read_tensor, write_tensor, DenseTensor, TensorData, TensorError};

pub const NUM_FEATURES: usize = 5;
pub const VARIANCE_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("no labeled pixels to fit on")]
    NoLabeledPixels,
    #[error("external predictor `{command}` failed: {detail}")]
    CommandFailed { command: String, detail: String },
    #[error("missing probabilities: {0}")]
    MissingProbs(String),
    #[error("external probabilities rejected for {image_id}: {detail}")]
    ValidationFailed { image_id: String, detail: String },
    #[error("waiting for external predictions in {}", .0.display())]
    AwaitingExternal(PathBuf),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelFeature(pub [f64; NUM_FEATURES]);

/// One image's RGB buffer (`H x W x 3`) with its current labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainImage<'a> {
    pub rgb: &'a [u8],
    pub labels: &'a LabelMap,
}

pub fn pixel_feature(rgb: &[u8], width: u32, height: u32, index: usize) -> PixelFeature {
    let (x, y) = (index % width as usize, index / width as usize);
    PixelFeature([
        rgb[3 * index] as f64 / 255.0,
        rgb[3 * index + 1] as f64 / 255.0,
        rgb[3 * index + 2] as f64 / 255.0,
        x as f64 / width as f64,
        y as f64 / height as f64,
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub prior: f64,
    pub mean: [f64; NUM_FEATURES],
    pub variance: [f64; NUM_FEATURES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveBayesModel {
    pub classes: Vec<ClassStats>,
}

#[derive(Clone)]
struct Moments {
    count: Vec<u64>,
    sum: Vec<[f64; NUM_FEATURES]>,
}

impl Moments {
    fn zero(c: usize) -> Self {
        Self {
            count: vec![0; c],
            sum: vec![[0.0; NUM_FEATURES]; c],
        }
    }

    fn merge(&mut self, other: &Self) {
        for c in 0..self.count.len() {
            self.count[c] += other.count[c];
            for f in 0..NUM_FEATURES {
                self.sum[c][f] += other.sum[c][f];
            }
        }
    }
}

fn usable(label: ClassId, num_classes: usize, ignore: Option<ClassId>) -> bool {
    Some(label) != ignore && label.index() < num_classes
}

/// Fits per-class diagonal Gaussians and empirical priors. Per-image partial
/// sums are merged in image order, so the result does not depend on thread
/// scheduling.
pub fn fit(
    images: &[TrainImage<'_>],
    num_classes: usize,
    ignore: Option<ClassId>,
) -> Result<NaiveBayesModel, PredictorError> {
    let partial: Vec<Moments> = images
        .par_iter()
        .map(|img| {
            let l = img.labels;
            let mut m = Moments::zero(num_classes);
            for i in 0..l.len() {
                let label = l.get(i);
                if !usable(label, num_classes, ignore) {
                    continue;
                }
                let feat = pixel_feature(img.rgb, l.width, l.height, i);
                m.count[label.index()] += 1;
                for f in 0..NUM_FEATURES {
                    m.sum[label.index()][f] += feat.0[f];
                }
            }
            m
        })
        .collect();
    let mut totals = Moments::zero(num_classes);
    partial.iter().for_each(|m| totals.merge(m));
    let n: u64 = totals.count.iter().sum();
    if n == 0 {
        return Err(PredictorError::NoLabeledPixels);
    }
    let means: Vec<[f64; NUM_FEATURES]> = (0..num_classes)
        .map(|c| {
            let k = totals.count[c].max(1) as f64;
            totals.sum[c].map(|s| s / k)
        })
        .collect();

    // second pass: squared deviations around the pooled means
    let partial_sq: Vec<Vec<[f64; NUM_FEATURES]>> = images
        .par_iter()
        .map(|img| {
            let l = img.labels;
            let mut sq = vec![[0.0; NUM_FEATURES]; num_classes];
            for i in 0..l.len() {
                let label = l.get(i);
                if !usable(label, num_classes, ignore) {
                    continue;
                }
                let feat = pixel_feature(img.rgb, l.width, l.height, i);
                for f in 0..NUM_FEATURES {
                    let d = feat.0[f] - means[label.index()][f];
                    sq[label.index()][f] += d * d;
                }
            }
            sq
        })
        .collect();
    let mut sq = vec![[0.0; NUM_FEATURES]; num_classes];
    for p in &partial_sq {
        for c in 0..num_classes {
            for f in 0..NUM_FEATURES {
                sq[c][f] += p[c][f];
            }
        }
    }

    let classes = (0..num_classes)
        .map(|c| {
            let k = totals.count[c];
            let variance = if k == 0 {
                [1.0; NUM_FEATURES]
            } else {
                sq[c].map(|s| (s / k as f64).max(VARIANCE_FLOOR))
            };
            ClassStats {
                prior: k as f64 / n as f64,
                mean: means[c],
                variance,
            }
        })
        .collect();
    Ok(NaiveBayesModel { classes })
}

impl NaiveBayesModel {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Normalized posterior for one feature vector, computed in log space.
    pub fn posterior(&self, feat: &PixelFeature) -> Vec<f64> {
        let log_post: Vec<f64> = self
            .classes
            .iter()
            .map(|cls| {
                if cls.prior == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let mut lp = cls.prior.ln();
                for f in 0..NUM_FEATURES {
                    let var = cls.variance[f];
                    let d = feat.0[f] - cls.mean[f];
                    lp -= 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var);
                }
                lp
            })
            .collect();
        let max = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = log_post.iter().map(|&lp| (lp - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / z).collect()
    }

    pub fn predict(&self, image_id: &str, rgb: &[u8], width: u32, height: u32) -> ProbMap {
        let n = width as usize * height as usize;
        let c = self.num_classes();
        let mut data = vec![0.0f32; n * c];
        data.par_chunks_mut(c).enumerate().for_each(|(i, out)| {
            let post = self.posterior(&pixel_feature(rgb, width, height, i));
            for (o, p) in out.iter_mut().zip(post) {
                *o = p as f32;
            }
        });
        ProbMap::new(image_id, width, height, c, data).expect("sized above")
    }
}

/// Expected shape of one image's probability map.
#[derive(Debug, Clone)]
pub struct ProbShape {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
}

pub fn label_path(round_dir: &Path, image_id: &str) -> PathBuf {
    round_dir.join("labels").join(format!("{image_id}.alct"))
}

pub fn prob_path(round_dir: &Path, image_id: &str) -> PathBuf {
    round_dir.join("probs").join(format!("{image_id}.alct"))
}

pub fn label_tensor(labels: &LabelMap) -> DenseTensor {
    DenseTensor::new(vec![labels.height, labels.width], TensorData::U16(labels.data.clone()))
        .expect("label map dims match data")
}

pub fn prob_tensor(probs: &ProbMap) -> DenseTensor {
    DenseTensor::new(
        vec![probs.height, probs.width, probs.num_classes as u32],
        TensorData::F32(probs.data.clone()),
    )
    .expect("prob map dims match data")
}

pub fn write_round_labels(round_dir: &Path, labels: &[LabelMap]) -> Result<(), PredictorError> {
    for l in labels {
        write_tensor(label_path(round_dir, &l.image_id), &label_tensor(l))?;
    }
    Ok(())
}

pub fn write_round_probs(round_dir: &Path, probs: &[ProbMap]) -> Result<(), PredictorError> {
    for p in probs {
        write_tensor(prob_path(round_dir, &p.image_id), &prob_tensor(p))?;
    }
    Ok(())
}

/// Reads `round_dir/probs/<image_id>.alct` for every expected image and
/// checks shape and normalization.
pub fn ingest_round_probs(
    round_dir: &Path,
    shapes: &[ProbShape],
    num_classes: usize,
) -> Result<Vec<ProbMap>, PredictorError> {
    let dir = round_dir.join("probs");
    if !dir.is_dir() {
        return Err(PredictorError::MissingProbs(format!(
            "{} does not exist",
            dir.display()
        )));
    }
    shapes
        .iter()
        .map(|shape| {
            let path = prob_path(round_dir, &shape.image_id);
            if !path.exists() {
                return Err(PredictorError::MissingProbs(path.display().to_string()));
            }
            load_prob_map(&path, shape, num_classes)
        })
        .collect()
}

pub fn load_prob_map(path: &Path, shape: &ProbShape, num_classes: usize) -> Result<ProbMap, PredictorError> {
    let fail = |detail: String| PredictorError::ValidationFailed {
        image_id: shape.image_id.clone(),
        detail,
    };
    let tensor = read_tensor(path)?;
    let expected = [shape.height, shape.width, num_classes as u32];
    if tensor.dims() != expected {
        return Err(fail(format!("dims {:?}, expected {expected:?}", tensor.dims())));
    }
    let TensorData::F32(data) = tensor.into_data() else {
        return Err(fail("expected an f32 tensor".into()));
    };
    if let Some(v) = check_prob_rows(&data, num_classes).into_iter().next() {
        return Err(fail(v.message));
    }
    Ok(ProbMap::new(&shape.image_id, shape.width, shape.height, num_classes, data).expect("dims checked"))
}

/// Runs the external predictor on `round_dir` and ingests its output. With
/// no command, returns [`PredictorError::AwaitingExternal`] so the caller can
/// pause until the probabilities appear.
pub fn external_round_exchange(
    round_dir: &Path,
    command: Option<&str>,
    shapes: &[ProbShape],
    num_classes: usize,
) -> Result<Vec<ProbMap>, PredictorError> {
    let Some(command) = command else {
        return Err(PredictorError::AwaitingExternal(round_dir.to_path_buf()));
    };
    let status = Command::new("sh")
        .arg("-c")
        .arg(format!("{command} \"$1\""))
        .arg("sh")
        .arg(round_dir)
        .status()
        .map_err(|e| PredictorError::CommandFailed {
            command: command.to_string(),
            detail: e.to_string(),
        })?;
    if !status.success() {
        return Err(PredictorError::CommandFailed {
            command: command.to_string(),
            detail: status.to_string(),
        });
    }
    ingest_round_probs(round_dir, shapes, num_classes)
}
