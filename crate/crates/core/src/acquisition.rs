//! Acquisition scores over the diversified pool and top-B batch selection.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::{ClassId, LabelMap, ProbMap, SegmentKey, Superpixel};
use crate::pool::{cosine, row_f64, PoolEntry};

#[derive(Debug, Error, PartialEq)]
pub enum AcquisitionError {
    #[error("label {0} is the ignore label or outside the probability row")]
    IgnoreLabel(ClassId),
    #[error("segment {0} has no pixels")]
    EmptySegment(u32),
    #[error("pool is empty")]
    EmptyPool,
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("representative pixel {pixel} is not in segment {segment}")]
    PixelOutsideSegment { pixel: u32, segment: u32 },
    #[error("zero-norm probability row at pixel index {0}")]
    DegenerateVector(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AcquisitionKind {
    Cil,
    Lcil,
    #[default]
    Sim,
    Entropy,
    Bvsb,
    Random {
        seed: u64,
    },
}

impl fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Cil => f.write_str("cil"),
            Self::Lcil => f.write_str("lcil"),
            Self::Sim => f.write_str("sim"),
            Self::Entropy => f.write_str("entropy"),
            Self::Bvsb => f.write_str("bvsb"),
            Self::Random { seed } => write!(f, "random:{seed}"),
        }
    }
}

impl FromStr for AcquisitionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "cil" => Ok(Self::Cil),
            "lcil" => Ok(Self::Lcil),
            "sim" => Ok(Self::Sim),
            "entropy" => Ok(Self::Entropy),
            "bvsb" => Ok(Self::Bvsb),
            other => match other.strip_prefix("random:") {
                Some(seed) => seed
                    .parse()
                    .map(|seed| Self::Random { seed })
                    .map_err(|_| format!("bad random seed `{seed}`")),
                None if other == "random" => Err("random acquisition needs a seed: `random:<seed>`".into()),
                None => Err(format!("unknown acquisition `{s}`")),
            },
        }
    }
}

impl Serialize for AcquisitionKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for AcquisitionKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Confidence in label: `1 - f(y; x)` for the pixel's working label `y`.
pub fn cil(row: &[f32], label: ClassId, ignore: Option<ClassId>) -> Result<f64, AcquisitionError> {
    if Some(label) == ignore || label.index() >= row.len() {
        return Err(AcquisitionError::IgnoreLabel(label));
    }
    Ok((1.0 - row[label.index()] as f64).clamp(0.0, 1.0))
}

/// Mean CIL over the segment.
pub fn lcil(
    segment: &Superpixel,
    probs: &ProbMap,
    labels: &LabelMap,
    ignore: Option<ClassId>,
) -> Result<f64, AcquisitionError> {
    if segment.is_empty() {
        return Err(AcquisitionError::EmptySegment(segment.segment_id));
    }
    let mut sum = 0.0;
    for &i in &segment.pixels {
        sum += cil(probs.row(i as usize), labels.get(i as usize), ignore)?;
    }
    Ok(sum / segment.len() as f64)
}

/// Sum over the segment of `cos(f(x_r), f(x)) * CIL(x)`.
pub fn sim(
    representative: u32,
    segment: &Superpixel,
    probs: &ProbMap,
    labels: &LabelMap,
    ignore: Option<ClassId>,
) -> Result<f64, AcquisitionError> {
    if segment.is_empty() {
        return Err(AcquisitionError::EmptySegment(segment.segment_id));
    }
    if segment.pixels.binary_search(&representative).is_err() {
        return Err(AcquisitionError::PixelOutsideSegment {
            pixel: representative,
            segment: segment.segment_id,
        });
    }
    let rep = row_f64(probs.row(representative as usize));
    let mut sum = 0.0;
    for &i in &segment.pixels {
        let row = probs.row(i as usize);
        let cos = cosine(row, &rep).ok_or(AcquisitionError::DegenerateVector(i))?;
        sum += cos * cil(row, labels.get(i as usize), ignore)?;
    }
    Ok(sum)
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy_score(row: &[f32]) -> f64 {
    row.iter()
        .map(|&p| p as f64)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.log2())
        .sum()
}

/// `1 - (p_top1 - p_top2)`.
pub fn bvsb_score(row: &[f32]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in row {
        let p = p as f64;
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    if second == f64::NEG_INFINITY {
        second = 0.0;
    }
    1.0 - (first - second)
}

fn segment_mean(segment: &Superpixel, probs: &ProbMap, f: impl Fn(&[f32]) -> f64) -> Result<f64, AcquisitionError> {
    if segment.is_empty() {
        return Err(AcquisitionError::EmptySegment(segment.segment_id));
    }
    let sum: f64 = segment.pixels.iter().map(|&i| f(probs.row(i as usize))).sum();
    Ok(sum / segment.len() as f64)
}

/// One pool entry together with what its score depends on.
#[derive(Debug, Clone, Copy)]
pub struct ScoringInput<'a> {
    pub entry: &'a PoolEntry,
    /// The entry's segment restricted to non-ignore pixels.
    pub segment: &'a Superpixel,
    pub probs: &'a ProbMap,
    pub labels: &'a LabelMap,
}

/// Scores every entry once. `round` decorrelates the random baseline
/// between rounds.
pub fn score_pool(
    kind: AcquisitionKind,
    round: u32,
    inputs: &[ScoringInput<'_>],
    ignore: Option<ClassId>,
) -> Result<Vec<f64>, AcquisitionError> {
    if let AcquisitionKind::Random { seed } = kind {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(round as u64);
        return Ok(inputs.iter().map(|_| rng.gen::<f64>()).collect());
    }
    inputs
        .par_iter()
        .map(|inp| {
            let rep = inp.entry.pixel_index;
            match kind {
                AcquisitionKind::Cil => cil(inp.probs.row(rep as usize), inp.labels.get(rep as usize), ignore),
                AcquisitionKind::Lcil => lcil(inp.segment, inp.probs, inp.labels, ignore),
                AcquisitionKind::Sim => sim(rep, inp.segment, inp.probs, inp.labels, ignore),
                AcquisitionKind::Entropy => segment_mean(inp.segment, inp.probs, entropy_score),
                AcquisitionKind::Bvsb => segment_mean(inp.segment, inp.probs, bvsb_score),
                AcquisitionKind::Random { .. } => unreachable!(),
            }
        })
        .collect()
}

/// Descending score, then ascending `(image_id, segment_id)`.
pub fn rank_order(a: (&SegmentKey, f64), b: (&SegmentKey, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Indices of the top `min(batch_size, |pool|)` entries in selection order.
pub fn select_batch(keys: &[SegmentKey], scores: &[f64], batch_size: usize) -> Result<Vec<usize>, AcquisitionError> {
    if batch_size == 0 {
        return Err(AcquisitionError::InvalidBatchSize);
    }
    if keys.is_empty() {
        return Err(AcquisitionError::EmptyPool);
    }
    assert_eq!(keys.len(), scores.len(), "one score per pool entry");
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| rank_order((&keys[a], scores[a]), (&keys[b], scores[b])));
    order.truncate(batch_size);
    Ok(order)
}

/// CSV dump of one round's scores: `image_id,segment_id,kind,score,rank`
/// with rank 1 for the first pick, in pool order.
pub fn score_csv(kind: AcquisitionKind, keys: &[SegmentKey], scores: &[f64]) -> String {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| rank_order((&keys[a], scores[a]), (&keys[b], scores[b])));
    let mut rank = vec![0usize; keys.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r + 1;
    }
    let mut out = String::from("image_id,segment_id,kind,score,rank\n");
    for (i, (img, seg)) in keys.iter().enumerate() {
        out.push_str(&format!("{img},{seg},{kind},{},{}\n", scores[i] as f32, rank[i]));
    }
    out
}
