//! Shared domain types: labels, probability maps, superpixel partitions and
//! the per-round bookkeeping that gets checkpointed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("pixel ({x}, {y}) outside {width}x{height} image")]
    OutOfBounds { x: u32, y: u32, width: u32, height: u32 },
    #[error("data length {found} does not match {expected}")]
    LengthMismatch { expected: usize, found: usize },
}

/// Index into the dataset's ordered class names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u16);

impl ClassId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PixelRef {
    pub image_id: String,
    pub x: u32,
    pub y: u32,
}

/// `(image_id, segment_id)`; orders pools and breaks score ties.
pub type SegmentKey = (String, u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRole {
    GroundTruth,
    Pseudo,
    Corrected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub image_id: String,
    pub role: LabelRole,
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl LabelMap {
    pub fn new(
        image_id: impl Into<String>,
        role: LabelRole,
        width: u32,
        height: u32,
        data: Vec<u16>,
    ) -> Result<Self, ModelError> {
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(ModelError::LengthMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            image_id: image_id.into(),
            role,
            width,
            height,
            data,
        })
    }

    pub fn get(&self, index: usize) -> ClassId {
        ClassId(self.data[index])
    }

    pub fn with_role(&self, role: LabelRole) -> Self {
        Self { role, ..self.clone() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Per-pixel class probabilities, stored `H x W x C` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub num_classes: usize,
    pub data: Vec<f32>,
}

impl ProbMap {
    pub fn new(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        num_classes: usize,
        data: Vec<f32>,
    ) -> Result<Self, ModelError> {
        let expected = width as usize * height as usize * num_classes;
        if data.len() != expected {
            return Err(ModelError::LengthMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            image_id: image_id.into(),
            width,
            height,
            num_classes,
            data,
        })
    }

    pub fn row(&self, index: usize) -> &[f32] {
        let c = self.num_classes;
        &self.data[index * c..(index + 1) * c]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn index_of(&self, pixel: &PixelRef) -> Result<usize, ModelError> {
        pixel_index(pixel.x, pixel.y, self.width, self.height)
    }
}

pub fn pixel_index(x: u32, y: u32, width: u32, height: u32) -> Result<usize, ModelError> {
    if x >= width || y >= height {
        return Err(ModelError::OutOfBounds { x, y, width, height });
    }
    Ok(y as usize * width as usize + x as usize)
}

/// Argmax over a probability row; the lowest class id wins ties.
pub fn argmax_row(row: &[f32]) -> ClassId {
    let mut best = 0usize;
    for (c, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = c;
        }
    }
    ClassId(best as u16)
}

/// Estimated label `argmax_c f(c; x)` for one pixel.
pub fn estimated_label(probs: &ProbMap, pixel: &PixelRef) -> Result<ClassId, ModelError> {
    let idx = probs.index_of(pixel)?;
    Ok(argmax_row(probs.row(idx)))
}

/// Marks a pixel that no ingested superpixel covers.
pub const UNASSIGNED_SEGMENT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualPolicy {
    /// One residual segment per 4-connected component of uncovered pixels.
    #[default]
    Components,
    /// All uncovered pixels of an image form one residual segment.
    Single,
    /// Uncovered pixels belong to no segment.
    Exclude,
}

impl std::str::FromStr for ResidualPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "components" => Ok(Self::Components),
            "single" => Ok(Self::Single),
            "exclude" => Ok(Self::Exclude),
            other => Err(format!("unknown residual policy `{other}`")),
        }
    }
}

/// Segment ids for every pixel of one image plus the derived segment index.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelPartition {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub data: Vec<u32>,
    segments: BTreeMap<u32, Vec<u32>>,
}

impl SuperpixelPartition {
    /// Builds the partition, resolving uncovered pixels with `policy`.
    pub fn new(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        mut data: Vec<u32>,
        policy: ResidualPolicy,
    ) -> Result<Self, ModelError> {
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(ModelError::LengthMismatch {
                expected,
                found: data.len(),
            });
        }
        assign_residuals(&mut data, width as usize, height as usize, policy);
        let mut segments: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (i, &id) in data.iter().enumerate() {
            if id != UNASSIGNED_SEGMENT {
                segments.entry(id).or_default().push(i as u32);
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            width,
            height,
            data,
            segments,
        })
    }

    pub fn segment_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.segments.keys().copied()
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn segment_pixels(&self, segment_id: u32) -> Option<&[u32]> {
        self.segments.get(&segment_id).map(Vec::as_slice)
    }

    pub fn segment_of(&self, index: usize) -> Option<u32> {
        Some(self.data[index]).filter(|&id| id != UNASSIGNED_SEGMENT)
    }

    pub fn superpixel(&self, segment_id: u32) -> Option<Superpixel> {
        self.segments.get(&segment_id).map(|pixels| Superpixel {
            image_id: self.image_id.clone(),
            segment_id,
            width: self.width,
            pixels: pixels.clone(),
        })
    }

    /// The segment restricted to pixels whose working label is not `ignore`;
    /// `None` when nothing remains.
    pub fn eligible_superpixel(
        &self,
        segment_id: u32,
        labels: &LabelMap,
        ignore: Option<ClassId>,
    ) -> Option<Superpixel> {
        let pixels: Vec<u32> = self
            .segments
            .get(&segment_id)?
            .iter()
            .copied()
            .filter(|&i| Some(labels.get(i as usize)) != ignore)
            .collect();
        if pixels.is_empty() {
            return None;
        }
        Some(Superpixel {
            image_id: self.image_id.clone(),
            segment_id,
            width: self.width,
            pixels,
        })
    }
}

fn assign_residuals(data: &mut [u32], width: usize, height: usize, policy: ResidualPolicy) {
    if !data.contains(&UNASSIGNED_SEGMENT) || policy == ResidualPolicy::Exclude {
        return;
    }
    let mut next_id = data
        .iter()
        .copied()
        .filter(|&id| id != UNASSIGNED_SEGMENT)
        .max()
        .map_or(0, |m| m + 1);
    match policy {
        ResidualPolicy::Exclude => {}
        ResidualPolicy::Single => {
            for id in data.iter_mut().filter(|id| **id == UNASSIGNED_SEGMENT) {
                *id = next_id;
            }
        }
        ResidualPolicy::Components => {
            let mut stack = Vec::new();
            for start in 0..data.len() {
                if data[start] != UNASSIGNED_SEGMENT {
                    continue;
                }
                data[start] = next_id;
                stack.push(start);
                while let Some(i) = stack.pop() {
                    let (x, y) = (i % width, i / width);
                    let mut visit = |j: usize| {
                        if data[j] == UNASSIGNED_SEGMENT {
                            data[j] = next_id;
                            stack.push(j);
                        }
                    };
                    if x > 0 {
                        visit(i - 1);
                    }
                    if x + 1 < width {
                        visit(i + 1);
                    }
                    if y > 0 {
                        visit(i - width);
                    }
                    if y + 1 < height {
                        visit(i + width);
                    }
                }
                next_id += 1;
            }
        }
    }
}

/// One segment's pixels as row-major linear indices, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Superpixel {
    pub image_id: String,
    pub segment_id: u32,
    pub width: u32,
    pub pixels: Vec<u32>,
}

impl Superpixel {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixel_ref(&self, index: u32) -> PixelRef {
        PixelRef {
            image_id: self.image_id.clone(),
            x: index % self.width,
            y: index / self.width,
        }
    }

    pub fn key(&self) -> SegmentKey {
        (self.image_id.clone(), self.segment_id)
    }

    /// Tight bounding box `[x0, y0, x1, y1]`, inclusive.
    pub fn bbox(&self) -> [u32; 4] {
        let mut b = [u32::MAX, u32::MAX, 0, 0];
        for &i in &self.pixels {
            let (x, y) = (i % self.width, i / self.width);
            b[0] = b[0].min(x);
            b[1] = b[1].min(y);
            b[2] = b[2].max(x);
            b[3] = b[3].max(y);
        }
        b
    }
}

/// Running click and information-theoretic cost of answered queries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub clicks_spent: u64,
    pub bits_spent: f64,
    pub clicks_limit: u64,
    pub confirmations: u64,
    pub corrections: u64,
}

impl BudgetLedger {
    pub fn with_limit(clicks_limit: u64) -> Self {
        Self {
            clicks_limit,
            ..Self::default()
        }
    }

    /// Empirical probability that a shown pseudo label was correct.
    pub fn confirmation_rate(&self) -> Option<f64> {
        (self.clicks_spent > 0).then(|| self.confirmations as f64 / self.clicks_spent as f64)
    }

    pub fn is_consistent(&self) -> bool {
        self.clicks_spent == self.confirmations + self.corrections && self.bits_spent >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundPhase {
    /// Predictions for `round` are ready; the next round may start.
    Ready,
    /// Queries of `round` are issued and being answered.
    Querying,
    /// Labels of `round` are expanded; fresh predictions are still missing.
    AwaitingPredictions,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub image_id: String,
    pub segment_id: u32,
    pub x: u32,
    pub y: u32,
    pub score: f32,
}

/// Snapshot of one round, written as the JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    pub round: u32,
    pub phase: RoundPhase,
    pub pool: Vec<PoolRecord>,
    pub batch: Vec<PixelRef>,
    pub ledger: BudgetLedger,
    pub corrected: BTreeSet<SegmentKey>,
    /// Total queries issued over the run; seeds the oracle stream.
    pub queries_issued: u64,
}

impl RoundState {
    pub fn initial(clicks_limit: u64) -> Self {
        Self {
            round: 0,
            phase: RoundPhase::AwaitingPredictions,
            pool: Vec::new(),
            batch: Vec::new(),
            ledger: BudgetLedger::with_limit(clicks_limit),
            corrected: BTreeSet::new(),
            queries_issued: 0,
        }
    }
}
