//! Diversified pixel pool: one representative pixel per superpixel.
//!
//! For a segment `s` the model's estimated labels vote for a dominant class;
//! the pixels agreeing with it form `s'`. The representative is the pixel of
//! `s` whose probability row has the highest cosine similarity to the mean
//! row of `s'`.

use std::collections::BTreeSet;

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{argmax_row, ClassId, LabelMap, PixelRef, ProbMap, SegmentKey, Superpixel, SuperpixelPartition};

#[derive(Debug, Error, PartialEq)]
pub enum PoolError {
    #[error("segment {0} has no pixels")]
    EmptySegment(u32),
    #[error("dominant subset is empty")]
    EmptySubset,
    #[error("zero-norm probability row at pixel index {0}")]
    DegenerateVector(u32),
    #[error("no probability map for image {0}")]
    MissingProbMap(String),
}

/// Cosine similarity of two nonnegative vectors; `None` if either has zero norm.
pub fn cosine(a: &[f32], b: &[f64]) -> Option<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let x = x as f64;
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb).sqrt()).min(1.0))
}

pub fn row_f64(row: &[f32]) -> Vec<f64> {
    row.iter().map(|&p| p as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub pixel: PixelRef,
    /// Row-major index of `pixel` within its image.
    pub pixel_index: u32,
    pub segment_id: u32,
    pub dominant_label: ClassId,
    pub subset_size: usize,
    pub mean_prediction: Vec<f64>,
    /// Whether the representative lies in the dominant subset.
    pub in_subset: bool,
}

impl PoolEntry {
    pub fn key(&self) -> SegmentKey {
        (self.pixel.image_id.clone(), self.segment_id)
    }
}

pub fn dominant_label(segment: &Superpixel, probs: &ProbMap) -> Result<ClassId, PoolError> {
    if segment.is_empty() {
        return Err(PoolError::EmptySegment(segment.segment_id));
    }
    let mut counts = vec![0usize; probs.num_classes];
    for &i in &segment.pixels {
        counts[argmax_row(probs.row(i as usize)).index()] += 1;
    }
    let mut best = 0;
    for c in 1..counts.len() {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    Ok(ClassId(best as u16))
}

pub fn dominant_subset(segment: &Superpixel, probs: &ProbMap) -> Result<Superpixel, PoolError> {
    let dominant = dominant_label(segment, probs)?;
    let pixels = segment
        .pixels
        .iter()
        .copied()
        .filter(|&i| argmax_row(probs.row(i as usize)) == dominant)
        .collect();
    Ok(Superpixel {
        pixels,
        ..segment.clone()
    })
}

pub fn mean_prediction(subset: &Superpixel, probs: &ProbMap) -> Result<Vec<f64>, PoolError> {
    if subset.is_empty() {
        return Err(PoolError::EmptySubset);
    }
    let mut sum = vec![0.0f64; probs.num_classes];
    for &i in &subset.pixels {
        for (acc, &p) in sum.iter_mut().zip(probs.row(i as usize)) {
            *acc += p as f64;
        }
    }
    let n = subset.len() as f64;
    sum.iter_mut().for_each(|v| *v /= n);
    Ok(sum)
}

/// Picks the pool entry for one segment. Ties go to the first pixel in
/// row-major order.
pub fn representative_pixel(segment: &Superpixel, probs: &ProbMap) -> Result<PoolEntry, PoolError> {
    let subset = dominant_subset(segment, probs)?;
    let dominant = dominant_label(segment, probs)?;
    let mean = mean_prediction(&subset, probs)?;
    let mut best: Option<(u32, f64)> = None;
    for &i in &segment.pixels {
        let cos = cosine(probs.row(i as usize), &mean).ok_or(PoolError::DegenerateVector(i))?;
        if best.is_none_or(|(_, b)| cos > b) {
            best = Some((i, cos));
        }
    }
    let (index, _) = best.expect("segment checked non-empty");
    Ok(PoolEntry {
        pixel: segment.pixel_ref(index),
        pixel_index: index,
        segment_id: segment.segment_id,
        dominant_label: dominant,
        subset_size: subset.len(),
        in_subset: subset.pixels.binary_search(&index).is_ok(),
        mean_prediction: mean,
    })
}

/// Everything the pool needs to know about one image.
#[derive(Debug, Clone, Copy)]
pub struct PoolImage<'a> {
    pub partition: &'a SuperpixelPartition,
    pub probs: Option<&'a ProbMap>,
    /// Working labels; only used to drop ignore pixels.
    pub labels: &'a LabelMap,
}

/// One entry per eligible superpixel, ordered by `(image_id, segment_id)`.
/// Segments in `corrected` and segments made only of ignore pixels are
/// skipped.
pub fn build_pool(
    images: &[PoolImage<'_>],
    corrected: &BTreeSet<SegmentKey>,
    ignore: Option<ClassId>,
) -> Result<Vec<PoolEntry>, PoolError> {
    let per_image: Vec<Result<Vec<PoolEntry>, PoolError>> = images
        .par_iter()
        .map(|img| {
            let id = &img.partition.image_id;
            let probs = img.probs.ok_or_else(|| PoolError::MissingProbMap(id.clone()))?;
            img.partition
                .segment_ids()
                .filter(|&seg| !corrected.contains(&(id.clone(), seg)))
                .filter_map(|seg| img.partition.eligible_superpixel(seg, img.labels, ignore))
                .map(|sp| representative_pixel(&sp, probs))
                .collect()
        })
        .collect();
    let mut pool = Vec::new();
    for entries in per_image {
        pool.extend(entries?);
    }
    pool.sort_by(|a, b| {
        a.pixel
            .image_id
            .cmp(&b.pixel.image_id)
            .then(a.segment_id.cmp(&b.segment_id))
    });
    Ok(pool)
}

/// CSV dump: `image_id,segment_id,x,y,dominant_label,subset_size`.
pub fn pool_csv(pool: &[PoolEntry]) -> String {
    let mut out = String::from("image_id,segment_id,x,y,dominant_label,subset_size\n");
    for e in pool {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.pixel.image_id, e.segment_id, e.pixel.x, e.pixel.y, e.dominant_label, e.subset_size
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LabelRole, ResidualPolicy};
    use proptest::prelude::*;

    fn probs_from_rows(rows: &[&[f32]]) -> ProbMap {
        let c = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        ProbMap::new("img", rows.len() as u32, 1, c, data).unwrap()
    }

    fn whole(n: usize) -> Superpixel {
        Superpixel {
            image_id: "img".into(),
            segment_id: 0,
            width: n as u32,
            pixels: (0..n as u32).collect(),
        }
    }

    #[test]
    fn dominant_label_majority_and_ties() {
        let p = probs_from_rows(&[&[0.1, 0.8, 0.1], &[0.0, 0.6, 0.4], &[0.1, 0.2, 0.7]]);
        assert_eq!(dominant_label(&whole(3), &p), Ok(ClassId(1)));
        let p = probs_from_rows(&[&[0.9, 0.1], &[0.2, 0.8]]);
        assert_eq!(dominant_label(&whole(2), &p), Ok(ClassId(0)));
        let empty = Superpixel {
            pixels: vec![],
            ..whole(1)
        };
        assert_eq!(dominant_label(&empty, &p), Err(PoolError::EmptySegment(0)));
    }

    #[test]
    fn dominant_subset_examples() {
        let p = probs_from_rows(&[&[0.1, 0.8, 0.1], &[0.0, 0.6, 0.4], &[0.1, 0.2, 0.7]]);
        assert_eq!(dominant_subset(&whole(3), &p).unwrap().pixels, vec![0, 1]);
        let p = probs_from_rows(&[&[0.9, 0.1], &[0.7, 0.3], &[0.6, 0.4]]);
        assert_eq!(dominant_subset(&whole(3), &p).unwrap(), whole(3));
    }

    #[test]
    fn mean_prediction_examples() {
        let p = probs_from_rows(&[&[0.2, 0.8], &[1.0, 0.0], &[0.0, 1.0]]);
        let single = Superpixel {
            pixels: vec![0],
            ..whole(3)
        };
        let m = mean_prediction(&single, &p).unwrap();
        assert!((m[0] - 0.2).abs() < 1e-7 && (m[1] - 0.8).abs() < 1e-7);
        let pair = Superpixel {
            pixels: vec![1, 2],
            ..whole(3)
        };
        assert_eq!(mean_prediction(&pair, &p).unwrap(), vec![0.5, 0.5]);
        let none = Superpixel {
            pixels: vec![],
            ..whole(3)
        };
        assert_eq!(mean_prediction(&none, &p), Err(PoolError::EmptySubset));
    }

    #[test]
    fn representative_examples() {
        let p = probs_from_rows(&[&[0.3f32, 0.7][..]; 4]);
        let e = representative_pixel(&whole(4), &p).unwrap();
        assert_eq!(e.pixel_index, 0);
        assert!(e.in_subset);

        let p = probs_from_rows(&[&[0.9, 0.1], &[0.3, 0.7], &[0.8, 0.2], &[0.7, 0.3]]);
        let e = representative_pixel(&whole(4), &p).unwrap();
        assert_eq!(e.dominant_label, ClassId(0));
        assert_eq!(e.subset_size, 3);
        // s' = {0, 2, 3} with mean (0.8, 0.2), which pixel 2 equals exactly
        assert_eq!(e.pixel_index, 2);
        assert_eq!(
            e.pixel,
            PixelRef {
                image_id: "img".into(),
                x: 2,
                y: 0
            }
        );
    }

    #[test]
    fn zero_row_is_degenerate() {
        let p = probs_from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(representative_pixel(&whole(2), &p), Err(PoolError::DegenerateVector(1)));
    }

    fn image(seg_ids: Vec<u32>, pseudo: Vec<u16>, w: u32) -> (SuperpixelPartition, ProbMap, LabelMap) {
        let h = seg_ids.len() as u32 / w;
        let part = SuperpixelPartition::new("img", w, h, seg_ids, ResidualPolicy::Components).unwrap();
        let mut data = Vec::new();
        for &l in &pseudo {
            data.extend_from_slice(if l == 0 { &[0.8f32, 0.2] } else { &[0.3, 0.7] });
        }
        let probs = ProbMap::new("img", w, h, 2, data).unwrap();
        let labels = LabelMap::new("img", LabelRole::Pseudo, w, h, pseudo).unwrap();
        (part, probs, labels)
    }

    #[test]
    fn pool_cardinality_and_exclusions() {
        let (part, probs, labels) = image(vec![0, 0, 1, 1, 2, 2], vec![0, 0, 1, 1, 0, 1], 3);
        let img = PoolImage {
            partition: &part,
            probs: Some(&probs),
            labels: &labels,
        };
        let pool = build_pool(&[img], &BTreeSet::new(), None).unwrap();
        assert_eq!(pool.len(), 3);
        let corrected: BTreeSet<_> = [("img".to_string(), 1)].into_iter().collect();
        let pool = build_pool(&[img], &corrected, None).unwrap();
        assert_eq!(pool.iter().map(|e| e.segment_id).collect::<Vec<_>>(), vec![0, 2]);

        // segment 1 entirely ignore
        let ignored = LabelMap::new("img", LabelRole::Pseudo, 3, 2, vec![0, 0, 9, 9, 0, 1]).unwrap();
        let img = PoolImage {
            partition: &part,
            probs: Some(&probs),
            labels: &ignored,
        };
        let pool = build_pool(&[img], &BTreeSet::new(), Some(ClassId(9))).unwrap();
        assert_eq!(pool.len(), 2);

        let img = PoolImage {
            partition: &part,
            probs: None,
            labels: &labels,
        };
        assert_eq!(
            build_pool(&[img], &BTreeSet::new(), None),
            Err(PoolError::MissingProbMap("img".into()))
        );
    }

    #[test]
    fn csv_dump_header() {
        let (part, probs, labels) = image(vec![0, 0], vec![1, 1], 2);
        let img = PoolImage {
            partition: &part,
            probs: Some(&probs),
            labels: &labels,
        };
        let pool = build_pool(&[img], &BTreeSet::new(), None).unwrap();
        assert_eq!(
            pool_csv(&pool),
            "image_id,segment_id,x,y,dominant_label,subset_size\nimg,0,0,0,1,2\n"
        );
    }

    proptest! {
        #[test]
        fn representative_scale_invariant(
            rows in prop::collection::vec(prop::collection::vec(0.01f32..1.0, 3), 1..12),
            scales in prop::collection::vec(0.5f32..4.0, 12),
        ) {
            let n = rows.len();
            let flat: Vec<f32> = rows.iter().flatten().copied().collect();
            let p = ProbMap::new("img", n as u32, 1, 3, flat).unwrap();
            let sp = whole(n);
            let base = representative_pixel(&sp, &p).unwrap();
            // rescale every row except those of s', keeping the subset mean fixed
            let subset = dominant_subset(&sp, &p).unwrap();
            let scaled: Vec<f32> = rows.iter().enumerate().flat_map(|(i, r)| {
                let k = if subset.pixels.contains(&(i as u32)) { 1.0 } else { scales[i] };
                r.iter().map(move |v| v * k).collect::<Vec<_>>()
            }).collect();
            let q = ProbMap::new("img", n as u32, 1, 3, scaled).unwrap();
            prop_assume!(dominant_subset(&sp, &q).unwrap() == subset);
            let mean = mean_prediction(&subset, &p).unwrap();
            let mut cos: Vec<f64> = sp.pixels.iter().map(|&i| cosine(p.row(i as usize), &mean).unwrap()).collect();
            cos.sort_by(|a, b| b.total_cmp(a));
            // skip near-ties where float rounding of the scaled row may flip the winner
            prop_assume!(cos.len() < 2 || cos[0] - cos[1] > 1e-6);
            prop_assert_eq!(representative_pixel(&sp, &q).unwrap().pixel_index, base.pixel_index);
        }

        #[test]
        fn build_pool_deterministic(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ids: Vec<u32> = (0..24).map(|_| rng.gen_range(0..5)).collect();
            let pseudo: Vec<u16> = (0..24).map(|_| rng.gen_range(0..2)).collect();
            let (part, probs, labels) = image(ids, pseudo, 6);
            let img = PoolImage { partition: &part, probs: Some(&probs), labels: &labels };
            let a = build_pool(&[img], &BTreeSet::new(), None).unwrap();
            let b = build_pool(&[img], &BTreeSet::new(), None).unwrap();
            prop_assert_eq!(a.len(), part.num_segments());
            prop_assert_eq!(a, b);
        }
    }
}
