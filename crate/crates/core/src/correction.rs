//! Correction queries, the simulated oracle, label expansion and cost
//! bookkeeping. The round orchestration lives in [`crate::session`].

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::answer_bits;
use crate::model::{BudgetLedger, ClassId, LabelMap, PixelRef, ProbMap, SegmentKey, Superpixel};
use crate::pool::{cosine, row_f64};

#[derive(Debug, Error, PartialEq)]
pub enum AnswerError {
    #[error("no ground truth for image {0}")]
    MissingGroundTruth(String),
    #[error("segment {1} of {0} was already expanded")]
    StaleAnswer(String, u32),
    #[error("expansion threshold must lie in [0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error("invalid label {label}: {reason}")]
    InvalidLabel { label: u16, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Pending,
    Answered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionQuery {
    pub query_id: String,
    pub round: u32,
    /// Position in the run's global query sequence.
    pub sequence: u64,
    pub pixel: PixelRef,
    pub pixel_index: u32,
    pub segment_id: u32,
    /// Working label at the representative pixel when the query was issued.
    pub pseudo_label: ClassId,
    pub status: QueryStatus,
}

impl CorrectionQuery {
    pub fn segment_key(&self) -> SegmentKey {
        (self.pixel.image_id.clone(), self.segment_id)
    }
}

/// Wire form: `{"verdict":"confirmed"}` or `{"verdict":"corrected","label":3}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Confirmed,
    Corrected { label: u16 },
}

impl Verdict {
    pub fn is_confirmed(&self) -> bool {
        matches!(self, Verdict::Confirmed)
    }

    pub fn corrected_label(&self) -> Option<u16> {
        match self {
            Verdict::Confirmed => None,
            Verdict::Corrected { label } => Some(*label),
        }
    }

    /// The label the segment should carry after this answer.
    pub fn final_label(&self, pseudo: ClassId) -> ClassId {
        match self {
            Verdict::Confirmed => pseudo,
            Verdict::Corrected { label } => ClassId(*label),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAnswer {
    pub query_id: String,
    #[serde(flatten)]
    pub verdict: Verdict,
    pub annotator_id: String,
    /// Milliseconds since the Unix epoch; 0 for simulated answers.
    pub answered_at: u64,
}

/// Rejects corrections to the pseudo label itself, to ignore, or outside the class list.
pub fn check_verdict(
    verdict: &Verdict,
    pseudo: ClassId,
    num_classes: usize,
    ignore: Option<ClassId>,
) -> Result<(), AnswerError> {
    if let Verdict::Corrected { label } = *verdict {
        let reason = if label == pseudo.0 {
            "equals the pseudo label; confirm instead"
        } else if label as usize >= num_classes {
            "outside the class list"
        } else if Some(ClassId(label)) == ignore {
            "is the ignore label"
        } else {
            return Ok(());
        };
        return Err(AnswerError::InvalidLabel {
            label,
            reason: reason.to_string(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Probability of answering with a wrong verdict.
    pub error_rate: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            error_rate: 0.0,
            seed: 7,
        }
    }
}

/// Ground-truth lookup with an optional symmetric error model. Each query
/// draws from its own random stream, so answers do not depend on order.
pub fn simulated_answer(
    query: &CorrectionQuery,
    gt: Option<&LabelMap>,
    cfg: &OracleConfig,
    num_classes: usize,
    ignore: Option<ClassId>,
) -> Result<QueryAnswer, AnswerError> {
    let gt = gt.ok_or_else(|| AnswerError::MissingGroundTruth(query.pixel.image_id.clone()))?;
    let truth_label = gt.get(query.pixel_index as usize);
    // void ground truth gives the annotator nothing to correct
    let truthful = if truth_label == query.pseudo_label || Some(truth_label) == ignore {
        Verdict::Confirmed
    } else {
        Verdict::Corrected { label: truth_label.0 }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(query.sequence);
    let verdict = if rng.gen::<f64>() < cfg.error_rate {
        let mut wrong: Vec<Verdict> = Vec::with_capacity(num_classes);
        if !truthful.is_confirmed() {
            wrong.push(Verdict::Confirmed);
        }
        for c in 0..num_classes as u16 {
            let v = Verdict::Corrected { label: c };
            if c != query.pseudo_label.0 && Some(ClassId(c)) != ignore && v != truthful {
                wrong.push(v);
            }
        }
        if wrong.is_empty() {
            truthful
        } else {
            wrong[rng.gen_range(0..wrong.len())]
        }
    } else {
        truthful
    };
    Ok(QueryAnswer {
        query_id: query.query_id.clone(),
        verdict,
        annotator_id: "oracle".to_string(),
        answered_at: 0,
    })
}

/// Pixels of `segment` whose row has cosine similarity at least `epsilon`
/// with the representative's row. The representative itself is always
/// included.
pub fn expansion_region(
    representative: u32,
    segment: &Superpixel,
    probs: &ProbMap,
    epsilon: f64,
) -> Result<Vec<u32>, AnswerError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(AnswerError::InvalidEpsilon(epsilon));
    }
    if epsilon == 0.0 {
        return Ok(segment.pixels.clone());
    }
    let rep = row_f64(probs.row(representative as usize));
    Ok(segment
        .pixels
        .iter()
        .copied()
        .filter(|&i| i == representative || cosine(probs.row(i as usize), &rep).is_some_and(|c| c >= epsilon))
        .collect())
}

/// Applies one answer to the working labels and returns the relabeled
/// pixels. Confirmations relabel only when `expand_confirmed` is set.
#[allow(clippy::too_many_arguments)]
pub fn expand_label(
    query: &CorrectionQuery,
    verdict: &Verdict,
    segment: &Superpixel,
    probs: &ProbMap,
    epsilon: f64,
    expand_confirmed: bool,
    labels: &mut LabelMap,
    expanded: &mut BTreeSet<SegmentKey>,
) -> Result<Vec<u32>, AnswerError> {
    let key = query.segment_key();
    if expanded.contains(&key) {
        return Err(AnswerError::StaleAnswer(key.0, key.1));
    }
    let region = expansion_region(query.pixel_index, segment, probs, epsilon)?;
    expanded.insert(key);
    if verdict.is_confirmed() && !expand_confirmed {
        return Ok(Vec::new());
    }
    let label = verdict.final_label(query.pseudo_label);
    for &i in &region {
        labels.data[i as usize] = label.0;
    }
    Ok(region)
}

/// One click; 1 bit for a confirmation, `log2 L` bits for a correction.
pub fn record_query(ledger: &BudgetLedger, verdict: &Verdict, num_classes: usize) -> BudgetLedger {
    let mut next = ledger.clone();
    next.clicks_spent += 1;
    next.bits_spent += answer_bits(verdict.is_confirmed(), num_classes);
    if verdict.is_confirmed() {
        next.confirmations += 1;
    } else {
        next.corrections += 1;
    }
    next
}

/// One line of the JSON-lines query log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub round: u32,
    pub image_id: String,
    pub x: u32,
    pub y: u32,
    pub segment_id: u32,
    pub pseudo_label: u16,
    pub verdict: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_label: Option<u16>,
    pub click_cost: u32,
    pub bit_cost: f64,
}

impl QueryRecord {
    pub fn new(query: &CorrectionQuery, verdict: &Verdict, num_classes: usize) -> Self {
        Self {
            query_id: query.query_id.clone(),
            round: query.round,
            image_id: query.pixel.image_id.clone(),
            x: query.pixel.x,
            y: query.pixel.y,
            segment_id: query.segment_id,
            pseudo_label: query.pseudo_label.0,
            verdict: if verdict.is_confirmed() {
                "confirmed"
            } else {
                "corrected"
            }
            .to_string(),
            corrected_label: verdict.corrected_label(),
            click_cost: 1,
            bit_cost: answer_bits(verdict.is_confirmed(), num_classes),
        }
    }

    pub fn verdict(&self) -> Verdict {
        match self.corrected_label {
            Some(label) => Verdict::Corrected { label },
            None => Verdict::Confirmed,
        }
    }
}

/// Replays a log into a ledger.
pub fn replay_ledger<'a>(
    records: impl IntoIterator<Item = &'a QueryRecord>,
    clicks_limit: u64,
    num_classes: usize,
) -> BudgetLedger {
    records
        .into_iter()
        .fold(BudgetLedger::with_limit(clicks_limit), |ledger, r| {
            record_query(&ledger, &r.verdict(), num_classes)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LabelRole;
    use proptest::prelude::*;

    fn query(pseudo: u16, sequence: u64) -> CorrectionQuery {
        CorrectionQuery {
            query_id: format!("r001-q{sequence:05}"),
            round: 1,
            sequence,
            pixel: PixelRef {
                image_id: "img".into(),
                x: 0,
                y: 0,
            },
            pixel_index: 0,
            segment_id: 0,
            pseudo_label: ClassId(pseudo),
            status: QueryStatus::Pending,
        }
    }

    fn gt(label: u16) -> LabelMap {
        LabelMap::new("img", LabelRole::GroundTruth, 1, 1, vec![label]).unwrap()
    }

    #[test]
    fn oracle_examples() {
        let perfect = OracleConfig {
            error_rate: 0.0,
            seed: 1,
        };
        let a = simulated_answer(&query(2, 0), Some(&gt(2)), &perfect, 4, None).unwrap();
        assert_eq!(a.verdict, Verdict::Confirmed);
        let a = simulated_answer(&query(2, 0), Some(&gt(3)), &perfect, 4, None).unwrap();
        assert_eq!(a.verdict, Verdict::Corrected { label: 3 });

        let liar = OracleConfig {
            error_rate: 1.0,
            seed: 1,
        };
        let a = simulated_answer(&query(0, 0), Some(&gt(0)), &liar, 2, None).unwrap();
        assert_eq!(a.verdict, Verdict::Corrected { label: 1 });
        let a = simulated_answer(&query(0, 0), Some(&gt(1)), &liar, 2, None).unwrap();
        assert_eq!(a.verdict, Verdict::Confirmed);

        assert_eq!(
            simulated_answer(&query(0, 0), None, &perfect, 2, None),
            Err(AnswerError::MissingGroundTruth("img".into()))
        );
    }

    #[test]
    fn noisy_oracle_never_corrects_to_pseudo() {
        let cfg = OracleConfig {
            error_rate: 1.0,
            seed: 3,
        };
        for seq in 0..200 {
            let a = simulated_answer(&query(1, seq), Some(&gt(2)), &cfg, 5, None).unwrap();
            assert!(check_verdict(&a.verdict, ClassId(1), 5, None).is_ok());
            assert_ne!(a.verdict, Verdict::Corrected { label: 2 });
        }
    }

    #[test]
    fn verdict_wire_format() {
        assert_eq!(
            serde_json::to_string(&Verdict::Confirmed).unwrap(),
            r#"{"verdict":"confirmed"}"#
        );
        assert_eq!(
            serde_json::from_str::<Verdict>(r#"{"verdict":"corrected","label":3}"#).unwrap(),
            Verdict::Corrected { label: 3 }
        );
    }

    #[test]
    fn check_verdict_rules() {
        assert!(check_verdict(&Verdict::Confirmed, ClassId(0), 2, None).is_ok());
        assert!(check_verdict(&Verdict::Corrected { label: 1 }, ClassId(0), 2, None).is_ok());
        assert!(check_verdict(&Verdict::Corrected { label: 0 }, ClassId(0), 2, None).is_err());
        assert!(check_verdict(&Verdict::Corrected { label: 2 }, ClassId(0), 2, None).is_err());
    }

    fn segment(rows: &[[f32; 2]]) -> (Superpixel, ProbMap) {
        let n = rows.len() as u32;
        let probs = ProbMap::new("img", n, 1, 2, rows.iter().flatten().copied().collect()).unwrap();
        let sp = Superpixel {
            image_id: "img".into(),
            segment_id: 0,
            width: n,
            pixels: (0..n).collect(),
        };
        (sp, probs)
    }

    #[test]
    fn full_expansion_relabels_segment() {
        let rows: Vec<[f32; 2]> = (0..40).map(|i| [i as f32 / 40.0, 1.0 - i as f32 / 40.0]).collect();
        let (sp, probs) = segment(&rows);
        let mut labels = LabelMap::new("img", LabelRole::Corrected, 40, 1, vec![0; 40]).unwrap();
        let mut done = BTreeSet::new();
        let q = query(0, 0);
        let changed = expand_label(
            &q,
            &Verdict::Corrected { label: 1 },
            &sp,
            &probs,
            0.0,
            true,
            &mut labels,
            &mut done,
        )
        .unwrap();
        assert_eq!(changed.len(), 40);
        assert!(labels.data.iter().all(|&l| l == 1));
        assert_eq!(
            expand_label(&q, &Verdict::Confirmed, &sp, &probs, 0.0, true, &mut labels, &mut done),
            Err(AnswerError::StaleAnswer("img".into(), 0))
        );
    }

    #[test]
    fn threshold_one_keeps_parallel_rows_only() {
        let (sp, probs) = segment(&[[0.2, 0.8], [0.8, 0.2], [0.2, 0.8], [0.5, 0.5]]);
        assert_eq!(expansion_region(0, &sp, &probs, 1.0).unwrap(), vec![0, 2]);
        assert_eq!(expansion_region(3, &sp, &probs, 1.0).unwrap(), vec![3]);
        assert_eq!(
            expansion_region(0, &sp, &probs, 1.2),
            Err(AnswerError::InvalidEpsilon(1.2))
        );
    }

    #[test]
    fn confirmation_expansion_switch() {
        let (sp, probs) = segment(&[[0.9, 0.1], [0.4, 0.6]]);
        let mut labels = LabelMap::new("img", LabelRole::Corrected, 2, 1, vec![0, 1]).unwrap();
        let mut done = BTreeSet::new();
        let changed = expand_label(
            &query(0, 0),
            &Verdict::Confirmed,
            &sp,
            &probs,
            0.0,
            false,
            &mut labels,
            &mut done,
        )
        .unwrap();
        assert!(changed.is_empty());
        assert_eq!(labels.data, vec![0, 1]);
        let mut done = BTreeSet::new();
        expand_label(
            &query(0, 0),
            &Verdict::Confirmed,
            &sp,
            &probs,
            0.0,
            true,
            &mut labels,
            &mut done,
        )
        .unwrap();
        assert_eq!(labels.data, vec![0, 0]);
    }

    #[test]
    fn record_query_examples() {
        let l = record_query(&BudgetLedger::default(), &Verdict::Confirmed, 20);
        assert_eq!((l.clicks_spent, l.bits_spent), (1, 1.0));
        let l = record_query(&BudgetLedger::default(), &Verdict::Corrected { label: 3 }, 20);
        assert_eq!(l.clicks_spent, 1);
        assert!((l.bits_spent - 4.321_928_094_887_362).abs() < 1e-12);
        let l = record_query(&BudgetLedger::default(), &Verdict::Corrected { label: 1 }, 2);
        assert_eq!(l.bits_spent, 1.0);
        assert!(l.is_consistent());
    }

    proptest! {
        #[test]
        fn expansion_is_nested(
            rows in prop::collection::vec((0.01f32..1.0, 0.01f32..1.0), 1..30),
            rep in 0usize..30,
            e1 in 0.0f64..=1.0,
            e2 in 0.0f64..=1.0,
        ) {
            let rows: Vec<[f32; 2]> = rows.into_iter().map(|(a, b)| [a, b]).collect();
            let (sp, probs) = segment(&rows);
            let rep = (rep % rows.len()) as u32;
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let wide = expansion_region(rep, &sp, &probs, lo).unwrap();
            let narrow = expansion_region(rep, &sp, &probs, hi).unwrap();
            prop_assert!(narrow.iter().all(|p| wide.contains(p)));
            prop_assert!(narrow.contains(&rep));
        }

        #[test]
        fn ledger_is_a_fold(verdicts in prop::collection::vec(prop::option::of(0u16..5), 0..50)) {
            let records: Vec<QueryRecord> = verdicts.iter().enumerate().map(|(i, v)| {
                let verdict = v.map_or(Verdict::Confirmed, |label| Verdict::Corrected { label });
                QueryRecord::new(&query(9, i as u64), &verdict, 6)
            }).collect();
            let ledger = replay_ledger(&records, 100, 6);
            prop_assert!(ledger.is_consistent());
            prop_assert_eq!(ledger.clicks_spent as usize, records.len());
            let bits: f64 = records.iter().map(|r| r.bit_cost).sum();
            prop_assert!((ledger.bits_spent - bits).abs() < 1e-9);
        }
    }
}
