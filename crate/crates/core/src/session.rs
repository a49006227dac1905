//! Round orchestration: pool, select, query, expand, refresh predictions.
//!
//! A [`Session`] owns one run. Simulated runs drive it with the oracle;
//! interactive runs drive the same methods from HTTP handlers, so both modes
//! produce identical labels for identical answers.
//!
//! Run directory layout:
//!
//! ```text
//! checkpoint.json            RoundState plus pending queries
//! queries.jsonl              answered queries of completed rounds
//! metrics.json               one report per completed round
//! rounds/round_NNN/labels/   working labels after round NNN
//! rounds/round_NNN/probs/    predictions trained on those labels
//! rounds/round_NNN/pool.csv, scores.csv
//! export/                    corrected dataset, written when finished
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{score_csv, score_pool, select_batch, AcquisitionError, AcquisitionKind, ScoringInput};
use crate::correction::{
    check_verdict, expand_label, record_query, simulated_answer, AnswerError, CorrectionQuery, OracleConfig,
    QueryAnswer, QueryRecord, QueryStatus, Verdict,
};
use crate::dataset::{Dataset, DatasetError};
use crate::metrics::{corrected_class_histogram, detection_counts_mask, ConfusionMatrix, DetectionCounts};
use crate::model::{
    BudgetLedger, LabelMap, LabelRole, PoolRecord, ProbMap, ResidualPolicy, RoundPhase, RoundState, Superpixel,
};
use crate::pool::{build_pool, pool_csv, PoolError, PoolImage};
use crate::predictor::{
    external_round_exchange, fit, ingest_round_probs, label_path, prob_path, write_round_labels, write_round_probs,
    PredictorError, ProbShape, TrainImage,
};
use crate::tensor_io::{read_tensor, TensorData, TensorError};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Answer(#[from] AnswerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown query {0}")]
    UnknownQuery(String),
    #[error("{0} queries of this round are still unanswered")]
    OutstandingQueries(usize),
    #[error("operation not allowed while the session is {0:?}")]
    WrongPhase(RoundPhase),
    #[error("run paused after round {round}: {reason}")]
    InterruptedResumable { round: u32, reason: String },
    #[error("run directory is corrupt: {0}")]
    Corrupt(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SessionError + '_ {
    move |source| SessionError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorConfig {
    #[default]
    Builtin,
    /// Without a command the loop pauses until `probs/` appears.
    External { command: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub batch_size: usize,
    pub rounds: u32,
    pub kind: AcquisitionKind,
    pub epsilon: f64,
    pub predictor: PredictorConfig,
    pub oracle: OracleConfig,
    pub residual: ResidualPolicy,
    pub expand_confirmed: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            rounds: 4,
            kind: AcquisitionKind::Sim,
            epsilon: 0.0,
            predictor: PredictorConfig::Builtin,
            oracle: OracleConfig::default(),
            residual: ResidualPolicy::Components,
            expand_confirmed: true,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: String| Err(SessionError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1], got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.oracle.error_rate) {
            return bad(format!(
                "oracle error rate must lie in [0, 1], got {}",
                self.oracle.error_rate
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub clicks: u64,
    pub bits: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub data_accuracy: Option<f64>,
    pub data_miou: Option<f64>,
    pub per_class_iou: BTreeMap<u16, f64>,
    pub corrected_histogram: BTreeMap<u16, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub manifest: PathBuf,
    pub config: LoopConfig,
    pub state: RoundState,
    /// Directory (relative to the run directory) holding the working labels.
    pub labels_dir: PathBuf,
    /// Directory holding current predictions; `None` while awaiting them.
    pub probs_dir: Option<PathBuf>,
    pub queries: Vec<CorrectionQuery>,
    pub answers: Vec<QueryAnswer>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const QUERY_LOG_FILE: &str = "queries.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const EXPORT_DIR: &str = "export";

pub fn round_dir_name(round: u32) -> PathBuf {
    PathBuf::from("rounds").join(format!("round_{round:03}"))
}

/// Read-only summary for dashboards and the HTTP API.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionSummary {
    pub round: u32,
    pub rounds: u32,
    pub phase: RoundPhase,
    pub batch_size: usize,
    pub queries_issued: usize,
    pub queries_pending: usize,
    pub queries_answered: usize,
    pub ledger: BudgetLedger,
    pub epsilon: f64,
    pub kind: AcquisitionKind,
}

pub struct Session {
    dataset: Dataset,
    config: LoopConfig,
    out_dir: Option<PathBuf>,
    manifest_path: Option<PathBuf>,
    working: Vec<LabelMap>,
    probs: Vec<ProbMap>,
    state: RoundState,
    queries: Vec<CorrectionQuery>,
    answers: BTreeMap<String, QueryAnswer>,
    log: Vec<QueryRecord>,
    metrics: Vec<RoundMetrics>,
    checkpoint_every_answer: bool,
}

impl Session {
    /// Starts a run: writes the round-0 labels and obtains warm-start
    /// predictions (ingested ones if every image has them, otherwise the
    /// configured predictor trained on the pseudo labels).
    pub fn new(
        dataset: Dataset,
        config: LoopConfig,
        out_dir: Option<PathBuf>,
        manifest_path: Option<PathBuf>,
    ) -> Result<Self, SessionError> {
        config.validate()?;
        if matches!(config.predictor, PredictorConfig::External { .. }) && out_dir.is_none() {
            return Err(SessionError::InvalidConfig(
                "the external predictor needs a run directory".into(),
            ));
        }
        if dataset.images.is_empty() {
            return Err(SessionError::InvalidConfig("dataset has no images".into()));
        }
        let working = dataset
            .images
            .iter()
            .map(|i| i.pseudo.with_role(LabelRole::Corrected))
            .collect();
        let clicks_limit = config.batch_size as u64 * config.rounds as u64;
        let mut session = Self {
            dataset,
            config,
            out_dir,
            manifest_path,
            working,
            probs: Vec::new(),
            state: RoundState::initial(clicks_limit),
            queries: Vec::new(),
            answers: BTreeMap::new(),
            log: Vec::new(),
            metrics: Vec::new(),
            checkpoint_every_answer: false,
        };
        if let Some(dir) = &session.out_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        session.write_labels()?;
        session.record_metrics()?;
        if session.dataset.images.iter().all(|i| i.probs.is_some()) {
            session.probs = session
                .dataset
                .images
                .iter()
                .map(|i| i.probs.clone().unwrap())
                .collect();
            session.predictions_ready()?;
        } else {
            session.refresh_predictions()?;
        }
        Ok(session)
    }

    /// Reopens a run directory at its last checkpoint.
    pub fn resume(out_dir: impl AsRef<Path>) -> Result<Self, SessionError> {
        let out_dir = out_dir.as_ref().to_path_buf();
        let cp_path = out_dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&cp_path).map_err(io_err(&cp_path))?;
        let cp: Checkpoint =
            serde_json::from_str(&text).map_err(|e| SessionError::Corrupt(format!("{}: {e}", cp_path.display())))?;
        cp.config.validate()?;
        let dataset = Dataset::load(&cp.manifest, cp.config.residual)?;
        let c = dataset.num_classes();

        let mut working = Vec::new();
        for img in &dataset.images {
            let t = read_tensor(label_path(&out_dir.join(&cp.labels_dir), &img.image_id))?;
            let TensorData::U16(data) = t.into_data() else {
                return Err(SessionError::Corrupt("working labels must be u16".into()));
            };
            let map = LabelMap::new(&img.image_id, LabelRole::Corrected, img.width, img.height, data)
                .map_err(|e| SessionError::Corrupt(e.to_string()))?;
            working.push(map);
        }
        let probs = match &cp.probs_dir {
            Some(dir) => ingest_round_probs(&out_dir.join(dir), &shapes(&dataset), c)?,
            None => Vec::new(),
        };
        let log = read_log(&out_dir.join(QUERY_LOG_FILE))?;
        let metrics_path = out_dir.join(METRICS_FILE);
        let metrics = match fs::read_to_string(&metrics_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| SessionError::Corrupt(e.to_string()))?,
            Err(_) => Vec::new(),
        };
        Ok(Self {
            dataset,
            config: cp.config,
            out_dir: Some(out_dir),
            manifest_path: Some(cp.manifest),
            working,
            probs,
            state: cp.state,
            queries: cp.queries,
            answers: cp.answers.into_iter().map(|a| (a.query_id.clone(), a)).collect(),
            log,
            metrics,
            checkpoint_every_answer: false,
        })
    }

    /// Persist state after every accepted answer (interactive mode).
    pub fn set_checkpoint_every_answer(&mut self, on: bool) {
        self.checkpoint_every_answer = on;
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn config(&self) -> &LoopConfig {
        &self.config
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn phase(&self) -> RoundPhase {
        self.state.phase
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.state.ledger
    }

    pub fn working_labels(&self) -> &[LabelMap] {
        &self.working
    }

    pub fn probs(&self) -> &[ProbMap] {
        &self.probs
    }

    pub fn queries(&self) -> &[CorrectionQuery] {
        &self.queries
    }

    pub fn answer(&self, query_id: &str) -> Option<&QueryAnswer> {
        self.answers.get(query_id)
    }

    pub fn query_log(&self) -> &[QueryRecord] {
        &self.log
    }

    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.metrics
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out_dir.as_deref()
    }

    pub fn export_dir(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(EXPORT_DIR))
    }

    pub fn summary(&self) -> SessionSummary {
        let answered = self
            .queries
            .iter()
            .filter(|q| q.status == QueryStatus::Answered)
            .count();
        SessionSummary {
            round: self.state.round,
            rounds: self.config.rounds,
            phase: self.state.phase,
            batch_size: self.config.batch_size,
            queries_issued: self.queries.len(),
            queries_pending: self.queries.len() - answered,
            queries_answered: answered,
            ledger: self.state.ledger.clone(),
            epsilon: self.config.epsilon,
            kind: self.config.kind,
        }
    }

    /// The queried segment, restricted to non-ignore pixels.
    pub fn query_segment(&self, query: &CorrectionQuery) -> Option<Superpixel> {
        let k = self.dataset.image_position(&query.pixel.image_id)?;
        self.dataset.images[k]
            .partition
            .eligible_superpixel(query.segment_id, &self.working[k], self.dataset.ignore)
    }

    fn round_dir(&self, round: u32) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(round_dir_name(round)))
    }

    fn write_labels(&self) -> Result<(), SessionError> {
        if let Some(dir) = self.round_dir(self.state.round) {
            write_round_labels(&dir, &self.working)?;
        }
        Ok(())
    }

    /// Obtains predictions for the current round's labels. Returns `false`
    /// when an external predictor has not delivered yet.
    pub fn refresh_predictions(&mut self) -> Result<bool, SessionError> {
        if self.state.phase != RoundPhase::AwaitingPredictions {
            return Err(SessionError::WrongPhase(self.state.phase));
        }
        let c = self.dataset.num_classes();
        let shapes = shapes(&self.dataset);
        match &self.config.predictor {
            PredictorConfig::Builtin => {
                let train: Vec<TrainImage<'_>> = self
                    .dataset
                    .images
                    .iter()
                    .zip(&self.working)
                    .map(|(img, labels)| TrainImage { rgb: &img.rgb, labels })
                    .collect();
                let model = fit(&train, c, self.dataset.ignore)?;
                self.probs = self
                    .dataset
                    .images
                    .iter()
                    .map(|img| model.predict(&img.image_id, &img.rgb, img.width, img.height))
                    .collect();
            }
            PredictorConfig::External { command } => {
                let dir = self.round_dir(self.state.round).expect("checked at construction");
                let result = match command {
                    Some(cmd) => external_round_exchange(&dir, Some(cmd), &shapes, c),
                    None => ingest_round_probs(&dir, &shapes, c),
                };
                match result {
                    Ok(p) => self.probs = p,
                    Err(PredictorError::MissingProbs(_)) if command.is_none() => {
                        self.checkpoint()?;
                        return Ok(false);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        self.predictions_ready()?;
        Ok(true)
    }

    fn predictions_ready(&mut self) -> Result<(), SessionError> {
        if let Some(dir) = self.round_dir(self.state.round) {
            if !matches!(self.config.predictor, PredictorConfig::External { .. }) {
                write_round_probs(&dir, &self.probs)?;
            }
        }
        if self.state.round >= self.config.rounds {
            self.finish()?;
        } else {
            self.state.phase = RoundPhase::Ready;
            self.checkpoint()?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<(), SessionError> {
        self.state.phase = RoundPhase::Finished;
        if let Some(dir) = self.export_dir() {
            self.dataset.write(&dir, Some(&self.working))?;
        }
        self.checkpoint()
    }

    /// Builds the pool, scores it, and issues the next batch of queries.
    pub fn begin_round(&mut self) -> Result<&[CorrectionQuery], SessionError> {
        if self.state.phase != RoundPhase::Ready {
            return Err(SessionError::WrongPhase(self.state.phase));
        }
        let ignore = self.dataset.ignore;
        let images: Vec<PoolImage<'_>> = self
            .dataset
            .images
            .iter()
            .zip(&self.working)
            .zip(&self.probs)
            .map(|((img, labels), probs)| PoolImage {
                partition: &img.partition,
                probs: Some(probs),
                labels,
            })
            .collect();
        let pool = build_pool(&images, &self.state.corrected, ignore)?;
        if pool.is_empty() {
            // every segment has been corrected already
            self.queries.clear();
            self.answers.clear();
            self.finish()?;
            return Ok(&self.queries);
        }
        let round = self.state.round + 1;

        let segments: Vec<Superpixel> = pool
            .iter()
            .map(|e| {
                let k = self
                    .dataset
                    .image_position(&e.pixel.image_id)
                    .expect("pool images come from dataset");
                self.dataset.images[k]
                    .partition
                    .eligible_superpixel(e.segment_id, &self.working[k], ignore)
                    .expect("pool segments are eligible")
            })
            .collect();
        let inputs: Vec<ScoringInput<'_>> = pool
            .iter()
            .zip(&segments)
            .map(|(entry, segment)| {
                let k = self.dataset.image_position(&entry.pixel.image_id).unwrap();
                ScoringInput {
                    entry,
                    segment,
                    probs: &self.probs[k],
                    labels: &self.working[k],
                }
            })
            .collect();
        let scores = score_pool(self.config.kind, round, &inputs, ignore)?;
        let keys: Vec<_> = pool.iter().map(|e| e.key()).collect();
        let picked = select_batch(&keys, &scores, self.config.batch_size)?;

        if let Some(dir) = self.round_dir(round) {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let p = dir.join("pool.csv");
            fs::write(&p, pool_csv(&pool)).map_err(io_err(&p))?;
            let p = dir.join("scores.csv");
            fs::write(&p, score_csv(self.config.kind, &keys, &scores)).map_err(io_err(&p))?;
        }

        let mut queries = Vec::with_capacity(picked.len());
        for (n, &i) in picked.iter().enumerate() {
            let entry = &pool[i];
            let k = self.dataset.image_position(&entry.pixel.image_id).unwrap();
            queries.push(CorrectionQuery {
                query_id: format!("r{round:03}-q{n:05}"),
                round,
                sequence: self.state.queries_issued + n as u64,
                pixel: entry.pixel.clone(),
                pixel_index: entry.pixel_index,
                segment_id: entry.segment_id,
                pseudo_label: self.working[k].get(entry.pixel_index as usize),
                status: QueryStatus::Pending,
            });
        }
        self.state.round = round;
        self.state.queries_issued += queries.len() as u64;
        self.state.pool = pool
            .iter()
            .zip(&scores)
            .map(|(e, &s)| PoolRecord {
                image_id: e.pixel.image_id.clone(),
                segment_id: e.segment_id,
                x: e.pixel.x,
                y: e.pixel.y,
                score: s as f32,
            })
            .collect();
        self.state.batch = queries.iter().map(|q| q.pixel.clone()).collect();
        self.state.phase = RoundPhase::Querying;
        self.queries = queries;
        self.answers.clear();
        self.checkpoint()?;
        Ok(&self.queries)
    }

    /// Records the first valid answer to a query.
    pub fn submit_answer(
        &mut self,
        query_id: &str,
        verdict: Verdict,
        annotator_id: &str,
        answered_at: u64,
    ) -> Result<&BudgetLedger, SessionError> {
        if self.state.phase != RoundPhase::Querying {
            return Err(SessionError::WrongPhase(self.state.phase));
        }
        let pos = self
            .queries
            .iter()
            .position(|q| q.query_id == query_id)
            .ok_or_else(|| SessionError::UnknownQuery(query_id.to_string()))?;
        let query = &self.queries[pos];
        if query.status == QueryStatus::Answered {
            return Err(AnswerError::StaleAnswer(query.pixel.image_id.clone(), query.segment_id).into());
        }
        check_verdict(
            &verdict,
            query.pseudo_label,
            self.dataset.num_classes(),
            self.dataset.ignore,
        )?;
        self.state.ledger = record_query(&self.state.ledger, &verdict, self.dataset.num_classes());
        self.queries[pos].status = QueryStatus::Answered;
        self.answers.insert(
            query_id.to_string(),
            QueryAnswer {
                query_id: query_id.to_string(),
                verdict,
                annotator_id: annotator_id.to_string(),
                answered_at,
            },
        );
        if self.checkpoint_every_answer {
            self.checkpoint()?;
        }
        Ok(&self.state.ledger)
    }

    /// Applies the round's answers in query-id order, then retrains.
    pub fn complete_round(&mut self) -> Result<(), SessionError> {
        if self.state.phase != RoundPhase::Querying {
            return Err(SessionError::WrongPhase(self.state.phase));
        }
        let outstanding = self
            .queries
            .iter()
            .filter(|q| q.status != QueryStatus::Answered)
            .count();
        if outstanding > 0 {
            return Err(SessionError::OutstandingQueries(outstanding));
        }
        let mut order: Vec<usize> = (0..self.queries.len()).collect();
        order.sort_by(|&a, &b| self.queries[a].query_id.cmp(&self.queries[b].query_id));
        let c = self.dataset.num_classes();
        for i in order {
            let query = self.queries[i].clone();
            let verdict = self.answers[&query.query_id].verdict;
            let k = self
                .dataset
                .image_position(&query.pixel.image_id)
                .ok_or_else(|| SessionError::Corrupt(format!("unknown image {}", query.pixel.image_id)))?;
            let segment = self
                .query_segment(&query)
                .ok_or_else(|| SessionError::Corrupt(format!("segment {} vanished", query.segment_id)))?;
            expand_label(
                &query,
                &verdict,
                &segment,
                &self.probs[k],
                self.config.epsilon,
                self.config.expand_confirmed,
                &mut self.working[k],
                &mut self.state.corrected,
            )?;
            self.log.push(QueryRecord::new(&query, &verdict, c));
        }
        self.state.phase = RoundPhase::AwaitingPredictions;
        self.write_labels()?;
        self.record_metrics()?;
        self.write_log()?;
        self.refresh_predictions()?;
        Ok(())
    }

    /// Drives the run with the simulated oracle until it finishes, or pauses
    /// once `stop_after` rounds are complete.
    pub fn run_simulated(&mut self, stop_after: Option<u32>) -> Result<(), SessionError> {
        loop {
            match self.state.phase {
                RoundPhase::Finished => return Ok(()),
                RoundPhase::AwaitingPredictions => {
                    if !self.refresh_predictions()? {
                        let dir = self.round_dir(self.state.round).unwrap_or_default();
                        return Err(SessionError::InterruptedResumable {
                            round: self.state.round,
                            reason: format!(
                                "write predictions to {}/probs/<image_id>.alct, then resume",
                                dir.display()
                            ),
                        });
                    }
                }
                RoundPhase::Ready => {
                    if stop_after.is_some_and(|s| self.state.round >= s) {
                        return Err(SessionError::InterruptedResumable {
                            round: self.state.round,
                            reason: "stop requested".into(),
                        });
                    }
                    self.begin_round()?;
                }
                RoundPhase::Querying => {
                    self.answer_with_oracle()?;
                    self.complete_round()?;
                }
            }
        }
    }

    fn answer_with_oracle(&mut self) -> Result<(), SessionError> {
        let c = self.dataset.num_classes();
        let pending: Vec<CorrectionQuery> = self
            .queries
            .iter()
            .filter(|q| q.status == QueryStatus::Pending)
            .cloned()
            .collect();
        for q in pending {
            let gt = self.dataset.image(&q.pixel.image_id).and_then(|i| i.gt.as_ref());
            let answer = simulated_answer(&q, gt, &self.config.oracle, c, self.dataset.ignore)?;
            self.submit_answer(&q.query_id, answer.verdict, &answer.annotator_id, answer.answered_at)?;
        }
        Ok(())
    }

    fn record_metrics(&mut self) -> Result<(), SessionError> {
        let m = self.compute_metrics();
        self.metrics.retain(|r| r.round != m.round);
        self.metrics.push(m);
        if let Some(dir) = &self.out_dir {
            let path = dir.join(METRICS_FILE);
            let mut text = serde_json::to_string_pretty(&self.metrics).expect("metrics serialize");
            text.push('\n');
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        Ok(())
    }

    fn compute_metrics(&self) -> RoundMetrics {
        let c = self.dataset.num_classes();
        let ignore = self.dataset.ignore;
        let hist = corrected_class_histogram(self.log.iter().map(|r| &r.corrected_label));
        let mut m = RoundMetrics {
            round: self.state.round,
            clicks: self.state.ledger.clicks_spent,
            bits: self.state.ledger.bits_spent,
            precision: None,
            recall: None,
            f1: None,
            data_accuracy: None,
            data_miou: None,
            per_class_iou: BTreeMap::new(),
            corrected_histogram: hist,
        };
        if !self.dataset.has_ground_truth() {
            return m;
        }
        let mut footprint: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.dataset.images.len()];
        for r in &self.log {
            if let Some(k) = self.dataset.image_position(&r.image_id) {
                if let Some(px) = self.dataset.images[k].partition.segment_pixels(r.segment_id) {
                    footprint[k].extend(px.iter().map(|&i| i as usize));
                }
            }
        }
        let mut cm = ConfusionMatrix::new(c);
        let mut det = DetectionCounts::default();
        for (k, img) in self.dataset.images.iter().enumerate() {
            let gt = img.gt.as_ref().expect("checked above");
            cm.accumulate(&self.working[k], gt, ignore)
                .expect("aligned by construction");
            det.merge(&detection_counts_mask(&footprint[k], &img.pseudo, gt, ignore));
        }
        let iou = cm.report();
        let d = det.report();
        m.precision = Some(d.precision);
        m.recall = Some(d.recall);
        m.f1 = Some(d.f1);
        m.data_accuracy = Some(iou.pixel_accuracy);
        m.data_miou = Some(iou.mean_iou);
        m.per_class_iou = iou.per_class_iou;
        m
    }

    fn write_log(&self) -> Result<(), SessionError> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let path = dir.join(QUERY_LOG_FILE);
        let mut text = String::new();
        for r in &self.log {
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
            text.push('\n');
        }
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn checkpoint(&self) -> Result<(), SessionError> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let manifest = match &self.manifest_path {
            Some(p) => fs::canonicalize(p).unwrap_or_else(|_| p.clone()),
            None => return Ok(()),
        };
        let probs_dir =
            (self.state.phase != RoundPhase::AwaitingPredictions).then(|| round_dir_name(self.probs_round()));
        let cp = Checkpoint {
            manifest,
            config: self.config.clone(),
            state: self.state.clone(),
            labels_dir: round_dir_name(self.labels_round()),
            probs_dir,
            queries: self.queries.clone(),
            answers: self.answers.values().cloned().collect(),
        };
        let path = dir.join(CHECKPOINT_FILE);
        let tmp = dir.join(format!("{CHECKPOINT_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(&cp).expect("checkpoint serializes");
        text.push('\n');
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }

    /// Round whose label files hold the current working labels.
    fn labels_round(&self) -> u32 {
        match self.state.phase {
            // labels are only rewritten when a round completes
            RoundPhase::Querying => self.state.round - 1,
            _ => self.state.round,
        }
    }

    fn probs_round(&self) -> u32 {
        self.labels_round()
    }
}

fn shapes(dataset: &Dataset) -> Vec<ProbShape> {
    dataset
        .images
        .iter()
        .map(|i| ProbShape {
            image_id: i.image_id.clone(),
            width: i.width,
            height: i.height,
        })
        .collect()
}

pub fn read_log(path: &Path) -> Result<Vec<QueryRecord>, SessionError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| SessionError::Corrupt(format!("{}: {e}", path.display()))))
        .collect()
}

/// Where the prediction files for `round` live inside a run directory.
pub fn prediction_file(out_dir: &Path, round: u32, image_id: &str) -> PathBuf {
    prob_path(&out_dir.join(round_dir_name(round)), image_id)
}
