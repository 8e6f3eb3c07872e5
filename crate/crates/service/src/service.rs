//! The triage loop: ingest frames, score windows, queue uncertain ones,
//! accept labels, retrain on base data plus labels, swap the model.
//!
//! Locking: the active model sits behind an [`ArcSwap`], so scoring never
//! waits on retraining. Windowing and ledger updates happen under one
//! mutex; inference runs outside it.

use crate::config::ServiceConfig;
use crate::store::{Event, ItemStatus, Ledger, Rejection, Store, StoreError, TriageItem};
use arc_swap::ArcSwap;
use bayescan::can::FrameRecord;
use bayescan::checkpoint::Checkpoint;
use bayescan::features::{split_dataset, EncodedDataset, LabelRule, StreamWindower};
use bayescan::model::{InitConfig, ModelState};
use bayescan::train::{train_with, AdamConfig, EpochMetrics, TrainConfig, TrainError};
use bayescan::uncertainty::{predict_batch, triage_decide, PredictionRecord};
use bayescan::{derive_seed, CanFrame, ClassLabel, FeatureWindow, Mode, ModelSpec, TriagePolicy, WindowConfig};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};
use thiserror::Error;

pub const API_VERSION: u32 = 1;
pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;
pub const MAX_STREAM_NAME: usize = 64;

#[derive(Debug, Error)]
pub enum ServiceError {
    /// Malformed request syntax.
    #[error("{0}")]
    BadRequest(String),
    /// Well-formed request with unusable content.
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    TooLarge(String),
    #[error("{0}")]
    Unauthorized(String),
    #[error("{0}")]
    Internal(String),
}

impl From<StoreError> for ServiceError {
    fn from(e: StoreError) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

impl From<Rejection> for ServiceError {
    fn from(e: Rejection) -> Self {
        match e {
            Rejection::UnknownItem(_) => ServiceError::NotFound(e.to_string()),
            Rejection::NotPending { .. } | Rejection::DuplicateItem(_) | Rejection::VersionOrder { .. } => {
                ServiceError::Conflict(e.to_string())
            }
        }
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// The model currently answering requests.
#[derive(Debug)]
pub struct ActiveModel {
    pub version: u64,
    pub state: ModelState,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    pub window_id: u64,
    pub stream: String,
    /// Index of the window's first frame within its stream.
    pub start: u64,
    pub prediction: PredictionRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triage_item: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub model_version: u64,
    pub frames: usize,
    pub windows_formed: usize,
    /// Frames held for the next window of this stream.
    pub buffered: usize,
    pub results: Vec<WindowResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriagePage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<TriageItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusFilter {
    Pending,
    Labeled,
    Dismissed,
    All,
}

impl StatusFilter {
    fn admits(self, status: &ItemStatus) -> bool {
        match self {
            StatusFilter::All => true,
            StatusFilter::Pending => matches!(status, ItemStatus::Pending),
            StatusFilter::Labeled => matches!(status, ItemStatus::Labeled { .. }),
            StatusFilter::Dismissed => matches!(status, ItemStatus::Dismissed { .. }),
        }
    }
}

/// Per-job overrides of [`crate::config::RetrainDefaults`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainRequest {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub val_fraction: Option<f64>,
    pub warm_start: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Running { epoch: usize, epochs: usize },
    Succeeded { version: u64 },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainJob {
    pub id: u64,
    #[serde(flatten)]
    pub state: JobState,
    pub started_at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at_ms: Option<u64>,
    pub base_windows: usize,
    pub labeled_windows: usize,
    pub train_windows: usize,
    pub val_windows: usize,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub version: u64,
    pub mode: Mode,
    pub spec: ModelSpec,
    pub param_count: usize,
    pub policy: TriagePolicy,
    pub window_len: usize,
    pub mc_samples: usize,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: u64,
    pub pending: usize,
    pub labeled: usize,
    pub retrain_running: bool,
}

struct Book {
    ledger: Ledger,
    store: Option<Store>,
    windowers: HashMap<String, StreamWindower>,
}

impl Book {
    fn commit(&mut self, event: Event) -> Result<(), ServiceError> {
        self.ledger.apply(&event)?;
        if let Some(store) = &mut self.store {
            store.append(&event, &self.ledger)?;
        }
        Ok(())
    }
}

pub struct Service {
    cfg: ServiceConfig,
    model: ArcSwap<ActiveModel>,
    book: Mutex<Book>,
    jobs: Arc<Mutex<BTreeMap<u64, RetrainJob>>>,
    retraining: AtomicBool,
    base: Vec<FeatureWindow>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn check_window_len(cfg: &ServiceConfig, spec: &ModelSpec) -> Result<(), ServiceError> {
    if spec.input[1] != cfg.window_len {
        return Err(ServiceError::Internal(format!(
            "model expects windows of {} frames, service is configured for {}",
            spec.input[1], cfg.window_len
        )));
    }
    Ok(())
}

impl Service {
    /// Build from the config: recover the store, load base data, and load
    /// the model (the store's active version, else `model_path`).
    pub fn from_config(cfg: ServiceConfig) -> Result<Arc<Service>, ServiceError> {
        let initial = match &cfg.model_path {
            Some(p) => {
                Some(Checkpoint::read_file(p).map_err(|e| ServiceError::Internal(format!("{}: {e}", p.display())))?)
            }
            None => None,
        };
        let base = match &cfg.base_data {
            Some(p) => read_base(p)?,
            None => Vec::new(),
        };
        Service::new(cfg, initial, base)
    }

    /// `initial` is activated as version 1 when the store holds no model.
    pub fn new(
        cfg: ServiceConfig,
        initial: Option<Checkpoint>,
        base: Vec<FeatureWindow>,
    ) -> Result<Arc<Service>, ServiceError> {
        cfg.validate().map_err(|e| ServiceError::Internal(e.to_string()))?;
        if let Some(w) = base.iter().find(|w| w.window_len() != cfg.window_len) {
            return Err(ServiceError::Internal(format!(
                "base data window length {} differs from {}",
                w.window_len(),
                cfg.window_len
            )));
        }
        let (store, ledger) = match &cfg.store_path {
            Some(dir) => {
                let (s, l) = Store::open(dir, cfg.snapshot_every)?;
                (Some(s), l)
            }
            None => (None, Ledger::default()),
        };
        let mut book = Book {
            ledger,
            store,
            windowers: HashMap::new(),
        };
        let active = if book.ledger.model_version > 0 {
            let version = book.ledger.model_version;
            let ck = match &book.store {
                Some(s) => s.load_model(version)?,
                None => unreachable!("in-memory ledgers start at version 0"),
            };
            if initial.is_some() {
                tracing::info!(version, "store holds an active model; ignoring the configured model");
            }
            ActiveModel {
                version,
                state: ck.state,
                metrics: ck.metrics,
            }
        } else {
            let ck = initial.ok_or_else(|| ServiceError::Internal("no model: set model_path".into()))?;
            if let Some(s) = &book.store {
                s.save_model(1, &ck)?;
            }
            book.commit(Event::ModelActivated {
                version: 1,
                at_ms: now_ms(),
            })?;
            ActiveModel {
                version: 1,
                state: ck.state,
                metrics: ck.metrics,
            }
        };
        check_window_len(&cfg, &active.state.spec)?;
        tracing::info!(
            version = active.version,
            mode = ?active.state.mode(),
            items = book.ledger.items.len(),
            labeled = book.ledger.labeled.len(),
            base = base.len(),
            "service ready"
        );
        Ok(Arc::new(Service {
            cfg,
            model: ArcSwap::from_pointee(active),
            book: Mutex::new(book),
            jobs: Arc::new(Mutex::new(BTreeMap::new())),
            retraining: AtomicBool::new(false),
            base,
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn active_model(&self) -> Arc<ActiveModel> {
        self.model.load_full()
    }

    /// Copy of the current ledger.
    pub fn ledger(&self) -> Ledger {
        lock(&self.book).ledger.clone()
    }

    /// Window frames, score every completed window with one model version,
    /// and queue the flagged ones.
    pub fn ingest(&self, stream: &str, records: &[FrameRecord]) -> Result<IngestOutcome, ServiceError> {
        if stream.is_empty() || stream.len() > MAX_STREAM_NAME {
            return Err(ServiceError::Unprocessable(format!(
                "stream name must have 1..={MAX_STREAM_NAME} bytes"
            )));
        }
        if records.len() > self.cfg.max_frames_per_request {
            return Err(ServiceError::TooLarge(format!(
                "{} frames exceed the limit of {}",
                records.len(),
                self.cfg.max_frames_per_request
            )));
        }
        let frames = records
            .iter()
            .enumerate()
            .map(|(i, r)| CanFrame::try_from(r).map_err(|e| ServiceError::BadRequest(format!("frame {i}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let model = self.model.load_full();

        let (cut, first_id, buffered) = {
            let mut book = lock(&self.book);
            let wcfg = WindowConfig {
                window_len: self.cfg.window_len,
                stride: self.cfg.stride,
                label_rule: LabelRule::AnyInjected,
            };
            if !book.windowers.contains_key(stream) {
                let w = StreamWindower::new(wcfg, 0).map_err(|e| ServiceError::Internal(e.to_string()))?;
                book.windowers.insert(stream.to_string(), w);
            }
            let windower = book.windowers.get_mut(stream).expect("inserted");
            let cut: Vec<(FeatureWindow, Vec<CanFrame>)> =
                frames.into_iter().filter_map(|f| windower.push(f)).collect();
            let buffered = windower.buffered();
            let first_id = book.ledger.next_window_id;
            if !cut.is_empty() {
                book.commit(Event::WindowsSeen {
                    next_window_id: first_id + cut.len() as u64,
                })?;
            }
            (cut, first_id, buffered)
        };

        let refs: Vec<&FeatureWindow> = cut.iter().map(|(w, _)| w).collect();
        let summaries = if refs.is_empty() {
            Vec::new()
        } else {
            predict_batch(&model.state, &refs, self.cfg.mc_samples, self.mc_seed(model.version))
                .map_err(|e| ServiceError::Internal(e.to_string()))?
        };

        let mut results = Vec::with_capacity(cut.len());
        let mut flagged = Vec::new();
        for (i, ((w, win_frames), s)) in cut.into_iter().zip(&summaries).enumerate() {
            let window_id = first_id + i as u64;
            let decision = triage_decide(s, &self.cfg.policy);
            let prediction = PredictionRecord::new(window_id, s, &decision, None);
            if decision.is_flagged() {
                flagged.push((results.len(), win_frames));
            }
            results.push(WindowResult {
                window_id,
                stream: stream.to_string(),
                start: w.origin.start,
                prediction,
                triage_item: None,
            });
        }
        if !flagged.is_empty() {
            let mut book = lock(&self.book);
            let at_ms = now_ms();
            for (idx, win_frames) in flagged {
                let id = book.ledger.next_item_id;
                let r = &mut results[idx];
                let item = TriageItem {
                    id,
                    window_id: r.window_id,
                    stream: stream.to_string(),
                    model_version: model.version,
                    created_at_ms: at_ms,
                    frames: win_frames.iter().map(FrameRecord::from).collect(),
                    prediction: r.prediction.clone(),
                    status: ItemStatus::Pending,
                };
                book.commit(Event::ItemCreated { item: Box::new(item) })?;
                r.triage_item = Some(id);
            }
        }
        let queued = results.iter().filter(|r| r.triage_item.is_some()).count();
        tracing::debug!(stream, windows = results.len(), queued, "ingested");
        Ok(IngestOutcome {
            model_version: model.version,
            frames: records.len(),
            windows_formed: results.len(),
            buffered,
            results,
        })
    }

    /// MC root seed for a model version.
    pub fn mc_seed(&self, version: u64) -> u64 {
        derive_seed(self.cfg.seed, version)
    }

    /// Items matching `filter`, oldest first.
    pub fn triage_page(&self, filter: StatusFilter, offset: usize, limit: usize) -> Result<TriagePage, ServiceError> {
        if limit == 0 || limit > MAX_PAGE {
            return Err(ServiceError::BadRequest(format!("limit must be in 1..={MAX_PAGE}")));
        }
        let book = lock(&self.book);
        let matching = book.ledger.items.values().filter(|it| filter.admits(&it.status));
        let total = matching.clone().count();
        let items = matching.skip(offset).take(limit).cloned().collect();
        Ok(TriagePage {
            total,
            offset,
            limit,
            items,
        })
    }

    pub fn item(&self, id: u64) -> Result<TriageItem, ServiceError> {
        lock(&self.book)
            .ledger
            .items
            .get(&id)
            .cloned()
            .ok_or_else(|| Rejection::UnknownItem(id).into())
    }

    pub fn label(&self, id: u64, label: ClassLabel, engineer: &str) -> Result<TriageItem, ServiceError> {
        let mut book = lock(&self.book);
        book.commit(Event::Labeled {
            id,
            label,
            engineer: engineer.to_string(),
            at_ms: now_ms(),
        })?;
        tracing::info!(id, %label, engineer, "labeled");
        Ok(book.ledger.items[&id].clone())
    }

    pub fn dismiss(&self, id: u64) -> Result<TriageItem, ServiceError> {
        let mut book = lock(&self.book);
        book.commit(Event::Dismissed { id, at_ms: now_ms() })?;
        Ok(book.ledger.items[&id].clone())
    }

    pub fn job(&self, id: u64) -> Result<RetrainJob, ServiceError> {
        lock(&self.jobs)
            .get(&id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no retrain job {id}")))
    }

    pub fn model_info(&self) -> ModelInfo {
        let m = self.model.load();
        ModelInfo {
            version: m.version,
            mode: m.state.mode(),
            spec: m.state.spec.clone(),
            param_count: m.state.spec.param_count().unwrap_or(0),
            policy: self.cfg.policy,
            window_len: self.cfg.window_len,
            mc_samples: self.cfg.mc_samples,
            metrics: m.metrics.clone(),
        }
    }

    pub fn health(&self) -> Health {
        let book = lock(&self.book);
        Health {
            status: "ok".into(),
            model_version: self.model.load().version,
            pending: book
                .ledger
                .items
                .values()
                .filter(|i| i.status == ItemStatus::Pending)
                .count(),
            labeled: book.ledger.labeled.len(),
            retrain_running: self.retraining.load(Ordering::SeqCst),
        }
    }

    /// Start a background retrain on base data plus every labeled window.
    /// One job runs at a time.
    pub fn start_retrain(self: &Arc<Self>, req: &RetrainRequest) -> Result<RetrainJob, ServiceError> {
        let d = &self.cfg.retrain;
        let epochs = req.epochs.unwrap_or(d.epochs);
        let batch_size = req.batch_size.unwrap_or(d.batch_size);
        let lr = req.lr.unwrap_or(d.lr);
        let val_fraction = req.val_fraction.unwrap_or(d.val_fraction);
        let warm_start = req.warm_start.unwrap_or(d.warm_start);
        if epochs == 0 || batch_size == 0 || !(lr > 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&val_fraction) {
            return Err(ServiceError::Unprocessable(
                "epochs and batch_size must be positive, lr positive, val_fraction in [0, 1)".into(),
            ));
        }
        if self.retraining.swap(true, Ordering::SeqCst) {
            return Err(ServiceError::Conflict("a retrain job is already running".into()));
        }
        let prepared = self.prepare_retrain(val_fraction);
        let (train_set, val_set, labeled) = match prepared {
            Ok(p) => p,
            Err(e) => {
                self.retraining.store(false, Ordering::SeqCst);
                return Err(e);
            }
        };
        let active = self.model.load_full();
        let version = active.version + 1;
        let tcfg = TrainConfig {
            epochs,
            batch_size,
            adam: AdamConfig {
                lr,
                ..Default::default()
            },
            seed: derive_seed(self.cfg.seed, version),
            val_samples: d.val_samples,
            ..Default::default()
        };
        let start = if warm_start {
            let mut s = active.state.clone();
            s.epoch = 0;
            s
        } else {
            match ModelState::init(
                active.state.spec.clone(),
                &InitConfig::default(),
                active.state.prior,
                tcfg.seed,
            ) {
                Ok(s) => s,
                Err(e) => {
                    self.retraining.store(false, Ordering::SeqCst);
                    return Err(ServiceError::Internal(e.to_string()));
                }
            }
        };
        let job = {
            let mut jobs = lock(&self.jobs);
            let id = jobs.keys().next_back().map_or(1, |k| k + 1);
            let job = RetrainJob {
                id,
                state: JobState::Running { epoch: 0, epochs },
                started_at_ms: now_ms(),
                finished_at_ms: None,
                base_windows: self.base.len(),
                labeled_windows: labeled,
                train_windows: train_set.len(),
                val_windows: val_set.len(),
                metrics: Vec::new(),
            };
            jobs.insert(id, job.clone());
            job
        };
        tracing::info!(
            job = job.id,
            labeled,
            train = train_set.len(),
            val = val_set.len(),
            epochs,
            "retrain started"
        );
        let svc = Arc::clone(self);
        let id = job.id;
        std::thread::spawn(move || {
            let jobs = Arc::clone(&svc.jobs);
            let progress = |m: &EpochMetrics| {
                if let Some(j) = lock(&jobs).get_mut(&id) {
                    j.metrics.push(*m);
                    j.state = JobState::Running { epoch: m.epoch, epochs };
                }
                true
            };
            let result = train_with(start, &train_set, &val_set, &tcfg, progress);
            let state = match result {
                Ok(out) => svc.activate(out.best, out.metrics, &tcfg),
                Err(e) => Err(train_failure(e)),
            };
            if let Some(j) = lock(&svc.jobs).get_mut(&id) {
                j.finished_at_ms = Some(now_ms());
                j.state = match &state {
                    Ok(v) => JobState::Succeeded { version: *v },
                    Err(e) => JobState::Failed { error: e.to_string() },
                };
            }
            match state {
                Ok(v) => tracing::info!(job = id, version = v, "retrain finished"),
                Err(e) => tracing::warn!(job = id, error = %e, "retrain failed"),
            }
            svc.retraining.store(false, Ordering::SeqCst);
        });
        Ok(job)
    }

    fn prepare_retrain(
        &self,
        val_fraction: f64,
    ) -> Result<(Vec<FeatureWindow>, Vec<FeatureWindow>, usize), ServiceError> {
        let labeled = lock(&self.book)
            .ledger
            .labeled_windows()
            .map_err(ServiceError::Internal)?;
        let n_labeled = labeled.len();
        let mut union = self.base.clone();
        union.extend(labeled);
        if union.is_empty() {
            return Err(ServiceError::Unprocessable(
                "no base data and no labeled windows to train on".into(),
            ));
        }
        let split = split_dataset(
            union,
            (1.0 - val_fraction, val_fraction, 0.0),
            derive_seed(self.cfg.seed, 0x5e1),
        )
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
        let (train, val) = if split.val.is_empty() {
            (split.train.clone(), split.train)
        } else {
            (split.train, split.val)
        };
        if train.is_empty() {
            return Err(ServiceError::Unprocessable(
                "validation split leaves no training windows".into(),
            ));
        }
        Ok((train, val, n_labeled))
    }

    /// Persist and publish a new model version.
    fn activate(&self, state: ModelState, metrics: Vec<EpochMetrics>, tcfg: &TrainConfig) -> Result<u64, ServiceError> {
        let mut book = lock(&self.book);
        let version = book.ledger.model_version + 1;
        if let Some(store) = &book.store {
            store.save_model(
                version,
                &Checkpoint::new(state.clone(), Some(tcfg.clone()), metrics.clone()),
            )?;
        }
        book.commit(Event::ModelActivated {
            version,
            at_ms: now_ms(),
        })?;
        self.model.store(Arc::new(ActiveModel {
            version,
            state,
            metrics,
        }));
        Ok(version)
    }
}

fn train_failure(e: TrainError) -> ServiceError {
    match e {
        TrainError::Numerical { epoch, batch, .. } => {
            ServiceError::Internal(format!("training diverged at epoch {epoch}, batch {batch}"))
        }
        other => ServiceError::Internal(other.to_string()),
    }
}

fn read_base(path: &Path) -> Result<Vec<FeatureWindow>, ServiceError> {
    let f = std::fs::File::open(path).map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
    let ds = EncodedDataset::read_from(std::io::BufReader::new(f))
        .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
    Ok(ds.windows)
}
