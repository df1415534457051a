//! Worker responses, their aggregation into core/spurious labels and
//! heatmap validations, and the append-only response store behind the
//! annotation API.
//!
//! Aggregation rules:
//! - core/spurious: a feature is spurious iff strictly more than half of the
//!   responses answer `separate_object` or `background`. Ties are core.
//! - validation (five workers): validated iff at least four answer `same`
//!   for the cross-panel question, at least four do not answer `different`,
//!   and every one of the fifteen heatmaps is left unflagged by at least four.
//!
//! Confidence and free-text reasons are stored but never enter a rule.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::importance::{AnnotationTask, AnnotationTaskBundle, TaskKind};

pub const HEATMAPS_PER_TASK: usize = 15;
pub const VALIDATION_WORKERS: usize = 5;
pub const VALIDATION_THRESHOLD: usize = 4;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("cannot aggregate: {0}")]
    Aggregation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid response: {0}")]
    Invalid(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt response log {path} line {line}: {message}")]
    CorruptLog {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, AnnotationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    MainObject,
    SeparateObject,
    Background,
}

impl Answer {
    pub const ALL: [Answer; 3] = [Answer::MainObject, Answer::SeparateObject, Answer::Background];

    pub fn votes_spurious(&self) -> bool {
        !matches!(self, Answer::MainObject)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreSpuriousResponse {
    pub task_id: String,
    pub worker_id: String,
    pub answer: Answer,
    #[serde(default)]
    pub reasons: String,
    pub confidence: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossPanel {
    Same,
    Different,
    Unclear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationResponse {
    pub task_id: String,
    pub worker_id: String,
    /// One flag per heatmap: true when the worker judged it to look
    /// different from at least three others in its panel.
    pub heatmap_flags: Vec<bool>,
    pub cross_panel: CrossPanel,
    #[serde(default)]
    pub reasons: String,
    pub confidence: u8,
}

/// Either kind of response, tagged by `type` on the wire and in the log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    CoreSpurious(CoreSpuriousResponse),
    Validation(ValidationResponse),
}

impl Response {
    pub fn task_id(&self) -> &str {
        match self {
            Response::CoreSpurious(r) => &r.task_id,
            Response::Validation(r) => &r.task_id,
        }
    }

    pub fn worker_id(&self) -> &str {
        match self {
            Response::CoreSpurious(r) => &r.worker_id,
            Response::Validation(r) => &r.worker_id,
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Response::CoreSpurious(_) => TaskKind::CoreSpurious,
            Response::Validation(_) => TaskKind::Validation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let confidence = match self {
            Response::CoreSpurious(r) => r.confidence,
            Response::Validation(r) => {
                if r.heatmap_flags.len() != HEATMAPS_PER_TASK {
                    return Err(AnnotationError::Invalid(format!(
                        "expected {HEATMAPS_PER_TASK} heatmap flags, found {}",
                        r.heatmap_flags.len()
                    )));
                }
                r.confidence
            }
        };
        if !(1..=5).contains(&confidence) {
            return Err(AnnotationError::Invalid(format!(
                "confidence must be in 1..=5, found {confidence}"
            )));
        }
        if self.worker_id().trim().is_empty() {
            return Err(AnnotationError::Invalid("worker_id is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Core,
    Spurious,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteCounts {
    pub main_object: usize,
    pub separate_object: usize,
    pub background: usize,
}

impl VoteCounts {
    pub fn add(&mut self, answer: Answer) {
        match answer {
            Answer::MainObject => self.main_object += 1,
            Answer::SeparateObject => self.separate_object += 1,
            Answer::Background => self.background += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.main_object + self.separate_object + self.background
    }

    pub fn label(&self) -> Label {
        if 2 * (self.separate_object + self.background) > self.total() {
            Label::Spurious
        } else {
            Label::Core
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLabel {
    pub class: usize,
    pub feature: usize,
    pub label: Label,
    pub vote_counts: VoteCounts,
    pub num_responses: usize,
}

fn single_task<'a>(ids: impl Iterator<Item = &'a str>) -> Result<Option<&'a str>> {
    let mut first = None;
    for id in ids {
        match first {
            None => first = Some(id),
            Some(f) if f != id => {
                return Err(AnnotationError::Argument(format!(
                    "responses mix task ids {f:?} and {id:?}"
                )))
            }
            _ => {}
        }
    }
    Ok(first)
}

/// Strict-majority vote over one task's responses.
pub fn aggregate_core_spurious(responses: &[CoreSpuriousResponse]) -> Result<(Label, VoteCounts)> {
    if single_task(responses.iter().map(|r| r.task_id.as_str()))?.is_none() {
        return Err(AnnotationError::Aggregation("no responses".into()));
    }
    let mut votes = VoteCounts::default();
    for r in responses {
        votes.add(r.answer);
    }
    Ok((votes.label(), votes))
}

pub fn aggregate_validation(responses: &[ValidationResponse]) -> Result<bool> {
    single_task(responses.iter().map(|r| r.task_id.as_str()))?;
    if responses.len() != VALIDATION_WORKERS {
        return Err(AnnotationError::Protocol(format!(
            "validation needs exactly {VALIDATION_WORKERS} responses, found {}",
            responses.len()
        )));
    }
    if let Some(r) = responses
        .iter()
        .find(|r| r.heatmap_flags.len() != HEATMAPS_PER_TASK)
    {
        return Err(AnnotationError::Invalid(format!(
            "worker {:?} sent {} heatmap flags",
            r.worker_id,
            r.heatmap_flags.len()
        )));
    }
    let same = responses
        .iter()
        .filter(|r| r.cross_panel == CrossPanel::Same)
        .count();
    let not_different = responses
        .iter()
        .filter(|r| r.cross_panel != CrossPanel::Different)
        .count();
    let heatmaps_ok = (0..HEATMAPS_PER_TASK).all(|h| {
        responses.iter().filter(|r| !r.heatmap_flags[h]).count() >= VALIDATION_THRESHOLD
    });
    Ok(same >= VALIDATION_THRESHOLD && not_different >= VALIDATION_THRESHOLD && heatmaps_ok)
}

/// Spurious features `S(c)` per class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpuriositySpec {
    pub classes: BTreeMap<usize, BTreeSet<usize>>,
}

impl SpuriositySpec {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut spec = Self::default();
        for (class, feature) in pairs {
            spec.classes.entry(class).or_default().insert(feature);
        }
        spec
    }

    pub fn features(&self, class: usize) -> impl Iterator<Item = usize> + '_ {
        self.classes.get(&class).into_iter().flatten().copied()
    }

    pub fn is_spurious(&self, class: usize, feature: usize) -> bool {
        self.classes
            .get(&class)
            .is_some_and(|s| s.contains(&feature))
    }

    /// This spec with every aggregated label applied on top: spurious labels
    /// add the feature, core labels remove it. Classes left empty are dropped.
    pub fn with_labels(&self, labels: &[FeatureLabel]) -> Self {
        let mut out = self.clone();
        for l in labels {
            match l.label {
                Label::Spurious => {
                    out.classes.entry(l.class).or_default().insert(l.feature);
                }
                Label::Core => {
                    if let Some(set) = out.classes.get_mut(&l.class) {
                        set.remove(&l.feature);
                    }
                }
            }
        }
        out.classes.retain(|_, s| !s.is_empty());
        out
    }

    pub fn load(path: impl AsRef<Path>) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(io::Error::other)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(path, text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Complete,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFilter {
    #[serde(default, rename = "type")]
    pub kind: Option<TaskKind>,
    #[serde(default)]
    pub status: Option<TaskStatus>,
    /// Only tasks this worker has not answered yet.
    #[serde(default)]
    pub worker: Option<String>,
    #[serde(default)]
    pub offset: usize,
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: String,
    #[serde(rename = "type")]
    pub kind: TaskKind,
    pub class: usize,
    pub class_name: String,
    pub feature: usize,
    pub num_responses: usize,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPage {
    pub total: usize,
    pub offset: usize,
    pub tasks: Vec<TaskSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub task_id: String,
    pub class: usize,
    pub feature: usize,
    pub num_responses: usize,
    /// Set once exactly five responses are in.
    pub validated: Option<bool>,
}

/// Task bundle plus an append-only JSON-lines response log with an
/// in-memory index.
#[derive(Debug)]
pub struct AnnotationStore {
    tasks: BTreeMap<String, AnnotationTask>,
    log_path: Option<PathBuf>,
    responses: BTreeMap<String, Vec<Response>>,
    answered: HashSet<(String, String)>,
    responses_per_task: usize,
}

impl AnnotationStore {
    /// Store without persistence.
    pub fn in_memory(bundle: AnnotationTaskBundle) -> Self {
        Self {
            tasks: bundle
                .tasks
                .into_iter()
                .map(|t| (t.task_id.clone(), t))
                .collect(),
            log_path: None,
            responses: BTreeMap::new(),
            answered: HashSet::new(),
            responses_per_task: VALIDATION_WORKERS,
        }
    }

    /// Opens (or creates) the log at `log_path` and replays it.
    pub fn open(bundle: AnnotationTaskBundle, log_path: impl Into<PathBuf>) -> Result<Self> {
        let log_path = log_path.into();
        let mut store = Self::in_memory(bundle);
        if log_path.exists() {
            let f = fs::File::open(&log_path).map_err(|source| AnnotationError::Io {
                path: log_path.clone(),
                source,
            })?;
            for (i, line) in io::BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|source| AnnotationError::Io {
                    path: log_path.clone(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = |message: String| AnnotationError::CorruptLog {
                    path: log_path.clone(),
                    line: i + 1,
                    message,
                };
                let response: Response =
                    serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                store.check(&response).map_err(|e| corrupt(e.to_string()))?;
                store.index(response);
            }
        }
        store.log_path = Some(log_path);
        Ok(store)
    }

    pub fn set_responses_per_task(&mut self, n: usize) {
        self.responses_per_task = n.max(1);
    }

    pub fn task(&self, task_id: &str) -> Option<&AnnotationTask> {
        self.tasks.get(task_id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &AnnotationTask> {
        self.tasks.values()
    }

    pub fn responses(&self, task_id: &str) -> &[Response] {
        self.responses.get(task_id).map_or(&[], Vec::as_slice)
    }

    fn check(&self, response: &Response) -> Result<()> {
        response.validate()?;
        let task = self
            .tasks
            .get(response.task_id())
            .ok_or_else(|| AnnotationError::NotFound(format!("task {:?}", response.task_id())))?;
        if task.kind != response.kind() {
            return Err(AnnotationError::Argument(format!(
                "task {:?} is a {} task but received a {} response",
                task.task_id,
                task.kind.as_str(),
                response.kind().as_str()
            )));
        }
        let key = (response.task_id().to_string(), response.worker_id().to_string());
        if self.answered.contains(&key) {
            return Err(AnnotationError::Conflict(format!(
                "worker {:?} already answered task {:?}",
                key.1, key.0
            )));
        }
        if task.kind == TaskKind::Validation
            && self.responses(&task.task_id).len() >= VALIDATION_WORKERS
        {
            return Err(AnnotationError::Conflict(format!(
                "task {:?} already has {VALIDATION_WORKERS} responses",
                task.task_id
            )));
        }
        Ok(())
    }

    fn index(&mut self, response: Response) {
        self.answered.insert((
            response.task_id().to_string(),
            response.worker_id().to_string(),
        ));
        self.responses
            .entry(response.task_id().to_string())
            .or_default()
            .push(response);
    }

    /// Validates, appends to the log, then indexes. A failed append leaves
    /// the store unchanged.
    pub fn record_response(&mut self, response: Response) -> Result<()> {
        self.check(&response)?;
        if let Some(path) = &self.log_path {
            let line = serde_json::to_string(&response)
                .map_err(|e| AnnotationError::Invalid(e.to_string()))?;
            let io_err = |source| AnnotationError::Io {
                path: path.clone(),
                source,
            };
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(io_err)?;
            writeln!(f, "{line}").map_err(io_err)?;
            f.flush().map_err(io_err)?;
        }
        self.index(response);
        Ok(())
    }

    fn status(&self, task: &AnnotationTask) -> TaskStatus {
        let required = match task.kind {
            TaskKind::Validation => VALIDATION_WORKERS,
            TaskKind::CoreSpurious => self.responses_per_task,
        };
        if self.responses(&task.task_id).len() >= required {
            TaskStatus::Complete
        } else {
            TaskStatus::Pending
        }
    }

    pub fn list_tasks(&self, filter: &TaskFilter) -> TaskPage {
        let matching: Vec<TaskSummary> = self
            .tasks
            .values()
            .filter(|t| filter.kind.is_none_or(|k| k == t.kind))
            .filter(|t| filter.status.is_none_or(|s| s == self.status(t)))
            .filter(|t| {
                filter.worker.as_ref().is_none_or(|w| {
                    !self
                        .answered
                        .contains(&(t.task_id.clone(), w.clone()))
                })
            })
            .map(|t| TaskSummary {
                task_id: t.task_id.clone(),
                kind: t.kind,
                class: t.class,
                class_name: t.class_name.clone(),
                feature: t.feature,
                num_responses: self.responses(&t.task_id).len(),
                status: self.status(t),
            })
            .collect();
        let total = matching.len();
        let limit = filter.limit.unwrap_or(usize::MAX);
        TaskPage {
            total,
            offset: filter.offset,
            tasks: matching.into_iter().skip(filter.offset).take(limit).collect(),
        }
    }

    /// Labels for every core/spurious task with at least one response.
    pub fn labels(&self) -> Vec<FeatureLabel> {
        self.tasks
            .values()
            .filter(|t| t.kind == TaskKind::CoreSpurious)
            .filter_map(|t| {
                let rs: Vec<CoreSpuriousResponse> = self
                    .responses(&t.task_id)
                    .iter()
                    .filter_map(|r| match r {
                        Response::CoreSpurious(r) => Some(r.clone()),
                        Response::Validation(_) => None,
                    })
                    .collect();
                let (label, vote_counts) = aggregate_core_spurious(&rs).ok()?;
                Some(FeatureLabel {
                    class: t.class,
                    feature: t.feature,
                    label,
                    vote_counts,
                    num_responses: rs.len(),
                })
            })
            .collect()
    }

    pub fn validations(&self) -> Vec<ValidationOutcome> {
        self.tasks
            .values()
            .filter(|t| t.kind == TaskKind::Validation)
            .map(|t| {
                let rs: Vec<ValidationResponse> = self
                    .responses(&t.task_id)
                    .iter()
                    .filter_map(|r| match r {
                        Response::Validation(r) => Some(r.clone()),
                        Response::CoreSpurious(_) => None,
                    })
                    .collect();
                ValidationOutcome {
                    task_id: t.task_id.clone(),
                    class: t.class,
                    feature: t.feature,
                    num_responses: rs.len(),
                    validated: aggregate_validation(&rs).ok(),
                }
            })
            .collect()
    }

    pub fn build_spec(&self) -> SpuriositySpec {
        spec_from_labels(&self.labels())
    }
}

pub fn spec_from_labels(labels: &[FeatureLabel]) -> SpuriositySpec {
    SpuriositySpec::from_pairs(
        labels
            .iter()
            .filter(|l| l.label == Label::Spurious)
            .map(|l| (l.class, l.feature)),
    )
}

/// Core features per class according to `labels`.
pub fn core_features(labels: &[FeatureLabel]) -> BTreeMap<usize, BTreeSet<usize>> {
    let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for l in labels.iter().filter(|l| l.label == Label::Core) {
        out.entry(l.class).or_default().insert(l.feature);
    }
    out
}
