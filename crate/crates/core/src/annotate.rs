//! Durable annotation task store.
//!
//! State lives in an append-only JSONL event log (`events.jsonl` in the
//! store directory). Every mutation is written and synced before it is
//! applied in memory, so replaying the log after a crash reproduces every
//! acknowledged operation. A trailing line without its newline is a torn
//! write and is dropped on open.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, TaskKind};
use crate::error::{Error, Result};
use crate::selection::read_selection_jsonl;

pub const LOG_FILE: &str = "events.jsonl";
pub const DEFAULT_LEASE_SECONDS: u64 = 600;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug)]
pub struct ManualClock(Mutex<DateTime<Utc>>);

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        ManualClock(Mutex::new(start))
    }

    pub fn advance(&self, seconds: i64) {
        let mut now = self.0.lock().unwrap();
        *now += Duration::seconds(seconds);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.0.lock().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Leased,
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub record_id: String,
    pub query: String,
    pub reference: String,
    pub response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_kind: Option<TaskKind>,
    pub status: TaskStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lease_expiry: Option<DateTime<Utc>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leased_by: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEvent {
    pub record_id: String,
    pub h: Label,
    pub annotator_id: String,
    pub timestamp: DateTime<Utc>,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportedLabel {
    pub record_id: String,
    pub h: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Progress {
    pub pending: usize,
    pub leased: usize,
    pub labeled: usize,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub rev: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventBody {
    TaskImported {
        record_id: String,
        query: String,
        reference: String,
        response: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        task_kind: Option<TaskKind>,
    },
    Leased {
        record_id: String,
        annotator: String,
        expires_at: DateTime<Utc>,
    },
    LeaseReleased {
        record_id: String,
    },
    Labeled {
        record_id: String,
        h: Label,
        annotator: String,
        at: DateTime<Utc>,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Lease {
    annotator: String,
    expires_at: DateTime<Utc>,
    rev: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct TaskEntry {
    record_id: String,
    query: String,
    reference: String,
    response: String,
    task_kind: Option<TaskKind>,
    imported_rev: u64,
    lease: Option<Lease>,
    label: Option<Label>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct StoreState {
    tasks: Vec<TaskEntry>,
    index: HashMap<String, usize>,
    labels: Vec<LabelEvent>,
    last_rev: u64,
}

impl StoreState {
    fn task_mut(&mut self, record_id: &str) -> Option<&mut TaskEntry> {
        self.index.get(record_id).map(|&i| &mut self.tasks[i])
    }

    fn apply(&mut self, event: &Event) -> std::result::Result<(), String> {
        if event.rev <= self.last_rev {
            return Err(format!("revision {} after {}", event.rev, self.last_rev));
        }
        let unknown = |id: &str| format!("event for unknown task {id:?}");
        match &event.body {
            EventBody::TaskImported {
                record_id,
                query,
                reference,
                response,
                task_kind,
            } => {
                if self.index.contains_key(record_id) {
                    return Err(format!("task {record_id:?} imported twice"));
                }
                self.index.insert(record_id.clone(), self.tasks.len());
                self.tasks.push(TaskEntry {
                    record_id: record_id.clone(),
                    query: query.clone(),
                    reference: reference.clone(),
                    response: response.clone(),
                    task_kind: *task_kind,
                    imported_rev: event.rev,
                    lease: None,
                    label: None,
                });
            }
            EventBody::Leased {
                record_id,
                annotator,
                expires_at,
            } => {
                let task = self.task_mut(record_id).ok_or_else(|| unknown(record_id))?;
                task.lease = Some(Lease {
                    annotator: annotator.clone(),
                    expires_at: *expires_at,
                    rev: event.rev,
                });
            }
            EventBody::LeaseReleased { record_id } => {
                let task = self.task_mut(record_id).ok_or_else(|| unknown(record_id))?;
                task.lease = None;
            }
            EventBody::Labeled {
                record_id,
                h,
                annotator,
                at,
            } => {
                let task = self.task_mut(record_id).ok_or_else(|| unknown(record_id))?;
                task.label = Some(*h);
                task.lease = None;
                self.labels.push(LabelEvent {
                    record_id: record_id.clone(),
                    h: *h,
                    annotator_id: annotator.clone(),
                    timestamp: *at,
                    revision: event.rev,
                });
            }
        }
        self.last_rev = event.rev;
        Ok(())
    }

    fn status(task: &TaskEntry, now: DateTime<Utc>) -> TaskStatus {
        if task.label.is_some() {
            TaskStatus::Labeled
        } else if task.lease.as_ref().is_some_and(|l| l.expires_at > now) {
            TaskStatus::Leased
        } else {
            TaskStatus::Pending
        }
    }

    fn view(task: &TaskEntry, now: DateTime<Utc>) -> AnnotationTask {
        let status = StoreState::status(task, now);
        let lease = task.lease.as_ref().filter(|_| status == TaskStatus::Leased);
        AnnotationTask {
            record_id: task.record_id.clone(),
            query: task.query.clone(),
            reference: task.reference.clone(),
            response: task.response.clone(),
            task_kind: task.task_kind,
            status,
            lease_expiry: lease.map(|l| l.expires_at),
            leased_by: lease.map(|l| l.annotator.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    /// Accept a new label for an already labeled task without a lease.
    pub allow_relabel: bool,
    /// Rewrite the log once this many superseded lease events pile up.
    pub compact_after: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            allow_relabel: true,
            compact_after: 10_000,
        }
    }
}

pub struct AnnotationStore {
    dir: PathBuf,
    log: File,
    log_len: u64,
    log_lines: usize,
    state: StoreState,
    clock: Arc<dyn Clock>,
    config: StoreConfig,
}

impl std::fmt::Debug for AnnotationStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnnotationStore")
            .field("dir", &self.dir)
            .field("tasks", &self.state.tasks.len())
            .field("last_rev", &self.state.last_rev)
            .finish()
    }
}

/// Reads the log, dropping a torn final line. Returns the events and the
/// byte length of the intact prefix.
pub fn read_log(path: &Path) -> Result<(Vec<Event>, u64)> {
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(Error::io(path, e)),
    }
    let intact = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let mut events = Vec::new();
    for (i, line) in bytes[..intact].split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let event: Event = serde_json::from_slice(line).map_err(|e| Error::CorruptLog {
            line: i + 1,
            reason: e.to_string(),
        })?;
        events.push(event);
    }
    Ok((events, intact as u64))
}

impl AnnotationStore {
    pub fn open(dir: impl AsRef<Path>, config: StoreConfig) -> Result<Self> {
        AnnotationStore::open_with_clock(dir, config, Arc::new(SystemClock))
    }

    pub fn open_with_clock(dir: impl AsRef<Path>, config: StoreConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(LOG_FILE);
        let (events, intact) = read_log(&path)?;
        let mut state = StoreState::default();
        for (i, event) in events.iter().enumerate() {
            state.apply(event).map_err(|reason| Error::CorruptLog { line: i + 1, reason })?;
        }
        let mut log = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let on_disk = log.metadata().map_err(|e| Error::io(&path, e))?.len();
        if on_disk != intact {
            log.set_len(intact).map_err(|e| Error::io(&path, e))?;
            log.sync_all().map_err(|e| Error::io(&path, e))?;
        }
        log.seek(SeekFrom::Start(intact)).map_err(|e| Error::io(&path, e))?;
        let mut store = AnnotationStore {
            dir,
            log,
            log_len: intact,
            log_lines: events.len(),
            state,
            clock,
            config,
        };
        store.maybe_compact()?;
        Ok(store)
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    pub fn revision(&self) -> u64 {
        self.state.last_rev
    }

    fn append(&mut self, body: EventBody) -> Result<u64> {
        let event = Event {
            rev: self.state.last_rev + 1,
            body,
        };
        let mut line = serde_json::to_vec(&event).expect("events serialize");
        line.push(b'\n');
        let path = self.log_path();
        let written = self
            .log
            .write_all(&line)
            .and_then(|_| self.log.sync_data());
        if let Err(e) = written {
            // Drop any partial line so the log stays parseable.
            let _ = self.log.set_len(self.log_len);
            let _ = self.log.seek(SeekFrom::Start(self.log_len));
            return Err(Error::io(path, e));
        }
        self.log_len += line.len() as u64;
        self.log_lines += 1;
        self.state
            .apply(&event)
            .expect("appended event is consistent with state");
        Ok(event.rev)
    }

    /// Adds one pending task per id not already present.
    pub fn import_ids(&mut self, ids: &[String], corpus: &Corpus) -> Result<usize> {
        if let Some(missing) = ids.iter().find(|id| corpus.get(id).is_none()) {
            return Err(Error::UnknownRecord(missing.clone()));
        }
        for id in ids {
            if self.state.index.contains_key(id) {
                continue;
            }
            let record = corpus.get(id).expect("checked above");
            self.append(EventBody::TaskImported {
                record_id: record.id.clone(),
                query: record.query.clone(),
                reference: record.reference.clone(),
                response: record.response.clone(),
                task_kind: record.task_kind,
            })?;
        }
        Ok(self.state.tasks.len())
    }

    /// Imports every id of a selection output file. Returns the task count.
    pub fn import_tasks(&mut self, selection_output: impl AsRef<Path>, corpus: &Corpus) -> Result<usize> {
        let path = selection_output.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let lines = read_selection_jsonl(std::io::BufReader::new(file), &path.display().to_string())?;
        let ids: Vec<String> = lines.into_iter().map(|l| l.id).collect();
        self.import_ids(&ids, corpus)
    }

    pub fn lease_next(&mut self, annotator_id: &str, lease_seconds: u64) -> Result<Option<AnnotationTask>> {
        if lease_seconds == 0 {
            return Err(Error::InvalidConfig("lease must last at least one second".into()));
        }
        let now = self.clock.now();
        let Some(pos) = self
            .state
            .tasks
            .iter()
            .position(|t| StoreState::status(t, now) == TaskStatus::Pending)
        else {
            return Ok(None);
        };
        let record_id = self.state.tasks[pos].record_id.clone();
        self.append(EventBody::Leased {
            record_id,
            annotator: annotator_id.to_string(),
            expires_at: now + Duration::seconds(lease_seconds as i64),
        })?;
        Ok(Some(StoreState::view(&self.state.tasks[pos], now)))
    }

    pub fn submit_label(&mut self, record_id: &str, h: i64, annotator_id: &str) -> Result<u64> {
        let now = self.clock.now();
        let task = self
            .state
            .index
            .get(record_id)
            .map(|&i| &self.state.tasks[i])
            .ok_or_else(|| Error::UnknownTask(record_id.to_string()))?;
        let label = Label::try_from(h)?;
        let holds_lease = task
            .lease
            .as_ref()
            .is_some_and(|l| l.annotator == annotator_id && l.expires_at > now);
        let relabel = self.config.allow_relabel && task.label.is_some();
        if !holds_lease && !relabel {
            return Err(Error::NotLeased {
                record_id: record_id.to_string(),
                annotator: annotator_id.to_string(),
            });
        }
        let rev = self.append(EventBody::Labeled {
            record_id: record_id.to_string(),
            h: label,
            annotator: annotator_id.to_string(),
            at: now,
        })?;
        self.maybe_compact()?;
        Ok(rev)
    }

    /// Ends an active lease immediately, returning the task to pending.
    pub fn expire_lease(&mut self, record_id: &str) -> Result<()> {
        let now = self.clock.now();
        let task = self
            .state
            .index
            .get(record_id)
            .map(|&i| &self.state.tasks[i])
            .ok_or_else(|| Error::UnknownTask(record_id.to_string()))?;
        if StoreState::status(task, now) == TaskStatus::Leased {
            self.append(EventBody::LeaseReleased {
                record_id: record_id.to_string(),
            })?;
        }
        Ok(())
    }

    /// Latest label per labeled record, ordered by record id.
    pub fn export_labels(&self) -> Vec<ExportedLabel> {
        let latest: BTreeMap<&str, Label> = self
            .state
            .tasks
            .iter()
            .filter_map(|t| t.label.map(|h| (t.record_id.as_str(), h)))
            .collect();
        latest
            .into_iter()
            .map(|(id, h)| ExportedLabel {
                record_id: id.to_string(),
                h,
            })
            .collect()
    }

    pub fn label_events(&self) -> &[LabelEvent] {
        &self.state.labels
    }

    pub fn progress(&self) -> Progress {
        let now = self.clock.now();
        let mut p = Progress::default();
        for task in &self.state.tasks {
            match StoreState::status(task, now) {
                TaskStatus::Pending => p.pending += 1,
                TaskStatus::Leased => p.leased += 1,
                TaskStatus::Labeled => p.labeled += 1,
            }
        }
        p
    }

    pub fn task(&self, record_id: &str) -> Option<AnnotationTask> {
        let now = self.clock.now();
        self.state
            .index
            .get(record_id)
            .map(|&i| StoreState::view(&self.state.tasks[i], now))
    }

    pub fn tasks(&self) -> Vec<AnnotationTask> {
        let now = self.clock.now();
        self.state.tasks.iter().map(|t| StoreState::view(t, now)).collect()
    }

    fn live_events(&self) -> Vec<Event> {
        let now = self.clock.now();
        let mut events = Vec::new();
        for task in &self.state.tasks {
            events.push(Event {
                rev: task.imported_rev,
                body: EventBody::TaskImported {
                    record_id: task.record_id.clone(),
                    query: task.query.clone(),
                    reference: task.reference.clone(),
                    response: task.response.clone(),
                    task_kind: task.task_kind,
                },
            });
            if let Some(lease) = task.lease.as_ref().filter(|l| l.expires_at > now) {
                events.push(Event {
                    rev: lease.rev,
                    body: EventBody::Leased {
                        record_id: task.record_id.clone(),
                        annotator: lease.annotator.clone(),
                        expires_at: lease.expires_at,
                    },
                });
            }
        }
        for label in &self.state.labels {
            events.push(Event {
                rev: label.revision,
                body: EventBody::Labeled {
                    record_id: label.record_id.clone(),
                    h: label.h,
                    annotator: label.annotator_id.clone(),
                    at: label.timestamp,
                },
            });
        }
        events.sort_by_key(|e| e.rev);
        events
    }

    fn maybe_compact(&mut self) -> Result<()> {
        let live = self.state.tasks.len() + self.state.labels.len();
        if self.log_lines.saturating_sub(live) > self.config.compact_after {
            self.compact()?;
        }
        Ok(())
    }

    /// Rewrites the log keeping imports, live leases and every label event.
    /// Revisions are preserved, so exports do not change.
    pub fn compact(&mut self) -> Result<()> {
        let events = self.live_events();
        let path = self.log_path();
        let tmp = self.dir.join(format!("{LOG_FILE}.compact"));
        let mut buf = Vec::new();
        for event in &events {
            serde_json::to_writer(&mut buf, event).expect("events serialize");
            buf.push(b'\n');
        }
        let write = || -> std::io::Result<File> {
            let mut f = File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
            std::fs::rename(&tmp, &path)?;
            if let Ok(d) = File::open(&self.dir) {
                let _ = d.sync_all();
            }
            let mut log = OpenOptions::new().read(true).write(true).open(&path)?;
            log.seek(SeekFrom::End(0))?;
            Ok(log)
        };
        self.log = write().map_err(|e| Error::io(&path, e))?;
        self.log_len = buf.len() as u64;
        self.log_lines = events.len();
        Ok(())
    }
}
