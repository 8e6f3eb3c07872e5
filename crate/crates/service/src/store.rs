//! Triage ledger and its on-disk form.
//!
//! The ledger (queue, labeled store, model version) changes only through
//! [`Event`]s. On disk a store directory holds:
//!
//! - `events.log`: one JSON line per event, `{"seq":N,"event":{..}}`
//! - `snapshot.json`: `{"v":1,"seq":N,"ledger":{..}}`, the ledger after
//!   event `N`, written to a temp file and renamed
//! - `models/v{K}.json`: the checkpoint of model version `K`
//!
//! Recovery loads the snapshot and replays log events with a larger
//! sequence number. A torn final log line (crash mid-write) is dropped.
//! After each snapshot the log is truncated.

use bayescan::can::FrameRecord;
use bayescan::checkpoint::{Checkpoint, CheckpointError};
use bayescan::features::WindowOrigin;
use bayescan::uncertainty::PredictionRecord;
use bayescan::{CanFrame, ClassLabel, FeatureWindow};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt store file {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ItemStatus {
    Pending,
    Labeled {
        label: ClassLabel,
        engineer: String,
        at_ms: u64,
    },
    Dismissed {
        at_ms: u64,
    },
}

impl ItemStatus {
    pub fn name(&self) -> &'static str {
        match self {
            ItemStatus::Pending => "pending",
            ItemStatus::Labeled { .. } => "labeled",
            ItemStatus::Dismissed { .. } => "dismissed",
        }
    }
}

/// A flagged window awaiting (or holding) an engineer's verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageItem {
    pub id: u64,
    pub window_id: u64,
    pub stream: String,
    pub model_version: u64,
    pub created_at_ms: u64,
    pub frames: Vec<FrameRecord>,
    pub prediction: PredictionRecord,
    pub status: ItemStatus,
}

impl TriageItem {
    /// The encoded window, labeled with `label`.
    pub fn window(&self, label: ClassLabel) -> Result<FeatureWindow, String> {
        let frames = self
            .frames
            .iter()
            .map(|r| CanFrame::try_from(r).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut w = FeatureWindow::from_frames(
            &frames,
            WindowOrigin {
                capture: u32::MAX,
                start: self.window_id,
            },
        );
        w.label = label;
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledEntry {
    pub item_id: u64,
    pub label: ClassLabel,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    ItemCreated {
        item: Box<TriageItem>,
    },
    Labeled {
        id: u64,
        label: ClassLabel,
        engineer: String,
        at_ms: u64,
    },
    Dismissed {
        id: u64,
        at_ms: u64,
    },
    ModelActivated {
        version: u64,
        at_ms: u64,
    },
    WindowsSeen {
        next_window_id: u64,
    },
}

/// Why an event cannot apply to the current ledger.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Rejection {
    #[error("no triage item {0}")]
    UnknownItem(u64),
    #[error("item {id} is already {status}")]
    NotPending { id: u64, status: &'static str },
    #[error("item id {0} already exists")]
    DuplicateItem(u64),
    #[error("model version {got} does not follow {current}")]
    VersionOrder { got: u64, current: u64 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ledger {
    pub items: BTreeMap<u64, TriageItem>,
    /// Append-only, in labeling order.
    pub labeled: Vec<LabeledEntry>,
    pub model_version: u64,
    pub next_item_id: u64,
    pub next_window_id: u64,
}

impl Ledger {
    /// Check an event against the current state without applying it.
    pub fn check(&self, event: &Event) -> Result<(), Rejection> {
        let pending = |id: u64| match self.items.get(&id) {
            None => Err(Rejection::UnknownItem(id)),
            Some(it) if it.status != ItemStatus::Pending => Err(Rejection::NotPending {
                id,
                status: it.status.name(),
            }),
            Some(_) => Ok(()),
        };
        match event {
            Event::ItemCreated { item } if self.items.contains_key(&item.id) => Err(Rejection::DuplicateItem(item.id)),
            Event::ItemCreated { .. } | Event::WindowsSeen { .. } => Ok(()),
            Event::Labeled { id, .. } | Event::Dismissed { id, .. } => pending(*id),
            Event::ModelActivated { version, .. } if *version != self.model_version + 1 => {
                Err(Rejection::VersionOrder {
                    got: *version,
                    current: self.model_version,
                })
            }
            Event::ModelActivated { .. } => Ok(()),
        }
    }

    pub fn apply(&mut self, event: &Event) -> Result<(), Rejection> {
        self.check(event)?;
        match event {
            Event::ItemCreated { item } => {
                self.next_item_id = self.next_item_id.max(item.id + 1);
                self.next_window_id = self.next_window_id.max(item.window_id + 1);
                self.items.insert(item.id, (**item).clone());
            }
            Event::Labeled {
                id,
                label,
                engineer,
                at_ms,
            } => {
                let item = self.items.get_mut(id).expect("checked");
                item.status = ItemStatus::Labeled {
                    label: *label,
                    engineer: engineer.clone(),
                    at_ms: *at_ms,
                };
                self.labeled.push(LabeledEntry {
                    item_id: *id,
                    label: *label,
                    at_ms: *at_ms,
                });
            }
            Event::Dismissed { id, at_ms } => {
                self.items.get_mut(id).expect("checked").status = ItemStatus::Dismissed { at_ms: *at_ms };
            }
            Event::ModelActivated { version, .. } => self.model_version = *version,
            Event::WindowsSeen { next_window_id } => {
                self.next_window_id = self.next_window_id.max(*next_window_id);
            }
        }
        Ok(())
    }

    /// Labeled windows, in labeling order.
    pub fn labeled_windows(&self) -> Result<Vec<FeatureWindow>, String> {
        self.labeled
            .iter()
            .map(|e| self.items[&e.item_id].window(e.label))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    seq: u64,
    event: Event,
}

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    v: u32,
    seq: u64,
    ledger: Ledger,
}

/// Append-only event log with periodic snapshots.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    log: File,
    seq: u64,
    since_snapshot: usize,
    snapshot_every: usize,
}

impl Store {
    /// Open (creating if needed) and recover the ledger.
    pub fn open(dir: &Path, snapshot_every: usize) -> Result<(Store, Ledger), StoreError> {
        std::fs::create_dir_all(dir.join("models")).map_err(io(dir))?;
        let snap_path = dir.join("snapshot.json");
        let (mut seq, mut ledger) = match std::fs::read(&snap_path) {
            Ok(bytes) => {
                let s: SnapshotFile = serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                    path: snap_path.clone(),
                    msg: e.to_string(),
                })?;
                if s.v != SNAPSHOT_VERSION {
                    return Err(StoreError::Corrupt {
                        path: snap_path,
                        msg: format!("unsupported snapshot version {}", s.v),
                    });
                }
                (s.seq, s.ledger)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (0, Ledger::default()),
            Err(e) => return Err(io(&snap_path)(e)),
        };
        let log_path = dir.join("events.log");
        let mut replayed = 0;
        let mut valid_len = 0u64;
        if let Ok(f) = File::open(&log_path) {
            let mut lines = BufReader::new(f).lines().peekable();
            while let Some(line) = lines.next() {
                let line = line.map_err(io(&log_path))?;
                let last = lines.peek().is_none();
                let parsed: LogLine = match serde_json::from_str(&line) {
                    Ok(l) => l,
                    Err(_) if last => break,
                    Err(e) => {
                        return Err(StoreError::Corrupt {
                            path: log_path,
                            msg: e.to_string(),
                        })
                    }
                };
                valid_len += line.len() as u64 + 1;
                if parsed.seq <= seq {
                    continue;
                }
                ledger.apply(&parsed.event).map_err(|e| StoreError::Corrupt {
                    path: log_path.clone(),
                    msg: format!("event {}: {e}", parsed.seq),
                })?;
                seq = parsed.seq;
                replayed += 1;
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io(&log_path))?;
        log.set_len(valid_len).map_err(io(&log_path))?;
        Ok((
            Store {
                dir: dir.to_path_buf(),
                log,
                seq,
                since_snapshot: replayed,
                snapshot_every,
            },
            ledger,
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Append an already-applied event; snapshot when due.
    pub fn append(&mut self, event: &Event, ledger: &Ledger) -> Result<(), StoreError> {
        let path = self.dir.join("events.log");
        let mut line = serde_json::to_vec(&LogLine {
            seq: self.seq + 1,
            event: event.clone(),
        })
        .expect("events serialize");
        line.push(b'\n');
        self.log.write_all(&line).map_err(io(&path))?;
        self.log.flush().map_err(io(&path))?;
        self.seq += 1;
        self.since_snapshot += 1;
        if self.since_snapshot >= self.snapshot_every {
            self.snapshot(ledger)?;
        }
        Ok(())
    }

    pub fn snapshot(&mut self, ledger: &Ledger) -> Result<(), StoreError> {
        let path = self.dir.join("snapshot.json");
        let tmp = self.dir.join("snapshot.json.tmp");
        let body = serde_json::to_vec(&SnapshotFile {
            v: SNAPSHOT_VERSION,
            seq: self.seq,
            ledger: ledger.clone(),
        })
        .expect("ledger serializes");
        std::fs::write(&tmp, body).map_err(io(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io(&path))?;
        let log_path = self.dir.join("events.log");
        self.log.set_len(0).map_err(io(&log_path))?;
        self.since_snapshot = 0;
        Ok(())
    }

    pub fn model_path(&self, version: u64) -> PathBuf {
        self.dir.join("models").join(format!("v{version}.json"))
    }

    pub fn save_model(&self, version: u64, ck: &Checkpoint) -> Result<(), StoreError> {
        Ok(ck.write_file(&self.model_path(version))?)
    }

    pub fn load_model(&self, version: u64) -> Result<Checkpoint, StoreError> {
        Ok(Checkpoint::read_file(&self.model_path(version))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bayescan::uncertainty::{triage_decide, PredictiveSummary};
    use bayescan::{Timestamp, TriagePolicy};

    fn item(id: u64) -> TriageItem {
        let frames: Vec<FrameRecord> = (0..4)
            .map(|i| {
                let f = CanFrame::new(Timestamp::from_micros(i), 0x316, &[i as u8, 2], ClassLabel::Normal).unwrap();
                FrameRecord::from(&f)
            })
            .collect();
        let s = PredictiveSummary::point([0.5, 0.5, 0.0, 0.0, 0.0]).unwrap();
        let d = triage_decide(&s, &TriagePolicy::default());
        TriageItem {
            id,
            window_id: id * 10,
            stream: "can0".into(),
            model_version: 1,
            created_at_ms: 0,
            frames,
            prediction: PredictionRecord::new(id * 10, &s, &d, None),
            status: ItemStatus::Pending,
        }
    }

    fn created(id: u64) -> Event {
        Event::ItemCreated {
            item: Box::new(item(id)),
        }
    }

    #[test]
    fn transitions_only_leave_pending() {
        let mut l = Ledger::default();
        l.apply(&created(0)).unwrap();
        assert_eq!(l.apply(&created(0)), Err(Rejection::DuplicateItem(0)));
        let label = Event::Labeled {
            id: 0,
            label: ClassLabel::DoS,
            engineer: "e".into(),
            at_ms: 1,
        };
        l.apply(&label).unwrap();
        assert_eq!(l.labeled.len(), 1);
        assert!(matches!(
            l.apply(&label),
            Err(Rejection::NotPending {
                id: 0,
                status: "labeled"
            })
        ));
        assert!(matches!(
            l.apply(&Event::Dismissed { id: 0, at_ms: 2 }),
            Err(Rejection::NotPending { .. })
        ));
        assert_eq!(
            l.apply(&Event::Dismissed { id: 9, at_ms: 2 }),
            Err(Rejection::UnknownItem(9))
        );
        assert!(l.apply(&Event::ModelActivated { version: 2, at_ms: 0 }).is_err());
        l.apply(&Event::ModelActivated { version: 1, at_ms: 0 }).unwrap();
        let w = l.labeled_windows().unwrap();
        assert_eq!(w[0].label, ClassLabel::DoS);
        assert_eq!(w[0].window_len(), 4);
    }

    #[test]
    fn recovery_replays_after_snapshot_and_drops_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let mut ledger = Ledger::default();
        {
            let (mut store, recovered) = Store::open(dir.path(), 3).unwrap();
            assert_eq!(recovered, Ledger::default());
            for id in 0..5 {
                let e = created(id);
                ledger.apply(&e).unwrap();
                store.append(&e, &ledger).unwrap();
            }
            let e = Event::Dismissed { id: 4, at_ms: 7 };
            ledger.apply(&e).unwrap();
            store.append(&e, &ledger).unwrap();
        }
        let (_, back) = Store::open(dir.path(), 3).unwrap();
        assert_eq!(back, ledger);

        let log = dir.path().join("events.log");
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"seq\":99,\"ev").unwrap();
        drop(f);
        let (mut store, back) = Store::open(dir.path(), 100).unwrap();
        assert_eq!(back, ledger);
        let e = Event::Dismissed { id: 3, at_ms: 8 };
        ledger.apply(&e).unwrap();
        store.append(&e, &ledger).unwrap();
        drop(store);
        let (_, back) = Store::open(dir.path(), 100).unwrap();
        assert_eq!(back, ledger);
    }
}
