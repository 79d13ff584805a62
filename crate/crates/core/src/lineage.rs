//! Append-only lineage log: one structured record per evolution event.
//!
//! Records are JSON lines with a monotone sequence number. Everything in a
//! record is derived from seeded computation (no wall-clock content), so a
//! resumed run can reproduce the uninterrupted log byte for byte.

use crate::mutation::MutationTrace;
use crate::succession::Phase;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// The landmark checkpoints of one generation's training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointLabel {
    T1,
    T2,
    T3,
}

impl CheckpointLabel {
    pub fn index(self) -> usize {
        match self {
            CheckpointLabel::T1 => 0,
            CheckpointLabel::T2 => 1,
            CheckpointLabel::T3 => 2,
        }
    }
}

/// Fate of an individual at an extinction gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Survived,
    Extinguished,
    /// Below threshold but kept: extinguishing it would have emptied the
    /// population.
    Spared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LineageEvent {
    Spawn {
        individual: u64,
        parent: Option<u64>,
        params: u64,
        ops: Vec<MutationTrace>,
    },
    Score {
        individual: u64,
        checkpoint: CheckpointLabel,
        iterations: u64,
        fitness: f64,
    },
    Threshold {
        checkpoint: CheckpointLabel,
        value: f64,
    },
    Verdict {
        individual: u64,
        checkpoint: CheckpointLabel,
        fitness: f64,
        threshold: f64,
        verdict: Verdict,
    },
    EvaluationFailed {
        individual: u64,
        cause: String,
    },
    Selection {
        individual: u64,
        fitness: f64,
        params: u64,
    },
    PhaseSwitch {
        from: Phase,
        to: Phase,
    },
    DuplicationTrial {
        trial: u32,
        block_index: usize,
        individual: Option<u64>,
        params: Option<u64>,
        fitness: Option<f64>,
        accepted: bool,
    },
    RunComplete {
        best_individual: u64,
        best_fitness: f64,
        best_params: u64,
        generations: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageRecord {
    pub seq: u64,
    pub generation: u32,
    pub phase: Phase,
    #[serde(flatten)]
    pub event: LineageEvent,
}

#[derive(Debug, Error)]
pub enum LineageError {
    #[error("lineage log io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("lineage log record {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Where a checkpoint should cut the log on resume: byte offset after the
/// last flushed record, plus the next sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LogCursor {
    pub offset: u64,
    pub next_seq: u64,
}

/// Destination for lineage events. The sink assigns sequence numbers.
pub trait EventSink {
    fn record(
        &mut self,
        generation: u32,
        phase: Phase,
        event: LineageEvent,
    ) -> Result<(), LineageError>;

    /// Flush and report the resume cursor. In-memory sinks report zeros.
    fn cursor(&mut self) -> Result<LogCursor, LineageError> {
        Ok(LogCursor::default())
    }
}

/// Discards every event.
pub struct NullSink;

impl EventSink for NullSink {
    fn record(&mut self, _: u32, _: Phase, _: LineageEvent) -> Result<(), LineageError> {
        Ok(())
    }
}

/// Collects records in memory; used by tests and by report generation.
#[derive(Default)]
pub struct MemorySink {
    pub records: Vec<LineageRecord>,
}

impl EventSink for MemorySink {
    fn record(
        &mut self,
        generation: u32,
        phase: Phase,
        event: LineageEvent,
    ) -> Result<(), LineageError> {
        let seq = self.records.len() as u64;
        self.records.push(LineageRecord { seq, generation, phase, event });
        Ok(())
    }
}

/// Append-only JSON-lines log backed by a file.
pub struct LineageLog {
    writer: BufWriter<File>,
    path: PathBuf,
    next_seq: u64,
    bytes: u64,
}

impl LineageLog {
    /// Create a fresh log, truncating anything present.
    pub fn create(path: &Path) -> Result<Self, LineageError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        Ok(LineageLog {
            writer: BufWriter::new(file),
            path: path.to_path_buf(),
            next_seq: 0,
            bytes: 0,
        })
    }

    /// Reopen an existing log for appending, discarding everything past
    /// `offset` (partial records written after the last checkpoint).
    pub fn reopen(path: &Path, offset: u64, next_seq: u64) -> Result<Self, LineageError> {
        let file = OpenOptions::new().write(true).open(path)?;
        file.set_len(offset)?;
        let mut writer = BufWriter::new(file);
        writer.seek(SeekFrom::Start(offset))?;
        Ok(LineageLog {
            writer,
            path: path.to_path_buf(),
            next_seq,
            bytes: offset,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Byte offset after the last flushed record.
    pub fn offset(&mut self) -> Result<u64, LineageError> {
        self.writer.flush()?;
        Ok(self.bytes)
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn flush(&mut self) -> Result<(), LineageError> {
        self.writer.flush()?;
        Ok(())
    }
}

impl EventSink for LineageLog {
    fn record(
        &mut self,
        generation: u32,
        phase: Phase,
        event: LineageEvent,
    ) -> Result<(), LineageError> {
        let record = LineageRecord {
            seq: self.next_seq,
            generation,
            phase,
            event,
        };
        let mut line = serde_json::to_string(&record)
            .map_err(|e| LineageError::Malformed { line: 0, message: e.to_string() })?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.next_seq += 1;
        self.bytes += line.len() as u64;
        Ok(())
    }

    fn cursor(&mut self) -> Result<LogCursor, LineageError> {
        self.writer.flush()?;
        Ok(LogCursor { offset: self.bytes, next_seq: self.next_seq })
    }
}

/// Read a whole log back.
pub fn read_log(path: &Path) -> Result<Vec<LineageRecord>, LineageError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LineageRecord =
            serde_json::from_str(&line).map_err(|e| LineageError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_appends_and_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lineage.jsonl");
        let mut log = LineageLog::create(&path).unwrap();
        for i in 0..4u64 {
            log.record(
                0,
                Phase::Primary,
                LineageEvent::Threshold { checkpoint: CheckpointLabel::T1, value: i as f64 / 10.0 },
            )
            .unwrap();
        }
        log.flush().unwrap();

        let records = read_log(&path).unwrap();
        assert_eq!(records.len(), 4);
        let seqs: Vec<u64> = records.iter().map(|r| r.seq).collect();
        assert_eq!(seqs, vec![0, 1, 2, 3]);
    }

    #[test]
    fn reopen_truncates_partial_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lineage.jsonl");
        let mut log = LineageLog::create(&path).unwrap();
        log.record(
            0,
            Phase::Primary,
            LineageEvent::Threshold { checkpoint: CheckpointLabel::T1, value: 0.5 },
        )
        .unwrap();
        let offset = log.offset().unwrap();
        let seq = log.next_seq();
        log.record(
            1,
            Phase::Primary,
            LineageEvent::Threshold { checkpoint: CheckpointLabel::T2, value: 0.6 },
        )
        .unwrap();
        log.flush().unwrap();
        drop(log);

        let mut log = LineageLog::reopen(&path, offset, seq).unwrap();
        log.record(
            1,
            Phase::Primary,
            LineageEvent::Threshold { checkpoint: CheckpointLabel::T2, value: 0.7 },
        )
        .unwrap();
        log.flush().unwrap();

        let records = read_log(&path).unwrap();
        assert_eq!(records.len(), 2);
        match &records[1].event {
            LineageEvent::Threshold { value, .. } => assert_eq!(*value, 0.7),
            other => panic!("unexpected event {other:?}"),
        }
    }
}
