use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    PretrainGenerator {
        epoch: usize,
        train_loss: f64,
        val_loss: f64,
        best: bool,
    },
    PretrainDiscriminator {
        epoch: usize,
        train_loss: f64,
        val_accuracy: f64,
    },
    DiscriminatorUpdate {
        update: u64,
        loss: f64,
        accuracy: f64,
    },
    GeneratorUpdate {
        update: u64,
        loss: f64,
        adversarial: f64,
        feature_matching: f64,
    },
    Probe {
        update: u64,
        accuracy: f64,
    },
    Gate {
        update: u64,
        pre_accuracy: f64,
        post_accuracy: f64,
        recovery_updates: usize,
    },
    Snapshot {
        update: u64,
        metrics: std::collections::BTreeMap<String, f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Line {
    #[serde(flatten)]
    record: LogRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_ms: Option<u64>,
}

/// Ordered training records, serialized as line-delimited JSON.
pub struct TrainLog {
    lines: Vec<Line>,
    start: Option<Instant>,
    sink: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for TrainLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainLog")
            .field("records", &self.lines.len())
            .field("streaming", &self.sink.is_some())
            .finish()
    }
}

impl Default for TrainLog {
    fn default() -> Self {
        TrainLog::new(false)
    }
}

impl TrainLog {
    pub fn new(wall_time: bool) -> Self {
        TrainLog {
            lines: Vec::new(),
            start: wall_time.then(Instant::now),
            sink: None,
        }
    }

    /// Also streams each record to `sink` as it is pushed.
    pub fn streaming(wall_time: bool, sink: Box<dyn Write + Send>) -> Self {
        TrainLog {
            sink: Some(sink),
            ..TrainLog::new(wall_time)
        }
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        let line = Line {
            record,
            wall_ms: self.start.map(|s| s.elapsed().as_millis() as u64),
        };
        if let Some(sink) = self.sink.as_mut() {
            let text = serde_json::to_string(&line).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(sink, "{text}").map_err(|e| Error::io("training log", e))?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn records(&self) -> impl Iterator<Item = &LogRecord> {
        self.lines.iter().map(|l| &l.record)
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(&serde_json::to_string(l).expect("log records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<LogRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str::<Line>(l)
                    .map(|line| line.record)
                    .map_err(|e| Error::Data(format!("log line {}: {e}", i + 1)))
            })
            .collect()
    }

    /// Losses in record order, for reproducibility comparisons.
    pub fn loss_sequence(&self) -> Vec<f64> {
        self.records()
            .filter_map(|r| match r {
                LogRecord::PretrainGenerator { train_loss, .. } => Some(*train_loss),
                LogRecord::PretrainDiscriminator { train_loss, .. } => Some(*train_loss),
                LogRecord::DiscriminatorUpdate { loss, .. } => Some(*loss),
                LogRecord::GeneratorUpdate { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_without_wall_time() {
        let mut log = TrainLog::new(false);
        log.push(LogRecord::Probe { update: 3, accuracy: 0.8 }).unwrap();
        log.push(LogRecord::Gate {
            update: 4,
            pre_accuracy: 0.6,
            post_accuracy: 0.8,
            recovery_updates: 7,
        })
        .unwrap();
        let text = log.to_jsonl();
        assert!(!text.contains("wall_ms"));
        assert!(text.starts_with("{\"kind\":\"probe\""));
        let back = TrainLog::from_jsonl(&text).unwrap();
        assert_eq!(back, log.records().cloned().collect::<Vec<_>>());
    }

    #[test]
    fn wall_time_is_opt_in() {
        let mut log = TrainLog::new(true);
        log.push(LogRecord::Probe { update: 1, accuracy: 1.0 }).unwrap();
        assert!(log.to_jsonl().contains("wall_ms"));
    }

    #[test]
    fn bad_line_reports_position() {
        let err = TrainLog::from_jsonl("{\"kind\":\"probe\",\"update\":1,\"accuracy\":1}\nnot json").unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }
}
