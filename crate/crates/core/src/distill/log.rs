use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Stage;

/// One logged interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    #[serde(with = "stage_name")]
    pub stage: Stage,
    pub l_s: f64,
    pub l_u: f64,
    pub l: f64,
    pub val_miou: Option<f64>,
}

mod stage_name {
    use super::Stage;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: &Stage, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(s.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Stage, D::Error> {
        let s = String::deserialize(de)?;
        Stage::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown stage {s}")))
    }
}

/// Line-delimited JSON, one record per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<LogRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn extend(&mut self, other: &MetricsLog) {
        self.records.extend(other.records.iter().cloned());
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log records serialize") + "\n")
            .collect()
    }

    pub fn parse(text: &str) -> Result<MetricsLog> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::invalid(format!("metrics log line {}: {e}", i + 1))))
            .collect::<Result<_>>()?;
        Ok(MetricsLog { records })
    }

    /// Last logged validation mIoU.
    pub fn final_miou(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_miou)
    }
}
