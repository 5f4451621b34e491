//! Byte-level accounting of per-round traffic under an explicit encoding
//! model. The ledger never inspects payload contents; it prices shapes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    /// Bytes.
    B,
    /// Megabytes, 1e6 bytes.
    MB,
    /// Megabits, 8 bits per byte over 1e6.
    Mb,
}

impl Unit {
    pub fn from_bytes(&self, bytes: u64) -> f64 {
        match self {
            Unit::B => bytes as f64,
            Unit::MB => bytes as f64 / 1e6,
            Unit::Mb => bytes as f64 * 8.0 / 1e6,
        }
    }

    pub fn to_bytes(&self, value: f64) -> u64 {
        match self {
            Unit::B => value.round() as u64,
            Unit::MB => (value * 1e6).round() as u64,
            Unit::Mb => (value * 1e6 / 8.0).round() as u64,
        }
    }
}

impl std::str::FromStr for Unit {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" => Ok(Unit::B),
            "MB" => Ok(Unit::MB),
            "Mb" => Ok(Unit::Mb),
            _ => Err(CoreError::config(format!(
                "unknown unit '{}' (expected B, MB, or Mb)",
                s
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScope {
    All,
    TrainableOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownloadConvention {
    /// One payload per round regardless of recipient count.
    BroadcastOnce,
    PerRecipient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodingModel {
    pub bytes_per_value: u64,
    pub unit: Unit,
    pub overhead_bytes_per_message: u64,
    pub param_scope: ParamScope,
    pub download: DownloadConvention,
}

impl Default for EncodingModel {
    fn default() -> Self {
        EncodingModel {
            bytes_per_value: 4,
            unit: Unit::Mb,
            overhead_bytes_per_message: 0,
            param_scope: ParamScope::All,
            download: DownloadConvention::BroadcastOnce,
        }
    }
}

impl EncodingModel {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.bytes_per_value) {
            return Err(CoreError::config(format!(
                "bytes_per_value {} not in {{2, 4, 8}}",
                self.bytes_per_value
            )));
        }
        Ok(())
    }
}

/// Cost of one soft-label matrix.
pub fn soft_label_payload(n_rows: usize, n_classes: usize, enc: &EncodingModel) -> u64 {
    (n_rows * n_classes) as u64 * enc.bytes_per_value + enc.overhead_bytes_per_message
}

/// Cost of one full parameter payload for `spec`.
pub fn parameter_payload(spec: &ModelSpec, enc: &EncodingModel) -> Result<u64> {
    let (total, trainable, _) = spec.count_parameters()?;
    let count = match enc.param_scope {
        ParamScope::All => total,
        ParamScope::TrainableOnly => trainable,
    };
    Ok(count as u64 * enc.bytes_per_value + enc.overhead_bytes_per_message)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upload,
    Download,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    SoftLabels,
    Parameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub direction: Direction,
    pub actor: String,
    pub kind: PayloadKind,
    pub bytes: u64,
}

/// Append-only record of every priced message.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        round: usize,
        direction: Direction,
        actor: impl Into<String>,
        kind: PayloadKind,
        bytes: u64,
    ) {
        self.entries.push(LedgerEntry {
            round,
            direction,
            actor: actor.into(),
            kind,
            bytes,
        });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// (upload_bytes, download_bytes) summed over the round's entries.
    pub fn round_totals(&self, round: usize) -> Result<(u64, u64)> {
        let mut found = false;
        let mut up = 0;
        let mut down = 0;
        for e in &self.entries {
            if e.round == round {
                found = true;
                match e.direction {
                    Direction::Upload => up += e.bytes,
                    Direction::Download => down += e.bytes,
                }
            }
        }
        if !found {
            return Err(CoreError::MissingRound(round));
        }
        Ok((up, down))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::format(e.to_string()))?;
        w.write_record(["round", "direction", "actor", "kind", "bytes"])
            .map_err(|e| CoreError::format(e.to_string()))?;
        for e in &self.entries {
            let dir = match e.direction {
                Direction::Upload => "upload",
                Direction::Download => "download",
            };
            let kind = match e.kind {
                PayloadKind::SoftLabels => "soft_labels",
                PayloadKind::Parameters => "parameters",
            };
            w.write_record([
                e.round.to_string(),
                dir.to_string(),
                e.actor.clone(),
                kind.to_string(),
                e.bytes.to_string(),
            ])
            .map_err(|e| CoreError::format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}
