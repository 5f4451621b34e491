//! Experiment report schema: per-round metrics plus the comms ledger,
//! emitted as versioned JSON and a per-round CSV series.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::comms::CommLedger;
use crate::error::{CoreError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Final local epoch mean loss per teacher (or FedAvg client).
    pub teacher_losses: Vec<f64>,
    pub student_total_loss: f64,
    pub student_loss: f64,
    pub distill_loss: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    pub schema_version: u32,
    /// "fkd" or "fedavg".
    pub protocol: String,
    pub seed: u64,
    pub loss_alpha: f64,
    pub rounds: Vec<RoundMetrics>,
    pub ledger: CommLedger,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        // serde_json float formatting is deterministic, so byte-identical
        // runs produce byte-identical reports.
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<ExperimentReport> {
        let report: ExperimentReport = serde_json::from_str(json)
            .map_err(|e| CoreError::format(format!("report parse: {}", e)))?;
        if report.schema_version != SCHEMA_VERSION {
            return Err(CoreError::Schema(format!(
                "report schema version {} (this build reads {})",
                report.schema_version, SCHEMA_VERSION
            )));
        }
        Ok(report)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.test_accuracy)
    }

    pub fn accuracy_at_round(&self, round: usize) -> Option<f64> {
        self.rounds
            .iter()
            .find(|r| r.round == round)
            .map(|r| r.test_accuracy)
    }

    /// Per-round series for external plotting.
    pub fn write_rounds_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::format(e.to_string()))?;
        w.write_record([
            "round",
            "test_accuracy",
            "test_loss",
            "student_total_loss",
            "student_loss",
            "distill_loss",
            "upload_bytes",
            "download_bytes",
        ])
        .map_err(|e| CoreError::format(e.to_string()))?;
        for r in &self.rounds {
            w.write_record([
                r.round.to_string(),
                r.test_accuracy.to_string(),
                r.test_loss.to_string(),
                r.student_total_loss.to_string(),
                r.student_loss.to_string(),
                r.distill_loss.to_string(),
                r.upload_bytes.to_string(),
                r.download_bytes.to_string(),
            ])
            .map_err(|e| CoreError::format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let report = ExperimentReport {
            schema_version: SCHEMA_VERSION,
            protocol: "fkd".into(),
            seed: 42,
            loss_alpha: 0.1,
            rounds: vec![RoundMetrics {
                round: 1,
                teacher_losses: vec![0.5, 0.25],
                student_total_loss: 0.3,
                student_loss: 0.6,
                distill_loss: 0.2666666666666667,
                test_accuracy: 0.9,
                test_loss: 0.4,
                upload_bytes: 1000,
                download_bytes: 500,
            }],
            ledger: CommLedger::new(),
        };
        let json = report.to_json();
        assert_eq!(ExperimentReport::from_json(&json).unwrap(), report);
    }

    #[test]
    fn schema_mismatch_rejected() {
        let mut report = ExperimentReport {
            schema_version: SCHEMA_VERSION + 1,
            protocol: "fkd".into(),
            seed: 0,
            loss_alpha: 0.1,
            rounds: vec![],
            ledger: CommLedger::new(),
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(matches!(
            ExperimentReport::from_json(&json),
            Err(CoreError::Schema(_))
        ));
        report.schema_version = SCHEMA_VERSION;
        assert!(ExperimentReport::from_json(&serde_json::to_string(&report).unwrap()).is_ok());
    }
}
