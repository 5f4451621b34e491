//! Parameter-averaging baseline sharing the same trainer, partitioner,
//! report schema, and comms ledger as the distillation protocol.

use serde::{Deserialize, Serialize};

use crate::comms::{
    parameter_payload, CommLedger, Direction, DownloadConvention, EncodingModel, PayloadKind,
};
use crate::datasets::{ExperimentData, LabeledDataset};
use crate::derive_seed;
use crate::error::{CoreError, Result};
use crate::fkd::{evaluate, train_teacher};
use crate::nn::{ModelSpec, ModelState, OptimizerConfig};
use crate::partition::Partition;
use crate::report::{ExperimentReport, RoundMetrics, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    BySampleCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedAvgConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub model_spec: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub weighting: Weighting,
    pub threads: usize,
}

impl FedAvgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.rounds == 0 || self.local_epochs == 0 {
            return Err(CoreError::config(
                "num_clients, rounds, and local_epochs must be at least 1",
            ));
        }
        if self.batch_size == 0 {
            return Err(CoreError::config("batch_size must be at least 1"));
        }
        Ok(())
    }
}

struct ClientRound {
    state: ModelState,
    final_loss: f64,
}

fn client_round(
    global: &ModelState,
    local: &LabeledDataset,
    cfg: &FedAvgConfig,
    client_id: usize,
    round: usize,
) -> Result<ClientRound> {
    let mut state = global.clone();
    let seed = derive_seed(
        cfg.seed,
        "client-train",
        (round * cfg.num_clients + client_id) as u64,
    );
    let trace = train_teacher(
        &mut state,
        local,
        cfg.local_epochs,
        cfg.batch_size,
        cfg.optimizer,
        seed,
    )
    .map_err(|e| CoreError::numeric(format!("client {}: {}", client_id, e)))?;
    Ok(ClientRound {
        state,
        final_loss: *trace.last().unwrap(),
    })
}

fn run_clients(
    global: &ModelState,
    client_data: &[LabeledDataset],
    cfg: &FedAvgConfig,
    round: usize,
) -> Result<Vec<ClientRound>> {
    if cfg.threads <= 1 {
        client_data
            .iter()
            .enumerate()
            .map(|(c, local)| client_round(global, local, cfg, c, round))
            .collect()
    } else {
        let mut slots: Vec<Option<Result<ClientRound>>> =
            (0..client_data.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (c, (local, slot)) in client_data.iter().zip(slots.iter_mut()).enumerate() {
                scope.spawn(move || {
                    *slot = Some(client_round(global, local, cfg, c, round));
                });
            }
        });
        slots.into_iter().map(|s| s.unwrap()).collect()
    }
}

/// One aggregation round: clients copy the global model, train locally,
/// and the server replaces the global parameters with their (weighted)
/// mean, summing in ascending client order. Returns the new global state
/// and the clients' final local losses.
pub fn fedavg_round(
    global: &ModelState,
    partition: &Partition,
    data: &ExperimentData,
    cfg: &FedAvgConfig,
    round: usize,
) -> Result<(ModelState, Vec<f64>)> {
    let client_data: Vec<LabeledDataset> = partition
        .assignments
        .iter()
        .map(|idxs| data.private_pool.subset(idxs))
        .collect();
    let results = run_clients(global, &client_data, cfg, round)?;
    let weights: Vec<f64> = match cfg.weighting {
        Weighting::Uniform => vec![1.0; results.len()],
        Weighting::BySampleCount => client_data.iter().map(|d| d.len() as f64).collect(),
    };
    let states: Vec<&ModelState> = results.iter().map(|r| &r.state).collect();
    let new_global = ModelState::weighted_average(&states, &weights)?;
    Ok((new_global, results.iter().map(|r| r.final_loss).collect()))
}

/// Full baseline run with the shared report schema: per-round global test
/// metrics plus parameter-payload ledger entries.
pub fn run_fedavg_experiment(
    cfg: &FedAvgConfig,
    data: &ExperimentData,
    partition: &Partition,
    enc: &EncodingModel,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    enc.validate()?;
    if partition.assignments.len() != cfg.num_clients {
        return Err(CoreError::config(format!(
            "partition has {} clients but config asks for {}",
            partition.assignments.len(),
            cfg.num_clients
        )));
    }
    let mut global = ModelState::init(&cfg.model_spec, derive_seed(cfg.seed, "global-init", 0))?;
    let payload = parameter_payload(&cfg.model_spec, enc)?;
    let mut ledger = CommLedger::new();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let (new_global, client_losses) = fedavg_round(&global, partition, data, cfg, round)?;
        global = new_global;
        for c in 0..cfg.num_clients {
            ledger.record(
                round,
                Direction::Upload,
                format!("client{}", c),
                PayloadKind::Parameters,
                payload,
            );
        }
        match enc.download {
            DownloadConvention::BroadcastOnce => {
                ledger.record(
                    round,
                    Direction::Download,
                    "broadcast",
                    PayloadKind::Parameters,
                    payload,
                );
            }
            DownloadConvention::PerRecipient => {
                for c in 0..cfg.num_clients {
                    ledger.record(
                        round,
                        Direction::Download,
                        format!("client{}", c),
                        PayloadKind::Parameters,
                        payload,
                    );
                }
            }
        }
        let (test_accuracy, test_loss) = evaluate(&global, &data.test_set)?;
        let (upload_bytes, download_bytes) = ledger.round_totals(round)?;
        rounds.push(RoundMetrics {
            round,
            teacher_losses: client_losses,
            student_total_loss: test_loss,
            student_loss: test_loss,
            distill_loss: 0.0,
            test_accuracy,
            test_loss,
            upload_bytes,
            download_bytes,
        });
    }
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        protocol: "fedavg".into(),
        seed: cfg.seed,
        loss_alpha: 1.0,
        rounds,
        ledger,
    })
}
