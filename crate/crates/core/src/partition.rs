//! Dirichlet allocation of the private pool across clients, plus
//! heterogeneity reporting.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub num_clients: usize,
    /// Dirichlet concentration: large -> uniform (IID), small -> skewed.
    pub alpha: f64,
    pub seed: u64,
    pub min_per_client: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            num_clients: 2,
            alpha: 10000.0,
            seed: 0,
            min_per_client: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Per-client sample indices into the private pool.
    pub assignments: Vec<Vec<usize>>,
    /// Per-client per-class fraction of the client's samples.
    pub class_proportions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionReport {
    pub client_sizes: Vec<usize>,
    pub class_proportions: Vec<Vec<f64>>,
    pub global_proportions: Vec<f64>,
    /// Mean total-variation distance from the global label distribution.
    pub heterogeneity_score: f64,
}

fn num_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Integerizes `proportions * total` with largest-remainder rounding so
/// the counts sum exactly to `total`.
fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // Ties broken by client index for determinism.
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..total - assigned {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

fn draw_assignments(
    labels: &[usize],
    cfg: &PartitionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let k = cfg.num_clients;
    let classes = num_classes(labels);
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in 0..classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(rng);
        let proportions: Vec<f64> = if k == 1 {
            vec![1.0]
        } else {
            let dir = Dirichlet::new(&vec![cfg.alpha; k])
                .map_err(|e| CoreError::domain(format!("bad Dirichlet alpha: {}", e)))?;
            dir.sample(rng)
        };
        let counts = largest_remainder(&proportions, members.len());
        let mut start = 0;
        for (client, &count) in counts.iter().enumerate() {
            assignments[client].extend(&members[start..start + count]);
            start += count;
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(assignments)
}

fn proportions_of(assignments: &[Vec<usize>], labels: &[usize]) -> Vec<Vec<f64>> {
    let classes = num_classes(labels);
    assignments
        .iter()
        .map(|idxs| {
            let mut row = vec![0.0; classes];
            for &i in idxs {
                row[labels[i]] += 1.0;
            }
            if !idxs.is_empty() {
                row.iter_mut().for_each(|v| *v /= idxs.len() as f64);
            }
            row
        })
        .collect()
}

/// Per-class Dirichlet draw over clients, multinomial distribution of the
/// class members with largest-remainder rounding. A bounded re-draw loop
/// enforces `min_per_client`, then a greedy move from the largest client.
pub fn dirichlet_partition(labels: &[usize], cfg: &PartitionConfig) -> Result<Partition> {
    if cfg.num_clients == 0 {
        return Err(CoreError::domain("num_clients must be at least 1"));
    }
    if !(cfg.alpha > 0.0) {
        return Err(CoreError::domain("Dirichlet alpha must be positive"));
    }
    if labels.len() < cfg.num_clients * cfg.min_per_client {
        return Err(CoreError::domain(format!(
            "{} samples cannot give {} clients {} each",
            labels.len(),
            cfg.num_clients,
            cfg.min_per_client
        )));
    }
    const MAX_REDRAWS: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, "partition", 0));
    let mut assignments = draw_assignments(labels, cfg, &mut rng)?;
    for _ in 0..MAX_REDRAWS {
        if assignments.iter().all(|a| a.len() >= cfg.min_per_client) {
            break;
        }
        assignments = draw_assignments(labels, cfg, &mut rng)?;
    }
    // Greedy fallback: move samples from the largest client.
    loop {
        let Some(needy) = assignments
            .iter()
            .position(|a| a.len() < cfg.min_per_client)
        else {
            break;
        };
        let donor = (0..assignments.len())
            .max_by_key(|&i| assignments[i].len())
            .unwrap();
        let moved = assignments[donor].pop().ok_or_else(|| {
            CoreError::domain("cannot satisfy min_per_client: pool exhausted")
        })?;
        assignments[needy].push(moved);
        assignments[needy].sort_unstable();
    }
    let class_proportions = proportions_of(&assignments, labels);
    Ok(Partition {
        assignments,
        class_proportions,
    })
}

/// Sizes, class mixture, and the mean total-variation heterogeneity score.
pub fn partition_stats(partition: &Partition, global_labels: &[usize]) -> PartitionReport {
    let classes = num_classes(global_labels);
    let mut global = vec![0.0; classes];
    for &l in global_labels {
        global[l] += 1.0;
    }
    global
        .iter_mut()
        .for_each(|v| *v /= global_labels.len() as f64);
    let tv: Vec<f64> = partition
        .class_proportions
        .iter()
        .map(|row| {
            0.5 * row
                .iter()
                .zip(&global)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .collect();
    PartitionReport {
        client_sizes: partition.assignments.iter().map(|a| a.len()).collect(),
        class_proportions: partition.class_proportions.clone(),
        global_proportions: global,
        heterogeneity_score: tv.iter().sum::<f64>() / tv.len() as f64,
    }
}

/// `client_id,sample_index` CSV for audit.
pub fn write_partition_csv(partition: &Partition, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::format(e.to_string()))?;
    w.write_record(["client_id", "sample_index"])
        .map_err(|e| CoreError::format(e.to_string()))?;
    for (client, idxs) in partition.assignments.iter().enumerate() {
        for &i in idxs {
            w.write_record([client.to_string(), i.to_string()])
                .map_err(|e| CoreError::format(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}
