//! The federated distillation protocol: per-round local teacher training,
//! tempered soft-label generation on the public set, server-side
//! averaging, and student training under the combined loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comms::{
    soft_label_payload, CommLedger, Direction, DownloadConvention, EncodingModel, PayloadKind,
};
use crate::datasets::{ExperimentData, LabeledDataset};
use crate::derive_seed;
use crate::error::{CoreError, Result};
use crate::nn::{
    cross_entropy, forward, kl_divergence, softmax_rows, train_step, train_step_detailed,
    LossSpec, Mode, ModelSpec, ModelState, Optimizer, OptimizerConfig,
};
use crate::partition::Partition;
use crate::report::{ExperimentReport, RoundMetrics, SCHEMA_VERSION};
use crate::tensor::Tensor;

/// Per-teacher (or aggregated) probability rows over the public set.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelBatch {
    pub probabilities: Tensor,
    pub temperature: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub num_teachers: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub temperature: f64,
    /// Weight of the hard-label term in the combined student loss.
    pub alpha: f64,
    pub batch_size: usize,
    pub teacher_spec: ModelSpec,
    pub student_spec: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Re-softmax the aggregated probabilities before the KL target
    /// (literal reading of the protocol; off by default).
    pub strict_double_softmax: bool,
    /// Scale the distillation term by T^2.
    pub t_squared_scaling: bool,
    /// Retrain teachers from scratch each round instead of continuing.
    pub reset_teachers_each_round: bool,
    /// Worker threads for per-teacher work; results are schedule-invariant.
    pub threads: usize,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_teachers == 0 || self.rounds == 0 || self.local_epochs == 0 {
            return Err(CoreError::config(
                "num_teachers, rounds, and local_epochs must be at least 1",
            ));
        }
        if self.batch_size == 0 {
            return Err(CoreError::config("batch_size must be at least 1"));
        }
        LossSpec::combined(self.alpha, self.temperature).validate()?;
        Ok(())
    }

    fn student_loss_spec(&self) -> LossSpec {
        LossSpec {
            t_squared_scaling: self.t_squared_scaling,
            ..LossSpec::combined(self.alpha, self.temperature)
        }
    }
}

fn batched_indices(n: usize, batch_size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n.div_ceil(batch_size)).map(move |b| b * batch_size..((b + 1) * batch_size).min(n))
}

/// Epochs of seeded-shuffle minibatch training under `loss`. Returns the
/// mean loss of each epoch.
fn train_epochs(
    state: &mut ModelState,
    data: &LabeledDataset,
    soft_targets: Option<&Tensor>,
    loss: &LossSpec,
    epochs: usize,
    batch_size: usize,
    opt_cfg: OptimizerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut opt = Optimizer::new(opt_cfg);
    let n = data.len();
    let classes = state.spec.infer_shapes()?.last().unwrap().numel();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "epoch-shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for range in batched_indices(n, batch_size) {
            let idxs = &order[range];
            let (batch, labels) = data.batch(idxs)?;
            let targets = match soft_targets {
                Some(t) => {
                    let mut rows = Vec::with_capacity(idxs.len() * classes);
                    for &i in idxs {
                        rows.extend_from_slice(&t.data()[i * classes..(i + 1) * classes]);
                    }
                    Some(Tensor::from_vec(&[idxs.len(), classes], rows)?)
                }
                None => None,
            };
            total += train_step(state, &mut opt, &batch, &labels, targets.as_ref(), loss)?;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(epoch_losses)
}

/// Local cross-entropy training of one teacher. Returns the per-epoch mean
/// loss trace; with zero epochs the state is untouched.
pub fn train_teacher(
    state: &mut ModelState,
    data: &LabeledDataset,
    epochs: usize,
    batch_size: usize,
    opt_cfg: OptimizerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(CoreError::domain("teacher has no local data"));
    }
    state.mode = Mode::Train;
    train_epochs(
        state,
        data,
        None,
        &LossSpec::cross_entropy(),
        epochs,
        batch_size,
        opt_cfg,
        seed,
    )
}

/// Tempered soft labels of one model over the public inputs.
pub fn generate_soft_labels(
    model: &ModelState,
    public: &LabeledDataset,
    temperature: f64,
    batch_size: usize,
) -> Result<SoftLabelBatch> {
    let eval = model.clone().with_mode(Mode::Eval);
    let classes = eval.spec.infer_shapes()?.last().unwrap().numel();
    let mut rows = Vec::with_capacity(public.len() * classes);
    for range in batched_indices(public.len(), batch_size) {
        let idxs: Vec<usize> = range.collect();
        let (batch, _) = public.batch(&idxs)?;
        let logits = forward(&eval, &batch)?;
        rows.extend_from_slice(softmax_rows(&logits, temperature)?.data());
    }
    Ok(SoftLabelBatch {
        probabilities: Tensor::from_vec(&[public.len(), classes], rows)?,
        temperature,
        source: "model".into(),
    })
}

/// Elementwise mean of the teachers' soft labels.
pub fn aggregate_soft_labels(batches: &[SoftLabelBatch]) -> Result<SoftLabelBatch> {
    let first = batches
        .first()
        .ok_or_else(|| CoreError::domain("cannot aggregate zero batches"))?;
    for b in batches {
        if b.probabilities.shape() != first.probabilities.shape() {
            return Err(CoreError::shape(format!(
                "soft-label shape mismatch: {:?} vs {:?}",
                b.probabilities.shape(),
                first.probabilities.shape()
            )));
        }
        if b.temperature != first.temperature {
            return Err(CoreError::config(format!(
                "mixed soft-label temperatures {} and {}",
                first.temperature, b.temperature
            )));
        }
    }
    let mut data = vec![0.0; first.probabilities.numel()];
    for b in batches {
        for (d, v) in data.iter_mut().zip(b.probabilities.data()) {
            *d += v;
        }
    }
    let k = batches.len() as f64;
    data.iter_mut().for_each(|v| *v /= k);
    Ok(SoftLabelBatch {
        probabilities: Tensor::from_vec(first.probabilities.shape(), data)?,
        temperature: first.temperature,
        source: "aggregate".into(),
    })
}

fn distill_target(p_agg: &SoftLabelBatch, cfg: &DistillConfig) -> Result<Tensor> {
    if cfg.strict_double_softmax {
        softmax_rows(&p_agg.probabilities, cfg.temperature)
    } else {
        Ok(p_agg.probabilities.clone())
    }
}

/// Eval-mode student losses over the full public set:
/// (total, student CE at T=1, KL against the aggregated labels at T).
pub fn student_losses(
    student: &ModelState,
    public: &LabeledDataset,
    p_agg: &SoftLabelBatch,
    cfg: &DistillConfig,
) -> Result<(f64, f64, f64)> {
    if p_agg.probabilities.shape()[0] != public.len() {
        return Err(CoreError::shape(format!(
            "{} aggregated rows for a public set of {}",
            p_agg.probabilities.shape()[0],
            public.len()
        )));
    }
    let eval = student.clone().with_mode(Mode::Eval);
    let mut logits_rows = Vec::new();
    let mut labels = Vec::with_capacity(public.len());
    let classes = eval.spec.infer_shapes()?.last().unwrap().numel();
    for range in batched_indices(public.len(), cfg.batch_size) {
        let idxs: Vec<usize> = range.collect();
        let (batch, batch_labels) = public.batch(&idxs)?;
        logits_rows.extend_from_slice(forward(&eval, &batch)?.data());
        labels.extend(batch_labels);
    }
    let logits = Tensor::from_vec(&[public.len(), classes], logits_rows)?;
    let student_loss = cross_entropy(&softmax_rows(&logits, 1.0)?, &labels)?;
    let target = distill_target(p_agg, cfg)?;
    let scale = if cfg.t_squared_scaling {
        cfg.temperature * cfg.temperature
    } else {
        1.0
    };
    let distill_loss = kl_divergence(&target, &softmax_rows(&logits, cfg.temperature)?)? * scale;
    let total = cfg.alpha * student_loss + (1.0 - cfg.alpha) * distill_loss;
    Ok((total, student_loss, distill_loss))
}

/// Combined-loss training of the student on the public set. Returns the
/// per-epoch (total, student, distill) triples observed during training.
pub fn train_student(
    student: &mut ModelState,
    public: &LabeledDataset,
    p_agg: &SoftLabelBatch,
    epochs: usize,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    let target = distill_target(p_agg, cfg)?;
    student.mode = Mode::Train;
    let loss = cfg.student_loss_spec();
    let mut trace = Vec::with_capacity(epochs);
    let n = public.len();
    let classes = student.spec.infer_shapes()?.last().unwrap().numel();
    let mut opt = Optimizer::new(cfg.optimizer);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "epoch-shuffle", epoch as u64));
        order.shuffle(&mut rng);
        let (mut tot, mut stu, mut dis) = (0.0, 0.0, 0.0);
        let mut batches = 0;
        for range in batched_indices(n, cfg.batch_size) {
            let idxs = &order[range];
            let (batch, labels) = public.batch(idxs)?;
            let mut rows = Vec::with_capacity(idxs.len() * classes);
            for &i in idxs {
                rows.extend_from_slice(&target.data()[i * classes..(i + 1) * classes]);
            }
            let targets = Tensor::from_vec(&[idxs.len(), classes], rows)?;
            let (t, s, d) =
                train_step_detailed(student, &mut opt, &batch, &labels, Some(&targets), &loss)?;
            tot += t;
            stu += s;
            dis += d;
            batches += 1;
        }
        trace.push((
            tot / batches as f64,
            stu / batches as f64,
            dis / batches as f64,
        ));
    }
    Ok(trace)
}

/// Accuracy (argmax, ties to the lowest index) and mean CE loss on a test
/// set, in eval mode.
pub fn evaluate(model: &ModelState, test: &LabeledDataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(CoreError::domain("cannot evaluate on an empty test set"));
    }
    let eval = model.clone().with_mode(Mode::Eval);
    let classes = eval.spec.infer_shapes()?.last().unwrap().numel();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let batch_size = 32;
    for range in batched_indices(test.len(), batch_size) {
        let idxs: Vec<usize> = range.collect();
        let (batch, labels) = test.batch(&idxs)?;
        let logits = forward(&eval, &batch)?;
        let probs = softmax_rows(&logits, 1.0)?;
        loss_sum += cross_entropy(&probs, &labels)? * idxs.len() as f64;
        for (r, &label) in labels.iter().enumerate() {
            let row = &logits.data()[r * classes..(r + 1) * classes];
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok((
        correct as f64 / test.len() as f64,
        loss_sum / test.len() as f64,
    ))
}

/// Output of one teacher's per-round work.
struct TeacherRound {
    final_loss: f64,
    soft_labels: SoftLabelBatch,
}

/// One teacher's round: (optional reset,) local CE training, then soft
/// labels on the public set.
fn teacher_round(
    state: &mut ModelState,
    local: &LabeledDataset,
    public: &LabeledDataset,
    cfg: &DistillConfig,
    teacher_id: usize,
    round: usize,
) -> Result<TeacherRound> {
    if cfg.reset_teachers_each_round {
        *state = ModelState::init(
            &cfg.teacher_spec,
            derive_seed(cfg.seed, "teacher-init", teacher_id as u64),
        )?;
    }
    let seed = derive_seed(
        cfg.seed,
        "teacher-train",
        (round * cfg.num_teachers + teacher_id) as u64,
    );
    let trace = train_teacher(
        state,
        local,
        cfg.local_epochs,
        cfg.batch_size,
        cfg.optimizer,
        seed,
    )
    .map_err(|e| CoreError::numeric(format!("teacher {}: {}", teacher_id, e)))?;
    let mut soft_labels = generate_soft_labels(state, public, cfg.temperature, cfg.batch_size)?;
    soft_labels.source = format!("teacher{}", teacher_id);
    Ok(TeacherRound {
        final_loss: *trace.last().unwrap(),
        soft_labels,
    })
}

/// Full protocol run: teachers train locally each round, publish tempered
/// soft labels on the public set, the server averages them, and the
/// student trains under the combined loss. Teacher work may be threaded;
/// the result is identical for any schedule.
pub fn run_fkd_experiment(
    cfg: &DistillConfig,
    data: &ExperimentData,
    partition: &Partition,
    enc: &EncodingModel,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    enc.validate()?;
    if partition.assignments.len() != cfg.num_teachers {
        return Err(CoreError::config(format!(
            "partition has {} clients but config asks for {} teachers",
            partition.assignments.len(),
            cfg.num_teachers
        )));
    }
    let classes = cfg.student_spec.num_classes()?;
    if cfg.teacher_spec.num_classes()? != classes {
        return Err(CoreError::config(
            "teacher and student specs must produce the same number of logits",
        ));
    }

    let teacher_data: Vec<LabeledDataset> = partition
        .assignments
        .iter()
        .map(|idxs| data.private_pool.subset(idxs))
        .collect();
    let mut teachers: Vec<ModelState> = (0..cfg.num_teachers)
        .map(|t| ModelState::init(&cfg.teacher_spec, derive_seed(cfg.seed, "teacher-init", t as u64)))
        .collect::<Result<_>>()?;
    let mut student = ModelState::init(&cfg.student_spec, derive_seed(cfg.seed, "student-init", 0))?;

    let mut ledger = CommLedger::new();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let results = run_teachers(cfg, &mut teachers, &teacher_data, data, round)?;
        let mut teacher_losses = Vec::with_capacity(cfg.num_teachers);
        let mut batches = Vec::with_capacity(cfg.num_teachers);
        for (t, r) in results.into_iter().enumerate() {
            let bytes = soft_label_payload(data.public_set.len(), classes, enc);
            ledger.record(
                round,
                Direction::Upload,
                format!("teacher{}", t),
                PayloadKind::SoftLabels,
                bytes,
            );
            teacher_losses.push(r.final_loss);
            batches.push(r.soft_labels);
        }
        let p_agg = aggregate_soft_labels(&batches)?;
        let agg_bytes = soft_label_payload(data.public_set.len(), classes, enc);
        match enc.download {
            DownloadConvention::BroadcastOnce => {
                ledger.record(
                    round,
                    Direction::Download,
                    "broadcast",
                    PayloadKind::SoftLabels,
                    agg_bytes,
                );
            }
            DownloadConvention::PerRecipient => {
                for t in 0..cfg.num_teachers {
                    ledger.record(
                        round,
                        Direction::Download,
                        format!("teacher{}", t),
                        PayloadKind::SoftLabels,
                        agg_bytes,
                    );
                }
            }
        }
        train_student(
            &mut student,
            &data.public_set,
            &p_agg,
            cfg.local_epochs,
            cfg,
            derive_seed(cfg.seed, "student-train", round as u64),
        )?;
        let (total, stu, dis) = student_losses(&student, &data.public_set, &p_agg, cfg)?;
        let (test_accuracy, test_loss) = evaluate(&student, &data.test_set)?;
        let (upload_bytes, download_bytes) = ledger.round_totals(round)?;
        rounds.push(RoundMetrics {
            round,
            teacher_losses,
            student_total_loss: total,
            student_loss: stu,
            distill_loss: dis,
            test_accuracy,
            test_loss,
            upload_bytes,
            download_bytes,
        });
    }
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        protocol: "fkd".into(),
        seed: cfg.seed,
        loss_alpha: cfg.alpha,
        rounds,
        ledger,
    })
}

/// Runs every teacher's round, serially or across a thread scope. Outputs
/// are collected by teacher index, so scheduling cannot change results.
fn run_teachers(
    cfg: &DistillConfig,
    teachers: &mut [ModelState],
    teacher_data: &[LabeledDataset],
    data: &ExperimentData,
    round: usize,
) -> Result<Vec<TeacherRound>> {
    let public = &data.public_set;
    if cfg.threads <= 1 {
        teachers
            .iter_mut()
            .zip(teacher_data)
            .enumerate()
            .map(|(t, (state, local))| teacher_round(state, local, public, cfg, t, round))
            .collect()
    } else {
        let mut slots: Vec<Option<Result<TeacherRound>>> =
            (0..teachers.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            for (t, ((state, local), slot)) in teachers
                .iter_mut()
                .zip(teacher_data)
                .zip(slots.iter_mut())
                .enumerate()
            {
                scope.spawn(move || {
                    *slot = Some(teacher_round(state, local, public, cfg, t, round));
                });
            }
        });
        slots.into_iter().map(|s| s.unwrap()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, split_dataset, SplitSpec};
    use crate::nn::state::trainable_tensors_mut;
    use crate::nn::{LayerSpec, Padding};
    use crate::partition::{dirichlet_partition, PartitionConfig};

    fn soft(rows: Vec<Vec<f64>>, temperature: f64, source: &str) -> SoftLabelBatch {
        let classes = rows[0].len();
        let n = rows.len();
        SoftLabelBatch {
            probabilities: Tensor::from_vec(
                &[n, classes],
                rows.into_iter().flatten().collect(),
            )
            .unwrap(),
            temperature,
            source: source.into(),
        }
    }

    fn dense_spec(h: usize, w: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            input_shape: (h, w, 1),
            layers: vec![LayerSpec::Dense {
                out_units: classes,
            }],
        }
    }

    fn toy_conv_spec(classes: usize) -> ModelSpec {
        ModelSpec {
            input_shape: (12, 12, 1),
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                    padding: Padding::Same,
                },
                LayerSpec::LeakyRelu {
                    negative_slope: 0.01,
                },
                LayerSpec::Maxpool2d {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    out_units: classes,
                },
            ],
        }
    }

    fn toy_config(seed: u64, threads: usize) -> DistillConfig {
        DistillConfig {
            num_teachers: 2,
            rounds: 2,
            local_epochs: 1,
            temperature: 10.0,
            alpha: 0.1,
            batch_size: 16,
            teacher_spec: toy_conv_spec(3),
            student_spec: dense_spec(12, 12, 3),
            optimizer: OptimizerConfig {
                learning_rate: 0.05,
                momentum: 0.0,
            },
            seed,
            strict_double_softmax: false,
            t_squared_scaling: false,
            reset_teachers_each_round: false,
            threads,
        }
    }

    fn toy_data(seed: u64) -> ExperimentData {
        let pool = generate_synthetic(3, 20, (12, 12), seed).unwrap();
        split_dataset(
            &pool,
            &SplitSpec {
                seed,
                ..SplitSpec::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn aggregate_of_one_is_identity() {
        let b = soft(vec![vec![0.2, 0.3, 0.5], vec![0.1, 0.1, 0.8]], 10.0, "teacher0");
        let agg = aggregate_soft_labels(std::slice::from_ref(&b)).unwrap();
        assert_eq!(agg.probabilities, b.probabilities);
        assert_eq!(agg.source, "aggregate");
        assert_eq!(agg.temperature, 10.0);
    }

    #[test]
    fn aggregate_is_elementwise_mean_and_order_invariant() {
        let a = soft(vec![vec![1.0, 0.0], vec![0.5, 0.5]], 5.0, "a");
        let b = soft(vec![vec![0.0, 1.0], vec![0.25, 0.75]], 5.0, "b");
        let ab = aggregate_soft_labels(&[a.clone(), b.clone()]).unwrap();
        let ba = aggregate_soft_labels(&[b, a]).unwrap();
        assert_eq!(ab.probabilities.data(), &[0.5, 0.5, 0.375, 0.625]);
        assert_eq!(ab, ba);
    }

    #[test]
    fn aggregate_preserves_row_sums() {
        let data = toy_data(3);
        let cfg = toy_config(3, 1);
        let state = ModelState::init(&cfg.teacher_spec, 7).unwrap();
        let sl = generate_soft_labels(&state, &data.public_set, 10.0, 8).unwrap();
        let agg = aggregate_soft_labels(&[sl.clone(), sl]).unwrap();
        let classes = 3;
        for row in agg.probabilities.data().chunks(classes) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row sum {}", s);
        }
    }

    #[test]
    fn aggregate_rejects_mismatches() {
        let a = soft(vec![vec![1.0, 0.0]], 5.0, "a");
        let wrong_shape = soft(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 5.0, "b");
        let wrong_temp = soft(vec![vec![1.0, 0.0]], 6.0, "b");
        assert!(aggregate_soft_labels(&[]).is_err());
        assert!(aggregate_soft_labels(&[a.clone(), wrong_shape]).is_err());
        assert!(aggregate_soft_labels(&[a, wrong_temp]).is_err());
    }

    #[test]
    fn soft_labels_are_row_stochastic_and_batch_size_invariant() {
        let data = toy_data(5);
        let state = ModelState::init(&toy_conv_spec(3), 9).unwrap();
        let small = generate_soft_labels(&state, &data.public_set, 10.0, 4).unwrap();
        let large = generate_soft_labels(&state, &data.public_set, 10.0, 7).unwrap();
        for (a, b) in small
            .probabilities
            .data()
            .iter()
            .zip(large.probabilities.data())
        {
            assert!((a - b).abs() < 1e-12);
        }
        for row in small.probabilities.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn student_losses_recombine_by_alpha() {
        let data = toy_data(7);
        let mut cfg = toy_config(7, 1);
        let student = ModelState::init(&cfg.student_spec, 13).unwrap();
        let teacher = ModelState::init(&cfg.teacher_spec, 14).unwrap();
        let p_agg = aggregate_soft_labels(&[generate_soft_labels(
            &teacher,
            &data.public_set,
            cfg.temperature,
            cfg.batch_size,
        )
        .unwrap()])
        .unwrap();

        let (total, s, d) = student_losses(&student, &data.public_set, &p_agg, &cfg).unwrap();
        assert!((total - (0.1 * s + 0.9 * d)).abs() < 1e-12);

        cfg.alpha = 1.0;
        let (total, s, _) = student_losses(&student, &data.public_set, &p_agg, &cfg).unwrap();
        assert!((total - s).abs() < 1e-12);

        cfg.alpha = 0.0;
        let (total, _, d) = student_losses(&student, &data.public_set, &p_agg, &cfg).unwrap();
        assert!((total - d).abs() < 1e-12);
    }

    #[test]
    fn student_losses_reject_row_count_mismatch() {
        let data = toy_data(8);
        let cfg = toy_config(8, 1);
        let student = ModelState::init(&cfg.student_spec, 1).unwrap();
        let p_agg = soft(vec![vec![0.5, 0.3, 0.2]], cfg.temperature, "aggregate");
        assert!(student_losses(&student, &data.public_set, &p_agg, &cfg).is_err());
    }

    #[test]
    fn train_teacher_zero_epochs_and_zero_lr_leave_state_untouched() {
        let data = toy_data(9);
        let spec = dense_spec(12, 12, 3);
        let mut state = ModelState::init(&spec, 2).unwrap();
        let before = state.clone();
        let trace = train_teacher(&mut state, &data.private_pool, 0, 8, OptimizerConfig::default(), 1)
            .unwrap();
        assert!(trace.is_empty());
        assert_eq!(state, before);

        let frozen = OptimizerConfig {
            learning_rate: 0.0,
            momentum: 0.0,
        };
        let trace = train_teacher(&mut state, &data.private_pool, 2, 8, frozen, 1).unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(state, before);
        // With nothing moving, every epoch sees the same loss.
        assert!((trace[0] - trace[1]).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_teacher_loss() {
        let data = toy_data(10);
        let mut state = ModelState::init(&dense_spec(12, 12, 3), 3).unwrap();
        let trace = train_teacher(
            &mut state,
            &data.private_pool,
            5,
            16,
            OptimizerConfig {
                learning_rate: 0.1,
                momentum: 0.0,
            },
            4,
        )
        .unwrap();
        assert!(
            trace.last().unwrap() < trace.first().unwrap(),
            "loss trace {:?}",
            trace
        );
    }

    #[test]
    fn evaluate_breaks_ties_toward_the_lowest_index() {
        // All-zero weights give all-zero logits: every prediction is class 0.
        let data = toy_data(11);
        let mut state = ModelState::init(&dense_spec(12, 12, 3), 5).unwrap();
        for lp in state.params.iter_mut() {
            for t in trainable_tensors_mut(lp) {
                t.fill(0.0);
            }
        }
        let (acc, loss) = evaluate(&state, &data.test_set).unwrap();
        let zeros = data
            .test_set
            .labels
            .iter()
            .filter(|&&l| l == 0)
            .count() as f64;
        assert!((acc - zeros / data.test_set.len() as f64).abs() < 1e-12);
        assert!((loss - 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn evaluate_rejects_empty_test_set() {
        let data = toy_data(12);
        let state = ModelState::init(&dense_spec(12, 12, 3), 6).unwrap();
        let empty = data.test_set.subset(&[]);
        assert!(evaluate(&state, &empty).is_err());
    }

    #[test]
    fn experiment_is_deterministic_and_schedule_invariant() {
        let data = toy_data(13);
        let partition = dirichlet_partition(
            &data.private_pool.labels,
            &PartitionConfig {
                num_clients: 2,
                alpha: 10000.0,
                seed: 13,
                min_per_client: 1,
            },
        )
        .unwrap();
        let enc = EncodingModel::default();

        let serial = run_fkd_experiment(&toy_config(13, 1), &data, &partition, &enc).unwrap();
        let again = run_fkd_experiment(&toy_config(13, 1), &data, &partition, &enc).unwrap();
        let threaded = run_fkd_experiment(&toy_config(13, 2), &data, &partition, &enc).unwrap();
        assert_eq!(serial.to_json(), again.to_json());
        // threads only changes scheduling, which the config doesn't record
        assert_eq!(serial.rounds, threaded.rounds);
        assert_eq!(serial.ledger, threaded.ledger);

        let other_seed = run_fkd_experiment(&toy_config(14, 1), &data, &partition, &enc).unwrap();
        assert_ne!(serial.rounds, other_seed.rounds);
    }

    #[test]
    fn ledger_records_per_teacher_uploads_and_one_broadcast() {
        let data = toy_data(15);
        let partition = dirichlet_partition(
            &data.private_pool.labels,
            &PartitionConfig {
                num_clients: 2,
                alpha: 10000.0,
                seed: 15,
                min_per_client: 1,
            },
        )
        .unwrap();
        let cfg = toy_config(15, 1);
        let enc = EncodingModel::default();
        let report = run_fkd_experiment(&cfg, &data, &partition, &enc).unwrap();

        let per_message =
            data.public_set.len() as u64 * 3 * enc.bytes_per_value + enc.overhead_bytes_per_message;
        for r in &report.rounds {
            assert_eq!(r.upload_bytes, 2 * per_message);
            assert_eq!(r.download_bytes, per_message);
        }
        assert_eq!(report.protocol, "fkd");
        assert_eq!(report.loss_alpha, 0.1);
        assert_eq!(report.rounds.len(), 2);
        for r in &report.rounds {
            assert_eq!(r.teacher_losses.len(), 2);
        }
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = toy_config(0, 1);
        cfg.num_teachers = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config(0, 1);
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config(0, 1);
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config(0, 1);
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
        assert!(toy_config(0, 1).validate().is_ok());
    }

    #[test]
    fn mismatched_partition_or_heads_rejected() {
        let data = toy_data(16);
        let partition = dirichlet_partition(
            &data.private_pool.labels,
            &PartitionConfig {
                num_clients: 3,
                alpha: 10000.0,
                seed: 16,
                min_per_client: 1,
            },
        )
        .unwrap();
        let cfg = toy_config(16, 1); // wants 2 teachers
        let enc = EncodingModel::default();
        assert!(run_fkd_experiment(&cfg, &data, &partition, &enc).is_err());

        let mut cfg = toy_config(16, 1);
        cfg.student_spec = dense_spec(12, 12, 4);
        let partition2 = dirichlet_partition(
            &data.private_pool.labels,
            &PartitionConfig {
                num_clients: 2,
                alpha: 10000.0,
                seed: 16,
                min_per_client: 1,
            },
        )
        .unwrap();
        assert!(run_fkd_experiment(&cfg, &data, &partition2, &enc).is_err());
    }
}
