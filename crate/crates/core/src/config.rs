//! One TOML document describes a whole experiment: data, splits,
//! partitioning, protocol hyperparameters, model architectures, optimizer,
//! and the comms encoding model. Every field has a sensible default, so an
//! empty document is a valid (tiny, synthetic) run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::comms::EncodingModel;
use crate::datasets::{generate_synthetic, load_manifest, split_dataset, ExperimentData};
use crate::derive_seed;
use crate::error::{CoreError, Result};
use crate::fedavg::{FedAvgConfig, Weighting};
use crate::fkd::DistillConfig;
use crate::nn::{
    student_spec_with_head, LayerSpec, ModelSpec, OptimizerConfig, Padding,
};
use crate::partition::{dirichlet_partition, Partition, PartitionConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Fkd,
    Fedavg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// "synthetic" or a path to a `path,label` manifest CSV.
    pub source: String,
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Grayscale data is replicated to this many channels before training.
    pub channels: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: "synthetic".into(),
            classes: 3,
            per_class: 100,
            height: 32,
            width: 32,
            channels: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub private_fraction: f64,
    pub public_fraction: f64,
    pub test_fraction: f64,
    pub disjoint: bool,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            private_fraction: 0.8,
            public_fraction: 0.5,
            test_fraction: 0.5,
            disjoint: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    /// Dirichlet concentration: 10000 is effectively IID, 0.5 is skewed.
    pub alpha: f64,
    pub min_per_client: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            alpha: 10000.0,
            min_per_client: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub kind: ProtocolKind,
    /// Teacher count under distillation, client count under averaging.
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub temperature: f64,
    /// Hard-label weight in the student's combined loss.
    pub alpha: f64,
    pub batch_size: usize,
    pub strict_double_softmax: bool,
    pub t_squared_scaling: bool,
    pub reset_teachers_each_round: bool,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            kind: ProtocolKind::Fkd,
            clients: 2,
            rounds: 10,
            local_epochs: 5,
            temperature: 10.0,
            alpha: 0.1,
            batch_size: 32,
            strict_double_softmax: false,
            t_squared_scaling: false,
            reset_teachers_each_round: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// "builtin:<name>" or a path to an architecture text file.
    pub teacher: String,
    pub student: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            teacher: "builtin:toy-conv".into(),
            student: "builtin:toy-conv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedAvgSection {
    pub weighting: Weighting,
}

impl Default for FedAvgSection {
    fn default() -> Self {
        FedAvgSection {
            weighting: Weighting::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub split: SplitSection,
    pub partition: PartitionSection,
    pub protocol: ProtocolSection,
    pub model: ModelSection,
    pub optimizer: OptimizerConfig,
    pub fedavg: FedAvgSection,
    pub comms: EncodingModel,
}

/// Small convolutional net that keeps spatial layout through the dense
/// head, sized for quick experiments on small images.
fn toy_conv_spec(input: (usize, usize, usize), classes: usize) -> ModelSpec {
    ModelSpec {
        input_shape: input,
        layers: vec![
            LayerSpec::Conv2d {
                out_channels: 8,
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
            LayerSpec::Dense {
                out_units: classes,
            },
        ],
    }
}

fn toy_dense_spec(input: (usize, usize, usize), classes: usize) -> ModelSpec {
    ModelSpec {
        input_shape: input,
        layers: vec![LayerSpec::Dense {
            out_units: classes,
        }],
    }
}

/// Resolves a model reference: `builtin:table1-student`, `builtin:toy-conv`,
/// `builtin:toy-dense`, or a path to an architecture text file (relative
/// paths resolve against `base`). Builtins other than table1-student adopt
/// the given input shape and class count.
pub fn resolve_model_spec(
    source: &str,
    input: (usize, usize, usize),
    classes: usize,
    base: Option<&Path>,
) -> Result<ModelSpec> {
    match source {
        "builtin:table1-student" => Ok(student_spec_with_head(classes)),
        "builtin:toy-conv" => Ok(toy_conv_spec(input, classes)),
        "builtin:toy-dense" => Ok(toy_dense_spec(input, classes)),
        s if s.starts_with("builtin:") => Err(CoreError::config(format!(
            "unknown builtin model '{}' (expected table1-student, toy-conv, or toy-dense)",
            s
        ))),
        path => {
            let resolved = resolve_path(base, path);
            let text = std::fs::read_to_string(&resolved).map_err(|e| {
                CoreError::config(format!("model spec {}: {}", resolved.display(), e))
            })?;
            ModelSpec::from_text(&text)
        }
    }
}

/// Joins a relative path onto `base`; absolute paths pass through.
pub fn resolve_path(base: Option<&Path>, path: &str) -> PathBuf {
    let p = Path::new(path);
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

fn replicate_channels(image: &Tensor, channels: usize) -> Result<Tensor> {
    let shape = image.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if c == channels {
        return Ok(image.clone());
    }
    if c != 1 {
        return Err(CoreError::shape(format!(
            "cannot replicate {}-channel images to {} channels",
            c, channels
        )));
    }
    let mut data = Vec::with_capacity(h * w * channels);
    for &v in image.data() {
        data.extend(std::iter::repeat(v).take(channels));
    }
    Tensor::from_vec(&[h, w, channels], data)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CoreError::config(format!("config parse: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::config(format!("{}: {}", path.display(), e)))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| -> Result<()> {
            Err(CoreError::config(format!("{}: {}", field, why)))
        };
        if self.dataset.source == "synthetic" {
            if self.dataset.classes < 2 {
                return fail("dataset.classes", "need at least 2 classes");
            }
            if self.dataset.per_class == 0 {
                return fail("dataset.per_class", "must be at least 1");
            }
            if self.dataset.height < 4 || self.dataset.width < 4 {
                return fail("dataset.height/width", "synthetic images must be at least 4x4");
            }
        }
        if self.dataset.channels == 0 {
            return fail("dataset.channels", "must be at least 1");
        }
        for (name, f) in [
            ("split.private_fraction", self.split.private_fraction),
            ("split.public_fraction", self.split.public_fraction),
            ("split.test_fraction", self.split.test_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return fail(name, "must lie in (0, 1]");
            }
        }
        if self.split.disjoint
            && self.split.private_fraction + self.split.public_fraction + self.split.test_fraction
                > 1.0 + 1e-12
        {
            return fail("split", "disjoint fractions must sum to at most 1");
        }
        if self.partition.alpha <= 0.0 {
            return fail("partition.alpha", "must be positive");
        }
        if self.protocol.clients == 0 {
            return fail("protocol.clients", "must be at least 1");
        }
        if self.protocol.rounds == 0 {
            return fail("protocol.rounds", "must be at least 1");
        }
        if self.protocol.local_epochs == 0 {
            return fail("protocol.local_epochs", "must be at least 1");
        }
        if self.protocol.batch_size == 0 {
            return fail("protocol.batch_size", "must be at least 1");
        }
        if self.protocol.temperature <= 0.0 || !self.protocol.temperature.is_finite() {
            return fail("protocol.temperature", "must be a positive finite value");
        }
        if !(0.0..=1.0).contains(&self.protocol.alpha) {
            return fail("protocol.alpha", "must lie in [0, 1]");
        }
        if self.optimizer.learning_rate < 0.0 || !self.optimizer.learning_rate.is_finite() {
            return fail("optimizer.learning_rate", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return fail("optimizer.momentum", "must lie in [0, 1)");
        }
        self.comms
            .validate()
            .map_err(|e| CoreError::config(format!("comms: {}", e)))?;
        Ok(())
    }

    /// Image shape after channel replication.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        (self.dataset.height, self.dataset.width, self.dataset.channels)
    }

    pub fn teacher_spec(&self, base: Option<&Path>) -> Result<ModelSpec> {
        resolve_model_spec(
            &self.model.teacher,
            self.input_shape(),
            self.dataset.classes,
            base,
        )
    }

    pub fn student_spec(&self, base: Option<&Path>) -> Result<ModelSpec> {
        resolve_model_spec(
            &self.model.student,
            self.input_shape(),
            self.dataset.classes,
            base,
        )
    }

    pub fn distill_config(&self, base: Option<&Path>, threads: usize) -> Result<DistillConfig> {
        let cfg = DistillConfig {
            num_teachers: self.protocol.clients,
            rounds: self.protocol.rounds,
            local_epochs: self.protocol.local_epochs,
            temperature: self.protocol.temperature,
            alpha: self.protocol.alpha,
            batch_size: self.protocol.batch_size,
            teacher_spec: self.teacher_spec(base)?,
            student_spec: self.student_spec(base)?,
            optimizer: self.optimizer,
            seed: self.seed,
            strict_double_softmax: self.protocol.strict_double_softmax,
            t_squared_scaling: self.protocol.t_squared_scaling,
            reset_teachers_each_round: self.protocol.reset_teachers_each_round,
            threads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fedavg_config(&self, base: Option<&Path>, threads: usize) -> Result<FedAvgConfig> {
        let cfg = FedAvgConfig {
            num_clients: self.protocol.clients,
            rounds: self.protocol.rounds,
            local_epochs: self.protocol.local_epochs,
            batch_size: self.protocol.batch_size,
            model_spec: self.teacher_spec(base)?,
            optimizer: self.optimizer,
            seed: self.seed,
            weighting: self.fedavg.weighting,
            threads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Generates or loads the dataset, replicates channels, and splits it.
    pub fn build_data(&self, base: Option<&Path>) -> Result<ExperimentData> {
        let mut pool = if self.dataset.source == "synthetic" {
            generate_synthetic(
                self.dataset.classes,
                self.dataset.per_class,
                (self.dataset.height, self.dataset.width),
                derive_seed(self.seed, "dataset", 0),
            )?
        } else {
            load_manifest(&resolve_path(base, &self.dataset.source))?
        };
        if self.dataset.channels > 1 {
            for image in pool.images.iter_mut() {
                *image = replicate_channels(image, self.dataset.channels)?;
            }
        }
        split_dataset(
            &pool,
            &crate::datasets::SplitSpec {
                private_fraction: self.split.private_fraction,
                public_fraction: self.split.public_fraction,
                test_fraction: self.split.test_fraction,
                disjoint: self.split.disjoint,
                seed: derive_seed(self.seed, "split", 0),
            },
        )
    }

    pub fn build_partition(&self, labels: &[usize]) -> Result<Partition> {
        dirichlet_partition(
            labels,
            &PartitionConfig {
                num_clients: self.protocol.clients,
                alpha: self.partition.alpha,
                seed: derive_seed(self.seed, "partition", 0),
                min_per_client: self.partition.min_per_client,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_config() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.protocol.rounds, 10);
        assert_eq!(cfg.protocol.local_epochs, 5);
        assert_eq!(cfg.protocol.temperature, 10.0);
        assert_eq!(cfg.protocol.alpha, 0.1);
        assert_eq!(cfg.partition.alpha, 10000.0);
        assert_eq!(cfg.split.private_fraction, 0.8);
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 99;
        cfg.protocol.kind = ProtocolKind::Fedavg;
        cfg.protocol.temperature = 20.0;
        cfg.partition.alpha = 0.5;
        let parsed = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("[protocol]\ntemprature = 10.0\n").is_err());
        assert!(ExperimentConfig::from_toml("typo = 1\n").is_err());
    }

    #[test]
    fn validation_messages_name_the_field() {
        let err = ExperimentConfig::from_toml("[protocol]\ntemperature = 0.0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("protocol.temperature"), "{}", err);
        let err = ExperimentConfig::from_toml("[split]\npublic_fraction = 0.0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("split.public_fraction"), "{}", err);
    }

    #[test]
    fn builtin_specs_resolve() {
        let table1 = resolve_model_spec("builtin:table1-student", (32, 32, 1), 10, None).unwrap();
        assert_eq!(table1.input_shape, (224, 224, 3));
        assert_eq!(table1.count_parameters().unwrap().0, 95434);
        let toy = resolve_model_spec("builtin:toy-conv", (32, 32, 1), 3, None).unwrap();
        assert_eq!(toy.input_shape, (32, 32, 1));
        assert_eq!(toy.num_classes().unwrap(), 3);
        assert!(resolve_model_spec("builtin:nope", (32, 32, 1), 3, None).is_err());
    }

    #[test]
    fn spec_file_paths_resolve_relative_to_base() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy_dense_spec((8, 8, 1), 2);
        std::fs::write(dir.path().join("m.spec"), spec.to_text()).unwrap();
        let loaded = resolve_model_spec("m.spec", (0, 0, 0), 0, Some(dir.path())).unwrap();
        assert_eq!(loaded, spec);
    }

    #[test]
    fn build_data_replicates_channels() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.per_class = 5;
        cfg.dataset.channels = 3;
        let data = cfg.build_data(None).unwrap();
        assert_eq!(data.private_pool.image_shape(), &[32, 32, 3]);
        let img = &data.private_pool.images[0];
        let d = img.data();
        assert_eq!(d[0], d[1]);
        assert_eq!(d[0], d[2]);
    }

    #[test]
    fn configs_translate_into_protocol_configs() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 7\n[protocol]\nclients = 3\ntemperature = 20.0\n[partition]\nalpha = 0.5\n",
        )
        .unwrap();
        let d = cfg.distill_config(None, 1).unwrap();
        assert_eq!(d.num_teachers, 3);
        assert_eq!(d.temperature, 20.0);
        assert_eq!(d.seed, 7);
        let f = cfg.fedavg_config(None, 2).unwrap();
        assert_eq!(f.num_clients, 3);
        assert_eq!(f.threads, 2);
    }
}
