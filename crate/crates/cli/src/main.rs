//! fkdsim: run and inspect federated distillation experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use fkd_core::comms::Unit;
use fkd_core::config::{resolve_model_spec, ExperimentConfig, ProtocolKind};
use fkd_core::datasets::{export_pgm_tree, generate_synthetic};
use fkd_core::fedavg::run_fedavg_experiment;
use fkd_core::fkd::run_fkd_experiment;
use fkd_core::partition::{partition_stats, write_partition_csv};
use fkd_core::pgm::{read_pgm, write_pgm};
use fkd_core::preprocess::{clahe, ClaheConfig};
use fkd_core::report::ExperimentReport;

#[derive(Parser)]
#[command(name = "fkdsim", version, about = "Federated distillation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML). Defaults apply for missing sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory to create the run directory in.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Worker threads for per-client training (does not affect results).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Unit for printed traffic totals.
    #[arg(long, default_value = "Mb")]
    unit: String,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the distillation protocol and write a run directory.
    RunFkd(RunArgs),
    /// Run the parameter-averaging baseline and write a run directory.
    RunFedavg(RunArgs),
    /// Compare two run reports: accuracy and traffic side by side.
    Compare {
        report_a: PathBuf,
        report_b: PathBuf,
        #[arg(long, default_value = "Mb")]
        unit: String,
    },
    /// Print per-client sizes, class mixes, and the heterogeneity score.
    PartitionReport {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the client/sample assignment CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a per-layer shape and parameter audit of a model.
    AuditModel {
        /// "builtin:<name>" or an architecture text file.
        #[arg(default_value = "builtin:table1-student")]
        model: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Normalize a PGM image, apply CLAHE, and write the result.
    Preprocess {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        clip_limit: f64,
        #[arg(long, default_value_t = 8)]
        tile_rows: usize,
        #[arg(long, default_value_t = 8)]
        tile_cols: usize,
        #[arg(long, default_value_t = 256)]
        bins: usize,
    },
    /// Write a synthetic labeled dataset as a PGM tree with a manifest.
    GenSynthetic {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::RunFkd(args) => run_experiment(args, ProtocolKind::Fkd),
        Command::RunFedavg(args) => run_experiment(args, ProtocolKind::Fedavg),
        Command::Compare {
            report_a,
            report_b,
            unit,
        } => compare(&report_a, &report_b, &unit),
        Command::PartitionReport { config, seed, out } => partition_report(config, seed, out),
        Command::AuditModel { model, classes } => audit_model(&model, classes),
        Command::Preprocess {
            input,
            output,
            clip_limit,
            tile_rows,
            tile_cols,
            bins,
        } => preprocess(
            &input,
            &output,
            ClaheConfig {
                clip_limit,
                tile_rows,
                tile_cols,
                bins,
            },
        ),
        Command::GenSynthetic {
            classes,
            per_class,
            height,
            width,
            seed,
            out,
            force,
        } => gen_synthetic(classes, per_class, (height, width), seed, &out, force),
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<(ExperimentConfig, Option<PathBuf>)> {
    let (mut cfg, base) = match path {
        Some(p) => {
            let cfg = ExperimentConfig::load(p)?;
            (cfg, p.parent().map(Path::to_path_buf))
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok((cfg, base))
}

/// Short content hash of the effective config, so runs that differ in any
/// setting land in different directories.
fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    digest[..4].iter().map(|b| format!("{:02x}", b)).collect()
}

fn run_experiment(args: RunArgs, kind: ProtocolKind) -> anyhow::Result<()> {
    let unit: Unit = args.unit.parse()?;
    let (cfg, base) = load_config(args.config.as_deref(), args.seed)?;
    if args.threads == 0 {
        bail!("--threads must be at least 1");
    }

    let protocol = match kind {
        ProtocolKind::Fkd => "fkd",
        ProtocolKind::Fedavg => "fedavg",
    };
    let run_dir = args
        .out
        .join(format!("{}-{}-s{}", protocol, config_hash(&cfg), cfg.seed));
    if run_dir.exists() {
        if !args.force {
            bail!(
                "run directory {} already exists (use --force to overwrite)",
                run_dir.display()
            );
        }
        std::fs::remove_dir_all(&run_dir)?;
    }
    std::fs::create_dir_all(&run_dir)?;

    let data = cfg.build_data(base.as_deref())?;
    let partition = cfg.build_partition(&data.private_pool.labels)?;
    let report = match kind {
        ProtocolKind::Fkd => {
            let dc = cfg.distill_config(base.as_deref(), args.threads)?;
            run_fkd_experiment(&dc, &data, &partition, &cfg.comms)?
        }
        ProtocolKind::Fedavg => {
            let fc = cfg.fedavg_config(base.as_deref(), args.threads)?;
            run_fedavg_experiment(&fc, &data, &partition, &cfg.comms)?
        }
    };

    std::fs::write(run_dir.join("config.toml"), cfg.to_toml())?;
    std::fs::write(run_dir.join("report.json"), report.to_json())?;
    report.write_rounds_csv(&run_dir.join("rounds.csv"))?;
    report.ledger.write_csv(&run_dir.join("ledger.csv"))?;

    let mut upload = 0u64;
    let mut download = 0u64;
    for r in &report.rounds {
        upload += r.upload_bytes;
        download += r.download_bytes;
        println!(
            "round {:3}  acc {:.4}  test_loss {:.4}  up {:.4} {}  down {:.4} {}",
            r.round,
            r.test_accuracy,
            r.test_loss,
            unit.from_bytes(r.upload_bytes),
            args.unit,
            unit.from_bytes(r.download_bytes),
            args.unit,
        );
    }
    println!(
        "{}: final accuracy {:.4}, total upload {:.4} {}, total download {:.4} {}",
        protocol,
        report.final_accuracy().unwrap_or(f64::NAN),
        unit.from_bytes(upload),
        args.unit,
        unit.from_bytes(download),
        args.unit,
    );
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn load_report(path: &Path) -> anyhow::Result<ExperimentReport> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    Ok(ExperimentReport::from_json(&text)?)
}

fn compare(a: &Path, b: &Path, unit_name: &str) -> anyhow::Result<()> {
    let unit: Unit = unit_name.parse()?;
    let ra = load_report(a)?;
    let rb = load_report(b)?;
    let totals = |r: &ExperimentReport| {
        let up: u64 = r.rounds.iter().map(|x| x.upload_bytes).sum();
        let down: u64 = r.rounds.iter().map(|x| x.download_bytes).sum();
        (up, down)
    };
    let (ua, da) = totals(&ra);
    let (ub, db) = totals(&rb);
    println!(
        "{:8}  {:>8}  {:>12}  {:>12}",
        "protocol", "accuracy", "upload", "download"
    );
    for (r, up, down) in [(&ra, ua, da), (&rb, ub, db)] {
        println!(
            "{:8}  {:>8.4}  {:>9.4} {}  {:>9.4} {}",
            r.protocol,
            r.final_accuracy().unwrap_or(f64::NAN),
            unit.from_bytes(up),
            unit_name,
            unit.from_bytes(down),
            unit_name,
        );
    }
    if ub > 0 {
        println!("upload ratio (a/b): {:.6}", ua as f64 / ub as f64);
    }
    Ok(())
}

fn partition_report(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let (cfg, base) = load_config(config.as_deref(), seed)?;
    let data = cfg.build_data(base.as_deref())?;
    let partition = cfg.build_partition(&data.private_pool.labels)?;
    let stats = partition_stats(&partition, &data.private_pool.labels);
    println!("{}", serde_json::to_string_pretty(&stats)?);
    if let Some(path) = out {
        write_partition_csv(&partition, &path)?;
        println!("assignments written to {}", path.display());
    }
    Ok(())
}

fn audit_model(source: &str, classes: usize) -> anyhow::Result<()> {
    let spec = resolve_model_spec(source, (32, 32, 1), classes, None)?;
    let shapes = spec.infer_shapes()?;
    let per_layer = spec.per_layer_parameters()?;
    println!(
        "input: ({}, {}, {})",
        spec.input_shape.0, spec.input_shape.1, spec.input_shape.2
    );
    println!("{:<16} {:>16} {:>12} {:>12}", "layer", "output", "params", "trainable");
    for ((layer, shape), (p_total, p_train, _)) in
        spec.layers.iter().zip(&shapes).zip(&per_layer)
    {
        println!(
            "{:<16} {:>16} {:>12} {:>12}",
            layer.kind_name(),
            shape.to_string(),
            p_total,
            p_train
        );
    }
    let (total, trainable, non_trainable) = spec.count_parameters()?;
    println!(
        "total params: {} ({} trainable, {} non-trainable)",
        total, trainable, non_trainable
    );
    Ok(())
}

fn preprocess(input: &Path, output: &Path, cfg: ClaheConfig) -> anyhow::Result<()> {
    let image = read_pgm(input)?;
    let normalized = image.normalize()?;
    let enhanced = clahe(&normalized, &cfg)?;
    write_pgm(output, &enhanced)?;
    println!(
        "{} -> {} ({}x{}, {} bits, clip {}, {}x{} tiles)",
        input.display(),
        output.display(),
        enhanced.width,
        enhanced.height,
        enhanced.bits,
        cfg.clip_limit,
        cfg.tile_rows,
        cfg.tile_cols
    );
    Ok(())
}

fn gen_synthetic(
    classes: usize,
    per_class: usize,
    shape: (usize, usize),
    seed: u64,
    out: &Path,
    force: bool,
) -> anyhow::Result<()> {
    if out.exists() {
        if !force {
            bail!("{} already exists (use --force to overwrite)", out.display());
        }
        std::fs::remove_dir_all(out)?;
    }
    let ds = generate_synthetic(classes, per_class, shape, seed)?;
    let manifest = export_pgm_tree(&ds, out)?;
    println!(
        "{} images across {} classes; manifest at {}",
        ds.len(),
        classes,
        manifest.display()
    );
    Ok(())
}
