//! Command-line surface for the cross-conditioned diffusion pipeline:
//! dataset generation, staged training, synthesis, evaluation, benchmarks.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 bad arguments or validation,
//! 3 pipeline-order violation. Logs go to stderr; stdout carries only the
//! final artifact path.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Axis;

use cdm_core::config::parse_train_config;
use cdm_core::data::{
    generate_dataset, manifest_path, read_case, read_manifest, CaseRecord, PhantomSpec, Split,
};
use cdm_core::pipeline::{
    benchmark_sampling, evaluate, loss_curve_csv, run_stage_cunet, run_stage_mdn, run_stage_mrm,
    synthesize, CheckpointBundle, TrainConfig, TARGET_MODALITIES,
};
use cdm_core::{CdmError, Result};

#[derive(Parser)]
#[command(name = "cdm", about = "Cross-conditioned diffusion for paired image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a 70/30 train/test split.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cases: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run one or all training stages, updating the checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        stage: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Synthesize the target modalities for one case.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "case")]
        case_id: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score synthesized targets on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Sweep sampling steps, timing synthesis and scoring PSNR.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "10,20,30,40")]
        n: String,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long)]
        report: PathBuf,
    },
}

fn exit_code_for(err: &CdmError) -> u8 {
    match err {
        CdmError::Io(_) | CdmError::CorruptFile { .. } => 1,
        CdmError::MissingStage { .. } => 3,
        _ => 2,
    }
}

fn load_split(data: &Path, split: Split) -> Result<Vec<CaseRecord>> {
    let manifest = read_manifest(data)?;
    manifest
        .ids_in(split)
        .iter()
        .map(|id| read_case(data, id))
        .collect()
}

fn write_pgm16(path: &Path, image: &ndarray::Array2<f64>) -> Result<()> {
    let (h, w) = image.dim();
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n65535\n")?;
    let mut buf = Vec::with_capacity(h * w * 2);
    for v in image.iter() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

fn write_raw_f32(path: &Path, image: &ndarray::Array2<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(image.len() * 4);
    for v in image.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn cmd_gen_data(out: &Path, cases: usize, size: usize, seed: u64) -> Result<PathBuf> {
    let spec = PhantomSpec::new(size);
    generate_dataset(out, cases, &spec, seed)?;
    Ok(manifest_path(out))
}

fn cmd_train(config: &Path, stage: &str, data: &Path, checkpoint: &Path) -> Result<PathBuf> {
    let text = std::fs::read_to_string(config)?;
    let cfg: TrainConfig = parse_train_config(&text)?;
    cfg.validate()?;
    let mut bundle = if checkpoint.exists() {
        let existing = CheckpointBundle::read(checkpoint)?;
        if existing.config != cfg {
            return Err(CdmError::invalid(
                "checkpoint was trained with a different config",
            ));
        }
        existing
    } else {
        CheckpointBundle::new(cfg)
    };
    let cases = load_split(data, Split::Train)?;
    let stages: Vec<&str> = match stage {
        "all" => vec!["mrm", "mdn", "cunet"],
        "mrm" | "mdn" | "cunet" => vec![stage],
        other => {
            return Err(CdmError::invalid(format!(
                "unknown stage {other:?}; expected mrm, mdn, cunet, or all"
            )))
        }
    };
    let curve_dir = checkpoint.parent().unwrap_or(Path::new("."));
    for s in stages {
        log::info!("running stage {s} on {} cases", cases.len());
        let losses = match s {
            "mrm" => run_stage_mrm(&mut bundle, &cases)?,
            "mdn" => run_stage_mdn(&mut bundle, &cases)?,
            _ => run_stage_cunet(&mut bundle, &cases)?,
        };
        std::fs::write(
            curve_dir.join(format!("losses_{s}.csv")),
            loss_curve_csv(s, &losses),
        )?;
    }
    bundle.write(checkpoint)?;
    Ok(checkpoint.to_path_buf())
}

fn cmd_synthesize(
    checkpoint: &Path,
    data: &Path,
    case_id: &str,
    seed: u64,
    out: &Path,
) -> Result<PathBuf> {
    let bundle = CheckpointBundle::read(checkpoint)?;
    let manifest = read_manifest(data)?;
    if !manifest.cases.iter().any(|(id, _)| id == case_id) {
        return Err(CdmError::invalid(format!("unknown case ID {case_id:?}")));
    }
    let case = read_case(data, case_id)?;
    let pred = synthesize(&bundle, &case.source_batch(), seed)?;
    std::fs::create_dir_all(out)?;
    for (ch, name) in TARGET_MODALITIES.iter().enumerate() {
        let img = pred.data.index_axis(Axis(0), 0);
        let img = img.index_axis(Axis(0), ch).to_owned();
        write_pgm16(&out.join(format!("{case_id}_{name}.pgm")), &img)?;
        write_raw_f32(&out.join(format!("{case_id}_{name}.raw")), &img)?;
    }
    Ok(out.to_path_buf())
}

fn cmd_evaluate(checkpoint: &Path, data: &Path, report: &Path) -> Result<PathBuf> {
    let bundle = CheckpointBundle::read(checkpoint)?;
    let cases = load_split(data, Split::Test)?;
    let metrics = evaluate(&bundle, &cases)?;
    std::fs::write(report, metrics.to_csv())?;
    Ok(report.to_path_buf())
}

fn cmd_bench(
    checkpoint: &Path,
    data: &Path,
    n: &str,
    reps: usize,
    report: &Path,
) -> Result<PathBuf> {
    let bundle = CheckpointBundle::read(checkpoint)?;
    let cases = load_split(data, Split::Test)?;
    let n_values: Vec<usize> = n
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| CdmError::invalid(format!("bad --n entry {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    let bench = benchmark_sampling(&bundle, &cases, &n_values, reps)?;
    std::fs::write(report, bench.to_csv())?;
    Ok(report.to_path_buf())
}

fn run(cli: Cli) -> Result<PathBuf> {
    match &cli.command {
        Command::GenData {
            out,
            cases,
            size,
            seed,
        } => cmd_gen_data(out, *cases, *size, *seed),
        Command::Train {
            config,
            stage,
            data,
            checkpoint,
        } => cmd_train(config, stage, data, checkpoint),
        Command::Synthesize {
            checkpoint,
            data,
            case_id,
            seed,
            out,
        } => cmd_synthesize(checkpoint, data, case_id, *seed, out),
        Command::Evaluate {
            checkpoint,
            data,
            report,
        } => cmd_evaluate(checkpoint, data, report),
        Command::Bench {
            checkpoint,
            data,
            n,
            reps,
            report,
        } => cmd_bench(checkpoint, data, n, *reps, report),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            log::error!("{err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
