//! `u2pl` command-line tool.
//!
//! Exit codes: 0 on success, 1 for invalid input (flags, config, files),
//! 2 for failures while running.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use u2pl::config::EvalModel;
use u2pl::partition::{assign_pseudo_labels_with, compute_entropy, entropy_threshold, reliable_fraction};
use u2pl::tensor::{validate_prob_batch, Tensor};
use u2pl::trainer::ablation::{ablate_reliability, AblationMode};
use u2pl::trainer::{checkpoint, data, evaluate_miou, model_shape, representations, run};
use u2pl::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "u2pl", version, about = "Entropy-partitioned pseudo-labeling on synthetic dense-labeling tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a probability map into reliable pseudo-labels and ignored pixels.
    Curate {
        /// U2TN probability tensor `[n, H, W, C]`.
        #[arg(long)]
        probs: PathBuf,
        /// Fraction of highest-entropy pixels to ignore.
        #[arg(long)]
        alpha: f64,
        /// Output prefix for `.labels.u2tn`, `.entropy.u2tn` and `.mask.u2tn`.
        #[arg(long)]
        out: String,
    },
    /// Train on the synthetic task and write a checkpoint plus `metrics.csv`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the negative-pool ablation over modes and seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of unreliable, reliable, all, supervised.
        #[arg(long, value_delimiter = ',', default_value = "unreliable,reliable,all")]
        modes: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report validation mIoU of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Write teacher representations of the training images as `[n, H, W, D]`.
    DumpReprs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn curate(probs: &Path, alpha: f64, out: &str) -> Result<()> {
    let p = validate_prob_batch(&Tensor::read(probs)?)?;
    let entropy = compute_entropy(&p);
    let gamma = entropy_threshold(entropy.as_slice(), alpha)?;
    let labels = assign_pseudo_labels_with(&p, &entropy, gamma);
    let dims = p.dims();
    let shape = vec![dims.images, dims.height, dims.width];
    labels.to_tensor().write(format!("{out}.labels.u2tn"))?;
    Tensor::from_f64(shape.clone(), entropy.as_slice().to_vec())?.write(format!("{out}.entropy.u2tn"))?;
    let mask = labels.as_slice().iter().map(|&l| u8::from(l >= 0)).collect();
    Tensor::from_u8(shape, mask)?.write(format!("{out}.mask.u2tn"))?;
    println!("gamma {gamma}");
    println!("reliable_fraction {}", reliable_fraction(&labels));
    Ok(())
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let result = run(&cfg)?;
    checkpoint::save(out, &result.state, &cfg)?;
    write_file(&out.join("metrics.csv"), &result.metrics_csv())?;
    println!("epochs {}", result.history.len());
    println!("miou_val {:.6}", result.final_miou());
    Ok(())
}

fn ablate(config: &Path, modes: &[String], seeds: &[u64], out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let modes = modes
        .iter()
        .map(|m| m.trim().parse::<AblationMode>())
        .collect::<Result<Vec<_>>>()?;
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one mode and one seed".into()));
    }
    let table = ablate_reliability(&cfg, &modes, seeds)?;
    write_file(out, &table.to_csv())?;
    for s in &table.summary {
        println!("{} mean {:.6} std {:.6}", s.mode.name(), s.mean, s.std);
    }
    Ok(())
}

fn load_compatible(ckpt: &Path, cfg: &RunConfig) -> Result<checkpoint::Checkpoint> {
    let ck = checkpoint::load(ckpt)?;
    let want = model_shape(cfg);
    if ck.teacher.shape() != want {
        return Err(Error::Shape(format!(
            "checkpoint model {:?} does not match config model {:?}",
            ck.teacher.shape(),
            want
        )));
    }
    Ok(ck)
}

fn eval(ckpt: &Path, config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ck = load_compatible(ckpt, &cfg)?;
    let (_, val) = data::generate_for_run(&cfg)?;
    let model = match cfg.eval_model {
        EvalModel::Student => &ck.student,
        EvalModel::Teacher => &ck.teacher,
    };
    let images: Vec<usize> = (0..val.images()).collect();
    let report = evaluate_miou(model, &val, &images)?;
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c} iou {v:.6}"),
            None => println!("class {c} iou absent"),
        }
    }
    println!("miou {:.6}", report.mean);
    Ok(())
}

fn dump_reprs(ckpt: &Path, config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ck = load_compatible(ckpt, &cfg)?;
    let (train, _) = data::generate_for_run(&cfg)?;
    let reprs = representations(&ck.teacher, &train)?.to_tensor();
    reprs.write(out)?;
    println!("shape {:?}", reprs.shape());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Curate { probs, alpha, out } => curate(&probs, alpha, &out),
        Command::Train { config, out } => train(&config, &out),
        Command::Ablate {
            config,
            modes,
            seeds,
            out,
        } => ablate(&config, &modes, &seeds, &out),
        Command::Eval { checkpoint, config } => eval(&checkpoint, &config),
        Command::DumpReprs { checkpoint, config, out } => dump_reprs(&checkpoint, &config, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
