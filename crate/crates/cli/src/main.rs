use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use snas::arch::{decode_architecture, Architecture, Decoded};
use snas::checkpoint::{Checkpoint, CheckpointKind};
use snas::config::{ProfileChoice, RunConfig};
use snas::data::{load_dataset, Dataset, DatasetSpec};
use snas::metrics::{
    comparison_csv, emit_report, ComparisonRow, ResourceReport, REPORT_CSV_HEADER,
};
use snas::train::{self, metrics_csv};

type Model = Checkpoint<f64>;

#[derive(Parser, Debug)]
#[command(
    name = "snas",
    version,
    about = "Joint architecture search and compression for spiking networks"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for checkpoints, CSV files and reports.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Overrides the backbone profile in the config.
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Cifar,
    Gsc,
    Desk,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Split {
    All,
    Train,
    #[default]
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Joint search on the training split; writes search.ckpt and arch.txt.
    Search { config: PathBuf },
    /// Prints the architecture held by a checkpoint and writes arch.txt.
    Decode { checkpoint: PathBuf },
    /// Retrains an architecture file; writes model.ckpt.
    Retrain {
        arch: PathBuf,
        config: PathBuf,
        /// Search checkpoint to inherit weights and pruning scores from.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Top-1 accuracy of a model checkpoint.
    Evaluate {
        model: PathBuf,
        /// Dataset spec, or a run config whose data section is used.
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        split: Split,
    },
    /// Accuracy, size, SynOps, operation counts and energy of a model.
    Report {
        model: PathBuf,
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        split: Split,
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Staged search/prune/quantize/timestep pipeline next to a joint run.
    Sequential { config: PathBuf },
    /// Joint pipeline over paired (λ1, λ2) settings.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambda1: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        lambda2: Vec<f64>,
    },
    /// Prints the default config.
    DefaultConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Search { config } => search(c, config),
        Command::Decode { checkpoint } => decode(c, checkpoint),
        Command::Retrain { arch, config, from } => retrain(c, arch, config, from.as_deref()),
        Command::Evaluate {
            model,
            dataset,
            split,
        } => {
            let (ck, data) = model_and_data(model, dataset, *split)?;
            let acc = train::evaluate(&ck.net, &data, ck.config.train.encoding, None)?;
            println!("accuracy {acc:.6} on {} samples", data.len());
            Ok(())
        }
        Command::Report {
            model,
            dataset,
            split,
            name,
        } => {
            let (ck, data) = model_and_data(model, dataset, *split)?;
            let hash = ck.config.hash()?;
            let r = emit_report(
                name,
                &ck.net,
                &data,
                ck.config.train.encoding,
                &hash,
                Some(&c.out_dir),
            )?;
            println!("{REPORT_CSV_HEADER}\n{}", r.csv_row());
            Ok(())
        }
        Command::Sequential { config } => sequential(c, config),
        Command::Sweep {
            config,
            lambda1,
            lambda2,
        } => sweep(c, config, lambda1, lambda2),
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn load_config(c: &Common, path: &Path) -> Result<RunConfig> {
    let mut cfg =
        RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(p) = c.profile {
        let name = match p {
            Profile::Cifar => "cifar",
            Profile::Gsc => "gsc",
            Profile::Desk => "desk",
        };
        cfg.profile = ProfileChoice::Named(name.into());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn splits(cfg: &RunConfig) -> Result<(Dataset<f64>, Dataset<f64>)> {
    let data = load_dataset::<f64>(&cfg.data)?;
    Ok(data.split(cfg.train.test_fraction, cfg.train.seed)?)
}

fn out_dir(c: &Common) -> Result<&Path> {
    fs::create_dir_all(&c.out_dir).with_context(|| format!("creating {}", c.out_dir.display()))?;
    Ok(&c.out_dir)
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn arch_text(arch: &Architecture, hash: &str) -> String {
    format!("# config {hash}\n{arch}")
}

fn search(c: &Common, config: &Path) -> Result<()> {
    let cfg = load_config(c, config)?;
    let hash = cfg.hash()?;
    let (train_set, _) = splits(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let run = train::search(&cfg, &train_set, &mut rng)?;
    let decoded = decode_architecture(&run.trainer.net)?;
    let dir = out_dir(c)?;
    write(dir.join("config.toml"), &cfg.to_toml()?)?;
    write(
        dir.join("search_metrics.csv"),
        &metrics_csv(&run.metrics, &hash),
    )?;
    write(dir.join("arch.txt"), &arch_text(&decoded.arch, &hash))?;
    let seed = cfg.train.seed;
    Checkpoint::search(cfg, seed, run.trainer.net, run.trainer.state)
        .save(&dir.join("search.ckpt"))?;
    let last = run.metrics.last().map(|m| m.step.loss).unwrap_or(f64::NAN);
    println!("{}", decoded.arch);
    println!(
        "final loss {last:.6} after {} iterations ({:.1}s)",
        run.metrics.len(),
        run.seconds
    );
    Ok(())
}

fn decode(c: &Common, path: &Path) -> Result<()> {
    let ck = Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let arch = match (ck.kind, ck.arch) {
        (CheckpointKind::Model, Some(a)) => a,
        _ => decode_architecture(&ck.net)?.arch,
    };
    write(
        out_dir(c)?.join("arch.txt"),
        &arch_text(&arch, &ck.config.hash()?),
    )?;
    print!("{arch}");
    Ok(())
}

fn retrain(c: &Common, arch_path: &Path, config: &Path, from: Option<&Path>) -> Result<()> {
    let cfg = load_config(c, config)?;
    let hash = cfg.hash()?;
    let text = fs::read_to_string(arch_path)
        .with_context(|| format!("reading {}", arch_path.display()))?;
    let arch: Architecture = text.parse()?;
    let source = from
        .map(|p| Model::load(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .transpose()?;
    let decoded = Decoded {
        arch,
        masks: Default::default(),
    };
    let (train_set, test_set) = splits(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let run = train::retrain(
        &cfg,
        &decoded,
        source.as_ref().map(|s| &s.net.params),
        &train_set,
        &mut rng,
    )?;
    let enc = cfg.train.encoding;
    let train_acc = train::evaluate(&run.trainer.net, &train_set, enc, None)?;
    let test_acc = train::evaluate(&run.trainer.net, &test_set, enc, None)?;
    let dir = out_dir(c)?;
    write(
        dir.join("retrain_metrics.csv"),
        &metrics_csv(&run.metrics, &hash),
    )?;
    let seed = cfg.train.seed;
    Checkpoint::model(cfg, seed, decoded.arch, run.trainer.net, run.trainer.state)
        .save(&dir.join("model.ckpt"))?;
    println!(
        "train accuracy {train_acc:.6}, test accuracy {test_acc:.6} ({:.1}s)",
        run.seconds
    );
    Ok(())
}

fn read_dataset_spec(path: &Path) -> Result<DatasetSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match toml::from_str::<DatasetSpec>(&text) {
        Ok(spec) => Ok(spec),
        Err(direct) => match RunConfig::from_toml(&text) {
            Ok(cfg) => Ok(cfg.data),
            Err(_) => bail!(
                "{} is neither a dataset spec nor a run config: {direct}",
                path.display()
            ),
        },
    }
}

fn model_and_data(model: &Path, dataset: &Path, split: Split) -> Result<(Model, Dataset<f64>)> {
    let ck =
        Model::load(model).with_context(|| format!("loading checkpoint {}", model.display()))?;
    if ck.kind != CheckpointKind::Model {
        bail!(
            "{} is a search checkpoint; decode and retrain it first",
            model.display()
        );
    }
    let data = load_dataset::<f64>(&read_dataset_spec(dataset)?)?;
    let data = match split {
        Split::All => data,
        Split::Train | Split::Test => {
            let (tr, te) = data.split(ck.config.train.test_fraction, ck.config.train.seed)?;
            if matches!(split, Split::Train) {
                tr
            } else {
                te
            }
        }
    };
    Ok((ck, data))
}

fn save_pipeline(dir: &Path, cfg: &RunConfig, result: &train::PipelineResult<f64>) -> Result<()> {
    let sub = dir.join(&result.name);
    fs::create_dir_all(&sub)?;
    let hash = cfg.hash()?;
    write(sub.join("arch.txt"), &arch_text(&result.arch, &hash))?;
    let mut stages = format!("# config {hash}\nstage,seconds,train_acc\n");
    for s in &result.stages {
        let acc = s.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        stages.push_str(&format!("{},{:.3},{acc}\n", s.stage, s.seconds));
    }
    write(sub.join("stages.csv"), &stages)?;
    Checkpoint::model(
        cfg.clone(),
        cfg.train.seed,
        result.arch.clone(),
        result.net.clone(),
        Default::default(),
    )
    .save(&sub.join("model.ckpt"))?;
    Ok(())
}

fn sequential(c: &Common, config: &Path) -> Result<()> {
    let cfg = load_config(c, config)?;
    let hash = cfg.hash()?;
    let (train_set, test_set) = splits(&cfg)?;
    let dir = out_dir(c)?;
    let mut rows = Vec::new();
    let joint = train::joint_pipeline(
        &cfg,
        &train_set,
        &test_set,
        &mut ChaCha8Rng::seed_from_u64(cfg.train.seed),
    )?;
    let seq = train::sequential_pipeline(
        &cfg,
        &train_set,
        &test_set,
        &mut ChaCha8Rng::seed_from_u64(cfg.train.seed),
    )?;
    for result in [&joint, &seq] {
        save_pipeline(dir, &cfg, result)?;
        let row = ComparisonRow::from_pipeline(result, &test_set, cfg.train.encoding, &hash)?;
        write(dir.join(&result.name).join("report.csv"), &row.report.csv())?;
        rows.push(row);
    }
    let table = comparison_csv(&rows, &hash);
    write(dir.join("comparison.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn sweep(c: &Common, config: &Path, lambda1: &[f64], lambda2: &[f64]) -> Result<()> {
    if lambda1.len() != lambda2.len() {
        bail!("--lambda1 and --lambda2 need the same number of values");
    }
    let cfg = load_config(c, config)?;
    let hash = cfg.hash()?;
    let (train_set, test_set) = splits(&cfg)?;
    let grid: Vec<(f64, f64)> = lambda1
        .iter()
        .copied()
        .zip(lambda2.iter().copied())
        .collect();
    let points = train::sweep(&cfg, &grid, &train_set, &test_set, cfg.train.seed)?;
    let dir = out_dir(c)?;
    let mut table = format!("# config {hash}\nlambda1,lambda2,{REPORT_CSV_HEADER}\n");
    for (i, p) in points.iter().enumerate() {
        let name = format!("sweep{i}");
        let r =
            ResourceReport::measure(&name, &p.result.net, &test_set, cfg.train.encoding, &hash)?;
        let sub = dir.join(&name);
        fs::create_dir_all(&sub)?;
        write(sub.join("arch.txt"), &arch_text(&p.result.arch, &hash))?;
        table.push_str(&format!(
            "{:e},{:e},{}\n",
            p.lambda1,
            p.lambda2,
            r.csv_row()
        ));
    }
    write(dir.join("sweep.csv"), &table)?;
    print!("{table}");
    Ok(())
}
