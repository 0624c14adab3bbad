use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use pacsde_core::datagen::{read_dataset, write_dataset, Dataset, GeneratedData, Role};
use pacsde_core::harness::{
    evaluate, run_ablation, run_convergence, run_training, selftest, write_ablation_csv,
    write_plot_data, AblationRow, ConvergenceConfig, DatasetSpec, Model, RunPaths, System,
};
use pacsde_core::sde::Oracle;
use pacsde_core::{Error, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "pacsde",
    version,
    about = "Hybrid Bayesian neural SDEs trained with an empirical PAC-Bayes objective"
)]
struct Cli {
    /// Worker threads for evaluation and ablation jobs; 1 forces fully sequential execution.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    Lorenz,
    LotkaVolterra,
}

impl From<SystemArg> for System {
    fn from(s: SystemArg) -> Self {
        match s {
            SystemArg::Lorenz => System::Lorenz,
            SystemArg::LotkaVolterra => System::LotkaVolterra,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Ou,
    Gbm,
    Linear,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a system and write train/test/stream CSVs plus a manifest.
    GenData {
        system: SystemArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration and write metrics and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Directory from `gen-data`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a test CSV and print the metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the prior-knowledge ablation and write the summary CSV.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        reps: usize,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Measure the strong convergence order of Euler-Maruyama.
    Converge {
        #[arg(long)]
        oracle: OracleArg,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite.
    Selftest,
    /// Export forecast mean and ±2σ envelope for one test sequence.
    PlotData {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 21)]
        trajectories: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Divergence { .. } | Error::NonFinite(_) | Error::NonFiniteGradient { .. }) => 3,
        Some(
            Error::Io(_)
            | Error::Parse { .. }
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Checkpoint(_),
        ) => 4,
        Some(_) => 2,
        None if err
            .chain()
            .any(|e| e.downcast_ref::<std::io::Error>().is_some()) =>
        {
            4
        }
        None => 2,
    }
}

fn write_generated(dir: &Path, data: &GeneratedData) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_dataset(&dir.join("train.csv"), &data.train)?;
    write_dataset(&dir.join("test.csv"), &data.test)?;
    write_dataset(
        &dir.join("stream.csv"),
        &Dataset::new(Role::Stream, vec![data.stream.clone()])?,
    )?;
    data.manifest.write(&dir.join("manifest.json"))?;
    Ok(())
}

fn load_data(cfg: &ExperimentConfig, dir: Option<&Path>) -> anyhow::Result<(Dataset, Dataset)> {
    match dir {
        Some(d) => Ok((
            read_dataset(&d.join("train.csv"), Role::Train)
                .with_context(|| format!("reading {}", d.display()))?,
            read_dataset(&d.join("test.csv"), Role::Test)
                .with_context(|| format!("reading {}", d.display()))?,
        )),
        None => {
            let g = cfg.dataset.generate(cfg.seeds.data)?;
            Ok((g.train, g.test))
        }
    }
}

fn load_model(path: &Path) -> anyhow::Result<Model> {
    let ck = pacsde_core::checkpoint::Checkpoint::load(path)
        .with_context(|| format!("loading {}", path.display()))?;
    Ok(Model::from_checkpoint(&ck)?.model)
}

fn ablation_rows(cfg: &ExperimentConfig) -> Vec<AblationRow> {
    match cfg.dataset.system {
        System::Lorenz => AblationRow::lorenz_table(),
        System::LotkaVolterra => vec![
            AblationRow::none(cfg.dim()),
            AblationRow {
                name: "prior".into(),
                prior: cfg.prior.clone(),
                variants: vec![
                    pacsde_core::Variant::EBayesHybrid,
                    pacsde_core::Variant::EPacBayesHybrid,
                ],
            },
        ],
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match cli.command {
        Command::GenData { system, seed, out } => {
            let spec = DatasetSpec {
                system: system.into(),
                protocol: None,
            };
            let data = spec.generate(seed)?;
            write_generated(&out, &data)?;
            println!(
                "wrote {} train and {} test sequences to {}",
                data.train.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            out_dir,
            data,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let (train, test) = load_data(&cfg, data.as_deref())?;
            let paths = RunPaths::new(&out_dir);
            let outcome = run_training(&cfg, &train, Some(&paths))?;
            let metrics = evaluate(
                &outcome.model,
                &test,
                cfg.eval.samples,
                cfg.eval.horizon,
                cfg.seeds.eval,
            )?;
            let text = serde_json::to_string_pretty(&metrics)?;
            std::fs::write(out_dir.join("eval.json"), &text)?;
            println!("{text}");
        }
        Command::Eval {
            checkpoint,
            data,
            horizon,
            samples,
            seed,
        } => {
            let model = load_model(&checkpoint)?;
            let test = read_dataset(&data, Role::Test)?;
            let metrics = evaluate(&model, &test, samples, horizon, seed)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Ablation { config, reps, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let data = cfg.dataset.generate(cfg.seeds.data)?;
            let summaries = run_ablation(&cfg, &data, &ablation_rows(&cfg), reps)?;
            write_ablation_csv(&out, &summaries)?;
            for s in &summaries {
                println!(
                    "{:<10} {:<20} mse {:.4} ± {:.4}  nll {:.4} ± {:.4}  ({} ok)",
                    s.prior_row,
                    s.variant.name(),
                    s.mse_mean,
                    s.mse_stderr,
                    s.nll_mean,
                    s.nll_stderr,
                    s.n_ok
                );
            }
        }
        Command::Converge {
            oracle,
            samples,
            seed,
            out,
        } => {
            let oracle = match oracle {
                OracleArg::Ou => Oracle::default_ou(),
                OracleArg::Gbm => Oracle::default_gbm(),
                OracleArg::Linear => Oracle::default_linear(),
            };
            let mut cfg = ConvergenceConfig::standard(oracle);
            cfg.samples = samples;
            cfg.seed = seed;
            let report = run_convergence(&cfg, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Selftest => {
            let results = selftest();
            for r in &results {
                println!(
                    "{} {}: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                bail!("{failed} self-test check(s) failed");
            }
        }
        Command::PlotData {
            checkpoint,
            data,
            sequence,
            horizon,
            trajectories,
            seed,
            out,
        } => {
            let model = load_model(&checkpoint)?;
            let test = read_dataset(&data, Role::Test)?;
            let Some(seq) = test.sequences.get(sequence) else {
                bail!(Error::Config(format!(
                    "sequence {sequence} out of range ({} sequences)",
                    test.len()
                )));
            };
            write_plot_data(
                &out,
                &model,
                seq,
                horizon.unwrap_or(seq.len() - 1),
                trajectories,
                seed,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
