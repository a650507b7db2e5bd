use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedanomaly_core::data::{synth, write_csv};
use fedanomaly_core::{
    compare_overhead, evaluate_run_dir, load_dataset, model_grad_check, run_experiment, sweep, DataSource, Error,
    ExperimentConfig, GradCheckSetup, Result, SweepGrid, SynthConfig,
};

const OUTPUT_ENV: &str = "FEDANOMALY_OUTPUT_DIR";

#[derive(Parser)]
#[command(
    name = "fedanomaly",
    version,
    about = "Federated weakly supervised anomaly detection simulator"
)]
struct Cli {
    /// Worker threads for device-parallel rounds and sweeps (1 = strictly sequential).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment.
    Run(ExperimentArgs),
    /// Re-evaluate a finished run directory from its checkpoint.
    Eval {
        /// Run directory written by `run`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Grid over device count, feature ratio, DP on/off and seeds.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long, value_delimiter = ',', default_value = "3")]
        grid_devices: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        grid_ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "off")]
        grid_dp: Vec<Toggle>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        grid_seeds: Vec<u64>,
        /// Report communication overhead per feature ratio instead.
        #[arg(long)]
        overhead: bool,
    },
    /// Finite-difference check of all encoder and scorer gradients.
    GradCheck {
        #[arg(long, default_value_t = 12)]
        dim: usize,
        #[arg(long, default_value_t = 3)]
        heads: usize,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Let the rows of a batch attend to each other.
        #[arg(long)]
        batch_as_sequence: bool,
    },
    /// Write a synthetic two-cluster dataset and its schema.
    GenSynth {
        /// CSV path; the schema is written next to it as `<stem>.schema.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 5000)]
        normals: usize,
        #[arg(long, default_value_t = 200)]
        anomalies: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Base configuration (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synthetic`, or a CSV path (with `--schema`).
    #[arg(long)]
    data: Option<String>,
    /// Built-in schema name (nsl-kdd, spambase, shuttle, arrhythmia) or schema file.
    #[arg(long)]
    schema: Option<String>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    participation: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Uploaded feature dimension as a fraction of the input dimension.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    dp: Option<Toggle>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    dirichlet: Option<f64>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    eval_every: Option<u32>,
    #[arg(long)]
    early_stop: Option<Toggle>,
    #[arg(long)]
    checkpoint_every: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overridden by FEDANOMALY_OUTPUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn build(&self, threads: usize) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        match (self.data.as_deref(), &self.schema) {
            (None | Some("synthetic"), None) => {}
            (Some("synthetic"), Some(_)) => return Err(Error::Config("synthetic data takes no schema".into())),
            (Some(path), schema) => {
                let schema = match schema {
                    Some(s) => s.clone(),
                    None => return Err(Error::Config(format!("--schema is required for {path}"))),
                };
                cfg = match ExperimentConfig::named(&schema, path) {
                    Ok(named) if self.config.is_none() => named,
                    _ => ExperimentConfig {
                        dataset: DataSource::Csv {
                            path: path.into(),
                            schema,
                        },
                        ..cfg
                    },
                };
            }
            (None, Some(_)) => return Err(Error::Config("--schema needs --data".into())),
        }
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(cfg.devices, self.devices);
        set!(cfg.participation_rate, self.participation);
        set!(cfg.batch_size, self.batch_size);
        set!(cfg.learning_rate, self.lr);
        set!(cfg.feature_ratio, self.ratio);
        set!(cfg.heads, self.heads);
        set!(cfg.tau, self.tau);
        set!(cfg.dp.epsilon, self.epsilon);
        set!(cfg.dp.delta, self.delta);
        set!(cfg.dp.clip_norm, self.clip);
        set!(cfg.max_rounds, self.rounds);
        set!(cfg.eval_every, self.eval_every);
        set!(cfg.checkpoint_every, self.checkpoint_every);
        set!(cfg.seed, self.seed);
        if let Some(t) = self.dp {
            cfg.dp.enabled = matches!(t, Toggle::On);
        }
        if let Some(t) = self.early_stop {
            cfg.early_stop = matches!(t, Toggle::On);
        }
        if self.dirichlet.is_some() {
            cfg.dirichlet_alpha = self.dirichlet;
        }
        if let Some(dir) = std::env::var_os(OUTPUT_ENV) {
            cfg.output_dir = Some(dir.into());
        } else if self.out.is_some() {
            cfg.output_dir = self.out.clone();
        }
        cfg.parallel = threads > 1;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn write_sweep_csv(path: &Path, cells: &[fedanomaly_core::SweepCell]) -> Result<()> {
    let mut out = String::from("devices,ratio,dp,seed,auc_roc,auc_pr,rounds_run,converged_round\n");
    for c in cells {
        let conv = c.converged_round.map_or(String::new(), |r| r.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.devices, c.ratio, c.dp, c.seed, c.auc_roc, c.auc_pr, c.rounds_run, conv
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    match cli.command {
        Command::Run(args) => {
            let cfg = args.build(cli.threads)?;
            let result = run_experiment(&cfg)?;
            for m in &result.history {
                eprintln!(
                    "round {:>5}  auc_roc {:.4}  auc_pr {:.4}  loss {}",
                    m.round,
                    m.auc_roc,
                    m.auc_pr,
                    m.global_loss.map_or("-".into(), |l| format!("{l:.5}"))
                );
            }
            print_json(&result.final_metrics)
        }
        Command::Eval { run, checkpoint } => print_json(&evaluate_run_dir(&run, checkpoint.as_deref())?),
        Command::Sweep {
            exp,
            grid_devices,
            grid_ratios,
            grid_dp,
            grid_seeds,
            overhead,
        } => {
            let cfg = exp.build(cli.threads)?;
            // Cells run concurrently; each cell stays sequential inside.
            let cfg = ExperimentConfig { parallel: false, ..cfg };
            let raw = load_dataset(&cfg.dataset)?;
            if let Some(dir) = &cfg.output_dir {
                std::fs::create_dir_all(dir)?;
            }
            if overhead {
                let rows = compare_overhead(&cfg, &grid_ratios, &raw)?;
                for r in &rows {
                    print_json(r)?;
                }
                return Ok(());
            }
            let grid = SweepGrid {
                devices: grid_devices,
                ratios: grid_ratios,
                dp: grid_dp.iter().map(|t| matches!(t, Toggle::On)).collect(),
                seeds: grid_seeds,
            };
            let cells = sweep(&cfg, &grid, &raw)?;
            if let Some(dir) = &cfg.output_dir {
                write_sweep_csv(&dir.join("sweep.csv"), &cells)?;
            }
            for c in &cells {
                print_json(c)?;
            }
            Ok(())
        }
        Command::GradCheck {
            dim,
            heads,
            ratio,
            batch,
            seeds,
            tol,
            batch_as_sequence,
        } => {
            let mut failed = Vec::new();
            for seed in 0..seeds {
                let report = model_grad_check(&GradCheckSetup {
                    input_dim: dim,
                    heads,
                    feature_ratio: ratio,
                    batch,
                    batch_as_sequence,
                    seed,
                    tol,
                })?;
                println!(
                    "seed {seed}: max relative error {:.3e}, {} batch redraws ({})",
                    report.max_rel_error(),
                    report.redraws,
                    if report.passed() { "ok" } else { "FAIL" }
                );
                if !report.passed() {
                    failed.push(seed);
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::GradCheck(format!("seeds {failed:?} exceed tolerance {tol:e}")))
            }
        }
        Command::GenSynth {
            out,
            dim,
            normals,
            anomalies,
            seed,
        } => {
            let cfg = SynthConfig {
                dim,
                normals,
                anomalies,
                seed,
                ..SynthConfig::default()
            };
            let ds = synth::generate(&cfg)?;
            write_csv(&ds, &out)?;
            let stem = out
                .file_stem()
                .map_or("synthetic".into(), |s| s.to_string_lossy().into_owned());
            let schema_path = out.with_file_name(format!("{stem}.schema.json"));
            std::fs::write(&schema_path, serde_json::to_string_pretty(&synth::schema(&cfg))? + "\n")?;
            eprintln!(
                "wrote {} rows to {} and schema {}",
                ds.len(),
                out.display(),
                schema_path.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
