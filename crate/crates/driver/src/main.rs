use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gdpo_core::objectives::Method;
use gdpo_driver::checkpoint::Checkpoint;
use gdpo_driver::config::{load_task, parse_overrides, RunConfig};
use gdpo_driver::error::{DriverError, Result};
use gdpo_driver::pipeline::{self, EvalArgs, GenDataArgs, SampleOptions, SweepArgs, GRADCHECK_LIMIT, TV_LIMIT};

#[derive(Parser)]
#[command(
    name = "gdpo",
    version,
    about = "Detailed-balance preference alignment on synthetic token tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// A run config file followed by optional `--key value` overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &parse_overrides(&self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled preference pairs (and optionally evaluation prompts).
    GenData {
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_pairs: usize,
        /// Defaults to the task file's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        prompts_out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        n_prompts: usize,
    },
    /// Train SFT or an alignment method from a run config.
    Train(ConfigArgs),
    /// Sample responses for a prompts file from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score samples against reference samples.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        out_json: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Fit the exact detailed-balance oracle on an enumerable MDP.
    OracleCheck {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate trained checkpoints over a grid of temperatures.
    Sweep {
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.6,0.8,1.0")]
        temperatures: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "dpo,ipo,cpo,slic,orpo,gdpo")]
        methods: Vec<Method>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Finite-difference check of every objective's gradient.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "sft,dpo,ipo,cpo,slic,orpo,gdpo")]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            task,
            n_pairs,
            seed,
            out,
            prompts_out,
            n_prompts,
        } => {
            let n = pipeline::run_gen_data(&GenDataArgs {
                task,
                n_pairs,
                seed,
                out: out.clone(),
                prompts_out,
                n_prompts,
            })?;
            eprintln!("wrote {n} pairs to {}", out.display());
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let outcome = pipeline::run_train(&cfg)?;
            print_json(&outcome.metrics);
        }
        Command::Sample {
            checkpoint,
            prompts,
            out,
            temperature,
            top_p,
            n,
            seed,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let defaults = ckpt.config.sampling;
            let opts = SampleOptions {
                temperature: temperature.unwrap_or(defaults.temperature),
                top_p: top_p.unwrap_or(defaults.top_p),
                n: n.unwrap_or(defaults.n),
                seed: seed.unwrap_or(ckpt.config.seed),
            };
            let set = pipeline::run_sample(&checkpoint, &prompts, &opts, &out)?;
            eprintln!("wrote {} prompts x {} samples to {}", set.len(), opts.n, out.display());
        }
        Command::Eval {
            samples,
            reference,
            task,
            method,
            temperature,
            out_json,
            out_csv,
        } => {
            let doc = pipeline::run_eval(&EvalArgs {
                samples,
                reference,
                task,
                method,
                temperature,
                out_json,
                out_csv,
            })?;
            print_json(&doc);
        }
        Command::OracleCheck { spec, out } => {
            let report = pipeline::run_oracle_check(&spec, out.as_deref())?;
            print_json(&report);
            if !(report.tv < TV_LIMIT) {
                return Err(DriverError::Acceptance(format!(
                    "TV {:e} is not below {TV_LIMIT:e}",
                    report.tv
                )));
            }
        }
        Command::Sweep {
            prompts,
            temperatures,
            methods,
            out,
            config,
        } => {
            let cfg = config.load()?;
            let outcome = pipeline::run_sweep(
                &cfg,
                &SweepArgs {
                    prompts,
                    temperatures,
                    methods,
                    out_csv: out.clone(),
                },
            )?;
            print!("{}", pipeline::eval_csv(&outcome.rows));
        }
        Command::Gradcheck {
            methods,
            seeds,
            batch,
            h,
            config,
        } => {
            let cfg = config.load()?;
            let task = load_task(&cfg.task)?;
            let rows = pipeline::run_gradcheck(&task, cfg.model, &cfg.loss_config(), &methods, &seeds, batch, h)?;
            let mut worst = 0.0f64;
            for r in &rows {
                println!(
                    "{:5} seed {:3}  max rel error {:.3e}  ({} coords)",
                    r.method.name(),
                    r.seed,
                    r.max_rel_error,
                    r.checked
                );
                worst = worst.max(r.max_rel_error);
            }
            if !(worst < GRADCHECK_LIMIT) {
                return Err(DriverError::GradCheck(format!("max relative error {worst:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
