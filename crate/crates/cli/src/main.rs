use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lfr_cli::config::{ExperimentConfig, Knob};
use lfr_cli::error::{CliError, Result};
use lfr_cli::pipeline::{self, TrainOptions, REGIONS};
use lfr_core::eval::{EvalReport, Metric};
use lfr_core::region::RegionMethod;
use lfr_core::trainer::Method;

#[derive(Parser)]
#[command(name = "lfr", version, about = "Fine-tune translation models inside retention regions")]
struct Cli {
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, global = true, env = "LFR_OUT")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "LFR_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegionArg {
    Cm,
    Om,
}

impl From<RegionArg> for RegionMethod {
    fn from(r: RegionArg) -> Self {
        match r {
            RegionArg::Cm => RegionMethod::Cm,
            RegionArg::Om => RegionMethod::Om,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Bleu,
    Accuracy,
}

#[derive(Subcommand)]
enum Command {
    /// Train the starting model on the previous task and write all task data.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compute an update region and store it in a checkpoint.
    SearchRegion {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input checkpoint; defaults to regions.ckpt if present, else pretrained.ckpt.
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long, value_enum, default_value = "cm")]
        method: RegionArg,
        /// Section tag; defaults to the method name.
        #[arg(long)]
        tag: Option<String>,
        #[arg(long, default_value = REGIONS)]
        save: String,
    },
    /// Fine-tune on one new-task stage.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input checkpoint; defaults to regions.ckpt if present, else pretrained.ckpt.
        #[arg(long)]
        ckpt: Option<String>,
        /// Overrides the configured method (ft, l2, ewc, kd, mixed_ft, lfr).
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        region: Option<String>,
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        save: Option<String>,
        /// Store the Adam moments in the output checkpoint.
        #[arg(long)]
        save_optimizer: bool,
    },
    /// Evaluate a checkpoint on every test set its vocabulary covers.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: String,
        #[arg(long, default_value = "eval")]
        name: String,
    },
    /// Train once per value of a hyper-parameter.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// lambda, rho, om_alpha, alpha, lr, steps or temperature.
        #[arg(long)]
        knob: String,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Pretrain (if needed) and run every stage of the configured scenario.
    Scenario {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify artifacts and summarize results into report.md and a plot.
    Report {
        #[arg(long, value_enum, default_value = "accuracy")]
        metric: MetricArg,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn out_dir(cli_out: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn print_report(r: &EvalReport) {
    for (id, d) in &r.directions {
        println!("{id:<24} {:<9?} BLEU {:6.2}  acc {:6.2}", d.role, d.bleu, d.accuracy);
    }
    let show = |label: &str, a: Option<lfr_core::eval::Averages>| {
        if let Some(a) = a {
            println!("{label:<24} BLEU {:6.2}  acc {:6.2}", a.bleu, a.accuracy);
        }
    };
    show("previous (avg1)", r.avg1);
    show("new (avg2)", r.avg2);
    show("combined (avg)", r.avg);
    show("zero-shot", r.zero_avg);
    if let Some(f) = r.forgetting {
        println!("{:<24} BLEU {:6.2}  acc {:6.2}", "forgetting", f.bleu, f.accuracy);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be > 0".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Pretrain { config } => {
            let cfg = load_config(config.as_deref())?;
            let out = pipeline::pretrain(&cfg, &out_dir(&cli.out, &cfg))?;
            println!("pretrained.ckpt {} (previous-task valid accuracy {:.4})", out.checksum, out.valid_accuracy);
            print_report(&out.baseline);
        }
        Command::SearchRegion { config, ckpt, method, tag, save } => {
            let cfg = load_config(config.as_deref())?;
            let method = RegionMethod::from(method);
            let tag = tag.unwrap_or_else(|| method.to_string().to_ascii_lowercase());
            let root = out_dir(&cli.out, &cfg);
            let ckpt = ckpt.unwrap_or_else(|| pipeline::default_checkpoint(&root).to_string());
            let stats = pipeline::search_region(&cfg, &root, &ckpt, method, &tag, &save)?;
            println!("{}", serde_json::to_string_pretty(&stats).map_err(|e| CliError::Runtime(e.to_string()))?);
        }
        Command::Train { config, ckpt, method, region, stage, name, save, save_optimizer } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = method {
                cfg.method.method = m.parse::<Method>()?;
            }
            let root = out_dir(&cli.out, &cfg);
            let ckpt = ckpt.unwrap_or_else(|| pipeline::default_checkpoint(&root).to_string());
            let opts = TrainOptions { ckpt, region_tag: region, stage, name, save, save_optimizer };
            let out = pipeline::train_stage(&cfg, &root, &opts)?;
            println!("{} {}", out.run_id, out.checksum);
            print_report(&out.report);
        }
        Command::Evaluate { config, ckpt, name } => {
            let cfg = load_config(config.as_deref())?;
            print_report(&pipeline::evaluate(&cfg, &out_dir(&cli.out, &cfg), &ckpt, &name)?);
        }
        Command::Sweep { config, knob, values } => {
            let cfg = load_config(config.as_deref())?;
            let knob: Knob = knob.parse()?;
            let out = pipeline::sweep(&cfg, &out_dir(&cli.out, &cfg), knob, &values)?;
            print!("{}", out.csv);
        }
        Command::Scenario { config } => {
            let cfg = load_config(config.as_deref())?;
            let out = pipeline::scenario(&cfg, &out_dir(&cli.out, &cfg))?;
            for (log, report) in out.stages.iter().zip(&out.reports) {
                println!("== stage {}", log.name);
                print_report(report);
            }
        }
        Command::Report { metric } => {
            let root = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
            let metric = match metric {
                MetricArg::Bleu => Metric::Bleu,
                MetricArg::Accuracy => Metric::Accuracy,
            };
            let out = pipeline::report(&root, metric)?;
            print!("{}", out.markdown);
            if let Err(e) = out.audit {
                return Err(CliError::Runtime(format!("data audit failed: {e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { lfr_cli::error::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
