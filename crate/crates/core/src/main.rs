use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use flowplan::config::{RunConfig, OUT_ENV};
use flowplan::error::Error;
use flowplan::pipeline;

#[derive(Parser)]
#[command(name = "flowplan", version, about = "Discrete flow-matching trajectory planner")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the stage being run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; takes precedence over the config and FLOWPLAN_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/val/test scene files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run one training stage.
    Train {
        stage: Stage,
        #[command(flatten)]
        common: Common,
    },
    /// Coarse-to-fine evaluation on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated step counts, e.g. 1,2,3,5,10.
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sample one trajectory per test scene.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a brute-force oracle suite.
    Oracle {
        suite: Suite,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize the artifacts in the output directory.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Embed,
    Flow,
    Grpo,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Path,
    Rates,
    Ctmc,
    Gradcheck,
    Reward,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Path => "path",
            Suite::Rates => "rates",
            Suite::Ctmc => "ctmc",
            Suite::Gradcheck => "gradcheck",
            Suite::Reward => "reward",
        }
    }
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut cfg = RunConfig::default();
            if let Some(dir) = std::env::var_os(OUT_ENV) {
                cfg.out_dir = dir.into();
            }
            cfg
        }
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenData { common } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            cfg.validate()?;
            print(&pipeline::gen_data(&cfg)?);
        }
        Cmd::Train { stage, common } => {
            let mut cfg = load(&common)?;
            match (stage, common.seed) {
                (Stage::Embed, Some(s)) => cfg.embed.seed = s,
                (Stage::Flow, Some(s)) => cfg.flow.seed = s,
                (Stage::Grpo, Some(s)) => cfg.grpo.seed = s,
                (_, None) => {}
            }
            cfg.validate()?;
            match stage {
                Stage::Embed => print(&pipeline::cmd_train_embed(&cfg)?),
                Stage::Flow => print(&pipeline::cmd_train_flow(&cfg)?),
                Stage::Grpo => print(&pipeline::cmd_train_grpo(&cfg)?),
            }
        }
        Cmd::Eval {
            common,
            steps,
            checkpoint,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.eval.seed = s;
            }
            if let Some(steps) = steps {
                cfg.eval.steps_list = steps;
            }
            cfg.validate()?;
            print(&pipeline::cmd_eval(&cfg, checkpoint.as_deref())?);
        }
        Cmd::Sample {
            common,
            steps,
            checkpoint,
        } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.eval.seed = s;
            }
            cfg.validate()?;
            let steps = steps.unwrap_or(*cfg.eval.steps_list.last().expect("validated non-empty"));
            if steps == 0 {
                return Err(Failure::Validation("--steps must be positive".into()));
            }
            let records = pipeline::cmd_sample(&cfg, checkpoint.as_deref(), steps)?;
            println!("{} samples written to {}", records.len(), pipeline::Layout::new(&cfg.out_dir).samples().display());
        }
        Cmd::Oracle { suite, common } => {
            let cfg = load(&common)?;
            cfg.validate()?;
            let report = pipeline::cmd_oracle(&cfg, suite.name(), common.seed.unwrap_or(0))?;
            for c in &report.checks {
                println!(
                    "{} {:<36} {:>14.6e} {}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.bound
                );
            }
            println!("{} suite finished in {:.2} s", report.suite, report.seconds);
            if !report.passed() {
                return Err(Failure::Runtime(format!("oracle suite {} failed", report.suite)));
            }
        }
        Cmd::Report { common } => {
            let cfg = load(&common)?;
            cfg.validate()?;
            for r in pipeline::cmd_report(&cfg)? {
                println!("{:<28} {:<8} {:<24} {}", r.artifact, r.present, r.metric, r.value);
            }
        }
    }
    Ok(())
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
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
