use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mergelab::config::parse_assignment;
use mergelab::{run, Command, RunConfig};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "mergelab", version, about = "Model-merging laboratory on small MLP experts")]
struct Cli {
    #[command(subcommand)]
    command: Sub,

    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate the synthetic task suite
    GenData,
    /// Pre-train on all tasks and fine-tune one expert per task
    Train,
    /// Write the static merge selected by merge.method
    Merge,
    /// Evaluate the pre-trained model, experts and static merges
    Eval,
    /// Evaluate per-sample SE-Merging and write the per-sample CSV
    SeEval,
    /// acc@k, representation bias and disentanglement reports
    Diagnose,
    /// Export layer representations of the merge and the experts
    ExportReps,
    /// Run the whole pipeline and write summary.json
    Reproduce,
}

/// Every flag sets the config key named in its help text.
#[derive(Args)]
struct Opts {
    /// JSON run configuration; keys not given keep their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Set any config key, e.g. --set se.metric=cosine (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, Value)>,
    /// Worker threads for evaluation (default: all cores)
    #[arg(long, global = true, env = "MERGELAB_THREADS")]
    threads: Option<usize>,
    /// run_id
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// output_dir
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// data_dir
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// merge.method (average, task_arithmetic, ties)
    #[arg(long, global = true)]
    method: Option<String>,
    /// merge.lambda and se.lambda
    #[arg(long, global = true)]
    lambda: Option<f32>,
    /// merge.ties_density
    #[arg(long, global = true)]
    density: Option<f32>,
    /// se.layer
    #[arg(long, global = true)]
    layer: Option<usize>,
    /// se.metric (l2, cosine)
    #[arg(long, global = true)]
    metric: Option<String>,
    /// se.reference = full: compare against the fine-tuned experts
    #[arg(long, global = true)]
    reference_full: bool,
    /// se.routing = hard: whole budget on the nearest task vector
    #[arg(long, global = true)]
    route_hard: bool,
}

impl Opts {
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: Value| out.push((k.to_string(), v));
        if let Some(v) = &self.run_id {
            put("run_id", v.clone().into());
        }
        if let Some(v) = &self.output_dir {
            put("output_dir", v.display().to_string().into());
        }
        if let Some(v) = &self.data_dir {
            put("data_dir", v.display().to_string().into());
        }
        if let Some(v) = self.seed {
            put("seed", v.into());
        }
        if let Some(v) = &self.method {
            put("merge.method", v.clone().into());
        }
        if let Some(v) = self.lambda {
            put("merge.lambda", v.into());
            put("se.lambda", v.into());
        }
        if let Some(v) = self.density {
            put("merge.ties_density", v.into());
        }
        if let Some(v) = self.layer {
            put("se.layer", v.into());
        }
        if let Some(v) = &self.metric {
            put("se.metric", v.clone().into());
        }
        if self.reference_full {
            put("se.reference", "full".into());
        }
        if self.route_hard {
            put("se.routing", "hard".into());
        }
        // explicit --set assignments win over the named flags
        out.extend(self.set.iter().cloned());
        out
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Sub::GenData => Command::GenData,
        Sub::Train => Command::Train,
        Sub::Merge => Command::Merge,
        Sub::Eval => Command::Eval,
        Sub::SeEval => Command::SeEval,
        Sub::Diagnose => Command::Diagnose,
        Sub::ExportReps => Command::ExportReps,
        Sub::Reproduce => Command::Reproduce,
    };
    let result = RunConfig::load(cli.opts.config.as_deref(), &cli.opts.overrides())
        .and_then(|cfg| run(command, &cfg, cli.opts.threads));
    match result {
        Ok(message) => {
            println!("{message}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mergelab {}: {e}", command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
