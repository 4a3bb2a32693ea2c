//! `vln`: stage-1 training, DAgger rounds, evaluation, plotting and world
//! generation. Any run-config key can be given as a flag, e.g.
//! `vln train --config run.toml --memory_mode recursive --seed 3`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use vln_core::runner::{plot, table_schedules, RunConfig, RunManifest, Runner};
use vln_core::Error;

#[derive(Parser)]
#[command(name = "vln", version, about = "Gridworld navigation policy runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat TOML run config; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--<key> <value>` overrides for run-config keys.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage-1 behaviour cloning on oracle trajectories.
    Train(ConfigArgs),
    /// One DAgger round from a stage-1 checkpoint, then retraining.
    Dagger {
        /// Defaults to `<output_dir>/stage1.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run the four comparison schedules instead of the configured one.
        #[arg(long)]
        sweep: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Greedy evaluation on the held-out worlds.
    Eval {
        /// Defaults to `<output_dir>/stage1.ckpt`.
        #[arg(long, conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the oracle policy instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Figures and data files from one or more manifests.
    Plot {
        #[arg(long, short, default_value = "plots")]
        out: PathBuf,
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Writes the world splits, instructions and vocabulary.
    GenWorlds(ConfigArgs),
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    let keys = RunConfig::keys();
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let body = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected `--<key>`, got `{flag}`")))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("`--{body}` needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        let norm = key.replace('-', "_");
        if !keys.contains(&norm) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        out.push((norm, value));
    }
    Ok(out)
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(p.clone()),
            _ => e.into(),
        })?,
        None => String::new(),
    };
    RunConfig::from_parts(&text, &parse_overrides(&args.overrides)?)
}

fn print_manifest(m: &RunManifest) {
    print!("{}", m.metric_table());
    for (name, path) in &m.artifacts {
        println!("artifact {name}: {}", path.display());
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(args) => {
            let m = Runner::new(load_config(&args)?)?.train_stage1()?;
            print_manifest(&m);
        }
        Command::Dagger { checkpoint, sweep, cfg } => {
            let mut runner = Runner::new(load_config(&cfg)?)?;
            let ckpt = checkpoint.unwrap_or_else(|| runner.out("stage1.ckpt"));
            let schedules = if sweep { table_schedules() } else { vec![runner.cfg.schedule()] };
            let m = runner.dagger(&ckpt, &schedules)?;
            print!("{}", vln_core::runner::sweep_table(&m.sweep));
            print_manifest(&m);
        }
        Command::Eval { checkpoint, oracle, cfg } => {
            let mut runner = Runner::new(load_config(&cfg)?)?;
            let ckpt = (!oracle).then(|| checkpoint.unwrap_or_else(|| runner.out("stage1.ckpt")));
            let m = runner.eval(ckpt.as_deref())?;
            print!("{}", std::fs::read_to_string(&m.artifacts["report"])?);
            println!("manifest: {}", runner.out("manifest_eval.json").display());
        }
        Command::Plot { out, manifests } => {
            let p = plot(&manifests, &out)?;
            for f in &p.files {
                println!("wrote {}", f.display());
            }
            if !p.skipped.is_empty() {
                println!("skipped {} manifest(s)", p.skipped.len());
            }
        }
        Command::GenWorlds(args) => {
            let m = Runner::new(load_config(&args)?)?.gen_worlds()?;
            print_manifest(&m);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
