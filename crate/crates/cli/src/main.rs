mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use crate::config::RunConfig;

/// Class-wise adversarial domain adaptation for RGB-D segmentation.
///
/// Settings come from a flat `key = value` file (`--config`) and any number
/// of `--key value` overrides after the command. Every command writes
/// `run.json` with the fully resolved configuration into `--out`.
#[derive(Parser, Debug)]
#[command(name = "classwise-adapt", version)]
struct Cli {
    /// Flat config file, or a previous `run.json`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the two-domain toy dataset.
    GenToy(Overrides),
    /// Train CNN_C on the synthetic domain.
    Pretrain(Overrides),
    /// Adapt CNN_R to the real domain (`--mode classwise|single|none`).
    Adapt(Overrides),
    /// Score a checkpoint on the evaluation split.
    Eval(Overrides),
    /// Fuse per-frame predictions into a labeled point cloud.
    Fuse(Overrides),
}

#[derive(clap::Args, Debug)]
struct Overrides {
    /// Config overrides as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    rest: Vec<String>,
}

fn pairs(rest: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = rest.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            bail!("expected `--key value`, got `{flag}`");
        };
        let key = key.replace('-', "_");
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let Some(value) = it.next() else {
            bail!("flag `--{key}` needs a value");
        };
        out.push((key, value.clone()));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let (name, overrides) = match &cli.command {
        Command::GenToy(o) => ("gen-toy", o),
        Command::Pretrain(o) => ("pretrain", o),
        Command::Adapt(o) => ("adapt", o),
        Command::Eval(o) => ("eval", o),
        Command::Fuse(o) => ("fuse", o),
    };
    let mut kv = pairs(&overrides.rest)?;
    if let Some(seed) = cli.seed {
        kv.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.out {
        kv.push(("out".into(), out.display().to_string()));
    }
    let cfg = base.with_pairs(&kv)?.resolve();
    let outcome = match name {
        "gen-toy" => commands::gen_toy(&cfg)?,
        "pretrain" => commands::pretrain(&cfg)?,
        "adapt" => commands::adapt(&cfg)?,
        "eval" => commands::eval(&cfg)?,
        _ => commands::fuse(&cfg)?,
    };
    let run_json = commands::write_run_json(&cfg, &outcome)?;
    log::info!("{} done, wrote {}", outcome.command, run_json.display());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
