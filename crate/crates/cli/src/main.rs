// Copyright 2026 The peftsearch Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! `peftsearch`: pretrain a toy backbone, search a PEFT architecture under a
//! parameter budget, retrain it, and move architecture files around.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use peftsearch_core::architecture::SearchedArchitecture;
use peftsearch_core::backbone::{build_backbone, pretrain_backbone, Backbone};
use peftsearch_core::config::RunConfig;
use peftsearch_core::io::{emit_trace, export_architecture, import_architecture, load_backbone, save_backbone, write_atomic};
use peftsearch_core::search::{retrain, run_search, SearchMode};
use peftsearch_core::task::generate_task;

const LOG_ENV: &str = "PEFTSEARCH_LOG";

#[derive(Parser)]
#[command(name = "peftsearch", version, about = "Budget-guided PEFT architecture search on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and freeze the backbone, writing a checkpoint.
    Pretrain(RunArgs),
    /// Pretrain (or load) the backbone, search, retrain, write artifacts.
    Search(SearchArgs),
    /// Retrain a saved architecture and report metrics.
    Retrain(RetrainArgs),
    /// Validate an architecture file and write a canonical copy.
    ExportArch {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate an architecture file and print its summary.
    ImportArch {
        #[arg(long)]
        arch: PathBuf,
    },
    /// Search over a grid of trigger hyperparameters.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<SearchMode>,
    #[arg(long)]
    budget_ratio: Option<f64>,
    /// Use this backbone checkpoint instead of pretraining.
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Args)]
struct RetrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    backbone: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    search: SearchArgs,
    /// Comma-separated trigger counts.
    #[arg(long, value_delimiter = ',')]
    z: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    gamma: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    window: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
}

fn parse_mode(s: &str) -> Result<SearchMode, String> {
    s.parse().map_err(|e: peftsearch_core::Error| e.to_string())
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&run.config).with_context(|| format!("reading config {}", run.config.display()))?;
    if let Some(seed) = run.seed {
        cfg.budget.seed = seed;
        cfg.retrain.seed = seed;
    }
    if let Some(out) = &run.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn apply_search_overrides(cfg: &mut RunConfig, args: &SearchArgs) -> Result<()> {
    if let Some(mode) = args.mode {
        cfg.budget.mode = mode;
    }
    if let Some(r) = args.budget_ratio {
        cfg.budget.budget_ratio = r;
    }
    cfg.validate().context("invalid configuration")?;
    Ok(())
}

fn obtain_backbone(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Backbone> {
    if let Some(path) = checkpoint {
        let bb = load_backbone(path).with_context(|| format!("loading backbone {}", path.display()))?;
        if bb.config() != &cfg.backbone {
            bail!("checkpoint {} does not match the configured backbone", path.display());
        }
        if !bb.is_frozen() {
            bail!("checkpoint {} was never pretrained", path.display());
        }
        return Ok(bb);
    }
    let bb = build_backbone(&cfg.backbone, cfg.pretrain.seed)?;
    let (bb, report) = pretrain_backbone(bb, &cfg.pretrain_task(), cfg.pretrain.steps, &cfg.pretrain.options())?;
    info!(
        "pretrained {} steps, loss {:.4} -> {:.4}",
        cfg.pretrain.steps,
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(bb)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn cmd_pretrain(run: &RunArgs) -> Result<()> {
    let cfg = load_config(run)?;
    cfg.validate()?;
    let bb = obtain_backbone(&cfg, None)?;
    let path = cfg.out_dir.join("backbone.json");
    save_backbone(&bb, &path)?;
    println!(
        "backbone: {} parameters, final pretrain loss {:.4}, saved to {}",
        bb.param_count(),
        bb.pretrain_loss().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

struct SearchSummary {
    ratio: f64,
    test_accuracy: f64,
    total_params: usize,
    steps: usize,
    triggers: usize,
}

fn search_once(cfg: &RunConfig, bb: &Backbone, out: &Path) -> Result<SearchSummary> {
    let data = generate_task(&cfg.task)?;
    let (arch, trace) = run_search(bb, &cfg.space, &data, &cfg.budget)?;
    let metrics = retrain(&arch, bb, &data, &cfg.retrain)?;
    export_architecture(&arch, &out.join("architecture.json"))?;
    emit_trace(&trace, out)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;
    let ratio = arch.total_params as f64 / bb.param_count() as f64;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "config_hash": cfg.hash()?,
            "mode": cfg.budget.mode.name(),
            "seed": cfg.budget.seed,
            "budget_ratio": cfg.budget.budget_ratio,
            "backbone_params": bb.param_count(),
            "total_params": arch.total_params,
            "param_ratio": ratio,
            "kept_sites": arch.kept_count(),
            "search_steps": trace.steps.len(),
            "triggers": trace.triggers.len(),
            "warnings": trace.warnings,
            "val_accuracy": metrics.val_accuracy,
            "val_loss": metrics.val_loss,
            "test_accuracy": metrics.test_accuracy,
            "test_loss": metrics.test_loss,
        }),
    )?;
    Ok(SearchSummary {
        ratio,
        test_accuracy: metrics.test_accuracy,
        total_params: arch.total_params,
        steps: trace.steps.len(),
        triggers: trace.triggers.len(),
    })
}

fn cmd_search(args: &SearchArgs) -> Result<()> {
    let mut cfg = load_config(&args.run)?;
    apply_search_overrides(&mut cfg, args)?;
    let bb = obtain_backbone(&cfg, args.backbone.as_deref())?;
    let out = cfg.out_dir.clone();
    save_backbone(&bb, &out.join("backbone.json"))?;
    let s = search_once(&cfg, &bb, &out)?;
    println!(
        "mode {}: {} trainable parameters, ratio {:.6} (budget {:.6}), test accuracy {:.4}; artifacts in {}",
        cfg.budget.mode,
        s.total_params,
        s.ratio,
        cfg.budget.budget_ratio,
        s.test_accuracy,
        out.display()
    );
    Ok(())
}

fn cmd_retrain(args: &RetrainArgs) -> Result<()> {
    let cfg = load_config(&args.run)?;
    cfg.validate()?;
    let arch = import_architecture(&args.arch).with_context(|| format!("importing {}", args.arch.display()))?;
    let bb = obtain_backbone(&cfg, args.backbone.as_deref())?;
    let data = generate_task(&cfg.task)?;
    let m = retrain(&arch, &bb, &data, &cfg.retrain)?;
    write_json(&cfg.out_dir.join("retrain_metrics.json"), &serde_json::to_value(&m)?)?;
    println!(
        "{} trainable parameters: val accuracy {:.4}, test accuracy {:.4}",
        m.trainable_params, m.val_accuracy, m.test_accuracy
    );
    Ok(())
}

fn print_arch(arch: &SearchedArchitecture) {
    for s in &arch.sites {
        if s.kept {
            println!("{:<11} {:<7} dim {:<3} params {}", s.kind.name(), s.position.to_string(), s.dim, s.param_count);
        }
    }
    println!(
        "{} of {} sites kept, {} trainable parameters",
        arch.kept_count(),
        arch.sites.len(),
        arch.total_params
    );
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let mut base = load_config(&args.search.run)?;
    apply_search_overrides(&mut base, &args.search)?;
    let bb = obtain_backbone(&base, args.search.backbone.as_deref())?;
    let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
    let orf = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let b = &base.budget;
    let mut rows = vec!["z,gamma,window,tau,total_params,param_ratio,test_accuracy,steps,triggers".to_string()];
    for &z in &or(&args.z, b.max_triggers) {
        for &gamma in &orf(&args.gamma, b.gamma) {
            for &window in &or(&args.window, b.window) {
                for &tau in &orf(&args.tau, b.tau) {
                    let mut cfg = base.clone();
                    cfg.budget.max_triggers = z;
                    cfg.budget.gamma = gamma;
                    cfg.budget.window = window;
                    cfg.budget.tau = tau;
                    cfg.validate().context("invalid sweep point")?;
                    let dir = base.out_dir.join(format!("z{z}_g{gamma}_h{window}_t{tau}"));
                    let s = search_once(&cfg, &bb, &dir)?;
                    println!("Z={z} gamma={gamma} H={window} tau={tau}: ratio {:.6}, test accuracy {:.4}", s.ratio, s.test_accuracy);
                    rows.push(format!(
                        "{z},{gamma},{window},{tau},{},{},{},{},{}",
                        s.total_params, s.ratio, s.test_accuracy, s.steps, s.triggers
                    ));
                }
            }
        }
    }
    let mut text = rows.join("\n");
    text.push('\n');
    write_atomic(&base.out_dir.join("sweep.csv"), text.as_bytes())?;
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(run) => cmd_pretrain(run),
        Command::Search(args) => cmd_search(args),
        Command::Retrain(args) => cmd_retrain(args),
        Command::ExportArch { arch, out } => import_architecture(arch)
            .and_then(|a| export_architecture(&a, out))
            .map_err(anyhow::Error::from)
            .map(|_| println!("wrote {}", out.display())),
        Command::ImportArch { arch } => import_architecture(arch).map(|a| print_arch(&a)).map_err(anyhow::Error::from),
        Command::Sweep(args) => cmd_sweep(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
