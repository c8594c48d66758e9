use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use alee_core::corpus::save_corpus;
use alee_core::harness::{ablation_suite, run_on, sweep_m, ExperimentConfig, ABLATION_PERCENTAGES};
use alee_core::selection::{Strategy, TopM};
use alee_service::ServiceConfig;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "alee", version, about = "Active learning for joint event extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config, JSON or TOML (chosen by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Sentences selected per round.
    #[arg(long)]
    query_size: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic corpus and its schema.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sentences: Option<usize>,
    },
    /// Simulated active-learning run with one strategy.
    Run {
        #[command(flatten)]
        common: Common,
        /// mblp, random, uncertainty, diversity, uncert_diver or loss_pred.
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Top-m size of the importance score; `inf` for all predictions.
        #[arg(long, value_parser = parse_m)]
        m: Option<TopM>,
        /// Report labels needed to reach this trigger F1.
        #[arg(long)]
        target: Option<f64>,
    },
    /// The four predictor ablations on shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Labels-to-target as a function of m.
    SweepM {
        #[command(flatten)]
        common: Common,
        /// Comma-separated m values; `inf` for all predictions.
        #[arg(long, default_value = "2,5,10,inf", value_delimiter = ',', value_parser = parse_m)]
        m: Vec<TopM>,
        /// Target as a fraction of the full-data trigger F1.
        #[arg(long, default_value_t = 0.95)]
        target_fraction: f64,
    },
    /// Annotation service for a human in the loop.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "0.0.0.0")]
        host: String,
        /// Journal, snapshots and checkpoints.
        #[arg(long, default_value = "alee-state")]
        state_dir: PathBuf,
        /// Browser origin allowed by CORS; any origin when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

fn parse_m(s: &str) -> Result<TopM, String> {
    match s.trim() {
        "inf" | "all" | "∞" => Ok(None),
        v => match v.parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("m must be a positive integer or `inf`, got {v:?}")),
            Ok(m) => Ok(Some(m)),
        },
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(q) = self.query_size {
            cfg.selection.query_size = q;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn m_label(m: TopM) -> String {
    m.map_or("inf".into(), |m| m.to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth { common, sentences } => {
            let mut cfg = common.config()?;
            if let Some(n) = sentences {
                cfg.corpus.synth.n_sentences = n;
            }
            cfg.corpus.path = None;
            let (schema, records) = cfg.corpus.load()?;
            fs::create_dir_all(&common.out)?;
            save_corpus(&common.out.join("corpus.jsonl"), &records)?;
            schema.save(&common.out.join("schema.json"))?;
            info!("wrote {} sentences to {}", records.len(), common.out.display());
        }
        Command::Run {
            common,
            strategy,
            m,
            target,
        } => {
            let mut cfg = common.config()?;
            if let Some(s) = strategy {
                cfg.selection.strategy = s;
                cfg.variant = None;
            }
            if let Some(m) = m {
                cfg.selection.m = m;
            }
            let (schema, corpus) = cfg.corpus.load()?;
            let res = run_on(&cfg, &schema, &corpus)?;
            res.write(&common.out, target)?;
            for p in res.curve.aggregate() {
                println!(
                    "{:>3} {:>6.0} trigger {:.3} ± {:.3}  argument {:.3} ± {:.3}",
                    p.round, p.labeled, p.trigger_mean, p.trigger_std, p.argument_mean, p.argument_std
                );
            }
        }
        Command::Ablate { common } => {
            let cfg = common.config()?;
            let (schema, corpus) = cfg.corpus.load()?;
            let report = ablation_suite(&cfg, &schema, &corpus)?;
            fs::create_dir_all(&common.out)?;
            write_json(&common.out.join("ablation.json"), &report)?;
            let mut header = format!("{:<12}", "variant");
            for p in ABLATION_PERCENTAGES {
                header.push_str(&format!(" {:>11}", format!("{p}%")));
            }
            println!("{header}");
            for row in &report.rows {
                let mut line = format!("{:<12}", row.variant.name());
                for (_, t, a) in &row.cells {
                    line.push_str(&format!(" {t:.3}/{a:.3}"));
                }
                println!("{line}");
            }
        }
        Command::SweepM {
            common,
            m,
            target_fraction,
        } => {
            if !(target_fraction > 0.0 && target_fraction <= 1.0) {
                bail!("--target-fraction must be in (0, 1]");
            }
            let cfg = common.config()?;
            let (schema, corpus) = cfg.corpus.load()?;
            let report = sweep_m(&cfg, &schema, &corpus, &m, target_fraction)?;
            fs::create_dir_all(&common.out)?;
            write_json(&common.out.join("sweep.json"), &report)?;
            println!("full-data trigger F1 {:.3}, target {:.3}", report.full_data_f1, report.target);
            for row in &report.rows {
                match row.percent {
                    Some(p) => println!("m={:<4} {p:.1}% of the pool", m_label(row.m)),
                    None => println!("m={:<4} not reached", m_label(row.m)),
                }
            }
        }
        Command::Serve {
            config,
            port,
            host,
            state_dir,
            cors_origin,
        } => {
            let experiment = load_config(config.as_deref())?;
            experiment.validate()?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad --host/--port")?;
            let cfg = ServiceConfig {
                experiment,
                state_dir,
                token: std::env::var("ALEE_TOKEN").ok().filter(|t| !t.is_empty()),
                cors_origin,
            };
            tokio::runtime::Runtime::new()?.block_on(alee_service::serve(cfg, addr))?;
        }
    }
    Ok(())
}

