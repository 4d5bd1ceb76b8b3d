//! Command-line entry point: corpus generation, training, serving, the
//! device client, the comparison bench, and the delay table.
//!
//! Every failure prints one machine-readable line to stderr —
//! `error category=<category>: <message>` — and exits with a per-category
//! code; argument mistakes are usage errors (exit 2, reported by the
//! parser).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use anchorhead::harness::{
    baselines, delay_table, load_checkpoint, save_checkpoint, train, ExperimentConfig,
};
use anchorhead::protocol::{serve, AdaptClient, CloudPath, ServeModels, TcpTransport};
use anchorhead::synthdata::Corpus;
use anchorhead::{Error, Result};

#[derive(Parser)]
#[command(
    name = "anchorhead",
    about = "Cloud-assisted per-sample head generation for on-device multi-modal classifiers",
    version
)]
struct Cli {
    /// Flat key=value config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; each subcommand has its own default.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic device corpus and write it as a binary file.
    GenCorpus,
    /// Train the full pipeline on a corpus and write a checkpoint.
    Train {
        /// Corpus file produced by gen-corpus.
        #[arg(long, default_value = "corpus.bin")]
        corpus: PathBuf,
    },
    /// Serve adaptation requests over TCP from a trained checkpoint.
    Serve {
        /// Checkpoint file produced by train.
        #[arg(long, default_value = "checkpoint.bin")]
        checkpoint: PathBuf,
        /// Listen address.
        #[arg(long, default_value = "127.0.0.1:4710")]
        addr: String,
        /// Concurrent in-flight requests.
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        /// Bypass the distribution reasoner (condition the hypernetwork on
        /// the uploaded feature directly).
        #[arg(long)]
        direct: bool,
    },
    /// Run the device client against a server: evaluate every realtime
    /// sample over TCP and report accuracy and exchange cost.
    Adapt {
        /// Checkpoint file (the device needs its encoder parameters).
        #[arg(long, default_value = "checkpoint.bin")]
        checkpoint: PathBuf,
        /// Corpus file with the realtime streams.
        #[arg(long, default_value = "corpus.bin")]
        corpus: PathBuf,
        /// Server address.
        #[arg(long, default_value = "127.0.0.1:4710")]
        addr: String,
    },
    /// Train and evaluate all four methods; write CSV and JSON reports.
    Bench {
        /// Corpus file; generated from the config when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Print the reference transfer-delay table and verify every cell.
    DelayTable,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenCorpus => {
            let config = load_config(cli)?;
            let mut corpus_cfg = config.corpus.clone();
            if let Some(seed) = cli.seed {
                corpus_cfg.seed = seed;
            }
            let corpus = Corpus::generate(&corpus_cfg)?;
            let path = out_path(cli, "corpus.bin");
            corpus.save(&path)?;
            let samples: usize = corpus
                .devices
                .iter()
                .map(|d| d.history.len() + d.realtime.len())
                .sum();
            println!(
                "wrote {} ({} devices, {samples} samples, seed {})",
                path.display(),
                corpus.devices.len(),
                corpus_cfg.seed
            );
        }
        Command::Train { corpus } => {
            let config = load_config(cli)?;
            let corpus = Corpus::load(corpus)?;
            let outcome = train::run_phase1_train(&config, &corpus)?;
            let path = out_path(cli, "checkpoint.bin");
            save_checkpoint(&path, &config, &outcome.store)?;
            let fmt_ends = |curve: &[f64]| match (curve.first(), curve.last()) {
                (Some(a), Some(b)) => format!("{a:.4} -> {b:.4}"),
                _ => "skipped (zero epochs)".to_string(),
            };
            println!("reasoner objective: {}", fmt_ends(&outcome.stage1_total));
            println!("task cross-entropy: {}", fmt_ends(&outcome.stage2_ce));
            println!("wrote {} (config hash {:016x})", path.display(), config.hash());
        }
        Command::Serve { checkpoint, addr, concurrency, direct } => {
            let (config, store) = load_checkpoint(checkpoint)?;
            let models = ServeModels {
                store,
                fda: config.fda_config(),
                adr: config.adr_config(),
                path: if *direct { CloudPath::Direct } else { CloudPath::Reasoned },
                sample_mode: config.sample_mode,
                style_source: config.style_source,
                base_seed: config.seed,
            };
            let handle = serve(Arc::new(models), addr, *concurrency)?;
            println!("serving on {} (config hash {:016x})", handle.addr(), config.hash());
            // park until the process is killed; the handle drains on drop
            loop {
                std::thread::park();
            }
        }
        Command::Adapt { checkpoint, corpus, addr } => {
            let (config, store) = load_checkpoint(checkpoint)?;
            let corpus = Corpus::load(corpus)?;
            let client = AdaptClient::new(Box::new(TcpTransport::new(addr.clone())));
            let report = baselines::eval_ours_with_client(
                &client,
                &store,
                &config,
                &corpus,
                Vec::new(),
                Vec::new(),
            )?;
            println!(
                "accuracy {:.4} over {} devices ({} transport, mean exchange {:.2} ms)",
                report.accuracy,
                corpus.devices.len(),
                client.transport_label(),
                report.measured_wall_ms
            );
            for cell in &report.delays {
                println!(
                    "  {} {}MB/s: simulated {:.3} ms/exchange",
                    cell.scenario, cell.bandwidth_mbps, cell.delay_ms
                );
            }
            if cli.out.is_some() {
                let single = baselines::RunReport {
                    config_hash: format!("{:016x}", config.hash()),
                    seed: config.seed,
                    methods: vec![report],
                };
                let path = out_path(cli, "adapt.json");
                write_text(&path, &baselines::render_json(&single)?)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Bench { corpus } => {
            let config = load_config(cli)?;
            let corpus = match corpus {
                Some(path) => Corpus::load(path)?,
                None => Corpus::generate(&config.corpus)?,
            };
            let report = baselines::run_baseline_suite(&config, &corpus)?;
            let csv = baselines::render_csv(&report);
            print!("{csv}");
            let csv_path = out_path(cli, "report.csv");
            write_text(&csv_path, &csv)?;
            let json_path = csv_path.with_extension("json");
            write_text(&json_path, &baselines::render_json(&report)?)?;
            println!("wrote {} and {}", csv_path.display(), json_path.display());
        }
        Command::DelayTable => {
            let config = load_config(cli)?;
            let table = delay_table::render_table(&config.scenarios);
            print!("{table}");
            if cli.out.is_some() {
                let path = out_path(cli, "delay-table.txt");
                write_text(&path, &table)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn exit_code(category: &str) -> i32 {
    match category {
        "config" => 3,
        "data" => 4,
        "io" => 5,
        "numerics" => 6,
        "protocol" => 7,
        "train" => 8,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error category={}: {e}", e.category());
        std::process::exit(exit_code(e.category()));
    }
}
