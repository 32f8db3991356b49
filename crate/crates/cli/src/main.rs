//! `maskrefine` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use maskrefine::config::PipelineConfig;
use maskrefine::keyvalue::{format_list, KeyValues};
use maskrefine::pipeline::{self, Variant};
use maskrefine::Error;

#[derive(Parser, Debug)]
#[command(name = "maskrefine", version, about = "Spatial mask refinement and multi-channel speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Enhance a multi-channel recording using externally estimated masks.
    Enhance(EnhanceArgs),
    /// Run seeded simulated trials and write metric reports.
    Experiment(Common),
    /// Render one simulated scenario to WAV files.
    Simulate(Common),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Input SNR(s) in dB, comma separated.
    #[arg(long = "snr-db", value_name = "X", value_delimiter = ',', allow_negative_numbers = true)]
    snr_db: Vec<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// crm, sc (alias sc-wiener) or mc.
    #[arg(long)]
    mode: Option<String>,
    /// Use the pooled prior directly instead of the refined posterior.
    #[arg(long)]
    skip_refinement: bool,
    #[arg(long, value_name = "N")]
    em_iters: Option<usize>,
    /// Keep the full-rank speech covariance in the EM.
    #[arg(long)]
    no_rank1: bool,
    /// Process the two nested sub-arrays separately and fuse by band.
    #[arg(long, value_enum)]
    subarray: Option<Switch>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    #[command(flatten)]
    common: Common,
    /// Multi-channel input WAV.
    #[arg(long, value_name = "WAV")]
    input: Option<PathBuf>,
    /// MCMF mask file; repeat once per channel or give one file.
    #[arg(long = "mask", value_name = "MCMF")]
    masks: Vec<PathBuf>,
    /// Enhanced single-channel WAV.
    #[arg(long, value_name = "WAV")]
    output: Option<PathBuf>,
    /// Write the refined speech mask (or the prior without refinement) as MCMF.
    #[arg(long, value_name = "MCMF")]
    dump_mask: Option<PathBuf>,
    /// Write the per-iteration EM log-likelihood as CSV.
    #[arg(long, value_name = "CSV")]
    loglik: Option<PathBuf>,
}

/// Flags as config entries, so they go through the same validation as the file.
fn overrides(c: &Common, has_scenario: bool) -> KeyValues {
    let mut kv = KeyValues::default();
    if let Some(seed) = c.seed {
        kv.set("experiment.seed", seed);
        if has_scenario {
            kv.set("seed", seed);
        }
    }
    if !c.snr_db.is_empty() {
        kv.set("experiment.snr_db", format_list(&c.snr_db));
        if has_scenario {
            kv.set("snr_db", format!("{:?}", c.snr_db[0]));
        }
    }
    if let Some(n) = c.trials {
        kv.set("experiment.trials", n);
    }
    if let Some(m) = &c.mode {
        kv.set("enhance.mode", m);
    }
    if c.skip_refinement {
        kv.set("enhance.refine", false);
    }
    if let Some(n) = c.em_iters {
        kv.set("em.iterations", n);
    }
    if c.no_rank1 {
        kv.set("em.rank1", false);
    }
    if let Some(s) = c.subarray {
        kv.set("beamform.subarray", s == Switch::On);
    }
    if let Some(dir) = &c.out {
        kv.set("paths.report_dir", dir.display());
    }
    kv
}

fn load_config(c: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let has_scenario = !cfg.scenario.is_empty();
    cfg.apply(&overrides(c, has_scenario))?;
    Ok(cfg)
}

fn out_dir(cfg: &PipelineConfig) -> Result<PathBuf, Error> {
    cfg.paths
        .report_dir
        .clone()
        .ok_or_else(|| Error::InvalidParameter("no output directory; pass --out DIR".into()))
}

fn enhance(args: &EnhanceArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.common)?;
    if let Some(p) = &args.input {
        cfg.paths.input = Some(p.clone());
    }
    if !args.masks.is_empty() {
        cfg.paths.masks = args.masks.clone();
    }
    if let Some(p) = &args.output {
        cfg.paths.output = Some(p.clone());
    } else if let (None, Some(dir)) = (&cfg.paths.output, &cfg.paths.report_dir) {
        cfg.paths.output = Some(dir.join("enhanced.wav"));
    }
    if let Some(p) = &args.dump_mask {
        cfg.paths.dump_mask = Some(p.clone());
    }
    if let Some(p) = &args.loglik {
        cfg.paths.loglik = Some(p.clone());
    }
    if cfg.paths.masks.is_empty() {
        return Err(Error::InvalidParameter("no mask files given; pass --mask".into()));
    }
    if let Some(dir) = cfg.paths.output.as_ref().and_then(|p| p.parent()) {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let summary = pipeline::enhance_files(&cfg)?;
    info!(
        "{}: {} channels in, {} samples written to {}",
        summary.variant.name(),
        summary.channels,
        summary.samples,
        cfg.paths.output.as_ref().expect("output set").display()
    );
    Ok(())
}

fn experiment(c: &Common) -> Result<(), Error> {
    let cfg = load_config(c)?;
    let dir = out_dir(&cfg)?;
    info!(
        "{} trials at {} dB, seed {}, corruption {}",
        cfg.experiment.trials,
        format_list(&cfg.experiment.snr_db),
        cfg.experiment.seed,
        cfg.experiment.corruption
    );
    let report = pipeline::run_experiment(&cfg)?;
    for t in &report.trials {
        for w in &t.warnings {
            warn!("trial {} at {} dB: {w}", t.trial, t.snr_db);
        }
    }
    report.write_to(&dir)?;
    println!("snr_db,auc_prior,auc_refined,sisnr_in,{}", Variant::ALL.map(|v| v.name()).join(","));
    for &snr in &report.snr_db {
        let (p, r) = report.mean_auc(snr);
        let outs: Vec<String> = Variant::ALL.iter().map(|&v| format!("{:.3}", report.mean_sisnr(snr, v))).collect();
        println!("{snr},{p:.4},{r:.4},{:.3},{}", report.mean_sisnr_in(snr), outs.join(","));
    }
    info!("reports written to {}", dir.display());
    Ok(())
}

fn simulate(c: &Common) -> Result<(), Error> {
    let cfg = load_config(c)?;
    let dir = out_dir(&cfg)?;
    let scenario = pipeline::simulation_scenario(&cfg)?;
    info!(
        "room {:?} m, rt60 {} s, snr {} dB, seed {}",
        scenario.room_dims, scenario.rt60, scenario.snr_db, scenario.seed
    );
    pipeline::simulate_to(&scenario, cfg.experiment.duration_s, &dir)?;
    info!("scenario written to {}", dir.display());
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_usage() {
        1
    } else if err.is_numerical() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Enhance(args) => enhance(args),
        Command::Experiment(c) => experiment(c),
        Command::Simulate(c) => simulate(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
