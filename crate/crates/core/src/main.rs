use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use memprobe::checkpoint;
use memprobe::config::{parse_config, ExperimentConfig};
use memprobe::harness::{
    self, cell_data, cell_dir, list_checkpoints, load_data, read_metrics, ExperimentOutcome, MetricsSink,
};
use memprobe::intervention::{
    evaluate_transfer_curve, format_transfer_rows, intervene_and_continue, write_text, InterventionPlan,
    TRANSFER_HEADER,
};
use memprobe::probes::ProbeKind;
use memprobe::{report, selftest};

/// Train small networks on partially corrupted labels and probe what their
/// hidden layers still know about the true classes.
#[derive(Parser, Debug)]
#[command(name = "memprobe", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and MEMPROBE_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training subset size; 0 uses the whole split.
    #[arg(long, global = true)]
    train_limit: Option<usize>,
    /// Hidden widths (128, 512, 2048, 2048) instead of (64, 128, 256, 256).
    #[arg(long, global = true)]
    paper_widths: bool,
    /// Whole splits, the wide layers and a 500-epoch cap.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Run only these seeds (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Run only these corruption degrees (comma separated).
    #[arg(long, global = true, value_delimiter = ',')]
    degrees: Vec<f64>,
    /// Explained-variance threshold for MASC subspaces.
    #[arg(long, global = true)]
    threshold: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every (seed, degree) cell, writing checkpoints and model rows.
    Train,
    /// Fit probes on checkpoints written by `train`.
    Probe {
        /// Probes to fit; defaults to the config's list.
        #[arg(long = "probe", value_parser = parse_probe)]
        probes: Vec<ProbeKind>,
    },
    /// Train and probe in one pass (resumes an interrupted sweep).
    Sweep,
    /// Swap class vectors into the output layer of every checkpoint and
    /// write the edited networks' test accuracy.
    Transfer,
    /// Edit the output layer mid-training and keep training.
    Intervene {
        /// Epoch at which to edit.
        #[arg(long)]
        at: Option<usize>,
        /// Epochs to train after the edit.
        #[arg(long = "continue")]
        continue_epochs: Option<usize>,
    },
    /// Plots and the VeLPIC-minus-MASC table from the metrics file.
    Report,
    /// Fast built-in correctness checks; needs no data.
    Selftest,
}

fn parse_probe(s: &str) -> Result<ProbeKind, String> {
    ProbeKind::parse(s).ok_or_else(|| format!("unknown probe `{s}` (masc, masc-quadratic, velpic, lr)"))
}

fn effective_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => parse_config(p)?,
        None => ExperimentConfig::default(),
    };
    if c.paper_scale {
        cfg.paper_scale();
    }
    if c.paper_widths {
        cfg.paper_widths();
    }
    cfg.apply_env();
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(n) = c.train_limit {
        cfg.train_limit = n;
    }
    if !c.seed.is_empty() {
        cfg.seeds = c.seed.clone();
    }
    if !c.degrees.is_empty() {
        cfg.degrees = c.degrees.clone();
    }
    if let Some(t) = c.threshold {
        cfg.threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish(outcome: ExperimentOutcome) -> Result<()> {
    log::info!(
        "{} rows written, {} cells already complete, {} cells failed",
        outcome.rows.len(),
        outcome.skipped_cells,
        outcome.errors.len()
    );
    for e in &outcome.errors {
        eprintln!("seed {} degree {}: {}", e.seed, e.degree, e.error);
    }
    if !outcome.errors.is_empty() {
        bail!("{} cells failed", outcome.errors.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Selftest = cli.command {
        let results = selftest::run_all();
        for r in &results {
            println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        }
        let failed = results.iter().filter(|r| !r.passed).count();
        if failed > 0 {
            bail!("{failed} self-checks failed");
        }
        return Ok(());
    }

    let mut cfg = effective_config(&cli.common)?;
    log::info!("effective config:\n{}", cfg.to_toml());

    if let Command::Report = cli.command {
        let rows = read_metrics(&cfg.out_dir.join(harness::METRICS_FILE))?;
        let dir = cfg.out_dir.join("report");
        for p in report::write_report(&rows, &dir)? {
            println!("{}", p.display());
        }
        match harness::difference_table(&rows, ProbeKind::Velpic, ProbeKind::Masc) {
            Ok(t) => {
                let path = dir.join("diff_velpic_masc.csv");
                write_text(&path, &harness::format_difference_table(&t))?;
                println!("{}", path.display());
            }
            Err(e) => log::warn!("no difference table: {e}"),
        }
        return Ok(());
    }

    let data = load_data(&cfg).with_context(|| {
        format!(
            "loading {} data from {} (scripts/fetch_mnist.sh downloads MNIST)",
            cfg.dataset,
            cfg.data_dir.display()
        )
    })?;
    log::info!(
        "{} training and {} test examples, {} features, {} classes",
        data.train.len(),
        data.test.len(),
        data.input_dim(),
        data.class_count()
    );

    match cli.command {
        Command::Train => {
            cfg.probes.clear();
            finish(harness::run_experiment(&cfg, &data)?)
        }
        Command::Sweep => finish(harness::run_experiment(&cfg, &data)?),
        Command::Probe { probes } => {
            if !probes.is_empty() {
                cfg.probes = probes;
            }
            finish(harness::probe_existing(&cfg, &data)?)
        }
        Command::Transfer => {
            let mut text = format!("{TRANSFER_HEADER}\n");
            for &seed in &cfg.seeds {
                for &degree in &cfg.degrees {
                    let cell = cell_data(&data, seed, degree)?;
                    let records = list_checkpoints(&cell_dir(&cfg.out_dir, seed, degree))?
                        .into_iter()
                        .map(|(_, p)| checkpoint::read_file::<f64>(&p).map(|(r, _)| r))
                        .collect::<Result<Vec<_>, _>>()?;
                    if records.is_empty() {
                        bail!("no checkpoints for seed {seed} degree {degree}; run `train` first");
                    }
                    let points = evaluate_transfer_curve(&records, &cell)?;
                    if let Some(p) = points.iter().find(|p| p.disagreements > 0) {
                        bail!("edited network disagrees with the probe at epoch {}", p.epoch);
                    }
                    text.push_str(&format_transfer_rows(seed, degree, &points));
                }
            }
            let path = cfg.out_dir.join("transfer.csv");
            write_text(&path, &text)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Intervene { at, continue_epochs } => {
            let plan = InterventionPlan {
                trigger_epoch: at.unwrap_or(cfg.trigger_epoch),
                continue_epochs: continue_epochs.unwrap_or(cfg.continue_epochs),
            };
            let path = cfg.out_dir.join("intervention.csv");
            if path.exists() {
                std::fs::remove_file(&path).with_context(|| format!("replacing {}", path.display()))?;
            }
            let mut sink = MetricsSink::open(&path)?;
            for &seed in &cfg.seeds {
                for &degree in &cfg.degrees {
                    let outcome = intervene_and_continue(&cfg, &data, seed, degree, plan)?;
                    sink.append(&outcome.rows)?;
                }
            }
            println!("{}", path.display());
            Ok(())
        }
        Command::Selftest | Command::Report => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
