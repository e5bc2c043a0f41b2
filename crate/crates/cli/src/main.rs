//! `xmodal`: dataset generation, training, evaluation, probing and run
//! comparison.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use xmodal::data::{read_dataset_file, write_dataset_file};
use xmodal::eval::MetricsReport;
use xmodal::nets::{init_params, ParamStore};
use xmodal::report::{self, SweepPoint};
use xmodal::train::{train_from, train_supervised_baseline};
use xmodal::{generate_synthetic, Dataset, Error, Regime, RunConfig};

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Cross-modal speaker embedding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat key=value config file. Defaults to the run directory's snapshot.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output or run directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides run.seed (and RUN_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.regime.
    #[arg(long)]
    regime: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and held-out synthetic datasets.
    Gen(Common),
    /// Train one regime into a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest epoch checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a run's final checkpoint on the held-out set.
    Eval(Common),
    /// Linear probe and supervised baseline over labelled-subset sizes.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Only this labelled-speaker count instead of the configured sweep.
        #[arg(long)]
        labeled: Option<usize>,
    },
    /// Tabulate evaluated runs side by side.
    Compare {
        /// Directory for the comparison report.
        #[arg(long)]
        out: PathBuf,
        /// Run directories to compare.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Failure split by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(c) => cmd_gen(&c),
        Command::Train { common, resume } => cmd_train(&common, resume),
        Command::Eval(c) => cmd_eval(&c),
        Command::Probe { common, labeled } => cmd_probe(&common, labeled),
        Command::Compare { out, runs } => cmd_compare(&out, &runs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

const CONFIG_SNAPSHOT: &str = "config.txt";
const META: &str = "meta.txt";
const RUNLOG: &str = "runlog.csv";
const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Loads the config (explicit path, else the run snapshot, else defaults)
/// and applies RUN_SEED and flag overrides.
fn load_config(c: &Common) -> std::result::Result<RunConfig, Failure> {
    let path = c.config.clone().or_else(|| {
        let snap = c.out.join(CONFIG_SNAPSHOT);
        snap.exists().then_some(snap)
    });
    let mut cfg = match &path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = &c.regime {
        cfg.train.regime = r.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require(path: &Option<PathBuf>, key: &str) -> std::result::Result<PathBuf, Failure> {
    let p = path.clone().ok_or_else(|| usage(format!("config key {key} is not set")))?;
    if !p.exists() {
        return Err(usage(format!("{key}: {} does not exist", p.display())));
    }
    Ok(p)
}

fn load_dataset(path: &Path) -> std::result::Result<Dataset, Failure> {
    Ok(read_dataset_file(path).with_context(|| format!("reading {}", path.display()))?)
}

fn write(path: &Path, text: &str) -> std::result::Result<(), Failure> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_gen(c: &Common) -> CmdResult {
    let cfg = load_config(c)?;
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    for (name, synth) in [("train.xmds", cfg.synth.clone()), ("heldout.xmds", cfg.heldout_synth())] {
        let ds = generate_synthetic(&synth)?;
        let path = c.out.join(name);
        write_dataset_file(&path, &ds)?;
        let bytes = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        println!("{}: {} tracks, {} speakers, {bytes} bytes", path.display(), ds.len(), ds.speakers().len());
    }
    Ok(())
}

fn epoch_checkpoint(run: &Path, epoch: usize) -> PathBuf {
    run.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

fn latest_epoch(run: &Path) -> Option<usize> {
    fs::read_dir(run.join("checkpoints"))
        .ok()?
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse().ok()
        })
        .max()
}

fn cmd_train(c: &Common, resume: bool) -> CmdResult {
    let cfg = load_config(c)?;
    let data = load_dataset(&require(&cfg.train_data, "data.train")?)?;
    let run = &c.out;
    fs::create_dir_all(run.join("checkpoints")).with_context(|| format!("creating {}", run.display()))?;
    fs::create_dir_all(run.join("reports")).with_context(|| format!("creating {}", run.display()))?;
    write(&run.join(CONFIG_SNAPSHOT), &cfg.serialize())?;
    let tcfg = cfg.train_config();
    write(
        &run.join(META),
        &format!("regime={}\nseed={}\nembed_dim={}\n", tcfg.regime, tcfg.seed, cfg.encoder.embed_dim),
    )?;

    if tcfg.regime == Regime::Supervised {
        let (params, log) = train_supervised_baseline(&data, &cfg.encoder, &tcfg)?;
        params.save(&run.join("checkpoints").join(FINAL_CHECKPOINT))?;
        write(&run.join(RUNLOG), &log.to_csv(true))?;
        println!("trained {} steps ({})", log.steps.len(), tcfg.regime);
        return Ok(());
    }

    let (params, start) = match latest_epoch(run).filter(|_| resume) {
        Some(e) => (ParamStore::load(&epoch_checkpoint(run, e))?, e),
        None => (init_params(&cfg.encoder, tcfg.seed)?, 0),
    };
    // Keep the log lines of the epochs already done.
    let mut csv = String::from(xmodal::train::RUNLOG_HEADER);
    csv.push('\n');
    if start > 0 {
        let previous = fs::read_to_string(run.join(RUNLOG)).unwrap_or_default();
        let limit = start * tcfg.steps_per_epoch;
        for line in previous.lines().skip(1) {
            match line.split(',').next().and_then(|s| s.parse::<usize>().ok()) {
                Some(step) if step < limit => {
                    csv.push_str(line);
                    csv.push('\n');
                }
                _ => {}
            }
        }
    }
    if start == 0 {
        params.save(&epoch_checkpoint(run, 0))?;
    }
    let base = csv.clone();
    let (params, log) = train_from(&data, &cfg.encoder, &tcfg, params, start, None, |epoch, p, log| {
        p.save(&epoch_checkpoint(run, epoch))?;
        fs::write(run.join(RUNLOG), format!("{base}{}", log.to_csv(false)))?;
        Ok(())
    })?;
    params.save(&run.join("checkpoints").join(FINAL_CHECKPOINT))?;
    write(&run.join(RUNLOG), &format!("{base}{}", log.to_csv(false)))?;
    let last = log.steps.last().map(|s| s.loss_total);
    println!(
        "trained epochs {start}..{} ({}), final loss {}",
        tcfg.epochs,
        tcfg.regime,
        last.map(|l| l.to_string()).unwrap_or_else(|| "-".into())
    );
    Ok(())
}

fn load_final(run: &Path) -> std::result::Result<ParamStore, Failure> {
    let path = run.join("checkpoints").join(FINAL_CHECKPOINT);
    if !path.exists() {
        return Err(usage(format!("missing checkpoint {}", path.display())));
    }
    Ok(ParamStore::load(&path).with_context(|| format!("reading {}", path.display()))?)
}

fn cmd_eval(c: &Common) -> CmdResult {
    let cfg = load_config(c)?;
    let params = load_final(&c.out)?;
    let heldout = load_dataset(&require(&cfg.heldout_data, "data.heldout")?)?;
    let train_speakers = match &cfg.train_data {
        Some(p) if p.exists() => Some(load_dataset(p)?.speakers()),
        _ => None,
    };
    let regime = Some(cfg.train.regime);
    let reports = report::evaluate_run(
        &params,
        &cfg.encoder,
        &heldout,
        &cfg.eval,
        &cfg.trials,
        regime,
        train_speakers.as_ref(),
    )?;
    fs::create_dir_all(c.out.join("reports")).context("creating reports directory")?;
    for mut r in reports {
        r.run = Some(cfg.name.clone());
        let kind = r.embedding.map(|k| k.as_str()).unwrap_or("identity");
        write(&c.out.join("reports").join(format!("eval_{kind}.txt")), &r.to_text())?;
        print!("{}", r.to_text());
    }
    Ok(())
}

fn cmd_probe(c: &Common, labeled: Option<usize>) -> CmdResult {
    let cfg = load_config(c)?;
    let params = load_final(&c.out)?;
    let train = load_dataset(&require(&cfg.train_data, "data.train")?)?;
    let heldout = load_dataset(&require(&cfg.heldout_data, "data.heldout")?)?;
    let sizes = labeled.map(|k| vec![k]).unwrap_or_else(|| cfg.probe_sweep.clone());
    let supervised = cfg.supervised_config();
    fs::create_dir_all(c.out.join("reports")).context("creating reports directory")?;
    for k in sizes {
        let point = report::label_sweep_point(
            &params,
            &cfg.encoder,
            &train,
            &heldout,
            k,
            &cfg.probe,
            &supervised,
            &cfg.trials,
        )?;
        write(&c.out.join("reports").join(format!("probe_{k}.txt")), &point.probe.to_text())?;
        write(&c.out.join("reports").join(format!("supervised_{k}.txt")), &point.supervised.to_text())?;
        println!(
            "labeled={k} probe_eer={} supervised_eer={}",
            point.probe.eer.unwrap_or(f64::NAN),
            point.supervised.eer.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn read_report(path: &Path) -> std::result::Result<Option<MetricsReport>, Failure> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(MetricsReport::parse(&text)?))
}

fn cmd_compare(out: &Path, runs: &[PathBuf]) -> CmdResult {
    let mut dims = Vec::new();
    let mut grid = Vec::new();
    let mut sweep = Vec::new();
    for run in runs {
        let snapshot = run.join(CONFIG_SNAPSHOT);
        let text = fs::read_to_string(&snapshot).map_err(|e| usage(format!("{}: {e}", snapshot.display())))?;
        let cfg = RunConfig::parse(&text)?;
        let name = run.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| cfg.name.clone());
        dims.push((name.clone(), cfg.encoder.embed_dim));
        let reports = run.join("reports");
        let mut found = false;
        for kind in ["identity", "content"] {
            if let Some(r) = read_report(&reports.join(format!("eval_{kind}.txt")))? {
                grid.push((name.clone(), r));
                found = true;
            }
        }
        if !found {
            return Err(usage(format!("{} has no evaluation reports; run `xmodal eval` first", run.display())));
        }
        for k in &cfg.probe_sweep {
            let probe = read_report(&reports.join(format!("probe_{k}.txt")))?;
            let sup = read_report(&reports.join(format!("supervised_{k}.txt")))?;
            if let (Some(probe), Some(supervised)) = (probe, sup) {
                sweep.push((name.clone(), SweepPoint { labeled_speakers: *k, probe, supervised }));
            }
        }
    }
    report::check_embed_dims(&dims)?;
    let mut text = report::comparison_grid(&grid);
    if !sweep.is_empty() {
        text.push('\n');
        text.push_str(&report::sweep_table(&sweep));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("compare.txt"), &text)?;
    print!("{text}");
    Ok(())
}
