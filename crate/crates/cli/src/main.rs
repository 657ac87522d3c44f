use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use cosignal::config::RunConfig;
use cosignal::eval::{self, ControllerKind, SweepAxis};
use cosignal::net::{build_grid, NetworkSpec};
use cosignal::sim::write_metrics_csv;
use cosignal::train::{CurveRow, JointPolicy, TrainEvent, Trainer};

mod plot;

#[derive(Parser)]
#[command(name = "cosignal", version, about = "Coordinated platoon and signal control: train, evaluate, sweep, plot")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set sim.demand.cav_rate=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train SA and PA policies with alternating optimization.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Parallel rollout environments.
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory (overrides `output_dir`).
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Evaluate a controller and write a metrics CSV.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// jointsp, backpressure, fixed or sa-only.
        #[arg(long)]
        controller: String,
        /// Checkpoint for jointsp and sa-only.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Output CSV (default `<output_dir>/eval_<controller>.csv`).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Evaluate a controller across demand multipliers or CAV rates.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        controller: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// demand_multiplier or cav_rate.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Render training-curve and sweep CSVs as SVG figures.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Directory for the figures (default: next to each CSV).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Check a network file, or a generated grid, and print a summary.
    ValidateNet {
        file: Option<PathBuf>,
        /// Generate a ROWSxCOLS grid instead of reading a file.
        #[arg(long, value_name = "ROWSxCOLS")]
        grid: Option<String>,
        #[arg(long, default_value_t = 2)]
        lanes: usize,
        #[arg(long, default_value_t = 300.0)]
        link_length: f64,
        /// Save the validated network to this file.
        #[arg(long)]
        write: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes 2 and 3.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<cosignal::Error> for Failure {
    fn from(e: cosignal::Error) -> Self {
        use cosignal::Error as E;
        match e {
            E::InvalidArgument(_)
            | E::Parse { .. }
            | E::Validation { .. }
            | E::Config(_)
            | E::CheckpointMismatch(_) => Failure::Config(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<cosignal::Error>() {
            Ok(inner) => inner.into(),
            Err(e) => Failure::Runtime(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    RunConfig::load(args.config.as_deref(), &args.overrides).map_err(|e| match e {
        cosignal::Error::Io { .. } => Failure::Config(e.into()),
        other => other.into(),
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train { config, workers, output } => {
            let mut cfg = load_config(&config)?;
            if let Some(w) = workers {
                cfg.train.workers = w;
            }
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            cfg.validate()?;
            train(&cfg)
        }
        Command::Eval { config, controller, checkpoint, episodes, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            cfg.validate()?;
            let kind: ControllerKind = controller.parse()?;
            let (net, policy) = setup(&cfg, kind, checkpoint.as_deref())?;
            let episodes = eval::evaluate(&net, &cfg, kind, policy.as_ref())?;
            let rows = eval::metrics_rows(kind, cfg.seed, &episodes);
            let path = out.unwrap_or_else(|| cfg.output_dir.join(format!("eval_{}.csv", kind.as_str())));
            let mut header = cfg.header_lines(cfg.seed);
            header.push(format!("controller={} checkpoint={}", kind.as_str(), checkpoint_name(checkpoint.as_deref())));
            write_metrics_csv(create(&path)?, &header, &rows)?;
            let s = rows.last().expect("summary row");
            println!(
                "{}: {} episodes, mean travel time {:.2} s, mean fuel {:.2} g, {} vehicles -> {}",
                kind.as_str(),
                episodes.len(),
                s.mean_travel_time_s,
                s.mean_fuel_g,
                s.vehicles_completed,
                path.display()
            );
            Ok(())
        }
        Command::Sweep { config, controller, checkpoint, axis, values, episodes, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            cfg.validate()?;
            let kind: ControllerKind = controller.parse()?;
            let axis: SweepAxis = axis.parse()?;
            let (net, policy) = setup(&cfg, kind, checkpoint.as_deref())?;
            let rows = eval::sweep(&net, &cfg, kind, policy.as_ref(), axis, &values)?;
            let path =
                out.unwrap_or_else(|| cfg.output_dir.join(format!("sweep_{}_{}.csv", axis.as_str(), kind.as_str())));
            let mut header = cfg.header_lines(cfg.seed);
            header.push(format!("controller={} checkpoint={}", kind.as_str(), checkpoint_name(checkpoint.as_deref())));
            eval::write_sweep_csv(create(&path)?, &header, &rows)?;
            for r in &rows {
                println!(
                    "{}={}: median travel time {:.2} s, fuel {:.2} g, {} formations",
                    r.axis, r.value, r.median_travel_time_s, r.mean_fuel_g, r.formations
                );
            }
            println!("-> {}", path.display());
            Ok(())
        }
        Command::Plot { csv, out } => {
            for path in &csv {
                let written = plot::plot_csv(path, out.as_deref())?;
                for w in written {
                    println!("{}", w.display());
                }
            }
            Ok(())
        }
        Command::ValidateNet { file, grid, lanes, link_length, write } => {
            let net = match (file, grid) {
                (Some(f), None) => NetworkSpec::load(&f)?,
                (None, Some(g)) => {
                    let (r, c) = g
                        .split_once('x')
                        .and_then(|(r, c)| Some((r.parse().ok()?, c.parse().ok()?)))
                        .ok_or_else(|| Failure::Config(anyhow!("--grid expects ROWSxCOLS, got {g:?}")))?;
                    build_grid(r, c, link_length, lanes)?
                }
                _ => return Err(Failure::Config(anyhow!("give either a network file or --grid"))),
            };
            net.validate()?;
            println!(
                "ok: {} intersections, {} links, {} lanes, {} entries, {} exits, max {} phases, hash {}",
                net.intersections.len(),
                net.links.len(),
                net.lanes.len(),
                net.entry_links.len(),
                net.exit_links.len(),
                net.max_phases(),
                net.content_hash()
            );
            if let Some(path) = write {
                net.save(&path)?;
                println!("-> {}", path.display());
            }
            Ok(())
        }
    }
}

fn checkpoint_name(path: Option<&Path>) -> String {
    path.and_then(Path::file_name).map_or_else(|| "none".into(), |n| n.to_string_lossy().into_owned())
}

fn setup(cfg: &RunConfig, kind: ControllerKind, checkpoint: Option<&Path>) -> CliResult<(Arc<NetworkSpec>, Option<JointPolicy>)> {
    let net = cfg.network.build()?;
    net.validate()?;
    let policy = match (kind.needs_checkpoint(), checkpoint) {
        (true, Some(path)) => Some(eval::load_policy(path, &net, cfg)?),
        (true, None) => return Err(Failure::Config(anyhow!("controller {} needs --checkpoint", kind.as_str()))),
        (false, _) => None,
    };
    Ok((Arc::new(net), policy))
}

fn train(cfg: &RunConfig) -> CliResult<()> {
    let net = cfg.network.build()?;
    net.validate()?;
    let network_hash = net.content_hash();
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
    let mut trainer = Trainer::new(Arc::new(net), &cfg.sim, &cfg.agents, &cfg.model, &cfg.train)?;
    let config_hash = cfg.hash();
    let curve_path = dir.join("training_curve.csv");
    let mut curve_out = create(&curve_path)?;
    for line in cfg.header_lines(cfg.seed) {
        writeln!(curve_out, "# {line}").context("writing training curve")?;
    }
    let mut curve = csv::Writer::from_writer(curve_out);
    info!("training into {} (config {})", dir.display(), &config_hash[..12]);
    trainer.run(|event| {
        match event {
            TrainEvent::Iteration(row) => {
                write_row(&mut curve, row)?;
            }
            TrainEvent::CycleEnd { cycle, policy } => {
                let meta = serde_json::json!({ "cycle": cycle, "seed": cfg.seed });
                let ckpt = policy.checkpoint(&network_hash, &config_hash, meta);
                ckpt.save(dir.join(format!("checkpoint_cycle{cycle}.json")))?;
                ckpt.save(dir.join("checkpoint.json"))?;
                info!("cycle {cycle} done; checkpoint saved");
            }
        }
        Ok(())
    })?;
    println!("training finished -> {}", dir.display());
    Ok(())
}

fn write_row<W: Write>(w: &mut csv::Writer<W>, row: &CurveRow) -> cosignal::Result<()> {
    w.serialize(row).map_err(|e| cosignal::Error::Config(format!("training curve: {e}")))?;
    w.flush().map_err(|e| cosignal::Error::Io { path: "training_curve.csv".into(), source: e })
}
