//! `racbf` command-line driver.
//!
//! Exit codes: 0 on success, 1 when a computation or output write fails,
//! 2 for bad usage, configuration, or unreadable inputs.

mod config;
mod output;
mod plot;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use racbf::filter::FilterMode;
use racbf::forensics::{analyze, attribute, differentiate, read_log_csv, read_trajectory_csv, write_series_csv, write_summary_csv, ForensicReport};
use racbf::learning::{
    generate_synthetic_dataset, heading_filter, read_dataset_csv, split_by_scenario, train, training_pairs, validation_violation_rate,
    write_audit_csv, write_dataset_csv, write_training_log_csv,
};
use racbf::responsibility::{read_model, write_model, GammaModel, Responsibility};
use racbf::sim::{build_suite, compute_metrics, fmt_f, run_suite, write_trajectory_csv, ScenarioKind, METRICS_HEADER};

use config::{parse_suite, CliConfig};
use output::Written;

#[derive(Parser)]
#[command(name = "racbf", version, about = "Responsibility-aware multi-agent safety filtering: data, training, simulation, forensics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config file; missing keys take library defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (generation, split, training and suite seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Filter mode: restricts `simulate` to one mode; selects the allocation `analyze` uses.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Also write an SVG of per-agent margins, allocations and inputs (`analyze`).
    #[arg(long, global = true)]
    plot: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations under the ground-truth allocation.
    GenData,
    /// Fit the allocation network to a demonstration dataset.
    Train {
        /// Dataset CSV (default: OUT/dataset.csv).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the closed-loop suite in each filter mode and score it.
    Simulate {
        /// Trained model (default: OUT/model.bin); required for the learned mode.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Held-out demonstrations for the validation violation rate
        /// (default: OUT/validation.csv when present).
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Forensic analysis of a recorded trajectory.
    Analyze {
        /// Trajectory CSV with t, agent_id, x, y, theta columns.
        #[arg(long)]
        trajectory: PathBuf,
        /// Trained model; required unless --mode even.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Select one scenario from a multi-scenario file.
        #[arg(long)]
        scenario: Option<String>,
        /// Recover speeds and inputs from positions even when the file logs them.
        #[arg(long)]
        differentiate: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Worst,
    Even,
    Learned,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult<T> = Result<T, Failure>;

trait UsageExt<T> {
    fn usage(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> UsageExt<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn init_threads() -> CmdResult<()> {
    if let Ok(v) = std::env::var("RACBF_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::Usage(anyhow!("RACBF_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult<()> {
    init_threads()?;
    let mut cfg = CliConfig::load(cli.config.as_deref()).usage()?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    match &cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Train { data } => cmd_train(&cfg, data.as_deref()),
        Command::Simulate { model, validation } => simulate(&cfg, cli.mode, model.as_deref(), validation.as_deref()),
        Command::Analyze { trajectory, model, scenario, differentiate } => {
            cmd_analyze(&cfg, cli.mode, trajectory, model.as_deref(), scenario.as_deref(), *differentiate, cli.plot)
        }
    }
}

fn open_input(path: &Path, what: &str) -> CmdResult<std::io::BufReader<std::fs::File>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {what} {}", path.display())).usage()?;
    Ok(std::io::BufReader::new(f))
}

fn load_model(path: &Path) -> CmdResult<GammaModel> {
    read_model(open_input(path, "model file")?).with_context(|| format!("loading model {}", path.display())).usage()
}

fn report(written: &Written) {
    for p in &written.0 {
        println!("wrote {}", p.display());
    }
}

fn gen_data(cfg: &CliConfig) -> CmdResult<()> {
    let suite = cfg.data_suite().usage()?;
    let rule = cfg.ground_truth().usage()?;
    let ds = generate_synthetic_dataset(&suite, &rule, cfg.seed, &cfg.rollout()).context("generating dataset")?;
    let mut w = Written::default();
    w.write(cfg.out.join("dataset.csv"), |f| Ok(write_dataset_csv(&ds.demonstrations, f)?))?;
    w.write(cfg.out.join("audit.csv"), |f| Ok(write_audit_csv(&ds.audit, f)?))?;
    let scenarios: BTreeSet<&str> = ds.demonstrations.iter().map(|d| d.scenario_id.as_str()).collect();
    println!(
        "{} demonstrations from {} scenarios ({} redrawn); min audit margin {}",
        ds.demonstrations.len(),
        scenarios.len(),
        ds.rejected,
        fmt_f(ds.audit.iter().map(|a| a.margin).fold(f64::INFINITY, f64::min))
    );
    report(&w);
    Ok(())
}

fn cmd_train(cfg: &CliConfig, data: Option<&Path>) -> CmdResult<()> {
    let path = data.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join("dataset.csv"));
    let demos = read_dataset_csv(open_input(&path, "dataset")?).with_context(|| format!("reading {}", path.display())).usage()?;
    let pairs = training_pairs(&demos, &cfg.barrier);
    if pairs.is_empty() {
        return Err(Failure::Usage(anyhow!("dataset {} contains no multi-agent steps", path.display())));
    }
    let (train_set, held) = split_by_scenario(&pairs, cfg.data.held_out_fraction, cfg.seed);
    let out = train(&train_set, &cfg.train).context("training")?;
    let held_ids: BTreeSet<&str> = held.iter().map(|p| p.scenario_id.as_str()).collect();
    let validation: Vec<_> = demos.iter().filter(|d| held_ids.contains(d.scenario_id.as_str())).cloned().collect();

    let mut w = Written::default();
    w.write(cfg.out.join("model.bin"), |f| Ok(write_model(&out.model, f)?))?;
    w.write(cfg.out.join("training_log.csv"), |f| Ok(write_training_log_csv(&out.log, f)?))?;
    if !validation.is_empty() {
        w.write(cfg.out.join("validation.csv"), |f| Ok(write_dataset_csv(&validation, f)?))?;
    }
    let last = out.log.last().expect("at least one epoch");
    println!(
        "{} training pairs ({} after heading filter), {} held out; best epoch {} loss {}; final hinge rate {}",
        train_set.len(),
        out.pairs_used,
        held.len(),
        out.best_epoch,
        fmt_f(out.best_loss),
        fmt_f(last.hinge_rate)
    );
    report(&w);
    Ok(())
}

fn simulate(cfg: &CliConfig, mode: Option<Mode>, model_path: Option<&Path>, validation: Option<&Path>) -> CmdResult<()> {
    let modes: Vec<Mode> = mode.map_or_else(|| vec![Mode::Worst, Mode::Even, Mode::Learned], |m| vec![m]);
    let model = if modes.contains(&Mode::Learned) {
        let p = model_path.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join("model.bin"));
        Some(load_model(&p)?)
    } else {
        None
    };
    let validation_pairs = {
        let explicit = validation.map(Path::to_path_buf);
        let path = explicit.clone().unwrap_or_else(|| cfg.out.join("validation.csv"));
        if explicit.is_some() || path.exists() {
            let demos = read_dataset_csv(open_input(&path, "validation dataset")?)
                .with_context(|| format!("reading {}", path.display()))
                .usage()?;
            let pairs = heading_filter(&training_pairs(&demos, &cfg.barrier), cfg.train.theta_max);
            if pairs.is_empty() {
                return Err(Failure::Usage(anyhow!("validation dataset {} has no usable pairs", path.display())));
            }
            Some(pairs)
        } else {
            None
        }
    };
    let rollout = cfg.rollout();
    let rule = cfg.ground_truth().usage()?;
    let mut scenarios = Vec::new();
    for (kind, count) in parse_suite(&cfg.simulate.suite).usage()? {
        let k = ScenarioKind::ALL.iter().position(|x| *x == kind).expect("known kind") as u64;
        let seed = cfg.seed.wrapping_mul(7919).wrapping_add(1000 + 100 * k);
        scenarios.extend(build_suite(kind, count, &cfg.scenario, seed, &cfg.barrier).context("building suite")?);
    }

    let mut w = Written::default();
    let mut rows = Vec::new();
    for m in modes {
        let fm = match m {
            Mode::Worst => FilterMode::WorstCase,
            Mode::Even => FilterMode::EvenSplit,
            Mode::Learned => FilterMode::Learned(model.as_ref().expect("loaded above")),
        };
        let logs = run_suite(&scenarios, fm, &rule, &rollout).with_context(|| format!("simulating {} mode", fm.name()))?;
        let metrics = compute_metrics(&logs, &scenarios)?;
        let val = match &validation_pairs {
            Some(p) => fmt_f(validation_violation_rate(p, fm, &cfg.barrier, &cfg.bounds)?),
            None => String::new(),
        };
        w.write(cfg.out.join(format!("trajectories_{}.csv", fm.name())), |f| Ok(write_trajectory_csv(&logs, f)?))?;
        println!(
            "{:>7}: distance {:.2} m, safety violations {:.4}, constraint violations {:.4}, off-road {:.4}{}",
            fm.name(),
            metrics.distance_covered,
            metrics.safety_violation_rate,
            metrics.constraint_violation_rate,
            metrics.offroad_time_fraction,
            if val.is_empty() { String::new() } else { format!(", validation violations {val}") }
        );
        rows.push(vec![
            cfg.simulate.name.clone(),
            fm.name().to_string(),
            val,
            fmt_f(metrics.safety_violation_rate),
            fmt_f(metrics.offroad_time_fraction),
            fmt_f(metrics.distance_covered),
            fmt_f(metrics.constraint_violation_rate),
        ]);
    }
    w.write(cfg.out.join("metrics.csv"), |f| {
        writeln!(f, "{}", METRICS_HEADER.join(","))?;
        for r in &rows {
            writeln!(f, "{}", r.join(","))?;
        }
        Ok(())
    })?;
    report(&w);
    Ok(())
}

/// Keep only the rows of one scenario.
fn select_scenario(bytes: &[u8], id: &str) -> CmdResult<Vec<u8>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let header = rdr.headers().usage()?.clone();
    let col = header
        .iter()
        .position(|h| h.trim() == "scenario_id")
        .ok_or_else(|| Failure::Usage(anyhow!("--scenario given but the file has no scenario_id column")))?;
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(&header)?;
    let mut kept = 0;
    for rec in rdr.records() {
        let rec = rec.usage()?;
        if rec.get(col) == Some(id) {
            out.write_record(&rec)?;
            kept += 1;
        }
    }
    if kept == 0 {
        return Err(Failure::Usage(anyhow!("no rows for scenario '{id}'")));
    }
    Ok(out.into_inner().map_err(|e| anyhow!("{e}"))?)
}

fn has_columns(bytes: &[u8], cols: &[&str]) -> bool {
    let mut rdr = csv::Reader::from_reader(bytes);
    rdr.headers().is_ok_and(|h| cols.iter().all(|c| h.iter().any(|x| x.trim() == *c)))
}

/// Per-agent series at the binding pair: `(t, margin, gamma, a, omega)`.
fn binding_series(report: &ForensicReport, series: &racbf::forensics::KinematicSeries, agent: usize) -> Vec<[f64; 5]> {
    let mut out: Vec<[f64; 5]> = Vec::new();
    let mut last = usize::MAX;
    for r in report.records.iter().filter(|r| r.agent == agent) {
        let u = series.inputs[r.step][agent];
        if r.step != last {
            out.push([r.t, r.margin, r.gamma, u.a, u.omega]);
            last = r.step;
        } else {
            let e = out.last_mut().expect("pushed above");
            if r.margin < e[1] {
                e[1] = r.margin;
                e[2] = r.gamma;
            }
        }
    }
    out
}

fn cmd_analyze(
    cfg: &CliConfig,
    mode: Option<Mode>,
    trajectory: &Path,
    model_path: Option<&Path>,
    scenario: Option<&str>,
    force_diff: bool,
    plot: bool,
) -> CmdResult<()> {
    let model: Box<dyn Responsibility> = match mode.unwrap_or(Mode::Learned) {
        Mode::Learned => {
            let p = model_path.ok_or_else(|| Failure::Usage(anyhow!("analyze needs --model (or --mode even)")))?;
            Box::new(load_model(p)?)
        }
        Mode::Even => Box::new(GammaModel::Zero),
        Mode::Worst => {
            return Err(Failure::Usage(anyhow!(
                "analyze ranks allocation margins; use --mode learned or even (worst-case margins are always reported)"
            )))
        }
    };
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut open_input(trajectory, "trajectory")?, &mut bytes)
        .with_context(|| format!("reading {}", trajectory.display()))
        .usage()?;
    if let Some(id) = scenario {
        bytes = select_scenario(&bytes, id)?;
    }
    let ctx = || format!("ingesting {}", trajectory.display());
    let series = if !force_diff && has_columns(&bytes, &["v", "a", "omega"]) {
        read_log_csv(bytes.as_slice()).with_context(ctx).usage()?
    } else {
        let raw = read_trajectory_csv(bytes.as_slice()).with_context(ctx).usage()?;
        differentiate(&raw, cfg.analyze.window).with_context(ctx).usage()?
    };
    let rep = analyze(&series, model.as_ref(), &cfg.barrier, &cfg.bounds)?;
    let att = attribute(&rep);

    let mut w = Written::default();
    w.write(cfg.out.join("forensic_series.csv"), |f| Ok(write_series_csv(&rep, f)?))?;
    w.write(cfg.out.join("forensic_summary.csv"), |f| Ok(write_summary_csv(&rep, &att, f)?))?;
    if plot {
        let per: Vec<Vec<[f64; 5]>> = (0..series.agents()).map(|a| binding_series(&rep, &series, a)).collect();
        let panel = |title: &str, y: &str, k: usize, zero: bool| plot::Panel {
            title: title.into(),
            y_label: y.into(),
            zero_line: zero,
            series: per
                .iter()
                .zip(&rep.ids)
                .map(|(s, id)| plot::Series { label: format!("agent {id}"), points: s.iter().map(|p| (p[0], p[k])).collect() })
                .collect(),
        };
        let svg = plot::render(&[
            panel("Constraint margin at the binding pair", "margin [m/s]", 1, true),
            panel("Responsibility allocation", "gamma [m/s]", 2, true),
            panel("Acceleration input", "a [m/s^2]", 3, false),
            panel("Yaw-rate input", "omega [rad/s]", 4, false),
        ]);
        w.write(cfg.out.join("forensic.svg"), |f| Ok(f.write_all(svg.as_bytes())?))?;
    }
    println!("{}", att.label);
    if att.ranking.is_empty() {
        println!("no agent violated its constraint");
    }
    for (k, s) in att.ranking.iter().enumerate() {
        println!(
            "{}. agent {}: integrated violation {}, peak {}, first at t = {}",
            k + 1,
            s.id,
            fmt_f(s.integrated_violation),
            fmt_f(s.peak_violation),
            s.first_violation.map_or_else(|| "-".into(), fmt_f)
        );
    }
    report(&w);
    Ok(())
}
