//! Command-line frontend: simulate data, train the measurement model,
//! run the tracker, score results, and export density grids for plotting.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use vartrack::config::RunConfig;
use vartrack::io;
use vartrack::metrics;
use vartrack::radar::{balance_by_aspect, build_training_set, RadarModel};
use vartrack::sim::{builtin_scenario, generate_corpus, Scenario, ScenarioSpec, SimOptions};
use vartrack::tracker::run_tracker;
use vartrack::vgm::{self, FitOptions, Hyperparameters, StudentMixture};
use vartrack::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vartrack",
    version,
    about = "Radar vehicle tracking: simulation, model training, tracking, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-sensor radar corpus with ground truth
    Simulate {
        /// Built-in scenario name (figure-eight, oncoming-pair,
        /// close-parallel, empty) or path to a scenario JSON file
        #[arg(long)]
        scenario: String,
        /// Random seed; overrides the config file value
        #[arg(long)]
        seed: Option<u64>,
        /// Run configuration JSON file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output scan file (JSON lines)
        #[arg(long)]
        out_scans: PathBuf,
        /// Output ground-truth file (JSON lines)
        #[arg(long)]
        out_truth: PathBuf,
    },
    /// Fit the measurement mixture from labeled scans and ground truth
    Train {
        /// Scan file (JSON lines)
        #[arg(long)]
        scans: PathBuf,
        /// Ground-truth file (JSON lines)
        #[arg(long)]
        truth: PathBuf,
        /// Initial mixture size before pruning; overrides config (default 70)
        #[arg(long)]
        components: Option<usize>,
        /// Random seed; overrides the config file value
        #[arg(long)]
        seed: Option<u64>,
        /// Run configuration JSON file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output model file (JSON)
        #[arg(long)]
        out_model: PathBuf,
    },
    /// Track vehicles through a scan stream with a trained model
    Track {
        /// Scan file (JSON lines); processed in timestamp order
        #[arg(long)]
        scans: PathBuf,
        /// Trained model file from the train command
        #[arg(long)]
        model: PathBuf,
        /// Random seed; overrides the config file value
        #[arg(long)]
        seed: Option<u64>,
        /// Run configuration JSON file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output track file (JSON lines, one record per update)
        #[arg(long)]
        out_tracks: PathBuf,
    },
    /// Score a track file against ground truth
    Eval {
        /// Track file from the track command
        #[arg(long)]
        tracks: PathBuf,
        /// Ground-truth file (JSON lines)
        #[arg(long)]
        truth: PathBuf,
        /// Run configuration JSON file (sensor mounts)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output report file (JSON)
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Export a density grid of a trained model for external plotting
    InspectModel {
        /// Trained model file from the train command
        #[arg(long)]
        model: PathBuf,
        /// Grid slice: two axes from {zx, zy, zd, aspect}, optionally
        /// conditioned on fixed values of the others, e.g. "zx,zy" or
        /// "zx,zd@aspect=-1.5708"; unmentioned axes are integrated out
        #[arg(long)]
        slice: String,
        /// Output CSV file: one "<ax>,<ay>,density" row per grid point
        #[arg(long)]
        out_grid: PathBuf,
        /// Grid points per axis (default 61)
        #[arg(long, default_value_t = 61)]
        steps: usize,
        /// First-axis range as "lo,hi" (default per axis)
        #[arg(long)]
        xlim: Option<String>,
        /// Second-axis range as "lo,hi" (default per axis)
        #[arg(long)]
        ylim: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn resolve_scenario(arg: &str) -> Result<Scenario> {
    if let Some(s) = builtin_scenario(arg) {
        return Ok(s);
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(Error::Format(format!(
            "unknown scenario '{arg}': not a built-in (figure-eight, \
             oncoming-pair, close-parallel, empty) and no such file"
        )));
    }
    let text = std::fs::read_to_string(path)?;
    let spec: ScenarioSpec = serde_json::from_str(&text)?;
    spec.build()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { scenario, seed, config, out_scans, out_truth } => {
            let cfg = load_config(&config)?;
            let scenario = resolve_scenario(&scenario)?;
            let opts = SimOptions {
                noise: cfg.sim.noise,
                profile: cfg.filter.profile,
                lambda_t: cfg.sim.lambda_t,
                lambda_c: cfg.sim.lambda_c,
                ..SimOptions::default()
            };
            let mut rng = ChaCha12Rng::seed_from_u64(seed.unwrap_or(cfg.seed));
            let (scans, truths) = generate_corpus(&scenario, &opts, &mut rng);
            io::write_scans(&out_scans, &scans)?;
            io::write_truths(&out_truth, &truths)?;
            log::info!("wrote {} scans, {} truth frames", scans.len(), truths.len());
            Ok(())
        }
        Command::Train { scans, truth, components, seed, config, out_model } => {
            let cfg = load_config(&config)?;
            let scans = io::read_scans(&scans)?;
            let truths = io::read_truths(&truth)?;
            let seed = seed.unwrap_or(cfg.seed);
            let points =
                build_training_set(&scans, &truths, &cfg.mounts, cfg.train.gate_margin)?;
            let points = balance_by_aspect(&points, cfg.train.balance_bin_width, seed);
            let data: Vec<_> = points.into_iter().map(|p| p.to_vector()).collect();
            let mut hp =
                Hyperparameters::from_data(components.unwrap_or(cfg.train.components), &data)?;
            hp.rho0 = cfg.train.rho0;
            let opts = FitOptions {
                max_iters: cfg.train.max_iters,
                elbo_tol: cfg.train.tol,
                seed,
            };
            let (model, _, _) = vgm::fit(&data, &hp, &opts)?;
            let model = model.prune(cfg.train.prune_threshold)?;
            io::write_model(&out_model, &model)?;
            println!("components: {}", model.normalized_weights().len());
            Ok(())
        }
        Command::Track { scans, model, seed, config, out_tracks } => {
            let cfg = load_config(&config)?;
            let mut scans = io::read_scans(&scans)?;
            io::sort_scans(&mut scans);
            let vgm_model = io::read_model(&model)?;
            let model = RadarModel::from_vgm(&vgm_model, cfg.filter.lambda_t)?;
            let records = run_tracker(
                &scans,
                &model,
                cfg.filter.clone(),
                cfg.mounts.clone(),
                seed.unwrap_or(cfg.seed),
            )?;
            io::write_tracks(&out_tracks, &records)?;
            log::info!("wrote {} track records", records.len());
            Ok(())
        }
        Command::Eval { tracks, truth, config, out_report } => {
            let cfg = load_config(&config)?;
            let records = io::read_tracks(&tracks)?;
            let truths = io::read_truths(&truth)?;
            let report = metrics::evaluate(&records, &truths, &cfg.mounts)?;
            let mut text = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Format(e.to_string()))?;
            text.push('\n');
            std::fs::write(&out_report, text)?;
            Ok(())
        }
        Command::InspectModel { model, slice, out_grid, steps, xlim, ylim } => {
            let vgm_model = io::read_model(&model)?;
            let mixture = vgm_model.predictive()?;
            let csv = slice_grid(&mixture, &slice, steps, xlim.as_deref(), ylim.as_deref())?;
            std::fs::write(&out_grid, csv)?;
            Ok(())
        }
    }
}

/// Axis names of the 4D model representation, in storage order.
const AXES: [&str; 4] = ["zx", "zy", "zd", "aspect"];

fn axis_index(name: &str) -> Result<usize> {
    AXES.iter()
        .position(|&a| a == name)
        .ok_or_else(|| Error::Format(format!("unknown axis '{name}', expected one of {AXES:?}")))
}

fn default_limits(dim: usize) -> (f64, f64) {
    match dim {
        2 => (-8.0, 8.0),
        3 => (-std::f64::consts::PI, std::f64::consts::PI),
        _ => (-1.5, 1.5),
    }
}

fn parse_limits(arg: Option<&str>, dim: usize) -> Result<(f64, f64)> {
    let Some(arg) = arg else { return Ok(default_limits(dim)) };
    let parts: Vec<&str> = arg.split(',').collect();
    let parsed = if parts.len() == 2 {
        parts[0].trim().parse::<f64>().ok().zip(parts[1].trim().parse::<f64>().ok())
    } else {
        None
    };
    match parsed {
        Some((lo, hi)) if lo.is_finite() && hi.is_finite() && lo < hi => Ok((lo, hi)),
        _ => Err(Error::Format(format!("range must be 'lo,hi' with lo < hi, got '{arg}'"))),
    }
}

/// Parse a slice specification into grid axes and conditioning values.
fn parse_slice(spec: &str) -> Result<((usize, usize), Vec<(usize, f64)>)> {
    let (axes_part, cond_part) = match spec.split_once('@') {
        Some((a, c)) => (a, Some(c)),
        None => (spec, None),
    };
    let names: Vec<&str> = axes_part.split(',').map(str::trim).collect();
    if names.len() != 2 {
        return Err(Error::Format(format!(
            "slice needs exactly two grid axes, got '{axes_part}'"
        )));
    }
    let ax = axis_index(names[0])?;
    let ay = axis_index(names[1])?;
    if ax == ay {
        return Err(Error::Format(format!("grid axes must differ, got '{axes_part}'")));
    }
    let mut conds: Vec<(usize, f64)> = Vec::new();
    if let Some(cond) = cond_part {
        for clause in cond.split(',') {
            let Some((name, value)) = clause.split_once('=') else {
                return Err(Error::Format(format!(
                    "conditioning clause must be 'axis=value', got '{clause}'"
                )));
            };
            let dim = axis_index(name.trim())?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad conditioning value '{value}'")))?;
            if dim == ax || dim == ay {
                return Err(Error::Format(format!(
                    "axis '{}' cannot be both a grid axis and conditioned on",
                    AXES[dim]
                )));
            }
            if conds.iter().any(|&(d, _)| d == dim) {
                return Err(Error::Format(format!("axis '{}' conditioned twice", AXES[dim])));
            }
            conds.push((dim, value));
        }
    }
    Ok(((ax, ay), conds))
}

/// Evaluate the model density over a 2D grid slice: condition on the
/// fixed axes, integrate out the rest, tabulate the remaining two.
fn slice_grid(
    mixture: &StudentMixture,
    spec: &str,
    steps: usize,
    xlim: Option<&str>,
    ylim: Option<&str>,
) -> Result<String> {
    if steps < 2 {
        return Err(Error::Format(format!("steps must be at least 2, got {steps}")));
    }
    let ((ax, ay), conds) = parse_slice(spec)?;
    let reduced = if conds.is_empty() {
        mixture.clone()
    } else {
        let dims: Vec<usize> = conds.iter().map(|&(d, _)| d).collect();
        let values: Vec<f64> = conds.iter().map(|&(_, v)| v).collect();
        mixture.condition(&dims, &values)?
    };
    // dims surviving the conditioning keep their original relative order
    let free: Vec<usize> =
        (0..mixture.dim()).filter(|d| !conds.iter().any(|&(c, _)| c == *d)).collect();
    let pos = |dim: usize| free.iter().position(|&d| d == dim).unwrap();
    let grid2d = reduced.marginalize(&[pos(ax), pos(ay)])?;

    let (x_lo, x_hi) = parse_limits(xlim, ax)?;
    let (y_lo, y_hi) = parse_limits(ylim, ay)?;
    let mut out = String::new();
    out.push_str(&format!("{},{},density\n", AXES[ax], AXES[ay]));
    let point = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (steps - 1) as f64;
    for i in 0..steps {
        let x = point(x_lo, x_hi, i);
        for j in 0..steps {
            let y = point(y_lo, y_hi, j);
            let p = grid2d.density(&nalgebra::DVector::from_vec(vec![x, y]));
            out.push_str(&format!("{x},{y},{p}\n"));
        }
    }
    Ok(out)
}
