//! `percdf` command line: data generation, training, forecasting, evaluation,
//! memory-scaling sweeps and plots.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use percdf::config::RunConfig;
use percdf::copula::{ForecastSamples, SampleOptions};
use percdf::data::{forecast_beyond, load_csv, make_forecast_task, random_walk, sinusoid, CsvSchema, SeriesFrame, WindowTask};
use percdf::guard::{write_guard_csv, GuardConfig};
use percdf::memscale::{fit_slope, run_scaling, write_scaling_csv, ScalingConfig, SweepAxis, VariantSpec};
use percdf::metrics::{eval_nll, truth_for, EvalReport, EventRule};
use percdf::model::Model;
use percdf::params::ParamStore;
use percdf::plot::forecast_svg;
use percdf::scheduler::PermutationMode;
use percdf::training::{train, write_loss_log, Checkpoint, RngState, TrainState};

#[derive(Parser)]
#[command(name = "percdf", version, about = "Probabilistic multivariate time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    RandomWalk,
    Sinusoid,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic long-format series CSV.
    Generate {
        #[arg(long)]
        vars: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probability that a point is left empty.
        #[arg(long, default_value_t = 0.0)]
        missing: f64,
        #[arg(long, value_enum, default_value = "random-walk")]
        kind: Kind,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// key = value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Preset used when no config file is given.
        #[arg(long, default_value = "table4")]
        preset: String,
        /// Extra settings, e.g. `--set train.batch_size=4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Resume from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-batch loss CSV.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Sample forecasts from a checkpoint.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Forecast the last S steps of the data instead of the S steps after it.
        #[arg(long)]
        holdout: bool,
        #[arg(long)]
        no_guard: bool,
        #[arg(long)]
        guard_log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score forecast samples against ground truth.
    Evaluate {
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Event rules such as `spike=0>700`, comma separated.
        #[arg(long, value_delimiter = ',')]
        rules: Vec<String>,
        /// With a checkpoint the held-out likelihood is reported too.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep horizon or context length and record memory ledgers.
    Memscale {
        #[arg(long, default_value = "table3")]
        preset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// pred or cond.
        #[arg(long, default_value = "pred")]
        axis: String,
        #[arg(long, value_delimiter = ',', default_value = "10,20,40,80,160")]
        sweep: Vec<usize>,
        /// Variant names or `all`.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        variants: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render forecast samples as SVG.
    Plot {
        #[arg(long)]
        forecast: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain() {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&c);
                }
            }
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Generate {
            vars,
            steps,
            seed,
            missing,
            kind,
            out,
        } => {
            let frame = match kind {
                Kind::RandomWalk => random_walk(vars, steps, seed, missing)?,
                Kind::Sinusoid => sinusoid(vars, steps, 24.0, 0.1, seed)?,
            };
            match out {
                Some(p) => frame.write_csv(&p)?,
                None => frame.write_csv_to(std::io::stdout().lock())?,
            }
            Ok(())
        }
        Cmd::Train {
            data,
            config,
            preset,
            sets,
            epochs,
            resume,
            out,
            loss_log,
        } => cmd_train(&data, config.as_deref(), &preset, &sets, epochs, resume.as_deref(), &out, loss_log.as_deref()),
        Cmd::Forecast {
            checkpoint,
            data,
            draws,
            seed,
            holdout,
            no_guard,
            guard_log,
            out,
        } => cmd_forecast(&checkpoint, &data, draws, seed, holdout, no_guard, guard_log.as_deref(), &out),
        Cmd::Evaluate {
            forecast,
            truth,
            rules,
            checkpoint,
            out,
        } => cmd_evaluate(&forecast, &truth, &rules, checkpoint.as_deref(), out.as_deref()),
        Cmd::Memscale {
            preset,
            config,
            axis,
            sweep,
            variants,
            out,
        } => cmd_memscale(&preset, config.as_deref(), &axis, &sweep, &variants, &out),
        Cmd::Plot { forecast, truth, out } => {
            let samples = ForecastSamples::read_csv(&forecast)?;
            let truth = truth.map(|p| load_data(&p)).transpose()?;
            let svg = forecast_svg(&samples, truth.as_ref())?;
            std::fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
            Ok(())
        }
    }
}

fn load_data(path: &Path) -> Result<SeriesFrame> {
    Ok(load_csv(path, &CsvSchema::default())?)
}

/// `PERCDF_SEED` overrides the configured seed.
fn env_seed() -> Result<Option<u64>> {
    match std::env::var("PERCDF_SEED") {
        Ok(s) => Ok(Some(s.trim().parse().map_err(|_| anyhow!("PERCDF_SEED {s:?} is not an integer"))?)),
        Err(_) => Ok(None),
    }
}

fn load_config(config: Option<&Path>, preset: &str, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(preset)?,
    };
    let mut bad = Vec::new();
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            bad.push(format!("--set {s:?}: expected KEY=VALUE"));
            continue;
        };
        if let Err(e) = cfg.set(k.trim(), v.trim()) {
            bad.push(e);
        }
    }
    if !bad.is_empty() {
        bail!("{}", bad.join("; "));
    }
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Rebuilds the model and parameters stored in a checkpoint.
fn restore(ck: &Checkpoint) -> Result<(RunConfig, Model, ParamStore)> {
    let cfg = RunConfig::parse(&ck.config).context("checkpoint configuration")?;
    let (model, mut store) = Model::new(&cfg.model(), ck.n_variables, cfg.seed)?;
    ck.restore_into(&mut store)?;
    Ok((cfg, model, store))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    preset: &str,
    sets: &[String],
    epochs: Option<usize>,
    resume: Option<&Path>,
    out: &Path,
    loss_log: Option<&Path>,
) -> Result<()> {
    let frame = load_data(data)?;
    let (cfg, model, mut state) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let (cfg, model, store) = restore(&ck)?;
            if ck.n_variables != frame.n_variables {
                bail!("checkpoint has {} variables, data has {}", ck.n_variables, frame.n_variables);
            }
            let state = TrainState {
                store,
                optimizer: ck.optimizer.clone(),
                epoch: ck.epoch,
                rng: ck.rng.restore(),
            };
            (cfg, model, state)
        }
        None => {
            let cfg = load_config(config, preset, sets)?;
            let (model, store) = Model::new(&cfg.model(), frame.n_variables, cfg.seed)?;
            let state = TrainState::new(store, cfg.seed);
            (cfg, model, state)
        }
    };
    let mut tc = cfg.train_config();
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    let window = WindowTask::new(cfg.observed_steps, cfg.predict_steps)?;
    let report = train(&model, &mut state, &frame, &window, &tc, |epoch, mean| {
        eprintln!("epoch {epoch:>4}  nll {mean:.6}");
    })?;
    let ck = Checkpoint {
        config: cfg.to_text(),
        n_variables: frame.n_variables,
        epoch: state.epoch,
        rng: RngState::capture(&state.rng),
        params: state.store.clone(),
        optimizer: state.optimizer.clone(),
    };
    ck.save(out)?;
    if let Some(p) = loss_log {
        write_loss_log(&report.log, p)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_forecast(
    checkpoint: &Path,
    data: &Path,
    draws: Option<usize>,
    seed: Option<u64>,
    holdout: bool,
    no_guard: bool,
    guard_log: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (cfg, model, store) = restore(&ck)?;
    let frame = load_data(data)?;
    if frame.n_variables != ck.n_variables {
        bail!("checkpoint has {} variables, data has {}", ck.n_variables, frame.n_variables);
    }
    let window = WindowTask::new(cfg.observed_steps, cfg.predict_steps)?;
    let task = if holdout {
        make_forecast_task(&frame, &window)?
    } else {
        forecast_beyond(&frame, &window)?
    };
    let seed = seed.or(env_seed()?).unwrap_or(cfg.seed);
    let plan = forecast_plan(&model, &task, seed)?;
    let guard = if no_guard { GuardConfig::disabled() } else { cfg.guard };
    let opts = SampleOptions::new(draws.unwrap_or(cfg.draws), seed, guard);
    let output = model.sample(&store, &task, &plan, &opts)?;
    output.samples.write_csv(out)?;
    if let Some(p) = guard_log {
        write_guard_csv(&output.guard_log, p)?;
    }
    let masked = output.guard_log.iter().filter(|r| r.masked).count();
    if masked > 0 {
        eprintln!("variance guard masked {masked} point draws");
    }
    Ok(())
}

/// Long horizons get the bounded-interval midpoint order unless the
/// configuration asks for something else.
fn forecast_plan(model: &Model, task: &SeriesFrame, seed: u64) -> Result<percdf::scheduler::PermutationPlan> {
    let horizon = task.n_steps - task.points.iter().filter(|p| p.mask).map(|p| p.timestamp + 1).max().unwrap_or(0);
    let mode = match model.cfg.scheduler.mode {
        PermutationMode::Midpoint => PermutationMode::default_for_horizon(horizon),
        m => m,
    };
    Ok(percdf::scheduler::build_permutation(task, mode, model.cfg.scheduler.window, seed)?)
}

fn cmd_evaluate(
    forecast: &Path,
    truth: &Path,
    rules: &[String],
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let samples = ForecastSamples::read_csv(forecast)?;
    let frame = load_data(truth)?;
    let y = truth_for(&samples, &frame)?;
    let rules = rules
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| EventRule::parse(r))
        .collect::<percdf::Result<Vec<_>>>()?;
    let nll = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let (cfg, model, store) = restore(&ck)?;
            let window = WindowTask::new(cfg.observed_steps, cfg.predict_steps)?;
            let task = make_forecast_task(&frame, &window)?;
            let plan = forecast_plan(&model, &task, cfg.seed)?;
            Some(eval_nll(&model, &store, &task, &plan)?)
        }
        None => None,
    };
    let report = EvalReport::compute(&samples, &y, &rules, nll)?;
    print!("{}", report.to_text());
    if let Some(p) = out {
        report.write_csv(p)?;
    }
    Ok(())
}

fn cmd_memscale(
    preset: &str,
    config: Option<&Path>,
    axis: &str,
    sweep: &[usize],
    variants: &[String],
    out: &Path,
) -> Result<()> {
    let cfg = load_config(config, preset, &[])?;
    let axis = SweepAxis::parse(axis)?;
    let variants: Vec<VariantSpec> = if variants.iter().any(|v| v == "all") {
        VariantSpec::all().to_vec()
    } else {
        variants.iter().map(|v| VariantSpec::parse(v)).collect::<percdf::Result<_>>()?
    };
    let mut model = cfg.model();
    model.encoder = percdf::model::EncoderConfig::Perceiver(cfg.perceiver.clone());
    let mut sc = ScalingConfig::new(model, cfg.global.clone());
    sc.seed = cfg.seed;
    let rows = run_scaling(&sc, axis, sweep, &variants)?;
    write_scaling_csv(&rows, out)?;
    if sweep.len() >= 4 {
        for v in &variants {
            println!("{:<16}{:>10.3}", v.name, fit_slope(&rows, v.name, axis)?);
        }
    }
    Ok(())
}
