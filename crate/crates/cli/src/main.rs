use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hombell::chsh::CHSH_PRECISION;
use hombell::circuit::fibre_transmissivity;
use hombell::io::{self, sweep_to_csv, CircuitFile, EvalReport, FORMAT_VERSION};
use hombell::ppo::{Checkpoint, PpoConfig, Trainer};
use hombell::search::TracePoint;
use hombell::{
    evaluate, maximize_chsh, maximize_herald_prob, random_search, sweep_distance, sweep_efficiency, train_agent,
    BellMeasurement, Circuit, CircuitEnv, EnvConfig, EpisodeRecord, Error, EvalOptions, HeraldScheme,
    OptimizeConfig, Strategy,
};

const EXIT_INPUT: u8 = 2;
const EXIT_HERALD: u8 = 3;

#[derive(Parser)]
#[command(name = "hombell", version, about = "Design and evaluate heralded photonic Bell tests with homodyne detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a circuit file: CHSH score, correlators, heralding probability.
    Eval(EvalArgs),
    /// Optimize gate parameters, for CHSH or for heralding probability above a CHSH floor.
    Optimize(OptimizeArgs),
    /// Random search over circuits of one strategy.
    Search(SearchArgs),
    /// Train a PPO agent to build circuits.
    Train(TrainArgs),
    /// Sweep fibre distance or detector efficiency and write a CSV table.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct EvalArgs {
    circuit: PathBuf,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fibre length to Bob at 0.2 dB/km.
    #[arg(long, default_value_t = 0.0)]
    distance_km: f64,
    /// Largest tolerated error bound on the CHSH score.
    #[arg(long)]
    chsh_precision: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OptimizeArgs {
    circuit: PathBuf,
    /// Squeezing cap per squeezer, in dB.
    #[arg(long, default_value_t = 10.0)]
    cap_db: f64,
    /// Maximize heralding probability subject to CHSH >= this floor.
    #[arg(long)]
    herald_floor: Option<f64>,
    /// Also optimize the four homodyne angles.
    #[arg(long)]
    optimize_angles: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest tolerated error bound on each CHSH score.
    #[arg(long, default_value_t = CHSH_PRECISION)]
    chsh_precision: f64,
    /// Optimized circuit file (default: `<input>.optimized.json` next to the input).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Click,
    SinglePhoton,
}

impl From<SchemeArg> for HeraldScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Click => HeraldScheme::Click,
            SchemeArg::SinglePhoton => HeraldScheme::SinglePhotonProjection,
        }
    }
}

#[derive(Args, Clone)]
struct EnvArgs {
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=5))]
    strategy: u8,
    #[arg(long, default_value_t = 4)]
    modes: usize,
    /// Total number of gates, initial ones included.
    #[arg(long, default_value_t = 5)]
    depth: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Click)]
    herald_scheme: SchemeArg,
    /// Threshold detector efficiency.
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EnvArgs {
    fn config(&self) -> Result<EnvConfig> {
        let cfg = EnvConfig {
            strategy: Strategy::new(self.strategy)?,
            n_modes: self.modes,
            n_circuit: self.depth,
            scheme: self.herald_scheme.into(),
            eta: self.eta,
            optimize: OptimizeConfig { seed: self.seed, ..Default::default() },
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    /// Ranked results (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    /// How many results to print.
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    discount: Option<f64>,
    #[arg(long)]
    gae_lambda: Option<f64>,
    #[arg(long)]
    update_frequency: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    entropy_coef: Option<f64>,
    /// Hidden widths, e.g. `45,30`.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Resumed from if it exists, rewritten when training ends.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Per-episode trace (CSV).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Best circuit found (circuit file).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Distance,
    Efficiency,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: SweepKind,
    circuit: PathBuf,
    #[arg(long, default_value_t = 12.0)]
    max_km: f64,
    #[arg(long, default_value_t = 0.5)]
    step_km: f64,
    /// Explicit efficiency grid, e.g. `0.25,0.5,1`.
    #[arg(long, value_delimiter = ',')]
    etas: Option<Vec<f64>>,
    /// Default efficiency grid: `eta_step, 2 eta_step, ..., 1`.
    #[arg(long, default_value_t = 0.05)]
    eta_step: f64,
    #[arg(long, default_value_t = 10.0)]
    cap_db: f64,
    #[arg(long)]
    optimize_angles: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest tolerated error bound on each CHSH score.
    #[arg(long, default_value_t = CHSH_PRECISION)]
    chsh_precision: f64,
    /// CSV destination (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `println!` that reports write failures instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT } else { 0 });
        }
    };
    let parallel = matches!(cli.command, Command::Search(_));
    if let Err(e) = configure_threads(parallel) {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_INPUT);
    }
    let result = match cli.command {
        Command::Eval(a) => cmd_eval(a),
        Command::Optimize(a) => cmd_optimize(a),
        Command::Search(a) => cmd_search(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // A closed downstream pipe (`hombell eval x | head`) is not an error.
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::HeraldImpossible { .. }) => EXIT_HERALD,
        Some(
            Error::Format(_)
            | Error::InvalidGate(_)
            | Error::InvalidMode { .. }
            | Error::InvalidParameter(_)
            | Error::WrongModeCount { .. },
        ) => EXIT_INPUT,
        _ => 1,
    }
}

/// Searches fan out over `HPL_THREADS` workers (default: all cores); everything else runs on one.
fn configure_threads(parallel: bool) -> Result<()> {
    let cap = match std::env::var("HPL_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().ok().filter(|&n| n > 0).with_context(|| format!("HPL_THREADS={v:?}"))?),
        Err(_) => None,
    };
    let threads = if parallel { cap.unwrap_or(0) } else { 1 };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn load(path: &Path) -> Result<(CircuitFile, Circuit, BellMeasurement)> {
    let file = CircuitFile::load(path)?;
    let circuit = file.circuit()?;
    let meas = file.measurement()?;
    Ok((file, circuit, meas))
}

fn print_report(r: &EvalReport) -> Result<()> {
    out!("CHSH                {:.6}", r.chsh);
    out!("heralding prob.     {:.4e}", r.herald_probability);
    let e = r.correlators;
    out!("correlators         A0B0 {:+.6}  A0B1 {:+.6}  A1B0 {:+.6}  A1B1 {:+.6}", e[0][0], e[0][1], e[1][0], e[1][1]);
    for s in &r.squeezing {
        out!("squeezing           {} = {:.3} dB", s.gate, s.db);
    }
    if !r.heralded {
        out!("heralding failed; scored the vacuum");
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (_, circuit, meas) = load(&a.circuit)?;
    let mut opts = EvalOptions { bob_transmissivity: fibre_transmissivity(a.distance_km), ..Default::default() };
    if let Some(p) = a.chsh_precision {
        opts.chsh_precision = p;
    }
    let eval = evaluate(&circuit, &meas, &opts).with_context(|| format!("evaluating {}", a.circuit.display()))?;
    let report = EvalReport::new(&circuit, &eval, Some(a.seed));
    print_report(&report)?;
    if let Some(out) = a.out {
        io::write(&out, &(report.to_json() + "\n"))?;
    }
    Ok(())
}

fn default_output(input: &Path) -> PathBuf {
    let stem = input.file_stem().map_or_else(|| "circuit".into(), |s| s.to_string_lossy().into_owned());
    input.with_file_name(format!("{stem}.optimized.json"))
}

fn cmd_optimize(a: OptimizeArgs) -> Result<()> {
    let (file, circuit, meas) = load(&a.circuit)?;
    let cfg = OptimizeConfig {
        squeeze_cap_db: a.cap_db,
        optimize_angles: a.optimize_angles,
        seed: a.seed,
        chsh_precision: a.chsh_precision,
        ..Default::default()
    };
    let eval_opts = EvalOptions { chsh_precision: a.chsh_precision, ..Default::default() };
    let before = evaluate(&circuit, &meas, &eval_opts).ok();
    let (mut best, mut best_meas) = match a.herald_floor {
        Some(floor) => (maximize_herald_prob(&circuit, &meas, floor, &cfg)?.circuit, meas.clone()),
        None => {
            let opt = maximize_chsh(&circuit, &meas, &cfg)?;
            (opt.circuit, opt.measurement)
        }
    };
    let mut eval = evaluate(&best, &best_meas, &eval_opts)?;
    if let Some(b) = &before {
        let improved = match a.herald_floor {
            Some(_) => eval.herald_probability > b.herald_probability,
            None => eval.chsh > b.chsh + 1e-12,
        };
        if !improved {
            log::warn!("optimization did not improve on the input; keeping its parameters");
            (best, best_meas, eval) = (circuit.clone(), meas.clone(), evaluate(&circuit, &meas, &eval_opts)?);
        }
    }
    let mut out_file = CircuitFile::from_circuit(&best, file.measurement.is_some().then_some(&best_meas))?;
    if a.optimize_angles {
        out_file = CircuitFile::from_circuit(&best, Some(&best_meas))?;
    }
    out_file.note = file.note.clone();
    let out = a.out.unwrap_or_else(|| default_output(&a.circuit));
    out_file.save(&out)?;
    let report = EvalReport::new(&best, &eval, Some(a.seed));
    print_report(&report)?;
    out!("wrote {}", out.display());
    if let Some(p) = a.report {
        io::write(&p, &(report.to_json() + "\n"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RankedCircuit {
    rank: usize,
    chsh: f64,
    herald_probability: f64,
    reward: f64,
    count: usize,
    actions: Vec<String>,
    circuit: CircuitFile,
}

#[derive(Serialize)]
struct SearchReport<'a> {
    format: u32,
    seed: u64,
    episodes: usize,
    config: &'a EnvConfig,
    results: Vec<RankedCircuit>,
}

fn ranked(records: &[EpisodeRecord], env: &CircuitEnv) -> Result<Vec<RankedCircuit>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(RankedCircuit {
                rank: i + 1,
                chsh: r.chsh,
                herald_probability: r.herald_probability,
                reward: r.reward,
                count: r.count,
                actions: r.actions.iter().map(|&a| env.actions()[a].to_string()).collect(),
                circuit: CircuitFile::from_circuit(&r.circuit, None)?,
            })
        })
        .collect()
}

fn print_records(records: &[EpisodeRecord], top: usize) -> Result<()> {
    for (i, r) in records.iter().take(top).enumerate() {
        let gates: Vec<String> = r.circuit.gates.iter().map(|g| g.to_string()).collect();
        out!("{:>3}  CHSH {:.5}  p {:.3e}  x{}  {}", i + 1, r.chsh, r.herald_probability, r.count, gates.join(" "));
    }
    Ok(())
}

fn cmd_search(a: SearchArgs) -> Result<()> {
    let cfg = a.env.config()?;
    let env = CircuitEnv::new(cfg.clone())?;
    let records = random_search(&cfg, a.episodes, a.env.seed)?;
    out!("{} distinct circuits from {} episodes", records.len(), a.episodes);
    print_records(&records, a.top)?;
    if let Some(out) = a.out {
        let report = SearchReport {
            format: FORMAT_VERSION,
            seed: a.env.seed,
            episodes: a.episodes,
            config: &cfg,
            results: ranked(&records, &env)?,
        };
        io::write(&out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(())
}

fn ppo_config(a: &TrainArgs) -> Result<PpoConfig> {
    let mut c = PpoConfig { seed: a.env.seed, hidden: PpoConfig::hidden_for_modes(a.env.modes), ..Default::default() };
    if let Some(v) = a.lr {
        c.learning_rate = v;
    }
    if let Some(v) = a.clip {
        c.clip_ratio = v;
    }
    if let Some(v) = a.discount {
        c.discount = v;
    }
    if let Some(v) = a.gae_lambda {
        c.gae_lambda = v;
    }
    if let Some(v) = a.update_frequency {
        c.update_frequency = v;
    }
    if let Some(v) = a.epochs {
        c.epochs_per_update = v;
    }
    if let Some(v) = a.entropy_coef {
        c.entropy_coefficient = v;
    }
    if let Some(h) = &a.hidden {
        let &[h0, h1] = h.as_slice() else {
            bail!(Error::InvalidParameter(format!("--hidden takes two widths, got {}", h.len())));
        };
        c.hidden = [h0, h1];
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let env = CircuitEnv::new(a.env.config()?)?;
    let mut trainer = match &a.checkpoint {
        Some(p) if p.exists() => {
            log::info!("resuming from {}", p.display());
            Trainer::from_checkpoint(env, Checkpoint::load(p)?)?
        }
        _ => Trainer::new(env, ppo_config(&a)?)?,
    };
    let mut trace = match &a.trace {
        Some(p) => Some(csv::Writer::from_path(p).with_context(|| format!("creating {}", p.display()))?),
        None => None,
    };
    let mut write_err = None;
    let outcome = train_agent(&mut trainer, a.episodes, |t: &TracePoint| {
        if t.episode.is_multiple_of(100) {
            log::info!("episode {}: CHSH {:.5}, best {:.5}", t.episode, t.chsh, t.best_chsh);
        }
        if let Some(w) = trace.as_mut() {
            if let Err(e) = w.serialize(t) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(mut w) = trace {
        w.flush()?;
    }
    if let Some(p) = &a.checkpoint {
        trainer.checkpoint().save(p)?;
    }
    let Some(best) = outcome.best else { bail!("no episodes were run") };
    print_records(std::slice::from_ref(&best), 1)?;
    if let Some(out) = a.out {
        let mut f = CircuitFile::from_circuit(&best.circuit, None)?;
        f.note = Some(format!("best of {} training episodes, seed {}", trainer.episodes, a.env.seed));
        f.save(&out)?;
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (_, circuit, meas) = load(&a.circuit)?;
    let cfg = OptimizeConfig {
        squeeze_cap_db: a.cap_db,
        optimize_angles: a.optimize_angles,
        seed: a.seed,
        chsh_precision: a.chsh_precision,
        ..Default::default()
    };
    let sweep = match a.kind {
        SweepKind::Distance => sweep_distance(&circuit, &meas, a.max_km, a.step_km, &cfg)?,
        SweepKind::Efficiency => {
            let grid = match a.etas {
                Some(g) => g,
                None => {
                    if !(a.eta_step > 0.0 && a.eta_step <= 1.0) {
                        bail!(Error::InvalidParameter(format!("eta step {} outside (0, 1]", a.eta_step)));
                    }
                    let n = (1.0 / a.eta_step + 1e-9).floor() as usize;
                    let mut g: Vec<f64> = (1..=n).map(|i| i as f64 * a.eta_step).collect();
                    if g.last().is_none_or(|&e| (e - 1.0).abs() > 1e-9) {
                        g.push(1.0);
                    } else {
                        *g.last_mut().unwrap() = 1.0;
                    }
                    g
                }
            };
            sweep_efficiency(&circuit, &meas, &grid, &cfg)?
        }
    };
    let text = sweep_to_csv(&sweep)?;
    match a.out {
        Some(p) => io::write(&p, &text)?,
        None => write!(std::io::stdout(), "{text}")?,
    }
    Ok(())
}
