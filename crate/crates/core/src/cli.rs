//! Command-line front end: argument parsing, the TOML run configuration,
//! and the `gen-task`, `run`, `sweep` and `replay` commands.
//!
//! Values are resolved in three layers: built-in defaults, then an optional
//! `--config` file, then explicit flags.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::environment::{generate_task, load_replay_log, write_matrix_csv, ReplayLog, TaskParams};
use crate::error::{Error, Result};
use crate::harness::{
    delay_sweep, fraction_sweep, moving_average, mu_sweep, run_experiment, ComparatorSpec, ExperimentConfig,
    ExperimentResult, ForecasterSpec, SweepParam, SweepRow, TaskSource,
};
use crate::neural::NeuralSettings;

/// Seed used when neither a flag nor a config file sets one.
pub const DEFAULT_SEED: u64 = 20_180_611;
pub const DEFAULT_TRIALS: usize = 200;
pub const DEFAULT_FORECASTERS: [&str; 2] = ["tabular-df", "tabular-ff"];

pub const RUN_HEADER: [&str; 7] = [
    "forecaster",
    "round",
    "mean_loss",
    "loss_ci95",
    "mean_regret",
    "regret_ci95",
    "std_regret",
];
pub const SWEEP_HEADER: [&str; 4] = ["forecaster", "param", "final_mean_regret", "final_ci95"];

#[derive(Debug, Parser)]
#[command(name = "proxy-forecast", version, about = "Forecast delayed outcomes from less-delayed proxies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic task and write H.csv, G.csv and stream.log.
    GenTask(GenTaskArgs),
    /// Run forecasters over synthetic trials and write per-round statistics.
    Run(RunArgs),
    /// Sweep one task parameter and write final-regret summaries.
    Sweep(SweepArgs),
    /// Run forecasters over a recorded replay log.
    Replay(ReplayArgs),
}

/// Flags shared by every command. Unset flags fall back to the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonFlags {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Task preset (`appendix`).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Probability of a uniformly drawn instance instead of the block schedule.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Interpolation towards uniform-random rows of H and G.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Probability that the observed proxy is the true one.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Outcome delay in rounds.
    #[arg(long)]
    pub delay: Option<usize>,
    #[arg(long)]
    pub proxy_delay: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub proxies: Option<usize>,
    #[arg(long)]
    pub outcomes: Option<usize>,
    /// `true-model`, `hindsight` or `external:<path>`.
    #[arg(long)]
    pub comparator: Option<String>,
    /// Comma-separated list such as `tabular-df,tabular-ff:kt,nn-rff:marketplace`.
    #[arg(long, value_delimiter = ',')]
    pub forecasters: Option<Vec<String>>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenTaskArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    /// Existing output directory.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonFlags,
    /// Output CSV; stdout when omitted.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    pub dump_config: bool,
    /// Also write `<out stem>_smoothed.csv` with losses averaged over this many rounds.
    #[arg(long)]
    pub smooth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// `mu`, `fraction` or `delay`.
    pub param: String,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// For delay sweeps, use horizon `k * N * D` at each point.
    #[arg(long)]
    pub horizon_factor: Option<usize>,
    #[command(flatten)]
    pub common: CommonFlags,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Replay log (`#spaces N Z Y Dz D` header, then `round,instance,proxy,outcome` rows).
    pub log: PathBuf,
    #[command(flatten)]
    pub common: CommonFlags,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// The `[task]` section. Unset values come from the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Replay log path; when set, the synthetic task keys are ignored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replay: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proxies: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcomes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delay: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proxy_delay: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
}

/// The `[neural]` section: overrides applied on top of each neural
/// forecaster's preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedback_learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l2_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buffer_capacity: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_fill: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_trigger: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trigger_every_rounds: Option<usize>,
}

impl NeuralOverrides {
    pub fn apply(&self, mut s: NeuralSettings) -> NeuralSettings {
        if let Some(h) = &self.hidden {
            s.hidden = h.clone();
        }
        s.learning_rate = self.learning_rate.unwrap_or(s.learning_rate);
        s.feedback_learning_rate = self.feedback_learning_rate.unwrap_or(s.feedback_learning_rate);
        s.l2_scale = self.l2_scale.unwrap_or(s.l2_scale);
        s.buffer_capacity = self.buffer_capacity.unwrap_or(s.buffer_capacity);
        s.min_fill = self.min_fill.unwrap_or(s.min_fill);
        s.batch_size = self.batch_size.unwrap_or(s.batch_size);
        s.cadence.steps_per_trigger = self.steps_per_trigger.unwrap_or(s.cadence.steps_per_trigger);
        s.cadence.trigger_every_rounds = self.trigger_every_rounds.unwrap_or(s.cadence.trigger_every_rounds);
        s
    }
}

/// Declarative description of a run, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub trials: usize,
    pub jobs: usize,
    pub comparator: String,
    pub forecasters: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub task: TaskSection,
    pub neural: NeuralOverrides,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            trials: DEFAULT_TRIALS,
            jobs: 0,
            comparator: "true-model".into(),
            forecasters: DEFAULT_FORECASTERS.iter().map(|s| s.to_string()).collect(),
            out: None,
            task: TaskSection::default(),
            neural: NeuralOverrides::default(),
        }
    }
}

pub fn task_preset(name: &str) -> Result<TaskParams> {
    match name {
        "appendix" => Ok(TaskParams::appendix()),
        other => Err(Error::config(format!("unknown task preset '{other}'"))),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Defaults, then `flags.config` if given, then the explicit flags.
    pub fn from_flags(flags: &CommonFlags) -> Result<Self> {
        let mut c = match &flags.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        let t = &mut c.task;
        if flags.preset.is_some() {
            t.preset = flags.preset.clone();
        }
        for (flag, slot) in [
            (flags.instances, &mut t.instances),
            (flags.proxies, &mut t.proxies),
            (flags.outcomes, &mut t.outcomes),
            (flags.horizon, &mut t.horizon),
            (flags.delay, &mut t.delay),
            (flags.proxy_delay, &mut t.proxy_delay),
        ] {
            if flag.is_some() {
                *slot = flag;
            }
        }
        for (flag, slot) in [(flags.epsilon, &mut t.epsilon), (flags.mu, &mut t.mu), (flags.fraction, &mut t.fraction)] {
            if flag.is_some() {
                *slot = flag;
            }
        }
        c.seed = flags.seed.unwrap_or(c.seed);
        c.trials = flags.trials.unwrap_or(c.trials);
        c.jobs = flags.jobs.unwrap_or(c.jobs);
        if let Some(comparator) = &flags.comparator {
            c.comparator = comparator.clone();
        }
        if let Some(list) = &flags.forecasters {
            c.forecasters = list.clone();
        }
        Ok(c)
    }

    /// Synthetic task parameters: preset values overridden by the `[task]` keys.
    pub fn task_params(&self) -> Result<TaskParams> {
        let t = &self.task;
        let p = task_preset(t.preset.as_deref().unwrap_or("appendix"))?;
        let params = TaskParams {
            n_instances: t.instances.unwrap_or(p.n_instances),
            n_proxies: t.proxies.unwrap_or(p.n_proxies),
            n_outcomes: t.outcomes.unwrap_or(p.n_outcomes),
            horizon: t.horizon.unwrap_or(p.horizon),
            outcome_delay: t.delay.unwrap_or(p.outcome_delay),
            proxy_delay: t.proxy_delay.unwrap_or(p.proxy_delay),
            epsilon: t.epsilon.unwrap_or(p.epsilon),
            mu: t.mu.unwrap_or(p.mu),
            useful_proxy_fraction: t.fraction.unwrap_or(p.useful_proxy_fraction),
        };
        params.validate()?;
        Ok(params)
    }

    /// The same configuration with every synthetic task key written out.
    pub fn explicit(&self) -> Result<Self> {
        let mut c = self.clone();
        if c.task.replay.is_none() {
            let p = self.task_params()?;
            c.task = TaskSection {
                preset: Some(c.task.preset.unwrap_or_else(|| "appendix".into())),
                replay: None,
                instances: Some(p.n_instances),
                proxies: Some(p.n_proxies),
                outcomes: Some(p.n_outcomes),
                horizon: Some(p.horizon),
                delay: Some(p.outcome_delay),
                proxy_delay: Some(p.proxy_delay),
                epsilon: Some(p.epsilon),
                mu: Some(p.mu),
                fraction: Some(p.useful_proxy_fraction),
            };
        }
        Ok(c)
    }

    pub fn forecaster_specs(&self) -> Result<Vec<ForecasterSpec>> {
        self.forecasters
            .iter()
            .map(|text| {
                let mut spec = ForecasterSpec::parse(text)?;
                if spec.kind.is_neural() {
                    spec.neural = self.neural.apply(spec.neural);
                }
                Ok(spec)
            })
            .collect()
    }

    /// Resolves presets, forecaster lists, comparator files and the replay log.
    /// Everything is validated before any trial runs.
    pub fn to_experiment(&self) -> Result<ExperimentConfig> {
        let source = match &self.task.replay {
            Some(path) => TaskSource::Replay(load_replay_log(path)?.to_stream()),
            None => TaskSource::Synthetic(self.task_params()?),
        };
        let config = ExperimentConfig {
            source,
            forecasters: self.forecaster_specs()?,
            n_trials: self.trials,
            comparator: ComparatorSpec::parse(&self.comparator)?,
            seed: self.seed,
            jobs: self.jobs,
        };
        config.validate()?;
        Ok(config)
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let err = |e: csv::Error| Error::config(format!("csv encoding failed: {e}"));
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::config(format!("csv encoding failed: {e}")))
}

/// Per-round statistics; rounds are 1-based.
pub fn run_csv(result: &ExperimentResult) -> Result<Vec<u8>> {
    run_csv_with(result, |s| s.to_vec())
}

fn run_csv_with(result: &ExperimentResult, loss_transform: impl Fn(&[f64]) -> Vec<f64>) -> Result<Vec<u8>> {
    let rows = result.series.iter().flat_map(|s| {
        let loss = loss_transform(&s.mean_loss);
        (0..result.horizon)
            .map(|t| {
                vec![
                    s.forecaster.clone(),
                    (t + 1).to_string(),
                    fmt_f64(loss[t]),
                    fmt_f64(s.loss_ci95[t]),
                    fmt_f64(s.mean_regret[t]),
                    fmt_f64(s.regret_ci95[t]),
                    fmt_f64(s.std_regret[t]),
                ]
            })
            .collect::<Vec<_>>()
    });
    csv_bytes(&RUN_HEADER, rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &SWEEP_HEADER,
        rows.iter().map(|r| {
            vec![
                r.forecaster.clone(),
                fmt_f64(r.param),
                fmt_f64(r.final_mean_regret),
                fmt_f64(r.final_ci95),
            ]
        }),
    )
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        }),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(bytes)
                .and_then(|_| stdout.flush())
                .map_err(|source| Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })
        }
    }
}

fn smoothed_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_smoothed.csv"))
}

pub fn cmd_gen_task(args: &GenTaskArgs) -> Result<()> {
    let config = RunConfig::from_flags(&args.common)?;
    let params = config.task_params()?;
    if !args.out.is_dir() {
        return Err(Error::usage(format!(
            "output directory {} does not exist",
            args.out.display()
        )));
    }
    let (task, stream) = generate_task(params, config.seed)?;
    write_matrix_csv(&args.out.join("H.csv"), &task.proxy_matrix)?;
    write_matrix_csv(&args.out.join("G.csv"), &task.outcome_matrix)?;
    ReplayLog::from(&stream).write(&args.out.join("stream.log"))
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut config = RunConfig::from_flags(&args.common)?;
    if args.out.is_some() {
        config.out = args.out.clone();
    }
    if args.dump_config {
        return emit(None, config.explicit()?.to_toml()?.as_bytes());
    }
    if args.smooth.is_some() && config.out.is_none() {
        return Err(Error::usage("--smooth needs an output file"));
    }
    let experiment = config.to_experiment()?;
    let result = run_experiment(&experiment)?;
    emit(config.out.as_deref(), &run_csv(&result)?)?;
    if let (Some(window), Some(out)) = (args.smooth, &config.out) {
        let bytes = run_csv_with(&result, |s| moving_average(s, window))?;
        emit(Some(&smoothed_path(out)), &bytes)?;
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let param: SweepParam = args.param.parse()?;
    if args.values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let config = RunConfig::from_flags(&args.common)?;
    if config.task.replay.is_some() {
        return Err(Error::usage("sweeps need a synthetic task"));
    }
    let base = config.to_experiment()?;
    let rows = match param {
        SweepParam::Mu => mu_sweep(&base, &args.values)?,
        SweepParam::Fraction => fraction_sweep(&base, &args.values)?,
        SweepParam::Delay => {
            let delays = args
                .values
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::config(format!("delay {v} is not a non-negative integer")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            delay_sweep(&base, &delays, args.horizon_factor)?
        }
    };
    emit(args.out.as_deref().or(config.out.as_deref()), &sweep_csv(&rows)?)
}

pub fn cmd_replay(args: &ReplayArgs) -> Result<()> {
    let mut config = RunConfig::from_flags(&args.common)?;
    config.task.replay = Some(args.log.clone());
    // A replay log has no true model and no randomness in its stream.
    if args.common.config.is_none() {
        if args.common.comparator.is_none() {
            config.comparator = "hindsight".into();
        }
        if args.common.trials.is_none() {
            config.trials = 1;
        }
    }
    let experiment = config.to_experiment()?;
    let result = run_experiment(&experiment)?;
    emit(args.out.as_deref().or(config.out.as_deref()), &run_csv(&result)?)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenTask(a) => cmd_gen_task(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Replay(a) => cmd_replay(a),
    }
}
