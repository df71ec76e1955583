//! The delayed-feedback game loop, regret accounting, multi-trial
//! experiments and parameter sweeps.
//!
//! Round `t` runs as: reveal `x_t`, predict, charge the log-loss of the
//! realized `y_t`, then at the end of the round deliver the proxy generated
//! at `t - D_z` followed by the outcome generated at `t - D`. Events whose
//! reveal round lies past the horizon are dropped.

use std::collections::VecDeque;
use std::path::Path;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::domain::{capped_neg_ln, ProblemSpaces, DEFAULT_LOSS_CAP};
use crate::environment::{substream, EventStream, FactoredTask, TaskParams};
use crate::error::{Error, Result};
use crate::estimators::Smoothing;
use crate::neural::{Architecture, NeuralForecaster, NeuralForecasterConfig, NeuralSettings};
use crate::tabular::{DirectForecaster, FactoredEstimates, FactoredForecaster, Forecaster, OracleForecaster};

/// Smoothing of the hindsight comparator's empirical conditionals.
pub const HINDSIGHT_ALPHA: f64 = 1e-6;

/// Two-sided 95% normal quantile used for confidence half-widths.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// FIFO of pending revelations keyed by the round at whose end they are due.
#[derive(Debug, Clone)]
pub struct DelayQueue<T> {
    pending: VecDeque<(usize, T)>,
}

impl<T> Default for DelayQueue<T> {
    fn default() -> Self {
        Self {
            pending: VecDeque::new(),
        }
    }
}

impl<T> DelayQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Schedules `item` for the end of `reveal_round`. Keys must be pushed in
    /// non-decreasing order, which holds for a constant delay.
    pub fn push(&mut self, reveal_round: usize, item: T) {
        debug_assert!(self.pending.back().is_none_or(|(k, _)| *k <= reveal_round));
        self.pending.push_back((reveal_round, item));
    }

    /// Removes and returns every entry due at the end of round `t`, oldest first.
    pub fn pop_due(&mut self, t: usize) -> Vec<T> {
        let mut out = Vec::new();
        while let Some((k, _)) = self.pending.front() {
            if *k > t {
                break;
            }
            debug_assert_eq!(*k, t, "entry due at {k} missed its round");
            out.push(self.pending.pop_front().expect("front exists").1);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

/// Reference predictor whose loss is subtracted to form regret.
#[derive(Debug, Clone)]
pub enum Comparator {
    /// The ground-truth factored predictor of a synthetic task.
    TrueModel(OracleForecaster),
    /// Best fixed per-instance distribution for the realized sequence, smoothed by `alpha`.
    Hindsight { alpha: f64 },
    /// Pre-computed per-round losses.
    External(Vec<f64>),
}

impl Comparator {
    pub fn losses(&self, stream: &EventStream) -> Result<Vec<f64>> {
        match self {
            Comparator::TrueModel(oracle) => Ok(stream
                .events
                .iter()
                .map(|e| capped_neg_ln(oracle.true_prob(e.instance, e.outcome), DEFAULT_LOSS_CAP))
                .collect()),
            Comparator::Hindsight { alpha } => Ok(hindsight_losses(stream, *alpha)),
            Comparator::External(losses) => {
                if losses.len() != stream.horizon() {
                    return Err(Error::usage(format!(
                        "external comparator has {} losses for {} rounds",
                        losses.len(),
                        stream.horizon()
                    )));
                }
                Ok(losses.clone())
            }
        }
    }
}

fn hindsight_losses(stream: &EventStream, alpha: f64) -> Vec<f64> {
    let s = stream.spaces;
    let mut counts = vec![vec![0u64; s.n_outcomes]; s.n_instances];
    for e in &stream.events {
        counts[e.instance][e.outcome] += 1;
    }
    stream
        .events
        .iter()
        .map(|e| {
            let row = &counts[e.instance];
            let total: u64 = row.iter().sum();
            let p = (row[e.outcome] as f64 + alpha) / (total as f64 + s.n_outcomes as f64 * alpha);
            capped_neg_ln(p, DEFAULT_LOSS_CAP)
        })
        .collect()
}

/// How the comparator is chosen for each trial of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum ComparatorSpec {
    TrueModel,
    Hindsight,
    External(Vec<f64>),
}

impl ComparatorSpec {
    /// Parses `true-model`, `hindsight` or `external:<path>`; the external file holds
    /// one loss per line.
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "true-model" => Ok(ComparatorSpec::TrueModel),
            "hindsight" => Ok(ComparatorSpec::Hindsight),
            other => match other.strip_prefix("external:") {
                Some(path) => Ok(ComparatorSpec::External(read_loss_file(Path::new(path))?)),
                None => Err(Error::config(format!("unknown comparator '{other}'"))),
            },
        }
    }

    fn resolve(&self, task: Option<&FactoredTask>) -> Result<Comparator> {
        Ok(match self {
            ComparatorSpec::TrueModel => {
                let task = task.ok_or_else(|| {
                    Error::usage("true-model comparator needs a synthetic task with a known model")
                })?;
                Comparator::TrueModel(OracleForecaster::new(
                    task.proxy_matrix.clone(),
                    task.outcome_matrix.clone(),
                )?)
            }
            ComparatorSpec::Hindsight => Comparator::Hindsight {
                alpha: HINDSIGHT_ALPHA,
            },
            ComparatorSpec::External(l) => Comparator::External(l.clone()),
        })
    }
}

fn read_loss_file(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("'{l}' is not a finite number"),
                })
        })
        .collect()
}

/// One round of a trial as seen by the forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub instance: usize,
    pub prediction: Vec<f64>,
    pub observed_proxy: usize,
    pub outcome: usize,
    pub loss: f64,
    pub comparator_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialTrace {
    pub forecaster: String,
    pub rounds: Vec<RoundRecord>,
    /// `cumulative_regret[t - 1] = sum_{s <= t} (loss_s - comparator_loss_s)`.
    pub cumulative_regret: Vec<f64>,
    pub proxies_delivered: usize,
    pub outcomes_delivered: usize,
}

impl TrialTrace {
    pub fn final_regret(&self) -> f64 {
        self.cumulative_regret.last().copied().unwrap_or(0.0)
    }

    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.rounds.iter().map(|r| r.loss)
    }
}

/// Plays `stream` against `forecaster` and accounts regret against `comparator`.
pub fn run_trial<F: Forecaster + ?Sized>(
    forecaster: &mut F,
    stream: &EventStream,
    comparator: &Comparator,
) -> Result<TrialTrace> {
    run_trial_probed(forecaster, stream, comparator, |_, _| {})
}

/// As [`run_trial`], calling `probe(t, forecaster)` just before the prediction of round `t`.
pub fn run_trial_probed<F, P>(
    forecaster: &mut F,
    stream: &EventStream,
    comparator: &Comparator,
    mut probe: P,
) -> Result<TrialTrace>
where
    F: Forecaster + ?Sized,
    P: FnMut(usize, &F),
{
    stream.validate()?;
    if stream.horizon() == 0 {
        return Err(Error::usage("stream has no rounds"));
    }
    let comparator_losses = comparator.losses(stream)?;
    let spaces = stream.spaces;

    let mut proxy_queue: DelayQueue<(usize, usize)> = DelayQueue::new();
    let mut outcome_queue: DelayQueue<(usize, usize, usize)> = DelayQueue::new();
    let mut rounds = Vec::with_capacity(stream.horizon());
    let mut cumulative_regret = Vec::with_capacity(stream.horizon());
    let mut regret = 0.0;
    let (mut proxies_delivered, mut outcomes_delivered) = (0, 0);

    for (event, &comparator_loss) in stream.events.iter().zip(&comparator_losses) {
        let t = rounds.len() + 1;
        probe(t, forecaster);
        let prediction = forecaster.predict(event.instance)?;
        if prediction.len() != spaces.n_outcomes {
            return Err(Error::usage(format!(
                "forecaster returned {} probabilities for {} outcomes",
                prediction.len(),
                spaces.n_outcomes
            )));
        }
        let loss = capped_neg_ln(prediction[event.outcome], DEFAULT_LOSS_CAP);
        regret += loss - comparator_loss;
        cumulative_regret.push(regret);

        proxy_queue.push(t + spaces.proxy_delay, (event.instance, event.proxy));
        outcome_queue.push(t + spaces.outcome_delay, (event.instance, event.proxy, event.outcome));
        for (x, z) in proxy_queue.pop_due(t) {
            forecaster.observe_proxy(x, z)?;
            proxies_delivered += 1;
        }
        for (x, z, y) in outcome_queue.pop_due(t) {
            forecaster.observe_outcome(x, z, y)?;
            outcomes_delivered += 1;
        }
        forecaster.end_round(t)?;

        rounds.push(RoundRecord {
            instance: event.instance,
            prediction: prediction.into_vec(),
            observed_proxy: event.proxy,
            outcome: event.outcome,
            loss,
            comparator_loss,
        });
    }

    Ok(TrialTrace {
        forecaster: forecaster.name(),
        rounds,
        cumulative_regret,
        proxies_delivered,
        outcomes_delivered,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForecasterKind {
    TabularDf,
    TabularFf,
    NnDf,
    NnFf,
    NnRff,
}

impl ForecasterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ForecasterKind::TabularDf => "tabular-df",
            ForecasterKind::TabularFf => "tabular-ff",
            ForecasterKind::NnDf => "nn-df",
            ForecasterKind::NnFf => "nn-ff",
            ForecasterKind::NnRff => "nn-rff",
        }
    }

    pub fn is_neural(self) -> bool {
        matches!(self, ForecasterKind::NnDf | ForecasterKind::NnFf | ForecasterKind::NnRff)
    }
}

impl std::str::FromStr for ForecasterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tabular-df" => ForecasterKind::TabularDf,
            "tabular-ff" => ForecasterKind::TabularFf,
            "nn-df" => ForecasterKind::NnDf,
            "nn-ff" => ForecasterKind::NnFf,
            "nn-rff" => ForecasterKind::NnRff,
            other => return Err(Error::config(format!("unknown forecaster kind '{other}'"))),
        })
    }
}

/// A recipe for building one forecaster per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecasterSpec {
    pub kind: ForecasterKind,
    pub smoothing: Smoothing,
    /// Name of the neural preset the settings came from, for labelling.
    pub neural_preset: String,
    pub neural: NeuralSettings,
}

impl ForecasterSpec {
    pub fn tabular(kind: ForecasterKind, smoothing: Smoothing) -> Self {
        Self {
            kind,
            smoothing,
            neural_preset: "github".into(),
            neural: NeuralSettings::github(),
        }
    }

    pub fn neural(kind: ForecasterKind, preset: &str) -> Result<Self> {
        Ok(Self {
            kind,
            smoothing: Smoothing::Laplace,
            neural_preset: preset.to_string(),
            neural: NeuralSettings::preset(preset)?,
        })
    }

    /// Parses `kind[:variant]`, where the variant is an estimator for tabular
    /// kinds (`laplace`, `kt`) and a preset for neural kinds (`github`, `marketplace`).
    pub fn parse(text: &str) -> Result<Self> {
        let (kind, variant) = match text.split_once(':') {
            Some((k, v)) => (k, Some(v)),
            None => (text, None),
        };
        let kind: ForecasterKind = kind.trim().parse()?;
        if kind.is_neural() {
            Self::neural(kind, variant.unwrap_or("github").trim())
        } else {
            let smoothing = variant.map(|v| v.trim().parse()).transpose()?.unwrap_or_default();
            Ok(Self::tabular(kind, smoothing))
        }
    }

    pub fn label(&self) -> String {
        if self.kind.is_neural() {
            format!("{}:{}", self.kind.as_str(), self.neural_preset)
        } else {
            match self.smoothing {
                Smoothing::Laplace => self.kind.as_str().to_string(),
                s => format!("{}:{}", self.kind.as_str(), s.label()),
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.smoothing.alpha() <= 0.0 {
            return Err(Error::config("smoothing alpha must be positive"));
        }
        self.neural.validate()
    }

    pub fn build(&self, spaces: ProblemSpaces, seed: u64) -> Result<Box<dyn Forecaster>> {
        let neural = |architecture| -> Result<Box<dyn Forecaster>> {
            let config = NeuralForecasterConfig {
                architecture,
                spaces,
                settings: self.neural.clone(),
                seed,
            };
            Ok(Box::new(NeuralForecaster::new(config)?.with_name(self.label())))
        };
        match self.kind {
            ForecasterKind::TabularDf => Ok(Box::new(DirectForecaster::new(spaces, self.smoothing)?)),
            ForecasterKind::TabularFf => Ok(Box::new(FactoredForecaster::new(spaces, self.smoothing)?)),
            ForecasterKind::NnDf => neural(Architecture::Direct),
            ForecasterKind::NnFf => neural(Architecture::Factored),
            ForecasterKind::NnRff => neural(Architecture::ResidualFactored),
        }
    }
}

/// Where each trial's stream comes from.
#[derive(Debug, Clone)]
pub enum TaskSource {
    /// Fresh `H`, `G` and stream per trial.
    Synthetic(TaskParams),
    /// The same recorded stream in every trial.
    Replay(EventStream),
}

impl TaskSource {
    pub fn horizon(&self) -> usize {
        match self {
            TaskSource::Synthetic(p) => p.horizon,
            TaskSource::Replay(s) => s.horizon(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub source: TaskSource,
    pub forecasters: Vec<ForecasterSpec>,
    pub n_trials: usize,
    pub comparator: ComparatorSpec,
    pub seed: u64,
    /// Worker threads; 0 lets the thread pool decide.
    pub jobs: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::config("need at least one trial"));
        }
        if self.forecasters.is_empty() {
            return Err(Error::config("need at least one forecaster"));
        }
        for f in &self.forecasters {
            f.validate()?;
        }
        match &self.source {
            TaskSource::Synthetic(p) => p.validate()?,
            TaskSource::Replay(stream) => {
                stream.validate()?;
                if stream.horizon() == 0 {
                    return Err(Error::config("replay log has no rounds"));
                }
                if self.comparator == ComparatorSpec::TrueModel {
                    return Err(Error::usage(
                        "true-model comparator is unavailable for replay logs",
                    ));
                }
            }
        }
        if let ComparatorSpec::External(l) = &self.comparator {
            if l.len() != self.source.horizon() {
                return Err(Error::config(format!(
                    "external comparator has {} losses for {} rounds",
                    l.len(),
                    self.source.horizon()
                )));
            }
        }
        Ok(())
    }
}

/// Loss and regret series of one forecaster in one trial.
#[derive(Debug, Clone)]
struct TrialSeries {
    losses: Vec<f64>,
    regret: Vec<f64>,
}

/// Pointwise statistics of one forecaster across trials.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSummary {
    pub forecaster: String,
    pub mean_loss: Vec<f64>,
    pub loss_ci95: Vec<f64>,
    pub mean_regret: Vec<f64>,
    pub regret_ci95: Vec<f64>,
    pub std_regret: Vec<f64>,
    /// Final cumulative regret of each trial, in trial order.
    pub final_regrets: Vec<f64>,
}

impl SeriesSummary {
    pub fn final_mean_regret(&self) -> f64 {
        *self.mean_regret.last().expect("non-empty series")
    }

    pub fn final_ci95(&self) -> f64 {
        *self.regret_ci95.last().expect("non-empty series")
    }

    pub fn final_std(&self) -> f64 {
        *self.std_regret.last().expect("non-empty series")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub horizon: usize,
    pub n_trials: usize,
    pub series: Vec<SeriesSummary>,
}

impl ExperimentResult {
    pub fn get(&self, label: &str) -> Option<&SeriesSummary> {
        self.series.iter().find(|s| s.forecaster == label)
    }
}

/// Per-trial generators: the stream uses substream `2i`, forecaster seeds
/// come from substream `2i + 1`.
fn trial_inputs(config: &ExperimentConfig, trial: usize) -> Result<(Option<FactoredTask>, EventStream, u64)> {
    let mut task_rng = substream(config.seed, 2 * trial as u64);
    let forecaster_seed = substream(config.seed, 2 * trial as u64 + 1).next_u64();
    match &config.source {
        TaskSource::Synthetic(params) => {
            let task = FactoredTask::draw(*params, &mut task_rng)?;
            let stream = task.generate_stream(&mut task_rng);
            Ok((Some(task), stream, forecaster_seed))
        }
        TaskSource::Replay(stream) => Ok((None, stream.clone(), forecaster_seed)),
    }
}

fn run_one_trial(config: &ExperimentConfig, trial: usize) -> Result<Vec<TrialSeries>> {
    let (task, stream, fseed) = trial_inputs(config, trial)?;
    let comparator = config.comparator.resolve(task.as_ref())?;
    config
        .forecasters
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let mut f = spec.build(stream.spaces, fseed.wrapping_add(j as u64))?;
            let trace = run_trial(f.as_mut(), &stream, &comparator)?;
            Ok(TrialSeries {
                losses: trace.losses().collect(),
                regret: trace.cumulative_regret,
            })
        })
        .collect()
}

pub(crate) fn with_pool<T: Send>(jobs: usize, work: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(work))
}

/// Mean and sample standard deviation of each column, accumulated in row order.
fn column_stats<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.clone().count();
    let mut mean = vec![0.0; width];
    for row in rows.clone() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; width];
    if n > 1 {
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= (n - 1) as f64);
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Runs `n_trials` independent trials for every forecaster and aggregates
/// pointwise. Results do not depend on `jobs`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let per_trial: Vec<Result<Vec<TrialSeries>>> = with_pool(config.jobs, || {
        (0..config.n_trials)
            .into_par_iter()
            .map(|i| run_one_trial(config, i))
            .collect()
    })?;
    let per_trial: Vec<Vec<TrialSeries>> = per_trial.into_iter().collect::<Result<_>>()?;

    let horizon = config.source.horizon();
    let n = config.n_trials as f64;
    let series = config
        .forecasters
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let (mean_loss, std_loss) =
                column_stats(per_trial.iter().map(|t| t[j].losses.as_slice()), horizon);
            let (mean_regret, std_regret) =
                column_stats(per_trial.iter().map(|t| t[j].regret.as_slice()), horizon);
            let ci = |s: &[f64]| s.iter().map(|sd| Z_95 * sd / n.sqrt()).collect::<Vec<_>>();
            SeriesSummary {
                forecaster: spec.label(),
                loss_ci95: ci(&std_loss),
                regret_ci95: ci(&std_regret),
                mean_loss,
                mean_regret,
                std_regret,
                final_regrets: per_trial.iter().map(|t| *t[j].regret.last().expect("T >= 1")).collect(),
            }
        })
        .collect();
    Ok(ExperimentResult {
        horizon,
        n_trials: config.n_trials,
        series,
    })
}

/// Trailing-window moving average, used for plotting loss curves.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for i in 0..series.len() {
        acc += series[i];
        if i >= window {
            acc -= series[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Final-regret summary of one forecaster at one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub forecaster: String,
    pub param: f64,
    pub final_mean_regret: f64,
    pub final_ci95: f64,
    pub final_std: f64,
    pub final_regrets: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Mu,
    Fraction,
    Delay,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mu" => Ok(SweepParam::Mu),
            "fraction" => Ok(SweepParam::Fraction),
            "delay" => Ok(SweepParam::Delay),
            other => Err(Error::config(format!("cannot sweep over '{other}'"))),
        }
    }
}

fn synthetic_params(config: &ExperimentConfig) -> Result<TaskParams> {
    match &config.source {
        TaskSource::Synthetic(p) => Ok(*p),
        TaskSource::Replay(_) => Err(Error::usage("sweeps need a synthetic task")),
    }
}

fn sweep(
    base: &ExperimentConfig,
    values: &[f64],
    apply: impl Fn(TaskParams, f64) -> TaskParams,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let params = synthetic_params(base)?;
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|&v| ExperimentConfig {
            source: TaskSource::Synthetic(apply(params, v)),
            ..base.clone()
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let mut rows = Vec::new();
    for (c, &v) in configs.iter().zip(values) {
        let result = run_experiment(c)?;
        rows.extend(result.series.into_iter().map(|s| SweepRow {
            forecaster: s.forecaster.clone(),
            param: v,
            final_mean_regret: s.final_mean_regret(),
            final_ci95: s.final_ci95(),
            final_std: s.final_std(),
            final_regrets: s.final_regrets,
        }));
    }
    Ok(rows)
}

/// One experiment per schedule mixing value `mu`.
pub fn mu_sweep(base: &ExperimentConfig, mus: &[f64]) -> Result<Vec<SweepRow>> {
    sweep(base, mus, |p, mu| TaskParams { mu, ..p })
}

/// One experiment per useful-proxy fraction.
pub fn fraction_sweep(base: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<SweepRow>> {
    sweep(base, fractions, |p, f| TaskParams { useful_proxy_fraction: f, ..p })
}

/// One experiment per outcome delay. With `horizon_factor = Some(k)` the
/// horizon of each point is `k * N * max(D, 1)`, otherwise the base horizon is kept.
pub fn delay_sweep(base: &ExperimentConfig, delays: &[usize], horizon_factor: Option<usize>) -> Result<Vec<SweepRow>> {
    let values: Vec<f64> = delays.iter().map(|&d| d as f64).collect();
    sweep(base, &values, |p, d| {
        let d = d as usize;
        TaskParams {
            outcome_delay: d,
            proxy_delay: p.proxy_delay.min(d),
            horizon: horizon_factor.map_or(p.horizon, |k| k * p.n_instances * d.max(1)),
            ..p
        }
    })
}

/// Ordinary least-squares line through `(x, y)` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_std_err: f64,
    pub dof: f64,
}

impl SlopeFit {
    pub fn fit(points: &[(f64, f64)]) -> Result<Self> {
        let n = points.len() as f64;
        if points.len() < 3 {
            return Err(Error::usage("slope fit needs at least three points"));
        }
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if sxx == 0.0 {
            return Err(Error::usage("slope fit needs at least two distinct x values"));
        }
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let rss: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        let dof = n - 2.0;
        Ok(Self {
            slope,
            intercept,
            slope_std_err: (rss / dof / sxx).sqrt(),
            dof,
        })
    }

    /// One-sided p-value for the alternative `slope > 0`.
    pub fn p_value_positive(&self) -> f64 {
        if self.slope_std_err == 0.0 {
            return if self.slope > 0.0 { 0.0 } else { 1.0 };
        }
        let t = StudentsT::new(0.0, 1.0, self.dof).expect("dof > 0");
        1.0 - t.cdf(self.slope / self.slope_std_err)
    }

    /// Lower end of the one-sided `level` confidence interval of the slope.
    pub fn slope_lower_bound(&self, level: f64) -> f64 {
        let t = StudentsT::new(0.0, 1.0, self.dof).expect("dof > 0");
        self.slope - t.inverse_cdf(level) * self.slope_std_err
    }
}

/// Points `(param, final regret of one trial)` of one forecaster across a sweep.
pub fn sweep_points(rows: &[SweepRow], forecaster: &str) -> Vec<(f64, f64)> {
    rows.iter()
        .filter(|r| r.forecaster == forecaster)
        .flat_map(|r| r.final_regrets.iter().map(move |&v| (r.param, v)))
        .collect()
}

/// Which factored predictor a decomposition check runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecomposedForecaster {
    Tabular(Smoothing),
    Oracle,
}

/// Both sides of the factored regret decomposition, averaged over trials.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    /// Regret against the true model, per trial.
    pub lhs: Vec<f64>,
    /// `sum_t ln(g(y_t|z_t) / g_hat_t(y_t|z_t))`, per trial.
    pub outcome_regret: Vec<f64>,
    /// `sum_t ln(h(z_t|x_t) / h_hat_t(z_t|x_t))`, per trial.
    pub proxy_regret: Vec<f64>,
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

impl DecompositionReport {
    pub fn lhs_mean(&self) -> f64 {
        mean_and_se(&self.lhs).0
    }

    pub fn rhs_per_trial(&self) -> Vec<f64> {
        self.outcome_regret.iter().zip(&self.proxy_regret).map(|(g, h)| g + h).collect()
    }

    pub fn rhs_mean(&self) -> f64 {
        mean_and_se(&self.rhs_per_trial()).0
    }

    /// `sqrt(se_lhs^2 + se_outcome^2 + se_proxy^2)`.
    pub fn combined_std_err(&self) -> f64 {
        let (_, a) = mean_and_se(&self.lhs);
        let (_, b) = mean_and_se(&self.outcome_regret);
        let (_, c) = mean_and_se(&self.proxy_regret);
        (a * a + b * b + c * c).sqrt()
    }

    /// `mean lhs <= mean outcome regret + mean proxy regret + 2 * combined SE`.
    pub fn holds(&self) -> bool {
        self.lhs_mean() <= self.rhs_mean() + 2.0 * self.combined_std_err()
    }
}

fn decomposition_trial<F>(forecaster: &mut F, task: &FactoredTask, stream: &EventStream) -> Result<(f64, f64, f64)>
where
    F: Forecaster + FactoredEstimates,
{
    let true_proxies = stream
        .true_proxies
        .as_ref()
        .ok_or_else(|| Error::usage("decomposition needs the true proxies"))?;
    let oracle = OracleForecaster::new(task.proxy_matrix.clone(), task.outcome_matrix.clone())?;
    let (mut g_sum, mut h_sum) = (0.0, 0.0);
    let trace = run_trial_probed(
        forecaster,
        stream,
        &Comparator::TrueModel(oracle),
        |t, f: &F| {
            let e = &stream.events[t - 1];
            let z = true_proxies[t - 1];
            g_sum += (task.outcome_matrix.get(z, e.outcome) / f.outcome_prob(z, e.outcome)).ln();
            h_sum += (task.proxy_matrix.get(e.instance, z) / f.proxy_prob(e.instance, z)).ln();
        },
    )?;
    Ok((trace.final_regret(), g_sum, h_sum))
}

/// Monte-Carlo check of the factored regret decomposition on fresh tasks.
pub fn decomposition_check(
    params: TaskParams,
    which: DecomposedForecaster,
    n_trials: usize,
    seed: u64,
    jobs: usize,
) -> Result<DecompositionReport> {
    params.validate()?;
    if n_trials == 0 {
        return Err(Error::config("need at least one trial"));
    }
    let per_trial: Vec<Result<(f64, f64, f64)>> = with_pool(jobs, || {
        (0..n_trials)
            .into_par_iter()
            .map(|i| {
                let mut rng = substream(seed, 2 * i as u64);
                let task = FactoredTask::draw(params, &mut rng)?;
                let stream = task.generate_stream(&mut rng);
                match which {
                    DecomposedForecaster::Tabular(s) => {
                        let mut f = FactoredForecaster::new(task.spaces(), s)?;
                        decomposition_trial(&mut f, &task, &stream)
                    }
                    DecomposedForecaster::Oracle => {
                        let mut f =
                            OracleForecaster::new(task.proxy_matrix.clone(), task.outcome_matrix.clone())?;
                        decomposition_trial(&mut f, &task, &stream)
                    }
                }
            })
            .collect()
    })?;
    let mut report = DecompositionReport {
        lhs: Vec::with_capacity(n_trials),
        outcome_regret: Vec::with_capacity(n_trials),
        proxy_regret: Vec::with_capacity(n_trials),
    };
    for r in per_trial {
        let (l, g, h) = r?;
        report.lhs.push(l);
        report.outcome_regret.push(g);
        report.proxy_regret.push(h);
    }
    Ok(report)
}
