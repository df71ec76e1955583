//! Ground-truth task generation and event streams.
//!
//! A synthetic task draws an instance-to-proxy matrix `H` and a
//! proxy-to-outcome matrix `G`, each row interpolating between a random
//! one-hot vector and a normalized uniform-random vector. Instances follow
//! a schedule that mixes a blockwise adversarial sequence with uniform
//! draws. The observed proxy can be diluted with uniform noise while the
//! outcome keeps following the true proxy.
//!
//! Randomness: every stream is a ChaCha8 generator. Substreams for trials
//! are selected with ChaCha's 64-bit stream id, so `(seed, index)` names a
//! generator independent of thread scheduling.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ProblemSpaces, RoundEvent, StochasticMatrix};
use crate::error::{Error, Result};

pub type TaskRng = ChaCha8Rng;

/// The generator for substream `index` of `seed`.
pub fn substream(seed: u64, index: u64) -> TaskRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Parameters of a synthetic factored task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub n_instances: usize,
    pub n_proxies: usize,
    pub n_outcomes: usize,
    pub horizon: usize,
    pub outcome_delay: usize,
    pub proxy_delay: usize,
    /// Interpolation weight towards the uniform-random rows.
    pub epsilon: f64,
    /// Probability of drawing the instance uniformly instead of from the block schedule.
    pub mu: f64,
    /// Probability that the observed proxy is the true one rather than uniform noise.
    pub useful_proxy_fraction: f64,
}

/// Interpolation weight used by the appendix preset.
pub const APPENDIX_EPSILON: f64 = 0.1;

impl TaskParams {
    /// T = 1000, D = 100, N = 10, |Z| = 4, |Y| = 5, adversarial schedule, clean proxies.
    pub fn appendix() -> Self {
        Self {
            n_instances: 10,
            n_proxies: 4,
            n_outcomes: 5,
            horizon: 1000,
            outcome_delay: 100,
            proxy_delay: 0,
            epsilon: APPENDIX_EPSILON,
            mu: 0.0,
            useful_proxy_fraction: 1.0,
        }
    }

    pub fn spaces(&self) -> ProblemSpaces {
        ProblemSpaces {
            n_instances: self.n_instances,
            n_proxies: self.n_proxies,
            n_outcomes: self.n_outcomes,
            proxy_delay: self.proxy_delay,
            outcome_delay: self.outcome_delay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spaces().validate()?;
        if self.horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("mu", self.mu),
            ("useful proxy fraction", self.useful_proxy_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Draws a `rows x cols` row-stochastic matrix `(1 - eps) R + eps U`.
///
/// Per row the draws are: the one-hot column (uniform over `cols`), then
/// `cols` uniform `[0, 1)` values which are normalized to form the row of `U`.
pub fn generate_stochastic_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<StochasticMatrix> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::config(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        let hot = rng.random_range(0..cols);
        let mut noise: Vec<f64> = (0..cols).map(|_| rng.random::<f64>()).collect();
        let total: f64 = noise.iter().sum();
        if total > 0.0 {
            noise.iter_mut().for_each(|u| *u /= total);
        } else {
            noise.iter_mut().for_each(|u| *u = 1.0 / cols as f64);
        }
        let row = noise
            .iter()
            .enumerate()
            .map(|(c, &u)| {
                let r = if c == hot { 1.0 } else { 0.0 };
                (1.0 - epsilon) * r + epsilon * u
            })
            .collect();
        out.push(row);
    }
    StochasticMatrix::from_rows(out)
}

/// The instance of round `t` (1-based) under the mixed schedule.
///
/// With probability `mu` a uniform draw; otherwise the block schedule
/// `min(N, floor(t / D) + 1)` converted to a 0-based index.
pub fn schedule_instance<R: Rng + ?Sized>(
    t: usize,
    n_instances: usize,
    delay: usize,
    mu: f64,
    rng: &mut R,
) -> usize {
    debug_assert!(t >= 1);
    let coin: f64 = rng.random();
    if coin < mu {
        return rng.random_range(0..n_instances);
    }
    block_instance(t, n_instances, delay)
}

/// `min(N, floor(t / D) + 1) - 1`; a zero delay puts every round in the last block.
pub fn block_instance(t: usize, n_instances: usize, delay: usize) -> usize {
    let block = t.checked_div(delay).map_or(n_instances, |b| b + 1);
    block.min(n_instances) - 1
}

/// A generated task: ground truth plus schedule and dilution parameters.
#[derive(Debug, Clone)]
pub struct FactoredTask {
    pub params: TaskParams,
    /// Instances x proxies.
    pub proxy_matrix: StochasticMatrix,
    /// Proxies x outcomes.
    pub outcome_matrix: StochasticMatrix,
    proxy_samplers: Vec<WeightedIndex<f64>>,
    outcome_samplers: Vec<WeightedIndex<f64>>,
}

/// One sampled round, with both the true and the observed proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledRound {
    pub instance: usize,
    pub true_proxy: usize,
    pub observed_proxy: usize,
    pub outcome: usize,
}

fn samplers(m: &StochasticMatrix) -> Result<Vec<WeightedIndex<f64>>> {
    m.iter_rows()
        .map(|row| {
            WeightedIndex::new(row.iter().copied())
                .map_err(|e| Error::config(format!("bad sampling weights: {e}")))
        })
        .collect()
}

impl FactoredTask {
    pub fn new(params: TaskParams, proxy_matrix: StochasticMatrix, outcome_matrix: StochasticMatrix) -> Result<Self> {
        params.validate()?;
        if proxy_matrix.rows() != params.n_instances
            || proxy_matrix.cols() != params.n_proxies
            || outcome_matrix.rows() != params.n_proxies
            || outcome_matrix.cols() != params.n_outcomes
        {
            return Err(Error::config("matrix shapes do not match the task alphabets"));
        }
        Ok(Self {
            proxy_samplers: samplers(&proxy_matrix)?,
            outcome_samplers: samplers(&outcome_matrix)?,
            params,
            proxy_matrix,
            outcome_matrix,
        })
    }

    /// Draws `H` then `G` from `rng`.
    pub fn draw<R: Rng + ?Sized>(params: TaskParams, rng: &mut R) -> Result<Self> {
        params.validate()?;
        let h = generate_stochastic_matrix(params.n_instances, params.n_proxies, params.epsilon, rng)?;
        let g = generate_stochastic_matrix(params.n_proxies, params.n_outcomes, params.epsilon, rng)?;
        Self::new(params, h, g)
    }

    pub fn spaces(&self) -> ProblemSpaces {
        self.params.spaces()
    }

    /// Samples round `t`: instance, true proxy from `H`, outcome from `G` given the
    /// true proxy, then the observed proxy (true with probability
    /// `useful_proxy_fraction`, otherwise uniform).
    pub fn sample_round<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> SampledRound {
        let p = &self.params;
        let instance = schedule_instance(t, p.n_instances, p.outcome_delay, p.mu, rng);
        let true_proxy = self.proxy_samplers[instance].sample(rng);
        let outcome = self.outcome_samplers[true_proxy].sample(rng);
        let useful: f64 = rng.random();
        let observed_proxy = if useful < p.useful_proxy_fraction {
            true_proxy
        } else {
            rng.random_range(0..p.n_proxies)
        };
        SampledRound {
            instance,
            true_proxy,
            observed_proxy,
            outcome,
        }
    }

    /// Pre-generates the whole stream of `params.horizon` rounds.
    pub fn generate_stream<R: Rng + ?Sized>(&self, rng: &mut R) -> EventStream {
        let mut events = Vec::with_capacity(self.params.horizon);
        let mut true_proxies = Vec::with_capacity(self.params.horizon);
        for t in 1..=self.params.horizon {
            let r = self.sample_round(t, rng);
            events.push(RoundEvent {
                round: t,
                instance: r.instance,
                proxy: r.observed_proxy,
                outcome: r.outcome,
            });
            true_proxies.push(r.true_proxy);
        }
        EventStream {
            spaces: self.spaces(),
            events,
            true_proxies: Some(true_proxies),
        }
    }
}

/// Draws a task and its stream from one seeded generator.
pub fn generate_task(params: TaskParams, seed: u64) -> Result<(FactoredTask, EventStream)> {
    generate_task_with(params, &mut substream(seed, 0))
}

pub fn generate_task_with<R: Rng + ?Sized>(params: TaskParams, rng: &mut R) -> Result<(FactoredTask, EventStream)> {
    let task = FactoredTask::draw(params, rng)?;
    let stream = task.generate_stream(rng);
    Ok((task, stream))
}

/// An immutable, fully materialized sequence of rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub spaces: ProblemSpaces,
    /// `proxy` holds the proxy shown to the forecaster.
    pub events: Vec<RoundEvent>,
    /// The proxy that drove each outcome, when known.
    pub true_proxies: Option<Vec<usize>>,
}

impl EventStream {
    pub fn horizon(&self) -> usize {
        self.events.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.spaces.validate()?;
        for e in &self.events {
            self.spaces.check_event(e)?;
        }
        if let Some(tp) = &self.true_proxies {
            if tp.len() != self.events.len() {
                return Err(Error::usage("true proxy list length differs from stream length"));
            }
        }
        Ok(())
    }
}

/// An external event log in the replay format:
///
/// ```text
/// #spaces N Z Y Dz D
/// round,instance,proxy,outcome
/// ...
/// ```
///
/// ASCII, LF line endings, base-10 integers, rounds strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayLog {
    pub spaces: ProblemSpaces,
    pub events: Vec<RoundEvent>,
}

impl ReplayLog {
    /// The log as a stream; the `i`-th row plays round `i + 1`.
    pub fn to_stream(&self) -> EventStream {
        EventStream {
            spaces: self.spaces,
            events: self
                .events
                .iter()
                .enumerate()
                .map(|(i, e)| RoundEvent { round: i + 1, ..*e })
                .collect(),
            true_proxies: None,
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| err(1, "missing #spaces header".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.first() != Some(&"#spaces") || fields.len() != 6 {
            return Err(err(1, format!("expected '#spaces N Z Y Dz D', got '{header}'")));
        }
        let mut dims = [0usize; 5];
        for (d, f) in dims.iter_mut().zip(&fields[1..]) {
            *d = f
                .parse()
                .map_err(|_| err(1, format!("'{f}' is not a non-negative integer")))?;
        }
        let spaces = ProblemSpaces::new(dims[0], dims[1], dims[2], dims[3], dims[4])
            .map_err(|e| err(1, e.to_string()))?;

        let mut events = Vec::new();
        let mut last_round = 0usize;
        for (line_no, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(err(line_no, format!("expected 4 fields, found {}", cols.len())));
            }
            let mut vals = [0usize; 4];
            for (v, c) in vals.iter_mut().zip(&cols) {
                *v = c
                    .parse()
                    .map_err(|_| err(line_no, format!("'{c}' is not a non-negative integer")))?;
            }
            let [round, instance, proxy, outcome] = vals;
            if round <= last_round {
                return Err(err(
                    line_no,
                    format!("round {round} does not increase over previous round {last_round}"),
                ));
            }
            let event = RoundEvent {
                round,
                instance,
                proxy,
                outcome,
            };
            spaces
                .check_event(&event)
                .map_err(|e| err(line_no, e.to_string()))?;
            last_round = round;
            events.push(event);
        }
        Ok(Self { spaces, events })
    }

    pub fn render(&self) -> String {
        let s = &self.spaces;
        let mut out = format!(
            "#spaces {} {} {} {} {}\n",
            s.n_instances, s.n_proxies, s.n_outcomes, s.proxy_delay, s.outcome_delay
        );
        for e in &self.events {
            out.push_str(&format!("{},{},{},{}\n", e.round, e.instance, e.proxy, e.outcome));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.render().as_bytes())
    }
}

impl From<&EventStream> for ReplayLog {
    fn from(stream: &EventStream) -> Self {
        Self {
            spaces: stream.spaces,
            events: stream.events.clone(),
        }
    }
}

pub fn load_replay_log(path: &Path) -> Result<ReplayLog> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ReplayLog::parse(&text, path)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: PathBuf::from(path),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

/// Writes a matrix as CSV, one row per line.
pub fn write_matrix_csv(path: &Path, m: &StochasticMatrix) -> Result<()> {
    let mut out = String::new();
    for row in m.iter_rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}
