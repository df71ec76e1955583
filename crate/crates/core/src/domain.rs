//! Shared domain types: alphabets and delays, probability vectors, round
//! events, row-stochastic matrices, and the delayed-revelation timeline.
//!
//! Indices are 0-based everywhere. Rounds keep the 1-based convention of
//! the game loop, so the event at array position `i` belongs to round `i + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{check_index, Error, Result};

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

/// Entries this far below zero are treated as rounding noise and clamped.
pub const NEGATIVE_CLAMP_TOLERANCE: f64 = 1e-12;

/// Loss charged when the realized outcome received zero probability.
pub const DEFAULT_LOSS_CAP: f64 = 50.0;

/// Finite alphabets and fixed delays of one forecasting problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSpaces {
    pub n_instances: usize,
    pub n_proxies: usize,
    pub n_outcomes: usize,
    /// Rounds between a prediction and the revelation of its proxy.
    pub proxy_delay: usize,
    /// Rounds between a prediction and the revelation of its outcome.
    pub outcome_delay: usize,
}

impl ProblemSpaces {
    pub fn new(
        n_instances: usize,
        n_proxies: usize,
        n_outcomes: usize,
        proxy_delay: usize,
        outcome_delay: usize,
    ) -> Result<Self> {
        let spaces = Self {
            n_instances,
            n_proxies,
            n_outcomes,
            proxy_delay,
            outcome_delay,
        };
        spaces.validate()?;
        Ok(spaces)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_instances == 0 {
            return Err(Error::config("need at least one instance"));
        }
        if self.n_proxies == 0 {
            return Err(Error::config("need at least one proxy symbol"));
        }
        if self.n_outcomes < 2 {
            return Err(Error::config("need at least two outcomes"));
        }
        if self.proxy_delay > self.outcome_delay {
            return Err(Error::config(format!(
                "proxy delay {} exceeds outcome delay {}",
                self.proxy_delay, self.outcome_delay
            )));
        }
        Ok(())
    }

    pub fn check_event(&self, event: &RoundEvent) -> Result<()> {
        check_index("instance", event.instance, self.n_instances)?;
        check_index("proxy", event.proxy, self.n_proxies)?;
        check_index("outcome", event.outcome, self.n_outcomes)
    }
}

/// A point of the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates raw probabilities, clamping tiny negative entries to zero.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::BadProbabilitySum {
                sum: 0.0,
                tolerance: PROB_SUM_TOLERANCE,
            });
        }
        for (position, &value) in raw.iter().enumerate() {
            if !value.is_finite() || value < -NEGATIVE_CLAMP_TOLERANCE {
                return Err(Error::BadProbabilityEntry { position, value });
            }
        }
        let sum: f64 = raw.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::BadProbabilitySum {
                sum,
                tolerance: PROB_SUM_TOLERANCE,
            });
        }
        if raw.iter().any(|&p| p < 0.0) {
            let clamped: Vec<f64> = raw.iter().map(|&p| p.max(0.0)).collect();
            let total: f64 = clamped.iter().sum();
            return Ok(Self(clamped.into_iter().map(|p| p / total).collect()));
        }
        Ok(Self(raw))
    }

    /// Wraps values already known to be a distribution (internal arithmetic).
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!(
            (probs.iter().sum::<f64>() - 1.0).abs() < 1e-6,
            "not normalized: {probs:?}"
        );
        Self(probs)
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[k] = 1.0;
        Self(probs)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn get(&self, k: usize) -> Option<f64> {
        self.0.get(k).copied()
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, k: usize) -> &f64 {
        &self.0[k]
    }
}

/// Convenience for [`ProbVector::new`].
pub fn validate_prob_vector(raw: &[f64]) -> Result<ProbVector> {
    ProbVector::new(raw.to_vec())
}

/// `-ln(prediction[outcome])`, capped at [`DEFAULT_LOSS_CAP`].
pub fn log_loss(prediction: &ProbVector, outcome: usize) -> Result<f64> {
    log_loss_capped(prediction, outcome, DEFAULT_LOSS_CAP)
}

pub fn log_loss_capped(prediction: &ProbVector, outcome: usize, cap: f64) -> Result<f64> {
    check_index("outcome", outcome, prediction.len())?;
    Ok(capped_neg_ln(prediction[outcome], cap))
}

pub(crate) fn capped_neg_ln(p: f64, cap: f64) -> f64 {
    if p <= 0.0 {
        cap
    } else {
        (-p.ln()).min(cap)
    }
}

/// One round of the game as generated before play starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundEvent {
    /// 1-based round index.
    pub round: usize,
    pub instance: usize,
    /// The proxy shown to the forecaster.
    pub proxy: usize,
    pub outcome: usize,
}

/// Which generated information is visible at which round, for fixed delays.
///
/// The proxy of round `s` is revealed at the end of round `s + proxy_delay`
/// and the outcome at the end of round `s + outcome_delay`.
#[derive(Debug, Clone, Copy)]
pub struct RevelationSchedule<'a> {
    events: &'a [RoundEvent],
    proxy_delay: usize,
    outcome_delay: usize,
}

impl<'a> RevelationSchedule<'a> {
    pub fn new(events: &'a [RoundEvent], proxy_delay: usize, outcome_delay: usize) -> Self {
        Self {
            events,
            proxy_delay,
            outcome_delay,
        }
    }

    pub fn horizon(&self) -> usize {
        self.events.len()
    }

    /// The instance revealed at the start of round `t`.
    pub fn instance_at(&self, t: usize) -> Option<usize> {
        self.event(t).map(|e| e.instance)
    }

    /// The event whose proxy is revealed at the end of round `t`.
    pub fn proxy_revealed_at(&self, t: usize) -> Option<&'a RoundEvent> {
        t.checked_sub(self.proxy_delay).and_then(|s| self.event(s))
    }

    /// The event whose outcome is revealed at the end of round `t`.
    pub fn outcome_revealed_at(&self, t: usize) -> Option<&'a RoundEvent> {
        t.checked_sub(self.outcome_delay).and_then(|s| self.event(s))
    }

    /// Whether the proxy generated at round `s` may inform the prediction at round `t`.
    pub fn proxy_visible(&self, s: usize, t: usize) -> bool {
        t > s + self.proxy_delay
    }

    /// Whether the outcome generated at round `s` may inform the prediction at round `t`.
    pub fn outcome_visible(&self, s: usize, t: usize) -> bool {
        t > s + self.outcome_delay
    }

    fn event(&self, t: usize) -> Option<&'a RoundEvent> {
        if t == 0 {
            None
        } else {
            self.events.get(t - 1)
        }
    }
}

/// A dense row-stochastic matrix, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl StochasticMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::config("stochastic matrix must be non-empty"));
        }
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::config(format!(
                    "row {r} has {} columns, expected {n_cols}",
                    row.len()
                )));
            }
            data.extend(ProbVector::new(row)?.into_vec());
        }
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols)
    }
}
