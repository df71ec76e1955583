//! Tabular forecasters: the direct forecaster (one estimator per instance),
//! the factored forecaster (instance-to-proxy and proxy-to-outcome
//! estimators mixed by a matrix product), and the ground-truth factored
//! predictor used as a comparator.

use crate::domain::{ProbVector, ProblemSpaces, StochasticMatrix};
use crate::error::{check_index, Error, Result};
use crate::estimators::{SmoothedCategoricalEstimator, Smoothing};

/// Common interface of every forecaster driven by the harness.
///
/// The harness calls `predict` once per round, then delivers the proxies and
/// outcomes whose delays expire at the end of that round, then calls
/// `end_round`. Each generated event is delivered exactly once.
pub trait Forecaster {
    fn name(&self) -> String;

    fn predict(&self, instance: usize) -> Result<ProbVector>;

    fn observe_proxy(&mut self, instance: usize, proxy: usize) -> Result<()>;

    /// `proxy` is the (observed) proxy of the round that generated the outcome.
    fn observe_outcome(&mut self, instance: usize, proxy: usize, outcome: usize) -> Result<()>;

    /// Called after all deliveries of round `round` (1-based).
    fn end_round(&mut self, _round: usize) -> Result<()> {
        Ok(())
    }

    fn reset(&mut self);
}

/// Access to the two factors of a factored predictor at the current state.
pub trait FactoredEstimates {
    /// Estimated probability of `proxy` given `instance`.
    fn proxy_prob(&self, instance: usize, proxy: usize) -> f64;
    /// Estimated probability of `outcome` given `proxy`.
    fn outcome_prob(&self, proxy: usize, outcome: usize) -> f64;
}

fn estimator_bank(n: usize, categories: usize, smoothing: Smoothing) -> Result<Vec<SmoothedCategoricalEstimator>> {
    (0..n)
        .map(|_| SmoothedCategoricalEstimator::with_smoothing(categories, smoothing))
        .collect()
}

/// One smoothed estimator over outcomes per instance; proxies are ignored.
#[derive(Debug, Clone)]
pub struct DirectForecaster {
    spaces: ProblemSpaces,
    smoothing: Smoothing,
    per_instance: Vec<SmoothedCategoricalEstimator>,
}

impl DirectForecaster {
    pub fn new(spaces: ProblemSpaces, smoothing: Smoothing) -> Result<Self> {
        Ok(Self {
            spaces,
            smoothing,
            per_instance: estimator_bank(spaces.n_instances, spaces.n_outcomes, smoothing)?,
        })
    }

    pub fn estimator(&self, instance: usize) -> &SmoothedCategoricalEstimator {
        &self.per_instance[instance]
    }
}

impl Forecaster for DirectForecaster {
    fn name(&self) -> String {
        match self.smoothing {
            Smoothing::Laplace => "tabular-df".into(),
            s => format!("tabular-df:{}", s.label()),
        }
    }

    fn predict(&self, instance: usize) -> Result<ProbVector> {
        check_index("instance", instance, self.spaces.n_instances)?;
        Ok(self.per_instance[instance].predict())
    }

    fn observe_proxy(&mut self, instance: usize, proxy: usize) -> Result<()> {
        check_index("instance", instance, self.spaces.n_instances)?;
        check_index("proxy", proxy, self.spaces.n_proxies)
    }

    fn observe_outcome(&mut self, instance: usize, proxy: usize, outcome: usize) -> Result<()> {
        check_index("instance", instance, self.spaces.n_instances)?;
        check_index("proxy", proxy, self.spaces.n_proxies)?;
        self.per_instance[instance].update(outcome)
    }

    fn reset(&mut self) {
        self.per_instance.iter_mut().for_each(SmoothedCategoricalEstimator::reset);
    }
}

/// Instance-to-proxy estimators `h(.|x)` and proxy-to-outcome estimators
/// `g(.|z)`, combined as `p(y|x) = sum_z g(y|z) h(z|x)`.
#[derive(Debug, Clone)]
pub struct FactoredForecaster {
    spaces: ProblemSpaces,
    smoothing: Smoothing,
    proxy_given_instance: Vec<SmoothedCategoricalEstimator>,
    outcome_given_proxy: Vec<SmoothedCategoricalEstimator>,
}

impl FactoredForecaster {
    pub fn new(spaces: ProblemSpaces, smoothing: Smoothing) -> Result<Self> {
        Ok(Self {
            spaces,
            smoothing,
            proxy_given_instance: estimator_bank(spaces.n_instances, spaces.n_proxies, smoothing)?,
            outcome_given_proxy: estimator_bank(spaces.n_proxies, spaces.n_outcomes, smoothing)?,
        })
    }

    pub fn proxy_estimator(&self, instance: usize) -> &SmoothedCategoricalEstimator {
        &self.proxy_given_instance[instance]
    }

    pub fn outcome_estimator(&self, proxy: usize) -> &SmoothedCategoricalEstimator {
        &self.outcome_given_proxy[proxy]
    }
}

/// `p(y) = sum_z g(y|z) h(z)` for a proxy distribution `h` and per-proxy outcome
/// distributions `g_row(z)`.
pub(crate) fn mix_rows<'a>(
    proxy_dist: &[f64],
    n_outcomes: usize,
    row: impl Fn(usize) -> &'a [f64],
) -> Vec<f64> {
    let mut out = vec![0.0; n_outcomes];
    for (z, &hz) in proxy_dist.iter().enumerate() {
        for (o, &g) in out.iter_mut().zip(row(z)) {
            *o += g * hz;
        }
    }
    out
}

impl Forecaster for FactoredForecaster {
    fn name(&self) -> String {
        match self.smoothing {
            Smoothing::Laplace => "tabular-ff".into(),
            s => format!("tabular-ff:{}", s.label()),
        }
    }

    fn predict(&self, instance: usize) -> Result<ProbVector> {
        check_index("instance", instance, self.spaces.n_instances)?;
        let h = self.proxy_given_instance[instance].predict();
        let rows: Vec<ProbVector> = self.outcome_given_proxy.iter().map(|g| g.predict()).collect();
        let mixed = mix_rows(h.as_slice(), self.spaces.n_outcomes, |z| rows[z].as_slice());
        Ok(ProbVector::from_normalized(mixed))
    }

    fn observe_proxy(&mut self, instance: usize, proxy: usize) -> Result<()> {
        check_index("instance", instance, self.spaces.n_instances)?;
        self.proxy_given_instance[instance].update(proxy)
    }

    fn observe_outcome(&mut self, instance: usize, proxy: usize, outcome: usize) -> Result<()> {
        check_index("instance", instance, self.spaces.n_instances)?;
        check_index("proxy", proxy, self.spaces.n_proxies)?;
        self.outcome_given_proxy[proxy].update(outcome)
    }

    fn reset(&mut self) {
        self.proxy_given_instance.iter_mut().for_each(SmoothedCategoricalEstimator::reset);
        self.outcome_given_proxy.iter_mut().for_each(SmoothedCategoricalEstimator::reset);
    }
}

impl FactoredEstimates for FactoredForecaster {
    fn proxy_prob(&self, instance: usize, proxy: usize) -> f64 {
        self.proxy_given_instance[instance].prob(proxy)
    }

    fn outcome_prob(&self, proxy: usize, outcome: usize) -> f64 {
        self.outcome_given_proxy[proxy].prob(outcome)
    }
}

/// The ground-truth factored predictor `p*(y|x) = sum_z G[z][y] H[x][z]`.
#[derive(Debug, Clone)]
pub struct OracleForecaster {
    proxy_matrix: StochasticMatrix,
    outcome_matrix: StochasticMatrix,
    table: Vec<ProbVector>,
}

impl OracleForecaster {
    /// `proxy_matrix` is instances x proxies, `outcome_matrix` is proxies x outcomes.
    pub fn new(proxy_matrix: StochasticMatrix, outcome_matrix: StochasticMatrix) -> Result<Self> {
        if proxy_matrix.cols() != outcome_matrix.rows() {
            return Err(Error::config(format!(
                "proxy matrix has {} columns but outcome matrix has {} rows",
                proxy_matrix.cols(),
                outcome_matrix.rows()
            )));
        }
        let table = proxy_matrix
            .iter_rows()
            .map(|h| {
                ProbVector::from_normalized(mix_rows(h, outcome_matrix.cols(), |z| {
                    outcome_matrix.row(z)
                }))
            })
            .collect();
        Ok(Self {
            proxy_matrix,
            outcome_matrix,
            table,
        })
    }

    pub fn true_prob(&self, instance: usize, outcome: usize) -> f64 {
        self.table[instance][outcome]
    }
}

impl Forecaster for OracleForecaster {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, instance: usize) -> Result<ProbVector> {
        check_index("instance", instance, self.table.len())?;
        Ok(self.table[instance].clone())
    }

    fn observe_proxy(&mut self, _instance: usize, _proxy: usize) -> Result<()> {
        Ok(())
    }

    fn observe_outcome(&mut self, _instance: usize, _proxy: usize, _outcome: usize) -> Result<()> {
        Ok(())
    }

    fn reset(&mut self) {}
}

impl FactoredEstimates for OracleForecaster {
    fn proxy_prob(&self, instance: usize, proxy: usize) -> f64 {
        self.proxy_matrix.get(instance, proxy)
    }

    fn outcome_prob(&self, proxy: usize, outcome: usize) -> f64 {
        self.outcome_matrix.get(proxy, outcome)
    }
}
