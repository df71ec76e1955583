//! Sequential additive-smoothing estimators for categorical data.
//!
//! After observing counts `n_a` over `n` symbols from an alphabet of size
//! `k`, the estimator assigns `(n_a + alpha) / (n + k * alpha)` to symbol
//! `a`. `alpha = 1` is the Laplace estimator and `alpha = 1/2` the
//! Krichevsky-Trofimov estimator.
//!
//! This module also evaluates the cumulative prediction drift of a bank of
//! such estimators under a fixed feedback delay, together with its
//! closed-form upper bound `D |X| |Y| ln((T - 1) / (alpha |X| |Y|) + 1)`.

use serde::{Deserialize, Serialize};

use crate::domain::ProbVector;
use crate::error::{check_index, Error, Result};

/// Smoothing presets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    #[default]
    Laplace,
    Kt,
    Custom(f64),
}

impl Smoothing {
    pub fn alpha(self) -> f64 {
        match self {
            Smoothing::Laplace => 1.0,
            Smoothing::Kt => 0.5,
            Smoothing::Custom(a) => a,
        }
    }

    pub fn label(self) -> String {
        match self {
            Smoothing::Laplace => "laplace".into(),
            Smoothing::Kt => "kt".into(),
            Smoothing::Custom(a) => format!("alpha={a}"),
        }
    }
}

impl std::str::FromStr for Smoothing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "laplace" => Ok(Smoothing::Laplace),
            "kt" => Ok(Smoothing::Kt),
            other => match other.strip_prefix("alpha=").map(str::parse::<f64>) {
                Some(Ok(a)) if a > 0.0 && a.is_finite() => Ok(Smoothing::Custom(a)),
                _ => Err(Error::config(format!("unknown estimator '{other}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedCategoricalEstimator {
    alpha: f64,
    counts: Vec<u64>,
    total: u64,
}

impl SmoothedCategoricalEstimator {
    pub fn new(n_categories: usize, alpha: f64) -> Result<Self> {
        if n_categories == 0 {
            return Err(Error::config("estimator needs at least one category"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("smoothing alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            alpha,
            counts: vec![0; n_categories],
            total: 0,
        })
    }

    pub fn with_smoothing(n_categories: usize, smoothing: Smoothing) -> Result<Self> {
        Self::new(n_categories, smoothing.alpha())
    }

    pub fn n_categories(&self) -> usize {
        self.counts.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Probability assigned to one category.
    #[inline]
    pub fn prob(&self, category: usize) -> f64 {
        (self.counts[category] as f64 + self.alpha) / self.denominator()
    }

    pub fn predict(&self) -> ProbVector {
        let denom = self.denominator();
        ProbVector::from_normalized(
            self.counts
                .iter()
                .map(|&c| (c as f64 + self.alpha) / denom)
                .collect(),
        )
    }

    pub fn update(&mut self, observed: usize) -> Result<()> {
        check_index("category", observed, self.counts.len())?;
        self.counts[observed] += 1;
        self.total += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.total = 0;
    }

    #[inline]
    fn denominator(&self) -> f64 {
        self.total as f64 + self.counts.len() as f64 * self.alpha
    }
}

/// Upper bound on the cumulative prediction drift of per-instance estimators.
pub fn drift_bound_rhs(
    n_instances: usize,
    n_outcomes: usize,
    alpha: f64,
    delay: usize,
    horizon: usize,
) -> f64 {
    let cells = (n_instances * n_outcomes) as f64;
    let rounds_before_last = horizon.saturating_sub(1) as f64;
    delay as f64 * cells * (rounds_before_last / (alpha * cells) + 1.0).ln()
}

/// Cumulative prediction drift `sum_s ln(p_s(y_s|x_s) / p_{s-D}(y_s|x_s))`.
///
/// `p_s` is the per-instance estimator trained on rounds `1..s`; for
/// `s - D <= 0` the delayed side uses the prior (no observations), which
/// is also what the estimator returns before its first update.
pub fn cumulative_drift(
    events: &[(usize, usize)],
    n_instances: usize,
    n_outcomes: usize,
    alpha: f64,
    delay: usize,
) -> Result<f64> {
    if events.is_empty() {
        return Err(Error::usage("drift needs at least one event"));
    }
    let bank = |_| SmoothedCategoricalEstimator::new(n_outcomes, alpha);
    let mut current: Vec<_> = (0..n_instances).map(bank).collect::<Result<_>>()?;
    let mut lagged: Vec<_> = (0..n_instances).map(bank).collect::<Result<_>>()?;

    let mut drift = 0.0;
    for (s, &(x, y)) in events.iter().enumerate() {
        check_index("instance", x, n_instances)?;
        check_index("outcome", y, n_outcomes)?;
        // `lagged` has absorbed rounds 1..s-D-1, i.e. it is the round s-D estimator.
        drift += (current[x].prob(y) / lagged[x].prob(y)).ln();
        current[x].update(y)?;
        if s + 1 > delay {
            let (lx, ly) = events[s - delay];
            lagged[lx].update(ly)?;
        }
    }
    Ok(drift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn closed_form(counts: &[u64], alpha: f64) -> Vec<f64> {
        let total: u64 = counts.iter().sum();
        counts
            .iter()
            .map(|&c| (c as f64 + alpha) / (total as f64 + counts.len() as f64 * alpha))
            .collect()
    }

    #[test]
    fn predict_examples() {
        let est = SmoothedCategoricalEstimator::new(2, 1.0).unwrap();
        assert_eq!(est.predict().as_slice(), &[0.5, 0.5]);

        let mut est = SmoothedCategoricalEstimator::new(2, 1.0).unwrap();
        est.update(0).unwrap();
        est.update(0).unwrap();
        assert_eq!(est.predict().as_slice(), &[0.75, 0.25]);

        let mut kt = SmoothedCategoricalEstimator::with_smoothing(2, Smoothing::Kt).unwrap();
        kt.update(0).unwrap();
        assert_eq!(kt.predict().as_slice(), &[0.75, 0.25]);
    }

    #[test]
    fn update_examples() {
        let mut est = SmoothedCategoricalEstimator::new(2, 1.0).unwrap();
        est.update(0).unwrap();
        assert_eq!(est.counts(), &[1, 0]);
        est.update(0).unwrap();
        est.update(1).unwrap();
        assert_eq!(est.counts(), &[2, 1]);
        assert_eq!(est.total(), 3);

        let mut est = SmoothedCategoricalEstimator::new(2, 1.0).unwrap();
        for _ in 0..5 {
            est.update(0).unwrap();
        }
        let p = est.predict();
        assert_abs_diff_eq!(p[0], 6.0 / 7.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / 7.0, epsilon = 1e-15);
    }

    #[test]
    fn update_rejects_out_of_range() {
        let mut est = SmoothedCategoricalEstimator::new(3, 1.0).unwrap();
        assert!(est.update(3).is_err());
        assert_eq!(est.total(), 0);
    }

    #[test]
    fn constructor_rejects_bad_alpha() {
        assert!(SmoothedCategoricalEstimator::new(2, 0.0).is_err());
        assert!(SmoothedCategoricalEstimator::new(2, f64::NAN).is_err());
        assert!(SmoothedCategoricalEstimator::new(0, 1.0).is_err());
    }

    #[test]
    fn smoothing_parses() {
        assert_eq!("laplace".parse::<Smoothing>().unwrap(), Smoothing::Laplace);
        assert_eq!("kt".parse::<Smoothing>().unwrap().alpha(), 0.5);
        assert_eq!("alpha=0.25".parse::<Smoothing>().unwrap().alpha(), 0.25);
        assert!("alpha=-1".parse::<Smoothing>().is_err());
        assert!("dirichlet".parse::<Smoothing>().is_err());
    }

    #[test]
    fn drift_bound_examples() {
        assert_abs_diff_eq!(drift_bound_rhs(1, 2, 1.0, 2, 5), 4.0 * 3f64.ln(), epsilon = 1e-12);
        assert_eq!(drift_bound_rhs(7, 3, 0.5, 0, 100), 0.0);
        assert_eq!(drift_bound_rhs(1, 1, 1.0, 3, 1), 0.0);
    }

    #[test]
    fn drift_trivial_cases() {
        let events = [(0, 1), (1, 0), (0, 0), (0, 1)];
        assert_eq!(cumulative_drift(&events, 2, 2, 1.0, 0).unwrap(), 0.0);
        assert_eq!(cumulative_drift(&[(0, 1)], 2, 2, 1.0, 5).unwrap(), 0.0);
        assert!(cumulative_drift(&[], 2, 2, 1.0, 1).is_err());
    }

    #[test]
    fn drift_matches_brute_force_replay() {
        // Three identical events, |X|=1, |Y|=2, alpha=1, D=1.
        // Non-delayed p_s(0): 1/2, 2/3, 3/4. Delayed p_{s-1}(0): prior 1/2, p_1 = 1/2, p_2 = 2/3.
        let expected = (0.5f64 / 0.5).ln() + ((2.0 / 3.0) / 0.5f64).ln() + (0.75 / (2.0 / 3.0f64)).ln();
        let got = cumulative_drift(&[(0, 0), (0, 0), (0, 0)], 1, 2, 1.0, 1).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(got, (1.5f64).ln(), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn predict_matches_closed_form(
            k in 1usize..8,
            kt in any::<bool>(),
            seq in proptest::collection::vec(0usize..8, 0..200),
        ) {
            let alpha = if kt { 0.5 } else { 1.0 };
            let mut est = SmoothedCategoricalEstimator::new(k, alpha).unwrap();
            for &a in seq.iter().filter(|&&a| a < k) {
                est.update(a).unwrap();
                let expected = closed_form(est.counts(), alpha);
                for (p, e) in est.predict().as_slice().iter().zip(&expected) {
                    prop_assert!((p - e).abs() <= 1e-12);
                    prop_assert!(*p > 0.0);
                }
            }
            prop_assert_eq!(est.total(), est.counts().iter().sum::<u64>());
        }

        #[test]
        fn predict_is_order_invariant(
            mut seq in proptest::collection::vec(0usize..4, 0..60),
        ) {
            let mut a = SmoothedCategoricalEstimator::new(4, 0.5).unwrap();
            seq.iter().for_each(|&s| a.update(s).unwrap());
            seq.reverse();
            let mut b = SmoothedCategoricalEstimator::new(4, 0.5).unwrap();
            seq.iter().for_each(|&s| b.update(s).unwrap());
            prop_assert_eq!(a.predict(), b.predict());
        }
    }
}
