mod common;

use common::timeline_check;
use proptest::prelude::*;
use proxy_forecast::domain::{ProblemSpaces, RoundEvent};
use proxy_forecast::environment::{generate_task, EventStream, TaskParams};
use proxy_forecast::estimators::Smoothing;
use proxy_forecast::harness::*;

fn unique_stream(horizon: usize, proxy_delay: usize, outcome_delay: usize) -> EventStream {
    // One instance per round, so every delivery identifies its round.
    let spaces = ProblemSpaces::new(horizon, 3, 4, proxy_delay, outcome_delay).unwrap();
    EventStream {
        spaces,
        events: (0..horizon)
            .map(|i| RoundEvent { round: i + 1, instance: i, proxy: i % 3, outcome: (i * 7) % 4 })
            .collect(),
        true_proxies: None,
    }
}

proptest! {
    #[test]
    fn nothing_is_seen_early_and_everything_once(
        horizon in 1usize..120,
        dz in 0usize..40,
        extra in 0usize..60,
    ) {
        let stream = unique_stream(horizon, dz, dz + extra);
        let (p, o) = timeline_check(&stream).map_err(TestCaseError::fail)?;
        prop_assert_eq!(p, horizon.saturating_sub(dz));
        prop_assert_eq!(o, horizon.saturating_sub(dz + extra));
    }
}

#[test]
fn appendix_stream_timeline() {
    let params = TaskParams { proxy_delay: 20, mu: 0.3, ..TaskParams::appendix() };
    let (_, stream) = generate_task(params, 21).unwrap();
    assert_eq!(timeline_check(&stream), Ok((980, 900)));
}

fn base(trials: usize, jobs: usize) -> ExperimentConfig {
    ExperimentConfig {
        source: TaskSource::Synthetic(TaskParams { mu: 0.0, ..TaskParams::appendix() }),
        forecasters: vec![
            ForecasterSpec::tabular(ForecasterKind::TabularDf, Smoothing::Laplace),
            ForecasterSpec::tabular(ForecasterKind::TabularFf, Smoothing::Laplace),
        ],
        n_trials: trials,
        comparator: ComparatorSpec::TrueModel,
        seed: 3,
        jobs,
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut a = base(12, 1);
    a.forecasters.push(ForecasterSpec::parse("nn-rff").unwrap());
    let b = ExperimentConfig { jobs: 4, ..a.clone() };
    assert_eq!(run_experiment(&a).unwrap(), run_experiment(&b).unwrap());
}

#[test]
fn factored_beats_direct_on_block_schedule() {
    let r = run_experiment(&base(40, 0)).unwrap();
    let df = r.get("tabular-df").unwrap();
    let ff = r.get("tabular-ff").unwrap();
    assert!(ff.final_mean_regret() + ff.final_ci95() < df.final_mean_regret() - df.final_ci95());
}

#[test]
fn mu_sweep_row_count() {
    let mut c = base(2, 0);
    c.forecasters.push(ForecasterSpec::tabular(ForecasterKind::TabularFf, Smoothing::Kt));
    let rows = mu_sweep(&c, &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
    assert_eq!(rows.len(), 15);
    assert!(mu_sweep(&c, &[]).is_err());
}

#[test]
fn delay_sweep_scales_horizon() {
    let rows = delay_sweep(&base(3, 0), &[5, 10], Some(4)).unwrap();
    assert_eq!(rows.len(), 4);
    let fit = SlopeFit::fit(&sweep_points(&rows, "tabular-df")).unwrap();
    assert!(fit.slope > 0.0);
}

#[test]
fn decomposition_holds_on_degenerate_task() {
    let params = TaskParams { epsilon: 0.0, mu: 0.0, ..TaskParams::appendix() };
    let report = decomposition_check(params, DecomposedForecaster::Tabular(Smoothing::Laplace), 20, 8, 0).unwrap();
    assert!(report.holds());
    let oracle = decomposition_check(params, DecomposedForecaster::Oracle, 5, 8, 0).unwrap();
    assert!(oracle.lhs.iter().all(|&v| v == 0.0));
    assert!(oracle.rhs_per_trial().iter().all(|&v| v == 0.0));
}

#[test]
fn replay_requires_a_comparator_it_can_compute() {
    let (_, stream) = generate_task(TaskParams { horizon: 50, ..TaskParams::appendix() }, 1).unwrap();
    let mut c = base(1, 1);
    c.source = TaskSource::Replay(stream);
    assert!(run_experiment(&c).is_err());
    c.comparator = ComparatorSpec::External(vec![0.0; 49]);
    assert!(run_experiment(&c).is_err());
    c.comparator = ComparatorSpec::External(vec![0.0; 50]);
    assert_eq!(run_experiment(&c).unwrap().horizon, 50);
    c.comparator = ComparatorSpec::Hindsight;
    assert!(run_experiment(&c).is_ok());
}
