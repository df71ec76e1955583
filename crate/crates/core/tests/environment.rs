use proxy_forecast::environment::{generate_task, TaskParams};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Upper-tail p-value of Pearson's statistic for observed counts against expected probabilities.
fn pearson_p_value(tables: &[(Vec<u64>, Vec<f64>)]) -> f64 {
    let mut stat = 0.0;
    let mut dof = 0.0;
    for (observed, probs) in tables {
        let n: u64 = observed.iter().sum();
        if n == 0 {
            continue;
        }
        for (&o, &p) in observed.iter().zip(probs) {
            let e = p * n as f64;
            assert!(e > 5.0, "expected count {e} too small for the test");
            stat += (o as f64 - e).powi(2) / e;
        }
        dof += (observed.len() - 1) as f64;
    }
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

fn diluted_params() -> TaskParams {
    TaskParams {
        horizon: 60_000,
        epsilon: 0.6,
        mu: 1.0,
        useful_proxy_fraction: 0.5,
        ..TaskParams::appendix()
    }
}

#[test]
fn outcomes_follow_true_proxy_rows_of_g() {
    let (task, stream) = generate_task(diluted_params(), 11).unwrap();
    let truth = stream.true_proxies.as_ref().unwrap();
    let (nz, ny) = (task.params.n_proxies, task.params.n_outcomes);
    let mut counts = vec![vec![0u64; ny]; nz];
    for (e, &z) in stream.events.iter().zip(truth) {
        counts[z][e.outcome] += 1;
    }
    let tables: Vec<_> = (0..nz).map(|z| (counts[z].clone(), task.outcome_matrix.row(z).to_vec())).collect();
    let p = pearson_p_value(&tables);
    assert!(p > 1e-3, "p = {p}");
}

#[test]
fn true_proxies_follow_rows_of_h() {
    let (task, stream) = generate_task(diluted_params(), 12).unwrap();
    let truth = stream.true_proxies.as_ref().unwrap();
    let (nx, nz) = (task.params.n_instances, task.params.n_proxies);
    let mut counts = vec![vec![0u64; nz]; nx];
    for (e, &z) in stream.events.iter().zip(truth) {
        counts[e.instance][z] += 1;
    }
    let tables: Vec<_> = (0..nx).map(|x| (counts[x].clone(), task.proxy_matrix.row(x).to_vec())).collect();
    let p = pearson_p_value(&tables);
    assert!(p > 1e-3, "p = {p}");
}

#[test]
fn observed_proxy_is_mixture_of_truth_and_noise() {
    // P(observed = z | true = z') = f [z = z'] + (1 - f) / |Z|
    let (task, stream) = generate_task(diluted_params(), 13).unwrap();
    let truth = stream.true_proxies.as_ref().unwrap();
    let nz = task.params.n_proxies;
    let f = task.params.useful_proxy_fraction;
    let mut counts = vec![vec![0u64; nz]; nz];
    for (e, &z) in stream.events.iter().zip(truth) {
        counts[z][e.proxy] += 1;
    }
    let tables: Vec<_> = (0..nz)
        .map(|z| {
            let probs = (0..nz).map(|o| if o == z { f } else { 0.0 } + (1.0 - f) / nz as f64).collect();
            (counts[z].clone(), probs)
        })
        .collect();
    let p = pearson_p_value(&tables);
    assert!(p > 1e-3, "p = {p}");
}

#[test]
fn stream_is_reproducible_per_seed() {
    let a = generate_task(TaskParams::appendix(), 5).unwrap().1;
    let b = generate_task(TaskParams::appendix(), 5).unwrap().1;
    let c = generate_task(TaskParams::appendix(), 6).unwrap().1;
    assert_eq!(a.events, b.events);
    assert_ne!(a.events, c.events);
}
