//! Reference computations shared by the integration tests and the acceptance suite.
#![allow(dead_code, clippy::needless_range_loop)]

use proxy_forecast::domain::ProbVector;
use proxy_forecast::environment::EventStream;
use proxy_forecast::error::Result;
use proxy_forecast::neural::{Mlp, NeuralForecaster};
use proxy_forecast::tabular::Forecaster;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn ref_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Layer-by-layer forward pass written against the raw weights. Returns the
/// logits and every hidden pre-activation.
pub fn ref_forward(net: &Mlp, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut a = input.to_vec();
    let mut pre_acts = Vec::new();
    let n = net.layers().len();
    for (i, layer) in net.layers().iter().enumerate() {
        let mut z = vec![0.0; layer.outputs];
        for o in 0..layer.outputs {
            let mut s = layer.bias.as_ref().map_or(0.0, |b| b[o]);
            for c in 0..layer.inputs {
                s += layer.weights[o * layer.inputs + c] * a[c];
            }
            z[o] = s;
        }
        if i + 1 < n {
            pre_acts.extend_from_slice(&z);
            a = z.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect();
        } else {
            a = z;
        }
    }
    (a, pre_acts)
}

/// Mean cross-entropy of `offset + logits` plus `l2 / 2` times the squared weight norm.
pub fn ref_objective(net: &Mlp, batch: &[(Vec<f64>, usize)], offsets: Option<&[Vec<f64>]>) -> f64 {
    let mut loss = 0.0;
    for (k, (x, y)) in batch.iter().enumerate() {
        let (mut logits, _) = ref_forward(net, x);
        if let Some(off) = offsets {
            for (l, o) in logits.iter_mut().zip(&off[k]) {
                *l += o;
            }
        }
        loss -= ref_softmax(&logits)[*y].ln();
    }
    loss /= batch.len() as f64;
    let sq: f64 = net.layers().iter().flat_map(|l| l.weights.iter()).map(|w| w * w).sum();
    loss + 0.5 * net.l2_scale * sq
}

/// One tower configuration checked by finite differences.
#[derive(Debug, Clone)]
pub struct TowerShape {
    pub name: &'static str,
    pub sizes: Vec<usize>,
    pub bias: bool,
    pub l2: f64,
    /// Inputs are one-hot over this many leading entries; the rest are real-valued.
    pub one_hot_blocks: Vec<usize>,
    /// Constant logit offsets as in the residual loss.
    pub offsets: bool,
}

/// Towers of both neural presets for the appendix task (10 instances, 4 proxies, 5 outcomes).
pub fn tower_shapes() -> Vec<TowerShape> {
    let (n, z, y) = (10, 4, 5);
    let mut shapes = Vec::new();
    for (h1, h2) in [(40, 20), (20, 10)] {
        shapes.push(TowerShape {
            name: if h1 == 40 { "direct 10-40-20-5" } else { "direct 10-20-10-5" },
            sizes: vec![n, h1, h2, y],
            bias: true,
            l2: 0.01,
            one_hot_blocks: vec![n],
            offsets: false,
        });
        shapes.push(TowerShape {
            name: if h1 == 40 { "proxy 10-40-20-4" } else { "proxy 10-20-10-4" },
            sizes: vec![n, h1, h2, z],
            bias: true,
            l2: 0.01,
            one_hot_blocks: vec![n],
            offsets: false,
        });
        shapes.push(TowerShape {
            name: if h1 == 40 { "residual 19-40-20-5" } else { "residual 19-20-10-5" },
            sizes: vec![n + z + y, h1, h2, y],
            bias: true,
            l2: 0.01,
            one_hot_blocks: vec![n, z],
            offsets: true,
        });
    }
    shapes.push(TowerShape {
        name: "feedback 4-5 (no bias, no l2)",
        sizes: vec![z, y],
        bias: false,
        l2: 0.0,
        one_hot_blocks: vec![z],
        offsets: false,
    });
    shapes
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_BATCH: usize = 4;
/// Samples with a hidden pre-activation closer than this to the ReLU kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

fn draw_input(shape: &TowerShape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = Vec::with_capacity(shape.sizes[0]);
    for &block in &shape.one_hot_blocks {
        let k = rng.random_range(0..block);
        x.extend((0..block).map(|i| if i == k { 1.0 } else { 0.0 }));
    }
    while x.len() < shape.sizes[0] {
        x.push(rng.random_range(-3.0..3.0));
    }
    x
}

/// Worst `|a - n| / max(|a| + |n|, 1e-12)` (vector norms) over `draws` random
/// networks and batches. Returns the worst error and the number of redrawn samples.
pub fn gradient_check(shape: &TowerShape, draws: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut redraws = 0;
    for _ in 0..draws {
        let net0 = Mlp::new(&shape.sizes, shape.bias, shape.l2, 0.1, &mut rng).unwrap();
        // Non-zero biases so their gradients are exercised away from the initial point.
        let mut params = net0.params();
        for p in params.iter_mut() {
            *p += rng.random_range(-0.2..0.2);
        }
        let mut net = net0.clone();
        net.set_params(&params).unwrap();

        let out = *shape.sizes.last().unwrap();
        let mut batch = Vec::new();
        let mut offsets = Vec::new();
        while batch.len() < FD_BATCH {
            let x = draw_input(shape, &mut rng);
            let (_, pre) = ref_forward(&net, &x);
            if pre.iter().any(|v| v.abs() < KINK_MARGIN) {
                redraws += 1;
                continue;
            }
            batch.push((x, rng.random_range(0..out)));
            offsets.push((0..out).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>());
        }
        let off = shape.offsets.then_some(offsets.as_slice());

        let (_, grads) = net.loss_and_gradients(&batch, off).unwrap();
        let analytic = grads.flatten();
        let mut numeric = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] = params[i] + FD_STEP;
            net.set_params(&p).unwrap();
            let up = ref_objective(&net, &batch, off);
            p[i] = params[i] - FD_STEP;
            net.set_params(&p).unwrap();
            let down = ref_objective(&net, &batch, off);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        net.set_params(&params).unwrap();
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / (na + nn).max(1e-12));
    }
    (worst, redraws)
}

/// `sum_z softmax(g(z))[y] softmax(h(x))[z]` evaluated from the raw towers,
/// including the residual correction when present.
pub fn neural_double_sum(f: &NeuralForecaster, x: usize) -> Vec<f64> {
    let s = f.config().spaces;
    let onehot = |n: usize, k: usize| (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let (h_logits, _) = ref_forward(f.proxy_tower().unwrap(), &onehot(s.n_instances, x));
    let h = ref_softmax(&h_logits);
    let mut p = vec![0.0; s.n_outcomes];
    for y in 0..s.n_outcomes {
        for z in 0..s.n_proxies {
            let (fb, _) = ref_forward(f.feedback_tower().unwrap(), &onehot(s.n_proxies, z));
            let logits = match f.residual_tower() {
                None => fb,
                Some(res) => {
                    let mut input = onehot(s.n_instances, x);
                    input.extend(onehot(s.n_proxies, z));
                    input.extend_from_slice(&fb);
                    let (delta, _) = ref_forward(res, &input);
                    fb.iter().zip(&delta).map(|(a, b)| a + b).collect()
                }
            };
            p[y] += ref_softmax(&logits)[y] * h[z];
        }
    }
    p
}

/// Records every delivery together with the round at which it arrived.
#[derive(Debug, Default)]
pub struct RecordingForecaster {
    pub n_outcomes: usize,
    pub round: usize,
    pub proxies: Vec<(usize, usize, usize)>,
    pub outcomes: Vec<(usize, usize, usize, usize)>,
}

impl Forecaster for RecordingForecaster {
    fn name(&self) -> String {
        "recording".into()
    }

    fn predict(&self, _instance: usize) -> Result<ProbVector> {
        Ok(ProbVector::uniform(self.n_outcomes))
    }

    fn observe_proxy(&mut self, instance: usize, proxy: usize) -> Result<()> {
        self.proxies.push((self.round, instance, proxy));
        Ok(())
    }

    fn observe_outcome(&mut self, instance: usize, proxy: usize, outcome: usize) -> Result<()> {
        self.outcomes.push((self.round, instance, proxy, outcome));
        Ok(())
    }

    fn end_round(&mut self, round: usize) -> Result<()> {
        self.round = round + 1;
        Ok(())
    }

    fn reset(&mut self) {
        self.proxies.clear();
        self.outcomes.clear();
    }
}

/// Plays `stream` with a probe that checks, before each prediction, that the
/// forecaster has seen exactly the proxies of rounds `1..=t-1-D_z` and the
/// outcomes of rounds `1..=t-1-D`, in order. Returns the delivery counts or
/// a description of the first violation.
pub fn timeline_check(stream: &EventStream) -> std::result::Result<(usize, usize), String> {
    use proxy_forecast::harness::{run_trial_probed, Comparator};
    let s = stream.spaces;
    let mut f = RecordingForecaster {
        n_outcomes: s.n_outcomes,
        round: 1,
        ..Default::default()
    };
    let mut violation = None;
    let trace = run_trial_probed(&mut f, stream, &Comparator::Hindsight { alpha: 1e-6 }, |t, f| {
        if violation.is_some() {
            return;
        }
        let want_p = (t - 1).saturating_sub(s.proxy_delay);
        let want_o = (t - 1).saturating_sub(s.outcome_delay);
        if f.proxies.len() != want_p || f.outcomes.len() != want_o {
            violation = Some(format!(
                "round {t}: saw {} proxies and {} outcomes, expected {want_p} and {want_o}",
                f.proxies.len(),
                f.outcomes.len()
            ));
            return;
        }
        for (i, &(_, x, z)) in f.proxies.iter().enumerate() {
            let e = &stream.events[i];
            if (x, z) != (e.instance, e.proxy) {
                violation = Some(format!("round {t}: proxy #{i} does not match round {}", i + 1));
                return;
            }
        }
        for (i, &(_, x, z, y)) in f.outcomes.iter().enumerate() {
            let e = &stream.events[i];
            if (x, z, y) != (e.instance, e.proxy, e.outcome) {
                violation = Some(format!("round {t}: outcome #{i} does not match round {}", i + 1));
                return;
            }
        }
    })
    .map_err(|e| e.to_string())?;
    if let Some(v) = violation {
        return Err(v);
    }
    // Every item arrives exactly at the end of its reveal round.
    for (i, &(arrived, ..)) in f.proxies.iter().enumerate() {
        if arrived != i + 1 + s.proxy_delay {
            return Err(format!("proxy of round {} arrived at round {arrived}", i + 1));
        }
    }
    for (i, &(arrived, ..)) in f.outcomes.iter().enumerate() {
        if arrived != i + 1 + s.outcome_delay {
            return Err(format!("outcome of round {} arrived at round {arrived}", i + 1));
        }
    }
    Ok((trace.proxies_delivered, trace.outcomes_delivered))
}
