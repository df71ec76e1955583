//! Small fully connected networks trained by plain SGD, and the three
//! neural forecasters built from them.
//!
//! * Direct: one tower `x -> logits(y)`.
//! * Factored: a proxy tower `x -> logits(z)` and a feedback tower
//!   `z -> logits(y)` mixed as `p(y|x) = sum_z softmax_g(z)[y] softmax_h(x)[z]`.
//! * Residual factored: as factored, but each per-proxy outcome
//!   distribution is `softmax(fb(z) + delta(x, z, fb(z)))`, where the
//!   residual tower sees the feedback logits through a stop-gradient.
//!
//! Hidden layers use ReLU, outputs are raw logits. Weights start uniform in
//! `±1/sqrt(fan_in)`, biases at zero. L2 applies to weight matrices only.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ProbVector, ProblemSpaces};
use crate::error::{check_index, Error, Result};
use crate::tabular::{mix_rows, Forecaster};

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln softmax(logits)[target]`, computed stably.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

pub fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// A dense layer `out = W in + b` with `W` stored row-major (`outputs x inputs`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        if weights.len() != inputs * outputs {
            return Err(Error::config(format!(
                "dense layer {inputs}->{outputs} needs {} weights, got {}",
                inputs * outputs,
                weights.len()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != outputs) {
            return Err(Error::config("bias length must equal layer outputs"));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let dot: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
                dot + self.bias.as_ref().map_or(0.0, |b| b[o])
            })
            .collect()
    }
}

/// Parameter gradients with the same layout as an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Flattened in parameter order: per layer, weights then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            if let Some(b) = b {
                out.extend_from_slice(b);
            }
        }
        out
    }
}

/// A feed-forward network with ReLU hidden layers and linear (logit) output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    pub l2_scale: f64,
    pub learning_rate: f64,
}

impl Mlp {
    /// Randomly initialized network over `sizes = [input, hidden..., output]`.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        bias: bool,
        l2_scale: f64,
        learning_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(sizes, bias, l2_scale, learning_rate, |fan_in| {
            let limit = 1.0 / (fan_in as f64).sqrt();
            rng.random_range(-limit..=limit)
        })
    }

    /// All weights and biases zero: every input maps to zero logits.
    pub fn zeros(sizes: &[usize], bias: bool, l2_scale: f64, learning_rate: f64) -> Result<Self> {
        Self::build(sizes, bias, l2_scale, learning_rate, |_| 0.0)
    }

    fn build(
        sizes: &[usize],
        bias: bool,
        l2_scale: f64,
        learning_rate: f64,
        mut init: impl FnMut(usize) -> f64,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let weights = (0..w[0] * w[1]).map(|_| init(w[0])).collect();
                Dense::new(w[0], w[1], weights, bias.then(|| vec![0.0; w[1]]))
            })
            .collect::<Result<_>>()?;
        Self::from_layers(layers, l2_scale, learning_rate)
    }

    pub fn from_layers(layers: Vec<Dense>, l2_scale: f64, learning_rate: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        if layers.windows(2).any(|w| w[0].outputs != w[1].inputs) {
            return Err(Error::config("consecutive layer widths do not match"));
        }
        if !(l2_scale >= 0.0 && learning_rate > 0.0) {
            return Err(Error::config("need l2_scale >= 0 and learning_rate > 0"));
        }
        Ok(Self {
            layers,
            l2_scale,
            learning_rate,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        Ok(self.activations(input).pop().expect("non-empty"))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::usage(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    /// Outputs of every layer, starting with the input itself.
    fn activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.apply(acts.last().expect("non-empty"));
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    fn zero_gradients(&self) -> Gradients {
        Gradients {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: self
                .layers
                .iter()
                .map(|l| l.bias.as_ref().map(|b| vec![0.0; b.len()]))
                .collect(),
        }
    }

    /// Accumulates `scale * d(output)/d(params) . d_output` into `grads`.
    fn backward(&self, acts: &[Vec<f64>], d_output: &[f64], scale: f64, grads: &mut Gradients) {
        let mut delta: Vec<f64> = d_output.iter().map(|d| d * scale).collect();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[i];
            let gw = &mut grads.weights[i];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
            }
            if let Some(gb) = grads.biases[i].as_mut() {
                gb.iter_mut().zip(&delta).for_each(|(g, d)| *g += d);
            }
            if i == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
            }
            // ReLU derivative, taken from the post-activation value.
            for (p, &a) in prev.iter_mut().zip(&acts[i]) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }

    /// Mean softmax cross-entropy of `offset + forward(input)` over the batch and
    /// the gradient of `mean loss + l2_scale * 0.5 * |W|^2` with respect to this
    /// network's parameters. Offsets are constants (no gradient flows into them).
    pub fn loss_and_gradients(
        &self,
        batch: &[(Vec<f64>, usize)],
        offsets: Option<&[Vec<f64>]>,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::usage("empty training batch"));
        }
        if offsets.is_some_and(|o| o.len() != batch.len()) {
            return Err(Error::usage("offsets must match the batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads = self.zero_gradients();
        let mut loss = 0.0;
        for (k, (input, target)) in batch.iter().enumerate() {
            self.check_input(input)?;
            check_index("target", *target, self.output_dim())?;
            let acts = self.activations(input);
            let mut logits = acts.last().expect("non-empty").clone();
            if let Some(off) = offsets {
                logits.iter_mut().zip(&off[k]).for_each(|(l, o)| *l += o);
            }
            loss += softmax_cross_entropy(&logits, *target);
            let mut d = softmax(&logits);
            d[*target] -= 1.0;
            self.backward(&acts, &d, scale, &mut grads);
        }
        if self.l2_scale > 0.0 {
            for (g, layer) in grads.weights.iter_mut().zip(&self.layers) {
                g.iter_mut().zip(&layer.weights).for_each(|(g, w)| *g += self.l2_scale * w);
            }
        }
        Ok((loss * scale, grads))
    }

    pub fn apply_gradients(&mut self, grads: &Gradients) {
        let lr = self.learning_rate;
        for ((layer, gw), gb) in self.layers.iter_mut().zip(&grads.weights).zip(&grads.biases) {
            layer.weights.iter_mut().zip(gw).for_each(|(w, g)| *w -= lr * g);
            if let (Some(b), Some(gb)) = (layer.bias.as_mut(), gb) {
                b.iter_mut().zip(gb).for_each(|(b, g)| *b -= lr * g);
            }
        }
    }

    /// One SGD step on the batch; returns the pre-step mean log-loss.
    pub fn sgd_step(&mut self, batch: &[(Vec<f64>, usize)]) -> Result<f64> {
        self.sgd_step_with_offsets(batch, None)
    }

    pub fn sgd_step_with_offsets(&mut self, batch: &[(Vec<f64>, usize)], offsets: Option<&[Vec<f64>]>) -> Result<f64> {
        let (loss, grads) = self.loss_and_gradients(batch, offsets)?;
        self.apply_gradients(&grads);
        Ok(loss)
    }

    /// Flattened parameters in the order of [`Gradients::flatten`].
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.params().len() {
            return Err(Error::usage("parameter vector has the wrong length"));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().expect("length checked"));
            if let Some(b) = l.bias.as_mut() {
                b.iter_mut().for_each(|v| *v = it.next().expect("length checked"));
            }
        }
        Ok(())
    }

    /// `layer,kind,row,col,value` lines, `kind` being `w` or `b`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,row,col,value\n");
        for (i, l) in self.layers.iter().enumerate() {
            for o in 0..l.outputs {
                for c in 0..l.inputs {
                    out.push_str(&format!("{i},w,{o},{c},{}\n", l.weights[o * l.inputs + c]));
                }
            }
            if let Some(b) = &l.bias {
                for (o, v) in b.iter().enumerate() {
                    out.push_str(&format!("{i},b,{o},0,{v}\n"));
                }
            }
        }
        out
    }
}

/// Fixed-capacity FIFO of training samples with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    min_fill: usize,
    batch_size: usize,
    items: VecDeque<T>,
}

impl<T: Clone> ReplayBuffer<T> {
    pub fn new(capacity: usize, min_fill: usize, batch_size: usize) -> Result<Self> {
        if capacity == 0 || min_fill == 0 || batch_size == 0 {
            return Err(Error::config("buffer capacity, min_fill and batch size must be positive"));
        }
        if min_fill > capacity {
            return Err(Error::config(format!(
                "min_fill {min_fill} can never be reached with capacity {capacity}"
            )));
        }
        Ok(Self {
            capacity,
            min_fill,
            batch_size,
            items: VecDeque::with_capacity(capacity),
        })
    }

    /// Appends, evicting the oldest element when full.
    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_ready(&self) -> bool {
        self.items.len() >= self.min_fill
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `batch_size` draws, uniform with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..self.batch_size)
            .map(|_| self.items[rng.random_range(0..self.items.len())].clone())
            .collect()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainCadence {
    pub steps_per_trigger: usize,
    pub trigger_every_rounds: usize,
}

impl TrainCadence {
    pub fn fires(&self, round: usize) -> bool {
        round.is_multiple_of(self.trigger_every_rounds)
    }
}

/// Hyperparameters shared by every neural architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralSettings {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Learning rate of the proxy-to-outcome (feedback) tower.
    pub feedback_learning_rate: f64,
    pub l2_scale: f64,
    pub buffer_capacity: usize,
    pub min_fill: usize,
    pub batch_size: usize,
    pub cadence: TrainCadence,
}

impl NeuralSettings {
    /// Towers 40/20, feedback lr 1, buffer 1000, start at 128, one step of 128 every 4 rounds.
    pub fn github() -> Self {
        Self {
            hidden: vec![40, 20],
            learning_rate: 0.1,
            feedback_learning_rate: 1.0,
            l2_scale: 0.01,
            buffer_capacity: 1000,
            min_fill: 128,
            batch_size: 128,
            cadence: TrainCadence {
                steps_per_trigger: 1,
                trigger_every_rounds: 4,
            },
        }
    }

    /// Towers 20/10, feedback lr 0.1, buffer 3000, start at 500, 20 steps of 128 every 1000 rounds.
    pub fn marketplace() -> Self {
        Self {
            hidden: vec![20, 10],
            learning_rate: 0.1,
            feedback_learning_rate: 0.1,
            l2_scale: 0.01,
            buffer_capacity: 3000,
            min_fill: 500,
            batch_size: 128,
            cadence: TrainCadence {
                steps_per_trigger: 20,
                trigger_every_rounds: 1000,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "github" => Ok(Self::github()),
            "marketplace" => Ok(Self::marketplace()),
            other => Err(Error::config(format!("unknown neural preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer sizes must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.feedback_learning_rate > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.l2_scale.is_nan() || self.l2_scale < 0.0 {
            return Err(Error::config("l2 scale must be non-negative"));
        }
        if self.cadence.steps_per_trigger == 0 || self.cadence.trigger_every_rounds == 0 {
            return Err(Error::config("training cadence values must be at least 1"));
        }
        ReplayBuffer::<()>::new(self.buffer_capacity, self.min_fill, self.batch_size).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    Direct,
    Factored,
    ResidualFactored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralForecasterConfig {
    pub architecture: Architecture,
    pub spaces: ProblemSpaces,
    pub settings: NeuralSettings,
    pub seed: u64,
}

impl NeuralForecasterConfig {
    fn tower_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(&self.settings.hidden);
        sizes.push(output);
        sizes
    }

    /// Input width of the residual tower: instance one-hot, proxy one-hot, feedback logits.
    pub fn residual_input_dim(&self) -> usize {
        self.spaces.n_instances + self.spaces.n_proxies + self.spaces.n_outcomes
    }
}

/// Number of SGD steps taken per tower.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepCounts {
    pub direct: usize,
    pub proxy: usize,
    pub feedback: usize,
    pub residual: usize,
}

/// A neural forecaster (direct, factored, or residual factored).
#[derive(Debug, Clone)]
pub struct NeuralForecaster {
    config: NeuralForecasterConfig,
    name: String,
    direct: Option<Mlp>,
    proxy_tower: Option<Mlp>,
    feedback: Option<Mlp>,
    residual: Option<Mlp>,
    proxy_buffer: ReplayBuffer<(usize, usize)>,
    outcome_buffer: ReplayBuffer<(usize, usize, usize)>,
    rng: ChaCha8Rng,
    steps: StepCounts,
}

impl NeuralForecaster {
    pub fn new(config: NeuralForecasterConfig) -> Result<Self> {
        config.spaces.validate()?;
        config.settings.validate()?;
        let s = &config.settings;
        let sp = config.spaces;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let regularized = |rng: &mut ChaCha8Rng, input, output| {
            Mlp::new(&config.tower_sizes(input, output), true, s.l2_scale, s.learning_rate, rng)
        };
        let (mut direct, mut proxy_tower, mut feedback, mut residual) = (None, None, None, None);
        match config.architecture {
            Architecture::Direct => {
                direct = Some(regularized(&mut rng, sp.n_instances, sp.n_outcomes)?);
            }
            Architecture::Factored | Architecture::ResidualFactored => {
                proxy_tower = Some(regularized(&mut rng, sp.n_instances, sp.n_proxies)?);
                feedback = Some(Mlp::new(
                    &[sp.n_proxies, sp.n_outcomes],
                    false,
                    0.0,
                    s.feedback_learning_rate,
                    &mut rng,
                )?);
                if config.architecture == Architecture::ResidualFactored {
                    residual = Some(regularized(&mut rng, config.residual_input_dim(), sp.n_outcomes)?);
                }
            }
        }
        let name = match config.architecture {
            Architecture::Direct => "nn-df",
            Architecture::Factored => "nn-ff",
            Architecture::ResidualFactored => "nn-rff",
        }
        .to_string();
        Ok(Self {
            proxy_buffer: ReplayBuffer::new(s.buffer_capacity, s.min_fill, s.batch_size)?,
            outcome_buffer: ReplayBuffer::new(s.buffer_capacity, s.min_fill, s.batch_size)?,
            name,
            direct,
            proxy_tower,
            feedback,
            residual,
            rng,
            steps: StepCounts::default(),
            config,
        })
    }

    pub fn with_name(mut self, name: String) -> Self {
        self.name = name;
        self
    }

    pub fn config(&self) -> &NeuralForecasterConfig {
        &self.config
    }

    pub fn step_counts(&self) -> StepCounts {
        self.steps
    }

    pub fn direct_tower(&self) -> Option<&Mlp> {
        self.direct.as_ref()
    }

    pub fn proxy_tower(&self) -> Option<&Mlp> {
        self.proxy_tower.as_ref()
    }

    pub fn feedback_tower(&self) -> Option<&Mlp> {
        self.feedback.as_ref()
    }

    pub fn residual_tower(&self) -> Option<&Mlp> {
        self.residual.as_ref()
    }

    pub fn direct_tower_mut(&mut self) -> Option<&mut Mlp> {
        self.direct.as_mut()
    }

    pub fn proxy_tower_mut(&mut self) -> Option<&mut Mlp> {
        self.proxy_tower.as_mut()
    }

    pub fn feedback_tower_mut(&mut self) -> Option<&mut Mlp> {
        self.feedback.as_mut()
    }

    pub fn residual_tower_mut(&mut self) -> Option<&mut Mlp> {
        self.residual.as_mut()
    }

    pub fn proxy_buffer(&self) -> &ReplayBuffer<(usize, usize)> {
        &self.proxy_buffer
    }

    pub fn outcome_buffer(&self) -> &ReplayBuffer<(usize, usize, usize)> {
        &self.outcome_buffer
    }

    fn instance_input(&self, x: usize) -> Vec<f64> {
        one_hot(self.config.spaces.n_instances, x)
    }

    fn proxy_input(&self, z: usize) -> Vec<f64> {
        one_hot(self.config.spaces.n_proxies, z)
    }

    fn residual_input(&self, x: usize, z: usize, feedback_logits: &[f64]) -> Vec<f64> {
        let mut input = self.instance_input(x);
        input.extend(self.proxy_input(z));
        input.extend_from_slice(feedback_logits);
        input
    }

    /// Proxy distribution `h(.|x)` of the factored architectures.
    pub fn proxy_distribution(&self, x: usize) -> Result<Vec<f64>> {
        let tower = self
            .proxy_tower
            .as_ref()
            .ok_or_else(|| Error::usage("direct forecaster has no proxy tower"))?;
        Ok(softmax(&tower.forward(&self.instance_input(x))?))
    }

    /// Outcome distribution used for proxy `z` when predicting for instance `x`:
    /// `softmax(fb(z))`, plus the residual correction for the residual architecture.
    pub fn outcome_distribution(&self, x: usize, z: usize) -> Result<Vec<f64>> {
        let feedback = self
            .feedback
            .as_ref()
            .ok_or_else(|| Error::usage("direct forecaster has no feedback tower"))?;
        let fb = feedback.forward(&self.proxy_input(z))?;
        match &self.residual {
            None => Ok(softmax(&fb)),
            Some(res) => {
                let delta = res.forward(&self.residual_input(x, z, &fb))?;
                let combined: Vec<f64> = fb.iter().zip(&delta).map(|(a, b)| a + b).collect();
                Ok(softmax(&combined))
            }
        }
    }

    /// One SGD step of the proxy tower on `(instance, proxy)` pairs.
    pub fn train_proxy_step(&mut self, batch: &[(usize, usize)]) -> Result<f64> {
        let data: Vec<(Vec<f64>, usize)> = batch.iter().map(|&(x, z)| (self.instance_input(x), z)).collect();
        let tower = self.proxy_tower.as_mut().ok_or_else(|| Error::usage("no proxy tower"))?;
        self.steps.proxy += 1;
        tower.sgd_step(&data)
    }

    /// One SGD step of the direct tower on `(instance, proxy, outcome)` triples.
    pub fn train_direct_step(&mut self, batch: &[(usize, usize, usize)]) -> Result<f64> {
        let data: Vec<(Vec<f64>, usize)> = batch.iter().map(|&(x, _, y)| (self.instance_input(x), y)).collect();
        let tower = self.direct.as_mut().ok_or_else(|| Error::usage("no direct tower"))?;
        self.steps.direct += 1;
        tower.sgd_step(&data)
    }

    /// One SGD step of the feedback tower on the feedback-only logits loss.
    pub fn train_feedback_step(&mut self, batch: &[(usize, usize, usize)]) -> Result<f64> {
        let data: Vec<(Vec<f64>, usize)> = batch.iter().map(|&(_, z, y)| (self.proxy_input(z), y)).collect();
        let tower = self.feedback.as_mut().ok_or_else(|| Error::usage("no feedback tower"))?;
        self.steps.feedback += 1;
        tower.sgd_step(&data)
    }

    /// One SGD step of the residual tower on the combined-logits loss. The
    /// feedback logits enter as constants, so the feedback tower is untouched.
    pub fn train_residual_step(&mut self, batch: &[(usize, usize, usize)]) -> Result<f64> {
        let feedback = self.feedback.as_ref().ok_or_else(|| Error::usage("no feedback tower"))?;
        let mut data = Vec::with_capacity(batch.len());
        let mut offsets = Vec::with_capacity(batch.len());
        for &(x, z, y) in batch {
            let fb = feedback.forward(&self.proxy_input(z))?;
            data.push((self.residual_input(x, z, &fb), y));
            offsets.push(fb);
        }
        let tower = self.residual.as_mut().ok_or_else(|| Error::usage("no residual tower"))?;
        self.steps.residual += 1;
        tower.sgd_step_with_offsets(&data, Some(&offsets))
    }

    /// Runs the configured number of steps for every tower whose buffer is ready,
    /// if `round` is a cadence trigger.
    pub fn train_tick(&mut self, round: usize) -> Result<()> {
        let cadence = self.config.settings.cadence;
        if !cadence.fires(round) {
            return Ok(());
        }
        for _ in 0..cadence.steps_per_trigger {
            if self.proxy_tower.is_some() && self.proxy_buffer.is_ready() {
                let batch = self.proxy_buffer.sample(&mut self.rng);
                self.train_proxy_step(&batch)?;
            }
            if self.outcome_buffer.is_ready() {
                let batch = self.outcome_buffer.sample(&mut self.rng);
                match self.config.architecture {
                    Architecture::Direct => {
                        self.train_direct_step(&batch)?;
                    }
                    Architecture::Factored => {
                        self.train_feedback_step(&batch)?;
                    }
                    Architecture::ResidualFactored => {
                        self.train_residual_step(&batch)?;
                        self.train_feedback_step(&batch)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Weights of every tower as CSV with a leading `tower` column.
    pub fn dump_weights_csv(&self) -> String {
        let mut out = String::from("tower,layer,kind,row,col,value\n");
        let towers = [
            ("direct", &self.direct),
            ("proxy", &self.proxy_tower),
            ("feedback", &self.feedback),
            ("residual", &self.residual),
        ];
        for (name, tower) in towers {
            if let Some(t) = tower {
                for line in t.to_csv().lines().skip(1) {
                    out.push_str(&format!("{name},{line}\n"));
                }
            }
        }
        out
    }
}

impl Forecaster for NeuralForecaster {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn predict(&self, instance: usize) -> Result<ProbVector> {
        check_index("instance", instance, self.config.spaces.n_instances)?;
        if let Some(direct) = &self.direct {
            let logits = direct.forward(&self.instance_input(instance))?;
            return Ok(ProbVector::from_normalized(softmax(&logits)));
        }
        let h = self.proxy_distribution(instance)?;
        let rows = (0..self.config.spaces.n_proxies)
            .map(|z| self.outcome_distribution(instance, z))
            .collect::<Result<Vec<_>>>()?;
        let mixed = mix_rows(&h, self.config.spaces.n_outcomes, |z| rows[z].as_slice());
        Ok(ProbVector::from_normalized(mixed))
    }

    fn observe_proxy(&mut self, instance: usize, proxy: usize) -> Result<()> {
        check_index("instance", instance, self.config.spaces.n_instances)?;
        check_index("proxy", proxy, self.config.spaces.n_proxies)?;
        if self.proxy_tower.is_some() {
            self.proxy_buffer.push((instance, proxy));
        }
        Ok(())
    }

    fn observe_outcome(&mut self, instance: usize, proxy: usize, outcome: usize) -> Result<()> {
        check_index("instance", instance, self.config.spaces.n_instances)?;
        check_index("proxy", proxy, self.config.spaces.n_proxies)?;
        check_index("outcome", outcome, self.config.spaces.n_outcomes)?;
        self.outcome_buffer.push((instance, proxy, outcome));
        Ok(())
    }

    fn end_round(&mut self, round: usize) -> Result<()> {
        self.train_tick(round)
    }

    fn reset(&mut self) {
        let name = std::mem::take(&mut self.name);
        *self = Self::new(self.config.clone())
            .expect("configuration was validated at construction")
            .with_name(name);
    }
}
