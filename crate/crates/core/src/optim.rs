//! Xavier initialization, ADAGRAD, SGD with momentum, and the training loop.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerState, Mode, Param};
use crate::net::{ForwardOutput, Network};
use crate::rng::SeededRng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum XavierVariant {
    /// Variance `1 / fan_in`.
    #[default]
    FanIn,
    /// Variance `2 / (fan_in + fan_out)`.
    FanAvg,
}

/// Uniform on `[-a, a]` with `a = sqrt(3 / fan_in)`.
pub fn xavier_init(shape: Shape, fan_in: usize, rng: &mut SeededRng) -> Result<Tensor> {
    xavier_init_with(shape, fan_in, 0, XavierVariant::FanIn, rng)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize, variant: XavierVariant) -> Result<f64> {
    if fan_in < 1 {
        return Err(Error::Param("xavier fan_in must be >= 1".into()));
    }
    Ok(match variant {
        XavierVariant::FanIn => (3.0 / fan_in as f64).sqrt(),
        XavierVariant::FanAvg => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    })
}

pub fn xavier_init_with(
    shape: Shape,
    fan_in: usize,
    fan_out: usize,
    variant: XavierVariant,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let a = xavier_bound(fan_in, fan_out, variant)?;
    Tensor::uniform(shape, -a, a, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Adagrad,
    SgdMomentum,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Adagrad => "adagrad",
            Method::SgdMomentum => "sgd",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adagrad" => Ok(Method::Adagrad),
            "sgd" | "sgd_momentum" => Ok(Method::SgdMomentum),
            other => Err(Error::Param(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub method: Method,
    pub base_lr: f64,
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            method: Method::Adagrad,
            base_lr: 0.01,
            momentum: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it is the null-update configuration.
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Param(format!(
                "base_lr {} must be finite and >= 0",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Param(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Param(format!(
                "epsilon {} must be > 0",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub loss_report_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 32,
            shuffle_seed: 0,
            loss_report_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Param("iterations must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Param("batch_size must be >= 1".into()));
        }
        if self.loss_report_every < 1 {
            return Err(Error::Param("loss_report_every must be >= 1".into()));
        }
        Ok(())
    }
}

fn adagrad_param(p: &mut Param, lr: f64, epsilon: f64) {
    let value = p.value.data_mut();
    let acc = p.accum.data_mut();
    for ((w, a), &g) in value.iter_mut().zip(acc.iter_mut()).zip(p.grad.data()) {
        *a += g * g;
        *w -= lr * g / (a.sqrt() + epsilon);
    }
    p.grad.fill(0.0);
}

fn momentum_param(p: &mut Param, lr: f64, momentum: f64) {
    let value = p.value.data_mut();
    let vel = p.velocity.data_mut();
    for ((w, v), &g) in value.iter_mut().zip(vel.iter_mut()).zip(p.grad.data()) {
        *v = momentum * *v - lr * g;
        *w += *v;
    }
    p.grad.fill(0.0);
}

/// `accum += g^2; w -= lr * g / (sqrt(accum) + epsilon)`; clears gradients.
pub fn adagrad_step(state: &mut LayerState, lr: f64, epsilon: f64) {
    for p in state.params_mut() {
        adagrad_param(p, lr, epsilon);
    }
}

/// `v = momentum * v - lr * g; w += v`; clears gradients.
pub fn sgd_momentum_step(state: &mut LayerState, lr: f64, momentum: f64) {
    for p in state.params_mut() {
        momentum_param(p, lr, momentum);
    }
}

pub fn apply_step(net: &mut Network, cfg: &OptimConfig) -> Result<()> {
    for state in net.layer_states_mut() {
        match cfg.method {
            Method::Adagrad => adagrad_step(state, cfg.base_lr, cfg.epsilon),
            Method::SgdMomentum => sgd_momentum_step(state, cfg.base_lr, cfg.momentum),
        }
        state.weights.value.ensure_finite("optimizer step")?;
        state.bias.value.ensure_finite("optimizer step")?;
    }
    Ok(())
}

/// A training set already in network-input form: one `(c, h, w)` sample per
/// entry of `labels`, packed contiguously.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub sample_shape: (usize, usize, usize),
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
}

impl TrainSet {
    pub fn new(
        sample_shape: (usize, usize, usize),
        data: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = sample_shape.0 * sample_shape.1 * sample_shape.2;
        if per == 0 || data.len() != per * labels.len() {
            return Err(Error::Param(format!(
                "{} values do not hold {} samples of shape {sample_shape:?}",
                data.len(),
                labels.len()
            )));
        }
        Ok(TrainSet {
            sample_shape,
            data,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather the listed samples into an `(indices.len(), c, h, w)` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (c, h, w) = self.sample_shape;
        let per = c * h * w;
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::from_vec([indices.len(), c, h, w], data)?, labels))
    }
}

/// Endless stream of sample indices: consecutive shuffled epochs.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    base: SeededRng,
}

impl EpochSampler {
    fn new(len: usize, base: SeededRng) -> Self {
        let mut s = EpochSampler {
            order: (0..len).collect(),
            pos: 0,
            epoch: 0,
            base,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let mut rng = self.base.split(&[self.epoch]);
        self.order.sort_unstable();
        rng.shuffle(&mut self.order);
        self.epoch += 1;
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossTrace {
    pub points: Vec<(usize, f64)>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss\n");
        for (it, loss) in &self.points {
            s.push_str(&format!("{it},{loss:.9}\n"));
        }
        s
    }
}

/// Run exactly `tc.iterations` mini-batch updates.
///
/// Batches are drawn from consecutive shuffled epochs (shuffle stream keyed
/// by `tc.shuffle_seed`); dropout masks come from `rng`. The loss of every
/// `loss_report_every`-th iteration (1-based) is recorded.
pub fn train(
    net: &mut Network,
    data: &TrainSet,
    optim: &OptimConfig,
    tc: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<LossTrace> {
    optim.validate()?;
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let classes = net.spec().classes;
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label {
            label: bad,
            classes,
        });
    }
    let mut sampler = EpochSampler::new(data.len(), SeededRng::new(tc.shuffle_seed));
    let mut trace = LossTrace { points: Vec::new() };
    for it in 1..=tc.iterations {
        let idx = sampler.next_batch(tc.batch_size);
        let (x, labels) = data.batch(&idx)?;
        let ForwardOutput { cache, .. } = net.forward(&x, Mode::Train, rng)?;
        let loss = net.backward(cache, &labels)?;
        apply_step(net, optim)?;
        if it % tc.loss_report_every == 0 {
            trace.points.push((it, loss));
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(w: f64, g: f64) -> LayerState {
        let mut st = LayerState::dense(1, 1).unwrap();
        st.weights.value.fill(w);
        st.weights.grad.fill(g);
        st
    }

    #[test]
    fn xavier_bound_fan_in_three() {
        assert_eq!(xavier_bound(3, 0, XavierVariant::FanIn).unwrap(), 1.0);
        assert!(xavier_init([1, 1, 1, 1], 0, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn xavier_variance() {
        let t = xavier_init([1, 1, 1, 100_000], 27, &mut SeededRng::new(8)).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = 1.0 / 27.0;
        assert!(((var - want) / want).abs() < 0.05, "variance {var}");
        let a = xavier_bound(27, 0, XavierVariant::FanIn).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= a));
    }

    #[test]
    fn xavier_reproducible() {
        let a = xavier_init([4, 3, 3, 3], 27, &mut SeededRng::new(1)).unwrap();
        let b = xavier_init([4, 3, 3, 3], 27, &mut SeededRng::new(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adagrad_two_steps() {
        let mut st = scalar_state(0.0, 1.0);
        adagrad_step(&mut st, 0.01, 1e-8);
        let w1 = st.weights.value.data()[0];
        assert!((w1 - (-0.01 / (1.0 + 1e-8))).abs() < 1e-12);
        assert_eq!(st.weights.grad.data()[0], 0.0);
        st.weights.grad.fill(1.0);
        adagrad_step(&mut st, 0.01, 1e-8);
        assert_eq!(st.weights.accum.data()[0], 2.0);
        let dw2 = st.weights.value.data()[0] - w1;
        assert!((dw2 - (-0.01 / (2f64.sqrt() + 1e-8))).abs() < 1e-12);
        assert!((dw2 + 0.00707107).abs() < 1e-8);
    }

    #[test]
    fn adagrad_zero_gradient_is_noop() {
        let mut st = scalar_state(0.4, 0.0);
        st.weights.accum.fill(3.0);
        adagrad_step(&mut st, 0.01, 1e-8);
        assert_eq!(st.weights.value.data()[0], 0.4);
        assert_eq!(st.weights.accum.data()[0], 3.0);
    }

    #[test]
    fn momentum_zero_is_plain_sgd() {
        let mut st = scalar_state(1.0, 0.5);
        sgd_momentum_step(&mut st, 0.1, 0.0);
        assert_eq!(st.weights.value.data()[0], 1.0 - 0.1 * 0.5);
    }

    #[test]
    fn momentum_two_steps() {
        let mut st = scalar_state(0.0, 1.0);
        sgd_momentum_step(&mut st, 0.1, 0.9);
        assert!((st.weights.velocity.data()[0] + 0.1).abs() < 1e-12);
        st.weights.grad.fill(1.0);
        sgd_momentum_step(&mut st, 0.1, 0.9);
        assert!((st.weights.velocity.data()[0] + 0.19).abs() < 1e-12);
        assert!((st.weights.value.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn momentum_decays_without_gradient() {
        let mut st = scalar_state(0.0, 0.0);
        st.weights.velocity.fill(-0.1);
        sgd_momentum_step(&mut st, 0.1, 0.9);
        assert!((st.weights.velocity.data()[0] + 0.09).abs() < 1e-12);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(5, SeededRng::new(3));
        let mut first: Vec<usize> = s.next_batch(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        let mut second = s.next_batch(5);
        second.sort();
        assert_eq!(second, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        assert!(OptimConfig {
            momentum: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimConfig {
            epsilon: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
