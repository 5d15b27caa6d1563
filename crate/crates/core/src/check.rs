//! Reference implementations and gradient checks used by `selftest` and
//! the test suites.
//!
//! Gradient checks compare analytic gradients against central differences
//! of a scalar loss. Layers are probed with `L = sum(r * y)` for a fixed
//! random `r`, so the upstream gradient is `r`. The error of one component
//! is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`; the floor
//! keeps components whose true gradient is essentially zero from dominating.

use std::fmt;

use crate::error::Result;
use crate::layers::{
    concat_channels, conv_backward, conv_forward, dense_backward, dense_forward, dropout,
    dropout_backward, pool_backward, pool_forward, relu, relu_backward, softmax_xent,
    split_channels, ConvSpec, LayerState, Mode, PoolSpec,
};
use crate::net::{
    build_network, AuxHeadSpec, BodyLayer, InceptionSpec, Network, NetworkSpec, StemLayer,
};
use crate::optim::{adagrad_step, sgd_momentum_step, XavierVariant};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const LAYER_TOL: f64 = 1e-4;
pub const NETWORK_TOL: f64 = 1e-3;
pub const ORACLE_TOL: f64 = 1e-12;

const EPS: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<44} err {:.2e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.tolerance
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Worst relative error between `analytic` and central differences of
/// `loss` around `point`.
pub fn compare_numeric(
    point: &[f64],
    analytic: &[f64],
    eps: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(point.len(), analytic.len());
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = loss(&x);
        x[i] = orig - eps;
        let minus = loss(&x);
        x[i] = orig;
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * eps)));
    }
    worst
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(shape: [usize; 4], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).expect("shape matches data")
}

/// Direct six-loop cross-correlation with zero padding.
pub fn brute_conv(x: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (oh, ow) = spec.output_hw(x.h(), x.w())?;
    let (kh, kw) = spec.kernel;
    let mut y = Tensor::zeros([x.n(), spec.out_channels, oh, ow])?;
    for n in 0..x.n() {
        for co in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.at(0, co, 0, 0);
                    for ci in 0..spec.in_channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride.0 + ky) as isize - spec.pad.0 as isize;
                                let ix = (ox * spec.stride.1 + kx) as isize - spec.pad.1 as isize;
                                if iy >= 0
                                    && ix >= 0
                                    && (iy as usize) < x.h()
                                    && (ix as usize) < x.w()
                                {
                                    acc += weights.at(co, ci, ky, kx)
                                        * x.at(n, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    y.set(n, co, oy, ox, acc);
                }
            }
        }
    }
    Ok(y)
}

/// Smallest size `>= at_least` whose output size divides exactly.
pub fn exact_size(at_least: usize, k: usize, stride: usize, pad: usize) -> usize {
    (at_least..)
        .find(|&s| s + 2 * pad >= k && (s + 2 * pad - k).is_multiple_of(stride))
        .expect("some size divides")
}

/// Every `(kernel, stride, pad, in, out)` combination of the oracle grid.
pub fn conv_grid() -> Vec<ConvSpec> {
    let mut out = Vec::new();
    for k in [1, 3, 5] {
        for s in [1, 2] {
            for p in [0, 1, 2] {
                for cin in [1, 3] {
                    for cout in [1, 3] {
                        out.push(ConvSpec::square(cin, cout, k, s, p));
                    }
                }
            }
        }
    }
    out
}

fn random_conv_state(spec: &ConvSpec, rng: &mut SeededRng) -> Result<LayerState> {
    let mut st = LayerState::conv(spec)?;
    st.weights.value = Tensor::uniform(st.weights.value.shape(), -1.0, 1.0, rng)?;
    st.bias.value = Tensor::uniform(st.bias.value.shape(), -1.0, 1.0, rng)?;
    Ok(st)
}

fn grid_input(spec: &ConvSpec, rng: &mut SeededRng) -> Result<Tensor> {
    let h = exact_size(6, spec.kernel.0, spec.stride.0, spec.pad.0);
    let w = exact_size(h + 1, spec.kernel.1, spec.stride.1, spec.pad.1);
    Tensor::uniform([2, spec.in_channels, h, w], -1.0, 1.0, rng)
}

fn spec_label(spec: &ConvSpec) -> String {
    format!(
        "k{} s{} p{} c{}->{}",
        spec.kernel.0, spec.stride.0, spec.pad.0, spec.in_channels, spec.out_channels
    )
}

/// `conv_forward` against `brute_conv` over the whole grid.
pub fn conv_oracle_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = SeededRng::new(seed);
    conv_grid()
        .iter()
        .map(|spec| {
            let st = random_conv_state(spec, &mut rng)?;
            let x = grid_input(spec, &mut rng)?;
            let fast = conv_forward(&x, spec, &st)?;
            let slow = brute_conv(&x, &st.weights.value, &st.bias.value, spec)?;
            Ok(CheckOutcome {
                name: format!("conv oracle {}", spec_label(spec)),
                error: fast.max_abs_diff(&slow),
                tolerance: ORACLE_TOL,
            })
        })
        .collect()
}

/// Input, weight and bias gradients of one convolution.
pub fn conv_gradient_check(spec: &ConvSpec, seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed);
    let st = random_conv_state(spec, &mut rng)?;
    let x = grid_input(spec, &mut rng)?;
    let y = conv_forward(&x, spec, &st)?;
    let r = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng)?;
    let mut grads = st.clone();
    let dx = conv_backward(&x, &r, spec, &mut grads)?;

    let xs = x.shape();
    let mut err = compare_numeric(x.data(), dx.data(), EPS, |p| {
        dot(&conv_forward(&with_data(xs, p), spec, &st).unwrap(), &r)
    });
    let ws = st.weights.value.shape();
    err = err.max(compare_numeric(
        st.weights.value.data(),
        grads.weights.grad.data(),
        EPS,
        |p| {
            let mut s = st.clone();
            s.weights.value = with_data(ws, p);
            dot(&conv_forward(&x, spec, &s).unwrap(), &r)
        },
    ));
    let bs = st.bias.value.shape();
    err = err.max(compare_numeric(
        st.bias.value.data(),
        grads.bias.grad.data(),
        EPS,
        |p| {
            let mut s = st.clone();
            s.bias.value = with_data(bs, p);
            dot(&conv_forward(&x, spec, &s).unwrap(), &r)
        },
    ));
    Ok(CheckOutcome {
        name: format!("conv gradient {}", spec_label(spec)),
        error: err,
        tolerance: LAYER_TOL,
    })
}

/// Values on a grid spaced well beyond `EPS`, shuffled, with random sign:
/// no two entries are within `2 * EPS` of each other or of zero, so pooling
/// winners and ReLU gates do not flip under the probe.
fn separated_values(len: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len)
        .map(|i| 0.01 + 0.5 * (i as f64) / len as f64)
        .collect();
    rng.shuffle(&mut v);
    v.iter_mut().for_each(|x| {
        if rng.next_f64() < 0.5 {
            *x = -*x;
        }
    });
    v
}

pub fn pool_gradient_check(spec: &PoolSpec, shape: [usize; 4], seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed);
    let x = Tensor::from_vec(shape, separated_values(shape.iter().product(), &mut rng))?;
    let (y, idx) = pool_forward(&x, spec)?;
    let r = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng)?;
    let dx = pool_backward(&r, spec, &idx)?;
    let err = compare_numeric(x.data(), dx.data(), EPS, |p| {
        dot(&pool_forward(&with_data(shape, p), spec).unwrap().0, &r)
    });
    Ok(CheckOutcome {
        name: format!(
            "{:?} pool gradient k{} s{} p{}",
            spec.kind, spec.window.0, spec.stride.0, spec.pad.0
        ),
        error: err,
        tolerance: LAYER_TOL,
    })
}

pub fn relu_gradient_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed);
    let shape = [2, 3, 4, 5];
    let x = Tensor::from_vec(shape, separated_values(120, &mut rng))?;
    let r = Tensor::uniform(shape, -1.0, 1.0, &mut rng)?;
    let dx = relu_backward(&relu(&x), &r)?;
    let err = compare_numeric(x.data(), dx.data(), EPS, |p| {
        dot(&relu(&with_data(shape, p)), &r)
    });
    Ok(CheckOutcome {
        name: "relu gradient".into(),
        error: err,
        tolerance: LAYER_TOL,
    })
}

pub fn dense_gradient_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed);
    let xs = [3, 2, 2, 2];
    let x = Tensor::uniform(xs, -1.0, 1.0, &mut rng)?;
    let mut st = LayerState::dense(8, 4)?;
    st.weights.value = Tensor::uniform(st.weights.value.shape(), -1.0, 1.0, &mut rng)?;
    st.bias.value = Tensor::uniform(st.bias.value.shape(), -1.0, 1.0, &mut rng)?;
    let y = dense_forward(&x, &st)?;
    let r = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng)?;
    let mut g = st.clone();
    let dx = dense_backward(&x, &r, &mut g)?;
    let mut err = compare_numeric(x.data(), dx.data(), EPS, |p| {
        dot(&dense_forward(&with_data(xs, p), &st).unwrap(), &r)
    });
    let ws = st.weights.value.shape();
    err = err.max(compare_numeric(
        st.weights.value.data(),
        g.weights.grad.data(),
        EPS,
        |p| {
            let mut s = st.clone();
            s.weights.value = with_data(ws, p);
            dot(&dense_forward(&x, &s).unwrap(), &r)
        },
    ));
    let bs = st.bias.value.shape();
    err = err.max(compare_numeric(
        st.bias.value.data(),
        g.bias.grad.data(),
        EPS,
        |p| {
            let mut s = st.clone();
            s.bias.value = with_data(bs, p);
            dot(&dense_forward(&x, &s).unwrap(), &r)
        },
    ));
    Ok(CheckOutcome {
        name: "dense gradient".into(),
        error: err,
        tolerance: LAYER_TOL,
    })
}

pub fn dropout_gradient_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed);
    let shape = [2, 3, 3, 3];
    let x = Tensor::uniform(shape, -1.0, 1.0, &mut rng)?;
    let r = Tensor::uniform(shape, -1.0, 1.0, &mut rng)?;
    let mask_rng = rng.split(&[1]);
    let (_, mask) = dropout(&x, 0.4, &mut mask_rng.clone(), Mode::Train)?;
    let dx = dropout_backward(&r, mask.as_ref())?;
    let err = compare_numeric(x.data(), dx.data(), EPS, |p| {
        // the same stream gives the same mask on every probe
        let (y, _) = dropout(
            &with_data(shape, p),
            0.4,
            &mut mask_rng.clone(),
            Mode::Train,
        )
        .unwrap();
        dot(&y, &r)
    });
    Ok(CheckOutcome {
        name: "dropout gradient".into(),
        error: err,
        tolerance: LAYER_TOL,
    })
}

pub fn softmax_gradient_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed);
    let shape = [4, 3, 1, 1];
    let logits = Tensor::uniform(shape, -3.0, 3.0, &mut rng)?;
    let labels = [0, 2, 1, 2];
    let (_, d) = softmax_xent(&logits, &labels)?;
    let err = compare_numeric(logits.data(), d.data(), EPS, |p| {
        softmax_xent(&with_data(shape, p), &labels).unwrap().0
    });
    Ok(CheckOutcome {
        name: "softmax cross-entropy gradient".into(),
        error: err,
        tolerance: LAYER_TOL,
    })
}

pub fn concat_gradient_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed);
    let parts = [1, 3, 2];
    let xs: Vec<Tensor> = parts
        .iter()
        .map(|&c| Tensor::uniform([2, c, 3, 3], -1.0, 1.0, &mut rng))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = xs.iter().collect();
    let y = concat_channels(&refs)?;
    let r = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng)?;
    let grads = split_channels(&r, &parts)?;
    let mut err: f64 = 0.0;
    for (k, x) in xs.iter().enumerate() {
        err = err.max(compare_numeric(x.data(), grads[k].data(), EPS, |p| {
            let mut v = xs.clone();
            v[k] = with_data(x.shape(), p);
            let refs: Vec<&Tensor> = v.iter().collect();
            dot(&concat_channels(&refs).unwrap(), &r)
        }));
    }
    Ok(CheckOutcome {
        name: "channel concat gradient".into(),
        error: err,
        tolerance: LAYER_TOL,
    })
}

/// Small network with two auxiliary heads, for exercising the aux paths.
pub fn aux_test_spec() -> NetworkSpec {
    NetworkSpec {
        input: (1, 12, 12),
        stem: vec![
            StemLayer::Conv(ConvSpec::same(1, 4, 3)),
            StemLayer::Pool(PoolSpec::max(2, 2, 0)),
        ],
        body: vec![
            BodyLayer::Inception(InceptionSpec::new(2, 2, 3, 1, 2, 2)),
            BodyLayer::Inception(InceptionSpec::new(2, 3, 4, 2, 2, 2)),
            BodyLayer::Inception(InceptionSpec::new(3, 2, 3, 1, 2, 2)),
        ],
        aux_after: vec![1, 2],
        aux_weight: 0.3,
        aux_head: AuxHeadSpec {
            pool: Some(PoolSpec::average(2, 2, 0)),
            conv_channels: 3,
            hidden: 5,
            dropout: 0.5,
        },
        head_dropout: 0.4,
        classes: 2,
        init: XavierVariant::FanIn,
    }
}

/// Total training loss (main plus weighted auxiliary) for a fixed dropout stream.
fn train_loss(net: &Network, x: &Tensor, labels: &[usize], rng: &SeededRng) -> f64 {
    let out = net.forward(x, Mode::Train, &mut rng.clone()).unwrap();
    net.losses(&out, labels).unwrap().1
}

/// Every parameter of a network against central differences of its total
/// training loss. Biases start positive and random so ReLU units sit away
/// from their kink.
pub fn network_gradient_check(
    name: &str,
    spec: &NetworkSpec,
    batch: usize,
    seed: u64,
) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(seed);
    let mut net = build_network(spec, &mut rng)?;
    for st in net.layer_states_mut() {
        st.bias.value = Tensor::uniform(st.bias.value.shape(), 0.05, 0.3, &mut rng)?;
    }
    let (c, h, w) = spec.input;
    let x = Tensor::uniform([batch, c, h, w], 0.0, 1.0, &mut rng)?;
    let labels: Vec<usize> = (0..batch).map(|i| i % spec.classes).collect();
    let drop_rng = rng.split(&[7]);

    let out = net.forward(&x, Mode::Train, &mut drop_rng.clone())?;
    net.backward(out.cache, &labels)?;
    let analytic: Vec<Vec<Vec<f64>>> = net
        .layer_states()
        .iter()
        .map(|st| {
            vec![
                st.weights.grad.data().to_vec(),
                st.bias.grad.data().to_vec(),
            ]
        })
        .collect();

    let mut worst: f64 = 0.0;
    for (layer, per_layer) in analytic.iter().enumerate() {
        for (slot, grad) in per_layer.iter().enumerate() {
            let point = net.layer_states()[layer].params()[slot]
                .value
                .data()
                .to_vec();
            let shape = net.layer_states()[layer].params()[slot].value.shape();
            let mut probe = net.clone();
            worst = worst.max(compare_numeric(&point, grad, 1e-5, |p| {
                probe.layer_states_mut()[layer].params_mut()[slot].value = with_data(shape, p);
                train_loss(&probe, &x, &labels, &drop_rng)
            }));
        }
    }
    Ok(CheckOutcome {
        name: format!("network gradient {name}"),
        error: worst,
        tolerance: NETWORK_TOL,
    })
}

/// Two-step optimizer traces against closed-form values.
pub fn optimizer_checks() -> Result<Vec<CheckOutcome>> {
    let scalar = |w: f64| -> Result<LayerState> {
        let mut st = LayerState::dense(1, 1)?;
        st.weights.value.fill(w);
        Ok(st)
    };
    // ADAGRAD, w0 = 1, lr 0.1, gradients 0.5 then 0.5
    let mut st = scalar(1.0)?;
    let mut w = 1.0;
    let mut acc = 0.0;
    for g in [0.5, 0.5] {
        st.weights.grad.fill(g);
        adagrad_step(&mut st, 0.1, 1e-8);
        acc += g * g;
        w -= 0.1 * g / (f64::sqrt(acc) + 1e-8);
    }
    let ada = (st.weights.value.data()[0] - w).abs();
    // momentum 0.9, lr 0.1, gradient 1 twice: v = -0.1, -0.19; w = -0.29
    let mut st = scalar(0.0)?;
    for _ in 0..2 {
        st.weights.grad.fill(1.0);
        sgd_momentum_step(&mut st, 0.1, 0.9);
    }
    let mom = (st.weights.value.data()[0] - (-0.29)).abs();
    Ok(vec![
        CheckOutcome {
            name: "adagrad two-step trace".into(),
            error: ada,
            tolerance: ORACLE_TOL,
        },
        CheckOutcome {
            name: "momentum two-step trace".into(),
            error: mom,
            tolerance: ORACLE_TOL,
        },
    ])
}

/// The layer-level checks: every convolution in the grid, pooling of both
/// kinds with and without padding, and the remaining primitives.
pub fn layer_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (i, spec) in conv_grid().iter().enumerate() {
        out.push(conv_gradient_check(spec, seed ^ i as u64)?);
    }
    let shape = [2, 2, 6, 6];
    for (i, spec) in [
        PoolSpec::max(2, 2, 0),
        PoolSpec::max(3, 1, 1),
        PoolSpec::max(4, 2, 1),
        PoolSpec::max(3, 3, 0),
        PoolSpec::average(2, 2, 0),
        PoolSpec::average(3, 1, 1),
        PoolSpec::average(4, 2, 1),
        PoolSpec::global_average(6, 6),
    ]
    .iter()
    .enumerate()
    {
        out.push(pool_gradient_check(
            spec,
            shape,
            seed.wrapping_add(100 + i as u64),
        )?);
    }
    out.push(relu_gradient_check(seed)?);
    out.push(dense_gradient_check(seed)?);
    out.push(dropout_gradient_check(seed)?);
    out.push(softmax_gradient_check(seed)?);
    out.push(concat_gradient_check(seed)?);
    Ok(out)
}

/// Everything `selftest` runs.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = conv_oracle_checks(seed)?;
    out.extend(layer_checks(seed)?);
    out.push(network_gradient_check(
        "mini 16x16",
        &NetworkSpec::mini_with_input(16, 16),
        2,
        seed,
    )?);
    out.push(network_gradient_check(
        "aux heads",
        &aux_test_spec(),
        2,
        seed,
    )?);
    out.extend(optimizer_checks()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn exact_sizes_divide() {
        for spec in conv_grid() {
            let h = exact_size(6, spec.kernel.0, spec.stride.0, spec.pad.0);
            assert!(spec.output_hw(h, h).is_ok());
        }
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let err = compare_numeric(&[1.0, -2.0], &[2.0, -4.0], 1e-5, |p| {
            p[0] * p[0] + p[1] * p[1]
        });
        assert!(err < 1e-9);
    }
}
