use abstractnet::check::{aux_test_spec, network_gradient_check, NETWORK_TOL};
use abstractnet::layers::{concat_channels, pool_forward, softmax_xent, Mode, PoolSpec};
use abstractnet::net::{build_network, BodyLayer, InceptionSpec, Network, NetworkSpec};
use abstractnet::rng::SeededRng;
use abstractnet::{Error, Tensor};

fn grads(net: &Network) -> Vec<Vec<f64>> {
    net.layer_states()
        .iter()
        .flat_map(|s| s.params().map(|p| p.grad.data().to_vec()))
        .collect()
}

fn values(net: &Network) -> Vec<Vec<f64>> {
    net.layer_states()
        .iter()
        .flat_map(|s| s.params().map(|p| p.value.data().to_vec()))
        .collect()
}

fn train_step(net: &mut Network, x: &Tensor, labels: &[usize], seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let out = net.forward(x, Mode::Train, &mut rng).unwrap();
    net.backward(out.cache, labels).unwrap()
}

#[test]
fn module_channels_match_branch_sums() {
    for spec in [NetworkSpec::mini_with_input(32, 32), aux_test_spec()] {
        let net = build_network(&spec, &mut SeededRng::new(3)).unwrap();
        let (c, h, w) = spec.input;
        let x = Tensor::uniform([2, c, h, w], 0.0, 1.0, &mut SeededRng::new(4)).unwrap();
        let out = net.forward(&x, Mode::Eval, &mut SeededRng::new(0)).unwrap();
        let expected: Vec<usize> = spec
            .body
            .iter()
            .filter_map(|l| match l {
                BodyLayer::Inception(m) => Some(m.out_channels()),
                BodyLayer::Pool(_) => None,
            })
            .collect();
        assert_eq!(out.module_channels, expected);
        assert_eq!(out.logits.shape(), [2, 2, 1, 1]);
        assert!(out.aux_logits.is_empty());
    }
}

#[test]
fn single_module_channel_arithmetic() {
    let spec = NetworkSpec {
        input: (8, 16, 16),
        stem: vec![],
        body: vec![BodyLayer::Inception(InceptionSpec::new(4, 2, 4, 2, 4, 4))],
        ..NetworkSpec::mini()
    };
    let net = build_network(&spec, &mut SeededRng::new(1)).unwrap();
    let x = Tensor::uniform([1, 8, 16, 16], 0.0, 1.0, &mut SeededRng::new(2)).unwrap();
    assert_eq!(net.features(&x).unwrap().shape(), [1, 16, 16, 16]);
}

#[test]
fn zero_input_gives_head_bias() {
    let net = build_network(&NetworkSpec::mini(), &mut SeededRng::new(7)).unwrap();
    let x = Tensor::zeros([3, 1, 64, 64]).unwrap();
    let logits = net.predict(&x).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let (loss, _) = softmax_xent(&logits, &[0, 1, 0]).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn delta_kernels_reproduce_branch_inputs() {
    let c = 3;
    let spec = NetworkSpec {
        input: (c, 8, 8),
        stem: vec![],
        body: vec![BodyLayer::Inception(InceptionSpec::new(c, c, c, c, c, c))],
        ..NetworkSpec::mini()
    };
    let mut net = build_network(&spec, &mut SeededRng::new(5)).unwrap();
    for st in net.layer_states_mut().into_iter().take(6) {
        let [out, inp, kh, kw] = st.weights.value.shape();
        st.weights.value.fill(0.0);
        for i in 0..out.min(inp) {
            st.weights.value.set(i, i, kh / 2, kw / 2, 1.0);
        }
    }
    let x = Tensor::uniform([2, c, 8, 8], 0.0, 1.0, &mut SeededRng::new(6)).unwrap();
    let (pooled, _) = pool_forward(&x, &PoolSpec::max(3, 1, 1)).unwrap();
    let expected = concat_channels(&[&x, &x, &x, &pooled]).unwrap();
    let got = net.features(&x).unwrap();
    assert!(got.max_abs_diff(&expected) <= 1e-12);
}

#[test]
fn zero_aux_weight_matches_detached_heads() {
    let with_aux = NetworkSpec {
        aux_weight: 0.0,
        head_dropout: 0.0,
        ..aux_test_spec()
    };
    let detached = NetworkSpec {
        aux_after: vec![],
        ..with_aux.clone()
    };
    let mut a = build_network(&with_aux, &mut SeededRng::new(11)).unwrap();
    let mut b = build_network(&detached, &mut SeededRng::new(12)).unwrap();
    let aux = a.aux_layer_count();
    let shared: Vec<_> = a.layer_states().into_iter().cloned().collect();
    let n = shared.len();
    let keep: Vec<_> = shared[..n - 1 - aux]
        .iter()
        .chain(&shared[n - 1..])
        .cloned()
        .collect();
    for (dst, src) in b.layer_states_mut().into_iter().zip(keep) {
        *dst = src;
    }

    let (c, h, w) = with_aux.input;
    let x = Tensor::uniform([3, c, h, w], 0.0, 1.0, &mut SeededRng::new(13)).unwrap();
    let labels = [0, 1, 1];
    train_step(&mut a, &x, &labels, 14);
    train_step(&mut b, &x, &labels, 14);

    let ga = grads(&a);
    let gb = grads(&b);
    let without_aux: Vec<_> = ga[..ga.len() - 2 - 2 * aux]
        .iter()
        .chain(&ga[ga.len() - 2..])
        .collect();
    assert_eq!(without_aux.len(), gb.len());
    for (x, y) in without_aux.iter().zip(&gb) {
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() <= 1e-12);
        }
    }
}

#[test]
fn doubling_aux_weight_doubles_aux_gradients() {
    let base = aux_test_spec();
    let run = |weight: f64| {
        let spec = NetworkSpec {
            aux_weight: weight,
            ..base.clone()
        };
        let mut net = build_network(&spec, &mut SeededRng::new(21)).unwrap();
        let (c, h, w) = spec.input;
        let x = Tensor::uniform([2, c, h, w], 0.0, 1.0, &mut SeededRng::new(22)).unwrap();
        train_step(&mut net, &x, &[1, 0], 23);
        (grads(&net), net.aux_layer_count())
    };
    let (g0, aux) = run(0.0);
    let (g1, _) = run(0.3);
    let (g2, _) = run(0.6);
    let total = g1.len();
    let aux_range = total - 2 - 2 * aux..total - 2;
    for i in 0..total {
        for j in 0..g1[i].len() {
            if aux_range.contains(&i) {
                assert!((g2[i][j] - 2.0 * g1[i][j]).abs() <= 1e-12 * g1[i][j].abs().max(1.0));
            } else {
                let aux_part = g1[i][j] - g0[i][j];
                let expected = g0[i][j] + 2.0 * aux_part;
                assert!((g2[i][j] - expected).abs() <= 1e-10 * expected.abs().max(1.0));
            }
        }
    }
}

#[test]
fn mini_network_gradient_check() {
    let outcome =
        network_gradient_check("mini 16x16", &NetworkSpec::mini_with_input(16, 16), 2, 31).unwrap();
    assert!(outcome.passed(), "{outcome}");
    assert!(outcome.error <= NETWORK_TOL);
}

#[test]
fn aux_network_gradient_check() {
    let outcome = network_gradient_check("aux heads", &aux_test_spec(), 2, 32).unwrap();
    assert!(outcome.passed(), "{outcome}");
}

#[test]
fn builds_are_deterministic() {
    let a = build_network(&NetworkSpec::mini(), &mut SeededRng::new(7)).unwrap();
    let b = build_network(&NetworkSpec::mini(), &mut SeededRng::new(7)).unwrap();
    assert_eq!(values(&a), values(&b));
    let c = build_network(&NetworkSpec::mini(), &mut SeededRng::new(8)).unwrap();
    assert_ne!(values(&a), values(&c));
}

#[test]
fn fresh_biases_zero_and_weights_bounded() {
    let net = build_network(&NetworkSpec::mini(), &mut SeededRng::new(9)).unwrap();
    for st in net.layer_states() {
        assert!(st.bias.value.data().iter().all(|&b| b == 0.0));
        let [_, inp, kh, kw] = st.weights.value.shape();
        let bound = (3.0 / (inp * kh * kw) as f64).sqrt();
        assert!(st.weights.value.data().iter().all(|v| v.abs() <= bound));
    }
}

#[test]
fn faithful_structure() {
    let spec = NetworkSpec::faithful();
    assert_eq!(spec.num_modules(), 9);
    let net = build_network(&spec, &mut SeededRng::new(1)).unwrap();
    assert_eq!(net.aux_positions(), vec![3, 6]);
    assert_eq!(net.aux_layer_count(), 6);
}

#[test]
fn eval_forward_is_pure() {
    let net = build_network(&aux_test_spec(), &mut SeededRng::new(41)).unwrap();
    let (c, h, w) = net.spec().input;
    let x = Tensor::uniform([2, c, h, w], 0.0, 1.0, &mut SeededRng::new(42)).unwrap();
    let a = net.forward(&x, Mode::Eval, &mut SeededRng::new(1)).unwrap();
    let b = net.forward(&x, Mode::Eval, &mut SeededRng::new(2)).unwrap();
    assert_eq!(a.logits, b.logits);
    assert!(a.aux_logits.is_empty() && a.cache.is_none());
    let t = net
        .forward(&x, Mode::Train, &mut SeededRng::new(1))
        .unwrap();
    assert_eq!(t.aux_logits.len(), 2);
    for l in &t.aux_logits {
        assert_eq!(l.shape(), [2, 2, 1, 1]);
    }
}

#[test]
fn backward_without_cache_is_state_error() {
    let mut net = build_network(&aux_test_spec(), &mut SeededRng::new(1)).unwrap();
    assert!(matches!(net.backward(None, &[0]), Err(Error::State(_))));
}

#[test]
fn input_shape_mismatch_rejected() {
    let net = build_network(&NetworkSpec::mini(), &mut SeededRng::new(1)).unwrap();
    let x = Tensor::zeros([1, 1, 32, 32]).unwrap();
    assert!(matches!(net.predict(&x), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn inconsistent_specs_rejected() {
    let mut spec = NetworkSpec::mini();
    spec.body
        .push(BodyLayer::Inception(InceptionSpec::new(0, 1, 1, 1, 1, 1)));
    assert!(matches!(
        build_network(&spec, &mut SeededRng::new(1)),
        Err(Error::Spec { .. })
    ));

    let mut spec = NetworkSpec::mini();
    spec.aux_after = vec![3];
    assert!(build_network(&spec, &mut SeededRng::new(1)).is_err());

    let mut spec = NetworkSpec::mini();
    spec.aux_after = vec![2, 1];
    assert!(build_network(&spec, &mut SeededRng::new(1)).is_err());

    let spec = NetworkSpec::mini_with_input(60, 60);
    assert!(matches!(
        build_network(&spec, &mut SeededRng::new(1)),
        Err(Error::Spec { .. })
    ));
}

#[test]
fn checkpoint_round_trip() {
    let net = build_network(&aux_test_spec(), &mut SeededRng::new(51)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    net.save(&path).unwrap();
    let back = Network::load(&path).unwrap();
    assert_eq!(back, net);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(
        Network::from_checkpoint_bytes(&bytes, &path),
        Err(Error::Format { .. })
    ));
}

#[test]
fn three_channel_input_replicates() {
    let spec = NetworkSpec::mini_with_input(16, 16).with_input_channels(3);
    let net = build_network(&spec, &mut SeededRng::new(61)).unwrap();
    let x = Tensor::uniform([1, 3, 16, 16], 0.0, 1.0, &mut SeededRng::new(62)).unwrap();
    assert_eq!(net.predict(&x).unwrap().shape(), [1, 2, 1, 1]);
}
