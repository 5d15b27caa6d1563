use std::fs;

use abstractnet::experiment::{
    aggregate, csv_string, evaluate_accuracy, parse_csv, preset_experiment, preset_experiments,
    run_sweep, svg_string, to_network_input, ExperimentConfig, RunResult, CSV_HEADER,
};
use abstractnet::net::{build_network, BodyLayer, InceptionSpec, Network, NetworkSpec};
use abstractnet::optim::{LossTrace, TrainSet};
use abstractnet::rng::SeededRng;
use abstractnet::shapegen::{generate_dataset, RenderParams, ShapeFamily};
use abstractnet::Error;

fn tiny(name: &str) -> ExperimentConfig {
    let mut cfg = preset_experiment("fig4").unwrap();
    cfg.apply_config_text(&format!(
        "name = {name}\nsizes = 1,2\nrepeats = 2\niters = 3\nbatch_size = 4\ntest_per_class = 4\n\
         size = 16x16\nmargin = 1\nmin_short_side = 3\nloss_report_every = 1\n"
    ))
    .unwrap();
    cfg
}

fn run(accuracy: f64, train_size: usize, repeat: usize) -> RunResult {
    RunResult {
        train_size,
        repeat,
        seed: repeat as u64,
        accuracy,
        final_loss: 0.0,
        seconds: None,
        trace: LossTrace { points: vec![] },
    }
}

/// One inception module whose first branch passes the ink through, and a
/// head predicting class 1 when mean ink exceeds 0.3.
fn threshold_net() -> Network {
    let spec = NetworkSpec {
        input: (1, 4, 4),
        stem: vec![],
        body: vec![BodyLayer::Inception(InceptionSpec::new(1, 1, 1, 1, 1, 1))],
        head_dropout: 0.0,
        ..NetworkSpec::mini()
    };
    let mut net = build_network(&spec, &mut SeededRng::new(1)).unwrap();
    let mut states = net.layer_states_mut();
    states[0].weights.value.fill(1.0);
    let head = states.last_mut().unwrap();
    head.weights.value.fill(0.0);
    head.weights.value.set(1, 0, 0, 0, 1.0);
    head.bias.value.set(0, 0, 0, 0, 0.3);
    net
}

#[test]
fn accuracy_on_hand_built_set() {
    let net = threshold_net();
    let inks = [0.1, 0.5, 0.2, 0.9];
    let data: Vec<f64> = inks.iter().flat_map(|&v| [v; 16]).collect();
    // predictions are [0, 1, 0, 1]
    let set = TrainSet::new((1, 4, 4), data.clone(), vec![0, 1, 1, 1]).unwrap();
    assert_eq!(evaluate_accuracy(&net, &set).unwrap(), 0.75);
    let all = TrainSet::new((1, 4, 4), data, vec![0, 1, 0, 1]).unwrap();
    assert_eq!(evaluate_accuracy(&net, &all).unwrap(), 1.0);
}

#[test]
fn untrained_zero_head_scores_half_on_balanced_set() {
    let mut net = build_network(
        &NetworkSpec::mini_with_input(16, 16),
        &mut SeededRng::new(3),
    )
    .unwrap();
    net.layer_states_mut()
        .last_mut()
        .unwrap()
        .weights
        .value
        .fill(0.0);
    let params = tiny("x").render;
    let samples = generate_dataset(&[ShapeFamily::FilledEllipse], 10, 4, &params).unwrap();
    let set = to_network_input(&samples, 1).unwrap();
    assert_eq!(evaluate_accuracy(&net, &set).unwrap(), 0.5);

    let empty = TrainSet::new((1, 16, 16), vec![], vec![]).unwrap();
    assert!(matches!(
        evaluate_accuracy(&net, &empty),
        Err(Error::Empty(_))
    ));
}

#[test]
fn tiny_sweep_artifacts() {
    let cfg = tiny("tiny");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sweep = run_sweep(&cfg, Some(a.path())).unwrap();
    run_sweep(&cfg, Some(b.path())).unwrap();

    assert_eq!(sweep.runs().count(), 4);
    let sizes: Vec<usize> = sweep.sizes.iter().map(|s| s.train_size).collect();
    assert_eq!(sizes, vec![1, 2]);
    for z in &sweep.sizes {
        assert!(z.band_low <= z.mean && z.mean <= z.band_high);
        assert!(z.runs.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
    }

    for ext in ["csv", "svg", "cfg"] {
        let name = format!("tiny.{ext}");
        let x = fs::read(a.path().join(&name)).unwrap();
        let y = fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name} differs between reruns");
    }
    for r in 0..2 {
        for n in [1, 2] {
            assert!(a
                .path()
                .join(format!("checkpoints/tiny-n{n}-r{r}.ckpt"))
                .is_file());
            let trace =
                fs::read_to_string(a.path().join(format!("traces/tiny-n{n}-r{r}.csv"))).unwrap();
            assert_eq!(trace.lines().count(), 4);
        }
    }

    let csv_path = a.path().join("tiny.csv");
    let text = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER));
    assert_eq!(text.lines().count(), 5);
    let rows = parse_csv(&text, &csv_path).unwrap();
    for (row, r) in rows.iter().zip(sweep.runs()) {
        assert_eq!(
            (row.train_size, row.repeat, row.seed),
            (r.train_size, r.repeat, r.seed)
        );
        assert_eq!(row.accuracy, (r.accuracy * 1e6).round() / 1e6);
        assert_eq!(row.final_loss, r.final_loss);
        assert_eq!(row.seconds, None);
    }

    let svg = fs::read_to_string(a.path().join("tiny.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let dots = doc
        .descendants()
        .filter(|n| n.has_tag_name("circle") && n.attribute("class") == Some("mean"))
        .count();
    assert_eq!(dots, 2);
    assert!(doc
        .descendants()
        .any(|n| n.has_tag_name("title") && n.text() == Some("tiny")));

    let saved = fs::read_to_string(a.path().join("tiny.cfg")).unwrap();
    assert_eq!(ExperimentConfig::from_config_text(&saved).unwrap(), cfg);

    // checkpoints reproduce the recorded accuracy
    let spec = cfg.network_spec().unwrap();
    let test = to_network_input(
        &generate_dataset(
            &[cfg.test_family],
            cfg.test_per_class,
            cfg.test_seed(),
            &cfg.render,
        )
        .unwrap(),
        spec.input.0,
    )
    .unwrap();
    let net = Network::load(&a.path().join("checkpoints/tiny-n2-r1.ckpt")).unwrap();
    assert_eq!(
        evaluate_accuracy(&net, &test).unwrap(),
        sweep.summary(2).unwrap().runs[1].accuracy
    );
}

#[test]
fn twenty_rows_for_two_sizes_of_ten() {
    let results = [10, 100]
        .iter()
        .flat_map(|&s| (0..10).map(move |r| run(0.5 + r as f64 / 40.0, s, r)))
        .collect();
    let sweep = aggregate("rows", results).unwrap();
    let csv = csv_string(&sweep);
    assert_eq!(csv.lines().count(), 21);
    let rows = parse_csv(&csv, "rows.csv".as_ref()).unwrap();
    let order: Vec<(usize, usize)> = rows.iter().map(|r| (r.train_size, r.repeat)).collect();
    let expected: Vec<(usize, usize)> = [10, 100]
        .iter()
        .flat_map(|&s| (0..10).map(move |r| (s, r)))
        .collect();
    assert_eq!(order, expected);
}

#[test]
fn constant_sweep_band_collapses_onto_means() {
    let results = [10, 50, 100]
        .iter()
        .flat_map(|&s| (0..10).map(move |r| run(0.9, s, r)))
        .collect();
    let sweep = aggregate("flat", results).unwrap();
    for z in &sweep.sizes {
        assert_eq!((z.band_low, z.band_high), (0.9, 0.9));
        assert!((z.mean - 0.9).abs() < 1e-12);
    }
    let svg = svg_string(&sweep);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let band = doc
        .descendants()
        .find(|n| n.attribute("class") == Some("band"))
        .unwrap();
    let points: Vec<&str> = band.attribute("points").unwrap().split(' ').collect();
    let mean_ys: Vec<&str> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("mean"))
        .map(|n| n.attribute("cy").unwrap())
        .collect();
    assert_eq!(points.len(), 6);
    for p in points {
        let y = p.split(',').nth(1).unwrap();
        assert!(mean_ys.contains(&y));
    }
}

#[test]
fn failed_run_names_its_coordinates() {
    let mut cfg = tiny("boom");
    cfg.apply("lr", "1e300").unwrap();
    let err = run_sweep(&cfg, None).unwrap_err();
    let expected_seed = cfg.run_seed(1, 0);
    match &err {
        Error::Run {
            size, repeat, seed, ..
        } => {
            assert_eq!((*size, *repeat, *seed), (1, 0, expected_seed));
        }
        other => panic!("expected a run error, got {other:?}"),
    }
    let msg = err.to_string();
    assert!(
        msg.contains(&format!("{expected_seed:#018x}")) && msg.contains("repeat 0"),
        "{msg}"
    );
}

#[test]
fn presets_differ_only_in_families() {
    let presets = preset_experiments();
    assert_eq!(presets.len(), 7);
    let names: Vec<&str> = presets.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(
        names,
        ["fig4", "fig6", "fig7", "fig8", "fig9", "fig11", "fig13"]
    );
    let fig7 = preset_experiment("fig7").unwrap();
    assert_eq!(
        fig7.train_families,
        vec![ShapeFamily::RectOutline, ShapeFamily::EllipseOutline]
    );
    assert_eq!(
        preset_experiment("fig13").unwrap().test_family,
        ShapeFamily::RandomTextured
    );
    let base = &presets[0];
    for p in &presets {
        let same = ExperimentConfig {
            name: base.name.clone(),
            train_families: base.train_families.clone(),
            test_family: base.test_family,
            ..p.clone()
        };
        assert_eq!(&same, base);
    }
    assert_eq!(base.train_sizes, vec![10, 25, 50, 100, 250, 500]);
    assert_eq!((base.repeats, base.test_per_class), (10, 250));
    assert_eq!(base.render, RenderParams::default());
    assert_eq!(base.train.iterations, 1000);
    assert_eq!(base.optim.base_lr, 0.01);
}

#[test]
fn train_and_test_seeds_are_disjoint() {
    let cfg = preset_experiment("fig4").unwrap();
    let test = generate_dataset(&[cfg.test_family], 50, cfg.test_seed(), &cfg.render).unwrap();
    let train = generate_dataset(&[cfg.test_family], 50, cfg.run_seed(10, 0), &cfg.render).unwrap();
    let seeds: std::collections::HashSet<u64> = test.iter().map(|s| s.seed).collect();
    assert!(train.iter().all(|s| !seeds.contains(&s.seed)));
}
