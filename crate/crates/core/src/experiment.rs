//! Generalization sweeps: train on one set of shape families, test on
//! another, over a grid of training-set sizes with repeated runs.
//!
//! Every random quantity in a sweep derives from `master_seed`:
//!
//! * the shared test set from `split(master_seed, [TEST])`;
//! * run `(size, repeat)` from `split(master_seed, [RUN, size, repeat])`,
//!   which is further split into training-data, init, shuffle and dropout
//!   streams.
//!
//! Runs are independent jobs and may execute in parallel; results are keyed
//! by `(size, repeat)` so scheduling never changes the output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{argmax_classes, softmax_xent};
use crate::net::{build_network, Network, NetworkSpec};
use crate::optim::{train, LossTrace, OptimConfig, TrainConfig, TrainSet};
use crate::rng::{split_seed, SeededRng};
use crate::shapegen::{generate_dataset, RenderParams, Sample, ShapeFamily, BACKGROUND};

const STREAM_TEST: u64 = 0x7e57;
const STREAM_RUN: u64 = 0x7261;

const DATA: u64 = 0;
const INIT: u64 = 1;
const SHUFFLE: u64 = 2;
const DROPOUT: u64 = 3;

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

pub const CSV_HEADER: &str = "experiment,train_size,repeat,seed,accuracy,final_loss,seconds";

pub const DEFAULT_MASTER_SEED: u64 = 1;

/// Environment variable capping the number of concurrent runs.
pub const THREADS_ENV: &str = "ABSTRACTNET_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub train_families: Vec<ShapeFamily>,
    pub test_family: ShapeFamily,
    /// Training images per class.
    pub train_sizes: Vec<usize>,
    pub repeats: usize,
    pub test_per_class: usize,
    /// Network preset name, `mini` or `faithful`.
    pub net: String,
    pub optim: OptimConfig,
    /// `shuffle_seed` is replaced per run.
    pub train: TrainConfig,
    pub render: RenderParams,
    pub master_seed: u64,
    /// Fill the `seconds` column. Off by default so reruns are byte-identical.
    pub wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "fig4".into(),
            train_families: vec![ShapeFamily::FilledRect],
            test_family: ShapeFamily::FilledEllipse,
            train_sizes: vec![10, 25, 50, 100, 250, 500],
            repeats: 10,
            test_per_class: 250,
            net: "mini".into(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            render: RenderParams::default(),
            master_seed: DEFAULT_MASTER_SEED,
            wall_clock: false,
        }
    }
}

/// One configuration per figure, differing only in name and families.
pub fn preset_experiments() -> Vec<ExperimentConfig> {
    use ShapeFamily::*;
    let mk = |name: &str, train: &[ShapeFamily], test: ShapeFamily| ExperimentConfig {
        name: name.into(),
        train_families: train.to_vec(),
        test_family: test,
        ..ExperimentConfig::default()
    };
    vec![
        mk("fig4", &[FilledRect], FilledEllipse),
        mk("fig6", &[RectOutline], FilledRect),
        mk("fig7", &[RectOutline, EllipseOutline], FilledRect),
        mk("fig8", &[RandomOutline], RandomOutline),
        mk("fig9", &[RandomOutline], RandomFilled),
        mk("fig11", &[RandomOutline], FilledRect),
        mk("fig13", &[RandomOutline], RandomTextured),
    ]
}

pub fn preset_experiment(name: &str) -> Result<ExperimentConfig> {
    preset_experiments()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::Param(format!("unknown experiment preset '{name}'")))
}

fn parse_list<T>(value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Param(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Param(format!("bad value '{value}' for {key}"))),
    }
}

/// Parse `HxW`.
pub fn parse_size(value: &str) -> Result<(usize, usize)> {
    let bad = || Error::Param(format!("bad image size '{value}', expected HxW"));
    let (h, w) = value.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

impl ExperimentConfig {
    /// Set one field from its config-file key. Keys match the long CLI flags
    /// with `-` replaced by `_`.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "name" => self.name = v.to_string(),
            "train_families" => self.train_families = parse_list(v, str::parse)?,
            "test_family" => self.test_family = v.parse()?,
            "sizes" => self.train_sizes = parse_list(v, |s| parse_num("sizes", s))?,
            "repeats" => self.repeats = parse_num(&key, v)?,
            "test_per_class" => self.test_per_class = parse_num(&key, v)?,
            "net" => self.net = v.to_string(),
            "optim" => self.optim.method = v.parse()?,
            "lr" => self.optim.base_lr = parse_num(&key, v)?,
            "momentum" => self.optim.momentum = parse_num(&key, v)?,
            "epsilon" => self.optim.epsilon = parse_num(&key, v)?,
            "iters" => self.train.iterations = parse_num(&key, v)?,
            "batch_size" => self.train.batch_size = parse_num(&key, v)?,
            "loss_report_every" => self.train.loss_report_every = parse_num(&key, v)?,
            "seed" => self.master_seed = parse_num(&key, v)?,
            "size" => self.render.image_size = parse_size(v)?,
            "margin" => self.render.margin = parse_num(&key, v)?,
            "aspect_min" => self.render.aspect_min = parse_num(&key, v)?,
            "thickness" => self.render.outline_thickness = parse_num(&key, v)?,
            "stripe_period" => self.render.stripe_period = parse_num(&key, v)?,
            "stripe_duty" => self.render.stripe_duty = parse_num(&key, v)?,
            "contour_points" => self.render.contour_points = parse_num(&key, v)?,
            "radial_noise" => self.render.radial_noise = parse_num(&key, v)?,
            "min_short_side" => self.render.min_short_side = parse_num(&key, v)?,
            "wall_clock" => self.wall_clock = parse_bool(&key, v)?,
            other => return Err(Error::Param(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Canonical `key = value` text; `from_config_text` reads it back.
    pub fn to_config_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let r = &self.render;
        let lines = [
            ("name", self.name.clone()),
            (
                "train_families",
                join(self.train_families.iter().map(|f| f.to_string()).collect()),
            ),
            ("test_family", self.test_family.to_string()),
            (
                "sizes",
                join(self.train_sizes.iter().map(|s| s.to_string()).collect()),
            ),
            ("repeats", self.repeats.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("net", self.net.clone()),
            ("optim", self.optim.method.to_string()),
            ("lr", self.optim.base_lr.to_string()),
            ("momentum", self.optim.momentum.to_string()),
            ("epsilon", self.optim.epsilon.to_string()),
            ("iters", self.train.iterations.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            (
                "loss_report_every",
                self.train.loss_report_every.to_string(),
            ),
            ("seed", self.master_seed.to_string()),
            ("size", format!("{}x{}", r.image_size.0, r.image_size.1)),
            ("margin", r.margin.to_string()),
            ("aspect_min", r.aspect_min.to_string()),
            ("thickness", r.outline_thickness.to_string()),
            ("stripe_period", r.stripe_period.to_string()),
            ("stripe_duty", r.stripe_duty.to_string()),
            ("contour_points", r.contour_points.to_string()),
            ("radial_noise", r.radial_noise.to_string()),
            ("min_short_side", r.min_short_side.to_string()),
            ("wall_clock", self.wall_clock.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Apply `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored. A `preset` key, if present, must come first and
    /// resets every field to that preset.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Param(format!("config line {}: expected key = value", n + 1))
            })?;
            if k.trim() == "preset" {
                *self = preset_experiment(v.trim())?;
            } else {
                self.apply(k, v)
                    .map_err(|e| Error::Param(format!("config line {}: {e}", n + 1)))?;
            }
        }
        Ok(())
    }

    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_config_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = |m: String| Err(Error::Param(m));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return p(format!(
                "experiment name '{}' must be non-empty [A-Za-z0-9_-]",
                self.name
            ));
        }
        if self.train_families.is_empty() {
            return p("train_families is empty".into());
        }
        if self.train_sizes.is_empty() || self.train_sizes.contains(&0) {
            return p("train sizes must be a non-empty list of positive counts".into());
        }
        if self.repeats < 1 {
            return p("repeats must be >= 1".into());
        }
        if self.test_per_class < 1 {
            return p("test_per_class must be >= 1".into());
        }
        self.optim.validate()?;
        self.train.validate()?;
        self.render.validate()?;
        self.network_spec().map(|_| ())
    }

    /// Network architecture for this sweep's image size.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let (h, w) = self.render.image_size;
        match self.net.as_str() {
            "mini" => Ok(NetworkSpec::mini_with_input(h, w)),
            "faithful" => {
                let spec = NetworkSpec::faithful();
                if (spec.input.1, spec.input.2) != (h, w) {
                    return Err(Error::Param(format!(
                        "the faithful network expects {}x{} images, got {h}x{w}",
                        spec.input.1, spec.input.2
                    )));
                }
                Ok(spec)
            }
            other => Err(Error::Param(format!("unknown network preset '{other}'"))),
        }
    }

    pub fn test_seed(&self) -> u64 {
        split_seed(self.master_seed, &[STREAM_TEST])
    }

    pub fn run_seed(&self, train_size: usize, repeat: usize) -> u64 {
        split_seed(
            self.master_seed,
            &[STREAM_RUN, train_size as u64, repeat as u64],
        )
    }
}

/// Pack images as network input. Pixels are stored as ink, `1 - value`, so
/// the white background is 0 and matches the convolutions' zero padding.
pub fn to_network_input(samples: &[Sample], channels: usize) -> Result<TrainSet> {
    let first = samples.first().ok_or(Error::Empty("sample list"))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut data = Vec::with_capacity(samples.len() * channels * h * w);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(Error::Param(format!(
                "mixed image sizes: {}x{} and {h}x{w}",
                s.image.height, s.image.width
            )));
        }
        for _ in 0..channels {
            data.extend(s.image.data.iter().map(|&v| BACKGROUND - v));
        }
        labels.push(s.class.label());
    }
    TrainSet::new((channels, h, w), data, labels)
}

fn chunks(set: &TrainSet) -> impl Iterator<Item = Vec<usize>> + '_ {
    (0..set.len())
        .step_by(EVAL_CHUNK)
        .map(move |start| (start..(start + EVAL_CHUNK).min(set.len())).collect())
}

/// Fraction of samples whose main-head argmax matches the label.
pub fn evaluate_accuracy(net: &Network, set: &TrainSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut correct = 0usize;
    for idx in chunks(set) {
        let (x, labels) = set.batch(&idx)?;
        let pred = argmax_classes(&net.predict(&x)?);
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Mean main-head cross-entropy over the whole set in eval mode.
pub fn dataset_loss(net: &Network, set: &TrainSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Empty("data set"));
    }
    let mut total = 0.0;
    for idx in chunks(set) {
        let (x, labels) = set.batch(&idx)?;
        let (loss, _) = softmax_xent(&net.predict(&x)?, &labels)?;
        total += loss * idx.len() as f64;
    }
    Ok(total / set.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub train_size: usize,
    pub repeat: usize,
    pub seed: u64,
    pub accuracy: f64,
    /// Eval-mode mean training loss after the last update.
    pub final_loss: f64,
    pub seconds: Option<f64>,
    pub trace: LossTrace,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeSummary {
    pub train_size: usize,
    /// Ordered by repeat index.
    pub runs: Vec<RunResult>,
    pub mean: f64,
    pub band_low: f64,
    pub band_high: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub name: String,
    /// Ascending by training size.
    pub sizes: Vec<SizeSummary>,
}

impl SweepResult {
    pub fn summary(&self, train_size: usize) -> Option<&SizeSummary> {
        self.sizes.iter().find(|s| s.train_size == train_size)
    }

    pub fn runs(&self) -> impl Iterator<Item = &RunResult> {
        self.sizes.iter().flat_map(|s| &s.runs)
    }
}

/// Percentile of sorted data by linear interpolation between order
/// statistics at position `p * (n - 1)`. With ten values `0.1..=1.0` the
/// 5th and 95th percentiles are 0.145 and 0.955.
pub fn percentile(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("percentile input"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Range(format!("percentile {p} outside [0, 1]")));
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Group runs by size and compute mean and the 5th–95th percentile band.
///
/// The band contains the mean whenever a size has at most 20 runs; with more
/// runs a skewed distribution can put the mean outside it.
pub fn aggregate(name: &str, results: Vec<RunResult>) -> Result<SweepResult> {
    if results.is_empty() {
        return Err(Error::Empty("run results"));
    }
    let mut groups: BTreeMap<usize, Vec<RunResult>> = BTreeMap::new();
    for r in results {
        groups.entry(r.train_size).or_default().push(r);
    }
    let sizes = groups
        .into_iter()
        .map(|(train_size, mut runs)| {
            runs.sort_by_key(|r| r.repeat);
            let mut acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
            let mean = acc.iter().sum::<f64>() / acc.len() as f64;
            acc.sort_by(f64::total_cmp);
            Ok(SizeSummary {
                train_size,
                band_low: percentile(&acc, 0.05)?,
                band_high: percentile(&acc, 0.95)?,
                mean,
                runs,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepResult {
        name: name.to_string(),
        sizes,
    })
}

/// One training run, fully determined by `cfg`, the test set and `(size, repeat)`.
pub fn run_once(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    test: &TrainSet,
    train_size: usize,
    repeat: usize,
) -> Result<(RunResult, Network)> {
    let seed = cfg.run_seed(train_size, repeat);
    let started = Instant::now();
    let wrap = |e: Error| Error::Run {
        size: train_size,
        repeat,
        seed,
        source: Box::new(e),
    };
    let body = || -> Result<(RunResult, Network)> {
        let samples = generate_dataset(
            &cfg.train_families,
            train_size,
            split_seed(seed, &[DATA]),
            &cfg.render,
        )?;
        let set = to_network_input(&samples, spec.input.0)?;
        let mut net = build_network(spec, &mut SeededRng::new(split_seed(seed, &[INIT])))?;
        let tc = TrainConfig {
            shuffle_seed: split_seed(seed, &[SHUFFLE]),
            ..cfg.train
        };
        let trace = train(
            &mut net,
            &set,
            &cfg.optim,
            &tc,
            &mut SeededRng::new(split_seed(seed, &[DROPOUT])),
        )?;
        let final_loss = dataset_loss(&net, &set)?;
        let accuracy = evaluate_accuracy(&net, test)?;
        let result = RunResult {
            train_size,
            repeat,
            seed,
            accuracy,
            final_loss,
            seconds: cfg.wall_clock.then(|| started.elapsed().as_secs_f64()),
            trace,
        };
        Ok((result, net))
    };
    body().map_err(wrap)
}

/// Worker count from `ABSTRACTNET_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Param(format!(
                "{THREADS_ENV}='{v}' must be a positive integer"
            ))),
        },
    }
}

/// Run every `(size, repeat)` job and aggregate. When `out` is given, the
/// CSV, SVG, config, per-run checkpoints and loss traces are written there.
pub fn run_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SweepResult> {
    cfg.validate()?;
    let spec = cfg.network_spec()?;
    let test_samples = generate_dataset(
        &[cfg.test_family],
        cfg.test_per_class,
        cfg.test_seed(),
        &cfg.render,
    )?;
    let test = to_network_input(&test_samples, spec.input.0)?;
    if let Some(dir) = out {
        for d in [
            dir.to_path_buf(),
            dir.join("checkpoints"),
            dir.join("traces"),
        ] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let jobs: Vec<(usize, usize)> = cfg
        .train_sizes
        .iter()
        .flat_map(|&s| (0..cfg.repeats).map(move |r| (s, r)))
        .collect();
    let job = |&(size, repeat): &(usize, usize)| -> Result<RunResult> {
        let (result, net) = run_once(cfg, &spec, &test, size, repeat)?;
        if let Some(dir) = out {
            let stem = format!("{}-n{size}-r{repeat}", cfg.name);
            net.save(&dir.join("checkpoints").join(format!("{stem}.ckpt")))?;
            let tpath = dir.join("traces").join(format!("{stem}.csv"));
            fs::write(&tpath, result.trace.to_csv()).map_err(|e| Error::io(&tpath, e))?;
        }
        Ok(result)
    };
    let outcomes: Vec<Result<RunResult>> = match thread_cap()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Param(format!("thread pool: {e}")))?
            .install(|| jobs.par_iter().map(job).collect()),
        None => jobs.par_iter().map(job).collect(),
    };
    // report the first failure in job order, independent of scheduling
    let results = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let sweep = aggregate(&cfg.name, results)?;
    if let Some(dir) = out {
        write_artifacts(cfg, &sweep, dir)?;
    }
    Ok(sweep)
}

pub fn write_artifacts(cfg: &ExperimentConfig, sweep: &SweepResult, dir: &Path) -> Result<()> {
    emit_csv(sweep, &dir.join(format!("{}.csv", cfg.name)))?;
    emit_svg_plot(sweep, &dir.join(format!("{}.svg", cfg.name)))?;
    let cpath = dir.join(format!("{}.cfg", cfg.name));
    fs::write(&cpath, cfg.to_config_text()).map_err(|e| Error::io(&cpath, e))
}

pub fn csv_string(sweep: &SweepResult) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in sweep.runs() {
        let secs = r.seconds.map(|t| format!("{t:.3}")).unwrap_or_default();
        // `{}` on f64 prints the shortest text that parses back exactly
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{},{}",
            sweep.name, r.train_size, r.repeat, r.seed, r.accuracy, r.final_loss, secs
        );
    }
    s
}

pub fn emit_csv(sweep: &SweepResult, path: &Path) -> Result<()> {
    fs::write(path, csv_string(sweep)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub experiment: String,
    pub train_size: usize,
    pub repeat: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub final_loss: f64,
    pub seconds: Option<f64>,
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::format(path, "unexpected CSV header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::format(path, format!("line {}: bad {what}", i + 2));
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 7 {
                return Err(bad("column count"));
            }
            Ok(CsvRow {
                experiment: c[0].to_string(),
                train_size: c[1].parse().map_err(|_| bad("train_size"))?,
                repeat: c[2].parse().map_err(|_| bad("repeat"))?,
                seed: c[3].parse().map_err(|_| bad("seed"))?,
                accuracy: c[4].parse().map_err(|_| bad("accuracy"))?,
                final_loss: c[5].parse().map_err(|_| bad("final_loss"))?,
                seconds: if c[6].is_empty() {
                    None
                } else {
                    Some(c[6].parse().map_err(|_| bad("seconds"))?)
                },
            })
        })
        .collect()
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

/// Standalone SVG: log-scale training size against accuracy, one blue dot
/// per size at the mean and a shaded polygon spanning the band.
pub fn svg_string(sweep: &SweepResult) -> String {
    let pw = SVG_W - LEFT - RIGHT;
    let ph = SVG_H - TOP - BOTTOM;
    let logs: Vec<f64> = sweep
        .sizes
        .iter()
        .map(|s| (s.train_size as f64).ln())
        .collect();
    let (mut lo, mut hi) = logs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if hi - lo <= 1e-9 {
        lo -= std::f64::consts::LN_2;
        hi += std::f64::consts::LN_2;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let px = |size: usize| LEFT + ((size as f64).ln() - lo) / (hi - lo) * pw;
    let py = |acc: f64| TOP + (1.0 - acc) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}" font-family="sans-serif" font-size="12">"#
    );
    let title = xml_escape(&sweep.name);
    let _ = writeln!(s, "<title>{title}</title>");
    let _ = writeln!(
        s,
        r#"<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text class="title" x="{:.2}" y="24" text-anchor="middle" font-size="16">{title}</text>"#,
        LEFT + pw / 2.0
    );
    for k in 0..=10 {
        let acc = k as f64 / 10.0;
        let y = py(acc);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            LEFT + pw
        );
        if k % 2 == 0 {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{acc:.1}</text>"#,
                LEFT - 6.0,
                y + 4.0
            );
        }
    }
    for sz in &sweep.sizes {
        let x = px(sz.train_size);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            TOP + ph,
            TOP + ph + 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph + 18.0,
            sz.train_size
        );
    }
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT:.2},{TOP:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    let _ = writeln!(
        s,
        r#"<text class="xlabel" x="{:.2}" y="{:.2}" text-anchor="middle">training images per class (log scale)</text>"#,
        LEFT + pw / 2.0,
        SVG_H - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text class="ylabel" x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">accuracy</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    let upper = sweep
        .sizes
        .iter()
        .map(|z| (px(z.train_size), py(z.band_high)));
    let lower = sweep
        .sizes
        .iter()
        .rev()
        .map(|z| (px(z.train_size), py(z.band_low)));
    let points: Vec<String> = upper
        .chain(lower)
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect();
    let _ = writeln!(
        s,
        r##"<polygon class="band" points="{}" fill="#6baed6" fill-opacity="0.4" stroke="#6baed6" stroke-width="0.5"/>"##,
        points.join(" ")
    );
    for z in &sweep.sizes {
        let _ = writeln!(
            s,
            r##"<circle class="mean" cx="{:.2}" cy="{:.2}" r="4" fill="#1f3fbf"><title>{}: {:.4}</title></circle>"##,
            px(z.train_size),
            py(z.mean),
            z.train_size,
            z.mean
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn emit_svg_plot(sweep: &SweepResult, path: &Path) -> Result<()> {
    fs::write(path, svg_string(sweep)).map_err(|e| Error::io(path, e))
}

/// Default output directory for a sweep.
pub fn default_out_dir(name: &str) -> PathBuf {
    PathBuf::from("results").join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run(size: usize, repeat: usize, accuracy: f64) -> RunResult {
        RunResult {
            train_size: size,
            repeat,
            seed: 0,
            accuracy,
            final_loss: 0.0,
            seconds: None,
            trace: LossTrace { points: vec![] },
        }
    }

    #[test]
    fn aggregate_constant() {
        let s = aggregate("t", (0..10).map(|r| run(5, r, 0.9)).collect()).unwrap();
        let z = &s.sizes[0];
        assert!((z.mean - 0.9).abs() < 1e-15);
        assert_eq!((z.band_low, z.band_high), (0.9, 0.9));
    }

    #[test]
    fn aggregate_two_values() {
        let s = aggregate("t", vec![run(1, 0, 0.0), run(1, 1, 1.0)]).unwrap();
        assert_eq!(s.sizes[0].mean, 0.5);
    }

    #[test]
    fn percentiles_of_tenths() {
        let v: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
        // independent: positions 0.45 and 8.55 between neighbouring order statistics
        let lo = v[0] + 0.45 * (v[1] - v[0]);
        let hi = v[8] + 0.55 * (v[9] - v[8]);
        assert!((percentile(&v, 0.05).unwrap() - 0.145).abs() < 1e-12);
        assert!((percentile(&v, 0.95).unwrap() - 0.955).abs() < 1e-12);
        assert!((percentile(&v, 0.05).unwrap() - lo).abs() < 1e-15);
        assert!((percentile(&v, 0.95).unwrap() - hi).abs() < 1e-15);
    }

    #[test]
    fn aggregate_empty_is_error() {
        assert!(matches!(aggregate("t", vec![]), Err(Error::Empty(_))));
    }

    #[test]
    fn presets() {
        let p = preset_experiments();
        assert_eq!(p.len(), 7);
        let names: Vec<&str> = p.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(
            names,
            ["fig4", "fig6", "fig7", "fig8", "fig9", "fig11", "fig13"]
        );
        let fig7 = &p[2];
        assert_eq!(
            fig7.train_families,
            [ShapeFamily::RectOutline, ShapeFamily::EllipseOutline]
        );
        assert_eq!(p[6].test_family, ShapeFamily::RandomTextured);
        for c in &p {
            c.validate().unwrap();
            let mut same = c.clone();
            same.name = p[0].name.clone();
            same.train_families = p[0].train_families.clone();
            same.test_family = p[0].test_family;
            assert_eq!(same, p[0]);
        }
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = preset_experiment("fig7").unwrap();
        cfg.optim.base_lr = 0.003;
        cfg.train_sizes = vec![3, 7];
        cfg.render.image_size = (32, 48);
        cfg.wall_clock = true;
        let back = ExperimentConfig::from_config_text(&cfg.to_config_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_preset_key_and_errors() {
        let cfg =
            ExperimentConfig::from_config_text("# comment\npreset = fig13\nrepeats = 3\n").unwrap();
        assert_eq!(cfg.test_family, ShapeFamily::RandomTextured);
        assert_eq!(cfg.repeats, 3);
        assert!(ExperimentConfig::from_config_text("bogus = 1").is_err());
        assert!(ExperimentConfig::from_config_text("repeats").is_err());
        assert!(ExperimentConfig::from_config_text("repeats = x").is_err());
    }

    #[test]
    fn seeds_are_disjoint() {
        let cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        assert!(seen.insert(cfg.test_seed()));
        for &s in &cfg.train_sizes {
            for r in 0..cfg.repeats {
                assert!(seen.insert(cfg.run_seed(s, r)));
            }
        }
    }

    #[test]
    fn faithful_requires_its_input_size() {
        let cfg = ExperimentConfig {
            net: "faithful".into(),
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("32x48").unwrap(), (32, 48));
        assert!(parse_size("32").is_err());
    }

    proptest! {
        #[test]
        fn band_brackets_mean(acc in proptest::collection::vec(0.0f64..=1.0, 1..=20)) {
            let s = aggregate("p", acc.iter().enumerate().map(|(r, &a)| run(10, r, a)).collect()).unwrap();
            let z = &s.sizes[0];
            prop_assert!(z.band_low <= z.mean + 1e-12 && z.mean <= z.band_high + 1e-12);
        }

        #[test]
        fn only_extremes_leave_band(acc in proptest::collection::vec(0.0f64..=1.0, 10)) {
            let s = aggregate("p", acc.iter().enumerate().map(|(r, &a)| run(10, r, a)).collect()).unwrap();
            let z = &s.sizes[0];
            let mut sorted = acc.clone();
            sorted.sort_by(f64::total_cmp);
            for &v in &sorted[1..9] {
                prop_assert!(z.band_low <= v && v <= z.band_high);
            }
        }

        #[test]
        fn aggregate_is_order_free(mut acc in proptest::collection::vec(0.0f64..=1.0, 1..12), seed: u64) {
            let a = aggregate("p", acc.iter().enumerate().map(|(r, &v)| run(3, r, v)).collect()).unwrap();
            let mut runs: Vec<RunResult> = acc.drain(..).enumerate().map(|(r, v)| run(3, r, v)).collect();
            SeededRng::new(seed).shuffle(&mut runs);
            let b = aggregate("p", runs).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
