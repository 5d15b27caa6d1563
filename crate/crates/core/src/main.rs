use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use abstractnet::check;
use abstractnet::experiment::{
    default_out_dir, evaluate_accuracy, parse_size, preset_experiment, run_sweep, to_network_input,
    ExperimentConfig,
};
use abstractnet::net::Network;
use abstractnet::shapegen::{
    export_dataset, generate_class, generate_dataset, import_dataset, RenderParams, ShapeClass,
    ShapeFamily,
};
use abstractnet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "abstractnet",
    version,
    about = "Inception CNNs on procedurally generated orientation tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export a generated dataset as PGM images plus manifest.csv.
    Gen(GenArgs),
    /// Run one sweep and write CSV, SVG, checkpoints and loss traces.
    Train(TrainArgs),
    /// Print a checkpoint's accuracy on an exported dataset.
    Eval(EvalArgs),
    /// Run gradient checks and reference oracles.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Shape family; a comma list alternates families.
    #[arg(long, default_value = "filled_rect")]
    family: String,
    /// horizontal, vertical or both.
    #[arg(long, default_value = "both")]
    class: String,
    /// Images per class.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Image size as HxW.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    margin: Option<usize>,
    #[arg(long)]
    aspect_min: Option<f64>,
    #[arg(long)]
    thickness: Option<usize>,
    /// Smallest allowed short side of a shape, in pixels.
    #[arg(long)]
    min_short_side: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment preset: fig4, fig6, fig7, fig8, fig9, fig11 or fig13.
    #[arg(long, default_value = "fig4")]
    preset: String,
    /// Config file of `key = value` lines, applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default results/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Network preset: mini or faithful.
    #[arg(long)]
    net: Option<String>,
    /// adagrad or sgd.
    #[arg(long)]
    optim: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Comma list of training images per class.
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Record wall-clock seconds per run in the CSV.
    #[arg(long)]
    wall_clock: bool,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 20160417)]
    seed: u64,
}

fn gen(a: GenArgs) -> Result<()> {
    let mut params = RenderParams::default();
    if let Some(s) = &a.size {
        params.image_size = parse_size(s)?;
    }
    if let Some(m) = a.margin {
        params.margin = m;
    }
    if let Some(v) = a.aspect_min {
        params.aspect_min = v;
    }
    if let Some(t) = a.thickness {
        params.outline_thickness = t;
    }
    if let Some(m) = a.min_short_side {
        params.min_short_side = m;
    }
    let families = a
        .family
        .split(',')
        .map(|f| f.trim().parse())
        .collect::<Result<Vec<ShapeFamily>>>()?;
    let samples = match a.class.as_str() {
        "both" => generate_dataset(&families, a.n, a.seed, &params)?,
        c => generate_class(&families, c.parse::<ShapeClass>()?, a.n, a.seed, &params)?,
    };
    export_dataset(&samples, &a.out)?;
    println!("wrote {} images to {}", samples.len(), a.out.display());
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = preset_experiment(&a.preset)?;
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_config_text(&text)?;
    }
    let flags: [(&str, Option<String>); 9] = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("net", a.net.clone()),
        ("optim", a.optim.clone()),
        ("lr", a.lr.map(|v| v.to_string())),
        ("iters", a.iters.map(|v| v.to_string())),
        ("sizes", a.sizes.clone()),
        ("repeats", a.repeats.map(|v| v.to_string())),
        ("test_per_class", a.test_per_class.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.apply(k, &v)?;
        }
    }
    if a.wall_clock {
        cfg.wall_clock = true;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Param(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.apply(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    if a.dry_run {
        print!("{}", cfg.to_config_text());
        return Ok(());
    }
    let out = a.out.clone().unwrap_or_else(|| default_out_dir(&cfg.name));
    let jobs = cfg.train_sizes.len() * cfg.repeats;
    eprintln!("{}: {jobs} runs -> {}", cfg.name, out.display());
    let started = Instant::now();
    let sweep = run_sweep(&cfg, Some(&out))?;
    println!("train_size  mean      band");
    for z in &sweep.sizes {
        println!(
            "{:>10}  {:.4}    [{:.4}, {:.4}]",
            z.train_size, z.mean, z.band_low, z.band_high
        );
    }
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let net = Network::load(&a.ckpt)?;
    let samples = import_dataset(&a.data)?;
    let set = to_network_input(&samples, net.spec().input.0)?;
    let acc = evaluate_accuracy(&net, &set)?;
    println!("{acc:.6}");
    Ok(())
}

fn selftest(a: SelftestArgs) -> Result<bool> {
    let started = Instant::now();
    let outcomes = check::run_all(a.seed)?;
    let mut failed = 0;
    for o in &outcomes {
        println!("{o}");
        failed += usize::from(!o.passed());
    }
    println!(
        "{} checks, {failed} failed, {:.1}s",
        outcomes.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(failed == 0)
}

fn report(e: &Error) {
    eprintln!("error: {e}");
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        eprintln!("  caused by: {s}");
        src = s.source();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Selftest(a) => selftest(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}
