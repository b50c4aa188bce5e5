use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cassle_core::checkpoint;
use cassle_core::config::{parse_config, RunConfig};
use cassle_core::data::{generate_synthetic, read_cifar100_binary, read_features, write_features, SyntheticSpec};
use cassle_core::distill::SslMethod;
use cassle_core::eval::{evaluate_probe, evaluate_tasks, knn_evaluate, train_linear_probe, ProbeConfig};
use cassle_core::gradcheck;
use cassle_core::report::{emit_plot, metrics_csv, read_report, write_report};
use cassle_core::run::{prepare_tasks, run_scenario, RunReport};
use cassle_core::scenario::Regime;
use cassle_core::train::Strategy;
use cassle_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

#[derive(Parser)]
#[command(name = "cassle", version, about = "Continual self-supervised learning with distillation through a predictor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a task sequence and write report.json, metrics.csv and matrix.csv.
    Run(RunArgs),
    /// Linear-probe and k-NN evaluation of a checkpoint or of feature dumps.
    Eval(EvalArgs),
    /// Finite-difference verification of every differentiable loss.
    Gradcheck(GradcheckArgs),
    /// Accuracy-over-tasks chart from one or more report.json files.
    Plot(PlotArgs),
    /// Write a synthetic dataset or a converted CIFAR-100 file as a feature dump.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct Overrides {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated list runs one job per seed.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long, value_parser = parse_method)]
    method: Option<SslMethod>,
    #[arg(long, value_parser = parse_regime)]
    scenario: Option<Regime>,
    #[arg(long)]
    tasks: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Overrides,
    /// Comma-separated list runs one job per strategy.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategy: Vec<Strategy>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Leave volatile fields (wall clock) out of report.json.
    #[arg(long)]
    canonical: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Encoder checkpoint evaluated on the tasks of --config.
    #[arg(long, requires = "config")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feature dump used to fit the probe and the k-NN bank.
    #[arg(long, conflicts_with = "checkpoint", requires = "test_features")]
    train_features: Option<PathBuf>,
    #[arg(long, requires = "train_features")]
    test_features: Option<PathBuf>,
    #[arg(long)]
    label_fraction: Option<f64>,
    #[arg(long, default_value_t = 20)]
    knn_k: usize,
    #[arg(long, default_value_t = 0.07)]
    knn_temperature: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, default_value = "accuracy.svg")]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Convert this CIFAR-100 binary file instead of sampling synthetic data.
    #[arg(long)]
    cifar: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    domains: usize,
}

fn parse_method(s: &str) -> std::result::Result<SslMethod, String> {
    SslMethod::parse(s).ok_or_else(|| format!("unknown method `{s}` (simclr, barlow, byol, swav)"))
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    Regime::parse(s).ok_or_else(|| format!("unknown scenario `{s}` (class, data, domain)"))
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
        format!("unknown strategy `{s}` ({})", names.join(", "))
    })
}

fn base_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => parse_config(p)?,
        None => {
            let method = o.method.ok_or_else(|| Error::config("method", "pass --method or --config"))?;
            let scenario = o.scenario.ok_or_else(|| Error::config("scenario", "pass --scenario or --config"))?;
            RunConfig::new(method, scenario, 0)
        }
    };
    if let Some(m) = o.method {
        cfg.method = m;
    }
    if let Some(s) = o.scenario {
        cfg.scenario = s;
    }
    if let Some(t) = o.tasks {
        cfg.tasks = t;
    }
    Ok(cfg)
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("CSSL_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| Error::config("CSSL_THREADS", format!("`{v}` is not a positive integer")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Contract(e.to_string()))
}

fn save_report(report: &RunReport, dir: &Path, canonical: bool) -> Result<()> {
    if canonical {
        write_report(&report.canonical(), dir)
    } else {
        write_report(report, dir)
    }
}

fn cmd_run(a: RunArgs) -> Result<i32> {
    let base = base_config(&a.common)?;
    let seeds = if a.common.seed.is_empty() { vec![base.seed] } else { a.common.seed.clone() };
    let strategies = if a.strategy.is_empty() { vec![base.strategy] } else { a.strategy.clone() };
    let mut jobs = Vec::new();
    for &s in &strategies {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.strategy = s;
            cfg.seed = seed;
            cfg.validate()?;
            jobs.push(cfg);
        }
    }
    let single = jobs.len() == 1;
    let dir_of = |c: &RunConfig| if single { a.out.clone() } else { a.out.join(format!("{}_seed{}", c.strategy.name(), c.seed)) };
    let pool = thread_pool()?;
    let results: Vec<Result<RunReport>> = pool.install(|| {
        jobs.par_iter()
            .map(|cfg| {
                let dir = dir_of(cfg);
                let report = run_scenario(cfg, Some(&dir))?;
                save_report(&report, &dir, a.canonical)?;
                Ok(report)
            })
            .collect()
    });
    let mut code = 0;
    let mut done = Vec::new();
    for (cfg, r) in jobs.iter().zip(results) {
        let report = r?;
        match (&report.metrics, &report.error) {
            (Some(m), _) => eprintln!(
                "{} {} seed {}: A = {:.4}{}",
                cfg.strategy.name(),
                cfg.method.name(),
                cfg.seed,
                m.average_accuracy,
                m.forgetting.map(|f| format!(", F = {f:.4}")).unwrap_or_default()
            ),
            (None, err) => eprintln!("{} seed {}: incomplete: {}", cfg.strategy.name(), cfg.seed, err.as_deref().unwrap_or("?")),
        }
        code = code.max(report.error_code.unwrap_or(0));
        done.push(report);
    }
    if !single {
        std::fs::write(a.out.join("metrics.csv"), metrics_csv(&done.iter().collect::<Vec<_>>()))?;
        let complete: Vec<RunReport> = done.into_iter().filter(|r| r.complete).collect();
        if !complete.is_empty() {
            emit_plot(&complete, &a.out.join("accuracy.svg"))?;
        }
    }
    Ok(code)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let mut probe = ProbeConfig::default();
    if let Some(f) = a.label_fraction {
        probe.label_fraction = f;
    }
    let out = if let Some(ckpt) = &a.checkpoint {
        let mut cfg = parse_config(a.config.as_deref().expect("required by clap"))?;
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        probe = ProbeConfig { label_fraction: probe.label_fraction, ..cfg.probe.clone() };
        let prepared = prepare_tasks(&cfg)?;
        let enc = checkpoint::load(ckpt)?;
        if enc.input_dim() != prepared.input_dim {
            return Err(Error::Shape(format!("checkpoint expects {} inputs, data has {}", enc.input_dim(), prepared.input_dim)));
        }
        let probe_acc = evaluate_tasks(&enc, &prepared.stream.tasks, &prepared.eval, &probe)?;
        let all = cassle_core::data::LabeledDataset::concat(&prepared.stream.tasks.iter().collect::<Vec<_>>())?;
        let train_f = enc.features(&all.samples)?;
        let k = a.knn_k.min(all.len());
        let knn = prepared
            .eval
            .iter()
            .map(|ev| knn_evaluate(&train_f, &all.labels, &enc.features(&ev.samples)?, &ev.labels, k, a.knn_temperature))
            .collect::<Result<Vec<_>>>()?;
        json!({ "checkpoint_digest": checkpoint::encoder_digest(&enc), "probe_accuracy": probe_acc, "knn_accuracy": knn })
    } else if let (Some(tr), Some(te)) = (&a.train_features, &a.test_features) {
        if let Some(s) = a.seed {
            probe.seed = s;
        }
        let (xf, xl) = read_features(tr)?;
        let (yf, yl) = read_features(te)?;
        let p = train_linear_probe(&xf, &xl, &probe)?;
        let acc = evaluate_probe(&p, &yf, &yl)?;
        let knn = knn_evaluate(&xf, &xl, &yf, &yl, a.knn_k.min(xl.len()), a.knn_temperature)?;
        json!({ "probe_accuracy": acc, "knn_accuracy": knn })
    } else {
        return Err(Error::config("eval", "pass --checkpoint with --config, or --train-features with --test-features"));
    };
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    if a.instances == 0 {
        return Err(Error::config("instances", "must be at least 1"));
    }
    let rows = gradcheck::suite(a.instances);
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4);
    println!("{:<width$}  {:>9}  {:>12}  result", "case", "instances", "max |err|");
    for r in &rows {
        let verdict = match &r.error {
            Some(e) => format!("ERROR {e}"),
            None if r.failures > 0 => format!("FAIL ({} of {})", r.failures, r.instances),
            None => "pass".to_string(),
        };
        println!("{:<width$}  {:>9}  {:>12.3e}  {verdict}", r.name, r.instances, r.worst_abs_err);
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("{} of {} cases passed", rows.len() - failed, rows.len());
    Ok(if failed == 0 { 0 } else { 2 })
}

fn cmd_plot(a: PlotArgs) -> Result<i32> {
    let reports = a.reports.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
    emit_plot(&reports, &a.out)?;
    Ok(0)
}

fn cmd_gen_data(a: GenDataArgs) -> Result<i32> {
    let ds = match &a.cifar {
        Some(p) => read_cifar100_binary(p)?,
        None => {
            let spec = SyntheticSpec {
                n_classes: a.classes,
                samples_per_class: a.per_class,
                input_dim: a.dim,
                n_domains: a.domains,
                seed: a.seed,
                ..Default::default()
            };
            generate_synthetic(&spec)?
        }
    };
    write_features(&a.out, &ds.samples, &ds.labels)?;
    eprintln!("wrote {} samples of dimension {} to {}", ds.len(), ds.dim(), a.out.display());
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Plot(a) => cmd_plot(a),
        Command::GenData(a) => cmd_gen_data(a),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
