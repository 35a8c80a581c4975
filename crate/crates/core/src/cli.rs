//! Command-line front end. `run` parses arguments, executes one subcommand
//! and returns the process exit code.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench::{self, BenchmarkProblem, ReferenceOptions};
use crate::error::{Error, Result};
use crate::odeint::Method;
use crate::pinet::{Checkpoint, NetShape};
use crate::train::{fit, FitOptions, TrainConfig, TrainReport, TrainStatus, TrajectoryDataset, Weighting};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "stiffnode",
    version,
    about = "Train stiff neural ODEs and recover polynomial equations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a reference dataset (CSV plus provenance sidecar).
    Generate(GenerateArgs),
    /// Train a polynomial network on one dataset.
    Train(TrainArgs),
    /// Train every (method, n) cell and write error-vs-n tables.
    Sweep(SweepArgs),
    /// Convert a network checkpoint to a recovered-model JSON.
    Extract(ExtractArgs),
    /// Compare RKF45 and Radau5 reference work over one oscillation period.
    StiffnessDemo(StiffnessArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Benchmark problem name.
    #[arg(long)]
    pub problem: String,
    /// Number of uniformly spaced grid points.
    #[arg(long)]
    pub n: usize,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct TrainOverrides {
    /// Polynomial degree of the network (defaults to the problem's).
    #[arg(long)]
    pub degree: Option<usize>,
    /// Hidden width (defaults to the number of monomials).
    #[arg(long)]
    pub width: Option<usize>,
    /// Initial learning rate.
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    /// Final learning rate of the cosine schedule.
    #[arg(long, default_value_t = 1e-4)]
    pub lr_final: f64,
    #[arg(long, default_value_t = 20_000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Newton residual tolerance for implicit steps.
    #[arg(long, default_value_t = 1e-10)]
    pub newton_tol: f64,
    /// IF Euler: treat the linearization L as constant when differentiating.
    #[arg(long)]
    pub freeze_linearization: bool,
    /// Weight every segment equally.
    #[arg(long)]
    pub no_segment_weights: bool,
    /// On divergence, halve the learning rate and resume from the best
    /// parameters, up to this many times.
    #[arg(long, default_value_t = 0)]
    pub backoff_retries: usize,
    /// Levenberg–Marquardt iterations after Adam.
    #[arg(long, default_value_t = 0)]
    pub refine: usize,
    /// Parameter initialization scale.
    #[arg(long, default_value_t = 1e-3)]
    pub init_scale: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Benchmark problem; supplies the dataset (unless --data) and the truth.
    #[arg(long)]
    pub problem: Option<String>,
    /// Dataset CSV to train on instead of generating one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub method: String,
    /// Grid size when generating the dataset.
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub config: TrainOverrides,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub problem: String,
    /// Comma-separated methods.
    #[arg(long = "method", alias = "methods", value_delimiter = ',', required = true)]
    pub methods: Vec<String>,
    /// Comma-separated grid sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub n_list: Vec<usize>,
    #[command(flatten)]
    pub config: TrainOverrides,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Checkpoint JSON written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StiffnessArgs {
    #[arg(long, default_value = "vanderpol")]
    pub problem: String,
    /// RKF45 relative tolerance (absolute is 1e-3 of it); also the
    /// reference agreement tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub rtol: f64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_divergence() {
                EXIT_DIVERGED
            } else {
                EXIT_USAGE
            }
        }
    }
}

pub fn execute(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Extract(a) => cmd_extract(a),
        Command::StiffnessDemo(a) => cmd_stiffness_demo(a),
    }
}

pub fn dataset_file_name(problem: &str, n: usize) -> String {
    format!("{problem}-n{n}.csv")
}

pub fn cell_stem(problem: &str, method: Method, n: usize, seed: u64) -> String {
    format!("{problem}-{}-n{n}-s{seed}", method.name())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> Result<i32> {
    let p = bench::problem(&a.problem)?;
    let data = bench::generate_reference(&p, a.n, &ReferenceOptions::default())?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(dataset_file_name(&p.name, a.n));
    data.write(&path)?;
    println!(
        "wrote {} rows on [{}, {}] to {}",
        data.len(),
        data.times[0],
        data.times[data.len() - 1],
        path.display()
    );
    Ok(EXIT_OK)
}

fn build_config(method: Method, dim: usize, default_degree: usize, o: &TrainOverrides) -> Result<TrainConfig> {
    let degree = o.degree.unwrap_or(default_degree);
    let mut shape = NetShape::for_system(dim, degree);
    if let Some(w) = o.width {
        shape.width = w;
    }
    let mut c = TrainConfig::new(method, shape);
    c.lr = o.lr;
    c.lr_final = o.lr_final;
    c.epochs = o.epochs;
    c.seed = o.seed;
    c.init_scale = o.init_scale;
    c.newton_tol = o.newton_tol;
    c.freeze_linearization = o.freeze_linearization;
    c.weighting = if o.no_segment_weights {
        Weighting::Uniform
    } else {
        Weighting::Segment
    };
    c.backoff_retries = o.backoff_retries;
    c.refine_iterations = o.refine;
    c.validate()?;
    Ok(c)
}

/// Writes report, recovered model, loss history and checkpoint for one cell.
fn write_train_outputs(out: &Path, stem: &str, report: &TrainReport) -> Result<()> {
    fs::create_dir_all(out)?;
    write_file(
        &out.join(format!("{stem}.report.json")),
        &(report.to_json_string() + "\n"),
    )?;
    write_file(
        &out.join(format!("{stem}.model.json")),
        &(report.recovered.to_json_string() + "\n"),
    )?;
    write_file(&out.join(format!("{stem}.loss.csv")), &report.loss_csv())?;
    let ckpt = Checkpoint {
        shape: report.config.shape,
        seed: report.config.seed,
        params: report.params.clone(),
    };
    let text = serde_json::to_string_pretty(&ckpt)? + "\n";
    write_file(&out.join(format!("{stem}.checkpoint.json")), &text)?;
    Ok(())
}

/// Prints the block in one write so concurrent sweep cells do not interleave.
fn print_summary(stem: &str, report: &TrainReport) {
    use std::fmt::Write as _;
    let loss = report.final_loss.map_or("n/a".to_string(), |l| format!("{l:.6e}"));
    let mut text = match &report.divergence {
        None => format!("{stem}: converged, loss {loss}, {} epochs\n", report.epochs_run),
        Some(d) => format!("{stem}: diverged at epoch {}: {}\n", d.epoch, d.error),
    };
    if let Some(errs) = &report.errors {
        let _ = writeln!(
            text,
            "  max relative error {:.6e}, max spurious {:.6e}",
            errs.max_relative(),
            errs.max_spurious()
        );
    }
    for line in report.recovered.to_string().lines() {
        let _ = writeln!(text, "  {line}");
    }
    print!("{text}");
    eprintln!("  {stem}: wall clock {:.2}s", report.wall_clock_seconds);
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let method: Method = a.method.parse()?;
    let problem = a.problem.as_deref().map(bench::problem).transpose()?;
    let data = match (&a.data, &problem) {
        (Some(path), _) => TrajectoryDataset::read(path)?,
        (None, Some(p)) => {
            let n =
                a.n.ok_or_else(|| Error::InvalidConfig("--n is required without --data".into()))?;
            bench::generate_reference(p, n, &ReferenceOptions::default())?
        }
        (None, None) => return Err(Error::InvalidConfig("one of --problem or --data is required".into())),
    };
    // With only a dataset, take the truth from its provenance when it names
    // a registered problem of the same dimension.
    let problem = problem.or_else(|| {
        bench::problem(&data.provenance.problem)
            .ok()
            .filter(|p| p.dim == data.dim())
    });
    let name = problem
        .as_ref()
        .map_or(data.provenance.problem.clone(), |p| p.name.clone());
    let default_degree = problem.as_ref().map_or(1, |p| p.degree);
    let config = build_config(method, data.dim(), default_degree, &a.config)?;
    let truth = problem.as_ref().map(|p| &p.truth);
    let mut report = fit(
        &data,
        &config,
        FitOptions {
            truth,
            ..FitOptions::default()
        },
    )?;
    report.problem = name.clone();
    let stem = cell_stem(&name, method, data.len(), config.seed);
    write_train_outputs(&a.out, &stem, &report)?;
    print_summary(&stem, &report);
    Ok(match report.status {
        TrainStatus::Converged => EXIT_OK,
        TrainStatus::Diverged => EXIT_DIVERGED,
    })
}

#[derive(Debug, Serialize)]
struct SweepCell {
    method: String,
    n: usize,
    status: String,
    final_loss: Option<f64>,
    max_relative: Option<f64>,
    max_spurious: Option<f64>,
    report: Option<String>,
    error: Option<String>,
}

fn format_monomial(m: &[u32]) -> String {
    m.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(" ")
}

fn sweep_rows(n: usize, report: &TrainReport) -> String {
    let status = match report.status {
        TrainStatus::Converged => "converged",
        TrainStatus::Diverged => "diverged",
    };
    let mut out = String::new();
    if let Some(errs) = report.errors.as_ref().filter(|_| report.converged()) {
        for e in &errs.relative {
            out.push_str(&format!(
                "{n},{status},relative,{},{},{:.17e},{:.17e},{:.17e}\n",
                e.equation,
                format_monomial(&e.monomial),
                e.truth,
                e.recovered,
                e.relative
            ));
        }
        for s in &errs.spurious {
            out.push_str(&format!(
                "{n},{status},spurious,{},{},0,{:.17e},{:.17e}\n",
                s.equation,
                format_monomial(&s.monomial),
                report.recovered.coefficient(s.equation, &s.monomial),
                s.magnitude
            ));
        }
    } else {
        out.push_str(&format!("{n},{status},,,,,,\n"));
    }
    out
}

pub const SWEEP_HEADER: &str = "n,status,kind,equation,monomial,truth,recovered,error\n";

fn cmd_sweep(a: &SweepArgs) -> Result<i32> {
    let p: BenchmarkProblem = bench::problem(&a.problem)?;
    let methods: Vec<Method> = a.methods.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    let mut n_list = a.n_list.clone();
    n_list.sort_unstable();
    n_list.dedup();
    if let Some(bad) = n_list.iter().find(|n| **n < 2) {
        return Err(Error::InvalidConfig(format!("n must be at least 2, got {bad}")));
    }
    let configs: Vec<TrainConfig> = methods
        .iter()
        .map(|m| build_config(*m, p.dim, p.degree, &a.config))
        .collect::<Result<_>>()?;
    fs::create_dir_all(&a.out)?;

    let mut datasets = Vec::with_capacity(n_list.len());
    for &n in &n_list {
        datasets.push(bench::generate_reference(&p, n, &ReferenceOptions::default())?);
    }
    let jobs: Vec<(usize, usize)> = (0..n_list.len())
        .flat_map(|k| (0..methods.len()).map(move |i| (k, i)))
        .collect();
    let workers = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |w| w.get()))
        .clamp(1, jobs.len().max(1));
    let truth = &p.truth;
    let run_cell = |(k, i): (usize, usize)| -> Result<(String, SweepCell)> {
        let n = n_list[k];
        let (method, config) = (methods[i], &configs[i]);
        let stem = cell_stem(&p.name, method, n, config.seed);
        let result = fit(
            &datasets[k],
            config,
            FitOptions {
                truth: Some(truth),
                ..FitOptions::default()
            },
        );
        Ok(match result {
            Ok(mut report) => {
                report.problem = p.name.clone();
                write_train_outputs(&a.out, &stem, &report)?;
                print_summary(&stem, &report);
                let cell = SweepCell {
                    method: method.name().into(),
                    n,
                    status: if report.converged() { "converged" } else { "diverged" }.into(),
                    final_loss: report.final_loss,
                    max_relative: report.errors.as_ref().map(|e| e.max_relative()),
                    max_spurious: report.errors.as_ref().map(|e| e.max_spurious()),
                    report: Some(format!("{stem}.report.json")),
                    error: report.divergence.as_ref().map(|d| d.error.clone()),
                };
                (sweep_rows(n, &report), cell)
            }
            Err(e) => {
                println!("{stem}: failed: {e}");
                let cell = SweepCell {
                    method: method.name().into(),
                    n,
                    status: "failed".into(),
                    final_loss: None,
                    max_relative: None,
                    max_spurious: None,
                    report: None,
                    error: Some(e.to_string()),
                };
                (format!("{n},failed,,,,,,\n"), cell)
            }
        })
    };

    // Cells are independent; workers pull the next job index and results
    // are reassembled in job order so the output files do not depend on
    // scheduling.
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(String, SweepCell)>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&job) = jobs.get(j) else { break };
                let out = run_cell(job);
                results.lock().expect("sweep results lock")[j] = Some(out);
            });
        }
    });
    let mut tables: BTreeMap<usize, String> = (0..methods.len()).map(|i| (i, SWEEP_HEADER.to_string())).collect();
    let mut cells = Vec::with_capacity(jobs.len());
    for (&(_, i), r) in jobs.iter().zip(results.into_inner().expect("sweep results lock")) {
        let (rows, cell) = r.expect("every job ran")?;
        tables.get_mut(&i).expect("table").push_str(&rows);
        cells.push(cell);
    }
    let seed = a.config.seed;
    for (i, method) in methods.iter().enumerate() {
        let path = a.out.join(format!("{}-{}-s{seed}.sweep.csv", p.name, method.name()));
        write_file(&path, &tables[&i])?;
    }
    let index = serde_json::to_string_pretty(&cells)? + "\n";
    write_file(&a.out.join(format!("{}-s{seed}.index.json", p.name)), &index)?;
    Ok(EXIT_OK)
}

fn cmd_extract(a: &ExtractArgs) -> Result<i32> {
    let text = fs::read_to_string(&a.checkpoint)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    let (net, theta) = ckpt.into_parts()?;
    let model = net.extract_polynomial(&theta)?;
    let json = model.to_json_string() + "\n";
    match &a.out {
        Some(path) => {
            write_file(path, &json)?;
            println!("wrote {}", path.display());
        }
        None => {
            std::io::stdout().write_all(json.as_bytes())?;
        }
    }
    Ok(EXIT_OK)
}

/// Integration window for the stiffness comparison: one relaxation period
/// for Van der Pol, the registered span otherwise.
pub fn stiffness_span(p: &BenchmarkProblem) -> (f64, f64) {
    if p.name == "vanderpol" {
        (0.0, bench::van_der_pol_period(1000.0))
    } else {
        p.t_span
    }
}

fn cmd_stiffness_demo(a: &StiffnessArgs) -> Result<i32> {
    let p = bench::problem(&a.problem)?;
    if !(a.rtol > 0.0 && a.rtol < 1.0) {
        return Err(Error::InvalidConfig(format!("rtol must lie in (0, 1), got {}", a.rtol)));
    }
    let record = bench::stiffness_demo(&p, stiffness_span(&p), a.rtol)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(format!("{}-stiffness-rtol{:e}.json", p.name, a.rtol));
    write_file(&path, &(serde_json::to_string_pretty(&record)? + "\n"))?;
    println!(
        "RKF45: {} evaluations ({} points); Radau5: {} evaluations ({} points); ratio {:.1}",
        record.rkf45_evaluations,
        record.rkf45_points,
        record.radau_evaluations,
        record.radau_points,
        record.evaluation_ratio
    );
    println!("wrote {}", path.display());
    Ok(EXIT_OK)
}
