use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lse_icnn::datagen::{self, GeneParams};
use lse_icnn::experiments::{run_experiment, run_seeds, ExperimentError, ExperimentId, ExperimentOutcome, ExperimentSpec};
use lse_icnn::training::ExecMode;

use crate::checkpoint::{evaluate, Checkpoint, CheckpointError};

#[derive(Debug, Parser)]
#[command(name = "lse-icnn", version, about = "Train and evaluate log-sum-exp mixtures of convex networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset of an experiment as CSV.
    Generate(RunArgs),
    /// Train one seed and write metrics, predictions and checkpoints.
    Train(RunArgs),
    /// Evaluate a checkpoint on the rows of a CSV file.
    Eval(EvalArgs),
    /// Train several seeds and summarise them.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub experiment: ExperimentId,
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Use the long training protocol (150k epochs unless --epochs is set).
    #[arg(long)]
    pub full_protocol: bool,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of consecutive seeds, starting at --seed (default 0).
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV with a header and one numeric column per model input.
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("{}: {e}", path.display()))
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => generate(&load_spec(a)?, &a.out_dir),
        Command::Train(a) => {
            set_jobs(a.jobs)?;
            train(&load_spec(a)?, &a.out_dir)
        }
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => {
            set_jobs(a.run.jobs)?;
            sweep(&load_spec(&a.run)?, a.seeds, &a.run.out_dir)
        }
    }
}

fn set_jobs(jobs: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        // A second call in the same process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Reads the config (if any) and applies the command-line overrides.
pub fn load_spec(a: &RunArgs) -> Result<ExperimentSpec, CliError> {
    let mut spec = match &a.config {
        None => ExperimentSpec::new(a.experiment, 0),
        Some(path) => parse_config(&std::fs::read_to_string(path).map_err(io_at(path))?, a.experiment)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?,
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        spec.train.epochs = Some(epochs);
    }
    if a.full_protocol {
        spec.train.full_protocol = true;
    }
    spec.validate()?;
    Ok(spec)
}

/// Parses a JSON run configuration. `experiment` may be omitted, in which
/// case the one named on the command line is used.
pub fn parse_config(text: &str, experiment: ExperimentId) -> Result<ExperimentSpec, String> {
    let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let obj = value.as_object_mut().ok_or("config must be a JSON object")?;
    match obj.get("experiment") {
        None => {
            obj.insert("experiment".into(), serde_json::Value::String(experiment.name().into()));
        }
        Some(v) if v.as_str() != Some(experiment.name()) => {
            return Err(format!("config is for experiment {v}, command line says {experiment}"));
        }
        Some(_) => {}
    }
    serde_json::from_value(value).map_err(|e| e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))
}

fn generate(spec: &ExperimentSpec, dir: &Path) -> Result<(), CliError> {
    create_dir(dir)?;
    let data = |e: datagen::DataError| CliError::from(ExperimentError::Data { context: "generate".into(), source: e });
    let seed = spec.seed;
    let written = match spec.experiment {
        ExperimentId::Wells1d => {
            let w = &spec.wells;
            let d = datagen::sample_1d_dataset(w.well, w.n_samples, (w.lo, w.hi), seed).map_err(data)?;
            let xs = d.train.inputs.column(0).to_vec();
            let ys = d.train.targets.column(0).to_vec();
            datagen::write_wells_csv(&dir.join("wells1d.csv"), &xs, &ys).map_err(data)?;
            vec![("wells1d.csv".to_string(), xs.len())]
        }
        ExperimentId::Mechchem => {
            let d = datagen::mechchem_dataset(spec.mechchem.n_samples, seed).map_err(data)?;
            datagen::write_mechchem_csv(&dir.join("mechchem.csv"), &d).map_err(data)?;
            vec![("mechchem.csv".to_string(), d.inputs.nrows())]
        }
        ExperimentId::Schlogl => {
            let s = &spec.schlogl;
            let trajs = datagen::schlogl_ensemble(&s.params, s.n_traj, seed).map_err(data)?;
            datagen::write_schlogl_csv(&dir.join("schlogl.csv"), &trajs).map_err(data)?;
            vec![("schlogl.csv".to_string(), trajs.iter().map(|t| t.times.len()).sum())]
        }
        ExperimentId::Elastic => {
            let s = &spec.elastic;
            let paths = datagen::sawtooth_paths(s.n_paths, s.n_steps, seed).map_err(data)?;
            let states = paths
                .iter()
                .map(|p| datagen::elastic_response_uniaxial(p, &s.params))
                .collect::<Result<Vec<_>, _>>()
                .map_err(data)?;
            datagen::write_elastic_csv(&dir.join("elastic.csv"), &states).map_err(data)?;
            vec![("elastic.csv".to_string(), states.iter().map(Vec::len).sum())]
        }
        ExperimentId::Gene => {
            let g = &spec.gene;
            let mut out = Vec::new();
            for b in [g.b_single, g.b_double] {
                let trajs = datagen::gene_trajectories(&GeneParams::with_b(b), g.n_traj, g.t_end, g.dt, g.record_every, seed)
                    .map_err(data)?;
                let name = format!("gene_b{b}.csv");
                datagen::write_gene_csv(&dir.join(&name), &trajs).map_err(data)?;
                out.push((name, trajs.iter().map(|t| t.t.len()).sum()));
            }
            out
        }
    };
    for (name, rows) in written {
        println!("{}: {rows} rows", dir.join(name).display());
    }
    Ok(())
}

fn write_outcome(out: &ExperimentOutcome, spec: &ExperimentSpec, dir: &Path) -> Result<(), CliError> {
    create_dir(dir)?;
    out.write(dir)?;
    for m in &out.models {
        let name = if m.label.is_empty() { "checkpoint.json".to_string() } else { format!("checkpoint_{}.json", m.label) };
        Checkpoint::new(&m.model, m.normalizer.clone(), Some(spec.clone())).save(&dir.join(name))?;
    }
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(spec).expect("spec serializes") + "\n")
        .map_err(io_at(dir))?;
    Ok(())
}

fn summary_line(out: &ExperimentOutcome) -> String {
    let m = &out.metrics;
    let wells = m.well_count.map_or("-".to_string(), |w| w.to_string());
    format!(
        "{} seed {}: rmse {:.4e}  r2 {:.5}  active modes {}  rho {:.3}  wells {}  {:.1}s",
        m.experiment, m.seed, m.rmse, m.r2, m.active_modes, m.rho, wells, m.wall_time_s
    )
}

fn train(spec: &ExperimentSpec, dir: &Path) -> Result<(), CliError> {
    create_dir(dir)?;
    let out = run_experiment(spec)?;
    write_outcome(&out, spec, dir)?;
    println!("{}", summary_line(&out));
    Ok(())
}

fn sweep(spec: &ExperimentSpec, n_seeds: u64, dir: &Path) -> Result<(), CliError> {
    if n_seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    create_dir(dir)?;
    let seeds: Vec<u64> = (0..n_seeds).map(|k| spec.seed + k).collect();
    let results = run_seeds(spec, &seeds, ExecMode::Parallel);
    let mut summary = csv::Writer::from_path(dir.join("summary.csv")).map_err(usage)?;
    summary
        .write_record(["seed", "status", "rmse", "r2", "active_modes", "rho", "well_count", "wall_time_s"])
        .map_err(usage)?;
    let mut first_err = None;
    let mut active = Vec::new();
    for (&seed, res) in seeds.iter().zip(results) {
        match res {
            Ok(out) => {
                write_outcome(&out, &ExperimentSpec { seed, ..spec.clone() }, &dir.join(format!("seed{seed}")))?;
                println!("{}", summary_line(&out));
                let m = &out.metrics;
                active.push(m.active_modes);
                summary
                    .write_record([
                        seed.to_string(),
                        "ok".into(),
                        m.rmse.to_string(),
                        m.r2.to_string(),
                        m.active_modes.to_string(),
                        m.rho.to_string(),
                        m.well_count.map_or(String::new(), |w| w.to_string()),
                        m.wall_time_s.to_string(),
                    ])
                    .map_err(usage)?;
            }
            Err(e) => {
                eprintln!("{} seed {seed}: {e}", spec.experiment);
                summary
                    .write_record([seed.to_string(), format!("error: {e}"), String::new(), String::new(), String::new(), String::new(), String::new(), String::new()])
                    .map_err(usage)?;
                first_err.get_or_insert(CliError::from(e));
            }
        }
    }
    summary.flush().map_err(io_at(dir))?;
    if !active.is_empty() {
        active.sort_unstable();
        println!("median active modes over {} seeds: {}", active.len(), active[(active.len() - 1) / 2]);
    }
    first_err.map_or(Ok(()), Err)
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.checkpoint).map_err(|e| usage(format!("{}: {e}", a.checkpoint.display())))?;
    let model = ck.to_model()?;
    let d = model.input_dim();
    let mut reader = csv::Reader::from_path(&a.input).map_err(|e| usage(format!("{}: {e}", a.input.display())))?;
    let header: Vec<String> = reader.headers().map_err(usage)?.iter().map(str::to_string).collect();
    if header.len() != d {
        return Err(usage(format!("{}: model takes {d} inputs, file has {} columns", a.input.display(), header.len())));
    }
    let mut out_header = header.clone();
    out_header.push("psi".into());
    out_header.extend(header.iter().map(|h| format!("dpsi_d{h}")));
    out_header.extend((0..model.n_modes()).map(|i| format!("w{i}")));
    let sink: Box<dyn std::io::Write> = match &a.output {
        Some(p) => Box::new(std::fs::File::create(p).map_err(io_at(p))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(&out_header).map_err(usage)?;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(usage)?;
        let x = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| usage(format!("{} row {}: {e}", a.input.display(), line + 1)))?;
        let (psi, grad) = evaluate(&model, ck.normalizer.as_ref(), &x).map_err(usage)?;
        let u = ck.normalizer.as_ref().map_or_else(|| x.clone(), |n| n.normalize_inputs(&x));
        let weights = model.membership_weights(&u).map_err(usage)?;
        if !psi.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(CliError::Numerical(format!("non-finite output at row {}", line + 1)));
        }
        let row = rec
            .iter()
            .map(str::to_string)
            .chain(std::iter::once(psi.to_string()))
            .chain(grad.iter().chain(&weights).map(f64::to_string));
        w.write_record(row).map_err(usage)?;
    }
    w.flush().map_err(|e| usage(e.to_string()))?;
    Ok(())
}

