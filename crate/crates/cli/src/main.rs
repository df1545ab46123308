//! `mrfseg`: command-line front end for the segmentation library.
//!
//! Five subcommands cover the full workflow: `simulate` synthesizes a
//! degraded phantom volume (optionally emitting its ground-truth labels and
//! a sampled training TSV), `train` fits tissue intensity models from a
//! TSV, `segment` runs one of the optimizers on a volume, `score` compares
//! two label maps, and `benchmark` drives a figure-style error-curve sweep
//! to CSV.
//!
//! Run configuration is layered: built-in defaults, then a `--config` JSON
//! file, then individual flags. Every output file is written to a temporary
//! file in the destination directory and atomically renamed, so a failing
//! run never leaves partial artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mrfseg_core::harness::{sample_training, SHELL_RIPPLE_DEFAULT, TRAIN_POINTS_DEFAULT};
use mrfseg_core::intensity::LOG_CLAMP_DEFAULT;
use mrfseg_core::{
    error_rate, load_model_file, mvol, run_benchmark, save_model, segment, shell_template,
    sinusoidal_gyrus, synthesize, thickness_error, write_csv, Algorithm, BenchmarkSpec, Dims,
    EchoMode, ErrorReport, PhantomSpec, RunParams, TissueMeans, TissueModels, TrainingSet,
    THICKNESS_WINDOW_RADIUS,
};

#[derive(Parser)]
#[command(
    name = "mrfseg",
    version,
    about = "MAP tissue segmentation of multi-echo MR volumes",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit tissue intensity models from a training TSV and write model JSON.
    Train(TrainArgs),
    /// Synthesize a phantom volume (MVOL), optionally with truth labels and
    /// a training TSV sampled from it.
    Simulate(SimulateArgs),
    /// Segment a volume: write label and bias MVOLs plus diagnostics JSON.
    Segment(SegmentArgs),
    /// Compare a predicted label MVOL against ground truth.
    Score(ScoreArgs),
    /// Run one experiment family across parameter values, algorithms, and
    /// seeds; write one CSV row per run.
    Benchmark(BenchmarkArgs),
}

// ---------------------------------------------------------------------------
// Shared argument types
// ---------------------------------------------------------------------------

/// Spatial grid written as `NXxNYxNZ`, e.g. `128x128x8`.
#[derive(Clone, Copy, Debug)]
struct GridDims {
    nx: usize,
    ny: usize,
    nz: usize,
}

impl FromStr for GridDims {
    type Err = String;

    fn from_str(s: &str) -> Result<GridDims, String> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        if parts.len() != 3 {
            return Err(format!("expected NXxNYxNZ, got {s:?}"));
        }
        let axis = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad grid extent {t:?}: {e}"))
        };
        Ok(GridDims { nx: axis(parts[0])?, ny: axis(parts[1])?, nz: axis(parts[2])? })
    }
}

impl GridDims {
    fn to_dims(self, channels: usize) -> Result<Dims> {
        Ok(Dims::new(self.nx, self.ny, self.nz, channels)?)
    }
}

/// Run-parameter overrides shared by `segment` and `benchmark`. Precedence:
/// built-in defaults (or the figure's defaults), then `--config`, then any
/// flag given here.
#[derive(Args, Debug)]
struct ParamFlags {
    /// Run-configuration JSON; any subset of the run-parameter fields.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Optimizer: sa, icm1, icm2, or as.
    #[arg(long)]
    algo: Option<String>,
    /// ICM iteration count.
    #[arg(long)]
    iters: Option<u32>,
    /// Annealing sweep count.
    #[arg(long)]
    sweeps: Option<u32>,
    /// Pair potential between unequal ordinary tissues.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Pair potential between scalp-bone and cerebral tissue.
    #[arg(long)]
    sb_potential: Option<f64>,
    /// Bias-gradient stiffness.
    #[arg(long)]
    alpha: Option<f64>,
    /// Bias-magnitude penalty.
    #[arg(long)]
    beta: Option<f64>,
    /// Parzen kernel width override.
    #[arg(long)]
    sigma: Option<f64>,
    /// Annealing bias-proposal half-width.
    #[arg(long)]
    delta: Option<f64>,
    /// Annealing schedule constant c in T = c / ln(1 + sweep).
    #[arg(long)]
    schedule_c: Option<f64>,
    /// Mark voxels unclassified below this best-likelihood density.
    #[arg(long)]
    threshold: Option<f64>,
    /// Smoothing passes per axis of the bias low-pass filter.
    #[arg(long)]
    filter_passes: Option<u32>,
    /// Evaluate label likelihoods through the quantized table.
    #[arg(long, value_name = "BOOL")]
    lut: Option<bool>,
    /// Quantized-table resolution.
    #[arg(long)]
    lut_bins: Option<usize>,
    /// Checkerboard-parallel sweeps instead of raster order.
    #[arg(long, value_name = "BOOL")]
    parallel: Option<bool>,
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ParamFlags {
    fn apply(&self, mut params: RunParams) -> Result<RunParams> {
        if let Some(path) = &self.config {
            params = overlay_config(&params, path)?;
        }
        if let Some(a) = &self.algo {
            params.algorithm = Algorithm::parse(a)?;
        }
        if let Some(v) = self.iters {
            params.iterations = v;
        }
        if let Some(v) = self.sweeps {
            params.sweeps = v;
        }
        if let Some(v) = self.epsilon {
            params.epsilon = v;
        }
        if let Some(v) = self.sb_potential {
            params.sb_potential = v;
        }
        if let Some(v) = self.alpha {
            params.alpha = v;
        }
        if let Some(v) = self.beta {
            params.beta = v;
        }
        if let Some(v) = self.sigma {
            params.sigma = Some(v);
        }
        if let Some(v) = self.delta {
            params.delta = v;
        }
        if let Some(v) = self.schedule_c {
            params.schedule_c = v;
        }
        if let Some(v) = self.threshold {
            params.unclassified_threshold = Some(v);
        }
        if let Some(v) = self.filter_passes {
            params.filter_passes = v;
        }
        if let Some(v) = self.lut {
            params.use_lut = v;
        }
        if let Some(v) = self.lut_bins {
            params.lut_bins = Some(v);
        }
        if let Some(v) = self.parallel {
            params.parallel = v;
        }
        if let Some(v) = self.seed {
            params.seed = v;
        }
        Ok(params)
    }
}

/// Merges a sparse JSON object onto the serialized base parameters, so the
/// config only overrides the fields it names. Unknown fields are an error.
fn overlay_config(base: &RunParams, path: &Path) -> Result<RunParams> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let overlay: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    let serde_json::Value::Object(overlay) = overlay else {
        bail!("config {} must be a JSON object", path.display());
    };
    let mut merged = serde_json::to_value(base).expect("run parameters serialize");
    let fields = merged.as_object_mut().expect("run parameters form an object");
    for (key, value) in overlay {
        if !fields.contains_key(&key) {
            bail!("config {}: unknown field {key:?}", path.display());
        }
        fields.insert(key, value);
    }
    serde_json::from_value(merged).with_context(|| format!("config {}", path.display()))
}

// ---------------------------------------------------------------------------
// Atomic output files
// ---------------------------------------------------------------------------

/// Writes through a temporary file in the destination directory and renames
/// it into place, so the path either gets the complete content or nothing.
fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::Builder::new()
        .prefix(".mrfseg.")
        .tempfile_in(dir)
        .with_context(|| format!("creating a temporary file beside {}", path.display()))?;
    body(tmp.as_file_mut())?;
    tmp.as_file_mut().flush()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Training TSV: one sample per line, tissue name then one intensity
    /// per echo.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Intensity channels per sample.
    #[arg(long, default_value_t = 2)]
    channels: usize,
    /// Output model JSON.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Parzen kernel width; derived from the pooled spread when omitted.
    #[arg(long)]
    sigma: Option<f64>,
    /// Lower clamp (raw units) applied before taking logs.
    #[arg(long, default_value_t = LOG_CLAMP_DEFAULT)]
    log_clamp: f64,
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let training = TrainingSet::from_tsv_file(&a.input, a.channels)
        .with_context(|| format!("reading training data {}", a.input.display()))?;
    let models = TissueModels::fit(&training, a.sigma, a.log_clamp)?;
    write_atomic(&a.output, |w| Ok(save_model(w, &models)?))?;
    println!(
        "trained {} tissue models ({} channel(s)) -> {}",
        models.tissues().len(),
        models.channels(),
        a.output.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TemplateKind {
    /// Nested ellipsoid shells: background, CSF, grey matter, white matter.
    Shells,
    /// Shells plus an outer scalp-bone layer.
    ShellsSb,
    /// Sinusoidal grey-matter sheet between white matter and background.
    Gyrus,
}

#[derive(Args)]
struct SimulateArgs {
    /// Output intensity MVOL.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Also write the ground-truth label MVOL.
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
    /// Also write a supervised training TSV sampled from the volume.
    #[arg(long, value_name = "FILE")]
    training: Option<PathBuf>,
    /// Samples per tissue for --training.
    #[arg(long, default_value_t = TRAIN_POINTS_DEFAULT)]
    train_points: usize,
    /// Seed for --training sampling; defaults to --seed.
    #[arg(long)]
    train_seed: Option<u64>,
    /// Template grid as NXxNYxNZ.
    #[arg(long, default_value = "128x128x8")]
    dims: GridDims,
    /// Echo channels: 1 (proton density only) or 2 (proton density + T2).
    #[arg(long, default_value_t = 2)]
    echoes: usize,
    /// Template shape.
    #[arg(long, value_enum, default_value_t = TemplateKind::Shells)]
    template: TemplateKind,
    /// Relative boundary ripple of the shell templates.
    #[arg(long, default_value_t = SHELL_RIPPLE_DEFAULT)]
    ripple: f64,
    /// Sheet thickness in voxels (gyrus template).
    #[arg(long, default_value_t = 3)]
    thickness: usize,
    /// Full sine periods across x (gyrus template).
    #[arg(long, default_value_t = 1.0)]
    periods: f64,
    /// Sine amplitude in voxels (gyrus template); a quarter of ny when
    /// omitted.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Noise standard deviation in raw intensity units.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Neighbor weight of the partial-volume smoothing pass.
    #[arg(long, default_value_t = 0.0)]
    smooth: f64,
    /// Relative amplitude of the radial intensity gradient, in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    inhom: f64,
    /// RNG seed for noise synthesis.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let dims = a.dims.to_dims(1)?;
    let template = match a.template {
        TemplateKind::Shells => shell_template(dims, false, a.ripple),
        TemplateKind::ShellsSb => shell_template(dims, true, a.ripple),
        TemplateKind::Gyrus => sinusoidal_gyrus(dims, a.thickness, a.periods, a.amplitude)?,
    };
    let means = match a.echoes {
        1 => TissueMeans::pd_only(),
        2 => TissueMeans::double_echo(),
        n => bail!("--echoes must be 1 or 2, got {n}"),
    };
    let mut spec = PhantomSpec::new(template.clone(), means);
    spec.noise = a.noise;
    spec.smoothing = a.smooth;
    spec.inhomogeneity = a.inhom;
    spec.seed = a.seed;
    let volume = synthesize(&spec)?;

    write_atomic(&a.output, |w| Ok(mvol::write_volume(w, &volume)?))?;
    if let Some(path) = &a.truth {
        write_atomic(path, |w| Ok(mvol::write_labels(w, &template)?))?;
    }
    if let Some(path) = &a.training {
        let seed = a.train_seed.unwrap_or(a.seed);
        let training = sample_training(&volume, &template, a.train_points, seed)?;
        write_atomic(path, |w| Ok(training.to_tsv(w)?))?;
    }
    println!(
        "wrote {} ({}x{}x{}, {} channel(s), N={}, S={}, I={})",
        a.output.display(),
        dims.nx,
        dims.ny,
        dims.nz,
        volume.dims.channels,
        a.noise,
        a.smooth,
        a.inhom
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SegmentArgs {
    /// Input intensity MVOL.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Tissue model JSON from `train`.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Output label MVOL.
    #[arg(long, value_name = "FILE")]
    labels: PathBuf,
    /// Output estimated bias-field MVOL.
    #[arg(long, value_name = "FILE")]
    bias: Option<PathBuf>,
    /// Output per-iteration diagnostics JSON.
    #[arg(long, value_name = "FILE")]
    diagnostics: Option<PathBuf>,
    #[command(flatten)]
    params: ParamFlags,
}

fn cmd_segment(a: &SegmentArgs) -> Result<()> {
    let volume = mvol::read_volume_file(&a.input)
        .with_context(|| format!("reading volume {}", a.input.display()))?;
    let models = load_model_file(&a.model)
        .with_context(|| format!("reading model {}", a.model.display()))?;
    let params = a.params.apply(RunParams::default())?;
    let (labels, bias, diag) = segment(&volume, &models, &params)?;

    write_atomic(&a.labels, |w| Ok(mvol::write_labels(w, &labels)?))?;
    if let Some(path) = &a.bias {
        write_atomic(path, |w| Ok(mvol::write_bias(w, &bias)?))?;
    }
    if let Some(path) = &a.diagnostics {
        write_atomic(path, |w| {
            serde_json::to_writer_pretty(&mut *w, &diag)?;
            writeln!(w)?;
            Ok(())
        })?;
    }
    println!(
        "segmented {} voxels with {} in {} iteration(s) -> {}",
        volume.dims.voxels(),
        params.algorithm.name(),
        diag.iterations_run,
        a.labels.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ScoreArgs {
    /// Predicted label MVOL.
    #[arg(long, value_name = "FILE")]
    pred: PathBuf,
    /// Ground-truth label MVOL.
    #[arg(long, value_name = "FILE")]
    truth: PathBuf,
    /// Write the JSON report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Also compute the sheet-thickness error (truth must contain grey
    /// matter).
    #[arg(long)]
    thickness: bool,
}

#[derive(Serialize)]
struct ScoreOutput<'a> {
    #[serde(flatten)]
    report: &'a ErrorReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    thickness_error: Option<f64>,
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let pred = mvol::read_labels_file(&a.pred)
        .with_context(|| format!("reading labels {}", a.pred.display()))?;
    let truth = mvol::read_labels_file(&a.truth)
        .with_context(|| format!("reading labels {}", a.truth.display()))?;
    let report = error_rate(&pred, &truth)?;
    let thickness = if a.thickness {
        Some(thickness_error(&pred, &truth, THICKNESS_WINDOW_RADIUS)?)
    } else {
        None
    };

    let out = ScoreOutput { report: &report, thickness_error: thickness };
    let json = serde_json::to_string_pretty(&out)?;
    match &a.output {
        Some(path) => write_atomic(path, |w| Ok(writeln!(w, "{json}")?))?,
        None => println!("{json}"),
    }

    let mut line = format!(
        "error {:.4} ({} misclassified / {} non-background truth voxels)",
        report.error, report.misclassified, report.non_background_truth
    );
    if let Some(t) = thickness {
        line.push_str(&format!(", thickness error {t:.4}"));
    }
    eprintln!("{line}");
    Ok(())
}

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

#[derive(Args)]
struct BenchmarkArgs {
    /// Experiment family, 2..=8.
    #[arg(long)]
    figure: u8,
    /// Output CSV; stdout when omitted.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Comma-separated sweep values replacing the family's defaults; an
    /// empty string runs nothing and writes a header-only CSV.
    #[arg(long)]
    values: Option<String>,
    /// Comma-separated algorithms (sa, icm1, icm2, as).
    #[arg(long)]
    algos: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Template grid as NXxNYxNZ.
    #[arg(long)]
    dims: Option<GridDims>,
    /// Echo mode: se (proton density only) or de (both echoes).
    #[arg(long)]
    echo: Option<String>,
    /// Training samples per tissue.
    #[arg(long)]
    train_points: Option<usize>,
    /// Relative boundary ripple of the shell template.
    #[arg(long)]
    ripple: Option<f64>,
    #[command(flatten)]
    params: ParamFlags,
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty())
}

fn cmd_benchmark(a: &BenchmarkArgs) -> Result<()> {
    let mut spec = BenchmarkSpec::for_figure(a.figure)?;
    if let Some(s) = &a.values {
        spec.values = split_list(s)
            .map(|t| t.parse::<f64>().with_context(|| format!("bad sweep value {t:?}")))
            .collect::<Result<_>>()?;
    }
    if let Some(s) = &a.algos {
        spec.algorithms = split_list(s)
            .map(|t| Ok(Algorithm::parse(t)?))
            .collect::<Result<_>>()?;
    }
    if let Some(s) = &a.seeds {
        spec.seeds = split_list(s)
            .map(|t| t.parse::<u64>().with_context(|| format!("bad seed {t:?}")))
            .collect::<Result<_>>()?;
    }
    if let Some(g) = a.dims {
        spec.dims = g.to_dims(spec.dims.channels)?;
    }
    if let Some(e) = &a.echo {
        spec.echo_mode = EchoMode::parse(e)?;
    }
    if let Some(n) = a.train_points {
        spec.train_points = n;
    }
    if let Some(r) = a.ripple {
        spec.ripple = r;
    }
    spec.base = a.params.apply(spec.base.clone())?;

    let rows = run_benchmark(&spec)?;
    match &a.output {
        Some(path) => {
            write_atomic(path, |w| Ok(write_csv(w, &rows)?))?;
            println!(
                "figure {}: {} row(s) -> {}",
                a.figure,
                rows.len(),
                path.display()
            );
        }
        None => {
            write_csv(std::io::stdout().lock(), &rows)?;
            eprintln!("figure {}: {} row(s)", a.figure, rows.len());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

fn run() -> Result<()> {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("MRFSEG_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("MRFSEG_THREADS = {v:?} is not a thread count"))?;
        if n == 0 {
            bail!("MRFSEG_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing the thread pool")?;
    }
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Score(a) => cmd_score(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
