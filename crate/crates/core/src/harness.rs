//! Benchmark driver: regenerates the error-curve experiments as CSV rows.
//!
//! Each experiment family is a numbered figure: 2/3 sweep the iteration
//! count without/with a scalp-bone shell, 4 sweeps noise, 5 sweeps the
//! intensity gradient, 6 sweeps partial-volume smoothing, 7 sweeps the
//! thickness of a sinusoidal grey-matter sheet, and 8 compares annealing
//! against ICM on two fixed parameter sets. Cells are independent: every
//! (value, seed) pair synthesizes its phantom, fits models from a clean
//! companion volume, runs the requested algorithms, and scores against the
//! template truth.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::intensity::{TissueModels, TrainingSet, LOG_CLAMP_DEFAULT};
use crate::metrics::{error_rate, thickness_error, THICKNESS_WINDOW_RADIUS};
use crate::optimize::{segment, Algorithm, RunParams};
use crate::phantom::{shell_template, sinusoidal_gyrus, synthesize, PhantomSpec, TissueMeans};
use crate::tissue::Tissue;
use crate::volume::{Dims, LabelMap, Volume};

pub const CSV_HEADER: &str =
    "figure,param_name,param_value,algorithm,echo_mode,seed,error,iterations,wall_ms";

/// Relative boundary ripple of the default shell template; keeps tissue
/// interfaces from being perfectly smooth ellipsoids.
pub const SHELL_RIPPLE_DEFAULT: f64 = 0.04;

/// Training points sampled per tissue from the companion volume.
pub const TRAIN_POINTS_DEFAULT: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EchoMode {
    Single,
    Double,
}

impl EchoMode {
    pub fn name(self) -> &'static str {
        match self {
            EchoMode::Single => "se",
            EchoMode::Double => "de",
        }
    }

    pub fn parse(s: &str) -> Result<EchoMode, CoreError> {
        match s.to_ascii_lowercase().as_str() {
            "se" | "single" => Ok(EchoMode::Single),
            "de" | "double" => Ok(EchoMode::Double),
            other => Err(CoreError::BadParameter(format!("unknown echo mode {other:?}"))),
        }
    }
}

/// One experiment family with its sweep values and fixed degradations.
#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub figure: u8,
    pub values: Vec<f64>,
    pub algorithms: Vec<Algorithm>,
    pub dims: Dims,
    pub seeds: Vec<u64>,
    pub echo_mode: EchoMode,
    pub base: RunParams,
    pub train_points: usize,
    pub ripple: f64,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub figure: u8,
    pub param_name: &'static str,
    pub param_value: f64,
    pub algorithm: Algorithm,
    pub echo_mode: EchoMode,
    pub seed: u64,
    pub error: f64,
    pub iterations: u32,
    pub wall_ms: f64,
}

/// Fixed degradation levels of a figure: (noise, smoothing, inhomogeneity,
/// scalp-bone present).
fn figure_fixed(figure: u8) -> (f64, f64, f64, bool) {
    match figure {
        2 => (50.0, 0.2, 0.1, false),
        3 => (50.0, 0.2, 0.1, true),
        4 => (0.0, 0.0, 0.0, false), // noise is swept
        5 => (50.0, 0.0, 0.0, false), // inhomogeneity is swept
        6 => (50.0, 0.0, 0.0, false), // smoothing is swept
        7 => (50.0, 0.2, 0.1, false),
        _ => (0.0, 0.0, 0.0, true), // 8: per-set values
    }
}

fn param_name(figure: u8) -> &'static str {
    match figure {
        2 | 3 => "iterations",
        4 => "noise",
        5 => "inhomogeneity",
        6 => "smoothing",
        7 => "thickness",
        _ => "set",
    }
}

impl BenchmarkSpec {
    /// The default experiment for a figure id.
    pub fn for_figure(figure: u8) -> Result<BenchmarkSpec, CoreError> {
        let base = RunParams { use_lut: true, ..RunParams::default() };
        let spec = match figure {
            2 => BenchmarkSpec {
                figure,
                values: vec![1.0, 2.0, 4.0, 6.0, 12.0],
                algorithms: vec![Algorithm::Icm1, Algorithm::Icm2],
                dims: Dims::new(128, 128, 8, 1)?,
                seeds: vec![1],
                echo_mode: EchoMode::Double,
                base,
                train_points: TRAIN_POINTS_DEFAULT,
                ripple: SHELL_RIPPLE_DEFAULT,
            },
            3 => BenchmarkSpec {
                figure,
                algorithms: vec![Algorithm::Icm1, Algorithm::Icm2, Algorithm::As],
                ..BenchmarkSpec::for_figure(2)?
            },
            4 => BenchmarkSpec {
                figure,
                values: vec![30.0, 50.0, 80.0, 100.0],
                algorithms: vec![Algorithm::Icm1, Algorithm::Icm2, Algorithm::As],
                ..BenchmarkSpec::for_figure(2)?
            },
            5 => BenchmarkSpec {
                figure,
                values: vec![0.0, 0.05, 0.10, 0.15],
                algorithms: vec![Algorithm::Icm1, Algorithm::Icm2, Algorithm::As],
                ..BenchmarkSpec::for_figure(2)?
            },
            6 => BenchmarkSpec {
                figure,
                values: vec![0.0, 0.1, 0.2, 0.3],
                algorithms: vec![Algorithm::Icm1, Algorithm::Icm2, Algorithm::As],
                ..BenchmarkSpec::for_figure(2)?
            },
            7 => BenchmarkSpec {
                figure,
                values: vec![1.0, 2.0, 3.0, 4.0, 5.0],
                algorithms: vec![Algorithm::Icm1, Algorithm::Icm2],
                dims: Dims::new(64, 64, 8, 1)?,
                ..BenchmarkSpec::for_figure(2)?
            },
            8 => BenchmarkSpec {
                figure,
                values: vec![0.0, 1.0],
                algorithms: vec![Algorithm::Sa, Algorithm::Icm1],
                dims: Dims::new(64, 64, 8, 1)?,
                echo_mode: EchoMode::Single,
                seeds: vec![1, 2, 3],
                ..BenchmarkSpec::for_figure(2)?
            },
            other => {
                return Err(CoreError::BadParameter(format!(
                    "figure {other} is not one of 2..=8"
                )))
            }
        };
        Ok(spec)
    }

    pub fn param_name(&self) -> &'static str {
        param_name(self.figure)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(2..=8).contains(&self.figure) {
            return Err(CoreError::BadParameter(format!("figure {}", self.figure)));
        }
        if self.seeds.is_empty() {
            return Err(CoreError::BadParameter("at least one seed is required".into()));
        }
        if self.algorithms.is_empty() {
            return Err(CoreError::BadParameter("at least one algorithm is required".into()));
        }
        if self.train_points == 0 {
            return Err(CoreError::BadParameter("training sample size must be positive".into()));
        }
        for &v in &self.values {
            let ok = match self.figure {
                2 | 3 => v >= 0.0 && v.fract() == 0.0,
                4 => v >= 0.0,
                5 => (0.0..1.0).contains(&v),
                6 => v >= 0.0,
                7 => v >= 1.0 && v.fract() == 0.0,
                _ => v == 0.0 || v == 1.0,
            };
            if !ok || !v.is_finite() {
                return Err(CoreError::BadParameter(format!(
                    "sweep value {v} is invalid for figure {}",
                    self.figure
                )));
            }
        }
        self.base.validate()
    }
}

/// Draws `per_tissue` supervised intensity samples for every tissue present
/// in the template (with replacement, seeded).
pub fn sample_training(
    volume: &Volume,
    template: &LabelMap,
    per_tissue: usize,
    seed: u64,
) -> Result<TrainingSet, CoreError> {
    let mut by_tissue: [Vec<usize>; 6] = Default::default();
    for i in 0..template.dims.voxels() {
        let t = template.get(i);
        if t != Tissue::Unclassified {
            by_tissue[t.slot()].push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut training = TrainingSet::new(volume.dims.channels)?;
    for t in Tissue::MODELED {
        let pool = &by_tissue[t.slot()];
        if pool.is_empty() {
            continue;
        }
        for _ in 0..per_tissue {
            let idx = pool[rng.gen_range(0..pool.len())];
            training.add_point(t, volume.sample(idx))?;
        }
    }
    Ok(training)
}

/// Everything one benchmark cell shares across its algorithms.
pub struct CellSetup {
    pub template: LabelMap,
    pub volume: Volume,
    pub models: TissueModels,
}

/// Degradation triple for one cell: the swept value overrides its slot.
fn cell_degradations(figure: u8, value: f64) -> (f64, f64, f64) {
    let (mut noise, mut smoothing, mut inhom, _) = figure_fixed(figure);
    match figure {
        4 => noise = value,
        5 => inhom = value,
        6 => smoothing = value,
        8 => {
            // set A: N=50, I=0.1, S=0.2; set B: N=80, I=0, S=0
            if value == 0.0 {
                noise = 50.0;
                smoothing = 0.2;
                inhom = 0.1;
            } else {
                noise = 80.0;
                smoothing = 0.0;
                inhom = 0.0;
            }
        }
        _ => {}
    }
    (noise, smoothing, inhom)
}

/// Builds the template, phantom, and supervised models for one (value,
/// seed) cell. Models are fitted on a companion phantom with the same noise
/// and smoothing but no intensity gradient, mimicking training on a scan
/// that does not share the test volume's shading.
pub fn prepare_cell(spec: &BenchmarkSpec, value: f64, seed: u64) -> Result<CellSetup, CoreError> {
    let (_, _, _, with_sb) = figure_fixed(spec.figure);
    let template = if spec.figure == 7 {
        sinusoidal_gyrus(spec.dims, value as usize, 1.0, None)?
    } else {
        shell_template(spec.dims, with_sb, spec.ripple)
    };
    let (noise, smoothing, inhom) = cell_degradations(spec.figure, value);

    let mut main = PhantomSpec::new(template.clone(), TissueMeans::double_echo());
    main.noise = noise;
    main.smoothing = smoothing;
    main.inhomogeneity = inhom;
    main.seed = seed;
    let volume = synthesize(&main)?;

    let mut companion = main.clone();
    companion.inhomogeneity = 0.0;
    companion.seed = crate::optimize::stream_seed(seed, 0x7261, 0);
    let train_volume = synthesize(&companion)?;
    let training = sample_training(
        &train_volume,
        &template,
        spec.train_points,
        crate::optimize::stream_seed(seed, 0x7262, 0),
    )?;

    let (volume, training) = match spec.echo_mode {
        EchoMode::Double => (volume, training),
        EchoMode::Single => (volume.select_channel(0)?, training.select_channel(0)?),
    };

    let mut models = TissueModels::fit(&training, None, LOG_CLAMP_DEFAULT)?;
    if spec.base.use_lut {
        models = models.with_lut(spec.base.lut_bins)?;
    }
    Ok(CellSetup { template, volume, models })
}

/// Runs one algorithm on a prepared cell and scores it.
pub fn run_cell(
    spec: &BenchmarkSpec,
    setup: &CellSetup,
    algorithm: Algorithm,
    value: f64,
    seed: u64,
) -> Result<RunRecord, CoreError> {
    let mut params = spec.base.clone();
    params.algorithm = algorithm;
    params.seed = seed;
    if matches!(spec.figure, 2 | 3) {
        params.iterations = value as u32;
    }
    let started = Instant::now();
    let (labels, _, diag) = segment(&setup.volume, &setup.models, &params)?;
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let error = if spec.figure == 7 {
        thickness_error(&labels, &setup.template, THICKNESS_WINDOW_RADIUS)?
    } else {
        error_rate(&labels, &setup.template)?.error
    };
    Ok(RunRecord {
        figure: spec.figure,
        param_name: spec.param_name(),
        param_value: value,
        algorithm,
        echo_mode: spec.echo_mode,
        seed,
        error,
        iterations: diag.iterations_run,
        wall_ms,
    })
}

/// Runs every cell of the spec. Cells run concurrently; rows come back in
/// deterministic (value, seed, algorithm) order.
pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<Vec<RunRecord>, CoreError> {
    use rayon::prelude::*;
    spec.validate()?;
    let cells: Vec<(f64, u64)> = spec
        .values
        .iter()
        .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let nested: Vec<Result<Vec<RunRecord>, CoreError>> = cells
        .par_iter()
        .map(|&(value, seed)| {
            let setup = prepare_cell(spec, value, seed)?;
            spec.algorithms
                .iter()
                .map(|&algorithm| run_cell(spec, &setup, algorithm, value, seed))
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    for group in nested {
        rows.extend(group?);
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(mut w: W, rows: &[RunRecord]) -> Result<(), CoreError> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.figure,
            r.param_name,
            r.param_value,
            r.algorithm.name(),
            r.echo_mode.name(),
            r.seed,
            r.error,
            r.iterations,
            r.wall_ms
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(figure: u8) -> BenchmarkSpec {
        let mut spec = BenchmarkSpec::for_figure(figure).unwrap();
        spec.dims = Dims::new(16, 16, 4, 1).unwrap();
        spec.base.use_lut = false;
        spec.base.iterations = 3;
        spec.seeds = vec![1];
        spec
    }

    #[test]
    fn figure_defaults_are_wired() {
        for figure in 2..=8u8 {
            let spec = BenchmarkSpec::for_figure(figure).unwrap();
            spec.validate().unwrap();
            assert_eq!(spec.figure, figure);
            assert!(!spec.values.is_empty());
        }
        assert!(BenchmarkSpec::for_figure(1).is_err());
        assert!(BenchmarkSpec::for_figure(9).is_err());
        assert_eq!(BenchmarkSpec::for_figure(7).unwrap().param_name(), "thickness");
        assert_eq!(BenchmarkSpec::for_figure(8).unwrap().echo_mode, EchoMode::Single);
        assert!(BenchmarkSpec::for_figure(3)
            .unwrap()
            .algorithms
            .contains(&Algorithm::As));
    }

    #[test]
    fn invalid_sweep_values_are_rejected() {
        let mut spec = BenchmarkSpec::for_figure(5).unwrap();
        spec.values = vec![1.5]; // inhomogeneity must stay below 1
        assert!(spec.validate().is_err());
        let mut spec = BenchmarkSpec::for_figure(2).unwrap();
        spec.values = vec![2.5]; // iteration counts are integers
        assert!(spec.validate().is_err());
        let mut spec = BenchmarkSpec::for_figure(4).unwrap();
        spec.seeds.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn benchmark_rows_are_deterministic_and_independent() {
        let mut spec = tiny_spec(4);
        spec.values = vec![30.0, 50.0];
        spec.algorithms = vec![Algorithm::Icm1];
        let rows_a = run_benchmark(&spec).unwrap();
        let rows_b = run_benchmark(&spec).unwrap();
        assert_eq!(rows_a.len(), 2);
        for (a, b) in rows_a.iter().zip(&rows_b) {
            assert_eq!(a.error, b.error, "same cell, same error bits");
            assert_eq!(a.iterations, b.iterations);
        }
        // re-running a single cell in isolation reproduces its row
        let mut single = spec.clone();
        single.values = vec![50.0];
        let solo = run_benchmark(&single).unwrap();
        let matching = rows_a.iter().find(|r| r.param_value == 50.0).unwrap();
        assert_eq!(solo[0].error, matching.error);
        assert_eq!(solo[0].iterations, matching.iterations);
    }

    #[test]
    fn empty_sweep_gives_header_only_csv() {
        let mut spec = tiny_spec(4);
        spec.values.clear();
        let rows = run_benchmark(&spec).unwrap();
        assert!(rows.is_empty());
        let mut out = Vec::new();
        write_csv(&mut out, &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.trim_end(), CSV_HEADER);
    }

    #[test]
    fn csv_rows_have_the_fixed_column_count() {
        let mut spec = tiny_spec(6);
        spec.values = vec![0.0];
        spec.algorithms = vec![Algorithm::As];
        let rows = run_benchmark(&spec).unwrap();
        let mut out = Vec::new();
        write_csv(&mut out, &rows).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        for line in lines {
            assert_eq!(line.split(',').count(), 9, "row {line}");
        }
    }

    #[test]
    fn single_echo_mode_projects_to_the_first_channel() {
        let mut spec = tiny_spec(8);
        spec.values = vec![1.0]; // set B: milder regime for a tiny volume
        spec.seeds = vec![1];
        spec.algorithms = vec![Algorithm::Icm1];
        let rows = run_benchmark(&spec).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].echo_mode, EchoMode::Single);
        assert!(rows[0].error.is_finite());
        let setup = prepare_cell(&spec, 1.0, 1).unwrap();
        assert_eq!(setup.volume.dims.channels, 1);
        assert_eq!(setup.models.channels(), 1);
    }

    #[test]
    fn clean_phantom_segments_perfectly() {
        // no noise, no smoothing, no gradient: tissue means are exactly
        // separable, so every algorithm should reach zero error
        let mut spec = tiny_spec(4);
        spec.values = vec![0.0];
        spec.algorithms = vec![Algorithm::Icm1, Algorithm::Icm2, Algorithm::As];
        let rows = run_benchmark(&spec).unwrap();
        for row in rows {
            assert_eq!(row.error, 0.0, "{} on a clean phantom", row.algorithm.name());
        }
    }

    #[test]
    fn training_sampler_is_seeded_and_covers_present_tissues() {
        let dims = Dims::new(16, 16, 4, 1).unwrap();
        let template = shell_template(dims, true, SHELL_RIPPLE_DEFAULT);
        let mut spec = PhantomSpec::new(template.clone(), TissueMeans::double_echo());
        spec.noise = 40.0; // distinct voxel values so reseeding is observable
        let volume = synthesize(&spec).unwrap();
        let a = sample_training(&volume, &template, 40, 7).unwrap();
        let b = sample_training(&volume, &template, 40, 7).unwrap();
        for t in Tissue::MODELED {
            match (a.points(t), b.points(t)) {
                (Some(pa), Some(pb)) => {
                    assert_eq!(pa.len(), 40);
                    assert_eq!(pa, pb, "same seed, same sample");
                }
                (None, None) => {}
                _ => panic!("inconsistent sampling for {t}"),
            }
        }
        let c = sample_training(&volume, &template, 40, 8).unwrap();
        assert_ne!(
            a.points(Tissue::WhiteMatter),
            c.points(Tissue::WhiteMatter),
            "different seed, different sample"
        );
    }
}
