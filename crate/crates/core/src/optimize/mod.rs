//! MAP search procedures over (labels, bias): simulated annealing, two ICM
//! variants, and the adaptive-smoothing baseline (ICM2 with the neighborhood
//! potential disabled).
//!
//! All algorithms share the initialization (bias = 0, per-voxel likelihood
//! argmax) and the label pass (per-voxel argmax of log-likelihood minus
//! neighborhood energy). Deterministic single-threaded raster order is the
//! reference mode; the optional parallel mode updates the lattice in two
//! checkerboard colors so concurrent voxels are never neighbors, with
//! per-voxel RNG streams that do not depend on the thread count.

mod icm;
mod sa;

pub use icm::{icm1_iteration, icm2_iteration, lowpass_3d, IterStats};
pub use sa::{metropolis_accept, metropolis_probability, sa_run, sa_sweep};

use serde::{Deserialize, Serialize};

use crate::energy::{
    bias_energy, label_energy, local_label_energy, log_posterior, BiasPrior, PotentialTable,
    Temperature, ALPHA_DEFAULT, BETA_DEFAULT, EPSILON_DEFAULT, SB_BRAIN_DEFAULT,
};
use crate::error::CoreError;
use crate::intensity::{log_intensity, Likelihood, TissueModels, LOG_CLAMP_DEFAULT};
use crate::mat::Vec2;
use crate::tissue::Tissue;
use crate::volume::{BiasField, LabelMap, Volume};

pub const ITERATIONS_DEFAULT: u32 = 6;
pub const SWEEPS_DEFAULT: u32 = 1000;
pub const DELTA_DEFAULT: f64 = 0.02;
pub const SCHEDULE_C_DEFAULT: f64 = 1.0;
pub const FILTER_PASSES_DEFAULT: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    /// Simulated annealing over labels and bias jointly.
    Sa,
    /// ICM with the closed-form single-voxel bias update.
    Icm1,
    /// ICM with the filtered residual/normalizer bias estimate.
    Icm2,
    /// Adaptive smoothing baseline: ICM2 with no neighborhood potential.
    As,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Algorithm, CoreError> {
        match s.to_ascii_lowercase().as_str() {
            "sa" => Ok(Algorithm::Sa),
            "icm1" => Ok(Algorithm::Icm1),
            "icm2" => Ok(Algorithm::Icm2),
            "as" => Ok(Algorithm::As),
            other => Err(CoreError::BadParameter(format!("unknown algorithm {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sa => "sa",
            Algorithm::Icm1 => "icm1",
            Algorithm::Icm2 => "icm2",
            Algorithm::As => "as",
        }
    }
}

/// Logarithmic cooling: T(l) = c / ln(1 + l) for sweep l = 1..=sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub c: f64,
    pub sweeps: u32,
}

impl AnnealSchedule {
    pub fn new(c: f64, sweeps: u32) -> Result<AnnealSchedule, CoreError> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(CoreError::BadParameter(format!("schedule constant c = {c}")));
        }
        Ok(AnnealSchedule { c, sweeps })
    }

    #[inline]
    pub fn temperature(&self, sweep: u32) -> Temperature {
        debug_assert!(sweep >= 1);
        Temperature::new(self.c / (1.0 + sweep as f64).ln()).expect("positive by construction")
    }
}

/// Everything a segmentation run is configured by. Serializable as the
/// run-config JSON; every field has a default so sparse configs work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunParams {
    pub algorithm: Algorithm,
    /// ICM iteration count (label pass + bias pass each).
    pub iterations: u32,
    /// SA sweep count.
    pub sweeps: u32,
    /// Pair potential for unequal ordinary tissues.
    pub epsilon: f64,
    /// Pair potential for scalp-bone against cerebral tissue.
    pub sb_potential: f64,
    /// Bias-gradient stiffness.
    pub alpha: f64,
    /// Bias-magnitude penalty.
    pub beta: f64,
    /// Parzen kernel width override; None keeps the model's width.
    pub sigma: Option<f64>,
    /// SA bias-proposal half-width (log units).
    pub delta: f64,
    /// Annealing schedule constant c.
    pub schedule_c: f64,
    /// Reject labels whose best likelihood falls below this density.
    pub unclassified_threshold: Option<f64>,
    /// Smoothing passes per axis of the ICM2 low-pass filter.
    pub filter_passes: u32,
    /// Use the log-Gaussian likelihood for label decisions too (test mode
    /// with a monotone objective).
    pub consistent_gaussian: bool,
    /// Evaluate label likelihoods through the quantized LUT (honored by
    /// `segment` and `sa_run`, which build the table once per run).
    pub use_lut: bool,
    /// LUT resolution override.
    pub lut_bins: Option<usize>,
    /// Keep the bias field frozen at its current value (no bias proposals
    /// or bias passes).
    pub freeze_bias: bool,
    /// Checkerboard-parallel sweeps instead of raster order.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for RunParams {
    fn default() -> RunParams {
        RunParams {
            algorithm: Algorithm::Icm1,
            iterations: ITERATIONS_DEFAULT,
            sweeps: SWEEPS_DEFAULT,
            epsilon: EPSILON_DEFAULT,
            sb_potential: SB_BRAIN_DEFAULT,
            alpha: ALPHA_DEFAULT,
            beta: BETA_DEFAULT,
            sigma: None,
            delta: DELTA_DEFAULT,
            schedule_c: SCHEDULE_C_DEFAULT,
            unclassified_threshold: None,
            filter_passes: FILTER_PASSES_DEFAULT,
            consistent_gaussian: false,
            use_lut: false,
            lut_bins: None,
            freeze_bias: false,
            parallel: false,
            seed: 0,
        }
    }
}

impl RunParams {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.algorithm == Algorithm::Sa && !self.freeze_bias && !(self.delta > 0.0) {
            return Err(CoreError::BadParameter(format!(
                "SA bias proposals need delta > 0, got {}",
                self.delta
            )));
        }
        if !(self.epsilon >= 0.0) || !(self.sb_potential >= 0.0) {
            return Err(CoreError::BadParameter("negative pair potential".into()));
        }
        BiasPrior::new(self.alpha, self.beta)?;
        AnnealSchedule::new(self.schedule_c, self.sweeps)?;
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return Err(CoreError::BadParameter(format!("sigma override {s}")));
            }
        }
        if let Some(t) = self.unclassified_threshold {
            if !(t > 0.0) {
                return Err(CoreError::BadParameter(format!("unclassified threshold {t}")));
            }
        }
        Ok(())
    }

    /// The potential table this run uses. The AS baseline runs with no
    /// neighborhood interaction at all.
    pub fn potential(&self) -> PotentialTable {
        if self.algorithm == Algorithm::As {
            PotentialTable::disabled()
        } else {
            PotentialTable::new(self.epsilon, self.sb_potential)
        }
    }

    pub fn prior(&self) -> BiasPrior {
        BiasPrior { alpha: self.alpha, beta: self.beta }
    }

    pub fn schedule(&self) -> AnnealSchedule {
        AnnealSchedule { c: self.schedule_c, sweeps: self.sweeps }
    }

    fn threshold_ln(&self) -> Option<f64> {
        self.unclassified_threshold.map(f64::ln)
    }
}

/// A configuration (labels, bias) of the optimization.
#[derive(Debug, Clone)]
pub struct OptState {
    pub labels: LabelMap,
    pub bias: BiasField,
    /// Completed sweeps/iterations.
    pub step: u64,
}

/// Per-run observability: one entry per sweep/iteration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Untempered log-posterior after each sweep/iteration.
    pub energy_trace: Vec<f64>,
    /// Fraction of voxels whose label changed in each sweep/iteration.
    pub label_changes: Vec<f64>,
    /// Voxels where the ICM2 filtered normalizer was singular and the
    /// previous bias value was kept.
    pub lowpass_fallbacks: u64,
    pub iterations_run: u32,
}

// ---------------------------------------------------------------------------
// Shared per-run context
// ---------------------------------------------------------------------------

/// Immutable per-run precomputation: raw and log-domain intensities plus the
/// candidate tissue list.
pub(crate) struct Ctx<'a> {
    pub volume: &'a Volume,
    pub z_log: Vec<Vec2>,
    pub tissues: Vec<Tissue>,
    pub floor_ll: f64,
}

impl<'a> Ctx<'a> {
    pub fn new(volume: &'a Volume, lik: Likelihood<'_>) -> Ctx<'a> {
        let d = volume.dims.channels;
        let z_log = (0..volume.dims.voxels())
            .map(|i| {
                let z = volume.sample(i);
                let mut l = [0.0; 2];
                for c in 0..d {
                    l[c] = log_intensity(z[c], LOG_CLAMP_DEFAULT);
                }
                l
            })
            .collect();
        Ctx { volume, z_log, tissues: lik.tissues().to_vec(), floor_ll: lik.floor_log_density() }
    }

    #[inline]
    pub fn ll(&self, lik: Likelihood<'_>, i: usize, t: Tissue, bias: Vec2) -> f64 {
        if t == Tissue::Unclassified {
            self.floor_ll
        } else {
            lik.log_density(self.volume.sample(i), self.z_log[i], t, bias)
        }
    }
}

/// Deterministic per-(seed, sweep, voxel) stream seed; never depends on
/// thread scheduling.
#[inline]
pub(crate) fn stream_seed(seed: u64, sweep: u64, voxel: u64) -> u64 {
    fn splitmix64(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
    splitmix64(splitmix64(seed ^ splitmix64(sweep).wrapping_mul(0xA0761D6478BD642F)) ^ voxel)
}

// ---------------------------------------------------------------------------
// Initialization and the shared label pass
// ---------------------------------------------------------------------------

/// Per-voxel decision of the label pass: argmax over candidate tissues of
/// log-likelihood minus the candidate's local neighborhood energy. Ties go
/// to the lowest label code. Returns (label, best likelihood over tissues).
#[inline]
fn best_label(
    ctx: &Ctx<'_>,
    lik: Likelihood<'_>,
    labels: &LabelMap,
    bias: &BiasField,
    pot: &PotentialTable,
    i: usize,
) -> (Tissue, f64) {
    let b = bias.get(i);
    let mut best = Tissue::Unclassified;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_ll = f64::NEG_INFINITY;
    for &t in &ctx.tissues {
        let ll = ctx.ll(lik, i, t, b);
        let score = ll - local_label_energy(labels, i, t, pot);
        if score > best_score {
            best_score = score;
            best = t;
        }
        if ll > best_ll {
            best_ll = ll;
        }
    }
    (best, best_ll)
}

/// One full label pass. Sequential mode updates in place in raster order
/// (Gauss-Seidel); parallel mode does two checkerboard half-passes.
/// Returns the number of changed voxels.
pub(crate) fn label_pass(
    ctx: &Ctx<'_>,
    lik: Likelihood<'_>,
    labels: &mut LabelMap,
    bias: &BiasField,
    pot: &PotentialTable,
    threshold_ln: Option<f64>,
    parallel: bool,
) -> usize {
    let n = labels.dims.voxels();
    let decide = |labels: &LabelMap, i: usize| -> Tissue {
        let (mut pick, best_ll) = best_label(ctx, lik, labels, bias, pot, i);
        if let Some(thr) = threshold_ln {
            if best_ll < thr {
                pick = Tissue::Unclassified;
            }
        }
        pick
    };
    let mut changed = 0usize;
    if parallel {
        use rayon::prelude::*;
        for color in 0..2usize {
            let updates: Vec<(usize, Tissue)> = (0..n)
                .into_par_iter()
                .filter(|&i| {
                    let (x, y, z) = labels.dims.coords(i);
                    (x + y + z) % 2 == color
                })
                .map(|i| (i, decide(labels, i)))
                .collect();
            for (i, t) in updates {
                if labels.get(i) != t {
                    labels.set(i, t);
                    changed += 1;
                }
            }
        }
    } else {
        for i in 0..n {
            let t = decide(labels, i);
            if labels.get(i) != t {
                labels.set(i, t);
                changed += 1;
            }
        }
    }
    changed
}

/// Starting state shared by every algorithm: neutral bias and the per-voxel
/// maximum-likelihood label (no neighborhood term yet).
pub fn initialize(volume: &Volume, models: &TissueModels, params: &RunParams) -> Result<OptState, CoreError> {
    params.validate()?;
    let prepared = prepare_models(models, params, false)?;
    let lik = label_likelihood(prepared.as_ref(), params);
    Ok(init_with_likelihood(volume, lik, params.threshold_ln()))
}

pub(crate) fn init_with_likelihood(
    volume: &Volume,
    lik: Likelihood<'_>,
    threshold_ln: Option<f64>,
) -> OptState {
    let ctx = Ctx::new(volume, lik);
    let mut labels = LabelMap::filled(volume.dims, Tissue::Unclassified);
    labels.voxel_mm = volume.voxel_mm;
    let zero = [0.0; 2];
    for i in 0..volume.dims.voxels() {
        let mut best = Tissue::Unclassified;
        let mut best_ll = f64::NEG_INFINITY;
        for &t in &ctx.tissues {
            let ll = ctx.ll(lik, i, t, zero);
            if ll > best_ll {
                best_ll = ll;
                best = t;
            }
        }
        if let Some(thr) = threshold_ln {
            if best_ll < thr {
                best = Tissue::Unclassified;
            }
        }
        labels.set(i, best);
    }
    OptState { labels, bias: BiasField::neutral(volume.dims), step: 0 }
}

/// Model bundle after applying per-run overrides, borrowing when nothing
/// had to change.
pub(crate) enum PreparedModels<'a> {
    Borrowed(&'a TissueModels),
    Owned(TissueModels),
}

impl PreparedModels<'_> {
    pub fn as_ref(&self) -> &TissueModels {
        match self {
            PreparedModels::Borrowed(m) => m,
            PreparedModels::Owned(m) => m,
        }
    }
}

/// Applies the sigma override and (when asked) materializes the LUT so the
/// per-voxel loops never rebuild models. Single-iteration entry points skip
/// the LUT build: quantized evaluation there requires a prebuilt table on
/// the models.
pub(crate) fn prepare_models<'a>(
    models: &'a TissueModels,
    params: &RunParams,
    build_lut: bool,
) -> Result<PreparedModels<'a>, CoreError> {
    let needs_sigma = params.sigma.is_some();
    let needs_lut = build_lut && params.use_lut && models.lut.is_none();
    if !needs_sigma && !needs_lut {
        return Ok(PreparedModels::Borrowed(models));
    }
    let mut owned = models.clone();
    if let Some(s) = params.sigma {
        owned.parzen = owned.parzen.with_sigma(s)?;
        owned.lut = None;
    }
    if build_lut && params.use_lut && owned.lut.is_none() {
        owned = owned.with_lut(params.lut_bins)?;
    }
    Ok(PreparedModels::Owned(owned))
}

/// Picks the evaluator label decisions use under the given params. The LUT
/// is only consulted when the models carry one.
pub(crate) fn label_likelihood<'m>(models: &'m TissueModels, params: &RunParams) -> Likelihood<'m> {
    if params.consistent_gaussian {
        Likelihood::Gaussian(&models.gaussian)
    } else if params.use_lut {
        match &models.lut {
            Some(lut) => Likelihood::Lut(lut),
            None => Likelihood::Parzen(&models.parzen),
        }
    } else {
        Likelihood::Parzen(&models.parzen)
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

/// Runs the configured algorithm end to end.
pub fn segment(
    volume: &Volume,
    models: &TissueModels,
    params: &RunParams,
) -> Result<(LabelMap, BiasField, Diagnostics), CoreError> {
    params.validate()?;
    if models.channels() != volume.dims.channels {
        return Err(CoreError::BadParameter(format!(
            "model has {} channels, volume has {}",
            models.channels(),
            volume.dims.channels
        )));
    }
    // apply the sigma override and build the LUT once, up front
    let prepared = prepare_models(models, params, true)?;
    let models = prepared.as_ref();

    match params.algorithm {
        Algorithm::Sa => sa::sa_run_inner(volume, models, params),
        Algorithm::Icm1 | Algorithm::Icm2 | Algorithm::As => {
            let lik = label_likelihood(models, params);
            let ctx = Ctx::new(volume, lik);
            let pot = params.potential();
            let prior = params.prior();
            let mut state = init_with_likelihood(volume, lik, params.threshold_ln());
            let mut diag = Diagnostics::default();
            let voxels = volume.dims.voxels() as f64;
            for _ in 0..params.iterations {
                let stats = match params.algorithm {
                    Algorithm::Icm1 => {
                        icm::icm1_inner(&ctx, lik, models, &mut state, &pot, &prior, params)?
                    }
                    _ => icm::icm2_inner(&ctx, lik, models, &mut state, &pot, params)?,
                };
                state.step += 1;
                diag.iterations_run += 1;
                diag.label_changes.push(stats.labels_changed as f64 / voxels);
                diag.lowpass_fallbacks += stats.fallbacks as u64;
                diag.energy_trace.push(log_posterior(
                    &state.labels,
                    &state.bias,
                    volume,
                    lik,
                    &pot,
                    &prior,
                    Temperature::UNIT,
                )?);
            }
            Ok((state.labels, state.bias, diag))
        }
    }
}

/// Untempered log-posterior of a state under the run's configuration,
/// evaluated with the same likelihood its label decisions use.
pub fn state_objective(
    volume: &Volume,
    models: &TissueModels,
    params: &RunParams,
    labels: &LabelMap,
    bias: &BiasField,
) -> Result<f64, CoreError> {
    let lik = label_likelihood(models, params);
    log_posterior(labels, bias, volume, lik, &params.potential(), &params.prior(), Temperature::UNIT)
}

pub(crate) fn full_energies(
    ctx: &Ctx<'_>,
    lik: Likelihood<'_>,
    labels: &LabelMap,
    bias: &BiasField,
    pot: &PotentialTable,
    prior: &BiasPrior,
) -> (Vec<f64>, f64, f64, f64) {
    let n = labels.dims.voxels();
    let mut ll = Vec::with_capacity(n);
    let mut ll_sum = 0.0;
    for i in 0..n {
        let v = ctx.ll(lik, i, labels.get(i), bias.get(i));
        ll.push(v);
        ll_sum += v;
    }
    (ll, ll_sum, label_energy(labels, pot), bias_energy(bias, prior))
}
