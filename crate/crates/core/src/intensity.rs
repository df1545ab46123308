//! Tissue-conditional intensity likelihoods.
//!
//! Three interchangeable evaluators share one training set:
//! - `ParzenModel`: exact kernel-sum density over the training points, one
//!   isotropic Gaussian of width sigma per point, in raw intensity units.
//! - `GaussianTissueModel`: a single Gaussian per tissue fitted to the
//!   *logarithms* of the training intensities; the surrogate that makes the
//!   bias-field updates closed-form.
//! - `DensityLut`: the Parzen density quantized onto a per-tissue grid,
//!   nearest-bin lookup, for the hot sweep loops.
//!
//! Bias convention used throughout the crate: a bias value b is an additive
//! offset in log domain, so the corrected raw intensity is exp(b) * z and the
//! corrected log intensity is ln(z) + b. A zero field is neutral.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::mat::{norm_sq, vec_sub, Sym2, Vec2};
use crate::tissue::Tissue;
use crate::volume::MAX_CHANNELS;

/// Kernel width floor: a zero-spread training set (noise-free phantom) must
/// still yield a usable density.
pub const SIGMA_FLOOR: f64 = 1.0;
/// Fraction of the pooled within-tissue standard deviation used as the
/// default Parzen kernel width.
pub const SIGMA_FRACTION: f64 = 0.3;
/// Intensities at or below zero are clamped to this before taking logs.
pub const LOG_CLAMP_DEFAULT: f64 = 1.0;
/// Relative covariance regularization: lambda = COV_REG_REL * trace / d.
pub const COV_REG_REL: f64 = 1e-6;
/// Absolute floor for the covariance regularizer, for degenerate
/// (zero-variance) training sets.
pub const COV_REG_FLOOR: f64 = 1e-8;
/// A voxel carrying no tissue label is scored at this fraction of the
/// model's peak density.
pub const FLOOR_DENSITY_FRACTION: f64 = 1e-6;
/// Default LUT resolution for single-echo models.
pub const LUT_BINS_SINGLE: usize = 4096;
/// Default LUT resolution per echo for double-echo models (the table is
/// bins^2 entries per tissue, so the single-echo default would not fit).
pub const LUT_BINS_DOUBLE: usize = 256;

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)

/// Labeled raw-intensity samples, the common input to every model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub channels: usize,
    points: BTreeMap<Tissue, Vec<Vec2>>,
}

impl TrainingSet {
    pub fn new(channels: usize) -> Result<TrainingSet, CoreError> {
        if channels == 0 || channels > MAX_CHANNELS {
            return Err(CoreError::BadParameter(format!("{channels} echo channels")));
        }
        Ok(TrainingSet { channels, points: BTreeMap::new() })
    }

    pub fn add_point(&mut self, tissue: Tissue, point: Vec2) -> Result<(), CoreError> {
        if tissue == Tissue::Unclassified {
            return Err(CoreError::BadParameter("cannot train on UNCLASSIFIED".into()));
        }
        for c in 0..self.channels {
            if !point[c].is_finite() {
                return Err(CoreError::Format(format!("non-finite training intensity for {tissue}")));
            }
        }
        self.points.entry(tissue).or_default().push(point);
        Ok(())
    }

    pub fn tissues(&self) -> impl Iterator<Item = Tissue> + '_ {
        self.points.keys().copied()
    }

    pub fn points(&self, tissue: Tissue) -> Option<&[Vec2]> {
        self.points.get(&tissue).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps one echo, dropping the other.
    pub fn select_channel(&self, channel: usize) -> Result<TrainingSet, CoreError> {
        if channel >= self.channels {
            return Err(CoreError::BadParameter(format!(
                "channel {channel} of a {}-channel training set",
                self.channels
            )));
        }
        let mut out = TrainingSet::new(1)?;
        for (&t, pts) in &self.points {
            for p in pts {
                out.add_point(t, [p[channel], 0.0])?;
            }
        }
        Ok(out)
    }

    /// Pooled within-tissue standard deviation of one echo
    /// (sum of squared deviations over sum of per-tissue degrees of freedom).
    pub fn pooled_std(&self, channel: usize) -> f64 {
        let mut ss = 0.0;
        let mut dof = 0usize;
        for pts in self.points.values() {
            if pts.len() < 2 {
                continue;
            }
            let mean = pts.iter().map(|p| p[channel]).sum::<f64>() / pts.len() as f64;
            ss += pts.iter().map(|p| (p[channel] - mean).powi(2)).sum::<f64>();
            dof += pts.len() - 1;
        }
        if dof == 0 {
            0.0
        } else {
            (ss / dof as f64).sqrt()
        }
    }

    /// Default kernel width: a fixed fraction of the pooled within-tissue
    /// spread, averaged over echoes, floored so degenerate sets still work.
    pub fn default_sigma(&self) -> f64 {
        let mean_std =
            (0..self.channels).map(|c| self.pooled_std(c)).sum::<f64>() / self.channels as f64;
        (SIGMA_FRACTION * mean_std).max(SIGMA_FLOOR)
    }

    /// Parses the TSV interchange format: `tissue<TAB>echo1[<TAB>echo2]` per
    /// line; blank lines and lines starting with `#` are skipped.
    pub fn from_tsv<R: Read>(r: R, channels: usize) -> Result<TrainingSet, CoreError> {
        let mut set = TrainingSet::new(channels)?;
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut fields = trimmed.split('\t');
            let tissue = Tissue::parse(fields.next().unwrap_or(""))
                .map_err(|e| CoreError::Format(format!("line {}: {e}", lineno + 1)))?;
            let mut point = [0.0; MAX_CHANNELS];
            for c in 0..channels {
                let field = fields.next().ok_or_else(|| {
                    CoreError::Format(format!("line {}: expected {channels} intensity columns", lineno + 1))
                })?;
                point[c] = field.trim().parse::<f64>().map_err(|_| {
                    CoreError::Format(format!("line {}: bad intensity {field:?}", lineno + 1))
                })?;
            }
            if fields.next().is_some() {
                return Err(CoreError::Format(format!(
                    "line {}: more columns than the declared {channels} channels",
                    lineno + 1
                )));
            }
            set.add_point(tissue, point)?;
        }
        if set.is_empty() {
            return Err(CoreError::Format("training file contains no points".into()));
        }
        Ok(set)
    }

    pub fn to_tsv<W: Write>(&self, mut w: W) -> Result<(), CoreError> {
        for (&t, pts) in &self.points {
            for p in pts {
                write!(w, "{}", t.name())?;
                for c in 0..self.channels {
                    write!(w, "\t{}", p[c])?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    pub fn from_tsv_file(path: &Path, channels: usize) -> Result<TrainingSet, CoreError> {
        Self::from_tsv(File::open(path)?, channels)
    }
}

// ---------------------------------------------------------------------------
// Parzen window density
// ---------------------------------------------------------------------------

/// Exact Parzen-window density: an equal-weight mixture of isotropic
/// Gaussians of width `sigma`, one per training point, in raw units.
#[derive(Debug, Clone)]
pub struct ParzenModel {
    pub channels: usize,
    pub sigma: f64,
    tissues: Vec<Tissue>,
    points: [Vec<Vec2>; 6],
}

impl ParzenModel {
    pub fn new(training: &TrainingSet, sigma: f64) -> Result<ParzenModel, CoreError> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(CoreError::BadParameter(format!("kernel width sigma = {sigma}")));
        }
        if training.is_empty() {
            return Err(CoreError::ModelFit("empty training set".into()));
        }
        let mut points: [Vec<Vec2>; 6] = Default::default();
        let mut tissues = Vec::new();
        for t in training.tissues() {
            let pts = training.points(t).unwrap();
            points[t.slot()] = pts.to_vec();
            tissues.push(t);
        }
        Ok(ParzenModel { channels: training.channels, sigma, tissues, points })
    }

    pub fn with_default_sigma(training: &TrainingSet) -> Result<ParzenModel, CoreError> {
        ParzenModel::new(training, training.default_sigma())
    }

    /// Same training points under a different kernel width.
    pub fn with_sigma(&self, sigma: f64) -> Result<ParzenModel, CoreError> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(CoreError::BadParameter(format!("kernel width sigma = {sigma}")));
        }
        Ok(ParzenModel { sigma, ..self.clone() })
    }

    pub fn tissues(&self) -> &[Tissue] {
        &self.tissues
    }

    pub fn covers(&self, tissue: Tissue) -> bool {
        !self.points[tissue.slot()].is_empty()
    }

    pub fn training_points(&self, tissue: Tissue) -> &[Vec2] {
        &self.points[tissue.slot()]
    }

    /// ln p(z | tissue, bias): kernel sum over the training points at the
    /// bias-corrected intensity exp(bias) * z.
    pub fn log_density(&self, z: Vec2, tissue: Tissue, bias: Vec2) -> Result<f64, CoreError> {
        if !self.covers(tissue) {
            return Err(CoreError::UnmodeledTissue(tissue));
        }
        Ok(self.log_density_at(self.correct(z, bias), tissue.slot()))
    }

    #[inline]
    pub(crate) fn correct(&self, z: Vec2, bias: Vec2) -> Vec2 {
        let mut v = [0.0; MAX_CHANNELS];
        for c in 0..self.channels {
            v[c] = bias[c].exp() * z[c];
        }
        v
    }

    /// Kernel sum at an already-corrected intensity (log-sum-exp, stable).
    pub(crate) fn log_density_at(&self, corrected: Vec2, slot: usize) -> f64 {
        let pts = &self.points[slot];
        let inv_two_sigma_sq = 1.0 / (2.0 * self.sigma * self.sigma);
        let mut max_e = f64::NEG_INFINITY;
        for p in pts {
            let e = -norm_sq(vec_sub(corrected, *p), self.channels) * inv_two_sigma_sq;
            if e > max_e {
                max_e = e;
            }
        }
        let mut sum = 0.0;
        for p in pts {
            let e = -norm_sq(vec_sub(corrected, *p), self.channels) * inv_two_sigma_sq;
            sum += (e - max_e).exp();
        }
        self.log_norm() - (pts.len() as f64).ln() + max_e + sum.ln()
    }

    /// ln of the per-kernel normalizer (2*pi)^(-d/2) * sigma^(-d).
    fn log_norm(&self) -> f64 {
        let d = self.channels as f64;
        -0.5 * d * LN_2PI - d * self.sigma.ln()
    }

    /// Score assigned to a voxel with no tissue label: a small fixed fraction
    /// of the largest value any kernel can reach.
    pub fn floor_log_density(&self) -> f64 {
        FLOOR_DENSITY_FRACTION.ln() + self.log_norm()
    }
}

// ---------------------------------------------------------------------------
// Log-domain Gaussian surrogate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct GaussianEntry {
    mean: Vec2,
    cov: Sym2,
    precision: Sym2,
    log_det: f64,
}

/// One Gaussian per tissue over log-intensities.
#[derive(Debug, Clone)]
pub struct GaussianTissueModel {
    pub channels: usize,
    pub log_clamp: f64,
    tissues: Vec<Tissue>,
    entries: [Option<GaussianEntry>; 6],
}

/// Clamped natural log used everywhere raw intensities enter log domain.
#[inline]
pub fn log_intensity(z: f64, log_clamp: f64) -> f64 {
    z.max(log_clamp).ln()
}

/// Sample mean and covariance of log-clamped intensities, then SPD
/// regularization by adding lambda * I.
pub fn fit_gaussian_model(
    training: &TrainingSet,
    log_clamp: f64,
) -> Result<GaussianTissueModel, CoreError> {
    if !(log_clamp > 0.0) {
        return Err(CoreError::BadParameter(format!("log clamp {log_clamp} must be positive")));
    }
    let d = training.channels;
    let mut entries: [Option<GaussianEntry>; 6] = Default::default();
    let mut tissues = Vec::new();
    for t in training.tissues() {
        let pts = training.points(t).unwrap();
        if pts.len() < 2 {
            return Err(CoreError::ModelFit(format!(
                "{t} has {} point(s); covariance needs at least 2",
                pts.len()
            )));
        }
        let logs: Vec<Vec2> = pts
            .iter()
            .map(|p| {
                let mut l = [0.0; MAX_CHANNELS];
                for c in 0..d {
                    l[c] = log_intensity(p[c], log_clamp);
                }
                l
            })
            .collect();
        let n = logs.len() as f64;
        let mut mean = [0.0; MAX_CHANNELS];
        for l in &logs {
            for c in 0..d {
                mean[c] += l[c];
            }
        }
        for c in 0..d {
            mean[c] /= n;
        }
        let mut cov = Sym2::zero(d);
        for l in &logs {
            let r = vec_sub(*l, mean);
            cov.xx += r[0] * r[0];
            if d == 2 {
                cov.xy += r[0] * r[1];
                cov.yy += r[1] * r[1];
            }
        }
        cov = cov.scale(1.0 / (n - 1.0));
        let lambda = (COV_REG_REL * cov.trace() / d as f64).max(COV_REG_FLOOR);
        let cov = cov.add_scaled_identity(lambda);
        let det = cov.det();
        if !(det > 0.0) || cov.min_eigenvalue() <= 0.0 {
            return Err(CoreError::ModelFit(format!("{t} covariance is not positive definite")));
        }
        entries[t.slot()] = Some(GaussianEntry {
            mean,
            cov,
            precision: cov.inverse()?,
            log_det: det.ln(),
        });
        tissues.push(t);
    }
    if tissues.is_empty() {
        return Err(CoreError::ModelFit("empty training set".into()));
    }
    Ok(GaussianTissueModel { channels: d, log_clamp, tissues, entries })
}

impl GaussianTissueModel {
    /// Rebuilds a model from stored moments (the JSON model file path).
    pub fn from_moments(
        channels: usize,
        log_clamp: f64,
        moments: &BTreeMap<Tissue, (Vec2, Sym2)>,
    ) -> Result<GaussianTissueModel, CoreError> {
        let mut entries: [Option<GaussianEntry>; 6] = Default::default();
        let mut tissues = Vec::new();
        for (&t, &(mean, cov)) in moments {
            if cov.d != channels {
                return Err(CoreError::ModelFit(format!("{t} covariance order != {channels}")));
            }
            let det = cov.det();
            if !(det > 0.0) || cov.min_eigenvalue() <= 0.0 {
                return Err(CoreError::ModelFit(format!("{t} covariance is not positive definite")));
            }
            entries[t.slot()] =
                Some(GaussianEntry { mean, cov, precision: cov.inverse()?, log_det: det.ln() });
            tissues.push(t);
        }
        if tissues.is_empty() {
            return Err(CoreError::ModelFit("no tissue moments supplied".into()));
        }
        Ok(GaussianTissueModel { channels, log_clamp, tissues, entries })
    }

    pub fn tissues(&self) -> &[Tissue] {
        &self.tissues
    }

    pub fn covers(&self, tissue: Tissue) -> bool {
        self.entries[tissue.slot()].is_some()
    }

    fn entry(&self, tissue: Tissue) -> Result<&GaussianEntry, CoreError> {
        self.entries[tissue.slot()].as_ref().ok_or(CoreError::UnmodeledTissue(tissue))
    }

    pub fn mean(&self, tissue: Tissue) -> Result<Vec2, CoreError> {
        Ok(self.entry(tissue)?.mean)
    }

    pub fn covariance(&self, tissue: Tissue) -> Result<Sym2, CoreError> {
        Ok(self.entry(tissue)?.cov)
    }

    pub fn precision(&self, tissue: Tissue) -> Result<Sym2, CoreError> {
        Ok(self.entry(tissue)?.precision)
    }

    /// ln N(z_log + bias; mean, cov) for the tissue.
    pub fn log_density(&self, z_log: Vec2, tissue: Tissue, bias: Vec2) -> Result<f64, CoreError> {
        Ok(self.log_density_entry(z_log, self.entry(tissue)?, bias))
    }

    #[inline]
    fn log_density_entry(&self, z_log: Vec2, e: &GaussianEntry, bias: Vec2) -> f64 {
        let mut r = [0.0; MAX_CHANNELS];
        for c in 0..self.channels {
            r[c] = z_log[c] + bias[c] - e.mean[c];
        }
        let d = self.channels as f64;
        -0.5 * (d * LN_2PI + e.log_det + e.precision.quad_form(r))
    }

    pub(crate) fn log_density_slot(&self, z_log: Vec2, slot: usize, bias: Vec2) -> f64 {
        self.log_density_entry(z_log, self.entries[slot].as_ref().expect("covered slot"), bias)
    }

    /// Fixed score for unlabeled voxels: a small fraction of the highest
    /// mode density over all tissues.
    pub fn floor_log_density(&self) -> f64 {
        let d = self.channels as f64;
        let best_peak = self
            .tissues
            .iter()
            .map(|t| {
                let e = self.entries[t.slot()].as_ref().unwrap();
                -0.5 * (d * LN_2PI + e.log_det)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        FLOOR_DENSITY_FRACTION.ln() + best_peak
    }
}

// ---------------------------------------------------------------------------
// Quantized lookup table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct LutGrid {
    lo: Vec2,
    width: Vec2,
    values: Vec<f64>, // bins (d=1) or bins*bins (d=2), echo-0 major
}

/// Parzen density sampled at bin centers over each tissue's training range
/// (padded by 3 sigma); lookups snap to the nearest bin, clamped at the
/// edges, so queries far outside the range return the edge-bin value.
#[derive(Debug, Clone)]
pub struct DensityLut {
    pub channels: usize,
    pub bins: usize,
    tissues: Vec<Tissue>,
    grids: [Option<LutGrid>; 6],
    floor: f64,
}

pub fn build_lut(model: &ParzenModel, bins_per_echo: usize) -> Result<DensityLut, CoreError> {
    if bins_per_echo < 2 {
        return Err(CoreError::BadParameter(format!("{bins_per_echo} LUT bins; need at least 2")));
    }
    let d = model.channels;
    let b = bins_per_echo;
    let mut grids: [Option<LutGrid>; 6] = Default::default();
    for &t in model.tissues() {
        let pts = model.training_points(t);
        let mut lo = [0.0; MAX_CHANNELS];
        let mut width = [0.0; MAX_CHANNELS];
        for c in 0..d {
            let min = pts.iter().map(|p| p[c]).fold(f64::INFINITY, f64::min);
            let max = pts.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max);
            lo[c] = min - 3.0 * model.sigma;
            width[c] = (max + 3.0 * model.sigma - lo[c]) / b as f64;
        }
        let mut values = vec![0.0; if d == 1 { b } else { b * b }];
        if d == 1 {
            for (i, v) in values.iter_mut().enumerate() {
                let z = [lo[0] + (i as f64 + 0.5) * width[0], 0.0];
                *v = model.log_density_at(z, t.slot());
            }
        } else {
            for i0 in 0..b {
                let z0 = lo[0] + (i0 as f64 + 0.5) * width[0];
                for i1 in 0..b {
                    let z1 = lo[1] + (i1 as f64 + 0.5) * width[1];
                    values[i0 * b + i1] = model.log_density_at([z0, z1], t.slot());
                }
            }
        }
        grids[t.slot()] = Some(LutGrid { lo, width, values });
    }
    Ok(DensityLut {
        channels: d,
        bins: b,
        tissues: model.tissues().to_vec(),
        grids,
        floor: model.floor_log_density(),
    })
}

impl DensityLut {
    pub fn tissues(&self) -> &[Tissue] {
        &self.tissues
    }

    pub fn covers(&self, tissue: Tissue) -> bool {
        self.grids[tissue.slot()].is_some()
    }

    pub fn log_density(&self, z: Vec2, tissue: Tissue, bias: Vec2) -> Result<f64, CoreError> {
        if !self.covers(tissue) {
            return Err(CoreError::UnmodeledTissue(tissue));
        }
        let mut corrected = [0.0; MAX_CHANNELS];
        for c in 0..self.channels {
            corrected[c] = bias[c].exp() * z[c];
        }
        Ok(self.log_density_at(corrected, tissue.slot()))
    }

    #[inline]
    pub(crate) fn log_density_at(&self, corrected: Vec2, slot: usize) -> f64 {
        let g = self.grids[slot].as_ref().expect("covered slot");
        let bin = |c: usize| -> usize {
            let raw = (corrected[c] - g.lo[c]) / g.width[c];
            if raw <= 0.0 {
                0
            } else {
                (raw as usize).min(self.bins - 1)
            }
        };
        if self.channels == 1 {
            g.values[bin(0)]
        } else {
            g.values[bin(0) * self.bins + bin(1)]
        }
    }

    pub fn floor_log_density(&self) -> f64 {
        self.floor
    }
}

/// Default LUT resolution for a given echo count.
pub fn default_lut_bins(channels: usize) -> usize {
    if channels == 1 {
        LUT_BINS_SINGLE
    } else {
        LUT_BINS_DOUBLE
    }
}

// ---------------------------------------------------------------------------
// Evaluator handle shared by the optimizers
// ---------------------------------------------------------------------------

/// Borrowed view of one likelihood evaluator. Parzen and LUT views consume
/// raw intensities (multiplicative bias); the Gaussian view consumes log
/// intensities (additive bias).
#[derive(Debug, Clone, Copy)]
pub enum Likelihood<'a> {
    Parzen(&'a ParzenModel),
    Lut(&'a DensityLut),
    Gaussian(&'a GaussianTissueModel),
}

impl Likelihood<'_> {
    /// ln p(z | tissue, bias); `z_raw` and `z_log` are the same voxel in the
    /// two domains, the evaluator picks the one it needs.
    #[inline]
    pub fn log_density(&self, z_raw: Vec2, z_log: Vec2, tissue: Tissue, bias: Vec2) -> f64 {
        match self {
            Likelihood::Parzen(m) => m.log_density_at(m.correct(z_raw, bias), tissue.slot()),
            Likelihood::Lut(m) => {
                let mut corrected = [0.0; MAX_CHANNELS];
                for c in 0..m.channels {
                    corrected[c] = bias[c].exp() * z_raw[c];
                }
                m.log_density_at(corrected, tissue.slot())
            }
            Likelihood::Gaussian(m) => m.log_density_slot(z_log, tissue.slot(), bias),
        }
    }

    pub fn covers(&self, tissue: Tissue) -> bool {
        match self {
            Likelihood::Parzen(m) => m.covers(tissue),
            Likelihood::Lut(m) => m.covers(tissue),
            Likelihood::Gaussian(m) => m.covers(tissue),
        }
    }

    pub fn tissues(&self) -> &[Tissue] {
        match self {
            Likelihood::Parzen(m) => m.tissues(),
            Likelihood::Lut(m) => m.tissues(),
            Likelihood::Gaussian(m) => m.tissues(),
        }
    }

    pub fn floor_log_density(&self) -> f64 {
        match self {
            Likelihood::Parzen(m) => m.floor_log_density(),
            Likelihood::Lut(m) => m.floor_log_density(),
            Likelihood::Gaussian(m) => m.floor_log_density(),
        }
    }
}

/// The full bundle a segmentation run needs.
#[derive(Debug, Clone)]
pub struct TissueModels {
    pub parzen: ParzenModel,
    pub gaussian: GaussianTissueModel,
    pub lut: Option<DensityLut>,
}

impl TissueModels {
    pub fn fit(training: &TrainingSet, sigma: Option<f64>, log_clamp: f64) -> Result<TissueModels, CoreError> {
        let parzen = match sigma {
            Some(s) => ParzenModel::new(training, s)?,
            None => ParzenModel::with_default_sigma(training)?,
        };
        let gaussian = fit_gaussian_model(training, log_clamp)?;
        Ok(TissueModels { parzen, gaussian, lut: None })
    }

    pub fn channels(&self) -> usize {
        self.parzen.channels
    }

    /// Tissue classes shared by the evaluators, in label-code order.
    pub fn tissues(&self) -> &[Tissue] {
        self.parzen.tissues()
    }

    pub fn with_lut(mut self, bins: Option<usize>) -> Result<TissueModels, CoreError> {
        let bins = bins.unwrap_or_else(|| default_lut_bins(self.parzen.channels));
        self.lut = Some(build_lut(&self.parzen, bins)?);
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// Model file (JSON)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TissueRecord {
    points: Vec<Vec<f64>>,
    log_mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    channels: usize,
    sigma: f64,
    log_clamp: f64,
    tissues: BTreeMap<Tissue, TissueRecord>,
}

pub fn save_model<W: Write>(w: W, models: &TissueModels) -> Result<(), CoreError> {
    let d = models.channels();
    let mut tissues = BTreeMap::new();
    for &t in models.parzen.tissues() {
        let points = models
            .parzen
            .training_points(t)
            .iter()
            .map(|p| p[..d].to_vec())
            .collect();
        let mean = models.gaussian.mean(t)?;
        let cov = models.gaussian.covariance(t)?;
        let covariance = if d == 1 {
            vec![vec![cov.xx]]
        } else {
            vec![vec![cov.xx, cov.xy], vec![cov.xy, cov.yy]]
        };
        tissues.insert(t, TissueRecord { points, log_mean: mean[..d].to_vec(), covariance });
    }
    let file = ModelFile {
        channels: d,
        sigma: models.parzen.sigma,
        log_clamp: models.gaussian.log_clamp,
        tissues,
    };
    serde_json::to_writer_pretty(w, &file)?;
    Ok(())
}

pub fn load_model<R: Read>(r: R) -> Result<TissueModels, CoreError> {
    let file: ModelFile = serde_json::from_reader(r)?;
    let d = file.channels;
    if d == 0 || d > MAX_CHANNELS {
        return Err(CoreError::Format(format!("model declares {d} channels")));
    }
    let mut training = TrainingSet::new(d)?;
    let mut moments = BTreeMap::new();
    for (&t, rec) in &file.tissues {
        for p in &rec.points {
            if p.len() != d {
                return Err(CoreError::Format(format!("{t} training point has {} values", p.len())));
            }
            let mut point = [0.0; MAX_CHANNELS];
            point[..d].copy_from_slice(p);
            training.add_point(t, point)?;
        }
        if rec.log_mean.len() != d || rec.covariance.len() != d {
            return Err(CoreError::Format(format!("{t} moments do not match {d} channels")));
        }
        let mut mean = [0.0; MAX_CHANNELS];
        mean[..d].copy_from_slice(&rec.log_mean);
        let cov = if d == 1 {
            Sym2 { d: 1, xx: rec.covariance[0][0], xy: 0.0, yy: 0.0 }
        } else {
            if rec.covariance[0].len() != 2 || rec.covariance[1].len() != 2 {
                return Err(CoreError::Format(format!("{t} covariance is not 2x2")));
            }
            if (rec.covariance[0][1] - rec.covariance[1][0]).abs() > 1e-9 {
                return Err(CoreError::Format(format!("{t} covariance is not symmetric")));
            }
            Sym2 { d: 2, xx: rec.covariance[0][0], xy: rec.covariance[0][1], yy: rec.covariance[1][1] }
        };
        moments.insert(t, (mean, cov));
    }
    let parzen = ParzenModel::new(&training, file.sigma)?;
    let gaussian = GaussianTissueModel::from_moments(d, file.log_clamp, &moments)?;
    Ok(TissueModels { parzen, gaussian, lut: None })
}

pub fn save_model_file(path: &Path, models: &TissueModels) -> Result<(), CoreError> {
    save_model(BufWriter::new(File::create(path)?), models)
}

pub fn load_model_file(path: &Path) -> Result<TissueModels, CoreError> {
    load_model(BufReader::new(File::open(path)?))
}
