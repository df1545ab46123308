//! Synthetic double-echo MR volumes with controllable degradation:
//! per-tissue mean fill, one nearest-neighbor smoothing pass of strength S,
//! i.i.d. Gaussian noise of standard deviation N per echo, and a radially
//! linear intensity inhomogeneity of relative amplitude I. Also provides the
//! lattice templates the benchmarks segment: a layered ellipsoid "head" and
//! a sinusoidal sheet for cortical-thickness experiments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::tissue::Tissue;
use crate::volume::{Dims, LabelMap, Volume};

/// Raw-unit noise floor used as the background "tissue mean".
pub const BACKGROUND_MEAN: f64 = 30.0;

/// Mean intensity per tissue and echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueMeans {
    pub channels: usize,
    /// Indexed by tissue slot, then echo.
    table: [[f64; 2]; 6],
}

const PD_MEANS: [(Tissue, f64); 5] = [
    (Tissue::Background, BACKGROUND_MEAN),
    (Tissue::WhiteMatter, 823.0),
    (Tissue::GreyMatter, 1059.0),
    (Tissue::Csf, 1363.0),
    (Tissue::ScalpBone, 456.0),
];

const T2_MEANS: [(Tissue, f64); 5] = [
    (Tissue::Background, BACKGROUND_MEAN),
    (Tissue::WhiteMatter, 426.0),
    (Tissue::GreyMatter, 602.0),
    (Tissue::Csf, 1223.0),
    (Tissue::ScalpBone, 167.0),
];

impl TissueMeans {
    /// Both echoes: proton-density weighted first, T2 weighted second.
    pub fn double_echo() -> TissueMeans {
        let mut table = [[f64::NAN; 2]; 6];
        for (t, v) in PD_MEANS {
            table[t.slot()][0] = v;
        }
        for (t, v) in T2_MEANS {
            table[t.slot()][1] = v;
        }
        TissueMeans { channels: 2, table }
    }

    pub fn pd_only() -> TissueMeans {
        let mut table = [[f64::NAN; 2]; 6];
        for (t, v) in PD_MEANS {
            table[t.slot()][0] = v;
        }
        TissueMeans { channels: 1, table }
    }

    pub fn t2_only() -> TissueMeans {
        let mut table = [[f64::NAN; 2]; 6];
        for (t, v) in T2_MEANS {
            table[t.slot()][0] = v;
        }
        TissueMeans { channels: 1, table }
    }

    pub fn get(&self, tissue: Tissue, echo: usize) -> Result<f64, CoreError> {
        if tissue == Tissue::Unclassified || echo >= self.channels {
            return Err(CoreError::BadParameter(format!(
                "no mean for tissue {tissue} echo {echo}"
            )));
        }
        let v = self.table[tissue.slot()][echo];
        if v.is_nan() {
            return Err(CoreError::BadParameter(format!("no mean for tissue {tissue}")));
        }
        Ok(v)
    }

    pub fn set(&mut self, tissue: Tissue, echo: usize, value: f64) -> Result<(), CoreError> {
        if tissue == Tissue::Unclassified || echo >= self.channels {
            return Err(CoreError::BadParameter(format!(
                "cannot set mean for tissue {tissue} echo {echo}"
            )));
        }
        if !value.is_finite() || value < 0.0 || (value == 0.0 && tissue != Tissue::Background) {
            return Err(CoreError::BadParameter(format!(
                "tissue mean must be finite and positive, got {value}"
            )));
        }
        self.table[tissue.slot()][echo] = value;
        Ok(())
    }
}

impl Default for TissueMeans {
    fn default() -> TissueMeans {
        TissueMeans::double_echo()
    }
}

/// Full description of one synthetic volume.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub template: LabelMap,
    pub means: TissueMeans,
    /// Neighbor weight relative to the center voxel in the smoothing pass.
    pub smoothing: f64,
    /// Noise standard deviation in raw units, per echo.
    pub noise: f64,
    /// Relative amplitude of the radial intensity gradient, in [0, 1).
    pub inhomogeneity: f64,
    /// Center the gradient measures distance from (voxel coordinates).
    pub center: [f64; 3],
    /// Whether the factor is 1 + I at the smallest distance (true) or the
    /// largest (false).
    pub near_high: bool,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(template: LabelMap, means: TissueMeans) -> PhantomSpec {
        let nz = template.dims.nz;
        PhantomSpec {
            template,
            means,
            smoothing: 0.0,
            noise: 0.0,
            inhomogeneity: 0.0,
            center: [0.0, 0.0, (nz as f64 - 1.0) / 2.0],
            near_high: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.smoothing >= 0.0) || !self.smoothing.is_finite() {
            return Err(CoreError::BadParameter(format!("smoothing S = {}", self.smoothing)));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(CoreError::BadParameter(format!("noise N = {}", self.noise)));
        }
        if !(0.0..1.0).contains(&self.inhomogeneity) {
            return Err(CoreError::BadParameter(format!(
                "inhomogeneity I = {} outside [0, 1)",
                self.inhomogeneity
            )));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(CoreError::BadParameter("non-finite inhomogeneity center".into()));
        }
        Ok(())
    }
}

/// The affine-in-distance multiplicative field. Over non-background voxels
/// of the template the factor spans exactly [1-I, 1+I]; background voxels
/// continue the same linear law.
pub fn radial_inhomogeneity(
    template: &LabelMap,
    inhomogeneity: f64,
    center: [f64; 3],
    near_high: bool,
) -> Result<Vec<f64>, CoreError> {
    if !(0.0..1.0).contains(&inhomogeneity) {
        return Err(CoreError::BadParameter(format!("inhomogeneity I = {inhomogeneity}")));
    }
    let dims = template.dims;
    let n = dims.voxels();
    let dist = |i: usize| -> f64 {
        let (x, y, z) = dims.coords(i);
        let dx = x as f64 - center[0];
        let dy = y as f64 - center[1];
        let dz = z as f64 - center[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    };
    let mut d_min = f64::INFINITY;
    let mut d_max = f64::NEG_INFINITY;
    for i in 0..n {
        if template.get(i) != Tissue::Background {
            let d = dist(i);
            d_min = d_min.min(d);
            d_max = d_max.max(d);
        }
    }
    if !d_min.is_finite() {
        return Err(CoreError::BadParameter(
            "inhomogeneity range undefined: template has no non-background voxels".into(),
        ));
    }
    if inhomogeneity == 0.0 {
        return Ok(vec![1.0; n]);
    }
    if d_max - d_min <= 0.0 {
        return Err(CoreError::BadParameter(
            "inhomogeneity range undefined: all non-background voxels are equidistant from the center"
                .into(),
        ));
    }
    // affine map with factor(d_min) and factor(d_max) at 1 +/- I
    let (f_near, f_far) = if near_high {
        (1.0 + inhomogeneity, 1.0 - inhomogeneity)
    } else {
        (1.0 - inhomogeneity, 1.0 + inhomogeneity)
    };
    let slope = (f_far - f_near) / (d_max - d_min);
    Ok((0..n).map(|i| f_near + slope * (dist(i) - d_min)).collect())
}

/// Generates the volume: means, one smoothing pass, per-echo noise, then
/// the multiplicative gradient. Bit-reproducible for a seed; the noise uses
/// one counter-addressed stream per voxel so the output cannot depend on
/// evaluation order.
pub fn synthesize(spec: &PhantomSpec) -> Result<Volume, CoreError> {
    spec.validate()?;
    let t_dims = spec.template.dims;
    let dims = Dims::new(t_dims.nx, t_dims.ny, t_dims.nz, spec.means.channels)?;
    let n = dims.voxels();
    let d = dims.channels;

    // step 1: per-tissue means
    let mut vol = Volume::zeros(dims);
    vol.voxel_mm = spec.template.voxel_mm;
    for i in 0..n {
        let t = spec.template.get(i);
        for c in 0..d {
            vol.set(i, c, spec.means.get(t, c)?);
        }
    }

    // step 2: one pass of the 7-point kernel {center 1, each neighbor S},
    // normalized over the taps that exist so constants pass through
    if spec.smoothing > 0.0 {
        let s = spec.smoothing;
        let src = vol.clone();
        for i in 0..n {
            let mut wsum = 1.0;
            let mut acc = [0.0; 2];
            for c in 0..d {
                acc[c] = src.get(i, c);
            }
            for j in t_dims.neighbors(i) {
                wsum += s;
                for c in 0..d {
                    acc[c] += s * src.get(j, c);
                }
            }
            for c in 0..d {
                vol.set(i, c, acc[c] / wsum);
            }
        }
    }

    // step 3: independent Gaussian noise per voxel and echo
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise)
            .map_err(|e| CoreError::BadParameter(format!("noise distribution: {e}")))?;
        let base = ChaCha8Rng::seed_from_u64(spec.seed);
        for i in 0..n {
            let mut rng = base.clone();
            rng.set_stream(i as u64);
            for c in 0..d {
                let v = vol.get(i, c) + normal.sample(&mut rng);
                vol.set(i, c, v);
            }
        }
    }

    // step 4: multiplicative radial gradient, same factor for both echoes
    if spec.inhomogeneity > 0.0 {
        let field =
            radial_inhomogeneity(&spec.template, spec.inhomogeneity, spec.center, spec.near_high)?;
        for i in 0..n {
            for c in 0..d {
                let v = vol.get(i, c) * field[i];
                vol.set(i, c, v);
            }
        }
    }

    Ok(vol)
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// A sinusoidal sheet of grey matter, `thickness` voxels thick along y,
/// separating white matter (low y) from background (high y); constant in z.
/// `periods` full sine cycles span the x extent; `amplitude` defaults to a
/// quarter of the y extent.
pub fn sinusoidal_gyrus(
    dims: Dims,
    thickness: usize,
    periods: f64,
    amplitude: Option<f64>,
) -> Result<LabelMap, CoreError> {
    if thickness == 0 {
        return Err(CoreError::BadParameter("sheet thickness must be at least 1".into()));
    }
    if !(periods > 0.0) || !periods.is_finite() {
        return Err(CoreError::BadParameter(format!("periods = {periods}")));
    }
    let ny = dims.ny as f64;
    let amp = amplitude.unwrap_or(ny / 4.0);
    if !(amp >= 0.0) || !amp.is_finite() {
        return Err(CoreError::BadParameter(format!("amplitude = {amp}")));
    }
    let midline = ny / 2.0;
    let mut starts = Vec::with_capacity(dims.nx);
    for x in 0..dims.nx {
        let phase = 2.0 * std::f64::consts::PI * periods * x as f64 / dims.nx as f64;
        let start = (midline + amp * phase.sin()).round() as i64;
        starts.push(start);
    }
    let lo = *starts.iter().min().unwrap();
    let hi = starts.iter().map(|&s| s + thickness as i64).max().unwrap();
    if lo < 1 || hi > dims.ny as i64 - 1 {
        return Err(CoreError::BadParameter(format!(
            "sheet of thickness {thickness} with amplitude {amp} leaves no room for both \
             neighbors in ny = {}",
            dims.ny
        )));
    }
    let mut labels = LabelMap::filled(dims, Tissue::Background);
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let idx = dims.linear_index(x, y, z)?;
                let start = starts[x];
                let yi = y as i64;
                let t = if yi < start {
                    Tissue::WhiteMatter
                } else if yi < start + thickness as i64 {
                    Tissue::GreyMatter
                } else {
                    Tissue::Background
                };
                labels.set(idx, t);
            }
        }
    }
    Ok(labels)
}

/// Layered ellipsoid "head": concentric shells of white matter, grey
/// matter, CSF and (optionally) scalp-bone inside background, with a mild
/// deterministic angular ripple on the inner boundaries so they are not
/// perfectly smooth. `ripple` is the relative boundary modulation (0 turns
/// it off).
pub fn shell_template(dims: Dims, with_sb: bool, ripple: f64) -> LabelMap {
    let cx = (dims.nx as f64 - 1.0) / 2.0;
    let cy = (dims.ny as f64 - 1.0) / 2.0;
    let cz = (dims.nz as f64 - 1.0) / 2.0;
    let rx = dims.nx as f64 / 2.0;
    let ry = dims.ny as f64 / 2.0;
    let rz = dims.nz as f64 / 2.0;
    let mut labels = LabelMap::filled(dims, Tissue::Background);
    for i in 0..dims.voxels() {
        let (x, y, z) = dims.coords(i);
        let dx = (x as f64 - cx) / rx;
        let dy = (y as f64 - cy) / ry;
        let dz = (z as f64 - cz) / rz;
        let rho = (dx * dx + dy * dy + dz * dz).sqrt();
        let theta = dy.atan2(dx);
        let wm_edge = 0.55 * (1.0 + ripple * (3.0 * theta + 1.3).sin());
        let gm_edge = 0.72 * (1.0 + ripple * (2.0 * theta - 0.7).cos());
        let t = if rho < wm_edge {
            Tissue::WhiteMatter
        } else if rho < gm_edge {
            Tissue::GreyMatter
        } else if rho < 0.82 {
            Tissue::Csf
        } else if rho < 0.95 && with_sb {
            Tissue::ScalpBone
        } else {
            Tissue::Background
        };
        labels.set(i, t);
    }
    labels
}
