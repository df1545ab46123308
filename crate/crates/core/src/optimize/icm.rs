//! Iterated conditional modes, in two flavors that differ only in how the
//! bias field is re-estimated:
//!
//! * variant 1 solves the single-voxel stationarity condition of the joint
//!   objective in place (Gauss-Seidel over the lattice), one small linear
//!   system per voxel;
//! * variant 2 forms a per-voxel precision-weighted residual and normalizer
//!   from soft tissue responsibilities, low-pass filters both fields, and
//!   takes the filtered ratio as the new bias everywhere.
//!
//! Both follow with the same greedy label pass. The adaptive-smoothing
//! baseline is variant 2 with every pair potential zeroed.

use crate::energy::{BiasPrior, PotentialTable};
use crate::error::CoreError;
use crate::intensity::{Likelihood, TissueModels};
use crate::mat::{vec_add, vec_scale, vec_sub, Sym2, Vec2};
use crate::volume::{BiasField, Dims, Volume};

use super::{label_pass, label_likelihood, Ctx, OptState, RunParams};

#[derive(Debug, Clone, Copy, Default)]
pub struct IterStats {
    /// Voxels whose label changed in the label pass.
    pub labels_changed: usize,
    /// Voxels where the filtered normalizer was unusable and the previous
    /// bias value was kept (variant 2 only).
    pub fallbacks: usize,
}

/// Per-tissue Gaussian moments in the layout the bias updates consume.
#[derive(Debug, Clone, Copy)]
struct GaussEntry {
    mean: Vec2,
    cov: Sym2,
    precision: Sym2,
}

fn gauss_table(ctx: &Ctx<'_>, models: &TissueModels) -> Result<[Option<GaussEntry>; 6], CoreError> {
    let mut table: [Option<GaussEntry>; 6] = [None; 6];
    for &t in &ctx.tissues {
        table[t.slot()] = Some(GaussEntry {
            mean: models.gaussian.mean(t)?,
            cov: models.gaussian.covariance(t)?,
            precision: models.gaussian.precision(t)?,
        });
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Variant 1: in-place single-voxel bias solve
// ---------------------------------------------------------------------------

/// Exact maximizer of (Gaussian log-likelihood minus local bias energy) for
/// one voxel with its neighborhood frozen:
///   [(2 alpha n + 2 beta) Sigma + I] y = 2 alpha Sigma s + (mean - z_log)
/// where `s` is the neighbor sum and `n` the neighbor count.
#[inline]
pub(crate) fn icm1_voxel_update(
    entry_cov: &Sym2,
    alpha: f64,
    beta: f64,
    neighbor_sum: Vec2,
    neighbor_count: f64,
    mean: Vec2,
    z_log: Vec2,
) -> Vec2 {
    let a = entry_cov
        .scale(2.0 * alpha * neighbor_count + 2.0 * beta)
        .add_scaled_identity(1.0);
    let rhs = vec_add(
        vec_scale(entry_cov.mul_vec(neighbor_sum), 2.0 * alpha),
        vec_sub(mean, z_log),
    );
    a.solve(rhs).expect("regularized covariance keeps the system positive definite")
}

fn icm1_bias_pass(
    ctx: &Ctx<'_>,
    table: &[Option<GaussEntry>; 6],
    labels: &crate::volume::LabelMap,
    bias: &mut BiasField,
    prior: &BiasPrior,
    parallel: bool,
) {
    let dims = labels.dims;
    let n_vox = dims.voxels();
    let update = |bias: &BiasField, i: usize| -> Option<Vec2> {
        let t = labels.get(i);
        let entry = table[t.slot()].as_ref()?;
        let mut s = [0.0; 2];
        let mut n = 0.0;
        for j in dims.neighbors(i) {
            s = vec_add(s, bias.get(j));
            n += 1.0;
        }
        Some(icm1_voxel_update(
            &entry.cov,
            prior.alpha,
            prior.beta,
            s,
            n,
            entry.mean,
            ctx.z_log[i],
        ))
    };
    if parallel {
        use rayon::prelude::*;
        for color in 0..2usize {
            let frozen = &*bias;
            let updates: Vec<Option<Vec2>> = (0..n_vox)
                .into_par_iter()
                .map(|i| {
                    let (x, y, z) = dims.coords(i);
                    if (x + y + z) % 2 != color {
                        return None;
                    }
                    update(frozen, i)
                })
                .collect();
            for (i, u) in updates.into_iter().enumerate() {
                if let Some(y) = u {
                    bias.set(i, y);
                }
            }
        }
    } else {
        for i in 0..n_vox {
            if let Some(y) = update(bias, i) {
                bias.set(i, y);
            }
        }
    }
}

pub(crate) fn icm1_inner(
    ctx: &Ctx<'_>,
    lik: Likelihood<'_>,
    models: &TissueModels,
    state: &mut OptState,
    pot: &PotentialTable,
    prior: &BiasPrior,
    params: &RunParams,
) -> Result<IterStats, CoreError> {
    let changed = label_pass(
        ctx,
        lik,
        &mut state.labels,
        &state.bias,
        pot,
        params.unclassified_threshold.map(f64::ln),
        params.parallel,
    );
    if !params.freeze_bias {
        let table = gauss_table(ctx, models)?;
        icm1_bias_pass(ctx, &table, &state.labels, &mut state.bias, prior, params.parallel);
    }
    Ok(IterStats { labels_changed: changed, fallbacks: 0 })
}

/// One label-then-bias iteration of variant 1 on an external state.
pub fn icm1_iteration(
    volume: &Volume,
    models: &TissueModels,
    params: &RunParams,
    state: &mut OptState,
) -> Result<IterStats, CoreError> {
    params.validate()?;
    let prepared = super::prepare_models(models, params, false)?;
    let models = prepared.as_ref();
    let lik = label_likelihood(models, params);
    let ctx = Ctx::new(volume, lik);
    let stats = icm1_inner(&ctx, lik, models, state, &params.potential(), &params.prior(), params)?;
    state.step += 1;
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Variant 2: filtered responsibility-weighted bias estimate
// ---------------------------------------------------------------------------

/// `passes` sweeps of the [1, 2, 1]/4 low-pass kernel along each axis in
/// turn (x, then y, then z). At line ends the kernel is renormalized over
/// the taps that exist, so constant fields pass through unchanged.
pub fn lowpass_3d(values: &mut [f64], dims: Dims, passes: u32) {
    assert_eq!(values.len(), dims.voxels(), "one scalar per voxel");
    let axes: [(usize, usize, usize); 3] = [
        (dims.nx, 1, 0),
        (dims.ny, dims.nx, 1),
        (dims.nz, dims.nx * dims.ny, 2),
    ];
    let mut buf = vec![0.0; dims.nx.max(dims.ny).max(dims.nz)];
    for &(len, stride, axis) in &axes {
        if len == 1 {
            continue;
        }
        // enumerate the start offset of every line along this axis
        let (outer_a, outer_b) = match axis {
            0 => (dims.ny, dims.nz),
            1 => (dims.nx, dims.nz),
            _ => (dims.nx, dims.ny),
        };
        for _ in 0..passes {
            for b in 0..outer_b {
                for a in 0..outer_a {
                    let start = match axis {
                        0 => (b * dims.ny + a) * dims.nx,
                        1 => b * dims.nx * dims.ny + a,
                        _ => a + b * dims.nx,
                    };
                    for q in 0..len {
                        buf[q] = values[start + q * stride];
                    }
                    for q in 0..len {
                        let mut num = 2.0 * buf[q];
                        let mut den = 2.0;
                        if q > 0 {
                            num += buf[q - 1];
                            den += 1.0;
                        }
                        if q + 1 < len {
                            num += buf[q + 1];
                            den += 1.0;
                        }
                        values[start + q * stride] = num / den;
                    }
                }
            }
        }
    }
}

fn icm2_bias_pass(
    ctx: &Ctx<'_>,
    models: &TissueModels,
    table: &[Option<GaussEntry>; 6],
    bias: &mut BiasField,
    params: &RunParams,
) -> usize {
    let dims = ctx.volume.dims;
    let d = dims.channels;
    let n_vox = dims.voxels();

    // Precision-weighted residual R and normalizer N per voxel. Tissue
    // responsibilities are the Gaussian densities at the current bias; the
    // uniform label prior is a shared constant and cancels in the ratio.
    let mut r0 = vec![0.0; n_vox];
    let mut r1 = vec![0.0; n_vox];
    let mut nxx = vec![0.0; n_vox];
    let mut nxy = vec![0.0; n_vox];
    let mut nyy = vec![0.0; n_vox];
    for i in 0..n_vox {
        let z = ctx.z_log[i];
        let y_old = bias.get(i);
        for &t in &ctx.tissues {
            let entry = table[t.slot()].as_ref().expect("table covers the candidate tissues");
            let w = models.gaussian.log_density_slot(z, t.slot(), y_old).exp();
            if w == 0.0 {
                continue;
            }
            let resid = entry.precision.mul_vec(vec_sub(entry.mean, z));
            r0[i] += w * resid[0];
            nxx[i] += w * entry.precision.xx;
            if d == 2 {
                r1[i] += w * resid[1];
                nxy[i] += w * entry.precision.xy;
                nyy[i] += w * entry.precision.yy;
            }
        }
    }

    lowpass_3d(&mut r0, dims, params.filter_passes);
    lowpass_3d(&mut nxx, dims, params.filter_passes);
    if d == 2 {
        lowpass_3d(&mut r1, dims, params.filter_passes);
        lowpass_3d(&mut nxy, dims, params.filter_passes);
        lowpass_3d(&mut nyy, dims, params.filter_passes);
    }

    let mut fallbacks = 0usize;
    for i in 0..n_vox {
        let n_mat = Sym2 { d, xx: nxx[i], xy: nxy[i], yy: nyy[i] };
        let det = n_mat.det();
        let usable = det.is_finite() && det > f64::MIN_POSITIVE && n_mat.min_eigenvalue() > 0.0;
        let solved = if usable { n_mat.solve([r0[i], r1[i]]).ok() } else { None };
        match solved {
            Some(y) if y[0].is_finite() && y[1].is_finite() => bias.set(i, y),
            _ => fallbacks += 1, // keep the previous bias value
        }
    }
    fallbacks
}

pub(crate) fn icm2_inner(
    ctx: &Ctx<'_>,
    lik: Likelihood<'_>,
    models: &TissueModels,
    state: &mut OptState,
    pot: &PotentialTable,
    params: &RunParams,
) -> Result<IterStats, CoreError> {
    let mut fallbacks = 0;
    if !params.freeze_bias {
        let table = gauss_table(ctx, models)?;
        fallbacks = icm2_bias_pass(ctx, models, &table, &mut state.bias, params);
    }
    let changed = label_pass(
        ctx,
        lik,
        &mut state.labels,
        &state.bias,
        pot,
        params.unclassified_threshold.map(f64::ln),
        params.parallel,
    );
    Ok(IterStats { labels_changed: changed, fallbacks })
}

/// One bias-then-label iteration of variant 2 on an external state.
pub fn icm2_iteration(
    volume: &Volume,
    models: &TissueModels,
    params: &RunParams,
    state: &mut OptState,
) -> Result<IterStats, CoreError> {
    params.validate()?;
    let prepared = super::prepare_models(models, params, false)?;
    let models = prepared.as_ref();
    let lik = label_likelihood(models, params);
    let ctx = Ctx::new(volume, lik);
    let stats = icm2_inner(&ctx, lik, models, state, &params.potential(), params)?;
    state.step += 1;
    Ok(stats)
}
