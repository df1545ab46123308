//! Simulated annealing over the joint (labels, bias) state.
//!
//! Each sweep visits every voxel once and makes two independent Metropolis
//! decisions: a label proposal (uniform over the other modeled tissues) and
//! a bias proposal (uniform perturbation of width `delta` per channel). The
//! acceptance ratio uses the tempered increment of the log-posterior; the
//! per-voxel log-likelihood is cached so an increment costs one density
//! evaluation. Running totals of likelihood, label energy and bias energy
//! provide the per-sweep energy trace without a full recomputation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::energy::{local_bias_energy, local_label_energy, Temperature};
use crate::error::CoreError;
use crate::intensity::TissueModels;
use crate::mat::Vec2;
use crate::tissue::Tissue;
use crate::volume::{BiasField, LabelMap, Volume};

use super::{
    full_energies, init_with_likelihood, label_likelihood, stream_seed, Algorithm, Ctx,
    Diagnostics, OptState, RunParams,
};
use crate::intensity::Likelihood;

/// Acceptance probability for a tempered log-posterior increment.
#[inline]
pub fn metropolis_probability(delta_tempered: f64) -> f64 {
    if delta_tempered >= 0.0 {
        1.0
    } else {
        delta_tempered.exp()
    }
}

/// One Metropolis decision. A uniform variate is always drawn, so the
/// consumed random stream does not depend on the sign of the increment.
#[inline]
pub fn metropolis_accept<R: Rng + ?Sized>(delta_tempered: f64, rng: &mut R) -> bool {
    let u: f64 = rng.gen::<f64>();
    u < delta_tempered.exp()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SweepStats {
    pub label_accepts: usize,
    pub bias_accepts: usize,
}

pub(crate) struct SweepCache {
    pub ll: Vec<f64>,
    pub ll_sum: f64,
    pub label_e: f64,
    pub bias_e: f64,
}

impl SweepCache {
    pub fn build(
        ctx: &Ctx<'_>,
        lik: Likelihood<'_>,
        state: &OptState,
        pot: &crate::energy::PotentialTable,
        prior: &crate::energy::BiasPrior,
    ) -> SweepCache {
        let (ll, ll_sum, label_e, bias_e) =
            full_energies(ctx, lik, &state.labels, &state.bias, pot, prior);
        SweepCache { ll, ll_sum, label_e, bias_e }
    }

    pub fn log_posterior(&self) -> f64 {
        self.ll_sum - self.label_e - self.bias_e
    }
}

/// Decision for one voxel against a frozen snapshot of the state. In the
/// checkerboard mode voxels of one color never neighbor each other, so their
/// decisions commute and applying them in index order reproduces the
/// per-voxel-RNG sequential result for that color.
struct VoxelMove {
    new_label: Tissue,
    label_accept: bool,
    d_label_e: f64,
    dll_label: f64,
    new_bias: Vec2,
    bias_accept: bool,
    d_bias_e: f64,
    dll_bias: f64,
    ll_after: f64,
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn propose_voxel<R: Rng + ?Sized>(
    ctx: &Ctx<'_>,
    lik: Likelihood<'_>,
    labels: &LabelMap,
    bias: &BiasField,
    pot: &crate::energy::PotentialTable,
    prior: &crate::energy::BiasPrior,
    params: &RunParams,
    temperature: f64,
    i: usize,
    ll_cur: f64,
    rng: &mut R,
) -> VoxelMove {
    let d = ctx.volume.dims.channels;
    let cur = labels.get(i);
    let b = bias.get(i);
    let mut ll_i = ll_cur;

    // --- label proposal: uniform over modeled tissues other than the current
    let mut mv = VoxelMove {
        new_label: cur,
        label_accept: false,
        d_label_e: 0.0,
        dll_label: 0.0,
        new_bias: b,
        bias_accept: false,
        d_bias_e: 0.0,
        dll_bias: 0.0,
        ll_after: ll_cur,
    };
    let n_cand = ctx.tissues.len() - usize::from(ctx.tissues.contains(&cur));
    if n_cand > 0 {
        let mut k = rng.gen_range(0..n_cand);
        let mut pick = ctx.tissues[0];
        for &t in &ctx.tissues {
            if t == cur {
                continue;
            }
            if k == 0 {
                pick = t;
                break;
            }
            k -= 1;
        }
        let ll_new = ctx.ll(lik, i, pick, b);
        let d_e = local_label_energy(labels, i, pick, pot) - local_label_energy(labels, i, cur, pot);
        let delta = (ll_new - ll_i - d_e) / temperature;
        if metropolis_accept(delta, rng) {
            mv.new_label = pick;
            mv.label_accept = true;
            mv.d_label_e = d_e;
            mv.dll_label = ll_new - ll_i;
            ll_i = ll_new;
        }
    }

    // --- bias proposal: uniform step of half-width delta per channel
    if !params.freeze_bias {
        let mut b2 = b;
        for c in 0..d {
            b2[c] = b[c] + rng.gen_range(-params.delta..params.delta);
        }
        let label_now = mv.new_label;
        let ll_new = ctx.ll(lik, i, label_now, b2);
        let d_be = local_bias_energy(bias, i, b2, prior) - local_bias_energy(bias, i, b, prior);
        let delta = (ll_new - ll_i - d_be) / temperature;
        if metropolis_accept(delta, rng) {
            mv.new_bias = b2;
            mv.bias_accept = true;
            mv.d_bias_e = d_be;
            mv.dll_bias = ll_new - ll_i;
            ll_i = ll_new;
        }
    }

    mv.ll_after = ll_i;
    mv
}

#[inline]
fn apply_move(
    state: &mut OptState,
    cache: &mut SweepCache,
    stats: &mut SweepStats,
    i: usize,
    mv: &VoxelMove,
) {
    if mv.label_accept {
        state.labels.set(i, mv.new_label);
        cache.ll_sum += mv.dll_label;
        cache.label_e += mv.d_label_e;
        stats.label_accepts += 1;
    }
    if mv.bias_accept {
        state.bias.set(i, mv.new_bias);
        cache.ll_sum += mv.dll_bias;
        cache.bias_e += mv.d_bias_e;
        stats.bias_accepts += 1;
    }
    cache.ll[i] = mv.ll_after;
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn sweep_once(
    ctx: &Ctx<'_>,
    lik: Likelihood<'_>,
    state: &mut OptState,
    cache: &mut SweepCache,
    pot: &crate::energy::PotentialTable,
    prior: &crate::energy::BiasPrior,
    params: &RunParams,
    temperature: Temperature,
    sweep_index: u64,
    rng: &mut ChaCha8Rng,
) -> SweepStats {
    let n = state.labels.dims.voxels();
    let t = temperature.get();
    let mut stats = SweepStats::default();
    if params.parallel {
        use rayon::prelude::*;
        for color in 0..2usize {
            let dims = state.labels.dims;
            let labels = &state.labels;
            let bias = &state.bias;
            let ll = &cache.ll;
            let moves: Vec<Option<VoxelMove>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let (x, y, z) = dims.coords(i);
                    if (x + y + z) % 2 != color {
                        return None;
                    }
                    let mut vr =
                        ChaCha8Rng::seed_from_u64(stream_seed(params.seed, sweep_index, i as u64));
                    Some(propose_voxel(ctx, lik, labels, bias, pot, prior, params, t, i, ll[i], &mut vr))
                })
                .collect();
            for (i, mv) in moves.iter().enumerate() {
                if let Some(mv) = mv {
                    apply_move(state, cache, &mut stats, i, mv);
                }
            }
        }
    } else {
        for i in 0..n {
            let mv = propose_voxel(
                ctx, lik, &state.labels, &state.bias, pot, prior, params, t, i, cache.ll[i], rng,
            );
            apply_move(state, cache, &mut stats, i, &mv);
        }
    }
    stats
}

/// One annealing sweep over an externally managed state. Rebuilds the
/// per-voxel likelihood cache on entry; `sa_run` keeps the cache alive
/// across sweeps instead.
pub fn sa_sweep(
    state: &mut OptState,
    volume: &Volume,
    models: &TissueModels,
    params: &RunParams,
    temperature: Temperature,
    rng: &mut ChaCha8Rng,
) -> Result<SweepStats, CoreError> {
    params.validate()?;
    let lik = label_likelihood(models, params);
    let ctx = Ctx::new(volume, lik);
    let pot = params.potential();
    let prior = params.prior();
    let mut cache = SweepCache::build(&ctx, lik, state, &pot, &prior);
    let stats = sweep_once(
        &ctx,
        lik,
        state,
        &mut cache,
        &pot,
        &prior,
        params,
        temperature,
        state.step + 1,
        rng,
    );
    state.step += 1;
    Ok(stats)
}

/// Full annealing run: initialization, then `sweeps` sweeps under the
/// logarithmic schedule.
pub fn sa_run(
    volume: &Volume,
    models: &TissueModels,
    params: &RunParams,
) -> Result<(LabelMap, BiasField, Diagnostics), CoreError> {
    let forced = RunParams { algorithm: Algorithm::Sa, ..params.clone() };
    super::segment(volume, models, &forced)
}

pub(crate) fn sa_run_inner(
    volume: &Volume,
    models: &TissueModels,
    params: &RunParams,
) -> Result<(LabelMap, BiasField, Diagnostics), CoreError> {
    let lik = label_likelihood(models, params);
    let ctx = Ctx::new(volume, lik);
    let pot = params.potential();
    let prior = params.prior();
    let schedule = params.schedule();
    let mut state = init_with_likelihood(volume, lik, params.unclassified_threshold.map(f64::ln));
    let mut cache = SweepCache::build(&ctx, lik, &state, &pot, &prior);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut diag = Diagnostics::default();
    let voxels = volume.dims.voxels() as f64;
    for sweep in 1..=params.sweeps {
        let temperature = schedule.temperature(sweep);
        let stats = sweep_once(
            &ctx,
            lik,
            &mut state,
            &mut cache,
            &pot,
            &prior,
            params,
            temperature,
            sweep as u64,
            &mut rng,
        );
        state.step += 1;
        diag.iterations_run += 1;
        diag.energy_trace.push(cache.log_posterior());
        diag.label_changes.push(stats.label_accepts as f64 / voxels);
    }
    Ok((state.labels, state.bias, diag))
}
