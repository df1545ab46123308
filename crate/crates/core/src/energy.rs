//! Gibbs energies and the tempered log-posterior objective.
//!
//! The posterior being maximized is
//!   (1/T) * [ sum_i ln p(z_i | x_i, y_i)  -  label_energy(x)  -  bias_energy(y) ]
//! up to an additive constant. Both energies run over the 6-neighbor lattice
//! with every unordered edge counted once.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::intensity::{log_intensity, Likelihood};
use crate::mat::Vec2;
use crate::tissue::Tissue;
use crate::volume::{BiasField, LabelMap, Volume};

/// Default penalty for a pair of unequal ordinary tissues.
pub const EPSILON_DEFAULT: f64 = 0.05;
/// Default penalty for scalp-bone touching a cerebral tissue (WM/GM/CSF):
/// ten ordinary disagreements, so one such adjacency outweighs a fully
/// disagreeing ordinary neighborhood.
pub const SB_BRAIN_DEFAULT: f64 = 0.5;
/// Default bias-gradient stiffness.
pub const ALPHA_DEFAULT: f64 = 100.0;
/// Default bias-magnitude penalty.
pub const BETA_DEFAULT: f64 = 20.0;

/// Symmetric pair potential over the six label codes. Equal real tissues
/// cost 0; `Unclassified` is indifferent (all-zero row and column).
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTable {
    e: [[f64; 6]; 6],
}

impl PotentialTable {
    /// `epsilon` for ordinary unequal pairs, `sb_brain` for scalp-bone
    /// against WM/GM/CSF.
    pub fn new(epsilon: f64, sb_brain: f64) -> PotentialTable {
        let mut e = [[0.0; 6]; 6];
        for a in Tissue::MODELED {
            for b in Tissue::MODELED {
                if a != b {
                    e[a.slot()][b.slot()] = epsilon;
                }
            }
        }
        for brain in [Tissue::WhiteMatter, Tissue::GreyMatter, Tissue::Csf] {
            e[Tissue::ScalpBone.slot()][brain.slot()] = sb_brain;
            e[brain.slot()][Tissue::ScalpBone.slot()] = sb_brain;
        }
        // Unclassified row/column stay zero: indifferent
        PotentialTable { e }
    }

    /// All-zero table: no neighborhood interaction at all.
    pub fn disabled() -> PotentialTable {
        PotentialTable { e: [[0.0; 6]; 6] }
    }

    #[inline]
    pub fn get(&self, a: Tissue, b: Tissue) -> f64 {
        self.e[a.slot()][b.slot()]
    }

    /// Overrides one pair (kept symmetric).
    pub fn set(&mut self, a: Tissue, b: Tissue, value: f64) -> Result<(), CoreError> {
        if !value.is_finite() {
            return Err(CoreError::BadParameter(format!("potential e[{a}][{b}] = {value}")));
        }
        if a == b && a != Tissue::Unclassified && value != 0.0 {
            return Err(CoreError::BadParameter(format!(
                "e[{a}][{a}] must stay 0: equal neighbors are the energy minimum"
            )));
        }
        self.e[a.slot()][b.slot()] = value;
        self.e[b.slot()][a.slot()] = value;
        Ok(())
    }
}

impl Default for PotentialTable {
    fn default() -> PotentialTable {
        PotentialTable::new(EPSILON_DEFAULT, SB_BRAIN_DEFAULT)
    }
}

/// Gaussian-MRF prior on the bias field: alpha * sum_edges |y_i - y_j|^2
/// + beta * sum_i |y_i|^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasPrior {
    pub alpha: f64,
    pub beta: f64,
}

impl BiasPrior {
    pub fn new(alpha: f64, beta: f64) -> Result<BiasPrior, CoreError> {
        if !(alpha >= 0.0) || !alpha.is_finite() || !(beta >= 0.0) || !beta.is_finite() {
            return Err(CoreError::BadParameter(format!("bias prior alpha={alpha} beta={beta}")));
        }
        Ok(BiasPrior { alpha, beta })
    }

    /// beta that makes the prior's expected shading deviation equal
    /// `expected_std` (in log units): beta = 1 / (2 * std^2).
    pub fn beta_for_expected_std(expected_std: f64) -> Result<f64, CoreError> {
        if !(expected_std > 0.0) {
            return Err(CoreError::BadParameter(format!("expected std {expected_std}")));
        }
        Ok(1.0 / (2.0 * expected_std * expected_std))
    }
}

impl Default for BiasPrior {
    fn default() -> BiasPrior {
        BiasPrior { alpha: ALPHA_DEFAULT, beta: BETA_DEFAULT }
    }
}

/// Annealing control parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub const UNIT: Temperature = Temperature(1.0);

    pub fn new(t: f64) -> Result<Temperature, CoreError> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(CoreError::BadParameter(format!("temperature {t}")));
        }
        Ok(Temperature(t))
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

/// Total neighborhood energy, each lattice edge counted once.
pub fn label_energy(labels: &LabelMap, pot: &PotentialTable) -> f64 {
    let raw = labels.labels();
    let mut total = 0.0;
    labels.dims.for_each_edge(|a, b| {
        total += pot.get(raw[a], raw[b]);
    });
    total
}

/// Energy voxel `i` would contribute with `candidate` against the current
/// neighbor labels: the sum of its incident edge potentials.
#[inline]
pub fn local_label_energy(labels: &LabelMap, i: usize, candidate: Tissue, pot: &PotentialTable) -> f64 {
    let raw = labels.labels();
    let mut total = 0.0;
    for j in labels.dims.neighbors(i) {
        total += pot.get(candidate, raw[j]);
    }
    total
}

/// Total bias-field energy, channels summed, edges counted once.
pub fn bias_energy(bias: &BiasField, prior: &BiasPrior) -> f64 {
    let d = bias.dims.channels;
    let vals = bias.values();
    let mut grad = 0.0;
    bias.dims.for_each_edge(|a, b| {
        for c in 0..d {
            let diff = vals[a * d + c] - vals[b * d + c];
            grad += diff * diff;
        }
    });
    let mag: f64 = vals.iter().map(|v| v * v).sum();
    prior.alpha * grad + prior.beta * mag
}

/// Energy voxel `i` contributes for a candidate bias value `y` against the
/// current neighbor values: alpha * sum_j |y - y_j|^2 + beta * |y|^2.
#[inline]
pub fn local_bias_energy(bias: &BiasField, i: usize, y: Vec2, prior: &BiasPrior) -> f64 {
    let d = bias.dims.channels;
    let mut grad = 0.0;
    for j in bias.dims.neighbors(i) {
        let yj = bias.get(j);
        for c in 0..d {
            let diff = y[c] - yj[c];
            grad += diff * diff;
        }
    }
    let mut mag = 0.0;
    for c in 0..d {
        mag += y[c] * y[c];
    }
    prior.alpha * grad + prior.beta * mag
}

/// Tempered log-posterior up to its normalizing constant:
/// (1/T) * [ sum_i ln p(z_i|x_i,y_i) - label_energy - bias_energy ].
/// Voxels labeled `Unclassified` contribute the likelihood floor.
pub fn log_posterior(
    labels: &LabelMap,
    bias: &BiasField,
    volume: &Volume,
    likelihood: Likelihood<'_>,
    pot: &PotentialTable,
    prior: &BiasPrior,
    temperature: Temperature,
) -> Result<f64, CoreError> {
    if !volume.dims.same_grid(&labels.dims) || !volume.dims.same_grid(&bias.dims) {
        return Err(CoreError::BadDims("labels/bias/volume grids differ".into()));
    }
    let d = volume.dims.channels;
    let floor = likelihood.floor_log_density();
    let log_clamp = crate::intensity::LOG_CLAMP_DEFAULT;
    let mut ll = 0.0;
    for i in 0..volume.dims.voxels() {
        let x = labels.get(i);
        if x == Tissue::Unclassified {
            ll += floor;
            continue;
        }
        if !likelihood.covers(x) {
            return Err(CoreError::UnmodeledTissue(x));
        }
        let z = volume.sample(i);
        let mut z_log = [0.0; 2];
        for c in 0..d {
            z_log[c] = log_intensity(z[c], log_clamp);
        }
        ll += likelihood.log_density(z, z_log, x, bias.get(i));
    }
    Ok((ll - label_energy(labels, pot) - bias_energy(bias, prior)) / temperature.get())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intensity::{ParzenModel, TrainingSet};
    use crate::volume::Dims;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn dims(nx: usize, ny: usize, nz: usize, c: usize) -> Dims {
        Dims::new(nx, ny, nz, c).unwrap()
    }

    #[test]
    fn uniform_labels_cost_nothing() {
        let labels = LabelMap::filled(dims(3, 3, 3, 1), Tissue::GreyMatter);
        assert_eq!(label_energy(&labels, &PotentialTable::default()), 0.0);
        let unc = LabelMap::filled(dims(3, 3, 3, 1), Tissue::Unclassified);
        assert_eq!(label_energy(&unc, &PotentialTable::default()), 0.0, "UNCLASSIFIED is indifferent");
    }

    #[test]
    fn checkerboard_2x2_counts_four_edges() {
        let labels = LabelMap::from_labels(
            dims(2, 2, 1, 1),
            vec![Tissue::WhiteMatter, Tissue::GreyMatter, Tissue::GreyMatter, Tissue::WhiteMatter],
        )
        .unwrap();
        let pot = PotentialTable::new(0.05, 0.5);
        assert_abs_diff_eq!(label_energy(&labels, &pot), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn local_energy_examples() {
        // 3x3x3 of WM, candidate GM at the centre: 6 disagreeing edges
        let labels = LabelMap::filled(dims(3, 3, 3, 1), Tissue::WhiteMatter);
        let pot = PotentialTable::new(0.05, 0.5);
        let centre = labels.dims.linear_index(1, 1, 1).unwrap();
        assert_abs_diff_eq!(
            local_label_energy(&labels, centre, Tissue::GreyMatter, &pot),
            0.30,
            epsilon = 1e-12
        );
        assert_eq!(local_label_energy(&labels, centre, Tissue::WhiteMatter, &pot), 0.0);
        // scalp-bone candidate with a single brain neighbor on a 1x1x2 grid
        let pair = LabelMap::from_labels(dims(1, 1, 2, 1), vec![Tissue::GreyMatter, Tissue::Background]).unwrap();
        assert_abs_diff_eq!(
            local_label_energy(&pair, 1, Tissue::ScalpBone, &pot),
            0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn potential_table_stays_symmetric_and_guards_diagonal() {
        let mut pot = PotentialTable::default();
        pot.set(Tissue::Background, Tissue::Csf, 0.2).unwrap();
        assert_eq!(pot.get(Tissue::Csf, Tissue::Background), 0.2);
        assert!(pot.set(Tissue::WhiteMatter, Tissue::WhiteMatter, 0.1).is_err());
    }

    #[test]
    fn constant_bias_energy_is_beta_term_only() {
        let mut bias = BiasField::neutral(dims(2, 2, 2, 1));
        for i in 0..8 {
            bias.set(i, [0.1, 0.0]);
        }
        let prior = BiasPrior::new(100.0, 20.0).unwrap();
        assert_relative_eq!(bias_energy(&bias, &prior), 1.6, epsilon = 1e-12);
    }

    #[test]
    fn two_voxel_bias_energy() {
        let prior = BiasPrior::new(100.0, 20.0).unwrap();
        for t in [0.05f64, -0.3, 1.7] {
            let mut bias = BiasField::neutral(dims(1, 1, 2, 1));
            bias.set(1, [t, 0.0]);
            assert_relative_eq!(
                bias_energy(&bias, &prior),
                100.0 * t * t + 20.0 * t * t,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn beta_from_expected_shading_deviation() {
        assert_abs_diff_eq!(BiasPrior::beta_for_expected_std(0.1).unwrap(), 50.0, epsilon = 1e-12);
        assert!(BiasPrior::beta_for_expected_std(0.0).is_err());
    }

    fn two_tissue_model() -> (TrainingSet, ParzenModel) {
        let mut s = TrainingSet::new(1).unwrap();
        for v in [95.0, 100.0, 105.0] {
            s.add_point(Tissue::WhiteMatter, [v, 0.0]).unwrap();
        }
        for v in [145.0, 150.0, 155.0] {
            s.add_point(Tissue::GreyMatter, [v, 0.0]).unwrap();
        }
        let m = ParzenModel::new(&s, 8.0).unwrap();
        (s, m)
    }

    #[test]
    fn posterior_scales_inversely_with_temperature() {
        let (_, parzen) = two_tissue_model();
        let d = dims(2, 2, 1, 1);
        let vol = Volume::from_data(d, vec![98.0, 148.0, 120.0, 101.0]).unwrap();
        let labels = LabelMap::from_labels(
            d,
            vec![Tissue::WhiteMatter, Tissue::GreyMatter, Tissue::WhiteMatter, Tissue::WhiteMatter],
        )
        .unwrap();
        let mut bias = BiasField::neutral(d);
        bias.set(2, [0.01, 0.0]);
        let pot = PotentialTable::default();
        let prior = BiasPrior::default();
        let lik = Likelihood::Parzen(&parzen);
        let p1 = log_posterior(&labels, &bias, &vol, lik, &pot, &prior, Temperature::UNIT).unwrap();
        let p2 = log_posterior(&labels, &bias, &vol, lik, &pot, &prior, Temperature::new(2.0).unwrap()).unwrap();
        assert_relative_eq!(p2, 0.5 * p1, epsilon = 1e-12);
    }

    #[test]
    fn posterior_argmax_matches_brute_force_on_2x2() {
        let (_, parzen) = two_tissue_model();
        let d = dims(2, 2, 1, 1);
        let vol = Volume::from_data(d, vec![98.0, 122.0, 126.0, 149.0]).unwrap();
        let bias = BiasField::neutral(d);
        let pot = PotentialTable::new(0.4, 0.5); // strong coupling: neighborhood matters
        let prior = BiasPrior::default();
        let lik = Likelihood::Parzen(&parzen);
        let tissues = [Tissue::WhiteMatter, Tissue::GreyMatter];

        // oracle: direct per-voxel kernel sums and direct edge enumeration,
        // no calls into log_posterior
        let sigma = 8.0;
        let wm = [95.0, 100.0, 105.0];
        let gm = [145.0, 150.0, 155.0];
        let direct_ll = |z: f64, t: Tissue| {
            let pts: &[f64] = if t == Tissue::WhiteMatter { &wm } else { &gm };
            let mut sum = 0.0;
            for &p in pts {
                sum += (-(z - p) * (z - p) / (2.0 * sigma * sigma)).exp()
                    / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
            }
            (sum / pts.len() as f64).ln()
        };
        let edges = [(0usize, 1usize), (2, 3), (0, 2), (1, 3)];

        let mut best_direct = (f64::NEG_INFINITY, 0usize);
        let mut best_api = (f64::NEG_INFINITY, 0usize);
        for mask in 0..16usize {
            let assign: Vec<Tissue> = (0..4).map(|v| tissues[(mask >> v) & 1]).collect();
            let mut direct = 0.0;
            for v in 0..4 {
                direct += direct_ll(vol.get(v, 0), assign[v]);
            }
            for (a, b) in edges {
                if assign[a] != assign[b] {
                    direct -= 0.4;
                }
            }
            if direct > best_direct.0 {
                best_direct = (direct, mask);
            }
            let labels = LabelMap::from_labels(d, assign).unwrap();
            let p = log_posterior(&labels, &bias, &vol, lik, &pot, &prior, Temperature::UNIT).unwrap();
            if p > best_api.0 {
                best_api = (p, mask);
            }
        }
        assert_eq!(best_api.1, best_direct.1, "API argmax differs from direct enumeration");
        assert_relative_eq!(best_api.0, best_direct.0, epsilon = 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn label_energy_incremental_consistency(
            seed in 0u64..1000,
            flip_voxel in 0usize..24,
            new_slot in 0usize..5,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = dims(4, 3, 2, 1);
            let labels_vec: Vec<Tissue> =
                (0..24).map(|_| Tissue::MODELED[rng.gen_range(0..5)]).collect();
            let mut labels = LabelMap::from_labels(d, labels_vec).unwrap();
            let pot = PotentialTable::default();
            let before = label_energy(&labels, &pot);
            let old = labels.get(flip_voxel);
            let new = Tissue::MODELED[new_slot];
            let delta = local_label_energy(&labels, flip_voxel, new, &pot)
                - local_label_energy(&labels, flip_voxel, old, &pot);
            labels.set(flip_voxel, new);
            let after = label_energy(&labels, &pot);
            prop_assert!((after - before - delta).abs() < 1e-9,
                "incremental {} vs global {}", delta, after - before);
        }

        #[test]
        fn bias_energy_incremental_consistency(
            seed in 0u64..1000,
            voxel in 0usize..12,
            newval in -0.5f64..0.5,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = dims(3, 2, 2, 2);
            let mut bias = BiasField::neutral(d);
            for i in 0..12 {
                bias.set(i, [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)]);
            }
            let prior = BiasPrior::default();
            let before = bias_energy(&bias, &prior);
            let old = bias.get(voxel);
            let candidate = [newval, -newval * 0.5];
            let delta = local_bias_energy(&bias, voxel, candidate, &prior)
                - local_bias_energy(&bias, voxel, old, &prior);
            bias.set(voxel, candidate);
            let after = bias_energy(&bias, &prior);
            prop_assert!((after - before - delta).abs() < 1e-9,
                "incremental {} vs global {}", delta, after - before);
        }

        #[test]
        fn energies_nonnegative(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = dims(3, 3, 1, 1);
            let labels_vec: Vec<Tissue> =
                (0..9).map(|_| Tissue::ALL[rng.gen_range(0..6)]).collect();
            let labels = LabelMap::from_labels(d, labels_vec).unwrap();
            prop_assert!(label_energy(&labels, &PotentialTable::default()) >= 0.0);
            let mut bias = BiasField::neutral(d);
            for i in 0..9 {
                bias.set(i, [rng.gen_range(-1.0..1.0), 0.0]);
            }
            prop_assert!(bias_energy(&bias, &BiasPrior::default()) >= 0.0);
        }
    }
}
