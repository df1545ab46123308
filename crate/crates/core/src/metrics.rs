//! Quantitative comparison of a predicted label map against ground truth,
//! plus the intensity-separation statistics used to calibrate experiments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::intensity::GaussianTissueModel;
use crate::mat::{vec_sub, Sym2, Vec2};
use crate::tissue::Tissue;
use crate::volume::LabelMap;

/// Chebyshev radius of the window around the true sheet used by
/// `thickness_error` (an 11-voxel-wide cube).
pub const THICKNESS_WINDOW_RADIUS: usize = 5;

/// Volume-level segmentation error. The error fraction divides every
/// disagreement (background and unclassified included) by the number of
/// non-background truth voxels, so values above 1 are possible when large
/// background regions are mislabeled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorReport {
    pub error: f64,
    pub misclassified: u64,
    pub non_background_truth: u64,
    /// confusion[truth][predicted] = voxel count; only non-zero cells.
    pub confusion: BTreeMap<Tissue, BTreeMap<Tissue, u64>>,
}

pub fn error_rate(pred: &LabelMap, truth: &LabelMap) -> Result<ErrorReport, CoreError> {
    if pred.dims.nx != truth.dims.nx
        || pred.dims.ny != truth.dims.ny
        || pred.dims.nz != truth.dims.nz
    {
        return Err(CoreError::Metric("prediction and truth shapes differ".into()));
    }
    let n = truth.dims.voxels();
    let mut misclassified = 0u64;
    let mut non_bg = 0u64;
    let mut confusion: BTreeMap<Tissue, BTreeMap<Tissue, u64>> = BTreeMap::new();
    for i in 0..n {
        let t = truth.get(i);
        let p = pred.get(i);
        if t != Tissue::Background {
            non_bg += 1;
        }
        if p != t {
            misclassified += 1;
        }
        *confusion.entry(t).or_default().entry(p).or_default() += 1;
    }
    if non_bg == 0 {
        return Err(CoreError::Metric("truth has no non-background voxels".into()));
    }
    Ok(ErrorReport {
        error: misclassified as f64 / non_bg as f64,
        misclassified,
        non_background_truth: non_bg,
        confusion,
    })
}

/// Boolean dilation by a Chebyshev ball: separable running maximum along
/// each axis with half-width `radius`.
fn dilate_chebyshev(mask: &[bool], dims: crate::volume::Dims, radius: usize) -> Vec<bool> {
    let mut cur: Vec<bool> = mask.to_vec();
    let axes: [(usize, usize, usize, usize); 3] = [
        (dims.nx, 1, dims.ny, dims.nz),
        (dims.ny, dims.nx, dims.nx, dims.nz),
        (dims.nz, dims.nx * dims.ny, dims.nx, dims.ny),
    ];
    for (axis, &(len, stride, outer_a, outer_b)) in axes.iter().enumerate() {
        let mut next = vec![false; cur.len()];
        for b in 0..outer_b {
            for a in 0..outer_a {
                let start = match axis {
                    0 => (b * dims.ny + a) * dims.nx,
                    1 => b * dims.nx * dims.ny + a,
                    _ => a + b * dims.nx,
                };
                for q in 0..len {
                    let lo = q.saturating_sub(radius);
                    let hi = (q + radius).min(len - 1);
                    let mut any = false;
                    for w in lo..=hi {
                        if cur[start + w * stride] {
                            any = true;
                            break;
                        }
                    }
                    next[start + q * stride] = any;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Error restricted to the sheet neighborhood: disagreements within
/// Chebyshev distance `radius` of any truth grey-matter voxel, divided by
/// the truth grey-matter count.
pub fn thickness_error(
    pred: &LabelMap,
    truth: &LabelMap,
    radius: usize,
) -> Result<f64, CoreError> {
    if pred.dims.nx != truth.dims.nx
        || pred.dims.ny != truth.dims.ny
        || pred.dims.nz != truth.dims.nz
    {
        return Err(CoreError::Metric("prediction and truth shapes differ".into()));
    }
    let n = truth.dims.voxels();
    let gm_mask: Vec<bool> = (0..n).map(|i| truth.get(i) == Tissue::GreyMatter).collect();
    let gm_count = gm_mask.iter().filter(|&&m| m).count();
    if gm_count == 0 {
        return Err(CoreError::Metric("truth contains no grey matter".into()));
    }
    let window = dilate_chebyshev(&gm_mask, truth.dims, radius);
    let mut wrong = 0u64;
    for i in 0..n {
        if window[i] && pred.get(i) != truth.get(i) {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / gm_count as f64)
}

/// (CNR, SNR_a, SNR_b) for two tissue means under noise of std `noise_std`.
pub fn contrast_stats(
    mean_a: f64,
    mean_b: f64,
    noise_std: f64,
) -> Result<(f64, f64, f64), CoreError> {
    if !(noise_std > 0.0) || !noise_std.is_finite() {
        return Err(CoreError::Metric(format!("noise std must be positive, got {noise_std}")));
    }
    Ok(((mean_b - mean_a) / noise_std, mean_a / noise_std, mean_b / noise_std))
}

/// Mahalanobis separation of two mean/covariance pairs under the pooled
/// covariance (arithmetic mean of the two).
pub fn mahalanobis_pairs(
    mean_a: Vec2,
    cov_a: &Sym2,
    mean_b: Vec2,
    cov_b: &Sym2,
) -> Result<f64, CoreError> {
    let pooled = cov_a.add(cov_b).scale(0.5);
    if pooled.min_eigenvalue() <= 0.0 {
        return Err(CoreError::Metric("pooled covariance is not positive definite".into()));
    }
    let delta = vec_sub(mean_a, mean_b);
    let inv = pooled.inverse().map_err(|_| {
        CoreError::Metric("pooled covariance is singular".into())
    })?;
    Ok(inv.quad_form(delta).max(0.0).sqrt())
}

/// Mahalanobis separation of two tissues of a fitted log-domain model.
pub fn mahalanobis(
    model: &GaussianTissueModel,
    a: Tissue,
    b: Tissue,
) -> Result<f64, CoreError> {
    mahalanobis_pairs(
        model.mean(a)?,
        &model.covariance(a)?,
        model.mean(b)?,
        &model.covariance(b)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_from(dims: Dims, f: impl Fn(usize) -> Tissue) -> LabelMap {
        let mut m = LabelMap::filled(dims, Tissue::Background);
        for i in 0..dims.voxels() {
            m.set(i, f(i));
        }
        m
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let dims = Dims::new(5, 5, 4, 1).unwrap();
        let truth = map_from(dims, |i| if i % 3 == 0 { Tissue::WhiteMatter } else { Tissue::GreyMatter });
        let report = error_rate(&truth, &truth).unwrap();
        assert_eq!(report.error, 0.0);
        assert_eq!(report.misclassified, 0);
        assert_eq!(report.non_background_truth, dims.voxels() as u64);
    }

    #[test]
    fn five_wrong_in_five_hundred_is_one_percent() {
        let dims = Dims::new(10, 10, 6, 1).unwrap(); // 600 voxels
        // 500 non-background, 100 background
        let truth = map_from(dims, |i| if i < 500 { Tissue::WhiteMatter } else { Tissue::Background });
        let pred = map_from(dims, |i| {
            if i < 5 {
                Tissue::GreyMatter // wrong
            } else if i < 500 {
                Tissue::WhiteMatter
            } else {
                Tissue::Background
            }
        });
        let report = error_rate(&pred, &truth).unwrap();
        assert_eq!(report.misclassified, 5);
        assert_eq!(report.non_background_truth, 500);
        assert!((report.error - 0.01).abs() < 1e-15);
        assert_eq!(report.confusion[&Tissue::WhiteMatter][&Tissue::GreyMatter], 5);
        assert_eq!(report.confusion[&Tissue::WhiteMatter][&Tissue::WhiteMatter], 495);
    }

    #[test]
    fn background_mislabeling_can_exceed_one() {
        let dims = Dims::new(10, 11, 1, 1).unwrap(); // 110 voxels
        let truth = map_from(dims, |i| if i < 10 { Tissue::WhiteMatter } else { Tissue::Background });
        // all 100 background voxels called scalp-bone, brain correct
        let pred = map_from(dims, |i| if i < 10 { Tissue::WhiteMatter } else { Tissue::ScalpBone });
        let report = error_rate(&pred, &truth).unwrap();
        assert_eq!(report.misclassified, 100);
        assert_eq!(report.non_background_truth, 10);
        assert!((report.error - 10.0).abs() < 1e-15, "error can exceed 1");
    }

    #[test]
    fn unclassified_counts_as_wrong() {
        let dims = Dims::new(2, 2, 1, 1).unwrap();
        let truth = map_from(dims, |_| Tissue::WhiteMatter);
        let pred = map_from(dims, |i| if i == 0 { Tissue::Unclassified } else { Tissue::WhiteMatter });
        let report = error_rate(&pred, &truth).unwrap();
        assert_eq!(report.misclassified, 1);
    }

    #[test]
    fn all_background_truth_is_an_error() {
        let dims = Dims::new(2, 2, 1, 1).unwrap();
        let truth = map_from(dims, |_| Tissue::Background);
        assert!(error_rate(&truth, &truth).is_err());
    }

    #[test]
    fn denominator_asymmetry_is_real() {
        let dims = Dims::new(4, 2, 1, 1).unwrap();
        // truth: 2 non-background; pred: 6 non-background
        let truth = map_from(dims, |i| if i < 2 { Tissue::WhiteMatter } else { Tissue::Background });
        let pred = map_from(dims, |i| if i < 6 { Tissue::WhiteMatter } else { Tissue::Background });
        let forward = error_rate(&pred, &truth).unwrap();
        let backward = error_rate(&truth, &pred).unwrap();
        assert_eq!(forward.misclassified, backward.misclassified);
        assert_eq!(forward.non_background_truth, 2);
        assert_eq!(backward.non_background_truth, 6);
        assert!(forward.error > backward.error);
    }

    #[test]
    fn dilation_matches_brute_force_chebyshev() {
        let dims = Dims::new(9, 8, 7, 1).unwrap();
        let n = dims.voxels();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for radius in [1usize, 2, 5] {
            for _ in 0..5 {
                let mut mask = vec![false; n];
                for _ in 0..14 {
                    mask[rng.gen_range(0..n)] = true;
                }
                let fast = dilate_chebyshev(&mask, dims, radius);
                for i in 0..n {
                    let (xi, yi, zi) = dims.coords(i);
                    let mut expect = false;
                    'scan: for j in 0..n {
                        if !mask[j] {
                            continue;
                        }
                        let (xj, yj, zj) = dims.coords(j);
                        let d = xi
                            .abs_diff(xj)
                            .max(yi.abs_diff(yj))
                            .max(zi.abs_diff(zj));
                        if d <= radius {
                            expect = true;
                            break 'scan;
                        }
                    }
                    assert_eq!(fast[i], expect, "radius {radius}, voxel {i}");
                }
            }
        }
    }

    #[test]
    fn thickness_error_counts_only_near_the_sheet() {
        let dims = Dims::new(20, 20, 1, 1).unwrap();
        // a line of 20 grey-matter voxels at y = 0, everything else white
        let truth = map_from(dims, |i| {
            let (_, y, _) = dims.coords(i);
            if y == 0 {
                Tissue::GreyMatter
            } else {
                Tissue::WhiteMatter
            }
        });
        // one mistake adjacent to the sheet, one far away (y = 15 > radius 5)
        let near = dims.linear_index(4, 1, 0).unwrap();
        let far = dims.linear_index(4, 15, 0).unwrap();
        let pred = map_from(dims, |i| {
            if i == near || i == far {
                Tissue::Csf
            } else {
                truth.get(i)
            }
        });
        let e = thickness_error(&pred, &truth, THICKNESS_WINDOW_RADIUS).unwrap();
        assert!((e - 1.0 / 20.0).abs() < 1e-15, "only the near mistake counts, got {e}");
    }

    #[test]
    fn one_flipped_sheet_voxel_in_a_hundred() {
        let dims = Dims::new(10, 10, 2, 1).unwrap();
        // 100 grey-matter voxels in slice z = 0, white matter in z = 1
        let truth = map_from(dims, |i| {
            let (_, _, z) = dims.coords(i);
            if z == 0 {
                Tissue::GreyMatter
            } else {
                Tissue::WhiteMatter
            }
        });
        let pred = map_from(dims, |i| if i == 33 { Tissue::Csf } else { truth.get(i) });
        let e = thickness_error(&pred, &truth, THICKNESS_WINDOW_RADIUS).unwrap();
        assert!((e - 0.01).abs() < 1e-15);
        assert!(thickness_error(&truth, &truth, THICKNESS_WINDOW_RADIUS).unwrap() == 0.0);
    }

    #[test]
    fn thickness_error_requires_grey_matter() {
        let dims = Dims::new(3, 3, 1, 1).unwrap();
        let truth = map_from(dims, |_| Tissue::WhiteMatter);
        assert!(thickness_error(&truth, &truth, 5).is_err());
    }

    #[test]
    fn contrast_examples() {
        let (cnr, snr_wm, snr_gm) = contrast_stats(823.0, 1059.0, 50.0).unwrap();
        assert!((cnr - 4.72).abs() < 1e-12);
        assert!((snr_gm - 21.18).abs() < 1e-12);
        assert!((snr_wm - 16.46).abs() < 1e-12);
        let (cnr2, _, _) = contrast_stats(1059.0, 1363.0, 50.0).unwrap();
        assert!((cnr2 - 6.08).abs() < 1e-12);
        let (zero, _, _) = contrast_stats(500.0, 500.0, 10.0).unwrap();
        assert_eq!(zero, 0.0);
        assert!(contrast_stats(1.0, 2.0, 0.0).is_err());
        assert!(contrast_stats(1.0, 2.0, -3.0).is_err());
    }

    #[test]
    fn mahalanobis_hand_case_and_symmetry() {
        let cov = Sym2 { d: 1, xx: 1.0, xy: 0.0, yy: 0.0 };
        let d = mahalanobis_pairs([0.0, 0.0], &cov, [2.0, 0.0], &cov).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        let zero = mahalanobis_pairs([1.5, 0.0], &cov, [1.5, 0.0], &cov).unwrap();
        assert_eq!(zero, 0.0);
        // symmetry with unequal covariances
        let ca = Sym2 { d: 2, xx: 2.0, xy: 0.3, yy: 1.0 };
        let cb = Sym2 { d: 2, xx: 1.0, xy: -0.1, yy: 3.0 };
        let ab = mahalanobis_pairs([1.0, 2.0], &ca, [3.0, -1.0], &cb).unwrap();
        let ba = mahalanobis_pairs([3.0, -1.0], &cb, [1.0, 2.0], &ca).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_affine_invariance() {
        // scaling both echoes (and covariances accordingly) leaves D fixed
        let ma = [6.7, 6.0];
        let mb = [6.96, 6.4];
        let ca = Sym2 { d: 2, xx: 0.006, xy: 0.001, yy: 0.012 };
        let cb = Sym2 { d: 2, xx: 0.008, xy: 0.002, yy: 0.02 };
        let d0 = mahalanobis_pairs(ma, &ca, mb, &cb).unwrap();
        let s = [3.0, 0.5];
        let scale_vec = |v: Vec2| [v[0] * s[0], v[1] * s[1]];
        let scale_cov = |c: &Sym2| Sym2 {
            d: 2,
            xx: c.xx * s[0] * s[0],
            xy: c.xy * s[0] * s[1],
            yy: c.yy * s[1] * s[1],
        };
        let d1 = mahalanobis_pairs(
            scale_vec(ma),
            &scale_cov(&ca),
            scale_vec(mb),
            &scale_cov(&cb),
        )
        .unwrap();
        assert!((d0 - d1).abs() < 1e-9, "{d0} vs {d1}");
    }

    #[test]
    fn mahalanobis_published_stds_diagonal_oracle() {
        // Raw-unit means and standard deviations of the acquisition the
        // defaults mimic; diagonal covariances. The oracle is the explicit
        // per-channel formula.
        let wm_mean = [823.0, 426.0];
        let gm_mean = [1059.0, 602.0];
        let wm_cov = Sym2 { d: 2, xx: 70.0 * 70.0, xy: 0.0, yy: 59.0 * 59.0 };
        let gm_cov = Sym2 { d: 2, xx: 95.0 * 95.0, xy: 0.0, yy: 102.0 * 102.0 };
        let d = mahalanobis_pairs(wm_mean, &wm_cov, gm_mean, &gm_cov).unwrap();
        let pooled0 = (70.0 * 70.0 + 95.0 * 95.0) / 2.0;
        let pooled1 = (59.0 * 59.0 + 102.0 * 102.0) / 2.0;
        let oracle = ((1059.0 - 823.0_f64).powi(2) / pooled0
            + (602.0 - 426.0_f64).powi(2) / pooled1)
            .sqrt();
        assert!((d - oracle).abs() < 1e-12);
        // full covariances with echo correlation would shift this; the
        // diagonal value must still land in a plausible separation range
        assert!(oracle > 2.0 && oracle < 5.0, "oracle D = {oracle}");
    }

    #[test]
    fn mahalanobis_rejects_singular_pooled_covariance() {
        let singular = Sym2 { d: 2, xx: 1.0, xy: 1.0, yy: 1.0 };
        assert!(mahalanobis_pairs([0.0, 0.0], &singular, [1.0, 1.0], &singular).is_err());
    }

    #[test]
    fn thickness_error_upper_bound() {
        let dims = Dims::new(6, 6, 3, 1).unwrap();
        let truth = map_from(dims, |i| {
            if i == 50 {
                Tissue::GreyMatter
            } else {
                Tissue::WhiteMatter
            }
        });
        let pred = map_from(dims, |_| Tissue::Csf); // everything wrong
        let e = thickness_error(&pred, &truth, 5).unwrap();
        let window_cap = dims.voxels() as f64; // window cannot exceed volume
        assert!(e >= 0.0 && e <= window_cap);
        assert_eq!(e, dims.voxels() as f64, "every voxel is in range of the single sheet voxel");
    }
}
