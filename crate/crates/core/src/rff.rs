//! Random Fourier features for the Gaussian kernel and the feature-space
//! version of the statistic.
//!
//! The holdout regression is folded into two `D₀×D₀` matrices once; each
//! batch then costs `O(BD² + B²D)` instead of touching the holdout.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::cme::CmeModel;
use crate::error::{Error, Result};
use crate::estimator::{assemble, circe_statistic, CenteredGram, CirceEstimate, Variant};
use crate::kernels::{gram_matrix, GramMatrix, KernelParams};
use crate::linalg::symmetrize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffMap {
    frequencies: Array2<f64>,
    phases: Array1<f64>,
    d_total: usize,
    seed: u64,
}

/// Draws `d_total` frequencies `ω ~ N(0, σ⁻²I)` and phases `b ~ U[0, 2π)`.
pub fn sample_rff(dim: usize, d_total: usize, sigma2: f64, seed: u64) -> Result<RffMap> {
    if d_total == 0 {
        return Err(Error::usage("RFF map needs at least one feature"));
    }
    if dim == 0 {
        return Err(Error::usage("RFF map needs a positive input dimension"));
    }
    KernelParams::gaussian(sigma2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_sigma = 1.0 / sigma2.sqrt();
    let frequencies = Array2::from_shape_fn((d_total, dim), |_| {
        let g: f64 = StandardNormal.sample(&mut rng);
        g * inv_sigma
    });
    let unif = Uniform::new(0.0, 2.0 * PI).expect("valid range");
    let phases = Array1::from_shape_fn(d_total, |_| unif.sample(&mut rng));
    Ok(RffMap {
        frequencies,
        phases,
        d_total,
        seed,
    })
}

impl RffMap {
    pub fn d_total(&self) -> usize {
        self.d_total
    }

    pub fn dim(&self) -> usize {
        self.frequencies.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frequencies(&self) -> &Array2<f64> {
        &self.frequencies
    }

    pub fn phases(&self) -> &Array1<f64> {
        &self.phases
    }

    /// `n × D₀` features scaled by `√(2/D₀)`.
    pub fn features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_dim(x)?;
        let scale = (2.0 / self.d_total as f64).sqrt();
        let mut proj = x.dot(&self.frequencies.t());
        for mut row in proj.rows_mut() {
            for (v, b) in row.iter_mut().zip(&self.phases) {
                *v = scale * (*v + b).cos();
            }
        }
        Ok(proj)
    }

    /// `n × D` features restricted to the rows `active`, scaled by `√(2/D)`.
    pub fn features_subset(&self, x: ArrayView2<f64>, active: &[usize]) -> Result<Array2<f64>> {
        self.check_dim(x)?;
        if active.is_empty() || active.iter().any(|&i| i >= self.d_total) {
            return Err(Error::usage("active feature indices out of range"));
        }
        let omega = self.frequencies.select(Axis(0), active);
        let scale = (2.0 / active.len() as f64).sqrt();
        let mut proj = x.dot(&omega.t());
        for mut row in proj.rows_mut() {
            for (v, &k) in row.iter_mut().zip(active) {
                *v = scale * (*v + self.phases[k]).cos();
            }
        }
        Ok(proj)
    }

    /// `r(x)ᵀr(x')` over all `D₀` features.
    pub fn approx_kernel(&self, x: ArrayView2<f64>, xp: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.features(x)?.dot(&self.features(xp)?.t()))
    }

    fn check_dim(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::usage(format!(
                "RFF map expects dimension {}, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        Ok(())
    }
}

/// Indices of the `d_active` features used for batch `batch_index`: a
/// uniform draw without replacement from a ChaCha stream keyed by
/// `(seed, batch_index)`. The full range is returned in order when
/// `d_active == d_total`.
pub fn active_subset(d_total: usize, d_active: usize, seed: u64, batch_index: u64) -> Result<Vec<usize>> {
    if d_active == 0 || d_active > d_total {
        return Err(Error::usage(format!(
            "active feature count {d_active} must lie in 1..={d_total}"
        )));
    }
    if d_active == d_total {
        return Ok((0..d_total).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch_index);
    let mut idx = index::sample(&mut rng, d_total, d_active).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Holdout regression projected onto the feature maps:
/// `W₁ʳ = R(Y)ᵀW₁R(Z)` and `W₂ʳ = R(Y)ᵀW₂R(Y)` at full `D₀` scaling.
///
/// `W₂ʳ` is sandwiched by `R(y)` in the batch formula, so it approximates
/// `K_yY·W₂·K_Yy` only when built from the `Y` features.
#[derive(Clone, Debug)]
pub struct RffCmeWeights {
    y_map: RffMap,
    z_map: RffMap,
    w1r: Array2<f64>,
    w2r: Array2<f64>,
    y_params: KernelParams,
    z_params: KernelParams,
    refresh_period: Option<usize>,
}

impl RffCmeWeights {
    pub fn w1r(&self) -> &Array2<f64> {
        &self.w1r
    }

    pub fn w2r(&self) -> &Array2<f64> {
        &self.w2r
    }

    pub fn y_map(&self) -> &RffMap {
        &self.y_map
    }

    pub fn z_map(&self) -> &RffMap {
        &self.z_map
    }

    pub fn d_total(&self) -> usize {
        self.y_map.d_total
    }

    /// `None` means the maps are never resampled.
    pub fn refresh_period(&self) -> Option<usize> {
        self.refresh_period
    }
}

pub fn precompute_rff_weights(model: &CmeModel, y_map: RffMap, z_map: RffMap) -> Result<RffCmeWeights> {
    if y_map.d_total != z_map.d_total {
        return Err(Error::usage("Y and Z feature maps must have the same number of features"));
    }
    let ry = y_map.features(model.holdout_y())?;
    let rz = z_map.features(model.holdout_z())?;
    let w1r = ry.t().dot(&model.w1().dot(&rz));
    let mut w2r = ry.t().dot(&model.w2().dot(&ry));
    symmetrize(&mut w2r);
    Ok(RffCmeWeights {
        y_map,
        z_map,
        w1r,
        w2r,
        y_params: *model.y_params(),
        z_params: *model.z_params(),
        refresh_period: None,
    })
}

/// Draws the two maps from `seed` (Y map on stream 0, Z map on stream 1)
/// with the model's bandwidths and projects the model onto them.
pub fn rff_weights_from_seed(model: &CmeModel, d_total: usize, seed: u64) -> Result<RffCmeWeights> {
    let y_map = sample_rff(model.holdout_y().ncols(), d_total, model.y_params().sigma2(), map_seed(seed, 0))?;
    let z_map = sample_rff(model.holdout_z().ncols(), d_total, model.z_params().sigma2(), map_seed(seed, 1))?;
    precompute_rff_weights(model, y_map, z_map)
}

fn map_seed(seed: u64, which: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(which)
}

/// `K_yy ∘ (K_zz − R(y)W₁ʳR(z)ᵀ − (·)ᵀ + R(y)W₂ʳR(y)ᵀ)` on `d_active` of the
/// `D₀` features. `K_yy` and `K_zz` stay exact.
pub fn rff_centered_gram(
    batch_y: ArrayView2<f64>,
    batch_z: ArrayView2<f64>,
    weights: &RffCmeWeights,
    d_active: usize,
    batch_index: u64,
) -> Result<CenteredGram> {
    let b = batch_y.nrows();
    if b < 2 || batch_z.nrows() != b {
        return Err(Error::usage("RFF statistic needs matching batches of at least 2 points"));
    }
    let d0 = weights.d_total();
    let active = active_subset(d0, d_active, weights.y_map.seed, batch_index)?;
    let (cross, quad) = if d_active == d0 {
        let ry = weights.y_map.features(batch_y)?;
        let rz = weights.z_map.features(batch_z)?;
        (ry.dot(&weights.w1r).dot(&rz.t()), ry.dot(&weights.w2r).dot(&ry.t()))
    } else {
        // features rescaled from √(2/D₀) to √(2/D) on each side
        let ry = weights.y_map.features_subset(batch_y, &active)?;
        let rz = weights.z_map.features_subset(batch_z, &active)?;
        let ratio = d0 as f64 / d_active as f64;
        let w1 = weights.w1r.select(Axis(0), &active).select(Axis(1), &active) * ratio;
        let w2 = weights.w2r.select(Axis(0), &active).select(Axis(1), &active) * ratio;
        (ry.dot(&w1).dot(&rz.t()), ry.dot(&w2).dot(&ry.t()))
    };
    let kyy = gram_matrix(batch_y, batch_y, &weights.y_params);
    let kzz = gram_matrix(batch_z, batch_z, &weights.z_params);
    Ok(assemble(&kyy, &kzz, &cross, &quad))
}

pub fn circe_rff(
    batch_x_gram: &GramMatrix,
    batch_y: ArrayView2<f64>,
    batch_z: ArrayView2<f64>,
    weights: &RffCmeWeights,
    d_active: usize,
    batch_index: u64,
    variant: Variant,
) -> Result<CirceEstimate> {
    if d_active > weights.d_total() {
        return Err(Error::usage(format!(
            "requested {d_active} active features but only {} were drawn",
            weights.d_total()
        )));
    }
    let cg = rff_centered_gram(batch_y, batch_z, weights, d_active, batch_index)?;
    circe_statistic(batch_x_gram, &cg, variant)
}

/// Weights that are redrawn every `refresh_period` batches. Generation `g`
/// uses seed `base_seed + g`, so a replay with the same seed reproduces
/// every refresh.
#[derive(Clone, Debug)]
pub struct RffSchedule {
    model: Arc<CmeModel>,
    d_total: usize,
    base_seed: u64,
    refresh_period: Option<usize>,
    generation: u64,
    current: Arc<RffCmeWeights>,
}

impl RffSchedule {
    pub fn new(model: Arc<CmeModel>, d_total: usize, base_seed: u64, refresh_period: Option<usize>) -> Result<Self> {
        if refresh_period == Some(0) {
            return Err(Error::config("RFF refresh period must be positive"));
        }
        let mut w = rff_weights_from_seed(&model, d_total, base_seed)?;
        w.refresh_period = refresh_period;
        Ok(RffSchedule {
            model,
            d_total,
            base_seed,
            refresh_period,
            generation: 0,
            current: Arc::new(w),
        })
    }

    /// Weights valid for the given global batch counter.
    pub fn weights_for(&mut self, batch_counter: u64) -> Result<Arc<RffCmeWeights>> {
        let generation = match self.refresh_period {
            None => 0,
            Some(l) => batch_counter / l as u64,
        };
        if generation != self.generation {
            let mut w = rff_weights_from_seed(&self.model, self.d_total, self.base_seed.wrapping_add(generation))?;
            w.refresh_period = self.refresh_period;
            self.current = Arc::new(w);
            self.generation = generation;
        }
        Ok(Arc::clone(&self.current))
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cme::fit_cme;
    use crate::estimator::statistic_value;
    use ndarray::array;
    use rand::Rng;

    fn gp(s: f64) -> KernelParams {
        KernelParams::gaussian(s).unwrap()
    }

    fn uniform(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0))
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    fn model(seed: u64) -> CmeModel {
        let hy = uniform(40, 1, seed);
        let hz = &hy.mapv(|v| v * v) + &(uniform(40, 1, seed + 1) * 0.2);
        fit_cme(hy.view(), hz.view(), 0.1, &gp(0.5), &gp(1.0)).unwrap()
    }

    #[test]
    fn self_inner_product_is_near_one() {
        let map = sample_rff(3, 4096, 0.7, 5).unwrap();
        let x = uniform(50, 3, 6);
        let r = map.features(x.view()).unwrap();
        let mean = r.rows().into_iter().map(|row| row.dot(&row)).sum::<f64>() / 50.0;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn same_seed_same_map() {
        assert_eq!(sample_rff(2, 64, 1.0, 9).unwrap(), sample_rff(2, 64, 1.0, 9).unwrap());
        assert_ne!(sample_rff(2, 64, 1.0, 9).unwrap(), sample_rff(2, 64, 1.0, 10).unwrap());
    }

    #[test]
    fn kernel_error_decreases_with_features() {
        let x = uniform(200, 2, 1);
        let xp = uniform(200, 2, 2);
        let exact: Vec<f64> = x
            .rows()
            .into_iter()
            .zip(xp.rows())
            .map(|(a, b)| crate::kernels::kernel_eval(a.as_slice().unwrap(), b.as_slice().unwrap(), &gp(1.0)).unwrap())
            .collect();
        let mut medians = Vec::new();
        for d in [256, 1024, 4096] {
            let errs = (0..10)
                .map(|seed| {
                    let map = sample_rff(2, d, 1.0, seed).unwrap();
                    let (rx, rxp) = (map.features(x.view()).unwrap(), map.features(xp.view()).unwrap());
                    (0..200).map(|i| (rx.row(i).dot(&rxp.row(i)) - exact[i]).abs()).sum::<f64>() / 200.0
                })
                .collect();
            medians.push(median(errs));
        }
        assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");
    }

    #[test]
    fn two_point_weights_match_direct_product() {
        let hy = array![[0.0], [0.8]];
        let hz = array![[0.3], [-0.4]];
        let m = fit_cme(hy.view(), hz.view(), 0.5, &gp(1.0), &gp(1.0)).unwrap();
        let ym = sample_rff(1, 3, 1.0, 1).unwrap();
        let zm = sample_rff(1, 3, 1.0, 2).unwrap();
        let w = precompute_rff_weights(&m, ym.clone(), zm.clone()).unwrap();
        let s = (2.0_f64 / 3.0).sqrt();
        let feat = |map: &RffMap, v: f64, k: usize| s * (map.frequencies()[[k, 0]] * v + map.phases()[k]).cos();
        for a in 0..3 {
            for b in 0..3 {
                let mut w1 = 0.0;
                let mut w2 = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        w1 += feat(&ym, hy[[i, 0]], a) * m.w1()[[i, j]] * feat(&zm, hz[[j, 0]], b);
                        w2 += feat(&ym, hy[[i, 0]], a) * m.w2()[[i, j]] * feat(&ym, hy[[j, 0]], b);
                    }
                }
                assert!((w.w1r()[[a, b]] - w1).abs() < 1e-14);
                assert!((w.w2r()[[a, b]] - w2).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn w2r_is_psd() {
        let w = rff_weights_from_seed(&model(3), 256, 4).unwrap();
        let ev = nalgebra::DMatrix::from_fn(256, 256, |i, j| w.w2r()[[i, j]]).symmetric_eigenvalues().min();
        assert!(ev >= -1e-8 * 256.0);
    }

    #[test]
    fn refresh_reproduces_weights() {
        let m = Arc::new(model(5));
        let mut a = RffSchedule::new(Arc::clone(&m), 64, 11, Some(3)).unwrap();
        let mut b = RffSchedule::new(m, 64, 11, Some(3)).unwrap();
        let first = a.weights_for(0).unwrap();
        assert!(Arc::ptr_eq(&first, &a.weights_for(2).unwrap()));
        let wa = a.weights_for(7).unwrap();
        assert_eq!(a.generation(), 2);
        let wb = b.weights_for(7).unwrap();
        assert_eq!(wa.w1r(), wb.w1r());
        assert_ne!(wa.w1r(), first.w1r());
        assert!(RffSchedule::new(model(5).into(), 8, 1, Some(0)).is_err());
    }

    #[test]
    fn never_refreshes_without_period() {
        let mut s = RffSchedule::new(Arc::new(model(6)), 16, 2, None).unwrap();
        let w0 = s.weights_for(0).unwrap();
        assert!(Arc::ptr_eq(&w0, &s.weights_for(1_000_000).unwrap()));
    }

    #[test]
    fn subsets_are_deterministic_and_distinct() {
        let a = active_subset(100, 10, 3, 0).unwrap();
        assert_eq!(a, active_subset(100, 10, 3, 0).unwrap());
        assert_ne!(a, active_subset(100, 10, 3, 1).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(active_subset(5, 5, 0, 9).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(active_subset(5, 6, 0, 0).is_err());
    }

    #[test]
    fn rff_centered_gram_is_symmetric() {
        let w = rff_weights_from_seed(&model(7), 128, 1).unwrap();
        let y = uniform(12, 1, 8);
        let z = y.mapv(|v| v * v);
        for d in [128, 40] {
            let cg = rff_centered_gram(y.view(), z.view(), &w, d, 3).unwrap();
            assert_eq!(cg.matrix(), &cg.matrix().t().to_owned());
        }
    }

    #[test]
    fn too_many_active_features_is_usage_error() {
        let w = rff_weights_from_seed(&model(8), 32, 1).unwrap();
        let y = uniform(4, 1, 1);
        let kxx = GramMatrix::from_entries(Array2::eye(4), gp(1.0));
        let r = circe_rff(&kxx, y.view(), y.view(), &w, 33, 0, Variant::Centered);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn subset_resampling_is_stable() {
        let m = model(9);
        let w = rff_weights_from_seed(&m, 512, 2).unwrap();
        let y = uniform(64, 1, 10);
        let z = &y.mapv(|v| v * v) + &(uniform(64, 1, 11) * 0.2);
        let x = &z + &(uniform(64, 1, 12) * 0.1);
        let kxx = gram_matrix(x.view(), x.view(), &gp(1.0));
        let vals: Vec<f64> = (0..20)
            .map(|i| {
                let cg = rff_centered_gram(y.view(), z.view(), &w, 128, i).unwrap();
                statistic_value(kxx.view(), &cg, Variant::Centered).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / 20.0;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
        assert!((vals[0] - vals[1]).abs() <= 3.0 * sd, "{vals:?}");
    }

    #[test]
    fn gap_to_exact_shrinks_with_features() {
        let m = model(12);
        let y = uniform(48, 1, 13);
        let z = &y.mapv(|v| v * v) + &(uniform(48, 1, 14) * 0.2);
        let x = &z + &(uniform(48, 1, 15) * 0.1);
        let kxx = GramMatrix::from_entries(gram_matrix(x.view(), x.view(), &gp(1.0)), gp(1.0));
        let exact = {
            let cg = crate::estimator::centered_gram(y.view(), z.view(), &m, &gp(0.5), &gp(1.0)).unwrap();
            circe_statistic(&kxx, &cg, Variant::Centered).unwrap().value
        };
        let gaps: Vec<f64> = [64, 512, 4096]
            .iter()
            .map(|&d| {
                median(
                    (0..7)
                        .map(|s| {
                            let w = rff_weights_from_seed(&m, d, 100 + s).unwrap();
                            (circe_rff(&kxx, y.view(), z.view(), &w, d, 0, Variant::Centered).unwrap().value - exact).abs()
                        })
                        .collect(),
                )
            })
            .collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }
}
