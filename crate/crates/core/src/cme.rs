//! Conditional mean embedding of `Z` given `Y` by kernel ridge regression,
//! with closed-form leave-one-out model selection.
//!
//! The fitted embedding is `μ̂(y) = K_{yY}·(K_YY + λI)⁻¹·ψ(Z)`, i.e. a weight
//! vector over the holdout features `ψ(zᵢ)`. Everything downstream only needs
//! `W1 = (K_YY + λI)⁻¹` and `W2 = W1·K_ZZ·W1`.
//!
//! For a ridge fit with hat matrix `A = K_YY·(K_YY + λI)⁻¹` the leave-one-out
//! residual equals the full-fit residual divided by `1 − Aᵢᵢ`, so LOO error
//! costs one fit per grid point instead of `M` of them.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kernels::{gram_matrix, regularized_solve, KernelParams};
use crate::linalg::symmetrize;

/// Guard on `1 − Aᵢᵢ`; grid points at or below it score `+∞`.
pub const LOO_GUARD: f64 = 1e-10;

pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];
pub const DEFAULT_SIGMA2_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CmeModel {
    holdout_y: Array2<f64>,
    holdout_z: Array2<f64>,
    lambda: f64,
    y_params: KernelParams,
    z_params: KernelParams,
    w1: Array2<f64>,
    w2: Array2<f64>,
}

impl CmeModel {
    pub fn holdout_y(&self) -> ArrayView2<'_, f64> {
        self.holdout_y.view()
    }

    pub fn holdout_z(&self) -> ArrayView2<'_, f64> {
        self.holdout_z.view()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn y_params(&self) -> &KernelParams {
        &self.y_params
    }

    pub fn z_params(&self) -> &KernelParams {
        &self.z_params
    }

    /// `(K_YY + λI)⁻¹`.
    pub fn w1(&self) -> &Array2<f64> {
        &self.w1
    }

    /// `W1·K_ZZ·W1`.
    pub fn w2(&self) -> &Array2<f64> {
        &self.w2
    }

    pub fn holdout_size(&self) -> usize {
        self.holdout_y.nrows()
    }

    /// Weights of `μ̂(y)` over the holdout features, one row per query:
    /// `K_{yY}·W1`.
    pub fn embedding_weights(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        if y.ncols() != self.holdout_y.ncols() {
            return Err(Error::usage(format!(
                "query points have dimension {}, model expects {}",
                y.ncols(),
                self.holdout_y.ncols()
            )));
        }
        Ok(gram_matrix(y, self.holdout_y.view(), &self.y_params).dot(&self.w1))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let model: CmeModel = serde_json::from_reader(file)?;
        model.y_params.validate()?;
        model.z_params.validate()?;
        let m = model.holdout_y.nrows();
        if model.holdout_z.nrows() != m || model.w1.dim() != (m, m) || model.w2.dim() != (m, m) {
            return Err(Error::config("inconsistent shapes in serialized CME model"));
        }
        Ok(model)
    }
}

fn check_holdout(holdout_y: ArrayView2<f64>, holdout_z: ArrayView2<f64>, lambda: f64) -> Result<()> {
    if holdout_y.nrows() < 2 {
        return Err(Error::usage(format!(
            "holdout needs at least 2 points, got {}",
            holdout_y.nrows()
        )));
    }
    if holdout_y.nrows() != holdout_z.nrows() {
        return Err(Error::usage(format!(
            "holdout y has {} rows but z has {}",
            holdout_y.nrows(),
            holdout_z.nrows()
        )));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::usage(format!("ridge parameter must be positive, got {lambda}")));
    }
    Ok(())
}

pub fn fit_cme(
    holdout_y: ArrayView2<f64>,
    holdout_z: ArrayView2<f64>,
    lambda: f64,
    y_params: &KernelParams,
    z_params: &KernelParams,
) -> Result<CmeModel> {
    check_holdout(holdout_y, holdout_z, lambda)?;
    y_params.validate()?;
    z_params.validate()?;
    let kyy = gram_matrix(holdout_y, holdout_y, y_params);
    let kzz = gram_matrix(holdout_z, holdout_z, z_params);
    fit_from_grams(holdout_y, holdout_z, lambda, y_params, z_params, &kyy, &kzz)
}

fn fit_from_grams(
    holdout_y: ArrayView2<f64>,
    holdout_z: ArrayView2<f64>,
    lambda: f64,
    y_params: &KernelParams,
    z_params: &KernelParams,
    kyy: &Array2<f64>,
    kzz: &Array2<f64>,
) -> Result<CmeModel> {
    let m = kyy.nrows();
    let mut w1 = regularized_solve(kyy.view(), lambda, Array2::eye(m).view())?;
    symmetrize(&mut w1);
    let mut w2 = w1.dot(kzz).dot(&w1);
    symmetrize(&mut w2);
    Ok(CmeModel {
        holdout_y: holdout_y.to_owned(),
        holdout_z: holdout_z.to_owned(),
        lambda,
        y_params: *y_params,
        z_params: *z_params,
        w1,
        w2,
    })
}

pub fn loo_error(
    holdout_y: ArrayView2<f64>,
    holdout_z: ArrayView2<f64>,
    lambda: f64,
    y_params: &KernelParams,
    z_params: &KernelParams,
) -> Result<f64> {
    check_holdout(holdout_y, holdout_z, lambda)?;
    y_params.validate()?;
    z_params.validate()?;
    let kyy = gram_matrix(holdout_y, holdout_y, y_params);
    let kzz = gram_matrix(holdout_z, holdout_z, z_params);
    loo_from_grams(&kyy, &kzz, lambda)
}

/// Mean over `i` of `‖ψ(zᵢ) − F(yᵢ)‖² / (1 − Aᵢᵢ)²`, the residual norm
/// expanded through `K_ZZ`.
fn loo_from_grams(kyy: &Array2<f64>, kzz: &Array2<f64>, lambda: f64) -> Result<f64> {
    let m = kyy.nrows();
    // A = (K + λI)⁻¹K, which is symmetric since both factors commute.
    let mut hat = regularized_solve(kyy.view(), lambda, kyy.view())?;
    symmetrize(&mut hat);
    let hk = hat.dot(kzz);
    let mut total = 0.0;
    for i in 0..m {
        let leverage = 1.0 - hat[[i, i]];
        if !(leverage > LOO_GUARD) {
            return Ok(f64::INFINITY);
        }
        let quad: f64 = hk.row(i).iter().zip(hat.row(i)).map(|(a, b)| a * b).sum();
        let residual = (kzz[[i, i]] - 2.0 * hk[[i, i]] + quad).max(0.0);
        total += residual / (leverage * leverage);
    }
    let err = total / m as f64;
    Ok(if err.is_finite() { err } else { f64::INFINITY })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    /// `(λ, σ²_y)` pairs in evaluation order.
    pub grid: Vec<(f64, f64)>,
    pub errors: Vec<f64>,
    pub best: usize,
}

impl LooReport {
    pub fn best_point(&self) -> (f64, f64) {
        self.grid[self.best]
    }
}

/// Evaluates the LOO error on the `λ × σ²_y` grid and fits the model at the
/// minimizer. Ties go to the larger `λ`, then the larger `σ²_y`. The `Z`
/// kernel is fixed by the caller.
pub fn select_hyperparams(
    holdout_y: ArrayView2<f64>,
    holdout_z: ArrayView2<f64>,
    lambda_grid: &[f64],
    sigma2_y_grid: &[f64],
    z_params: &KernelParams,
) -> Result<(CmeModel, LooReport)> {
    if lambda_grid.is_empty() || sigma2_y_grid.is_empty() {
        return Err(Error::config("empty hyperparameter grid"));
    }
    for &l in lambda_grid {
        check_holdout(holdout_y, holdout_z, l)?;
    }
    let y_params = sigma2_y_grid
        .iter()
        .map(|&s| KernelParams::gaussian(s))
        .collect::<Result<Vec<_>>>()?;
    z_params.validate()?;

    let kzz = gram_matrix(holdout_z, holdout_z, z_params);
    let grid: Vec<(f64, f64)> = sigma2_y_grid
        .iter()
        .flat_map(|&s| lambda_grid.iter().map(move |&l| (l, s)))
        .collect();

    // One task per bandwidth; each evaluates every λ on its own Gram matrix.
    let per_bandwidth = Exec::default().map(y_params.len(), |b| {
        let kyy = gram_matrix(holdout_y, holdout_y, &y_params[b]);
        lambda_grid
            .iter()
            .map(|&l| match loo_from_grams(&kyy, &kzz, l) {
                Ok(e) if e.is_finite() => e,
                _ => f64::INFINITY,
            })
            .collect::<Vec<_>>()
    });
    let errors: Vec<f64> = per_bandwidth.into_iter().flatten().collect();

    let mut best: Option<usize> = None;
    for (i, &e) in errors.iter().enumerate() {
        if !e.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let (lb, sb) = grid[b];
                let (li, si) = grid[i];
                let better = e < errors[b]
                    || (e == errors[b] && (li > lb || (li == lb && si > sb)));
                Some(if better { i } else { b })
            }
        };
    }
    let best = best.ok_or_else(|| {
        Error::config("every hyperparameter grid point produced an invalid leave-one-out error")
    })?;
    let (lambda, sigma2_y) = grid[best];
    let yp = KernelParams::gaussian(sigma2_y)?;
    let kyy = gram_matrix(holdout_y, holdout_y, &yp);
    let model = fit_from_grams(holdout_y, holdout_z, lambda, &yp, z_params, &kyy, &kzz)?;
    Ok((model, LooReport { grid, errors, best }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gp(s: f64) -> KernelParams {
        KernelParams::gaussian(s).unwrap()
    }

    fn sample(m: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Array2::from_shape_fn((m, 1), |_| rng.random_range(-2.0..2.0));
        let z = y.mapv(|v: f64| v.sin()) + Array2::from_shape_fn((m, 1), |_| rng.random_range(-0.3..0.3));
        (y, z)
    }

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn identity_gram_limit() {
        let y = array![[0.0], [100.0]];
        let z = array![[0.0], [0.5]];
        let model = fit_cme(y.view(), z.view(), 1.0, &gp(1.0), &gp(1.0)).unwrap();
        let half = Array2::<f64>::eye(2) * 0.5;
        assert!(max_abs(&(model.w1() - &half)) < 1e-12);
        let kzz = gram_matrix(z.view(), z.view(), &gp(1.0));
        assert!(max_abs(&(model.w2() - &(kzz / 4.0))) < 1e-12);
    }

    #[test]
    fn w2_matches_direct_product() {
        let (y, z) = sample(25, 1);
        let model = fit_cme(y.view(), z.view(), 0.1, &gp(0.5), &gp(1.0)).unwrap();
        let kzz = gram_matrix(z.view(), z.view(), &gp(1.0));
        let direct = model.w1().dot(&kzz).dot(model.w1());
        assert!(max_abs(&(model.w2() - &direct)) < 1e-10);
        assert!(max_abs(&(model.w1() - &model.w1().t())) == 0.0);
        // W1 really inverts K + λI
        let mut k = gram_matrix(y.view(), y.view(), &gp(0.5));
        k.diag_mut().mapv_inplace(|d| d + 0.1);
        let r = k.dot(model.w1()) - Array2::<f64>::eye(25);
        assert!(max_abs(&r) < 1e-8);
    }

    #[test]
    fn infinite_ridge_collapses_embedding() {
        let (y, z) = sample(20, 2);
        let model = fit_cme(y.view(), z.view(), 1e6, &gp(1.0), &gp(1.0)).unwrap();
        let w = model.embedding_weights(y.view()).unwrap();
        assert!(max_abs(&w) < 1e-4);
        let err = loo_error(y.view(), z.view(), 1e8, &gp(1.0), &gp(1.0)).unwrap();
        assert!((err - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_tiny_holdout() {
        let y = array![[0.0]];
        assert!(matches!(
            fit_cme(y.view(), y.view(), 1.0, &gp(1.0), &gp(1.0)),
            Err(Error::Usage(_))
        ));
        let (y, z) = sample(5, 3);
        assert!(fit_cme(y.view(), z.view(), 0.0, &gp(1.0), &gp(1.0)).is_err());
    }

    #[test]
    fn loo_invariant_to_permutation() {
        let (y, z) = sample(30, 4);
        let e = loo_error(y.view(), z.view(), 0.05, &gp(0.3), &gp(1.0)).unwrap();
        let perm: Vec<usize> = (0..30).rev().collect();
        let yp = y.select(ndarray::Axis(0), &perm);
        let zp = z.select(ndarray::Axis(0), &perm);
        let ep = loo_error(yp.view(), zp.view(), 0.05, &gp(0.3), &gp(1.0)).unwrap();
        assert!((e - ep).abs() <= 1e-12 * e);
    }

    #[test]
    fn interpolating_guard_gives_infinity() {
        // well separated points with a tiny ridge interpolate: Aᵢᵢ → 1
        let y = array![[0.0], [50.0], [100.0]];
        let z = array![[0.0], [1.0], [2.0]];
        let e = loo_error(y.view(), z.view(), 1e-14, &gp(1.0), &gp(1.0)).unwrap();
        assert!(e.is_infinite());
    }

    #[test]
    fn singleton_grid_is_selected() {
        let (y, z) = sample(15, 5);
        let (model, report) =
            select_hyperparams(y.view(), z.view(), &[0.1], &[0.5], &gp(1.0)).unwrap();
        assert_eq!(report.best, 0);
        assert_eq!(report.grid, vec![(0.1, 0.5)]);
        assert_eq!(model.lambda(), 0.1);
        assert_eq!(model.y_params().sigma2(), 0.5);
    }

    #[test]
    fn report_best_is_argmin() {
        let (y, z) = sample(40, 6);
        let (model, report) = select_hyperparams(
            y.view(),
            z.view(),
            &DEFAULT_LAMBDA_GRID,
            &DEFAULT_SIGMA2_GRID,
            &gp(1.0),
        )
        .unwrap();
        assert_eq!(report.errors.len(), report.grid.len());
        for &e in &report.errors {
            assert!(report.errors[report.best] <= e);
        }
        assert_eq!(report.best_point(), (model.lambda(), model.y_params().sigma2()));
    }

    #[test]
    fn all_invalid_grid_is_config_error() {
        let y = array![[0.0], [50.0], [100.0]];
        let z = array![[0.0], [1.0], [2.0]];
        let r = select_hyperparams(y.view(), z.view(), &[1e-15], &[1.0], &gp(1.0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip() {
        let (y, z) = sample(10, 7);
        let model = fit_cme(y.view(), z.view(), 0.1, &gp(0.5), &gp(1.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cme.json");
        model.save_json(&path).unwrap();
        let back = CmeModel::load_json(&path).unwrap();
        assert_eq!(back.w1(), model.w1());
        assert_eq!(back.lambda(), model.lambda());
    }

    /// `‖ψ(z) − F(y)‖²` for a model refitted without point `i`.
    fn refit_residual(y: &Array2<f64>, z: &Array2<f64>, i: usize, lambda: f64, yp: &KernelParams, zp: &KernelParams) -> f64 {
        let keep: Vec<usize> = (0..y.nrows()).filter(|&j| j != i).collect();
        let (ty, tz) = (y.select(ndarray::Axis(0), &keep), z.select(ndarray::Axis(0), &keep));
        let model = fit_cme(ty.view(), tz.view(), lambda, yp, zp).unwrap();
        let a = model.embedding_weights(y.slice(ndarray::s![i..i + 1, ..])).unwrap();
        let a = a.row(0);
        let kzz = gram_matrix(tz.view(), tz.view(), zp);
        let kz = gram_matrix(z.slice(ndarray::s![i..i + 1, ..]), tz.view(), zp);
        1.0 - 2.0 * kz.row(0).dot(&a) + a.dot(&kzz.dot(&a))
    }

    #[test]
    fn closed_form_matches_retraining() {
        for (seed, m) in [(1u64, 30usize), (2, 12), (3, 40)] {
            let (y, z) = sample(m, seed);
            for &lambda in &[0.01, 0.3] {
                let (yp, zp) = (gp(0.4), gp(0.8));
                let brute = (0..m).map(|i| refit_residual(&y, &z, i, lambda, &yp, &zp)).sum::<f64>() / m as f64;
                let fast = loo_error(y.view(), z.view(), lambda, &yp, &zp).unwrap();
                assert!((fast - brute).abs() <= 1e-8 * brute, "m={m} λ={lambda}: {fast} vs {brute}");
            }
        }
    }

    #[test]
    fn huge_ridge_loo_is_feature_norm() {
        let (y, z) = sample(25, 4);
        let e = loo_error(y.view(), z.view(), 1e8, &gp(0.5), &gp(1.0)).unwrap();
        assert!((e - 1.0).abs() < 1e-3);
    }

    #[test]
    fn duplicating_holdout_with_doubled_ridge_keeps_predictions() {
        let (y, z) = sample(15, 5);
        let yy = ndarray::concatenate![ndarray::Axis(0), y, y];
        let zz = ndarray::concatenate![ndarray::Axis(0), z, z];
        let base = fit_cme(y.view(), z.view(), 0.05, &gp(0.5), &gp(1.0)).unwrap();
        let dup = fit_cme(yy.view(), zz.view(), 0.1, &gp(0.5), &gp(1.0)).unwrap();
        let (q, _) = sample(7, 6);
        // compare the predicted embeddings through their inner products with ψ(Zₜ)
        let kb = gram_matrix(z.view(), z.view(), &gp(1.0));
        let pb = base.embedding_weights(q.view()).unwrap().dot(&kb);
        let wd = dup.embedding_weights(q.view()).unwrap();
        let folded = &wd.slice(ndarray::s![.., ..15]) + &wd.slice(ndarray::s![.., 15..]);
        let pd = folded.dot(&kb);
        assert!(max_abs(&(&pb - &pd)) < 1e-9);
        assert!(loo_error(yy.view(), zz.view(), 0.1, &gp(0.5), &gp(1.0)).unwrap().is_finite());
    }

    #[test]
    fn recovers_generating_bandwidth() {
        // z = 2y with a z-kernel of bandwidth 4σ₀² makes ψ(z) = ψ_σ₀(y)
        let grid = [0.001, 0.01, 0.1, 1.0];
        for &s0 in &[0.01, 0.1] {
            for seed in 0..5 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let y = Array2::from_shape_fn((60, 1), |_| rng.random_range(-2.0..2.0));
                let z = &y * 2.0;
                let (model, report) =
                    select_hyperparams(y.view(), z.view(), &DEFAULT_LAMBDA_GRID, &grid, &gp(4.0 * s0)).unwrap();
                assert_eq!(model.y_params().sigma2(), s0, "seed {seed}: {report:?}");
            }
        }
    }

    #[test]
    fn interpolates_holdout_as_ridge_vanishes() {
        let (y, z) = sample(10, 8);
        let model = fit_cme(y.view(), z.view(), 1e-9, &gp(0.002), &gp(1.0)).unwrap();
        let a = model.embedding_weights(y.view()).unwrap();
        assert!(max_abs(&(&a - &Array2::<f64>::eye(10))) < 1e-6);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn loo_permutation_invariant(seed in 0u64..1000, m in 3usize..20, rot in 1usize..19) {
            let (y, z) = sample(m, seed);
            let perm: Vec<usize> = (0..m).map(|i| (i + rot) % m).rev().collect();
            let a = loo_error(y.view(), z.view(), 0.1, &gp(0.5), &gp(1.0)).unwrap();
            let b = loo_error(
                y.select(ndarray::Axis(0), &perm).view(),
                z.select(ndarray::Axis(0), &perm).view(),
                0.1, &gp(0.5), &gp(1.0),
            ).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-10 * a.max(1e-12));
        }

        #[test]
        fn w2_is_psd(seed in 0u64..1000, m in 2usize..25) {
            let (y, z) = sample(m, seed);
            let model = fit_cme(y.view(), z.view(), 0.01, &gp(0.3), &gp(1.0)).unwrap();
            let w2 = model.w2();
            let ev = nalgebra::DMatrix::from_fn(m, m, |i, j| w2[[i, j]]).symmetric_eigenvalues().min();
            let scale = max_abs(w2).max(1.0);
            proptest::prop_assert!(ev >= -1e-10 * scale);
        }
    }
}
