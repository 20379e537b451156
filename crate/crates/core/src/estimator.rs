//! The CIRCE statistic.
//!
//! Given a mini-batch `(x, y, z)` and a fitted [`CmeModel`], the conditionally
//! centered Gram matrix is
//!
//! ```text
//! K̂ᶜ = K_yy ∘ (K_zz − K_yY·W1·K_Zz − (K_yY·W1·K_Zz)ᵀ + K_yY·W2·K_Yy)
//! ```
//!
//! whose entry `(i, j)` is `k(yᵢ,yⱼ)·⟨ψ(zᵢ) − μ̂(yᵢ), ψ(zⱼ) − μ̂(yⱼ)⟩`. The
//! statistic is `Tr(K_xx·K̂ᶜ) / (B(B−1))`, optionally with both diagonals
//! removed ([`Variant::Debiased`]) or with `K_xx` double-centered
//! ([`Variant::Centered`]).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::cme::CmeModel;
use crate::error::{Error, Result};
use crate::kernels::{gram_matrix, trace_product_unchecked, GramMatrix, KernelParams};
use crate::linalg::symmetrize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Debiased,
    #[default]
    Centered,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::Debiased => "debiased",
            Variant::Centered => "centered",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Variant::Plain),
            "debiased" => Ok(Variant::Debiased),
            "centered" => Ok(Variant::Centered),
            other => Err(Error::usage(format!("unknown estimator variant '{other}'"))),
        }
    }
}

/// `K_yy ∘ K̂ᶜ_zz` for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CenteredGram {
    khat_c: Array2<f64>,
}

impl CenteredGram {
    /// Wraps a precomputed matrix. It must be square; symmetry is enforced.
    pub fn from_matrix(mut khat_c: Array2<f64>) -> Result<Self> {
        if khat_c.nrows() != khat_c.ncols() {
            return Err(Error::usage("centered Gram matrix must be square"));
        }
        symmetrize(&mut khat_c);
        Ok(CenteredGram { khat_c })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.khat_c
    }

    pub fn batch_size(&self) -> usize {
        self.khat_c.nrows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CirceEstimate {
    pub value: f64,
    pub variant: Variant,
    pub batch_size: usize,
}

fn check_batch(batch_y: ArrayView2<f64>, batch_z: ArrayView2<f64>) -> Result<usize> {
    let b = batch_y.nrows();
    if b < 2 {
        return Err(Error::usage(format!("batch needs at least 2 points, got {b}")));
    }
    if batch_z.nrows() != b {
        return Err(Error::usage(format!(
            "batch y has {b} rows but z has {}",
            batch_z.nrows()
        )));
    }
    Ok(b)
}

pub fn centered_gram(
    batch_y: ArrayView2<f64>,
    batch_z: ArrayView2<f64>,
    model: &CmeModel,
    y_params: &KernelParams,
    z_params: &KernelParams,
) -> Result<CenteredGram> {
    check_batch(batch_y, batch_z)?;
    if y_params != model.y_params() || z_params != model.z_params() {
        return Err(Error::usage(format!(
            "kernel bandwidths (y {}, z {}) do not match the fitted model (y {}, z {})",
            y_params.sigma2(),
            z_params.sigma2(),
            model.y_params().sigma2(),
            model.z_params().sigma2()
        )));
    }
    if batch_y.ncols() != model.holdout_y().ncols() || batch_z.ncols() != model.holdout_z().ncols() {
        return Err(Error::usage("batch dimensions do not match the holdout data"));
    }
    let k_yh = gram_matrix(batch_y, model.holdout_y(), y_params);
    let k_hz = gram_matrix(model.holdout_z(), batch_z, z_params);
    let cross = k_yh.dot(model.w1()).dot(&k_hz);
    let quad = k_yh.dot(model.w2()).dot(&k_yh.t());
    let kyy = gram_matrix(batch_y, batch_y, y_params);
    let kzz = gram_matrix(batch_z, batch_z, z_params);
    Ok(assemble(&kyy, &kzz, &cross, &quad))
}

/// `K_yy ∘ (K_zz − C − Cᵀ + Q)`.
pub(crate) fn assemble(
    kyy: &Array2<f64>,
    kzz: &Array2<f64>,
    cross: &Array2<f64>,
    quad: &Array2<f64>,
) -> CenteredGram {
    let b = kyy.nrows();
    let mut k = Array2::zeros((b, b));
    for i in 0..b {
        for j in 0..=i {
            let c = kzz[[i, j]] - cross[[i, j]] - cross[[j, i]]
                + 0.5 * (quad[[i, j]] + quad[[j, i]]);
            let v = kyy[[i, j]] * c;
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    CenteredGram { khat_c: k }
}

fn normalizer(b: usize) -> f64 {
    1.0 / (b as f64 * (b as f64 - 1.0))
}

/// Double-centers a square matrix: `H·A·H` with `H = I − 11ᵀ/B`.
pub(crate) fn double_center(a: ArrayView2<f64>) -> Array2<f64> {
    let b = a.nrows() as f64;
    let row_means: Array1<f64> = a.sum_axis(ndarray::Axis(1)) / b;
    let col_means: Array1<f64> = a.sum_axis(ndarray::Axis(0)) / b;
    let grand = row_means.sum() / b;
    let mut out = a.to_owned();
    for ((i, j), v) in out.indexed_iter_mut() {
        *v += grand - row_means[i] - col_means[j];
    }
    out
}

fn zero_diagonal(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    out.diag_mut().fill(0.0);
    out
}

/// Statistic value for an arbitrary batch `K_xx` matrix.
pub fn statistic_value(k_xx: ArrayView2<f64>, cg: &CenteredGram, variant: Variant) -> Result<f64> {
    let b = cg.batch_size();
    if b < 2 {
        return Err(Error::usage("statistic needs a batch of at least 2 points"));
    }
    if k_xx.dim() != (b, b) {
        return Err(Error::usage(format!(
            "K_xx is {:?}, centered Gram is {b}x{b}",
            k_xx.dim()
        )));
    }
    let kc = cg.khat_c.view();
    let raw = match variant {
        Variant::Plain => trace_product_unchecked(k_xx, kc),
        Variant::Debiased => trace_product_unchecked(zero_diagonal(k_xx).view(), zero_diagonal(kc).view()),
        Variant::Centered => trace_product_unchecked(double_center(k_xx).view(), kc),
    };
    Ok(raw * normalizer(b))
}

pub fn circe_statistic(k_xx: &GramMatrix, cg: &CenteredGram, variant: Variant) -> Result<CirceEstimate> {
    let value = statistic_value(k_xx.view(), cg, variant)?;
    if !value.is_finite() {
        return Err(Error::numerical("statistic is not finite"));
    }
    Ok(CirceEstimate {
        value,
        variant,
        batch_size: cg.batch_size(),
    })
}

/// Derivative of the statistic with respect to each entry of `K_xx`
/// (entries treated as independent), so that
/// `value = Σᵢⱼ Gᵢⱼ·(K_xx)ᵢⱼ`.
pub fn kxx_weights(cg: &CenteredGram, variant: Variant) -> Array2<f64> {
    let b = cg.batch_size();
    let scale = normalizer(b);
    let base = match variant {
        Variant::Plain => cg.khat_c.clone(),
        Variant::Debiased => zero_diagonal(cg.khat_c.view()),
        Variant::Centered => double_center(cg.khat_c.view()),
    };
    base * scale
}

/// Conditional mean embedding written as a finite kernel expansion
/// `μ(y) = Σₖ wₖ·ψ(pₖ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion {
    pub points: Array2<f64>,
    pub weights: Array1<f64>,
}

impl Expansion {
    pub fn new(points: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        if points.nrows() != weights.len() {
            return Err(Error::usage("expansion points and weights differ in length"));
        }
        Ok(Expansion { points, weights })
    }

    /// `μ(y) = ψ(p)`.
    pub fn point(p: ArrayView1<f64>) -> Self {
        Expansion {
            points: p.to_owned().insert_axis(ndarray::Axis(0)),
            weights: Array1::ones(1),
        }
    }
}

/// Centered Gram matrix using a known conditional mean instead of the
/// regression estimate.
pub fn centered_gram_oracle<F>(
    batch_y: ArrayView2<f64>,
    batch_z: ArrayView2<f64>,
    analytic_mu: F,
    y_params: &KernelParams,
    z_params: &KernelParams,
) -> Result<CenteredGram>
where
    F: Fn(ArrayView1<f64>) -> Expansion,
{
    let b = check_batch(batch_y, batch_z)?;
    let mus: Vec<Expansion> = batch_y.rows().into_iter().map(&analytic_mu).collect();
    for mu in &mus {
        if mu.points.ncols() != batch_z.ncols() {
            return Err(Error::usage("expansion points must live in the z space"));
        }
    }
    // ⟨ψ(zᵢ), μ(yⱼ)⟩
    let mut cross = Array2::zeros((b, b));
    for (j, mu) in mus.iter().enumerate() {
        let k = gram_matrix(batch_z, mu.points.view(), z_params).dot(&mu.weights);
        cross.column_mut(j).assign(&k);
    }
    // ⟨μ(yᵢ), μ(yⱼ)⟩
    let mut quad = Array2::zeros((b, b));
    for i in 0..b {
        for j in 0..=i {
            let k = gram_matrix(mus[i].points.view(), mus[j].points.view(), z_params);
            let v = mus[i].weights.dot(&k.dot(&mus[j].weights));
            quad[[i, j]] = v;
            quad[[j, i]] = v;
        }
    }
    let kyy = gram_matrix(batch_y, batch_y, y_params);
    let kzz = gram_matrix(batch_z, batch_z, z_params);
    Ok(assemble(&kyy, &kzz, &cross, &quad))
}

/// The statistic with the true conditional mean embedding in place of the
/// ridge estimate.
#[allow(clippy::too_many_arguments)]
pub fn circe_oracle<F>(
    batch_x_feats: ArrayView2<f64>,
    batch_y: ArrayView2<f64>,
    batch_z: ArrayView2<f64>,
    analytic_mu: F,
    x_params: &KernelParams,
    y_params: &KernelParams,
    z_params: &KernelParams,
    variant: Variant,
) -> Result<CirceEstimate>
where
    F: Fn(ArrayView1<f64>) -> Expansion,
{
    if batch_x_feats.nrows() != batch_y.nrows() {
        return Err(Error::usage("x features and y differ in batch size"));
    }
    let cg = centered_gram_oracle(batch_y, batch_z, analytic_mu, y_params, z_params)?;
    let kxx = GramMatrix::from_entries(gram_matrix(batch_x_feats, batch_x_feats, x_params), *x_params);
    circe_statistic(&kxx, &cg, variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cme::fit_cme;
    use ndarray::{array, s, Array2, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gp(s: f64) -> KernelParams {
        KernelParams::gaussian(s).unwrap()
    }

    fn uniform(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0))
    }

    fn min_eigenvalue(a: &Array2<f64>) -> f64 {
        let n = a.nrows();
        nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]])
            .symmetric_eigenvalues()
            .min()
    }

    fn batch_setup(b: usize, seed: u64) -> (Array2<f64>, Array2<f64>, Array2<f64>, CmeModel) {
        let y = uniform(b, 1, seed);
        let z = &y.mapv(f64::cos) + &(uniform(b, 1, seed + 1) * 0.3);
        let x = &z + &(uniform(b, 1, seed + 2) * 0.2);
        let hy = uniform(40, 1, seed + 3);
        let hz = &hy.mapv(f64::cos) + &(uniform(40, 1, seed + 4) * 0.3);
        let model = fit_cme(hy.view(), hz.view(), 0.1, &gp(0.5), &gp(1.0)).unwrap();
        (x, y, z, model)
    }

    #[test]
    fn perfect_fit_centers_to_zero() {
        // z = y², batch ⊂ holdout, λ → 0: conditional mean reproduces ψ(z)
        let hy = Array2::from_shape_fn((12, 1), |(i, _)| i as f64 * 0.6 - 3.0);
        let hz = hy.mapv(|v| v * v);
        let model = fit_cme(hy.view(), hz.view(), 1e-12, &gp(0.1), &gp(1.0)).unwrap();
        let by = hy.slice(s![2..8, ..]).to_owned();
        let bz = hz.slice(s![2..8, ..]).to_owned();
        let cg = centered_gram(by.view(), bz.view(), &model, &gp(0.1), &gp(1.0)).unwrap();
        assert!(cg.matrix().iter().all(|v| v.abs() <= 1e-6), "{:?}", cg.matrix());
    }

    #[test]
    fn two_point_entry_matches_expansion() {
        let (_, y, z, model) = batch_setup(2, 10);
        let cg = centered_gram(y.view(), z.view(), &model, &gp(0.5), &gp(1.0)).unwrap();
        // brute force: ⟨ψ(z₁) − Σₘ a₁ₘψ(Zₘ), ψ(z₂) − Σₘ a₂ₘψ(Zₘ)⟩·k(y₁,y₂)
        let kz = |a: ArrayView1<f64>, b: ArrayView1<f64>| {
            crate::kernels::kernel_eval(a.as_slice().unwrap(), b.as_slice().unwrap(), &gp(1.0)).unwrap()
        };
        let ky = |a: ArrayView1<f64>, b: ArrayView1<f64>| {
            crate::kernels::kernel_eval(a.as_slice().unwrap(), b.as_slice().unwrap(), &gp(0.5)).unwrap()
        };
        let hy = model.holdout_y();
        let hz = model.holdout_z();
        let m = hy.nrows();
        let coef = |yi: ArrayView1<f64>| -> Vec<f64> {
            (0..m)
                .map(|t| (0..m).map(|u| ky(yi, hy.row(u)) * model.w1()[[u, t]]).sum())
                .collect()
        };
        let (a1, a2) = (coef(y.row(0)), coef(y.row(1)));
        let mut inner = kz(z.row(0), z.row(1));
        for t in 0..m {
            inner -= a2[t] * kz(z.row(0), hz.row(t));
            inner -= a1[t] * kz(hz.row(t), z.row(1));
            for u in 0..m {
                inner += a1[t] * a2[u] * kz(hz.row(t), hz.row(u));
            }
        }
        let expected = ky(y.row(0), y.row(1)) * inner;
        assert!((cg.matrix()[[0, 1]] - expected).abs() < 1e-10);
    }

    #[test]
    fn centered_gram_is_psd() {
        let (_, y, z, model) = batch_setup(60, 20);
        let cg = centered_gram(y.view(), z.view(), &model, &gp(0.5), &gp(1.0)).unwrap();
        assert!(min_eigenvalue(cg.matrix()) >= -1e-8 * 60.0);
        assert_eq!(cg.matrix(), &cg.matrix().t().to_owned());
    }

    #[test]
    fn bandwidth_mismatch_is_usage_error() {
        let (_, y, z, model) = batch_setup(5, 30);
        let r = centered_gram(y.view(), z.view(), &model, &gp(0.6), &gp(1.0));
        assert!(matches!(r, Err(Error::Usage(_))));
        let r = centered_gram(y.slice(s![..1, ..]), z.slice(s![..1, ..]), &model, &gp(0.5), &gp(1.0));
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn plain_is_nonnegative() {
        for seed in 0..10 {
            let (x, y, z, model) = batch_setup(30, 100 + seed * 7);
            let cg = centered_gram(y.view(), z.view(), &model, &gp(0.5), &gp(1.0)).unwrap();
            let kxx = GramMatrix::from_entries(gram_matrix(x.view(), x.view(), &gp(1.0)), gp(1.0));
            assert!(circe_statistic(&kxx, &cg, Variant::Plain).unwrap().value >= -1e-12);
        }
    }

    #[test]
    fn debiased_three_point_brute_force() {
        let (x, y, z, model) = batch_setup(3, 40);
        let cg = centered_gram(y.view(), z.view(), &model, &gp(0.5), &gp(1.0)).unwrap();
        let kxx = gram_matrix(x.view(), x.view(), &gp(1.0));
        let mut sum = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    sum += kxx[[i, j]] * cg.matrix()[[i, j]];
                }
            }
        }
        let v = statistic_value(kxx.view(), &cg, Variant::Debiased).unwrap();
        assert!((v - sum / 6.0).abs() < 1e-14);
    }

    #[test]
    fn zero_centered_gram_gives_zero() {
        let cg = CenteredGram::from_matrix(Array2::zeros((4, 4))).unwrap();
        let kxx = gram_matrix(uniform(4, 2, 1).view(), uniform(4, 2, 1).view(), &gp(1.0));
        for v in [Variant::Plain, Variant::Debiased, Variant::Centered] {
            assert_eq!(statistic_value(kxx.view(), &cg, v).unwrap(), 0.0);
        }
    }

    #[test]
    fn statistic_rejects_bad_shapes() {
        let cg = CenteredGram::from_matrix(Array2::zeros((1, 1))).unwrap();
        assert!(statistic_value(Array2::zeros((1, 1)).view(), &cg, Variant::Plain).is_err());
        let cg = CenteredGram::from_matrix(Array2::zeros((3, 3))).unwrap();
        assert!(statistic_value(Array2::zeros((2, 2)).view(), &cg, Variant::Plain).is_err());
    }

    #[test]
    fn permutation_and_scaling_invariance() {
        let (x, y, z, model) = batch_setup(25, 50);
        let perm: Vec<usize> = (0..25).map(|i| (i * 7) % 25).collect();
        let (xp, yp, zp) = (x.select(Axis(0), &perm), y.select(Axis(0), &perm), z.select(Axis(0), &perm));
        let cg = centered_gram(y.view(), z.view(), &model, &gp(0.5), &gp(1.0)).unwrap();
        let cgp = centered_gram(yp.view(), zp.view(), &model, &gp(0.5), &gp(1.0)).unwrap();
        let kxx = gram_matrix(x.view(), x.view(), &gp(1.0));
        let kxxp = gram_matrix(xp.view(), xp.view(), &gp(1.0));
        for v in [Variant::Plain, Variant::Debiased, Variant::Centered] {
            let a = statistic_value(kxx.view(), &cg, v).unwrap();
            let b = statistic_value(kxxp.view(), &cgp, v).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12), "{v}: {a} vs {b}");
            let scaled = statistic_value((&kxx * 3.5).view(), &cg, v).unwrap();
            assert!((scaled - 3.5 * a).abs() <= 1e-12 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn weights_reproduce_value() {
        let (x, y, z, model) = batch_setup(9, 60);
        let cg = centered_gram(y.view(), z.view(), &model, &gp(0.5), &gp(1.0)).unwrap();
        let kxx = gram_matrix(x.view(), x.view(), &gp(1.0));
        for v in [Variant::Plain, Variant::Debiased, Variant::Centered] {
            let w = kxx_weights(&cg, v);
            let direct = statistic_value(kxx.view(), &cg, v).unwrap();
            assert!(((&w * &kxx).sum() - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn oracle_with_identical_z_and_y_is_zero() {
        let y = uniform(20, 1, 70);
        let x = uniform(20, 2, 71);
        let v = circe_oracle(
            x.view(),
            y.view(),
            y.view(),
            |yi| Expansion::point(yi),
            &gp(1.0),
            &gp(0.5),
            &gp(0.5),
            Variant::Plain,
        )
        .unwrap();
        assert!(v.value.abs() <= 1e-12);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("debiased".parse::<Variant>().unwrap(), Variant::Debiased);
        assert!("unbiased".parse::<Variant>().is_err());
        assert_eq!(Variant::default(), Variant::Centered);
        assert_eq!(Variant::Plain.to_string(), "plain");
        let _ = array![1.0];
    }
}
