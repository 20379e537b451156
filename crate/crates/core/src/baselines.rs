//! Comparison measures: HSCIC and the generalized covariance measure.
//!
//! Both regress onto `Y` inside every batch with a Gaussian ridge fit; nothing
//! is cached between calls.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gaussian_gram_backward, gram_matrix, regularized_solve, KernelParams};

/// Temperature of the smooth maximum used as the trainable GCM surrogate.
pub const GCM_TEMPERATURE: f64 = 10.0;

/// Pairs whose residual-product variance falls below this are excluded.
pub const GCM_VARIANCE_GUARD: f64 = 1e-12;

const MIN_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Hscic,
    Gcm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcmEstimate {
    /// `max |T_jk|` over the retained pairs.
    pub value: f64,
    /// `d_x × d_z` normalized statistics; excluded pairs are NaN.
    pub raw_covs: Array2<f64>,
    /// `(1/τ)·log Σ exp(τ|T_jk|)` over the retained pairs.
    pub regularizer_value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HscicEstimate {
    pub value: f64,
}

/// Everything a baseline needs for one batch.
#[derive(Clone, Copy, Debug)]
pub struct BaselineInputs<'a> {
    pub x_feats: ArrayView2<'a, f64>,
    pub z: ArrayView2<'a, f64>,
    pub y: ArrayView2<'a, f64>,
    pub x_params: KernelParams,
    pub z_params: KernelParams,
    pub y_params: KernelParams,
    pub lambda: f64,
}

fn check_inputs(x: ArrayView2<f64>, z: ArrayView2<f64>, y: ArrayView2<f64>, lambda: f64) -> Result<usize> {
    let b = x.nrows();
    if b < MIN_BATCH {
        return Err(Error::usage(format!("baseline statistics need a batch of at least {MIN_BATCH}, got {b}")));
    }
    if z.nrows() != b || y.nrows() != b {
        return Err(Error::usage("x, z and y batches differ in length"));
    }
    if x.ncols() == 0 || z.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::usage("baseline inputs need at least one column"));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::usage(format!("ridge parameter must be positive, got {lambda}")));
    }
    Ok(b)
}

/// `(K_yy + λI)⁻¹` for the batch.
fn ridge_inverse(y: ArrayView2<f64>, y_params: &KernelParams, lambda: f64) -> Result<Array2<f64>> {
    let b = y.nrows();
    let k = gram_matrix(y, y, y_params);
    regularized_solve(k.view(), lambda, Array2::eye(b).view())
}

struct GcmParts {
    est: GcmEstimate,
    s: Array2<f64>,
    rx: Array2<f64>,
    rz: Array2<f64>,
    lambda: f64,
}

fn gcm_parts(x: ArrayView2<f64>, z: ArrayView2<f64>, y: ArrayView2<f64>, y_params: &KernelParams, lambda: f64) -> Result<GcmParts> {
    let b = check_inputs(x, z, y, lambda)?;
    y_params.validate()?;
    let s = ridge_inverse(y, y_params, lambda)?;
    // v − K(K+λI)⁻¹v = λ(K+λI)⁻¹v
    let rx = s.dot(&x) * lambda;
    let rz = s.dot(&z) * lambda;
    let bf = b as f64;
    let mut raw = Array2::from_elem((x.ncols(), z.ncols()), f64::NAN);
    for j in 0..x.ncols() {
        for k in 0..z.ncols() {
            let r = &rx.column(j) * &rz.column(k);
            let m = r.sum() / bf;
            let var = r.mapv(|v| v * v).sum() / bf - m * m;
            if var >= GCM_VARIANCE_GUARD && var.is_finite() {
                raw[[j, k]] = bf.sqrt() * m / var.sqrt();
            }
        }
    }
    let valid: Vec<f64> = raw.iter().copied().filter(|v| v.is_finite()).collect();
    if valid.is_empty() {
        return Err(Error::numerical("every GCM coordinate pair failed the variance guard"));
    }
    let value = valid.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let regularizer_value = value
        + valid
            .iter()
            .map(|v| (GCM_TEMPERATURE * (v.abs() - value)).exp())
            .sum::<f64>()
            .ln()
            / GCM_TEMPERATURE;
    Ok(GcmParts {
        est: GcmEstimate {
            value,
            raw_covs: raw,
            regularizer_value,
        },
        s,
        rx,
        rz,
        lambda,
    })
}

pub fn gcm_statistic(
    x_feats: ArrayView2<f64>,
    z: ArrayView2<f64>,
    y: ArrayView2<f64>,
    y_params: &KernelParams,
    lambda: f64,
) -> Result<GcmEstimate> {
    Ok(gcm_parts(x_feats, z, y, y_params, lambda)?.est)
}

/// Softmax weights of the smooth maximum over `|T_jk|`; zero on excluded
/// pairs.
pub fn gcm_pair_weights(est: &GcmEstimate) -> Array2<f64> {
    let mut w = est.raw_covs.mapv(|t| {
        if t.is_finite() {
            (GCM_TEMPERATURE * (t.abs() - est.value)).exp()
        } else {
            0.0
        }
    });
    let total = w.sum();
    w /= total;
    w
}

/// Gradient of `T_jk` with respect to column `j` of the features.
fn gcm_pair_grad(parts: &GcmParts, j: usize, k: usize) -> Array1<f64> {
    let b = parts.rx.nrows() as f64;
    let rz = parts.rz.column(k);
    let r = &parts.rx.column(j) * &rz;
    let m = r.sum() / b;
    let var = r.mapv(|v| v * v).sum() / b - m * m;
    let sd = var.sqrt();
    // dT/dR_i = (1/√B)·[1/s − m(R_i − m)/s³]
    let dr = r.mapv(|ri| (1.0 / sd - m * (ri - m) / (sd * sd * sd)) / b.sqrt());
    let drx = &dr * &rz;
    parts.s.dot(&drx) * parts.lambda
}

fn gcm_grad_from_parts(parts: &GcmParts, dx: usize) -> Array2<f64> {
    let weights = gcm_pair_weights(&parts.est);
    let mut grad = Array2::zeros((parts.rx.nrows(), dx));
    for ((j, k), &w) in weights.indexed_iter() {
        if w == 0.0 {
            continue;
        }
        let sign = parts.est.raw_covs[[j, k]].signum();
        grad.column_mut(j).scaled_add(w * sign, &gcm_pair_grad(parts, j, k));
    }
    grad
}

struct HscicParts {
    value: f64,
    kxx: Array2<f64>,
    kzz: Array2<f64>,
    w: Array2<f64>,
}

fn hscic_parts(inp: &BaselineInputs) -> Result<HscicParts> {
    let b = check_inputs(inp.x_feats, inp.z, inp.y, inp.lambda)?;
    inp.x_params.validate()?;
    inp.z_params.validate()?;
    inp.y_params.validate()?;
    let kyy = gram_matrix(inp.y, inp.y, &inp.y_params);
    // column i holds w(yᵢ) = (K_yy + λI)⁻¹ k_y(·, yᵢ)
    let w = regularized_solve(kyy.view(), inp.lambda, kyy.view())?;
    let kxx = gram_matrix(inp.x_feats, inp.x_feats, &inp.x_params);
    let kzz = gram_matrix(inp.z, inp.z, &inp.z_params);
    let p = kxx.dot(&w);
    let q = kzz.dot(&w);
    let joint = &kxx * &kzz;
    let t1 = (&w * &joint.dot(&w)).sum_axis(Axis(0));
    let wp = (&w * &p).sum_axis(Axis(0));
    let wq = (&w * &q).sum_axis(Axis(0));
    let mut t2 = Array1::zeros(b);
    Zip::from(&mut t2)
        .and(w.columns())
        .and(p.columns())
        .and(q.columns())
        .for_each(|t, wc, pc, qc| {
            *t = wc.iter().zip(pc).zip(qc).map(|((a, b), c)| a * b * c).sum::<f64>();
        });
    let per_point = &t1 - &(&t2 * 2.0) + &wp * &wq;
    let value = per_point.sum() / b as f64;
    if !value.is_finite() {
        return Err(Error::numerical("HSCIC value is not finite"));
    }
    Ok(HscicParts { value, kxx, kzz, w })
}

pub fn hscic_statistic(
    x_feats: ArrayView2<f64>,
    z: ArrayView2<f64>,
    y: ArrayView2<f64>,
    x_params: &KernelParams,
    z_params: &KernelParams,
    y_params: &KernelParams,
    lambda: f64,
) -> Result<HscicEstimate> {
    let inp = BaselineInputs {
        x_feats,
        z,
        y,
        x_params: *x_params,
        z_params: *z_params,
        y_params: *y_params,
        lambda,
    };
    Ok(HscicEstimate {
        value: hscic_parts(&inp)?.value,
    })
}

/// `∂HSCIC/∂K_xx` with entries treated as independent:
/// `(1/B)[K_zz∘WWᵀ − 2(W∘K_zzW)Wᵀ + W·diag(c)·Wᵀ]`, `cᵢ = wᵢᵀK_zz wᵢ`.
fn hscic_kxx_weights(parts: &HscicParts) -> Array2<f64> {
    let b = parts.w.nrows() as f64;
    let w = &parts.w;
    let q = parts.kzz.dot(w);
    let c = (w * &q).sum_axis(Axis(0));
    let mut g = &parts.kzz * &w.dot(&w.t());
    g = g - (w * &q).dot(&w.t()) * 2.0;
    let wc = w * &c.insert_axis(Axis(0));
    g = g + wc.dot(&w.t());
    g / b
}

/// Value (GCM: the smooth-max surrogate) and its gradient with respect to
/// `x_feats`. Regression weights depend on `y` only.
pub fn baseline_value_and_grad(which: Baseline, inp: &BaselineInputs) -> Result<(f64, Array2<f64>)> {
    match which {
        Baseline::Hscic => {
            let parts = hscic_parts(inp)?;
            let g = hscic_kxx_weights(&parts);
            let grad = gaussian_gram_backward(inp.x_feats, parts.kxx.view(), g.view(), &inp.x_params);
            Ok((parts.value, grad))
        }
        Baseline::Gcm => {
            let parts = gcm_parts(inp.x_feats, inp.z, inp.y, &inp.y_params, inp.lambda)?;
            let grad = gcm_grad_from_parts(&parts, inp.x_feats.ncols());
            Ok((parts.est.regularizer_value, grad))
        }
    }
}

pub fn baseline_grad_wrt_features(which: Baseline, inp: &BaselineInputs) -> Result<Array2<f64>> {
    Ok(baseline_value_and_grad(which, inp)?.1)
}
