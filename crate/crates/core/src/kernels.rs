//! Gaussian kernels, Gram matrices and the small dense-algebra surface the
//! estimators are built from.
//!
//! Bandwidths are always given as `σ²`: `k(x, x') = exp(-‖x - x'‖² / (2σ²))`.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::Cholesky;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    family: KernelFamily,
    sigma2: f64,
}

impl KernelParams {
    pub fn gaussian(sigma2: f64) -> Result<Self> {
        let p = KernelParams {
            family: KernelFamily::Gaussian,
            sigma2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma2.is_finite() && self.sigma2 > 0.0 {
            Ok(())
        } else {
            Err(Error::usage(format!(
                "kernel bandwidth sigma2 must be positive and finite, got {}",
                self.sigma2
            )))
        }
    }

    #[inline]
    pub(crate) fn from_sq_dist(&self, d2: f64) -> f64 {
        (-d2 / (2.0 * self.sigma2)).exp()
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn kernel_eval(x: &[f64], xp: &[f64], params: &KernelParams) -> Result<f64> {
    if x.len() != xp.len() {
        return Err(Error::usage(format!(
            "kernel arguments differ in dimension ({} vs {})",
            x.len(),
            xp.len()
        )));
    }
    params.validate()?;
    Ok(params.from_sq_dist(sq_dist(x, xp)))
}

/// Kernel evaluations between two point sets (rows are points).
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    entries: Array2<f64>,
    row_params: KernelParams,
    col_params: KernelParams,
}

impl GramMatrix {
    /// Wraps an already computed matrix, e.g. one produced by an
    /// approximation or a test fixture.
    pub fn from_entries(entries: Array2<f64>, params: KernelParams) -> Self {
        GramMatrix {
            entries,
            row_params: params,
            col_params: params,
        }
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    pub fn into_entries(self) -> Array2<f64> {
        self.entries
    }

    pub fn row_params(&self) -> &KernelParams {
        &self.row_params
    }

    pub fn col_params(&self) -> &KernelParams {
        &self.col_params
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.dim()
    }

    pub fn is_square(&self) -> bool {
        self.entries.nrows() == self.entries.ncols()
    }
}

pub fn gram(
    rows: ArrayView2<f64>,
    cols: ArrayView2<f64>,
    params: &KernelParams,
) -> Result<GramMatrix> {
    gram_with(rows, cols, params, Exec::default())
}

pub fn gram_with(
    rows: ArrayView2<f64>,
    cols: ArrayView2<f64>,
    params: &KernelParams,
    exec: Exec,
) -> Result<GramMatrix> {
    if rows.nrows() == 0 || cols.nrows() == 0 {
        return Err(Error::usage("Gram matrix of an empty point set"));
    }
    if rows.ncols() != cols.ncols() {
        return Err(Error::usage(format!(
            "point sets differ in dimension ({} vs {})",
            rows.ncols(),
            cols.ncols()
        )));
    }
    params.validate()?;
    Ok(GramMatrix::from_entries(
        gram_matrix_with(rows, cols, params, exec),
        *params,
    ))
}

/// Unchecked Gram construction for internal callers that already validated
/// shapes.
pub(crate) fn gram_matrix(
    rows: ArrayView2<f64>,
    cols: ArrayView2<f64>,
    params: &KernelParams,
) -> Array2<f64> {
    gram_matrix_with(rows, cols, params, Exec::default())
}

fn gram_matrix_with(
    rows: ArrayView2<f64>,
    cols: ArrayView2<f64>,
    params: &KernelParams,
    exec: Exec,
) -> Array2<f64> {
    let rows = rows.as_standard_layout();
    let cols = cols.as_standard_layout();
    let d = rows.ncols();
    let r = rows.as_slice().expect("standard layout");
    let c = cols.as_slice().expect("standard layout");
    let mut out = Array2::zeros((rows.nrows(), cols.nrows()));
    if d == 0 {
        out.fill(1.0);
        return out;
    }
    exec.fill_rows(&mut out, |i, row| {
        let xi = &r[i * d..(i + 1) * d];
        for (j, v) in row.iter_mut().enumerate() {
            *v = params.from_sq_dist(sq_dist(xi, &c[j * d..(j + 1) * d]));
        }
    });
    out
}

/// Solves `(K + λI)·S = B` through a Cholesky factorization with jitter
/// escalation. `K` must be square and symmetric.
pub fn regularized_solve(
    k: ArrayView2<f64>,
    lambda: f64,
    b: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let n = k.nrows();
    if k.ncols() != n {
        return Err(Error::usage(format!(
            "regularized solve needs a square matrix, got {}x{}",
            n,
            k.ncols()
        )));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::usage(format!(
            "ridge parameter must be positive, got {lambda}"
        )));
    }
    if b.nrows() != n {
        return Err(Error::usage(format!(
            "right-hand side has {} rows, expected {n}",
            b.nrows()
        )));
    }
    let scale = k.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (k[[i, j]] - k[[j, i]]).abs() > 1e-10 * scale {
                return Err(Error::usage("regularized solve needs a symmetric matrix"));
            }
        }
    }
    let mut shifted = k.to_owned();
    shifted.diag_mut().mapv_inplace(|d| d + lambda);
    Cholesky::factor_with_jitter(shifted.view())?.solve(b)
}

/// `Tr(A·B) = Σᵢⱼ Aᵢⱼ·Bⱼᵢ` without forming the product.
pub fn trace_product(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let n = a.nrows();
    if a.ncols() != n || b.dim() != (n, n) {
        return Err(Error::usage(format!(
            "trace product needs equal square matrices, got {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(trace_product_unchecked(a, b))
}

pub(crate) fn trace_product_unchecked(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut acc = 0.0;
    Zip::from(a).and(b.t()).for_each(|x, y| acc += x * y);
    acc
}

pub fn hadamard(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::usage(format!(
            "Hadamard product of {:?} and {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(&a * &b)
}

/// Gradient of `Σᵢⱼ Gᵢⱼ·k(xᵢ, xⱼ)` with respect to the points `x`, where
/// `kxx` is the Gaussian Gram matrix of `x` with itself.
///
/// Uses `∂k(xᵢ,xⱼ)/∂xᵢ = -(xᵢ - xⱼ)/σ² · k(xᵢ,xⱼ)`.
pub fn gaussian_gram_backward(
    x: ArrayView2<f64>,
    kxx: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    params: &KernelParams,
) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut grad = Array2::zeros((n, d));
    let inv = 1.0 / params.sigma2();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let c = -(weights[[i, j]] + weights[[j, i]]) * kxx[[i, j]] * inv;
            if c == 0.0 {
                continue;
            }
            for t in 0..d {
                grad[[i, t]] += c * (x[[i, t]] - x[[j, t]]);
            }
        }
    }
    grad
}
