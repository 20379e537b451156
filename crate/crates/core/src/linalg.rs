//! Dense symmetric-positive-definite factorization and solves.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

const BLOCK: usize = 64;

/// Lower Cholesky factor `L` with `A + jitter·I = L·Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: Array2<f64>,
    jitter: f64,
}

impl Cholesky {
    /// Factors `a` exactly as given. Only the lower triangle is read.
    pub fn factor(a: ArrayView2<f64>) -> Option<Self> {
        let l = factor_lower(a.to_owned())?;
        Some(Cholesky { l, jitter: 0.0 })
    }

    /// Factors `a`, retrying with diagonal jitter `1e-10·mean(diag)`,
    /// escalated tenfold per attempt up to `1e-4·mean(diag)`.
    pub fn factor_with_jitter(a: ArrayView2<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::usage(format!(
                "cannot factor a non-square {}x{} matrix",
                a.nrows(),
                a.ncols()
            )));
        }
        if let Some(c) = Self::factor(a) {
            return Ok(c);
        }
        let n = a.nrows();
        let mean_diag = a.diag().sum() / n.max(1) as f64;
        let scale = if mean_diag.is_finite() && mean_diag > 0.0 {
            mean_diag
        } else {
            1.0
        };
        let mut rel = 1e-10;
        while rel <= 1e-4 * (1.0 + 1e-12) {
            let jitter = rel * scale;
            let mut shifted = a.to_owned();
            shifted.diag_mut().mapv_inplace(|d| d + jitter);
            if let Some(l) = factor_lower(shifted) {
                return Ok(Cholesky { l, jitter });
            }
            rel *= 10.0;
        }
        Err(Error::numerical(format!(
            "Cholesky factorization of a {n}x{n} matrix failed after jitter escalation"
        )))
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.l
    }

    /// Diagonal shift that was needed for the factorization to succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `(L·Lᵀ)·X = B`.
    pub fn solve(&self, b: ArrayView2<f64>) -> Result<Array2<f64>> {
        if b.nrows() != self.dim() {
            return Err(Error::usage(format!(
                "right-hand side has {} rows, factor has dimension {}",
                b.nrows(),
                self.dim()
            )));
        }
        let mut x = b.as_standard_layout().into_owned();
        forward_substitute(self.l.view(), &mut x);
        backward_substitute(self.l.view(), &mut x);
        Ok(x)
    }
}

/// Blocked right-looking Cholesky on the lower triangle; the strict upper
/// triangle of the result is zeroed.
fn factor_lower(mut a: Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut k = 0;
    while k < n {
        let kb = BLOCK.min(n - k);
        // diagonal block
        for j in k..k + kb {
            let mut d = a[[j, j]];
            for t in k..j {
                d -= a[[j, t]] * a[[j, t]];
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            a[[j, j]] = d;
            for i in j + 1..k + kb {
                let mut v = a[[i, j]];
                for t in k..j {
                    v -= a[[i, t]] * a[[j, t]];
                }
                a[[i, j]] = v / d;
            }
        }
        if k + kb < n {
            // panel: A21 <- A21 · L11⁻ᵀ
            let l11 = a.slice(s![k..k + kb, k..k + kb]).to_owned();
            {
                let mut panel = a.slice_mut(s![k + kb.., k..k + kb]);
                for mut row in panel.rows_mut() {
                    for j in 0..kb {
                        let mut v = row[j];
                        for t in 0..j {
                            v -= row[t] * l11[[j, t]];
                        }
                        row[j] = v / l11[[j, j]];
                    }
                }
            }
            let panel = a.slice(s![k + kb.., k..k + kb]).to_owned();
            let mut trailing = a.slice_mut(s![k + kb.., k + kb..]);
            general_mat_mul(-1.0, &panel, &panel.t(), 1.0, &mut trailing);
        }
        k += kb;
    }
    for i in 0..n {
        for j in i + 1..n {
            a[[i, j]] = 0.0;
        }
    }
    Some(a)
}

/// In place `X <- L⁻¹·X`.
fn forward_substitute(l: ArrayView2<f64>, x: &mut Array2<f64>) {
    let n = l.nrows();
    let mut k = 0;
    while k < n {
        let kb = BLOCK.min(n - k);
        if k > 0 {
            let (done, mut rest) = x.view_mut().split_at(Axis(0), k);
            let mut block = rest.slice_mut(s![..kb, ..]);
            general_mat_mul(-1.0, &l.slice(s![k..k + kb, ..k]), &done, 1.0, &mut block);
        }
        for i in k..k + kb {
            for t in k..i {
                let c = l[[i, t]];
                if c != 0.0 {
                    let (src, mut dst) = x.view_mut().split_at(Axis(0), i);
                    dst.row_mut(0).scaled_add(-c, &src.row(t));
                }
            }
            let d = l[[i, i]];
            x.row_mut(i).mapv_inplace(|v| v / d);
        }
        k += kb;
    }
}

/// In place `X <- L⁻ᵀ·X`.
fn backward_substitute(l: ArrayView2<f64>, x: &mut Array2<f64>) {
    let n = l.nrows();
    let mut end = n;
    while end > 0 {
        let kb = BLOCK.min(end);
        let k = end - kb;
        if end < n {
            let (mut head, solved) = x.view_mut().split_at(Axis(0), end);
            let mut block = head.slice_mut(s![k.., ..]);
            general_mat_mul(-1.0, &l.slice(s![end.., k..end]).t(), &solved, 1.0, &mut block);
        }
        for i in (k..end).rev() {
            for t in i + 1..end {
                let c = l[[t, i]];
                if c != 0.0 {
                    let (mut dst, src) = x.view_mut().split_at(Axis(0), t);
                    dst.row_mut(i).scaled_add(-c, &src.row(0));
                }
            }
            let d = l[[i, i]];
            x.row_mut(i).mapv_inplace(|v| v / d);
        }
        end = k;
    }
}

/// Replaces `a` by `(a + aᵀ)/2`.
pub(crate) fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let mut a = g.dot(&g.t());
        a.diag_mut().mapv_inplace(|d| d + 0.1);
        a
    }

    #[test]
    fn factor_reconstructs_matrix() {
        for &n in &[1, 5, 64, 65, 150] {
            let a = random_spd(n, n as u64);
            let c = Cholesky::factor(a.view()).unwrap();
            let rec = c.lower().dot(&c.lower().t());
            let err = (&rec - &a).mapv(f64::abs).fold(0.0_f64, |m, &v| m.max(v));
            assert!(err < 1e-9 * n as f64, "n={n} err={err}");
        }
    }

    #[test]
    fn solve_has_small_residual() {
        for &n in &[3, 70, 200] {
            let a = random_spd(n, 7 + n as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let b = Array2::from_shape_fn((n, 9), |_| rng.random_range(-1.0..1.0));
            let x = Cholesky::factor(a.view()).unwrap().solve(b.view()).unwrap();
            let r = a.dot(&x) - &b;
            let rel = r.iter().map(|v| v * v).sum::<f64>().sqrt()
                / b.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(rel < 1e-10, "n={n} rel={rel}");
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = ndarray::array![[1.0, 2.0], [2.0, 1.0]];
        assert!(Cholesky::factor(a.view()).is_none());
        assert!(matches!(
            Cholesky::factor_with_jitter(a.view()),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn singular_psd_matrix_gets_jitter() {
        let a = ndarray::array![[1.0, 1.0], [1.0, 1.0]];
        let c = Cholesky::factor_with_jitter(a.view()).unwrap();
        assert!(c.jitter() > 0.0 && c.jitter() <= 1e-4);
    }
}
