//! Synthetic data: four structural causal models, the linear toy task and
//! the nonlinear shortcut task, all with retained exogenous noise so that
//! any row can be regenerated under an intervention on `Z`.
//!
//! Values are generated on their natural scale; [`Standardizer`] maps them
//! to zero mean and unit variance with statistics from a training split.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviation of `ε_A` and `ε_B`, read from `N(0, 0.1)`.
pub const SCM_NOISE_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    Uni1,
    Uni2,
    Multi1,
    Multi2,
    Toy,
    Nonlinear,
}

impl Case {
    pub fn is_scm(self) -> bool {
        matches!(self, Case::Uni1 | Case::Uni2 | Case::Multi1 | Case::Multi2)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Case::Uni1 => "uni1",
            Case::Uni2 => "uni2",
            Case::Multi1 => "multi1",
            Case::Multi2 => "multi2",
            Case::Toy => "toy",
            Case::Nonlinear => "nonlinear",
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uni1" => Ok(Case::Uni1),
            "uni2" => Ok(Case::Uni2),
            "multi1" => Ok(Case::Multi1),
            "multi2" => Ok(Case::Multi2),
            "toy" => Ok(Case::Toy),
            "nonlinear" => Ok(Case::Nonlinear),
            other => Err(Error::usage(format!("unknown case '{other}'"))),
        }
    }
}

/// Exogenous draws kept alongside a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Noises {
    Scm {
        eps_a: Array1<f64>,
        eps_b: Array1<f64>,
        eps_z: Array2<f64>,
    },
    Toy {
        xi1: Array1<f64>,
        xi2: Array1<f64>,
    },
    /// `y_drive` is the `Y` entering the shortcut coordinate: `Y` itself
    /// in-domain, an independent copy under shift.
    Nonlinear {
        xi_y: Array1<f64>,
        y_drive: Array1<f64>,
        alpha: f64,
    },
}

/// One dataset. For the structural models `a` is `A` and `b` is `B`; for
/// the toy and nonlinear tasks `a` holds the observed `x` and `b` the
/// target `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScmBatch {
    pub case: Case,
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub y: Array2<f64>,
    pub z: Array2<f64>,
    pub noises: Option<Noises>,
}

/// A single row regenerated by [`intervene_z`].
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub a: Array1<f64>,
    pub b: f64,
    pub y: Array1<f64>,
    pub z: Array1<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| {
        let g: f64 = StandardNormal.sample(rng);
        std * g
    })
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| {
        let g: f64 = StandardNormal.sample(rng);
        std * g
    })
}

/// Structural equations for `(A, B)` given `(Y, Z)` and the noise of one row.
fn structural_ab(case: Case, y: ArrayView1<f64>, z: ArrayView1<f64>, eps_a: f64, eps_b: f64) -> (Array1<f64>, f64) {
    match case {
        Case::Uni1 => {
            let (yv, zv) = (y[0], z[0]);
            let a = 0.5 * zv * eps_a + 2.0 * yv;
            let ay = a * yv;
            let b = 0.5 * (-ay).exp() * (2.0 * ay).sin() + 5.0 * zv + 0.2 * eps_b;
            (Array1::from_elem(1, a), b)
        }
        Case::Uni2 => {
            let (yv, zv) = (y[0], z[0]);
            let a = (-0.5 * zv * zv).exp() * (2.0 * zv).sin() + 2.0 * yv + 0.2 * eps_a;
            let ay = a * yv;
            let b = (2.0 * ay).sin() * (-0.5 * ay).exp() + 5.0 * zv + 0.2 * eps_b;
            (Array1::from_elem(1, a), b)
        }
        Case::Multi1 => {
            let yv = y[0];
            let zsum = z.sum();
            let a = (-0.5 * z[0]).exp() + zsum * yv.sin() + 0.1 * eps_a;
            let b = (-0.5 * z[1]).exp() * zsum + a * yv + 0.1 * eps_b;
            (Array1::from_elem(1, a), b)
        }
        Case::Multi2 => {
            let zv = z[0];
            let ysum = y.sum();
            let a = (-0.5 * zv).exp() + ysum.sin() * zv + 0.1 * eps_a;
            let b = (-0.5 * zv).exp() * zv + ysum + zv + a * y[0] + 0.1 * eps_b;
            (Array1::from_elem(1, a), b)
        }
        Case::Toy | Case::Nonlinear => unreachable!("not a structural model"),
    }
}

/// Draws `n` rows of one of the four structural models. `d` is the
/// dimension of `Z` (multi1) or `Y` (multi2) and is ignored otherwise.
pub fn gen_scm(case: Case, n: usize, d: usize, seed: u64) -> Result<ScmBatch> {
    if !case.is_scm() {
        return Err(Error::usage(format!("'{case}' is not a structural model case")));
    }
    if n == 0 {
        return Err(Error::usage("cannot generate an empty batch"));
    }
    let multi = matches!(case, Case::Multi1 | Case::Multi2);
    if multi && d < 2 {
        return Err(Error::usage(format!("multivariate cases need d >= 2, got {d}")));
    }
    let (dy, dz) = match case {
        Case::Multi1 => (1, d),
        Case::Multi2 => (d, 1),
        _ => (1, 1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = normal_matrix(&mut rng, n, dy, 1.0);
    let eps_z = normal_matrix(&mut rng, n, dz, 1.0);
    let eps_a = normal_vec(&mut rng, n, SCM_NOISE_STD);
    let eps_b = normal_vec(&mut rng, n, SCM_NOISE_STD);
    let z = match case {
        Case::Multi2 => {
            let norm2 = y.mapv(|v| v * v).sum_axis(Axis(1)).insert_axis(Axis(1));
            norm2 + &eps_z
        }
        _ => {
            let y2 = y.column(0).mapv(|v| v * v).insert_axis(Axis(1));
            &eps_z + &y2
        }
    };
    let mut a = Array2::zeros((n, 1));
    let mut b = Array1::zeros(n);
    for i in 0..n {
        let (ai, bi) = structural_ab(case, y.row(i), z.row(i), eps_a[i], eps_b[i]);
        a.row_mut(i).assign(&ai);
        b[i] = bi;
    }
    Ok(ScmBatch {
        case,
        a,
        b,
        y,
        z,
        noises: Some(Noises::Scm { eps_a, eps_b, eps_z }),
    })
}

/// The linear toy task.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBatch {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub z: Array2<f64>,
    pub xi1: Array1<f64>,
    pub xi2: Array1<f64>,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub sigmaz_sq: f64,
    pub shifted: bool,
}

impl ToyBatch {
    pub fn into_batch(self) -> ScmBatch {
        ScmBatch {
            case: Case::Toy,
            b: self.y.column(0).to_owned(),
            a: self.x,
            y: self.y,
            z: self.z,
            noises: Some(Noises::Toy {
                xi1: self.xi1,
                xi2: self.xi2,
            }),
        }
    }
}

fn check_variance(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::usage(format!("{name} must be positive, got {v}")))
    }
}

/// `z ~ N(0, σ_z²)`, `y = z + ξ₁`, `x = (y + ξ₂, z)`. Under `shifted` an
/// independent `z'` drives `y` while `x` still carries `z`.
pub fn gen_toy(n: usize, sigma1_sq: f64, sigma2_sq: f64, sigmaz_sq: f64, shifted: bool, seed: u64) -> Result<ToyBatch> {
    check_variance("sigma1^2", sigma1_sq)?;
    check_variance("sigma2^2", sigma2_sq)?;
    check_variance("sigmaz^2", sigmaz_sq)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = normal_vec(&mut rng, n, sigmaz_sq.sqrt());
    let xi1 = normal_vec(&mut rng, n, sigma1_sq.sqrt());
    let xi2 = normal_vec(&mut rng, n, sigma2_sq.sqrt());
    let z_prime = normal_vec(&mut rng, n, sigmaz_sq.sqrt());
    let drive = if shifted { &z_prime } else { &z };
    let y = drive + &xi1;
    let mut x = Array2::zeros((n, 2));
    x.column_mut(0).assign(&(&y + &xi2));
    x.column_mut(1).assign(&z);
    Ok(ToyBatch {
        x,
        y: y.insert_axis(Axis(1)),
        z: z.insert_axis(Axis(1)),
        xi1,
        xi2,
        sigma1_sq,
        sigma2_sq,
        sigmaz_sq,
        shifted,
    })
}

/// `Y ~ U(0, 1)`, `ξ_z ~ N(0, σ_z²)`, `ξ_y ~ N(0, σ_y²)`,
/// `x = (Y + αξ_z², Y + ξ_y)`, `z = ξ_z`. Under `shifted` the first
/// coordinate is driven by an independent copy of `Y`.
pub fn gen_nonlinear_gcm_case(n: usize, alpha: f64, sigma_z: f64, sigma_y: f64, shifted: bool, seed: u64) -> Result<ScmBatch> {
    check_variance("alpha", alpha)?;
    check_variance("sigma_z", sigma_z)?;
    check_variance("sigma_y", sigma_y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unif = Uniform::new(0.0, 1.0).expect("valid range");
    let y = Array1::from_shape_fn(n, |_| unif.sample(&mut rng));
    let xi_z = normal_vec(&mut rng, n, sigma_z);
    let xi_y = normal_vec(&mut rng, n, sigma_y);
    let y_copy = Array1::from_shape_fn(n, |_| unif.sample(&mut rng));
    let y_drive = if shifted { y_copy } else { y.clone() };
    let mut x = Array2::zeros((n, 2));
    x.column_mut(0).assign(&(&y_drive + &xi_z.mapv(|v| alpha * v * v)));
    x.column_mut(1).assign(&(&y + &xi_y));
    Ok(ScmBatch {
        case: Case::Nonlinear,
        a: x,
        b: y.clone(),
        y: y.insert_axis(Axis(1)),
        z: xi_z.insert_axis(Axis(1)),
        noises: Some(Noises::Nonlinear { xi_y, y_drive, alpha }),
    })
}

/// Regenerates row `i` with `Z` set to `z_new`, reusing its exogenous noise.
/// `Y` is never changed.
pub fn intervene_z(batch: &ScmBatch, i: usize, z_new: ArrayView1<f64>) -> Result<Point> {
    let noises = batch
        .noises
        .as_ref()
        .ok_or_else(|| Error::usage("batch carries no exogenous noise; cannot intervene"))?;
    if i >= batch.len() {
        return Err(Error::usage(format!("row {i} out of range for batch of {}", batch.len())));
    }
    if z_new.len() != batch.z.ncols() {
        return Err(Error::usage(format!(
            "intervention value has dimension {}, expected {}",
            z_new.len(),
            batch.z.ncols()
        )));
    }
    let y = batch.y.row(i).to_owned();
    let (a, b) = match noises {
        Noises::Scm { eps_a, eps_b, .. } => structural_ab(batch.case, y.view(), z_new, eps_a[i], eps_b[i]),
        Noises::Toy { xi2, .. } => (Array1::from_vec(vec![y[0] + xi2[i], z_new[0]]), y[0]),
        Noises::Nonlinear { xi_y, y_drive, alpha } => (
            Array1::from_vec(vec![y_drive[i] + alpha * z_new[0] * z_new[0], y[0] + xi_y[i]]),
            y[0],
        ),
    };
    Ok(Point {
        a,
        b,
        y,
        z: z_new.to_owned(),
    })
}

impl ScmBatch {
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    /// Predictor inputs: `(A, Y, Z)` for the structural models, `x` otherwise.
    pub fn inputs(&self) -> Array2<f64> {
        inputs_of(self.case, self.a.view(), self.y.view(), self.z.view())
    }

    /// Rows `idx` as a new batch, noises included.
    pub fn select(&self, idx: &[usize]) -> ScmBatch {
        let noises = self.noises.as_ref().map(|n| match n {
            Noises::Scm { eps_a, eps_b, eps_z } => Noises::Scm {
                eps_a: eps_a.select(Axis(0), idx),
                eps_b: eps_b.select(Axis(0), idx),
                eps_z: eps_z.select(Axis(0), idx),
            },
            Noises::Toy { xi1, xi2 } => Noises::Toy {
                xi1: xi1.select(Axis(0), idx),
                xi2: xi2.select(Axis(0), idx),
            },
            Noises::Nonlinear { xi_y, y_drive, alpha } => Noises::Nonlinear {
                xi_y: xi_y.select(Axis(0), idx),
                y_drive: y_drive.select(Axis(0), idx),
                alpha: *alpha,
            },
        });
        ScmBatch {
            case: self.case,
            a: self.a.select(Axis(0), idx),
            b: self.b.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
            z: self.z.select(Axis(0), idx),
            noises,
        }
    }

    /// Contiguous row range.
    pub fn slice(&self, start: usize, end: usize) -> ScmBatch {
        self.select(&(start..end).collect::<Vec<_>>())
    }

    /// Writes one row per sample with columns `a0.., b, y0.., z0..`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv_to(std::io::BufWriter::new(file))
    }

    pub fn write_csv_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.a.ncols()).map(|j| format!("a{j}")).collect();
        header.push("b".into());
        header.extend((0..self.y.ncols()).map(|j| format!("y{j}")));
        header.extend((0..self.z.ncols()).map(|j| format!("z{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.a.row(i).iter().map(|v| v.to_string()).collect();
            row.push(self.b[i].to_string());
            row.extend(self.y.row(i).iter().map(|v| v.to_string()));
            row.extend(self.z.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn inputs_of(case: Case, a: ArrayView2<f64>, y: ArrayView2<f64>, z: ArrayView2<f64>) -> Array2<f64> {
    if case.is_scm() {
        concatenate![Axis(1), a, y, z]
    } else {
        a.to_owned()
    }
}

/// Per-column affine maps for `a`, `b`, `y` and `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub a: (Vec<f64>, Vec<f64>),
    pub b: (f64, f64),
    pub y: (Vec<f64>, Vec<f64>),
    pub z: (Vec<f64>, Vec<f64>),
}

fn column_stats(m: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows() as f64;
    let mean = m.mean_axis(Axis(0)).expect("nonempty");
    let std: Vec<f64> = m
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, mu)| {
            let v = c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            let s = v.sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean.to_vec(), std)
}

fn apply_cols(m: ArrayView2<f64>, stats: &(Vec<f64>, Vec<f64>)) -> Array2<f64> {
    let mut out = m.to_owned();
    for (j, mut c) in out.columns_mut().into_iter().enumerate() {
        let (mu, sd) = (stats.0[j], stats.1[j]);
        c.mapv_inplace(|v| (v - mu) / sd);
    }
    out
}

impl Standardizer {
    /// Statistics of a training split.
    pub fn fit(train: &ScmBatch) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::usage("standardization needs at least 2 rows"));
        }
        let (bm, bs) = column_stats(train.b.view().insert_axis(Axis(1)));
        Ok(Standardizer {
            a: column_stats(train.a.view()),
            b: (bm[0], bs[0]),
            y: column_stats(train.y.view()),
            z: column_stats(train.z.view()),
        })
    }

    /// The identity map for a batch of the given shape.
    pub fn identity(batch: &ScmBatch) -> Self {
        let id = |d: usize| (vec![0.0; d], vec![1.0; d]);
        Standardizer {
            a: id(batch.a.ncols()),
            b: (0.0, 1.0),
            y: id(batch.y.ncols()),
            z: id(batch.z.ncols()),
        }
    }

    /// Applies the stored maps; noises are carried over unchanged.
    pub fn apply(&self, batch: &ScmBatch) -> Result<ScmBatch> {
        if batch.a.ncols() != self.a.0.len() || batch.y.ncols() != self.y.0.len() || batch.z.ncols() != self.z.0.len() {
            return Err(Error::usage("batch shape differs from the standardization statistics"));
        }
        Ok(ScmBatch {
            case: batch.case,
            a: apply_cols(batch.a.view(), &self.a),
            b: batch.b.mapv(|v| (v - self.b.0) / self.b.1),
            y: apply_cols(batch.y.view(), &self.y),
            z: apply_cols(batch.z.view(), &self.z),
            noises: None,
        })
    }

    /// Standardized predictor inputs of raw `(a, y, z)` rows.
    pub fn inputs(&self, case: Case, a: ArrayView2<f64>, y: ArrayView2<f64>, z: ArrayView2<f64>) -> Array2<f64> {
        inputs_of(
            case,
            apply_cols(a, &self.a).view(),
            apply_cols(y, &self.y).view(),
            apply_cols(z, &self.z).view(),
        )
    }
}

/// Train/eval split with the holdout carved from the front of the training
/// rows.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: ScmBatch,
    pub eval: ScmBatch,
    pub holdout: ScmBatch,
}

/// First `n_train` rows train, the rest evaluate; the first `holdout` of the
/// training rows form the holdout set, which is removed from training unless
/// `reuse_holdout` is set.
pub fn split(batch: &ScmBatch, n_train: usize, holdout: usize, reuse_holdout: bool) -> Result<Split> {
    let n = batch.len();
    if n_train >= n || n_train == 0 {
        return Err(Error::config(format!("train size {n_train} must lie in 1..{n}")));
    }
    if holdout >= n_train {
        return Err(Error::config(format!("holdout size {holdout} must be below the train size {n_train}")));
    }
    let hold = batch.slice(0, holdout);
    let train = if reuse_holdout {
        batch.slice(0, n_train)
    } else {
        batch.slice(holdout, n_train)
    };
    Ok(Split {
        train,
        eval: batch.slice(n_train, n),
        holdout: hold,
    })
}
