//! Experiment orchestration: counterfactual variance, Pareto fronts, sweeps
//! and the results CSV.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cme::{select_hyperparams, CmeModel, LooReport, DEFAULT_LAMBDA_GRID, DEFAULT_SIGMA2_GRID};
use crate::error::{Error, Result};
use crate::estimator::Variant;
use crate::kernels::KernelParams;
use crate::scm::{gen_nonlinear_gcm_case, gen_scm, gen_toy, intervene_z, split, Case, ScmBatch, Standardizer};
use crate::train::{evaluate_statistic, mse, train, DataSet, Method, Mlp, TrainConfig, TrainData, TrainLog};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_N_INTERVENTIONS: usize = 20;
/// Rows of the evaluation split used for the final statistic.
pub const STATISTIC_ROWS: usize = 1000;
const PREDICT_CHUNK: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VcfResult {
    pub value: f64,
    pub n_interventions: usize,
    pub n_points: usize,
}

/// Anything mapping a matrix of model inputs to predictions.
pub trait Predictor {
    fn predict_inputs(&self, inputs: ArrayView2<f64>) -> Result<Array1<f64>>;
}

impl Predictor for Mlp {
    fn predict_inputs(&self, inputs: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.predict(inputs)
    }
}

impl<F> Predictor for F
where
    F: Fn(ArrayView2<f64>) -> Array1<f64>,
{
    fn predict_inputs(&self, inputs: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self(inputs))
    }
}

/// Mean over points of the (unbiased) variance of the prediction across
/// `n_interventions` values `z'` resampled from the batch's `Z` column.
/// Inputs are rebuilt from the raw counterfactual rows through
/// `standardizer`.
pub fn eval_vcf<P: Predictor + ?Sized>(
    model: &P,
    batch: &ScmBatch,
    standardizer: &Standardizer,
    n_interventions: usize,
    seed: u64,
) -> Result<VcfResult> {
    if n_interventions < 2 {
        return Err(Error::usage("need at least 2 interventions per point"));
    }
    if batch.noises.is_none() {
        return Err(Error::usage("batch carries no exogenous noise; cannot intervene"));
    }
    let n = batch.len();
    if n == 0 {
        return Err(Error::usage("empty batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (da, dy, dz) = (batch.a.ncols(), batch.y.ncols(), batch.z.ncols());
    let total = n * n_interventions;
    let mut preds = Vec::with_capacity(total);
    let mut start = 0;
    while start < total {
        let end = (start + PREDICT_CHUNK).min(total);
        let m = end - start;
        let (mut a, mut y, mut z) = (Array2::zeros((m, da)), Array2::zeros((m, dy)), Array2::zeros((m, dz)));
        for r in 0..m {
            let i = (start + r) / n_interventions;
            let j = rng.random_range(0..n);
            let p = intervene_z(batch, i, batch.z.row(j))?;
            a.row_mut(r).assign(&p.a);
            y.row_mut(r).assign(&p.y);
            z.row_mut(r).assign(&p.z);
        }
        let inputs = standardizer.inputs(batch.case, a.view(), y.view(), z.view());
        preds.extend(model.predict_inputs(inputs.view())?);
        start = end;
    }
    let k = n_interventions as f64;
    let value = preds
        .chunks(n_interventions)
        .map(|c| {
            let mean = c.iter().sum::<f64>() / k;
            c.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (k - 1.0)
        })
        .sum::<f64>()
        / n as f64;
    if !value.is_finite() {
        return Err(Error::numerical("counterfactual variance is not finite"));
    }
    Ok(VcfResult {
        value,
        n_interventions,
        n_points: n,
    })
}

/// Indices of the points not dominated in `(mse, vcf)` (both minimized),
/// ordered by mse, then vcf, then index. Points with a NaN coordinate are
/// never on the front.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let mut front: Vec<usize> = (0..points.len())
        .filter(|&i| {
            let (m, v) = points[i];
            !m.is_nan()
                && !v.is_nan()
                && !points
                    .iter()
                    .any(|&(m2, v2)| m2 <= m && v2 <= v && (m2 < m || v2 < v))
        })
        .collect();
    front.sort_by(|&i, &j| {
        points[i]
            .0
            .total_cmp(&points[j].0)
            .then(points[i].1.total_cmp(&points[j].1))
            .then(i.cmp(&j))
    });
    front
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub case_id: String,
    pub method: Method,
    pub variant: Variant,
    pub gamma: f64,
    pub seed: u64,
    /// Ridge and bandwidths of the regularizer's regressions; NaN for
    /// `none`.
    pub lambda: f64,
    pub sigma2_y: f64,
    pub sigma2_z: f64,
    pub mse_in: f64,
    pub mse_ood: Option<f64>,
    pub vcf: f64,
    pub statistic_final: f64,
    pub unstable: bool,
    pub wall_seconds: f64,
}

fn record_fields(r: &RunRecord) -> [String; 15] {
    [
        SCHEMA_VERSION.to_string(),
        r.case_id.clone(),
        r.method.to_string(),
        r.variant.to_string(),
        r.gamma.to_string(),
        r.seed.to_string(),
        r.lambda.to_string(),
        r.sigma2_y.to_string(),
        r.sigma2_z.to_string(),
        r.mse_in.to_string(),
        r.mse_ood.map_or(String::new(), |v| v.to_string()),
        r.vcf.to_string(),
        r.statistic_final.to_string(),
        r.unstable.to_string(),
        r.wall_seconds.to_string(),
    ]
}

/// Writes the header and one row per record.
pub fn write_records<W: Write>(out: W, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.write_record(record_fields(r))?;
    }
    w.flush()?;
    Ok(())
}

pub const CSV_COLUMNS: [&str; 15] = [
    "schema_version",
    "case_id",
    "method",
    "variant",
    "gamma",
    "seed",
    "lambda",
    "sigma2_y",
    "sigma2_z",
    "mse_in",
    "mse_ood",
    "vcf",
    "statistic_final",
    "unstable",
    "wall_seconds",
];

pub fn read_records<R: Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_COLUMNS {
        return Err(Error::config(format!("unexpected results header {header:?}")));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        if row.get(0) != Some(&SCHEMA_VERSION.to_string()[..]) {
            return Err(Error::config(format!("unsupported schema version {:?}", row.get(0))));
        }
        let f = |k: usize| -> Result<f64> {
            let s = row.get(k).unwrap_or("");
            s.parse::<f64>().map_err(|_| Error::config(format!("bad number '{s}' in column {}", CSV_COLUMNS[k])))
        };
        let ood = row.get(10).unwrap_or("");
        out.push(RunRecord {
            case_id: row.get(1).unwrap_or("").to_owned(),
            method: row.get(2).unwrap_or("").parse()?,
            variant: row.get(3).unwrap_or("").parse()?,
            gamma: f(4)?,
            seed: row.get(5).unwrap_or("").parse().map_err(|_| Error::config("bad seed"))?,
            lambda: f(6)?,
            sigma2_y: f(7)?,
            sigma2_z: f(8)?,
            mse_in: f(9)?,
            mse_ood: if ood.is_empty() { None } else { Some(f(10)?) },
            vcf: f(11)?,
            statistic_final: f(12)?,
            unstable: row.get(13).unwrap_or("").parse().map_err(|_| Error::config("bad unstable flag"))?,
            wall_seconds: f(14)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySettings {
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub sigmaz_sq: f64,
}

impl Default for ToySettings {
    fn default() -> Self {
        ToySettings {
            sigma1_sq: 0.5,
            sigma2_sq: 1.0,
            sigmaz_sq: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonlinearSettings {
    pub alpha: f64,
    pub sigma_z: f64,
    pub sigma_y: f64,
}

impl Default for NonlinearSettings {
    fn default() -> Self {
        NonlinearSettings {
            alpha: 1.0,
            sigma_z: 1.0,
            sigma_y: 0.1,
        }
    }
}

/// Grid run description, read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub cases: Vec<Case>,
    pub methods: Vec<Method>,
    /// Shared γ grid; when absent each method uses its default grid.
    pub gammas: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub n_samples: usize,
    /// Fraction of rows kept for evaluation.
    pub eval_fraction: f64,
    /// Leading training rows used to fit the conditional mean model.
    pub holdout: usize,
    pub reuse_holdout: bool,
    /// Dimension of the vector-valued variable in multi1/multi2.
    pub dim: usize,
    pub n_interventions: usize,
    pub lambda_grid: Vec<f64>,
    pub sigma2_grid: Vec<f64>,
    /// Overrides of the per-case learning rate and weight decay.
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub train: TrainConfig,
    pub toy: ToySettings,
    pub nonlinear: NonlinearSettings,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            cases: vec![Case::Uni1],
            methods: vec![Method::None, Method::Circe],
            gammas: None,
            seeds: (0..5).collect(),
            n_samples: 10_000,
            eval_fraction: 0.2,
            holdout: 1000,
            reuse_holdout: false,
            dim: 5,
            n_interventions: DEFAULT_N_INTERVENTIONS,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            sigma2_grid: DEFAULT_SIGMA2_GRID.to_vec(),
            lr: None,
            weight_decay: None,
            train: TrainConfig::default(),
            toy: ToySettings::default(),
            nonlinear: NonlinearSettings::default(),
        }
    }
}

/// `points` values spaced evenly in log space over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

/// Default γ grid of a method: 10 points over `[1, 1e4]` for CIRCE and
/// HSCIC, over `[1e-2, 10^-0.5]` for GCM, and `{0}` without regularizer.
pub fn default_gammas(method: Method) -> Vec<f64> {
    match method {
        Method::None => vec![0.0],
        Method::Circe | Method::Hscic => log_grid(1.0, 1e4, 10),
        Method::Gcm => log_grid(1e-2, 10f64.powf(-0.5), 10),
    }
}

/// Decorrelates the streams derived from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Job {
    pub case: Case,
    pub method: Method,
    pub gamma: f64,
    pub seed: u64,
}

impl SweepConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: SweepConfig = serde_json::from_str(s).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let s = std::fs::read_to_string(p).map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
        Self::from_json_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_owned()));
        if self.cases.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return bad("cases, methods and seeds must be nonempty");
        }
        if let Some(g) = &self.gammas {
            if g.is_empty() || g.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return bad("gammas must be nonempty, finite and nonnegative");
            }
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad("eval_fraction must lie in (0, 1)");
        }
        let n_train = self.n_train();
        if n_train < 2 || self.n_samples - n_train < 2 {
            return bad("too few samples for the train/eval split");
        }
        if self.methods.contains(&Method::Circe) && (self.holdout < 2 || self.holdout >= n_train) {
            return bad("holdout must lie in 2..n_train");
        }
        if self.dim == 0 || self.n_interventions < 2 {
            return bad("dim must be positive and n_interventions at least 2");
        }
        if self.lambda_grid.is_empty()
            || self.sigma2_grid.is_empty()
            || self.lambda_grid.iter().chain(&self.sigma2_grid).any(|v| !(*v > 0.0) || !v.is_finite())
        {
            return bad("hyperparameter grids must be nonempty and positive");
        }
        self.train.validate()?;
        for (c, m) in self.cases.iter().flat_map(|c| self.methods.iter().map(move |m| (*c, *m))) {
            self.train_config(c, m, 1.0, 0).validate()?;
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        self.n_samples - (self.eval_fraction * self.n_samples as f64).round() as usize
    }

    pub fn gammas_for(&self, method: Method) -> Vec<f64> {
        if method == Method::None {
            return vec![0.0];
        }
        self.gammas.clone().unwrap_or_else(|| default_gammas(method))
    }

    /// Jobs in output order: case, method, γ, seed.
    pub fn jobs(&self) -> Vec<Job> {
        let mut out = Vec::new();
        for &case in &self.cases {
            for &method in &self.methods {
                for gamma in self.gammas_for(method) {
                    for &seed in &self.seeds {
                        out.push(Job { case, method, gamma, seed });
                    }
                }
            }
        }
        out
    }

    /// Trainer settings for one run; multivariate cases default to
    /// lr 3e-4 and weight decay 0.1, the rest to lr 1e-4 and 0.3.
    pub fn train_config(&self, case: Case, method: Method, gamma: f64, seed: u64) -> TrainConfig {
        let multi = matches!(case, Case::Multi1 | Case::Multi2);
        let (lr, wd) = if multi { (3e-4, 0.1) } else { (1e-4, 0.3) };
        TrainConfig {
            gamma,
            method,
            seed: derive_seed(seed, 1),
            lr: self.lr.unwrap_or(lr),
            weight_decay: self.weight_decay.unwrap_or(wd),
            ..self.train.clone()
        }
    }

    pub fn generate(&self, case: Case, n: usize, shifted: bool, seed: u64) -> Result<ScmBatch> {
        match case {
            Case::Toy => {
                let t = self.toy;
                Ok(gen_toy(n, t.sigma1_sq, t.sigma2_sq, t.sigmaz_sq, shifted, seed)?.into_batch())
            }
            Case::Nonlinear => {
                let s = self.nonlinear;
                gen_nonlinear_gcm_case(n, s.alpha, s.sigma_z, s.sigma_y, shifted, seed)
            }
            c => gen_scm(c, n, self.dim, seed),
        }
    }
}

/// Standardized arrays of a batch.
pub fn dataset(batch: &ScmBatch, standardizer: &Standardizer) -> Result<DataSet> {
    let s = standardizer.apply(batch)?;
    Ok(DataSet {
        inputs: s.inputs(),
        target: s.b.clone(),
        y: s.y,
        z: s.z,
    })
}

/// Everything produced by one run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    pub model: Mlp,
    pub log: TrainLog,
    pub cme: Option<(CmeModel, LooReport)>,
}

/// Data for one run: the raw eval batch (for interventions), the
/// standardizer and the trainer's arrays.
pub struct Prepared {
    pub eval_raw: ScmBatch,
    pub standardizer: Standardizer,
    pub data: TrainData,
    pub holdout: DataSet,
}

pub fn prepare(config: &SweepConfig, case: Case, seed: u64) -> Result<Prepared> {
    let batch = config.generate(case, config.n_samples, false, derive_seed(seed, 0))?;
    let n_train = config.n_train();
    let holdout = config.holdout.clamp(1, n_train - 1);
    let parts = split(&batch, n_train, holdout, config.reuse_holdout)?;
    // the toy and nonlinear tasks are already on unit scale
    let standardizer = if case.is_scm() {
        Standardizer::fit(&parts.train)?
    } else {
        Standardizer::identity(&parts.train)
    };
    let ood = if case.is_scm() {
        None
    } else {
        let shifted = config.generate(case, config.n_samples - n_train, true, derive_seed(seed, 2))?;
        Some(dataset(&shifted, &standardizer)?)
    };
    Ok(Prepared {
        data: TrainData {
            train: dataset(&parts.train, &standardizer)?,
            eval: Some(dataset(&parts.eval, &standardizer)?),
            ood,
        },
        holdout: dataset(&parts.holdout, &standardizer)?,
        eval_raw: parts.eval,
        standardizer,
    })
}

/// Fits the conditional mean model on the holdout split by closed-form LOO.
pub fn fit_holdout_cme(config: &SweepConfig, holdout: &DataSet) -> Result<(CmeModel, LooReport)> {
    select_hyperparams(
        holdout.y.view(),
        holdout.z.view(),
        &config.lambda_grid,
        &config.sigma2_grid,
        &KernelParams::gaussian(config.train.sigma2_z)?,
    )
}

/// One cell of the sweep.
pub fn run_single(config: &SweepConfig, job: Job) -> Result<RunOutput> {
    let started = Instant::now();
    let prep = prepare(config, job.case, job.seed)?;
    let tc = config.train_config(job.case, job.method, job.gamma, job.seed);
    let cme = if job.method == Method::Circe {
        Some(fit_holdout_cme(config, &prep.holdout)?)
    } else {
        None
    };
    let (model, log) = train(&tc, &prep.data, cme.as_ref().map(|c| &c.0))?;
    let eval = prep.data.eval.as_ref().expect("eval split");
    let mse_in = mse(&model, eval)?;
    let mse_ood = prep.data.ood.as_ref().map(|d| mse(&model, d)).transpose()?;
    let vcf = eval_vcf(&model, &prep.eval_raw, &prep.standardizer, config.n_interventions, derive_seed(job.seed, 3))?.value;
    let statistic_final = evaluate_statistic(&model, eval, cme.as_ref().map(|c| &c.0), &tc, STATISTIC_ROWS)?;
    let (lambda, sigma2_y, sigma2_z) = match (&cme, job.method) {
        (Some((m, _)), _) => (m.lambda(), m.y_params().sigma2(), m.z_params().sigma2()),
        (None, Method::Hscic | Method::Gcm) => (tc.baseline_lambda, tc.baseline_sigma2_y, tc.sigma2_z),
        _ => (f64::NAN, f64::NAN, f64::NAN),
    };
    let unstable = log.unstable() || !mse_in.is_finite();
    Ok(RunOutput {
        record: RunRecord {
            case_id: job.case.to_string(),
            method: job.method,
            variant: tc.variant,
            gamma: job.gamma,
            seed: job.seed,
            lambda,
            sigma2_y,
            sigma2_z,
            mse_in,
            mse_ood,
            vcf,
            statistic_final,
            unstable,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
        model,
        log,
        cme,
    })
}

fn failed_record(config: &SweepConfig, job: Job) -> RunRecord {
    RunRecord {
        case_id: job.case.to_string(),
        method: job.method,
        variant: config.train.variant,
        gamma: job.gamma,
        seed: job.seed,
        lambda: f64::NAN,
        sigma2_y: f64::NAN,
        sigma2_z: f64::NAN,
        mse_in: f64::NAN,
        mse_ood: None,
        vcf: f64::NAN,
        statistic_final: f64::NAN,
        unstable: true,
        wall_seconds: 0.0,
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    /// `(job index, message)` of runs that failed outright.
    pub failures: Vec<(usize, String)>,
}

impl SweepOutcome {
    pub fn any_unstable(&self) -> bool {
        self.records.iter().any(|r| r.unstable)
    }
}

/// Runs every job on up to `workers` threads. Configuration errors abort;
/// any other run failure becomes an unstable row. Rows come back in job
/// order, so the output does not depend on `workers`.
pub fn run_sweep(config: &SweepConfig, workers: usize) -> Result<SweepOutcome> {
    config.validate()?;
    let jobs = config.jobs();
    let run = |i: usize| (i, run_single(config, jobs[i]));
    let results: Vec<(usize, Result<RunOutput>)> = execute(jobs.len(), workers.max(1), run)?;
    let mut records = Vec::with_capacity(jobs.len());
    let mut failures = Vec::new();
    for (i, r) in results {
        match r {
            Ok(out) => records.push(out.record),
            Err(e @ (Error::Config(_) | Error::Usage(_))) => return Err(e),
            Err(e) => {
                failures.push((i, e.to_string()));
                records.push(failed_record(config, jobs[i]));
            }
        }
    }
    Ok(SweepOutcome { records, failures })
}

#[cfg(feature = "parallel")]
fn execute<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(&f).collect()))
}

#[cfg(not(feature = "parallel"))]
fn execute<T: Send>(n: usize, _workers: usize, f: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    Ok((0..n).map(f).collect())
}

/// Seed medians of one `(case, method, γ)` cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub case_id: String,
    pub method: Method,
    pub gamma: f64,
    pub runs: usize,
    pub unstable: usize,
    pub mse_in: f64,
    pub mse_ood: Option<f64>,
    pub vcf: f64,
    pub statistic_final: f64,
    pub pareto: bool,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Seed medians per cell, with the Pareto front of `(mse_in, vcf)` marked
/// within each case over all methods and γ values.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(String, &str, u64), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.case_id.clone(), r.method.as_str(), r.gamma.to_bits()))
            .or_default()
            .push(r);
    }
    let mut rows: Vec<SummaryRow> = cells
        .into_values()
        .map(|rs| {
            let col = |f: &dyn Fn(&RunRecord) -> f64| median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let ood: Vec<f64> = rs.iter().filter_map(|r| r.mse_ood).collect();
            SummaryRow {
                case_id: rs[0].case_id.clone(),
                method: rs[0].method,
                gamma: rs[0].gamma,
                runs: rs.len(),
                unstable: rs.iter().filter(|r| r.unstable).count(),
                mse_in: col(&|r| r.mse_in),
                mse_ood: (!ood.is_empty()).then(|| median(&ood)),
                vcf: col(&|r| r.vcf),
                statistic_final: col(&|r| r.statistic_final),
                pareto: false,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.case_id
            .cmp(&b.case_id)
            .then(a.method.as_str().cmp(b.method.as_str()))
            .then(a.gamma.total_cmp(&b.gamma))
    });
    let mut start = 0;
    while start < rows.len() {
        let end = start + rows[start..].iter().take_while(|r| r.case_id == rows[start].case_id).count();
        let pts: Vec<(f64, f64)> = rows[start..end].iter().map(|r| (r.mse_in, r.vcf)).collect();
        for i in pareto_front(&pts) {
            rows[start + i].pareto = true;
        }
        start = end;
    }
    rows
}

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text table of a summary.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<10} {:<6} {:>10} {:>4} {:>11} {:>11} {:>11} {:>11}  pareto\n",
        "case", "method", "gamma", "n", "mse_in", "mse_ood", "vcf", "statistic"
    );
    for r in rows {
        let ood = r.mse_ood.map_or("-".to_owned(), |v| format!("{v:.4e}"));
        s.push_str(&format!(
            "{:<10} {:<6} {:>10.4} {:>4} {:>11.4e} {:>11} {:>11.4e} {:>11.4e}  {}\n",
            r.case_id,
            r.method.as_str(),
            r.gamma,
            r.runs,
            r.mse_in,
            ood,
            r.vcf,
            r.statistic_final,
            if r.pareto { "*" } else { "" }
        ));
    }
    s
}
