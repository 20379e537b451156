//! Fully connected regressor, Adam/AdamW, and the regularized objective
//! `MSE + γ·statistic`.
//!
//! The statistic is taken on a batch "representation" (by default the scalar
//! prediction) through a Gaussian Gram matrix, and its gradient is pushed
//! back into the network by hand.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_value_and_grad, Baseline, BaselineInputs};
use crate::cme::CmeModel;
use crate::error::{Error, Result};
use crate::estimator::{assemble, kxx_weights, statistic_value, CenteredGram, Variant};
use crate::kernels::{gaussian_gram_backward, gram_matrix, KernelParams};
use crate::rff::{rff_centered_gram, RffSchedule};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    None,
    Circe,
    Hscic,
    Gcm,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Circe => "circe",
            Method::Hscic => "hscic",
            Method::Gcm => "gcm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Method::None),
            "circe" => Ok(Method::Circe),
            "hscic" => Ok(Method::Hscic),
            "gcm" => Ok(Method::Gcm),
            other => Err(Error::usage(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Adamw,
}

/// Which batch representation the statistic sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RegTarget {
    #[default]
    Prediction,
    Features,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RffSettings {
    pub d_total: usize,
    /// Features used per batch; `None` means all of them.
    pub d_active: Option<usize>,
    /// Batches between redraws; `None` never redraws.
    pub refresh_period: Option<usize>,
}

impl Default for RffSettings {
    fn default() -> Self {
        RffSettings {
            d_total: 512,
            d_active: None,
            refresh_period: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub method: Method,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub variant: Variant,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub reg_target: RegTarget,
    /// Bandwidth of the Gaussian kernel on the regularized representation.
    pub sigma2_x: f64,
    /// Ridge and `Y` bandwidth of the per-batch HSCIC/GCM regressions.
    pub baseline_lambda: f64,
    pub baseline_sigma2_y: f64,
    /// `Z` bandwidth for HSCIC (CIRCE takes it from the fitted model).
    pub sigma2_z: f64,
    /// Random Fourier features for CIRCE; `None` uses the exact estimator.
    pub rff: Option<RffSettings>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.0,
            method: Method::None,
            batch_size: 256,
            epochs: 100,
            lr: 1e-4,
            weight_decay: 0.3,
            optimizer: OptimizerKind::Adamw,
            seed: 0,
            variant: Variant::Centered,
            hidden: vec![64; 9],
            leaky_slope: DEFAULT_SLOPE,
            reg_target: RegTarget::Prediction,
            sigma2_x: 1.0,
            baseline_lambda: 0.1,
            baseline_sigma2_y: 1.0,
            sigma2_z: 1.0,
            rff: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be a finite nonnegative number, got {}", self.gamma));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if matches!(self.method, Method::Hscic | Method::Gcm) && self.batch_size < 8 {
            return bad("HSCIC and GCM need a batch size of at least 8".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be positive and weight decay nonnegative".into());
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return bad("hidden widths must be positive".into());
        }
        if !(self.leaky_slope >= 0.0) {
            return bad("leaky slope must be nonnegative".into());
        }
        if self.reg_target == RegTarget::Features && self.hidden.is_empty() {
            return bad("feature-level regularization needs a hidden layer".into());
        }
        for (name, v) in [
            ("sigma2_x", self.sigma2_x),
            ("baseline_lambda", self.baseline_lambda),
            ("baseline_sigma2_y", self.baseline_sigma2_y),
            ("sigma2_z", self.sigma2_z),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if let Some(r) = &self.rff {
            if r.d_total == 0 || r.d_active.is_some_and(|d| d == 0 || d > r.d_total) || r.refresh_period == Some(0) {
                return bad("invalid random Fourier feature settings".into());
            }
        }
        Ok(())
    }

    fn x_params(&self) -> Result<KernelParams> {
        KernelParams::gaussian(self.sigma2_x)
    }
}

/// Fully connected network with leaky-ReLU hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    /// `weights[l]` maps layer `l` to layer `l+1` and is `in × out`.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    slope: f64,
    seed: u64,
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Input of the output layer: the last hidden activations, or the raw
    /// inputs when there is no hidden layer.
    pub features: Array2<f64>,
    pub prediction: Array1<f64>,
}

/// Activations kept for the backward pass.
struct Cache {
    /// `acts[0]` is the input, `acts[l]` the output of layer `l`.
    acts: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Grads {
    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &Grads) -> f64 {
        let mut m = 0.0_f64;
        for (a, b) in self.weights.iter().zip(&other.weights) {
            m = a.iter().zip(b).fold(m, |m, (x, y)| m.max((x - y).abs()));
        }
        for (a, b) in self.biases.iter().zip(&other.biases) {
            m = a.iter().zip(b).fold(m, |m, (x, y)| m.max((x - y).abs()));
        }
        m
    }
}

impl Mlp {
    /// PyTorch-style initialization: every weight and bias uniform on
    /// `±1/√fan_in`.
    pub fn new(widths: &[usize], slope: f64, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::usage(format!("invalid layer widths {widths:?}")));
        }
        if *widths.last().expect("nonempty") != 1 {
            return Err(Error::usage("the output layer must have width 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("valid bound");
            weights.push(Array2::from_shape_fn((w[0], w[1]), |_| u.sample(&mut rng)));
            biases.push(Array1::from_shape_fn(w[1], |_| u.sample(&mut rng)));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            weights,
            biases,
            slope,
            seed,
        })
    }

    /// Builds a network from explicit parameters.
    pub fn from_parts(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>, slope: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::usage("need one bias per weight matrix"));
        }
        let mut widths = vec![weights[0].nrows()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.nrows() != *widths.last().expect("nonempty") || w.ncols() != b.len() {
                return Err(Error::usage("inconsistent layer shapes"));
            }
            widths.push(w.ncols());
        }
        if *widths.last().expect("nonempty") != 1 {
            return Err(Error::usage("the output layer must have width 1"));
        }
        Ok(Mlp {
            widths,
            weights,
            biases,
            slope,
            seed: 0,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Visits every parameter as a flat slice, weights before biases per layer.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn forward_cached(&self, inputs: ArrayView2<f64>) -> Result<Cache> {
        if inputs.ncols() != self.widths[0] {
            return Err(Error::usage(format!(
                "input has {} columns, network expects {}",
                inputs.ncols(),
                self.widths[0]
            )));
        }
        let layers = self.weights.len();
        let mut acts = vec![inputs.to_owned()];
        let mut pre = Vec::with_capacity(layers);
        for l in 0..layers {
            let z = acts[l].dot(&self.weights[l]) + &self.biases[l];
            let a = if l + 1 < layers {
                let slope = self.slope;
                z.mapv(|v| if v > 0.0 { v } else { slope * v })
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(a);
        }
        Ok(Cache { acts, pre })
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Forward> {
        let mut cache = self.forward_cached(inputs)?;
        let out = cache.acts.pop().expect("output layer");
        let features = cache.acts.pop().expect("penultimate layer");
        Ok(Forward {
            features,
            prediction: out.column(0).to_owned(),
        })
    }

    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(inputs)?.prediction)
    }

    /// Backpropagates `d_pred` (per-sample derivative of the loss with
    /// respect to the prediction) and optionally `d_features`.
    fn backward(&self, cache: &Cache, d_pred: ArrayView1<f64>, d_features: Option<ArrayView2<f64>>) -> Grads {
        let layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); layers];
        let mut gb = vec![Array1::zeros(0); layers];
        let mut delta = d_pred.to_owned().insert_axis(Axis(1));
        for l in (0..layers).rev() {
            gw[l] = cache.acts[l].t().dot(&delta).as_standard_layout().into_owned();
            gb[l] = delta.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let mut d_act = delta.dot(&self.weights[l].t());
            if l + 1 == layers {
                if let Some(df) = d_features {
                    d_act += &df;
                }
            }
            let slope = self.slope;
            ndarray::Zip::from(&mut d_act)
                .and(&cache.pre[l - 1])
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d *= slope;
                    }
                });
            delta = d_act;
        }
        Grads { weights: gw, biases: gb }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &Checkpoint { version: CHECKPOINT_VERSION, model: self.clone() })?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!("unsupported checkpoint version {}", ck.version)));
        }
        let m = ck.model;
        let rebuilt = Mlp::from_parts(m.weights.clone(), m.biases.clone(), m.slope)?;
        if rebuilt.widths != m.widths {
            return Err(Error::config("checkpoint widths disagree with its parameters"));
        }
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: Mlp,
}

/// Adam moments for every parameter slice.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(model: &Mlp) -> Self {
        let sizes: Vec<usize> = model
            .weights
            .iter()
            .zip(&model.biases)
            .flat_map(|(w, b)| [w.len(), b.len()])
            .collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One Adam (L2 decay added to the gradient) or AdamW (decoupled decay
/// `θ ← θ − lr·wd·θ`) update.
pub fn optimizer_step(state: &mut AdamState, model: &mut Mlp, grads: &Grads, kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<()> {
    let flat: Vec<&[f64]> = grads
        .weights
        .iter()
        .zip(&grads.biases)
        .flat_map(|(w, b)| [w.as_slice().expect("standard layout"), b.as_slice().expect("standard layout")])
        .collect();
    if flat.len() != state.m.len() || flat.iter().zip(&state.m).any(|(g, m)| g.len() != m.len()) {
        return Err(Error::usage("gradient shapes do not match the optimizer state"));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (k, theta) in model.params_mut().into_iter().enumerate() {
        let (m, v, g) = (&mut state.m[k], &mut state.v[k], flat[k]);
        for i in 0..theta.len() {
            let mut gi = g[i];
            match kind {
                OptimizerKind::Adam => gi += weight_decay * theta[i],
                OptimizerKind::Adamw => theta[i] -= lr * weight_decay * theta[i],
            }
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            theta[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// How the statistic is evaluated for one batch.
pub enum Penalty<'a> {
    None,
    Circe {
        cg: CenteredGram,
        variant: Variant,
    },
    Baseline {
        which: Baseline,
        y: ArrayView2<'a, f64>,
        z: ArrayView2<'a, f64>,
        y_params: KernelParams,
        z_params: KernelParams,
        lambda: f64,
    },
}

#[derive(Clone, Debug)]
pub struct LossAndGrad {
    pub loss: f64,
    pub mse: f64,
    /// Value entering the objective; for GCM this is the smooth maximum.
    pub statistic: f64,
    pub grads: Grads,
    pub finite: bool,
}

/// Value and representation-gradient of a penalty.
fn penalty_value_and_grad(penalty: &Penalty, rep: ArrayView2<f64>, x_params: &KernelParams) -> Result<(f64, Array2<f64>)> {
    match penalty {
        Penalty::None => Ok((0.0, Array2::zeros(rep.dim()))),
        Penalty::Circe { cg, variant } => {
            let kxx = gram_matrix(rep, rep, x_params);
            let value = statistic_value(kxx.view(), cg, *variant)?;
            let g = kxx_weights(cg, *variant);
            Ok((value, gaussian_gram_backward(rep, kxx.view(), g.view(), x_params)))
        }
        Penalty::Baseline {
            which,
            y,
            z,
            y_params,
            z_params,
            lambda,
        } => baseline_value_and_grad(
            *which,
            &BaselineInputs {
                x_feats: rep,
                z: *z,
                y: *y,
                x_params: *x_params,
                z_params: *z_params,
                y_params: *y_params,
                lambda: *lambda,
            },
        ),
    }
}

/// `MSE(prediction, target) + γ·statistic(representation)` and its
/// parameter gradient.
pub fn loss_and_grad(model: &Mlp, inputs: ArrayView2<f64>, target: ArrayView1<f64>, penalty: &Penalty, config: &TrainConfig) -> Result<LossAndGrad> {
    let b = inputs.nrows();
    if target.len() != b || b == 0 {
        return Err(Error::usage("inputs and target differ in length"));
    }
    let cache = model.forward_cached(inputs)?;
    let layers = model.weights.len();
    let pred = cache.acts[layers].column(0);
    let resid = &pred - &target;
    let mse = resid.mapv(|r| r * r).sum() / b as f64;
    let mut d_pred = resid.mapv(|r| 2.0 * r / b as f64);
    let mut d_features = None;
    let mut statistic = 0.0;
    let active = config.gamma > 0.0 && !matches!(penalty, Penalty::None);
    if active {
        let x_params = config.x_params()?;
        let rep = match config.reg_target {
            RegTarget::Prediction => pred.to_owned().insert_axis(Axis(1)),
            RegTarget::Features => cache.acts[layers - 1].clone(),
        };
        let (value, grad) = penalty_value_and_grad(penalty, rep.view(), &x_params)?;
        statistic = value;
        match config.reg_target {
            RegTarget::Prediction => d_pred.scaled_add(config.gamma, &grad.column(0)),
            RegTarget::Features => d_features = Some(grad * config.gamma),
        }
    }
    let grads = model.backward(&cache, d_pred.view(), d_features.as_ref().map(|d| d.view()));
    let loss = mse + if active { config.gamma * statistic } else { 0.0 };
    let finite = loss.is_finite() && grads.is_finite();
    Ok(LossAndGrad {
        loss,
        mse,
        statistic,
        grads,
        finite,
    })
}

/// Standardized arrays for one split.
#[derive(Clone, Debug)]
pub struct DataSet {
    pub inputs: Array2<f64>,
    pub target: Array1<f64>,
    pub y: Array2<f64>,
    pub z: Array2<f64>,
}

impl DataSet {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    fn rows(&self, idx: &[usize]) -> DataSet {
        DataSet {
            inputs: self.inputs.select(Axis(0), idx),
            target: self.target.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
            z: self.z.select(Axis(0), idx),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: DataSet,
    pub eval: Option<DataSet>,
    pub ood: Option<DataSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_mse: f64,
    pub mse_in: Option<f64>,
    pub mse_ood: Option<f64>,
    /// Mean statistic over the epoch's applied steps.
    pub statistic: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub skipped_steps: usize,
    /// Steps skipped for non-finite loss or gradients, as `(epoch, step)`.
    pub skip_events: Vec<(usize, usize)>,
}

impl TrainLog {
    /// More than 1% of steps skipped.
    pub fn unstable(&self) -> bool {
        self.steps > 0 && self.skipped_steps as f64 > 0.01 * self.steps as f64
    }

    pub fn final_statistic(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.statistic)
    }
}

pub fn mse(model: &Mlp, data: &DataSet) -> Result<f64> {
    let p = model.predict(data.inputs.view())?;
    Ok((&p - &data.target).mapv(|r| r * r).sum() / data.len() as f64)
}

/// Per-row factors of the conditionally centered Gram matrix:
/// `cross = L₁[b]·R₁[b]ᵀ` and `quad = L₂[b]·R₂[b]ᵀ` for any batch `b`.
struct CirceRows {
    l1: Array2<f64>,
    r1: Array2<f64>,
    l2: Array2<f64>,
    r2: Array2<f64>,
}

enum CirceSource {
    Rows(CirceRows),
    Schedule { schedule: RffSchedule, d_active: usize },
}

struct CirceContext {
    source: CirceSource,
    y_params: KernelParams,
    z_params: KernelParams,
}

impl CirceContext {
    fn new(model: &CmeModel, data: &DataSet, config: &TrainConfig) -> Result<Self> {
        if data.y.ncols() != model.holdout_y().ncols() || data.z.ncols() != model.holdout_z().ncols() {
            return Err(Error::config("training data dimensions do not match the conditional mean model"));
        }
        let (y, z) = (data.y.view(), data.z.view());
        let source = match &config.rff {
            None => {
                let ky = gram_matrix(y, model.holdout_y(), model.y_params());
                let kz = gram_matrix(z, model.holdout_z(), model.z_params());
                CirceSource::Rows(CirceRows {
                    l1: ky.dot(model.w1()),
                    r1: kz,
                    l2: ky.dot(model.w2()),
                    r2: ky,
                })
            }
            Some(r) => {
                let d_active = r.d_active.unwrap_or(r.d_total);
                let mut schedule = RffSchedule::new(Arc::new(model.clone()), r.d_total, config.seed, r.refresh_period)?;
                if d_active == r.d_total && r.refresh_period.is_none() {
                    let w = schedule.weights_for(0)?;
                    let ry = w.y_map().features(y)?;
                    let rz = w.z_map().features(z)?;
                    CirceSource::Rows(CirceRows {
                        l1: ry.dot(w.w1r()),
                        r1: rz,
                        l2: ry.dot(w.w2r()),
                        r2: ry,
                    })
                } else {
                    CirceSource::Schedule { schedule, d_active }
                }
            }
        };
        Ok(CirceContext {
            source,
            y_params: *model.y_params(),
            z_params: *model.z_params(),
        })
    }

    fn centered_gram(&mut self, data: &DataSet, idx: &[usize], step: u64) -> Result<CenteredGram> {
        let y = data.y.select(Axis(0), idx);
        let z = data.z.select(Axis(0), idx);
        match &mut self.source {
            CirceSource::Rows(rows) => {
                let pick = |m: &Array2<f64>| m.select(Axis(0), idx);
                let cross = pick(&rows.l1).dot(&pick(&rows.r1).t());
                let quad = pick(&rows.l2).dot(&pick(&rows.r2).t());
                let kyy = gram_matrix(y.view(), y.view(), &self.y_params);
                let kzz = gram_matrix(z.view(), z.view(), &self.z_params);
                Ok(assemble(&kyy, &kzz, &cross, &quad))
            }
            CirceSource::Schedule { schedule, d_active } => {
                let w = schedule.weights_for(step)?;
                rff_centered_gram(y.view(), z.view(), &w, *d_active, step)
            }
        }
    }
}

/// Full-network widths for this configuration and input dimension.
pub fn network_widths(config: &TrainConfig, input_dim: usize) -> Vec<usize> {
    let mut w = vec![input_dim];
    w.extend(&config.hidden);
    w.push(1);
    w
}

/// Minibatch training. Batches come from a ChaCha shuffle seeded by
/// `(seed, epoch)`; a trailing partial batch is used if it has at least 8
/// rows. With `γ = 0` the conditional mean model is never touched.
pub fn train(config: &TrainConfig, data: &TrainData, cme: Option<&CmeModel>) -> Result<(Mlp, TrainLog)> {
    config.validate()?;
    let n = data.train.len();
    if n < 2 {
        return Err(Error::config("training split needs at least 2 rows"));
    }
    let widths = network_widths(config, data.train.inputs.ncols());
    let mut model = Mlp::new(&widths, config.leaky_slope, config.seed)?;
    let mut state = AdamState::new(&model);
    let regularize = config.gamma > 0.0 && config.method != Method::None;
    let mut circe = match (regularize, config.method) {
        (true, Method::Circe) => {
            let m = cme.ok_or_else(|| Error::config("method 'circe' needs a fitted conditional mean model"))?;
            Some(CirceContext::new(m, &data.train, config)?)
        }
        _ => None,
    };
    let baseline_y = KernelParams::gaussian(config.baseline_sigma2_y)?;
    let baseline_z = KernelParams::gaussian(config.sigma2_z)?;
    let min_batch = 8.min(config.batch_size);

    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step: u64 = 0;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut mse_sum, mut stat_sum, mut applied, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for (k, idx) in order.chunks(config.batch_size).enumerate() {
            if idx.len() < min_batch && idx.len() < n {
                continue;
            }
            let batch = data.train.rows(idx);
            let penalty = if !regularize {
                Penalty::None
            } else {
                match config.method {
                    Method::Circe => Penalty::Circe {
                        cg: circe.as_mut().expect("context").centered_gram(&data.train, idx, step)?,
                        variant: config.variant,
                    },
                    Method::Hscic | Method::Gcm => Penalty::Baseline {
                        which: if config.method == Method::Hscic { Baseline::Hscic } else { Baseline::Gcm },
                        y: batch.y.view(),
                        z: batch.z.view(),
                        y_params: baseline_y,
                        z_params: baseline_z,
                        lambda: config.baseline_lambda,
                    },
                    Method::None => Penalty::None,
                }
            };
            step += 1;
            log.steps += 1;
            let out = match loss_and_grad(&model, batch.inputs.view(), batch.target.view(), &penalty, config) {
                Ok(o) if o.finite => Some(o),
                Ok(_) | Err(Error::Numerical(_)) => None,
                Err(e) => return Err(e),
            };
            let Some(out) = out else {
                skipped += 1;
                log.skipped_steps += 1;
                log.skip_events.push((epoch, k));
                continue;
            };
            optimizer_step(&mut state, &mut model, &out.grads, config.optimizer, config.lr, config.weight_decay)?;
            loss_sum += out.loss;
            mse_sum += out.mse;
            stat_sum += out.statistic;
            applied += 1;
        }
        let denom = applied.max(1) as f64;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / denom,
            train_mse: mse_sum / denom,
            mse_in: data.eval.as_ref().map(|d| mse(&model, d)).transpose()?,
            mse_ood: data.ood.as_ref().map(|d| mse(&model, d)).transpose()?,
            statistic: if regularize { stat_sum / denom } else { f64::NAN },
            skipped,
        });
    }
    Ok((model, log))
}

/// Statistic of the trained model's representation on `data` (first
/// `max_rows` rows), using the training configuration's estimator.
pub fn evaluate_statistic(model: &Mlp, data: &DataSet, cme: Option<&CmeModel>, config: &TrainConfig, max_rows: usize) -> Result<f64> {
    if config.method == Method::None {
        return Ok(f64::NAN);
    }
    let rows = data.len().min(max_rows);
    let idx: Vec<usize> = (0..rows).collect();
    let sub = data.rows(&idx);
    let fwd = model.forward(sub.inputs.view())?;
    let rep = match config.reg_target {
        RegTarget::Prediction => fwd.prediction.insert_axis(Axis(1)),
        RegTarget::Features => fwd.features,
    };
    let x_params = config.x_params()?;
    match config.method {
        Method::Circe => {
            let m = cme.ok_or_else(|| Error::config("method 'circe' needs a fitted conditional mean model"))?;
            let mut ctx = CirceContext::new(m, &sub, &TrainConfig { rff: None, ..config.clone() })?;
            let cg = ctx.centered_gram(&sub, &idx, 0)?;
            let kxx = gram_matrix(rep.view(), rep.view(), &x_params);
            statistic_value(kxx.view(), &cg, config.variant)
        }
        Method::Hscic => Ok(crate::baselines::hscic_statistic(
            rep.view(),
            sub.z.view(),
            sub.y.view(),
            &x_params,
            &KernelParams::gaussian(config.sigma2_z)?,
            &KernelParams::gaussian(config.baseline_sigma2_y)?,
            config.baseline_lambda,
        )?
        .value),
        Method::Gcm => Ok(crate::baselines::gcm_statistic(
            rep.view(),
            sub.z.view(),
            sub.y.view(),
            &KernelParams::gaussian(config.baseline_sigma2_y)?,
            config.baseline_lambda,
        )?
        .value),
        Method::None => Ok(f64::NAN),
    }
}

/// Linear-model view of a network without hidden layers: `(w, bias)`.
pub fn linear_weights(model: &Mlp) -> Option<(Array1<f64>, f64)> {
    if model.weights.len() != 1 {
        return None;
    }
    Some((model.weights[0].slice(s![.., 0]).to_owned(), model.biases[0][0]))
}
