//! Losses, shift-rule derivatives, optimizers and training procedures.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuits::{
    autoencoder_circuits, neuron_activation_closed_form, Circuit, GateKind, Op, Shift, Slot, AUTOENCODER_PARAMS,
};
use crate::error::{Result, VqError};
use crate::rng;
use crate::statevector::{expectation, sample_expectation, DensityMatrix, Observable, StateVector};

/// Quantity read out of the final state.
#[derive(Debug, Clone, PartialEq)]
pub enum Measure {
    Observable(Observable),
    /// `|<index|psi>|^2`.
    BasisProbability(usize),
    /// Probability that `qubit` reads `value`.
    QubitProbability { qubit: usize, value: u8 },
}

impl Measure {
    pub fn evaluate(&self, state: &StateVector) -> Result<f64> {
        match self {
            Measure::Observable(o) => expectation(state, o),
            Measure::BasisProbability(i) => state
                .amplitudes()
                .get(*i)
                .map(|a| a.norm_sqr())
                .ok_or_else(|| VqError::Qubit(format!("basis index {i} out of range"))),
            Measure::QubitProbability { qubit, value } => {
                let n = state.n_qubits();
                if *qubit >= n {
                    return Err(VqError::Qubit(format!("qubit {qubit} on {n}-qubit state")));
                }
                let mask = 1usize << (n - 1 - qubit);
                let want = if *value == 1 { mask } else { 0 };
                Ok(state.amplitudes().iter().enumerate().filter(|(i, _)| i & mask == want).map(|(_, a)| a.norm_sqr()).sum())
            }
        }
    }
}

/// `C(theta) = measure(U(x, theta) |initial>)` on the dense backend.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationModel {
    pub circuit: Circuit,
    pub measure: Measure,
    pub features: Vec<f64>,
    /// Input state; `|0...0>` when absent.
    pub initial: Option<StateVector>,
}

impl ExpectationModel {
    pub fn new(circuit: Circuit, measure: Measure) -> Self {
        Self { circuit, measure, features: Vec::new(), initial: None }
    }

    pub fn with_features(mut self, features: Vec<f64>) -> Self {
        self.features = features;
        self
    }

    pub fn with_initial(mut self, initial: StateVector) -> Self {
        self.initial = Some(initial);
        self
    }

    fn state(&self, params: &[f64], shifts: &[Shift]) -> Result<StateVector> {
        let mut s = match &self.initial {
            Some(s) => s.clone(),
            None => StateVector::zero(self.circuit.n_qubits)?,
        };
        self.circuit.apply_dense_shifts(&mut s, &self.features, params, shifts)?;
        Ok(s)
    }

    pub fn value(&self, params: &[f64]) -> Result<f64> {
        self.value_shifted(params, &[])
    }

    pub fn value_shifted(&self, params: &[f64], shifts: &[Shift]) -> Result<f64> {
        self.measure.evaluate(&self.state(params, shifts)?)
    }

    /// Shot-sampled value and standard error; the measure must be an observable.
    pub fn sampled_value(&self, params: &[f64], shifts: &[Shift], shots: u64, seed: u64) -> Result<(f64, f64)> {
        let Measure::Observable(obs) = &self.measure else {
            return Err(VqError::Unsupported("sampling needs a Pauli observable".into()));
        };
        let state = self.state(params, shifts)?;
        let mut mean = 0.0;
        let mut var = 0.0;
        for (t, (c, p)) in obs.terms().iter().enumerate() {
            if p.chars().all(|ch| ch == 'I') {
                mean += c;
                continue;
            }
            let (m, se) = sample_expectation(&state, p, shots, rng::derive_seed(seed, t as u64))?;
            mean += c * m;
            var += (c * se).powi(2);
        }
        Ok((mean, var.sqrt()))
    }

    fn occurrences(&self, k: usize) -> Result<Vec<(usize, f64)>> {
        let occ = self.circuit.occurrences(k);
        for (op, _) in &occ {
            if !self.circuit.ops[*op].gate.is_shiftable() {
                return Err(VqError::NotShiftable(k));
            }
        }
        Ok(occ)
    }

    /// Exact derivative by the two-term shift rule, summed over occurrences.
    pub fn shift_grad(&self, params: &[f64], k: usize) -> Result<f64> {
        let mut g = 0.0;
        for (op, scale) in self.occurrences(k)? {
            let plus = self.value_shifted(params, &[Shift { op, delta: FRAC_PI_2 }])?;
            let minus = self.value_shifted(params, &[Shift { op, delta: -FRAC_PI_2 }])?;
            g += scale * 0.5 * (plus - minus);
        }
        Ok(g)
    }

    /// Unbiased shot-based shift-rule estimate and its standard error.
    pub fn sampled_shift_grad(&self, params: &[f64], k: usize, shots: u64, seed: u64) -> Result<(f64, f64)> {
        let mut g = 0.0;
        let mut var = 0.0;
        for (j, (op, scale)) in self.occurrences(k)?.into_iter().enumerate() {
            let s0 = rng::derive_seed(seed, 2 * j as u64);
            let s1 = rng::derive_seed(seed, 2 * j as u64 + 1);
            let (p, sp) = self.sampled_value(params, &[Shift { op, delta: FRAC_PI_2 }], shots, s0)?;
            let (m, sm) = self.sampled_value(params, &[Shift { op, delta: -FRAC_PI_2 }], shots, s1)?;
            g += scale * 0.5 * (p - m);
            var += (scale * 0.5).powi(2) * (sp * sp + sm * sm);
        }
        Ok((g, var.sqrt()))
    }

    /// Full shift-rule gradient, components evaluated in parallel.
    pub fn gradient(&self, params: &[f64]) -> Result<Vec<f64>> {
        (0..params.len()).into_par_iter().map(|k| self.shift_grad(params, k)).collect()
    }

    /// Second derivative along `k`: `(C(phi + pi) - C(phi)) / 2` per occurrence,
    /// with four-point mixed shifts between occurrences.
    pub fn hessian_diag(&self, params: &[f64], k: usize) -> Result<f64> {
        let occ = self.occurrences(k)?;
        let base = self.value(params)?;
        let mut h = 0.0;
        for (a, (op_a, s_a)) in occ.iter().enumerate() {
            let shifted = self.value_shifted(params, &[Shift { op: *op_a, delta: PI }])?;
            h += s_a * s_a * 0.5 * (shifted - base);
            for (op_b, s_b) in occ.iter().skip(a + 1) {
                let mut mixed = 0.0;
                for (da, db, sign) in [(1.0, 1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0), (-1.0, -1.0, 1.0)] {
                    let shifts = [Shift { op: *op_a, delta: da * FRAC_PI_2 }, Shift { op: *op_b, delta: db * FRAC_PI_2 }];
                    mixed += sign * self.value_shifted(params, &shifts)?;
                }
                h += 2.0 * s_a * s_b * 0.25 * mixed;
            }
        }
        Ok(h)
    }

    /// Central finite-difference derivative along `k`.
    pub fn finite_difference_grad(&self, params: &[f64], k: usize, h: f64) -> Result<f64> {
        let mut p = params.to_vec();
        p[k] += h;
        let plus = self.value(&p)?;
        p[k] = params[k] - h;
        let minus = self.value(&p)?;
        Ok((plus - minus) / (2.0 * h))
    }
}

/// `d<obs>/d theta_k` by the shift rule; sampled when `shots` is given.
pub fn parameter_shift_grad(
    circuit: &Circuit,
    obs: &Observable,
    features: &[f64],
    params: &[f64],
    k: usize,
    shots: Option<(u64, u64)>,
) -> Result<f64> {
    let model = ExpectationModel::new(circuit.clone(), Measure::Observable(obs.clone())).with_features(features.to_vec());
    match shots {
        None => model.shift_grad(params, k),
        Some((shots, seed)) => Ok(model.sampled_shift_grad(params, k, shots, seed)?.0),
    }
}

/// `d^2<obs>/d theta_k^2` by shifts of pi.
pub fn shift_hessian_diag(circuit: &Circuit, obs: &Observable, features: &[f64], params: &[f64], k: usize) -> Result<f64> {
    ExpectationModel::new(circuit.clone(), Measure::Observable(obs.clone()))
        .with_features(features.to_vec())
        .hessian_diag(params, k)
}

/// Shift-rule gradient of a function whose every argument enters a single
/// Pauli rotation exactly once.
pub fn rotation_shift_gradient<F: Fn(&[f64]) -> f64>(f: F, params: &[f64]) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|k| {
            p[k] = params[k] + FRAC_PI_2;
            let plus = f(&p);
            p[k] = params[k] - FRAC_PI_2;
            let minus = f(&p);
            p[k] = params[k];
            0.5 * (plus - minus)
        })
        .collect()
}

// ---------------------------------------------------------------- losses

pub const PROB_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    MaeTrash,
    Crossentropy,
    ThresholdedMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<f64>,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self { kind, threshold: None, bias: None }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(VqError::Config(format!("threshold {t} outside (0, 1)")));
            }
        }
        if self.kind == LossKind::ThresholdedMse && self.threshold.is_none() {
            return Err(VqError::Config("thresholded_mse needs a threshold".into()));
        }
        Ok(())
    }
}

fn check_pairs(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(VqError::Dimension(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    Ok(())
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pairs(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// `(1/m) sum |1 - <Z>_j|` over trash-qubit expectations.
pub fn mae_trash(trash_z: &[f64]) -> Result<f64> {
    if trash_z.is_empty() {
        return Err(VqError::Invalid("empty batch".into()));
    }
    Ok(trash_z.iter().map(|z| (1.0 - z).abs()).sum::<f64>() / trash_z.len() as f64)
}

/// Binary cross-entropy of predicted class-1 probabilities against labels.
pub fn crossentropy(prob: &[f64], labels: &[f64]) -> Result<f64> {
    check_pairs(prob, labels)?;
    Ok(prob
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / prob.len() as f64)
}

/// Derivative of the per-sample cross-entropy with respect to the prediction.
pub fn crossentropy_derivative(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    -y / p + (1.0 - y) / (1.0 - p)
}

/// Label 1 iff the activation exceeds `t`.
pub fn threshold_label(activation: f64, t: f64) -> f64 {
    if activation > t {
        1.0
    } else {
        0.0
    }
}

/// MSE between labels and thresholded predictions.
pub fn thresholded_mse(activations: &[f64], labels: &[f64], t: f64) -> Result<f64> {
    let pred: Vec<f64> = activations.iter().map(|a| threshold_label(*a, t)).collect();
    mse(&pred, labels)
}

// ------------------------------------------------------------ optimizers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    #[default]
    Adam,
    Spsa,
    CobylaLike,
}

fn d_lr() -> f64 {
    0.001
}
fn d_b1() -> f64 {
    0.9
}
fn d_b2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_spsa_a() -> f64 {
    0.2
}
fn d_spsa_c() -> f64 {
    0.1
}
fn d_alpha() -> f64 {
    0.602
}
fn d_gamma() -> f64 {
    0.101
}
fn d_stab() -> f64 {
    10.0
}
fn d_step() -> f64 {
    0.5
}
fn d_min_step() -> f64 {
    1e-9
}
fn d_iters() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_b1")]
    pub beta1: f64,
    #[serde(default = "d_b2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default = "d_spsa_a")]
    pub spsa_a: f64,
    #[serde(default = "d_spsa_c")]
    pub spsa_c: f64,
    #[serde(default = "d_alpha")]
    pub spsa_alpha: f64,
    #[serde(default = "d_gamma")]
    pub spsa_gamma: f64,
    #[serde(default = "d_stab")]
    pub spsa_stability: f64,
    /// Initial poll radius of the pattern search.
    #[serde(default = "d_step")]
    pub step: f64,
    #[serde(default = "d_min_step")]
    pub min_step: f64,
    #[serde(default = "d_iters")]
    pub max_iters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Stop once the best loss is at or below this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
    #[serde(default)]
    pub record_params: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64, max_iters: usize, seed: u64) -> Self {
        Self { kind, learning_rate, max_iters, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(VqError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        pos(self.learning_rate, "learning_rate")?;
        pos(self.epsilon, "epsilon")?;
        pos(self.spsa_a, "spsa_a")?;
        pos(self.spsa_c, "spsa_c")?;
        pos(self.step, "step")?;
        pos(self.min_step, "min_step")?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(VqError::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.max_iters == 0 {
            return Err(VqError::Config("max_iters must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(VqError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Optimization history and result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    /// Full-objective value of the current iterate per iteration.
    pub loss_trace: Vec<(usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_trace: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub metric_traces: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: Vec<String>,
    /// Best-seen parameters.
    pub final_params: Vec<f64>,
    pub best_loss: f64,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl TrainRun {
    /// Running minimum of the loss trace.
    pub fn best_trace(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.loss_trace
            .iter()
            .map(|(_, l)| {
                best = best.min(*l);
                best
            })
            .collect()
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().map(|(_, l)| *l).unwrap_or(f64::NAN)
    }

    fn append(&mut self, other: TrainRun) {
        let offset = self.loss_trace.last().map(|(i, _)| i + 1).unwrap_or(0);
        self.loss_trace.extend(other.loss_trace.into_iter().map(|(i, l)| (i + offset, l)));
        if let (Some(mine), Some(theirs)) = (self.param_trace.as_mut(), other.param_trace) {
            mine.extend(theirs);
        }
    }
}

/// Scalar objective with optional analytic gradient and mini-batching.
pub trait Objective: Sync {
    /// Value on the given batch of sample indices, or on everything.
    fn value(&self, params: &[f64], batch: Option<&[usize]>) -> Result<f64>;

    fn gradient(&self, _params: &[f64], _batch: Option<&[usize]>) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }

    /// Number of samples available for batching.
    fn data_len(&self) -> Option<usize> {
        None
    }
}

/// Objective from closures.
pub struct FnObjective<F, G = fn(&[f64]) -> Result<Vec<f64>>> {
    f: F,
    g: Option<G>,
}

impl<F: Fn(&[f64]) -> Result<f64> + Sync> FnObjective<F> {
    pub fn new(f: F) -> Self {
        Self { f, g: None }
    }
}

impl<F: Fn(&[f64]) -> Result<f64> + Sync, G: Fn(&[f64]) -> Result<Vec<f64>> + Sync> FnObjective<F, G> {
    pub fn with_gradient(f: F, g: G) -> Self {
        Self { f, g: Some(g) }
    }
}

impl<F: Fn(&[f64]) -> Result<f64> + Sync, G: Fn(&[f64]) -> Result<Vec<f64>> + Sync> Objective for FnObjective<F, G> {
    fn value(&self, params: &[f64], _batch: Option<&[usize]>) -> Result<f64> {
        (self.f)(params)
    }

    fn gradient(&self, params: &[f64], _batch: Option<&[usize]>) -> Result<Option<Vec<f64>>> {
        self.g.as_ref().map(|g| g(params)).transpose()
    }
}

struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batcher {
    fn next(&mut self, r: &mut rng::Rng) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(r);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

fn grad_or_fd(obj: &dyn Objective, x: &[f64], batch: Option<&[usize]>) -> Result<Vec<f64>> {
    if let Some(g) = obj.gradient(x, batch)? {
        if g.len() != x.len() {
            return Err(VqError::Dimension(format!("gradient of length {} for {} parameters", g.len(), x.len())));
        }
        return Ok(g);
    }
    let h = 1e-6;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + h;
            let plus = obj.value(&p, batch)?;
            p[k] = x[k] - h;
            let minus = obj.value(&p, batch)?;
            p[k] = x[k];
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

fn finite(iter: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(VqError::NonFinite { iter, value })
    }
}

/// Minimize `obj` from `x0`. The loss trace holds the full objective at each
/// iterate; the returned parameters are the best seen.
pub fn minimize(obj: &dyn Objective, x0: &[f64], config: &OptimizerConfig) -> Result<TrainRun> {
    config.validate()?;
    let mut r = rng::stream(config.seed, 0x6f70);
    let mut x = x0.to_vec();
    let f0 = finite(0, obj.value(&x, None)?)?;
    let mut best = (f0, x.clone());
    let mut trace = vec![(0usize, f0)];
    let mut params = config.record_params.then(|| vec![x.clone()]);
    let mut batcher = match (config.batch_size, obj.data_len()) {
        (Some(b), Some(m)) if b < m => Some(Batcher { order: (0..m).collect(), pos: m, size: b }),
        _ => None,
    };
    let (mut m1, mut m2) = (vec![0.0; x.len()], vec![0.0; x.len()]);
    let mut radius = config.step;
    let mut current = f0;
    for it in 1..=config.max_iters {
        if config.target_loss.is_some_and(|t| best.0 <= t) {
            break;
        }
        let batch = batcher.as_mut().map(|b| b.next(&mut r));
        let batch = batch.as_deref();
        match config.kind {
            OptimizerKind::Gd => {
                let g = grad_or_fd(obj, &x, batch)?;
                for (xi, gi) in x.iter_mut().zip(&g) {
                    *xi -= config.learning_rate * gi;
                }
            }
            OptimizerKind::Adam => {
                let g = grad_or_fd(obj, &x, batch)?;
                let t = it as i32;
                for k in 0..x.len() {
                    m1[k] = config.beta1 * m1[k] + (1.0 - config.beta1) * g[k];
                    m2[k] = config.beta2 * m2[k] + (1.0 - config.beta2) * g[k] * g[k];
                    let mh = m1[k] / (1.0 - config.beta1.powi(t));
                    let vh = m2[k] / (1.0 - config.beta2.powi(t));
                    x[k] -= config.learning_rate * mh / (vh.sqrt() + config.epsilon);
                }
            }
            OptimizerKind::Spsa => {
                let k = (it - 1) as f64;
                let ak = config.spsa_a / (k + 1.0 + config.spsa_stability).powf(config.spsa_alpha);
                let ck = config.spsa_c / (k + 1.0).powf(config.spsa_gamma);
                let delta: Vec<f64> = (0..x.len()).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
                let xp: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + ck * d).collect();
                let xm: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a - ck * d).collect();
                let fp = finite(it, obj.value(&xp, batch)?)?;
                let fm = finite(it, obj.value(&xm, batch)?)?;
                let scale = (fp - fm) / (2.0 * ck);
                for (xi, d) in x.iter_mut().zip(&delta) {
                    *xi -= ak * scale * d;
                }
            }
            OptimizerKind::CobylaLike => {
                // compass poll: first improving coordinate move, otherwise shrink
                let mut moved = false;
                'poll: for k in 0..x.len() {
                    for sign in [1.0, -1.0] {
                        let mut y = x.clone();
                        y[k] += sign * radius;
                        let fy = finite(it, obj.value(&y, None)?)?;
                        if fy < current {
                            x = y;
                            moved = true;
                            break 'poll;
                        }
                    }
                }
                if !moved {
                    radius *= 0.5;
                }
            }
        }
        current = finite(it, obj.value(&x, None)?)?;
        trace.push((it, current));
        if let Some(p) = params.as_mut() {
            p.push(x.clone());
        }
        if current < best.0 {
            best = (current, x.clone());
        }
        if config.kind == OptimizerKind::CobylaLike && radius < config.min_step {
            break;
        }
    }
    Ok(TrainRun {
        loss_trace: trace,
        param_trace: params,
        metric_traces: BTreeMap::new(),
        metrics: BTreeMap::new(),
        notes: Vec::new(),
        final_params: best.1,
        best_loss: best.0,
        seed: config.seed,
        config: serde_json::to_value(config)?,
    })
}

// ------------------------------------------------------------ unsampling

/// Entangling block between rotation layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsampleEntangler {
    /// CNOT from every qubit to every later qubit.
    #[default]
    AllToAll,
    /// CNOT chain between neighbours.
    NearestNeighbour,
}

impl UnsampleEntangler {
    fn ops(self, qubits: &[usize]) -> Vec<Op> {
        let mut ops = Vec::new();
        match self {
            UnsampleEntangler::AllToAll => {
                for (a, q) in qubits.iter().enumerate() {
                    for q2 in &qubits[a + 1..] {
                        ops.push(Op::fixed(GateKind::Cnot, vec![*q, *q2]));
                    }
                }
            }
            UnsampleEntangler::NearestNeighbour => {
                for w in qubits.windows(2) {
                    ops.push(Op::fixed(GateKind::Cnot, vec![w[0], w[1]]));
                }
            }
        }
        ops
    }
}

/// RY layer, then `cycles` rounds of entangler plus RY layer, on `qubits`.
/// Trainable indices start at `offset`.
pub fn unsampling_ansatz(n: usize, qubits: &[usize], cycles: usize, ent: UnsampleEntangler, offset: usize) -> Result<Circuit> {
    let mut ops = Vec::new();
    let mut idx = offset;
    for c in 0..=cycles {
        if c > 0 {
            ops.extend(ent.ops(qubits));
        }
        for q in qubits {
            ops.push(Op::param(GateKind::Ry, vec![*q], Slot::train(idx)));
            idx += 1;
        }
    }
    Circuit::from_ops(n, ops)
}

/// `RZ(gamma)`, `RY(alpha)`, `RZ(beta)` on `qubit`, trainables `(alpha, beta, gamma)`.
pub fn general_rotation(n: usize, qubit: usize) -> Result<Circuit> {
    Circuit::from_ops(
        n,
        vec![
            Op::param(GateKind::Rz, vec![qubit], Slot::train(2)),
            Op::param(GateKind::Ry, vec![qubit], Slot::train(0)),
            Op::param(GateKind::Rz, vec![qubit], Slot::train(1)),
        ],
    )
}

struct ModelObjective {
    model: ExpectationModel,
    /// Cost is `offset + sign * C`.
    offset: f64,
    sign: f64,
}

impl Objective for ModelObjective {
    fn value(&self, params: &[f64], _batch: Option<&[usize]>) -> Result<f64> {
        Ok(self.offset + self.sign * self.model.value(params)?)
    }

    fn gradient(&self, params: &[f64], _batch: Option<&[usize]>) -> Result<Option<Vec<f64>>> {
        Ok(Some(self.model.gradient(params)?.into_iter().map(|g| self.sign * g).collect()))
    }
}

fn all_ones(n: usize) -> usize {
    (1usize << n) - 1
}

/// Global unsampling: minimize `1 - |<1...1|V(theta)|target>|^2` from a
/// uniform random start in `[0, 2 pi)`.
pub fn unsample_global(target: &StateVector, cycles: usize, ent: UnsampleEntangler, config: &OptimizerConfig) -> Result<TrainRun> {
    if (target.norm() - 1.0).abs() > 1e-10 {
        return Err(VqError::Invalid("target state must be normalized".into()));
    }
    let n = target.n_qubits();
    let qubits: Vec<usize> = (0..n).collect();
    let circuit = unsampling_ansatz(n, &qubits, cycles, ent, 0)?;
    let np = circuit.num_trainable();
    let mut r = rng::stream(config.seed, 0x756e);
    let x0: Vec<f64> = (0..np).map(|_| r.random_range(0.0..2.0 * PI)).collect();
    let model = ExpectationModel::new(circuit, Measure::BasisProbability(all_ones(n))).with_initial(target.clone());
    let obj = ModelObjective { model, offset: 1.0, sign: -1.0 };
    let mut run = minimize(&obj, &x0, config)?;
    run.metrics.insert("final_fidelity".into(), 1.0 - run.best_loss);
    run.metrics.insert("cycles".into(), cycles as f64);
    run.metrics.insert("two_qubit_gates".into(), obj.model.circuit.two_qubit_gate_count() as f64);
    Ok(run)
}

/// Parse a structure string such as `"321"` into per-layer cycle counts.
pub fn parse_structure(structure: &str) -> Result<Vec<usize>> {
    structure
        .chars()
        .map(|c| c.to_digit(10).map(|d| d as usize).ok_or_else(|| VqError::Config(format!("bad structure digit '{c}'"))))
        .collect()
}

/// Local unsampling: layer `j` acts on qubits `j..n`, is trained to drive
/// qubit `j` to `|1>` with earlier layers frozen, and starts from zero angles
/// plus optional seeded jitter of width `jitter`. The last qubit gets a
/// general rotation.
pub fn unsample_local(
    target: &StateVector,
    structure: &str,
    ent: UnsampleEntangler,
    config: &OptimizerConfig,
    jitter: f64,
) -> Result<TrainRun> {
    if (target.norm() - 1.0).abs() > 1e-10 {
        return Err(VqError::Invalid("target state must be normalized".into()));
    }
    let n = target.n_qubits();
    let cycles = parse_structure(structure)?;
    if cycles.len() + 1 != n {
        return Err(VqError::Config(format!("structure '{structure}' needs {} digits for {n} qubits", n - 1)));
    }
    let mut r = rng::stream(config.seed, 0x6c6f);
    let mut state = target.clone();
    let mut total: Option<TrainRun> = None;
    let mut layer_costs = Vec::new();
    let mut params_all = Vec::new();
    let mut depth_gates = 0usize;
    for j in 0..n {
        let circuit = if j + 1 < n {
            let qubits: Vec<usize> = (j..n).collect();
            unsampling_ansatz(n, &qubits, cycles[j], ent, 0)?
        } else {
            general_rotation(n, n - 1)?
        };
        depth_gates += circuit.two_qubit_gate_count();
        let np = circuit.num_trainable();
        let x0: Vec<f64> = (0..np).map(|_| if jitter > 0.0 { r.random_range(-jitter..jitter) } else { 0.0 }).collect();
        let model = ExpectationModel::new(circuit, Measure::QubitProbability { qubit: j, value: 1 }).with_initial(state.clone());
        let obj = ModelObjective { model, offset: 1.0, sign: -1.0 };
        let mut layer_cfg = config.clone();
        layer_cfg.seed = rng::derive_seed(config.seed, j as u64);
        let run = minimize(&obj, &x0, &layer_cfg)?;
        obj.model.circuit.apply_dense(&mut state, &[], &run.final_params, None)?;
        layer_costs.push(run.best_loss);
        params_all.extend_from_slice(&run.final_params);
        match total.as_mut() {
            None => total = Some(run),
            Some(t) => t.append(run),
        }
    }
    let mut run = total.expect("at least one layer");
    let fidelity = Measure::BasisProbability(all_ones(n)).evaluate(&state)?;
    run.final_params = params_all;
    run.best_loss = 1.0 - fidelity;
    run.metric_traces.insert("layer_cost".into(), layer_costs);
    run.metrics.insert("final_fidelity".into(), fidelity);
    run.metrics.insert("two_qubit_gates".into(), depth_gates as f64);
    run.config = serde_json::json!({ "optimizer": config, "structure": structure, "entangler": ent, "jitter": jitter });
    Ok(run)
}

// ----------------------------------------------------------- autoencoder

struct AutoencoderObjective<'a> {
    data: &'a [Vec<f64>],
    circuits: crate::circuits::AutoencoderCircuits,
}

impl AutoencoderObjective<'_> {
    fn indices(&self, batch: Option<&[usize]>) -> Vec<usize> {
        batch.map(|b| b.to_vec()).unwrap_or_else(|| (0..self.data.len()).collect())
    }

    fn model(&self, x: &[f64]) -> Result<ExpectationModel> {
        Ok(ExpectationModel::new(self.circuits.train.clone(), Measure::Observable(Observable::z_on(2, self.circuits.trash)?))
            .with_features(x.to_vec()))
    }
}

impl Objective for AutoencoderObjective<'_> {
    fn value(&self, params: &[f64], batch: Option<&[usize]>) -> Result<f64> {
        let idx = self.indices(batch);
        let z: Vec<f64> = idx.par_iter().map(|i| self.circuits.trash_z(&self.data[*i], params)).collect::<Result<_>>()?;
        mae_trash(&z)
    }

    fn gradient(&self, params: &[f64], batch: Option<&[usize]>) -> Result<Option<Vec<f64>>> {
        let idx = self.indices(batch);
        // |1 - z| = 1 - z since z <= 1
        let per: Vec<Vec<f64>> = idx.par_iter().map(|i| self.model(&self.data[*i])?.gradient(params)).collect::<Result<_>>()?;
        let mut g = vec![0.0; params.len()];
        for row in &per {
            for (gk, v) in g.iter_mut().zip(row) {
                *gk -= v / idx.len() as f64;
            }
        }
        Ok(Some(g))
    }

    fn data_len(&self) -> Option<usize> {
        Some(self.data.len())
    }
}

/// Mean compute-uncompute fidelity over a dataset.
pub fn autoencoder_mean_fidelity(data: &[Vec<f64>], params: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(VqError::Invalid("empty dataset".into()));
    }
    let c = autoencoder_circuits();
    let f: Vec<f64> = data.par_iter().map(|x| c.fidelity(x, params)).collect::<Result<_>>()?;
    Ok(f.iter().sum::<f64>() / f.len() as f64)
}

/// Train the 6-parameter encoder on the trash-qubit MAE loss; reports
/// held-out mean fidelity.
pub fn train_autoencoder(train: &[Vec<f64>], validation: &[Vec<f64>], config: &OptimizerConfig) -> Result<TrainRun> {
    if train.is_empty() {
        return Err(VqError::Invalid("empty training set".into()));
    }
    if train.iter().chain(validation).any(|x| x.len() != 4) {
        return Err(VqError::Dimension("autoencoder inputs must have 4 features".into()));
    }
    let obj = AutoencoderObjective { data: train, circuits: autoencoder_circuits() };
    let mut r = rng::stream(config.seed, 0x6165);
    let x0: Vec<f64> = (0..AUTOENCODER_PARAMS).map(|_| r.random_range(-0.1..0.1)).collect();
    let mut run = minimize(&obj, &x0, config)?;
    let held = if validation.is_empty() { train } else { validation };
    run.metrics.insert("validation_fidelity".into(), autoencoder_mean_fidelity(held, &run.final_params)?);
    run.metrics.insert("train_fidelity".into(), autoencoder_mean_fidelity(train, &run.final_params)?);
    Ok(run)
}

// ------------------------------------------------------------ classifier

/// Probability of reading `|0>` after `RY(alpha) RZ(gamma)` on a Bloch vector.
pub fn classifier_p0(bloch: &[f64; 3], alpha: f64, gamma: f64) -> f64 {
    let x1 = bloch[0] * gamma.cos() - bloch[1] * gamma.sin();
    let z = -alpha.sin() * x1 + alpha.cos() * bloch[2];
    0.5 * (1.0 + z)
}

/// Label 0 iff `p0 >= 0.5`.
pub fn classifier_predict(bloch: &[f64; 3], params: &[f64]) -> u8 {
    if classifier_p0(bloch, params[0], params[1]) >= 0.5 {
        0
    } else {
        1
    }
}

pub fn classifier_accuracy(inputs: &[[f64; 3]], labels: &[u8], params: &[f64]) -> f64 {
    let ok = inputs.iter().zip(labels).filter(|(b, y)| classifier_predict(b, params) == **y).count();
    ok as f64 / inputs.len().max(1) as f64
}

struct ClassifierObjective<'a> {
    inputs: &'a [[f64; 3]],
    labels: Vec<f64>,
}

impl ClassifierObjective<'_> {
    fn indices(&self, batch: Option<&[usize]>) -> Vec<usize> {
        batch.map(|b| b.to_vec()).unwrap_or_else(|| (0..self.inputs.len()).collect())
    }
}

impl Objective for ClassifierObjective<'_> {
    fn value(&self, params: &[f64], batch: Option<&[usize]>) -> Result<f64> {
        let idx = self.indices(batch);
        let p: Vec<f64> = idx.iter().map(|i| 1.0 - classifier_p0(&self.inputs[*i], params[0], params[1])).collect();
        let y: Vec<f64> = idx.iter().map(|i| self.labels[*i]).collect();
        crossentropy(&p, &y)
    }

    fn gradient(&self, params: &[f64], batch: Option<&[usize]>) -> Result<Option<Vec<f64>>> {
        let idx = self.indices(batch);
        let mut g = [0.0; 2];
        for i in &idx {
            let b = &self.inputs[*i];
            let p1 = 1.0 - classifier_p0(b, params[0], params[1]);
            let dp0 = rotation_shift_gradient(|t| classifier_p0(b, t[0], t[1]), params);
            let dl = crossentropy_derivative(p1, self.labels[*i]);
            g[0] -= dl * dp0[0];
            g[1] -= dl * dp0[1];
        }
        Ok(Some(g.iter().map(|v| v / idx.len() as f64).collect()))
    }

    fn data_len(&self) -> Option<usize> {
        Some(self.inputs.len())
    }
}

/// Train the single-qubit rotation classifier on Bloch-vector inputs with
/// cross-entropy. A single-class dataset yields the constant classifier and a note.
pub fn train_classifier(inputs: &[[f64; 3]], labels: &[u8], config: &OptimizerConfig) -> Result<TrainRun> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(VqError::Dimension(format!("{} inputs for {} labels", inputs.len(), labels.len())));
    }
    if labels.iter().any(|y| *y > 1) {
        return Err(VqError::Invalid("labels must be 0 or 1".into()));
    }
    let degenerate = labels.iter().all(|y| *y == labels[0]);
    if degenerate {
        // constant classifier: alpha = 0 predicts by the sign of z, alpha = pi flips it
        let mut best = (vec![0.0, 0.0], 0.0);
        for alpha in [0.0, PI] {
            let acc = classifier_accuracy(inputs, labels, &[alpha, 0.0]);
            if acc > best.1 {
                best = (vec![alpha, 0.0], acc);
            }
        }
        let mut run = TrainRun {
            loss_trace: vec![(0, 0.0)],
            param_trace: None,
            metric_traces: BTreeMap::new(),
            metrics: BTreeMap::new(),
            notes: vec![format!("degenerate dataset: every label is {}", labels[0])],
            final_params: best.0,
            best_loss: 0.0,
            seed: config.seed,
            config: serde_json::to_value(config)?,
        };
        run.metrics.insert("accuracy".into(), 1.0);
        run.metrics.insert("degenerate".into(), 1.0);
        return Ok(run);
    }
    let obj = ClassifierObjective { inputs, labels: labels.iter().map(|y| *y as f64).collect() };
    let mut r = rng::stream(config.seed, 0x636c);
    let x0 = vec![r.random_range(0.0..PI), r.random_range(0.0..2.0 * PI)];
    let mut run = minimize(&obj, &x0, config)?;
    run.metrics.insert("accuracy".into(), classifier_accuracy(inputs, labels, &run.final_params));
    Ok(run)
}

/// Bloch vector of a single-qubit density matrix.
pub fn bloch_of(rho: &DensityMatrix) -> Result<[f64; 3]> {
    crate::statevector::bloch_vector(rho)
}

// ---------------------------------------------------------------- neuron

/// How inputs and trainable weights fill the neuron's phase vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NeuronEncoding {
    /// Input and weight are full phase vectors of length `2^n`.
    Direct,
    /// Two inputs on two qubits: input `(0, x1, x2, 0)`, weight `(0, w1, w2, b)`.
    Biased { bias: f64 },
}

impl NeuronEncoding {
    pub fn weight_count(&self, input_dim: usize) -> usize {
        match self {
            NeuronEncoding::Direct => input_dim,
            NeuronEncoding::Biased { .. } => 2,
        }
    }

    pub fn activation(&self, input: &[f64], weights: &[f64]) -> Result<f64> {
        match *self {
            NeuronEncoding::Direct => neuron_activation_closed_form(input, weights),
            NeuronEncoding::Biased { bias } => {
                if input.len() != 2 || weights.len() != 2 {
                    return Err(VqError::Dimension("biased encoding takes two inputs and two weights".into()));
                }
                neuron_activation_closed_form(&[0.0, input[0], input[1], 0.0], &[0.0, weights[0], weights[1], bias])
            }
        }
    }
}

struct NeuronObjective<'a> {
    inputs: &'a [Vec<f64>],
    targets: &'a [f64],
    encoding: NeuronEncoding,
    loss: LossSpec,
}

impl Objective for NeuronObjective<'_> {
    fn value(&self, params: &[f64], batch: Option<&[usize]>) -> Result<f64> {
        let idx: Vec<usize> = batch.map(|b| b.to_vec()).unwrap_or_else(|| (0..self.inputs.len()).collect());
        let act: Vec<f64> = idx.iter().map(|i| self.encoding.activation(&self.inputs[*i], params)).collect::<Result<_>>()?;
        let y: Vec<f64> = idx.iter().map(|i| self.targets[*i]).collect();
        match self.loss.kind {
            LossKind::ThresholdedMse => thresholded_mse(&act, &y, self.loss.threshold.unwrap_or(0.5)),
            LossKind::Mse => mse(&act, &y),
            LossKind::Crossentropy => crossentropy(&act, &y),
            LossKind::MaeTrash => Err(VqError::Config("mae_trash does not apply to the neuron".into())),
        }
    }

    fn data_len(&self) -> Option<usize> {
        Some(self.inputs.len())
    }
}

/// Neuron prediction accuracy under the threshold rule.
pub fn neuron_accuracy(inputs: &[Vec<f64>], labels: &[f64], weights: &[f64], encoding: NeuronEncoding, t: f64) -> Result<f64> {
    let mut ok = 0usize;
    for (x, y) in inputs.iter().zip(labels) {
        if threshold_label(encoding.activation(x, weights)?, t) == *y {
            ok += 1;
        }
    }
    Ok(ok as f64 / inputs.len().max(1) as f64)
}

/// Starting weights of neuron training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronInit {
    /// Uniform in `[0, 2 pi)`.
    #[default]
    Uniform,
    /// Mean of the inputs with target 1, where the activation peaks.
    PositiveCentroid,
}

/// Train neuron weights with the configured optimizer (SPSA for thresholded
/// losses, whose landscape is piecewise constant).
pub fn train_neuron(
    inputs: &[Vec<f64>],
    targets: &[f64],
    encoding: NeuronEncoding,
    loss: LossSpec,
    init: NeuronInit,
    config: &OptimizerConfig,
) -> Result<TrainRun> {
    loss.validate()?;
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(VqError::Dimension(format!("{} inputs for {} targets", inputs.len(), targets.len())));
    }
    let dim = inputs[0].len();
    if inputs.iter().any(|x| x.len() != dim) {
        return Err(VqError::Dimension("ragged neuron inputs".into()));
    }
    let obj = NeuronObjective { inputs, targets, encoding, loss };
    let mut r = rng::stream(config.seed, 0x6e65);
    let x0: Vec<f64> = match init {
        NeuronInit::Uniform => (0..encoding.weight_count(dim)).map(|_| r.random_range(0.0..2.0 * PI)).collect(),
        NeuronInit::PositiveCentroid => {
            let pos: Vec<&Vec<f64>> = inputs.iter().zip(targets).filter(|(_, y)| **y == 1.0).map(|(x, _)| x).collect();
            if pos.is_empty() {
                return Err(VqError::Invalid("centroid start needs samples with target 1".into()));
            }
            (0..dim).map(|c| pos.iter().map(|x| x[c]).sum::<f64>() / pos.len() as f64).collect()
        }
    };
    let mut run = minimize(&obj, &x0, config)?;
    if let Some(t) = loss.threshold {
        run.metrics.insert("train_accuracy".into(), neuron_accuracy(inputs, targets, &run.final_params, encoding, t)?);
    }
    run.config = serde_json::json!({ "optimizer": config, "loss": loss, "encoding": encoding, "init": init });
    Ok(run)
}

// ---------------------------------------------------------- kernel ridge

/// Fitted kernel ridge model over fidelity kernels of a feature circuit.
#[derive(Debug, Clone)]
pub struct KernelRidgeModel {
    pub alpha: Vec<f64>,
    pub condition: f64,
    states: Vec<StateVector>,
    circuit: Circuit,
}

/// `|<psi(x)|psi(x')>|^2` matrix.
pub fn fidelity_kernel(states: &[StateVector]) -> Result<DMatrix<f64>> {
    let m = states.len();
    let mut k = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        k[(i, i)] = states[i].fidelity(&states[i])?;
        for j in 0..i {
            let v = states[i].fidelity(&states[j])?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Solve `(K + lambda I) alpha = y`.
pub fn kernel_ridge_fit(inputs: &[Vec<f64>], targets: &[f64], circuit: &Circuit, lambda: f64) -> Result<KernelRidgeModel> {
    if !(lambda > 0.0) {
        return Err(VqError::Invalid(format!("lambda must be positive, got {lambda}")));
    }
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(VqError::Dimension(format!("{} inputs for {} targets", inputs.len(), targets.len())));
    }
    let states: Vec<StateVector> = inputs.par_iter().map(|x| circuit.run_dense(x, &[])).collect::<Result<_>>()?;
    let k = fidelity_kernel(&states)?;
    let eig = SymmetricEigen::new(k.clone());
    if eig.eigenvalues.iter().any(|e| *e < -1e-8) {
        return Err(VqError::Invalid("kernel matrix is not positive semidefinite".into()));
    }
    let m = states.len();
    let a = k + DMatrix::<f64>::identity(m, m) * lambda;
    let shifted: Vec<f64> = eig.eigenvalues.iter().map(|e| e + lambda).collect();
    let hi = shifted.iter().cloned().fold(f64::MIN, f64::max);
    let lo = shifted.iter().cloned().fold(f64::MAX, f64::min);
    let condition = hi / lo;
    if !(condition < 1e14) {
        return Err(VqError::Invalid(format!("ill-conditioned kernel system (condition {condition:.3e})")));
    }
    let chol = a.cholesky().ok_or_else(|| VqError::Invalid(format!("kernel system not solvable (condition {condition:.3e})")))?;
    let alpha = chol.solve(&DVector::from_column_slice(targets));
    Ok(KernelRidgeModel { alpha: alpha.iter().cloned().collect(), condition, states, circuit: circuit.clone() })
}

impl KernelRidgeModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let s = self.circuit.run_dense(x, &[])?;
        let mut f = 0.0;
        for (a, t) in self.alpha.iter().zip(&self.states) {
            f += a * s.fidelity(t)?;
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::{build_ansatz, hypergraph_state_circuit, phase_encoding, AnsatzKind, AnsatzSpec, BinaryPattern, Topology};
    use proptest::prelude::*;

    fn rx_z() -> (Circuit, Observable) {
        (Circuit::from_ops(1, vec![Op::param(GateKind::Rx, vec![0], Slot::train(0))]).unwrap(), Observable::pauli("Z").unwrap())
    }

    fn random_circuit(n: usize, depth: usize, r: &mut rng::Rng) -> Circuit {
        let rot = [GateKind::Rx, GateKind::Ry, GateKind::Rz, GateKind::P];
        let mut ops = Vec::new();
        let mut np = 0;
        for _ in 0..depth {
            for q in 0..n {
                let g = rot[r.random_range(0..rot.len())];
                let slot = if np > 0 && r.random_bool(0.2) {
                    Slot::Train { index: r.random_range(0..np), scale: r.random_range(-2.0..2.0) }
                } else {
                    np += 1;
                    Slot::train(np - 1)
                };
                ops.push(Op::param(g, vec![q], slot));
            }
            if n > 1 {
                let a = r.random_range(0..n);
                let b = (a + 1 + r.random_range(0..n - 1)) % n;
                let g = [GateKind::Cnot, GateKind::Cz, GateKind::Rzz, GateKind::Cp][r.random_range(0..4)];
                if g.is_parametric() {
                    np += 1;
                    ops.push(Op::param(g, vec![a, b], Slot::train(np - 1)));
                } else {
                    ops.push(Op::fixed(g, vec![a, b]));
                }
            }
        }
        Circuit::from_ops(n, ops).unwrap()
    }

    fn random_pauli_obs(n: usize, r: &mut rng::Rng) -> Observable {
        let terms = (0..3)
            .map(|_| {
                let s: String = (0..n).map(|_| ['I', 'X', 'Y', 'Z'][r.random_range(0..4)]).collect();
                (r.random_range(-1.0..1.0), s)
            })
            .collect();
        Observable::new(terms).unwrap()
    }

    #[test]
    fn shift_rule_examples() {
        let (c, z) = rx_z();
        let g = parameter_shift_grad(&c, &z, &[], &[PI / 3.0], 0, None).unwrap();
        assert!((g + (PI / 3.0).sin()).abs() < 1e-12);
        let m = ExpectationModel::new(c.clone(), Measure::Observable(z.clone()));
        assert!((m.finite_difference_grad(&[PI / 3.0], 0, 1e-6).unwrap() - g).abs() < 1e-6);
        assert!(parameter_shift_grad(&c, &z, &[], &[0.0], 0, None).unwrap().abs() < 1e-15);
        assert!((shift_hessian_diag(&c, &z, &[], &[0.0], 0).unwrap() + 1.0).abs() < 1e-12);
        assert!(shift_hessian_diag(&c, &z, &[], &[FRAC_PI_2], 0).unwrap().abs() < 1e-12);
        let two = Circuit::from_ops(1, vec![Op::param(GateKind::Rx, vec![0], Slot::train(0))]).unwrap();
        assert_eq!(shift_hessian_diag(&two, &z, &[], &[0.3, 0.7], 1).unwrap(), 0.0);
        let crz = Circuit::from_ops(2, vec![Op::param(GateKind::Crz, vec![0, 1], Slot::train(0))]).unwrap();
        let zz = Observable::pauli("ZZ").unwrap();
        assert!(matches!(parameter_shift_grad(&crz, &zz, &[], &[0.1], 0, None), Err(VqError::NotShiftable(0))));
        let (gs, _) = m.sampled_shift_grad(&[PI / 3.0], 0, 200_000, 5).unwrap();
        assert!((gs - g).abs() < 0.01);
    }

    #[test]
    fn multilayer_gradient_matches_finite_differences() {
        let spec = AnsatzSpec::new(AnsatzKind::Circuit1, Topology::Linear, 3);
        let mut c = build_ansatz(&spec).unwrap();
        c.extend(&build_ansatz(&AnsatzSpec::new(AnsatzKind::Circuit2, Topology::Linear, 3)).unwrap().offset_trainables(6)).unwrap();
        let obs = Observable::new(vec![(1.0, "ZIZ".into()), (0.5, "XYI".into())]).unwrap();
        let mut r = rng::stream(3, 0);
        let theta: Vec<f64> = (0..c.num_trainable()).map(|_| r.random_range(0.0..2.0 * PI)).collect();
        let m = ExpectationModel::new(c, Measure::Observable(obs));
        let g = m.gradient(&theta).unwrap();
        for k in 0..theta.len() {
            assert!((g[k] - m.finite_difference_grad(&theta, k, 1e-6).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn losses() {
        assert_eq!(mse(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(mae_trash(&[1.0, 0.5]).unwrap(), 0.25);
        assert!(crossentropy(&[0.0], &[1.0]).unwrap().is_finite());
        assert!((crossentropy(&[0.5], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(thresholded_mse(&[0.96, 0.5], &[1.0, 1.0], 0.95).unwrap(), 0.5);
        assert!(mse(&[], &[]).is_err());
        assert!(LossSpec { kind: LossKind::ThresholdedMse, threshold: Some(1.2), bias: None }.validate().is_err());
    }

    #[test]
    fn optimizer_examples() {
        let f = |x: &[f64]| Ok((x[0] - 3.0).powi(2));
        let g = |x: &[f64]| Ok(vec![2.0 * (x[0] - 3.0)]);
        let run = minimize(&FnObjective::with_gradient(f, g), &[0.0], &OptimizerConfig::new(OptimizerKind::Gd, 0.1, 100, 0)).unwrap();
        assert!((run.final_params[0] - 3.0).abs() < 1e-3);
        let run = minimize(&FnObjective::new(f), &[0.0], &OptimizerConfig::new(OptimizerKind::Spsa, 0.1, 500, 1)).unwrap();
        assert!((run.final_params[0] - 3.0).abs() < 0.05, "{:?}", run.final_params);
        let run = minimize(&FnObjective::new(f), &[0.0], &OptimizerConfig::new(OptimizerKind::CobylaLike, 0.1, 500, 1)).unwrap();
        assert!((run.final_params[0] - 3.0).abs() < 1e-6);
        let rosen = |x: &[f64]| Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
        let run = minimize(&FnObjective::new(rosen), &[-1.0, 1.0], &OptimizerConfig::new(OptimizerKind::Adam, 0.01, 500, 0)).unwrap();
        let best = run.best_trace();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
        assert!(best.last().unwrap() < &best[0]);
        assert_eq!(run.best_loss, *best.last().unwrap());
        let a = minimize(&FnObjective::new(f), &[0.0], &OptimizerConfig::new(OptimizerKind::Spsa, 0.1, 50, 9)).unwrap();
        let b = minimize(&FnObjective::new(f), &[0.0], &OptimizerConfig::new(OptimizerKind::Spsa, 0.1, 50, 9)).unwrap();
        assert_eq!(a, b);
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<TrainRun>(&text).unwrap(), a);
    }

    #[test]
    fn optimizer_errors() {
        let nan = |_: &[f64]| Ok(f64::NAN);
        assert!(matches!(minimize(&FnObjective::new(nan), &[0.0], &OptimizerConfig::default()), Err(VqError::NonFinite { iter: 0, .. })));
        let late = |x: &[f64]| Ok(if x[0] > 0.5 { f64::INFINITY } else { -x[0] });
        let err = minimize(&FnObjective::new(late), &[0.0], &OptimizerConfig::new(OptimizerKind::Gd, 1.0, 10, 0)).unwrap_err();
        assert!(matches!(err, VqError::NonFinite { iter: 1, .. }));
        let mut cfg = OptimizerConfig::default();
        cfg.max_iters = 0;
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<OptimizerConfig>(r#"{"bogus":1}"#).is_err());
    }

    fn cross_target() -> StateVector {
        hypergraph_state_circuit(&BinaryPattern::from_label(20032, 16).unwrap()).unwrap().run_dense(&[], &[]).unwrap()
    }

    #[test]
    fn unsampling_examples() {
        let cfg = OptimizerConfig::new(OptimizerKind::Adam, 0.05, 800, 1);
        let run = unsample_global(&cross_target(), 3, UnsampleEntangler::AllToAll, &cfg).unwrap();
        assert!(run.metrics["final_fidelity"] > 0.999, "{}", run.metrics["final_fidelity"]);
        let ones = StateVector::basis(4, 15).unwrap();
        let run = unsample_global(&ones, 1, UnsampleEntangler::NearestNeighbour, &cfg).unwrap();
        assert!(run.metrics["final_fidelity"] > 1.0 - 1e-6);
        let run = unsample_local(&cross_target(), "321", UnsampleEntangler::NearestNeighbour, &cfg, 0.1).unwrap();
        assert!(run.metrics["final_fidelity"] > 0.99, "{}", run.metrics["final_fidelity"]);
        let run = unsample_local(&ones, "111", UnsampleEntangler::NearestNeighbour, &cfg, 0.1).unwrap();
        assert!(run.metric_traces["layer_cost"].iter().all(|c| *c < 1e-6));
        assert!(unsample_local(&ones, "11", UnsampleEntangler::NearestNeighbour, &cfg, 0.0).is_err());
    }

    #[test]
    fn later_local_layers_leave_frozen_qubits_alone() {
        // a layer on qubits j..n cannot change the marginal of qubit j-1
        let mut r = rng::stream(11, 0);
        let psi = StateVector::haar_random(4, &mut r).unwrap();
        let c = unsampling_ansatz(4, &[1, 2, 3], 2, UnsampleEntangler::AllToAll, 0).unwrap();
        let theta: Vec<f64> = (0..c.num_trainable()).map(|_| r.random_range(0.0..6.0)).collect();
        let after = c.run_dense_from(&psi, &theta);
        let m = Measure::QubitProbability { qubit: 0, value: 1 };
        assert!((m.evaluate(&psi).unwrap() - m.evaluate(&after).unwrap()).abs() < 1e-12);
    }

    trait RunFrom {
        fn run_dense_from(&self, s: &StateVector, theta: &[f64]) -> StateVector;
    }
    impl RunFrom for Circuit {
        fn run_dense_from(&self, s: &StateVector, theta: &[f64]) -> StateVector {
            let mut s = s.clone();
            self.apply_dense(&mut s, &[], theta, None).unwrap();
            s
        }
    }

    #[test]
    fn autoencoder_on_product_data() {
        // features (a, a, a+t, a+t) leave qubit 1 in |+> for every sample
        let mut r = rng::stream(5, 0);
        let data: Vec<Vec<f64>> = (0..64)
            .map(|_| {
                let (a, t) = (r.random_range(0.0..PI), r.random_range(0.0..PI));
                vec![a, a, a + t, a + t]
            })
            .collect();
        let mut cfg = OptimizerConfig::new(OptimizerKind::Adam, 0.05, 300, 2);
        cfg.batch_size = Some(20);
        let run = train_autoencoder(&data, &data, &cfg).unwrap();
        assert!(run.best_loss < 1e-3, "{}", run.best_loss);
        assert!(run.metrics["validation_fidelity"] > 0.99);
        assert!(train_autoencoder(&[], &[], &cfg).is_err());
    }

    #[test]
    fn classifier_examples() {
        let mut r = rng::stream(6, 0);
        let axis = [0.6f64, 0.0, 0.8];
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            let v: Vec<f64> = axis.iter().map(|a| s * a + r.random_range(-0.2..0.2)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            inputs.push([v[0] / n, v[1] / n, v[2] / n]);
            labels.push(if s > 0.0 { 0 } else { 1 });
        }
        let cfg = OptimizerConfig::new(OptimizerKind::Adam, 0.05, 300, 3);
        let run = train_classifier(&inputs, &labels, &cfg).unwrap();
        assert!(run.metrics["accuracy"] >= 0.95);
        let same = vec![1u8; 10];
        let run = train_classifier(&inputs[..10], &same, &cfg).unwrap();
        assert_eq!(run.metrics["accuracy"], 1.0);
        assert!(!run.notes.is_empty());
        // parameter gradient vanishes on a sample predicted exactly
        let obj = ClassifierObjective { inputs: &[[0.0, 0.0, -1.0]], labels: vec![1.0] };
        let g = obj.gradient(&[0.0, 0.0], None).unwrap().unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9), "{g:?}");
    }

    #[test]
    fn neuron_single_target() {
        let target = vec![PI / 5.0, 0.0, PI / 3.0, 0.1];
        let mut cfg = OptimizerConfig::new(OptimizerKind::Spsa, 0.1, 300, 4);
        cfg.spsa_a = 3.0;
        let run = train_neuron(&[target.clone()], &[1.0], NeuronEncoding::Direct, LossSpec::new(LossKind::Mse), NeuronInit::Uniform, &cfg).unwrap();
        assert!(run.best_loss < 1e-4, "{} {:?}", run.best_loss, run.best_trace().iter().step_by(30).collect::<Vec<_>>());
        assert!(neuron_activation_closed_form(&target, &run.final_params).unwrap() > 0.99);
    }

    #[test]
    fn neuron_classification() {
        use crate::datasets::{concentric_circles, two_clusters_2d};
        let loss = LossSpec { kind: LossKind::ThresholdedMse, threshold: Some(0.95), bias: None };
        let mut cfg = OptimizerConfig::new(OptimizerKind::Spsa, 0.1, 200, 7);
        cfg.spsa_a = 0.5;
        cfg.spsa_c = 0.2;
        cfg.batch_size = Some(20);
        let (xs, ys) = two_clusters_2d(80, 1);
        let (tx, ty) = two_clusters_2d(80, 2);
        let run = train_neuron(&xs, &ys, NeuronEncoding::Direct, loss, NeuronInit::PositiveCentroid, &cfg).unwrap();
        assert_eq!(neuron_accuracy(&tx, &ty, &run.final_params, NeuronEncoding::Direct, 0.95).unwrap(), 1.0);
        let enc = NeuronEncoding::Biased { bias: 0.25 };
        let (xs, ys) = concentric_circles(120, 1);
        let (tx, ty) = concentric_circles(120, 2);
        let run = train_neuron(&xs, &ys, enc, loss, NeuronInit::PositiveCentroid, &cfg).unwrap();
        assert_eq!(neuron_accuracy(&tx, &ty, &run.final_params, enc, 0.95).unwrap(), 1.0);
    }

    #[test]
    fn kernel_ridge_examples() {
        let circuit = phase_encoding_feature();
        let xs: Vec<Vec<f64>> = (0..30).map(|i| vec![2.0 * PI * i as f64 / 30.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x[0].sin()).collect();
        let model = kernel_ridge_fit(&xs, &ys, &circuit, 1e-3).unwrap();
        let rmse = (xs.iter().zip(&ys).map(|(x, y)| (model.predict(x).unwrap() - y).powi(2)).sum::<f64>() / 30.0).sqrt();
        assert!(rmse < 0.05, "{rmse}");
        let states: Vec<StateVector> = xs.iter().map(|x| circuit.run_dense(x, &[]).unwrap()).collect();
        let k = fidelity_kernel(&states).unwrap();
        assert!((k.clone() - k.transpose()).abs().max() < 1e-12);
        assert!((0..30).all(|i| (k[(i, i)] - 1.0).abs() < 1e-9));
        let dup = vec![vec![0.3], vec![0.3], vec![1.0]];
        assert!(kernel_ridge_fit(&dup, &[1.0, 1.0, 0.0], &circuit, 1e-3).is_ok());
        assert!(kernel_ridge_fit(&dup, &[1.0, 1.0, 0.0], &circuit, 0.0).is_err());
        // orthogonal feature states interpolate exactly
        let basis = Circuit::from_ops(2, vec![
            Op::param(GateKind::Rx, vec![0], Slot::feature(0)),
            Op::param(GateKind::Rx, vec![1], Slot::feature(1)),
        ]).unwrap();
        let pts = vec![vec![0.0, 0.0], vec![PI, 0.0], vec![0.0, PI], vec![PI, PI]];
        let y = [0.5, -1.0, 2.0, 0.25];
        let m = kernel_ridge_fit(&pts, &y, &basis, 1e-9).unwrap();
        for (p, t) in pts.iter().zip(y) {
            assert!((m.predict(p).unwrap() - t).abs() < 1e-6);
        }
        let _ = phase_encoding(&[0.0, 1.0]).unwrap();
    }

    fn phase_encoding_feature() -> Circuit {
        Circuit::from_ops(1, vec![Op::fixed(GateKind::H, vec![0]), Op::param(GateKind::P, vec![0], Slot::feature(0))]).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn shift_rule_agrees_with_finite_differences(seed in 0u64..1_000_000) {
            let mut r = rng::stream(seed, 1);
            let n = r.random_range(1..4);
            let c = random_circuit(n, 3, &mut r);
            let obs = random_pauli_obs(n, &mut r);
            let theta: Vec<f64> = (0..c.num_trainable()).map(|_| r.random_range(0.0..2.0 * PI)).collect();
            let m = ExpectationModel::new(c, Measure::Observable(obs));
            for k in 0..theta.len() {
                let g = m.shift_grad(&theta, k).unwrap();
                prop_assert!((g - m.finite_difference_grad(&theta, k, 1e-6).unwrap()).abs() < 1e-6);
                let h = m.hessian_diag(&theta, k).unwrap();
                let mut tp = theta.clone();
                tp[k] += 1e-5;
                let gp = m.shift_grad(&tp, k).unwrap();
                tp[k] = theta[k] - 1e-5;
                let gm = m.shift_grad(&tp, k).unwrap();
                prop_assert!((h - (gp - gm) / 2e-5).abs() < 1e-5);
            }
        }

        #[test]
        fn small_gd_steps_decrease_quadratics(seed in 0u64..1_000_000) {
            let mut r = rng::stream(seed, 2);
            let d = 4;
            let b = DMatrix::<f64>::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
            let a = &b * b.transpose() + DMatrix::<f64>::identity(d, d) * 0.1;
            let x0: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let a2 = a.clone();
            let f = move |x: &[f64]| { let v = DVector::from_column_slice(x); Ok((v.transpose() * &a * &v)[(0, 0)]) };
            let g = move |x: &[f64]| { let v = DVector::from_column_slice(x); Ok((&a2 * &v * 2.0).iter().cloned().collect()) };
            let run = minimize(&FnObjective::with_gradient(f, g), &x0, &OptimizerConfig::new(OptimizerKind::Gd, 1e-3, 1, 0)).unwrap();
            prop_assert!(run.loss_trace[1].1 < run.loss_trace[0].1);
        }
    }
}
