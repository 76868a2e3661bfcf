//! Entanglement, randomness, Fourier and gradient-variance diagnostics.

use std::f64::consts::{LN_2, PI};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::circuits::{AnsatzSpec, Backend, Circuit, GateKind, Op, QnnBlocks, QnnMode, Slot};
use crate::error::{Result, VqError};
use crate::mps::{MpsState, TruncationPolicy};
use crate::optimize::parameter_shift_grad;
use crate::rng;
use crate::statevector::{entropy_from_probs, Observable, StateVector, EIG_FLOOR};
use crate::C64;

/// Products `d_A d_B` above this use the harmonic-number expansion.
pub const PAGE_EXACT_LIMIT: u64 = 1 << 24;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

// ---------------------------------------------------------------------------
// Basic statistics

/// Mean and unbiased variance (zero variance for a single value).
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = neumaier_sum(xs.iter().copied()) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let ss = neumaier_sum(xs.iter().map(|x| (x - mean).powi(2)));
    (mean, ss / (n - 1.0))
}

/// Compensated sum.
pub fn neumaier_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// Welch's unequal-variance t test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub dof: f64,
    /// Two-sided p-value.
    pub p_value: f64,
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(VqError::Invalid("Welch test needs at least two samples per group".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 <= 0.0 {
        let p = if (ma - mb).abs() <= 1e-12 * (1.0 + ma.abs()) { 1.0 } else { 0.0 };
        return Ok(WelchResult { t: 0.0, dof: f64::INFINITY, p_value: p });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| VqError::Invalid(format!("t distribution: {e}")))?;
    Ok(WelchResult { t, dof, p_value: (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0) })
}

/// Pearson correlation coefficient.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(VqError::Invalid("Pearson r needs two equal-length series of length >= 2".into()));
    }
    let (mx, _) = mean_var(x);
    let (my, _) = mean_var(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(VqError::Invalid("Pearson r undefined for a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(VqError::Invalid("KS statistic needs non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

// ---------------------------------------------------------------------------
// Page value

/// Mean entanglement entropy (nats) of an `n_a`-qubit subsystem of a
/// Haar-random state on `n_a + n_b` qubits.
pub fn page_value(n_a: usize, n_b: usize) -> f64 {
    let (n_a, n_b) = if n_a <= n_b { (n_a, n_b) } else { (n_b, n_a) };
    if n_a + n_b >= 63 {
        return page_value_asymptotic(n_a, n_b);
    }
    if (1u64 << (n_a + n_b)) > PAGE_EXACT_LIMIT {
        page_value_asymptotic(n_a, n_b)
    } else {
        page_value_exact(n_a, n_b)
    }
}

/// Direct compensated sum `sum_{j=d_B+1}^{d_A d_B} 1/j - (d_A-1)/(2 d_B)`.
pub fn page_value_exact(n_a: usize, n_b: usize) -> f64 {
    let (n_a, n_b) = if n_a <= n_b { (n_a, n_b) } else { (n_b, n_a) };
    let (da, db) = (1u64 << n_a, 1u64 << n_b);
    neumaier_sum((db + 1..=da * db).map(|j| 1.0 / j as f64)) - (da - 1) as f64 / (2.0 * db as f64)
}

/// `H_{d_A d_B} - H_{d_B} - (d_A-1)/(2 d_B)` with the asymptotic harmonic series.
pub fn page_value_asymptotic(n_a: usize, n_b: usize) -> f64 {
    let (n_a, n_b) = if n_a <= n_b { (n_a, n_b) } else { (n_b, n_a) };
    let (da, db) = ((n_a as f64).exp2(), (n_b as f64).exp2());
    let tail = |n: f64| 1.0 / (2.0 * n) - 1.0 / (12.0 * n * n) + 1.0 / (120.0 * n.powi(4));
    n_a as f64 * LN_2 + tail(da * db) - tail(db) - (da - 1.0) / (2.0 * db)
}

/// Haar harmonic number estimate, exposed for cross-checks.
pub fn harmonic_number(n: u64) -> f64 {
    if n <= PAGE_EXACT_LIMIT {
        return neumaier_sum((1..=n).map(|j| 1.0 / j as f64));
    }
    let x = n as f64;
    x.ln() + EULER_GAMMA + 1.0 / (2.0 * x) - 1.0 / (12.0 * x * x) + 1.0 / (120.0 * x.powi(4))
}

/// Page values of every cut `1..n`.
pub fn page_profile(n: usize) -> Vec<f64> {
    (1..n).map(|k| page_value(k, n - k)).collect()
}

// ---------------------------------------------------------------------------
// Entanglement scans

fn default_range() -> f64 {
    PI
}

/// Sampling set-up of an entanglement scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSpec {
    pub feature: AnsatzSpec,
    pub var: AnsatzSpec,
    #[serde(default)]
    pub mode: QnnMode,
    pub max_layers: usize,
    pub samples: usize,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub policy: TruncationPolicy,
    /// Inputs are drawn from `U[0, input_range)`.
    #[serde(default = "default_range")]
    pub input_range: f64,
    /// Variational angles are drawn from `U[0, param_range)`.
    #[serde(default = "default_range")]
    pub param_range: f64,
}

impl ScanSpec {
    pub fn new(feature: AnsatzSpec, var: AnsatzSpec, mode: QnnMode, max_layers: usize, samples: usize) -> Self {
        Self {
            feature,
            var,
            mode,
            max_layers,
            samples,
            backend: Backend::Dense,
            policy: TruncationPolicy::default(),
            input_range: PI,
            param_range: PI,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_layers == 0 || self.samples == 0 {
            return Err(VqError::Invalid("scan needs max_layers >= 1 and samples >= 1".into()));
        }
        if self.feature.n_qubits < 2 {
            return Err(VqError::Invalid("entanglement scan needs at least two qubits".into()));
        }
        if !(self.input_range > 0.0 && self.param_range > 0.0 && self.input_range.is_finite() && self.param_range.is_finite()) {
            return Err(VqError::Invalid("sampling ranges must be positive and finite".into()));
        }
        self.policy.validate()
    }
}

/// Per-layer, per-bond bond-entropy statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntanglementProfile {
    pub n_qubits: usize,
    /// Layer counts `1..=max_layers`.
    pub layers: Vec<usize>,
    /// `mean[l][k]`: mean Von Neumann entropy of bond `k + 1` after `layers[l]` layers.
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub renyi2_mean: Vec<Vec<f64>>,
    /// Total entropy of every retained draw, per layer count.
    pub totals: Vec<Vec<f64>>,
    /// Retained draws per layer count.
    pub valid: Vec<usize>,
    /// Draws excluded as unreliable per layer count.
    pub excluded: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
}

enum ScanState {
    Dense(StateVector),
    Mps(MpsState),
}

impl ScanState {
    fn ground(n: usize, backend: Backend) -> Result<Self> {
        Ok(match backend {
            Backend::Dense => ScanState::Dense(StateVector::zero(n)?),
            Backend::Mps => ScanState::Mps(MpsState::ground(n)?),
        })
    }

    fn apply(&mut self, c: &Circuit, x: &[f64], theta: &[f64], policy: &TruncationPolicy) -> Result<()> {
        match self {
            ScanState::Dense(s) => c.apply_dense(s, x, theta, None),
            ScanState::Mps(s) => c.apply_mps(s, x, theta, policy),
        }
    }

    fn reliable(&self) -> bool {
        match self {
            ScanState::Dense(_) => true,
            ScanState::Mps(s) => s.is_reliable(),
        }
    }

    /// `(von Neumann, Renyi-2)` entropies per bond.
    fn entropies(&mut self) -> Result<Vec<(f64, f64)>> {
        let spectra: Vec<Vec<f64>> = match self {
            ScanState::Dense(s) => (1..s.n_qubits()).map(|k| s.schmidt_values(k)).collect::<Result<_>>()?,
            ScanState::Mps(s) => {
                s.refresh_spectra()?;
                (1..s.n_qubits()).map(|k| s.singular_values(k).map(<[f64]>::to_vec)).collect::<Result<_>>()?
            }
        };
        Ok(spectra.iter().map(|sv| schmidt_entropies(sv)).collect())
    }
}

/// Von Neumann and Renyi-2 entropies from Schmidt values.
pub fn schmidt_entropies(schmidt: &[f64]) -> (f64, f64) {
    let probs: Vec<f64> = schmidt.iter().map(|l| l * l).collect();
    let norm: f64 = probs.iter().sum();
    let purity: f64 = probs.iter().map(|p| (p / norm).powi(2)).sum();
    (entropy_from_probs(probs.iter().map(|p| p / norm)), -purity.ln().min(0.0))
}

type DrawTrace = Vec<Option<Vec<(f64, f64)>>>;

fn scan_draw(spec: &ScanSpec, blocks: &QnnBlocks, seed: u64, draw: usize) -> Result<DrawTrace> {
    let n = spec.feature.n_qubits;
    let mut r = rng::stream(seed, draw as u64);
    let x: Vec<f64> = (0..blocks.feature.num_features()).map(|_| r.random_range(0.0..spec.input_range)).collect();
    let theta: Vec<f64> =
        (0..blocks.per_layer * spec.max_layers).map(|_| r.random_range(0.0..spec.param_range)).collect();
    let mut out = Vec::with_capacity(spec.max_layers);
    match spec.mode {
        QnnMode::Alternated => {
            let mut state = ScanState::ground(n, spec.backend)?;
            let mut alive = true;
            for l in 0..spec.max_layers {
                if alive {
                    state.apply(&blocks.feature, &x, &theta, &spec.policy)?;
                    state.apply(&blocks.var_layer(l), &x, &theta, &spec.policy)?;
                    alive = state.reliable();
                }
                out.push(if alive { Some(state.entropies()?) } else { None });
            }
        }
        QnnMode::Sequential => {
            for layers in 1..=spec.max_layers {
                let mut state = ScanState::ground(n, spec.backend)?;
                for _ in 0..layers {
                    state.apply(&blocks.feature, &x, &theta, &spec.policy)?;
                }
                for l in 0..layers {
                    state.apply(&blocks.var_layer(l), &x, &theta, &spec.policy)?;
                }
                out.push(if state.reliable() { Some(state.entropies()?) } else { None });
            }
        }
    }
    Ok(out)
}

/// Bond entropies of `L = 1..=max_layers` QNN layers averaged over draws of
/// inputs and variational angles. Draws whose truncation fidelity bound falls
/// below tolerance are excluded from that layer count on.
pub fn entanglement_scan(spec: &ScanSpec, seed: u64) -> Result<EntanglementProfile> {
    spec.validate()?;
    let n = spec.feature.n_qubits;
    let blocks = QnnBlocks::new(&spec.feature, &spec.var)?;
    let draws: Vec<DrawTrace> =
        (0..spec.samples).into_par_iter().map(|d| scan_draw(spec, &blocks, seed, d)).collect::<Result<_>>()?;
    let bonds = n - 1;
    let mut profile = EntanglementProfile {
        n_qubits: n,
        layers: (1..=spec.max_layers).collect(),
        mean: Vec::new(),
        std: Vec::new(),
        renyi2_mean: Vec::new(),
        totals: Vec::new(),
        valid: Vec::new(),
        excluded: Vec::new(),
        samples: spec.samples,
        seed,
    };
    for l in 0..spec.max_layers {
        let kept: Vec<&Vec<(f64, f64)>> = draws.iter().filter_map(|d| d[l].as_ref()).collect();
        if kept.is_empty() {
            return Err(VqError::Invalid(format!(
                "every draw was excluded as unreliable at L = {}; raise chi_max",
                l + 1
            )));
        }
        let mut mean = Vec::with_capacity(bonds);
        let mut std = Vec::with_capacity(bonds);
        let mut renyi = Vec::with_capacity(bonds);
        for k in 0..bonds {
            let vn: Vec<f64> = kept.iter().map(|d| d[k].0).collect();
            let r2: Vec<f64> = kept.iter().map(|d| d[k].1).collect();
            let (m, v) = mean_var(&vn);
            mean.push(m);
            std.push(v.sqrt());
            renyi.push(mean_var(&r2).0);
        }
        profile.totals.push(kept.iter().map(|d| neumaier_sum(d.iter().map(|e| e.0))).collect());
        profile.mean.push(mean);
        profile.std.push(std);
        profile.renyi2_mean.push(renyi);
        profile.valid.push(kept.len());
        profile.excluded.push(spec.samples - kept.len());
    }
    Ok(profile)
}

/// Quantities derived from one profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    /// Total bond entropy per layer count.
    pub s_tot: Vec<f64>,
    /// Sum of Page values over all bonds.
    pub s_tot_haar: f64,
    /// Smallest layer count with `S_tot >= 0.9 S_tot^Haar`.
    pub l_tilde: Option<usize>,
    /// Largest mean bond entropy divided by the half-chain Page value.
    pub s_norm: Vec<f64>,
    pub s_haar_max: f64,
    /// Slope through the origin of `s_norm` against `L / n` over points with `s_norm <= 0.5`.
    pub v_s: Option<f64>,
    pub v_s_points: usize,
}

pub fn derived_metrics(p: &EntanglementProfile) -> DerivedMetrics {
    let n = p.n_qubits;
    let s_tot: Vec<f64> = p.mean.iter().map(|m| neumaier_sum(m.iter().copied())).collect();
    let s_tot_haar = neumaier_sum(page_profile(n));
    let l_tilde = p.layers.iter().zip(&s_tot).find(|(_, s)| **s >= 0.9 * s_tot_haar).map(|(l, _)| *l);
    let s_haar_max = page_value(n / 2, n - n / 2);
    let s_norm: Vec<f64> =
        p.mean.iter().map(|m| m.iter().copied().fold(0.0, f64::max) / s_haar_max).collect();
    let window: Vec<(f64, f64)> =
        p.layers.iter().zip(&s_norm).filter(|(_, s)| **s <= 0.5).map(|(l, s)| (*l as f64 / n as f64, *s)).collect();
    let v_s = (!window.is_empty()).then(|| {
        let sxy: f64 = window.iter().map(|(x, y)| x * y).sum();
        let sxx: f64 = window.iter().map(|(x, _)| x * x).sum();
        sxy / sxx
    });
    DerivedMetrics { s_tot, s_tot_haar, l_tilde, s_norm, s_haar_max, v_s, v_s_points: window.len() }
}

/// `(S^alt - S^seq) / ((S^alt + S^seq) / 2)` on total entropy, per layer count.
pub fn entanglement_difference(alt: &EntanglementProfile, seq: &EntanglementProfile) -> Result<Vec<f64>> {
    if alt.n_qubits != seq.n_qubits || alt.layers != seq.layers {
        return Err(VqError::Dimension("profiles cover different registers or layer ranges".into()));
    }
    let a = derived_metrics(alt).s_tot;
    let s = derived_metrics(seq).s_tot;
    Ok(a.iter()
        .zip(&s)
        .map(|(a, s)| {
            let avg = (a + s) / 2.0;
            if avg <= EIG_FLOOR {
                0.0
            } else {
                (a - s) / avg
            }
        })
        .collect())
}

/// Per-layer Welch tests on total entropy with a Bonferroni-corrected level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileComparison {
    pub p_values: Vec<f64>,
    pub min_p: f64,
    /// Per-test level `alpha / layers`.
    pub corrected_alpha: f64,
    pub indistinguishable: bool,
}

pub fn compare_profiles(a: &EntanglementProfile, b: &EntanglementProfile, alpha: f64) -> Result<ProfileComparison> {
    if a.layers != b.layers {
        return Err(VqError::Dimension("profiles cover different layer ranges".into()));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(VqError::Invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    let p_values: Vec<f64> =
        a.totals.iter().zip(&b.totals).map(|(x, y)| welch_t_test(x, y).map(|w| w.p_value)).collect::<Result<_>>()?;
    let min_p = p_values.iter().copied().fold(1.0, f64::min);
    let corrected_alpha = alpha / p_values.len() as f64;
    Ok(ProfileComparison { p_values, min_p, corrected_alpha, indistinguishable: min_p >= corrected_alpha })
}

// ---------------------------------------------------------------------------
// Expressibility and spectrum statistics

/// Uniform pure state from normalised i.i.d. complex Gaussian amplitudes.
pub fn haar_state(n: usize, r: &mut rng::Rng) -> Result<StateVector> {
    StateVector::haar_random(n, r)
}

/// Draws the circuit's features and trainables from `U[0, range)`.
pub fn circuit_sampler(circuit: &Circuit, range: f64) -> impl Fn(&mut rng::Rng) -> Result<StateVector> + Sync + '_ {
    let (nf, np) = (circuit.num_features(), circuit.num_trainable());
    move |r: &mut rng::Rng| {
        let x: Vec<f64> = (0..nf).map(|_| r.random_range(0.0..range)).collect();
        let t: Vec<f64> = (0..np).map(|_| r.random_range(0.0..range)).collect();
        circuit.run_dense(&x, &t)
    }
}

/// `ln P_Haar(F in [lo, hi))` for `P_Haar(F) = (N-1)(1-F)^{N-2}`.
fn ln_haar_bin(lo: f64, hi: f64, dim: usize) -> f64 {
    let k = (dim - 1) as f64;
    let a = k * (-lo).ln_1p();
    let b = if hi >= 1.0 { f64::NEG_INFINITY } else { k * (-hi).ln_1p() };
    a + (-(b - a).exp()).ln_1p()
}

/// `D_KL(P_hat || P_Haar)` (nats) of a histogram of fidelities.
pub fn fidelity_kl(fidelities: &[f64], dim: usize, bins: usize) -> Result<f64> {
    if bins == 0 || fidelities.is_empty() || dim < 2 {
        return Err(VqError::Invalid("KL needs samples, bins >= 1 and dimension >= 2".into()));
    }
    let mut counts = vec![0usize; bins];
    for &f in fidelities {
        let b = ((f.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let smooth = 1e-12;
    let total = fidelities.len() as f64 + smooth * bins as f64;
    Ok(neumaier_sum(counts.iter().enumerate().map(|(i, &c)| {
        let p = (c as f64 + smooth) / total;
        let ln_q = ln_haar_bin(i as f64 / bins as f64, (i + 1) as f64 / bins as f64, dim);
        p * (p.ln() - ln_q)
    })))
}

/// Pair fidelities `|<psi_1|psi_2>|^2` of independent draws; pair `i` uses stream `i`.
pub fn sample_fidelities<F>(sampler: F, samples: usize, seed: u64) -> Result<Vec<f64>>
where
    F: Fn(&mut rng::Rng) -> Result<StateVector> + Sync,
{
    (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let a = sampler(&mut r)?;
            let b = sampler(&mut r)?;
            a.fidelity(&b)
        })
        .collect()
}

/// KL divergence between the sampler's pair-fidelity histogram and the Haar
/// fidelity density. Lower is more expressive.
pub fn expressibility<F>(sampler: F, n: usize, samples: usize, bins: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut rng::Rng) -> Result<StateVector> + Sync,
{
    if samples < 10 * bins {
        return Err(VqError::Invalid(format!("expressibility needs samples >= 10 * bins ({} < {})", samples, 10 * bins)));
    }
    let fids = sample_fidelities(sampler, samples, seed)?;
    fidelity_kl(&fids, 1usize << n, bins)
}

/// Squared Schmidt values above the floor at the centre cut, pooled over draws.
pub fn pooled_center_spectrum<F>(sampler: F, n: usize, samples: usize, seed: u64) -> Result<Vec<f64>>
where
    F: Fn(&mut rng::Rng) -> Result<StateVector> + Sync,
{
    if n < 2 {
        return Err(VqError::Invalid("centre cut needs at least two qubits".into()));
    }
    let per: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let s = sampler(&mut r)?;
            Ok(s.schmidt_values(n / 2)?.into_iter().map(|l| l * l).filter(|p| *p > EIG_FLOOR).collect())
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// KS distance between pooled centre-cut spectra of the sampler and of
/// Haar-random states of the same size.
pub fn spectrum_distribution_distance<F>(sampler: F, n: usize, samples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut rng::Rng) -> Result<StateVector> + Sync,
{
    if samples < 10 {
        return Err(VqError::Invalid(format!("spectrum comparison needs at least 10 samples, got {samples}")));
    }
    let ours = pooled_center_spectrum(sampler, n, samples, seed)?;
    let haar = pooled_center_spectrum(|r: &mut rng::Rng| haar_state(n, r), n, samples, rng::derive_seed(seed, 0x4d50))?;
    ks_statistic(&ours, &haar)
}

// ---------------------------------------------------------------------------
// Gradient variance

/// Fixed `RY(pi/4)` layer, then `layers` blocks of random-axis Pauli
/// rotations followed by a CZ ladder. Trainable `l * n + q` sits on qubit `q`
/// of block `l`.
pub fn random_pqc(n: usize, layers: usize, r: &mut rng::Rng) -> Result<Circuit> {
    if n == 0 || layers == 0 {
        return Err(VqError::Invalid("random circuit needs qubits and layers".into()));
    }
    let mut ops: Vec<Op> = (0..n).map(|q| Op::param(GateKind::Ry, vec![q], Slot::Const(PI / 4.0))).collect();
    for l in 0..layers {
        for q in 0..n {
            let g = [GateKind::Rx, GateKind::Ry, GateKind::Rz][r.random_range(0..3)];
            ops.push(Op::param(g, vec![q], Slot::train(l * n + q)));
        }
        ops.extend((0..n.saturating_sub(1)).map(|q| Op::fixed(GateKind::Cz, vec![q, q + 1])));
    }
    Circuit::from_ops(n, ops)
}

/// `2^{2n} / (2 (2^n + 1)(2^{2n} - 1))`: gradient variance of a Pauli-string
/// cost when both halves of the circuit form 2-designs.
pub fn two_design_gradient_variance(n: usize) -> f64 {
    let d = (n as f64).exp2();
    d * d / (2.0 * (d + 1.0) * (d * d - 1.0))
}

/// Circuit family for gradient statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradientAnsatz {
    /// Fresh [`random_pqc`] per draw.
    RandomPqc { layers: usize },
    /// Fixed circuit; trainables drawn per draw.
    Fixed { circuit: Circuit },
}

/// Gradient statistics of one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    pub index: usize,
    pub mean: f64,
    pub variance: f64,
    pub mean_stderr: f64,
    pub samples: usize,
}

/// Mean and variance of `d<cost>/d theta_k` over uniform draws in `[0, 2 pi)`,
/// for each requested parameter.
pub fn gradient_variance_experiment(
    ansatz: &GradientAnsatz,
    n: usize,
    cost: &Observable,
    indices: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<GradientStats>> {
    if samples < 2 {
        return Err(VqError::Invalid("gradient statistics need at least two draws".into()));
    }
    if cost.n_qubits() != n {
        return Err(VqError::Dimension("cost width differs from register".into()));
    }
    let grads: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let circuit = match ansatz {
                GradientAnsatz::RandomPqc { layers } => random_pqc(n, *layers, &mut r)?,
                GradientAnsatz::Fixed { circuit } => circuit.clone(),
            };
            let np = circuit.num_trainable();
            if let Some(bad) = indices.iter().find(|&&k| k >= np) {
                return Err(VqError::Invalid(format!("parameter {bad} out of range ({np} trainables)")));
            }
            let theta: Vec<f64> = (0..np).map(|_| r.random_range(0.0..2.0 * PI)).collect();
            let x = vec![0.0; circuit.num_features()];
            indices.iter().map(|&k| parameter_shift_grad(&circuit, cost, &x, &theta, k, None)).collect()
        })
        .collect::<Result<_>>()?;
    Ok(indices
        .iter()
        .enumerate()
        .map(|(j, &index)| {
            let g: Vec<f64> = grads.iter().map(|row| row[j]).collect();
            let (mean, variance) = mean_var(&g);
            GradientStats { index, mean, variance, mean_stderr: (variance / samples as f64).sqrt(), samples }
        })
        .collect())
}

/// Analytic and empirical gradient variance of one cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceCheck {
    pub analytic: f64,
    pub empirical: f64,
    pub mean: f64,
    pub mean_stderr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyVariances {
    pub global: VarianceCheck,
    pub local: VarianceCheck,
}

/// Product `RX(theta_q)|0>` ansatz under the global cost `1 - |0..0><0..0|`
/// and the local cost `1 - (1/n) sum_q |0><0|_q`; statistics of `dC/d theta_0`.
pub fn toy_cost_variances(n: usize, samples: usize, seed: u64) -> Result<ToyVariances> {
    if n == 0 {
        return Err(VqError::Invalid("toy model needs n >= 1".into()));
    }
    let ops = (0..n).map(|q| Op::param(GateKind::Rx, vec![q], Slot::train(q))).collect();
    let circuit = Circuit::from_ops(n, ops)?;
    let global = Observable::zero_projector(n, &(0..n).collect::<Vec<_>>())?.scaled(-1.0)?.plus_identity(1.0)?;
    let local_terms: Vec<(f64, String)> = (0..n)
        .map(|q| (-0.5 / n as f64, (0..n).map(|i| if i == q { 'Z' } else { 'I' }).collect()))
        .collect();
    let local = Observable::new(local_terms)?.plus_identity(0.5)?;
    let ansatz = GradientAnsatz::Fixed { circuit };
    let g = gradient_variance_experiment(&ansatz, n, &global, &[0], samples, seed)?[0];
    let l = gradient_variance_experiment(&ansatz, n, &local, &[0], samples, rng::derive_seed(seed, 1))?[0];
    let check = |s: GradientStats, analytic: f64| VarianceCheck {
        analytic,
        empirical: s.variance,
        mean: s.mean,
        mean_stderr: s.mean_stderr,
    };
    Ok(ToyVariances {
        global: check(g, 0.125 * 0.375f64.powi(n as i32 - 1)),
        local: check(l, 1.0 / (8.0 * (n * n) as f64)),
    })
}

// ---------------------------------------------------------------------------
// Fourier analysis

fn dedup_sorted(mut v: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let cmp = |a: &Vec<f64>, b: &Vec<f64>| {
        a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    };
    v.sort_by(cmp);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(v.len());
    for w in v {
        let dup = out.iter().rev().take_while(|u| (u[0] - w[0]).abs() <= 1e-9).any(|u| {
            u.iter().zip(&w).all(|(a, b)| (a - b).abs() <= 1e-9)
        });
        if !dup {
            out.push(w);
        }
    }
    out
}

/// Frequencies reachable by a model whose coordinate `i` enters through gates
/// `exp(-i x_i H)` with the listed generator eigenvalues: the Minkowski sum of
/// every gate's eigenvalue-difference set.
pub fn fourier_spectrum(encoding: &[(usize, Vec<f64>)]) -> Result<Vec<Vec<f64>>> {
    let d = encoding.iter().map(|e| e.0 + 1).max().unwrap_or(1);
    let mut omega = vec![vec![0.0; d]];
    for (coord, eig) in encoding {
        if eig.is_empty() || eig.iter().any(|e| !e.is_finite()) {
            return Err(VqError::Invalid("generator eigenvalues must be finite and non-empty".into()));
        }
        let diffs: Vec<f64> = eig.iter().flat_map(|a| eig.iter().map(move |b| a - b)).collect();
        let next: Vec<Vec<f64>> = omega
            .iter()
            .flat_map(|w| {
                diffs.iter().map(move |dl| {
                    let mut v = w.clone();
                    v[*coord] += dl;
                    v
                })
            })
            .collect();
        omega = dedup_sorted(next);
    }
    Ok(omega)
}

/// Integer-frequency coefficients of a scalar model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Frequencies `-L_max..=L_max`.
    pub frequencies: Vec<i64>,
    pub coefficients: Vec<C64>,
    /// Every DFT bin `-(S-1)/2..=(S-1)/2` for `S` samples.
    pub dft_frequencies: Vec<i64>,
    pub dft: Vec<C64>,
    /// Largest of the out-of-band DFT magnitudes and the off-grid
    /// reconstruction error.
    pub residual: f64,
}

impl SpectrumReport {
    pub fn coefficient(&self, omega: i64) -> Option<C64> {
        self.frequencies.iter().position(|w| *w == omega).map(|i| self.coefficients[i])
    }

    /// `sqrt(sum |c_omega|^2)` over the reported band.
    pub fn l2_norm(&self) -> f64 {
        self.coefficients.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Reconstruct the model at `x` from the in-band coefficients.
    pub fn evaluate(&self, x: f64) -> f64 {
        self.frequencies.iter().zip(&self.coefficients).map(|(w, c)| (c * C64::from_polar(1.0, *w as f64 * x)).re).sum()
    }
}

/// Discrete Fourier coefficients of a `2 pi`-periodic model sampled at
/// `samples` equispaced points. Errors when the model has content beyond
/// `l_max` (aliasing), judged at tolerance `1e-6`.
pub fn fourier_coefficients<F>(model: F, l_max: usize, samples: usize) -> Result<SpectrumReport>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    let report = fourier_report(&model, l_max, samples)?;
    if report.residual > 1e-6 {
        return Err(VqError::Invalid(format!(
            "aliasing: residual {:.3e} beyond frequency {l_max}",
            report.residual
        )));
    }
    Ok(report)
}

/// [`fourier_coefficients`] without the aliasing check.
pub fn fourier_report<F>(model: &F, l_max: usize, samples: usize) -> Result<SpectrumReport>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    if samples < 2 * l_max + 1 {
        return Err(VqError::Invalid(format!("need at least {} samples for L_max = {l_max}", 2 * l_max + 1)));
    }
    let s = samples as f64;
    let values: Vec<f64> = (0..samples).into_par_iter().map(|j| model(2.0 * PI * j as f64 / s)).collect::<Result<_>>()?;
    let half = ((samples - 1) / 2) as i64;
    let dft_frequencies: Vec<i64> = (-half..=half).collect();
    let dft: Vec<C64> = dft_frequencies
        .iter()
        .map(|w| {
            let sum: C64 = values
                .iter()
                .enumerate()
                .map(|(j, f)| C64::from_polar(*f, -2.0 * PI * (*w as f64) * (j as f64) / s))
                .sum();
            sum / s
        })
        .collect();
    let lm = l_max as i64;
    let (frequencies, coefficients): (Vec<i64>, Vec<C64>) =
        dft_frequencies.iter().zip(&dft).filter(|(w, _)| w.abs() <= lm).map(|(w, c)| (*w, *c)).unzip();
    let out_of_band = dft_frequencies.iter().zip(&dft).filter(|(w, _)| w.abs() > lm).map(|(_, c)| c.norm()).fold(0.0, f64::max);
    let mut report = SpectrumReport { frequencies, coefficients, dft_frequencies, dft, residual: out_of_band };
    let off_grid: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|j| {
            let x = 2.0 * PI * (j as f64 + 0.5) / s;
            model(x).map(|f| (f - report.evaluate(x)).abs())
        })
        .collect::<Result<_>>()?;
    report.residual = off_grid.into_iter().fold(report.residual, f64::max);
    Ok(report)
}

/// Single-qubit data re-uploading model: trainable `RZ RY RZ` blocks around
/// `layers` encodings `RX(x)`. Trainables `3 l .. 3 l + 3` form block `l`.
pub fn reuploading_circuit(layers: usize) -> Result<Circuit> {
    if layers == 0 {
        return Err(VqError::Invalid("re-uploading circuit needs at least one encoding".into()));
    }
    let block = |l: usize| {
        vec![
            Op::param(GateKind::Rz, vec![0], Slot::train(3 * l)),
            Op::param(GateKind::Ry, vec![0], Slot::train(3 * l + 1)),
            Op::param(GateKind::Rz, vec![0], Slot::train(3 * l + 2)),
        ]
    };
    let mut ops = block(0);
    for l in 0..layers {
        ops.push(Op::param(GateKind::Rx, vec![0], Slot::feature(0)));
        ops.extend(block(l + 1));
    }
    Circuit::from_ops(1, ops)
}

/// Spectrum of a circuit's scalar model `x -> <obs>` with every feature slot
/// reading `x`.
pub fn circuit_spectrum(circuit: &Circuit, obs: &Observable, params: &[f64], l_max: usize, samples: usize) -> Result<SpectrumReport> {
    let nf = circuit.num_features().max(1);
    let model = |x: f64| {
        let s = circuit.run_dense(&vec![x; nf], params)?;
        crate::statevector::expectation(&s, obs)
    };
    fourier_report(&model, l_max, samples)
}

// ---------------------------------------------------------------------------
// Generalisation bound

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub spectrum_size: usize,
    pub sample_size: usize,
    pub lipschitz: f64,
    pub obs_norm: f64,
    pub loss_range: f64,
    pub confidence: f64,
    pub complexity_term: f64,
    pub confidence_term: f64,
    pub bound_value: f64,
}

/// `4 ||O|| L sqrt(|Omega| / m) + 3 c sqrt(ln(2 / delta) / (2 m))`.
pub fn generalization_bound(
    spectrum_size: usize,
    m: usize,
    lipschitz: f64,
    obs_norm: f64,
    loss_range: f64,
    delta: f64,
) -> Result<BoundReport> {
    if spectrum_size == 0 || m == 0 {
        return Err(VqError::Invalid("spectrum size and sample size must be positive".into()));
    }
    for (name, v) in [("lipschitz", lipschitz), ("obs_norm", obs_norm), ("loss_range", loss_range)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(VqError::Invalid(format!("{name} must be positive and finite, got {v}")));
        }
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(VqError::Invalid(format!("confidence delta {delta} outside (0, 1]")));
    }
    let mf = m as f64;
    let complexity_term = 4.0 * obs_norm * lipschitz * (spectrum_size as f64 / mf).sqrt();
    let confidence_term = 3.0 * loss_range * ((2.0 / delta).ln() / (2.0 * mf)).sqrt();
    Ok(BoundReport {
        spectrum_size,
        sample_size: m,
        lipschitz,
        obs_norm,
        loss_range,
        confidence: delta,
        complexity_term,
        confidence_term,
        bound_value: complexity_term + confidence_term,
    })
}

// ---------------------------------------------------------------------------
// Neuron noise resilience

/// Analytic and Monte-Carlo mean activation under phase noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseResilience {
    pub analytic_mean: f64,
    pub empirical_mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// `1/2^n + ((2^n - 1)/2^{n-1}) (1 - cos a) / a^2`.
pub fn neuron_noise_analytic(a: f64, n: usize) -> f64 {
    let d = (n as f64).exp2();
    // (1 - cos a) / a^2 = 2 sin^2(a/2) / a^2, stable for small a
    let h = a / 2.0;
    let sinc2 = if h.abs() < 1e-8 { 1.0 } else { (h.sin() / h).powi(2) };
    1.0 / d + (d - 1.0) / d * sinc2
}

/// Mean activation of a neuron whose input phases carry i.i.d. noise
/// `U[-a/2, a/2]` relative to matched weights.
pub fn neuron_noise_resilience(a: f64, n: usize, samples: usize, seed: u64) -> Result<NoiseResilience> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(VqError::Invalid(format!("noise amplitude {a} must be positive")));
    }
    if n == 0 || n > 20 || samples < 2 {
        return Err(VqError::Invalid("need 1 <= n <= 20 and at least two samples".into()));
    }
    let d = 1usize << n;
    let vals: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let phi: Vec<f64> = (0..d).map(|_| r.random_range(0.0..2.0 * PI)).collect();
            let theta: Vec<f64> = phi.iter().map(|p| p + r.random_range(-a / 2.0..=a / 2.0)).collect();
            crate::circuits::neuron_activation_closed_form(&theta, &phi)
        })
        .collect::<Result<_>>()?;
    let (mean, var) = mean_var(&vals);
    Ok(NoiseResilience {
        analytic_mean: neuron_noise_analytic(a, n),
        empirical_mean: mean,
        stderr: (var / samples as f64).sqrt(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::{build_ansatz, AnsatzKind, Topology};
    use proptest::prelude::*;

    fn spec(kind: AnsatzKind, top: Topology, n: usize) -> AnsatzSpec {
        AnsatzSpec::new(kind, top, n)
    }

    #[test]
    fn page_examples() {
        assert!((page_value(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((page_value(2, 2) - 0.922396).abs() < 5e-7);
        // exact rational H_16 - H_4 - 3/8
        let h = |n: u64| (1..=n).map(|j| 1.0 / j as f64).sum::<f64>();
        assert!((page_value(2, 2) - (h(16) - h(4) - 0.375)).abs() < 1e-14);
        assert_eq!(page_value(3, 1), page_value(1, 3));
    }

    #[test]
    fn page_paths_agree() {
        for (a, b) in [(4, 6), (8, 8), (10, 14), (12, 12)] {
            let (e, s) = (page_value_exact(a, b), page_value_asymptotic(a, b));
            assert!((e - s).abs() < 1e-10, "({a},{b}): {e} vs {s}");
        }
        let v = page_value(25, 25);
        assert!((v - (25.0 * LN_2 - 0.5)).abs() < 1e-7);
        assert!((harmonic_number(1 << 25) - harmonic_number((1 << 25) - 1) - 1.0 / (1u64 << 25) as f64).abs() < 1e-12);
    }

    #[test]
    fn statistics_helpers() {
        let (m, v) = mean_var(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!((m, v), (2.5, 5.0 / 3.0));
        assert!((pearson_r(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.1]).unwrap() - 1.0).abs() < 1e-3);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.0, 0.1], &[1.0, 2.0]).unwrap(), 1.0);
        let w = welch_t_test(&[1.0, 2.0, 3.0, 4.0], &[1.1, 2.1, 2.9, 4.2]).unwrap();
        assert!(w.p_value > 0.9);
        let w = welch_t_test(&[0.0, 0.1, 0.2, 0.1], &[5.0, 5.1, 4.9, 5.2]).unwrap();
        assert!(w.p_value < 1e-4);
    }

    #[test]
    fn product_circuits_have_no_entanglement() {
        let c1 = spec(AnsatzKind::Circuit1, Topology::Linear, 4);
        let mut s = ScanSpec::new(c1.clone(), c1, QnnMode::Alternated, 3, 8);
        for backend in [Backend::Dense, Backend::Mps] {
            s.backend = backend;
            let p = entanglement_scan(&s, 3).unwrap();
            assert!(p.mean.iter().flatten().all(|v| v.abs() < 1e-10));
            assert_eq!(p.excluded, vec![0; 3]);
            let d = derived_metrics(&p);
            assert_eq!(d.l_tilde, None);
            assert!(d.v_s.unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn scan_backends_agree_and_respect_bounds() {
        let f = spec(AnsatzKind::ZzFeatureMap, Topology::Linear, 5);
        let v = spec(AnsatzKind::Circuit2, Topology::Linear, 5);
        let mut s = ScanSpec::new(f, v, QnnMode::Alternated, 4, 12);
        let dense = entanglement_scan(&s, 11).unwrap();
        s.backend = Backend::Mps;
        let mps = entanglement_scan(&s, 11).unwrap();
        for (a, b) in dense.mean.iter().flatten().zip(mps.mean.iter().flatten()) {
            assert!((a - b).abs() < 1e-8);
        }
        let n = dense.n_qubits;
        for l in 0..dense.layers.len() {
            for k in 0..n - 1 {
                let cap = (k + 1).min(n - k - 1) as f64 * LN_2 + 1e-9;
                assert!(dense.mean[l][k] <= cap);
                assert!(dense.mean[l][k] <= page_value(k + 1, n - k - 1) + 3.0 * dense.std[l][k] + 1e-9);
                assert!(dense.renyi2_mean[l][k] <= dense.mean[l][k] + 1e-12);
            }
        }
        // entanglement grows from L = 1
        let d = derived_metrics(&dense);
        assert!(d.s_tot[3] > d.s_tot[0]);
    }

    #[test]
    fn sequential_and_alternated_match_at_one_layer() {
        let f = spec(AnsatzKind::ZzFeatureMap, Topology::Linear, 4);
        let v = spec(AnsatzKind::Circuit2, Topology::Linear, 4);
        let alt = entanglement_scan(&ScanSpec::new(f.clone(), v.clone(), QnnMode::Alternated, 3, 20), 5).unwrap();
        let seq = entanglement_scan(&ScanSpec::new(f, v, QnnMode::Sequential, 3, 20), 5).unwrap();
        assert_eq!(alt.mean[0], seq.mean[0]);
        assert_eq!(entanglement_difference(&alt, &seq).unwrap()[0], 0.0);
    }

    #[test]
    fn truncated_scans_exclude_draws() {
        let f = spec(AnsatzKind::ZzFeatureMap, Topology::Linear, 6);
        let v = spec(AnsatzKind::Circuit2, Topology::Linear, 6);
        let mut s = ScanSpec::new(f, v, QnnMode::Alternated, 3, 6);
        s.backend = Backend::Mps;
        s.policy = TruncationPolicy::new(2, 1e-9).unwrap();
        match entanglement_scan(&s, 1) {
            Ok(p) => assert!(p.excluded.iter().any(|e| *e > 0)),
            Err(e) => assert!(e.to_string().contains("excluded")),
        }
    }

    #[test]
    fn derived_metric_definitions() {
        let p = EntanglementProfile {
            n_qubits: 2,
            layers: vec![1, 2, 3],
            mean: vec![vec![0.05], vec![0.1], vec![0.4]],
            std: vec![vec![0.0]; 3],
            renyi2_mean: vec![vec![0.0]; 3],
            totals: vec![vec![0.0, 0.0]; 3],
            valid: vec![2; 3],
            excluded: vec![0; 3],
            samples: 2,
            seed: 0,
        };
        let d = derived_metrics(&p);
        assert!((d.s_tot_haar - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.l_tilde, Some(3));
        // points (0.5, 0.15), (1.0, 0.3); third point 1.2 is outside the window
        assert_eq!(d.v_s_points, 2);
        let want = (0.5 * 0.15 + 1.0 * 0.3) / (0.25 + 1.0);
        assert!((d.v_s.unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn haar_oracle_is_self_consistent() {
        let kl = expressibility(|r: &mut rng::Rng| haar_state(3, r), 3, 10_000, 75, 4).unwrap();
        assert!(kl < 0.01, "kl {kl}");
        let ks = spectrum_distribution_distance(|r: &mut rng::Rng| haar_state(6, r), 6, 200, 9).unwrap();
        assert!(ks < 0.05, "ks {ks}");
    }

    #[test]
    fn degenerate_ensembles_are_far_from_haar() {
        let id = Circuit::new(2);
        let kl = expressibility(circuit_sampler(&id, 2.0 * PI), 2, 750, 75, 1).unwrap();
        assert!(kl > 3.0, "kl {kl}");
        let c1 = build_ansatz(&spec(AnsatzKind::Circuit1, Topology::Linear, 4)).unwrap();
        let ks = spectrum_distribution_distance(circuit_sampler(&c1, PI), 4, 20, 2).unwrap();
        assert!((ks - 1.0).abs() < 1e-12);
        assert!(expressibility(circuit_sampler(&c1, PI), 4, 100, 75, 1).is_err());
        assert!(spectrum_distribution_distance(circuit_sampler(&c1, PI), 4, 5, 2).is_err());
    }

    #[test]
    fn haar_bin_probabilities_sum_to_one() {
        for dim in [2usize, 4, 256, 4096] {
            let s: f64 = (0..75).map(|i| ln_haar_bin(i as f64 / 75.0, (i + 1) as f64 / 75.0, dim).exp()).sum();
            assert!((s - 1.0).abs() < 1e-12, "dim {dim}: {s}");
        }
    }

    #[test]
    fn toy_model_matches_closed_forms() {
        let t = toy_cost_variances(4, 10_000, 3).unwrap();
        assert!((t.global.analytic - 0.0065918).abs() < 1e-7);
        assert!((t.local.analytic - 0.0078125).abs() < 1e-12);
        assert!((t.global.empirical / t.global.analytic - 1.0).abs() < 0.2);
        assert!((t.local.empirical / t.local.analytic - 1.0).abs() < 0.2);
        assert!(t.global.mean.abs() < 3.0 * t.global.mean_stderr, "{t:?}");
        let t1 = toy_cost_variances(1, 100, 2).unwrap();
        assert_eq!(t1.global.analytic, 0.125);
        assert_eq!(t1.local.analytic, 0.125);
    }

    #[test]
    fn random_circuit_variance_near_two_design_value() {
        assert!((two_design_gradient_variance(2) - 16.0 / 150.0).abs() < 1e-15);
        let n = 2;
        let stats = gradient_variance_experiment(
            &GradientAnsatz::RandomPqc { layers: 3 * n },
            n,
            &Observable::pauli("ZZ").unwrap(),
            &[(3 * n / 2) * n],
            4000,
            8,
        )
        .unwrap();
        let s = stats[0];
        assert!((s.variance / two_design_gradient_variance(n) - 1.0).abs() < 0.3, "{s:?}");
        assert!(s.mean.abs() < 3.0 * s.mean_stderr);
    }

    #[test]
    fn fourier_spectrum_examples() {
        let pauli = vec![-0.5, 0.5];
        let three: Vec<(usize, Vec<f64>)> = (0..3).map(|_| (0, pauli.clone())).collect();
        let om = fourier_spectrum(&three).unwrap();
        assert_eq!(om, (-3..=3).map(|w| vec![w as f64]).collect::<Vec<_>>());
        assert_eq!(fourier_spectrum(&[(0, vec![0.0, 1.0])]).unwrap(), vec![vec![-1.0], vec![0.0], vec![1.0]]);
        let two = fourier_spectrum(&[(0, pauli.clone()), (1, pauli)]).unwrap();
        assert_eq!(two.len(), 9);
        for w in &two {
            assert!(two.iter().any(|u| u.iter().zip(w).all(|(a, b)| (a + b).abs() < 1e-12)));
        }
    }

    #[test]
    fn fourier_coefficients_of_simple_models() {
        let rep = fourier_coefficients(|x: f64| Ok(x.cos()), 1, 8).unwrap();
        assert!((rep.coefficient(1).unwrap() - C64::new(0.5, 0.0)).norm() < 1e-12);
        assert!((rep.coefficient(-1).unwrap() - C64::new(0.5, 0.0)).norm() < 1e-12);
        assert!(rep.coefficient(0).unwrap().norm() < 1e-12);
        assert!(rep.dft.iter().zip(&rep.dft_frequencies).filter(|(_, w)| w.abs() > 1).all(|(c, _)| c.norm() < 1e-10));
        let rep = fourier_coefficients(|_| Ok(0.7), 2, 5).unwrap();
        assert!((rep.coefficient(0).unwrap().re - 0.7).abs() < 1e-12);
        assert!(fourier_coefficients(|x: f64| Ok((3.0 * x).cos()), 1, 5).is_err());
        assert!(fourier_coefficients(|x: f64| Ok(x.cos()), 2, 4).is_err());
    }

    #[test]
    fn reuploading_spectrum_is_bounded() {
        let obs = Observable::pauli("Z").unwrap();
        let mut r = rng::stream(3, 0);
        for layers in 1..=4 {
            let c = reuploading_circuit(layers).unwrap();
            let theta: Vec<f64> = (0..c.num_trainable()).map(|_| r.random_range(0.0..2.0 * PI)).collect();
            let rep = circuit_spectrum(&c, &obs, &theta, layers, 4 * layers + 3).unwrap();
            assert!(rep.residual < 1e-10);
            assert!(rep.l2_norm() <= 1.0 + 1e-12);
            for (w, c) in rep.frequencies.iter().zip(&rep.coefficients) {
                let m = rep.coefficient(-w).unwrap();
                assert!((c - m.conj()).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn bound_examples() {
        let b = generalization_bound(3, 100, 1.0, 1.0, 1.0, 0.05).unwrap();
        assert!((b.complexity_term - 0.692820).abs() < 1e-6);
        assert!((b.confidence_term - 0.407430).abs() < 1e-6);
        assert!((b.bound_value - 1.100251).abs() < 1e-6);
        let b4 = generalization_bound(3, 400, 1.0, 1.0, 1.0, 0.05).unwrap();
        assert!((b4.complexity_term - b.complexity_term / 2.0).abs() < 1e-12);
        let one = generalization_bound(3, 100, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!((one.confidence_term - 3.0 * (LN_2 / 200.0).sqrt()).abs() < 1e-15);
        assert!(generalization_bound(3, 100, 1.0, 1.0, 1.0, 0.0).is_err());
        assert!(generalization_bound(3, 100, 1.0, 1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn neuron_noise_examples() {
        assert!((neuron_noise_analytic(1.0, 2) - 0.939547).abs() < 1e-6);
        assert!((neuron_noise_analytic(1.0, 1) - 0.959698).abs() < 1e-6);
        let a: f64 = 1e-4;
        assert!((neuron_noise_analytic(a, 2) - (1.0 - 0.75 * a * a / 12.0)).abs() < 1e-12);
        let r = neuron_noise_resilience(1.0, 2, 20_000, 4).unwrap();
        assert!((r.empirical_mean - r.analytic_mean).abs() < 3.0 * r.stderr + 1e-12);
        assert!(neuron_noise_resilience(0.0, 2, 10, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn bound_decreases_in_m(m in 1usize..10_000, omega in 1usize..50, delta in 0.001f64..1.0) {
            let a = generalization_bound(omega, m, 1.0, 1.0, 1.0, delta).unwrap();
            let b = generalization_bound(omega, m + 1, 1.0, 1.0, 1.0, delta).unwrap();
            prop_assert!(b.bound_value < a.bound_value);
            prop_assert!(a.bound_value > 0.0);
        }

        #[test]
        fn page_value_below_maximum(na in 1usize..8, nb in 1usize..8) {
            let v = page_value(na, nb);
            prop_assert!(v > 0.0);
            prop_assert!(v <= na.min(nb) as f64 * LN_2);
        }

        #[test]
        fn spectra_are_symmetric(eigs in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 1..3), 1..4)) {
            let enc: Vec<(usize, Vec<f64>)> = eigs.into_iter().enumerate().map(|(i, e)| (i % 2, e)).collect();
            let om = fourier_spectrum(&enc).unwrap();
            for w in &om {
                prop_assert!(om.iter().any(|u| u.iter().zip(w).all(|(a, b)| (a + b).abs() <= 2e-9)));
            }
        }
    }
}
