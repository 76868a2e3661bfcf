//! Single-qubit noise channels, Pauli transfer matrices, inverse maps and
//! expectation-value deconvolution.

use nalgebra::{Matrix4, SymmetricEigen};
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuits::Circuit;
use crate::error::{Result, VqError};
use crate::rng;
use crate::statevector::{gates, pm_one_statistics, Mat2, Observable, StateVector};
use crate::C64;

/// Determinant magnitude below which a PTM is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-12;

const ZERO: C64 = C64::new(0.0, 0.0);

/// `[I, X, Y, Z]`.
pub fn pauli_basis() -> [Mat2; 4] {
    [gates::identity(), gates::x(), gates::y(), gates::z()]
}

fn add(a: &Mat2, b: &Mat2) -> Mat2 {
    [[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]]
}

fn scale(a: &Mat2, c: f64) -> Mat2 {
    [[a[0][0] * c, a[0][1] * c], [a[1][0] * c, a[1][1] * c]]
}

fn trace(a: &Mat2) -> C64 {
    a[0][0] + a[1][1]
}

fn sandwich(k: &Mat2, o: &Mat2) -> Mat2 {
    gates::mul(&gates::mul(k, o), &gates::dagger(k))
}

/// Real Pauli coefficients `c_a = Tr[sigma_a O] / 2`, so `O = sum_a c_a sigma_a`
/// for Hermitian `O`.
pub fn pauli_coefficients(o: &Mat2) -> [f64; 4] {
    let b = pauli_basis();
    [0, 1, 2, 3].map(|a| 0.5 * trace(&gates::mul(&b[a], o)).re)
}

/// Matrix from Pauli coefficients.
pub fn from_pauli_coefficients(c: &[f64; 4]) -> Mat2 {
    let b = pauli_basis();
    (0..4).fold([[ZERO; 2]; 2], |acc, a| add(&acc, &scale(&b[a], c[a])))
}

/// Named channel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelKind {
    BitFlip { p: f64 },
    PhaseFlip { p: f64 },
    BitPhaseFlip { p: f64 },
    Depolarizing { p: f64 },
    Pauli { px: f64, py: f64, pz: f64 },
    AmplitudeDamping { gamma: f64 },
    GeneralizedAd { gamma: f64, p: f64 },
    TwoKraus { alpha: f64, beta: f64 },
    /// Dephasing followed by amplitude damping for a duration `t`.
    Decoherence { t: f64, t1: f64, t2: f64 },
}

impl ChannelKind {
    /// `(gamma, p)` of a decoherence channel.
    pub fn decoherence_parameters(t: f64, t1: f64, t2: f64) -> (f64, f64) {
        let gamma = 1.0 - (-t / t1).exp();
        let p = 0.5 * (1.0 - (-(t / t2 - t / (2.0 * t1))).exp());
        (gamma, p)
    }

    fn validate(&self) -> Result<()> {
        let prob = |v: f64, name: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(VqError::Invalid(format!("{name} = {v} outside [0, 1]")))
            }
        };
        match *self {
            ChannelKind::BitFlip { p }
            | ChannelKind::PhaseFlip { p }
            | ChannelKind::BitPhaseFlip { p }
            | ChannelKind::Depolarizing { p } => prob(p, "p"),
            ChannelKind::Pauli { px, py, pz } => {
                prob(px, "px")?;
                prob(py, "py")?;
                prob(pz, "pz")?;
                if px + py + pz > 1.0 + 1e-12 {
                    return Err(VqError::Invalid("pauli probabilities sum above 1".into()));
                }
                Ok(())
            }
            ChannelKind::AmplitudeDamping { gamma } => {
                if (0.0..1.0).contains(&gamma) {
                    Ok(())
                } else {
                    Err(VqError::Invalid(format!("gamma = {gamma} outside [0, 1)")))
                }
            }
            ChannelKind::GeneralizedAd { gamma, p } => {
                ChannelKind::AmplitudeDamping { gamma }.validate()?;
                prob(p, "p")
            }
            ChannelKind::TwoKraus { alpha, beta } => {
                if alpha.is_finite() && beta.is_finite() {
                    Ok(())
                } else {
                    Err(VqError::Invalid("two-Kraus angles must be finite".into()))
                }
            }
            ChannelKind::Decoherence { t, t1, t2 } => {
                if !(t > 0.0 && t1 > 0.0 && t2 > 0.0) || !(t.is_finite() && t1.is_finite() && t2.is_finite()) {
                    return Err(VqError::Invalid("decoherence times must be positive and finite".into()));
                }
                if t2 > 2.0 * t1 {
                    return Err(VqError::Invalid(format!("T2 = {t2} exceeds 2 T1 = {}", 2.0 * t1)));
                }
                Ok(())
            }
        }
    }
}

/// Completely positive trace-preserving map in Kraus form.
#[derive(Debug, Clone, PartialEq)]
pub struct KrausChannel {
    pub kraus_ops: Vec<Mat2>,
}

impl KrausChannel {
    pub fn new(kraus_ops: Vec<Mat2>) -> Result<Self> {
        let sum = kraus_ops.iter().fold([[ZERO; 2]; 2], |acc, k| add(&acc, &gates::mul(&gates::dagger(k), k)));
        let id = gates::identity();
        let err = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| (sum[i][j] - id[i][j]).norm())
            .fold(0.0, f64::max);
        if err > 1e-10 {
            return Err(VqError::Invalid(format!("Kraus operators are not trace preserving (deviation {err:.3e})")));
        }
        Ok(Self { kraus_ops })
    }

    pub fn apply(&self, rho: &Mat2) -> Mat2 {
        self.kraus_ops.iter().fold([[ZERO; 2]; 2], |acc, k| add(&acc, &sandwich(k, rho)))
    }

    pub fn as_operator_sum(&self) -> SignedOperatorSum {
        SignedOperatorSum { terms: self.kraus_ops.iter().map(|k| (1.0, *k)).collect() }
    }

    /// Kraus operators replaced by their adjoints.
    pub fn adjoint(&self) -> KrausChannel {
        KrausChannel { kraus_ops: self.kraus_ops.iter().map(gates::dagger).collect() }
    }
}

/// Hermiticity-preserving map `O -> sum_k c_k K_k O K_k^dagger` with real `c_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedOperatorSum {
    pub terms: Vec<(f64, Mat2)>,
}

impl SignedOperatorSum {
    pub fn identity() -> Self {
        Self { terms: vec![(1.0, gates::identity())] }
    }

    pub fn apply(&self, o: &Mat2) -> Mat2 {
        self.terms.iter().fold([[ZERO; 2]; 2], |acc, (c, k)| add(&acc, &scale(&sandwich(k, o), *c)))
    }

    /// Each operator replaced by its conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self { terms: self.terms.iter().map(|(c, k)| (*c, gates::dagger(k))).collect() }
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &SignedOperatorSum) -> Self {
        let mut terms = Vec::with_capacity(self.terms.len() * inner.terms.len());
        for (c1, k1) in &self.terms {
            for (c2, k2) in &inner.terms {
                terms.push((c1 * c2, gates::mul(k1, k2)));
            }
        }
        Self { terms }.canonical()
    }

    /// `m`-fold composition.
    pub fn power(&self, m: usize) -> Self {
        (0..m).fold(Self::identity(), |acc, _| self.compose(&acc))
    }

    /// Choi matrix `J[(i,a),(j,b)] = Phi(|i><j|)_{ab}`.
    pub fn choi(&self) -> Matrix4<C64> {
        choi_of(|o| self.apply(o))
    }

    /// Same map over linearly independent generators (Choi eigenvectors),
    /// dropping numerically zero coefficients.
    pub fn canonical(&self) -> Self {
        terms_from_choi(self.choi())
    }

    pub fn has_negative_coefficient(&self) -> bool {
        self.canonical().terms.iter().any(|(c, _)| *c < -1e-12)
    }
}

fn choi_of<F: Fn(&Mat2) -> Mat2>(map: F) -> Matrix4<C64> {
    let mut j = Matrix4::<C64>::zeros();
    for i in 0..2 {
        for jj in 0..2 {
            let mut e = [[ZERO; 2]; 2];
            e[i][jj] = C64::new(1.0, 0.0);
            let img = map(&e);
            for a in 0..2 {
                for b in 0..2 {
                    j[(i * 2 + a, jj * 2 + b)] = img[a][b];
                }
            }
        }
    }
    j
}

/// Signed operator sum from the eigendecomposition of a Hermitian Choi matrix.
fn terms_from_choi(j: Matrix4<C64>) -> SignedOperatorSum {
    let j = (j + j.adjoint()) * C64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(j);
    let mut terms = Vec::new();
    for k in 0..4 {
        let lam = eig.eigenvalues[k];
        if lam.abs() < 1e-13 {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        let mut op = [[ZERO; 2]; 2];
        for i in 0..2 {
            for a in 0..2 {
                op[a][i] = v[i * 2 + a];
            }
        }
        terms.push((lam, op));
    }
    SignedOperatorSum { terms }
}

/// Pauli transfer matrix `Gamma_ij = Tr[sigma_i Phi(sigma_j)] / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ptm(pub [[f64; 4]; 4]);

impl Ptm {
    pub fn matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.0[i][j])
    }

    fn from_matrix(m: &Matrix4<f64>) -> Self {
        let mut out = [[0.0; 4]; 4];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(i, j)];
            }
        }
        Ptm(out)
    }

    pub fn determinant(&self) -> f64 {
        self.matrix().determinant()
    }

    pub fn inverse(&self) -> Result<Ptm> {
        let det = self.determinant();
        if det.abs() <= SINGULAR_TOL {
            return Err(VqError::SingularChannel(det));
        }
        let inv = self.matrix().try_inverse().ok_or(VqError::SingularChannel(det))?;
        Ok(Ptm::from_matrix(&inv))
    }

    /// Operator-sum form of the map with this PTM.
    pub fn to_operator_sum(&self) -> SignedOperatorSum {
        let basis = pauli_basis();
        let g = self.0;
        let images: Vec<Mat2> =
            (0..4).map(|j| (0..4).fold([[ZERO; 2]; 2], |acc, i| add(&acc, &scale(&basis[i], g[i][j])))).collect();
        let map = |o: &Mat2| {
            let c = pauli_coefficients_complex(o);
            (0..4).fold([[ZERO; 2]; 2], |acc, j| {
                let t = images[j];
                add(&acc, &[[t[0][0] * c[j], t[0][1] * c[j]], [t[1][0] * c[j], t[1][1] * c[j]]])
            })
        };
        terms_from_choi(choi_of(map))
    }
}

/// Complex Pauli coefficients of an arbitrary 2x2 matrix.
fn pauli_coefficients_complex(o: &Mat2) -> [C64; 4] {
    let b = pauli_basis();
    [0, 1, 2, 3].map(|a| trace(&gates::mul(&b[a], o)) * 0.5)
}

/// PTM of any linear map given by its action.
pub fn ptm_of_map<F: Fn(&Mat2) -> Mat2>(map: F) -> Ptm {
    let b = pauli_basis();
    let mut g = [[0.0; 4]; 4];
    for j in 0..4 {
        let img = map(&b[j]);
        for i in 0..4 {
            g[i][j] = 0.5 * trace(&gates::mul(&b[i], &img)).re;
        }
    }
    Ptm(g)
}

pub fn ptm_of(map: &SignedOperatorSum) -> Ptm {
    ptm_of_map(|o| map.apply(o))
}

pub fn ptm_of_channel(ch: &KrausChannel) -> Ptm {
    ptm_of_map(|o| ch.apply(o))
}

fn diag(a: f64, b: f64) -> Mat2 {
    [[C64::new(a, 0.0), ZERO], [ZERO, C64::new(b, 0.0)]]
}

fn upper(v: f64) -> Mat2 {
    [[ZERO, C64::new(v, 0.0)], [ZERO, ZERO]]
}

fn lower(v: f64) -> Mat2 {
    [[ZERO, ZERO], [C64::new(v, 0.0), ZERO]]
}

fn anti(up: f64, low: f64) -> Mat2 {
    [[ZERO, C64::new(up, 0.0)], [C64::new(low, 0.0), ZERO]]
}

fn pauli_weighted(weights: [f64; 4]) -> Vec<Mat2> {
    let b = pauli_basis();
    (0..4).filter(|a| weights[*a] > 0.0).map(|a| scale(&b[a], weights[a].sqrt())).collect()
}

/// Kraus form of a named channel.
pub fn make_channel(kind: &ChannelKind) -> Result<KrausChannel> {
    kind.validate()?;
    let ops = match *kind {
        ChannelKind::BitFlip { p } => pauli_weighted([1.0 - p, p, 0.0, 0.0]),
        ChannelKind::PhaseFlip { p } => pauli_weighted([1.0 - p, 0.0, 0.0, p]),
        ChannelKind::BitPhaseFlip { p } => pauli_weighted([1.0 - p, 0.0, p, 0.0]),
        ChannelKind::Depolarizing { p } => pauli_weighted([1.0 - 0.75 * p, p / 4.0, p / 4.0, p / 4.0]),
        ChannelKind::Pauli { px, py, pz } => pauli_weighted([(1.0 - px - py - pz).max(0.0), px, py, pz]),
        ChannelKind::AmplitudeDamping { gamma } => vec![diag(1.0, (1.0 - gamma).sqrt()), upper(gamma.sqrt())],
        ChannelKind::GeneralizedAd { gamma, p } => {
            let (sp, sq) = (p.sqrt(), (1.0 - p).sqrt());
            vec![
                scale(&diag(1.0, (1.0 - gamma).sqrt()), sp),
                scale(&upper(gamma.sqrt()), sp),
                scale(&diag((1.0 - gamma).sqrt(), 1.0), sq),
                scale(&lower(gamma.sqrt()), sq),
            ]
        }
        ChannelKind::TwoKraus { alpha, beta } => {
            vec![diag(alpha.cos(), beta.cos()), anti(beta.sin(), alpha.sin())]
        }
        ChannelKind::Decoherence { t, t1, t2 } => {
            let (gamma, p) = ChannelKind::decoherence_parameters(t, t1, t2);
            let ad = make_channel(&ChannelKind::AmplitudeDamping { gamma })?;
            let deph = make_channel(&ChannelKind::PhaseFlip { p })?;
            let mut ops = Vec::new();
            for v in &ad.kraus_ops {
                for d in &deph.kraus_ops {
                    ops.push(gates::mul(v, d));
                }
            }
            ops
        }
    };
    KrausChannel::new(ops)
}

fn pauli_inverse(lx: f64, ly: f64, lz: f64) -> Result<SignedOperatorSum> {
    let det = lx * ly * lz;
    if det.abs() <= SINGULAR_TOL {
        return Err(VqError::SingularChannel(det));
    }
    let mu = [1.0, 1.0 / lx, 1.0 / ly, 1.0 / lz];
    let sign = |k: usize, a: usize| if k == 0 || a == 0 || k == a { 1.0 } else { -1.0 };
    let b = pauli_basis();
    let terms = (0..4)
        .map(|k| (0.25 * (0..4).map(|a| sign(k, a) * mu[a]).sum::<f64>(), b[k]))
        .filter(|(c, _)| *c != 0.0)
        .collect();
    Ok(SignedOperatorSum { terms })
}

/// Closed-form inverse map of a named channel.
pub fn invert_channel(kind: &ChannelKind) -> Result<SignedOperatorSum> {
    kind.validate()?;
    let flip = |p: f64, op: Mat2| -> Result<SignedOperatorSum> {
        let d = 1.0 - 2.0 * p;
        if d.abs() <= SINGULAR_TOL {
            return Err(VqError::SingularChannel(d.powi(2)));
        }
        Ok(SignedOperatorSum { terms: vec![((1.0 - p) / d, gates::identity()), (-p / d, op)] })
    };
    match *kind {
        ChannelKind::BitFlip { p } => flip(p, gates::x()),
        ChannelKind::PhaseFlip { p } => flip(p, gates::z()),
        ChannelKind::BitPhaseFlip { p } => flip(p, gates::y()),
        ChannelKind::Depolarizing { p } => {
            let d = 1.0 - p;
            if d.abs() <= SINGULAR_TOL {
                return Err(VqError::SingularChannel(d.powi(3)));
            }
            let b = pauli_basis();
            let mut terms = vec![((1.0 - p / 4.0) / d, b[0])];
            terms.extend((1..4).map(|a| (-(p / 4.0) / d, b[a])));
            Ok(SignedOperatorSum { terms })
        }
        ChannelKind::Pauli { px, py, pz } => {
            pauli_inverse(1.0 - 2.0 * (py + pz), 1.0 - 2.0 * (px + pz), 1.0 - 2.0 * (px + py))
        }
        ChannelKind::AmplitudeDamping { gamma } => {
            let s = 1.0 - gamma;
            Ok(SignedOperatorSum { terms: vec![(1.0, diag(1.0, (1.0 / s).sqrt())), (-1.0, upper((gamma / s).sqrt()))] })
        }
        ChannelKind::GeneralizedAd { gamma, p } => {
            let s = 1.0 - gamma;
            let r = (gamma / s).sqrt();
            Ok(SignedOperatorSum {
                terms: vec![
                    (p, diag(1.0, (1.0 / s).sqrt())),
                    (-p, upper(r)),
                    (1.0 - p, diag((1.0 / s).sqrt(), 1.0)),
                    (-(1.0 - p), lower(r)),
                ],
            })
        }
        ChannelKind::TwoKraus { alpha, beta } => {
            let denom = (2.0 * alpha).cos() + (2.0 * beta).cos();
            let det = ptm_of_channel(&make_channel(kind)?).determinant();
            if denom.abs() <= SINGULAR_TOL || det.abs() <= SINGULAR_TOL {
                return Err(VqError::SingularChannel(det));
            }
            let h = 2.0 / denom;
            Ok(SignedOperatorSum {
                terms: vec![(h, diag(beta.cos(), alpha.cos())), (-h, anti(beta.sin(), alpha.sin()))],
            })
        }
        ChannelKind::Decoherence { t, t1, t2 } => {
            let (gamma, p) = ChannelKind::decoherence_parameters(t, t1, t2);
            let deph = invert_channel(&ChannelKind::PhaseFlip { p })?;
            let ad = invert_channel(&ChannelKind::AmplitudeDamping { gamma })?;
            Ok(deph.compose(&ad))
        }
    }
}

/// Generic inverse through the numerically inverted PTM.
pub fn invert_numeric(map: &SignedOperatorSum) -> Result<SignedOperatorSum> {
    Ok(ptm_of(map).inverse()?.to_operator_sum())
}

/// Affine form of the adjoint inverse on each Pauli axis:
/// `N^-1_adj(sigma_a) = offset[a] I + sum_b gain[a][b] sigma_b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisCorrection {
    pub offset: [f64; 3],
    pub gain: [[f64; 3]; 3],
}

impl AxisCorrection {
    pub fn from_adjoint_inverse(adj_inv: &SignedOperatorSum) -> Self {
        let b = pauli_basis();
        let mut offset = [0.0; 3];
        let mut gain = [[0.0; 3]; 3];
        for a in 0..3 {
            let c = pauli_coefficients(&adj_inv.apply(&b[a + 1]));
            offset[a] = c[0];
            gain[a] = [c[1], c[2], c[3]];
        }
        Self { offset, gain }
    }

    /// Closed-form correction for `m` repetitions of a decoherence channel.
    pub fn decoherence_power(gamma: f64, p: f64, m: u32) -> Result<Self> {
        let xy = ((1.0 - 2.0 * p) * (1.0 - gamma).sqrt()).powi(m as i32);
        let z = (1.0 - gamma).powi(m as i32);
        if xy.abs() <= SINGULAR_TOL || z.abs() <= SINGULAR_TOL {
            return Err(VqError::SingularChannel(xy * xy * z));
        }
        Ok(Self {
            offset: [0.0, 0.0, (z - 1.0) / z],
            gain: [[1.0 / xy, 0.0, 0.0], [0.0, 1.0 / xy, 0.0], [0.0, 0.0, 1.0 / z]],
        })
    }

    /// Correction for `m` applications of a named channel. Decoherence uses
    /// the closed-form power expressions; other kinds compose the inverse.
    pub fn for_channel(kind: &ChannelKind, m: u32) -> Result<Self> {
        if let ChannelKind::Decoherence { t, t1, t2 } = *kind {
            kind.validate()?;
            let (gamma, p) = ChannelKind::decoherence_parameters(t, t1, t2);
            return Self::decoherence_power(gamma, p, m);
        }
        let inv = invert_channel(kind)?.power(m as usize);
        Ok(Self::from_adjoint_inverse(&inv.adjoint()))
    }
}

/// Noisy estimate of one Pauli axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Mitigated `<O>` and its standard error from noisy Pauli means.
pub fn deconvolve_with(obs: &Mat2, noisy: &[Option<AxisEstimate>; 3], corr: &AxisCorrection) -> Result<(f64, f64)> {
    let c = pauli_coefficients(obs);
    let mut mean = c[0];
    let mut weights = [0.0; 3];
    for a in 0..3 {
        if c[a + 1] == 0.0 {
            continue;
        }
        mean += c[a + 1] * corr.offset[a];
        for b in 0..3 {
            weights[b] += c[a + 1] * corr.gain[a][b];
        }
    }
    let mut var = 0.0;
    for b in 0..3 {
        if weights[b].abs() <= 1e-14 {
            continue;
        }
        let est = noisy[b].ok_or_else(|| VqError::Invalid(format!("missing noisy estimate for axis {}", ["x", "y", "z"][b])))?;
        mean += weights[b] * est.mean;
        var += (weights[b] * est.stderr).powi(2);
    }
    Ok((mean, var.sqrt()))
}

fn observable_matrix(obs: &Observable) -> Result<Mat2> {
    if obs.n_qubits() != 1 {
        return Err(VqError::Dimension("deconvolution needs a single-qubit observable".into()));
    }
    let m = obs.matrix()?;
    Ok([[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]])
}

/// Deconvolve `obs` for one application of `kind`.
pub fn deconvolve_observable(
    obs: &Observable,
    noisy: &[Option<AxisEstimate>; 3],
    kind: &ChannelKind,
) -> Result<(f64, f64)> {
    deconvolve_with(&observable_matrix(obs)?, noisy, &AxisCorrection::for_channel(kind, 1)?)
}

/// `(3 Tr[O sigma_a] / 2) sigma_a + (Tr O / 2) I` for axis `a` in `0..3`.
pub fn quantum_estimator(obs: &Mat2, axis: usize) -> Result<Mat2> {
    if axis > 2 {
        return Err(VqError::Invalid(format!("axis {axis} outside 0..3")));
    }
    let c = pauli_coefficients(obs);
    let b = pauli_basis();
    Ok(add(&scale(&b[axis + 1], 3.0 * c[axis + 1]), &scale(&b[0], c[0])))
}

/// Density matrix of a one-qubit pure state.
pub fn density_of(state: &StateVector) -> Result<Mat2> {
    if state.n_qubits() != 1 {
        return Err(VqError::Dimension("expected a single-qubit state".into()));
    }
    let a = state.amplitudes();
    Ok([[a[0] * a[0].conj(), a[0] * a[1].conj()], [a[1] * a[0].conj(), a[1] * a[1].conj()]])
}

/// `Tr[rho O]`.
pub fn expectation_of(rho: &Mat2, o: &Mat2) -> f64 {
    trace(&gates::mul(rho, o)).re
}

/// Sweep variable of a self-consistency run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Values bound to feature 0 of the preparation circuit.
    Feature(Vec<f64>),
    /// Number of channel applications.
    Repetitions(Vec<u32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sweep_value: f64,
    pub ideal: f64,
    pub noisy: f64,
    pub noisy_stderr: f64,
    pub mitigated: f64,
    pub stderr: f64,
}

/// Prepare, apply the channel `m` times, sample the three Pauli axes with
/// `shots` each (exact expectations when `None`), and deconvolve. Points run in parallel on derived streams.
pub fn self_consistency_run(
    kind: &ChannelKind,
    prep: &Circuit,
    obs: &Observable,
    shots: Option<u64>,
    seed: u64,
    repetitions: u32,
    sweep: &Sweep,
) -> Result<Vec<SweepPoint>> {
    if prep.n_qubits != 1 {
        return Err(VqError::Dimension("preparation must act on one qubit".into()));
    }
    if shots == Some(0) {
        return Err(VqError::Invalid("shots must be at least 1".into()));
    }
    let o = observable_matrix(obs)?;
    let channel = make_channel(kind)?;
    let points: Vec<(f64, Vec<f64>, u32)> = match sweep {
        Sweep::Feature(v) => v.iter().map(|x| (*x, vec![*x], repetitions)).collect(),
        Sweep::Repetitions(ms) => ms.iter().map(|m| (*m as f64, vec![], *m)).collect(),
    };
    let b = pauli_basis();
    points
        .par_iter()
        .enumerate()
        .map(|(idx, (value, features, m))| {
            let rho0 = density_of(&prep.run_dense(features, &[])?)?;
            let ideal = expectation_of(&rho0, &o);
            let rho = (0..*m).fold(rho0, |r, _| channel.apply(&r));
            let mut noisy = [None; 3];
            for a in 0..3 {
                let exact = expectation_of(&rho, &b[a + 1]);
                noisy[a] = Some(match shots {
                    None => AxisEstimate { mean: exact, stderr: 0.0 },
                    Some(shots) => {
                        let p_plus = ((1.0 + exact) / 2.0).clamp(0.0, 1.0);
                        let mut r = rng::stream(seed, (idx * 3 + a) as u64);
                        let k = Binomial::new(shots, p_plus).map_err(|e| VqError::Invalid(e.to_string()))?.sample(&mut r);
                        let (mean, stderr) = pm_one_statistics(k, shots);
                        AxisEstimate { mean, stderr }
                    }
                });
            }
            let identity = AxisCorrection { offset: [0.0; 3], gain: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };
            let (noisy_mean, noisy_stderr) = deconvolve_with(&o, &noisy, &identity)?;
            let (mitigated, stderr) = deconvolve_with(&o, &noisy, &AxisCorrection::for_channel(kind, *m)?)?;
            Ok(SweepPoint { sweep_value: *value, ideal, noisy: noisy_mean, noisy_stderr, mitigated, stderr })
        })
        .collect()
}
