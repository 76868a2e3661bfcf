//! Dense state-vector simulation.
//!
//! Qubit 0 is the most significant bit of the computational-basis index, so
//! `|q0 q1 ... q_{n-1}>` maps to index `sum_q q_i 2^(n-1-i)`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Result, VqError};
use crate::rng;
use crate::C64;

/// Default cap on the dense backend.
pub const MAX_DENSE_QUBITS: usize = 24;
/// Eigenvalues at or below this floor contribute nothing to entropies.
pub const EIG_FLOOR: f64 = 1e-14;

const PAR_THRESHOLD: usize = 1 << 14;

pub type Mat2 = [[C64; 2]; 2];
pub type Mat4 = [[C64; 4]; 4];

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

/// Single-qubit gate matrices.
pub mod gates {
    use super::*;

    pub fn identity() -> Mat2 {
        [[ONE, ZERO], [ZERO, ONE]]
    }
    pub fn x() -> Mat2 {
        [[ZERO, ONE], [ONE, ZERO]]
    }
    pub fn y() -> Mat2 {
        [[ZERO, -I], [I, ZERO]]
    }
    pub fn z() -> Mat2 {
        [[ONE, ZERO], [ZERO, -ONE]]
    }
    pub fn h() -> Mat2 {
        let s = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        [[s, s], [s, -s]]
    }
    pub fn s_dag() -> Mat2 {
        [[ONE, ZERO], [ZERO, -I]]
    }
    pub fn rx(theta: f64) -> Mat2 {
        let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
        [[C64::new(c, 0.0), C64::new(0.0, -s)], [C64::new(0.0, -s), C64::new(c, 0.0)]]
    }
    pub fn ry(theta: f64) -> Mat2 {
        let (c, s) = ((theta / 2.0).cos(), (theta / 2.0).sin());
        [[C64::new(c, 0.0), C64::new(-s, 0.0)], [C64::new(s, 0.0), C64::new(c, 0.0)]]
    }
    pub fn rz(theta: f64) -> Mat2 {
        [[C64::from_polar(1.0, -theta / 2.0), ZERO], [ZERO, C64::from_polar(1.0, theta / 2.0)]]
    }
    /// `diag(1, e^{i theta})`.
    pub fn phase(theta: f64) -> Mat2 {
        [[ONE, ZERO], [ZERO, C64::from_polar(1.0, theta)]]
    }

    pub fn dagger(m: &Mat2) -> Mat2 {
        [[m[0][0].conj(), m[1][0].conj()], [m[0][1].conj(), m[1][1].conj()]]
    }

    pub fn mul(a: &Mat2, b: &Mat2) -> Mat2 {
        let mut out = [[ZERO; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        out
    }

    /// Controlled `u` with the control on the first qubit of the pair.
    pub fn controlled(u: &Mat2) -> Mat4 {
        let mut m = [[ZERO; 4]; 4];
        m[0][0] = ONE;
        m[1][1] = ONE;
        m[2][2] = u[0][0];
        m[2][3] = u[0][1];
        m[3][2] = u[1][0];
        m[3][3] = u[1][1];
        m
    }

    pub fn cnot() -> Mat4 {
        controlled(&x())
    }

    pub fn swap() -> Mat4 {
        let mut m = [[ZERO; 4]; 4];
        m[0][0] = ONE;
        m[1][2] = ONE;
        m[2][1] = ONE;
        m[3][3] = ONE;
        m
    }

    /// `exp(-i phi Z⊗Z / 2)`.
    pub fn rzz(phi: f64) -> Mat4 {
        let mut m = [[ZERO; 4]; 4];
        let a = C64::from_polar(1.0, -phi / 2.0);
        let b = C64::from_polar(1.0, phi / 2.0);
        m[0][0] = a;
        m[1][1] = b;
        m[2][2] = b;
        m[3][3] = a;
        m
    }

    pub fn kron(a: &Mat2, b: &Mat2) -> Mat4 {
        let mut m = [[ZERO; 4]; 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        m[2 * i + k][2 * j + l] = a[i][j] * b[k][l];
                    }
                }
            }
        }
        m
    }

    pub fn mul4(a: &Mat4, b: &Mat4) -> Mat4 {
        let mut out = [[ZERO; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = ZERO;
                for k in 0..4 {
                    acc += a[i][k] * b[k][j];
                }
                out[i][j] = acc;
            }
        }
        out
    }

    pub fn dagger4(m: &Mat4) -> Mat4 {
        let mut out = [[ZERO; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = m[j][i].conj();
            }
        }
        out
    }

    /// Same gate with the roles of the two qubits exchanged.
    pub fn flip_qubits(m: &Mat4) -> Mat4 {
        let p = [0usize, 2, 1, 3];
        let mut out = [[ZERO; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[p[i]][p[j]] = m[i][j];
            }
        }
        out
    }

    /// Frobenius norm of `U U^dagger - I`.
    pub fn unitarity_deviation(m: &Mat4) -> f64 {
        let prod = mul4(m, &dagger4(m));
        let mut acc = 0.0;
        for (i, row) in prod.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { ONE } else { ZERO };
                acc += (v - target).norm_sqr();
            }
        }
        acc.sqrt()
    }

    pub fn unitarity_deviation2(m: &Mat2) -> f64 {
        let prod = mul(m, &dagger(m));
        let mut acc = 0.0;
        for (i, row) in prod.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let target = if i == j { ONE } else { ZERO };
                acc += (v - target).norm_sqr();
            }
        }
        acc.sqrt()
    }
}

/// A gate as accepted by [`apply_gate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    /// Arbitrary single-qubit unitary on one target.
    Single(Mat2),
    /// Arbitrary two-qubit unitary; the first target is the high-order qubit.
    Two(Mat4),
    /// `u` on the last target, conditioned on all other targets being `|1>`.
    /// With a single target it is just `u`.
    Controlled(Mat2),
}

/// Dense pure state on `n_qubits` qubits.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amps: Vec<C64>,
}

impl StateVector {
    /// `|0...0>`.
    pub fn zero(n_qubits: usize) -> Result<Self> {
        Self::basis(n_qubits, 0)
    }

    /// Computational basis state `|index>`.
    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        if n_qubits == 0 {
            return Err(VqError::Invalid("state needs at least one qubit".into()));
        }
        if n_qubits > MAX_DENSE_QUBITS {
            return Err(VqError::TooLarge(n_qubits));
        }
        let dim = 1usize << n_qubits;
        if index >= dim {
            return Err(VqError::Dimension(format!("basis index {index} out of range for {n_qubits} qubits")));
        }
        let mut amps = vec![ZERO; dim];
        amps[index] = ONE;
        Ok(Self { n_qubits, amps })
    }

    /// Wrap amplitudes, checking the length is a power of two and the norm is one.
    pub fn from_amplitudes(amps: Vec<C64>) -> Result<Self> {
        let dim = amps.len();
        if dim < 2 || !dim.is_power_of_two() {
            return Err(VqError::Dimension(format!("amplitude length {dim} is not a power of two >= 2")));
        }
        let n_qubits = dim.trailing_zeros() as usize;
        if n_qubits > MAX_DENSE_QUBITS {
            return Err(VqError::TooLarge(n_qubits));
        }
        let s = Self { n_qubits, amps };
        let norm = s.norm();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(VqError::Invalid(format!("state norm {norm} differs from 1")));
        }
        Ok(s)
    }

    /// Normalise arbitrary nonzero amplitudes.
    pub fn normalized(mut amps: Vec<C64>) -> Result<Self> {
        let norm: f64 = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(VqError::Invalid("cannot normalise a zero vector".into()));
        }
        for a in amps.iter_mut() {
            *a /= norm;
        }
        Self::from_amplitudes(amps)
    }

    /// Haar-random state: i.i.d. standard complex normal entries, normalised.
    pub fn haar_random(n_qubits: usize, rng: &mut rng::Rng) -> Result<Self> {
        let dim = 1usize << n_qubits;
        let amps: Vec<C64> = (0..dim)
            .map(|_| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                C64::new(re, im)
            })
            .collect();
        Self::normalized(amps)
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn into_amplitudes(self) -> Vec<C64> {
        self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Rescale to unit norm, returning the norm before rescaling.
    pub fn renormalize(&mut self) -> f64 {
        let n = self.norm();
        if n > 0.0 {
            for a in self.amps.iter_mut() {
                *a /= n;
            }
        }
        n
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &StateVector) -> Result<C64> {
        if self.dim() != other.dim() {
            return Err(VqError::Dimension("inner product of states with different sizes".into()));
        }
        Ok(self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum())
    }

    /// `|<self|other>|^2`.
    pub fn fidelity(&self, other: &StateVector) -> Result<f64> {
        Ok(self.inner(other)?.norm_sqr())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    fn mask(&self, q: usize) -> usize {
        1usize << (self.n_qubits - 1 - q)
    }

    fn check_qubit(&self, q: usize) -> Result<()> {
        if q >= self.n_qubits {
            Err(VqError::Qubit(format!("qubit {q} out of range for {} qubits", self.n_qubits)))
        } else {
            Ok(())
        }
    }

    /// Apply a single-qubit unitary in place.
    pub fn apply_1q(&mut self, q: usize, m: &Mat2) -> Result<()> {
        self.check_qubit(q)?;
        let stride = self.mask(q);
        let kernel = |chunk: &mut [C64]| {
            let (lo, hi) = chunk.split_at_mut(stride);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x0, x1) = (*a, *b);
                *a = m[0][0] * x0 + m[0][1] * x1;
                *b = m[1][0] * x0 + m[1][1] * x1;
            }
        };
        if self.amps.len() >= PAR_THRESHOLD {
            self.amps.par_chunks_mut(2 * stride).for_each(kernel);
        } else {
            self.amps.chunks_mut(2 * stride).for_each(kernel);
        }
        Ok(())
    }

    /// Apply `u` on `target` conditioned on every control qubit being `|1>`.
    /// Controls are handled by index masking, not decomposition.
    pub fn apply_controlled(&mut self, controls: &[usize], target: usize, u: &Mat2) -> Result<()> {
        self.check_qubit(target)?;
        let mut cmask = 0usize;
        for &c in controls {
            self.check_qubit(c)?;
            if c == target || cmask & self.mask(c) != 0 {
                return Err(VqError::Qubit(format!("repeated qubit index {c}")));
            }
            cmask |= self.mask(c);
        }
        if cmask == 0 {
            return self.apply_1q(target, u);
        }
        let stride = self.mask(target);
        let kernel = |(ci, chunk): (usize, &mut [C64])| {
            let base = ci * 2 * stride;
            let (lo, hi) = chunk.split_at_mut(stride);
            for (k, (a, b)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
                if (base + k) & cmask == cmask {
                    let (x0, x1) = (*a, *b);
                    *a = u[0][0] * x0 + u[0][1] * x1;
                    *b = u[1][0] * x0 + u[1][1] * x1;
                }
            }
        };
        if self.amps.len() >= PAR_THRESHOLD {
            self.amps.par_chunks_mut(2 * stride).enumerate().for_each(kernel);
        } else {
            self.amps.chunks_mut(2 * stride).enumerate().for_each(kernel);
        }
        Ok(())
    }

    /// Apply a general two-qubit unitary; `q0` is the high-order qubit of `m`.
    pub fn apply_2q(&mut self, q0: usize, q1: usize, m: &Mat4) -> Result<()> {
        self.check_qubit(q0)?;
        self.check_qubit(q1)?;
        if q0 == q1 {
            return Err(VqError::Qubit(format!("repeated qubit index {q0}")));
        }
        let (m0, m1) = (self.mask(q0), self.mask(q1));
        let dim = self.amps.len();
        for i in 0..dim {
            if i & (m0 | m1) != 0 {
                continue;
            }
            let idx = [i, i | m1, i | m0, i | m0 | m1];
            let v = [self.amps[idx[0]], self.amps[idx[1]], self.amps[idx[2]], self.amps[idx[3]]];
            for r in 0..4 {
                self.amps[idx[r]] = m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2] + m[r][3] * v[3];
            }
        }
        Ok(())
    }

    /// Multiply every amplitude by `phase(index)`; used for diagonal gates.
    pub fn apply_diagonal<F: Fn(usize) -> C64 + Sync>(&mut self, phase: F) {
        if self.amps.len() >= PAR_THRESHOLD {
            self.amps.par_iter_mut().enumerate().for_each(|(i, a)| *a *= phase(i));
        } else {
            self.amps.iter_mut().enumerate().for_each(|(i, a)| *a *= phase(i));
        }
    }

    /// `exp(-i phi Z_a Z_b / 2)`.
    pub fn apply_rzz(&mut self, a: usize, b: usize, phi: f64) -> Result<()> {
        self.check_qubit(a)?;
        self.check_qubit(b)?;
        if a == b {
            return Err(VqError::Qubit(format!("repeated qubit index {a}")));
        }
        let (ma, mb) = (self.mask(a), self.mask(b));
        let same = C64::from_polar(1.0, -phi / 2.0);
        let diff = C64::from_polar(1.0, phi / 2.0);
        self.apply_diagonal(|i| if ((i & ma) != 0) == ((i & mb) != 0) { same } else { diff });
        Ok(())
    }

    /// Reduced state of the kept qubits, in the order given.
    pub fn partial_trace(&self, keep: &[usize]) -> Result<DensityMatrix> {
        if keep.is_empty() {
            return Err(VqError::Invalid("partial trace needs a nonempty keep set".into()));
        }
        let mut seen = 0usize;
        for &q in keep {
            self.check_qubit(q)?;
            if seen & self.mask(q) != 0 {
                return Err(VqError::Qubit(format!("repeated qubit index {q}")));
            }
            seen |= self.mask(q);
        }
        let k = keep.len();
        let dk = 1usize << k;
        let traced: Vec<usize> = (0..self.n_qubits).filter(|q| seen & self.mask(*q) == 0).collect();
        let db = 1usize << traced.len();
        // index(a, b) for kept pattern a and traced pattern b
        let kept_masks: Vec<usize> = keep.iter().map(|&q| self.mask(q)).collect();
        let traced_masks: Vec<usize> = traced.iter().map(|&q| self.mask(q)).collect();
        let spread = |pattern: usize, masks: &[usize]| -> usize {
            let w = masks.len();
            masks.iter().enumerate().fold(0usize, |acc, (j, m)| if pattern >> (w - 1 - j) & 1 == 1 { acc | m } else { acc })
        };
        let a_index: Vec<usize> = (0..dk).map(|a| spread(a, &kept_masks)).collect();
        let b_index: Vec<usize> = (0..db).map(|b| spread(b, &traced_masks)).collect();
        let mut rho = DMatrix::<C64>::zeros(dk, dk);
        for &bi in &b_index {
            for (a, &ai) in a_index.iter().enumerate() {
                let va = self.amps[ai | bi];
                if va == ZERO {
                    continue;
                }
                for (a2, &ai2) in a_index.iter().enumerate() {
                    rho[(a, a2)] += va * self.amps[ai2 | bi].conj();
                }
            }
        }
        Ok(DensityMatrix { entries: rho })
    }

    /// Schmidt coefficients across the cut after qubit `cut - 1`, in
    /// descending order (`1 <= cut < n`).
    pub fn schmidt_values(&self, cut: usize) -> Result<Vec<f64>> {
        if cut == 0 || cut >= self.n_qubits {
            return Err(VqError::Invalid(format!("cut {cut} outside 1..{}", self.n_qubits)));
        }
        let rows = 1usize << cut;
        let cols = self.amps.len() / rows;
        let m = faer::Mat::<C64>::from_fn(rows, cols, |r, c| self.amps[r * cols + c]);
        let mut sv: Vec<f64> = m.singular_values().map_err(|e| VqError::Invalid(format!("SVD failed: {e:?}")))?;
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        Ok(sv)
    }

    /// Von Neumann entropy (nats) across every cut `1..n`.
    pub fn bond_entropies(&self) -> Result<Vec<f64>> {
        (1..self.n_qubits)
            .map(|k| Ok(entropy_from_probs(self.schmidt_values(k)?.iter().map(|s| s * s))))
            .collect()
    }
}

/// `-sum p log p` over entries above the eigenvalue floor.
pub fn entropy_from_probs<I: IntoIterator<Item = f64>>(probs: I) -> f64 {
    probs.into_iter().filter(|&p| p > EIG_FLOOR).map(|p| -p * p.ln()).sum()
}

/// Apply `gate` to `targets`, returning the new state.
pub fn apply_gate(state: &StateVector, gate: &Gate, targets: &[usize]) -> Result<StateVector> {
    for (i, t) in targets.iter().enumerate() {
        if targets[..i].contains(t) {
            return Err(VqError::Qubit(format!("repeated target index {t}")));
        }
    }
    let mut out = state.clone();
    match gate {
        Gate::Single(m) => {
            if targets.len() != 1 {
                return Err(VqError::Dimension(format!("2x2 gate needs one target, got {}", targets.len())));
            }
            out.apply_1q(targets[0], m)?;
        }
        Gate::Two(m) => {
            if targets.len() != 2 {
                return Err(VqError::Dimension(format!("4x4 gate needs two targets, got {}", targets.len())));
            }
            out.apply_2q(targets[0], targets[1], m)?;
        }
        Gate::Controlled(u) => {
            let (target, controls) = targets
                .split_last()
                .ok_or_else(|| VqError::Dimension("controlled gate needs at least one target".into()))?;
            out.apply_controlled(controls, *target, u)?;
        }
    }
    Ok(out)
}

/// One Pauli string in bitmask form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PauliMasks {
    flip: usize,
    phase: usize,
    n_y: u32,
    support: usize,
}

/// Real-weighted sum of Pauli strings.
#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    n_qubits: usize,
    terms: Vec<(f64, String)>,
    masks: Vec<PauliMasks>,
}

impl Observable {
    pub fn new(terms: Vec<(f64, String)>) -> Result<Self> {
        let n = terms.first().map(|t| t.1.len()).ok_or_else(|| VqError::Invalid("observable has no terms".into()))?;
        if n == 0 {
            return Err(VqError::Invalid("empty Pauli string".into()));
        }
        let mut masks = Vec::with_capacity(terms.len());
        for (c, s) in &terms {
            if !c.is_finite() {
                return Err(VqError::Invalid(format!("non-finite coefficient {c}")));
            }
            if s.len() != n {
                return Err(VqError::Dimension(format!("Pauli string {s} has width {} but expected {n}", s.len())));
            }
            let mut m = PauliMasks { flip: 0, phase: 0, n_y: 0, support: 0 };
            for (q, ch) in s.chars().enumerate() {
                let bit = 1usize << (n - 1 - q);
                match ch.to_ascii_uppercase() {
                    'I' => {}
                    'X' => m.flip |= bit,
                    'Y' => {
                        m.flip |= bit;
                        m.phase |= bit;
                        m.n_y += 1;
                    }
                    'Z' => m.phase |= bit,
                    other => return Err(VqError::Invalid(format!("bad Pauli letter {other}"))),
                }
                if ch.to_ascii_uppercase() != 'I' {
                    m.support |= bit;
                }
            }
            masks.push(m);
        }
        let terms = terms.into_iter().map(|(c, s)| (c, s.to_ascii_uppercase())).collect();
        Ok(Self { n_qubits: n, terms, masks })
    }

    /// Single Pauli string with unit weight.
    pub fn pauli(s: &str) -> Result<Self> {
        Self::new(vec![(1.0, s.to_string())])
    }

    /// `Z` on one qubit of an `n`-qubit register.
    pub fn z_on(n: usize, q: usize) -> Result<Self> {
        if q >= n {
            return Err(VqError::Qubit(format!("qubit {q} out of range")));
        }
        let s: String = (0..n).map(|i| if i == q { 'Z' } else { 'I' }).collect();
        Self::pauli(&s)
    }

    /// Projector `|0...0><0...0|` on the listed qubits, as a Pauli sum.
    pub fn zero_projector(n: usize, qubits: &[usize]) -> Result<Self> {
        let k = qubits.len();
        let w = 1.0 / (1u64 << k) as f64;
        let mut terms = Vec::with_capacity(1 << k);
        for pattern in 0..(1usize << k) {
            let mut s = vec!['I'; n];
            for (j, &q) in qubits.iter().enumerate() {
                if pattern >> j & 1 == 1 {
                    s[q] = 'Z';
                }
            }
            terms.push((w, s.into_iter().collect()));
        }
        Self::new(terms)
    }

    /// Add a multiple of the identity.
    pub fn plus_identity(mut self, c: f64) -> Result<Self> {
        let id: String = "I".repeat(self.n_qubits);
        self.terms.push((c, id));
        Self::new(self.terms)
    }

    /// Multiply every coefficient by `c`.
    pub fn scaled(self, c: f64) -> Result<Self> {
        Self::new(self.terms.into_iter().map(|(w, s)| (w * c, s)).collect())
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn terms(&self) -> &[(f64, String)] {
        &self.terms
    }

    /// `sum |coefficient|`, an upper bound on `|<O>|` and on the operator norm.
    pub fn coefficient_norm(&self) -> f64 {
        self.terms.iter().map(|t| t.0.abs()).sum()
    }

    /// Dense matrix (small registers only).
    pub fn matrix(&self) -> Result<DMatrix<C64>> {
        if self.n_qubits > 12 {
            return Err(VqError::TooLarge(self.n_qubits));
        }
        let dim = 1usize << self.n_qubits;
        let mut m = DMatrix::<C64>::zeros(dim, dim);
        for ((c, _), pm) in self.terms.iter().zip(&self.masks) {
            for i in 0..dim {
                let (j, ph) = pauli_action(pm, i);
                m[(j, i)] += ph * *c;
            }
        }
        Ok(m)
    }
}

/// `P|i> = phase |j>`.
fn pauli_action(pm: &PauliMasks, i: usize) -> (usize, C64) {
    let sign = if (i & pm.phase).count_ones() % 2 == 1 { -1.0 } else { 1.0 };
    let iy = match pm.n_y % 4 {
        0 => ONE,
        1 => I,
        2 => -ONE,
        _ => -I,
    };
    // Y|b> = i (-1)^b |1-b>, Z|b> = (-1)^b |b>
    (i ^ pm.flip, iy * sign)
}

fn pauli_expectation(state: &StateVector, pm: &PauliMasks) -> f64 {
    let amps = &state.amps;
    let body = |i: usize| -> f64 {
        let (j, ph) = pauli_action(pm, i);
        (amps[j].conj() * ph * amps[i]).re
    };
    if amps.len() >= PAR_THRESHOLD {
        (0..amps.len()).into_par_iter().map(body).sum()
    } else {
        (0..amps.len()).map(body).sum()
    }
}

/// `<psi|O|psi>`.
pub fn expectation(state: &StateVector, obs: &Observable) -> Result<f64> {
    if obs.n_qubits != state.n_qubits {
        return Err(VqError::Dimension(format!(
            "observable width {} does not match {} qubits",
            obs.n_qubits, state.n_qubits
        )));
    }
    Ok(obs.terms.iter().zip(&obs.masks).map(|((c, _), pm)| c * pauli_expectation(state, pm)).sum())
}

/// Shot-based estimate of a single Pauli string.
///
/// Each qubit in the support is rotated into the Z basis (`H` for X,
/// `H S^dagger` for Y), the parity of the Z-basis outcome is sampled `shots`
/// times and the empirical mean and standard error are returned.
pub fn sample_expectation(state: &StateVector, pauli: &str, shots: u64, seed: u64) -> Result<(f64, f64)> {
    if shots == 0 {
        return Err(VqError::Invalid("shots must be at least 1".into()));
    }
    let obs = Observable::pauli(pauli)?;
    if obs.n_qubits != state.n_qubits {
        return Err(VqError::Dimension("Pauli string width does not match state".into()));
    }
    let mut rotated = state.clone();
    let mut support = 0usize;
    for (q, ch) in obs.terms[0].1.chars().enumerate() {
        match ch {
            'X' => rotated.apply_1q(q, &gates::h())?,
            'Y' => rotated.apply_1q(q, &gates::mul(&gates::h(), &gates::s_dag()))?,
            _ => {}
        }
        if ch != 'I' {
            support |= rotated.mask(q);
        }
    }
    let p_even: f64 = rotated
        .amps
        .iter()
        .enumerate()
        .filter(|(i, _)| (i & support).count_ones() % 2 == 0)
        .map(|(_, a)| a.norm_sqr())
        .sum();
    let mut rng = rng::stream(seed, 0);
    let k = Binomial::new(shots, p_even.clamp(0.0, 1.0))
        .map_err(|e| VqError::Invalid(e.to_string()))?
        .sample(&mut rng);
    Ok(pm_one_statistics(k, shots))
}

/// Mean and standard error of `k` `+1` outcomes out of `shots` `±1` draws.
pub fn pm_one_statistics(k: u64, shots: u64) -> (f64, f64) {
    let mean = (2.0 * k as f64 - shots as f64) / shots as f64;
    let var = (1.0 - mean * mean).max(0.0);
    (mean, (var / shots as f64).sqrt())
}

/// Dense density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    entries: DMatrix<C64>,
}

impl DensityMatrix {
    /// Wrap and validate (Hermitian, unit trace, PSD within 1e-10).
    pub fn new(entries: DMatrix<C64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() || entries.nrows() == 0 {
            return Err(VqError::Dimension("density matrix must be square and nonempty".into()));
        }
        let rho = Self { entries };
        rho.check_hermitian(1e-10)?;
        let tr = rho.trace();
        if (tr - 1.0).abs() > 1e-10 {
            return Err(VqError::Invalid(format!("trace {tr} differs from 1")));
        }
        if rho.eigenvalues().iter().any(|&l| l < -1e-10) {
            return Err(VqError::Invalid("density matrix has a negative eigenvalue".into()));
        }
        Ok(rho)
    }

    /// Wrap without validation; callers guarantee the invariants.
    pub fn from_matrix_unchecked(entries: DMatrix<C64>) -> Self {
        Self { entries }
    }

    pub fn from_pure(state: &StateVector) -> Self {
        let v = nalgebra::DVector::from_column_slice(state.amplitudes());
        Self { entries: &v * v.adjoint() }
    }

    /// Random full-rank density matrix `G G^dagger / Tr` with Ginibre `G`.
    pub fn random(dim: usize, rng: &mut rng::Rng) -> Self {
        let g = DMatrix::from_fn(dim, dim, |_, _| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            C64::new(re, im)
        });
        let mut m = &g * g.adjoint();
        let tr = m.trace();
        m /= tr;
        // explicit Hermitian symmetrisation against rounding
        let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
        Self { entries: m }
    }

    /// Single-qubit state with Bloch vector `r` (`|r| <= 1`).
    pub fn from_bloch(r: [f64; 3]) -> Self {
        let m = DMatrix::from_row_slice(
            2,
            2,
            &[
                C64::new((1.0 + r[2]) / 2.0, 0.0),
                C64::new(r[0] / 2.0, -r[1] / 2.0),
                C64::new(r[0] / 2.0, r[1] / 2.0),
                C64::new((1.0 - r[2]) / 2.0, 0.0),
            ],
        );
        Self { entries: m }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace().re
    }

    pub fn purity(&self) -> f64 {
        self.entries.iter().map(|c| c.norm_sqr()).sum()
    }

    fn check_hermitian(&self, tol: f64) -> Result<()> {
        let d = self.dim();
        for i in 0..d {
            for j in 0..d {
                let dev = (self.entries[(i, j)] - self.entries[(j, i)].conj()).norm();
                if dev > tol {
                    return Err(VqError::Invalid(format!("matrix is not Hermitian (deviation {dev:.3e})")));
                }
            }
        }
        Ok(())
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let sym = (&self.entries + self.entries.adjoint()) * C64::new(0.5, 0.0);
        SymmetricEigen::new(sym).eigenvalues.iter().copied().collect()
    }

    /// `Tr[rho O]` for a dense operator.
    pub fn expectation_matrix(&self, op: &DMatrix<C64>) -> Result<f64> {
        if op.nrows() != self.dim() || op.ncols() != self.dim() {
            return Err(VqError::Dimension("operator and density matrix sizes differ".into()));
        }
        Ok((&self.entries * op).trace().re)
    }
}

/// `-Tr[rho log rho]` in nats.
pub fn von_neumann_entropy(rho: &DensityMatrix) -> Result<f64> {
    rho.check_hermitian(1e-10)?;
    Ok(entropy_from_probs(rho.eigenvalues()))
}

/// `-log Tr[rho^2]`.
pub fn renyi2_entropy(rho: &DensityMatrix) -> f64 {
    -rho.purity().ln()
}

/// `(Tr[X rho], Tr[Y rho], Tr[Z rho])` for a single qubit.
pub fn bloch_vector(rho: &DensityMatrix) -> Result<[f64; 3]> {
    if rho.dim() != 2 {
        return Err(VqError::Dimension(format!("Bloch vector needs a qubit, got dimension {}", rho.dim())));
    }
    let m = &rho.entries;
    Ok([2.0 * m[(1, 0)].re, 2.0 * m[(1, 0)].im, (m[(0, 0)] - m[(1, 1)]).re])
}
