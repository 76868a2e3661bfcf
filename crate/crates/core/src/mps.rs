//! Matrix-product-state simulation with truncation and a fidelity ledger.
//!
//! Sites are rank-3 tensors `(chi_left, 2, chi_right)`. The state is kept in
//! mixed canonical form around an orthogonality center, so two-qubit gates
//! on the center pair yield exact Schmidt spectra for that bond.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqError};
use crate::statevector::{entropy_from_probs, gates, Mat2, Mat4, StateVector};
use crate::C64;

/// Largest register that [`MpsState::to_statevector`] will contract.
pub const MAX_CONTRACT_QUBITS: usize = 20;
/// Runs whose fidelity bound drops below `1 - UNRELIABLE_INFIDELITY` are flagged.
pub const UNRELIABLE_INFIDELITY: f64 = 1e-4;
/// Discarded weight below this leaves other bonds' stored spectra valid.
const STALE_WEIGHT: f64 = 1e-14;

/// Bond-dimension cap and relative singular-value cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationPolicy {
    pub chi_max: usize,
    #[serde(default = "default_rel_cutoff")]
    pub rel_cutoff: f64,
}

fn default_rel_cutoff() -> f64 {
    1e-9
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self { chi_max: 4096, rel_cutoff: default_rel_cutoff() }
    }
}

impl TruncationPolicy {
    pub fn new(chi_max: usize, rel_cutoff: f64) -> Result<Self> {
        let p = Self { chi_max, rel_cutoff };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chi_max < 1 {
            return Err(VqError::Invalid("chi_max must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.rel_cutoff) {
            return Err(VqError::Invalid(format!("rel_cutoff {} outside [0, 1)", self.rel_cutoff)));
        }
        Ok(())
    }
}

/// Per-gate truncation fidelities and their running product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityLedger {
    pub per_gate_fidelities: Vec<f64>,
    pub running_product: f64,
}

impl Default for FidelityLedger {
    fn default() -> Self {
        Self { per_gate_fidelities: Vec::new(), running_product: 1.0 }
    }
}

impl FidelityLedger {
    fn record(&mut self, f: f64) {
        self.per_gate_fidelities.push(f);
        self.running_product *= f;
    }

    /// Number of entries below one.
    pub fn truncations(&self) -> usize {
        self.per_gate_fidelities.iter().filter(|&&f| f < 1.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Site {
    dl: usize,
    dr: usize,
    // row-major (l, s, r)
    data: Vec<C64>,
}

impl Site {
    fn at(&self, l: usize, s: usize, r: usize) -> C64 {
        self.data[(l * 2 + s) * self.dr + r]
    }

    /// `(dl*2) x dr` matrix.
    fn left_matrix(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.dl * 2, self.dr, |row, r| self.data[row * self.dr + r])
    }

    /// `dl x (2*dr)` matrix.
    fn right_matrix(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.dl, 2 * self.dr, |l, col| self.data[l * 2 * self.dr + col])
    }

    fn from_left_matrix(m: &DMatrix<C64>) -> Self {
        let (rows, dr) = m.shape();
        let mut data = Vec::with_capacity(rows * dr);
        for row in 0..rows {
            for r in 0..dr {
                data.push(m[(row, r)]);
            }
        }
        Self { dl: rows / 2, dr, data }
    }

    fn from_right_matrix(m: &DMatrix<C64>) -> Self {
        let (dl, cols) = m.shape();
        let mut data = Vec::with_capacity(dl * cols);
        for l in 0..dl {
            for c in 0..cols {
                data.push(m[(l, c)]);
            }
        }
        Self { dl, dr: cols / 2, data }
    }
}

/// Matrix-product state in mixed canonical form.
#[derive(Debug, Clone, PartialEq)]
pub struct MpsState {
    n_qubits: usize,
    sites: Vec<Site>,
    // spectra[b] lives on the bond between sites b and b+1
    spectra: Vec<Vec<f64>>,
    center: usize,
    stale: bool,
    ledger: FidelityLedger,
}

/// Product state `|0...0>`.
pub fn mps_from_ground(n: usize) -> Result<MpsState> {
    MpsState::ground(n)
}

impl MpsState {
    pub fn ground(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(VqError::Invalid("MPS needs at least one qubit".into()));
        }
        let site = Site { dl: 1, dr: 1, data: vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)] };
        Ok(Self {
            n_qubits: n,
            sites: vec![site; n],
            spectra: vec![vec![1.0]; n - 1],
            center: 0,
            stale: false,
            ledger: FidelityLedger::default(),
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn ledger(&self) -> &FidelityLedger {
        &self.ledger
    }

    pub fn canonical_center(&self) -> usize {
        self.center
    }

    /// Dimension of every internal bond.
    pub fn bond_dimensions(&self) -> Vec<usize> {
        self.sites[..self.n_qubits - 1].iter().map(|s| s.dr).collect()
    }

    pub fn max_bond_dimension(&self) -> usize {
        self.bond_dimensions().into_iter().max().unwrap_or(1)
    }

    /// Stored singular values of bond `k` (`1 <= k <= n-1`).
    pub fn singular_values(&self, k: usize) -> Result<&[f64]> {
        self.check_bond(k)?;
        Ok(&self.spectra[k - 1])
    }

    /// Product of all recorded per-gate fidelities.
    pub fn fidelity_lower_bound(&self) -> f64 {
        self.ledger.running_product
    }

    pub fn is_reliable(&self) -> bool {
        1.0 - self.fidelity_lower_bound() <= UNRELIABLE_INFIDELITY
    }

    fn check_site(&self, q: usize) -> Result<()> {
        if q >= self.n_qubits {
            Err(VqError::Qubit(format!("qubit {q} out of range for {} qubits", self.n_qubits)))
        } else {
            Ok(())
        }
    }

    fn check_bond(&self, k: usize) -> Result<()> {
        if k == 0 || k >= self.n_qubits {
            Err(VqError::Invalid(format!("bond {k} outside 1..{}", self.n_qubits)))
        } else {
            Ok(())
        }
    }

    /// Apply a single-qubit unitary to the local tensor.
    pub fn apply_one_qubit(&mut self, q: usize, m: &Mat2) -> Result<()> {
        self.check_site(q)?;
        let dev = gates::unitarity_deviation2(m);
        if dev > 1e-8 {
            return Err(VqError::NonUnitary(dev));
        }
        let site = &mut self.sites[q];
        let dr = site.dr;
        for l in 0..site.dl {
            for r in 0..dr {
                let a0 = site.data[(l * 2) * dr + r];
                let a1 = site.data[(l * 2 + 1) * dr + r];
                site.data[(l * 2) * dr + r] = m[0][0] * a0 + m[0][1] * a1;
                site.data[(l * 2 + 1) * dr + r] = m[1][0] * a0 + m[1][1] * a1;
            }
        }
        Ok(())
    }

    fn move_center_right(&mut self) {
        let c = self.center;
        let qr = self.sites[c].left_matrix().qr();
        let (q, r) = (qr.q(), qr.r());
        self.sites[c] = Site::from_left_matrix(&q);
        let next = &self.sites[c + 1];
        let merged = &r * next.right_matrix();
        self.sites[c + 1] = Site::from_right_matrix(&merged);
        self.center = c + 1;
    }

    fn move_center_left(&mut self) {
        let c = self.center;
        // A = L Q from the QR of A^dagger
        let qr = self.sites[c].right_matrix().adjoint().qr();
        let (q, r) = (qr.q(), qr.r());
        self.sites[c] = Site::from_right_matrix(&q.adjoint());
        let prev = &self.sites[c - 1];
        let merged = prev.left_matrix() * r.adjoint();
        self.sites[c - 1] = Site::from_left_matrix(&merged);
        self.center = c - 1;
    }

    fn move_center_to(&mut self, target: usize) {
        while self.center < target {
            self.move_center_right();
        }
        while self.center > target {
            self.move_center_left();
        }
    }

    /// Apply a 4x4 unitary to sites `(i, i+1)`, truncating under `policy`.
    pub fn apply_two_qubit(&mut self, gate: &Mat4, i: usize, policy: &TruncationPolicy) -> Result<()> {
        policy.validate()?;
        if i + 1 >= self.n_qubits {
            return Err(VqError::Qubit(format!("site pair ({i}, {}) out of range", i + 1)));
        }
        let dev = gates::unitarity_deviation(gate);
        if dev > 1e-8 {
            return Err(VqError::NonUnitary(dev));
        }
        self.move_center_to(i);
        let (a, b) = (&self.sites[i], &self.sites[i + 1]);
        let (dl, dm, dr) = (a.dl, a.dr, b.dr);
        // theta[l, s1, s2, r]
        let mut theta = vec![C64::new(0.0, 0.0); dl * 4 * dr];
        for l in 0..dl {
            for s1 in 0..2 {
                for m in 0..dm {
                    let x = a.at(l, s1, m);
                    if x == C64::new(0.0, 0.0) {
                        continue;
                    }
                    for s2 in 0..2 {
                        let base = ((l * 2 + s1) * 2 + s2) * dr;
                        let brow = &b.data[(m * 2 + s2) * dr..(m * 2 + s2 + 1) * dr];
                        for (t, y) in theta[base..base + dr].iter_mut().zip(brow) {
                            *t += x * y;
                        }
                    }
                }
            }
        }
        let mut mat = DMatrix::<C64>::zeros(dl * 2, 2 * dr);
        for l in 0..dl {
            for r in 0..dr {
                let v = [
                    theta[((l * 2) * 2) * dr + r],
                    theta[((l * 2) * 2 + 1) * dr + r],
                    theta[((l * 2 + 1) * 2) * dr + r],
                    theta[((l * 2 + 1) * 2 + 1) * dr + r],
                ];
                for (out, row) in gate.iter().enumerate() {
                    let val = row[0] * v[0] + row[1] * v[1] + row[2] * v[2] + row[3] * v[3];
                    let (s1, s2) = (out >> 1, out & 1);
                    mat[(l * 2 + s1, s2 * dr + r)] = val;
                }
            }
        }
        let (lambdas, u, vt) = sorted_svd(mat)?;
        let total: f64 = lambdas.iter().map(|l| l * l).sum();
        let l0 = lambdas[0];
        let keep = lambdas
            .iter()
            .enumerate()
            .take_while(|(j, &l)| *j < policy.chi_max && l > 0.0 && l / l0 >= policy.rel_cutoff)
            .count()
            .max(1);
        let kept_weight: f64 = lambdas[..keep].iter().map(|l| l * l).sum();
        let fidelity = if keep == lambdas.len() { 1.0 } else { (kept_weight / total).powi(2) };
        self.ledger.record(fidelity);
        if total - kept_weight > STALE_WEIGHT * total {
            self.stale = true;
        }
        let norm = kept_weight.sqrt();
        let kept: Vec<f64> = lambdas[..keep].iter().map(|l| l / norm).collect();
        let left = u.columns(0, keep).into_owned();
        let mut right = vt.rows(0, keep).into_owned();
        for (j, lam) in kept.iter().enumerate() {
            right.row_mut(j).scale_mut(*lam);
        }
        self.sites[i] = Site::from_left_matrix(&left);
        self.sites[i + 1] = Site::from_right_matrix(&right);
        self.spectra[i] = kept;
        self.center = i + 1;
        Ok(())
    }

    /// Apply a 4x4 unitary to qubits `(i, j)` in any order; `i` is the
    /// high-order qubit of the gate. Non-adjacent pairs are routed with
    /// SWAPs that each pass through the policy and the ledger.
    pub fn apply_nonadjacent(&mut self, gate: &Mat4, i: usize, j: usize, policy: &TruncationPolicy) -> Result<()> {
        self.check_site(i)?;
        self.check_site(j)?;
        if i == j {
            return Err(VqError::Qubit(format!("repeated qubit index {i}")));
        }
        let (a, b) = (i.min(j), i.max(j));
        let oriented = if i < j { *gate } else { gates::flip_qubits(gate) };
        let swap = gates::swap();
        for k in (a + 1..b).rev() {
            self.apply_two_qubit(&swap, k, policy)?;
        }
        self.apply_two_qubit(&oriented, a, policy)?;
        for k in a + 1..b {
            self.apply_two_qubit(&swap, k, policy)?;
        }
        Ok(())
    }

    /// Recompute every bond spectrum exactly by a full canonical sweep.
    pub fn refresh_spectra(&mut self) -> Result<()> {
        self.move_center_to(self.n_qubits - 1);
        for c in (1..self.n_qubits).rev() {
            let (lambdas, u, vt) = sorted_svd(self.sites[c].right_matrix())?;
            let keep = lambdas.iter().take_while(|&&l| l > 0.0).count().max(1);
            let lam = &lambdas[..keep];
            let norm: f64 = lam.iter().map(|l| l * l).sum::<f64>().sqrt();
            self.sites[c] = Site::from_right_matrix(&vt.rows(0, keep).into_owned());
            let mut us = u.columns(0, keep).into_owned();
            for (j, l) in lam.iter().enumerate() {
                us.column_mut(j).scale_mut(*l);
            }
            let merged = self.sites[c - 1].left_matrix() * us;
            self.sites[c - 1] = Site::from_left_matrix(&merged);
            self.spectra[c - 1] = lam.iter().map(|l| l / norm).collect();
        }
        self.center = 0;
        self.stale = false;
        Ok(())
    }

    /// Von Neumann entropy (nats) of bond `k` between sites `k-1` and `k`.
    pub fn bond_entropy(&mut self, k: usize) -> Result<f64> {
        self.check_bond(k)?;
        if self.stale {
            self.refresh_spectra()?;
        }
        Ok(entropy_from_probs(self.spectra[k - 1].iter().map(|l| l * l)))
    }

    /// Entropies of bonds `1..n`.
    pub fn bond_entropies(&mut self) -> Result<Vec<f64>> {
        if self.stale {
            self.refresh_spectra()?;
        }
        Ok(self.spectra.iter().map(|s| entropy_from_probs(s.iter().map(|l| l * l))).collect())
    }

    /// Full contraction into a dense state.
    pub fn to_statevector(&self) -> Result<StateVector> {
        if self.n_qubits > MAX_CONTRACT_QUBITS {
            return Err(VqError::TooLarge(self.n_qubits));
        }
        // acc is (2^k) x chi, row-major
        let mut acc = vec![C64::new(1.0, 0.0)];
        let mut rows = 1usize;
        for site in &self.sites {
            let (dl, dr) = (site.dl, site.dr);
            let mut next = vec![C64::new(0.0, 0.0); rows * 2 * dr];
            for p in 0..rows {
                for l in 0..dl {
                    let x = acc[p * dl + l];
                    if x == C64::new(0.0, 0.0) {
                        continue;
                    }
                    for s in 0..2 {
                        let out = &mut next[(p * 2 + s) * dr..(p * 2 + s + 1) * dr];
                        let src = &site.data[(l * 2 + s) * dr..(l * 2 + s + 1) * dr];
                        for (o, y) in out.iter_mut().zip(src) {
                            *o += x * y;
                        }
                    }
                }
            }
            acc = next;
            rows *= 2;
        }
        StateVector::normalized(acc)
    }
}

/// Thin SVD with singular values sorted descending; ties keep the lower index.
pub(crate) fn sorted_svd(m: DMatrix<C64>) -> Result<(Vec<f64>, DMatrix<C64>, DMatrix<C64>)> {
    let (rows, cols) = m.shape();
    let fm = faer::Mat::<C64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let svd = fm.thin_svd().map_err(|e| VqError::Invalid(format!("SVD failed: {e:?}")))?;
    let (u, v, s) = (svd.U(), svd.V(), svd.S().column_vector());
    let k = rows.min(cols);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].re.partial_cmp(&s[a].re).unwrap_or(std::cmp::Ordering::Equal));
    let lambdas: Vec<f64> = order.iter().map(|&j| s[j].re).collect();
    let u_sorted = DMatrix::from_fn(rows, k, |r, c| u[(r, order[c])]);
    let vt_sorted = DMatrix::from_fn(k, cols, |r, c| v[(c, order[r])].conj());
    Ok((lambdas, u_sorted, vt_sorted))
}

/// Functional form of [`MpsState::apply_two_qubit`].
pub fn mps_apply_two_qubit(mps: &MpsState, gate: &Mat4, site: usize, policy: &TruncationPolicy) -> Result<MpsState> {
    let mut out = mps.clone();
    out.apply_two_qubit(gate, site, policy)?;
    Ok(out)
}

/// Functional form of [`MpsState::apply_nonadjacent`].
pub fn mps_apply_nonadjacent(
    mps: &MpsState,
    gate: &Mat4,
    pair: (usize, usize),
    policy: &TruncationPolicy,
) -> Result<MpsState> {
    let mut out = mps.clone();
    out.apply_nonadjacent(gate, pair.0, pair.1, policy)?;
    Ok(out)
}
