//! Circuit representation, ansatz construction and circuit families.
//!
//! A [`Circuit`] is an ordered list of gate records whose angles come from
//! parameter slots: constants, input features or trainable parameters.
//! Binding supplies the feature and parameter vectors.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqError};
use crate::mps::{MpsState, TruncationPolicy};
use crate::statevector::{gates, Mat2, Mat4, StateVector};
use crate::C64;

/// Gate names accepted in circuit records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    Rx,
    Ry,
    Rz,
    /// `diag(1, e^{i phi})`.
    P,
    H,
    X,
    Cnot,
    Cz,
    Crz,
    Cp,
    /// `exp(-i phi Z⊗Z / 2)`.
    Rzz,
    Swap,
    /// Z on the last target controlled by all others.
    Mcz,
    /// X on the last target controlled by all others.
    Mcx,
    /// Phase on the last target controlled by all others.
    Mcp,
}

impl GateKind {
    pub fn is_parametric(self) -> bool {
        matches!(self, Self::Rx | Self::Ry | Self::Rz | Self::P | Self::Crz | Self::Cp | Self::Rzz | Self::Mcp)
    }

    /// Gates of the form `exp(-i phi G)` whose generator has two eigenvalues
    /// half a unit apart, so the two-term shift rule is exact.
    pub fn is_shiftable(self) -> bool {
        matches!(self, Self::Rx | Self::Ry | Self::Rz | Self::P | Self::Cp | Self::Rzz | Self::Mcp)
    }

    /// Required number of targets, or `None` for one-or-more.
    pub fn arity(self) -> Option<usize> {
        match self {
            Self::Rx | Self::Ry | Self::Rz | Self::P | Self::H | Self::X => Some(1),
            Self::Cnot | Self::Cz | Self::Crz | Self::Cp | Self::Rzz | Self::Swap => Some(2),
            Self::Mcz | Self::Mcx | Self::Mcp => None,
        }
    }

    /// Gates equal to their own inverse.
    fn self_inverse(self) -> bool {
        matches!(self, Self::H | Self::X | Self::Cnot | Self::Cz | Self::Swap | Self::Mcz | Self::Mcx)
    }
}

/// Source of a gate angle. The angle is `scale * value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSlot", into = "RawSlot")]
pub enum Slot {
    Const(f64),
    Feature { index: usize, scale: f64 },
    Train { index: usize, scale: f64 },
    /// `scale * x_i * x_j`.
    FeatureProduct { i: usize, j: usize, scale: f64 },
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSlot {
    #[serde(rename = "const", default, skip_serializing_if = "Option::is_none")]
    constant: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_product: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
}

impl TryFrom<RawSlot> for Slot {
    type Error = String;
    fn try_from(r: RawSlot) -> std::result::Result<Self, String> {
        let scale = r.scale.unwrap_or(1.0);
        if !scale.is_finite() {
            return Err("slot scale must be finite".into());
        }
        let set = [r.constant.is_some(), r.feature.is_some(), r.train.is_some(), r.feature_product.is_some()];
        if set.iter().filter(|b| **b).count() != 1 {
            return Err("slot needs exactly one of const, feature, train, feature_product".into());
        }
        if let Some(c) = r.constant {
            if r.scale.is_some() {
                return Err("const slot takes no scale".into());
            }
            return Ok(Slot::Const(c));
        }
        if let Some(index) = r.feature {
            return Ok(Slot::Feature { index, scale });
        }
        if let Some(index) = r.train {
            return Ok(Slot::Train { index, scale });
        }
        let [i, j] = r.feature_product.expect("checked above");
        Ok(Slot::FeatureProduct { i, j, scale })
    }
}

impl From<Slot> for RawSlot {
    fn from(s: Slot) -> Self {
        let scale = |v: f64| if v == 1.0 { None } else { Some(v) };
        match s {
            Slot::Const(c) => RawSlot { constant: Some(c), ..Default::default() },
            Slot::Feature { index, scale: s } => RawSlot { feature: Some(index), scale: scale(s), ..Default::default() },
            Slot::Train { index, scale: s } => RawSlot { train: Some(index), scale: scale(s), ..Default::default() },
            Slot::FeatureProduct { i, j, scale: s } => {
                RawSlot { feature_product: Some([i, j]), scale: scale(s), ..Default::default() }
            }
        }
    }
}

impl Slot {
    pub fn feature(index: usize) -> Self {
        Slot::Feature { index, scale: 1.0 }
    }

    pub fn train(index: usize) -> Self {
        Slot::Train { index, scale: 1.0 }
    }

    /// Angle for the given bindings.
    pub fn value(&self, features: &[f64], params: &[f64]) -> Result<f64> {
        let get = |v: &[f64], i: usize, what: &str| {
            v.get(i).copied().ok_or_else(|| VqError::Invalid(format!("{what} index {i} is not bound (have {})", v.len())))
        };
        Ok(match *self {
            Slot::Const(c) => c,
            Slot::Feature { index, scale } => scale * get(features, index, "feature")?,
            Slot::Train { index, scale } => scale * get(params, index, "trainable")?,
            Slot::FeatureProduct { i, j, scale } => scale * get(features, i, "feature")? * get(features, j, "feature")?,
        })
    }

    fn negated(self) -> Self {
        match self {
            Slot::Const(c) => Slot::Const(-c),
            Slot::Feature { index, scale } => Slot::Feature { index, scale: -scale },
            Slot::Train { index, scale } => Slot::Train { index, scale: -scale },
            Slot::FeatureProduct { i, j, scale } => Slot::FeatureProduct { i, j, scale: -scale },
        }
    }
}

/// One gate record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Op {
    pub gate: GateKind,
    pub targets: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<Slot>,
}

impl Op {
    pub fn fixed(gate: GateKind, targets: Vec<usize>) -> Self {
        Self { gate, targets, slot: None }
    }

    pub fn param(gate: GateKind, targets: Vec<usize>, slot: Slot) -> Self {
        Self { gate, targets, slot: Some(slot) }
    }

    fn angle(&self, features: &[f64], params: &[f64]) -> Result<f64> {
        match &self.slot {
            Some(s) => s.value(features, params),
            None => Ok(0.0),
        }
    }
}

/// Dense-application form of a bound gate.
enum Kernel {
    One(usize, Mat2),
    Controlled(Vec<usize>, usize, Mat2),
    Rzz(usize, usize, f64),
    Two(usize, usize, Mat4),
}

fn kernel(gate: GateKind, t: &[usize], phi: f64) -> Kernel {
    use GateKind::*;
    match gate {
        Rx => Kernel::One(t[0], gates::rx(phi)),
        Ry => Kernel::One(t[0], gates::ry(phi)),
        Rz => Kernel::One(t[0], gates::rz(phi)),
        P => Kernel::One(t[0], gates::phase(phi)),
        H => Kernel::One(t[0], gates::h()),
        X => Kernel::One(t[0], gates::x()),
        Cnot => Kernel::Controlled(vec![t[0]], t[1], gates::x()),
        Cz => Kernel::Controlled(vec![t[0]], t[1], gates::z()),
        Crz => Kernel::Controlled(vec![t[0]], t[1], gates::rz(phi)),
        Cp => Kernel::Controlled(vec![t[0]], t[1], gates::phase(phi)),
        Rzz => Kernel::Rzz(t[0], t[1], phi),
        Swap => Kernel::Two(t[0], t[1], gates::swap()),
        Mcz | Mcx | Mcp => {
            let u = match gate {
                Mcz => gates::z(),
                Mcx => gates::x(),
                _ => gates::phase(phi),
            };
            let (last, rest) = t.split_last().expect("arity checked");
            Kernel::Controlled(rest.to_vec(), *last, u)
        }
    }
}

/// Apply one gate with a bound angle to a dense state.
pub fn apply_bound_dense(state: &mut StateVector, gate: GateKind, targets: &[usize], phi: f64) -> Result<()> {
    match kernel(gate, targets, phi) {
        Kernel::One(q, m) => state.apply_1q(q, &m),
        Kernel::Controlled(c, t, m) => state.apply_controlled(&c, t, &m),
        Kernel::Rzz(a, b, p) => state.apply_rzz(a, b, p),
        Kernel::Two(a, b, m) => state.apply_2q(a, b, &m),
    }
}

/// Apply one gate with a bound angle to an MPS.
pub fn apply_bound_mps(
    state: &mut MpsState,
    gate: GateKind,
    targets: &[usize],
    phi: f64,
    policy: &TruncationPolicy,
) -> Result<()> {
    match kernel(gate, targets, phi) {
        Kernel::One(q, m) => state.apply_one_qubit(q, &m),
        Kernel::Controlled(c, t, m) => match c.len() {
            0 => state.apply_one_qubit(t, &m),
            1 => state.apply_nonadjacent(&gates::controlled(&m), c[0], t, policy),
            k => Err(VqError::Unsupported(format!("{}-qubit gate on the MPS backend", k + 1))),
        },
        Kernel::Rzz(a, b, p) => state.apply_nonadjacent(&gates::rzz(p), a, b, policy),
        Kernel::Two(a, b, m) => state.apply_nonadjacent(&m, a, b, policy),
    }
}

/// Simulation backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Dense,
    Mps,
}

/// Ordered gate list on a fixed register.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Circuit {
    pub n_qubits: usize,
    pub ops: Vec<Op>,
}

/// Angle offset applied to one op during a shifted evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shift {
    pub op: usize,
    pub delta: f64,
}

impl Circuit {
    pub fn new(n_qubits: usize) -> Self {
        Self { n_qubits, ops: Vec::new() }
    }

    pub fn from_ops(n_qubits: usize, ops: Vec<Op>) -> Result<Self> {
        let c = Self { n_qubits, ops };
        c.validate()?;
        Ok(c)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Circuit = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Check arity, qubit ranges, distinct targets and slot presence.
    pub fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 {
            return Err(VqError::Invalid("circuit needs at least one qubit".into()));
        }
        for (k, op) in self.ops.iter().enumerate() {
            match op.gate.arity() {
                Some(a) if a != op.targets.len() => {
                    return Err(VqError::Invalid(format!(
                        "op {k}: {:?} takes {a} targets, got {}",
                        op.gate,
                        op.targets.len()
                    )))
                }
                None if op.targets.is_empty() => {
                    return Err(VqError::Invalid(format!("op {k}: {:?} needs at least one target", op.gate)))
                }
                _ => {}
            }
            for (i, t) in op.targets.iter().enumerate() {
                if *t >= self.n_qubits {
                    return Err(VqError::Qubit(format!("op {k}: qubit {t} out of range for {} qubits", self.n_qubits)));
                }
                if op.targets[..i].contains(t) {
                    return Err(VqError::Qubit(format!("op {k}: repeated qubit {t}")));
                }
            }
            match (op.gate.is_parametric(), &op.slot) {
                (true, None) => return Err(VqError::Invalid(format!("op {k}: {:?} needs a slot", op.gate))),
                (false, Some(_)) => return Err(VqError::Invalid(format!("op {k}: {:?} takes no slot", op.gate))),
                (_, Some(Slot::Const(c))) if !c.is_finite() => {
                    return Err(VqError::Invalid(format!("op {k}: non-finite constant")))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn push(&mut self, op: Op) {
        self.ops.push(op);
    }

    /// Append another circuit's ops.
    pub fn extend(&mut self, other: &Circuit) -> Result<()> {
        if other.n_qubits != self.n_qubits {
            return Err(VqError::Dimension("cannot concatenate circuits of different widths".into()));
        }
        self.ops.extend(other.ops.iter().cloned());
        Ok(())
    }

    /// One plus the largest trainable index, or 0.
    pub fn num_trainable(&self) -> usize {
        self.slots()
            .filter_map(|s| match s {
                Slot::Train { index, .. } => Some(index + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// One plus the largest feature index, or 0.
    pub fn num_features(&self) -> usize {
        self.slots()
            .filter_map(|s| match s {
                Slot::Feature { index, .. } => Some(index + 1),
                Slot::FeatureProduct { i, j, .. } => Some(i.max(j) + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    fn slots(&self) -> impl Iterator<Item = Slot> + '_ {
        self.ops.iter().filter_map(|o| o.slot)
    }

    pub fn two_qubit_gate_count(&self) -> usize {
        self.ops.iter().filter(|o| o.targets.len() >= 2).count()
    }

    /// Op indices and scales where trainable `index` appears.
    pub fn occurrences(&self, index: usize) -> Vec<(usize, f64)> {
        self.ops
            .iter()
            .enumerate()
            .filter_map(|(k, o)| match o.slot {
                Some(Slot::Train { index: i, scale }) if i == index => Some((k, scale)),
                _ => None,
            })
            .collect()
    }

    /// Replace every feature and trainable slot by its bound constant.
    pub fn bind(&self, features: &[f64], params: &[f64]) -> Result<Circuit> {
        let ops = self
            .ops
            .iter()
            .map(|o| {
                Ok(Op { gate: o.gate, targets: o.targets.clone(), slot: o.slot.map(|s| s.value(features, params).map(Slot::Const)).transpose()? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Circuit { n_qubits: self.n_qubits, ops })
    }

    /// Shift every trainable index by `offset`.
    pub fn offset_trainables(&self, offset: usize) -> Circuit {
        self.map_slots(|s| match s {
            Slot::Train { index, scale } => Slot::Train { index: index + offset, scale },
            other => other,
        })
    }

    /// Turn trainable slots into feature slots with the same index.
    pub fn trainables_as_features(&self) -> Circuit {
        self.map_slots(|s| match s {
            Slot::Train { index, scale } => Slot::Feature { index, scale },
            other => other,
        })
    }

    /// Turn feature slots into trainable slots with the same index.
    pub fn features_as_trainables(&self) -> Result<Circuit> {
        if self.slots().any(|s| matches!(s, Slot::FeatureProduct { .. })) {
            return Err(VqError::Unsupported("feature-product slots cannot become trainable".into()));
        }
        Ok(self.map_slots(|s| match s {
            Slot::Feature { index, scale } => Slot::Train { index, scale },
            other => other,
        }))
    }

    fn map_slots<F: Fn(Slot) -> Slot>(&self, f: F) -> Circuit {
        Circuit {
            n_qubits: self.n_qubits,
            ops: self.ops.iter().map(|o| Op { gate: o.gate, targets: o.targets.clone(), slot: o.slot.map(&f) }).collect(),
        }
    }

    /// Adjoint circuit: reversed order with negated angles.
    pub fn inverse(&self) -> Circuit {
        let ops = self
            .ops
            .iter()
            .rev()
            .map(|o| {
                debug_assert!(o.gate.self_inverse() || o.gate.is_parametric());
                Op { gate: o.gate, targets: o.targets.clone(), slot: o.slot.map(Slot::negated) }
            })
            .collect();
        Circuit { n_qubits: self.n_qubits, ops }
    }

    /// Apply to a dense state, optionally shifting one op's angle.
    pub fn apply_dense(&self, state: &mut StateVector, features: &[f64], params: &[f64], shift: Option<Shift>) -> Result<()> {
        let shifts: &[Shift] = match &shift {
            Some(s) => std::slice::from_ref(s),
            None => &[],
        };
        self.apply_dense_shifts(state, features, params, shifts)
    }

    /// Apply to a dense state with any number of per-op angle shifts.
    pub fn apply_dense_shifts(&self, state: &mut StateVector, features: &[f64], params: &[f64], shifts: &[Shift]) -> Result<()> {
        if state.n_qubits() != self.n_qubits {
            return Err(VqError::Dimension(format!("circuit on {} qubits, state on {}", self.n_qubits, state.n_qubits())));
        }
        for (k, op) in self.ops.iter().enumerate() {
            let mut phi = op.angle(features, params)?;
            for s in shifts.iter().filter(|s| s.op == k) {
                phi += s.delta;
            }
            apply_bound_dense(state, op.gate, &op.targets, phi)?;
        }
        Ok(())
    }

    /// Run from `|0...0>` on the dense backend.
    pub fn run_dense(&self, features: &[f64], params: &[f64]) -> Result<StateVector> {
        let mut s = StateVector::zero(self.n_qubits)?;
        self.apply_dense(&mut s, features, params, None)?;
        Ok(s)
    }

    pub fn run_dense_shifted(&self, features: &[f64], params: &[f64], shift: Shift) -> Result<StateVector> {
        let mut s = StateVector::zero(self.n_qubits)?;
        self.apply_dense(&mut s, features, params, Some(shift))?;
        Ok(s)
    }

    pub fn apply_mps(&self, state: &mut MpsState, features: &[f64], params: &[f64], policy: &TruncationPolicy) -> Result<()> {
        if state.n_qubits() != self.n_qubits {
            return Err(VqError::Dimension(format!("circuit on {} qubits, state on {}", self.n_qubits, state.n_qubits())));
        }
        for op in &self.ops {
            apply_bound_mps(state, op.gate, &op.targets, op.angle(features, params)?, policy)?;
        }
        Ok(())
    }

    /// Run from `|0...0>` on the MPS backend.
    pub fn run_mps(&self, features: &[f64], params: &[f64], policy: &TruncationPolicy) -> Result<MpsState> {
        let mut s = MpsState::ground(self.n_qubits)?;
        self.apply_mps(&mut s, features, params, policy)?;
        Ok(s)
    }

    /// Dense unitary, column `j` being the image of `|j>` (small registers only).
    pub fn unitary(&self, features: &[f64], params: &[f64]) -> Result<DMatrix<C64>> {
        if self.n_qubits > 12 {
            return Err(VqError::TooLarge(self.n_qubits));
        }
        let dim = 1usize << self.n_qubits;
        let mut u = DMatrix::<C64>::zeros(dim, dim);
        for j in 0..dim {
            let mut s = StateVector::basis(self.n_qubits, j)?;
            self.apply_dense(&mut s, features, params, None)?;
            for (i, a) in s.amplitudes().iter().enumerate() {
                u[(i, j)] = *a;
            }
        }
        Ok(u)
    }
}

/// Ansatz families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnsatzKind {
    Circuit1,
    Circuit2,
    Circuit3,
    ZzFeatureMap,
    PhaseEncoding,
    Custom,
}

/// Entangler connectivity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    #[default]
    Linear,
    Circular,
    Full,
}

impl Topology {
    /// Ordered qubit pairs of one entangling layer.
    pub fn edges(self, n: usize) -> Vec<(usize, usize)> {
        match self {
            Topology::Linear => (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
            Topology::Circular => {
                let mut e = Topology::Linear.edges(n);
                if n >= 2 {
                    e.push((n - 1, 0));
                }
                e
            }
            Topology::Full => (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnsatzSpec {
    pub kind: AnsatzKind,
    #[serde(default)]
    pub topology: Topology,
    pub n_qubits: usize,
    /// Circuit body for the `custom` kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<Circuit>,
}

impl AnsatzSpec {
    pub fn new(kind: AnsatzKind, topology: Topology, n_qubits: usize) -> Self {
        Self { kind, topology, n_qubits, custom: None }
    }
}

/// Two-qubit gate used by [`entangling_layer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Entangler {
    Cnot,
    Cz,
    /// Trainable CRZ; edge `e` uses trainable index `first_index + e`.
    Crz { first_index: usize },
}

/// One entangling layer over the topology's edges.
pub fn entangling_layer(topology: Topology, gate: Entangler, n: usize) -> Result<Vec<Op>> {
    if n < 2 {
        return Err(VqError::Invalid("entangling layer needs at least two qubits".into()));
    }
    Ok(topology
        .edges(n)
        .into_iter()
        .enumerate()
        .map(|(e, (a, b))| match gate {
            Entangler::Cnot => Op::fixed(GateKind::Cnot, vec![a, b]),
            Entangler::Cz => Op::fixed(GateKind::Cz, vec![a, b]),
            Entangler::Crz { first_index } => Op::param(GateKind::Crz, vec![a, b], Slot::train(first_index + e)),
        })
        .collect())
}

/// One layer of the requested ansatz. Feature maps use feature slots, the
/// variational forms use trainable slots numbered from zero.
pub fn build_ansatz(spec: &AnsatzSpec) -> Result<Circuit> {
    let n = spec.n_qubits;
    if n == 0 {
        return Err(VqError::Invalid("ansatz needs at least one qubit".into()));
    }
    let needs_pairs = matches!(spec.kind, AnsatzKind::Circuit2 | AnsatzKind::Circuit3 | AnsatzKind::ZzFeatureMap);
    if needs_pairs && n < 2 {
        return Err(VqError::Invalid(format!("{:?} needs at least two qubits", spec.kind)));
    }
    let mut ops = Vec::new();
    match spec.kind {
        AnsatzKind::Circuit1 => {
            for q in 0..n {
                ops.push(Op::param(GateKind::Ry, vec![q], Slot::train(2 * q)));
                ops.push(Op::param(GateKind::Rz, vec![q], Slot::train(2 * q + 1)));
            }
        }
        AnsatzKind::Circuit2 => {
            ops.extend((0..n).map(|q| Op::param(GateKind::Ry, vec![q], Slot::train(q))));
            ops.extend(entangling_layer(spec.topology, Entangler::Cnot, n)?);
        }
        AnsatzKind::Circuit3 => {
            ops.extend((0..n).map(|q| Op::param(GateKind::Ry, vec![q], Slot::train(q))));
            ops.extend(entangling_layer(spec.topology, Entangler::Crz { first_index: n }, n)?);
        }
        AnsatzKind::ZzFeatureMap => {
            ops.extend((0..n).map(|q| Op::fixed(GateKind::H, vec![q])));
            ops.extend((0..n).map(|q| Op::param(GateKind::Rz, vec![q], Slot::Feature { index: q, scale: 2.0 })));
            for (a, b) in spec.topology.edges(n) {
                ops.push(Op::param(GateKind::Rzz, vec![a, b], Slot::FeatureProduct { i: a, j: b, scale: 4.0 }));
            }
        }
        AnsatzKind::PhaseEncoding => {
            let slots: Vec<Slot> = (0..1usize << n).map(Slot::feature).collect();
            return phase_encoding_slots(n, &slots, false);
        }
        AnsatzKind::Custom => {
            let c = spec.custom.clone().ok_or_else(|| VqError::Invalid("custom ansatz needs a circuit".into()))?;
            if c.n_qubits != n {
                return Err(VqError::Dimension("custom circuit width differs from n_qubits".into()));
            }
            c.validate()?;
            return Ok(c);
        }
    }
    Circuit::from_ops(n, ops)
}

/// Expected trainable-parameter count of one variational layer.
pub fn parameter_count(kind: AnsatzKind, topology: Topology, n: usize) -> Option<usize> {
    match kind {
        AnsatzKind::Circuit1 => Some(2 * n),
        AnsatzKind::Circuit2 => Some(n),
        AnsatzKind::Circuit3 => Some(match topology {
            Topology::Linear => 2 * n - 1,
            Topology::Circular => 2 * n,
            Topology::Full => (n * n + n) / 2,
        }),
        AnsatzKind::ZzFeatureMap | AnsatzKind::PhaseEncoding => Some(0),
        AnsatzKind::Custom => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QnnMode {
    #[default]
    Alternated,
    Sequential,
}

/// Feature-map and variational blocks of a QNN.
#[derive(Debug, Clone, PartialEq)]
pub struct QnnBlocks {
    /// Feature map with every slot reading features.
    pub feature: Circuit,
    /// Variational layer with trainable indices `0..per_layer`.
    pub var: Circuit,
    pub per_layer: usize,
}

impl QnnBlocks {
    pub fn new(feature: &AnsatzSpec, var: &AnsatzSpec) -> Result<Self> {
        if feature.n_qubits != var.n_qubits {
            return Err(VqError::Dimension("feature map and variational form widths differ".into()));
        }
        let f = build_ansatz(feature)?.trainables_as_features();
        let v = build_ansatz(var)?.features_as_trainables()?;
        let per_layer = v.num_trainable();
        Ok(Self { feature: f, var: v, per_layer })
    }

    /// Variational layer `l` with its own trainable block.
    pub fn var_layer(&self, l: usize) -> Circuit {
        self.var.offset_trainables(l * self.per_layer)
    }

    pub fn build(&self, layers: usize, mode: QnnMode) -> Result<Circuit> {
        if layers == 0 {
            return Err(VqError::Invalid("QNN needs at least one layer".into()));
        }
        let mut c = Circuit::new(self.feature.n_qubits);
        match mode {
            QnnMode::Alternated => {
                for l in 0..layers {
                    c.extend(&self.feature)?;
                    c.extend(&self.var_layer(l))?;
                }
            }
            QnnMode::Sequential => {
                for _ in 0..layers {
                    c.extend(&self.feature)?;
                }
                for l in 0..layers {
                    c.extend(&self.var_layer(l))?;
                }
            }
        }
        Ok(c)
    }
}

/// `L` layers of feature map and variational form; features are shared
/// across layers and trainable slots are fresh per layer.
pub fn build_qnn(feature: &AnsatzSpec, var: &AnsatzSpec, layers: usize, mode: QnnMode) -> Result<Circuit> {
    QnnBlocks::new(feature, var)?.build(layers, mode)
}

fn check_power_of_two(d: usize) -> Result<usize> {
    if d < 2 || !d.is_power_of_two() {
        return Err(VqError::Dimension(format!("length {d} is not a power of two >= 2")));
    }
    Ok(d.trailing_zeros() as usize)
}

/// Ops imprinting phase `slot` on basis state `|k>` only.
fn phase_on_basis_state(n: usize, k: usize, slot: Slot) -> Vec<Op> {
    let zeros: Vec<usize> = (0..n).filter(|q| (k >> (n - 1 - q)) & 1 == 0).collect();
    let mut ops: Vec<Op> = zeros.iter().map(|&q| Op::fixed(GateKind::X, vec![q])).collect();
    ops.push(Op::param(GateKind::Mcp, (0..n).collect(), slot));
    ops.extend(zeros.iter().map(|&q| Op::fixed(GateKind::X, vec![q])));
    ops
}

/// `H^n` then one phase per basis state. With `relative`, `slots[k-1]` is the
/// phase of `|k>` relative to `|0...0>` and no gate acts on `|0...0>`;
/// otherwise `slots[k]` is the phase of `|k>` for every `k`.
pub fn phase_encoding_slots(n: usize, slots: &[Slot], relative: bool) -> Result<Circuit> {
    let d = 1usize << n;
    let expected = if relative { d - 1 } else { d };
    if slots.len() != expected {
        return Err(VqError::Dimension(format!("expected {expected} phase slots, got {}", slots.len())));
    }
    let mut ops: Vec<Op> = (0..n).map(|q| Op::fixed(GateKind::H, vec![q])).collect();
    let first = if relative { 1 } else { 0 };
    for (j, slot) in slots.iter().enumerate() {
        ops.extend(phase_on_basis_state(n, j + first, *slot));
    }
    Circuit::from_ops(n, ops)
}

/// State preparation `(1/sqrt d) sum_k e^{i theta_k} |k>` up to global phase,
/// using phases relative to `theta_0`.
pub fn phase_encoding(values: &[f64]) -> Result<Circuit> {
    let n = check_power_of_two(values.len())?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(VqError::Invalid("phase values must be finite".into()));
    }
    let slots: Vec<Slot> = values[1..].iter().map(|v| Slot::Const(v - values[0])).collect();
    phase_encoding_slots(n, &slots, true)
}

/// Diagonal block applying `e^{-i phi~_k}` on every `|k>`, `k >= 1`.
fn inverse_phase_block(phi: &[f64]) -> Result<Vec<Op>> {
    let n = check_power_of_two(phi.len())?;
    let mut ops = Vec::new();
    for k in 1..phi.len() {
        ops.extend(phase_on_basis_state(n, k, Slot::Const(-(phi[k] - phi[0]))));
    }
    Ok(ops)
}

/// Sign vector over `{-1, +1}` with its integer label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryPattern {
    pub bits: Vec<i8>,
}

impl BinaryPattern {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        check_power_of_two(bits.len())?;
        if bits.iter().any(|b| *b != 1 && *b != -1) {
            return Err(VqError::Invalid("pattern entries must be +1 or -1".into()));
        }
        Ok(Self { bits })
    }

    /// Pattern whose bit string `b_0 ... b_{d-1}`, read with `b_0` most
    /// significant, is the binary expansion of `label`; entry `j` is `(-1)^{b_j}`.
    pub fn from_label(label: u64, d: usize) -> Result<Self> {
        check_power_of_two(d)?;
        if d < 64 && label >> d != 0 {
            return Err(VqError::Invalid(format!("label {label} needs more than {d} bits")));
        }
        let bits = (0..d).map(|j| if (label >> (d - 1 - j)) & 1 == 1 { -1 } else { 1 }).collect();
        Ok(Self { bits })
    }

    pub fn label(&self) -> u64 {
        let d = self.bits.len();
        self.bits.iter().enumerate().fold(0u64, |acc, (j, b)| if *b == -1 { acc | 1 << (d - 1 - j) } else { acc })
    }

    pub fn n_qubits(&self) -> usize {
        self.bits.len().trailing_zeros() as usize
    }

    /// `(1/d) sum_j a_j b_j`.
    pub fn overlap(&self, other: &BinaryPattern) -> Result<f64> {
        if self.bits.len() != other.bits.len() {
            return Err(VqError::Dimension("patterns differ in length".into()));
        }
        let s: i64 = self.bits.iter().zip(&other.bits).map(|(a, b)| (*a as i64) * (*b as i64)).sum();
        Ok(s as f64 / self.bits.len() as f64)
    }
}

/// Multi-controlled Z gates fixing the signs of `pattern` after `H^n`,
/// up to a global sign.
fn hypergraph_sign_block(pattern: &BinaryPattern) -> Vec<Op> {
    let n = pattern.n_qubits();
    let d = pattern.bits.len();
    let flip = pattern.bits[0] == -1;
    let target: Vec<i8> = pattern.bits.iter().map(|b| if flip { -b } else { *b }).collect();
    let mut current = vec![1i8; d];
    let mut ops = Vec::new();
    for weight in 1..=n as u32 {
        for j in 1..d {
            if j.count_ones() != weight || current[j] == target[j] {
                continue;
            }
            let support: Vec<usize> = (0..n).filter(|q| (j >> (n - 1 - q)) & 1 == 1).collect();
            ops.push(Op::fixed(GateKind::Mcz, support));
            for (k, c) in current.iter_mut().enumerate() {
                if k & j == j {
                    *c = -*c;
                }
            }
        }
    }
    ops
}

/// `H^n` followed by the sign-fixing loop; prepares `(1/sqrt d) sum_j b_j |j>`
/// up to a global sign.
pub fn hypergraph_state_circuit(pattern: &BinaryPattern) -> Result<Circuit> {
    let n = pattern.n_qubits();
    let mut ops: Vec<Op> = (0..n).map(|q| Op::fixed(GateKind::H, vec![q])).collect();
    ops.extend(hypergraph_sign_block(pattern));
    Circuit::from_ops(n, ops)
}

/// `|<psi_phi|psi_theta>|^2` for phase-encoded vectors.
pub fn neuron_activation_closed_form(theta: &[f64], phi: &[f64]) -> Result<f64> {
    if theta.len() != phi.len() {
        return Err(VqError::Dimension("theta and phi lengths differ".into()));
    }
    let d = theta.len();
    check_power_of_two(d)?;
    let s: C64 = theta.iter().zip(phi).map(|(t, p)| C64::from_polar(1.0, t - p)).sum();
    Ok((s.norm_sqr() / (d * d) as f64).clamp(0.0, 1.0))
}

/// Data qubits `0..n` then an ancilla; the ancilla fires with probability
/// equal to the neuron activation.
pub fn neuron_circuit(theta: &[f64], phi: &[f64]) -> Result<Circuit> {
    if theta.len() != phi.len() {
        return Err(VqError::Dimension("theta and phi lengths differ".into()));
    }
    let input = phase_encoding(theta)?;
    let n = input.n_qubits;
    let mut ops = input.ops;
    ops.extend(inverse_phase_block(phi)?);
    ops.extend(weight_readout(n));
    Circuit::from_ops(n + 1, ops)
}

/// `X^n H^n` then the multi-controlled NOT onto the ancilla at index `n`.
fn weight_readout(n: usize) -> Vec<Op> {
    let mut ops: Vec<Op> = (0..n).map(|q| Op::fixed(GateKind::H, vec![q])).collect();
    ops.extend((0..n).map(|q| Op::fixed(GateKind::X, vec![q])));
    ops.push(Op::fixed(GateKind::Mcx, (0..=n).collect()));
    ops
}

/// Binary-valued neuron: hypergraph input state, inverse weight block, readout.
pub fn binary_neuron_circuit(input: &BinaryPattern, weight: &BinaryPattern) -> Result<Circuit> {
    if input.bits.len() != weight.bits.len() {
        return Err(VqError::Dimension("input and weight lengths differ".into()));
    }
    let n = input.n_qubits();
    let mut ops = hypergraph_state_circuit(input)?.ops;
    ops.extend(hypergraph_sign_block(weight));
    ops.extend(weight_readout(n));
    Circuit::from_ops(n + 1, ops)
}

/// Probability that the last qubit reads `|1>`.
pub fn last_qubit_one_probability(state: &StateVector) -> f64 {
    state.amplitudes().iter().enumerate().filter(|(i, _)| i & 1 == 1).map(|(_, a)| a.norm_sqr()).sum()
}

/// Most general single-qubit rotation up to phase: `RZ(beta) RY(alpha) RZ(gamma)`.
pub fn u3(alpha: f64, beta: f64, gamma: f64) -> Mat2 {
    gates::mul(&gates::rz(beta), &gates::mul(&gates::ry(alpha), &gates::rz(gamma)))
}

/// Two-qubit autoencoder: qubit 0 keeps the compressed state, qubit 1 is trash.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderCircuits {
    /// Phase encoding of the four features followed by the encoder.
    pub train: Circuit,
    /// Decoder followed by the inverse encoding.
    pub decode: Circuit,
    pub trash: usize,
}

pub const AUTOENCODER_PARAMS: usize = 6;

/// Encoder: two rounds of per-qubit RY and CNOT, then a final RY layer.
pub fn autoencoder_encoder() -> Circuit {
    let mut ops = Vec::new();
    for layer in 0..3 {
        ops.push(Op::param(GateKind::Ry, vec![0], Slot::train(2 * layer)));
        ops.push(Op::param(GateKind::Ry, vec![1], Slot::train(2 * layer + 1)));
        if layer < 2 {
            ops.push(Op::fixed(GateKind::Cnot, vec![0, 1]));
        }
    }
    Circuit { n_qubits: 2, ops }
}

pub fn autoencoder_circuits() -> AutoencoderCircuits {
    let slots: Vec<Slot> = (0..4).map(Slot::feature).collect();
    let encoding = phase_encoding_slots(2, &slots, false).expect("fixed valid layout");
    let encoder = autoencoder_encoder();
    let mut train = encoding.clone();
    train.extend(&encoder).expect("same width");
    let mut decode = encoder.inverse();
    decode.extend(&encoding.inverse()).expect("same width");
    AutoencoderCircuits { train, decode, trash: 1 }
}

impl AutoencoderCircuits {
    /// `<Z>` of the trash qubit after encoding.
    pub fn trash_z(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        let s = self.train.run_dense(x, theta)?;
        let z = crate::statevector::Observable::z_on(2, self.trash)?;
        crate::statevector::expectation(&s, &z)
    }

    /// Compute-uncompute fidelity with the trash projected onto `|0>` and
    /// renormalised, then decoded: probability of `|00>`.
    pub fn fidelity(&self, x: &[f64], theta: &[f64]) -> Result<f64> {
        let s = self.train.run_dense(x, theta)?;
        let mut amps = s.into_amplitudes();
        let mask = 1usize << (1 - self.trash);
        for (i, a) in amps.iter_mut().enumerate() {
            if i & mask != 0 {
                *a = C64::new(0.0, 0.0);
            }
        }
        let norm: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        if norm < 1e-300 {
            return Ok(0.0);
        }
        let mut s = StateVector::normalized(amps)?;
        self.decode.apply_dense(&mut s, x, theta, None)?;
        Ok(s.amplitudes()[0].norm_sqr())
    }

    /// Reduced state of the kept qubit after encoding.
    pub fn latent_state(&self, x: &[f64], theta: &[f64]) -> Result<crate::statevector::DensityMatrix> {
        self.train.run_dense(x, theta)?.partial_trace(&[1 - self.trash])
    }
}

/// Feature rescaling applied before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per-column affine map onto `[0, pi]`.
    Range0Pi,
    /// Per-column affine map onto `[0, pi/2]`.
    Range0Halfpi,
    /// Each row scaled to unit Euclidean norm.
    UnitNorm,
    #[default]
    None,
}

pub fn normalize_features(data: &[Vec<f64>], mode: Normalization) -> Result<Vec<Vec<f64>>> {
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(VqError::Invalid("features must be finite".into()));
    }
    let width = data.first().map(|r| r.len()).unwrap_or(0);
    if data.iter().any(|r| r.len() != width) {
        return Err(VqError::Dimension("ragged feature rows".into()));
    }
    let range = |top: f64| {
        let mut out = data.to_vec();
        for c in 0..width {
            let lo = data.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
            let hi = data.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
            for r in out.iter_mut() {
                r[c] = if hi > lo { top * (r[c] - lo) / (hi - lo) } else { 0.0 };
            }
        }
        out
    };
    Ok(match mode {
        Normalization::Range0Pi => range(PI),
        Normalization::Range0Halfpi => range(PI / 2.0),
        Normalization::UnitNorm => data
            .iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    r.iter().map(|v| v / n).collect()
                } else {
                    r.clone()
                }
            })
            .collect(),
        Normalization::None => data.to_vec(),
    })
}
