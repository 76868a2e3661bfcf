//! Experiment configs, dataset ingestion, dispatch and run records.
//!
//! A run is validated completely (schema, parameters, dataset) before any
//! computation, then executed, and only then written to disk.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{self, GradientAnsatz, ScanSpec};
use crate::channels::{self, ChannelKind, Sweep};
use crate::circuits::{
    build_qnn, neuron_activation_closed_form, neuron_circuit, last_qubit_one_probability, hypergraph_state_circuit,
    AnsatzSpec, Backend, BinaryPattern, Circuit, GateKind, Normalization, Op, QnnMode, Slot, Topology,
};
use crate::datasets;
use crate::error::{Result, VqError};
use crate::mps::TruncationPolicy;
use crate::optimize::{
    self, minimize, ExpectationModel, LossKind, LossSpec, Measure, NeuronEncoding, NeuronInit, Objective,
    OptimizerConfig, OptimizerKind, TrainRun, UnsampleEntangler,
};
use crate::rng;
use crate::statevector::{Observable, StateVector};
use crate::C64;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Experiment kinds; each maps onto one CLI subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Train,
    EntanglementScan,
    Expressibility,
    Gradvar,
    Fourier,
    Bound,
    Deconvolve,
    Neuron,
    Autoencoder,
    Unsample,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::Train,
        Command::EntanglementScan,
        Command::Expressibility,
        Command::Gradvar,
        Command::Fourier,
        Command::Bound,
        Command::Deconvolve,
        Command::Neuron,
        Command::Autoencoder,
        Command::Unsample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::EntanglementScan => "entanglement-scan",
            Command::Expressibility => "expressibility",
            Command::Gradvar => "gradvar",
            Command::Fourier => "fourier",
            Command::Bound => "bound",
            Command::Deconvolve => "deconvolve",
            Command::Neuron => "neuron",
            Command::Autoencoder => "autoencoder",
            Command::Unsample => "unsample",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = VqError;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| VqError::Config(format!("unknown command '{s}'")))
    }
}

/// Dataset file and its feature normalisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub normalization: Normalization,
}

fn empty_object() -> Value {
    json!({})
}

/// Top-level experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backend: Backend,
    #[serde(default)]
    pub truncation: TruncationPolicy,
    /// Shots per measured setting; `None` evaluates expectations exactly.
    #[serde(default)]
    pub shots: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    /// Command-specific parameters.
    #[serde(default = "empty_object")]
    pub params: Value,
}

impl ExperimentConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            seed: 0,
            backend: Backend::Dense,
            truncation: TruncationPolicy::default(),
            shots: None,
            output_dir: None,
            dataset: None,
            params: empty_object(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| VqError::Config(format!("invalid config: {e}")))
    }
}

// ---------------------------------------------------------------------------
// Dataset ingestion

/// How features were rescaled, kept so the map can be inverted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NormalizationRecord {
    /// Column `c` maps `[min[c], max[c]]` onto `[0, top]`.
    Range { top: f64, min: Vec<f64>, max: Vec<f64> },
    /// Row `r` was divided by `norms[r]`.
    UnitNorm { norms: Vec<f64> },
    None,
}

impl NormalizationRecord {
    /// Undo the normalisation of row `row`.
    pub fn invert(&self, row: usize, x: &[f64]) -> Vec<f64> {
        match self {
            NormalizationRecord::Range { top, min, max } => x
                .iter()
                .enumerate()
                .map(|(c, v)| if max[c] > min[c] { min[c] + v * (max[c] - min[c]) / top } else { min[c] })
                .collect(),
            NormalizationRecord::UnitNorm { norms } => x.iter().map(|v| v * norms[row]).collect(),
            NormalizationRecord::None => x.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Option<Vec<i64>>,
    pub normalization: NormalizationRecord,
}

fn parse_cell(cell: &str, row: usize, col: usize) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| VqError::Config(format!("row {row}, column {col}: '{cell}' is not numeric")))?;
    if !v.is_finite() {
        return Err(VqError::Config(format!("row {row}, column {col}: non-finite value '{cell}'")));
    }
    Ok(v)
}

/// Apply `mode` and return the rescaled rows with the parameters used.
pub fn normalize(data: &[Vec<f64>], mode: Normalization) -> (Vec<Vec<f64>>, NormalizationRecord) {
    let width = data.first().map_or(0, Vec::len);
    match mode {
        Normalization::Range0Pi | Normalization::Range0Halfpi => {
            let top = if mode == Normalization::Range0Pi { PI } else { PI / 2.0 };
            let min: Vec<f64> = (0..width).map(|c| data.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min)).collect();
            let max: Vec<f64> = (0..width).map(|c| data.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max)).collect();
            let rows = data
                .iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .map(|(c, v)| if max[c] > min[c] { top * (v - min[c]) / (max[c] - min[c]) } else { 0.0 })
                        .collect()
                })
                .collect();
            (rows, NormalizationRecord::Range { top, min, max })
        }
        Normalization::UnitNorm => {
            let norms: Vec<f64> = data.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            let rows = data
                .iter()
                .zip(&norms)
                .map(|(r, n)| if *n > 0.0 { r.iter().map(|v| v / n).collect() } else { r.clone() })
                .collect();
            let norms = norms.into_iter().map(|n| if n > 0.0 { n } else { 1.0 }).collect();
            (rows, NormalizationRecord::UnitNorm { norms })
        }
        Normalization::None => (data.to_vec(), NormalizationRecord::None),
    }
}

/// Parse CSV text. A first row containing any non-numeric cell is a header;
/// a final header `label` marks an integer label column.
pub fn parse_csv(text: &str, mode: Normalization) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut records: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| VqError::Config(format!("CSV: {e}")))?;
        records.push(rec.iter().map(str::to_string).collect());
    }
    let is_header = records.first().is_some_and(|r| r.iter().any(|c| c.parse::<f64>().is_err()));
    let header = if is_header { Some(records.remove(0)) } else { None };
    if records.is_empty() {
        return Err(VqError::Config("CSV has no data rows".into()));
    }
    let width = header.as_ref().map_or(records[0].len(), Vec::len);
    let has_label = header.as_ref().is_some_and(|h| h.last().is_some_and(|c| c.eq_ignore_ascii_case("label")));
    let mut features = Vec::with_capacity(records.len());
    let mut labels = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let row = i + 1 + usize::from(is_header);
        if rec.len() != width {
            return Err(VqError::Config(format!("row {row} has {} cells, expected {width}", rec.len())));
        }
        let nf = if has_label { width - 1 } else { width };
        let x: Vec<f64> = (0..nf).map(|c| parse_cell(&rec[c], row, c + 1)).collect::<Result<_>>()?;
        if has_label {
            let v = parse_cell(&rec[nf], row, width)?;
            if v.fract() != 0.0 {
                return Err(VqError::Config(format!("row {row}: label {v} is not an integer")));
            }
            labels.push(v as i64);
        }
        features.push(x);
    }
    if features[0].is_empty() {
        return Err(VqError::Config("CSV has no feature columns".into()));
    }
    let (features, normalization) = normalize(&features, mode);
    Ok(Dataset { features, labels: has_label.then_some(labels), normalization })
}

/// Read and normalise a CSV dataset.
pub fn ingest_csv(path: &Path, mode: Normalization) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| VqError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_csv(&text, mode)
}

// ---------------------------------------------------------------------------
// Command parameters

fn d_pi() -> f64 {
    PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanParams {
    pub feature: AnsatzSpec,
    pub var: AnsatzSpec,
    #[serde(default)]
    pub mode: QnnMode,
    pub max_layers: usize,
    #[serde(default = "d_samples_scan")]
    pub samples: usize,
    #[serde(default = "d_pi")]
    pub input_range: f64,
    #[serde(default = "d_pi")]
    pub param_range: f64,
    /// Also scan the other layer ordering and report the normalised difference.
    #[serde(default)]
    pub paired: bool,
    /// Also scan with the variational entangler on this topology and test
    /// whether the total-entropy distributions differ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_topology: Option<Topology>,
}
fn d_samples_scan() -> usize {
    100
}

/// State ensemble for expressibility and spectrum statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnsembleSpec {
    Qnn {
        feature: AnsatzSpec,
        var: AnsatzSpec,
        #[serde(default)]
        mode: QnnMode,
    },
    Haar { n_qubits: usize },
    Circuit { circuit: Circuit },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpressibilityParams {
    pub ensemble: EnsembleSpec,
    /// Layer counts for the QNN ensemble.
    #[serde(default = "d_layers")]
    pub layers: Vec<usize>,
    #[serde(default = "d_expr_samples")]
    pub samples: usize,
    #[serde(default = "d_bins")]
    pub bins: usize,
    /// Angles are drawn from `U[0, range)`.
    #[serde(default = "d_pi")]
    pub range: f64,
    /// Also compute the centre-cut spectrum distance to Haar states.
    #[serde(default)]
    pub spectrum: bool,
    #[serde(default = "d_spectrum_samples")]
    pub spectrum_samples: usize,
}
fn d_layers() -> Vec<usize> {
    vec![1]
}
fn d_expr_samples() -> usize {
    5000
}
fn d_bins() -> usize {
    75
}
fn d_spectrum_samples() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradModel {
    #[default]
    RandomPqc,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradvarParams {
    #[serde(default)]
    pub model: GradModel,
    #[serde(default = "d_n_values")]
    pub n_values: Vec<usize>,
    /// Random circuits use `layer_factor * n` layers.
    #[serde(default = "d_layer_factor")]
    pub layer_factor: usize,
    #[serde(default = "d_grad_samples")]
    pub samples: usize,
    /// Pauli-string cost of the random circuits; `Z` on every qubit by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<String>,
}
fn d_n_values() -> Vec<usize> {
    vec![2, 3, 4]
}
fn d_layer_factor() -> usize {
    3
}
fn d_grad_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierParams {
    #[serde(default = "d_fourier_layers")]
    pub layers: Vec<usize>,
    #[serde(default = "d_one")]
    pub trials: usize,
    /// Samples per period; `4 L + 3` by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
}
fn d_fourier_layers() -> Vec<usize> {
    vec![1, 2, 3]
}
fn d_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundParams {
    /// `|Omega|`; derived from `encodings` as `2 L + 1` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encodings: Option<usize>,
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_unit")]
    pub lipschitz: f64,
    #[serde(default = "d_unit")]
    pub obs_norm: f64,
    #[serde(default = "d_unit")]
    pub loss_range: f64,
    #[serde(default = "d_delta")]
    pub delta: f64,
}
fn d_m() -> usize {
    100
}
fn d_unit() -> f64 {
    1.0
}
fn d_delta() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeconvolveParams {
    pub channel: ChannelKind,
    /// One-qubit preparation; `RY(x)` with `x` the sweep value by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prep: Option<Circuit>,
    #[serde(default = "d_obs")]
    pub observable: String,
    #[serde(default = "d_sweep")]
    pub sweep: Sweep,
    #[serde(default = "d_reps")]
    pub repetitions: u32,
}
fn d_obs() -> String {
    "Z".into()
}
fn d_sweep() -> Sweep {
    Sweep::Feature((0..25).map(|k| 2.0 * PI * k as f64 / 24.0).collect())
}
fn d_reps() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronData {
    #[default]
    TwoClusters,
    Circles,
    /// The config's `dataset`, labels 0/1.
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum NeuronParams {
    /// Circuit readout against the closed-form activation on random phases.
    Equivalence {
        #[serde(default = "d_neuron_n")]
        n_values: Vec<usize>,
        #[serde(default = "d_pairs")]
        pairs: usize,
    },
    /// Mean activation under uniform phase noise.
    Noise {
        #[serde(default = "d_a_values")]
        a_values: Vec<f64>,
        #[serde(default = "d_noise_n")]
        n_values: Vec<usize>,
        #[serde(default = "d_noise_samples")]
        samples: usize,
    },
    /// Train the weights on a labelled 0/1 dataset.
    Train {
        #[serde(default)]
        data: NeuronData,
        #[serde(default = "d_neuron_m")]
        m: usize,
        #[serde(default = "d_neuron_m")]
        test_m: usize,
        #[serde(default = "d_encoding")]
        encoding: NeuronEncoding,
        #[serde(default = "d_neuron_loss")]
        loss: LossSpec,
        #[serde(default = "d_neuron_init")]
        init: NeuronInit,
        #[serde(default = "d_neuron_opt")]
        optimizer: OptimizerConfig,
    },
}
fn d_neuron_n() -> Vec<usize> {
    vec![1, 2, 3]
}
fn d_pairs() -> usize {
    200
}
fn d_a_values() -> Vec<f64> {
    vec![0.5, 1.0]
}
fn d_noise_n() -> Vec<usize> {
    vec![1, 2]
}
fn d_noise_samples() -> usize {
    100_000
}
fn d_neuron_m() -> usize {
    80
}
fn d_encoding() -> NeuronEncoding {
    NeuronEncoding::Direct
}
fn d_neuron_loss() -> LossSpec {
    LossSpec { kind: LossKind::ThresholdedMse, threshold: Some(0.95), bias: None }
}
fn d_neuron_init() -> NeuronInit {
    NeuronInit::PositiveCentroid
}
fn d_neuron_opt() -> OptimizerConfig {
    let mut c = OptimizerConfig::new(OptimizerKind::Spsa, 0.1, 200, 0);
    c.spsa_a = 0.5;
    c.spsa_c = 0.2;
    c.batch_size = Some(20);
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderParams {
    /// Synthetic sample count when no dataset is given.
    #[serde(default = "d_ae_m")]
    pub m: usize,
    #[serde(default = "d_ae_noise")]
    pub noise: f64,
    #[serde(default = "d_val_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "d_ae_opt")]
    pub optimizer: OptimizerConfig,
}
fn d_ae_m() -> usize {
    512
}
fn d_ae_noise() -> f64 {
    0.05
}
fn d_val_fraction() -> f64 {
    0.25
}
fn d_ae_opt() -> OptimizerConfig {
    let mut c = OptimizerConfig::new(OptimizerKind::Adam, 0.05, 300, 0);
    c.batch_size = Some(32);
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Hypergraph state of a `+-1` pattern with the given integer label.
    Hypergraph { label: u64, qubits: usize },
    Amplitudes {
        re: Vec<f64>,
        #[serde(default)]
        im: Vec<f64>,
    },
}

impl TargetSpec {
    pub fn state(&self) -> Result<StateVector> {
        match self {
            TargetSpec::Hypergraph { label, qubits } => {
                if *qubits == 0 || *qubits > 12 {
                    return Err(VqError::Config(format!("hypergraph target needs 1..=12 qubits, got {qubits}")));
                }
                let p = BinaryPattern::from_label(*label, 1 << qubits)?;
                hypergraph_state_circuit(&p)?.run_dense(&[], &[])
            }
            TargetSpec::Amplitudes { re, im } => {
                if !im.is_empty() && im.len() != re.len() {
                    return Err(VqError::Config("target re and im lengths differ".into()));
                }
                let amps: Vec<C64> =
                    re.iter().enumerate().map(|(i, r)| C64::new(*r, im.get(i).copied().unwrap_or(0.0))).collect();
                if !amps.len().is_power_of_two() || amps.len() < 2 {
                    return Err(VqError::Config("target length must be a power of two >= 2".into()));
                }
                StateVector::normalized(amps)
            }
        }
    }
}

fn d_target() -> TargetSpec {
    TargetSpec::Hypergraph { label: 20032, qubits: 4 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UnsampleMethod {
    Global {
        cycles: usize,
        #[serde(default)]
        entangler: UnsampleEntangler,
    },
    Local {
        structure: String,
        #[serde(default)]
        entangler: UnsampleEntangler,
        #[serde(default = "d_jitter")]
        jitter: f64,
    },
}
fn d_jitter() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnsampleParams {
    #[serde(default = "d_target")]
    pub target: TargetSpec,
    pub method: UnsampleMethod,
    #[serde(default = "d_one")]
    pub runs: usize,
    #[serde(default = "d_unsample_opt")]
    pub optimizer: OptimizerConfig,
}
fn d_unsample_opt() -> OptimizerConfig {
    OptimizerConfig::new(OptimizerKind::Adam, 0.05, 800, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlochSynthetic {
    #[serde(default = "d_cls_m")]
    pub m: usize,
    #[serde(default = "d_axis")]
    pub axis: [f64; 3],
    #[serde(default = "d_spread")]
    pub spread: f64,
}
fn d_cls_m() -> usize {
    200
}
fn d_axis() -> [f64; 3] {
    [0.6, 0.0, 0.8]
}
fn d_spread() -> f64 {
    0.2
}
impl Default for BlochSynthetic {
    fn default() -> Self {
        Self { m: d_cls_m(), axis: d_axis(), spread: d_spread() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainParams {
    /// Single-qubit classifier on Bloch vectors: the config's dataset
    /// (3 features, labels 0/1) or synthetic clusters.
    Classifier {
        #[serde(default)]
        synthetic: BlochSynthetic,
        #[serde(default = "d_val_fraction")]
        test_fraction: f64,
        #[serde(default = "d_cls_opt")]
        optimizer: OptimizerConfig,
    },
    /// QNN regression of dataset labels with mean squared error on `<observable>`.
    Qnn {
        feature: AnsatzSpec,
        var: AnsatzSpec,
        layers: usize,
        #[serde(default)]
        mode: QnnMode,
        /// Pauli string; `Z` on qubit 0 by default.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        observable: Option<String>,
        #[serde(default = "d_val_fraction")]
        test_fraction: f64,
        #[serde(default = "d_cls_opt")]
        optimizer: OptimizerConfig,
    },
}
fn d_cls_opt() -> OptimizerConfig {
    OptimizerConfig::new(OptimizerKind::Adam, 0.05, 300, 0)
}

/// Typed parameters of a validated config.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Train(TrainParams),
    EntanglementScan(ScanParams),
    Expressibility(ExpressibilityParams),
    Gradvar(GradvarParams),
    Fourier(FourierParams),
    Bound(BoundParams),
    Deconvolve(DeconvolveParams),
    Neuron(NeuronParams),
    Autoencoder(AutoencoderParams),
    Unsample(UnsampleParams),
}

fn typed<T: DeserializeOwned + Serialize>(v: &Value, cmd: Command) -> Result<(T, Value)> {
    let t: T = serde_json::from_value(v.clone()).map_err(|e| VqError::Config(format!("{cmd} params: {e}")))?;
    let resolved = serde_json::to_value(&t)?;
    Ok((t, resolved))
}

/// A fully validated experiment.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// Config with every default filled in.
    pub config: ExperimentConfig,
    pub task: Task,
    pub dataset: Option<Dataset>,
    /// Raw dataset bytes, hashed into the record.
    pub dataset_bytes: Option<Vec<u8>>,
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(VqError::Config(msg.into()))
}

fn check_ansatz(spec: &AnsatzSpec, what: &str) -> Result<()> {
    if spec.n_qubits == 0 || spec.n_qubits > crate::statevector::MAX_DENSE_QUBITS {
        return cfg_err(format!("{what}: n_qubits {} out of range", spec.n_qubits));
    }
    crate::circuits::build_ansatz(spec).map(|_| ()).map_err(|e| VqError::Config(format!("{what}: {e}")))
}

fn check_optimizer(o: &OptimizerConfig) -> Result<()> {
    o.validate().map_err(|e| VqError::Config(e.to_string()))
}

fn check_fraction(f: f64, what: &str) -> Result<()> {
    if !(0.0..1.0).contains(&f) {
        return cfg_err(format!("{what} {f} outside [0, 1)"));
    }
    Ok(())
}

/// Validate everything that can be checked without computing.
pub fn resolve(mut config: ExperimentConfig) -> Result<Resolved> {
    if config.params.is_null() {
        config.params = empty_object();
    }
    config.truncation.validate().map_err(|e| VqError::Config(e.to_string()))?;
    if config.shots == Some(0) {
        return cfg_err("shots must be positive or null for exact evaluation");
    }
    let cmd = config.command;
    let (task, resolved) = match cmd {
        Command::Train => {
            let (p, v): (TrainParams, _) = typed(&config.params, cmd)?;
            match &p {
                TrainParams::Classifier { synthetic, test_fraction, optimizer } => {
                    check_optimizer(optimizer)?;
                    check_fraction(*test_fraction, "test_fraction")?;
                    if config.dataset.is_none() && (synthetic.m < 2 || synthetic.axis.iter().all(|a| *a == 0.0)) {
                        return cfg_err("synthetic classifier data needs m >= 2 and a nonzero axis");
                    }
                }
                TrainParams::Qnn { feature, var, layers, observable, test_fraction, optimizer, .. } => {
                    check_optimizer(optimizer)?;
                    check_fraction(*test_fraction, "test_fraction")?;
                    check_ansatz(feature, "feature")?;
                    check_ansatz(var, "var")?;
                    if *layers == 0 || feature.n_qubits != var.n_qubits {
                        return cfg_err("qnn needs layers >= 1 and matching widths");
                    }
                    if let Some(o) = observable {
                        let obs = Observable::pauli(o).map_err(|e| VqError::Config(e.to_string()))?;
                        if obs.n_qubits() != feature.n_qubits {
                            return cfg_err("observable width differs from the register");
                        }
                    }
                    if config.dataset.is_none() {
                        return cfg_err("qnn training needs a dataset");
                    }
                }
            }
            (Task::Train(p), v)
        }
        Command::EntanglementScan => {
            let (p, v): (ScanParams, _) = typed(&config.params, cmd)?;
            check_ansatz(&p.feature, "feature")?;
            check_ansatz(&p.var, "var")?;
            let spec = scan_spec(&p, &config, p.mode);
            spec.validate().map_err(|e| VqError::Config(e.to_string()))?;
            if p.feature.n_qubits != p.var.n_qubits {
                return cfg_err("feature and var widths differ");
            }
            if config.backend == Backend::Dense && p.feature.n_qubits > crate::statevector::MAX_DENSE_QUBITS {
                return cfg_err("register too large for the dense backend");
            }
            if p.compare_topology.is_some() && p.samples < 2 {
                return cfg_err("topology comparison needs at least two samples");
            }
            (Task::EntanglementScan(p), v)
        }
        Command::Expressibility => {
            let (p, v): (ExpressibilityParams, _) = typed(&config.params, cmd)?;
            match &p.ensemble {
                EnsembleSpec::Qnn { feature, var, .. } => {
                    check_ansatz(feature, "feature")?;
                    check_ansatz(var, "var")?;
                    if p.layers.is_empty() || p.layers.contains(&0) {
                        return cfg_err("layers must be a non-empty list of positive counts");
                    }
                }
                EnsembleSpec::Haar { n_qubits } if *n_qubits == 0 || *n_qubits > 20 => {
                    return cfg_err("haar ensemble needs 1..=20 qubits");
                }
                EnsembleSpec::Circuit { circuit } => circuit.validate().map_err(|e| VqError::Config(e.to_string()))?,
                _ => {}
            }
            if p.bins == 0 || p.samples < 10 * p.bins {
                return cfg_err(format!("samples ({}) must be at least 10 * bins ({})", p.samples, 10 * p.bins));
            }
            if p.spectrum && p.spectrum_samples < 10 {
                return cfg_err("spectrum_samples must be at least 10");
            }
            if !(p.range > 0.0 && p.range.is_finite()) {
                return cfg_err("range must be positive");
            }
            (Task::Expressibility(p), v)
        }
        Command::Gradvar => {
            let (p, v): (GradvarParams, _) = typed(&config.params, cmd)?;
            if p.n_values.is_empty() || p.n_values.iter().any(|n| *n == 0 || *n > 16) {
                return cfg_err("n_values must lie in 1..=16");
            }
            if p.samples < 2 || p.layer_factor == 0 {
                return cfg_err("need samples >= 2 and layer_factor >= 1");
            }
            if let Some(c) = &p.cost {
                Observable::pauli(c).map_err(|e| VqError::Config(e.to_string()))?;
                if p.n_values.iter().any(|n| *n != c.len()) {
                    return cfg_err("an explicit cost fixes the register width; use a single n value");
                }
            }
            (Task::Gradvar(p), v)
        }
        Command::Fourier => {
            let (p, v): (FourierParams, _) = typed(&config.params, cmd)?;
            if p.layers.is_empty() || p.layers.contains(&0) || p.trials == 0 {
                return cfg_err("fourier needs positive layer counts and trials");
            }
            if let Some(s) = p.samples {
                let need = 2 * p.layers.iter().max().copied().unwrap_or(1) + 1;
                if s < need {
                    return cfg_err(format!("samples must be at least {need}"));
                }
            }
            (Task::Fourier(p), v)
        }
        Command::Bound => {
            let (p, v): (BoundParams, _) = typed(&config.params, cmd)?;
            let size = bound_spectrum_size(&p);
            analysis::generalization_bound(size, p.m, p.lipschitz, p.obs_norm, p.loss_range, p.delta)
                .map_err(|e| VqError::Config(e.to_string()))?;
            (Task::Bound(p), v)
        }
        Command::Deconvolve => {
            let (p, v): (DeconvolveParams, _) = typed(&config.params, cmd)?;
            channels::invert_channel(&p.channel).map_err(|e| VqError::Config(e.to_string()))?;
            let obs = Observable::pauli(&p.observable).map_err(|e| VqError::Config(e.to_string()))?;
            if obs.n_qubits() != 1 {
                return cfg_err("deconvolution observable must act on one qubit");
            }
            if let Some(c) = &p.prep {
                c.validate().map_err(|e| VqError::Config(e.to_string()))?;
                if c.n_qubits != 1 {
                    return cfg_err("preparation must act on one qubit");
                }
            }
            (Task::Deconvolve(p), v)
        }
        Command::Neuron => {
            let (p, v): (NeuronParams, _) = typed(&config.params, cmd)?;
            match &p {
                NeuronParams::Equivalence { n_values, pairs } => {
                    if n_values.is_empty() || n_values.iter().any(|n| *n == 0 || *n > 8) || *pairs == 0 {
                        return cfg_err("equivalence needs n in 1..=8 and pairs >= 1");
                    }
                }
                NeuronParams::Noise { a_values, n_values, samples } => {
                    if a_values.iter().any(|a| !(*a > 0.0 && a.is_finite())) || a_values.is_empty() {
                        return cfg_err("noise amplitudes must be positive");
                    }
                    if n_values.is_empty() || n_values.iter().any(|n| *n == 0 || *n > 20) || *samples < 2 {
                        return cfg_err("noise needs n in 1..=20 and samples >= 2");
                    }
                }
                NeuronParams::Train { data, m, test_m, loss, optimizer, .. } => {
                    check_optimizer(optimizer)?;
                    loss.validate().map_err(|e| VqError::Config(e.to_string()))?;
                    if *data == NeuronData::Dataset && config.dataset.is_none() {
                        return cfg_err("data = dataset needs a dataset");
                    }
                    if *data != NeuronData::Dataset && (*m < 2 || *test_m < 1) {
                        return cfg_err("synthetic neuron data needs m >= 2 and test_m >= 1");
                    }
                }
            }
            (Task::Neuron(p), v)
        }
        Command::Autoencoder => {
            let (p, v): (AutoencoderParams, _) = typed(&config.params, cmd)?;
            check_optimizer(&p.optimizer)?;
            check_fraction(p.validation_fraction, "validation_fraction")?;
            if config.dataset.is_none() && p.m < 2 {
                return cfg_err("synthetic autoencoder data needs m >= 2");
            }
            if !(p.noise >= 0.0 && p.noise.is_finite()) {
                return cfg_err("noise must be non-negative");
            }
            (Task::Autoencoder(p), v)
        }
        Command::Unsample => {
            let (p, v): (UnsampleParams, _) = typed(&config.params, cmd)?;
            check_optimizer(&p.optimizer)?;
            let target = p.target.state()?;
            match &p.method {
                UnsampleMethod::Local { structure, jitter, .. } => {
                    let c = optimize::parse_structure(structure)?;
                    if c.len() + 1 != target.n_qubits() {
                        return cfg_err(format!("structure '{structure}' needs {} digits", target.n_qubits() - 1));
                    }
                    if !(*jitter >= 0.0 && jitter.is_finite()) {
                        return cfg_err("jitter must be non-negative");
                    }
                }
                UnsampleMethod::Global { .. } => {}
            }
            if p.runs == 0 {
                return cfg_err("runs must be at least 1");
            }
            (Task::Unsample(p), v)
        }
    };
    config.params = resolved;
    let (dataset, dataset_bytes) = match &config.dataset {
        Some(d) => {
            let bytes = fs::read(&d.path).map_err(|e| VqError::Config(format!("cannot read {}: {e}", d.path.display())))?;
            let text = String::from_utf8(bytes.clone()).map_err(|_| VqError::Config("dataset is not UTF-8".into()))?;
            (Some(parse_csv(&text, d.normalization)?), Some(bytes))
        }
        None => (None, None),
    };
    if let Some(ds) = &dataset {
        check_dataset(&task, ds)?;
    }
    Ok(Resolved { config, task, dataset, dataset_bytes })
}

fn check_dataset(task: &Task, ds: &Dataset) -> Result<()> {
    let width = ds.features[0].len();
    let labels01 = || -> Result<()> {
        match &ds.labels {
            Some(l) if l.iter().all(|y| *y == 0 || *y == 1) => Ok(()),
            Some(_) => cfg_err("labels must be 0 or 1"),
            None => cfg_err("dataset needs a label column"),
        }
    };
    match task {
        Task::Train(TrainParams::Classifier { .. }) => {
            if width != 3 {
                return cfg_err("classifier dataset needs 3 features (a Bloch vector)");
            }
            labels01()
        }
        Task::Train(TrainParams::Qnn { feature, .. }) => {
            let need = crate::circuits::build_ansatz(feature)?.trainables_as_features().num_features();
            if width < need {
                return cfg_err(format!("feature map reads {need} features, dataset has {width}"));
            }
            if ds.labels.is_none() {
                return cfg_err("qnn training needs a label column");
            }
            Ok(())
        }
        Task::Neuron(NeuronParams::Train { data: NeuronData::Dataset, encoding, .. }) => {
            let ok = match encoding {
                NeuronEncoding::Direct => width >= 2 && width.is_power_of_two(),
                NeuronEncoding::Biased { .. } => width == 2,
            };
            if !ok {
                return cfg_err(format!("{width} features do not fit the neuron encoding"));
            }
            labels01()
        }
        Task::Autoencoder(_) if width != 4 => cfg_err("autoencoder dataset needs 4 features"),
        _ => Ok(()),
    }
}

fn scan_spec(p: &ScanParams, config: &ExperimentConfig, mode: QnnMode) -> ScanSpec {
    ScanSpec {
        feature: p.feature.clone(),
        var: p.var.clone(),
        mode,
        max_layers: p.max_layers,
        samples: p.samples,
        backend: config.backend,
        policy: config.truncation,
        input_range: p.input_range,
        param_range: p.param_range,
    }
}

fn bound_spectrum_size(p: &BoundParams) -> usize {
    p.spectrum_size.or(p.encodings.map(|l| 2 * l + 1)).unwrap_or(3)
}

// ---------------------------------------------------------------------------
// Outputs

/// A CSV table; every row carries the seed and stream(s) that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        let mut h: Vec<String> = header.iter().map(|s| s.to_string()).collect();
        h.push("seed".into());
        h.push("stream".into());
        Self { name: name.into(), header: h, rows: Vec::new() }
    }

    fn push(&mut self, values: Vec<String>, seed: u64, stream: String) {
        let mut row = values;
        row.push(seed.to_string());
        row.push(stream);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| VqError::Invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| VqError::Invalid(e.to_string()))
    }
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn range_label(n: usize) -> String {
    if n <= 1 {
        "0".into()
    } else {
        format!("0-{}", n - 1)
    }
}

/// Metrics, exclusion counts, notes and tables of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: Value,
    pub exclusions: Value,
    pub notes: Vec<String>,
    pub tables: Vec<Table>,
}

/// Persisted description of a run. Wall-clock time goes to the log, not
/// here, so identical inputs give identical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub command: Command,
    /// SHA-256 of the resolved config and dataset bytes.
    pub input_hash: String,
    pub config: ExperimentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<NormalizationRecord>,
    pub metrics: Value,
    pub exclusions: Value,
    pub notes: Vec<String>,
    pub tables: Vec<String>,
}

pub fn input_hash(resolved: &Resolved) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&resolved.config)?);
    if let Some(b) = &resolved.dataset_bytes {
        h.update(b);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn record(resolved: &Resolved, out: &RunOutput) -> Result<RunRecord> {
    Ok(RunRecord {
        version: VERSION.into(),
        command: resolved.config.command,
        input_hash: input_hash(resolved)?,
        config: resolved.config.clone(),
        normalization: resolved.dataset.as_ref().map(|d| d.normalization.clone()),
        metrics: out.metrics.clone(),
        exclusions: out.exclusions.clone(),
        notes: out.notes.clone(),
        tables: out.tables.iter().map(|t| format!("{}.csv", t.name)).collect(),
    })
}

/// Write `result.json`, one CSV per table, and `run.log` into `dir`.
pub fn write_outputs(dir: &Path, rec: &RunRecord, out: &RunOutput, log: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(rec)?;
    json.push('\n');
    fs::write(dir.join("result.json"), json)?;
    for t in &out.tables {
        fs::write(dir.join(format!("{}.csv", t.name)), t.to_csv()?)?;
    }
    fs::write(dir.join("run.log"), log)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dispatch

/// Run a validated experiment.
pub fn execute(r: &Resolved) -> Result<RunOutput> {
    let c = &r.config;
    match &r.task {
        Task::EntanglementScan(p) => run_scan(p, c),
        Task::Expressibility(p) => run_expressibility(p, c),
        Task::Gradvar(p) => run_gradvar(p, c),
        Task::Fourier(p) => run_fourier(p, c),
        Task::Bound(p) => run_bound(p, c),
        Task::Deconvolve(p) => run_deconvolve(p, c),
        Task::Neuron(p) => run_neuron(p, c, r.dataset.as_ref()),
        Task::Autoencoder(p) => run_autoencoder(p, c, r.dataset.as_ref()),
        Task::Unsample(p) => run_unsample(p, c),
        Task::Train(p) => run_train(p, c, r.dataset.as_ref()),
    }
}

fn output(metrics: Value, tables: Vec<Table>) -> RunOutput {
    RunOutput { metrics, exclusions: json!({}), notes: Vec::new(), tables }
}

fn profile_rows(t: &mut Table, label: &str, p: &analysis::EntanglementProfile) {
    let n = p.n_qubits;
    for (li, l) in p.layers.iter().enumerate() {
        for k in 0..n - 1 {
            let stats = [
                ("mean", p.mean[li][k]),
                ("std", p.std[li][k]),
                ("renyi2_mean", p.renyi2_mean[li][k]),
                ("page", analysis::page_value(k + 1, n - k - 1)),
            ];
            for (name, v) in stats {
                t.push(vec![label.into(), l.to_string(), (k + 1).to_string(), name.into(), f(v)], p.seed, range_label(p.samples));
            }
        }
    }
}

fn run_scan(p: &ScanParams, c: &ExperimentConfig) -> Result<RunOutput> {
    let main = analysis::entanglement_scan(&scan_spec(p, c, p.mode), c.seed)?;
    let d = analysis::derived_metrics(&main);
    let mut profile = Table::new("profile", &["variant", "layers", "bond", "statistic", "value"]);
    profile_rows(&mut profile, "main", &main);
    let mut derived = Table::new("derived", &["variant", "layers", "s_tot", "s_norm", "valid", "excluded"]);
    let push_derived = |t: &mut Table, label: &str, prof: &analysis::EntanglementProfile| {
        let dm = analysis::derived_metrics(prof);
        for (li, l) in prof.layers.iter().enumerate() {
            t.push(
                vec![
                    label.into(),
                    l.to_string(),
                    f(dm.s_tot[li]),
                    f(dm.s_norm[li]),
                    prof.valid[li].to_string(),
                    prof.excluded[li].to_string(),
                ],
                prof.seed,
                range_label(prof.samples),
            );
        }
    };
    push_derived(&mut derived, "main", &main);
    let mut metrics = json!({
        "n_qubits": main.n_qubits,
        "l_tilde": d.l_tilde,
        "v_s": d.v_s,
        "v_s_points": d.v_s_points,
        "s_tot_haar": d.s_tot_haar,
        "s_haar_max": d.s_haar_max,
        "s_tot": d.s_tot,
    });
    let mut exclusions = json!({ "main": main.excluded });
    if p.paired {
        let other_mode = match p.mode {
            QnnMode::Alternated => QnnMode::Sequential,
            QnnMode::Sequential => QnnMode::Alternated,
        };
        let other = analysis::entanglement_scan(&scan_spec(p, c, other_mode), c.seed)?;
        let (alt, seq) = if p.mode == QnnMode::Alternated { (&main, &other) } else { (&other, &main) };
        metrics["delta_s"] = json!(analysis::entanglement_difference(alt, seq)?);
        profile_rows(&mut profile, "paired", &other);
        push_derived(&mut derived, "paired", &other);
        exclusions["paired"] = json!(other.excluded);
    }
    if let Some(top) = p.compare_topology {
        let mut q = p.clone();
        q.var.topology = top;
        let other = analysis::entanglement_scan(&scan_spec(&q, c, p.mode), c.seed.wrapping_add(1))?;
        let cmp = analysis::compare_profiles(&main, &other, 0.05)?;
        metrics["topology_comparison"] = serde_json::to_value(&cmp)?;
        metrics["topology_comparison"]["topology"] = serde_json::to_value(top)?;
        profile_rows(&mut profile, "topology", &other);
        push_derived(&mut derived, "topology", &other);
        exclusions["topology"] = json!(other.excluded);
    }
    Ok(RunOutput { metrics, exclusions, notes: Vec::new(), tables: vec![profile, derived] })
}

fn ensemble_circuit(e: &EnsembleSpec, layers: usize) -> Result<Option<Circuit>> {
    Ok(match e {
        EnsembleSpec::Qnn { feature, var, mode } => Some(build_qnn(feature, var, layers, *mode)?),
        EnsembleSpec::Haar { .. } => None,
        EnsembleSpec::Circuit { circuit } => Some(circuit.clone()),
    })
}

fn run_expressibility(p: &ExpressibilityParams, c: &ExperimentConfig) -> Result<RunOutput> {
    let layer_list: Vec<usize> = match p.ensemble {
        EnsembleSpec::Qnn { .. } => p.layers.clone(),
        _ => vec![0],
    };
    let mut table = Table::new("expressibility", &["layers", "statistic", "value"]);
    let mut kls = Vec::new();
    let mut kss = Vec::new();
    for (i, l) in layer_list.iter().enumerate() {
        let seed = rng::derive_seed(c.seed, i as u64);
        let circuit = ensemble_circuit(&p.ensemble, *l)?;
        let (kl, ks) = match (&circuit, &p.ensemble) {
            (Some(circ), _) => {
                let n = circ.n_qubits;
                let kl = analysis::expressibility(analysis::circuit_sampler(circ, p.range), n, p.samples, p.bins, seed)?;
                let ks = if p.spectrum && n >= 2 {
                    Some(analysis::spectrum_distribution_distance(
                        analysis::circuit_sampler(circ, p.range),
                        n,
                        p.spectrum_samples,
                        rng::derive_seed(seed, 1),
                    )?)
                } else {
                    None
                };
                (kl, ks)
            }
            (None, EnsembleSpec::Haar { n_qubits }) => {
                let n = *n_qubits;
                let s = |r: &mut rng::Rng| analysis::haar_state(n, r);
                let kl = analysis::expressibility(s, n, p.samples, p.bins, seed)?;
                let ks = if p.spectrum && n >= 2 {
                    Some(analysis::spectrum_distribution_distance(s, n, p.spectrum_samples, rng::derive_seed(seed, 1))?)
                } else {
                    None
                };
                (kl, ks)
            }
            (None, _) => unreachable!("only the Haar ensemble has no circuit"),
        };
        table.push(vec![l.to_string(), "kl".into(), f(kl)], seed, range_label(p.samples));
        if let Some(ks) = ks {
            table.push(vec![l.to_string(), "ks".into(), f(ks)], rng::derive_seed(seed, 1), range_label(p.spectrum_samples));
        }
        kls.push(kl);
        kss.push(ks);
    }
    Ok(output(json!({ "layers": layer_list, "kl": kls, "ks": kss }), vec![table]))
}

fn run_gradvar(p: &GradvarParams, c: &ExperimentConfig) -> Result<RunOutput> {
    let mut metrics = serde_json::Map::new();
    match p.model {
        GradModel::RandomPqc => {
            let mut t = Table::new(
                "gradvar",
                &["n", "layers", "parameter", "analytic_variance", "mean", "variance", "mean_stderr", "samples"],
            );
            for &n in &p.n_values {
                let layers = p.layer_factor * n;
                let cost = Observable::pauli(&p.cost.clone().unwrap_or_else(|| "Z".repeat(n)))?;
                let k = (layers / 2) * n;
                let seed = rng::derive_seed(c.seed, n as u64);
                let s = analysis::gradient_variance_experiment(&GradientAnsatz::RandomPqc { layers }, n, &cost, &[k], p.samples, seed)?[0];
                let analytic = analysis::two_design_gradient_variance(n);
                t.push(
                    vec![n.to_string(), layers.to_string(), k.to_string(), f(analytic), f(s.mean), f(s.variance), f(s.mean_stderr), s.samples.to_string()],
                    seed,
                    range_label(p.samples),
                );
                metrics.insert(
                    format!("n{n}"),
                    json!({ "analytic": analytic, "variance": s.variance, "ratio": s.variance / analytic, "mean": s.mean, "mean_stderr": s.mean_stderr }),
                );
            }
            Ok(output(Value::Object(metrics), vec![t]))
        }
        GradModel::Toy => {
            let mut t = Table::new("toy_variances", &["n", "cost", "analytic_variance", "variance", "mean", "mean_stderr"]);
            for &n in &p.n_values {
                let seed = rng::derive_seed(c.seed, n as u64);
                let v = analysis::toy_cost_variances(n, p.samples, seed)?;
                for (name, chk, s) in [("global", v.global, seed), ("local", v.local, rng::derive_seed(seed, 1))] {
                    t.push(
                        vec![n.to_string(), name.into(), f(chk.analytic), f(chk.empirical), f(chk.mean), f(chk.mean_stderr)],
                        s,
                        range_label(p.samples),
                    );
                }
                metrics.insert(format!("n{n}"), serde_json::to_value(v)?);
            }
            Ok(output(Value::Object(metrics), vec![t]))
        }
    }
}

fn run_fourier(p: &FourierParams, c: &ExperimentConfig) -> Result<RunOutput> {
    let obs = Observable::pauli("Z")?;
    let mut t = Table::new("fourier", &["layers", "trial", "omega", "re", "im", "abs"]);
    let mut metrics = serde_json::Map::new();
    for &l in &p.layers {
        let circuit = analysis::reuploading_circuit(l)?;
        let samples = p.samples.unwrap_or(4 * l + 3);
        let seed = rng::derive_seed(c.seed, l as u64);
        let (mut nz_min, mut nz_max, mut max_norm, mut max_res) = (usize::MAX, 0usize, 0.0f64, 0.0f64);
        for trial in 0..p.trials {
            let mut r = rng::stream(seed, trial as u64);
            let theta: Vec<f64> = (0..circuit.num_trainable()).map(|_| r.random_range(0.0..2.0 * PI)).collect();
            let rep = analysis::circuit_spectrum(&circuit, &obs, &theta, l, samples)?;
            let nz = rep.dft.iter().filter(|z| z.norm() > 1e-10).count();
            nz_min = nz_min.min(nz);
            nz_max = nz_max.max(nz);
            max_norm = max_norm.max(rep.l2_norm());
            max_res = max_res.max(rep.residual);
            for (w, z) in rep.dft_frequencies.iter().zip(&rep.dft) {
                t.push(vec![l.to_string(), trial.to_string(), w.to_string(), f(z.re), f(z.im), f(z.norm())], seed, trial.to_string());
            }
        }
        metrics.insert(
            format!("L{l}"),
            json!({
                "spectrum_size": 2 * l + 1,
                "nonzero_bins_min": nz_min,
                "nonzero_bins_max": nz_max,
                "max_l2_norm": max_norm,
                "max_residual": max_res,
            }),
        );
    }
    Ok(output(Value::Object(metrics), vec![t]))
}

fn run_bound(p: &BoundParams, c: &ExperimentConfig) -> Result<RunOutput> {
    let b = analysis::generalization_bound(bound_spectrum_size(p), p.m, p.lipschitz, p.obs_norm, p.loss_range, p.delta)?;
    let mut t = Table::new("bound", &["spectrum_size", "m", "complexity_term", "confidence_term", "bound_value"]);
    t.push(
        vec![b.spectrum_size.to_string(), b.sample_size.to_string(), f(b.complexity_term), f(b.confidence_term), f(b.bound_value)],
        c.seed,
        "none".into(),
    );
    Ok(output(serde_json::to_value(b)?, vec![t]))
}

fn run_deconvolve(p: &DeconvolveParams, c: &ExperimentConfig) -> Result<RunOutput> {
    let prep = match &p.prep {
        Some(circ) => circ.clone(),
        None => Circuit::from_ops(1, vec![Op::param(GateKind::Ry, vec![0], Slot::feature(0))])?,
    };
    let obs = Observable::pauli(&p.observable)?;
    let pts = channels::self_consistency_run(&p.channel, &prep, &obs, c.shots, c.seed, p.repetitions, &p.sweep)?;
    let mut t = Table::new("deconvolution", &["sweep_value", "ideal", "noisy", "noisy_stderr", "mitigated", "stderr"]);
    let mut worst_exact = 0.0f64;
    let mut within = 0usize;
    for (i, pt) in pts.iter().enumerate() {
        t.push(
            vec![f(pt.sweep_value), f(pt.ideal), f(pt.noisy), f(pt.noisy_stderr), f(pt.mitigated), f(pt.stderr)],
            c.seed,
            if c.shots.is_some() { format!("{}-{}", 3 * i, 3 * i + 2) } else { "exact".into() },
        );
        worst_exact = worst_exact.max((pt.mitigated - pt.ideal).abs());
        if (pt.mitigated - pt.ideal).abs() <= 5.0 * pt.stderr.max(1e-12) {
            within += 1;
        }
    }
    let metrics = json!({
        "points": pts.len(),
        "max_abs_error": worst_exact,
        "within_5_stderr": within,
        "shots": c.shots,
    });
    Ok(output(metrics, vec![t]))
}

fn neuron_dataset(data: NeuronData, m: usize, seed: u64, ds: Option<&Dataset>) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    Ok(match data {
        NeuronData::TwoClusters => datasets::two_clusters_2d(m, seed),
        NeuronData::Circles => datasets::concentric_circles(m, seed),
        NeuronData::Dataset => {
            let ds = ds.ok_or_else(|| VqError::Config("missing dataset".into()))?;
            let labels = ds.labels.as_ref().ok_or_else(|| VqError::Config("dataset needs labels".into()))?;
            (ds.features.clone(), labels.iter().map(|y| *y as f64).collect())
        }
    })
}

/// Deterministic train/test split by seeded shuffling.
fn split<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut rng::stream(seed, 0x7370));
    let n_test = ((items.len() as f64) * fraction).round() as usize;
    let n_test = n_test.min(items.len().saturating_sub(1));
    let test = idx[..n_test].iter().map(|i| items[*i].clone()).collect();
    let train = idx[n_test..].iter().map(|i| items[*i].clone()).collect();
    (train, test)
}

fn loss_table(name: &str, run: &TrainRun, label: &str) -> Table {
    let mut t = Table::new(name, &["run", "iteration", "loss"]);
    for (it, l) in &run.loss_trace {
        t.push(vec![label.into(), it.to_string(), f(*l)], run.seed, "0".into());
    }
    t
}

fn run_neuron(p: &NeuronParams, c: &ExperimentConfig, ds: Option<&Dataset>) -> Result<RunOutput> {
    match p {
        NeuronParams::Equivalence { n_values, pairs } => {
            let mut t = Table::new("equivalence", &["n", "pair", "circuit", "closed_form", "abs_diff"]);
            let mut worst = 0.0f64;
            for &n in n_values {
                let seed = rng::derive_seed(c.seed, n as u64);
                for k in 0..*pairs {
                    let mut r = rng::stream(seed, k as u64);
                    let d = 1usize << n;
                    let theta: Vec<f64> = (0..d).map(|_| r.random_range(0.0..2.0 * PI)).collect();
                    let phi: Vec<f64> = (0..d).map(|_| r.random_range(0.0..2.0 * PI)).collect();
                    let circ = last_qubit_one_probability(&neuron_circuit(&theta, &phi)?.run_dense(&[], &[])?);
                    let closed = neuron_activation_closed_form(&theta, &phi)?;
                    worst = worst.max((circ - closed).abs());
                    t.push(vec![n.to_string(), k.to_string(), f(circ), f(closed), f((circ - closed).abs())], seed, k.to_string());
                }
            }
            Ok(output(json!({ "max_abs_diff": worst }), vec![t]))
        }
        NeuronParams::Noise { a_values, n_values, samples } => {
            let mut t = Table::new("noise", &["a", "n", "analytic_mean", "empirical_mean", "stderr", "samples"]);
            let mut rows = Vec::new();
            for (i, &a) in a_values.iter().enumerate() {
                for &n in n_values {
                    let seed = rng::derive_seed(c.seed, (i * 64 + n) as u64);
                    let r = analysis::neuron_noise_resilience(a, n, *samples, seed)?;
                    t.push(
                        vec![f(a), n.to_string(), f(r.analytic_mean), f(r.empirical_mean), f(r.stderr), r.samples.to_string()],
                        seed,
                        range_label(*samples),
                    );
                    rows.push(json!({ "a": a, "n": n, "analytic": r.analytic_mean, "empirical": r.empirical_mean, "stderr": r.stderr }));
                }
            }
            Ok(output(json!({ "points": rows }), vec![t]))
        }
        NeuronParams::Train { data, m, test_m, encoding, loss, init, optimizer } => {
            let (train, test) = match data {
                NeuronData::Dataset => {
                    let (xs, ys) = neuron_dataset(*data, 0, 0, ds)?;
                    let pairs: Vec<(Vec<f64>, f64)> = xs.into_iter().zip(ys).collect();
                    split(&pairs, 0.25, c.seed)
                }
                _ => {
                    let (xs, ys) = neuron_dataset(*data, *m, rng::derive_seed(c.seed, 0), None)?;
                    let (tx, ty) = neuron_dataset(*data, *test_m, rng::derive_seed(c.seed, 1), None)?;
                    (xs.into_iter().zip(ys).collect(), tx.into_iter().zip(ty).collect())
                }
            };
            let (xs, ys): (Vec<Vec<f64>>, Vec<f64>) = train.iter().cloned().unzip();
            let mut opt = optimizer.clone();
            opt.seed = c.seed;
            let run = optimize::train_neuron(&xs, &ys, *encoding, *loss, *init, &opt)?;
            let th = loss.threshold.unwrap_or(0.5);
            let train_acc = optimize::neuron_accuracy(&xs, &ys, &run.final_params, *encoding, th)?;
            let (tx, ty): (Vec<Vec<f64>>, Vec<f64>) = test.iter().cloned().unzip();
            let test_acc = if tx.is_empty() { None } else { Some(optimize::neuron_accuracy(&tx, &ty, &run.final_params, *encoding, th)?) };
            let metrics = json!({
                "train_accuracy": train_acc,
                "test_accuracy": test_acc,
                "best_loss": run.best_loss,
                "weights": run.final_params,
            });
            let mut out = output(metrics, vec![loss_table("loss", &run, "0")]);
            out.notes = run.notes.clone();
            Ok(out)
        }
    }
}

fn run_autoencoder(p: &AutoencoderParams, c: &ExperimentConfig, ds: Option<&Dataset>) -> Result<RunOutput> {
    let data = match ds {
        Some(d) => d.features.clone(),
        None => datasets::phase_family(p.m, p.noise, c.seed),
    };
    let (train, validation) = split(&data, p.validation_fraction, c.seed);
    let mut opt = p.optimizer.clone();
    opt.seed = c.seed;
    let run = optimize::train_autoencoder(&train, &validation, &opt)?;
    let mut metrics = serde_json::to_value(&run.metrics)?;
    metrics["best_loss"] = json!(run.best_loss);
    metrics["params"] = json!(run.final_params);
    metrics["train_size"] = json!(train.len());
    metrics["validation_size"] = json!(validation.len());
    Ok(output(metrics, vec![loss_table("loss", &run, "0")]))
}

fn run_unsample(p: &UnsampleParams, c: &ExperimentConfig) -> Result<RunOutput> {
    let target = p.target.state()?;
    let mut loss = Table::new("loss", &["run", "iteration", "loss"]);
    let mut summary = Table::new("runs", &["run", "final_fidelity", "two_qubit_gates", "iterations"]);
    let mut fids = Vec::new();
    for k in 0..p.runs {
        let mut opt = p.optimizer.clone();
        opt.seed = rng::derive_seed(c.seed, k as u64);
        let run = match &p.method {
            UnsampleMethod::Global { cycles, entangler } => optimize::unsample_global(&target, *cycles, *entangler, &opt)?,
            UnsampleMethod::Local { structure, entangler, jitter } => {
                optimize::unsample_local(&target, structure, *entangler, &opt, *jitter)?
            }
        };
        let fid = run.metrics.get("final_fidelity").copied().unwrap_or(f64::NAN);
        let gates = run.metrics.get("two_qubit_gates").copied().unwrap_or(0.0);
        for (it, l) in &run.loss_trace {
            loss.push(vec![k.to_string(), it.to_string(), f(*l)], opt.seed, "0".into());
        }
        summary.push(vec![k.to_string(), f(fid), f(gates), run.loss_trace.len().to_string()], opt.seed, "0".into());
        fids.push(fid);
    }
    let above = |t: f64| fids.iter().filter(|f| **f > t).count();
    let metrics = json!({
        "final_fidelity": fids,
        "runs_above_0.99": above(0.99),
        "runs_above_0.999": above(0.999),
    });
    Ok(output(metrics, vec![summary, loss]))
}

struct QnnObjective<'a> {
    circuit: Circuit,
    obs: Observable,
    inputs: &'a [Vec<f64>],
    targets: &'a [f64],
}

impl QnnObjective<'_> {
    fn model(&self, i: usize) -> ExpectationModel {
        ExpectationModel::new(self.circuit.clone(), Measure::Observable(self.obs.clone())).with_features(self.inputs[i].clone())
    }

    fn idx(&self, batch: Option<&[usize]>) -> Vec<usize> {
        batch.map(<[usize]>::to_vec).unwrap_or_else(|| (0..self.inputs.len()).collect())
    }
}

impl Objective for QnnObjective<'_> {
    fn value(&self, params: &[f64], batch: Option<&[usize]>) -> Result<f64> {
        let idx = self.idx(batch);
        let mut s = 0.0;
        for i in &idx {
            s += (self.model(*i).value(params)? - self.targets[*i]).powi(2);
        }
        Ok(s / idx.len() as f64)
    }

    fn gradient(&self, params: &[f64], batch: Option<&[usize]>) -> Result<Option<Vec<f64>>> {
        let idx = self.idx(batch);
        let mut g = vec![0.0; params.len()];
        for i in &idx {
            let m = self.model(*i);
            let r = m.value(params)? - self.targets[*i];
            for (gk, dk) in g.iter_mut().zip(m.gradient(params)?) {
                *gk += 2.0 * r * dk / idx.len() as f64;
            }
        }
        Ok(Some(g))
    }

    fn data_len(&self) -> Option<usize> {
        Some(self.inputs.len())
    }
}

fn run_train(p: &TrainParams, c: &ExperimentConfig, ds: Option<&Dataset>) -> Result<RunOutput> {
    match p {
        TrainParams::Classifier { synthetic, test_fraction, optimizer } => {
            let (xs, ys): (Vec<[f64; 3]>, Vec<u8>) = match ds {
                Some(d) => {
                    let labels = d.labels.as_ref().ok_or_else(|| VqError::Config("dataset needs labels".into()))?;
                    let xs = d
                        .features
                        .iter()
                        .map(|r| {
                            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                            if n > 0.0 { [r[0] / n, r[1] / n, r[2] / n] } else { [0.0, 0.0, 1.0] }
                        })
                        .collect();
                    (xs, labels.iter().map(|y| *y as u8).collect())
                }
                None => datasets::bloch_clusters(synthetic.m, synthetic.axis, synthetic.spread, c.seed),
            };
            let pairs: Vec<([f64; 3], u8)> = xs.into_iter().zip(ys).collect();
            let (train, test) = split(&pairs, *test_fraction, c.seed);
            let (tx, ty): (Vec<[f64; 3]>, Vec<u8>) = train.into_iter().unzip();
            let mut opt = optimizer.clone();
            opt.seed = c.seed;
            let run = optimize::train_classifier(&tx, &ty, &opt)?;
            let (vx, vy): (Vec<[f64; 3]>, Vec<u8>) = test.into_iter().unzip();
            let test_acc = (!vx.is_empty()).then(|| optimize::classifier_accuracy(&vx, &vy, &run.final_params));
            let mut metrics = serde_json::to_value(&run.metrics)?;
            metrics["test_accuracy"] = json!(test_acc);
            metrics["params"] = json!(run.final_params);
            let mut out = output(metrics, vec![loss_table("loss", &run, "0")]);
            out.notes = run.notes.clone();
            Ok(out)
        }
        TrainParams::Qnn { feature, var, layers, mode, observable, test_fraction, optimizer } => {
            let d = ds.ok_or_else(|| VqError::Config("qnn training needs a dataset".into()))?;
            let labels = d.labels.as_ref().ok_or_else(|| VqError::Config("dataset needs labels".into()))?;
            let circuit = build_qnn(feature, var, *layers, *mode)?;
            let n = circuit.n_qubits;
            let obs = match observable {
                Some(s) => Observable::pauli(s)?,
                None => Observable::z_on(n, 0)?,
            };
            let pairs: Vec<(Vec<f64>, f64)> = d.features.iter().cloned().zip(labels.iter().map(|y| *y as f64)).collect();
            let (train, test) = split(&pairs, *test_fraction, c.seed);
            let (tx, ty): (Vec<Vec<f64>>, Vec<f64>) = train.into_iter().unzip();
            let obj = QnnObjective { circuit: circuit.clone(), obs: obs.clone(), inputs: &tx, targets: &ty };
            let mut opt = optimizer.clone();
            opt.seed = c.seed;
            let mut r = rng::stream(c.seed, 0x716e);
            let x0: Vec<f64> = (0..circuit.num_trainable()).map(|_| r.random_range(0.0..2.0 * PI)).collect();
            let run = minimize(&obj, &x0, &opt)?;
            let (vx, vy): (Vec<Vec<f64>>, Vec<f64>) = test.into_iter().unzip();
            let test_mse = if vx.is_empty() {
                None
            } else {
                let tobj = QnnObjective { circuit, obs, inputs: &vx, targets: &vy };
                Some(tobj.value(&run.final_params, None)?)
            };
            let metrics = json!({ "train_mse": run.best_loss, "test_mse": test_mse, "params": run.final_params });
            Ok(output(metrics, vec![loss_table("loss", &run, "0")]))
        }
    }
}

/// Resolve, execute, and return the record plus outputs.
pub fn run_config(config: ExperimentConfig) -> Result<(RunRecord, RunOutput)> {
    let resolved = resolve(config)?;
    let out = execute(&resolved)?;
    let rec = record(&resolved, &out)?;
    Ok((rec, out))
}

/// Default output directory for a config.
pub fn output_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.clone().unwrap_or_else(|| PathBuf::from(format!("vqsim-out/{}", config.command)))
}

/// Counts of rows per table, for the log.
pub fn table_summary(out: &RunOutput) -> BTreeMap<String, usize> {
    out.tables.iter().map(|t| (t.name.clone(), t.rows.len())).collect()
}
