//! Native control set for the oscillator-auxiliary system and the composite
//! protocols built from it: echoed conditional displacements (ECD), auxiliary
//! rotations, measurement with reset, dissipative stabilization rounds,
//! logical readout, software Pauli-frame updates, and Gaussian two-mode
//! interactions.
//!
//! Circuits are described against the oscillator-only layout; executed states
//! live on `osc ⊗ aux` where a dimension-2 auxiliary qubit is always the last
//! axis (`SpaceLayout::with_aux`). Execution comes in two flavors: pure-state
//! trajectories with sampled measurement outcomes, and density-matrix runs
//! where measurement plus reset acts as the outcome-averaged channel and the
//! per-step "1" probabilities are reported instead of sampled bits.

pub mod optim;

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codes::{complex_pairs, CodeError, CodeSpec, Pauli, PhaseSpaceVector};
use crate::fock::{
    annihilation, apply_on_axis, displacement, embed, kron, matrix_exponential, FockError,
    OperatorMatrix, QuantumState, SpaceLayout,
};
use crate::noise::{NoiseError, NoiseModel, StepChannels};

/// Largest total Hilbert-space dimension accepted for density-matrix
/// execution. Beyond this, per-step dense conjugations stop being a sensible
/// use of memory and trajectory execution is the supported mode.
pub const DENSITY_DIM_CAP: usize = 1024;

#[derive(Debug, Error)]
pub enum CircuitError {
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error("layout must end in a dimension-2 auxiliary, got dims {dims:?}")]
    MissingAux { dims: Vec<usize> },
    #[error("step {index}: expected {expected} mode amplitudes, got {got}")]
    ModeCountMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("step {index}: negative duration {duration}")]
    NegativeDuration { index: usize, duration: f64 },
    #[error("stabilizer index {index} out of range for {count} stabilizers")]
    StabilizerOutOfRange { index: usize, count: usize },
    #[error("state layout {got:?} does not match circuit layout {expected:?}")]
    LayoutMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("selected branch probability {prob:.3e} is below 1e-14")]
    BranchUnderflow { prob: f64 },
    #[error(
        "density-matrix execution needs total dimension ≤ {cap}, layout has {dim}; \
         use trajectory mode"
    )]
    DensityTooLarge { dim: usize, cap: usize },
    #[error("auxiliary not in |g⟩ (excited weight {weight:.3e}); cannot split off oscillator")]
    AuxNotGround { weight: f64 },
    #[error("ansatz depth {depth} exceeds the supported maximum {max}")]
    DepthTooLarge { depth: usize, max: usize },
}

/// One gate of a control sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GateKind {
    /// exp(−i(θ/2)(cos φ σx + sin φ σy)) on the auxiliary.
    AuxRotation { theta: f64, phi: f64 },
    /// ⊗ₖ D(βₖ/2) ⊗ |e⟩⟨g| + ⊗ₖ D(−βₖ/2) ⊗ |g⟩⟨e|.
    Ecd {
        #[serde(with = "complex_pairs")]
        alpha_vector: Vec<Complex64>,
    },
    /// Unconditional ⊗ₖ D(αₖ) on the oscillator modes.
    Displacement {
        #[serde(with = "complex_pairs")]
        alpha_vector: Vec<Complex64>,
    },
    /// Born-rule sample of the auxiliary Z outcome, projection, reset to |g⟩.
    AuxMeasureReset,
    /// Idle for the step duration (noise window only).
    Wait,
    /// Forced auxiliary relaxation jump (σ₋ then renormalize). Inserted by
    /// targeted error injection, never part of a physical schedule.
    AuxDecayJump,
}

/// A gate together with its wall-clock duration, which sets the noise window
/// applied after the gate's action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStep {
    #[serde(flatten)]
    pub kind: GateKind,
    pub duration: f64,
    /// Free-text marker carried into the outcome trace; used to tag injected
    /// errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl GateStep {
    pub fn new(kind: GateKind, duration: f64) -> Self {
        Self {
            kind,
            duration,
            note: None,
        }
    }
}

mod layout_dims {
    use super::SpaceLayout;
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(layout: &SpaceLayout, s: S) -> Result<S::Ok, S::Error> {
        layout.dims().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SpaceLayout, D::Error> {
        let dims: Vec<usize> = Vec::deserialize(d)?;
        SpaceLayout::new(dims).map_err(D::Error::custom)
    }
}

/// An ordered gate sequence on a fixed oscillator layout (auxiliary implicit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    #[serde(with = "layout_dims")]
    layout: SpaceLayout,
    pub label: String,
    pub steps: Vec<GateStep>,
}

impl Circuit {
    pub fn new(layout: SpaceLayout, label: impl Into<String>) -> Self {
        Self {
            layout,
            label: label.into(),
            steps: Vec::new(),
        }
    }

    /// Oscillator-only layout the circuit is defined on.
    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    /// Layout of the states the circuit runs on (auxiliary appended).
    pub fn full_layout(&self) -> SpaceLayout {
        self.layout.with_aux()
    }

    /// Total wall-clock duration in seconds.
    pub fn duration(&self) -> f64 {
        self.steps.iter().map(|s| s.duration).sum()
    }

    fn push(&mut self, kind: GateKind, duration: f64) {
        self.steps.push(GateStep::new(kind, duration));
    }
}

/// Wall-clock durations (seconds) stamped onto built circuits, one per gate
/// family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateDurations {
    pub aux_rotation: f64,
    pub displacement: f64,
    pub ecd: f64,
    pub measure_reset: f64,
}

impl Default for GateDurations {
    fn default() -> Self {
        Self {
            aux_rotation: 10e-9,
            displacement: 10e-9,
            ecd: 300e-9,
            measure_reset: 400e-9,
        }
    }
}

/// One recorded measurement outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbsTraceEntry {
    pub round_index: usize,
    pub stabilizer_label: String,
    pub outcome: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected_error: Option<String>,
}

/// Ordered stream of measurement outcomes across rounds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SbsTrace {
    pub entries: Vec<SbsTraceEntry>,
}

impl SbsTrace {
    pub fn push(&mut self, entry: SbsTraceEntry) {
        debug_assert!(
            self.entries
                .last()
                .map_or(true, |e| entry.round_index >= e.round_index),
            "trace round indices must not decrease"
        );
        self.entries.push(entry);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,stabilizer,outcome,injected_error\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.round_index,
                e.stabilizer_label,
                e.outcome,
                e.injected_error.as_deref().unwrap_or("")
            ));
        }
        out
    }

    /// Outcome bits in recording order.
    pub fn outcomes(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.outcome).collect()
    }
}

/// 2×2 matrix of exp(−i(θ/2)(cos φ σx + sin φ σy)).
pub fn aux_rotation_matrix(theta: f64, phi: f64) -> Array2<Complex64> {
    let c = (theta / 2.0).cos();
    let s = (theta / 2.0).sin();
    let mi = Complex64::new(0.0, -1.0);
    let mut m = Array2::zeros((2, 2));
    m[(0, 0)] = Complex64::new(c, 0.0);
    m[(1, 1)] = Complex64::new(c, 0.0);
    m[(0, 1)] = mi * s * Complex64::from_polar(1.0, -phi);
    m[(1, 0)] = mi * s * Complex64::from_polar(1.0, phi);
    m
}

fn require_aux(layout: &SpaceLayout) -> Result<(), CircuitError> {
    let dims = layout.dims();
    if dims.len() < 2 || *dims.last().unwrap() != 2 {
        return Err(CircuitError::MissingAux {
            dims: dims.to_vec(),
        });
    }
    Ok(())
}

/// Auxiliary rotation embedded on a full `osc ⊗ aux` layout.
pub fn aux_rotation(
    theta: f64,
    phi: f64,
    layout: &SpaceLayout,
) -> Result<OperatorMatrix, CircuitError> {
    require_aux(layout)?;
    let m = aux_rotation_matrix(theta, phi);
    let op = OperatorMatrix::new(SpaceLayout::single_mode(2), m)?;
    Ok(embed(&op, layout.subsystem_count() - 1, layout)?)
}

/// Echoed conditional displacement on a full `osc ⊗ aux` layout:
/// ⊗ₖ D(βₖ/2) ⊗ |e⟩⟨g| + ⊗ₖ D(−βₖ/2) ⊗ |g⟩⟨e|.
pub fn ecd(beta: &[Complex64], layout: &SpaceLayout) -> Result<OperatorMatrix, CircuitError> {
    require_aux(layout)?;
    let osc_dims = &layout.dims()[..layout.subsystem_count() - 1];
    if beta.len() != osc_dims.len() {
        return Err(CircuitError::ModeCountMismatch {
            index: 0,
            expected: osc_dims.len(),
            got: beta.len(),
        });
    }
    let mut plus = Array2::eye(1);
    let mut minus = Array2::eye(1);
    for (k, &d) in osc_dims.iter().enumerate() {
        plus = kron(&plus, displacement(beta[k] / 2.0, d)?.matrix());
        minus = kron(&minus, displacement(-beta[k] / 2.0, d)?.matrix());
    }
    let mut eg = Array2::zeros((2, 2));
    eg[(1, 0)] = Complex64::new(1.0, 0.0);
    let mut ge = Array2::zeros((2, 2));
    ge[(0, 1)] = Complex64::new(1.0, 0.0);
    let mat = kron(&plus, &eg) + kron(&minus, &ge);
    Ok(OperatorMatrix::new(layout.clone(), mat)?)
}

/// Rotation phases (φ₀..φ₃) of the stabilization round. Fixed once against
/// the noiseless convergence oracle: from vacuum, round-robin rounds must
/// pump every stabilizer expectation above 0.9, and constructed codewords
/// must be fixed points of the round channel.
pub const SBS_PHASES: [f64; 4] = [0.0, 3.0 * FRAC_PI_2, 3.0 * FRAC_PI_2, 0.0];

/// Orientation of the small conditional displacements relative to the
/// 90°-rotated big-displacement direction, fixed by the same calibration.
pub const SBS_SMALL_SIGN: f64 = 1.0;

/// Step index of the big ECD inside a stabilization round, the target for
/// mid-gate error injection.
pub const SBS_BIG_STEP: usize = 3;

/// The shared small-Big-small measurement circuit for a displacement vector.
///
/// Interleaving the three conditional displacements with the four π/2
/// auxiliary rotations makes the two measurement branches act on the
/// oscillator as D(±β/2) multiplied by first-order envelope trims, so the
/// outcome operators approximate cos and sin of half the envelope-dressed
/// phase operator of D(β). The auxiliary must enter in |g⟩ and is measured
/// and reset at the end.
fn small_big_small(
    label: String,
    beta: &[Complex64],
    tau: f64,
    layout: &SpaceLayout,
    durations: &GateDurations,
) -> Circuit {
    let small = Complex64::new(0.0, SBS_SMALL_SIGN * tau / 2.0);
    let eps: Vec<Complex64> = beta.iter().map(|b| b * small).collect();
    let mut c = Circuit::new(layout.clone(), label);
    c.push(
        GateKind::AuxRotation {
            theta: FRAC_PI_2,
            phi: SBS_PHASES[0],
        },
        durations.aux_rotation,
    );
    c.push(
        GateKind::Ecd {
            alpha_vector: eps.clone(),
        },
        durations.ecd,
    );
    c.push(
        GateKind::AuxRotation {
            theta: FRAC_PI_2,
            phi: SBS_PHASES[1],
        },
        durations.aux_rotation,
    );
    c.push(
        GateKind::Ecd {
            alpha_vector: beta.to_vec(),
        },
        durations.ecd,
    );
    c.push(
        GateKind::AuxRotation {
            theta: FRAC_PI_2,
            phi: SBS_PHASES[2],
        },
        durations.aux_rotation,
    );
    c.push(GateKind::Ecd { alpha_vector: eps }, durations.ecd);
    c.push(
        GateKind::AuxRotation {
            theta: FRAC_PI_2,
            phi: SBS_PHASES[3],
        },
        durations.aux_rotation,
    );
    c.push(GateKind::AuxMeasureReset, durations.measure_reset);
    debug_assert!(matches!(c.steps[SBS_BIG_STEP].kind, GateKind::Ecd { .. }));
    c
}

/// One small-Big-small stabilization round for the indexed stabilizer.
///
/// The big conditional displacement carries the stabilizer's α-vector scaled
/// by cosh(Δ²); the small ones carry (Δ²/2)·|β_B| along the 90°-rotated
/// direction. The branches recombine symmetrically at ±β_B/2, so outcome 0
/// keeps codewords fixed up to the half-translation mask: on the square GKP
/// code each round applies the logical Pauli parallel to half its stabilizer
/// (see [`sbs_frame_flip`]), which callers absorb into the software frame.
pub fn sbs_round(
    code: &CodeSpec,
    stabilizer_index: usize,
    layout: &SpaceLayout,
    durations: &GateDurations,
) -> Result<Circuit, CircuitError> {
    let stab = code
        .stabilizers
        .get(stabilizer_index)
        .ok_or(CircuitError::StabilizerOutOfRange {
            index: stabilizer_index,
            count: code.stabilizers.len(),
        })?;
    if layout.subsystem_count() != code.mode_count {
        return Err(CircuitError::ModeCountMismatch {
            index: 0,
            expected: code.mode_count,
            got: layout.subsystem_count(),
        });
    }
    let tau = code.delta * code.delta;
    let ch = tau.cosh();
    let beta_b: Vec<Complex64> = stab.amplitudes.iter().map(|a| a * ch).collect();
    Ok(small_big_small(
        stab.label.clone(),
        &beta_b,
        tau,
        layout,
        durations,
    ))
}

/// The deterministic logical action a stabilization round applies.
///
/// Both measurement branches displace the oscillator by half the stabilizer,
/// so the round conjugates every logical displacement by D(stab/2) regardless
/// of the outcome. A logical anticommuting with the half-translation has its
/// sign flipped, which is exactly the action of the complementary Pauli: a
/// flipped Z̄ reads as a frame X̄, a flipped X̄ as a frame Z̄. The returned
/// gates (possibly empty, possibly both) are absorbed into the software
/// frame via [`gauge_update`]. On the square GKP code each round yields the
/// single Pauli parallel to half its stabilizer; on the tesseract the first
/// two rounds of the cycle yield X̄ and Z̄ while the last two are silent,
/// and the rounds additionally walk the state through stabilizer sign
/// sectors that close up only over the full four-round cycle.
pub fn sbs_frame_flip(code: &CodeSpec, stabilizer_index: usize) -> Vec<FrameGate> {
    let Some(stab) = code.stabilizers.get(stabilizer_index) else {
        return Vec::new();
    };
    let half = stab.scaled(Complex64::new(0.5, 0.0));
    let anticommutes = |vec: &PhaseSpaceVector| -> bool {
        let phase = half.exchange_phase(vec).rem_euclid(2.0 * PI);
        (phase - PI).abs() < 1e-9
    };
    let mut gates = Vec::new();
    if anticommutes(code.logical(Pauli::Z)) {
        gates.push(FrameGate::X);
    }
    if anticommutes(code.logical(Pauli::X)) {
        gates.push(FrameGate::Z);
    }
    gates
}

/// Idle round of the given duration, for unprotected-control experiments.
pub fn idle_round(layout: &SpaceLayout, duration: f64) -> Circuit {
    let mut c = Circuit::new(layout.clone(), "idle");
    c.push(GateKind::Wait, duration);
    c
}

/// Phase-estimation readout of a logical Pauli.
///
/// With `finite_energy` false this is the single-ECD circuit whose outcome-0
/// probability is exactly (1 + Re⟨D(α_P)⟩)/2. With it true, a small
/// conditional displacement of the same structure as the stabilization round
/// tilts the measurement onto the envelope-dressed Pauli, and the shared
/// branch drift is recentered after the measurement.
pub fn logical_readout(
    code: &CodeSpec,
    pauli: Pauli,
    finite_energy: bool,
    layout: &SpaceLayout,
    durations: &GateDurations,
) -> Result<Circuit, CircuitError> {
    logical_readout_of(code.logical(pauli), code.delta, finite_energy, layout, durations)
}

/// Readout circuit for an explicit displacement vector (used by the framed
/// variant, which rotates the vector before building).
pub fn logical_readout_of(
    vec: &PhaseSpaceVector,
    delta: f64,
    finite_energy: bool,
    layout: &SpaceLayout,
    durations: &GateDurations,
) -> Result<Circuit, CircuitError> {
    if layout.subsystem_count() != vec.mode_count() {
        return Err(CircuitError::ModeCountMismatch {
            index: 0,
            expected: vec.mode_count(),
            got: layout.subsystem_count(),
        });
    }
    let label = format!("readout_{}", vec.label);
    if !finite_energy {
        let mut c = Circuit::new(layout.clone(), label);
        c.push(
            GateKind::AuxRotation {
                theta: FRAC_PI_2,
                phi: FRAC_PI_2,
            },
            durations.aux_rotation,
        );
        c.push(
            GateKind::Ecd {
                alpha_vector: vec.amplitudes.clone(),
            },
            durations.ecd,
        );
        c.push(
            GateKind::AuxRotation {
                theta: FRAC_PI_2,
                phi: 3.0 * FRAC_PI_2,
            },
            durations.aux_rotation,
        );
        c.push(GateKind::AuxMeasureReset, durations.measure_reset);
        return Ok(c);
    }
    let tau = delta * delta;
    let ch = tau.cosh();
    let beta_p: Vec<Complex64> = vec.amplitudes.iter().map(|a| a * ch).collect();
    Ok(small_big_small(label, &beta_p, tau, layout, durations))
}

/// Software Pauli frame: per-mode phase-space rotation in 90° steps plus the
/// accumulated Pauli record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PauliFrame {
    quarter_turns: Vec<u8>,
    x_exponent: u8,
    z_exponent: u8,
}

/// Logical gate applied purely in software.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameGate {
    X,
    Z,
    H,
}

impl PauliFrame {
    pub fn identity(mode_count: usize) -> Self {
        Self {
            quarter_turns: vec![0; mode_count],
            x_exponent: 0,
            z_exponent: 0,
        }
    }

    pub fn quarter_turns(&self) -> &[u8] {
        &self.quarter_turns
    }

    pub fn x_exponent(&self) -> u8 {
        self.x_exponent
    }

    pub fn z_exponent(&self) -> u8 {
        self.z_exponent
    }

    /// Rotate a displacement vector into the current frame: each mode
    /// amplitude picks up i per quarter turn.
    pub fn rotate(&self, vec: &PhaseSpaceVector) -> PhaseSpaceVector {
        let amplitudes = vec
            .amplitudes
            .iter()
            .zip(self.quarter_turns.iter())
            .map(|(a, &q)| {
                let mut z = *a;
                for _ in 0..q {
                    z *= Complex64::new(0.0, 1.0);
                }
                z
            })
            .collect();
        PhaseSpaceVector::new(vec.label.clone(), amplitudes)
    }

    /// Whether a readout of the given Pauli must relabel its outcome because
    /// the frame's record anticommutes with it.
    pub fn readout_flip(&self, pauli: Pauli) -> bool {
        match pauli {
            Pauli::Z => self.x_exponent == 1,
            Pauli::X => self.z_exponent == 1,
        }
    }
}

/// Apply a software logical gate to the frame.
pub fn gauge_update(frame: &PauliFrame, gate: FrameGate) -> PauliFrame {
    let mut f = frame.clone();
    match gate {
        FrameGate::X => f.x_exponent ^= 1,
        FrameGate::Z => f.z_exponent ^= 1,
        FrameGate::H => {
            std::mem::swap(&mut f.x_exponent, &mut f.z_exponent);
            for q in &mut f.quarter_turns {
                *q = (*q + 1) % 4;
            }
        }
    }
    f
}

/// Frame-consulting readout: builds the circuit for the rotated displacement
/// vector and reports whether the sampled outcomes must be flipped.
pub fn logical_readout_framed(
    code: &CodeSpec,
    pauli: Pauli,
    finite_energy: bool,
    layout: &SpaceLayout,
    durations: &GateDurations,
    frame: &PauliFrame,
) -> Result<(Circuit, bool), CircuitError> {
    let vec = frame.rotate(code.logical(pauli));
    let circuit = logical_readout_of(&vec, code.delta, finite_energy, layout, durations)?;
    Ok((circuit, frame.readout_flip(pauli)))
}

/// Gaussian two-mode interaction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TwoModeInteraction {
    /// Ĥ = g â†b̂ + g* âb̂†, evolved for time t.
    BeamSplitter { g: Complex64, t: f64 },
    /// Ĥ = η âb̂ + η* â†b̂†, evolved for time t.
    TwoModeSqueeze { eta: Complex64, t: f64 },
}

/// exp(−i t Ĥ) for a two-oscillator layout (no auxiliary).
pub fn gaussian_two_mode(
    kind: TwoModeInteraction,
    layout: &SpaceLayout,
) -> Result<OperatorMatrix, CircuitError> {
    let dims = layout.dims();
    if dims.len() != 2 {
        return Err(CircuitError::ModeCountMismatch {
            index: 0,
            expected: 2,
            got: dims.len(),
        });
    }
    let a = annihilation(dims[0])?;
    let b = annihilation(dims[1])?;
    let (mat, t) = match kind {
        TwoModeInteraction::BeamSplitter { g, t } => {
            let m = kron(a.adjoint().matrix(), b.matrix()).mapv(|z| z * g)
                + kron(a.matrix(), b.adjoint().matrix()).mapv(|z| z * g.conj());
            (m, t)
        }
        TwoModeInteraction::TwoModeSqueeze { eta, t } => {
            let m = kron(a.matrix(), b.matrix()).mapv(|z| z * eta)
                + kron(a.adjoint().matrix(), b.adjoint().matrix()).mapv(|z| z * eta.conj());
            (m, t)
        }
    };
    let gen = OperatorMatrix::new(layout.clone(), mat)?;
    Ok(matrix_exponential(&gen, Complex64::new(0.0, -t))?)
}

/// |ψ⟩ ⊗ |g⟩ on the `osc ⊗ aux` layout.
pub fn with_aux_ground(state: &QuantumState) -> QuantumState {
    let full = state.layout().with_aux();
    let n = state.amplitudes().len();
    let mut amps = Array1::zeros(2 * n);
    for i in 0..n {
        amps[2 * i] = state.amplitudes()[i];
    }
    QuantumState::new(full, amps).expect("appending an auxiliary preserves validity")
}

/// Oscillator part of a state whose auxiliary sits in |g⟩ (as after a
/// measure-and-reset step). Errors when the excited weight is not negligible.
pub fn oscillator_part(state: &QuantumState) -> Result<QuantumState, CircuitError> {
    let dims = state.layout().dims();
    require_aux(state.layout())?;
    let n = state.amplitudes().len() / 2;
    let weight: f64 = (0..n)
        .map(|i| state.amplitudes()[2 * i + 1].norm_sqr())
        .sum();
    if weight > 1e-9 {
        return Err(CircuitError::AuxNotGround { weight });
    }
    let osc = SpaceLayout::new(dims[..dims.len() - 1].to_vec())?;
    let mut amps = Array1::zeros(n);
    for i in 0..n {
        amps[i] = state.amplitudes()[2 * i];
    }
    let mut out = QuantumState::new(osc, amps)?;
    out.normalize()?;
    Ok(out)
}

enum CompiledAction {
    Aux(Array2<Complex64>),
    /// Branch displacement factors tagged by oscillator axis; zero-amplitude
    /// modes are dropped at compile time so multimode rounds do not pay for
    /// identity applications.
    Ecd {
        plus: Vec<(usize, Array2<Complex64>)>,
        minus: Vec<(usize, Array2<Complex64>)>,
    },
    Modes(Vec<(usize, Array2<Complex64>)>),
    MeasureReset,
    AuxJump,
    Wait,
}

struct CompiledStep {
    action: CompiledAction,
    channels: Option<Arc<StepChannels>>,
    note: Option<String>,
}

/// A circuit lowered to per-axis dense operators with per-step noise channels
/// attached, reusable across rounds and trajectories.
pub struct CompiledCircuit {
    osc_dims: Vec<usize>,
    full_dims: Vec<usize>,
    label: String,
    steps: Vec<CompiledStep>,
}

fn build_channels(
    noise: Option<&NoiseModel>,
    duration: f64,
    osc_dims: &[usize],
    cache: &mut Vec<(u64, Arc<StepChannels>)>,
) -> Result<Option<Arc<StepChannels>>, CircuitError> {
    let model = match noise {
        Some(m) => m,
        None => return Ok(None),
    };
    if duration <= 0.0 {
        return Ok(None);
    }
    let key = duration.to_bits();
    if let Some((_, ch)) = cache.iter().find(|(k, _)| *k == key) {
        return Ok(Some(ch.clone()));
    }
    let ch = crate::noise::step_channels(model, duration, osc_dims)?;
    if ch.is_empty() {
        return Ok(None);
    }
    let arc = Arc::new(ch);
    cache.push((key, arc.clone()));
    Ok(Some(arc))
}

impl CompiledCircuit {
    pub fn new(circuit: &Circuit, noise: Option<&NoiseModel>) -> Result<Self, CircuitError> {
        if let Some(m) = noise {
            m.validate()?;
        }
        let osc_dims = circuit.layout().dims().to_vec();
        let full_dims = circuit.full_layout().dims().to_vec();
        let modes = osc_dims.len();
        let mut cache: Vec<(u64, Arc<StepChannels>)> = Vec::new();
        let mut steps = Vec::with_capacity(circuit.steps.len());
        for (index, step) in circuit.steps.iter().enumerate() {
            if step.duration < 0.0 || !step.duration.is_finite() {
                return Err(CircuitError::NegativeDuration {
                    index,
                    duration: step.duration,
                });
            }
            let check_len = |got: usize| -> Result<(), CircuitError> {
                if got != modes {
                    Err(CircuitError::ModeCountMismatch {
                        index,
                        expected: modes,
                        got,
                    })
                } else {
                    Ok(())
                }
            };
            let action = match &step.kind {
                GateKind::AuxRotation { theta, phi } => {
                    CompiledAction::Aux(aux_rotation_matrix(*theta, *phi))
                }
                GateKind::Ecd { alpha_vector } => {
                    check_len(alpha_vector.len())?;
                    let mut plus = Vec::with_capacity(modes);
                    let mut minus = Vec::with_capacity(modes);
                    for (k, &b) in alpha_vector.iter().enumerate() {
                        if b == Complex64::new(0.0, 0.0) {
                            continue;
                        }
                        plus.push((k, displacement(b / 2.0, osc_dims[k])?.matrix().clone()));
                        minus.push((k, displacement(-b / 2.0, osc_dims[k])?.matrix().clone()));
                    }
                    CompiledAction::Ecd { plus, minus }
                }
                GateKind::Displacement { alpha_vector } => {
                    check_len(alpha_vector.len())?;
                    let mut ops = Vec::with_capacity(modes);
                    for (k, &a) in alpha_vector.iter().enumerate() {
                        if a == Complex64::new(0.0, 0.0) {
                            continue;
                        }
                        ops.push((k, displacement(a, osc_dims[k])?.matrix().clone()));
                    }
                    CompiledAction::Modes(ops)
                }
                GateKind::AuxMeasureReset => CompiledAction::MeasureReset,
                GateKind::Wait => CompiledAction::Wait,
                GateKind::AuxDecayJump => CompiledAction::AuxJump,
            };
            let channels = build_channels(noise, step.duration, &osc_dims, &mut cache)?;
            steps.push(CompiledStep {
                action,
                channels,
                note: step.note.clone(),
            });
        }
        Ok(Self {
            osc_dims,
            full_dims,
            label: circuit.label.clone(),
            steps,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn full_dims(&self) -> &[usize] {
        &self.full_dims
    }

    /// Run on a pure `osc ⊗ aux` state; measurement outcomes are sampled with
    /// the caller's generator and appended to the trace under `round_index`.
    pub fn run_pure(
        &self,
        state: &QuantumState,
        rng: &mut impl Rng,
        round_index: usize,
        trace: &mut SbsTrace,
    ) -> Result<QuantumState, CircuitError> {
        if state.layout().dims() != self.full_dims.as_slice() {
            return Err(CircuitError::LayoutMismatch {
                expected: self.full_dims.clone(),
                got: state.layout().dims().to_vec(),
            });
        }
        let mut amps = state.amplitudes().clone();
        let mut pending: Option<String> = None;
        for step in &self.steps {
            if let Some(n) = &step.note {
                pending = Some(match pending.take() {
                    Some(prev) => format!("{prev};{n}"),
                    None => n.clone(),
                });
            }
            match &step.action {
                CompiledAction::Aux(u) => {
                    amps = apply_on_axis(&amps, &self.full_dims, self.osc_dims.len(), u);
                }
                CompiledAction::Ecd { plus, minus } => {
                    self.apply_ecd(&mut amps, plus, minus);
                }
                CompiledAction::Modes(ops) => {
                    for (k, op) in ops.iter() {
                        amps = apply_on_axis(&amps, &self.full_dims, *k, op);
                    }
                }
                CompiledAction::MeasureReset => {
                    let outcome = measure_reset_pure(&mut amps, rng)?;
                    trace.push(SbsTraceEntry {
                        round_index,
                        stabilizer_label: self.label.clone(),
                        outcome,
                        injected_error: pending.take(),
                    });
                }
                CompiledAction::AuxJump => {
                    aux_jump_pure(&mut amps)?;
                }
                CompiledAction::Wait => {}
            }
            if let Some(ch) = &step.channels {
                crate::noise::apply_step_channels_pure(
                    &mut amps,
                    &self.full_dims,
                    ch,
                    rng,
                )?;
            }
        }
        Ok(QuantumState::new(SpaceLayout::new(self.full_dims.clone())?, amps)?)
    }

    fn apply_ecd(
        &self,
        amps: &mut Array1<Complex64>,
        plus: &[(usize, Array2<Complex64>)],
        minus: &[(usize, Array2<Complex64>)],
    ) {
        let n = amps.len() / 2;
        let mut g = Array1::zeros(n);
        let mut e = Array1::zeros(n);
        for i in 0..n {
            g[i] = amps[2 * i];
            e[i] = amps[2 * i + 1];
        }
        let mut new_e = g;
        let mut new_g = e;
        for (k, op) in plus.iter() {
            new_e = apply_on_axis(&new_e, &self.osc_dims, *k, op);
        }
        for (k, op) in minus.iter() {
            new_g = apply_on_axis(&new_g, &self.osc_dims, *k, op);
        }
        for i in 0..n {
            amps[2 * i] = new_g[i];
            amps[2 * i + 1] = new_e[i];
        }
    }
}

fn measure_reset_pure(amps: &mut Array1<Complex64>, rng: &mut impl Rng) -> Result<u8, CircuitError> {
    let n = amps.len() / 2;
    let mut p1 = 0.0;
    let mut p0 = 0.0;
    for i in 0..n {
        p0 += amps[2 * i].norm_sqr();
        p1 += amps[2 * i + 1].norm_sqr();
    }
    let total = p0 + p1;
    let draw: f64 = rng.random();
    let outcome = if draw * total < p1 { 1 } else { 0 };
    let prob = if outcome == 1 { p1 } else { p0 };
    if prob < 1e-14 {
        return Err(CircuitError::BranchUnderflow { prob });
    }
    let scale = prob.sqrt().recip();
    for i in 0..n {
        let kept = if outcome == 1 {
            amps[2 * i + 1]
        } else {
            amps[2 * i]
        };
        amps[2 * i] = kept * scale;
        amps[2 * i + 1] = Complex64::new(0.0, 0.0);
    }
    Ok(outcome)
}

fn aux_jump_pure(amps: &mut Array1<Complex64>) -> Result<(), CircuitError> {
    let n = amps.len() / 2;
    let mut w = 0.0;
    for i in 0..n {
        w += amps[2 * i + 1].norm_sqr();
    }
    if w < 1e-14 {
        return Err(CircuitError::BranchUnderflow { prob: w });
    }
    let scale = w.sqrt().recip();
    for i in 0..n {
        amps[2 * i] = amps[2 * i + 1] * scale;
        amps[2 * i + 1] = Complex64::new(0.0, 0.0);
    }
    Ok(())
}

/// Convenience one-shot runner: compile, then run once on a pure state.
pub fn run_circuit(
    circuit: &Circuit,
    state: &QuantumState,
    noise: Option<&NoiseModel>,
    rng: &mut impl Rng,
    round_index: usize,
    trace: &mut SbsTrace,
) -> Result<QuantumState, CircuitError> {
    CompiledCircuit::new(circuit, noise)?.run_pure(state, rng, round_index, trace)
}

enum DensityAction {
    Unitary(Array2<Complex64>),
    MeasureReset,
    AuxJump,
    Wait,
}

/// A Kraus set lowered to the full space. Sets whose operators are all
/// diagonal (dephasing, and the diagonal part of auxiliary relaxation)
/// collapse to a single elementwise factor matrix F with
/// F[i,j] = Σₖ dₖ[i]·d̄ₖ[j], applied as ρ ← ρ ⊙ F.
enum ChannelApp {
    Dense(Vec<Array2<Complex64>>),
    Hadamard(Array2<Complex64>),
}

struct DensityStep {
    action: DensityAction,
    channels: Option<Arc<Vec<ChannelApp>>>,
}

fn lower_kraus_set(
    ops: &[Array2<Complex64>],
    axis: usize,
    layout: &SpaceLayout,
) -> Result<ChannelApp, CircuitError> {
    let zero = Complex64::new(0.0, 0.0);
    let diagonal = ops
        .iter()
        .all(|op| op.indexed_iter().all(|((i, j), z)| i == j || *z == zero));
    if diagonal {
        let d = layout.dims()[axis];
        let stride: usize = layout.dims()[axis + 1..].iter().product();
        let n = layout.total_dim();
        let mut factor = Array2::<Complex64>::zeros((n, n));
        for op in ops {
            let lifted: Vec<Complex64> = (0..n)
                .map(|i| {
                    let coord = (i / stride) % d;
                    op[(coord, coord)]
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    factor[(i, j)] += lifted[i] * lifted[j].conj();
                }
            }
        }
        return Ok(ChannelApp::Hadamard(factor));
    }
    let mut full = Vec::with_capacity(ops.len());
    for op in ops {
        let small = OperatorMatrix::new(SpaceLayout::single_mode(op.nrows()), op.clone())?;
        full.push(embed(&small, axis, layout)?.matrix().clone());
    }
    Ok(ChannelApp::Dense(full))
}

/// A circuit lowered to full-space operators for density-matrix execution.
/// Measurement acts as the outcome-averaged measure-and-reset channel and
/// reports the outcome-"1" probability of each measurement step.
pub struct DensityCircuit {
    full_dims: Vec<usize>,
    steps: Vec<DensityStep>,
}

impl DensityCircuit {
    pub fn new(circuit: &Circuit, noise: Option<&NoiseModel>) -> Result<Self, CircuitError> {
        if let Some(m) = noise {
            m.validate()?;
        }
        let full_layout = circuit.full_layout();
        let total = full_layout.total_dim();
        if total > DENSITY_DIM_CAP {
            return Err(CircuitError::DensityTooLarge {
                dim: total,
                cap: DENSITY_DIM_CAP,
            });
        }
        let osc_dims = circuit.layout().dims().to_vec();
        let full_dims = full_layout.dims().to_vec();
        let modes = osc_dims.len();
        let aux_axis = modes;
        let mut app_cache: Vec<(u64, Arc<Vec<ChannelApp>>)> = Vec::new();
        let mut steps = Vec::with_capacity(circuit.steps.len());
        for (index, step) in circuit.steps.iter().enumerate() {
            if step.duration < 0.0 || !step.duration.is_finite() {
                return Err(CircuitError::NegativeDuration {
                    index,
                    duration: step.duration,
                });
            }
            let action = match &step.kind {
                GateKind::AuxRotation { theta, phi } => {
                    DensityAction::Unitary(aux_rotation(*theta, *phi, &full_layout)?.matrix().clone())
                }
                GateKind::Ecd { alpha_vector } => {
                    if alpha_vector.len() != modes {
                        return Err(CircuitError::ModeCountMismatch {
                            index,
                            expected: modes,
                            got: alpha_vector.len(),
                        });
                    }
                    DensityAction::Unitary(ecd(alpha_vector, &full_layout)?.matrix().clone())
                }
                GateKind::Displacement { alpha_vector } => {
                    if alpha_vector.len() != modes {
                        return Err(CircuitError::ModeCountMismatch {
                            index,
                            expected: modes,
                            got: alpha_vector.len(),
                        });
                    }
                    let mut chain = Array2::eye(1);
                    for (k, &a) in alpha_vector.iter().enumerate() {
                        chain = kron(&chain, displacement(a, osc_dims[k])?.matrix());
                    }
                    DensityAction::Unitary(kron(&chain, &Array2::eye(2)))
                }
                GateKind::AuxMeasureReset => DensityAction::MeasureReset,
                GateKind::Wait => DensityAction::Wait,
                GateKind::AuxDecayJump => DensityAction::AuxJump,
            };
            let channels = if let Some(model) = noise {
                if step.duration > 0.0 {
                    let key = step.duration.to_bits();
                    if let Some((_, k)) = app_cache.iter().find(|(kk, _)| *kk == key) {
                        Some(k.clone())
                    } else {
                        let ch = crate::noise::step_channels(model, step.duration, &osc_dims)?;
                        if ch.is_empty() {
                            None
                        } else {
                            let mut apps = Vec::new();
                            for (mode, mc) in ch.per_mode.iter().enumerate() {
                                for set in [&mc.loss, &mc.dephasing].into_iter().flatten() {
                                    apps.push(lower_kraus_set(&set.ops, mode, &full_layout)?);
                                }
                            }
                            if let Some(aux) = &ch.aux {
                                apps.push(lower_kraus_set(&aux.ops, aux_axis, &full_layout)?);
                            }
                            let arc = Arc::new(apps);
                            app_cache.push((key, arc.clone()));
                            Some(arc)
                        }
                    }
                } else {
                    None
                }
            } else {
                None
            };
            steps.push(DensityStep { action, channels });
        }
        Ok(Self { full_dims, steps })
    }

    /// Run the outcome-averaged channel; returns the final density matrix and
    /// the "1" probability recorded at each measurement step.
    pub fn run(
        &self,
        rho: &crate::fock::DensityMatrix,
    ) -> Result<(crate::fock::DensityMatrix, Vec<f64>), CircuitError> {
        if rho.layout().dims() != self.full_dims.as_slice() {
            return Err(CircuitError::LayoutMismatch {
                expected: self.full_dims.clone(),
                got: rho.layout().dims().to_vec(),
            });
        }
        let mut mat = rho.matrix().clone();
        let mut p1s = Vec::new();
        for step in &self.steps {
            match &step.action {
                DensityAction::Unitary(u) => {
                    mat = u.dot(&mat).dot(&u.mapv(|z| z.conj()).t());
                }
                DensityAction::MeasureReset => {
                    let n = mat.nrows() / 2;
                    let mut p1 = 0.0;
                    for i in 0..n {
                        p1 += mat[(2 * i + 1, 2 * i + 1)].re;
                    }
                    p1s.push(p1);
                    let mut next = Array2::zeros(mat.raw_dim());
                    for i in 0..n {
                        for j in 0..n {
                            next[(2 * i, 2 * j)] =
                                mat[(2 * i, 2 * j)] + mat[(2 * i + 1, 2 * j + 1)];
                        }
                    }
                    mat = next;
                }
                DensityAction::AuxJump => {
                    let n = mat.nrows() / 2;
                    let mut w = 0.0;
                    for i in 0..n {
                        w += mat[(2 * i + 1, 2 * i + 1)].re;
                    }
                    if w < 1e-14 {
                        return Err(CircuitError::BranchUnderflow { prob: w });
                    }
                    let mut next = Array2::zeros(mat.raw_dim());
                    for i in 0..n {
                        for j in 0..n {
                            next[(2 * i, 2 * j)] = mat[(2 * i + 1, 2 * j + 1)] / w;
                        }
                    }
                    mat = next;
                }
                DensityAction::Wait => {}
            }
            if let Some(apps) = &step.channels {
                for app in apps.iter() {
                    match app {
                        ChannelApp::Dense(ops) => {
                            let mut next = Array2::zeros(mat.raw_dim());
                            for k in ops {
                                let term = k.dot(&mat).dot(&k.mapv(|z| z.conj()).t());
                                next += &term;
                            }
                            mat = next;
                        }
                        ChannelApp::Hadamard(factor) => {
                            mat.zip_mut_with(factor, |m, f| *m *= *f);
                        }
                    }
                }
            }
        }
        let layout = SpaceLayout::new(self.full_dims.clone())?;
        Ok((crate::fock::DensityMatrix::from_parts(layout, mat), p1s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::gkp_square;
    use crate::fock::{expectation, number};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn aux_rotation_limits() {
        let id = aux_rotation_matrix(0.0, 0.7);
        assert_abs_diff_eq!(id[(0, 0)].re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(id[(0, 1)].norm(), 0.0, epsilon = 1e-15);
        // θ=π, φ=0 is −iσx.
        let px = aux_rotation_matrix(std::f64::consts::PI, 0.0);
        assert_abs_diff_eq!((px[(0, 1)] - c(0.0, -1.0)).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!((px[(1, 0)] - c(0.0, -1.0)).norm(), 0.0, epsilon = 1e-15);
        // R(π/2, π/2)|g⟩ = (|g⟩+|e⟩)/√2.
        let h = aux_rotation_matrix(FRAC_PI_2, FRAC_PI_2);
        assert_abs_diff_eq!((h[(0, 0)] - h[(1, 0)]).norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(h[(0, 0)].re, 0.5_f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn ecd_squares_to_identity_and_is_unitary() {
        let layout = SpaceLayout::single_mode(60).with_aux();
        let u = ecd(&[c(1.0, 0.5)], &layout).unwrap();
        let sq = u.matmul(&u);
        let eye = OperatorMatrix::identity(layout.clone());
        let diff = sq.sub(&eye);
        let max = diff.matrix().iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(max < 1e-10, "ecd² deviates from identity by {max:.2e}");

        let layout80 = SpaceLayout::single_mode(80).with_aux();
        let u2 = ecd(&[c(2.0, 0.0)], &layout80).unwrap();
        assert!(u2.unitarity_defect() < 1e-10);
    }

    #[test]
    fn ecd_of_zero_is_aux_flip() {
        let layout = SpaceLayout::single_mode(6).with_aux();
        let u = ecd(&[c(0.0, 0.0)], &layout).unwrap();
        let x = aux_rotation(std::f64::consts::PI, 0.0, &layout).unwrap();
        // R(π,0) = −iσx, so compare u against i·R(π,0).
        let diff = u.sub(&x.scaled(c(0.0, 1.0)));
        let max = diff.matrix().iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(max < 1e-12);
    }

    #[test]
    fn compiled_ecd_matches_dense_operator() {
        let layout = SpaceLayout::new(vec![7, 5]).unwrap();
        let full = layout.with_aux();
        let beta = [c(0.6, -0.2), c(-0.3, 0.4)];
        let dense = ecd(&beta, &full).unwrap();

        let mut circuit = Circuit::new(layout, "ecd");
        circuit.push(
            GateKind::Ecd {
                alpha_vector: beta.to_vec(),
            },
            0.0,
        );
        let compiled = CompiledCircuit::new(&circuit, None).unwrap();

        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut trace = SbsTrace::default();
        // A haphazard but normalized product state.
        let mut amps = Array1::zeros(full.total_dim());
        for (i, z) in amps.iter_mut().enumerate() {
            *z = c((i as f64 * 0.17).sin(), (i as f64 * 0.31).cos());
        }
        let mut state = QuantumState::new(full.clone(), amps).unwrap();
        state.normalize().unwrap();

        let fast = compiled.run_pure(&state, &mut rng, 0, &mut trace).unwrap();
        let slow = dense.apply(&state).unwrap();
        let overlap = fast.inner(&slow).norm();
        assert_abs_diff_eq!(overlap, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fast.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn measure_reset_on_ground_returns_zero() {
        let layout = SpaceLayout::single_mode(4);
        let mut circuit = Circuit::new(layout.clone(), "meas");
        circuit.push(GateKind::AuxMeasureReset, 0.0);
        let compiled = CompiledCircuit::new(&circuit, None).unwrap();
        let state = with_aux_ground(&QuantumState::vacuum(layout));
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut trace = SbsTrace::default();
        let out = compiled.run_pure(&state, &mut rng, 3, &mut trace).unwrap();
        assert_eq!(trace.entries.len(), 1);
        assert_eq!(trace.entries[0].outcome, 0);
        assert_eq!(trace.entries[0].round_index, 3);
        assert_abs_diff_eq!(out.fidelity(&state), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fixed_seed_reproduces_trace() {
        let code = gkp_square(0.3).unwrap();
        let layout = SpaceLayout::single_mode(40);
        let durations = GateDurations::default();
        let circuit = sbs_round(&code, 0, &layout, &durations).unwrap();
        let compiled = CompiledCircuit::new(&circuit, None).unwrap();
        let state = with_aux_ground(&QuantumState::vacuum(layout));
        let run = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut trace = SbsTrace::default();
            let mut s = state.clone();
            for r in 0..12 {
                s = compiled.run_pure(&s, &mut rng, r, &mut trace).unwrap();
            }
            trace
        };
        assert_eq!(run(42), run(42));
    }

    #[test]
    fn circuits_preserve_normalization() {
        let code = gkp_square(0.3).unwrap();
        let layout = SpaceLayout::single_mode(50);
        let durations = GateDurations::default();
        let mut state = with_aux_ground(&QuantumState::vacuum(layout.clone()));
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut trace = SbsTrace::default();
        for r in 0..6 {
            let circuit = sbs_round(&code, r % 2, &layout, &durations).unwrap();
            state = run_circuit(&circuit, &state, None, &mut rng, r, &mut trace).unwrap();
            assert!((state.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gauge_updates_compose() {
        let f = PauliFrame::identity(1);
        let fx = gauge_update(&f, FrameGate::X);
        assert_eq!(gauge_update(&fx, FrameGate::X), f);
        let fh = gauge_update(&f, FrameGate::H);
        let fhh = gauge_update(&fh, FrameGate::H);
        assert_eq!(fhh.quarter_turns(), &[2]);
        assert_eq!(fhh.x_exponent(), 0);
        assert_eq!(fhh.z_exponent(), 0);
        // After H, a Z readout consults the rotated vector i·α_Z. With
        // α_Z = i·α_X on the square code, that equals −α_X, whose readout
        // statistics coincide with the X vector's.
        let code = gkp_square(0.3).unwrap();
        let rotated = fh.rotate(code.logical(Pauli::Z));
        let x_amp = code.logical(Pauli::X).amplitudes[0];
        assert_abs_diff_eq!((rotated.amplitudes[0] + x_amp).norm(), 0.0, epsilon = 1e-12);
        assert!(rotated.is_parallel_to(code.logical(Pauli::X), 1e-12));
    }

    #[test]
    fn beam_splitter_swaps_single_photon_and_conserves_number() {
        let layout = SpaceLayout::new(vec![6, 6]).unwrap();
        let g = c(1.0, 0.0);
        let u = gaussian_two_mode(
            TwoModeInteraction::BeamSplitter {
                g,
                t: FRAC_PI_2,
            },
            &layout,
        )
        .unwrap();
        // |1,0⟩ → |0,1⟩ up to phase at a quarter period.
        let one_zero = QuantumState::basis_state(layout.clone(), 6);
        let zero_one = QuantumState::basis_state(layout.clone(), 1);
        let moved = u.apply(&one_zero).unwrap();
        assert_abs_diff_eq!(moved.inner(&zero_one).norm(), 1.0, epsilon = 1e-10);

        // Total photon number is conserved on a generic state.
        let n0 = embed(&number(6).unwrap(), 0, &layout).unwrap();
        let n1 = embed(&number(6).unwrap(), 1, &layout).unwrap();
        let ntot = n0.add(&n1);
        let d = displacement(c(0.7, 0.1), 6).unwrap();
        let mut probe = embed(&d, 0, &layout)
            .unwrap()
            .apply(&QuantumState::vacuum(layout.clone()))
            .unwrap();
        probe.normalize().unwrap();
        let before = expectation(&ntot, &probe).unwrap().re;
        let after = expectation(&ntot, &u.apply(&probe).unwrap()).unwrap().re;
        assert_abs_diff_eq!(before, after, epsilon = 1e-10);
    }

    #[test]
    fn two_mode_squeeze_at_zero_time_is_identity() {
        let layout = SpaceLayout::new(vec![8, 8]).unwrap();
        let u0 = gaussian_two_mode(
            TwoModeInteraction::TwoModeSqueeze {
                eta: c(0.8, 0.1),
                t: 0.0,
            },
            &layout,
        )
        .unwrap();
        let eye = OperatorMatrix::identity(layout.clone());
        let max = u0
            .sub(&eye)
            .matrix()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(max < 1e-12);
    }

    #[test]
    fn circuit_json_round_trip() {
        let code = gkp_square(0.3).unwrap();
        let layout = SpaceLayout::single_mode(30);
        let circuit = sbs_round(&code, 1, &layout, &GateDurations::default()).unwrap();
        let json = serde_json::to_string(&circuit).unwrap();
        let back: Circuit = serde_json::from_str(&json).unwrap();
        assert_eq!(circuit, back);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let mut trace = SbsTrace::default();
        trace.push(SbsTraceEntry {
            round_index: 0,
            stabilizer_label: "T_q".into(),
            outcome: 1,
            injected_error: None,
        });
        trace.push(SbsTraceEntry {
            round_index: 1,
            stabilizer_label: "T_p".into(),
            outcome: 0,
            injected_error: Some("aux_decay@3:0.5".into()),
        });
        let csv = trace.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "round,stabilizer,outcome,injected_error");
        assert_eq!(lines[1], "0,T_q,1,");
        assert_eq!(lines[2], "1,T_p,0,aux_decay@3:0.5");
    }

    #[test]
    fn density_and_pure_agree_without_noise() {
        let code = gkp_square(0.3).unwrap();
        let layout = SpaceLayout::single_mode(30);
        let durations = GateDurations::default();
        let circuit = sbs_round(&code, 0, &layout, &durations).unwrap();
        let dc = DensityCircuit::new(&circuit, None).unwrap();
        let state = with_aux_ground(&QuantumState::vacuum(layout));
        let rho = state.to_density();
        let (rho_out, p1s) = dc.run(&rho).unwrap();
        assert_eq!(p1s.len(), 1);
        assert_abs_diff_eq!(rho_out.trace().re, 1.0, epsilon = 1e-10);

        // The averaged channel equals the outcome-weighted pure branches.
        let compiled = CompiledCircuit::new(&circuit, None).unwrap();
        let mut seen = [false, false];
        let mut mix = Array2::<Complex64>::zeros((rho.matrix().nrows(), rho.matrix().ncols()));
        let mut weight = 0.0;
        for seed in 0..64u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut trace = SbsTrace::default();
            let out = compiled.run_pure(&state, &mut rng, 0, &mut trace).unwrap();
            let bit = trace.entries[0].outcome as usize;
            if !seen[bit] {
                seen[bit] = true;
                // Recover the branch probability from the density run.
                let p = if bit == 1 { p1s[0] } else { 1.0 - p1s[0] };
                let dm = out.to_density();
                mix += &dm.matrix().mapv(|z| z * p);
                weight += p;
            }
            if seen[0] && seen[1] {
                break;
            }
        }
        assert!(weight > 0.999, "both outcomes should appear, got {weight}");
        let diff = (&mix - rho_out.matrix()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "averaged channel mismatch {diff:.2e}");
    }

    #[test]
    fn oscillator_part_extracts_after_reset() {
        let layout = SpaceLayout::single_mode(12);
        let d = displacement(c(0.4, -0.1), 12).unwrap();
        let osc = d.apply(&QuantumState::vacuum(layout)).unwrap();
        let full = with_aux_ground(&osc);
        let back = oscillator_part(&full).unwrap();
        assert_abs_diff_eq!(back.fidelity(&osc), 1.0, epsilon = 1e-12);
    }
}
