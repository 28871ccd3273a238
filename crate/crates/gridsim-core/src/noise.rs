//! Open-system ingredients: photon loss and dephasing on the oscillator
//! modes, relaxation and dephasing on the auxiliary qubit, and targeted
//! mid-gate error injection.
//!
//! Every channel is exposed as an explicit Kraus set. Density-matrix
//! execution applies the sets directly; trajectory execution unravels them by
//! Born-weighted sampling of one Kraus branch (with an exact continuous-angle
//! unraveling for dephasing). Loss and dephasing generators commute as
//! superoperators, both preserve the coherence offset n−m, so composing the
//! per-step channels in a fixed order reproduces the joint evolution exactly.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuits::{Circuit, GateDurations, GateKind, GateStep};
use crate::codes::complex_pairs;
use crate::fock::{
    embed, DensityMatrix, FockError, OperatorMatrix, QuantumState, SpaceLayout,
};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error("{name} must be finite and nonnegative, got {value}")]
    InvalidRate { name: &'static str, value: f64 },
    #[error("auxiliary T2 {t2} exceeds twice T1 {t1}")]
    CoherenceBound { t1: f64, t2: f64 },
    #[error("injection fraction must lie in [0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("injection step {index} out of range for circuit with {len} steps")]
    StepOutOfRange { index: usize, len: usize },
    #[error("injection vector has {got} modes, circuit has {expected}")]
    ModeCountMismatch { expected: usize, got: usize },
    #[error("trajectory branch has vanishing weight {0:.3e}")]
    BranchUnderflow(f64),
}

/// Continuous-time rates and the gate clock they act over.
///
/// `kappa` is the oscillator energy-decay rate and `kappa_phi` the oscillator
/// dephasing rate, both in 1/s and applied identically to every mode. The
/// auxiliary qubit carries optional relaxation (`aux_t1`) and total coherence
/// (`aux_t2`) times in seconds; leaving `aux_t1` unset while `aux_t2` is set
/// models pure dephasing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    pub kappa: f64,
    pub kappa_phi: f64,
    pub aux_t1: Option<f64>,
    pub aux_t2: Option<f64>,
    pub gate_durations: GateDurations,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            kappa: 0.0,
            kappa_phi: 0.0,
            aux_t1: None,
            aux_t2: None,
            gate_durations: GateDurations::default(),
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<(), NoiseError> {
        for (name, value) in [("kappa", self.kappa), ("kappa_phi", self.kappa_phi)] {
            if !value.is_finite() || value < 0.0 {
                return Err(NoiseError::InvalidRate { name, value });
            }
        }
        for (name, value) in [("aux_t1", self.aux_t1), ("aux_t2", self.aux_t2)] {
            if let Some(v) = value {
                if !v.is_finite() || v <= 0.0 {
                    return Err(NoiseError::InvalidRate { name, value: v });
                }
            }
        }
        if let (Some(t1), Some(t2)) = (self.aux_t1, self.aux_t2) {
            if t2 > 2.0 * t1 * (1.0 + 1e-12) {
                return Err(NoiseError::CoherenceBound { t1, t2 });
            }
        }
        let d = &self.gate_durations;
        for (name, value) in [
            ("aux_rotation duration", d.aux_rotation),
            ("displacement duration", d.displacement),
            ("ecd duration", d.ecd),
            ("measure_reset duration", d.measure_reset),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(NoiseError::InvalidRate { name, value });
            }
        }
        Ok(())
    }

    /// True when no channel is active and steps need no noise processing.
    pub fn is_quiet(&self) -> bool {
        self.kappa == 0.0 && self.kappa_phi == 0.0 && self.aux_t1.is_none() && self.aux_t2.is_none()
    }
}

/// What a Kraus set implements, with the duration-resolved strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelKind {
    Loss { gamma: f64 },
    Dephasing { sigma2: f64 },
    AuxRelaxation { p_decay: f64, p_flip: f64 },
}

/// A concrete Kraus decomposition acting on one subsystem.
#[derive(Debug, Clone)]
pub struct KrausSet {
    pub kind: ChannelKind,
    pub(crate) ops: Vec<Array2<Complex64>>,
}

impl KrausSet {
    pub fn ops(&self) -> &[Array2<Complex64>] {
        &self.ops
    }

    /// Largest entry of |Σ K†K − I|.
    pub fn completeness_defect(&self) -> f64 {
        let d = self.ops[0].nrows();
        let mut sum = Array2::<Complex64>::zeros((d, d));
        for op in &self.ops {
            sum += &op.mapv(|z| z.conj()).t().dot(op);
        }
        let mut defect = 0.0_f64;
        for i in 0..d {
            for j in 0..d {
                let target = if i == j {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                defect = defect.max((sum[(i, j)] - target).norm());
            }
        }
        defect
    }
}

fn check_strength(name: &'static str, value: f64) -> Result<(), NoiseError> {
    if !value.is_finite() || value < 0.0 {
        return Err(NoiseError::InvalidRate { name, value });
    }
    Ok(())
}

fn loss_amplitude(n: usize, k: usize, gamma: f64, ln_fact: &[f64]) -> f64 {
    if gamma <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if gamma >= 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    let ln_choose = ln_fact[n] - ln_fact[k] - ln_fact[n - k];
    let ln_p = ln_choose + k as f64 * gamma.ln() + (n - k) as f64 * (1.0 - gamma).ln();
    (0.5 * ln_p).exp()
}

/// Photon-loss channel for one mode over integrated strength κ·t.
///
/// Kraus operators Kₖ remove exactly k photons with binomial amplitudes in
/// γ = 1 − e^{−κt}; the set is truncated where the worst-case (highest Fock
/// level) branch probability tail drops below 1e-13.
pub fn loss_channel(kappa_t: f64, dim: usize) -> Result<KrausSet, NoiseError> {
    check_strength("kappa·t", kappa_t)?;
    if dim == 0 {
        return Err(FockError::InvalidDimension { got: 0, min: 1 }.into());
    }
    let gamma = -((-kappa_t).exp_m1());
    let n_star = dim - 1;
    let k_max = if gamma <= 0.0 || n_star == 0 {
        0
    } else if gamma >= 1.0 - 1e-15 {
        n_star
    } else {
        let mut k = 0usize;
        let mut pmf = (1.0 - gamma).powi(n_star as i32);
        let mut cum = pmf;
        while 1.0 - cum > 1e-13 && k < n_star {
            pmf *= (n_star - k) as f64 / (k + 1) as f64 * gamma / (1.0 - gamma);
            k += 1;
            cum += pmf;
        }
        k
    };
    let mut ln_fact = vec![0.0_f64; dim];
    for n in 1..dim {
        ln_fact[n] = ln_fact[n - 1] + (n as f64).ln();
    }
    let mut ops = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let mut m = Array2::<Complex64>::zeros((dim, dim));
        for n in k..dim {
            m[(n - k, n)] = Complex64::new(loss_amplitude(n, k, gamma, &ln_fact), 0.0);
        }
        ops.push(m);
    }
    Ok(KrausSet {
        kind: ChannelKind::Loss { gamma },
        ops,
    })
}

/// Gauss–Hermite node and weight table for the given point count, from the
/// symmetric tridiagonal recurrence matrix of the Hermite polynomials.
fn gauss_hermite(points: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = Array2::<Complex64>::zeros((points, points));
    for k in 0..points - 1 {
        let b = ((k + 1) as f64 / 2.0).sqrt();
        jac[(k, k + 1)] = Complex64::new(b, 0.0);
        jac[(k + 1, k)] = Complex64::new(b, 0.0);
    }
    let (vals, vecs) = crate::fock::eigh(&jac);
    let mut weights: Vec<f64> = (0..points).map(|c| vecs[(0, c)].norm_sqr()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    (vals.to_vec(), weights)
}

/// Dephasing channel for one mode over integrated strength κ_φ·t.
///
/// The channel is the Gaussian mixture of number rotations e^{iθn̂} with
/// θ ~ N(0, σ²), σ² = κ_φ·t, which damps coherences as e^{−σ²(m−n)²/2}. The
/// Kraus set discretizes the mixture on a Gauss–Hermite grid sized so the
/// quadrature error at the largest coherence offset is below 1e-14; the
/// weights are normalized, so completeness is exact.
pub fn dephasing_channel(kappa_phi_t: f64, dim: usize) -> Result<KrausSet, NoiseError> {
    check_strength("kappa_phi·t", kappa_phi_t)?;
    if dim == 0 {
        return Err(FockError::InvalidDimension { got: 0, min: 1 }.into());
    }
    let sigma2 = kappa_phi_t;
    if sigma2 == 0.0 {
        return Ok(KrausSet {
            kind: ChannelKind::Dephasing { sigma2 },
            ops: vec![Array2::eye(dim)],
        });
    }
    let spread = sigma2 * ((dim - 1) as f64).powi(2) / 2.0;
    let mut needed = 1usize;
    let mut term = spread;
    while term > 1e-14 && needed < 198 {
        needed += 1;
        term *= spread / needed as f64;
    }
    let points = (needed + 2).clamp(5, 200);
    let (nodes, weights) = gauss_hermite(points);
    let scale = (2.0 * sigma2).sqrt();
    let mut ops = Vec::with_capacity(points);
    for c in 0..points {
        let theta = scale * nodes[c];
        let amp = weights[c].sqrt();
        let mut m = Array2::<Complex64>::zeros((dim, dim));
        for n in 0..dim {
            m[(n, n)] = Complex64::from_polar(amp, theta * n as f64);
        }
        ops.push(m);
    }
    Ok(KrausSet {
        kind: ChannelKind::Dephasing { sigma2 },
        ops,
    })
}

/// Combined relaxation and dephasing channel for the auxiliary qubit over
/// time t, or `None` when it reduces to the identity.
///
/// Amplitude damping uses p = 1 − e^{−t/T1}; the pure-dephasing remainder
/// uses the rate 1/T_φ = 1/T2 − 1/(2·T1), so the off-diagonal element decays
/// as e^{−t/T2} overall. The composed set simplifies to three operators.
pub fn aux_relaxation_channel(
    t1: Option<f64>,
    t2: Option<f64>,
    t: f64,
) -> Result<Option<KrausSet>, NoiseError> {
    check_strength("aux channel duration", t)?;
    if (t1.is_none() && t2.is_none()) || t == 0.0 {
        return Ok(None);
    }
    let r1 = t1.map_or(0.0, |v| 1.0 / v);
    let r2 = t2.map_or(0.0, |v| 1.0 / v);
    let r_phi = (r2 - r1 / 2.0).max(0.0);
    if let (Some(a), Some(b)) = (t1, t2) {
        if b > 2.0 * a * (1.0 + 1e-12) {
            return Err(NoiseError::CoherenceBound { t1: a, t2: b });
        }
    }
    let p = -((-t * r1).exp_m1());
    let q = -((-t * r_phi).exp_m1()) / 2.0;
    if p == 0.0 && q == 0.0 {
        return Ok(None);
    }
    let c = Complex64::new;
    let keep = (1.0 - p).sqrt();
    let mut ops = Vec::new();
    let mut diag_plus = Array2::zeros((2, 2));
    diag_plus[(0, 0)] = c((1.0 - q).sqrt(), 0.0);
    diag_plus[(1, 1)] = c((1.0 - q).sqrt() * keep, 0.0);
    ops.push(diag_plus);
    if q > 0.0 {
        let mut diag_minus = Array2::zeros((2, 2));
        diag_minus[(0, 0)] = c(q.sqrt(), 0.0);
        diag_minus[(1, 1)] = c(-(q.sqrt()) * keep, 0.0);
        ops.push(diag_minus);
    }
    if p > 0.0 {
        let mut decay = Array2::zeros((2, 2));
        decay[(0, 1)] = c(p.sqrt(), 0.0);
        ops.push(decay);
    }
    Ok(Some(KrausSet {
        kind: ChannelKind::AuxRelaxation {
            p_decay: p,
            p_flip: q,
        },
        ops,
    }))
}

/// Per-mode oscillator channels for one gate window.
#[derive(Debug, Clone)]
pub struct ModeChannels {
    pub loss: Option<KrausSet>,
    pub dephasing: Option<KrausSet>,
}

/// All channels active during one gate window of a circuit.
#[derive(Debug, Clone)]
pub struct StepChannels {
    pub per_mode: Vec<ModeChannels>,
    pub aux: Option<KrausSet>,
    pub duration: f64,
}

impl StepChannels {
    pub fn is_empty(&self) -> bool {
        self.aux.is_none()
            && self
                .per_mode
                .iter()
                .all(|m| m.loss.is_none() && m.dephasing.is_none())
    }
}

/// Resolve a noise model over one gate window for the given oscillator
/// dimensions (the auxiliary axis is implied).
pub fn step_channels(
    model: &NoiseModel,
    duration: f64,
    osc_dims: &[usize],
) -> Result<StepChannels, NoiseError> {
    check_strength("step duration", duration)?;
    let mut per_mode = Vec::with_capacity(osc_dims.len());
    for &d in osc_dims {
        let loss = if model.kappa > 0.0 && duration > 0.0 {
            Some(loss_channel(model.kappa * duration, d)?)
        } else {
            None
        };
        let dephasing = if model.kappa_phi > 0.0 && duration > 0.0 {
            Some(dephasing_channel(model.kappa_phi * duration, d)?)
        } else {
            None
        };
        per_mode.push(ModeChannels { loss, dephasing });
    }
    let aux = if duration > 0.0 {
        aux_relaxation_channel(model.aux_t1, model.aux_t2, duration)?
    } else {
        None
    };
    Ok(StepChannels {
        per_mode,
        aux,
        duration,
    })
}

/// Apply one Kraus set to a density matrix on the given subsystem axis.
pub fn apply_channel_density(
    rho: &DensityMatrix,
    set: &KrausSet,
    axis: usize,
) -> Result<DensityMatrix, NoiseError> {
    let layout = rho.layout().clone();
    let n = layout.total_dim();
    let mut next = Array2::<Complex64>::zeros((n, n));
    for op in &set.ops {
        let small = OperatorMatrix::new(SpaceLayout::single_mode(op.nrows()), op.clone())?;
        let full = embed(&small, axis, &layout)?;
        let k = full.matrix();
        let term = k.dot(rho.matrix()).dot(&k.mapv(|z| z.conj()).t());
        next += &term;
    }
    Ok(DensityMatrix::from_parts(layout, next))
}

pub(crate) fn sample_standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn axis_stride(dims: &[usize], axis: usize) -> usize {
    dims[axis + 1..].iter().product()
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> Result<usize, NoiseError> {
    let total: f64 = probs.iter().sum();
    if total < 1e-300 {
        return Err(NoiseError::BranchUnderflow(total));
    }
    let draw: f64 = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        cum += p;
        if draw < cum {
            return Ok(k);
        }
    }
    Ok(probs.len() - 1)
}

fn renormalize(amps: &mut Array1<Complex64>) -> Result<(), NoiseError> {
    let norm_sq: f64 = amps.iter().map(|z| z.norm_sqr()).sum();
    if norm_sq < 1e-28 {
        return Err(NoiseError::BranchUnderflow(norm_sq));
    }
    let inv = Complex64::new(norm_sq.sqrt().recip(), 0.0);
    amps.mapv_inplace(|z| z * inv);
    Ok(())
}

fn sample_loss_pure(
    amps: &mut Array1<Complex64>,
    dims: &[usize],
    axis: usize,
    set: &KrausSet,
    rng: &mut impl Rng,
) -> Result<(), NoiseError> {
    let d = dims[axis];
    let stride = axis_stride(dims, axis);
    let mut pops = vec![0.0_f64; d];
    for (i, z) in amps.iter().enumerate() {
        pops[(i / stride) % d] += z.norm_sqr();
    }
    let probs: Vec<f64> = set
        .ops
        .iter()
        .enumerate()
        .map(|(k, op)| (k..d).map(|n| pops[n] * op[(n - k, n)].norm_sqr()).sum())
        .collect();
    let k = sample_index(&probs, rng)?;
    let op = &set.ops[k];
    let len = amps.len();
    let shift = k * stride;
    for j in 0..len {
        let n = (j / stride) % d;
        amps[j] = if n + k < d {
            op[(n, n + k)] * amps[j + shift]
        } else {
            Complex64::new(0.0, 0.0)
        };
    }
    renormalize(amps)
}

fn apply_number_rotation(amps: &mut Array1<Complex64>, dims: &[usize], axis: usize, theta: f64) {
    let d = dims[axis];
    let stride = axis_stride(dims, axis);
    let phases: Vec<Complex64> = (0..d)
        .map(|n| Complex64::from_polar(1.0, theta * n as f64))
        .collect();
    for (i, z) in amps.iter_mut().enumerate() {
        *z *= phases[(i / stride) % d];
    }
}

fn sample_small_set_pure(
    amps: &mut Array1<Complex64>,
    dims: &[usize],
    axis: usize,
    set: &KrausSet,
    rng: &mut impl Rng,
) -> Result<(), NoiseError> {
    let d = dims[axis];
    let stride = axis_stride(dims, axis);
    let outer = amps.len() / (d * stride);
    let mut reduced = Array2::<Complex64>::zeros((d, d));
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * d * stride + inner;
            for a in 0..d {
                let za = amps[base + a * stride];
                if za == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for b in 0..d {
                    reduced[(a, b)] += za * amps[base + b * stride].conj();
                }
            }
        }
    }
    let probs: Vec<f64> = set
        .ops
        .iter()
        .map(|op| {
            let gram = op.mapv(|z| z.conj()).t().dot(op);
            let mut p = 0.0;
            for a in 0..d {
                for b in 0..d {
                    p += (gram[(a, b)] * reduced[(b, a)]).re;
                }
            }
            p
        })
        .collect();
    let k = sample_index(&probs, rng)?;
    let next = crate::fock::apply_on_axis(amps, dims, axis, &set.ops[k]);
    *amps = next;
    renormalize(amps)
}

/// Apply one Kraus set to a pure state by sampling a single branch. Loss
/// samples the photon-removal count from the mode's populations; dephasing
/// draws a continuous rotation angle from the underlying Gaussian mixture;
/// other sets are sampled generically from branch weights.
pub fn apply_channel_trajectory(
    state: &QuantumState,
    set: &KrausSet,
    axis: usize,
    rng: &mut impl Rng,
) -> Result<QuantumState, NoiseError> {
    let dims = state.layout().dims().to_vec();
    let mut amps = state.amplitudes().clone();
    apply_set_pure(&mut amps, &dims, axis, set, rng)?;
    Ok(QuantumState::new(state.layout().clone(), amps)?)
}

fn apply_set_pure(
    amps: &mut Array1<Complex64>,
    dims: &[usize],
    axis: usize,
    set: &KrausSet,
    rng: &mut impl Rng,
) -> Result<(), NoiseError> {
    match set.kind {
        ChannelKind::Loss { .. } => sample_loss_pure(amps, dims, axis, set, rng),
        ChannelKind::Dephasing { sigma2 } => {
            if sigma2 > 0.0 {
                let theta = sigma2.sqrt() * sample_standard_normal(rng);
                apply_number_rotation(amps, dims, axis, theta);
            }
            Ok(())
        }
        ChannelKind::AuxRelaxation { .. } => sample_small_set_pure(amps, dims, axis, set, rng),
    }
}

/// Apply every channel of one gate window to a pure state, one sampled
/// branch each, in a fixed mode-major order.
pub fn apply_step_channels_pure(
    amps: &mut Array1<Complex64>,
    full_dims: &[usize],
    channels: &StepChannels,
    rng: &mut impl Rng,
) -> Result<(), NoiseError> {
    for (mode, mc) in channels.per_mode.iter().enumerate() {
        if let Some(set) = &mc.loss {
            apply_set_pure(amps, full_dims, mode, set, rng)?;
        }
        if let Some(set) = &mc.dephasing {
            apply_set_pure(amps, full_dims, mode, set, rng)?;
        }
    }
    if let Some(set) = &channels.aux {
        let aux_axis = full_dims.len() - 1;
        apply_set_pure(amps, full_dims, aux_axis, set, rng)?;
    }
    Ok(())
}

/// What to inject into a circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum InjectionKind {
    /// Force an auxiliary relaxation jump at the chosen moment.
    AuxiliaryDecay,
    /// Apply an unconditional oscillator displacement at the chosen moment.
    OscillatorDisplacement {
        #[serde(with = "complex_pairs")]
        alpha_vector: Vec<Complex64>,
    },
}

/// A deterministic error placed at a fraction of the way through one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInjection {
    pub step_index: usize,
    pub fraction: f64,
    #[serde(flatten)]
    pub kind: InjectionKind,
}

/// Rewrite a circuit so the injected error occurs mid-step.
///
/// Steps split exactly: an echoed conditional displacement obeys
/// ECD(β) = ECD((1−f)β) · X · ECD(fβ) with no phase residue for collinear
/// parts, so the error lands between ECD(fβ) and the echo; rotations,
/// displacements, and waits split linearly. The inserted error step carries a
/// note that flows into the next measurement's trace entry. Fractions 0 and 1
/// place the error just before or after the whole step.
pub fn inject_error(circuit: &Circuit, injection: &ErrorInjection) -> Result<Circuit, NoiseError> {
    let f = injection.fraction;
    if !f.is_finite() || !(0.0..=1.0).contains(&f) {
        return Err(NoiseError::InvalidFraction(f));
    }
    if injection.step_index >= circuit.steps.len() {
        return Err(NoiseError::StepOutOfRange {
            index: injection.step_index,
            len: circuit.steps.len(),
        });
    }
    let modes = circuit.layout().subsystem_count();
    if let InjectionKind::OscillatorDisplacement { alpha_vector } = &injection.kind {
        if alpha_vector.len() != modes {
            return Err(NoiseError::ModeCountMismatch {
                expected: modes,
                got: alpha_vector.len(),
            });
        }
    }
    let target = &circuit.steps[injection.step_index];
    let tag = match &injection.kind {
        InjectionKind::AuxiliaryDecay => {
            format!("aux_decay@{}:{:.3}", injection.step_index, f)
        }
        InjectionKind::OscillatorDisplacement { .. } => {
            format!("displacement@{}:{:.3}", injection.step_index, f)
        }
    };
    let error_step = || {
        let kind = match &injection.kind {
            InjectionKind::AuxiliaryDecay => GateKind::AuxDecayJump,
            InjectionKind::OscillatorDisplacement { alpha_vector } => GateKind::Displacement {
                alpha_vector: alpha_vector.clone(),
            },
        };
        GateStep {
            kind,
            duration: 0.0,
            note: Some(tag.clone()),
        }
    };

    let mut replacement: Vec<GateStep> = Vec::new();
    if f == 0.0 {
        replacement.push(error_step());
        replacement.push(target.clone());
    } else if f == 1.0 {
        replacement.push(target.clone());
        replacement.push(error_step());
    } else {
        match &target.kind {
            GateKind::Ecd { alpha_vector } => {
                let first: Vec<Complex64> = alpha_vector.iter().map(|b| b * f).collect();
                let second: Vec<Complex64> =
                    alpha_vector.iter().map(|b| b * (1.0 - f)).collect();
                replacement.push(GateStep {
                    kind: GateKind::Ecd {
                        alpha_vector: first,
                    },
                    duration: f * target.duration,
                    note: target.note.clone(),
                });
                replacement.push(error_step());
                replacement.push(GateStep::new(
                    GateKind::AuxRotation {
                        theta: std::f64::consts::PI,
                        phi: 0.0,
                    },
                    0.0,
                ));
                replacement.push(GateStep::new(
                    GateKind::Ecd {
                        alpha_vector: second,
                    },
                    (1.0 - f) * target.duration,
                ));
            }
            GateKind::AuxRotation { theta, phi } => {
                replacement.push(GateStep {
                    kind: GateKind::AuxRotation {
                        theta: f * theta,
                        phi: *phi,
                    },
                    duration: f * target.duration,
                    note: target.note.clone(),
                });
                replacement.push(error_step());
                replacement.push(GateStep::new(
                    GateKind::AuxRotation {
                        theta: (1.0 - f) * theta,
                        phi: *phi,
                    },
                    (1.0 - f) * target.duration,
                ));
            }
            GateKind::Displacement { alpha_vector } => {
                let first: Vec<Complex64> = alpha_vector.iter().map(|a| a * f).collect();
                let second: Vec<Complex64> =
                    alpha_vector.iter().map(|a| a * (1.0 - f)).collect();
                replacement.push(GateStep {
                    kind: GateKind::Displacement {
                        alpha_vector: first,
                    },
                    duration: f * target.duration,
                    note: target.note.clone(),
                });
                replacement.push(error_step());
                replacement.push(GateStep::new(
                    GateKind::Displacement {
                        alpha_vector: second,
                    },
                    (1.0 - f) * target.duration,
                ));
            }
            GateKind::Wait => {
                replacement.push(GateStep {
                    kind: GateKind::Wait,
                    duration: f * target.duration,
                    note: target.note.clone(),
                });
                replacement.push(error_step());
                replacement.push(GateStep::new(GateKind::Wait, (1.0 - f) * target.duration));
            }
            GateKind::AuxMeasureReset | GateKind::AuxDecayJump => {
                replacement.push(error_step());
                replacement.push(target.clone());
            }
        }
    }
    let mut out = Circuit::new(circuit.layout().clone(), circuit.label.clone());
    out.steps.extend_from_slice(&circuit.steps[..injection.step_index]);
    out.steps.extend(replacement);
    out.steps
        .extend_from_slice(&circuit.steps[injection.step_index + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::{sbs_round, with_aux_ground, CompiledCircuit, SbsTrace};
    use crate::codes::gkp_square;
    use crate::fock::{
        annihilation, displacement, expectation_density, number, QuantumState, SpaceLayout,
    };
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn coherent(alpha: Complex64, dim: usize) -> QuantumState {
        let layout = SpaceLayout::single_mode(dim);
        displacement(alpha, dim)
            .unwrap()
            .apply(&QuantumState::vacuum(layout))
            .unwrap()
    }

    #[test]
    fn zero_strength_loss_is_identity() {
        let set = loss_channel(0.0, 20).unwrap();
        assert_eq!(set.ops().len(), 1);
        assert!(set.completeness_defect() < 1e-15);
        let state = coherent(c(1.0, 0.3), 20);
        let rho = state.to_density();
        let out = apply_channel_density(&rho, &set, 0).unwrap();
        assert!(out.trace_distance(&rho) < 1e-12);
    }

    #[test]
    fn loss_damps_coherent_amplitude_and_photon_number() {
        let dim = 40;
        let alpha = c(1.2, 0.0);
        let kappa_t = 0.1;
        let set = loss_channel(kappa_t, dim).unwrap();
        assert!(set.completeness_defect() < 1e-10);
        let rho = coherent(alpha, dim).to_density();
        let out = apply_channel_density(&rho, &set, 0).unwrap();
        let a_op = annihilation(dim).unwrap();
        let n_op = number(dim).unwrap();
        let a_mean = expectation_density(&a_op, &out).unwrap();
        let n_mean = expectation_density(&n_op, &out).unwrap().re;
        let expected_a = alpha * (-kappa_t / 2.0).exp();
        assert_abs_diff_eq!(a_mean.re, expected_a.re, epsilon = 1e-8);
        assert_abs_diff_eq!(a_mean.im, expected_a.im, epsilon = 1e-8);
        assert_abs_diff_eq!(
            n_mean,
            alpha.norm_sqr() * (-kappa_t).exp(),
            epsilon = 1e-8
        );
        assert_abs_diff_eq!(out.trace().re, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn dephasing_damps_coherences_and_preserves_populations() {
        let dim = 24;
        let kappa_phi_t = 0.02;
        let set = dephasing_channel(kappa_phi_t, dim).unwrap();
        assert!(set.completeness_defect() < 1e-12);
        let rho = coherent(c(1.1, -0.4), dim).to_density();
        let out = apply_channel_density(&rho, &set, 0).unwrap();
        for n in 0..dim {
            assert_abs_diff_eq!(
                out.matrix()[(n, n)].re,
                rho.matrix()[(n, n)].re,
                epsilon = 1e-12
            );
        }
        for (m, n) in [(0usize, 1usize), (2, 5), (1, 8)] {
            let factor = (-kappa_phi_t * ((m as f64 - n as f64).powi(2)) / 2.0).exp();
            let expected = rho.matrix()[(m, n)] * factor;
            assert_abs_diff_eq!((out.matrix()[(m, n)] - expected).norm(), 0.0, epsilon = 1e-10);
        }
        let a_op = annihilation(dim).unwrap();
        let before = expectation_density(&a_op, &rho).unwrap();
        let after = expectation_density(&a_op, &out).unwrap();
        let expected = before * (-kappa_phi_t / 2.0).exp();
        assert_abs_diff_eq!((after - expected).norm(), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn aux_relaxation_matches_exponential_laws() {
        let t1 = 50e-6;
        let t2 = 70e-6;
        let t = 50e-6;
        let set = aux_relaxation_channel(Some(t1), Some(t2), t)
            .unwrap()
            .unwrap();
        assert!(set.completeness_defect() < 1e-14);
        let layout = SpaceLayout::single_mode(2);
        let mut excited = Array2::<Complex64>::zeros((2, 2));
        excited[(1, 1)] = c(1.0, 0.0);
        let rho = DensityMatrix::from_parts(layout.clone(), excited);
        let out = apply_channel_density(&rho, &set, 0).unwrap();
        assert_abs_diff_eq!(out.matrix()[(1, 1)].re, (-1.0_f64).exp(), epsilon = 1e-10);

        let mut plus = Array2::<Complex64>::from_elem((2, 2), c(0.5, 0.0));
        plus[(0, 1)] = c(0.5, 0.0);
        let rho_plus = DensityMatrix::from_parts(layout, plus);
        let out_plus = apply_channel_density(&rho_plus, &set, 0).unwrap();
        assert_abs_diff_eq!(
            out_plus.matrix()[(0, 1)].re,
            0.5 * (-t / t2).exp(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn pure_dephasing_only_aux_keeps_populations() {
        let set = aux_relaxation_channel(None, Some(30e-6), 10e-6)
            .unwrap()
            .unwrap();
        let layout = SpaceLayout::single_mode(2);
        let mut excited = Array2::<Complex64>::zeros((2, 2));
        excited[(1, 1)] = c(1.0, 0.0);
        let rho = DensityMatrix::from_parts(layout, excited);
        let out = apply_channel_density(&rho, &set, 0).unwrap();
        assert_abs_diff_eq!(out.matrix()[(1, 1)].re, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn coherence_bound_is_enforced() {
        let model = NoiseModel {
            aux_t1: Some(10e-6),
            aux_t2: Some(25e-6),
            ..NoiseModel::default()
        };
        assert!(matches!(
            model.validate(),
            Err(NoiseError::CoherenceBound { .. })
        ));
        assert!(matches!(
            aux_relaxation_channel(Some(10e-6), Some(25e-6), 1e-6),
            Err(NoiseError::CoherenceBound { .. })
        ));
    }

    #[test]
    fn negative_rates_are_rejected() {
        let model = NoiseModel {
            kappa: -1.0,
            ..NoiseModel::default()
        };
        assert!(matches!(
            model.validate(),
            Err(NoiseError::InvalidRate { name: "kappa", .. })
        ));
    }

    #[test]
    fn channel_on_subsystem_commutes_with_embedding() {
        let set = loss_channel(0.08, 6).unwrap();

        let single = coherent(c(0.9, 0.2), 6);
        let other = coherent(c(-0.4, 0.6), 5);
        let single_out = apply_channel_density(&single.to_density(), &set, 0).unwrap();
        let expected = crate::fock::kron(single_out.matrix(), other.to_density().matrix());

        let joint = QuantumState::from_mode_vectors(&[
            single.amplitudes().clone(),
            other.amplitudes().clone(),
        ])
        .unwrap();
        let joint_out = apply_channel_density(&joint.to_density(), &set, 0).unwrap();
        let diff = (&expected - joint_out.matrix())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "embedding mismatch {diff:.2e}");
    }

    #[test]
    fn trajectory_sampling_is_deterministic_per_seed() {
        let dim = 16;
        let state = coherent(c(1.0, 0.0), dim);
        let set = loss_channel(0.2, dim).unwrap();
        let run = |seed: u64| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut out = state.clone();
            for _ in 0..10 {
                out = apply_channel_trajectory(&out, &set, 0, &mut rng).unwrap();
            }
            out
        };
        let a = run(5);
        let b = run(5);
        assert_eq!(a.amplitudes(), b.amplitudes());
    }

    #[test]
    fn trajectory_average_matches_density_channel() {
        let dim = 16;
        let alpha = c(1.0, 0.0);
        let kappa_t = 0.05;
        let kphi_t = 0.02;
        let state = coherent(alpha, dim);
        let loss = loss_channel(kappa_t, dim).unwrap();
        let deph = dephasing_channel(kphi_t, dim).unwrap();
        let rho = apply_channel_density(
            &apply_channel_density(&state.to_density(), &loss, 0).unwrap(),
            &deph,
            0,
        )
        .unwrap();
        let n_op = number(dim).unwrap();
        let exact = expectation_density(&n_op, &rho).unwrap().re;

        let trials = 1200;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..trials {
            let s1 = apply_channel_trajectory(&state, &loss, 0, &mut rng).unwrap();
            let s2 = apply_channel_trajectory(&s1, &deph, 0, &mut rng).unwrap();
            let v = crate::fock::expectation(&n_op, &s2).unwrap().re;
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / trials as f64;
        let var = (sum_sq / trials as f64 - mean * mean).max(0.0);
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - exact).abs() < 5.0 * se + 1e-9,
            "trajectory mean {mean:.5} vs exact {exact:.5} (se {se:.5})"
        );
    }

    #[test]
    fn quiet_model_produces_empty_step_channels() {
        let model = NoiseModel::default();
        assert!(model.is_quiet());
        let ch = step_channels(&model, 1e-6, &[20]).unwrap();
        assert!(ch.is_empty());
    }

    #[test]
    fn injection_at_edges_keeps_total_duration() {
        let code = gkp_square(0.3).unwrap();
        let layout = SpaceLayout::single_mode(30);
        let circuit = sbs_round(&code, 0, &layout, &GateDurations::default()).unwrap();
        for fraction in [0.0, 0.5, 1.0] {
            let injection = ErrorInjection {
                step_index: 3,
                fraction,
                kind: InjectionKind::AuxiliaryDecay,
            };
            let out = inject_error(&circuit, &injection).unwrap();
            assert_abs_diff_eq!(out.duration(), circuit.duration(), epsilon = 1e-18);
            let jumps = out
                .steps
                .iter()
                .filter(|s| matches!(s.kind, GateKind::AuxDecayJump))
                .count();
            assert_eq!(jumps, 1);
            let note = out
                .steps
                .iter()
                .find_map(|s| s.note.clone())
                .expect("injected step carries a note");
            assert!(note.starts_with("aux_decay@3"));
        }
    }

    #[test]
    fn ecd_split_with_null_error_reproduces_gate() {
        let layout = SpaceLayout::single_mode(40);
        let beta = c(1.3, 0.4);
        let mut base = Circuit::new(layout.clone(), "probe");
        base.steps.push(GateStep::new(
            GateKind::AuxRotation {
                theta: std::f64::consts::FRAC_PI_2,
                phi: 0.3,
            },
            0.0,
        ));
        base.steps.push(GateStep::new(
            GateKind::Ecd {
                alpha_vector: vec![beta],
            },
            0.0,
        ));
        let injection = ErrorInjection {
            step_index: 1,
            fraction: 0.37,
            kind: InjectionKind::OscillatorDisplacement {
                alpha_vector: vec![c(0.0, 0.0)],
            },
        };
        let split = inject_error(&base, &injection).unwrap();
        assert_eq!(split.steps.len(), base.steps.len() + 3);

        let state = with_aux_ground(&coherent(c(0.2, -0.5), 40));
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut trace = SbsTrace::default();
        let a = CompiledCircuit::new(&base, None)
            .unwrap()
            .run_pure(&state, &mut rng, 0, &mut trace)
            .unwrap();
        let b = CompiledCircuit::new(&split, None)
            .unwrap()
            .run_pure(&state, &mut rng, 0, &mut trace)
            .unwrap();
        assert_abs_diff_eq!(a.inner(&b).norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mid_gate_decay_at_half_cancels_displacement() {
        let layout = SpaceLayout::single_mode(40);
        let beta = c(1.1, 0.0);
        let mut base = Circuit::new(layout.clone(), "decay_probe");
        base.steps.push(GateStep::new(
            GateKind::AuxRotation {
                theta: std::f64::consts::FRAC_PI_2,
                phi: std::f64::consts::FRAC_PI_2,
            },
            0.0,
        ));
        base.steps.push(GateStep::new(
            GateKind::Ecd {
                alpha_vector: vec![beta],
            },
            0.0,
        ));
        let injection = ErrorInjection {
            step_index: 1,
            fraction: 0.5,
            kind: InjectionKind::AuxiliaryDecay,
        };
        let split = inject_error(&base, &injection).unwrap();
        let vacuum = with_aux_ground(&QuantumState::vacuum(layout));
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut trace = SbsTrace::default();
        let out = CompiledCircuit::new(&split, None)
            .unwrap()
            .run_pure(&vacuum, &mut rng, 0, &mut trace)
            .unwrap();
        // Decay halfway through: the two half displacements cancel and the
        // auxiliary ends in the ground state.
        assert_abs_diff_eq!(out.fidelity(&vacuum), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn injection_bounds_are_checked() {
        let layout = SpaceLayout::single_mode(10);
        let mut base = Circuit::new(layout, "tiny");
        base.steps
            .push(GateStep::new(GateKind::Wait, 1e-6));
        let bad_step = ErrorInjection {
            step_index: 4,
            fraction: 0.5,
            kind: InjectionKind::AuxiliaryDecay,
        };
        assert!(matches!(
            inject_error(&base, &bad_step),
            Err(NoiseError::StepOutOfRange { .. })
        ));
        let bad_fraction = ErrorInjection {
            step_index: 0,
            fraction: 1.5,
            kind: InjectionKind::AuxiliaryDecay,
        };
        assert!(matches!(
            inject_error(&base, &bad_fraction),
            Err(NoiseError::InvalidFraction(_))
        ));
        let bad_modes = ErrorInjection {
            step_index: 0,
            fraction: 0.5,
            kind: InjectionKind::OscillatorDisplacement {
                alpha_vector: vec![c(0.1, 0.0), c(0.0, 0.0)],
            },
        };
        assert!(matches!(
            inject_error(&base, &bad_modes),
            Err(NoiseError::ModeCountMismatch { .. })
        ));
    }

    #[test]
    fn injection_serde_round_trip() {
        let injection = ErrorInjection {
            step_index: 3,
            fraction: 0.5,
            kind: InjectionKind::OscillatorDisplacement {
                alpha_vector: vec![c(0.3, -0.1)],
            },
        };
        let json = serde_json::to_string(&injection).unwrap();
        let back: ErrorInjection = serde_json::from_str(&json).unwrap();
        assert_eq!(injection, back);
    }
}
