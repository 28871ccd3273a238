//! Grid-state codes: the square single-mode code, the two-mode tesseract
//! code, finite-energy dressing, and codeword construction, plus the small
//! Fock-superposition pair used as a photon-loss comparison code.
//!
//! Every stabilizer and logical operator is a multimode displacement and is
//! stored as its per-mode amplitude vector: the operator is
//! D(α₁) ⊗ … ⊗ D(α_m). Commutation structure lives entirely in the
//! exchange phases of those vectors, so code algebra is checked without
//! touching any truncated matrix.

use crate::fock::{
    annihilation, apply_on_axis, displacement, kron, matrix_exponential, solve,
    FockError, OperatorMatrix, QuantumState, SpaceLayout,
};
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Dimensionless lattice constant of the square grid code, 2√π.
pub fn lattice_constant() -> f64 {
    2.0 * PI.sqrt()
}

/// Serde adapter storing complex amplitudes as [re, im] pairs.
pub(crate) mod complex_pairs {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Complex64], s: S) -> Result<S::Ok, S::Error> {
        let pairs: Vec<[f64; 2]> = v.iter().map(|z| [z.re, z.im]).collect();
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Complex64>, D::Error> {
        let pairs: Vec<[f64; 2]> = Vec::deserialize(d)?;
        Ok(pairs
            .into_iter()
            .map(|[re, im]| Complex64::new(re, im))
            .collect())
    }
}

#[derive(Debug, Error)]
pub enum CodeError {
    #[error("delta {0} outside the supported range (0, 1)")]
    DeltaOutOfRange(f64),
    #[error("dimension {dim} too small, need at least {min}")]
    DimensionTooSmall { dim: usize, min: usize },
    #[error("layout has {got} oscillator subsystems, code needs {expected}")]
    ModeCountMismatch { expected: usize, got: usize },
    #[error("symplectic violation between {a} and {b}: exchange phase {phase:.6}")]
    SymplecticViolation { a: String, b: String, phase: f64 },
    #[error("no real (position-shift) stabilizer found for mode {mode}")]
    MissingPositionGenerator { mode: usize },
    #[error(
        "codeword construction below quality floor: achieved {achieved:?}, floors {floors:?}"
    )]
    ConstructionQuality {
        achieved: Vec<f64>,
        floors: Vec<f64>,
    },
    #[error("stabilizer index {index} out of range for {count} stabilizers")]
    StabilizerOutOfRange { index: usize, count: usize },
    #[error(transparent)]
    Fock(#[from] FockError),
}

/// Logical Pauli axis of a grid code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pauli {
    X,
    Z,
}

/// Per-mode displacement amplitudes of one stabilizer or logical operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpaceVector {
    pub label: String,
    #[serde(with = "complex_pairs")]
    pub amplitudes: Vec<Complex64>,
}

impl PhaseSpaceVector {
    pub fn new(label: impl Into<String>, amplitudes: Vec<Complex64>) -> Self {
        Self {
            label: label.into(),
            amplitudes,
        }
    }

    pub fn mode_count(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, factor: Complex64) -> Self {
        Self {
            label: self.label.clone(),
            amplitudes: self.amplitudes.iter().map(|z| z * factor).collect(),
        }
    }

    /// Phase picked up when the two multimode displacements are exchanged:
    /// D(a)D(b) = e^{iφ} D(b)D(a) with φ = 2 ∑_k Im(a_k b_k*).
    pub fn exchange_phase(&self, other: &PhaseSpaceVector) -> f64 {
        2.0 * self
            .amplitudes
            .iter()
            .zip(other.amplitudes.iter())
            .map(|(a, b)| (a * b.conj()).im)
            .sum::<f64>()
    }

    /// True when the two vectors are parallel as real vectors in
    /// (Re, Im)-coordinates of phase space.
    pub fn is_parallel_to(&self, other: &PhaseSpaceVector, tol: f64) -> bool {
        let dot: f64 = self
            .amplitudes
            .iter()
            .zip(other.amplitudes.iter())
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum();
        (dot.abs() - self.norm() * other.norm()).abs() < tol
    }
}

/// A grid code: its displacement lattice data plus the envelope width Δ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeSpec {
    pub name: String,
    pub mode_count: usize,
    #[serde(rename = "l")]
    pub lattice_constant: f64,
    pub delta: f64,
    pub stabilizers: Vec<PhaseSpaceVector>,
    pub logical_x: PhaseSpaceVector,
    pub logical_z: PhaseSpaceVector,
}

impl CodeSpec {
    pub fn logical(&self, pauli: Pauli) -> &PhaseSpaceVector {
        match pauli {
            Pauli::X => &self.logical_x,
            Pauli::Z => &self.logical_z,
        }
    }

    /// Check the exchange-phase structure: stabilizers mutually commute,
    /// logicals commute with every stabilizer, and the two logicals
    /// anticommute.
    pub fn validate(&self) -> Result<(), CodeError> {
        if !(0.0..1.0).contains(&self.delta) || self.delta <= 0.0 {
            return Err(CodeError::DeltaOutOfRange(self.delta));
        }
        let mod_check = |phase: f64, target: f64| -> bool {
            let two_pi = 2.0 * PI;
            let r = (phase - target).rem_euclid(two_pi);
            r.min(two_pi - r) < 1e-9
        };
        for (i, a) in self.stabilizers.iter().enumerate() {
            for b in self.stabilizers.iter().skip(i + 1) {
                let phase = a.exchange_phase(b);
                if !mod_check(phase, 0.0) {
                    return Err(CodeError::SymplecticViolation {
                        a: a.label.clone(),
                        b: b.label.clone(),
                        phase,
                    });
                }
            }
            for logical in [&self.logical_x, &self.logical_z] {
                let phase = logical.exchange_phase(a);
                if !mod_check(phase, 0.0) {
                    return Err(CodeError::SymplecticViolation {
                        a: logical.label.clone(),
                        b: a.label.clone(),
                        phase,
                    });
                }
            }
        }
        let xz = self.logical_x.exchange_phase(&self.logical_z);
        if !mod_check(xz, PI) {
            return Err(CodeError::SymplecticViolation {
                a: self.logical_x.label.clone(),
                b: self.logical_z.label.clone(),
                phase: xz,
            });
        }
        Ok(())
    }
}

/// Square single-mode grid code. Stabilizers are the position- and
/// momentum-comb translations T_q = e^{ilq̂} = D(il/√2) and
/// T_p = e^{−ilp̂} = D(l/√2); logicals are their half-length versions.
pub fn gkp_square(delta: f64) -> Result<CodeSpec, CodeError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CodeError::DeltaOutOfRange(delta));
    }
    let l = lattice_constant();
    let s = 2.0_f64.sqrt();
    let spec = CodeSpec {
        name: "gkp_square".into(),
        mode_count: 1,
        lattice_constant: l,
        delta,
        stabilizers: vec![
            PhaseSpaceVector::new("T_q", vec![Complex64::new(0.0, l / s)]),
            PhaseSpaceVector::new("T_p", vec![Complex64::new(l / s, 0.0)]),
        ],
        logical_x: PhaseSpaceVector::new("X", vec![Complex64::new(l / (2.0 * s), 0.0)]),
        logical_z: PhaseSpaceVector::new("Z", vec![Complex64::new(0.0, l / (2.0 * s))]),
    };
    spec.validate()?;
    Ok(spec)
}

/// Two-mode tesseract code. Four stabilizers
/// T₁ = e^{−ilp̂₁/2^{1/4}}, T₂ = e^{il(q̂₁+q̂₂)/2^{3/4}},
/// T₃ = e^{−ilp̂₂/2^{1/4}}, T₄ = e^{il(q̂₁−q̂₂)/2^{3/4}} and logicals
/// X̂ = e^{−il(p̂₁+p̂₂)/2^{5/4}}, Ẑ = e^{ilq̂₁/2^{3/4}}. Unlike the square
/// code, no logical direction is parallel to any stabilizer direction.
pub fn tesseract(delta: f64) -> Result<CodeSpec, CodeError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CodeError::DeltaOutOfRange(delta));
    }
    let l = lattice_constant();
    let u = l / 2.0_f64.powf(0.75); // position-type step per mode
    let v = l / 2.0_f64.powf(1.25); // momentum-type step per mode
    let w = l / 2.0_f64.powf(1.75); // logical X component
    let zero = Complex64::new(0.0, 0.0);
    let spec = CodeSpec {
        name: "tesseract".into(),
        mode_count: 2,
        lattice_constant: l,
        delta,
        stabilizers: vec![
            PhaseSpaceVector::new("T1", vec![Complex64::new(u, 0.0), zero]),
            PhaseSpaceVector::new("T2", vec![Complex64::new(0.0, v), Complex64::new(0.0, v)]),
            PhaseSpaceVector::new("T3", vec![zero, Complex64::new(u, 0.0)]),
            PhaseSpaceVector::new("T4", vec![Complex64::new(0.0, v), Complex64::new(0.0, -v)]),
        ],
        logical_x: PhaseSpaceVector::new(
            "X",
            vec![Complex64::new(w, 0.0), Complex64::new(w, 0.0)],
        ),
        logical_z: PhaseSpaceVector::new("Z", vec![Complex64::new(0.0, v), zero]),
    };
    spec.validate()?;
    Ok(spec)
}

/// Envelope photon-number estimate n̄ ≈ 1/(2Δ²) − 1/2.
pub fn mean_photon_estimate(delta: f64) -> f64 {
    1.0 / (2.0 * delta * delta) - 0.5
}

/// The constructed codeword pair and the stabilizer expectations achieved.
#[derive(Debug, Clone)]
pub struct CodeWords {
    pub ket_zero: QuantumState,
    pub ket_one: QuantumState,
    /// Re⟨T_Δ⟩ per stabilizer, minimized over the two codewords. Empty for
    /// codes without displacement stabilizers.
    pub stabilizer_expectations: Vec<f64>,
}

/// (⟨0_L|ψ⟩, ⟨1_L|ψ⟩) for an oscillator-only state.
pub fn logical_overlaps(words: &CodeWords, state: &QuantumState) -> (Complex64, Complex64) {
    (words.ket_zero.inner(state), words.ket_one.inner(state))
}

/// Normalized projection of a state onto the code space together with the
/// captured probability |⟨0|ψ⟩|² + |⟨1|ψ⟩|².
pub fn project_to_code_space(
    words: &CodeWords,
    state: &QuantumState,
) -> Result<(QuantumState, f64), CodeError> {
    let (c0, c1) = logical_overlaps(words, state);
    let prob = c0.norm_sqr() + c1.norm_sqr();
    let mut amps = Array1::<Complex64>::zeros(state.amplitudes().len());
    for (i, z) in amps.iter_mut().enumerate() {
        *z = c0 * words.ket_zero.amplitudes()[i] + c1 * words.ket_one.amplitudes()[i];
    }
    let mut projected = QuantumState::new(state.layout().clone(), amps)?;
    projected.normalize()?;
    Ok((projected, prob))
}

/// Maximum-likelihood recovery from an unknown displacement error.
///
/// A shift D(ε) rotates each stabilizer expectation by a phase while
/// leaving its magnitude alone: ⟨D(a)⟩ picks up e^{2i·Im(a·ε*)}. The
/// decoder reads those phases, solves the resulting linear system for ε
/// (principal branch, so shifts past the cell radius wrap onto a logical
/// flip), applies the corrective displacement, and projects onto the code
/// space. Returns the recovered state, the per-mode shift estimate, and
/// the code-space probability captured by the final projection.
pub fn recover_displacement(
    code: &CodeSpec,
    words: &CodeWords,
    state: &QuantumState,
) -> Result<(QuantumState, Vec<Complex64>, f64), CodeError> {
    let dims = state.layout().dims();
    let m = code.mode_count;
    if dims.len() < m {
        return Err(CodeError::ModeCountMismatch {
            expected: m,
            got: dims.len(),
        });
    }
    let n_stab = code.stabilizers.len();
    let mut rows = Array2::<Complex64>::zeros((n_stab, 2 * m));
    let mut phases = Array2::<Complex64>::zeros((n_stab, 1));
    for (j, stab) in code.stabilizers.iter().enumerate() {
        let expect = DressedOperator::new(stab, 0.0, dims)?.expectation(state)?;
        phases[(j, 0)] = Complex64::new(expect.im.atan2(expect.re), 0.0);
        for (k, a) in stab.amplitudes.iter().enumerate() {
            rows[(j, 2 * k)] = Complex64::new(2.0 * a.im, 0.0);
            rows[(j, 2 * k + 1)] = Complex64::new(-2.0 * a.re, 0.0);
        }
    }
    // Normal equations: the stabilizer set is symplectically independent,
    // so AᵀA is invertible.
    let at = rows.t().to_owned();
    let ata = at.dot(&rows);
    let atb = at.dot(&phases);
    let x = solve(&ata, &atb)?;
    let eps: Vec<Complex64> = (0..m)
        .map(|k| Complex64::new(x[(2 * k, 0)].re, x[(2 * k + 1, 0)].re))
        .collect();

    let mut amps = state.amplitudes().clone();
    for (k, &e) in eps.iter().enumerate() {
        if e.norm() > 0.0 {
            let corr = displacement(-e, dims[k])?;
            amps = apply_on_axis(&amps, dims, k, corr.matrix());
        }
    }
    let corrected = QuantumState::new(state.layout().clone(), amps)?;
    let (recovered, prob) = project_to_code_space(words, &corrected)?;
    Ok((recovered, eps, prob))
}

/// Per-mode matrices of the dressed displacement
/// E_Δ D(α) E_Δ^{-1} = exp(α e^{−Δ²} â† − α* e^{Δ²} â), one factor per mode.
///
/// Each factor is assembled as the literal similarity product
/// diag(e^{−Δ²n}) · D(α) · diag(e^{Δ²n}) rather than by exponentiating the
/// non-normal generator: the envelope's condition number grows like
/// e^{Δ²·dim}, and a direct matrix exponential loses the low-energy block
/// to amplified roundoff at the truncations the codes need.
pub(crate) fn dressed_mode_factors(
    vec: &PhaseSpaceVector,
    delta: f64,
    dims: &[usize],
) -> Result<Vec<Array2<Complex64>>, CodeError> {
    if delta > 1.0 || delta < 0.0 {
        return Err(CodeError::DeltaOutOfRange(delta));
    }
    if vec.mode_count() > dims.len() {
        return Err(CodeError::ModeCountMismatch {
            expected: vec.mode_count(),
            got: dims.len(),
        });
    }
    let tau = delta * delta;
    let mut factors = Vec::with_capacity(vec.mode_count());
    for (m, &alpha) in vec.amplitudes.iter().enumerate() {
        let dim = dims[m];
        if alpha == Complex64::new(0.0, 0.0) {
            factors.push(Array2::<Complex64>::eye(dim));
            continue;
        }
        let mut d = displacement(alpha, dim)?.matrix().clone();
        for i in 0..dim {
            let row = (-tau * i as f64).exp();
            for j in 0..dim {
                let col = (tau * j as f64).exp();
                d[(i, j)] *= row * col;
            }
        }
        factors.push(d);
    }
    Ok(factors)
}

/// Finite-energy dressed displacement E_Δ D(vec) E_Δ^{-1} as a dense matrix
/// on the full layout. Subsystems beyond the code's modes (such as a
/// trailing auxiliary) get identity factors. Δ = 0 returns the bare unitary.
pub fn dress_finite_energy(
    vec: &PhaseSpaceVector,
    delta: f64,
    layout: &SpaceLayout,
) -> Result<OperatorMatrix, CodeError> {
    let dims = layout.dims();
    let factors = dressed_mode_factors(vec, delta, dims)?;
    let mut mat = Array2::<Complex64>::eye(1);
    for (m, &d) in dims.iter().enumerate() {
        let factor = if m < factors.len() {
            factors[m].clone()
        } else {
            Array2::<Complex64>::eye(d)
        };
        mat = kron(&mat, &factor);
    }
    Ok(OperatorMatrix::new(layout.clone(), mat)?)
}

/// A dressed displacement E_Δ D(vec) E_Δ^{-1} prepared once for repeated
/// expectation evaluation against states on a fixed layout.
///
/// The dressed modes are zero-padded to twice their truncation before the
/// operator is applied: the inverse envelope re-amplifies the state's high
/// Fock tail and the displacement then carries it across the bare cutoff,
/// which would bias the expectation if evaluated in place. The padded
/// factors are the expensive part, so callers that evaluate many states
/// should hold on to this.
pub struct DressedOperator {
    dims: Vec<usize>,
    padded: Vec<usize>,
    factors: Vec<Array2<Complex64>>,
}

impl DressedOperator {
    pub fn new(
        vec: &PhaseSpaceVector,
        delta: f64,
        dims: &[usize],
    ) -> Result<Self, CodeError> {
        let n_dressed = vec.mode_count().min(dims.len());
        let padded: Vec<usize> = dims
            .iter()
            .enumerate()
            .map(|(m, &d)| if m < n_dressed { 2 * d } else { d })
            .collect();
        let factors = dressed_mode_factors(vec, delta, &padded)?;
        Ok(Self {
            dims: dims.to_vec(),
            padded,
            factors,
        })
    }

    /// ⟨ψ| E_Δ D E_Δ^{-1} |ψ⟩ by per-axis application in the padded space.
    /// Extra trailing subsystems are untouched.
    pub fn expectation(&self, state: &QuantumState) -> Result<Complex64, CodeError> {
        if state.layout().dims() != self.dims.as_slice() {
            return Err(CodeError::ModeCountMismatch {
                expected: self.dims.len(),
                got: state.layout().subsystem_count(),
            });
        }
        let stride_of = |ds: &[usize]| {
            let mut s = vec![1usize; ds.len()];
            for k in (0..ds.len().saturating_sub(1)).rev() {
                s[k] = s[k + 1] * ds[k + 1];
            }
            s
        };
        let strides = stride_of(&self.dims);
        let pstrides = stride_of(&self.padded);
        let mut big = Array1::<Complex64>::zeros(self.padded.iter().product::<usize>());
        for (flat, &z) in state.amplitudes().iter().enumerate() {
            let mut pf = 0usize;
            for ((&d, &s), &ps) in self
                .dims
                .iter()
                .zip(strides.iter())
                .zip(pstrides.iter())
            {
                pf += ((flat / s) % d) * ps;
            }
            big[pf] = z;
        }
        let reference = big.clone();
        let mut v = big;
        for (m, factor) in self.factors.iter().enumerate() {
            v = apply_on_axis(&v, &self.padded, m, factor);
        }
        Ok(reference
            .iter()
            .zip(v.iter())
            .map(|(a, b)| a.conj() * b)
            .sum())
    }
}

/// One-off convenience for [`DressedOperator::expectation`].
pub fn dressed_expectation(
    vec: &PhaseSpaceVector,
    delta: f64,
    state: &QuantumState,
) -> Result<Complex64, CodeError> {
    DressedOperator::new(vec, delta, state.layout().dims())?.expectation(state)
}

/// Squeezed vacuum S(r)|0⟩ with S(r) = exp(r(â² − â†²)/2), normalized.
/// Position variance is e^{−2r}/2.
fn squeezed_vacuum(r: f64, dim: usize) -> Result<Array1<Complex64>, CodeError> {
    let a = annihilation(dim)?;
    let a2 = a.matmul(&a);
    let gen = a2.sub(&a2.adjoint()).scaled(Complex64::new(r / 2.0, 0.0));
    let sq = matrix_exponential(&gen, Complex64::new(1.0, 0.0))?;
    let mut v = Array1::<Complex64>::zeros(dim);
    for i in 0..dim {
        v[i] = sq.matrix()[(i, 0)];
    }
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    v.mapv_inplace(|z| z / norm);
    Ok(v)
}

/// One-mode dressed lattice comb.
///
/// The envelope acts on a displaced infinitely squeezed peak in closed
/// form: E_Δ D(α)|q = 0⟩ ∝ e^{−α² tanh Δ²} D(α/cosh Δ²) S(r*)|0⟩ with
/// r* = atanh(e^{−2Δ²}). Summing those over the lattice α = k·step + offset
/// reproduces E_Δ applied to the ideal comb without ever populating the
/// high Fock levels a pre-envelope comb would need. Peaks are dropped once
/// their weight is negligible or their photon load would not fit the
/// truncation (`k_fit`).
fn dressed_comb(
    dim: usize,
    step: f64,
    offset: f64,
    delta: f64,
) -> Result<Array1<Complex64>, CodeError> {
    let tau = delta * delta;
    let t = tau.tanh();
    let ch = tau.cosh();
    let r_star = ((-2.0 * tau).exp()).atanh();
    let sq = squeezed_vacuum(r_star, dim)?;
    let s = step.abs();

    // Keep peaks out to position 4/Δ, and only while the peak's mean
    // photon number α² + sinh²r* still fits the truncation. The range is
    // asymmetric in k when an offset is present: cutting by |k| instead
    // would drop a reachable edge peak on one side and visibly dent the
    // stabilizer expectations.
    let alpha_env = 2.0 * 2.0_f64.sqrt() / delta;
    let n_sq = r_star.sinh().powi(2);
    let alpha_fit = ((dim as f64 - 1.0) - n_sq).max(0.0).sqrt();
    let bound = alpha_env.min(alpha_fit);
    if offset.abs() > bound {
        return Err(CodeError::DimensionTooSmall { dim, min: dim + 1 });
    }
    let k_up = ((bound - offset) / s).floor() as usize;
    let k_dn = ((bound + offset) / s).floor() as usize;

    let d_step = displacement(Complex64::new(s / ch, 0.0), dim)?;
    let d_step_dag = d_step.adjoint();
    let base = if offset == 0.0 {
        sq.clone()
    } else {
        displacement(Complex64::new(offset / ch, 0.0), dim)?
            .matrix()
            .dot(&sq)
    };
    let weight = |k: f64| -> Complex64 {
        let alpha = k * s + offset;
        Complex64::new((-t * alpha * alpha).exp(), 0.0)
    };
    let mut comb = base.mapv(|z| z * weight(0.0));
    let mut up = base.clone();
    let mut dn = base;
    for k in 1..=k_up.max(k_dn) {
        if k <= k_up {
            up = d_step.matrix().dot(&up);
            let wu = weight(k as f64);
            for (cz, uz) in comb.iter_mut().zip(up.iter()) {
                *cz += uz * wu;
            }
        }
        if k <= k_dn {
            dn = d_step_dag.matrix().dot(&dn);
            let wd = weight(-(k as f64));
            for (cz, dz) in comb.iter_mut().zip(dn.iter()) {
                *cz += dz * wd;
            }
        }
    }
    Ok(comb)
}

/// The per-mode real lattice data extracted from a code: position-comb step
/// and the logical-X offset, both in amplitude units.
fn position_lattice(code: &CodeSpec) -> Result<Vec<(f64, f64)>, CodeError> {
    let mut out = Vec::with_capacity(code.mode_count);
    for m in 0..code.mode_count {
        let step = code
            .stabilizers
            .iter()
            .find_map(|s| {
                let all_real = s.amplitudes.iter().all(|z| z.im.abs() < 1e-12);
                let single_mode = s
                    .amplitudes
                    .iter()
                    .enumerate()
                    .all(|(k, z)| k == m || z.norm() < 1e-12);
                if all_real && single_mode && s.amplitudes[m].re.abs() > 1e-12 {
                    Some(s.amplitudes[m].re)
                } else {
                    None
                }
            })
            .ok_or(CodeError::MissingPositionGenerator { mode: m })?;
        let off = code.logical_x.amplitudes[m];
        if off.im.abs() > 1e-12 {
            return Err(CodeError::MissingPositionGenerator { mode: m });
        }
        out.push((step, off.re));
    }
    Ok(out)
}

/// Build the finite-energy codeword pair on the given oscillator layout.
///
/// For each logical value μ the state is E_Δ applied to the ideal
/// superposition of position eigenstates over the code's lattice (μ = 1
/// adds the logical-X offset). The envelope is carried out in closed form
/// per peak by [`dressed_comb`], giving Gaussian-weighted squeezed peaks
/// directly. The pair is then Gram-Schmidt orthonormalized and validated
/// against the per-stabilizer quality floor from [`stabilizer_floor`].
pub fn construct_codewords(
    code: &CodeSpec,
    layout: &SpaceLayout,
) -> Result<CodeWords, CodeError> {
    if layout.subsystem_count() != code.mode_count {
        return Err(CodeError::ModeCountMismatch {
            expected: code.mode_count,
            got: layout.subsystem_count(),
        });
    }
    if !(code.delta > 0.0 && code.delta < 1.0) {
        return Err(CodeError::DeltaOutOfRange(code.delta));
    }
    let dims = layout.dims();
    for &d in dims {
        if d < 8 {
            return Err(CodeError::DimensionTooSmall { dim: d, min: 8 });
        }
    }
    let lattice = position_lattice(code)?;
    let delta = code.delta;

    let mut kets = Vec::with_capacity(2);
    for mu in 0..2usize {
        let mut mode_vectors = Vec::with_capacity(code.mode_count);
        for (m, &(step, offset)) in lattice.iter().enumerate() {
            let off = if mu == 1 { offset } else { 0.0 };
            mode_vectors.push(dressed_comb(dims[m], step, off, delta)?);
        }
        let mut state = QuantumState::from_mode_vectors(&mode_vectors)?;
        state.normalize()?;
        kets.push(state);
    }
    let (ket_zero, mut ket_one) = (kets.remove(0), kets.remove(0));
    orthonormalize(&ket_zero.amplitudes().clone(), &mut ket_one)?;

    let mut floors = Vec::with_capacity(code.stabilizers.len());
    for idx in 0..code.stabilizers.len() {
        floors.push(stabilizer_floor(code, layout, idx)?);
    }
    let measure = |zero: &QuantumState, one: &QuantumState| -> Result<Vec<f64>, CodeError> {
        code.stabilizers
            .iter()
            .map(|stab| {
                let e0 = dressed_expectation(stab, delta, zero)?.re;
                let e1 = dressed_expectation(stab, delta, one)?.re;
                Ok(e0.min(e1))
            })
            .collect()
    };
    let below = |achieved: &[f64]| {
        achieved
            .iter()
            .zip(floors.iter())
            .any(|(&a, &f)| a < 0.99 * f)
    };

    let achieved = measure(&ket_zero, &ket_one)?;
    if below(&achieved) {
        return Err(CodeError::ConstructionQuality { achieved, floors });
    }
    Ok(CodeWords {
        ket_zero,
        ket_one,
        stabilizer_expectations: achieved,
    })
}

/// Gram-Schmidt `state` against the reference amplitudes and renormalize.
fn orthonormalize(
    reference: &Array1<Complex64>,
    state: &mut QuantumState,
) -> Result<(), CodeError> {
    let overlap = reference
        .iter()
        .zip(state.amplitudes().iter())
        .map(|(r, s)| r.conj() * s)
        .sum::<Complex64>();
    for (s, r) in state.amplitudes_mut().iter_mut().zip(reference.iter()) {
        *s -= overlap * r;
    }
    state.normalize()?;
    Ok(())
}

/// Best achievable Re⟨T_Δ⟩ for one stabilizer: the top eigenvalue of the
/// Hermitian part of the dressed stabilizer restricted to the low-energy
/// sector (total photon number ≤ ⌈2/Δ²⌉), found by shifted power iteration.
///
/// The dressed stabilizer fixes the exact finite-energy codeword with
/// eigenvalue exactly 1, so the result is clamped to 1: being a similarity
/// (not unitary) transform of a displacement, the operator's Hermitian part
/// can have sector eigenvalues above 1 carried by truncation-edge states
/// amplified through the inverse envelope, and those are not reachable by
/// any code state quality target.
pub fn stabilizer_floor(
    code: &CodeSpec,
    layout: &SpaceLayout,
    index: usize,
) -> Result<f64, CodeError> {
    let stab = code
        .stabilizers
        .get(index)
        .ok_or(CodeError::StabilizerOutOfRange {
            index,
            count: code.stabilizers.len(),
        })?;
    let dims = layout.dims();
    let delta = code.delta;
    let factors = dressed_mode_factors(stab, delta, dims)?;
    let adjoints: Vec<Array2<Complex64>> = factors
        .iter()
        .map(|f| {
            let (r, c) = f.dim();
            let mut out = Array2::<Complex64>::zeros((c, r));
            for i in 0..r {
                for j in 0..c {
                    out[(j, i)] = f[(i, j)].conj();
                }
            }
            out
        })
        .collect();

    let mut strides = vec![1usize; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * dims[k + 1];
    }
    let n_cut = (2.0 / (delta * delta)).ceil() as usize;
    let total = layout.total_dim();
    let mask: Vec<bool> = (0..total)
        .map(|flat| {
            dims.iter()
                .zip(strides.iter())
                .map(|(&d, &s)| (flat / s) % d)
                .sum::<usize>()
                <= n_cut
        })
        .collect();

    let project = |v: &mut Array1<Complex64>| {
        for (z, &keep) in v.iter_mut().zip(mask.iter()) {
            if !keep {
                *z = Complex64::new(0.0, 0.0);
            }
        }
    };
    let hermitian_part = |x: &Array1<Complex64>| -> Array1<Complex64> {
        let mut t = x.clone();
        for (m, f) in factors.iter().enumerate() {
            t = apply_on_axis(&t, dims, m, f);
        }
        let mut td = x.clone();
        for (m, f) in adjoints.iter().enumerate() {
            td = apply_on_axis(&td, dims, m, f);
        }
        let mut y = (&t + &td).mapv(|z| z * 0.5);
        project(&mut y);
        y
    };

    let sector_size = mask.iter().filter(|&&b| b).count();
    let mut x = Array1::<Complex64>::from_elem(
        total,
        Complex64::new(1.0 / (sector_size as f64).sqrt(), 0.0),
    );
    project(&mut x);
    let shift = 6.0;
    let mut lambda = 0.0_f64;
    let mut stable = 0;
    for _ in 0..400 {
        let mut y = hermitian_part(&x);
        for (yz, xz) in y.iter_mut().zip(x.iter()) {
            *yz += xz * shift;
        }
        let rayleigh: f64 = x
            .iter()
            .zip(y.iter())
            .map(|(a, b)| (a.conj() * b).re)
            .sum::<f64>()
            - shift;
        let norm = y.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        y.mapv_inplace(|z| z / norm);
        x = y;
        // The Rayleigh quotient is non-decreasing under power iteration on
        // the (positive after shifting) Hermitian part, so once it exceeds
        // the clamp there is nothing left to resolve.
        if rayleigh > 1.0 + 1e-9 {
            lambda = rayleigh;
            break;
        }
        if (rayleigh - lambda).abs() < 1e-12 {
            stable += 1;
            if stable >= 5 {
                lambda = rayleigh;
                break;
            }
        } else {
            stable = 0;
        }
        lambda = rayleigh;
    }
    Ok(lambda.min(1.0))
}

/// The photon-loss-detecting Fock pair |0_L⟩ = (|0⟩+|4⟩)/√2, |1_L⟩ = |2⟩.
pub fn binomial_11_codewords(dim: usize) -> Result<CodeWords, CodeError> {
    if dim < 5 {
        return Err(CodeError::DimensionTooSmall { dim, min: 5 });
    }
    let layout = SpaceLayout::single_mode(dim);
    let inv = Complex64::new(1.0 / 2.0_f64.sqrt(), 0.0);
    let mut zero = Array1::<Complex64>::zeros(dim);
    zero[0] = inv;
    zero[4] = inv;
    let mut one = Array1::<Complex64>::zeros(dim);
    one[2] = Complex64::new(1.0, 0.0);
    Ok(CodeWords {
        ket_zero: QuantumState::new(layout.clone(), zero)?,
        ket_one: QuantumState::new(layout, one)?,
        stabilizer_expectations: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{expectation, number, SpaceLayout};
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn lattice_constant_value() {
        assert_abs_diff_eq!(lattice_constant(), 3.5449077018110318, epsilon = 1e-12);
    }

    #[test]
    fn gkp_symplectic_structure() {
        let code = gkp_square(0.3).unwrap();
        code.validate().unwrap();
        let tq = &code.stabilizers[0];
        let tp = &code.stabilizers[1];
        // Exchange phases: stabilizer pair 4π, logical pair −π.
        assert_abs_diff_eq!(tq.exchange_phase(tp), 4.0 * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(
            code.logical_x.exchange_phase(&code.logical_z),
            -PI,
            epsilon = 1e-12
        );
        // X is parallel to T_p, Z to T_q: the square code lacks the
        // isthmus property.
        assert!(code.logical_x.is_parallel_to(tp, 1e-9));
        assert!(code.logical_z.is_parallel_to(tq, 1e-9));
    }

    #[test]
    fn tesseract_symplectic_structure() {
        for delta in [0.1, 0.25, 0.3, 0.5, 0.9] {
            let code = tesseract(delta).unwrap();
            code.validate().unwrap();
        }
        let code = tesseract(0.3).unwrap();
        for logical in [&code.logical_x, &code.logical_z] {
            for stab in &code.stabilizers {
                assert!(
                    !logical.is_parallel_to(stab, 1e-9),
                    "{} parallel to {}",
                    logical.label,
                    stab.label
                );
            }
        }
    }

    #[test]
    fn delta_range_is_enforced() {
        assert!(matches!(gkp_square(0.0), Err(CodeError::DeltaOutOfRange(_))));
        assert!(matches!(gkp_square(1.0), Err(CodeError::DeltaOutOfRange(_))));
        assert!(matches!(tesseract(-0.1), Err(CodeError::DeltaOutOfRange(_))));
    }

    #[test]
    fn mean_photon_estimate_values() {
        assert!((mean_photon_estimate(0.2294) - 9.0).abs() < 0.01);
        assert_abs_diff_eq!(mean_photon_estimate(1.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(mean_photon_estimate(0.5), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn codespec_json_round_trip() {
        let code = tesseract(0.25).unwrap();
        let json = serde_json::to_string(&code).unwrap();
        assert!(json.contains("\"l\":"));
        let back: CodeSpec = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back.stabilizers.len(), 4);
        assert_abs_diff_eq!(
            back.logical_x.amplitudes[0].re,
            code.logical_x.amplitudes[0].re,
            epsilon = 1e-15
        );
    }

    #[test]
    fn dressing_similarity_transform() {
        // E_Δ â E_Δ^{-1} = e^{Δ²} â as matrices.
        let dim = 40;
        let delta = 0.3_f64;
        let n = number(dim).unwrap();
        let envelope =
            matrix_exponential(&n, c(-delta * delta, 0.0)).unwrap();
        let envelope_inv =
            matrix_exponential(&n, c(delta * delta, 0.0)).unwrap();
        let a = annihilation(dim).unwrap();
        let lhs = envelope.matmul(&a).matmul(&envelope_inv);
        let rhs = a.scaled(c((delta * delta).exp(), 0.0));
        let defect = lhs
            .sub(&rhs)
            .matrix()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(defect < 1e-10, "defect {defect:.3e}");
    }

    #[test]
    fn dressing_at_zero_delta_is_bare_displacement() {
        let code = gkp_square(0.3).unwrap();
        let layout = SpaceLayout::single_mode(30);
        let dressed = dress_finite_energy(&code.stabilizers[1], 0.0, &layout).unwrap();
        let bare = displacement(code.stabilizers[1].amplitudes[0], 30).unwrap();
        let defect = dressed
            .sub(&bare)
            .matrix()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        assert!(defect < 1e-12);
    }

    #[test]
    fn dressing_rejects_large_delta() {
        let code = gkp_square(0.3).unwrap();
        let layout = SpaceLayout::single_mode(20);
        assert!(matches!(
            dress_finite_energy(&code.stabilizers[0], 1.5, &layout),
            Err(CodeError::DeltaOutOfRange(_))
        ));
    }

    #[test]
    fn squeezed_vacuum_position_variance() {
        let r = 1.2_f64;
        let dim = 120;
        let sq = squeezed_vacuum(r, dim).unwrap();
        let st = QuantumState::new(SpaceLayout::single_mode(dim), sq).unwrap();
        let (q, _) = crate::fock::quadratures(dim).unwrap();
        let q2 = q.matmul(&q);
        let var = expectation(&q2, &st).unwrap().re;
        assert_abs_diff_eq!(var, (-2.0 * r).exp() / 2.0, epsilon = 1e-6);
    }

    #[test]
    fn dressed_comb_peak_width_matches_envelope_limit() {
        // A single dressed peak (step so large only k = 0 survives the
        // fit cap) is the squeezed vacuum the envelope leaves behind: its
        // position variance is tanh(Δ²)/2, not Δ²/2.
        let delta = 0.3_f64;
        let dim = 140;
        let comb = dressed_comb(dim, 100.0, 0.0, delta).unwrap();
        let mut st = QuantumState::new(SpaceLayout::single_mode(dim), comb).unwrap();
        st.normalize().unwrap();
        let (q, _) = crate::fock::quadratures(dim).unwrap();
        let q2 = q.matmul(&q);
        let var = expectation(&q2, &st).unwrap().re;
        let tau = delta * delta;
        assert_abs_diff_eq!(var, tau.tanh() / 2.0, epsilon = 1e-7);
    }

    #[test]
    fn binomial_pair_properties() {
        assert!(matches!(
            binomial_11_codewords(4),
            Err(CodeError::DimensionTooSmall { .. })
        ));
        let words = binomial_11_codewords(12).unwrap();
        let n = number(12).unwrap();
        assert_abs_diff_eq!(
            expectation(&n, &words.ket_zero).unwrap().re,
            2.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            expectation(&n, &words.ket_one).unwrap().re,
            2.0,
            epsilon = 1e-12
        );
        assert!(words.ket_zero.inner(&words.ket_one).norm() < 1e-15);
        // Parity flips from even to odd under a single photon loss.
        let parity = |st: &QuantumState| -> f64 {
            st.amplitudes()
                .iter()
                .enumerate()
                .map(|(k, z)| if k % 2 == 0 { z.norm_sqr() } else { -z.norm_sqr() })
                .sum()
        };
        assert_abs_diff_eq!(parity(&words.ket_zero), 1.0, epsilon = 1e-12);
        let a = annihilation(12).unwrap();
        let mut lost = a.apply(&words.ket_zero).unwrap();
        lost.normalize().unwrap();
        assert_abs_diff_eq!(parity(&lost), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn constructed_gkp_codewords_pass_quality_floor() {
        let code = gkp_square(0.3).unwrap();
        let layout = SpaceLayout::single_mode(80);
        let words = construct_codewords(&code, &layout).unwrap();
        assert!(words.ket_zero.inner(&words.ket_one).norm() < 1e-6);
        for (i, &e) in words.stabilizer_expectations.iter().enumerate() {
            assert!(e > 0.9, "stabilizer {i} expectation {e}");
        }
        // Dressed logical Z distinguishes the two codewords by sign.
        let z0 = dressed_expectation(&code.logical_z, 0.3, &words.ket_zero)
            .unwrap()
            .re;
        let z1 = dressed_expectation(&code.logical_z, 0.3, &words.ket_one)
            .unwrap()
            .re;
        assert!(z0 > 0.95, "⟨Z⟩ on |0⟩: {z0}");
        assert!(z1 < -0.95, "⟨Z⟩ on |1⟩: {z1}");
    }

    #[test]
    fn constructed_gkp_photon_number_matches_envelope_estimate() {
        let delta = 0.2294_f64;
        let code = gkp_square(delta).unwrap();
        let layout = SpaceLayout::single_mode(140);
        let words = construct_codewords(&code, &layout).unwrap();
        let n = number(140).unwrap();
        let n0 = expectation(&n, &words.ket_zero).unwrap().re;
        let n1 = expectation(&n, &words.ket_one).unwrap().re;
        assert!((n0 - 9.0).abs() < 1.0, "⟨n⟩ on |0⟩: {n0}");
        assert!((n1 - 9.0).abs() < 1.0, "⟨n⟩ on |1⟩: {n1}");
    }

    #[test]
    fn stabilizer_commutator_vanishes_on_codewords() {
        // The stabilizer pair commutes (exchange phase 0 mod 2π), so both
        // orders agree on the codewords up to truncation leakage of the
        // outermost comb peak. The logical pair anticommutes, giving an
        // order difference of full size on the same states.
        let code = gkp_square(0.3).unwrap();
        let dim = 160;
        let layout = SpaceLayout::single_mode(dim);
        let words = construct_codewords(&code, &layout).unwrap();
        let order_diff = |a: &OperatorMatrix, b: &OperatorMatrix, ket: &QuantumState| -> f64 {
            let ab = a.apply(&b.apply(ket).unwrap()).unwrap();
            let ba = b.apply(&a.apply(ket).unwrap()).unwrap();
            ab.amplitudes()
                .iter()
                .zip(ba.amplitudes().iter())
                .map(|(x, y)| (x - y).norm_sqr())
                .sum::<f64>()
                .sqrt()
        };
        let tq = displacement(code.stabilizers[0].amplitudes[0], dim).unwrap();
        let tp = displacement(code.stabilizers[1].amplitudes[0], dim).unwrap();
        let lx = displacement(code.logical_x.amplitudes[0], dim).unwrap();
        let lz = displacement(code.logical_z.amplitudes[0], dim).unwrap();
        for ket in [&words.ket_zero, &words.ket_one] {
            let stab = order_diff(&tq, &tp, ket);
            assert!(stab < 1e-3, "stabilizer commutator norm {stab:.3e}");
            let logi = order_diff(&lx, &lz, ket);
            assert!(logi > 1.9, "logical anticommutator contrast {logi:.3e}");
        }
    }

    #[test]
    fn small_displacements_are_recoverable() {
        // Quadrature shifts below the correctable radius √π/2 are undone
        // by the phase-reading decoder; just past the radius the phase
        // estimate wraps around the lattice cell and the recovered state
        // lands on the other codeword.
        let code = gkp_square(0.3).unwrap();
        let dim = 80;
        let layout = SpaceLayout::single_mode(dim);
        let words = construct_codewords(&code, &layout).unwrap();
        let radius = PI.sqrt() / 2.0;
        for frac in [0.2, 0.5, 0.8] {
            let shift = frac * radius;
            let d = displacement(c(shift / 2.0_f64.sqrt(), 0.0), dim).unwrap();
            let erred = d.apply(&words.ket_zero).unwrap();
            let (recovered, est, _) = recover_displacement(&code, &words, &erred).unwrap();
            assert_abs_diff_eq!(est[0].re * 2.0_f64.sqrt(), shift, epsilon = 2e-2);
            let fid = words.ket_zero.fidelity(&recovered);
            assert!(fid >= 0.99, "shift {shift:.3}: fidelity {fid:.4}");
        }
        let past = 1.2 * radius;
        let d = displacement(c(past / 2.0_f64.sqrt(), 0.0), dim).unwrap();
        let erred = d.apply(&words.ket_zero).unwrap();
        let (recovered, _, _) = recover_displacement(&code, &words, &erred).unwrap();
        assert!(words.ket_one.fidelity(&recovered) > 0.5);
        assert!(words.ket_zero.fidelity(&recovered) < 0.05);
    }

    #[test]
    fn tesseract_codewords_construct_and_separate_z() {
        let code = tesseract(0.3).unwrap();
        let layout = SpaceLayout::new(vec![50, 50]).unwrap();
        let words = construct_codewords(&code, &layout).unwrap();
        assert!(words.ket_zero.inner(&words.ket_one).norm() < 1e-6);
        for (i, &e) in words.stabilizer_expectations.iter().enumerate() {
            assert!(e > 0.9, "stabilizer {i} expectation {e}");
        }
        let z0 = dressed_expectation(&code.logical_z, 0.3, &words.ket_zero)
            .unwrap()
            .re;
        let z1 = dressed_expectation(&code.logical_z, 0.3, &words.ket_one)
            .unwrap()
            .re;
        assert!(z0 > 0.9, "⟨Z⟩ on |0⟩: {z0}");
        assert!(z1 < -0.9, "⟨Z⟩ on |1⟩: {z1}");
    }
}
