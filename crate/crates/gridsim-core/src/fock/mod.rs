//! States, operators, and density matrices on composite truncated Fock
//! spaces.
//!
//! A [`SpaceLayout`] is an ordered list of subsystem dimensions. Oscillator
//! modes carry their Fock truncation (per-mode dimension N means levels
//! 0..N-1); when an auxiliary qubit participates it is appended as a trailing
//! dimension-2 subsystem. Composite indices are row-major: the last subsystem
//! varies fastest.
//!
//! Everything here is dense. The simulations this crate targets stay below a
//! few thousand composite dimensions, where dense matrices and
//! structure-aware per-axis application are simpler and fast enough.

mod eigh;
mod expm;

pub use eigh::{eigh, trace_distance};
pub use expm::{expm, one_norm, solve};

use ndarray::{Array1, Array2, ArrayView2};
use num_complex::Complex64;
use thiserror::Error;

/// Norm deviation below which a state vector counts as normalized.
pub const NORM_TOL: f64 = 1e-12;

/// Fraction of the top Fock levels watched by the truncation guard.
pub const TAIL_FRACTION: f64 = 0.1;

/// Tail mass above which the truncation guard reports a diagnostic.
pub const TAIL_GUARD: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FockError {
    #[error("invalid dimension {got}, need at least {min}")]
    InvalidDimension { got: usize, min: usize },
    #[error("layout must contain at least one subsystem")]
    EmptyLayout,
    #[error("layout mismatch: expected total dimension {expected}, got {got}")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("subsystem index {index} out of range for {count} subsystems")]
    SubsystemOutOfRange { index: usize, count: usize },
    #[error("numeric range: {0}")]
    NumericRange(String),
    #[error("density matrix is not Hermitian (max asymmetry {0:.3e})")]
    NotHermitian(f64),
    #[error("density matrix trace deviates from one by {0:.3e}")]
    BadTrace(f64),
    #[error("density matrix has negative eigenvalue {0:.3e}")]
    NotPositive(f64),
    #[error("subsystem selection must be non-empty, sorted, and unique")]
    BadSelection,
}

/// Ordered list of subsystem dimensions of a composite space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceLayout {
    dims: Vec<usize>,
}

impl SpaceLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self, FockError> {
        if dims.is_empty() {
            return Err(FockError::EmptyLayout);
        }
        for &d in &dims {
            if d < 1 {
                return Err(FockError::InvalidDimension { got: d, min: 1 });
            }
        }
        Ok(Self { dims })
    }

    pub fn single_mode(dim: usize) -> Self {
        Self { dims: vec![dim] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn subsystem_count(&self) -> usize {
        self.dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().product()
    }

    /// Same layout with a dimension-2 auxiliary qubit appended.
    pub fn with_aux(&self) -> Self {
        let mut dims = self.dims.clone();
        dims.push(2);
        Self { dims }
    }

    /// Row-major stride of each subsystem.
    pub(crate) fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.dims.len()];
        for k in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.dims[k + 1];
        }
        strides
    }
}

/// A pure state on a composite layout.
#[derive(Debug, Clone)]
pub struct QuantumState {
    layout: SpaceLayout,
    amps: Array1<Complex64>,
    normalized: bool,
}

impl QuantumState {
    pub fn new(layout: SpaceLayout, amps: Array1<Complex64>) -> Result<Self, FockError> {
        if amps.len() != layout.total_dim() {
            return Err(FockError::LayoutMismatch {
                expected: layout.total_dim(),
                got: amps.len(),
            });
        }
        let norm = amps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let normalized = (norm - 1.0).abs() <= NORM_TOL;
        Ok(Self {
            layout,
            amps,
            normalized,
        })
    }

    pub fn vacuum(layout: SpaceLayout) -> Self {
        Self::basis_state(layout, 0)
    }

    /// Basis state |flat index⟩ of the composite space.
    pub fn basis_state(layout: SpaceLayout, flat_index: usize) -> Self {
        let mut amps = Array1::<Complex64>::zeros(layout.total_dim());
        amps[flat_index] = Complex64::new(1.0, 0.0);
        Self {
            layout,
            amps,
            normalized: true,
        }
    }

    /// Tensor product of per-subsystem vectors, in layout order.
    pub fn from_mode_vectors(vectors: &[Array1<Complex64>]) -> Result<Self, FockError> {
        let layout = SpaceLayout::new(vectors.iter().map(|v| v.len()).collect())?;
        let mut amps = Array1::from_elem(1, Complex64::new(1.0, 0.0));
        for v in vectors {
            let mut next = Array1::<Complex64>::zeros(amps.len() * v.len());
            for (i, a) in amps.iter().enumerate() {
                for (j, b) in v.iter().enumerate() {
                    next[i * v.len() + j] = a * b;
                }
            }
            amps = next;
        }
        Self::new(layout, amps)
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn amplitudes(&self) -> &Array1<Complex64> {
        &self.amps
    }

    pub(crate) fn amplitudes_mut(&mut self) -> &mut Array1<Complex64> {
        &mut self.amps
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn normalize(&mut self) -> Result<(), FockError> {
        let n = self.norm();
        if n < 1e-300 {
            return Err(FockError::NumericRange(
                "cannot normalize a zero state".into(),
            ));
        }
        let inv = Complex64::new(1.0 / n, 0.0);
        self.amps.mapv_inplace(|z| z * inv);
        self.normalized = true;
        Ok(())
    }

    pub(crate) fn refresh_norm_flag(&mut self) {
        self.normalized = (self.norm() - 1.0).abs() <= NORM_TOL;
    }

    /// ⟨self|other⟩.
    pub fn inner(&self, other: &QuantumState) -> Complex64 {
        self.amps
            .iter()
            .zip(other.amps.iter())
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// |⟨self|other⟩|².
    pub fn fidelity(&self, other: &QuantumState) -> f64 {
        self.inner(other).norm_sqr()
    }

    pub fn to_density(&self) -> DensityMatrix {
        let n = self.amps.len();
        let mut mat = Array2::<Complex64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                mat[(i, j)] = self.amps[i] * self.amps[j].conj();
            }
        }
        DensityMatrix {
            layout: self.layout.clone(),
            mat,
        }
    }

    /// Population of each subsystem's top `TAIL_FRACTION` levels, reported
    /// when it exceeds `TAIL_GUARD`. Truncation artifacts show up here first.
    pub fn tail_diagnostics(&self) -> Vec<TailDiagnostic> {
        let dims = self.layout.dims();
        let strides = self.layout.strides();
        let mut out = Vec::new();
        for (mode, &d) in dims.iter().enumerate() {
            if d < 4 {
                continue; // auxiliary qubits and tiny modes have no tail
            }
            let start = d - ((d as f64 * TAIL_FRACTION).ceil() as usize).max(1);
            let mut mass = 0.0;
            for (flat, amp) in self.amps.iter().enumerate() {
                let level = (flat / strides[mode]) % d;
                if level >= start {
                    mass += amp.norm_sqr();
                }
            }
            if mass > TAIL_GUARD {
                out.push(TailDiagnostic {
                    subsystem: mode,
                    tail_mass: mass,
                });
            }
        }
        out
    }
}

/// Truncation-guard report: population found in the top Fock levels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TailDiagnostic {
    pub subsystem: usize,
    pub tail_mass: f64,
}

/// Dense square operator on a composite layout.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    layout: SpaceLayout,
    mat: Array2<Complex64>,
}

impl OperatorMatrix {
    pub fn new(layout: SpaceLayout, mat: Array2<Complex64>) -> Result<Self, FockError> {
        if mat.nrows() != mat.ncols() {
            return Err(FockError::NotSquare {
                rows: mat.nrows(),
                cols: mat.ncols(),
            });
        }
        if mat.nrows() != layout.total_dim() {
            return Err(FockError::LayoutMismatch {
                expected: layout.total_dim(),
                got: mat.nrows(),
            });
        }
        Ok(Self { layout, mat })
    }

    pub fn identity(layout: SpaceLayout) -> Self {
        let n = layout.total_dim();
        Self {
            layout,
            mat: Array2::eye(n),
        }
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &Array2<Complex64> {
        &self.mat
    }

    pub fn adjoint(&self) -> Self {
        let n = self.mat.nrows();
        let mut out = Array2::<Complex64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = self.mat[(j, i)].conj();
            }
        }
        Self {
            layout: self.layout.clone(),
            mat: out,
        }
    }

    pub fn matmul(&self, rhs: &OperatorMatrix) -> OperatorMatrix {
        OperatorMatrix {
            layout: self.layout.clone(),
            mat: self.mat.dot(&rhs.mat),
        }
    }

    pub fn scaled(&self, factor: Complex64) -> OperatorMatrix {
        OperatorMatrix {
            layout: self.layout.clone(),
            mat: self.mat.mapv(|z| z * factor),
        }
    }

    pub fn add(&self, rhs: &OperatorMatrix) -> OperatorMatrix {
        OperatorMatrix {
            layout: self.layout.clone(),
            mat: &self.mat + &rhs.mat,
        }
    }

    pub fn sub(&self, rhs: &OperatorMatrix) -> OperatorMatrix {
        OperatorMatrix {
            layout: self.layout.clone(),
            mat: &self.mat - &rhs.mat,
        }
    }

    /// Apply to a pure state: |ψ'⟩ = U|ψ⟩. The result's norm flag is
    /// recomputed (the operator need not be unitary).
    pub fn apply(&self, state: &QuantumState) -> Result<QuantumState, FockError> {
        if state.layout.total_dim() != self.layout.total_dim() {
            return Err(FockError::LayoutMismatch {
                expected: self.layout.total_dim(),
                got: state.layout.total_dim(),
            });
        }
        let amps = self.mat.dot(&state.amps);
        let mut out = QuantumState {
            layout: state.layout.clone(),
            amps,
            normalized: false,
        };
        out.refresh_norm_flag();
        Ok(out)
    }

    /// U ρ U†.
    pub fn conjugate(&self, rho: &DensityMatrix) -> DensityMatrix {
        let m = self.mat.dot(&rho.mat);
        let mut udag = Array2::<Complex64>::zeros(self.mat.dim());
        for i in 0..self.mat.nrows() {
            for j in 0..self.mat.ncols() {
                udag[(i, j)] = self.mat[(j, i)].conj();
            }
        }
        DensityMatrix {
            layout: rho.layout.clone(),
            mat: m.dot(&udag),
        }
    }

    /// max |(U†U − I)_{ij}|, a unitarity defect useful in tests.
    pub fn unitarity_defect(&self) -> f64 {
        let prod = self.adjoint().mat.dot(&self.mat);
        let n = prod.nrows();
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                worst = worst.max((prod[(i, j)] - target).norm());
            }
        }
        worst
    }
}

/// Mixed state on a composite layout.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    layout: SpaceLayout,
    mat: Array2<Complex64>,
}

impl DensityMatrix {
    /// Build with full validation: Hermitian within 1e-10, unit trace within
    /// 1e-10, eigenvalues ≥ −1e-10.
    pub fn new(layout: SpaceLayout, mat: Array2<Complex64>) -> Result<Self, FockError> {
        if mat.nrows() != mat.ncols() {
            return Err(FockError::NotSquare {
                rows: mat.nrows(),
                cols: mat.ncols(),
            });
        }
        if mat.nrows() != layout.total_dim() {
            return Err(FockError::LayoutMismatch {
                expected: layout.total_dim(),
                got: mat.nrows(),
            });
        }
        let n = mat.nrows();
        let mut herm_defect = 0.0_f64;
        for i in 0..n {
            for j in i..n {
                herm_defect = herm_defect.max((mat[(i, j)] - mat[(j, i)].conj()).norm());
            }
        }
        if herm_defect > 1e-10 {
            return Err(FockError::NotHermitian(herm_defect));
        }
        let trace: Complex64 = (0..n).map(|i| mat[(i, i)]).sum();
        if (trace.re - 1.0).abs() > 1e-10 || trace.im.abs() > 1e-10 {
            return Err(FockError::BadTrace((trace - 1.0).norm()));
        }
        let (vals, _) = eigh(&mat);
        if let Some(&min) = vals
            .iter()
            .min_by(|a, b| a.partial_cmp(b).unwrap())
            .as_ref()
        {
            if *min < -1e-10 {
                return Err(FockError::NotPositive(*min));
            }
        }
        Ok(Self { layout, mat })
    }

    /// Internal constructor for matrices produced by trusted channel
    /// arithmetic (kept exactly Hermitian by construction).
    pub(crate) fn from_parts(layout: SpaceLayout, mat: Array2<Complex64>) -> Self {
        Self { layout, mat }
    }

    pub fn from_pure(state: &QuantumState) -> Self {
        state.to_density()
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn matrix(&self) -> &Array2<Complex64> {
        &self.mat
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.mat.nrows()).map(|i| self.mat[(i, i)]).sum()
    }

    /// ½ Tr |ρ − σ|.
    pub fn trace_distance(&self, other: &DensityMatrix) -> f64 {
        trace_distance(&self.mat, &other.mat)
    }

    /// ⟨ψ|ρ|ψ⟩ for a pure reference state.
    pub fn fidelity_with_pure(&self, state: &QuantumState) -> f64 {
        let v = self.mat.dot(&state.amps);
        state
            .amps
            .iter()
            .zip(v.iter())
            .map(|(a, b)| (a.conj() * b).re)
            .sum()
    }
}

/// Annihilation operator on a single mode: ⟨n−1|a|n⟩ = √n.
pub fn annihilation(dim: usize) -> Result<OperatorMatrix, FockError> {
    if dim < 2 {
        return Err(FockError::InvalidDimension { got: dim, min: 2 });
    }
    let mut mat = Array2::<Complex64>::zeros((dim, dim));
    for n in 1..dim {
        mat[(n - 1, n)] = Complex64::new((n as f64).sqrt(), 0.0);
    }
    Ok(OperatorMatrix {
        layout: SpaceLayout::single_mode(dim),
        mat,
    })
}

/// Creation operator a†.
pub fn creation(dim: usize) -> Result<OperatorMatrix, FockError> {
    Ok(annihilation(dim)?.adjoint())
}

/// Number operator a†a (diagonal).
pub fn number(dim: usize) -> Result<OperatorMatrix, FockError> {
    if dim < 2 {
        return Err(FockError::InvalidDimension { got: dim, min: 2 });
    }
    let mut mat = Array2::<Complex64>::zeros((dim, dim));
    for n in 0..dim {
        mat[(n, n)] = Complex64::new(n as f64, 0.0);
    }
    Ok(OperatorMatrix {
        layout: SpaceLayout::single_mode(dim),
        mat,
    })
}

/// Quadrature pair (q, p) with q = (a + a†)/√2 and p = i(a† − a)/√2.
pub fn quadratures(dim: usize) -> Result<(OperatorMatrix, OperatorMatrix), FockError> {
    let a = annihilation(dim)?;
    let adag = a.adjoint();
    let inv_sqrt2 = Complex64::new(1.0 / 2.0_f64.sqrt(), 0.0);
    let q = a.add(&adag).scaled(inv_sqrt2);
    let p = adag.sub(&a).scaled(Complex64::new(0.0, 1.0) * inv_sqrt2);
    Ok((q, p))
}

/// Displacement D(α) = exp(α a† − α* a) in the truncated space.
///
/// Computed as the exponential of the truncated generator, so the result is
/// exactly unitary at any dimension; matrix elements near the truncation
/// edge differ from their infinite-space values, which is the price of
/// keeping the group structure.
pub fn displacement(alpha: Complex64, dim: usize) -> Result<OperatorMatrix, FockError> {
    let a = annihilation(dim)?;
    let gen = a
        .adjoint()
        .scaled(alpha)
        .sub(&a.scaled(alpha.conj()));
    matrix_exponential(&gen, Complex64::new(1.0, 0.0))
}

/// exp(scale · gen) for a dense generator.
pub fn matrix_exponential(
    gen: &OperatorMatrix,
    scale: Complex64,
) -> Result<OperatorMatrix, FockError> {
    let scaled = gen.mat.mapv(|z| z * scale);
    let mat = expm(&scaled)?;
    Ok(OperatorMatrix {
        layout: gen.layout.clone(),
        mat,
    })
}

/// Embed a single-subsystem operator at `index` within `layout`
/// (identity on all other subsystems).
pub fn embed(
    op: &OperatorMatrix,
    index: usize,
    layout: &SpaceLayout,
) -> Result<OperatorMatrix, FockError> {
    let dims = layout.dims();
    if index >= dims.len() {
        return Err(FockError::SubsystemOutOfRange {
            index,
            count: dims.len(),
        });
    }
    if op.mat.nrows() != dims[index] {
        return Err(FockError::LayoutMismatch {
            expected: dims[index],
            got: op.mat.nrows(),
        });
    }
    let pre: usize = dims[..index].iter().product();
    let post: usize = dims[index + 1..].iter().product();
    let eye_pre = Array2::<Complex64>::eye(pre);
    let eye_post = Array2::<Complex64>::eye(post);
    let mat = kron(&kron(&eye_pre, &op.mat), &eye_post);
    Ok(OperatorMatrix {
        layout: layout.clone(),
        mat,
    })
}

/// Kronecker product (row-major convention, matching composite indices).
pub fn kron(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Array2<Complex64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::<Complex64>::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == Complex64::new(0.0, 0.0) {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// ⟨ψ|A|ψ⟩.
pub fn expectation(op: &OperatorMatrix, state: &QuantumState) -> Result<Complex64, FockError> {
    if op.layout.total_dim() != state.layout.total_dim() {
        return Err(FockError::LayoutMismatch {
            expected: op.layout.total_dim(),
            got: state.layout.total_dim(),
        });
    }
    let v = op.mat.dot(&state.amps);
    Ok(state
        .amps
        .iter()
        .zip(v.iter())
        .map(|(a, b)| a.conj() * b)
        .sum())
}

/// Tr(ρ A).
pub fn expectation_density(
    op: &OperatorMatrix,
    rho: &DensityMatrix,
) -> Result<Complex64, FockError> {
    if op.layout.total_dim() != rho.layout.total_dim() {
        return Err(FockError::LayoutMismatch {
            expected: op.layout.total_dim(),
            got: rho.layout.total_dim(),
        });
    }
    let n = op.mat.nrows();
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..n {
        for k in 0..n {
            acc += rho.mat[(i, k)] * op.mat[(k, i)];
        }
    }
    Ok(acc)
}

/// Partial trace keeping the listed subsystems (sorted, unique).
pub fn partial_trace(rho: &DensityMatrix, keep: &[usize]) -> Result<DensityMatrix, FockError> {
    let dims = rho.layout.dims();
    if keep.is_empty()
        || keep.windows(2).any(|w| w[0] >= w[1])
        || *keep.last().unwrap() >= dims.len()
    {
        return Err(FockError::BadSelection);
    }
    let strides = rho.layout.strides();
    let traced: Vec<usize> = (0..dims.len()).filter(|k| !keep.contains(k)).collect();
    let keep_dims: Vec<usize> = keep.iter().map(|&k| dims[k]).collect();
    let traced_dims: Vec<usize> = traced.iter().map(|&k| dims[k]).collect();
    let keep_total: usize = keep_dims.iter().product();
    let traced_total: usize = traced_dims.iter().product::<usize>().max(1);

    let flat_of = |multi: &[usize], subsystems: &[usize]| -> usize {
        multi
            .iter()
            .zip(subsystems.iter())
            .map(|(&v, &k)| v * strides[k])
            .sum()
    };
    let decode = |mut idx: usize, dims: &[usize]| -> Vec<usize> {
        let mut out = vec![0usize; dims.len()];
        for k in (0..dims.len()).rev() {
            out[k] = idx % dims[k];
            idx /= dims[k];
        }
        out
    };

    let mut out = Array2::<Complex64>::zeros((keep_total, keep_total));
    for i in 0..keep_total {
        let mi = decode(i, &keep_dims);
        let base_i = flat_of(&mi, keep);
        for j in 0..keep_total {
            let mj = decode(j, &keep_dims);
            let base_j = flat_of(&mj, keep);
            let mut acc = Complex64::new(0.0, 0.0);
            for t in 0..traced_total {
                let mt = decode(t, &traced_dims);
                let off = flat_of(&mt, &traced);
                acc += rho.mat[(base_i + off, base_j + off)];
            }
            out[(i, j)] = acc;
        }
    }
    Ok(DensityMatrix {
        layout: SpaceLayout::new(keep_dims)?,
        mat: out,
    })
}

/// Partial trace of a pure state (returns a density matrix on the kept
/// subsystems).
pub fn partial_trace_state(
    state: &QuantumState,
    keep: &[usize],
) -> Result<DensityMatrix, FockError> {
    partial_trace(&state.to_density(), keep)
}

/// Apply a single-subsystem operator along one axis of a composite state
/// vector. This is the workhorse for gate application at two-mode sizes,
/// where materializing the embedded operator would be wasteful.
pub fn apply_on_axis(
    amps: &Array1<Complex64>,
    dims: &[usize],
    axis: usize,
    op: &Array2<Complex64>,
) -> Array1<Complex64> {
    let d = dims[axis];
    debug_assert_eq!(op.nrows(), d);
    let pre: usize = dims[..axis].iter().product();
    let post: usize = dims[axis + 1..].iter().product();
    let slice = amps.as_slice().expect("contiguous amplitudes");
    let mut out = Array1::<Complex64>::zeros(amps.len());
    if post == 1 {
        // Last axis: one (pre × d) · opᵀ product.
        let x = ArrayView2::from_shape((pre, d), slice).unwrap();
        let y = x.dot(&op.t());
        out.as_slice_mut()
            .unwrap()
            .copy_from_slice(y.as_slice().unwrap());
    } else {
        let out_slice = out.as_slice_mut().unwrap();
        for b in 0..pre {
            let offset = b * d * post;
            let block = ArrayView2::from_shape((d, post), &slice[offset..offset + d * post])
                .unwrap();
            let y = op.dot(&block);
            out_slice[offset..offset + d * post].copy_from_slice(y.as_slice().unwrap());
        }
    }
    out
}
