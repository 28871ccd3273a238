//! Variational synthesis of preparation circuits from the native gate set.
//!
//! The ansatz alternates an auxiliary rotation with an echoed conditional
//! displacement, three real parameters per layer (θ, φ, and a signed
//! conditional amplitude along a fixed direction that cycles through the
//! modes and between the two quadratures). A seeded multi-start Nelder–Mead
//! search maximizes overlap with the target state while requiring the
//! auxiliary to return to the ground state, so the resulting circuit prepares
//! the target from vacuum without post-selection.

use std::f64::consts::{FRAC_PI_2, PI};

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{aux_rotation_matrix, Circuit, CircuitError, GateDurations, GateKind, GateStep};
use crate::codes::CodeWords;
use crate::fock::{annihilation, apply_on_axis, eigh, QuantumState, SpaceLayout};

/// Which logical state to prepare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogicalTarget {
    Zero,
    One,
    Plus,
    Minus,
    PlusI,
    MinusI,
}

/// Search configuration for the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeOptions {
    /// Fidelity at which the result is flagged as having reached its goal.
    pub fidelity_target: f64,
    /// Total objective-evaluation budget across restarts.
    pub budget: usize,
    /// Number of Nelder–Mead restarts (the first start is deterministic,
    /// the rest draw their initial points from the seeded generator).
    pub restarts: usize,
    pub seed: u64,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            fidelity_target: 0.95,
            budget: 20_000,
            restarts: 6,
            seed: 7,
        }
    }
}

/// Outcome of a synthesis run: the best circuit found, its overlap with the
/// target, and the raw parameter vector (θ, φ, amplitude per layer).
#[derive(Debug, Clone)]
pub struct EncodeResult {
    pub circuit: Circuit,
    pub fidelity: f64,
    pub reached_target: bool,
    pub params: Vec<f64>,
}

/// Largest supported ansatz depth.
pub const MAX_ENCODE_DEPTH: usize = 10;

fn layer_direction(layer: usize, modes: usize) -> (usize, Complex64) {
    let mode = layer % modes;
    let dir = if (layer / modes) % 2 == 0 {
        Complex64::new(1.0, 0.0)
    } else {
        Complex64::new(0.0, 1.0)
    };
    (mode, dir)
}

/// Eigenbasis of the displacement generator G = dir·â† − dir*·â, so that
/// exp(s·G) applies as V·e^{−isλ}·V† for any real s without re-exponentiating.
struct DisplacementBasis {
    v: Array2<Complex64>,
    v_dag: Array2<Complex64>,
    lambda: Vec<f64>,
}

fn displacement_basis(dir: Complex64, dim: usize) -> Result<DisplacementBasis, CircuitError> {
    let a = annihilation(dim)?;
    let gen = a.adjoint().matrix().mapv(|z| z * dir) - a.matrix().mapv(|z| z * dir.conj());
    let h = gen.mapv(|z| z * Complex64::new(0.0, 1.0));
    let (lambda, v) = eigh(&h);
    let v_dag = v.mapv(|z| z.conj()).t().to_owned();
    Ok(DisplacementBasis {
        v,
        v_dag,
        lambda: lambda.to_vec(),
    })
}

fn apply_generator_exp(
    amps: &Array1<Complex64>,
    dims: &[usize],
    axis: usize,
    basis: &DisplacementBasis,
    s: f64,
) -> Array1<Complex64> {
    let mut tmp = apply_on_axis(amps, dims, axis, &basis.v_dag);
    let d = dims[axis];
    let stride: usize = dims[axis + 1..].iter().product();
    let phases: Vec<Complex64> = basis
        .lambda
        .iter()
        .map(|&l| Complex64::from_polar(1.0, -s * l))
        .collect();
    for (i, z) in tmp.iter_mut().enumerate() {
        *z *= phases[(i / stride) % d];
    }
    apply_on_axis(&tmp, dims, axis, &basis.v)
}

struct Ansatz {
    osc_dims: Vec<usize>,
    /// Per layer: (mode, direction, index into `bases`).
    layers: Vec<(usize, Complex64, usize)>,
    bases: Vec<DisplacementBasis>,
    target: Array1<Complex64>,
}

impl Ansatz {
    fn build(target: &QuantumState, depth: usize) -> Result<Self, CircuitError> {
        let osc_dims = target.layout().dims().to_vec();
        let modes = osc_dims.len();
        let mut bases: Vec<DisplacementBasis> = Vec::new();
        let mut keys: Vec<(usize, bool)> = Vec::new();
        let mut layers = Vec::with_capacity(depth);
        for j in 0..depth {
            let (mode, dir) = layer_direction(j, modes);
            let key = (mode, dir.im != 0.0);
            let idx = match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    bases.push(displacement_basis(dir, osc_dims[mode])?);
                    bases.len() - 1
                }
            };
            layers.push((mode, dir, idx));
        }
        let mut t = target.clone();
        if !t.is_normalized() {
            t.normalize()?;
        }
        Ok(Self {
            osc_dims,
            layers,
            bases,
            target: t.amplitudes().clone(),
        })
    }

    /// |⟨target ⊗ g | U(params) | vacuum ⊗ g⟩|².
    fn fidelity(&self, params: &[f64]) -> f64 {
        let n: usize = self.osc_dims.iter().product();
        let mut g = Array1::<Complex64>::zeros(n);
        g[0] = Complex64::new(1.0, 0.0);
        let mut e = Array1::<Complex64>::zeros(n);
        for (chunk, &(mode, _, idx)) in params.chunks(3).zip(self.layers.iter()) {
            let (theta, phi, b) = (chunk[0], chunk[1], chunk[2]);
            let m = aux_rotation_matrix(theta, phi);
            let new_g = g.mapv(|z| z * m[(0, 0)]) + e.mapv(|z| z * m[(0, 1)]);
            let new_e = g.mapv(|z| z * m[(1, 0)]) + e.mapv(|z| z * m[(1, 1)]);
            let basis = &self.bases[idx];
            g = apply_generator_exp(&new_e, &self.osc_dims, mode, basis, -b / 2.0);
            e = apply_generator_exp(&new_g, &self.osc_dims, mode, basis, b / 2.0);
        }
        let overlap: Complex64 = self
            .target
            .iter()
            .zip(g.iter())
            .map(|(t, z)| t.conj() * z)
            .sum();
        overlap.norm_sqr()
    }
}

/// Nelder–Mead with the dimension-adaptive expansion and contraction
/// coefficients, stopped by evaluation budget or simplex collapse. Returns
/// the best point, its value, and the evaluations consumed.
fn nelder_mead(
    f: &mut impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    steps: &[f64],
    max_evals: usize,
) -> (Vec<f64>, f64, usize) {
    let n = x0.len();
    let alpha = 1.0;
    let beta = 1.0 + 2.0 / n as f64;
    let gamma = 0.75 - 1.0 / (2.0 * n as f64);
    let delta = 1.0 - 1.0 / n as f64;

    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        f(x)
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let fx0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), fx0));
    for i in 0..n {
        if evals >= max_evals {
            break;
        }
        let mut x = x0.to_vec();
        x[i] += steps[i];
        let fx = eval(&x, &mut evals);
        simplex.push((x, fx));
    }
    while simplex.len() < n + 1 {
        simplex.push(simplex[0].clone());
    }

    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let spread = simplex[n].1 - simplex[0].1;
        let size = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(simplex[0].0.iter()).map(|(a, b)| (a - b).abs()))
            .fold(0.0_f64, f64::max);
        if spread.abs() < 1e-12 && size < 1e-8 {
            break;
        }
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x.iter()) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(worst.0.iter())
            .map(|(c, w)| c + alpha * (c - w))
            .collect();
        let fr = eval(&reflect, &mut evals);
        if fr < simplex[0].1 {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(worst.0.iter())
                .map(|(c, w)| c + alpha * beta * (c - w))
                .collect();
            let fe = eval(&expand, &mut evals);
            simplex[n] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflect, fr);
        } else {
            let (point, bound) = if fr < worst.1 {
                (reflect.clone(), fr)
            } else {
                (worst.0.clone(), worst.1)
            };
            let contract: Vec<f64> = centroid
                .iter()
                .zip(point.iter())
                .map(|(c, p)| c + gamma * (p - c))
                .collect();
            let fc = eval(&contract, &mut evals);
            if fc < bound {
                simplex[n] = (contract, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let shrunk: Vec<f64> = best
                        .iter()
                        .zip(entry.0.iter())
                        .map(|(b, x)| b + delta * (x - b))
                        .collect();
                    let fs = eval(&shrunk, &mut evals);
                    *entry = (shrunk, fs);
                    if evals >= max_evals {
                        break;
                    }
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    (simplex[0].0.clone(), simplex[0].1, evals)
}

fn build_circuit(
    layout: &SpaceLayout,
    params: &[f64],
    layers: &[(usize, Complex64, usize)],
    durations: &GateDurations,
) -> Circuit {
    let modes = layout.subsystem_count();
    let mut circuit = Circuit::new(layout.clone(), "encode");
    for (chunk, &(mode, dir, _)) in params.chunks(3).zip(layers.iter()) {
        circuit.steps.push(GateStep::new(
            GateKind::AuxRotation {
                theta: chunk[0],
                phi: chunk[1],
            },
            durations.aux_rotation,
        ));
        let mut alpha_vector = vec![Complex64::new(0.0, 0.0); modes];
        alpha_vector[mode] = dir * chunk[2];
        circuit.steps.push(GateStep::new(
            GateKind::Ecd { alpha_vector },
            durations.ecd,
        ));
    }
    circuit
}

/// Synthesize a circuit preparing an arbitrary oscillator state from vacuum.
pub fn encode_state(
    target: &QuantumState,
    depth: usize,
    options: &EncodeOptions,
    durations: &GateDurations,
) -> Result<EncodeResult, CircuitError> {
    if depth > MAX_ENCODE_DEPTH {
        return Err(CircuitError::DepthTooLarge {
            depth,
            max: MAX_ENCODE_DEPTH,
        });
    }
    let layout = target.layout().clone();
    let ansatz = Ansatz::build(target, depth)?;
    if depth == 0 {
        let fidelity = ansatz.fidelity(&[]);
        return Ok(EncodeResult {
            circuit: Circuit::new(layout, "encode"),
            fidelity,
            reached_target: fidelity >= options.fidelity_target,
            params: Vec::new(),
        });
    }

    let n = 3 * depth;
    let mut rng = ChaCha12Rng::seed_from_u64(options.seed);
    let restarts = options.restarts.max(1);
    let per_start = (options.budget / restarts).max(20 * n);
    let mut best_params: Vec<f64> = Vec::new();
    let mut best_loss = f64::INFINITY;
    for start in 0..restarts {
        let x0: Vec<f64> = if start == 0 {
            (0..depth)
                .flat_map(|j| {
                    let theta = if j == 0 { PI } else { FRAC_PI_2 };
                    let b = if j % 2 == 0 { 0.8 } else { -0.8 };
                    [theta, 0.0, b]
                })
                .collect()
        } else {
            (0..depth)
                .flat_map(|_| {
                    [
                        rng.random::<f64>() * PI,
                        (rng.random::<f64>() - 0.5) * 2.0 * PI,
                        (rng.random::<f64>() - 0.5) * 5.0,
                    ]
                })
                .collect()
        };
        let steps: Vec<f64> = (0..depth).flat_map(|_| [0.6, 0.7, 0.5]).collect();
        let mut objective = |x: &[f64]| 1.0 - ansatz.fidelity(x);
        let (params, loss, _) = nelder_mead(&mut objective, &x0, &steps, per_start);
        if loss < best_loss {
            best_loss = loss;
            best_params = params;
        }
        if 1.0 - best_loss >= options.fidelity_target + 0.01 {
            break;
        }
    }
    let fidelity = 1.0 - best_loss;
    Ok(EncodeResult {
        circuit: build_circuit(&layout, &best_params, &ansatz.layers, durations),
        fidelity,
        reached_target: fidelity >= options.fidelity_target,
        params: best_params,
    })
}

/// The chosen logical state as a normalized oscillator vector.
pub fn logical_state(
    words: &CodeWords,
    target: LogicalTarget,
) -> Result<QuantumState, CircuitError> {
    let zero = words.ket_zero.amplitudes();
    let one = words.ket_one.amplitudes();
    let i = Complex64::new(0.0, 1.0);
    let amps: Array1<Complex64> = match target {
        LogicalTarget::Zero => zero.clone(),
        LogicalTarget::One => one.clone(),
        LogicalTarget::Plus => zero + one,
        LogicalTarget::Minus => zero - one,
        LogicalTarget::PlusI => zero + &one.mapv(|z| z * i),
        LogicalTarget::MinusI => zero - &one.mapv(|z| z * i),
    };
    let mut state = QuantumState::new(words.ket_zero.layout().clone(), amps)?;
    state.normalize()?;
    Ok(state)
}

/// Synthesize a preparation circuit for a logical state of the given code
/// words.
pub fn encode_logical(
    words: &CodeWords,
    target: LogicalTarget,
    depth: usize,
    options: &EncodeOptions,
    durations: &GateDurations,
) -> Result<EncodeResult, CircuitError> {
    let state = logical_state(words, target)?;
    encode_state(&state, depth, options, durations)
}
