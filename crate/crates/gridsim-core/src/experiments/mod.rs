//! Reproducible experiment harnesses built on the code, circuit, and noise
//! layers: characteristic-function scans, logical-lifetime estimation against
//! an idle reference, paired common-random-number injection ensembles, and
//! post-selection analysis of syndrome outcome streams.
//!
//! Every harness is a pure function of its configuration and seed. Trajectory
//! ensembles parallelize over shots with per-trajectory counter streams
//! derived from the shared seed, and all aggregation runs sequentially in
//! trajectory order with compensated summation, so results are bit-identical
//! regardless of worker count.

use ndarray::Array1;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuits::{
    gauge_update, idle_round, oscillator_part, sbs_frame_flip, sbs_round, with_aux_ground,
    Circuit, CircuitError, CompiledCircuit, DensityCircuit, GateDurations, PauliFrame, SbsTrace,
    SBS_BIG_STEP,
};
use crate::codes::{
    complex_pairs, construct_codewords, dress_finite_energy, logical_overlaps, CodeError,
    CodeSpec, CodeWords, DressedOperator, Pauli,
};
use crate::fock::{
    annihilation, eigh, embed, expectation_density, partial_trace, DensityMatrix, FockError,
    QuantumState, SpaceLayout,
};
use crate::noise::{inject_error, ErrorInjection, InjectionKind, NoiseError, NoiseModel};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Fock(#[from] FockError),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("a single oscillator mode is required, got {got} subsystems; take the reduced state first")]
    SingleModeRequired { got: usize },
    #[error("{name}: {message}")]
    BadParameter { name: &'static str, message: String },
    #[error("state annihilated by {context}")]
    StateAnnihilated { context: &'static str },
    #[error("decay fit failed: {reason}")]
    FitFailed { reason: String, series: Vec<f64> },
}

fn bad(name: &'static str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::BadParameter {
        name,
        message: message.into(),
    }
}

/// Per-trajectory generator: one shared seed, the trajectory index selecting
/// a counter stream. Streams are statistically independent, cheap to derive,
/// and stable under parallel scheduling, and paired experiment arms reusing a
/// stream consume identical randomness for common-random-number pairing.
pub fn trajectory_rng(seed: u64, trajectory: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(trajectory);
    rng
}

/// Neumaier-compensated sum, immune to cancellation across long series.
fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

// ---------------------------------------------------------------------------
// Characteristic-function scan
// ---------------------------------------------------------------------------

/// C(β) = ⟨D(β)⟩ sampled over a set of phase-space points, with a per-point
/// truncation diagnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharacteristicScan {
    #[serde(with = "complex_pairs")]
    pub betas: Vec<Complex64>,
    #[serde(with = "complex_pairs")]
    pub values: Vec<Complex64>,
    /// True where the displaced state keeps negligible weight near the Fock
    /// cutoff, so the reported value is trustworthy. Truncating the
    /// displacement generator keeps it skew-Hermitian, so no norm is ever
    /// lost; mass that should cross the cutoff reflects back instead, and
    /// occupation of the top Fock band is the honest truncation alarm.
    pub valid: Vec<bool>,
}

const SCAN_EDGE_TOL: f64 = 1e-8;

/// Weight in the top eighth (at least two levels) of the Fock ladder.
fn cutoff_band_weight(v: &Array1<Complex64>) -> f64 {
    let dim = v.len();
    let band = (dim / 8).max(2).min(dim);
    v.iter().skip(dim - band).map(|z| z.norm_sqr()).sum()
}

/// Scan the characteristic function of a single-mode pure state.
///
/// Each point applies D(β) to the state vector directly: the generator
/// βa† − β*a is bidiagonal, so the exponential acts through repeated short
/// Taylor steps in O(dim) per step, never forming a dense matrix. Points are
/// independent and evaluated in parallel.
pub fn characteristic_function_scan(
    state: &QuantumState,
    betas: &[Complex64],
) -> Result<CharacteristicScan, ExperimentError> {
    let dims = state.layout().dims();
    if dims.len() != 1 {
        return Err(ExperimentError::SingleModeRequired { got: dims.len() });
    }
    let amps = state.amplitudes();
    let points: Vec<(Complex64, bool)> = betas
        .par_iter()
        .map(|&beta| {
            let displaced = displaced_vector(amps, beta);
            let value: Complex64 = amps
                .iter()
                .zip(displaced.iter())
                .map(|(a, d)| a.conj() * d)
                .sum();
            (value, cutoff_band_weight(&displaced) <= SCAN_EDGE_TOL)
        })
        .collect();
    Ok(CharacteristicScan {
        betas: betas.to_vec(),
        values: points.iter().map(|p| p.0).collect(),
        valid: points.iter().map(|p| p.1).collect(),
    })
}

/// Scan the characteristic function of a single-mode density matrix through
/// its spectral decomposition: C(β) = Σ_k λ_k ⟨v_k|D(β)|v_k⟩. Eigenvalues
/// below 1e-12 are dropped; they cannot move C(β) at the reported precision.
pub fn characteristic_function_scan_density(
    rho: &DensityMatrix,
    betas: &[Complex64],
) -> Result<CharacteristicScan, ExperimentError> {
    let dims = rho.layout().dims();
    if dims.len() != 1 {
        return Err(ExperimentError::SingleModeRequired { got: dims.len() });
    }
    let (vals, vecs) = eigh(rho.matrix());
    let mut components: Vec<(f64, Array1<Complex64>)> = Vec::new();
    for (k, &lambda) in vals.iter().enumerate() {
        if lambda > 1e-12 {
            components.push((lambda, vecs.column(k).to_owned()));
        }
    }
    let points: Vec<(Complex64, bool)> = betas
        .par_iter()
        .map(|&beta| {
            let mut value = Complex64::new(0.0, 0.0);
            let mut edge = 0.0;
            for (lambda, v) in &components {
                let displaced = displaced_vector(v, beta);
                edge += lambda * cutoff_band_weight(&displaced);
                value += Complex64::new(*lambda, 0.0)
                    * v.iter()
                        .zip(displaced.iter())
                        .map(|(a, d)| a.conj() * d)
                        .sum::<Complex64>();
            }
            (value, edge <= SCAN_EDGE_TOL)
        })
        .collect();
    Ok(CharacteristicScan {
        betas: betas.to_vec(),
        values: points.iter().map(|p| p.0).collect(),
        valid: points.iter().map(|p| p.1).collect(),
    })
}

/// e^{βa† − β*a} v on a truncated Fock vector. The generator is split into
/// 2^s short steps with spectral radius below 1/2, each summed by a Taylor
/// series to machine precision.
fn displaced_vector(v: &Array1<Complex64>, beta: Complex64) -> Array1<Complex64> {
    let dim = v.len();
    if beta.norm_sqr() == 0.0 || dim == 0 {
        return v.clone();
    }
    let sq: Vec<f64> = (0..=dim).map(|n| (n as f64).sqrt()).collect();
    let bound = 2.0 * beta.norm() * (dim as f64).sqrt();
    let halvings = (bound.log2().ceil().max(0.0) as u32 + 1).min(24);
    let steps = 1u64 << halvings;
    let scale = 1.0 / steps as f64;
    let b = beta * scale;
    let bc = beta.conj() * scale;
    let mut out = v.clone();
    let mut term = Array1::<Complex64>::zeros(dim);
    let mut next = Array1::<Complex64>::zeros(dim);
    for _ in 0..steps {
        let mut acc = out.clone();
        term.assign(&out);
        for k in 1..=48u64 {
            let inv_k = 1.0 / k as f64;
            for n in 0..dim {
                let mut z = Complex64::new(0.0, 0.0);
                if n > 0 {
                    z += b * sq[n] * term[n - 1];
                }
                if n + 1 < dim {
                    z -= bc * sq[n + 1] * term[n + 1];
                }
                next[n] = z * inv_k;
            }
            std::mem::swap(&mut term, &mut next);
            for n in 0..dim {
                acc[n] += term[n];
            }
            let term_sq: f64 = term.iter().map(|z| z.norm_sqr()).sum();
            if term_sq < 1e-34 {
                break;
            }
        }
        out = acc;
    }
    out
}

// ---------------------------------------------------------------------------
// Logical lifetime
// ---------------------------------------------------------------------------

/// How the open-system evolution is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EvolutionMode {
    /// Exact outcome-averaged density-matrix propagation (single-threaded,
    /// only sensible for modest Hilbert spaces).
    Density,
    /// Monte-Carlo pure-state trajectories with sampled outcomes and jumps.
    Trajectories { shots: usize },
}

/// Whether the rounds actively stabilize or just wait out the same duration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LifetimeArm {
    Protected,
    Idle,
}

/// Outcome class of the exponential fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Decaying,
    /// The series did not decay over the simulated span. Reported instead of
    /// a decay time when the evolution is noiseless, where any fitted slope
    /// is numerical residue.
    NonDecaying,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LifetimeResult {
    pub pauli: String,
    pub arm: LifetimeArm,
    /// Fitted decay time in seconds; `None` when no decay was measurable.
    pub t_logical: Option<f64>,
    pub t_logical_stderr: Option<f64>,
    /// Reference lifetime 1/κ of the best unprotected constituent, a Fock
    /// {0,1} qubit whose amplitude damping time is exactly 1/κ. `None` when
    /// the run is noiseless.
    pub t_ref: Option<f64>,
    /// t_logical / t_ref; `None` stands in for an unbounded gain (noiseless
    /// run or non-decaying series).
    pub gain: Option<f64>,
    pub fit: FitStatus,
    /// Signed ⟨P_Δ⟩ after each round, the software Pauli frame already
    /// absorbed into the sign.
    pub series: Vec<f64>,
    /// Per-round standard error of the mean (trajectory mode only).
    pub series_stderr: Option<Vec<f64>>,
    pub round_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LifetimeConfig {
    pub pauli: Pauli,
    pub dim_per_mode: usize,
    pub rounds: usize,
    pub mode: EvolutionMode,
    pub arm: LifetimeArm,
    pub seed: u64,
    /// Rounds dropped from the head of the series before fitting, covering
    /// the relaxation onto the stabilized manifold.
    pub transient_skip: usize,
    pub durations: GateDurations,
}

/// Track a logical Pauli expectation through repeated stabilization (or
/// idle) rounds under the given noise and fit an exponential decay time.
///
/// The state starts in the +1 eigenstate of the chosen logical. Each round
/// updates the software Pauli frame with the round's deterministic logical
/// action, and the recorded series carries the resulting sign, so a clean
/// run yields a smooth positive decay. The fit runs least squares in the log
/// domain over the positive entries past the transient.
pub fn logical_lifetime(
    code: &CodeSpec,
    noise: &NoiseModel,
    cfg: &LifetimeConfig,
) -> Result<LifetimeResult, ExperimentError> {
    if cfg.rounds == 0 {
        return Err(bad("rounds", "at least one round is required"));
    }
    noise.validate()?;
    let layout = SpaceLayout::new(vec![cfg.dim_per_mode; code.mode_count])?;
    let words = construct_codewords(code, &layout)?;
    let psi0 = plus_eigenstate(&words, cfg.pauli)?;
    let n_stab = code.stabilizers.len();

    let (circuits, flips): (Vec<Circuit>, Vec<Vec<crate::circuits::FrameGate>>) = match cfg.arm {
        LifetimeArm::Protected => {
            let mut cs = Vec::with_capacity(n_stab);
            let mut fs = Vec::with_capacity(n_stab);
            for k in 0..n_stab {
                cs.push(sbs_round(code, k, &layout, &cfg.durations)?);
                fs.push(sbs_frame_flip(code, k));
            }
            (cs, fs)
        }
        LifetimeArm::Idle => {
            let probe = sbs_round(code, 0, &layout, &cfg.durations)?;
            (vec![idle_round(&layout, probe.duration())], vec![Vec::new()])
        }
    };
    let round_time = circuits[0].duration();

    // The sign each round's recorded expectation carries once the frame has
    // absorbed every flip up to and including that round.
    let mut signs = Vec::with_capacity(cfg.rounds);
    let mut frame = PauliFrame::identity(code.mode_count);
    for r in 0..cfg.rounds {
        for &gate in &flips[r % circuits.len()] {
            frame = gauge_update(&frame, gate);
        }
        signs.push(if frame.readout_flip(cfg.pauli) { -1.0 } else { 1.0 });
    }

    let quiet = noise.is_quiet();
    let noise_opt = (!quiet).then_some(noise);
    let (series, series_stderr) = match cfg.mode {
        EvolutionMode::Density => {
            let op = dress_finite_energy(code.logical(cfg.pauli), code.delta, &layout)?;
            let keep: Vec<usize> = (0..code.mode_count).collect();
            let compiled: Vec<DensityCircuit> = circuits
                .iter()
                .map(|c| DensityCircuit::new(c, noise_opt))
                .collect::<Result<_, _>>()?;
            let mut rho = with_aux_ground(&psi0).to_density();
            let mut series = Vec::with_capacity(cfg.rounds);
            for r in 0..cfg.rounds {
                let (next, _p1s) = compiled[r % compiled.len()].run(&rho)?;
                rho = next;
                let osc = partial_trace(&rho, &keep)?;
                series.push(signs[r] * expectation_density(&op, &osc)?.re);
            }
            (series, None)
        }
        EvolutionMode::Trajectories { shots } => {
            if shots == 0 {
                return Err(bad("shots", "at least one trajectory is required"));
            }
            let compiled: Vec<CompiledCircuit> = circuits
                .iter()
                .map(|c| CompiledCircuit::new(c, noise_opt))
                .collect::<Result<_, _>>()?;
            let full_dims = layout.with_aux();
            let dressed =
                DressedOperator::new(code.logical(cfg.pauli), code.delta, full_dims.dims())?;
            let start = with_aux_ground(&psi0);
            let per_traj: Vec<Result<Vec<f64>, ExperimentError>> = (0..shots)
                .into_par_iter()
                .map(|k| {
                    let mut rng = trajectory_rng(cfg.seed, k as u64);
                    let mut trace = SbsTrace::default();
                    let mut state = start.clone();
                    let mut values = Vec::with_capacity(cfg.rounds);
                    for r in 0..cfg.rounds {
                        state = compiled[r % compiled.len()].run_pure(
                            &state, &mut rng, r, &mut trace,
                        )?;
                        values.push(signs[r] * dressed.expectation(&state)?.re);
                    }
                    Ok(values)
                })
                .collect();
            let mut all = Vec::with_capacity(shots);
            for t in per_traj {
                all.push(t?);
            }
            let mut series = Vec::with_capacity(cfg.rounds);
            let mut stderr = Vec::with_capacity(cfg.rounds);
            for r in 0..cfg.rounds {
                let m = compensated_sum(all.iter().map(|t| t[r])) / shots as f64;
                series.push(m);
                let var = if shots > 1 {
                    compensated_sum(all.iter().map(|t| (t[r] - m) * (t[r] - m)))
                        / (shots - 1) as f64
                } else {
                    0.0
                };
                stderr.push((var / shots as f64).sqrt());
            }
            (series, Some(stderr))
        }
    };

    let fitted = fit_log_decay(round_time, &series, cfg.transient_skip)?;
    let (t_logical, t_logical_stderr, fit) = match fitted {
        FitOutcome::Decaying { t, stderr } => (Some(t), Some(stderr), FitStatus::Decaying),
        FitOutcome::NonDecaying => {
            if quiet {
                (None, None, FitStatus::NonDecaying)
            } else {
                return Err(ExperimentError::FitFailed {
                    reason: "series does not decay under nonzero noise".into(),
                    series,
                });
            }
        }
    };
    let t_ref = (noise.kappa > 0.0).then(|| 1.0 / noise.kappa);
    let gain = match (t_logical, t_ref) {
        (Some(t), Some(tr)) => Some(t / tr),
        _ => None,
    };
    Ok(LifetimeResult {
        pauli: pauli_label(cfg.pauli).into(),
        arm: cfg.arm,
        t_logical,
        t_logical_stderr,
        t_ref,
        gain,
        fit,
        series,
        series_stderr,
        round_time,
    })
}

fn pauli_label(pauli: Pauli) -> &'static str {
    match pauli {
        Pauli::X => "X",
        Pauli::Z => "Z",
    }
}

/// Normalized +1 eigenstate of the chosen logical within the code space.
fn plus_eigenstate(words: &CodeWords, pauli: Pauli) -> Result<QuantumState, ExperimentError> {
    match pauli {
        Pauli::Z => Ok(words.ket_zero.clone()),
        Pauli::X => {
            let n = words.ket_zero.amplitudes().len();
            let mut amps = Array1::<Complex64>::zeros(n);
            for i in 0..n {
                amps[i] = words.ket_zero.amplitudes()[i] + words.ket_one.amplitudes()[i];
            }
            let mut state = QuantumState::new(words.ket_zero.layout().clone(), amps)?;
            state.normalize()?;
            Ok(state)
        }
    }
}

#[derive(Debug)]
enum FitOutcome {
    Decaying { t: f64, stderr: f64 },
    NonDecaying,
}

/// Least squares for ln y = ln A − t/T over the positive series entries past
/// the transient. Times enter as (round+1)·round_time, so scaling the round
/// time by c scales the fitted T by exactly c.
fn fit_log_decay(
    round_time: f64,
    series: &[f64],
    transient_skip: usize,
) -> Result<FitOutcome, ExperimentError> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .enumerate()
        .skip(transient_skip)
        .filter(|(_, &y)| y > 0.0)
        .map(|(r, &y)| ((r + 1) as f64, y.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(ExperimentError::FitFailed {
            reason: format!(
                "only {} positive points past the transient, need at least 2",
                pts.len()
            ),
            series: series.to_vec(),
        });
    }
    let n = pts.len() as f64;
    let xbar = compensated_sum(pts.iter().map(|p| p.0)) / n;
    let ybar = compensated_sum(pts.iter().map(|p| p.1)) / n;
    let sxx = compensated_sum(pts.iter().map(|p| (p.0 - xbar) * (p.0 - xbar)));
    let sxy = compensated_sum(pts.iter().map(|p| (p.0 - xbar) * (p.1 - ybar)));
    let slope_rounds = sxy / sxx;
    if !slope_rounds.is_finite() || slope_rounds >= 0.0 {
        return Ok(FitOutcome::NonDecaying);
    }
    let resid_sq = compensated_sum(
        pts.iter()
            .map(|p| {
                let e = p.1 - ybar - slope_rounds * (p.0 - xbar);
                e * e
            }),
    );
    let slope_var = if pts.len() > 2 {
        resid_sq / (n - 2.0) / sxx
    } else {
        0.0
    };
    // T in seconds: slope per round divided by the round time. Dividing at
    // the end keeps the c-scaling of round_time exact in floating point.
    let t = -1.0 / slope_rounds * round_time;
    let stderr = slope_var.sqrt() / (slope_rounds * slope_rounds) * round_time;
    Ok(FitOutcome::Decaying { t, stderr })
}

// ---------------------------------------------------------------------------
// Paired injection ensembles
// ---------------------------------------------------------------------------

/// Outcome statistics of one experimental condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignatureResult {
    /// "baseline" or "injected".
    pub condition: String,
    /// Fraction of trajectories reporting outcome 1, per round.
    pub one_frequencies: Vec<f64>,
    /// Fraction of trajectories whose final ideally-decoded word disagrees
    /// with the ensemble reference word.
    pub logical_flip_probability: f64,
    /// Largest absolute standardized deviation of this condition's "1"
    /// frequency from its paired baseline over the detection window (0 for
    /// the baseline itself).
    pub detection_statistic: f64,
    /// Fraction of trajectories with at least one "1" inside the detection
    /// window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_one_probability: Option<f64>,
    /// Mean squared overlap with the reference codeword at the end of the
    /// run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery_fidelity: Option<f64>,
}

/// One trajectory's syndrome stream plus whether its ideal decode matched
/// the ensemble reference word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryVerdict {
    pub outcomes: Vec<u8>,
    pub correct: bool,
}

/// Shared knobs of the paired trajectory ensembles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub dim_per_mode: usize,
    pub rounds: usize,
    pub shots: usize,
    pub seed: u64,
    /// Length of the post-disturbance detection window, in rounds.
    pub window: usize,
    pub durations: GateDurations,
}

/// The single deterministic disturbance applied to the disturbed arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Disturbance {
    /// Auxiliary relaxation jump partway through the Big conditional
    /// displacement of the given round.
    AuxiliaryDecay { round: usize, fraction: f64 },
    /// Normalized annihilation operator applied to the first mode at the
    /// boundary before the given round.
    PhotonLoss { round: usize },
}

impl Disturbance {
    pub fn round(&self) -> usize {
        match *self {
            Disturbance::AuxiliaryDecay { round, .. } => round,
            Disturbance::PhotonLoss { round } => round,
        }
    }

    /// First round of the detection window. A photon loss happens at the
    /// boundary before its round, so that round's syndrome can already see
    /// it. An auxiliary decay happens inside its round's readout and
    /// scrambles that one outcome regardless of what the oscillator took
    /// from the jump, so the window watching for oscillator damage starts
    /// at the next round.
    pub fn window_start(&self) -> usize {
        match *self {
            Disturbance::AuxiliaryDecay { round, .. } => round + 1,
            Disturbance::PhotonLoss { round } => round,
        }
    }
}

/// Full per-trajectory record of one paired run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmData {
    pub condition: String,
    pub one_frequencies: Vec<f64>,
    pub window_one_probability: f64,
    pub logical_flip_probability: f64,
    /// Mean squared overlap of the final oscillator state with the
    /// ensemble's reference codeword.
    pub word_fidelity: f64,
    pub verdicts: Vec<TrajectoryVerdict>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedRun {
    pub baseline: ArmData,
    pub disturbed: ArmData,
    /// Codeword the baseline ensemble decodes to by majority. The round-robin
    /// masks apply a deterministic logical action (and, for the tesseract,
    /// walk through stabilizer sign sectors), so the undisturbed final word
    /// is itself a protocol output; flips are counted against it.
    pub reference_word: usize,
    /// max_r |z_r| over the detection window, where z_r standardizes the
    /// frequency difference with the pooled binomial error.
    pub detection_statistic: f64,
}

struct TrajectoryShot {
    outcomes: Vec<u8>,
    word: usize,
    overlaps: [f64; 2],
}

/// Run baseline and disturbed trajectory ensembles with shared per-stream
/// randomness. Both arms draw the same measurement randomness per trajectory
/// index, so the baseline arm is bit-identical between runs and the two arms
/// coincide exactly up to the disturbance point.
pub fn paired_disturbance_run(
    code: &CodeSpec,
    cfg: &EnsembleConfig,
    disturbance: &Disturbance,
) -> Result<PairedRun, ExperimentError> {
    if cfg.shots == 0 {
        return Err(bad("shots", "at least one trajectory is required"));
    }
    if cfg.rounds == 0 {
        return Err(bad("rounds", "at least one round is required"));
    }
    if disturbance.round() >= cfg.rounds {
        return Err(bad(
            "disturbance.round",
            format!("round {} outside run of {} rounds", disturbance.round(), cfg.rounds),
        ));
    }
    if let Disturbance::AuxiliaryDecay { fraction, .. } = disturbance {
        if !(0.0..=1.0).contains(fraction) {
            return Err(bad("disturbance.fraction", "must lie in [0, 1]"));
        }
    }
    let layout = SpaceLayout::new(vec![cfg.dim_per_mode; code.mode_count])?;
    let words = construct_codewords(code, &layout)?;
    let psi0 = with_aux_ground(&words.ket_zero);
    let n_stab = code.stabilizers.len();
    let mut compiled = Vec::with_capacity(n_stab);
    for k in 0..n_stab {
        compiled.push(CompiledCircuit::new(
            &sbs_round(code, k, &layout, &cfg.durations)?,
            None,
        )?);
    }
    let injected = match disturbance {
        Disturbance::AuxiliaryDecay { round, fraction } => {
            let base = sbs_round(code, round % n_stab, &layout, &cfg.durations)?;
            let injection = ErrorInjection {
                step_index: SBS_BIG_STEP,
                fraction: *fraction,
                kind: InjectionKind::AuxiliaryDecay,
            };
            Some(CompiledCircuit::new(&inject_error(&base, &injection)?, None)?)
        }
        Disturbance::PhotonLoss { .. } => None,
    };
    let loss_op = match disturbance {
        Disturbance::PhotonLoss { .. } => Some(embed(
            &annihilation(cfg.dim_per_mode)?,
            0,
            &layout.with_aux(),
        )?),
        _ => None,
    };

    let run_arm = |disturb: bool| -> Result<Vec<TrajectoryShot>, ExperimentError> {
        let shots: Vec<Result<TrajectoryShot, ExperimentError>> = (0..cfg.shots)
            .into_par_iter()
            .map(|k| {
                let mut rng = trajectory_rng(cfg.seed, k as u64);
                let mut trace = SbsTrace::default();
                let mut state = psi0.clone();
                for r in 0..cfg.rounds {
                    if disturb && r == disturbance.round() {
                        if let Some(op) = &loss_op {
                            state = normalized_jump(op.matrix(), &state)?;
                        }
                    }
                    let circuit = match (&injected, disturb && r == disturbance.round()) {
                        (Some(inj), true) => inj,
                        _ => &compiled[r % n_stab],
                    };
                    state = circuit.run_pure(&state, &mut rng, r, &mut trace)?;
                }
                let osc = oscillator_part(&state)?;
                let (c0, c1) = logical_overlaps(&words, &osc);
                Ok(TrajectoryShot {
                    outcomes: trace.outcomes(),
                    word: usize::from(c1.norm_sqr() > c0.norm_sqr()),
                    overlaps: [c0.norm_sqr(), c1.norm_sqr()],
                })
            })
            .collect();
        let mut out = Vec::with_capacity(cfg.shots);
        for s in shots {
            out.push(s?);
        }
        Ok(out)
    };

    let base_shots = run_arm(false)?;
    let dist_shots = run_arm(true)?;
    let ones = base_shots.iter().filter(|s| s.word == 1).count();
    let reference_word = usize::from(2 * ones > base_shots.len());

    let window_range = {
        let start = disturbance.window_start();
        let end = (start + cfg.window).min(cfg.rounds);
        start..end
    };
    let aggregate = |condition: &str, shots: &[TrajectoryShot]| -> ArmData {
        let n = shots.len() as f64;
        let one_frequencies: Vec<f64> = (0..cfg.rounds)
            .map(|r| {
                compensated_sum(shots.iter().map(|s| f64::from(s.outcomes[r]))) / n
            })
            .collect();
        let window_hits = shots
            .iter()
            .filter(|s| window_range.clone().any(|r| s.outcomes[r] == 1))
            .count();
        let flips = shots.iter().filter(|s| s.word != reference_word).count();
        let word_fidelity =
            compensated_sum(shots.iter().map(|s| s.overlaps[reference_word])) / n;
        ArmData {
            condition: condition.into(),
            one_frequencies,
            window_one_probability: window_hits as f64 / n,
            logical_flip_probability: flips as f64 / n,
            word_fidelity,
            verdicts: shots
                .iter()
                .map(|s| TrajectoryVerdict {
                    outcomes: s.outcomes.clone(),
                    correct: s.word == reference_word,
                })
                .collect(),
        }
    };
    let baseline = aggregate("baseline", &base_shots);
    let disturbed = aggregate("injected", &dist_shots);

    let n = cfg.shots as f64;
    let mut detection: f64 = 0.0;
    for r in window_range {
        let z = standardized_difference(
            disturbed.one_frequencies[r],
            baseline.one_frequencies[r],
            n,
        );
        detection = detection.max(z.abs());
    }
    Ok(PairedRun {
        baseline,
        disturbed,
        reference_word,
        detection_statistic: detection,
    })
}

/// (f_a − f_b) / SE with the pooled binomial standard error at n shots per
/// arm. Zero when both frequencies sit on the same saturated value, where
/// the pooled error degenerates.
fn standardized_difference(f_a: f64, f_b: f64, n: f64) -> f64 {
    let pooled = (f_a + f_b) / 2.0;
    let var = pooled * (1.0 - pooled) * 2.0 / n;
    if var <= 0.0 {
        return 0.0;
    }
    (f_a - f_b) / var.sqrt()
}

fn normalized_jump(
    op: &ndarray::Array2<Complex64>,
    state: &QuantumState,
) -> Result<QuantumState, ExperimentError> {
    let amps = op.dot(state.amplitudes());
    let norm_sq: f64 = amps.iter().map(|z| z.norm_sqr()).sum();
    if norm_sq < 1e-24 {
        return Err(ExperimentError::StateAnnihilated {
            context: "photon-loss jump",
        });
    }
    let mut next = QuantumState::new(state.layout().clone(), amps)?;
    next.normalize()?;
    Ok(next)
}

fn signature_of(arm: &ArmData, detection_statistic: f64) -> SignatureResult {
    SignatureResult {
        condition: arm.condition.clone(),
        one_frequencies: arm.one_frequencies.clone(),
        logical_flip_probability: arm.logical_flip_probability,
        detection_statistic,
        window_one_probability: Some(arm.window_one_probability),
        recovery_fidelity: Some(arm.word_fidelity),
    }
}

/// Paired ensembles with and without an auxiliary-decay jump partway through
/// the Big conditional displacement of the chosen round.
///
/// The mid-gate decay strands the oscillator halfway along the stabilizer
/// translation. On the square GKP code that residue is a logical operator,
/// so the syndrome stream stays silent while the word flips; on the
/// tesseract the same residue anticommutes with other stabilizers and the
/// following rounds flag it.
pub fn isthmus_experiment(
    code: &CodeSpec,
    cfg: &EnsembleConfig,
    injection_round: usize,
    injection_fraction: f64,
) -> Result<(SignatureResult, SignatureResult), ExperimentError> {
    let run = paired_disturbance_run(
        code,
        cfg,
        &Disturbance::AuxiliaryDecay {
            round: injection_round,
            fraction: injection_fraction,
        },
    )?;
    Ok((
        signature_of(&run.baseline, 0.0),
        signature_of(&run.disturbed, run.detection_statistic),
    ))
}

/// A photon-loss probe's full output: both arms plus the disturbed arm's
/// per-trajectory verdicts for downstream post-selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhotonLossOutcome {
    pub baseline: SignatureResult,
    pub injected: SignatureResult,
    pub verdicts: Vec<TrajectoryVerdict>,
}

/// Paired ensembles with and without one normalized â applied at a round
/// boundary. A single loss displaces the word off the grid by half a
/// lattice step in disguise: the next few syndrome rounds report "1" with
/// strongly elevated probability while the stabilization walks the state
/// back, after which the word fidelity recovers.
pub fn photon_loss_signature(
    code: &CodeSpec,
    cfg: &EnsembleConfig,
    loss_round: usize,
) -> Result<PhotonLossOutcome, ExperimentError> {
    let run = paired_disturbance_run(code, cfg, &Disturbance::PhotonLoss { round: loss_round })?;
    Ok(PhotonLossOutcome {
        baseline: signature_of(&run.baseline, 0.0),
        injected: signature_of(&run.disturbed, run.detection_statistic),
        verdicts: run.disturbed.verdicts,
    })
}

// ---------------------------------------------------------------------------
// Post-selection
// ---------------------------------------------------------------------------

/// How trajectories are discarded based on their syndrome stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum PostSelectionStrategy {
    /// Discard a trajectory as soon as it reports a single "1".
    ErasureLimit,
    /// Discard when any contiguous window of `window` rounds contains at
    /// least `threshold` ones.
    WindowThreshold { window: usize, threshold: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostSelectionReport {
    pub strategy: PostSelectionStrategy,
    pub retained_fraction: f64,
    /// Fraction of retained trajectories whose decode was correct; `None`
    /// when nothing was retained.
    pub conditional_fidelity: Option<f64>,
    pub unconditional_fidelity: f64,
    /// Set when the strategy retained nothing, making the conditional
    /// fidelity undefined.
    pub degenerate: bool,
}

/// Evaluate a post-selection strategy against trajectories with known
/// ground-truth decodes.
pub fn post_selection_analysis(
    verdicts: &[TrajectoryVerdict],
    strategy: PostSelectionStrategy,
) -> Result<PostSelectionReport, ExperimentError> {
    if verdicts.is_empty() {
        return Err(bad("verdicts", "empty ensemble"));
    }
    if let PostSelectionStrategy::WindowThreshold { window, threshold } = strategy {
        if window == 0 || threshold == 0 {
            return Err(bad(
                "strategy",
                "window and threshold must both be at least 1",
            ));
        }
    }
    let retain = |outcomes: &[u8]| -> bool {
        match strategy {
            PostSelectionStrategy::ErasureLimit => outcomes.iter().all(|&b| b == 0),
            PostSelectionStrategy::WindowThreshold { window, threshold } => {
                let w = window.min(outcomes.len()).max(1);
                !outcomes
                    .windows(w)
                    .any(|win| win.iter().map(|&b| usize::from(b)).sum::<usize>() >= threshold)
            }
        }
    };
    let n = verdicts.len() as f64;
    let unconditional_fidelity = verdicts.iter().filter(|v| v.correct).count() as f64 / n;
    let retained: Vec<&TrajectoryVerdict> =
        verdicts.iter().filter(|v| retain(&v.outcomes)).collect();
    let retained_fraction = retained.len() as f64 / n;
    let (conditional_fidelity, degenerate) = if retained.is_empty() {
        (None, true)
    } else {
        let correct = retained.iter().filter(|v| v.correct).count() as f64;
        (Some(correct / retained.len() as f64), false)
    };
    Ok(PostSelectionReport {
        strategy,
        retained_fraction,
        conditional_fidelity,
        unconditional_fidelity,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::gkp_square;
    use approx::assert_abs_diff_eq;
    use rand::RngCore;

    fn coherent(alpha: Complex64, dim: usize) -> QuantumState {
        let layout = SpaceLayout::single_mode(dim);
        let mut amps = Array1::<Complex64>::zeros(dim);
        let mut term = Complex64::new((-alpha.norm_sqr() / 2.0).exp(), 0.0);
        for n in 0..dim {
            amps[n] = term;
            term *= alpha / ((n + 1) as f64).sqrt();
        }
        let mut state = QuantumState::new(layout, amps).unwrap();
        state.normalize().unwrap();
        state
    }

    #[test]
    fn trajectory_rng_streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = {
            let mut rng = trajectory_rng(7, 3);
            (0..4).map(|_| rng.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut rng = trajectory_rng(7, 3);
            (0..4).map(|_| rng.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut rng = trajectory_rng(7, 4);
            (0..4).map(|_| rng.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn compensated_sum_handles_cancellation() {
        let values = [1e16, 1.0, -1e16, 1.0];
        assert_abs_diff_eq!(compensated_sum(values), 2.0);
    }

    #[test]
    fn characteristic_function_at_origin_is_one() {
        let state = coherent(Complex64::new(0.7, -0.3), 40);
        let scan =
            characteristic_function_scan(&state, &[Complex64::new(0.0, 0.0)]).unwrap();
        assert_abs_diff_eq!(scan.values[0].re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scan.values[0].im, 0.0, epsilon = 1e-12);
        assert!(scan.valid[0]);
    }

    #[test]
    fn vacuum_scan_matches_gaussian_closed_form() {
        let vacuum = coherent(Complex64::new(0.0, 0.0), 40);
        let betas: Vec<Complex64> = (0..25)
            .map(|k| {
                let t = k as f64 / 24.0;
                Complex64::new(2.4 * t - 1.2, 1.8 * (1.0 - t) - 0.9)
            })
            .collect();
        let scan = characteristic_function_scan(&vacuum, &betas).unwrap();
        for (beta, value) in betas.iter().zip(scan.values.iter()) {
            let expected = (-beta.norm_sqr() / 2.0).exp();
            assert_abs_diff_eq!(value.re, expected, epsilon = 1e-8);
            assert_abs_diff_eq!(value.im, 0.0, epsilon = 1e-8);
        }
        assert!(scan.valid.iter().all(|&v| v));
    }

    #[test]
    fn coherent_scan_matches_closed_form() {
        let alpha = Complex64::new(0.9, 0.4);
        let state = coherent(alpha, 50);
        let betas = [
            Complex64::new(0.5, 0.0),
            Complex64::new(-0.3, 0.8),
            Complex64::new(0.0, -1.1),
        ];
        let scan = characteristic_function_scan(&state, &betas).unwrap();
        for (beta, value) in betas.iter().zip(scan.values.iter()) {
            let expected = (-beta.norm_sqr() / 2.0).exp()
                * (beta * alpha.conj() - beta.conj() * alpha).exp();
            assert_abs_diff_eq!(value.re, expected.re, epsilon = 1e-8);
            assert_abs_diff_eq!(value.im, expected.im, epsilon = 1e-8);
        }
    }

    #[test]
    fn scan_magnitude_bounded_where_valid() {
        let state = coherent(Complex64::new(1.1, -0.6), 48);
        let betas: Vec<Complex64> = (-6..=6)
            .flat_map(|i| (-6..=6).map(move |j| Complex64::new(i as f64 * 0.5, j as f64 * 0.5)))
            .collect();
        let scan = characteristic_function_scan(&state, &betas).unwrap();
        for (value, valid) in scan.values.iter().zip(scan.valid.iter()) {
            if *valid {
                assert!(value.norm() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn scan_flags_points_beyond_truncation() {
        let vacuum = coherent(Complex64::new(0.0, 0.0), 10);
        let scan =
            characteristic_function_scan(&vacuum, &[Complex64::new(4.5, 0.0)]).unwrap();
        assert!(!scan.valid[0]);
    }

    #[test]
    fn density_scan_agrees_with_pure_scan() {
        let state = coherent(Complex64::new(0.6, 0.5), 40);
        let rho = state.to_density();
        let betas = [Complex64::new(0.4, -0.2), Complex64::new(-0.9, 0.1)];
        let pure = characteristic_function_scan(&state, &betas).unwrap();
        let mixed = characteristic_function_scan_density(&rho, &betas).unwrap();
        for (a, b) in pure.values.iter().zip(mixed.values.iter()) {
            assert_abs_diff_eq!(a.re, b.re, epsilon = 1e-9);
            assert_abs_diff_eq!(a.im, b.im, epsilon = 1e-9);
        }
    }

    #[test]
    fn scan_requires_single_mode() {
        let layout = SpaceLayout::new(vec![4, 4]).unwrap();
        let state = QuantumState::vacuum(layout);
        let err = characteristic_function_scan(&state, &[]).unwrap_err();
        assert!(matches!(
            err,
            ExperimentError::SingleModeRequired { got: 2 }
        ));
    }

    #[test]
    fn fit_recovers_exact_exponential() {
        let round_time = 2.5e-6;
        let t_true = 8.0e-4;
        let series: Vec<f64> = (0..40)
            .map(|r| 0.93 * (-((r + 1) as f64) * round_time / t_true).exp())
            .collect();
        match fit_log_decay(round_time, &series, 5).unwrap() {
            FitOutcome::Decaying { t, stderr } => {
                assert_abs_diff_eq!(t, t_true, epsilon = 1e-12);
                assert!(stderr.abs() < 1e-9);
            }
            FitOutcome::NonDecaying => panic!("expected decay"),
        }
    }

    #[test]
    fn fit_is_scale_equivariant() {
        let series: Vec<f64> = (0..30)
            .map(|r| (-((r + 1) as f64) * 0.01).exp())
            .collect();
        let base = match fit_log_decay(1.0e-6, &series, 5).unwrap() {
            FitOutcome::Decaying { t, .. } => t,
            _ => panic!("expected decay"),
        };
        let scaled = match fit_log_decay(2.0 * 1.0e-6, &series, 5).unwrap() {
            FitOutcome::Decaying { t, .. } => t,
            _ => panic!("expected decay"),
        };
        assert_eq!(scaled, 2.0 * base);
    }

    #[test]
    fn fit_reports_non_decaying_series() {
        let flat = vec![0.8; 20];
        assert!(matches!(
            fit_log_decay(1e-6, &flat, 5).unwrap(),
            FitOutcome::NonDecaying
        ));
        let rising: Vec<f64> = (0..20).map(|r| 0.5 + 0.01 * r as f64).collect();
        assert!(matches!(
            fit_log_decay(1e-6, &rising, 5).unwrap(),
            FitOutcome::NonDecaying
        ));
    }

    #[test]
    fn fit_rejects_all_negative_series() {
        let series = vec![-0.2; 12];
        let err = fit_log_decay(1e-6, &series, 5).unwrap_err();
        match err {
            ExperimentError::FitFailed { series: raw, .. } => assert_eq!(raw.len(), 12),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn noiseless_lifetime_reports_unbounded_gain() {
        let code = gkp_square(0.3).unwrap();
        let cfg = LifetimeConfig {
            pauli: Pauli::Z,
            dim_per_mode: 56,
            rounds: 10,
            mode: EvolutionMode::Density,
            arm: LifetimeArm::Protected,
            seed: 11,
            transient_skip: 5,
            durations: GateDurations::default(),
        };
        let result = logical_lifetime(&code, &NoiseModel::default(), &cfg).unwrap();
        assert_eq!(result.series.len(), 10);
        assert!(result.t_ref.is_none());
        assert!(result.gain.is_none());
        if let Some(t) = result.t_logical {
            let simulated = 10.0 * result.round_time;
            assert!(t > simulated, "noiseless decay time {t} vs span {simulated}");
        }
        // The dressed expectation is a similarity transform, not a unitary
        // average, so values may sit slightly above 1.
        assert!(result.series.iter().all(|v| v.abs() <= 1.05));
        assert!(result.series.iter().skip(5).all(|&v| v > 0.9));
    }

    #[test]
    fn post_selection_all_zero_traces_retain_everything() {
        let verdicts: Vec<TrajectoryVerdict> = (0..10)
            .map(|k| TrajectoryVerdict {
                outcomes: vec![0; 6],
                correct: k % 5 != 0,
            })
            .collect();
        let report =
            post_selection_analysis(&verdicts, PostSelectionStrategy::ErasureLimit).unwrap();
        assert_abs_diff_eq!(report.retained_fraction, 1.0);
        assert_eq!(report.conditional_fidelity, Some(report.unconditional_fidelity));
        assert!(!report.degenerate);
    }

    #[test]
    fn post_selection_erasure_limit_filters_marked_trajectories() {
        let verdicts = vec![
            TrajectoryVerdict { outcomes: vec![0, 0, 0], correct: true },
            TrajectoryVerdict { outcomes: vec![0, 1, 0], correct: false },
            TrajectoryVerdict { outcomes: vec![0, 0, 0], correct: true },
            TrajectoryVerdict { outcomes: vec![1, 1, 0], correct: false },
        ];
        let report =
            post_selection_analysis(&verdicts, PostSelectionStrategy::ErasureLimit).unwrap();
        assert_abs_diff_eq!(report.retained_fraction, 0.5);
        assert_eq!(report.conditional_fidelity, Some(1.0));
        assert_abs_diff_eq!(report.unconditional_fidelity, 0.5);
    }

    #[test]
    fn post_selection_window_threshold_uses_sliding_windows() {
        let verdicts = vec![
            // Two ones but never two within any 3-round window: retained.
            TrajectoryVerdict { outcomes: vec![1, 0, 0, 0, 1, 0], correct: true },
            // Two ones inside one window: discarded.
            TrajectoryVerdict { outcomes: vec![0, 1, 1, 0, 0, 0], correct: false },
        ];
        let strategy = PostSelectionStrategy::WindowThreshold { window: 3, threshold: 2 };
        let report = post_selection_analysis(&verdicts, strategy).unwrap();
        assert_abs_diff_eq!(report.retained_fraction, 0.5);
        assert_eq!(report.conditional_fidelity, Some(1.0));
    }

    #[test]
    fn post_selection_flags_degenerate_reports() {
        let verdicts = vec![TrajectoryVerdict { outcomes: vec![1, 1], correct: true }];
        let report =
            post_selection_analysis(&verdicts, PostSelectionStrategy::ErasureLimit).unwrap();
        assert!(report.degenerate);
        assert_eq!(report.conditional_fidelity, None);
        assert_abs_diff_eq!(report.retained_fraction, 0.0);
    }

    #[test]
    fn post_selection_validates_parameters() {
        let verdicts = vec![TrajectoryVerdict { outcomes: vec![0], correct: true }];
        assert!(post_selection_analysis(&[], PostSelectionStrategy::ErasureLimit).is_err());
        assert!(post_selection_analysis(
            &verdicts,
            PostSelectionStrategy::WindowThreshold { window: 0, threshold: 1 }
        )
        .is_err());
    }

    #[test]
    fn standardized_difference_handles_saturated_rates() {
        assert_abs_diff_eq!(standardized_difference(0.0, 0.0, 100.0), 0.0);
        assert_abs_diff_eq!(standardized_difference(1.0, 1.0, 100.0), 0.0);
        assert!(standardized_difference(0.9, 0.1, 100.0) > 5.0);
    }
}
