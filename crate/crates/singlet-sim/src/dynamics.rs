//! The two simulation backends and the steady-state machinery: exact
//! reset-map propagation of the joint NV+nuclei state, the effective
//! nuclei-only Lindblad master equation in superoperator form, and
//! kernel analysis of the resulting Liouvillian.
//!
//! Both backends produce a [`Trajectory`] sampled on the reduced state of
//! the target pair, so downstream consumers never care which backend ran.

use crate::entanglement::{pair_populations, PairObservables};
use crate::error::SimError;
use crate::linalg::{
    all_finite, c64, cr, expm, expm_unitary, general_eig, identity, kron, max_abs,
    min_eigenvalue, partial_trace, solve, unvectorize, vectorize, CMatrix, CVector,
    SubsystemDims,
};
use crate::model::{
    build_full_hamiltonian, build_jump_operators_at, build_local_hamiltonian, gamma_reset,
    perturbative_time_bound, site_operator, DriveParams, NoiseParams, OpKind, SpinSystem,
};

/// Observables are recorded every this many resets unless a caller asks
/// for a different cadence.
pub const DEFAULT_SAMPLE_EVERY: usize = 10;

/// Relative threshold on |lambda| below which a Liouvillian eigenvalue
/// counts as a zero mode.
pub const DEFAULT_ZERO_MODE_RTOL: f64 = 1e-8;

/// Logarithmic-negativity threshold defining the convergence time.
pub const DEFAULT_CONVERGENCE_THRESHOLD: f64 = 0.96;

/// The repeated NV reset cycle: segment duration, reset polarization, NV
/// rotating-frame lifetime, and whether NV relaxation acts already during
/// the coherent segment instead of only through the reset statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ResetProtocol {
    /// Segment duration t_re, seconds.
    pub t_re: f64,
    /// Weight of |-x><-x| in the reset state; the remainder sits on
    /// |+x><+x|. 1 is a perfect reset.
    pub polarization: f64,
    /// NV dressed-state lifetime T1rho, seconds; may be infinite.
    pub t1_rho: f64,
    /// When set, each segment evolves under a joint master equation with
    /// an NV depolarization channel at rate 1/T1rho instead of a unitary.
    pub nv_decay_in_segment: bool,
}

impl ResetProtocol {
    pub fn new(t_re: f64, polarization: f64, t1_rho: f64) -> Result<Self, SimError> {
        gamma_reset(t_re, t1_rho)?;
        if !(0.5..=1.0).contains(&polarization) {
            return Err(SimError::InvalidInput {
                context: "ResetProtocol".into(),
                reason: format!("polarization {polarization} outside [0.5, 1]"),
            });
        }
        Ok(Self {
            t_re,
            polarization,
            t1_rho,
            nv_decay_in_segment: false,
        })
    }

    pub fn with_nv_decay(mut self, enabled: bool) -> Self {
        self.nv_decay_in_segment = enabled;
        self
    }

    /// Effective NV relaxation rate Gamma_N seen by the nuclei.
    pub fn gamma_n_reset(&self) -> f64 {
        1.0 / self.t1_rho + 1.0 / self.t_re
    }

    /// The 2x2 NV state prepared by each reset,
    /// p |-x><-x| + (1 - p) |+x><+x|.
    pub fn reset_state(&self) -> CMatrix {
        let mut rho = CMatrix::zeros(2, 2);
        rho[(0, 0)] = cr(1.0 - self.polarization);
        rho[(1, 1)] = cr(self.polarization);
        rho
    }
}

/// Time series of reduced pair states and their derived observables.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    /// Sample times, seconds, strictly increasing.
    pub times: Vec<f64>,
    /// Reduced 4x4 density matrix of the target pair at each sample.
    pub pair_states: Vec<CMatrix>,
    /// Populations and entanglement scores recomputable from the states.
    pub observables: Vec<PairObservables>,
}

impl Trajectory {
    fn record(&mut self, t: f64, pair_state: CMatrix) -> Result<(), SimError> {
        if let Some(&last) = self.times.last() {
            if t <= last {
                return Err(SimError::Numerical {
                    context: "Trajectory".into(),
                    reason: format!("sample time {t} does not increase past {last}"),
                });
            }
        }
        let tr = pair_state.trace();
        if (tr.re - 1.0).abs() > 1e-8 || tr.im.abs() > 1e-8 {
            return Err(SimError::Numerical {
                context: "Trajectory".into(),
                reason: format!("pair state trace {tr} deviates from 1 beyond 1e-8 at t = {t}"),
            });
        }
        let observables = pair_populations(&pair_state)?;
        self.times.push(t);
        self.pair_states.push(pair_state);
        self.observables.push(observables);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_observables(&self) -> Option<&PairObservables> {
        self.observables.last()
    }
}

/// Lindblad generator in matrix form on column-vectorized density
/// matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Liouvillian {
    /// Hilbert dimension d; the matrix is d^2 x d^2.
    pub dim: usize,
    pub matrix: CMatrix,
}

fn validate_density(
    rho: &CMatrix,
    dim: usize,
    context: &str,
    neg_tol: f64,
) -> Result<(), SimError> {
    if rho.nrows() != dim || rho.ncols() != dim {
        return Err(SimError::InvalidInput {
            context: context.into(),
            reason: format!(
                "state is {}x{}, expected {dim}x{dim}",
                rho.nrows(),
                rho.ncols()
            ),
        });
    }
    if !all_finite(rho) {
        return Err(SimError::InvalidInput {
            context: context.into(),
            reason: "state has non-finite entries".into(),
        });
    }
    let scale = max_abs(rho).max(1e-300);
    if max_abs(&(rho - rho.adjoint())) > 1e-8 * scale {
        return Err(SimError::InvalidInput {
            context: context.into(),
            reason: "state is not Hermitian".into(),
        });
    }
    let tr = rho.trace();
    if (tr.re - 1.0).abs() > 1e-8 || tr.im.abs() > 1e-8 {
        return Err(SimError::InvalidInput {
            context: context.into(),
            reason: format!("state trace {tr} is not 1"),
        });
    }
    let herm = (rho + rho.adjoint()) * cr(0.5);
    let min_eig = min_eigenvalue(&herm)?;
    if min_eig < -neg_tol {
        return Err(SimError::InvalidInput {
            context: context.into(),
            reason: format!("state eigenvalue {min_eig:.3e} below -{neg_tol:.0e}"),
        });
    }
    Ok(())
}

/// Reduced state of the target pair, first pair nucleus as the first
/// qubit factor, from a nuclei-only density matrix.
pub(crate) fn reduced_pair_state(
    rho_n: &CMatrix,
    system: &SpinSystem,
) -> Result<CMatrix, SimError> {
    let n = system.n_nuclei();
    let (p0, p1) = system.pair;
    if n == 2 && p0 == 0 && p1 == 1 {
        return Ok(rho_n.clone());
    }
    let dims = SubsystemDims::qubits(n)?;
    let reduced = partial_trace(rho_n, &dims, &[p0.min(p1), p0.max(p1)])?;
    if p0 < p1 {
        Ok(reduced)
    } else {
        let perm = [0usize, 2, 1, 3];
        let mut out = CMatrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                out[(perm[i], perm[j])] = reduced[(i, j)];
            }
        }
        Ok(out)
    }
}

fn trace_out_nv(rho_joint: &CMatrix) -> Result<CMatrix, SimError> {
    let d = rho_joint.nrows();
    let dims = SubsystemDims::new(&[2, d / 2])?;
    partial_trace(rho_joint, &dims, &[1])
}

/// One cycle of the reset map: evolve the joint state for one segment,
/// trace out the NV, and re-tensor with the freshly reset NV state.
pub fn reset_step(
    rho_joint: &CMatrix,
    u_segment: &CMatrix,
    protocol: &ResetProtocol,
) -> Result<CMatrix, SimError> {
    let d = rho_joint.nrows();
    if rho_joint.ncols() != d || d < 4 || d % 2 != 0 {
        return Err(SimError::InvalidInput {
            context: "reset_step".into(),
            reason: format!(
                "joint state is {}x{}, expected even square dimension >= 4",
                rho_joint.nrows(),
                rho_joint.ncols()
            ),
        });
    }
    if u_segment.nrows() != d || u_segment.ncols() != d {
        return Err(SimError::InvalidInput {
            context: "reset_step".into(),
            reason: format!(
                "segment unitary is {}x{}, expected {d}x{d}",
                u_segment.nrows(),
                u_segment.ncols()
            ),
        });
    }
    let evolved = u_segment * rho_joint * u_segment.adjoint();
    let rho_n = trace_out_nv(&evolved)?;
    Ok(kron(&protocol.reset_state(), &rho_n))
}

enum SegmentPropagator {
    Unitary(CMatrix),
    Superoperator(CMatrix),
}

impl SegmentPropagator {
    fn apply(&self, rho: &CMatrix) -> CMatrix {
        match self {
            SegmentPropagator::Unitary(u) => u * rho * u.adjoint(),
            SegmentPropagator::Superoperator(p) => unvectorize(&(p * vectorize(rho)), rho.nrows()),
        }
    }
}

fn build_segment_propagator(
    system: &SpinSystem,
    drive: &DriveParams,
    protocol: &ResetProtocol,
    t: f64,
) -> Result<SegmentPropagator, SimError> {
    let h = build_full_hamiltonian(system, drive, t)?;
    if protocol.nv_decay_in_segment && protocol.t1_rho.is_finite() {
        let rate = cr((0.5 / protocol.t1_rho).sqrt());
        let jumps = vec![
            site_operator(OpKind::SigmaPlus, 0, system)? * rate,
            site_operator(OpKind::SigmaMinus, 0, system)? * rate,
        ];
        let liou = build_liouvillian(&h, &jumps)?;
        Ok(SegmentPropagator::Superoperator(expm(
            &(liou.matrix * cr(protocol.t_re)),
        )))
    } else {
        Ok(SegmentPropagator::Unitary(expm_unitary(&h, protocol.t_re)?))
    }
}

/// Exact protocol simulation: whole reset segments on the joint space,
/// iterated for floor(t_total / t_re) resets, sampled on the target pair
/// every `sample_every` resets (plus the initial state and the final
/// reset). Per-segment evolution is rebuilt whenever the detuning
/// schedule is time-dependent, frozen at the segment start.
pub fn simulate_full(
    system: &SpinSystem,
    drive: &DriveParams,
    protocol: &ResetProtocol,
    rho0_n: &CMatrix,
    t_total: f64,
    sample_every: usize,
) -> Result<Trajectory, SimError> {
    validate_density(rho0_n, system.nuclear_dim(), "simulate_full", 1e-8)?;
    if sample_every == 0 {
        return Err(SimError::InvalidInput {
            context: "simulate_full".into(),
            reason: "sample_every must be at least 1".into(),
        });
    }
    if !(t_total >= protocol.t_re && t_total.is_finite()) {
        return Err(SimError::InvalidInput {
            context: "simulate_full".into(),
            reason: format!(
                "t_total {t_total} shorter than one reset segment {}",
                protocol.t_re
            ),
        });
    }
    let bound = perturbative_time_bound(system);
    if protocol.t_re >= bound {
        log::warn!(
            "reset segment t_re = {:.3e} s reaches the validity bound {:.3e} s of the \
             effective description",
            protocol.t_re,
            bound
        );
    }

    let n_resets = ((t_total / protocol.t_re) * (1.0 + 1e-12)).floor() as usize;
    let reset_state = protocol.reset_state();
    let time_dependent = drive.schedule.is_time_dependent();

    let mut trajectory = Trajectory::default();
    trajectory.record(0.0, reduced_pair_state(rho0_n, system)?)?;

    let mut rho_n = rho0_n.clone();
    let mut propagator: Option<SegmentPropagator> = None;
    for r in 1..=n_resets {
        if propagator.is_none() || time_dependent {
            let t_start = (r - 1) as f64 * protocol.t_re;
            propagator = Some(build_segment_propagator(system, drive, protocol, t_start)?);
        }
        let joint = kron(&reset_state, &rho_n);
        let evolved = propagator.as_ref().expect("propagator built").apply(&joint);
        rho_n = trace_out_nv(&evolved)?;
        if r % sample_every == 0 || r == n_resets {
            trajectory.record(r as f64 * protocol.t_re, reduced_pair_state(&rho_n, system)?)?;
        }
    }
    Ok(trajectory)
}

/// Matrix form of the Lindblad generator under column-major
/// vectorization: with vec(A X B) = (B^T (x) A) vec(X),
/// L = -i ((I (x) H) - (H^T (x) I))
///     + sum_c [ conj(c) (x) c - (1/2) ((I (x) c^dag c) + ((c^dag c)^T (x) I)) ].
pub fn build_liouvillian(h: &CMatrix, jumps: &[CMatrix]) -> Result<Liouvillian, SimError> {
    let d = h.nrows();
    if h.ncols() != d {
        return Err(SimError::InvalidInput {
            context: "build_liouvillian".into(),
            reason: format!("hamiltonian is {}x{}, not square", h.nrows(), h.ncols()),
        });
    }
    let scale = max_abs(h).max(1e-300);
    if max_abs(&(h - h.adjoint())) > 1e-10 * scale {
        return Err(SimError::InvalidInput {
            context: "build_liouvillian".into(),
            reason: "hamiltonian is not Hermitian".into(),
        });
    }
    for (k, c) in jumps.iter().enumerate() {
        if c.nrows() != d || c.ncols() != d {
            return Err(SimError::InvalidInput {
                context: "build_liouvillian".into(),
                reason: format!(
                    "jump operator {k} is {}x{}, expected {d}x{d}",
                    c.nrows(),
                    c.ncols()
                ),
            });
        }
    }
    let h_sym = (h + h.adjoint()) * cr(0.5);
    let id = identity(d);
    let mut l = (kron(&id, &h_sym) - kron(&h_sym.transpose(), &id)) * c64(0.0, -1.0);
    for c in jumps {
        let cdc = c.adjoint() * c;
        l += kron(&c.conjugate(), c);
        l -= (kron(&id, &cdc) + kron(&cdc.transpose(), &id)) * cr(0.5);
    }
    Ok(Liouvillian { dim: d, matrix: l })
}

/// Effective nuclei-only master equation, integrated by exact
/// exponentiation over piecewise-constant segments of length at most
/// `dt_max` (up to round-off), sampled on the target pair at every
/// segment boundary.
pub fn simulate_effective(
    system: &SpinSystem,
    drive: &DriveParams,
    gamma_n_reset: f64,
    noise: &NoiseParams,
    rho0_n: &CMatrix,
    t_total: f64,
    dt_max: f64,
) -> Result<Trajectory, SimError> {
    let dim = system.nuclear_dim();
    validate_density(rho0_n, dim, "simulate_effective", 1e-8)?;
    if !(dt_max > 0.0 && dt_max.is_finite()) {
        return Err(SimError::InvalidInput {
            context: "simulate_effective".into(),
            reason: format!("dt_max must be positive and finite, got {dt_max}"),
        });
    }
    if !(t_total > 0.0 && t_total.is_finite()) {
        return Err(SimError::InvalidInput {
            context: "simulate_effective".into(),
            reason: format!("t_total must be positive and finite, got {t_total}"),
        });
    }
    let n_segments = ((t_total / dt_max) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    let dt = t_total / n_segments as f64;
    let time_dependent = drive.schedule.is_time_dependent();

    let mut trajectory = Trajectory::default();
    trajectory.record(0.0, reduced_pair_state(rho0_n, system)?)?;

    let mut v = vectorize(rho0_n);
    let mut propagator: Option<CMatrix> = None;
    for s in 0..n_segments {
        if propagator.is_none() || time_dependent {
            let t_start = s as f64 * dt;
            let h = build_local_hamiltonian(system, drive, t_start)?;
            let jumps = build_jump_operators_at(system, drive, gamma_n_reset, noise, t_start)?;
            let liou = build_liouvillian(&h, &jumps)?;
            propagator = Some(expm(&(liou.matrix * cr(dt))));
        }
        v = propagator.as_ref().expect("propagator built") * &v;
        let t_now = (s + 1) as f64 * dt;
        let rho = unvectorize(&v, dim);
        let tr = rho.trace();
        let drift = (tr.re - 1.0).abs().max(tr.im.abs());
        if drift > 1e-6 || !all_finite(&rho) {
            return Err(SimError::Numerical {
                context: "simulate_effective".into(),
                reason: format!(
                    "trace drifted by {drift:.3e} at segment {} of {n_segments} \
                     (t = {t_now:.6e} s, dt = {dt:.3e} s)",
                    s + 1
                ),
            });
        }
        trajectory.record(t_now, reduced_pair_state(&rho, system)?)?;
    }
    Ok(trajectory)
}

/// Number of Liouvillian eigenvalues with |lambda| at most `tol_rel`
/// times the largest eigenvalue magnitude.
pub fn zero_mode_count(liouvillian: &Liouvillian, tol_rel: f64) -> Result<usize, SimError> {
    if !(tol_rel >= 0.0 && tol_rel.is_finite()) {
        return Err(SimError::InvalidInput {
            context: "zero_mode_count".into(),
            reason: format!("tol_rel must be nonnegative and finite, got {tol_rel}"),
        });
    }
    let (values, _) = general_eig(&liouvillian.matrix)?;
    let max_mag = values.iter().map(|z| z.norm()).fold(0.0f64, f64::max);
    Ok(values
        .iter()
        .filter(|z| z.norm() <= tol_rel * max_mag)
        .count())
}

/// Second-smallest eigenvalue magnitude of the generator, the rate that
/// bounds relaxation toward the steady state.
pub fn spectral_gap(liouvillian: &Liouvillian) -> Result<f64, SimError> {
    let (values, _) = general_eig(&liouvillian.matrix)?;
    let mut mags: Vec<f64> = values.iter().map(|z| z.norm()).collect();
    mags.sort_by(f64::total_cmp);
    Ok(mags[1])
}

/// The unique steady state of a Liouvillian with a one-dimensional
/// kernel, from the linear system with one row replaced by the trace
/// condition, then Hermitian-symmetrized.
pub fn steady_state(liouvillian: &Liouvillian) -> Result<CMatrix, SimError> {
    let count = zero_mode_count(liouvillian, DEFAULT_ZERO_MODE_RTOL)?;
    if count != 1 {
        return Err(SimError::NonUniqueSteadyState { count });
    }
    let d = liouvillian.dim;
    let n2 = d * d;
    let scale = max_abs(&liouvillian.matrix).max(1e-300);
    let tol = 1e-9 * scale;

    let mut best_residual = f64::INFINITY;
    for replaced_row in 0..n2.min(16) {
        let mut a = liouvillian.matrix.clone();
        for k in 0..n2 {
            a[(replaced_row, k)] = cr(0.0);
        }
        for i in 0..d {
            a[(replaced_row, i * (d + 1))] = cr(scale);
        }
        let mut b = CVector::zeros(n2);
        b[replaced_row] = cr(scale);
        let x = match solve(&a, &b) {
            Ok(x) => x,
            Err(_) => continue,
        };

        let raw = unvectorize(&x, d);
        let mut rho = (&raw + raw.adjoint()) * cr(0.5);
        let tr = rho.trace();
        if tr.norm() < 1e-12 {
            continue;
        }
        rho /= tr;
        let residual = (&liouvillian.matrix * vectorize(&rho))
            .iter()
            .fold(0.0f64, |m, z| m.max(z.norm()));
        best_residual = best_residual.min(residual);
        if residual > tol {
            continue;
        }
        let min_eig = min_eigenvalue(&rho)?;
        if min_eig < -1e-9 {
            return Err(SimError::Numerical {
                context: "steady_state".into(),
                reason: format!("kernel state has eigenvalue {min_eig:.3e} below -1e-9"),
            });
        }
        return Ok(rho);
    }
    Err(SimError::Numerical {
        context: "steady_state".into(),
        reason: format!(
            "no trace-constrained solve reached residual {tol:.3e}; best was {best_residual:.3e}"
        ),
    })
}

/// First sample time at which the trajectory's logarithmic negativity
/// reaches `threshold` and never again drops below `threshold - 0.005`.
pub fn convergence_time(trajectory: &Trajectory, threshold: f64) -> Option<f64> {
    let ln: Vec<f64> = trajectory.observables.iter().map(|o| o.ln_value).collect();
    let n = ln.len();
    let mut suffix_min = vec![f64::INFINITY; n + 1];
    for i in (0..n).rev() {
        suffix_min[i] = ln[i].min(suffix_min[i + 1]);
    }
    (0..n)
        .find(|&i| ln[i] >= threshold && suffix_min[i] >= threshold - 0.005)
        .map(|i| trajectory.times[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entanglement::{
        analytic_steady_state, log_negativity, singlet_vector, triplet_vector,
    };
    use crate::linalg::trace_norm;
    use crate::model::tests::{fig2a_system, midpoint_drive};
    use crate::model::{alpha_coefficient, collective_jump, TWO_PI};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn khz(v: f64) -> f64 {
        TWO_PI * v * 1e3
    }

    fn random_matrix(rng: &mut ChaCha8Rng, d: usize) -> CMatrix {
        CMatrix::from_fn(d, d, |_, _| c64(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, d: usize) -> CMatrix {
        let a = random_matrix(rng, d);
        (&a + a.adjoint()) * cr(0.5)
    }

    fn random_density(rng: &mut ChaCha8Rng, d: usize) -> CMatrix {
        let a = random_matrix(rng, d);
        let rho = &a * a.adjoint();
        let tr = rho.trace();
        rho / tr
    }

    fn trace_distance(a: &CMatrix, b: &CMatrix) -> f64 {
        let diff = a - b;
        let herm = (&diff + diff.adjoint()) * cr(0.5);
        0.5 * trace_norm(&herm).unwrap()
    }

    fn projector(v: &CVector) -> CMatrix {
        v * v.adjoint()
    }

    fn maximally_mixed(d: usize) -> CMatrix {
        identity(d) / cr(d as f64)
    }

    fn fig2a_protocol() -> ResetProtocol {
        ResetProtocol::new(40e-6, 1.0, 2e-3).unwrap()
    }

    fn lowering_2x2() -> CMatrix {
        let mut m = CMatrix::zeros(2, 2);
        m[(1, 0)] = cr(1.0);
        m
    }

    #[test]
    fn reset_protocol_validates_inputs() {
        assert!(ResetProtocol::new(40e-6, 1.0, f64::INFINITY).is_ok());
        assert!(ResetProtocol::new(0.0, 1.0, 2e-3).is_err());
        assert!(ResetProtocol::new(-1e-6, 1.0, 2e-3).is_err());
        assert!(ResetProtocol::new(40e-6, 0.4, 2e-3).is_err());
        assert!(ResetProtocol::new(40e-6, 1.1, 2e-3).is_err());
        assert!(ResetProtocol::new(40e-6, 1.0, 0.0).is_err());
    }

    #[test]
    fn reset_protocol_rates_and_state() {
        let protocol = fig2a_protocol();
        assert!((protocol.gamma_n_reset() - 25_500.0).abs() < 1e-9);
        let imperfect = ResetProtocol::new(40e-6, 0.96, 2e-3).unwrap();
        let rho = imperfect.reset_state();
        assert!((rho[(1, 1)].re - 0.96).abs() < 1e-15);
        assert!((rho[(0, 0)].re - 0.04).abs() < 1e-15);
        assert!((rho.trace().re - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reset_step_with_identity_relabels_the_nv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rho_joint = random_density(&mut rng, 8);
        let protocol = ResetProtocol::new(40e-6, 0.9, 2e-3).unwrap();
        let out = reset_step(&rho_joint, &identity(8), &protocol).unwrap();
        let expected = kron(&protocol.reset_state(), &trace_out_nv(&rho_joint).unwrap());
        assert!(max_abs(&(out - expected)) < 1e-14);
    }

    #[test]
    fn reset_step_nv_only_unitary_leaves_nuclei_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rho_n = random_density(&mut rng, 4);
        let protocol = ResetProtocol::new(40e-6, 1.0, f64::INFINITY).unwrap();
        let rho_joint = kron(&protocol.reset_state(), &rho_n);
        let u_nv = expm_unitary(&random_hermitian(&mut rng, 2), 1.0).unwrap();
        let u = kron(&u_nv, &identity(4));
        let out = reset_step(&rho_joint, &u, &protocol).unwrap();
        assert!(max_abs(&(out - rho_joint)) < 1e-13);
    }

    #[test]
    fn reset_step_rejects_mismatched_dimensions() {
        let protocol = fig2a_protocol();
        let rho = maximally_mixed(8);
        assert!(reset_step(&rho, &identity(4), &protocol).is_err());
        assert!(reset_step(&maximally_mixed(3), &identity(3), &protocol).is_err());
    }

    // One short segment compared against the second-order expansion of
    // U rho U^dag: the first-order term vanishes because both initial
    // states commute with the singlet projector, so
    // Delta pop_S = t^2 tr[P (H rho H - (H^2 rho + rho H^2)/2)] + O(t^3).
    // From the fully mixed state the t^2 coefficient itself cancels
    // (equal populations balance every second-order transfer), so that
    // case pins the null result and the triplet start pins the scale.
    #[test]
    fn reset_step_matches_second_order_series() {
        let system = fig2a_system();
        let drive = midpoint_drive(&system, khz(4.0));
        let h = build_full_hamiltonian(&system, &drive, 0.0).unwrap();
        let protocol = ResetProtocol::new(2.5e-7, 1.0, 2e-3).unwrap();
        let u = expm_unitary(&h, protocol.t_re).unwrap();
        let p_joint = kron(&identity(2), &projector(&singlet_vector()));
        let h2 = &h * &h;
        let t_sq = protocol.t_re * protocol.t_re;

        let series = |rho_n: &CMatrix| -> (f64, f64) {
            let rho0 = kron(&protocol.reset_state(), rho_n);
            let out = reset_step(&rho0, &u, &protocol).unwrap();
            let pair = reduced_pair_state(&trace_out_nv(&out).unwrap(), &system).unwrap();
            let before = pair_populations(rho_n).unwrap().pop_s;
            let measured = pair_populations(&pair).unwrap().pop_s - before;
            let second = &h * &rho0 * &h - (&h2 * &rho0 + &rho0 * &h2) * cr(0.5);
            let predicted = (&p_joint * second).trace().re * t_sq;
            (measured, predicted)
        };

        let (m_mixed, p_mixed) = series(&maximally_mixed(4));
        assert!(p_mixed.abs() < 1e-12, "mixed-state prediction {p_mixed:.3e}");
        assert!(m_mixed.abs() < 1e-9, "mixed-state change {m_mixed:.3e}");

        let (m_triplet, p_triplet) = series(&projector(&triplet_vector()));
        let delta = khz(0.5);
        assert!((p_triplet - delta * delta * t_sq).abs() < 1e-4 * p_triplet.abs());
        assert!(
            (m_triplet - p_triplet).abs() < 0.02 * p_triplet.abs(),
            "measured {m_triplet:.6e}, predicted {p_triplet:.6e}"
        );
    }

    #[test]
    fn reset_step_preserves_trace_and_positivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let protocol = ResetProtocol::new(1e-5, 0.8, 1e-3).unwrap();
        for _ in 0..25 {
            let rho = random_density(&mut rng, 8);
            let u = expm_unitary(&random_hermitian(&mut rng, 8), 1.0).unwrap();
            let out = reset_step(&rho, &u, &protocol).unwrap();
            assert!((out.trace() - rho.trace()).norm() < 1e-12);
            assert!(min_eigenvalue(&out).unwrap() > -1e-9);
        }
    }

    #[test]
    fn build_liouvillian_zero_inputs_give_zero_generator() {
        let liou = build_liouvillian(&CMatrix::zeros(4, 4), &[]).unwrap();
        assert_eq!(liou.dim, 4);
        assert_eq!(liou.matrix.nrows(), 16);
        assert_eq!(max_abs(&liou.matrix), 0.0);
    }

    #[test]
    fn build_liouvillian_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let not_hermitian = random_matrix(&mut rng, 3);
        assert!(build_liouvillian(&not_hermitian, &[]).is_err());
        let h = random_hermitian(&mut rng, 3);
        assert!(build_liouvillian(&h, &[identity(2)]).is_err());
    }

    #[test]
    fn amplitude_damping_decays_at_rate_gamma() {
        let gamma = 3.0e4f64;
        let jump = lowering_2x2() * cr(gamma.sqrt());
        let liou = build_liouvillian(&CMatrix::zeros(2, 2), &[jump]).unwrap();
        let mut excited = CMatrix::zeros(2, 2);
        excited[(0, 0)] = cr(1.0);
        for &t in &[1e-5, 5e-5, 2e-4] {
            let p = expm(&(&liou.matrix * cr(t)));
            let rho = unvectorize(&(p * vectorize(&excited)), 2);
            assert!((rho[(0, 0)].re - (-gamma * t).exp()).abs() < 1e-10);
            assert!((rho.trace().re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn liouvillian_action_matches_direct_master_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for draw in 0..100 {
            let d = 2 + draw % 3;
            let h = random_hermitian(&mut rng, d);
            let jumps: Vec<CMatrix> =
                (0..draw % 4).map(|_| random_matrix(&mut rng, d)).collect();
            let rho = random_density(&mut rng, d);

            let liou = build_liouvillian(&h, &jumps).unwrap();
            let lhs = unvectorize(&(&liou.matrix * vectorize(&rho)), d);

            let mut rhs = (&h * &rho - &rho * &h) * c64(0.0, -1.0);
            for c in &jumps {
                let cdc = c.adjoint() * c;
                rhs += c * &rho * c.adjoint() - (&cdc * &rho + &rho * &cdc) * cr(0.5);
            }
            assert!(max_abs(&(lhs - rhs)) < 1e-11, "draw {draw}");
        }
    }

    #[test]
    fn liouvillian_annihilates_the_trace_functional() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..20 {
            let d = 2 + rng.gen_range(0..3);
            let h = random_hermitian(&mut rng, d);
            let jumps: Vec<CMatrix> = (0..2).map(|_| random_matrix(&mut rng, d)).collect();
            let liou = build_liouvillian(&h, &jumps).unwrap();
            let left = vectorize(&identity(d)).adjoint() * &liou.matrix;
            assert!(left.iter().all(|z| z.norm() < 1e-10));
        }

        let system = fig2a_system();
        let drive = midpoint_drive(&system, khz(4.0));
        let h = build_local_hamiltonian(&system, &drive, 0.0).unwrap();
        let jumps =
            build_jump_operators_at(&system, &drive, 25_500.0, &NoiseParams::zero(2), 0.0)
                .unwrap();
        let liou = build_liouvillian(&h, &jumps).unwrap();
        let left = vectorize(&identity(4)).adjoint() * &liou.matrix;
        let scale = max_abs(&liou.matrix);
        assert!(left.iter().all(|z| z.norm() < 1e-10 * scale));
    }

    #[test]
    fn simulate_full_single_segment_matches_reset_step() {
        let system = fig2a_system();
        let drive = midpoint_drive(&system, khz(4.0));
        let protocol = fig2a_protocol();
        let rho0 = maximally_mixed(4);

        let trajectory =
            simulate_full(&system, &drive, &protocol, &rho0, protocol.t_re, 1).unwrap();
        assert_eq!(trajectory.len(), 2);
        assert_eq!(trajectory.times[0], 0.0);
        assert!((trajectory.times[1] - protocol.t_re).abs() < 1e-18);

        let h = build_full_hamiltonian(&system, &drive, 0.0).unwrap();
        let u = expm_unitary(&h, protocol.t_re).unwrap();
        let joint = kron(&protocol.reset_state(), &rho0);
        let stepped = reset_step(&joint, &u, &protocol).unwrap();
        let expected = trace_out_nv(&stepped).unwrap();
        assert!(max_abs(&(&trajectory.pair_states[1] - expected)) < 1e-13);
    }

    #[test]
    fn simulate_full_rejects_bad_inputs() {
        let system = fig2a_system();
        let drive = midpoint_drive(&system, khz(4.0));
        let protocol = fig2a_protocol();
        let rho0 = maximally_mixed(4);
        assert!(simulate_full(&system, &drive, &protocol, &rho0, 1e-6, 1).is_err());
        assert!(simulate_full(&system, &drive, &protocol, &rho0, 1e-3, 0).is_err());
        assert!(
            simulate_full(&system, &drive, &protocol, &maximally_mixed(8), 1e-3, 1).is_err()
        );
        let mut unnormalized = maximally_mixed(4);
        unnormalized[(0, 0)] = cr(0.5);
        assert!(simulate_full(&system, &drive, &protocol, &unnormalized, 1e-3, 1).is_err());
    }

    // The balanced working point leaves the closed-form steady state an
    // exact zero-energy eigenstate of the joint Hamiltonian, so the full
    // protocol must hold it static to solver precision.
    #[test]
    fn simulate_full_keeps_the_steady_state_stationary() {
        let system = fig2a_system();
        let drive = midpoint_drive(&system, khz(4.0));
        let protocol = fig2a_protocol();
        let delta1 = -khz(0.5);
        let target = projector(&analytic_steady_state(delta1, khz(4.0)).unwrap());

        let trajectory = simulate_full(&system, &drive, &protocol, &target, 10e-3, 25).unwrap();
        for state in &trajectory.pair_states {
            let dist = trace_distance(state, &target);
            assert!(dist < 1e-8, "trace distance {dist:.3e}");
            assert!(dist < 0.02);
        }
    }

    #[test]
    fn simulate_full_sampling_cadence_includes_the_last_reset() {
        let system = fig2a_system();
        let drive = midpoint_drive(&system, khz(4.0));
        let protocol = fig2a_protocol();
        let rho0 = maximally_mixed(4);
        let trajectory =
            simulate_full(&system, &drive, &protocol, &rho0, 7.0 * protocol.t_re, 3).unwrap();
        let expected: Vec<f64> = [0.0, 3.0, 6.0, 7.0]
            .iter()
            .map(|k| k * protocol.t_re)
            .collect();
        assert_eq!(trajectory.len(), expected.len());
        for (have, want) in trajectory.times.iter().zip(expected.iter()) {
            assert!((have - want).abs() < 1e-18);
        }
    }

    #[test]
    fn simulate_effective_free_evolution_is_static() {
        let system = SpinSystem::new(
            vec![
                crate::model::NuclearSpin::new("n1", khz(2.0), 0.0),
                crate::model::NuclearSpin::new("n2", khz(4.0), 0.0),
            ],
            (0, 1),
            vec![],
            crate::model::PhysicalConstants::default(),
        )
        .unwrap();
        let drive = DriveParams::new(0.0, 100e-4, khz(100.0), crate::model::DetuningSchedule::Constant)
            .unwrap()
            .with_pair_override([0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rho0 = random_density(&mut rng, 4);
        let trajectory = simulate_effective(
            &system,
            &drive,
            25_500.0,
            &NoiseParams::zero(2),
            &rho0,
            1e-3,
            5e-5,
        )
        .unwrap();
        for state in &trajectory.pair_states {
            assert!(max_abs(&(state - &rho0)) < 1e-12);
        }
    }

    #[test]
    fn simulate_effective_dark_singlet_is_stationary() {
        let system = fig2a_system();
        let delta = khz(0.5);
        let drive = midpoint_drive(&system, 0.0).with_pair_override([delta, delta]);
        let rho0 = projector(&singlet_vector());
        let trajectory = simulate_effective(
            &system,
            &drive,
            25_500.0,
            &NoiseParams::zero(2),
            &rho0,
            2e-3,
            4e-5,
        )
        .unwrap();
        for state in &trajectory.pair_states {
            assert!(max_abs(&(state - &rho0)) < 1e-8);
        }
    }

    #[test]
    fn simulate_effective_step_halving_agrees() {
        let system = fig2a_system();
        let drive = midpoint_drive(&system, khz(4.0));
        let rho0 = maximally_mixed(4);
        let noise = NoiseParams::zero(2);
        let coarse =
            simulate_effective(&system, &drive, 25_500.0, &noise, &rho0, 2e-3, 4e-5).unwrap();
        let fine =
            simulate_effective(&system, &drive, 25_500.0, &noise, &rho0, 2e-3, 2e-5).unwrap();
        let dist = trace_distance(
            coarse.pair_states.last().unwrap(),
            fine.pair_states.last().unwrap(),
        );
        assert!(dist < 1e-6, "trace distance {dist:.3e}");
    }

    #[test]
    fn backends_agree_in_the_perturbative_regime() {
        // One reset cycle of length t_re flips a resonant nuclear spin with
        // probability sin^2(g t_re), g = a_perp/4, so for g t_re << 1 the map
        // pumps at the collision rate g^2 t_re. Adiabatic elimination of an
        // electron with linewidth Gamma gives the Lindblad rate
        // |alpha|^2 -> 4 g^2 / Gamma once Gamma/2 dominates the detuning, so
        // the linewidth that reproduces the reset map is Gamma = 4/t_re (plus
        // the dressed-state decay). At t_re = 2 us the collisions are weak
        // (g t_re = 0.05) and the two backends must track each other over
        // twenty thousand cycles.
        let system = fig2a_system();
        let drive = midpoint_drive(&system, khz(4.0));
        let t_re = 2e-6;
        let t1_rho = 2e-3;
        let protocol = ResetProtocol::new(t_re, 1.0, t1_rho).unwrap();
        let rho0 = maximally_mixed(4);
        let t_total = 40e-3;
        let sample_every = 50;

        let full = simulate_full(&system, &drive, &protocol, &rho0, t_total, sample_every)
            .unwrap();
        let effective = simulate_effective(
            &system,
            &drive,
            1.0 / t1_rho + 4.0 / t_re,
            &NoiseParams::zero(2),
            &rho0,
            t_total,
            t_re * sample_every as f64,
        )
        .unwrap();
        assert_eq!(full.len(), effective.len());
        let mut worst = 0.0f64;
        for (a, b) in full.pair_states.iter().zip(effective.pair_states.iter()) {
            worst = worst.max(trace_distance(a, b));
        }
        assert!(worst < 0.01, "worst trace distance {worst:.3e}");
        let last = full.last_observables().unwrap();
        assert!(last.pop_s > 0.5, "pump visibly underway, pop_S {:.3}", last.pop_s);
    }

    #[test]
    fn steady_state_of_amplitude_damping_is_the_ground_state() {
        let jump = lowering_2x2() * cr(100.0f64.sqrt());
        let liou = build_liouvillian(&CMatrix::zeros(2, 2), &[jump]).unwrap();
        let rho = steady_state(&liou).unwrap();
        assert!((rho[(1, 1)].re - 1.0).abs() < 1e-10);
        assert!(rho[(0, 0)].norm() < 1e-10);
    }

    #[test]
    fn steady_state_reproduces_the_closed_form_state() {
        let system = fig2a_system();
        let drive = midpoint_drive(&system, khz(4.0));
        let h = build_local_hamiltonian(&system, &drive, 0.0).unwrap();
        let gamma = 25_500.0;
        let delta1 = -khz(0.5);
        let alpha = alpha_coefficient(system.nuclei[0].a_perp, delta1, gamma).unwrap();
        let jump = collective_jump(&[alpha, alpha]);
        let liou = build_liouvillian(&h, &[jump]).unwrap();

        let rho = steady_state(&liou).unwrap();
        let target = analytic_steady_state(delta1, khz(4.0)).unwrap();
        let fidelity = (target.adjoint() * &rho * &target)[(0, 0)].re;
        assert!(fidelity >= 0.999, "fidelity {fidelity:.6}");
        let residual = (&liou.matrix * vectorize(&rho))
            .iter()
            .fold(0.0f64, |m, z| m.max(z.norm()));
        assert!(residual <= 1e-9 * max_abs(&liou.matrix));
    }

    #[test]
    fn steady_state_detects_the_decomposable_case() {
        let system = fig2a_system();
        let delta = khz(0.5);
        let drive = midpoint_drive(&system, 0.0).with_pair_override([delta, delta]);
        let h = build_local_hamiltonian(&system, &drive, 0.0).unwrap();
        let alpha = alpha_coefficient(system.nuclei[0].a_perp, delta, 25_500.0).unwrap();
        let jump = collective_jump(&[alpha, alpha]);
        let liou = build_liouvillian(&h, &[jump]).unwrap();

        match steady_state(&liou) {
            Err(SimError::NonUniqueSteadyState { count }) => assert!(count >= 2),
            other => panic!("expected a degenerate kernel, got {other:?}"),
        }
        assert!(zero_mode_count(&liou, DEFAULT_ZERO_MODE_RTOL).unwrap() >= 2);
    }

    #[test]
    fn zero_mode_count_on_the_zero_generator_counts_everything() {
        let liou = build_liouvillian(&CMatrix::zeros(4, 4), &[]).unwrap();
        assert_eq!(zero_mode_count(&liou, DEFAULT_ZERO_MODE_RTOL).unwrap(), 16);
    }

    #[test]
    fn zero_mode_count_is_one_at_the_working_point() {
        let system = fig2a_system();
        let drive = midpoint_drive(&system, khz(4.0));
        let h = build_local_hamiltonian(&system, &drive, 0.0).unwrap();
        let jumps =
            build_jump_operators_at(&system, &drive, 25_500.0, &NoiseParams::zero(2), 0.0)
                .unwrap();
        let liou = build_liouvillian(&h, &jumps).unwrap();
        assert_eq!(zero_mode_count(&liou, DEFAULT_ZERO_MODE_RTOL).unwrap(), 1);
        assert!(spectral_gap(&liou).unwrap() > 0.0);
    }

    fn constant_ln_trajectory(values: &[f64]) -> Trajectory {
        let mut trajectory = Trajectory::default();
        for (i, &ln_value) in values.iter().enumerate() {
            trajectory.times.push(i as f64 * 1e-3);
            trajectory.pair_states.push(maximally_mixed(4));
            trajectory.observables.push(PairObservables {
                pop_uu: 0.25,
                pop_dd: 0.25,
                pop_s: 0.25,
                pop_t: 0.25,
                ln_value,
                singlet_fidelity: 0.25,
            });
        }
        trajectory
    }

    #[test]
    fn convergence_time_finds_the_first_sustained_crossing() {
        let always = constant_ln_trajectory(&[1.0, 1.0, 1.0]);
        assert_eq!(convergence_time(&always, 0.96), Some(0.0));

        let never = constant_ln_trajectory(&[0.1, 0.3, 0.5, 0.49]);
        assert_eq!(convergence_time(&never, 0.96), None);

        let dips = constant_ln_trajectory(&[0.2, 0.97, 0.94, 0.97, 0.96, 0.98]);
        assert_eq!(convergence_time(&dips, 0.96), Some(3e-3));

        let shallow_dip = constant_ln_trajectory(&[0.2, 0.97, 0.957, 0.97]);
        assert_eq!(convergence_time(&shallow_dip, 0.96), Some(1e-3));
    }

    #[test]
    fn trajectory_record_rejects_bad_samples() {
        let mut trajectory = Trajectory::default();
        trajectory.record(0.0, maximally_mixed(4)).unwrap();
        assert!(trajectory.record(0.0, maximally_mixed(4)).is_err());
        assert!(trajectory
            .record(1.0, maximally_mixed(4) * cr(1.5))
            .is_err());
        assert_eq!(trajectory.len(), 1);
        assert!(!trajectory.is_empty());
        assert!(trajectory.last_observables().is_some());
    }

    #[test]
    fn reduced_pair_state_respects_pair_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let nuclei = vec![
            crate::model::NuclearSpin::new("n1", khz(2.0), khz(16.0)),
            crate::model::NuclearSpin::new("n2", khz(4.0), khz(16.0)),
            crate::model::NuclearSpin::new("n3", khz(6.0), khz(10.0)),
        ];
        let constants = crate::model::PhysicalConstants::default();
        let forward = SpinSystem::new(nuclei.clone(), (0, 2), vec![], constants.clone()).unwrap();
        let backward = SpinSystem::new(nuclei, (2, 0), vec![], constants).unwrap();

        let rho = random_density(&mut rng, 8);
        let fwd = reduced_pair_state(&rho, &forward).unwrap();
        let bwd = reduced_pair_state(&rho, &backward).unwrap();
        assert!((fwd.trace().re - 1.0).abs() < 1e-12);
        assert!((fwd[(1, 1)] - bwd[(2, 2)]).norm() < 1e-13);
        assert!((fwd[(0, 1)] - bwd[(0, 2)]).norm() < 1e-13);
        assert!(max_abs(&(&fwd - &bwd)) > 1e-3);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn matrix_strategy(d: usize) -> impl Strategy<Value = CMatrix> {
            proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), d * d).prop_map(
                move |entries| {
                    CMatrix::from_fn(d, d, |i, j| {
                        let (re, im) = entries[i * d + j];
                        c64(re, im)
                    })
                },
            )
        }

        fn density_strategy(d: usize) -> impl Strategy<Value = CMatrix> {
            matrix_strategy(d).prop_map(|a| {
                let rho = &a * a.adjoint();
                let tr = rho.trace();
                rho / tr
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn reset_step_trace_and_positivity(
                rho in density_strategy(8),
                hseed in matrix_strategy(8),
                p in 0.5f64..1.0,
            ) {
                let protocol = ResetProtocol::new(1e-5, p, 1e-3).unwrap();
                let h = (&hseed + hseed.adjoint()) * cr(0.5);
                let u = expm_unitary(&h, 1.0).unwrap();
                let out = reset_step(&rho, &u, &protocol).unwrap();
                prop_assert!((out.trace() - rho.trace()).norm() < 1e-12);
                prop_assert!(min_eigenvalue(&out).unwrap() > -1e-9);
            }

            #[test]
            fn liouvillian_matches_direct_form(
                hseed in matrix_strategy(4),
                c1 in matrix_strategy(4),
                c2 in matrix_strategy(4),
                rho in density_strategy(4),
            ) {
                let h = (&hseed + hseed.adjoint()) * cr(0.5);
                let jumps = vec![c1, c2];
                let liou = build_liouvillian(&h, &jumps).unwrap();
                let lhs = unvectorize(&(&liou.matrix * vectorize(&rho)), 4);
                let mut rhs = (&h * &rho - &rho * &h) * c64(0.0, -1.0);
                for c in &jumps {
                    let cdc = c.adjoint() * c;
                    rhs += c * &rho * c.adjoint() - (&cdc * &rho + &rho * &cdc) * cr(0.5);
                }
                prop_assert!(max_abs(&(lhs - rhs)) < 1e-11);
            }

            #[test]
            fn liouvillian_is_trace_annihilating(
                hseed in matrix_strategy(3),
                c1 in matrix_strategy(3),
            ) {
                let h = (&hseed + hseed.adjoint()) * cr(0.5);
                let liou = build_liouvillian(&h, &[c1]).unwrap();
                let left = vectorize(&identity(3)).adjoint() * &liou.matrix;
                prop_assert!(left.iter().all(|z| z.norm() < 1e-10));
            }
        }
    }

    #[test]
    fn log_negativity_of_fig2a_steady_state_is_reachable() {
        let target = projector(&analytic_steady_state(-khz(0.5), khz(4.0)).unwrap());
        let ln = log_negativity(&target).unwrap();
        assert!((ln - (1.0f64 + 64.0 / 66.0).log2()).abs() < 1e-12);
    }
}
