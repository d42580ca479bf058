//! Physical description of the NV electron and its nuclear register:
//! constants, spin operators, Hamiltonians, reset-induced rates, and the
//! Lindblad jump operators of the effective nuclear master equation.
//!
//! Tensor factor 0 is always the NV dressed qubit with basis {|+x>, |-x>};
//! factors 1..=N are the nuclei in declaration order with basis {|up>,
//! |down>}. All angular frequencies are in rad/s and times in seconds.

use crate::error::SimError;
use crate::linalg::{c64, cr, identity, kron, CMatrix, C64};

pub const TWO_PI: f64 = std::f64::consts::TAU;

/// Fundamental constants used by the geometry and drive calculations.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalConstants {
    /// 13C nuclear gyromagnetic ratio, rad/(s*T).
    pub gamma_n: f64,
    /// Electron gyromagnetic ratio, rad/(s*T).
    pub gamma_e: f64,
    /// Magnetic constant over 4 pi, T^2 m^3 / J.
    pub mu0_over_4pi: f64,
    /// Reduced Planck constant, J*s.
    pub hbar: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            gamma_n: TWO_PI * 10.7084e6,
            gamma_e: TWO_PI * 28.024e9,
            mu0_over_4pi: 1e-7,
            hbar: 1.0545718e-34,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [
            ("gamma_n", self.gamma_n),
            ("gamma_e", self.gamma_e),
            ("mu0_over_4pi", self.mu0_over_4pi),
            ("hbar", self.hbar),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::InvalidInput {
                    context: "PhysicalConstants".into(),
                    reason: format!("{name} must be positive and finite, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// One 13C nucleus: secular hyperfine components and an optional position
/// relative to the NV center.
#[derive(Debug, Clone, PartialEq)]
pub struct NuclearSpin {
    pub label: String,
    /// Parallel hyperfine component, rad/s, signed.
    pub a_par: f64,
    /// Perpendicular hyperfine component, rad/s, nonnegative (its phase is
    /// absorbed into the nuclear basis).
    pub a_perp: f64,
    /// Position relative to the NV center, meters.
    pub position: Option<[f64; 3]>,
}

impl NuclearSpin {
    pub fn new(label: impl Into<String>, a_par: f64, a_perp: f64) -> Self {
        Self {
            label: label.into(),
            a_par,
            a_perp,
            position: None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.a_perp >= 0.0 && self.a_perp.is_finite() && self.a_par.is_finite()) {
            return Err(SimError::InvalidInput {
                context: "NuclearSpin".into(),
                reason: format!(
                    "nucleus {}: a_perp must be finite and nonnegative, a_par finite",
                    self.label
                ),
            });
        }
        if let Some(p) = self.position {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if r <= 0.3e-9 {
                return Err(SimError::InvalidInput {
                    context: "NuclearSpin".into(),
                    reason: format!(
                        "nucleus {}: position {r:.3e} m is closer than a lattice bond to the NV",
                        self.label
                    ),
                });
            }
        }
        Ok(())
    }
}

/// The nuclear register, the designated target pair, and the intra-register
/// dipolar couplings.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinSystem {
    pub nuclei: Vec<NuclearSpin>,
    pub pair: (usize, usize),
    dipolar: Vec<(usize, usize, f64)>,
    pub constants: PhysicalConstants,
}

impl SpinSystem {
    pub fn new(
        nuclei: Vec<NuclearSpin>,
        pair: (usize, usize),
        dipolar: Vec<(usize, usize, f64)>,
        constants: PhysicalConstants,
    ) -> Result<Self, SimError> {
        constants.validate()?;
        if nuclei.is_empty() || nuclei.len() > 6 {
            return Err(SimError::InvalidInput {
                context: "SpinSystem".into(),
                reason: format!("nucleus count {} outside 1..=6", nuclei.len()),
            });
        }
        for n in &nuclei {
            n.validate()?;
        }
        if pair.0 == pair.1 || pair.0 >= nuclei.len() || pair.1 >= nuclei.len() {
            return Err(SimError::InvalidInput {
                context: "SpinSystem".into(),
                reason: format!("pair {pair:?} invalid for {} nuclei", nuclei.len()),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for &(i, j, g) in &dipolar {
            if i == j || i >= nuclei.len() || j >= nuclei.len() || !g.is_finite() {
                return Err(SimError::InvalidInput {
                    context: "SpinSystem".into(),
                    reason: format!("dipolar entry ({i},{j}) invalid"),
                });
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(SimError::InvalidInput {
                    context: "SpinSystem".into(),
                    reason: format!("duplicate dipolar entry for pair ({i},{j})"),
                });
            }
        }
        Ok(Self {
            nuclei,
            pair,
            dipolar,
            constants,
        })
    }

    pub fn n_nuclei(&self) -> usize {
        self.nuclei.len()
    }

    /// Hilbert dimension of the nuclei alone.
    pub fn nuclear_dim(&self) -> usize {
        1 << self.n_nuclei()
    }

    /// Hilbert dimension of NV plus nuclei.
    pub fn joint_dim(&self) -> usize {
        1 << (self.n_nuclei() + 1)
    }

    /// Dipolar coupling between nuclei `i` and `j`, rad/s; zero when absent.
    pub fn g(&self, i: usize, j: usize) -> f64 {
        let key = (i.min(j), i.max(j));
        self.dipolar
            .iter()
            .find(|&&(a, b, _)| (a.min(b), a.max(b)) == key)
            .map(|&(_, _, g)| g)
            .unwrap_or(0.0)
    }

    pub fn dipolar_entries(&self) -> &[(usize, usize, f64)] {
        &self.dipolar
    }
}

/// Detuning schedule of the target pair. The constant schedule keeps the
/// static detunings; the exponential one replaces the pair's antisymmetric
/// detuning part by delta(t) = delta_inf + delta0 * exp(-lambda t).
#[derive(Debug, Clone, PartialEq)]
pub enum DetuningSchedule {
    Constant,
    Exponential {
        delta0: f64,
        rate_lambda: f64,
        delta_inf: f64,
    },
}

impl DetuningSchedule {
    pub fn validate(&self) -> Result<(), SimError> {
        if let DetuningSchedule::Exponential { rate_lambda, .. } = self {
            if !(*rate_lambda >= 0.0 && rate_lambda.is_finite()) {
                return Err(SimError::InvalidInput {
                    context: "DetuningSchedule".into(),
                    reason: format!("rate_lambda {rate_lambda} must be nonnegative"),
                });
            }
        }
        Ok(())
    }

    /// Antisymmetric pair detuning at time `t`; `None` for the constant
    /// schedule, which leaves the static detunings untouched.
    pub fn imbalance_at(&self, t: f64) -> Option<f64> {
        match self {
            DetuningSchedule::Constant => None,
            DetuningSchedule::Exponential {
                delta0,
                rate_lambda,
                delta_inf,
            } => Some(delta_inf + delta0 * (-rate_lambda * t).exp()),
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        matches!(self, DetuningSchedule::Exponential { .. })
    }
}

/// Microwave and rf drive parameters. The rf carrier is locked to the MW
/// Rabi frequency at construction; an explicit override exists for
/// sensitivity studies and adds the corresponding sigma_z term back to the
/// full Hamiltonian.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveParams {
    /// MW Rabi frequency Omega_mw, rad/s.
    pub omega_mw: f64,
    /// rf Rabi frequency Omega_rf, rad/s.
    pub omega_rf_rabi: f64,
    /// Static field magnitude, tesla.
    pub b0: f64,
    /// rf carrier frequency omega_rf, rad/s.
    pub omega_rf: f64,
    pub schedule: DetuningSchedule,
    /// Direct detuning overrides for the target pair, rad/s.
    pub pair_detuning_override: Option<[f64; 2]>,
}

impl DriveParams {
    /// Locked constructor: omega_mw = omega_rf.
    pub fn new(
        omega_rf_rabi: f64,
        b0: f64,
        omega_rf: f64,
        schedule: DetuningSchedule,
    ) -> Result<Self, SimError> {
        schedule.validate()?;
        for (name, v) in [
            ("omega_rf_rabi", omega_rf_rabi),
            ("b0", b0),
            ("omega_rf", omega_rf),
        ] {
            if !v.is_finite() {
                return Err(SimError::InvalidInput {
                    context: "DriveParams".into(),
                    reason: format!("{name} must be finite, got {v}"),
                });
            }
        }
        Ok(Self {
            omega_mw: omega_rf,
            omega_rf_rabi,
            b0,
            omega_rf,
            schedule,
            pair_detuning_override: None,
        })
    }

    /// Breaks the lock between omega_mw and omega_rf.
    pub fn with_mw_override(mut self, omega_mw: f64) -> Self {
        self.omega_mw = omega_mw;
        self
    }

    /// Sets the target pair detunings directly instead of deriving them
    /// from the hyperfine values.
    pub fn with_pair_override(mut self, detunings: [f64; 2]) -> Self {
        self.pair_detuning_override = Some(detunings);
        self
    }
}

/// Per-nucleus Lindblad rates, 1/s. `gamma` feeds the lowering channels
/// M_i; `gamma_dephase` is an optional extra pure-dephasing channel that is
/// zero unless explicitly requested.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseParams {
    pub gamma: Vec<f64>,
    pub gamma_dephase: Vec<f64>,
}

impl NoiseParams {
    pub fn zero(n: usize) -> Self {
        Self {
            gamma: vec![0.0; n],
            gamma_dephase: vec![0.0; n],
        }
    }

    pub fn uniform(n: usize, gamma: f64) -> Self {
        Self {
            gamma: vec![gamma; n],
            gamma_dephase: vec![0.0; n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), SimError> {
        if self.gamma.len() != n || self.gamma_dephase.len() != n {
            return Err(SimError::InvalidInput {
                context: "NoiseParams".into(),
                reason: format!("rate lists must have length {n}"),
            });
        }
        if self
            .gamma
            .iter()
            .chain(self.gamma_dephase.iter())
            .any(|&g| !(g >= 0.0 && g.is_finite()))
        {
            return Err(SimError::InvalidInput {
                context: "NoiseParams".into(),
                reason: "all rates must be finite and nonnegative".into(),
            });
        }
        Ok(())
    }
}

/// Static rf detuning of one nucleus: gamma_n B0 + a_par/2 - omega_rf.
pub fn detuning_of(
    nucleus: &NuclearSpin,
    drive: &DriveParams,
    constants: &PhysicalConstants,
) -> f64 {
    constants.gamma_n * drive.b0 + nucleus.a_par / 2.0 - drive.omega_rf
}

/// Detunings of every nucleus at time `t`: static values from
/// [`detuning_of`], then pair overrides, then the schedule's antisymmetric
/// imbalance on the target pair. Bath nuclei always keep their static
/// values.
pub fn nuclear_detunings(system: &SpinSystem, drive: &DriveParams, t: f64) -> Vec<f64> {
    let mut deltas: Vec<f64> = system
        .nuclei
        .iter()
        .map(|n| detuning_of(n, drive, &system.constants))
        .collect();
    let (p0, p1) = system.pair;
    if let Some(over) = drive.pair_detuning_override {
        deltas[p0] = over[0];
        deltas[p1] = over[1];
    }
    if let Some(imbalance) = drive.schedule.imbalance_at(t) {
        let center = 0.5 * (deltas[p0] + deltas[p1]);
        deltas[p0] = center + imbalance;
        deltas[p1] = center - imbalance;
    }
    deltas
}

/// Single-site spin operator kinds. `Ix`..`Iminus` act on nuclei, the
/// `Sigma*` kinds on the NV dressed qubit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Ix,
    Iy,
    Iz,
    Iplus,
    Iminus,
    SigmaZ,
    SigmaPlus,
    SigmaMinus,
}

fn local_2x2(kind: OpKind) -> CMatrix {
    let z = c64(0.0, 0.0);
    match kind {
        OpKind::Iz | OpKind::SigmaZ => {
            CMatrix::from_row_slice(2, 2, &[cr(0.5), z, z, cr(-0.5)])
        }
        OpKind::Iplus | OpKind::SigmaPlus => {
            CMatrix::from_row_slice(2, 2, &[z, cr(1.0), z, z])
        }
        OpKind::Iminus | OpKind::SigmaMinus => {
            CMatrix::from_row_slice(2, 2, &[z, z, cr(1.0), z])
        }
        OpKind::Ix => CMatrix::from_row_slice(2, 2, &[z, cr(0.5), cr(0.5), z]),
        OpKind::Iy => CMatrix::from_row_slice(2, 2, &[z, c64(0.0, -0.5), c64(0.0, 0.5), z]),
    }
}

/// Embeds a 2x2 operator at `factor` of a register of `nfactors` qubits.
fn embed(local: &CMatrix, factor: usize, nfactors: usize) -> CMatrix {
    let left = identity(1 << factor);
    let right = identity(1 << (nfactors - factor - 1));
    kron(&kron(&left, local), &right)
}

/// Spin operator at one site of the joint NV+nuclei space. Site 0 is the
/// NV and accepts only the `Sigma*` kinds; sites 1..=N are the nuclei and
/// accept only the `I*` kinds.
pub fn site_operator(kind: OpKind, site: usize, system: &SpinSystem) -> Result<CMatrix, SimError> {
    let nfactors = system.n_nuclei() + 1;
    if site >= nfactors {
        return Err(SimError::InvalidInput {
            context: "site_operator".into(),
            reason: format!("site {site} out of range for {nfactors} factors"),
        });
    }
    let is_nv_kind = matches!(kind, OpKind::SigmaZ | OpKind::SigmaPlus | OpKind::SigmaMinus);
    if (site == 0) != is_nv_kind {
        return Err(SimError::InvalidInput {
            context: "site_operator".into(),
            reason: format!("operator {kind:?} is not defined at site {site}"),
        });
    }
    Ok(embed(&local_2x2(kind), site, nfactors))
}

/// Nuclear spin operator on the nuclei-only space.
fn nuclear_operator(kind: OpKind, nucleus: usize, n: usize) -> CMatrix {
    embed(&local_2x2(kind), nucleus, n)
}

/// Dipolar two-nucleus term Iz_i Iz_j - (Ix_i Ix_j + Iy_i Iy_j)/2 on an
/// n-nucleus register.
fn dipolar_term(i: usize, j: usize, n: usize) -> CMatrix {
    let zz = nuclear_operator(OpKind::Iz, i, n) * nuclear_operator(OpKind::Iz, j, n);
    let xx = nuclear_operator(OpKind::Ix, i, n) * nuclear_operator(OpKind::Ix, j, n);
    let yy = nuclear_operator(OpKind::Iy, i, n) * nuclear_operator(OpKind::Iy, j, n);
    zz - (xx + yy) * cr(0.5)
}

fn hermitize(x: CMatrix) -> CMatrix {
    let adj = x.adjoint();
    (x + adj) * cr(0.5)
}

/// Full dressed-frame Hamiltonian on the joint NV+nuclei space at time `t`.
/// Contains the nuclear detuning and rf drive terms, the hyperfine
/// flip-flop with the NV, the dipolar couplings, and, when the
/// rf-microwave lock is overridden, the residual (omega_mw - omega_rf)
/// sigma_z term.
pub fn build_full_hamiltonian(
    system: &SpinSystem,
    drive: &DriveParams,
    t: f64,
) -> Result<CMatrix, SimError> {
    let n = system.n_nuclei();
    let nfactors = n + 1;
    let dim = system.joint_dim();
    let deltas = nuclear_detunings(system, drive, t);
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(SimError::InvalidInput {
            context: "build_full_hamiltonian".into(),
            reason: "derived detunings are not finite".into(),
        });
    }

    let sigma_plus = embed(&local_2x2(OpKind::SigmaPlus), 0, nfactors);
    let sigma_minus = embed(&local_2x2(OpKind::SigmaMinus), 0, nfactors);
    let mut h = CMatrix::zeros(dim, dim);
    for (i, nucleus) in system.nuclei.iter().enumerate() {
        let iz = embed(&local_2x2(OpKind::Iz), i + 1, nfactors);
        let ix = embed(&local_2x2(OpKind::Ix), i + 1, nfactors);
        let iminus = embed(&local_2x2(OpKind::Iminus), i + 1, nfactors);
        let iplus = embed(&local_2x2(OpKind::Iplus), i + 1, nfactors);
        h += iz * cr(deltas[i]);
        h += ix * cr(drive.omega_rf_rabi);
        h += (&sigma_plus * iminus + &sigma_minus * iplus) * cr(nucleus.a_perp / 4.0);
    }
    for &(i, j, g) in system.dipolar_entries() {
        h += dipolar_term(i + 1, j + 1, nfactors) * cr(g);
    }
    let residual = drive.omega_mw - drive.omega_rf;
    if residual != 0.0 {
        h += embed(&local_2x2(OpKind::SigmaZ), 0, nfactors) * cr(residual);
    }
    Ok(hermitize(h))
}

/// Local nuclear Hamiltonian H_T on the nuclei-only space at time `t`:
/// rf drive, detunings, and dipolar couplings, without the NV.
pub fn build_local_hamiltonian(
    system: &SpinSystem,
    drive: &DriveParams,
    t: f64,
) -> Result<CMatrix, SimError> {
    let n = system.n_nuclei();
    let dim = system.nuclear_dim();
    let deltas = nuclear_detunings(system, drive, t);
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(SimError::InvalidInput {
            context: "build_local_hamiltonian".into(),
            reason: "derived detunings are not finite".into(),
        });
    }
    let mut h = CMatrix::zeros(dim, dim);
    for i in 0..n {
        h += nuclear_operator(OpKind::Iz, i, n) * cr(deltas[i]);
        h += nuclear_operator(OpKind::Ix, i, n) * cr(drive.omega_rf_rabi);
    }
    for &(i, j, g) in system.dipolar_entries() {
        h += dipolar_term(i, j, n) * cr(g);
    }
    Ok(hermitize(h))
}

/// Effective NV relaxation rate Gamma_N = 1/T1rho + 1/t_re. `t1_rho` may be
/// infinite.
pub fn gamma_reset(t_re: f64, t1_rho: f64) -> Result<f64, SimError> {
    if !(t_re > 0.0 && t_re.is_finite()) {
        return Err(SimError::InvalidInput {
            context: "gamma_reset".into(),
            reason: format!("t_re must be positive and finite, got {t_re}"),
        });
    }
    if !(t1_rho > 0.0) {
        return Err(SimError::InvalidInput {
            context: "gamma_reset".into(),
            reason: format!("t1_rho must be positive, got {t1_rho}"),
        });
    }
    Ok(1.0 / t1_rho + 1.0 / t_re)
}

/// Complex amplitude of one nucleus in the collective jump operator:
/// alpha = sqrt(Gamma_N) (a_perp/4) / (-Delta + i Gamma_N/2).
pub fn alpha_coefficient(a_perp: f64, delta: f64, gamma_n_reset: f64) -> Result<C64, SimError> {
    if !(gamma_n_reset > 0.0 && gamma_n_reset.is_finite()) {
        return Err(SimError::InvalidInput {
            context: "alpha_coefficient".into(),
            reason: format!("gamma_n_reset must be positive and finite, got {gamma_n_reset}"),
        });
    }
    let numerator = cr(gamma_n_reset.sqrt() * a_perp / 4.0);
    let denominator = c64(-delta, gamma_n_reset / 2.0);
    Ok(numerator / denominator)
}

/// Collective lowering operator sum_i alphas[i] * Iminus_i on the
/// nuclei-only space.
pub fn collective_jump(alphas: &[C64]) -> CMatrix {
    let n = alphas.len();
    let dim = 1 << n;
    let mut l = CMatrix::zeros(dim, dim);
    for (i, &alpha) in alphas.iter().enumerate() {
        l += nuclear_operator(OpKind::Iminus, i, n) * alpha;
    }
    l
}

/// Jump operators of the effective nuclear master equation, rates folded
/// in, evaluated with the detunings at time `t`: the collective operator
/// L = sum_i alpha_i Iminus_i first, then sqrt(Gamma_i) Iminus_i for every
/// nucleus with a nonzero rate, then any requested dephasing channels
/// sqrt(Gamma_phi_i) Iz_i.
pub fn build_jump_operators_at(
    system: &SpinSystem,
    drive: &DriveParams,
    gamma_n_reset: f64,
    noise: &NoiseParams,
    t: f64,
) -> Result<Vec<CMatrix>, SimError> {
    let n = system.n_nuclei();
    noise.validate(n)?;
    let deltas = nuclear_detunings(system, drive, t);
    let alphas: Vec<C64> = system
        .nuclei
        .iter()
        .zip(deltas.iter())
        .map(|(nuc, &delta)| alpha_coefficient(nuc.a_perp, delta, gamma_n_reset))
        .collect::<Result<_, _>>()?;
    let mut jumps = vec![collective_jump(&alphas)];
    for (i, &g) in noise.gamma.iter().enumerate() {
        if g > 0.0 {
            jumps.push(nuclear_operator(OpKind::Iminus, i, n) * cr(g.sqrt()));
        }
    }
    for (i, &g) in noise.gamma_dephase.iter().enumerate() {
        if g > 0.0 {
            jumps.push(nuclear_operator(OpKind::Iz, i, n) * cr(g.sqrt()));
        }
    }
    Ok(jumps)
}

/// [`build_jump_operators_at`] with the static (t = 0) detunings.
pub fn build_jump_operators(
    system: &SpinSystem,
    drive: &DriveParams,
    gamma_n_reset: f64,
    noise: &NoiseParams,
) -> Result<Vec<CMatrix>, SimError> {
    build_jump_operators_at(system, drive, gamma_n_reset, noise, 0.0)
}

/// Validity scale of the perturbative reset picture: segments longer than
/// 1/sqrt(sum a_perp_i^2) leave the regime in which the evolution within
/// one segment is well approximated at second order.
pub fn perturbative_time_bound(system: &SpinSystem) -> f64 {
    let sum_sq: f64 = system.nuclei.iter().map(|n| n.a_perp * n.a_perp).sum();
    if sum_sq > 0.0 {
        1.0 / sum_sq.sqrt()
    } else {
        f64::INFINITY
    }
}
