//! JSON experiment configuration: unit-suffixed input fields, resolution
//! into the module-level types, and an SI echo that reproduces the run.
//!
//! Every physical quantity accepts exactly one of two spellings, a
//! conventional unit (`*_khz`, `*_us`, `*_ms`, `*_gauss`) or its SI twin
//! (`*_rad_s`, `*_s`, `*_tesla`). Commands echo a fully resolved SI-only
//! [`ConfigFile`]; feeding that echo back reproduces the original run
//! exactly.
//!
//! Detunings of the target pair resolve by precedence: explicit
//! `pair_detunings_*`, then `delta_*` (antisymmetric half-difference, with
//! optional `delta_sum_*`), and otherwise the rf carrier sits at the pair
//! midpoint so the static hyperfine values set the detunings. The rf Rabi
//! frequency may be pinned as a multiple of the resolved detuning via
//! `omega_rf_over_delta`, and the reset time as a target jump ratio via
//! `alpha_sq_over_omega`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ResetProtocol, DEFAULT_CONVERGENCE_THRESHOLD, DEFAULT_SAMPLE_EVERY};
use crate::error::SimError;
use crate::model::{
    nuclear_detunings, DetuningSchedule, DriveParams, NoiseParams, NuclearSpin,
    PhysicalConstants, SpinSystem, TWO_PI,
};

fn khz(v: f64) -> f64 {
    TWO_PI * v * 1e3
}

/// Which simulation backend a run drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Full,
    Effective,
    Both,
}

impl std::str::FromStr for Backend {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "full" => Ok(Backend::Full),
            "effective" => Ok(Backend::Effective),
            "both" => Ok(Backend::Both),
            other => Err(SimError::InvalidField {
                field: "backend".into(),
                reason: format!("unknown backend {other:?}, expected full, effective, or both"),
            }),
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::Full => "full",
            Backend::Effective => "effective",
            Backend::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NucleusEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_par_khz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_par_rad_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_perp_khz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_perp_rad_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_nm: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_m: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DipolarEntry {
    pub i: usize,
    pub j: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_khz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_rad_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub nuclei: Vec<NucleusEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dipolar: Vec<DipolarEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSection {
    Constant,
    Exponential {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta0_khz: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta0_rad_s: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rate_per_ms: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rate_per_s: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta_inf_khz: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta_inf_rad_s: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DriveSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_rf_rabi_khz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_rf_rabi_rad_s: Option<f64>,
    /// rf Rabi frequency as a multiple of the resolved pair detuning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_rf_over_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b0_gauss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b0_tesla: Option<f64>,
    /// Explicit rf carrier; when absent the carrier sits at the pair
    /// midpoint gamma_n B0 + (a_par0 + a_par1)/4.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_rf_khz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_rf_rad_s: Option<f64>,
    /// Antisymmetric pair detuning (Delta2 - Delta1)/2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_khz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_rad_s: Option<f64>,
    /// Detuning sum Delta1 + Delta2 accompanying `delta_*`; defaults to 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_sum_khz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_sum_rad_s: Option<f64>,
    /// Direct detunings [Delta1, Delta2] of the target pair; takes
    /// precedence over `delta_*`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_detunings_khz: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_detunings_rad_s: Option<[f64; 2]>,
    /// Microwave Rabi frequency override; when absent it stays locked to
    /// the rf carrier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_mw_khz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_mw_rad_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_re_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_re_s: Option<f64>,
    /// Target ratio |alpha|^2 / Omega_rf; the reset time is solved from it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_sq_over_omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarization: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1_rho_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1_rho_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nv_decay_in_segment: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Per-nucleus relaxation rates, 1/s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_per_s: Option<Vec<f64>>,
    /// Uniform coherence time; resolves to gamma = 1/T2 on every nucleus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_dephase_per_s: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<Backend>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_total_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_total_s: Option<f64>,
    /// Full backend: record every this-many reset cycles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_every: Option<usize>,
    /// Effective backend: longest integration segment. Defaults to
    /// sample_every * t_re so the two backends sample the same grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_max_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_max_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Logarithmic negativity level defining the convergence time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence_threshold: Option<f64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            backend: None,
            t_total_ms: None,
            t_total_s: None,
            sample_every: None,
            dt_max_us: None,
            dt_max_s: None,
            seed: None,
            convergence_threshold: None,
        }
    }
}

/// On-disk experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub system: SystemSection,
    pub drive: DriveSection,
    pub protocol: ProtocolSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSection>,
    pub run: RunSection,
}

/// Execution settings shared by every command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub backend: Backend,
    /// Total evolution time, seconds.
    pub t_total: f64,
    pub sample_every: usize,
    /// Longest effective-backend integration segment, seconds.
    pub dt_max: f64,
    pub seed: u64,
    pub convergence_threshold: f64,
}

/// A config resolved into module-level types, all quantities SI.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub system: SpinSystem,
    pub drive: DriveParams,
    pub protocol: ResetProtocol,
    pub noise: NoiseParams,
    pub run: RunSettings,
}

fn invalid(field: &str, reason: impl Into<String>) -> SimError {
    SimError::InvalidField {
        field: field.into(),
        reason: reason.into(),
    }
}

/// At most one of the two unit spellings, SI twin first.
fn pick(
    field: &str,
    si_name: &str,
    si: Option<f64>,
    human: Option<f64>,
    scale: f64,
) -> Result<Option<f64>, SimError> {
    match (si, human) {
        (Some(_), Some(_)) => Err(invalid(
            field,
            format!("give either this field or {si_name}, not both"),
        )),
        (Some(v), None) => Ok(Some(v)),
        (None, Some(v)) => Ok(Some(v * scale)),
        (None, None) => Ok(None),
    }
}

fn require(field: &str, value: Option<f64>, hint: &str) -> Result<f64, SimError> {
    value.ok_or_else(|| invalid(field, format!("missing; {hint}")))
}

fn finite(field: &str, value: f64) -> Result<f64, SimError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(invalid(field, format!("must be finite, got {value}")))
    }
}

/// Reset time that realizes a target |alpha|^2 / Omega_rf ratio at the
/// given jump amplitude g = a_perp/4 and detuning magnitude, solving
/// ratio * Omega = Gamma g^2 / (Delta^2 + Gamma^2/4) for the larger root
/// of Gamma and inverting Gamma = 1/T1rho + 1/t_re. The larger root is
/// the short-reset branch the protocol operates on; the ratio is
/// attainable only up to g^2 / (|Delta| Omega).
pub fn t_re_for_alpha_ratio(
    ratio: f64,
    omega_rf_rabi: f64,
    a_perp: f64,
    delta: f64,
    t1_rho: f64,
) -> Result<f64, SimError> {
    let field = "protocol.alpha_sq_over_omega";
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(invalid(field, format!("ratio must be positive, got {ratio}")));
    }
    if !(omega_rf_rabi > 0.0 && a_perp > 0.0) {
        return Err(invalid(
            field,
            "ratio form needs positive omega_rf_rabi and pair a_perp",
        ));
    }
    let g_sq = (a_perp / 4.0) * (a_perp / 4.0);
    let r_omega = ratio * omega_rf_rabi;
    let mut disc = g_sq * g_sq - (r_omega * delta) * (r_omega * delta);
    if disc < 0.0 {
        if disc > -1e-9 * g_sq * g_sq {
            disc = 0.0;
        } else {
            let max_ratio = g_sq / (delta.abs() * omega_rf_rabi);
            return Err(invalid(
                field,
                format!("ratio {ratio} exceeds the attainable maximum {max_ratio:.6}"),
            ));
        }
    }
    let gamma = 2.0 * (g_sq + disc.sqrt()) / r_omega;
    let decay = if t1_rho.is_finite() { 1.0 / t1_rho } else { 0.0 };
    if gamma <= decay {
        return Err(invalid(
            field,
            format!(
                "requested ratio needs Gamma_N = {gamma:.3e} 1/s, not reachable with \
                 1/T1rho = {decay:.3e} 1/s"
            ),
        ));
    }
    Ok(1.0 / (gamma - decay))
}

fn resolve_nuclei(section: &SystemSection) -> Result<Vec<NuclearSpin>, SimError> {
    let constants = PhysicalConstants::default();
    let mut nuclei = Vec::with_capacity(section.nuclei.len());
    for (idx, entry) in section.nuclei.iter().enumerate() {
        let path = |tail: &str| format!("system.nuclei.{idx}.{tail}");
        let a_par = pick(
            &path("a_par_khz"),
            "a_par_rad_s",
            entry.a_par_rad_s,
            entry.a_par_khz,
            khz(1.0),
        )?;
        let a_perp = pick(
            &path("a_perp_khz"),
            "a_perp_rad_s",
            entry.a_perp_rad_s,
            entry.a_perp_khz,
            khz(1.0),
        )?;
        let position = match (entry.position_m, entry.position_nm) {
            (Some(_), Some(_)) => {
                return Err(invalid(
                    &path("position_nm"),
                    "give either position_nm or position_m, not both",
                ))
            }
            (Some(p), None) => Some(p),
            (None, Some(p)) => Some([p[0] * 1e-9, p[1] * 1e-9, p[2] * 1e-9]),
            (None, None) => None,
        };
        let (a_par, a_perp) = match (a_par, a_perp, position) {
            (Some(par), Some(perp), _) => (par, perp),
            (None, None, Some(pos)) => crate::geometry::hyperfine_from_position(
                pos,
                crate::geometry::LatticeSpec::default().nv_axis,
                &constants,
            )
            .map_err(|e| invalid(&path("position_nm"), e.to_string()))?,
            _ => {
                return Err(invalid(
                    &path("a_par_khz"),
                    "give both hyperfine components, or neither plus a position",
                ))
            }
        };
        let label = entry
            .label
            .clone()
            .unwrap_or_else(|| format!("n{}", idx + 1));
        let mut nucleus = NuclearSpin::new(label, finite(&path("a_par_khz"), a_par)?, a_perp);
        nucleus.position = position;
        nuclei.push(nucleus);
    }
    Ok(nuclei)
}

fn resolve_system(section: &SystemSection) -> Result<SpinSystem, SimError> {
    let nuclei = resolve_nuclei(section)?;
    let pair = section.pair.unwrap_or([0, 1]);
    let mut dipolar = Vec::with_capacity(section.dipolar.len());
    for (idx, entry) in section.dipolar.iter().enumerate() {
        let field = format!("system.dipolar.{idx}.g_khz");
        let g = require(
            &field,
            pick(&field, "g_rad_s", entry.g_rad_s, entry.g_khz, khz(1.0))?,
            "set g_khz or g_rad_s",
        )?;
        dipolar.push((entry.i, entry.j, g));
    }
    SpinSystem::new(
        nuclei,
        (pair[0], pair[1]),
        dipolar,
        PhysicalConstants::default(),
    )
    .map_err(|e| invalid("system", e.to_string()))
}

fn resolve_schedule(section: &Option<ScheduleSection>) -> Result<DetuningSchedule, SimError> {
    match section {
        None | Some(ScheduleSection::Constant) => Ok(DetuningSchedule::Constant),
        Some(ScheduleSection::Exponential {
            delta0_khz,
            delta0_rad_s,
            rate_per_ms,
            rate_per_s,
            delta_inf_khz,
            delta_inf_rad_s,
        }) => {
            let delta0 = require(
                "drive.schedule.delta0_khz",
                pick(
                    "drive.schedule.delta0_khz",
                    "delta0_rad_s",
                    *delta0_rad_s,
                    *delta0_khz,
                    khz(1.0),
                )?,
                "the exponential schedule needs delta0",
            )?;
            let rate_lambda = require(
                "drive.schedule.rate_per_ms",
                pick(
                    "drive.schedule.rate_per_ms",
                    "rate_per_s",
                    *rate_per_s,
                    *rate_per_ms,
                    1e3,
                )?,
                "the exponential schedule needs a decay rate",
            )?;
            let delta_inf = pick(
                "drive.schedule.delta_inf_khz",
                "delta_inf_rad_s",
                *delta_inf_rad_s,
                *delta_inf_khz,
                khz(1.0),
            )?
            .unwrap_or(0.0);
            Ok(DetuningSchedule::Exponential {
                delta0,
                rate_lambda,
                delta_inf,
            })
        }
    }
}

struct ResolvedDrive {
    drive: DriveParams,
    /// Antisymmetric half-difference of the pair detunings at t = 0.
    delta_half: f64,
}

fn resolve_drive(section: &DriveSection, system: &SpinSystem) -> Result<ResolvedDrive, SimError> {
    let b0 = require(
        "drive.b0_gauss",
        pick(
            "drive.b0_gauss",
            "b0_tesla",
            section.b0_tesla,
            section.b0_gauss,
            1e-4,
        )?,
        "set b0_gauss or b0_tesla",
    )?;
    let (p0, p1) = system.pair;
    let omega_rf = match pick(
        "drive.omega_rf_khz",
        "omega_rf_rad_s",
        section.omega_rf_rad_s,
        section.omega_rf_khz,
        khz(1.0),
    )? {
        Some(v) => v,
        None => {
            system.constants.gamma_n * b0
                + (system.nuclei[p0].a_par + system.nuclei[p1].a_par) / 4.0
        }
    };

    let pair_override = match pick2(
        "drive.pair_detunings_khz",
        "pair_detunings_rad_s",
        section.pair_detunings_rad_s,
        section.pair_detunings_khz,
        khz(1.0),
    )? {
        Some(direct) => Some(direct),
        None => {
            let delta = pick(
                "drive.delta_khz",
                "delta_rad_s",
                section.delta_rad_s,
                section.delta_khz,
                khz(1.0),
            )?;
            let sum = pick(
                "drive.delta_sum_khz",
                "delta_sum_rad_s",
                section.delta_sum_rad_s,
                section.delta_sum_khz,
                khz(1.0),
            )?;
            match (delta, sum) {
                (Some(d), s) => {
                    let s = s.unwrap_or(0.0);
                    Some([s / 2.0 - d, s / 2.0 + d])
                }
                (None, Some(_)) => {
                    return Err(invalid(
                        "drive.delta_sum_khz",
                        "delta_sum accompanies delta_khz/delta_rad_s",
                    ))
                }
                (None, None) => None,
            }
        }
    };

    let schedule = resolve_schedule(&section.schedule)?;
    let omega_mw = pick(
        "drive.omega_mw_khz",
        "omega_mw_rad_s",
        section.omega_mw_rad_s,
        section.omega_mw_khz,
        khz(1.0),
    )?;

    let build = |rabi: f64| -> Result<DriveParams, SimError> {
        let mut drive = DriveParams::new(rabi, b0, omega_rf, schedule.clone())
            .map_err(|e| invalid("drive", e.to_string()))?;
        if let Some(d) = pair_override {
            drive = drive.with_pair_override(d);
        }
        if let Some(mw) = omega_mw {
            drive = drive.with_mw_override(mw);
        }
        Ok(drive)
    };

    let probe = build(0.0)?;
    let deltas = nuclear_detunings(system, &probe, 0.0);
    let delta_half = (deltas[p1] - deltas[p0]).abs() / 2.0;

    let rabi = match (
        pick(
            "drive.omega_rf_rabi_khz",
            "omega_rf_rabi_rad_s",
            section.omega_rf_rabi_rad_s,
            section.omega_rf_rabi_khz,
            khz(1.0),
        )?,
        section.omega_rf_over_delta,
    ) {
        (Some(_), Some(_)) => {
            return Err(invalid(
                "drive.omega_rf_rabi_khz",
                "give either an explicit Rabi frequency or omega_rf_over_delta, not both",
            ))
        }
        (Some(v), None) => v,
        (None, Some(ratio)) => {
            if delta_half == 0.0 {
                return Err(invalid(
                    "drive.omega_rf_over_delta",
                    "the pair detuning resolves to zero, the ratio form is undefined",
                ));
            }
            ratio * delta_half
        }
        (None, None) => {
            return Err(invalid(
                "drive.omega_rf_rabi_khz",
                "missing; set omega_rf_rabi_khz, omega_rf_rabi_rad_s, or omega_rf_over_delta",
            ))
        }
    };

    Ok(ResolvedDrive {
        drive: build(finite("drive.omega_rf_rabi_khz", rabi)?)?,
        delta_half,
    })
}

/// `pick` for two-component detuning vectors.
fn pick2(
    field: &str,
    si_name: &str,
    si: Option<[f64; 2]>,
    human: Option<[f64; 2]>,
    scale: f64,
) -> Result<Option<[f64; 2]>, SimError> {
    match (si, human) {
        (Some(_), Some(_)) => Err(invalid(
            field,
            format!("give either this field or {si_name}, not both"),
        )),
        (Some(v), None) => Ok(Some(v)),
        (None, Some(v)) => Ok(Some([v[0] * scale, v[1] * scale])),
        (None, None) => Ok(None),
    }
}

fn resolve_protocol(
    section: &ProtocolSection,
    system: &SpinSystem,
    drive: &ResolvedDrive,
) -> Result<ResetProtocol, SimError> {
    let t1_rho = pick(
        "protocol.t1_rho_ms",
        "t1_rho_s",
        section.t1_rho_s,
        section.t1_rho_ms,
        1e-3,
    )?
    .unwrap_or(f64::INFINITY);
    let t_re_direct = pick(
        "protocol.t_re_us",
        "t_re_s",
        section.t_re_s,
        section.t_re_us,
        1e-6,
    )?;
    let t_re = match (t_re_direct, section.alpha_sq_over_omega) {
        (Some(_), Some(_)) => {
            return Err(invalid(
                "protocol.t_re_us",
                "give either a reset time or alpha_sq_over_omega, not both",
            ))
        }
        (Some(v), None) => v,
        (None, Some(ratio)) => {
            let (p0, _) = system.pair;
            t_re_for_alpha_ratio(
                ratio,
                drive.drive.omega_rf_rabi,
                system.nuclei[p0].a_perp,
                drive.delta_half,
                t1_rho,
            )?
        }
        (None, None) => {
            return Err(invalid(
                "protocol.t_re_us",
                "missing; set t_re_us, t_re_s, or alpha_sq_over_omega",
            ))
        }
    };
    let polarization = section.polarization.unwrap_or(1.0);
    let protocol = ResetProtocol::new(t_re, polarization, t1_rho)
        .map_err(|e| invalid("protocol", e.to_string()))?;
    Ok(protocol.with_nv_decay(section.nv_decay_in_segment.unwrap_or(false)))
}

fn resolve_noise(section: &Option<NoiseSection>, n: usize) -> Result<NoiseParams, SimError> {
    let Some(section) = section else {
        return Ok(NoiseParams::zero(n));
    };
    let mut noise = match (&section.gamma_per_s, section.t2_s) {
        (Some(_), Some(_)) => {
            return Err(invalid(
                "noise.gamma_per_s",
                "give either per-nucleus rates or t2_s, not both",
            ))
        }
        (Some(rates), None) => NoiseParams {
            gamma: rates.clone(),
            gamma_dephase: vec![0.0; n],
        },
        (None, Some(t2)) => {
            if !(t2 > 0.0) {
                return Err(invalid("noise.t2_s", format!("must be positive, got {t2}")));
            }
            NoiseParams::uniform(n, 1.0 / t2)
        }
        (None, None) => NoiseParams::zero(n),
    };
    if let Some(dephase) = &section.gamma_dephase_per_s {
        noise.gamma_dephase = dephase.clone();
    }
    noise
        .validate(n)
        .map_err(|e| invalid("noise", e.to_string()))?;
    Ok(noise)
}

fn resolve_run(section: &RunSection, protocol: &ResetProtocol) -> Result<RunSettings, SimError> {
    let t_total = require(
        "run.t_total_ms",
        pick(
            "run.t_total_ms",
            "t_total_s",
            section.t_total_s,
            section.t_total_ms,
            1e-3,
        )?,
        "set t_total_ms or t_total_s",
    )?;
    if !(t_total > 0.0 && t_total.is_finite()) {
        return Err(invalid(
            "run.t_total_ms",
            format!("must be positive, got {t_total} s"),
        ));
    }
    let sample_every = section.sample_every.unwrap_or(DEFAULT_SAMPLE_EVERY);
    if sample_every == 0 {
        return Err(invalid("run.sample_every", "must be at least 1"));
    }
    let dt_max = pick(
        "run.dt_max_us",
        "dt_max_s",
        section.dt_max_s,
        section.dt_max_us,
        1e-6,
    )?
    .unwrap_or(protocol.t_re * sample_every as f64);
    if !(dt_max > 0.0 && dt_max.is_finite()) {
        return Err(invalid(
            "run.dt_max_us",
            format!("must be positive, got {dt_max} s"),
        ));
    }
    let convergence_threshold = section
        .convergence_threshold
        .unwrap_or(DEFAULT_CONVERGENCE_THRESHOLD);
    if !(convergence_threshold > 0.0 && convergence_threshold < 1.0) {
        return Err(invalid(
            "run.convergence_threshold",
            format!("must lie in (0, 1), got {convergence_threshold}"),
        ));
    }
    Ok(RunSettings {
        backend: section.backend.unwrap_or(Backend::Full),
        t_total,
        sample_every,
        dt_max,
        seed: section.seed.unwrap_or(0),
        convergence_threshold,
    })
}

/// Resolves a parsed config into module-level types.
pub fn resolve(file: &ConfigFile) -> Result<Resolved, SimError> {
    let system = resolve_system(&file.system)?;
    let drive = resolve_drive(&file.drive, &system)?;
    let protocol = resolve_protocol(&file.protocol, &system, &drive)?;
    let noise = resolve_noise(&file.noise, system.n_nuclei())?;
    let run = resolve_run(&file.run, &protocol)?;
    Ok(Resolved {
        system,
        drive: drive.drive,
        protocol,
        noise,
        run,
    })
}

/// Parses a JSON config string; `path` is used in error messages only.
pub fn parse_config(text: &str, path: &str) -> Result<ConfigFile, SimError> {
    serde_json::from_str(text).map_err(|source| SimError::ConfigParse {
        path: path.into(),
        source,
    })
}

/// Reads, parses, and resolves a config file.
pub fn load_config(path: &Path) -> Result<Resolved, SimError> {
    let text = std::fs::read_to_string(path).map_err(|source| SimError::ConfigRead {
        path: path.display().to_string(),
        source,
    })?;
    resolve(&parse_config(&text, &path.display().to_string())?)
}

impl Resolved {
    /// SI-only config that reproduces this run exactly when resolved again.
    pub fn echo(&self) -> ConfigFile {
        let nuclei = self
            .system
            .nuclei
            .iter()
            .map(|n| NucleusEntry {
                label: Some(n.label.clone()),
                a_par_rad_s: Some(n.a_par),
                a_perp_rad_s: Some(n.a_perp),
                position_m: n.position,
                ..NucleusEntry::default()
            })
            .collect();
        let dipolar = self
            .system
            .dipolar_entries()
            .iter()
            .map(|&(i, j, g)| DipolarEntry {
                i,
                j,
                g_khz: None,
                g_rad_s: Some(g),
            })
            .collect();
        let schedule = match self.drive.schedule {
            DetuningSchedule::Constant => ScheduleSection::Constant,
            DetuningSchedule::Exponential {
                delta0,
                rate_lambda,
                delta_inf,
            } => ScheduleSection::Exponential {
                delta0_khz: None,
                delta0_rad_s: Some(delta0),
                rate_per_ms: None,
                rate_per_s: Some(rate_lambda),
                delta_inf_khz: None,
                delta_inf_rad_s: Some(delta_inf),
            },
        };
        ConfigFile {
            system: SystemSection {
                nuclei,
                pair: Some([self.system.pair.0, self.system.pair.1]),
                dipolar,
            },
            drive: DriveSection {
                omega_rf_rabi_rad_s: Some(self.drive.omega_rf_rabi),
                b0_tesla: Some(self.drive.b0),
                omega_rf_rad_s: Some(self.drive.omega_rf),
                pair_detunings_rad_s: self.drive.pair_detuning_override,
                omega_mw_rad_s: Some(self.drive.omega_mw),
                schedule: Some(schedule),
                ..DriveSection::default()
            },
            protocol: ProtocolSection {
                t_re_s: Some(self.protocol.t_re),
                polarization: Some(self.protocol.polarization),
                t1_rho_s: self.protocol.t1_rho.is_finite().then_some(self.protocol.t1_rho),
                nv_decay_in_segment: Some(self.protocol.nv_decay_in_segment),
                ..ProtocolSection::default()
            },
            noise: Some(NoiseSection {
                gamma_per_s: Some(self.noise.gamma.clone()),
                t2_s: None,
                gamma_dephase_per_s: Some(self.noise.gamma_dephase.clone()),
            }),
            run: RunSection {
                backend: Some(self.run.backend),
                t_total_s: Some(self.run.t_total),
                sample_every: Some(self.run.sample_every),
                dt_max_s: Some(self.run.dt_max),
                seed: Some(self.run.seed),
                convergence_threshold: Some(self.run.convergence_threshold),
                ..RunSection::default()
            },
        }
    }
}
