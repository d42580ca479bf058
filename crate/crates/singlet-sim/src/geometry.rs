//! Spatial physics around the NV center: dipolar couplings between nuclei,
//! point-dipole hyperfine components from NV-relative positions, and Monte
//! Carlo estimation of how often a usable 13C dimer occurs in the diamond
//! lattice.
//!
//! All lengths are in meters and all couplings in rad/s. Angles are
//! measured against unit direction vectors supplied by the caller.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::model::PhysicalConstants;

/// Shortest separation the point-dipole coupling formula accepts.
pub const MIN_DIPOLAR_SEPARATION: f64 = 0.05e-9;
/// Shortest NV-nucleus distance the point-dipole hyperfine model accepts;
/// closer than this the contact contribution it omits becomes relevant.
pub const MIN_HYPERFINE_DISTANCE: f64 = 0.3e-9;
/// Smallest Monte Carlo sample size `dimer_abundance` accepts.
pub const MIN_ABUNDANCE_TRIALS: u64 = 10_000;
/// Trials per RNG stream in `dimer_abundance`. Fixed so that the result
/// depends only on the seed, not on how shards map to threads.
const SHARD_TRIALS: u64 = 4096;

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: [f64; 3], context: &str) -> Result<[f64; 3], SimError> {
    let n = norm(a);
    if !n.is_finite() || n < 1e-300 {
        return Err(SimError::InvalidInput {
            context: context.into(),
            reason: format!("direction vector has degenerate length {n:e}"),
        });
    }
    Ok([a[0] / n, a[1] / n, a[2] / n])
}

/// Diamond lattice description used by the dimer abundance estimate.
///
/// `lattice_constant` is the conventional cubic cell edge and `cc_bond`
/// the nearest-neighbor carbon separation; the two are redundant
/// (`cc_bond` = `lattice_constant`·√3/4 up to the tabulated rounding) and
/// validation enforces their consistency to 1%.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    /// Conventional cubic cell edge, meters.
    #[serde(default = "default_lattice_constant")]
    pub lattice_constant: f64,
    /// Nearest-neighbor carbon bond length, meters.
    #[serde(default = "default_cc_bond")]
    pub cc_bond: f64,
    /// NV symmetry axis, unit vector in crystal coordinates.
    #[serde(default = "default_nv_axis")]
    pub nv_axis: [f64; 3],
    /// 13C isotopic abundance, probability per carbon site.
    #[serde(default = "default_abundance")]
    pub abundance: f64,
}

fn default_lattice_constant() -> f64 {
    0.357e-9
}

fn default_cc_bond() -> f64 {
    0.154e-9
}

fn default_nv_axis() -> [f64; 3] {
    let s = 1.0 / 3f64.sqrt();
    [s, s, s]
}

fn default_abundance() -> f64 {
    0.0055
}

impl Default for LatticeSpec {
    fn default() -> Self {
        Self {
            lattice_constant: default_lattice_constant(),
            cc_bond: default_cc_bond(),
            nv_axis: default_nv_axis(),
            abundance: default_abundance(),
        }
    }
}

impl LatticeSpec {
    /// Builds a spec, normalizing `nv_axis`, and validates it.
    pub fn new(
        lattice_constant: f64,
        cc_bond: f64,
        nv_axis: [f64; 3],
        abundance: f64,
    ) -> Result<Self, SimError> {
        let spec = Self {
            lattice_constant,
            cc_bond,
            nv_axis: unit(nv_axis, "LatticeSpec")?,
            abundance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let reject = |reason: String| SimError::InvalidInput {
            context: "LatticeSpec".into(),
            reason,
        };
        if !(self.lattice_constant.is_finite() && self.lattice_constant > 0.0) {
            return Err(reject(format!(
                "lattice_constant must be positive, got {}",
                self.lattice_constant
            )));
        }
        if !(self.cc_bond.is_finite() && self.cc_bond > 0.0) {
            return Err(reject(format!(
                "cc_bond must be positive, got {}",
                self.cc_bond
            )));
        }
        let geometric = self.lattice_constant * 3f64.sqrt() / 4.0;
        if (self.cc_bond - geometric).abs() > 0.01 * geometric {
            return Err(reject(format!(
                "cc_bond {:.4e} inconsistent with lattice_constant * sqrt(3)/4 = {:.4e}",
                self.cc_bond, geometric
            )));
        }
        if (norm(self.nv_axis) - 1.0).abs() > 1e-12 {
            return Err(reject(format!(
                "nv_axis must be a unit vector, norm {}",
                norm(self.nv_axis)
            )));
        }
        if !(self.abundance.is_finite() && (0.0..=1.0).contains(&self.abundance)) {
            return Err(reject(format!(
                "abundance must lie in [0, 1], got {}",
                self.abundance
            )));
        }
        Ok(())
    }
}

/// Secular dipole-dipole coupling between two like nuclei separated by
/// `r_vec` in a magnetic field along `b_dir`, in rad/s:
///
/// g = (μ0/4π) ħ γ_n² (1 − 3 cos²θ) / r³
///
/// with θ the angle between `r_vec` and `b_dir`. The sign is kept; the
/// coupling vanishes at the magic angle cos²θ = 1/3.
pub fn dipolar_coupling(
    r_vec: [f64; 3],
    b_dir: [f64; 3],
    constants: &PhysicalConstants,
) -> Result<f64, SimError> {
    constants.validate()?;
    let r = norm(r_vec);
    if !r.is_finite() || r < MIN_DIPOLAR_SEPARATION {
        return Err(SimError::InvalidInput {
            context: "dipolar_coupling".into(),
            reason: format!("separation {r:e} m is below {MIN_DIPOLAR_SEPARATION:e} m"),
        });
    }
    let b = unit(b_dir, "dipolar_coupling")?;
    let cos = dot(r_vec, b) / r;
    let prefactor =
        constants.mu0_over_4pi * constants.hbar * constants.gamma_n * constants.gamma_n
            / (r * r * r);
    Ok(prefactor * (1.0 - 3.0 * cos * cos))
}

/// Secular hyperfine components of a nucleus at `pos` relative to the NV,
/// in the point-dipole model, in rad/s:
///
/// P = (μ0/4π) ħ γ_e γ_n / r³,
/// a_∥ = P (3 cos²θ − 1),  a_⊥ = 3 P |cosθ sinθ|
///
/// with θ the angle between `pos` and `nv_axis`. The parallel component
/// keeps its sign; the perpendicular component is a magnitude, its phase
/// being absorbable into the nuclear basis.
pub fn hyperfine_from_position(
    pos: [f64; 3],
    nv_axis: [f64; 3],
    constants: &PhysicalConstants,
) -> Result<(f64, f64), SimError> {
    constants.validate()?;
    let r = norm(pos);
    if !r.is_finite() || r < MIN_HYPERFINE_DISTANCE {
        return Err(SimError::InvalidInput {
            context: "hyperfine_from_position".into(),
            reason: format!("distance {r:e} m is below {MIN_HYPERFINE_DISTANCE:e} m"),
        });
    }
    let axis = unit(nv_axis, "hyperfine_from_position")?;
    let cos = dot(pos, axis) / r;
    let sin_sq = (1.0 - cos * cos).max(0.0);
    let prefactor = constants.mu0_over_4pi * constants.hbar * constants.gamma_e
        * constants.gamma_n
        / (r * r * r);
    let a_par = prefactor * (3.0 * cos * cos - 1.0);
    let a_perp = 3.0 * prefactor * (cos.abs() * sin_sq.sqrt());
    Ok((a_par, a_perp))
}

/// Counting conventions for [`dimer_abundance`]. The defaults measure the
/// shell distance from the bond midpoint, require the bond line to lie
/// within 1 degree of the NV axis, and treat a bond and its reverse as the
/// same orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimerRules {
    /// Measure the distance shell from the bond midpoint; otherwise from
    /// the atom nearer the NV.
    pub midpoint_distance: bool,
    /// Largest accepted angle, radians, between the bond line and the axis.
    pub angle_tolerance: f64,
    /// Accept bonds pointing opposite the axis as aligned.
    pub count_antiparallel: bool,
}

impl Default for DimerRules {
    fn default() -> Self {
        Self {
            midpoint_distance: true,
            angle_tolerance: 1f64.to_radians(),
            count_antiparallel: true,
        }
    }
}

/// Monte Carlo estimate of the probability that one random placement of
/// 13C on the lattice contains an axis-aligned dimer in the distance shell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbundanceEstimate {
    /// Fraction of realizations containing at least one qualifying dimer.
    pub probability: f64,
    /// Binomial standard error of `probability`.
    pub std_error: f64,
    pub successes: u64,
    pub trials: u64,
    /// Number of lattice bonds that pass the orientation and shell rules;
    /// only their endpoint occupancies decide a trial.
    pub candidate_bonds: usize,
    /// Number of carbon sites populated per realization.
    pub sites: usize,
    pub seed: u64,
    /// RNG algorithm identifier.
    pub rng: String,
}

/// Carbon sites of the diamond lattice within `r_cut` of the NV (which
/// occupies the origin site and is skipped), plus the index pairs of
/// nearest-neighbor bonds that satisfy `rules` within `[r_min, r_max]`.
///
/// Sites live on the quarter-cell integer grid: the FCC sublattice has
/// coordinates that are even multiples of `lattice_constant`/4 summing to
/// a multiple of 4, the second sublattice is offset by (1,1,1) quarters,
/// and every bond runs along a (±1,±1,±1) quarter diagonal.
fn candidate_lattice(
    spec: &LatticeSpec,
    r_min: f64,
    r_max: f64,
    rules: &DimerRules,
) -> (Vec<[f64; 3]>, Vec<(usize, usize)>) {
    let a = spec.lattice_constant;
    let quarter = a / 4.0;
    let r_cut = r_max + 2.0 * spec.cc_bond;
    let n_cells = (r_cut / a).ceil() as i64 + 1;

    let fcc = [[0i64, 0, 0], [0, 2, 2], [2, 0, 2], [2, 2, 0]];
    let mut sites: Vec<[f64; 3]> = Vec::new();
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    for cx in -n_cells..=n_cells {
        for cy in -n_cells..=n_cells {
            for cz in -n_cells..=n_cells {
                for f in fcc {
                    for offset in [[0i64, 0, 0], [1, 1, 1]] {
                        let q = [
                            4 * cx + f[0] + offset[0],
                            4 * cy + f[1] + offset[1],
                            4 * cz + f[2] + offset[2],
                        ];
                        if q == [0, 0, 0] {
                            continue;
                        }
                        let pos = [
                            q[0] as f64 * quarter,
                            q[1] as f64 * quarter,
                            q[2] as f64 * quarter,
                        ];
                        if norm(pos) <= r_cut {
                            index.entry(q).or_insert_with(|| {
                                sites.push(pos);
                                sites.len() - 1
                            });
                        }
                    }
                }
            }
        }
    }

    let cos_tol = rules.angle_tolerance.cos();
    let bond_dirs = [[1i64, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]];
    let mut bonds: Vec<(usize, usize)> = Vec::new();
    let mut keys: Vec<[i64; 3]> = index.keys().copied().collect();
    keys.sort_unstable();
    for q in keys {
        let i = index[&q];
        for d in bond_dirs {
            let partner = [q[0] + d[0], q[1] + d[1], q[2] + d[2]];
            let Some(&j) = index.get(&partner) else {
                continue;
            };
            let dir = unit(
                [d[0] as f64, d[1] as f64, d[2] as f64],
                "candidate_lattice",
            )
            .expect("bond diagonal is nonzero");
            let along = dot(dir, spec.nv_axis);
            let aligned = if rules.count_antiparallel {
                along.abs() >= cos_tol
            } else {
                along >= cos_tol
            };
            if !aligned {
                continue;
            }
            let (p, r) = (sites[i], sites[j]);
            let distance = if rules.midpoint_distance {
                norm([
                    (p[0] + r[0]) / 2.0,
                    (p[1] + r[1]) / 2.0,
                    (p[2] + r[2]) / 2.0,
                ])
            } else {
                norm(p).min(norm(r))
            };
            if distance >= r_min && distance <= r_max {
                bonds.push((i, j));
            }
        }
    }
    (sites, bonds)
}

/// Estimates the probability that a random isotopic placement contains a
/// 13C-13C nearest-neighbor bond aligned with the NV axis whose shell
/// distance lies in `[r_min, r_max]`, using the default counting rules.
///
/// Each trial populates every carbon site within `r_max` + 2·`cc_bond` of
/// the NV independently with probability `spec.abundance` and checks the
/// precomputed candidate bonds. Trials are split into fixed-size shards,
/// one ChaCha8 stream per shard, so the result is reproducible for a given
/// seed and independent of thread count.
pub fn dimer_abundance(
    spec: &LatticeSpec,
    r_min: f64,
    r_max: f64,
    trials: u64,
    seed: u64,
) -> Result<AbundanceEstimate, SimError> {
    dimer_abundance_with_rules(spec, r_min, r_max, trials, seed, &DimerRules::default())
}

/// [`dimer_abundance`] with explicit counting rules.
pub fn dimer_abundance_with_rules(
    spec: &LatticeSpec,
    r_min: f64,
    r_max: f64,
    trials: u64,
    seed: u64,
    rules: &DimerRules,
) -> Result<AbundanceEstimate, SimError> {
    spec.validate()?;
    let reject = |reason: String| SimError::InvalidInput {
        context: "dimer_abundance".into(),
        reason,
    };
    if !(r_min.is_finite() && r_max.is_finite() && 0.0 <= r_min && r_min < r_max) {
        return Err(reject(format!(
            "need 0 <= r_min < r_max, got [{r_min:e}, {r_max:e}]"
        )));
    }
    if trials < MIN_ABUNDANCE_TRIALS {
        return Err(reject(format!(
            "trials {trials} is below the minimum {MIN_ABUNDANCE_TRIALS}"
        )));
    }
    if !(rules.angle_tolerance.is_finite() && rules.angle_tolerance >= 0.0) {
        return Err(reject(format!(
            "angle_tolerance must be nonnegative, got {}",
            rules.angle_tolerance
        )));
    }

    let (sites, bonds) = candidate_lattice(spec, r_min, r_max, rules);
    let n_shards = trials.div_ceil(SHARD_TRIALS);
    let counts: Vec<u64> = (0..n_shards)
        .into_par_iter()
        .map(|shard| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shard);
            let shard_trials = SHARD_TRIALS.min(trials - shard * SHARD_TRIALS);
            let mut occupied = vec![false; sites.len()];
            let mut successes = 0u64;
            for _ in 0..shard_trials {
                for slot in occupied.iter_mut() {
                    *slot = rng.gen_bool(spec.abundance);
                }
                if bonds.iter().any(|&(i, j)| occupied[i] && occupied[j]) {
                    successes += 1;
                }
            }
            successes
        })
        .collect();
    let successes: u64 = counts.iter().sum();

    let p = successes as f64 / trials as f64;
    Ok(AbundanceEstimate {
        probability: p,
        std_error: (p * (1.0 - p) / trials as f64).sqrt(),
        successes,
        trials,
        candidate_bonds: bonds.len(),
        sites: sites.len(),
        seed,
        rng: "chacha8".into(),
    })
}
