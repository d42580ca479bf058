//! Entanglement and fidelity measures for the target pair: logarithmic
//! negativity, singlet/triplet populations, the closed-form steady state of
//! the balanced two-nucleus protocol, and the noise-optimal detuning rule.
//!
//! Pair basis ordering is computational, {|uu>, |ud>, |du>, |dd>}, with
//! |S> = (|ud> - |du>)/sqrt(2) and |T> = (|ud> + |du>)/sqrt(2).

use crate::error::SimError;
use crate::linalg::{
    cr, herm_eig, max_abs, partial_transpose, trace_norm, CMatrix, CVector, SubsystemDims,
};

/// Populations and entanglement scores of one reduced pair state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairObservables {
    pub pop_uu: f64,
    pub pop_dd: f64,
    pub pop_s: f64,
    pub pop_t: f64,
    pub ln_value: f64,
    pub singlet_fidelity: f64,
}

/// The two-spin singlet (|ud> - |du>)/sqrt(2).
pub fn singlet_vector() -> CVector {
    let mut v = CVector::zeros(4);
    let a = cr(1.0 / f64::sqrt(2.0));
    v[1] = a;
    v[2] = -a;
    v
}

/// The zero-projection triplet (|ud> + |du>)/sqrt(2).
pub fn triplet_vector() -> CVector {
    let mut v = CVector::zeros(4);
    let a = cr(1.0 / f64::sqrt(2.0));
    v[1] = a;
    v[2] = a;
    v
}

fn basis_vector(index: usize) -> CVector {
    let mut v = CVector::zeros(4);
    v[index] = cr(1.0);
    v
}

fn check_pair_density(rho: &CMatrix, context: &str) -> Result<(), SimError> {
    if rho.nrows() != 4 || rho.ncols() != 4 {
        return Err(SimError::InvalidInput {
            context: context.into(),
            reason: format!("expected a 4x4 pair state, got {}x{}", rho.nrows(), rho.ncols()),
        });
    }
    let scale = max_abs(rho).max(1e-300);
    let asym = max_abs(&(rho - rho.adjoint()));
    if asym > 1e-8 * scale {
        return Err(SimError::InvalidInput {
            context: context.into(),
            reason: format!("state is not Hermitian: asymmetry {asym:.3e}"),
        });
    }
    let tr = rho.trace();
    if (tr.re - 1.0).abs() > 1e-6 || tr.im.abs() > 1e-8 {
        return Err(SimError::InvalidInput {
            context: context.into(),
            reason: format!("state trace {tr} is not 1"),
        });
    }
    let herm = (rho + rho.adjoint()) * cr(0.5);
    let (values, _) = herm_eig(&herm)?;
    if values[0] < -1e-7 {
        return Err(SimError::InvalidInput {
            context: context.into(),
            reason: format!("state has eigenvalue {:.3e} below -1e-7", values[0]),
        });
    }
    Ok(())
}

/// Logarithmic negativity log2 of the trace norm of the partial transpose
/// over the second qubit, clamped at zero against round-off.
pub fn log_negativity(rho_pair: &CMatrix) -> Result<f64, SimError> {
    check_pair_density(rho_pair, "log_negativity")?;
    let herm = (rho_pair + rho_pair.adjoint()) * cr(0.5);
    let dims = SubsystemDims::qubits(2)?;
    let pt = partial_transpose(&herm, &dims, 1)?;
    let tn = trace_norm(&pt)?;
    if tn <= 1.0 + 1e-12 {
        Ok(0.0)
    } else {
        Ok(tn.log2())
    }
}

/// Closed-form steady state of the balanced protocol,
/// N (sqrt(2) delta1 |dd> - omega_rf |S>) with N = 1/sqrt(2 delta1^2 +
/// omega_rf^2). Valid for equal perpendicular couplings and opposite pair
/// detunings; `delta1` is the signed detuning of the first pair nucleus.
pub fn analytic_steady_state(delta1: f64, omega_rf: f64) -> Result<CVector, SimError> {
    if delta1 == 0.0 && omega_rf == 0.0 {
        return Err(SimError::InvalidInput {
            context: "analytic_steady_state".into(),
            reason: "delta1 and omega_rf cannot both be zero".into(),
        });
    }
    let norm = 1.0 / (2.0 * delta1 * delta1 + omega_rf * omega_rf).sqrt();
    let mut v = CVector::zeros(4);
    v[1] = cr(-norm * omega_rf / f64::sqrt(2.0));
    v[2] = cr(norm * omega_rf / f64::sqrt(2.0));
    v[3] = cr(norm * f64::sqrt(2.0) * delta1);
    Ok(v)
}

/// Logarithmic negativity of [`analytic_steady_state`] in closed form:
/// log2(1 + omega_rf^2 / (2 delta1^2 + omega_rf^2)).
///
/// For the pure state a|dd> + b|S> the partial transpose has a single
/// negative eigenvalue -b^2/2, so the trace norm is 1 + b^2 with
/// b^2 = omega_rf^2 / (2 delta1^2 + omega_rf^2). Replacing b^2 by |b|
/// here is a tempting slip; the square is required for this function to
/// coincide with [`log_negativity`] of the projector, which it does to
/// 1e-10 (see the property suite).
pub fn analytic_ln(delta1: f64, omega_rf: f64) -> Result<f64, SimError> {
    if delta1 == 0.0 && omega_rf == 0.0 {
        return Err(SimError::InvalidInput {
            context: "analytic_ln".into(),
            reason: "delta1 and omega_rf cannot both be zero".into(),
        });
    }
    if omega_rf < 0.0 {
        return Err(SimError::InvalidInput {
            context: "analytic_ln".into(),
            reason: format!("omega_rf must be nonnegative, got {omega_rf}"),
        });
    }
    let b_sq = omega_rf * omega_rf / (2.0 * delta1 * delta1 + omega_rf * omega_rf);
    Ok((1.0 + b_sq).log2())
}

/// Populations in the {|uu>, |dd>, |S>, |T>} basis plus entanglement
/// scores, all through explicit projectors.
pub fn pair_populations(rho_pair: &CMatrix) -> Result<PairObservables, SimError> {
    check_pair_density(rho_pair, "pair_populations")?;
    let expectation = |v: &CVector| -> f64 { (v.adjoint() * rho_pair * v)[(0, 0)].re };
    let pop_s = expectation(&singlet_vector());
    Ok(PairObservables {
        pop_uu: expectation(&basis_vector(0)),
        pop_dd: expectation(&basis_vector(3)),
        pop_s,
        pop_t: expectation(&triplet_vector()),
        ln_value: log_negativity(rho_pair)?,
        singlet_fidelity: pop_s,
    })
}

/// Noise-optimal detuning-to-drive ratio sqrt(k/2) for the dimensionless
/// noise strength k = sqrt(Gamma_j)/|alpha_j|.
pub fn optimal_detuning_ratio(k: f64) -> Result<f64, SimError> {
    if !(k >= 0.0 && k.is_finite()) {
        return Err(SimError::InvalidInput {
            context: "optimal_detuning_ratio".into(),
            reason: format!("k must be nonnegative and finite, got {k}"),
        });
    }
    Ok((k / 2.0).sqrt())
}


#[cfg(test)]
mod properties {
    use super::*;
    use crate::linalg::{c64, expm_unitary, kron, CMatrix};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_local_unitary(rng: &mut impl Rng) -> CMatrix {
        let a = CMatrix::from_fn(2, 2, |_, _| {
            c64(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let h = (&a + a.adjoint()) * cr(0.5);
        expm_unitary(&h, 1.0).unwrap()
    }

    fn random_pure_pair(rng: &mut impl Rng) -> CMatrix {
        let mut v = CVector::from_fn(4, |_, _| {
            c64(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        v /= cr(v.norm());
        &v * v.adjoint()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn log_negativity_is_local_unitary_invariant(seed in 0u64..10_000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rho = random_pure_pair(&mut rng);
            let u = kron(&random_local_unitary(&mut rng), &random_local_unitary(&mut rng));
            let rotated = &u * &rho * u.adjoint();
            let a = log_negativity(&rho).unwrap();
            let b = log_negativity(&rotated).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn analytic_ln_matches_numeric_ln(delta in -5e4f64..5e4, omega in 1.0f64..1e5) {
            let psi = analytic_steady_state(delta, omega).unwrap();
            let rho = &psi * psi.adjoint();
            let closed = analytic_ln(delta, omega).unwrap();
            let numeric = log_negativity(&rho).unwrap();
            prop_assert!((closed - numeric).abs() < 1e-10);
        }

        #[test]
        fn analytic_ln_decreases_with_detuning(omega in 10.0f64..1e5, step in 1.0f64..1e4) {
            let lo = analytic_ln(step, omega).unwrap();
            let hi = analytic_ln(2.0 * step, omega).unwrap();
            prop_assert!(hi < lo);
            prop_assert!(analytic_ln(-step, omega).unwrap() == lo);
        }

        #[test]
        fn pair_populations_sum_to_one(seed in 0u64..10_000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rho = random_pure_pair(&mut rng);
            let obs = pair_populations(&rho).unwrap();
            let total = obs.pop_uu + obs.pop_dd + obs.pop_s + obs.pop_t;
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn separable_mixtures_have_zero_log_negativity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let mut rho = CMatrix::zeros(4, 4);
            let mut weights = [0.0f64; 50];
            let mut total = 0.0;
            for w in weights.iter_mut() {
                *w = rng.gen_range(0.01..1.0);
                total += *w;
            }
            for &w in weights.iter() {
                let mut a = CVector::from_fn(2, |_, _| {
                    c64(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                });
                let mut b = CVector::from_fn(2, |_, _| {
                    c64(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                });
                a /= cr(a.norm());
                b /= cr(b.norm());
                rho += kron(&(&a * a.adjoint()), &(&b * b.adjoint())) * cr(w / total);
            }
            assert!(log_negativity(&rho).unwrap() == 0.0);
        }
    }
}
