//! Requirement profiles, dead-zone violation functionals, marginal violation
//! deltas, dual ascent on the Lagrange multipliers, and the certificate of
//! functional effort.

use serde::{Deserialize, Serialize};

use crate::error::{CdmbdError, Result};

pub const N_CHANNELS: usize = 7;

/// Default multiplier ceiling.
pub const DEFAULT_LAMBDA_MAX: f64 = 15.0;
/// Default dual-ascent step size.
pub const DEFAULT_ALPHA_LAMBDA: f64 = 0.12;
/// Fixed-point tolerance for the certificate check.
pub const CERTIFICATE_TOL: f64 = 1e-9;

/// One functional requirement: a target on a single observation channel with
/// a dead zone and a relative weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Requirement {
    pub name: String,
    pub channel: usize,
    pub tau: f64,
    pub eps: f64,
    pub weight: f64,
}

impl Requirement {
    pub fn validate(&self) -> Result<()> {
        if self.channel >= N_CHANNELS {
            return Err(CdmbdError::ChannelOutOfRange(self.channel));
        }
        if self.eps < 0.0 {
            return Err(CdmbdError::InvalidConfig(format!(
                "requirement {}: dead zone must be >= 0",
                self.name
            )));
        }
        if self.weight <= 0.0 {
            return Err(CdmbdError::InvalidConfig(format!(
                "requirement {}: weight must be > 0",
                self.name
            )));
        }
        Ok(())
    }
}

/// Ordered list of requirements making up one functional demand on the
/// blanket statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequirementProfile {
    pub name: String,
    pub requirements: Vec<Requirement>,
}

impl RequirementProfile {
    pub fn new(name: impl Into<String>, requirements: Vec<Requirement>) -> Result<Self> {
        let profile = Self {
            name: name.into(),
            requirements,
        };
        profile.validate()?;
        Ok(profile)
    }

    /// Profile with no requirements; the engine reduces to unconstrained
    /// detection under it.
    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            requirements: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for req in &self.requirements {
            req.validate()?;
        }
        let mut names: Vec<&str> = self.requirements.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.requirements.len() {
            return Err(CdmbdError::InvalidConfig(format!(
                "profile {}: requirement names must be unique",
                self.name
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.requirements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requirements.is_empty()
    }
}

/// Lagrange multiplier state for one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub lambda: Vec<f64>,
    pub lambda_max: f64,
    pub alpha_lambda: f64,
}

impl Multipliers {
    pub fn zeros(k: usize, lambda_max: f64, alpha_lambda: f64) -> Self {
        Self {
            lambda: vec![0.0; k],
            lambda_max,
            alpha_lambda,
        }
    }

    pub fn l1(&self) -> f64 {
        self.lambda.iter().sum()
    }

    pub fn is_saturated(&self, k: usize) -> bool {
        self.lambda[k] >= self.lambda_max - 1e-12
    }
}

/// Weighted dead-zone hinge: `w * max(0, |phi - tau| - eps)`.
pub fn violation(req: &Requirement, phi: f64) -> f64 {
    req.weight * ((phi - req.tau).abs() - req.eps).max(0.0)
}

/// Violation vector of a profile at a blanket observation mean.
pub fn profile_violations(profile: &RequirementProfile, mu_hat_b: &[f64]) -> Result<Vec<f64>> {
    profile
        .requirements
        .iter()
        .map(|req| {
            mu_hat_b
                .get(req.channel)
                .map(|phi| violation(req, *phi))
                .ok_or(CdmbdError::ChannelOutOfRange(req.channel))
        })
        .collect()
}

fn centroid_of(members: &[usize], node_means: &[[f64; N_CHANNELS]]) -> [f64; N_CHANNELS] {
    let mut out = [0.0; N_CHANNELS];
    for &i in members {
        for (o, v) in out.iter_mut().zip(node_means[i].iter()) {
            *o += v;
        }
    }
    let n = members.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    out
}

fn weighted_violation_sum(
    profile: &RequirementProfile,
    multipliers: &Multipliers,
    mu: &[f64; N_CHANNELS],
) -> f64 {
    profile
        .requirements
        .iter()
        .zip(multipliers.lambda.iter())
        .map(|(req, lam)| lam * violation(req, mu[req.channel]))
        .sum()
}

/// Marginal violation change of having `candidate` inside the blanket,
/// evaluated through the centroid surrogate:
/// `delta_B(i) = sum_k lambda_k [v_k(B with i) - v_k(B without i)]`.
///
/// For a candidate outside the blanket this is the cost of absorbing it; for
/// a current member it is the cost its presence already incurs. Removing the
/// only member is rejected.
pub fn marginal_violation_delta(
    profile: &RequirementProfile,
    multipliers: &Multipliers,
    blanket: &[usize],
    candidate: usize,
    node_means: &[[f64; N_CHANNELS]],
) -> Result<f64> {
    if profile.len() != multipliers.lambda.len() {
        return Err(CdmbdError::DimensionMismatch(
            "multipliers do not match the profile".into(),
        ));
    }
    if candidate >= node_means.len() {
        return Err(CdmbdError::DimensionMismatch(format!(
            "candidate {candidate} out of {} nodes",
            node_means.len()
        )));
    }
    let is_member = blanket.contains(&candidate);
    let mut with: Vec<usize> = blanket.to_vec();
    let mut without: Vec<usize> = blanket.to_vec();
    if is_member {
        without.retain(|&i| i != candidate);
    } else {
        with.push(candidate);
    }
    if without.is_empty() {
        return Err(CdmbdError::EmptyPostEditBlanket);
    }
    if profile.is_empty() {
        return Ok(0.0);
    }
    let v_with = weighted_violation_sum(profile, multipliers, &centroid_of(&with, node_means));
    let v_without =
        weighted_violation_sum(profile, multipliers, &centroid_of(&without, node_means));
    Ok(v_with - v_without)
}

/// One dual-ascent update: `lambda_k <- clip(lambda_k + alpha * v_k, 0, lambda_max)`.
pub fn dual_ascent_step(multipliers: &Multipliers, violations: &[f64]) -> Multipliers {
    let lambda = multipliers
        .lambda
        .iter()
        .zip(violations.iter())
        .map(|(lam, v)| (lam + multipliers.alpha_lambda * v).clamp(0.0, multipliers.lambda_max))
        .collect();
    Multipliers {
        lambda,
        lambda_max: multipliers.lambda_max,
        alpha_lambda: multipliers.alpha_lambda,
    }
}

/// Converged multiplier vector with its violations and saturation flags.
///
/// `converged[k]` records whether entry `k` sits at its dual fixed point
/// (one more ascent step would leave it unchanged). An unsaturated converged
/// entry necessarily has a zero violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub lambda_star: Vec<f64>,
    pub violations: Vec<f64>,
    pub saturated: Vec<bool>,
    pub converged: Vec<bool>,
}

impl Certificate {
    /// Package the final multiplier state without asserting convergence;
    /// entries still moving under dual ascent are flagged `converged: false`.
    pub fn observe(multipliers: &Multipliers, violations: &[f64]) -> Self {
        let next = dual_ascent_step(multipliers, violations);
        let saturated: Vec<bool> = (0..multipliers.lambda.len())
            .map(|k| multipliers.is_saturated(k))
            .collect();
        let converged = multipliers
            .lambda
            .iter()
            .zip(next.lambda.iter())
            .map(|(a, b)| (a - b).abs() <= CERTIFICATE_TOL)
            .collect();
        Self {
            lambda_star: multipliers.lambda.clone(),
            violations: violations.to_vec(),
            saturated,
            converged,
        }
    }

    pub fn l1(&self) -> f64 {
        self.lambda_star.iter().sum()
    }
}

/// Strict certificate constructor: every unsaturated entry must be at its
/// dual fixed point, i.e. its violation must vanish. A violated fixed point
/// signals that the chain has not converged.
pub fn certificate(multipliers: &Multipliers, violations: &[f64]) -> Result<Certificate> {
    let cert = Certificate::observe(multipliers, violations);
    for k in 0..cert.lambda_star.len() {
        if !cert.saturated[k] && violations[k].abs() > CERTIFICATE_TOL / multipliers.alpha_lambda {
            return Err(CdmbdError::CertificateFixedPoint {
                index: k,
                lambda: cert.lambda_star[k],
                violation: violations[k],
            });
        }
    }
    Ok(cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn espresso_r1() -> Requirement {
        Requirement {
            name: "R1".into(),
            channel: 1,
            tau: 47.5,
            eps: 7.5,
            weight: 1.5,
        }
    }

    #[test]
    fn violation_misses_low_edge_by_nine_degrees() {
        // |31 - 47.5| - 7.5 = 9, weighted by 1.5.
        assert_relative_eq!(violation(&espresso_r1(), 31.0), 13.5, epsilon = 1e-12);
    }

    #[test]
    fn violation_zero_at_target_and_dead_zone_edge() {
        let req = espresso_r1();
        assert_eq!(violation(&req, req.tau), 0.0);
        assert_eq!(violation(&req, req.tau + req.eps), 0.0);
        assert_eq!(violation(&req, req.tau - req.eps), 0.0);
    }

    #[test]
    fn profile_violations_reads_channels() {
        let profile = RequirementProfile::new(
            "travel-mug",
            vec![Requirement {
                name: "R1".into(),
                channel: 1,
                tau: 30.0,
                eps: 8.0,
                weight: 1.5,
            }],
        )
        .unwrap();
        let mut mu = [0.0; 7];
        mu[1] = 31.0; // inside [22, 38]
        assert_eq!(profile_violations(&profile, &mu).unwrap(), vec![0.0]);
        mu[1] = 30.0;
        assert_eq!(profile_violations(&profile, &mu).unwrap(), vec![0.0]);
    }

    #[test]
    fn profile_rejects_bad_channel_and_dup_names() {
        let bad = RequirementProfile::new(
            "x",
            vec![Requirement {
                name: "R1".into(),
                channel: 9,
                tau: 0.0,
                eps: 0.0,
                weight: 1.0,
            }],
        );
        assert!(bad.is_err());
        let dup = RequirementProfile::new(
            "x",
            vec![espresso_r1(), espresso_r1()],
        );
        assert!(dup.is_err());
    }

    #[test]
    fn dual_step_matches_defining_arithmetic() {
        let m = Multipliers::zeros(1, 15.0, 0.12);
        let next = dual_ascent_step(&m, &[13.5]);
        assert_relative_eq!(next.lambda[0], 1.62, epsilon = 1e-12);
    }

    #[test]
    fn dual_step_clips_at_ceiling_and_fixes_zero_violation() {
        let m = Multipliers {
            lambda: vec![15.0, 3.0],
            lambda_max: 15.0,
            alpha_lambda: 0.12,
        };
        let next = dual_ascent_step(&m, &[100.0, 0.0]);
        assert_eq!(next.lambda[0], 15.0);
        assert_eq!(next.lambda[1], 3.0);
    }

    #[test]
    fn marginal_delta_zero_without_pressure() {
        let profile = RequirementProfile::new("p", vec![espresso_r1()]).unwrap();
        let m = Multipliers::zeros(1, 15.0, 0.12);
        let means = vec![[30.0; 7], [40.0; 7], [50.0; 7]];
        for cand in 0..3 {
            let d = marginal_violation_delta(&profile, &m, &[0, 1], cand, &means).unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn marginal_delta_zero_for_centroid_matching_node() {
        let profile = RequirementProfile::new("p", vec![espresso_r1()]).unwrap();
        let m = Multipliers {
            lambda: vec![5.0],
            lambda_max: 15.0,
            alpha_lambda: 0.12,
        };
        // Candidate 2 sits exactly on the blanket centroid of {0, 1}.
        let means = vec![[10.0; 7], [20.0; 7], [15.0; 7]];
        let d = marginal_violation_delta(&profile, &m, &[0, 1], 2, &means).unwrap();
        assert_relative_eq!(d, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn marginal_delta_positive_when_every_node_hurts() {
        // Target far below all node values: absorbing any outside node keeps
        // the mean far from the target, but nodes above the blanket centroid
        // make it strictly worse.
        let profile = RequirementProfile::new(
            "p",
            vec![Requirement {
                name: "R1".into(),
                channel: 1,
                tau: 25.0,
                eps: 4.0,
                weight: 1.5,
            }],
        )
        .unwrap();
        let m = Multipliers {
            lambda: vec![15.0],
            lambda_max: 15.0,
            alpha_lambda: 0.1,
        };
        let mut means = vec![[0.0; 7]; 4];
        for (i, mean) in means.iter_mut().enumerate() {
            mean[1] = 83.0 + i as f64; // all far above 25
        }
        for cand in 2..4 {
            let d = marginal_violation_delta(&profile, &m, &[0, 1], cand, &means).unwrap();
            assert!(d > 0.0, "candidate {cand}: delta {d}");
        }
    }

    #[test]
    fn marginal_delta_rejects_emptying_the_blanket() {
        let profile = RequirementProfile::new("p", vec![espresso_r1()]).unwrap();
        let m = Multipliers::zeros(1, 15.0, 0.12);
        let means = vec![[0.0; 7]; 2];
        let err = marginal_violation_delta(&profile, &m, &[0], 0, &means);
        assert!(matches!(err, Err(CdmbdError::EmptyPostEditBlanket)));
    }

    #[test]
    fn certificate_two_saturated_multipliers_sum_to_thirty() {
        // Persistent violations on two of four requirements drive exactly two
        // multipliers to the ceiling: |lambda*|_1 = 30.0.
        let mut m = Multipliers::zeros(4, 15.0, 0.12);
        let v = [13.5, 0.0, 3.2, 0.0];
        for _ in 0..50 {
            m = dual_ascent_step(&m, &v);
        }
        let cert = Certificate::observe(&m, &v);
        assert_relative_eq!(cert.l1(), 30.0, epsilon = 1e-9);
        assert_eq!(cert.saturated, vec![true, false, true, false]);
        assert!(cert.converged.iter().all(|c| *c));
        assert!(certificate(&m, &v).is_ok());
        assert!(cert.lambda_star[0] > 0.0);
    }

    #[test]
    fn certificate_all_zero_when_never_violated() {
        let m = Multipliers::zeros(3, 15.0, 0.12);
        let cert = certificate(&m, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(cert.lambda_star, vec![0.0; 3]);
        assert!(!cert.saturated.iter().any(|s| *s));
    }

    #[test]
    fn certificate_flags_unconverged_entry() {
        let m = Multipliers {
            lambda: vec![6.0],
            lambda_max: 15.0,
            alpha_lambda: 0.12,
        };
        let err = certificate(&m, &[1.0]);
        assert!(matches!(err, Err(CdmbdError::CertificateFixedPoint { .. })));
        let cert = Certificate::observe(&m, &[1.0]);
        assert_eq!(cert.converged, vec![false]);
    }

    proptest! {
        #[test]
        fn prop_violation_nonnegative_and_dead_zone(phi in -200.0f64..200.0) {
            let req = espresso_r1();
            let v = violation(&req, phi);
            prop_assert!(v >= 0.0);
            if (phi - req.tau).abs() <= req.eps {
                prop_assert_eq!(v, 0.0);
            }
        }

        #[test]
        fn prop_violation_lipschitz(a in -100.0f64..100.0, b in -100.0f64..100.0) {
            let req = espresso_r1();
            let lhs = (violation(&req, a) - violation(&req, b)).abs();
            prop_assert!(lhs <= req.weight * (a - b).abs() + 1e-12);
        }

        #[test]
        fn prop_dual_ascent_monotone(lam in 0.0f64..15.0, v in 0.0f64..50.0) {
            let m = Multipliers {
                lambda: vec![lam],
                lambda_max: 15.0,
                alpha_lambda: 0.12,
            };
            let next = dual_ascent_step(&m, &[v]);
            prop_assert!(next.lambda[0] >= lam - 1e-12);
            if v == 0.0 {
                prop_assert_eq!(next.lambda[0], lam);
            }
        }
    }
}
