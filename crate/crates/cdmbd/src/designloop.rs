//! Gaussian user models, the KL design gap, blanket compatibility, the
//! extended objective, and the closed design loop that aligns user models
//! with inferred cup contact distributions.
//!
//! Contact space is (outer temperature degC, grip radius mm, curvature 1/m).
//! Preference profiles quote curvature per metre; the implied radius is its
//! reciprocal. The dynamics preference rho_pref rides along in the user
//! model but stays outside the KL.

use serde::{Deserialize, Serialize};

use crate::engine::{
    run_multichain_with_features, ChainConfig, ChainResult, NodeFeatures, Partition,
};
use crate::error::{CdmbdError, Result};
use crate::requirements::{Multipliers, RequirementProfile};
use crate::simulator::{ObservationTensor, StyleName};
use crate::statespace::Role;

pub const CONTACT_DIM: usize = 3;

/// Hard floor on cup-side contact standard deviations. Keeping the cup at
/// least as wide as the initial user priors makes prior contraction raise
/// the gap, which is the inverse-loop mechanism the loop experiment isolates.
pub const DEFAULT_CONTACT_SIGMA_FLOOR: [f64; CONTACT_DIM] = [2.1, 2.1, 2.1];

/// Diagonal-Gaussian preference model over contact channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserModel {
    pub name: String,
    /// Contact-space mean: (T_outer degC, radius mm, curvature 1/m).
    pub mu: [f64; CONTACT_DIM],
    /// Preferred dynamical mode; carried but not compared in the KL.
    pub rho_pref: f64,
    /// Isotropic prior standard deviation.
    pub sigma: f64,
}

impl UserModel {
    pub fn new(
        name: impl Into<String>,
        t_pref: f64,
        rho_pref: f64,
        kappa_pref_per_m: f64,
        sigma: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(CdmbdError::InvalidConfig(
                "user sigma must be > 0".into(),
            ));
        }
        if !(kappa_pref_per_m > 0.0) {
            return Err(CdmbdError::InvalidConfig(
                "kappa preference must be > 0".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            mu: [t_pref, 1000.0 / kappa_pref_per_m, kappa_pref_per_m],
            rho_pref,
            sigma,
        })
    }

    /// The three preference profiles used by the loop experiment.
    pub fn presets() -> Vec<UserModel> {
        vec![
            UserModel::new("cold-sensitive", 34.0, 0.50, 22.0, 2.0).expect("preset"),
            UserModel::new("standard", 47.0, 0.51, 20.0, 2.0).expect("preset"),
            UserModel::new("heat-tolerant", 62.0, 0.47, 18.0, 2.0).expect("preset"),
        ]
    }

    pub fn sigma_diag(&self) -> [f64; CONTACT_DIM] {
        [self.sigma; CONTACT_DIM]
    }
}

/// Blanket contact statistics of one inferred cup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactDistribution {
    pub style: StyleName,
    pub mu: [f64; CONTACT_DIM],
    pub sigma: [f64; CONTACT_DIM],
}

/// Closed-form KL divergence between diagonal Gaussians,
/// `D_KL(N(mu1, diag sig1^2) || N(mu2, diag sig2^2))`.
pub fn gaussian_kl(mu1: &[f64], sig1: &[f64], mu2: &[f64], sig2: &[f64]) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || sig1.len() != d || sig2.len() != d {
        return Err(CdmbdError::DimensionMismatch(
            "KL operands must share a dimension".into(),
        ));
    }
    let mut total = 0.0;
    for j in 0..d {
        if !(sig1[j] > 0.0) || !(sig2[j] > 0.0) {
            return Err(CdmbdError::Numerical(
                "KL needs strictly positive standard deviations".into(),
            ));
        }
        let ratio = sig2[j] / sig1[j];
        let diff = mu1[j] - mu2[j];
        total += ratio.ln() + (sig1[j] * sig1[j] + diff * diff) / (2.0 * sig2[j] * sig2[j]) - 0.5;
    }
    Ok(total)
}

/// Design gap for a user and a cup: KL from the user's preference prior to
/// the cup's contact distribution. The direction is fixed user-to-cup.
pub fn design_gap(user: &UserModel, cup: &ContactDistribution) -> Result<f64> {
    gaussian_kl(&user.mu, &user.sigma_diag(), &cup.mu, &cup.sigma)
}

/// Symmetric scalar summary of mutual fit: negative symmetrized KL. Zero iff
/// the distributions coincide, negative otherwise.
pub fn compatibility(cup: &ContactDistribution, user: &UserModel) -> Result<f64> {
    let forward = gaussian_kl(&cup.mu, &cup.sigma, &user.mu, &user.sigma_diag())?;
    let backward = gaussian_kl(&user.mu, &user.sigma_diag(), &cup.mu, &cup.sigma)?;
    Ok(-0.5 * (forward + backward))
}

/// Extended objective combining data fit, requirement satisfaction, and user
/// compatibility.
pub fn b2b_objective(
    elbo_proxy: f64,
    multipliers: &Multipliers,
    violations: &[f64],
    compat: f64,
    gamma: f64,
) -> f64 {
    let penalty: f64 = multipliers
        .lambda
        .iter()
        .zip(violations.iter())
        .map(|(l, v)| l * v)
        .sum();
    elbo_proxy - penalty + gamma * compat
}

/// Contact distribution of an inferred blanket: centroid and empirical
/// standard deviation of the blanket nodes' time-averages over the contact
/// channels, with curvature rescaled to 1/m and a componentwise floor.
pub fn cup_contact_distribution(
    features: &NodeFeatures,
    chain: &ChainResult,
    style: StyleName,
    sigma_floor: &[f64; CONTACT_DIM],
) -> Result<ContactDistribution> {
    let members = chain.partition.members(Role::Blanket);
    if members.is_empty() {
        return Err(CdmbdError::EmptyBlanket);
    }
    // Channels: T_outer (1), r (4), kappa (5, converted from 1/mm to 1/m).
    let channels = [1usize, 4, 5];
    let scale = [1.0, 1.0, 1000.0];
    let n = members.len() as f64;
    let mut mu = [0.0; CONTACT_DIM];
    for &i in &members {
        for (j, &c) in channels.iter().enumerate() {
            mu[j] += features.raw_means[i][c] * scale[j];
        }
    }
    for m in &mut mu {
        *m /= n;
    }
    let mut sigma = [0.0; CONTACT_DIM];
    for &i in &members {
        for (j, &c) in channels.iter().enumerate() {
            let d = features.raw_means[i][c] * scale[j] - mu[j];
            sigma[j] += d * d;
        }
    }
    for (j, s) in sigma.iter_mut().enumerate() {
        *s = (*s / n).sqrt().max(sigma_floor[j]).max(1e-3);
    }
    Ok(ContactDistribution { style, mu, sigma })
}

/// Inverse-loop update: the preference mean moves toward the target contact
/// statistics at the learning rate, and the prior variance contracts by the
/// given fraction (sigma^2 scales by 1 - contraction).
pub fn update_user_model(
    user: &UserModel,
    target: &ContactDistribution,
    lr: f64,
    contraction: f64,
) -> Result<UserModel> {
    if !(0.0..=1.0).contains(&lr) {
        return Err(CdmbdError::InvalidConfig("lr must be in [0, 1]".into()));
    }
    if !(0.0..1.0).contains(&contraction) {
        return Err(CdmbdError::InvalidConfig(
            "contraction must be in [0, 1)".into(),
        ));
    }
    let mut mu = user.mu;
    for j in 0..CONTACT_DIM {
        mu[j] += lr * (target.mu[j] - mu[j]);
    }
    Ok(UserModel {
        name: user.name.clone(),
        mu,
        rho_pref: user.rho_pref,
        sigma: user.sigma * (1.0 - contraction).sqrt(),
    })
}

/// Loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub n_iter: usize,
    pub learning_rate: f64,
    pub contraction: f64,
    pub gamma: f64,
    pub contact_sigma_floor: [f64; CONTACT_DIM],
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            n_iter: 3,
            learning_rate: 0.3,
            contraction: 0.10,
            gamma: 1.0,
            contact_sigma_floor: DEFAULT_CONTACT_SIGMA_FLOOR,
        }
    }
}

/// One iteration's record: the users as evaluated, the gap matrix, the
/// argmin style per user, and the cup distributions backing the gaps.
#[derive(Debug, Clone, Serialize)]
pub struct LoopState {
    pub iteration: usize,
    pub users: Vec<UserModel>,
    pub styles: Vec<StyleName>,
    /// users x styles, in nats.
    pub gaps: Vec<Vec<f64>>,
    pub optimal: Vec<StyleName>,
    pub cups: Vec<ContactDistribution>,
}

impl LoopState {
    pub fn min_gap(&self, user_index: usize) -> f64 {
        self.gaps[user_index]
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Run the closed design loop: per iteration, infer each style's blanket
/// with requirement-free chains, compute the user-cup gap matrix, pick each
/// user's optimal style, then move the user toward it and contract the
/// prior. The partition inference is deterministic per (tensor, seeds), so
/// re-running it per iteration keeps the cups fixed while the users move.
pub fn run_design_loop(
    tensors: &[(StyleName, ObservationTensor)],
    users: &[UserModel],
    loop_cfg: &LoopConfig,
    chain_cfg: &ChainConfig,
    seeds: &[u64],
) -> Result<Vec<LoopState>> {
    if tensors.is_empty() || users.is_empty() {
        return Err(CdmbdError::InvalidConfig(
            "the loop needs at least one style and one user".into(),
        ));
    }
    if loop_cfg.n_iter == 0 {
        return Err(CdmbdError::InvalidConfig("loop n_iter must be >= 1".into()));
    }
    let features: Vec<(StyleName, NodeFeatures)> = tensors
        .iter()
        .map(|(s, t)| (*s, NodeFeatures::from_tensor(t)))
        .collect();
    let mut frozen = chain_cfg.clone();
    frozen.freeze_lambda = true;
    let profile = RequirementProfile::empty("loop");

    let mut current_users: Vec<UserModel> = users.to_vec();
    let mut states = Vec::with_capacity(loop_cfg.n_iter);
    for iteration in 0..loop_cfg.n_iter {
        let mut cups = Vec::with_capacity(features.len());
        for (style, feats) in &features {
            let multi = run_multichain_with_features(feats, &profile, &frozen, seeds)?;
            cups.push(cup_contact_distribution(
                feats,
                &multi.best,
                *style,
                &loop_cfg.contact_sigma_floor,
            )?);
        }
        let mut gaps = Vec::with_capacity(current_users.len());
        let mut optimal = Vec::with_capacity(current_users.len());
        for user in &current_users {
            let row: Vec<f64> = cups
                .iter()
                .map(|cup| design_gap(user, cup))
                .collect::<Result<_>>()?;
            let best = row
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .expect("at least one style");
            optimal.push(cups[best].style);
            gaps.push(row);
        }
        states.push(LoopState {
            iteration,
            users: current_users.clone(),
            styles: cups.iter().map(|c| c.style).collect(),
            gaps,
            optimal: optimal.clone(),
            cups: cups.clone(),
        });
        // Inverse step: move each user toward its optimal cup.
        let mut next_users = Vec::with_capacity(current_users.len());
        for (u, user) in current_users.iter().enumerate() {
            let target = cups
                .iter()
                .find(|c| c.style == optimal[u])
                .expect("optimal style present");
            next_users.push(update_user_model(
                user,
                target,
                loop_cfg.learning_rate,
                loop_cfg.contraction,
            )?);
        }
        current_users = next_users;
    }
    Ok(states)
}

/// Helper for tests and diagnostics: partitions need not be complete here,
/// only the blanket is read.
pub fn contact_from_partition(
    features: &NodeFeatures,
    partition: &Partition,
    style: StyleName,
    sigma_floor: &[f64; CONTACT_DIM],
) -> Result<ContactDistribution> {
    let members = partition.members(Role::Blanket);
    if members.is_empty() {
        return Err(CdmbdError::EmptyBlanket);
    }
    let channels = [1usize, 4, 5];
    let scale = [1.0, 1.0, 1000.0];
    let n = members.len() as f64;
    let mut mu = [0.0; CONTACT_DIM];
    let mut sigma = [0.0; CONTACT_DIM];
    for &i in &members {
        for (j, &c) in channels.iter().enumerate() {
            mu[j] += features.raw_means[i][c] * scale[j];
        }
    }
    for m in &mut mu {
        *m /= n;
    }
    for &i in &members {
        for (j, &c) in channels.iter().enumerate() {
            let d = features.raw_means[i][c] * scale[j] - mu[j];
            sigma[j] += d * d;
        }
    }
    for (j, s) in sigma.iter_mut().enumerate() {
        *s = (*s / n).sqrt().max(sigma_floor[j]).max(1e-3);
    }
    Ok(ContactDistribution { style, mu, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_cup_data, SimConfig, WallKind};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cup(style: StyleName, mu: [f64; 3], sigma: [f64; 3]) -> ContactDistribution {
        ContactDistribution { style, mu, sigma }
    }

    #[test]
    fn kl_zero_for_identical_distributions() {
        let mu = [1.0, 2.0, 3.0];
        let sig = [0.5, 1.5, 2.5];
        assert_eq!(gaussian_kl(&mu, &sig, &mu, &sig).unwrap(), 0.0);
    }

    #[test]
    fn kl_same_mean_matches_closed_form() {
        // d = 3, sigma1/sigma2 = 0.9:
        // (d/2) [(s1/s2)^2 - 1 - ln (s1/s2)^2] = 1.5 (0.81 - 1 - ln 0.81).
        let mu = [4.0, -2.0, 0.5];
        let s1 = [0.9, 0.9, 0.9];
        let s2 = [1.0, 1.0, 1.0];
        let kl = gaussian_kl(&mu, &s1, &mu, &s2).unwrap();
        let expected = 1.5 * (0.81f64 - 1.0 - 0.81f64.ln());
        assert_relative_eq!(kl, expected, epsilon = 1e-12);
        assert_relative_eq!(kl, 0.03108, epsilon = 1e-5);
        assert!(kl > 0.0);
    }

    #[test]
    fn kl_rejects_nonpositive_sigma() {
        let mu = [0.0];
        assert!(gaussian_kl(&mu, &[0.0], &mu, &[1.0]).is_err());
        assert!(gaussian_kl(&mu, &[1.0], &mu, &[-2.0]).is_err());
    }

    #[test]
    fn design_gap_zero_when_prior_matches_cup() {
        let user = UserModel {
            name: "u".into(),
            mu: [40.0, 45.0, 22.0],
            rho_pref: 0.5,
            sigma: 2.0,
        };
        let c = cup(StyleName::Tea, user.mu, [2.0, 2.0, 2.0]);
        assert_eq!(design_gap(&user, &c).unwrap(), 0.0);
    }

    #[test]
    fn compatibility_is_symmetric_and_nonpositive() {
        let user = UserModel::new("u", 40.0, 0.5, 22.0, 2.0).unwrap();
        let c = cup(StyleName::Tea, [83.0, 40.0, 25.0], [2.1, 3.9, 2.4]);
        let ab = compatibility(&c, &user).unwrap();
        assert!(ab < 0.0);
        // Swapping the roles inside the symmetrized sum changes nothing.
        let forward = gaussian_kl(&c.mu, &c.sigma, &user.mu, &user.sigma_diag()).unwrap();
        let backward = gaussian_kl(&user.mu, &user.sigma_diag(), &c.mu, &c.sigma).unwrap();
        assert_relative_eq!(ab, -0.5 * (forward + backward), epsilon = 1e-12);
        let same = cup(StyleName::Tea, user.mu, [2.0, 2.0, 2.0]);
        assert_eq!(compatibility(&same, &user).unwrap(), 0.0);
    }

    #[test]
    fn b2b_reduces_to_augmented_objective() {
        let m = Multipliers {
            lambda: vec![2.0, 1.0],
            lambda_max: 15.0,
            alpha_lambda: 0.12,
        };
        let v = [0.5, 1.0];
        let base = b2b_objective(-3.0, &m, &v, -4.0, 0.0);
        assert_relative_eq!(base, -3.0 - 2.0, epsilon = 1e-12);
        // Perfect alignment removes the gamma dependence.
        assert_eq!(
            b2b_objective(-3.0, &m, &v, 0.0, 5.0),
            b2b_objective(-3.0, &m, &v, 0.0, 0.1)
        );
        // Negative compatibility strictly decreases with gamma.
        assert!(b2b_objective(-3.0, &m, &v, -4.0, 2.0) < b2b_objective(-3.0, &m, &v, -4.0, 1.0));
    }

    #[test]
    fn user_update_limits() {
        let user = UserModel::new("u", 34.0, 0.5, 22.0, 2.0).unwrap();
        let target = cup(StyleName::Tea, [83.0, 40.0, 25.0], [2.1, 2.1, 2.1]);
        let same = update_user_model(&user, &target, 0.0, 0.0).unwrap();
        assert_eq!(same, user);
        let jumped = update_user_model(&user, &target, 1.0, 0.0).unwrap();
        assert_eq!(jumped.mu, target.mu);
        let moved = update_user_model(&user, &target, 0.3, 0.1).unwrap();
        for j in 0..CONTACT_DIM {
            let before = (user.mu[j] - target.mu[j]).abs();
            let after = (moved.mu[j] - target.mu[j]).abs();
            assert!(after < before, "channel {j} did not move toward target");
        }
        assert_relative_eq!(moved.sigma * moved.sigma, 0.9 * 4.0, epsilon = 1e-12);
    }

    #[test]
    fn contraction_alone_strictly_raises_the_gap() {
        // lr = 0, contraction > 0, fixed target: the footnote mechanism.
        let target = cup(StyleName::Tea, [83.0, 40.0, 25.0], [2.1, 2.1, 2.1]);
        for preset in UserModel::presets() {
            let mut user = preset;
            let mut last = design_gap(&user, &target).unwrap();
            for _ in 0..3 {
                user = update_user_model(&user, &target, 0.0, 0.10).unwrap();
                let gap = design_gap(&user, &target).unwrap();
                assert!(gap > last, "gap did not increase for {}", user.name);
                last = gap;
            }
        }
    }

    #[test]
    fn argmin_invariant_under_constant_shift() {
        let user = UserModel::new("u", 47.0, 0.51, 20.0, 2.0).unwrap();
        let cups = [
            cup(StyleName::Espresso, [86.0, 35.0, 28.6], [2.1, 2.6, 2.1]),
            cup(StyleName::Tea, [83.0, 40.0, 25.0], [2.1, 3.9, 2.4]),
            cup(StyleName::TravelMug, [86.0, 50.0, 20.0], [2.1, 2.6, 2.1]),
        ];
        let gaps: Vec<f64> = cups.iter().map(|c| design_gap(&user, c).unwrap()).collect();
        let argmin = |xs: &[f64]| {
            xs.iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let shifted: Vec<f64> = gaps.iter().map(|g| g + 123.456).collect();
        assert_eq!(argmin(&gaps), argmin(&shifted));
    }

    #[test]
    fn contact_distribution_floors_degenerate_variance() {
        let data =
            generate_cup_data(&SimConfig::new(StyleName::Tea, WallKind::Single, 0.0, 31)).unwrap();
        let features = NodeFeatures::from_tensor(&data.tensor);
        let floor = [2.1, 2.1, 2.1];
        let contact =
            contact_from_partition(&features, &data.ground_truth, StyleName::Tea, &floor).unwrap();
        assert_relative_eq!(contact.mu[0], 83.0, epsilon = 1e-9);
        // Noise-free temperatures have zero spread: the floor applies.
        assert_eq!(contact.sigma[0], 2.1);
        assert!(contact.sigma[1] >= 2.1);
    }

    #[test]
    fn styles_occupy_distinct_contact_regions() {
        let floor = DEFAULT_CONTACT_SIGMA_FLOOR;
        let mut contacts = Vec::new();
        for (i, style) in StyleName::ALL.iter().enumerate() {
            let data = generate_cup_data(&SimConfig::new(
                *style,
                WallKind::Single,
                1.0,
                100 + i as u64,
            ))
            .unwrap();
            let features = NodeFeatures::from_tensor(&data.tensor);
            contacts.push(
                contact_from_partition(&features, &data.ground_truth, *style, &floor).unwrap(),
            );
        }
        for a in 0..3 {
            for b in 0..3 {
                if a == b {
                    continue;
                }
                let kl = gaussian_kl(
                    &contacts[a].mu,
                    &contacts[a].sigma,
                    &contacts[b].mu,
                    &contacts[b].sigma,
                )
                .unwrap();
                assert!(kl > 1.0, "{} vs {}: {kl}", contacts[a].style, contacts[b].style);
            }
        }
    }

    proptest! {
        #[test]
        fn prop_kl_nonnegative(
            m1 in -50.0f64..50.0,
            m2 in -50.0f64..50.0,
            s1 in 0.05f64..10.0,
            s2 in 0.05f64..10.0,
        ) {
            let kl = gaussian_kl(&[m1, m1, m1], &[s1; 3], &[m2, m2, m2], &[s2; 3]).unwrap();
            prop_assert!(kl >= 0.0);
            if m1 == m2 && s1 == s2 {
                prop_assert_eq!(kl, 0.0);
            }
        }
    }
}
