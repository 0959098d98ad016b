//! The C-DMBD inference loop: hard-assignment E-step with requirement
//! penalties, centroid blanket-mean surrogate, scalar M-step on the blanket
//! spectral radius, dual ascent on the multipliers, multi-chain
//! orchestration, the requirement-free gap diagnostic, and the
//! family-transition scan.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CdmbdError, Result};
use crate::requirements::{
    dual_ascent_step, marginal_violation_delta, profile_violations, Certificate, Multipliers,
    RequirementProfile, DEFAULT_ALPHA_LAMBDA, DEFAULT_LAMBDA_MAX,
};
use crate::simulator::ObservationTensor;
use crate::statespace::{
    BlanketSignature, DynamicsMatrix, EmissionModel, LatentDims, ModelParams, Role, RoleEmission,
};

pub const N_CHANNELS: usize = 7;

/// Fixed score scale for the requirement-free gap diagnostic. Gap values are
/// reported in normalized units so that spatially flat data score flat.
pub const GAP_SIGMA: f64 = 0.6;

/// Label-flip probability of the diagnostic's exploratory chains.
const GAP_EXPLORE_FLIP: f64 = 0.25;

/// Latent block size the engine tracks per role.
const LATENT_BLOCK: usize = 4;

fn engine_dims() -> LatentDims {
    LatentDims::new(LATENT_BLOCK, LATENT_BLOCK, LATENT_BLOCK).expect("static dims")
}

/// Per-node role labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<Role>,
}

impl Partition {
    pub fn new(labels: Vec<Role>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Role] {
        &self.labels
    }

    pub fn label(&self, node: usize) -> Role {
        self.labels[node]
    }

    pub fn set_label(&mut self, node: usize, role: Role) {
        self.labels[node] = role;
    }

    pub fn members(&self, role: Role) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == role)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0usize; 3];
        for r in &self.labels {
            c[r.index()] += 1;
        }
        c
    }

    pub fn blanket_size(&self) -> usize {
        self.counts()[Role::Blanket.index()]
    }

    /// A valid C-DMBD solution keeps every role populated.
    pub fn is_complete(&self) -> bool {
        self.counts().iter().all(|c| *c > 0)
    }
}

/// Node features derived once per tensor: raw per-node time averages plus a
/// per-channel normalization over all samples, so distances are scale-free
/// across channels while requirement evaluation keeps physical units.
#[derive(Debug, Clone)]
pub struct NodeFeatures {
    pub n_nodes: usize,
    pub raw_means: Vec<[f64; N_CHANNELS]>,
    pub z_means: Vec<[f64; N_CHANNELS]>,
    pub channel_mean: [f64; N_CHANNELS],
    pub channel_std: [f64; N_CHANNELS],
    /// Pooled per-channel standard deviation of the normalized node
    /// time-averages; the E-step likelihood scale adapts to it.
    pub pooled_node_std: f64,
}

impl NodeFeatures {
    pub fn from_tensor(tensor: &ObservationTensor) -> Self {
        let n = tensor.n_nodes;
        let t = tensor.n_steps;
        let samples = (n * t) as f64;
        let mut channel_mean = [0.0; N_CHANNELS];
        let mut sumsq = [0.0; N_CHANNELS];
        for ti in 0..t {
            for node in 0..n {
                for c in 0..N_CHANNELS {
                    let v = tensor.get(ti, node, c);
                    channel_mean[c] += v;
                    sumsq[c] += v * v;
                }
            }
        }
        let mut channel_std = [0.0; N_CHANNELS];
        for c in 0..N_CHANNELS {
            channel_mean[c] /= samples;
            let var = (sumsq[c] / samples - channel_mean[c] * channel_mean[c]).max(0.0);
            channel_std[c] = var.sqrt().max(1e-9);
        }
        let raw_means = tensor.node_means();
        let z_means: Vec<[f64; N_CHANNELS]> = raw_means
            .iter()
            .map(|m| {
                let mut z = [0.0; N_CHANNELS];
                for c in 0..N_CHANNELS {
                    z[c] = (m[c] - channel_mean[c]) / channel_std[c];
                }
                z
            })
            .collect();
        let mut pooled = 0.0;
        for c in 0..N_CHANNELS {
            let mean_c = z_means.iter().map(|z| z[c]).sum::<f64>() / n as f64;
            pooled += z_means.iter().map(|z| (z[c] - mean_c).powi(2)).sum::<f64>() / n as f64;
        }
        let pooled_node_std = (pooled / N_CHANNELS as f64).sqrt().max(1e-6);
        Self {
            n_nodes: n,
            raw_means,
            z_means,
            channel_mean,
            channel_std,
            pooled_node_std,
        }
    }

    fn to_z(&self, raw: &[f64; N_CHANNELS]) -> [f64; N_CHANNELS] {
        let mut z = [0.0; N_CHANNELS];
        for c in 0..N_CHANNELS {
            z[c] = (raw[c] - self.channel_mean[c]) / self.channel_std[c];
        }
        z
    }
}

/// Partition initialization for a chain. `Anchored` starts from the
/// contiguous band layout (the discretization prior) and flips each node to
/// a uniformly random role with the given probability; `Random` draws every
/// label uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitPartition {
    Anchored { flip_prob: f64 },
    Random,
    Explicit(Vec<Role>),
}

impl Default for InitPartition {
    fn default() -> Self {
        InitPartition::Anchored { flip_prob: 0.2 }
    }
}

/// Chain hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub alpha_rho: f64,
    pub rho_bounds: (f64, f64),
    pub alpha_lambda: f64,
    pub lambda_max: f64,
    /// Multiplier on the adaptive likelihood scale (pooled node-mean std).
    pub sigma_score: f64,
    pub init: InitPartition,
    /// Keep the multipliers frozen at zero: unconstrained detection.
    pub freeze_lambda: bool,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 50,
            alpha_rho: 0.025,
            rho_bounds: (0.30, 0.96),
            alpha_lambda: DEFAULT_ALPHA_LAMBDA,
            lambda_max: DEFAULT_LAMBDA_MAX,
            sigma_score: 1.0,
            init: InitPartition::default(),
            freeze_lambda: false,
            seed: 0,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(CdmbdError::InvalidConfig("n_iter must be >= 1".into()));
        }
        if !(self.sigma_score > 0.0) {
            return Err(CdmbdError::InvalidConfig("sigma_score must be > 0".into()));
        }
        if !(self.rho_bounds.0 < self.rho_bounds.1) {
            return Err(CdmbdError::InvalidConfig("rho bounds inverted".into()));
        }
        if let InitPartition::Anchored { flip_prob } = self.init {
            if !(0.0..=1.0).contains(&flip_prob) {
                return Err(CdmbdError::InvalidConfig(
                    "flip_prob must be in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }

    /// Effective E-step likelihood scale for a tensor.
    pub fn sigma_effective(&self, features: &NodeFeatures) -> f64 {
        self.sigma_score * features.pooled_node_std
    }
}

/// One row of the per-iteration chain trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub b_size: usize,
    pub rho: f64,
    pub lambda_l1: f64,
    pub total_violation: f64,
    pub elbo_proxy: f64,
}

/// Converged state of a single chain.
#[derive(Debug, Clone, Serialize)]
pub struct ChainResult {
    pub seed: u64,
    pub partition: Partition,
    pub rho_star: f64,
    pub multipliers: Certificate,
    pub elbo_proxy: f64,
    pub signature: BlanketSignature,
    pub trace: Vec<TraceRow>,
    pub degenerate: bool,
    /// Forbidden dynamics blocks stayed exactly zero after every update.
    pub mb_zeros_ok: bool,
    /// The spectral radius stayed inside the clip bounds at every iteration.
    pub rho_in_bounds: bool,
    /// The (E-step, M-step) pair never decreased the augmented objective at
    /// fixed multipliers.
    pub objective_monotone: bool,
}

/// Modal-topology summary over several chains.
#[derive(Debug, Clone, Serialize)]
pub struct MultiChainResult {
    pub modal_b: usize,
    pub best: ChainResult,
    pub all: Vec<ChainResult>,
}

/// Requirement-free gap between the reference partition and the best of the
/// remaining candidates.
#[derive(Debug, Clone, Serialize)]
pub struct GapScore {
    pub delta: f64,
    pub best_partition: Partition,
    pub runner_up: Partition,
    pub candidate_set_size: usize,
}

/// Raw per-role centroids of node time-averages. Empty roles fall back to
/// the previous centroids when given, else to the grand mean over all nodes.
pub fn role_centroids(
    features: &NodeFeatures,
    partition: &Partition,
    prev: Option<&[[f64; N_CHANNELS]; 3]>,
) -> Result<[[f64; N_CHANNELS]; 3]> {
    if partition.len() != features.n_nodes || features.n_nodes == 0 {
        return Err(CdmbdError::EmptyPartition);
    }
    let mut sums = [[0.0; N_CHANNELS]; 3];
    let mut counts = [0usize; 3];
    for (i, role) in partition.labels().iter().enumerate() {
        let b = role.index();
        counts[b] += 1;
        for c in 0..N_CHANNELS {
            sums[b][c] += features.raw_means[i][c];
        }
    }
    if counts.iter().all(|c| *c == 0) {
        return Err(CdmbdError::EmptyPartition);
    }
    let mut grand = [0.0; N_CHANNELS];
    for m in &features.raw_means {
        for c in 0..N_CHANNELS {
            grand[c] += m[c];
        }
    }
    for c in 0..N_CHANNELS {
        grand[c] /= features.n_nodes as f64;
    }
    let mut out = [[0.0; N_CHANNELS]; 3];
    for b in 0..3 {
        if counts[b] > 0 {
            for c in 0..N_CHANNELS {
                out[b][c] = sums[b][c] / counts[b] as f64;
            }
        } else if let Some(prev) = prev {
            out[b] = prev[b];
        } else {
            out[b] = grand;
        }
    }
    Ok(out)
}

/// Hard-assignment node score: Gaussian fit to the role centroid minus the
/// requirement penalty, which applies only to the blanket label and only
/// when absorbing the node raises the weighted violations.
pub fn node_score(
    node_mean: &[f64; N_CHANNELS],
    role: Role,
    centroid: &[f64; N_CHANNELS],
    sigma: f64,
    lambda_l1: f64,
    delta_b: f64,
) -> f64 {
    let mut dist2 = 0.0;
    for c in 0..N_CHANNELS {
        let d = node_mean[c] - centroid[c];
        dist2 += d * d;
    }
    let mut score = -dist2 / (2.0 * sigma * sigma);
    if role == Role::Blanket {
        score -= lambda_l1 * delta_b.max(0.0);
    }
    score
}

/// Empirical centroid of the current blanket nodes, in raw units.
pub fn blanket_mean_surrogate(
    features: &NodeFeatures,
    partition: &Partition,
) -> Result<[f64; N_CHANNELS]> {
    let members = partition.members(Role::Blanket);
    if members.is_empty() {
        return Err(CdmbdError::EmptyBlanket);
    }
    let mut out = [0.0; N_CHANNELS];
    for &i in &members {
        for c in 0..N_CHANNELS {
            out[c] += features.raw_means[i][c];
        }
    }
    for o in &mut out {
        *o /= members.len() as f64;
    }
    Ok(out)
}

/// Scalar M-step on the blanket spectral radius. The sign convention drives
/// insulation: a read-out above its target pushes rho up (slower dynamics,
/// lower outer temperature), one below pushes rho down.
pub fn m_step_rho(
    rho: f64,
    profile: &RequirementProfile,
    multipliers: &Multipliers,
    phi: &[f64],
    cfg: &ChainConfig,
) -> f64 {
    let mut grad = 0.0;
    for (k, req) in profile.requirements.iter().enumerate() {
        let miss = phi[k] - req.tau;
        if miss.abs() > req.eps {
            grad += multipliers.lambda[k] * req.weight * miss.signum();
        }
    }
    (rho + cfg.alpha_rho * grad).clamp(cfg.rho_bounds.0, cfg.rho_bounds.1)
}

/// Average per-node Gaussian log-fit of a partition under its own centroids,
/// in normalized channel units.
pub fn data_log_score(features: &NodeFeatures, partition: &Partition, sigma: f64) -> f64 {
    let centroids = match role_centroids(features, partition, None) {
        Ok(c) => c,
        Err(_) => return f64::NEG_INFINITY,
    };
    let z_centroids: [[f64; N_CHANNELS]; 3] = [
        features.to_z(&centroids[0]),
        features.to_z(&centroids[1]),
        features.to_z(&centroids[2]),
    ];
    let mut total = 0.0;
    for (i, role) in partition.labels().iter().enumerate() {
        let mu = &z_centroids[role.index()];
        let z = &features.z_means[i];
        let mut dist2 = 0.0;
        for c in 0..N_CHANNELS {
            let d = z[c] - mu[c];
            dist2 += d * d;
        }
        total -= dist2 / (2.0 * sigma * sigma);
    }
    total / partition.len() as f64
}

fn weighted_violation_total(
    profile: &RequirementProfile,
    multipliers: &Multipliers,
    features: &NodeFeatures,
    partition: &Partition,
) -> f64 {
    if profile.is_empty() {
        return 0.0;
    }
    match blanket_mean_surrogate(features, partition) {
        Ok(mu) => profile_violations(profile, &mu)
            .map(|vs| {
                vs.iter()
                    .zip(multipliers.lambda.iter())
                    .map(|(v, l)| l * v)
                    .sum()
            })
            .unwrap_or(0.0),
        Err(_) => 0.0,
    }
}

/// Augmented objective: data log-score minus the multiplier-weighted
/// violations evaluated through the blanket-mean surrogate.
pub fn augmented_objective(
    features: &NodeFeatures,
    partition: &Partition,
    multipliers: &Multipliers,
    profile: &RequirementProfile,
    sigma: f64,
) -> f64 {
    data_log_score(features, partition, sigma)
        - weighted_violation_total(profile, multipliers, features, partition)
}

/// Objective advantage of `omega1` over `omega2` at fixed multipliers;
/// positive selects `omega1`.
pub fn objective_advantage(
    features: &NodeFeatures,
    omega1: &Partition,
    omega2: &Partition,
    multipliers: &Multipliers,
    profile: &RequirementProfile,
    sigma: f64,
) -> f64 {
    let data = data_log_score(features, omega1, sigma) - data_log_score(features, omega2, sigma);
    let pen = weighted_violation_total(profile, multipliers, features, omega1)
        - weighted_violation_total(profile, multipliers, features, omega2);
    data - pen
}

fn node_delta_b(
    features: &NodeFeatures,
    profile: &RequirementProfile,
    multipliers: &Multipliers,
    blanket: &[usize],
    node: usize,
) -> f64 {
    if profile.is_empty() || multipliers.lambda.iter().all(|l| *l == 0.0) {
        return 0.0;
    }
    match marginal_violation_delta(profile, multipliers, blanket, node, &features.raw_means) {
        Ok(d) => d,
        // Removing the only blanket member has no defined counterfactual;
        // the empty-role guard pins that node anyway.
        Err(_) => 0.0,
    }
}

/// Synchronous hard E-step: every node moves to its argmax role. Scores use
/// the incoming centroids and incoming blanket for the marginal penalties;
/// ties break in the fixed role order S < B < Z. Roles are never emptied: if
/// every member of a role proposes to leave, the member with the least to
/// gain keeps its label.
pub fn e_step(
    features: &NodeFeatures,
    partition: &Partition,
    multipliers: &Multipliers,
    profile: &RequirementProfile,
    sigma: f64,
    prev_centroids: Option<&[[f64; N_CHANNELS]; 3]>,
) -> Result<Partition> {
    let centroids_raw = role_centroids(features, partition, prev_centroids)?;
    let z_centroids: [[f64; N_CHANNELS]; 3] = [
        features.to_z(&centroids_raw[0]),
        features.to_z(&centroids_raw[1]),
        features.to_z(&centroids_raw[2]),
    ];
    let blanket = partition.members(Role::Blanket);
    let lambda_l1 = multipliers.l1();

    let n = features.n_nodes;
    let mut scores = vec![[0.0f64; 3]; n];
    let mut proposal = partition.clone();
    for i in 0..n {
        let delta = node_delta_b(features, profile, multipliers, &blanket, i);
        let mut best_role = Role::Env;
        let mut best = f64::NEG_INFINITY;
        for role in Role::ALL {
            let s = node_score(
                &features.z_means[i],
                role,
                &z_centroids[role.index()],
                sigma,
                lambda_l1,
                delta,
            );
            scores[i][role.index()] = s;
            if s > best {
                best = s;
                best_role = role;
            }
        }
        proposal.set_label(i, best_role);
    }

    // Keep every previously populated role populated: retain the leaver with
    // the smallest score improvement (data-determined, order-free).
    loop {
        let counts = proposal.counts();
        let mut changed = false;
        for role in Role::ALL {
            let b = role.index();
            if counts[b] > 0 {
                continue;
            }
            let previous_members = partition.members(role);
            if previous_members.is_empty() {
                continue;
            }
            let keep = previous_members
                .iter()
                .copied()
                .min_by(|&x, &y| {
                    let gx = scores[x][proposal.label(x).index()] - scores[x][b];
                    let gy = scores[y][proposal.label(y).index()] - scores[y][b];
                    gx.partial_cmp(&gy).unwrap_or(std::cmp::Ordering::Equal)
                })
                .expect("non-empty");
            proposal.set_label(keep, role);
            changed = true;
        }
        if !changed {
            break;
        }
    }
    Ok(proposal)
}

/// Sequential greedy repair pass: single-node moves applied in index order,
/// each accepted only when it improves the augmented objective at fixed
/// multipliers. Used when the synchronous proposal overshoots.
fn greedy_e_step(
    features: &NodeFeatures,
    partition: &Partition,
    multipliers: &Multipliers,
    profile: &RequirementProfile,
    sigma: f64,
) -> Partition {
    let mut current = partition.clone();
    let mut best_obj = augmented_objective(features, &current, multipliers, profile, sigma);
    for i in 0..features.n_nodes {
        let original = current.label(i);
        for role in Role::ALL {
            if role == original {
                continue;
            }
            let mut trial = current.clone();
            trial.set_label(i, role);
            if !trial.is_complete() {
                continue;
            }
            let obj = augmented_objective(features, &trial, multipliers, profile, sigma);
            if obj > best_obj + 1e-12 {
                best_obj = obj;
                current = trial;
            }
        }
    }
    current
}

fn engine_model(rho: f64) -> ModelParams {
    let dims = engine_dims();
    let d = dims.total();
    let mut a = DynamicsMatrix::new(dims, DMatrix::zeros(d, d)).expect("static dims");
    let eye = DMatrix::identity(LATENT_BLOCK, LATENT_BLOCK);
    a.set_block(Role::Env, Role::Env, &(&eye * 0.5)).unwrap();
    a.set_block(Role::Interior, Role::Interior, &(&eye * 0.55))
        .unwrap();
    let placeholder = || {
        RoleEmission::new(
            DMatrix::zeros(N_CHANNELS, LATENT_BLOCK),
            nalgebra::DVector::zeros(N_CHANNELS),
            DMatrix::identity(N_CHANNELS, N_CHANNELS),
        )
        .expect("static emission")
    };
    let emission = EmissionModel {
        env: placeholder(),
        blanket: placeholder(),
        interior: placeholder(),
    };
    let mut params = ModelParams::new(dims, a, emission, rho).expect("static model");
    params.set_rho(rho).expect("static rho");
    params
}

fn init_partition(cfg: &ChainConfig, n_nodes: usize, rng: &mut ChaCha8Rng) -> Result<Partition> {
    let roles = [Role::Env, Role::Blanket, Role::Interior];
    match &cfg.init {
        InitPartition::Explicit(labels) => {
            if labels.len() != n_nodes {
                return Err(CdmbdError::InvalidConfig(
                    "explicit init length must match the node count".into(),
                ));
            }
            Ok(Partition::new(labels.clone()))
        }
        InitPartition::Random => {
            let labels = (0..n_nodes).map(|_| roles[rng.gen_range(0..3)]).collect();
            Ok(Partition::new(labels))
        }
        InitPartition::Anchored { flip_prob } => {
            let n_s = n_nodes / 3;
            let n_z = n_nodes / 3;
            let n_b = n_nodes - n_s - n_z;
            let mut labels = Vec::with_capacity(n_nodes);
            labels.extend(std::iter::repeat(Role::Env).take(n_s));
            labels.extend(std::iter::repeat(Role::Blanket).take(n_b));
            labels.extend(std::iter::repeat(Role::Interior).take(n_z));
            for label in &mut labels {
                let u: f64 = rng.gen();
                if u < *flip_prob {
                    *label = roles[rng.gen_range(0..3)];
                }
            }
            Ok(Partition::new(labels))
        }
    }
}

/// Run one chain: `n_iter` iterations of E-step, blanket-mean surrogate,
/// scalar M-step and dual ascent, with a per-iteration trace. Deterministic
/// for a fixed (tensor, profile, config, seed).
pub fn run_chain(
    tensor: &ObservationTensor,
    profile: &RequirementProfile,
    cfg: &ChainConfig,
) -> Result<ChainResult> {
    let features = NodeFeatures::from_tensor(tensor);
    run_chain_with_features(&features, profile, cfg)
}

pub fn run_chain_with_features(
    features: &NodeFeatures,
    profile: &RequirementProfile,
    cfg: &ChainConfig,
) -> Result<ChainResult> {
    cfg.validate()?;
    profile.validate()?;
    let sigma = cfg.sigma_effective(features);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut partition = init_partition(cfg, features.n_nodes, &mut rng)?;
    let mut rho = rng.gen_range(0.45..0.55);
    let mut multipliers = Multipliers::zeros(profile.len(), cfg.lambda_max, cfg.alpha_lambda);
    let mut params = engine_model(rho);
    let mut prev_centroids: Option<[[f64; N_CHANNELS]; 3]> = None;
    let mut prev_mu_b: Option<[f64; N_CHANNELS]> = None;

    let mut trace = Vec::with_capacity(cfg.n_iter);
    let mut mb_zeros_ok = true;
    let mut rho_in_bounds = true;
    let mut objective_monotone = true;
    let mut violations = vec![0.0; profile.len()];

    for iter in 0..cfg.n_iter {
        let before = augmented_objective(features, &partition, &multipliers, profile, sigma);
        let proposal = e_step(
            features,
            &partition,
            &multipliers,
            profile,
            sigma,
            prev_centroids.as_ref(),
        )?;
        let after = augmented_objective(features, &proposal, &multipliers, profile, sigma);
        partition = if after + 1e-12 >= before {
            proposal
        } else {
            // Joint reassignment overshot through the shared blanket mean;
            // fall back to provably non-decreasing single-node moves.
            greedy_e_step(features, &partition, &multipliers, profile, sigma)
        };
        let check = augmented_objective(features, &partition, &multipliers, profile, sigma);
        if check + 1e-9 < before {
            objective_monotone = false;
        }

        if let Ok(c) = role_centroids(features, &partition, prev_centroids.as_ref()) {
            prev_centroids = Some(c);
        }

        let mu_b = match blanket_mean_surrogate(features, &partition) {
            Ok(mu) => {
                prev_mu_b = Some(mu);
                mu
            }
            Err(_) => prev_mu_b.unwrap_or([0.0; N_CHANNELS]),
        };
        violations = profile_violations(profile, &mu_b)?;
        let phi: Vec<f64> = profile
            .requirements
            .iter()
            .map(|req| mu_b[req.channel])
            .collect();

        rho = m_step_rho(rho, profile, &multipliers, &phi, cfg);
        params.set_rho(rho)?;
        if !params.dynamics.mb_zeros_hold() {
            mb_zeros_ok = false;
        }
        if rho < cfg.rho_bounds.0 - 1e-12 || rho > cfg.rho_bounds.1 + 1e-12 {
            rho_in_bounds = false;
        }

        if !cfg.freeze_lambda {
            multipliers = dual_ascent_step(&multipliers, &violations);
        }

        trace.push(TraceRow {
            iter,
            b_size: partition.blanket_size(),
            rho,
            lambda_l1: multipliers.l1(),
            total_violation: violations.iter().sum(),
            elbo_proxy: augmented_objective(features, &partition, &multipliers, profile, sigma),
        });
    }

    let elbo_proxy = trace.last().map(|r| r.elbo_proxy).unwrap_or(0.0);
    let signature = BlanketSignature::from_partition(partition.labels(), &params.dims);
    Ok(ChainResult {
        seed: cfg.seed,
        degenerate: !partition.is_complete(),
        partition,
        rho_star: rho,
        multipliers: Certificate::observe(&multipliers, &violations),
        elbo_proxy,
        signature,
        trace,
        mb_zeros_ok,
        rho_in_bounds,
        objective_monotone,
    })
}

/// Run several chains with distinct seeds; report the modal blanket size and
/// the highest-objective chain within the modal class.
pub fn run_multichain(
    tensor: &ObservationTensor,
    profile: &RequirementProfile,
    cfg: &ChainConfig,
    seeds: &[u64],
) -> Result<MultiChainResult> {
    if seeds.is_empty() {
        return Err(CdmbdError::InvalidConfig("need at least one seed".into()));
    }
    let features = NodeFeatures::from_tensor(tensor);
    run_multichain_with_features(&features, profile, cfg, seeds)
}

pub fn run_multichain_with_features(
    features: &NodeFeatures,
    profile: &RequirementProfile,
    cfg: &ChainConfig,
    seeds: &[u64],
) -> Result<MultiChainResult> {
    if seeds.is_empty() {
        return Err(CdmbdError::InvalidConfig("need at least one seed".into()));
    }
    let mut all = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut chain_cfg = cfg.clone();
        chain_cfg.seed = seed;
        all.push(run_chain_with_features(features, profile, &chain_cfg)?);
    }
    // Modal |B|; ties resolve to the smaller size for determinism.
    let mut counts: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for r in &all {
        *counts.entry(r.partition.blanket_size()).or_insert(0) += 1;
    }
    let modal_b = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(b, _)| *b)
        .expect("non-empty");
    let best = all
        .iter()
        .filter(|r| r.partition.blanket_size() == modal_b)
        .max_by(|a, b| {
            a.elbo_proxy
                .partial_cmp(&b.elbo_proxy)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.seed.cmp(&a.seed))
        })
        .expect("modal class non-empty")
        .clone();
    Ok(MultiChainResult { modal_b, best, all })
}

/// Requirement-free gap: the first candidate is the reference MAP partition;
/// the gap is its score margin over the best of the remaining candidates.
/// All scoring happens at frozen multipliers (data only).
pub fn gap_score(features: &NodeFeatures, candidates: &[Partition]) -> Result<GapScore> {
    let mut distinct: Vec<&Partition> = Vec::new();
    for c in candidates {
        if !distinct.iter().any(|d| d.labels() == c.labels()) {
            distinct.push(c);
        }
    }
    if distinct.len() < 2 {
        return Err(CdmbdError::TooFewCandidates(distinct.len()));
    }
    let reference = distinct[0];
    let ref_score = data_log_score(features, reference, GAP_SIGMA);
    let runner_up = distinct[1..]
        .iter()
        .max_by(|a, b| {
            let sa = data_log_score(features, a, GAP_SIGMA);
            let sb = data_log_score(features, b, GAP_SIGMA);
            sa.partial_cmp(&sb).unwrap_or(std::cmp::Ordering::Equal)
        })
        .expect("at least one remaining");
    let delta = ref_score - data_log_score(features, runner_up, GAP_SIGMA);
    Ok(GapScore {
        delta,
        best_partition: reference.clone(),
        runner_up: (*runner_up).clone(),
        candidate_set_size: distinct.len(),
    })
}

/// Contiguous band partitions: S before the window, B inside, Z after.
/// Every role stays populated.
pub fn band_partitions(n_nodes: usize) -> Vec<Partition> {
    let mut out = Vec::new();
    for len in 2..=(n_nodes / 2).max(2) {
        for start in 1..n_nodes.saturating_sub(len) {
            let mut labels = vec![Role::Env; n_nodes];
            for l in labels.iter_mut().skip(start).take(len) {
                *l = Role::Blanket;
            }
            for l in labels.iter_mut().skip(start + len) {
                *l = Role::Interior;
            }
            out.push(Partition::new(labels));
        }
    }
    out
}

/// Full gap diagnostic: frozen-multiplier chains supply the reference MAP
/// partition; the candidate set adds the remaining chain finals, the ground
/// truth when known, and the contiguous band family. The chains explore with
/// their own label-flip rate so the candidate set stays diverse regardless
/// of the experiment's init policy.
pub fn gap_diagnostic(
    tensor: &ObservationTensor,
    cfg: &ChainConfig,
    seeds: &[u64],
    ground_truth: Option<&Partition>,
) -> Result<GapScore> {
    let features = NodeFeatures::from_tensor(tensor);
    let mut frozen = cfg.clone();
    frozen.freeze_lambda = true;
    frozen.init = InitPartition::Anchored {
        flip_prob: GAP_EXPLORE_FLIP,
    };
    let multi = run_multichain_with_features(
        &features,
        &RequirementProfile::empty("none"),
        &frozen,
        seeds,
    )?;
    let mut candidates = vec![multi.best.partition.clone()];
    for chain in &multi.all {
        candidates.push(chain.partition.clone());
    }
    if let Some(gt) = ground_truth {
        candidates.push(gt.clone());
    }
    candidates.extend(band_partitions(features.n_nodes));
    gap_score(&features, &candidates)
}

/// One grid point of a requirement scan.
#[derive(Debug, Clone, Serialize)]
pub struct ScanPoint {
    pub tau: f64,
    pub modal_b: usize,
    pub best_b: usize,
    pub lambda_l1: f64,
    /// Objective advantage of the last grid point's partition over the
    /// first's, under this point's converged multipliers.
    pub advantage: f64,
}

/// Family-transition scan report.
#[derive(Debug, Clone, Serialize)]
pub struct TransitionReport {
    pub points: Vec<ScanPoint>,
    pub jump_threshold: usize,
    /// Index of the first grid point whose modal blanket size jumps by at
    /// least the threshold relative to its predecessor.
    pub boundary_index: Option<usize>,
    pub boundary_tau: Option<f64>,
    /// First index where the objective advantage changes sign.
    pub advantage_flip_index: Option<usize>,
}

/// Scan a requirement target over a sorted grid, running a multichain per
/// point, and report the empirical family boundary.
pub fn scan_family_transition(
    tensor: &ObservationTensor,
    profile_template: &RequirementProfile,
    scan_channel: usize,
    grid: &[f64],
    cfg: &ChainConfig,
    seeds: &[u64],
    jump_threshold: usize,
) -> Result<TransitionReport> {
    if grid.len() < 2 {
        return Err(CdmbdError::InvalidConfig(
            "scan grid needs at least two points".into(),
        ));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(CdmbdError::InvalidConfig(
            "scan grid must be sorted ascending".into(),
        ));
    }
    if !profile_template
        .requirements
        .iter()
        .any(|r| r.channel == scan_channel)
    {
        return Err(CdmbdError::InvalidConfig(format!(
            "profile has no requirement on channel {scan_channel}"
        )));
    }
    let features = NodeFeatures::from_tensor(tensor);
    let sigma = cfg.sigma_effective(&features);

    let mut runs = Vec::with_capacity(grid.len());
    for &tau in grid {
        let mut profile = profile_template.clone();
        for req in &mut profile.requirements {
            if req.channel == scan_channel {
                req.tau = tau;
            }
        }
        let multi = run_multichain_with_features(&features, &profile, cfg, seeds)?;
        runs.push((tau, profile, multi));
    }

    let omega_low = runs.first().expect("non-empty").2.best.partition.clone();
    let omega_high = runs.last().expect("non-empty").2.best.partition.clone();

    let mut points = Vec::with_capacity(runs.len());
    for (tau, profile, multi) in &runs {
        let mult = Multipliers {
            lambda: multi.best.multipliers.lambda_star.clone(),
            lambda_max: cfg.lambda_max,
            alpha_lambda: cfg.alpha_lambda,
        };
        let advantage =
            objective_advantage(&features, &omega_high, &omega_low, &mult, profile, sigma);
        points.push(ScanPoint {
            tau: *tau,
            modal_b: multi.modal_b,
            best_b: multi.best.partition.blanket_size(),
            lambda_l1: multi.best.multipliers.l1(),
            advantage,
        });
    }

    let mut boundary_index = None;
    for i in 1..points.len() {
        let jump = points[i].modal_b.abs_diff(points[i - 1].modal_b);
        if jump >= jump_threshold {
            boundary_index = Some(i);
            break;
        }
    }
    let mut advantage_flip_index = None;
    for i in 1..points.len() {
        if points[i].advantage.signum() != points[i - 1].advantage.signum()
            && points[i].advantage != 0.0
        {
            advantage_flip_index = Some(i);
            break;
        }
    }
    Ok(TransitionReport {
        jump_threshold,
        boundary_index,
        boundary_tau: boundary_index.map(|i| points[i].tau),
        advantage_flip_index,
        points,
    })
}
