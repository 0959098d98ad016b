//! Linear-Gaussian state-space model with hard Markov-blanket zero structure,
//! plus the stationary and differential statistics the requirement machinery
//! reads off the blanket block.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CdmbdError, Result};

/// Spectral radii at or above `1 - RHO_SINGULAR_MARGIN` are treated as
/// singular when inverting `(I - A_bb)`.
pub const RHO_SINGULAR_MARGIN: f64 = 1e-9;

/// Node / latent-block role. `Env` is the external state S, `Blanket` the
/// interface B, `Interior` the internal state Z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "S")]
    Env,
    #[serde(rename = "B")]
    Blanket,
    #[serde(rename = "Z")]
    Interior,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Env, Role::Blanket, Role::Interior];

    /// Index used for centroid tables; also the deterministic tie-break order
    /// S < B < Z.
    pub fn index(self) -> usize {
        match self {
            Role::Env => 0,
            Role::Blanket => 1,
            Role::Interior => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Role::Env => "S",
            Role::Blanket => "B",
            Role::Interior => "Z",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Sizes of the three latent blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDims {
    pub env: usize,
    pub blanket: usize,
    pub interior: usize,
}

impl LatentDims {
    pub fn new(env: usize, blanket: usize, interior: usize) -> Result<Self> {
        if env == 0 || blanket == 0 || interior == 0 {
            return Err(CdmbdError::DimensionMismatch(
                "all latent block sizes must be >= 1".into(),
            ));
        }
        Ok(Self {
            env,
            blanket,
            interior,
        })
    }

    pub fn total(&self) -> usize {
        self.env + self.blanket + self.interior
    }

    /// Index range of a role's block inside the stacked latent vector.
    pub fn block_range(&self, role: Role) -> std::ops::Range<usize> {
        match role {
            Role::Env => 0..self.env,
            Role::Blanket => self.env..self.env + self.blanket,
            Role::Interior => self.env + self.blanket..self.total(),
        }
    }

    pub fn block_len(&self, role: Role) -> usize {
        self.block_range(role).len()
    }
}

/// Dense dynamics matrix partitioned into 3x3 role blocks. The env-interior
/// blocks (`A_sz`, `A_zs`) are forbidden by the Markov-blanket structure.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsMatrix {
    pub dims: LatentDims,
    pub entries: DMatrix<f64>,
}

impl DynamicsMatrix {
    pub fn new(dims: LatentDims, entries: DMatrix<f64>) -> Result<Self> {
        let d = dims.total();
        if entries.nrows() != d || entries.ncols() != d {
            return Err(CdmbdError::DimensionMismatch(format!(
                "dynamics matrix is {}x{}, latent dims give {}",
                entries.nrows(),
                entries.ncols(),
                d
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(CdmbdError::NonFinite("dynamics matrix".into()));
        }
        Ok(Self { dims, entries })
    }

    pub fn block(&self, row: Role, col: Role) -> DMatrix<f64> {
        let r = self.dims.block_range(row);
        let c = self.dims.block_range(col);
        self.entries.view((r.start, c.start), (r.len(), c.len())).into()
    }

    pub fn set_block(&mut self, row: Role, col: Role, value: &DMatrix<f64>) -> Result<()> {
        let r = self.dims.block_range(row);
        let c = self.dims.block_range(col);
        if value.nrows() != r.len() || value.ncols() != c.len() {
            return Err(CdmbdError::DimensionMismatch(format!(
                "block ({}, {}) expects {}x{}, got {}x{}",
                row,
                col,
                r.len(),
                c.len(),
                value.nrows(),
                value.ncols()
            )));
        }
        self.entries
            .view_mut((r.start, c.start), (r.len(), c.len()))
            .copy_from(value);
        Ok(())
    }

    /// True when both forbidden blocks are exactly zero.
    pub fn mb_zeros_hold(&self) -> bool {
        let sz = self.block(Role::Env, Role::Interior);
        let zs = self.block(Role::Interior, Role::Env);
        sz.iter().all(|v| *v == 0.0) && zs.iter().all(|v| *v == 0.0)
    }
}

/// Force the Markov-blanket zero blocks `A_sz = 0`, `A_zs = 0`. All other
/// blocks are left bit-identical; the operation is idempotent.
pub fn enforce_mb_zeros(a: &DynamicsMatrix) -> DynamicsMatrix {
    let mut out = a.clone();
    let s = a.dims.block_range(Role::Env);
    let z = a.dims.block_range(Role::Interior);
    for i in s.clone() {
        for j in z.clone() {
            out.entries[(i, j)] = 0.0;
        }
    }
    for i in z {
        for j in s.clone() {
            out.entries[(i, j)] = 0.0;
        }
    }
    out
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != m.ncols() {
        return Err(CdmbdError::DimensionMismatch(format!(
            "spectral radius needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(CdmbdError::NonFinite("spectral radius input".into()));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    // An exactly triangular matrix defeats the Schur iteration's convergence
    // check in some nalgebra versions; its eigenvalues are the diagonal.
    if is_triangular(m) {
        return Ok(m.diagonal().iter().fold(0.0, |acc, v| acc.max(v.abs())));
    }
    let schur = m
        .clone()
        .try_schur(1e-13, 20_000)
        .ok_or_else(|| CdmbdError::Numerical("Schur iteration did not converge".into()))?;
    let eigs = schur.complex_eigenvalues();
    Ok(eigs.iter().map(|c| c.norm()).fold(0.0, f64::max))
}

fn is_triangular(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    let mut upper = true;
    let mut lower = true;
    for i in 0..n {
        for j in 0..n {
            if i > j && m[(i, j)] != 0.0 {
                upper = false;
            }
            if i < j && m[(i, j)] != 0.0 {
                lower = false;
            }
        }
    }
    upper || lower
}

fn solve_stable(a_bb: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let rho = spectral_radius(a_bb)?;
    if rho >= 1.0 - RHO_SINGULAR_MARGIN {
        return Err(CdmbdError::Unstable { rho });
    }
    let n = a_bb.nrows();
    let system = DMatrix::identity(n, n) - a_bb;
    system
        .lu()
        .solve(rhs)
        .ok_or_else(|| CdmbdError::Numerical("(I - A_bb) failed to factor".into()))
}

/// Predicted stationary mean of the blanket observations,
/// `mu_hat_b = C_b (I - A_bb)^{-1} b_bar + d_b`.
pub fn stationary_blanket_mean(
    a_bb: &DMatrix<f64>,
    c_b: &DMatrix<f64>,
    d_b: &DVector<f64>,
    b_bar: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = a_bb.nrows();
    if b_bar.len() != n || c_b.ncols() != n || c_b.nrows() != d_b.len() {
        return Err(CdmbdError::DimensionMismatch(format!(
            "stationary mean: A_bb {n}x{n}, C_b {}x{}, d_b {}, b_bar {}",
            c_b.nrows(),
            c_b.ncols(),
            d_b.len(),
            b_bar.len()
        )));
    }
    let latent = solve_stable(a_bb, b_bar)?;
    Ok(c_b * latent + d_b)
}

/// Directional derivative of a scalar blanket functional along a perturbation
/// of the blanket self-dynamics:
/// `(d phi)[dA_bb] = grad_phi_mu^T C_b (I - A_bb)^{-1} dA_bb (I - A_bb)^{-1} b_bar`.
///
/// The result is linear in `da_bb`; it matches a central finite difference of
/// `grad_phi_mu . stationary_blanket_mean(A_bb + t dA_bb)` at `t = 0`.
pub fn violation_directional_derivative(
    a_bb: &DMatrix<f64>,
    c_b: &DMatrix<f64>,
    b_bar: &DVector<f64>,
    grad_phi_mu: &DVector<f64>,
    da_bb: &DMatrix<f64>,
) -> Result<f64> {
    let n = a_bb.nrows();
    if da_bb.nrows() != n || da_bb.ncols() != n {
        return Err(CdmbdError::DimensionMismatch(
            "perturbation must match A_bb".into(),
        ));
    }
    if grad_phi_mu.len() != c_b.nrows() {
        return Err(CdmbdError::DimensionMismatch(
            "gradient must match the observation dimension of C_b".into(),
        ));
    }
    let inner = solve_stable(a_bb, b_bar)?;
    let pushed = solve_stable(a_bb, &(da_bb * inner))?;
    Ok(grad_phi_mu.dot(&(c_b * pushed)))
}

/// Fixed orthonormal matrix with unit spectral radius used to materialize a
/// blanket block from its scalar spectral radius: `A_bb = rho * Q`. Built
/// from Givens rotations on consecutive coordinate pairs so the embedding is
/// deterministic for a given size.
pub fn rotation_embedding(d_b: usize) -> DMatrix<f64> {
    let mut q = DMatrix::identity(d_b, d_b);
    let angle: f64 = 0.3;
    let (s, c) = angle.sin_cos();
    for i in (0..d_b.saturating_sub(1)).step_by(2) {
        let mut rot = DMatrix::identity(d_b, d_b);
        rot[(i, i)] = c;
        rot[(i, i + 1)] = -s;
        rot[(i + 1, i)] = s;
        rot[(i + 1, i + 1)] = c;
        q = rot * q;
    }
    q
}

/// `A_bb = rho * Q` for the fixed embedding `Q`; the spectral radius of the
/// result equals `rho` because `Q` is orthogonal.
pub fn blanket_block_from_rho(rho: f64, d_b: usize) -> DMatrix<f64> {
    rotation_embedding(d_b) * rho
}

/// Per-role emission: observation `y = C_l x_l + d_l + noise` where `x_l` is
/// the role's latent block only.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleEmission {
    pub read: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl RoleEmission {
    pub fn new(read: DMatrix<f64>, offset: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d_out = read.nrows();
        if offset.len() != d_out || cov.nrows() != d_out || cov.ncols() != d_out {
            return Err(CdmbdError::DimensionMismatch(
                "emission offset/covariance must match the observation dimension".into(),
            ));
        }
        if !is_symmetric_positive_definite(&cov) {
            return Err(CdmbdError::Numerical(
                "emission covariance must be symmetric positive definite".into(),
            ));
        }
        Ok(Self { read, offset, cov })
    }
}

fn is_symmetric_positive_definite(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (1.0 + m[(i, j)].abs()) {
                return false;
            }
        }
    }
    m.clone().cholesky().is_some()
}

/// Label-specific emission model; each role reads only its own latent block.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionModel {
    pub env: RoleEmission,
    pub blanket: RoleEmission,
    pub interior: RoleEmission,
}

impl EmissionModel {
    pub fn for_role(&self, role: Role) -> &RoleEmission {
        match role {
            Role::Env => &self.env,
            Role::Blanket => &self.blanket,
            Role::Interior => &self.interior,
        }
    }

    fn validate(&self, dims: &LatentDims) -> Result<()> {
        for role in Role::ALL {
            let em = self.for_role(role);
            if em.read.ncols() != dims.block_len(role) {
                return Err(CdmbdError::DimensionMismatch(format!(
                    "emission for {} reads {} latent coords, block has {}",
                    role,
                    em.read.ncols(),
                    dims.block_len(role)
                )));
            }
        }
        Ok(())
    }
}

/// Full model parameters: block dynamics, emissions, and the scalar spectral
/// radius of the blanket self-dynamics tracked by the simplified M-step.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: LatentDims,
    pub dynamics: DynamicsMatrix,
    pub emission: EmissionModel,
    pub rho: f64,
}

impl ModelParams {
    pub fn new(
        dims: LatentDims,
        dynamics: DynamicsMatrix,
        emission: EmissionModel,
        rho: f64,
    ) -> Result<Self> {
        if dynamics.dims != dims {
            return Err(CdmbdError::DimensionMismatch(
                "dynamics dims disagree with latent dims".into(),
            ));
        }
        emission.validate(&dims)?;
        let dynamics = enforce_mb_zeros(&dynamics);
        Ok(Self {
            dims,
            dynamics,
            emission,
            rho,
        })
    }

    /// Re-materialize the blanket block from the scalar `rho` and re-enforce
    /// the Markov-blanket zeros.
    pub fn set_rho(&mut self, rho: f64) -> Result<()> {
        self.rho = rho;
        let block = blanket_block_from_rho(rho, self.dims.blanket);
        self.dynamics.set_block(Role::Blanket, Role::Blanket, &block)?;
        self.dynamics = enforce_mb_zeros(&self.dynamics);
        Ok(())
    }
}

/// Interface type: the partition plus the sparsity/block structure of the
/// dynamics and emission. Two solutions belong to the same family iff their
/// signatures agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlanketSignature {
    pub partition: Vec<Role>,
    pub support_a: Vec<Vec<bool>>,
    pub block_c: Vec<Vec<bool>>,
}

impl BlanketSignature {
    /// Signature induced by a node partition and latent dims: the dynamics
    /// support is everything except the forbidden env-interior blocks, and
    /// each role's emission reads only its own block.
    pub fn from_partition(partition: &[Role], dims: &LatentDims) -> Self {
        let d = dims.total();
        let mut support_a = vec![vec![true; d]; d];
        let s = dims.block_range(Role::Env);
        let z = dims.block_range(Role::Interior);
        for i in s.clone() {
            for j in z.clone() {
                support_a[i][j] = false;
            }
        }
        for i in z {
            for j in s.clone() {
                support_a[i][j] = false;
            }
        }
        let block_c = Role::ALL
            .iter()
            .map(|role| {
                let range = dims.block_range(*role);
                (0..d).map(|j| range.contains(&j)).collect()
            })
            .collect();
        Self {
            partition: partition.to_vec(),
            support_a,
            block_c,
        }
    }

    /// Stable FNV-1a hash over the signature contents, used in result files.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        for role in &self.partition {
            eat(role.index() as u8);
        }
        eat(0xff);
        for row in &self.support_a {
            for b in row {
                eat(*b as u8);
            }
        }
        eat(0xfe);
        for row in &self.block_c {
            for b in row {
                eat(*b as u8);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dims_334() -> LatentDims {
        LatentDims::new(3, 3, 4).unwrap()
    }

    #[test]
    fn enforce_zeros_clears_forbidden_blocks() {
        let dims = dims_334();
        let d = dims.total();
        let a = DynamicsMatrix::new(dims, DMatrix::from_element(d, d, 0.7)).unwrap();
        let z = enforce_mb_zeros(&a);
        assert!(z.mb_zeros_hold());
        assert!(z
            .block(Role::Env, Role::Interior)
            .iter()
            .all(|v| *v == 0.0));
        // Permitted blocks untouched.
        assert!(z
            .block(Role::Blanket, Role::Interior)
            .iter()
            .all(|v| *v == 0.7));
    }

    #[test]
    fn enforce_zeros_is_idempotent_bitwise() {
        let dims = dims_334();
        let d = dims.total();
        let a = DynamicsMatrix::new(
            dims,
            DMatrix::from_fn(d, d, |i, j| (i * d + j) as f64 * 0.013 - 0.4),
        )
        .unwrap();
        let once = enforce_mb_zeros(&a);
        let twice = enforce_mb_zeros(&once);
        assert_eq!(once.entries, twice.entries);
    }

    #[test]
    fn spectral_radius_scaled_identity() {
        let m = DMatrix::from_diagonal_element(2, 2, 0.5);
        assert_relative_eq!(spectral_radius(&m).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn spectral_radius_complex_pair() {
        // Characteristic polynomial x^2 + 0.25 = 0, eigenvalues +-0.5i.
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.25, 0.0]);
        assert_relative_eq!(spectral_radius(&m).unwrap(), 0.5, epsilon = 1e-10);
    }

    #[test]
    fn spectral_radius_zero_matrix() {
        let m = DMatrix::zeros(3, 3);
        assert_eq!(spectral_radius(&m).unwrap(), 0.0);
    }

    #[test]
    fn spectral_radius_rejects_non_square_and_non_finite() {
        assert!(spectral_radius(&DMatrix::zeros(2, 3)).is_err());
        let m = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(spectral_radius(&m).is_err());
    }

    #[test]
    fn stationary_mean_scalar_geometric_series() {
        let a = DMatrix::from_row_slice(1, 1, &[0.5]);
        let c = DMatrix::from_row_slice(1, 1, &[1.0]);
        let d = DVector::from_row_slice(&[0.0]);
        let b = DVector::from_row_slice(&[1.0]);
        let mu = stationary_blanket_mean(&a, &c, &d, &b).unwrap();
        assert_relative_eq!(mu[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn stationary_mean_memoryless_limit() {
        let a = DMatrix::zeros(2, 2);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.5, -1.0]);
        let d = DVector::from_row_slice(&[0.3, -0.2]);
        let b = DVector::from_row_slice(&[1.0, 2.0]);
        let mu = stationary_blanket_mean(&a, &c, &d, &b).unwrap();
        let expected = &c * &b + &d;
        assert_relative_eq!((mu - expected).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn stationary_mean_long_run_scalar() {
        // 2 * (0.5 / 0.1) + 1, cross-checked by iterating x = 0.9 x + 0.5.
        let a = DMatrix::from_row_slice(1, 1, &[0.9]);
        let c = DMatrix::from_row_slice(1, 1, &[2.0]);
        let d = DVector::from_row_slice(&[1.0]);
        let b = DVector::from_row_slice(&[0.5]);
        let mu = stationary_blanket_mean(&a, &c, &d, &b).unwrap();
        let mut x = 0.0;
        for _ in 0..2000 {
            x = 0.9 * x + 0.5;
        }
        assert_relative_eq!(mu[0], 2.0 * x + 1.0, epsilon = 1e-9);
        assert_relative_eq!(mu[0], 11.0, epsilon = 1e-9);
    }

    #[test]
    fn stationary_mean_rejects_unstable_dynamics() {
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let c = DMatrix::from_row_slice(1, 1, &[1.0]);
        let d = DVector::from_row_slice(&[0.0]);
        let b = DVector::from_row_slice(&[1.0]);
        match stationary_blanket_mean(&a, &c, &d, &b) {
            Err(CdmbdError::Unstable { .. }) => {}
            other => panic!("expected instability error, got {other:?}"),
        }
    }

    #[test]
    fn directional_derivative_zero_direction() {
        let a = DMatrix::from_row_slice(1, 1, &[0.5]);
        let c = DMatrix::from_row_slice(1, 1, &[1.0]);
        let b = DVector::from_row_slice(&[1.0]);
        let g = DVector::from_row_slice(&[1.0]);
        let da = DMatrix::zeros(1, 1);
        let d = violation_directional_derivative(&a, &c, &b, &g, &da).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn directional_derivative_scalar_value() {
        // 1 * (1/0.5) * 1 * (1/0.5) * 1 = 4.
        let a = DMatrix::from_row_slice(1, 1, &[0.5]);
        let c = DMatrix::from_row_slice(1, 1, &[1.0]);
        let b = DVector::from_row_slice(&[1.0]);
        let g = DVector::from_row_slice(&[1.0]);
        let da = DMatrix::from_row_slice(1, 1, &[1.0]);
        let d = violation_directional_derivative(&a, &c, &b, &g, &da).unwrap();
        assert_relative_eq!(d, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn directional_derivative_is_odd_in_direction() {
        let a = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, -0.2, 0.3]);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        let b = DVector::from_row_slice(&[1.0, -1.0]);
        let g = DVector::from_row_slice(&[0.7, 0.2]);
        let da = DMatrix::from_row_slice(2, 2, &[0.3, -0.1, 0.2, 0.5]);
        let neg = -&da;
        let fwd = violation_directional_derivative(&a, &c, &b, &g, &da).unwrap();
        let bwd = violation_directional_derivative(&a, &c, &b, &g, &neg).unwrap();
        assert_relative_eq!(fwd + bwd, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn directional_derivative_matches_finite_difference() {
        let a = DMatrix::from_row_slice(2, 2, &[0.45, 0.12, -0.08, 0.38]);
        let c = DMatrix::from_row_slice(2, 2, &[1.1, 0.3, -0.4, 0.9]);
        let b = DVector::from_row_slice(&[0.8, -0.6]);
        let g = DVector::from_row_slice(&[0.5, 1.3]);
        let da = DMatrix::from_row_slice(2, 2, &[0.21, -0.34, 0.05, 0.17]);
        let analytic = violation_directional_derivative(&a, &c, &b, &g, &da).unwrap();

        let h = 1e-6;
        let d0 = DVector::zeros(2);
        let plus = stationary_blanket_mean(&(&a + &da * h), &c, &d0, &b).unwrap();
        let minus = stationary_blanket_mean(&(&a - &da * h), &c, &d0, &b).unwrap();
        let fd = g.dot(&((plus - minus) / (2.0 * h)));
        assert_relative_eq!(analytic, fd, max_relative = 1e-6);
    }

    #[test]
    fn rho_embedding_preserves_spectral_radius() {
        for d in 1..=8 {
            let block = blanket_block_from_rho(0.47, d);
            let rho = spectral_radius(&block).unwrap();
            assert!((rho - 0.47).abs() < 1e-9, "d={d}: rho={rho}");
        }
    }

    #[test]
    fn set_rho_keeps_mb_zeros_and_radius() {
        let dims = dims_334();
        let d = dims.total();
        let dynamics =
            DynamicsMatrix::new(dims, DMatrix::from_fn(d, d, |i, j| 0.01 * (i + j) as f64))
                .unwrap();
        let mk = |n| RoleEmission::new(DMatrix::zeros(2, n), DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let emission = EmissionModel {
            env: mk(3),
            blanket: mk(3),
            interior: mk(4),
        };
        let mut params = ModelParams::new(dims, dynamics, emission, 0.5).unwrap();
        params.set_rho(0.83).unwrap();
        assert!(params.dynamics.mb_zeros_hold());
        let rho = spectral_radius(&params.dynamics.block(Role::Blanket, Role::Blanket)).unwrap();
        assert!((rho - 0.83).abs() < 1e-9);
    }

    #[test]
    fn signature_masks_forbidden_blocks() {
        let dims = dims_334();
        let sig = BlanketSignature::from_partition(
            &[Role::Env, Role::Blanket, Role::Interior],
            &dims,
        );
        for i in dims.block_range(Role::Env) {
            for j in dims.block_range(Role::Interior) {
                assert!(!sig.support_a[i][j]);
                assert!(!sig.support_a[j][i]);
            }
        }
        // A same-partition signature hashes identically; a different one does not.
        let again = BlanketSignature::from_partition(
            &[Role::Env, Role::Blanket, Role::Interior],
            &dims,
        );
        assert_eq!(sig.hash(), again.hash());
        let other = BlanketSignature::from_partition(
            &[Role::Blanket, Role::Env, Role::Interior],
            &dims,
        );
        assert_ne!(sig.hash(), other.hash());
    }

    proptest! {
        #[test]
        fn prop_enforce_preserves_allowed_entries(seed in 0u64..500) {
            let dims = LatentDims::new(2, 2, 2).unwrap();
            let d = dims.total();
            let vals: Vec<f64> = (0..d * d)
                .map(|k| ((seed.wrapping_mul(6364136223846793005).wrapping_add((k as u64).wrapping_mul(1442695040888963407))) % 1000) as f64 / 500.0 - 1.0)
                .collect();
            let a = DynamicsMatrix::new(dims, DMatrix::from_row_slice(d, d, &vals)).unwrap();
            let z = enforce_mb_zeros(&a);
            let s = dims.block_range(Role::Env);
            let zr = dims.block_range(Role::Interior);
            for i in 0..d {
                for j in 0..d {
                    let forbidden = (s.contains(&i) && zr.contains(&j))
                        || (zr.contains(&i) && s.contains(&j));
                    if forbidden {
                        prop_assert_eq!(z.entries[(i, j)], 0.0);
                    } else {
                        prop_assert_eq!(z.entries[(i, j)], a.entries[(i, j)]);
                    }
                }
            }
        }

        #[test]
        fn prop_fd_matches_directional_derivative(seed in 0u64..60) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..=6usize);
            let mut a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            // Scale to a comfortably stable radius.
            let rho = spectral_radius(&a).unwrap();
            if rho > 0.0 {
                a *= rng.gen_range(0.2..0.85) / rho;
            }
            let c = DMatrix::from_fn(2, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let g = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let da = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));

            let analytic = violation_directional_derivative(&a, &c, &b, &g, &da).unwrap();
            let h = 1e-6;
            let d0 = DVector::zeros(2);
            let plus = stationary_blanket_mean(&(&a + &da * h), &c, &d0, &b).unwrap();
            let minus = stationary_blanket_mean(&(&a - &da * h), &c, &d0, &b).unwrap();
            let fd = g.dot(&((plus - minus) / (2.0 * h)));
            let scale = analytic.abs().max(fd.abs()).max(1e-8);
            prop_assert!((analytic - fd).abs() / scale < 1e-5);
        }
    }
}
