//! Synthetic cup simulator. Generates observation tensors with a known
//! ground-truth blanket structure: ambient/hand nodes (S), wall nodes (B)
//! and interior content nodes (Z), stacked as contiguous index bands. The
//! data come from a linear-Gaussian latent recursion with Markov-blanket
//! zero structure plus per-role emissions, so the wall temperature channels
//! land exactly on the configured style values when the noise scale is zero.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::Partition;
use crate::error::{CdmbdError, Result};
use crate::statespace::{
    blanket_block_from_rho, enforce_mb_zeros, spectral_radius, DynamicsMatrix, LatentDims, Role,
};

pub const N_CHANNELS: usize = 7;
pub const CHANNEL_NAMES: [&str; N_CHANNELS] =
    ["T_inner", "T_outer", "grad_T", "q", "r", "kappa", "w"];

/// Per-channel reference scales multiplied by the config noise scale:
/// temperatures 1 degC, gradient 20 degC/m, flux 5 W/m2, radius/wall 0.5 mm,
/// curvature matched to the radius scale.
pub const CHANNEL_NOISE_REF: [f64; N_CHANNELS] = [1.0, 1.0, 20.0, 5.0, 0.5, 0.0005, 0.5];

const AMBIENT_C: f64 = 23.0;
const LATENT_BLOCK: usize = 4;

/// Cup style presets with their ground-truth dynamics radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StyleName {
    Espresso,
    Tea,
    TravelMug,
}

impl StyleName {
    pub const ALL: [StyleName; 3] = [StyleName::Espresso, StyleName::Tea, StyleName::TravelMug];

    pub fn label(self) -> &'static str {
        match self {
            StyleName::Espresso => "espresso",
            StyleName::Tea => "tea",
            StyleName::TravelMug => "travel-mug",
        }
    }
}

impl std::fmt::Display for StyleName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Wall construction variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WallKind {
    Single,
    Double,
}

/// Style parameters: volumes and temperatures, plus the spectral radius of
/// the true blanket self-dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CupStyle {
    pub name: StyleName,
    pub volume_ml: f64,
    pub t_inner_c: f64,
    pub t_outer_single_c: f64,
    pub t_outer_double_c: f64,
    pub rho_true: f64,
}

impl CupStyle {
    pub fn preset(name: StyleName) -> Self {
        match name {
            StyleName::Espresso => CupStyle {
                name,
                volume_ml: 60.0,
                t_inner_c: 90.0,
                t_outer_single_c: 86.0,
                t_outer_double_c: 30.9,
                rho_true: 0.47,
            },
            StyleName::Tea => CupStyle {
                name,
                volume_ml: 250.0,
                t_inner_c: 85.0,
                t_outer_single_c: 83.0,
                t_outer_double_c: 31.0,
                rho_true: 0.51,
            },
            StyleName::TravelMug => CupStyle {
                name,
                volume_ml: 350.0,
                t_inner_c: 80.0,
                t_outer_single_c: 86.0,
                t_outer_double_c: 30.9,
                rho_true: 0.52,
            },
        }
    }

    pub fn t_outer(&self, wall: WallKind) -> f64 {
        match wall {
            WallKind::Single => self.t_outer_single_c,
            WallKind::Double => self.t_outer_double_c,
        }
    }

    /// Wall radius taper (base, top) in millimetres; the band mean matches
    /// the style's nominal grip radius.
    pub fn radius_taper(&self) -> (f64, f64) {
        match self.name {
            StyleName::Espresso => (31.0, 39.0),
            StyleName::Tea => (34.0, 46.0),
            StyleName::TravelMug => (46.0, 54.0),
        }
    }

    /// Wall thickness in millimetres for a construction variant.
    pub fn wall_thickness(&self, wall: WallKind) -> f64 {
        match (self.name, wall) {
            (StyleName::Espresso, WallKind::Single) => 3.0,
            (StyleName::Espresso, WallKind::Double) => 7.5,
            (StyleName::Tea, WallKind::Single) => 4.5,
            (StyleName::Tea, WallKind::Double) => 8.0,
            (StyleName::TravelMug, WallKind::Single) => 5.0,
            (StyleName::TravelMug, WallKind::Double) => 8.0,
        }
    }
}

/// Simulation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub style: StyleName,
    pub wall: WallKind,
    #[serde(default = "default_nodes")]
    pub n_nodes: usize,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default = "default_channels")]
    pub n_channels: usize,
    pub noise_scale: f64,
    #[serde(default)]
    pub flat_data: bool,
    #[serde(default = "default_flat_frac")]
    pub flat_variation_frac: f64,
    pub seed: u64,
}

fn default_nodes() -> usize {
    30
}
fn default_steps() -> usize {
    50
}
fn default_channels() -> usize {
    N_CHANNELS
}
fn default_flat_frac() -> f64 {
    0.08
}

impl SimConfig {
    pub fn new(style: StyleName, wall: WallKind, noise_scale: f64, seed: u64) -> Self {
        Self {
            style,
            wall,
            n_nodes: default_nodes(),
            n_steps: default_steps(),
            n_channels: N_CHANNELS,
            noise_scale,
            flat_data: false,
            flat_variation_frac: default_flat_frac(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels != N_CHANNELS {
            return Err(CdmbdError::InvalidConfig(format!(
                "n_channels is fixed at {N_CHANNELS}"
            )));
        }
        if self.n_nodes < 3 {
            return Err(CdmbdError::InvalidConfig(
                "need at least one node per role".into(),
            ));
        }
        if self.n_steps == 0 {
            return Err(CdmbdError::InvalidConfig("n_steps must be >= 1".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(CdmbdError::InvalidConfig(
                "noise_scale must be >= 0".into(),
            ));
        }
        if !(self.flat_variation_frac >= 0.0) {
            return Err(CdmbdError::InvalidConfig(
                "flat_variation_frac must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Contiguous ground-truth layout: ambient band, wall band, interior band.
    pub fn layout(&self) -> NodeLayout {
        let n = self.n_nodes;
        let n_s = n / 3;
        let n_z = n / 3;
        let n_b = n - n_s - n_z;
        NodeLayout { n_s, n_b, n_z }
    }
}

/// Sizes of the three contiguous node bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeLayout {
    pub n_s: usize,
    pub n_b: usize,
    pub n_z: usize,
}

impl NodeLayout {
    pub fn roles(&self) -> Vec<Role> {
        let mut roles = Vec::with_capacity(self.n_s + self.n_b + self.n_z);
        roles.extend(std::iter::repeat(Role::Env).take(self.n_s));
        roles.extend(std::iter::repeat(Role::Blanket).take(self.n_b));
        roles.extend(std::iter::repeat(Role::Interior).take(self.n_z));
        roles
    }
}

/// T x N x D observation array, t-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTensor {
    pub n_steps: usize,
    pub n_nodes: usize,
    data: Vec<f64>,
}

impl ObservationTensor {
    pub fn zeros(n_steps: usize, n_nodes: usize) -> Self {
        Self {
            n_steps,
            n_nodes,
            data: vec![0.0; n_steps * n_nodes * N_CHANNELS],
        }
    }

    #[inline]
    fn idx(&self, t: usize, node: usize, channel: usize) -> usize {
        (t * self.n_nodes + node) * N_CHANNELS + channel
    }

    #[inline]
    pub fn get(&self, t: usize, node: usize, channel: usize) -> f64 {
        self.data[self.idx(t, node, channel)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, node: usize, channel: usize, value: f64) {
        let i = self.idx(t, node, channel);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Time-average of one node over all channels.
    pub fn node_time_mean(&self, node: usize) -> [f64; N_CHANNELS] {
        let mut out = [0.0; N_CHANNELS];
        for t in 0..self.n_steps {
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.get(t, node, c);
            }
        }
        for o in &mut out {
            *o /= self.n_steps as f64;
        }
        out
    }

    pub fn node_means(&self) -> Vec<[f64; N_CHANNELS]> {
        (0..self.n_nodes).map(|i| self.node_time_mean(i)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Columnar text export: `t,node,<channels...>` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t,node")?;
        for name in CHANNEL_NAMES {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for t in 0..self.n_steps {
            for node in 0..self.n_nodes {
                write!(w, "{t},{node}")?;
                for c in 0..N_CHANNELS {
                    write!(w, ",{}", self.get(t, node, c))?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// Self-describing binary dump: magic `CDMB`, format version, shape,
    /// channel names, then little-endian f64 data in t-major order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"CDMB")?;
        w.write_all(&1u16.to_le_bytes())?;
        w.write_all(&(self.n_steps as u32).to_le_bytes())?;
        w.write_all(&(self.n_nodes as u32).to_le_bytes())?;
        w.write_all(&(N_CHANNELS as u32).to_le_bytes())?;
        for name in CHANNEL_NAMES {
            w.write_all(&[name.len() as u8])?;
            w.write_all(name.as_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"CDMB" {
            return Err(CdmbdError::InvalidConfig("bad tensor magic".into()));
        }
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b)?;
        if u16::from_le_bytes(u16b) != 1 {
            return Err(CdmbdError::InvalidConfig("unknown tensor version".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let n_steps = u32::from_le_bytes(u32b) as usize;
        r.read_exact(&mut u32b)?;
        let n_nodes = u32::from_le_bytes(u32b) as usize;
        r.read_exact(&mut u32b)?;
        let d = u32::from_le_bytes(u32b) as usize;
        if d != N_CHANNELS {
            return Err(CdmbdError::InvalidConfig(format!(
                "tensor has {d} channels, expected {N_CHANNELS}"
            )));
        }
        for _ in 0..d {
            let mut len = [0u8; 1];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; len[0] as usize];
            r.read_exact(&mut name)?;
        }
        let mut data = vec![0.0; n_steps * n_nodes * d];
        let mut f64b = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut f64b)?;
            *v = f64::from_le_bytes(f64b);
        }
        Ok(Self {
            n_steps,
            n_nodes,
            data,
        })
    }
}

/// Simulator output: the tensor plus the generating structure.
#[derive(Debug, Clone)]
pub struct CupData {
    pub tensor: ObservationTensor,
    pub ground_truth: Partition,
    pub a_true: DynamicsMatrix,
}

/// Deterministic emission mean of one node: role- and style-specific channel
/// values, with the wall geometry tapering linearly along the band.
fn node_emission_mean(
    style: &CupStyle,
    wall: WallKind,
    role: Role,
    frac: f64,
) -> [f64; N_CHANNELS] {
    let (r_base, r_top) = style.radius_taper();
    let r_wall = r_base + (r_top - r_base) * frac;
    let w = style.wall_thickness(wall);
    let t_in = style.t_inner_c;
    let t_out = style.t_outer(wall);
    match role {
        Role::Blanket => {
            let grad = (t_in - t_out) / (w / 1000.0);
            let q = 10.0 * (t_in - t_out) / w;
            [t_in, t_out, grad, q, r_wall, 1.0 / r_wall, w]
        }
        Role::Interior => {
            let r = r_wall - w - 13.0;
            [t_in, t_in - 1.0, -60.0, -15.0, r, 1.0 / r, 0.5]
        }
        Role::Env => {
            let r = r_wall + 14.0;
            [AMBIENT_C, AMBIENT_C, 0.0, 0.1, r, 1.0 / r, 14.0]
        }
    }
}

/// True block-structured dynamics for a style: the blanket block is the
/// fixed orthonormal embedding scaled to the style's spectral radius, and
/// the forbidden env-interior blocks are zeroed.
pub fn true_dynamics(style: &CupStyle) -> Result<DynamicsMatrix> {
    let dims = LatentDims::new(LATENT_BLOCK, LATENT_BLOCK, LATENT_BLOCK)?;
    let d = dims.total();
    let mut a = DynamicsMatrix::new(dims, DMatrix::zeros(d, d))?;
    let eye = DMatrix::identity(LATENT_BLOCK, LATENT_BLOCK);
    let couple = DMatrix::from_element(LATENT_BLOCK, LATENT_BLOCK, 0.04);
    a.set_block(Role::Env, Role::Env, &(&eye * 0.50))?;
    a.set_block(Role::Interior, Role::Interior, &(&eye * 0.55))?;
    a.set_block(
        Role::Blanket,
        Role::Blanket,
        &blanket_block_from_rho(style.rho_true, LATENT_BLOCK),
    )?;
    a.set_block(Role::Env, Role::Blanket, &couple)?;
    a.set_block(Role::Blanket, Role::Env, &couple)?;
    a.set_block(Role::Blanket, Role::Interior, &couple)?;
    a.set_block(Role::Interior, Role::Blanket, &couple)?;
    let a = enforce_mb_zeros(&a);
    let rho_full = spectral_radius(&a.entries)?;
    if rho_full >= 1.0 {
        return Err(CdmbdError::Numerical(format!(
            "true dynamics are unstable: rho = {rho_full}"
        )));
    }
    Ok(a)
}

fn latent_noise_std(role: Role, rho_true: f64) -> f64 {
    let main = match role {
        Role::Env => 0.50,
        Role::Blanket => rho_true,
        Role::Interior => 0.55,
    };
    (1.0 - main * main).sqrt()
}

struct LatentSim {
    a: DMatrix<f64>,
    x: DVector<f64>,
    noise_std: Vec<f64>,
}

impl LatentSim {
    fn new(a_true: &DynamicsMatrix, rho_true: f64) -> Self {
        let dims = a_true.dims;
        let mut noise_std = vec![0.0; dims.total()];
        for role in Role::ALL {
            for i in dims.block_range(role) {
                noise_std[i] = latent_noise_std(role, rho_true);
            }
        }
        Self {
            a: a_true.entries.clone(),
            x: DVector::zeros(dims.total()),
            noise_std,
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) {
        let mut eta = DVector::zeros(self.x.len());
        for (e, std) in eta.iter_mut().zip(self.noise_std.iter()) {
            let z: f64 = rng.sample(StandardNormal);
            *e = std * z;
        }
        self.x = &self.a * &self.x + eta;
    }

    fn block(&self, dims: &LatentDims, role: Role) -> DVector<f64> {
        let r = dims.block_range(role);
        self.x.rows(r.start, r.len()).into()
    }
}

const BURN_IN: usize = 24;

/// Generate a cup observation tensor with its ground-truth partition and
/// generating dynamics. Deterministic for a fixed config.
pub fn generate_cup_data(cfg: &SimConfig) -> Result<CupData> {
    cfg.validate()?;
    let style = CupStyle::preset(cfg.style);
    let layout = cfg.layout();
    let roles = layout.roles();
    let a_true = true_dynamics(&style)?;
    let dims = a_true.dims;

    // Per-node deterministic channel means; band-relative height fractions.
    let mut band_pos = [0usize; 3];
    let band_len = [layout.n_s, layout.n_b, layout.n_z];
    let mut means = Vec::with_capacity(cfg.n_nodes);
    for role in &roles {
        let b = role.index();
        let len = band_len[b].max(1);
        let frac = if len > 1 {
            band_pos[b] as f64 / (len - 1) as f64
        } else {
            0.5
        };
        band_pos[b] += 1;
        means.push(node_emission_mean(&style, cfg.wall, *role, frac));
    }

    let gains: Vec<f64> = CHANNEL_NOISE_REF
        .iter()
        .map(|r| 0.6 * cfg.noise_scale * r)
        .collect();
    let eps_std: Vec<f64> = CHANNEL_NOISE_REF
        .iter()
        .map(|r| 0.8 * cfg.noise_scale * r)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut latent = LatentSim::new(&a_true, style.rho_true);
    for _ in 0..BURN_IN {
        latent.step(&mut rng);
    }

    let mut tensor = ObservationTensor::zeros(cfg.n_steps, cfg.n_nodes);
    for t in 0..cfg.n_steps {
        latent.step(&mut rng);
        let blocks: Vec<DVector<f64>> = Role::ALL
            .iter()
            .map(|role| latent.block(&dims, *role))
            .collect();
        for (node, role) in roles.iter().enumerate() {
            let x = &blocks[role.index()];
            for c in 0..N_CHANNELS {
                let z: f64 = rng.sample(StandardNormal);
                let latent_part = gains[c] * x[c % x.len()];
                tensor.set(t, node, c, means[node][c] + latent_part + eps_std[c] * z);
            }
        }
    }

    Ok(CupData {
        tensor,
        ground_truth: Partition::new(roles),
        a_true,
    })
}

/// Spatially flat tensor: every node shares one base time series; per-node
/// deviations are constant offsets with standard deviation
/// `flat_variation_frac` times the base signal's noise scale per channel.
pub fn generate_flat_data(cfg: &SimConfig) -> Result<ObservationTensor> {
    cfg.validate()?;
    if !cfg.flat_data {
        return Err(CdmbdError::InvalidConfig(
            "generate_flat_data requires flat_data = true".into(),
        ));
    }
    let style = CupStyle::preset(cfg.style);
    let a_true = true_dynamics(&style)?;
    let dims = a_true.dims;
    let base_mean = node_emission_mean(&style, cfg.wall, Role::Blanket, 0.5);

    let gains: Vec<f64> = CHANNEL_NOISE_REF
        .iter()
        .map(|r| 0.6 * cfg.noise_scale * r)
        .collect();
    let eps_std: Vec<f64> = CHANNEL_NOISE_REF
        .iter()
        .map(|r| 0.8 * cfg.noise_scale * r)
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Fixed per-node offsets first, then the shared base path.
    let mut offsets = vec![[0.0; N_CHANNELS]; cfg.n_nodes];
    for row in &mut offsets {
        for (c, o) in row.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *o = cfg.flat_variation_frac * cfg.noise_scale * CHANNEL_NOISE_REF[c] * z;
        }
    }

    let mut latent = LatentSim::new(&a_true, style.rho_true);
    for _ in 0..BURN_IN {
        latent.step(&mut rng);
    }

    let mut tensor = ObservationTensor::zeros(cfg.n_steps, cfg.n_nodes);
    for t in 0..cfg.n_steps {
        latent.step(&mut rng);
        let xb = latent.block(&dims, Role::Blanket);
        let mut base = [0.0; N_CHANNELS];
        for (c, b) in base.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *b = base_mean[c] + gains[c] * xb[c % xb.len()] + eps_std[c] * z;
        }
        for node in 0..cfg.n_nodes {
            for c in 0..N_CHANNELS {
                tensor.set(t, node, c, base[c] + offsets[node][c]);
            }
        }
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg(style: StyleName, wall: WallKind, noise: f64) -> SimConfig {
        SimConfig::new(style, wall, noise, 7)
    }

    #[test]
    fn style_presets_carry_the_expected_values() {
        let checks = [
            (StyleName::Espresso, 60.0, 90.0, 86.0, 30.9, 0.47),
            (StyleName::Tea, 250.0, 85.0, 83.0, 31.0, 0.51),
            (StyleName::TravelMug, 350.0, 80.0, 86.0, 30.9, 0.52),
        ];
        for (name, vol, t_in, t_sw, t_dw, rho) in checks {
            let s = CupStyle::preset(name);
            assert_eq!(s.volume_ml, vol);
            assert_eq!(s.t_inner_c, t_in);
            assert_eq!(s.t_outer_single_c, t_sw);
            assert_eq!(s.t_outer_double_c, t_dw);
            assert_eq!(s.rho_true, rho);
        }
    }

    #[test]
    fn tea_single_noiseless_wall_means_hit_table_value() {
        let data = generate_cup_data(&cfg(StyleName::Tea, WallKind::Single, 0.0)).unwrap();
        for (i, role) in data.ground_truth.labels().iter().enumerate() {
            if *role == Role::Blanket {
                let mean = data.tensor.node_time_mean(i);
                assert_relative_eq!(mean[1], 83.0, epsilon = 1e-12);
                assert_relative_eq!(mean[0], 85.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn espresso_double_noiseless_outer_temperature() {
        let data = generate_cup_data(&cfg(StyleName::Espresso, WallKind::Double, 0.0)).unwrap();
        for (i, role) in data.ground_truth.labels().iter().enumerate() {
            if *role == Role::Blanket {
                assert_relative_eq!(data.tensor.node_time_mean(i)[1], 30.9, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let c = cfg(StyleName::TravelMug, WallKind::Double, 2.5);
        let a = generate_cup_data(&c).unwrap();
        let b = generate_cup_data(&c).unwrap();
        assert_eq!(a.tensor.data(), b.tensor.data());
        let mut c2 = c;
        c2.seed ^= 1;
        let d = generate_cup_data(&c2).unwrap();
        assert_ne!(a.tensor.data(), d.tensor.data());
    }

    #[test]
    fn kappa_is_reciprocal_radius_before_noise() {
        let data = generate_cup_data(&cfg(StyleName::Tea, WallKind::Single, 0.0)).unwrap();
        for node in 0..data.tensor.n_nodes {
            let mean = data.tensor.node_time_mean(node);
            assert_relative_eq!(mean[5], 1.0 / mean[4], epsilon = 1e-12);
        }
    }

    #[test]
    fn ground_truth_layout_is_contiguous_with_all_roles() {
        let data = generate_cup_data(&cfg(StyleName::Espresso, WallKind::Single, 1.0)).unwrap();
        let labels = data.ground_truth.labels();
        assert_eq!(labels.len(), 30);
        for role in Role::ALL {
            let idx: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, r)| **r == role)
                .map(|(i, _)| i)
                .collect();
            assert!(!idx.is_empty());
            assert!(
                idx.windows(2).all(|w| w[1] == w[0] + 1),
                "{role} band not contiguous"
            );
        }
    }

    #[test]
    fn true_dynamics_respect_mb_zeros_and_rho() {
        for name in StyleName::ALL {
            let style = CupStyle::preset(name);
            let a = true_dynamics(&style).unwrap();
            assert!(a.mb_zeros_hold());
            let again = enforce_mb_zeros(&a);
            assert_eq!(a.entries, again.entries);
            let rho = spectral_radius(&a.block(Role::Blanket, Role::Blanket)).unwrap();
            assert_relative_eq!(rho, style.rho_true, epsilon = 1e-9);
        }
    }

    #[test]
    fn tensor_is_finite_under_noise() {
        let data = generate_cup_data(&cfg(StyleName::Tea, WallKind::Single, 3.0)).unwrap();
        assert!(data.tensor.all_finite());
        assert_eq!(data.tensor.n_steps, 50);
        assert_eq!(data.tensor.n_nodes, 30);
    }

    #[test]
    fn flat_noiseless_nodes_are_bit_identical() {
        let mut c = cfg(StyleName::Tea, WallKind::Single, 0.0);
        c.flat_data = true;
        let tensor = generate_flat_data(&c).unwrap();
        for t in 0..tensor.n_steps {
            for node in 1..tensor.n_nodes {
                for ch in 0..N_CHANNELS {
                    assert_eq!(tensor.get(t, node, ch), tensor.get(t, 0, ch));
                }
            }
        }
    }

    #[test]
    fn flat_across_node_variation_ratio_near_configured_fraction() {
        let mut c = cfg(StyleName::Tea, WallKind::Single, 2.0);
        c.flat_data = true;
        c.seed = 42;
        let tensor = generate_flat_data(&c).unwrap();
        for ch in [0usize, 1, 3, 4] {
            let means: Vec<f64> = (0..tensor.n_nodes)
                .map(|i| tensor.node_time_mean(i)[ch])
                .collect();
            let m = means.iter().sum::<f64>() / means.len() as f64;
            let across =
                (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / means.len() as f64).sqrt();
            let mut within = 0.0;
            for node in 0..tensor.n_nodes {
                let series: Vec<f64> =
                    (0..tensor.n_steps).map(|t| tensor.get(t, node, ch)).collect();
                let mu = series.iter().sum::<f64>() / series.len() as f64;
                within += (series.iter().map(|v| (v - mu).powi(2)).sum::<f64>()
                    / series.len() as f64)
                    .sqrt();
            }
            within /= tensor.n_nodes as f64;
            let ratio = across / within;
            assert!(
                (ratio - 0.08).abs() < 0.02,
                "channel {ch}: across/within = {ratio}"
            );
        }
    }

    #[test]
    fn binary_round_trip_preserves_tensor() {
        let data = generate_cup_data(&cfg(StyleName::Espresso, WallKind::Single, 1.5)).unwrap();
        let mut buf = Vec::new();
        data.tensor.write_binary(&mut buf).unwrap();
        let back = ObservationTensor::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back, data.tensor);
    }

    #[test]
    fn csv_export_has_header_and_row_count() {
        let data = generate_cup_data(&cfg(StyleName::Tea, WallKind::Single, 0.5)).unwrap();
        let mut buf = Vec::new();
        data.tensor.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,node,T_inner,T_outer,grad_T,q,r,kappa,w"
        );
        assert_eq!(text.lines().count(), 1 + 50 * 30);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = cfg(StyleName::Tea, WallKind::Single, 1.0);
        c.n_channels = 6;
        assert!(generate_cup_data(&c).is_err());
        let mut c = cfg(StyleName::Tea, WallKind::Single, -1.0);
        c.n_channels = N_CHANNELS;
        assert!(generate_cup_data(&c).is_err());
        let c = cfg(StyleName::Tea, WallKind::Single, 1.0);
        assert!(generate_flat_data(&c).is_err());
    }
}
