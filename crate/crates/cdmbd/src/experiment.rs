//! Declarative experiment harness: parses TOML experiment configs, runs the
//! navigation / transition / disambiguation / design-loop experiments with
//! explicit seeds, and writes deterministic result and plot-data files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::designloop::{
    run_design_loop, LoopConfig, LoopState, UserModel, CONTACT_DIM, DEFAULT_CONTACT_SIGMA_FLOOR,
};
use crate::engine::{
    gap_diagnostic, run_multichain, scan_family_transition, ChainConfig, ChainResult,
    InitPartition, MultiChainResult, Partition, TransitionReport,
};
use crate::error::{CdmbdError, Result};
use crate::requirements::RequirementProfile;
use crate::simulator::{
    generate_cup_data, generate_flat_data, ObservationTensor, SimConfig, StyleName, WallKind,
};
use crate::statespace::Role;

/// Which experiment a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    P1,
    P2,
    P3,
    Loop,
    GapOnly,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExperimentKind::P1 => "P1",
            ExperimentKind::P2 => "P2",
            ExperimentKind::P3 => "P3",
            ExperimentKind::Loop => "Loop",
            ExperimentKind::GapOnly => "GapOnly",
        };
        f.write_str(s)
    }
}

fn default_alpha_rho() -> f64 {
    0.025
}
fn default_rho_bounds() -> [f64; 2] {
    [0.30, 0.96]
}
fn default_alpha_lambda() -> f64 {
    0.12
}
fn default_lambda_max() -> f64 {
    15.0
}
fn default_sigma_score() -> f64 {
    1.0
}
fn default_flip_prob() -> f64 {
    0.2
}
fn default_init_mode() -> String {
    "anchored".into()
}

/// Chain block of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSection {
    pub n_iter: usize,
    #[serde(default = "default_alpha_rho")]
    pub alpha_rho: f64,
    #[serde(default = "default_rho_bounds")]
    pub rho_bounds: [f64; 2],
    #[serde(default = "default_alpha_lambda")]
    pub alpha_lambda: f64,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
    #[serde(default = "default_sigma_score")]
    pub sigma_score: f64,
    #[serde(default = "default_init_mode")]
    pub init_mode: String,
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    /// Explicit per-chain seeds; never derived from the clock.
    pub seeds: Vec<u64>,
}

impl ChainSection {
    pub fn to_engine(&self) -> Result<ChainConfig> {
        let init = match self.init_mode.as_str() {
            "anchored" => InitPartition::Anchored {
                flip_prob: self.flip_prob,
            },
            "random" => InitPartition::Random,
            other => {
                return Err(CdmbdError::InvalidConfig(format!(
                    "unknown init_mode '{other}' (expected anchored|random)"
                )))
            }
        };
        let cfg = ChainConfig {
            n_iter: self.n_iter,
            alpha_rho: self.alpha_rho,
            rho_bounds: (self.rho_bounds[0], self.rho_bounds[1]),
            alpha_lambda: self.alpha_lambda,
            lambda_max: self.lambda_max,
            sigma_score: self.sigma_score,
            init,
            freeze_lambda: false,
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Scan block (family transition).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSection {
    pub channel: usize,
    pub start: f64,
    pub stop: f64,
    pub steps: usize,
    /// Name of the profile (from `profiles`) used as the scan template.
    pub profile: String,
    #[serde(default = "default_jump_threshold")]
    pub jump_threshold: usize,
}

fn default_jump_threshold() -> usize {
    5
}

impl ScanSection {
    pub fn grid(&self) -> Vec<f64> {
        let n = self.steps.max(2);
        (0..n)
            .map(|i| self.start + i as f64 * (self.stop - self.start) / (n - 1) as f64)
            .collect()
    }
}

/// User block (design loop).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSection {
    pub name: String,
    pub t_pref: f64,
    pub rho_pref: f64,
    /// Preferred curvature, per metre.
    pub kappa_pref: f64,
    pub sigma: f64,
}

impl UserSection {
    pub fn to_model(&self) -> Result<UserModel> {
        UserModel::new(
            self.name.clone(),
            self.t_pref,
            self.rho_pref,
            self.kappa_pref,
            self.sigma,
        )
    }
}

fn default_loop_iters() -> usize {
    3
}
fn default_learning_rate() -> f64 {
    0.3
}
fn default_contraction() -> f64 {
    0.10
}
fn default_gamma() -> f64 {
    1.0
}
fn default_contact_floor() -> [f64; CONTACT_DIM] {
    DEFAULT_CONTACT_SIGMA_FLOOR
}
fn default_loop_styles() -> Vec<StyleName> {
    vec![StyleName::Espresso, StyleName::Tea, StyleName::TravelMug]
}
fn default_loop_wall() -> WallKind {
    WallKind::Single
}

/// Loop block (design loop).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSection {
    #[serde(default = "default_loop_iters")]
    pub n_iter: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_contraction")]
    pub contraction: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Calibration floor on cup-side contact standard deviations.
    #[serde(default = "default_contact_floor")]
    pub contact_sigma_floor: [f64; CONTACT_DIM],
    #[serde(default = "default_loop_styles")]
    pub styles: Vec<StyleName>,
    #[serde(default = "default_loop_wall")]
    pub wall: WallKind,
}

impl LoopSection {
    pub fn to_engine(&self) -> LoopConfig {
        LoopConfig {
            n_iter: self.n_iter,
            learning_rate: self.learning_rate,
            contraction: self.contraction,
            gamma: self.gamma,
            contact_sigma_floor: self.contact_sigma_floor,
        }
    }
}

/// Top-level experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub output_dir: PathBuf,
    pub sim: SimConfig,
    pub chain: ChainSection,
    #[serde(default)]
    pub profiles: Vec<RequirementProfile>,
    #[serde(default)]
    pub scan: Option<ScanSection>,
    #[serde(default)]
    pub users: Option<Vec<UserSection>>,
    #[serde(default, rename = "loop")]
    pub loop_section: Option<LoopSection>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| CdmbdError::InvalidConfig(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Canonical serialized form.
    pub fn to_canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| CdmbdError::InvalidConfig(format!("config serialize: {e}")))
    }

    /// Collect every validation failure into one error message.
    pub fn validate(&self) -> Result<()> {
        let mut failures = Vec::new();
        if let Err(e) = self.sim.validate() {
            failures.push(e.to_string());
        }
        if self.chain.seeds.is_empty() {
            failures.push("chain.seeds must list at least one seed".into());
        }
        if let Err(e) = self.chain.to_engine() {
            failures.push(e.to_string());
        }
        for profile in &self.profiles {
            if let Err(e) = profile.validate() {
                failures.push(e.to_string());
            }
        }
        match self.experiment {
            ExperimentKind::P1 | ExperimentKind::P3 => {
                if self.profiles.is_empty() {
                    failures.push(format!(
                        "{} requires at least one requirement profile",
                        self.experiment
                    ));
                }
            }
            ExperimentKind::P2 => match &self.scan {
                None => failures.push("P2 requires a [scan] section".into()),
                Some(scan) => {
                    if scan.steps < 2 {
                        failures.push("scan.steps must be >= 2".into());
                    }
                    if scan.start > scan.stop {
                        failures.push("scan.start must be <= scan.stop".into());
                    }
                    if !self.profiles.iter().any(|p| p.name == scan.profile) {
                        failures.push(format!(
                            "scan.profile '{}' not found among profiles",
                            scan.profile
                        ));
                    }
                }
            },
            ExperimentKind::Loop => {
                match &self.users {
                    None => failures.push("Loop requires [[users]]".into()),
                    Some(users) if users.is_empty() => {
                        failures.push("Loop requires at least one user".into())
                    }
                    Some(users) => {
                        for u in users {
                            if let Err(e) = u.to_model() {
                                failures.push(e.to_string());
                            }
                        }
                    }
                }
                if self.loop_section.is_none() {
                    failures.push("Loop requires a [loop] section".into());
                }
            }
            ExperimentKind::GapOnly => {}
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(CdmbdError::InvalidConfig(failures.join("; ")))
        }
    }
}

/// Flat per-chain summary stored in results files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub seed: u64,
    pub b_size: usize,
    pub rho_star: f64,
    pub lambda_star: Vec<f64>,
    pub lambda_l1: f64,
    pub violations: Vec<f64>,
    pub saturated: Vec<bool>,
    pub converged: Vec<bool>,
    pub elbo_proxy: f64,
    pub degenerate: bool,
    pub mb_zeros_ok: bool,
    pub rho_in_bounds: bool,
    pub objective_monotone: bool,
    pub signature_hash: String,
}

impl ChainSummary {
    fn from_chain(chain: &ChainResult) -> Self {
        Self {
            seed: chain.seed,
            b_size: chain.partition.blanket_size(),
            rho_star: chain.rho_star,
            lambda_star: chain.multipliers.lambda_star.clone(),
            lambda_l1: chain.multipliers.l1(),
            violations: chain.multipliers.violations.clone(),
            saturated: chain.multipliers.saturated.clone(),
            converged: chain.multipliers.converged.clone(),
            elbo_proxy: chain.elbo_proxy,
            degenerate: chain.degenerate,
            mb_zeros_ok: chain.mb_zeros_ok,
            rho_in_bounds: chain.rho_in_bounds,
            objective_monotone: chain.objective_monotone,
            signature_hash: format!("{:016x}", chain.signature.hash()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub delta: f64,
    pub candidate_set_size: usize,
    pub best_labels: Vec<Role>,
    pub runner_up_labels: Vec<Role>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOutcome {
    pub profile: String,
    pub requirement_names: Vec<String>,
    pub modal_b: usize,
    pub rho_mean: f64,
    pub rho_std: f64,
    pub best_seed: u64,
    pub best_labels: Vec<Role>,
    pub best_lambda_star: Vec<f64>,
    pub best_lambda_l1: f64,
    pub chains: Vec<ChainSummary>,
    /// All chains reached the same blanket size.
    pub deterministic_b: bool,
}

impl ProfileOutcome {
    fn from_multi(profile: &RequirementProfile, multi: &MultiChainResult) -> Self {
        let rhos: Vec<f64> = multi.all.iter().map(|c| c.rho_star).collect();
        let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
        let var = rhos.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rhos.len() as f64;
        let sizes: Vec<usize> = multi.all.iter().map(|c| c.partition.blanket_size()).collect();
        Self {
            profile: profile.name.clone(),
            requirement_names: profile.requirements.iter().map(|r| r.name.clone()).collect(),
            modal_b: multi.modal_b,
            rho_mean: mean,
            rho_std: var.sqrt(),
            best_seed: multi.best.seed,
            best_labels: multi.best.partition.labels().to_vec(),
            best_lambda_star: multi.best.multipliers.lambda_star.clone(),
            best_lambda_l1: multi.best.multipliers.l1(),
            chains: multi.all.iter().map(ChainSummary::from_chain).collect(),
            deterministic_b: sizes.windows(2).all(|w| w[0] == w[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPointSummary {
    pub tau: f64,
    pub modal_b: usize,
    pub best_b: usize,
    pub lambda_l1: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub channel: usize,
    pub jump_threshold: usize,
    pub points: Vec<ScanPointSummary>,
    pub boundary_index: Option<usize>,
    pub boundary_tau: Option<f64>,
    pub advantage_flip_index: Option<usize>,
}

impl ScanSummary {
    fn from_report(channel: usize, report: &TransitionReport) -> Self {
        Self {
            channel,
            jump_threshold: report.jump_threshold,
            points: report
                .points
                .iter()
                .map(|p| ScanPointSummary {
                    tau: p.tau,
                    modal_b: p.modal_b,
                    best_b: p.best_b,
                    lambda_l1: p.lambda_l1,
                    advantage: p.advantage,
                })
                .collect(),
            boundary_index: report.boundary_index,
            boundary_tau: report.boundary_tau,
            advantage_flip_index: report.advantage_flip_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopUserSummary {
    pub name: String,
    pub mu: [f64; CONTACT_DIM],
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopIterationSummary {
    pub iteration: usize,
    pub users: Vec<LoopUserSummary>,
    pub gaps: Vec<Vec<f64>>,
    pub optimal: Vec<StyleName>,
    pub min_gaps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSummary {
    pub styles: Vec<StyleName>,
    pub user_names: Vec<String>,
    pub iterations: Vec<LoopIterationSummary>,
}

impl LoopSummary {
    fn from_states(states: &[LoopState]) -> Self {
        let styles = states
            .first()
            .map(|s| s.styles.clone())
            .unwrap_or_default();
        let user_names = states
            .first()
            .map(|s| s.users.iter().map(|u| u.name.clone()).collect())
            .unwrap_or_default();
        let iterations = states
            .iter()
            .map(|s| LoopIterationSummary {
                iteration: s.iteration,
                users: s
                    .users
                    .iter()
                    .map(|u| LoopUserSummary {
                        name: u.name.clone(),
                        mu: u.mu,
                        sigma: u.sigma,
                    })
                    .collect(),
                gaps: s.gaps.clone(),
                optimal: s.optimal.clone(),
                min_gaps: (0..s.users.len()).map(|u| s.min_gap(u)).collect(),
            })
            .collect();
        Self {
            styles,
            user_names,
            iterations,
        }
    }
}

/// Everything a run writes into `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDoc {
    pub experiment: ExperimentKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profiles: Option<Vec<ProfileOutcome>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loop_summary: Option<LoopSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<GapSummary>,
}

/// Paths produced by a run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub results: PathBuf,
    pub traces: PathBuf,
    pub metadata: PathBuf,
    pub plot_files: Vec<PathBuf>,
}

fn gap_summary(gap: &crate::engine::GapScore) -> GapSummary {
    GapSummary {
        delta: gap.delta,
        candidate_set_size: gap.candidate_set_size,
        best_labels: gap.best_partition.labels().to_vec(),
        runner_up_labels: gap.runner_up.labels().to_vec(),
    }
}

struct TraceSink {
    rows: Vec<String>,
}

impl TraceSink {
    fn new() -> Self {
        Self {
            rows: vec!["profile,seed,iter,b_size,rho,lambda_l1,total_violation,elbo_proxy".into()],
        }
    }

    fn add_multi(&mut self, profile: &str, multi: &MultiChainResult) {
        for chain in &multi.all {
            for row in &chain.trace {
                self.rows.push(format!(
                    "{},{},{},{},{},{},{},{}",
                    profile,
                    chain.seed,
                    row.iter,
                    row.b_size,
                    row.rho,
                    row.lambda_l1,
                    row.total_violation,
                    row.elbo_proxy
                ));
            }
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.rows.join("\n") + "\n")?;
        Ok(())
    }
}

fn simulate(cfg: &ExperimentConfig) -> Result<(ObservationTensor, Option<Partition>)> {
    if cfg.sim.flat_data {
        Ok((generate_flat_data(&cfg.sim)?, None))
    } else {
        let data = generate_cup_data(&cfg.sim)?;
        Ok((data.tensor, Some(data.ground_truth)))
    }
}

/// Run an experiment config end to end and write `results.json`,
/// `traces.csv`, `metadata.json` and the plot-data files into the output
/// directory. Deterministic given the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    fs::create_dir_all(&cfg.output_dir)?;
    let chain_cfg = cfg.chain.to_engine()?;
    let seeds = &cfg.chain.seeds;
    let mut traces = TraceSink::new();

    let results = match cfg.experiment {
        ExperimentKind::P1 => {
            let (tensor, truth) = simulate(cfg)?;
            let mut outcomes = Vec::new();
            for profile in &cfg.profiles {
                let multi = run_multichain(&tensor, profile, &chain_cfg, seeds)?;
                traces.add_multi(&profile.name, &multi);
                outcomes.push(ProfileOutcome::from_multi(profile, &multi));
            }
            let gap = gap_diagnostic(&tensor, &chain_cfg, seeds, truth.as_ref())?;
            ResultsDoc {
                experiment: cfg.experiment,
                profiles: Some(outcomes),
                scan: None,
                loop_summary: None,
                gap: Some(gap_summary(&gap)),
            }
        }
        ExperimentKind::P2 => {
            let (tensor, truth) = simulate(cfg)?;
            let scan = cfg.scan.as_ref().expect("validated");
            let template = cfg
                .profiles
                .iter()
                .find(|p| p.name == scan.profile)
                .expect("validated");
            let report = scan_family_transition(
                &tensor,
                template,
                scan.channel,
                &scan.grid(),
                &chain_cfg,
                seeds,
                scan.jump_threshold,
            )?;
            let gap = gap_diagnostic(&tensor, &chain_cfg, seeds, truth.as_ref())?;
            ResultsDoc {
                experiment: cfg.experiment,
                profiles: None,
                scan: Some(ScanSummary::from_report(scan.channel, &report)),
                loop_summary: None,
                gap: Some(gap_summary(&gap)),
            }
        }
        ExperimentKind::P3 => {
            let (tensor, truth) = simulate(cfg)?;
            let mut outcomes = Vec::new();
            for profile in &cfg.profiles {
                let multi = run_multichain(&tensor, profile, &chain_cfg, seeds)?;
                traces.add_multi(&profile.name, &multi);
                outcomes.push(ProfileOutcome::from_multi(profile, &multi));
            }
            let gap = gap_diagnostic(&tensor, &chain_cfg, seeds, truth.as_ref())?;
            ResultsDoc {
                experiment: cfg.experiment,
                profiles: Some(outcomes),
                scan: None,
                loop_summary: None,
                gap: Some(gap_summary(&gap)),
            }
        }
        ExperimentKind::Loop => {
            let loop_section = cfg.loop_section.as_ref().expect("validated");
            let users: Vec<UserModel> = cfg
                .users
                .as_ref()
                .expect("validated")
                .iter()
                .map(|u| u.to_model())
                .collect::<Result<_>>()?;
            let mut tensors = Vec::new();
            for (i, style) in loop_section.styles.iter().enumerate() {
                let mut sim = cfg.sim.clone();
                sim.style = *style;
                sim.wall = loop_section.wall;
                sim.flat_data = false;
                sim.seed = cfg.sim.seed.wrapping_add(i as u64);
                let data = generate_cup_data(&sim)?;
                tensors.push((*style, data.tensor));
            }
            let states = run_design_loop(
                &tensors,
                &users,
                &loop_section.to_engine(),
                &chain_cfg,
                seeds,
            )?;
            ResultsDoc {
                experiment: cfg.experiment,
                profiles: None,
                scan: None,
                loop_summary: Some(LoopSummary::from_states(&states)),
                gap: None,
            }
        }
        ExperimentKind::GapOnly => {
            let (tensor, truth) = simulate(cfg)?;
            let gap = gap_diagnostic(&tensor, &chain_cfg, seeds, truth.as_ref())?;
            ResultsDoc {
                experiment: cfg.experiment,
                profiles: None,
                scan: None,
                loop_summary: None,
                gap: Some(gap_summary(&gap)),
            }
        }
    };

    let results_path = cfg.output_dir.join("results.json");
    let json = serde_json::to_string_pretty(&results)
        .map_err(|e| CdmbdError::Numerical(format!("results serialize: {e}")))?;
    fs::write(&results_path, json + "\n")?;

    let traces_path = cfg.output_dir.join("traces.csv");
    traces.write(&traces_path)?;

    let plot_files = emit_plot_data(&results, &cfg.output_dir)?;

    // Timestamps live outside results.json so reruns stay byte-identical.
    let metadata_path = cfg.output_dir.join("metadata.json");
    let metadata = serde_json::json!({
        "experiment": results.experiment.to_string(),
        "version": env!("CARGO_PKG_VERSION"),
        "runtime_ms": started.elapsed().as_millis() as u64,
        "written_unix_ms": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
    });
    fs::write(&metadata_path, metadata.to_string() + "\n")?;

    Ok(RunArtifacts {
        results: results_path,
        traces: traces_path,
        metadata: metadata_path,
        plot_files,
    })
}

fn write_lines(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Emit per-figure plot data for a results document. Files are header-valid
/// even when the relevant section is empty.
pub fn emit_plot_data(results: &ResultsDoc, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    match results.experiment {
        ExperimentKind::P1 | ExperimentKind::P3 => {
            let prefix = if results.experiment == ExperimentKind::P1 {
                "p1"
            } else {
                "p3"
            };
            let empty = Vec::new();
            let profiles = results.profiles.as_ref().unwrap_or(&empty);
            let mut rho_rows = Vec::new();
            let mut b_rows = Vec::new();
            let mut lambda_rows = Vec::new();
            let mut label_rows = Vec::new();
            for p in profiles {
                for c in &p.chains {
                    rho_rows.push(format!("{},{},{}", p.profile, c.seed, c.rho_star));
                    b_rows.push(format!("{},{},{}", p.profile, c.seed, c.b_size));
                }
                for (name, lam) in p.requirement_names.iter().zip(p.best_lambda_star.iter()) {
                    lambda_rows.push(format!("{},{},{}", p.profile, name, lam));
                }
                for (node, role) in p.best_labels.iter().enumerate() {
                    label_rows.push(format!("{},{},{}", p.profile, node, role.label()));
                }
            }
            let files = [
                (format!("{prefix}_rho.csv"), "profile,seed,rho_star", rho_rows),
                (format!("{prefix}_b_size.csv"), "profile,seed,b_size", b_rows),
                (
                    format!("{prefix}_lambda_fingerprint.csv"),
                    "profile,requirement,lambda_star",
                    lambda_rows,
                ),
                (
                    format!("{prefix}_partition.csv"),
                    "profile,node,label",
                    label_rows,
                ),
            ];
            for (name, header, rows) in files {
                let path = out_dir.join(name);
                write_lines(&path, header, &rows)?;
                written.push(path);
            }
        }
        ExperimentKind::P2 => {
            let mut scan_rows = Vec::new();
            let mut adv_rows = Vec::new();
            if let Some(scan) = &results.scan {
                for p in &scan.points {
                    scan_rows.push(format!("{},{}", p.tau, p.modal_b));
                    adv_rows.push(format!("{},{},{}", p.tau, p.advantage, p.lambda_l1));
                }
            }
            let path = out_dir.join("p2_scan.csv");
            write_lines(&path, "tau1,modal_b", &scan_rows)?;
            written.push(path);
            let path = out_dir.join("p2_advantage.csv");
            write_lines(&path, "tau1,advantage,lambda_l1", &adv_rows)?;
            written.push(path);
        }
        ExperimentKind::Loop => {
            let mut min_rows = Vec::new();
            let mut gap_rows = Vec::new();
            if let Some(summary) = &results.loop_summary {
                for it in &summary.iterations {
                    for (u, name) in summary.user_names.iter().enumerate() {
                        min_rows.push(format!(
                            "{},{},{},{}",
                            it.iteration,
                            name,
                            it.min_gaps[u],
                            it.optimal[u].label()
                        ));
                        for (s, style) in summary.styles.iter().enumerate() {
                            gap_rows.push(format!(
                                "{},{},{},{}",
                                it.iteration,
                                name,
                                style.label(),
                                it.gaps[u][s]
                            ));
                        }
                    }
                }
            }
            let path = out_dir.join("loop_min_gap.csv");
            write_lines(&path, "iteration,user,min_gap,optimal_style", &min_rows)?;
            written.push(path);
            let path = out_dir.join("loop_gaps.csv");
            write_lines(&path, "iteration,user,style,gap", &gap_rows)?;
            written.push(path);
        }
        ExperimentKind::GapOnly => {}
    }
    if let Some(gap) = &results.gap {
        let path = out_dir.join("gap.csv");
        write_lines(
            &path,
            "delta,candidate_set_size",
            &[format!("{},{}", gap.delta, gap.candidate_set_size)],
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Reload a results document, e.g. for the `plots` subcommand.
pub fn load_results(dir: &Path) -> Result<ResultsDoc> {
    let text = fs::read_to_string(dir.join("results.json"))?;
    serde_json::from_str(&text)
        .map_err(|e| CdmbdError::InvalidConfig(format!("results parse: {e}")))
}
