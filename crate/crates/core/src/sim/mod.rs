//! Fleet simulation: truth model, sensors, the filters in each consensus
//! mode, and error metrics.

pub mod lattice;
pub mod lqr;
pub mod metrics;
pub mod noise;
pub mod output;
pub mod runner;

use std::fmt;
use std::str::FromStr;

use crate::algebra::{Mat3, Vec3};
use crate::error::{Error, Result};
use crate::graph::FleetGraph;

pub use metrics::{ErrorSample, FleetSummary, Quartiles};
pub use noise::NoiseModel;
pub use runner::{run_experiment, run_scenario, Fleet, ModeRun, RunResult, Window};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    /// Cooperative against independent filters over a range of noise levels.
    Sweep,
    /// Controlled approach to a formation around a central body.
    Asteroid,
    /// Only a subset of the fleet carries an absolute pose sensor.
    Leaders,
    /// A single satellite running the stand-alone filter.
    Single,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] =
        [ScenarioKind::Sweep, ScenarioKind::Asteroid, ScenarioKind::Leaders, ScenarioKind::Single];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Sweep => "sweep",
            ScenarioKind::Asteroid => "asteroid",
            ScenarioKind::Leaders => "leaders",
            ScenarioKind::Single => "single-demo",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s || (s == "single" && *k == ScenarioKind::Single))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConsensusMode {
    /// Every satellite runs its own filter and ignores the others.
    None,
    /// Distributed filter with estimate averaging after the update.
    Soft,
    /// Distributed filter with fused neighbour information and averaging.
    HardSoft,
}

impl ConsensusMode {
    pub const ALL: [ConsensusMode; 3] = [ConsensusMode::None, ConsensusMode::Soft, ConsensusMode::HardSoft];

    pub fn name(self) -> &'static str {
        match self {
            ConsensusMode::None => "none",
            ConsensusMode::Soft => "soft",
            ConsensusMode::HardSoft => "hardsoft",
        }
    }
}

impl fmt::Display for ConsensusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConsensusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConsensusMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown consensus mode `{s}`")))
    }
}

/// Sensor and filter noise, either derived from a signal-to-noise ratio or
/// given as variances.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSpec {
    Snr { snr: f64, position_scale: f64 },
    Variances { attitude: f64, position: f64, bias_attitude: f64, bias_position: f64 },
}

impl NoiseSpec {
    pub fn model(&self) -> Result<NoiseModel> {
        match *self {
            NoiseSpec::Snr { snr, position_scale } => NoiseModel::from_snr(snr, position_scale),
            NoiseSpec::Variances { attitude, position, bias_attitude, bias_position } => {
                NoiseModel::from_variances(attitude, position, bias_attitude, bias_position)
            }
        }
    }

    pub fn snr(&self) -> Option<f64> {
        match self {
            NoiseSpec::Snr { snr, .. } => Some(*snr),
            NoiseSpec::Variances { .. } => None,
        }
    }
}

/// One simulated scenario; together with a seed it determines every output.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub n_sats: usize,
    /// Simulated time, s.
    pub duration: f64,
    /// Filter and sensor rate, Hz.
    pub rate: f64,
    pub edge_probability: f64,
    /// Fixed topology; drawn at random per seed when absent.
    pub graph: Option<FleetGraph>,
    pub noise: NoiseSpec,
    pub modes: Vec<ConsensusMode>,
    pub leader_fraction: f64,
    pub stubborn: bool,
    /// Satellites measure their dual velocity; otherwise filters run pose-only.
    pub velocity_sensing: bool,
    /// Sensors and bias drift are noise free.
    pub noiseless: bool,
    /// Filters start at the true state.
    pub exact_init: bool,
    /// Relative rows carry extra noise for the terms the linear model drops.
    pub inflate_relative: bool,
    pub mass: f64,
    /// Principal moments of inertia, kg m^2.
    pub inertia: Vec3,
    /// Standard deviation of the initial inertial positions, m.
    pub position_spread: f64,
    pub lattice_radius: f64,
    pub start_distance: f64,
    pub grid_spacing: f64,
    pub lqr_state_weight: f64,
    pub lqr_input_weight: f64,
    /// Length of the first/last windows in the asteroid scenario, s.
    pub edge_window: f64,
    /// Number of final samples used for the steady-state metrics.
    pub steady_state_samples: usize,
}

impl ScenarioConfig {
    pub fn new(kind: ScenarioKind) -> Self {
        let base = ScenarioConfig {
            kind,
            n_sats: 10,
            duration: 60.0,
            rate: 20.0,
            edge_probability: 0.5,
            graph: None,
            noise: NoiseSpec::Snr { snr: 1000.0, position_scale: 10.0 },
            modes: ConsensusMode::ALL.to_vec(),
            leader_fraction: 1.0,
            stubborn: false,
            velocity_sensing: false,
            noiseless: false,
            exact_init: false,
            inflate_relative: true,
            mass: 100.0,
            inertia: Vec3::new(10.0, 10.0, 10.0),
            position_spread: 10.0,
            lattice_radius: 25.0,
            start_distance: 40.0,
            grid_spacing: 5.0,
            lqr_state_weight: 0.1,
            lqr_input_weight: 0.1,
            edge_window: 10.0,
            steady_state_samples: 600,
        };
        match kind {
            ScenarioKind::Sweep => base,
            ScenarioKind::Asteroid => ScenarioConfig {
                duration: 100.0,
                noise: NoiseSpec::Variances {
                    attitude: 2.79e-7,
                    position: 8.55e-4,
                    bias_attitude: 1e-6,
                    bias_position: 1e-4,
                },
                modes: vec![ConsensusMode::HardSoft],
                velocity_sensing: true,
                inertia: Vec3::new(10.0, 12.0, 14.0),
                ..base
            },
            ScenarioKind::Leaders => {
                ScenarioConfig { modes: vec![ConsensusMode::HardSoft], leader_fraction: 0.5, ..base }
            }
            ScenarioKind::Single => ScenarioConfig { n_sats: 1, modes: vec![ConsensusMode::None], ..base },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_sats == 0 {
            return bad("fleet needs at least one satellite".into());
        }
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return bad(format!("rate must be positive, got {}", self.rate));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if self.steps() == 0 {
            return bad("duration is shorter than one time step".into());
        }
        if !(0.0..=1.0).contains(&self.edge_probability) {
            return bad(format!("edge probability must be in [0, 1], got {}", self.edge_probability));
        }
        if !(self.leader_fraction > 0.0 && self.leader_fraction <= 1.0) {
            return bad(format!("leader fraction must be in (0, 1], got {}", self.leader_fraction));
        }
        if self.modes.is_empty() {
            return bad("at least one consensus mode is required".into());
        }
        if let Some(g) = &self.graph {
            if g.n_nodes() != self.n_sats {
                return bad(format!("graph has {} nodes but the fleet has {}", g.n_nodes(), self.n_sats));
            }
        }
        if self.edge_window <= 0.0 || self.steady_state_samples == 0 {
            return bad("metric windows must be non-empty".into());
        }
        for (v, what) in [
            (self.position_spread, "position spread"),
            (self.lattice_radius, "lattice radius"),
            (self.grid_spacing, "grid spacing"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{what} must be non-negative, got {v}"));
            }
        }
        for (v, what) in [(self.lqr_state_weight, "LQR state weight"), (self.lqr_input_weight, "LQR input weight")] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{what} must be positive, got {v}"));
            }
        }
        crate::rigid_body::RigidBodyParams::new(self.mass, Mat3::from_diagonal(&self.inertia))?;
        self.noise.model()?;
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate
    }

    pub fn steps(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }

    /// Windows over which summary metrics are reported.
    pub fn windows(&self) -> Vec<Window> {
        let steps = self.steps();
        match self.kind {
            ScenarioKind::Sweep => vec![Window::Full],
            ScenarioKind::Asteroid => {
                let w = ((self.edge_window * self.rate).round() as usize).clamp(1, steps);
                vec![Window::First(w), Window::Last(w)]
            }
            ScenarioKind::Leaders | ScenarioKind::Single => vec![Window::Last(self.steady_state_samples.min(steps))],
        }
    }
}

/// A batch of scenarios: the base config crossed with noise levels, leader
/// fractions, stubbornness flags and seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub base: ScenarioConfig,
    pub snrs: Vec<f64>,
    pub leader_fractions: Vec<f64>,
    pub stubborn: Vec<bool>,
    pub seeds: Vec<u64>,
}

impl Experiment {
    pub fn new(base: ScenarioConfig) -> Self {
        let snrs = base.noise.snr().into_iter().collect();
        let leader_fractions = vec![base.leader_fraction];
        let stubborn = vec![base.stubborn];
        Experiment { base, snrs, leader_fractions, stubborn, seeds: vec![1] }
    }

    /// Every (label, config, seed) job in a fixed order.
    pub fn jobs(&self) -> Vec<(String, ScenarioConfig, u64)> {
        let snrs: Vec<Option<f64>> =
            if self.snrs.is_empty() { vec![None] } else { self.snrs.iter().copied().map(Some).collect() };
        let mut out = Vec::new();
        for snr in &snrs {
            for &fraction in &self.leader_fractions {
                for &stubborn in &self.stubborn {
                    for &seed in &self.seeds {
                        let mut cfg = self.base.clone();
                        let mut label = String::new();
                        if let (Some(s), NoiseSpec::Snr { position_scale, .. }) = (snr, self.base.noise) {
                            cfg.noise = NoiseSpec::Snr { snr: *s, position_scale };
                            label.push_str(&format!("snr{s}_"));
                        }
                        cfg.leader_fraction = fraction;
                        cfg.stubborn = stubborn;
                        if self.base.kind == ScenarioKind::Leaders {
                            let tag = if stubborn { "stubborn" } else { "free" };
                            label.push_str(&format!("leaders{fraction}_{tag}_"));
                        }
                        label.push_str(&format!("seed{seed}"));
                        out.push((label, cfg, seed));
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        if self.leader_fractions.is_empty() || self.stubborn.is_empty() {
            return Err(Error::InvalidArgument("leader settings must not be empty".into()));
        }
        for (_, cfg, _) in self.jobs() {
            cfg.validate()?;
        }
        Ok(())
    }
}
