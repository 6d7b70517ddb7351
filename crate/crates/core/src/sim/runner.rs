//! The round loop: truth, sensors, filters and error recording.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::algebra::{DualVelocity, Mat3, Quaternion, UnitDualQuaternion, UnitQuaternion, Vec3, Vec6};
use crate::consensus::{
    hard_aggregate_update, hard_prepare, soft_consensus_step, ConsensusSnapshot, ConsensusWeights, HardPacket,
};
use crate::ddq::{
    assemble_measurement, measurement_update, stack_velocity, synthesize_absolute_pose, time_update, LocalFilterState,
    MeasurementSet, RelativeMeasurement, StackedVelocity,
};
use crate::error::{Error, Result};
use crate::graph::{FleetGraph, LeaderSet, NodeId, RoundBus};
use crate::mekf::{SensorScenario, SingleFilter, SingleFilterState, SingleNoise, VelocityInput};
use crate::rigid_body::{integrate_step, DualForce, RigidBodyParams, RigidBodyState};

use super::lattice::{fibonacci_lattice, plane_grid};
use super::lqr::{lqr_track, pointing_attitude, LqrGains};
use super::metrics::{rms, ErrorSample, FleetSummary};
use super::noise::{gaussian6, noisy_absolute, noisy_relative, perturbed_estimate, NoiseModel};
use super::{ConsensusMode, Experiment, ScenarioConfig, ScenarioKind};

const STREAM_SETUP: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_SENSORS: u64 = 2;
const STREAM_DRIFT: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Range of rounds a summary metric is computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Full,
    First(usize),
    Last(usize),
}

impl Window {
    pub fn name(&self) -> &'static str {
        match self {
            Window::Full => "full",
            Window::First(_) => "first",
            Window::Last(_) => "last",
        }
    }

    pub fn slice<'a, T>(&self, data: &'a [T]) -> &'a [T] {
        match *self {
            Window::Full => data,
            Window::First(n) => &data[..n.min(data.len())],
            Window::Last(n) => &data[data.len().saturating_sub(n)..],
        }
    }
}

enum Filters {
    Independent { filter: Box<SingleFilter>, states: Vec<SingleFilterState> },
    Distributed(Vec<LocalFilterState>),
}

/// The estimators of a whole fleet in one consensus mode.
pub struct Fleet {
    graph: FleetGraph,
    leaders: LeaderSet,
    mode: ConsensusMode,
    stubborn: bool,
    velocity_sensing: bool,
    noise: NoiseModel,
    dt: f64,
    filters: Filters,
    clamped: usize,
}

impl Fleet {
    /// `initial[i - 1]` holds node `i`'s starting estimates of its whole
    /// neighbourhood, in ascending node order. Independent filters use only
    /// the own entry.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        graph: FleetGraph,
        leaders: LeaderSet,
        mode: ConsensusMode,
        stubborn: bool,
        velocity_sensing: bool,
        noise: NoiseModel,
        dt: f64,
        initial: &[Vec<(UnitDualQuaternion, Vec6)>],
    ) -> Result<Self> {
        if initial.len() != graph.n_nodes() {
            return Err(Error::Dimension { expected: graph.n_nodes(), got: initial.len() });
        }
        let filters = match mode {
            ConsensusMode::None => {
                let scenario =
                    if velocity_sensing { SensorScenario::PoseAndVelocity } else { SensorScenario::PoseOnly };
                let filter = SingleFilter::new(scenario, SingleNoise::new(noise.q_velocity, noise.q_bias, noise.r))?;
                let mut states = Vec::with_capacity(graph.n_nodes());
                for i in graph.nodes() {
                    let layout = graph.neighbourhood(i)?;
                    let own = initial[i - 1]
                        .get(layout.own_slot())
                        .ok_or(Error::Dimension { expected: layout.len(), got: initial[i - 1].len() })?;
                    let p0 = noise.p0.view((0, 0), (12, 12)).into_owned();
                    states.push(filter.initial_state(own.0, own.1, p0)?);
                }
                Filters::Independent { filter: Box::new(filter), states }
            }
            ConsensusMode::Soft | ConsensusMode::HardSoft => {
                let mut states = Vec::with_capacity(graph.n_nodes());
                for i in graph.nodes() {
                    let layout = graph.neighbourhood(i)?;
                    let init = &initial[i - 1];
                    if init.len() != layout.len() {
                        return Err(Error::Dimension { expected: layout.len(), got: init.len() });
                    }
                    let blocks = vec![noise.p0.clone(); layout.len()];
                    let p = crate::linalg::block_diag(&blocks);
                    let poses = init.iter().map(|e| e.0).collect();
                    let biases = init.iter().map(|e| e.1).collect();
                    states.push(LocalFilterState::new(layout, poses, biases, p)?);
                }
                Filters::Distributed(states)
            }
        };
        Ok(Fleet { graph, leaders, mode, stubborn, velocity_sensing, noise, dt, filters, clamped: 0 })
    }

    pub fn graph(&self) -> &FleetGraph {
        &self.graph
    }

    pub fn mode(&self) -> ConsensusMode {
        self.mode
    }

    /// Attitude weight reductions made by soft consensus so far.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn distributed_states(&self) -> Option<&[LocalFilterState]> {
        match &self.filters {
            Filters::Distributed(s) => Some(s),
            Filters::Independent { .. } => None,
        }
    }

    pub fn independent_states(&self) -> Option<&[SingleFilterState]> {
        match &self.filters {
            Filters::Independent { states, .. } => Some(states),
            Filters::Distributed(_) => None,
        }
    }

    /// Covariance of node `i`'s filter.
    pub fn covariance(&self, i: NodeId) -> &nalgebra::DMatrix<f64> {
        match &self.filters {
            Filters::Independent { states, .. } => &states[i - 1].covariance,
            Filters::Distributed(s) => &s[i - 1].covariance,
        }
    }

    /// Node `i`'s own pose and velocity estimate, given its latest velocity
    /// measurement.
    pub fn estimate(&self, i: NodeId, velocity: &Vec6) -> Result<(UnitDualQuaternion, DualVelocity)> {
        match &self.filters {
            Filters::Independent { filter, states } => {
                let s = &states[i - 1];
                Ok((s.pose, filter.estimated_velocity(s, &self.velocity_input(velocity))?))
            }
            Filters::Distributed(states) => {
                let s = &states[i - 1];
                let b = DualVelocity::from_vec6(s.own_bias());
                let w = if self.velocity_sensing {
                    DualVelocity::from_vec6(velocity) - b
                } else {
                    DualVelocity::zero() - b
                };
                Ok((*s.own_pose(), w))
            }
        }
    }

    fn velocity_input(&self, velocity: &Vec6) -> VelocityInput {
        if self.velocity_sensing {
            VelocityInput::DualVelocity(DualVelocity::from_vec6(velocity))
        } else {
            VelocityInput::None
        }
    }

    /// Propagate every filter over one step with the velocity measurements
    /// taken at the start of the step.
    pub fn time_update(&mut self, velocity: &[Vec6]) -> Result<()> {
        if velocity.len() != self.graph.n_nodes() {
            return Err(Error::Dimension { expected: self.graph.n_nodes(), got: velocity.len() });
        }
        let process = self.noise.process();
        let inputs: Vec<VelocityInput> = velocity.iter().map(|v| self.velocity_input(v)).collect();
        match &mut self.filters {
            Filters::Independent { filter, states } => {
                for (s, input) in states.iter_mut().zip(&inputs) {
                    *s = filter.time_update(s, input, self.dt)?;
                }
            }
            Filters::Distributed(states) => {
                let stacked: Vec<StackedVelocity> = if self.velocity_sensing {
                    let mut bus = RoundBus::new(&self.graph);
                    for i in self.graph.nodes() {
                        for k in self.graph.neighbours(i)? {
                            bus.send(i, k, velocity[i - 1])?;
                        }
                    }
                    let inbox = bus.deliver()?;
                    states
                        .iter()
                        .map(|s| stack_velocity(s.layout(), velocity[s.owner() - 1], &inbox[&s.owner()]))
                        .collect::<Result<_>>()?
                } else {
                    vec![StackedVelocity::PoseOnly; states.len()]
                };
                for (s, v) in states.iter_mut().zip(&stacked) {
                    *s = time_update(s, v, &process, self.dt)?;
                }
            }
        }
        Ok(())
    }

    /// Fuse one round of measurements. `meas[i - 1]` holds node `i`'s
    /// readings; followers' absolute entries are ignored and replaced by a
    /// pose synthesised from their neighbours.
    pub fn measurement_update(&mut self, meas: &[MeasurementSet]) -> Result<()> {
        let n = self.graph.n_nodes();
        if meas.len() != n {
            return Err(Error::Dimension { expected: n, got: meas.len() });
        }
        let noise = self.noise.measurement();
        match &mut self.filters {
            Filters::Independent { filter, states } => {
                for (i, s) in states.iter_mut().enumerate() {
                    if let (true, Some(m)) = (self.leaders.is_leader(i + 1), &meas[i].absolute) {
                        *s = filter.measurement_update(s, m)?;
                    }
                }
                Ok(())
            }
            Filters::Distributed(states) => {
                let mut local = Vec::with_capacity(n);
                for (s, m) in states.iter().zip(meas) {
                    let mut m = m.clone();
                    if !self.leaders.is_leader(s.owner()) {
                        m.absolute = Some(synthesize_absolute_pose(s, &m)?);
                    }
                    local.push(m);
                }
                let updated: Vec<LocalFilterState> = match self.mode {
                    ConsensusMode::HardSoft => {
                        hard_round(&self.graph, &self.leaders, self.stubborn, states, &local, &noise)?
                    }
                    _ => states
                        .iter()
                        .zip(&local)
                        .map(|(s, m)| {
                            let info = assemble_measurement(s, m, &noise)?.info_quantities()?;
                            measurement_update(s, &info.u, &info.u_reduced)
                        })
                        .collect::<Result<_>>()?,
                };
                let (next, clamped) = soft_round(&self.graph, &self.leaders, self.stubborn, &updated)?;
                *states = next;
                self.clamped += clamped;
                Ok(())
            }
        }
    }
}

fn hard_round(
    graph: &FleetGraph,
    leaders: &LeaderSet,
    stubborn: bool,
    states: &[LocalFilterState],
    meas: &[MeasurementSet],
    noise: &crate::ddq::MeasurementNoise,
) -> Result<Vec<LocalFilterState>> {
    let mut view_bus = RoundBus::new(graph);
    for s in states {
        for k in s.layout().neighbours() {
            view_bus.send(s.owner(), k, s.view())?;
        }
    }
    let views = view_bus.deliver()?;
    let mut packet_bus = RoundBus::new(graph);
    let mut own: BTreeMap<NodeId, HardPacket> = BTreeMap::new();
    for s in states {
        let i = s.owner();
        own.insert(i, hard_prepare(s.layout(), &meas[i - 1], noise, &s.view())?);
        for (&k, view) in &views[&i] {
            packet_bus.send(i, k, hard_prepare(s.layout(), &meas[i - 1], noise, view)?)?;
        }
    }
    let mut packets = packet_bus.deliver()?;
    states
        .iter()
        .map(|s| {
            let i = s.owner();
            let mut inbox = packets.remove(&i).unwrap_or_default();
            inbox.insert(i, own.remove(&i).expect("own packet prepared"));
            hard_aggregate_update(s, &inbox, stubborn && leaders.is_leader(i))
        })
        .collect()
}

fn soft_round(
    graph: &FleetGraph,
    leaders: &LeaderSet,
    stubborn: bool,
    states: &[LocalFilterState],
) -> Result<(Vec<LocalFilterState>, usize)> {
    let mut bus = RoundBus::new(graph);
    for s in states {
        for k in s.layout().neighbours() {
            bus.send(s.owner(), k, ConsensusSnapshot::new(s, &graph.neighbourhood(k)?))?;
        }
    }
    let inbox = bus.deliver()?;
    let mut clamped = 0;
    let mut next = Vec::with_capacity(states.len());
    for s in states {
        let w = if stubborn && leaders.is_leader(s.owner()) {
            ConsensusWeights::zero()
        } else {
            ConsensusWeights::uniform(s.layout())
        };
        let out = soft_consensus_step(s, &inbox[&s.owner()], &w)?;
        clamped += out.clamped;
        next.push(out.state);
    }
    Ok((next, clamped))
}

/// Errors of one consensus mode over a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeRun {
    pub mode: ConsensusMode,
    /// Name used in the output files.
    pub label: String,
    /// `samples[i - 1][k]`: node `i` after round `k + 1`.
    pub samples: Vec<Vec<ErrorSample>>,
    /// Reason the filters stopped early, if they did.
    pub diverged: Option<String>,
    pub clamped: usize,
}

impl ModeRun {
    pub fn rounds(&self) -> usize {
        self.samples.iter().map(Vec::len).min().unwrap_or(0)
    }

    pub fn per_sat_rms(&self, window: Window) -> Vec<ErrorSample> {
        self.samples.iter().map(|s| rms(window.slice(s))).collect()
    }

    pub fn summary(&self, window: Window) -> FleetSummary {
        FleetSummary::of(&self.per_sat_rms(window))
    }

    /// RMS over every node and round in the window.
    pub fn fleet_rms(&self, window: Window) -> ErrorSample {
        let all: Vec<ErrorSample> = self.samples.iter().flat_map(|s| window.slice(s).iter().copied()).collect();
        rms(&all)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub graph: FleetGraph,
    pub leaders: Vec<NodeId>,
    pub modes: Vec<ModeRun>,
}

impl RunResult {
    pub fn mode(&self, mode: ConsensusMode) -> Option<&ModeRun> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn diverged(&self) -> usize {
        self.modes.iter().filter(|m| m.diverged.is_some()).count()
    }
}

struct World {
    graph: FleetGraph,
    leaders: LeaderSet,
    params: RigidBodyParams,
    truth: Vec<RigidBodyState>,
    bias: Vec<Vec6>,
    targets: Vec<Vec3>,
    gains: Option<LqrGains>,
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

fn build_world(cfg: &ScenarioConfig, seed: u64) -> Result<World> {
    let mut rng = stream(seed, STREAM_SETUP);
    let graph = match &cfg.graph {
        Some(g) => g.clone(),
        None if cfg.n_sats == 1 => FleetGraph::new(1, &[])?,
        None => FleetGraph::random_connected(cfg.n_sats, cfg.edge_probability, &mut rng)?,
    };
    let leaders = if cfg.leader_fraction >= 1.0 {
        LeaderSet::all(&graph)
    } else {
        LeaderSet::random(&graph, cfg.leader_fraction, &mut rng)?
    };
    let params = RigidBodyParams::new(cfg.mass, Mat3::from_diagonal(&cfg.inertia))?;
    let n = cfg.n_sats;
    let (truth, targets, gains): (Vec<RigidBodyState>, _, _) = if cfg.kind == ScenarioKind::Asteroid {
        let starts = plane_grid(n, cfg.start_distance, cfg.grid_spacing);
        let truth = starts
            .iter()
            .map(|r| {
                RigidBodyState::new(
                    UnitDualQuaternion::from_parts(&UnitQuaternion::identity(), r),
                    DualVelocity::zero(),
                )
            })
            .collect();
        let gains = LqrGains::design(&params, cfg.lqr_state_weight, cfg.lqr_input_weight)?;
        (truth, fibonacci_lattice(n, cfg.lattice_radius), Some(gains))
    } else {
        let truth = (0..n)
            .map(|_| {
                let q = Quaternion::from_vec4(&nalgebra::Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)));
                let q = UnitQuaternion::new_normalize(q).unwrap_or_else(|_| UnitQuaternion::identity());
                let r = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * cfg.position_spread;
                let axis = random_unit(&mut rng);
                let w = rng.random_range(0.01..0.05);
                let v = rng.random_range(0.01..0.1);
                RigidBodyState::new(UnitDualQuaternion::from_parts(&q, &r), DualVelocity::new(axis * w, axis * v))
            })
            .collect();
        (truth, Vec::new(), None)
    };
    let bias = if cfg.velocity_sensing { vec![Vec6::zeros(); n] } else { truth_velocity_bias(&truth) };
    Ok(World { graph, leaders, params, truth, bias, targets, gains })
}

/// Without velocity sensing the filter's bias is the negated velocity.
fn truth_velocity_bias(truth: &[RigidBodyState]) -> Vec<Vec6> {
    truth.iter().map(|s| -s.velocity.to_vec6()).collect()
}

fn measure_velocity<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    noise: &NoiseModel,
    world: &World,
    rng: &mut R,
) -> Vec<Vec6> {
    if !cfg.velocity_sensing {
        return vec![Vec6::zeros(); world.truth.len()];
    }
    world
        .truth
        .iter()
        .zip(&world.bias)
        .map(|(s, b)| {
            let clean = s.velocity.to_vec6() + b;
            if cfg.noiseless {
                clean
            } else {
                clean + gaussian6(&noise.q_velocity, rng)
            }
        })
        .collect()
}

fn measure_poses<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    noise: &NoiseModel,
    world: &World,
    rng: &mut R,
) -> Result<Vec<MeasurementSet>> {
    let mut out = Vec::with_capacity(world.truth.len());
    for i in world.graph.nodes() {
        let own = &world.truth[i - 1].pose;
        let absolute = if world.leaders.is_leader(i) {
            Some(if cfg.noiseless { *own } else { noisy_absolute(own, &noise.r, rng) })
        } else {
            None
        };
        let mut relative = BTreeMap::new();
        for k in world.graph.neighbours(i)? {
            let clean = RelativeMeasurement::between(own, &world.truth[k - 1].pose);
            relative.insert(k, if cfg.noiseless { clean } else { noisy_relative(&clean, &noise.r, rng) });
        }
        out.push(MeasurementSet { absolute, relative });
    }
    Ok(out)
}

/// Every tracker of a satellite starts from the same perturbed estimate.
fn initial_estimates<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    noise: &NoiseModel,
    world: &World,
    rng: &mut R,
) -> Result<Vec<Vec<(UnitDualQuaternion, Vec6)>>> {
    let shared: Vec<(UnitDualQuaternion, Vec6)> = world
        .truth
        .iter()
        .zip(&world.bias)
        .map(|(t, b)| if cfg.exact_init { (t.pose, *b) } else { perturbed_estimate(&t.pose, b, &noise.p0, rng) })
        .collect();
    let mut out = Vec::with_capacity(world.truth.len());
    for i in world.graph.nodes() {
        let layout = world.graph.neighbourhood(i)?;
        out.push(layout.members().iter().map(|&j| shared[j - 1]).collect());
    }
    Ok(out)
}

fn mode_label(mode: ConsensusMode, cfg: &ScenarioConfig) -> String {
    if cfg.stubborn && cfg.kind == ScenarioKind::Leaders && mode != ConsensusMode::None {
        "stubborn".to_string()
    } else {
        mode.name().to_string()
    }
}

fn simulate_mode(cfg: &ScenarioConfig, seed: u64, mode: ConsensusMode) -> Result<ModeRun> {
    let noise = NoiseModel { inflate_relative: cfg.inflate_relative, ..cfg.noise.model()? };
    let mut world = build_world(cfg, seed)?;
    let mut init_rng = stream(seed, STREAM_INIT);
    let mut sensor_rng = stream(seed, STREAM_SENSORS);
    let mut drift_rng = stream(seed, STREAM_DRIFT);
    let n = world.truth.len();
    let dt = cfg.dt();
    let initial = initial_estimates(cfg, &noise, &world, &mut init_rng)?;
    let mut run = ModeRun {
        mode,
        label: mode_label(mode, cfg),
        samples: vec![Vec::with_capacity(cfg.steps()); n],
        diverged: None,
        clamped: 0,
    };
    let mut fleet = Fleet::new(
        world.graph.clone(),
        world.leaders.clone(),
        mode,
        cfg.stubborn,
        cfg.velocity_sensing,
        noise.clone(),
        dt,
        &initial,
    )?;
    let drift = noise.q_bias * dt;
    let mut velocity = measure_velocity(cfg, &noise, &world, &mut sensor_rng);
    for _ in 0..cfg.steps() {
        let step = (|| -> Result<()> {
            let controls: Vec<DualForce> = match &world.gains {
                Some(gains) => (1..=n)
                    .map(|i| {
                        let (pose, w) = fleet.estimate(i, &velocity[i - 1])?;
                        let target_r = world.targets[i - 1];
                        let target = UnitDualQuaternion::from_parts(&pointing_attitude(&pose.position()), &target_r);
                        Ok(lqr_track(&pose, &w, &target, gains))
                    })
                    .collect::<Result<_>>()?,
                None => vec![DualForce::zero(); n],
            };
            for (s, u) in world.truth.iter_mut().zip(&controls) {
                *s = integrate_step(s, &world.params, u, dt);
            }
            if cfg.velocity_sensing {
                if !cfg.noiseless {
                    for b in world.bias.iter_mut() {
                        *b += gaussian6(&drift, &mut drift_rng);
                    }
                }
            } else {
                world.bias = truth_velocity_bias(&world.truth);
            }
            fleet.time_update(&velocity)?;
            let meas = measure_poses(cfg, &noise, &world, &mut sensor_rng)?;
            fleet.measurement_update(&meas)?;
            velocity = measure_velocity(cfg, &noise, &world, &mut sensor_rng);
            for i in 1..=n {
                let (pose, w) = fleet.estimate(i, &velocity[i - 1])?;
                let truth = &world.truth[i - 1];
                let e = ErrorSample::between(&pose, &w, &truth.pose, &truth.velocity);
                if e.values().iter().any(|x| !x.is_finite()) {
                    return Err(Error::Diverged(format!("non-finite error on node {i}")));
                }
                run.samples[i - 1].push(e);
            }
            Ok(())
        })();
        if let Err(e) = step {
            run.diverged = Some(e.to_string());
            break;
        }
    }
    run.clamped = fleet.clamped();
    Ok(run)
}

/// Simulate every configured mode for one seed. Filter divergence is
/// recorded in the result; invalid configurations are errors.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64, label: &str) -> Result<RunResult> {
    cfg.validate()?;
    let world = build_world(cfg, seed)?;
    let modes = cfg.modes.iter().map(|&m| simulate_mode(cfg, seed, m)).collect::<Result<_>>()?;
    Ok(RunResult {
        label: label.to_string(),
        seed,
        config: cfg.clone(),
        leaders: world.leaders.leaders().collect(),
        graph: world.graph,
        modes,
    })
}

/// Run every job of an experiment, in parallel over at most `threads`
/// workers; results keep the job order.
pub fn run_experiment(exp: &Experiment, threads: Option<usize>) -> Result<Vec<RunResult>> {
    exp.validate()?;
    let jobs = exp.jobs();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder.build().map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(|(label, cfg, seed)| run_scenario(cfg, *seed, label)).collect())
}
