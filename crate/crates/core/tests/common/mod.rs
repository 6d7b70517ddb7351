#![allow(dead_code)]

use std::collections::BTreeMap;

use dqfleet::algebra::{
    DualQuaternion, DualVelocity, Mat6, Quaternion, UnitDualQuaternion, UnitQuaternion, Vec3, Vec6,
};
use dqfleet::consensus::{
    hard_aggregate_update, hard_prepare, soft_consensus_step, ConsensusSnapshot, ConsensusWeights, HardPacket,
};
use dqfleet::ddq::{
    self, assemble_measurement, assemble_measurement_for, relative_pose_jacobians, relative_residual, LocalFilterState,
    MeasurementNoise, MeasurementSet, PredictedView, ProcessNoise, RelativeMeasurement, StackedVelocity,
};
use dqfleet::graph::{FleetGraph, LeaderSet, NodeId};
use dqfleet::mekf::{
    error_jacobians, imu_jacobians, info_update, SensorScenario, SingleFilter, SingleNoise, VelocityInput,
};
use dqfleet::rigid_body::{integrate_step, DualForce, RigidBodyParams, RigidBodyState};
use dqfleet::sim::noise::{default_p0, noisy_absolute, noisy_relative, perturbed_estimate};
use dqfleet::sim::output::write_run_csv;
use dqfleet::sim::{
    run_experiment, run_scenario, ConsensusMode, Experiment, Fleet, NoiseModel, ScenarioConfig, ScenarioKind,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn vec3<R: Rng>(rng: &mut R, scale: f64) -> Vec3 {
    Vec3::from_fn(|_, _| normal(rng) * scale)
}

pub fn vec6<R: Rng>(rng: &mut R, scale: f64) -> Vec6 {
    Vec6::from_fn(|_, _| normal(rng) * scale)
}

pub fn unit_quaternion<R: Rng>(rng: &mut R) -> UnitQuaternion {
    let q = Quaternion::new(normal(rng), normal(rng), normal(rng), normal(rng));
    UnitQuaternion::new_normalize(q).unwrap()
}

pub fn pose<R: Rng>(rng: &mut R, spread: f64) -> UnitDualQuaternion {
    UnitDualQuaternion::from_parts(&unit_quaternion(rng), &vec3(rng, spread))
}

/// `pose (x) extend(dx)`
pub fn perturb(pose: &UnitDualQuaternion, dx: &Vec6) -> UnitDualQuaternion {
    (*pose * UnitDualQuaternion::from_vec6(dx).unwrap()).renormalize()
}

/// Symmetric positive definite matrix with eigenvalues log-uniform in `[lo, hi]`.
pub fn spd<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| normal(rng));
    let q = a.qr().q();
    let d = DVector::from_fn(n, |_, _| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp());
    let mut m = &q * DMatrix::from_diagonal(&d) * q.transpose();
    let t = m.transpose();
    m = (m + t) * 0.5;
    m
}

pub fn spd6<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Mat6 {
    Mat6::from_column_slice(spd(rng, 6, lo, hi).as_slice())
}

/// `|a - b| / |b|` over the flattened entries, or `|a - b|` when `b` is zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm > 0.0 {
        diff / norm
    } else {
        diff
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central differences of `f` at `x0`.
pub fn fd_jacobian(f: &dyn Fn(&DVector<f64>) -> DVector<f64>, x0: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let m = f(x0).len();
    let mut j = DMatrix::zeros(m, x0.len());
    for c in 0..x0.len() {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[c] += h;
        xm[c] -= h;
        j.set_column(c, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    j
}

const FD_STEP: f64 = 1e-6;
pub const JACOBIAN_TOL: f64 = 1e-5;

fn within(what: &str, err: f64, tol: f64) -> Check {
    if err <= tol {
        Ok(())
    } else {
        Err(format!("{what}: error {err:.3e} exceeds {tol:.1e}"))
    }
}

// ---------------------------------------------------------------------------
// Information form against the covariance-form Kalman update

pub const INFO_TOL: f64 = 1e-9;

/// Worst relative discrepancy of the correction and posterior covariance
/// over `instances` random linear-Gaussian problems.
pub fn info_vs_covariance(instances: usize, seed: u64) -> Result<f64, String> {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for t in 0..instances {
        let n = rng.random_range(1..=16);
        let m = rng.random_range(1..=16);
        let p = spd(&mut rng, n, 1e-2, 1e1);
        let r = spd(&mut rng, m, 1e-2, 1e1);
        let h = DMatrix::from_fn(m, n, |_, _| normal(&mut rng));
        let x = DVector::from_fn(n, |_, _| normal(&mut rng));
        let z = DVector::from_fn(m, |_, _| normal(&mut rng));
        let (dx, post) = info_update(&x, &p, &h, &r, &z).map_err(|e| format!("instance {t}: {e}"))?;

        let s = &h * &p * h.transpose() + &r;
        let s_inv = s.lu().try_inverse().ok_or_else(|| format!("instance {t}: singular innovation"))?;
        let k = &p * h.transpose() * s_inv;
        let dx_ref = &k * (&z - &h * &x);
        let ikh = DMatrix::identity(n, n) - &k * &h;
        let p_ref = &ikh * &p * ikh.transpose() + &k * &r * k.transpose();

        worst = worst.max(rel_err(dx.as_slice(), dx_ref.as_slice()));
        worst = worst.max(rel_err(post.as_slice(), p_ref.as_slice()));
    }
    within("information vs covariance form", worst, INFO_TOL)?;
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Jacobians against finite differences of the nonlinear maps

fn dv(x: &DVector<f64>, at: usize) -> Vec6 {
    Vec6::from_column_slice(&x.as_slice()[at..at + 6])
}

fn v3(x: &DVector<f64>, at: usize) -> Vec3 {
    Vec3::from_column_slice(&x.as_slice()[at..at + 3])
}

fn dq_of(v: &DualVelocity) -> DualQuaternion {
    v.to_dual_quaternion()
}

/// Error dynamics of the 12-state filter: `x = (vec6(dq), db)`, `eta =
/// (velocity noise, bias noise)`, with `dq' = (dq W - W_hat dq) / 2` and
/// `W = W_hat - db - eta_v`.
pub fn error_dynamics(w_hat: &DualVelocity, x: &DVector<f64>, eta: &DVector<f64>) -> DVector<f64> {
    let dq = *UnitDualQuaternion::from_vec6(&dv(x, 0)).unwrap().dual_quaternion();
    let w = dq_of(w_hat);
    let db = dq_of(&DualVelocity::from_vec6(&dv(x, 6)));
    let n = dq_of(&DualVelocity::from_vec6(&dv(eta, 0)));
    let rate = (dq * w - w * dq - dq * db - dq * n).scale(0.5);
    let mut out = DVector::zeros(12);
    out.rows_mut(0, 6).copy_from(&rate.vec6());
    out.rows_mut(6, 6).copy_from(&dv(eta, 6));
    out
}

fn nominal_error(n: usize) -> DVector<f64> {
    DVector::zeros(n)
}

fn check_error_jacobians<R: Rng>(rng: &mut R) -> Result<f64, String> {
    let w_hat = DualVelocity::from_vec6(&vec6(rng, 0.5));
    let (f, g) = error_jacobians(&w_hat);
    let zero = nominal_error(12);
    let f_fd = fd_jacobian(&|x| error_dynamics(&w_hat, x, &zero), &zero, FD_STEP);
    let g_fd = fd_jacobian(&|e| error_dynamics(&w_hat, &zero, e), &zero, FD_STEP);
    let e = rel_err(f.as_slice(), f_fd.as_slice()).max(rel_err(g.as_slice(), g_fd.as_slice()));
    within("12-state F/G", e, JACOBIAN_TOL)?;
    Ok(e)
}

fn bv_rate(w: &Vec3, bv: &Vec3, n: &Vec3, r: &Vec3) -> Vec3 {
    -w.cross(bv) - n + w.cross(&w.cross(r))
}

/// Operating point of the accelerometer variant.
pub struct ImuPoint {
    pub w_meas: Vec3,
    pub b_w: Vec3,
    pub b_v: Vec3,
    pub b_a: Vec3,
    pub force: Vec3,
    pub offset: Vec3,
}

/// Error dynamics of the 15-state variant: `x = (vec6(dq), db_w, db_v,
/// db_a)`, `eta = (gyro, velocity, gyro bias, velocity bias, accel bias)`.
pub fn imu_error_dynamics(pt: &ImuPoint, x: &DVector<f64>, eta: &DVector<f64>) -> DVector<f64> {
    let w_hat = pt.w_meas - pt.b_w;
    let v_hat = -pt.b_v;
    let w_true = w_hat - v3(x, 6) - v3(eta, 0);
    let bv_true = pt.b_v + v3(x, 9);
    let ba_true = pt.b_a + v3(x, 12);
    let v_true = -bv_true - v3(eta, 3);
    let dq = *UnitDualQuaternion::from_vec6(&dv(x, 0)).unwrap().dual_quaternion();
    let w_e = dq_of(&DualVelocity::new(w_hat, v_hat));
    let w_t = dq_of(&DualVelocity::new(w_true, v_true));
    let rate = (dq * w_t - w_e * dq).scale(0.5);
    let mut out = DVector::zeros(15);
    out.rows_mut(0, 6).copy_from(&rate.vec6());
    out.rows_mut(6, 3).copy_from(&v3(eta, 6));
    let dbv = bv_rate(&w_true, &bv_true, &(pt.force - ba_true), &pt.offset)
        - bv_rate(&w_hat, &pt.b_v, &(pt.force - pt.b_a), &pt.offset)
        + v3(eta, 9);
    out.rows_mut(9, 3).copy_from(&dbv);
    out.rows_mut(12, 3).copy_from(&v3(eta, 12));
    out
}

fn check_imu_jacobians<R: Rng>(rng: &mut R) -> Result<f64, String> {
    let pt = ImuPoint {
        w_meas: vec3(rng, 0.5),
        b_w: vec3(rng, 0.05),
        b_v: vec3(rng, 0.5),
        b_a: vec3(rng, 0.05),
        force: vec3(rng, 1.0),
        offset: vec3(rng, 1.0),
    };
    let (f, g) = imu_jacobians(&(pt.w_meas - pt.b_w), &-pt.b_v, &pt.b_v, &pt.offset);
    let zero = nominal_error(15);
    let f_fd = fd_jacobian(&|x| imu_error_dynamics(&pt, x, &zero), &zero, FD_STEP);
    let g_fd = fd_jacobian(&|e| imu_error_dynamics(&pt, &zero, e), &zero, FD_STEP);
    let e = rel_err(f.as_slice(), f_fd.as_slice()).max(rel_err(g.as_slice(), g_fd.as_slice()));
    within("15-state F/G", e, JACOBIAN_TOL)?;
    Ok(e)
}

/// Random estimates of a neighbourhood with a random covariance.
pub fn random_local_state<R: Rng>(rng: &mut R, graph: &FleetGraph, owner: NodeId) -> LocalFilterState {
    let layout = graph.neighbourhood(owner).unwrap();
    let n = layout.len();
    let poses = (0..n).map(|_| pose(rng, 10.0)).collect();
    let biases = (0..n).map(|_| vec6(rng, 0.1)).collect();
    let p = spd(rng, 12 * n, 1e-4, 1e-1);
    LocalFilterState::new(layout, poses, biases, p).unwrap()
}

fn check_distributed_time_update<R: Rng>(rng: &mut R) -> Result<f64, String> {
    let graph = FleetGraph::random_connected(5, 0.5, rng).unwrap();
    let owner = rng.random_range(1..=5);
    let state = random_local_state(rng, &graph, owner);
    let n = state.layout().len();
    let measured = rng.random_bool(0.5);
    let velocity: Vec<Vec6> = (0..n).map(|_| vec6(rng, 0.3)).collect();
    let stacked = if measured { StackedVelocity::Measured(velocity.clone()) } else { StackedVelocity::PoseOnly };
    let noise = ProcessNoise { q_velocity: spd6(rng, 1e-6, 1e-3), q_bias: spd6(rng, 1e-6, 1e-3) };
    let dt = 0.05;
    let next = ddq::time_update(&state, &stacked, &noise, dt).map_err(|e| e.to_string())?;

    let zero = nominal_error(12);
    let mut phi = DMatrix::zeros(12 * n, 12 * n);
    let mut qd = DMatrix::zeros(12 * n, 12 * n);
    for (s, v) in velocity.iter().enumerate() {
        let b = DualVelocity::from_vec6(&state.biases[s]);
        let w_hat = if measured { DualVelocity::from_vec6(v) - b } else { DualVelocity::zero() - b };
        let f = fd_jacobian(&|x| error_dynamics(&w_hat, x, &zero), &zero, FD_STEP);
        let g = fd_jacobian(&|e| error_dynamics(&w_hat, &zero, e), &zero, FD_STEP);
        let mut q = DMatrix::zeros(12, 12);
        if measured {
            q.view_mut((0, 0), (6, 6)).copy_from(&noise.q_velocity);
        }
        q.view_mut((6, 6), (6, 6)).copy_from(&noise.q_bias);
        phi.view_mut((12 * s, 12 * s), (12, 12)).copy_from(&(DMatrix::identity(12, 12) + f * dt));
        qd.view_mut((12 * s, 12 * s), (12, 12)).copy_from(&(&g * q * g.transpose() * dt));
    }
    let p_ref = &phi * &state.covariance * phi.transpose() + qd;
    let e = rel_err(next.covariance.as_slice(), p_ref.as_slice());
    within("stacked time update", e, JACOBIAN_TOL)?;
    Ok(e)
}

fn q4(x: &DVector<f64>, at: usize) -> Quaternion {
    Quaternion::new(x[at], x[at + 1], x[at + 2], x[at + 3])
}

/// Relative attitude `qi* qk` and position quaternion
/// `2 qi* (pk qk* - pi qi*) qi` of the perturbed poses `q = q_hat dq`,
/// `p = p_hat dq + q_hat dp`, with `x = (dq_i, dp_i, dq_k, dp_k)`.
pub fn raw_relative(observer: &UnitDualQuaternion, target: &UnitDualQuaternion, x: &DVector<f64>) -> DVector<f64> {
    let (qi0, pi0) = (*observer.real(), *observer.dual());
    let (qk0, pk0) = (*target.real(), *target.dual());
    let qi = qi0 * q4(x, 0);
    let pi = pi0 * q4(x, 0) + qi0 * q4(x, 4);
    let qk = qk0 * q4(x, 8);
    let pk = pk0 * q4(x, 8) + qk0 * q4(x, 12);
    let q = qi.conj() * qk;
    let r = (qi.conj() * (pk * qk.conj() - pi * qi.conj()) * qi).scale(2.0);
    let mut out = DVector::zeros(8);
    out.rows_mut(0, 4).copy_from(&q.to_vec4());
    out.rows_mut(4, 4).copy_from(&r.to_vec4());
    out
}

fn check_relative_blocks<R: Rng>(rng: &mut R) -> Result<f64, String> {
    let obs = pose(rng, 10.0);
    let tgt = pose(rng, 10.0);
    let j = relative_pose_jacobians(&obs, &tgt);
    let mut x0 = DVector::zeros(16);
    x0[0] = 1.0;
    x0[8] = 1.0;
    let fd = fd_jacobian(&|x| raw_relative(&obs, &tgt, x), &x0, FD_STEP);
    let block = |r: usize, c: usize| fd.view((r, c), (4, 4)).into_owned();
    let mut worst: f64 = 0.0;
    for (name, analytic, numeric) in [
        ("q/dqi", j.q_dqi, block(0, 0)),
        ("q/dqk", j.q_dqk, block(0, 8)),
        ("r/dqi", j.r_dqi, block(4, 0)),
        ("r/dpi", j.r_dpi, block(4, 4)),
        ("r/dqk", j.r_dqk, block(4, 8)),
        ("r/dpk", j.r_dpk, block(4, 12)),
    ] {
        let e = rel_err(analytic.as_slice(), numeric.as_slice());
        within(&format!("relative block {name}"), e, JACOBIAN_TOL)?;
        worst = worst.max(e);
    }
    let dq_dp = block(0, 4).norm() + block(0, 12).norm();
    within("relative attitude depends on positions", dq_dp, 1e-9)?;

    // full 8x8 rows: attitude scaled by 1/2 and position by 1/4
    let scale = DMatrix::from_diagonal(&DVector::from_fn(8, |i, _| if i < 4 { 0.5 } else { 0.25 }));
    let obs_fd = &scale * fd.columns(0, 8);
    let tgt_fd = &scale * fd.columns(8, 8);
    let e = rel_err(j.observer_full().as_slice(), obs_fd.as_slice())
        .max(rel_err(j.target_full().as_slice(), tgt_fd.as_slice()));
    within("full relative rows", e, JACOBIAN_TOL)?;
    Ok(worst.max(e))
}

/// Stacked residual of `owner` when the truth is `estimate (x) extend(dx)`
/// for every tracked node; `dx` holds 12 entries per node, biases ignored.
fn stacked_residual(
    state: &LocalFilterState,
    measured: &[NodeId],
    noise: &MeasurementNoise,
    dx: &DVector<f64>,
) -> DVector<f64> {
    let layout = state.layout();
    let truth: Vec<UnitDualQuaternion> = (0..layout.len()).map(|s| perturb(&state.poses[s], &dv(dx, 12 * s))).collect();
    let own = layout.own_slot();
    let mut meas = MeasurementSet { absolute: Some(truth[own]), relative: BTreeMap::new() };
    for &k in measured {
        let s = layout.slot(k).unwrap();
        meas.relative.insert(k, RelativeMeasurement::between(&truth[own], &truth[s]));
    }
    assemble_measurement(state, &meas, noise).unwrap().to_dense_reduced().unwrap().0
}

fn check_stacked_h<R: Rng>(rng: &mut R) -> Result<f64, String> {
    let graph = FleetGraph::random_connected(5, 0.5, rng).unwrap();
    let owner = rng.random_range(1..=5);
    let state = random_local_state(rng, &graph, owner);
    let measured: Vec<NodeId> = state.layout().neighbours().collect();
    let noise = MeasurementNoise::new(Mat6::identity(), Mat6::identity());
    let zero = nominal_error(12 * state.layout().len());
    let h_fd = fd_jacobian(&|dx| stacked_residual(&state, &measured, &noise, dx), &zero, FD_STEP);
    let mut meas = MeasurementSet { absolute: Some(*state.own_pose()), relative: BTreeMap::new() };
    for &k in &measured {
        meas.relative.insert(k, RelativeMeasurement::between(state.own_pose(), state.pose_of(k).unwrap()));
    }
    let (z, h, _) = assemble_measurement(&state, &meas, &noise).unwrap().to_dense_reduced().unwrap();
    within("residual at the estimate", z.norm(), 1e-12)?;
    let e = rel_err(h.as_slice(), h_fd.as_slice());
    within("stacked measurement matrix", e, JACOBIAN_TOL)?;
    Ok(e)
}

/// Every analytic Jacobian against central differences at `states` random
/// operating points; returns the worst relative error.
pub fn jacobian_suite(states: usize, seed: u64) -> Result<f64, String> {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for t in 0..states {
        let at = |e: String| format!("state {t}: {e}");
        worst = worst.max(check_error_jacobians(&mut rng).map_err(at)?);
        worst = worst.max(check_imu_jacobians(&mut rng).map_err(at)?);
        worst = worst.max(check_distributed_time_update(&mut rng).map_err(at)?);
        worst = worst.max(check_relative_blocks(&mut rng).map_err(at)?);
        worst = worst.max(check_stacked_h(&mut rng).map_err(at)?);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// One-node fleet against the stand-alone filter

pub const DEGENERACY_TOL: f64 = 1e-12;

pub fn test_params() -> RigidBodyParams {
    RigidBodyParams::new(100.0, nalgebra::Matrix3::from_diagonal(&Vec3::new(10.0, 12.0, 14.0))).unwrap()
}

/// Largest difference between the distributed pipeline on a one-node graph
/// and the stand-alone filter, over `steps` rounds.
pub fn single_node_degeneracy(steps: usize, seed: u64, velocity_sensing: bool) -> Result<f64, String> {
    let mut rng = rng(seed);
    let dt = 0.05;
    let r = Mat6::from_diagonal(&Vec6::new(1e-6, 1e-6, 1e-6, 1e-4, 1e-4, 1e-4));
    let q_velocity = if velocity_sensing { Mat6::identity() * 1e-6 } else { Mat6::zeros() };
    let q_bias = Mat6::from_diagonal(&Vec6::new(1e-9, 1e-9, 1e-9, 1e-7, 1e-7, 1e-7));
    let scenario = if velocity_sensing { SensorScenario::PoseAndVelocity } else { SensorScenario::PoseOnly };
    let single = SingleFilter::new(scenario, SingleNoise::new(q_velocity, q_bias, r)).map_err(|e| e.to_string())?;
    let process = ProcessNoise { q_velocity, q_bias };
    let noise = MeasurementNoise::new(r, r);

    let params = test_params();
    let mut truth =
        RigidBodyState::new(pose(&mut rng, 10.0), DualVelocity::new(vec3(&mut rng, 0.03), vec3(&mut rng, 0.1)));
    let mut bias = if velocity_sensing { vec6(&mut rng, 0.01) } else { -truth.velocity.to_vec6() };
    let p0 = default_p0();
    let (est, est_bias) = perturbed_estimate(&truth.pose, &bias, &p0, &mut rng);

    let graph = FleetGraph::new(1, &[]).map_err(|e| e.to_string())?;
    let layout = graph.neighbourhood(1).map_err(|e| e.to_string())?;
    let mut s = single.initial_state(est, est_bias, p0.clone()).map_err(|e| e.to_string())?;
    let mut d = LocalFilterState::new(layout.clone(), vec![est], vec![est_bias], p0).map_err(|e| e.to_string())?;
    let weights = ConsensusWeights::uniform(&layout);

    let compare = |s: &dqfleet::mekf::SingleFilterState, d: &LocalFilterState| -> f64 {
        max_abs_diff(s.pose.to_vec8().as_slice(), d.poses[0].to_vec8().as_slice())
            .max(max_abs_diff(s.dual_bias.as_slice(), d.biases[0].as_slice()))
            .max(max_abs_diff(s.covariance.as_slice(), d.covariance.as_slice()))
    };
    let mut worst: f64 = 0.0;
    for step in 0..steps {
        let at = |e: dqfleet::Error| format!("step {step}: {e}");
        let m = if velocity_sensing { truth.velocity.to_vec6() + bias + vec6(&mut rng, 1e-3) } else { Vec6::zeros() };
        let (input, stacked) = if velocity_sensing {
            (VelocityInput::DualVelocity(DualVelocity::from_vec6(&m)), StackedVelocity::Measured(vec![m]))
        } else {
            (VelocityInput::None, StackedVelocity::PoseOnly)
        };
        s = single.time_update(&s, &input, dt).map_err(at)?;
        d = ddq::time_update(&d, &stacked, &process, dt).map_err(at)?;
        worst = worst.max(compare(&s, &d));

        truth = integrate_step(&truth, &params, &DualForce::zero(), dt);
        if velocity_sensing {
            bias += vec6(&mut rng, 1e-5);
        } else {
            bias = -truth.velocity.to_vec6();
        }
        let measured = noisy_absolute(&truth.pose, &r, &mut rng);
        s = single.measurement_update(&s, &measured).map_err(at)?;
        let meas = MeasurementSet { absolute: Some(measured), relative: BTreeMap::new() };
        let packet = hard_prepare(&layout, &meas, &noise, &d.view()).map_err(at)?;
        d = hard_aggregate_update(&d, &BTreeMap::from([(1, packet)]), false).map_err(at)?;
        d = soft_consensus_step(&d, &BTreeMap::new(), &weights).map_err(at)?.state;
        worst = worst.max(compare(&s, &d));
    }
    within("one-node pipeline vs stand-alone filter", worst, DEGENERACY_TOL)?;
    Ok(worst)
}

/// The simulator's independent filter against its distributed modes on a
/// one-satellite fleet.
pub fn single_satellite_modes_agree(seed: u64) -> Result<f64, String> {
    let cfg = ScenarioConfig {
        n_sats: 1,
        modes: vec![ConsensusMode::None, ConsensusMode::Soft, ConsensusMode::HardSoft],
        ..ScenarioConfig::new(ScenarioKind::Sweep)
    };
    let run = run_scenario(&cfg, seed, "single").map_err(|e| e.to_string())?;
    let base = &run.modes[0].samples[0];
    if base.len() != cfg.steps() {
        return Err(format!("expected {} samples, got {}", cfg.steps(), base.len()));
    }
    let mut worst: f64 = 0.0;
    for m in &run.modes[1..] {
        for (a, b) in base.iter().zip(&m.samples[0]) {
            worst = worst.max(max_abs_diff(&a.values(), &b.values()));
        }
    }
    within("one-satellite modes", worst, DEGENERACY_TOL)?;
    Ok(worst)
}

// ---------------------------------------------------------------------------
// The five-satellite example fleet: node 4 sees nodes 1 and 3

pub fn example_graph() -> FleetGraph {
    FleetGraph::new(5, &[(1, 2), (1, 4), (2, 3), (3, 4), (3, 5)]).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Expect {
    Zero,
    Identity,
    /// Jacobian of node 4's relative measurement of `target`, with respect
    /// to `wrt`.
    Relative {
        target: NodeId,
        wrt: NodeId,
    },
}

/// Expected `(view owner, 6x6 block grid)` for node 4's stacked
/// measurements; rows are measurement slots, columns the pose and bias
/// units of each tracked node.
pub fn example_patterns() -> Vec<(NodeId, Vec<Vec<Expect>>)> {
    use Expect::*;
    let rel = |t, w| Relative { target: t, wrt: w };
    vec![
        (
            1,
            vec![
                vec![rel(1, 1), Zero, Zero, Zero, rel(1, 4), Zero],
                vec![Zero; 6],
                vec![Zero, Zero, Zero, Zero, Identity, Zero],
            ],
        ),
        (
            3,
            vec![
                vec![Zero; 8],
                vec![Zero, Zero, rel(3, 3), Zero, rel(3, 4), Zero, Zero, Zero],
                vec![Zero, Zero, Zero, Zero, Identity, Zero, Zero, Zero],
                vec![Zero; 8],
            ],
        ),
        (
            4,
            vec![
                vec![rel(1, 1), Zero, Zero, Zero, rel(1, 4), Zero],
                vec![Zero, Zero, rel(3, 3), Zero, rel(3, 4), Zero],
                vec![Zero, Zero, Zero, Zero, Identity, Zero],
            ],
        ),
    ]
}

/// Expected residual per measurement slot of each view.
fn example_residual_slots(view: NodeId) -> Vec<Option<&'static str>> {
    match view {
        1 => vec![Some("rel1"), None, Some("abs")],
        3 => vec![None, Some("rel3"), Some("abs"), None],
        _ => vec![Some("rel1"), Some("rel3"), Some("abs")],
    }
}

/// Build node 4's stacked measurements in the layouts of nodes 1, 3 and 4
/// and check them block by block against the expected structure.
pub fn example_fleet_structure(seed: u64) -> Check {
    let mut rng = rng(seed);
    let graph = example_graph();
    let truth: Vec<UnitDualQuaternion> = (0..5).map(|_| pose(&mut rng, 10.0)).collect();
    let est: Vec<UnitDualQuaternion> = truth.iter().map(|t| perturb(t, &vec6(&mut rng, 1e-2))).collect();
    let r = Mat6::from_diagonal(&Vec6::new(1e-6, 1e-6, 1e-6, 1e-4, 1e-4, 1e-4));
    let noise = MeasurementNoise::new(r, r);
    let absolute = noisy_absolute(&truth[3], &r, &mut rng);
    let rel1 = noisy_relative(&RelativeMeasurement::between(&truth[3], &truth[0]), &r, &mut rng);
    let rel3 = noisy_relative(&RelativeMeasurement::between(&truth[3], &truth[2]), &r, &mut rng);
    let meas = MeasurementSet { absolute: Some(absolute), relative: BTreeMap::from([(1, rel1), (3, rel3)]) };
    let observer = graph.neighbourhood(4).map_err(|e| e.to_string())?;
    if observer.members() != [1, 3, 4] {
        return Err(format!("node 4 tracks {:?}", observer.members()));
    }

    let jac = |t: NodeId| relative_pose_jacobians(&est[3], &est[t - 1]);
    let z_rel = |t: NodeId, m: &RelativeMeasurement| relative_residual(&est[3], &est[t - 1], m);
    let z_abs = (est[3].conj() * absolute).canonical().vec6();

    for (view_owner, pattern) in example_patterns() {
        let layout = graph.neighbourhood(view_owner).map_err(|e| e.to_string())?;
        let view = PredictedView {
            layout: layout.clone(),
            poses: layout.members().iter().map(|&j| (j, est[j - 1])).collect(),
        };
        let sm = assemble_measurement_for(&observer, &meas, &noise, &view).map_err(|e| e.to_string())?;
        let (z, h, _) = sm.to_dense_reduced().map_err(|e| e.to_string())?;
        let rows = 6 * layout.len();
        let cols = 12 * layout.len();
        if h.nrows() != rows || h.ncols() != cols || z.len() != rows {
            return Err(format!(
                "view of node {view_owner}: H is {}x{}, z has {} rows, expected {rows}x{cols}",
                h.nrows(),
                h.ncols(),
                z.len()
            ));
        }
        for (bi, row) in pattern.iter().enumerate() {
            for (bj, expect) in row.iter().enumerate() {
                let got = h.view((6 * bi, 6 * bj), (6, 6)).into_owned();
                let want = match *expect {
                    Expect::Zero => DMatrix::zeros(6, 6),
                    Expect::Identity => DMatrix::identity(6, 6),
                    Expect::Relative { target, wrt } => {
                        let j = jac(target);
                        let m = if wrt == 4 { j.observer_reduced() } else { j.target_reduced() };
                        if m.norm() == 0.0 {
                            return Err(format!("relative block for {target} w.r.t. {wrt} vanishes"));
                        }
                        DMatrix::from_column_slice(6, 6, m.as_slice())
                    }
                };
                if got != want {
                    return Err(format!("view of node {view_owner}: block ({bi}, {bj}) is not {expect:?}"));
                }
            }
        }
        for (slot, kind) in example_residual_slots(view_owner).into_iter().enumerate() {
            let got = Vec6::from_column_slice(&z.as_slice()[6 * slot..6 * slot + 6]);
            let want = match kind {
                None => Vec6::zeros(),
                Some("abs") => z_abs,
                Some("rel1") => z_rel(1, &rel1),
                Some(_) => z_rel(3, &rel3),
            };
            if got != want || (kind.is_some() && want.norm() == 0.0) {
                return Err(format!("view of node {view_owner}: residual slot {slot} is not {kind:?}"));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Property checks on whole fleets

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config.clone(), TestRng::deterministic_rng(config.rng_algorithm))
}

fn run_property<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Check) -> Check {
    runner(cases).run(&strategy, |v| test(v).map_err(TestCaseError::fail)).map_err(|e| e.to_string())
}

fn mode_from(i: usize) -> ConsensusMode {
    ConsensusMode::ALL[i % ConsensusMode::ALL.len()]
}

/// A small fleet with constant body velocities, noisy sensors and no
/// velocity sensing, driven round by round; `inspect` sees the filters after
/// every round.
pub fn drive_fleet(
    seed: u64,
    n: usize,
    mode: ConsensusMode,
    leader_fraction: f64,
    stubborn: bool,
    steps: usize,
    mut inspect: impl FnMut(&Fleet) -> Check,
) -> Check {
    let mut rng = rng(seed);
    let graph = FleetGraph::random_connected(n, 0.5, &mut rng).map_err(|e| e.to_string())?;
    let leaders = if leader_fraction >= 1.0 {
        LeaderSet::all(&graph)
    } else {
        LeaderSet::random(&graph, leader_fraction, &mut rng).map_err(|e| e.to_string())?
    };
    let noise = NoiseModel::from_snr(100.0, 10.0).map_err(|e| e.to_string())?;
    let dt = 0.05;
    let mut truth: Vec<UnitDualQuaternion> = (0..n).map(|_| pose(&mut rng, 10.0)).collect();
    let vel: Vec<DualVelocity> = (0..n).map(|_| DualVelocity::new(vec3(&mut rng, 0.05), vec3(&mut rng, 0.1))).collect();
    let shared: Vec<(UnitDualQuaternion, Vec6)> =
        truth.iter().zip(&vel).map(|(t, v)| perturbed_estimate(t, &-v.to_vec6(), &noise.p0, &mut rng)).collect();
    let initial: Vec<Vec<(UnitDualQuaternion, Vec6)>> = graph
        .nodes()
        .map(|i| graph.neighbourhood(i).unwrap().members().iter().map(|&j| shared[j - 1]).collect())
        .collect();
    let mut fleet = Fleet::new(graph.clone(), leaders, mode, stubborn, false, noise.clone(), dt, &initial)
        .map_err(|e| e.to_string())?;
    for step in 0..steps {
        let at = |e: dqfleet::Error| format!("round {step}: {e}");
        fleet.time_update(&vec![Vec6::zeros(); n]).map_err(at)?;
        for (t, v) in truth.iter_mut().zip(&vel) {
            *t = t.integrate_body(v, dt);
        }
        let meas: Vec<MeasurementSet> = graph
            .nodes()
            .map(|i| MeasurementSet {
                absolute: Some(noisy_absolute(&truth[i - 1], &noise.r, &mut rng)),
                relative: graph
                    .neighbours(i)
                    .unwrap()
                    .into_iter()
                    .map(|k| {
                        let clean = RelativeMeasurement::between(&truth[i - 1], &truth[k - 1]);
                        (k, noisy_relative(&clean, &noise.r, &mut rng))
                    })
                    .collect(),
            })
            .collect();
        fleet.measurement_update(&meas).map_err(at)?;
        inspect(&fleet).map_err(|e| format!("round {step}: {e}"))?;
    }
    Ok(())
}

fn fleet_poses(fleet: &Fleet) -> Vec<UnitDualQuaternion> {
    match (fleet.distributed_states(), fleet.independent_states()) {
        (Some(s), _) => s.iter().flat_map(|s| s.poses.iter().copied()).collect(),
        (_, Some(s)) => s.iter().map(|s| s.pose).collect(),
        _ => Vec::new(),
    }
}

pub fn unit_violation(p: &UnitDualQuaternion) -> f64 {
    let (a, b) = p.dual_quaternion().norm_squared();
    (a - 1.0).abs().max(b.abs())
}

pub const UNIT_NORM_TOL: f64 = 1e-9;
pub const PSD_TOL: f64 = 1e-9;

/// Every stored pose keeps both unit-norm constraints after every round.
pub fn property_unit_norms(cases: u32) -> Check {
    run_property(cases, (any::<u64>(), 3usize..7, 0usize..3, prop::bool::ANY), |(seed, n, mode, stubborn)| {
        drive_fleet(seed, n, mode_from(mode), 0.5, stubborn, 20, |fleet| {
            let worst = fleet_poses(fleet).iter().map(unit_violation).fold(0.0, f64::max);
            within("unit norm", worst, UNIT_NORM_TOL)
        })
    })
}

/// Largest asymmetry and most negative eigenvalue of `p`.
pub fn psd_violation(p: &DMatrix<f64>) -> (f64, f64) {
    let asym = max_abs_diff(p.as_slice(), p.transpose().as_slice());
    (asym, -dqfleet::linalg::min_eigenvalue(p))
}

/// Every filter covariance stays symmetric and positive semi-definite.
pub fn property_psd_covariance(cases: u32) -> Check {
    run_property(cases, (any::<u64>(), 3usize..7, 0usize..3, prop::bool::ANY), |(seed, n, mode, stubborn)| {
        drive_fleet(seed, n, mode_from(mode), 0.5, stubborn, 20, |fleet| {
            for i in fleet.graph().nodes() {
                let (asym, neg) = psd_violation(fleet.covariance(i));
                within(&format!("node {i} covariance asymmetry"), asym, PSD_TOL)?;
                within(&format!("node {i} covariance negative eigenvalue"), neg, PSD_TOL)?;
            }
            Ok(())
        })
    })
}

fn small_config(n: usize, kind: ScenarioKind) -> ScenarioConfig {
    ScenarioConfig { n_sats: n, duration: 1.0, modes: ConsensusMode::ALL.to_vec(), ..ScenarioConfig::new(kind) }
}

fn csv_bytes(run: &dqfleet::sim::RunResult) -> Vec<u8> {
    let mut out = Vec::new();
    write_run_csv(&mut out, run).unwrap();
    out
}

/// The same configuration and seed give byte-identical output, also across
/// worker counts.
pub fn property_determinism(cases: u32) -> Check {
    run_property(cases, (any::<u64>(), 2usize..6, prop::bool::ANY), |(seed, n, velocity)| {
        let cfg = ScenarioConfig { velocity_sensing: velocity, ..small_config(n, ScenarioKind::Sweep) };
        let a = run_scenario(&cfg, seed, "a").map_err(|e| e.to_string())?;
        let b = run_scenario(&cfg, seed, "a").map_err(|e| e.to_string())?;
        if csv_bytes(&a) != csv_bytes(&b) {
            return Err(format!("seed {seed}: repeated runs differ"));
        }
        let exp = Experiment { seeds: vec![seed, seed.wrapping_add(1)], ..Experiment::new(cfg) };
        let one = run_experiment(&exp, Some(1)).map_err(|e| e.to_string())?;
        let two = run_experiment(&exp, Some(2)).map_err(|e| e.to_string())?;
        for (x, y) in one.iter().zip(&two) {
            if csv_bytes(x) != csv_bytes(y) {
                return Err(format!("seed {seed}: results depend on the worker count"));
            }
        }
        Ok(())
    })
}

pub const NOISELESS_TOL: f64 = 1e-8;

/// Largest error of any satellite, mode and sample.
pub fn worst_error(run: &dqfleet::sim::RunResult) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for m in &run.modes {
        if let Some(why) = &m.diverged {
            return Err(format!("{} diverged: {why}", m.label));
        }
        for s in m.samples.iter().flatten() {
            worst = s.values().iter().copied().fold(worst, f64::max);
        }
    }
    Ok(worst)
}

pub fn noiseless(cfg: ScenarioConfig) -> ScenarioConfig {
    ScenarioConfig { noiseless: true, exact_init: true, ..cfg }
}

/// Noise-free sensors and exact initial estimates keep every mode at the
/// truth, for any leader fraction.
pub fn property_noiseless_fixed_point(cases: u32) -> Check {
    let strategy = (any::<u64>(), 2usize..7, 1usize..=10, prop::bool::ANY, prop::bool::ANY);
    run_property(cases, strategy, |(seed, n, tenths, stubborn, velocity)| {
        let cfg = noiseless(ScenarioConfig {
            duration: 2.0,
            leader_fraction: tenths as f64 / 10.0,
            stubborn,
            velocity_sensing: velocity,
            ..small_config(n, ScenarioKind::Leaders)
        });
        let run = run_scenario(&cfg, seed, "noiseless").map_err(|e| e.to_string())?;
        within("noiseless error", worst_error(&run)?, NOISELESS_TOL)
    })
}

// ---------------------------------------------------------------------------
// Relabelling

/// Random permutation: node `i` becomes `perm[i - 1]`.
pub fn permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<NodeId> {
    let mut p: Vec<NodeId> = (1..=n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// The state of node `i` carried over to node `perm[i - 1]` of `relabelled`.
pub fn permute_state(state: &LocalFilterState, perm: &[NodeId], relabelled: &FleetGraph) -> LocalFilterState {
    let old = state.layout();
    let layout = relabelled.neighbourhood(perm[old.owner() - 1]).unwrap();
    let n = old.len();
    let from: Vec<usize> =
        layout.members().iter().map(|&m| old.slot(perm.iter().position(|&p| p == m).unwrap() + 1).unwrap()).collect();
    let poses = from.iter().map(|&s| state.poses[s]).collect();
    let biases = from.iter().map(|&s| state.biases[s]).collect();
    let mut p = DMatrix::zeros(12 * n, 12 * n);
    for (a, &sa) in from.iter().enumerate() {
        for (b, &sb) in from.iter().enumerate() {
            p.view_mut((12 * a, 12 * b), (12, 12)).copy_from(&state.covariance.view((12 * sa, 12 * sb), (12, 12)));
        }
    }
    LocalFilterState::new(layout, poses, biases, p).unwrap()
}

pub fn permute_measurements(meas: &MeasurementSet, perm: &[NodeId]) -> MeasurementSet {
    MeasurementSet {
        absolute: meas.absolute,
        relative: meas.relative.iter().map(|(&k, m)| (perm[k - 1], *m)).collect(),
    }
}

/// Pose, bias and covariance differences between `mapped` and the state
/// `reference` carried through the permutation.
pub fn permuted_difference(
    reference: &LocalFilterState,
    mapped: &LocalFilterState,
    perm: &[NodeId],
    relabelled: &FleetGraph,
) -> (f64, f64, f64) {
    let expect = permute_state(reference, perm, relabelled);
    let mut pose: f64 = 0.0;
    let mut bias: f64 = 0.0;
    for s in 0..expect.poses.len() {
        pose = pose.max(max_abs_diff(expect.poses[s].to_vec8().as_slice(), mapped.poses[s].to_vec8().as_slice()));
        bias = bias.max(max_abs_diff(expect.biases[s].as_slice(), mapped.biases[s].as_slice()));
    }
    let cov = rel_err(mapped.covariance.as_slice(), expect.covariance.as_slice());
    (pose, bias, cov)
}

/// A fleet whose nodes hold slightly different estimates of one truth.
pub struct Disagreeing {
    pub graph: FleetGraph,
    pub states: Vec<LocalFilterState>,
    pub meas: Vec<MeasurementSet>,
}

impl Disagreeing {
    pub fn new<R: Rng>(rng: &mut R, n: usize, spread: f64) -> Self {
        let graph = FleetGraph::random_connected(n, 0.5, rng).unwrap();
        Self::on_graph(rng, graph, spread)
    }

    pub fn on_graph<R: Rng>(rng: &mut R, graph: FleetGraph, spread: f64) -> Self {
        let n = graph.n_nodes();
        let truth: Vec<UnitDualQuaternion> = (0..n).map(|_| pose(rng, 10.0)).collect();
        let r = Mat6::from_diagonal(&Vec6::new(1e-6, 1e-6, 1e-6, 1e-4, 1e-4, 1e-4));
        let mut states = Vec::new();
        let mut meas = Vec::new();
        for i in graph.nodes() {
            let layout = graph.neighbourhood(i).unwrap();
            let poses = layout.members().iter().map(|&j| perturb(&truth[j - 1], &vec6(rng, spread))).collect();
            let biases = layout.members().iter().map(|_| vec6(rng, 0.01)).collect();
            let p = spd(rng, 12 * layout.len(), 1e-4, 1e-2);
            states.push(LocalFilterState::new(layout, poses, biases, p).unwrap());
            let relative = graph
                .neighbours(i)
                .unwrap()
                .into_iter()
                .map(|k| (k, noisy_relative(&RelativeMeasurement::between(&truth[i - 1], &truth[k - 1]), &r, rng)))
                .collect();
            meas.push(MeasurementSet { absolute: Some(noisy_absolute(&truth[i - 1], &r, rng)), relative });
        }
        Disagreeing { graph, states, meas }
    }

    pub fn relabel(&self, perm: &[NodeId]) -> Self {
        let graph = self.graph.relabel(perm).unwrap();
        let n = self.states.len();
        let mut states = vec![None; n];
        let mut meas = vec![MeasurementSet::default(); n];
        for (i, s) in self.states.iter().enumerate() {
            let j = perm[i] - 1;
            states[j] = Some(permute_state(s, perm, &graph));
            meas[j] = permute_measurements(&self.meas[i], perm);
        }
        Disagreeing { graph, states: states.into_iter().map(Option::unwrap).collect(), meas }
    }

    /// One hard-consensus round: every node linearises its measurements at
    /// each neighbour's estimates, and every node fuses what it receives.
    pub fn hard_round(&self, noise: &MeasurementNoise, stubborn: bool) -> Vec<LocalFilterState> {
        let mut inbox: BTreeMap<NodeId, BTreeMap<NodeId, HardPacket>> = BTreeMap::new();
        for (s, m) in self.states.iter().zip(&self.meas) {
            let i = s.owner();
            for &k in s.layout().members() {
                let view = self.states[k - 1].view();
                let packet = hard_prepare(s.layout(), m, noise, &view).unwrap();
                inbox.entry(k).or_default().insert(i, packet);
            }
        }
        self.states.iter().map(|s| hard_aggregate_update(s, &inbox[&s.owner()], stubborn).unwrap()).collect()
    }

    /// One soft-consensus step with uniform weights.
    pub fn soft_round(&self) -> Vec<LocalFilterState> {
        self.states
            .iter()
            .map(|s| {
                let inbox: BTreeMap<NodeId, ConsensusSnapshot> = s
                    .layout()
                    .neighbours()
                    .map(|j| (j, ConsensusSnapshot::new(&self.states[j - 1], s.layout())))
                    .collect();
                soft_consensus_step(s, &inbox, &ConsensusWeights::uniform(s.layout())).unwrap().state
            })
            .collect()
    }

    /// Bound on how far the soft attitude update of `owner`'s estimate of
    /// `node` may move when the neighbour order changes: reordering a
    /// product of unit quaternions with vector parts `a`, `b` changes it by
    /// at most `2 |a| |b|` per swapped pair.
    pub fn reorder_bound(&self, owner: NodeId, node: NodeId) -> f64 {
        let s = &self.states[owner - 1];
        let q_own = s.pose_of(node).unwrap().rotation();
        let parts: Vec<f64> = s
            .layout()
            .neighbours()
            .filter_map(|j| self.states[j - 1].pose_of(node))
            .map(|p| (q_own.conj() * p.rotation()).vector().norm())
            .collect();
        let mut bound = 0.0;
        for a in 0..parts.len() {
            for b in a + 1..parts.len() {
                bound += 2.0 * parts[a] * parts[b];
            }
        }
        ConsensusWeights::uniform(s.layout()).attitude * bound
    }
}

pub const EQUIVARIANCE_TOL: f64 = 1e-9;

/// Relabelled fleets produce relabelled outputs: hard consensus and the
/// position and bias parts of soft consensus to rounding, the soft attitude
/// within the reordering bound of the fixed neighbour product order.
pub fn property_permutation_equivariance(cases: u32) -> Check {
    run_property(cases, (any::<u64>(), 3usize..7, prop::bool::ANY), |(seed, n, stubborn)| {
        let mut rng = rng(seed);
        let fleet = Disagreeing::new(&mut rng, n, 1e-3);
        let perm = permutation(&mut rng, n);
        let other = fleet.relabel(&perm);
        let noise = NoiseModel::from_snr(1000.0, 10.0).unwrap().measurement();

        let hard_a = fleet.hard_round(&noise, stubborn);
        let hard_b = other.hard_round(&noise, stubborn);
        for (i, a) in hard_a.iter().enumerate() {
            let (p, b, c) = permuted_difference(a, &hard_b[perm[i] - 1], &perm, &other.graph);
            within(&format!("hard consensus at node {}", i + 1), p.max(b).max(c), EQUIVARIANCE_TOL)?;
        }

        let soft_a = fleet.soft_round();
        let soft_b = other.soft_round();
        for (i, a) in soft_a.iter().enumerate() {
            let b = &soft_b[perm[i] - 1];
            let expect = permute_state(a, &perm, &other.graph);
            for (s, &m) in expect.layout().members().iter().enumerate() {
                let orig = perm.iter().position(|&p| p == m).unwrap() + 1;
                let dr = (expect.poses[s].position() - b.poses[s].position()).norm();
                let db = (expect.biases[s] - b.biases[s]).norm();
                within(&format!("soft position/bias at node {}", i + 1), dr.max(db), EQUIVARIANCE_TOL)?;
                let dq = expect.poses[s].rotation().angle_to(&b.poses[s].rotation());
                let bound = 2.0 * fleet.reorder_bound(i + 1, orig) + EQUIVARIANCE_TOL;
                within(&format!("soft attitude at node {}", i + 1), dq, bound)?;
            }
            within(
                "soft covariance",
                rel_err(b.covariance.as_slice(), expect.covariance.as_slice()),
                EQUIVARIANCE_TOL,
            )?;
        }
        Ok(())
    })
}

/// Relabelling the fleet leaves every satellite's own-pose trajectory of
/// the local filter unchanged over `rounds` rounds.
pub fn stacking_order_invariance(seed: u64, n: usize, rounds: usize) -> Result<f64, String> {
    let mut rng = rng(seed);
    let mut a = Disagreeing::new(&mut rng, n, 1e-2);
    let perm = permutation(&mut rng, n);
    let mut b = a.relabel(&perm);
    let noise = NoiseModel::from_snr(1000.0, 10.0).unwrap();
    let process = noise.process();
    let mnoise = noise.measurement();
    let mut worst: f64 = 0.0;
    for _ in 0..rounds {
        for f in [&mut a, &mut b] {
            f.states = f
                .states
                .iter()
                .zip(&f.meas)
                .map(|(s, m)| {
                    let s = ddq::time_update(s, &StackedVelocity::PoseOnly, &process, 0.05).unwrap();
                    let info = assemble_measurement(&s, m, &mnoise).unwrap().info_quantities().unwrap();
                    ddq::measurement_update(&s, &info.u, &info.u_reduced).unwrap()
                })
                .collect();
        }
        for (i, s) in a.states.iter().enumerate() {
            let t = &b.states[perm[i] - 1];
            worst = worst.max(max_abs_diff(s.own_pose().to_vec8().as_slice(), t.own_pose().to_vec8().as_slice()));
        }
    }
    within("own-pose trajectory under relabelling", worst, EQUIVARIANCE_TOL)?;
    Ok(worst)
}
