//! Distributed dual-quaternion MEKF: every satellite keeps a stacked
//! estimate of itself and its neighbours.
//!
//! Each tracked node occupies 12 reduced error coordinates (6 pose, 6 dual
//! bias) in ascending label order. The full-dimensional counterparts use 14
//! (8 pose, 6 bias).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::algebra::{
    skew, DualVelocity, Mat3, Mat4, Mat6, Mat8, Quaternion, UnitDualQuaternion, UnitQuaternion, Vec3, Vec6,
};
use crate::error::{Error, Result};
use crate::graph::{Neighbourhood, NodeId};
use crate::linalg::{information_step, propagate_block_diag, spd_inverse, symmetrize};
use crate::mekf::{apply_pose_correction, check_covariance, pose_block_discrete, pose_innovation};

pub const BLOCK: usize = 12;
pub const FULL_BLOCK: usize = 14;

#[derive(Clone, Debug, PartialEq)]
pub struct LocalFilterState {
    layout: Neighbourhood,
    pub poses: Vec<UnitDualQuaternion>,
    pub biases: Vec<Vec6>,
    pub covariance: DMatrix<f64>,
}

impl LocalFilterState {
    pub fn new(
        layout: Neighbourhood,
        poses: Vec<UnitDualQuaternion>,
        biases: Vec<Vec6>,
        covariance: DMatrix<f64>,
    ) -> Result<Self> {
        let n = layout.len();
        if poses.len() != n || biases.len() != n {
            return Err(Error::Dimension { expected: n, got: poses.len().min(biases.len()) });
        }
        check_covariance(&covariance, BLOCK * n)?;
        Ok(LocalFilterState { layout, poses, biases, covariance })
    }

    pub fn layout(&self) -> &Neighbourhood {
        &self.layout
    }

    pub fn owner(&self) -> NodeId {
        self.layout.owner()
    }

    pub fn pose_of(&self, node: NodeId) -> Option<&UnitDualQuaternion> {
        self.layout.slot(node).map(|s| &self.poses[s])
    }

    pub fn bias_of(&self, node: NodeId) -> Option<&Vec6> {
        self.layout.slot(node).map(|s| &self.biases[s])
    }

    pub fn own_pose(&self) -> &UnitDualQuaternion {
        &self.poses[self.layout.own_slot()]
    }

    pub fn own_bias(&self) -> &Vec6 {
        &self.biases[self.layout.own_slot()]
    }

    /// The current estimates, as shared with neighbours.
    pub fn view(&self) -> PredictedView {
        PredictedView {
            layout: self.layout.clone(),
            poses: self.layout.members().iter().copied().zip(self.poses.iter().copied()).collect(),
        }
    }
}

/// A node's layout and pose estimates, sent to neighbours so they can
/// linearise their measurements about the receiver's estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedView {
    pub layout: Neighbourhood,
    pub poses: BTreeMap<NodeId, UnitDualQuaternion>,
}

/// Velocity information available to the time update, per tracked node.
#[derive(Clone, Debug, PartialEq)]
pub enum StackedVelocity {
    PoseOnly,
    Measured(Vec<Vec6>),
}

/// Stack the own velocity measurement with those received from neighbours.
pub fn stack_velocity(layout: &Neighbourhood, own: Vec6, received: &BTreeMap<NodeId, Vec6>) -> Result<StackedVelocity> {
    let mut out = Vec::with_capacity(layout.len());
    for &m in layout.members() {
        if m == layout.owner() {
            out.push(own);
        } else {
            let v = received.get(&m).ok_or(Error::MissingMessage { from: m, to: layout.owner() })?;
            out.push(*v);
        }
    }
    Ok(StackedVelocity::Measured(out))
}

/// Bias-corrected velocity estimate of every tracked node.
pub fn estimate_velocity(state: &LocalFilterState, velocity: &StackedVelocity) -> Result<Vec<DualVelocity>> {
    let n = state.layout.len();
    match velocity {
        StackedVelocity::PoseOnly => {
            Ok(state.biases.iter().map(|b| DualVelocity::zero() - DualVelocity::from_vec6(b)).collect())
        }
        StackedVelocity::Measured(m) => {
            if m.len() != n {
                return Err(Error::Dimension { expected: n, got: m.len() });
            }
            Ok(m.iter()
                .zip(&state.biases)
                .map(|(m, b)| DualVelocity::from_vec6(m) - DualVelocity::from_vec6(b))
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessNoise {
    pub q_velocity: Mat6,
    pub q_bias: Mat6,
}

pub fn time_update(
    state: &LocalFilterState,
    velocity: &StackedVelocity,
    noise: &ProcessNoise,
    dt: f64,
) -> Result<LocalFilterState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    let w = estimate_velocity(state, velocity)?;
    let q_vel = match velocity {
        StackedVelocity::PoseOnly => Mat6::zeros(),
        StackedVelocity::Measured(_) => noise.q_velocity,
    };
    let mut phi = Vec::with_capacity(w.len());
    let mut gqg = Vec::with_capacity(w.len());
    for wm in &w {
        let (p, q) = pose_block_discrete(wm, &q_vel, &noise.q_bias, dt);
        phi.push(p);
        gqg.push(q);
    }
    let mut next = state.clone();
    next.poses = state.poses.iter().zip(&w).map(|(p, wm)| p.integrate_body(wm, dt)).collect();
    next.covariance = propagate_block_diag(&state.covariance, &phi, &gqg, dt)?;
    Ok(next)
}

/// Relative attitude `q_k` in the frame of `i`, and the position of `k`
/// relative to `i` expressed in the body frame of `i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeMeasurement {
    pub attitude: UnitQuaternion,
    pub position: Vec3,
}

impl RelativeMeasurement {
    /// Noise-free relative measurement of `target` taken by `observer`.
    pub fn between(observer: &UnitDualQuaternion, target: &UnitDualQuaternion) -> Self {
        let (qi, ri) = observer.to_parts();
        let (qk, rk) = target.to_parts();
        RelativeMeasurement { attitude: qi.conj() * qk, position: qi.inverse_rotate(&(rk - ri)) }
    }
}

/// Measurements taken by one satellite in one round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeasurementSet {
    pub absolute: Option<UnitDualQuaternion>,
    pub relative: BTreeMap<NodeId, RelativeMeasurement>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementNoise {
    pub r_absolute: Mat6,
    pub r_relative: Mat6,
    /// Add the expected second-order linearisation error to relative rows.
    pub inflate_relative: bool,
}

impl MeasurementNoise {
    pub fn new(r_absolute: Mat6, r_relative: Mat6) -> Self {
        MeasurementNoise { r_absolute, r_relative, inflate_relative: false }
    }
}

/// Noise added to a relative row for the quadratic terms the linear model
/// drops. The size of the attitude discrepancy `vec(q_m) - vec(q_pred)`
/// stands in for the attitude errors, and `baseline` is the predicted
/// separation.
pub fn linearization_noise(attitude_discrepancy: f64, baseline: f64) -> Mat6 {
    let e2 = attitude_discrepancy * attitude_discrepancy;
    let att = 0.5 * e2;
    let pos = 0.5 * baseline * e2;
    Mat6::from_diagonal(&Vec6::new(att * att, att * att, att * att, pos * pos, pos * pos, pos * pos))
}

/// Jacobians of the relative attitude and position measurement of `k` by
/// `i`, with respect to the full 4-vector error quaternions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePoseJacobians {
    pub q_dqi: Mat4,
    pub q_dqk: Mat4,
    pub r_dqi: Mat4,
    pub r_dqk: Mat4,
    pub r_dpi: Mat4,
    pub r_dpk: Mat4,
}

fn istar() -> Mat4 {
    Mat4::from_diagonal(&nalgebra::Vector4::new(1.0, -1.0, -1.0, -1.0))
}

pub fn relative_pose_jacobians(observer: &UnitDualQuaternion, target: &UnitDualQuaternion) -> RelativePoseJacobians {
    let qi = *observer.real();
    let pi = *observer.dual();
    let qk = *target.real();
    let pk = *target.dual();
    let is = istar();
    let lqi_c = qi.conj().lqm();
    let rqi = qi.rqm();
    let rqi_c = qi.conj().rqm();
    let lqi = qi.lqm();
    let rqk_c = qk.conj().rqm();
    let xk = pk * qk.conj();
    let xi = pi * qi.conj();

    let q_dqi = qk.rqm() * rqi_c * is;
    let q_dqk = lqi_c * qk.lqm();
    let r_dpk = lqi_c * rqi * rqk_c * qk.lqm() * 2.0;
    let r_dqk = lqi_c * rqi * (rqk_c * pk.lqm() + pk.lqm() * rqk_c * is) * 2.0;
    let r_dqi = (rqi * xk.rqm() * rqi_c * is + lqi_c * xk.lqm() * lqi
        - rqi * xi.rqm() * rqi_c * is
        - lqi_c * xi.lqm() * lqi
        - lqi_c * rqi * rqi_c * pi.lqm()
        - lqi_c * rqi * pi.lqm() * rqi_c * is)
        * 2.0;
    let r_dpi = Mat4::identity() * -2.0;
    RelativePoseJacobians { q_dqi, q_dqk, r_dqi, r_dqk, r_dpi, r_dpk }
}

/// Drop the scalar row and column.
pub fn reduce(m: &Mat4) -> Mat3 {
    m.fixed_view::<3, 3>(1, 1).into_owned()
}

impl RelativePoseJacobians {
    fn full(q: &Mat4, rq: &Mat4, rp: &Mat4) -> Mat8 {
        let mut m = Mat8::zeros();
        m.fixed_view_mut::<4, 4>(0, 0).copy_from(&(q * 0.5));
        m.fixed_view_mut::<4, 4>(4, 0).copy_from(&(rq * 0.25));
        m.fixed_view_mut::<4, 4>(4, 4).copy_from(&(rp * 0.25));
        m
    }

    fn reduced(q: &Mat4, rq: &Mat4, rp: &Mat4) -> Mat6 {
        let mut m = Mat6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(reduce(q) * 0.5));
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(reduce(rq) * 0.25));
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&(reduce(rp) * 0.25));
        m
    }

    pub fn observer_full(&self) -> Mat8 {
        Self::full(&self.q_dqi, &self.r_dqi, &self.r_dpi)
    }

    pub fn target_full(&self) -> Mat8 {
        Self::full(&self.q_dqk, &self.r_dqk, &self.r_dpk)
    }

    pub fn observer_reduced(&self) -> Mat6 {
        Self::reduced(&self.q_dqi, &self.r_dqi, &self.r_dpi)
    }

    pub fn target_reduced(&self) -> Mat6 {
        Self::reduced(&self.q_dqk, &self.r_dqk, &self.r_dpk)
    }
}

/// Predicted relative measurement from the two pose estimates.
pub fn predict_relative(observer: &UnitDualQuaternion, target: &UnitDualQuaternion) -> (Quaternion, Vec3) {
    let m = RelativeMeasurement::between(observer, target);
    (m.attitude.into_inner(), m.position)
}

/// Residual scaling applied to relative attitude and position rows.
const REL_ATT_SCALE: f64 = 0.5;
const REL_POS_SCALE: f64 = 0.25;

/// Scaled relative residual `(vec(q_m) - vec(q_hat)) / 2`, `(r_m - r_hat) / 4`.
pub fn relative_residual(
    observer: &UnitDualQuaternion,
    target: &UnitDualQuaternion,
    meas: &RelativeMeasurement,
) -> Vec6 {
    let (q_pred, r_pred) = predict_relative(observer, target);
    let mut q_m = meas.attitude.into_inner();
    if q_m.dot(&q_pred) < 0.0 {
        q_m = -q_m;
    }
    let mut z = Vec6::zeros();
    z.fixed_rows_mut::<3>(0).copy_from(&((q_m.v - q_pred.v) * REL_ATT_SCALE));
    z.fixed_rows_mut::<3>(3).copy_from(&((meas.position - r_pred) * REL_POS_SCALE));
    z
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowBlock {
    pub node: NodeId,
    pub reduced: Mat6,
    pub full: Mat8,
}

/// One 6-row block of the stacked measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRow {
    pub z: Vec6,
    pub r: Mat6,
    pub blocks: Vec<RowBlock>,
}

pub fn absolute_row(
    node: NodeId,
    estimate: &UnitDualQuaternion,
    measured: &UnitDualQuaternion,
    r: &Mat6,
) -> MeasurementRow {
    MeasurementRow {
        z: pose_innovation(estimate, measured),
        r: *r,
        blocks: vec![RowBlock { node, reduced: Mat6::identity(), full: Mat8::identity() }],
    }
}

pub fn relative_row(
    observer: NodeId,
    target: NodeId,
    est_observer: &UnitDualQuaternion,
    est_target: &UnitDualQuaternion,
    meas: &RelativeMeasurement,
    r: &Mat6,
) -> MeasurementRow {
    let j = relative_pose_jacobians(est_observer, est_target);
    MeasurementRow {
        z: relative_residual(est_observer, est_target, meas),
        r: *r,
        blocks: vec![
            RowBlock { node: target, reduced: j.target_reduced(), full: j.target_full() },
            RowBlock { node: observer, reduced: j.observer_reduced(), full: j.observer_full() },
        ],
    }
}

/// Block-sparse stacked measurement: row slot `o` concerns the `o`-th node
/// of `layout`, and `None` rows are identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedMeasurement {
    pub layout: Neighbourhood,
    pub rows: Vec<Option<MeasurementRow>>,
}

/// Pad a reduced 6x6 covariance to 8x8 with `pad` on the scalar entries.
pub fn pad_covariance(r: &Mat6, pad: f64) -> Mat8 {
    let idx = [1, 2, 3, 5, 6, 7];
    let mut m = Mat8::zeros();
    m[(0, 0)] = pad;
    m[(4, 4)] = pad;
    for (a, &ia) in idx.iter().enumerate() {
        for (b, &ib) in idx.iter().enumerate() {
            m[(ia, ib)] = r[(a, b)];
        }
    }
    m
}

impl StackedMeasurement {
    fn col(&self, node: NodeId) -> Result<usize> {
        self.layout.slot(node).ok_or(Error::UnknownNode(node))
    }

    /// `(z, H, R)` in reduced coordinates.
    pub fn to_dense_reduced(&self) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let n = self.layout.len();
        let m = self.rows.len();
        let mut z = DVector::zeros(6 * m);
        let mut h = DMatrix::zeros(6 * m, BLOCK * n);
        let mut r = DMatrix::identity(6 * m, 6 * m);
        for (o, row) in self.rows.iter().enumerate() {
            if let Some(row) = row {
                z.rows_mut(6 * o, 6).copy_from(&row.z);
                r.view_mut((6 * o, 6 * o), (6, 6)).copy_from(&row.r);
                for b in &row.blocks {
                    let c = self.col(b.node)?;
                    h.view_mut((6 * o, BLOCK * c), (6, 6)).copy_from(&b.reduced);
                }
            }
        }
        Ok((z, h, r))
    }

    /// `(H, R)` in full coordinates with `pad` on the scalar noise entries.
    pub fn to_dense_full(&self, pad: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.layout.len();
        let m = self.rows.len();
        let mut h = DMatrix::zeros(8 * m, FULL_BLOCK * n);
        let mut r = DMatrix::identity(8 * m, 8 * m);
        for (o, row) in self.rows.iter().enumerate() {
            if let Some(row) = row {
                r.view_mut((8 * o, 8 * o), (8, 8)).copy_from(&pad_covariance(&row.r, pad));
                for b in &row.blocks {
                    let c = self.col(b.node)?;
                    h.view_mut((8 * o, FULL_BLOCK * c), (8, 8)).copy_from(&b.full);
                }
            }
        }
        Ok((h, r))
    }

    /// Information contributions, accumulated block by block.
    pub fn info_quantities(&self) -> Result<InfoQuantities> {
        self.info_quantities_padded(1.0)
    }

    pub fn info_quantities_padded(&self, pad: f64) -> Result<InfoQuantities> {
        let n = self.layout.len();
        let mut u = DVector::zeros(BLOCK * n);
        let mut u_reduced = DMatrix::zeros(BLOCK * n, BLOCK * n);
        let mut u_full = DMatrix::zeros(FULL_BLOCK * n, FULL_BLOCK * n);
        for row in self.rows.iter().flatten() {
            let w = spd_inverse(&DMatrix::from_column_slice(6, 6, row.r.as_slice()), "measurement noise")?;
            let w = Mat6::from_column_slice(w.as_slice());
            let w8 = pad_covariance(&row.r, pad).try_inverse().ok_or(Error::Singular("padded measurement noise"))?;
            let wz = w * row.z;
            for a in &row.blocks {
                let ca = self.col(a.node)?;
                let contrib = a.reduced.transpose() * wz;
                let mut seg = u.rows_mut(BLOCK * ca, 6);
                seg += contrib;
                let at_w = a.reduced.transpose() * w;
                let at_w8 = a.full.transpose() * w8;
                for b in &row.blocks {
                    let cb = self.col(b.node)?;
                    let mut blk = u_reduced.view_mut((BLOCK * ca, BLOCK * cb), (6, 6));
                    blk += at_w * b.reduced;
                    let mut blk8 = u_full.view_mut((FULL_BLOCK * ca, FULL_BLOCK * cb), (8, 8));
                    blk8 += at_w8 * b.full;
                }
            }
        }
        symmetrize(&mut u_reduced);
        symmetrize(&mut u_full);
        Ok(InfoQuantities { u, u_reduced, u_full })
    }
}

/// `u = H^T R^-1 z`, `U_red = H^T R^-1 H` (reduced) and its full counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoQuantities {
    pub u: DVector<f64>,
    pub u_reduced: DMatrix<f64>,
    pub u_full: DMatrix<f64>,
}

impl InfoQuantities {
    pub fn zeros(n_nodes: usize) -> Self {
        InfoQuantities {
            u: DVector::zeros(BLOCK * n_nodes),
            u_reduced: DMatrix::zeros(BLOCK * n_nodes, BLOCK * n_nodes),
            u_full: DMatrix::zeros(FULL_BLOCK * n_nodes, FULL_BLOCK * n_nodes),
        }
    }

    pub fn accumulate(&mut self, other: &InfoQuantities) -> Result<()> {
        if other.u.len() != self.u.len() {
            return Err(Error::Dimension { expected: self.u.len(), got: other.u.len() });
        }
        self.u += &other.u;
        self.u_reduced += &other.u_reduced;
        self.u_full += &other.u_full;
        Ok(())
    }
}

/// Stack the measurements of `observer` into the layout of `view`,
/// linearised about the estimates in `view`.
///
/// Rows for nodes the observer did not measure are left empty.
pub fn assemble_measurement_for(
    observer: &Neighbourhood,
    meas: &MeasurementSet,
    noise: &MeasurementNoise,
    view: &PredictedView,
) -> Result<StackedMeasurement> {
    let i = observer.owner();
    if !observer.contains(view.layout.owner()) {
        return Err(Error::NotAdjacent(i, view.layout.owner()));
    }
    for &k in meas.relative.keys() {
        if k == i || !observer.contains(k) {
            return Err(Error::NotAdjacent(i, k));
        }
    }
    let est = |node: NodeId| view.poses.get(&node).ok_or(Error::UnknownNode(node));
    let mut rows = Vec::with_capacity(view.layout.len());
    for &n in view.layout.members() {
        let row = if n == i {
            match &meas.absolute {
                Some(m) => Some(absolute_row(i, est(i)?, m, &noise.r_absolute)),
                None => None,
            }
        } else if let Some(rel) = meas.relative.get(&n) {
            let mut row = relative_row(i, n, est(i)?, est(n)?, rel, &noise.r_relative);
            if noise.inflate_relative {
                let discrepancy = 2.0 * row.z.fixed_rows::<3>(0).norm();
                let baseline = predict_relative(est(i)?, est(n)?).1.norm();
                row.r += linearization_noise(discrepancy, baseline);
            }
            Some(row)
        } else {
            None
        };
        rows.push(row);
    }
    Ok(StackedMeasurement { layout: view.layout.clone(), rows })
}

/// The node's own measurements stacked against its own estimates.
pub fn assemble_measurement(
    state: &LocalFilterState,
    meas: &MeasurementSet,
    noise: &MeasurementNoise,
) -> Result<StackedMeasurement> {
    assemble_measurement_for(&state.layout, meas, noise, &state.view())
}

/// Correct every tracked pose and bias with `Delta x = M u`.
pub fn measurement_update(
    state: &LocalFilterState,
    u: &DVector<f64>,
    u_reduced: &DMatrix<f64>,
) -> Result<LocalFilterState> {
    let (dx, m) = information_step(&state.covariance, u, u_reduced)?;
    let mut next = state.clone();
    for s in 0..state.layout.len() {
        let d = dx.fixed_rows::<12>(BLOCK * s);
        next.poses[s] = apply_pose_correction(&state.poses[s], &d.fixed_rows::<6>(0).into_owned())?;
        next.biases[s] += d.fixed_rows::<6>(6);
    }
    next.covariance = m;
    Ok(next)
}

/// Absolute pose implied by the relative measurements and the neighbours'
/// predicted poses, for satellites without an absolute sensor.
pub fn synthesize_absolute_pose(state: &LocalFilterState, meas: &MeasurementSet) -> Result<UnitDualQuaternion> {
    if meas.relative.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "node {} has no relative measurements to synthesise a pose from",
            state.owner()
        )));
    }
    let mut attitudes = Vec::with_capacity(meas.relative.len());
    let mut position = Vec3::zeros();
    for (&k, rel) in &meas.relative {
        let (qk, rk) = state.pose_of(k).ok_or(Error::UnknownNode(k))?.to_parts();
        let qi = (qk * rel.attitude.conj()).renormalize();
        position += rk - qi.rotate(&rel.position);
        attitudes.push(qi);
    }
    position /= meas.relative.len() as f64;
    let q = crate::algebra::quat_average(&attitudes)?;
    Ok(UnitDualQuaternion::from_parts(&q, &position))
}

/// Reduced-coordinate derivative of the relative position with respect to the
/// observer's attitude error, `2 [r x]`.
pub fn observer_attitude_sensitivity(r_body: &Vec3) -> Mat3 {
    skew(r_body) * 2.0
}
