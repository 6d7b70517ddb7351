//! Single-satellite dual-quaternion multiplicative EKF in information form.

use nalgebra::{DMatrix, DVector};

use crate::algebra::{skew, DualVelocity, Mat3, Mat6, UnitDualQuaternion, Vec3, Vec6};
use crate::error::{Error, Result};
use crate::linalg::{information_step, propagate_block_diag, spd_inverse, symmetrize};

/// Which velocity information a satellite has on board.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SensorScenario {
    /// Pose measurements only; the velocity estimate is minus the dual bias.
    PoseOnly,
    /// Biased angular and linear velocity measurements.
    PoseAndVelocity,
    /// Gyro and accelerometer; the linear velocity is carried by its bias.
    PoseAndImu,
}

impl SensorScenario {
    pub fn state_dim(self) -> usize {
        match self {
            SensorScenario::PoseAndImu => 15,
            _ => 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleNoise {
    /// Velocity measurement noise (angular, linear).
    pub q_velocity: Mat6,
    /// Dual bias random walk (angular, linear).
    pub q_bias: Mat6,
    pub q_accel: Mat3,
    pub q_accel_bias: Mat3,
    /// Pose measurement noise on the reduced error.
    pub r: Mat6,
    /// IMU location in the body frame.
    pub imu_offset: Vec3,
}

impl SingleNoise {
    pub fn new(q_velocity: Mat6, q_bias: Mat6, r: Mat6) -> Self {
        SingleNoise {
            q_velocity,
            q_bias,
            q_accel: Mat3::zeros(),
            q_accel_bias: Mat3::zeros(),
            r,
            imu_offset: Vec3::zeros(),
        }
    }
}

/// Inputs used by the time update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VelocityInput {
    None,
    DualVelocity(DualVelocity),
    Imu { angular_rate: Vec3, specific_force: Vec3 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleFilterState {
    pub pose: UnitDualQuaternion,
    pub dual_bias: Vec6,
    pub accel_bias: Vec3,
    pub covariance: DMatrix<f64>,
}

/// `h(x) = x`-type measurement update: `Delta x = M (u - U x_hat)`.
///
/// Returns the correction and the posterior covariance `M`.
pub fn info_update(
    x_hat: &DVector<f64>,
    p: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    z: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = p.nrows();
    if h.ncols() != n || x_hat.len() != n {
        return Err(Error::Dimension { expected: n, got: h.ncols() });
    }
    if h.nrows() != z.len() || r.nrows() != z.len() {
        return Err(Error::Dimension { expected: h.nrows(), got: z.len() });
    }
    let w = spd_inverse(r, "measurement noise")?;
    let htw = h.transpose() * w;
    let u = &htw * z;
    let mut u_mat = &htw * h;
    symmetrize(&mut u_mat);
    let rhs = u - &u_mat * x_hat;
    information_step(p, &rhs, &u_mat)
}

/// Continuous-time Jacobians of the 12-state error dynamics at `w_hat`.
pub fn error_jacobians(w_hat: &DualVelocity) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut f = DMatrix::zeros(12, 12);
    f.view_mut((0, 0), (6, 6)).copy_from(&(-w_hat.cross_matrix6()));
    f.view_mut((0, 6), (6, 6)).copy_from(&(-0.5 * Mat6::identity()));
    let mut g = DMatrix::zeros(12, 12);
    g.view_mut((0, 0), (6, 6)).copy_from(&(-0.5 * Mat6::identity()));
    g.view_mut((6, 6), (6, 6)).copy_from(&Mat6::identity());
    (f, g)
}

/// Discrete transition `I + F dt` and noise `G Q G^T` of one pose/bias block.
pub(crate) fn pose_block_discrete(
    w_hat: &DualVelocity,
    q_velocity: &Mat6,
    q_bias: &Mat6,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (f, g) = error_jacobians(w_hat);
    let phi = DMatrix::identity(12, 12) + f * dt;
    let mut q = DMatrix::zeros(12, 12);
    q.view_mut((0, 0), (6, 6)).copy_from(q_velocity);
    q.view_mut((6, 6), (6, 6)).copy_from(q_bias);
    let gqg = &g * q * g.transpose();
    (phi, gqg)
}

/// Continuous-time Jacobians of the 15-state accelerometer variant.
pub fn imu_jacobians(w: &Vec3, v: &Vec3, b_v: &Vec3, offset: &Vec3) -> (DMatrix<f64>, DMatrix<f64>) {
    let wx = skew(w);
    let coupling = -skew(b_v) + skew(&w.cross(offset)) + wx * skew(offset);
    let mut f = DMatrix::zeros(15, 15);
    let put = |m: &mut DMatrix<f64>, r: usize, c: usize, blk: &Mat3| {
        m.view_mut((3 * r, 3 * c), (3, 3)).copy_from(blk);
    };
    let half = Mat3::identity() * 0.5;
    put(&mut f, 0, 0, &-wx);
    put(&mut f, 0, 2, &-half);
    put(&mut f, 1, 0, &-skew(v));
    put(&mut f, 1, 1, &-wx);
    put(&mut f, 1, 3, &-half);
    put(&mut f, 3, 2, &coupling);
    put(&mut f, 3, 3, &-wx);
    put(&mut f, 3, 4, &Mat3::identity());
    let mut g = DMatrix::zeros(15, 15);
    g.view_mut((0, 0), (6, 6)).copy_from(&(-0.5 * Mat6::identity()));
    g.view_mut((6, 6), (9, 9)).copy_from(&DMatrix::identity(9, 9));
    put(&mut g, 3, 0, &coupling);
    (f, g)
}

/// Reduced innovation `vec6(q_hat* q_m)`, sign-aligned with the identity.
pub(crate) fn pose_innovation(predicted: &UnitDualQuaternion, measured: &UnitDualQuaternion) -> Vec6 {
    (predicted.conj() * *measured).canonical().vec6()
}

/// Multiplicative pose correction by a reduced error.
pub(crate) fn apply_pose_correction(pose: &UnitDualQuaternion, dx: &Vec6) -> Result<UnitDualQuaternion> {
    let delta = UnitDualQuaternion::from_vec6(dx)
        .map_err(|e| Error::Diverged(format!("pose correction out of domain: {e}")))?;
    Ok((*pose * delta).renormalize())
}

pub(crate) fn check_covariance(p: &DMatrix<f64>, n: usize) -> Result<()> {
    if p.nrows() != n || p.ncols() != n {
        return Err(Error::Dimension { expected: n, got: p.nrows() });
    }
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::Diverged("non-finite covariance".into()));
    }
    if p.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("covariance"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleFilter {
    scenario: SensorScenario,
    noise: SingleNoise,
}

impl SingleFilter {
    pub fn new(scenario: SensorScenario, noise: SingleNoise) -> Result<Self> {
        if noise.r.cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("measurement noise"));
        }
        for (m, what) in [(&noise.q_velocity, "velocity noise"), (&noise.q_bias, "bias noise")] {
            if crate::linalg::min_eigenvalue(&DMatrix::from_column_slice(6, 6, m.as_slice())) < -1e-12 {
                return Err(Error::NotPositiveDefinite(what));
            }
        }
        Ok(SingleFilter { scenario, noise })
    }

    pub fn scenario(&self) -> SensorScenario {
        self.scenario
    }

    pub fn noise(&self) -> &SingleNoise {
        &self.noise
    }

    pub fn initial_state(
        &self,
        pose: UnitDualQuaternion,
        dual_bias: Vec6,
        covariance: DMatrix<f64>,
    ) -> Result<SingleFilterState> {
        check_covariance(&covariance, self.scenario.state_dim())?;
        Ok(SingleFilterState { pose, dual_bias, accel_bias: Vec3::zeros(), covariance })
    }

    /// Velocity estimate implied by the state and the current input.
    pub fn estimated_velocity(&self, state: &SingleFilterState, input: &VelocityInput) -> Result<DualVelocity> {
        let b = DualVelocity::from_vec6(&state.dual_bias);
        match (self.scenario, input) {
            (SensorScenario::PoseOnly, VelocityInput::None) => Ok(DualVelocity::zero() - b),
            (SensorScenario::PoseAndVelocity, VelocityInput::DualVelocity(m)) => Ok(*m - b),
            (SensorScenario::PoseAndImu, VelocityInput::Imu { angular_rate, .. }) => {
                Ok(DualVelocity::new(angular_rate - b.angular, -b.linear))
            }
            _ => Err(Error::InvalidArgument(format!("input {input:?} does not match scenario {:?}", self.scenario))),
        }
    }

    pub fn time_update(&self, state: &SingleFilterState, input: &VelocityInput, dt: f64) -> Result<SingleFilterState> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        let mut next = state.clone();
        let (phi, gqg) = match (self.scenario, input) {
            (SensorScenario::PoseAndImu, VelocityInput::Imu { angular_rate, specific_force }) => {
                let w = angular_rate - state.dual_bias.fixed_rows::<3>(0);
                let bv = state.dual_bias.fixed_rows::<3>(3).into_owned();
                let n_hat = specific_force - state.accel_bias;
                let r = self.noise.imu_offset;
                let bv_dot = -w.cross(&bv) - n_hat + w.cross(&w.cross(&r));
                let bv_next = bv + bv_dot * dt;
                next.dual_bias.fixed_rows_mut::<3>(3).copy_from(&bv_next);
                let v = -bv_next;
                let (f, g) = imu_jacobians(&w, &v, &bv_next, &r);
                let phi = DMatrix::identity(15, 15) + f * dt;
                let mut q = DMatrix::zeros(15, 15);
                q.view_mut((0, 0), (3, 3)).copy_from(&self.noise.q_velocity.fixed_view::<3, 3>(0, 0));
                q.view_mut((6, 6), (6, 6)).copy_from(&self.noise.q_bias);
                let qbv = q.view((9, 9), (3, 3)) + self.noise.q_accel;
                q.view_mut((9, 9), (3, 3)).copy_from(&qbv);
                q.view_mut((12, 12), (3, 3)).copy_from(&self.noise.q_accel_bias);
                let gqg = &g * q * g.transpose();
                next.pose = state.pose.integrate_body(&DualVelocity::new(w, v), dt);
                (phi, gqg)
            }
            _ => {
                let w_hat = self.estimated_velocity(state, input)?;
                next.pose = state.pose.integrate_body(&w_hat, dt);
                let q_vel = match self.scenario {
                    SensorScenario::PoseOnly => Mat6::zeros(),
                    _ => self.noise.q_velocity,
                };
                pose_block_discrete(&w_hat, &q_vel, &self.noise.q_bias, dt)
            }
        };
        next.covariance = propagate_block_diag(&state.covariance, &[phi], &[gqg], dt)?;
        Ok(next)
    }

    pub fn measurement_update(
        &self,
        state: &SingleFilterState,
        measured: &UnitDualQuaternion,
    ) -> Result<SingleFilterState> {
        let n = self.scenario.state_dim();
        let z = DVector::from_column_slice(pose_innovation(&state.pose, measured).as_slice());
        let mut h = DMatrix::zeros(6, n);
        h.view_mut((0, 0), (6, 6)).fill_with_identity();
        let r = DMatrix::from_column_slice(6, 6, self.noise.r.as_slice());
        let (dx, m) = info_update(&DVector::zeros(n), &state.covariance, &h, &r, &z)?;
        let mut next = state.clone();
        next.pose = apply_pose_correction(&state.pose, &dx.fixed_rows::<6>(0).into_owned())?;
        next.dual_bias += dx.fixed_rows::<6>(6);
        if n == 15 {
            next.accel_bias += dx.fixed_rows::<3>(12);
        }
        next.covariance = m;
        Ok(next)
    }
}
