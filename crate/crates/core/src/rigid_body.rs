//! Rigid-body kinematics and dynamics in dual-quaternion form, used to
//! generate the true motion of every satellite.

use crate::algebra::{DualQuaternion, DualVelocity, Mat3, Mat8, UnitDualQuaternion, Vec3, Vec8};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RigidBodyParams {
    mass: f64,
    inertia: Mat3,
    extended: Mat8,
    extended_inv: Mat8,
}

impl RigidBodyParams {
    pub fn new(mass: f64, inertia: Mat3) -> Result<Self> {
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::InvalidArgument(format!("mass must be positive, got {mass}")));
        }
        if (inertia - inertia.transpose()).abs().max() > 1e-12 * inertia.abs().max().max(1.0) {
            return Err(Error::InvalidArgument("inertia matrix is not symmetric".into()));
        }
        if inertia.cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("inertia matrix"));
        }
        let mut extended = Mat8::zeros();
        extended[(0, 0)] = 1.0;
        extended[(4, 4)] = 1.0;
        extended.fixed_view_mut::<3, 3>(1, 1).copy_from(&(Mat3::identity() * mass));
        extended.fixed_view_mut::<3, 3>(5, 5).copy_from(&inertia);
        let extended_inv = extended.try_inverse().ok_or(Error::Singular("extended inertia"))?;
        Ok(RigidBodyParams { mass, inertia, extended, extended_inv })
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn inertia(&self) -> &Mat3 {
        &self.inertia
    }

    /// `blkdiag(1, m I, 1, J)`
    pub fn extended_inertia(&self) -> &Mat8 {
        &self.extended
    }
}

/// Body-frame torque and force.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualForce {
    pub torque: Vec3,
    pub force: Vec3,
}

impl DualForce {
    pub fn new(torque: Vec3, force: Vec3) -> Self {
        DualForce { torque, force }
    }

    pub fn zero() -> Self {
        DualForce::new(Vec3::zeros(), Vec3::zeros())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidBodyState {
    pub pose: UnitDualQuaternion,
    pub velocity: DualVelocity,
}

impl RigidBodyState {
    pub fn new(pose: UnitDualQuaternion, velocity: DualVelocity) -> Self {
        RigidBodyState { pose, velocity }
    }
}

/// `q_dot = q w / 2`, flattened.
pub fn kinematics_deriv(pose: &DualQuaternion, w: &DualVelocity) -> Vec8 {
    (*pose * w.to_dual_quaternion()).scale(0.5).to_vec8()
}

/// Time derivative of the body dual velocity under the applied dual force.
///
/// Works with the swapped momentum `m v + eps J w`, whose rate is
/// `(f + eps tau) - w x (m v + eps J w)`.
pub fn dynamics_deriv(w: &DualVelocity, params: &RigidBodyParams, u: &DualForce) -> DualVelocity {
    let ws = w.to_dual_quaternion();
    let h = DualQuaternion::from_vec8(&(params.extended * ws.swap().to_vec8()));
    let fs = DualQuaternion::pure(u.force, u.torque);
    let hdot = fs - ws.cross(&h);
    let acc = DualQuaternion::from_vec8(&(params.extended_inv * hdot.to_vec8())).swap();
    DualVelocity::new(acc.real.v, acc.dual.v)
}

/// One RK4 step with the dual force held constant; the pose is renormalised.
pub fn integrate_step(state: &RigidBodyState, params: &RigidBodyParams, u: &DualForce, dt: f64) -> RigidBodyState {
    let q0 = *state.pose.dual_quaternion();
    let w0 = state.velocity;
    let f = |q: &DualQuaternion, w: &DualVelocity| (kinematics_deriv(q, w), dynamics_deriv(w, params, u));
    let shift = |q: &DualQuaternion, dq: &Vec8, w: &DualVelocity, dw: &DualVelocity, h: f64| {
        (
            DualQuaternion::from_vec8(&(q.to_vec8() + dq * h)),
            DualVelocity::new(w.angular + dw.angular * h, w.linear + dw.linear * h),
        )
    };
    let (k1q, k1w) = f(&q0, &w0);
    let (q1, w1) = shift(&q0, &k1q, &w0, &k1w, 0.5 * dt);
    let (k2q, k2w) = f(&q1, &w1);
    let (q2, w2) = shift(&q0, &k2q, &w0, &k2w, 0.5 * dt);
    let (k3q, k3w) = f(&q2, &w2);
    let (q3, w3) = shift(&q0, &k3q, &w0, &k3w, dt);
    let (k4q, k4w) = f(&q3, &w3);
    let dq = (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (dt / 6.0);
    let dwa = (k1w.angular + k2w.angular * 2.0 + k3w.angular * 2.0 + k4w.angular) * (dt / 6.0);
    let dwl = (k1w.linear + k2w.linear * 2.0 + k3w.linear * 2.0 + k4w.linear) * (dt / 6.0);
    let pose = UnitDualQuaternion::new_normalize(DualQuaternion::from_vec8(&(q0.to_vec8() + dq)))
        .expect("RK4 step keeps a non-zero real part");
    RigidBodyState::new(pose, DualVelocity::new(w0.angular + dwa, w0.linear + dwl))
}
