//! Pose tracking with a linear-quadratic regulator on the small-error model.

use nalgebra::DMatrix;

use crate::algebra::{DualVelocity, Mat3, UnitDualQuaternion, UnitQuaternion, Vec3};
use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::rigid_body::{DualForce, RigidBodyParams};

const SIGN_MAX_ITER: usize = 100;

/// Stabilising solution of `A^T P + P A - P B R^-1 B^T P + Q = 0`, via the
/// matrix sign function of the Hamiltonian.
pub fn care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let r_inv = r.clone().try_inverse().ok_or(Error::Singular("LQR input weight"))?;
    let g = b * &r_inv * b.transpose();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut z = h;
    let mut converged = false;
    for _ in 0..SIGN_MAX_ITER {
        let zi = z.clone().try_inverse().ok_or(Error::Singular("Hamiltonian iterate"))?;
        // determinant scaling speeds up the early iterations
        let det = z.determinant().abs();
        let c = if det > 0.0 && det.is_finite() { det.powf(-1.0 / (2 * n) as f64) } else { 1.0 };
        let next = (&z * c + zi / c) * 0.5;
        let delta = (&next - &z).norm() / next.norm();
        z = next;
        if delta < 1e-13 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence(SIGN_MAX_ITER));
    }
    let w11 = z.view((0, 0), (n, n)).into_owned();
    let w12 = z.view((0, n), (n, n)).into_owned();
    let w21 = z.view((n, 0), (n, n)).into_owned();
    let w22 = z.view((n, n), (n, n)).into_owned();
    let eye = DMatrix::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w12);
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w22 + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w11 + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w21));
    let mut p = lhs.svd(true, true).solve(&rhs, 1e-14).map_err(|_| Error::Singular("Riccati subspace"))?;
    symmetrize(&mut p);
    let res = a.transpose() * &p + &p * a - &p * &g * &p + q;
    let scale = 1.0 + p.norm();
    if res.norm() / scale > 1e-8 {
        return Err(Error::NoConvergence(SIGN_MAX_ITER));
    }
    Ok(p)
}

/// State feedback `u = -K e` on `e = (attitude, body position, w, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrGains {
    pub k: DMatrix<f64>,
}

impl LqrGains {
    pub fn design(params: &RigidBodyParams, state_weight: f64, input_weight: f64) -> Result<Self> {
        let mut a = DMatrix::zeros(12, 12);
        a.view_mut((0, 6), (6, 6)).fill_with_identity();
        let mut b = DMatrix::zeros(12, 6);
        let j_inv = params.inertia().try_inverse().ok_or(Error::Singular("inertia"))?;
        b.view_mut((6, 0), (3, 3)).copy_from(&j_inv);
        b.view_mut((9, 3), (3, 3)).copy_from(&(Mat3::identity() / params.mass()));
        let q = DMatrix::identity(12, 12) * state_weight;
        let r = DMatrix::identity(6, 6) * input_weight;
        let p = care(&a, &b, &q, &r)?;
        let k = r.try_inverse().ok_or(Error::Singular("LQR input weight"))? * b.transpose() * p;
        Ok(LqrGains { k })
    }
}

/// Attitude with body z towards `-position` and body x as close as possible
/// to inertial z.
pub fn pointing_attitude(position: &Vec3) -> UnitQuaternion {
    let n = position.norm();
    if n == 0.0 {
        return UnitQuaternion::identity();
    }
    let zb = -position / n;
    let mut xb = Vec3::z() - zb * zb.z;
    if xb.norm() < 1e-6 {
        xb = Vec3::x() - zb * zb.x;
    }
    let xb = xb.normalize();
    let yb = zb.cross(&xb);
    let m = Mat3::from_columns(&[xb, yb, zb]);
    UnitQuaternion::from_rotation_matrix(&m).expect("orthonormal frame")
}

/// Control towards `target` from the estimated pose and velocity.
pub fn lqr_track(
    pose: &UnitDualQuaternion,
    velocity: &DualVelocity,
    target: &UnitDualQuaternion,
    gains: &LqrGains,
) -> DualForce {
    let (q, r) = pose.to_parts();
    let (q_ref, r_ref) = target.to_parts();
    let att = (q_ref.conj() * q).canonical().vector() * 2.0;
    let pos = q.inverse_rotate(&(r - r_ref));
    let mut e = nalgebra::DVector::zeros(12);
    e.rows_mut(0, 3).copy_from(&att);
    e.rows_mut(3, 3).copy_from(&pos);
    e.rows_mut(6, 3).copy_from(&velocity.angular);
    e.rows_mut(9, 3).copy_from(&velocity.linear);
    let u = -&gains.k * e;
    DualForce::new(Vec3::new(u[0], u[1], u[2]), Vec3::new(u[3], u[4], u[5]))
}
