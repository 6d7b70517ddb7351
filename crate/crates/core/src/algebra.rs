//! Quaternion and dual-quaternion algebra.
//!
//! Quaternions are scalar-first. Dual quaternions are stored as a real and a
//! dual quaternion and flatten to `(real || dual)` 8-vectors. Rotations act as
//! `v -> q v q*`, so `rotation_matrix(a * b) = rotation_matrix(a) * rotation_matrix(b)`.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Matrix4, SMatrix, SVector, SymmetricEigen, Vector3, Vector4};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec4 = Vector4<f64>;
pub type Vec6 = SVector<f64, 6>;
pub type Vec8 = SVector<f64, 8>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;
pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Mat8 = SMatrix<f64, 8, 8>;

/// Slack allowed on unit-norm and unit-ball checks.
pub const UNIT_TOL: f64 = 1e-9;
const BALL_SLACK: f64 = 1e-12;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Scalar part for a unit quaternion with vector part `v`.
pub fn recover_scalar(v: &Vec3) -> Result<f64> {
    let n2 = v.norm_squared();
    if n2.sqrt() > 1.0 + BALL_SLACK {
        return Err(Error::OutsideUnitBall(n2.sqrt()));
    }
    Ok((1.0 - n2).max(0.0).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub s: f64,
    pub v: Vec3,
}

impl Quaternion {
    pub fn new(s: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { s, v: Vec3::new(x, y, z) }
    }

    pub fn from_parts(s: f64, v: Vec3) -> Self {
        Quaternion { s, v }
    }

    pub fn pure(v: Vec3) -> Self {
        Quaternion { s: 0.0, v }
    }

    pub fn identity() -> Self {
        Quaternion::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn zero() -> Self {
        Quaternion::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn from_vec4(q: &Vec4) -> Self {
        Quaternion::new(q[0], q[1], q[2], q[3])
    }

    pub fn to_vec4(&self) -> Vec4 {
        Vec4::new(self.s, self.v.x, self.v.y, self.v.z)
    }

    pub fn conj(&self) -> Self {
        Quaternion { s: self.s, v: -self.v }
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.s * other.s + self.v.dot(&other.v)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, k: f64) -> Self {
        Quaternion { s: self.s * k, v: self.v * k }
    }

    /// Quaternion cross product `(0, a x b)` of the vector parts.
    pub fn cross(&self, other: &Quaternion) -> Self {
        Quaternion::pure(self.v.cross(&other.v))
    }

    /// Left multiplication matrix: `a * b == lqm(a) * b`.
    pub fn lqm(&self) -> Mat4 {
        let mut m = Mat4::zeros();
        m[(0, 0)] = self.s;
        for i in 0..3 {
            m[(0, i + 1)] = -self.v[i];
            m[(i + 1, 0)] = self.v[i];
        }
        let blk = Mat3::identity() * self.s + skew(&self.v);
        m.fixed_view_mut::<3, 3>(1, 1).copy_from(&blk);
        m
    }

    /// Right multiplication matrix: `a * b == rqm(b) * a`.
    pub fn rqm(&self) -> Mat4 {
        let mut m = Mat4::zeros();
        m[(0, 0)] = self.s;
        for i in 0..3 {
            m[(0, i + 1)] = -self.v[i];
            m[(i + 1, 0)] = self.v[i];
        }
        let blk = Mat3::identity() * self.s - skew(&self.v);
        m.fixed_view_mut::<3, 3>(1, 1).copy_from(&blk);
        m
    }

    /// Cross-product matrix: `a.cross(b) == a.cross_matrix() * b`.
    pub fn cross_matrix(&self) -> Mat4 {
        let mut m = Mat4::zeros();
        m.fixed_view_mut::<3, 3>(1, 1).copy_from(&skew(&self.v));
        m
    }

    /// Flip the sign so that the scalar part is non-negative.
    pub fn canonical(&self) -> Self {
        if self.s < 0.0 {
            -*self
        } else {
            *self
        }
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, b: Quaternion) -> Quaternion {
        Quaternion { s: self.s * b.s - self.v.dot(&b.v), v: b.v * self.s + self.v * b.s + self.v.cross(&b.v) }
    }
}

impl Mul<f64> for Quaternion {
    type Output = Quaternion;
    fn mul(self, k: f64) -> Quaternion {
        self.scale(k)
    }
}

impl Add for Quaternion {
    type Output = Quaternion;
    fn add(self, b: Quaternion) -> Quaternion {
        Quaternion { s: self.s + b.s, v: self.v + b.v }
    }
}

impl Sub for Quaternion {
    type Output = Quaternion;
    fn sub(self, b: Quaternion) -> Quaternion {
        Quaternion { s: self.s - b.s, v: self.v - b.v }
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        Quaternion { s: -self.s, v: -self.v }
    }
}

/// A quaternion of unit norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion(Quaternion);

impl UnitQuaternion {
    pub fn new(q: Quaternion) -> Result<Self> {
        let n = q.norm();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotUnit(n));
        }
        Ok(UnitQuaternion(q))
    }

    pub fn new_normalize(q: Quaternion) -> Result<Self> {
        let n = q.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::NotUnit(n));
        }
        Ok(UnitQuaternion(q.scale(1.0 / n)))
    }

    pub fn identity() -> Self {
        UnitQuaternion(Quaternion::identity())
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        let h = 0.5 * angle;
        UnitQuaternion(Quaternion::from_parts(h.cos(), axis * (h.sin() / n)))
    }

    /// Rotation by the vector `phi` (axis times angle).
    pub fn from_rotation_vector(phi: &Vec3) -> Self {
        Self::from_axis_angle(phi, phi.norm())
    }

    /// Unit quaternion with vector part `v` and a non-negative scalar part.
    pub fn from_vector_part(v: &Vec3) -> Result<Self> {
        Ok(UnitQuaternion(Quaternion::from_parts(recover_scalar(v)?, *v)))
    }

    /// Quaternion whose rotation matrix is `m` (body to inertial).
    pub fn from_rotation_matrix(m: &Mat3) -> Result<Self> {
        let max_dev = (m.transpose() * m - Mat3::identity()).abs().max();
        if max_dev > 1e-6 || m.determinant() < 0.0 {
            return Err(Error::InvalidArgument("not a rotation matrix".into()));
        }
        let tr = m.trace();
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        Self::new_normalize(q.canonical())
    }

    pub fn quaternion(&self) -> &Quaternion {
        &self.0
    }

    pub fn into_inner(self) -> Quaternion {
        self.0
    }

    pub fn scalar(&self) -> f64 {
        self.0.s
    }

    pub fn vector(&self) -> Vec3 {
        self.0.v
    }

    pub fn conj(&self) -> Self {
        UnitQuaternion(self.0.conj())
    }

    pub fn canonical(&self) -> Self {
        UnitQuaternion(self.0.canonical())
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        let s = self.0.s;
        let v = self.0.v;
        Mat3::identity() * (s * s - v.norm_squared()) + v * v.transpose() * 2.0 + skew(&v) * (2.0 * s)
    }

    /// `q v q*`
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        (self.0 * Quaternion::pure(*v) * self.0.conj()).v
    }

    /// `q* v q`
    pub fn inverse_rotate(&self, v: &Vec3) -> Vec3 {
        (self.0.conj() * Quaternion::pure(*v) * self.0).v
    }

    /// Rotation angle in `[0, pi]` between this and `other`.
    pub fn angle_to(&self, other: &UnitQuaternion) -> f64 {
        let d = self.0.conj() * other.0;
        2.0 * d.v.norm().atan2(d.s.abs())
    }

    pub fn renormalize(&self) -> Self {
        UnitQuaternion(self.0.scale(1.0 / self.0.norm()))
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;
    fn mul(self, b: UnitQuaternion) -> UnitQuaternion {
        UnitQuaternion(self.0 * b.0)
    }
}

/// Scale the rotation carried by `q`: `(sqrt(1 - mu^2 |v|^2), mu v)`.
pub fn quat_scale_error(q: &UnitQuaternion, mu: f64) -> Result<UnitQuaternion> {
    let v = q.vector() * mu;
    UnitQuaternion::from_vector_part(&v)
}

/// Davenport q-method matrix for the attitude matrices of `qs`.
pub fn davenport_matrix(qs: &[UnitQuaternion]) -> Mat4 {
    let c: Mat3 = qs.iter().map(|q| q.rotation_matrix()).sum();
    let sigma = c.trace();
    let s = c + c.transpose();
    let z = Vec3::new(c[(2, 1)] - c[(1, 2)], c[(0, 2)] - c[(2, 0)], c[(1, 0)] - c[(0, 1)]);
    let mut k = Mat4::zeros();
    k[(0, 0)] = sigma;
    for i in 0..3 {
        k[(0, i + 1)] = z[i];
        k[(i + 1, 0)] = z[i];
    }
    k.fixed_view_mut::<3, 3>(1, 1).copy_from(&(s - Mat3::identity() * sigma));
    k
}

/// Mean attitude maximising the summed attitude-matrix agreement.
pub fn quat_average(qs: &[UnitQuaternion]) -> Result<UnitQuaternion> {
    if qs.is_empty() {
        return Err(Error::InvalidArgument("cannot average zero quaternions".into()));
    }
    let eig = SymmetricEigen::new(davenport_matrix(qs));
    let imax = eig.eigenvalues.imax();
    let top = Quaternion::from_vec4(&eig.eigenvectors.column(imax).into_owned());
    UnitQuaternion::new_normalize(top.canonical())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualQuaternion {
    pub real: Quaternion,
    pub dual: Quaternion,
}

impl DualQuaternion {
    pub fn new(real: Quaternion, dual: Quaternion) -> Self {
        DualQuaternion { real, dual }
    }

    pub fn zero() -> Self {
        DualQuaternion::new(Quaternion::zero(), Quaternion::zero())
    }

    pub fn identity() -> Self {
        DualQuaternion::new(Quaternion::identity(), Quaternion::zero())
    }

    pub fn pure(real: Vec3, dual: Vec3) -> Self {
        DualQuaternion::new(Quaternion::pure(real), Quaternion::pure(dual))
    }

    pub fn from_vec8(x: &Vec8) -> Self {
        DualQuaternion::new(Quaternion::new(x[0], x[1], x[2], x[3]), Quaternion::new(x[4], x[5], x[6], x[7]))
    }

    pub fn to_vec8(&self) -> Vec8 {
        let mut x = Vec8::zeros();
        x.fixed_rows_mut::<4>(0).copy_from(&self.real.to_vec4());
        x.fixed_rows_mut::<4>(4).copy_from(&self.dual.to_vec4());
        x
    }

    /// Vector parts of the real and dual quaternions.
    pub fn vec6(&self) -> Vec6 {
        let mut x = Vec6::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.real.v);
        x.fixed_rows_mut::<3>(3).copy_from(&self.dual.v);
        x
    }

    pub fn conj(&self) -> Self {
        DualQuaternion::new(self.real.conj(), self.dual.conj())
    }

    pub fn swap(&self) -> Self {
        DualQuaternion::new(self.dual, self.real)
    }

    pub fn scale(&self, k: f64) -> Self {
        DualQuaternion::new(self.real.scale(k), self.dual.scale(k))
    }

    pub fn cross(&self, b: &DualQuaternion) -> Self {
        DualQuaternion::new(self.real.cross(&b.real), self.dual.cross(&b.real) + self.real.cross(&b.dual))
    }

    pub fn ldqm(&self) -> Mat8 {
        block_lower(&self.real.lqm(), &self.dual.lqm())
    }

    pub fn rdqm(&self) -> Mat8 {
        block_lower(&self.real.rqm(), &self.dual.rqm())
    }

    pub fn cross_matrix(&self) -> Mat8 {
        block_lower(&self.real.cross_matrix(), &self.dual.cross_matrix())
    }

    /// Dual-number norm squared `(|real|^2, 2 real.dual)`.
    pub fn norm_squared(&self) -> (f64, f64) {
        (self.real.dot(&self.real), 2.0 * self.real.dot(&self.dual))
    }

    /// Exponential of a pure dual quaternion `a + eps b`.
    pub fn exp_pure(a: &Vec3, b: &Vec3) -> Self {
        let t2 = a.norm_squared();
        let t = t2.sqrt();
        let ab = a.dot(b);
        let (c, sinc, k) = if t < 1e-4 {
            (1.0 - t2 / 2.0 + t2 * t2 / 24.0, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, -1.0 / 3.0 + t2 / 30.0)
        } else {
            let sinc = t.sin() / t;
            (t.cos(), sinc, (t.cos() - sinc) / t2)
        };
        DualQuaternion::new(
            Quaternion::from_parts(c, a * sinc),
            Quaternion::from_parts(-sinc * ab, b * sinc + a * (k * ab)),
        )
    }
}

fn block_lower(a: &Mat4, b: &Mat4) -> Mat8 {
    let mut m = Mat8::zeros();
    m.fixed_view_mut::<4, 4>(0, 0).copy_from(a);
    m.fixed_view_mut::<4, 4>(4, 0).copy_from(b);
    m.fixed_view_mut::<4, 4>(4, 4).copy_from(a);
    m
}

impl Mul for DualQuaternion {
    type Output = DualQuaternion;
    fn mul(self, b: DualQuaternion) -> DualQuaternion {
        DualQuaternion::new(self.real * b.real, self.real * b.dual + self.dual * b.real)
    }
}

impl Add for DualQuaternion {
    type Output = DualQuaternion;
    fn add(self, b: DualQuaternion) -> DualQuaternion {
        DualQuaternion::new(self.real + b.real, self.dual + b.dual)
    }
}

impl Sub for DualQuaternion {
    type Output = DualQuaternion;
    fn sub(self, b: DualQuaternion) -> DualQuaternion {
        DualQuaternion::new(self.real - b.real, self.dual - b.dual)
    }
}

impl Neg for DualQuaternion {
    type Output = DualQuaternion;
    fn neg(self) -> DualQuaternion {
        DualQuaternion::new(-self.real, -self.dual)
    }
}

/// A rigid-body pose: unit real part orthogonal to the dual part.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitDualQuaternion(DualQuaternion);

impl UnitDualQuaternion {
    pub fn new(dq: DualQuaternion) -> Result<Self> {
        let n = dq.real.norm();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotUnit(n));
        }
        let d = dq.real.dot(&dq.dual);
        if d.abs() > UNIT_TOL {
            return Err(Error::NotOrthogonal(d));
        }
        Ok(UnitDualQuaternion(dq))
    }

    /// Project an arbitrary dual quaternion with non-zero real part onto the
    /// unit dual quaternions.
    pub fn new_normalize(dq: DualQuaternion) -> Result<Self> {
        let n = dq.real.norm();
        if !(n.is_finite() && n > 0.0) || !dq.dual.norm().is_finite() {
            return Err(Error::NotUnit(n));
        }
        let real = dq.real.scale(1.0 / n);
        let dual = dq.dual.scale(1.0 / n);
        let dual = dual - real.scale(real.dot(&dual));
        Ok(UnitDualQuaternion(DualQuaternion::new(real, dual)))
    }

    pub fn identity() -> Self {
        UnitDualQuaternion(DualQuaternion::identity())
    }

    /// Pose from attitude and inertial-frame position: `q + eps r q / 2`.
    pub fn from_parts(q: &UnitQuaternion, r_inertial: &Vec3) -> Self {
        let dual = (Quaternion::pure(*r_inertial) * *q.quaternion()).scale(0.5);
        UnitDualQuaternion(DualQuaternion::new(*q.quaternion(), dual))
    }

    /// Pose from attitude and body-frame position: `q + eps q r / 2`.
    pub fn from_parts_body(q: &UnitQuaternion, r_body: &Vec3) -> Self {
        let dual = (*q.quaternion() * Quaternion::pure(*r_body)).scale(0.5);
        UnitDualQuaternion(DualQuaternion::new(*q.quaternion(), dual))
    }

    pub fn to_parts(&self) -> (UnitQuaternion, Vec3) {
        (self.rotation(), self.position())
    }

    pub fn dual_quaternion(&self) -> &DualQuaternion {
        &self.0
    }

    pub fn into_inner(self) -> DualQuaternion {
        self.0
    }

    pub fn real(&self) -> &Quaternion {
        &self.0.real
    }

    pub fn dual(&self) -> &Quaternion {
        &self.0.dual
    }

    pub fn rotation(&self) -> UnitQuaternion {
        UnitQuaternion(self.0.real)
    }

    /// Position in the inertial frame.
    pub fn position(&self) -> Vec3 {
        (self.0.dual * self.0.real.conj()).v * 2.0
    }

    /// Position in the body frame.
    pub fn position_body(&self) -> Vec3 {
        (self.0.real.conj() * self.0.dual).v * 2.0
    }

    pub fn conj(&self) -> Self {
        UnitDualQuaternion(self.0.conj())
    }

    pub fn vec6(&self) -> Vec6 {
        self.0.vec6()
    }

    pub fn to_vec8(&self) -> Vec8 {
        self.0.to_vec8()
    }

    pub fn renormalize(&self) -> Self {
        Self::new_normalize(self.0).expect("unit dual quaternion has a non-zero real part")
    }

    /// Flip the overall sign so that the real scalar part is non-negative.
    pub fn canonical(&self) -> Self {
        if self.0.real.s < 0.0 {
            UnitDualQuaternion(-self.0)
        } else {
            *self
        }
    }

    /// Unit dual quaternion with the given real and dual vector parts.
    pub fn from_vec6(x: &Vec6) -> Result<Self> {
        let rv = Vec3::new(x[0], x[1], x[2]);
        let dv = Vec3::new(x[3], x[4], x[5]);
        let s = recover_scalar(&rv)?;
        if s <= 0.0 {
            return Err(Error::OutsideUnitBall(rv.norm()));
        }
        let ds = -rv.dot(&dv) / s;
        Ok(UnitDualQuaternion(DualQuaternion::new(Quaternion::from_parts(s, rv), Quaternion::from_parts(ds, dv))))
    }

    /// Compose with the motion generated by the body-frame dual velocity `w`
    /// held constant over `dt`: `q exp(w dt / 2)`.
    pub fn integrate_body(&self, w: &DualVelocity, dt: f64) -> Self {
        let step = DualQuaternion::exp_pure(&(w.angular * (0.5 * dt)), &(w.linear * (0.5 * dt)));
        UnitDualQuaternion(self.0 * step).renormalize()
    }
}

impl Mul for UnitDualQuaternion {
    type Output = UnitDualQuaternion;
    fn mul(self, b: UnitDualQuaternion) -> UnitDualQuaternion {
        UnitDualQuaternion(self.0 * b.0)
    }
}

/// Body-frame dual velocity `omega + eps v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualVelocity {
    pub angular: Vec3,
    pub linear: Vec3,
}

impl DualVelocity {
    pub fn new(angular: Vec3, linear: Vec3) -> Self {
        DualVelocity { angular, linear }
    }

    pub fn zero() -> Self {
        DualVelocity::new(Vec3::zeros(), Vec3::zeros())
    }

    pub fn from_vec6(x: &Vec6) -> Self {
        DualVelocity::new(x.fixed_rows::<3>(0).into_owned(), x.fixed_rows::<3>(3).into_owned())
    }

    pub fn to_vec6(&self) -> Vec6 {
        let mut x = Vec6::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.angular);
        x.fixed_rows_mut::<3>(3).copy_from(&self.linear);
        x
    }

    pub fn to_dual_quaternion(&self) -> DualQuaternion {
        DualQuaternion::pure(self.angular, self.linear)
    }

    /// 6x6 matrix of the dual cross product `w x (.)` on reduced vectors.
    pub fn cross_matrix6(&self) -> Mat6 {
        let mut m = Mat6::zeros();
        let wx = skew(&self.angular);
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&wx);
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&self.linear));
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&wx);
        m
    }
}

impl Add for DualVelocity {
    type Output = DualVelocity;
    fn add(self, b: DualVelocity) -> DualVelocity {
        DualVelocity::new(self.angular + b.angular, self.linear + b.linear)
    }
}

impl Sub for DualVelocity {
    type Output = DualVelocity;
    fn sub(self, b: DualVelocity) -> DualVelocity {
        DualVelocity::new(self.angular - b.angular, self.linear - b.linear)
    }
}
