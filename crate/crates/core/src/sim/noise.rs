use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::algebra::{recover_scalar, Mat6, Quaternion, UnitDualQuaternion, UnitQuaternion, Vec6};
use crate::ddq::{MeasurementNoise, ProcessNoise, RelativeMeasurement};
use crate::error::{Error, Result};
use crate::linalg::block_diag;

/// Sensor and filter noise levels shared by the whole fleet.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    /// Measurement noise on the attitude and position rows.
    pub r: Mat6,
    pub q_velocity: Mat6,
    pub q_bias: Mat6,
    pub p0: DMatrix<f64>,
    /// See [`MeasurementNoise::inflate_relative`].
    pub inflate_relative: bool,
}

fn diag6(a: f64, b: f64) -> Mat6 {
    Mat6::from_diagonal(&Vec6::new(a, a, a, b, b, b))
}

impl NoiseModel {
    /// Attitude noise `1/snr`, position noise `scale/snr`.
    pub fn from_snr(snr: f64, position_scale: f64) -> Result<Self> {
        if !(snr.is_finite() && snr > 0.0) {
            return Err(Error::InvalidArgument(format!("SNR must be positive, got {snr}")));
        }
        let sq = 1.0 / snr;
        let sr = position_scale / snr;
        Ok(NoiseModel {
            r: diag6(sq * sq, sr * sr),
            q_velocity: Mat6::zeros(),
            q_bias: diag6(1e-3 / (snr * snr), 1e-1 / (snr * snr)),
            p0: default_p0(),
            inflate_relative: true,
        })
    }

    /// Noise for the asteroid scenario, from measurement variances.
    pub fn from_variances(attitude_var: f64, position_var: f64, q_bias_att: f64, q_bias_pos: f64) -> Result<Self> {
        for v in [attitude_var, position_var] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("noise variance must be positive, got {v}")));
            }
        }
        Ok(NoiseModel {
            r: diag6(attitude_var, position_var),
            q_velocity: Mat6::zeros(),
            q_bias: diag6(q_bias_att, q_bias_pos),
            p0: default_p0(),
            inflate_relative: true,
        })
    }

    pub fn measurement(&self) -> MeasurementNoise {
        MeasurementNoise { r_absolute: self.r, r_relative: self.r, inflate_relative: self.inflate_relative }
    }

    pub fn process(&self) -> ProcessNoise {
        ProcessNoise { q_velocity: self.q_velocity, q_bias: self.q_bias }
    }
}

pub fn default_p0() -> DMatrix<f64> {
    block_diag(&[DMatrix::identity(6, 6) * 0.1, DMatrix::identity(6, 6) * 0.01])
}

/// Sample from `N(0, cov)`; `cov` must be positive semi-definite.
pub(crate) fn gaussian<R: Rng + ?Sized>(cov: &DMatrix<f64>, rng: &mut R) -> nalgebra::DVector<f64> {
    let n = cov.nrows();
    let e = nalgebra::DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let sqrt_l = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_l) * e
}

pub(crate) fn gaussian6<R: Rng + ?Sized>(cov: &Mat6, rng: &mut R) -> Vec6 {
    match cov.cholesky() {
        Some(c) => c.l() * Vec6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)),
        None => {
            let g = gaussian(&DMatrix::from_column_slice(6, 6, cov.as_slice()), rng);
            Vec6::from_column_slice(g.as_slice())
        }
    }
}

/// Draw until the attitude part stays well inside the unit ball.
fn draw_error<R: Rng + ?Sized>(cov: &Mat6, rng: &mut R) -> Vec6 {
    loop {
        let n = gaussian6(cov, rng);
        if n.fixed_rows::<3>(0).norm() < 0.9 {
            return n;
        }
    }
}

/// `q_true (x) extend(n)` with `n ~ N(0, R)` on the reduced error.
pub fn noisy_absolute<R: Rng + ?Sized>(truth: &UnitDualQuaternion, r: &Mat6, rng: &mut R) -> UnitDualQuaternion {
    let n = draw_error(r, rng);
    let e = UnitDualQuaternion::from_vec6(&n).expect("error drawn inside the unit ball");
    (*truth * e).renormalize()
}

/// Estimate offset from the initial covariance: the estimate is
/// `truth (x) extend(-dx)` and the bias is offset by `dx_bias`.
pub fn perturbed_estimate<R: Rng + ?Sized>(
    truth: &UnitDualQuaternion,
    true_bias: &Vec6,
    p0: &DMatrix<f64>,
    rng: &mut R,
) -> (UnitDualQuaternion, Vec6) {
    loop {
        let dx = gaussian(p0, rng);
        let pose_err = Vec6::from_column_slice(&dx.as_slice()[0..6]);
        let bias_err = Vec6::from_column_slice(&dx.as_slice()[6..12]);
        if pose_err.fixed_rows::<3>(0).norm() >= 0.9 {
            continue;
        }
        let e = UnitDualQuaternion::from_vec6(&pose_err).expect("inside the unit ball");
        return ((*truth * e.conj()).renormalize(), true_bias - bias_err);
    }
}

/// Relative measurement with noise added in the filter's residual
/// coordinates: attitude vector `+ 2 n_q`, position `+ 4 n_r`.
pub fn noisy_relative<R: Rng + ?Sized>(truth: &RelativeMeasurement, r: &Mat6, rng: &mut R) -> RelativeMeasurement {
    let q = truth.attitude.canonical();
    loop {
        let n = gaussian6(r, rng);
        let v = q.vector() + n.fixed_rows::<3>(0) * 2.0;
        let Ok(s) = recover_scalar(&v) else {
            continue;
        };
        if v.norm() >= 1.0 {
            continue;
        }
        let attitude = UnitQuaternion::new_normalize(Quaternion::from_parts(s, v)).expect("non-zero quaternion");
        return RelativeMeasurement { attitude, position: truth.position + n.fixed_rows::<3>(3) * 4.0 };
    }
}
