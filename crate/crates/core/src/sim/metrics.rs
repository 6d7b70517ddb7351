use crate::algebra::{DualVelocity, UnitDualQuaternion};

/// Estimation errors of one satellite at one instant.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorSample {
    /// Rotation angle between estimate and truth, rad.
    pub attitude: f64,
    /// Inertial position error, m.
    pub position: f64,
    /// Body angular velocity error, rad/s.
    pub angular_velocity: f64,
    /// Body linear velocity error, m/s.
    pub linear_velocity: f64,
}

impl ErrorSample {
    pub fn between(
        est_pose: &UnitDualQuaternion,
        est_vel: &DualVelocity,
        true_pose: &UnitDualQuaternion,
        true_vel: &DualVelocity,
    ) -> Self {
        ErrorSample {
            attitude: est_pose.rotation().angle_to(&true_pose.rotation()),
            position: (est_pose.position() - true_pose.position()).norm(),
            angular_velocity: (est_vel.angular - true_vel.angular).norm(),
            linear_velocity: (est_vel.linear - true_vel.linear).norm(),
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.attitude, self.position, self.angular_velocity, self.linear_velocity]
    }

    fn from_values(v: [f64; 4]) -> Self {
        ErrorSample { attitude: v[0], position: v[1], angular_velocity: v[2], linear_velocity: v[3] }
    }
}

/// Root mean square over a window of samples.
pub fn rms(samples: &[ErrorSample]) -> ErrorSample {
    let n = samples.len().max(1) as f64;
    let mut acc = [0.0; 4];
    for s in samples {
        for (a, v) in acc.iter_mut().zip(s.values()) {
            *a += v * v;
        }
    }
    ErrorSample::from_values(acc.map(|a| (a / n).sqrt()))
}

/// Linear-interpolated quantile of unsorted data.
pub fn quantile(data: &[f64], p: f64) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let mut v = data.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Quartiles of a quantity across the fleet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(data: &[f64]) -> Self {
        Quartiles { q1: quantile(data, 0.25), median: quantile(data, 0.5), q3: quantile(data, 0.75) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FleetSummary {
    pub attitude: Quartiles,
    pub position: Quartiles,
    pub angular_velocity: Quartiles,
    pub linear_velocity: Quartiles,
}

impl FleetSummary {
    /// Summarise per-satellite RMS errors.
    pub fn of(per_sat: &[ErrorSample]) -> Self {
        let col = |k: usize| per_sat.iter().map(|s| s.values()[k]).collect::<Vec<_>>();
        FleetSummary {
            attitude: Quartiles::of(&col(0)),
            position: Quartiles::of(&col(1)),
            angular_velocity: Quartiles::of(&col(2)),
            linear_velocity: Quartiles::of(&col(3)),
        }
    }

    pub fn medians(&self) -> [f64; 4] {
        [self.attitude.median, self.position.median, self.angular_velocity.median, self.linear_velocity.median]
    }
}
