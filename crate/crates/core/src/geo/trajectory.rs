use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{EcefPoint, GeoError};

/// Platform position and velocity at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlatformState {
    pub time: f64,
    pub position: EcefPoint,
    pub velocity: Vector3<f64>,
}

/// How positions between samples are reconstructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Linear position; velocity is the segment slope.
    #[default]
    Linear,
    /// Cubic Hermite position using the sampled velocities at both ends of the
    /// segment; velocity is its derivative.
    Hermite,
}

/// Time-ordered platform states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: Vec<PlatformState>,
    interpolation: Interpolation,
}

impl Trajectory {
    pub fn new(samples: Vec<PlatformState>, interpolation: Interpolation) -> Result<Self, GeoError> {
        if samples.len() < 2 {
            return Err(GeoError::InvalidModel(
                "a trajectory needs at least two samples".into(),
            ));
        }
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].time > w[0].time) {
                return Err(GeoError::InconsistentTrajectory { index: i + 1 });
            }
        }
        for s in &samples {
            if !s.position.is_finite() || !(s.velocity.norm() > 0.0) {
                return Err(GeoError::InvalidModel(format!(
                    "trajectory sample at t={} has an invalid position or zero velocity",
                    s.time
                )));
            }
        }
        Ok(Self {
            samples,
            interpolation,
        })
    }

    pub fn samples(&self) -> &[PlatformState] {
        &self.samples
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn start_time(&self) -> f64 {
        self.samples[0].time
    }

    pub fn end_time(&self) -> f64 {
        self.samples[self.samples.len() - 1].time
    }

    /// Time range over which states may be evaluated: the sampled span
    /// widened by one sample interval at each end.
    pub fn valid_span(&self) -> (f64, f64) {
        let n = self.samples.len();
        let first = self.samples[1].time - self.samples[0].time;
        let last = self.samples[n - 1].time - self.samples[n - 2].time;
        (self.start_time() - first, self.end_time() + last)
    }

    fn segment(&self, time: f64) -> usize {
        let idx = self.samples.partition_point(|s| s.time <= time);
        idx.saturating_sub(1).min(self.samples.len() - 2)
    }

    pub fn interpolate_state(&self, time: f64) -> Result<PlatformState, GeoError> {
        let (lo, hi) = self.valid_span();
        if !(time >= lo && time <= hi) {
            return Err(GeoError::OutOfTrackBounds { time });
        }
        let k = self.segment(time);
        let a = &self.samples[k];
        let b = &self.samples[k + 1];
        let dt = b.time - a.time;
        let u = (time - a.time) / dt;
        let pa = a.position.vector();
        let pb = b.position.vector();
        let (position, velocity) = match self.interpolation {
            Interpolation::Linear => {
                let v = (pb - pa) / dt;
                (pa + v * (time - a.time), v)
            }
            Interpolation::Hermite => {
                let (u2, u3) = (u * u, u * u * u);
                let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
                let h10 = u3 - 2.0 * u2 + u;
                let h01 = -2.0 * u3 + 3.0 * u2;
                let h11 = u3 - u2;
                let p = pa * h00 + a.velocity * (h10 * dt) + pb * h01 + b.velocity * (h11 * dt);
                let d00 = 6.0 * u2 - 6.0 * u;
                let d10 = 3.0 * u2 - 4.0 * u + 1.0;
                let d01 = -6.0 * u2 + 6.0 * u;
                let d11 = 3.0 * u2 - 2.0 * u;
                let v = (pa * d00 + pb * d01) / dt + a.velocity * d10 + b.velocity * d11;
                (p, v)
            }
        };
        Ok(PlatformState {
            time,
            position: position.into(),
            velocity,
        })
    }
}
