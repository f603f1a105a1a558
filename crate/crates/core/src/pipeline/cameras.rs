use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::render::{Camera, SphericalPose};

/// Radius of the ball around the origin that rays must cover.
pub const SCENE_BOUND: f64 = 1.0;

/// Where training cameras are drawn from. Angles are in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraPolicy {
    pub reference_fraction: f64,
    pub radius: [f64; 2],
    pub polar_deg: [f64; 2],
    pub azimuth_deg: [f64; 2],
}

impl Default for CameraPolicy {
    fn default() -> Self {
        Self {
            reference_fraction: 0.25,
            radius: [1.5, 2.2],
            polar_deg: [60.0, 120.0],
            azimuth_deg: [0.0, 360.0],
        }
    }
}

impl CameraPolicy {
    pub fn with_reference_fraction(mut self, fraction: f64) -> Self {
        self.reference_fraction = fraction;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !(0.0..=1.0).contains(&self.reference_fraction) {
            return Err(format!("reference_fraction {} outside [0, 1]", self.reference_fraction));
        }
        if !ordered(self.radius) || self.radius[0] <= SCENE_BOUND {
            return Err(format!("radius range {:?} must be ordered and exceed {SCENE_BOUND}", self.radius));
        }
        if !ordered(self.polar_deg) || self.polar_deg[0] <= 0.0 || self.polar_deg[1] >= 180.0 {
            return Err(format!("polar range {:?} must be ordered within (0, 180)", self.polar_deg));
        }
        if !ordered(self.azimuth_deg) {
            return Err(format!("azimuth range {:?} must be ordered", self.azimuth_deg));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

/// Draws a training camera with the reference camera's field of view and
/// resolution. Returns whether the reference camera itself was chosen.
pub fn sample_camera<R: Rng + ?Sized>(policy: &CameraPolicy, reference: &Camera, rng: &mut R) -> (Camera, bool) {
    // always consume the same number of draws so streams stay aligned
    let pick_reference = rng.gen::<f64>() < policy.reference_fraction;
    let radius = uniform(rng, policy.radius);
    let polar = uniform(rng, policy.polar_deg).to_radians();
    let azimuth = uniform(rng, policy.azimuth_deg).to_radians();
    if pick_reference {
        return (*reference, true);
    }
    let pose = SphericalPose::new(radius, polar, azimuth);
    let camera = Camera::orbit(pose, reference.fov_y, reference.width, SCENE_BOUND)
        .expect("validated policy yields valid cameras");
    (camera, false)
}

/// `count` cameras evenly spaced in azimuth, offset by half a step from the
/// reference azimuth so none coincides with it.
pub fn held_out_cameras(reference: &Camera, count: usize, polar: f64) -> Vec<Camera> {
    (0..count)
        .map(|k| {
            let azimuth = reference.pose.azimuth + 2.0 * PI * (k as f64 + 0.5) / count as f64;
            let pose = SphericalPose::new(reference.pose.radius, polar, azimuth);
            Camera::orbit(pose, reference.fov_y, reference.width, SCENE_BOUND).expect("valid orbit camera")
        })
        .collect()
}

/// `count` cameras evenly spaced in azimuth starting at the reference view.
pub fn orbit_cameras(reference: &Camera, count: usize) -> Vec<Camera> {
    (0..count)
        .map(|k| {
            let azimuth = reference.pose.azimuth + 2.0 * PI * k as f64 / count as f64;
            let pose = SphericalPose::new(reference.pose.radius, reference.pose.polar, azimuth);
            Camera::orbit(pose, reference.fov_y, reference.width, SCENE_BOUND).expect("valid orbit camera")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn reference() -> Camera {
        Camera::orbit(SphericalPose::new(2.0, PI / 2.0, 0.0), 0.7, 16, SCENE_BOUND).unwrap()
    }

    #[test]
    fn fraction_one_always_returns_reference() {
        let policy = CameraPolicy::default().with_reference_fraction(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (c, is_ref) = sample_camera(&policy, &reference(), &mut rng);
            assert!(is_ref);
            assert_eq!(c, reference());
        }
    }

    #[test]
    fn collapsed_ranges_give_a_constant_camera() {
        let policy = CameraPolicy {
            reference_fraction: 0.0,
            radius: [1.8, 1.8],
            polar_deg: [70.0, 70.0],
            azimuth_deg: [40.0, 40.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let first = sample_camera(&policy, &reference(), &mut rng).0;
        for _ in 0..20 {
            assert_eq!(sample_camera(&policy, &reference(), &mut rng).0, first);
        }
        assert!((first.pose.polar - 70f64.to_radians()).abs() < 1e-15);
    }

    #[test]
    fn draws_stay_in_range() {
        let policy = CameraPolicy::default().with_reference_fraction(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (c, _) = sample_camera(&policy, &reference(), &mut rng);
            assert!((1.5..2.2).contains(&c.pose.radius));
            assert!(c.pose.polar >= 60f64.to_radians() && c.pose.polar < 120f64.to_radians());
            assert!(c.near < c.pose.radius - 0.99 && c.far > c.pose.radius + 0.99);
        }
    }

    #[test]
    fn azimuth_histogram_is_uniform() {
        // chi-squared over 20 bins; 30.14 is the 0.95 quantile at 19 degrees of freedom
        // and 36.19 the 0.99 quantile
        let policy = CameraPolicy::default().with_reference_fraction(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bins = [0usize; 20];
        let n = 10_000;
        for _ in 0..n {
            let (c, _) = sample_camera(&policy, &reference(), &mut rng);
            let u = c.pose.azimuth / (2.0 * PI);
            bins[((u * 20.0) as usize).min(19)] += 1;
        }
        let expected = n as f64 / 20.0;
        let chi2: f64 = bins.iter().map(|b| (*b as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 36.19, "chi2 {chi2}");
    }

    #[test]
    fn invalid_policies_rejected() {
        assert!(CameraPolicy::default().validate().is_ok());
        assert!(CameraPolicy::default().with_reference_fraction(1.5).validate().is_err());
        let mut p = CameraPolicy::default();
        p.polar_deg = [0.0, 90.0];
        assert!(p.validate().is_err());
        let mut p = CameraPolicy::default();
        p.radius = [0.8, 2.0];
        assert!(p.validate().is_err());
    }

    #[test]
    fn held_out_views_avoid_reference_azimuth() {
        let cams = held_out_cameras(&reference(), 4, 1.4);
        assert_eq!(cams.len(), 4);
        for c in cams {
            let rel = c.pose.relative_to(&reference().pose);
            assert!(rel.azimuth.abs() > 0.5);
        }
    }
}
