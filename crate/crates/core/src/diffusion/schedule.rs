use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Lower and upper fraction of the schedule that SDS timesteps are drawn from.
pub const TIMESTEP_RANGE: (f64, f64) = (0.02, 0.98);

pub const LINEAR_BETA_START: f64 = 8.5e-4;
pub const LINEAR_BETA_END: f64 = 1.2e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleProfile {
    LinearBeta,
    Cosine,
}

impl FromStr for ScheduleProfile {
    type Err = DiffusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear-beta" => Ok(Self::LinearBeta),
            "cosine" => Ok(Self::Cosine),
            other => Err(DiffusionError::UnknownProfile(other.to_string())),
        }
    }
}

impl fmt::Display for ScheduleProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LinearBeta => "linear-beta",
            Self::Cosine => "cosine",
        })
    }
}

/// SDS timestep weighting w(t).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    SigmaSquared,
    Unit,
    SigmaAlpha,
}

/// Variance-preserving forward-diffusion coefficients, indexed by integer timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    profile: ScheduleProfile,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    weight: Vec<f64>,
}

fn cosine_f(x: f64) -> f64 {
    const S: f64 = 0.008;
    ((x + S) / (1.0 + S) * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

/// Cumulative signal fraction ᾱ_t for each timestep.
fn alpha_bar(num_steps: usize, profile: ScheduleProfile) -> Vec<f64> {
    let n = num_steps as f64;
    let betas: Vec<f64> = match profile {
        ScheduleProfile::LinearBeta => (0..num_steps)
            .map(|t| {
                LINEAR_BETA_START
                    + (LINEAR_BETA_END - LINEAR_BETA_START) * t as f64 / (n - 1.0)
            })
            .collect(),
        ScheduleProfile::Cosine => (0..num_steps)
            .map(|t| {
                let b = 1.0 - cosine_f((t + 1) as f64 / n) / cosine_f(t as f64 / n);
                b.min(0.999)
            })
            .collect(),
    };
    let mut acc = 1.0;
    betas
        .into_iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect()
}

pub fn build_schedule(
    num_steps: usize,
    profile: ScheduleProfile,
    weighting: Weighting,
) -> Result<NoiseSchedule, DiffusionError> {
    if num_steps < 2 {
        return Err(DiffusionError::InvalidSteps(num_steps));
    }
    let abar = alpha_bar(num_steps, profile);
    let alpha: Vec<f64> = abar.iter().map(|a| a.sqrt()).collect();
    let sigma: Vec<f64> = abar.iter().map(|a| (1.0 - a).sqrt()).collect();
    let weight = alpha
        .iter()
        .zip(&sigma)
        .map(|(a, s)| match weighting {
            Weighting::SigmaSquared => s * s,
            Weighting::Unit => 1.0,
            Weighting::SigmaAlpha => s * a,
        })
        .collect();
    Ok(NoiseSchedule {
        profile,
        alpha,
        sigma,
        weight,
    })
}

/// [`build_schedule`] with the profile given by name (`linear-beta` or `cosine`).
pub fn build_schedule_named(
    num_steps: usize,
    profile: &str,
    weighting: Weighting,
) -> Result<NoiseSchedule, DiffusionError> {
    build_schedule(num_steps, profile.parse()?, weighting)
}

impl NoiseSchedule {
    pub fn profile(&self) -> ScheduleProfile {
        self.profile
    }

    pub fn num_steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn weight(&self, t: usize) -> f64 {
        self.weight[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// `t = round(u · num_steps)` with `u ~ U(0.02, 0.98)`.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.gen_range(TIMESTEP_RANGE.0..=TIMESTEP_RANGE.1);
        let t = (u * self.num_steps() as f64).round() as usize;
        t.min(self.num_steps() - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn both() -> [NoiseSchedule; 2] {
        [
            build_schedule(1000, ScheduleProfile::LinearBeta, Weighting::SigmaSquared).unwrap(),
            build_schedule(1000, ScheduleProfile::Cosine, Weighting::SigmaSquared).unwrap(),
        ]
    }

    #[test]
    fn starts_near_identity() {
        for s in both() {
            assert!(s.alpha(0) >= 0.999, "{:?}", s.profile());
            assert!(s.sigma(0) > 0.0);
        }
    }

    #[test]
    fn variance_preserving_and_monotone() {
        for s in both() {
            for t in 0..s.num_steps() {
                let a = s.alpha(t);
                let g = s.sigma(t);
                assert!((a * a + g * g - 1.0).abs() < 1e-6);
                assert!(a > 0.0 && a <= 1.0);
                if t > 0 {
                    assert!(a <= s.alpha(t - 1));
                    assert!(g >= s.sigma(t - 1));
                }
            }
        }
    }

    #[test]
    fn linear_beta_final_alpha_bar_matches_cumulative_product() {
        let s = build_schedule(1000, ScheduleProfile::LinearBeta, Weighting::Unit).unwrap();
        // independent oracle: log-sum of (1 - β_t) with β from a fresh linspace
        let n = 1000;
        let step = (1.2e-2 - 8.5e-4) / (n as f64 - 1.0);
        let log_abar: f64 = (0..n).map(|t| (1.0 - (8.5e-4 + step * t as f64)).ln()).sum();
        let abar = s.alpha(n - 1).powi(2);
        assert!((abar - log_abar.exp()).abs() < 1e-6, "{abar} vs {}", log_abar.exp());
    }

    #[test]
    fn weighting_variants() {
        let s = build_schedule(100, ScheduleProfile::Cosine, Weighting::SigmaAlpha).unwrap();
        assert!((s.weight(40) - s.sigma(40) * s.alpha(40)).abs() < 1e-15);
        let s = build_schedule(100, ScheduleProfile::Cosine, Weighting::Unit).unwrap();
        assert_eq!(s.weight(40), 1.0);
    }

    #[test]
    fn unknown_profile_and_bad_steps() {
        assert!(matches!(
            build_schedule_named(10, "sigmoid", Weighting::Unit),
            Err(DiffusionError::UnknownProfile(_))
        ));
        assert!(build_schedule(1, ScheduleProfile::Cosine, Weighting::Unit).is_err());
    }

    #[test]
    fn timesteps_follow_truncated_uniform_law() {
        let s = build_schedule(1000, ScheduleProfile::Cosine, Weighting::Unit).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws: Vec<usize> = (0..100_000).map(|_| s.sample_timestep(&mut rng)).collect();
        assert!(*draws.iter().min().unwrap() >= 20);
        assert!(*draws.iter().max().unwrap() <= 980);
        let mean = draws.iter().sum::<usize>() as f64 / draws.len() as f64;
        assert!((mean - 500.0).abs() / 500.0 < 0.02);
        let mut again = ChaCha8Rng::seed_from_u64(42);
        assert!(draws[..50].iter().all(|t| *t == s.sample_timestep(&mut again)));
    }
}
