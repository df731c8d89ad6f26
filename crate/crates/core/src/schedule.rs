//! Noise-schedule families and training-time samplers.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleFamily {
    /// Variance-preserving diffusion with a linear beta ramp on [0, 1].
    Diffusion,
    FlowMatching,
    TrigFlow,
}

// VP-diffusion beta range.
const BETA_MIN: f64 = 0.1;
const BETA_MAX: f64 = 20.0;

/// x_t = alpha(t) x0 + sigma(t) z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub family: ScheduleFamily,
    /// Data standard deviation, used by TrigFlow bookkeeping.
    pub sigma_d: f64,
}

impl Schedule {
    pub fn flow_matching() -> Self {
        Schedule { family: ScheduleFamily::FlowMatching, sigma_d: 1.0 }
    }

    pub fn trigflow(sigma_d: f64) -> Self {
        Schedule { family: ScheduleFamily::TrigFlow, sigma_d }
    }

    pub fn diffusion() -> Self {
        Schedule { family: ScheduleFamily::Diffusion, sigma_d: 1.0 }
    }

    pub fn t_max(&self) -> f64 {
        match self.family {
            ScheduleFamily::TrigFlow => FRAC_PI_2,
            ScheduleFamily::FlowMatching | ScheduleFamily::Diffusion => 1.0,
        }
    }

    pub fn check_domain(&self, t: f64) -> Result<()> {
        if t.is_finite() && (0.0..=self.t_max()).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain(format!("t = {t} outside [0, {}] for {:?}", self.t_max(), self.family)))
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.family {
            ScheduleFamily::FlowMatching => 1.0 - t,
            ScheduleFamily::TrigFlow => trig_cos(t),
            ScheduleFamily::Diffusion => (-0.5 * vp_integral(t)).exp(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.family {
            ScheduleFamily::FlowMatching => t,
            ScheduleFamily::TrigFlow => t.sin(),
            // sqrt(1 - exp(-B)) computed without cancellation near 0
            ScheduleFamily::Diffusion => (-(-vp_integral(t)).exp_m1()).sqrt(),
        }
    }

    /// alpha(t) x0 + sigma(t) z.
    pub fn perturb(&self, x0: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_domain(t)?;
        if x0.len() != z.len() {
            return Err(Error::Usage(format!("shape mismatch: x0 has {} entries, z has {}", x0.len(), z.len())));
        }
        let (a, s) = (self.alpha(t), self.sigma(t));
        Ok(x0.iter().zip(z).map(|(x, n)| a * x + s * n).collect())
    }

    /// Signal-to-noise ratio alpha^2 / sigma^2.
    pub fn snr(&self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        let s = self.sigma(t);
        if s <= 0.0 {
            return Err(Error::Domain(format!("SNR is infinite at t = {t}")));
        }
        let a = self.alpha(t);
        Ok((a * a) / (s * s))
    }
}

/// cos(t) with the endpoint pinned: exactly 0 at pi/2, so TrigFlow's
/// terminal state is pure noise.
pub fn trig_cos(t: f64) -> f64 {
    if t == FRAC_PI_2 {
        0.0
    } else {
        t.cos()
    }
}

fn vp_integral(t: f64) -> f64 {
    BETA_MIN * t + 0.5 * (BETA_MAX - BETA_MIN) * t * t
}

/// Log-normal-in-tan timestep sampler with optional mass at pi/2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepDistribution {
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_d: f64,
    pub max_time_prob: f64,
}

impl TimestepDistribution {
    /// Generator-side default: (0.0, 1.6) with half the GAN draws forced to pi/2.
    pub fn generator(sigma_d: f64) -> Self {
        TimestepDistribution { p_mean: 0.0, p_std: 1.6, sigma_d, max_time_prob: 0.5 }
    }

    /// Discriminator-side default: (-0.6, 1.0), no max-time mass.
    pub fn discriminator(sigma_d: f64) -> Self {
        TimestepDistribution { p_mean: -0.6, p_std: 1.0, sigma_d, max_time_prob: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_std > 0.0 && self.sigma_d > 0.0) || !self.p_mean.is_finite() {
            return Err(Error::Config(format!("invalid timestep distribution {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.max_time_prob) {
            return Err(Error::Config(format!("max_time_prob {} not in [0, 1]", self.max_time_prob)));
        }
        Ok(())
    }

    /// Draw `t = arctan(exp(tau) / sigma_d)`, ignoring the max-time mass.
    pub fn sample_base<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let normal = Normal::new(self.p_mean, self.p_std).expect("p_std must be positive and finite");
        let tau: f64 = normal.sample(rng);
        (tau.exp() / self.sigma_d).atan().clamp(f64::MIN_POSITIVE, FRAC_PI_2)
    }

    /// Draw with max-time mixing: exactly pi/2 with probability `max_time_prob`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let t = self.sample_base(rng);
        self.apply_max_time(t, rng)
    }

    /// The max-time override applied to an existing draw.
    pub fn apply_max_time<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> f64 {
        if self.max_time_prob > 0.0 && rng.random::<f64>() < self.max_time_prob {
            FRAC_PI_2
        } else {
            t
        }
    }
}

/// Free-function form of [`TimestepDistribution::sample`].
pub fn sample_t<R: Rng + ?Sized>(dist: &TimestepDistribution, rng: &mut R) -> f64 {
    dist.sample(rng)
}
