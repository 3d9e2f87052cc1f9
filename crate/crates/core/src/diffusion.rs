//! Cosine-schedule diffusion over scaled box coordinates, used as the
//! baseline objective and sampler.
//!
//! Boxes map to signal space as `z = (2x - 1) * scale`. The decoder sees the
//! clamped, unmapped noisy boxes and the time `1 - tau / T`, so `t = 1` is
//! clean data in both objectives.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_to_unit, BoundingBox};

pub const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub timesteps: usize,
    /// `alpha_bar[tau]` for `tau = 0..=T`.
    pub alpha_bar: Vec<f64>,
    pub scale: f64,
}

pub fn make_cosine_schedule(timesteps: usize, scale: f64) -> Result<DiffusionSchedule> {
    if timesteps < 1 {
        return Err(Error::InvalidParameter("diffusion needs at least one timestep".into()));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter(format!("signal scale {scale} must be positive")));
    }
    let f = |tau: f64| {
        let x = (tau / timesteps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    let alpha_bar = (0..=timesteps).map(|tau| (f(tau as f64) / f0).clamp(0.0, 1.0)).collect();
    Ok(DiffusionSchedule { timesteps, alpha_bar, scale })
}

impl DiffusionSchedule {
    fn check(&self, tau: usize) -> Result<()> {
        if tau > self.timesteps {
            return Err(Error::InvalidParameter(format!("timestep {tau} outside 0..={}", self.timesteps)));
        }
        Ok(())
    }

    /// Signal coefficient `sqrt(alpha_bar)`.
    pub fn a(&self, tau: usize) -> Result<f64> {
        self.check(tau)?;
        Ok(self.alpha_bar[tau].sqrt())
    }

    /// Noise coefficient `sqrt(1 - alpha_bar)`.
    pub fn s(&self, tau: usize) -> Result<f64> {
        self.check(tau)?;
        Ok((1.0 - self.alpha_bar[tau]).sqrt())
    }

    /// Decoder time for diffusion step `tau`.
    pub fn decoder_time(&self, tau: usize) -> f64 {
        1.0 - tau as f64 / self.timesteps as f64
    }

    pub fn to_signal(&self, b: &BoundingBox) -> [f64; 4] {
        b.to_array().map(|v| (2.0 * v - 1.0) * self.scale)
    }

    /// Clamp to `[-scale, scale]`, map back to box space and clip.
    pub fn to_box(&self, z: &[f64; 4]) -> BoundingBox {
        let s = self.scale;
        clip_to_unit(&BoundingBox::from_array(z.map(|v| (v.clamp(-s, s) / s + 1.0) / 2.0)))
    }

    /// Forward corruption of clean boxes at step `tau`.
    pub fn corrupt<R: Rng>(&self, x1: &[BoundingBox], tau: usize, rng: &mut R) -> Result<Vec<[f64; 4]>> {
        let (a, s) = (self.a(tau)?, self.s(tau)?);
        Ok(x1
            .iter()
            .map(|b| {
                let z = self.to_signal(b);
                let mut out = [0.0; 4];
                for c in 0..4 {
                    let e: f64 = rng.sample(StandardNormal);
                    out[c] = a * z[c] + s * e;
                }
                out
            })
            .collect())
    }

    /// Pure noise in signal space.
    pub fn noise<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<[f64; 4]> {
        (0..n).map(|_| [(); 4].map(|_| rng.sample(StandardNormal))).collect()
    }

    /// The `S + 1` decreasing timesteps visited by an `S`-step sampler,
    /// from `T` down to `0`.
    pub fn sub_schedule(&self, steps: usize) -> Result<Vec<usize>> {
        if steps < 1 {
            return Err(Error::InvalidParameter("need at least one sampling step".into()));
        }
        Ok((0..=steps).map(|i| (self.timesteps * (steps - i) + steps / 2) / steps).collect())
    }

    /// One deterministic update from `tau` to `tau_next` given the clean
    /// prediction `x_hat` (signal space).
    pub fn ddim_update(&self, z: &[f64; 4], x_hat: &[f64; 4], tau: usize, tau_next: usize) -> Result<[f64; 4]> {
        let (a, s) = (self.a(tau)?, self.s(tau)?);
        let (a_n, s_n) = (self.a(tau_next)?, self.s(tau_next)?);
        let mut out = [0.0; 4];
        for c in 0..4 {
            out[c] = if s > 0.0 { a_n * x_hat[c] + s_n / s * (z[c] - a * x_hat[c]) } else { x_hat[c] };
        }
        Ok(out)
    }
}
