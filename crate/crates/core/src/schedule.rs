//! Variance schedules and the closed-form forward / reverse-mean formulas.
//!
//! Timesteps are 1-indexed: valid steps are `1..=T`, and `alpha_bar(0)` is
//! defined as 1.

use crate::error::{check_len, Error, Result};

/// A discrete diffusion variance schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl Schedule {
    /// Builds a schedule from explicit betas. Reverse-process std defaults to
    /// `sigma_t = sqrt(beta_t)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "beta {b} outside (0, 1)"
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// Replaces the reverse-process standard deviations.
    pub fn with_sigmas(mut self, sigmas: Vec<f64>) -> Result<Self> {
        check_len("schedule sigmas", self.steps(), sigmas.len())?;
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidArgument("sigmas must be finite and >= 0".into()));
        }
        self.sigmas = sigmas;
        Ok(self)
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Coefficient of the noise estimate in the reverse-step mean,
    /// `beta_t / (sqrt(alpha_t) * sqrt(1 - alpha_bar_t))`.
    pub fn eps_coefficient(&self, t: usize) -> f64 {
        self.beta(t) / (self.alpha(t).sqrt() * (1.0 - self.alpha_bar(t)).sqrt())
    }
}

/// Linear beta schedule from `beta1` at `t = 1` to `beta_t` at `t = T`.
pub fn linear_schedule(steps: usize, beta1: f64, beta_t: f64) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    if !(beta1 > 0.0 && beta_t < 1.0 && beta1 <= beta_t) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta1 <= betaT < 1, got beta1={beta1}, betaT={beta_t}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta1]
    } else {
        let span = (steps - 1) as f64;
        (0..steps)
            .map(|i| beta1 + (beta_t - beta1) * i as f64 / span)
            .collect()
    };
    Schedule::from_betas(betas)
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], sched: &Schedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_len("forward_noise eps", x0.len(), eps.len())?;
    let ab = sched.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| signal * x + noise * e)
        .collect())
}

/// Mean of the reverse step `p(x_{t-1} | x_t)` given a noise estimate.
pub fn posterior_mean(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &Schedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_len("posterior_mean eps_hat", x_t.len(), eps_hat.len())?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let coef = sched.eps_coefficient(t);
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| inv_sqrt_alpha * x - coef * e)
        .collect())
}
