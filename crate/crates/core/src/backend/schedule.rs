use serde::{Deserialize, Serialize};

/// Discrete forward-noising schedule with `t_max` timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end` (inclusive).
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(t_max >= 1, "schedule needs at least one timestep");
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bars }
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `sqrt(alpha_bar_t)`: signal scale of `x_t`.
    pub fn signal(&self, t: usize) -> f64 {
        self.alpha_bars[t].sqrt()
    }

    /// `sqrt(1 - alpha_bar_t)`: noise scale of `x_t`.
    pub fn noise(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t]).sqrt()
    }

    /// Deterministic (eta = 0) DDIM update from timestep `t` to `t - 1`.
    pub fn ddim_step(&self, x: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
        debug_assert!(t >= 1);
        let (sa, sb) = (self.signal(t), self.noise(t));
        let (sa_prev, sb_prev) = (self.signal(t - 1), self.noise(t - 1));
        x.iter()
            .zip(eps)
            .map(|(xi, ei)| {
                let x0 = (xi - sb * ei) / sa;
                sa_prev * x0 + sb_prev * ei
            })
            .collect()
    }
}
