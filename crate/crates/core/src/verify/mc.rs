//! Monte Carlo check of the latent cross-entropy against its closed form.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const MC_DRAWS: usize = 1_000_000;

/// Diagonal Gaussians: the prior component `p(z|y)` and the encoder
/// `q(z|x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPair {
    pub mu_p: Vec<f64>,
    pub sigma_p: Vec<f64>,
    pub mu_q: Vec<f64>,
    pub sigma_q: Vec<f64>,
}

impl GaussianPair {
    pub fn random(j: usize, rng: &mut impl Rng) -> Self {
        let mut draw = |lo: f64, hi: f64| (0..j).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
        Self {
            mu_p: draw(-2.0, 2.0),
            sigma_p: draw(0.5, 2.0),
            mu_q: draw(-2.0, 2.0),
            sigma_q: draw(0.5, 2.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let j = self.mu_p.len();
        if j == 0 || [self.sigma_p.len(), self.mu_q.len(), self.sigma_q.len()] != [j; 3] {
            return Err(Error::InvalidArgument("gaussian pair: inconsistent dimensions".into()));
        }
        if self.sigma_p.iter().chain(&self.sigma_q).any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("gaussian pair: scales must be positive".into()));
        }
        Ok(())
    }

    /// `E_{p}[-log q(z)]` in closed form.
    pub fn cross_entropy(&self) -> f64 {
        (0..self.mu_p.len())
            .map(|j| {
                let (sp, sq) = (self.sigma_p[j], self.sigma_q[j]);
                let d = self.mu_p[j] - self.mu_q[j];
                0.5 * (2.0 * PI * sq * sq).ln() + (sp * sp + d * d) / (2.0 * sq * sq)
            })
            .sum()
    }

    fn neg_log_q(&self, z: &[f64]) -> f64 {
        z.iter()
            .enumerate()
            .map(|(j, &v)| {
                let sq = self.sigma_q[j];
                let u = (v - self.mu_q[j]) / sq;
                0.5 * (2.0 * PI).ln() + sq.ln() + 0.5 * u * u
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McReport {
    pub estimate: f64,
    pub analytic: f64,
    pub std_error: f64,
    pub draws: usize,
}

impl McReport {
    /// Distance from the closed form in standard errors.
    pub fn z_score(&self) -> f64 {
        (self.estimate - self.analytic).abs() / self.std_error
    }

    pub fn passed(&self) -> bool {
        self.z_score() <= 3.0
    }
}

/// Estimates `E_{p(z|y)}[-log q(z|x)]` from `draws` reparameterized samples.
pub fn mc_estimate_check(pair: &GaussianPair, draws: usize, rng: &mut impl Rng) -> Result<McReport> {
    pair.validate()?;
    if draws < 2 {
        return Err(Error::InvalidArgument("mc_estimate_check needs at least 2 draws".into()));
    }
    let j = pair.mu_p.len();
    let mut z = vec![0.0; j];
    // Welford running mean and variance
    let (mut mean, mut m2) = (0.0, 0.0);
    for n in 1..=draws {
        for (k, zk) in z.iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *zk = pair.mu_p[k] + pair.sigma_p[k] * e;
        }
        let v = pair.neg_log_q(&z);
        let delta = v - mean;
        mean += delta / n as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (draws - 1) as f64;
    Ok(McReport {
        estimate: mean,
        analytic: pair.cross_entropy(),
        std_error: (var / draws as f64).sqrt(),
        draws,
    })
}
