//! Closed-form Gaussian targets for checking that a chain samples
//! `exp(−U(θ)/T)` with `U(θ) = ½θᵀΛθ`, whose covariance is `T·Λ⁻¹`.

use crate::error::{Error, Result, TensorError};
use crate::sampler::{NoiseSource, Sampler, SamplerConfig, Schedule};

/// Chains are declared divergent once any coordinate exceeds this magnitude.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTarget {
    dim: usize,
    /// Row-major `dim × dim` precision matrix Λ.
    precision: Vec<f64>,
    pub temperature: f64,
}

impl QuadraticTarget {
    pub fn isotropic(dim: usize, temperature: f64) -> Self {
        let mut precision = vec![0.0; dim * dim];
        for i in 0..dim {
            precision[i * dim + i] = 1.0;
        }
        Self {
            dim,
            precision,
            temperature,
        }
    }

    /// Validates that Λ is symmetric positive definite.
    pub fn new(dim: usize, precision: Vec<f64>, temperature: f64) -> Result<Self> {
        if precision.len() != dim * dim {
            return Err(Error::Config(format!(
                "precision needs {} entries, got {}",
                dim * dim,
                precision.len()
            )));
        }
        for i in 0..dim {
            for j in 0..i {
                if (precision[i * dim + j] - precision[j * dim + i]).abs() > 1e-12 {
                    return Err(Error::Config("precision matrix is not symmetric".into()));
                }
            }
        }
        if cholesky(&precision, dim).is_none() {
            return Err(Error::Config("precision matrix is not positive definite".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self {
            dim,
            precision,
            temperature,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn energy(&self, theta: &[f64]) -> f64 {
        let g = self.apply(theta);
        0.5 * theta.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
    }

    fn apply(&self, theta: &[f64]) -> Vec<f64> {
        self.precision
            .chunks(self.dim)
            .map(|row| row.iter().zip(theta).map(|(a, b)| a * b).sum())
            .collect()
    }
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Exact `∇U = Λθ`.
pub fn quadratic_grad(target: &QuadraticTarget, theta: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != target.dim {
        return Err(TensorError::shape(
            "quadratic_grad",
            format!("theta has {} entries, target dim {}", theta.len(), target.dim),
        )
        .into());
    }
    Ok(target.apply(theta))
}

/// Post-burn-in moments of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStats {
    pub sample_count: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub lag1_autocorr: Vec<f64>,
}

impl ChainStats {
    fn from_samples(samples: &[f64], dim: usize) -> Self {
        let n = samples.len() / dim;
        let mut mean = vec![0.0; dim];
        let mut variance = vec![0.0; dim];
        let mut lag1 = vec![0.0; dim];
        for d in 0..dim {
            let col = || samples.iter().skip(d).step_by(dim);
            let m = col().sum::<f64>() / n as f64;
            let ss: f64 = col().map(|v| (v - m) * (v - m)).sum();
            let cross: f64 = col()
                .zip(col().skip(1))
                .map(|(a, b)| (a - m) * (b - m))
                .sum();
            mean[d] = m;
            variance[d] = if n > 1 { ss / (n - 1) as f64 } else { 0.0 };
            lag1[d] = if ss > 0.0 { cross / ss } else { 0.0 };
        }
        Self {
            sample_count: n,
            mean,
            variance,
            lag1_autocorr: lag1,
        }
    }
}

fn chain_config(cfg: &SamplerConfig, target: &QuadraticTarget, steps: usize) -> Result<SamplerConfig> {
    if !cfg.kind.is_stochastic() {
        return Err(Error::Config(format!(
            "{} does not inject noise and cannot sample",
            cfg.kind.name()
        )));
    }
    if cfg.noise_start_frac != 0.0 || cfg.schedule != Schedule::Constant {
        return Err(Error::Config(
            "diagnostic chains need noise on every step and a constant learning rate".into(),
        ));
    }
    let mut c = cfg.clone();
    c.total_steps = steps;
    c.n_dataset = 1;
    c.temperature = target.temperature;
    c.prior_std = f64::INFINITY;
    c.validate()?;
    Ok(c)
}

/// Runs the chain from θ = 0 and calls `visit(step, θ)` after every update.
fn drive(
    cfg: &SamplerConfig,
    target: &QuadraticTarget,
    steps: usize,
    noise: NoiseSource,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let cfg = chain_config(cfg, target, steps)?;
    let mut sampler = Sampler::with_noise(cfg, target.dim, noise)?;
    let mut theta = vec![0.0; target.dim];
    for k in 0..steps {
        let g = quadratic_grad(target, &theta)?;
        sampler.step(&mut theta, &g)?;
        if theta.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Err(Error::Divergence { step: k });
        }
        visit(k, &theta);
    }
    Ok(())
}

/// Runs `steps` updates against `target` and summarizes the draws after `burn_in`.
pub fn run_chain(
    cfg: &SamplerConfig,
    target: &QuadraticTarget,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<ChainStats> {
    if steps <= burn_in + 1 {
        return Err(Error::Config(format!(
            "steps ({steps}) must exceed burn_in ({burn_in}) by at least 2"
        )));
    }
    let mut samples = Vec::with_capacity((steps - burn_in) * target.dim);
    drive(cfg, target, steps, NoiseSource::seeded(seed), |k, theta| {
        if k >= burn_in {
            samples.extend_from_slice(theta);
        }
    })?;
    Ok(ChainStats::from_samples(&samples, target.dim))
}

/// Full trajectory, `steps × dim` row-major.
pub fn trajectory(
    cfg: &SamplerConfig,
    target: &QuadraticTarget,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(steps * target.dim);
    drive(cfg, target, steps, NoiseSource::seeded(seed), |_, theta| {
        out.extend_from_slice(theta)
    })?;
    Ok(out)
}

/// Default burn-in: 5% of the chain.
pub fn default_burn_in(steps: usize) -> usize {
    steps / 20
}
