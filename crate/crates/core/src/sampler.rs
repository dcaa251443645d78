//! MAP-SGD, cyclic SGD, SGLD, SGHMC and cyclical SGHMC.
//!
//! All kinds share one update convention. With `g = n∇Ũ(θ)` and step size ℓ:
//!
//! ```text
//! SGLD:          θ ← θ + (−(ℓ/2)·g + √(Tℓ)·ε)
//! SGHMC family:  m ← βm − (ℓ/2)·g + √(T(1−β)ℓ)·ε ;  θ ← θ + m
//! ```
//!
//! `map_sgd` and `snap_sgd` use the SGHMC form with the noise term dropped.
//! Noise is only injected once the position inside the current cycle reaches
//! `noise_start_frac · cycle_len`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::byol::TwinModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    MapSgd,
    SnapSgd,
    Sgld,
    Sghmc,
    Csghmc,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::MapSgd => "map_sgd",
            SamplerKind::SnapSgd => "snap_sgd",
            SamplerKind::Sgld => "sgld",
            SamplerKind::Sghmc => "sghmc",
            SamplerKind::Csghmc => "csghmc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            SamplerKind::MapSgd,
            SamplerKind::SnapSgd,
            SamplerKind::Sgld,
            SamplerKind::Sghmc,
            SamplerKind::Csghmc,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }

    /// Whether this kind ever injects Gaussian noise.
    pub fn is_stochastic(self) -> bool {
        matches!(self, SamplerKind::Sgld | SamplerKind::Sghmc | SamplerKind::Csghmc)
    }

    /// Learning-rate schedule used when the config does not override it.
    pub fn default_schedule(self) -> Schedule {
        match self {
            SamplerKind::SnapSgd | SamplerKind::Csghmc => Schedule::Cosine,
            _ => Schedule::Constant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(Schedule::Constant),
            "cosine" => Some(Schedule::Cosine),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Initial (peak) learning rate ℓ₀.
    pub lr0: f64,
    pub beta: f64,
    pub temperature: f64,
    pub cycle_len: usize,
    pub total_steps: usize,
    /// Number of pretraining samples n.
    pub n_dataset: usize,
    pub noise_start_frac: f64,
    /// Standard deviation of the isotropic Gaussian prior; `inf` disables it.
    pub prior_std: f64,
    pub schedule: Schedule,
    /// Divide the drift by T instead of multiplying the noise variance by T.
    pub temper_drift: bool,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind) -> Self {
        Self {
            kind,
            lr0: 0.2,
            beta: 0.9,
            temperature: 0.1,
            cycle_len: 50,
            total_steps: 200,
            n_dataset: 1,
            noise_start_frac: 0.8,
            prior_std: 1.0,
            schedule: kind.default_schedule(),
            temper_drift: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return fail(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.cycle_len == 0 {
            return fail("cycle_len must be at least 1".into());
        }
        if self.n_dataset == 0 {
            return fail("n_dataset must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.noise_start_frac) {
            return fail(format!(
                "noise_start_frac must lie in [0, 1], got {}",
                self.noise_start_frac
            ));
        }
        if !(self.prior_std > 0.0) {
            return fail(format!("prior_std must be positive, got {}", self.prior_std));
        }
        if self.kind == SamplerKind::MapSgd && self.schedule != Schedule::Constant {
            return fail("map_sgd uses a constant learning rate".into());
        }
        Ok(())
    }

    fn effective_schedule(&self) -> Schedule {
        if self.kind == SamplerKind::MapSgd {
            Schedule::Constant
        } else {
            self.schedule
        }
    }
}

/// Learning rate at step `k`:
/// `ℓ_k = (ℓ₀/2)·(cos(π·(k mod L)/L) + 1)` for the cosine schedule, `ℓ₀` otherwise.
pub fn cyclic_lr(cfg: &SamplerConfig, k: usize) -> Result<f64> {
    if k >= cfg.total_steps {
        return Err(Error::Contract(format!(
            "step {k} outside schedule of {} steps",
            cfg.total_steps
        )));
    }
    Ok(match cfg.effective_schedule() {
        Schedule::Constant => cfg.lr0,
        Schedule::Cosine => {
            let pos = (k % cfg.cycle_len) as f64 / cfg.cycle_len as f64;
            cfg.lr0 / 2.0 * ((std::f64::consts::PI * pos).cos() + 1.0)
        }
    })
}

/// True on the last step of each cycle. Non-cyclic kinds use the same
/// fixed interval so every method collects equally many snapshots.
pub fn should_yield(cfg: &SamplerConfig, k: usize) -> bool {
    (k + 1) % cfg.cycle_len == 0
}

/// Whether step `k` injects noise.
pub fn noise_active(cfg: &SamplerConfig, k: usize) -> bool {
    if !cfg.kind.is_stochastic() {
        return false;
    }
    let pos = (k % cfg.cycle_len) as f64;
    pos >= cfg.noise_start_frac * cfg.cycle_len as f64
}

/// Source of the standard-normal ε draws.
#[derive(Debug, Clone)]
pub enum NoiseSource {
    Gaussian(ChaCha8Rng),
    /// Test hook: the same ε vector on every step.
    Fixed(Vec<f64>),
}

impl NoiseSource {
    pub fn seeded(seed: u64) -> Self {
        NoiseSource::Gaussian(ChaCha8Rng::seed_from_u64(seed))
    }

    fn fill(&mut self, out: &mut [f64]) {
        match self {
            NoiseSource::Gaussian(rng) => {
                for v in out.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
            }
            NoiseSource::Fixed(eps) => {
                assert_eq!(eps.len(), out.len(), "fixed noise has the wrong dimension");
                out.copy_from_slice(eps);
            }
        }
    }
}

/// Momentum buffer, step counter and noise stream of one chain.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub momentum: Vec<f64>,
    step: usize,
    noise: NoiseSource,
    eps: Vec<f64>,
}

impl SamplerState {
    pub fn new(dim: usize, noise: NoiseSource) -> Self {
        Self {
            momentum: vec![0.0; dim],
            step: 0,
            noise,
            eps: vec![0.0; dim],
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Draws ε if noise is active at the current step; returns the noise scale.
    fn draw(&mut self, cfg: &SamplerConfig, variance: f64) -> Option<f64> {
        if noise_active(cfg, self.step) {
            self.noise.fill(&mut self.eps);
            Some(variance.sqrt())
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub step: usize,
    pub lr: f64,
    pub noise_active: bool,
}

fn drift_scale(cfg: &SamplerConfig, lr: f64) -> f64 {
    let scale = -(lr / 2.0) * cfg.n_dataset as f64;
    if cfg.temper_drift {
        scale / cfg.temperature
    } else {
        scale
    }
}

fn noise_temperature(cfg: &SamplerConfig) -> f64 {
    if cfg.temper_drift {
        1.0
    } else {
        cfg.temperature
    }
}

fn check_dims(params: &[f64], state: &SamplerState, grad_u: &[f64]) {
    assert_eq!(params.len(), grad_u.len(), "gradient dimension mismatch");
    assert_eq!(params.len(), state.momentum.len(), "momentum dimension mismatch");
}

/// `Δθ = −(ℓ/2)·n∇Ũ(θ) + √(Tℓ)·ε`, with `grad_u = ∇Ũ(θ)`.
pub fn sgld_step(
    params: &mut [f64],
    state: &mut SamplerState,
    grad_u: &[f64],
    lr: f64,
    cfg: &SamplerConfig,
) -> StepInfo {
    check_dims(params, state, grad_u);
    let drift = drift_scale(cfg, lr);
    let sigma = state.draw(cfg, noise_temperature(cfg) * lr);
    for (i, (theta, g)) in params.iter_mut().zip(grad_u).enumerate() {
        let d = drift * g;
        let delta = match sigma {
            Some(s) => d + s * state.eps[i],
            None => d,
        };
        *theta += delta;
    }
    advance(state, lr, sigma.is_some())
}

/// `m ← βm − (ℓ/2)·n∇Ũ(θ) + √(T(1−β)ℓ)·ε;  θ ← θ + m`.
pub fn sghmc_step(
    params: &mut [f64],
    state: &mut SamplerState,
    grad_u: &[f64],
    lr: f64,
    cfg: &SamplerConfig,
) -> StepInfo {
    check_dims(params, state, grad_u);
    let drift = drift_scale(cfg, lr);
    let sigma = state.draw(cfg, noise_temperature(cfg) * (1.0 - cfg.beta) * lr);
    for (i, (theta, g)) in params.iter_mut().zip(grad_u).enumerate() {
        let d = drift * g;
        let m = &mut state.momentum[i];
        *m = match sigma {
            Some(s) => cfg.beta * *m + d + s * state.eps[i],
            None => cfg.beta * *m + d,
        };
        *theta += *m;
    }
    advance(state, lr, sigma.is_some())
}

fn advance(state: &mut SamplerState, lr: f64, noise_active: bool) -> StepInfo {
    let info = StepInfo {
        step: state.step,
        lr,
        noise_active,
    };
    state.step += 1;
    info
}

/// A configured chain: schedule plus update rule.
#[derive(Debug, Clone)]
pub struct Sampler {
    cfg: SamplerConfig,
    state: SamplerState,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig, dim: usize, seed: u64) -> Result<Self> {
        Self::with_noise(cfg, dim, NoiseSource::seeded(seed))
    }

    pub fn with_noise(cfg: SamplerConfig, dim: usize, noise: NoiseSource) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: SamplerState::new(dim, noise),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut SamplerState {
        &mut self.state
    }

    /// One update at the current step, with the learning rate from the schedule.
    pub fn step(&mut self, params: &mut [f64], grad_u: &[f64]) -> Result<StepInfo> {
        let lr = cyclic_lr(&self.cfg, self.state.step)?;
        Ok(match self.cfg.kind {
            SamplerKind::Sgld => sgld_step(params, &mut self.state, grad_u, lr, &self.cfg),
            _ => sghmc_step(params, &mut self.state, grad_u, lr, &self.cfg),
        })
    }
}

/// Loss and `∇Ũ(θ)` over the flat online parameters: the symmetrized
/// mean-batch BYOL loss gradient plus `θ/(n·σ²)` on the encoder segment.
pub fn posterior_grad(
    model: &TwinModel,
    view_a: &Tensor,
    view_b: &Tensor,
    cfg: &SamplerConfig,
) -> Result<(f64, Vec<f64>)> {
    if view_a.rows() == 0 || view_a.is_empty() {
        return Err(Error::Contract("posterior gradient needs a non-empty batch".into()));
    }
    if !(cfg.prior_std > 0.0) {
        return Err(Error::Contract("prior_std must be positive".into()));
    }
    let (loss, mut grad) = model.loss_and_grad(view_a, view_b)?;
    add_prior_grad(&mut grad[..model.encoder_dim()], model.online.encoder.values(), cfg);
    Ok((loss, grad))
}

/// Adds `θ/(n·σ²)`, the per-sample share of `−∇log N(θ; 0, σ²I)`.
pub fn add_prior_grad(grad: &mut [f64], theta: &[f64], cfg: &SamplerConfig) {
    if cfg.prior_std.is_infinite() {
        return;
    }
    let coef = 1.0 / (cfg.n_dataset as f64 * cfg.prior_std * cfg.prior_std);
    for (g, t) in grad.iter_mut().zip(theta) {
        *g += coef * t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::byol::TwinArch;
    use crate::params::Activation;
    use rand::Rng;

    fn cfg(kind: SamplerKind) -> SamplerConfig {
        SamplerConfig::new(kind)
    }

    #[test]
    fn cosine_schedule_anchors() {
        let mut c = cfg(SamplerKind::Csghmc);
        c.lr0 = 0.2;
        assert_eq!(cyclic_lr(&c, 0).unwrap(), 0.2);
        assert_eq!(cyclic_lr(&c, 50).unwrap(), 0.2);
        assert!((cyclic_lr(&c, 25).unwrap() - 0.1).abs() < 1e-15);
        let last = cyclic_lr(&c, 49).unwrap();
        let expect = 0.1 * ((49.0 * std::f64::consts::PI / 50.0).cos() + 1.0);
        assert_eq!(last, expect);
        assert!((last / 0.2 - 0.000987).abs() < 1e-6);
        assert!(cyclic_lr(&c, 200).is_err());
        for k in 0..150 {
            assert_eq!(cyclic_lr(&c, k).unwrap(), cyclic_lr(&c, k + 50).unwrap());
            assert!(cyclic_lr(&c, k).unwrap() <= 0.2);
        }
    }

    #[test]
    fn map_sgd_is_constant() {
        let c = cfg(SamplerKind::MapSgd);
        assert!((0..200).all(|k| cyclic_lr(&c, k).unwrap() == c.lr0));
        let mut bad = c.clone();
        bad.schedule = Schedule::Cosine;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn yields_at_cycle_ends() {
        let c = cfg(SamplerKind::Csghmc);
        assert!(should_yield(&c, 49));
        assert!(!should_yield(&c, 48));
        assert_eq!((0..200).filter(|&k| should_yield(&c, k)).count(), 4);
        let m = cfg(SamplerKind::MapSgd);
        assert_eq!((0..200).filter(|&k| should_yield(&m, k)).count(), 4);
    }

    #[test]
    fn noise_gate_opens_at_eighty_percent() {
        let c = cfg(SamplerKind::Csghmc);
        assert!(!noise_active(&c, 39));
        assert!(noise_active(&c, 40));
        assert!(noise_active(&c, 49));
        assert!(!noise_active(&c, 50));
        assert!(!noise_active(&cfg(SamplerKind::SnapSgd), 45));
        assert!(!noise_active(&cfg(SamplerKind::MapSgd), 45));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(SamplerKind::Sgld);
        c.beta = 1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = cfg(SamplerKind::Sgld);
        c.noise_start_frac = 1.5;
        assert!(c.validate().is_err());
        let mut c = cfg(SamplerKind::Sgld);
        c.temperature = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_gradient_and_zero_noise_leave_params_fixed() {
        let mut c = cfg(SamplerKind::Sgld);
        c.noise_start_frac = 0.0;
        let mut s = SamplerState::new(2, NoiseSource::Fixed(vec![0.0, 0.0]));
        let mut p = vec![1.5, -2.0];
        sgld_step(&mut p, &mut s, &[0.0, 0.0], 0.01, &c);
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn momentum_coasts_without_forces() {
        let mut c = cfg(SamplerKind::Sghmc);
        c.beta = 0.5;
        let mut s = SamplerState::new(1, NoiseSource::Fixed(vec![0.0]));
        s.momentum[0] = 2.0;
        let mut p = vec![1.0];
        sghmc_step(&mut p, &mut s, &[0.0], 0.1, &c);
        assert_eq!(s.momentum[0], 1.0);
        assert_eq!(p[0], 2.0);
    }

    #[test]
    fn sghmc_with_zero_beta_is_sgld_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = cfg(SamplerKind::Sgld);
        c.beta = 0.0;
        c.noise_start_frac = 0.0;
        c.n_dataset = 37;
        for trial in 0..20 {
            let mut a: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut b = a.clone();
            let mut sa = SamplerState::new(5, NoiseSource::seeded(trial));
            let mut sb = SamplerState::new(5, NoiseSource::seeded(trial));
            sb.momentum = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for _ in 0..50 {
                let g: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
                sgld_step(&mut a, &mut sa, &g, 0.003, &c);
                sghmc_step(&mut b, &mut sb, &g, 0.003, &c);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn noiseless_csghmc_is_gradient_descent() {
        let mut c = cfg(SamplerKind::Csghmc);
        c.schedule = Schedule::Constant;
        c.beta = 0.0;
        c.noise_start_frac = 1.0;
        c.cycle_len = 1000;
        c.total_steps = 1000;
        c.n_dataset = 4;
        c.lr0 = 0.05;
        let mut s = Sampler::new(c, 2, 0).unwrap();
        let mut p = vec![1.0, -3.0];
        let mut gd = p.clone();
        for _ in 0..100 {
            let g: Vec<f64> = p.iter().map(|v| 0.5 * v).collect();
            s.step(&mut p, &g).unwrap();
            let g: Vec<f64> = gd.iter().map(|v| 0.5 * v).collect();
            for (x, gi) in gd.iter_mut().zip(&g) {
                *x -= 0.05 / 2.0 * 4.0 * gi;
            }
            assert_eq!(p, gd);
        }
    }

    fn small_model(seed: u64) -> TwinModel {
        let arch = TwinArch {
            input_dim: 3,
            encoder_hidden: vec![4],
            embed_dim: 3,
            projector_hidden: 4,
            proj_dim: 2,
            predictor_hidden: 3,
            activation: Activation::Tanh,
        };
        let mut m = TwinModel::init(arch.clone(), 0.9, seed).unwrap();
        m.target = TwinModel::init(arch, 0.9, seed + 77).unwrap().target;
        m
    }

    fn views(seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || Tensor::matrix(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        (v(), v())
    }

    #[test]
    fn prior_term_hits_encoder_only() {
        let m = small_model(3);
        let (a, b) = views(4);
        let mut c = cfg(SamplerKind::Csghmc);
        c.n_dataset = 10;
        c.prior_std = 2.0;
        let (_, with_prior) = posterior_grad(&m, &a, &b, &c).unwrap();
        c.prior_std = f64::INFINITY;
        let (_, without) = posterior_grad(&m, &a, &b, &c).unwrap();
        let enc = m.encoder_dim();
        assert_eq!(with_prior[enc..], without[enc..]);
        let theta = m.online_flat();
        for i in 0..enc {
            let expect = theta[i] / (10.0 * 4.0);
            assert!((with_prior[i] - without[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn prior_gradient_anchor_and_vanishing_limit() {
        let mut c = cfg(SamplerKind::Csghmc);
        c.prior_std = 1.0;
        c.n_dataset = 5;
        let mut g = vec![0.0, 0.0];
        add_prior_grad(&mut g, &[1.0, -2.0], &c);
        assert_eq!(g, vec![1.0 / 5.0, -2.0 / 5.0]);
        c.n_dataset = usize::MAX;
        let mut g = vec![0.0, 0.0];
        add_prior_grad(&mut g, &[1.0, -2.0], &c);
        assert!(g.iter().all(|v| v.abs() < 1e-18));
    }

    #[test]
    fn likelihood_part_matches_finite_differences() {
        let m = small_model(5);
        let (a, b) = views(6);
        let mut c = cfg(SamplerKind::Csghmc);
        c.prior_std = f64::INFINITY;
        let err = grad_check(
            |p: &[f64]| {
                let mut probe = m.clone();
                probe.set_online_flat(p)?;
                posterior_grad(&probe, &a, &b, &c)
            },
            &m.online_flat(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        let m = small_model(0);
        let empty = Tensor::matrix(0, 3, vec![]).unwrap();
        let c = cfg(SamplerKind::Csghmc);
        assert!(matches!(posterior_grad(&m, &empty, &empty, &c), Err(Error::Contract(_))));
    }
}
