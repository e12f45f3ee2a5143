//! DDPM noise schedules, forward diffusion, ε/v objectives, ancestral
//! sampling, conditioning perturbation and context guidance.

pub mod toy;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::{Float, Tensor};

/// Largest perturbation level drawn during interpolation training, in steps
/// of a 1000-step schedule.
pub const MAX_PERTURBATION: usize = 250;
const REFERENCE_STEPS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

/// Per-step coefficients, stored for `t = 1..=T` at index `t - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub alpha: Vec<f64>,
    pub alpha_hat: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(config_err!("schedule needs at least 2 steps, got {steps}"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(config_err!("invalid beta range [{beta_start}, {beta_end}]"));
    }
    let betas = (0..steps)
        .map(|k| beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64)
        .collect();
    let mut s = NoiseSchedule::from_betas(betas)?;
    s.config = ScheduleConfig { steps, beta_start, beta_end };
    Ok(s)
}

impl NoiseSchedule {
    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        make_schedule(c.steps, c.beta_start, c.beta_end)
    }

    /// Schedule from explicit betas; allows a single step.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return Err(config_err!("betas must lie in (0, 1]"));
        }
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_hat = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_hat.push(acc);
        }
        let sigma = alpha_hat.iter().map(|a| (1.0 - a).sqrt()).collect();
        let config = ScheduleConfig { steps: betas.len(), beta_start: betas[0], beta_end: betas[betas.len() - 1] };
        Ok(NoiseSchedule { config, alpha, alpha_hat, sigma })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// Perturbation range for this schedule: the same fraction of the chain
    /// as [`MAX_PERTURBATION`] is of a 1000-step chain.
    pub fn max_perturbation(&self) -> usize {
        (MAX_PERTURBATION * self.steps() / REFERENCE_STEPS).min(MAX_PERTURBATION)
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Bounds(format!("diffusion step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// α̂_t for `t ∈ 1..=T`; `t = 0` is the clean signal with α̂ = 1.
    pub fn alpha_hat_at(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_hat[t - 1])
    }

    pub fn beta_at(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(1.0 - self.alpha[t - 1])
    }
}

/// `sqrt(a)·x + sqrt(1 - a)·eps` for a given α̂.
pub fn diffuse_with<F: Float>(x: &Tensor<F>, eps: &Tensor<F>, alpha_hat: f64) -> Result<Tensor<F>> {
    x.scale(F::from_f64c(alpha_hat.sqrt()))
        .add(&eps.scale(F::from_f64c((1.0 - alpha_hat).sqrt())))
}

/// `z_t = sqrt(α̂_t)·x + sqrt(1 - α̂_t)·eps`.
pub fn forward_diffuse<F: Float>(x: &Tensor<F>, t: usize, eps: &Tensor<F>, s: &NoiseSchedule) -> Result<Tensor<F>> {
    s.check(t)?;
    diffuse_with(x, eps, s.alpha_hat[t - 1])
}

/// `v = sqrt(α̂)·eps - sqrt(1 - α̂)·x`.
pub fn v_from_alpha_hat<F: Float>(x: &Tensor<F>, eps: &Tensor<F>, alpha_hat: f64) -> Result<Tensor<F>> {
    eps.scale(F::from_f64c(alpha_hat.sqrt()))
        .sub(&x.scale(F::from_f64c((1.0 - alpha_hat).sqrt())))
}

pub fn v_target<F: Float>(x: &Tensor<F>, eps: &Tensor<F>, t: usize, s: &NoiseSchedule) -> Result<Tensor<F>> {
    s.check(t)?;
    v_from_alpha_hat(x, eps, s.alpha_hat[t - 1])
}

/// `ε = sqrt(α̂)·v + sqrt(1 - α̂)·z`.
pub fn eps_from_v<F: Float>(v: &Tensor<F>, z: &Tensor<F>, alpha_hat: f64) -> Result<Tensor<F>> {
    v.scale(F::from_f64c(alpha_hat.sqrt()))
        .add(&z.scale(F::from_f64c((1.0 - alpha_hat).sqrt())))
}

/// `x = sqrt(α̂)·z - sqrt(1 - α̂)·v`.
pub fn x_from_v<F: Float>(v: &Tensor<F>, z: &Tensor<F>, alpha_hat: f64) -> Result<Tensor<F>> {
    z.scale(F::from_f64c(alpha_hat.sqrt()))
        .sub(&v.scale(F::from_f64c((1.0 - alpha_hat).sqrt())))
}

fn per_chunk<F: Float>(
    x: &Tensor<F>,
    eps: &Tensor<F>,
    ts: &[usize],
    s: &NoiseSchedule,
    f: impl Fn(f64, f64, f64, f64) -> f64,
) -> Result<Tensor<F>> {
    if x.shape() != eps.shape() {
        return Err(crate::error::shape_err!("{:?} vs {:?}", x.shape(), eps.shape()));
    }
    if ts.is_empty() || x.rank() == 0 || x.dim(0) % ts.len() != 0 {
        return Err(crate::error::shape_err!("{} steps for {:?}", ts.len(), x.shape()));
    }
    let chunk = x.numel() / ts.len();
    let mut out = Vec::with_capacity(x.numel());
    for (i, &t) in ts.iter().enumerate() {
        s.check(t)?;
        let ah = s.alpha_hat[t - 1];
        let (a, b) = (ah.sqrt(), (1.0 - ah).sqrt());
        let r = i * chunk..(i + 1) * chunk;
        for (&xv, &ev) in x.data()[r.clone()].iter().zip(&eps.data()[r]) {
            out.push(F::from_f64c(f(a, b, xv.as_f64(), ev.as_f64())));
        }
    }
    Tensor::from_vec(out, x.shape())
}

/// [`forward_diffuse`] where the `i`-th equal slice along axis 0 uses step `ts[i]`.
pub fn forward_diffuse_chunks<F: Float>(x: &Tensor<F>, ts: &[usize], eps: &Tensor<F>, s: &NoiseSchedule) -> Result<Tensor<F>> {
    per_chunk(x, eps, ts, s, |a, b, x, e| a * x + b * e)
}

/// [`v_target`] with per-slice steps as in [`forward_diffuse_chunks`].
pub fn v_target_chunks<F: Float>(x: &Tensor<F>, eps: &Tensor<F>, ts: &[usize], s: &NoiseSchedule) -> Result<Tensor<F>> {
    per_chunk(x, eps, ts, s, |a, b, x, e| a * e - b * x)
}

fn finite_loss<F: Float>(loss: Tensor<F>) -> Result<Tensor<F>> {
    loss.check_finite("diffusion loss")?;
    Ok(loss)
}

/// Mean squared error between `eps` and `model(z_t)`.
pub fn eps_loss<F: Float>(
    model: impl FnOnce(&Tensor<F>) -> Result<Tensor<F>>,
    x: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    s: &NoiseSchedule,
) -> Result<Tensor<F>> {
    let z = forward_diffuse(x, t, eps, s)?;
    finite_loss(model(&z)?.mse(eps)?)
}

/// Conditioning that accompanies an interpolation forward pass.
#[derive(Clone, Debug)]
pub struct CondBundle<F: Float = f32> {
    pub c: Tensor<F>,
    pub tp: usize,
    pub s: usize,
    /// 1 keeps `c`; 0 replaces it by zeros.
    pub m: u8,
}

impl<F: Float> CondBundle<F> {
    /// The bundle as the network sees it: `c` zeroed when `m = 0`.
    pub fn effective(&self) -> Result<CondBundle<F>> {
        let c = match self.m {
            1 => self.c.clone(),
            0 => Tensor::zeros(self.c.shape()),
            m => return Err(config_err!("conditioning mask must be 0 or 1, got {m}")),
        };
        Ok(CondBundle { c, tp: self.tp, s: self.s, m: self.m })
    }
}

/// Mean squared error between the v target and `model(z_t, cond)`.
pub fn v_loss<F: Float>(
    model: impl FnOnce(&Tensor<F>, &CondBundle<F>) -> Result<Tensor<F>>,
    x: &Tensor<F>,
    t: usize,
    eps: &Tensor<F>,
    s: &NoiseSchedule,
    cond: &CondBundle<F>,
) -> Result<Tensor<F>> {
    let cond = cond.effective()?;
    let z = forward_diffuse(x, t, eps, s)?;
    let target = v_target(x, eps, t, s)?;
    finite_loss(model(&z, &cond)?.mse(&target)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameterization {
    Epsilon,
    V,
}

/// One DDPM posterior step `z_t → z_{t-1}`; noise is added only for `t > 1`.
pub fn ancestral_sample_step<R: Rng + ?Sized>(
    pred: &Tensor<f32>,
    z: &Tensor<f32>,
    t: usize,
    s: &NoiseSchedule,
    param: Parameterization,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    s.check(t)?;
    let ah = s.alpha_hat[t - 1];
    let eps = match param {
        Parameterization::Epsilon => pred.clone(),
        Parameterization::V => eps_from_v(pred, z, ah)?,
    };
    let a = s.alpha[t - 1];
    let beta = 1.0 - a;
    let coef = beta / (1.0 - ah).sqrt();
    let inv = 1.0 / a.sqrt();
    let (zd, ed) = (z.data(), eps.data());
    let mut out: Vec<f32> = zd
        .iter()
        .zip(ed)
        .map(|(&zv, &ev)| (inv * (zv as f64 - coef * ev as f64)) as f32)
        .collect();
    if t > 1 {
        let ah_prev = s.alpha_hat[t - 2];
        let std = ((1.0 - ah_prev) / (1.0 - ah) * beta).sqrt();
        let noise = Tensor::<f32>::randn(z.shape(), rng);
        for (o, &n) in out.iter_mut().zip(noise.data()) {
            *o += (std * n as f64) as f32;
        }
    }
    Tensor::from_vec(out, z.shape())
}

/// Forward-diffuses `c` to step `tp`; `tp = 0` returns `c` unchanged.
pub fn perturb_conditioning<F: Float, R: Rng + ?Sized>(
    c: &Tensor<F>,
    tp: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<F>> {
    if tp == 0 {
        return Ok(c.clone());
    }
    s.check(tp)?;
    let eps = Tensor::randn(c.shape(), rng);
    forward_diffuse(c, tp, &eps, s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w: f64,
    pub uncond_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { w: 0.25, uncond_prob: 0.1 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0) {
            return Err(config_err!("guidance weight must be >= 0, got {}", self.w));
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return Err(config_err!("uncond_prob must be in [0, 1], got {}", self.uncond_prob));
        }
        Ok(())
    }
}

/// `(1 + w)·cond - w·uncond`.
pub fn context_guidance<F: Float>(cond: &Tensor<F>, uncond: &Tensor<F>, w: f64) -> Result<Tensor<F>> {
    if w == 0.0 {
        if cond.shape() != uncond.shape() {
            return Err(crate::error::shape_err!("guidance {:?} vs {:?}", cond.shape(), uncond.shape()));
        }
        return Ok(cond.clone());
    }
    cond.scale(F::from_f64c(1.0 + w)).sub(&uncond.scale(F::from_f64c(w)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(v, &[v.len()]).unwrap()
    }

    #[test]
    fn default_schedule_ends_near_zero() {
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        // independent product in log space
        let log: f64 = (0..1000).map(|k| (1.0 - (1e-4 + (2e-2 - 1e-4) * k as f64 / 999.0)).ln()).sum();
        assert!((s.alpha_hat[999] - log.exp()).abs() < 1e-12);
        assert!(s.alpha_hat[999].sqrt() < 0.01);
        assert!(s.alpha_hat.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_hat[0] > 0.999);
    }

    #[test]
    fn two_step_schedule() {
        let s = make_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_hat, vec![0.5, 0.25]);
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_examples() {
        let x = t1(&[2.0]);
        let eps = t1(&[0.0]);
        assert_eq!(diffuse_with(&x, &eps, 0.25).unwrap().data(), &[1.0]);
        assert_eq!(diffuse_with(&x, &t1(&[5.0]), 1.0).unwrap().data(), &[2.0]);
        assert_eq!(diffuse_with(&x, &t1(&[5.0]), 0.0).unwrap().data(), &[5.0]);
        let s = make_schedule(10, 0.01, 0.2).unwrap();
        assert!(matches!(forward_diffuse(&x, 0, &eps, &s), Err(Error::Bounds(_))));
        assert!(matches!(forward_diffuse(&x, 11, &eps, &s), Err(Error::Bounds(_))));
    }

    #[test]
    fn v_examples_and_inverse() {
        let x = t1(&[1.0]);
        let e = t1(&[0.5]);
        assert_eq!(v_from_alpha_hat(&x, &e, 1.0).unwrap().data(), &[0.5]);
        assert_eq!(v_from_alpha_hat(&x, &e, 0.0).unwrap().data(), &[-1.0]);
        let v = v_from_alpha_hat(&x, &e, 0.36).unwrap();
        assert!((v.data()[0] - (0.6 * 0.5 - 0.8 * 1.0)).abs() < 1e-12);
        assert_eq!(eps_from_v(&t1(&[0.3]), &t1(&[9.0]), 1.0).unwrap().data(), &[0.3]);
    }

    #[test]
    fn losses() {
        let s = make_schedule(10, 0.01, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let eps = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let perfect = eps_loss(|_| Ok(eps.clone()), &x, 4, &eps, &s).unwrap();
        assert_eq!(perfect.item().unwrap(), 0.0);
        let ones = Tensor::<f64>::ones(&[2, 2]);
        let zero = eps_loss(|z| Ok(Tensor::zeros(z.shape())), &ones, 3, &ones, &s).unwrap();
        assert_eq!(zero.item().unwrap(), 1.0);
        // hand-computed mean square against a fixed predictor
        let pred = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let l = eps_loss(|_| Ok(pred.clone()), &x, 4, &eps, &s).unwrap();
        let want: f64 = eps.data().iter().zip(pred.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 12.0;
        assert!((l.item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn v_loss_masking() {
        let s = make_schedule(10, 0.01, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 3], &mut rng);
        let eps = Tensor::<f64>::randn(&[2, 3], &mut rng);
        let target = v_target(&x, &eps, 5, &s).unwrap();
        let perfect = v_loss(|_, _| Ok(target.clone()), &x, 5, &eps, &s, &CondBundle {
            c: Tensor::zeros(&[1]),
            tp: 0,
            s: 1,
            m: 1,
        })
        .unwrap();
        assert_eq!(perfect.item().unwrap(), 0.0);
        // predictor that leaks c: with m = 0 the loss must not depend on c
        let leak = |z: &Tensor<f64>, c: &CondBundle<f64>| z.add(&c.c);
        let losses: Vec<f64> = (0..3)
            .map(|_| {
                let c = Tensor::<f64>::randn(&[2, 3], &mut rng);
                v_loss(leak, &x, 5, &eps, &s, &CondBundle { c, tp: 0, s: 1, m: 0 }).unwrap().item().unwrap()
            })
            .collect();
        assert!(losses.iter().all(|&l| l == losses[0]));
        let c = Tensor::<f64>::randn(&[2, 3], &mut rng);
        let l = v_loss(leak, &x, 5, &eps, &s, &CondBundle { c: c.clone(), tp: 0, s: 1, m: 1 }).unwrap();
        let z = forward_diffuse(&x, 5, &eps, &s).unwrap();
        let want: f64 = z
            .data()
            .iter()
            .zip(c.data())
            .zip(target.data())
            .map(|((z, c), v)| (z + c - v).powi(2))
            .sum::<f64>()
            / 6.0;
        assert!((l.item().unwrap() - want).abs() < 1e-12);
        let bad = CondBundle { c, tp: 0, s: 1, m: 2 };
        assert!(matches!(v_loss(leak, &x, 5, &eps, &s, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn single_step_sampler_recovers_x() {
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn(&[5], &mut rng);
        let eps = Tensor::<f32>::randn(&[5], &mut rng);
        let z = forward_diffuse(&x, 1, &eps, &s).unwrap();
        let out = ancestral_sample_step(&eps, &z, 1, &s, Parameterization::Epsilon, &mut rng).unwrap();
        assert!(out.max_abs_diff(&x).unwrap() < 1e-6);
        let v = v_target(&x, &eps, 1, &s).unwrap();
        let out = ancestral_sample_step(&v, &z, 1, &s, Parameterization::V, &mut rng).unwrap();
        assert!(out.max_abs_diff(&x).unwrap() < 1e-6);
        assert!(ancestral_sample_step(&v, &z, 0, &s, Parameterization::V, &mut rng).is_err());
    }

    #[test]
    fn perturbation() {
        let s = make_schedule(250, 1e-4, 2e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Tensor::<f32>::randn(&[64], &mut rng);
        assert_eq!(perturb_conditioning(&c, 0, &s, &mut rng).unwrap().data(), c.data());
        assert!(matches!(perturb_conditioning(&c, 251, &s, &mut rng), Err(Error::Bounds(_))));
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let p = perturb_conditioning(&c, 100, &s, &mut a).unwrap();
        let eps = Tensor::<f32>::randn(&[64], &mut b);
        let direct = forward_diffuse(&c, 100, &eps, &s).unwrap();
        assert_eq!(p.data(), direct.data());
    }

    #[test]
    fn perturbation_to_last_step_is_noise() {
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Tensor::<f64>::full(&[20000], 1.0);
        let p = perturb_conditioning(&c, 1000, &s, &mut rng).unwrap();
        let n = p.numel() as f64;
        let mean = p.data().iter().sum::<f64>() / n;
        let var = p.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn guidance() {
        let c = t1(&[1.0]);
        let u = t1(&[0.0]);
        assert_eq!(context_guidance(&c, &u, 0.0).unwrap().data(), &[1.0]);
        assert_eq!(context_guidance(&c, &u, 0.25).unwrap().data(), &[1.25]);
        assert_eq!(context_guidance(&c, &c, 3.0).unwrap().data(), &[1.0]);
        assert!(GuidanceConfig { w: -0.1, uncond_prob: 0.1 }.validate().is_err());
        assert!(GuidanceConfig { w: 0.1, uncond_prob: 1.5 }.validate().is_err());
    }

    #[test]
    fn chunked_forms_match_scalar_forms() {
        let s = make_schedule(50, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[4, 3], &mut rng);
        let e = Tensor::<f64>::randn(&[4, 3], &mut rng);
        let ts = [3, 40];
        let z = forward_diffuse_chunks(&x, &ts, &e, &s).unwrap();
        let v = v_target_chunks(&x, &e, &ts, &s).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let (xs, es) = (x.narrow(0, 2 * i, 2).unwrap(), e.narrow(0, 2 * i, 2).unwrap());
            let zi = forward_diffuse(&xs, t, &es, &s).unwrap();
            let vi = v_target(&xs, &es, t, &s).unwrap();
            assert!(zi.max_abs_diff(&z.narrow(0, 2 * i, 2).unwrap()).unwrap() < 1e-12);
            assert!(vi.max_abs_diff(&v.narrow(0, 2 * i, 2).unwrap()).unwrap() < 1e-12);
        }
        assert!(forward_diffuse_chunks(&x, &[1, 2, 3], &e, &s).is_err());
    }
}
