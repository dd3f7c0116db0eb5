//! Diffusion primitives: noise schedules, the forward process, deterministic
//! DDIM stepping, classifier-free guidance combination, and a closed-form
//! Gaussian noise predictor used as the reference oracle in sampler tests.
//!
//! Following the convention used throughout this project, the DDIM update and
//! the timestep modulation are written in terms of the cumulative product
//! `alpha_bar[t]`, and the update is the fully deterministic projection
//! `z_prev = sqrt(alpha_bar[t_prev]) * (z_t - sqrt(1-alpha_bar[t]) * eps) / sqrt(alpha_bar[t])`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentGrid;
use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Per-step and cumulative diffusion coefficients, indexed 1..=T.
/// `alpha_bar[0]` is defined as 1 and `sigma[0]` as 0.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    beta: Vec<f64>,      // beta[t-1] is the step-t variance
    alpha_bar: Vec<f64>, // length T+1, alpha_bar[0] = 1
    sigma: Vec<f64>,     // length T+1, sigma[t] = sqrt(1 - alpha_bar[t])
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
}

pub fn make_noise_schedule(
    t_max: usize,
    beta_min: f64,
    beta_max: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::InvalidRange(format!("T must be >= 2, got {t_max}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let mut beta = Vec::with_capacity(t_max);
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    let mut sigma = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    sigma.push(0.0);
    let mut prod = 1.0;
    for t in 1..=t_max {
        let b = match kind {
            ScheduleKind::Linear => {
                beta_min + (t - 1) as f64 / (t_max - 1) as f64 * (beta_max - beta_min)
            }
        };
        beta.push(b);
        prod *= 1.0 - b;
        alpha_bar.push(prod);
        sigma.push((1.0 - prod).sqrt());
    }
    Ok(NoiseSchedule {
        t_max,
        beta,
        alpha_bar,
        sigma,
        kind,
        beta_min,
        beta_max,
    })
}

impl NoiseSchedule {
    /// Default schedule: linear beta 1e-4..0.02 over 1000 steps.
    pub fn default_linear() -> NoiseSchedule {
        make_noise_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).expect("default schedule")
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "t={t} out of 1..={}", self.t_max);
        self.beta[t - 1]
    }

    pub fn alpha_step(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "t={t} out of 0..={}", self.t_max);
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "t={t} out of 0..={}", self.t_max);
        self.sigma[t]
    }

    /// Stable content hash of the schedule definition, stored in checkpoints.
    pub fn content_hash(&self) -> String {
        let desc = format!(
            "{:?}|{}|{:.17e}|{:.17e}",
            self.kind, self.t_max, self.beta_min, self.beta_max
        );
        sha256_hex(desc.as_bytes())
    }

    /// Descending timesteps for a uniform-stride DDIM run, e.g. T=1000 with
    /// 50 steps yields 1000, 980, ..., 20; stepping targets append 0.
    pub fn ddim_timesteps(&self, steps: usize) -> Vec<usize> {
        assert!(steps >= 1 && steps <= self.t_max);
        let mut ts: Vec<usize> = (1..=steps)
            .rev()
            .map(|i| ((i * self.t_max) as f64 / steps as f64).round() as usize)
            .collect();
        ts.dedup();
        ts
    }
}

/// Closed-form forward diffusion `z_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
/// Deterministic given the caller-supplied noise.
pub fn forward_diffuse(
    x0: &LatentGrid,
    t: usize,
    noise: &LatentGrid,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    x0.require_same_shape(noise, "forward_diffuse")?;
    if t < 1 || t > s.t_max() {
        return Err(Error::InvalidRange(format!(
            "t={t} outside 1..={}",
            s.t_max()
        )));
    }
    let a = s.alpha_bar(t).sqrt();
    let b = s.sigma(t);
    Ok(x0.zip_map(noise, |x, n| a * x + b * n))
}

/// Deterministic DDIM update (eta = 0):
/// `sqrt(ab_prev) * (z_t - sqrt(1-ab_t) eps) / sqrt(ab_t)`.
pub fn ddim_step(
    z_t: &LatentGrid,
    eps_pred: &LatentGrid,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    z_t.require_same_shape(eps_pred, "ddim_step")?;
    if t_prev >= t || t > s.t_max() {
        return Err(Error::InvalidRange(format!(
            "need 0 <= t_prev < t <= T, got t_prev={t_prev}, t={t}, T={}",
            s.t_max()
        )));
    }
    let ab_t = s.alpha_bar(t);
    let coeff = (s.alpha_bar(t_prev) / ab_t).sqrt();
    let sig = s.sigma(t);
    Ok(z_t.zip_map(eps_pred, |z, e| coeff * (z - sig * e)))
}

/// Full deterministic DDIM update (eta = 0), including the direction term:
/// `sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev) * eps`. Unlike the bare
/// projection update above, this keeps a learned predictor's inputs on the
/// forward-process distribution, so the sampler uses it.
pub fn ddim_step_standard(
    z_t: &LatentGrid,
    eps_pred: &LatentGrid,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    z_t.require_same_shape(eps_pred, "ddim_step_standard")?;
    if t_prev >= t || t > s.t_max() {
        return Err(Error::InvalidRange(format!(
            "need 0 <= t_prev < t <= T, got t_prev={t_prev}, t={t}, T={}",
            s.t_max()
        )));
    }
    let root_ab_t = s.alpha_bar(t).sqrt();
    let sig_t = s.sigma(t);
    let root_ab_prev = s.alpha_bar(t_prev).sqrt();
    let sig_prev = s.sigma(t_prev);
    Ok(z_t.zip_map(eps_pred, |z, e| {
        let x0 = (z - sig_t * e) / root_ab_t;
        root_ab_prev * x0 + sig_prev * e
    }))
}

/// `ddim_step_standard` with the x0 estimate clamped to the valid image
/// range before stepping. Latents here are images in [-1, 1], and a learned
/// predictor's early x0 estimates can overshoot that range badly enough to
/// destabilize the whole trajectory.
pub fn ddim_step_clamped(
    z_t: &LatentGrid,
    eps_pred: &LatentGrid,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    z_t.require_same_shape(eps_pred, "ddim_step_clamped")?;
    if t_prev >= t || t > s.t_max() {
        return Err(Error::InvalidRange(format!(
            "need 0 <= t_prev < t <= T, got t_prev={t_prev}, t={t}, T={}",
            s.t_max()
        )));
    }
    let root_ab_t = s.alpha_bar(t).sqrt();
    let sig_t = s.sigma(t);
    let root_ab_prev = s.alpha_bar(t_prev).sqrt();
    let sig_prev = s.sigma(t_prev);
    Ok(z_t.zip_map(eps_pred, |z, e| {
        let x0 = ((z - sig_t * e) / root_ab_t).clamp(-1.0, 1.0);
        root_ab_prev * x0 + sig_prev * e
    }))
}

/// Classifier-free guidance: `uncond + scale * (cond - uncond)`.
/// The endpoints are exact: scale 0 returns the unconditional prediction
/// and scale 1 the conditional one, bit for bit.
pub fn cfg_combine(
    eps_uncond: &LatentGrid,
    eps_cond: &LatentGrid,
    scale: f64,
) -> Result<LatentGrid> {
    eps_uncond.require_same_shape(eps_cond, "cfg_combine")?;
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + scale * (c - u)))
}

/// Exact optimal epsilon-predictor when the data distribution is
/// `N(mu, var0 * I)`:
/// `eps*(z_t) = sqrt(1-ab_t) (z_t - sqrt(ab_t) mu) / (ab_t var0 + 1 - ab_t)`.
pub fn analytic_gaussian_eps(
    z_t: &LatentGrid,
    t: usize,
    mu: &LatentGrid,
    var0: f64,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    z_t.require_same_shape(mu, "analytic_gaussian_eps")?;
    if var0 < 0.0 {
        return Err(Error::InvalidRange(format!("var0 must be >= 0, got {var0}")));
    }
    let ab = s.alpha_bar(t);
    let num = (1.0 - ab).sqrt();
    let denom = ab * var0 + 1.0 - ab;
    let root_ab = ab.sqrt();
    Ok(z_t.zip_map(mu, |z, m| num * (z - root_ab * m) / denom))
}

/// Log-density of the diffused marginal `p_t(z_t)` for the Gaussian data
/// model above (`z_t ~ N(sqrt(ab_t) mu, (ab_t var0 + 1 - ab_t) I)`).
/// Finite differences of this function are the independent oracle for the
/// score relation `eps* = -sigma_t * grad log p_t`.
pub fn gaussian_log_density(
    z_t: &LatentGrid,
    t: usize,
    mu: &LatentGrid,
    var0: f64,
    s: &NoiseSchedule,
) -> f64 {
    let ab = s.alpha_bar(t);
    let var = ab * var0 + 1.0 - ab;
    let root_ab = ab.sqrt();
    let n = z_t.numel() as f64;
    let sq: f64 = z_t
        .data()
        .iter()
        .zip(mu.data())
        .map(|(&z, &m)| {
            let d = z - root_ab * m;
            d * d
        })
        .sum();
    -0.5 * sq / var - 0.5 * n * (2.0 * std::f64::consts::PI * var).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::default_linear()
    }

    #[test]
    fn default_schedule_cumulative_product() {
        // Frozen from an independent product over the stated linear betas.
        let s = default_schedule();
        let expected = 4.0358297653756754e-05;
        assert!((s.alpha_bar(1000) - expected).abs() / expected < 1e-12);
        assert!((s.alpha_bar(500) - 0.07858724288177824).abs() < 1e-12);
    }

    #[test]
    fn tiny_schedule_direct_product() {
        let s = make_noise_schedule(2, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(2), 0.25);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(matches!(
            make_noise_schedule(10, 0.3, 0.1, ScheduleKind::Linear),
            Err(Error::InvalidRange(_))
        ));
        assert!(make_noise_schedule(1, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_noise_schedule(10, 0.0, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_noise_schedule(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn schedule_identity_and_monotonicity() {
        let s = default_schedule();
        let mut prev = 1.0 + 1e-12;
        for t in 1..=1000 {
            let ab = s.alpha_bar(t);
            assert!((s.sigma(t).powi(2) + ab - 1.0).abs() < 1e-12);
            assert!(ab < prev, "alpha_bar not strictly decreasing at t={t}");
            prev = ab;
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            if t > 1 {
                assert!(s.beta(t) >= s.beta(t - 1), "beta not non-decreasing");
            }
        }
    }

    #[test]
    fn forward_diffuse_zero_noise_and_arithmetic() {
        let s = make_noise_schedule(2, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        let x0 = Tensor::filled(&[1, 2, 2], 1.0);
        let zero = Tensor::zeros(&[1, 2, 2]);
        let z = forward_diffuse(&x0, 2, &zero, &s).unwrap();
        for &v in z.data() {
            assert!((v - 0.5).abs() < 1e-15); // sqrt(0.25) * 1
        }
        // alpha_bar = 0.25, x0 = 1, noise = 1 -> 0.5 + sqrt(0.75)
        let one = Tensor::filled(&[1, 2, 2], 1.0);
        let z = forward_diffuse(&x0, 2, &one, &s).unwrap();
        for &v in z.data() {
            assert!((v - (0.5 + 0.75f64.sqrt())).abs() < 1e-15);
        }
        // shape mismatch error
        let bad = Tensor::zeros(&[1, 2, 3]);
        assert!(matches!(
            forward_diffuse(&x0, 2, &bad, &s),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn forward_diffuse_variance_monte_carlo() {
        // Var(z_t) = ab_t Var(x0) + (1 - ab_t) for x0 ~ N(0,1), within 2%.
        let s = default_schedule();
        let t = 500;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x0 = Tensor::randn(&[1, 1, 1], &mut rng);
            let eps = Tensor::randn(&[1, 1, 1], &mut rng);
            let z = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let v = z.data()[0];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let expected = s.alpha_bar(t) * 1.0 + (1.0 - s.alpha_bar(t));
        assert!(
            (var - expected).abs() / expected < 0.02,
            "var {var} vs {expected}"
        );
    }

    #[test]
    fn ddim_step_identities() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[2, 3, 3], &mut rng);
        // z_t on the noiseless trajectory with eps_pred = 0 moves to the
        // noiseless trajectory at t_prev.
        let (t, t_prev) = (800, 760);
        let z_t = x0.scale(s.alpha_bar(t).sqrt());
        let zero = Tensor::zeros(x0.shape());
        let z_prev = ddim_step(&z_t, &zero, t, t_prev, &s).unwrap();
        let expected = x0.scale(s.alpha_bar(t_prev).sqrt());
        assert!(z_prev.sub(&expected).max_abs() < 1e-12);

        // With the exact forward noise as eps_pred the update reconstructs
        // the noiseless trajectory, and the x0 estimate is exact.
        let eps = Tensor::randn(x0.shape(), &mut rng);
        let z_t = forward_diffuse(&x0, t, &eps, &s).unwrap();
        let x0_est = z_t
            .zip_map(&eps, |z, e| (z - s.sigma(t) * e))
            .scale(1.0 / s.alpha_bar(t).sqrt());
        assert!(x0_est.sub(&x0).max_abs() < 1e-10);
        let z_prev = ddim_step(&z_t, &eps, t, t_prev, &s).unwrap();
        let noiseless = x0.scale(s.alpha_bar(t_prev).sqrt());
        let rel = z_prev.sub(&noiseless).max_abs() / noiseless.max_abs().max(1e-12);
        assert!(rel < 1e-8, "round-trip rel err {rel}");

        assert!(matches!(
            ddim_step(&z_t, &eps, 100, 100, &s),
            Err(Error::InvalidRange(_))
        ));
        assert!(ddim_step(&z_t, &eps, 100, 200, &s).is_err());
    }

    #[test]
    fn ddim_determinism() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::randn(&[1, 4, 4], &mut rng);
        let e = Tensor::randn(&[1, 4, 4], &mut rng);
        let a = ddim_step(&z, &e, 500, 460, &s).unwrap();
        let b = ddim_step(&z, &e, 500, 460, &s).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn ddim_timesteps_cover_range() {
        let s = default_schedule();
        let ts = s.ddim_timesteps(50);
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 20);
        for w in ts.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn cfg_combine_cases() {
        let u = Tensor::filled(&[1, 1, 1], 0.0);
        let c = Tensor::filled(&[1, 1, 1], 2.0);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap().data()[0], 2.0);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap().data()[0], 0.0);
        assert_eq!(cfg_combine(&u, &c, 4.0).unwrap().data()[0], 8.0);
    }

    #[test]
    fn analytic_eps_score_cases() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = Tensor::randn(&[1, 3, 3], &mut rng);
        let t = 400;
        // Score vanishes at the scaled mean.
        let z = mu.scale(s.alpha_bar(t).sqrt());
        let e = analytic_gaussian_eps(&z, t, &mu, 1.0, &s).unwrap();
        assert!(e.max_abs() < 1e-12);
        // var0 = 0 recovers the exact forward noise.
        let eps = Tensor::randn(&[1, 3, 3], &mut rng);
        let z_t = forward_diffuse(&mu, t, &eps, &s).unwrap();
        let rec = analytic_gaussian_eps(&z_t, t, &mu, 0.0, &s).unwrap();
        assert!(rec.sub(&eps).max_abs() < 1e-10);
        // Negative variance is a domain error.
        assert!(analytic_gaussian_eps(&z_t, t, &mu, -1.0, &s).is_err());
    }

    #[test]
    fn analytic_eps_matches_finite_difference_score() {
        // eps*(z_t) = -sigma_t * grad log p_t(z_t), checked against central
        // differences of the known Gaussian log-density.
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mu = Tensor::randn(&[1, 2, 2], &mut rng);
        for &t in &[50usize, 400, 900] {
            let z = Tensor::randn(&[1, 2, 2], &mut rng);
            let eps = analytic_gaussian_eps(&z, t, &mu, 1.3, &s).unwrap();
            let h = 1e-5;
            for i in 0..z.numel() {
                let mut zp = z.clone();
                zp.data_mut()[i] += h;
                let mut zm = z.clone();
                zm.data_mut()[i] -= h;
                let grad = (gaussian_log_density(&zp, t, &mu, 1.3, &s)
                    - gaussian_log_density(&zm, t, &mu, 1.3, &s))
                    / (2.0 * h);
                let expect = -s.sigma(t) * grad;
                let rel = (eps.data()[i] - expect).abs() / expect.abs().max(1e-8);
                assert!(rel < 1e-5, "t={t} i={i} rel={rel}");
            }
        }
    }

    proptest! {
        #[test]
        fn prop_schedule_identity(tmax in 2usize..200, bmin in 1e-5f64..0.01, spread in 0.0f64..0.5) {
            let bmax = (bmin + spread).min(0.999);
            let s = make_noise_schedule(tmax, bmin, bmax, ScheduleKind::Linear).unwrap();
            for t in 0..=tmax {
                prop_assert!((s.sigma(t).powi(2) + s.alpha_bar(t) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn prop_cfg_affine(a in -3.0f64..3.0, b in -3.0f64..3.0, s1 in -2.0f64..6.0, s2 in -2.0f64..6.0) {
            let u = Tensor::filled(&[1,1,1], a);
            let c = Tensor::filled(&[1,1,1], b);
            let lhs = cfg_combine(&u, &c, s1).unwrap().add(&cfg_combine(&u, &c, s2).unwrap());
            let rhs = cfg_combine(&u, &c, (s1 + s2) / 2.0).unwrap().scale(2.0);
            prop_assert!(lhs.sub(&rhs).max_abs() < 1e-12);
        }
    }
}
