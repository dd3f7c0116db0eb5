//! Inference: prompt construction, the age-gradient residual between
//! age-prompted and generic-prompted predictions, and the gradient-guided
//! DDIM sampling loop with timestep-scaled latent corrections.

use serde::{Deserialize, Serialize};

use crate::denoiser::{AttnTrace, ConditionBundle, RecordAttn};
use crate::diffusion::{
    analytic_gaussian_eps, cfg_combine, ddim_step_clamped, ddim_step_standard, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::model::RestorationModel;
use crate::nn::Ctx;
use crate::tensor::{LatentGrid, Tensor};
use crate::util::sub_rng;
use crate::vocab::{self, TokenId};

/// Timestep modulation of the correction strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    /// Adaptive `sqrt(alpha_bar[t])`: weakest at the start of sampling.
    SqrtAlphaBar,
    /// Constant scale in [0, 1].
    Fixed(f64),
}

/// How the inner correction loop treats the residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerLoop {
    /// Re-evaluate the residual at the updated working latent each
    /// iteration (timestep argument stays `t`).
    Iterative,
    /// Evaluate the residual once at the pre-step latent; the loop then
    /// acts as a pure step-size multiplier.
    FixedPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub target_age: f64,
    /// Inner correction count N; 0 is plain conditioned sampling.
    pub inner_steps: usize,
    /// Gradient amplification lambda (absorbs the 1/M mean factor).
    pub step_scale: f64,
    pub cfg_scale: f64,
    pub ddim_steps: usize,
    pub modulation: Modulation,
    pub negative_descriptors: bool,
    pub inner_loop: InnerLoop,
    /// Research flag: differentiate the residual through the network
    /// instead of treating it as constant.
    pub grad_through_net: bool,
    /// Clamp the sampler's x0 estimate to the valid image range.
    pub clamp_x0: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            target_age: 50.0,
            inner_steps: 5,
            step_scale: 3000.0,
            cfg_scale: 4.0,
            ddim_steps: 50,
            modulation: Modulation::SqrtAlphaBar,
            negative_descriptors: true,
            inner_loop: InnerLoop::Iterative,
            grad_through_net: false,
            clamp_x0: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.target_age) {
            return Err(Error::InvalidRange(format!(
                "target_age {} outside [0,100]",
                self.target_age
            )));
        }
        if let Modulation::Fixed(s) = self.modulation {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidRange(format!(
                    "fixed modulation {s} outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// Generic prompt (optionally enriched with artifact descriptors) and the
/// age prompt for the rounded target age.
pub fn build_prompts(target_age: f64, negatives: bool) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let c = if negatives {
        vocab::generic_prompt_with_negatives()
    } else {
        vocab::generic_prompt()
    };
    let c_prime = vocab::age_prompt(target_age)?;
    Ok((c, c_prime))
}

/// Anything that can predict epsilon from a condition bundle; lets the
/// analytic Gaussian model stand in for the trained network in tests.
pub trait EpsModel: Sync {
    fn predict(&self, z: &LatentGrid, t: usize, cond: &ConditionBundle) -> Result<LatentGrid>;
}

impl EpsModel for RestorationModel {
    fn predict(&self, z: &LatentGrid, t: usize, cond: &ConditionBundle) -> Result<LatentGrid> {
        Ok(self.predict_eps(z, t, cond, None)?.0)
    }
}

/// Closed-form Gaussian conditional model: each prompt maps to a mean; the
/// data distribution under prompt `c` is `N(mu_c, var0 I)`.
pub struct AnalyticGaussianModel {
    pub schedule: NoiseSchedule,
    pub var0: f64,
    pub mus: Vec<(Vec<TokenId>, Tensor)>,
}

impl AnalyticGaussianModel {
    fn mu_for(&self, prompt: &[TokenId]) -> Result<&Tensor> {
        self.mus
            .iter()
            .find(|(p, _)| p == prompt)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::ConditionMismatch("unknown prompt for analytic model".to_string()))
    }
}

impl EpsModel for AnalyticGaussianModel {
    fn predict(&self, z: &LatentGrid, t: usize, cond: &ConditionBundle) -> Result<LatentGrid> {
        let mu = self.mu_for(&cond.prompt_tokens)?;
        analytic_gaussian_eps(z, t, mu, self.var0, &self.schedule)
    }
}

/// CFG-combined prediction: unconditional branch drops the identity tokens.
/// `scale == 1` or a missing identity condition short-circuits to a single
/// conditional pass (exactly, per the CFG contract).
pub fn cfg_predict<M: EpsModel>(
    model: &M,
    z: &LatentGrid,
    t: usize,
    cond: &ConditionBundle,
    scale: f64,
) -> Result<LatentGrid> {
    if cond.id_tokens.is_none() || scale == 1.0 {
        return model.predict(z, t, cond);
    }
    let uncond = model.predict(z, t, &cond.without_id())?;
    let cond_eps = model.predict(z, t, cond)?;
    cfg_combine(&uncond, &cond_eps, scale)
}

/// The age-aware gradient: the residual between the target-prompt and
/// source-prompt predictions, both taken through the same CFG combination.
pub fn age_gradient<M: EpsModel>(
    model: &M,
    z: &LatentGrid,
    t: usize,
    cond_c: &ConditionBundle,
    cond_cprime: &ConditionBundle,
    cfg_scale: f64,
) -> Result<LatentGrid> {
    if !cond_c.same_non_prompt_fields(cond_cprime) {
        return Err(Error::ConditionMismatch(
            "age gradient requires identical non-prompt conditions".to_string(),
        ));
    }
    let eps_trg = cfg_predict(model, z, t, cond_cprime, cfg_scale)?;
    let eps_src = cfg_predict(model, z, t, cond_c, cfg_scale)?;
    Ok(eps_trg.sub(&eps_src))
}

/// Full-Jacobian variant: gradient of `mean(delta_eps(z) .* stopgrad(z))`
/// with respect to `z`, differentiated through the network.
fn residual_grad_through_net(
    model: &RestorationModel,
    z: &LatentGrid,
    t: usize,
    cond_c: &ConditionBundle,
    cond_cprime: &ConditionBundle,
    cfg_scale: f64,
) -> Result<LatentGrid> {
    let mut cx = Ctx::new(&model.store);
    let zv = cx.tape.input(z.clone());
    let branch = |cx: &mut Ctx, cond: &ConditionBundle| {
        let text = model.denoiser.embed_prompt(cx, &cond.prompt_tokens);
        let id = cond.id_tokens.as_ref().map(|x| cx.tape.input(x.clone()));
        let lq = cond
            .lq_features
            .as_ref()
            .map(|fs| fs.iter().map(|f| cx.tape.input(f.clone())).collect());
        let cv = crate::denoiser::CondVars {
            text_tokens: text,
            id_tokens: id,
            lq_features: lq,
        };
        model
            .denoiser
            .forward_with_fusion(cx, zv, t, &cv, None, model.config.grf_enabled)
            .0
    };
    let combined = |cx: &mut Ctx, cond: &ConditionBundle| -> crate::autodiff::Var {
        if cond.id_tokens.is_none() || cfg_scale == 1.0 {
            return branch(cx, cond);
        }
        let u = branch(cx, &cond.without_id());
        let c = branch(cx, cond);
        let d = cx.tape.sub(c, u);
        let ds = cx.tape.scale(d, cfg_scale);
        cx.tape.add(u, ds)
    };
    let trg = combined(&mut cx, cond_cprime);
    let src = combined(&mut cx, cond_c);
    let delta = cx.tape.sub(trg, src);
    let loss = cx.tape.mean_weighted(delta, z);
    let grads = cx.tape.backward(loss);
    grads
        .get(zv)
        .cloned()
        .ok_or_else(|| Error::Other("no gradient reached the latent".to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestoreSidecar {
    pub seed: u64,
    pub guidance: GuidanceConfig,
    pub target_age: f64,
    pub prompt_tokens_generic: Vec<TokenId>,
    pub prompt_tokens_age: Vec<TokenId>,
    pub references: Vec<String>,
    /// Per outer DDIM step, the L2 norms of each inner correction.
    pub correction_norms: Vec<Vec<f64>>,
    /// Hash of the resolved run configuration.
    pub config_hash: String,
}

pub struct RestoreOutput {
    pub image: Tensor,
    pub latent: Tensor,
    pub sidecar: RestoreSidecar,
    /// Per-step identity-attention traces when recording was requested.
    pub attn_traces: Vec<AttnTrace>,
}

#[derive(Debug, Clone, Default)]
pub struct RestoreOptions {
    pub seed: u64,
    /// Plain conditioned sampling with the age prompt; no guidance machinery.
    pub prompt_only: bool,
    /// Force the target prompt equal to the generic prompt (null guidance).
    pub force_generic_target: bool,
    /// Record identity-attention logits at this spatial side.
    pub record_attn_side: Option<usize>,
    /// Reference names recorded in the sidecar.
    pub reference_names: Vec<String>,
    /// Hash of the resolved run configuration, echoed into the sidecar.
    pub config_hash: String,
}

fn cfg_predict_model(
    model: &RestorationModel,
    z: &LatentGrid,
    t: usize,
    cond: &ConditionBundle,
    scale: f64,
    record: Option<RecordAttn>,
) -> Result<(LatentGrid, AttnTrace)> {
    if cond.id_tokens.is_none() || scale == 1.0 {
        return model.predict_eps(z, t, cond, record);
    }
    let (uncond, _) = model.predict_eps(z, t, &cond.without_id(), None)?;
    let (cond_eps, trace) = model.predict_eps(z, t, cond, record)?;
    Ok((cfg_combine(&uncond, &cond_eps, scale)?, trace))
}

/// Gradient-guided restoration: DDIM sampling under the age prompt with N
/// inner latent corrections per step along the prompt-contrast residual.
pub fn aagg_sample(
    model: &RestorationModel,
    lq_image: &Tensor,
    references: &[(Tensor, Tensor)],
    gcfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    opts: &RestoreOptions,
) -> Result<RestoreOutput> {
    gcfg.validate()?;
    if !model.trained {
        return Err(Error::NotReady(
            "restoration model is untrained".to_string(),
        ));
    }
    if references.is_empty() {
        return Err(Error::DegenerateInput("empty reference list".to_string()));
    }
    let (c, mut c_prime) = build_prompts(gcfg.target_age, gcfg.negative_descriptors)?;
    if opts.force_generic_target {
        c_prime = c.clone();
    }
    let cond_cprime = model.build_condition(c_prime.clone(), lq_image, references)?;
    let cond_c = cond_cprime.with_prompt(c.clone());

    let shape = [
        model.config.denoiser.image_channels,
        model.config.denoiser.image_size,
        model.config.denoiser.image_size,
    ];
    let mut z = Tensor::randn(&shape, &mut sub_rng(opts.seed, "init-noise", 0));
    let m_count = z.numel() as f64;
    let record = opts.record_attn_side.map(|side| RecordAttn {
        spatial_side: side,
    });

    let timesteps = schedule.ddim_timesteps(gcfg.ddim_steps);
    let mut correction_norms = Vec::with_capacity(timesteps.len());
    let mut attn_traces = Vec::new();
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        // Outer DDIM step under the (CFG-combined) age-prompt prediction.
        let (eps, trace) = cfg_predict_model(model, &z, t, &cond_cprime, gcfg.cfg_scale, record)?;
        if record.is_some() {
            attn_traces.push(trace);
        }
        let pre_step = z.clone();
        z = if gcfg.clamp_x0 {
            ddim_step_clamped(&z, &eps, t, t_prev, schedule)?
        } else {
            ddim_step_standard(&z, &eps, t, t_prev, schedule)?
        };

        let mut step_norms = Vec::new();
        if !opts.prompt_only && gcfg.inner_steps > 0 {
            let m_t = match gcfg.modulation {
                Modulation::SqrtAlphaBar => schedule.alpha_bar(t).sqrt(),
                Modulation::Fixed(s) => s,
            };
            let coeff = gcfg.step_scale * m_t / m_count;
            let fixed_delta = match gcfg.inner_loop {
                InnerLoop::FixedPoint => Some(residual(
                    model,
                    &pre_step,
                    t,
                    &cond_c,
                    &cond_cprime,
                    gcfg,
                )?),
                InnerLoop::Iterative => None,
            };
            for _ in 0..gcfg.inner_steps {
                let delta = match &fixed_delta {
                    Some(d) => d.clone(),
                    None => residual(model, &z, t, &cond_c, &cond_cprime, gcfg)?,
                };
                let correction = delta.scale(coeff);
                step_norms.push(correction.norm());
                z = z.sub(&correction);
            }
        }
        correction_norms.push(step_norms);
        if !z.is_finite() {
            return Err(Error::NonFinite(format!(
                "latent after step t={t} (seed {})",
                opts.seed
            )));
        }
    }

    let image = crate::imageio::to_pixel_domain(&z);
    Ok(RestoreOutput {
        image,
        latent: z,
        sidecar: RestoreSidecar {
            seed: opts.seed,
            guidance: gcfg.clone(),
            target_age: gcfg.target_age,
            prompt_tokens_generic: c,
            prompt_tokens_age: c_prime,
            references: opts.reference_names.clone(),
            correction_norms,
            config_hash: opts.config_hash.clone(),
        },
        attn_traces,
    })
}

fn residual(
    model: &RestorationModel,
    z: &LatentGrid,
    t: usize,
    cond_c: &ConditionBundle,
    cond_cprime: &ConditionBundle,
    gcfg: &GuidanceConfig,
) -> Result<LatentGrid> {
    if gcfg.grad_through_net {
        // The tape gradient already carries the 1/M factor; rescale so the
        // caller's lambda/M convention applies uniformly.
        let g = residual_grad_through_net(model, z, t, cond_c, cond_cprime, gcfg.cfg_scale)?;
        Ok(g.scale(z.numel() as f64))
    } else {
        age_gradient(model, z, t, cond_c, cond_cprime, gcfg.cfg_scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_noise_schedule, ScheduleKind};
    use crate::util::sub_rng;

    fn schedule() -> NoiseSchedule {
        make_noise_schedule(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap()
    }

    fn analytic_model(var0: f64) -> AnalyticGaussianModel {
        let mut rng = sub_rng(3, "mus", 0);
        let mu_c = Tensor::randn(&[1, 3, 3], &mut rng);
        let mu_cp = Tensor::randn(&[1, 3, 3], &mut rng);
        AnalyticGaussianModel {
            schedule: schedule(),
            var0,
            mus: vec![
                (vocab::generic_prompt(), mu_c),
                (vocab::age_prompt(30.0).unwrap(), mu_cp),
            ],
        }
    }

    fn bundle(prompt: Vec<usize>) -> ConditionBundle {
        ConditionBundle {
            prompt_tokens: prompt,
            id_tokens: None,
            lq_features: None,
        }
    }

    #[test]
    fn build_prompts_contract() {
        let (c, cp) = build_prompts(24.0, false).unwrap();
        assert_eq!(c, vocab::generic_prompt());
        assert!(cp.contains(&vocab::age_token(24).unwrap()));
        let (c_neg, _) = build_prompts(24.0, true).unwrap();
        assert_eq!(c_neg, vocab::generic_prompt_with_negatives());
        assert!(build_prompts(140.0, false).is_err());
        // Rounding rule: 24.4 tokenizes like 24.
        let (_, cp2) = build_prompts(24.4, false).unwrap();
        assert_eq!(cp, cp2);
    }

    #[test]
    fn age_gradient_zero_for_identical_prompts_and_antisymmetric() {
        let model = analytic_model(1.0);
        let mut rng = sub_rng(5, "z", 0);
        let z = Tensor::randn(&[1, 3, 3], &mut rng);
        let c = bundle(vocab::generic_prompt());
        let cp = bundle(vocab::age_prompt(30.0).unwrap());
        let zero = age_gradient(&model, &z, 50, &c, &c, 4.0).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let fwd = age_gradient(&model, &z, 50, &c, &cp, 4.0).unwrap();
        let bwd = age_gradient(&model, &z, 50, &cp, &c, 4.0).unwrap();
        assert!(fwd.add(&bwd).max_abs() < 1e-15);
    }

    #[test]
    fn age_gradient_matches_two_gaussian_closed_form() {
        // delta = sqrt(1-ab) sqrt(ab) (mu_c - mu_cp) / (ab var0 + 1 - ab),
        // independent of z.
        for &var0 in &[0.0, 1.0, 2.5] {
            let model = analytic_model(var0);
            let s = schedule();
            let mu_c = model.mu_for(&vocab::generic_prompt()).unwrap().clone();
            let mu_cp = model
                .mu_for(&vocab::age_prompt(30.0).unwrap())
                .unwrap()
                .clone();
            let c = bundle(vocab::generic_prompt());
            let cp = bundle(vocab::age_prompt(30.0).unwrap());
            let mut rng = sub_rng(7, "z", var0 as u64);
            for &t in &[10usize, 50, 90] {
                let ab = s.alpha_bar(t);
                let coeff = (1.0 - ab).sqrt() * ab.sqrt() / (ab * var0 + 1.0 - ab);
                let expected = mu_c.sub(&mu_cp).scale(coeff);
                for _ in 0..5 {
                    let z = Tensor::randn(&[1, 3, 3], &mut rng);
                    let got = age_gradient(&model, &z, t, &c, &cp, 4.0).unwrap();
                    assert!(
                        got.sub(&expected).max_abs() < 1e-10,
                        "var0={var0} t={t}"
                    );
                }
            }
        }
    }

    #[test]
    fn age_gradient_rejects_mismatched_conditions() {
        let model = analytic_model(1.0);
        let z = Tensor::zeros(&[1, 3, 3]);
        let c = bundle(vocab::generic_prompt());
        let mut cp = bundle(vocab::age_prompt(30.0).unwrap());
        cp.id_tokens = Some(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            age_gradient(&model, &z, 50, &c, &cp, 4.0),
            Err(Error::ConditionMismatch(_))
        ));
    }

    #[test]
    fn guidance_config_validation() {
        let mut cfg = GuidanceConfig::default();
        cfg.modulation = Modulation::Fixed(1.5);
        assert!(cfg.validate().is_err());
        cfg.modulation = Modulation::Fixed(0.5);
        assert!(cfg.validate().is_ok());
        cfg.target_age = -3.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sqrt_modulation_weakest_at_start() {
        // Guidance strength under the adaptive modulation grows as sampling
        // proceeds from t = T toward t = 0.
        let s = NoiseSchedule::default_linear();
        let m = |t: usize| s.alpha_bar(t).sqrt();
        assert!(m(1000) < m(500));
        assert!(m(500) < m(20));
        assert!(m(1000) < 0.01);
        assert!(m(20) > 0.99);
    }

    #[test]
    fn grad_through_net_matches_finite_difference() {
        use crate::denoiser::DenoiserConfig;
        use crate::model::{ModelConfig, RestorationModel};
        let config = ModelConfig {
            denoiser: DenoiserConfig {
                image_channels: 3,
                image_size: 16,
                base_channels: 8,
                num_levels: 2,
                attn_dim: 16,
                num_heads: 2,
                id_token_count: 4,
                lambda_id: 0.75,
                temb_dim: 16,
            },
            id_embed_dim: 16,
            grf_enabled: true,
        };
        let mut model = RestorationModel::init(config, 31).unwrap();
        model.store.set(
            "denoiser.conv_out.w",
            crate::nn::conv_init(3, 8, 3, &mut sub_rng(31, "head", 0)),
        );
        let z0 = Tensor::randn(&[3, 16, 16], &mut sub_rng(31, "z", 0));
        let id = Tensor::randn(&[4, 16], &mut sub_rng(31, "id", 0));
        let cond_c = ConditionBundle {
            prompt_tokens: vocab::generic_prompt(),
            id_tokens: Some(id.clone()),
            lq_features: None,
        };
        let cond_cp = cond_c.with_prompt(vocab::age_prompt(60.0).unwrap());
        let scale = 3.0;
        let g =
            residual_grad_through_net(&model, &z0, 40, &cond_c, &cond_cp, scale).unwrap();
        // L(z) = mean(delta_eps(z) .* w) with w frozen at z0.
        let w = z0.clone();
        let loss = |z: &Tensor| -> f64 {
            let d = age_gradient(&model, z, 40, &cond_c, &cond_cp, scale).unwrap();
            d.dot(&w) / w.numel() as f64
        };
        let dir = Tensor::randn(&[3, 16, 16], &mut sub_rng(31, "dir", 0));
        let h = 1e-5;
        let fd = (loss(&z0.add_scaled(&dir, h)) - loss(&z0.add_scaled(&dir, -h))) / (2.0 * h);
        let analytic = g.dot(&dir);
        let rel = (fd - analytic).abs() / analytic.abs().max(1e-12);
        assert!(rel < 1e-4, "rel err {rel}");
        // The full-Jacobian gradient differs from the constant-residual one.
        let const_grad = age_gradient(&model, &z0, 40, &cond_c, &cond_cp, scale)
            .unwrap()
            .scale(1.0 / z0.numel() as f64);
        assert!(g.sub(&const_grad).max_abs() > 0.0);
    }
}
