//! Denoiser training: sample a timestep and noise, diffuse the clean target,
//! build conditions (fresh degradation, reference identity embedding with
//! dropout, prompt), minimize epsilon-MSE with AdamW, checkpoint atomically.
//!
//! Every random draw is keyed by `(seed, domain, global sample index)`, so a
//! fixed seed gives a bit-identical loss trajectory and resuming from a
//! checkpoint continues exactly where an unbroken run would be.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::{apply_degradation, sample_degradation_params, DegradationParams};
use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imageio::{load_mask, load_rgb, to_model_domain};
use crate::model::{ModelConfig, RestorationModel};
use crate::nn::{AdamW, Ctx};
use crate::synthface::{RunManifest, Split};
use crate::tensor::Tensor;
use crate::util::{atomic_write, sub_rng, sub_seed};
use crate::vocab::{self, TokenId};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub id_dropout_p: f64,
    pub lambda_id: f64,
    pub ref_count_range: (usize, usize),
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub checkpoint_dir: PathBuf,
    /// Probability a training prompt carries the sample's true age instead
    /// of the generic prompt. Stands in for the age semantics a pretrained
    /// text-to-image prior would contribute.
    pub age_prompt_p: f64,
    /// Probability the generic prompt is exposed with artifact descriptors
    /// appended, so those embeddings settle instead of staying random.
    pub descriptor_exposure_p: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-5,
            batch_size: 8,
            max_steps: 20_000,
            id_dropout_p: 0.05,
            lambda_id: 0.75,
            ref_count_range: (1, 5),
            seed: 0,
            eval_every: 500,
            checkpoint_every: 1000,
            checkpoint_dir: PathBuf::from("runs/train"),
            age_prompt_p: 0.5,
            descriptor_exposure_p: 0.25,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.id_dropout_p) {
            return Err(Error::Config("id_dropout_p must be in [0,1]".to_string()));
        }
        if !(0.0..=1.0).contains(&self.age_prompt_p) {
            return Err(Error::Config("age_prompt_p must be in [0,1]".to_string()));
        }
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch_size/max_steps must be positive".to_string()));
        }
        if self.ref_count_range.0 < 1 || self.ref_count_range.0 > self.ref_count_range.1 {
            return Err(Error::Config("bad ref_count_range".to_string()));
        }
        Ok(())
    }
}

/// A manifest record with its images loaded.
pub struct LoadedRecord {
    pub identity_id: u64,
    pub gt_pixel: Tensor,
    pub gt_mask: Tensor,
    pub gt_age: f64,
    pub refs: Vec<(Tensor, Tensor)>,
    pub ref_ages: Vec<f64>,
    pub lq_pixel: Option<Tensor>,
    pub degradation_seed: u64,
    pub degradation: Option<DegradationParams>,
}

pub fn load_records(manifest: &RunManifest) -> Result<Vec<LoadedRecord>> {
    manifest
        .records
        .iter()
        .map(|rec| {
            let gt_pixel = load_rgb(&manifest.resolve(&rec.gt_image))?;
            let gt_mask = load_mask(&manifest.resolve(&rec.gt_mask))?;
            let mut refs = Vec::with_capacity(rec.references.len());
            let mut ref_ages = Vec::with_capacity(rec.references.len());
            for r in &rec.references {
                refs.push((
                    load_rgb(&manifest.resolve(&r.image))?,
                    load_mask(&manifest.resolve(&r.mask))?,
                ));
                ref_ages.push(r.age);
            }
            let lq_pixel = rec
                .lq_image
                .as_ref()
                .map(|p| load_rgb(&manifest.resolve(p)))
                .transpose()?;
            Ok(LoadedRecord {
                identity_id: rec.identity_id,
                gt_pixel,
                gt_mask,
                gt_age: rec.gt_age,
                refs,
                ref_ages,
                lq_pixel,
                degradation_seed: rec.degradation_seed,
                degradation: rec.degradation,
            })
        })
        .collect()
}

struct SampleDraw {
    record_idx: usize,
    t: usize,
    noise: Tensor,
    drop_id: bool,
    prompt: Vec<TokenId>,
    ref_indices: Vec<usize>,
    deg: DegradationParams,
    deg_seed: u64,
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = sub_rng(seed, "epoch-perm", epoch);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

fn build_draw(
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    records: &[LoadedRecord],
    step: u64,
    slot: usize,
    shape: &[usize],
) -> SampleDraw {
    let g = step * cfg.batch_size as u64 + slot as u64;
    let n = records.len() as u64;
    let epoch = g / n;
    let pos = (g % n) as usize;
    let record_idx = epoch_permutation(cfg.seed, epoch, records.len())[pos];
    let rec = &records[record_idx];

    let mut rng = sub_rng(cfg.seed, "draw", g);
    let t = rng.gen_range(1..=schedule.t_max());
    let noise = Tensor::randn(shape, &mut rng);
    let drop_id = rng.gen_bool(cfg.id_dropout_p);
    let prompt = if rng.gen_bool(cfg.age_prompt_p) {
        vocab::age_prompt(rec.gt_age.clamp(0.0, 100.0)).expect("age in range")
    } else if rng.gen_bool(cfg.descriptor_exposure_p) {
        vocab::generic_prompt_with_negatives()
    } else {
        vocab::generic_prompt()
    };
    let avail = rec.refs.len();
    let want = rng.gen_range(cfg.ref_count_range.0..=cfg.ref_count_range.1);
    let k = want.clamp(1, avail);
    let mut pool: Vec<usize> = (0..avail).collect();
    let mut ref_indices = Vec::with_capacity(k);
    for _ in 0..k {
        let pick = rng.gen_range(0..pool.len());
        ref_indices.push(pool.swap_remove(pick));
    }
    // Training degradations are freshly random per step.
    let deg = sample_degradation_params(&mut rng);
    let deg_seed = sub_seed(cfg.seed, "train-degradation", g);
    SampleDraw {
        record_idx,
        t,
        noise,
        drop_id,
        prompt,
        ref_indices,
        deg,
        deg_seed,
    }
}

fn sample_loss(
    model: &RestorationModel,
    schedule: &NoiseSchedule,
    records: &[LoadedRecord],
    draw: &SampleDraw,
    with_grads: bool,
) -> Result<(f64, Vec<(usize, Tensor)>)> {
    let rec = &records[draw.record_idx];
    let lq = apply_degradation(&rec.gt_pixel, &draw.deg, draw.deg_seed)?;
    let id_embedding = if draw.drop_id {
        None
    } else {
        let subset: Vec<(Tensor, Tensor)> = draw
            .ref_indices
            .iter()
            .map(|&i| rec.refs[i].clone())
            .collect();
        Some(model.ref_embedding(&subset)?)
    };
    let hq = to_model_domain(&rec.gt_pixel);
    let z_t = forward_diffuse(&hq, draw.t, &draw.noise, schedule)?;
    let mut cx = if with_grads {
        Ctx::new(&model.store)
    } else {
        Ctx::inference(&model.store)
    };
    let pred = model.eps_graph(
        &mut cx,
        &z_t,
        draw.t,
        &draw.prompt,
        id_embedding.as_ref(),
        Some(&lq),
    );
    let target = cx.tape.input(draw.noise.clone());
    let loss = cx.tape.mse(pred, target);
    let loss_val = cx.tape.value(loss).data()[0];
    if !with_grads {
        return Ok((loss_val, Vec::new()));
    }
    let grads = cx.tape.backward(loss);
    Ok((loss_val, cx.param_grads(&grads)))
}

/// One optimizer step over a batch. Returns the batch loss.
pub fn training_step(
    model: &mut RestorationModel,
    opt: &mut AdamW,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    records: &[LoadedRecord],
    step: u64,
) -> Result<f64> {
    let (loss, grads) = batch_loss_and_grads(model, schedule, cfg, records, step, true)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {step}")));
    }
    opt.apply(&mut model.store, &grads);
    Ok(loss)
}

/// Batch loss (and optionally averaged gradients) for the deterministic
/// draws of `step`. The no-gradient path is what finite-difference checks
/// probe.
pub fn batch_loss_and_grads(
    model: &RestorationModel,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    records: &[LoadedRecord],
    step: u64,
    with_grads: bool,
) -> Result<(f64, Vec<(usize, Tensor)>)> {
    let shape = [
        model.config.denoiser.image_channels,
        model.config.denoiser.image_size,
        model.config.denoiser.image_size,
    ];
    let draws: Vec<SampleDraw> = (0..cfg.batch_size)
        .map(|slot| build_draw(cfg, schedule, records, step, slot, &shape))
        .collect();
    let results: Vec<Result<(f64, Vec<(usize, Tensor)>)>> = draws
        .par_iter()
        .map(|draw| sample_loss(model, schedule, records, draw, with_grads))
        .collect();
    let mut loss_sum = 0.0;
    let mut acc: std::collections::BTreeMap<usize, Tensor> = std::collections::BTreeMap::new();
    for r in results {
        let (l, grads) = r?;
        loss_sum += l;
        for (idx, g) in grads {
            match acc.get_mut(&idx) {
                Some(t) => t.accumulate(&g),
                None => {
                    acc.insert(idx, g);
                }
            }
        }
    }
    let scale = 1.0 / cfg.batch_size as f64;
    let grads: Vec<(usize, Tensor)> = acc
        .into_iter()
        .map(|(idx, g)| (idx, g.scale(scale)))
        .collect();
    Ok((loss_sum * scale, grads))
}

/// Validation loss with manifest-recorded degradations and fixed draws.
pub fn validation_loss(
    model: &RestorationModel,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    records: &[LoadedRecord],
    max_records: usize,
) -> Result<f64> {
    let shape = [
        model.config.denoiser.image_channels,
        model.config.denoiser.image_size,
        model.config.denoiser.image_size,
    ];
    let n = records.len().min(max_records);
    let losses: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let rec = &records[i];
            let mut rng = sub_rng(cfg.seed, "val-draw", i as u64);
            let t = rng.gen_range(1..=schedule.t_max());
            let noise = Tensor::randn(&shape, &mut rng);
            let lq = match (&rec.lq_pixel, rec.degradation) {
                (Some(lq), _) => lq.clone(),
                (None, Some(p)) => apply_degradation(&rec.gt_pixel, &p, rec.degradation_seed)?,
                (None, None) => {
                    return Err(Error::Config(
                        "validation record lacks degradation info".to_string(),
                    ))
                }
            };
            let e = model.ref_embedding(&rec.refs)?;
            let hq = to_model_domain(&rec.gt_pixel);
            let z_t = forward_diffuse(&hq, t, &noise, schedule)?;
            let mut cx = Ctx::inference(&model.store);
            let pred = model.eps_graph(
                &mut cx,
                &z_t,
                t,
                &vocab::generic_prompt(),
                Some(&e),
                Some(&lq),
            );
            let target = cx.tape.input(noise);
            let loss = cx.tape.mse(pred, target);
            Ok(cx.tape.value(loss).data()[0])
        })
        .collect();
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub checkpoint: PathBuf,
    pub steps_run: u64,
    pub initial_smoothed_loss: f64,
    pub final_smoothed_loss: f64,
    /// Final smoothed loss must drop below 0.7x the initial smoothed loss.
    pub passed: bool,
    pub val_losses: Vec<(u64, f64)>,
}

#[derive(Serialize)]
struct LogLine {
    step: u64,
    loss: f64,
    lr: f64,
    wallclock: f64,
}

/// Full training run with periodic checkpoints, validation dumps, and a
/// smoothed-loss acceptance flag. `resume` continues an interrupted run.
pub fn run_training(
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    train_manifest: &RunManifest,
    val_manifest: Option<&RunManifest>,
    resume: Option<&Path>,
) -> Result<(RestorationModel, RunOutcome)> {
    cfg.validate()?;
    if train_manifest.split() != Split::TrainSameAge {
        return Err(Error::Config(format!(
            "training requires the train_same_age split, got {:?}",
            train_manifest.split()
        )));
    }
    let records = load_records(train_manifest)?;
    let val_records = val_manifest.map(load_records).transpose()?;

    let mut effective = model_config.clone();
    effective.denoiser.lambda_id = cfg.lambda_id;
    let (mut model, start_step, opt_state) = match resume {
        Some(path) => {
            let (model, extras) = RestorationModel::load(path, Some(&effective))?;
            let step = model.train_step;
            (model, step, extras.optimizer)
        }
        None => (RestorationModel::init(effective, cfg.seed)?, 0, None),
    };
    let mut opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
    if let Some((m, v, step)) = opt_state {
        opt.restore_state(step, m, v)?;
    }
    model.schedule_hash = schedule.content_hash();

    std::fs::create_dir_all(&cfg.checkpoint_dir)
        .map_err(|e| Error::io(&cfg.checkpoint_dir, e))?;
    let log_path = cfg.checkpoint_dir.join("train_log.jsonl");
    let mut log_lines: Vec<String> = Vec::new();
    let started = Instant::now();

    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut val_losses = Vec::new();
    for step in start_step..cfg.max_steps as u64 {
        let loss = match training_step(&mut model, &mut opt, schedule, cfg, &records, step) {
            Ok(l) => l,
            Err(Error::NonFinite(what)) => {
                // Diagnostic dump, then abort.
                let dump = serde_json::json!({
                    "failed_step": step,
                    "recent_losses": losses.iter().rev().take(20).collect::<Vec<_>>(),
                    "what": what,
                });
                let _ = atomic_write(
                    &cfg.checkpoint_dir.join("nan_dump.json"),
                    serde_json::to_string_pretty(&dump)?.as_bytes(),
                );
                return Err(Error::NonFinite(what));
            }
            Err(e) => return Err(e),
        };
        losses.push(loss);
        log_lines.push(serde_json::to_string(&LogLine {
            step,
            loss,
            lr: cfg.lr,
            wallclock: started.elapsed().as_secs_f64(),
        })?);
        let step1 = step + 1;
        if cfg.eval_every > 0 && step1 % cfg.eval_every as u64 == 0 {
            if let Some(vr) = &val_records {
                let vl = validation_loss(&model, schedule, cfg, vr, 16)?;
                val_losses.push((step1, vl));
                log_lines.push(serde_json::to_string(
                    &serde_json::json!({"step": step1, "val_loss": vl}),
                )?);
            }
        }
        if cfg.checkpoint_every > 0 && step1 % cfg.checkpoint_every as u64 == 0 {
            model.train_step = step1;
            let (m, v) = opt.state_tensors();
            model.save(
                &cfg.checkpoint_dir.join("model_latest.ckpt"),
                Some((m, v, opt.step)),
            )?;
        }
        if log_lines.len() >= 64 {
            append_log(&log_path, &mut log_lines)?;
        }
    }
    append_log(&log_path, &mut log_lines)?;

    model.train_step = cfg.max_steps as u64;
    model.trained = true;
    let final_path = cfg.checkpoint_dir.join("model_final.ckpt");
    {
        let (m, v) = opt.state_tensors();
        model.save(&final_path, Some((m, v, opt.step)))?;
    }

    let k = (cfg.max_steps / 10).clamp(1, 50);
    let initial: f64 = losses.iter().take(k).sum::<f64>() / k as f64;
    let final_s: f64 = losses.iter().rev().take(k).sum::<f64>() / k as f64;
    let outcome = RunOutcome {
        checkpoint: final_path,
        steps_run: cfg.max_steps as u64 - start_step,
        initial_smoothed_loss: initial,
        final_smoothed_loss: final_s,
        passed: final_s < 0.7 * initial,
        val_losses,
    };
    Ok((model, outcome))
}

fn append_log(path: &Path, lines: &mut Vec<String>) -> Result<()> {
    use std::io::Write;
    if lines.is_empty() {
        return Ok(());
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for l in lines.drain(..) {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
