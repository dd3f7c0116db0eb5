//! Command-line entry point orchestrating the whole lifecycle: data
//! synthesis, oracle training, model training, restoration, evaluation, and
//! the scripted ablation sweeps.
//!
//! Exit codes: 0 success, 1 usage error, 2 failed acceptance gate,
//! 3 runtime failure. Logs go to standard error; machine-readable output
//! goes to files only.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::config::AppConfig;
use crate::degrade::{apply_degradation, sample_degradation_params, DegradationParams};
use crate::error::{Error, Result};
use crate::evaluation::{
    attention_heatmap, evaluate_run, metric_row, render_table, restored_path,
    MetricsReport,
};
use crate::guidance::{aagg_sample, GuidanceConfig, Modulation, RestoreOptions};
use crate::imageio::{load_rgb, save_rgb};
use crate::model::RestorationModel;
use crate::synthface::{
    build_dataset, train_oracles, DatasetSpec, OracleParams, RunManifest, Split,
};
use crate::training::{load_records, run_training, LoadedRecord};
use crate::util::{atomic_write, sub_seed};

#[derive(Parser)]
#[command(
    name = "agerestore",
    version,
    about = "Cross-age reference-based face restoration on a synthetic face world"
)]
struct Cli {
    /// JSON configuration file (strict keys); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic datasets (train, test splits, gap buckets).
    SynthData {
        /// One of: train, test-same, test-cross, buckets, all.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Train the age and identity evaluation oracles and gate them.
    TrainOracles,
    /// Train the restoration model.
    Train {
        /// Ablation: replace Gated Residual Fusion with direct addition.
        #[arg(long)]
        no_grf: bool,
        /// Resume from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Apply the degradation pipeline to an image file.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Blur kernel standard deviation.
        #[arg(long)]
        sigma: Option<f64>,
        /// Down/up scale factor.
        #[arg(long)]
        r: Option<f64>,
        /// Noise standard deviation (8-bit units).
        #[arg(long)]
        delta: Option<f64>,
        /// Compression quality.
        #[arg(long)]
        q: Option<u32>,
        /// Sample all parameters from the documented ranges instead.
        #[arg(long)]
        sample: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore every record of a manifest.
    Restore {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model checkpoint (defaults to the configured training output).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the per-record target age.
        #[arg(long)]
        target_age: Option<f64>,
        /// Inner correction count N (0 = plain conditioned sampling).
        #[arg(long)]
        inner_steps: Option<usize>,
        /// Timestep modulation: "sqrt" or "fixed:S".
        #[arg(long)]
        modulation: Option<String>,
        /// Plain age-prompt sampling without the guidance machinery.
        #[arg(long)]
        prompt_only: bool,
        /// Force the target prompt equal to the generic prompt.
        #[arg(long)]
        null_guidance: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Record identity-token attention and write averaged heatmaps.
        #[arg(long)]
        record_attn: bool,
    },
    /// Evaluate restored outputs against a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding restored_*.png outputs.
        #[arg(long)]
        restored: PathBuf,
        /// Report output path (pretty JSON).
        #[arg(long)]
        out: PathBuf,
        /// Oracle checkpoint (defaults to the configured path).
        #[arg(long)]
        oracles: Option<PathBuf>,
    },
    /// Scripted ablation sweeps.
    Ablate {
        /// 2 (age-gap buckets), 3 (prompt vs guidance), 4 (GRF on/off).
        #[arg(long)]
        table: Option<u8>,
        /// "10" (modulation scales) or "a" (inner-step sweep).
        #[arg(long)]
        figure: Option<String>,
    },
}

pub fn run_command(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e)
            if e.kind() == ErrorKind::DisplayHelp
                || e.kind() == ErrorKind::DisplayVersion =>
        {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    let cfg = match AppConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return 1;
        }
    };
    if let Some(threads) = cfg.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match dispatch(cli.command, &cfg) {
        Ok(()) => 0,
        Err(Error::GateFailed(msg)) => {
            eprintln!("acceptance gate failed: {msg}");
            2
        }
        Err(Error::InvalidRange(msg)) | Err(Error::Config(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            3
        }
    }
}

fn dispatch(cmd: Command, cfg: &AppConfig) -> Result<()> {
    match cmd {
        Command::SynthData { split } => cmd_synth_data(cfg, &split),
        Command::TrainOracles => cmd_train_oracles(cfg).map(|_| ()),
        Command::Train {
            no_grf,
            resume,
            steps,
        } => cmd_train(cfg, !no_grf, resume, steps).map(|_| ()),
        Command::Degrade {
            input,
            output,
            sigma,
            r,
            delta,
            q,
            sample,
            seed,
        } => cmd_degrade(cfg, &input, &output, sigma, r, delta, q, sample, seed),
        Command::Restore {
            manifest,
            out,
            checkpoint,
            target_age,
            inner_steps,
            modulation,
            prompt_only,
            null_guidance,
            seed,
            record_attn,
        } => {
            let manifest = RunManifest::load(&manifest)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.model_checkpoint(true));
            let (model, _) = RestorationModel::load(&ckpt, None)?;
            let mut gcfg = cfg.guidance.clone();
            if let Some(n) = inner_steps {
                gcfg.inner_steps = n;
            }
            if let Some(m) = &modulation {
                gcfg.modulation = parse_modulation(m)?;
            }
            let opts = RestoreRun {
                target_age_override: target_age,
                prompt_only,
                null_guidance,
                seed: seed.unwrap_or(cfg.seed),
                record_attn: record_attn.then_some(16),
            };
            restore_manifest(cfg, &model, &manifest, &gcfg, &out, &opts)
        }
        Command::Eval {
            manifest,
            restored,
            out,
            oracles,
        } => {
            let manifest = RunManifest::load(&manifest)?;
            let oracle_path = oracles.unwrap_or_else(|| cfg.oracle_checkpoint());
            let oracle_params = OracleParams::load(&oracle_path, &cfg.oracle)?;
            let report = evaluate_run(&manifest, &restored, &oracle_params, &cfg.hash())?;
            atomic_write(&out, report.to_pretty_json()?.as_bytes())?;
            eprintln!(
                "{}",
                render_table(
                    "evaluation",
                    &["split", "PSNR", "SSIM", "IDS", "AGE"],
                    &[metric_row(
                        &format!("{:?}", report.split),
                        &report.aggregates,
                        true
                    )],
                )
            );
            Ok(())
        }
        Command::Ablate { table, figure } => cmd_ablate(cfg, table, figure.as_deref()),
    }
}

pub fn parse_modulation(s: &str) -> Result<Modulation> {
    if s == "sqrt" {
        return Ok(Modulation::SqrtAlphaBar);
    }
    if let Some(v) = s.strip_prefix("fixed:") {
        let x: f64 = v
            .parse()
            .map_err(|_| Error::Config(format!("bad fixed modulation value {v}")))?;
        return Ok(Modulation::Fixed(x));
    }
    Err(Error::Config(format!(
        "modulation must be 'sqrt' or 'fixed:S', got {s}"
    )))
}

// ---- synth-data ----

fn cmd_synth_data(cfg: &AppConfig, split: &str) -> Result<()> {
    let build_split = |split: Split| -> Result<()> {
        let d = &cfg.dataset;
        let spec = match split {
            Split::TrainSameAge => DatasetSpec::same_age(
                split,
                d.train_ids,
                d.train_imgs_per_id,
                d.image_size,
                cfg.seed,
            ),
            Split::TestSameAge => DatasetSpec::same_age(
                split,
                d.test_same_ids,
                d.test_same_imgs_per_id,
                d.image_size,
                cfg.seed,
            ),
            Split::TestCrossAge => {
                DatasetSpec::cross_age(d.test_cross_ids, d.age_gap, d.image_size, cfg.seed)
            }
        };
        let manifest = build_dataset(&spec, &cfg.data_dir(split))?;
        eprintln!(
            "built {:?}: {} records under {}",
            split,
            manifest.records.len(),
            cfg.data_dir(split).display()
        );
        Ok(())
    };
    match split {
        "train" => build_split(Split::TrainSameAge),
        "test-same" => build_split(Split::TestSameAge),
        "test-cross" => build_split(Split::TestCrossAge),
        "buckets" => build_buckets(cfg),
        "all" => {
            build_split(Split::TrainSameAge)?;
            build_split(Split::TestSameAge)?;
            build_split(Split::TestCrossAge)?;
            build_buckets(cfg)
        }
        other => Err(Error::Config(format!("unknown split {other}"))),
    }
}

fn build_buckets(cfg: &AppConfig) -> Result<()> {
    for (k, (label, lo, hi)) in crate::evaluation::GAP_BUCKETS.iter().enumerate() {
        let spec = DatasetSpec {
            split: Split::TestCrossAge,
            n_ids: cfg.dataset.bucket_ids,
            imgs_per_id: 0,
            age_gap: lo.max(0.0),
            age_gap_max: Some(hi.min(100.0)),
            image_size: cfg.dataset.image_size,
            seed: cfg.seed,
        };
        let manifest = build_dataset(&spec, &cfg.bucket_dir(k))?;
        eprintln!("built gap bucket {label}: {} records", manifest.records.len());
    }
    Ok(())
}

fn ensure_manifest(cfg: &AppConfig, split: Split) -> Result<RunManifest> {
    let path = cfg.manifest_path(split);
    if !path.exists() {
        let name = match split {
            Split::TrainSameAge => "train",
            Split::TestSameAge => "test-same",
            Split::TestCrossAge => "test-cross",
        };
        cmd_synth_data(cfg, name)?;
    }
    RunManifest::load(&path)
}

fn ensure_buckets(cfg: &AppConfig) -> Result<Vec<RunManifest>> {
    if !cfg.bucket_dir(0).join("manifest.jsonl").exists() {
        build_buckets(cfg)?;
    }
    (0..crate::evaluation::GAP_BUCKETS.len())
        .map(|k| RunManifest::load(&cfg.bucket_dir(k).join("manifest.jsonl")))
        .collect()
}

// ---- oracles ----

pub fn cmd_train_oracles(cfg: &AppConfig) -> Result<OracleParams> {
    let ckpt = cfg.oracle_checkpoint();
    let report_path = cfg.oracle_report_path();
    let (params, report) = train_oracles(&cfg.oracle, Some(&ckpt), Some(&report_path))?;
    eprintln!(
        "oracles: age MAE {:.2}, intra {:.3}, inter {:.3}, margin {:.3}",
        report.age_mae_clean, report.intra_cosine_mean, report.inter_cosine_mean, report.margin
    );
    if !report.passed {
        return Err(Error::GateFailed(format!(
            "oracle report below thresholds (see {})",
            report_path.display()
        )));
    }
    Ok(params)
}

fn ensure_oracles(cfg: &AppConfig) -> Result<OracleParams> {
    let path = cfg.oracle_checkpoint();
    if path.exists() {
        return OracleParams::load(&path, &cfg.oracle);
    }
    cmd_train_oracles(cfg)
}

// ---- training ----

pub fn cmd_train(
    cfg: &AppConfig,
    grf: bool,
    resume: bool,
    steps: Option<usize>,
) -> Result<RestorationModel> {
    let train_manifest = ensure_manifest(cfg, Split::TrainSameAge)?;
    let val_manifest = ensure_manifest(cfg, Split::TestSameAge)?;
    let mut model_config = cfg.model.clone();
    model_config.grf_enabled = grf;
    let mut tcfg = cfg.train.clone();
    tcfg.checkpoint_dir = cfg.train_dir(grf);
    tcfg.seed = cfg.seed;
    if let Some(s) = steps {
        tcfg.max_steps = s;
    }
    let schedule = cfg.schedule()?;
    let resume_path = resume.then(|| tcfg.checkpoint_dir.join("model_latest.ckpt"));
    let (model, outcome) = run_training(
        &model_config,
        &tcfg,
        &schedule,
        &train_manifest,
        Some(&val_manifest),
        resume_path.as_deref(),
    )?;
    eprintln!(
        "training done: smoothed loss {:.4} -> {:.4} over {} steps (checkpoint {})",
        outcome.initial_smoothed_loss,
        outcome.final_smoothed_loss,
        outcome.steps_run,
        outcome.checkpoint.display()
    );
    if !outcome.passed {
        return Err(Error::GateFailed(format!(
            "final smoothed loss {:.4} did not drop below 0.7x initial {:.4}",
            outcome.final_smoothed_loss, outcome.initial_smoothed_loss
        )));
    }
    Ok(model)
}

fn ensure_model(cfg: &AppConfig, grf: bool) -> Result<RestorationModel> {
    let path = cfg.model_checkpoint(grf);
    if path.exists() {
        let mut expect = cfg.model.clone();
        expect.grf_enabled = grf;
        expect.denoiser.lambda_id = cfg.train.lambda_id;
        return Ok(RestorationModel::load(&path, Some(&expect))?.0);
    }
    cmd_train(cfg, grf, false, None)
}

// ---- degrade ----

#[allow(clippy::too_many_arguments)]
fn cmd_degrade(
    cfg: &AppConfig,
    input: &Path,
    output: &Path,
    sigma: Option<f64>,
    r: Option<f64>,
    delta: Option<f64>,
    q: Option<u32>,
    sample: bool,
    seed: Option<u64>,
) -> Result<()> {
    let img = load_rgb(input)?;
    let seed = seed.unwrap_or(cfg.seed);
    let params = if sample {
        let mut rng = crate::util::sub_rng(seed, "degrade-cli-params", 0);
        sample_degradation_params(&mut rng)
    } else {
        let near = DegradationParams::near_identity();
        DegradationParams {
            sigma_blur: sigma.unwrap_or(near.sigma_blur),
            r: r.unwrap_or(near.r),
            delta: delta.unwrap_or(near.delta),
            q: q.unwrap_or(near.q),
        }
    };
    let out = apply_degradation(&img, &params, seed)?;
    save_rgb(output, &out)?;
    let sidecar = serde_json::json!({
        "params": params,
        "seed": seed,
        "config_hash": cfg.hash(),
    });
    atomic_write(
        &output.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?.as_bytes(),
    )?;
    eprintln!("degraded {} -> {}", input.display(), output.display());
    Ok(())
}

// ---- restore ----

#[derive(Clone, Default)]
pub struct RestoreRun {
    pub target_age_override: Option<f64>,
    pub prompt_only: bool,
    pub null_guidance: bool,
    pub seed: u64,
    pub record_attn: Option<usize>,
}

/// Restore every manifest record into `out_dir`, writing
/// `restored_<id>.png` plus a JSON sidecar per record. Existing outputs are
/// kept, which makes reruns resumable.
pub fn restore_manifest(
    cfg: &AppConfig,
    model: &RestorationModel,
    manifest: &RunManifest,
    gcfg: &GuidanceConfig,
    out_dir: &Path,
    run: &RestoreRun,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records = load_records(manifest)?;
    let schedule = cfg.schedule()?;
    let config_hash = cfg.hash();
    let results: Vec<Result<()>> = records
        .par_iter()
        .zip(manifest.records.par_iter())
        .map(|(rec, raw)| {
            let out_img = restored_path(out_dir, rec.identity_id);
            if out_img.exists() {
                return Ok(());
            }
            restore_one(cfg, model, &schedule, rec, raw, gcfg, &out_img, run, &config_hash)
        })
        .collect();
    for r in results {
        r?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn restore_one(
    _cfg: &AppConfig,
    model: &RestorationModel,
    schedule: &crate::diffusion::NoiseSchedule,
    rec: &LoadedRecord,
    raw: &crate::synthface::ManifestRecord,
    gcfg: &GuidanceConfig,
    out_img: &Path,
    run: &RestoreRun,
    config_hash: &str,
) -> Result<()> {
    let lq = match (&rec.lq_pixel, rec.degradation) {
        (Some(lq), _) => lq.clone(),
        (None, Some(p)) => apply_degradation(&rec.gt_pixel, &p, rec.degradation_seed)?,
        (None, None) => {
            return Err(Error::Config(format!(
                "record {} has no degraded input and no recorded parameters",
                rec.identity_id
            )))
        }
    };
    let mut g = gcfg.clone();
    g.target_age = run.target_age_override.unwrap_or(rec.gt_age);
    let opts = RestoreOptions {
        seed: sub_seed(run.seed, "restore-instance", rec.identity_id),
        prompt_only: run.prompt_only,
        force_generic_target: run.null_guidance,
        record_attn_side: run.record_attn,
        reference_names: raw
            .references
            .iter()
            .map(|r| r.image.display().to_string())
            .collect(),
        config_hash: config_hash.to_string(),
    };
    let out = aagg_sample(model, &lq, &rec.refs, &g, schedule, &opts)?;
    save_rgb(out_img, &out.image)?;
    atomic_write(
        &out_img.with_extension("json"),
        serde_json::to_string_pretty(&out.sidecar)?.as_bytes(),
    )?;
    if let Some(side) = run.record_attn {
        let map = attention_heatmap(&out.attn_traces, side)?;
        let payload = serde_json::json!({
            "side": side,
            "values": map.data(),
        });
        atomic_write(
            &out_img.with_file_name(format!("heatmap_{:07}.json", rec.identity_id)),
            serde_json::to_string_pretty(&payload)?.as_bytes(),
        )?;
    }
    Ok(())
}

// ---- ablate ----

fn cmd_ablate(cfg: &AppConfig, table: Option<u8>, figure: Option<&str>) -> Result<()> {
    match (table, figure) {
        (Some(2), None) => ablate_table2(cfg),
        (Some(3), None) => ablate_table3(cfg),
        (Some(4), None) => ablate_table4(cfg),
        (None, Some("10")) => ablate_figure10(cfg),
        (None, Some("a")) => ablate_figure_a(cfg),
        _ => Err(Error::Config(
            "pass exactly one of --table {2,3,4} or --figure {10,a}".to_string(),
        )),
    }
}

fn ablate_out(cfg: &AppConfig, name: &str) -> PathBuf {
    cfg.runs_dir().join("ablate").join(name)
}

fn eval_to(
    cfg: &AppConfig,
    manifest: &RunManifest,
    restored: &Path,
    oracles: &OracleParams,
    out: &Path,
) -> Result<MetricsReport> {
    let report = evaluate_run(manifest, restored, oracles, &cfg.hash())?;
    atomic_write(out, report.to_pretty_json()?.as_bytes())?;
    Ok(report)
}

/// Age-gap bucket sweep (robustness across gap intervals).
fn ablate_table2(cfg: &AppConfig) -> Result<()> {
    let oracles = ensure_oracles(cfg)?;
    let model = ensure_model(cfg, true)?;
    let buckets = ensure_buckets(cfg)?;
    let mut rows = Vec::new();
    for (k, manifest) in buckets.iter().enumerate() {
        let label = crate::evaluation::GAP_BUCKETS[k].0;
        let dir = ablate_out(cfg, &format!("t2_bucket_{k}"));
        restore_manifest(
            cfg,
            &model,
            manifest,
            &cfg.guidance,
            &dir,
            &RestoreRun {
                seed: cfg.seed,
                ..RestoreRun::default()
            },
        )?;
        let report = eval_to(
            cfg,
            manifest,
            &dir,
            &oracles,
            &ablate_out(cfg, &format!("t2_bucket_{k}.json")),
        )?;
        rows.push(metric_row(label, &report.aggregates, true));
    }
    let table = render_table(
        "age-gap buckets (guided restoration)",
        &["gap", "PSNR", "SSIM", "IDS", "AGE"],
        &rows,
    );
    eprintln!("{table}");
    atomic_write(&ablate_out(cfg, "table2.txt"), table.as_bytes())?;
    Ok(())
}

/// Age prompt alone vs age gradient guidance on the cross-age set.
fn ablate_table3(cfg: &AppConfig) -> Result<()> {
    let oracles = ensure_oracles(cfg)?;
    let model = ensure_model(cfg, true)?;
    let manifest = ensure_manifest(cfg, Split::TestCrossAge)?;
    let prompt_dir = ablate_out(cfg, "t3_prompt");
    let mut prompt_cfg = cfg.guidance.clone();
    prompt_cfg.inner_steps = 0;
    restore_manifest(
        cfg,
        &model,
        &manifest,
        &prompt_cfg,
        &prompt_dir,
        &RestoreRun {
            seed: cfg.seed,
            prompt_only: true,
            ..RestoreRun::default()
        },
    )?;
    let guided_dir = ablate_out(cfg, "t3_guidance");
    restore_manifest(
        cfg,
        &model,
        &manifest,
        &cfg.guidance,
        &guided_dir,
        &RestoreRun {
            seed: cfg.seed,
            ..RestoreRun::default()
        },
    )?;
    let prompt_report = eval_to(cfg, &manifest, &prompt_dir, &oracles, &ablate_out(cfg, "t3_prompt.json"))?;
    let guided_report = eval_to(cfg, &manifest, &guided_dir, &oracles, &ablate_out(cfg, "t3_guidance.json"))?;
    let table = render_table(
        "inference strategies (cross-age)",
        &["strategy", "PSNR", "SSIM", "IDS", "AGE"],
        &[
            metric_row("age prompt", &prompt_report.aggregates, true),
            metric_row("age guidance", &guided_report.aggregates, true),
        ],
    );
    eprintln!("{table}");
    atomic_write(&ablate_out(cfg, "table3.txt"), table.as_bytes())?;
    Ok(())
}

/// GRF vs direct-addition fusion, same seeds, same-age evaluation.
fn ablate_table4(cfg: &AppConfig) -> Result<()> {
    let oracles = ensure_oracles(cfg)?;
    let manifest = ensure_manifest(cfg, Split::TestSameAge)?;
    let mut rows = Vec::new();
    for (label, grf) in [("w/o GRF", false), ("w/ GRF", true)] {
        let model = ensure_model(cfg, grf)?;
        let dir = ablate_out(cfg, if grf { "t4_grf" } else { "t4_no_grf" });
        // Same-age restoration conditions on the generic prompt only.
        let mut g = cfg.guidance.clone();
        g.inner_steps = 0;
        g.negative_descriptors = false;
        restore_manifest(
            cfg,
            &model,
            &manifest,
            &g,
            &dir,
            &RestoreRun {
                seed: cfg.seed,
                prompt_only: true,
                null_guidance: true,
                ..RestoreRun::default()
            },
        )?;
        let report = eval_to(
            cfg,
            &manifest,
            &dir,
            &oracles,
            &ablate_out(cfg, if grf { "t4_grf.json" } else { "t4_no_grf.json" }),
        )?;
        rows.push(metric_row(label, &report.aggregates, false));
    }
    let table = render_table(
        "gated residual fusion (same-age)",
        &["fusion", "PSNR", "SSIM", "IDS"],
        &rows,
    );
    eprintln!("{table}");
    atomic_write(&ablate_out(cfg, "table4.txt"), table.as_bytes())?;
    Ok(())
}

/// Modulation-scale grid: fixed 0 / 0.5 / 1.0 vs adaptive sqrt(alpha_bar).
fn ablate_figure10(cfg: &AppConfig) -> Result<()> {
    let oracles = ensure_oracles(cfg)?;
    let model = ensure_model(cfg, true)?;
    let manifest = ensure_manifest(cfg, Split::TestCrossAge)?;
    let modes = [
        ("fixed:0", Modulation::Fixed(0.0)),
        ("fixed:0.5", Modulation::Fixed(0.5)),
        ("fixed:1.0", Modulation::Fixed(1.0)),
        ("sqrt", Modulation::SqrtAlphaBar),
    ];
    let mut rows = Vec::new();
    for (i, (label, m)) in modes.iter().enumerate() {
        let mut g = cfg.guidance.clone();
        g.modulation = *m;
        let dir = ablate_out(cfg, &format!("f10_{i}"));
        restore_manifest(
            cfg,
            &model,
            &manifest,
            &g,
            &dir,
            &RestoreRun {
                seed: cfg.seed,
                ..RestoreRun::default()
            },
        )?;
        let report = eval_to(cfg, &manifest, &dir, &oracles, &ablate_out(cfg, &format!("f10_{i}.json")))?;
        let mean_norm = mean_correction_norm(&dir)?;
        let mut row = metric_row(label, &report.aggregates, true);
        row.push(format!("{mean_norm:.4}"));
        rows.push(row);
    }
    let table = render_table(
        "timestep modulation scales (cross-age)",
        &["scale", "PSNR", "SSIM", "IDS", "AGE", "corr-norm"],
        &rows,
    );
    eprintln!("{table}");
    atomic_write(&ablate_out(cfg, "figure10.txt"), table.as_bytes())?;
    Ok(())
}

/// Inner-step sweep N in {1, 3, 5, 7}.
fn ablate_figure_a(cfg: &AppConfig) -> Result<()> {
    let oracles = ensure_oracles(cfg)?;
    let model = ensure_model(cfg, true)?;
    let manifest = ensure_manifest(cfg, Split::TestCrossAge)?;
    let mut rows = Vec::new();
    for n in [1usize, 3, 5, 7] {
        let mut g = cfg.guidance.clone();
        g.inner_steps = n;
        let dir = ablate_out(cfg, &format!("fa_n{n}"));
        restore_manifest(
            cfg,
            &model,
            &manifest,
            &g,
            &dir,
            &RestoreRun {
                seed: cfg.seed,
                ..RestoreRun::default()
            },
        )?;
        let report = eval_to(cfg, &manifest, &dir, &oracles, &ablate_out(cfg, &format!("fa_n{n}.json")))?;
        rows.push(metric_row(&format!("N={n}"), &report.aggregates, true));
    }
    let table = render_table(
        "inner optimization steps (cross-age)",
        &["N", "PSNR", "SSIM", "IDS", "AGE"],
        &rows,
    );
    eprintln!("{table}");
    atomic_write(&ablate_out(cfg, "figure_a.txt"), table.as_bytes())?;
    Ok(())
}

/// Mean per-step correction norm across all sidecars in a directory.
fn mean_correction_norm(dir: &Path) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().map(|x| x == "json").unwrap_or(false)
                && p.file_name()
                    .map(|n| n.to_string_lossy().starts_with("restored_"))
                    .unwrap_or(false)
        })
        .collect();
    paths.sort();
    for p in paths {
        let text = crate::util::read_to_string(&p)?;
        let sidecar: crate::guidance::RestoreSidecar = serde_json::from_str(&text)?;
        for step in &sidecar.correction_norms {
            for n in step {
                total += n;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}
