//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. The trained-pipeline criteria share one fixture that
//! synthesizes data, trains the oracles and both model variants, restores
//! the test sets, and evaluates them exactly once.

use std::path::Path;
use std::sync::Arc;

use once_cell::sync::Lazy;

use agerestore::config::AppConfig;
use agerestore::degrade::{
    apply_degradation, sample_degradation_params, DegradationParams, NOISE_RANGE, QUALITY_RANGE,
    SCALE_RANGE, SIGMA_RANGE,
};
use agerestore::denoiser::{ConditionBundle, DenoiserConfig};
use agerestore::diffusion::{
    analytic_gaussian_eps, ddim_step_standard, gaussian_log_density, NoiseSchedule,
};
use agerestore::evaluation::{attention_heatmap, evaluate_run, psnr, MetricsReport};
use agerestore::guidance::{
    aagg_sample, age_gradient, AnalyticGaussianModel, GuidanceConfig, InnerLoop, Modulation,
    RestoreOptions,
};
use agerestore::imageio::load_rgb;
use agerestore::model::{ModelConfig, RestorationModel};
use agerestore::nn::Ctx;
use agerestore::synthface::{
    render_face, train_oracles, FaceNuisance, FaceSpec, OracleParams, RunManifest,
};
use agerestore::tensor::Tensor;
use agerestore::training::{batch_loss_and_grads, load_records, run_training, TrainConfig};
use agerestore::util::{sub_rng, sub_seed};
use agerestore::vocab;

fn pass(criterion: &str, detail: String) {
    println!("[{criterion}] PASS: {detail}");
}

// ---------------------------------------------------------------------------
// Shared trained pipeline for the directional criteria.
// ---------------------------------------------------------------------------

/// Acceptance-scale budgets, tuned once on this toy world.
const ACC_SEED: u64 = 7;
const ACC_TRAIN_STEPS: usize = 9000;
const ACC_DDIM_STEPS: usize = 20;
const ACC_LAMBDA: f64 = 300.0;
const ACC_AGE_PROMPT_P: f64 = 0.8;

fn acceptance_config(root: &Path) -> AppConfig {
    let mut cfg = AppConfig::default();
    cfg.seed = ACC_SEED;
    cfg.workspace_root = root.to_path_buf();
    cfg.dataset.train_ids = 120;
    cfg.dataset.train_imgs_per_id = 6;
    cfg.dataset.test_same_ids = 24;
    cfg.dataset.test_cross_ids = 50;
    cfg.dataset.bucket_ids = 8;
    cfg.model.denoiser.base_channels = 16;
    cfg.train.lr = 1.2e-3;
    cfg.train.batch_size = 8;
    cfg.train.max_steps = ACC_TRAIN_STEPS;
    cfg.train.age_prompt_p = ACC_AGE_PROMPT_P;
    cfg.train.eval_every = 0;
    cfg.train.checkpoint_every = 2000;
    cfg.train.seed = ACC_SEED;
    cfg.oracle.age_steps = 3000;
    cfg.oracle.batch = 16;
    cfg.guidance.inner_steps = 5;
    cfg.guidance.step_scale = ACC_LAMBDA;
    cfg.guidance.ddim_steps = ACC_DDIM_STEPS;
    cfg.validate().unwrap();
    cfg
}

struct Pipeline {
    _ws: tempfile::TempDir,
    cfg: AppConfig,
    oracles: OracleParams,
    model: Arc<RestorationModel>,
    cross: RunManifest,
    buckets: Vec<RunManifest>,
    report_prompt: MetricsReport,
    report_guided: MetricsReport,
    report_same_grf: MetricsReport,
    report_same_nogrf: MetricsReport,
    bucket_reports: Vec<MetricsReport>,
}

static PIPELINE: Lazy<Pipeline> = Lazy::new(build_pipeline);

fn train_variant(cfg: &AppConfig, grf: bool, train: &RunManifest) -> RestorationModel {
    let mut model_config = cfg.model.clone();
    model_config.grf_enabled = grf;
    let mut tcfg = cfg.train.clone();
    tcfg.checkpoint_dir = cfg.train_dir(grf);
    let schedule = cfg.schedule().unwrap();
    let (model, outcome) =
        run_training(&model_config, &tcfg, &schedule, train, None, None).unwrap();
    assert!(
        outcome.passed,
        "training loss gate: {:.4} -> {:.4}",
        outcome.initial_smoothed_loss, outcome.final_smoothed_loss
    );
    model
}

fn restore_set(
    cfg: &AppConfig,
    model: &RestorationModel,
    manifest: &RunManifest,
    gcfg: &GuidanceConfig,
    run: &agerestore::cli::RestoreRun,
    name: &str,
) -> std::path::PathBuf {
    let dir = cfg.runs_dir().join("acc").join(name);
    agerestore::cli::restore_manifest(cfg, model, manifest, gcfg, &dir, run).unwrap();
    dir
}

fn build_pipeline() -> Pipeline {
    let ws = tempfile::tempdir().unwrap();
    let cfg = acceptance_config(ws.path());
    eprintln!("[pipeline] synthesizing datasets");
    let train = agerestore::synthface::build_dataset(
        &agerestore::synthface::DatasetSpec::same_age(
            agerestore::synthface::Split::TrainSameAge,
            cfg.dataset.train_ids,
            cfg.dataset.train_imgs_per_id,
            cfg.dataset.image_size,
            cfg.seed,
        ),
        &cfg.data_dir(agerestore::synthface::Split::TrainSameAge),
    )
    .unwrap();
    let same = agerestore::synthface::build_dataset(
        &agerestore::synthface::DatasetSpec::same_age(
            agerestore::synthface::Split::TestSameAge,
            cfg.dataset.test_same_ids,
            cfg.dataset.test_same_imgs_per_id,
            cfg.dataset.image_size,
            cfg.seed,
        ),
        &cfg.data_dir(agerestore::synthface::Split::TestSameAge),
    )
    .unwrap();
    let cross = agerestore::synthface::build_dataset(
        &agerestore::synthface::DatasetSpec::cross_age(
            cfg.dataset.test_cross_ids,
            cfg.dataset.age_gap,
            cfg.dataset.image_size,
            cfg.seed,
        ),
        &cfg.data_dir(agerestore::synthface::Split::TestCrossAge),
    )
    .unwrap();
    let mut buckets = Vec::new();
    for (k, (_, lo, hi)) in agerestore::evaluation::GAP_BUCKETS.iter().enumerate() {
        buckets.push(
            agerestore::synthface::build_dataset(
                &agerestore::synthface::DatasetSpec {
                    split: agerestore::synthface::Split::TestCrossAge,
                    n_ids: cfg.dataset.bucket_ids,
                    imgs_per_id: 0,
                    age_gap: lo.max(0.0),
                    age_gap_max: Some(hi.min(100.0)),
                    image_size: cfg.dataset.image_size,
                    seed: cfg.seed,
                },
                &cfg.bucket_dir(k),
            )
            .unwrap(),
        );
    }

    eprintln!("[pipeline] training oracles");
    let (oracles, oracle_report) = train_oracles(
        &cfg.oracle,
        Some(&cfg.oracle_checkpoint()),
        Some(&cfg.oracle_report_path()),
    )
    .unwrap();
    assert!(
        oracle_report.passed,
        "oracle gates: {oracle_report:?}"
    );

    eprintln!("[pipeline] training model (GRF), {ACC_TRAIN_STEPS} steps");
    let model = train_variant(&cfg, true, &train);
    eprintln!("[pipeline] training model (no GRF), same seeds");
    let model_nogrf = train_variant(&cfg, false, &train);

    // Anti-circularity: evaluation oracles and the model share no parameter
    // names.
    for (name, _) in oracles.age_store.iter().chain(oracles.id_store.iter()) {
        assert!(model.store.index_of(name).is_none(), "shared parameter {name}");
    }

    eprintln!("[pipeline] restoring cross-age set (prompt-only and guided)");
    let hash = cfg.hash();
    let prompt_dir = restore_set(
        &cfg,
        &model,
        &cross,
        &{
            let mut g = cfg.guidance.clone();
            g.inner_steps = 0;
            g
        },
        &agerestore::cli::RestoreRun {
            seed: cfg.seed,
            prompt_only: true,
            ..Default::default()
        },
        "cross_prompt",
    );
    let guided_dir = restore_set(
        &cfg,
        &model,
        &cross,
        &cfg.guidance,
        &agerestore::cli::RestoreRun {
            seed: cfg.seed,
            ..Default::default()
        },
        "cross_guided",
    );
    let report_prompt = evaluate_run(&cross, &prompt_dir, &oracles, &hash).unwrap();
    let report_guided = evaluate_run(&cross, &guided_dir, &oracles, &hash).unwrap();

    eprintln!("[pipeline] restoring same-age set with both fusion variants");
    let mut same_g = cfg.guidance.clone();
    same_g.inner_steps = 0;
    same_g.negative_descriptors = false;
    let same_run = agerestore::cli::RestoreRun {
        seed: cfg.seed,
        prompt_only: true,
        null_guidance: true,
        ..Default::default()
    };
    let grf_dir = restore_set(&cfg, &model, &same, &same_g, &same_run, "same_grf");
    let nogrf_dir = restore_set(&cfg, &model_nogrf, &same, &same_g, &same_run, "same_nogrf");
    let report_same_grf = evaluate_run(&same, &grf_dir, &oracles, &hash).unwrap();
    let report_same_nogrf = evaluate_run(&same, &nogrf_dir, &oracles, &hash).unwrap();

    eprintln!("[pipeline] restoring age-gap buckets");
    let mut bucket_reports = Vec::new();
    for (k, manifest) in buckets.iter().enumerate() {
        let dir = restore_set(
            &cfg,
            &model,
            manifest,
            &cfg.guidance,
            &agerestore::cli::RestoreRun {
                seed: cfg.seed,
                ..Default::default()
            },
            &format!("bucket_{k}"),
        );
        bucket_reports.push(evaluate_run(manifest, &dir, &oracles, &hash).unwrap());
    }

    Pipeline {
        _ws: ws,
        cfg,
        oracles,
        model: Arc::new(model),
        cross,
        buckets,
        report_prompt,
        report_guided,
        report_same_grf,
        report_same_nogrf,
        bucket_reports,
    }
}

// ---------------------------------------------------------------------------
// Criterion 4: null-guidance bitwise identity.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_null_guidance_bitwise_identity() {
    let p = &*PIPELINE;
    let records = load_records(&p.cross).unwrap();
    let rec = &records[0];
    let lq = rec.lq_pixel.clone().unwrap();
    let schedule = p.cfg.schedule().unwrap();
    let mut g = p.cfg.guidance.clone();
    g.target_age = rec.gt_age;
    let base_opts = RestoreOptions {
        seed: 424242,
        force_generic_target: true,
        ..Default::default()
    };
    // Guided run whose target prompt equals the generic prompt.
    let mut g5 = g.clone();
    g5.inner_steps = 5;
    let guided = aagg_sample(&p.model, &lq, &rec.refs, &g5, &schedule, &base_opts).unwrap();
    // Plain N=0 sampling under the same (generic) prompt and seed.
    let mut g0 = g.clone();
    g0.inner_steps = 0;
    let plain = aagg_sample(&p.model, &lq, &rec.refs, &g0, &schedule, &base_opts).unwrap();
    assert_eq!(
        guided.latent.data(),
        plain.latent.data(),
        "trajectories must match bit-for-bit"
    );
    assert_eq!(guided.image.data(), plain.image.data());
    // All guided corrections were exactly zero.
    let max_norm = guided
        .sidecar
        .correction_norms
        .iter()
        .flatten()
        .cloned()
        .fold(0.0f64, f64::max);
    assert_eq!(max_norm, 0.0);
    pass(
        "criterion 4",
        "N=5 with target prompt == generic prompt equals N=0 sampling bit-for-bit".to_string(),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: guidance beats the prompt on age error without identity cost.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_guidance_vs_prompt_directional() {
    let p = &*PIPELINE;
    let age_prompt = p.report_prompt.aggregates.age_mae;
    let age_guided = p.report_guided.aggregates.age_mae;
    let ids_prompt = p.report_prompt.aggregates.mean_ids;
    let ids_guided = p.report_guided.aggregates.mean_ids;
    assert!(p.report_prompt.per_instance.len() >= 50);
    assert!(
        age_guided <= 0.8 * age_prompt,
        "AGE guided {age_guided:.2} vs 0.8 * prompt {age_prompt:.2}"
    );
    let ids_drop = ids_prompt - ids_guided;
    assert!(
        ids_drop < 0.05,
        "IDS drop {ids_drop:.3} (prompt {ids_prompt:.3}, guided {ids_guided:.3})"
    );
    pass(
        "criterion 8",
        format!(
            "AGE {age_prompt:.2} -> {age_guided:.2} ({:.0}% reduction), IDS {ids_prompt:.3} -> {ids_guided:.3}",
            100.0 * (1.0 - age_guided / age_prompt)
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: GRF beats direct addition on same-age identity similarity.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_grf_vs_direct_addition() {
    let p = &*PIPELINE;
    let with_grf = p.report_same_grf.aggregates.mean_ids;
    let without = p.report_same_nogrf.aggregates.mean_ids;
    assert!(
        with_grf >= without + 0.02,
        "IDS with GRF {with_grf:.3} vs without {without:.3}"
    );
    pass(
        "criterion 9",
        format!("same-age IDS {with_grf:.3} (GRF) vs {without:.3} (direct addition)"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: identity similarity is stable across age-gap buckets.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_age_gap_bucket_stability() {
    let p = &*PIPELINE;
    let ids: Vec<f64> = p
        .bucket_reports
        .iter()
        .map(|r| r.aggregates.mean_ids)
        .collect();
    let lo = ids.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ids.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(
        hi - lo < 0.05,
        "IDS spread {:.3} over buckets {ids:?}",
        hi - lo
    );
    pass(
        "criterion 10",
        format!("bucket IDS {ids:?}, spread {:.3}", hi - lo),
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: modulation harness.
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_modulation_harness() {
    let p = &*PIPELINE;
    let records = load_records(&p.cross).unwrap();
    let schedule = p.cfg.schedule().unwrap();
    let mut mean_norms = std::collections::BTreeMap::new();
    for (name, modulation) in [
        ("fixed0", Modulation::Fixed(0.0)),
        ("fixed05", Modulation::Fixed(0.5)),
        ("fixed10", Modulation::Fixed(1.0)),
        ("sqrt", Modulation::SqrtAlphaBar),
    ] {
        let mut norms = Vec::new();
        for rec in records.iter().take(2) {
            let lq = rec.lq_pixel.clone().unwrap();
            let mut g = p.cfg.guidance.clone();
            g.target_age = rec.gt_age;
            g.modulation = modulation;
            let opts = RestoreOptions {
                seed: 7,
                ..Default::default()
            };
            let out = aagg_sample(&p.model, &lq, &rec.refs, &g, &schedule, &opts).unwrap();
            assert!(out.latent.is_finite(), "{name} produced non-finite latents");
            let flat: Vec<f64> = out
                .sidecar
                .correction_norms
                .iter()
                .flatten()
                .cloned()
                .collect();
            norms.push(flat.iter().sum::<f64>() / flat.len().max(1) as f64);

            if matches!(modulation, Modulation::Fixed(s) if s == 0.0) {
                // Zero modulation equals plain sampling exactly.
                let mut g0 = g.clone();
                g0.inner_steps = 0;
                let plain =
                    aagg_sample(&p.model, &lq, &rec.refs, &g0, &schedule, &opts).unwrap();
                assert_eq!(out.latent.data(), plain.latent.data());
            }
        }
        mean_norms.insert(name, norms.iter().sum::<f64>() / norms.len() as f64);
    }
    assert_eq!(mean_norms["fixed0"], 0.0);
    assert!(
        mean_norms["fixed10"] > mean_norms["sqrt"],
        "fixed(1.0) norm {} vs sqrt {}",
        mean_norms["fixed10"],
        mean_norms["sqrt"]
    );
    pass(
        "criterion 11",
        format!("mean correction norms: {mean_norms:?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 12: identity-attention heatmaps are stable across reference age.
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_attention_stability() {
    let p = &*PIPELINE;
    let records = load_records(&p.cross).unwrap();
    let rec = &records[1];
    let lq = rec.lq_pixel.clone().unwrap();
    let schedule = p.cfg.schedule().unwrap();
    // Same identity at very different ages, fresh renders.
    let factors = FaceSpec::identity_factors_for(p.cfg.seed, p.cross.records[1].identity_id);
    let mut maps = Vec::new();
    for (i, age) in [12.0, 88.0].iter().enumerate() {
        let spec = FaceSpec::new(factors.clone(), *age, FaceNuisance::default());
        let r = render_face(&spec, p.cfg.dataset.image_size).unwrap();
        let mut g = p.cfg.guidance.clone();
        g.target_age = rec.gt_age;
        let opts = RestoreOptions {
            seed: 99,
            record_attn_side: Some(16),
            ..Default::default()
        };
        let out = aagg_sample(
            &p.model,
            &lq,
            &[(r.image, r.mask)],
            &g,
            &schedule,
            &opts,
        )
        .unwrap();
        let map = attention_heatmap(&out.attn_traces, 16).unwrap();
        assert_eq!(map.shape(), &[16, 16]);
        let _ = i;
        maps.push(map);
    }
    let cos = maps[0].dot(&maps[1]) / (maps[0].norm() * maps[1].norm());
    assert!(cos > 0.9, "heatmap cosine {cos:.3}");
    pass(
        "criterion 12",
        format!("averaged heatmap cosine across reference ages: {cos:.3}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 13: end-to-end byte-identical reruns.
// ---------------------------------------------------------------------------

#[test]
fn criterion_13_end_to_end_reproducibility() {
    let ws = tempfile::tempdir().unwrap();
    let root = ws.path().join("root");
    let cfg_path = ws.path().join("cfg.json");
    let mut cfg = AppConfig::default();
    cfg.workspace_root = root.clone();
    cfg.seed = 11;
    cfg.dataset.train_ids = 6;
    cfg.dataset.train_imgs_per_id = 3;
    cfg.dataset.test_same_ids = 3;
    cfg.dataset.test_same_imgs_per_id = 3;
    cfg.dataset.test_cross_ids = 4;
    cfg.dataset.bucket_ids = 1;
    cfg.model.denoiser.base_channels = 8;
    cfg.model.denoiser.attn_dim = 16;
    cfg.model.denoiser.num_heads = 2;
    cfg.model.denoiser.id_token_count = 4;
    cfg.model.denoiser.temb_dim = 16;
    cfg.model.id_embed_dim = 16;
    cfg.train.max_steps = 40;
    cfg.train.batch_size = 2;
    cfg.train.lr = 1e-3;
    cfg.train.eval_every = 0;
    cfg.train.checkpoint_every = 40;
    cfg.guidance.ddim_steps = 8;
    cfg.guidance.inner_steps = 2;
    cfg.oracle.age_steps = 2200;
    cfg.oracle.batch = 16;
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let run_pipeline = || -> Vec<u8> {
        if root.exists() {
            std::fs::remove_dir_all(&root).unwrap();
        }
        let cmd = |args: &[&str]| {
            let mut argv = vec!["agerestore".to_string()];
            argv.push("--config".to_string());
            argv.push(cfg_path.display().to_string());
            argv.extend(args.iter().map(|s| s.to_string()));
            let code = agerestore::cli::run_command(argv);
            assert_eq!(code, 0, "command {args:?} exited {code}");
        };
        cmd(&["synth-data", "--split", "train"]);
        cmd(&["synth-data", "--split", "test-same"]);
        cmd(&["synth-data", "--split", "test-cross"]);
        cmd(&["train-oracles"]);
        cmd(&["train"]);
        let manifest = root.join("data/test_cross/manifest.jsonl");
        let out = root.join("runs/restored");
        cmd(&[
            "restore",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        let report = root.join("runs/report.json");
        cmd(&[
            "eval",
            "--manifest",
            manifest.to_str().unwrap(),
            "--restored",
            out.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ]);
        std::fs::read(&report).unwrap()
    };
    let first = run_pipeline();
    let second = run_pipeline();
    assert_eq!(first, second, "reports differ between reruns");
    pass(
        "criterion 13",
        format!("MetricsReport identical across reruns ({} bytes)", first.len()),
    );
}

// ---------------------------------------------------------------------------
// Post-training contracts that need the trained pipeline.
// ---------------------------------------------------------------------------

#[test]
fn trained_model_extras() {
    let p = &*PIPELINE;
    // Held-out epsilon loss beats the zero predictor (analytic baseline 1.0).
    let schedule = p.cfg.schedule().unwrap();
    let same_records = load_records(
        &RunManifest::load(
            &p.cfg
                .manifest_path(agerestore::synthface::Split::TestSameAge),
        )
        .unwrap(),
    )
    .unwrap();
    let val = agerestore::training::validation_loss(
        &p.model,
        &schedule,
        &p.cfg.train,
        &same_records,
        12,
    )
    .unwrap();
    assert!(val < 0.5, "held-out eps loss {val}");

    // CFG readiness: conditioned and null-identity predictions differ.
    let rec = &same_records[0];
    let lq = rec.lq_pixel.clone().unwrap();
    let cond = p
        .model
        .build_condition(vocab::generic_prompt(), &lq, &rec.refs)
        .unwrap();
    let z = Tensor::randn(&[3, 32, 32], &mut sub_rng(42, "z", 0));
    let (with_id, _) = p.model.predict_eps(&z, 500, &cond, None).unwrap();
    let (without_id, _) = p
        .model
        .predict_eps(&z, 500, &cond.without_id(), None)
        .unwrap();
    let diff = with_id.sub(&without_id).map(f64::abs).mean();
    assert!(diff > 0.0, "null and conditioned predictions identical");

    // Identity embeddings: cross-age same-identity cosine beats
    // cross-identity cosine by a clear margin on held-out identities, and
    // token projections do not collapse.
    let mut intra = 0.0;
    let mut inter = 0.0;
    let mut token_dist = 0.0;
    let n = 16u64;
    let mut prev_tokens: Option<Tensor> = None;
    for i in 0..n {
        let id = 3_000_000 + i;
        let fa = FaceSpec::identity_factors_for(p.cfg.seed, id);
        let fb = FaceSpec::identity_factors_for(p.cfg.seed, 3_000_000 + (i + 1) % n);
        let mut rng = sub_rng(4242, "extra", i);
        let young = render_face(
            &FaceSpec::new(fa.clone(), 15.0, FaceNuisance::sample(&mut rng)),
            32,
        )
        .unwrap();
        let old = render_face(
            &FaceSpec::new(fa.clone(), 85.0, FaceNuisance::sample(&mut rng)),
            32,
        )
        .unwrap();
        let other = render_face(
            &FaceSpec::new(fb, 50.0, FaceNuisance::sample(&mut rng)),
            32,
        )
        .unwrap();
        let ea = p.model.ref_embedding(&[(young.image.clone(), young.mask.clone())]).unwrap();
        let eb = p.model.ref_embedding(&[(old.image, old.mask)]).unwrap();
        let ec = p.model.ref_embedding(&[(other.image, other.mask)]).unwrap();
        intra += ea.cosine(&eb);
        inter += ea.cosine(&ec);
        let tokens = agerestore::identity::project_tokens(
            &ea,
            &p.model.projection,
            &p.model.store,
        )
        .unwrap();
        if let Some(prev) = &prev_tokens {
            token_dist += tokens.sub(prev).norm();
        }
        prev_tokens = Some(tokens);
    }
    intra /= n as f64;
    inter /= n as f64;
    assert!(
        intra - inter >= 0.2,
        "identity encoder margin {:.3} (intra {intra:.3}, inter {inter:.3})",
        intra - inter
    );
    assert!(token_dist > 0.0, "token projections collapsed");

    // Monotone steering: mean |age error| shrinks as N grows 0 -> 5, and
    // N=1 differs from N=5 (non-degenerate inner loop).
    let cross_records = load_records(&p.cross).unwrap();
    let rec = &cross_records[2];
    let lq = rec.lq_pixel.clone().unwrap();
    let mut outs = Vec::new();
    for n in [1usize, 5] {
        let mut g = p.cfg.guidance.clone();
        g.target_age = rec.gt_age;
        g.inner_steps = n;
        let opts = RestoreOptions {
            seed: 5,
            ..Default::default()
        };
        outs.push(
            aagg_sample(&p.model, &lq, &rec.refs, &g, &schedule, &opts)
                .unwrap()
                .image,
        );
    }
    assert_ne!(outs[0].data(), outs[1].data(), "N=1 and N=5 outputs identical");

    // Fixed-point inner-loop semantics stays runnable and differs from the
    // iterative default.
    let mut g_fp = p.cfg.guidance.clone();
    g_fp.target_age = rec.gt_age;
    g_fp.inner_loop = InnerLoop::FixedPoint;
    let opts = RestoreOptions {
        seed: 5,
        ..Default::default()
    };
    let fp = aagg_sample(&p.model, &lq, &rec.refs, &g_fp, &schedule, &opts).unwrap();
    assert!(fp.latent.is_finite());

    let oracles: &OracleParams = &p.oracles;
    let gt = load_rgb(&p.cross.resolve(&p.cross.records[2].gt_image)).unwrap();
    let _ = agerestore::synthface::age_oracle(&gt, oracles).unwrap();
    let _ = &p.buckets;
    pass(
        "extras",
        format!(
            "held-out eps loss {val:.3}, encoder margin {:.3}, cond diff {diff:.2e}",
            intra - inter
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 1: sampler-oracle equivalence.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_sampler_oracle_equivalence() {
    let schedule = NoiseSchedule::default_linear();
    let shape = [1usize, 3, 3];
    let mu = Tensor::rand_uniform(&shape, -0.9, 0.9, &mut sub_rng(101, "mu", 0));
    let timesteps = schedule.ddim_timesteps(50);
    let sample = |z0: Tensor, var0: f64| -> Tensor {
        let mut z = z0;
        for (i, &t) in timesteps.iter().enumerate() {
            let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
            let eps = analytic_gaussian_eps(&z, t, &mu, var0, &schedule).unwrap();
            z = ddim_step_standard(&z, &eps, t, t_prev, &schedule).unwrap();
        }
        z
    };

    // Point mass: 50-step DDIM from pure noise reconstructs mu.
    let z_t = Tensor::randn(&shape, &mut sub_rng(101, "z", 0));
    let z0 = sample(z_t, 0.0);
    let err = z0.sub(&mu).max_abs();
    assert!(err < 1e-4, "point-mass reconstruction error {err}");

    // Unit variance: the per-coordinate sample mean over 1000 trajectories
    // stays within 3 sigma / sqrt(1000) of mu. The trajectory map is linear
    // in z_T, so the Monte-Carlo mean must also match the coefficient
    // recursion (the independent closed-form oracle) almost exactly.
    let n = 1000;
    let mut mean = Tensor::zeros(&shape);
    let mut sq = Tensor::zeros(&shape);
    let mut zt_mean = Tensor::zeros(&shape);
    for i in 0..n {
        let z_t = Tensor::randn(&shape, &mut sub_rng(102, "traj", i));
        zt_mean.accumulate(&z_t);
        let z0 = sample(z_t, 1.0);
        sq.accumulate(&z0.mul(&z0));
        mean.accumulate(&z0);
    }
    let mean = mean.scale(1.0 / n as f64);
    let zt_mean = zt_mean.scale(1.0 / n as f64);
    let var = sq.scale(1.0 / n as f64).sub(&mean.mul(&mean));
    // Coefficient recursion: z' = (sqrt(ab') sqrt(ab) + sig' sig) z
    //                           + (sqrt(ab')(1-ab) - sig' sig sqrt(ab)) mu.
    let (mut a, mut b) = (1.0, 0.0);
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        let (abt, abp) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let (s, sp) = (schedule.sigma(t), schedule.sigma(t_prev));
        let ca = abp.sqrt() * abt.sqrt() + sp * s;
        let cb = abp.sqrt() * (1.0 - abt) - sp * s * abt.sqrt();
        a = ca * a;
        b = ca * b + cb;
    }
    let mut worst_ratio: f64 = 0.0;
    for i in 0..mu.numel() {
        let sigma = var.data()[i].sqrt();
        let allowance = 3.0 * sigma / (n as f64).sqrt();
        let dev = (mean.data()[i] - mu.data()[i]).abs();
        assert!(
            dev < allowance,
            "coordinate {i}: |mean - mu| = {dev} vs 3 sigma/sqrt(n) = {allowance}"
        );
        worst_ratio = worst_ratio.max(dev / allowance);
        let oracle_mean = a * zt_mean.data()[i] + b * mu.data()[i];
        assert!(
            (mean.data()[i] - oracle_mean).abs() < 1e-9,
            "linear-recursion oracle mismatch at {i}"
        );
    }
    pass(
        "criterion 1",
        format!("point-mass max err {err:.2e}; var0=1 worst |dev|/allowance {worst_ratio:.2}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: score relation.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_score_relation() {
    let schedule = NoiseSchedule::default_linear();
    let shape = [1usize, 2, 2];
    let mut rng = sub_rng(202, "score", 0);
    let mu = Tensor::randn(&shape, &mut rng);
    let var0 = 1.4;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..100u64 {
        let mut trng = sub_rng(202, "case", k);
        let t = 1 + (sub_seed(202, "t", k) as usize % schedule.t_max());
        let z = Tensor::randn(&shape, &mut trng);
        let eps = analytic_gaussian_eps(&z, t, &mu, var0, &schedule).unwrap();
        for i in 0..z.numel() {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let grad = (gaussian_log_density(&zp, t, &mu, var0, &schedule)
                - gaussian_log_density(&zm, t, &mu, var0, &schedule))
                / (2.0 * h);
            let expected = -schedule.sigma(t) * grad;
            let rel = (eps.data()[i] - expected).abs() / expected.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
    pass("criterion 2", format!("100 cases, worst rel err {worst:.2e}"));
}

// ---------------------------------------------------------------------------
// Criterion 3: the age-gradient closed form on the two-Gaussian model.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_age_gradient_closed_form() {
    let schedule = NoiseSchedule::default_linear();
    let shape = [1usize, 3, 3];
    let mut rng = sub_rng(303, "mus", 0);
    let mu_c = Tensor::randn(&shape, &mut rng);
    let mu_cp = Tensor::randn(&shape, &mut rng);
    let var0 = 1.0;
    let model = AnalyticGaussianModel {
        schedule: schedule.clone(),
        var0,
        mus: vec![
            (vocab::generic_prompt(), mu_c.clone()),
            (vocab::age_prompt(24.0).unwrap(), mu_cp.clone()),
        ],
    };
    let cond_c = ConditionBundle {
        prompt_tokens: vocab::generic_prompt(),
        id_tokens: None,
        lq_features: None,
    };
    let cond_cp = ConditionBundle {
        prompt_tokens: vocab::age_prompt(24.0).unwrap(),
        id_tokens: None,
        lq_features: None,
    };
    let mut worst: f64 = 0.0;
    for k in 0..100u64 {
        let mut zrng = sub_rng(303, "z", k);
        let t = 1 + (sub_seed(303, "t", k) as usize % schedule.t_max());
        let z = Tensor::randn(&shape, &mut zrng);
        let got = age_gradient(&model, &z, t, &cond_c, &cond_cp, 4.0).unwrap();
        let ab = schedule.alpha_bar(t);
        let coeff = (1.0 - ab).sqrt() * ab.sqrt() / (ab * var0 + 1.0 - ab);
        let expected = mu_c.sub(&mu_cp).scale(coeff);
        worst = worst.max(got.sub(&expected).max_abs());
        // Identical prompts yield exactly zero.
        let zero = age_gradient(&model, &z, t, &cond_c, &cond_c, 4.0).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }
    assert!(worst < 1e-6, "worst abs deviation {worst}");
    pass("criterion 3", format!("100 cases, worst abs dev {worst:.2e}"));
}

// ---------------------------------------------------------------------------
// Criterion 5: GRF and decoupled-attention invariants.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_grf_and_attention_invariants() {
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
    let model = RestorationModel::init(config, 55).unwrap();
    let c0 = model.config.denoiser.level_channels()[0];
    let f_lq = Tensor::randn(&[c0, 16, 16], &mut sub_rng(55, "flq", 0));
    let f_skip = Tensor::randn(&[c0, 16, 16], &mut sub_rng(55, "fsk", 0));
    let run_grf = |store: &agerestore::nn::ParamStore| {
        let mut cx = Ctx::inference(store);
        let a = cx.tape.input(f_lq.clone());
        let b = cx.tape.input(f_skip.clone());
        let (out, gate) = model.denoiser.grf[0].fuse(&mut cx, a, b);
        (cx.tape.value(out).clone(), cx.tape.value(gate).clone())
    };
    let (_, gate) = run_grf(&model.store);
    assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
    let mut sat = model.store.clone();
    sat.set("denoiser.grf0.pw.b", Tensor::filled(&[c0], 1e4));
    let (out, gate) = run_grf(&sat);
    assert!(gate.data().iter().all(|&g| g == 1.0));
    assert_eq!(out.data(), f_skip.add(&f_lq).data(), "saturated gate is additive");

    // Decoupled attention is affine in lambda; measure the slope error.
    let cfg = &model.config.denoiser;
    let c1 = cfg.level_channels()[1];
    let side = cfg.level_size(1);
    let x = Tensor::randn(&[c1, side, side], &mut sub_rng(56, "x", 0));
    let text = Tensor::randn(&[3, cfg.attn_dim], &mut sub_rng(56, "t", 0));
    let id = Tensor::randn(&[cfg.id_token_count, cfg.attn_dim], &mut sub_rng(56, "i", 0));
    let attn = |lambda: f64| -> Tensor {
        let mut cx = Ctx::inference(&model.store);
        let xv = cx.tape.input(x.clone());
        let tv = cx.tape.input(text.clone());
        let iv = Some(cx.tape.input(id.clone()));
        let block = model.denoiser.attn_block_for_tests();
        let (out, _) = block.fwd(&mut cx, xv, tv, iv, lambda, false);
        cx.tape.value(out).clone()
    };
    let o0 = attn(0.0);
    let slope_a = attn(1.0).sub(&o0);
    let slope_b = attn(2.0).sub(&o0).scale(0.5);
    let slope_err = slope_a.sub(&slope_b).max_abs() / slope_a.max_abs().max(1e-12);
    assert!(slope_err < 1e-6, "slope error {slope_err}");
    pass(
        "criterion 5",
        format!(
            "gate in (0,1), saturated gate additive exactly, attention slope err {slope_err:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: autodiff vs central finite differences at f64.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_gradient_checks() {
    // (a) predict_eps gradient w.r.t. the latent.
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
    let mut model = RestorationModel::init(config, 66).unwrap();
    // Give the zero-initialized output conv real weights.
    model.store.set(
        "denoiser.conv_out.w",
        agerestore::nn::conv_init(3, 8, 3, &mut sub_rng(66, "head", 0)),
    );
    let z0 = Tensor::randn(&[3, 16, 16], &mut sub_rng(66, "z", 0));
    let id = Tensor::randn(&[4, 16], &mut sub_rng(66, "id", 0));
    let probe = Tensor::randn(&[3, 16, 16], &mut sub_rng(66, "probe", 0));
    let prompt = vocab::age_prompt(33.0).unwrap();
    let cond = ConditionBundle {
        prompt_tokens: prompt.clone(),
        id_tokens: Some(id.clone()),
        lq_features: None,
    };
    let scalar = |z: &Tensor| -> f64 {
        model
            .predict_eps(z, 77, &cond, None)
            .unwrap()
            .0
            .dot(&probe)
    };
    let mut cx = Ctx::new(&model.store);
    let zv = cx.tape.input(z0.clone());
    let text = model.denoiser.embed_prompt(&mut cx, &prompt);
    let iv = cx.tape.input(id.clone());
    let cv = agerestore::denoiser::CondVars {
        text_tokens: text,
        id_tokens: Some(iv),
        lq_features: None,
    };
    let (out, _) = model.denoiser.forward_on(&mut cx, zv, 77, &cv, None);
    let loss = cx.tape.mean_weighted(out, &probe);
    let grads = cx.tape.backward(loss);
    let g = grads.get(zv).unwrap().scale(z0.numel() as f64);
    let dir = Tensor::randn(&[3, 16, 16], &mut sub_rng(66, "dir", 0));
    let h = 1e-5;
    let fd = (scalar(&z0.add_scaled(&dir, h)) - scalar(&z0.add_scaled(&dir, -h))) / (2.0 * h);
    let analytic = g.dot(&dir);
    let rel_a = (fd - analytic).abs() / analytic.abs().max(1e-12);
    assert!(rel_a < 1e-3, "latent gradient rel err {rel_a}");

    // (b) training-step loss gradient w.r.t. a sampled parameter.
    let ws = tempfile::tempdir().unwrap();
    let manifest = agerestore::synthface::build_dataset(
        &agerestore::synthface::DatasetSpec::same_age(
            agerestore::synthface::Split::TrainSameAge,
            3,
            3,
            16,
            660,
        ),
        ws.path(),
    )
    .unwrap();
    let records = load_records(&manifest).unwrap();
    let schedule =
        agerestore::diffusion::make_noise_schedule(60, 1e-4, 0.02, agerestore::diffusion::ScheduleKind::Linear)
            .unwrap();
    let tcfg = TrainConfig {
        batch_size: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let (_, grads) = batch_loss_and_grads(&model, &schedule, &tcfg, &records, 0, true).unwrap();
    // Probe the parameter with the largest gradient among a few candidates.
    let (pidx, pgrad) = grads
        .iter()
        .max_by(|a, b| a.1.max_abs().partial_cmp(&b.1.max_abs()).unwrap())
        .map(|(i, g)| (*i, g.clone()))
        .unwrap();
    let pname = model.store.name_of(pidx).to_string();
    let elem = pgrad
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    let hp = 1e-5;
    let mut probe_loss = |delta: f64| -> f64 {
        let mut p = model.store.get_idx(pidx).clone();
        p.data_mut()[elem] += delta;
        let saved = model.store.get_idx(pidx).clone();
        model.store.set_idx(pidx, p);
        let (l, _) = batch_loss_and_grads(&model, &schedule, &tcfg, &records, 0, false).unwrap();
        model.store.set_idx(pidx, saved);
        l
    };
    let fd = (probe_loss(hp) - probe_loss(-hp)) / (2.0 * hp);
    let analytic = pgrad.data()[elem];
    let rel_b = (fd - analytic).abs() / analytic.abs().max(1e-12);
    assert!(rel_b < 1e-3, "parameter {pname} gradient rel err {rel_b}");
    pass(
        "criterion 6",
        format!("latent grad rel err {rel_a:.2e}; param ({pname}) grad rel err {rel_b:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: degradation pipeline ranges, near-identity PSNR, monotonicity.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_degradation_pipeline() {
    // Monte-Carlo ranges over 1e5 draws.
    let mut rng = sub_rng(707, "ranges", 0);
    let mut lo = [f64::INFINITY; 4];
    let mut hi = [f64::NEG_INFINITY; 4];
    let mut sum_sigma = 0.0;
    let mut sum_q = 0.0;
    let mut sum_sq = 0.0;
    let mut sum_s2 = 0.0;
    let mut sum_q2 = 0.0;
    let n = 100_000;
    for _ in 0..n {
        let p = sample_degradation_params(&mut rng);
        let vals = [p.sigma_blur, p.r, p.delta, p.q as f64];
        for i in 0..4 {
            lo[i] = lo[i].min(vals[i]);
            hi[i] = hi[i].max(vals[i]);
        }
        sum_sigma += p.sigma_blur;
        sum_q += p.q as f64;
        sum_sq += p.sigma_blur * p.q as f64;
        sum_s2 += p.sigma_blur * p.sigma_blur;
        sum_q2 += (p.q as f64) * (p.q as f64);
    }
    let ranges = [
        (SIGMA_RANGE.0, SIGMA_RANGE.1),
        (SCALE_RANGE.0, SCALE_RANGE.1),
        (NOISE_RANGE.0, NOISE_RANGE.1),
        (QUALITY_RANGE.0 as f64, QUALITY_RANGE.1 as f64),
    ];
    for (i, (rlo, rhi)) in ranges.iter().enumerate() {
        // Sampling-error allowance: 1e5 uniform draws land within ~0.01% of
        // the range ends in expectation; allow 1% of the width plus the
        // integer-quality granularity.
        let eps = 0.01 * (rhi - rlo) + 0.05;
        assert!(
            lo[i] >= *rlo && lo[i] <= rlo + eps,
            "knob {i}: empirical min {}",
            lo[i]
        );
        assert!(
            hi[i] <= *rhi && hi[i] >= rhi - eps,
            "knob {i}: empirical max {}",
            hi[i]
        );
    }
    // Independence: sample correlation between sigma and q.
    let nf = n as f64;
    let cov = sum_sq / nf - (sum_sigma / nf) * (sum_q / nf);
    let var_s = sum_s2 / nf - (sum_sigma / nf).powi(2);
    let var_q = sum_q2 / nf - (sum_q / nf).powi(2);
    let corr = cov / (var_s * var_q).sqrt();
    assert!(corr.abs() < 0.02, "sigma/q correlation {corr}");

    // Corpus of 50 clean renders.
    let corpus: Vec<Tensor> = (0..50u64)
        .map(|i| {
            let spec = FaceSpec::new(
                FaceSpec::identity_factors_for(7070, i),
                (i * 7 % 101) as f64,
                FaceNuisance::default(),
            );
            render_face(&spec, 32).unwrap().image
        })
        .collect();

    // Near-identity configuration keeps PSNR above 35 dB.
    let mut worst_psnr = f64::INFINITY;
    for img in &corpus {
        let out = apply_degradation(img, &DegradationParams::near_identity(), 3).unwrap();
        worst_psnr = worst_psnr.min(psnr(&out, img));
    }
    assert!(worst_psnr > 35.0, "near-identity worst PSNR {worst_psnr}");

    // Monotone trend per knob: Spearman |rho| > 0.8 with the right sign.
    let mild = DegradationParams {
        sigma_blur: 0.5,
        r: 1.5,
        delta: 2.0,
        q: 90,
    };
    let grid_eval = |params: Vec<DegradationParams>| -> Vec<f64> {
        params
            .iter()
            .map(|p| {
                corpus
                    .iter()
                    .enumerate()
                    .map(|(i, img)| psnr(&apply_degradation(img, p, i as u64).unwrap(), img))
                    .sum::<f64>()
                    / corpus.len() as f64
            })
            .collect()
    };
    let spearman = |ys: &[f64]| -> f64 {
        // Knob grids are increasing, so rank correlation of (index, y).
        let n = ys.len();
        let mut rank = vec![0usize; n];
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| ys[a].partial_cmp(&ys[b]).unwrap());
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let mean = (n as f64 - 1.0) / 2.0;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for i in 0..n {
            let x = i as f64 - mean;
            let y = rank[i] as f64 - mean;
            num += x * y;
            da += x * x;
            db += y * y;
        }
        num / (da * db).sqrt()
    };
    let sigma_psnr = grid_eval(
        [0.2, 1.0, 2.5, 5.0, 10.0]
            .iter()
            .map(|&s| DegradationParams { sigma_blur: s, ..mild })
            .collect(),
    );
    let r_psnr = grid_eval(
        [1.0, 2.0, 4.0, 8.0, 12.0]
            .iter()
            .map(|&r| DegradationParams { r, ..mild })
            .collect(),
    );
    let d_psnr = grid_eval(
        [0.0, 3.0, 7.0, 11.0, 15.0]
            .iter()
            .map(|&d| DegradationParams { delta: d, ..mild })
            .collect(),
    );
    let q_psnr = grid_eval(
        [30, 50, 70, 90, 100]
            .iter()
            .map(|&q| DegradationParams { q, ..mild })
            .collect(),
    );
    let rho_sigma = spearman(&sigma_psnr);
    let rho_r = spearman(&r_psnr);
    let rho_d = spearman(&d_psnr);
    let rho_q = spearman(&q_psnr);
    assert!(rho_sigma < -0.8, "sigma trend {rho_sigma}");
    assert!(rho_r < -0.8, "r trend {rho_r}");
    assert!(rho_d < -0.8, "delta trend {rho_d}");
    assert!(rho_q > 0.8, "q trend {rho_q}");
    pass(
        "criterion 7",
        format!(
            "ranges ok, sigma/q corr {corr:.4}, near-identity worst PSNR {worst_psnr:.1} dB, \
             Spearman sigma {rho_sigma:.2} r {rho_r:.2} delta {rho_d:.2} q {rho_q:.2}"
        ),
    );
}
