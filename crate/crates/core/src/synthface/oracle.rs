//! Evaluation oracles: a toy age regressor and a toy identity encoder,
//! trained on held-out synthetic renders and gated before any restoration
//! experiment consumes them.
//!
//! The oracles are deliberately distinct from the restoration model's own
//! identity encoder: different architectures, different parameter-name
//! prefixes, different seeds. Checkpoints never share parameter names with
//! the model checkpoint.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{fill_store, load_archive, save_archive, store_tensors};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Ctx, ParamStore, SmallEncoder};
use crate::tensor::Tensor;
use crate::util::{atomic_write, sub_rng};

use super::render::{render_face, FaceNuisance, FaceSpec};

/// Identity-id namespaces for oracle data; disjoint from every dataset split.
const ORACLE_TRAIN_BASE: u64 = 9_000_000;
const ORACLE_EVAL_BASE: u64 = 9_500_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleTrainConfig {
    pub seed: u64,
    pub image_size: usize,
    pub age_steps: usize,
    pub id_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub train_identities: usize,
    pub eval_identities: usize,
    /// Acceptance gates.
    pub age_mae_gate: f64,
    pub margin_gate: f64,
    pub intra_gate: f64,
    pub inter_gate: f64,
}

impl Default for OracleTrainConfig {
    fn default() -> Self {
        OracleTrainConfig {
            seed: 2024,
            image_size: 32,
            age_steps: 500,
            id_steps: 600,
            batch: 12,
            lr: 2e-3,
            train_identities: 160,
            eval_identities: 48,
            age_mae_gate: 5.0,
            margin_gate: 0.2,
            intra_gate: 0.8,
            inter_gate: 0.5,
        }
    }
}

/// Persisted acceptance report for the trained oracles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub age_mae_clean: f64,
    pub age_monotone_mean_pred_80: f64,
    pub age_monotone_mean_pred_20: f64,
    pub intra_cosine_mean: f64,
    pub inter_cosine_mean: f64,
    pub margin: f64,
    pub age_mae_gate: f64,
    pub margin_gate: f64,
    pub intra_gate: f64,
    pub inter_gate: f64,
    pub passed: bool,
}

pub struct OracleParams {
    pub age_store: ParamStore,
    pub id_store: ParamStore,
    age_net: SmallEncoder,
    id_net: SmallEncoder,
    pub image_size: usize,
    pub trained: bool,
}

impl OracleParams {
    pub fn fresh(cfg: &OracleTrainConfig) -> Self {
        let age_net = SmallEncoder::new("oracle_age", 3, [14, 28, 56], 48, 1);
        let id_net = SmallEncoder::new("oracle_id", 3, [10, 20, 40], 48, 32);
        let mut age_store = ParamStore::new();
        let mut id_store = ParamStore::new();
        age_net.init(&mut age_store, &mut sub_rng(cfg.seed, "oracle-age-init", 0));
        id_net.init(&mut id_store, &mut sub_rng(cfg.seed, "oracle-id-init", 0));
        OracleParams {
            age_store,
            id_store,
            age_net,
            id_net,
            image_size: cfg.image_size,
            trained: false,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "kind": "oracles",
            "image_size": self.image_size,
            "trained": self.trained,
        });
        let mut tensors = store_tensors(&self.age_store);
        tensors.extend(store_tensors(&self.id_store));
        save_archive(path, &header, &tensors)
    }

    pub fn load(path: &Path, cfg: &OracleTrainConfig) -> Result<Self> {
        let (header, tensors) = load_archive(path)?;
        if header["kind"] != "oracles" {
            return Err(Error::Checkpoint(format!(
                "{} is not an oracle checkpoint",
                path.display()
            )));
        }
        let mut params = OracleParams::fresh(cfg);
        params.image_size = header["image_size"].as_u64().unwrap_or(32) as usize;
        params.trained = header["trained"].as_bool().unwrap_or(false);
        fill_store(&mut params.age_store, &tensors)?;
        fill_store(&mut params.id_store, &tensors)?;
        Ok(params)
    }
}

fn image_input(img: &Tensor) -> Tensor {
    img.scale(1.0 / 255.0)
}

/// Age estimate in [0, 100].
pub fn age_oracle(image: &Tensor, params: &OracleParams) -> Result<f64> {
    if !params.trained {
        return Err(Error::NotReady("age oracle is untrained".to_string()));
    }
    let mut cx = Ctx::inference(&params.age_store);
    let x = cx.tape.input(image_input(image));
    let out = params.age_net.fwd(&mut cx, x);
    let raw = cx.tape.value(out).data()[0];
    Ok((raw * 100.0).clamp(0.0, 100.0))
}

fn embed_for_oracle(image: &Tensor, params: &OracleParams) -> Tensor {
    let mut cx = Ctx::inference(&params.id_store);
    let x = cx.tape.input(image_input(image));
    let e = params.id_net.fwd(&mut cx, x);
    let e = cx.tape.l2norm(e);
    cx.tape.value(e).clone()
}

/// Cosine similarity of oracle embeddings, in [-1, 1].
pub fn identity_oracle(image_a: &Tensor, image_b: &Tensor, params: &OracleParams) -> Result<f64> {
    if !params.trained {
        return Err(Error::NotReady("identity oracle is untrained".to_string()));
    }
    let ea = embed_for_oracle(image_a, params);
    let eb = embed_for_oracle(image_b, params);
    Ok(ea.dot(&eb))
}

fn oracle_face(cfg: &OracleTrainConfig, base: u64, idx: u64, rng: &mut impl Rng) -> (Tensor, f64) {
    let pool = if base == ORACLE_TRAIN_BASE {
        cfg.train_identities
    } else {
        cfg.eval_identities
    } as u64;
    let id = base + idx % pool;
    let factors = FaceSpec::identity_factors_for(cfg.seed, id);
    let age = rng.gen_range(0.0..=100.0);
    let spec = FaceSpec::new(factors, age, FaceNuisance::sample(rng));
    (
        render_face(&spec, cfg.image_size).expect("oracle render").image,
        age,
    )
}

fn train_age_net(cfg: &OracleTrainConfig, params: &mut OracleParams) {
    let mut opt = AdamW::new(&params.age_store, cfg.lr, 0.0);
    for step in 0..cfg.age_steps {
        let mut rng = sub_rng(cfg.seed, "oracle-age-step", step as u64);
        let mut cx = Ctx::new(&params.age_store);
        let mut per_item = Vec::new();
        for i in 0..cfg.batch {
            let idx: u64 = rng.gen_range(0..cfg.train_identities as u64 * 4);
            let _ = i;
            let (img, age) = oracle_face(cfg, ORACLE_TRAIN_BASE, idx, &mut rng);
            let x = cx.tape.input(image_input(&img));
            let out = params.age_net.fwd(&mut cx, x);
            let target = cx.tape.input(Tensor::from_vec(&[1], vec![age / 100.0]));
            let loss = cx.tape.mse(out, target);
            per_item.push(loss);
        }
        let total = per_item
            .iter()
            .skip(1)
            .fold(per_item[0], |acc, &l| cx.tape.add(acc, l));
        let loss = cx.tape.scale(total, 1.0 / cfg.batch as f64);
        let grads = cx.tape.backward(loss);
        let pg = cx.param_grads(&grads);
        opt.apply(&mut params.age_store, &pg);
    }
}

fn train_identity_net(cfg: &OracleTrainConfig, params: &mut OracleParams) {
    let tau = 0.15;
    let mut opt = AdamW::new(&params.id_store, cfg.lr, 0.0);
    for step in 0..cfg.id_steps {
        let mut rng = sub_rng(cfg.seed, "oracle-id-step", step as u64);
        let b = cfg.batch;
        let mut cx = Ctx::new(&params.id_store);
        let mut embeds = Vec::with_capacity(2 * b);
        // Two independently aged/nuisanced views per identity; rows i and
        // i+b are positives.
        let ids: Vec<u64> = (0..b)
            .map(|_| rng.gen_range(0..cfg.train_identities as u64))
            .collect();
        for view in 0..2 {
            let _ = view;
            for &idx in &ids {
                let (img, _) = oracle_face(cfg, ORACLE_TRAIN_BASE, idx, &mut rng);
                let x = cx.tape.input(image_input(&img));
                let e = params.id_net.fwd(&mut cx, x);
                let e = cx.tape.l2norm(e);
                embeds.push(e);
            }
        }
        let e_mat = cx.tape.stack_rows(&embeds);
        let sims = cx.tape.matmul_nt(e_mat, e_mat);
        let logits = cx.tape.scale(sims, 1.0 / tau);
        let mut mask = Tensor::zeros(&[2 * b, 2 * b]);
        {
            let md = mask.data_mut();
            for i in 0..2 * b {
                md[i * 2 * b + i] = -1e9;
            }
        }
        let logits = cx.tape.add_const(logits, &mask);
        let targets: Vec<usize> = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();
        let loss = cx.tape.cross_entropy_rows(logits, &targets);
        let grads = cx.tape.backward(loss);
        let pg = cx.param_grads(&grads);
        opt.apply(&mut params.id_store, &pg);
    }
}

fn eval_report(cfg: &OracleTrainConfig, params: &OracleParams) -> OracleReport {
    // Age MAE on clean held-out renders.
    let mut mae = 0.0;
    let n_eval = cfg.eval_identities;
    let mut pred80 = 0.0;
    let mut pred20 = 0.0;
    for i in 0..n_eval {
        let mut rng = sub_rng(cfg.seed, "oracle-age-eval", i as u64);
        let (img, age) = oracle_face(cfg, ORACLE_EVAL_BASE, i as u64, &mut rng);
        let pred = age_oracle(&img, params).expect("trained");
        mae += (pred - age).abs();
        let factors = FaceSpec::identity_factors_for(cfg.seed, ORACLE_EVAL_BASE + i as u64);
        let mk = |age: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let spec = FaceSpec::new(factors.clone(), age, FaceNuisance::sample(rng));
            render_face(&spec, cfg.image_size).unwrap().image
        };
        pred80 += age_oracle(&mk(80.0, &mut rng), params).unwrap();
        pred20 += age_oracle(&mk(20.0, &mut rng), params).unwrap();
    }
    mae /= n_eval as f64;
    pred80 /= n_eval as f64;
    pred20 /= n_eval as f64;

    // Identity margins: intra pairs span a large age gap; inter pairs are
    // different identities at random ages.
    let mut intra = 0.0;
    let mut inter = 0.0;
    for i in 0..n_eval {
        let mut rng = sub_rng(cfg.seed, "oracle-id-eval", i as u64);
        let id_a = ORACLE_EVAL_BASE + i as u64;
        let id_b = ORACLE_EVAL_BASE + ((i + 1) % n_eval) as u64;
        let fa = FaceSpec::identity_factors_for(cfg.seed, id_a);
        let fb = FaceSpec::identity_factors_for(cfg.seed, id_b);
        let young = render_face(
            &FaceSpec::new(fa.clone(), rng.gen_range(0.0..30.0), FaceNuisance::sample(&mut rng)),
            cfg.image_size,
        )
        .unwrap()
        .image;
        let old = render_face(
            &FaceSpec::new(fa.clone(), rng.gen_range(65.0..100.0), FaceNuisance::sample(&mut rng)),
            cfg.image_size,
        )
        .unwrap()
        .image;
        let other = render_face(
            &FaceSpec::new(fb, rng.gen_range(0.0..100.0), FaceNuisance::sample(&mut rng)),
            cfg.image_size,
        )
        .unwrap()
        .image;
        intra += identity_oracle(&young, &old, params).unwrap();
        inter += identity_oracle(&young, &other, params).unwrap();
    }
    intra /= n_eval as f64;
    inter /= n_eval as f64;

    let margin = intra - inter;
    let passed = mae < cfg.age_mae_gate
        && margin >= cfg.margin_gate
        && intra > cfg.intra_gate
        && inter < cfg.inter_gate
        && pred80 > pred20;
    OracleReport {
        age_mae_clean: mae,
        age_monotone_mean_pred_80: pred80,
        age_monotone_mean_pred_20: pred20,
        intra_cosine_mean: intra,
        inter_cosine_mean: inter,
        margin,
        age_mae_gate: cfg.age_mae_gate,
        margin_gate: cfg.margin_gate,
        intra_gate: cfg.intra_gate,
        inter_gate: cfg.inter_gate,
        passed,
    }
}

/// Train both oracles, evaluate the acceptance gates, and persist the report
/// next to the checkpoint when paths are given.
pub fn train_oracles(
    cfg: &OracleTrainConfig,
    checkpoint: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<(OracleParams, OracleReport)> {
    let mut params = OracleParams::fresh(cfg);
    train_age_net(cfg, &mut params);
    train_identity_net(cfg, &mut params);
    params.trained = true;
    let report = eval_report(cfg, &params);
    if let Some(path) = checkpoint {
        params.save(path)?;
    }
    if let Some(path) = report_path {
        atomic_write(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn untrained_oracles_refuse() {
        let cfg = OracleTrainConfig::default();
        let params = OracleParams::fresh(&cfg);
        let img = Tensor::zeros(&[3, 32, 32]);
        assert!(matches!(age_oracle(&img, &params), Err(Error::NotReady(_))));
        assert!(matches!(
            identity_oracle(&img, &img, &params),
            Err(Error::NotReady(_))
        ));
    }

    #[test]
    fn oracle_param_names_disjoint_from_model_prefixes() {
        let cfg = OracleTrainConfig::default();
        let params = OracleParams::fresh(&cfg);
        for (name, _) in params.age_store.iter() {
            assert!(name.starts_with("oracle_age."));
        }
        for (name, _) in params.id_store.iter() {
            assert!(name.starts_with("oracle_id."));
        }
    }

    #[test]
    fn identity_oracle_symmetric_and_self_one() {
        // A quick, barely-trained oracle still satisfies the structural
        // contracts: f(x,x)=1 and symmetry.
        let cfg = OracleTrainConfig {
            age_steps: 2,
            id_steps: 2,
            batch: 4,
            train_identities: 8,
            eval_identities: 4,
            ..OracleTrainConfig::default()
        };
        let (params, _) = train_oracles(&cfg, None, None).unwrap();
        let spec = FaceSpec::new(
            FaceSpec::identity_factors_for(1, 1),
            33.0,
            FaceNuisance::default(),
        );
        let a = render_face(&spec, 32).unwrap().image;
        let spec2 = FaceSpec::new(
            FaceSpec::identity_factors_for(1, 2),
            70.0,
            FaceNuisance::default(),
        );
        let b = render_face(&spec2, 32).unwrap().image;
        let saa = identity_oracle(&a, &a, &params).unwrap();
        assert!((saa - 1.0).abs() < 1e-9);
        let ab = identity_oracle(&a, &b, &params).unwrap();
        let ba = identity_oracle(&b, &a, &params).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
        // Constant image: no crash, in range.
        let gray = Tensor::filled(&[3, 32, 32], 128.0);
        let age = age_oracle(&gray, &params).unwrap();
        assert!((0.0..=100.0).contains(&age));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let cfg = OracleTrainConfig {
            age_steps: 3,
            id_steps: 3,
            batch: 4,
            train_identities: 8,
            eval_identities: 4,
            ..OracleTrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracles.ckpt");
        let (params, _) = train_oracles(&cfg, Some(&path), None).unwrap();
        let loaded = OracleParams::load(&path, &cfg).unwrap();
        let spec = FaceSpec::new(
            FaceSpec::identity_factors_for(3, 9),
            55.0,
            FaceNuisance::default(),
        );
        let img = render_face(&spec, 32).unwrap().image;
        assert_eq!(
            age_oracle(&img, &params).unwrap(),
            age_oracle(&img, &loaded).unwrap()
        );
    }
}
