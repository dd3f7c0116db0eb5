//! Dataset construction: renders ground-truth/reference images, degrades
//! test inputs with recorded seeds, and persists a JSON-lines manifest.
//!
//! Identity ids are namespaced per split so train/test identity sets are
//! disjoint by construction. Every random draw comes from a stream keyed by
//! `(seed, domain, index)`, so the dataset bytes are a pure function of the
//! configuration and seed.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{apply_degradation, sample_degradation_params, DegradationParams};
use crate::error::{Error, Result};
use crate::imageio::{save_mask, save_rgb};
use crate::util::{atomic_write, sub_rng, sub_seed};

use super::render::{render_face, FaceNuisance, FaceSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainSameAge,
    TestSameAge,
    TestCrossAge,
}

impl Split {
    /// Identity-id namespace base; keeps splits disjoint.
    pub fn id_base(&self) -> u64 {
        match self {
            Split::TrainSameAge => 0,
            Split::TestSameAge => 1_000_000,
            Split::TestCrossAge => 2_000_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub age: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub identity_id: u64,
    pub gt_image: PathBuf,
    pub gt_mask: PathBuf,
    pub gt_age: f64,
    /// Pre-degraded input, present for test splits.
    pub lq_image: Option<PathBuf>,
    pub references: Vec<RefEntry>,
    pub degradation_seed: u64,
    /// Degradation parameters, recorded for test splits so runs replay.
    pub degradation: Option<DegradationParams>,
}

impl ManifestRecord {
    pub fn mean_age_gap(&self) -> f64 {
        if self.references.is_empty() {
            return 0.0;
        }
        self.references
            .iter()
            .map(|r| (self.gt_age - r.age).abs())
            .sum::<f64>()
            / self.references.len() as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub split: Split,
    pub world_seed: u64,
    pub image_size: usize,
    pub age_gap: f64,
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
    /// Directory the record paths are relative to.
    pub root: PathBuf,
}

impl RunManifest {
    pub fn split(&self) -> Split {
        self.header.split
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut lines = Vec::new();
        lines.push(serde_json::to_string(&self.header)?);
        for rec in &self.records {
            lines.push(serde_json::to_string(rec)?);
        }
        atomic_write(path, (lines.join("\n") + "\n").as_bytes())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = crate::util::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Config(format!("empty manifest {}", path.display())))?,
        )?;
        let mut records = Vec::new();
        for line in lines {
            records.push(serde_json::from_str(line)?);
        }
        Ok(RunManifest {
            header,
            records,
            root: path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .to_path_buf(),
        })
    }

    pub fn identity_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.records.iter().map(|r| r.identity_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub split: Split,
    pub n_ids: usize,
    /// Images rendered per identity for same-age splits (gt pool + refs).
    pub imgs_per_id: usize,
    /// Minimum |gt age - ref age| for the cross-age split.
    pub age_gap: f64,
    /// Optional upper bound on the gap (used by the age-gap bucket sweep).
    pub age_gap_max: Option<f64>,
    pub image_size: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn same_age(split: Split, n_ids: usize, imgs_per_id: usize, size: usize, seed: u64) -> Self {
        DatasetSpec {
            split,
            n_ids,
            imgs_per_id,
            age_gap: 0.0,
            age_gap_max: None,
            image_size: size,
            seed,
        }
    }

    pub fn cross_age(n_ids: usize, age_gap: f64, size: usize, seed: u64) -> Self {
        DatasetSpec {
            split: Split::TestCrossAge,
            n_ids,
            imgs_per_id: 0,
            age_gap,
            age_gap_max: None,
            image_size: size,
            seed,
        }
    }
}

/// Age window for same-age splits: all of an identity's images stay within
/// +/- 5 years of a per-identity base age.
const SAME_AGE_WINDOW: f64 = 5.0;

fn render_and_save(
    spec: &FaceSpec,
    size: usize,
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, PathBuf)> {
    let r = render_face(spec, size)?;
    let img_rel = PathBuf::from(format!("{stem}.png"));
    let mask_rel = PathBuf::from(format!("{stem}_mask.png"));
    save_rgb(&dir.join(&img_rel), &r.image)?;
    save_mask(&dir.join(&mask_rel), &r.mask)?;
    Ok((img_rel, mask_rel))
}

/// Sample a ground-truth age and `k` reference ages with per-reference gap
/// inside `[gap_lo, gap_hi]`.
fn sample_cross_ages(
    rng: &mut impl Rng,
    k: usize,
    gap_lo: f64,
    gap_hi: f64,
) -> Result<(f64, Vec<f64>)> {
    if gap_lo > 100.0 {
        return Err(Error::InvalidRange(format!(
            "age gap {gap_lo} unsatisfiable on [0,100]"
        )));
    }
    let gap_hi = gap_hi.min(100.0);
    for _ in 0..1000 {
        let gt: f64 = rng.gen_range(0.0..=100.0);
        let low_ok = gt - gap_lo >= 0.0;
        let high_ok = gt + gap_lo <= 100.0;
        if !low_ok && !high_ok {
            continue;
        }
        let mut refs = Vec::with_capacity(k);
        let mut ok = true;
        for _ in 0..k {
            let pick_low = match (low_ok, high_ok) {
                (true, true) => rng.gen_bool(0.5),
                (true, false) => true,
                (false, true) => false,
                _ => unreachable!(),
            };
            let reach = if pick_low { gt } else { 100.0 - gt };
            if reach < gap_lo {
                ok = false;
                break;
            }
            let u = rng.gen_range(gap_lo..=gap_hi.min(reach));
            refs.push(if pick_low { gt - u } else { gt + u });
        }
        if ok {
            return Ok((gt, refs));
        }
    }
    Err(Error::InvalidRange(format!(
        "could not satisfy age gap [{gap_lo}, {gap_hi}]"
    )))
}

/// Build a dataset under `out_dir`, writing images plus `manifest.jsonl`.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<RunManifest> {
    if spec.n_ids < 1 {
        return Err(Error::InvalidRange("n_ids must be >= 1".to_string()));
    }
    if spec.split != Split::TestCrossAge && spec.imgs_per_id < 2 {
        return Err(Error::InvalidRange(
            "same-age splits need imgs_per_id >= 2".to_string(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut records = Vec::new();
    let mut record_idx = 0u64;
    for i in 0..spec.n_ids as u64 {
        let identity_id = spec.split.id_base() + i;
        let factors = FaceSpec::identity_factors_for(spec.seed, identity_id);
        let dir_rel = PathBuf::from(format!("id_{identity_id:07}"));
        let dir = out_dir.join(&dir_rel);
        let mut rng = sub_rng(spec.seed, "instance", identity_id);

        match spec.split {
            Split::TrainSameAge | Split::TestSameAge => {
                let base_age: f64 = rng.gen_range(SAME_AGE_WINDOW..(100.0 - SAME_AGE_WINDOW));
                let mut imgs = Vec::new();
                for j in 0..spec.imgs_per_id {
                    let age = (base_age + rng.gen_range(-SAME_AGE_WINDOW..=SAME_AGE_WINDOW))
                        .clamp(0.0, 100.0);
                    let face = FaceSpec::new(factors.clone(), age, FaceNuisance::sample(&mut rng));
                    let (img, mask) =
                        render_and_save(&face, spec.image_size, &dir, &format!("img_{j:02}"))?;
                    imgs.push((dir_rel.join(img), dir_rel.join(mask), age));
                }
                let n_records = if spec.split == Split::TrainSameAge {
                    spec.imgs_per_id
                } else {
                    1
                };
                for g in 0..n_records {
                    let n_refs = rng.gen_range(1..=5usize.min(spec.imgs_per_id - 1));
                    // References: images of the same identity other than gt.
                    let mut pool: Vec<usize> =
                        (0..spec.imgs_per_id).filter(|&j| j != g).collect();
                    let mut refs = Vec::new();
                    for _ in 0..n_refs {
                        let pick = rng.gen_range(0..pool.len());
                        let j = pool.swap_remove(pick);
                        refs.push(RefEntry {
                            image: imgs[j].0.clone(),
                            mask: imgs[j].1.clone(),
                            age: imgs[j].2,
                        });
                    }
                    let degradation_seed = sub_seed(spec.seed, "degradation", record_idx);
                    let (lq_image, degradation) = if spec.split == Split::TestSameAge {
                        let mut drng = sub_rng(degradation_seed, "params", 0);
                        let params = sample_degradation_params(&mut drng);
                        let gt = crate::imageio::load_rgb(&out_dir.join(&imgs[g].0))?;
                        let lq = apply_degradation(&gt, &params, degradation_seed)?;
                        let lq_rel = dir_rel.join(format!("lq_{g:02}.png"));
                        save_rgb(&out_dir.join(&lq_rel), &lq)?;
                        (Some(lq_rel), Some(params))
                    } else {
                        (None, None)
                    };
                    records.push(ManifestRecord {
                        identity_id,
                        gt_image: imgs[g].0.clone(),
                        gt_mask: imgs[g].1.clone(),
                        gt_age: imgs[g].2,
                        lq_image,
                        references: refs,
                        degradation_seed,
                        degradation,
                    });
                    record_idx += 1;
                }
            }
            Split::TestCrossAge => {
                let n_refs = rng.gen_range(1..=5usize);
                let gap_hi = spec.age_gap_max.unwrap_or(100.0);
                let (gt_age, ref_ages) =
                    sample_cross_ages(&mut rng, n_refs, spec.age_gap, gap_hi)?;
                let gt_face =
                    FaceSpec::new(factors.clone(), gt_age, FaceNuisance::sample(&mut rng));
                let (gt_img, gt_mask) =
                    render_and_save(&gt_face, spec.image_size, &dir, "gt")?;
                let mut refs = Vec::new();
                for (j, &age) in ref_ages.iter().enumerate() {
                    let face = FaceSpec::new(factors.clone(), age, FaceNuisance::sample(&mut rng));
                    let (img, mask) =
                        render_and_save(&face, spec.image_size, &dir, &format!("ref_{j}"))?;
                    refs.push(RefEntry {
                        image: dir_rel.join(img),
                        mask: dir_rel.join(mask),
                        age,
                    });
                }
                let degradation_seed = sub_seed(spec.seed, "degradation", record_idx);
                let mut drng = sub_rng(degradation_seed, "params", 0);
                let params = sample_degradation_params(&mut drng);
                let gt = crate::imageio::load_rgb(&out_dir.join(dir_rel.join(&gt_img)))?;
                let lq = apply_degradation(&gt, &params, degradation_seed)?;
                let lq_rel = dir_rel.join("lq.png");
                save_rgb(&out_dir.join(&lq_rel), &lq)?;
                records.push(ManifestRecord {
                    identity_id,
                    gt_image: dir_rel.join(gt_img),
                    gt_mask: dir_rel.join(gt_mask),
                    gt_age,
                    lq_image: Some(lq_rel),
                    references: refs,
                    degradation_seed,
                    degradation: Some(params),
                });
                record_idx += 1;
            }
        }
    }

    let manifest = RunManifest {
        header: ManifestHeader {
            split: spec.split,
            world_seed: spec.seed,
            image_size: spec.image_size,
            age_gap: spec.age_gap,
        },
        records,
        root: out_dir.to_path_buf(),
    };
    // Cross-age contract: every reference keeps at least the configured gap.
    if spec.split == Split::TestCrossAge {
        for rec in &manifest.records {
            for r in &rec.references {
                let gap = (rec.gt_age - r.age).abs();
                if gap + 1e-9 < spec.age_gap {
                    return Err(Error::InvalidRange(format!(
                        "internal: gap {gap} below configured {}",
                        spec.age_gap
                    )));
                }
            }
        }
    }
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
