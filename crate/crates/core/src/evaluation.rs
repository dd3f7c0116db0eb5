//! Metric computation (PSNR, SSIM, identity similarity, age MAE),
//! identity-token attention heatmaps, and report generation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::AttnTrace;
use crate::error::{Error, Result};
use crate::imageio::load_rgb;
use crate::synthface::{identity_oracle, age_oracle, OracleParams, RunManifest, Split};
use crate::tensor::Tensor;
use crate::util::sha256_hex;

/// PSNR on the 8-bit range, capped at 100 dB (identical images report the
/// cap rather than infinity).
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    assert!(a.same_shape(b), "psnr shape mismatch");
    let mse = a.sub(b).data().iter().map(|d| d * d).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return 100.0;
    }
    (10.0 * (255.0 * 255.0 / mse).log10()).min(100.0)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for x in &mut w {
        *x /= s;
    }
    w
}

/// SSIM with an 11x11 Gaussian window (sigma 1.5) and the standard
/// constants, computed per channel over the valid region and averaged.
pub fn ssim(a: &Tensor, b: &Tensor) -> f64 {
    assert!(a.same_shape(b), "ssim shape mismatch");
    const WIN: usize = 11;
    const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
    const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
    let (ch, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    assert!(h >= WIN && w >= WIN, "image smaller than SSIM window");
    let win = gaussian_window(WIN, 1.5);
    let mut total = 0.0;
    for c in 0..ch {
        let pa = &a.data()[c * h * w..(c + 1) * h * w];
        let pb = &b.data()[c * h * w..(c + 1) * h * w];
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in 0..=(h - WIN) {
            for x in 0..=(w - WIN) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for i in 0..WIN {
                    for j in 0..WIN {
                        let wt = win[i] * win[j];
                        let va = pa[(y + i) * w + x + j];
                        let vb = pb[(y + i) * w + x + j];
                        mu_a += wt * va;
                        mu_b += wt * vb;
                        aa += wt * va * va;
                        bb += wt * vb * vb;
                        ab += wt * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                    / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
                acc += s;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / ch as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub identity_id: u64,
    pub psnr: f64,
    pub ssim: f64,
    /// Identity similarity against the ground truth (headline).
    pub ids: f64,
    /// Identity similarity against the best-matching reference.
    pub ids_ref: f64,
    pub age_pred: f64,
    pub age_target: f64,
    /// Mean |gt age - reference age| for this record (bucket key).
    pub ref_age_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregates {
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_ids: f64,
    pub mean_ids_ref: f64,
    /// Mean |age_pred - age_target|.
    pub age_mae: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub config_hash: String,
    pub manifest_hash: String,
    pub per_instance: Vec<InstanceMetrics>,
    pub aggregates: Aggregates,
    /// Reserved: these metrics require pretrained networks and stay null.
    pub lpips: Option<f64>,
    pub fid: Option<f64>,
    pub musiq: Option<f64>,
}

impl MetricsReport {
    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-instance metrics for one restoration.
pub fn compute_metrics(
    restored: &Tensor,
    ground_truth: &Tensor,
    references: &[Tensor],
    target_age: f64,
    oracles: &OracleParams,
) -> Result<(f64, f64, f64, f64, f64)> {
    let p = psnr(restored, ground_truth);
    let s = ssim(restored, ground_truth);
    let ids = identity_oracle(restored, ground_truth, oracles)?;
    let mut ids_ref = f64::NEG_INFINITY;
    for r in references {
        ids_ref = ids_ref.max(identity_oracle(restored, r, oracles)?);
    }
    if references.is_empty() {
        ids_ref = ids;
    }
    let age_pred = age_oracle(restored, oracles)?;
    let _ = target_age;
    Ok((p, s, ids, ids_ref, age_pred))
}

fn aggregates(per: &[InstanceMetrics]) -> Aggregates {
    let n = per.len() as f64;
    Aggregates {
        count: per.len(),
        mean_psnr: per.iter().map(|m| m.psnr).sum::<f64>() / n,
        mean_ssim: per.iter().map(|m| m.ssim).sum::<f64>() / n,
        mean_ids: per.iter().map(|m| m.ids).sum::<f64>() / n,
        mean_ids_ref: per.iter().map(|m| m.ids_ref).sum::<f64>() / n,
        age_mae: per.iter().map(|m| (m.age_pred - m.age_target).abs()).sum::<f64>() / n,
    }
}

/// File-name convention for restored outputs.
pub fn restored_path(output_dir: &Path, identity_id: u64) -> PathBuf {
    output_dir.join(format!("restored_{identity_id:07}.png"))
}

/// Stable content hash of a manifest (header plus records).
pub fn manifest_hash(manifest: &RunManifest) -> String {
    let mut text = serde_json::to_string(&manifest.header).expect("header json");
    for r in &manifest.records {
        text.push('\n');
        text.push_str(&serde_json::to_string(r).expect("record json"));
    }
    sha256_hex(text.as_bytes())
}

/// Evaluate every manifest record against its restored output. All outputs
/// must exist; otherwise the full missing list is reported and no partial
/// report is produced.
pub fn evaluate_run(
    manifest: &RunManifest,
    output_dir: &Path,
    oracles: &OracleParams,
    config_hash: &str,
) -> Result<MetricsReport> {
    if manifest.records.is_empty() {
        return Err(Error::DegenerateInput(
            "manifest has no records to evaluate".to_string(),
        ));
    }
    let missing: Vec<PathBuf> = manifest
        .records
        .iter()
        .map(|r| restored_path(output_dir, r.identity_id))
        .filter(|p| !p.exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingOutputs(missing));
    }
    let per: Vec<Result<InstanceMetrics>> = manifest
        .records
        .par_iter()
        .map(|rec| {
            let restored = load_rgb(&restored_path(output_dir, rec.identity_id))?;
            let gt = load_rgb(&manifest.resolve(&rec.gt_image))?;
            let refs: Vec<Tensor> = rec
                .references
                .iter()
                .map(|r| load_rgb(&manifest.resolve(&r.image)))
                .collect::<Result<_>>()?;
            let (p, s, ids, ids_ref, age_pred) =
                compute_metrics(&restored, &gt, &refs, rec.gt_age, oracles)?;
            Ok(InstanceMetrics {
                identity_id: rec.identity_id,
                psnr: p,
                ssim: s,
                ids,
                ids_ref,
                age_pred,
                age_target: rec.gt_age,
                ref_age_gap: rec.mean_age_gap(),
            })
        })
        .collect();
    let per: Vec<InstanceMetrics> = per.into_iter().collect::<Result<_>>()?;
    let aggregates = aggregates(&per);
    Ok(MetricsReport {
        split: manifest.split(),
        config_hash: config_hash.to_string(),
        manifest_hash: manifest_hash(manifest),
        per_instance: per,
        aggregates,
        lpips: None,
        fid: None,
        musiq: None,
    })
}

/// Averaged identity-token attention heatmap from recorded sampling traces:
/// per head and token, attention logits are normalized over query positions,
/// then averaged over heads, tokens, sites, and steps, and scaled to [0, 1].
pub fn attention_heatmap(traces: &[AttnTrace], side: usize) -> Result<Tensor> {
    let nq = side * side;
    let mut acc = vec![0.0; nq];
    let mut maps = 0usize;
    for trace in traces {
        for (s, logits) in &trace.sites {
            if *s != side {
                continue;
            }
            let (heads, q, toks) = (
                logits.shape()[0],
                logits.shape()[1],
                logits.shape()[2],
            );
            if q != nq {
                continue;
            }
            for hd in 0..heads {
                for tok in 0..toks {
                    // Softmax over query positions for this (head, token).
                    let mut mx = f64::NEG_INFINITY;
                    for qi in 0..nq {
                        mx = mx.max(logits.data()[(hd * nq + qi) * toks + tok]);
                    }
                    let mut z = 0.0;
                    let mut exps = vec![0.0; nq];
                    for qi in 0..nq {
                        let e = (logits.data()[(hd * nq + qi) * toks + tok] - mx).exp();
                        exps[qi] = e;
                        z += e;
                    }
                    for qi in 0..nq {
                        acc[qi] += exps[qi] / z;
                    }
                    maps += 1;
                }
            }
        }
    }
    if maps == 0 {
        return Err(Error::NotAvailable(
            "no recorded attention at the requested resolution".to_string(),
        ));
    }
    let mut map = Tensor::from_vec(&[side, side], acc);
    let scale = 1.0 / maps as f64;
    let mut mx = 0.0f64;
    {
        let d = map.data_mut();
        for v in d.iter_mut() {
            *v *= scale;
            mx = mx.max(*v);
        }
        if mx > 0.0 {
            for v in d.iter_mut() {
                *v /= mx;
            }
        }
    }
    Ok(map)
}

/// Age-gap buckets `(lo, hi]` matching the ablation layout.
pub const GAP_BUCKETS: [(&str, f64, f64); 5] = [
    ("<=10", -1.0, 10.0),
    ("10-20", 10.0, 20.0),
    ("20-30", 20.0, 30.0),
    ("30-40", 30.0, 40.0),
    (">40", 40.0, f64::INFINITY),
];

#[derive(Debug, Clone, Serialize)]
pub struct BucketRow {
    pub label: String,
    pub aggregates: Aggregates,
}

/// Group per-instance metrics into the five age-gap buckets.
pub fn bucket_rows(report: &MetricsReport) -> Vec<BucketRow> {
    GAP_BUCKETS
        .iter()
        .map(|(label, lo, hi)| {
            let subset: Vec<InstanceMetrics> = report
                .per_instance
                .iter()
                .filter(|m| m.ref_age_gap > *lo && m.ref_age_gap <= *hi)
                .cloned()
                .collect();
            let aggregates = if subset.is_empty() {
                Aggregates {
                    count: 0,
                    mean_psnr: f64::NAN,
                    mean_ssim: f64::NAN,
                    mean_ids: f64::NAN,
                    mean_ids_ref: f64::NAN,
                    age_mae: f64::NAN,
                }
            } else {
                aggregates(&subset)
            };
            BucketRow {
                label: label.to_string(),
                aggregates,
            }
        })
        .collect()
}

/// Plain-text table with aligned columns.
pub fn render_table(title: &str, headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = format!("{title}\n");
    let fmt_row = |cells: &[String]| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:>width$}", c, width = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
    };
    out.push_str(&fmt_row(
        &headers.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
    ));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out
}

/// Standard metric row for the text tables.
pub fn metric_row(label: &str, a: &Aggregates, with_age: bool) -> Vec<String> {
    let mut row = vec![
        label.to_string(),
        format!("{:.2}", a.mean_psnr),
        format!("{:.3}", a.mean_ssim),
        format!("{:.3}", a.mean_ids),
    ];
    if with_age {
        row.push(format!("{:.2}", a.age_mae));
    }
    row
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthface::{render_face, FaceNuisance, FaceSpec};
    use crate::util::sub_rng;

    fn face(id: u64, age: f64) -> Tensor {
        let spec = FaceSpec::new(
            FaceSpec::identity_factors_for(9, id),
            age,
            FaceNuisance::default(),
        );
        render_face(&spec, 32).unwrap().image
    }

    #[test]
    fn psnr_identity_capped_and_monotone() {
        let img = face(0, 40.0);
        assert_eq!(psnr(&img, &img), 100.0);
        let mut noisy1 = img.clone();
        let mut noisy2 = img.clone();
        let mut rng = sub_rng(1, "noise", 0);
        let noise = Tensor::randn(img.shape(), &mut rng);
        noisy1.accumulate(&noise.scale(2.0));
        noisy2.accumulate(&noise.scale(8.0));
        let p1 = psnr(&noisy1, &img);
        let p2 = psnr(&noisy2, &img);
        assert!(p1 > p2, "{p1} vs {p2}");
    }

    #[test]
    fn ssim_self_is_one_constant_vs_face_low() {
        let img = face(1, 60.0);
        assert!((ssim(&img, &img) - 1.0).abs() < 1e-12);
        let gray = Tensor::filled(&[3, 32, 32], 128.0);
        let s = ssim(&gray, &img);
        assert!(s < 0.5, "constant-vs-face SSIM {s}");
        // Symmetry.
        assert!((ssim(&gray, &img) - ssim(&img, &gray)).abs() < 1e-12);
    }

    #[test]
    fn heatmap_uniform_logits_give_uniform_map() {
        let side = 4;
        let heads = 2;
        let toks = 3;
        let logits = Tensor::zeros(&[heads, side * side, toks]);
        let traces = vec![AttnTrace {
            sites: vec![(side, logits)],
        }];
        let map = attention_heatmap(&traces, side).unwrap();
        // All-equal attention: every query holds 1/(H*W) before the final
        // normalization, so the normalized map is exactly 1 everywhere.
        assert!(map.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(map.shape(), &[side, side]);
    }

    #[test]
    fn heatmap_requires_recording() {
        assert!(matches!(
            attention_heatmap(&[], 4),
            Err(Error::NotAvailable(_))
        ));
    }

    #[test]
    fn bucket_rows_cover_all_instances() {
        let mk = |gap: f64| InstanceMetrics {
            identity_id: 0,
            psnr: 30.0,
            ssim: 0.8,
            ids: 0.7,
            ids_ref: 0.7,
            age_pred: 40.0,
            age_target: 42.0,
            ref_age_gap: gap,
        };
        let report = MetricsReport {
            split: Split::TestCrossAge,
            config_hash: String::new(),
            manifest_hash: String::new(),
            per_instance: vec![mk(5.0), mk(15.0), mk(25.0), mk(35.0), mk(55.0), mk(10.0)],
            aggregates: Aggregates {
                count: 6,
                mean_psnr: 0.0,
                mean_ssim: 0.0,
                mean_ids: 0.0,
                mean_ids_ref: 0.0,
                age_mae: 0.0,
            },
            lpips: None,
            fid: None,
            musiq: None,
        };
        let rows = bucket_rows(&report);
        assert_eq!(rows.len(), 5);
        let total: usize = rows.iter().map(|r| r.aggregates.count).sum();
        assert_eq!(total, 6);
        assert_eq!(rows[0].aggregates.count, 2); // 5.0 and the boundary 10.0
    }

    #[test]
    fn table_renderer_aligns() {
        let t = render_table(
            "demo",
            &["name", "v"],
            &[
                vec!["a".to_string(), "1.00".to_string()],
                vec!["long-name".to_string(), "2.25".to_string()],
            ],
        );
        assert!(t.contains("demo"));
        assert!(t.lines().count() >= 4);
    }
}
