//! First-order degradation synthesis: Gaussian blur, bicubic downsampling,
//! additive Gaussian noise, block-transform compression, bicubic upsampling
//! back to the original size.
//!
//! Compression is JPEG-equivalent-in-quantization: 8x8 block DCT with the
//! standard luminance table scaled by the usual quality mapping, applied per
//! channel, without entropy coding. Bicubic is Catmull-Rom (a = -0.5) with
//! edge clamping and continuous coordinates; the kernel is widened when
//! downscaling. Blur wraps at the borders, which keeps the image mean exact.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::sub_rng;

/// Sampling ranges from the degradation model.
pub const SIGMA_RANGE: (f64, f64) = (0.2, 10.0);
pub const SCALE_RANGE: (f64, f64) = (1.0, 12.0);
pub const NOISE_RANGE: (f64, f64) = (0.0, 15.0);
pub const QUALITY_RANGE: (u32, u32) = (30, 100);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    /// Gaussian blur kernel standard deviation.
    pub sigma_blur: f64,
    /// Down/up scale factor.
    pub r: f64,
    /// Noise standard deviation in 8-bit intensity units.
    pub delta: f64,
    /// Compression quality.
    pub q: u32,
}

impl DegradationParams {
    pub fn near_identity() -> Self {
        DegradationParams {
            sigma_blur: 0.2,
            r: 1.0,
            delta: 0.0,
            q: 100,
        }
    }
}

/// Independent uniform draws over the documented ranges.
pub fn sample_degradation_params(rng: &mut impl Rng) -> DegradationParams {
    DegradationParams {
        sigma_blur: rng.gen_range(SIGMA_RANGE.0..=SIGMA_RANGE.1),
        r: rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        delta: rng.gen_range(NOISE_RANGE.0..=NOISE_RANGE.1),
        q: rng.gen_range(QUALITY_RANGE.0..=QUALITY_RANGE.1),
    }
}

/// Truncated, normalized Gaussian kernel of size `2*ceil(3*sigma)+1`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

fn blur_axis(src: &[f64], n: usize, stride: usize, count: usize, kernel: &[f64], dst: &mut [f64]) {
    let radius = (kernel.len() / 2) as i64;
    for line in 0..count {
        let base = line * if stride == 1 { n } else { 1 };
        for i in 0..n {
            let mut acc = 0.0;
            for (ki, &w) in kernel.iter().enumerate() {
                let off = ki as i64 - radius;
                let idx = (i as i64 + off).rem_euclid(n as i64) as usize;
                acc += w * src[base + idx * stride];
            }
            dst[base + i * stride] = acc;
        }
    }
}

/// Separable Gaussian blur with wrap-around borders.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for ch in 0..c {
        let src = &img.data()[ch * h * w..(ch + 1) * h * w];
        let t = &mut tmp.data_mut()[ch * h * w..(ch + 1) * h * w];
        // Rows.
        blur_axis(src, w, 1, h, &kernel, t);
    }
    for ch in 0..c {
        let src = tmp.data()[ch * h * w..(ch + 1) * h * w].to_vec();
        let o = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        // Columns.
        blur_axis(&src, h, w, w, &kernel, o);
    }
    out
}

fn catmull_rom(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

fn resample_axis_weights(in_n: usize, out_n: usize) -> Vec<(i64, Vec<f64>)> {
    let scale = in_n as f64 / out_n as f64;
    let support = scale.max(1.0);
    let mut table = Vec::with_capacity(out_n);
    for o in 0..out_n {
        let center = (o as f64 + 0.5) * scale - 0.5;
        let lo = (center - 2.0 * support).ceil() as i64;
        let hi = (center + 2.0 * support).floor() as i64;
        let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
        let mut sum = 0.0;
        for i in lo..=hi {
            let w = catmull_rom((center - i as f64) / support);
            weights.push(w);
            sum += w;
        }
        for w in &mut weights {
            *w /= sum;
        }
        table.push((lo, weights));
    }
    table
}

/// Bicubic resize to `(out_h, out_w)` with edge clamping. The kernel widens
/// by the scale ratio when downscaling.
pub fn bicubic_resize(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let wx = resample_axis_weights(w, out_w);
    let wy = resample_axis_weights(h, out_h);
    // Horizontal pass.
    let mut mid = Tensor::zeros(&[c, h, out_w]);
    {
        let md = mid.data_mut();
        for ch in 0..c {
            for y in 0..h {
                for (ox, (lo, weights)) in wx.iter().enumerate() {
                    let mut acc = 0.0;
                    for (k, &wt) in weights.iter().enumerate() {
                        let ix = (lo + k as i64).clamp(0, w as i64 - 1) as usize;
                        acc += wt * img.data()[ch * h * w + y * w + ix];
                    }
                    md[ch * h * out_w + y * out_w + ox] = acc;
                }
            }
        }
    }
    // Vertical pass.
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    {
        let od = out.data_mut();
        for ch in 0..c {
            for (oy, (lo, weights)) in wy.iter().enumerate() {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for (k, &wt) in weights.iter().enumerate() {
                        let iy = (lo + k as i64).clamp(0, h as i64 - 1) as usize;
                        acc += wt * mid.data()[ch * h * out_w + iy * out_w + ox];
                    }
                    od[ch * out_h * out_w + oy * out_w + ox] = acc;
                }
            }
        }
    }
    out
}

// Standard luminance quantization table.
const LUMA_TABLE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Quality -> scaled quantization table (the textbook mapping).
pub fn quant_table(q: u32) -> [f64; 64] {
    let q = q.clamp(1, 100);
    let scale = if q < 50 {
        5000.0 / q as f64
    } else {
        200.0 - 2.0 * q as f64
    };
    let mut t = [0.0; 64];
    for i in 0..64 {
        t[i] = ((LUMA_TABLE[i] * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let ck = if k == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (n, v) in row.iter_mut().enumerate() {
            *v = ck * ((std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64) / 16.0).cos();
        }
    }
    b
}

/// 8x8 block DCT quantization at quality `q`, per channel. Blocks at the
/// borders are padded by edge replication and cropped back.
pub fn block_compress(img: &Tensor, q: u32) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let table = quant_table(q);
    let basis = dct_basis();
    let hp = h.div_ceil(8) * 8;
    let wp = w.div_ceil(8) * 8;
    let mut out = Tensor::zeros(&[c, h, w]);
    let od = out.data_mut();
    let mut block = [[0.0f64; 8]; 8];
    let mut coef = [[0.0f64; 8]; 8];
    for ch in 0..c {
        for by in (0..hp).step_by(8) {
            for bx in (0..wp).step_by(8) {
                for (i, brow) in block.iter_mut().enumerate() {
                    let sy = (by + i).min(h - 1);
                    for (j, bv) in brow.iter_mut().enumerate() {
                        let sx = (bx + j).min(w - 1);
                        *bv = img.data()[ch * h * w + sy * w + sx] - 128.0;
                    }
                }
                // coef = B * block * B^T
                let mut tmp = [[0.0f64; 8]; 8];
                for i in 0..8 {
                    for j in 0..8 {
                        let mut acc = 0.0;
                        for k in 0..8 {
                            acc += basis[i][k] * block[k][j];
                        }
                        tmp[i][j] = acc;
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let mut acc = 0.0;
                        for k in 0..8 {
                            acc += tmp[i][k] * basis[j][k];
                        }
                        let tq = table[i * 8 + j];
                        coef[i][j] = (acc / tq).round() * tq;
                    }
                }
                // block = B^T * coef * B
                for i in 0..8 {
                    for j in 0..8 {
                        let mut acc = 0.0;
                        for k in 0..8 {
                            acc += basis[k][i] * coef[k][j];
                        }
                        tmp[i][j] = acc;
                    }
                }
                for i in 0..8 {
                    let dy = by + i;
                    if dy >= h {
                        continue;
                    }
                    for j in 0..8 {
                        let dx = bx + j;
                        if dx >= w {
                            continue;
                        }
                        let mut acc = 0.0;
                        for k in 0..8 {
                            acc += tmp[i][k] * basis[k][j];
                        }
                        od[ch * h * w + dy * w + dx] = acc + 128.0;
                    }
                }
            }
        }
    }
    out
}

/// Full degradation pipeline, deterministic given `(image, params, seed)`.
pub fn apply_degradation(
    img: &Tensor,
    p: &DegradationParams,
    noise_seed: u64,
) -> Result<Tensor> {
    if p.r < 1.0 {
        return Err(Error::InvalidRange(format!("scale factor r={} < 1", p.r)));
    }
    let (_, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let blurred = gaussian_blur(img, p.sigma_blur);
    let dh = ((h as f64 / p.r).round() as usize).max(1);
    let dw = ((w as f64 / p.r).round() as usize).max(1);
    let mut small = bicubic_resize(&blurred, dh, dw);
    if p.delta > 0.0 {
        let mut rng = sub_rng(noise_seed, "degrade-noise", 0);
        let d = small.data_mut();
        for v in d.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += p.delta * n;
        }
    }
    let compressed = block_compress(&small, p.q);
    let up = bicubic_resize(&compressed, h, w);
    Ok(up.map(|v| v.clamp(0.0, 255.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthface::{render_face, FaceNuisance, FaceSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_face(id: u64, age: f64) -> Tensor {
        let spec = FaceSpec::new(
            FaceSpec::identity_factors_for(5, id),
            age,
            FaceNuisance::default(),
        );
        render_face(&spec, 32).unwrap().image
    }

    fn psnr(a: &Tensor, b: &Tensor) -> f64 {
        let mse = a.sub(b).data().iter().map(|d| d * d).sum::<f64>() / a.numel() as f64;
        if mse == 0.0 {
            return 100.0;
        }
        (10.0 * (255.0 * 255.0 / mse).log10()).min(100.0)
    }

    #[test]
    fn kernel_is_normalized_and_sized() {
        for sigma in [0.2, 1.0, 3.7, 10.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_preserves_mean() {
        let img = test_face(0, 40.0);
        for sigma in [0.5, 2.0, 6.0] {
            let out = gaussian_blur(&img, sigma);
            assert!(
                (out.mean() - img.mean()).abs() < 1e-6,
                "sigma {sigma}: {} vs {}",
                out.mean(),
                img.mean()
            );
        }
    }

    #[test]
    fn resize_identity_when_same_size() {
        let img = test_face(1, 20.0);
        let out = bicubic_resize(&img, 32, 32);
        assert!(out.sub(&img).max_abs() < 1e-12);
    }

    #[test]
    fn resize_preserves_constants() {
        let img = Tensor::filled(&[1, 20, 20], 77.0);
        for (oh, ow) in [(7, 7), (13, 9), (40, 40)] {
            let out = bicubic_resize(&img, oh, ow);
            assert!(out.sub(&Tensor::filled(&[1, oh, ow], 77.0)).max_abs() < 1e-9);
        }
    }

    #[test]
    fn near_identity_config_is_high_psnr() {
        // sigma=0.2, r=1, delta=0, q=100: only negligible blur and integer
        // level quantization remain.
        let mut worst = f64::INFINITY;
        for id in 0..8u64 {
            let img = test_face(id, (id * 13 % 100) as f64);
            let out = apply_degradation(&img, &DegradationParams::near_identity(), 0).unwrap();
            worst = worst.min(psnr(&out, &img));
        }
        assert!(worst > 35.0, "worst PSNR {worst}");
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::filled(&[3, 32, 32], 100.0);
        let p = DegradationParams {
            sigma_blur: 2.0,
            r: 3.0,
            delta: 0.0,
            q: 80,
        };
        let out = apply_degradation(&img, &p, 1).unwrap();
        let first = out.data()[0];
        for &v in out.data() {
            assert!((v - first).abs() < 1e-9, "not constant: {v} vs {first}");
        }
        assert!((first - 100.0).abs() <= 1.0, "drifted to {first}");
    }

    #[test]
    fn noise_keeps_pixel_mean() {
        let img = test_face(2, 60.0);
        let p = DegradationParams {
            sigma_blur: 0.2,
            r: 1.0,
            delta: 10.0,
            q: 100,
        };
        let out = apply_degradation(&img, &p, 7).unwrap();
        let n = (img.numel() / 3) as f64;
        let tol = 3.0 * p.delta / n.sqrt() + 0.2;
        assert!(
            (out.mean() - img.mean()).abs() < tol,
            "mean moved {} (tol {tol})",
            (out.mean() - img.mean()).abs()
        );
    }

    #[test]
    fn determinism_and_seed_dependence() {
        let img = test_face(3, 30.0);
        let p = DegradationParams {
            sigma_blur: 1.5,
            r: 2.5,
            delta: 8.0,
            q: 60,
        };
        let a = apply_degradation(&img, &p, 11).unwrap();
        let b = apply_degradation(&img, &p, 11).unwrap();
        let c = apply_degradation(&img, &p, 12).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn r_below_one_rejected() {
        let img = test_face(4, 50.0);
        let p = DegradationParams {
            sigma_blur: 1.0,
            r: 0.5,
            delta: 0.0,
            q: 90,
        };
        assert!(apply_degradation(&img, &p, 0).is_err());
    }

    #[test]
    fn sampled_params_stay_in_range_and_reproduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let p = sample_degradation_params(&mut rng);
            assert!((SIGMA_RANGE.0..=SIGMA_RANGE.1).contains(&p.sigma_blur));
            assert!((SCALE_RANGE.0..=SCALE_RANGE.1).contains(&p.r));
            assert!((NOISE_RANGE.0..=NOISE_RANGE.1).contains(&p.delta));
            assert!((QUALITY_RANGE.0..=QUALITY_RANGE.1).contains(&p.q));
        }
        let a = sample_degradation_params(&mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_degradation_params(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn quality_100_table_is_all_ones() {
        assert!(quant_table(100).iter().all(|&t| t == 1.0));
        // Lower quality scales the table up.
        let t50 = quant_table(50);
        let t30 = quant_table(30);
        for i in 0..64 {
            assert!(t30[i] >= t50[i]);
        }
    }
}
