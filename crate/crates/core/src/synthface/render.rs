//! Procedural face renderer.
//!
//! A face is a deterministic function of a `FaceSpec`: identity factors drive
//! geometry and colour, the age scalar drives wrinkle strokes (count and
//! opacity), face elongation, and hair brightness, and nuisance parameters
//! jitter pose, illumination, and the background. The renderer also reports
//! the analytic wrinkle mass (total stroke alpha actually painted), which is
//! strictly increasing in age by construction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::sub_rng;

/// Number of identity factors; each lies in [-1, 1].
pub const IDENTITY_FACTORS: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FaceNuisance {
    /// Horizontal/vertical pose jitter in normalized image units.
    pub pose_dx: f64,
    pub pose_dy: f64,
    /// Global illumination multiplier.
    pub illumination: f64,
    /// Seed for the procedural background pattern.
    pub background_seed: u64,
}

impl Default for FaceNuisance {
    fn default() -> Self {
        FaceNuisance {
            pose_dx: 0.0,
            pose_dy: 0.0,
            illumination: 1.0,
            background_seed: 0,
        }
    }
}

impl FaceNuisance {
    pub fn sample(rng: &mut impl Rng) -> Self {
        FaceNuisance {
            pose_dx: rng.gen_range(-0.025..0.025),
            pose_dy: rng.gen_range(-0.025..0.025),
            illumination: rng.gen_range(0.9..1.1),
            background_seed: rng.gen(),
        }
    }
}

/// Ground-truth generative parameters of a synthetic face.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FaceSpec {
    pub identity_seed: Vec<f64>,
    pub age: f64,
    pub nuisance: FaceNuisance,
}

impl FaceSpec {
    /// Deterministic identity factors for a numeric identity id.
    pub fn identity_factors_for(world_seed: u64, identity_id: u64) -> Vec<f64> {
        let mut rng = sub_rng(world_seed, "identity-factors", identity_id);
        (0..IDENTITY_FACTORS).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    pub fn new(identity_seed: Vec<f64>, age: f64, nuisance: FaceNuisance) -> Self {
        FaceSpec {
            identity_seed,
            age,
            nuisance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.identity_seed.len() != IDENTITY_FACTORS {
            return Err(Error::InvalidRange(format!(
                "identity_seed must have {IDENTITY_FACTORS} factors, got {}",
                self.identity_seed.len()
            )));
        }
        if self.identity_seed.iter().any(|&x| !(-1.0..=1.0).contains(&x)) {
            return Err(Error::InvalidRange(
                "identity factors must lie in [-1, 1]".to_string(),
            ));
        }
        if !(0.0..=100.0).contains(&self.age) {
            return Err(Error::InvalidRange(format!("age {} outside [0,100]", self.age)));
        }
        let n = &self.nuisance;
        if !(-0.05..=0.05).contains(&n.pose_dx)
            || !(-0.05..=0.05).contains(&n.pose_dy)
            || !(0.7..=1.3).contains(&n.illumination)
        {
            return Err(Error::InvalidRange("nuisance out of range".to_string()));
        }
        Ok(())
    }
}

/// Renderer output: 8-bit-valued RGB image `(3,S,S)`, exact foreground mask
/// `(S,S)` in {0,1}, and the analytic wrinkle mass.
pub struct Render {
    pub image: Tensor,
    pub mask: Tensor,
    pub wrinkle_mass: f64,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Map a factor in [-1,1] to [lo,hi].
fn fac(x: f64, lo: f64, hi: f64) -> f64 {
    lerp(lo, hi, (x + 1.0) / 2.0)
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn dist_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (vx, vy) = (bx - ax, by - ay);
    let (wx, wy) = (px - ax, py - ay);
    let c1 = vx * wx + vy * wy;
    let c2 = vx * vx + vy * vy;
    let t = if c2 > 0.0 { clamp01(c1 / c2) } else { 0.0 };
    let (dx, dy) = (px - (ax + t * vx), py - (ay + t * vy));
    (dx * dx + dy * dy).sqrt()
}

struct Geometry {
    cx: f64,
    cy: f64,
    face_rx: f64,
    face_ry: f64,
    outline_pow: f64,
    eye_dx: f64,
    eye_r: f64,
    eye_aspect: f64,
    eye_v: f64,
    brow_th: f64,
    brow_v: f64,
    nose_len: f64,
    nose_w: f64,
    mouth_hw: f64,
    mouth_v: f64,
    hair_line_v: f64,
    skin: [f64; 3],
    hair_v_value: f64,
    // Wrinkle strokes: (ax, ay, bx, by, radius), offsets relative to centre.
    strokes: Vec<(f64, f64, f64, f64, f64)>,
    stroke_ramp: Vec<f64>,
}

fn geometry(spec: &FaceSpec) -> Geometry {
    let id = &spec.identity_seed;
    let a_n = spec.age / 100.0;
    let cx = 0.5 + spec.nuisance.pose_dx;
    let cy = 0.5 + spec.nuisance.pose_dy;
    let face_rx = fac(id[0], 0.24, 0.33);
    let face_ry0 = fac(id[1], 0.29, 0.37);
    // Age slightly elongates the face.
    let face_ry = face_ry0 * (1.0 + 0.14 * a_n);
    let eye_dx = fac(id[2], 0.09, 0.15);
    let eye_r = fac(id[3], 0.022, 0.040);
    let eye_v = fac(id[4], -0.11, -0.05);
    let nose_len = fac(id[5], 0.08, 0.15);
    let nose_w = fac(id[6], 0.012, 0.028);
    let mouth_hw = fac(id[7], 0.05, 0.11);
    let mouth_v = fac(id[8], 0.14, 0.21);
    let hue = fac(id[9], 0.0, 360.0);
    let sat = fac(id[10], 0.15, 0.45) * (1.0 - 0.45 * a_n);
    let brow_th = fac(id[11], 0.006, 0.013);
    let brow_v = eye_v - fac(id[12], 0.045, 0.075);
    let skin_val = fac(id[13], 0.55, 0.80);
    let eye_aspect = fac(id[14], 0.55, 0.95);
    let outline_pow = fac(id[15], 1.8, 2.8);

    let skin = hsv_to_rgb(hue, sat, skin_val);
    let hair_line_v = brow_v - 0.055;
    let hair_v_value = 0.18 + 0.64 * a_n;

    // Stroke geometry uses the age-independent base ellipse so that only the
    // opacity ramp depends on age; that keeps wrinkle mass strictly monotone.
    let fy = face_ry0;
    let forehead = brow_v - 0.045;
    let mut strokes = Vec::new();
    for j in 0..3 {
        let y = forehead - j as f64 * 0.028;
        strokes.push((-0.5 * face_rx, y, 0.5 * face_rx, y, 0.011));
    }
    for side in [-1.0, 1.0] {
        let x0 = side * (eye_dx + eye_r + 0.012);
        let x1 = side * (eye_dx + eye_r + 0.05);
        strokes.push((x0, eye_v, x1, eye_v + 0.03, 0.010));
    }
    for side in [-1.0, 1.0] {
        strokes.push((
            side * (nose_w + 0.016),
            nose_len * 0.8,
            side * (mouth_hw + 0.012),
            mouth_v - 0.012,
            0.011,
        ));
    }
    strokes.push((
        -0.7 * mouth_hw,
        mouth_v + 0.055,
        0.7 * mouth_hw,
        mouth_v + 0.055,
        0.011,
    ));
    let n_strokes = strokes.len();
    let stroke_ramp: Vec<f64> = (0..n_strokes)
        .map(|k| clamp01(a_n * n_strokes as f64 - k as f64))
        .collect();
    let _ = fy;

    Geometry {
        cx,
        cy,
        face_rx,
        face_ry,
        outline_pow,
        eye_dx,
        eye_r,
        eye_aspect,
        eye_v,
        brow_th,
        brow_v,
        nose_len,
        nose_w,
        mouth_hw,
        mouth_v,
        hair_line_v,
        skin,
        hair_v_value,
        strokes,
        stroke_ramp,
    }
}

/// Render a face at `size` x `size`. Same spec, same bytes.
pub fn render_face(spec: &FaceSpec, size: usize) -> Result<Render> {
    if size < 16 {
        return Err(Error::InvalidRange(format!("size {size} < 16")));
    }
    spec.validate()?;
    let g = geometry(spec);
    let soft = 0.8 / size as f64;

    // Background pattern from the nuisance seed.
    let mut bg_rng = sub_rng(spec.nuisance.background_seed, "background", 0);
    let (bf1, bf2): (f64, f64) = (bg_rng.gen_range(2.0..6.0), bg_rng.gen_range(2.0..6.0));
    let (bp1, bp2): (f64, f64) = (
        bg_rng.gen_range(0.0..std::f64::consts::TAU),
        bg_rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let bg_base: f64 = bg_rng.gen_range(0.25..0.45);

    let mut img = Tensor::zeros(&[3, size, size]);
    let mut mask = Tensor::zeros(&[size, size]);
    let mut wrinkle_mass = 0.0;

    let ellipse_cov = |du: f64, dv: f64, rx: f64, ry: f64, p: f64| -> f64 {
        let q = (du.abs() / rx).powf(p) + (dv.abs() / ry).powf(p);
        let eps = 2.5 * soft / rx.min(ry);
        clamp01((1.0 - q) / eps + 0.5)
    };
    let stroke_cov = |du: f64, dv: f64, s: &(f64, f64, f64, f64, f64)| -> f64 {
        let d = dist_segment(du, dv, s.0, s.1, s.2, s.3);
        clamp01((s.4 - d) / soft + 0.5)
    };

    {
        let md = mask.data_mut();
        let data = img.data_mut();
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64;
                let v = (y as f64 + 0.5) / size as f64;
                let du = u - g.cx;
                let dv = v - g.cy;

                // Background.
                let b = bg_base
                    + 0.10 * (bf1 * std::f64::consts::TAU * u + bp1).sin()
                    + 0.10 * (bf2 * std::f64::consts::TAU * v + bp2).sin();
                let mut rgb = [b, b, b * 1.05];

                // Face skin inside the superellipse outline.
                let face_a = ellipse_cov(du, dv, g.face_rx, g.face_ry, g.outline_pow);
                if face_a > 0.0 {
                    for c in 0..3 {
                        rgb[c] = lerp(rgb[c], g.skin[c], face_a);
                    }
                    // Hair cap above the hairline, brightness tracks age.
                    let hair_a = face_a * clamp01((g.hair_line_v - dv) / soft + 0.5);
                    if hair_a > 0.0 {
                        let hv = g.hair_v_value;
                        let hair = [hv, hv * 0.92, hv * 0.82];
                        for c in 0..3 {
                            rgb[c] = lerp(rgb[c], hair[c], hair_a);
                        }
                    }
                    // Brows.
                    for side in [-1.0, 1.0] {
                        let a = stroke_cov(
                            du,
                            dv,
                            &(
                                side * (g.eye_dx - g.eye_r),
                                g.brow_v,
                                side * (g.eye_dx + g.eye_r),
                                g.brow_v,
                                g.brow_th,
                            ),
                        ) * face_a;
                        if a > 0.0 {
                            for c in 0..3 {
                                rgb[c] = lerp(rgb[c], 0.15, a);
                            }
                        }
                    }
                    // Eyes.
                    for side in [-1.0, 1.0] {
                        let a = ellipse_cov(
                            du - side * g.eye_dx,
                            dv - g.eye_v,
                            g.eye_r,
                            g.eye_r * g.eye_aspect,
                            2.0,
                        ) * face_a;
                        if a > 0.0 {
                            let eye = [0.08, 0.08, 0.12];
                            for c in 0..3 {
                                rgb[c] = lerp(rgb[c], eye[c], a);
                            }
                        }
                    }
                    // Nose: vertical shaded stroke.
                    let nose_a =
                        stroke_cov(du, dv, &(0.0, -0.01, 0.0, g.nose_len, g.nose_w)) * face_a;
                    if nose_a > 0.0 {
                        for c in 0..3 {
                            rgb[c] = lerp(rgb[c], g.skin[c] * 0.72, nose_a);
                        }
                    }
                    // Mouth.
                    let mouth_a = stroke_cov(
                        du,
                        dv,
                        &(-g.mouth_hw, g.mouth_v, g.mouth_hw, g.mouth_v, 0.013),
                    ) * face_a;
                    if mouth_a > 0.0 {
                        let lip = [0.55 * g.skin[0] + 0.18, 0.35 * g.skin[1], 0.35 * g.skin[2]];
                        for c in 0..3 {
                            rgb[c] = lerp(rgb[c], lip[c], mouth_a);
                        }
                    }
                    // Wrinkle strokes, opacity ramped by age.
                    for (k, s) in g.strokes.iter().enumerate() {
                        let ramp = g.stroke_ramp[k];
                        if ramp == 0.0 {
                            continue;
                        }
                        let a = stroke_cov(du, dv, s) * face_a * 0.55 * ramp;
                        if a > 0.0 {
                            wrinkle_mass += a;
                            for c in 0..3 {
                                rgb[c] = lerp(rgb[c], g.skin[c] * 0.42, a);
                            }
                        }
                    }
                }

                md[y * size + x] = if face_a >= 0.5 { 1.0 } else { 0.0 };
                let illum = spec.nuisance.illumination;
                for c in 0..3 {
                    let q = (clamp01(rgb[c] * illum) * 255.0).round();
                    data[c * size * size + y * size + x] = q;
                }
            }
        }
    }

    Ok(Render {
        image: img,
        mask,
        wrinkle_mass,
    })
}

/// Wrinkle-pixel count: pixels whose painted wrinkle alpha is visible. Used
/// by tests of the age monotonicity contract.
pub fn wrinkle_pixel_count(spec: &FaceSpec, size: usize) -> Result<usize> {
    spec.validate()?;
    let g = geometry(spec);
    let soft = 0.8 / size as f64;
    let mut count = 0usize;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let du = u - g.cx;
            let dv = v - g.cy;
            let q = (du.abs() / g.face_rx).powf(g.outline_pow)
                + (dv.abs() / g.face_ry).powf(g.outline_pow);
            let eps = 2.5 * soft / g.face_rx.min(g.face_ry);
            let face_a = clamp01((1.0 - q) / eps + 0.5);
            if face_a <= 0.0 {
                continue;
            }
            for (k, s) in g.strokes.iter().enumerate() {
                let ramp = g.stroke_ramp[k];
                if ramp == 0.0 {
                    continue;
                }
                let d = dist_segment(du, dv, s.0, s.1, s.2, s.3);
                let cov = clamp01((s.4 - d) / soft + 0.5);
                if cov * face_a * 0.55 * ramp > 1.0 / 255.0 {
                    count += 1;
                    break;
                }
            }
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec_for(id: u64, age: f64) -> FaceSpec {
        FaceSpec::new(
            FaceSpec::identity_factors_for(42, id),
            age,
            FaceNuisance::default(),
        )
    }

    #[test]
    fn render_is_deterministic() {
        let spec = spec_for(3, 37.0);
        let a = render_face(&spec, 32).unwrap();
        let b = render_face(&spec, 32).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.mask.data(), b.mask.data());
        assert_eq!(a.wrinkle_mass, b.wrinkle_mass);
    }

    #[test]
    fn wrinkle_mass_strictly_increases_with_age() {
        for id in 0..5u64 {
            let mut prev = -1.0;
            for age_step in 0..=20 {
                let age = age_step as f64 * 5.0;
                let r = render_face(&spec_for(id, age), 32).unwrap();
                assert!(
                    r.wrinkle_mass > prev,
                    "id {id}: mass({age}) = {} <= mass(prev) = {prev}",
                    r.wrinkle_mass
                );
                prev = r.wrinkle_mass;
            }
        }
    }

    #[test]
    fn wrinkle_pixels_young_vs_old() {
        let young = wrinkle_pixel_count(&spec_for(7, 0.0), 32).unwrap();
        let old = wrinkle_pixel_count(&spec_for(7, 100.0), 32).unwrap();
        assert_eq!(young, 0);
        assert!(old > young, "old {old} vs young {young}");
    }

    #[test]
    fn out_of_range_specs_error() {
        let mut spec = spec_for(0, 30.0);
        spec.age = 130.0;
        assert!(render_face(&spec, 32).is_err());
        let mut spec = spec_for(0, 30.0);
        spec.identity_seed[0] = 2.0;
        assert!(render_face(&spec, 32).is_err());
        assert!(render_face(&spec_for(0, 30.0), 8).is_err());
    }

    #[test]
    fn mask_marks_centre_not_corners() {
        let r = render_face(&spec_for(1, 40.0), 32).unwrap();
        assert_eq!(r.mask.data()[16 * 32 + 16], 1.0);
        assert_eq!(r.mask.data()[0], 0.0);
        assert_eq!(r.mask.data()[32 * 32 - 1], 0.0);
        // Mask is binary.
        assert!(r.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
    }

    #[test]
    fn nuisance_changes_background_not_geometry_much() {
        let base = spec_for(2, 45.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut other = base.clone();
        other.nuisance = FaceNuisance::sample(&mut rng);
        let a = render_face(&base, 32).unwrap();
        let b = render_face(&other, 32).unwrap();
        assert_ne!(a.image.data(), b.image.data());
        // Face still occupies a comparable area.
        let area_a: f64 = a.mask.sum();
        let area_b: f64 = b.mask.sum();
        assert!((area_a - area_b).abs() / area_a < 0.2);
    }
}
