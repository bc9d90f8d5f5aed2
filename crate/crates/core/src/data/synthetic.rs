//! Procedural face-like images with analytic UV ground truth.
//!
//! The head is an ellipsoid seen along the optical axis. Inside its silhouette
//! the normalized, de-rotated coordinates `(X, Y)` lift to the surface point
//! `(X, Y, sqrt(1 − X² − Y²))`, and the UV field is the longitude/latitude
//! parameterization of that point, each mapped onto `[0, 1]`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::uv::UvField;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const MIN_SYNTHETIC_SIDE: usize = 32;

/// Geometry and appearance of one synthetic head, in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    /// In-plane rotation in radians.
    pub angle: f64,
    pub skin: [f64; 3],
    pub background_top: [f64; 3],
    pub background_bottom: [f64; 3],
    pub light: [f64; 3],
}

impl FaceParams {
    pub fn sample(seed: u64, h: usize, w: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xFACE);
        let (hf, wf) = (h as f64, w as f64);
        let mut color = |lo: f64, hi: f64| {
            [
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
            ]
        };
        let tone = color(0.0, 1.0);
        let skin = [
            0.55 + 0.35 * tone[0],
            0.40 + 0.30 * tone[0] * (0.8 + 0.2 * tone[1]),
            0.30 + 0.25 * tone[0] * (0.7 + 0.3 * tone[2]),
        ];
        let background_top = color(0.15, 0.85);
        let background_bottom = color(0.15, 0.85);
        let lx = rng.random_range(-0.5..0.5);
        let ly = rng.random_range(-0.5..0.2);
        let norm = (lx * lx + ly * ly + 1.0f64).sqrt();
        Self {
            center: (
                wf * rng.random_range(0.42..0.58),
                hf * rng.random_range(0.42..0.58),
            ),
            semi_axes: (
                wf * rng.random_range(0.24..0.34),
                hf * rng.random_range(0.30..0.42),
            ),
            angle: rng.random_range(-0.25..0.25),
            skin,
            background_top,
            background_bottom,
            light: [lx / norm, ly / norm, 1.0 / norm],
        }
    }

    /// Normalized surface coordinates `(X, Y)` of pixel center `(x, y)`.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (sin, cos) = self.angle.sin_cos();
        (
            (cos * dx + sin * dy) / self.semi_axes.0,
            (-sin * dx + cos * dy) / self.semi_axes.1,
        )
    }
}

fn bump(du: f64, dv: f64, su: f64, sv: f64) -> f64 {
    (-(du * du) / (2.0 * su * su) - (dv * dv) / (2.0 * sv * sv)).exp()
}

/// Renders `params` at `h × w`, returning the RGB image and its UV field.
pub fn render_face(params: &FaceParams, h: usize, w: usize) -> Result<(ImageTensor, UvField)> {
    if h < MIN_SYNTHETIC_SIDE || w < MIN_SYNTHETIC_SIDE {
        return Err(Error::Config(format!(
            "synthetic faces need at least {MIN_SYNTHETIC_SIDE}x{MIN_SYNTHETIC_SIDE}, got {h}x{w}"
        )));
    }
    let mut img = ImageTensor::zeros(3, h, w);
    let n = h * w;
    let (mut u, mut v, mut validity) = (vec![0.0f32; n], vec![0.0f32; n], vec![0u8; n]);
    for y in 0..h {
        let t = y as f64 / (h - 1) as f64;
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (lx, ly) = params.local(px, py);
            let r2 = lx * lx + ly * ly;
            let rgb = if r2 <= 1.0 {
                let z = (1.0 - r2).max(0.0).sqrt();
                let uu = 0.5 + lx.atan2(z) / PI;
                let vv = 0.5 + ly.clamp(-1.0, 1.0).asin() / PI;
                let i = y * w + x;
                u[i] = uu.clamp(0.0, 1.0) as f32;
                v[i] = vv.clamp(0.0, 1.0) as f32;
                validity[i] = 1;

                let l = params.light;
                let shade = 0.35 + 0.65 * (lx * l[0] + ly * l[1] + z * l[2]).max(0.0);
                let eyes =
                    bump(uu - 0.42, vv - 0.42, 0.025, 0.018) + bump(uu - 0.58, vv - 0.42, 0.025, 0.018);
                let brows = bump(uu - 0.42, vv - 0.36, 0.04, 0.008) + bump(uu - 0.58, vv - 0.36, 0.04, 0.008);
                let mouth = bump(uu - 0.5, vv - 0.66, 0.05, 0.012);
                let nose = bump(uu - 0.5, vv - 0.54, 0.012, 0.03);
                let dark = (0.75 * eyes + 0.5 * brows + 0.25 * nose).min(0.9);
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = params.skin[k] * shade * (1.0 - dark);
                }
                c[0] += 0.25 * mouth * (1.0 - c[0]);
                c[1] *= 1.0 - 0.35 * mouth;
                c[2] *= 1.0 - 0.35 * mouth;
                c
            } else {
                let wave = 0.04 * (px / w as f64 * 2.0 * PI).sin();
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = (1.0 - t) * params.background_top[k] + t * params.background_bottom[k] + wave;
                }
                c
            };
            for k in 0..3 {
                img.set(k, y, x, rgb[k].clamp(0.0, 1.0) as f32);
            }
        }
    }
    let uv = UvField::new(h, w, u, v, validity)?;
    Ok((img, uv))
}

/// Face image and UV ground truth fully determined by `seed`.
pub fn generate_synthetic_face(seed: u64, h: usize, w: usize) -> Result<(ImageTensor, UvField)> {
    render_face(&FaceParams::sample(seed, h, w), h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered(h: usize, w: usize) -> FaceParams {
        FaceParams {
            center: (w as f64 / 2.0, h as f64 / 2.0),
            semi_axes: (w as f64 * 0.3, h as f64 * 0.4),
            angle: 0.0,
            skin: [0.8, 0.6, 0.5],
            background_top: [0.2, 0.3, 0.4],
            background_bottom: [0.5, 0.5, 0.5],
            light: [0.0, 0.0, 1.0],
        }
    }

    #[test]
    fn u_nondecreasing_along_midline() {
        let (h, w) = (64, 64);
        let (_, uv) = render_face(&centered(h, w), h, w).unwrap();
        let row = h / 2;
        let mut last = -1.0f32;
        let mut seen = 0;
        for x in 0..w {
            let i = row * w + x;
            if uv.validity()[i] == 1 {
                assert!(uv.u()[i] >= last, "u decreased at x={x}");
                last = uv.u()[i];
                seen += 1;
            }
        }
        assert!(seen > w / 3);
    }

    #[test]
    fn invalid_region_has_zero_uv_and_ranges_hold() {
        let (img, uv) = generate_synthetic_face(11, 48, 64).unwrap();
        assert_eq!(img.dims(), (3, 48, 64));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..48 * 64 {
            if uv.validity()[i] == 0 {
                assert_eq!((uv.u()[i], uv.v()[i]), (0.0, 0.0));
            } else {
                assert!((0.0..=1.0).contains(&uv.u()[i]) && (0.0..=1.0).contains(&uv.v()[i]));
            }
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_heads() {
        let a = FaceParams::sample(1, 64, 64);
        let b = FaceParams::sample(2, 64, 64);
        assert_ne!(a.center, b.center);
        assert_ne!(a.semi_axes, b.semi_axes);
        let (_, ua) = render_face(&a, 64, 64).unwrap();
        let (_, ub) = render_face(&b, 64, 64).unwrap();
        assert_ne!(ua.validity(), ub.validity());
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            generate_synthetic_face(5, 32, 32).unwrap(),
            generate_synthetic_face(5, 32, 32).unwrap()
        );
    }

    #[test]
    fn too_small_rejected() {
        assert!(generate_synthetic_face(0, 31, 64).is_err());
    }
}
