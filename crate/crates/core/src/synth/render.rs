use std::f64::consts::{PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pose::{joints, joints_in_frame, local_joints, to_image, Joints, PoseParams, FINGERS};
use super::{IMAGE_SIZE, K, SIGMA};
use crate::error::{Error, Result};

pub const BG_MEAN: (f64, f64) = (0.05, 0.95);
pub const BG_CONTRAST: (f64, f64) = (0.0, 0.6);
pub const LIGHT_CONTRAST: (f64, f64) = (0.0, 0.8);
pub const ALBEDO: (f64, f64) = (0.2, 0.95);
pub const THICKNESS: (f64, f64) = (1.5, 3.0);
pub const MAX_BLUR: u8 = 2;
/// Minimum gap between hand albedo and background mean.
pub const MIN_SEPARATION: f64 = 0.15;

/// Cells per image side in the background value-noise lattice.
const NOISE_CELLS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceParams {
    pub background_seed: u64,
    pub background_mean: f64,
    pub background_contrast: f64,
    /// Light direction in radians.
    pub light_angle: f64,
    pub light_contrast: f64,
    pub albedo: f64,
    /// Finger radius in pixels.
    pub thickness: f64,
    /// Box-blur radius in pixels.
    pub blur: u8,
}

/// Uniform sample within the documented ranges. Draws with an albedo
/// closer than [`MIN_SEPARATION`] to the background mean are redrawn.
pub fn sample_appearance<R: Rng + ?Sized>(rng: &mut R) -> AppearanceParams {
    loop {
        let app = AppearanceParams {
            background_seed: rng.gen(),
            background_mean: rng.gen_range(BG_MEAN.0..BG_MEAN.1),
            background_contrast: rng.gen_range(BG_CONTRAST.0..BG_CONTRAST.1),
            light_angle: rng.gen_range(0.0..2.0 * PI),
            light_contrast: rng.gen_range(LIGHT_CONTRAST.0..LIGHT_CONTRAST.1),
            albedo: rng.gen_range(ALBEDO.0..ALBEDO.1),
            thickness: rng.gen_range(THICKNESS.0..THICKNESS.1),
            blur: rng.gen_range(0..=MAX_BLUR),
        };
        if (app.albedo - app.background_mean).abs() >= MIN_SEPARATION {
            return app;
        }
    }
}

/// A rendered sample: row-major 64x64 intensities in [0, 1] and the joints.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub image: Vec<f32>,
    pub joints: Joints,
}

#[derive(Clone, Copy, Debug)]
struct Capsule {
    a: [f64; 2],
    b: [f64; 2],
    radius: f64,
}

impl Capsule {
    fn coverage(&self, p: [f64; 2]) -> f64 {
        let d = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let q = [p[0] - self.a[0], p[1] - self.a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let t = if len2 > 0.0 { ((q[0] * d[0] + q[1] * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let dist = (q[0] - t * d[0]).hypot(q[1] - t * d[1]);
        (self.radius + 0.5 - dist).clamp(0.0, 1.0)
    }
}

fn hand_capsules(pose: &PoseParams, thickness: f64) -> Vec<Capsule> {
    let local = local_joints(pose);
    let px = |p: [f64; 2]| to_image(pose, p);
    let wrist = px(local[0]);
    let mut caps = Vec::with_capacity(3 * FINGERS + 8);
    // Forearm stub below the wrist; it carries no joint.
    caps.push(Capsule { a: wrist, b: px([0.0, 1.6]), radius: 1.7 * thickness });
    caps.push(Capsule { a: px([0.0, -0.35]), b: px([-0.05, -0.75]), radius: 0.45 * pose.palm_scale });
    for f in 0..FINGERS {
        let base = px(local[1 + 3 * f]);
        caps.push(Capsule { a: wrist, b: base, radius: 1.4 * thickness });
        if f + 1 < FINGERS {
            caps.push(Capsule { a: base, b: px(local[1 + 3 * (f + 1)]), radius: 1.4 * thickness });
        }
        let mid = px(local[2 + 3 * f]);
        let tip = px(local[3 + 3 * f]);
        caps.push(Capsule { a: base, b: mid, radius: thickness });
        caps.push(Capsule { a: mid, b: tip, radius: 0.85 * thickness });
    }
    caps
}

/// Bilinearly interpolated random lattice in [0, 1].
fn value_noise(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = NOISE_CELLS + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
    let cell = (IMAGE_SIZE - 1) as f64 / NOISE_CELLS as f64;
    let mut out = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for v in 0..IMAGE_SIZE {
        let gy = v as f64 / cell;
        let y0 = (gy.floor() as usize).min(NOISE_CELLS - 1);
        let fy = gy - y0 as f64;
        for u in 0..IMAGE_SIZE {
            let gx = u as f64 / cell;
            let x0 = (gx.floor() as usize).min(NOISE_CELLS - 1);
            let fx = gx - x0 as f64;
            let l = |yy: usize, xx: usize| lattice[yy * n + xx];
            let top = l(y0, x0) * (1.0 - fx) + l(y0, x0 + 1) * fx;
            let bottom = l(y0 + 1, x0) * (1.0 - fx) + l(y0 + 1, x0 + 1) * fx;
            out[v * IMAGE_SIZE + u] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

fn box_blur(img: &[f64], radius: usize) -> Vec<f64> {
    if radius == 0 {
        return img.to_vec();
    }
    let s = IMAGE_SIZE as isize;
    let r = radius as isize;
    let at = |y: isize, x: isize| img[(y.clamp(0, s - 1) * s + x.clamp(0, s - 1)) as usize];
    let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut out = vec![0.0; img.len()];
    for y in 0..s {
        for x in 0..s {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    acc += at(y + dy, x + dx);
                }
            }
            out[(y * s + x) as usize] = acc / norm;
        }
    }
    out
}

/// Renders one image. Fails if any joint falls outside the frame.
pub fn render(pose: &PoseParams, app: &AppearanceParams) -> Result<Rendered> {
    let joints = joints(pose);
    if !joints_in_frame(&joints, 0.0) {
        return Err(Error::Dataset("pose places a joint outside the 64x64 frame".into()));
    }
    let caps = hand_capsules(pose, app.thickness);
    let noise = value_noise(app.background_seed);
    let (ls, lc) = app.light_angle.sin_cos();
    let diag = (IMAGE_SIZE - 1) as f64 * SQRT_2;
    let mut img = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for v in 0..IMAGE_SIZE {
        for u in 0..IMAGE_SIZE {
            let i = v * IMAGE_SIZE + u;
            let p = [u as f64, v as f64];
            let mask = caps.iter().map(|c| c.coverage(p)).fold(0.0, f64::max);
            let bg = app.background_mean + app.background_contrast * (noise[i] - 0.5);
            let base = mask * app.albedo + (1.0 - mask) * bg;
            let shade = 1.0 + app.light_contrast * ((u as f64 * lc + v as f64 * ls) / diag - 0.5);
            img[i] = (base * shade).clamp(0.0, 1.0);
        }
    }
    let img = box_blur(&img, app.blur as usize);
    Ok(Rendered { image: img.into_iter().map(|v| v as f32).collect(), joints })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatmapSpec {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        Self { k: K, height: IMAGE_SIZE, width: IMAGE_SIZE, sigma: SIGMA }
    }
}

/// One unit-peak Gaussian per joint, `k x height x width` row-major.
pub fn render_heatmaps(joints: &[[f64; 2]], spec: &HeatmapSpec) -> Vec<f32> {
    let plane = spec.height * spec.width;
    let mut out = vec![0.0f32; joints.len() * plane];
    let inv = 1.0 / (2.0 * spec.sigma * spec.sigma);
    // the Gaussian factorizes into a row profile times a column profile
    for (k, &[x, y]) in joints.iter().enumerate() {
        let gx: Vec<f64> = (0..spec.width).map(|u| (-(u as f64 - x).powi(2) * inv).exp()).collect();
        let ch = &mut out[k * plane..(k + 1) * plane];
        for v in 0..spec.height {
            let gy = (-(v as f64 - y).powi(2) * inv).exp();
            for (c, g) in ch[v * spec.width..(v + 1) * spec.width].iter_mut().zip(&gx) {
                *c = (gy * g) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::pose::sample_pose;

    #[test]
    fn heatmap_peak_and_neighbour() {
        let h = render_heatmaps(&[[32.0, 32.0]], &HeatmapSpec { k: 1, sigma: 2.0, ..Default::default() });
        assert_eq!(h[32 * 64 + 32], 1.0);
        assert!((h[32 * 64 + 33] as f64 - (-1.0f64 / 8.0).exp()).abs() < 1e-7);
    }

    #[test]
    fn capsule_coverage_is_antialiased() {
        let c = Capsule { a: [0.0, 0.0], b: [10.0, 0.0], radius: 2.0 };
        assert_eq!(c.coverage([5.0, 0.0]), 1.0);
        assert_eq!(c.coverage([5.0, 2.5]), 0.0);
        assert!((c.coverage([5.0, 2.25]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn render_rejects_out_of_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pose = sample_pose(&mut rng);
        pose.root = [-20.0, 30.0];
        let app = sample_appearance(&mut rng);
        assert!(render(&pose, &app).is_err());
    }
}
