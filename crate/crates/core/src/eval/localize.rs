use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of a map's maximum below which pixels are ignored.
pub const THRESHOLD: f64 = 0.2;

/// Coordinates reported for a joint whose heatmap carries no signal.
pub const SENTINEL: [f64; 2] = [-1.0, -1.0];

/// Per-joint coordinates for `n` images of `k` joints, row-major `[n][k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localized {
    pub k: usize,
    pub coords: Vec<[f64; 2]>,
    /// False where the heatmap was all zero and `coords` holds [`SENTINEL`].
    pub valid: Vec<bool>,
}

impl Localized {
    pub fn n(&self) -> usize {
        self.coords.len() / self.k.max(1)
    }

    pub fn sample(&self, i: usize) -> &[[f64; 2]] {
        &self.coords[i * self.k..(i + 1) * self.k]
    }
}

/// Centroid of one `h x w` map: negative values are clamped to zero, pixels
/// under `THRESHOLD * max` are dropped and the rest weighted by intensity.
///
/// A blob cut off by the frame edge pulls a plain centroid inward, so the
/// centroid is recomputed inside the largest window centred on the current
/// estimate that fits in the frame until it stops moving. For a blob clear
/// of the edges the window contains it and the result is the plain centroid.
pub fn localize_map(map: &[f32], h: usize, w: usize) -> Option<[f64; 2]> {
    let max = map.iter().fold(0.0f64, |m, &v| m.max(v as f64));
    if max <= 0.0 {
        return None;
    }
    let thr = THRESHOLD * max;
    let full = [(-0.5, w as f64 - 0.5), (-0.5, h as f64 - 0.5)];
    let mut c = centroid(map, h, w, thr, full)?;
    for _ in 0..50 {
        let win = [window(c[0], w), window(c[1], h)];
        let Some(next) = centroid(map, h, w, thr, win) else { break };
        let moved = (next[0] - c[0]).abs().max((next[1] - c[1]).abs());
        c = next;
        if moved < 1e-9 {
            break;
        }
    }
    Some(c)
}

/// Widest interval centred on `x` inside `[-0.5, n - 0.5]`.
fn window(x: f64, n: usize) -> (f64, f64) {
    let half = (x + 0.5).min(n as f64 - 0.5 - x).max(0.5);
    (x - half, x + half)
}

/// Length of pixel `i`'s extent `[i - 0.5, i + 0.5]` inside `win`.
fn coverage(i: usize, win: (f64, f64)) -> f64 {
    let (lo, hi) = (i as f64 - 0.5, i as f64 + 0.5);
    (hi.min(win.1) - lo.max(win.0)).max(0.0)
}

fn centroid(map: &[f32], h: usize, w: usize, thr: f64, win: [(f64, f64); 2]) -> Option<[f64; 2]> {
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for r in 0..h {
        let oy = coverage(r, win[1]);
        if oy == 0.0 {
            continue;
        }
        for c in 0..w {
            let v = map[r * w + c] as f64;
            if v >= thr {
                let wt = v * oy * coverage(c, win[0]);
                sw += wt;
                sx += wt * c as f64;
                sy += wt * r as f64;
            }
        }
    }
    (sw > 0.0).then(|| [sx / sw, sy / sw])
}

/// Joint coordinates from heatmaps of shape `[n, k, h, w]` (`data` row-major).
pub fn localize(shape: &[usize], data: &[f32]) -> Result<Localized> {
    let &[n, k, h, w] = shape else {
        return Err(Error::InvalidArgument(format!("localize: expected [n, k, h, w] heatmaps, got {shape:?}")));
    };
    if data.len() != n * k * h * w {
        return Err(Error::InvalidArgument(format!("localize: {} values for shape {shape:?}", data.len())));
    }
    let plane = h * w;
    let mut coords = Vec::with_capacity(n * k);
    let mut valid = Vec::with_capacity(n * k);
    for map in data.chunks_exact(plane) {
        match localize_map(map, h, w) {
            Some(c) => {
                coords.push(c);
                valid.push(true);
            }
            None => {
                coords.push(SENTINEL);
                valid.push(false);
            }
        }
    }
    Ok(Localized { k, coords, valid })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub per_joint_pred: Vec<[f64; 2]>,
    /// Euclidean distance of every predicted joint, in pixels.
    pub per_joint_err: Vec<f64>,
    pub mean_px: f64,
    pub mean_sq_px: f64,
}

/// Per-joint Euclidean error plus its mean and mean square.
pub fn pose_error(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<LocalizationResult> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "pose_error: {} predicted joints against {} ground-truth joints",
            pred.len(),
            gt.len()
        )));
    }
    let err: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1])).collect();
    let n = err.len() as f64;
    Ok(LocalizationResult {
        mean_px: err.iter().sum::<f64>() / n,
        mean_sq_px: err.iter().map(|e| e * e).sum::<f64>() / n,
        per_joint_pred: pred.to_vec(),
        per_joint_err: err,
    })
}
