//! Joint localization and error, feature probes, swap fidelity, mixing
//! grids, retrieval and the ablation table.

mod ablation;
mod localize;
mod probe;
mod retrieve;

use handsplit_tape::{BindMode, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{NetworkSet, Subnet};
use crate::synth::Dataset;
use crate::train::mix_images;

pub use ablation::{run_ablation, AblationRow, AblationRun, AblationTable};
pub use localize::{localize, localize_map, pose_error, LocalizationResult, Localized, SENTINEL, THRESHOLD};
pub use probe::{
    appearance_targets, joint_targets, probe_report, ridge_probe, DisentanglementReport, ProbeScore,
    MIN_PROBE_RECORDS, RIDGE_LAMBDA,
};
pub use retrieve::{retrieve, Neighbor, Space};

/// Images per forward pass during evaluation.
const CHUNK: usize = 32;

fn encoder_tape(nets: &NetworkSet<f32>, extra: &[Subnet]) -> (Tape<f32>, crate::nets::Bindings) {
    let mut tape = Tape::new();
    let mut modes = vec![
        (Subnet::Stem, BindMode::Frozen),
        (Subnet::PoseHead, BindMode::Frozen),
        (Subnet::AppearanceHead, BindMode::Frozen),
    ];
    modes.extend(extra.iter().map(|&n| (n, BindMode::Frozen)));
    let b = nets.bind(&mut tape, &modes);
    (tape, b)
}

/// Pose and appearance features of `[n, 1, s, s]` images.
pub fn encode_images(nets: &NetworkSet<f32>, images: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (mut tape, b) = encoder_tape(nets, &[]);
    let x = tape.constant(images.clone());
    let (p, a) = nets.encode(&mut tape, &b, x)?;
    Ok((tape.value(p).clone(), tape.value(a).clone()))
}

/// Heatmaps predicted for `[n, 1, s, s]` images.
pub fn predict_heatmaps(nets: &NetworkSet<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (mut tape, b) = encoder_tape(nets, &[Subnet::PoseDecoder]);
    let x = tape.constant(images.clone());
    let (p, _) = nets.encode(&mut tape, &b, x)?;
    let h = nets.decode_pose(&mut tape, &b, p)?;
    Ok(tape.value(h).clone())
}

/// Localized joints for `[n, 1, s, s]` images.
pub fn predict_joints(nets: &NetworkSet<f32>, images: &Tensor<f32>) -> Result<Localized> {
    let h = predict_heatmaps(nets, images)?;
    localize(h.shape(), h.data())
}

fn flatten_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    let row = t.numel() / n.max(1);
    t.data().chunks_exact(row).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Flattened features of the records at `idx`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Features {
    pub pose: Vec<Vec<f64>>,
    pub appearance: Vec<Vec<f64>>,
}

impl Features {
    pub fn space(&self, space: Space) -> &[Vec<f64>] {
        match space {
            Space::Pose => &self.pose,
            Space::Appearance => &self.appearance,
        }
    }
}

pub fn dataset_features(nets: &NetworkSet<f32>, ds: &Dataset, idx: &[usize]) -> Result<Features> {
    let mut f = Features::default();
    for chunk in idx.chunks(CHUNK) {
        let (p, a) = encode_images(nets, &ds.image_batch(chunk))?;
        f.pose.extend(flatten_rows(&p));
        f.appearance.extend(flatten_rows(&a));
    }
    Ok(f)
}

/// Predicted joints of every record of `ds`, in record order.
pub fn dataset_joints(nets: &NetworkSet<f32>, ds: &Dataset) -> Result<Localized> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Localized { k: nets.arch.k, coords: Vec::new(), valid: Vec::new() };
    for chunk in idx.chunks(CHUNK) {
        let l = predict_joints(nets, &ds.image_batch(chunk))?;
        out.coords.extend(l.coords);
        out.valid.extend(l.valid);
    }
    Ok(out)
}

/// Mean joint error of the network over every record of `ds`.
pub fn evaluate_pose(nets: &NetworkSet<f32>, ds: &Dataset) -> Result<LocalizationResult> {
    if ds.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let pred = dataset_joints(nets, ds)?;
    let gt: Vec<[f64; 2]> = ds.records().iter().flat_map(|r| r.joints.iter().copied()).collect();
    pose_error(&pred.coords, &gt)
}

fn mean_joint_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).sum::<f64>() / a.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapFidelity {
    pub fraction: f64,
    pub successes: usize,
    pub pairs: usize,
}

/// Fraction of mixed images whose decoded pose is strictly closer (mean
/// joint distance) to the pose source than to the appearance source.
/// Draws with `x == y` are redrawn.
pub fn swap_fidelity<R: Rng + ?Sized>(nets: &NetworkSet<f32>, ds: &Dataset, n_pairs: usize, rng: &mut R) -> Result<SwapFidelity> {
    if ds.len() < 2 {
        return Err(Error::Dataset("swap fidelity needs at least two records".into()));
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    while pairs.len() < n_pairs {
        let (x, y) = (rng.gen_range(0..ds.len()), rng.gen_range(0..ds.len()));
        if x != y {
            pairs.push((x, y));
        }
    }
    let mut successes = 0;
    for chunk in pairs.chunks(CHUNK) {
        let xs: Vec<usize> = chunk.iter().map(|p| p.0).collect();
        let ys: Vec<usize> = chunk.iter().map(|p| p.1).collect();
        let mixed = mix_images(nets, &ds.image_batch(&xs), &ds.image_batch(&ys))?;
        let found = predict_joints(nets, &mixed)?;
        for (i, &(x, y)) in chunk.iter().enumerate() {
            let j = found.sample(i);
            if mean_joint_distance(j, &ds.record(x).joints) < mean_joint_distance(j, &ds.record(y).joints) {
                successes += 1;
            }
        }
    }
    Ok(SwapFidelity { fraction: successes as f64 / n_pairs.max(1) as f64, successes, pairs: n_pairs })
}

/// Mean L1 between each pair member and its reconstruction from the
/// sibling's pose feature and its own appearance feature.
pub fn paired_swap_l1(nets: &NetworkSet<f32>, ds: &Dataset) -> Result<f64> {
    let groups = crate::train::pair_groups(ds)?;
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in groups.chunks(CHUNK) {
        let s: Vec<usize> = chunk.iter().map(|g| g.0).collect();
        let t: Vec<usize> = chunk.iter().map(|g| g.1).collect();
        for (pose_of, own) in [(&t, &s), (&s, &t)] {
            let target = ds.image_batch(own);
            let out = mix_images(nets, &ds.image_batch(pose_of), &target)?;
            total += out.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
            count += target.numel();
        }
    }
    Ok(total / count.max(1) as f64)
}

/// A montage: pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Montage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

/// Width of the white rule between montage cells.
pub const SEPARATOR: usize = 2;

/// Top row: pose sources; left column: appearance sources; cell (r, c):
/// pose of pose source c with appearance of appearance source r.
pub fn mix_grid(nets: &NetworkSet<f32>, pose_images: &[Vec<f32>], app_images: &[Vec<f32>]) -> Result<Montage> {
    let s = nets.arch.image_size;
    let (rows, cols) = (app_images.len(), pose_images.len());
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("mix grid needs at least one pose and one appearance image".into()));
    }
    if let Some(bad) = pose_images.iter().chain(app_images).find(|i| i.len() != s * s) {
        return Err(Error::InvalidArgument(format!("mix grid images must be {s}x{s}, got {} pixels", bad.len())));
    }
    let stack = |imgs: Vec<&Vec<f32>>| {
        let n = imgs.len();
        Tensor::new(&[n, 1, s, s], imgs.into_iter().flatten().copied().collect()).expect("sizes checked")
    };
    let pose_src = stack((0..rows).flat_map(|_| pose_images.iter()).collect());
    let app_src = stack(app_images.iter().flat_map(|a| std::iter::repeat(a).take(cols)).collect());
    let cells = mix_images(nets, &pose_src, &app_src)?;

    let side = |n: usize| (n + 1) * s + n * SEPARATOR;
    let (width, height) = (side(cols), side(rows));
    let mut pixels = vec![1.0f32; width * height];
    let mut blit = |r: usize, c: usize, img: &[f32]| {
        let (oy, ox) = (r * (s + SEPARATOR), c * (s + SEPARATOR));
        for y in 0..s {
            pixels[(oy + y) * width + ox..(oy + y) * width + ox + s].copy_from_slice(&img[y * s..(y + 1) * s]);
        }
    };
    blit(0, 0, &vec![0.0; s * s]);
    for (c, img) in pose_images.iter().enumerate() {
        blit(0, c + 1, img);
    }
    for (r, img) in app_images.iter().enumerate() {
        blit(r + 1, 0, img);
        for c in 0..cols {
            let i = r * cols + c;
            blit(r + 1, c + 1, &cells.data()[i * s * s..(i + 1) * s * s]);
        }
    }
    Ok(Montage { width, height, pixels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStudy {
    pub queries: usize,
    pub k: usize,
    /// Median over queries of the mean ground-truth joint distance between
    /// the query and its `k` nearest neighbors.
    pub median_neighbor_distance: f64,
    /// The same statistic for `k` records drawn at random.
    pub median_random_distance: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Compares neighbors in a feature space against random records by their
/// ground-truth pose; each query is excluded from its own neighbors.
pub fn retrieval_study<R: Rng + ?Sized>(
    features: &[Vec<f64>],
    ds: &Dataset,
    queries: usize,
    k: usize,
    rng: &mut R,
) -> Result<RetrievalStudy> {
    if features.len() != ds.len() || ds.len() <= k + 1 {
        return Err(Error::InvalidArgument(format!(
            "retrieval study needs one feature per record and more than {} records",
            k + 1
        )));
    }
    let (mut near, mut random) = (Vec::new(), Vec::new());
    for _ in 0..queries {
        let q = rng.gen_range(0..ds.len());
        let gt = &ds.record(q).joints;
        let hits = retrieve(features, &features[q], k + 1)?;
        let d: Vec<f64> = hits
            .iter()
            .filter(|h| h.index != q)
            .take(k)
            .map(|h| mean_joint_distance(gt, &ds.record(h.index).joints))
            .collect();
        near.push(d.iter().sum::<f64>() / d.len() as f64);
        let others = rand::seq::index::sample(rng, ds.len() - 1, k).into_vec();
        let r: f64 = others
            .iter()
            .map(|&i| if i >= q { i + 1 } else { i })
            .map(|i| mean_joint_distance(gt, &ds.record(i).joints))
            .sum();
        random.push(r / k as f64);
    }
    Ok(RetrievalStudy {
        queries,
        k,
        median_neighbor_distance: median(near),
        median_random_distance: median(random),
    })
}

/// Everything `eval` reports for one checkpoint on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub mean_px: f64,
    pub mean_sq_px: f64,
    pub invalid_joints: usize,
    pub swap_fidelity: SwapFidelity,
    pub probes: Option<DisentanglementReport>,
    pub retrieval: Option<RetrievalStudy>,
}

/// Pose error, swap fidelity over `pairs` pairs, probes (when the set is
/// large enough) and a 50-query pose-space retrieval study.
pub fn full_report<R: Rng + ?Sized>(nets: &NetworkSet<f32>, ds: &Dataset, pairs: usize, rng: &mut R) -> Result<EvalReport> {
    let pred = dataset_joints(nets, ds)?;
    let gt: Vec<[f64; 2]> = ds.records().iter().flat_map(|r| r.joints.iter().copied()).collect();
    let err = pose_error(&pred.coords, &gt)?;
    let swap = swap_fidelity(nets, ds, pairs, rng)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let feats = dataset_features(nets, ds, &idx)?;
    let records: Vec<_> = ds.records().iter().collect();
    let probes = if ds.len() >= MIN_PROBE_RECORDS {
        let mut r = probe_report(&feats.pose, &feats.appearance, &records)?;
        r.swap_fidelity = Some(swap.fraction);
        Some(r)
    } else {
        None
    };
    let retrieval = if ds.len() > 11 { Some(retrieval_study(&feats.pose, ds, 50, 10, rng)?) } else { None };
    Ok(EvalReport {
        records: ds.len(),
        mean_px: err.mean_px,
        mean_sq_px: err.mean_sq_px,
        invalid_joints: pred.valid.iter().filter(|v| !**v).count(),
        swap_fidelity: swap,
        probes,
        retrieval,
    })
}
