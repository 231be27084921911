use std::fs;

use handsplit::synth::{
    generate, generate_dataset, joints, load_dataset, render, render_heatmaps, sample_appearance, sample_pose,
    AppearanceParams, HeatmapSpec, PoseParams, FINGER_GEOMETRY, IMAGE_SIZE, K,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn translate(x: f64, y: f64) -> Mat3 {
    [[1.0, 0.0, x], [0.0, 1.0, y], [0.0, 0.0, 1.0]]
}

fn rotate(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn scale(k: f64) -> Mat3 {
    [[k, 0.0, 0.0], [0.0, k, 0.0], [0.0, 0.0, 1.0]]
}

fn origin(m: &Mat3) -> [f64; 2] {
    [m[0][2], m[1][2]]
}

/// Kinematic chain as a product of homogeneous transforms. A finger frame's
/// local -y axis points along the bone; a positive bend is a clockwise turn
/// on screen (image y grows downward), i.e. `rotate(+angle)`.
fn chain_oracle(p: &PoseParams) -> Vec<[f64; 2]> {
    let world = matmul(&matmul(&translate(p.root[0], p.root[1]), &rotate(p.rotation)), &scale(p.palm_scale));
    let mut out = vec![origin(&world)];
    for (f, g) in FINGER_GEOMETRY.iter().enumerate() {
        let fan = p.spread * (f as f64 - 2.0);
        let base = matmul(&world, &translate(g.base[0], g.base[1]));
        let seg1 = matmul(&base, &rotate(g.rest_angle + fan + p.bends[f][0]));
        let mid = matmul(&seg1, &translate(0.0, -g.lengths[0]));
        let seg2 = matmul(&mid, &rotate(p.bends[f][1]));
        let tip = matmul(&seg2, &translate(0.0, -g.lengths[1]));
        out.extend([origin(&base), origin(&mid), origin(&tip)]);
    }
    out
}

#[test]
fn forward_kinematics_matches_transform_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let pose = sample_pose(&mut rng);
        let j = joints(&pose);
        let oracle = chain_oracle(&pose);
        for (a, b) in j.iter().zip(&oracle) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6, "{a:?} vs {b:?}");
        }
        let app = sample_appearance(&mut rng);
        assert_eq!(render(&pose, &app).unwrap().joints, j);
    }
}

#[test]
fn thousand_poses_stay_in_frame() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let j = joints(&sample_pose(&mut rng));
        assert_eq!(j.len(), K);
        assert!(j.iter().all(|&[x, y]| (0.0..=63.0).contains(&x) && (0.0..=63.0).contains(&y)));
    }
}

#[test]
fn sampling_is_seeded() {
    let a = sample_pose(&mut ChaCha8Rng::seed_from_u64(1));
    let b = sample_pose(&mut ChaCha8Rng::seed_from_u64(1));
    let c = sample_pose(&mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let x = sample_appearance(&mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(x, sample_appearance(&mut ChaCha8Rng::seed_from_u64(1)));
}

#[test]
fn appearance_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..2000 {
        let a = sample_appearance(&mut rng);
        assert!((0.0..=0.8).contains(&a.light_contrast));
        assert!((0.2..=0.95).contains(&a.albedo));
        assert!((0.0..=1.0).contains(&a.background_mean) && (0.0..=1.0).contains(&a.background_contrast));
        assert!(a.blur <= 2);
    }
}

fn flat_appearance() -> AppearanceParams {
    AppearanceParams {
        background_seed: 3,
        background_mean: 0.2,
        background_contrast: 0.0,
        light_angle: 1.0,
        light_contrast: 0.0,
        albedo: 0.7,
        thickness: 2.0,
        blur: 0,
    }
}

#[test]
fn flat_lighting_gives_two_levels() {
    let pose = sample_pose(&mut ChaCha8Rng::seed_from_u64(4));
    let img = render(&pose, &flat_appearance()).unwrap().image;
    // far corner is background; the wrist is deep inside the arm/palm
    assert!((img[0] - 0.2).abs() < 1e-6);
    let [wx, wy] = joints(&pose)[0];
    assert!((img[wy.round() as usize * IMAGE_SIZE + wx.round() as usize] - 0.7).abs() < 1e-6);
    let levels = img.iter().filter(|&&v| (v - 0.2).abs() > 1e-6 && (v - 0.7).abs() > 1e-6).count();
    // only anti-aliased edge pixels take other values
    assert!(levels < 400, "{levels}");
}

#[test]
fn rendering_is_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (p, a) = (sample_pose(&mut rng), sample_appearance(&mut rng));
    let x = render(&p, &a).unwrap().image;
    let y = render(&p, &a).unwrap().image;
    assert!(x.iter().zip(&y).all(|(u, v)| u.to_bits() == v.to_bits()));
    assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn heatmap_closed_forms() {
    let spec = HeatmapSpec { k: 2, sigma: 2.0, ..Default::default() };
    let h = render_heatmaps(&[[32.0, 32.0], [10.0, 50.0]], &spec);
    let plane = 64 * 64;
    assert_eq!(h[32 * 64 + 32], 1.0);
    assert!((h[32 * 64 + 33] - 0.8825).abs() < 1e-4);
    assert_eq!(h[plane + 50 * 64 + 10], 1.0);
    // channel 0 carries nothing of joint 1
    assert!(h[50 * 64 + 10] < 1e-30);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn heatmap_peak_at_rounded_joint(x in 3.0f64..60.0, y in 3.0f64..60.0) {
        let h = render_heatmaps(&[[x, y]], &HeatmapSpec { k: 1, sigma: 2.0, ..Default::default() });
        let v = h[y.round() as usize * 64 + x.round() as usize] as f64;
        // rounding moves each axis by at most 0.5, so d^2 <= 0.5
        prop_assert!(v >= (-0.5f64 / 8.0).exp() - 1e-6);
    }

    #[test]
    fn appearance_swap_keeps_joints(s1 in any::<u64>(), s2 in any::<u64>()) {
        let pose = sample_pose(&mut ChaCha8Rng::seed_from_u64(s1));
        let a = sample_appearance(&mut ChaCha8Rng::seed_from_u64(s1));
        let b = sample_appearance(&mut ChaCha8Rng::seed_from_u64(s2));
        prop_assert_eq!(render(&pose, &a).unwrap().joints, render(&pose, &b).unwrap().joints);
    }
}

#[test]
fn dataset_layout_and_regeneration() {
    let dir = tempfile::tempdir().unwrap();
    let d1 = dir.path().join("one");
    let d2 = dir.path().join("two");
    let ds = generate_dataset(100, 7, false, &d1).unwrap();
    generate_dataset(100, 7, false, &d2).unwrap();
    assert_eq!(ds.len(), 100);
    let pgms = fs::read_dir(&d1).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "pgm").count();
    assert_eq!(pgms, 100);
    for entry in fs::read_dir(&d1).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(d1.join(&name)).unwrap(), fs::read(d2.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn paired_records_share_joints_not_pixels() {
    let ds = generate(100, 3, true).unwrap();
    assert_eq!(ds.len(), 200);
    let ids: std::collections::BTreeSet<_> = ds.records().iter().map(|r| r.pair_id.unwrap()).collect();
    assert_eq!(ids.len(), 100);
    for i in 0..100 {
        let (a, b) = (ds.record(2 * i), ds.record(2 * i + 1));
        assert_eq!(a.pair_id, b.pair_id);
        assert_eq!(a.joints, b.joints);
        assert_eq!(a.pose, b.pose);
        assert!(ds.image(2 * i) != ds.image(2 * i + 1));
    }
}

#[test]
fn write_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(10, 11, false, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn missing_image_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(4, 1, false, dir.path()).unwrap();
    let victim = &ds.record(2).image;
    fs::remove_file(dir.path().join(victim)).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains(victim.as_str()), "{err}");
}

#[test]
fn inconsistent_joint_count_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(3, 1, false, dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    m["records"][1]["joints"].as_array_mut().unwrap().pop();
    fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("000001.pgm") && err.contains("15 joints"), "{err}");
}
