use std::collections::BTreeSet;
use std::fs;

use handsplit::nets::{
    load_checkpoint, micro_arch, network_gradcheck, save_checkpoint, ArchConfig, Checkpoint, NetworkSet, Subnet,
};
use handsplit_tape::{AdamConfig, AdamState, BindMode, GradCheckConfig, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn images(n: usize, seed: u64) -> Tensor<f32> {
    Tensor::uniform(&[n, 1, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn default_shapes() {
    let nets = NetworkSet::<f32>::build(&ArchConfig::default(), 0).unwrap();
    let mut tape = Tape::new();
    let b = nets.bind_all(&mut tape, BindMode::Frozen);
    let x = tape.constant(images(2, 1));
    let h = nets.stem(&mut tape, &b, x).unwrap();
    assert_eq!(tape.shape(h), &[2, 64, 8, 8]);
    let (p, a) = nets.encode(&mut tape, &b, x).unwrap();
    assert_eq!(tape.shape(p), &[2, 64, 4, 4]);
    assert_eq!(tape.shape(a), &[2, 64, 4, 4]);
    let heat = nets.decode_pose(&mut tape, &b, p).unwrap();
    assert_eq!(tape.shape(heat), &[2, 16, 64, 64]);
    let img = nets.decode_image(&mut tape, &b, p, a).unwrap();
    assert_eq!(tape.shape(img), &[2, 1, 64, 64]);
    let score = nets.discriminate(&mut tape, &b, img).unwrap();
    assert_eq!(tape.shape(score), &[2]);
    for v in [heat, img, score] {
        assert!(tape.value(v).data().iter().all(|&x| x > 0.0 && x < 1.0));
    }
}

#[test]
fn wrong_image_size_rejected() {
    let nets = NetworkSet::<f32>::build(&ArchConfig::default(), 0).unwrap();
    let mut tape = Tape::new();
    let b = nets.bind_all(&mut tape, BindMode::Frozen);
    let x = tape.constant(Tensor::zeros(&[1, 1, 32, 32]));
    let err = nets.encode(&mut tape, &b, x).unwrap_err().to_string();
    assert!(err.contains("[1, 1, 32, 32]"), "{err}");
}

#[test]
fn initialization_is_seeded() {
    let arch = ArchConfig::default();
    let a = NetworkSet::<f32>::build(&arch, 3).unwrap();
    assert!(a.bit_eq(&NetworkSet::build(&arch, 3).unwrap()));
    assert!(!a.bit_eq(&NetworkSet::build(&arch, 4).unwrap()));
}

fn conv(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k + c_out
}

/// Parameter count of the default layout, written out layer by layer.
fn default_param_oracle() -> usize {
    let stem = conv(1, 16, 3) + conv(16, 16, 3) + conv(16, 32, 3) + conv(32, 32, 3) + conv(32, 64, 3) + conv(64, 64, 3);
    let head = conv(64, 128, 3) + conv(128, 64, 3);
    let pose_dec = conv(64, 128, 2)
        + conv(128, 128, 3)
        + conv(128, 64, 2)
        + conv(64, 64, 3)
        + conv(64, 32, 2)
        + conv(32, 32, 3)
        + conv(32, 16, 2)
        + conv(16, 16, 3)
        + conv(16, 16, 1);
    let image_dec = conv(128, 128, 3) + conv(128, 64, 3) + conv(64, 32, 3) + conv(32, 16, 3) + conv(16, 1, 1);
    let disc = conv(1, 8, 3) + conv(8, 16, 3) + conv(16, 32, 3) + conv(32, 64, 3) + conv(64, 1, 1);
    stem + 2 * head + pose_dec + image_dec + disc
}

#[test]
fn parameter_count_matches_layout() {
    let nets = NetworkSet::<f32>::build(&ArchConfig::default(), 0).unwrap();
    assert_eq!(nets.num_params(), default_param_oracle());
}

#[test]
fn parameter_names_are_disjoint() {
    let nets = NetworkSet::<f32>::build(&ArchConfig::default(), 0).unwrap();
    let mut seen = BTreeSet::new();
    for net in Subnet::ALL {
        for p in nets.store(net).iter() {
            assert!(p.name.starts_with(net.name()), "{}", p.name);
            assert!(seen.insert(p.name.clone()), "duplicate {}", p.name);
        }
    }
}

#[test]
fn frozen_copies_are_detached_values() {
    let mut nets = NetworkSet::<f32>::build(&micro_arch(), 0).unwrap();
    let mut frozen = nets.clone_frozen();
    assert!(frozen.matches(&nets));
    assert!(frozen.pose.iter().chain(frozen.image.iter()).all(|p| !p.trainable));

    nets.store_mut(Subnet::ImageDecoder).iter_mut().next().unwrap().tensor.data_mut()[0] += 1.0;
    assert!(!frozen.matches(&nets));
    frozen.refresh(&nets).unwrap();
    assert!(frozen.matches(&nets));

    // live bindings of a frozen copy still receive no gradient
    let mut tape = Tape::new();
    let b = nets.bind_all(&mut tape, BindMode::Frozen);
    let img = frozen.image.bind(&mut tape, BindMode::Live);
    let x = tape.leaf(Tensor::uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)), true);
    let (p, a) = nets.encode(&mut tape, &b, x).unwrap();
    let out = nets.decode_image_with(&mut tape, &img, p, a).unwrap();
    let loss = tape.mean(out).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(img.vars().iter().all(|v| g.get(*v).is_none()));
    assert!(g.get(x).unwrap().data().iter().any(|v| *v != 0.0));
}

fn forward(nets: &NetworkSet<f32>, x: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let mut tape = Tape::new();
    let b = nets.bind_all(&mut tape, BindMode::Frozen);
    let xv = tape.constant(x.clone());
    let (p, a) = nets.encode(&mut tape, &b, xv).unwrap();
    let heat = nets.decode_pose(&mut tape, &b, p).unwrap();
    let img = nets.decode_image(&mut tape, &b, p, a).unwrap();
    let s = nets.discriminate(&mut tape, &b, img).unwrap();
    [p, a, heat, img, s].iter().map(|v| tape.value(*v).clone()).collect()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let arch = ArchConfig { base_channels: 4, pose_channels: 8, appearance_channels: 8, ..Default::default() };
    let nets = NetworkSet::<f32>::build(&arch, 9).unwrap();
    let mut ck = Checkpoint::new(nets.clone());
    ck.frozen = Some(nets.clone_frozen());
    let mut opts: Vec<AdamState<f32>> = Subnet::ALL.iter().map(|n| AdamState::new(nets.store(*n), AdamConfig::default())).collect();
    // give the optimizer non-trivial moments
    let mut stepped = nets.clone();
    let grads: Vec<_> = stepped.store(Subnet::Stem).iter().map(|p| Some(p.tensor.map(|v| v * 0.5 + 0.1))).collect();
    opts[0].step(stepped.store_mut(Subnet::Stem), &grads).unwrap();
    ck.optimizers = Some(opts);
    ck.step = 17;
    ck.epoch = 2;
    save_checkpoint(&ck, dir.path()).unwrap();

    let back = load_checkpoint(dir.path()).unwrap();
    assert!(back.nets.bit_eq(&nets));
    assert_eq!(back.frozen, ck.frozen);
    assert_eq!(back.optimizers, ck.optimizers);
    assert_eq!((back.step, back.epoch), (17, 2));

    let x = images(2, 5);
    for (a, b) in forward(&nets, &x).iter().zip(forward(&back.nets, &x)) {
        assert!(a.bit_eq(&b));
    }

    let again = dir.path().join("again");
    save_checkpoint(&back, &again).unwrap();
    assert_eq!(fs::read(dir.path().join("weights.bin")).unwrap(), fs::read(again.join("weights.bin")).unwrap());
}

#[test]
fn architecture_mismatch_names_the_field() {
    let ck = Checkpoint::new(NetworkSet::<f32>::build(&micro_arch(), 0).unwrap());
    let expected = ArchConfig { k: 3, ..micro_arch() };
    let err = ck.check_arch(&expected).unwrap_err().to_string();
    assert!(err.contains("k: checkpoint 2, expected 3"), "{err}");
}

#[test]
fn truncated_weights_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&Checkpoint::new(NetworkSet::<f32>::build(&micro_arch(), 0).unwrap()), dir.path()).unwrap();
    let w = dir.path().join("weights.bin");
    let bytes = fs::read(&w).unwrap();
    fs::write(&w, &bytes[..bytes.len() - 4]).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err().to_string();
    assert!(err.contains("weights.bin"), "{err}");
}

#[test]
fn whole_network_gradients_in_f64() {
    let cfg = GradCheckConfig { eps: 1e-5, max_coords: 24, seed: 0 };
    let report = network_gradcheck::<f64>(cfg).unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
    assert!(report.coords > 100);
}

#[test]
fn discriminator_separates_a_toy_problem() {
    // real: bright left half; fake: bright right half
    let arch = ArchConfig { base_channels: 2, pose_channels: 2, appearance_channels: 2, ..Default::default() };
    let mut nets = NetworkSet::<f32>::build(&arch, 1).unwrap();
    let mut opt = AdamState::new(nets.store(Subnet::Discriminator), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let half = |left: bool, rng: &mut ChaCha8Rng| {
        let noise = Tensor::<f32>::uniform(&[4, 1, 64, 64], 0.0, 0.3, rng);
        Tensor::from_fn(&[4, 1, 64, 64], |i| {
            let col = i % 64;
            noise.data()[i] + if (col < 32) == left { 0.6 } else { 0.0 }
        })
    };
    let score = |nets: &NetworkSet<f32>, x: &Tensor<f32>| {
        let mut tape = Tape::new();
        let b = nets.bind(&mut tape, &[(Subnet::Discriminator, BindMode::Frozen)]);
        let xv = tape.constant(x.clone());
        let s = nets.discriminate(&mut tape, &b, xv).unwrap();
        tape.value(s).data().to_vec()
    };
    for _ in 0..200 {
        let (real, fake) = (half(true, &mut rng), half(false, &mut rng));
        let mut tape = Tape::new();
        let b = nets.bind(&mut tape, &[(Subnet::Discriminator, BindMode::Live)]);
        let (r, f) = (tape.constant(real), tape.constant(fake));
        let sr = nets.discriminate(&mut tape, &b, r).unwrap();
        let sf = nets.discriminate(&mut tape, &b, f).unwrap();
        let loss = handsplit::losses::discriminator_loss(&mut tape, sr, sf).unwrap();
        let mut g = tape.backward(loss).unwrap();
        let grads = nets.store(Subnet::Discriminator).collect_grads(b.get(Subnet::Discriminator).unwrap(), &mut g);
        opt.step(nets.store_mut(Subnet::Discriminator), &grads).unwrap();
    }
    let mut correct = 0;
    for _ in 0..10 {
        correct += score(&nets, &half(true, &mut rng)).iter().filter(|s| **s > 0.5).count();
        correct += score(&nets, &half(false, &mut rng)).iter().filter(|s| **s < 0.5).count();
    }
    assert!(correct as f64 / 80.0 > 0.9, "{correct}/80");
}
