use std::collections::BTreeSet;

use handsplit::losses::Term;
use handsplit::nets::{load_checkpoint, ArchConfig, Subnet};
use handsplit::synth::{generate, Dataset};
use handsplit::train::{epoch_pairs, pair_groups, sample_pairs, train, Mode, PairBatch, RunLayout, TrainConfig, Trainer};
use handsplit::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_arch() -> ArchConfig {
    ArchConfig { base_channels: 2, pose_channels: 4, appearance_channels: 4, ..Default::default() }
}

fn cfg(mode: Mode) -> TrainConfig {
    TrainConfig { mode, batch_size: 2, epochs: 1, arch: small_arch(), ..Default::default() }
}

fn data(n: usize, paired: bool) -> Dataset {
    generate(n, 11, paired).unwrap()
}

fn batch() -> PairBatch {
    PairBatch { x: vec![0, 1], y: vec![2, 3] }
}

#[test]
fn empty_config_is_the_default() {
    assert_eq!(TrainConfig::from_json("{}").unwrap(), TrainConfig::default());
}

#[test]
fn config_errors_name_the_key() {
    let err = TrainConfig::from_json(r#"{"lr": "fast"}"#).unwrap_err().to_string();
    assert!(err.contains("`lr`"), "{err}");
    let err = TrainConfig::from_json(r#"{"weights": {"recon": -1}}"#).unwrap_err().to_string();
    assert!(err.contains("recon"), "{err}");
    let err = TrainConfig::from_json(r#"{"learning_rate": 0.1}"#).unwrap_err().to_string();
    assert!(err.contains("learning_rate"), "{err}");
    let err = TrainConfig::from_json(r#"{"batch_size": 0}"#).unwrap_err().to_string();
    assert!(err.contains("batch_size"), "{err}");
}

#[test]
fn config_round_trips() {
    let c = TrainConfig { mode: Mode::PairedSupervised, lr: 3e-4, gan_on_mixed: false, seed: 5, ..cfg(Mode::PoseRecon) };
    assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
}

#[test]
fn sampled_pairs_are_distinct() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = sample_pairs(64, &mut rng, 4).unwrap();
    let all: BTreeSet<_> = b.x.iter().chain(&b.y).collect();
    assert_eq!(all.len(), 8);
    assert!(sample_pairs(7, &mut rng, 4).is_err());
    let again = sample_pairs(64, &mut ChaCha8Rng::seed_from_u64(0), 4).unwrap();
    assert_eq!(b, again);
}

#[test]
fn epoch_of_64_records_in_batches_of_8() {
    let batches = epoch_pairs(64, &mut ChaCha8Rng::seed_from_u64(1), 8).unwrap();
    assert_eq!(batches.len(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn epoch_visits_each_record_at_most_once(len in 2usize..200, b in 1usize..8, seed in any::<u64>()) {
        prop_assume!(len >= 2 * b);
        let batches = epoch_pairs(len, &mut ChaCha8Rng::seed_from_u64(seed), b).unwrap();
        prop_assert_eq!(batches.len(), len / (2 * b));
        let mut seen = vec![0u32; len];
        for p in &batches {
            prop_assert_eq!(p.x.len(), b);
            prop_assert_eq!(p.y.len(), b);
            for &i in p.x.iter().chain(&p.y) {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c <= 1));
        prop_assert_eq!(seen.iter().sum::<u32>() as usize, 2 * b * batches.len());
    }
}

#[test]
fn sibling_groups_come_from_pair_ids() {
    let ds = data(8, true);
    let groups = pair_groups(&ds).unwrap();
    assert_eq!(groups.len() * 2, ds.len());
    for (a, b) in groups {
        assert_eq!(ds.record(a).pair_id, ds.record(b).pair_id);
        assert_eq!(ds.record(a).joints, ds.record(b).joints);
        assert_ne!(a, b);
    }
    let err = pair_groups(&data(4, false)).unwrap_err().to_string();
    assert!(err.contains("pair_id"), "{err}");
}

fn all_zero(grads: &Option<Vec<Option<handsplit_tape::Tensor<f32>>>>) -> bool {
    grads.as_ref().unwrap().iter().flatten().all(|g| g.data().iter().all(|v| *v == 0.0))
}

#[test]
fn image_terms_leave_the_pose_head_alone() {
    let ds = data(4, false);
    for mode in [Mode::PoseRecon, Mode::SelfDisentangle] {
        let t = Trainer::new(cfg(mode)).unwrap();
        let g = t.term_gradients(&ds, &batch(), &[Term::Recon, Term::GanG]).unwrap();
        assert!(all_zero(&g[Subnet::PoseHead as usize]), "{mode:?}");
        assert!(!all_zero(&g[Subnet::AppearanceHead as usize]), "{mode:?}");
        assert!(!all_zero(&g[Subnet::ImageDecoder as usize]), "{mode:?}");
    }
    let t = Trainer::new(cfg(Mode::SelfDisentangle)).unwrap();
    let g = t.term_gradients(&ds, &batch(), &[Term::Recon, Term::GanG, Term::CycleImg]).unwrap();
    assert!(all_zero(&g[Subnet::PoseHead as usize]));
    let g = t.term_gradients(&ds, &batch(), &[Term::Pose]).unwrap();
    assert!(!all_zero(&g[Subnet::PoseHead as usize]));
}

#[test]
fn without_the_detach_recon_reaches_the_pose_head() {
    let ds = data(4, false);
    let t = Trainer::new(TrainConfig { detach_pose_into_image_decoder: false, ..cfg(Mode::PoseRecon) }).unwrap();
    let g = t.term_gradients(&ds, &batch(), &[Term::Recon]).unwrap();
    assert!(!all_zero(&g[Subnet::PoseHead as usize]));
}

#[test]
fn frozen_evaluators_stay_put_during_a_step() {
    let ds = data(4, false);
    let mut t = Trainer::new(cfg(Mode::SelfDisentangle)).unwrap();
    // take the step-0 refresh out of the picture
    t.step = 1;
    t.cfg.frozen_refresh_interval = 1000;
    let frozen = t.frozen.clone();
    let before = t.nets.clone();
    t.step(&ds, &batch()).unwrap();
    assert_eq!(t.frozen, frozen);
    for net in [Subnet::Stem, Subnet::PoseHead, Subnet::AppearanceHead, Subnet::PoseDecoder, Subnet::ImageDecoder] {
        assert!(!t.nets.store(net).bit_eq(before.store(net)), "{net:?} did not move");
    }
}

#[test]
fn frozen_copies_refresh_on_schedule() {
    let ds = data(8, false);
    let mut t = Trainer::new(TrainConfig { frozen_refresh_interval: 2, ..cfg(Mode::SelfDisentangle) }).unwrap();
    t.step(&ds, &batch()).unwrap();
    let after_first = t.frozen.clone();
    assert!(!after_first.matches(&t.nets));
    t.step(&ds, &batch()).unwrap();
    assert_eq!(t.frozen, after_first);
    let before_third = t.nets.clone();
    t.step(&ds, &batch()).unwrap();
    assert!(t.frozen.matches(&before_third));
}

fn moved(mode: Mode) -> BTreeSet<Subnet> {
    let ds = data(4, mode == Mode::PairedSupervised);
    let mut t = Trainer::new(cfg(mode)).unwrap();
    let before = t.nets.clone();
    let b = if mode == Mode::PairedSupervised {
        let g = pair_groups(&ds).unwrap();
        PairBatch { x: vec![g[0].0, g[1].0], y: vec![g[0].1, g[1].1] }
    } else {
        batch()
    };
    let m = t.step(&ds, &b).unwrap();
    let set: BTreeSet<_> = Subnet::ALL.into_iter().filter(|n| !t.nets.store(*n).bit_eq(before.store(*n))).collect();
    let named: BTreeSet<_> = m.grad_norms.keys().cloned().collect();
    assert_eq!(named, set.iter().map(|n| n.name().to_string()).collect());
    set
}

#[test]
fn modes_update_nested_sets() {
    use Subnet::*;
    let pose_only = moved(Mode::PoseOnly);
    assert_eq!(pose_only, BTreeSet::from([Stem, PoseHead, PoseDecoder]));
    let all = BTreeSet::from(Subnet::ALL);
    assert_eq!(moved(Mode::PoseRecon), all);
    assert_eq!(moved(Mode::SelfDisentangle), all);
    assert_eq!(moved(Mode::PairedSupervised), all);
}

#[test]
fn step_reports_every_term_of_the_mode() {
    let ds = data(4, false);
    let m = Trainer::new(cfg(Mode::PoseOnly)).unwrap().step(&ds, &batch()).unwrap();
    assert!(m.terms.get(Term::Pose).is_some());
    assert!(m.terms.get(Term::Recon).is_none());
    let m = Trainer::new(cfg(Mode::SelfDisentangle)).unwrap().step(&ds, &batch()).unwrap();
    for t in Term::ALL {
        assert!(m.terms.get(t).is_some(), "{t:?}");
    }
    let line = serde_json::to_string(&m).unwrap();
    assert!(line.contains("\"cycle_pose\""));
    assert!(line.contains("\"grad_norms\""));
}

#[test]
fn non_finite_loss_names_the_term() {
    let ds = data(4, false);
    let mut t = Trainer::new(cfg(Mode::PoseOnly)).unwrap();
    let store = t.nets.store_mut(Subnet::PoseDecoder);
    store.iter_mut().last().unwrap().tensor.data_mut()[0] = f32::NAN;
    let err = t.step(&ds, &batch()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 0, term: "pose" }), "{err}");
}

#[test]
fn mismatched_joint_count_is_named() {
    let ds = data(4, false);
    let mut t = Trainer::new(TrainConfig { arch: ArchConfig { k: 8, ..small_arch() }, ..cfg(Mode::PoseOnly) }).unwrap();
    let err = t.step(&ds, &batch()).unwrap_err().to_string();
    assert!(err.contains("K=16") && err.contains("K=8"), "{err}");
}

#[test]
fn paired_swap_of_identical_members_is_plain_reconstruction() {
    let ds = data(4, true);
    let g = pair_groups(&ds).unwrap();
    let same = PairBatch { x: vec![g[0].0, g[1].0], y: vec![g[0].0, g[1].0] };
    let paired = Trainer::new(cfg(Mode::PairedSupervised)).unwrap().step(&ds, &same).unwrap();
    let plain = Trainer::new(cfg(Mode::PoseRecon)).unwrap().step(&ds, &same).unwrap();
    assert_eq!(paired.terms.get(Term::Recon), plain.terms.get(Term::Recon));
}

#[test]
fn paired_swap_reaches_both_encoders() {
    let ds = data(4, true);
    let g = pair_groups(&ds).unwrap();
    let b = PairBatch { x: vec![g[0].0, g[1].0], y: vec![g[0].1, g[1].1] };
    let t = Trainer::new(cfg(Mode::PairedSupervised)).unwrap();
    let grads = t.term_gradients(&ds, &b, &[Term::Recon]).unwrap();
    for net in [Subnet::PoseHead, Subnet::AppearanceHead, Subnet::Stem] {
        assert!(!all_zero(&grads[net as usize]), "{net:?}");
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let ds = data(8, false);
    let run = || {
        let mut t = Trainer::new(TrainConfig { batch_size: 2, ..cfg(Mode::SelfDisentangle) }).unwrap();
        let mut totals = Vec::new();
        t.run_epoch(&ds, &mut |m| {
            totals.push(m.total.to_bits());
            Ok(())
        })
        .unwrap();
        (t.nets, totals)
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(ta, tb);
    assert!(a.bit_eq(&b));
}

#[test]
fn resume_for_zero_epochs_is_identity() {
    let ds = data(8, false);
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let c = TrainConfig { ..cfg(Mode::SelfDisentangle) };
    let t = train(&c, &ds, &first).unwrap();
    let ck = RunLayout::new(&first).final_checkpoint();

    let second = dir.path().join("second");
    let c0 = TrainConfig { epochs: 0, resume: Some(ck.clone()), ..c.clone() };
    let r = train(&c0, &ds, &second).unwrap();
    assert!(r.nets.bit_eq(&t.nets));
    assert_eq!(r.frozen, t.frozen);
    assert_eq!(r.optimizers, t.optimizers);
    assert_eq!((r.step, r.epoch), (t.step, t.epoch));

    let a = load_checkpoint(&ck).unwrap();
    let b = load_checkpoint(&RunLayout::new(&second).final_checkpoint()).unwrap();
    assert!(a.nets.bit_eq(&b.nets));
    assert_eq!(a.rng, b.rng);
}

#[test]
fn resumed_training_continues_the_run() {
    let ds = data(8, false);
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig { epochs: 2, ..cfg(Mode::PoseRecon) };
    let straight = train(&c, &ds, &dir.path().join("straight")).unwrap();

    let half = train(&TrainConfig { epochs: 1, ..c.clone() }, &ds, &dir.path().join("half")).unwrap();
    assert_eq!(half.epoch, 1);
    let ck = RunLayout::new(&dir.path().join("half")).final_checkpoint();
    let rest = train(&TrainConfig { epochs: 1, resume: Some(ck), ..c }, &ds, &dir.path().join("rest")).unwrap();
    assert!(rest.nets.bit_eq(&straight.nets));
    assert_eq!(rest.step, straight.step);
}

#[test]
fn run_directory_layout() {
    let ds = data(8, false);
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig { ..cfg(Mode::PoseOnly) };
    let t = train(&c, &ds, dir.path()).unwrap();
    let layout = RunLayout::new(dir.path());
    assert_eq!(TrainConfig::load(&layout.config()).unwrap(), c);
    let lines = std::fs::read_to_string(layout.metrics()).unwrap();
    assert_eq!(lines.lines().count() as u64, t.step);
    assert!(layout.epoch_checkpoint(1).join("weights.bin").exists());
    assert!(layout.final_checkpoint().join("weights.bin").exists());
}
