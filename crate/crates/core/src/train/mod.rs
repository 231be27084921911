//! Training steps for every mode, the epoch loop, checkpoints and metrics.

mod config;
mod sampler;
mod step;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use handsplit_tape::{grad_norm, AdamConfig, AdamState, BindMode, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport, Term, Terms};
use crate::nets::{load_checkpoint, save_checkpoint, Checkpoint, FrozenDecoders, NetworkSet, RngState, Subnet};
use crate::synth::Dataset;

pub use config::{Mode, TrainConfig};
pub use sampler::{epoch_pairs, epoch_sibling_pairs, pair_groups, sample_pairs, PairBatch};
pub use step::StepInput;

/// Sampler stream; network initialization uses the plain seed.
const SAMPLER_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    #[serde(flatten)]
    pub terms: Terms,
    pub total: f64,
    /// Gradient norm of each sub-network updated in this step.
    pub grad_norms: BTreeMap<String, f64>,
    pub wall_ms: f64,
}

impl StepMetrics {
    pub fn report(&self) -> LossReport {
        LossReport { step: self.step, terms: self.terms, total: self.total }
    }
}

/// Per-sub-network gradients, `None` for sub-networks not bound live.
pub type SubnetGrads = [Option<Vec<Option<Tensor<f32>>>>; 6];

/// Terms required in a full step of each mode.
fn required_terms(cfg: &TrainConfig) -> Vec<Term> {
    let mut t = vec![Term::Pose];
    if cfg.mode.uses_images() {
        t.push(Term::Recon);
        if step::gan_g_active(cfg) {
            t.push(Term::GanG);
        }
        if step::gan_d_active(cfg) {
            t.push(Term::GanD);
        }
    }
    if cfg.mode == Mode::SelfDisentangle {
        t.extend([Term::CycleImg, Term::DualPose, Term::DualImg, Term::CyclePose]);
    }
    t
}

/// Networks, frozen decoder copies, optimizers and counters of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: NetworkSet<f32>,
    pub frozen: FrozenDecoders<f32>,
    /// One per sub-network, in [`Subnet::ALL`] order.
    pub optimizers: Vec<AdamState<f32>>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let nets = NetworkSet::build(&cfg.arch, cfg.seed)?;
        let adam = AdamConfig { lr: cfg.lr, ..Default::default() };
        let optimizers = Subnet::ALL.iter().map(|n| AdamState::new(nets.store(*n), adam)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(Self { frozen: nets.clone_frozen(), nets, optimizers, rng, step: 0, epoch: 0, cfg })
    }

    /// Continues from a checkpoint under a (possibly different) config. The
    /// architecture must match; the learning rate is taken from `cfg`.
    pub fn resume(cfg: TrainConfig, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        ck.check_arch(&cfg.arch)?;
        let mut t = Self::new(cfg)?;
        t.frozen = ck.frozen.unwrap_or_else(|| ck.nets.clone_frozen());
        if let Some(opts) = ck.optimizers {
            t.optimizers = opts;
            for o in &mut t.optimizers {
                o.config.lr = t.cfg.lr;
            }
        }
        if let Some(r) = &ck.rng {
            t.rng = r.restore()?;
        }
        t.nets = ck.nets;
        t.step = ck.step;
        t.epoch = ck.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            nets: self.nets.clone(),
            frozen: Some(self.frozen.clone()),
            optimizers: Some(self.optimizers.clone()),
            step: self.step,
            epoch: self.epoch,
            rng: Some(RngState::capture(&self.rng)),
            config: serde_json::to_value(&self.cfg).expect("config serializes"),
        }
    }

    fn input(&self, ds: &Dataset, batch: &PairBatch) -> Result<StepInput> {
        if batch.x.len() != batch.y.len() || batch.x.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "pair batch needs equal, non-empty halves (got {} and {})",
                batch.x.len(),
                batch.y.len()
            )));
        }
        if ds.heatmap_spec().k != self.cfg.arch.k {
            return Err(Error::Dataset(format!(
                "dataset has K={} joints, network expects K={}",
                ds.heatmap_spec().k,
                self.cfg.arch.k
            )));
        }
        let idx: Vec<usize> = batch.x.iter().chain(&batch.y).copied().collect();
        Ok(StepInput { images: ds.image_batch(&idx), heatmaps: ds.heatmap_batch(&idx), b: batch.x.len() })
    }

    /// Gradients of `sum_t w_t * (x_t + y_t)` over `terms` for every live
    /// sub-network, without touching any parameter.
    pub fn term_gradients(&self, ds: &Dataset, batch: &PairBatch, terms: &[Term]) -> Result<SubnetGrads> {
        let input = self.input(ds, batch)?;
        let mut g = step::generator_graph(&self.nets, &self.frozen, &self.cfg, &input, self.step)?;
        let mut out: SubnetGrads = Default::default();
        let Some(obj) = step::objective(&mut g, &self.cfg, terms)? else {
            for net in &g.live_nets {
                out[*net as usize] = Some(self.nets.store(*net).iter().map(|p| Some(Tensor::zeros(p.tensor.shape()))).collect());
            }
            return Ok(out);
        };
        let mut grads = g.tape.backward(obj)?;
        for net in &g.live_nets {
            out[*net as usize] = Some(self.nets.store(*net).collect_grads(g.live.get(*net)?, &mut grads));
        }
        Ok(out)
    }

    /// One step of the configured mode on a prepared batch.
    pub fn step(&mut self, ds: &Dataset, batch: &PairBatch) -> Result<StepMetrics> {
        let start = Instant::now();
        let input = self.input(ds, batch)?;
        if self.step % self.cfg.frozen_refresh_interval == 0 {
            self.frozen.refresh(&self.nets)?;
        }
        let mut g = step::generator_graph(&self.nets, &self.frozen, &self.cfg, &input, self.step)?;
        let mut terms = Terms::default();
        for t in Term::ALL {
            if let Some(v) = g.value(t) {
                terms.set(t, v);
            }
        }

        // discriminator on the detached images, before any update
        let mut disc_update = None;
        if let Some((fakes, x_rows)) = g.fakes.take() {
            let (tape, bound, lx, ly) =
                step::discriminator_graph(&self.nets, &input.images, &fakes, &x_rows, input.b, self.step)?;
            let v = |t: &Tape<f32>, x| t.value(x).data()[0] as f64;
            terms.set(Term::GanD, crate::losses::PairValue { x: v(&tape, lx), y: v(&tape, ly) });
            let mut tape = tape;
            let obj = tape.add(lx, ly)?;
            let mut grads = tape.backward(obj)?;
            disc_update = Some(self.nets.store(Subnet::Discriminator).collect_grads(&bound, &mut grads));
        }

        for t in Term::ALL {
            if let Some(v) = terms.get(t) {
                if !(v.x.is_finite() && v.y.is_finite()) {
                    return Err(Error::NonFinite { step: self.step, term: t.name() });
                }
            }
        }
        let total = total_loss(&terms, &self.cfg.weights, &required_terms(&self.cfg))?;

        let mut grad_norms = BTreeMap::new();
        if let Some(obj) = step::objective(&mut g, &self.cfg, &Term::ALL)? {
            let mut grads = g.tape.backward(obj)?;
            for net in g.live_nets.clone() {
                let gr = self.nets.store(net).collect_grads(g.live.get(net)?, &mut grads);
                grad_norms.insert(net.name().to_string(), grad_norm(&gr));
                self.optimizers[net as usize].step(self.nets.store_mut(net), &gr)?;
            }
        }
        if let Some(gr) = disc_update {
            grad_norms.insert(Subnet::Discriminator.name().to_string(), grad_norm(&gr));
            self.optimizers[Subnet::Discriminator as usize].step(self.nets.store_mut(Subnet::Discriminator), &gr)?;
        }

        let metrics = StepMetrics {
            step: self.step,
            epoch: self.epoch,
            terms,
            total,
            grad_norms,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// The batches of the next epoch, drawn from the run's sampler.
    pub fn epoch_batches(&mut self, ds: &Dataset) -> Result<Vec<PairBatch>> {
        if self.cfg.mode == Mode::PairedSupervised {
            let groups = pair_groups(ds)?;
            epoch_sibling_pairs(&groups, &mut self.rng, self.cfg.batch_size)
        } else {
            epoch_pairs(ds.len(), &mut self.rng, self.cfg.batch_size)
        }
    }

    /// Runs one epoch, handing every step's metrics to `sink`.
    pub fn run_epoch(&mut self, ds: &Dataset, sink: &mut dyn FnMut(&StepMetrics) -> Result<()>) -> Result<()> {
        for batch in self.epoch_batches(ds)? {
            let m = self.step(ds, &batch)?;
            sink(&m)?;
        }
        self.epoch += 1;
        Ok(())
    }
}

/// Images rebuilt from the pose feature of `pose_src` and the appearance
/// feature of `app_src` (both `[n, 1, s, s]`), without gradient.
pub fn mix_images(nets: &NetworkSet<f32>, pose_src: &Tensor<f32>, app_src: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let b = nets.bind(
        &mut tape,
        &[
            (Subnet::Stem, BindMode::Frozen),
            (Subnet::PoseHead, BindMode::Frozen),
            (Subnet::AppearanceHead, BindMode::Frozen),
            (Subnet::ImageDecoder, BindMode::Frozen),
        ],
    );
    let ps = tape.constant(pose_src.clone());
    let as_ = tape.constant(app_src.clone());
    let (p, _) = nets.encode(&mut tape, &b, ps)?;
    let (_, a) = nets.encode(&mut tape, &b, as_)?;
    let out = nets.decode_image(&mut tape, &b, p, a)?;
    Ok(tape.value(out).clone())
}

/// Where [`train`] writes its outputs.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn epoch_checkpoint(&self, epoch: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("epoch-{epoch:04}"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final")
    }
}

/// Trains `cfg.epochs` epochs (continuing from `cfg.resume` when set),
/// writing the resolved config, a metrics line per step, a checkpoint per
/// epoch and the final checkpoint under `out`.
pub fn train(cfg: &TrainConfig, ds: &Dataset, out: &Path) -> Result<Trainer> {
    let layout = RunLayout::new(out);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cpath = layout.config();
    fs::write(&cpath, cfg.to_json() + "\n").map_err(|e| Error::io(&cpath, e))?;
    let mut trainer = match &cfg.resume {
        Some(dir) => Trainer::resume(cfg.clone(), load_checkpoint(dir)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let mpath = layout.metrics();
    let mut metrics = fs::OpenOptions::new().create(true).append(true).open(&mpath).map_err(|e| Error::io(&mpath, e))?;
    for _ in 0..cfg.epochs {
        trainer.run_epoch(ds, &mut |m| {
            let line = serde_json::to_string(m).expect("metrics serialize");
            writeln!(metrics, "{line}").map_err(|e| Error::io(&mpath, e))
        })?;
        save_checkpoint(&trainer.checkpoint(), &layout.epoch_checkpoint(trainer.epoch))?;
    }
    save_checkpoint(&trainer.checkpoint(), &layout.final_checkpoint())?;
    Ok(trainer)
}
