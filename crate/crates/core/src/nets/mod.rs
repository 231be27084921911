//! Shared encoder stem, pose and appearance heads, pose and image decoders,
//! and the adversarial discriminator.

mod checkpoint;
mod layers;
mod probe;

use handsplit_tape::{BindMode, Bound, Element, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{IMAGE_SIZE, SIGMA};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
pub use layers::Layer;
pub use probe::{micro_arch, network_gradcheck};

/// Initial heatmap value: the mean of a target map, i.e. the area of one
/// Gaussian spread over the frame.
pub fn heatmap_prior() -> f64 {
    let area = 2.0 * std::f64::consts::PI * SIGMA * SIGMA;
    (area / (IMAGE_SIZE * IMAGE_SIZE) as f64).clamp(1e-3, 0.5)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Number of down (and up) sampling levels.
    pub depth: usize,
    /// Channels at the first level; doubled per level.
    pub base_channels: usize,
    pub pose_channels: usize,
    pub appearance_channels: usize,
    pub k: usize,
    pub image_size: usize,
    /// Channels of the first discriminator block; doubled per block.
    pub disc_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            pose_channels: 64,
            appearance_channels: 64,
            k: 16,
            image_size: 64,
            disc_channels: 8,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("architecture: {m}")));
        if self.depth < 2 {
            return bad(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.image_size == 0 || self.image_size % (1 << self.depth) != 0 {
            return bad(format!("image size {} is not divisible by 2^{}", self.image_size, self.depth));
        }
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("pose_channels", self.pose_channels),
            ("appearance_channels", self.appearance_channels),
            ("k", self.k),
            ("disc_channels", self.disc_channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    /// Channels at encoder level `l` (0-based).
    pub fn level_channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Spatial size of the pose and appearance features.
    pub fn feature_size(&self) -> usize {
        self.image_size >> self.depth
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subnet {
    Stem,
    PoseHead,
    AppearanceHead,
    PoseDecoder,
    ImageDecoder,
    Discriminator,
}

impl Subnet {
    pub const ALL: [Subnet; 6] = [
        Subnet::Stem,
        Subnet::PoseHead,
        Subnet::AppearanceHead,
        Subnet::PoseDecoder,
        Subnet::ImageDecoder,
        Subnet::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subnet::Stem => "stem",
            Subnet::PoseHead => "pose_head",
            Subnet::AppearanceHead => "appearance_head",
            Subnet::PoseDecoder => "pose_decoder",
            Subnet::ImageDecoder => "image_decoder",
            Subnet::Discriminator => "discriminator",
        }
    }

    pub fn layers(self, arch: &ArchConfig) -> Vec<Layer> {
        let c = |l: usize| arch.level_channels(l);
        let d = arch.depth;
        let mut out = Vec::new();
        match self {
            Subnet::Stem => {
                let mut prev = 1;
                for l in 0..d - 1 {
                    out.extend(layers::down_block(prev, c(l)));
                    prev = c(l);
                }
            }
            Subnet::PoseHead => out.extend(layers::head_block(c(d - 2), c(d - 1), arch.pose_channels)),
            Subnet::AppearanceHead => out.extend(layers::head_block(c(d - 2), c(d - 1), arch.appearance_channels)),
            Subnet::PoseDecoder => {
                let mut prev = arch.pose_channels;
                for l in (0..d).rev() {
                    out.extend([
                        Layer::ConvT { c_in: prev, c_out: c(l), k: 2, stride: 2 },
                        Layer::Relu,
                        Layer::Conv { c_in: c(l), c_out: c(l), k: 3, stride: 1, pad: 1 },
                        Layer::Relu,
                    ]);
                    prev = c(l);
                }
                out.extend([Layer::Conv { c_in: prev, c_out: arch.k, k: 1, stride: 1, pad: 0 }, Layer::Sigmoid]);
            }
            Subnet::ImageDecoder => {
                let mut prev = arch.pose_channels + arch.appearance_channels;
                for l in (0..d).rev() {
                    out.extend([
                        Layer::Upsample,
                        Layer::Conv { c_in: prev, c_out: c(l), k: 3, stride: 1, pad: 1 },
                        Layer::Relu,
                    ]);
                    prev = c(l);
                }
                out.extend([Layer::Conv { c_in: prev, c_out: 1, k: 1, stride: 1, pad: 0 }, Layer::Sigmoid]);
            }
            Subnet::Discriminator => {
                let mut prev = 1;
                for l in 0..4 {
                    let ch = arch.disc_channels << l;
                    out.extend([Layer::Conv { c_in: prev, c_out: ch, k: 3, stride: 2, pad: 1 }, Layer::Relu]);
                    prev = ch;
                }
                out.extend([
                    Layer::GlobalAvgPool,
                    Layer::Conv { c_in: prev, c_out: 1, k: 1, stride: 1, pad: 0 },
                    Layer::Sigmoid,
                ]);
            }
        }
        out
    }
}

/// The five networks plus the discriminator, one parameter store each.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSet<T: Element = f32> {
    pub arch: ArchConfig,
    stores: [ParamStore<T>; 6],
}

/// Tape handles for a whole [`NetworkSet`] (or a subset of it).
#[derive(Clone, Debug)]
pub struct Bindings {
    bound: [Option<Bound>; 6],
}

impl Bindings {
    pub fn get(&self, net: Subnet) -> Result<&Bound> {
        self.bound[net as usize]
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{} is not bound on this tape", net.name())))
    }
}

impl<T: Element> NetworkSet<T> {
    /// He-style uniform initialization, bound `sqrt(6 / fan_in)`, zero
    /// biases; deterministic in `seed`.
    pub fn build(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stores = Subnet::ALL.map(|net| {
            let mut store = ParamStore::new();
            for (i, layer) in net.layers(arch).iter().enumerate() {
                layer.add_params(&mut store, &format!("{}.{i}", net.name()), &mut rng);
            }
            store
        });
        let mut nets = Self { arch: arch.clone(), stores };
        nets.set_heatmap_prior(heatmap_prior());
        Ok(nets)
    }

    /// Sets the pose decoder's output bias so that every heatmap pixel
    /// starts at `prior` instead of 0.5.
    fn set_heatmap_prior(&mut self, prior: f64) {
        let logit = (prior / (1.0 - prior)).ln();
        let store = self.store_mut(Subnet::PoseDecoder);
        if let Some(last) = store.iter_mut().last() {
            for v in last.tensor.data_mut() {
                *v = T::lit(logit);
            }
        }
    }

    pub fn store(&self, net: Subnet) -> &ParamStore<T> {
        &self.stores[net as usize]
    }

    pub fn store_mut(&mut self, net: Subnet) -> &mut ParamStore<T> {
        &mut self.stores[net as usize]
    }

    pub fn num_params(&self) -> usize {
        self.stores.iter().map(|s| s.numel()).sum()
    }

    /// Binds the listed sub-networks in the given modes.
    pub fn bind(&self, tape: &mut Tape<T>, modes: &[(Subnet, BindMode)]) -> Bindings {
        let mut bound: [Option<Bound>; 6] = Default::default();
        for &(net, mode) in modes {
            bound[net as usize] = Some(self.store(net).bind(tape, mode));
        }
        Bindings { bound }
    }

    /// Binds every sub-network in one mode.
    pub fn bind_all(&self, tape: &mut Tape<T>, mode: BindMode) -> Bindings {
        self.bind(tape, &Subnet::ALL.map(|n| (n, mode)))
    }

    pub fn run(&self, net: Subnet, tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<Var> {
        self.run_with(net, tape, b.get(net)?, x)
    }

    /// Runs `net` with explicitly supplied handles (for example a frozen copy).
    pub fn run_with(&self, net: Subnet, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        layers::forward(&net.layers(&self.arch), tape, bound.vars(), x)
    }

    fn check_images(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = self.arch.image_size;
        match tape.shape(x) {
            [_, 1, h, w] if *h == s && *w == s => Ok(()),
            other => Err(Error::InvalidArgument(format!("expected images [n, 1, {s}, {s}], got {other:?}"))),
        }
    }

    /// `[n, 1, s, s]` images to the pose and appearance features.
    pub fn encode(&self, tape: &mut Tape<T>, b: &Bindings, images: Var) -> Result<(Var, Var)> {
        self.encode_with(tape, b.get(Subnet::Stem)?, b.get(Subnet::PoseHead)?, b.get(Subnet::AppearanceHead)?, images)
    }

    pub fn encode_with(
        &self,
        tape: &mut Tape<T>,
        stem: &Bound,
        pose: &Bound,
        app: &Bound,
        images: Var,
    ) -> Result<(Var, Var)> {
        self.check_images(tape, images)?;
        let h = self.run_with(Subnet::Stem, tape, stem, images)?;
        let p = self.run_with(Subnet::PoseHead, tape, pose, h)?;
        let a = self.run_with(Subnet::AppearanceHead, tape, app, h)?;
        Ok((p, a))
    }

    /// Shared stem features, `[n, base * 2^(depth-2), s / 2^(depth-1), ...]`.
    pub fn stem(&self, tape: &mut Tape<T>, b: &Bindings, images: Var) -> Result<Var> {
        self.check_images(tape, images)?;
        self.run(Subnet::Stem, tape, b, images)
    }

    pub fn decode_pose(&self, tape: &mut Tape<T>, b: &Bindings, p: Var) -> Result<Var> {
        self.run(Subnet::PoseDecoder, tape, b, p)
    }

    pub fn decode_image(&self, tape: &mut Tape<T>, b: &Bindings, p: Var, a: Var) -> Result<Var> {
        self.decode_image_with(tape, b.get(Subnet::ImageDecoder)?, p, a)
    }

    pub fn decode_image_with(&self, tape: &mut Tape<T>, bound: &Bound, p: Var, a: Var) -> Result<Var> {
        let pa = tape.concat_channels(p, a)?;
        self.run_with(Subnet::ImageDecoder, tape, bound, pa)
    }

    /// Real-image probabilities, shape `[n]`.
    pub fn discriminate(&self, tape: &mut Tape<T>, b: &Bindings, images: Var) -> Result<Var> {
        self.discriminate_with(tape, b.get(Subnet::Discriminator)?, images)
    }

    pub fn discriminate_with(&self, tape: &mut Tape<T>, bound: &Bound, images: Var) -> Result<Var> {
        self.check_images(tape, images)?;
        let n = tape.shape(images)[0];
        let s = self.run_with(Subnet::Discriminator, tape, bound, images)?;
        Ok(tape.reshape(s, &[n])?)
    }

    /// Non-trainable value copies of the two decoders.
    pub fn clone_frozen(&self) -> FrozenDecoders<T> {
        let copy = |net| {
            let mut s = self.store(net).clone();
            s.set_trainable(false);
            s
        };
        FrozenDecoders { pose: copy(Subnet::PoseDecoder), image: copy(Subnet::ImageDecoder) }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.stores.iter().zip(&other.stores).all(|(a, b)| a.bit_eq(b))
    }
}

/// Evaluator copies of the pose and image decoders; never updated by an
/// optimizer, only overwritten by [`FrozenDecoders::refresh`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenDecoders<T: Element = f32> {
    pub pose: ParamStore<T>,
    pub image: ParamStore<T>,
}

impl<T: Element> FrozenDecoders<T> {
    pub fn refresh(&mut self, nets: &NetworkSet<T>) -> Result<()> {
        self.pose.copy_values_from(nets.store(Subnet::PoseDecoder))?;
        self.image.copy_values_from(nets.store(Subnet::ImageDecoder))?;
        Ok(())
    }

    pub fn matches(&self, nets: &NetworkSet<T>) -> bool {
        let same = |a: &ParamStore<T>, b: &ParamStore<T>| {
            a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.tensor.bit_eq(&y.tensor))
        };
        same(&self.pose, nets.store(Subnet::PoseDecoder)) && same(&self.image, nets.store(Subnet::ImageDecoder))
    }
}
