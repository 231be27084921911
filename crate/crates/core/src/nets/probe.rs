use handsplit_tape::{finite_diff_check, Bound, Element, GradCheckConfig, GradCheckReport, Probe, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, NetworkSet, Subnet};
use crate::error::Result;

/// Two levels, two channels, 8x8 images: small enough to probe every
/// parameter tensor by finite differences.
pub fn micro_arch() -> ArchConfig {
    ArchConfig {
        depth: 2,
        base_channels: 2,
        pose_channels: 2,
        appearance_channels: 2,
        k: 2,
        image_size: 8,
        disc_channels: 2,
    }
}

/// The whole network set as one differentiable function of
/// `[images, every parameter in store order]`, returning the heatmaps, the
/// reconstruction and the discriminator scores flattened end to end.
struct WholeNetwork {
    arch: ArchConfig,
    counts: Vec<usize>,
}

impl Probe for WholeNetwork {
    fn eval<T: Element>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> handsplit_tape::Result<Var> {
        let nets = NetworkSet::<T>::build(&self.arch, 0).expect("valid micro architecture");
        let mut at = 1;
        let bounds: Vec<Bound> = self
            .counts
            .iter()
            .map(|&c| {
                let b = Bound::from_vars(inputs[at..at + c].to_vec());
                at += c;
                b
            })
            .collect();
        let run = |tape: &mut Tape<T>, net: Subnet, x: Var| {
            nets.run_with(net, tape, &bounds[net as usize], x).map_err(into_tape)
        };
        let h = run(tape, Subnet::Stem, inputs[0])?;
        let p = run(tape, Subnet::PoseHead, h)?;
        let a = run(tape, Subnet::AppearanceHead, h)?;
        let heat = run(tape, Subnet::PoseDecoder, p)?;
        let pa = tape.concat_channels(p, a)?;
        let img = run(tape, Subnet::ImageDecoder, pa)?;
        let score = run(tape, Subnet::Discriminator, img)?;
        let parts = [heat, img, score]
            .into_iter()
            .map(|v| {
                let n = tape.value(v).numel();
                tape.reshape(v, &[n])
            })
            .collect::<handsplit_tape::Result<Vec<_>>>()?;
        tape.concat_batch(&parts)
    }
}

fn into_tape(e: crate::Error) -> handsplit_tape::TapeError {
    match e {
        crate::Error::Tape(t) => t,
        other => handsplit_tape::TapeError::InvalidArgument(other.to_string()),
    }
}

/// Finite-difference check of every sub-network, end to end, at precision `T`.
pub fn network_gradcheck<T: Element>(cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let arch = micro_arch();
    let nets = NetworkSet::<f64>::build(&arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let s = arch.image_size;
    let mut inputs = vec![Tensor::uniform(&[2, 1, s, s], 0.0, 1.0, &mut rng)];
    let mut counts = Vec::new();
    for net in Subnet::ALL {
        let store = nets.store(net);
        counts.push(store.len());
        // nonzero biases so no unit sits exactly on a relu kink
        inputs.extend(store.iter().map(|p| {
            if p.name.ends_with(".b") {
                Tensor::uniform(p.tensor.shape(), -0.1, 0.1, &mut rng)
            } else {
                p.tensor.clone()
            }
        }));
    }
    Ok(finite_diff_check::<T, _>(&WholeNetwork { arch, counts }, &inputs, cfg)?)
}
