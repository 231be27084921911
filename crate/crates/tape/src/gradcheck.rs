//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation half-width.
    pub eps: f64,
    /// At most this many coordinates are probed per input.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-3, max_coords: 64, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: usize,
}

/// A differentiable computation that can be recorded at any precision.
pub trait Probe {
    fn eval<T: Element>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

/// Compares tape gradients computed in precision `T` against central
/// differences of the same computation evaluated in f64.
///
/// Inputs are first rounded to `T`, so both sides see the same point. The
/// objective is `sum_i r_i * out_i` for a fixed random cotangent `r`
/// (magnitudes in [0.5, 1)). Relative error per coordinate is
/// `|a - n| / max(|a|, |n|, 0.01 * g)` where `g` is the largest analytic
/// gradient magnitude among the probed coordinates.
pub fn finite_diff_check<T: Element, P: Probe + ?Sized>(
    op: &P,
    inputs: &[Tensor<f64>],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let at: Vec<Tensor<T>> = inputs.iter().map(|t| t.cast()).collect();
    let point: Vec<Tensor<f64>> = at.iter().map(|t| t.cast()).collect();

    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = at.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = op.eval(&mut tape, &vars)?;
    let cot: Tensor<f64> = away_from_zero(tape.shape(out), &mut rng);
    let grads = tape.backward_with(out, cot.cast())?;

    let objective = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op.eval(&mut tape, &vars)?;
        tape.value(out).dot(&cot)
    };

    let mut probes = Vec::new();
    for (i, input) in point.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let analytic = grads.get(vars[i]).expect("input leaves require grad");
        let mut work = point.clone();
        for c in coords {
            let x0 = input.data()[c];
            work[i].data_mut()[c] = x0 + cfg.eps;
            let plus = objective(&work)?;
            work[i].data_mut()[c] = x0 - cfg.eps;
            let minus = objective(&work)?;
            work[i].data_mut()[c] = x0;
            probes.push((analytic.data()[c].f64(), (plus - minus) / (2.0 * cfg.eps)));
        }
    }
    let gmax = probes.iter().map(|(a, _)| a.abs()).fold(0.0, f64::max);
    let floor = (0.01 * gmax).max(f64::MIN_POSITIVE);
    let max_rel_error = probes
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, coords: probes.len() })
}

fn rand_t<T: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Magnitudes in [0.5, 1) with random sign: kink-free inputs for relu and
/// cotangents that keep every probed gradient away from zero.
fn away_from_zero<T: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.5..1.0);
        T::lit(if rng.gen_bool(0.5) { m } else { -m })
    })
}

/// Distinct values with gaps of at least 0.05, shuffled, for max pooling.
fn distinct<T: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    Tensor::from_fn(shape, |i| T::lit(idx[i] as f64 * 0.05 - 0.4))
}

/// Probabilities in (0.05, 0.95).
fn probs<T: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::uniform(shape, 0.05, 0.95, rng)
}

/// The tape primitives, each wired to small fixed-shape inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    Conv2d,
    Conv2dStride2,
    ConvTranspose2d,
    ConvTranspose2dOverlap,
    MaxPool2x2,
    UpsampleNearest2x,
    Relu,
    Sigmoid,
    ConcatChannels,
    SliceChannels,
    ConcatBatch,
    SliceBatch,
    LinComb,
    Mul,
    Sum,
    Mean,
    GlobalAvgPool,
    Reshape,
    L1Loss,
    BceLoss,
}

impl Primitive {
    pub const ALL: [Primitive; 20] = [
        Primitive::Conv2d,
        Primitive::Conv2dStride2,
        Primitive::ConvTranspose2d,
        Primitive::ConvTranspose2dOverlap,
        Primitive::MaxPool2x2,
        Primitive::UpsampleNearest2x,
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::ConcatChannels,
        Primitive::SliceChannels,
        Primitive::ConcatBatch,
        Primitive::SliceBatch,
        Primitive::LinComb,
        Primitive::Mul,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::GlobalAvgPool,
        Primitive::Reshape,
        Primitive::L1Loss,
        Primitive::BceLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Conv2d => "conv2d",
            Primitive::Conv2dStride2 => "conv2d_stride2",
            Primitive::ConvTranspose2d => "conv_transpose2d",
            Primitive::ConvTranspose2dOverlap => "conv_transpose2d_overlap",
            Primitive::MaxPool2x2 => "maxpool2x2",
            Primitive::UpsampleNearest2x => "upsample_nearest2x",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::ConcatChannels => "concat_channels",
            Primitive::SliceChannels => "slice_channels",
            Primitive::ConcatBatch => "concat_batch",
            Primitive::SliceBatch => "slice_batch",
            Primitive::LinComb => "lincomb",
            Primitive::Mul => "mul",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Reshape => "reshape",
            Primitive::L1Loss => "l1_loss",
            Primitive::BceLoss => "bce_loss",
        }
    }

    /// Inputs at which the primitive is differentiable with margin.
    pub fn inputs(self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        let r = rng;
        match self {
            Primitive::Conv2d => vec![rand_t(&[2, 2, 5, 5], r), rand_t(&[3, 2, 3, 3], r), rand_t(&[3], r)],
            Primitive::Conv2dStride2 => vec![rand_t(&[1, 2, 6, 6], r), rand_t(&[2, 2, 3, 3], r), rand_t(&[2], r)],
            Primitive::ConvTranspose2d => vec![rand_t(&[2, 3, 3, 3], r), rand_t(&[3, 2, 2, 2], r), rand_t(&[2], r)],
            Primitive::ConvTranspose2dOverlap => {
                vec![rand_t(&[1, 2, 3, 3], r), rand_t(&[2, 2, 3, 3], r), rand_t(&[2], r)]
            }
            Primitive::MaxPool2x2 => vec![distinct(&[1, 2, 4, 4], r)],
            Primitive::UpsampleNearest2x => vec![rand_t(&[1, 2, 3, 3], r)],
            Primitive::Relu => vec![away_from_zero(&[2, 3, 4, 4], r)],
            Primitive::Sigmoid => vec![Tensor::uniform(&[2, 3, 4, 4], -4.0, 4.0, r)],
            Primitive::ConcatChannels => vec![rand_t(&[2, 2, 3, 3], r), rand_t(&[2, 1, 3, 3], r)],
            Primitive::SliceChannels => vec![rand_t(&[2, 4, 3, 3], r)],
            Primitive::ConcatBatch => vec![rand_t(&[1, 2, 3, 3], r), rand_t(&[2, 2, 3, 3], r)],
            Primitive::SliceBatch => vec![rand_t(&[3, 2, 2, 2], r)],
            Primitive::LinComb | Primitive::Mul => vec![rand_t(&[2, 5], r), rand_t(&[2, 5], r)],
            Primitive::Sum | Primitive::Mean => vec![rand_t(&[2, 5], r)],
            Primitive::GlobalAvgPool => vec![rand_t(&[2, 3, 4, 4], r)],
            Primitive::Reshape => vec![rand_t(&[2, 3, 2, 2], r)],
            Primitive::L1Loss => {
                // |pred - target| >= 0.5 keeps every coordinate off the kink.
                let base = rand_t(&[2, 10], r);
                let offset = away_from_zero::<f64>(&[2, 10], r);
                let target = Tensor::from_fn(&[2, 10], |i| base.data()[i] + offset.data()[i]);
                vec![base, target]
            }
            Primitive::BceLoss => vec![probs(&[2, 10], r), probs(&[2, 10], r)],
        }
    }
}

impl Probe for Primitive {
    fn eval<T: Element>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        match self {
            Primitive::Conv2d => t.conv2d(v[0], v[1], v[2], 1, 1),
            Primitive::Conv2dStride2 => t.conv2d(v[0], v[1], v[2], 2, 1),
            Primitive::ConvTranspose2d => t.conv_transpose2d(v[0], v[1], v[2], 2),
            Primitive::ConvTranspose2dOverlap => t.conv_transpose2d(v[0], v[1], v[2], 1),
            Primitive::MaxPool2x2 => t.maxpool2x2(v[0]),
            Primitive::UpsampleNearest2x => t.upsample_nearest2x(v[0]),
            Primitive::Relu => t.relu(v[0]),
            Primitive::Sigmoid => t.sigmoid(v[0]),
            Primitive::ConcatChannels => t.concat_channels(v[0], v[1]),
            Primitive::SliceChannels => t.slice_channels(v[0], 1, 2),
            Primitive::ConcatBatch => t.concat_batch(&[v[0], v[1]]),
            Primitive::SliceBatch => t.slice_batch(v[0], 1, 2),
            Primitive::LinComb => t.lincomb(&[(v[0], 0.7), (v[1], -1.3)]),
            Primitive::Mul => t.mul(v[0], v[1]),
            Primitive::Sum => t.sum(v[0]),
            Primitive::Mean => t.mean(v[0]),
            Primitive::GlobalAvgPool => t.global_avg_pool(v[0]),
            Primitive::Reshape => t.reshape(v[0], &[6, 4]),
            Primitive::L1Loss => t.l1_loss(v[0], v[1]),
            Primitive::BceLoss => t.bce_loss(v[0], v[1]),
        }
    }
}

/// Runs [`finite_diff_check`] over every tape primitive with gradients
/// computed in precision `T`; one report per primitive.
pub fn check_primitives<T: Element>(cfg: GradCheckConfig) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    Primitive::ALL
        .iter()
        .map(|&p| {
            let inputs = p.inputs(&mut rng);
            finite_diff_check::<T, _>(&p, &inputs, cfg).map(|r| (p.name(), r))
        })
        .collect()
}
