use handsplit_tape::{Element, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv { c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize },
    /// Weight layout `[c_in, c_out, k, k]`.
    ConvT { c_in: usize, c_out: usize, k: usize, stride: usize },
    Relu,
    Sigmoid,
    MaxPool,
    Upsample,
    GlobalAvgPool,
}

pub(super) fn down_block(c_in: usize, c_out: usize) -> [Layer; 5] {
    [
        Layer::Conv { c_in, c_out, k: 3, stride: 1, pad: 1 },
        Layer::Relu,
        Layer::Conv { c_in: c_out, c_out, k: 3, stride: 1, pad: 1 },
        Layer::Relu,
        Layer::MaxPool,
    ]
}

pub(super) fn head_block(c_in: usize, mid: usize, c_out: usize) -> [Layer; 5] {
    [
        Layer::Conv { c_in, c_out: mid, k: 3, stride: 1, pad: 1 },
        Layer::Relu,
        Layer::Conv { c_in: mid, c_out, k: 3, stride: 1, pad: 1 },
        Layer::Relu,
        Layer::MaxPool,
    ]
}

impl Layer {
    pub(super) fn add_params<T: Element>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut ChaCha8Rng) {
        let (w_shape, fan_in, c_out) = match *self {
            Layer::Conv { c_in, c_out, k, .. } => ([c_out, c_in, k, k], c_in * k * k, c_out),
            // each output pixel of a stride-k, size-k transposed conv sees c_in inputs
            Layer::ConvT { c_in, c_out, k, stride } => ([c_in, c_out, k, k], c_in * (k / stride).max(1).pow(2), c_out),
            _ => return,
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        store.add(format!("{prefix}.w"), Tensor::uniform(&w_shape, -bound, bound, rng), true).expect("unique layer prefix");
        store.add(format!("{prefix}.b"), Tensor::zeros(&[c_out]), true).expect("unique layer prefix");
    }
}

pub(super) fn forward<T: Element>(layers: &[Layer], tape: &mut Tape<T>, params: &[Var], x: Var) -> Result<Var> {
    let mut h = x;
    let mut p = params.iter().copied();
    let mut next = || p.next().expect("parameter count follows the layer list");
    for layer in layers {
        h = match *layer {
            Layer::Conv { stride, pad, .. } => {
                let (w, b) = (next(), next());
                tape.conv2d(h, w, b, stride, pad)?
            }
            Layer::ConvT { stride, .. } => {
                let (w, b) = (next(), next());
                tape.conv_transpose2d(h, w, b, stride)?
            }
            Layer::Relu => tape.relu(h)?,
            Layer::Sigmoid => tape.sigmoid(h)?,
            Layer::MaxPool => tape.maxpool2x2(h)?,
            Layer::Upsample => tape.upsample_nearest2x(h)?,
            Layer::GlobalAvgPool => tape.global_avg_pool(h)?,
        };
    }
    Ok(h)
}
