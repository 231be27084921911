//! `header.json` (architecture, counters, rng state, tensor directory) plus
//! `weights.bin` (little-endian f32, concatenated in header order).

use std::fs;
use std::path::Path;

use handsplit_tape::{AdamConfig, AdamState, ParamStore, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArchConfig, FrozenDecoders, NetworkSet, Subnet};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// u128 word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub nets: NetworkSet<f32>,
    pub frozen: Option<FrozenDecoders<f32>>,
    /// Optimizer per sub-network, in [`Subnet::ALL`] order.
    pub optimizers: Option<Vec<AdamState<f32>>>,
    pub step: u64,
    pub epoch: u64,
    pub rng: Option<RngState>,
    /// Resolved training configuration, echoed verbatim.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(nets: NetworkSet<f32>) -> Self {
        Self { nets, frozen: None, optimizers: None, step: 0, epoch: 0, rng: None, config: serde_json::Value::Null }
    }

    /// Rejects a checkpoint whose architecture differs from `expected`,
    /// naming every differing field with both values.
    pub fn check_arch(&self, expected: &ArchConfig) -> Result<()> {
        arch_mismatch(&self.nets.arch, expected).map_or(Ok(()), Err)
    }
}

fn arch_mismatch(found: &ArchConfig, expected: &ArchConfig) -> Option<Error> {
    let a = serde_json::to_value(found).ok()?;
    let b = serde_json::to_value(expected).ok()?;
    let (a, b) = (a.as_object()?, b.as_object()?);
    let diffs: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint {v}, expected {}", b[k]))
        .collect();
    (!diffs.is_empty()).then(|| Error::Checkpoint(format!("architecture mismatch ({})", diffs.join("; "))))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    arch: ArchConfig,
    step: u64,
    epoch: u64,
    rng: Option<RngState>,
    adam: Option<AdamHeader>,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn entries<'a>(prefix: &str, store: &'a ParamStore<f32>) -> impl Iterator<Item = (String, &'a Tensor<f32>)> + 'a {
    let prefix = prefix.to_string();
    store.iter().map(move |p| (format!("{prefix}{}", p.name), &p.tensor))
}

fn directory(ck: &Checkpoint) -> Vec<(String, &Tensor<f32>)> {
    let mut out: Vec<(String, &Tensor<f32>)> = Vec::new();
    for net in Subnet::ALL {
        out.extend(entries("", ck.nets.store(net)));
    }
    if let Some(f) = &ck.frozen {
        out.extend(entries("frozen.", &f.pose));
        out.extend(entries("frozen.", &f.image));
    }
    if let Some(opts) = &ck.optimizers {
        for (net, opt) in Subnet::ALL.iter().zip(opts) {
            let store = ck.nets.store(*net);
            for ((p, m), v) in store.iter().zip(opt.first_moments()).zip(opt.second_moments()) {
                out.push((format!("adam.m.{}", p.name), m));
                out.push((format!("adam.v.{}", p.name), v));
            }
        }
    }
    out
}

pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dir_entries = directory(ck);
    let mut weights = Vec::with_capacity(dir_entries.iter().map(|(_, t)| 4 * t.numel()).sum());
    for (_, t) in &dir_entries {
        for v in t.data() {
            weights.extend_from_slice(&v.to_le_bytes());
        }
    }
    let adam = ck.optimizers.as_ref().map(|opts| {
        let c = opts.first().map(|o| o.config).unwrap_or_default();
        AdamHeader { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps, steps: opts.iter().map(|o| o.step_count()).collect() }
    });
    let header = Header {
        version: CHECKPOINT_VERSION,
        arch: ck.nets.arch.clone(),
        step: ck.step,
        epoch: ck.epoch,
        rng: ck.rng.clone(),
        adam,
        config: ck.config.clone(),
        tensors: dir_entries.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let hpath = dir.join("header.json");
    let mut json = serde_json::to_vec_pretty(&header).map_err(|e| Error::json(&hpath, e))?;
    json.push(b'\n');
    fs::write(&hpath, json).map_err(|e| Error::io(&hpath, e))?;
    let wpath = dir.join("weights.bin");
    fs::write(&wpath, weights).map_err(|e| Error::io(&wpath, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let hpath = dir.join("header.json");
    let text = fs::read(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: Header = serde_json::from_slice(&text).map_err(|e| Error::json(&hpath, e))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} in {} is not supported (expected {CHECKPOINT_VERSION})",
            header.version,
            hpath.display()
        )));
    }
    let wpath = dir.join("weights.bin");
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;

    let nets = NetworkSet::<f32>::build(&header.arch, 0)?;
    let has_frozen = header.tensors.iter().any(|t| t.name.starts_with("frozen."));
    let mut ck = Checkpoint {
        frozen: has_frozen.then(|| nets.clone_frozen()),
        optimizers: header.adam.as_ref().map(|a| {
            let cfg = AdamConfig { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps };
            Subnet::ALL.iter().map(|n| AdamState::new(nets.store(*n), cfg)).collect()
        }),
        nets,
        step: header.step,
        epoch: header.epoch,
        rng: header.rng.clone(),
        config: header.config.clone(),
    };

    // Check the directory against the architecture before touching bytes.
    let expected: Vec<(String, Vec<usize>)> =
        directory(&ck).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != header.tensors.len()
        || expected.iter().zip(&header.tensors).any(|((n, s), e)| *n != e.name || *s != e.shape)
    {
        return Err(Error::Checkpoint(format!("{}: tensor directory does not match its architecture", hpath.display())));
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if bytes.len() != 4 * total {
        return Err(Error::Checkpoint(format!("{}: expected {} bytes, found {}", wpath.display(), 4 * total, bytes.len())));
    }
    let mut values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut fill = |t: &mut Tensor<f32>| {
        for v in t.data_mut() {
            *v = values.next().expect("length checked");
        }
    };
    for net in Subnet::ALL {
        for p in ck.nets.store_mut(net).iter_mut() {
            fill(&mut p.tensor);
        }
    }
    if let Some(f) = &mut ck.frozen {
        for p in f.pose.iter_mut().chain(f.image.iter_mut()) {
            fill(&mut p.tensor);
        }
    }
    if let (Some(opts), Some(a)) = (&mut ck.optimizers, &header.adam) {
        for (i, net) in Subnet::ALL.iter().enumerate() {
            let n = ck.nets.store(*net).len();
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for p in ck.nets.store(*net).iter() {
                let mut tm = Tensor::zeros(p.tensor.shape());
                let mut tv = Tensor::zeros(p.tensor.shape());
                fill(&mut tm);
                fill(&mut tv);
                m.push(tm);
                v.push(tv);
            }
            let step = a.steps.get(i).copied().unwrap_or(0);
            opts[i] = AdamState::from_parts(opts[i].config, step, m, v)?;
        }
    }
    Ok(ck)
}
