use std::fs;
use std::path::Path;

use handsplit_tape::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pgm;
use super::pose::{sample_pose, PoseParams};
use super::render::{render, render_heatmaps, sample_appearance, AppearanceParams, HeatmapSpec};
use super::{IMAGE_SIZE, K, SIGMA};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub image: String,
    pub joints: Vec<[f64; 2]>,
    pub pose: PoseParams,
    pub appearance: AppearanceParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub k: usize,
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
    pub records: Vec<SampleRecord>,
}

/// Records plus their decoded images. Images hold the 8-bit quantized
/// values, so an in-memory dataset equals its written-then-loaded copy.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    images: Vec<Vec<f32>>,
}

const POSE_STREAM: u64 = 0;
const APPEARANCE_STREAM: u64 = 1;
const SIBLING_STREAM: u64 = 2;

/// Independent generator for one role of one record.
fn stream(seed: u64, index: usize, role: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 * 4 + role);
    rng
}

fn quantized(image: &[f32]) -> Vec<f32> {
    image.iter().map(|&v| pgm::dequantize(pgm::quantize(v))).collect()
}

/// Builds a dataset in memory. With `paired`, every pose is rendered under
/// two independent appearances that share a `pair_id` (`2 * count` records).
pub fn generate(count: usize, seed: u64, paired: bool) -> Result<Dataset> {
    let mut records = Vec::with_capacity(if paired { 2 * count } else { count });
    let mut images = Vec::with_capacity(records.capacity());
    for i in 0..count {
        let pose = sample_pose(&mut stream(seed, i, POSE_STREAM));
        let roles: &[(u64, &str)] =
            if paired { &[(APPEARANCE_STREAM, "_a"), (SIBLING_STREAM, "_b")] } else { &[(APPEARANCE_STREAM, "")] };
        for &(role, suffix) in roles {
            let appearance = sample_appearance(&mut stream(seed, i, role));
            let r = render(&pose, &appearance)?;
            records.push(SampleRecord {
                image: format!("{i:06}{suffix}.pgm"),
                joints: r.joints.to_vec(),
                pose,
                appearance,
                pair_id: paired.then_some(i as u64),
            });
            images.push(quantized(&r.image));
        }
    }
    let manifest = Manifest { version: MANIFEST_VERSION, k: K, width: IMAGE_SIZE, height: IMAGE_SIZE, sigma: SIGMA, records };
    Ok(Dataset { manifest, images })
}

/// [`generate`] followed by [`Dataset::write`].
pub fn generate_dataset(count: usize, seed: u64, paired: bool, out_dir: &Path) -> Result<Dataset> {
    let ds = generate(count, seed, paired)?;
    ds.write(out_dir)?;
    Ok(ds)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.manifest.records
    }

    pub fn record(&self, i: usize) -> &SampleRecord {
        &self.manifest.records[i]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    pub fn heatmap_spec(&self) -> HeatmapSpec {
        HeatmapSpec { k: self.manifest.k, height: self.manifest.height, width: self.manifest.width, sigma: self.manifest.sigma }
    }

    /// Images at `idx` stacked as `[n, 1, h, w]`.
    pub fn image_batch(&self, idx: &[usize]) -> Tensor<f32> {
        let (h, w) = (self.manifest.height, self.manifest.width);
        let data = idx.iter().flat_map(|&i| self.images[i].iter().copied()).collect();
        Tensor::new(&[idx.len(), 1, h, w], data).expect("image sizes validated at construction")
    }

    /// Ground-truth heatmaps at `idx` stacked as `[n, k, h, w]`.
    pub fn heatmap_batch(&self, idx: &[usize]) -> Tensor<f32> {
        let spec = self.heatmap_spec();
        let data = idx.iter().flat_map(|&i| render_heatmaps(&self.record(i).joints, &spec)).collect();
        Tensor::new(&[idx.len(), spec.k, spec.height, spec.width], data).expect("joint counts validated at construction")
    }

    /// Copies the records at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut manifest = self.manifest.clone();
        manifest.records = idx.iter().map(|&i| self.manifest.records[i].clone()).collect();
        Dataset { manifest, images: idx.iter().map(|&i| self.images[i].clone()).collect() }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (h, w) = (self.manifest.height, self.manifest.width);
        for (rec, img) in self.manifest.records.iter().zip(&self.images) {
            pgm::write(&dir.join(&rec.image), w, h, img)?;
        }
        let path = dir.join("manifest.json");
        let mut json = serde_json::to_vec_pretty(&self.manifest).map_err(|e| Error::json(&path, e))?;
        json.push(b'\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.json");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        if manifest.sigma <= 0.0 || manifest.k == 0 {
            return Err(Error::Dataset("manifest needs k >= 1 and sigma > 0".into()));
        }
        let mut images = Vec::with_capacity(manifest.records.len());
        for rec in &manifest.records {
            if rec.joints.len() != manifest.k {
                return Err(Error::Dataset(format!(
                    "record `{}` has {} joints but the dataset has k = {}",
                    rec.image,
                    rec.joints.len(),
                    manifest.k
                )));
            }
            let (w, h, px) = pgm::read(&dir.join(&rec.image))?;
            if (w, h) != (manifest.width, manifest.height) {
                return Err(Error::Dataset(format!(
                    "record `{}` is {w}x{h}, expected {}x{}",
                    rec.image, manifest.width, manifest.height
                )));
            }
            images.push(px);
        }
        Ok(Dataset { manifest, images })
    }
}
