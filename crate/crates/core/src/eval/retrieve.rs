use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Pose,
    Appearance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// The `k` gallery entries nearest to `query` in Euclidean distance,
/// closest first; equal distances keep gallery order.
pub fn retrieve(gallery: &[Vec<f64>], query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    if k >= gallery.len() {
        return Err(Error::InvalidArgument(format!("k={k} must be smaller than the gallery size {}", gallery.len())));
    }
    if let Some(i) = gallery.iter().position(|g| g.len() != query.len()) {
        return Err(Error::InvalidArgument(format!(
            "gallery entry {i} has dimension {}, query has {}",
            gallery[i].len(),
            query.len()
        )));
    }
    let mut all: Vec<Neighbor> = gallery
        .iter()
        .enumerate()
        .map(|(index, g)| Neighbor {
            index,
            distance: g.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        })
        .collect();
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    all.truncate(k);
    Ok(all)
}
