use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::synth::Dataset;

/// Index lists of one step: `x[i]` and `y[i]` form the i-th pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub x: Vec<usize>,
    pub y: Vec<usize>,
}

fn check_size(len: usize, batch: usize) -> Result<()> {
    if batch == 0 || len < 2 * batch {
        return Err(Error::Dataset(format!("{len} records cannot fill a batch of {batch} pairs (need {})", 2 * batch)));
    }
    Ok(())
}

/// `2 * batch` distinct indices: the first `batch` are x, the rest y.
pub fn sample_pairs<R: Rng + ?Sized>(len: usize, rng: &mut R, batch: usize) -> Result<PairBatch> {
    check_size(len, batch)?;
    let idx = rand::seq::index::sample(rng, len, 2 * batch).into_vec();
    Ok(PairBatch { x: idx[..batch].to_vec(), y: idx[batch..].to_vec() })
}

/// One epoch: a permutation cut into `len / (2 * batch)` steps, so every
/// record fills at most one slot and, when `2 * batch` divides `len`,
/// exactly one.
pub fn epoch_pairs<R: Rng + ?Sized>(len: usize, rng: &mut R, batch: usize) -> Result<Vec<PairBatch>> {
    check_size(len, batch)?;
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(rng);
    Ok(perm
        .chunks_exact(2 * batch)
        .map(|c| PairBatch { x: c[..batch].to_vec(), y: c[batch..].to_vec() })
        .collect())
}

/// Groups a paired dataset into `(first, second)` members by `pair_id`, in
/// ascending id order.
pub fn pair_groups(ds: &Dataset) -> Result<Vec<(usize, usize)>> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records().iter().enumerate() {
        let id = r.pair_id.ok_or_else(|| Error::Dataset(format!("record {} has no pair_id", r.image)))?;
        groups.entry(id).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(id, m)| match m[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::Dataset(format!("pair_id {id} has {} members, expected 2", m.len()))),
        })
        .collect()
}

/// One epoch over pair groups: a permutation of the groups cut into steps
/// of `batch` pairs; `x` holds first members and `y` their siblings.
pub fn epoch_sibling_pairs<R: Rng + ?Sized>(
    groups: &[(usize, usize)],
    rng: &mut R,
    batch: usize,
) -> Result<Vec<PairBatch>> {
    if batch == 0 || groups.len() < batch {
        return Err(Error::Dataset(format!("{} pairs cannot fill a batch of {batch}", groups.len())));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    Ok(order
        .chunks_exact(batch)
        .map(|c| PairBatch { x: c.iter().map(|&g| groups[g].0).collect(), y: c.iter().map(|&g| groups[g].1).collect() })
        .collect())
}
