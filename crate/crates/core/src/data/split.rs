use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{Condition, DatasetManifest, Split};
use crate::error::{Error, Result};

/// Train / val / test fractions.
pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Partition sizes `(train, val, test)` for a stratum of `n` items.
///
/// Val and test are rounded to nearest with exact halves going down, and
/// whatever remains goes to train. Each part lands within one item of its
/// exact share.
pub fn partition_sizes(n: usize, ratios: [f64; 3]) -> (usize, usize, usize) {
    let part = |r: f64| ((n as f64 * r) + 0.5 - 1e-9).floor().max(0.0) as usize;
    let val = part(ratios[1]).min(n);
    let test = part(ratios[2]).min(n - val);
    (n - val - test, val, test)
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::InvalidArgument(format!("split ratios out of range: {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Seeded stratified assignment of `keys.len()` items.
///
/// Items are grouped by key; each group is shuffled (groups visited in key
/// order, one RNG stream) and cut into train, val and test.
pub fn stratified_split<K: Ord + Clone>(keys: &[K], ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    check_ratios(ratios)?;
    if keys.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let mut strata: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        strata.entry(k.clone()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::None; keys.len()];
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let (train, val, _) = partition_sizes(members.len(), ratios);
        for (j, &i) in members.iter().enumerate() {
            out[i] = if j < train {
                Split::Train
            } else if j < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}

/// Tags every record, stratifying by its dominant condition class.
pub fn split_manifest(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    let keys: Vec<Option<Condition>> = manifest.records.iter().map(|r| r.dominant_condition()).collect();
    let tags = stratified_split(&keys, ratios, seed)?;
    let mut out = manifest.clone();
    for (r, t) in out.records.iter_mut().zip(tags) {
        r.split = t;
    }
    Ok(out)
}
