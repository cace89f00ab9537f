//! Seeded, class-stratified splitting of feature banks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FeatureBank;
use crate::error::{Error, Result};

/// Row indices of each class, shuffled with `seed`.
fn shuffled_by_class(bank: &FeatureBank, seed: u64) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); bank.num_classes()];
    for (i, &l) in bank.labels().iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }
    by_class
}

/// Largest-remainder apportionment of `target` items over classes, with
/// per-class bounds `lo[j] <= t[j] <= hi[j]`. When the bounds make `target`
/// unreachable the closest feasible total is returned.
fn apportion(counts: &[usize], target: usize, lo: &[usize], hi: &[usize]) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return vec![0; counts.len()];
    }
    let quota: Vec<f64> = counts
        .iter()
        .map(|&c| target as f64 * c as f64 / n as f64)
        .collect();
    let mut take: Vec<usize> = quota
        .iter()
        .enumerate()
        .map(|(j, q)| (q.floor() as usize).clamp(lo[j], hi[j]))
        .collect();

    let mut total: usize = take.iter().sum();
    while total < target {
        let pick = (0..counts.len())
            .filter(|&j| take[j] < hi[j])
            .max_by(|&a, &b| {
                let (ra, rb) = (quota[a] - take[a] as f64, quota[b] - take[b] as f64);
                ra.total_cmp(&rb).then(b.cmp(&a))
            });
        match pick {
            Some(j) => take[j] += 1,
            None => break,
        }
        total += 1;
    }
    while total > target {
        let pick = (0..counts.len())
            .filter(|&j| take[j] > lo[j])
            .min_by(|&a, &b| {
                let (ra, rb) = (quota[a] - take[a] as f64, quota[b] - take[b] as f64);
                ra.total_cmp(&rb).then(a.cmp(&b))
            });
        match pick {
            Some(j) => take[j] -= 1,
            None => break,
        }
        total -= 1;
    }
    take
}

/// Stratified train/test split. The train side receives `round(ratio · n)`
/// rows apportioned over classes; a class with at least two samples keeps at
/// least one on each side, and a singleton class goes to train.
pub fn split_train_test(bank: &FeatureBank, ratio: f64, seed: u64) -> Result<(FeatureBank, FeatureBank)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let by_class = shuffled_by_class(bank, seed);
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let lo: Vec<usize> = counts.iter().map(|&c| c.min(1)).collect();
    let hi: Vec<usize> = counts.iter().map(|&c| if c >= 2 { c - 1 } else { c }).collect();
    let target = (ratio * bank.len() as f64).round() as usize;
    let take = apportion(&counts, target, &lo, &hi);

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (idx, &t) in by_class.iter().zip(&take) {
        train.extend_from_slice(&idx[..t]);
        test.extend_from_slice(&idx[t..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((bank.select(&train), bank.select(&test)))
}

/// Stratified subsample of `ceil(proportion · n)` rows, keeping at least one
/// row of every class present. A proportion of 1 returns the bank unchanged.
pub fn subsample(bank: &FeatureBank, proportion: f64, seed: u64) -> Result<FeatureBank> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::invalid(format!("proportion {proportion} must lie in (0, 1]")));
    }
    if bank.is_empty() {
        return Err(Error::invalid(format!(
            "proportion {proportion} of empty bank {} yields zero samples",
            bank.client_id()
        )));
    }
    if proportion == 1.0 {
        return Ok(bank.clone());
    }
    let by_class = shuffled_by_class(bank, seed);
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let lo: Vec<usize> = counts.iter().map(|&c| c.min(1)).collect();
    // Guard against 0.3 * 10 landing a hair above 3.
    let target = (proportion * bank.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    let take = apportion(&counts, target, &lo, &counts);

    let mut rows: Vec<usize> = by_class
        .iter()
        .zip(&take)
        .flat_map(|(idx, &t)| idx[..t].iter().copied())
        .collect();
    rows.sort_unstable();
    Ok(bank.select(&rows))
}

/// Splits a bank into `parts` disjoint child banks, dealing each class's
/// rows round-robin so that every child holds every class present in the
/// parent. Children are named `<parent>-<i>`.
pub fn partition_stratified(bank: &FeatureBank, parts: usize, seed: u64) -> Result<Vec<FeatureBank>> {
    if parts == 0 {
        return Err(Error::invalid("cannot partition into zero parts"));
    }
    if parts == 1 {
        return Ok(vec![bank.clone()]);
    }
    let by_class = shuffled_by_class(bank, seed);
    if let Some((c, idx)) = by_class
        .iter()
        .enumerate()
        .find(|(_, idx)| !idx.is_empty() && idx.len() < parts)
    {
        return Err(Error::invalid(format!(
            "class {c} of bank {} has {} samples, too few for {parts} child banks",
            bank.client_id(),
            idx.len()
        )));
    }
    let mut children = vec![Vec::new(); parts];
    let mut start = 0;
    for idx in &by_class {
        for (i, &row) in idx.iter().enumerate() {
            children[(start + i) % parts].push(row);
        }
        start = (start + idx.len()) % parts;
    }
    Ok(children
        .into_iter()
        .enumerate()
        .map(|(i, mut rows)| {
            rows.sort_unstable();
            bank.select(&rows)
                .with_client_id(format!("{}-{i:02}", bank.client_id()))
        })
        .collect())
}
