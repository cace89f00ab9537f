//! Desk-scale stand-in for multi-site histology feature banks: a Gaussian
//! class mixture split across clients.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::FeatureBank;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub dim: usize,
    pub classes: usize,
    /// Samples per client; the number of clients is `sizes.len()`.
    pub sizes: Vec<usize>,
    pub test_size: usize,
    /// Pairwise Euclidean distance between class means (noise has unit
    /// variance per coordinate).
    pub separation: f64,
    /// Norm of a per-client offset added to every feature of that client,
    /// modelling site-specific acquisition shift. Zero gives IID clients.
    #[serde(default)]
    pub client_shift: f64,
}

impl SyntheticSpec {
    pub fn new(seed: u64, dim: usize, classes: usize, sizes: Vec<usize>, separation: f64) -> Self {
        let test_size = (sizes.iter().sum::<usize>() * 3 / 7).max(classes);
        Self {
            seed,
            dim,
            classes,
            sizes,
            test_size,
            separation,
            client_shift: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFederation {
    pub clients: Vec<FeatureBank>,
    pub test: FeatureBank,
}

pub fn gen_synthetic_federation(spec: &SyntheticSpec) -> Result<SyntheticFederation> {
    if spec.sizes.is_empty() {
        return Err(Error::invalid("need at least one client"));
    }
    if spec.classes < 2 || spec.dim == 0 {
        return Err(Error::invalid("need dim >= 1 and at least 2 classes"));
    }
    if let Some(&s) = spec.sizes.iter().find(|&&s| s < spec.classes) {
        return Err(Error::invalid(format!(
            "client size {s} cannot hold all {} classes",
            spec.classes
        )));
    }
    if !(spec.separation.is_finite() && spec.separation >= 0.0) {
        return Err(Error::invalid("separation must be finite and non-negative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(&mut rng, spec.dim, spec.classes, spec.separation);

    let mut clients = Vec::with_capacity(spec.sizes.len());
    for (k, &size) in spec.sizes.iter().enumerate() {
        let shift = random_direction(&mut rng, spec.dim) * spec.client_shift;
        let mut labels: Vec<u32> = (0..spec.classes as u32).collect();
        labels.extend((spec.classes..size).map(|_| rng.random_range(0..spec.classes as u32)));
        labels.shuffle(&mut rng);
        let bank = draw(&mut rng, &means, &shift, labels, format!("client-{k:02}"), spec.classes)?;
        clients.push(bank);
    }

    let zero = DVector::zeros(spec.dim);
    let labels = (0..spec.test_size)
        .map(|_| rng.random_range(0..spec.classes as u32))
        .collect();
    let test = draw(&mut rng, &means, &zero, labels, "test".into(), spec.classes)?;
    Ok(SyntheticFederation { clients, test })
}

fn class_means(rng: &mut ChaCha8Rng, dim: usize, classes: usize, separation: f64) -> Vec<DVector<f64>> {
    // Scaled basis vectors are exactly `separation` apart; with more classes
    // than dimensions fall back to random directions.
    let radius = separation / std::f64::consts::SQRT_2;
    (0..classes)
        .map(|c| {
            if classes <= dim {
                let mut m = DVector::zeros(dim);
                m[c] = radius;
                m
            } else {
                random_direction(rng, dim) * radius
            }
        })
        .collect()
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

fn draw(
    rng: &mut ChaCha8Rng,
    means: &[DVector<f64>],
    shift: &DVector<f64>,
    labels: Vec<u32>,
    client_id: String,
    classes: usize,
) -> Result<FeatureBank> {
    let dim = shift.len();
    let mut x = DMatrix::zeros(labels.len(), dim);
    for (i, &l) in labels.iter().enumerate() {
        let m = &means[l as usize];
        for j in 0..dim {
            x[(i, j)] = m[j] + shift[j] + rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(FeatureBank::new(client_id, classes, x, labels)?.with_backbone("synthetic-gaussian"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::encode_bank;

    fn spec(sep: f64) -> SyntheticSpec {
        SyntheticSpec::new(1, 16, 4, vec![60, 40, 30], sep)
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_synthetic_federation(&spec(6.0)).unwrap();
        let b = gen_synthetic_federation(&spec(6.0)).unwrap();
        for (x, y) in a.clients.iter().zip(&b.clients) {
            assert_eq!(encode_bank(x).unwrap(), encode_bank(y).unwrap());
        }
        assert_eq!(encode_bank(&a.test).unwrap(), encode_bank(&b.test).unwrap());
        let mut other = spec(6.0);
        other.seed = 2;
        let c = gen_synthetic_federation(&other).unwrap();
        assert_ne!(c.clients[0].features(), a.clients[0].features());
    }

    #[test]
    fn every_client_sees_every_class() {
        let mut s = spec(6.0);
        s.sizes = vec![4, 4, 5];
        let fed = gen_synthetic_federation(&s).unwrap();
        for c in &fed.clients {
            assert!(c.class_counts().iter().all(|&n| n >= 1));
        }
        assert_eq!(fed.clients.iter().map(FeatureBank::len).collect::<Vec<_>>(), vec![4, 4, 5]);
    }

    #[test]
    fn undersized_client_rejected() {
        let mut s = spec(6.0);
        s.sizes = vec![3];
        assert!(matches!(gen_synthetic_federation(&s), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn class_means_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (dim, classes) in [(16, 4), (2, 5)] {
            let m = class_means(&mut rng, dim, classes, 6.0);
            if classes <= dim {
                for a in 0..classes {
                    for b in 0..a {
                        assert!(((&m[a] - &m[b]).norm() - 6.0).abs() < 1e-12);
                    }
                }
            }
            assert_eq!(m.len(), classes);
        }
    }
}
