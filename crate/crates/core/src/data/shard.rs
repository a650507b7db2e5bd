use serde::{Deserialize, Serialize};

use super::WeakSupervisionSplit;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Stream};

/// One device's slice of every pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceShard {
    pub device: u16,
    pub unlabeled: Vec<usize>,
    pub labeled: Vec<usize>,
    pub test: Vec<usize>,
}

impl DeviceShard {
    /// Local sample count `n_k` used for FedAvg weighting.
    pub fn train_len(&self) -> usize {
        self.unlabeled.len() + self.labeled.len()
    }
}

fn equal_parts(mut pool: Vec<usize>, k: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    rng.shuffle(&mut pool);
    let base = pool.len() / k;
    let extra = pool.len() % k;
    let mut parts = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        parts.push(pool[start..start + len].to_vec());
        start += len;
    }
    parts
}

/// Sizes from `Dir(α)` proportions with one guaranteed item per part,
/// rounded by largest remainder.
fn dirichlet_sizes(total: usize, k: usize, alpha: f64, rng: &mut Rng) -> Vec<usize> {
    let draws: Vec<f64> = (0..k).map(|_| rng.gamma(alpha).max(1e-300)).collect();
    let sum: f64 = draws.iter().sum();
    let free = total - k;
    let quotas: Vec<f64> = draws.iter().map(|g| g / sum * free as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    let short = free - sizes.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        sizes[i] += 1;
    }
    sizes.iter().map(|s| s + 1).collect()
}

/// Splits each pool across `k` devices.
///
/// By default every pool is cut into near-equal disjoint parts (sizes
/// differ by at most one). With `dirichlet_alpha = Some(α)` the labeled
/// anomalies are instead distributed with `Dir(α)` proportions, which skews
/// the anomaly share per device.
pub fn shard(
    split: &WeakSupervisionSplit,
    k: usize,
    seed: u64,
    dirichlet_alpha: Option<f64>,
) -> Result<Vec<DeviceShard>> {
    if k == 0 || k > u16::MAX as usize {
        return Err(Error::Config(format!("device count must be in 1..=65535, got {k}")));
    }
    let smallest = split.unlabeled.len().min(split.labeled.len()).min(split.test.len());
    if k > smallest {
        return Err(Error::Config(format!(
            "{k} devices but the smallest pool has only {smallest} rows"
        )));
    }
    let mut rng = Rng::derive(seed, Stream::Shard, &[]);
    let unlabeled = equal_parts(split.unlabeled.clone(), k, &mut rng);
    let test = equal_parts(split.test.clone(), k, &mut rng);
    let labeled = match dirichlet_alpha {
        None => equal_parts(split.labeled.clone(), k, &mut rng),
        Some(alpha) => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::Config(format!("Dirichlet alpha must be > 0, got {alpha}")));
            }
            let mut pool = split.labeled.clone();
            rng.shuffle(&mut pool);
            let sizes = dirichlet_sizes(pool.len(), k, alpha, &mut rng);
            let mut start = 0;
            sizes
                .into_iter()
                .map(|len| {
                    let part = pool[start..start + len].to_vec();
                    start += len;
                    part
                })
                .collect()
        }
    };
    Ok(unlabeled
        .into_iter()
        .zip(labeled)
        .zip(test)
        .enumerate()
        .map(|(i, ((unlabeled, labeled), test))| DeviceShard {
            device: i as u16,
            unlabeled,
            labeled,
            test,
        })
        .collect())
}
