use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Stream};

/// Counts controlling the weakly supervised partition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Fraction of normal rows placed in training (floored).
    pub train_fraction: f64,
    /// Anomalies revealed with label 1.
    pub labeled_anomalies: usize,
    /// Hidden anomalies in the unlabeled pool, as a fraction of the
    /// training normals (floored).
    pub noise_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.8,
            labeled_anomalies: 30,
            noise_fraction: 0.02,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.labeled_anomalies == 0 {
            return Err(Error::Config("at least one labeled anomaly is required".into()));
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return Err(Error::Config(format!(
                "noise fraction must be in [0, 1), got {}",
                self.noise_fraction
            )));
        }
        Ok(())
    }

    pub fn noise_count(&self, train_normals: usize) -> usize {
        (self.noise_fraction * train_normals as f64).floor() as usize
    }
}

/// Row indices of a weakly supervised partition. All index sets are
/// pairwise disjoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakSupervisionSplit {
    pub seed: u64,
    /// Training normals plus the hidden noise anomalies, all treated as label 0.
    pub unlabeled: Vec<usize>,
    pub labeled: Vec<usize>,
    /// Subset of `unlabeled` whose true label is 1.
    pub noise: Vec<usize>,
    pub test: Vec<usize>,
}

impl WeakSupervisionSplit {
    /// Rows whose statistics may be used for normalisation.
    pub fn train_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.unlabeled.iter().chain(&self.labeled).copied().collect();
        rows.sort_unstable();
        rows
    }

    /// Checks disjointness and the label structure against `ds`.
    pub fn check(&self, ds: &Dataset, cfg: &SplitConfig) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &i in self.unlabeled.iter().chain(&self.labeled).chain(&self.test) {
            if i >= ds.len() || !seen.insert(i) {
                return Err(Error::Data(format!("row {i} is out of range or assigned twice")));
            }
        }
        let noise: BTreeSet<usize> = self.noise.iter().copied().collect();
        let train_normals = self.unlabeled.iter().filter(|&&i| ds.labels[i] == 0).count();
        let hidden = self.unlabeled.iter().filter(|&&i| ds.labels[i] == 1).count();
        let ok = self.labeled.len() == cfg.labeled_anomalies
            && self.labeled.iter().all(|&i| ds.labels[i] == 1)
            && self
                .noise
                .iter()
                .all(|i| self.unlabeled.contains(i) && ds.labels[*i] == 1)
            && noise.len() == hidden
            && hidden == cfg.noise_count(train_normals)
            && seen.len() == ds.len();
        if ok {
            Ok(())
        } else {
            Err(Error::Data("split violates the weak-supervision invariants".into()))
        }
    }
}

/// Weakly supervised train/test partition, deterministic in `seed`.
///
/// `⌊train_fraction·N⌋` normals go to training; `labeled_anomalies`
/// anomalies are revealed; `⌊noise_fraction·train normals⌋` further
/// anomalies are hidden in the unlabeled pool. Everything else is test.
pub fn make_split(ds: &Dataset, cfg: &SplitConfig, seed: u64) -> Result<WeakSupervisionSplit> {
    cfg.validate()?;
    let mut rng = Rng::derive(seed, Stream::Split, &[]);
    let mut normals = ds.normal_indices();
    let mut anomalies = ds.anomaly_indices();
    rng.shuffle(&mut normals);
    rng.shuffle(&mut anomalies);

    let n_train = (cfg.train_fraction * normals.len() as f64).floor() as usize;
    let n_noise = cfg.noise_count(n_train);
    // At least one anomaly must remain for evaluation.
    let needed = cfg.labeled_anomalies + n_noise + 1;
    if anomalies.len() < needed || n_train == 0 || n_train == normals.len() {
        return Err(Error::Config(format!(
            "dataset '{}' has {} normals and {} anomalies; the split needs {} anomalies and normals on both sides",
            ds.name,
            normals.len(),
            anomalies.len(),
            needed
        )));
    }

    let labeled = anomalies[..cfg.labeled_anomalies].to_vec();
    let noise = anomalies[cfg.labeled_anomalies..cfg.labeled_anomalies + n_noise].to_vec();
    let mut unlabeled: Vec<usize> = normals[..n_train].iter().chain(&noise).copied().collect();
    rng.shuffle(&mut unlabeled);
    let mut test: Vec<usize> = normals[n_train..]
        .iter()
        .chain(&anomalies[cfg.labeled_anomalies + n_noise..])
        .copied()
        .collect();
    test.sort_unstable();

    Ok(WeakSupervisionSplit {
        seed,
        unlabeled,
        labeled,
        noise,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn toy(normals: usize, anomalies: usize) -> Dataset {
        let n = normals + anomalies;
        let x = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let y = (0..n).map(|i| u8::from(i >= normals)).collect();
        Dataset::new("toy", x, y).unwrap()
    }

    #[test]
    fn paper_style_counts() {
        // 2,788 normals and 1,813 anomalies.
        let ds = toy(2788, 1813);
        let cfg = SplitConfig::default();
        let s = make_split(&ds, &cfg, 7).unwrap();
        assert_eq!(s.labeled.len(), 30);
        assert_eq!(s.noise.len(), 44); // ⌊0.02 · 2230⌋
        assert_eq!(s.unlabeled.len(), 2230 + 44);
        assert_eq!(s.test.len(), 558 + 1813 - 30 - 44);
        s.check(&ds, &cfg).unwrap();
        let train: BTreeSet<_> = s.train_rows().into_iter().collect();
        assert!(s.test.iter().all(|i| !train.contains(i)));
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = toy(500, 60);
        let cfg = SplitConfig::default();
        assert_eq!(make_split(&ds, &cfg, 1).unwrap(), make_split(&ds, &cfg, 1).unwrap());
        assert_ne!(make_split(&ds, &cfg, 1).unwrap(), make_split(&ds, &cfg, 2).unwrap());
    }

    #[test]
    fn too_few_anomalies_is_a_config_error() {
        let ds = toy(500, 30);
        assert!(matches!(
            make_split(&ds, &SplitConfig::default(), 1),
            Err(Error::Config(_))
        ));
        let small = SplitConfig {
            labeled_anomalies: 15,
            ..SplitConfig::default()
        };
        assert!(make_split(&toy(386, 66), &small, 1).is_ok());
    }
}
