use serde::{Deserialize, Serialize};

use super::{ColumnSpec, Dataset, ExpectedCounts, LabelMapping, Schema};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Stream};

/// Gaussian-cluster normals plus uniform outliers in `[0, 1]^d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    pub normals: usize,
    pub anomalies: usize,
    pub clusters: usize,
    /// Cluster centres are drawn from `[0.25, 0.75]^d`.
    pub cluster_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 20,
            normals: 5000,
            anomalies: 200,
            clusters: 2,
            cluster_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn cluster_centres(&self) -> Matrix {
        let mut rng = Rng::derive(self.seed, Stream::Synthetic, &[0]);
        let mut c = Matrix::zeros(self.clusters, self.dim);
        for v in c.data_mut() {
            *v = rng.uniform_range(0.25, 0.75);
        }
        c
    }
}

/// Rows are ordered normals first, then anomalies.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.dim == 0 || cfg.clusters == 0 || cfg.normals == 0 || !(cfg.cluster_std >= 0.0) {
        return Err(Error::Config(
            "synthetic data needs dim, clusters and normals > 0".into(),
        ));
    }
    let centres = cfg.cluster_centres();
    let mut rng = Rng::derive(cfg.seed, Stream::Synthetic, &[1]);
    let n = cfg.normals + cfg.anomalies;
    let mut x = Matrix::zeros(n, cfg.dim);
    for r in 0..cfg.normals {
        let c = centres.row(r % cfg.clusters).to_vec();
        for (v, mu) in x.row_mut(r).iter_mut().zip(c) {
            *v = mu + cfg.cluster_std * rng.standard_normal();
        }
    }
    for r in cfg.normals..n {
        for v in x.row_mut(r) {
            *v = rng.uniform();
        }
    }
    let labels = (0..n).map(|i| u8::from(i >= cfg.normals)).collect();
    Dataset::new("synthetic", x, labels)
}

/// Schema for a generated dataset written with [`super::write_csv`].
pub fn schema(cfg: &SynthConfig) -> Schema {
    Schema {
        name: "synthetic".into(),
        delimiter: Default::default(),
        header: false,
        missing: None,
        columns: vec![
            ColumnSpec::Numeric {
                name: None,
                count: cfg.dim,
            },
            ColumnSpec::Label { name: None },
        ],
        label: LabelMapping {
            anomaly: Some(vec!["1".into()]),
            normal: Some(vec!["0".into()]),
        },
        expected: Some(ExpectedCounts {
            normal: cfg.normals,
            anomaly: cfg.anomalies,
            dim: cfg.dim,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_labels() {
        let cfg = SynthConfig {
            normals: 300,
            anomalies: 20,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.features.shape(), (320, 20));
        assert_eq!(ds.counts(), (300, 20));
        assert!(ds.features.row(310).iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn normals_concentrate_around_centres() {
        let cfg = SynthConfig {
            normals: 2000,
            anomalies: 0,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let c = cfg.cluster_centres();
        let mut mean = vec![0.0; cfg.dim];
        let mut count = 0.0;
        for r in (0..2000).step_by(2) {
            for (m, v) in mean.iter_mut().zip(ds.features.row(r)) {
                *m += v;
            }
            count += 1.0;
        }
        for (m, mu) in mean.iter().zip(c.row(0)) {
            assert!((m / count - mu).abs() < 0.01);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig {
            normals: 50,
            anomalies: 5,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap().features, generate(&cfg).unwrap().features);
    }
}
