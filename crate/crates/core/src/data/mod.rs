//! Dataset ingestion, weakly supervised partitioning, sharding and batching.

mod dataset;
mod sampler;
mod shard;
mod split;
pub mod synth;

use serde::{Deserialize, Serialize};

pub use dataset::{
    load_csv, write_csv, ColumnSpec, Dataset, Delimiter, ExpectedCounts, LabelMapping, MinMaxStats, Schema,
};
pub use sampler::BatchSampler;
pub use shard::{shard, DeviceShard};
pub use split::{make_split, SplitConfig, WeakSupervisionSplit};
pub use synth::SynthConfig;

/// Published size and defaults of a benchmark dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NamedDataset {
    pub name: &'static str,
    pub normal: usize,
    pub anomaly: usize,
    pub dim: usize,
    pub heads: usize,
    pub labeled_anomalies: usize,
}

pub const NAMED_DATASETS: [NamedDataset; 4] = [
    NamedDataset {
        name: "nsl-kdd",
        normal: 71_463,
        anomaly: 77_054,
        dim: 122,
        heads: 2,
        labeled_anomalies: 30,
    },
    NamedDataset {
        name: "spambase",
        normal: 2_788,
        anomaly: 1_813,
        dim: 57,
        heads: 3,
        labeled_anomalies: 30,
    },
    NamedDataset {
        name: "arrhythmia",
        normal: 386,
        anomaly: 66,
        dim: 279,
        heads: 3,
        labeled_anomalies: 15,
    },
    NamedDataset {
        name: "shuttle",
        normal: 45_586,
        anomaly: 3_511,
        dim: 9,
        heads: 3,
        labeled_anomalies: 30,
    },
];

pub fn named_dataset(name: &str) -> Option<NamedDataset> {
    NAMED_DATASETS
        .iter()
        .copied()
        .find(|d| d.name.eq_ignore_ascii_case(name))
}

/// Everything needed to replay the data side of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub dataset: String,
    pub seed: u64,
    pub rows: usize,
    pub dim: usize,
    pub split: WeakSupervisionSplit,
    pub shards: Vec<DeviceShard>,
    pub normalization: Option<MinMaxStats>,
}

impl SplitManifest {
    pub const VERSION: u32 = 1;
}

const BUILTIN_SCHEMAS: [(&str, &str); 4] = [
    ("nsl-kdd", include_str!("../../schemas/nsl-kdd.json")),
    ("spambase", include_str!("../../schemas/spambase.json")),
    ("shuttle", include_str!("../../schemas/shuttle.json")),
    ("arrhythmia", include_str!("../../schemas/arrhythmia.json")),
];

/// Schema shipped for a benchmark dataset.
pub fn builtin_schema(name: &str) -> Option<Schema> {
    BUILTIN_SCHEMAS
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, json)| serde_json::from_str(json).expect("shipped schemas are valid"))
}
