use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Column role in a schema descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnSpec {
    /// `count` consecutive numeric columns.
    Numeric {
        #[serde(default)]
        name: Option<String>,
        #[serde(default = "one")]
        count: usize,
    },
    /// One-hot expanded in the order of `categories`.
    Categorical { name: String, categories: Vec<String> },
    Label {
        #[serde(default)]
        name: Option<String>,
    },
    Ignore {
        #[serde(default)]
        name: Option<String>,
        #[serde(default = "one")]
        count: usize,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMapping {
    /// Raw label values that mark an anomaly.
    #[serde(default)]
    pub anomaly: Option<Vec<String>>,
    /// Raw values that mark a normal row.
    #[serde(default)]
    pub normal: Option<Vec<String>>,
}

impl LabelMapping {
    /// With both lists, rows matching neither are dropped (`None`); with
    /// one list, every other value belongs to the other class.
    pub fn classify(&self, value: &str) -> Option<u8> {
        let has = |set: &Option<Vec<String>>| set.as_ref().map(|v| v.iter().any(|x| x == value));
        match (has(&self.anomaly), has(&self.normal)) {
            (Some(true), _) => Some(1),
            (_, Some(true)) => Some(0),
            (Some(false), None) => Some(0),
            (None, Some(false)) => Some(1),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedCounts {
    pub normal: usize,
    pub anomaly: usize,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    #[default]
    Comma,
    Space,
    Tab,
    Semicolon,
}

impl Delimiter {
    fn byte(self) -> u8 {
        match self {
            Delimiter::Comma => b',',
            Delimiter::Space => b' ',
            Delimiter::Tab => b'\t',
            Delimiter::Semicolon => b';',
        }
    }
}

/// Describes how a CSV file maps onto features and binary labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    #[serde(default)]
    pub delimiter: Delimiter,
    #[serde(default)]
    pub header: bool,
    /// Token for a missing numeric cell; such cells load as 0.
    #[serde(default)]
    pub missing: Option<String>,
    pub columns: Vec<ColumnSpec>,
    pub label: LabelMapping,
    #[serde(default)]
    pub expected: Option<ExpectedCounts>,
}

impl Schema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read schema {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    /// Number of raw CSV fields per row.
    pub fn raw_width(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                ColumnSpec::Numeric { count, .. } | ColumnSpec::Ignore { count, .. } => *count,
                _ => 1,
            })
            .sum()
    }

    /// Feature dimension after one-hot expansion.
    pub fn feature_dim(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                ColumnSpec::Numeric { count, .. } => *count,
                ColumnSpec::Categorical { categories, .. } => categories.len(),
                _ => 0,
            })
            .sum()
    }

    fn validate(&self) -> Result<()> {
        let labels = self
            .columns
            .iter()
            .filter(|c| matches!(c, ColumnSpec::Label { .. }))
            .count();
        if labels != 1 {
            return Err(Error::Schema(format!(
                "schema '{}' must declare exactly one label column, found {labels}",
                self.name
            )));
        }
        if self.label.anomaly.is_none() && self.label.normal.is_none() {
            return Err(Error::Schema(format!(
                "schema '{}' declares no label values",
                self.name
            )));
        }
        if self.feature_dim() == 0 {
            return Err(Error::Schema(format!("schema '{}' has no feature columns", self.name)));
        }
        if let Some(exp) = self.expected {
            if exp.dim != self.feature_dim() {
                return Err(Error::Schema(format!(
                    "schema '{}' expands to {} features but expects {}",
                    self.name,
                    self.feature_dim(),
                    exp.dim
                )));
            }
        }
        Ok(())
    }
}

/// Per-column min/max taken from the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxStats {
    pub fn fit(features: &Matrix, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot fit normalisation on zero rows".into()));
        }
        let d = features.cols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for &r in rows {
            for (c, &v) in features.row(r).iter().enumerate() {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        Ok(MinMaxStats { min, max })
    }

    /// `(x − min)/(max − min)`; constant columns map to 0. Values outside
    /// the training range are not clipped.
    pub fn apply(&self, features: &Matrix) -> Matrix {
        let mut out = features.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                let span = self.max[c] - self.min[c];
                *v = if span > 0.0 { (*v - self.min[c]) / span } else { 0.0 };
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub features: Matrix,
    /// 1 = anomaly.
    pub labels: Vec<u8>,
    pub normalization: Option<MinMaxStats>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Matrix, labels: Vec<u8>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        Ok(Dataset {
            name: name.into(),
            features,
            labels,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn counts(&self) -> (usize, usize) {
        let anomalies = self.labels.iter().filter(|&&y| y == 1).count();
        (self.len() - anomalies, anomalies)
    }

    pub fn normal_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == 0).collect()
    }

    pub fn anomaly_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == 1).collect()
    }

    /// Min-max normalised copy using statistics of `train_rows` only.
    pub fn normalized(&self, train_rows: &[usize]) -> Result<Dataset> {
        let stats = MinMaxStats::fit(&self.features, train_rows)?;
        Ok(Dataset {
            name: self.name.clone(),
            features: stats.apply(&self.features),
            labels: self.labels.clone(),
            normalization: Some(stats),
        })
    }
}

/// Parses `path` according to `schema`.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    schema.validate()?;
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter.byte())
        .has_headers(schema.header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let width = schema.raw_width();
    let dim = schema.feature_dim();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut row_buf = Vec::with_capacity(dim);

    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(i + 1, |p| p.line() as usize),
            column: 0,
            message: e.to_string(),
        })?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        // Tolerate a trailing delimiter and blank lines.
        let fields: Vec<&str> = record.iter().collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        let fields: Vec<&str> = if schema.delimiter == Delimiter::Space {
            fields.into_iter().filter(|f| !f.is_empty()).collect()
        } else if fields.len() == width + 1 && fields[width].is_empty() {
            fields[..width].to_vec()
        } else {
            fields
        };
        if fields.len() != width {
            return Err(Error::Schema(format!(
                "line {line}: expected {width} fields, found {}",
                fields.len()
            )));
        }
        row_buf.clear();
        let mut label_value = "";
        let mut col = 0;
        for spec in &schema.columns {
            match spec {
                ColumnSpec::Numeric { count, .. } => {
                    for _ in 0..*count {
                        let cell = fields[col];
                        let v = if schema.missing.as_deref() == Some(cell) {
                            0.0
                        } else {
                            cell.parse::<f64>()
                                .ok()
                                .filter(|v| v.is_finite())
                                .ok_or_else(|| Error::Parse {
                                    line,
                                    column: col + 1,
                                    message: format!("'{cell}' is not a finite number"),
                                })?
                        };
                        row_buf.push(v);
                        col += 1;
                    }
                }
                ColumnSpec::Categorical { name, categories } => {
                    let cell = fields[col];
                    let hit = categories.iter().position(|c| c == cell).ok_or_else(|| Error::Parse {
                        line,
                        column: col + 1,
                        message: format!("unknown category '{cell}' for column '{name}'"),
                    })?;
                    row_buf.extend((0..categories.len()).map(|k| if k == hit { 1.0 } else { 0.0 }));
                    col += 1;
                }
                ColumnSpec::Label { .. } => {
                    label_value = fields[col];
                    col += 1;
                }
                ColumnSpec::Ignore { count, .. } => col += count,
            }
        }
        let Some(y) = schema.label.classify(label_value) else {
            continue;
        };
        data.extend_from_slice(&row_buf);
        labels.push(y);
    }

    let features = Matrix::from_vec(labels.len(), dim, data)?;
    let ds = Dataset::new(schema.name.clone(), features, labels)?;
    if let Some(exp) = schema.expected {
        let (n, a) = ds.counts();
        if (n, a, ds.dim()) != (exp.normal, exp.anomaly, exp.dim) {
            return Err(Error::Schema(format!(
                "{}: loaded {n} normal / {a} anomalous rows with {} features, schema expects {} / {} with {}",
                schema.name,
                ds.dim(),
                exp.normal,
                exp.anomaly,
                exp.dim
            )));
        }
    }
    Ok(ds)
}

/// Writes features followed by a `0`/`1` label column, no header.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut fields = Vec::with_capacity(ds.dim() + 1);
    for r in 0..ds.len() {
        fields.clear();
        fields.extend(ds.features.row(r).iter().map(|v| v.to_string()));
        fields.push(ds.labels[r].to_string());
        w.write_record(&fields).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema_json() -> &'static str {
        r#"{
            "name": "toy",
            "columns": [
                {"kind": "numeric", "count": 2},
                {"kind": "categorical", "name": "proto", "categories": ["tcp", "udp"]},
                {"kind": "label"},
                {"kind": "ignore"}
            ],
            "label": {"normal": ["normal"]}
        }"#
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn toy_csv_loads() {
        let schema: Schema = serde_json::from_str(schema_json()).unwrap();
        let f = write("1.0,2.0,tcp,normal,7\n3,4,udp,attack,7\n5,6,tcp,attack,1\n");
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.features.shape(), (3, 4));
        assert_eq!(ds.labels, vec![0, 1, 1]);
        assert_eq!(ds.features.row(1), &[3.0, 4.0, 0.0, 1.0]);
    }

    #[test]
    fn write_then_load_round_trips() {
        let x = Matrix::from_rows(&[[0.1, -2.5], [1e-17, 3.0]]).unwrap();
        let ds = Dataset::new("w", x, vec![0, 1]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, f.path()).unwrap();
        let schema: Schema = serde_json::from_str(
            r#"{"name": "w", "columns": [{"kind": "numeric", "count": 2}, {"kind": "label"}], "label": {"anomaly": ["1"], "normal": ["0"]}}"#,
        )
        .unwrap();
        let back = load_csv(f.path(), &schema).unwrap();
        assert_eq!(back.features, ds.features);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn bad_cell_reports_position() {
        let schema: Schema = serde_json::from_str(schema_json()).unwrap();
        let f = write("1.0,2.0,tcp,normal,7\n3,abc,udp,attack,7\n");
        match load_csv(f.path(), &schema) {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(column, 2);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = write("1.0,2.0,icmp,normal,7\n");
        assert!(matches!(
            load_csv(f.path(), &schema),
            Err(Error::Parse { column: 3, .. })
        ));
    }

    #[test]
    fn width_and_expected_counts_enforced() {
        let schema: Schema = serde_json::from_str(schema_json()).unwrap();
        let f = write("1.0,2.0,tcp,normal\n");
        assert!(matches!(load_csv(f.path(), &schema), Err(Error::Schema(_))));
        let mut strict = schema.clone();
        strict.expected = Some(ExpectedCounts {
            normal: 5,
            anomaly: 1,
            dim: 4,
        });
        let f = write("1.0,2.0,tcp,normal,7\n");
        assert!(matches!(load_csv(f.path(), &strict), Err(Error::Schema(_))));
    }

    #[test]
    fn explicit_normal_set_drops_other_rows() {
        let schema: Schema = serde_json::from_str(
            r#"{"name": "s", "delimiter": "space", "columns": [{"kind": "numeric", "count": 2}, {"kind": "label"}],
                "label": {"anomaly": ["2", "3"], "normal": ["1"]}}"#,
        )
        .unwrap();
        let f = write("1 2 1\n3  4 4\n5 6 3\n");
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.labels, vec![0, 1]);
    }

    #[test]
    fn single_list_label_mappings() {
        let only_anomaly = LabelMapping {
            anomaly: Some(vec!["3".into()]),
            normal: None,
        };
        assert_eq!(only_anomaly.classify("3"), Some(1));
        assert_eq!(only_anomaly.classify("1"), Some(0));
        let only_normal = LabelMapping {
            anomaly: None,
            normal: Some(vec!["normal".into()]),
        };
        assert_eq!(only_normal.classify("neptune"), Some(1));
        assert_eq!(only_normal.classify("normal"), Some(0));
    }

    #[test]
    fn normalisation_uses_training_rows_only() {
        let x = Matrix::from_rows(&[[0.0, 5.0], [10.0, 5.0], [20.0, 5.0], [100.0, 7.0]]).unwrap();
        let ds = Dataset::new("t", x, vec![0, 0, 1, 1]).unwrap();
        let n = ds.normalized(&[0, 1]).unwrap();
        let stats = n.normalization.as_ref().unwrap();
        assert_eq!(stats.min, vec![0.0, 5.0]);
        assert_eq!(stats.max, vec![10.0, 5.0]);
        assert_eq!(n.features.row(1), &[1.0, 0.0]);
        // Held-out rows are transformed, not refitted.
        assert_eq!(n.features.row(3), &[10.0, 0.0]);
        assert!(n
            .features
            .row(0)
            .iter()
            .chain(n.features.row(1))
            .all(|v| (0.0..=1.0).contains(v)));
    }
}
