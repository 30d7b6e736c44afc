//! Datasets: CSV ingestion with a JSON schema, tabular preprocessing and
//! synthetic Gaussian blobs.
//!
//! Continuous columns are z-scored with statistics from the training file.
//! Categorical columns expand to one indicator per value seen in training
//! plus a trailing unknown slot, so unseen test values still encode.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, shape, DwacError, Result};
use crate::linalg::{decimal, Matrix};
use crate::rng::SeededRng;

/// Suffix of the indicator column that catches unseen categories.
pub const UNKNOWN_CATEGORY: &str = "<unknown>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Label,
    Continuous,
    Categorical,
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub role: ColumnRole,
}

/// Column roles and the ordered label vocabulary.
///
/// JSON form: `{"columns": [{"name": ..., "role": ...}], "label_values": [...]}`,
/// plus `"header": false` for files without a header row, whose columns are
/// then taken in schema order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
    pub label_values: Vec<String>,
    #[serde(default = "yes")]
    pub header: bool,
}

fn yes() -> bool {
    true
}

impl Schema {
    pub fn validate(&self) -> Result<()> {
        let labels = self
            .columns
            .iter()
            .filter(|c| c.role == ColumnRole::Label)
            .count();
        if labels != 1 {
            return Err(invalid(format!(
                "schema needs exactly one label column, found {labels}"
            )));
        }
        let features = self
            .columns
            .iter()
            .filter(|c| matches!(c.role, ColumnRole::Continuous | ColumnRole::Categorical))
            .count();
        if features == 0 {
            return Err(invalid("schema has no feature columns"));
        }
        if self.label_values.is_empty() {
            return Err(invalid("schema lists no label values"));
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let schema: Schema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    fn label_index(&self, raw: &str) -> Option<usize> {
        let pos = |s: &str| self.label_values.iter().position(|v| v == s);
        // some published test files end labels with a period (">50K.")
        pos(raw).or_else(|| raw.strip_suffix('.').and_then(pos))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnTransform {
    Continuous {
        name: String,
        #[serde(with = "decimal")]
        mean: f64,
        #[serde(with = "decimal")]
        std: f64,
    },
    Categorical {
        name: String,
        vocabulary: Vec<String>,
    },
}

impl ColumnTransform {
    fn width(&self) -> usize {
        match self {
            ColumnTransform::Continuous { .. } => 1,
            ColumnTransform::Categorical { vocabulary, .. } => vocabulary.len() + 1,
        }
    }
}

/// Training-split statistics: everything needed to encode further files the
/// same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub schema: Schema,
    pub transforms: Vec<ColumnTransform>,
}

impl Preprocessor {
    pub fn width(&self) -> usize {
        self.transforms.iter().map(ColumnTransform::width).sum()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.width());
        for t in &self.transforms {
            match t {
                ColumnTransform::Continuous { name, .. } => names.push(name.clone()),
                ColumnTransform::Categorical { name, vocabulary } => {
                    names.extend(vocabulary.iter().map(|v| format!("{name}={v}")));
                    names.push(format!("{name}={UNKNOWN_CATEGORY}"));
                }
            }
        }
        names
    }

    /// Fits statistics on a raw table.
    pub fn fit(schema: &Schema, table: &RawTable) -> Result<Self> {
        schema.validate()?;
        let mut transforms = Vec::new();
        for col in &schema.columns {
            let idx = table.column_index(&col.name)?;
            match col.role {
                ColumnRole::Continuous => {
                    let values = table.continuous(idx)?;
                    let n = values.len().max(1) as f64;
                    let mean = values.iter().sum::<f64>() / n;
                    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                    transforms.push(ColumnTransform::Continuous {
                        name: col.name.clone(),
                        mean,
                        std,
                    });
                }
                ColumnRole::Categorical => {
                    let mut vocabulary: Vec<String> = Vec::new();
                    for row in &table.rows {
                        let v = &row[idx];
                        if !vocabulary.contains(v) {
                            vocabulary.push(v.clone());
                        }
                    }
                    vocabulary.sort();
                    transforms.push(ColumnTransform::Categorical {
                        name: col.name.clone(),
                        vocabulary,
                    });
                }
                ColumnRole::Label | ColumnRole::Drop => {}
            }
        }
        Ok(Self {
            schema: schema.clone(),
            transforms,
        })
    }

    /// Encodes a raw table with these statistics.
    pub fn transform(&self, table: &RawTable) -> Result<Dataset> {
        let label_col = self
            .schema
            .columns
            .iter()
            .find(|c| c.role == ColumnRole::Label)
            .expect("validated schema");
        let label_idx = table.column_index(&label_col.name)?;
        let mut col_idx = Vec::with_capacity(self.transforms.len());
        for t in &self.transforms {
            let name = match t {
                ColumnTransform::Continuous { name, .. }
                | ColumnTransform::Categorical { name, .. } => name,
            };
            col_idx.push(table.column_index(name)?);
        }
        let lookups: Vec<Option<HashMap<&str, usize>>> = self
            .transforms
            .iter()
            .map(|t| match t {
                ColumnTransform::Categorical { vocabulary, .. } => Some(
                    vocabulary
                        .iter()
                        .enumerate()
                        .map(|(i, v)| (v.as_str(), i))
                        .collect(),
                ),
                ColumnTransform::Continuous { .. } => None,
            })
            .collect();

        let width = self.width();
        let mut data = Vec::with_capacity(table.rows.len() * width);
        let mut labels = Vec::with_capacity(table.rows.len());
        for (r, row) in table.rows.iter().enumerate() {
            let raw_label = &row[label_idx];
            let y = self
                .schema
                .label_index(raw_label)
                .ok_or_else(|| DwacError::Parse {
                    row: r + 1,
                    column: label_col.name.clone(),
                    message: format!("label `{raw_label}` is not among the schema's label values"),
                })?;
            labels.push(y);
            for ((t, &ci), lookup) in self.transforms.iter().zip(&col_idx).zip(&lookups) {
                match t {
                    ColumnTransform::Continuous { name, mean, std } => {
                        let v = parse_continuous(&row[ci], r, name)?;
                        data.push((v - mean) / std);
                    }
                    ColumnTransform::Categorical { vocabulary, .. } => {
                        let slot = lookup
                            .as_ref()
                            .and_then(|m| m.get(row[ci].as_str()).copied())
                            .unwrap_or(vocabulary.len());
                        let start = data.len();
                        data.resize(start + vocabulary.len() + 1, 0.0);
                        data[start + slot] = 1.0;
                    }
                }
            }
        }
        let features = Matrix::new(labels.len(), width, data)?;
        Ok(Dataset {
            features,
            labels,
            num_classes: self.schema.label_values.len(),
            feature_names: self.feature_names(),
            class_names: self.schema.label_values.clone(),
            preprocessor: Some(self.clone()),
        })
    }
}

fn parse_continuous(cell: &str, row: usize, column: &str) -> Result<f64> {
    let err = |message: String| DwacError::Parse {
        row: row + 1,
        column: column.to_string(),
        message,
    };
    if cell.is_empty() || cell == "?" {
        return Err(err("missing continuous value".into()));
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| err(format!("`{cell}` is not a number")))?;
    if !v.is_finite() {
        return Err(err(format!("`{cell}` is not finite")));
    }
    Ok(v)
}

/// A CSV file read as trimmed strings.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        Self::from_reader(file)
    }

    /// Reads `path` the way `schema` describes it.
    pub fn read_for(path: impl AsRef<Path>, schema: &Schema) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        if schema.header {
            Self::from_reader(file)
        } else {
            Self::from_headerless_reader(
                file,
                schema.columns.iter().map(|c| c.name.clone()).collect(),
            )
        }
    }

    pub fn from_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .has_headers(true)
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        Self::collect(header, rdr)
    }

    /// Rows only, named by `header`; lines starting with `|` are comments.
    pub fn from_headerless_reader(reader: impl std::io::Read, header: Vec<String>) -> Result<Self> {
        let rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .has_headers(false)
            .comment(Some(b'|'))
            .from_reader(reader);
        Self::collect(header, rdr)
    }

    fn collect<R: std::io::Read>(header: Vec<String>, mut rdr: csv::Reader<R>) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(DwacError::Parse {
                    row: i + 1,
                    column: String::new(),
                    message: format!("{} cells, header has {}", rec.len(), header.len()),
                });
            }
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Self { header, rows })
    }

    fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid(format!("column `{name}` missing from CSV header")))
    }

    fn continuous(&self, idx: usize) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| parse_continuous(&row[idx], r, &self.header[idx]))
            .collect()
    }
}

/// Features, dense labels and provenance of the encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub preprocessor: Option<Preprocessor>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(shape(
                "Dataset",
                format!("{} rows but {} labels", features.rows(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let feature_names = (0..features.cols()).map(|j| format!("x{j}")).collect();
        let class_names = (0..num_classes).map(|k| k.to_string()).collect();
        Ok(Self {
            features,
            labels,
            num_classes,
            feature_names,
            class_names,
            preprocessor: None,
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

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
            preprocessor: self.preprocessor.clone(),
        }
    }

    /// Per-class instance counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Reads a training CSV, fitting normalization and vocabularies on it.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let table = RawTable::read_for(path, schema)?;
    Preprocessor::fit(schema, &table)?.transform(&table)
}

/// Reads a further CSV (test, foreign) with statistics fitted earlier.
pub fn load_csv_with(path: impl AsRef<Path>, preprocessor: &Preprocessor) -> Result<Dataset> {
    let table = RawTable::read_for(path, &preprocessor.schema)?;
    preprocessor.transform(&table)
}

/// Cluster centers for [`make_blobs`]: when `d ≥ c` the centers are
/// `separation/√2 · e_k`, so every pair is exactly `separation` apart;
/// otherwise they sit on the first axis, `separation` apart in sequence.
pub fn blob_centers(c: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..c)
        .map(|k| {
            let mut center = vec![0.0; d];
            if c > 1 {
                if d >= c {
                    center[k] = separation / std::f64::consts::SQRT_2;
                } else {
                    center[0] = k as f64 * separation;
                }
            }
            center
        })
        .collect()
}

/// `n` points from `c` unit-variance isotropic Gaussian clusters with
/// balanced labels (instance `i` has label `i mod c`).
pub fn make_blobs(
    n: usize,
    c: usize,
    d: usize,
    separation: f64,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    if c == 0 || d == 0 {
        return Err(invalid("blobs need at least one class and one dimension"));
    }
    if n < c {
        return Err(invalid(format!("{n} points cannot cover {c} classes")));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(invalid(format!(
            "separation must be positive, got {separation}"
        )));
    }
    make_blobs_at(&blob_centers(c, d, separation), n, 1.0, rng)
}

/// `n` points around explicit centers, round-robin over the centers.
pub fn make_blobs_at(
    centers: &[Vec<f64>],
    n: usize,
    std: f64,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    let c = centers.len();
    let d = centers.first().map_or(0, Vec::len);
    if c == 0 || d == 0 || centers.iter().any(|ctr| ctr.len() != d) {
        return Err(invalid("centers must be non-empty and share a dimension"));
    }
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % c;
        for &mu in &centers[y] {
            data.push(mu + std * rng.standard_normal());
        }
        labels.push(y);
    }
    Dataset::new(Matrix::new(n, d, data)?, labels, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(cols: &[(&str, ColumnRole)], labels: &[&str]) -> Schema {
        Schema {
            columns: cols
                .iter()
                .map(|(n, r)| ColumnSpec {
                    name: n.to_string(),
                    role: *r,
                })
                .collect(),
            label_values: labels.iter().map(|s| s.to_string()).collect(),
            header: true,
        }
    }

    fn table(text: &str) -> RawTable {
        RawTable::from_reader(text.as_bytes()).unwrap()
    }

    #[test]
    fn z_score_two_points() {
        let s = schema(
            &[("x", ColumnRole::Continuous), ("y", ColumnRole::Label)],
            &["a", "b"],
        );
        let t = table("x,y\n0,a\n2,b\n");
        let ds = Preprocessor::fit(&s, &t).unwrap().transform(&t).unwrap();
        assert_eq!(ds.features.data(), &[-1.0, 1.0]);
        assert_eq!(ds.labels, vec![0, 1]);
    }

    #[test]
    fn categorical_gets_unknown_slot() {
        let s = schema(
            &[
                ("color", ColumnRole::Categorical),
                ("id", ColumnRole::Drop),
                ("y", ColumnRole::Label),
            ],
            &["no", "yes"],
        );
        let train = table("color,id,y\nred,1,no\ngreen,2,yes\nblue,3,no\n");
        let pre = Preprocessor::fit(&s, &train).unwrap();
        let ds = pre.transform(&train).unwrap();
        assert_eq!(ds.dim(), 4);
        assert_eq!(
            ds.feature_names,
            vec!["color=blue", "color=green", "color=red", "color=<unknown>"]
        );
        assert_eq!(ds.features.row(0), &[0.0, 0.0, 1.0, 0.0]);

        let test = table("color,id,y\npurple,9,yes\n");
        let enc = pre.transform(&test).unwrap();
        assert_eq!(enc.features.row(0), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn width_formula() {
        let s = schema(
            &[
                ("a", ColumnRole::Continuous),
                ("b", ColumnRole::Categorical),
                ("c", ColumnRole::Categorical),
                ("d", ColumnRole::Continuous),
                ("y", ColumnRole::Label),
            ],
            &["0", "1"],
        );
        let t = table("a,b,c,d,y\n1,x,p,3,0\n2,y,p,4,1\n3,z,q,5,1\n");
        let ds = load_from_table(&s, &t);
        // (3 + 1) + (2 + 1) + 2 continuous
        assert_eq!(ds.dim(), 9);
    }

    fn load_from_table(s: &Schema, t: &RawTable) -> Dataset {
        Preprocessor::fit(s, t).unwrap().transform(t).unwrap()
    }

    #[test]
    fn stored_stats_reproduce_training_matrix() {
        let s = schema(
            &[
                ("a", ColumnRole::Continuous),
                ("b", ColumnRole::Categorical),
                ("y", ColumnRole::Label),
            ],
            &["0", "1"],
        );
        let t = table("a,b,y\n1.5,x,0\n-2,y,1\n7,x,1\n");
        let pre = Preprocessor::fit(&s, &t).unwrap();
        let json = serde_json::to_string(&pre).unwrap();
        let back: Preprocessor = serde_json::from_str(&json).unwrap();
        assert_eq!(
            pre.transform(&t).unwrap().features,
            back.transform(&t).unwrap().features
        );
    }

    #[test]
    fn parse_errors_carry_position() {
        let s = schema(
            &[("x", ColumnRole::Continuous), ("y", ColumnRole::Label)],
            &["a"],
        );
        let t = table("x,y\n1,a\nabc,a\n");
        match Preprocessor::fit(&s, &t) {
            Err(DwacError::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "x");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let missing = table("x,y\n1,a\n,a\n");
        assert!(Preprocessor::fit(&s, &missing).is_err());
        let bad_label = table("x,y\n1,zzz\n");
        let pre = Preprocessor::fit(&s, &table("x,y\n1,a\n")).unwrap();
        assert!(pre.transform(&bad_label).is_err());
    }

    #[test]
    fn trailing_period_labels() {
        let s = schema(
            &[("x", ColumnRole::Continuous), ("y", ColumnRole::Label)],
            &["<=50K", ">50K"],
        );
        let t = table("x,y\n1,<=50K.\n2,>50K.\n");
        assert_eq!(load_from_table(&s, &t).labels, vec![0, 1]);
    }

    #[test]
    fn schema_validation() {
        assert!(schema(&[("x", ColumnRole::Continuous)], &["a"])
            .validate()
            .is_err());
        assert!(schema(&[("y", ColumnRole::Label)], &["a"])
            .validate()
            .is_err());
        let two_labels = schema(
            &[
                ("x", ColumnRole::Continuous),
                ("y", ColumnRole::Label),
                ("z", ColumnRole::Label),
            ],
            &["a"],
        );
        assert!(two_labels.validate().is_err());
    }

    #[test]
    fn blobs_balanced_and_deterministic() {
        let a = make_blobs(103, 4, 3, 5.0, &mut SeededRng::new(1)).unwrap();
        let b = make_blobs(103, 4, 3, 5.0, &mut SeededRng::new(1)).unwrap();
        assert_eq!(a, b);
        let counts = a.class_counts();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        let single = make_blobs(10, 1, 2, 1.0, &mut SeededRng::new(2)).unwrap();
        assert!(single.labels.iter().all(|&y| y == 0));
        assert!(make_blobs(2, 3, 2, 1.0, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn centers_are_separation_apart() {
        let centers = blob_centers(4, 4, 6.0);
        for i in 0..4 {
            for j in i + 1..4 {
                let d: f64 = centers[i]
                    .iter()
                    .zip(&centers[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                assert!((d.sqrt() - 6.0).abs() < 1e-12);
            }
        }
        let line = blob_centers(3, 2, 2.0);
        assert_eq!(line[2], vec![4.0, 0.0]);
    }

    #[test]
    fn separated_blobs_are_nearest_neighbor_separable() {
        let mut rng = SeededRng::new(3);
        let train = make_blobs(300, 3, 3, 10.0, &mut rng).unwrap();
        let test = make_blobs(300, 3, 3, 10.0, &mut rng).unwrap();
        let correct = (0..test.len())
            .filter(|&q| {
                let nearest = (0..train.len())
                    .min_by(|&a, &b| {
                        let da: f64 = train
                            .features
                            .row(a)
                            .iter()
                            .zip(test.features.row(q))
                            .map(|(x, y)| (x - y).powi(2))
                            .sum();
                        let db: f64 = train
                            .features
                            .row(b)
                            .iter()
                            .zip(test.features.row(q))
                            .map(|(x, y)| (x - y).powi(2))
                            .sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                train.labels[nearest] == test.labels[q]
            })
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.99);
    }

    #[test]
    fn headerless_file_with_comment_line() {
        let mut s = schema(
            &[
                ("age", ColumnRole::Continuous),
                ("income", ColumnRole::Label),
            ],
            &["<=50K", ">50K"],
        );
        s.header = false;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adult.test");
        std::fs::write(&path, "|1x3 Cross validator\n25, <=50K.\n35, >50K.\n\n").unwrap();
        let ds = load_csv(&path, &s).unwrap();
        assert_eq!(ds.labels, vec![0, 1]);
        assert_eq!(ds.features.data(), &[-1.0, 1.0]);
        let parsed: Schema =
            serde_json::from_str(r#"{"columns": [], "label_values": []}"#).unwrap();
        assert!(parsed.header);
    }
}
