//! Flow-feature CSV ingestion and cleaning.
//!
//! Cells that are empty, non-numeric, or infinite are kept as `NaN` and the
//! record is flagged incomplete; [`clean`] then removes duplicates, incomplete
//! records and constant columns, in that order.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column/label configuration, optionally loaded from a JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowSchema {
    pub label_column: String,
    /// Feature subset and order. `None` uses every non-label, non-excluded column.
    pub features: Option<Vec<String>>,
    /// Columns ignored when `features` is not pinned (identifiers, timestamps).
    pub exclude: Vec<String>,
    /// Class-name ordering. `None` orders classes by case-folded name.
    pub classes: Option<Vec<String>>,
}

impl Default for FlowSchema {
    fn default() -> Self {
        FlowSchema {
            label_column: "Label".to_string(),
            features: None,
            exclude: Vec::new(),
            classes: None,
        }
    }
}

impl FlowSchema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    /// Feature values in column order; unusable cells are `NaN`.
    pub features: Vec<f64>,
    pub label: usize,
    /// False when any cell was missing, non-numeric or infinite.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTable {
    pub records: Vec<FlowRecord>,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    /// Per-column minimum over complete records (0 when there are none).
    pub per_column_min: Vec<f64>,
    pub per_column_max: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub duplicates_removed: usize,
    pub incomplete_removed: usize,
    pub constant_columns_removed: Vec<String>,
}

impl CleanReport {
    pub fn is_noop(&self) -> bool {
        self.duplicates_removed == 0
            && self.incomplete_removed == 0
            && self.constant_columns_removed.is_empty()
    }
}

fn fold_label(label: &str) -> String {
    label.trim().to_lowercase()
}

fn parse_cell(cell: &str) -> f64 {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => v,
        _ => f64::NAN,
    }
}

impl FlowTable {
    pub fn new(
        records: Vec<FlowRecord>,
        feature_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let width = feature_names.len();
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != width {
                return Err(Error::Schema(format!(
                    "record {i} has {} features, expected {width}",
                    r.features.len()
                )));
            }
            if r.label >= class_names.len() {
                return Err(Error::Schema(format!(
                    "record {i} has label {} but only {} classes are declared",
                    r.label,
                    class_names.len()
                )));
            }
        }
        let (per_column_min, per_column_max) = column_stats(&records, width);
        Ok(FlowTable {
            records,
            feature_names,
            class_names,
            per_column_min,
            per_column_max,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Writes the table as CSV with the label in a trailing `Label` column.
    /// Incomplete cells are written empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let to_err = |e: csv::Error| Error::Format(format!("csv write: {e}"));
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push("Label");
        w.write_record(&header).map_err(to_err)?;
        for r in &self.records {
            let mut row: Vec<String> = r
                .features
                .iter()
                .map(|v| if v.is_finite() { format!("{v}") } else { String::new() })
                .collect();
            row.push(self.class_names[r.label].clone());
            w.write_record(&row).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::Format(format!("csv write: {e}")))?;
        Ok(())
    }
}

fn column_stats(records: &[FlowRecord], width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; width];
    let mut hi = vec![f64::NEG_INFINITY; width];
    for r in records.iter().filter(|r| r.complete) {
        for (j, &v) in r.features.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    for j in 0..width {
        if lo[j] > hi[j] {
            lo[j] = 0.0;
            hi[j] = 0.0;
        }
    }
    (lo, hi)
}

/// Parses a header-bearing CSV stream into a [`FlowTable`].
///
/// Row numbers in errors are 1-based file line numbers (the header is line 1).
pub fn parse_flows<R: Read>(source: R, schema: &FlowSchema) -> Result<FlowTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Schema("missing header row".into()));
    }

    let wanted_label = schema.label_column.trim().to_lowercase();
    let label_idx = header
        .iter()
        .position(|h| h.to_lowercase() == wanted_label)
        .ok_or_else(|| {
            Error::Schema(format!("label column '{}' not found", schema.label_column))
        })?;

    let feature_idx: Vec<usize> = match &schema.features {
        Some(names) => names
            .iter()
            .map(|n| {
                header
                    .iter()
                    .position(|h| h == n.trim())
                    .ok_or_else(|| Error::Schema(format!("feature column '{n}' not found")))
            })
            .collect::<Result<_>>()?,
        None => {
            let excluded: HashSet<&str> = schema.exclude.iter().map(|s| s.trim()).collect();
            (0..header.len())
                .filter(|&i| i != label_idx && !excluded.contains(header[i].as_str()))
                .collect()
        }
    };
    let feature_names: Vec<String> = feature_idx.iter().map(|&i| header[i].clone()).collect();

    let mut raw: Vec<(Vec<f64>, String, u64)> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            row: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != header.len() {
            return Err(Error::Parse {
                row: line,
                message: format!("expected {} columns, found {}", header.len(), row.len()),
            });
        }
        let features = feature_idx.iter().map(|&i| parse_cell(&row[i])).collect();
        raw.push((features, row[label_idx].trim().to_string(), line));
    }

    let (class_names, class_of) = resolve_classes(&raw, schema)?;
    let records = raw
        .into_iter()
        .map(|(features, label, line)| {
            let label = *class_of.get(&fold_label(&label)).ok_or_else(|| {
                Error::Schema(format!("row {line}: label '{label}' not in declared classes"))
            })?;
            let complete = features.iter().all(|v: &f64| v.is_finite());
            Ok(FlowRecord {
                features,
                label,
                complete,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    FlowTable::new(records, feature_names, class_names)
}

type ClassIndex = BTreeMap<String, usize>;

fn resolve_classes(
    raw: &[(Vec<f64>, String, u64)],
    schema: &FlowSchema,
) -> Result<(Vec<String>, ClassIndex)> {
    if let Some(declared) = &schema.classes {
        let mut index = ClassIndex::new();
        for (i, name) in declared.iter().enumerate() {
            if index.insert(fold_label(name), i).is_some() {
                return Err(Error::Schema(format!("class '{name}' declared twice")));
            }
        }
        let names = declared.iter().map(|s| s.trim().to_string()).collect();
        return Ok((names, index));
    }
    // Folded key -> smallest original spelling, so the naming does not depend
    // on record order.
    let mut spelling: BTreeMap<String, String> = BTreeMap::new();
    for (_, label, _) in raw {
        let entry = spelling.entry(fold_label(label)).or_insert_with(|| label.clone());
        if label < entry {
            *entry = label.clone();
        }
    }
    let index = spelling.keys().enumerate().map(|(i, k)| (k.clone(), i)).collect();
    Ok((spelling.into_values().collect(), index))
}

/// Removes duplicates, then incomplete records, then constant columns.
pub fn clean(table: &FlowTable) -> Result<(FlowTable, CleanReport)> {
    let mut report = CleanReport::default();

    let mut seen: HashSet<(usize, Vec<u64>)> = HashSet::with_capacity(table.len());
    let mut kept: Vec<&FlowRecord> = Vec::with_capacity(table.len());
    for r in &table.records {
        let key = (r.label, r.features.iter().map(|v| v.to_bits()).collect());
        if seen.insert(key) {
            kept.push(r);
        } else {
            report.duplicates_removed += 1;
        }
    }

    let before = kept.len();
    kept.retain(|r| r.complete);
    report.incomplete_removed = before - kept.len();

    if kept.is_empty() {
        return Err(Error::DegenerateDataset(
            "no records left after removing duplicates and incomplete rows".into(),
        ));
    }

    let keep_cols: Vec<usize> = (0..table.feature_count())
        .filter(|&j| {
            let first = kept[0].features[j];
            let constant = kept.iter().all(|r| r.features[j] == first);
            if constant {
                report
                    .constant_columns_removed
                    .push(table.feature_names[j].clone());
            }
            !constant
        })
        .collect();
    if keep_cols.is_empty() {
        return Err(Error::DegenerateDataset(
            "every feature column is constant after cleaning".into(),
        ));
    }

    let records = kept
        .into_iter()
        .map(|r| FlowRecord {
            features: keep_cols.iter().map(|&j| r.features[j]).collect(),
            label: r.label,
            complete: true,
        })
        .collect();
    let feature_names = keep_cols
        .iter()
        .map(|&j| table.feature_names[j].clone())
        .collect();
    let cleaned = FlowTable::new(records, feature_names, table.class_names.clone())?;
    Ok((cleaned, report))
}
