//! Timeline ingest: CSV parsing, label vocabulary and missing-modality imputation.
//!
//! A CSV file carries one row per window. Columns are `timestamp`, `user_id`,
//! feature columns `f:<modality>:<k>` and label columns `label:<phrase>`.
//! Empty feature cells are missing; a modality with at least half of its cells
//! empty in a row is treated as missing as a whole.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Wall-clock seconds represented by one window.
pub const WINDOW_SPAN_SECONDS: i64 = 60;
/// Seconds of sensor data actually recorded per window.
pub const WINDOW_RECORD_SECONDS: i64 = 20;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("format error at row {row}: {msg}")]
    Format { row: usize, msg: String },
    #[error("ordering error at row {row}: timestamp {timestamp} for user {user} does not increase")]
    Ordering {
        row: usize,
        user: String,
        timestamp: i64,
    },
    #[error("duplicate window at row {row}: user {user}, timestamp {timestamp}")]
    Duplicate {
        row: usize,
        user: String,
        timestamp: i64,
    },
    #[error("insufficient vocabulary: {0} distinct label phrase(s), need at least 2")]
    InsufficientVocabulary(usize),
    #[error("empty timeline")]
    EmptyTimeline,
    #[error("cannot impute modality `{0}`: it is missing in every window")]
    Imputation(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modality {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySchema {
    #[serde(rename = "modality")]
    pub modalities: Vec<Modality>,
}

impl ModalitySchema {
    pub fn new(modalities: Vec<Modality>) -> Result<Self, IngestError> {
        let schema = Self { modalities };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.modalities.is_empty() {
            return Err(IngestError::Schema("schema has no modalities".into()));
        }
        let mut seen = BTreeSet::new();
        for m in &self.modalities {
            if m.name.is_empty() || m.name.contains(':') || m.name.contains(',') {
                return Err(IngestError::Schema(format!("invalid modality name `{}`", m.name)));
            }
            if !seen.insert(m.name.as_str()) {
                return Err(IngestError::Schema(format!("duplicate modality `{}`", m.name)));
            }
            if m.dim == 0 {
                return Err(IngestError::Schema(format!("modality `{}` has dim 0", m.name)));
            }
        }
        Ok(())
    }

    /// Total feature dimension across modalities.
    pub fn total_dim(&self) -> usize {
        self.modalities.iter().map(|m| m.dim).sum()
    }

    pub fn len(&self) -> usize {
        self.modalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities.is_empty()
    }

    /// Parse a TOML schema document (`[[modality]] name = "...", dim = N`).
    pub fn from_toml(text: &str) -> Result<Self, IngestError> {
        #[derive(Deserialize)]
        struct Doc {
            modality: Vec<Modality>,
        }
        let doc: Doc = toml::from_str(text).map_err(|e| IngestError::Schema(e.to_string()))?;
        Self::new(doc.modality)
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for m in &self.modalities {
            out.push_str(&format!("[[modality]]\nname = \"{}\"\ndim = {}\n\n", m.name, m.dim));
        }
        out
    }
}

/// One window of multimodal features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorWindow {
    pub timestamp: i64,
    pub user_id: String,
    /// Per-modality feature vectors. Missing cells hold `NaN` until imputed.
    pub features: Vec<Vec<f64>>,
    /// Per-modality missing flags; preserved after imputation.
    pub missing: Vec<bool>,
    /// Flattened `(modality, k)` positions of individually missing cells.
    pub missing_cells: Vec<(usize, usize)>,
    pub labels: BTreeSet<String>,
}

impl SensorWindow {
    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub windows: Vec<SensorWindow>,
    pub window_span_seconds: i64,
    pub window_record_seconds: i64,
}

impl Timeline {
    /// Build a timeline from windows, sorting by `(user_id, timestamp)` and
    /// rejecting duplicates.
    pub fn from_windows(mut windows: Vec<SensorWindow>) -> Result<Self, IngestError> {
        windows.sort_by(|a, b| (&a.user_id, a.timestamp).cmp(&(&b.user_id, b.timestamp)));
        for (i, pair) in windows.windows(2).enumerate() {
            if pair[0].user_id == pair[1].user_id && pair[0].timestamp == pair[1].timestamp {
                return Err(IngestError::Duplicate {
                    row: i + 2,
                    user: pair[1].user_id.clone(),
                    timestamp: pair[1].timestamp,
                });
            }
        }
        Ok(Self {
            windows,
            window_span_seconds: WINDOW_SPAN_SECONDS,
            window_record_seconds: WINDOW_RECORD_SECONDS,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn users(&self) -> Vec<&str> {
        let mut users: Vec<&str> = self.windows.iter().map(|w| w.user_id.as_str()).collect();
        users.dedup();
        users
    }

    /// Contiguous slice of windows belonging to `user`.
    pub fn user_windows(&self, user: &str) -> &[SensorWindow] {
        let start = self.windows.partition_point(|w| w.user_id.as_str() < user);
        let end = self.windows.partition_point(|w| w.user_id.as_str() <= user);
        &self.windows[start..end]
    }
}

/// Sorted, de-duplicated label phrases with their indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    phrases: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    /// Build from arbitrary phrases; the result is sorted lexicographically.
    pub fn from_phrases<I, S>(phrases: I) -> Result<Self, IngestError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = phrases.into_iter().map(Into::into).collect();
        if set.len() < 2 {
            return Err(IngestError::InsufficientVocabulary(set.len()));
        }
        let phrases: Vec<String> = set.into_iter().collect();
        let index = phrases.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Ok(Self { phrases, index })
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn index_of(&self, phrase: &str) -> Option<usize> {
        self.index.get(phrase).copied()
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.index_of(phrase).is_some()
    }
}

pub fn build_vocabulary(timeline: &Timeline) -> Result<LabelVocabulary, IngestError> {
    if timeline.is_empty() {
        return Err(IngestError::EmptyTimeline);
    }
    LabelVocabulary::from_phrases(timeline.windows.iter().flat_map(|w| w.labels.iter().cloned()))
}

enum Column {
    Timestamp,
    User,
    Feature { modality: usize, k: usize },
    Label(String),
}

/// Parse a CSV stream into a timeline.
pub fn parse_csv<R: Read>(stream: R, schema: &ModalitySchema) -> Result<Timeline, IngestError> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(stream);
    let headers = reader.headers()?.clone();
    let columns = parse_header(&headers, schema)?;

    let mut last_ts: HashMap<String, i64> = HashMap::new();
    let mut windows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let record = record?;
        let mut timestamp = None;
        let mut user = None;
        let mut cells: Vec<Vec<Option<f64>>> =
            schema.modalities.iter().map(|m| vec![None; m.dim]).collect();
        let mut labels = BTreeSet::new();
        for (col, field) in columns.iter().zip(record.iter()) {
            match col {
                Column::Timestamp => {
                    timestamp = Some(field.trim().parse::<i64>().map_err(|_| IngestError::Format {
                        row,
                        msg: format!("invalid timestamp `{field}`"),
                    })?)
                }
                Column::User => {
                    if field.is_empty() {
                        return Err(IngestError::Format { row, msg: "empty user_id".into() });
                    }
                    user = Some(field.to_string())
                }
                Column::Feature { modality, k } => {
                    if !field.is_empty() {
                        let v = field.trim().parse::<f64>().map_err(|_| IngestError::Format {
                            row,
                            msg: format!("invalid feature value `{field}`"),
                        })?;
                        if !v.is_finite() {
                            return Err(IngestError::Format {
                                row,
                                msg: format!("non-finite feature value `{field}`"),
                            });
                        }
                        cells[*modality][*k] = Some(v);
                    }
                }
                Column::Label(phrase) => match field.trim() {
                    "1" => {
                        labels.insert(phrase.clone());
                    }
                    "0" | "" => {}
                    other => {
                        return Err(IngestError::Format {
                            row,
                            msg: format!("label `{phrase}` has value `{other}`, expected 0, 1 or empty"),
                        })
                    }
                },
            }
        }
        let timestamp = timestamp.expect("header validated");
        let user = user.expect("header validated");
        if let Some(&prev) = last_ts.get(&user) {
            if timestamp == prev {
                return Err(IngestError::Duplicate { row, user, timestamp });
            }
            if timestamp < prev {
                return Err(IngestError::Ordering { row, user, timestamp });
            }
        }
        last_ts.insert(user.clone(), timestamp);

        let mut features = Vec::with_capacity(cells.len());
        let mut missing = Vec::with_capacity(cells.len());
        let mut missing_cells = Vec::new();
        for (m, modality_cells) in cells.into_iter().enumerate() {
            let empty = modality_cells.iter().filter(|c| c.is_none()).count();
            if 2 * empty >= modality_cells.len() {
                missing.push(true);
                features.push(vec![f64::NAN; modality_cells.len()]);
            } else {
                missing.push(false);
                let mut v = Vec::with_capacity(modality_cells.len());
                for (k, c) in modality_cells.into_iter().enumerate() {
                    match c {
                        Some(x) => v.push(x),
                        None => {
                            missing_cells.push((m, k));
                            v.push(f64::NAN);
                        }
                    }
                }
                features.push(v);
            }
        }
        windows.push(SensorWindow {
            timestamp,
            user_id: user,
            features,
            missing,
            missing_cells,
            labels,
        });
    }
    Timeline::from_windows(windows)
}

fn parse_header(headers: &csv::StringRecord, schema: &ModalitySchema) -> Result<Vec<Column>, IngestError> {
    let by_name: HashMap<&str, usize> = schema
        .modalities
        .iter()
        .enumerate()
        .map(|(i, m)| (m.name.as_str(), i))
        .collect();
    let mut seen_features: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut seen_labels = BTreeSet::new();
    let mut has_ts = false;
    let mut has_user = false;
    let mut columns = Vec::with_capacity(headers.len());
    for h in headers.iter() {
        let col = if h == "timestamp" {
            if has_ts {
                return Err(IngestError::Schema("duplicate `timestamp` column".into()));
            }
            has_ts = true;
            Column::Timestamp
        } else if h == "user_id" {
            if has_user {
                return Err(IngestError::Schema("duplicate `user_id` column".into()));
            }
            has_user = true;
            Column::User
        } else if let Some(rest) = h.strip_prefix("f:") {
            let (name, k) = rest
                .rsplit_once(':')
                .ok_or_else(|| IngestError::Schema(format!("malformed feature column `{h}`")))?;
            let modality = *by_name
                .get(name)
                .ok_or_else(|| IngestError::Schema(format!("feature column `{h}` names unknown modality")))?;
            let k: usize = k
                .parse()
                .map_err(|_| IngestError::Schema(format!("malformed feature index in `{h}`")))?;
            if k >= schema.modalities[modality].dim {
                return Err(IngestError::Schema(format!("feature column `{h}` exceeds modality dim")));
            }
            if !seen_features.insert((modality, k)) {
                return Err(IngestError::Schema(format!("duplicate feature column `{h}`")));
            }
            Column::Feature { modality, k }
        } else if let Some(phrase) = h.strip_prefix("label:") {
            if phrase.trim().is_empty() {
                return Err(IngestError::Schema("empty label phrase".into()));
            }
            if !seen_labels.insert(phrase.to_string()) {
                return Err(IngestError::Schema(format!("duplicate label column `{h}`")));
            }
            Column::Label(phrase.to_string())
        } else {
            return Err(IngestError::Format {
                row: 1,
                msg: format!("unknown column `{h}`"),
            });
        };
        columns.push(col);
    }
    if !has_ts || !has_user {
        return Err(IngestError::Schema("header must contain `timestamp` and `user_id`".into()));
    }
    if seen_features.len() != schema.total_dim() {
        return Err(IngestError::Schema(format!(
            "header has {} feature columns, schema expects {}",
            seen_features.len(),
            schema.total_dim()
        )));
    }
    Ok(columns)
}

/// Write a timeline back to CSV. Label columns cover `labels` in the given order.
pub fn write_csv<W: Write>(
    timeline: &Timeline,
    schema: &ModalitySchema,
    labels: &[String],
    out: W,
) -> Result<(), IngestError> {
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["timestamp".to_string(), "user_id".to_string()];
    for m in &schema.modalities {
        for k in 0..m.dim {
            header.push(format!("f:{}:{k}", m.name));
        }
    }
    for l in labels {
        header.push(format!("label:{l}"));
    }
    writer.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for w in &timeline.windows {
        row.clear();
        row.push(w.timestamp.to_string());
        row.push(w.user_id.clone());
        for (m, values) in w.features.iter().enumerate() {
            for (k, v) in values.iter().enumerate() {
                if w.missing[m] || w.missing_cells.contains(&(m, k)) || v.is_nan() {
                    row.push(String::new());
                } else {
                    row.push(v.to_string());
                }
            }
        }
        for l in labels {
            row.push(if w.labels.contains(l) { "1".into() } else { "0".into() });
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Default, Clone)]
struct Accum {
    sum: Vec<f64>,
    count: Vec<usize>,
}

impl Accum {
    fn new(dim: usize) -> Self {
        Self { sum: vec![0.0; dim], count: vec![0; dim] }
    }

    fn mean(&self, k: usize) -> Option<f64> {
        (self.count[k] > 0).then(|| self.sum[k] / self.count[k] as f64)
    }
}

/// Replace missing modalities and cells with per-user means, falling back to
/// global means. Observed values are never modified.
pub fn impute_missing(timeline: &Timeline) -> Result<Timeline, IngestError> {
    let Some(first) = timeline.windows.first() else {
        return Ok(timeline.clone());
    };
    let dims: Vec<usize> = first.features.iter().map(Vec::len).collect();
    let n_mod = dims.len();

    let mut global: Vec<Accum> = dims.iter().map(|&d| Accum::new(d)).collect();
    let mut per_user: BTreeMap<&str, Vec<Accum>> = BTreeMap::new();
    for w in &timeline.windows {
        let user = per_user
            .entry(w.user_id.as_str())
            .or_insert_with(|| dims.iter().map(|&d| Accum::new(d)).collect());
        for m in 0..n_mod {
            if w.missing[m] {
                continue;
            }
            for (k, &v) in w.features[m].iter().enumerate() {
                if w.missing_cells.contains(&(m, k)) || v.is_nan() {
                    continue;
                }
                global[m].sum[k] += v;
                global[m].count[k] += 1;
                user[m].sum[k] += v;
                user[m].count[k] += 1;
            }
        }
    }

    let needs_imputation = timeline
        .windows
        .iter()
        .any(|w| w.missing.iter().any(|&m| m) || !w.missing_cells.is_empty());
    if !needs_imputation {
        return Ok(timeline.clone());
    }
    for (m, acc) in global.iter().enumerate() {
        if acc.count.iter().all(|&c| c == 0) {
            let name = format!("#{m}");
            return Err(IngestError::Imputation(name));
        }
    }

    let fill = |user: &[Accum], m: usize, k: usize| -> Result<f64, IngestError> {
        user[m]
            .mean(k)
            .or_else(|| global[m].mean(k))
            .ok_or_else(|| IngestError::Imputation(format!("#{m} feature {k}")))
    };

    let mut windows = timeline.windows.clone();
    for w in &mut windows {
        let user = &per_user[w.user_id.as_str()];
        for m in 0..n_mod {
            if w.missing[m] {
                for k in 0..dims[m] {
                    w.features[m][k] = fill(user, m, k)?;
                }
            }
        }
        for &(m, k) in &w.missing_cells {
            w.features[m][k] = fill(user, m, k)?;
        }
    }
    Ok(Timeline {
        windows,
        window_span_seconds: timeline.window_span_seconds,
        window_record_seconds: timeline.window_record_seconds,
    })
}

/// Like [`impute_missing`] but reports the modality by name.
pub fn impute_with_schema(timeline: &Timeline, schema: &ModalitySchema) -> Result<Timeline, IngestError> {
    impute_missing(timeline).map_err(|e| match e {
        IngestError::Imputation(what) => {
            let idx = what
                .trim_start_matches('#')
                .split_whitespace()
                .next()
                .and_then(|s| s.parse::<usize>().ok());
            match idx.and_then(|i| schema.modalities.get(i)) {
                Some(m) => IngestError::Imputation(m.name.clone()),
                None => IngestError::Imputation(what),
            }
        }
        other => other,
    })
}
