use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, EntityKind, Interaction, InteractionLog, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    Csv,
    Tsv,
    /// Arbitrary separator string, e.g. `::` for MovieLens `.dat` files.
    Custom(String),
}

impl Delimiter {
    fn as_str(&self) -> &str {
        match self {
            Delimiter::Csv => ",",
            Delimiter::Tsv => "\t",
            Delimiter::Custom(s) => s,
        }
    }
}

/// A column selected by header name or by zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl From<&str> for ColumnRef {
    fn from(s: &str) -> Self {
        ColumnRef::Name(s.to_owned())
    }
}

impl From<usize> for ColumnRef {
    fn from(i: usize) -> Self {
        ColumnRef::Index(i)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub delimiter: Delimiter,
    pub has_header: bool,
    pub user: ColumnRef,
    pub item: ColumnRef,
    pub rating: ColumnRef,
    pub timestamp: ColumnRef,
}

impl Schema {
    /// Header-named `user,item,rating,timestamp` columns.
    pub fn named(delimiter: Delimiter) -> Self {
        Self {
            delimiter,
            has_header: true,
            user: "user".into(),
            item: "item".into(),
            rating: "rating".into(),
            timestamp: "timestamp".into(),
        }
    }

    /// MovieLens-1M `ratings.dat`: `UserID::MovieID::Rating::Timestamp`, no header.
    pub fn movielens() -> Self {
        Self {
            delimiter: Delimiter::Custom("::".into()),
            has_header: false,
            user: 0.into(),
            item: 1.into(),
            rating: 2.into(),
            timestamp: 3.into(),
        }
    }
}

fn resolve(col: &ColumnRef, header: Option<&[String]>) -> Result<usize> {
    match col {
        ColumnRef::Index(i) => Ok(*i),
        ColumnRef::Name(name) => header
            .and_then(|h| h.iter().position(|c| c.trim() == name))
            .ok_or_else(|| DataError::MissingColumn(name.clone())),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn load_interactions(path: &Path, schema: &Schema) -> Result<InteractionLog> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_interactions(file, schema).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::Io {
            path: path.to_owned(),
            source,
        },
        other => other,
    })
}

/// Parses interaction records; unparseable lines are skipped and counted.
pub fn parse_interactions<R: Read>(reader: R, schema: &Schema) -> Result<InteractionLog> {
    let delim = schema.delimiter.as_str();
    let mut lines = BufReader::new(reader).lines();
    let header: Option<Vec<String>> = if schema.has_header {
        match lines.next() {
            Some(line) => Some(
                line.map_err(io_err(Path::new("<reader>")))?
                    .trim_end_matches('\r')
                    .split(delim)
                    .map(str::to_owned)
                    .collect(),
            ),
            None => return Err(DataError::Empty("no header line".into())),
        }
    } else {
        None
    };
    let cols = [
        resolve(&schema.user, header.as_deref())?,
        resolve(&schema.item, header.as_deref())?,
        resolve(&schema.rating, header.as_deref())?,
        resolve(&schema.timestamp, header.as_deref())?,
    ];
    let width = cols.iter().max().copied().unwrap_or(0) + 1;

    let mut log = InteractionLog::default();
    let first_line = if schema.has_header { 2 } else { 1 };
    for (n, line) in lines.enumerate() {
        let line = line.map_err(io_err(Path::new("<reader>")))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delim).collect();
        let parsed = (fields.len() >= width)
            .then(|| {
                let rating = fields[cols[2]].trim().parse::<f64>().ok()?;
                let timestamp = fields[cols[3]].trim().parse::<f64>().ok()?;
                let (u, i) = (fields[cols[0]].trim(), fields[cols[1]].trim());
                (!u.is_empty() && !i.is_empty() && rating.is_finite())
                    .then_some((u, i, rating, timestamp as i64))
            })
            .flatten();
        match parsed {
            Some((u, i, rating, timestamp)) => {
                let user = log.users.intern(u);
                let item = log.items.intern(i);
                log.records.push(Interaction {
                    user,
                    item,
                    rating,
                    timestamp,
                });
            }
            None => {
                log.skipped += 1;
                log::warn!("skipping malformed interaction line {}: {line:?}", n + first_line);
            }
        }
    }
    if log.skipped > 0 {
        log::warn!("{} malformed interaction lines skipped", log.skipped);
    }
    Ok(log)
}

/// Side information for users or items: one row of named field values per raw id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub kind: EntityKind,
    pub fields: Vec<String>,
    pub rows: BTreeMap<String, Vec<String>>,
}

impl FeatureTable {
    pub fn empty(kind: EntityKind) -> Self {
        Self {
            kind,
            fields: Vec::new(),
            rows: BTreeMap::new(),
        }
    }

    /// `(field, value)` pairs for `raw_id`; unknown ids have an empty row.
    pub fn row(&self, raw_id: &str) -> Vec<(String, String)> {
        self.rows
            .get(raw_id)
            .map(|vals| {
                self.fields
                    .iter()
                    .cloned()
                    .zip(vals.iter().cloned())
                    .filter(|(_, v)| !v.is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }
}

pub fn load_features(path: &Path, delimiter: &Delimiter, kind: EntityKind) -> Result<FeatureTable> {
    let file = File::open(path).map_err(io_err(path))?;
    parse_features(file, delimiter, kind)
}

/// Header row names the fields; the first column is the entity id.
pub fn parse_features<R: Read>(
    reader: R,
    delimiter: &Delimiter,
    kind: EntityKind,
) -> Result<FeatureTable> {
    let delim = delimiter.as_str();
    let mut lines = BufReader::new(reader).lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::Empty("feature file has no header".into()))?
        .map_err(io_err(Path::new("<reader>")))?;
    let fields: Vec<String> = header
        .trim_end_matches('\r')
        .split(delim)
        .skip(1)
        .map(|s| s.trim().to_owned())
        .collect();
    let mut rows = BTreeMap::new();
    for line in lines {
        let line = line.map_err(io_err(Path::new("<reader>")))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(delim);
        let id = parts.next().unwrap_or_default().trim().to_owned();
        let mut vals: Vec<String> = parts.map(|s| s.trim().to_owned()).collect();
        vals.resize(fields.len(), String::new());
        rows.insert(id, vals);
    }
    Ok(FeatureTable { kind, fields, rows })
}
