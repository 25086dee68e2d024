//! Manifest CSV (`id,source,domain,intent,slot_1..slot_M[,speaker]`),
//! label-space JSON and column mapping for foreign corpora such as Fluent
//! Speech Commands.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slu_core::data::{Manifest, ManifestEntry};
use slu_core::decoding::{LabelSpace, LabelVector};

use crate::error::{Error, IoContext, Result};

pub fn read_label_space(path: &Path) -> Result<LabelSpace> {
    let f = File::open(path).at(path)?;
    let space: LabelSpace =
        serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::format(path, e.to_string()))?;
    space.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(space)
}

pub fn write_label_space(path: &Path, space: &LabelSpace) -> Result<()> {
    let json = serde_json::to_string_pretty(space).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, json + "\n").at(path)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// Writes a manifest; a `speaker` column is added when any entry has one.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let space = &manifest.label_space;
    let with_speaker = manifest.entries.iter().any(|e| e.speaker.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["id".to_string(), "source".into(), "domain".into(), "intent".into()];
    header.extend((1..=space.num_slots()).map(|i| format!("slot_{i}")));
    if with_speaker {
        header.push("speaker".into());
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for e in &manifest.entries {
        space.check(&e.label)?;
        let mut row = vec![e.id.clone(), e.source.clone()];
        row.extend(space.fields().into_iter().map(|f| space.names(f)[e.label.get(f)].clone()));
        if with_speaker {
            row.push(e.speaker.clone().unwrap_or_default());
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

/// Where each manifest field comes from in a foreign CSV.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    /// Column holding the utterance id; defaults to the source column.
    #[serde(default)]
    pub id: Option<String>,
    pub source: String,
    /// Domain column; without one every row gets a single domain named
    /// `default_domain`.
    #[serde(default)]
    pub domain: Option<String>,
    #[serde(default = "default_domain")]
    pub default_domain: String,
    pub intent: String,
    #[serde(default)]
    pub slots: Vec<String>,
    #[serde(default)]
    pub speaker: Option<String>,
}

fn default_domain() -> String {
    "default".into()
}

impl ColumnMapping {
    /// The native manifest layout for `m` slots.
    pub fn native(m: usize) -> Self {
        Self {
            id: Some("id".into()),
            source: "source".into(),
            domain: Some("domain".into()),
            default_domain: default_domain(),
            intent: "intent".into(),
            slots: (1..=m).map(|i| format!("slot_{i}")).collect(),
            speaker: None,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

struct RawRow {
    line: u64,
    id: String,
    source: String,
    values: Vec<String>,
    speaker: Option<String>,
}

fn read_rows(path: &Path, mapping: &ColumnMapping) -> Result<Vec<RawRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(path, format!("missing column {name:?}")))
    };
    let source = col(&mapping.source)?;
    let id = match &mapping.id {
        Some(c) => col(c)?,
        None => source,
    };
    let domain = mapping.domain.as_deref().map(col).transpose()?;
    let mut fields = vec![col(&mapping.intent)?];
    for s in &mapping.slots {
        fields.push(col(s)?);
    }
    let speaker = match &mapping.speaker {
        Some(c) => Some(col(c)?),
        None => headers.iter().position(|h| h == "speaker"),
    };
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::format(path, format!("line {line}: {e}")))?;
        let get = |c: usize| -> Result<String> {
            rec.get(c)
                .map(str::to_string)
                .ok_or_else(|| Error::format(path, format!("line {line}: missing column {c}")))
        };
        let mut values = vec![match domain {
            Some(c) => get(c)?,
            None => mapping.default_domain.clone(),
        }];
        for &c in &fields {
            values.push(get(c)?);
        }
        if values.iter().any(|v| v.is_empty()) {
            return Err(Error::format(path, format!("line {line}: empty label value")));
        }
        rows.push(RawRow {
            line,
            id: get(id)?,
            source: get(source)?,
            values,
            speaker: speaker.map(get).transpose()?.filter(|s| !s.is_empty()),
        });
    }
    Ok(rows)
}

/// Label space from the distinct values of each field, sorted by name.
fn infer_space(rows: &[RawRow], m: usize) -> Result<LabelSpace> {
    let mut sets: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); m + 2];
    for r in rows {
        for (s, v) in sets.iter_mut().zip(&r.values) {
            s.insert(v);
        }
    }
    let mut lists: Vec<Vec<String>> = sets.into_iter().map(|s| s.into_iter().map(String::from).collect()).collect();
    let slots = lists.split_off(2);
    let intents = lists.pop().unwrap_or_default();
    let domains = lists.pop().unwrap_or_default();
    Ok(LabelSpace::new(domains, intents, slots)?)
}

/// Loads a CSV through `mapping`. With `space`, every value must exist in
/// it; without, the space is inferred from the file.
pub fn load_mapped(path: &Path, mapping: &ColumnMapping, space: Option<&LabelSpace>) -> Result<Manifest> {
    let rows = read_rows(path, mapping)?;
    let m = mapping.slots.len();
    let space = match space {
        Some(s) => {
            if s.num_slots() != m {
                return Err(Error::format(path, format!("{m} slot columns but the label space has {}", s.num_slots())));
            }
            s.clone()
        }
        None => {
            if rows.is_empty() {
                return Err(Error::format(path, "cannot infer a label space from an empty manifest"));
            }
            infer_space(&rows, m)?
        }
    };
    let fields = space.fields();
    let lookup: Vec<BTreeMap<&str, usize>> = fields
        .iter()
        .map(|&f| space.names(f).iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect())
        .collect();
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(rows.len());
    for r in &rows {
        if !seen.insert(r.id.clone()) {
            return Err(Error::format(path, format!("line {}: duplicate id {:?}", r.line, r.id)));
        }
        let mut ids = Vec::with_capacity(fields.len());
        for ((f, table), v) in fields.iter().zip(&lookup).zip(&r.values) {
            let id = table.get(v.as_str()).ok_or_else(|| {
                Error::format(path, format!("line {}: unknown {} value {v:?}", r.line, f.name()))
            })?;
            ids.push(*id);
        }
        entries.push(ManifestEntry {
            id: r.id.clone(),
            source: r.source.clone(),
            label: LabelVector::new(ids[0], ids[1], ids[2..].to_vec()),
            speaker: r.speaker.clone(),
        });
    }
    Ok(Manifest::new(space, entries)?)
}

/// Number of `slot_k` columns in a native manifest header.
fn native_slot_count(path: &Path) -> Result<usize> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = r.headers().map_err(|e| csv_err(path, e))?;
    Ok(headers.iter().filter(|h| h.starts_with("slot_")).count())
}

/// Loads a native manifest, with a fixed label space or an inferred one.
pub fn load_manifest(path: &Path, space: Option<&LabelSpace>) -> Result<Manifest> {
    let m = match space {
        Some(s) => s.num_slots(),
        None => native_slot_count(path)?,
    };
    load_mapped(path, &ColumnMapping::native(m), space)
}
