//! CIDDS-style flow CSV ingestion.
//!
//! Parses NetFlow rows into validated [`FlowRecord`]s, maps the dataset's
//! class/attackType annotations onto binary and fine-grained labels, and
//! generates the per-domain evaluation splits. Source order is preserved
//! everywhere: flow sequences are only meaningful if the table keeps the
//! order flows were captured in.

mod split;

pub use split::{make_eval_splits, preset_composition, SplitSpec};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::fingerprint::Fingerprint;

/// Binary classification target. `Malicious` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryLabel {
    Benign,
    Malicious,
}

impl BinaryLabel {
    /// Class index used by the classifier head: benign = 0, malicious = 1.
    pub fn index(self) -> usize {
        match self {
            BinaryLabel::Benign => 0,
            BinaryLabel::Malicious => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            BinaryLabel::Benign
        } else {
            BinaryLabel::Malicious
        }
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinaryLabel::Benign => write!(f, "benign"),
            BinaryLabel::Malicious => write!(f, "malicious"),
        }
    }
}

/// Fine-grained label taxonomy across the three domains.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum FineLabel {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "dos")]
    Dos,
    #[serde(rename = "portScan")]
    PortScan,
    #[serde(rename = "pingScan")]
    PingScan,
    #[serde(rename = "bruteForce")]
    BruteForce,
    #[serde(rename = "scan")]
    Scan,
    #[serde(rename = "unknown")]
    Unknown,
    #[serde(rename = "suspicious")]
    Suspicious,
}

impl FineLabel {
    pub const ALL: [FineLabel; 8] = [
        FineLabel::Normal,
        FineLabel::Dos,
        FineLabel::PortScan,
        FineLabel::PingScan,
        FineLabel::BruteForce,
        FineLabel::Scan,
        FineLabel::Unknown,
        FineLabel::Suspicious,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FineLabel::Normal => "normal",
            FineLabel::Dos => "dos",
            FineLabel::PortScan => "portScan",
            FineLabel::PingScan => "pingScan",
            FineLabel::BruteForce => "bruteForce",
            FineLabel::Scan => "scan",
            FineLabel::Unknown => "unknown",
            FineLabel::Suspicious => "suspicious",
        }
    }
}

impl fmt::Display for FineLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FineLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FineLabel::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown fine label: {s:?}"))
    }
}

/// Origin of a flow table; controls label semantics and evaluation grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainTag {
    #[serde(rename = "cidds1_internal")]
    Cidds1Internal,
    #[serde(rename = "cidds1_external")]
    Cidds1External,
    #[serde(rename = "cidds2")]
    Cidds2,
}

impl DomainTag {
    pub const ALL: [DomainTag; 3] = [
        DomainTag::Cidds1Internal,
        DomainTag::Cidds1External,
        DomainTag::Cidds2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Cidds1Internal => "cidds1_internal",
            DomainTag::Cidds1External => "cidds1_external",
            DomainTag::Cidds2 => "cidds2",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        DomainTag::ALL
            .iter()
            .copied()
            .find(|d| d.as_str() == norm)
            .ok_or_else(|| format!("unknown domain tag: {s:?}"))
    }
}

/// One parsed NetFlow row.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    /// 0-based position in the source file; identity of the row.
    pub order_index: u64,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: String,
    pub flags: String,
    pub packets: u64,
    pub bytes: u64,
    pub duration: f64,
    pub class_label: String,
    pub attack_type: String,
    pub binary_label: BinaryLabel,
    pub fine_label: FineLabel,
    /// Original column values, kept so splits can be re-serialized with the
    /// source schema intact.
    pub raw_fields: Vec<String>,
}

/// Ordered collection of flows from one source file.
#[derive(Debug, Clone)]
pub struct FlowTable {
    pub records: Vec<FlowRecord>,
    pub domain_tag: DomainTag,
    pub source_path: String,
    /// Column names of the source file, used for schema-preserving export.
    pub header: Vec<String>,
}

impl FlowTable {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Digest over the label-relevant content of the table. Splits sampled
    /// from the same data with the same spec fingerprint identically.
    pub fn fingerprint(&self) -> String {
        let mut fp = Fingerprint::new();
        fp.update_str(self.domain_tag.as_str());
        fp.update_u64(self.records.len() as u64);
        for r in &self.records {
            fp.update_u64(r.order_index);
            fp.update_u64(u64::from(r.src_port));
            fp.update_u64(u64::from(r.dst_port));
            fp.update_str(&r.proto);
            fp.update_str(&r.flags);
            fp.update_u64(r.packets);
            fp.update_u64(r.bytes);
            fp.update_f64(r.duration);
            fp.update_str(r.fine_label.as_str());
        }
        fp.finish()
    }
}

/// Per-label flow counts for a table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub counts: BTreeMap<FineLabel, u64>,
    pub total: u64,
}

/// Logical-field-to-column-name mapping. Defaults to the published CIDDS
/// header; individual columns can be renamed for variant exports.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaMap {
    pub duration: String,
    pub proto: String,
    pub src_port: String,
    pub dst_port: String,
    pub packets: String,
    pub bytes: String,
    pub flags: String,
    pub class: String,
    pub attack_type: String,
}

impl Default for SchemaMap {
    fn default() -> Self {
        SchemaMap {
            duration: "Duration".into(),
            proto: "Proto".into(),
            src_port: "Src Pt".into(),
            dst_port: "Dst Pt".into(),
            packets: "Packets".into(),
            bytes: "Bytes".into(),
            flags: "Flags".into(),
            class: "class".into(),
            attack_type: "attackType".into(),
        }
    }
}

/// Column indices resolved against a concrete header row.
#[derive(Debug, Clone)]
pub struct ResolvedSchema {
    duration: usize,
    proto: usize,
    src_port: usize,
    dst_port: usize,
    packets: usize,
    bytes: usize,
    flags: usize,
    class: usize,
    attack_type: usize,
}

impl ResolvedSchema {
    pub fn resolve(schema: &SchemaMap, header: &[String]) -> Result<Self, IngestError> {
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| IngestError::MissingColumn {
                    column: name.to_string(),
                })
        };
        Ok(ResolvedSchema {
            duration: find(&schema.duration)?,
            proto: find(&schema.proto)?,
            src_port: find(&schema.src_port)?,
            dst_port: find(&schema.dst_port)?,
            packets: find(&schema.packets)?,
            bytes: find(&schema.bytes)?,
            flags: find(&schema.flags)?,
            class: find(&schema.class)?,
            attack_type: find(&schema.attack_type)?,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {column:?} not found in header")]
    MissingColumn { column: String },
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: u64, reason: String },
    #[error("unknown label {label:?} for domain {domain}")]
    UnknownLabel { label: String, domain: DomainTag },
    #[error("label {label} under-represented: need {requested}, have {available}")]
    InsufficientLabel {
        label: FineLabel,
        requested: u64,
        available: u64,
    },
}

fn blank_attack(s: &str) -> bool {
    s.is_empty() || s == "---"
}

/// Map the dataset's `(class, attackType)` annotation to binary and fine
/// labels for the given domain.
///
/// Internal and CIDDS-002 captures label benign traffic `normal`; attack rows
/// carry `attacker`/`victim` classes with the attack name in `attackType`.
/// The external-server capture uses `unknown` (treated benign) and
/// `suspicious` (treated malicious) instead.
pub fn map_label(
    class_label: &str,
    attack_type: &str,
    domain: DomainTag,
) -> Result<(BinaryLabel, FineLabel), IngestError> {
    match domain {
        DomainTag::Cidds1External => match class_label {
            "unknown" => Ok((BinaryLabel::Benign, FineLabel::Unknown)),
            "suspicious" => Ok((BinaryLabel::Malicious, FineLabel::Suspicious)),
            other => Err(IngestError::UnknownLabel {
                label: other.to_string(),
                domain,
            }),
        },
        DomainTag::Cidds1Internal | DomainTag::Cidds2 => {
            let is_attack =
                matches!(class_label, "attacker" | "victim") || !blank_attack(attack_type);
            if is_attack {
                let fine = match attack_type {
                    "dos" => FineLabel::Dos,
                    "portScan" => FineLabel::PortScan,
                    "pingScan" => FineLabel::PingScan,
                    "bruteForce" => FineLabel::BruteForce,
                    "scan" => FineLabel::Scan,
                    other => {
                        return Err(IngestError::UnknownLabel {
                            label: format!("{class_label}/{other}"),
                            domain,
                        })
                    }
                };
                Ok((BinaryLabel::Malicious, fine))
            } else if class_label == "normal" {
                Ok((BinaryLabel::Benign, FineLabel::Normal))
            } else {
                Err(IngestError::UnknownLabel {
                    label: class_label.to_string(),
                    domain,
                })
            }
        }
    }
}

/// Parse a non-negative count, resolving the dataset's "M" magnitude suffix
/// (decimal mega, e.g. "1.2 M" -> 1_200_000) and tolerating float formatting.
fn parse_count(s: &str) -> Result<u64, String> {
    let s = s.trim();
    if s.is_empty() {
        return Err("empty numeric field".into());
    }
    let (num, mult) = match s.strip_suffix('M') {
        Some(rest) => (rest.trim(), 1_000_000.0),
        None => (s, 1.0),
    };
    let v: f64 = num
        .parse()
        .map_err(|_| format!("unparseable number {s:?}"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("negative or non-finite count {s:?}"));
    }
    Ok((v * mult).round() as u64)
}

/// Ports are integers in [0, 65535]; ICMP rows encode type.code as a float
/// (e.g. "3.0"), so parse through f64 and round.
fn parse_port(s: &str) -> Result<u16, String> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("unparseable port {s:?}"))?;
    let r = v.round();
    if !v.is_finite() || !(0.0..=65535.0).contains(&r) {
        return Err(format!("port out of range {s:?}"));
    }
    Ok(r as u16)
}

fn parse_duration(s: &str) -> Result<f64, String> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("unparseable duration {s:?}"))?;
    if !v.is_finite() || v < 0.0 {
        return Err(format!("negative or non-finite duration {s:?}"));
    }
    Ok(v)
}

/// Parse one CSV row into a [`FlowRecord`].
///
/// `row_number` is the 1-based line in the source file, carried into
/// [`IngestError::MalformedRow`] diagnostics.
pub fn parse_flow_record(
    fields: &[String],
    schema: &ResolvedSchema,
    order_index: u64,
    row_number: u64,
    domain: DomainTag,
) -> Result<FlowRecord, IngestError> {
    let get = |idx: usize, name: &str| {
        fields
            .get(idx)
            .map(|s| s.as_str())
            .ok_or_else(|| IngestError::MalformedRow {
                row: row_number,
                reason: format!("missing field {name:?}"),
            })
    };
    let malformed = |reason: String| IngestError::MalformedRow {
        row: row_number,
        reason,
    };

    let src_port = parse_port(get(schema.src_port, "src port")?).map_err(&malformed)?;
    let dst_port = parse_port(get(schema.dst_port, "dst port")?).map_err(&malformed)?;
    let packets = parse_count(get(schema.packets, "packets")?).map_err(&malformed)?;
    let bytes = parse_count(get(schema.bytes, "bytes")?).map_err(&malformed)?;
    let duration = parse_duration(get(schema.duration, "duration")?).map_err(&malformed)?;
    let proto = get(schema.proto, "proto")?.to_string();
    let flags = get(schema.flags, "flags")?.to_string();
    let class_label = get(schema.class, "class")?.to_string();
    let attack_type = get(schema.attack_type, "attack type")?.to_string();

    let (binary_label, fine_label) = map_label(&class_label, &attack_type, domain)?;

    Ok(FlowRecord {
        order_index,
        src_port,
        dst_port,
        proto,
        flags,
        packets,
        bytes,
        duration,
        class_label,
        attack_type,
        binary_label,
        fine_label,
        raw_fields: fields.to_vec(),
    })
}

/// Result of loading a table: the records that parsed plus how many rows were
/// skipped (always 0 in strict mode, which errors instead).
#[derive(Debug)]
pub struct LoadOutcome {
    pub table: FlowTable,
    pub skipped: u64,
}

/// Load a CIDDS-style CSV into a [`FlowTable`], preserving file order.
///
/// In strict mode the first malformed row aborts the load; otherwise
/// malformed rows are skipped and counted. `order_index` is assigned from the
/// post-skip position so it stays dense and strictly increasing.
pub fn load_flow_table(
    path: &Path,
    domain: DomainTag,
    strict: bool,
    schema: &SchemaMap,
) -> Result<LoadOutcome, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let resolved = ResolvedSchema::resolve(schema, &header)?;

    let mut records = Vec::new();
    let mut skipped = 0u64;
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = row
            .position()
            .map(|p| p.line())
            .unwrap_or(i as u64 + 2);
        let fields: Vec<String> = row.iter().map(|s| s.to_string()).collect();
        match parse_flow_record(&fields, &resolved, records.len() as u64, line, domain) {
            Ok(rec) => records.push(rec),
            Err(e) if strict => return Err(e),
            Err(e) => {
                log::debug!("skipping row {line} of {}: {e}", path.display());
                skipped += 1;
            }
        }
    }

    Ok(LoadOutcome {
        table: FlowTable {
            records,
            domain_tag: domain,
            source_path: path.display().to_string(),
            header,
        },
        skipped,
    })
}

/// Per-label composition of a table.
pub fn dataset_stats(table: &FlowTable) -> CompositionReport {
    let mut counts: BTreeMap<FineLabel, u64> = BTreeMap::new();
    for r in &table.records {
        *counts.entry(r.fine_label).or_insert(0) += 1;
    }
    CompositionReport {
        total: table.records.len() as u64,
        counts,
    }
}

/// Serialize a table back to CSV with the source schema plus appended
/// `binary_label` and `fine_label` columns.
pub fn write_flow_table_csv(table: &FlowTable, path: &Path) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = table.header.clone();
    header.push("binary_label".into());
    header.push("fine_label".into());
    writer.write_record(&header)?;
    for r in &table.records {
        let mut fields = r.raw_fields.clone();
        fields.push(r.binary_label.to_string());
        fields.push(r.fine_label.to_string());
        writer.write_record(&fields)?;
    }
    writer.flush().map_err(IngestError::Io)?;
    Ok(())
}
