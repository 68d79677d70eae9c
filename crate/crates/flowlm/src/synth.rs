//! Deterministic synthetic flow tables shaped like CIDDS exports.
//!
//! Two generators cover the training smoke paths:
//!
//! - [`SynthKind::Parity`]: every feature strictly alternates between two
//!   profiles by row parity, so a masked flow is exactly recoverable from
//!   either neighbor. All rows are benign.
//! - [`SynthKind::PortRule`]: every fourth flow is malicious and carries a
//!   destination port in [58000, 65000), far above the benign services
//!   (22/53/80/443). With the malicious share at exactly 25%, a bin-count
//!   divisible by four puts a quantile edge inside the port gap, so the
//!   discretized dst-port id separates the classes perfectly.
//!
//! Output is either an in-memory [`FlowTable`] or a CSV file with the
//! published CIDDS column layout, suitable for the `ingest` command.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::ingest::{BinaryLabel, DomainTag, FineLabel, FlowRecord, FlowTable};
use crate::rng::stream_rng;

/// Column layout of the published CIDDS CSV exports.
pub const CIDDS_HEADER: [&str; 16] = [
    "Date first seen",
    "Duration",
    "Proto",
    "Src IP Addr",
    "Src Pt",
    "Dst IP Addr",
    "Dst Pt",
    "Packets",
    "Bytes",
    "Flows",
    "Flags",
    "Tos",
    "class",
    "attackType",
    "attackID",
    "attackDescription",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Parity,
    PortRule,
}

impl std::str::FromStr for SynthKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "parity" => Ok(SynthKind::Parity),
            "port-rule" | "port_rule" => Ok(SynthKind::PortRule),
            other => Err(format!("unknown synth kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub rows: usize,
    pub seed: u64,
    pub kind: SynthKind,
    pub domain: DomainTag,
}

struct RowSpec {
    src_port: u16,
    dst_port: u16,
    proto: &'static str,
    flags: String,
    packets: u64,
    bytes: u64,
    duration: f64,
    malicious: bool,
}

fn parity_row(idx: usize) -> RowSpec {
    if idx.is_multiple_of(2) {
        RowSpec {
            src_port: 52000,
            dst_port: 80,
            proto: "TCP",
            flags: ".AP.SF".to_string(),
            packets: 5,
            bytes: 400,
            duration: 0.05,
            malicious: false,
        }
    } else {
        RowSpec {
            src_port: 41000,
            dst_port: 443,
            proto: "UDP",
            flags: "......".to_string(),
            packets: 12,
            bytes: 2400,
            duration: 1.25,
            malicious: false,
        }
    }
}

fn port_rule_row(idx: usize, rng: &mut impl Rng) -> RowSpec {
    if idx % 4 == 3 {
        // Burst traffic against a high port: the malicious cluster.
        RowSpec {
            src_port: rng.random_range(49152..65535),
            dst_port: rng.random_range(58000..65000),
            proto: "TCP",
            flags: ".A..S.".to_string(),
            packets: rng.random_range(1..4),
            bytes: rng.random_range(40..160),
            duration: rng.random_range(0.0..0.01),
            malicious: true,
        }
    } else {
        match rng.random_range(0..3u8) {
            0 => RowSpec {
                src_port: rng.random_range(49152..65535),
                dst_port: if rng.random_range(0..2u8) == 0 { 80 } else { 443 },
                proto: "TCP",
                flags: ".AP.SF".to_string(),
                packets: rng.random_range(3..30),
                bytes: rng.random_range(200..3000),
                duration: rng.random_range(0.01..2.0),
                malicious: false,
            },
            1 => RowSpec {
                src_port: rng.random_range(1024..65535),
                dst_port: 53,
                proto: "UDP",
                flags: "......".to_string(),
                packets: rng.random_range(1..4),
                bytes: rng.random_range(60..400),
                duration: rng.random_range(0.001..0.2),
                malicious: false,
            },
            _ => RowSpec {
                src_port: rng.random_range(49152..65535),
                dst_port: 22,
                proto: "TCP",
                flags: ".AP.S.".to_string(),
                packets: rng.random_range(10..100),
                bytes: rng.random_range(1000..20000),
                duration: rng.random_range(1.0..30.0),
                malicious: false,
            },
        }
    }
}

/// Class/attackType strings appropriate for the domain's labeling scheme.
fn label_strings(domain: DomainTag, malicious: bool) -> (&'static str, &'static str) {
    match (domain, malicious) {
        (DomainTag::Cidds1External, false) => ("unknown", "---"),
        (DomainTag::Cidds1External, true) => ("suspicious", "---"),
        (_, false) => ("normal", "---"),
        (DomainTag::Cidds2, true) => ("attacker", "scan"),
        (_, true) => ("attacker", "dos"),
    }
}

fn timestamp(idx: usize) -> String {
    let centis = idx;
    let secs = centis / 100;
    let (h, m, s) = (secs / 3600 % 24, secs / 60 % 60, secs % 60);
    format!("2017-03-15 {h:02}:{m:02}:{s:02}.{:03}", centis % 100 * 10)
}

fn fine_label(domain: DomainTag, malicious: bool) -> (BinaryLabel, FineLabel) {
    match (domain, malicious) {
        (DomainTag::Cidds1External, false) => (BinaryLabel::Benign, FineLabel::Unknown),
        (DomainTag::Cidds1External, true) => (BinaryLabel::Malicious, FineLabel::Suspicious),
        (_, false) => (BinaryLabel::Benign, FineLabel::Normal),
        (DomainTag::Cidds2, true) => (BinaryLabel::Malicious, FineLabel::Scan),
        (_, true) => (BinaryLabel::Malicious, FineLabel::Dos),
    }
}

fn build_record(idx: usize, spec: RowSpec, domain: DomainTag) -> FlowRecord {
    let (class, attack_type) = label_strings(domain, spec.malicious);
    let (binary_label, fine) = fine_label(domain, spec.malicious);
    let duration = (spec.duration * 1000.0).round() / 1000.0;
    let raw_fields: Vec<String> = vec![
        timestamp(idx),
        format!("{duration:.3}"),
        spec.proto.to_string(),
        format!("192.168.100.{}", 5 + idx % 40),
        spec.src_port.to_string(),
        format!("192.168.220.{}", 9 + idx % 17),
        spec.dst_port.to_string(),
        spec.packets.to_string(),
        spec.bytes.to_string(),
        "1".to_string(),
        spec.flags.clone(),
        "0".to_string(),
        class.to_string(),
        attack_type.to_string(),
        "---".to_string(),
        "---".to_string(),
    ];
    FlowRecord {
        order_index: idx as u64,
        src_port: spec.src_port,
        dst_port: spec.dst_port,
        proto: spec.proto.to_string(),
        flags: spec.flags,
        packets: spec.packets,
        bytes: spec.bytes,
        duration,
        class_label: class.to_string(),
        attack_type: attack_type.to_string(),
        binary_label,
        fine_label: fine,
        raw_fields,
    }
}

/// Generate the table in memory.
pub fn synth_table(config: &SynthConfig) -> FlowTable {
    let mut rng = stream_rng(config.seed, "synth");
    let records = (0..config.rows)
        .map(|idx| {
            let spec = match config.kind {
                SynthKind::Parity => parity_row(idx),
                SynthKind::PortRule => port_rule_row(idx, &mut rng),
            };
            build_record(idx, spec, config.domain)
        })
        .collect();
    FlowTable {
        records,
        domain_tag: config.domain,
        source_path: format!("synthetic:{:?}:{}:{}", config.kind, config.rows, config.seed),
        header: CIDDS_HEADER.iter().map(|s| s.to_string()).collect(),
    }
}

/// Write the table as a CIDDS-layout CSV for the ingest pipeline.
pub fn write_synth_csv(config: &SynthConfig, path: &Path) -> io::Result<()> {
    let table = synth_table(config);
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", CIDDS_HEADER.join(","))?;
    for record in &table.records {
        writeln!(out, "{}", record.raw_fields.join(","))?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parity_alternates_every_feature() {
        let cfg = SynthConfig {
            rows: 10,
            seed: 1,
            kind: SynthKind::Parity,
            domain: DomainTag::Cidds1Internal,
        };
        let table = synth_table(&cfg);
        assert_eq!(table.len(), 10);
        for pair in table.records.windows(2) {
            assert_ne!(pair[0].dst_port, pair[1].dst_port);
            assert_ne!(pair[0].proto, pair[1].proto);
            assert_ne!(pair[0].bytes, pair[1].bytes);
        }
        assert!(table
            .records
            .iter()
            .all(|r| r.binary_label == BinaryLabel::Benign));
    }

    #[test]
    fn port_rule_is_every_fourth_and_separated() {
        let cfg = SynthConfig {
            rows: 400,
            seed: 9,
            kind: SynthKind::PortRule,
            domain: DomainTag::Cidds1Internal,
        };
        let table = synth_table(&cfg);
        let malicious: Vec<_> = table
            .records
            .iter()
            .filter(|r| r.binary_label == BinaryLabel::Malicious)
            .collect();
        assert_eq!(malicious.len(), 100);
        for r in &table.records {
            let is_attack = r.order_index % 4 == 3;
            assert_eq!(r.binary_label == BinaryLabel::Malicious, is_attack);
            if is_attack {
                assert!(r.dst_port >= 58000);
                assert_eq!(r.fine_label, FineLabel::Dos);
            } else {
                assert!(r.dst_port <= 443);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            rows: 50,
            seed: 42,
            kind: SynthKind::PortRule,
            domain: DomainTag::Cidds2,
        };
        let a = synth_table(&cfg);
        let b = synth_table(&cfg);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.raw_fields, rb.raw_fields);
        }
    }

    #[test]
    fn external_domain_uses_unknown_suspicious_labels() {
        let cfg = SynthConfig {
            rows: 8,
            seed: 3,
            kind: SynthKind::PortRule,
            domain: DomainTag::Cidds1External,
        };
        let table = synth_table(&cfg);
        for r in &table.records {
            match r.binary_label {
                BinaryLabel::Benign => assert_eq!(r.class_label, "unknown"),
                BinaryLabel::Malicious => assert_eq!(r.class_label, "suspicious"),
            }
        }
    }

    #[test]
    fn csv_round_trips_through_ingest() {
        use crate::ingest::{load_flow_table, SchemaMap};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.csv");
        let cfg = SynthConfig {
            rows: 60,
            seed: 5,
            kind: SynthKind::PortRule,
            domain: DomainTag::Cidds1Internal,
        };
        write_synth_csv(&cfg, &path).unwrap();
        let outcome =
            load_flow_table(&path, DomainTag::Cidds1Internal, true, &SchemaMap::default())
                .unwrap();
        assert_eq!(outcome.skipped, 0);
        let table = synth_table(&cfg);
        assert_eq!(outcome.table.len(), table.len());
        for (loaded, built) in outcome.table.records.iter().zip(&table.records) {
            assert_eq!(loaded.src_port, built.src_port);
            assert_eq!(loaded.dst_port, built.dst_port);
            assert_eq!(loaded.packets, built.packets);
            assert_eq!(loaded.bytes, built.bytes);
            assert_eq!(loaded.binary_label, built.binary_label);
            assert_eq!(loaded.fine_label, built.fine_label);
            assert!((loaded.duration - built.duration).abs() < 1e-9);
        }
    }
}
