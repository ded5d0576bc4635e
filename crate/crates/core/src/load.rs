//! Readers and writers for the AFC, AVL and topology input files.
//!
//! Malformed rows are collected as [`RowError`]s instead of failing the whole
//! file; only unreadable input or a wrong header is fatal.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AfcRecord, LineKey, NetworkTopology, Stop, TrainRun};
use crate::time::{format_timestamp, parse_timestamp};

pub const AFC_HEADER: [&str; 5] = [
    "passenger_id",
    "entry_station",
    "entry_time",
    "exit_station",
    "exit_time",
];

pub const AVL_HEADER: [&str; 6] = [
    "train_id",
    "line",
    "direction",
    "station",
    "arrival_time",
    "departure_time",
];

/// A rejected input row. `line` is the 1-based line number in the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub rejected: Vec<RowError>,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn check_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str], path: &Path) -> Result<()> {
    let header = rdr
        .headers()
        .map_err(|e| Error::format(path, format!("unreadable header: {e}")))?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::format(
            path,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

pub fn load_afc(path: &Path, topo: &NetworkTopology) -> Result<Loaded<AfcRecord>> {
    read_afc(open(path)?, topo, path)
}

pub fn read_afc<R: Read>(reader: R, topo: &NetworkTopology, path: &Path) -> Result<Loaded<AfcRecord>> {
    let mut rdr = csv_reader(reader);
    check_header(&mut rdr, &AFC_HEADER, path)?;
    let mut out = Loaded {
        records: Vec::new(),
        rejected: Vec::new(),
    };
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                if e.is_io_error() {
                    return Err(Error::format(path, e.to_string()));
                }
                out.rejected.push(RowError { line, reason: e.to_string() });
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        match parse_afc_row(&row, topo) {
            Ok(rec) => out.records.push(rec),
            Err(reason) => out.rejected.push(RowError { line, reason }),
        }
    }
    Ok(out)
}

fn parse_afc_row(row: &csv::StringRecord, topo: &NetworkTopology) -> std::result::Result<AfcRecord, String> {
    if row.len() != AFC_HEADER.len() {
        return Err(format!("expected {} fields, found {}", AFC_HEADER.len(), row.len()));
    }
    let station = |i: usize| -> std::result::Result<String, String> {
        let s = row[i].to_string();
        if topo.has_station(&s) {
            Ok(s)
        } else {
            Err(format!("unknown station id {s:?}"))
        }
    };
    let time = |i: usize| -> std::result::Result<i64, String> {
        parse_timestamp(&row[i]).ok_or_else(|| format!("malformed timestamp {:?}", &row[i]))
    };
    if row[0].is_empty() {
        return Err("empty passenger id".into());
    }
    let rec = AfcRecord {
        passenger_id: row[0].to_string(),
        entry_station: station(1)?,
        entry_time: time(2)?,
        exit_station: station(3)?,
        exit_time: time(4)?,
    };
    if rec.exit_time <= rec.entry_time {
        return Err("non-positive journey span".into());
    }
    if rec.entry_station == rec.exit_station {
        return Err("entry station equals exit station".into());
    }
    Ok(rec)
}

pub fn write_afc<W: Write>(writer: W, records: &[AfcRecord]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(AFC_HEADER)?;
    for r in records {
        w.write_record([
            r.passenger_id.as_str(),
            &r.entry_station,
            &format_timestamp(r.entry_time),
            &r.exit_station,
            &format_timestamp(r.exit_time),
        ])?;
    }
    w.flush()
}

pub fn load_avl(path: &Path, topo: &NetworkTopology) -> Result<Loaded<TrainRun>> {
    read_avl(open(path)?, topo, path)
}

/// Rows are grouped by `train_id` in order of first appearance. A train
/// whose assembled stop list violates the run invariants, or that has any
/// malformed row, is rejected whole.
pub fn read_avl<R: Read>(reader: R, topo: &NetworkTopology, path: &Path) -> Result<Loaded<TrainRun>> {
    struct Acc {
        first_line: u64,
        run: TrainRun,
        poisoned: bool,
    }

    let mut rdr = csv_reader(reader);
    check_header(&mut rdr, &AVL_HEADER, path)?;
    let mut rejected = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut trains: HashMap<String, Acc> = HashMap::new();

    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                if e.is_io_error() {
                    return Err(Error::format(path, e.to_string()));
                }
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                rejected.push(RowError { line, reason: e.to_string() });
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let Some(train_id) = row.get(0).filter(|s| !s.is_empty()).map(str::to_string) else {
            rejected.push(RowError { line, reason: "empty train id".into() });
            continue;
        };
        let acc = trains.entry(train_id.clone()).or_insert_with(|| {
            order.push(train_id.clone());
            Acc {
                first_line: line,
                run: TrainRun {
                    train_id: train_id.clone(),
                    line: LineKey::new(row.get(1).unwrap_or(""), row.get(2).unwrap_or("")),
                    stops: Vec::new(),
                },
                poisoned: false,
            }
        });
        match parse_avl_row(&row, topo) {
            Ok((key, stop)) if key == acc.run.line => acc.run.stops.push(stop),
            Ok((key, _)) => {
                rejected.push(RowError {
                    line,
                    reason: format!("train {train_id} changes line to {key}"),
                });
                acc.poisoned = true;
            }
            Err(reason) => {
                rejected.push(RowError { line, reason });
                acc.poisoned = true;
            }
        }
    }

    let mut records = Vec::new();
    for id in order {
        let acc = trains.remove(&id).expect("train recorded in order");
        if acc.poisoned {
            continue;
        }
        match acc.run.check() {
            Ok(()) => records.push(acc.run),
            Err(reason) => rejected.push(RowError {
                line: acc.first_line,
                reason: format!("train {id}: {reason}"),
            }),
        }
    }
    rejected.sort_by_key(|r| r.line);
    Ok(Loaded { records, rejected })
}

fn parse_avl_row(row: &csv::StringRecord, topo: &NetworkTopology) -> std::result::Result<(LineKey, Stop), String> {
    if row.len() != AVL_HEADER.len() {
        return Err(format!("expected {} fields, found {}", AVL_HEADER.len(), row.len()));
    }
    if !topo.has_station(&row[3]) {
        return Err(format!("unknown station id {:?}", &row[3]));
    }
    let arrival = parse_timestamp(&row[4]).ok_or_else(|| format!("malformed timestamp {:?}", &row[4]))?;
    let departure = parse_timestamp(&row[5]).ok_or_else(|| format!("malformed timestamp {:?}", &row[5]))?;
    Ok((
        LineKey::new(&row[1], &row[2]),
        Stop {
            station: row[3].to_string(),
            arrival,
            departure,
        },
    ))
}

pub fn write_avl<W: Write>(writer: W, runs: &[TrainRun]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(AVL_HEADER)?;
    for r in runs {
        for s in &r.stops {
            w.write_record([
                r.train_id.as_str(),
                &r.line.line,
                &r.line.direction,
                &s.station,
                &format_timestamp(s.arrival),
                &format_timestamp(s.departure),
            ])?;
        }
    }
    w.flush()
}

pub fn load_topology(path: &Path) -> Result<NetworkTopology> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_topology(&text).map_err(|e| match e {
        Error::Topology(msg) => Error::format(path, msg),
        other => other,
    })
}

pub fn parse_topology(text: &str) -> Result<NetworkTopology> {
    serde_json::from_str(text).map_err(|e| Error::Topology(e.to_string()))
}

pub fn topology_json(topo: &NetworkTopology) -> String {
    serde_json::to_string_pretty(topo).expect("topology serializes")
}
