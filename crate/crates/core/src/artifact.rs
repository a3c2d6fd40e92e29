//! CSV and JSON artifacts stamped with the scenario hash and tolerances.
//!
//! CSV files start with one `#` line
//! (`# scenario=<name> hash=<sha256> tolerances=<json>`) followed by a
//! header row; absent values are empty fields. JSON files wrap their payload
//! in an [`Envelope`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::loci::{CutClass, CutStatus, LociRecord, LociTable};
use crate::scenario::LoadedScenario;

/// Scenario identity written into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub scenario: String,
    pub hash: String,
    pub tolerances: serde_json::Value,
}

impl Stamp {
    pub fn of(s: &LoadedScenario) -> Self {
        Self {
            scenario: s.scenario.name.clone(),
            hash: s.hash.clone(),
            tolerances: serde_json::to_value(s.scenario.tolerances).expect("tolerances serialize"),
        }
    }

    pub fn comment_line(&self) -> String {
        format!("# scenario={} hash={} tolerances={}", self.scenario, self.hash, self.tolerances)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub kind: String,
    #[serde(flatten)]
    pub stamp: Stamp,
    pub data: T,
}

pub fn write_json<T: Serialize>(path: &Path, stamp: &Stamp, kind: &str, data: &T) -> Result<()> {
    let env = Envelope {
        kind: kind.to_string(),
        stamp: stamp.clone(),
        data,
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &env)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Envelope<T>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes the stamp line, the header row and the rows.
pub fn write_csv<I>(path: &Path, stamp: Option<&Stamp>, columns: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut file = BufWriter::new(File::create(path)?);
    if let Some(s) = stamp {
        writeln!(file, "{}", s.comment_line())?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    w.write_record(columns)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trip decimal; empty when absent.
pub fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn status_name(s: CutStatus) -> &'static str {
    match s {
        CutStatus::Cut => "cut",
        CutStatus::NoneUpTo => "none-up-to",
        CutStatus::UndeterminedBeyond => "undetermined-beyond",
    }
}

pub fn class_name(c: CutClass) -> &'static str {
    match c {
        CutClass::SigmaPoint => "sigma-point",
        CutClass::GammaPoint => "gamma-point",
        CutClass::Undetermined => "undetermined",
    }
}

/// Column names and one-line descriptions of the loci table.
pub fn loci_columns(params: usize) -> Vec<(String, String)> {
    let mut cols = vec![("sample".to_string(), "flat mesh index, first axis slowest".to_string())];
    for i in 0..params {
        cols.push((format!("param_{i}"), format!("source parameter {i} (angle for point sources)")));
    }
    for (name, what) in [
        ("t_conj", "first conjugate time; empty if none up to searched_to"),
        ("multiplicity", "number of vanishing singular values at t_conj"),
        ("s_min", "smallest singular value of the position block at t_conj"),
        ("det_sign_change", "det of the position block changes sign across t_conj"),
        ("detector2", "root of the smallest eigenvalue of K(x,t) - K_U"),
        ("k_dot_min_eig", "smallest eigenvalue of dK/dt at detector2"),
        ("searched_to", "time up to which the frame was propagated"),
        ("t_cut", "cut time, clamped to t_conj"),
        ("t_cut_raw", "cut time before clamping"),
        ("cut_status", "cut | none-up-to | undetermined-beyond"),
        ("cut_decided_to", "horizon or last decided time"),
        ("correction", "field correction Lip*h at the decision"),
        ("class", "sigma-point | gamma-point | undetermined"),
        ("gamma_flag", "|t_cut - t_conj| <= time tolerance"),
        ("competitor", "competing ray with the widest arrival angle"),
        ("competitor_angle", "angle between arrival velocities, radians"),
        ("ordering_violation", "t_cut_raw > t_conj + time tolerance"),
        ("error", "per-sample failure message"),
    ] {
        cols.push((name.to_string(), what.to_string()));
    }
    cols
}

pub fn loci_row(r: &LociRecord, params: usize) -> Vec<String> {
    let mut row = vec![r.sample.to_string()];
    for i in 0..params {
        row.push(num(r.parameter.get(i).copied()));
    }
    row.extend([
        num(r.t_conj),
        r.multiplicity.to_string(),
        num(r.conj_s_min),
        opt(r.det_sign_change),
        num(r.detector2),
        num(r.k_dot_min_eig),
        num(r.searched_to),
        num(r.t_cut),
        num(r.t_cut_raw),
        r.cut_status.map(status_name).unwrap_or_default().to_string(),
        num(r.cut_decided_to),
        num(r.correction),
        r.class.map(class_name).unwrap_or_default().to_string(),
        r.gamma_flag.to_string(),
        opt(r.competitor),
        num(r.competitor_angle),
        r.ordering_violation.to_string(),
        r.error.clone().unwrap_or_default(),
    ]);
    row
}

pub fn table_params(table: &LociTable) -> usize {
    table.records.iter().map(|r| r.parameter.len()).max().unwrap_or(0)
}

pub fn write_loci_csv(path: &Path, stamp: Option<&Stamp>, table: &LociTable) -> Result<()> {
    let params = table_params(table);
    let cols: Vec<String> = loci_columns(params).into_iter().map(|c| c.0).collect();
    write_csv(path, stamp, &cols, table.records.iter().map(|r| loci_row(r, params)))
}
