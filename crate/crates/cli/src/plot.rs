//! Plot-ready exports with a sidecar schema describing the columns.

use std::path::Path;

use serde::{Deserialize, Serialize};

use loci_core::artifact::{self, loci_columns, loci_row, table_params, Envelope, Stamp};
use loci_core::loci::LociTable;

use crate::commands::{polar_columns, polar_rows, ConvexityReport, Context, KIND_CONVEXITY, KIND_LOCI};
use crate::output::Session;
use crate::{Failure, Outcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub file: String,
    pub format: String,
    pub source_kind: String,
    /// Present for CSV: rows follow one `#` stamp line and a header row.
    pub columns: Vec<Column>,
    pub rows: usize,
    #[serde(flatten)]
    pub stamp: Stamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarPoint {
    pub sample: usize,
    pub angle: f64,
    pub radius: f64,
    pub t_conj: f64,
}

fn columns(list: Vec<(String, String)>) -> Vec<Column> {
    list.into_iter().map(|(name, description)| Column { name, description }).collect()
}

fn polar_points(r: &ConvexityReport) -> Vec<PolarPoint> {
    r.boundary
        .points
        .iter()
        .zip(&r.boundary.t_conj)
        .enumerate()
        .map(|(sample, (p, &t_conj))| PolarPoint {
            sample,
            angle: p[1].atan2(p[0]),
            radius: p[0].hypot(p[1]),
            t_conj,
        })
        .collect()
}

pub fn export(ctx: &Context, input: &Path, json: bool) -> Result<Outcome, Failure> {
    let text = std::fs::read_to_string(input).map_err(|e| Failure::Usage(format!("{}: {e}", input.display())))?;
    let head: serde_json::Value = serde_json::from_str(&text).map_err(loci_core::Error::from)?;
    let kind = head.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string();
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("export").to_string();
    let (ext, format) = if json { ("json", "json") } else { ("csv", "csv") };
    let name = format!("{stem}.plot.{ext}");
    let schema_name = format!("{stem}.plot.schema.json");
    let mut session = Session::open(&ctx.out, "export-plotdata")?;

    let (stamp, cols, rows) = if kind == KIND_LOCI {
        let env: Envelope<LociTable> = serde_json::from_str(&text).map_err(loci_core::Error::from)?;
        session.scenario(input, &env.stamp.hash);
        let params = table_params(&env.data);
        let cols = loci_columns(params);
        let path = session.file(&name);
        if json {
            artifact::write_json(&path, &env.stamp, KIND_LOCI, &env.data)?;
        } else {
            let header: Vec<String> = cols.iter().map(|c| c.0.clone()).collect();
            artifact::write_csv(&path, Some(&env.stamp), &header, env.data.records.iter().map(|r| loci_row(r, params)))?;
        }
        (env.stamp, cols, env.data.records.len())
    } else if kind == KIND_CONVEXITY {
        let env: Envelope<ConvexityReport> = serde_json::from_str(&text).map_err(loci_core::Error::from)?;
        session.scenario(input, &env.stamp.hash);
        if env.data.boundary.points.iter().any(|p| p.len() != 2) {
            return Err(Failure::Usage("polar export needs a planar boundary".into()));
        }
        let cols = polar_columns();
        let path = session.file(&name);
        if json {
            artifact::write_json(&path, &env.stamp, "polar-boundary", &polar_points(&env.data))?;
        } else {
            let header: Vec<String> = cols.iter().map(|c| c.0.clone()).collect();
            artifact::write_csv(&path, Some(&env.stamp), &header, polar_rows(&env.data.boundary))?;
        }
        (env.stamp, cols, env.data.boundary.points.len())
    } else {
        return Err(Failure::Usage(format!("{}: unsupported artifact kind {kind:?}", input.display())));
    };

    let schema = Schema {
        file: name.clone(),
        format: format.to_string(),
        source_kind: kind,
        columns: columns(cols),
        rows,
        stamp,
    };
    let mut text = serde_json::to_string_pretty(&schema).map_err(loci_core::Error::from)?;
    text.push('\n');
    std::fs::write(session.file(&schema_name), text).map_err(loci_core::Error::from)?;
    ctx.say(format!("export-plotdata: {rows} rows to {name}"));
    session.finish("ok")?;
    Ok(Outcome::Ok)
}
