//! CSV ingestion and export of gridded observations.
//!
//! Files have a header row; columns are `t`, then one column per spatial
//! coordinate, then one column per output, and optionally a trailing
//! `mask` column of 0/1 flags. Empty output cells are treated as missing.

use std::collections::HashMap;
use std::path::Path;

use physs_core::stprior::GridData;

use crate::error::{CliError, Result};

/// Column layout of a data file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schema {
    pub spatial_dims: usize,
}

fn parse(field: &str, line: usize, column: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| CliError::MalformedRow {
        line,
        reason: format!("column {column}: cannot parse '{field}'"),
    })
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

fn key(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Reads gridded data from CSV text.
pub fn parse_csv(text: &str, schema: Schema) -> Result<GridData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::MalformedRow {
            line: 1,
            reason: e.to_string(),
        })?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(CliError::NonGriddableData("empty file".into()));
    }
    let has_mask = header.last().map(|h| h == "mask").unwrap_or(false);
    let width = header.len();
    let outputs = width
        .checked_sub(1 + schema.spatial_dims + usize::from(has_mask))
        .filter(|p| *p > 0)
        .ok_or_else(|| CliError::MalformedRow {
            line: 1,
            reason: format!(
                "header has {width} columns; need t, {} spatial and at least one output",
                schema.spatial_dims
            ),
        })?;

    struct Row {
        t: f64,
        s: Vec<f64>,
        y: Vec<Option<f64>>,
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| CliError::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        if record.len() != width {
            return Err(CliError::MalformedRow {
                line,
                reason: format!("{} fields, expected {width}", record.len()),
            });
        }
        let t = parse(&record[0], line, &header[0])?;
        let s: Vec<f64> = (0..schema.spatial_dims)
            .map(|d| parse(&record[1 + d], line, &header[1 + d]))
            .collect::<Result<_>>()?;
        if !t.is_finite() || s.iter().any(|v| !v.is_finite()) {
            return Err(CliError::MalformedRow {
                line,
                reason: "non-finite coordinate".into(),
            });
        }
        let keep = if has_mask {
            match record[width - 1].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => {
                    return Err(CliError::MalformedRow {
                        line,
                        reason: format!("mask value '{other}'"),
                    })
                }
            }
        } else {
            true
        };
        let y: Vec<Option<f64>> = (0..outputs)
            .map(|p| {
                let c = 1 + schema.spatial_dims + p;
                let f = record[c].trim();
                if f.is_empty() || !keep {
                    Ok(None)
                } else {
                    parse(f, line, &header[c]).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        rows.push(Row { t, s, y });
    }
    if rows.is_empty() {
        return Err(CliError::NonGriddableData("no data rows".into()));
    }
    let mut times: Vec<f64> = rows.iter().map(|r| r.t).collect();
    times.sort_by(|a, b| a.total_cmp(b));
    times.dedup_by(|a, b| a.to_bits() == b.to_bits());
    let mut locations: Vec<Vec<f64>> = rows.iter().map(|r| r.s.clone()).collect();
    locations.sort_by(|a, b| lex_cmp(a, b));
    locations.dedup_by(|a, b| key(a) == key(b));
    let t_index: HashMap<u64, usize> = times.iter().enumerate().map(|(i, t)| (t.to_bits(), i)).collect();
    let s_index: HashMap<Vec<u64>, usize> = locations.iter().enumerate().map(|(i, s)| (key(s), i)).collect();
    let n = times.len() * locations.len() * outputs;
    let mut values = vec![0.0; n];
    let mut mask = vec![false; n];
    let mut seen = vec![false; times.len() * locations.len()];
    for (i, r) in rows.iter().enumerate() {
        let ti = t_index[&r.t.to_bits()];
        let si = s_index[&key(&r.s)];
        let cell = ti * locations.len() + si;
        if seen[cell] {
            return Err(CliError::NonGriddableData(format!(
                "line {} repeats the cell t={}, s={:?}",
                i + 2,
                r.t,
                r.s
            )));
        }
        seen[cell] = true;
        for (p, y) in r.y.iter().enumerate() {
            if let Some(v) = y {
                values[cell * outputs + p] = *v;
                mask[cell * outputs + p] = true;
            }
        }
    }
    Ok(GridData::new(times, locations, values, mask, outputs)?)
}

pub fn load_csv(path: impl AsRef<Path>, schema: Schema) -> Result<GridData> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| CliError::io(path.as_ref(), e))?;
    parse_csv(&text, schema)
}

/// Formats with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Writes every grid cell; missing outputs become empty fields.
pub fn grid_to_csv(grid: &GridData, output_names: &[String]) -> String {
    let dims = grid.locations.first().map(|l| l.len()).unwrap_or(0);
    let mut out = String::from("t");
    for d in 0..dims {
        out.push_str(&format!(",s{}", d + 1));
    }
    for p in 0..grid.outputs {
        match output_names.get(p) {
            Some(n) => out.push_str(&format!(",{n}")),
            None => out.push_str(&format!(",y{}", p + 1)),
        }
    }
    out.push('\n');
    for (ti, t) in grid.times.iter().enumerate() {
        for (si, s) in grid.locations.iter().enumerate() {
            out.push_str(&fmt_f64(*t));
            for v in s {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            for p in 0..grid.outputs {
                out.push(',');
                if let Some(v) = grid.value(ti, si, p) {
                    out.push_str(&fmt_f64(v));
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn save_csv(grid: &GridData, output_names: &[String], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), grid_to_csv(grid, output_names)).map_err(|e| CliError::io(path.as_ref(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_D: Schema = Schema { spatial_dims: 1 };

    #[test]
    fn empty_file_is_an_error() {
        assert!(parse_csv("", ONE_D).is_err());
        assert!(parse_csv("t,x,y\n", ONE_D).is_err());
    }

    #[test]
    fn complete_grid_has_full_mask() {
        let g = parse_csv("t,x,y\n0,0,1\n0,1,2\n1,0,3\n1,1,4\n", ONE_D).unwrap();
        assert_eq!(g.times, vec![0.0, 1.0]);
        assert_eq!(g.locations.len(), 2);
        assert!(g.mask.iter().all(|m| *m));
        assert_eq!(g.value(1, 0, 0), Some(3.0));
    }

    #[test]
    fn missing_cells_and_outputs_are_masked() {
        let g = parse_csv("t,x,a,b\n0,0,1,\n1,1,3,4\n", ONE_D).unwrap();
        assert_eq!(g.value(0, 0, 1), None);
        assert_eq!(g.value(0, 1, 0), None);
        assert_eq!(g.value(1, 1, 1), Some(4.0));
    }

    #[test]
    fn malformed_row_reports_line() {
        match parse_csv("t,x,y\n0,0,1\n0,abc,2\n", ONE_D) {
            Err(CliError::MalformedRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_cell_is_not_griddable() {
        assert!(matches!(
            parse_csv("t,x,y\n0,0,1\n0,0,2\n", ONE_D),
            Err(CliError::NonGriddableData(_))
        ));
    }

    #[test]
    fn mask_column() {
        let g = parse_csv("t,x,y,mask\n0,0,1,1\n0,1,2,0\n", ONE_D).unwrap();
        assert_eq!(g.value(0, 1, 0), None);
        assert_eq!(g.num_observed(), 1);
    }

    #[test]
    fn round_trip_is_exact() {
        let g = parse_csv("t,x,y\n0.1,0.3,0.7\n0.1,0.9,1e-300\n", ONE_D).unwrap();
        let text = grid_to_csv(&g, &["y".into()]);
        assert_eq!(parse_csv(&text, ONE_D).unwrap(), g);
    }
}
