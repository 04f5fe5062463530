//! Reader for the numeric-matrix subset of Matpower case files.
//!
//! Only `mpc.baseMVA`, `mpc.bus`, `mpc.gen` and `mpc.branch` are interpreted;
//! other assignments are skipped. Resistance, line charging, shunts and taps
//! are read and then dropped, since the model is lossless.

use std::collections::HashMap;

use log::warn;

use super::{Branch, Bus, BusKind, Generator, GridCase};
use crate::error::{GridError, Result};

struct Matrix {
    rows: Vec<Vec<f64>>,
    /// Source line of each row, 1-based.
    lines: Vec<usize>,
}

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> GridError {
    GridError::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn scan(text: &str) -> Result<(Option<f64>, HashMap<String, Matrix>)> {
    let mut base = None;
    let mut mats = HashMap::new();
    // (name, matrix, current row)
    let mut open: Option<(String, Matrix, Vec<f64>)> = None;

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let body = raw.split('%').next().unwrap_or("");
        let mut rest: &str = body;
        let mut offset = 0usize;

        if open.is_none() {
            let Some(pos) = body.find("mpc.") else { continue };
            let after = &body[pos + 4..];
            let Some(eq) = after.find('=') else { continue };
            let name = after[..eq].trim().to_string();
            let rhs = &after[eq + 1..];
            let rhs_offset = pos + 4 + eq + 1;
            if let Some(b) = rhs.find('[') {
                open = Some((name, Matrix { rows: vec![], lines: vec![] }, vec![]));
                rest = &rhs[b + 1..];
                offset = rhs_offset + b + 1;
            } else {
                if name == "baseMVA" {
                    let v = rhs.trim().trim_end_matches(';').trim();
                    base = Some(v.parse::<f64>().map_err(|_| {
                        parse_err(line_no, rhs_offset + 1, format!("bad baseMVA value '{v}'"))
                    })?);
                }
                continue;
            }
        }

        let (name, mat, row) = open.as_mut().expect("matrix open");
        let mut closed = false;
        let mut tok_start: Option<usize> = None;
        let bytes = rest.as_bytes();
        let mut i = 0;
        while i <= bytes.len() {
            let c = if i < bytes.len() { bytes[i] as char } else { '\n' };
            let is_sep = c.is_whitespace() || c == ',' || c == ';' || c == ']' || c == '\n';
            if is_sep {
                if let Some(s) = tok_start.take() {
                    let tok = &rest[s..i];
                    let v = tok.parse::<f64>().map_err(|_| {
                        parse_err(line_no, offset + s + 1, format!("bad number '{tok}' in mpc.{name}"))
                    })?;
                    row.push(v);
                }
                if (c == ';' || c == ']' || c == '\n') && !row.is_empty() {
                    mat.rows.push(std::mem::take(row));
                    mat.lines.push(line_no);
                }
                if c == ']' {
                    closed = true;
                    break;
                }
            } else if tok_start.is_none() {
                tok_start = Some(i);
            }
            i += 1;
        }
        if closed {
            let (name, mat, _) = open.take().expect("matrix open");
            mats.insert(name, mat);
        }
    }
    if let Some((name, _, _)) = open {
        return Err(parse_err(text.lines().count(), 1, format!("unterminated matrix mpc.{name}")));
    }
    Ok((base, mats))
}

fn need_cols(m: &Matrix, name: &str, cols: usize) -> Result<()> {
    for (row, &line) in m.rows.iter().zip(&m.lines) {
        if row.len() < cols {
            return Err(parse_err(
                line,
                1,
                format!("mpc.{name} row has {} columns, need at least {cols}", row.len()),
            ));
        }
    }
    Ok(())
}

/// Parse Matpower text into a [`GridCase`] without validating it.
pub fn parse_matpower(text: &str) -> Result<GridCase> {
    let (base, mats) = scan(text)?;
    let base_mva = base.unwrap_or(100.0);
    let get = |name: &str| {
        mats.get(name)
            .ok_or_else(|| parse_err(1, 1, format!("missing mpc.{name} matrix")))
    };
    let bus_m = get("bus")?;
    let gen_m = get("gen")?;
    let br_m = get("branch")?;
    need_cols(bus_m, "bus", 9)?;
    need_cols(gen_m, "gen", 8)?;
    need_cols(br_m, "branch", 11)?;

    let mut zeroed = 0usize;
    let mut buses = Vec::new();
    let mut slack_angle = 0.0;
    for row in &bus_m.rows {
        let kind = match row[1] as i64 {
            1 => BusKind::Load,
            2 => BusKind::Generator,
            3 => BusKind::Slack,
            _ => continue,
        };
        if row[4] != 0.0 || row[5] != 0.0 {
            zeroed += 1;
        }
        if kind == BusKind::Slack {
            slack_angle = row[8].to_radians();
        }
        buses.push(Bus {
            id: row[0] as usize,
            kind,
            pd: row[2] / base_mva,
            qd: row[3] / base_mva,
            vspec: Some(row[7]),
        });
    }

    let mut generators = Vec::new();
    let mut vg: HashMap<usize, f64> = HashMap::new();
    for row in gen_m.rows.iter().filter(|r| r[7] > 0.0) {
        let bus_id = row[0] as usize;
        let Some(bus) = buses.iter_mut().find(|b| b.id == bus_id) else {
            continue;
        };
        if bus.kind == BusKind::Load {
            // generation at a PQ bus acts as negative demand
            bus.pd -= row[1] / base_mva;
            bus.qd -= row[2] / base_mva;
            continue;
        }
        vg.entry(bus_id).or_insert(row[5]);
        generators.push(Generator {
            bus: bus_id,
            pg: row[1] / base_mva,
        });
    }
    for bus in buses.iter_mut() {
        match bus.kind {
            BusKind::Load => bus.vspec = None,
            BusKind::Generator if !vg.contains_key(&bus.id) => {
                warn!("bus {} is typed PV but has no in-service generator; treating as load", bus.id);
                bus.kind = BusKind::Load;
                bus.vspec = None;
            }
            _ => bus.vspec = vg.get(&bus.id).copied().or(bus.vspec),
        }
    }

    let mut branches = Vec::new();
    for (k, row) in br_m.rows.iter().enumerate() {
        if row[10] <= 0.0 {
            continue;
        }
        if row[2] != 0.0 || row[4] != 0.0 || (row[8] != 0.0 && row[8] != 1.0) || row[9] != 0.0 {
            zeroed += 1;
        }
        let x = row[3];
        branches.push(Branch {
            id: k + 1,
            from_bus: row[0] as usize,
            to_bus: row[1] as usize,
            b: if x != 0.0 { 1.0 / x.abs() } else { f64::INFINITY },
            rate_a: (row[5] / base_mva).powi(2),
        });
    }
    if zeroed > 0 {
        warn!("{zeroed} rows carried resistance, shunt or tap data; set to zero for the lossless model");
    }

    Ok(GridCase {
        base_mva,
        buses,
        branches,
        generators,
        slack_angle,
    })
}
