use std::collections::HashMap;

use super::{branch_defect, deg_to_rad, Branch, Bus, BusType, CaseError, Generator, GridCase};

const BUS_COLS: usize = 9;
const GEN_COLS: usize = 8;
const BRANCH_COLS: usize = 11;

struct Row {
    line: usize,
    values: Vec<f64>,
}

struct Table {
    header_line: usize,
    end_line: usize,
    rows: Vec<Row>,
}

enum Open {
    Matrix { name: String, table: Table },
    Skipped { name: String, closer: char },
}

/// Parses a MATPOWER-format case (baseMVA, bus, gen and branch matrices).
///
/// Other sections (gencost, bus_name, areas, ...) are skipped with a warning.
/// Out-of-service branches are dropped and a tap ratio of 0 is read as 1.
pub fn parse_case(text: &str) -> Result<GridCase, CaseError> {
    let mut base_mva: Option<(usize, f64)> = None;
    let mut tables: HashMap<String, Table> = HashMap::new();
    let mut open: Option<Open> = None;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let content = strip_comment(raw).trim();
        if content.is_empty() {
            continue;
        }

        if let Some(state) = open.take() {
            match state {
                Open::Matrix { name, mut table } => {
                    let (body, closed) = match content.find(']') {
                        Some(p) => (&content[..p], true),
                        None => (content, false),
                    };
                    push_rows(&mut table, body, line)?;
                    if closed {
                        table.end_line = line;
                        tables.insert(name, table);
                    } else {
                        open = Some(Open::Matrix { name, table });
                    }
                }
                Open::Skipped { name, closer } => {
                    if !content.contains(closer) {
                        open = Some(Open::Skipped { name, closer });
                    }
                }
            }
            continue;
        }

        if content.starts_with("function") || content == "end" || content.starts_with("return") {
            continue;
        }
        let Some(rest) = content.strip_prefix("mpc.") else {
            return Err(CaseError::MalformedHeader {
                line,
                text: content.to_string(),
            });
        };
        let Some((name, rhs)) = rest.split_once('=') else {
            return Err(CaseError::MalformedHeader {
                line,
                text: content.to_string(),
            });
        };
        let name = name.trim();
        let rhs = rhs.trim();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(CaseError::MalformedHeader {
                line,
                text: content.to_string(),
            });
        }
        let required = matches!(name, "bus" | "gen" | "branch");

        if let Some(after) = rhs.strip_prefix('[') {
            if !required {
                log::warn!("line {line}: ignoring section mpc.{name}");
                if !after.contains(']') {
                    open = Some(Open::Skipped {
                        name: name.to_string(),
                        closer: ']',
                    });
                }
                continue;
            }
            let mut table = Table {
                header_line: line,
                end_line: line,
                rows: Vec::new(),
            };
            match after.find(']') {
                Some(p) => {
                    push_rows(&mut table, &after[..p], line)?;
                    tables.insert(name.to_string(), table);
                }
                None => {
                    push_rows(&mut table, after, line)?;
                    open = Some(Open::Matrix {
                        name: name.to_string(),
                        table,
                    });
                }
            }
        } else if let Some(after) = rhs.strip_prefix('{') {
            if required {
                return Err(CaseError::MalformedHeader {
                    line,
                    text: content.to_string(),
                });
            }
            log::warn!("line {line}: ignoring section mpc.{name}");
            if !after.contains('}') {
                open = Some(Open::Skipped {
                    name: name.to_string(),
                    closer: '}',
                });
            }
        } else if required {
            return Err(CaseError::MalformedHeader {
                line,
                text: content.to_string(),
            });
        } else if name == "baseMVA" {
            let token = rhs.trim_end_matches(';').trim();
            let value: f64 = token.parse().map_err(|_| CaseError::NonNumeric {
                line,
                token: token.to_string(),
            })?;
            if !(value.is_finite() && value > 0.0) {
                return Err(CaseError::BadBase { line });
            }
            base_mva = Some((line, value));
        } else if name != "version" {
            log::warn!("line {line}: ignoring field mpc.{name}");
        }
    }

    if let Some(state) = open {
        let name = match state {
            Open::Matrix { name, .. } | Open::Skipped { name, .. } => name,
        };
        log::debug!("section mpc.{name} still open at end of input");
        return Err(CaseError::Unterminated { line: last_line });
    }

    let (_, base) = base_mva.ok_or(CaseError::BadBase { line: last_line })?;
    let bus_table = tables
        .remove("bus")
        .ok_or(CaseError::NoBuses { line: last_line })?;
    if bus_table.rows.is_empty() {
        return Err(CaseError::NoBuses {
            line: bus_table.end_line,
        });
    }

    let mut buses = Vec::with_capacity(bus_table.rows.len());
    let mut ids: HashMap<usize, usize> = HashMap::new();
    let mut slack_seen = false;
    for row in &bus_table.rows {
        need(row, BUS_COLS, "bus")?;
        let v = &row.values;
        let id = as_id(v[0], row.line)?;
        let kind = match v[1] as i64 {
            1 if v[1] == 1.0 => BusType::Pq,
            2 if v[1] == 2.0 => BusType::Pv,
            3 if v[1] == 3.0 => BusType::Slack,
            _ => {
                return Err(CaseError::BadBusType {
                    line: row.line,
                    code: v[1],
                })
            }
        };
        if kind == BusType::Slack {
            if slack_seen {
                return Err(CaseError::MultipleSlack { line: row.line, bus: id });
            }
            slack_seen = true;
        }
        if ids.insert(id, buses.len()).is_some() {
            return Err(CaseError::DuplicateBus { line: row.line, bus: id });
        }
        buses.push(Bus {
            id,
            kind,
            load_p: v[2] / base,
            load_q: v[3] / base,
            shunt_g: v[4] / base,
            shunt_b: v[5] / base,
            vm: v[7],
            va: deg_to_rad(v[8]),
            base_kv: v.get(9).copied().unwrap_or(0.0),
        });
    }
    if !slack_seen {
        return Err(CaseError::NoSlack {
            line: bus_table.header_line,
        });
    }

    let mut gens = Vec::new();
    if let Some(table) = tables.remove("gen") {
        for row in &table.rows {
            need(row, GEN_COLS, "gen")?;
            let v = &row.values;
            let bus = known_bus(&ids, v[0], row.line)?;
            gens.push(Generator {
                bus,
                p_setpoint: v[1] / base,
                q_output: v[2] / base,
                q_max: v[3] / base,
                q_min: v[4] / base,
                vm_setpoint: v[5],
                in_service: v[7] > 0.0,
            });
        }
    }

    let mut branches = Vec::new();
    if let Some(table) = tables.remove("branch") {
        for row in &table.rows {
            need(row, BRANCH_COLS, "branch")?;
            let v = &row.values;
            let from_bus = known_bus(&ids, v[0], row.line)?;
            let to_bus = known_bus(&ids, v[1], row.line)?;
            if v[10] <= 0.0 {
                continue;
            }
            let branch = Branch {
                from_bus,
                to_bus,
                r: v[2],
                x: v[3],
                charging_b: v[4],
                tap: if v[8] == 0.0 { 1.0 } else { v[8] },
                shift: deg_to_rad(v[9]),
                in_service: true,
            };
            if let Some(reason) = branch_defect(&branch) {
                return Err(CaseError::InvalidBranch {
                    line: row.line,
                    reason,
                });
            }
            branches.push(branch);
        }
    }

    GridCase::new(base, buses, branches, gens)
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(p) => &line[..p],
        None => line,
    }
}

fn push_rows(table: &mut Table, body: &str, line: usize) -> Result<(), CaseError> {
    for chunk in body.split(';') {
        let tokens: Vec<&str> = chunk
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            continue;
        }
        let values = tokens
            .iter()
            .map(|t| {
                t.parse::<f64>().map_err(|_| CaseError::NonNumeric {
                    line,
                    token: t.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        table.rows.push(Row { line, values });
    }
    Ok(())
}

fn need(row: &Row, needed: usize, table: &'static str) -> Result<(), CaseError> {
    if row.values.len() < needed {
        return Err(CaseError::ShortRow {
            line: row.line,
            table,
            found: row.values.len(),
            needed,
        });
    }
    Ok(())
}

fn as_id(value: f64, line: usize) -> Result<usize, CaseError> {
    if value >= 1.0 && value.fract() == 0.0 && value < 1e15 {
        Ok(value as usize)
    } else {
        Err(CaseError::NonNumeric {
            line,
            token: value.to_string(),
        })
    }
}

fn known_bus(ids: &HashMap<usize, usize>, value: f64, line: usize) -> Result<usize, CaseError> {
    let id = as_id(value, line)?;
    if ids.contains_key(&id) {
        Ok(id)
    } else {
        Err(CaseError::UnknownBus { line, bus: id })
    }
}
