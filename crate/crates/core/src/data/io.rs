//! Plain-text series and adjacency files.
//!
//! Series: a header line `#interval_min=<k> channels=<D>` (optionally
//! `start_dow=<d>`), then one row per time step with `D·N` delimited cells in
//! channel-major column blocks (column `c·N + n` is channel `c` of node `n`).
//!
//! Adjacency: either an `N×N` delimited matrix, or an edge list of
//! `src dst weight` lines. Edge-list parsing applies when a `#edges` line is
//! present, when the first row is a non-numeric header (e.g. `from,to,cost`),
//! or when every row has three cells and the file cannot be a 3×3 matrix.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Series, TrafficGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c == ';' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect()
}

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

struct Header {
    interval_min: u32,
    channels: usize,
    start_dow: usize,
}

fn parse_header(path: &Path, line: &str) -> Result<Header> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| format_err(path, 1, "missing `#interval_min=<k> channels=<D>` header"))?;
    let mut interval = None;
    let mut channels = None;
    let mut start_dow = 0;
    for kv in body.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format_err(path, 1, format!("malformed header field `{kv}`")))?;
        let bad = |_| format_err(path, 1, format!("header field `{k}` has non-integer value `{v}`"));
        match k {
            "interval_min" => interval = Some(v.parse::<u32>().map_err(bad)?),
            "channels" => channels = Some(v.parse::<usize>().map_err(bad)?),
            "start_dow" => start_dow = v.parse::<usize>().map_err(bad)?,
            _ => {}
        }
    }
    match (interval, channels) {
        (Some(interval_min), Some(channels)) if channels > 0 => Ok(Header {
            interval_min,
            channels,
            start_dow,
        }),
        _ => Err(format_err(
            path,
            1,
            "header must declare interval_min and channels (> 0)",
        )),
    }
}

/// Reads a series file; `slots_per_day` follows from the declared interval.
pub fn load_series(path: impl AsRef<Path>) -> Result<Series> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| format_err(path, 1, "empty series file"))?;
    let header = parse_header(path, header.trim())?;
    let mut width = None;
    let mut rows: Vec<f64> = Vec::new();
    let mut steps = 0;
    for (i, line) in lines {
        let lineno = i + 1;
        let cells = fields(line);
        if cells.is_empty() {
            continue;
        }
        let w = *width.get_or_insert(cells.len());
        if cells.len() != w {
            return Err(format_err(
                path,
                lineno,
                format!("ragged row: {} cells, expected {w}", cells.len()),
            ));
        }
        for (col, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                format_err(path, lineno, format!("non-numeric cell `{cell}` in column {col}"))
            })?;
            rows.push(v);
        }
        steps += 1;
    }
    let width = width.ok_or_else(|| format_err(path, 2, "series has no data rows"))?;
    if width % header.channels != 0 {
        return Err(format_err(
            path,
            2,
            format!(
                "{width} columns cannot be split into {} channel blocks",
                header.channels
            ),
        ));
    }
    let nodes = width / header.channels;
    // rows are [T, D·N]; store as [D, N, T]
    let mut values = vec![0.0; width * steps];
    for t in 0..steps {
        for col in 0..width {
            values[col * steps + t] = rows[t * width + col];
        }
    }
    let tensor = Tensor::new(vec![header.channels, nodes, steps], values)?;
    Series::new(tensor, header.interval_min, header.start_dow)
}

pub fn write_series(path: impl AsRef<Path>, series: &Series) -> Result<()> {
    let path = path.as_ref();
    let (d, n, t) = (series.channels(), series.nodes(), series.len());
    let mut out = String::with_capacity(d * n * t * 10);
    out.push_str(&format!(
        "#interval_min={} channels={d} start_dow={}\n",
        series.interval_min, series.start_dow
    ));
    let data = series.values.data();
    for step in 0..t {
        for col in 0..d * n {
            if col > 0 {
                out.push(',');
            }
            out.push_str(&data[col * t + step].to_string());
        }
        out.push('\n');
    }
    write_text(path, &out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads an adjacency file for a graph of `n_nodes` nodes.
pub fn load_adjacency(path: impl AsRef<Path>, n_nodes: usize) -> Result<TrafficGraph> {
    let path = path.as_ref();
    let text = read(path)?;
    let mut force_edges = false;
    let mut rows: Vec<(usize, Vec<&str>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.starts_with('#') {
            if trimmed.trim_start_matches('#').trim() == "edges" {
                force_edges = true;
            }
            continue;
        }
        let cells = fields(trimmed);
        if !cells.is_empty() {
            rows.push((i + 1, cells));
        }
    }
    let has_header = rows
        .first()
        .is_some_and(|(_, c)| c.iter().any(|v| v.parse::<f64>().is_err()));
    let triples = rows.iter().all(|(_, c)| c.len() == 3);
    let is_edge_list = force_edges || has_header || (triples && (n_nodes != 3 || rows.len() != n_nodes));
    let mut a = Tensor::zeros(&[n_nodes, n_nodes]);
    if is_edge_list {
        let mut iter = rows.iter().peekable();
        if let Some((_, first)) = iter.peek() {
            if first[0].parse::<f64>().is_err() {
                iter.next();
            }
        }
        for (lineno, cells) in iter {
            if cells.len() != 3 {
                return Err(format_err(path, *lineno, "edge lines need `src dst weight`"));
            }
            let node = |s: &str| -> Result<usize> {
                let v: usize = s
                    .parse()
                    .map_err(|_| format_err(path, *lineno, format!("bad node index `{s}`")))?;
                if v >= n_nodes {
                    return Err(format_err(
                        path,
                        *lineno,
                        format!("node {v} out of range for {n_nodes} nodes"),
                    ));
                }
                Ok(v)
            };
            let (src, dst) = (node(cells[0])?, node(cells[1])?);
            let w: f64 = cells[2]
                .parse()
                .map_err(|_| format_err(path, *lineno, format!("bad weight `{}`", cells[2])))?;
            a.set(&[src, dst], w);
        }
    } else {
        if rows.len() != n_nodes {
            return Err(format_err(
                path,
                rows.last().map_or(1, |r| r.0),
                format!(
                    "adjacency has {} rows but the series has {n_nodes} nodes",
                    rows.len()
                ),
            ));
        }
        for (r, (lineno, cells)) in rows.iter().enumerate() {
            if cells.len() != n_nodes {
                return Err(format_err(
                    path,
                    *lineno,
                    format!("adjacency row has {} cells, expected {n_nodes}", cells.len()),
                ));
            }
            for (c, cell) in cells.iter().enumerate() {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| format_err(path, *lineno, format!("non-numeric cell `{cell}`")))?;
                a.set(&[r, c], v);
            }
        }
    }
    TrafficGraph::from_matrix(a).map_err(|e| format_err(path, 0, e.to_string()))
}

pub fn write_adjacency(path: impl AsRef<Path>, graph: &TrafficGraph) -> Result<()> {
    write_matrix(path.as_ref(), &graph.adjacency)
}

/// Writes a 2-D tensor as comma-delimited rows.
pub fn write_matrix(path: &Path, m: &Tensor) -> Result<()> {
    let cols = m.shape()[1];
    let mut out = String::new();
    for row in m.data().chunks(cols.max(1)) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}
