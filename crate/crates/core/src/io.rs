//! Trajectory files, JSON documents and CSV tables.
//!
//! Trajectories are stored either as CSV text (header `t,c0,c1,...`, one
//! frame per line, 17 significant digits) or as a little-endian binary
//! file: magic `RCFT`, `u32` version, `u64` frame count, `u32` dimension,
//! `f64` frame spacing, then the frames row-major. The format is chosen by
//! the `.csv` / `.rct` extension. Every write goes to a temporary file in
//! the target directory and is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

pub const BINARY_MAGIC: &[u8; 4] = b"RCFT";
pub const BINARY_VERSION: u32 = 1;
const BINARY_HEADER: usize = 4 + 4 + 8 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Csv,
    Binary,
}

impl TrajectoryFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
            Some(e) if e == "csv" => Ok(TrajectoryFormat::Csv),
            Some(e) if e == "rct" => Ok(TrajectoryFormat::Binary),
            _ => Err(Error::config(format!(
                "{}: trajectory files must end in .csv or .rct",
                path.display()
            ))),
        }
    }
}

/// Write `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, format!("line {}, column {}: {e}", e.line(), e.column())))
}

/// Pretty-printed JSON with a trailing newline.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV table with a header row; `None` cells are written as `nan`.
pub fn write_csv_table(path: &Path, header: &[String], rows: &[Vec<Option<f64>>]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|c| c.map_or_else(|| "nan".to_string(), fmt_f64)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn trajectory_to_csv(t: &Trajectory) -> String {
    let mut out = String::with_capacity(t.len() * t.dim() * 24);
    out.push('t');
    for j in 0..t.dim() {
        out.push_str(&format!(",c{j}"));
    }
    out.push('\n');
    for (i, row) in t.frames().rows().into_iter().enumerate() {
        out.push_str(&fmt_f64(i as f64 * t.frame_dt()));
        for v in row {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn trajectory_from_csv(text: &str, path: &Path) -> Result<Trajectory> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::format(path, "line 1: missing header"))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    if names.len() < 2 || names[0] != "t" || names[1..].iter().enumerate().any(|(j, n)| *n != format!("c{j}")) {
        return Err(Error::format(path, format!("line 1: expected header t,c0,c1,..., found {header:?}")));
    }
    let dim = names.len() - 1;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (ln, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != dim + 1 {
            return Err(Error::format(
                path,
                format!("line {}: expected {} fields, found {}", ln + 1, dim + 1, cells.len()),
            ));
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::format(path, format!("line {}, field {}: cannot parse {cell:?}", ln + 1, c + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::format(path, format!("line {}, field {}: value is not finite", ln + 1, c + 1)));
            }
            if c == 0 {
                times.push((ln + 1, v));
            } else {
                values.push(v);
            }
        }
    }
    if times.is_empty() {
        return Err(Error::format(path, "file contains no frames"));
    }
    let dt = if times.len() > 1 { times[1].1 - times[0].1 } else { 1.0 };
    if !(dt > 0.0) {
        return Err(Error::format(path, format!("line {}: time column must increase", times[1].0)));
    }
    for (i, &(ln, t)) in times.iter().enumerate() {
        let expected = times[0].1 + i as f64 * dt;
        if (t - expected).abs() > 1e-9 * expected.abs().max(dt) {
            return Err(Error::format(path, format!("line {ln}: time {t} breaks the uniform spacing {dt}")));
        }
    }
    let frames = Array2::from_shape_vec((times.len(), dim), values).expect("row lengths checked");
    Trajectory::new(frames, dt).map_err(|e| Error::format(path, e.to_string()))
}

pub fn trajectory_to_binary(t: &Trajectory) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER + 8 * t.len() * t.dim());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.len() as u64).to_le_bytes());
    out.extend_from_slice(&(t.dim() as u32).to_le_bytes());
    out.extend_from_slice(&t.frame_dt().to_le_bytes());
    for v in t.frames().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn trajectory_from_binary(bytes: &[u8], path: &Path) -> Result<Trajectory> {
    let err = |offset: usize, msg: String| Error::format(path, format!("byte {offset}: {msg}"));
    if bytes.len() < BINARY_HEADER {
        return Err(err(bytes.len(), format!("truncated header, need {BINARY_HEADER} bytes")));
    }
    if &bytes[..4] != BINARY_MAGIC {
        return Err(err(0, "bad magic, expected RCFT".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != BINARY_VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let dim = u32_at(16) as usize;
    let dt = f64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
    if n == 0 {
        return Err(err(8, "file contains no frames".into()));
    }
    if dim == 0 {
        return Err(err(16, "dimension is zero".into()));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(err(20, format!("frame spacing must be positive, got {dt}")));
    }
    let count = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(dim))
        .ok_or_else(|| err(8, "frame count overflows".into()))?;
    let expected = count
        .checked_mul(8)
        .and_then(|b| b.checked_add(BINARY_HEADER))
        .ok_or_else(|| err(8, "frame count overflows".into()))?;
    if bytes.len() < expected {
        return Err(err(bytes.len(), format!("truncated data, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(err(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let o = BINARY_HEADER + 8 * i;
        let v = f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(err(o, format!("frame {}, column {} is not finite", i / dim, i % dim)));
        }
        values.push(v);
    }
    let frames = Array2::from_shape_vec((count / dim, dim), values).expect("sized");
    Trajectory::new(frames, dt).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let format = TrajectoryFormat::from_path(path)?;
    let bytes = read(path)?;
    let t = match format {
        TrajectoryFormat::Csv => {
            let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(path, format!("byte {}: invalid UTF-8", e.valid_up_to())))?;
            trajectory_from_csv(text, path)?
        }
        TrajectoryFormat::Binary => trajectory_from_binary(&bytes, path)?,
    };
    Ok(t.with_meta("source", path.display()))
}

pub fn save_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    match TrajectoryFormat::from_path(path)? {
        TrajectoryFormat::Csv => write_atomic(path, trajectory_to_csv(t).as_bytes()),
        TrajectoryFormat::Binary => write_atomic(path, &trajectory_to_binary(t)),
    }
}

/// Frame matrix with no time semantics, e.g. sampled configurations.
pub fn save_frames(path: &Path, frames: Array2<f64>) -> Result<()> {
    let rows = frames.nrows();
    if rows == 0 {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain((0..frames.ncols()).map(|j| format!("c{j}")))
            .collect();
        return match TrajectoryFormat::from_path(path)? {
            TrajectoryFormat::Csv => write_atomic(path, format!("{}\n", header.join(",")).as_bytes()),
            TrajectoryFormat::Binary => {
                let mut out = Vec::with_capacity(BINARY_HEADER);
                out.extend_from_slice(BINARY_MAGIC);
                out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
                out.extend_from_slice(&0u64.to_le_bytes());
                out.extend_from_slice(&(frames.ncols() as u32).to_le_bytes());
                out.extend_from_slice(&1.0f64.to_le_bytes());
                write_atomic(path, &out)
            }
        };
    }
    save_trajectory(path, &Trajectory::new(frames, 1.0)?)
}
