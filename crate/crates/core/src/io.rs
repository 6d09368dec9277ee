//! Plain-text point and normal files, and PLY heatmap export.
//!
//! Points and normals files hold one whitespace-separated row per point.
//! Points files have 3 columns, or 6 when normals follow the position. Blank
//! lines and lines starting with `#` are ignored. Values are written with 9
//! significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

fn fmt_row(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        // `{:.8e}` prints -0 as "-0e0"; normalize so files are stable.
        let v = if v == 0.0 { 0.0 } else { v };
        let _ = write!(out, "{v:.8e}");
    }
    out.push('\n');
}

/// Numeric rows of a text file, all with the same column count.
pub fn parse_rows(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| Error::Parse { line: k + 1, msg: format!("`{s}`: {e}") }))
            .collect::<Result<Vec<f64>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse { line: k + 1, msg: "non-finite value".into() });
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse { line: k + 1, msg: format!("expected {} columns, found {}", first.len(), row.len()) });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn rows_to_vecs(rows: &[Vec<f64>], offset: usize) -> Vec<Vec3> {
    rows.iter().map(|r| Vec3::new(r[offset], r[offset + 1], r[offset + 2])).collect()
}

/// Parses a 3-column vector file.
pub fn parse_vectors(text: &str) -> Result<Vec<Vec3>> {
    let rows = parse_rows(text)?;
    if let Some(r) = rows.first() {
        if r.len() != 3 {
            return Err(Error::Parse { line: 1, msg: format!("expected 3 columns, found {}", r.len()) });
        }
    }
    Ok(rows_to_vecs(&rows, 0))
}

pub fn read_vectors(path: impl AsRef<Path>) -> Result<Vec<Vec3>> {
    parse_vectors(&fs::read_to_string(path)?)
}

pub fn format_vectors(vs: &[Vec3]) -> String {
    let mut out = String::with_capacity(vs.len() * 48);
    for v in vs {
        fmt_row(&mut out, [v.x, v.y, v.z]);
    }
    out
}

pub fn write_vectors(path: impl AsRef<Path>, vs: &[Vec3]) -> Result<()> {
    Ok(fs::write(path, format_vectors(vs))?)
}

/// Reads a 3- or 6-column points file into a cloud named after the file stem.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let rows = parse_rows(&fs::read_to_string(path)?)?;
    match rows.first().map(Vec::len) {
        Some(3) | None => PointCloud::new(name, rows_to_vecs(&rows, 0)),
        Some(6) => PointCloud::with_normals(name, rows_to_vecs(&rows, 0), Some(rows_to_vecs(&rows, 3))),
        Some(c) => Err(Error::Parse { line: 1, msg: format!("expected 3 or 6 columns, found {c}") }),
    }
}

/// Normals from a 3-column file, or the last three columns of a 6-column
/// points-with-normals file.
pub fn read_normals(path: impl AsRef<Path>) -> Result<Vec<Vec3>> {
    let rows = parse_rows(&fs::read_to_string(path)?)?;
    match rows.first().map(Vec::len) {
        Some(3) | None => Ok(rows_to_vecs(&rows, 0)),
        Some(6) => Ok(rows_to_vecs(&rows, 3)),
        Some(c) => Err(Error::Parse { line: 1, msg: format!("expected 3 or 6 columns, found {c}") }),
    }
}

/// Six columns per point when the cloud carries normals, three otherwise.
pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 96);
    match cloud.gt_normals() {
        Some(ns) => cloud.points().iter().zip(ns).for_each(|(p, n)| fmt_row(&mut out, [p.x, p.y, p.z, n.x, n.y, n.z])),
        None => cloud.points().iter().for_each(|p| fmt_row(&mut out, [p.x, p.y, p.z])),
    }
    Ok(fs::write(path, out)?)
}

pub fn write_points(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    write_vectors(path, cloud.points())
}

/// One row per point, `3X` columns holding each branch normal in order.
pub fn format_normal_sets(sets: &[Vec<Vec3>]) -> String {
    let mut out = String::new();
    for set in sets {
        fmt_row(&mut out, set.iter().flat_map(|n| [n.x, n.y, n.z]));
    }
    out
}

pub fn write_scalars(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let mut out = String::with_capacity(values.len() * 16);
    for &v in values {
        fmt_row(&mut out, [v]);
    }
    Ok(fs::write(path, out)?)
}

pub fn read_scalars(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let rows = parse_rows(&fs::read_to_string(path)?)?;
    if rows.first().is_some_and(|r| r.len() != 1) {
        return Err(Error::Parse { line: 1, msg: "expected one column".into() });
    }
    Ok(rows.into_iter().map(|r| r[0]).collect())
}

/// Blue at 0° to red at `max_deg` and above.
pub fn heat_color(error_deg: f64, max_deg: f64) -> [u8; 3] {
    let t = (error_deg / max_deg).clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// ASCII PLY with positions, normals and per-vertex error colors (0–30°).
pub fn format_heatmap_ply(points: &[Vec3], normals: &[Vec3], errors_deg: &[f64]) -> Result<String> {
    if points.len() != normals.len() {
        return Err(Error::LengthMismatch { left: points.len(), right: normals.len() });
    }
    if points.len() != errors_deg.len() {
        return Err(Error::LengthMismatch { left: points.len(), right: errors_deg.len() });
    }
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", points.len());
    for prop in ["x", "y", "z", "nx", "ny", "nz"] {
        let _ = writeln!(out, "property float {prop}");
    }
    for prop in ["red", "green", "blue"] {
        let _ = writeln!(out, "property uchar {prop}");
    }
    out.push_str("end_header\n");
    for ((p, n), &e) in points.iter().zip(normals).zip(errors_deg) {
        let [r, g, b] = heat_color(e, 30.0);
        let mut row = String::new();
        fmt_row(&mut row, [p.x, p.y, p.z, n.x, n.y, n.z]);
        row.pop();
        let _ = writeln!(out, "{row} {r} {g} {b}");
    }
    Ok(out)
}
