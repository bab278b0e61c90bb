//! Plain-text point cloud formats: XYZ and ASCII PLY.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ncreg_core::{Point, PointCloud};

use crate::error::{read_text, write_text, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    /// One `x y z` line per point.
    Xyz,
    PlyAscii,
}

impl CloudFormat {
    /// Guesses the format from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "xyz" | "txt" => Some(CloudFormat::Xyz),
            "ply" => Some(CloudFormat::PlyAscii),
            _ => None,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" | "ply-ascii" => Ok(CloudFormat::PlyAscii),
            other => Err(format!("unknown cloud format `{other}` (expected xyz or ply-ascii)")),
        }
    }
}

/// Shortest decimal text that parses back to the same double.
pub(crate) fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn read_cloud(path: &Path, format: CloudFormat) -> CliResult<PointCloud> {
    let text = read_text(path)?;
    parse_cloud(&text, format, path)
}

pub fn write_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> CliResult<()> {
    write_text(path, &format_cloud(cloud, format))
}

/// Parses `text`; `origin` only labels error messages.
pub fn parse_cloud(text: &str, format: CloudFormat, origin: &Path) -> CliResult<PointCloud> {
    let points = match format {
        CloudFormat::Xyz => parse_xyz(text),
        CloudFormat::PlyAscii => parse_ply(text),
    }
    .map_err(|(line, msg)| CliError::parse(origin, line, msg))?;
    if points.is_empty() {
        return Err(CliError::parse(origin, 0, "file contains no points"));
    }
    Ok(PointCloud::new(points)?)
}

pub fn format_cloud(cloud: &PointCloud, format: CloudFormat) -> String {
    let mut out = String::new();
    if format == CloudFormat::PlyAscii {
        out.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(out, "element vertex {}", cloud.len());
        out.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    }
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {}", fmt_f64(p.x), fmt_f64(p.y), fmt_f64(p.z));
    }
    out
}

type LineResult<T> = Result<T, (usize, String)>;

fn parse_coord(tok: &str, line: usize) -> LineResult<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| (line, format!("`{tok}` is not a number")))?;
    if !v.is_finite() {
        return Err((line, format!("non-finite coordinate `{tok}`")));
    }
    Ok(v)
}

fn parse_xyz(text: &str) -> LineResult<Vec<Point>> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.len() != 3 {
            return Err((line, format!("expected 3 columns, found {}", toks.len())));
        }
        points.push(Point::new(
            parse_coord(toks[0], line)?,
            parse_coord(toks[1], line)?,
            parse_coord(toks[2], line)?,
        ));
    }
    Ok(points)
}

struct PlyElement {
    name: String,
    count: usize,
    /// Scalar property names in column order; `None` marks a list property.
    properties: Vec<Option<String>>,
}

fn parse_ply(text: &str) -> LineResult<Vec<Point>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err((n, "missing `ply` magic".into())),
        None => return Err((1, "empty file".into())),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            ["comment", ..] | ["obj_info", ..] => continue,
            ["format", "ascii", _] => saw_format = true,
            ["format", other, ..] => return Err((n, format!("unsupported PLY format `{other}`"))),
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| (n, format!("bad element count `{count}`")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", _, _, _] => match elements.last_mut() {
                Some(e) => e.properties.push(None),
                None => return Err((n, "property before any element".into())),
            },
            ["property", _, name] => match elements.last_mut() {
                Some(e) => e.properties.push(Some(name.to_string())),
                None => return Err((n, "property before any element".into())),
            },
            ["end_header"] => {
                header_end = Some(n);
                break;
            }
            _ => return Err((n, format!("unrecognized header line `{line}`"))),
        }
    }
    let header_end = header_end.ok_or((0, "header has no end_header".to_string()))?;
    if !saw_format {
        return Err((header_end, "header has no format line".into()));
    }
    let Some(vi) = elements.iter().position(|e| e.name == "vertex") else {
        return Err((header_end, "no vertex element".into()));
    };
    let vertex = &elements[vi];
    if vertex.properties.iter().any(Option::is_none) {
        return Err((header_end, "list properties on vertices are not supported".into()));
    }
    let column = |axis: &str| {
        vertex
            .properties
            .iter()
            .position(|p| p.as_deref() == Some(axis))
            .ok_or((header_end, format!("vertex element has no `{axis}` property")))
    };
    let cols = [column("x")?, column("y")?, column("z")?];

    let mut body = lines.filter(|(_, l)| !l.is_empty());
    let mut points = Vec::with_capacity(vertex.count);
    for (ei, element) in elements.iter().enumerate() {
        for _ in 0..element.count {
            let Some((n, line)) = body.next() else {
                return Err((0, format!("file ends before all `{}` rows were read", element.name)));
            };
            if ei != vi {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != element.properties.len() {
                return Err((
                    n,
                    format!("expected {} values, found {}", element.properties.len(), toks.len()),
                ));
            }
            points.push(Point::new(
                parse_coord(toks[cols[0]], n)?,
                parse_coord(toks[cols[1]], n)?,
                parse_coord(toks[cols[2]], n)?,
            ));
        }
    }
    if let Some((n, _)) = body.next() {
        return Err((n, "unexpected data after the last element".into()));
    }
    Ok(points)
}
