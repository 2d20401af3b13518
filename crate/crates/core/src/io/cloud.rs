use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn extension(path: &Path) -> Result<String> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(e) if e == "xyz" || e == "ply" => Ok(e),
        _ => Err(Error::invalid(format!("{}: expected a .xyz or .ply file", path.display()))),
    }
}

/// Reads an `.xyz` (`x y z` per line, `#` comments) or ASCII `.ply` file.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let ext = extension(path)?;
    let text = fs::read_to_string(path)?;
    let points = if ext == "xyz" { parse_xyz(path, &text)? } else { parse_ply(path, &text)? };
    PointCloud::new(points).map_err(|e| parse_err(path, 0, e.to_string()))
}

fn parse_coords(path: &Path, lineno: usize, fields: &[&str], idx: [usize; 3]) -> Result<Point> {
    let mut c = [0.0; 3];
    for (k, &i) in idx.iter().enumerate() {
        let f = fields.get(i).ok_or_else(|| parse_err(path, lineno, format!("expected at least {} values", i + 1)))?;
        c[k] = f.parse().map_err(|_| parse_err(path, lineno, format!("not a number: `{f}`")))?;
    }
    Ok(Point::new(c[0], c[1], c[2]))
}

fn parse_xyz(path: &Path, text: &str) -> Result<Vec<Point>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(path, i + 1, format!("expected 3 values, found {}", fields.len())));
        }
        points.push(parse_coords(path, i + 1, &fields, [0, 1, 2])?);
    }
    Ok(points)
}

fn parse_ply(path: &Path, text: &str) -> Result<Vec<Point>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic")),
    }
    // (element name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut header_end = None;
    for (i, line) in lines.by_ref() {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => {}
            ["format", f, ..] => return Err(parse_err(path, i + 1, format!("unsupported format `{f}`"))),
            ["element", name, count] => {
                let n = count.parse().map_err(|_| parse_err(path, i + 1, format!("bad element count `{count}`")))?;
                elements.push((name.to_string(), n, Vec::new()));
            }
            ["property", "list", ..] | ["property", _, _] => {
                let (_, _, props) = elements.last_mut().ok_or_else(|| parse_err(path, i + 1, "property before element"))?;
                props.push(t.last().expect("nonempty").to_string());
            }
            ["end_header"] => {
                header_end = Some(i + 1);
                break;
            }
            _ => return Err(parse_err(path, i + 1, format!("unexpected header line `{}`", line.trim()))),
        }
    }
    let header_end = header_end.ok_or_else(|| parse_err(path, text.lines().count(), "missing end_header"))?;
    let mut points = Vec::new();
    let mut data = lines.filter(|(_, l)| !l.trim().is_empty());
    for (name, count, props) in &elements {
        let idx = if name == "vertex" {
            let find = |axis: &str| {
                props.iter().position(|p| p == axis).ok_or_else(|| parse_err(path, header_end, format!("vertex has no `{axis}` property")))
            };
            Some([find("x")?, find("y")?, find("z")?])
        } else {
            None
        };
        for _ in 0..*count {
            let (i, line) = data.next().ok_or_else(|| parse_err(path, text.lines().count(), format!("file ends inside element `{name}`")))?;
            if let Some(idx) = idx {
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() < props.len() {
                    return Err(parse_err(path, i + 1, format!("expected {} values, found {}", props.len(), fields.len())));
                }
                points.push(parse_coords(path, i + 1, &fields, idx)?);
            }
        }
        if name == "vertex" {
            return Ok(points);
        }
    }
    Err(parse_err(path, header_end, "no vertex element"))
}

/// Writes shortest round-trip decimal coordinates, so a read gives back the
/// exact values.
pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    let ext = extension(path)?;
    let mut out = Vec::with_capacity(cloud.len() * 64);
    if ext == "ply" {
        write!(
            out,
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
            cloud.len()
        )?;
    }
    for p in cloud.iter() {
        writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
    }
    fs::write(path, out)?;
    Ok(())
}
