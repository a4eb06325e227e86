use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use nalgebra::Vector3;
use serde::Serialize;
use serde_json::Value;
use skelkit::{Mesh, PoseVector, ShapeVector};

/// Mesh read from a Wavefront OBJ file. Only `v` and triangular `f`
/// records are interpreted; everything else is ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

pub fn render_obj(mesh: &Mesh, faces: &[[usize; 3]]) -> String {
    let mut out = String::with_capacity(mesh.vertices.len() * 48 + faces.len() * 24);
    out.push_str("# skelkit mesh v1\n");
    let _ = writeln!(out, "# vertices {} faces {}", mesh.vertices.len(), faces.len());
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn parse_obj(text: &str) -> anyhow::Result<ObjMesh> {
    let mut mesh = ObjMesh {
        vertices: Vec::new(),
        faces: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let ctx = || format!("line {}", i + 1);
        match parts.next() {
            Some("v") => {
                let xyz: Vec<f64> = parts
                    .take(3)
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .with_context(ctx)?;
                if xyz.len() != 3 {
                    return Err(anyhow!("vertex needs three coordinates")).with_context(ctx);
                }
                mesh.vertices.push(Vector3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                // Accept `i`, `i/t` and `i/t/n` references; only the position
                // index matters here.
                let idx: Vec<usize> = parts
                    .map(|p| p.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<Result<_, _>>()
                    .with_context(ctx)?;
                if idx.len() != 3 || idx.contains(&0) {
                    return Err(anyhow!("only triangles with 1-based indices are supported")).with_context(ctx);
                }
                mesh.faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => {}
        }
    }
    Ok(mesh)
}

pub fn read_obj(path: &Path) -> anyhow::Result<ObjMesh> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_obj(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Every non-blank line of a JSON Lines file, paired with its 1-based
/// line number.
pub fn read_json_lines(path: &Path) -> anyhow::Result<Vec<(usize, Value)>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// Reads a single JSON document, or the first record of a JSON Lines file
/// when `index` is not given.
pub fn read_json_record(path: &Path, index: Option<usize>) -> anyhow::Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if index.is_none() {
        if let Ok(v) = serde_json::from_str::<Value>(&text) {
            return Ok(v);
        }
    }
    let records = read_json_lines(path)?;
    let i = index.unwrap_or(0);
    let count = records.len();
    records
        .into_iter()
        .nth(i)
        .map(|(_, v)| v)
        .ok_or_else(|| anyhow!("{} has {count} records, no record {i}", path.display()))
}

pub fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let mut bytes = Vec::new();
    for item in items {
        serde_json::to_writer(&mut bytes, item)?;
        bytes.push(b'\n');
    }
    write_file(path, &bytes)
}

pub fn write_json<T: Serialize>(path: &Path, item: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(item)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(bytes)
        .with_context(|| format!("writing {}", path.display()))
}

/// Writes to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(out.flush()?)
        }
    }
}

/// Pose and shape parameters from a record. Looks at top-level `q` and
/// `beta` first, then at a nested `pseudo_gt`.
pub fn params_of(value: &Value) -> anyhow::Result<Option<(PoseVector, ShapeVector)>> {
    let source = if value.get("q").is_some() {
        value
    } else {
        match value.get("pseudo_gt") {
            Some(p) if !p.is_null() => p,
            _ => return Ok(None),
        }
    };
    let q: PoseVector = serde_json::from_value(source.get("q").cloned().unwrap_or(Value::Null)).context("field q")?;
    let beta: ShapeVector = match source.get("beta") {
        Some(b) => serde_json::from_value(b.clone()).context("field beta")?,
        None => ShapeVector::default(),
    };
    Ok(Some((q, beta)))
}

pub fn field<T: serde::de::DeserializeOwned>(value: &Value, name: &str) -> anyhow::Result<Option<T>> {
    match value.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => Ok(Some(
            serde_json::from_value(v.clone()).with_context(|| format!("field {name}"))?,
        )),
    }
}

pub fn example_id(value: &Value, line: usize) -> anyhow::Result<String> {
    match value.get("example_id") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => bail!("line {line}: example_id must be a string, got {other}"),
        None => bail!("line {line}: missing example_id"),
    }
}
