//! JSON-lines manifests and raw float32 tensor files.
//!
//! A dataset directory holds `schema.json`, `manifest.jsonl` and, when the
//! inputs are not inlined, one little-endian float32 file per example with a
//! `<file>.meta.json` sidecar describing its shape.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{validate_example, ConceptSchema, Dataset, Example, Image};
use crate::error::{Error, IoContext, Result};

pub const SCHEMA_FILE: &str = "schema.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
const TENSOR_DIR: &str = "tensors";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    input: Value,
    class_label: usize,
    #[serde(default)]
    concepts: Option<Vec<u8>>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    input: String,
    class_label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    concepts: Option<&'a [u8]>,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_tensor(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Shape {
            expected: shape.to_vec(),
            actual: vec![data.len()],
        });
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).at(path)?;
    let meta = TensorMeta {
        shape: shape.to_vec(),
        dtype: "float32".into(),
    };
    let mp = meta_path(path);
    fs::write(&mp, serde_json::to_vec(&meta)?).at(mp)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let mp = meta_path(path);
    let meta: TensorMeta = serde_json::from_slice(&fs::read(&mp).at(&mp)?)?;
    if meta.dtype != "float32" {
        return Err(Error::Config(format!(
            "{}: unsupported dtype `{}`",
            mp.display(),
            meta.dtype
        )));
    }
    let bytes = fs::read(path).at(path)?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Shape {
            expected: meta.shape,
            actual: vec![bytes.len() / 4],
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((meta.shape, data))
}

fn parse_inline(value: &Value) -> std::result::Result<Image, String> {
    let planes = value.as_array().ok_or("input must be a path or a [C][H][W] array")?;
    let c = planes.len();
    let mut h = None;
    let mut w = None;
    let mut data = Vec::new();
    for plane in planes {
        let rows = plane.as_array().ok_or("input planes must be arrays")?;
        if *h.get_or_insert(rows.len()) != rows.len() {
            return Err("ragged input array".into());
        }
        for row in rows {
            let row = row.as_array().ok_or("input rows must be arrays")?;
            if *w.get_or_insert(row.len()) != row.len() {
                return Err("ragged input array".into());
            }
            for v in row {
                data.push(v.as_f64().ok_or("input values must be numbers")? as f32);
            }
        }
    }
    let (h, w) = (h.unwrap_or(0), w.unwrap_or(0));
    Image::from_vec([c, h, w], data).map_err(|e| e.to_string())
}

/// Read `manifest.jsonl`-style records, validating concept length against
/// `schema`. Tensor paths resolve relative to the manifest's directory.
pub fn load_manifest(path: &Path, schema: &ConceptSchema) -> Result<Vec<Example>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(path).at(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let input = match &rec.input {
            Value::String(rel) => {
                let (shape, data) = read_tensor(&base.join(rel))?;
                if shape.len() != 3 {
                    return Err(parse_err(format!("tensor `{rel}` must have rank 3, has shape {shape:?}")));
                }
                Image::from_vec([shape[0], shape[1], shape[2]], data)?
            }
            other => parse_inline(other).map_err(parse_err)?,
        };
        if let Some(c) = &rec.concepts {
            if c.len() != schema.k {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("concept vector has length {}, schema k = {}", c.len(), schema.k),
                });
            }
            if c.iter().any(|&v| v > 1) {
                return Err(Error::Schema {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: "concept values must be 0 or 1".into(),
                });
            }
        }
        if input.data.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("input contains non-finite values".into()));
        }
        out.push(Example {
            id: rec.id,
            input,
            class_label: rec.class_label,
            concepts: rec.concepts,
        });
    }
    Ok(out)
}

/// Load `schema.json` + `manifest.jsonl` from a dataset directory. The class
/// count is one past the largest label present.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let schema_path = dir.join(SCHEMA_FILE);
    let schema: ConceptSchema = serde_json::from_slice(&fs::read(&schema_path).at(&schema_path)?)?;
    schema.validate()?;
    let examples = load_manifest(&dir.join(MANIFEST_FILE), &schema)?;
    let n_classes = examples.iter().map(|e| e.class_label + 1).max().unwrap_or(0);
    for ex in &examples {
        validate_example(ex, schema.k, n_classes)?;
    }
    Dataset::new(schema, n_classes, examples)
}

/// Write a dataset directory with one tensor file per example.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let tensor_dir = dir.join(TENSOR_DIR);
    fs::create_dir_all(&tensor_dir).at(&tensor_dir)?;
    let schema_path = dir.join(SCHEMA_FILE);
    fs::write(&schema_path, serde_json::to_vec_pretty(&dataset.schema)?).at(&schema_path)?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest_path).at(&manifest_path)?;
    let mut w = BufWriter::new(file);
    for ex in &dataset.examples {
        let rel = format!("{TENSOR_DIR}/{}.f32", ex.id);
        write_tensor(&dir.join(&rel), &ex.input.shape(), &ex.input.data)?;
        let rec = OutRecord {
            id: &ex.id,
            input: rel,
            class_label: ex.class_label,
            concepts: ex.concepts.as_deref(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").at(&manifest_path)?;
    }
    w.flush().at(&manifest_path)?;
    Ok(())
}
