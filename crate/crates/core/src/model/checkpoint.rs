//! Binary checkpoint: magic, version, a JSON header describing every
//! table, then the raw little-endian `f64` values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

use super::{Model, ModelConfig, ModelError, ModelParams, ParamLayout};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KNOWPOS\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    meta: serde_json::Value,
    tables: Vec<TableEntry>,
}

/// A loaded model plus the free-form metadata stored alongside it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: serde_json::Value,
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &serde_json::Value) -> Result<(), ModelError> {
    let layout = model.layout();
    let mut offset = 0;
    let tables = layout
        .names
        .iter()
        .zip(&layout.shapes)
        .map(|(name, shape)| {
            let e = TableEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            };
            offset += shape.iter().product::<usize>();
            e
        })
        .collect();
    let header = Header {
        config: model.config.clone(),
        meta: meta.clone(),
        tables,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |b: &[u8]| w.write_all(b).map_err(|e| io_err(path, e));
    write(CHECKPOINT_MAGIC)?;
    write(&CHECKPOINT_VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    write(&(offset as u64).to_le_bytes())?;
    for t in &model.params.tensors {
        for v in t.data() {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], ModelError> {
        if self.buf.len() - self.at < n {
            return Err(ModelError::Checkpoint(format!(
                "truncated while reading {what} ({} bytes left, {n} needed)",
                self.buf.len() - self.at
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader { buf: &bytes, at: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = r.u64("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    header.config.validate()?;
    let layout = ParamLayout::new(&header.config);
    if header.tables.len() != layout.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} tables stored, config needs {}",
            header.tables.len(),
            layout.len()
        )));
    }
    let count = r.u64("value count")? as usize;
    let expected = ModelParams::zeros(&header.config).n_values();
    if count != expected {
        return Err(ModelError::Checkpoint(format!(
            "size mismatch: {count} values stored, config needs {expected}"
        )));
    }
    let raw = r.take(count * 8, "values")?.to_vec();
    if r.at != bytes.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes after values",
            bytes.len() - r.at
        )));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut tensors = Vec::with_capacity(layout.len());
    for (entry, (name, shape)) in header.tables.iter().zip(layout.names.iter().zip(&layout.shapes)) {
        if &entry.name != name || &entry.shape != shape {
            return Err(ModelError::Checkpoint(format!(
                "table {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let data = values
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| ModelError::Checkpoint(format!("table {name} offset out of range")))?;
        tensors.push(Tensor::new(shape.clone(), data.to_vec())?);
    }
    let model = Model::new(header.config, ModelParams { tensors })?;
    Ok(Checkpoint {
        model,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::init(ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            max_dialog_positions: 16,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = tiny();
        let meta = serde_json::json!({"step": 7});
        save_checkpoint(&p, &m, &meta).unwrap();
        let c = load_checkpoint(&p).unwrap();
        assert_eq!(c.model.params, m.params);
        assert_eq!(c.model.config, m.config);
        assert_eq!(c.meta, meta);
    }

    #[test]
    fn detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &tiny(), &serde_json::Value::Null).unwrap();
        let good = fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("magic"));

        let mut bad = good.clone();
        bad[8] = 9;
        fs::write(&p, &bad).unwrap();
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("version"));

        fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("truncated"));
    }
}
