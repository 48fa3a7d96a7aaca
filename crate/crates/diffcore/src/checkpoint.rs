//! Self-describing checkpoint files.
//!
//! Layout: a text manifest followed by the raw payload.
//!
//! ```text
//! DIFFCORE-CHECKPOINT 1
//! meta<TAB>key<TAB>value
//! tensor<TAB>name<TAB>d0,d1,...<TAB>byte_offset
//! payload<TAB>total_bytes
//! <little-endian f64 payload>
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "DIFFCORE-CHECKPOINT 1";

/// Named tensors plus string metadata (epoch, seed, config hash, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: BTreeMap<String, String>,
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r']) {
        return Err(Error::Checkpoint(format!("invalid manifest token {s:?}")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Snapshot of every tensor (weights and buffers) in `store`, prefixed.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore) {
        for id in store.ids() {
            let mut t = store.get(id).clone();
            t.clear_grad();
            self.tensors.push((format!("{prefix}{}", store.name(id)), t));
        }
    }

    pub fn from_store(store: &ParamStore) -> Self {
        let mut c = Checkpoint::new();
        c.add_store("", store);
        c
    }

    pub fn push(&mut self, name: &str, t: Tensor) {
        self.tensors.push((name.to_string(), t));
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Overwrites every store entry from the tensor named `prefix + name`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let src = self.tensor(&name)?;
            let dst = store.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint load",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        for (k, v) in &self.meta {
            check_token(k)?;
            if v.contains(['\t', '\n', '\r']) {
                return Err(Error::Checkpoint(format!("invalid metadata value for `{k}`")));
            }
            header.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            check_token(name)?;
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor\t{name}\t{}\t{offset}\n", dims.join(",")));
            offset += t.numel() * 8;
        }
        header.push_str(&format!("payload\t{offset}\n"));
        w.write_all(header.as_bytes())?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end_matches('\n') != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut meta = BTreeMap::new();
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let total = loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Checkpoint("manifest ended before payload".into()));
            }
            let fields: Vec<&str> = line.trim_end_matches('\n').split('\t').collect();
            match fields.as_slice() {
                ["meta", k, v] => {
                    meta.insert(k.to_string(), v.to_string());
                }
                ["meta", k] => {
                    meta.insert(k.to_string(), String::new());
                }
                ["tensor", name, dims, off] => {
                    let shape = if dims.is_empty() {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| Error::Checkpoint(format!("tensor `{name}` shape: {e}")))?
                    };
                    let off = off
                        .parse::<usize>()
                        .map_err(|e| Error::Checkpoint(format!("tensor `{name}` offset: {e}")))?;
                    entries.push((name.to_string(), shape, off));
                }
                ["payload", n] => {
                    break n
                        .parse::<usize>()
                        .map_err(|e| Error::Checkpoint(format!("payload size: {e}")))?;
                }
                _ => return Err(Error::Checkpoint(format!("bad manifest line {line:?}"))),
            }
        };
        let mut payload = vec![0u8; total];
        r.read_exact(&mut payload)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, off) in entries {
            let n: usize = shape.iter().product();
            let bytes = payload
                .get(off..off + n * 8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` out of range")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { tensors, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
