use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::tensor::Tensor;
use super::tape::{Grads, Tape};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &str = "PUSHPLAN-CHECKPOINT 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    value: Arc<Tensor>,
    pub grad: Tensor,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }
}

/// Named parameter tensors with matching gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value: Arc::new(value),
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the parameter gradients of one backward pass into the buffers.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Grads) {
        let n = self.params.len();
        for (p, g) in self.params.iter_mut().zip(grads.param_grads(tape, n)) {
            if let Some(g) = g {
                p.grad.add_assign(&g);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Writes the checkpoint: text header (meta lines, one `tensor` line per
    /// parameter with its shape), `end`, then little-endian f64 payload in
    /// header order.
    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "{CHECKPOINT_MAGIC}").unwrap();
        for (k, v) in meta {
            writeln!(buf, "meta {k} {v}").unwrap();
        }
        for p in &self.params {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            writeln!(buf, "tensor {} {}", p.name, dims.join(" ")).unwrap();
        }
        writeln!(buf, "end").unwrap();
        for p in &self.params {
            for v in p.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::io::write_atomic(path, &buf)
    }

    /// Reads a checkpoint written by [`ParamStore::save`].
    pub fn load(path: &Path) -> Result<(ParamStore, BTreeMap<String, String>)> {
        let file = std::fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing { path: path.into() }
            } else {
                Error::io(path, e)
            }
        })?;
        let bad = |msg: String| Error::Checkpoint {
            path: path.into(),
            msg,
        };
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(bad(format!("unexpected magic {:?}", line.trim_end())));
        }
        let mut meta = BTreeMap::new();
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(bad("header ended before `end`".into()));
            }
            let l = line.trim_end();
            if l == "end" {
                break;
            }
            let mut parts = l.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), v) => {
                    meta.insert(k.to_string(), v.unwrap_or("").to_string());
                }
                (Some("tensor"), Some(name), dims) => {
                    let dims = dims
                        .unwrap_or("")
                        .split_whitespace()
                        .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dim in {l:?}"))))
                        .collect::<Result<Vec<_>>>()?;
                    specs.push((name.to_string(), dims));
                }
                _ => return Err(bad(format!("unrecognized header line {l:?}"))),
            }
        }
        let mut store = ParamStore::new();
        for (name, dims) in specs {
            let n: usize = dims.iter().product();
            let mut bytes = vec![0u8; n * 8];
            reader
                .read_exact(&mut bytes)
                .map_err(|_| bad(format!("payload truncated in tensor {name}")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(name, Tensor::new(dims, data)?);
        }
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok((store, meta))
    }

    /// Copies values from `other` by name; every parameter must be present
    /// with the same shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks tensor {}", p.name)))?;
            let src = other.get(src).value();
            if src.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load",
                    left: p.value.shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            *p.value_mut() = src.clone();
        }
        Ok(())
    }
}
