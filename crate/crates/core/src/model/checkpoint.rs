//! Model checkpoint container.
//!
//! Self-describing binary layout (all integers little-endian u32 unless
//! noted): magic "OWBC", version, architecture id, architecture dims,
//! num_classes, label names, background source names, named parameter
//! tensors with shapes and f64 little-endian payloads. Loading validates
//! every parameter shape against the architecture before use.
//!
//! Autoencoder checkpoints share this container with their own arch id.

use std::io::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Arch, Classifier};

const MAGIC: &[u8; 4] = b"OWBC";
const VERSION: u32 = 1;

/// Decoded checkpoint contents, independent of what model type they back.
#[derive(Clone, Debug)]
pub struct Container {
    pub arch_id: String,
    pub arch_dims: Vec<u32>,
    pub num_classes: u32,
    pub label_names: Vec<String>,
    pub background_sources: Vec<String>,
    pub params: Vec<(String, Tensor)>,
}

/// Serialize a container to disk.
pub fn write_container(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION);
    put_str(&mut buf, &c.arch_id);
    put_u32(&mut buf, c.arch_dims.len() as u32);
    for &d in &c.arch_dims {
        put_u32(&mut buf, d);
    }
    put_u32(&mut buf, c.num_classes);
    put_u32(&mut buf, c.label_names.len() as u32);
    for name in &c.label_names {
        put_str(&mut buf, name);
    }
    put_u32(&mut buf, c.background_sources.len() as u32);
    for name in &c.background_sources {
        put_str(&mut buf, name);
    }
    put_u32(&mut buf, c.params.len() as u32);
    for (name, t) in &c.params {
        put_str(&mut buf, name);
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        for &v in t.data() {
            buf.write_all(&v.to_le_bytes()).unwrap();
        }
    }
    std::fs::write(path, buf).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read a container back, validating structure but not semantics.
pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: pstr.clone(),
        source,
    })?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: &pstr,
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            format: "checkpoint",
            path: pstr.clone(),
            observed: magic.to_vec(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::MalformedFile {
            format: "checkpoint",
            path: pstr.clone(),
            reason: format!("unsupported version {version}"),
        });
    }
    let arch_id = r.string()?;
    let ndims = r.u32()? as usize;
    let arch_dims: Vec<u32> = (0..ndims).map(|_| r.u32()).collect::<Result<_>>()?;
    let num_classes = r.u32()?;
    let nlabels = r.u32()? as usize;
    let label_names: Vec<String> = (0..nlabels).map(|_| r.string()).collect::<Result<_>>()?;
    let nbg = r.u32()? as usize;
    let background_sources: Vec<String> = (0..nbg).map(|_| r.string()).collect::<Result<_>>()?;
    let nparams = r.u32()? as usize;
    let mut params = Vec::with_capacity(nparams);
    for _ in 0..nparams {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok(Container {
        arch_id,
        arch_dims,
        num_classes,
        label_names,
        background_sources,
        params,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                format: "checkpoint",
                path: self.path.to_string(),
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::MalformedFile {
            format: "checkpoint",
            path: self.path.to_string(),
            reason: "non-utf8 string".into(),
        })
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

impl Classifier {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_container(
            path,
            &Container {
                arch_id: self.arch().id().to_string(),
                arch_dims: self.arch().dims(),
                num_classes: self.num_classes() as u32,
                label_names: self.label_names().to_vec(),
                background_sources: self.background_sources().to_vec(),
                params: self.params().to_vec(),
            },
        )
    }

    /// Load a classifier checkpoint, validating parameter shapes against the
    /// declared architecture before constructing the model.
    pub fn load(path: impl AsRef<Path>) -> Result<Classifier> {
        let path = path.as_ref();
        let c = read_container(path)?;
        let arch = Arch::from_id(&c.arch_id, &c.arch_dims)?;
        if c.label_names.len() != c.num_classes as usize {
            return Err(Error::MalformedFile {
                format: "checkpoint",
                path: path.display().to_string(),
                reason: format!(
                    "{} label names for {} classes",
                    c.label_names.len(),
                    c.num_classes
                ),
            });
        }
        let expected = arch.param_shapes(c.num_classes as usize);
        if expected.len() != c.params.len() {
            return Err(Error::MalformedFile {
                format: "checkpoint",
                path: path.display().to_string(),
                reason: format!("expected {} params, found {}", expected.len(), c.params.len()),
            });
        }
        for ((want_name, want_shape), (got_name, got)) in expected.iter().zip(&c.params) {
            if want_name != got_name || want_shape != got.shape() {
                return Err(Error::MalformedFile {
                    format: "checkpoint",
                    path: path.display().to_string(),
                    reason: format!(
                        "param {got_name} has shape {:?}, expected {want_name} {:?}",
                        got.shape(),
                        want_shape
                    ),
                });
            }
        }
        let mut model = Classifier::new(arch, c.label_names, 0)?;
        model.params = c.params;
        model.background_sources = c.background_sources;
        Ok(model)
    }
}
