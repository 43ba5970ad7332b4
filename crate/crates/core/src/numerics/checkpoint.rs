//! Checkpoint container.
//!
//! ```text
//! ICTRACE-CKPT\n
//! version=1\n
//! <key>=<value>\n          one line per hyperparameter, in writer order
//! params=<N>\n
//! \n                       blank line ends the header
//! N blobs of:
//!   u32 name length, name bytes (UTF-8),
//!   u32 rank, rank × u32 dims,
//!   prod(dims) × f32
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "ICTRACE-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub hyper: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(hyper: Vec<(String, String)>, store: &ParamStore) -> Self {
        let tensors = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                (store.name(id).to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid"))
            })
            .collect();
        Self { hyper, tensors }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.hyper.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{CHECKPOINT_MAGIC}\nversion={CHECKPOINT_VERSION}\n").into_bytes();
        for (k, v) in &self.hyper {
            out.extend(format!("{k}={v}\n").bytes());
        }
        out.extend(format!("params={}\n\n", self.tensors.len()).bytes());
        for (name, t) in &self.tensors {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend((*d as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let malformed = |detail: &str| Error::Malformed {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Truncated {
                path: path.to_path_buf(),
                detail: "header not terminated".into(),
            })?;
            *pos += end + 1;
            String::from_utf8(rest[..end].to_vec()).map_err(|_| malformed("header is not UTF-8"))
        };
        if next_line(&mut pos)? != CHECKPOINT_MAGIC {
            return Err(malformed("bad magic"));
        }
        let version = next_line(&mut pos)?;
        if version != format!("version={CHECKPOINT_VERSION}") {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let mut hyper = Vec::new();
        let mut count = None;
        loop {
            let line = next_line(&mut pos)?;
            if line.is_empty() {
                break;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| malformed("header line without `=`"))?;
            if k == "params" {
                count = Some(v.parse::<usize>().map_err(|_| malformed("bad params count"))?);
            } else {
                hyper.push((k.to_string(), v.to_string()));
            }
        }
        let count = count.ok_or_else(|| malformed("missing params count"))?;
        let mut reader = ByteReader { bytes, pos, path };
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = reader.u32()? as usize;
            let name = String::from_utf8(reader.take(name_len)?.to_vec()).map_err(|_| malformed("name is not UTF-8"))?;
            let rank = reader.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(reader.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = reader.take(n.checked_mul(4).ok_or_else(|| malformed("shape overflow"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if reader.pos != bytes.len() {
            return Err(malformed("trailing bytes after last parameter"));
        }
        Ok(Self { hyper, tensors })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("wanted {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes, path)
}
