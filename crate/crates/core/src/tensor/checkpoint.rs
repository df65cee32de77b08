//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   [u8; 4]  = "C3CA"
//! version u32      = 1
//! repeated until EOF:
//!   name_len u32, name [u8; name_len] (UTF-8)
//!   frozen   u8 (0 or 1)
//!   ndim     u32, dims [u64; ndim]
//!   payload  [f64; prod(dims)]
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"C3CA";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.frozen));
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(mut bytes: &[u8]) -> std::result::Result<ParamStore, String> {
    let mut magic = [0u8; 4];
    bytes.read_exact(&mut magic).map_err(|_| "truncated header".to_string())?;
    if magic != CHECKPOINT_MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let version = read_u32(&mut bytes)?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut store = ParamStore::new();
    while !bytes.is_empty() {
        let name_len = read_u32(&mut bytes)? as usize;
        let name = take(&mut bytes, name_len)?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| "name is not UTF-8".to_string())?;
        let frozen = match take(&mut bytes, 1)?[0] {
            0 => false,
            1 => true,
            f => return Err(format!("{name}: bad frozen flag {f}")),
        };
        let ndim = read_u32(&mut bytes)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = take(&mut bytes, 8)?;
            shape.push(u64::from_le_bytes(d.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut bytes, numel.checked_mul(8).ok_or("payload overflow")?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        store.add(name, tensor, frozen).map_err(|e| e.to_string())?;
    }
    Ok(store)
}

fn read_u32(bytes: &mut &[u8]) -> std::result::Result<u32, String> {
    let b = take(bytes, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if bytes.len() < n {
        return Err("truncated record".to_string());
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode(store))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|detail| Error::Checkpoint { path: path.to_path_buf(), detail })
}

/// Writes to a sibling `.tmp` file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let write = || -> io::Result<()> {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}
