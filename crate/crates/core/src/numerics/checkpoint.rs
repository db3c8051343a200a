//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "DASTGCN1"
//! meta_len   u32      followed by meta_len bytes of UTF-8 metadata (JSON)
//! count      u32      number of parameters
//! per parameter:
//!   name_len u32, name bytes
//!   rank     u32, then rank × u64 extents
//!   step     u64      Adam step counter
//!   values, first moments, second moments: 3 × prod(extents) f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{ParamEntry, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DASTGCN1";

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, metadata: &str) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, len_u32(metadata.len())?)?;
    w.write_all(metadata.as_bytes())?;
    write_u32(&mut w, len_u32(store.len())?)?;
    for e in store.entries() {
        write_u32(&mut w, len_u32(e.name.len())?)?;
        w.write_all(e.name.as_bytes())?;
        write_u32(&mut w, len_u32(e.value.rank())?)?;
        for &d in e.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&e.step.to_le_bytes())?;
        for t in [&e.value, &e.first_moment, &e.second_moment] {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint; gradient slots come back zeroed.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, String)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointVersionMismatch {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let meta = read_string(&mut r)?;
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let step = read_u64(&mut r)?;
        let n: usize = shape.iter().product();
        let mut tensors = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(read_array(&mut r)?));
            }
            tensors.push(Tensor::new(&shape, data)?);
        }
        let second_moment = tensors.pop().expect("three tensors");
        let first_moment = tensors.pop().expect("three tensors");
        let value = tensors.pop().expect("three tensors");
        store.insert_entry(ParamEntry {
            name,
            grad: Tensor::zeros(&shape),
            value,
            first_moment,
            second_moment,
            step,
        })?;
    }
    Ok((store, meta))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, metadata: &str) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), store, metadata)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}
