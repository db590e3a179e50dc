//! Binary container of named tensor records.
//!
//! Used for training checkpoints and sampler trajectory dumps. Layout,
//! all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "DDTC"
//! version u32      (currently 1)
//! step    u64      creation step
//! config  u32 len + UTF-8 bytes   (echo of the effective configuration)
//! rng     u32 len + bytes         (generator state, 56 bytes)
//! count   u32
//! record: name u32 len + UTF-8, rank u32, extents u64 x rank,
//!         values f64 x numel (row-major)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::PrngState;
use crate::tensor::Array;

const MAGIC: &[u8; 4] = b"DDTC";
pub const FORMAT_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 16;

#[derive(Debug, Clone)]
pub struct ContainerHeader {
    pub version: u32,
    pub step: u64,
    pub config_echo: String,
    pub rng_state: PrngState,
}

#[derive(Debug, Clone)]
pub struct TensorRecord {
    pub name: String,
    pub value: Array,
}

pub fn write_container(
    path: &Path,
    header: &ContainerHeader,
    records: &[TensorRecord],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&header.version.to_le_bytes());
    buf.extend_from_slice(&header.step.to_le_bytes());

    let cfg = header.config_echo.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg);

    let rng = header.rng_state.to_bytes();
    buf.extend_from_slice(&(rng.len() as u32).to_le_bytes());
    buf.extend_from_slice(&rng);

    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        let name = rec.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let shape = rec.value.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in rec.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "container truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, max: usize) -> Result<String> {
        let len = self.u32()? as usize;
        if len > max {
            return Err(Error::Format(format!("string length {len} exceeds limit {max}")));
        }
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
    }
}

pub fn read_container(path: &Path) -> Result<(ContainerHeader, Vec<TensorRecord>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { data: &bytes, pos: 0 };

    if cur.take(4)? != MAGIC {
        return Err(Error::Format(format!("{} is not a tensor container", path.display())));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let step = cur.u64()?;
    let config_echo = cur.string(1 << 20)?;
    let rng_len = cur.u32()? as usize;
    let rng_state = PrngState::from_bytes(cur.take(rng_len)?)?;

    let count = cur.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name = cur.string(MAX_NAME_LEN)?;
        let rank = cur.u32()? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("record {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        records.push(TensorRecord { name, value: Array::new(shape, data)? });
    }
    Ok((ContainerHeader { version, step, config_echo, rng_state }, records))
}
