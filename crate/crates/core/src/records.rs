//! Named-record binary container shared by checkpoints and tensor dumps.
//!
//! Layout: magic `DAGN`, u32 LE version, u32 LE record count, then per record
//! a u16 LE name length, the UTF-8 name, a u8 dtype tag, a u8 rank, `rank`
//! u32 LE dims and the little-endian payload. Tag 0 is 32-bit float; tag 1 is
//! an opaque byte string (rank 1), used for configs and counters.

use std::io::{Read, Write};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DAGN";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor<f32>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: Payload,
}

impl Record {
    pub fn tensor(name: impl Into<String>, t: Tensor<f32>) -> Self {
        Self {
            name: name.into(),
            payload: Payload::F32(t),
        }
    }

    pub fn bytes(name: impl Into<String>, b: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            payload: Payload::Bytes(b),
        }
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Malformed(format!("record name too long: {}", r.name)))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        match &r.payload {
            Payload::F32(t) => {
                buf.push(DTYPE_F32);
                buf.push(t.rank() as u8);
                for &d in t.shape() {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Bytes(b) => {
                buf.push(DTYPE_BYTES);
                buf.push(1);
                buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
                buf.extend_from_slice(b);
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn parse_records(buf: &[u8]) -> Result<Vec<Record>> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: "DAGN".into(),
            found: format!("{magic:02x?}"),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = c.u32("record count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        let len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "record name")?)
            .map_err(|_| Error::Malformed(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let dtype = c.u8("dtype")?;
        let rank = c.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = match dtype {
            DTYPE_F32 => {
                let raw = c.take(numel * 4, &name)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                Payload::F32(
                    Tensor::new(shape, data)
                        .map_err(|e| Error::Malformed(format!("{name}: {e}")))?,
                )
            }
            DTYPE_BYTES if rank == 1 => Payload::Bytes(c.take(numel, &name)?.to_vec()),
            other => {
                return Err(Error::Malformed(format!(
                    "{name}: unknown dtype tag {other} (rank {rank})"
                )))
            }
        };
        out.push(Record { name, payload });
    }
    if c.pos != buf.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes",
            buf.len() - c.pos
        )));
    }
    Ok(out)
}

pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    parse_records(&buf)
}

pub fn save(path: &std::path::Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    // write-then-rename so an interrupted save never clobbers the last good file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Vec<Record>> {
    parse_records(&std::fs::read(path)?)
}

/// Name → record lookup helpers.
pub fn find<'a>(records: &'a [Record], name: &str) -> Option<&'a Record> {
    records.iter().find(|r| r.name == name)
}

pub fn find_tensor(records: &[Record], name: &str) -> Result<Tensor<f32>> {
    match find(records, name).map(|r| &r.payload) {
        Some(Payload::F32(t)) => Ok(t.clone()),
        Some(Payload::Bytes(_)) => Err(Error::Malformed(format!("record {name} is not a tensor"))),
        None => Err(Error::Malformed(format!("missing record {name}"))),
    }
}

pub fn find_bytes<'a>(records: &'a [Record], name: &str) -> Result<&'a [u8]> {
    match find(records, name).map(|r| &r.payload) {
        Some(Payload::Bytes(b)) => Ok(b),
        Some(Payload::F32(_)) => Err(Error::Malformed(format!(
            "record {name} is not a byte string"
        ))),
        None => Err(Error::Malformed(format!("missing record {name}"))),
    }
}
