//! Bit-exact checkpoint I/O in the VTT1 container format.
//!
//! Layout, normative (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "VTT1"
//! count   u32      number of tensors
//! per tensor:
//!   nlen  u16      name length in bytes
//!   name  nlen     UTF-8
//!   rows  u32
//!   cols  u32
//!   data  rows*cols*4   f32 payload, row-major
//! mcount  u32      number of metadata entries
//! per entry:
//!   klen  u16, key  klen bytes UTF-8
//!   vlen  u16, val  vlen bytes UTF-8
//! crc     u32      CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! `read_checkpoint(write_checkpoint(c))` reproduces `c` exactly, including
//! tensor order and metadata order. Writes go through a temp file plus
//! rename, so a crashed writer never leaves a torn checkpoint behind.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::TensorF32;

const MAGIC: &[u8; 4] = b"VTT1";

/// An ordered collection of named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<TensorF32>,
    metadata: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor; names must be unique and non-empty.
    pub fn push(&mut self, tensor: TensorF32) -> Result<()> {
        if tensor.name().is_empty() {
            return Err(Error::Validation {
                tensor: String::new(),
                msg: "tensor name is empty".into(),
            });
        }
        if self.get(tensor.name()).is_some() {
            return Err(Error::Validation {
                tensor: tensor.name().into(),
                msg: "duplicate tensor name".into(),
            });
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorF32> {
        self.tensors.iter().find(|t| t.name() == name)
    }

    pub fn tensors(&self) -> &[TensorF32] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Set (or overwrite) a metadata entry, preserving first-set order.
    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) -> Result<()> {
        let key = key.into();
        let value = value.into();
        match self.metadata.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.metadata.push((key, value)),
        }
        Ok(())
    }

    pub fn metadata(&self) -> impl Iterator<Item = (&str, &str)> {
        self.metadata.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn metadata_value(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

// CRC-32 (IEEE 802.3, reflected, poly 0xEDB88320), the zlib convention.
const CRC_TABLE: [u32; 256] = {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 {
                0xEDB8_8320 ^ (c >> 1)
            } else {
                c >> 1
            };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
};

#[derive(Clone, Copy)]
pub(crate) struct Crc32(u32);

impl Crc32 {
    pub fn new() -> Self {
        Crc32(0xFFFF_FFFF)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        let mut c = self.0;
        for &b in bytes {
            c = CRC_TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
        }
        self.0 = c;
    }

    pub fn value(self) -> u32 {
        self.0 ^ 0xFFFF_FFFF
    }
}

pub(crate) fn crc32(bytes: &[u8]) -> u32 {
    let mut c = Crc32::new();
    c.update(bytes);
    c.value()
}

/// CRC-32 of a vocabulary's TSV serialization; a cheap content fingerprint
/// for transplant reports.
pub fn vocab_hash(vocab: &crate::vocab::Vocabulary) -> u32 {
    crc32(&vocab.to_tsv_bytes())
}

struct CrcWriter<W: Write> {
    inner: W,
    crc: Crc32,
}

impl<W: Write> CrcWriter<W> {
    fn new(inner: W) -> Self {
        CrcWriter {
            inner,
            crc: Crc32::new(),
        }
    }
}

impl<W: Write> Write for CrcWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.crc.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Write a checkpoint atomically (temp file in the same directory, then
/// rename). Memory use is bounded by one tensor row.
pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(dir) => tempfile::NamedTempFile::new_in(dir)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    {
        let mut w = CrcWriter::new(BufWriter::new(tmp.as_file()));
        write_body(ckpt, &mut w)?;
        let crc = w.crc.value();
        let mut inner = w.inner;
        inner.write_all(&crc.to_le_bytes())?;
        inner.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_body(ckpt: &Checkpoint, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&u32_checked(ckpt.len(), "tensor count")?.to_le_bytes())?;
    let mut row_buf: Vec<u8> = Vec::new();
    for tensor in ckpt.tensors() {
        let name = tensor.name().as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Validation {
                tensor: tensor.name().into(),
                msg: "name longer than 65535 bytes".into(),
            });
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&u32_checked(tensor.rows(), "rows")?.to_le_bytes())?;
        w.write_all(&u32_checked(tensor.cols(), "cols")?.to_le_bytes())?;
        for row in 0..tensor.rows() {
            row_buf.clear();
            for &v in tensor.row(row) {
                row_buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&row_buf)?;
        }
    }
    w.write_all(&u32_checked(ckpt.metadata.len(), "metadata count")?.to_le_bytes())?;
    for (key, value) in ckpt.metadata() {
        for s in [key, value] {
            if s.len() > u16::MAX as usize {
                return Err(Error::Validation {
                    tensor: key.into(),
                    msg: "metadata entry longer than 65535 bytes".into(),
                });
            }
            w.write_all(&(s.len() as u16).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
    }
    Ok(())
}

fn u32_checked(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Validation {
        tensor: what.into(),
        msg: format!("{what} {n} exceeds u32"),
    })
}

struct CountingReader<R: Read> {
    inner: R,
    crc: Crc32,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader {
            inner,
            crc: Crc32::new(),
            offset: 0,
        }
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::CheckpointParse {
                    offset: at,
                    msg: format!("truncated while reading {what}"),
                }
            } else {
                Error::Io(e)
            }
        })?;
        self.crc.update(buf);
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let at = self.offset;
        let mut buf = vec![0u8; len];
        self.fill(&mut buf, what)?;
        String::from_utf8(buf).map_err(|_| Error::CheckpointParse {
            offset: at,
            msg: format!("{what} is not valid UTF-8"),
        })
    }
}

/// Read a checkpoint written by [`write_checkpoint`]. Malformed input of any
/// kind yields a structured error with a byte offset; no partially-parsed
/// checkpoint is ever returned.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::from(e).at_path(path))?;
    let file_size = file.metadata()?.len();
    let mut r = CountingReader::new(BufReader::new(file));

    let mut magic = [0u8; 4];
    r.fill(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::CheckpointParse {
            offset: 0,
            msg: format!("bad magic {magic:02X?}, expected \"VTT1\""),
        });
    }
    // Everything after the magic must still fit: 4-byte CRC at least.
    let budget = file_size.saturating_sub(4);

    let mut ckpt = Checkpoint::new();
    let tensor_count = r.u32_le("tensor count")?;
    for _ in 0..tensor_count {
        let at = r.offset;
        let nlen = r.u16_le("tensor name length")? as usize;
        let name = r.string(nlen, "tensor name")?;
        if name.is_empty() {
            return Err(Error::CheckpointParse {
                offset: at,
                msg: "empty tensor name".into(),
            });
        }
        let rows = r.u32_le("rows")? as usize;
        let cols = r.u32_le("cols")? as usize;
        let payload = (rows as u64) * (cols as u64) * 4;
        if r.offset + payload > budget {
            return Err(Error::CheckpointParse {
                offset: r.offset,
                msg: format!(
                    "tensor {name:?} claims {payload} payload bytes, only {} remain",
                    budget.saturating_sub(r.offset)
                ),
            });
        }
        let at = r.offset;
        let mut data = vec![0.0f32; rows * cols];
        let mut buf = vec![0u8; 4096 * 4];
        let mut filled = 0usize;
        while filled < data.len() {
            let take = (data.len() - filled).min(buf.len() / 4);
            r.fill(&mut buf[..take * 4], "tensor payload")?;
            for (i, chunk) in buf[..take * 4].chunks_exact(4).enumerate() {
                data[filled + i] = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            filled += take;
        }
        let tensor = TensorF32::new(name, rows, cols, data).map_err(|e| match e {
            Error::Validation { tensor, msg } => Error::CheckpointParse {
                offset: at,
                msg: format!("tensor {tensor:?}: {msg}"),
            },
            other => other,
        })?;
        ckpt.push(tensor).map_err(|e| match e {
            Error::Validation { tensor, msg } => Error::CheckpointParse {
                offset: at,
                msg: format!("tensor {tensor:?}: {msg}"),
            },
            other => other,
        })?;
    }

    let meta_count = r.u32_le("metadata count")?;
    for _ in 0..meta_count {
        let at = r.offset;
        let klen = r.u16_le("metadata key length")? as usize;
        let key = r.string(klen, "metadata key")?;
        let vlen = r.u16_le("metadata value length")? as usize;
        let value = r.string(vlen, "metadata value")?;
        if ckpt.metadata_value(&key).is_some() {
            return Err(Error::CheckpointParse {
                offset: at,
                msg: format!("duplicate metadata key {key:?}"),
            });
        }
        ckpt.set_metadata(key, value)?;
    }

    let computed = r.crc.value();
    let mut crc_bytes = [0u8; 4];
    let at = r.offset;
    r.inner.read_exact(&mut crc_bytes).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::CheckpointParse {
                offset: at,
                msg: "truncated before checksum".into(),
            }
        } else {
            Error::Io(e)
        }
    })?;
    let stored = u32::from_le_bytes(crc_bytes);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut rest = [0u8; 1];
    match r.inner.read(&mut rest)? {
        0 => Ok(ckpt),
        _ => Err(Error::CheckpointParse {
            offset: at + 4,
            msg: "trailing bytes after checksum".into(),
        }),
    }
}
