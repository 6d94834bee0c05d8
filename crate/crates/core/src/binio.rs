//! Bounds-checked readers for the binary file formats.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    pub fn path(&self) -> PathBuf {
        self.path.to_path_buf()
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                path: self.path(),
                detail: format!("needed {n} bytes for {what}, {} left", self.remaining()),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let n = magic.len().min(self.remaining());
        if self.buf[self.pos..self.pos + n] != magic[..n] {
            return Err(Error::BadMagic {
                path: self.path(),
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        self.take(magic.len(), "magic")?;
        Ok(())
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    pub fn u16_le(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub fn u64_le(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.array(what)?))
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Malformed {
                path: self.path(),
                detail: format!("{} unexpected trailing bytes", self.remaining()),
            });
        }
        Ok(())
    }
}

/// Per-item label sets: `u16` count followed by that many `u32` ids.
pub(crate) fn write_labels(out: &mut Vec<u8>, labels: &[Vec<u32>]) -> Result<()> {
    for (i, set) in labels.iter().enumerate() {
        let count = u16::try_from(set.len())
            .map_err(|_| Error::invalid(format!("item {i} has {} labels, more than u16 allows", set.len())))?;
        out.extend_from_slice(&count.to_le_bytes());
        for l in set {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(())
}

pub(crate) fn read_labels(reader: &mut ByteReader<'_>, n: usize) -> Result<Vec<Vec<u32>>> {
    let mut labels = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let count = reader.u16_le("label count")? as usize;
        let mut set = Vec::with_capacity(count);
        for _ in 0..count {
            set.push(reader.u32_le("label")?);
        }
        labels.push(set);
    }
    Ok(labels)
}

/// Writes `bytes` to a sibling temp file, then renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
