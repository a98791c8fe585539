//! Little-endian primitives shared by the binary file formats.
//!
//! Every format is `header | payload | crc32(payload)`; the writer and reader
//! here track the checksum over the payload section only.

use std::io::{self, Read, Write};

use crc32fast::Hasher;

use crate::error::{Error, Result};

pub(crate) struct ChecksumWriter<W> {
    inner: W,
    hasher: Option<Hasher>,
}

impl<W: Write> ChecksumWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner, hasher: None }
    }

    /// Starts accumulating the checksum; everything written before is header.
    pub fn begin_payload(&mut self) {
        self.hasher = Some(Hasher::new());
    }

    pub fn bytes(&mut self, buf: &[u8]) -> io::Result<()> {
        if let Some(h) = self.hasher.as_mut() {
            h.update(buf);
        }
        self.inner.write_all(buf)
    }

    pub fn u8(&mut self, v: u8) -> io::Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    /// Writes the trailing checksum and returns the inner writer.
    pub fn finish(mut self) -> io::Result<W> {
        let crc = self.hasher.take().unwrap_or_default().finalize();
        self.inner.write_all(&crc.to_le_bytes())?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub(crate) struct ChecksumReader<R> {
    inner: R,
    hasher: Option<Hasher>,
}

impl<R: Read> ChecksumReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, hasher: None }
    }

    pub fn begin_payload(&mut self) {
        self.hasher = Some(Hasher::new());
    }

    pub fn exact(&mut self, buf: &mut [u8]) -> io::Result<()> {
        self.inner.read_exact(buf)?;
        if let Some(h) = self.hasher.as_mut() {
            h.update(buf);
        }
        Ok(())
    }

    pub fn magic(&mut self) -> io::Result<[u8; 4]> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(b)
    }

    pub fn u8(&mut self) -> io::Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b)?;
        Ok(b[0])
    }

    pub fn u32(&mut self) -> io::Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> io::Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f32s(&mut self, out: &mut Vec<f32>, n: usize) -> io::Result<()> {
        let mut buf = vec![0u8; 4 * n];
        self.exact(&mut buf)?;
        out.clear();
        out.extend(
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
        Ok(())
    }

    /// Reads the trailing checksum, compares it, and requires end of input.
    pub fn verify(&mut self, record: u64) -> Result<()> {
        let expected = self.hasher.take().unwrap_or_default().finalize();
        let mut b = [0u8; 4];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::corrupt(record, "missing checksum"))?;
        let found = u32::from_le_bytes(b);
        if found != expected {
            return Err(Error::corrupt(
                record,
                format!("checksum mismatch: stored {found:#010x}, computed {expected:#010x}"),
            ));
        }
        let mut extra = [0u8; 1];
        match self.inner.read(&mut extra) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::corrupt(record, "trailing bytes after checksum")),
            Err(e) => Err(e.into()),
        }
    }
}

/// Maps a short read inside the payload to `Corrupt` at the given record.
pub(crate) fn at_record(record: u64) -> impl Fn(io::Error) -> Error {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::corrupt(record, "truncated record")
        } else {
            Error::Io(e)
        }
    }
}

/// Maps a short read inside the header to `InvalidHeader`.
pub(crate) fn in_header(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::InvalidHeader("truncated header".into())
    } else {
        Error::Io(e)
    }
}

pub(crate) fn check_magic(found: [u8; 4], expected: &[u8; 4]) -> Result<()> {
    if &found != expected {
        return Err(Error::BadMagic {
            expected: *expected,
            found,
        });
    }
    Ok(())
}

pub(crate) fn check_version(found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::FormatVersionMismatch { expected, found });
    }
    Ok(())
}
