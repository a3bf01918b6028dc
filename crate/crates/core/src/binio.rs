//! Shared little-endian binary IO with streaming CRC32, used by the dataset
//! and model file formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) struct HashingWriter<W: Write> {
    pub inner: W,
    pub hasher: crc32fast::Hasher,
}

impl<W: Write> HashingWriter<W> {
    pub fn new(inner: W) -> Self {
        HashingWriter { inner, hasher: crc32fast::Hasher::new() }
    }

    /// Writes the accumulated CRC32 (not hashed itself) and flushes.
    pub fn finish(mut self) -> Result<()> {
        let crc = self.hasher.clone().finalize();
        self.inner.write_all(&crc.to_le_bytes())?;
        self.inner.flush()?;
        Ok(())
    }
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

pub(crate) struct CountingReader<R: Read> {
    pub inner: R,
    pub offset: u64,
    pub hasher: crc32fast::Hasher,
}

impl<R: Read> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0, hasher: crc32fast::Hasher::new() }
    }

    /// Reads exactly `buf.len()` hashed bytes; returns the offset they
    /// started at.
    pub fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<u64> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::format(at, format!("unexpected end of file while reading {what}")))?;
        self.offset += buf.len() as u64;
        self.hasher.update(buf);
        Ok(at)
    }

    pub fn read_u8(&mut self, what: &str) -> Result<(u8, u64)> {
        let mut b = [0u8; 1];
        let at = self.read_exact_at(&mut b, what)?;
        Ok((b[0], at))
    }

    pub fn read_u16(&mut self, what: &str) -> Result<(u16, u64)> {
        let mut b = [0u8; 2];
        let at = self.read_exact_at(&mut b, what)?;
        Ok((u16::from_le_bytes(b), at))
    }

    pub fn read_u32(&mut self, what: &str) -> Result<(u32, u64)> {
        let mut b = [0u8; 4];
        let at = self.read_exact_at(&mut b, what)?;
        Ok((u32::from_le_bytes(b), at))
    }

    pub fn read_u64(&mut self, what: &str) -> Result<(u64, u64)> {
        let mut b = [0u8; 8];
        let at = self.read_exact_at(&mut b, what)?;
        Ok((u64::from_le_bytes(b), at))
    }

    pub fn read_f32(&mut self, what: &str) -> Result<(f32, u64)> {
        let mut b = [0u8; 4];
        let at = self.read_exact_at(&mut b, what)?;
        Ok((f32::from_le_bytes(b), at))
    }

    pub fn read_f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.read_exact_at(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect())
    }

    /// Verifies the trailing (unhashed) CRC32 against everything read so far.
    pub fn verify_crc(mut self) -> Result<()> {
        let computed = self.hasher.clone().finalize();
        let at = self.offset;
        let mut crc_bytes = [0u8; 4];
        self.inner
            .read_exact(&mut crc_bytes)
            .map_err(|_| Error::format(at, "unexpected end of file while reading checksum"))?;
        let stored = u32::from_le_bytes(crc_bytes);
        if stored != computed {
            return Err(Error::format(
                at,
                format!("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"),
            ));
        }
        Ok(())
    }
}
