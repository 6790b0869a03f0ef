//! Little-endian binary container shared by model checkpoints and inversion
//! artifacts: an 8-byte magic, a `u32` version, then payload fields.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::predictor::Condition;

pub(crate) struct BinWriter<W: Write> {
    inner: W,
}

impl<W: Write> BinWriter<W> {
    pub fn new(mut inner: W, magic: &[u8; 8], version: u32) -> Result<Self> {
        inner.write_all(magic)?;
        inner.write_all(&version.to_le_bytes())?;
        Ok(Self { inner })
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64s(&mut self, values: &[f64]) -> Result<()> {
        for v in values {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn condition(&mut self, c: &Condition) -> Result<()> {
        match c {
            Condition::Unconditional => self.u64(u64::MAX),
            Condition::Subset(idx) => {
                self.u64(idx.len() as u64)?;
                idx.iter().try_for_each(|&i| self.u64(i as u64))
            }
        }
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub(crate) struct BinReader<R: Read> {
    inner: R,
}

impl<R: Read> BinReader<R> {
    /// Checks the magic and returns the reader plus the stored version.
    pub fn new(mut inner: R, magic: &[u8; 8]) -> Result<(Self, u32)> {
        let mut got = [0u8; 8];
        inner
            .read_exact(&mut got)
            .map_err(|_| Error::Format("file too short for header".into()))?;
        if &got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            )));
        }
        let mut v = [0u8; 4];
        inner
            .read_exact(&mut v)
            .map_err(|_| Error::Format("file too short for version".into()))?;
        Ok((Self { inner }, u32::from_le_bytes(v)))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::Format("unexpected end of file".into()))?;
        Ok(u64::from_le_bytes(b))
    }

    /// Reads a `u64` used as a length or index, bounded by `limit`.
    pub fn usize(&mut self, limit: usize) -> Result<usize> {
        let v = self.u64()?;
        if v > limit as u64 {
            return Err(Error::Format(format!(
                "field value {v} exceeds limit {limit}"
            )));
        }
        Ok(v as usize)
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.u64().map(f64::from_bits)).collect()
    }

    pub fn condition(&mut self) -> Result<Condition> {
        let n = self.u64()?;
        if n == u64::MAX {
            return Ok(Condition::Unconditional);
        }
        if n > 1 << 20 {
            return Err(Error::Format(format!(
                "condition subset length {n} too large"
            )));
        }
        let idx = (0..n)
            .map(|_| self.usize(usize::MAX))
            .collect::<Result<Vec<_>>>()?;
        Ok(Condition::Subset(idx))
    }

    /// Errors unless the input is exhausted.
    pub fn finish(mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after payload".into())),
        }
    }
}
