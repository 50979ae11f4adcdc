//! Little-endian readers/writers for the versioned binary model files.
//!
//! Every file starts with 4 magic bytes and a u32 format version; payloads
//! are length-prefixed so truncation is detected instead of misread.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BinError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },
    #[error("corrupt file: {0}")]
    Corrupt(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 4], version: u32) -> Result<(), BinError> {
    w.write_all(magic)?;
    write_u32(w, version)
}

pub fn read_magic<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<(), BinError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| BinError::BadMagic { expected: *magic })?;
    if &buf != magic {
        return Err(BinError::BadMagic { expected: *magic });
    }
    let found = read_u32(r)?;
    if found != version {
        return Err(BinError::BadVersion { found, expected: version });
    }
    Ok(())
}

pub fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<(), BinError> {
    w.write_all(&[v])?;
    Ok(())
}

pub fn read_u8<R: Read>(r: &mut R) -> Result<u8, BinError> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf[0])
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<(), BinError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32, BinError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<(), BinError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64, BinError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn write_i64<W: Write>(w: &mut W, v: i64) -> Result<(), BinError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_i64<R: Read>(r: &mut R) -> Result<i64, BinError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(i64::from_le_bytes(buf))
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<(), BinError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64, BinError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn write_string<W: Write>(w: &mut W, s: &str) -> Result<(), BinError> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_string<R: Read>(r: &mut R) -> Result<String, BinError> {
    let len = read_u64(r)? as usize;
    if len > (1 << 30) {
        return Err(BinError::Corrupt("string length implausibly large"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| BinError::Corrupt("string is not UTF-8"))
}

pub fn write_f64_slice<W: Write>(w: &mut W, v: &[f64]) -> Result<(), BinError> {
    write_u64(w, v.len() as u64)?;
    for &x in v {
        write_f64(w, x)?;
    }
    Ok(())
}

pub fn read_f64_vec<R: Read>(r: &mut R) -> Result<Vec<f64>, BinError> {
    let len = read_u64(r)? as usize;
    if len > (1 << 28) {
        return Err(BinError::Corrupt("array length implausibly large"));
    }
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(read_f64(r)?);
    }
    Ok(out)
}

/// Asserts the reader is exhausted; trailing bytes mean corruption.
pub fn expect_eof<R: Read>(r: &mut R) -> Result<(), BinError> {
    let mut buf = [0u8; 1];
    match r.read(&mut buf)? {
        0 => Ok(()),
        _ => Err(BinError::Corrupt("trailing bytes after payload")),
    }
}

fn truncated(_: io::Error) -> BinError {
    BinError::Corrupt("unexpected end of file")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_scalars_and_strings() {
        let mut buf = Vec::new();
        write_magic(&mut buf, b"TEST", 3).unwrap();
        write_u64(&mut buf, 42).unwrap();
        write_i64(&mut buf, -7).unwrap();
        write_f64(&mut buf, 1.5).unwrap();
        write_string(&mut buf, "héllo").unwrap();
        write_f64_slice(&mut buf, &[0.25, -2.0]).unwrap();

        let mut r = buf.as_slice();
        read_magic(&mut r, b"TEST", 3).unwrap();
        assert_eq!(read_u64(&mut r).unwrap(), 42);
        assert_eq!(read_i64(&mut r).unwrap(), -7);
        assert_eq!(read_f64(&mut r).unwrap(), 1.5);
        assert_eq!(read_string(&mut r).unwrap(), "héllo");
        assert_eq!(read_f64_vec(&mut r).unwrap(), vec![0.25, -2.0]);
        expect_eof(&mut r).unwrap();
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        let mut buf = Vec::new();
        write_magic(&mut buf, b"AAAA", 1).unwrap();
        let mut r = buf.as_slice();
        assert!(matches!(read_magic(&mut r, b"BBBB", 1), Err(BinError::BadMagic { .. })));
        let mut r = buf.as_slice();
        assert!(matches!(
            read_magic(&mut r, b"AAAA", 2),
            Err(BinError::BadVersion { found: 1, expected: 2 })
        ));
    }

    #[test]
    fn truncation_is_detected() {
        let mut buf = Vec::new();
        write_u64(&mut buf, 12).unwrap();
        buf.truncate(5);
        let mut r = buf.as_slice();
        assert!(matches!(read_u64(&mut r), Err(BinError::Corrupt(_))));
    }
}
