//! The HBC1 binary code file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HBC1"            4 bytes magic
//! h                 u32, bits per code
//! n                 u64, number of records
//! n × ceil(h/8)     packed records, code bit b_k at bit (k-1) of the record,
//!                   LSB-first within each byte, 1 ↔ +1
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::codes::BitCode;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HBC1";

pub fn write_codes<W: Write>(mut w: W, bits: usize, codes: &[BitCode]) -> Result<()> {
    if bits == 0 || bits > u32::MAX as usize {
        return Err(Error::InvalidInput(format!("unsupported bit length {bits}")));
    }
    if let Some(c) = codes.iter().find(|c| c.len() != bits) {
        return Err(Error::InvalidInput(format!(
            "code of length {} in a {bits}-bit file",
            c.len()
        )));
    }
    w.write_all(MAGIC)?;
    w.write_all(&(bits as u32).to_le_bytes())?;
    w.write_all(&(codes.len() as u64).to_le_bytes())?;
    for c in codes {
        w.write_all(&c.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Returns the bit length and the codes.
pub fn read_codes<R: Read>(mut r: R) -> Result<(usize, Vec<BitCode>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Format("truncated header".into()))?;
    r.read_exact(&mut u64buf)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let bits = u32::from_le_bytes(u32buf) as usize;
    let count = u64::from_le_bytes(u64buf);
    if bits == 0 {
        return Err(Error::Format("zero bit length".into()));
    }
    let record = bits.div_ceil(8);
    let mut buf = vec![0u8; record];
    let mut codes = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated at record {i} of {count}")))?;
        codes.push(BitCode::from_le_bytes(&buf, bits)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok((bits, codes))
}

pub fn save(path: &Path, bits: usize, codes: &[BitCode]) -> Result<()> {
    write_codes(BufWriter::new(File::create(path)?), bits, codes)
}

pub fn load(path: &Path) -> Result<(usize, Vec<BitCode>)> {
    read_codes(BufReader::new(File::open(path)?))
}
