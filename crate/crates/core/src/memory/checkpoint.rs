//! Binary parameter checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic      4 bytes  "LMN1"
//! kind       u32      0 = model, 1 = value shard
//! n_ints     u32      then n_ints × ([u8; 16] zero-padded name, u64 value)
//! n_reals    u32      then n_reals × ([u8; 16] zero-padded name, f64 value)
//! n_tables   u32      then per table:
//!            u16 name length, name bytes (UTF-8),
//!            u64 rows, u64 cols, rows·cols × f64 row-major
//! ```
//!
//! Reals and table entries are stored as raw IEEE-754 bits, so a save/load
//! round trip is bit-exact.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{LmnError, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"LMN1";
const FIELD_NAME_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Model,
    Shard,
}

impl CheckpointKind {
    fn code(self) -> u32 {
        match self {
            CheckpointKind::Model => 0,
            CheckpointKind::Shard => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(CheckpointKind::Model),
            1 => Ok(CheckpointKind::Shard),
            other => Err(LmnError::Checkpoint(format!("unknown kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub ints: Vec<(String, u64)>,
    pub reals: Vec<(String, f64)>,
    pub tables: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind) -> Self {
        Checkpoint {
            kind,
            ints: Vec::new(),
            reals: Vec::new(),
            tables: Vec::new(),
        }
    }

    pub fn int(&self, name: &str) -> Result<u64> {
        self.ints
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| LmnError::Checkpoint(format!("missing int field {name}")))
    }

    pub fn real(&self, name: &str) -> Result<f64> {
        self.reals
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| LmnError::Checkpoint(format!("missing real field {name}")))
    }

    pub fn table(&self, name: &str) -> Result<&Matrix> {
        self.tables
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| LmnError::Checkpoint(format!("missing table {name}")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.kind.code().to_le_bytes())?;
        w.write_all(&(self.ints.len() as u32).to_le_bytes())?;
        for (name, v) in &self.ints {
            w.write_all(&field_name(name)?)?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.reals.len() as u32).to_le_bytes())?;
        for (name, v) in &self.reals {
            w.write_all(&field_name(name)?)?;
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
        w.write_all(&(self.tables.len() as u32).to_le_bytes())?;
        for (name, m) in &self.tables {
            let bytes = name.as_bytes();
            let len =
                u16::try_from(bytes.len()).map_err(|_| LmnError::Checkpoint(format!("table name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(m.data().len() * 8);
            for v in m.data() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(LmnError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let kind = CheckpointKind::from_code(read_u32(r)?)?;
        let mut ck = Checkpoint::new(kind);
        for _ in 0..read_u32(r)? {
            let name = read_field_name(r)?;
            ck.ints.push((name, read_u64(r)?));
        }
        for _ in 0..read_u32(r)? {
            let name = read_field_name(r)?;
            ck.reals.push((name, f64::from_bits(read_u64(r)?)));
        }
        for _ in 0..read_u32(r)? {
            let mut len = [0u8; 2];
            read_exact(r, &mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|e| LmnError::Checkpoint(e.to_string()))?;
            let rows = usize::try_from(read_u64(r)?).map_err(|e| LmnError::Checkpoint(e.to_string()))?;
            let cols = usize::try_from(read_u64(r)?).map_err(|e| LmnError::Checkpoint(e.to_string()))?;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| LmnError::Checkpoint(format!("table {name} too large")))?;
            let mut raw = Vec::new();
            r.by_ref().take(count as u64 * 8).read_to_end(&mut raw)?;
            if raw.len() != count * 8 {
                return Err(LmnError::Checkpoint(format!("table {name} truncated")));
            }
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("chunk of 8"))))
                .collect();
            ck.tables.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(LmnError::Checkpoint("trailing bytes after last table".into()));
        }
        Ok(ck)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Checkpoint::read_from(&mut bytes)
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = io::BufReader::new(fs::File::open(path)?);
        Checkpoint::read_from(&mut f)
    }
}

fn field_name(name: &str) -> Result<[u8; FIELD_NAME_LEN]> {
    let bytes = name.as_bytes();
    if bytes.len() > FIELD_NAME_LEN || bytes.contains(&0) {
        return Err(LmnError::Checkpoint(format!(
            "field name {name:?} must be at most 16 bytes"
        )));
    }
    let mut out = [0u8; FIELD_NAME_LEN];
    out[..bytes.len()].copy_from_slice(bytes);
    Ok(out)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => LmnError::Checkpoint("unexpected end of file".into()),
        _ => LmnError::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_field_name(r: &mut impl Read) -> Result<String> {
    let mut b = [0u8; FIELD_NAME_LEN];
    read_exact(r, &mut b)?;
    let end = b.iter().position(|&c| c == 0).unwrap_or(FIELD_NAME_LEN);
    String::from_utf8(b[..end].to_vec()).map_err(|e| LmnError::Checkpoint(e.to_string()))
}
