use std::fs;
use std::io;
use std::path::Path;

use crate::error::{LmnError, Result};

/// Id 0 is reserved for padding in every feature family.
pub const PADDING_ID: usize = 0;

/// One impression: user, candidate item, cross feature, the user's recent
/// clicks (most recent first, zero-padded to a fixed length) and the label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub user_id: usize,
    pub item_id: usize,
    pub cross_id: usize,
    pub seq: Vec<usize>,
    /// Number of real (non-padding) leading entries in `seq`.
    pub mask_len: usize,
    pub label: u8,
    pub day: u32,
}

impl Sample {
    /// Checks the padding invariant: the first `mask_len` ids are real and the rest are 0.
    pub fn validate(&self) -> Result<()> {
        if self.mask_len > self.seq.len() {
            return Err(LmnError::contract(format!(
                "mask_len {} exceeds sequence length {}",
                self.mask_len,
                self.seq.len()
            )));
        }
        if let Some(t) = self.seq[..self.mask_len].iter().position(|&id| id == PADDING_ID) {
            return Err(LmnError::contract(format!("padding id at real position {t}")));
        }
        if let Some(t) = self.seq[self.mask_len..].iter().position(|&id| id != PADDING_ID) {
            return Err(LmnError::contract(format!(
                "non-padding id at masked position {}",
                self.mask_len + t
            )));
        }
        if self.label > 1 {
            return Err(LmnError::contract(format!("label must be 0 or 1, got {}", self.label)));
        }
        if self.user_id == PADDING_ID || self.item_id == PADDING_ID {
            return Err(LmnError::contract("user and item ids start at 1"));
        }
        Ok(())
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.seq.len()).map(|t| t < self.mask_len).collect()
    }

    pub fn real_items(&self) -> &[usize] {
        &self.seq[..self.mask_len]
    }

    /// Copy with the sequence padded (or truncated from the tail) to `len`.
    pub fn with_seq_len(&self, len: usize) -> Sample {
        let mut s = self.clone();
        s.seq.resize(len, PADDING_ID);
        s.mask_len = s.mask_len.min(len);
        s
    }
}

/// Table sizes (including the padding row) needed to embed a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Vocab {
    pub users: usize,
    pub items: usize,
    pub cross: usize,
}

impl Vocab {
    pub fn covering<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Vocab {
        let mut v = Vocab {
            users: 1,
            items: 1,
            cross: 1,
        };
        for s in samples {
            v.users = v.users.max(s.user_id + 1);
            v.items = v.items.max(s.item_id + 1);
            v.cross = v.cross.max(s.cross_id + 1);
            if let Some(m) = s.seq.iter().max() {
                v.items = v.items.max(m + 1);
            }
        }
        v
    }

    pub fn union(self, other: Vocab) -> Vocab {
        Vocab {
            users: self.users.max(other.users),
            items: self.items.max(other.items),
            cross: self.cross.max(other.cross),
        }
    }
}

pub const CSV_HEADER: [&str; 7] = ["user_id", "item_id", "cross_id", "seq", "mask_len", "label", "day"];

pub fn write_csv<W: io::Write>(w: W, samples: &[Sample]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CSV_HEADER)?;
    for s in samples {
        let seq = s.seq.iter().map(usize::to_string).collect::<Vec<_>>().join("|");
        wr.write_record([
            s.user_id.to_string(),
            s.item_id.to_string(),
            s.cross_id.to_string(),
            seq,
            s.mask_len.to_string(),
            s.label.to_string(),
            s.day.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(r: R) -> Result<Vec<Sample>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(LmnError::Parse(format!("unexpected CSV header {header:?}")));
    }
    let mut out = Vec::new();
    let mut seq_len = None;
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |col: usize| -> Result<usize> {
            rec[col]
                .parse()
                .map_err(|e| LmnError::Parse(format!("line {line}, {}: {e}", CSV_HEADER[col])))
        };
        let seq = rec[3]
            .split('|')
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| LmnError::Parse(format!("line {line}, seq: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        match seq_len {
            None => seq_len = Some(seq.len()),
            Some(l) if l != seq.len() => {
                return Err(LmnError::Parse(format!(
                    "line {line}: sequence has {} ids, expected {l}",
                    seq.len()
                )))
            }
            _ => {}
        }
        let label = num(5)?;
        let sample = Sample {
            user_id: num(0)?,
            item_id: num(1)?,
            cross_id: num(2)?,
            seq,
            mask_len: num(4)?,
            label: u8::try_from(label).map_err(|e| LmnError::Parse(format!("line {line}, label: {e}")))?,
            day: u32::try_from(num(6)?).map_err(|e| LmnError::Parse(format!("line {line}, day: {e}")))?,
        };
        sample
            .validate()
            .map_err(|e| LmnError::Parse(format!("line {line}: {e}")))?;
        out.push(sample);
    }
    Ok(out)
}

pub fn save_csv(path: &Path, samples: &[Sample]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_csv(io::BufWriter::new(fs::File::create(&tmp)?), samples)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Vec<Sample>> {
    read_csv(io::BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sample {
        Sample {
            user_id: 3,
            item_id: 9,
            cross_id: 2,
            seq: vec![4, 5, 0, 0],
            mask_len: 2,
            label: 1,
            day: 6,
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[sample()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "user_id,item_id,cross_id,seq,mask_len,label,day\n3,9,2,4|5|0|0,2,1,6\n"
        );
        assert_eq!(read_csv(&buf[..]).unwrap(), vec![sample()]);
    }

    #[test]
    fn invariants_are_checked() {
        let mut s = sample();
        s.mask_len = 3;
        assert!(s.validate().is_err());
        let mut s = sample();
        s.seq[3] = 7;
        assert!(s.validate().is_err());
        let mut s = sample();
        s.label = 2;
        assert!(s.validate().is_err());
        assert!(read_csv(&b"user_id,item_id\n1,2\n"[..]).is_err());
        assert!(read_csv(&b"user_id,item_id,cross_id,seq,mask_len,label,day\n1,2,3,0|4,1,0,0\n"[..]).is_err());
    }

    #[test]
    fn padding_extension() {
        let s = sample().with_seq_len(7);
        assert_eq!(s.seq, vec![4, 5, 0, 0, 0, 0, 0]);
        assert!(s.validate().is_ok());
        assert_eq!(
            Vocab::covering([&s]),
            Vocab {
                users: 4,
                items: 10,
                cross: 3
            }
        );
    }
}
