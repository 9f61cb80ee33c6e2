//! Run manifest: what was trained, on what, by which build, and how long it took.

use std::fs;
use std::path::{Path, PathBuf};

use lmn_core::ctr::RunConfig;

use crate::error::{CliError, IoContext};

pub const VERSION_TAG: &str = concat!("lmn-cli ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub config_snapshot: PathBuf,
    /// Named wall-clock durations in seconds, in recording order.
    pub timings: Vec<(String, f64)>,
}

impl RunManifest {
    fn rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("version".to_string(), self.version.clone()),
            ("seed".to_string(), self.seed.to_string()),
            ("data".to_string(), self.data.display().to_string()),
            ("checkpoint".to_string(), self.checkpoint.display().to_string()),
            ("report".to_string(), self.report.display().to_string()),
            (
                "config_snapshot".to_string(),
                self.config_snapshot.display().to_string(),
            ),
        ];
        for line in self.config.to_key_values().lines() {
            if let Some((k, v)) = line.split_once('=') {
                rows.push((format!("config.{k}"), v.to_string()));
            }
        }
        for (name, secs) in &self.timings {
            rows.push((format!("seconds.{name}"), format!("{secs:.3}")));
        }
        rows
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::Core(e.into());
        w.write_record(["key", "value"]).map_err(csv_err)?;
        for (k, v) in self.rows() {
            w.write_record([k, v]).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bad = |msg: String| CliError::Manifest {
            path: path.to_path_buf(),
            msg,
        };
        let text = fs::read(path).at(path)?;
        let mut reader = csv::Reader::from_reader(text.as_slice());
        let mut config = String::new();
        let mut fields = std::collections::BTreeMap::new();
        let mut timings = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let (Some(k), Some(v)) = (record.get(0), record.get(1)) else {
                return Err(bad("expected key,value rows".into()));
            };
            if let Some(key) = k.strip_prefix("config.") {
                config.push_str(&format!("{key}={v}\n"));
            } else if let Some(name) = k.strip_prefix("seconds.") {
                let secs = v.parse().map_err(|_| bad(format!("bad duration {v:?}")))?;
                timings.push((name.to_string(), secs));
            } else {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let mut field = |k: &str| fields.remove(k).ok_or_else(|| bad(format!("missing {k}")));
        let manifest = RunManifest {
            version: field("version")?,
            seed: field("seed")?.parse().map_err(|_| bad("bad seed".into()))?,
            config: RunConfig::parse(&config)?,
            data: field("data")?.into(),
            checkpoint: field("checkpoint")?.into(),
            report: field("report")?.into(),
            config_snapshot: field("config_snapshot")?.into(),
            timings,
        };
        if let Some(k) = fields.keys().next() {
            return Err(bad(format!("unknown key {k}")));
        }
        Ok(manifest)
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut config = RunConfig::default();
        config.tower = vec![64, 32];
        config.seed = 7;
        let m = RunManifest {
            version: VERSION_TAG.into(),
            seed: 7,
            config,
            data: "data, with comma".into(),
            checkpoint: "out/model.ckpt".into(),
            report: "out/report.csv".into(),
            config_snapshot: "out/config.txt".into(),
            timings: vec![("train".into(), 1.25), ("total".into(), 2.0)],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        write_atomic(&path, &m.to_csv().unwrap()).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);

        fs::write(&path, "key,value\nversion,x\n").unwrap();
        assert!(RunManifest::load(&path).is_err());
    }
}
