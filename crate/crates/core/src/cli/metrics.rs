use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// First line of every metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<String>,
}

/// JSONL writer: a header line, then one record per line.
pub struct MetricsLog {
    out: BufWriter<File>,
}

#[derive(Deserialize)]
struct IterOnly {
    iter: usize,
}

impl MetricsLog {
    pub fn create(path: &Path, header: &MetricsHeader) -> Result<Self> {
        let mut log = Self {
            out: BufWriter::new(File::create(path)?),
        };
        log.write(header)?;
        Ok(log)
    }

    /// Reopens an existing log for a resumed run: the header must match and
    /// records from `start_iter` on are dropped before appending.
    pub fn resume(path: &Path, header: &MetricsHeader, start_iter: usize) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::argument(format!("cannot reopen metrics log {}: {e}", path.display())))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::argument("metrics log is empty"))?;
        let found: MetricsHeader = serde_json::from_str(&first)?;
        if found.config_hash != header.config_hash {
            return Err(Error::config(
                "--resume",
                format!(
                    "config hash {} differs from the run being resumed ({})",
                    header.config_hash, found.config_hash
                ),
            ));
        }
        let mut kept = vec![first];
        for line in lines {
            let line = line?;
            let rec: IterOnly = serde_json::from_str(&line)?;
            if rec.iter < start_iter {
                kept.push(line);
            }
        }
        let mut out = BufWriter::new(File::create(path)?);
        for line in kept {
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
        Ok(Self { out })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Reads the records (not the header) of a metrics log as JSON values.
pub fn read_records(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Writes `iter,<field>` rows for every record where `field` is a number.
pub fn write_projection(records: &[serde_json::Value], field: &str, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "iter,{field}")?;
    for r in records {
        if let (Some(i), Some(v)) = (r["iter"].as_u64(), r[field].as_f64()) {
            writeln!(out, "{i},{v}")?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(hash: &str) -> MetricsHeader {
        MetricsHeader {
            schema_version: SCHEMA_VERSION,
            command: "rl".into(),
            config_hash: hash.into(),
            task: "gauss1d".into(),
            algorithm: Some("ddrl".into()),
        }
    }

    #[test]
    fn resume_truncates_and_checks_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut log = MetricsLog::create(&p, &header("h")).unwrap();
        for i in 0..5 {
            log.write(&serde_json::json!({"iter": i, "mean_reward": i as f64 / 2.0}))
                .unwrap();
        }
        log.flush().unwrap();
        drop(log);
        assert!(MetricsLog::resume(&p, &header("other"), 3).is_err());
        let mut log = MetricsLog::resume(&p, &header("h"), 3).unwrap();
        log.write(&serde_json::json!({"iter": 3, "mean_reward": 9.0})).unwrap();
        log.flush().unwrap();
        let recs = read_records(&p).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[3]["mean_reward"], 9.0);
        let first = std::fs::read_to_string(&p).unwrap().lines().next().unwrap().to_string();
        assert!(first.starts_with("{\"schema_version\":1,"));
        let csv = dir.path().join("r.csv");
        write_projection(&recs, "mean_reward", &csv).unwrap();
        assert_eq!(
            std::fs::read_to_string(csv).unwrap(),
            "iter,mean_reward\n0,0\n1,0.5\n2,1\n3,9\n"
        );
    }
}
