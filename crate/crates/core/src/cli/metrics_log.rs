//! Append-only CSV log of evaluation records.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::MetricsRecord;

pub const HEADER: &str =
    "iteration,d_loss,g_adv_loss,enc_nll,cluster_ce,prior_reg,acc,latent_mse,mmd,mode_coverage";

/// One CSV row; floats use the shortest representation that parses back exactly.
pub fn format_row(r: &MetricsRecord) -> String {
    let l = &r.losses;
    let cov = r.mode_coverage.map(|c| c.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.iteration, l.d_loss, l.g_adv_loss, l.enc_nll, l.cluster_ce, l.prior_reg, r.acc, r.latent_mse, r.mmd, cov
    )
}

pub fn parse_row(line: &str) -> std::result::Result<MetricsRecord, String> {
    let cells: Vec<&str> = line.split(',').collect();
    if cells.len() != 10 {
        return Err(format!("expected 10 fields, found {}", cells.len()));
    }
    let f = |i: usize| cells[i].parse::<f64>().map_err(|e| format!("field {i}: {e}"));
    Ok(MetricsRecord {
        iteration: cells[0].parse().map_err(|e| format!("iteration: {e}"))?,
        losses: LossBreakdown {
            d_loss: f(1)?,
            g_adv_loss: f(2)?,
            enc_nll: f(3)?,
            cluster_ce: f(4)?,
            prior_reg: f(5)?,
        },
        acc: f(6)?,
        latent_mse: f(7)?,
        mmd: f(8)?,
        mode_coverage: if cells[9].is_empty() { None } else { Some(f(9)?) },
    })
}

/// Reads a log, checking the header and strictly increasing iterations.
pub fn read_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<MetricsRecord> = Vec::new();
    let mut offset = 0u64;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let err = |message: String| Error::Format {
            path: path.to_path_buf(),
            offset,
            message: format!("line {}: {message}", i + 1),
        };
        if i == 0 {
            if line != HEADER {
                return Err(err("unexpected header".into()));
            }
        } else {
            let rec = parse_row(&line).map_err(err)?;
            if out.last().is_some_and(|p| p.iteration >= rec.iteration) {
                return Err(err("iteration not strictly increasing".into()));
            }
            out.push(rec);
        }
        offset += line.len() as u64 + 1;
    }
    if out.is_empty() && offset == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "empty metrics log".into(),
        });
    }
    Ok(out)
}

/// Writer that creates the file with a header and appends one flushed row per record.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
    last: Option<u64>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{HEADER}")?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last: None,
        })
    }

    /// Reopens an existing log for appending.
    pub fn open(path: &Path) -> Result<Self> {
        let last = read_log(path)?.last().map(|r| r.iteration);
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        if self.last.is_some_and(|l| l >= record.iteration) {
            return Err(Error::InvalidArgument(format!(
                "metrics log: iteration {} does not follow {}",
                record.iteration,
                self.last.unwrap_or_default()
            )));
        }
        writeln!(self.file, "{}", format_row(record))?;
        self.file.flush()?;
        self.last = Some(record.iteration);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(it: u64, cov: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            iteration: it,
            losses: LossBreakdown {
                d_loss: 1.0 / 3.0,
                g_adv_loss: -0.1,
                enc_nll: 1e-300,
                cluster_ce: f64::MAX,
                prior_reg: 0.0,
            },
            acc: 0.2,
            latent_mse: 12.5,
            mmd: -1e-5,
            mode_coverage: cov,
        }
    }

    #[test]
    fn rows_round_trip() {
        for r in [rec(5, None), rec(7, Some(0.875))] {
            assert_eq!(parse_row(&format_row(&r)).unwrap(), r);
        }
    }

    #[test]
    fn writer_enforces_order_and_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut log = MetricsLog::create(&p).unwrap();
        log.append(&rec(1, None)).unwrap();
        log.append(&rec(3, Some(1.0))).unwrap();
        assert!(log.append(&rec(3, None)).is_err());
        drop(log);
        let mut log = MetricsLog::open(&p).unwrap();
        assert!(log.append(&rec(2, None)).is_err());
        log.append(&rec(4, None)).unwrap();
        let back = read_log(&p).unwrap();
        assert_eq!(back.iter().map(|r| r.iteration).collect::<Vec<_>>(), [1, 3, 4]);
    }

    #[test]
    fn malformed_logs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, format!("{HEADER}\n{}\n{}\n", format_row(&rec(4, None)), format_row(&rec(4, None)))).unwrap();
        assert!(read_log(&p).is_err());
        std::fs::write(&p, "iteration\n").unwrap();
        assert!(read_log(&p).is_err());
        std::fs::write(&p, format!("{HEADER}\n1,2\n")).unwrap();
        assert!(read_log(&p).is_err());
    }
}
