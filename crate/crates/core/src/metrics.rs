//! Per-trial metrics rows and the CSV writer shared by both trainers.

use std::io::{self, Write};

pub const CSV_HEADER: &str = "trial,loss,prediction_norm,grad_norm,local_disagreement";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub trial: u64,
    pub loss: f64,
    pub prediction_norm: f64,
    pub grad_norm: f64,
    /// Empty in the CSV when not measured.
    pub local_disagreement: Option<f64>,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let dis = self.local_disagreement.map(|d| format!("{d:e}")).unwrap_or_default();
        format!("{},{:e},{:e},{:e},{}", self.trial, self.loss, self.prediction_norm, self.grad_norm, dis)
    }
}

/// Writes `# key=value` comment lines, the header row, then rows, flushing
/// every `flush_every` rows.
pub struct MetricsWriter<W: Write> {
    out: W,
    flush_every: usize,
    pending: usize,
    last_trial: Option<u64>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, comments: &[(String, String)], flush_every: usize) -> io::Result<Self> {
        for (k, v) in comments {
            writeln!(out, "# {k}={v}")?;
        }
        writeln!(out, "{CSV_HEADER}")?;
        out.flush()?;
        Ok(MetricsWriter { out, flush_every: flush_every.max(1), pending: 0, last_trial: None })
    }

    pub fn write(&mut self, row: &MetricsRow) -> io::Result<()> {
        if let Some(last) = self.last_trial {
            if row.trial <= last {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidInput,
                    format!("trial {} after trial {last}", row.trial),
                ));
            }
        }
        self.last_trial = Some(row.trial);
        writeln!(self.out, "{}", row.to_csv())?;
        self.pending += 1;
        if self.pending >= self.flush_every {
            self.out.flush()?;
            self.pending = 0;
        }
        Ok(())
    }

    /// Writes a `# ...` comment line between rows.
    pub fn note(&mut self, text: &str) -> io::Result<()> {
        writeln!(self.out, "# {text}")
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}
