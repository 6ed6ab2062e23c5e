use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{HarnessError, Result};

pub const METRICS_HEADER: &str =
    "iteration,env_steps,mean_return,std_return,kl,clip_frac,value_loss,entropy,lr,wall_clock_seconds";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub env_steps: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub lr: f64,
    pub wall_clock_seconds: f64,
}

/// Nine significant digits in scientific notation.
pub fn sig9(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.8e}")
    }
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let floats = [
            self.mean_return,
            self.std_return,
            self.kl,
            self.clip_frac,
            self.value_loss,
            self.entropy,
            self.lr,
            self.wall_clock_seconds,
        ];
        let mut out = format!("{},{}", self.iteration, self.env_steps);
        for f in floats {
            out.push(',');
            out.push_str(&sig9(f));
        }
        out
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return None;
        }
        let x = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            iteration: f[0].parse().ok()?,
            env_steps: f[1].parse().ok()?,
            mean_return: x(2)?,
            std_return: x(3)?,
            kl: x(4)?,
            clip_frac: x(5)?,
            value_loss: x(6)?,
            entropy: x(7)?,
            lr: x(8)?,
            wall_clock_seconds: x(9)?,
        })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Append-only CSV; every row is written with a single unbuffered write so
/// the file stays parseable if the process dies.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| io_err(path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| io_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Reopens `path` keeping the header and rows up to `iteration`.
    pub fn resume(path: &Path, iteration: usize) -> Result<Self> {
        let kept: Vec<MetricsRow> = if path.exists() {
            read_metrics(path)?
                .into_iter()
                .filter(|r| r.iteration <= iteration)
                .collect()
        } else {
            Vec::new()
        };
        let mut w = Self::create(path)?;
        for row in &kept {
            w.append(row)?;
        }
        w.file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        Ok(w)
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        let line = format!("{}\n", row.to_csv());
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| io_err(&self.path, e))
    }
}

/// Reads every complete row; a trailing partial line is ignored.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        _ => {
            return Err(HarnessError::Checkpoint(format!(
                "{} does not start with the metrics header",
                path.display()
            )))
        }
    }
    Ok(lines.filter_map(MetricsRow::from_csv).collect())
}
