use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const METRICS_HEADER: &str = "iteration,lr,L_GAN_D,L_GAN_G,L_pixel,L_identity,L_G,wall_ms";

/// One training iteration. `pixel` is `None` on iterations without the pixel
/// term; `wall_ms` is `None` when wall-clock recording is off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub lr: f64,
    pub gan_d: f64,
    pub gan_g: f64,
    pub pixel: Option<f64>,
    pub identity: f64,
    pub total: f64,
    pub wall_ms: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{},{:e},{:e},{}",
            self.iteration,
            self.lr,
            self.gan_d,
            self.gan_g,
            opt(self.pixel),
            self.identity,
            self.total,
            self.wall_ms.map(|x| format!("{x:.3}")).unwrap_or_default()
        )
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 8 {
            return None;
        }
        let num = |s: &str| s.parse::<f64>().ok();
        let optnum = |s: &str| if s.is_empty() { Some(None) } else { num(s).map(Some) };
        Some(MetricsRow {
            iteration: f[0].parse().ok()?,
            lr: num(f[1])?,
            gan_d: num(f[2])?,
            gan_g: num(f[3])?,
            pixel: optnum(f[4])?,
            identity: num(f[5])?,
            total: num(f[6])?,
            wall_ms: optnum(f[7])?,
        })
    }
}

/// Appending CSV writer; resuming a run keeps the rows already written up to
/// the checkpoint and drops any later ones.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { out })
    }

    /// Reopens `path`, keeping rows with `iteration < resume_from`.
    pub fn resume(path: &Path, resume_from: u64) -> std::io::Result<Self> {
        let kept: Vec<MetricsRow> = if path.exists() {
            read_metrics(path)?.into_iter().filter(|r| r.iteration < resume_from).collect()
        } else {
            Vec::new()
        };
        let mut w = Self::create(path)?;
        for r in &kept {
            w.write(r)?;
        }
        Ok(w)
    }

    pub fn write(&mut self, row: &MetricsRow) -> std::io::Result<()> {
        writeln!(self.out, "{}", row.to_csv())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if i == 0 || line.is_empty() {
            continue;
        }
        let row = MetricsRow::from_csv(&line).ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: bad metrics row", path.display(), i + 1))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let a = MetricsRow {
            iteration: 5,
            lr: 1e-4,
            gan_d: 0.25,
            gan_g: 0.5,
            pixel: Some(0.125),
            identity: 1.0 / 3.0,
            total: 12.0,
            wall_ms: None,
        };
        assert_eq!(MetricsRow::from_csv(&a.to_csv()), Some(a));
        let b = MetricsRow { pixel: None, ..a };
        assert_eq!(MetricsRow::from_csv(&b.to_csv()), Some(b));
        assert_eq!(METRICS_HEADER.split(',').count(), 8);
    }
}
