//! Wide-format time series CSV: a `time` column (seconds) followed by one
//! column per entity. Rows cover one period `[0, T)` with uniform spacing;
//! the closing row at `t = T` is implied by periodicity and must not appear.

use std::path::Path;

use crate::dae::TimeGrid;
use crate::error::{Error, Result};

const SPACING_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub grid: TimeGrid,
    pub columns: Vec<String>,
    /// `values[c][n]`: column `c` at time index `n`.
    pub values: Vec<Vec<f64>>,
}

impl SeriesTable {
    pub fn new(grid: TimeGrid, columns: Vec<String>, values: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(columns.len(), values.len());
        debug_assert!(values.iter().all(|v| v.len() == grid.steps));
        SeriesTable {
            grid,
            columns,
            values,
        }
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .position(|c| c == name)
            .map(|i| self.values[i].as_slice())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let malformed = |message: String| Error::MalformedFile {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| match e.kind() {
                csv::ErrorKind::Io(_) => match e.into_kind() {
                    csv::ErrorKind::Io(io) => Error::io(path, io),
                    _ => unreachable!(),
                },
                _ => malformed(e.to_string()),
            })?;
        let headers = reader
            .headers()
            .map_err(|e| malformed(e.to_string()))?
            .clone();
        if headers.get(0) != Some("time") {
            return Err(Error::SchemaViolation {
                path: path.to_path_buf(),
                message: "first column must be `time`".into(),
            });
        }
        let columns: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
        let mut times = Vec::new();
        let mut values = vec![Vec::new(); columns.len()];
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| malformed(e.to_string()))?;
            let parse = |i: usize| -> Result<f64> {
                let field = record.get(i).unwrap_or("");
                field.parse::<f64>().map_err(|_| {
                    malformed(format!(
                        "row {}: cannot parse `{field}` as a number",
                        line + 2
                    ))
                })
            };
            times.push(parse(0)?);
            for (c, col) in values.iter_mut().enumerate() {
                col.push(parse(c + 1)?);
            }
        }
        if times.len() < 2 {
            return Err(malformed("need at least two rows".into()));
        }
        let dt = times[1] - times[0];
        if !(dt > 0.0) {
            return Err(malformed("time must increase".into()));
        }
        for (n, w) in times.windows(2).enumerate() {
            if ((w[1] - w[0]) - dt).abs() > SPACING_RTOL * dt.max(w[1].abs()) {
                return Err(malformed(format!(
                    "non-uniform time spacing at row {}",
                    n + 3
                )));
            }
        }
        let grid = TimeGrid::new(dt * times.len() as f64, times.len())
            .map_err(|e| malformed(e.to_string()))?;
        Ok(SeriesTable {
            grid,
            columns,
            values,
        })
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("time");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for n in 0..self.grid.steps {
            out.push_str(&format!("{}", self.grid.time(n)));
            for col in &self.values {
                out.push(',');
                out.push_str(&format!("{}", col[n]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Resamples every column onto `steps` points of the same period.
    pub fn resample(&self, steps: usize) -> Result<SeriesTable> {
        let grid = TimeGrid::new(self.grid.horizon, steps)?;
        let values = self
            .values
            .iter()
            .map(|v| resample_periodic(v, steps))
            .collect();
        Ok(SeriesTable {
            grid,
            columns: self.columns.clone(),
            values,
        })
    }
}

/// Linear interpolation of a periodic series sampled at `n` uniform points
/// onto `steps` uniform points of the same period.
pub fn resample_periodic(values: &[f64], steps: usize) -> Vec<f64> {
    let n = values.len();
    if n == steps {
        return values.to_vec();
    }
    (0..steps)
        .map(|m| {
            let pos = m as f64 * n as f64 / steps as f64;
            let i = pos.floor() as usize % n;
            let frac = pos - pos.floor();
            let j = (i + 1) % n;
            values[i] * (1.0 - frac) + values[j] * frac
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let grid = TimeGrid::new(4.0 * 3600.0, 4).unwrap();
        let t = SeriesTable::new(
            grid,
            vec!["a".into(), "b".into()],
            vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.1, -0.2, 1e-17, 5.5]],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        t.write(&path).unwrap();
        let back = SeriesTable::read(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn non_uniform_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "time,a\n0,1\n10,2\n25,3\n30,4\n").unwrap();
        assert!(matches!(
            SeriesTable::read(&path),
            Err(Error::MalformedFile { .. })
        ));
        std::fs::write(&path, "t,a\n0,1\n").unwrap();
        assert!(matches!(
            SeriesTable::read(&path),
            Err(Error::SchemaViolation { .. })
        ));
    }

    #[test]
    fn periodic_resampling() {
        let v = [0.0, 1.0, 2.0, 1.0];
        assert_eq!(
            resample_periodic(&v, 8),
            vec![0.0, 0.5, 1.0, 1.5, 2.0, 1.5, 1.0, 0.5]
        );
        assert_eq!(resample_periodic(&v, 2), vec![0.0, 2.0]);
    }
}
