use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::densela::StateVector;
use crate::error::{Error, Result};

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub problem: String,
    pub n: usize,
    pub generator: String,
    /// Agreement tolerance between refinement levels (0 for exact solutions).
    pub tolerance: f64,
    /// Deepest halving level used on any interval.
    pub refinement_depth: u32,
    pub uniform: bool,
}

/// Ordered `(t, y)` samples; consecutive pairs are the training segments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub provenance: Provenance,
}

fn sidecar_path(csv: &Path) -> PathBuf {
    let mut name = csv.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    csv.with_file_name(name)
}

impl TrajectoryDataset {
    pub fn new(times: Vec<f64>, states: Vec<StateVector>, provenance: Provenance) -> Result<Self> {
        let ds = TrajectoryDataset {
            times,
            states,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.dim())
    }

    pub fn segments(&self) -> usize {
        self.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n < 2 {
            return Err(Error::InvalidConfig(format!(
                "dataset needs at least 2 points, has {n}"
            )));
        }
        if self.states.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} times but {} states",
                self.states.len()
            )));
        }
        let d = self.dim();
        if d == 0 || self.states.iter().any(|s| s.dim() != d) {
            return Err(Error::ShapeMismatch("states have inconsistent dimension".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidConfig("times must be strictly increasing".into()));
        }
        if self.times.iter().any(|t| !t.is_finite()) || self.states.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("dataset".into()));
        }
        if self.provenance.uniform && !self.is_uniform(1e-12) {
            return Err(Error::InvalidConfig(
                "dataset flagged uniform but spacing varies".into(),
            ));
        }
        Ok(())
    }

    /// Maximum relative deviation of the spacing from its mean is below `tol`,
    /// allowing for the rounding of each grid point.
    pub fn is_uniform(&self, tol: f64) -> bool {
        let n = self.times.len();
        let mean = (self.times[n - 1] - self.times[0]) / (n - 1) as f64;
        let scale = self.times[0].abs().max(self.times[n - 1].abs());
        let slack = tol * mean.abs() + 4.0 * f64::EPSILON * scale;
        self.times.windows(2).all(|w| ((w[1] - w[0]) - mean).abs() <= slack)
    }

    pub fn to_csv_string(&self) -> String {
        let d = self.dim();
        let mut out = String::from("t");
        for i in 0..d {
            out.push_str(&format!(",y{i}"));
        }
        out.push('\n');
        for (t, y) in self.times.iter().zip(&self.states) {
            out.push_str(&format!("{t:.16e}"));
            for v in y.as_slice() {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV body; provenance is taken from `provenance` or
    /// defaulted from the data.
    pub fn from_csv_str(text: &str, provenance: Option<Provenance>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("dataset file is empty".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 2 || cols[0] != "t" || cols[1..].iter().enumerate().any(|(i, c)| *c != format!("y{i}")) {
            return Err(Error::Parse(format!("bad dataset header '{header}'")));
        }
        let d = cols.len() - 1;
        let mut times = Vec::new();
        let mut states = Vec::new();
        for (row, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("row {}: bad number '{}'", row + 1, s.trim())))
                })
                .collect::<Result<_>>()?;
            if vals.len() != d + 1 {
                return Err(Error::Parse(format!(
                    "row {}: expected {} columns, found {}",
                    row + 1,
                    d + 1,
                    vals.len()
                )));
            }
            times.push(vals[0]);
            states.push(StateVector(vals[1..].to_vec()));
        }
        if times.is_empty() {
            return Err(Error::Parse("dataset has a header but no rows".into()));
        }
        let n = times.len();
        let provenance = provenance.unwrap_or_else(|| Provenance {
            problem: "unknown".into(),
            n,
            generator: "external".into(),
            tolerance: 0.0,
            refinement_depth: 0,
            uniform: false,
        });
        let mut ds = TrajectoryDataset {
            times,
            states,
            provenance,
        };
        if n >= 2 && !ds.provenance.uniform {
            ds.provenance.uniform = ds.is_uniform(1e-12);
        }
        ds.validate().map_err(|e| Error::Parse(e.to_string()))?;
        Ok(ds)
    }

    /// Writes `path` (CSV) and its `.meta.json` sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        let meta = serde_json::to_string_pretty(&self.provenance)?;
        fs::write(sidecar_path(path), meta + "\n")?;
        Ok(())
    }

    /// Reads a CSV file and, when present, its sidecar.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let side = sidecar_path(path);
        let provenance = if side.exists() {
            Some(serde_json::from_str(&fs::read_to_string(side)?)?)
        } else {
            None
        };
        Self::from_csv_str(&text, provenance)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        sidecar_path(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrajectoryDataset {
        TrajectoryDataset::new(
            vec![0.0, 0.5, 1.0],
            vec![
                StateVector::new(vec![1.0, 2.0]),
                StateVector::new(vec![0.1 + 0.2, -1e-300]),
                StateVector::new(vec![std::f64::consts::PI, 6.02e23]),
            ],
            Provenance {
                problem: "toy".into(),
                n: 3,
                generator: "hand".into(),
                tolerance: 0.0,
                refinement_depth: 0,
                uniform: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let ds = sample();
        let text = ds.to_csv_string();
        assert!(text.starts_with("t,y0,y1\n"));
        let back = TrajectoryDataset::from_csv_str(&text, Some(ds.provenance.clone())).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn file_roundtrip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        let ds = sample();
        ds.write(&path).unwrap();
        assert!(dir.path().join("toy.meta.json").exists());
        assert_eq!(TrajectoryDataset::read(&path).unwrap(), ds);
    }

    #[test]
    fn malformed_inputs_rejected() {
        assert!(TrajectoryDataset::from_csv_str("", None).is_err());
        assert!(TrajectoryDataset::from_csv_str("t,y0\n", None).is_err());
        assert!(TrajectoryDataset::from_csv_str("t,y0\n0,1\n", None).is_err());
        assert!(TrajectoryDataset::from_csv_str("t,y0\n0,1\n1,x\n", None).is_err());
        assert!(TrajectoryDataset::from_csv_str("t,y0\n0,1\n0,2\n", None).is_err());
        assert!(TrajectoryDataset::from_csv_str("time,y0\n0,1\n1,2\n", None).is_err());
        assert!(TrajectoryDataset::from_csv_str("t,y0\n0,1,3\n1,2\n", None).is_err());
    }

    #[test]
    fn uniform_flag_checked() {
        let mut ds = sample();
        ds.times[1] = 0.4;
        assert!(ds.validate().is_err());
        ds.provenance.uniform = false;
        assert!(ds.validate().is_ok());
    }
}
