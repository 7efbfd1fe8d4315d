//! Region-to-region latency and bandwidth.

use std::path::Path;

use thiserror::Error;

/// Bandwidth above which an entry is reported as suspicious.
pub const NOMINAL_BANDWIDTH_CAP_MBPS: f64 = 750.0;

const AWS14: &str = include_str!("../../data/aws14.csv");

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("unknown region {0:?}")]
    UnknownRegion(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyMatrix {
    regions: Vec<String>,
    latency_ms: Vec<Vec<f64>>,
    bandwidth_mbps: Vec<Vec<f64>>,
}

impl LatencyMatrix {
    /// Fourteen-region wide-area measurements bundled with the crate.
    pub fn aws14() -> Self {
        Self::parse_csv(AWS14).expect("bundled matrix parses")
    }

    /// `regions` regions at `latency_ms` from each other, with unbounded
    /// bandwidth.
    pub fn uniform(regions: usize, latency_ms: f64) -> Self {
        let names = (0..regions).map(|i| format!("r{i}")).collect();
        let lat = (0..regions)
            .map(|i| (0..regions).map(|j| if i == j { 0.0 } else { latency_ms }).collect())
            .collect();
        LatencyMatrix { regions: names, latency_ms: lat, bandwidth_mbps: vec![vec![f64::INFINITY; regions]; regions] }
    }

    pub fn load(path: &Path) -> Result<Self, MatrixError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| MatrixError::Io { path: path.display().to_string(), source })?;
        Self::parse_csv(&text)
    }

    /// First row and column hold region names; each cell is
    /// `latency_ms/bandwidth_mbps`.
    pub fn parse_csv(text: &str) -> Result<Self, MatrixError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
        let regions: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
        let k = regions.len();
        let mut latency_ms = Vec::with_capacity(k);
        let mut bandwidth_mbps = Vec::with_capacity(k);
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let err = |msg: String| MatrixError::Parse { row: row + 1, msg };
            if rec.len() != k + 1 {
                return Err(err(format!("expected {} cells, found {}", k + 1, rec.len())));
            }
            if &rec[0] != regions.get(row).map(String::as_str).unwrap_or("") {
                return Err(err(format!("row name {:?} does not match column order", &rec[0])));
            }
            let (mut lat, mut bw) = (Vec::with_capacity(k), Vec::with_capacity(k));
            for (col, cell) in rec.iter().skip(1).enumerate() {
                let (l, b) = cell.split_once('/').ok_or_else(|| err(format!("cell {cell:?} is not lat/bw")))?;
                let l: f64 = l.trim().parse().map_err(|e| err(format!("latency {l:?}: {e}")))?;
                let b: f64 = b.trim().parse().map_err(|e| err(format!("bandwidth {b:?}: {e}")))?;
                if !(l >= 0.0) || !(b > 0.0) {
                    return Err(err(format!("cell {cell:?} must have latency >= 0 and bandwidth > 0")));
                }
                if row == col && l != 0.0 {
                    return Err(err("diagonal latency must be 0".into()));
                }
                if row != col && b > NOMINAL_BANDWIDTH_CAP_MBPS {
                    log::debug!("{} -> {}: bandwidth {b} Mbps exceeds nominal {NOMINAL_BANDWIDTH_CAP_MBPS}", regions[row], regions[col]);
                }
                lat.push(l);
                bw.push(b);
            }
            latency_ms.push(lat);
            bandwidth_mbps.push(bw);
        }
        if latency_ms.len() != k {
            return Err(MatrixError::Parse { row: latency_ms.len(), msg: format!("expected {k} rows") });
        }
        Ok(LatencyMatrix { regions, latency_ms, bandwidth_mbps })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn region_index(&self, name: &str) -> Result<usize, MatrixError> {
        self.regions
            .iter()
            .position(|r| r.eq_ignore_ascii_case(name))
            .ok_or_else(|| MatrixError::UnknownRegion(name.to_string()))
    }

    pub fn latency_ms(&self, a: usize, b: usize) -> f64 {
        self.latency_ms[a][b]
    }

    pub fn bandwidth_mbps(&self, a: usize, b: usize) -> f64 {
        self.bandwidth_mbps[a][b]
    }

    /// Off-diagonal entries above the nominal bandwidth cap.
    pub fn bandwidth_warnings(&self) -> Vec<(usize, usize, f64)> {
        let mut out = vec![];
        for a in 0..self.len() {
            for b in 0..self.len() {
                if a != b && self.bandwidth_mbps[a][b] > NOMINAL_BANDWIDTH_CAP_MBPS {
                    out.push((a, b, self.bandwidth_mbps[a][b]));
                }
            }
        }
        out
    }
}
