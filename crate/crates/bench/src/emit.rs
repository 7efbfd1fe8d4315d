//! Report files: one CSV row per run, per-block JSON lines, gnuplot columns.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use rbbc::world::RunLog;

use crate::report::MetricsReport;

#[derive(Debug, Error)]
pub enum EmitError {
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("writing {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("encoding json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmitError + '_ {
    move |source| EmitError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Num(f64),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Num(x) => format!("{x}"),
        }
    }
}

fn opt(x: Option<f64>) -> Cell {
    x.map_or(Cell::Text(String::new()), Cell::Num)
}

/// Flattened report columns, in output order.
pub fn columns(r: &MetricsReport) -> Vec<(&'static str, Cell)> {
    use Cell::{Num, Text};
    let tx = r.tx_latency_ms;
    vec![
        ("run", Text(r.seed.to_string())),
        ("protocol", Text(r.protocol.to_string())),
        ("n", Num(r.n as f64)),
        ("t", Num(r.t as f64)),
        ("beta", Num(r.beta as f64)),
        ("proposers", Num(r.proposers as f64)),
        ("adversary", Text(r.adversary.to_string())),
        ("outcome", Text(format!("{:?}", r.outcome).to_lowercase())),
        ("safe", Text(r.safe.to_string())),
        ("height", Num(r.height as f64)),
        ("blocks", Num(r.blocks as f64)),
        ("window_ms", Num(r.window_ms)),
        ("valid_tx_per_sec", Num(r.valid_tx_per_sec)),
        ("reads_per_sec", Num(r.reads_per_sec)),
        ("rw_ratio", opt(r.rw_ratio)),
        ("latency_ms", Num(r.inter_block_ms)),
        ("round_latency_ms", Num(r.round_latency_ms.mean)),
        ("round_latency_p99_ms", Num(r.round_latency_ms.p99)),
        ("tx_latency_ms", opt(tx.map(|s| s.mean))),
        ("tx_latency_p99_ms", opt(tx.map(|s| s.p99))),
        ("valid_tx_per_block", Num(r.valid_tx_per_block)),
        ("invalid_tx_per_block", Num(r.invalid_tx_per_block)),
        ("proposals_per_block", Num(r.proposals_per_block)),
        ("verifications_mean", Num(r.verification.mean)),
        ("verifications_min", Num(r.verification.min as f64)),
        ("verifications_max", Num(r.verification.max as f64)),
        ("bytes_per_instance", Num(r.bytes_per_instance)),
        ("rb_bytes_per_instance", Num(r.rb_bytes_per_instance)),
        ("bin_bytes_per_instance", Num(r.bin_bytes_per_instance)),
        ("attest_bytes_per_instance", Num(r.attest_bytes_per_instance)),
        ("cons1_bytes_per_instance", Num(r.cons1_bytes_per_instance)),
        ("consensus_hops", Num(r.consensus_hops.1 as f64)),
        ("commit_hops", Num(r.commit_hops.1 as f64)),
        ("egress_max", Num(r.egress_max as f64)),
        ("egress_median", Num(r.egress_median)),
        ("leader_egress_ratio", opt(r.leader_egress_ratio)),
        ("max_bin_round", Num(r.max_bin_round as f64)),
    ]
}

/// Mean and sample standard deviation of every numeric column. Text
/// columns keep their value when all runs agree.
pub fn aggregate(rows: &[Vec<(&'static str, Cell)>]) -> [Vec<(&'static str, Cell)>; 2] {
    let mut mean = Vec::new();
    let mut stdev = Vec::new();
    for (i, (name, _)) in rows[0].iter().enumerate() {
        let nums: Option<Vec<f64>> = rows
            .iter()
            .map(|r| match &r[i].1 {
                Cell::Num(x) => Some(*x),
                Cell::Text(_) => None,
            })
            .collect();
        match nums {
            Some(v) if *name != "run" => {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 } else { 0.0 };
                mean.push((*name, Cell::Num(m)));
                stdev.push((*name, Cell::Num(var.sqrt())));
            }
            _ => {
                let first = rows[0][i].1.render();
                let same = rows.iter().all(|r| r[i].1.render() == first);
                let text = if same { first } else { "*".to_string() };
                mean.push((*name, Cell::Text(text.clone())));
                stdev.push((*name, Cell::Text(text)));
            }
        }
    }
    mean[0].1 = Cell::Text("mean".into());
    stdev[0].1 = Cell::Text("stdev".into());
    [mean, stdev]
}

/// One row per report, plus mean and stdev rows when there are several.
pub fn write_csv(path: &Path, reports: &[MetricsReport]) -> Result<(), EmitError> {
    let csv_err = |source| EmitError::Csv { path: path.display().to_string(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut rows: Vec<_> = reports.iter().map(columns).collect();
    if let Some(first) = rows.first() {
        w.write_record(first.iter().map(|(name, _)| *name)).map_err(csv_err)?;
    }
    if rows.len() > 1 {
        let agg = aggregate(&rows);
        rows.extend(agg);
    }
    for row in &rows {
        w.write_record(row.iter().map(|(_, c)| c.render())).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// The reference node's block records, one JSON object per line.
pub fn write_blocks_jsonl(path: &Path, log: &RunLog) -> Result<(), EmitError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for b in &log.reference().log.blocks {
        serde_json::to_writer(&mut w, b)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Whitespace-separated per-block columns for gnuplot.
pub fn write_dat(path: &Path, log: &RunLog) -> Result<(), EmitError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut out = String::from("# block committed_ms round_latency_ms valid_txs invalid_txs proposals commit_hop\n");
    for b in &log.reference().log.blocks {
        out.push_str(&format!(
            "{} {:.3} {:.3} {} {} {} {}\n",
            b.index,
            b.committed_at_us as f64 / 1e3,
            (b.committed_at_us - b.started_at_us) as f64 / 1e3,
            b.valid_txs,
            b.invalid_txs,
            b.proposals_included,
            b.commit_hop
        ));
    }
    w.write_all(out.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn write_runlog(path: &Path, log: &RunLog) -> Result<(), EmitError> {
    let w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    serde_json::to_writer(w, log)?;
    Ok(())
}

pub fn read_runlog(path: &Path) -> Result<RunLog, EmitError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}
