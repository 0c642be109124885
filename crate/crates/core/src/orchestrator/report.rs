//! Round reports and the CSV artifacts written for a run. Wall-clock times
//! only ever go to `metadata.json`, so the CSVs are reproducible byte for byte.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::OrchestratorError;
use crate::accounting::format_pct_centi;
use crate::evaluation::{EvalMatrix, SummaryRow};
use crate::strategy::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientStatus {
    Ok,
    /// Reported a local failure; kept its pre-round model.
    Failed,
    /// Disconnected or timed out; excluded from the rest of the run.
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClientRoundStats {
    pub status: ClientStatus,
    /// Validation metric of the model the client started the round with.
    pub pre_val: Option<f64>,
    /// Validation metric of the checkpoint it uploaded.
    pub best_val: Option<f64>,
    /// 0-based local epoch of that checkpoint.
    pub best_epoch: Option<u32>,
}

impl ClientRoundStats {
    pub fn failed() -> Self {
        Self {
            status: ClientStatus::Failed,
            pre_val: None,
            best_val: None,
            best_epoch: None,
        }
    }

    pub fn dropped() -> Self {
        Self {
            status: ClientStatus::Dropped,
            ..Self::failed()
        }
    }
}

/// Scalar counts are summed over clients; byte counts are measured on the wire.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    /// Scalars uploaded this round (tensor payload bytes / 4).
    pub transmitted: u64,
    pub cumulative: u64,
    /// Scalars broadcast this round.
    pub down_transmitted: u64,
    pub cumulative_down: u64,
    pub up_wire_bytes: u64,
    pub up_data_bytes: u64,
    pub down_wire_bytes: u64,
    /// Per-client saving against full aggregation.
    pub saved_per_client: u64,
    pub saved_pct_centi: u64,
    pub aggregated: bool,
    pub clients: Vec<ClientRoundStats>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> OrchestratorError + '_ {
    move |e| OrchestratorError::Io {
        path: path.display().to_string(),
        source: e.into(),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), OrchestratorError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(path))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn rounds_csv_header(n_clients: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "round",
        "transmitted",
        "cumulative",
        "down_transmitted",
        "cumulative_down",
        "up_wire_bytes",
        "up_data_bytes",
        "down_wire_bytes",
        "saved_per_client",
        "saved_pct",
        "aggregated",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for c in 0..n_clients {
        for col in ["status", "pre_val", "best_val", "best_epoch"] {
            h.push(format!("client{c}_{col}"));
        }
    }
    h
}

pub fn write_rounds_csv(path: &Path, reports: &[RoundReport]) -> Result<(), OrchestratorError> {
    let n = reports.first().map_or(0, |r| r.clients.len());
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![
                r.round.to_string(),
                r.transmitted.to_string(),
                r.cumulative.to_string(),
                r.down_transmitted.to_string(),
                r.cumulative_down.to_string(),
                r.up_wire_bytes.to_string(),
                r.up_data_bytes.to_string(),
                r.down_wire_bytes.to_string(),
                r.saved_per_client.to_string(),
                format_pct_centi(r.saved_pct_centi).trim_end_matches('%').to_string(),
                r.aggregated.to_string(),
            ];
            for c in &r.clients {
                let status = match c.status {
                    ClientStatus::Ok => "ok",
                    ClientStatus::Failed => "failed",
                    ClientStatus::Dropped => "dropped",
                };
                row.extend([status.to_string(), opt(c.pre_val), opt(c.best_val), opt(c.best_epoch)]);
            }
            row
        })
        .collect();
    write_rows(path, &rounds_csv_header(n), &rows)
}

/// Rows are models (trained by client i), columns are test splits.
pub fn write_eval_matrix_csv(path: &Path, m: &EvalMatrix) -> Result<(), OrchestratorError> {
    let n = m.size();
    let mut header = vec!["model".to_string()];
    header.extend((0..n).map(|j| format!("test_client{j}")));
    let rows: Vec<Vec<String>> = (0..n)
        .map(|i| {
            let mut row = vec![format!("client{i}")];
            row.extend(m.row(i).iter().map(f64::to_string));
            row
        })
        .collect();
    write_rows(path, &header, &rows)
}

/// One row per run: strategy plus ID/CD statistics and communication totals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryLine {
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub stats: SummaryRow,
    /// Cumulative upload scalars of one seed, per client.
    pub upload_per_client: u64,
    pub aggregations: u32,
}

pub const SUMMARY_HEADER: [&str; 12] = [
    "strategy",
    "components",
    "rule",
    "seeds",
    "n_values",
    "map50_id_mean",
    "map50_id_std",
    "map50_cd_mean",
    "map50_cd_std",
    "upload_per_client",
    "aggregations_per_run",
    "saved_pct",
];

pub fn write_summary_csv(path: &Path, lines: &[SummaryLine], saved_pct_centi: u64) -> Result<(), OrchestratorError> {
    let header: Vec<String> = SUMMARY_HEADER.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = lines
        .iter()
        .map(|l| {
            vec![
                l.strategy.to_string(),
                l.strategy.mask_name().to_string(),
                l.strategy.rule.as_str().to_string(),
                l.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
                l.stats.n_values.to_string(),
                l.stats.id_mean.to_string(),
                l.stats.id_std.to_string(),
                opt(l.stats.cd_mean),
                opt(l.stats.cd_std),
                l.upload_per_client.to_string(),
                l.aggregations.to_string(),
                format_pct_centi(saved_pct_centi).trim_end_matches('%').to_string(),
            ]
        })
        .collect();
    write_rows(path, &header, &rows)
}

/// A row of the results table: strategy, ID and CD as `mean ± std`.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub strategy: String,
    pub map50_id: String,
    pub map50_cd: String,
}

fn pm(mean: &str, std: &str) -> Result<String, String> {
    if mean.is_empty() {
        return Ok("n/a".into());
    }
    let m: f64 = mean.parse().map_err(|e| format!("`{mean}`: {e}"))?;
    let s: f64 = std.parse().map_err(|e| format!("`{std}`: {e}"))?;
    Ok(format!("{m:.4} ± {s:.4}"))
}

/// Reads `summary.csv` files back into table rows.
pub fn read_summary_rows(path: &Path) -> Result<Vec<TableRow>, OrchestratorError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let headers = r.headers().map_err(csv_err(path))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| OrchestratorError::Config(format!(
            "{}: missing column `{name}`",
            path.display()
        )))
    };
    let (s, im, is, cm, cs) = (
        col("strategy")?,
        col("map50_id_mean")?,
        col("map50_id_std")?,
        col("map50_cd_mean")?,
        col("map50_cd_std")?,
    );
    let bad = |e: String| OrchestratorError::Config(format!("{}: {e}", path.display()));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        out.push(TableRow {
            strategy: rec[s].to_string(),
            map50_id: pm(&rec[im], &rec[is]).map_err(bad)?,
            map50_cd: pm(&rec[cm], &rec[cs]).map_err(bad)?,
        });
    }
    Ok(out)
}

pub fn write_table_csv(path: &Path, rows: &[TableRow]) -> Result<(), OrchestratorError> {
    let header = vec!["strategy".to_string(), "mAP50_ID".to_string(), "mAP50_CD".to_string()];
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.strategy.clone(), r.map50_id.clone(), r.map50_cd.clone()])
        .collect();
    write_rows(path, &header, &rows)
}

/// Long-format per-round validation series (`seed, round, client, pre_val, best_val`)
/// gathered from `seed_*/rounds.csv` under an artifact directory.
pub fn write_round_series_csv(artifacts: &Path, out: &Path) -> Result<usize, OrchestratorError> {
    let mut seed_dirs: Vec<(u64, PathBuf)> = std::fs::read_dir(artifacts)
        .map_err(io_err(artifacts))?
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            let seed = name.strip_prefix("seed_")?.parse().ok()?;
            Some((seed, e.path()))
        })
        .collect();
    seed_dirs.sort();
    let mut rows = Vec::new();
    for (seed, dir) in seed_dirs {
        let path = dir.join("rounds.csv");
        let mut r = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
        let headers = r.headers().map_err(csv_err(&path))?.clone();
        let n_clients = headers.iter().filter(|h| h.ends_with("_best_val")).count();
        for rec in r.records() {
            let rec = rec.map_err(csv_err(&path))?;
            let get = |name: &str| headers.iter().position(|h| h == name).map(|i| rec[i].to_string());
            for c in 0..n_clients {
                rows.push(vec![
                    seed.to_string(),
                    get("round").unwrap_or_default(),
                    c.to_string(),
                    get(&format!("client{c}_pre_val")).unwrap_or_default(),
                    get(&format!("client{c}_best_val")).unwrap_or_default(),
                ]);
            }
        }
    }
    let header: Vec<String> = ["seed", "round", "client", "pre_val", "best_val"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_rows(out, &header, &rows)?;
    Ok(rows.len())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OrchestratorError> {
    let text = serde_json::to_string_pretty(value).expect("metadata serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}
