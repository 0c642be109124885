//! Running an experiment end to end: one coordinator and `n_clients` client
//! sessions per seed over a chosen carrier, then evaluation and artifacts.

use std::path::Path;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::client::run_client;
use super::report::{
    write_eval_matrix_csv, write_json, write_rounds_csv, write_summary_csv, RoundReport, SummaryLine,
};
use super::server::{run_server, ServerOutcome, ServerPlan};
use super::setup::Experiment;
use super::OrchestratorError;
use crate::accounting::comm_report;
use crate::evaluation::{summarize, EvalMatrix};
use crate::params::ParameterSet;
use crate::trainer::{DataRef, Split, Trainer};
use crate::transport::{
    connect, loopback_pair, Direction, Hello, Link, MsgType, RecordingLink, SocketServer, TransportError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Carrier {
    Loopback,
    /// TCP over localhost within this process.
    Socket,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub carrier: Carrier,
    /// Keep the server-side transcript of every session.
    pub record: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            carrier: Carrier::Loopback,
            record: false,
        }
    }
}

/// Server-side frames of one session, in order.
pub type SessionTranscript = Vec<(Direction, Vec<u8>)>;

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub reports: Vec<RoundReport>,
    /// `None` for a client that dropped out of a tolerant run.
    pub final_models: Vec<Option<ParameterSet>>,
    pub matrix: EvalMatrix,
    pub aggregations: u32,
    pub init_broadcast_bytes: u64,
    pub final_collect_bytes: u64,
    pub round_wall: Vec<Duration>,
    pub wall: Duration,
    /// Indexed by client; empty unless recording was requested.
    pub transcripts: Vec<SessionTranscript>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub runs: Vec<SeedRun>,
    pub summary: SummaryLine,
}

fn plan(exp: &Experiment, seed: u64) -> ServerPlan {
    let c = &exp.config;
    ServerPlan {
        round: exp.round_config(seed),
        n_clients: c.n_clients,
        weighting: c.weighting,
        checkpoint_mode: c.best_checkpoint,
        tolerate_failure: c.tolerate_client_failure,
        timeout: exp.round_timeout(),
        init: exp.initial_model(seed),
    }
}

/// Evaluates model `i` on the test split of every client `j`. Missing
/// models yield NaN rows.
pub fn evaluate_models(models: &[Option<ParameterSet>], trainer: &dyn Trainer) -> Result<EvalMatrix, OrchestratorError> {
    let n = trainer.n_clients();
    let mut cells = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            cells.push(match models.get(i).and_then(Option::as_ref) {
                Some(m) => trainer.evaluate(m, DataRef::new(j, Split::Test))?,
                None => f64::NAN,
            });
        }
    }
    Ok(EvalMatrix::new(n, cells)?)
}

fn finish(
    exp: &Experiment,
    seed: u64,
    started: Instant,
    outcome: ServerOutcome,
    transcripts: Vec<SessionTranscript>,
) -> Result<SeedRun, OrchestratorError> {
    let matrix = evaluate_models(&outcome.final_models, exp.trainer.as_ref())?;
    Ok(SeedRun {
        seed,
        reports: outcome.reports,
        final_models: outcome.final_models,
        matrix,
        aggregations: outcome.aggregations,
        init_broadcast_bytes: outcome.init_broadcast_bytes,
        final_collect_bytes: outcome.final_collect_bytes,
        round_wall: outcome.round_wall,
        wall: started.elapsed(),
        transcripts,
    })
}

/// Orders recorded transcripts by the client index in their HELLO.
fn order_transcripts(recorded: Vec<crate::transport::Transcript>) -> Vec<SessionTranscript> {
    let mut out: Vec<(u32, SessionTranscript)> = recorded
        .into_iter()
        .map(|t| {
            let frames = std::mem::take(&mut *t.lock().unwrap());
            let index = frames
                .iter()
                .find(|(d, _)| *d == Direction::Received)
                .and_then(|(_, b)| crate::transport::decode(b).ok())
                .filter(|(m, _)| m.msg_type == MsgType::Hello)
                .and_then(|(m, _)| Hello::from_message(&m).ok())
                .map_or(u32::MAX, |h| h.client_index);
            (index, frames)
        })
        .collect();
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, t)| t).collect()
}

fn serve_links<L: Link>(
    exp: &Experiment,
    seed: u64,
    links: Vec<L>,
    record: bool,
) -> Result<(ServerOutcome, Vec<SessionTranscript>), OrchestratorError> {
    let plan = plan(exp, seed);
    if record {
        let wrapped: Vec<RecordingLink<L>> = links.into_iter().map(RecordingLink::new).collect();
        let handles = wrapped.iter().map(RecordingLink::transcript).collect();
        let outcome = run_server(wrapped, &exp.schema, &plan)?;
        Ok((outcome, order_transcripts(handles)))
    } else {
        Ok((run_server(links, &exp.schema, &plan)?, Vec::new()))
    }
}

/// Prefers the coordinator's error; a client error is reported only if the
/// coordinator itself succeeded.
fn settle<T>(
    server: Result<T, OrchestratorError>,
    clients: Vec<thread::Result<Result<super::client::ClientOutcome, OrchestratorError>>>,
) -> Result<T, OrchestratorError> {
    let value = server?;
    for c in clients {
        match c {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => return Err(e),
            Err(_) => return Err(OrchestratorError::Handshake("client thread panicked".into())),
        }
    }
    Ok(value)
}

/// One seed of the experiment with all clients in this process.
pub fn run_seed(exp: &Experiment, seed: u64, opts: RunOptions) -> Result<SeedRun, OrchestratorError> {
    let started = Instant::now();
    let n = exp.config.n_clients;
    let trainer = exp.trainer.as_ref();
    let tolerant = exp.config.tolerate_client_failure;
    let (outcome, transcripts) = match opts.carrier {
        Carrier::Loopback => {
            let (server_links, client_links): (Vec<_>, Vec<_>) = (0..n).map(|_| loopback_pair()).unzip();
            thread::scope(|s| {
                let handles: Vec<_> = client_links
                    .into_iter()
                    .enumerate()
                    .map(|(i, link)| s.spawn(move || run_client(link, i, trainer, None)))
                    .collect();
                let server = serve_links(exp, seed, server_links, opts.record);
                let clients = handles.into_iter().map(|h| h.join()).collect();
                if tolerant {
                    server
                } else {
                    settle(server, clients)
                }
            })?
        }
        Carrier::Socket => {
            let listener = SocketServer::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?.to_string();
            let timeout = exp.round_timeout();
            thread::scope(|s| {
                let handles: Vec<_> = (0..n)
                    .map(|i| {
                        let addr = addr.clone();
                        s.spawn(move || {
                            let link = connect(&addr, timeout).map_err(|source| OrchestratorError::Transport {
                                client: Some(i),
                                source,
                            })?;
                            run_client(link, i, trainer, None)
                        })
                    })
                    .collect();
                let accepted = listener.accept(n, timeout);
                // pending connections are reset rather than left waiting
                drop(listener);
                let server = accepted
                    .map_err(|source| OrchestratorError::Transport { client: None, source })
                    .and_then(|links| serve_links(exp, seed, links, opts.record));
                let clients = handles.into_iter().map(|h| h.join()).collect();
                if tolerant {
                    server
                } else {
                    settle(server, clients)
                }
            })?
        }
    };
    finish(exp, seed, started, outcome, transcripts)
}

/// Coordinator for clients in other processes: accepts `n_clients`
/// connections on `listener` for each seed in turn.
pub fn serve_seed(exp: &Experiment, seed: u64, listener: &SocketServer) -> Result<SeedRun, OrchestratorError> {
    let started = Instant::now();
    let links = listener
        .accept(exp.config.n_clients, exp.round_timeout())
        .map_err(|source| OrchestratorError::Transport { client: None, source })?;
    let (outcome, transcripts) = serve_links(exp, seed, links, false)?;
    finish(exp, seed, started, outcome, transcripts)
}

/// Client process counterpart of [`serve_seed`]: one session per configured seed.
pub fn run_remote_client(
    exp: &Experiment,
    addr: &str,
    index: usize,
    timeout: Duration,
) -> Result<Vec<ParameterSet>, OrchestratorError> {
    if index >= exp.config.n_clients {
        return Err(OrchestratorError::Config(format!(
            "client index {index} out of range for {} clients",
            exp.config.n_clients
        )));
    }
    let mut models = Vec::new();
    for _ in &exp.config.seeds {
        let link = connect(addr, timeout).map_err(|source| OrchestratorError::Transport {
            client: Some(index),
            source,
        })?;
        let out = run_client(link, index, exp.trainer.as_ref(), Some(timeout))?;
        models.push(out.final_model);
    }
    Ok(models)
}

pub fn summarize_runs(exp: &Experiment, runs: Vec<SeedRun>) -> Result<ExperimentOutput, OrchestratorError> {
    let matrices: Vec<EvalMatrix> = runs.iter().map(|r| r.matrix.clone()).collect();
    let stats = summarize(&matrices).ok_or_else(|| OrchestratorError::Config("no runs to summarize".into()))?;
    let first = runs.first().expect("summarize checked for runs");
    let upload = first.reports.last().map_or(0, |r| r.cumulative) / exp.config.n_clients as u64;
    let summary = SummaryLine {
        strategy: exp.config.strategy,
        seeds: runs.iter().map(|r| r.seed).collect(),
        stats,
        upload_per_client: upload,
        aggregations: first.aggregations,
    };
    Ok(ExperimentOutput { runs, summary })
}

/// Runs every configured seed.
pub fn run_experiment(exp: &Experiment, opts: RunOptions) -> Result<ExperimentOutput, OrchestratorError> {
    let runs = exp
        .config
        .seeds
        .iter()
        .map(|&seed| {
            log::info!("seed {seed}: {} rounds of {}", exp.config.rounds, exp.config.strategy);
            run_seed(exp, seed, opts)
        })
        .collect::<Result<Vec<_>, _>>()?;
    summarize_runs(exp, runs)
}

#[derive(Serialize)]
struct SeedMetadata {
    seed: u64,
    wall_secs: f64,
    round_wall_secs: Vec<f64>,
    aggregations: u32,
    init_broadcast_bytes: u64,
    final_collect_bytes: u64,
}

#[derive(Serialize)]
struct Metadata<'a> {
    tool_version: &'static str,
    written_at_unix: u64,
    carrier: &'a str,
    schema: &'a str,
    seeds: Vec<SeedMetadata>,
}

/// Writes `seed_<s>/rounds.csv`, `seed_<s>/eval_matrix.csv`, `summary.csv`
/// and the `metadata.json` sidecar.
pub fn write_artifacts(
    out_dir: &Path,
    exp: &Experiment,
    output: &ExperimentOutput,
    carrier: &str,
) -> Result<(), OrchestratorError> {
    for run in &output.runs {
        let dir = out_dir.join(format!("seed_{}", run.seed));
        write_rounds_csv(&dir.join("rounds.csv"), &run.reports)?;
        write_eval_matrix_csv(&dir.join("eval_matrix.csv"), &run.matrix)?;
    }
    let saved = comm_report(&exp.schema, exp.config.strategy.components).saved_pct_centi;
    write_summary_csv(&out_dir.join("summary.csv"), std::slice::from_ref(&output.summary), saved)?;
    let meta = Metadata {
        tool_version: env!("CARGO_PKG_VERSION"),
        written_at_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        carrier,
        schema: exp.schema.name(),
        seeds: output
            .runs
            .iter()
            .map(|r| SeedMetadata {
                seed: r.seed,
                wall_secs: r.wall.as_secs_f64(),
                round_wall_secs: r.round_wall.iter().map(Duration::as_secs_f64).collect(),
                aggregations: r.aggregations,
                init_broadcast_bytes: r.init_broadcast_bytes,
                final_collect_bytes: r.final_collect_bytes,
            })
            .collect(),
    };
    write_json(&out_dir.join("metadata.json"), &meta)
}

impl From<TransportError> for OrchestratorError {
    fn from(source: TransportError) -> Self {
        OrchestratorError::Transport { client: None, source }
    }
}

impl From<std::io::Error> for OrchestratorError {
    fn from(e: std::io::Error) -> Self {
        TransportError::Io(e).into()
    }
}
