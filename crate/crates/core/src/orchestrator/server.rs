//! Coordinator side of a run: handshake, per-round barrier over client
//! UPDATEs, aggregation, GLOBAL broadcast and final model collection.

use std::time::{Duration, Instant};

use super::config::{CheckpointMode, Weighting};
use super::report::{ClientRoundStats, ClientStatus, RoundReport};
use super::OrchestratorError;
use crate::accounting::comm_report;
use crate::aggregation::{aggregate, ClientUpdate};
use crate::params::{MaskedParams, ParameterSet, SCALAR_BYTES};
use crate::schema::{ComponentMask, ModelSchema};
use crate::transport::payload::{data_bytes, done_message};
use crate::transport::{
    codes, ErrorPayload, GlobalPayload, Hello, Link, MsgType, ProtocolError, Role, RoundConfig, Session,
    TransportError, UpdatePayload,
};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct ServerPlan {
    pub round: RoundConfig,
    pub n_clients: usize,
    pub weighting: Weighting,
    pub checkpoint_mode: CheckpointMode,
    pub tolerate_failure: bool,
    /// Budget for receiving the handshake and each round's UPDATEs.
    pub timeout: Duration,
    pub init: ParameterSet,
}

#[derive(Debug, Clone)]
pub struct ServerOutcome {
    pub reports: Vec<RoundReport>,
    /// Each client's model after its last round; `None` if it dropped out.
    pub final_models: Vec<Option<ParameterSet>>,
    pub client_ids: Vec<String>,
    pub aggregations: u32,
    pub init_broadcast_bytes: u64,
    pub final_collect_bytes: u64,
    pub round_wall: Vec<Duration>,
}

struct Peer<L> {
    link: Option<L>,
    session: Session,
    id: String,
}

impl<L: Link> Peer<L> {
    fn send(&mut self, msg: &crate::transport::WireMessage) -> Result<usize, TransportError> {
        let link = self.link.as_mut().ok_or(TransportError::Closed)?;
        self.session.sent(msg)?;
        link.send(msg)
    }

    fn recv(&mut self, timeout: Duration) -> Result<crate::transport::WireMessage, TransportError> {
        let link = self.link.as_mut().ok_or(TransportError::Closed)?;
        let msg = link.recv(Some(timeout))?;
        if let Err(e) = self.session.received(&msg) {
            let _ = link.send(&ErrorPayload::new(e.code(), e.to_string()).to_message());
            return Err(e.into());
        }
        if msg.msg_type == MsgType::Error {
            let err = ErrorPayload::from_message(&msg)?;
            return Err(TransportError::Remote {
                code: err.code,
                message: err.message,
            });
        }
        Ok(msg)
    }

    /// Sends a best-effort ERROR and closes the link.
    fn close_with(&mut self, code: u16, message: &str) {
        if let Some(mut link) = self.link.take() {
            let _ = link.send(&ErrorPayload::new(code, message).to_message());
        }
    }

    fn live(&self) -> bool {
        self.link.is_some()
    }
}

fn transport(client: usize) -> impl Fn(TransportError) -> OrchestratorError {
    move |source| OrchestratorError::Transport {
        client: Some(client),
        source,
    }
}

/// Reads HELLO on every link and orders the sessions by client index.
fn handshake<L: Link>(links: Vec<L>, plan: &ServerPlan) -> Result<Vec<Peer<L>>, OrchestratorError> {
    if links.len() != plan.n_clients {
        return Err(OrchestratorError::Config(format!(
            "{} connections for {} clients",
            links.len(),
            plan.n_clients
        )));
    }
    let deadline = Instant::now() + plan.timeout;
    let mut slots: Vec<Option<Peer<L>>> = (0..plan.n_clients).map(|_| None).collect();
    for (arrival, link) in links.into_iter().enumerate() {
        let mut peer = Peer {
            link: Some(link),
            session: Session::new(Role::Server),
            id: String::new(),
        };
        let left = deadline.saturating_duration_since(Instant::now());
        let hello = peer.recv(left).and_then(|m| Ok(Hello::from_message(&m)?));
        let hello = match hello {
            Ok(h) => h,
            Err(e) => {
                if let TransportError::Protocol(p) = &e {
                    peer.close_with(p.code(), &p.to_string());
                }
                return Err(OrchestratorError::Handshake(format!("connection {arrival}: {e}")));
            }
        };
        let idx = hello.client_index as usize;
        if idx >= plan.n_clients || slots[idx].is_some() {
            peer.close_with(codes::BAD_PAYLOAD, "invalid or duplicate client index");
            return Err(OrchestratorError::Handshake(format!(
                "connection {arrival} claims client index {idx}"
            )));
        }
        peer.id = hello.client_id;
        slots[idx] = Some(peer);
    }
    Ok(slots.into_iter().map(|p| p.expect("all indices filled")).collect())
}

/// Runs a whole session with every client. On a fatal error the remaining
/// clients receive an ERROR before the error is returned.
pub fn run_server<L: Link>(
    links: Vec<L>,
    schema: &Arc<ModelSchema>,
    plan: &ServerPlan,
) -> Result<ServerOutcome, OrchestratorError> {
    let mut peers = handshake(links, plan)?;
    let result = drive(&mut peers, schema, plan);
    if let Err(e) = &result {
        for p in peers.iter_mut() {
            p.close_with(codes::ABORTED, &e.to_string());
        }
    }
    result
}

fn drive<L: Link>(
    peers: &mut [Peer<L>],
    schema: &Arc<ModelSchema>,
    plan: &ServerPlan,
) -> Result<ServerOutcome, OrchestratorError> {
    let mask = plan.round.strategy.components;
    let n = peers.len();
    let comm = comm_report(schema, mask);

    let config_msg = plan.round.to_message();
    let init_msg = GlobalPayload {
        round: 0,
        params: plan.init.restrict(ComponentMask::ALL),
    }
    .to_message();
    let mut init_broadcast_bytes = 0u64;
    for (i, p) in peers.iter_mut().enumerate() {
        p.send(&config_msg).map_err(transport(i))?;
        init_broadcast_bytes += p.send(&init_msg).map_err(transport(i))? as u64;
    }

    let mut reports = Vec::with_capacity(plan.round.rounds as usize);
    let mut round_wall = Vec::with_capacity(plan.round.rounds as usize);
    let mut aggregations = 0;
    let (mut cumulative, mut cumulative_down) = (0u64, 0u64);

    for round in 1..=plan.round.rounds {
        let started = Instant::now();
        let deadline = started + plan.timeout;
        let mut stats = vec![ClientRoundStats::dropped(); n];
        let mut updates: Vec<(usize, UpdatePayload)> = Vec::new();
        let (mut up_wire, mut up_data) = (0u64, 0u64);

        for (i, p) in peers.iter_mut().enumerate() {
            if !p.live() {
                continue;
            }
            let left = deadline.saturating_duration_since(Instant::now());
            match receive_update(p, schema, round, mask, left) {
                Ok((u, wire)) => {
                    up_wire += wire as u64;
                    up_data += data_bytes(&u.params) as u64;
                    stats[i] = ClientRoundStats {
                        status: ClientStatus::Ok,
                        pre_val: Some(u.pre_round_metric),
                        best_val: Some(u.val_metric),
                        best_epoch: Some(u.best_epoch),
                    };
                    updates.push((i, u));
                }
                Err(RoundFailure::Reported(message)) => {
                    if !plan.tolerate_failure {
                        return Err(OrchestratorError::ClientFailed { client: i, round, message });
                    }
                    log::warn!("client {i} failed round {round}: {message}");
                    stats[i] = ClientRoundStats::failed();
                }
                Err(RoundFailure::Fatal(e)) => {
                    if let TransportError::Protocol(pe) = &e {
                        p.close_with(pe.code(), &pe.to_string());
                    }
                    if !plan.tolerate_failure {
                        return Err(transport(i)(e));
                    }
                    log::warn!("dropping client {i} in round {round}: {e}");
                    p.link = None;
                }
            }
        }

        let aggregated = plan.round.aggregates(round);
        let mut down_wire = 0u64;
        let mut down_scalars = 0u64;
        if aggregated {
            if updates.is_empty() {
                return Err(OrchestratorError::ClientFailed {
                    client: 0,
                    round,
                    message: "no client delivered an update".into(),
                });
            }
            let global = combine(&updates, plan, mask)?;
            let msg = GlobalPayload { round, params: global }.to_message();
            for (i, p) in peers.iter_mut().enumerate() {
                if !p.live() {
                    continue;
                }
                match p.send(&msg) {
                    Ok(w) => {
                        down_wire += w as u64;
                        down_scalars += comm.transmitted;
                    }
                    Err(e) if plan.tolerate_failure => {
                        log::warn!("dropping client {i}: {e}");
                        p.link = None;
                    }
                    Err(e) => return Err(transport(i)(e)),
                }
            }
            aggregations += 1;
        }

        let transmitted = up_data / SCALAR_BYTES as u64;
        cumulative += transmitted;
        cumulative_down += down_scalars;
        reports.push(RoundReport {
            round,
            transmitted,
            cumulative,
            down_transmitted: down_scalars,
            cumulative_down,
            up_wire_bytes: up_wire,
            up_data_bytes: up_data,
            down_wire_bytes: down_wire,
            saved_per_client: comm.saved,
            saved_pct_centi: comm.saved_pct_centi,
            aggregated,
            clients: stats,
        });
        round_wall.push(started.elapsed());
    }

    let (final_models, final_collect_bytes) = collect_final(peers, schema, plan)?;
    for (i, p) in peers.iter_mut().enumerate() {
        if p.live() {
            p.send(&done_message()).map_err(transport(i))?;
            p.link = None;
        }
    }
    Ok(ServerOutcome {
        reports,
        final_models,
        client_ids: peers.iter().map(|p| p.id.clone()).collect(),
        aggregations,
        init_broadcast_bytes,
        final_collect_bytes,
        round_wall,
    })
}

enum RoundFailure {
    /// The client reported a local failure and stays in the session.
    Reported(String),
    Fatal(TransportError),
}

impl From<TransportError> for RoundFailure {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Remote { code, message } if code == codes::ROUND_FAILED => RoundFailure::Reported(message),
            other => RoundFailure::Fatal(other),
        }
    }
}

impl From<ProtocolError> for RoundFailure {
    fn from(e: ProtocolError) -> Self {
        RoundFailure::Fatal(e.into())
    }
}

fn receive_update<L: Link>(
    peer: &mut Peer<L>,
    schema: &Arc<ModelSchema>,
    round: u32,
    mask: ComponentMask,
    timeout: Duration,
) -> Result<(UpdatePayload, usize), RoundFailure> {
    let msg = peer.recv(timeout)?;
    let update = UpdatePayload::from_message(&msg, schema)?;
    if update.round != round || update.params.mask() != mask || update.client_id != peer.id {
        return Err(ProtocolError::Malformed(format!(
            "expected round {round} update for {mask} from `{}`, got round {} for {} from `{}`",
            peer.id,
            update.round,
            update.params.mask(),
            update.client_id
        ))
        .into());
    }
    Ok((update, msg.frame_len()))
}

fn combine(
    updates: &[(usize, UpdatePayload)],
    plan: &ServerPlan,
    mask: ComponentMask,
) -> Result<MaskedParams, OrchestratorError> {
    if plan.checkpoint_mode == CheckpointMode::SingleBestClient {
        // highest validation metric, lowest index on ties; NaN never wins
        let mut best = &updates[0];
        for u in &updates[1..] {
            if u.1.val_metric > best.1.val_metric || best.1.val_metric.is_nan() && !u.1.val_metric.is_nan() {
                best = u;
            }
        }
        return Ok(best.1.params.clone());
    }
    let client_updates: Vec<ClientUpdate> = updates
        .iter()
        .map(|(_, u)| {
            let weight = match plan.weighting {
                Weighting::SampleCount => u.weight,
                Weighting::Uniform => 1.0,
            };
            ClientUpdate::new(u.client_id.clone(), u.params.clone(), weight, u.val_metric)
        })
        .collect();
    Ok(aggregate(plan.round.strategy.rule, &client_updates, mask)?)
}

/// Each client sends its final model with the full mask after the last round.
fn collect_final<L: Link>(
    peers: &mut [Peer<L>],
    schema: &Arc<ModelSchema>,
    plan: &ServerPlan,
) -> Result<(Vec<Option<ParameterSet>>, u64), OrchestratorError> {
    let deadline = Instant::now() + plan.timeout;
    let mut models = Vec::with_capacity(peers.len());
    let mut bytes = 0u64;
    for (i, p) in peers.iter_mut().enumerate() {
        if !p.live() {
            models.push(None);
            continue;
        }
        let left = deadline.saturating_duration_since(Instant::now());
        let got = p.recv(left).and_then(|m| {
            let u = UpdatePayload::from_message(&m, schema)?;
            if u.round != plan.round.rounds || u.params.mask() != ComponentMask::ALL {
                return Err(ProtocolError::Malformed("final model must be a full-mask update".into()).into());
            }
            Ok((u, m.frame_len()))
        });
        match got {
            Ok((u, wire)) => {
                bytes += wire as u64;
                let blocks = u.params.into_blocks();
                models.push(Some(ParameterSet::from_blocks(Arc::clone(schema), blocks)?));
            }
            Err(e) if plan.tolerate_failure => {
                log::warn!("no final model from client {i}: {e}");
                p.link = None;
                models.push(None);
            }
            Err(e) => return Err(transport(i)(e)),
        }
    }
    Ok((models, bytes))
}
