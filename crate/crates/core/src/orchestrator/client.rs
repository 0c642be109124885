//! Client side of a session: local training with best-checkpoint selection,
//! masked upload, and merge of the broadcast global components.

use std::sync::Arc;
use std::time::Duration;

use super::OrchestratorError;
use crate::aggregation::merge;
use crate::params::ParameterSet;
use crate::schema::ComponentMask;
use crate::trainer::{mix_seed, BestCheckpoint, DataRef, Split, TrainRequest, Trainer};
use crate::transport::payload::data_bytes;
use crate::transport::{
    codes, ErrorPayload, GlobalPayload, Hello, Link, MsgType, Role, RoundConfig, Session, TransportError,
    UpdatePayload, WireMessage,
};

pub fn client_id(index: usize) -> String {
    format!("client{index}")
}

#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub index: usize,
    pub final_model: ParameterSet,
    pub rounds_failed: u32,
    /// Tensor bytes uploaded during the rounds (excluding the final model).
    pub uploaded_data_bytes: u64,
}

struct Endpoint<L> {
    link: L,
    session: Session,
    timeout: Option<Duration>,
    index: usize,
}

impl<L: Link> Endpoint<L> {
    fn err(&self, source: TransportError) -> OrchestratorError {
        OrchestratorError::Transport {
            client: Some(self.index),
            source,
        }
    }

    fn send(&mut self, msg: &WireMessage) -> Result<usize, OrchestratorError> {
        self.session.sent(msg).map_err(|e| self.err(e.into()))?;
        self.link.send(msg).map_err(|e| self.err(e))
    }

    fn recv(&mut self, expected: MsgType) -> Result<WireMessage, OrchestratorError> {
        let msg = self.link.recv(self.timeout).map_err(|e| self.err(e))?;
        if let Err(e) = self.session.received(&msg) {
            let _ = self.link.send(&ErrorPayload::new(e.code(), e.to_string()).to_message());
            return Err(self.err(e.into()));
        }
        if msg.msg_type == MsgType::Error {
            let e = ErrorPayload::from_message(&msg).map_err(|e| self.err(e.into()))?;
            return Err(self.err(TransportError::Remote {
                code: e.code,
                message: e.message,
            }));
        }
        if msg.msg_type != expected {
            let err = crate::transport::ProtocolError::UnexpectedMessage {
                state: "waiting for the server",
                got: msg.msg_type,
            };
            let _ = self.link.send(&ErrorPayload::new(err.code(), err.to_string()).to_message());
            return Err(self.err(err.into()));
        }
        Ok(msg)
    }
}

/// Runs one full session for client `index` over `link`. `timeout` bounds
/// each wait for a server message; `None` waits indefinitely.
pub fn run_client<L: Link>(
    link: L,
    index: usize,
    trainer: &dyn Trainer,
    timeout: Option<Duration>,
) -> Result<ClientOutcome, OrchestratorError> {
    let schema = Arc::clone(trainer.schema());
    let id = client_id(index);
    let mut ep = Endpoint {
        link,
        session: Session::new(Role::Client),
        timeout,
        index,
    };
    ep.send(
        &Hello {
            client_index: index as u32,
            client_id: id.clone(),
        }
        .to_message(),
    )?;
    let config_msg = ep.recv(MsgType::RoundConfig)?;
    let config = RoundConfig::from_message(&config_msg).map_err(|e| ep.err(e.into()))?;
    let init_msg = ep.recv(MsgType::Global)?;
    let init = GlobalPayload::from_message(&init_msg, &schema).map_err(|e| ep.err(e.into()))?;
    if init.round != 0 || init.params.mask() != ComponentMask::ALL {
        return Err(OrchestratorError::Handshake(format!(
            "client {index}: expected a full initial model for round 0"
        )));
    }
    let mut local = ParameterSet::from_blocks(Arc::clone(&schema), init.params.into_blocks())?;

    let mask = config.strategy.components;
    let weight = trainer.sample_count(index);
    let mut rounds_failed = 0;
    let mut uploaded_data_bytes = 0u64;
    for round in 1..=config.rounds {
        match local_round(trainer, &local, &config, index, round) {
            Ok((best, pre)) => {
                let update = UpdatePayload {
                    client_id: id.clone(),
                    round,
                    weight,
                    val_metric: best.metric,
                    params: best.params.restrict(mask),
                    best_epoch: best.epoch,
                    pre_round_metric: pre,
                };
                uploaded_data_bytes += data_bytes(&update.params) as u64;
                ep.send(&update.to_message())?;
                local = best.params;
            }
            Err(e) => {
                log::warn!("client {index} round {round}: {e}");
                rounds_failed += 1;
                ep.send(&ErrorPayload::new(codes::ROUND_FAILED, e.to_string()).to_message())?;
            }
        }
        if config.aggregates(round) {
            let msg = ep.recv(MsgType::Global)?;
            let global = GlobalPayload::from_message(&msg, &schema).map_err(|e| ep.err(e.into()))?;
            if global.round != round || global.params.mask() != mask {
                return Err(OrchestratorError::Handshake(format!(
                    "client {index}: GLOBAL for round {} mask {} in round {round}",
                    global.round,
                    global.params.mask()
                )));
            }
            local = merge(&local, &global.params, mask)?;
        }
    }

    let last = UpdatePayload {
        client_id: id,
        round: config.rounds,
        weight,
        val_metric: f64::NAN,
        params: local.restrict(ComponentMask::ALL),
        best_epoch: 0,
        pre_round_metric: f64::NAN,
    };
    ep.send(&last.to_message())?;
    ep.recv(MsgType::Done)?;
    Ok(ClientOutcome {
        index,
        final_model: local,
        rounds_failed,
        uploaded_data_bytes,
    })
}

/// Pre-round validation, then `local_epochs` of training keeping the
/// best-validation checkpoint.
fn local_round(
    trainer: &dyn Trainer,
    local: &ParameterSet,
    config: &RoundConfig,
    index: usize,
    round: u32,
) -> Result<(crate::trainer::Checkpoint, f64), OrchestratorError> {
    let pre = trainer.evaluate(local, DataRef::new(index, Split::Valid))?;
    let request = TrainRequest {
        client: index,
        epochs: config.local_epochs,
        batch_size: config.batch_size,
        seed: mix_seed(mix_seed(config.seed, round as u64), index as u64),
        patience: config.patience,
    };
    let mut best = BestCheckpoint::new();
    trainer.train(local, &request, &mut |epoch, params, metric| best.observe(epoch, params, metric))?;
    Ok((best.into_best()?, pre))
}
