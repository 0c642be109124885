//! Per-session message ordering: `HELLO -> ROUND_CONFIG -> (UPDATE | GLOBAL)* -> DONE`.
//! An ERROR ends the session, except a ROUND_FAILED report during the rounds.

use super::frame::{MsgType, WireMessage};
use super::payload::ErrorPayload;
use super::{codes, ProtocolError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Server,
    Client,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    AwaitHello,
    AwaitConfig,
    Rounds,
    Closed,
}

impl State {
    fn describe(self) -> &'static str {
        match self {
            State::AwaitHello => "awaiting HELLO",
            State::AwaitConfig => "awaiting ROUND_CONFIG",
            State::Rounds => "exchanging rounds",
            State::Closed => "session closed",
        }
    }
}

/// Tracks one endpoint's view of a session. Every frame sent or received is
/// fed through [`Session::sent`] or [`Session::received`].
#[derive(Debug, Clone)]
pub struct Session {
    role: Role,
    state: State,
}

fn sender_of(ty: MsgType) -> Option<Role> {
    match ty {
        MsgType::Hello | MsgType::Update => Some(Role::Client),
        MsgType::RoundConfig | MsgType::Global | MsgType::Done => Some(Role::Server),
        MsgType::Error => None,
    }
}

impl Session {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            state: State::AwaitHello,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.state == State::Closed
    }

    pub fn sent(&mut self, msg: &WireMessage) -> Result<(), ProtocolError> {
        let role = self.role;
        self.advance(role, msg)
    }

    pub fn received(&mut self, msg: &WireMessage) -> Result<(), ProtocolError> {
        let peer = match self.role {
            Role::Server => Role::Client,
            Role::Client => Role::Server,
        };
        self.advance(peer, msg)
    }

    fn advance(&mut self, from: Role, msg: &WireMessage) -> Result<(), ProtocolError> {
        let ty = msg.msg_type;
        let unexpected = ProtocolError::UnexpectedMessage {
            state: self.state.describe(),
            got: ty,
        };
        if sender_of(ty).is_some_and(|r| r != from) {
            self.state = State::Closed;
            return Err(unexpected);
        }
        let next = match (self.state, ty) {
            (State::Closed, _) => return Err(unexpected),
            (State::Rounds, MsgType::Error) if is_round_failure(msg) => State::Rounds,
            (_, MsgType::Error) => State::Closed,
            (State::AwaitHello, MsgType::Hello) => State::AwaitConfig,
            (State::AwaitConfig, MsgType::RoundConfig) => State::Rounds,
            (State::Rounds, MsgType::Update | MsgType::Global) => State::Rounds,
            (State::Rounds, MsgType::Done) => State::Closed,
            _ => {
                self.state = State::Closed;
                return Err(unexpected);
            }
        };
        self.state = next;
        Ok(())
    }
}

fn is_round_failure(msg: &WireMessage) -> bool {
    ErrorPayload::from_message(msg).is_ok_and(|e| e.code == codes::ROUND_FAILED)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::payload::done_message;

    fn msg(ty: MsgType) -> WireMessage {
        WireMessage::new(ty, Vec::new())
    }

    #[test]
    fn happy_path() {
        let mut s = Session::new(Role::Server);
        s.received(&msg(MsgType::Hello)).unwrap();
        s.sent(&msg(MsgType::RoundConfig)).unwrap();
        s.sent(&msg(MsgType::Global)).unwrap();
        s.received(&msg(MsgType::Update)).unwrap();
        s.received(&ErrorPayload::new(codes::ROUND_FAILED, "oom").to_message()).unwrap();
        s.sent(&msg(MsgType::Global)).unwrap();
        s.sent(&done_message()).unwrap();
        assert!(s.is_closed());
        assert!(s.received(&msg(MsgType::Update)).is_err());
    }

    #[test]
    fn update_before_hello_is_rejected() {
        let mut s = Session::new(Role::Server);
        let err = s.received(&msg(MsgType::Update)).unwrap_err();
        assert_eq!(err.code(), codes::UNEXPECTED);
        assert!(s.is_closed());
    }

    #[test]
    fn wrong_direction_is_rejected() {
        let mut s = Session::new(Role::Client);
        assert!(s.received(&msg(MsgType::Hello)).is_err());
        let mut s = Session::new(Role::Server);
        s.received(&msg(MsgType::Hello)).unwrap();
        assert!(s.received(&msg(MsgType::RoundConfig)).is_err());
    }

    #[test]
    fn fatal_error_closes() {
        let mut s = Session::new(Role::Client);
        s.sent(&msg(MsgType::Hello)).unwrap();
        s.received(&ErrorPayload::new(codes::VERSION, "v").to_message()).unwrap();
        assert!(s.is_closed());
    }
}
