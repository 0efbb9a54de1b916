//! Retransmission schedule and a blocking request/reply helper.

use serde::{Deserialize, Serialize};

use super::{codec, Envelope, Message};
use crate::model::UnderlayAddr;
use crate::simnet::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetransmitPolicy {
    pub max_attempts: u32,
    /// Wait after each attempt before the next one (or before giving up).
    pub backoff: Vec<SimTime>,
}

impl Default for RetransmitPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff: vec![SimTime::from_secs(1), SimTime::from_secs(2), SimTime::from_secs(4)],
        }
    }
}

impl RetransmitPolicy {
    pub fn is_valid(&self) -> bool {
        self.max_attempts >= 1 && self.backoff.len() == self.max_attempts as usize
    }

    /// Time from the first attempt until the request is given up.
    pub fn total(&self) -> SimTime {
        self.backoff.iter().fold(SimTime::ZERO, |a, b| a + *b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetryStep {
    /// Send again and wait this long.
    Resend(SimTime),
    Exhausted,
}

/// Per-request retransmission state, driven by timeout events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryState {
    attempts: u32,
    pub started: SimTime,
}

impl RetryState {
    /// Call when the first attempt goes out; returns its timeout.
    pub fn start(policy: &RetransmitPolicy, now: SimTime) -> (Self, SimTime) {
        (Self { attempts: 1, started: now }, policy.backoff[0])
    }

    pub fn attempts(&self) -> u32 {
        self.attempts
    }

    pub fn on_timeout(&mut self, policy: &RetransmitPolicy) -> RetryStep {
        if self.attempts >= policy.max_attempts {
            return RetryStep::Exhausted;
        }
        self.attempts += 1;
        RetryStep::Resend(policy.backoff[self.attempts as usize - 1])
    }
}

/// A datagram socket over simulated (or real) time.
pub trait Transport {
    fn now(&self) -> SimTime;
    fn send(&mut self, to: UnderlayAddr, datagram: Vec<u8>);
    /// Next datagram arriving no later than `deadline`; leaves the clock at
    /// the arrival time, or at `deadline` when nothing arrives.
    fn recv_until(&mut self, deadline: SimTime) -> Option<Vec<u8>>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Answered {
        reply: Envelope,
        attempts: u32,
        latency: SimTime,
    },
    Exhausted {
        elapsed: SimTime,
    },
}

/// True for messages that answer `nonce`.
pub fn answers(msg: &Message, nonce: u64) -> bool {
    match msg {
        Message::StateReply { nonce: n, .. }
        | Message::NegativeReply { nonce: n, .. }
        | Message::Ack { nonce: n, .. } => *n == nonce,
        _ => false,
    }
}

/// Sends `msg` to `dest` until a nonce-matched reply arrives or the
/// schedule runs out. Unrelated or undecodable datagrams are discarded.
pub fn send_with_retry(
    msg: &Envelope,
    dest: UnderlayAddr,
    policy: &RetransmitPolicy,
    transport: &mut impl Transport,
) -> Outcome {
    let nonce = msg.message.nonce();
    let bytes = codec::encode(msg);
    let t0 = transport.now();
    transport.send(dest, bytes.clone());
    let (mut state, mut wait) = RetryState::start(policy, t0);
    loop {
        let deadline = transport.now() + wait;
        while let Some(d) = transport.recv_until(deadline) {
            if let Ok(reply) = codec::decode(&d) {
                if answers(&reply.message, nonce) {
                    return Outcome::Answered {
                        reply,
                        attempts: state.attempts(),
                        latency: transport.now() - t0,
                    };
                }
            }
        }
        match state.on_timeout(policy) {
            RetryStep::Resend(next) => {
                transport.send(dest, bytes.clone());
                wait = next;
            }
            RetryStep::Exhausted => {
                return Outcome::Exhausted {
                    elapsed: transport.now() - t0,
                }
            }
        }
    }
}
