//! Connectionless pull protocol between data-plane nodes and controllers.

pub mod codec;
pub mod retry;

use serde::{Deserialize, Serialize};

use crate::agent::BootMsg;
use crate::controller::InternalMsg;
use crate::model::{
    EncapsulatedPacket, EndpointId, GroupId, LabelPref, LinkStatus, Locator, MappingRecord,
    RecordKey, SiteId, UnderlayAddr,
};
use crate::simnet::SimTime;

pub use codec::{decode, encode, MalformedDatagram};
pub use retry::{send_with_retry, Outcome, RetransmitPolicy, RetryState, RetryStep, Transport};

/// Ack flag: the sender has no registration and must bootstrap again.
pub const ACK_NOT_REGISTERED: u8 = 0x01;
/// Ack flag: the update was already applied.
pub const ACK_DUPLICATE: u8 = 0x02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tag {
    StateRequest = 1,
    StateReply = 2,
    NegativeReply = 3,
    StateUpdate = 4,
    Notify = 5,
    Ack = 6,
}

impl Tag {
    pub fn from_u8(v: u8) -> Option<Tag> {
        Some(match v {
            1 => Tag::StateRequest,
            2 => Tag::StateReply,
            3 => Tag::NegativeReply,
            4 => Tag::StateUpdate,
            5 => Tag::Notify,
            6 => Tag::Ack,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocatorChange {
    pub label: String,
    pub status: LinkStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeChange {
    pub key: String,
    /// `None` removes the attribute.
    pub value: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationDelta {
    pub locators: Vec<LocatorChange>,
    pub attributes: Vec<AttributeChange>,
    /// Sender's update sequence; controllers ignore anything not newer.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    StateRequest {
        src_eid: EndpointId,
        src_group_hint: Option<GroupId>,
        dst_eid: EndpointId,
        nonce: u64,
    },
    StateReply {
        record: MappingRecord,
        nonce: u64,
    },
    NegativeReply {
        dst: EndpointId,
        ttl_s: u32,
        nonce: u64,
    },
    /// Locator or attribute change, to a controller or to a peer.
    StateUpdate {
        eid: EndpointId,
        delta: RegistrationDelta,
        nonce: u64,
    },
    /// Pushed record for `key`; the record may be a fallback stored under a
    /// different key.
    Notify {
        key: RecordKey,
        record: MappingRecord,
        nonce: u64,
    },
    Ack {
        nonce: u64,
        flags: u8,
    },
}

impl Message {
    pub fn tag(&self) -> Tag {
        match self {
            Message::StateRequest { .. } => Tag::StateRequest,
            Message::StateReply { .. } => Tag::StateReply,
            Message::NegativeReply { .. } => Tag::NegativeReply,
            Message::StateUpdate { .. } => Tag::StateUpdate,
            Message::Notify { .. } => Tag::Notify,
            Message::Ack { .. } => Tag::Ack,
        }
    }

    pub fn nonce(&self) -> u64 {
        match self {
            Message::StateRequest { nonce, .. }
            | Message::StateReply { nonce, .. }
            | Message::NegativeReply { nonce, .. }
            | Message::StateUpdate { nonce, .. }
            | Message::Notify { nonce, .. }
            | Message::Ack { nonce, .. } => *nonce,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub sender: Locator,
    pub timestamp: SimTime,
    pub message: Message,
}

/// Everything that crosses the simulated underlay.
#[derive(Debug, Clone, PartialEq)]
pub enum Wire {
    /// Encoded southbound datagram.
    South(Vec<u8>),
    /// Reliable bootstrap channel.
    Boot(BootMsg),
    /// Controller-to-controller traffic.
    Internal(Box<InternalMsg>),
    /// Encapsulated overlay traffic.
    Data(EncapsulatedPacket),
}

/// Per-sender nonce source: the high half is derived from the seed, the low
/// half counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonceCounter {
    next: u64,
}

impl NonceCounter {
    pub fn seeded(seed: u64) -> Self {
        let high = crate::model::fnv1a64(&seed.to_be_bytes()) << 32;
        Self { next: high | 1 }
    }

    pub fn fresh(&mut self) -> u64 {
        let n = self.next;
        self.next = self.next.wrapping_add(1);
        n
    }
}

/// The six messages frozen in the golden vector file.
pub fn golden_messages() -> Vec<Envelope> {
    let agent = Locator::new(SiteId(0), UnderlayAddr::new(198, 18, 0, 1), "eth");
    let ctrl = Locator::new(SiteId(1), UnderlayAddr::new(198, 19, 0, 1), "ctl");
    let office = EndpointId::new(10, 2, 0, 1);
    let laptops = GroupId::new("EmployeesLaptops").expect("valid");
    let record = MappingRecord {
        key: RecordKey::pair(laptops.clone(), office),
        ingress_locators: vec![
            Locator::new(SiteId(3), UnderlayAddr::new(203, 0, 113, 3), "Link-3"),
            Locator::new(SiteId(3), UnderlayAddr::new(203, 0, 113, 1), "Link-1")
                .with_priority(2, 50),
            Locator::new(SiteId(3), UnderlayAddr::new(203, 0, 113, 2), "Link-2")
                .with_priority(2, 50)
                .with_status(LinkStatus::Down),
        ],
        hop_chain: vec![EndpointId::new(192, 168, 0, 1)],
        egress_hint: vec![LabelPref::new("LTE", 1, 100)],
        ttl_s: 60,
        version: 2,
        negative: false,
    };
    let at = |ms| SimTime::from_millis(ms);
    vec![
        Envelope {
            sender: agent.clone(),
            timestamp: at(1_000),
            message: Message::StateRequest {
                src_eid: EndpointId::new(10, 1, 0, 5),
                src_group_hint: Some(laptops),
                dst_eid: office,
                nonce: 0x0102_0304_0506_0708,
            },
        },
        Envelope {
            sender: ctrl.clone(),
            timestamp: at(1_057),
            message: Message::StateReply {
                record: record.clone(),
                nonce: 0x0102_0304_0506_0708,
            },
        },
        Envelope {
            sender: ctrl.clone(),
            timestamp: at(2_000),
            message: Message::NegativeReply {
                dst: EndpointId::new(99, 0, 0, 1),
                ttl_s: 5,
                nonce: 7,
            },
        },
        Envelope {
            sender: agent.clone(),
            timestamp: at(3_000),
            message: Message::StateUpdate {
                eid: EndpointId::new(10, 1, 0, 5),
                delta: RegistrationDelta {
                    locators: vec![LocatorChange {
                        label: "Ethernet".into(),
                        status: LinkStatus::Down,
                    }],
                    attributes: vec![
                        AttributeChange {
                            key: "battery".into(),
                            value: Some("12".into()),
                        },
                        AttributeChange {
                            key: "geo".into(),
                            value: None,
                        },
                    ],
                    seq: 3,
                },
                nonce: 8,
            },
        },
        Envelope {
            sender: ctrl.clone(),
            timestamp: at(4_000),
            message: Message::Notify {
                key: record.key.clone(),
                record: MappingRecord {
                    version: 3,
                    ..record
                },
                nonce: 9,
            },
        },
        Envelope {
            sender: ctrl,
            timestamp: at(4_030),
            message: Message::Ack {
                nonce: 8,
                flags: ACK_NOT_REGISTERED,
            },
        },
    ]
}

/// Frames datagrams as `u32 length || bytes`, the golden file layout.
pub fn frame_vectors(datagrams: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for d in datagrams {
        out.extend_from_slice(&(d.len() as u32).to_be_bytes());
        out.extend_from_slice(d);
    }
    out
}

pub fn unframe_vectors(mut bytes: &[u8]) -> Option<Vec<Vec<u8>>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 4 {
            return None;
        }
        let n = u32::from_be_bytes(bytes[..4].try_into().ok()?) as usize;
        bytes = &bytes[4..];
        if bytes.len() < n {
            return None;
        }
        out.push(bytes[..n].to_vec());
        bytes = &bytes[n..];
    }
    Some(out)
}
