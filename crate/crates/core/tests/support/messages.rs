//! Random southbound messages.

use std::path::PathBuf;

use edgeplane::model::{
    EndpointId, GroupId, LabelPref, LinkStatus, Locator, MappingRecord, RecordKey, SiteId, UnderlayAddr,
};
use edgeplane::simnet::SimTime;
use edgeplane::southbound::{AttributeChange, Envelope, LocatorChange, Message, RegistrationDelta};
use proptest::prelude::*;

pub fn vector_file() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/vectors/southbound.bin")
}

fn ident() -> impl Strategy<Value = String> {
    "[A-Za-z_][A-Za-z0-9_]{0,12}"
}

fn group() -> impl Strategy<Value = GroupId> {
    ident().prop_map(|s| GroupId::new(&s).unwrap())
}

fn locator() -> impl Strategy<Value = Locator> {
    (any::<u16>(), any::<u32>(), "[ -~]{0,10}", any::<u8>(), any::<u8>(), any::<bool>()).prop_map(
        |(s, a, l, p, w, up)| {
            Locator::new(SiteId(s), UnderlayAddr(a), l)
                .with_priority(p, w)
                .with_status(if up { LinkStatus::Up } else { LinkStatus::Down })
        },
    )
}

fn key() -> impl Strategy<Value = RecordKey> {
    (any::<u32>(), proptest::option::of(group())).prop_map(|(d, g)| match g {
        None => RecordKey::any(EndpointId(d)),
        Some(g) => RecordKey::pair(g, EndpointId(d)),
    })
}

fn record() -> impl Strategy<Value = MappingRecord> {
    (
        key(),
        proptest::collection::vec(locator(), 0..4),
        proptest::collection::vec(any::<u32>(), 0..3),
        proptest::collection::vec(("[ -~]{0,8}", any::<u8>(), any::<u8>()), 0..3),
        any::<u32>(),
        any::<u64>(),
        any::<bool>(),
    )
        .prop_map(|(key, locs, hops, hints, ttl, version, negative)| MappingRecord {
            key,
            ingress_locators: locs,
            hop_chain: hops.into_iter().map(EndpointId).collect(),
            egress_hint: hints.into_iter().map(|(l, p, w)| LabelPref::new(l, p, w)).collect(),
            ttl_s: ttl,
            version,
            negative,
        })
}

fn delta() -> impl Strategy<Value = RegistrationDelta> {
    (
        proptest::collection::vec(("[ -~]{0,8}", any::<bool>()), 0..3),
        proptest::collection::vec(("[ -~]{0,8}", proptest::option::of("[ -~]{0,8}")), 0..3),
        any::<u64>(),
    )
        .prop_map(|(locs, attrs, seq)| RegistrationDelta {
            locators: locs
                .into_iter()
                .map(|(label, up)| LocatorChange {
                    label,
                    status: if up { LinkStatus::Up } else { LinkStatus::Down },
                })
                .collect(),
            attributes: attrs.into_iter().map(|(key, value)| AttributeChange { key, value }).collect(),
            seq,
        })
}

fn message() -> impl Strategy<Value = Message> {
    let n = any::<u64>();
    prop_oneof![
        (any::<u32>(), proptest::option::of(group()), any::<u32>(), n).prop_map(|(s, g, d, nonce)| {
            Message::StateRequest {
                src_eid: EndpointId(s),
                src_group_hint: g,
                dst_eid: EndpointId(d),
                nonce,
            }
        }),
        (record(), n).prop_map(|(record, nonce)| Message::StateReply { record, nonce }),
        (any::<u32>(), any::<u32>(), n).prop_map(|(d, ttl_s, nonce)| Message::NegativeReply {
            dst: EndpointId(d),
            ttl_s,
            nonce
        }),
        (any::<u32>(), delta(), n).prop_map(|(e, delta, nonce)| Message::StateUpdate {
            eid: EndpointId(e),
            delta,
            nonce
        }),
        (key(), record(), n).prop_map(|(key, record, nonce)| Message::Notify { key, record, nonce }),
        (n, any::<u8>()).prop_map(|(nonce, flags)| Message::Ack { nonce, flags }),
    ]
}

pub fn envelope() -> impl Strategy<Value = Envelope> {
    (locator(), any::<u64>(), message()).prop_map(|(sender, t, message)| Envelope {
        sender,
        timestamp: SimTime(t),
        message,
    })
}
