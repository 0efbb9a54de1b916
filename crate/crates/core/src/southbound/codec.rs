//! Binary datagram format. All integers are big-endian; strings and lists
//! carry a u16 length prefix.
//!
//! ```text
//! datagram := magic:"EPSB" tag:u8 sender:locator timestamp_us:u64 body
//! locator  := site:u16 addr:u32 label:str priority:u8 weight:u8 status:u8
//! ```

use thiserror::Error;

use super::{
    AttributeChange, Envelope, LocatorChange, Message, RegistrationDelta, Tag,
};
use crate::model::{
    EndpointId, GroupId, LabelPref, LinkStatus, Locator, MappingRecord, RecordKey, SiteId,
    SourceGroup, UnderlayAddr,
};
use crate::simnet::SimTime;

pub const MAGIC: [u8; 4] = *b"EPSB";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed datagram at byte {offset}: {reason}")]
pub struct MalformedDatagram {
    pub offset: usize,
    pub reason: &'static str,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u16(u16::try_from(n).expect("field longer than 65535"));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn bool(&mut self, b: bool) {
        self.u8(u8::from(b));
    }
    fn locator(&mut self, l: &Locator) {
        self.u16(l.site.0);
        self.u32(l.underlay_addr.0);
        self.str(&l.label);
        self.u8(l.priority);
        self.u8(l.weight);
        self.status(l.status);
    }
    fn status(&mut self, s: LinkStatus) {
        self.u8(match s {
            LinkStatus::Up => 1,
            LinkStatus::Down => 0,
        });
    }
    fn key(&mut self, k: &RecordKey) {
        self.u32(k.dst.0);
        match &k.src {
            SourceGroup::Any => self.u8(0),
            SourceGroup::Group(g) => {
                self.u8(1);
                self.str(g.as_str());
            }
        }
    }
    fn record(&mut self, r: &MappingRecord) {
        self.key(&r.key);
        self.len(r.ingress_locators.len());
        for l in &r.ingress_locators {
            self.locator(l);
        }
        self.len(r.hop_chain.len());
        for h in &r.hop_chain {
            self.u32(h.0);
        }
        self.len(r.egress_hint.len());
        for p in &r.egress_hint {
            self.str(&p.label);
            self.u8(p.priority);
            self.u8(p.weight);
        }
        self.u32(r.ttl_s);
        self.u64(r.version);
        self.bool(r.negative);
    }
}

pub fn encode(env: &Envelope) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::with_capacity(64),
    };
    w.buf.extend_from_slice(&MAGIC);
    w.u8(env.message.tag() as u8);
    w.locator(&env.sender);
    w.u64(env.timestamp.0);
    match &env.message {
        Message::StateRequest {
            src_eid,
            src_group_hint,
            dst_eid,
            nonce,
        } => {
            w.u32(src_eid.0);
            match src_group_hint {
                None => w.u8(0),
                Some(g) => {
                    w.u8(1);
                    w.str(g.as_str());
                }
            }
            w.u32(dst_eid.0);
            w.u64(*nonce);
        }
        Message::StateReply { record, nonce } => {
            w.record(record);
            w.u64(*nonce);
        }
        Message::NegativeReply { dst, ttl_s, nonce } => {
            w.u32(dst.0);
            w.u32(*ttl_s);
            w.u64(*nonce);
        }
        Message::StateUpdate { eid, delta, nonce } => {
            w.u32(eid.0);
            w.len(delta.locators.len());
            for c in &delta.locators {
                w.str(&c.label);
                w.status(c.status);
            }
            w.len(delta.attributes.len());
            for a in &delta.attributes {
                w.str(&a.key);
                match &a.value {
                    None => w.u8(0),
                    Some(v) => {
                        w.u8(1);
                        w.str(v);
                    }
                }
            }
            w.u64(delta.seq);
            w.u64(*nonce);
        }
        Message::Notify { key, record, nonce } => {
            w.key(key);
            w.record(record);
            w.u64(*nonce);
        }
        Message::Ack { nonce, flags } => {
            w.u64(*nonce);
            w.u8(*flags);
        }
    }
    w.buf
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: &'static str) -> Result<T, MalformedDatagram> {
        Err(MalformedDatagram {
            offset: self.at,
            reason,
        })
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], MalformedDatagram> {
        if self.buf.len() - self.at < n {
            return self.fail("truncated");
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, MalformedDatagram> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, MalformedDatagram> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, MalformedDatagram> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, MalformedDatagram> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, MalformedDatagram> {
        let n = usize::from(self.u16()?);
        let at = self.at;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| MalformedDatagram {
            offset: at,
            reason: "string is not UTF-8",
        })
    }
    fn bool(&mut self) -> Result<bool, MalformedDatagram> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => self.fail("boolean out of range"),
        }
    }
    fn status(&mut self) -> Result<LinkStatus, MalformedDatagram> {
        match self.u8()? {
            1 => Ok(LinkStatus::Up),
            0 => Ok(LinkStatus::Down),
            _ => self.fail("link status out of range"),
        }
    }
    fn group(&mut self) -> Result<GroupId, MalformedDatagram> {
        let at = self.at;
        let s = self.str()?;
        GroupId::new(&s).map_err(|_| MalformedDatagram {
            offset: at,
            reason: "invalid group name",
        })
    }
    fn locator(&mut self) -> Result<Locator, MalformedDatagram> {
        Ok(Locator {
            site: SiteId(self.u16()?),
            underlay_addr: UnderlayAddr(self.u32()?),
            label: self.str()?,
            priority: self.u8()?,
            weight: self.u8()?,
            status: self.status()?,
        })
    }
    fn key(&mut self) -> Result<RecordKey, MalformedDatagram> {
        let dst = EndpointId(self.u32()?);
        let src = match self.u8()? {
            0 => SourceGroup::Any,
            1 => SourceGroup::Group(self.group()?),
            _ => return self.fail("source group tag out of range"),
        };
        Ok(RecordKey { dst, src })
    }
    fn record(&mut self) -> Result<MappingRecord, MalformedDatagram> {
        let key = self.key()?;
        let n = self.u16()?;
        let ingress_locators = (0..n).map(|_| self.locator()).collect::<Result<_, _>>()?;
        let n = self.u16()?;
        let hop_chain = (0..n).map(|_| self.u32().map(EndpointId)).collect::<Result<_, _>>()?;
        let n = self.u16()?;
        let egress_hint = (0..n)
            .map(|_| Ok(LabelPref::new(self.str()?, self.u8()?, self.u8()?)))
            .collect::<Result<_, _>>()?;
        Ok(MappingRecord {
            key,
            ingress_locators,
            hop_chain,
            egress_hint,
            ttl_s: self.u32()?,
            version: self.u64()?,
            negative: self.bool()?,
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Envelope, MalformedDatagram> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(MalformedDatagram {
            offset: 0,
            reason: "bad magic",
        });
    }
    let raw = r.u8()?;
    let tag = match Tag::from_u8(raw) {
        Some(t) => t,
        None if raw >= 0x80 => return Err(MalformedDatagram { offset: 4, reason: "reserved variant tag" }),
        None => return Err(MalformedDatagram { offset: 4, reason: "unknown variant tag" }),
    };
    let sender = r.locator()?;
    let timestamp = SimTime(r.u64()?);
    let message = match tag {
        Tag::StateRequest => {
            let src_eid = EndpointId(r.u32()?);
            let src_group_hint = match r.u8()? {
                0 => None,
                1 => Some(r.group()?),
                _ => return r.fail("option tag out of range"),
            };
            Message::StateRequest {
                src_eid,
                src_group_hint,
                dst_eid: EndpointId(r.u32()?),
                nonce: r.u64()?,
            }
        }
        Tag::StateReply => Message::StateReply {
            record: r.record()?,
            nonce: r.u64()?,
        },
        Tag::NegativeReply => Message::NegativeReply {
            dst: EndpointId(r.u32()?),
            ttl_s: r.u32()?,
            nonce: r.u64()?,
        },
        Tag::StateUpdate => {
            let eid = EndpointId(r.u32()?);
            let n = r.u16()?;
            let locators = (0..n)
                .map(|_| {
                    Ok(LocatorChange {
                        label: r.str()?,
                        status: r.status()?,
                    })
                })
                .collect::<Result<_, _>>()?;
            let n = r.u16()?;
            let attributes = (0..n)
                .map(|_| {
                    let key = r.str()?;
                    let value = match r.u8()? {
                        0 => None,
                        1 => Some(r.str()?),
                        _ => return r.fail("option tag out of range"),
                    };
                    Ok(AttributeChange { key, value })
                })
                .collect::<Result<_, _>>()?;
            let seq = r.u64()?;
            Message::StateUpdate {
                eid,
                delta: RegistrationDelta {
                    locators,
                    attributes,
                    seq,
                },
                nonce: r.u64()?,
            }
        }
        Tag::Notify => Message::Notify {
            key: r.key()?,
            record: r.record()?,
            nonce: r.u64()?,
        },
        Tag::Ack => Message::Ack {
            nonce: r.u64()?,
            flags: r.u8()?,
        },
    };
    if r.at != bytes.len() {
        return r.fail("trailing bytes");
    }
    Ok(Envelope {
        sender,
        timestamp,
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::super::golden_messages;
    use super::*;

    #[test]
    fn every_golden_message_round_trips() {
        for env in golden_messages() {
            let bytes = encode(&env);
            assert_eq!(decode(&bytes).unwrap(), env);
        }
    }

    #[test]
    fn truncation_is_rejected() {
        for env in golden_messages() {
            let bytes = encode(&env);
            for cut in 0..bytes.len() {
                assert!(decode(&bytes[..cut]).is_err(), "{:?} cut at {cut}", env.message.tag());
            }
        }
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = encode(&golden_messages()[0]);
        bytes.push(0);
        assert_eq!(decode(&bytes).unwrap_err().reason, "trailing bytes");
    }

    #[test]
    fn reserved_tags_are_rejected() {
        let mut bytes = encode(&golden_messages()[0]);
        bytes[4] = 0x80;
        assert_eq!(decode(&bytes).unwrap_err().reason, "reserved variant tag");
        bytes[4] = 0x07;
        assert_eq!(decode(&bytes).unwrap_err().reason, "unknown variant tag");
        bytes[0] = b'X';
        assert_eq!(decode(&bytes).unwrap_err().reason, "bad magic");
    }

    #[test]
    fn request_layout() {
        let env = &golden_messages()[0];
        let bytes = encode(env);
        assert_eq!(&bytes[..4], b"EPSB");
        assert_eq!(bytes[4], 1);
        // site 0, addr 198.18.0.1, label "eth"
        assert_eq!(&bytes[5..16], &[0, 0, 198, 18, 0, 1, 0, 3, b'e', b't', b'h']);
    }
}
