use std::fmt;

use rand::{Rng, RngCore};

use crate::field::bytes::{self, Reader};
use crate::field::FieldError;
use crate::netsim::{NodeId, WireMessage};

pub type Digest = [u8; 32];

/// A replica's initial proposal: the requests it collected for a slot,
/// sorted by sender, one per sender.
pub type Proposal = Vec<(NodeId, Vec<u8>)>;

pub const TAG_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum Kind {
    Request = 1,
    PrePropose = 2,
    PrePrepare = 3,
    Prepare = 4,
    Commit = 5,
    ViewChange = 6,
    NewView = 7,
}

impl Kind {
    fn from_u8(b: u8) -> Option<Kind> {
        Some(match b {
            1 => Kind::Request,
            2 => Kind::PrePropose,
            3 => Kind::PrePrepare,
            4 => Kind::Prepare,
            5 => Kind::Commit,
            6 => Kind::ViewChange,
            7 => Kind::NewView,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Kind::Request => "REQUEST",
            Kind::PrePropose => "PRE-PROPOSE",
            Kind::PrePrepare => "PRE-PREPARE",
            Kind::Prepare => "PREPARE",
            Kind::Commit => "COMMIT",
            Kind::ViewChange => "VIEW-CHANGE",
            Kind::NewView => "NEW-VIEW",
        }
    }
}

/// Evidence that a digest was prepared in some view: the PRE-PREPARE plus
/// either 2f+1 PREPAREs or f+1 COMMITs for it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Certificate {
    pub pre_prepare: ConsensusMessage,
    pub votes: Vec<ConsensusMessage>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    Request(Vec<u8>),
    PrePropose(Proposal),
    PrePrepare {
        digest: Digest,
        proposals: Vec<ConsensusMessage>,
    },
    Prepare(Digest),
    Commit(Digest),
    /// The message's view field is the view being moved to.
    ViewChange(Vec<Certificate>),
    NewView {
        view_changes: Vec<ConsensusMessage>,
        pre_prepares: Vec<ConsensusMessage>,
    },
}

impl Payload {
    pub fn kind(&self) -> Kind {
        match self {
            Payload::Request(_) => Kind::Request,
            Payload::PrePropose(_) => Kind::PrePropose,
            Payload::PrePrepare { .. } => Kind::PrePrepare,
            Payload::Prepare(_) => Kind::Prepare,
            Payload::Commit(_) => Kind::Commit,
            Payload::ViewChange(_) => Kind::ViewChange,
            Payload::NewView { .. } => Kind::NewView,
        }
    }

    /// Digest carried by PRE-PREPARE, PREPARE and COMMIT.
    pub fn digest(&self) -> Option<&Digest> {
        match self {
            Payload::PrePrepare { digest, .. } | Payload::Prepare(digest) | Payload::Commit(digest) => Some(digest),
            _ => None,
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Payload::Request(req) => out.extend_from_slice(req),
            Payload::PrePropose(prop) => encode_proposal(prop, out),
            Payload::PrePrepare { digest, proposals } => {
                out.extend_from_slice(digest);
                encode_messages(proposals, out);
            }
            Payload::Prepare(d) | Payload::Commit(d) => out.extend_from_slice(d),
            Payload::ViewChange(certs) => {
                bytes::put_u32(out, certs.len() as u32);
                for c in certs {
                    bytes::put_bytes(out, &c.pre_prepare.encode());
                    encode_messages(&c.votes, out);
                }
            }
            Payload::NewView {
                view_changes,
                pre_prepares,
            } => {
                encode_messages(view_changes, out);
                encode_messages(pre_prepares, out);
            }
        }
    }

    fn decode(kind: Kind, input: &[u8]) -> Result<Payload, FieldError> {
        if kind == Kind::Request {
            return Ok(Payload::Request(input.to_vec()));
        }
        let mut r = Reader::new(input);
        let p = match kind {
            Kind::Request => unreachable!(),
            Kind::PrePropose => Payload::PrePropose(decode_proposal(&mut r)?),
            Kind::PrePrepare => {
                let digest = read_digest(&mut r)?;
                Payload::PrePrepare {
                    digest,
                    proposals: decode_messages(&mut r)?,
                }
            }
            Kind::Prepare => Payload::Prepare(read_digest(&mut r)?),
            Kind::Commit => Payload::Commit(read_digest(&mut r)?),
            Kind::ViewChange => {
                let count = r.u32()? as usize;
                let mut certs = Vec::with_capacity(count.min(1024));
                for _ in 0..count {
                    let pre_prepare = ConsensusMessage::decode(r.bytes()?)?;
                    let votes = decode_messages(&mut r)?;
                    certs.push(Certificate { pre_prepare, votes });
                }
                Payload::ViewChange(certs)
            }
            Kind::NewView => Payload::NewView {
                view_changes: decode_messages(&mut r)?,
                pre_prepares: decode_messages(&mut r)?,
            },
        };
        r.finish()?;
        Ok(p)
    }
}

fn read_digest(r: &mut Reader<'_>) -> Result<Digest, FieldError> {
    let mut d = [0u8; 32];
    d.copy_from_slice(r.fixed(32)?);
    Ok(d)
}

fn encode_proposal(prop: &Proposal, out: &mut Vec<u8>) {
    bytes::put_u32(out, prop.len() as u32);
    for (sender, req) in prop {
        bytes::put_u32(out, *sender);
        bytes::put_bytes(out, req);
    }
}

fn decode_proposal(r: &mut Reader<'_>) -> Result<Proposal, FieldError> {
    let count = r.u32()? as usize;
    let mut prop = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let sender = r.u32()?;
        prop.push((sender, r.bytes()?.to_vec()));
    }
    Ok(prop)
}

fn encode_messages(msgs: &[ConsensusMessage], out: &mut Vec<u8>) {
    bytes::put_u32(out, msgs.len() as u32);
    for m in msgs {
        bytes::put_bytes(out, &m.encode());
    }
}

fn decode_messages(r: &mut Reader<'_>) -> Result<Vec<ConsensusMessage>, FieldError> {
    let count = r.u32()? as usize;
    let mut msgs = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        msgs.push(ConsensusMessage::decode(r.bytes()?)?);
    }
    Ok(msgs)
}

#[derive(Clone, PartialEq, Eq)]
pub struct ConsensusMessage {
    pub view: u64,
    pub seq: u64,
    pub sender: NodeId,
    pub payload: Payload,
    pub tag: [u8; TAG_LEN],
}

impl ConsensusMessage {
    pub fn kind(&self) -> Kind {
        self.payload.kind()
    }

    /// Bytes covered by the authentication tag:
    /// kind || view || seq || sender || length-prefixed payload.
    pub fn signed_bytes(&self) -> Vec<u8> {
        signed_bytes(self.view, self.seq, self.sender, &self.payload)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.signed_bytes();
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn decode(input: &[u8]) -> Result<ConsensusMessage, FieldError> {
        let mut r = Reader::new(input);
        let kind = Kind::from_u8(r.u8()?).ok_or(FieldError::Malformed("unknown message kind"))?;
        let view = r.u64()?;
        let seq = r.u64()?;
        let sender = r.u32()?;
        let payload = Payload::decode(kind, r.bytes()?)?;
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(r.fixed(TAG_LEN)?);
        r.finish()?;
        Ok(ConsensusMessage {
            view,
            seq,
            sender,
            payload,
            tag,
        })
    }
}

pub(crate) fn signed_bytes(view: u64, seq: u64, sender: NodeId, payload: &Payload) -> Vec<u8> {
    let mut body = Vec::new();
    payload.encode(&mut body);
    let mut out = Vec::with_capacity(body.len() + 25);
    bytes::put_u8(&mut out, payload.kind() as u8);
    bytes::put_u64(&mut out, view);
    bytes::put_u64(&mut out, seq);
    bytes::put_u32(&mut out, sender);
    bytes::put_bytes(&mut out, &body);
    out
}

fn short(d: &Digest) -> String {
    d[..4].iter().map(|b| format!("{b:02x}")).collect()
}

impl fmt::Debug for ConsensusMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.summary())
    }
}

impl WireMessage for ConsensusMessage {
    fn summary(&self) -> String {
        let head = format!(
            "{} v={} sq={} from={}",
            self.kind().name(),
            self.view,
            self.seq,
            self.sender
        );
        match &self.payload {
            Payload::Request(r) => format!("{head} len={}", r.len()),
            Payload::PrePropose(p) => format!("{head} requests={}", p.len()),
            Payload::PrePrepare { digest, proposals } => {
                format!("{head} d={} proposals={}", short(digest), proposals.len())
            }
            Payload::Prepare(d) | Payload::Commit(d) => format!("{head} d={}", short(d)),
            Payload::ViewChange(c) => format!("{head} certs={}", c.len()),
            Payload::NewView {
                view_changes,
                pre_prepares,
            } => format!("{head} vcs={} reissued={}", view_changes.len(), pre_prepares.len()),
        }
    }

    /// Flips one bit of the payload (or the view when the payload is empty)
    /// and keeps the original tag.
    fn tampered(&self, rng: &mut dyn RngCore) -> Option<Self> {
        let mut m = self.clone();
        match &mut m.payload {
            Payload::Request(r) if !r.is_empty() => {
                let i = rng.gen_range(0..r.len());
                r[i] ^= 1;
            }
            Payload::PrePrepare { digest, .. } | Payload::Prepare(digest) | Payload::Commit(digest) => {
                digest[rng.gen_range(0..32)] ^= 1;
            }
            _ => m.view ^= 1,
        }
        Some(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(view: u64, seq: u64, sender: NodeId, payload: Payload) -> ConsensusMessage {
        ConsensusMessage {
            view,
            seq,
            sender,
            payload,
            tag: [7; 32],
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let m = msg(1, 2, 3, Payload::Prepare([9; 32]));
        let b = m.encode();
        assert_eq!(b[0], Kind::Prepare as u8);
        assert_eq!(&b[1..9], &1u64.to_be_bytes());
        assert_eq!(&b[9..17], &2u64.to_be_bytes());
        assert_eq!(&b[17..21], &3u32.to_be_bytes());
        assert_eq!(&b[21..25], &32u32.to_be_bytes());
        assert_eq!(&b[25..57], &[9; 32]);
        assert_eq!(&b[57..], &[7; 32]);
    }

    #[test]
    fn nested_roundtrip() {
        let prop = msg(0, 4, 1, Payload::PrePropose(vec![(0, b"a".to_vec()), (2, vec![])]));
        let pp = msg(
            0,
            4,
            0,
            Payload::PrePrepare {
                digest: [1; 32],
                proposals: vec![prop.clone(), prop],
            },
        );
        let vc = msg(
            1,
            0,
            2,
            Payload::ViewChange(vec![Certificate {
                pre_prepare: pp.clone(),
                votes: vec![msg(0, 4, 3, Payload::Commit([1; 32]))],
            }]),
        );
        let nv = msg(
            1,
            0,
            1,
            Payload::NewView {
                view_changes: vec![vc],
                pre_prepares: vec![pp],
            },
        );
        for m in [nv.clone(), msg(0, 0, 0, Payload::Request(vec![]))] {
            assert_eq!(ConsensusMessage::decode(&m.encode()).unwrap(), m);
        }
        let mut bad = nv.encode();
        bad.push(0);
        assert!(ConsensusMessage::decode(&bad).is_err());
        assert!(ConsensusMessage::decode(&[0u8; 40]).is_err());
    }
}
