//! Binary wire protocol: length-prefixed frames over a reliable ordered
//! byte stream.
//!
//! Frame layout (all integers big-endian):
//!
//! ```text
//! u32 payload length | u8 type | u64 session | u32 seq | payload
//! ```
//!
//! Payloads:
//! - `HELLO (1)`: u16 prompt length, then u32 per prompt token. Registers the
//!   session's initial context with the server.
//! - `VERIFY_REQ (2)`: u32 base_context_len, u16 node count, then per node
//!   u32 parent index (`0xFFFF_FFFF` marks a root child), u32 token,
//!   f32 log-probability. Node order is parent-before-child.
//! - `VERIFY_RESP (3)`: u16 accepted length, u32 per accepted token,
//!   u32 bonus token. `seq` echoes the request it answers.
//! - `BYE (4)`: empty.
//!
//! Message seq is strictly increasing per session per direction. Everything a
//! tree needs that is not on the wire (cumulative log-probabilities, depths)
//! is recomputed on decode, so encode/decode round-trips exactly.

use std::io::Read;

use crate::draft::{DraftNode, DraftTree, ROOT_PARENT};
use crate::error::{Error, Result};
use crate::lm::TokenId;

pub const MSG_HELLO: u8 = 1;
pub const MSG_VERIFY_REQ: u8 = 2;
pub const MSG_VERIFY_RESP: u8 = 3;
pub const MSG_BYE: u8 = 4;

/// Frame header: length prefix + type + session + seq.
pub const HEADER_LEN: usize = 4 + 1 + 8 + 4;

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello {
        session: u64,
        seq: u32,
        prompt: Vec<TokenId>,
    },
    VerifyReq {
        session: u64,
        seq: u32,
        tree: DraftTree,
    },
    VerifyResp {
        session: u64,
        seq: u32,
        accepted: Vec<TokenId>,
        bonus: TokenId,
    },
    Bye {
        session: u64,
        seq: u32,
    },
}

impl WireMessage {
    pub fn session(&self) -> u64 {
        match self {
            WireMessage::Hello { session, .. }
            | WireMessage::VerifyReq { session, .. }
            | WireMessage::VerifyResp { session, .. }
            | WireMessage::Bye { session, .. } => *session,
        }
    }

    pub fn seq(&self) -> u32 {
        match self {
            WireMessage::Hello { seq, .. }
            | WireMessage::VerifyReq { seq, .. }
            | WireMessage::VerifyResp { seq, .. }
            | WireMessage::Bye { seq, .. } => *seq,
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Decode(format!("{field}: truncated")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_be_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn finish(&self, field: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Decode(format!(
                "{field}: {} trailing byte(s)",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Tree payload, exactly the VERIFY_REQ payload bytes.
pub fn serialize_tree(tree: &DraftTree) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 12 * tree.len());
    out.extend_from_slice(&tree.base_context_len.to_be_bytes());
    out.extend_from_slice(&(tree.len() as u16).to_be_bytes());
    for node in &tree.nodes {
        out.extend_from_slice(&node.parent.to_be_bytes());
        out.extend_from_slice(&node.token.to_be_bytes());
        out.extend_from_slice(&node.logprob.to_be_bytes());
    }
    out
}

/// Inverse of [`serialize_tree`]; recomputes depths and cumulative
/// log-probabilities and validates parent ordering.
pub fn deserialize_tree(payload: &[u8]) -> Result<DraftTree> {
    let mut r = Reader::new(payload);
    let base_context_len = r.u32("base_context_len")?;
    let count = r.u16("node count")? as usize;
    let mut nodes: Vec<DraftNode> = Vec::with_capacity(count);
    for i in 0..count {
        let parent = r.u32("parent")?;
        let token = r.u32("token")?;
        let logprob = r.f32("logprob")?;
        if parent != ROOT_PARENT && parent as usize >= i {
            return Err(Error::Decode(format!(
                "parent: node {i} references {parent}, not an earlier node"
            )));
        }
        let (pcum, pdepth) = if parent == ROOT_PARENT {
            (0.0, 0)
        } else {
            let p = &nodes[parent as usize];
            (p.cum_logprob, p.depth)
        };
        nodes.push(DraftNode {
            token,
            parent,
            logprob,
            cum_logprob: pcum + logprob as f64,
            depth: pdepth + 1,
        });
    }
    r.finish("node count")?;
    Ok(DraftTree {
        base_context_len,
        nodes,
    })
}

/// Encodes a message as one frame, length prefix included.
pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let (kind, payload): (u8, Vec<u8>) = match msg {
        WireMessage::Hello { prompt, .. } => {
            let mut p = Vec::with_capacity(2 + 4 * prompt.len());
            p.extend_from_slice(&(prompt.len() as u16).to_be_bytes());
            for t in prompt {
                p.extend_from_slice(&t.to_be_bytes());
            }
            (MSG_HELLO, p)
        }
        WireMessage::VerifyReq { tree, .. } => (MSG_VERIFY_REQ, serialize_tree(tree)),
        WireMessage::VerifyResp {
            accepted, bonus, ..
        } => {
            let mut p = Vec::with_capacity(2 + 4 * accepted.len() + 4);
            p.extend_from_slice(&(accepted.len() as u16).to_be_bytes());
            for t in accepted {
                p.extend_from_slice(&t.to_be_bytes());
            }
            p.extend_from_slice(&bonus.to_be_bytes());
            (MSG_VERIFY_RESP, p)
        }
        WireMessage::Bye { .. } => (MSG_BYE, Vec::new()),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.push(kind);
    out.extend_from_slice(&msg.session().to_be_bytes());
    out.extend_from_slice(&msg.seq().to_be_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Decodes one complete frame (length prefix included).
pub fn decode(frame: &[u8]) -> Result<WireMessage> {
    let mut r = Reader::new(frame);
    let payload_len = r.u32("payload length")? as usize;
    if frame.len() != HEADER_LEN + payload_len {
        return Err(Error::Decode(format!(
            "payload length: header says {payload_len}, frame has {}",
            frame.len().saturating_sub(HEADER_LEN)
        )));
    }
    let kind = r.u8("type")?;
    let session = r.u64("session")?;
    let seq = r.u32("seq")?;
    let payload = &frame[HEADER_LEN..];
    match kind {
        MSG_HELLO => {
            let mut p = Reader::new(payload);
            let len = p.u16("prompt length")? as usize;
            let mut prompt = Vec::with_capacity(len);
            for _ in 0..len {
                prompt.push(p.u32("prompt token")?);
            }
            p.finish("prompt length")?;
            Ok(WireMessage::Hello {
                session,
                seq,
                prompt,
            })
        }
        MSG_VERIFY_REQ => Ok(WireMessage::VerifyReq {
            session,
            seq,
            tree: deserialize_tree(payload)?,
        }),
        MSG_VERIFY_RESP => {
            let mut p = Reader::new(payload);
            let len = p.u16("accepted_len")? as usize;
            let mut accepted = Vec::with_capacity(len);
            for _ in 0..len {
                accepted.push(p.u32("accepted token")?);
            }
            let bonus = p.u32("bonus")?;
            p.finish("accepted_len")?;
            Ok(WireMessage::VerifyResp {
                session,
                seq,
                accepted,
                bonus,
            })
        }
        MSG_BYE => {
            Reader::new(payload).finish("payload length")?;
            Ok(WireMessage::Bye { session, seq })
        }
        other => Err(Error::Decode(format!("type: unknown message type {other}"))),
    }
}

/// Reads one frame from a blocking stream. `Ok(None)` on clean EOF at a
/// frame boundary.
pub fn read_frame(stream: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len_buf = [0u8; 4];
    match stream.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let payload_len = u32::from_be_bytes(len_buf) as usize;
    let mut rest = vec![0u8; HEADER_LEN - 4 + payload_len];
    stream
        .read_exact(&mut rest)
        .map_err(|_| Error::Decode("payload length: truncated frame".into()))?;
    let mut frame = Vec::with_capacity(HEADER_LEN + payload_len);
    frame.extend_from_slice(&len_buf);
    frame.extend_from_slice(&rest);
    Ok(Some(frame))
}

/// Enforces strictly increasing message seq for one session direction.
#[derive(Debug, Default)]
pub struct SeqTracker {
    last: Option<u32>,
}

impl SeqTracker {
    pub fn check(&mut self, seq: u32) -> Result<()> {
        if let Some(last) = self.last {
            if seq <= last {
                return Err(Error::Decode(format!(
                    "seq: regression from {last} to {seq}"
                )));
            }
        }
        self.last = Some(seq);
        Ok(())
    }
}
