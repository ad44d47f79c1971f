//! Length-prefixed JSON framing: a 4-byte big-endian payload length, then
//! the UTF-8 JSON message.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME: u32 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Done,
    Failed,
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Submit {
        task: String,
        samples: Vec<Vec<f64>>,
        conditions: Vec<i64>,
    },
    Ack {
        uuid: String,
    },
    Fetch {
        uuid: String,
        wait_ms: u64,
    },
    Result {
        uuid: String,
        status: Status,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        rewards: Option<Vec<f64>>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        reason: Option<String>,
    },
    Error {
        reason: String,
    },
    Shutdown,
}

pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(msg)?;
    let len = u32::try_from(body.len())
        .ok()
        .filter(|l| *l <= MAX_FRAME)
        .ok_or_else(|| Error::Protocol(format!("frame of {} bytes too large", body.len())))?;
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` on a clean end-of-stream before the header.
pub fn read_message(r: &mut impl Read) -> Result<Option<Message>> {
    let mut header = [0u8; 4];
    match r.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(header);
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body)
        .map_err(|e| Error::Protocol(format!("bad message: {e}")))
        .map(Some)
}
