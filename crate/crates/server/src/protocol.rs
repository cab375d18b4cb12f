//! Stream messages. Clients send JSON text; the server sends binary position
//! frames plus JSON text notices.
//!
//! Frame layout, little-endian: `u32 frame_no`, `u32 node_count`, then
//! `node_count` pairs of `f32 x, f32 y` in subgraph node order.

use nebula_core::{SubgraphPayload, Vec2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FRAME_HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlMessage {
    Pin {
        index: usize,
        x: f64,
        y: f64,
    },
    Drag {
        index: usize,
        x: f64,
        y: f64,
    },
    Unpin {
        index: usize,
    },
    Pause,
    Resume,
    SetParams {
        #[serde(default)]
        frame_rate: Option<f64>,
        #[serde(default)]
        iters_per_frame: Option<u32>,
    },
    Expand {
        index: usize,
        hops: usize,
        cap: usize,
    },
    Close,
}

impl ControlMessage {
    /// Whether applying the message can change positions or the node list.
    pub fn moves_nodes(&self) -> bool {
        matches!(
            self,
            ControlMessage::Pin { .. }
                | ControlMessage::Drag { .. }
                | ControlMessage::Unpin { .. }
                | ControlMessage::Expand { .. }
        )
    }
}

/// A control message plus the optional client sequence number echoed in its ack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMessage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(flatten)]
    pub control: ControlMessage,
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Paused,
    Frozen,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgraphReason {
    Initial,
    Expand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    /// Current subgraph. Frames numbered `frame_no` and later use its node order.
    Subgraph {
        frame_no: u32,
        reason: SubgraphReason,
        subgraph: SubgraphPayload,
    },
    /// The message numbered `seq` has been applied; frame `frame_no` is the
    /// first to reflect it.
    Ack { seq: u64, frame_no: u32 },
    Status {
        status: SessionStatus,
        frame_no: u32,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seq: Option<u64>,
        code: String,
        message: String,
    },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

pub fn encode_frame(frame_no: u32, positions: &[Vec2]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + 8 * positions.len());
    out.extend_from_slice(&frame_no.to_le_bytes());
    out.extend_from_slice(&(positions.len() as u32).to_le_bytes());
    for p in positions {
        out.extend_from_slice(&(p.x as f32).to_le_bytes());
        out.extend_from_slice(&(p.y as f32).to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionFrame {
    pub frame_no: u32,
    pub positions: Vec<(f32, f32)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame shorter than its {FRAME_HEADER_LEN}-byte header")]
    Short,
    #[error("frame declares {node_count} nodes but carries {payload} payload bytes")]
    Length { node_count: u32, payload: usize },
}

impl PositionFrame {
    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(FrameError::Short);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let frame_no = word(0);
        let node_count = word(4);
        let payload = &bytes[FRAME_HEADER_LEN..];
        if payload.len() as u64 != 8 * node_count as u64 {
            return Err(FrameError::Length {
                node_count,
                payload: payload.len(),
            });
        }
        let positions = payload
            .chunks_exact(8)
            .map(|c| {
                (
                    f32::from_le_bytes(c[0..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..8].try_into().unwrap()),
                )
            })
            .collect();
        Ok(Self {
            frame_no,
            positions,
        })
    }

    pub fn node_count(&self) -> usize {
        self.positions.len()
    }
}
