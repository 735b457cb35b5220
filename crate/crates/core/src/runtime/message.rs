use serde::{Deserialize, Serialize};

use super::consensus::PauseRecord;
use crate::error::Result;
use crate::tensor::Pos;

/// Notification of an accepted update near a sub-domain border.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateMessage {
    pub atom: usize,
    /// Global coordinates.
    pub pos: Pos,
    pub delta: f64,
    pub origin: usize,
    /// Per-origin sequence number, starting at 1.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AbortReason {
    Diverged { worker: usize, value: f64, threshold: f64 },
    IterationLimit { worker: usize },
    Timeout,
    Protocol { worker: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlMessage {
    /// The sender is paused; carries its message counters at that moment.
    PauseAnnounce(PauseRecord),
    GlobalDone,
    Abort(AbortReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    Update(UpdateMessage),
    Control(ControlMessage),
}

/// Reliable point-to-point delivery, FIFO per sender and receiver.
pub trait Transport {
    fn send(&mut self, from: usize, to: usize, msg: Message) -> Result<()>;
}

/// Messages produced by one worker step, addressed by receiver.
pub type Outbox = Vec<(usize, Message)>;
