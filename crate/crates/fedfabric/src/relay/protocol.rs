//! Relay frame protocol.
//!
//! Every message is a length-prefixed frame (`u32` LE body length). Request
//! bodies start with a message-type byte, responses with a status byte;
//! the rest uses the same key/value and blob conventions as the reference
//! wire format.

use crate::wire::WireError;

/// Upper bound on one frame. Submissions are capped at 10 MB payloads, but
/// a fetch response may carry several descriptors.
pub const FRAME_LIMIT: usize = 128 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Register = 1,
    Submit = 2,
    Fetch = 3,
    PostResult = 4,
    GetResult = 5,
    Stats = 6,
    Pair = 7,
}

impl MessageType {
    pub fn from_code(code: u8) -> Result<Self, WireError> {
        Ok(match code {
            1 => MessageType::Register,
            2 => MessageType::Submit,
            3 => MessageType::Fetch,
            4 => MessageType::PostResult,
            5 => MessageType::GetResult,
            6 => MessageType::Stats,
            7 => MessageType::Pair,
            tag => {
                return Err(WireError::BadTag {
                    what: "relay message type",
                    tag,
                })
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    Error = 1,
    UnknownFunction = 2,
    PayloadTooLarge = 3,
    Auth = 4,
    UnknownTask = 5,
    Pending = 6,
}

impl Status {
    pub fn from_code(code: u8) -> Result<Self, WireError> {
        Ok(match code {
            0 => Status::Ok,
            1 => Status::Error,
            2 => Status::UnknownFunction,
            3 => Status::PayloadTooLarge,
            4 => Status::Auth,
            5 => Status::UnknownTask,
            6 => Status::Pending,
            tag => {
                return Err(WireError::BadTag {
                    what: "relay status",
                    tag,
                })
            }
        })
    }
}
