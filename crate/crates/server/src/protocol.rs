//! Wire format: one UTF-8 JSON object per datagram or WebSocket text frame.
//!
//! Request: `{"id":N,"p1":x,"p2":y,"p3":z,"cat":c}`.
//! Reply: `{"id":N,"status":"ok","path":"..."}` over UDP, or with
//! `"samples":[...]` instead of `"path"` over the WebSocket bridge. Error
//! replies carry a human-readable `"error"` field.

use serde::{Deserialize, Serialize};

/// Datagrams and frames longer than this are rejected unparsed.
pub const MAX_MESSAGE_BYTES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlMessage {
    pub id: u64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub cat: u64,
}

impl ControlMessage {
    pub fn controls(&self) -> [f64; 3] {
        [self.p1, self.p2, self.p3]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("control messages always serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    ParseError,
    BadCategory,
    InternalError,
    Superseded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    /// Echo of the request id; absent only when the request had no readable id.
    pub id: Option<u64>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Reply {
    pub fn status(id: Option<u64>, status: Status) -> Self {
        Reply {
            id,
            status,
            path: None,
            samples: None,
            error: None,
        }
    }

    pub fn error(id: Option<u64>, status: Status, message: impl Into<String>) -> Self {
        Reply {
            error: Some(message.into()),
            ..Reply::status(id, status)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("replies always serialize")
    }
}

/// Validates a raw message against the wire contract. On failure the returned
/// reply is ready to send, echoing the id whenever one could be read.
pub fn parse_message(bytes: &[u8], n_classes: usize) -> Result<ControlMessage, Reply> {
    if bytes.len() > MAX_MESSAGE_BYTES {
        return Err(Reply::error(
            None,
            Status::ParseError,
            format!("message of {} bytes exceeds {MAX_MESSAGE_BYTES}", bytes.len()),
        ));
    }
    let value: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| Reply::error(None, Status::ParseError, e.to_string()))?;
    let id = value.get("id").and_then(serde_json::Value::as_u64);
    let msg: ControlMessage =
        serde_json::from_value(value).map_err(|e| Reply::error(id, Status::ParseError, e.to_string()))?;
    if !msg.controls().iter().all(|p| p.is_finite()) {
        return Err(Reply::error(id, Status::ParseError, "control values must be finite"));
    }
    if msg.cat >= n_classes as u64 {
        return Err(Reply::error(
            id,
            Status::BadCategory,
            format!("category {} out of range for {n_classes} classes", msg.cat),
        ));
    }
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_message_round_trips() {
        let msg = ControlMessage {
            id: 42,
            p1: 0.5,
            p2: -1.25,
            p3: 3.0,
            cat: 2,
        };
        assert_eq!(parse_message(msg.to_json().as_bytes(), 3).unwrap(), msg);
    }

    #[test]
    fn category_out_of_range() {
        let raw = br#"{"id":7,"p1":0,"p2":0,"p3":0,"cat":255}"#;
        let reply = parse_message(raw, 3).unwrap_err();
        assert_eq!(reply.status, Status::BadCategory);
        assert_eq!(reply.id, Some(7));
    }

    #[test]
    fn malformed_messages_are_parse_errors() {
        let cases: [&[u8]; 5] = [
            b"not json",
            br#"{"id":1,"p1":0,"p2":0,"cat":0}"#,
            br#"{"id":1,"p1":"a","p2":0,"p3":0,"cat":0}"#,
            br#"{"id":1,"p1":0,"p2":0,"p3":0,"cat":-1}"#,
            br#"{"id":1,"p1":1e999,"p2":0,"p3":0,"cat":0}"#,
        ];
        for raw in cases {
            let reply = parse_message(raw, 3).unwrap_err();
            assert_eq!(reply.status, Status::ParseError, "{}", String::from_utf8_lossy(raw));
        }
        assert_eq!(parse_message(cases[1], 3).unwrap_err().id, Some(1));
        assert_eq!(parse_message(cases[0], 3).unwrap_err().id, None);
    }

    #[test]
    fn oversized_message_is_rejected() {
        let pad = " ".repeat(MAX_MESSAGE_BYTES);
        let raw = format!(r#"{{"id":1,"p1":0,"p2":0,"p3":0,"cat":0}}{pad}"#);
        assert_eq!(parse_message(raw.as_bytes(), 3).unwrap_err().status, Status::ParseError);
    }

    #[test]
    fn reply_encoding_omits_empty_payloads() {
        let json = Reply::status(Some(3), Status::Superseded).to_json();
        assert_eq!(json, r#"{"id":3,"status":"superseded"}"#);
        let back: Reply = serde_json::from_str(&json).unwrap();
        assert_eq!(back, Reply::status(Some(3), Status::Superseded));
    }
}
