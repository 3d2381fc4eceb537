//! Client handle speaking the relay frame protocol. One handle owns one
//! connection; requests on it are serialized, so roles open separate
//! handles for submission, polling, and fetching.

use std::net::TcpStream;
use std::time::Duration;

use parking_lot::Mutex;

use crate::clock::monotonic_ns;
use crate::relay::protocol::{MessageType, Status, FRAME_LIMIT};
use crate::relay::{
    EndpointId, FunctionId, FunctionRecord, RelayError, ResultEnvelope, TaskDescriptor, TaskId,
    Tier,
};
use crate::wire::{self, read_frame, write_frame, KvMap, Reader};

pub struct RelayClient {
    addr: String,
    conn: Mutex<Option<TcpStream>>,
}

/// STATS response fields.
#[derive(Debug, Clone, Copy, Default)]
pub struct RelayStats {
    pub submitted: u64,
    pub rejected: u64,
    pub queued: u64,
    pub in_flight: u64,
    pub completed: u64,
    pub functions: u64,
    pub server_time_ns: u64,
}

impl RelayClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            conn: Mutex::new(None),
        }
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn request(&self, msg_type: MessageType, content: &[u8]) -> Result<(Status, Vec<u8>), RelayError> {
        let mut body = Vec::with_capacity(content.len() + 1);
        body.push(msg_type as u8);
        body.extend_from_slice(content);

        let mut guard = self.conn.lock();
        for attempt in 0..2 {
            if guard.is_none() {
                match TcpStream::connect(&self.addr) {
                    Ok(s) => {
                        let _ = s.set_nodelay(true);
                        let _ = s.set_read_timeout(Some(Duration::from_secs(300)));
                        *guard = Some(s);
                    }
                    Err(e) => {
                        if attempt == 1 {
                            return Err(RelayError::Unreachable(e.to_string()));
                        }
                        continue;
                    }
                }
            }
            let stream = guard.as_mut().unwrap();
            let outcome = (|| -> std::io::Result<Vec<u8>> {
                write_frame(stream, &body)?;
                read_frame(stream, FRAME_LIMIT)
            })();
            match outcome {
                Ok(frame) => {
                    if frame.is_empty() {
                        return Err(RelayError::Protocol("empty response frame".into()));
                    }
                    let status = Status::from_code(frame[0])?;
                    return Ok((status, frame[1..].to_vec()));
                }
                Err(e) => {
                    *guard = None;
                    if attempt == 1 {
                        return Err(RelayError::Unreachable(e.to_string()));
                    }
                }
            }
        }
        unreachable!("request loop returns within two attempts")
    }

    fn fail(status: Status, context: &str) -> RelayError {
        match status {
            Status::UnknownFunction => RelayError::UnknownFunction(context.to_owned()),
            Status::PayloadTooLarge => RelayError::PayloadTooLarge {
                len: 0,
                max: crate::relay::MAX_PAYLOAD_BYTES,
            },
            Status::Auth => RelayError::Auth(context.to_owned()),
            Status::UnknownTask => RelayError::UnknownTask(context.to_owned()),
            s => RelayError::Protocol(format!("unexpected status {s:?} for {context}")),
        }
    }

    pub fn register_function(
        &self,
        name: &str,
        builtin: &str,
        params: &[u8],
    ) -> Result<FunctionId, RelayError> {
        let mut content = Vec::new();
        wire::put_kv_pairs(&mut content, [("name", name), ("builtin", builtin)]);
        wire::put_blob(&mut content, params);
        let (status, body) = self.request(MessageType::Register, &content)?;
        if status != Status::Ok {
            return Err(Self::fail(status, name));
        }
        let mut r = Reader::new(&body);
        let kv = KvMap::new(r.kv_pairs()?);
        Ok(FunctionId(kv.require("function_id")?.to_owned()))
    }

    /// Submit a task. The relay answers only after the payload is persisted
    /// in its tier; the assigned tier is returned.
    pub fn submit(&self, descriptor: &TaskDescriptor) -> Result<Tier, RelayError> {
        let mut content = Vec::new();
        let created = descriptor.created_ns.to_string();
        wire::put_kv_pairs(
            &mut content,
            [
                ("task_id", descriptor.task_id.0.as_str()),
                ("function_id", descriptor.function_id.0.as_str()),
                ("endpoint_id", descriptor.endpoint_id.0.as_str()),
                ("topic", descriptor.topic.as_str()),
                ("created_ns", created.as_str()),
            ],
        );
        let payload = descriptor.payload.encode();
        wire::put_blob(&mut content, &payload);
        let (status, body) = self.request(MessageType::Submit, &content)?;
        match status {
            Status::Ok => {
                let mut r = Reader::new(&body);
                let kv = KvMap::new(r.kv_pairs()?);
                Tier::parse(kv.require("tier")?).ok_or_else(|| {
                    RelayError::Protocol("missing tier in submit response".into())
                })
            }
            Status::PayloadTooLarge => Err(RelayError::PayloadTooLarge {
                len: payload.len() as u64,
                max: crate::relay::MAX_PAYLOAD_BYTES,
            }),
            s => Err(Self::fail(s, descriptor.task_id.0.as_str())),
        }
    }

    /// Long-poll for queued tasks. Returns up to `max_n` raw descriptor
    /// records in FIFO order (leased to this endpoint) together with the
    /// function bodies used by the batch.
    pub fn fetch_tasks_raw(
        &self,
        endpoint_id: &EndpointId,
        token_hex: &str,
        max_n: usize,
        timeout_ms: u64,
    ) -> Result<(Vec<Vec<u8>>, Vec<FunctionRecord>), RelayError> {
        let mut content = Vec::new();
        let max_n = max_n.to_string();
        let timeout = timeout_ms.to_string();
        wire::put_kv_pairs(
            &mut content,
            [
                ("endpoint_id", endpoint_id.0.as_str()),
                ("token", token_hex),
                ("max_n", max_n.as_str()),
                ("timeout_ms", timeout.as_str()),
            ],
        );
        let (status, body) = self.request(MessageType::Fetch, &content)?;
        if status != Status::Ok {
            return Err(Self::fail(status, endpoint_id.0.as_str()));
        }
        let mut r = Reader::new(&body);
        let n = r.u16()? as usize;
        let mut tasks = Vec::with_capacity(n);
        for _ in 0..n {
            tasks.push(r.blob()?.to_vec());
        }
        let fn_count = r.u16()? as usize;
        let mut records = Vec::with_capacity(fn_count);
        for _ in 0..fn_count {
            let kv = KvMap::new(r.kv_pairs()?);
            let params = r.blob()?.to_vec();
            records.push(FunctionRecord {
                function_id: FunctionId(kv.require("function_id")?.to_owned()),
                name: kv.require("name")?.to_owned(),
                builtin: kv.require("builtin")?.to_owned(),
                params,
            });
        }
        Ok((tasks, records))
    }

    /// Decoded convenience form of [`Self::fetch_tasks_raw`].
    pub fn fetch_tasks(
        &self,
        endpoint_id: &EndpointId,
        token_hex: &str,
        max_n: usize,
        timeout_ms: u64,
    ) -> Result<Vec<TaskDescriptor>, RelayError> {
        let (raw, _) = self.fetch_tasks_raw(endpoint_id, token_hex, max_n, timeout_ms)?;
        raw.iter()
            .map(|b| TaskDescriptor::decode(b).map_err(RelayError::from))
            .collect()
    }

    /// Post one result. Returns true when this was a duplicate and the
    /// first-posted result was kept.
    pub fn post_result(
        &self,
        endpoint_id: &EndpointId,
        token_hex: &str,
        envelope: &ResultEnvelope,
    ) -> Result<bool, RelayError> {
        let mut content = Vec::new();
        let payload_len = envelope.payload.encoded_len().to_string();
        wire::put_kv_pairs(
            &mut content,
            [
                ("endpoint_id", endpoint_id.0.as_str()),
                ("token", token_hex),
                ("task_id", envelope.task_id.0.as_str()),
                ("payload_len", payload_len.as_str()),
            ],
        );
        wire::put_blob(&mut content, &envelope.encode());
        let (status, body) = self.request(MessageType::PostResult, &content)?;
        if status != Status::Ok {
            return Err(Self::fail(status, envelope.task_id.0.as_str()));
        }
        let mut r = Reader::new(&body);
        let kv = KvMap::new(r.kv_pairs()?);
        Ok(kv.get("duplicate") == Some("1"))
    }

    /// Long-poll for a task's result; `Ok(None)` means still pending at the
    /// timeout.
    pub fn get_result(
        &self,
        task_id: &TaskId,
        timeout_ms: u64,
    ) -> Result<Option<ResultEnvelope>, RelayError> {
        let mut content = Vec::new();
        let timeout = timeout_ms.to_string();
        wire::put_kv_pairs(
            &mut content,
            [
                ("task_id", task_id.0.as_str()),
                ("timeout_ms", timeout.as_str()),
            ],
        );
        let (status, body) = self.request(MessageType::GetResult, &content)?;
        match status {
            Status::Ok => {
                let mut r = Reader::new(&body);
                Ok(Some(ResultEnvelope::decode(r.blob()?)?))
            }
            Status::Pending => Ok(None),
            s => Err(Self::fail(s, task_id.0.as_str())),
        }
    }

    pub fn stats(&self) -> Result<RelayStats, RelayError> {
        let (status, body) = self.request(MessageType::Stats, &[])?;
        if status != Status::Ok {
            return Err(Self::fail(status, "stats"));
        }
        let mut r = Reader::new(&body);
        let kv = KvMap::new(r.kv_pairs()?);
        Ok(RelayStats {
            submitted: kv.require_u64("submitted")?,
            rejected: kv.require_u64("rejected")?,
            queued: kv.require_u64("queued")?,
            in_flight: kv.require_u64("in_flight")?,
            completed: kv.require_u64("completed")?,
            functions: kv.require_u64("functions")?,
            server_time_ns: kv.require_u64("server_time_ns")?,
        })
    }

    /// Pair an endpoint, receiving the 32-byte token presented on every
    /// fetch and post.
    pub fn pair(&self, endpoint_id: &EndpointId) -> Result<String, RelayError> {
        let mut content = Vec::new();
        wire::put_kv_pairs(&mut content, [("endpoint_id", endpoint_id.0.as_str())]);
        let (status, body) = self.request(MessageType::Pair, &content)?;
        if status != Status::Ok {
            return Err(Self::fail(status, endpoint_id.0.as_str()));
        }
        let mut r = Reader::new(&body);
        let kv = KvMap::new(r.kv_pairs()?);
        Ok(kv.require("token")?.to_owned())
    }

    /// NTP-style offset estimate (relay clock minus local clock) from
    /// `probes` STATS ping-pongs; the median filters scheduling outliers.
    pub fn measure_clock_offset(&self, probes: usize) -> Result<i64, RelayError> {
        let mut offsets = Vec::with_capacity(probes);
        for _ in 0..probes.max(1) {
            let t0 = monotonic_ns() as i64;
            let stats = self.stats()?;
            let t1 = monotonic_ns() as i64;
            offsets.push(stats.server_time_ns as i64 - (t0 + t1) / 2);
        }
        offsets.sort_unstable();
        Ok(offsets[offsets.len() / 2])
    }
}
