//! Transaction records and their pipe-delimited text form.
//!
//! A record line has 13 fields:
//!
//! ```text
//! client IP|client port|server IP|server port|request ts|response ts|response time|
//! response message|response code|method|agent|host|URI
//! ```
//!
//! Timestamps and the response time are written as `<seconds>.<9 digits>`.
//! Fields missing from an unmatched record are left empty.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::net::Ipv4Addr;

use crate::http::{HttpMessage, MessageHead, Method, RequestHead, ResponseHead};
use crate::time::{CaptureTimestamp, ResponseTime};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TransactionRecord {
    pub client_ip: Ipv4Addr,
    pub client_port: u16,
    pub server_ip: Ipv4Addr,
    pub server_port: u16,
    pub request_ts: Option<CaptureTimestamp>,
    pub response_ts: Option<CaptureTimestamp>,
    pub response_time: Option<ResponseTime>,
    pub response_message: Option<String>,
    pub response_code: Option<u16>,
    pub method: Option<Method>,
    pub agent: Option<String>,
    pub host: Option<String>,
    /// Display URI: `http://<host><target>` for origin-form targets with a
    /// Host header, otherwise the raw request-target.
    pub uri: Option<String>,
    /// Request ACK number, equal to the response SEQ number.
    pub match_number: u32,
}

/// Key under which retransmission duplicates collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DedupKey {
    pub client_ip: Ipv4Addr,
    pub client_port: u16,
    pub server_ip: Ipv4Addr,
    pub server_port: u16,
    pub match_number: u32,
}

pub fn display_uri(req: &RequestHead) -> String {
    match &req.host {
        Some(host) if req.uri.starts_with('/') => {
            let mut s = String::with_capacity(7 + host.len() + req.uri.len());
            s.push_str("http://");
            s.push_str(host);
            s.push_str(&req.uri);
            s
        }
        _ => req.uri.clone(),
    }
}

impl TransactionRecord {
    /// Pairs a request with its response. Orientation follows the request.
    pub fn matched(request: &HttpMessage, response: &HttpMessage) -> Self {
        let mut rec = TransactionRecord::unmatched(request);
        if let MessageHead::Response(r) = &response.head {
            rec.fill_response(response, r);
        }
        rec.response_time = Some(response.header.ts.since(request.header.ts));
        rec
    }

    /// A record for a message whose counterpart never showed up.
    pub fn unmatched(msg: &HttpMessage) -> Self {
        let h = &msg.header;
        match &msg.head {
            MessageHead::Request(req) => TransactionRecord {
                client_ip: h.src_ip,
                client_port: h.src_port,
                server_ip: h.dst_ip,
                server_port: h.dst_port,
                request_ts: Some(h.ts),
                response_ts: None,
                response_time: None,
                response_message: None,
                response_code: None,
                method: Some(req.method),
                agent: req.agent.clone(),
                host: req.host.clone(),
                uri: Some(display_uri(req)),
                match_number: h.ack,
            },
            MessageHead::Response(resp) => {
                let mut rec = TransactionRecord {
                    client_ip: h.dst_ip,
                    client_port: h.dst_port,
                    server_ip: h.src_ip,
                    server_port: h.src_port,
                    request_ts: None,
                    response_ts: None,
                    response_time: None,
                    response_message: None,
                    response_code: None,
                    method: None,
                    agent: None,
                    host: None,
                    uri: None,
                    match_number: h.seq,
                };
                rec.fill_response(msg, resp);
                rec
            }
        }
    }

    fn fill_response(&mut self, msg: &HttpMessage, r: &ResponseHead) {
        self.response_ts = Some(msg.header.ts);
        self.response_message = r.reason.clone();
        self.response_code = Some(r.code);
    }

    pub fn is_matched(&self) -> bool {
        self.request_ts.is_some() && self.response_ts.is_some()
    }

    pub fn dedup_key(&self) -> DedupKey {
        DedupKey {
            client_ip: self.client_ip,
            client_port: self.client_port,
            server_ip: self.server_ip,
            server_port: self.server_port,
            match_number: self.match_number,
        }
    }

    /// Earliest timestamp on the record, used for output ordering.
    pub fn first_ts(&self) -> CaptureTimestamp {
        match (self.request_ts, self.response_ts) {
            (Some(a), _) => a,
            (None, Some(b)) => b,
            (None, None) => CaptureTimestamp::ZERO,
        }
    }

    /// Appends the record line (with trailing newline) to `out`.
    pub fn write_line(&self, out: &mut String) {
        fn opt<T: std::fmt::Display>(out: &mut String, v: &Option<T>) {
            if let Some(v) = v {
                let _ = write!(out, "{v}");
            }
            out.push('|');
        }
        let _ = write!(
            out,
            "{}|{}|{}|{}|",
            self.client_ip, self.client_port, self.server_ip, self.server_port
        );
        opt(out, &self.request_ts);
        opt(out, &self.response_ts);
        opt(out, &self.response_time);
        opt(out, &self.response_message);
        opt(out, &self.response_code);
        opt(out, &self.method);
        opt(out, &self.agent);
        opt(out, &self.host);
        if let Some(uri) = &self.uri {
            out.push_str(uri);
        }
        out.push('\n');
    }
}

/// Renders one record line, newline included.
pub fn format_record(rec: &TransactionRecord) -> String {
    let mut s = String::with_capacity(128);
    rec.write_line(&mut s);
    s
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordParseError {
    #[error("expected 13 fields, found {0}")]
    FieldCount(usize),
    #[error("bad value in field `{field}`: `{value}`")]
    Field { field: &'static str, value: String },
    #[error("record carries neither a request nor a response timestamp")]
    NoTimestamp,
}

/// Parses a line produced by [`format_record`]. The match number is not
/// part of the text form; it is recovered from the caller-supplied value.
pub fn parse_record_line(line: &str, match_number: u32) -> Result<TransactionRecord, RecordParseError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let fields: Vec<&str> = line.split('|').collect();
    if fields.len() != 13 {
        return Err(RecordParseError::FieldCount(fields.len()));
    }
    fn req<T: std::str::FromStr>(name: &'static str, v: &str) -> Result<T, RecordParseError> {
        v.parse().map_err(|_| RecordParseError::Field { field: name, value: v.to_string() })
    }
    fn opt<T: std::str::FromStr>(name: &'static str, v: &str) -> Result<Option<T>, RecordParseError> {
        if v.is_empty() {
            Ok(None)
        } else {
            req(name, v).map(Some)
        }
    }
    let text = |v: &str| (!v.is_empty()).then(|| v.to_string());
    let rec = TransactionRecord {
        client_ip: req("client_ip", fields[0])?,
        client_port: req("client_port", fields[1])?,
        server_ip: req("server_ip", fields[2])?,
        server_port: req("server_port", fields[3])?,
        request_ts: opt("request_ts", fields[4])?,
        response_ts: opt("response_ts", fields[5])?,
        response_time: opt("response_time", fields[6])?,
        response_message: text(fields[7]),
        response_code: opt("response_code", fields[8])?,
        method: opt("method", fields[9])?,
        agent: text(fields[10]),
        host: text(fields[11]),
        uri: text(fields[12]),
        match_number,
    };
    if rec.request_ts.is_none() && rec.response_ts.is_none() {
        return Err(RecordParseError::NoTimestamp);
    }
    Ok(rec)
}

/// Keeps the first record for each (4-tuple, match number) key.
pub fn dedup_records<I>(records: I) -> Vec<TransactionRecord>
where
    I: IntoIterator<Item = TransactionRecord>,
{
    let mut dedup = Deduplicator::default();
    records.into_iter().filter(|r| dedup.admit(r)).collect()
}

/// Streaming form of [`dedup_records`].
#[derive(Debug, Default, Clone)]
pub struct Deduplicator {
    seen: HashSet<DedupKey>,
    dropped: u64,
}

impl Deduplicator {
    /// Returns `false` if a record with the same key was already admitted.
    pub fn admit(&mut self, rec: &TransactionRecord) -> bool {
        let fresh = self.seen.insert(rec.dedup_key());
        if !fresh {
            self.dropped += 1;
        }
        fresh
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}
