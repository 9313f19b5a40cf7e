//! First-packet HTTP head classification.
//!
//! Only the bytes of a single TCP segment are examined: there is no
//! continuation across packets, so long request lines are cut where the
//! segment ends and stored URIs are bounded by [`MAX_URI_LEN`].

use std::fmt;
use std::str::FromStr;

use crate::packet::{PacketHeader, PacketView};

/// Longest request-target kept from a first packet.
pub const MAX_URI_LEN: usize = 1455;
/// Longest User-Agent value kept.
pub const MAX_AGENT_LEN: usize = 64;

/// Request methods recognised at the start of a payload, in the fixed order
/// used by reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Get,
    Post,
    Head,
    Put,
    Delete,
    Options,
    Trace,
    Connect,
    Patch,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Get,
        Method::Post,
        Method::Head,
        Method::Put,
        Method::Delete,
        Method::Options,
        Method::Trace,
        Method::Connect,
        Method::Patch,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Head => "HEAD",
            Method::Put => "PUT",
            Method::Delete => "DELETE",
            Method::Options => "OPTIONS",
            Method::Trace => "TRACE",
            Method::Connect => "CONNECT",
            Method::Patch => "PATCH",
        }
    }

    pub const fn index(self) -> usize {
        self as usize
    }

    /// Matches `<TOKEN> ` at the start of `payload`.
    fn from_prefix(payload: &[u8]) -> Option<Method> {
        Method::ALL.into_iter().find(|m| {
            let tok = m.as_str().as_bytes();
            payload.len() > tok.len() && payload.starts_with(tok) && payload[tok.len()] == b' '
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown HTTP method `{0}`")]
pub struct UnknownMethod(pub String);

impl FromStr for Method {
    type Err = UnknownMethod;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Request,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestHead {
    pub method: Method,
    /// Request-target as seen on the wire, at most [`MAX_URI_LEN`] bytes.
    pub uri: String,
    pub host: Option<String>,
    pub agent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseHead {
    /// Always within `100..=599`.
    pub code: u16,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MessageHead {
    Request(RequestHead),
    Response(ResponseHead),
}

/// The head of an HTTP message extracted from its first packet. The payload
/// itself is not retained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpMessage {
    pub header: PacketHeader,
    pub head: MessageHead,
}

impl HttpMessage {
    pub fn kind(&self) -> MessageKind {
        match self.head {
            MessageHead::Request(_) => MessageKind::Request,
            MessageHead::Response(_) => MessageKind::Response,
        }
    }

    pub fn request(&self) -> Option<&RequestHead> {
        match &self.head {
            MessageHead::Request(r) => Some(r),
            MessageHead::Response(_) => None,
        }
    }

    pub fn response(&self) -> Option<&ResponseHead> {
        match &self.head {
            MessageHead::Response(r) => Some(r),
            MessageHead::Request(_) => None,
        }
    }

    /// The TCP number that ties a request to its response: the request's
    /// acknowledgment number or the response's sequence number.
    pub fn match_number(&self) -> u32 {
        match self.head {
            MessageHead::Request(_) => self.header.ack,
            MessageHead::Response(_) => self.header.seq,
        }
    }
}

/// Cheap prefix test used to filter packets before full head extraction.
pub fn peek_kind(payload: &[u8]) -> Option<MessageKind> {
    if payload.starts_with(b"HTTP/") {
        Some(MessageKind::Response)
    } else if Method::from_prefix(payload).is_some() {
        Some(MessageKind::Request)
    } else {
        None
    }
}

/// Classifies a decoded packet as the first packet of an HTTP request or
/// response. Returns `None` for anything else, including request or status
/// lines that are malformed after the prefix matched.
pub fn classify_http(pkt: &PacketView<'_>) -> Option<HttpMessage> {
    let payload = pkt.payload;
    let head = if payload.starts_with(b"HTTP/") {
        MessageHead::Response(parse_status_line(payload)?)
    } else {
        let method = Method::from_prefix(payload)?;
        MessageHead::Request(parse_request(method, payload)?)
    };
    Some(HttpMessage { header: pkt.header, head })
}

fn parse_request(method: Method, payload: &[u8]) -> Option<RequestHead> {
    let rest = &payload[method.as_str().len() + 1..];
    let target_len = rest
        .iter()
        .position(|&b| b == b' ' || b == b'\r' || b == b'\n')
        .unwrap_or(rest.len());
    if target_len == 0 {
        return None;
    }
    let target = &rest[..target_len];
    if target.iter().any(|&b| b < 0x20 || b == 0x7F) {
        return None;
    }
    let after = &rest[target_len..];
    if let Some(version) = after.strip_prefix(b" ") {
        // The version may be cut by the end of the segment.
        let n = version.len().min(5);
        if version[..n] != b"HTTP/"[..n] {
            return None;
        }
    }

    let uri = text(&target[..target.len().min(MAX_URI_LEN)], MAX_URI_LEN);
    let mut host = None;
    let mut agent = None;
    for line in header_lines(after) {
        let Some(colon) = line.iter().position(|&b| b == b':') else {
            continue;
        };
        let (name, value) = (&line[..colon], trim(&line[colon + 1..]));
        if host.is_none() && name.eq_ignore_ascii_case(b"host") {
            host = Some(text(value, usize::MAX));
        } else if agent.is_none() && name.eq_ignore_ascii_case(b"user-agent") {
            agent = Some(text(value, MAX_AGENT_LEN));
        }
        if host.is_some() && agent.is_some() {
            break;
        }
    }
    Some(RequestHead { method, uri, host, agent })
}

fn parse_status_line(payload: &[u8]) -> Option<ResponseHead> {
    let rest = &payload[5..];
    let version_len = rest.iter().position(|&b| b == b' ')?;
    let version = &rest[..version_len];
    if version.is_empty() || !version.iter().all(|&b| b.is_ascii_digit() || b == b'.') {
        return None;
    }
    let rest = &rest[version_len + 1..];
    if rest.len() < 3 || !rest[..3].iter().all(u8::is_ascii_digit) {
        return None;
    }
    let code = rest[..3].iter().fold(0u16, |acc, &d| acc * 10 + u16::from(d - b'0'));
    if !(100..=599).contains(&code) {
        return None;
    }
    let rest = &rest[3..];
    let reason = match rest.first() {
        None | Some(b'\r') | Some(b'\n') => None,
        Some(b' ') => {
            let end = rest
                .iter()
                .position(|&b| b == b'\r' || b == b'\n')
                .unwrap_or(rest.len());
            let r = trim(&rest[1..end]);
            (!r.is_empty()).then(|| text(r, usize::MAX))
        }
        Some(_) => return None,
    };
    Some(ResponseHead { code, reason })
}

/// Complete header lines following the start line, up to the blank line.
/// A line cut by the end of the segment is not returned.
fn header_lines(after_target: &[u8]) -> impl Iterator<Item = &[u8]> {
    let start = after_target
        .iter()
        .position(|&b| b == b'\n')
        .map_or(after_target.len(), |p| p + 1);
    let mut rest = &after_target[start..];
    std::iter::from_fn(move || {
        let nl = rest.iter().position(|&b| b == b'\n')?;
        let mut line = &rest[..nl];
        rest = &rest[nl + 1..];
        if let Some(l) = line.strip_suffix(b"\r") {
            line = l;
        }
        if line.is_empty() {
            rest = &[];
            return None;
        }
        Some(line)
    })
}

fn trim(b: &[u8]) -> &[u8] {
    let start = b.iter().position(|c| !c.is_ascii_whitespace()).unwrap_or(b.len());
    let end = b.iter().rposition(|c| !c.is_ascii_whitespace()).map_or(start, |p| p + 1);
    &b[start..end]
}

/// Lossy UTF-8 text with the record delimiter percent-encoded, cut to at
/// most `max_chars` characters.
fn text(bytes: &[u8], max_chars: usize) -> String {
    let s = String::from_utf8_lossy(bytes);
    let mut out = String::with_capacity(s.len().min(max_chars));
    for (n, c) in s.chars().enumerate() {
        if n >= max_chars {
            break;
        }
        if c == '|' {
            out.push_str("%7C");
        } else {
            out.push(c);
        }
    }
    // Encoding may have grown the string past the bound.
    if out.len() > max_chars && max_chars < usize::MAX {
        let cut = out.char_indices().nth(max_chars).map_or(out.len(), |(i, _)| i);
        out.truncate(cut);
    }
    out
}
