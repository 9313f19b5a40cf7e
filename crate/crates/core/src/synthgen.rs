//! Synthetic HTTP traces with known ground truth, plus a brute-force
//! reference matcher.
//!
//! Transactions run over persistent TCP flows with random ISNs. Each flow
//! carries its transactions one after another, advancing seq/ack by the full
//! message lengths, while only the first packet of each message (and the
//! request body after a `100 Continue`) is written to the capture.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::io;
use std::net::Ipv4Addr;
use std::sync::Arc;
use std::time::Duration;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Zipf};

use crate::http::{classify_http, HttpMessage, MessageKind, Method, MAX_AGENT_LEN, MAX_URI_LEN};
use crate::packet::{build_frame, parse_frame, PacketHeader, PacketView};
use crate::pcap::{read_pcap, PcapError, PcapWriter};
use crate::record::TransactionRecord;
use crate::time::CaptureTimestamp;

/// How transactions are spread over flows.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowPopularity {
    Uniform,
    /// Transaction `i` uses flow `i mod flows`.
    RoundRobin,
    /// Flow `k` (1-based) is chosen with probability proportional to `k^-s`.
    Zipf(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum RtDistribution {
    Constant(Duration),
    /// Exponential with the given rate per second.
    Exponential(f64),
    /// Uniform choice among the listed values.
    Empirical(Vec<Duration>),
}

/// Length of the request-target, leading `/` included.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UrlLength {
    Constant(usize),
    Uniform { min: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub transactions: usize,
    pub flows: usize,
    pub popularity: FlowPopularity,
    pub rt: RtDistribution,
    /// Probability that one packet of the transaction is sent twice.
    pub retransmit_prob: f64,
    /// Probability that the first response is written before its request.
    pub reorder_prob: f64,
    /// Probability that the transaction is a POST with a `100 Continue`.
    pub continue_prob: f64,
    pub url_length: UrlLength,
    /// Mean spacing between transaction arrivals.
    pub mean_gap: Duration,
    pub start: CaptureTimestamp,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            transactions: 1000,
            flows: 100,
            popularity: FlowPopularity::Uniform,
            rt: RtDistribution::Exponential(10.0),
            retransmit_prob: 0.0,
            reorder_prob: 0.0,
            continue_prob: 0.0,
            url_length: UrlLength::Uniform { min: 8, max: 80 },
            mean_gap: Duration::from_micros(100),
            start: CaptureTimestamp::new(1_393_978_285, 0).unwrap(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpecInvalid {
    #[error("{name} must be within [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("at least one flow is required")]
    NoFlows,
    #[error("Zipf exponent must be positive and finite, got {0}")]
    ZipfExponent(f64),
    #[error("exponential rate must be positive and finite, got {0}")]
    Rate(f64),
    #[error("empirical response-time list is empty")]
    EmptyEmpirical,
    #[error("URL length range {min}..={max} is invalid")]
    UrlLength { min: usize, max: usize },
    #[error("mean transaction gap must be positive")]
    ZeroGap,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), SpecInvalid> {
        for (name, value) in [
            ("retransmit_prob", self.retransmit_prob),
            ("reorder_prob", self.reorder_prob),
            ("continue_prob", self.continue_prob),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SpecInvalid::Probability { name, value });
            }
        }
        if self.flows == 0 {
            return Err(SpecInvalid::NoFlows);
        }
        if let FlowPopularity::Zipf(s) = self.popularity {
            if !(s.is_finite() && s > 0.0) {
                return Err(SpecInvalid::ZipfExponent(s));
            }
        }
        match &self.rt {
            RtDistribution::Exponential(l) if !(l.is_finite() && *l > 0.0) => {
                return Err(SpecInvalid::Rate(*l))
            }
            RtDistribution::Empirical(v) if v.is_empty() => return Err(SpecInvalid::EmptyEmpirical),
            _ => {}
        }
        let (min, max) = match self.url_length {
            UrlLength::Constant(n) => (n, n),
            UrlLength::Uniform { min, max } => (min, max),
        };
        if min == 0 || min > max || max > 60_000 {
            return Err(SpecInvalid::UrlLength { min, max });
        }
        if self.mean_gap.is_zero() {
            return Err(SpecInvalid::ZeroGap);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retransmitted {
    Request,
    Response,
}

/// One logical transaction as the generator built it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthTransaction {
    pub id: u64,
    pub client_ip: Ipv4Addr,
    pub client_port: u16,
    pub server_ip: Ipv4Addr,
    pub server_port: u16,
    pub method: Method,
    /// Request-target as sent.
    pub target: String,
    pub host: String,
    pub agent: String,
    /// Code of the response that pairs with the request: 100 for
    /// continue transactions.
    pub code: u16,
    pub reason: String,
    /// Code of the final response.
    pub final_code: u16,
    pub request_ts: CaptureTimestamp,
    pub response_ts: CaptureTimestamp,
    pub match_number: u32,
    pub retransmitted: Option<Retransmitted>,
    pub reordered: bool,
    pub continue_pair: bool,
}

impl TruthTransaction {
    /// The matched record an analyzer should report for this transaction.
    pub fn expected_record(&self) -> TransactionRecord {
        let mut target = self.target.clone();
        if target.len() > MAX_URI_LEN {
            target.truncate(MAX_URI_LEN);
        }
        let uri = if target.starts_with('/') {
            format!("http://{}{}", self.host, target)
        } else {
            target
        };
        let rt_nanos = self.response_ts.as_nanos() as i128 - self.request_ts.as_nanos() as i128;
        TransactionRecord {
            client_ip: self.client_ip,
            client_port: self.client_port,
            server_ip: self.server_ip,
            server_port: self.server_port,
            request_ts: Some(self.request_ts),
            response_ts: Some(self.response_ts),
            response_time: Some(crate::time::ResponseTime::from_nanos(rt_nanos as i64)),
            response_message: Some(self.reason.clone()),
            response_code: Some(self.code),
            method: Some(self.method),
            agent: Some(self.agent.chars().take(MAX_AGENT_LEN).collect()),
            host: Some(self.host.clone()),
            uri: Some(uri),
            match_number: self.match_number,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub transactions: Vec<TruthTransaction>,
}

impl GroundTruth {
    pub fn retransmissions(&self) -> usize {
        self.transactions.iter().filter(|t| t.retransmitted.is_some()).count()
    }

    pub fn expected_records(&self) -> Vec<TransactionRecord> {
        self.transactions.iter().map(TruthTransaction::expected_record).collect()
    }

    /// Writes one CSV row per transaction, record columns first.
    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "client_ip", "client_port", "server_ip", "server_port", "request_ts", "response_ts",
            "response_time", "response_message", "response_code", "method", "agent", "host", "uri",
            "match_number", "id", "final_code", "retransmitted", "reordered", "continue_pair",
        ])?;
        for t in &self.transactions {
            let r = t.expected_record();
            let retx = match t.retransmitted {
                None => "",
                Some(Retransmitted::Request) => "request",
                Some(Retransmitted::Response) => "response",
            };
            w.write_record([
                r.client_ip.to_string(),
                r.client_port.to_string(),
                r.server_ip.to_string(),
                r.server_port.to_string(),
                t.request_ts.to_string(),
                t.response_ts.to_string(),
                r.response_time.map(|v| v.to_string()).unwrap_or_default(),
                t.reason.clone(),
                t.code.to_string(),
                t.method.to_string(),
                t.agent.clone(),
                t.host.clone(),
                r.uri.unwrap_or_default(),
                t.match_number.to_string(),
                t.id.to_string(),
                t.final_code.to_string(),
                retx.to_string(),
                t.reordered.to_string(),
                t.continue_pair.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// What a planned packet carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketRole {
    Request,
    /// The response that pairs with the request (the `100` for continue
    /// transactions).
    Response,
    /// Request body sent after a `100 Continue`.
    Body,
    /// Final response of a continue transaction.
    FinalResponse,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedPacket {
    pub header: PacketHeader,
    pub payload: Vec<u8>,
    pub transaction: u64,
    pub role: PacketRole,
    pub retransmission: bool,
}

impl PlannedPacket {
    /// The classified message, for packets that begin an HTTP message.
    pub fn message(&self) -> Option<HttpMessage> {
        classify_http(&PacketView { header: self.header, payload: &self.payload })
    }
}

struct Flow {
    client_ip: Ipv4Addr,
    client_port: u16,
    server_ip: Ipv4Addr,
    host: Arc<str>,
    agent: Arc<str>,
    client_seq: u32,
    server_seq: u32,
    ready_at: u128,
}

struct Queued {
    key: u128,
    order: u64,
    packet: PlannedPacket,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        (self.key, self.order) == (o.key, o.order)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.key, self.order).cmp(&(o.key, o.order))
    }
}

const SERVER_PORT: u16 = 80;
const AGENTS: [&str; 4] = [
    "Mozilla/5.0 (X11; Linux x86_64; rv:120.0) Gecko/20100101 Firefox/120.0",
    "Mozilla/4.0",
    "curl/8.5.0",
    "Wget/1.21.4",
];
const METHODS: [(Method, u32); 9] = [
    (Method::Get, 850),
    (Method::Post, 80),
    (Method::Head, 30),
    (Method::Put, 10),
    (Method::Delete, 10),
    (Method::Options, 10),
    (Method::Trace, 2),
    (Method::Connect, 3),
    (Method::Patch, 5),
];
const CODES: [(u16, &str, u32); 6] = [
    (200, "OK", 800),
    (304, "Not Modified", 100),
    (302, "Found", 40),
    (404, "Not Found", 40),
    (500, "Internal Server Error", 15),
    (503, "Service Unavailable", 5),
];
const URL_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789-_./";
const ONE_US: u128 = 1_000;

/// Streams the packets of a workload in capture order.
///
/// Transaction arrivals are spaced exponentially; a transaction starts at
/// its arrival or when its flow becomes idle, whichever is later. Packets
/// are released once no later transaction can produce an earlier one.
pub struct TransactionPlanner {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    flows: Vec<Flow>,
    zipf: Option<Zipf<f64>>,
    exp_rt: Option<Exp<f64>>,
    gap: Exp<f64>,
    methods: WeightedIndex<u32>,
    codes: WeightedIndex<u32>,
    queue: BinaryHeap<Reverse<Queued>>,
    order: u64,
    planned: usize,
    arrival: u128,
    truth: Option<Vec<TruthTransaction>>,
}

impl TransactionPlanner {
    pub fn new(spec: WorkloadSpec) -> Result<Self, SpecInvalid> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let servers: Vec<Ipv4Addr> = (0..16).map(|k| Ipv4Addr::new(192, 168, 0, 1 + k)).collect();
        let hosts: Vec<Arc<str>> = (0..servers.len()).map(|k| Arc::from(format!("srv{k}.example.com"))).collect();
        let agents: Vec<Arc<str>> = AGENTS.iter().map(|&a| Arc::from(a)).collect();
        let mut tuples = HashSet::new();
        let mut flows = Vec::with_capacity(spec.flows);
        while flows.len() < spec.flows {
            let client_ip = Ipv4Addr::from(0x0A00_0000 | (rng.random::<u32>() & 0x00FF_FFFF));
            let client_port = rng.random_range(1024..=u16::MAX);
            let server = rng.random_range(0..servers.len());
            if !tuples.insert((client_ip, client_port, server)) {
                continue;
            }
            flows.push(Flow {
                client_ip,
                client_port,
                server_ip: servers[server],
                host: hosts[server].clone(),
                agent: agents[rng.random_range(0..agents.len())].clone(),
                client_seq: rng.random(),
                server_seq: rng.random(),
                ready_at: 0,
            });
        }
        let zipf = match spec.popularity {
            FlowPopularity::Zipf(s) => {
                Some(Zipf::new(spec.flows as f64, s).map_err(|_| SpecInvalid::ZipfExponent(s))?)
            }
            FlowPopularity::Uniform | FlowPopularity::RoundRobin => None,
        };
        let exp_rt = match spec.rt {
            RtDistribution::Exponential(l) => Some(Exp::new(l).map_err(|_| SpecInvalid::Rate(l))?),
            _ => None,
        };
        let gap = Exp::new(1.0 / spec.mean_gap.as_nanos() as f64).map_err(|_| SpecInvalid::ZeroGap)?;
        let arrival = spec.start.as_nanos();
        Ok(TransactionPlanner {
            rng,
            flows,
            zipf,
            exp_rt,
            gap,
            methods: WeightedIndex::new(METHODS.map(|m| m.1)).expect("static weights"),
            codes: WeightedIndex::new(CODES.map(|c| c.2)).expect("static weights"),
            queue: BinaryHeap::new(),
            order: 0,
            planned: 0,
            arrival,
            truth: None,
            spec,
        })
    }

    /// Keeps a ground-truth entry for every planned transaction.
    pub fn with_truth(mut self) -> Self {
        self.truth = Some(Vec::new());
        self
    }

    /// Ground truth for the transactions planned so far.
    pub fn take_truth(&mut self) -> GroundTruth {
        GroundTruth { transactions: self.truth.as_mut().map(std::mem::take).unwrap_or_default() }
    }

    fn draw_rt(&mut self) -> u128 {
        match &self.spec.rt {
            RtDistribution::Constant(d) => d.as_nanos(),
            RtDistribution::Exponential(_) => {
                let secs = self.exp_rt.as_ref().expect("set for exponential").sample(&mut self.rng);
                (secs * 1e9).round() as u128
            }
            RtDistribution::Empirical(v) => v[self.rng.random_range(0..v.len())].as_nanos(),
        }
    }

    fn draw_url(&mut self) -> String {
        let len = match self.spec.url_length {
            UrlLength::Constant(n) => n,
            UrlLength::Uniform { min, max } => self.rng.random_range(min..=max),
        };
        let mut s = String::with_capacity(len);
        s.push('/');
        for _ in 1..len {
            s.push(URL_CHARS[self.rng.random_range(0..URL_CHARS.len())] as char);
        }
        s
    }

    fn push(&mut self, key: u128, packet: PlannedPacket) {
        self.order += 1;
        self.queue.push(Reverse(Queued { key, order: self.order, packet }));
    }

    fn plan_next(&mut self) {
        let id = self.planned as u64;
        self.planned += 1;
        self.arrival += (self.gap.sample(&mut self.rng).round() as u128).max(1);

        let f = match (&self.zipf, &self.spec.popularity) {
            (Some(z), _) => z.sample(&mut self.rng) as usize - 1,
            (None, FlowPopularity::RoundRobin) => id as usize % self.flows.len(),
            (None, _) => self.rng.random_range(0..self.flows.len()),
        };
        let is_continue = self.rng.random_bool(self.spec.continue_prob);
        let method = if is_continue { Method::Post } else { METHODS[self.methods.sample(&mut self.rng)].0 };
        let target = self.draw_url();
        let (code, reason, _) = CODES[self.codes.sample(&mut self.rng)];
        let code = if method == Method::Head && code == 200 { 204 } else { code };
        let reason = if code == 204 { "No Content" } else { reason };
        let req_body = match method {
            Method::Post | Method::Put | Method::Patch => self.rng.random_range(1..=1400u32),
            _ => 0,
        };
        let resp_body = if matches!(code, 204 | 304) || method == Method::Head {
            0
        } else {
            self.rng.random_range(0..=200_000u32)
        };
        let rt = self.draw_rt();
        let final_rt = if is_continue { self.draw_rt() } else { 0 };
        let retransmit = self.rng.random_bool(self.spec.retransmit_prob).then(|| {
            if self.rng.random_bool(0.5) {
                Retransmitted::Request
            } else {
                Retransmitted::Response
            }
        });
        let retx_frac: f64 = self.rng.random();
        let reordered = self.rng.random_bool(self.spec.reorder_prob);

        let flow = &mut self.flows[f];
        let t_req = self.arrival.max(flow.ready_at);
        let mut request = format!(
            "{} {} HTTP/1.1\r\nHost: {}\r\nUser-Agent: {}\r\nAccept: */*\r\n",
            method, target, flow.host, flow.agent
        );
        if req_body > 0 {
            request.push_str(&format!("Content-Length: {req_body}\r\n"));
        }
        if is_continue {
            request.push_str("Expect: 100-continue\r\n");
        }
        request.push_str("\r\n");
        let head_len = request.len() as u32;

        let header = |src_is_client: bool, seq: u32, ack: u32, ts: u128| {
            let (src, sp, dst, dp) = if src_is_client {
                (flow.client_ip, flow.client_port, flow.server_ip, SERVER_PORT)
            } else {
                (flow.server_ip, SERVER_PORT, flow.client_ip, flow.client_port)
            };
            PacketHeader {
                ts: CaptureTimestamp::from_nanos(ts),
                src_ip: src,
                dst_ip: dst,
                src_port: sp,
                dst_port: dp,
                seq,
                ack,
                ack_valid: true,
            }
        };
        let c0 = flow.client_seq;
        let s0 = flow.server_seq;
        let mut packets: Vec<(u128, PlannedPacket)> = Vec::with_capacity(5);
        let mk = |header, payload: Vec<u8>, role, retransmission| PlannedPacket {
            header,
            payload,
            transaction: id,
            role,
            retransmission,
        };
        let req_pkt = mk(header(true, c0, s0, t_req), request.into_bytes(), PacketRole::Request, false);

        let t_resp = t_req + rt;
        let (resp_pkt, last_ts, client_len, server_len, final_code) = if is_continue {
            let cont = b"HTTP/1.1 100 Continue\r\n\r\n".to_vec();
            let cont_len = cont.len() as u32;
            let t_body = t_resp + ONE_US;
            let t_final = t_body + final_rt;
            let final_head = format!(
                "HTTP/1.1 {code} {reason}\r\nServer: synth\r\nContent-Length: {resp_body}\r\n\r\n"
            );
            let final_len = final_head.len() as u32 + resp_body;
            packets.push((
                t_body,
                mk(
                    header(true, c0.wrapping_add(head_len), s0.wrapping_add(cont_len), t_body),
                    vec![b'x'; req_body as usize],
                    PacketRole::Body,
                    false,
                ),
            ));
            packets.push((
                t_final,
                mk(
                    header(false, s0.wrapping_add(cont_len), c0.wrapping_add(head_len + req_body), t_final),
                    final_head.into_bytes(),
                    PacketRole::FinalResponse,
                    false,
                ),
            ));
            let resp = mk(header(false, s0, c0.wrapping_add(head_len), t_resp), cont, PacketRole::Response, false);
            (resp, t_final, head_len + req_body, cont_len + final_len, code)
        } else {
            let head = format!(
                "HTTP/1.1 {code} {reason}\r\nServer: synth\r\nContent-Length: {resp_body}\r\n\r\n"
            );
            let total = head.len() as u32 + resp_body;
            let resp = mk(
                header(false, s0, c0.wrapping_add(head_len + req_body), t_resp),
                head.into_bytes(),
                PacketRole::Response,
                false,
            );
            (resp, t_resp, head_len + req_body, total, code)
        };
        let mut last_ts = last_ts;
        match retransmit {
            Some(Retransmitted::Request) => {
                let t = t_req + ONE_US + (retx_frac * 2.0 * rt as f64) as u128;
                let mut dup = req_pkt.clone();
                dup.header.ts = CaptureTimestamp::from_nanos(t);
                dup.retransmission = true;
                last_ts = last_ts.max(t);
                packets.push((t, dup));
            }
            Some(Retransmitted::Response) => {
                let t = t_resp + ONE_US + (retx_frac * rt as f64) as u128;
                let mut dup = resp_pkt.clone();
                dup.header.ts = CaptureTimestamp::from_nanos(t);
                dup.retransmission = true;
                last_ts = last_ts.max(t);
                packets.push((t, dup));
            }
            None => {}
        }
        let resp_key = if reordered { t_req.saturating_sub(1) } else { t_resp };
        packets.push((resp_key, resp_pkt));
        packets.push((t_req, req_pkt));

        flow.client_seq = c0.wrapping_add(client_len);
        flow.server_seq = s0.wrapping_add(server_len);
        flow.ready_at = last_ts + ONE_US;

        if let Some(truth) = &mut self.truth {
            truth.push(TruthTransaction {
                id,
                client_ip: flow.client_ip,
                client_port: flow.client_port,
                server_ip: flow.server_ip,
                server_port: SERVER_PORT,
                method,
                target,
                host: flow.host.to_string(),
                agent: flow.agent.to_string(),
                code: if is_continue { 100 } else { code },
                reason: if is_continue { "Continue".into() } else { reason.into() },
                final_code,
                request_ts: CaptureTimestamp::from_nanos(t_req),
                response_ts: CaptureTimestamp::from_nanos(t_resp),
                match_number: s0,
                retransmitted: retransmit,
                reordered,
                continue_pair: is_continue,
            });
        }
        // Request first so that equal keys keep request-before-response.
        packets.sort_by_key(|(k, p)| (*k, p.role != PacketRole::Request));
        for (key, p) in packets {
            self.push(key, p);
        }
    }
}

impl Iterator for TransactionPlanner {
    type Item = PlannedPacket;

    fn next(&mut self) -> Option<PlannedPacket> {
        loop {
            // Every later transaction emits nothing before its arrival - 1 ns.
            let horizon = if self.planned < self.spec.transactions {
                Some(self.arrival.saturating_sub(1))
            } else {
                None
            };
            if let Some(Reverse(top)) = self.queue.peek() {
                if horizon.is_none_or(|h| top.key < h) {
                    return self.queue.pop().map(|Reverse(q)| q.packet);
                }
            }
            if self.planned >= self.spec.transactions {
                return None;
            }
            self.plan_next();
        }
    }
}

/// Builds a nanosecond PCAP for `spec` and the matching ground truth.
pub fn generate(spec: &WorkloadSpec) -> Result<(Vec<u8>, GroundTruth), SpecInvalid> {
    let mut planner = TransactionPlanner::new(spec.clone())?.with_truth();
    let mut w = PcapWriter::new(Vec::new()).expect("writing to memory");
    for p in planner.by_ref() {
        w.write_frame(p.header.ts, &build_frame(&p.header, &p.payload))
            .expect("writing to memory");
    }
    Ok((w.into_inner(), planner.take_truth()))
}

/// Reference matcher: keeps every unanswered message in one arrival-ordered
/// list and pairs each new message with the first counterpart found by a
/// linear scan. Requests without the ACK flag are ignored. Leftover
/// messages are reported unmatched, in arrival order, after all matches.
pub fn oracle_match(pcap: &[u8]) -> Result<Vec<TransactionRecord>, PcapError> {
    let mut pending: Vec<HttpMessage> = Vec::new();
    let mut out = Vec::new();
    for (ts, frame) in read_pcap(pcap)? {
        let Ok(view) = parse_frame(frame, ts) else { continue };
        let Some(msg) = classify_http(&view) else { continue };
        if msg.kind() == MessageKind::Request && !msg.header.ack_valid {
            continue;
        }
        let found = pending.iter().position(|p| answers(p, &msg) || answers(&msg, p));
        match found {
            Some(i) => {
                let other = pending.remove(i);
                let (req, resp) = match msg.kind() {
                    MessageKind::Request => (&msg, &other),
                    MessageKind::Response => (&other, &msg),
                };
                out.push(TransactionRecord::matched(req, resp));
            }
            None => pending.push(msg),
        }
    }
    out.extend(pending.iter().map(TransactionRecord::unmatched));
    Ok(out)
}

fn answers(req: &HttpMessage, resp: &HttpMessage) -> bool {
    let (q, r) = (&req.header, &resp.header);
    req.kind() == MessageKind::Request
        && resp.kind() == MessageKind::Response
        && q.src_ip == r.dst_ip
        && q.dst_ip == r.src_ip
        && q.src_port == r.dst_port
        && q.dst_port == r.src_port
        && r.seq == q.ack
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> WorkloadSpec {
        WorkloadSpec { transactions: n, ..WorkloadSpec::default() }
    }

    #[test]
    fn single_transaction_is_two_packets() {
        let (pcap, truth) = generate(&WorkloadSpec { flows: 1, ..spec(1) }).unwrap();
        assert_eq!(read_pcap(&pcap).unwrap().count(), 2);
        assert_eq!(truth.transactions.len(), 1);
        let recs = oracle_match(&pcap).unwrap();
        assert_eq!(recs, truth.expected_records());
    }

    #[test]
    fn empty_workload() {
        let (pcap, truth) = generate(&spec(0)).unwrap();
        assert_eq!(read_pcap(&pcap).unwrap().count(), 0);
        assert!(truth.transactions.is_empty());
        assert!(oracle_match(&pcap).unwrap().is_empty());
    }

    #[test]
    fn deterministic_per_seed() {
        let s = WorkloadSpec {
            flows: 10,
            popularity: FlowPopularity::Zipf(1.2),
            ..spec(1000)
        };
        assert_eq!(generate(&s).unwrap().0, generate(&s).unwrap().0);
        let other = WorkloadSpec { seed: 2, ..s.clone() };
        assert_ne!(generate(&s).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn clean_trace_matches_truth() {
        let s = WorkloadSpec { flows: 20, ..spec(500) };
        let (pcap, truth) = generate(&s).unwrap();
        let mut got = oracle_match(&pcap).unwrap();
        let mut want = truth.expected_records();
        got.sort_by_key(|r| (r.request_ts, r.match_number));
        want.sort_by_key(|r| (r.request_ts, r.match_number));
        assert_eq!(got, want);
    }

    #[test]
    fn clean_timestamps_non_decreasing() {
        let p = TransactionPlanner::new(WorkloadSpec { flows: 5, ..spec(2000) }).unwrap();
        let ts: Vec<_> = p.map(|p| p.header.ts).collect();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn persistent_flow_seq_arithmetic() {
        let p = TransactionPlanner::new(WorkloadSpec { flows: 1, continue_prob: 0.3, ..spec(50) })
            .unwrap();
        let pkts: Vec<_> = p.collect();
        let mut next_client: Option<u32> = None;
        for pk in pkts.iter().filter(|p| p.role == PacketRole::Request) {
            if let Some(n) = next_client {
                assert_eq!(pk.header.seq, n);
            }
            let body: u32 = pkts
                .iter()
                .filter(|b| b.transaction == pk.transaction && b.role == PacketRole::Body)
                .map(|b| b.payload.len() as u32)
                .sum();
            let text = String::from_utf8_lossy(&pk.payload);
            let declared: u32 = text
                .lines()
                .find_map(|l| l.strip_prefix("Content-Length: "))
                .map_or(0, |v| v.parse().unwrap());
            assert!(body == 0 || body == declared);
            next_client = Some(pk.header.seq.wrapping_add(pk.payload.len() as u32 + declared));
        }
    }

    #[test]
    fn continue_final_is_unmatched() {
        let s = WorkloadSpec { flows: 3, continue_prob: 1.0, ..spec(20) };
        let (pcap, truth) = generate(&s).unwrap();
        let recs = oracle_match(&pcap).unwrap();
        let matched: Vec<_> = recs.iter().filter(|r| r.is_matched()).collect();
        assert_eq!(matched.len(), 20);
        assert!(matched.iter().all(|r| r.response_code == Some(100)));
        assert_eq!(recs.len() - matched.len(), 20);
        assert!(truth.transactions.iter().all(|t| t.continue_pair && t.method == Method::Post));
    }

    #[test]
    fn reorder_puts_response_first() {
        let s = WorkloadSpec { flows: 4, reorder_prob: 1.0, ..spec(30) };
        let pkts: Vec<_> = TransactionPlanner::new(s.clone()).unwrap().collect();
        for id in 0..30 {
            let roles: Vec<_> = pkts.iter().filter(|p| p.transaction == id).map(|p| p.role).collect();
            assert_eq!(roles, vec![PacketRole::Response, PacketRole::Request]);
        }
        let (pcap, truth) = generate(&s).unwrap();
        let mut got = oracle_match(&pcap).unwrap();
        let mut want = truth.expected_records();
        got.sort_by_key(|r| r.match_number);
        want.sort_by_key(|r| r.match_number);
        assert_eq!(got, want);
    }

    #[test]
    fn retransmissions_leave_one_duplicate_each() {
        let s = WorkloadSpec { flows: 30, retransmit_prob: 0.2, ..spec(400) };
        let (pcap, truth) = generate(&s).unwrap();
        let recs = oracle_match(&pcap).unwrap();
        assert_eq!(recs.iter().filter(|r| r.is_matched()).count(), 400);
        assert_eq!(recs.len() - 400, truth.retransmissions());
        let deduped = crate::record::dedup_records(recs);
        assert_eq!(deduped.len(), 400);
    }

    #[test]
    fn long_urls_are_truncated_in_truth() {
        let s = WorkloadSpec { flows: 1, url_length: UrlLength::Constant(3000), ..spec(2) };
        let (pcap, truth) = generate(&s).unwrap();
        let want = truth.expected_records();
        assert_eq!(want[0].uri.as_ref().unwrap().len(), "http://".len() + truth.transactions[0].host.len() + MAX_URI_LEN);
        let mut got = oracle_match(&pcap).unwrap();
        got.sort_by_key(|r| r.request_ts);
        assert_eq!(got, want);
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(
            TransactionPlanner::new(WorkloadSpec { retransmit_prob: 1.5, ..spec(1) }),
            Err(SpecInvalid::Probability { name: "retransmit_prob", .. })
        ));
        assert!(matches!(
            TransactionPlanner::new(WorkloadSpec { reorder_prob: f64::NAN, ..spec(1) }),
            Err(SpecInvalid::Probability { .. })
        ));
        assert!(matches!(TransactionPlanner::new(WorkloadSpec { flows: 0, ..spec(1) }), Err(SpecInvalid::NoFlows)));
        assert!(matches!(
            TransactionPlanner::new(WorkloadSpec { rt: RtDistribution::Empirical(vec![]), ..spec(1) }),
            Err(SpecInvalid::EmptyEmpirical)
        ));
        assert!(matches!(
            TransactionPlanner::new(WorkloadSpec { url_length: UrlLength::Uniform { min: 0, max: 4 }, ..spec(1) }),
            Err(SpecInvalid::UrlLength { .. })
        ));
    }

    #[test]
    fn truth_csv_has_row_per_transaction() {
        let (_, truth) = generate(&spec(5)).unwrap();
        let mut buf = Vec::new();
        truth.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("client_ip,client_port,"));
    }
}
