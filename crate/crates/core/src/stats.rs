//! Aggregate QoS statistics over transaction records.
//!
//! Accumulators are mergeable: each consumer keeps its own and a coordinator
//! folds them together afterwards. Response times are kept as exact
//! nanosecond samples up to a cap and are always also binned into a fixed
//! log-spaced histogram, so the CCDF can fall back to bins once the cap is
//! exceeded.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use crate::http::Method;
use crate::record::{DedupKey, TransactionRecord};
use crate::time::ResponseTime;

pub const DEFAULT_SAMPLE_CAP: usize = 10_000_000;

/// Log-spaced response-time bins starting at `min_nanos`. One extra bin
/// below catches everything smaller (including negative times) and one
/// above catches everything past the last decade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Binning {
    pub min_nanos: u64,
    pub decades: u32,
    pub bins_per_decade: u32,
}

impl Default for Binning {
    /// 1 µs to 1000 s at 90 bins per decade.
    fn default() -> Self {
        Binning { min_nanos: 1_000, decades: 9, bins_per_decade: 90 }
    }
}

impl Binning {
    /// Upper edges of the log bins, in nanoseconds.
    fn edges(&self) -> Vec<u64> {
        let n = self.decades * self.bins_per_decade;
        (1..=n)
            .map(|i| {
                let exp = f64::from(i) / f64::from(self.bins_per_decade);
                (self.min_nanos as f64 * 10f64.powf(exp)).round() as u64
            })
            .collect()
    }

    fn bin_count(&self) -> usize {
        (self.decades * self.bins_per_decade) as usize + 2
    }

    pub fn describe(&self) -> String {
        format!(
            "log10,min_seconds={},decades={},bins_per_decade={}",
            ResponseTime::from_nanos(self.min_nanos as i64),
            self.decades,
            self.bins_per_decade
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("no response-time samples recorded")]
    EmptyAccumulator,
    #[error("accumulators use different histogram binnings")]
    BinningMismatch,
}

#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    binning: Binning,
    edges: Vec<u64>,
    sample_cap: usize,
    pub code_counts: BTreeMap<u16, u64>,
    pub method_counts: [u64; Method::ALL.len()],
    pub url_len_counts: BTreeMap<usize, u64>,
    pub matched: u64,
    pub unmatched: u64,
    pub duplicate_suspects: u64,
    rt_samples: Vec<i64>,
    rt_exact: bool,
    rt_histogram: Vec<u64>,
    rt_count: u64,
    rt_max: i64,
    seen: HashSet<DedupKey>,
}

impl Default for StatsAccumulator {
    fn default() -> Self {
        StatsAccumulator::new(Binning::default(), DEFAULT_SAMPLE_CAP)
    }
}

impl StatsAccumulator {
    pub fn new(binning: Binning, sample_cap: usize) -> Self {
        StatsAccumulator {
            binning,
            edges: binning.edges(),
            sample_cap,
            code_counts: BTreeMap::new(),
            method_counts: [0; Method::ALL.len()],
            url_len_counts: BTreeMap::new(),
            matched: 0,
            unmatched: 0,
            duplicate_suspects: 0,
            rt_samples: Vec::new(),
            rt_exact: true,
            rt_histogram: vec![0; binning.bin_count()],
            rt_count: 0,
            rt_max: i64::MIN,
            seen: HashSet::new(),
        }
    }

    pub fn with_sample_cap(sample_cap: usize) -> Self {
        StatsAccumulator::new(Binning::default(), sample_cap)
    }

    pub fn binning(&self) -> Binning {
        self.binning
    }

    pub fn records(&self) -> u64 {
        self.matched + self.unmatched
    }

    pub fn rt_count(&self) -> u64 {
        self.rt_count
    }

    /// Whether every response time is still held as an exact sample.
    pub fn rt_exact(&self) -> bool {
        self.rt_exact
    }

    pub fn sorted_samples(&self) -> Vec<i64> {
        let mut s = self.rt_samples.clone();
        s.sort_unstable();
        s
    }

    pub fn histogram(&self) -> &[u64] {
        &self.rt_histogram
    }

    pub fn method_count(&self, m: Method) -> u64 {
        self.method_counts[m.index()]
    }

    fn bin_of(&self, nanos: i64) -> usize {
        if nanos < self.binning.min_nanos as i64 {
            return 0;
        }
        // First edge strictly above the value.
        1 + self.edges.partition_point(|&e| e as i64 <= nanos)
    }

    fn add_sample(&mut self, rt: ResponseTime) {
        let ns = rt.as_nanos();
        let bin = self.bin_of(ns);
        self.rt_histogram[bin] += 1;
        self.rt_count += 1;
        self.rt_max = self.rt_max.max(ns);
        if self.rt_exact {
            if self.rt_samples.len() < self.sample_cap {
                self.rt_samples.push(ns);
            } else {
                self.rt_exact = false;
                self.rt_samples = Vec::new();
            }
        }
    }

    pub fn record_transaction(&mut self, rec: &TransactionRecord) {
        if !self.seen.insert(rec.dedup_key()) {
            self.duplicate_suspects += 1;
        }
        let matched = rec.is_matched();
        if matched {
            self.matched += 1;
            if let Some(code) = rec.response_code {
                *self.code_counts.entry(code).or_default() += 1;
            }
            if let Some(rt) = rec.response_time {
                self.add_sample(rt);
            }
        } else {
            self.unmatched += 1;
        }
        if let Some(m) = rec.method {
            self.method_counts[m.index()] += 1;
            if let Some(uri) = &rec.uri {
                *self.url_len_counts.entry(uri.chars().count()).or_default() += 1;
            }
        }
    }

    /// Adds `other` into `self`.
    pub fn merge_from(&mut self, other: &StatsAccumulator) -> Result<(), StatsError> {
        if self.binning != other.binning {
            return Err(StatsError::BinningMismatch);
        }
        for (c, n) in &other.code_counts {
            *self.code_counts.entry(*c).or_default() += n;
        }
        for (a, b) in self.method_counts.iter_mut().zip(other.method_counts) {
            *a += b;
        }
        for (l, n) in &other.url_len_counts {
            *self.url_len_counts.entry(*l).or_default() += n;
        }
        self.matched += other.matched;
        self.unmatched += other.unmatched;
        self.duplicate_suspects += other.duplicate_suspects;
        for key in &other.seen {
            if !self.seen.insert(*key) {
                self.duplicate_suspects += 1;
            }
        }
        for (a, b) in self.rt_histogram.iter_mut().zip(&other.rt_histogram) {
            *a += b;
        }
        self.rt_count += other.rt_count;
        self.rt_max = self.rt_max.max(other.rt_max);
        self.sample_cap = self.sample_cap.min(other.sample_cap);
        self.rt_exact = self.rt_exact
            && other.rt_exact
            && self.rt_samples.len() + other.rt_samples.len() <= self.sample_cap;
        if self.rt_exact {
            self.rt_samples.extend_from_slice(&other.rt_samples);
        } else {
            self.rt_samples = Vec::new();
        }
        Ok(())
    }

    pub fn merge(a: &StatsAccumulator, b: &StatsAccumulator) -> Result<StatsAccumulator, StatsError> {
        let mut out = a.clone();
        out.merge_from(b)?;
        Ok(out)
    }

    /// Empirical complementary CDF of response times.
    pub fn ccdf(&self) -> Result<Ccdf, StatsError> {
        if self.rt_count == 0 {
            return Err(StatsError::EmptyAccumulator);
        }
        let total = self.rt_count as f64;
        let mut points = Vec::new();
        if self.rt_exact {
            let samples = self.sorted_samples();
            let n = samples.len();
            let mut i = 0;
            while i < n {
                let v = samples[i];
                let mut j = i;
                while j < n && samples[j] == v {
                    j += 1;
                }
                points.push(CcdfPoint { t_nanos: v, p: (n - j) as f64 / total });
                i = j;
            }
        } else {
            let mut above = self.rt_count;
            for (bin, &count) in self.rt_histogram.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                above -= count;
                let upper = match bin {
                    0 => self.binning.min_nanos as i64,
                    b if b <= self.edges.len() => self.edges[b - 1] as i64,
                    _ => self.rt_max,
                };
                points.push(CcdfPoint { t_nanos: upper, p: above as f64 / total });
            }
        }
        Ok(Ccdf { points, exact: self.rt_exact })
    }
}

impl PartialEq for StatsAccumulator {
    fn eq(&self, o: &Self) -> bool {
        self.binning == o.binning
            && self.code_counts == o.code_counts
            && self.method_counts == o.method_counts
            && self.url_len_counts == o.url_len_counts
            && self.matched == o.matched
            && self.unmatched == o.unmatched
            && self.duplicate_suspects == o.duplicate_suspects
            && self.rt_exact == o.rt_exact
            && self.rt_histogram == o.rt_histogram
            && self.rt_count == o.rt_count
            && self.sorted_samples() == o.sorted_samples()
            && self.seen == o.seen
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcdfPoint {
    pub t_nanos: i64,
    /// P(RT > t).
    pub p: f64,
}

impl CcdfPoint {
    pub fn t_seconds(&self) -> f64 {
        self.t_nanos as f64 / 1e9
    }
}

/// Step-function CCDF: sorted by `t`, non-increasing in `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ccdf {
    pub points: Vec<CcdfPoint>,
    /// Computed from exact samples rather than histogram bins.
    pub exact: bool,
}

impl Ccdf {
    /// P(RT > t) for `t` in seconds.
    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.points.partition_point(|p| p.t_seconds() <= t);
        if idx == 0 {
            1.0
        } else {
            self.points[idx - 1].p
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

/// Renders the accumulator. Codes ascend, methods follow [`Method::ALL`],
/// CCDF points ascend in `t`, URL lengths ascend.
pub fn render_report(acc: &StatsAccumulator, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Csv => render_csv(acc),
        ReportFormat::Text => render_text(acc),
    }
    .into_bytes()
}

fn summary_rows(acc: &StatsAccumulator) -> Vec<(&'static str, String)> {
    vec![
        ("matched", acc.matched.to_string()),
        ("unmatched", acc.unmatched.to_string()),
        ("duplicate_suspects", acc.duplicate_suspects.to_string()),
        ("records", acc.records().to_string()),
        ("records_deduplicated", (acc.records() - acc.duplicate_suspects).to_string()),
        ("rt_samples", acc.rt_count.to_string()),
        ("rt_exact", acc.rt_exact.to_string()),
    ]
}

fn render_csv(acc: &StatsAccumulator) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# rt_histogram,{}", acc.binning.describe());
    s.push_str("codes,code,count\n");
    for (code, n) in &acc.code_counts {
        let _ = writeln!(s, "codes,{code},{n}");
    }
    s.push_str("methods,method,count\n");
    for m in Method::ALL {
        let n = acc.method_count(m);
        if n > 0 {
            let _ = writeln!(s, "methods,{m},{n}");
        }
    }
    s.push_str("ccdf,t_seconds,p\n");
    if let Ok(ccdf) = acc.ccdf() {
        for p in &ccdf.points {
            let _ = writeln!(s, "ccdf,{},{:.9}", ResponseTime::from_nanos(p.t_nanos), p.p);
        }
    }
    s.push_str("urllen,length,count\n");
    for (len, n) in &acc.url_len_counts {
        let _ = writeln!(s, "urllen,{len},{n}");
    }
    s.push_str("summary,key,value\n");
    if acc.records() > 0 {
        for (k, v) in summary_rows(acc) {
            let _ = writeln!(s, "summary,{k},{v}");
        }
    }
    s
}

fn render_text(acc: &StatsAccumulator) -> String {
    let mut s = String::new();
    s.push_str("HTTP transaction summary\n");
    for (k, v) in summary_rows(acc) {
        let _ = writeln!(s, "  {k:<22} {v}");
    }
    s.push_str("\nResponse codes\n");
    for (code, n) in &acc.code_counts {
        let _ = writeln!(s, "  {code:<8} {n:>12} {:>8.3}%", pct(*n, acc.matched));
    }
    s.push_str("\nMethods\n");
    let total: u64 = acc.method_counts.iter().sum();
    for m in Method::ALL {
        let n = acc.method_count(m);
        if n > 0 {
            let _ = writeln!(s, "  {:<8} {n:>12} {:>8.3}%", m.as_str(), pct(n, total));
        }
    }
    s.push_str("\nResponse time quantiles (s)\n");
    if let Ok(ccdf) = acc.ccdf() {
        for q in [0.5, 0.9, 0.99, 0.999] {
            let t = ccdf
                .points
                .iter()
                .find(|p| p.p <= 1.0 - q)
                .map_or(0, |p| p.t_nanos);
            let _ = writeln!(s, "  p{:<6} {}", q * 100.0, ResponseTime::from_nanos(t));
        }
    } else {
        s.push_str("  (none)\n");
    }
    if let (Some((min, _)), Some((max, _))) =
        (acc.url_len_counts.first_key_value(), acc.url_len_counts.last_key_value())
    {
        let _ = writeln!(s, "\nURL length range: {min}..={max}");
    }
    s
}

fn pct(n: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * n as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::CaptureTimestamp;
    use proptest::prelude::*;

    fn rec(code: u16, method: Method, rt_nanos: i64, key: u32) -> TransactionRecord {
        let req_ts = CaptureTimestamp::new(100, 0).unwrap();
        TransactionRecord {
            client_ip: [10, 0, 0, 1].into(),
            client_port: 1000,
            server_ip: [10, 0, 0, 2].into(),
            server_port: 80,
            request_ts: Some(req_ts),
            response_ts: Some(CaptureTimestamp::from_nanos(
                (req_ts.as_nanos() as i128 + rt_nanos as i128) as u128,
            )),
            response_time: Some(ResponseTime::from_nanos(rt_nanos)),
            response_message: None,
            response_code: Some(code),
            method: Some(method),
            agent: None,
            host: None,
            uri: Some("/abc".into()),
            match_number: key,
        }
    }

    fn with_samples(samples: &[i64]) -> StatsAccumulator {
        let mut acc = StatsAccumulator::default();
        for (i, &s) in samples.iter().enumerate() {
            acc.record_transaction(&rec(200, Method::Get, s, i as u32));
        }
        acc
    }

    #[test]
    fn example_record_counts() {
        let mut acc = StatsAccumulator::default();
        acc.record_transaction(&rec(200, Method::Get, 104_130_000, 1));
        assert_eq!(acc.code_counts.get(&200), Some(&1));
        assert_eq!(acc.method_count(Method::Get), 1);
        assert_eq!(acc.sorted_samples(), vec![104_130_000]);
        assert_eq!(acc.url_len_counts.get(&4), Some(&1));
    }

    #[test]
    fn unmatched_request() {
        let mut acc = StatsAccumulator::default();
        let mut r = rec(200, Method::Post, 5, 1);
        r.response_ts = None;
        r.response_time = None;
        r.response_code = None;
        acc.record_transaction(&r);
        assert_eq!(acc.unmatched, 1);
        assert!(acc.code_counts.is_empty());
        assert_eq!(acc.method_count(Method::Post), 1);
        assert_eq!(acc.ccdf(), Err(StatsError::EmptyAccumulator));
    }

    #[test]
    fn two_codes() {
        let mut acc = StatsAccumulator::default();
        acc.record_transaction(&rec(200, Method::Get, 5, 1));
        acc.record_transaction(&rec(404, Method::Get, 5, 2));
        assert_eq!(acc.code_counts.len(), 2);
    }

    #[test]
    fn duplicate_suspects() {
        let mut acc = StatsAccumulator::default();
        acc.record_transaction(&rec(200, Method::Get, 5, 1));
        acc.record_transaction(&rec(200, Method::Get, 5, 1));
        assert_eq!(acc.duplicate_suspects, 1);
    }

    #[test]
    fn ccdf_examples() {
        let c = with_samples(&[1_000_000_000]).ccdf().unwrap();
        assert_eq!(c.eval(0.5), 1.0);
        assert_eq!(c.eval(1.5), 0.0);
        let c = with_samples(&[1, 2, 3, 4].map(|s| s * 1_000_000_000)).ccdf().unwrap();
        assert_eq!(c.eval(2.5), 0.5);
        assert_eq!(c.eval(0.0), 1.0);
        assert_eq!(c.eval(4.0), 0.0);
    }

    #[test]
    fn binning_edges() {
        let acc = StatsAccumulator::default();
        assert_eq!(acc.edges.len(), 810);
        assert_eq!(acc.edges[89], 10_000);
        assert_eq!(*acc.edges.last().unwrap(), 1_000_000_000_000);
        assert_eq!(acc.bin_of(-5), 0);
        assert_eq!(acc.bin_of(999), 0);
        assert_eq!(acc.bin_of(1_000), 1);
        assert_eq!(acc.bin_of(10_000), 91);
        assert_eq!(acc.bin_of(2_000_000_000_000), 811);
    }

    #[test]
    fn histogram_fallback_beyond_cap() {
        let mut acc = StatsAccumulator::with_sample_cap(3);
        for (i, s) in [10_000i64, 20_000, 30_000, 40_000].into_iter().enumerate() {
            acc.record_transaction(&rec(200, Method::Get, s, i as u32));
        }
        assert!(!acc.rt_exact());
        let c = acc.ccdf().unwrap();
        assert!(!c.exact);
        assert_eq!(c.points.last().unwrap().p, 0.0);
        assert!(c.points.windows(2).all(|w| w[0].t_nanos < w[1].t_nanos && w[0].p >= w[1].p));
    }

    #[test]
    fn binning_mismatch() {
        let a = StatsAccumulator::default();
        let b = StatsAccumulator::new(Binning { bins_per_decade: 10, ..Binning::default() }, 10);
        assert_eq!(StatsAccumulator::merge(&a, &b), Err(StatsError::BinningMismatch));
    }

    #[test]
    fn empty_report_is_header_only() {
        let csv = String::from_utf8(render_report(&StatsAccumulator::default(), ReportFormat::Csv)).unwrap();
        assert_eq!(
            csv,
            "# rt_histogram,log10,min_seconds=0.000001000,decades=9,bins_per_decade=90\n\
             codes,code,count\nmethods,method,count\nccdf,t_seconds,p\nurllen,length,count\nsummary,key,value\n"
        );
    }

    #[test]
    fn single_record_report() {
        let mut acc = StatsAccumulator::default();
        acc.record_transaction(&rec(200, Method::Get, 104_130_000, 1));
        let csv = String::from_utf8(render_report(&acc, ReportFormat::Csv)).unwrap();
        for row in ["codes,200,1", "methods,GET,1", "ccdf,0.104130000,0.000000000", "urllen,4,1", "summary,matched,1"] {
            assert_eq!(csv.lines().filter(|l| *l == row).count(), 1, "{row}");
        }
        let text = String::from_utf8(render_report(&acc, ReportFormat::Text)).unwrap();
        assert!(text.contains("GET"));
    }

    fn acc_strategy() -> impl Strategy<Value = StatsAccumulator> {
        proptest::collection::vec(
            (prop::sample::select(vec![200u16, 304, 404, 500]),
             prop::sample::select(Method::ALL.to_vec()),
             -10i64..5_000_000_000, 0u32..50, any::<bool>()),
            0..40,
        )
        .prop_map(|rows| {
            let mut acc = StatsAccumulator::with_sample_cap(60);
            for (code, m, rt, key, matched) in rows {
                let mut r = rec(code, m, rt, key);
                if !matched {
                    r.response_ts = None;
                    r.response_time = None;
                }
                acc.record_transaction(&r);
            }
            acc
        })
    }

    proptest! {
        #[test]
        fn merge_is_commutative_monoid(a in acc_strategy(), b in acc_strategy(), c in acc_strategy()) {
            let empty = StatsAccumulator::with_sample_cap(60);
            prop_assert_eq!(StatsAccumulator::merge(&a, &empty).unwrap(), a.clone());
            prop_assert_eq!(StatsAccumulator::merge(&a, &b).unwrap(), StatsAccumulator::merge(&b, &a).unwrap());
            let left = StatsAccumulator::merge(&StatsAccumulator::merge(&a, &b).unwrap(), &c).unwrap();
            let right = StatsAccumulator::merge(&a, &StatsAccumulator::merge(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(left, right);
        }

        #[test]
        fn ccdf_monotone_in_unit_range(a in acc_strategy()) {
            if let Ok(c) = a.ccdf() {
                for w in c.points.windows(2) {
                    prop_assert!(w[0].t_nanos < w[1].t_nanos);
                    prop_assert!(w[0].p >= w[1].p);
                }
                for p in &c.points {
                    prop_assert!((0.0..=1.0).contains(&p.p));
                }
                prop_assert_eq!(c.points.last().unwrap().p, 0.0);
            }
        }
    }
}
