use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use hta_core::hashing::{feeder_hash, hash_4tuple, hash_transaction_header};
use hta_core::http::{classify_http, MessageKind};
use hta_core::matcher::{MatchTable, TableConfig};
use hta_core::packet::{build_frame, parse_frame, PacketView};
use hta_core::synthgen::{TransactionPlanner, WorkloadSpec};

fn packets() -> Vec<hta_core::synthgen::PlannedPacket> {
    TransactionPlanner::new(WorkloadSpec { transactions: 20_000, ..WorkloadSpec::default() })
        .unwrap()
        .collect()
}

fn hashes(c: &mut Criterion) {
    let pkts = packets();
    let mut g = c.benchmark_group("hash");
    g.throughput(Throughput::Elements(pkts.len() as u64));
    g.bench_function("4tuple", |b| {
        b.iter(|| {
            pkts.iter()
                .fold(0u32, |acc, p| acc ^ hash_4tuple(p.header.src_ip, p.header.src_port, p.header.dst_ip, p.header.dst_port).0)
        })
    });
    g.bench_function("transaction", |b| {
        b.iter(|| {
            pkts.iter()
                .fold(0u32, |acc, p| acc ^ hash_transaction_header(&p.header, MessageKind::Response).unwrap().0)
        })
    });
    g.bench_function("feeder", |b| {
        b.iter(|| pkts.iter().fold(0u32, |acc, p| acc ^ feeder_hash(&p.header, MessageKind::Response).unwrap().0))
    });
    g.finish();
}

fn decode(c: &mut Criterion) {
    let pkts = packets();
    let frames: Vec<_> = pkts.iter().map(|p| (p.header.ts, build_frame(&p.header, &p.payload))).collect();
    let mut g = c.benchmark_group("decode");
    g.throughput(Throughput::Elements(frames.len() as u64));
    g.bench_function("parse_frame", |b| {
        b.iter(|| frames.iter().filter(|(ts, f)| parse_frame(f, *ts).is_ok()).count())
    });
    g.bench_function("classify_http", |b| {
        b.iter(|| {
            pkts.iter()
                .filter_map(|p| classify_http(&PacketView { header: p.header, payload: &p.payload }))
                .count()
        })
    });
    g.finish();
}

fn table(c: &mut Criterion) {
    let msgs: Vec<_> = packets().iter().filter_map(|p| p.message()).collect();
    let mut g = c.benchmark_group("match_table");
    g.throughput(Throughput::Elements(msgs.len() as u64));
    g.bench_function("insert", |b| {
        b.iter(|| {
            let mut t = MatchTable::new(TableConfig::with_cells(1 << 16)).unwrap();
            for m in &msgs {
                black_box(t.insert(m.clone()).ok());
            }
            t.pending()
        })
    });
    g.finish();
}

criterion_group!(benches, hashes, decode, table);
criterion_main!(benches);
