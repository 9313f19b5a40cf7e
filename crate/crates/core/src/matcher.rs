//! The correlation table that pairs requests with responses.
//!
//! Messages are stored in the cell selected by their transaction hash. A new
//! message scans its cell's collision list, in insertion order, for the first
//! counterpart of opposite kind whose 4-tuple is reversed and whose SEQ/ACK
//! equals its own ACK/SEQ. On a hit the counterpart leaves the table and a
//! record is emitted; otherwise the message joins the list. Same-key
//! messages of the same kind (retransmissions, `100 Continue` siblings) are
//! stored as ordinary collisions.
//!
//! Message storage is a bounded slab with an intrusive free list, and active
//! cells are tracked so that garbage collection visits only non-empty cells.

use std::time::Duration;

use crate::hashing::{hash_transaction, MissingAck};
use crate::http::{HttpMessage, MessageKind};
use crate::record::TransactionRecord;
use crate::time::CaptureTimestamp;

const NIL: u32 = u32::MAX;

pub const DEFAULT_TABLE_SIZE: usize = 1 << 20;

/// True iff `resp` answers `req`.
pub fn match_condition(req: &HttpMessage, resp: &HttpMessage) -> bool {
    req.kind() == MessageKind::Request
        && resp.kind() == MessageKind::Response
        && req.header.is_reverse_of(&resp.header)
        && resp.header.seq == req.header.ack
}

fn counterparts(stored: &HttpMessage, incoming: &HttpMessage) -> bool {
    match incoming.kind() {
        MessageKind::Request => match_condition(incoming, stored),
        MessageKind::Response => match_condition(stored, incoming),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableConfig {
    /// Number of cells.
    pub cells: usize,
    /// Maximum number of messages held at once.
    pub pool_capacity: usize,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig { cells: DEFAULT_TABLE_SIZE, pool_capacity: DEFAULT_TABLE_SIZE }
    }
}

impl TableConfig {
    pub fn with_cells(cells: usize) -> Self {
        TableConfig { cells, pool_capacity: cells }
    }
}

/// Capture-time garbage collection settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GcPolicy {
    pub idle_timeout: Duration,
    pub sweep_period: Duration,
}

impl Default for GcPolicy {
    fn default() -> Self {
        GcPolicy { idle_timeout: Duration::from_secs(60), sweep_period: Duration::from_secs(1) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("table needs at least one cell")]
    NoCells,
    #[error("table size {0} exceeds the supported maximum")]
    TooLarge(usize),
    #[error("message pool needs capacity of at least one")]
    NoPool,
    #[error("garbage collection durations must be positive")]
    ZeroDuration,
}

impl GcPolicy {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.idle_timeout.is_zero() || self.sweep_period.is_zero() {
            return Err(ConfigError::ZeroDuration);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum InsertError {
    #[error("message pool exhausted; message dropped")]
    PoolExhausted,
    #[error(transparent)]
    MissingAck(#[from] MissingAck),
}

/// Running totals for one table. At any point
/// `requests + responses == 2 * matched + unmatched + dropped() + pending`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCounters {
    pub requests: u64,
    pub responses: u64,
    pub matched: u64,
    pub unmatched: u64,
    pub dropped_pool: u64,
    pub dropped_missing_ack: u64,
}

impl MatchCounters {
    pub fn dropped(&self) -> u64 {
        self.dropped_pool + self.dropped_missing_ack
    }

    pub fn classified(&self) -> u64 {
        self.requests + self.responses
    }

    /// Checks message conservation given the number still pending.
    pub fn conserved(&self, pending: u64) -> bool {
        self.classified() == 2 * self.matched + self.unmatched + self.dropped() + pending
    }

    pub fn merge(&mut self, o: &MatchCounters) {
        self.requests += o.requests;
        self.responses += o.responses;
        self.matched += o.matched;
        self.unmatched += o.unmatched;
        self.dropped_pool += o.dropped_pool;
        self.dropped_missing_ack += o.dropped_missing_ack;
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    head: u32,
    tail: u32,
    /// Position in `active`, or NIL when the cell is empty.
    active_pos: u32,
    last_activity: CaptureTimestamp,
}

impl Cell {
    const EMPTY: Cell =
        Cell { head: NIL, tail: NIL, active_pos: NIL, last_activity: CaptureTimestamp::ZERO };
}

#[derive(Debug)]
struct Slot {
    msg: Option<HttpMessage>,
    next: u32,
}

#[derive(Debug)]
pub struct MatchTable {
    cells: Vec<Cell>,
    mask: Option<u32>,
    slots: Vec<Slot>,
    free: u32,
    pool_capacity: usize,
    active: Vec<u32>,
    pending: usize,
    counters: MatchCounters,
}

impl MatchTable {
    pub fn new(cfg: TableConfig) -> Result<Self, ConfigError> {
        if cfg.cells == 0 {
            return Err(ConfigError::NoCells);
        }
        if cfg.cells > u32::MAX as usize || cfg.pool_capacity >= NIL as usize {
            return Err(ConfigError::TooLarge(cfg.cells.max(cfg.pool_capacity)));
        }
        if cfg.pool_capacity == 0 {
            return Err(ConfigError::NoPool);
        }
        let mask = cfg.cells.is_power_of_two().then(|| (cfg.cells - 1) as u32);
        Ok(MatchTable {
            cells: vec![Cell::EMPTY; cfg.cells],
            mask,
            slots: Vec::new(),
            free: NIL,
            pool_capacity: cfg.pool_capacity,
            active: Vec::new(),
            pending: 0,
            counters: MatchCounters::default(),
        })
    }

    pub fn size(&self) -> usize {
        self.cells.len()
    }

    /// Messages currently waiting for a counterpart.
    pub fn pending(&self) -> usize {
        self.pending
    }

    pub fn is_empty(&self) -> bool {
        self.pending == 0
    }

    pub fn counters(&self) -> &MatchCounters {
        &self.counters
    }

    #[inline]
    fn cell_index(&self, hash: u32) -> usize {
        match self.mask {
            Some(m) => (hash & m) as usize,
            None => hash as usize % self.cells.len(),
        }
    }

    fn alloc(&mut self, msg: HttpMessage) -> Option<u32> {
        if self.free != NIL {
            let idx = self.free;
            let slot = &mut self.slots[idx as usize];
            self.free = slot.next;
            slot.msg = Some(msg);
            slot.next = NIL;
            Some(idx)
        } else if self.slots.len() < self.pool_capacity {
            self.slots.push(Slot { msg: Some(msg), next: NIL });
            Some((self.slots.len() - 1) as u32)
        } else {
            None
        }
    }

    fn release(&mut self, idx: u32) -> HttpMessage {
        let slot = &mut self.slots[idx as usize];
        let msg = slot.msg.take().expect("released slot holds a message");
        slot.next = self.free;
        self.free = idx;
        msg
    }

    fn deactivate(&mut self, cell: usize) {
        let pos = self.cells[cell].active_pos as usize;
        self.active.swap_remove(pos);
        if let Some(&moved) = self.active.get(pos) {
            self.cells[moved as usize].active_pos = pos as u32;
        }
        self.cells[cell].active_pos = NIL;
    }

    /// Offers a message to the table. Returns the matched record when the
    /// message completes a transaction.
    pub fn insert(&mut self, msg: HttpMessage) -> Result<Option<TransactionRecord>, InsertError> {
        match msg.kind() {
            MessageKind::Request => self.counters.requests += 1,
            MessageKind::Response => self.counters.responses += 1,
        }
        let hash = match hash_transaction(&msg) {
            Ok(h) => h,
            Err(e) => {
                self.counters.dropped_missing_ack += 1;
                return Err(e.into());
            }
        };
        let cell = self.cell_index(hash.0);

        let mut prev = NIL;
        let mut cur = self.cells[cell].head;
        while cur != NIL {
            let slot = &self.slots[cur as usize];
            let next = slot.next;
            let stored = slot.msg.as_ref().expect("linked slot holds a message");
            if counterparts(stored, &msg) {
                if prev == NIL {
                    self.cells[cell].head = next;
                } else {
                    self.slots[prev as usize].next = next;
                }
                if self.cells[cell].tail == cur {
                    self.cells[cell].tail = prev;
                }
                let stored = self.release(cur);
                self.pending -= 1;
                if self.cells[cell].head == NIL {
                    self.deactivate(cell);
                }
                self.counters.matched += 1;
                let rec = match msg.kind() {
                    MessageKind::Request => TransactionRecord::matched(&msg, &stored),
                    MessageKind::Response => TransactionRecord::matched(&stored, &msg),
                };
                return Ok(Some(rec));
            }
            prev = cur;
            cur = next;
        }

        let ts = msg.header.ts;
        let Some(idx) = self.alloc(msg) else {
            self.counters.dropped_pool += 1;
            return Err(InsertError::PoolExhausted);
        };
        self.pending += 1;
        let c = &mut self.cells[cell];
        if c.head == NIL {
            c.head = idx;
            c.tail = idx;
            c.last_activity = ts;
            c.active_pos = self.active.len() as u32;
            self.active.push(cell as u32);
        } else {
            let tail = c.tail;
            c.tail = idx;
            c.last_activity = c.last_activity.max(ts);
            self.slots[tail as usize].next = idx;
        }
        Ok(None)
    }

    fn evict_cell(&mut self, cell: usize, out: &mut impl FnMut(TransactionRecord)) {
        let mut cur = self.cells[cell].head;
        while cur != NIL {
            let next = self.slots[cur as usize].next;
            let msg = self.release(cur);
            self.pending -= 1;
            self.counters.unmatched += 1;
            out(TransactionRecord::unmatched(&msg));
            cur = next;
        }
        self.cells[cell].head = NIL;
        self.cells[cell].tail = NIL;
        self.deactivate(cell);
    }

    /// Evicts every cell idle for longer than `idle_timeout` before `now`,
    /// emitting each message as an unmatched record.
    pub fn gc_sweep_with(
        &mut self,
        now: CaptureTimestamp,
        idle_timeout: Duration,
        out: &mut impl FnMut(TransactionRecord),
    ) {
        let Some(cutoff) = now.as_nanos().checked_sub(idle_timeout.as_nanos()) else {
            return;
        };
        let cutoff = CaptureTimestamp::from_nanos(cutoff);
        let mut i = 0;
        while i < self.active.len() {
            let cell = self.active[i] as usize;
            if self.cells[cell].last_activity < cutoff {
                // swap_remove moves another cell into position i
                self.evict_cell(cell, out);
            } else {
                i += 1;
            }
        }
    }

    pub fn gc_sweep(&mut self, now: CaptureTimestamp, policy: &GcPolicy) -> Vec<TransactionRecord> {
        let mut out = Vec::new();
        self.gc_sweep_with(now, policy.idle_timeout, &mut |r| out.push(r));
        out
    }

    /// Emits every pending message as an unmatched record, leaving the table
    /// empty.
    pub fn drain_with(&mut self, out: &mut impl FnMut(TransactionRecord)) {
        while let Some(&cell) = self.active.first() {
            self.evict_cell(cell as usize, out);
        }
    }

    pub fn drain(&mut self) -> Vec<TransactionRecord> {
        let mut out = Vec::new();
        self.drain_with(&mut |r| out.push(r));
        out
    }

    /// Checks that every pending message sits in the cell its hash selects
    /// and that the bookkeeping is consistent.
    pub fn verify_residency(&self) -> bool {
        let mut seen = 0usize;
        for (pos, &cell) in self.active.iter().enumerate() {
            let c = &self.cells[cell as usize];
            if c.active_pos as usize != pos || c.head == NIL {
                return false;
            }
            let mut cur = c.head;
            let mut last = NIL;
            while cur != NIL {
                let Some(msg) = self.slots[cur as usize].msg.as_ref() else {
                    return false;
                };
                match hash_transaction(msg) {
                    Ok(h) if self.cell_index(h.0) == cell as usize => {}
                    _ => return false,
                }
                seen += 1;
                last = cur;
                cur = self.slots[cur as usize].next;
            }
            if last != c.tail {
                return false;
            }
        }
        seen == self.pending
    }
}

/// A single consumer's correlation engine: a table plus the capture clock
/// that drives garbage collection.
#[derive(Debug)]
pub struct Correlator {
    table: MatchTable,
    policy: GcPolicy,
    clock: Option<CaptureTimestamp>,
    next_sweep: CaptureTimestamp,
}

impl Correlator {
    pub fn new(table: TableConfig, policy: GcPolicy) -> Result<Self, ConfigError> {
        policy.validate()?;
        Ok(Correlator {
            table: MatchTable::new(table)?,
            policy,
            clock: None,
            next_sweep: CaptureTimestamp::ZERO,
        })
    }

    pub fn table(&self) -> &MatchTable {
        &self.table
    }

    pub fn counters(&self) -> &MatchCounters {
        self.table.counters()
    }

    pub fn clock(&self) -> Option<CaptureTimestamp> {
        self.clock
    }

    /// Moves the capture clock forward (never backwards) and runs a sweep
    /// once it passes the next deadline.
    pub fn advance_clock(&mut self, ts: CaptureTimestamp, out: &mut impl FnMut(TransactionRecord)) {
        let now = match self.clock {
            None => {
                self.next_sweep = ts.saturating_add(self.policy.sweep_period);
                ts
            }
            Some(c) => c.max(ts),
        };
        self.clock = Some(now);
        if now >= self.next_sweep {
            self.table.gc_sweep_with(now, self.policy.idle_timeout, out);
            self.next_sweep = now.saturating_add(self.policy.sweep_period);
        }
    }

    /// Inserts a message then advances the clock to its timestamp. Dropped
    /// messages are reflected in the counters only.
    pub fn process(&mut self, msg: HttpMessage, out: &mut impl FnMut(TransactionRecord)) {
        let ts = msg.header.ts;
        if let Ok(Some(rec)) = self.table.insert(msg) {
            out(rec);
        }
        self.advance_clock(ts, out);
    }

    /// End-of-input flush.
    pub fn finish(&mut self, out: &mut impl FnMut(TransactionRecord)) {
        self.table.drain_with(out);
    }
}
