//! Synthetic inputs shared by the benchmarks.

use xflow_core::analyzer::LedgerInput;
use xflow_core::format::file_name;
use xflow_core::{LedgerFile, LedgerRow, SiteKind};

/// A ledger with `rows` sites spread over four images.
pub fn ledger(ordinal: u32, rows: u32) -> LedgerFile {
    LedgerFile {
        ordinal,
        group: 0x4000 + (ordinal % 3) as u64,
        hz: 2_100_000_000,
        total_cycles: 50_000_000_000,
        images: (0..4).map(|i| (i, format!("/opt/app/lib/libpart{i}.so"))).collect(),
        rows: (0..rows)
            .map(|s| LedgerRow {
                site: s,
                caller_image: s % 4,
                symbol: format!("api_{:04}", s / 2),
                kind: SiteKind::ALL[(s % 4) as usize],
                count: 1_000 + s as u64,
                timed_count: 1_000 + s as u64,
                raw_cycles: 90_000 * (s as u64 + 1),
                attributed_cycles: 30_000 * (s as u64 + 1),
                callee_image: Some((s + 1) % 4),
            })
            .collect(),
    }
}

/// `threads` ledgers of one process.
pub fn inputs(threads: u32, rows: u32) -> Vec<LedgerInput> {
    (0..threads)
        .map(|t| LedgerInput { name: file_name(7, t), pid: 7, file: ledger(t, rows) })
        .collect()
}
