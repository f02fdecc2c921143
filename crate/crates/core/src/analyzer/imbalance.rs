use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Aggregate;

pub const DEFAULT_IMBALANCE_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    /// Start-routine address of the group, hex; 0 is the main thread.
    pub group: String,
    pub threads: u64,
    pub mean_exec_cycles: u64,
    pub mean_wait_cycles: u64,
    pub mean_exec_seconds: f64,
    pub mean_wait_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub groups: Vec<GroupRow>,
    /// max/min of mean exec time over the compared groups.
    pub ratio: f64,
    pub threshold: f64,
    pub flagged: bool,
    pub diagnostics: Vec<String>,
}

/// Compare thread groups by mean execution (non-wait) time. The main thread's
/// group is listed but left out of the ratio when worker groups exist, since
/// it mostly orchestrates.
pub fn imbalance_report(agg: &Aggregate, threshold: f64) -> ImbalanceReport {
    let mut acc: BTreeMap<u64, (u64, u128, u128)> = BTreeMap::new();
    for t in agg.threads.values() {
        let e = acc.entry(t.group).or_default();
        e.0 += 1;
        e.1 += t.exec_cycles() as u128;
        e.2 += t.wait_raw_cycles as u128;
    }
    let groups: Vec<GroupRow> = acc
        .iter()
        .map(|(&g, &(n, exec, wait))| {
            let me = (exec / n as u128) as u64;
            let mw = (wait / n as u128) as u64;
            GroupRow {
                group: format!("{g:#x}"),
                threads: n,
                mean_exec_cycles: me,
                mean_wait_cycles: mw,
                mean_exec_seconds: agg.seconds(me),
                mean_wait_seconds: agg.seconds(mw),
            }
        })
        .collect();

    let mut diagnostics = Vec::new();
    let workers: Vec<&GroupRow> = groups.iter().filter(|g| g.group != "0x0").collect();
    let compared: Vec<&GroupRow> = if workers.is_empty() { groups.iter().collect() } else { workers };
    let execs: Vec<u64> = compared.iter().map(|g| g.mean_exec_cycles).collect();
    let (max, min) = (execs.iter().copied().max().unwrap_or(0), execs.iter().copied().min().unwrap_or(0));
    let ratio = if execs.len() < 2 || max == 0 {
        1.0
    } else {
        if min == 0 {
            diagnostics.push("a thread group has zero execution time".into());
        }
        max as f64 / min.max(1) as f64
    };
    if groups.is_empty() {
        diagnostics.push("no thread ledgers".into());
    }
    ImbalanceReport { groups, ratio, threshold, flagged: ratio > threshold, diagnostics }
}
