//! Offline merge of ledger files and the views built on top of the merge.

mod imbalance;
mod owners;
mod render;
mod views;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::format::{parse_file_name, FormatError, LedgerFile};
use crate::site::SiteKind;

pub use imbalance::{imbalance_report, GroupRow, ImbalanceReport, DEFAULT_IMBALANCE_THRESHOLD};
pub use owners::{ElfOwners, NoOwners, OwnerResolver, AGENT_MARKER_SYMBOL};
pub use render::{render, Document, Format, Report, SCHEMA};
pub use views::{api_view, component_view, percentages, ApiRow, ApiView, ComponentView, RowCategory, ViewRow};

/// Blocking calls reported as Wait rather than as time spent in a callee.
pub const DEFAULT_WAIT_SYMBOLS: &[&str] = &[
    "pthread_cond_wait",
    "pthread_cond_timedwait",
    "pthread_cond_clockwait",
    "pthread_barrier_wait",
    "pthread_join",
    "pthread_timedjoin_np",
    "pthread_clockjoin_np",
    "sem_wait",
    "sem_timedwait",
    "sem_clockwait",
    "sleep",
    "usleep",
    "nanosleep",
    "clock_nanosleep",
    "pause",
    "sigwait",
    "sigsuspend",
    "sigtimedwait",
    "sigwaitinfo",
    // std::condition_variable::wait(unique_lock&), std::thread::join()
    "_ZNSt18condition_variable4waitERSt11unique_lockISt5mutexE",
    "_ZNSt6thread4joinEv",
];

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzerConfig {
    pub wait_symbols: HashSet<String>,
    pub imbalance_threshold: f64,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        Self {
            wait_symbols: DEFAULT_WAIT_SYMBOLS.iter().map(|s| s.to_string()).collect(),
            imbalance_threshold: DEFAULT_IMBALANCE_THRESHOLD,
        }
    }
}

impl AnalyzerConfig {
    pub fn is_wait(&self, symbol: &str) -> bool {
        self.wait_symbols.contains(symbol)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AnalyzeError {
    #[error("no ledgers found in {0}")]
    NoLedgers(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unknown component {name:?}; known: {}", known.join(", "))]
    UnknownComponent { name: String, known: Vec<String> },
    #[error("component name {name:?} is ambiguous: {}", matches.join(", "))]
    Ambiguous { name: String, matches: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub count: u64,
    pub timed_count: u64,
    pub raw_cycles: u64,
    pub attributed_cycles: u64,
}

impl Totals {
    pub fn add(&mut self, o: &Totals) {
        self.count = self.count.saturating_add(o.count);
        self.timed_count = self.timed_count.saturating_add(o.timed_count);
        self.raw_cycles = self.raw_cycles.saturating_add(o.raw_cycles);
        self.attributed_cycles = self.attributed_cycles.saturating_add(o.attributed_cycles);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowKey {
    pub caller: String,
    pub symbol: String,
    pub kind: SiteKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AggRow {
    pub totals: Totals,
    /// Path of the image that defines the symbol.
    pub owner: Option<String>,
}

/// Identifies one thread's ledger across processes and file variants.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ThreadKey {
    pub pid: u32,
    pub ordinal: u32,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ThreadSummary {
    pub group: u64,
    pub total_cycles: u64,
    pub wait_raw_cycles: u64,
    pub wait_attributed_cycles: u64,
}

impl ThreadSummary {
    /// Wall time not spent blocked in a wait-set API.
    pub fn exec_cycles(&self) -> u64 {
        self.total_cycles.saturating_sub(self.wait_raw_cycles)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Aggregate {
    pub rows: BTreeMap<RowKey, AggRow>,
    pub images: BTreeSet<String>,
    /// Path of image 0 (the main executable).
    pub main_image: Option<String>,
    pub threads: BTreeMap<ThreadKey, ThreadSummary>,
    pub hz: u64,
    pub warnings: Vec<String>,
}

impl Aggregate {
    /// Wall time of the process: the main thread's lifetime, summed over
    /// processes; falls back to the longest thread when no main ledger exists.
    pub fn process_total(&self) -> u64 {
        let mut per_pid: BTreeMap<u32, (Option<u64>, u64)> = BTreeMap::new();
        for (k, t) in &self.threads {
            let e = per_pid.entry(k.pid).or_default();
            if k.ordinal == 0 {
                e.0 = Some(e.0.unwrap_or(0).max(t.total_cycles));
            }
            e.1 = e.1.max(t.total_cycles);
        }
        per_pid.values().map(|(main, max)| main.unwrap_or(*max)).fold(0u64, u64::saturating_add)
    }

    pub fn seconds(&self, cycles: u64) -> f64 {
        if self.hz == 0 {
            0.0
        } else {
            cycles as f64 / self.hz as f64
        }
    }

    /// Column sums over every row.
    pub fn grand_totals(&self) -> Totals {
        let mut t = Totals::default();
        for r in self.rows.values() {
            t.add(&r.totals);
        }
        t
    }

    /// Resolve a user-supplied component name to an image path: exact path,
    /// then exact file name, then a unique substring.
    pub fn find_image(&self, name: &str) -> Result<String, AnalyzeError> {
        if self.images.contains(name) {
            return Ok(name.to_string());
        }
        let by_base: Vec<_> = self.images.iter().filter(|p| basename(p) == name).cloned().collect();
        let candidates = if by_base.is_empty() {
            self.images.iter().filter(|p| p.contains(name)).cloned().collect()
        } else {
            by_base
        };
        match candidates.len() {
            1 => Ok(candidates.into_iter().next().unwrap_or_default()),
            0 => Err(AnalyzeError::UnknownComponent {
                name: name.to_string(),
                known: self.images.iter().map(|p| basename(p).to_string()).collect(),
            }),
            _ => Err(AnalyzeError::Ambiguous { name: name.to_string(), matches: candidates }),
        }
    }
}

pub fn basename(path: &str) -> &str {
    path.rsplit('/').next().unwrap_or(path)
}

/// One parsed ledger file plus where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerInput {
    pub name: String,
    pub pid: u32,
    pub file: LedgerFile,
}

/// Read every `xflow.*.tsv` in `dir` (not recursing into snapshot folders).
/// Unreadable or incompatible files become warnings.
pub fn load_dir(dir: &Path) -> Result<(Vec<LedgerInput>, Vec<String>), AnalyzeError> {
    let io = |source| AnalyzeError::Io { path: dir.display().to_string(), source };
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .filter(|n| parse_file_name(n).is_some())
        .collect();
    names.sort();
    let mut inputs = Vec::new();
    let mut warnings = Vec::new();
    for name in names {
        let path = dir.join(&name);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => {
                warnings.push(format!("{name}: {e}"));
                continue;
            }
        };
        match parse_input(&name, &text) {
            Ok((input, w)) => {
                inputs.push(input);
                warnings.extend(w);
            }
            Err(e) => warnings.push(format!("{name}: {e}")),
        }
    }
    if inputs.is_empty() {
        return Err(AnalyzeError::NoLedgers(dir.display().to_string()));
    }
    Ok((inputs, warnings))
}

pub fn parse_input(name: &str, text: &str) -> Result<(LedgerInput, Vec<String>), FormatError> {
    let (file, errs) = LedgerFile::parse(text)?;
    let pid = parse_file_name(name).map(|(p, _)| p).unwrap_or(0);
    let warnings = errs.into_iter().map(|e| format!("{name}:{}: {}", e.line, e.reason)).collect();
    Ok((LedgerInput { name: name.to_string(), pid, file }, warnings))
}

/// Merge ledger files into one [`Aggregate`]. The result does not depend on
/// the order of `inputs`.
pub fn merge(inputs: &[LedgerInput], cfg: &AnalyzerConfig, owners: &dyn OwnerResolver) -> Aggregate {
    let mut agg = Aggregate::default();
    let mut main_key: Option<ThreadKey> = None;
    let mut hz_key: Option<ThreadKey> = None;

    for input in inputs {
        let f = &input.file;
        let key = ThreadKey { pid: input.pid, ordinal: f.ordinal, name: input.name.clone() };
        for (_, path) in &f.images {
            agg.images.insert(path.clone());
        }
        // Header-derived values come from the lowest-keyed file that has them.
        if let Some(main) = f.image_path(0) {
            if main_key.as_ref().is_none_or(|k| key < *k) {
                agg.main_image = Some(main.to_string());
                main_key = Some(key.clone());
            }
        }
        if f.hz > 0 && hz_key.as_ref().is_none_or(|k| key < *k) {
            agg.hz = f.hz;
            hz_key = Some(key.clone());
        }

        let ordered_paths: Vec<&str> = {
            let mut v: Vec<_> = f.images.iter().collect();
            v.sort_by_key(|(id, _)| *id);
            v.into_iter().map(|(_, p)| p.as_str()).collect()
        };
        let mut summary = ThreadSummary { group: f.group, total_cycles: f.total_cycles, ..Default::default() };
        for r in &f.rows {
            let Some(caller) = f.image_path(r.caller_image) else {
                agg.warnings.push(format!("{}: site {} names unknown image {}", input.name, r.site, r.caller_image));
                continue;
            };
            let owner = r
                .callee_image
                .and_then(|id| f.image_path(id))
                .map(str::to_string)
                .or_else(|| owners.owner(&r.symbol, &ordered_paths));
            let totals = Totals {
                count: r.count,
                timed_count: r.timed_count,
                raw_cycles: r.raw_cycles,
                attributed_cycles: r.attributed_cycles,
            };
            if cfg.is_wait(&r.symbol) {
                summary.wait_raw_cycles = summary.wait_raw_cycles.saturating_add(r.raw_cycles);
                summary.wait_attributed_cycles = summary.wait_attributed_cycles.saturating_add(r.attributed_cycles);
            }
            let row = agg
                .rows
                .entry(RowKey { caller: caller.to_string(), symbol: r.symbol.clone(), kind: r.kind })
                .or_default();
            row.totals.add(&totals);
            // Deterministic tie-break when files disagree on the owner.
            row.owner = match (row.owner.take(), owner) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
        }
        if agg.threads.insert(key.clone(), summary).is_some() {
            agg.warnings.push(format!("duplicate ledger {}", input.name));
        }
    }
    agg.warnings.sort();
    agg
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::format::LedgerRow;

    pub fn row(site: u32, caller: u32, sym: &str, count: u64, attr: u64, callee: Option<u32>) -> LedgerRow {
        LedgerRow {
            site,
            caller_image: caller,
            symbol: sym.into(),
            kind: SiteKind::PltLazy,
            count,
            timed_count: count,
            raw_cycles: attr,
            attributed_cycles: attr,
            callee_image: callee,
        }
    }

    pub fn input(ordinal: u32, group: u64, total: u64, rows: Vec<LedgerRow>) -> LedgerInput {
        LedgerInput {
            name: format!("xflow.1.{ordinal}.tsv"),
            pid: 1,
            file: LedgerFile {
                ordinal,
                group,
                hz: 1_000_000_000,
                total_cycles: total,
                images: vec![
                    (0, "/bin/app".into()),
                    (1, "/lib/libA.so".into()),
                    (2, "/lib/libB.so".into()),
                    (3, "/lib/libc.so.6".into()),
                ],
                rows,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn sums_two_threads() {
        let a = input(0, 0, 100, vec![row(0, 0, "f", 3, 30, Some(1))]);
        let b = input(1, 7, 50, vec![row(4, 0, "f", 4, 40, Some(1))]);
        let agg = merge(&[a, b], &AnalyzerConfig::default(), &NoOwners);
        assert_eq!(agg.rows.len(), 1);
        let r = agg.rows.values().next().unwrap();
        assert_eq!(r.totals.count, 7);
        assert_eq!(r.totals.attributed_cycles, 70);
        assert_eq!(r.owner.as_deref(), Some("/lib/libA.so"));
        assert_eq!(agg.process_total(), 100);
        assert_eq!(agg.main_image.as_deref(), Some("/bin/app"));
        assert_eq!(agg.threads.len(), 2);
    }

    #[test]
    fn header_only_contributes_thread() {
        let a = input(0, 0, 100, vec![row(0, 0, "f", 3, 30, Some(1))]);
        let b = input(1, 9, 5, vec![]);
        let agg = merge(&[a.clone(), b], &AnalyzerConfig::default(), &NoOwners);
        let solo = merge(&[a], &AnalyzerConfig::default(), &NoOwners);
        assert_eq!(agg.rows, solo.rows);
        assert_eq!(agg.threads.len(), 2);
    }

    #[test]
    fn relation_rows_stay_separate() {
        let a = input(0, 0, 100, vec![row(0, 0, "f", 5, 50, Some(1)), row(1, 2, "f", 7, 70, Some(1))]);
        let agg = merge(&[a], &AnalyzerConfig::default(), &NoOwners);
        assert_eq!(agg.rows.len(), 2);
    }

    #[test]
    fn wait_tracked_per_thread() {
        let a = input(1, 5, 1000, vec![row(0, 0, "pthread_join", 1, 600, Some(3)), row(1, 0, "f", 1, 100, Some(1))]);
        let agg = merge(&[a], &AnalyzerConfig::default(), &NoOwners);
        let t = agg.threads.values().next().unwrap();
        assert_eq!(t.wait_raw_cycles, 600);
        assert_eq!(t.exec_cycles(), 400);
    }

    #[test]
    fn find_image_rules() {
        let a = input(0, 0, 1, vec![]);
        let agg = merge(&[a], &AnalyzerConfig::default(), &NoOwners);
        assert_eq!(agg.find_image("libA.so").unwrap(), "/lib/libA.so");
        assert_eq!(agg.find_image("/bin/app").unwrap(), "/bin/app");
        assert_eq!(agg.find_image("libc").unwrap(), "/lib/libc.so.6");
        assert!(matches!(agg.find_image("lib"), Err(AnalyzeError::Ambiguous { .. })));
        assert!(matches!(agg.find_image("zzz"), Err(AnalyzeError::UnknownComponent { .. })));
    }

    #[test]
    fn process_total_fallback() {
        let a = input(3, 1, 70, vec![]);
        let b = input(4, 1, 90, vec![]);
        let agg = merge(&[a, b], &AnalyzerConfig::default(), &NoOwners);
        assert_eq!(agg.process_total(), 90);
    }
}
