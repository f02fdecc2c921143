//! Native fixtures and the helpers end-to-end tests use to run them under the
//! agent, read the resulting ledgers and compare them with the fixtures'
//! own brute-force event log.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use xflow_core::analyzer::{self, basename, LedgerInput, Totals};
use xflow_core::SiteKind;

/// Reported by tests that need the fixtures when none could be built.
pub const SKIPPED: &str = "skipped: no toolchain";

/// Directory holding the compiled fixtures, or `None` without a toolchain.
pub fn fixture_dir() -> Option<&'static Path> {
    let d = env!("XFLOW_FIXTURE_DIR");
    (!d.is_empty()).then(|| Path::new(d))
}

pub fn fixture(name: &str) -> PathBuf {
    fixture_dir().expect(SKIPPED).join(name)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The agent shared object. `XFLOW_AGENT` wins; otherwise the workspace's
/// agent is built once, with the profile of the running test binary.
pub fn agent_path() -> &'static Path {
    static AGENT: OnceLock<PathBuf> = OnceLock::new();
    AGENT.get_or_init(|| {
        if let Some(p) = std::env::var_os("XFLOW_AGENT") {
            return PathBuf::from(p);
        }
        let exe = std::env::current_exe().expect("current exe");
        // target/<profile>/deps/<test binary>
        let profile_dir = exe.parent().and_then(Path::parent).expect("test binary under target/<profile>/deps");
        let target_dir = profile_dir.parent().expect("target dir");
        let release = profile_dir.file_name().is_some_and(|n| n == "release");
        let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
        let mut cmd = Command::new(cargo);
        cmd.args(["build", "--quiet", "-p", "xflow-agent", "--manifest-path"])
            .arg(workspace_root().join("Cargo.toml"))
            .env("CARGO_TARGET_DIR", target_dir);
        if release {
            cmd.arg("--release");
        }
        let status = cmd.status().expect("running cargo build for the agent");
        assert!(status.success(), "building the agent failed");
        profile_dir.join("libxflow_agent.so")
    })
}

/// How to launch a fixture.
#[derive(Debug, Clone, Default)]
pub struct Launch {
    pub env: Vec<(String, String)>,
    pub traced: bool,
    pub oracle: bool,
}

impl Launch {
    pub fn traced() -> Self {
        Self { traced: true, ..Self::default() }
    }

    pub fn plain() -> Self {
        Self::default()
    }

    pub fn with_oracle(mut self) -> Self {
        self.oracle = true;
        self
    }

    pub fn env(mut self, k: &str, v: &str) -> Self {
        self.env.push((k.to_string(), v.to_string()));
        self
    }
}

/// A finished fixture run with its own output directory.
pub struct Run {
    pub output: Output,
    pub dir: tempfile::TempDir,
}

impl Run {
    pub fn stdout(&self) -> String {
        String::from_utf8_lossy(&self.output.stdout).into_owned()
    }

    pub fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.output.stderr).into_owned()
    }

    pub fn success(&self) -> bool {
        self.output.status.success()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    pub fn oracle_path(&self) -> PathBuf {
        self.dir.path().join("oracle.log")
    }

    pub fn ledgers(&self) -> Vec<LedgerInput> {
        analyzer::load_dir(&self.out_dir()).map(|(l, _)| l).unwrap_or_default()
    }

    pub fn ledger_names(&self) -> Vec<String> {
        let mut v: Vec<_> = std::fs::read_dir(self.out_dir())
            .map(|d| d.filter_map(|e| e.ok()).filter_map(|e| e.file_name().into_string().ok()).collect())
            .unwrap_or_default();
        v.sort();
        v
    }

    pub fn oracle(&self) -> Vec<OracleEvent> {
        std::fs::read_to_string(self.oracle_path()).map(|t| parse_oracle(&t)).unwrap_or_default()
    }

    /// `key=value` from the fixture's last line mentioning `key`.
    pub fn field(&self, key: &str) -> Option<String> {
        let needle = format!("{key}=");
        self.stdout().lines().rev().find_map(|l| {
            l.split_whitespace().find_map(|w| w.strip_prefix(needle.as_str()).map(str::to_string))
        })
    }
}

/// Run fixture `bin` with `args`. Ledgers go to `<tempdir>/out`.
pub fn run(bin: &str, args: &[&str], launch: &Launch) -> Run {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut cmd = Command::new(fixture(bin));
    cmd.args(args).current_dir(dir.path());
    for k in ["LD_PRELOAD", "LD_BIND_NOW", "XFLOW_ORACLE", "XFLOW_TIMING_RATE", "XFLOW_DUMP_SIGNAL", "XFLOW_DENY_IMAGES"] {
        cmd.env_remove(k);
    }
    cmd.env("XFLOW_OUT_DIR", dir.path().join("out"));
    if launch.traced {
        cmd.env("LD_PRELOAD", agent_path());
    }
    if launch.oracle {
        cmd.env("XFLOW_ORACLE", "1").env("XFLOW_ORACLE_OUT", dir.path().join("oracle.log"));
    }
    for (k, v) in &launch.env {
        cmd.env(k, v);
    }
    let output = cmd.output().unwrap_or_else(|e| panic!("running {bin}: {e}"));
    Run { output, dir }
}

/// Row key used by the checks: caller file name and symbol.
pub type Key = (String, String);

pub fn key(caller: &str, symbol: &str) -> Key {
    (caller.to_string(), symbol.to_string())
}

/// Sum every thread's rows by (caller file name, symbol).
pub fn totals(ledgers: &[LedgerInput]) -> BTreeMap<Key, Totals> {
    let mut m: BTreeMap<Key, Totals> = BTreeMap::new();
    for l in ledgers {
        for r in &l.file.rows {
            let caller = l.file.image_path(r.caller_image).map(basename).unwrap_or("?");
            m.entry(key(caller, &r.symbol)).or_default().add(&Totals {
                count: r.count,
                timed_count: r.timed_count,
                raw_cycles: r.raw_cycles,
                attributed_cycles: r.attributed_cycles,
            });
        }
    }
    m
}

/// Site kinds seen for each (caller, symbol).
pub fn kinds(ledgers: &[LedgerInput]) -> BTreeMap<Key, Vec<SiteKind>> {
    let mut m: BTreeMap<Key, Vec<SiteKind>> = BTreeMap::new();
    for l in ledgers {
        for r in &l.file.rows {
            let caller = l.file.image_path(r.caller_image).map(basename).unwrap_or("?");
            let v = m.entry(key(caller, &r.symbol)).or_default();
            if !v.contains(&r.kind) {
                v.push(r.kind);
            }
        }
    }
    m
}

/// Count of `symbol` called from `caller` summed over threads.
pub fn count(ledgers: &[LedgerInput], caller: &str, symbol: &str) -> u64 {
    totals(ledgers).get(&key(caller, symbol)).map_or(0, |t| t.count)
}

/// One bracketed call from the fixture's own log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleEvent {
    pub tid: u64,
    pub caller: String,
    pub symbol: String,
    pub enter: u64,
    pub exit: u64,
}

pub fn parse_oracle(text: &str) -> Vec<OracleEvent> {
    text.lines()
        .filter_map(|l| {
            let f: Vec<_> = l.split('\t').collect();
            if f.len() != 5 {
                return None;
            }
            Some(OracleEvent {
                tid: f[0].parse().ok()?,
                caller: f[1].to_string(),
                symbol: f[2].to_string(),
                enter: f[3].parse().ok()?,
                exit: f[4].parse().ok()?,
            })
        })
        .collect()
}

/// Per (caller, symbol): number of events and summed cycles.
pub fn oracle_totals(events: &[OracleEvent]) -> BTreeMap<Key, (u64, u64)> {
    let mut m: BTreeMap<Key, (u64, u64)> = BTreeMap::new();
    for e in events {
        let t = m.entry(key(&e.caller, &e.symbol)).or_default();
        t.0 += 1;
        t.1 += e.exit.saturating_sub(e.enter);
    }
    m
}

/// Events per thread id, sorted by count.
pub fn oracle_per_thread(events: &[OracleEvent], symbol: &str) -> Vec<u64> {
    let mut m: BTreeMap<u64, u64> = BTreeMap::new();
    for e in events.iter().filter(|e| e.symbol == symbol) {
        *m.entry(e.tid).or_default() += 1;
    }
    let mut v: Vec<_> = m.into_values().collect();
    v.sort_unstable();
    v
}

/// Per-thread count of `symbol`, sorted.
pub fn per_thread(ledgers: &[LedgerInput], symbol: &str) -> Vec<u64> {
    let mut v: Vec<u64> = ledgers
        .iter()
        .map(|l| l.file.rows.iter().filter(|r| r.symbol == symbol).map(|r| r.count).sum())
        .filter(|&c| c > 0)
        .collect();
    v.sort_unstable();
    v
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_lines() {
        let ev = parse_oracle("7\tfx_driver\tfx_noop\t100\t150\n7\tfx_driver\tfx_noop\t200\t260\nbad line\n");
        assert_eq!(ev.len(), 2);
        assert_eq!(oracle_totals(&ev)[&key("fx_driver", "fx_noop")], (2, 110));
        assert_eq!(oracle_per_thread(&ev, "fx_noop"), vec![2]);
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }
}
