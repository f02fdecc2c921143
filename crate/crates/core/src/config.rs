//! Runtime configuration, read from the environment.

use std::path::PathBuf;

pub const ENV_OUT_DIR: &str = "XFLOW_OUT_DIR";
pub const ENV_TIMING_RATE: &str = "XFLOW_TIMING_RATE";
pub const ENV_DUMP_SIGNAL: &str = "XFLOW_DUMP_SIGNAL";
pub const ENV_DENY_IMAGES: &str = "XFLOW_DENY_IMAGES";
pub const ENV_SHADOW_DEPTH: &str = "XFLOW_SHADOW_DEPTH";
/// Debug aid: write the planned site list to this path at startup.
pub const ENV_SITE_DUMP: &str = "XFLOW_SITE_DUMP";

pub const DEFAULT_OUT_DIR: &str = "./xflow-out";
pub const DEFAULT_SHADOW_DEPTH: usize = 4096;
pub const DEFAULT_DENY: &[&str] = &["[vdso]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentConfig {
    pub out_dir: PathBuf,
    pub timing_rate: u32,
    pub dump_signal: Option<i32>,
    pub deny: Vec<String>,
    pub shadow_depth: usize,
    pub site_dump: Option<PathBuf>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from(DEFAULT_OUT_DIR),
            timing_rate: 1,
            dump_signal: None,
            deny: DEFAULT_DENY.iter().map(|s| s.to_string()).collect(),
            shadow_depth: DEFAULT_SHADOW_DEPTH,
            site_dump: None,
        }
    }
}

impl AgentConfig {
    /// Build from a variable lookup. Invalid values fall back to defaults and
    /// are reported in the returned warnings.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> (Self, Vec<String>) {
        let mut c = Self::default();
        let mut warnings = Vec::new();
        if let Some(dir) = get(ENV_OUT_DIR).filter(|d| !d.is_empty()) {
            c.out_dir = PathBuf::from(dir);
        }
        if let Some(v) = get(ENV_TIMING_RATE) {
            match v.trim().parse::<u32>() {
                Ok(n) if n >= 1 => c.timing_rate = n,
                _ => warnings.push(format!("{ENV_TIMING_RATE}={v:?} is not a positive integer; using 1")),
            }
        }
        if let Some(v) = get(ENV_DUMP_SIGNAL).filter(|v| !v.is_empty()) {
            match parse_signal(&v) {
                Some(s) => c.dump_signal = Some(s),
                None => warnings.push(format!("{ENV_DUMP_SIGNAL}={v:?} is not a signal; dumps disabled")),
            }
        }
        if let Some(v) = get(ENV_DENY_IMAGES) {
            c.deny.extend(v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from));
        }
        if let Some(v) = get(ENV_SHADOW_DEPTH) {
            match v.trim().parse::<usize>() {
                Ok(n) if n >= 1 => c.shadow_depth = n,
                _ => warnings.push(format!("{ENV_SHADOW_DEPTH}={v:?} is not a positive integer; using {DEFAULT_SHADOW_DEPTH}")),
            }
        }
        c.site_dump = get(ENV_SITE_DUMP).filter(|v| !v.is_empty()).map(PathBuf::from);
        (c, warnings)
    }

    pub fn from_env() -> (Self, Vec<String>) {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn is_denied(&self, path: &str) -> bool {
        self.deny.iter().any(|d| path.contains(d.as_str()))
    }
}

const SIGNALS: &[(&str, i32)] = &[
    ("HUP", 1),
    ("INT", 2),
    ("QUIT", 3),
    ("USR1", 10),
    ("USR2", 12),
    ("ALRM", 14),
    ("TERM", 15),
    ("CONT", 18),
    ("TSTP", 20),
    ("WINCH", 28),
    ("PWR", 30),
];

/// Accepts `USR1`, `SIGUSR1` or a number in 1..=64.
pub fn parse_signal(s: &str) -> Option<i32> {
    let s = s.trim();
    if let Ok(n) = s.parse::<i32>() {
        return (1..=64).contains(&n).then_some(n);
    }
    let up = s.to_ascii_uppercase();
    let name = up.strip_prefix("SIG").unwrap_or(&up);
    SIGNALS.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
}
