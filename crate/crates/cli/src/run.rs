use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use anyhow::{bail, Context, Result};
use xflow_core::config::{
    DEFAULT_OUT_DIR, ENV_DENY_IMAGES, ENV_DUMP_SIGNAL, ENV_OUT_DIR, ENV_SHADOW_DEPTH, ENV_TIMING_RATE,
};
use xflow_core::format::parse_file_name;

use crate::RunArgs;

pub const AGENT_FILE: &str = "libxflow_agent.so";
const ENV_AGENT: &str = "XFLOW_AGENT";

/// Flag, then `XFLOW_AGENT`, then next to the executable (or in a sibling
/// `lib` directory for installed layouts).
fn find_agent(flag: Option<&Path>) -> Result<PathBuf> {
    let explicit = flag.map(Path::to_path_buf).or_else(|| std::env::var_os(ENV_AGENT).map(PathBuf::from));
    if let Some(p) = explicit {
        if p.is_file() {
            return Ok(p);
        }
        bail!("agent {} not found", p.display());
    }
    let exe = std::env::current_exe().context("locating the xflow executable")?;
    let dir = exe.parent().unwrap_or(Path::new("."));
    let candidates = [dir.join(AGENT_FILE), dir.join("../lib").join(AGENT_FILE), dir.join("../lib/xflow").join(AGENT_FILE)];
    if let Some(p) = candidates.iter().find(|p| p.is_file()) {
        return Ok(p.clone());
    }
    bail!(
        "agent {AGENT_FILE} not found next to {}; build it with `cargo build -p xflow-agent` or pass --agent / set {ENV_AGENT}",
        exe.display()
    )
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        Ok(p.to_path_buf())
    } else {
        Ok(std::env::current_dir()?.join(p))
    }
}

pub fn ledger_count(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .map(|d| {
            d.filter_map(|e| e.ok())
                .filter(|e| e.file_name().to_str().and_then(parse_file_name).is_some())
                .count()
        })
        .unwrap_or(0)
}

pub fn run(a: &RunArgs) -> Result<ExitCode> {
    let agent = absolute(&find_agent(a.agent.as_deref())?)?;
    let out = match &a.out {
        Some(p) => p.clone(),
        None => std::env::var_os(ENV_OUT_DIR).filter(|v| !v.is_empty()).map(PathBuf::from).unwrap_or(DEFAULT_OUT_DIR.into()),
    };
    let out = absolute(&out)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let (prog, args) = a.command.split_first().context("no command given")?;
    let mut cmd = Command::new(prog);
    cmd.args(args).env(ENV_OUT_DIR, &out);

    let mut preload = OsString::from(agent.as_os_str());
    if let Some(prev) = std::env::var_os("LD_PRELOAD").filter(|v| !v.is_empty()) {
        preload.push(":");
        preload.push(prev);
    }
    cmd.env("LD_PRELOAD", preload);
    if let Some(n) = a.timing_rate {
        cmd.env(ENV_TIMING_RATE, n.to_string());
    }
    if let Some(s) = &a.dump_signal {
        cmd.env(ENV_DUMP_SIGNAL, s);
    }
    if !a.deny.is_empty() {
        cmd.env(ENV_DENY_IMAGES, a.deny.join(","));
    }
    if let Some(n) = a.shadow_depth {
        cmd.env(ENV_SHADOW_DEPTH, n.to_string());
    }

    let status = cmd.status().with_context(|| format!("cannot start {prog}"))?;
    eprintln!("xflow: {} ledger file(s) in {}", ledger_count(&out), out.display());

    use std::os::unix::process::ExitStatusExt;
    let code = match (status.code(), status.signal()) {
        (Some(c), _) => c,
        (None, Some(sig)) => 128 + sig,
        _ => 1,
    };
    Ok(ExitCode::from(code.clamp(0, 255) as u8))
}
