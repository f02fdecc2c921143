//! Writing ledgers to disk.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;

use xflow_core::format::{self, LedgerFile, LedgerRow};
use xflow_core::timing::read_cycles;
use xflow_core::{ImageId, SiteId};

use crate::context::{Guard, ThreadContext};
use crate::images::Registry;
use crate::runtime::{diag, Runtime};

/// Image defining the target a site resolved to. Sites bound to one of the
/// agent's wrappers report the library that implements the real function.
fn callee_image(rt: &Runtime, reg: &Registry, site: SiteId) -> Option<ImageId> {
    let target = rt.table.target(site)?;
    let img = reg.image_of(target)?;
    if !img.is_agent {
        return Some(img.id);
    }
    let sym = &reg.sites[site as usize].symbol;
    let (_, real) = crate::real::wrapped_targets().into_iter().find(|(n, _)| n == sym)?;
    reg.image_of(real).map(|i| i.id)
}

pub fn ledger(rt: &Runtime, reg: &Registry, ctx: &ThreadContext, now: u64) -> LedgerFile {
    let mut rows = Vec::new();
    for (i, s) in reg.sites.iter().enumerate() {
        let slot = ctx.read_slot(i);
        if slot.count == 0 {
            continue;
        }
        rows.push(LedgerRow {
            site: s.id,
            caller_image: s.caller_image,
            symbol: s.symbol.clone(),
            kind: s.kind,
            count: slot.count,
            // A snapshot may catch the two counters between updates.
            timed_count: slot.timed_count.min(slot.count),
            raw_cycles: slot.raw_cycles,
            attributed_cycles: slot.attributed_cycles.min(slot.raw_cycles),
            callee_image: callee_image(rt, reg, s.id),
        });
    }
    LedgerFile {
        ordinal: ctx.ordinal,
        group: ctx.group,
        hz: rt.hz(),
        total_cycles: now.saturating_sub(ctx.start_cycles),
        images: reg.images.iter().map(|i| (i.id, i.path.clone())).collect(),
        rows,
    }
}

fn write_durable(path: &Path, text: &str) -> io::Result<()> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    f.sync_all()
}

/// Write `text` as `dir/name`, retrying once under `name.retry`.
pub fn write_file(dir: &Path, name: &str, text: &str) -> io::Result<PathBuf> {
    let first = fs::create_dir_all(dir).and_then(|_| {
        let p = dir.join(name);
        write_durable(&p, text).map(|_| p)
    });
    match first {
        Ok(p) => Ok(p),
        Err(_) => {
            let p = dir.join(format!("{name}.retry"));
            write_durable(&p, text).map(|_| p)
        }
    }
}

fn pid() -> u32 {
    // SAFETY: getpid has no preconditions.
    unsafe { libc::getpid() as u32 }
}

/// Persist one thread's ledger, once.
pub fn persist_context(rt: &Runtime, ctx: *mut ThreadContext) {
    // SAFETY: callers guarantee the context is live.
    let c = unsafe { &*ctx };
    if c.persisted.swap(true, Ordering::AcqRel) {
        return;
    }
    let _g = Guard::new();
    let now = read_cycles();
    let text = {
        let mut reg = rt.registry.lock();
        if c.overflows > 0 {
            reg.warn(format!("thread {}: shadow stack full {} times; deeper calls counted only", c.ordinal, c.overflows));
        }
        if c.mismatches > 0 {
            reg.warn(format!("thread {}: {} returns did not match the top frame", c.ordinal, c.mismatches));
        }
        if c.saturations > 0 {
            reg.warn(format!("thread {}: counters saturated", c.ordinal));
        }
        ledger(rt, &reg, c, now).to_text()
    };
    if let Err(e) = write_file(&rt.cfg.out_dir, &format::file_name(pid(), c.ordinal), &text) {
        diag(&format!("cannot write ledger for thread {}: {e}", c.ordinal));
    }
}

/// Snapshot every live thread into `out/snapshot-<gen>/`.
pub fn snapshot(rt: &Runtime, generation: u32) {
    let _g = Guard::new();
    let dir = rt.cfg.out_dir.join(format!("snapshot-{generation:04}"));
    let live = rt.contexts.lock();
    for &c in live.iter() {
        // SAFETY: contexts in the live list are not freed while it is locked.
        let ctx = unsafe { &*(c as *const ThreadContext) };
        let text = {
            let reg = rt.registry.lock();
            ledger(rt, &reg, ctx, read_cycles()).to_text()
        };
        if let Err(e) = write_file(&dir, &format::file_name(pid(), ctx.ordinal), &text) {
            diag(&format!("cannot write snapshot: {e}"));
        }
    }
}

/// Warnings gathered during the run go next to the ledgers rather than onto
/// the program's stderr.
pub fn write_warnings(rt: &Runtime) {
    let _g = Guard::new();
    let text = {
        let reg = rt.registry.lock();
        if reg.warnings.is_empty() {
            return;
        }
        reg.warnings.join("\n") + "\n"
    };
    let _ = write_file(&rt.cfg.out_dir, &format!("xflow.{}.warnings", pid()), &text);
}
