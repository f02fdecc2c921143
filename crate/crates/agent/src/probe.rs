//! Introspection hooks a test program can look up with dlsym. They are not
//! part of the tracing path.

use std::collections::BTreeSet;
use std::ffi::{c_char, c_int, c_long, CStr};
use std::sync::atomic::Ordering;

use xflow_core::elf::Elf;

use crate::context::{self, Guard};
use crate::hot::{ACTIVE, RESOLVER_ENTRIES};
use crate::images::{read_maps, Registry};
use crate::runtime;

/// Depth of the calling thread's shadow stack, -1 when the thread is not
/// traced and -2 when frame slots do not strictly grow toward the caller.
#[unsafe(no_mangle)]
pub extern "C" fn xflow_probe_shadow_depth() -> c_long {
    let ctx = context::current();
    if ctx.is_null() {
        return -1;
    }
    // SAFETY: the context belongs to this thread.
    let frames = unsafe { &*ctx }.frames();
    if frames.windows(2).any(|w| w[1].return_slot >= w[0].return_slot) {
        return -2;
    }
    frames.len() as c_long
}

#[unsafe(no_mangle)]
pub extern "C" fn xflow_probe_resolver_entries() -> u64 {
    RESOLVER_ENTRIES.load(Ordering::Relaxed)
}

#[unsafe(no_mangle)]
pub extern "C" fn xflow_probe_site_count() -> u64 {
    runtime::get().map_or(0, |rt| rt.table.len() as u64)
}

#[unsafe(no_mangle)]
pub extern "C" fn xflow_probe_active_threads() -> u64 {
    ACTIVE.load(Ordering::Relaxed)
}

/// Raw cycles the calling thread has recorded so far for calls to `symbol`,
/// over all sites.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn xflow_probe_raw_cycles(symbol: *const c_char) -> u64 {
    let Some(rt) = runtime::get() else { return 0 };
    let ctx = context::current();
    if ctx.is_null() || symbol.is_null() {
        return 0;
    }
    let symbol = CStr::from_ptr(symbol).to_string_lossy();
    let _g = Guard::new();
    let reg = rt.registry.lock();
    reg.sites.iter().filter(|s| s.symbol == symbol).map(|s| (*ctx).read_slot(s.id as usize).raw_cycles).sum()
}

/// Cycle-counter frequency the ledgers will report.
#[unsafe(no_mangle)]
pub extern "C" fn xflow_probe_hz() -> u64 {
    runtime::get().map_or(0, |rt| rt.hz())
}

/// 1 when planning the loaded images again yields exactly the installed
/// sites, 0 when it does not, -1 when untraced or on error.
#[unsafe(no_mangle)]
pub extern "C" fn xflow_probe_replan() -> c_int {
    let Some(rt) = runtime::get() else { return -1 };
    let _g = Guard::new();
    let reg = rt.registry.lock();
    match reg.replan_keys(&rt.env()) {
        Ok(k) => (k == reg.installed_keys()) as c_int,
        Err(_) => -1,
    }
}

fn plt_matches_file(reg: &Registry) -> bool {
    let patched: BTreeSet<_> = reg.sites.iter().filter(|s| s.plt_entry_addr.is_some()).map(|s| s.caller_image).collect();
    for id in patched {
        let img = &reg.images[id as usize];
        let Ok(data) = std::fs::read(&img.path) else { return false };
        let Ok(elf) = Elf::parse(&data) else { return false };
        for name in [".plt", ".plt.sec"] {
            let Some(sec) = elf.section(name) else { continue };
            let Ok(want) = elf.section_data(sec) else { return false };
            let addr = sec.addr.wrapping_add(img.base);
            // SAFETY: the section lies in a mapped executable segment.
            let have = unsafe { std::slice::from_raw_parts(addr as *const u8, want.len()) };
            if have != want {
                return false;
            }
        }
    }
    true
}

/// Undo every patch. 0 when all PLT code is byte-identical to the files
/// afterwards, 1 when it is not, -1 when untraced or restoring failed.
#[unsafe(no_mangle)]
pub extern "C" fn xflow_probe_detach() -> c_int {
    let Some(rt) = runtime::get() else { return -1 };
    let _g = Guard::new();
    let mut reg = rt.registry.lock();
    let Ok(map) = read_maps() else { return -1 };
    let mut records = std::mem::take(&mut reg.patches);
    let restored = crate::patch::restore(&map, &mut records);
    let same = crate::patch::matches_original(&records);
    reg.patches = records;
    reg.map = map;
    if restored.is_err() {
        return -1;
    }
    (!(same && plt_matches_file(&reg))) as c_int
}
