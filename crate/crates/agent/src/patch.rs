//! Writing PLT stubs and GOT cells, and undoing it.

use std::io;
use std::ptr;
use std::sync::atomic::{AtomicU64, Ordering};

use xflow_core::codegen::{plt_patch, PLT_PATCH_LEN};
use xflow_core::maps::MemoryMap;
use xflow_core::SiteId;

use crate::table::PAGE;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Original {
    Code([u8; PLT_PATCH_LEN]),
    Cell(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRecord {
    pub site: SiteId,
    pub addr: u64,
    pub original: Original,
    pub patched: bool,
}

/// Run `f` with `[lo, hi)` writable, then put every page back to the
/// protection the memory map reports for it.
pub fn with_writable<R>(map: &MemoryMap, lo: u64, hi: u64, f: impl FnOnce() -> R) -> io::Result<R> {
    let page = PAGE as u64;
    let plo = lo & !(page - 1);
    let phi = hi.div_ceil(page) * page;
    let mut spans = Vec::new();
    let mut at = plo;
    while at < phi {
        let e = map
            .region_of(at)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("{at:#x} is not mapped")))?;
        let end = e.end.min(phi);
        spans.push((at, end, e.perms.prot()));
        at = end;
    }
    for &(a, b, prot) in &spans {
        // SAFETY: the span is a mapped, page-aligned range.
        if unsafe { libc::mprotect(a as *mut libc::c_void, (b - a) as usize, prot | libc::PROT_WRITE) } != 0 {
            let err = io::Error::last_os_error();
            restore_prot(&spans);
            return Err(err);
        }
    }
    let r = f();
    restore_prot(&spans);
    Ok(r)
}

fn restore_prot(spans: &[(u64, u64, i32)]) {
    for &(a, b, prot) in spans {
        // SAFETY: restoring the protection the range had before.
        unsafe { libc::mprotect(a as *mut libc::c_void, (b - a) as usize, prot) };
    }
}

fn span<T>(items: &[T], addr: impl Fn(&T) -> u64, len: u64) -> Option<(u64, u64)> {
    let lo = items.iter().map(&addr).min()?;
    let hi = items.iter().map(|i| addr(i) + len).max()?;
    Some((lo, hi))
}

/// Point each `(site, stub, entry)` PLT stub at its shadow entry.
pub fn patch_plt(map: &MemoryMap, writes: &[(SiteId, u64, u64)]) -> (Vec<PatchRecord>, Option<io::Error>) {
    let Some((lo, hi)) = span(writes, |w| w.1, PLT_PATCH_LEN as u64) else {
        return (Vec::new(), None);
    };
    let mut records: Vec<PatchRecord> = writes
        .iter()
        .map(|&(site, stub, _)| {
            let mut orig = [0u8; PLT_PATCH_LEN];
            // SAFETY: the stub lies in a mapped executable section.
            unsafe { ptr::copy_nonoverlapping(stub as *const u8, orig.as_mut_ptr(), PLT_PATCH_LEN) };
            PatchRecord { site, addr: stub, original: Original::Code(orig), patched: false }
        })
        .collect();
    let res = with_writable(map, lo, hi, || {
        for (r, &(_, stub, entry)) in records.iter_mut().zip(writes) {
            let b = plt_patch(entry);
            // SAFETY: the window is writable.
            unsafe { ptr::copy_nonoverlapping(b.as_ptr(), stub as *mut u8, b.len()) };
            r.patched = true;
        }
    });
    (records, res.err())
}

/// Store each `(site, cell, entry)` shadow-entry address into its GOT cell.
pub fn patch_got(map: &MemoryMap, writes: &[(SiteId, u64, u64)]) -> (Vec<PatchRecord>, Option<io::Error>) {
    let Some((lo, hi)) = span(writes, |w| w.1, 8) else {
        return (Vec::new(), None);
    };
    let mut records: Vec<PatchRecord> = writes
        .iter()
        .map(|&(site, cell, _)| PatchRecord {
            site,
            addr: cell,
            original: Original::Cell(unsafe { cell_ref(cell) }.load(Ordering::Relaxed)),
            patched: false,
        })
        .collect();
    let res = with_writable(map, lo, hi, || {
        for (r, &(_, cell, entry)) in records.iter_mut().zip(writes) {
            // SAFETY: the window is writable; cells are 8-byte aligned.
            unsafe { cell_ref(cell) }.store(entry, Ordering::Release);
            r.patched = true;
        }
    });
    (records, res.err())
}

/// # Safety
/// `addr` must be an aligned, mapped 8-byte cell.
unsafe fn cell_ref(addr: u64) -> &'static AtomicU64 {
    &*(addr as *const AtomicU64)
}

/// Write back every original byte sequence and cell value.
pub fn restore(map: &MemoryMap, records: &mut [PatchRecord]) -> io::Result<()> {
    for r in records.iter_mut().filter(|r| r.patched) {
        let len = match r.original {
            Original::Code(_) => PLT_PATCH_LEN as u64,
            Original::Cell(_) => 8,
        };
        with_writable(map, r.addr, r.addr + len, || match &r.original {
            // SAFETY: the window is writable.
            Original::Code(b) => unsafe { ptr::copy_nonoverlapping(b.as_ptr(), r.addr as *mut u8, b.len()) },
            Original::Cell(v) => unsafe { cell_ref(r.addr) }.store(*v, Ordering::Release),
        })?;
        r.patched = false;
    }
    Ok(())
}

/// True when the memory at each record matches what was captured before
/// patching.
pub fn matches_original(records: &[PatchRecord]) -> bool {
    records.iter().all(|r| match &r.original {
        Original::Code(b) => {
            let mut now = [0u8; PLT_PATCH_LEN];
            // SAFETY: the stub is mapped and readable.
            unsafe { ptr::copy_nonoverlapping(r.addr as *const u8, now.as_mut_ptr(), PLT_PATCH_LEN) };
            now == *b
        }
        Original::Cell(v) => unsafe { cell_ref(r.addr) }.load(Ordering::Relaxed) == *v,
    })
}
