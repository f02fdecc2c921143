//! The shadow table mapping: handler cells, per-site data records, the shared
//! stubs and the per-site entry code, in that order.
//!
//! ```text
//! [header page][data: cap x 48][stub page][code: cap x ENTRY_SIZE]
//! ```
//!
//! Everything sits in one mapping so every rip-relative reference from the
//! generated code stays within 32 bits.

use std::io;
use std::ptr;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use xflow_core::codegen::{self, CodegenError, EntryParams, StubParams, ENTRY_SIZE};
use xflow_core::{SiteId, SiteKind};

pub const PAGE: usize = 4096;
pub const DEFAULT_CAPACITY: u32 = 65536;

/// Side record of one entry. The generated code reads `resolved` and
/// `resolver`; the runtime owns the rest.
#[repr(C)]
pub struct DataRecord {
    pub resolved: AtomicU64,
    /// Runtime address of PLT0, jumped through by the resolver handshake.
    pub resolver: u64,
    /// GOT cell the dynamic linker fills on lazy resolution, or 0.
    pub got_cell: u64,
    /// Values of an unresolved cell lie in `lazy_lo..lazy_hi`.
    pub lazy_lo: u64,
    pub lazy_hi: u64,
    pub caller: u32,
    pub kind: u32,
}

const _: () = assert!(std::mem::size_of::<DataRecord>() == 48);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSpec {
    pub caller: u32,
    pub kind: SiteKind,
    /// Known target, or 0 when the site is still unresolved.
    pub resolved: u64,
    pub got_cell: u64,
    pub lazy: (u64, u64),
    /// (relocation index, PLT0 runtime address) for PLT sites.
    pub resolver: Option<(u32, u64)>,
}

#[derive(Debug)]
pub enum TableError {
    Full,
    Codegen(CodegenError),
    Io(io::Error),
}

impl std::fmt::Display for TableError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Full => write!(f, "shadow table is full"),
            Self::Codegen(e) => write!(f, "code generation failed: {e}"),
            Self::Io(e) => write!(f, "cannot update shadow table: {e}"),
        }
    }
}

pub struct ShadowTable {
    base: *mut u8,
    len: usize,
    cap: u32,
    data: *mut DataRecord,
    code: u64,
    code_len: usize,
    enter_stub: u64,
    exit_stub: u64,
    tls_offset: i32,
    rate: u32,
    post_resolver: usize,
    post_plain: usize,
    resolve_off: usize,
    used: AtomicU32,
}

// SAFETY: the mapping is process-wide; mutation goes through the install lock
// (allocation) or atomics (resolved cells).
unsafe impl Send for ShadowTable {}
unsafe impl Sync for ShadowTable {}

fn round_up(n: usize, to: usize) -> usize {
    n.div_ceil(to) * to
}

fn mprotect(addr: u64, len: usize, prot: i32) -> io::Result<()> {
    // SAFETY: callers pass page-aligned ranges inside the table mapping.
    if unsafe { libc::mprotect(addr as *mut libc::c_void, len, prot) } != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

impl ShadowTable {
    pub fn new(cap: u32, tls_offset: i32, rate: u32, on_enter: u64, on_exit: u64) -> io::Result<Self> {
        let data_len = round_up(cap as usize * std::mem::size_of::<DataRecord>(), PAGE);
        let code_len = round_up(cap as usize * ENTRY_SIZE, PAGE);
        let len = PAGE + data_len + PAGE + code_len;
        // SAFETY: fresh anonymous mapping.
        let base = unsafe {
            libc::mmap(
                ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                -1,
                0,
            )
        };
        if base == libc::MAP_FAILED {
            return Err(io::Error::last_os_error());
        }
        let base = base as *mut u8;
        let b = base as u64;
        // SAFETY: the header page is ours and writable.
        unsafe {
            ptr::write(base as *mut u64, on_enter);
            ptr::write(base.add(8) as *mut u64, on_exit);
        }
        let stubs = b + (PAGE + data_len) as u64;
        let code = stubs + PAGE as u64;
        let s = codegen::emit_common_stubs(&StubParams {
            base: stubs,
            ctx_tls_offset: tls_offset,
            on_enter_cell: b,
            on_exit_cell: b + 8,
        })
        .map_err(|e| io::Error::other(e.to_string()))?;
        assert!(s.bytes.len() <= PAGE);
        // SAFETY: the stub page is inside the mapping.
        unsafe { ptr::copy_nonoverlapping(s.bytes.as_ptr(), stubs as *mut u8, s.bytes.len()) };
        mprotect(b, PAGE, libc::PROT_READ)?;
        mprotect(stubs, PAGE + code_len, libc::PROT_READ | libc::PROT_EXEC)?;

        let with = codegen::entry_layout(rate, true);
        let without = codegen::entry_layout(rate, false);
        Ok(Self {
            base,
            len,
            cap,
            data: base.wrapping_add(PAGE) as *mut DataRecord,
            code,
            code_len,
            enter_stub: stubs + s.enter as u64,
            exit_stub: stubs + s.exit as u64,
            tls_offset,
            rate,
            post_resolver: with.post.start,
            post_plain: without.post.start,
            resolve_off: with.resolve,
            used: AtomicU32::new(0),
        })
    }

    pub fn capacity(&self) -> u32 {
        self.cap
    }

    pub fn len(&self) -> u32 {
        self.used.load(Ordering::Acquire)
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    #[inline(always)]
    pub fn record(&self, site: SiteId) -> &DataRecord {
        debug_assert!(site < self.cap);
        // SAFETY: site ids come from `allocate`, so they are below `cap`.
        unsafe { &*self.data.add(site as usize) }
    }

    #[inline(always)]
    pub fn entry_addr(&self, site: SiteId) -> u64 {
        self.code + site as u64 * ENTRY_SIZE as u64
    }

    #[inline(always)]
    pub fn post_addr(&self, site: SiteId) -> u64 {
        let off = if self.record(site).resolver != 0 { self.post_resolver } else { self.post_plain };
        self.entry_addr(site) + off as u64
    }

    #[inline(always)]
    pub fn is_post(&self, site: SiteId, addr: u64) -> bool {
        site < self.len() && addr == self.post_addr(site)
    }

    /// Start of the resolver handshake inside a PLT site's entry.
    #[inline(always)]
    pub fn resolve_addr(&self, site: SiteId) -> u64 {
        self.entry_addr(site) + self.resolve_off as u64
    }

    #[inline(always)]
    pub fn contains_code(&self, addr: u64) -> bool {
        addr >= self.code && addr < self.code + self.code_len as u64
    }

    pub fn contains(&self, addr: u64) -> bool {
        let b = self.base as u64;
        addr >= b && addr < b + self.len as u64
    }

    /// Non-zero resolved target of `site`, capturing it from the GOT cell
    /// once the dynamic linker has filled it.
    #[inline(always)]
    pub fn target(&self, site: SiteId) -> Option<u64> {
        let rec = self.record(site);
        let r = rec.resolved.load(Ordering::Relaxed);
        if r != 0 {
            return Some(r);
        }
        self.capture(rec)
    }

    #[inline(always)]
    pub fn capture(&self, rec: &DataRecord) -> Option<u64> {
        if rec.got_cell == 0 {
            return None;
        }
        // SAFETY: got_cell is an aligned GOT cell of a mapped image.
        let v = unsafe { ptr::read_volatile(rec.got_cell as *const u64) };
        if v == 0 || (v >= rec.lazy_lo && v < rec.lazy_hi) || self.contains(v) {
            return None;
        }
        rec.resolved.store(v, Ordering::Relaxed);
        Some(v)
    }

    /// Allocate entries for `specs`, all or nothing. Returns the first id;
    /// ids are consecutive. Callers serialize through the install lock.
    pub fn allocate(&self, specs: &[SiteSpec]) -> Result<SiteId, TableError> {
        let first = self.used.load(Ordering::Relaxed);
        if specs.is_empty() {
            return Ok(first);
        }
        let n = u32::try_from(specs.len()).map_err(|_| TableError::Full)?;
        if first.checked_add(n).is_none_or(|end| end > self.cap) {
            return Err(TableError::Full);
        }
        let mut code = Vec::with_capacity(specs.len() * ENTRY_SIZE);
        for (i, s) in specs.iter().enumerate() {
            let site = first + i as u32;
            let rec_addr = self.data.wrapping_add(site as usize) as u64;
            let e = codegen::emit_entry(&EntryParams {
                site,
                entry_addr: self.entry_addr(site),
                ctx_tls_offset: self.tls_offset,
                timing_rate: self.rate,
                resolved_cell: rec_addr,
                resolver: s.resolver.map(|(idx, _)| (idx, rec_addr + 8)),
                common_enter: self.enter_stub,
                common_exit: self.exit_stub,
            })
            .map_err(TableError::Codegen)?;
            code.extend_from_slice(&e.bytes);
        }
        for (i, s) in specs.iter().enumerate() {
            let site = first + i as u32;
            // SAFETY: unpublished record inside the data region.
            unsafe {
                ptr::write(
                    self.data.add(site as usize),
                    DataRecord {
                        resolved: AtomicU64::new(s.resolved),
                        resolver: s.resolver.map_or(0, |(_, plt0)| plt0),
                        got_cell: s.got_cell,
                        lazy_lo: s.lazy.0,
                        lazy_hi: s.lazy.1,
                        caller: s.caller,
                        kind: s.kind.code(),
                    },
                );
            }
        }
        let start = self.entry_addr(first);
        let lo = start & !(PAGE as u64 - 1);
        let hi = round_up((start as usize) + code.len(), PAGE) as u64;
        let rwx = libc::PROT_READ | libc::PROT_WRITE | libc::PROT_EXEC;
        mprotect(lo, (hi - lo) as usize, rwx).map_err(TableError::Io)?;
        // SAFETY: the window is writable and the range is unpublished.
        unsafe { ptr::copy_nonoverlapping(code.as_ptr(), start as *mut u8, code.len()) };
        mprotect(lo, (hi - lo) as usize, libc::PROT_READ | libc::PROT_EXEC).map_err(TableError::Io)?;
        self.used.store(first + n, Ordering::Release);
        Ok(first)
    }
}
