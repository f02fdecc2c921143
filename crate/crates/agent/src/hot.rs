//! The two handlers the shared stubs call on every timed invocation. They
//! allocate nothing, take no locks and call nothing that could be
//! intercepted.

use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU64, Ordering};

use xflow_core::shadow::{Closed, EnterAction, ShadowStack};
use xflow_core::timing::read_cycles;
use xflow_core::SiteId;

use crate::context::ThreadContext;
use crate::table::ShadowTable;

pub static TABLE: AtomicPtr<ShadowTable> = AtomicPtr::new(ptr::null_mut());
/// Threads currently traced; the folding divisor.
pub static ACTIVE: AtomicU64 = AtomicU64::new(1);
/// Lazy resolutions performed through an entry's resolver handshake.
pub static RESOLVER_ENTRIES: AtomicU64 = AtomicU64::new(0);

#[inline(always)]
fn table() -> &'static ShadowTable {
    // SAFETY: entries exist only after the table has been published, and the
    // table is never freed.
    unsafe { &*TABLE.load(Ordering::Relaxed) }
}

#[inline(always)]
unsafe fn stack(ctx: &mut ThreadContext) -> ShadowStack<'_> {
    let frames = std::slice::from_raw_parts_mut(ctx.frames, ctx.frame_cap);
    ShadowStack::new(frames, &mut ctx.depth)
}

#[inline(always)]
unsafe fn fold(ctx: &mut ThreadContext, closed: Closed, scale: u64) {
    if closed.site as usize >= ctx.slot_cap {
        return;
    }
    let active = ACTIVE.load(Ordering::Relaxed).max(1);
    let slot = &mut *ctx.slots.add(closed.site as usize);
    if slot.add_duration(closed.duration, active, scale) {
        ctx.saturations += 1;
    }
}

/// Called by `common_enter` with the caller's return-address slot. Returns
/// where to jump: the real API, or the entry's resolver handshake.
pub unsafe extern "C" fn on_enter(ctx: *mut ThreadContext, site: u32, slot: *mut u64) -> u64 {
    let t = table();
    let target = match t.target(site) {
        Some(a) => a,
        None => {
            RESOLVER_ENTRIES.fetch_add(1, Ordering::Relaxed);
            t.resolve_addr(site)
        }
    };
    let c = &mut *ctx;
    let ret = *slot;
    let now = read_cycles();
    let action = stack(c).enter(site, slot as u64, ret, now, |s, a| t.is_post(s, a));
    match action {
        EnterAction::Push => *slot = t.post_addr(site),
        EnterAction::TailReplace(closed) => {
            fold(c, closed, t.rate() as u64);
            *slot = t.post_addr(site);
        }
        EnterAction::Overflow => {
            c.overflows += 1;
            c.overflow_warned = true;
        }
    }
    target
}

/// Called by `common_exit` when a timed API returns into its post segment.
/// Returns the caller's real return address.
pub unsafe extern "C" fn on_exit(ctx: *mut ThreadContext, site: u32) -> u64 {
    let now = read_cycles();
    if ctx.is_null() {
        fatal(b"xflow: API returned on a thread without a context\n");
    }
    let t = table();
    let c = &mut *ctx;
    let Some(r) = stack(c).exit(site as SiteId, now) else {
        fatal(b"xflow: API returned with an empty shadow stack\n");
    };
    if let Some(closed) = r.closed {
        fold(c, closed, t.rate() as u64);
    }
    if r.mismatch {
        c.mismatches += 1;
    }
    let _ = t.target(site);
    r.real_return_addr
}

/// Lost return address: nothing sensible can continue.
pub fn fatal(msg: &[u8]) -> ! {
    // SAFETY: write(2) and abort are async-signal-safe and never intercepted
    // from the agent's own image.
    unsafe {
        libc::write(2, msg.as_ptr() as *const libc::c_void, msg.len());
        libc::abort();
    }
}
