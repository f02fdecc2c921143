//! Per-thread recording context and the thread-local cell the generated code
//! reads with a single `mov r11, fs:[off]`.

use std::cell::Cell;
use std::io;
use std::ptr;
use std::sync::atomic::{AtomicBool, Ordering};

use xflow_core::{ShadowFrame, SiteSlot};

use crate::table::PAGE;

thread_local! {
    static CTX: Cell<*mut ThreadContext> = const { Cell::new(ptr::null_mut()) };
}

/// `slots` must stay first: segment B loads it with `mov r11, [r11]`.
#[repr(C)]
pub struct ThreadContext {
    pub slots: *mut SiteSlot,
    pub frames: *mut ShadowFrame,
    pub depth: usize,
    pub frame_cap: usize,
    pub slot_cap: usize,
    pub ordinal: u32,
    pub overflow_warned: bool,
    pub group: u64,
    pub start_cycles: u64,
    pub overflows: u64,
    pub mismatches: u64,
    pub saturations: u64,
    pub persisted: AtomicBool,
    map_len: usize,
}

fn round_up(n: usize) -> usize {
    n.div_ceil(PAGE) * PAGE
}

impl ThreadContext {
    /// Map a context with room for `slot_cap` sites and `frame_cap` frames.
    /// Only touched pages consume memory.
    pub fn allocate(ordinal: u32, group: u64, slot_cap: usize, frame_cap: usize, now: u64) -> io::Result<*mut Self> {
        let head = round_up(std::mem::size_of::<Self>());
        let slots_len = round_up(slot_cap * std::mem::size_of::<SiteSlot>());
        let frames_len = round_up(frame_cap * std::mem::size_of::<ShadowFrame>());
        let len = head + slots_len + frames_len;
        // SAFETY: fresh anonymous mapping; zero-filled, which is a valid
        // initial state for slots and frames.
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
        let ctx = base as *mut Self;
        // SAFETY: the head page holds the context.
        unsafe {
            ptr::write(
                ctx,
                Self {
                    slots: base.add(head) as *mut SiteSlot,
                    frames: base.add(head + slots_len) as *mut ShadowFrame,
                    depth: 0,
                    frame_cap,
                    slot_cap,
                    ordinal,
                    overflow_warned: false,
                    group,
                    start_cycles: now,
                    overflows: 0,
                    mismatches: 0,
                    saturations: 0,
                    persisted: AtomicBool::new(false),
                    map_len: len,
                },
            );
        }
        Ok(ctx)
    }

    /// # Safety
    /// `ctx` must come from [`Self::allocate`] and be unreachable afterwards.
    pub unsafe fn free(ctx: *mut Self) {
        let len = (*ctx).map_len;
        libc::munmap(ctx as *mut libc::c_void, len);
    }

    /// Read one slot. Other threads may read while the owner writes, so
    /// each field is read individually.
    pub fn read_slot(&self, site: usize) -> SiteSlot {
        if site >= self.slot_cap {
            return SiteSlot::default();
        }
        // SAFETY: in bounds of the slot region.
        unsafe { ptr::read_volatile(self.slots.add(site)) }
    }

    /// Forget all counts (fork child). The shadow stack is kept: the thread
    /// is still inside the intercepted fork call.
    pub fn reset_counts(&mut self, now: u64) {
        let len = round_up(self.slot_cap * std::mem::size_of::<SiteSlot>());
        // SAFETY: private anonymous pages read back as zero after DONTNEED.
        unsafe { libc::madvise(self.slots as *mut libc::c_void, len, libc::MADV_DONTNEED) };
        self.start_cycles = now;
        self.overflows = 0;
        self.mismatches = 0;
        self.saturations = 0;
        self.persisted.store(false, Ordering::Relaxed);
    }

    pub fn frames(&self) -> &[ShadowFrame] {
        // SAFETY: depth <= frame_cap and the region is mapped.
        unsafe { std::slice::from_raw_parts(self.frames, self.depth) }
    }
}

pub fn current() -> *mut ThreadContext {
    CTX.with(|c| c.get())
}

pub fn set_current(ctx: *mut ThreadContext) {
    CTX.with(|c| c.set(ctx));
}

#[cfg(target_arch = "x86_64")]
fn thread_pointer() -> u64 {
    let tp: u64;
    // SAFETY: fs:0 holds the thread pointer on x86-64 Linux.
    unsafe { std::arch::asm!("mov {}, fs:0", out(reg) tp, options(nostack, readonly, preserves_flags)) };
    tp
}

/// Offset of the context cell from the thread pointer, if it fits the
/// 32-bit displacement the generated code uses.
pub fn tls_offset() -> Option<i32> {
    let cell = CTX.with(|c| c as *const _ as u64);
    i32::try_from(cell.wrapping_sub(thread_pointer()) as i64).ok()
}

/// True when this thread's cell sits at `off` from its thread pointer, as it
/// does for every thread when the cell lives in static TLS.
pub fn offset_holds(off: i32) -> bool {
    tls_offset() == Some(off)
}

/// Suspends tracing of the current thread while agent bookkeeping runs.
pub struct Guard {
    prev: *mut ThreadContext,
}

impl Guard {
    pub fn new() -> Self {
        let prev = CTX.with(|c| c.replace(ptr::null_mut()));
        Self { prev }
    }
}

impl Drop for Guard {
    fn drop(&mut self) {
        set_current(self.prev);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_is_stable_across_threads() {
        let off = tls_offset().unwrap();
        let other = std::thread::spawn(tls_offset).join().unwrap();
        assert_eq!(Some(off), other);
    }

    #[test]
    fn allocate_and_reset() {
        let ctx = ThreadContext::allocate(3, 7, 1000, 16, 5).unwrap();
        unsafe {
            let c = &mut *ctx;
            assert_eq!(c.slots as usize, ctx as usize + PAGE);
            (*c.slots.add(999)).count = 4;
            assert_eq!(c.read_slot(999).count, 4);
            assert_eq!(c.read_slot(5000), SiteSlot::default());
            c.reset_counts(9);
            assert_eq!(c.read_slot(999).count, 0);
            assert_eq!(c.start_cycles, 9);
            ThreadContext::free(ctx);
        }
    }

    #[test]
    fn guard_restores() {
        let ctx = ThreadContext::allocate(0, 0, 1, 1, 0).unwrap();
        set_current(ctx);
        {
            let _g = Guard::new();
            assert!(current().is_null());
        }
        assert_eq!(current(), ctx);
        set_current(ptr::null_mut());
        unsafe { ThreadContext::free(ctx) };
    }
}
