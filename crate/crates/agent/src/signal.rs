//! Mid-run snapshots on a user-chosen signal. The handler only posts a
//! semaphore; a dedicated thread does the writing.

use std::cell::UnsafeCell;
use std::ffi::{c_int, c_void};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};

use crate::runtime::{self, diag, Runtime};

struct Sem(UnsafeCell<libc::sem_t>);
// SAFETY: sem_t is designed for concurrent use through its API.
unsafe impl Sync for Sem {}

static SEM: Sem = Sem(UnsafeCell::new(unsafe { std::mem::zeroed() }));
static READY: AtomicBool = AtomicBool::new(false);
static GENERATION: AtomicU32 = AtomicU32::new(0);

extern "C" fn on_signal(_: c_int) {
    if READY.load(Ordering::Relaxed) {
        // SAFETY: sem_post is async-signal-safe.
        unsafe { libc::sem_post(SEM.0.get()) };
    }
}

extern "C-unwind" fn dumper(_: *mut c_void) -> *mut c_void {
    loop {
        // SAFETY: the semaphore was initialized before this thread started.
        if unsafe { libc::sem_wait(SEM.0.get()) } != 0 {
            continue;
        }
        if let Some(rt) = runtime::get() {
            let generation = GENERATION.fetch_add(1, Ordering::Relaxed) + 1;
            crate::persist::snapshot(rt, generation);
        }
    }
}

pub fn install(rt: &Runtime) {
    let Some(sig) = rt.cfg.dump_signal else { return };
    // SAFETY: one-time setup before any handler can run.
    unsafe {
        if libc::sem_init(SEM.0.get(), 0, 0) != 0 {
            diag("cannot create the snapshot semaphore; dumps disabled");
            return;
        }
        let mut t: libc::pthread_t = 0;
        if crate::real::pthread_create()(&mut t, std::ptr::null(), dumper, std::ptr::null_mut()) != 0 {
            diag("cannot start the snapshot thread; dumps disabled");
            return;
        }
        libc::pthread_detach(t);
        READY.store(true, Ordering::Release);
        let mut sa: libc::sigaction = std::mem::zeroed();
        sa.sa_sigaction = on_signal as *const () as usize;
        sa.sa_flags = libc::SA_RESTART;
        libc::sigemptyset(&mut sa.sa_mask);
        if libc::sigaction(sig, &sa, std::ptr::null_mut()) != 0 {
            diag(&format!("cannot install handler for signal {sig}; dumps disabled"));
        }
    }
}

/// The snapshot thread does not survive fork.
pub fn after_fork() {
    READY.store(false, Ordering::Relaxed);
}
