//! Process-wide agent state, initialization, thread lifecycle and shutdown.

use std::ffi::c_void;
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::OnceLock;

use xflow_core::config::AgentConfig;
use xflow_core::timing::{read_cycles, Anchor};

use crate::context::{self, Guard, ThreadContext};
use crate::hot::{self, ACTIVE, TABLE};
use crate::images::{Registry, ScanEnv};
use crate::lock::SpinLock;
use crate::persist;
use crate::table::{ShadowTable, DEFAULT_CAPACITY};

pub struct Runtime {
    pub cfg: AgentConfig,
    pub table: &'static ShadowTable,
    pub registry: SpinLock<Registry>,
    /// Live thread contexts. Lock order: `contexts` before `registry`.
    pub contexts: SpinLock<Vec<usize>>,
    pub anchor: Anchor,
    pub hz: OnceLock<u64>,
    pub next_ordinal: AtomicU32,
    pub finalized: AtomicBool,
    pub tls_offset: i32,
    pub bind_now: bool,
    pub agent_addr: u64,
    pub linker_addr: u64,
    pub exe_addr: u64,
    tls_warned: AtomicBool,
}

static RUNTIME: OnceLock<Runtime> = OnceLock::new();

pub fn get() -> Option<&'static Runtime> {
    RUNTIME.get()
}

/// Print a diagnostic with tracing suspended.
pub fn diag(msg: &str) {
    let _g = Guard::new();
    eprintln!("xflow: {msg}");
}

impl Runtime {
    pub fn env(&self) -> ScanEnv<'_> {
        ScanEnv {
            table: self.table,
            deny: &self.cfg.deny,
            bind_now: self.bind_now,
            agent_addr: self.agent_addr,
            linker_addr: self.linker_addr,
            exe_addr: self.exe_addr,
        }
    }

    /// Re-scan after a dynamic load. Returns the number of new sites.
    pub fn rescan(&self) -> usize {
        let _g = Guard::new();
        let mut reg = self.registry.lock();
        match reg.scan(&self.env()) {
            Ok(s) => s.sites,
            Err(e) => {
                reg.warn(format!("rescan failed: {e}"));
                0
            }
        }
    }

    pub fn hz(&self) -> u64 {
        *self.hz.get_or_init(|| {
            let span = self.anchor.at.elapsed();
            let hz = match self.anchor.hz() {
                Some(h) if span >= xflow_core::timing::MIN_CALIBRATION_SPAN => h,
                _ => xflow_core::timing::calibrate(xflow_core::timing::MIN_CALIBRATION_SPAN),
            };
            hz.round() as u64
        })
    }
}

/// Agent start-up: plan and hook every loaded image, then attach the main
/// thread.
pub fn init() {
    if RUNTIME.get().is_some() {
        return;
    }
    let (cfg, warnings) = AgentConfig::from_env();
    for w in &warnings {
        diag(w);
    }
    let Some(tls_offset) = context::tls_offset() else {
        diag("thread-local context is out of reach; tracing disabled");
        return;
    };
    let table = match ShadowTable::new(
        DEFAULT_CAPACITY,
        tls_offset,
        cfg.timing_rate,
        hot::on_enter as *const () as u64,
        hot::on_exit as *const () as u64,
    ) {
        Ok(t) => Box::leak(Box::new(t)),
        Err(e) => {
            diag(&format!("cannot allocate the shadow table: {e}; tracing disabled"));
            return;
        }
    };
    TABLE.store(table as *mut ShadowTable, Ordering::Release);
    // SAFETY: getauxval only reads the auxiliary vector.
    let (linker_addr, exe_addr) = unsafe { (libc::getauxval(libc::AT_BASE), libc::getauxval(libc::AT_PHDR)) };
    let rt = Runtime {
        table,
        registry: SpinLock::new(Registry::default()),
        contexts: SpinLock::new(Vec::new()),
        anchor: Anchor::now(),
        hz: OnceLock::new(),
        next_ordinal: AtomicU32::new(1),
        finalized: AtomicBool::new(false),
        tls_offset,
        bind_now: std::env::var_os("LD_BIND_NOW").is_some_and(|v| !v.is_empty()),
        agent_addr: init as fn() as usize as u64,
        linker_addr,
        exe_addr,
        tls_warned: AtomicBool::new(false),
        cfg,
    };
    if RUNTIME.set(rt).is_err() {
        return;
    }
    let rt = get().expect("just set");
    {
        let mut reg = rt.registry.lock();
        if let Err(e) = reg.scan(&rt.env()) {
            drop(reg);
            diag(&format!("cannot read the process memory map: {e}; tracing disabled"));
            return;
        }
        if let Some(path) = &rt.cfg.site_dump {
            if let Err(e) = std::fs::write(path, reg.site_dump()) {
                reg.warn(format!("cannot write site dump {}: {e}", path.display()));
            }
        }
    }
    match ThreadContext::allocate(0, 0, table.capacity() as usize, rt.cfg.shadow_depth, read_cycles()) {
        Ok(ctx) => {
            rt.contexts.lock().push(ctx as usize);
            context::set_current(ctx);
        }
        Err(e) => diag(&format!("cannot allocate the main thread context: {e}")),
    }
    crate::signal::install(rt);
    // SAFETY: plain function pointers with static lifetime.
    unsafe { libc::pthread_atfork(Some(before_fork), Some(after_fork_parent), Some(after_fork_child)) };
}

extern "C" {
    fn __cxa_thread_atexit_impl(dtor: unsafe extern "C" fn(*mut c_void), obj: *mut c_void, dso: *mut c_void) -> i32;
}

static DSO_ANCHOR: u8 = 0;

/// Give the calling thread a context. Runs in the thread-start trampoline,
/// before the application's start routine.
pub fn attach_thread(group: u64) {
    let Some(rt) = get() else { return };
    if rt.finalized.load(Ordering::Acquire) || !context::current().is_null() {
        return;
    }
    if !context::offset_holds(rt.tls_offset) {
        if !rt.tls_warned.swap(true, Ordering::Relaxed) {
            diag("thread-local context moved on a new thread; such threads are not traced");
        }
        return;
    }
    let ordinal = rt.next_ordinal.fetch_add(1, Ordering::Relaxed);
    let ctx = match ThreadContext::allocate(ordinal, group, rt.table.capacity() as usize, rt.cfg.shadow_depth, read_cycles()) {
        Ok(c) => c,
        Err(e) => {
            diag(&format!("cannot allocate a thread context: {e}"));
            return;
        }
    };
    rt.contexts.lock().push(ctx as usize);
    ACTIVE.fetch_add(1, Ordering::Relaxed);
    // SAFETY: registers a destructor for this thread with a live context.
    unsafe {
        __cxa_thread_atexit_impl(thread_exit, ctx as *mut c_void, &DSO_ANCHOR as *const u8 as *mut c_void);
    }
    context::set_current(ctx);
}

/// Thread-local destructor: runs on return from the start routine, on
/// pthread_exit and on cancellation.
unsafe extern "C" fn thread_exit(p: *mut c_void) {
    let ctx = p as *mut ThreadContext;
    context::set_current(std::ptr::null_mut());
    let Some(rt) = get() else { return };
    persist::persist_context(rt, ctx);
    let finalized = {
        let mut live = rt.contexts.lock();
        live.retain(|&c| c != ctx as usize);
        rt.finalized.load(Ordering::Acquire)
    };
    ACTIVE.fetch_sub(1, Ordering::Relaxed);
    // After shutdown started the main thread may still be reading it.
    if !finalized {
        ThreadContext::free(ctx);
    }
}

/// Process exit: persist every live thread, including ones that never exit.
pub fn finish() {
    let Some(rt) = get() else { return };
    // Tracing of the exiting thread stays off from here on.
    std::mem::forget(Guard::new());
    {
        let live = rt.contexts.lock();
        rt.finalized.store(true, Ordering::Release);
        for &c in live.iter() {
            persist::persist_context(rt, c as *mut ThreadContext);
        }
    }
    persist::write_warnings(rt);
}

extern "C" fn before_fork() {
    if let Some(rt) = get() {
        rt.contexts.raw_lock();
        rt.registry.raw_lock();
    }
}

extern "C" fn after_fork_parent() {
    if let Some(rt) = get() {
        // SAFETY: taken in before_fork by this thread.
        unsafe {
            rt.registry.raw_unlock();
            rt.contexts.raw_unlock();
        }
    }
}

/// The child has one thread: the one that forked. It becomes the child's
/// main thread with fresh counts.
extern "C" fn after_fork_child() {
    let Some(rt) = get() else { return };
    // SAFETY: taken in before_fork; only this thread exists now.
    unsafe {
        rt.registry.raw_unlock();
        rt.contexts.raw_unlock();
    }
    let cur = context::current();
    {
        let mut live = rt.contexts.lock();
        live.clear();
        if !cur.is_null() {
            live.push(cur as usize);
        }
    }
    if !cur.is_null() {
        // SAFETY: the context belongs to this thread.
        let c = unsafe { &mut *cur };
        c.reset_counts(read_cycles());
        c.ordinal = 0;
        c.group = 0;
    }
    ACTIVE.store(1, Ordering::Relaxed);
    rt.next_ordinal.store(1, Ordering::Relaxed);
    rt.finalized.store(false, Ordering::Release);
    crate::signal::after_fork();
}
